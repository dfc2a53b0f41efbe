use std::io::{Read, Write};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::CalibError;
use crate::engines::{ModelConfig, SolverOpts};
use crate::fmt::{fmt_opt, fmt_sig};
use crate::gait::GaitSpec;
use crate::metrics::CycleMetrics;
use crate::model::RobotParams;
use crate::sweep::{steady_state, DEFAULT_MAX_CYCLES, DEFAULT_TOL};

/// Contribution of one record whose simulation fails.
pub const FAILURE_PENALTY: f64 = 1e3;

/// One measured operating point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub omega: f64,
    pub d: f64,
    pub v_bar: f64,
    pub sigma: [f64; 3],
    pub alpha1: Option<f64>,
}

impl ExperimentRecord {
    pub fn from_metrics(omega: f64, m: &CycleMetrics) -> Self {
        Self {
            omega,
            d: m.d,
            v_bar: m.v_bar,
            sigma: m.sigma,
            alpha1: m.alpha1,
        }
    }

    pub fn validate(&self, index: usize) -> Result<(), CalibError> {
        let bad = |reason: &str| {
            Err(CalibError::InvalidRecord {
                index,
                reason: reason.to_string(),
            })
        };
        if !(self.omega.is_finite() && self.omega > 0.0) {
            return bad("omega must be > 0");
        }
        let vals = [self.d, self.v_bar, self.sigma[0], self.sigma[1], self.sigma[2]];
        if vals.iter().chain(self.alpha1.iter()).any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("metrics must be finite and >= 0");
        }
        Ok(())
    }
}

#[derive(Deserialize)]
struct RecordRow {
    omega: f64,
    d_mm: f64,
    vbar_mm_s: f64,
    sigma0: f64,
    sigma1: f64,
    sigma2: f64,
    alpha1_deg: Option<f64>,
}

/// Read records from CSV with header
/// `omega, d_mm, vbar_mm_s, sigma0, sigma1, sigma2, alpha1_deg`.
pub fn read_records<R: Read>(input: R) -> Result<Vec<ExperimentRecord>, CalibError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let mut out = Vec::new();
    for (k, row) in rdr.deserialize().enumerate() {
        let r: RecordRow = row?;
        let rec = ExperimentRecord {
            omega: r.omega,
            d: r.d_mm * 1e-3,
            v_bar: r.vbar_mm_s * 1e-3,
            sigma: [r.sigma0, r.sigma1, r.sigma2],
            alpha1: r.alpha1_deg.map(f64::to_radians),
        };
        rec.validate(k)?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_records<W: Write>(out: W, records: &[ExperimentRecord]) -> Result<(), CalibError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["omega", "d_mm", "vbar_mm_s", "sigma0", "sigma1", "sigma2", "alpha1_deg"])?;
    for r in records {
        w.write_record([
            fmt_sig(r.omega),
            fmt_sig(r.d * 1e3),
            fmt_sig(r.v_bar * 1e3),
            fmt_sig(r.sigma[0]),
            fmt_sig(r.sigma[1]),
            fmt_sig(r.sigma[2]),
            fmt_opt(r.alpha1.map(f64::to_degrees)),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Parameters that can be fitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamId {
    #[serde(rename = "cS0")]
    SkidMiddle,
    #[serde(rename = "cS1")]
    SkidFront,
    #[serde(rename = "cS2")]
    SkidRear,
    #[serde(rename = "cR0")]
    RollMiddle,
    #[serde(rename = "cR1")]
    RollFront,
    #[serde(rename = "cR2")]
    RollRear,
    #[serde(rename = "k_tau")]
    JointStiffness,
    #[serde(rename = "c_tau")]
    JointDamping,
}

impl ParamId {
    pub const ALL: [ParamId; 8] = [
        ParamId::SkidMiddle,
        ParamId::SkidFront,
        ParamId::SkidRear,
        ParamId::RollMiddle,
        ParamId::RollFront,
        ParamId::RollRear,
        ParamId::JointStiffness,
        ParamId::JointDamping,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamId::SkidMiddle => "cS0",
            ParamId::SkidFront => "cS1",
            ParamId::SkidRear => "cS2",
            ParamId::RollMiddle => "cR0",
            ParamId::RollFront => "cR1",
            ParamId::RollRear => "cR2",
            ParamId::JointStiffness => "k_tau",
            ParamId::JointDamping => "c_tau",
        }
    }

    pub fn get(self, p: &RobotParams) -> f64 {
        match self {
            ParamId::SkidMiddle => p.c_skid[0],
            ParamId::SkidFront => p.c_skid[1],
            ParamId::SkidRear => p.c_skid[2],
            ParamId::RollMiddle => p.c_roll[0],
            ParamId::RollFront => p.c_roll[1],
            ParamId::RollRear => p.c_roll[2],
            ParamId::JointStiffness => p.k_tau,
            ParamId::JointDamping => p.c_tau,
        }
    }

    pub fn set(self, p: &mut RobotParams, v: f64) {
        match self {
            ParamId::SkidMiddle => p.c_skid[0] = v,
            ParamId::SkidFront => p.c_skid[1] = v,
            ParamId::SkidRear => p.c_skid[2] = v,
            ParamId::RollMiddle => p.c_roll[0] = v,
            ParamId::RollFront => p.c_roll[1] = v,
            ParamId::RollRear => p.c_roll[2] = v,
            ParamId::JointStiffness => p.k_tau = v,
            ParamId::JointDamping => p.c_tau = v,
        }
    }
}

impl FromStr for ParamId {
    type Err = CalibError;

    /// Accepts `cS0..2`, `cR0..2` (or `kR0..2`), `k_tau`, `c_tau`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let alias = s.strip_prefix("kR").map(|rest| format!("cR{rest}"));
        let key = alias.as_deref().unwrap_or(s);
        ParamId::ALL
            .into_iter()
            .find(|p| p.name() == key)
            .ok_or_else(|| CalibError::UnknownParam(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FreeParam {
    pub id: ParamId,
    pub lower: f64,
    pub upper: f64,
}

impl FreeParam {
    pub fn new(id: ParamId, lower: f64, upper: f64) -> Self {
        Self { id, lower, upper }
    }

    /// Bounds spanning a factor `span` either side of `value`.
    pub fn around(id: ParamId, value: f64, span: f64) -> Self {
        Self::new(id, value / span, value * span)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitWeights {
    pub d: f64,
    pub v: f64,
    pub sigma: f64,
    pub alpha: f64,
}

impl FitWeights {
    pub const KINEMATIC_ASYMMETRIC: FitWeights = FitWeights {
        d: 10.0,
        v: 1.0,
        sigma: 1.0,
        alpha: 0.0,
    };
    pub const KINEMATIC_SYMMETRIC: FitWeights = FitWeights {
        d: 10.0,
        v: 1.0,
        sigma: 0.2,
        alpha: 0.0,
    };
    pub const SEMI_PASSIVE_SYMMETRIC: FitWeights = FitWeights {
        d: 10.0,
        v: 1.0,
        sigma: 1.0,
        alpha: 50.0,
    };

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "kinematic_asymmetric" => Some(Self::KINEMATIC_ASYMMETRIC),
            "kinematic_symmetric" => Some(Self::KINEMATIC_SYMMETRIC),
            "semi_passive_symmetric" => Some(Self::SEMI_PASSIVE_SYMMETRIC),
            _ => None,
        }
    }

    fn all_zero(&self) -> bool {
        self.d == 0.0 && self.v == 0.0 && self.sigma == 0.0 && self.alpha == 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitProblem {
    pub free: Vec<FreeParam>,
    pub weights: FitWeights,
    pub config: ModelConfig,
    /// Gait template; its frequency is replaced by each record's.
    pub gait: GaitSpec,
    pub records: Vec<ExperimentRecord>,
    #[serde(default)]
    pub solver: SolverOpts,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_cycles")]
    pub max_cycles: usize,
}

fn default_tol() -> f64 {
    DEFAULT_TOL
}

fn default_max_cycles() -> usize {
    DEFAULT_MAX_CYCLES
}

impl FitProblem {
    pub fn new(
        free: Vec<FreeParam>,
        weights: FitWeights,
        config: ModelConfig,
        gait: GaitSpec,
        records: Vec<ExperimentRecord>,
    ) -> Self {
        Self {
            free,
            weights,
            config,
            gait,
            records,
            solver: SolverOpts::default(),
            tol: DEFAULT_TOL,
            max_cycles: DEFAULT_MAX_CYCLES,
        }
    }

    pub fn validate(&self) -> Result<(), CalibError> {
        if self.free.is_empty() {
            return Err(CalibError::InvalidProblem("no free parameters".into()));
        }
        for (k, f) in self.free.iter().enumerate() {
            if !(f.lower.is_finite() && f.upper.is_finite() && f.lower < f.upper) {
                return Err(CalibError::InvalidBounds {
                    name: f.id.name(),
                    lower: f.lower,
                    upper: f.upper,
                });
            }
            if self.free[..k].iter().any(|g| g.id == f.id) {
                return Err(CalibError::InvalidProblem(format!("`{}` listed twice", f.id.name())));
            }
        }
        let w = &self.weights;
        if [w.d, w.v, w.sigma, w.alpha].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(CalibError::InvalidProblem("weights must be finite and >= 0".into()));
        }
        if self.records.is_empty() {
            return Err(CalibError::InvalidProblem("no experiment records".into()));
        }
        for (k, r) in self.records.iter().enumerate() {
            r.validate(k)?;
        }
        Ok(())
    }

    /// Parameters with the free entries replaced by `values`.
    pub fn apply(&self, base: &RobotParams, values: &[f64]) -> RobotParams {
        let mut p = *base;
        for (f, v) in self.free.iter().zip(values) {
            f.id.set(&mut p, *v);
        }
        p
    }

    pub fn values(&self, p: &RobotParams) -> Vec<f64> {
        self.free.iter().map(|f| f.id.get(p)).collect()
    }
}

/// Deviations of one record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecordResidual {
    pub omega: f64,
    pub e_d: f64,
    pub e_v: f64,
    pub e_sigma: [f64; 3],
    pub e_alpha: Option<f64>,
    /// Weighted contribution to the objective.
    pub j: f64,
    pub failed: bool,
}

/// `|exp - sim| / exp`, falling back to the absolute deviation when the
/// experimental value is zero.
fn deviation(exp: f64, sim: f64) -> f64 {
    if exp == 0.0 {
        sim.abs()
    } else {
        ((exp - sim) / exp).abs()
    }
}

fn record_residual(fit: &FitProblem, rec: &ExperimentRecord, p: &RobotParams) -> RecordResidual {
    let failed = RecordResidual {
        omega: rec.omega,
        e_d: f64::NAN,
        e_v: f64::NAN,
        e_sigma: [f64::NAN; 3],
        e_alpha: None,
        j: FAILURE_PENALTY,
        failed: true,
    };
    if p.validate().is_err() {
        return failed;
    }
    let run = steady_state(fit.config, fit.gait.with_omega(rec.omega), *p, fit.solver, fit.tol, fit.max_cycles);
    let state = match &run {
        Ok(s) => *s,
        Err(e) => match e.last_state() {
            Some(s) => *s,
            None => return failed,
        },
    };
    let m = state.metrics;
    let w = &fit.weights;
    let e_d = deviation(rec.d, m.d);
    let e_v = deviation(rec.v_bar, m.v_bar);
    let e_sigma = [0, 1, 2].map(|i| deviation(rec.sigma[i], m.sigma[i]));
    let e_alpha = match (rec.alpha1, m.alpha1) {
        (Some(a), Some(b)) => Some(deviation(a, b)),
        _ => None,
    };
    let mut j = w.d * e_d + w.v * e_v + w.sigma * e_sigma.iter().sum::<f64>();
    if w.alpha > 0.0 {
        j += w.alpha * e_alpha.unwrap_or(0.0);
    }
    if !j.is_finite() {
        return failed;
    }
    RecordResidual {
        omega: rec.omega,
        e_d,
        e_v,
        e_sigma,
        e_alpha,
        j,
        failed: false,
    }
}

/// Objective with per-record breakdown. Records are evaluated concurrently.
pub fn objective_detailed(fit: &FitProblem, p: &RobotParams) -> (f64, Vec<RecordResidual>) {
    if fit.weights.all_zero() {
        let zero = fit
            .records
            .iter()
            .map(|r| RecordResidual {
                omega: r.omega,
                e_d: 0.0,
                e_v: 0.0,
                e_sigma: [0.0; 3],
                e_alpha: None,
                j: 0.0,
                failed: false,
            })
            .collect();
        return (0.0, zero);
    }
    let res: Vec<RecordResidual> = fit.records.par_iter().map(|r| record_residual(fit, r, p)).collect();
    (res.iter().map(|r| r.j).sum(), res)
}

/// Weighted sum of normalized deviations over all records.
pub fn objective(fit: &FitProblem, p: &RobotParams) -> f64 {
    objective_detailed(fit, p).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engines::{Actuation, WheelModel};
    use crate::gait::NamedGait;
    use crate::model::ParamPreset;
    use approx::assert_abs_diff_eq;

    fn kin_problem(records: Vec<ExperimentRecord>, weights: FitWeights) -> (FitProblem, RobotParams) {
        let p = RobotParams::preset(ParamPreset::Table1Simulation);
        let free = vec![FreeParam::around(ParamId::SkidMiddle, 100.0, 3.0)];
        (
            FitProblem::new(
                free,
                weights,
                ModelConfig::new(Actuation::Kinematic, WheelModel::NoSkid, false),
                NamedGait::AsymmetricKinematic.spec(1.0),
                records,
            ),
            p,
        )
    }

    fn simulated_record(fit: &FitProblem, p: &RobotParams, omega: f64) -> ExperimentRecord {
        let s = steady_state(fit.config, fit.gait.with_omega(omega), *p, fit.solver, fit.tol, fit.max_cycles).unwrap();
        ExperimentRecord::from_metrics(omega, &s.metrics)
    }

    #[test]
    fn param_names_parse() {
        assert_eq!("cS0".parse::<ParamId>().unwrap(), ParamId::SkidMiddle);
        assert_eq!("kR2".parse::<ParamId>().unwrap(), ParamId::RollRear);
        assert_eq!("c_tau".parse::<ParamId>().unwrap(), ParamId::JointDamping);
        assert!("cS3".parse::<ParamId>().is_err());
        let mut p = RobotParams::preset(ParamPreset::Table2Simulation);
        for id in ParamId::ALL {
            id.set(&mut p, 1.5);
            assert_eq!(id.get(&p), 1.5);
        }
    }

    #[test]
    fn table_weights() {
        assert_eq!(FitWeights::preset("kinematic_asymmetric").unwrap().d, 10.0);
        assert_eq!(FitWeights::KINEMATIC_SYMMETRIC.sigma, 0.2);
        assert_eq!(FitWeights::SEMI_PASSIVE_SYMMETRIC.alpha, 50.0);
    }

    #[test]
    fn matching_metrics_give_zero_objective() {
        let (mut fit, p) = kin_problem(vec![], FitWeights::KINEMATIC_ASYMMETRIC);
        fit.records = vec![simulated_record(&fit, &p, 2.0)];
        // No-skid sigma is zero, so the absolute fallback applies.
        assert_abs_diff_eq!(objective(&fit, &p), 0.0, epsilon = 1e-6);
    }

    #[test]
    fn single_displacement_deviation() {
        let (mut fit, p) = kin_problem(vec![], FitWeights::KINEMATIC_ASYMMETRIC);
        let mut rec = simulated_record(&fit, &p, 2.0);
        rec.d /= 1.1;
        fit.records = vec![rec];
        fit.weights = FitWeights {
            d: 10.0,
            v: 0.0,
            sigma: 0.0,
            alpha: 0.0,
        };
        let (j, res) = objective_detailed(&fit, &p);
        assert_abs_diff_eq!(res[0].e_d, 0.1, epsilon = 1e-9);
        assert_abs_diff_eq!(j, 1.0, epsilon = 1e-8);
    }

    #[test]
    fn zero_weights_short_circuit() {
        let rec = ExperimentRecord {
            omega: 1.0,
            d: 1.0,
            v_bar: 1.0,
            sigma: [1.0; 3],
            alpha1: None,
        };
        let (fit, p) = kin_problem(
            vec![rec],
            FitWeights {
                d: 0.0,
                v: 0.0,
                sigma: 0.0,
                alpha: 0.0,
            },
        );
        assert_eq!(objective(&fit, &p), 0.0);
    }

    #[test]
    fn failed_simulation_is_penalized() {
        let rec = ExperimentRecord {
            omega: 1.0,
            d: 0.1,
            v_bar: 0.1,
            sigma: [0.1; 3],
            alpha1: None,
        };
        let (mut fit, p) = kin_problem(vec![rec, rec], FitWeights::KINEMATIC_SYMMETRIC);
        fit.gait = NamedGait::SymmetricKinematic.spec(1.0);
        assert_eq!(objective(&fit, &p), 2.0 * FAILURE_PENALTY);
    }

    proptest::proptest! {
        #[test]
        fn deviations_are_scale_invariant(e in 1e-3f64..10.0, sim in 0.0f64..10.0, k in 1e-3f64..1e3) {
            proptest::prop_assert!((deviation(e, sim) - deviation(k * e, k * sim)).abs() < 1e-9 * (1.0 + deviation(e, sim)));
        }
    }

    #[test]
    fn records_csv_round_trip() {
        let recs = vec![ExperimentRecord {
            omega: 2.5,
            d: 0.1234,
            v_bar: 0.049,
            sigma: [0.1, 0.2, 0.3],
            alpha1: Some(0.5),
        }];
        let mut buf = Vec::new();
        write_records(&mut buf, &recs).unwrap();
        let back = read_records(buf.as_slice()).unwrap();
        assert_abs_diff_eq!(back[0].d, recs[0].d, epsilon = 1e-12);
        assert_abs_diff_eq!(back[0].alpha1.unwrap(), 0.5, epsilon = 1e-9);
        let bad = "omega,d_mm,vbar_mm_s,sigma0,sigma1,sigma2,alpha1_deg\n0,1,1,0,0,0,\n";
        assert!(matches!(read_records(bad.as_bytes()), Err(CalibError::InvalidRecord { index: 0, .. })));
    }
}
