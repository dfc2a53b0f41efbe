//! Time integration of the four model families and recovery of constraint
//! forces and actuation torques.
//!
//! | actuation   | wheels | state                       |
//! |-------------|--------|-----------------------------|
//! | kinematic   | no-skid| `(x, y, theta)`             |
//! | kinematic   | skid   | `(x, y, theta)` + rates     |
//! | semi-passive| no-skid| `(x, y, theta, phi1)` + rates |
//! | semi-passive| skid   | `(x, y, theta, phi1)` + rates |

use std::io::Write;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fmt::{fmt_opt, fmt_sig};
use crate::gait::{GaitError, GaitSpec};
use crate::model::{
    self, constraint_matrix, constraint_rate_term, det_wb, dynamics_terms, Coords, ParamError, Rates, RobotParams,
    Vec5,
};
use crate::ode::{DormandPrince, OdeError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Actuation {
    /// Both joint angles prescribed.
    Kinematic,
    /// `phi2` prescribed, `phi1` driven by a torsion spring-damper.
    SemiPassive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WheelModel {
    /// Nonholonomic no-skid constraints enforced.
    NoSkid,
    /// Constraints dropped, lateral motion resisted by viscous skid friction.
    ViscousSkid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub actuation: Actuation,
    pub wheels: WheelModel,
    pub roll_dissipation: bool,
}

const KINEMATIC_PASSIVE: [usize; 3] = [0, 1, 2];
const KINEMATIC_ACTIVE: [usize; 2] = [3, 4];
const SEMI_PASSIVE_PASSIVE: [usize; 4] = [0, 1, 2, 3];
const SEMI_PASSIVE_ACTIVE: [usize; 1] = [4];

impl ModelConfig {
    pub fn new(actuation: Actuation, wheels: WheelModel, roll_dissipation: bool) -> Self {
        Self {
            actuation,
            wheels,
            roll_dissipation,
        }
    }

    /// Coordinates integrated by the dynamics (unprescribed).
    pub fn passive_indices(&self) -> &'static [usize] {
        match self.actuation {
            Actuation::Kinematic => &KINEMATIC_PASSIVE,
            Actuation::SemiPassive => &SEMI_PASSIVE_PASSIVE,
        }
    }

    /// Prescribed coordinates.
    pub fn active_indices(&self) -> &'static [usize] {
        match self.actuation {
            Actuation::Kinematic => &KINEMATIC_ACTIVE,
            Actuation::SemiPassive => &SEMI_PASSIVE_ACTIVE,
        }
    }

    /// The kinematic no-skid model is first order in the body pose only.
    pub fn has_dynamic_state(&self) -> bool {
        !(self.actuation == Actuation::Kinematic && self.wheels == WheelModel::NoSkid)
    }

    pub fn label(&self) -> String {
        format!(
            "{}/{}{}",
            match self.actuation {
                Actuation::Kinematic => "kinematic",
                Actuation::SemiPassive => "semi-passive",
            },
            match self.wheels {
                WheelModel::NoSkid => "no-skid",
                WheelModel::ViscousSkid => "skid",
            },
            if self.roll_dissipation { "+roll" } else { "" }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOpts {
    pub rtol: f64,
    pub atol: f64,
    /// Upper bound on the step; `None` means one fiftieth of the gait period.
    pub max_step: Option<f64>,
    /// Threshold on `|det W_b|`; `None` means `1e-4 h l`.
    pub singularity_eps: Option<f64>,
    /// Largest accepted 1-norm condition number of the constrained system.
    pub max_condition: f64,
    /// Output samples per gait period.
    pub samples_per_cycle: usize,
}

impl Default for SolverOpts {
    fn default() -> Self {
        Self {
            rtol: 1e-6,
            atol: 1e-8,
            max_step: None,
            singularity_eps: None,
            max_condition: 1e12,
            samples_per_cycle: 200,
        }
    }
}

impl SolverOpts {
    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: &str| Err(EngineError::InvalidInput(m.to_string()));
        if !(self.rtol > 0.0 && self.rtol.is_finite()) {
            return bad("rtol must be > 0");
        }
        if !(self.atol > 0.0 && self.atol.is_finite()) {
            return bad("atol must be > 0");
        }
        if matches!(self.max_step, Some(h) if !(h > 0.0)) {
            return bad("max_step must be > 0");
        }
        if matches!(self.singularity_eps, Some(e) if !(e >= 0.0)) {
            return bad("singularity_eps must be >= 0");
        }
        if self.samples_per_cycle < 4 {
            return bad("samples_per_cycle must be >= 4");
        }
        Ok(())
    }

    pub fn singularity_eps_for(&self, p: &RobotParams) -> f64 {
        self.singularity_eps.unwrap_or(1e-4 * p.h * p.l)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error(
        "singular configuration{}: |det W_b| = {det_wb:.3e} at phi1 = {:.4} deg, phi2 = {:.4} deg \
         (boundedness residual {boundedness_residual:.3e})",
        t.map(|t| format!(" at t = {t:.6} s")).unwrap_or_default(),
        q.phi1.to_degrees(),
        q.phi2.to_degrees()
    )]
    SingularConfiguration {
        t: Option<f64>,
        q: Coords,
        det_wb: f64,
        boundedness_residual: f64,
    },
    #[error("constrained system ill-conditioned (condition number {condition:.3e})")]
    IllConditioned { condition: f64 },
    #[error("integrator step size collapsed to {h:.3e} s at t = {t:.6} s")]
    StepSizeCollapse { t: f64, h: f64 },
    #[error("non-finite state encountered at t = {t:.6} s")]
    NonFinite { t: f64 },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Gait(#[from] GaitError),
}

impl From<OdeError<EngineError>> for EngineError {
    fn from(e: OdeError<EngineError>) -> Self {
        match e {
            OdeError::Rhs(e) => e,
            OdeError::StepSizeCollapse { t, h } => EngineError::StepSizeCollapse { t, h },
            OdeError::TooManySteps(n) => EngineError::StepSizeCollapse {
                t: f64::NAN,
                h: 1.0 / n as f64,
            },
        }
    }
}

/// Actuation torques; `tau1` is undefined when joint 1 is passive.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct JointTorques {
    pub tau1: Option<f64>,
    pub tau2: Option<f64>,
}

impl JointTorques {
    /// Power delivered by the actuators.
    pub fn power(&self, qd: &Rates) -> f64 {
        self.tau1.map_or(0.0, |t| t * qd.phi1) + self.tau2.map_or(0.0, |t| t * qd.phi2)
    }
}

/// Body rates of the kinematic no-skid model, `qd_b = -W_b^{-1} W_s qd_s`.
pub fn kinematic_body_rates(
    q: &Coords,
    phi1dot: f64,
    phi2dot: f64,
    p: &RobotParams,
    singularity_eps: f64,
) -> Result<Vector3<f64>, EngineError> {
    let det = det_wb(q, p);
    if det.abs() <= singularity_eps {
        return Err(EngineError::SingularConfiguration {
            t: None,
            q: *q,
            det_wb: det,
            boundedness_residual: model::boundedness_condition(q, phi1dot, phi2dot),
        });
    }
    let w = constraint_matrix(q, p);
    let rhs = -(w.shape() * nalgebra::Vector2::new(phi1dot, phi2dot));
    let wb: Matrix3<f64> = w.body();
    wb.lu().solve(&rhs).ok_or(EngineError::SingularConfiguration {
        t: None,
        q: *q,
        det_wb: det,
        boundedness_residual: model::boundedness_condition(q, phi1dot, phi2dot),
    })
}

/// Accelerations, constraint forces and actuation torques at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccelerationSolution {
    pub qdd: Vec5,
    pub lambda: Option<Vector3<f64>>,
    pub tau: JointTorques,
}

fn norm1(m: &DMatrix<f64>) -> f64 {
    m.column_iter().map(|c| c.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

fn torques_from_rows(cfg: &ModelConfig, residual: &Vec5) -> JointTorques {
    match cfg.actuation {
        Actuation::Kinematic => JointTorques {
            tau1: Some(residual[model::PHI1]),
            tau2: Some(residual[model::PHI2]),
        },
        Actuation::SemiPassive => JointTorques {
            tau1: None,
            tau2: Some(residual[model::PHI2]),
        },
    }
}

/// Solve the no-skid differential-algebraic layer
/// `[[M_pp, -W_p^T], [W_p, 0]] (qdd_p, Lambda) = rhs` for the unprescribed
/// accelerations and constraint forces, then recover the actuation torques
/// from the prescribed rows.
pub fn solve_constrained_dynamics(
    q: &Coords,
    qd: &Rates,
    qdd_active: &[f64],
    p: &RobotParams,
    cfg: &ModelConfig,
    max_condition: f64,
) -> Result<AccelerationSolution, EngineError> {
    if cfg.wheels != WheelModel::NoSkid {
        return Err(EngineError::InvalidInput(
            "constrained dynamics requires the no-skid wheel model".into(),
        ));
    }
    let pi = cfg.passive_indices();
    let ai = cfg.active_indices();
    if qdd_active.len() != ai.len() {
        return Err(EngineError::InvalidInput(format!(
            "expected {} prescribed accelerations, got {}",
            ai.len(),
            qdd_active.len()
        )));
    }
    let terms = dynamics_terms(q, qd, p, cfg);
    let w = constraint_matrix(q, p).w;
    let wdq = constraint_rate_term(q, qd, p);
    let np = pi.len();
    let n = np + 3;

    let mut a = DMatrix::zeros(n, n);
    let mut rhs = DVector::zeros(n);
    for (r, &i) in pi.iter().enumerate() {
        for (c, &j) in pi.iter().enumerate() {
            a[(r, c)] = terms.mass[(i, j)];
        }
        for k in 0..3 {
            a[(r, np + k)] = -w[(k, i)];
            a[(np + k, r)] = w[(k, i)];
        }
        let mut coupling = 0.0;
        for (c, &j) in ai.iter().enumerate() {
            coupling += terms.mass[(i, j)] * qdd_active[c];
        }
        rhs[r] = -(coupling + terms.velocity[i] + terms.potential[i] - terms.dissipative[i]);
    }
    for k in 0..3 {
        let mut wa = 0.0;
        for (c, &j) in ai.iter().enumerate() {
            wa += w[(k, j)] * qdd_active[c];
        }
        rhs[np + k] = -(wa + wdq[k]);
    }

    let inv = a.clone().try_inverse().ok_or(EngineError::IllConditioned {
        condition: f64::INFINITY,
    })?;
    let condition = norm1(&a) * norm1(&inv);
    if !(condition <= max_condition) {
        return Err(EngineError::IllConditioned { condition });
    }
    let sol = inv * rhs;

    let mut qdd = Vec5::zeros();
    for (r, &i) in pi.iter().enumerate() {
        qdd[i] = sol[r];
    }
    for (c, &j) in ai.iter().enumerate() {
        qdd[j] = qdd_active[c];
    }
    let lambda = Vector3::new(sol[np], sol[np + 1], sol[np + 2]);
    let residual = terms.mass * qdd + terms.velocity + terms.potential - w.transpose() * lambda - terms.dissipative;
    Ok(AccelerationSolution {
        qdd,
        lambda: Some(lambda),
        tau: torques_from_rows(cfg, &residual),
    })
}

/// Accelerations of the unprescribed coordinates when the wheels may skid:
/// `M_pp qdd_p = -(M_pa qdd_a + B_p + G_p - Fd_p)`.
pub fn skid_dynamics_rhs(
    q: &Coords,
    qd: &Rates,
    qdd_active: &[f64],
    p: &RobotParams,
    cfg: &ModelConfig,
) -> Result<AccelerationSolution, EngineError> {
    if cfg.wheels != WheelModel::ViscousSkid {
        return Err(EngineError::InvalidInput("skid dynamics requires the viscous-skid wheel model".into()));
    }
    let pi = cfg.passive_indices();
    let ai = cfg.active_indices();
    if qdd_active.len() != ai.len() {
        return Err(EngineError::InvalidInput(format!(
            "expected {} prescribed accelerations, got {}",
            ai.len(),
            qdd_active.len()
        )));
    }
    if !q.is_finite() || !qd.is_finite() || qdd_active.iter().any(|v| !v.is_finite()) {
        return Err(EngineError::NonFinite { t: f64::NAN });
    }
    let terms = dynamics_terms(q, qd, p, cfg);
    let np = pi.len();
    let mpp = DMatrix::from_fn(np, np, |r, c| terms.mass[(pi[r], pi[c])]);
    let rhs = DVector::from_fn(np, |r, _| {
        let i = pi[r];
        let coupling: f64 = ai.iter().zip(qdd_active).map(|(&j, a)| terms.mass[(i, j)] * a).sum();
        -(coupling + terms.velocity[i] + terms.potential[i] - terms.dissipative[i])
    });
    let chol = mpp.cholesky().ok_or(EngineError::IllConditioned {
        condition: f64::INFINITY,
    })?;
    let sol = chol.solve(&rhs);
    let mut qdd = Vec5::zeros();
    for (r, &i) in pi.iter().enumerate() {
        qdd[i] = sol[r];
    }
    for (c, &j) in ai.iter().enumerate() {
        qdd[j] = qdd_active[c];
    }
    let residual = terms.mass * qdd + terms.velocity + terms.potential - terms.dissipative;
    Ok(AccelerationSolution {
        qdd,
        lambda: None,
        tau: torques_from_rows(cfg, &residual),
    })
}

/// One output sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub q: Coords,
    pub qd: Rates,
    /// Constraint forces; only defined for no-skid models.
    pub lambda: Option<[f64; 3]>,
    pub tau: JointTorques,
    pub v_par: [f64; 3],
    pub v_perp: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SolverDiagnostics {
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    pub rhs_evals: usize,
    pub min_abs_det_wb: f64,
}

/// Sampled solution with the parameters that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub params: RobotParams,
    pub samples: Vec<Sample>,
    pub diagnostics: SolverDiagnostics,
}

pub const TRAJECTORY_CSV_HEADER: [&str; 22] = [
    "t", "x", "y", "theta", "phi1", "phi2", "xdot", "ydot", "thetadot", "phi1dot", "phi2dot", "lambda1", "lambda2",
    "lambda3", "tau1", "tau2", "vpar0", "vpar1", "vpar2", "vperp0", "vperp1", "vperp2",
];

fn hermite(t0: f64, t1: f64, y0: f64, y1: f64, d0: f64, d1: f64, t: f64) -> (f64, f64) {
    let h = t1 - t0;
    let s = (t - t0) / h;
    let s2 = s * s;
    let s3 = s2 * s;
    let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
    let h10 = s3 - 2.0 * s2 + s;
    let h01 = -2.0 * s3 + 3.0 * s2;
    let h11 = s3 - s2;
    let val = h00 * y0 + h10 * h * d0 + h01 * y1 + h11 * h * d1;
    let dh00 = (6.0 * s2 - 6.0 * s) / h;
    let dh10 = 3.0 * s2 - 4.0 * s + 1.0;
    let dh01 = (-6.0 * s2 + 6.0 * s) / h;
    let dh11 = 3.0 * s2 - 2.0 * s;
    let der = dh00 * y0 + dh10 * d0 + dh01 * y1 + dh11 * d1;
    (val, der)
}

impl Trajectory {
    pub fn new(params: RobotParams) -> Self {
        Self {
            params,
            samples: Vec::new(),
            diagnostics: SolverDiagnostics {
                min_abs_det_wb: f64::INFINITY,
                ..Default::default()
            },
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        self.samples.iter().map(|s| s.t)
    }

    pub fn start_time(&self) -> Option<f64> {
        self.samples.first().map(|s| s.t)
    }

    pub fn end_time(&self) -> Option<f64> {
        self.samples.last().map(|s| s.t)
    }

    /// Cubic Hermite interpolation of coordinates and rates, using the stored
    /// rates as slopes. Returns `None` outside the sampled span.
    pub fn interpolate(&self, t: f64) -> Option<(Coords, Rates)> {
        let s = &self.samples;
        if s.is_empty() || t < s[0].t || t > s[s.len() - 1].t {
            return None;
        }
        let idx = s.partition_point(|x| x.t <= t);
        if idx == s.len() {
            let last = s[s.len() - 1];
            return Some((last.q, last.qd));
        }
        if idx == 0 {
            return Some((s[0].q, s[0].qd));
        }
        let (a, b) = (&s[idx - 1], &s[idx]);
        if t == a.t {
            return Some((a.q, a.qd));
        }
        let qa = a.q.to_array();
        let qb = b.q.to_array();
        let da = a.qd.to_array();
        let db = b.qd.to_array();
        let mut q = [0.0; 5];
        let mut qd = [0.0; 5];
        for i in 0..5 {
            let (v, d) = hermite(a.t, b.t, qa[i], qb[i], da[i], db[i], t);
            q[i] = v;
            qd[i] = d;
        }
        Some((
            Coords::new(q[0], q[1], q[2], q[3], q[4]),
            Rates::new(qd[0], qd[1], qd[2], qd[3], qd[4]),
        ))
    }

    /// Samples with `t0 <= t <= t1`.
    pub fn window(&self, t0: f64, t1: f64) -> &[Sample] {
        let a = self.samples.partition_point(|s| s.t < t0);
        let b = self.samples.partition_point(|s| s.t <= t1);
        &self.samples[a..b.max(a)]
    }

    /// Write the trajectory as CSV. Undefined quantities are left empty.
    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(TRAJECTORY_CSV_HEADER)?;
        for s in &self.samples {
            let mut row: Vec<String> = Vec::with_capacity(22);
            row.push(fmt_sig(s.t));
            row.extend(s.q.to_array().iter().map(|v| fmt_sig(*v)));
            row.extend(s.qd.to_array().iter().map(|v| fmt_sig(*v)));
            match s.lambda {
                Some(l) => row.extend(l.iter().map(|v| fmt_sig(*v))),
                None => row.extend(std::iter::repeat_n(String::new(), 3)),
            }
            row.push(fmt_opt(s.tau.tau1));
            row.push(fmt_opt(s.tau.tau2));
            row.extend(s.v_par.iter().map(|v| fmt_sig(*v)));
            row.extend(s.v_perp.iter().map(|v| fmt_sig(*v)));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Incremental simulation of one model family. Output samples fall on the
/// global grid `k * period / samples_per_cycle`.
#[derive(Debug, Clone)]
pub struct Simulation {
    cfg: ModelConfig,
    gait: GaitSpec,
    params: RobotParams,
    solver: DormandPrince,
    eps: f64,
    max_condition: f64,
    dt: f64,
    t: f64,
    z: Vec<f64>,
    h_next: Option<f64>,
    next_sample: u64,
    det_sign: f64,
}

impl Simulation {
    pub fn new(cfg: ModelConfig, gait: GaitSpec, params: RobotParams, opts: SolverOpts) -> Result<Self, EngineError> {
        params.validate()?;
        gait.validate()?;
        opts.validate()?;
        if gait.mode != cfg.actuation {
            return Err(EngineError::InvalidInput(format!(
                "gait mode {:?} does not match model actuation {:?}",
                gait.mode, cfg.actuation
            )));
        }
        if cfg.actuation == Actuation::SemiPassive && (gait.gamma1 - params.gamma1).abs() > 1e-12 {
            return Err(EngineError::InvalidInput(format!(
                "spring free angle mismatch: gait gamma1 = {} rad, params gamma1 = {} rad",
                gait.gamma1, params.gamma1
            )));
        }
        let tp = gait.period();
        let solver = DormandPrince {
            rtol: opts.rtol,
            atol: opts.atol,
            max_step: opts.max_step.unwrap_or(tp / 50.0),
            ..Default::default()
        };
        let eps = opts.singularity_eps_for(&params);
        let mut sim = Self {
            cfg,
            gait,
            params,
            solver,
            eps,
            max_condition: opts.max_condition,
            dt: tp / opts.samples_per_cycle as f64,
            t: 0.0,
            z: Vec::new(),
            h_next: None,
            next_sample: 0,
            det_sign: 0.0,
        };
        sim.z = sim.initial_state()?;
        let (q, _) = sim.full_state(0.0, &sim.z)?;
        sim.det_sign = det_wb(&q, &params).signum();
        Ok(sim)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn gait(&self) -> &GaitSpec {
        &self.gait
    }

    pub fn params(&self) -> &RobotParams {
        &self.params
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn state(&self) -> Result<(Coords, Rates), EngineError> {
        self.full_state(self.t, &self.z)
    }

    fn np(&self) -> usize {
        self.cfg.passive_indices().len()
    }

    fn initial_state(&self) -> Result<Vec<f64>, EngineError> {
        let g = self.gait.eval(0.0);
        let p = &self.params;
        match (self.cfg.actuation, self.cfg.wheels) {
            (Actuation::Kinematic, WheelModel::NoSkid) => Ok(vec![0.0; 3]),
            (Actuation::Kinematic, WheelModel::ViscousSkid) => {
                let s1 = g.phi1.unwrap_or_default();
                let q = Coords::new(0.0, 0.0, 0.0, s1.angle, g.phi2.angle);
                let body = kinematic_body_rates(&q, s1.rate, g.phi2.rate, p, self.eps).unwrap_or_else(|_| Vector3::zeros());
                Ok(vec![0.0, 0.0, 0.0, body[0], body[1], body[2]])
            }
            (Actuation::SemiPassive, wheels) => {
                let q = Coords::new(0.0, 0.0, 0.0, p.gamma1, g.phi2.angle);
                let body = kinematic_body_rates(&q, 0.0, g.phi2.rate, p, self.eps).unwrap_or_else(|_| Vector3::zeros());
                let mut z = vec![0.0, 0.0, 0.0, p.gamma1, body[0], body[1], body[2], 0.0];
                if wheels == WheelModel::NoSkid {
                    let qd = Rates::new(z[4], z[5], z[6], z[7], g.phi2.rate);
                    let fixed = project_semi_passive_rates(&q, &qd, p)?;
                    z[4..8].copy_from_slice(&[fixed.x, fixed.y, fixed.theta, fixed.phi1]);
                }
                Ok(z)
            }
        }
    }

    /// Reconstruct full coordinates and rates at time `t` from state `z`.
    fn full_state(&self, t: f64, z: &[f64]) -> Result<(Coords, Rates), EngineError> {
        let g = self.gait.eval(t);
        match (self.cfg.actuation, self.cfg.wheels) {
            (Actuation::Kinematic, WheelModel::NoSkid) => {
                let s1 = g.phi1.unwrap_or_default();
                let q = Coords::new(z[0], z[1], z[2], s1.angle, g.phi2.angle);
                let body = kinematic_body_rates(&q, s1.rate, g.phi2.rate, &self.params, self.eps).map_err(|e| {
                    match e {
                        EngineError::SingularConfiguration {
                            q,
                            det_wb,
                            boundedness_residual,
                            ..
                        } => EngineError::SingularConfiguration {
                            t: Some(t),
                            q,
                            det_wb,
                            boundedness_residual,
                        },
                        other => other,
                    }
                })?;
                Ok((q, Rates::new(body[0], body[1], body[2], s1.rate, g.phi2.rate)))
            }
            (Actuation::Kinematic, WheelModel::ViscousSkid) => {
                let s1 = g.phi1.unwrap_or_default();
                Ok((
                    Coords::new(z[0], z[1], z[2], s1.angle, g.phi2.angle),
                    Rates::new(z[3], z[4], z[5], s1.rate, g.phi2.rate),
                ))
            }
            (Actuation::SemiPassive, _) => Ok((
                Coords::new(z[0], z[1], z[2], z[3], g.phi2.angle),
                Rates::new(z[4], z[5], z[6], z[7], g.phi2.rate),
            )),
        }
    }

    fn prescribed_accels(&self, t: f64) -> ([f64; 2], usize) {
        let g = self.gait.eval(t);
        match self.cfg.actuation {
            Actuation::Kinematic => ([g.phi1.unwrap_or_default().accel, g.phi2.accel], 2),
            Actuation::SemiPassive => ([g.phi2.accel, 0.0], 1),
        }
    }

    fn accelerations(&self, t: f64, q: &Coords, qd: &Rates) -> Result<AccelerationSolution, EngineError> {
        let (acc, na) = self.prescribed_accels(t);
        match self.cfg.wheels {
            WheelModel::NoSkid => {
                solve_constrained_dynamics(q, qd, &acc[..na], &self.params, &self.cfg, self.max_condition)
            }
            WheelModel::ViscousSkid => skid_dynamics_rhs(q, qd, &acc[..na], &self.params, &self.cfg),
        }
    }

    fn rhs(&self, t: f64, z: &[f64], dz: &mut [f64]) -> Result<(), EngineError> {
        if z.iter().any(|v| !v.is_finite()) {
            // Let the integrator reject the step.
            dz.iter_mut().for_each(|v| *v = f64::NAN);
            return Ok(());
        }
        let (q, qd) = self.full_state(t, z)?;
        if !self.cfg.has_dynamic_state() {
            dz.copy_from_slice(&[qd.x, qd.y, qd.theta]);
            return Ok(());
        }
        let sol = self.accelerations(t, &q, &qd)?;
        let pi = self.cfg.passive_indices();
        let np = pi.len();
        let qdv = qd.to_vector();
        for (r, &i) in pi.iter().enumerate() {
            dz[r] = qdv[i];
            dz[np + r] = sol.qdd[i];
        }
        Ok(())
    }

    fn make_sample(&self, t: f64, z: &[f64]) -> Result<Sample, EngineError> {
        let (q, mut qd) = self.full_state(t, z)?;
        if self.cfg.actuation == Actuation::SemiPassive && self.cfg.wheels == WheelModel::NoSkid {
            qd = project_semi_passive_rates(&q, &qd, &self.params)?;
        }
        if !q.is_finite() || !qd.is_finite() {
            return Err(EngineError::NonFinite { t });
        }
        let sol = self.accelerations(t, &q, &qd)?;
        let (v_par, v_perp) = model::wheel_velocities(&q, &qd, &self.params);
        Ok(Sample {
            t,
            q,
            qd,
            lambda: sol.lambda.map(|l| [l[0], l[1], l[2]]),
            tau: sol.tau,
            v_par,
            v_perp,
        })
    }

    /// Integrate to `t_end`, appending the grid samples in `(t, t_end]` to
    /// `traj` (and the initial sample on the first call).
    pub fn advance(&mut self, t_end: f64, traj: &mut Trajectory) -> Result<(), EngineError> {
        if !(t_end.is_finite()) {
            return Err(EngineError::InvalidInput("end time must be finite".into()));
        }
        if self.next_sample == 0 {
            let s = self.make_sample(0.0, &self.z)?;
            traj.diagnostics.min_abs_det_wb = traj.diagnostics.min_abs_det_wb.min(det_wb(&s.q, &self.params).abs());
            traj.samples.push(s);
            self.next_sample = 1;
        }
        if t_end <= self.t {
            return Ok(());
        }
        let mut grid = Vec::new();
        loop {
            let ts = self.next_sample as f64 * self.dt;
            if ts > t_end * (1.0 + 1e-14) {
                break;
            }
            grid.push(ts);
            self.next_sample += 1;
        }
        // Land exactly on the last grid point when it coincides with t_end.
        let t_stop = match grid.last() {
            Some(&g) if g >= t_end => g,
            _ => t_end,
        };

        let semi_no_skid = self.cfg.actuation == Actuation::SemiPassive && self.cfg.wheels == WheelModel::NoSkid;
        let kin_no_skid = !self.cfg.has_dynamic_state();
        let np = self.np();
        let mut z = std::mem::take(&mut self.z);
        let mut det_sign = self.det_sign;
        let mut min_det = traj.diagnostics.min_abs_det_wb;
        let this = &*self;
        let mut pending: Vec<Sample> = Vec::with_capacity(grid.len());

        let stats = this.solver.integrate(
            |t, y: &[f64], dy: &mut [f64]| this.rhs(t, y, dy),
            this.t,
            &mut z,
            t_stop,
            this.h_next,
            &grid,
            |t, y: &mut [f64]| -> Result<bool, EngineError> {
                if y.iter().any(|v| !v.is_finite()) {
                    return Err(EngineError::NonFinite { t });
                }
                let (q, qd) = this.full_state(t, y)?;
                let det = det_wb(&q, &this.params);
                min_det = min_det.min(det.abs());
                if kin_no_skid {
                    if det.signum() != det_sign && det_sign != 0.0 {
                        return Err(EngineError::SingularConfiguration {
                            t: Some(t),
                            q,
                            det_wb: det,
                            boundedness_residual: model::boundedness_condition(&q, qd.phi1, qd.phi2),
                        });
                    }
                    det_sign = det.signum();
                }
                if semi_no_skid {
                    let fixed = project_semi_passive_rates(&q, &qd, &this.params)?;
                    y[np..np + 4].copy_from_slice(&[fixed.x, fixed.y, fixed.theta, fixed.phi1]);
                    return Ok(true);
                }
                Ok(false)
            },
            |t, y: &[f64]| {
                pending.push(this.make_sample(t, y)?);
                Ok(())
            },
        );
        let stats = stats.map_err(EngineError::from)?;
        self.z = z;
        self.det_sign = det_sign;
        self.t = t_stop;
        self.h_next = Some(stats.next_step);
        traj.samples.extend(pending);
        let d = &mut traj.diagnostics;
        d.accepted_steps += stats.accepted;
        d.rejected_steps += stats.rejected;
        d.rhs_evals += stats.rhs_evals;
        d.min_abs_det_wb = min_det;
        Ok(())
    }
}

/// Mass-weighted projection of semi-passive rates onto the no-skid constraint
/// set, keeping the prescribed `phi2dot`.
pub fn project_semi_passive_rates(q: &Coords, qd: &Rates, p: &RobotParams) -> Result<Rates, EngineError> {
    let idx = SEMI_PASSIVE_PASSIVE;
    let m = model::mass_matrix(q, p);
    let w = constraint_matrix(q, p);
    let mpp = DMatrix::from_fn(4, 4, |r, c| m[(idx[r], idx[c])]);
    let wp = w.columns(&idx);
    let residual = w.w * qd.to_vector();
    let chol = mpp.cholesky().ok_or(EngineError::IllConditioned {
        condition: f64::INFINITY,
    })?;
    let minv_wt = chol.solve(&wp.transpose());
    let schur = &wp * &minv_wt;
    let mult = schur
        .lu()
        .solve(&DVector::from_column_slice(residual.as_slice()))
        .ok_or(EngineError::IllConditioned {
            condition: f64::INFINITY,
        })?;
    let delta = minv_wt * mult;
    Ok(Rates::new(
        qd.x - delta[0],
        qd.y - delta[1],
        qd.theta - delta[2],
        qd.phi1 - delta[3],
        qd.phi2,
    ))
}

/// Simulate from rest-consistent initial conditions over `[0, t_end]`.
pub fn simulate(
    cfg: ModelConfig,
    gait: GaitSpec,
    params: RobotParams,
    t_end: f64,
    opts: SolverOpts,
) -> Result<Trajectory, EngineError> {
    if !(t_end > 0.0 && t_end.is_finite()) {
        return Err(EngineError::InvalidInput(format!("time span must be positive, got {t_end}")));
    }
    let mut sim = Simulation::new(cfg, gait, params, opts)?;
    let mut traj = Trajectory::new(params);
    sim.advance(t_end, &mut traj)?;
    Ok(traj)
}
