//! JSON run configuration. Field names carry their units; angles are in
//! degrees and converted to radians on resolution.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use trilink_core::calib::{FitWeights, FreeParam, ParamId};
use trilink_core::engines::{Actuation, ModelConfig, SolverOpts, WheelModel};
use trilink_core::gait::{GaitSpec, NamedGait};
use trilink_core::model::{ParamPreset, RobotParams};
use trilink_core::sweep::{DEFAULT_MAX_CYCLES, DEFAULT_TOL};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub gait: GaitConfig,
    pub params: ParamsConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    pub cycles: Option<f64>,
    pub duration_s: Option<f64>,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub fit: FitConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub actuation: Actuation,
    pub wheels: WheelModel,
    #[serde(default)]
    pub roll_dissipation: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaitConfig {
    pub preset: Option<String>,
    pub mode: Option<Actuation>,
    pub gamma1_deg: Option<f64>,
    pub gamma2_deg: Option<f64>,
    pub alpha1_deg: Option<f64>,
    pub alpha2_deg: Option<f64>,
    pub omega_rad_s: Option<f64>,
    pub phase1_deg: Option<f64>,
    pub phase2_deg: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub table: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
    pub m0_kg: Option<f64>,
    pub m1_kg: Option<f64>,
    pub m2_kg: Option<f64>,
    #[serde(rename = "I0_kg_m2")]
    pub i0_kg_m2: Option<f64>,
    #[serde(rename = "I1_kg_m2")]
    pub i1_kg_m2: Option<f64>,
    #[serde(rename = "I2_kg_m2")]
    pub i2_kg_m2: Option<f64>,
    pub h_m: Option<f64>,
    pub l_m: Option<f64>,
    pub b_m: Option<f64>,
    #[serde(rename = "cR0_kg_per_s")]
    pub c_r0_kg_per_s: Option<f64>,
    #[serde(rename = "cR1_kg_per_s")]
    pub c_r1_kg_per_s: Option<f64>,
    #[serde(rename = "cR2_kg_per_s")]
    pub c_r2_kg_per_s: Option<f64>,
    #[serde(rename = "cS0_Ns_per_m")]
    pub c_s0_ns_per_m: Option<f64>,
    #[serde(rename = "cS1_Ns_per_m")]
    pub c_s1_ns_per_m: Option<f64>,
    #[serde(rename = "cS2_Ns_per_m")]
    pub c_s2_ns_per_m: Option<f64>,
    #[serde(rename = "k_tau_Nm_per_rad")]
    pub k_tau_nm_per_rad: Option<f64>,
    #[serde(rename = "c_tau_Nms_per_rad")]
    pub c_tau_nms_per_rad: Option<f64>,
    pub gamma1_deg: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub rtol: Option<f64>,
    pub atol: Option<f64>,
    pub max_step_s: Option<f64>,
    pub singularity_eps_m2: Option<f64>,
    pub max_condition: Option<f64>,
    pub samples_per_cycle: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub omegas_rad_s: Option<Vec<f64>>,
    pub tol: Option<f64>,
    pub max_cycles: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum WeightsConfig {
    Preset(String),
    Explicit {
        w_d: f64,
        w_v: f64,
        w_sigma: f64,
        #[serde(default)]
        w_alpha: f64,
    },
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub weights: Option<WeightsConfig>,
    #[serde(default)]
    pub free: Vec<String>,
    #[serde(default)]
    pub bounds: BTreeMap<String, [f64; 2]>,
    pub max_evals: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub trajectory: Option<String>,
    pub metrics: Option<String>,
}

pub fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
}

fn positive(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        bail!("`{name}` must be finite and > 0, got {v}")
    }
}

impl ModelSection {
    pub fn resolve(&self) -> ModelConfig {
        ModelConfig::new(self.actuation, self.wheels, self.roll_dissipation)
    }
}

impl GaitConfig {
    /// Gait with `omega_rad_s` required unless `default_omega` is given.
    pub fn resolve(&self, default_omega: Option<f64>) -> Result<GaitSpec> {
        let mut g = match &self.preset {
            Some(name) => NamedGait::from_name(name)
                .ok_or_else(|| anyhow!("unknown gait preset `gait.preset` = {name:?}"))?
                .spec(1.0),
            None => {
                let mode = self
                    .mode
                    .ok_or_else(|| anyhow!("`gait.mode` is required when no gait preset is given"))?;
                let req = |name: &str, v: Option<f64>| v.ok_or_else(|| anyhow!("`gait.{name}` is required"));
                GaitSpec {
                    mode,
                    gamma1: req("gamma1_deg", self.gamma1_deg)?.to_radians(),
                    gamma2: req("gamma2_deg", self.gamma2_deg)?.to_radians(),
                    alpha1: self.alpha1_deg.unwrap_or(0.0).to_radians(),
                    alpha2: req("alpha2_deg", self.alpha2_deg)?.to_radians(),
                    omega: 1.0,
                    phase1: 0.0,
                    phase2: 0.0,
                }
            }
        };
        if let Some(m) = self.mode {
            if self.preset.is_some() && m != g.mode {
                bail!("`gait.mode` conflicts with the gait preset");
            }
        }
        let set = |dst: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *dst = v.to_radians();
            }
        };
        set(&mut g.gamma1, self.gamma1_deg);
        set(&mut g.gamma2, self.gamma2_deg);
        set(&mut g.alpha1, self.alpha1_deg);
        set(&mut g.alpha2, self.alpha2_deg);
        set(&mut g.phase1, self.phase1_deg);
        set(&mut g.phase2, self.phase2_deg);
        g.omega = match (self.omega_rad_s, default_omega) {
            (Some(w), _) => positive("gait.omega_rad_s", w)?,
            (None, Some(w)) => w,
            (None, None) => bail!("`gait.omega_rad_s` is required"),
        };
        g.validate().context("invalid `gait`")?;
        Ok(g)
    }
}

impl ParamsConfig {
    /// Start from the named table (if any) and apply explicit fields. Without
    /// a table every field is required. The spring free angle defaults to the
    /// gait's `gamma1` in semi-passive mode.
    pub fn resolve(&self, gait: Option<&GaitSpec>) -> Result<RobotParams> {
        let base = match (&self.table, &self.variant) {
            (Some(t), v) => {
                let v = v.as_deref().unwrap_or("simulation");
                Some(ParamPreset::from_table(t, v).ok_or_else(|| {
                    anyhow!("unknown parameter preset `params.table` = {t:?}, `params.variant` = {v:?}")
                })?)
            }
            (None, Some(_)) => bail!("`params.variant` given without `params.table`"),
            (None, None) => None,
        }
        .map(RobotParams::preset);
        let pick = |name: &str, v: Option<f64>, from: fn(&RobotParams) -> f64| -> Result<f64> {
            match (v, &base) {
                (Some(v), _) => Ok(v),
                (None, Some(b)) => Ok(from(b)),
                (None, None) => bail!("`params.{name}` is required when no `params.table` is given"),
            }
        };
        let mut p = RobotParams {
            m0: pick("m0_kg", self.m0_kg, |b| b.m0)?,
            m1: pick("m1_kg", self.m1_kg, |b| b.m1)?,
            m2: pick("m2_kg", self.m2_kg, |b| b.m2)?,
            i0: pick("I0_kg_m2", self.i0_kg_m2, |b| b.i0)?,
            i1: pick("I1_kg_m2", self.i1_kg_m2, |b| b.i1)?,
            i2: pick("I2_kg_m2", self.i2_kg_m2, |b| b.i2)?,
            h: pick("h_m", self.h_m, |b| b.h)?,
            l: pick("l_m", self.l_m, |b| b.l)?,
            b: pick("b_m", self.b_m, |b| b.b)?,
            c_roll: [
                pick("cR0_kg_per_s", self.c_r0_kg_per_s, |b| b.c_roll[0])?,
                pick("cR1_kg_per_s", self.c_r1_kg_per_s, |b| b.c_roll[1])?,
                pick("cR2_kg_per_s", self.c_r2_kg_per_s, |b| b.c_roll[2])?,
            ],
            c_skid: [
                pick("cS0_Ns_per_m", self.c_s0_ns_per_m, |b| b.c_skid[0])?,
                pick("cS1_Ns_per_m", self.c_s1_ns_per_m, |b| b.c_skid[1])?,
                pick("cS2_Ns_per_m", self.c_s2_ns_per_m, |b| b.c_skid[2])?,
            ],
            k_tau: pick("k_tau_Nm_per_rad", self.k_tau_nm_per_rad, |b| b.k_tau)?,
            c_tau: pick("c_tau_Nms_per_rad", self.c_tau_nms_per_rad, |b| b.c_tau)?,
            gamma1: 0.0,
        };
        p.gamma1 = match (self.gamma1_deg, gait) {
            (Some(g), _) => g.to_radians(),
            (None, Some(g)) if g.mode == Actuation::SemiPassive => g.gamma1,
            _ => 0.0,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn from_params(p: &RobotParams) -> Self {
        Self {
            table: None,
            variant: None,
            m0_kg: Some(p.m0),
            m1_kg: Some(p.m1),
            m2_kg: Some(p.m2),
            i0_kg_m2: Some(p.i0),
            i1_kg_m2: Some(p.i1),
            i2_kg_m2: Some(p.i2),
            h_m: Some(p.h),
            l_m: Some(p.l),
            b_m: Some(p.b),
            c_r0_kg_per_s: Some(p.c_roll[0]),
            c_r1_kg_per_s: Some(p.c_roll[1]),
            c_r2_kg_per_s: Some(p.c_roll[2]),
            c_s0_ns_per_m: Some(p.c_skid[0]),
            c_s1_ns_per_m: Some(p.c_skid[1]),
            c_s2_ns_per_m: Some(p.c_skid[2]),
            k_tau_nm_per_rad: Some(p.k_tau),
            c_tau_nms_per_rad: Some(p.c_tau),
            gamma1_deg: Some(p.gamma1.to_degrees()),
        }
    }
}

impl SolverConfig {
    pub fn resolve(&self) -> Result<SolverOpts> {
        let d = SolverOpts::default();
        let opts = SolverOpts {
            rtol: self.rtol.unwrap_or(d.rtol),
            atol: self.atol.unwrap_or(d.atol),
            max_step: self.max_step_s,
            singularity_eps: self.singularity_eps_m2,
            max_condition: self.max_condition.unwrap_or(d.max_condition),
            samples_per_cycle: self.samples_per_cycle.unwrap_or(d.samples_per_cycle),
        };
        opts.validate().context("invalid `solver`")?;
        Ok(opts)
    }
}

impl SweepConfig {
    pub fn tol(&self) -> f64 {
        self.tol.unwrap_or(DEFAULT_TOL)
    }

    pub fn max_cycles(&self) -> usize {
        self.max_cycles.unwrap_or(DEFAULT_MAX_CYCLES)
    }
}

impl FitConfig {
    pub fn weights(&self, cfg: &ModelConfig, gait: &GaitSpec) -> Result<FitWeights> {
        match &self.weights {
            Some(WeightsConfig::Preset(name)) => {
                FitWeights::preset(name).ok_or_else(|| anyhow!("unknown weight preset `fit.weights` = {name:?}"))
            }
            Some(WeightsConfig::Explicit {
                w_d,
                w_v,
                w_sigma,
                w_alpha,
            }) => Ok(FitWeights {
                d: *w_d,
                v: *w_v,
                sigma: *w_sigma,
                alpha: *w_alpha,
            }),
            None => {
                let symmetric = gait.gamma1 == 0.0 && gait.gamma2 == 0.0;
                match (cfg.actuation, symmetric) {
                    (Actuation::Kinematic, false) => Ok(FitWeights::KINEMATIC_ASYMMETRIC),
                    (Actuation::Kinematic, true) => Ok(FitWeights::KINEMATIC_SYMMETRIC),
                    (Actuation::SemiPassive, true) => Ok(FitWeights::SEMI_PASSIVE_SYMMETRIC),
                    (Actuation::SemiPassive, false) => {
                        bail!("no weight preset for this configuration; set `fit.weights`")
                    }
                }
            }
        }
    }

    /// Free parameters with bounds; unbounded entries default to a factor of
    /// ten around the initial value.
    pub fn free_params(&self, names: &[String], initial: &RobotParams) -> Result<Vec<FreeParam>> {
        let names = if names.is_empty() { &self.free } else { names };
        if names.is_empty() {
            bail!("no free parameters given (`--free` or `fit.free`)");
        }
        for key in self.bounds.keys() {
            key.parse::<ParamId>().context("in `fit.bounds`")?;
        }
        names
            .iter()
            .map(|n| {
                let id: ParamId = n.parse()?;
                let bounds = self
                    .bounds
                    .iter()
                    .find(|(k, _)| k.parse::<ParamId>().ok() == Some(id))
                    .map(|(_, b)| *b);
                let [lo, hi] = match bounds {
                    Some(b) => b,
                    None => {
                        let v = id.get(initial);
                        if v <= 0.0 {
                            bail!("`fit.bounds.{}` is required when the initial value is {v}", id.name());
                        }
                        [v / 10.0, v * 10.0]
                    }
                };
                Ok(FreeParam::new(id, lo, hi))
            })
            .collect()
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        load_json(path)
    }

    /// Simulation end time: `duration_s`, or the start of the first cycle
    /// plus `cycles` periods with a two-sample margin.
    pub fn end_time(&self, gait: &GaitSpec, opts: &SolverOpts) -> Result<f64> {
        match (self.duration_s, self.cycles) {
            (Some(_), Some(_)) => bail!("give either `cycles` or `duration_s`, not both"),
            (Some(d), None) => positive("duration_s", d),
            (None, Some(c)) => {
                let c = positive("cycles", c)?;
                let tp = gait.period();
                Ok(gait.first_cycle_start() + c * tp + 2.0 * tp / opts.samples_per_cycle as f64)
            }
            (None, None) => bail!("`cycles` or `duration_s` is required"),
        }
    }
}
