//! Steady-state detection and frequency sweeps.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engines::{Actuation, EngineError, ModelConfig, Simulation, SolverOpts, Trajectory};
use crate::fmt::{fmt_opt, fmt_sig};
use crate::gait::GaitSpec;
use crate::metrics::{cycle_bounds, metrics_between, CycleMetrics, MetricsError};
use crate::model::RobotParams;

pub const DEFAULT_TOL: f64 = 1e-3;
pub const DEFAULT_MAX_CYCLES: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteadyState {
    pub omega: f64,
    pub metrics: CycleMetrics,
    /// Number of complete cycles simulated.
    pub cycles: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SweepError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("not converged after {} cycles", .0.cycles)]
    NotConverged(Box<SteadyState>),
    #[error("invalid sweep input: {0}")]
    InvalidInput(String),
}

impl SweepError {
    /// Metrics of the last cycle when the run failed only to converge.
    pub fn last_state(&self) -> Option<&SteadyState> {
        match self {
            SweepError::NotConverged(s) => Some(s),
            _ => None,
        }
    }
}

/// Integrate cycle by cycle until the per-cycle displacement (and the
/// passive-joint amplitude in semi-passive mode) stops changing.
pub fn steady_state(
    cfg: ModelConfig,
    gait: GaitSpec,
    p: RobotParams,
    opts: SolverOpts,
    tol: f64,
    max_cycles: usize,
) -> Result<SteadyState, SweepError> {
    if !(tol >= 0.0) {
        return Err(SweepError::InvalidInput(format!("tolerance must be >= 0, got {tol}")));
    }
    if max_cycles == 0 {
        return Err(SweepError::InvalidInput("max_cycles must be >= 1".into()));
    }
    let mut sim = Simulation::new(cfg, gait, p, opts)?;
    let mut traj = Trajectory::new(p);
    let tp = gait.period();
    let margin = 2.0 * tp / opts.samples_per_cycle as f64;
    let start = gait.first_cycle_start();
    let mut prev: Option<CycleMetrics> = None;
    for k in 1..=max_cycles {
        sim.advance(start + k as f64 * tp + margin, &mut traj)?;
        let bounds = cycle_bounds(&traj, &gait)?;
        if bounds.len() < 2 {
            return Err(MetricsError::CycleOutOfRange {
                index: 0,
                available: 0,
            }
            .into());
        }
        let n = bounds.len();
        let m = metrics_between(&traj, &gait, bounds[n - 2], bounds[n - 1])?;
        let state = SteadyState {
            omega: gait.omega,
            metrics: m,
            cycles: k,
            converged: true,
        };
        if !cfg.has_dynamic_state() {
            return Ok(state);
        }
        if let Some(pm) = prev {
            let d_ok = (m.d - pm.d).abs() / m.d.max(1e-6) < tol;
            let a_ok = match (cfg.actuation, m.alpha1, pm.alpha1) {
                (Actuation::SemiPassive, Some(a), Some(b)) => (a - b).abs() < tol * gait.alpha2,
                _ => true,
            };
            if d_ok && a_ok {
                return Ok(state);
            }
        }
        prev = Some(m);
        // Bound memory: only the current cycle is needed from here on.
        let keep_from = bounds[n - 1] - margin;
        let cut = traj.samples.partition_point(|s| s.t < keep_from);
        traj.samples.drain(..cut);
    }
    let m = prev.expect("max_cycles >= 1");
    Err(SweepError::NotConverged(Box::new(SteadyState {
        omega: gait.omega,
        metrics: m,
        cycles: max_cycles,
        converged: false,
    })))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub omegas: Vec<f64>,
    pub config: ModelConfig,
    /// Template gait; its frequency is replaced per row.
    pub gait: GaitSpec,
    pub tol: f64,
    pub max_cycles: usize,
    #[serde(default)]
    pub solver: SolverOpts,
}

impl SweepSpec {
    pub fn new(omegas: Vec<f64>, config: ModelConfig, gait: GaitSpec) -> Self {
        Self {
            omegas,
            config,
            gait,
            tol: DEFAULT_TOL,
            max_cycles: DEFAULT_MAX_CYCLES,
            solver: SolverOpts::default(),
        }
    }

    /// Sorted, de-duplicated frequency list.
    pub fn frequencies(&self) -> Result<Vec<f64>, SweepError> {
        if self.omegas.is_empty() {
            return Err(SweepError::InvalidInput("frequency list is empty".into()));
        }
        if let Some(w) = self.omegas.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(SweepError::InvalidInput(format!("frequency must be > 0, got {w}")));
        }
        let mut w = self.omegas.clone();
        w.sort_by(f64::total_cmp);
        w.dedup();
        Ok(w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub omega: f64,
    pub outcome: Result<SteadyState, SweepError>,
}

impl SweepRow {
    /// Steady state if available, including unconverged runs.
    pub fn state(&self) -> Option<&SteadyState> {
        match &self.outcome {
            Ok(s) => Some(s),
            Err(e) => e.last_state(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub alpha2: f64,
    pub rows: Vec<SweepRow>,
}

pub const SWEEP_CSV_HEADER: [&str; 11] = [
    "omega", "d_mm", "vbar_mm_s", "alpha1_deg", "alpha_ratio", "sigma0", "sigma1", "sigma2", "cycles", "converged",
    "error",
];

impl SweepResult {
    /// Frequency at which `key` is largest among rows with a steady state.
    pub fn argmax(&self, key: impl Fn(&SteadyState) -> Option<f64>) -> Option<f64> {
        self.rows
            .iter()
            .filter_map(|r| r.state().and_then(|s| key(s).map(|v| (r.omega, v))))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(w, _)| w)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(SWEEP_CSV_HEADER)?;
        for r in &self.rows {
            let err = match &r.outcome {
                Ok(_) | Err(SweepError::NotConverged(_)) => String::new(),
                Err(e) => e.to_string(),
            };
            let mut row = vec![fmt_sig(r.omega)];
            match r.state() {
                Some(s) => {
                    let m = &s.metrics;
                    row.push(fmt_sig(m.d * 1e3));
                    row.push(fmt_sig(m.v_bar * 1e3));
                    row.push(fmt_opt(m.alpha1.map(f64::to_degrees)));
                    row.push(fmt_opt(m.alpha1.filter(|_| self.alpha2 > 0.0).map(|a| a / self.alpha2)));
                    row.extend(m.sigma.iter().map(|v| fmt_sig(*v)));
                    row.push(s.cycles.to_string());
                    row.push(s.converged.to_string());
                }
                None => {
                    row.extend(std::iter::repeat_n(String::new(), 8));
                    row.push("false".into());
                }
            }
            row.push(err);
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Independent steady-state runs per frequency, computed in parallel and
/// assembled in ascending frequency order.
pub fn frequency_sweep(spec: &SweepSpec, p: RobotParams) -> Result<SweepResult, SweepError> {
    let omegas = spec.frequencies()?;
    let rows = omegas
        .par_iter()
        .map(|&omega| SweepRow {
            omega,
            outcome: steady_state(spec.config, spec.gait.with_omega(omega), p, spec.solver, spec.tol, spec.max_cycles),
        })
        .collect();
    Ok(SweepResult {
        alpha2: spec.gait.alpha2,
        rows,
    })
}
