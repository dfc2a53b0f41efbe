//! Per-cycle locomotion metrics and energy audits.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engines::{ModelConfig, Sample, Trajectory};
use crate::fmt::{fmt_opt, fmt_sig};
use crate::gait::GaitSpec;
use crate::model::{dissipation_power, kinetic_energy, potential_energy, RobotParams};

/// Minimum number of in-cycle samples for a skid-ratio estimate.
pub const MIN_CYCLE_SAMPLES: usize = 100;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("no downward mean crossing of the actuated joint found")]
    NoCycleFound,
    #[error("cycle {index} not contained in trajectory ({available} complete cycles)")]
    CycleOutOfRange { index: usize, available: usize },
    #[error("cycle contains {found} samples, at least {required} required")]
    TooFewSamples { found: usize, required: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleMetrics {
    pub t0: f64,
    pub t_p: f64,
    /// Displacement of the middle-link center over the cycle [m].
    pub d: f64,
    /// Mean speed `d / t_p` [m/s].
    pub v_bar: f64,
    pub dtheta: f64,
    pub theta_slope: f64,
    pub sigma: [f64; 3],
    pub alpha1: Option<f64>,
}

impl CycleMetrics {
    pub fn new(
        t0: f64,
        t_p: f64,
        d: f64,
        dtheta: f64,
        theta_slope: f64,
        sigma: [f64; 3],
        alpha1: Option<f64>,
    ) -> Self {
        Self {
            t0,
            t_p,
            d,
            v_bar: d / t_p,
            dtheta,
            theta_slope,
            sigma,
            alpha1,
        }
    }
}

/// Value and slope of the cubic Hermite interpolant of `phi2` on one interval.
fn phi2_hermite(a: &Sample, b: &Sample, t: f64) -> f64 {
    let h = b.t - a.t;
    let s = (t - a.t) / h;
    let s2 = s * s;
    let s3 = s2 * s;
    (2.0 * s3 - 3.0 * s2 + 1.0) * a.q.phi2
        + (s3 - 2.0 * s2 + s) * h * a.qd.phi2
        + (-2.0 * s3 + 3.0 * s2) * b.q.phi2
        + (s3 - s2) * h * b.qd.phi2
}

/// Successive times at which `phi2` passes through its mean `gamma2` while
/// decreasing. Crossings closer than half a period to the previous one are
/// discarded.
pub fn cycle_bounds(traj: &Trajectory, gait: &GaitSpec) -> Result<Vec<f64>, MetricsError> {
    let s = &traj.samples;
    let tp = gait.period();
    let mut out: Vec<f64> = Vec::new();
    for w in s.windows(2) {
        let ga = w[0].q.phi2 - gait.gamma2;
        let gb = w[1].q.phi2 - gait.gamma2;
        if !(ga > 0.0 && gb <= 0.0) {
            continue;
        }
        let root = if gb == 0.0 {
            w[1].t
        } else {
            let (mut lo, mut hi) = (w[0].t, w[1].t);
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                if phi2_hermite(&w[0], &w[1], mid) - gait.gamma2 > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        };
        if out.last().is_none_or(|&prev| root - prev >= 0.5 * tp) {
            out.push(root);
        }
    }
    if out.is_empty() {
        Err(MetricsError::NoCycleFound)
    } else {
        Ok(out)
    }
}

fn cycle_span(traj: &Trajectory, gait: &GaitSpec, index: usize) -> Result<(f64, f64), MetricsError> {
    let b = cycle_bounds(traj, gait)?;
    if index + 1 >= b.len() {
        return Err(MetricsError::CycleOutOfRange {
            index,
            available: b.len().saturating_sub(1),
        });
    }
    Ok((b[index], b[index + 1]))
}

/// Number of complete cycles in the trajectory.
pub fn cycle_count(traj: &Trajectory, gait: &GaitSpec) -> usize {
    cycle_bounds(traj, gait).map(|b| b.len() - 1).unwrap_or(0)
}

fn ols_slope(pts: impl Iterator<Item = (f64, f64)>) -> f64 {
    let (mut n, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (x, y) in pts {
        n += 1.0;
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    let den = n * sxx - sx * sx;
    if n < 2.0 || den == 0.0 {
        0.0
    } else {
        (n * sxy - sx * sy) / den
    }
}

/// Skid ratios `RMS(v_perp_i) / (l w)` over the in-cycle samples `[t0, t1)`.
pub fn skid_ratio_between(traj: &Trajectory, omega: f64, t0: f64, t1: f64) -> Result<[f64; 3], MetricsError> {
    let a = traj.samples.partition_point(|s| s.t < t0);
    let b = traj.samples.partition_point(|s| s.t < t1);
    let win = &traj.samples[a..b.max(a)];
    if win.len() < MIN_CYCLE_SAMPLES {
        return Err(MetricsError::TooFewSamples {
            found: win.len(),
            required: MIN_CYCLE_SAMPLES,
        });
    }
    let scale = traj.params.l * omega;
    let mut out = [0.0; 3];
    for (i, o) in out.iter_mut().enumerate() {
        let ms = win.iter().map(|s| s.v_perp[i] * s.v_perp[i]).sum::<f64>() / win.len() as f64;
        *o = ms.sqrt() / scale;
    }
    Ok(out)
}

pub fn skid_ratio(traj: &Trajectory, gait: &GaitSpec, index: usize) -> Result<[f64; 3], MetricsError> {
    let (t0, t1) = cycle_span(traj, gait, index)?;
    skid_ratio_between(traj, gait.omega, t0, t1)
}

/// Metrics of cycle `index`, bounded by consecutive downward mean crossings.
pub fn cycle_metrics(traj: &Trajectory, gait: &GaitSpec, index: usize) -> Result<CycleMetrics, MetricsError> {
    let (t0, t1) = cycle_span(traj, gait, index)?;
    metrics_between(traj, gait, t0, t1)
}

/// Metrics over an explicit window `[t0, t1]`.
pub fn metrics_between(traj: &Trajectory, gait: &GaitSpec, t0: f64, t1: f64) -> Result<CycleMetrics, MetricsError> {
    let (q0, _) = traj.interpolate(t0).ok_or(MetricsError::NoCycleFound)?;
    let (q1, _) = traj.interpolate(t1).ok_or(MetricsError::NoCycleFound)?;
    let d = (q1.x - q0.x).hypot(q1.y - q0.y);
    let dtheta = q1.theta - q0.theta;
    let win = traj.window(t0, t1);
    let theta_slope = ols_slope(win.iter().map(|s| (s.t - t0, s.q.theta)));
    let sigma = skid_ratio_between(traj, gait.omega, t0, t1)?;
    let alpha1 = match gait.mode {
        crate::engines::Actuation::SemiPassive => {
            let (lo, hi) = win
                .iter()
                .map(|s| s.q.phi1)
                .chain([q0.phi1, q1.phi1])
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            Some(0.5 * (hi - lo))
        }
        crate::engines::Actuation::Kinematic => None,
    };
    Ok(CycleMetrics::new(t0, gait.period(), d, dtheta, theta_slope, sigma, alpha1))
}

/// Metrics of every complete cycle.
pub fn all_cycle_metrics(traj: &Trajectory, gait: &GaitSpec) -> Result<Vec<CycleMetrics>, MetricsError> {
    let b = cycle_bounds(traj, gait)?;
    b.windows(2).map(|w| metrics_between(traj, gait, w[0], w[1])).collect()
}

/// Work-energy balance over one interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyBalance {
    pub t0: f64,
    pub t1: f64,
    /// Change of kinetic plus potential energy [J].
    pub delta_energy: f64,
    /// Work done by the actuators [J].
    pub actuator_work: f64,
    /// Energy removed by dissipation [J].
    pub dissipated: f64,
    /// `|dE - W + Q| / max(1, |W|)`.
    pub residual: f64,
}

/// Composite Simpson on uniform samples, with a 3/8 closing panel for an odd
/// number of intervals.
fn simpson(h: f64, f: &[f64]) -> f64 {
    let n = f.len();
    match n {
        0 | 1 => 0.0,
        2 => 0.5 * h * (f[0] + f[1]),
        3 => h / 3.0 * (f[0] + 4.0 * f[1] + f[2]),
        _ => {
            let intervals = n - 1;
            let (simpson_end, tail) = if intervals.is_multiple_of(2) { (n - 1, false) } else { (n - 4, true) };
            let mut acc = f[0] + f[simpson_end];
            for (k, v) in f.iter().enumerate().take(simpson_end).skip(1) {
                acc += if k % 2 == 1 { 4.0 * v } else { 2.0 * v };
            }
            let mut total = h / 3.0 * acc;
            if tail {
                let g = &f[simpson_end..];
                total += 3.0 * h / 8.0 * (g[0] + 3.0 * g[1] + 3.0 * g[2] + g[3]);
            }
            total
        }
    }
}

/// Energy balance over a run of uniformly spaced samples.
pub fn energy_balance(samples: &[Sample], p: &RobotParams, cfg: &ModelConfig) -> EnergyBalance {
    if samples.len() < 2 {
        let t = samples.first().map_or(0.0, |s| s.t);
        return EnergyBalance {
            t0: t,
            t1: t,
            delta_energy: 0.0,
            actuator_work: 0.0,
            dissipated: 0.0,
            residual: 0.0,
        };
    }
    let energy = |s: &Sample| kinetic_energy(&s.q, &s.qd, p) + potential_energy(&s.q, p, cfg);
    let first = &samples[0];
    let last = &samples[samples.len() - 1];
    let h = (last.t - first.t) / (samples.len() - 1) as f64;
    let power: Vec<f64> = samples.iter().map(|s| s.tau.power(&s.qd)).collect();
    let loss: Vec<f64> = samples.iter().map(|s| dissipation_power(&s.q, &s.qd, p, cfg)).collect();
    let delta_energy = energy(last) - energy(first);
    let actuator_work = simpson(h, &power);
    let dissipated = simpson(h, &loss);
    EnergyBalance {
        t0: first.t,
        t1: last.t,
        delta_energy,
        actuator_work,
        dissipated,
        residual: (delta_energy - actuator_work + dissipated).abs() / actuator_work.abs().max(1.0),
    }
}

/// Per-cycle energy balance, each cycle taken over the output samples
/// between consecutive cycle starts.
pub fn energy_audit(
    traj: &Trajectory,
    gait: &GaitSpec,
    p: &RobotParams,
    cfg: &ModelConfig,
) -> Result<Vec<EnergyBalance>, MetricsError> {
    let b = cycle_bounds(traj, gait)?;
    Ok(b.windows(2).map(|w| energy_balance(traj.window(w[0], w[1]), p, cfg)).collect())
}

pub const CYCLE_CSV_HEADER: [&str; 12] = [
    "run", "cycle", "t0_s", "tp_s", "d_mm", "vbar_mm_s", "dtheta_deg", "theta_slope_deg_s", "sigma0", "sigma1",
    "sigma2", "alpha1_deg",
];

/// Write per-cycle metrics keyed by run id and cycle index.
pub fn write_cycle_csv<W: Write>(out: W, rows: &[(String, usize, CycleMetrics)]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CYCLE_CSV_HEADER)?;
    for (run, k, m) in rows {
        w.write_record([
            run.clone(),
            k.to_string(),
            fmt_sig(m.t0),
            fmt_sig(m.t_p),
            fmt_sig(m.d * 1e3),
            fmt_sig(m.v_bar * 1e3),
            fmt_sig(m.dtheta.to_degrees()),
            fmt_sig(m.theta_slope.to_degrees()),
            fmt_sig(m.sigma[0]),
            fmt_sig(m.sigma[1]),
            fmt_sig(m.sigma[2]),
            fmt_opt(m.alpha1.map(f64::to_degrees)),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engines::{Actuation, JointTorques, SolverDiagnostics};
    use crate::gait::NamedGait;
    use crate::model::{Coords, ParamPreset, Rates};
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn synthetic(gait: &GaitSpec, cycles: f64, n_per: usize, f: impl Fn(f64) -> (Coords, Rates, [f64; 3])) -> Trajectory {
        let tp = gait.period();
        let n = (cycles * n_per as f64).round() as usize;
        let samples = (0..=n)
            .map(|k| {
                let t = k as f64 * tp / n_per as f64;
                let (q, qd, vperp) = f(t);
                Sample {
                    t,
                    q,
                    qd,
                    lambda: None,
                    tau: JointTorques::default(),
                    v_par: [0.0; 3],
                    v_perp: vperp,
                }
            })
            .collect();
        Trajectory {
            params: RobotParams::preset(ParamPreset::Table1Simulation),
            samples,
            diagnostics: SolverDiagnostics::default(),
        }
    }

    fn with_gait(g: &GaitSpec, t: f64, body: (f64, f64, f64), rates: (f64, f64, f64)) -> (Coords, Rates) {
        let s = g.eval(t);
        let s1 = s.phi1.unwrap_or_default();
        (
            Coords::new(body.0, body.1, body.2, s1.angle, s.phi2.angle),
            Rates::new(rates.0, rates.1, rates.2, s1.rate, s.phi2.rate),
        )
    }

    #[test]
    fn first_bound_is_analytic_crossing() {
        let g = NamedGait::SymmetricSemiPassive.spec(4.0);
        let traj = synthetic(&g, 3.3, 200, |t| {
            let (q, qd) = with_gait(&g, t, (0.0, 0.0, 0.0), (0.0, 0.0, 0.0));
            (q, qd, [0.0; 3])
        });
        let b = cycle_bounds(&traj, &g).unwrap();
        assert_abs_diff_eq!(b[0], PI / 8.0, epsilon = 1e-9);
        assert_eq!(b.len(), 4);
        for w in b.windows(2) {
            assert!(((w[1] - w[0]) / g.period() - 1.0).abs() < 0.01);
        }
    }

    #[test]
    fn constant_phi2_has_no_cycle() {
        let mut g = NamedGait::SymmetricSemiPassive.spec(4.0);
        let traj = synthetic(&g, 3.0, 200, |_| (Coords::new(0.0, 0.0, 0.0, 0.0, 0.2), Rates::default(), [0.0; 3]));
        g.gamma2 = 0.0;
        assert_eq!(cycle_bounds(&traj, &g), Err(MetricsError::NoCycleFound));
    }

    #[test]
    fn stationary_trajectory_has_zero_metrics() {
        let g = NamedGait::AsymmetricKinematic.spec(4.0);
        let traj = synthetic(&g, 3.0, 200, |t| {
            let (q, qd) = with_gait(&g, t, (0.3, -0.1, 0.2), (0.0, 0.0, 0.0));
            (q, qd, [0.0; 3])
        });
        let m = cycle_metrics(&traj, &g, 0).unwrap();
        assert_eq!(m.d, 0.0);
        assert_eq!(m.v_bar, 0.0);
        assert_eq!(m.dtheta, 0.0);
        assert_eq!(m.sigma, [0.0; 3]);
        assert!(m.alpha1.is_none());
    }

    #[test]
    fn pure_rotation_gives_slope_and_no_displacement() {
        let g = NamedGait::AsymmetricKinematic.spec(4.0);
        let omega_rot = 0.37;
        let traj = synthetic(&g, 3.0, 200, |t| {
            let (q, qd) = with_gait(&g, t, (1.0, 2.0, omega_rot * t), (0.0, 0.0, omega_rot));
            (q, qd, [0.0; 3])
        });
        let m = cycle_metrics(&traj, &g, 1).unwrap();
        assert_abs_diff_eq!(m.d, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m.theta_slope, omega_rot, epsilon = 1e-12);
        assert_abs_diff_eq!(m.dtheta, omega_rot * g.period(), epsilon = 1e-9);
        assert_eq!(m.v_bar, m.d / m.t_p);
    }

    #[test]
    fn skid_ratio_of_constant_and_sinusoid() {
        let g = NamedGait::AsymmetricKinematic.spec(4.0);
        let l = RobotParams::preset(ParamPreset::Table1Simulation).l;
        let (c, a) = (0.05, 0.08);
        let traj = synthetic(&g, 3.0, 200, |t| {
            let (q, qd) = with_gait(&g, t, (0.0, 0.0, 0.0), (0.0, 0.0, 0.0));
            (q, qd, [c, a * (g.omega * t).sin(), 0.0])
        });
        let s = skid_ratio(&traj, &g, 0).unwrap();
        assert_abs_diff_eq!(s[0], c / (l * g.omega), epsilon = 1e-12);
        assert_abs_diff_eq!(s[1], a / (2f64.sqrt() * l * g.omega), epsilon = 1e-4);
        assert_eq!(s[2], 0.0);
    }

    #[test]
    fn sparse_cycle_rejected() {
        let g = NamedGait::AsymmetricKinematic.spec(4.0);
        let traj = synthetic(&g, 3.0, 40, |t| {
            let (q, qd) = with_gait(&g, t, (0.0, 0.0, 0.0), (0.0, 0.0, 0.0));
            (q, qd, [0.0; 3])
        });
        assert!(matches!(skid_ratio(&traj, &g, 0), Err(MetricsError::TooFewSamples { .. })));
    }

    #[test]
    fn simpson_is_exact_for_cubics() {
        for n in [5usize, 6, 7, 8, 201] {
            let h = 2.0 / (n - 1) as f64;
            let f: Vec<f64> = (0..n).map(|k| (k as f64 * h).powi(3)).collect();
            assert_abs_diff_eq!(simpson(h, &f), 4.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_motion_energy_audit_is_zero() {
        let g = NamedGait::SymmetricSemiPassive.spec(4.0);
        let traj = synthetic(&g, 3.0, 200, |t| {
            let (q, _) = with_gait(&g, t, (0.0, 0.0, 0.0), (0.0, 0.0, 0.0));
            (Coords { phi2: 0.0, ..q }, Rates::default(), [0.0; 3])
        });
        let cfg = ModelConfig::new(Actuation::SemiPassive, crate::engines::WheelModel::NoSkid, true);
        let e = energy_balance(&traj.samples, &traj.params, &cfg);
        assert_eq!((e.delta_energy, e.actuator_work, e.dissipated, e.residual), (0.0, 0.0, 0.0, 0.0));
    }
}
