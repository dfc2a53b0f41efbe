//! Explicit Dormand-Prince 5(4) integrator with step-size control and
//! fourth-order continuous output.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum OdeError<E> {
    #[error(transparent)]
    Rhs(E),
    #[error("step size collapsed to {h:.3e} at t = {t:.9}")]
    StepSizeCollapse { t: f64, h: f64 },
    #[error("exceeded {0} integration steps")]
    TooManySteps(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DormandPrince {
    pub rtol: f64,
    pub atol: f64,
    pub max_step: f64,
    pub max_steps: usize,
}

impl Default for DormandPrince {
    fn default() -> Self {
        Self {
            rtol: 1e-6,
            atol: 1e-8,
            max_step: f64::INFINITY,
            max_steps: 10_000_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OdeStats {
    pub accepted: usize,
    pub rejected: usize,
    pub rhs_evals: usize,
    /// Step size proposed for the next step; reuse it when continuing.
    pub next_step: f64,
}

const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];

const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];

/// Difference between the fifth- and fourth-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Continuous-extension coefficients: `y(t + s h) = y + h sum_j k_j (P_j . [s, s^2, s^3, s^4])`.
const P: [[f64; 4]; 7] = [
    [
        1.0,
        -8048581381.0 / 2820520608.0,
        8663915743.0 / 2820520608.0,
        -12715105075.0 / 11282082432.0,
    ],
    [0.0, 0.0, 0.0, 0.0],
    [
        0.0,
        131558114200.0 / 32700410799.0,
        -68118460800.0 / 10900136933.0,
        87487479700.0 / 32700410799.0,
    ],
    [
        0.0,
        -1754552775.0 / 470086768.0,
        14199869525.0 / 1410260304.0,
        -10690763975.0 / 1880347072.0,
    ],
    [
        0.0,
        127303824393.0 / 49829197408.0,
        -318862633887.0 / 49829197408.0,
        701980252875.0 / 199316789632.0,
    ],
    [
        0.0,
        -282668133.0 / 205662961.0,
        2019193451.0 / 616988883.0,
        -1453857185.0 / 822651844.0,
    ],
    [
        0.0,
        40617522.0 / 29380423.0,
        -110615467.0 / 29380423.0,
        69997945.0 / 29380423.0,
    ],
];

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 10.0;

impl DormandPrince {
    fn scaled_norm(&self, v: &[f64], y0: &[f64], y1: &[f64]) -> f64 {
        let n = v.len().max(1) as f64;
        let s: f64 = v
            .iter()
            .zip(y0.iter().zip(y1))
            .map(|(e, (a, b))| {
                let sc = self.atol + self.rtol * a.abs().max(b.abs());
                (e / sc).powi(2)
            })
            .sum();
        (s / n).sqrt()
    }

    /// Initial step heuristic (Hairer, Norsett & Wanner, section II.4).
    fn initial_step<E, F>(&self, rhs: &mut F, t0: f64, y0: &[f64], f0: &[f64], dir_span: f64) -> Result<f64, E>
    where
        F: FnMut(f64, &[f64], &mut [f64]) -> Result<(), E>,
    {
        let d0 = self.scaled_norm(y0, y0, y0);
        let d1 = self.scaled_norm(f0, y0, y0);
        let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        let h0 = h0.min(dir_span).min(self.max_step);
        let y1: Vec<f64> = y0.iter().zip(f0).map(|(y, f)| y + h0 * f).collect();
        let mut f1 = vec![0.0; y0.len()];
        rhs(t0 + h0, &y1, &mut f1)?;
        let df: Vec<f64> = f1.iter().zip(f0).map(|(a, b)| a - b).collect();
        let d2 = self.scaled_norm(&df, y0, y0) / h0;
        let h1 = if d1 <= 1e-15 && d2 <= 1e-15 {
            (h0 * 1e-3).max(1e-6)
        } else {
            (0.01 / d1.max(d2)).powf(1.0 / 5.0)
        };
        Ok((100.0 * h0).min(h1).min(dir_span).min(self.max_step))
    }

    /// Integrate `y' = f(t, y)` from `t0` to `t_end`, overwriting `y` with the
    /// final state.
    ///
    /// `samples` must be sorted; each one inside `(t0, t_end]` is reported to
    /// `on_sample` from the continuous extension of the step that covers it.
    /// After every accepted step `on_step` may inspect and modify the state
    /// (returning `true` when it changed it, which discards the FSAL stage).
    #[allow(clippy::too_many_arguments)]
    pub fn integrate<E, F, S, O>(
        &self,
        mut rhs: F,
        t0: f64,
        y: &mut [f64],
        t_end: f64,
        h_start: Option<f64>,
        samples: &[f64],
        mut on_step: S,
        mut on_sample: O,
    ) -> Result<OdeStats, OdeError<E>>
    where
        F: FnMut(f64, &[f64], &mut [f64]) -> Result<(), E>,
        S: FnMut(f64, &mut [f64]) -> Result<bool, E>,
        O: FnMut(f64, &[f64]) -> Result<(), E>,
    {
        let n = y.len();
        let mut stats = OdeStats::default();
        let span = t_end - t0;
        if span <= 0.0 {
            return Ok(stats);
        }
        let mut k = vec![vec![0.0; n]; 7];
        let mut stage = vec![0.0; n];
        let mut y_new = vec![0.0; n];
        let mut err = vec![0.0; n];
        let mut dense = vec![0.0; n];

        rhs(t0, y, &mut k[0]).map_err(OdeError::Rhs)?;
        stats.rhs_evals += 1;
        let mut h = match h_start {
            Some(h) if h.is_finite() && h > 0.0 => h.min(self.max_step).min(span),
            _ => {
                stats.rhs_evals += 1;
                self.initial_step(&mut rhs, t0, y, &k[0], span)
                    .map_err(OdeError::Rhs)?
            }
        };

        let mut t = t0;
        let mut next_sample = samples.partition_point(|&s| s <= t0);
        let mut rejected_last = false;
        let mut steps = 0usize;

        while t < t_end {
            steps += 1;
            if steps > self.max_steps {
                return Err(OdeError::TooManySteps(self.max_steps));
            }
            let h_min = 1e-12_f64.max(16.0 * f64::EPSILON * t.abs());
            if h < h_min {
                return Err(OdeError::StepSizeCollapse { t, h });
            }
            let mut last = false;
            if t + 1.01 * h >= t_end {
                h = t_end - t;
                last = true;
            }

            for s in 1..7 {
                for i in 0..n {
                    let mut acc = 0.0;
                    for (j, a) in A[s][..s].iter().enumerate() {
                        acc += a * k[j][i];
                    }
                    stage[i] = y[i] + h * acc;
                }
                rhs(t + C[s] * h, &stage, &mut k[s]).map_err(OdeError::Rhs)?;
                stats.rhs_evals += 1;
                if s == 6 {
                    y_new.copy_from_slice(&stage);
                }
            }
            for i in 0..n {
                let mut acc = 0.0;
                for (j, e) in E.iter().enumerate() {
                    acc += e * k[j][i];
                }
                err[i] = h * acc;
            }
            let mut err_norm = self.scaled_norm(&err, y, &y_new);
            if !err_norm.is_finite() || y_new.iter().any(|v| !v.is_finite()) {
                err_norm = f64::INFINITY;
            }

            if err_norm > 1.0 {
                stats.rejected += 1;
                let factor = if err_norm.is_finite() {
                    (SAFETY * err_norm.powf(-0.2)).max(MIN_FACTOR)
                } else {
                    MIN_FACTOR
                };
                h *= factor;
                rejected_last = true;
                continue;
            }

            stats.accepted += 1;
            let t_new = if last { t_end } else { t + h };
            while next_sample < samples.len() && samples[next_sample] <= t_new {
                let ts = samples[next_sample];
                let sigma = ((ts - t) / h).clamp(0.0, 1.0);
                let pw = [sigma, sigma * sigma, sigma.powi(3), sigma.powi(4)];
                for i in 0..n {
                    let mut acc = 0.0;
                    for (j, row) in P.iter().enumerate() {
                        let q = row[0] * pw[0] + row[1] * pw[1] + row[2] * pw[2] + row[3] * pw[3];
                        acc += k[j][i] * q;
                    }
                    dense[i] = y[i] + h * acc;
                }
                on_sample(ts, &dense).map_err(OdeError::Rhs)?;
                next_sample += 1;
            }

            y.copy_from_slice(&y_new);
            let changed = on_step(t_new, y).map_err(OdeError::Rhs)?;
            if changed {
                rhs(t_new, y, &mut k[0]).map_err(OdeError::Rhs)?;
                stats.rhs_evals += 1;
            } else {
                k.swap(0, 6);
            }

            let mut factor = if err_norm == 0.0 {
                MAX_FACTOR
            } else {
                (SAFETY * err_norm.powf(-0.2)).clamp(MIN_FACTOR, MAX_FACTOR)
            };
            if rejected_last {
                factor = factor.min(1.0);
            }
            rejected_last = false;
            let proposed = (h * factor).min(self.max_step);
            t = t_new;
            if !last {
                h = proposed;
            } else {
                stats.next_step = proposed;
            }
        }
        if stats.next_step == 0.0 {
            stats.next_step = h;
        }
        Ok(stats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::convert::Infallible;

    #[test]
    fn tableau_consistency() {
        for s in 0..7 {
            let row: f64 = A[s].iter().sum();
            assert!((row - C[s]).abs() < 1e-14, "row {s}");
        }
        // Continuous extension reproduces the step endpoint.
        for j in 0..6 {
            let sum: f64 = P[j].iter().sum();
            assert!((sum - A[6][j]).abs() < 1e-12, "P row {j}: {sum} vs {}", A[6][j]);
        }
        assert!(P[6].iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn exponential_decay_to_tolerance() {
        let solver = DormandPrince {
            rtol: 1e-10,
            atol: 1e-12,
            ..Default::default()
        };
        let mut y = vec![1.0, 0.0];
        let samples: Vec<f64> = (1..=20).map(|k| 0.25 * k as f64).collect();
        let mut seen = Vec::new();
        solver
            .integrate(
                |_t, y: &[f64], dy: &mut [f64]| -> Result<(), Infallible> {
                    dy[0] = -y[0];
                    dy[1] = y[0];
                    Ok(())
                },
                0.0,
                &mut y,
                5.0,
                None,
                &samples,
                |_, _| Ok(false),
                |t, y| {
                    seen.push((t, y[0], y[1]));
                    Ok(())
                },
            )
            .unwrap();
        assert!((y[0] - (-5.0f64).exp()).abs() < 1e-10);
        assert_eq!(seen.len(), samples.len());
        for (t, a, b) in seen {
            assert!((a - (-t).exp()).abs() < 1e-9, "dense output at {t}");
            assert!((b - (1.0 - (-t).exp())).abs() < 1e-9);
        }
    }

    #[test]
    fn harmonic_oscillator_dense_output_is_fourth_order_accurate() {
        let solver = DormandPrince {
            rtol: 1e-8,
            atol: 1e-10,
            max_step: 0.05,
            ..Default::default()
        };
        let mut y = vec![1.0, 0.0];
        let samples: Vec<f64> = (0..=400).map(|k| 0.0123 * k as f64).collect();
        let mut worst: f64 = 0.0;
        solver
            .integrate(
                |_t, y: &[f64], dy: &mut [f64]| -> Result<(), Infallible> {
                    dy[0] = y[1];
                    dy[1] = -y[0];
                    Ok(())
                },
                0.0,
                &mut y,
                0.0123 * 400.0,
                None,
                &samples,
                |_, _| Ok(false),
                |t, y| {
                    worst = worst.max((y[0] - t.cos()).abs());
                    Ok(())
                },
            )
            .unwrap();
        assert!(worst < 1e-7, "worst dense error {worst}");
    }

    #[test]
    fn blow_up_reports_step_collapse() {
        let solver = DormandPrince::default();
        let mut y = vec![1.0];
        let res = solver.integrate(
            |_t, y: &[f64], dy: &mut [f64]| -> Result<(), Infallible> {
                dy[0] = y[0] * y[0];
                Ok(())
            },
            0.0,
            &mut y,
            2.0,
            None,
            &[],
            |_, _| Ok(false),
            |_, _| Ok(()),
        );
        assert!(matches!(res, Err(OdeError::StepSizeCollapse { .. }) | Err(OdeError::TooManySteps(_))));
    }

    #[test]
    fn rhs_error_propagates() {
        let solver = DormandPrince::default();
        let mut y = vec![0.0];
        let res = solver.integrate(
            |t, _y: &[f64], dy: &mut [f64]| {
                if t > 0.5 {
                    return Err("stop");
                }
                dy[0] = 1.0;
                Ok(())
            },
            0.0,
            &mut y,
            1.0,
            None,
            &[],
            |_, _| Ok(false),
            |_, _| Ok(()),
        );
        assert!(matches!(res, Err(OdeError::Rhs("stop"))));
    }
}
