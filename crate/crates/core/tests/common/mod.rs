//! Independent finite-difference oracles and reusable invariant checks.
#![allow(dead_code, clippy::neg_cmp_op_on_partial_ord)]

use nalgebra::{Matrix3x5, SMatrix, Vector2};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use trilink_core::engines::{simulate, Actuation, ModelConfig, SolverOpts, WheelModel};
use trilink_core::gait::{GaitSpec, NamedGait};
use trilink_core::metrics::energy_audit;
use trilink_core::model::{
    constraint_matrix, det_wb, dissipation, dissipation_forces, mass_matrix, velocity_terms, Coords, ParamPreset,
    Rates, RobotParams,
};

pub type Mat5 = SMatrix<f64, 5, 5>;
pub type Vec5 = SMatrix<f64, 5, 1>;

fn unit(a: f64) -> Vector2<f64> {
    Vector2::new(a.cos(), a.sin())
}

fn link_angles(q: &[f64; 5]) -> [f64; 3] {
    [q[2], q[2] - q[3], q[2] + q[4]]
}

/// Centers of mass written out directly from the link geometry.
fn centers(q: &[f64; 5], p: &RobotParams) -> [Vector2<f64>; 3] {
    let [a0, a1, a2] = link_angles(q);
    let r0 = Vector2::new(q[0], q[1]);
    [r0, r0 + p.h * unit(a0) + p.b * unit(a1), r0 - p.h * unit(a0) - p.b * unit(a2)]
}

fn wheels(q: &[f64; 5], p: &RobotParams) -> [Vector2<f64>; 3] {
    let [a0, a1, a2] = link_angles(q);
    let r0 = Vector2::new(q[0], q[1]);
    [r0, r0 + p.h * unit(a0) + p.l * unit(a1), r0 - p.h * unit(a0) - p.l * unit(a2)]
}

fn shifted(q: &[f64; 5], dir: &[f64; 5], s: f64) -> [f64; 5] {
    std::array::from_fn(|i| q[i] + s * dir[i])
}

const FD_STEP: f64 = 1e-5;

/// Kinetic energy with point velocities from central differences of positions.
pub fn kinetic_energy_fd(q: &Coords, qd: &[f64; 5], p: &RobotParams) -> f64 {
    let q = q.to_array();
    let plus = centers(&shifted(&q, qd, FD_STEP), p);
    let minus = centers(&shifted(&q, qd, -FD_STEP), p);
    let (ap, am) = (link_angles(&shifted(&q, qd, FD_STEP)), link_angles(&shifted(&q, qd, -FD_STEP)));
    let masses = [p.m0, p.m1, p.m2];
    let inertias = [p.i0, p.i1, p.i2];
    (0..3)
        .map(|i| {
            let v = (plus[i] - minus[i]) / (2.0 * FD_STEP);
            let w = (ap[i] - am[i]) / (2.0 * FD_STEP);
            0.5 * masses[i] * v.norm_squared() + 0.5 * inertias[i] * w * w
        })
        .sum()
}

fn basis(i: usize) -> [f64; 5] {
    let mut e = [0.0; 5];
    e[i] = 1.0;
    e
}

/// Inertia matrix by polarization of the kinetic energy.
pub fn mass_matrix_fd(q: &Coords, p: &RobotParams) -> Mat5 {
    let mut m = Mat5::zeros();
    for i in 0..5 {
        m[(i, i)] = 2.0 * kinetic_energy_fd(q, &basis(i), p);
    }
    for i in 0..5 {
        for j in (i + 1)..5 {
            let mut e = basis(i);
            e[j] = 1.0;
            let v = kinetic_energy_fd(q, &e, p) - 0.5 * (m[(i, i)] + m[(j, j)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// `Mdot qd - dT/dq` with both derivatives taken numerically.
pub fn velocity_terms_fd(q: &Coords, qd: &Rates, p: &RobotParams) -> Vec5 {
    let qa = q.to_array();
    let qdv = qd.to_vector();
    let at = |s: f64, dir: &[f64; 5]| mass_matrix(&Coords::from_vector(&Vec5::from_row_slice(&shifted(&qa, dir, s))), p);
    let dir = qd.to_array();
    let mdot = (at(FD_STEP, &dir) - at(-FD_STEP, &dir)) / (2.0 * FD_STEP);
    let mut dtdq = Vec5::zeros();
    for k in 0..5 {
        let e = basis(k);
        let dm = (at(FD_STEP, &e) - at(-FD_STEP, &e)) / (2.0 * FD_STEP);
        dtdq[k] = 0.5 * (qdv.transpose() * dm * qdv)[(0, 0)];
    }
    mdot * qdv - dtdq
}

/// Constraint rows `n_i . dr_i/dq` from numerical wheel-position Jacobians.
pub fn constraint_matrix_fd(q: &Coords, p: &RobotParams) -> Matrix3x5<f64> {
    let qa = q.to_array();
    let angles = link_angles(&qa);
    let mut w = Matrix3x5::zeros();
    for k in 0..5 {
        let e = basis(k);
        let plus = wheels(&shifted(&qa, &e, FD_STEP), p);
        let minus = wheels(&shifted(&qa, &e, -FD_STEP), p);
        for i in 0..3 {
            let n = Vector2::new(-angles[i].sin(), angles[i].cos());
            w[(i, k)] = n.dot(&((plus[i] - minus[i]) / (2.0 * FD_STEP)));
        }
    }
    w
}

pub fn params_strategy() -> impl Strategy<Value = RobotParams> {
    (prop::sample::select(ParamPreset::ALL.to_vec()), -1.0..1.0f64)
        .prop_map(|(preset, g)| RobotParams::preset(preset).with_gamma1(g))
}

pub fn coords_strategy() -> impl Strategy<Value = Coords> {
    (-2.0..2.0f64, -2.0..2.0f64, -3.2..3.2f64, -1.5..1.5f64, -1.5..1.5f64)
        .prop_map(|(x, y, th, p1, p2)| Coords::new(x, y, th, p1, p2))
}

pub fn rates_strategy() -> impl Strategy<Value = Rates> {
    (-1.0..1.0f64, -1.0..1.0f64, -3.0..3.0f64, -3.0..3.0f64, -3.0..3.0f64)
        .prop_map(|(x, y, th, p1, p2)| Rates::new(x, y, th, p1, p2))
}

pub fn config_strategy() -> impl Strategy<Value = ModelConfig> {
    (
        prop::sample::select(vec![Actuation::Kinematic, Actuation::SemiPassive]),
        prop::sample::select(vec![WheelModel::NoSkid, WheelModel::ViscousSkid]),
        any::<bool>(),
    )
        .prop_map(|(a, w, r)| ModelConfig::new(a, w, r))
}

fn runner(cases: u32) -> TestRunner {
    TestRunner::new_with_rng(
        Config {
            cases,
            failure_persistence: None,
            ..Config::default()
        },
        proptest::test_runner::TestRng::deterministic_rng(proptest::test_runner::RngAlgorithm::ChaCha),
    )
}

/// Run `check` over `cases` random states; returns the largest reported
/// value or the first failure message.
pub fn sweep_states<S: Strategy>(
    cases: u32,
    strategy: S,
    check: impl Fn(S::Value) -> Result<f64, String>,
) -> Result<f64, String> {
    let worst = std::cell::Cell::new(0.0f64);
    runner(cases)
        .run(&strategy, |v| {
            let e = check(v).map_err(TestCaseError::fail)?;
            worst.set(worst.get().max(e));
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok(worst.get())
}

pub fn check_mass_spd(cases: u32) -> Result<f64, String> {
    sweep_states(cases, (coords_strategy(), params_strategy()), |(q, p)| {
        let m = mass_matrix(&q, &p);
        let asym = (m - m.transpose()).abs().max();
        if asym > 1e-12 * m.abs().max() {
            return Err(format!("asymmetric mass matrix at {q:?}: {asym:e}"));
        }
        let min_eig = m.symmetric_eigenvalues().min();
        if !(min_eig > 0.0) || m.cholesky().is_none() {
            return Err(format!("mass matrix not positive definite at {q:?}: min eigenvalue {min_eig:e}"));
        }
        Ok(asym)
    })
}

pub fn check_mass_oracle(cases: u32) -> Result<f64, String> {
    sweep_states(cases, (coords_strategy(), params_strategy()), |(q, p)| {
        let m = mass_matrix(&q, &p);
        let fd = mass_matrix_fd(&q, &p);
        let rel = (m - fd).norm() / fd.norm();
        if rel < 1e-6 {
            Ok(rel)
        } else {
            Err(format!("mass matrix off by {rel:e} (relative) at {q:?}"))
        }
    })
}

pub fn check_velocity_oracle(cases: u32) -> Result<f64, String> {
    sweep_states(cases, (coords_strategy(), rates_strategy(), params_strategy()), |(q, qd, p)| {
        let b = velocity_terms(&q, &qd, &p);
        let fd = velocity_terms_fd(&q, &qd, &p);
        let scale = fd.norm().max(1e-3 * mass_matrix(&q, &p).norm() * qd.to_vector().norm_squared());
        let rel = (b - fd).norm() / scale;
        if rel < 1e-5 {
            Ok(rel)
        } else {
            Err(format!("velocity terms off by {rel:e} (relative) at {q:?}, {qd:?}"))
        }
    })
}

pub fn check_constraint_oracle(cases: u32) -> Result<f64, String> {
    sweep_states(cases, (coords_strategy(), params_strategy()), |(q, p)| {
        let err = (constraint_matrix(&q, &p).w - constraint_matrix_fd(&q, &p)).abs().max();
        if err < 1e-8 {
            Ok(err)
        } else {
            Err(format!("constraint matrix off by {err:e} at {q:?}"))
        }
    })
}

pub fn check_det_closed_form(cases: u32) -> Result<f64, String> {
    sweep_states(cases, (coords_strategy(), params_strategy()), |(q, p)| {
        let numeric = constraint_matrix(&q, &p).body().determinant();
        let err = (det_wb(&q, &p) - numeric).abs();
        if err < 1e-12 {
            Ok(err)
        } else {
            Err(format!("det W_b closed form off by {err:e} at {q:?}"))
        }
    })
}

pub fn check_dissipation_identity(cases: u32) -> Result<f64, String> {
    sweep_states(
        cases,
        (coords_strategy(), rates_strategy(), params_strategy(), config_strategy()),
        |(q, qd, p, cfg)| {
            let lhs = dissipation_forces(&q, &qd, &p, &cfg).dot(&qd.to_vector());
            let err = (lhs + 2.0 * dissipation(&q, &qd, &p, &cfg).total()).abs();
            if err < 1e-10 {
                Ok(err)
            } else {
                Err(format!("Fd . qd + 2 D = {err:e} for {cfg:?}"))
            }
        },
    )
}

/// Runs covering every engine configuration.
pub fn reference_runs() -> Vec<(ModelConfig, GaitSpec, RobotParams)> {
    let t1 = RobotParams::preset(ParamPreset::Table1Simulation);
    let t2 = RobotParams::preset(ParamPreset::Table2Simulation);
    let kin = |w, r| ModelConfig::new(Actuation::Kinematic, w, r);
    let semi = |w, r| ModelConfig::new(Actuation::SemiPassive, w, r);
    let asym_sp = NamedGait::AsymmetricSemiPassive.spec(2.0);
    let sym_sp = NamedGait::SymmetricSemiPassive.spec(4.0);
    vec![
        (kin(WheelModel::NoSkid, false), NamedGait::AsymmetricKinematic.spec(4.0), t1),
        (kin(WheelModel::NoSkid, true), NamedGait::AsymmetricKinematic.spec(2.0), t1),
        (kin(WheelModel::ViscousSkid, true), NamedGait::SymmetricKinematic.spec(4.0), t1),
        (semi(WheelModel::NoSkid, true), asym_sp, t2.with_gamma1(asym_sp.gamma1)),
        (semi(WheelModel::NoSkid, false), sym_sp, t2.with_gamma1(sym_sp.gamma1)),
        (semi(WheelModel::ViscousSkid, true), sym_sp, t2.with_gamma1(sym_sp.gamma1)),
    ]
}

fn horizon(g: &GaitSpec, cycles: f64) -> f64 {
    g.first_cycle_start() + cycles * g.period()
}

/// Largest `|W qd|` over the samples of every no-skid reference run.
pub fn check_no_skid_constraint() -> Result<f64, String> {
    let mut worst = 0.0f64;
    for (cfg, g, p) in reference_runs().into_iter().filter(|r| r.0.wheels == WheelModel::NoSkid) {
        let traj = simulate(cfg, g, p, horizon(&g, 4.0), SolverOpts::default()).map_err(|e| e.to_string())?;
        for s in &traj.samples {
            let r = (constraint_matrix(&s.q, &p).w * s.qd.to_vector()).abs().max();
            worst = worst.max(r);
        }
    }
    if worst < 1e-8 {
        Ok(worst)
    } else {
        Err(format!("|W qd| reached {worst:e}"))
    }
}

/// Largest per-cycle work-energy residual over every reference run.
pub fn check_energy_balance() -> Result<f64, String> {
    let mut worst = 0.0f64;
    for (cfg, g, p) in reference_runs() {
        let traj = simulate(cfg, g, p, horizon(&g, 4.0), SolverOpts::default()).map_err(|e| e.to_string())?;
        let audit = energy_audit(&traj, &g, &p, &cfg).map_err(|e| e.to_string())?;
        if audit.is_empty() {
            return Err(format!("no complete cycle for {}", cfg.label()));
        }
        for b in audit {
            if !(b.residual < 1e-4) {
                return Err(format!("{}: energy residual {:e} over [{:.3}, {:.3}] s", cfg.label(), b.residual, b.t0, b.t1));
            }
            worst = worst.max(b.residual);
        }
    }
    Ok(worst)
}
