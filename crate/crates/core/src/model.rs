//! Geometry, constraints, energy and generalized forces of the three-link vehicle.
//!
//! Coordinates are `q = (x, y, theta, phi1, phi2)`. `(x, y)` is the center of the
//! middle link (which also carries the lumped middle wheel), `theta` its heading.
//! The front side link hangs off the joint at `+h e(theta)` with absolute heading
//! `theta1 = theta - phi1`; the rear side link hangs off `-h e(theta)` with heading
//! `theta2 = theta + phi2` and extends backwards. Wheel and center of mass of each
//! side link lie on the link axis at distances `l` and `b` from the joint.

use nalgebra::{Matrix2x5, Matrix3, SMatrix, SVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engines::{Actuation, ModelConfig, WheelModel};

pub type Vec5 = SVector<f64, 5>;
pub type Mat5 = SMatrix<f64, 5, 5>;
pub type Mat3x5 = SMatrix<f64, 3, 5>;

pub const X: usize = 0;
pub const Y: usize = 1;
pub const THETA: usize = 2;
pub const PHI1: usize = 3;
pub const PHI2: usize = 4;

/// Generalized coordinates. Angles are kept unwrapped.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Coords {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub phi1: f64,
    pub phi2: f64,
}

/// Time derivative of [`Coords`], same slot order.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Rates {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub phi1: f64,
    pub phi2: f64,
}

macro_rules! five_slot_impl {
    ($ty:ident) => {
        impl $ty {
            pub fn new(x: f64, y: f64, theta: f64, phi1: f64, phi2: f64) -> Self {
                Self { x, y, theta, phi1, phi2 }
            }

            pub fn to_vector(&self) -> Vec5 {
                Vec5::new(self.x, self.y, self.theta, self.phi1, self.phi2)
            }

            pub fn from_vector(v: &Vec5) -> Self {
                Self::new(v[0], v[1], v[2], v[3], v[4])
            }

            pub fn to_array(&self) -> [f64; 5] {
                [self.x, self.y, self.theta, self.phi1, self.phi2]
            }

            pub fn is_finite(&self) -> bool {
                self.to_array().iter().all(|v| v.is_finite())
            }
        }
    };
}

five_slot_impl!(Coords);
five_slot_impl!(Rates);

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid robot parameter `{field}`: {reason}")]
pub struct ParamError {
    pub field: &'static str,
    pub reason: String,
}

/// Physical parameters of the vehicle, SI units.
///
/// Index 0 of the per-wheel arrays is the middle wheel, 1 the front side link
/// (`phi1`), 2 the rear side link (`phi2`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotParams {
    pub m0: f64,
    pub m1: f64,
    pub m2: f64,
    pub i0: f64,
    pub i1: f64,
    pub i2: f64,
    /// Half length of the middle link.
    pub h: f64,
    /// Joint to wheel distance on the side links.
    pub l: f64,
    /// Joint to center-of-mass distance on the side links.
    pub b: f64,
    /// Roll resistance, kg/s.
    pub c_roll: [f64; 3],
    /// Skid resistance, N s/m.
    pub c_skid: [f64; 3],
    pub k_tau: f64,
    pub c_tau: f64,
    /// Free angle of the passive torsion spring.
    pub gamma1: f64,
}

/// Named parameter sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamPreset {
    /// Kinematic robot, skid coefficients used for the numerical simulations.
    Table1Simulation,
    Table1FittedAsymmetric,
    Table1FittedSymmetric,
    /// Semi-passive robot, simulation coefficients (k_tau = 0.188, c_tau = 0.007).
    Table2Simulation,
    Table2FittedSymmetric,
}

impl ParamPreset {
    pub const ALL: [ParamPreset; 5] = [
        ParamPreset::Table1Simulation,
        ParamPreset::Table1FittedAsymmetric,
        ParamPreset::Table1FittedSymmetric,
        ParamPreset::Table2Simulation,
        ParamPreset::Table2FittedSymmetric,
    ];

    /// Resolve `table1`/`table2` plus a variant name
    /// (`simulation`, `fitted-asymmetric`, `fitted-symmetric`).
    pub fn from_table(table: &str, variant: &str) -> Option<Self> {
        let v = variant.replace('_', "-");
        match (table, v.as_str()) {
            ("table1", "simulation") => Some(Self::Table1Simulation),
            ("table1", "fitted-asymmetric") => Some(Self::Table1FittedAsymmetric),
            ("table1", "fitted-symmetric") => Some(Self::Table1FittedSymmetric),
            ("table2", "simulation") => Some(Self::Table2Simulation),
            ("table2", "fitted-symmetric") => Some(Self::Table2FittedSymmetric),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Table1Simulation => "table1/simulation",
            Self::Table1FittedAsymmetric => "table1/fitted-asymmetric",
            Self::Table1FittedSymmetric => "table1/fitted-symmetric",
            Self::Table2Simulation => "table2/simulation",
            Self::Table2FittedSymmetric => "table2/fitted-symmetric",
        }
    }
}

impl RobotParams {
    fn kinematic_base() -> Self {
        Self {
            m0: 1.04,
            m1: 0.2,
            m2: 0.2,
            i0: 86e-4,
            i1: 5e-4,
            i2: 5e-4,
            h: 0.144,
            l: 0.112,
            b: 0.0685,
            c_roll: [0.6, 0.3, 0.3],
            c_skid: [100.0, 50.0, 50.0],
            k_tau: 0.0,
            c_tau: 0.0,
            gamma1: 0.0,
        }
    }

    fn semi_passive_base() -> Self {
        Self {
            m0: 1.04,
            m1: 0.34,
            m2: 0.34,
            i0: 86e-4,
            i1: 5.9e-4,
            i2: 5.9e-4,
            h: 0.144,
            l: 0.112,
            b: 0.058,
            c_roll: [0.6, 0.3, 0.3],
            c_skid: [400.0, 200.0, 200.0],
            k_tau: 0.188,
            c_tau: 0.007,
            gamma1: 0.0,
        }
    }

    pub fn preset(preset: ParamPreset) -> Self {
        match preset {
            ParamPreset::Table1Simulation => Self::kinematic_base(),
            ParamPreset::Table1FittedAsymmetric => Self {
                c_skid: [74.5, 91.0, 95.0],
                ..Self::kinematic_base()
            },
            ParamPreset::Table1FittedSymmetric => Self {
                c_skid: [104.0, 34.0, 45.0],
                ..Self::kinematic_base()
            },
            ParamPreset::Table2Simulation => Self::semi_passive_base(),
            ParamPreset::Table2FittedSymmetric => Self {
                c_skid: [420.0, 200.0, 70.0],
                k_tau: 0.137,
                c_tau: 0.006,
                ..Self::semi_passive_base()
            },
        }
    }

    pub fn with_gamma1(mut self, gamma1: f64) -> Self {
        self.gamma1 = gamma1;
        self
    }

    pub fn validate(&self) -> Result<(), ParamError> {
        let positive = [
            ("m0", self.m0),
            ("m1", self.m1),
            ("m2", self.m2),
            ("I0", self.i0),
            ("I1", self.i1),
            ("I2", self.i2),
            ("h", self.h),
            ("l", self.l),
            ("b", self.b),
        ];
        for (field, v) in positive {
            if !v.is_finite() || v <= 0.0 {
                return Err(ParamError {
                    field,
                    reason: format!("must be finite and > 0, got {v}"),
                });
            }
        }
        let non_negative = [
            ("cR0", self.c_roll[0]),
            ("cR1", self.c_roll[1]),
            ("cR2", self.c_roll[2]),
            ("cS0", self.c_skid[0]),
            ("cS1", self.c_skid[1]),
            ("cS2", self.c_skid[2]),
            ("k_tau", self.k_tau),
            ("c_tau", self.c_tau),
        ];
        for (field, v) in non_negative {
            if !v.is_finite() || v < 0.0 {
                return Err(ParamError {
                    field,
                    reason: format!("must be finite and >= 0, got {v}"),
                });
            }
        }
        if !self.gamma1.is_finite() {
            return Err(ParamError {
                field: "gamma1",
                reason: "must be finite".into(),
            });
        }
        Ok(())
    }
}

/// Unit heading vector `e(a)`.
#[inline]
pub fn heading(a: f64) -> Vector2<f64> {
    Vector2::new(a.cos(), a.sin())
}

/// `e(a)` rotated by +90 degrees.
#[inline]
pub fn heading_perp(a: f64) -> Vector2<f64> {
    Vector2::new(-a.sin(), a.cos())
}

/// Absolute headings `[theta, theta1, theta2]` of the three links.
#[inline]
pub fn link_headings(q: &Coords) -> [f64; 3] {
    [q.theta, q.theta - q.phi1, q.theta + q.phi2]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WheelFrame {
    pub position: Vector2<f64>,
    /// Rolling direction.
    pub tangent: Vector2<f64>,
    /// Axle direction; lateral velocity along it is skid.
    pub normal: Vector2<f64>,
}

pub fn wheel_frames(q: &Coords, p: &RobotParams) -> [WheelFrame; 3] {
    let [th0, th1, th2] = link_headings(q);
    let r0 = Vector2::new(q.x, q.y);
    let e0 = heading(th0);
    let r1 = r0 + p.h * e0 + p.l * heading(th1);
    let r2 = r0 - p.h * e0 - p.l * heading(th2);
    [(r0, th0), (r1, th1), (r2, th2)].map(|(position, th)| WheelFrame {
        position,
        tangent: heading(th),
        normal: heading_perp(th),
    })
}

/// Centers of mass of the three links.
pub fn link_centers(q: &Coords, p: &RobotParams) -> [Vector2<f64>; 3] {
    let [th0, th1, th2] = link_headings(q);
    let r0 = Vector2::new(q.x, q.y);
    let e0 = heading(th0);
    [
        r0,
        r0 + p.h * e0 + p.b * heading(th1),
        r0 - p.h * e0 - p.b * heading(th2),
    ]
}

/// Position Jacobians (2x5) of the three points lying on the link axes at
/// distance `dist` from their joints (index 0 is the middle point itself).
fn point_jacobians(q: &Coords, h: f64, dist: f64) -> [Matrix2x5<f64>; 3] {
    let [th0, th1, th2] = link_headings(q);
    let mut base = Matrix2x5::zeros();
    base[(0, X)] = 1.0;
    base[(1, Y)] = 1.0;

    let mut front = base;
    let d_theta = h * heading_perp(th0) + dist * heading_perp(th1);
    let d_phi1 = -dist * heading_perp(th1);
    front.set_column(THETA, &d_theta);
    front.set_column(PHI1, &d_phi1);

    let mut rear = base;
    let d_theta = -h * heading_perp(th0) - dist * heading_perp(th2);
    let d_phi2 = -dist * heading_perp(th2);
    rear.set_column(THETA, &d_theta);
    rear.set_column(PHI2, &d_phi2);

    [base, front, rear]
}

pub fn wheel_jacobians(q: &Coords, p: &RobotParams) -> [Matrix2x5<f64>; 3] {
    point_jacobians(q, p.h, p.l)
}

pub fn center_jacobians(q: &Coords, p: &RobotParams) -> [Matrix2x5<f64>; 3] {
    point_jacobians(q, p.h, p.b)
}

/// Angular-rate selectors: link i spins at `omega_rows[i] . qd`.
const OMEGA_ROWS: [[f64; 5]; 3] = [
    [0.0, 0.0, 1.0, 0.0, 0.0],
    [0.0, 0.0, 1.0, -1.0, 0.0],
    [0.0, 0.0, 1.0, 0.0, 1.0],
];

/// Roll (`v_par`) and skid (`v_perp`) velocity of each wheel.
pub fn wheel_velocities(q: &Coords, qd: &Rates, p: &RobotParams) -> ([f64; 3], [f64; 3]) {
    let frames = wheel_frames(q, p);
    let jac = wheel_jacobians(q, p);
    let qdv = qd.to_vector();
    let mut v_par = [0.0; 3];
    let mut v_perp = [0.0; 3];
    for i in 0..3 {
        let v = jac[i] * qdv;
        v_par[i] = frames[i].tangent.dot(&v);
        v_perp[i] = frames[i].normal.dot(&v);
    }
    (v_par, v_perp)
}

/// Nonholonomic no-skid constraint matrix `W(q)` with `W qd = (v_perp_i)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstraintMatrix {
    pub w: Mat3x5,
}

impl ConstraintMatrix {
    /// Body block (x, y, theta columns).
    pub fn body(&self) -> Matrix3<f64> {
        self.w.fixed_columns::<3>(0).into_owned()
    }

    /// Shape block (phi1, phi2 columns).
    pub fn shape(&self) -> SMatrix<f64, 3, 2> {
        self.w.fixed_columns::<2>(3).into_owned()
    }

    /// Columns for an arbitrary coordinate subset.
    pub fn columns(&self, idx: &[usize]) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_fn(3, idx.len(), |r, c| self.w[(r, idx[c])])
    }
}

pub fn constraint_matrix(q: &Coords, p: &RobotParams) -> ConstraintMatrix {
    let (s, c) = q.theta.sin_cos();
    let a1 = q.phi1 - q.theta;
    let a2 = q.phi2 + q.theta;
    let (h, l) = (p.h, p.l);
    #[rustfmt::skip]
    let w = Mat3x5::new(
        -s,        c,         0.0,                    0.0, 0.0,
        a1.sin(),  a1.cos(),  l + h * q.phi1.cos(),   -l,  0.0,
        -a2.sin(), a2.cos(),  -l - h * q.phi2.cos(),  0.0, -l,
    );
    ConstraintMatrix { w }
}

/// `Wdot(q, qd) * qd`, the velocity-product term of the differentiated constraint.
pub fn constraint_rate_term(q: &Coords, qd: &Rates, p: &RobotParams) -> Vector3<f64> {
    let h = p.h;
    let a1 = q.phi1 - q.theta;
    let a1d = qd.phi1 - qd.theta;
    let a2 = q.phi2 + q.theta;
    let a2d = qd.phi2 + qd.theta;
    let (s, c) = q.theta.sin_cos();
    #[rustfmt::skip]
    let wdot = Mat3x5::new(
        -c * qd.theta,        -s * qd.theta,         0.0,                            0.0, 0.0,
        a1.cos() * a1d,       -a1.sin() * a1d,       -h * q.phi1.sin() * qd.phi1,    0.0, 0.0,
        -a2.cos() * a2d,      -a2.sin() * a2d,       h * q.phi2.sin() * qd.phi2,     0.0, 0.0,
    );
    wdot * qd.to_vector()
}

/// Closed-form determinant of the body block of `W`. Vanishes on `phi1 = phi2`.
pub fn det_wb(q: &Coords, p: &RobotParams) -> f64 {
    p.h * (q.phi1 - q.phi2).sin() + p.l * (q.phi1.sin() - q.phi2.sin())
}

/// Residual of the bounded-crossing condition `phi1dot sin(phi2) + phi2dot sin(phi1)`.
pub fn boundedness_condition(q: &Coords, phi1dot: f64, phi2dot: f64) -> f64 {
    phi1dot * q.phi2.sin() + phi2dot * q.phi1.sin()
}

pub fn kinetic_energy(q: &Coords, qd: &Rates, p: &RobotParams) -> f64 {
    let jac = center_jacobians(q, p);
    let qdv = qd.to_vector();
    let masses = [p.m0, p.m1, p.m2];
    let inertias = [p.i0, p.i1, p.i2];
    let mut t = 0.0;
    for i in 0..3 {
        let v = jac[i] * qdv;
        let w: f64 = OMEGA_ROWS[i].iter().zip(qdv.iter()).map(|(a, b)| a * b).sum();
        t += 0.5 * masses[i] * v.norm_squared() + 0.5 * inertias[i] * w * w;
    }
    t
}

pub fn potential_energy(q: &Coords, p: &RobotParams, cfg: &ModelConfig) -> f64 {
    match cfg.actuation {
        Actuation::SemiPassive => 0.5 * p.k_tau * (q.phi1 - p.gamma1).powi(2),
        Actuation::Kinematic => 0.0,
    }
}

/// Inertia matrix `M(q)`.
pub fn mass_matrix(q: &Coords, p: &RobotParams) -> Mat5 {
    let jac = center_jacobians(q, p);
    let masses = [p.m0, p.m1, p.m2];
    let inertias = [p.i0, p.i1, p.i2];
    let mut m = Mat5::zeros();
    for i in 0..3 {
        m += masses[i] * jac[i].transpose() * jac[i];
        let a = Vec5::from_row_slice(&OMEGA_ROWS[i]);
        m += inertias[i] * a * a.transpose();
    }
    m
}

/// Velocity terms `B = Mdot qd - dT/dq`.
///
/// Each side-link center moves with `J qd`; the velocity-product part of its
/// acceleration is centripetal, so `B = sum m_i J_i^T (Jdot_i qd)`.
pub fn velocity_terms(q: &Coords, qd: &Rates, p: &RobotParams) -> Vec5 {
    let jac = center_jacobians(q, p);
    let [th0, th1, th2] = link_headings(q);
    let w0 = qd.theta;
    let w1 = qd.theta - qd.phi1;
    let w2 = qd.theta + qd.phi2;
    let acc1 = -p.h * w0 * w0 * heading(th0) - p.b * w1 * w1 * heading(th1);
    let acc2 = p.h * w0 * w0 * heading(th0) + p.b * w2 * w2 * heading(th2);
    p.m1 * jac[1].transpose() * acc1 + p.m2 * jac[2].transpose() * acc2
}

/// Split of the Rayleigh dissipation function into its three contributors.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Dissipation {
    pub joint: f64,
    pub roll: f64,
    pub skid: f64,
}

impl Dissipation {
    pub fn total(&self) -> f64 {
        self.joint + self.roll + self.skid
    }
}

fn joint_damping_on(cfg: &ModelConfig) -> bool {
    cfg.actuation == Actuation::SemiPassive
}

fn skid_on(cfg: &ModelConfig) -> bool {
    cfg.wheels == WheelModel::ViscousSkid
}

/// Rayleigh function `D = D^C + D^R + D^S` as enabled by `cfg`.
pub fn dissipation(q: &Coords, qd: &Rates, p: &RobotParams, cfg: &ModelConfig) -> Dissipation {
    let (v_par, v_perp) = wheel_velocities(q, qd, p);
    let mut d = Dissipation::default();
    if joint_damping_on(cfg) {
        d.joint = 0.5 * p.c_tau * qd.phi1 * qd.phi1;
    }
    if cfg.roll_dissipation {
        d.roll = (0..3).map(|i| 0.5 * p.c_roll[i] * v_par[i] * v_par[i]).sum();
    }
    if skid_on(cfg) {
        d.skid = (0..3).map(|i| 0.5 * p.c_skid[i] * v_perp[i] * v_perp[i]).sum();
    }
    d
}

/// Power removed by dissipation, `2 D >= 0`.
pub fn dissipation_power(q: &Coords, qd: &Rates, p: &RobotParams, cfg: &ModelConfig) -> f64 {
    2.0 * dissipation(q, qd, p, cfg).total()
}

/// Generalized dissipative forces `Fd = -dD/dqd`.
pub fn dissipation_forces(q: &Coords, qd: &Rates, p: &RobotParams, cfg: &ModelConfig) -> Vec5 {
    let mut f = Vec5::zeros();
    if joint_damping_on(cfg) {
        f[PHI1] -= p.c_tau * qd.phi1;
    }
    let roll = cfg.roll_dissipation;
    let skid = skid_on(cfg);
    if !roll && !skid {
        return f;
    }
    let frames = wheel_frames(q, p);
    let jac = wheel_jacobians(q, p);
    let qdv = qd.to_vector();
    for i in 0..3 {
        let v = jac[i] * qdv;
        if roll {
            let t = frames[i].tangent;
            f -= p.c_roll[i] * t.dot(&v) * (jac[i].transpose() * t);
        }
        if skid {
            let n = frames[i].normal;
            f -= p.c_skid[i] * n.dot(&v) * (jac[i].transpose() * n);
        }
    }
    f
}

/// Potential forces `G = dU/dq`.
pub fn potential_forces(q: &Coords, p: &RobotParams, cfg: &ModelConfig) -> Vec5 {
    let mut g = Vec5::zeros();
    if cfg.actuation == Actuation::SemiPassive {
        g[PHI1] = p.k_tau * (q.phi1 - p.gamma1);
    }
    g
}

/// Terms of `M qdd + B + G = E tau + W^T Lambda + Fd`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DynamicsTerms {
    pub mass: Mat5,
    pub velocity: Vec5,
    pub potential: Vec5,
    pub dissipative: Vec5,
}

pub fn dynamics_terms(q: &Coords, qd: &Rates, p: &RobotParams, cfg: &ModelConfig) -> DynamicsTerms {
    DynamicsTerms {
        mass: mass_matrix(q, p),
        velocity: velocity_terms(q, qd, p),
        potential: potential_forces(q, p, cfg),
        dissipative: dissipation_forces(q, qd, p, cfg),
    }
}
