//! Prescribed joint-angle inputs and the passive-joint torque law.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engines::Actuation;
use crate::model::RobotParams;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GaitError {
    #[error("gait frequency must be finite and > 0, got {0}")]
    Frequency(f64),
    #[error("gait amplitude `{0}` must be finite and >= 0")]
    Amplitude(&'static str),
    #[error("joint {joint} sweeps through the folded configuration (|gamma| + alpha >= pi)")]
    Folding { joint: u8 },
}

/// Periodic gait. Kinematic mode prescribes
/// `phi1 = gamma1 + alpha1 cos(w t + phase1)` and `phi2 = gamma2 + alpha2 sin(w t + phase2)`;
/// semi-passive mode prescribes only `phi2 = gamma2 + alpha2 cos(w t + phase2)` and
/// `gamma1` is the spring free angle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaitSpec {
    pub mode: Actuation,
    pub gamma1: f64,
    pub gamma2: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub omega: f64,
    #[serde(default)]
    pub phase1: f64,
    #[serde(default)]
    pub phase2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NamedGait {
    AsymmetricKinematic,
    SymmetricKinematic,
    AsymmetricSemiPassive,
    SymmetricSemiPassive,
}

impl NamedGait {
    pub const ALL: [NamedGait; 4] = [
        NamedGait::AsymmetricKinematic,
        NamedGait::SymmetricKinematic,
        NamedGait::AsymmetricSemiPassive,
        NamedGait::SymmetricSemiPassive,
    ];

    pub fn spec(self, omega: f64) -> GaitSpec {
        let deg = f64::to_radians;
        let (mode, g1, g2, a1, a2) = match self {
            NamedGait::AsymmetricKinematic => (Actuation::Kinematic, 45.0, -45.0, 30.0, 30.0),
            NamedGait::SymmetricKinematic => (Actuation::Kinematic, 0.0, 0.0, 30.0, 30.0),
            NamedGait::AsymmetricSemiPassive => (Actuation::SemiPassive, 45.0, -45.0, 0.0, 30.0),
            NamedGait::SymmetricSemiPassive => (Actuation::SemiPassive, 0.0, 0.0, 0.0, 30.0),
        };
        GaitSpec {
            mode,
            gamma1: deg(g1),
            gamma2: deg(g2),
            alpha1: deg(a1),
            alpha2: deg(a2),
            omega,
            phase1: 0.0,
            phase2: 0.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NamedGait::AsymmetricKinematic => "asymmetric_kinematic",
            NamedGait::SymmetricKinematic => "symmetric_kinematic",
            NamedGait::AsymmetricSemiPassive => "asymmetric_semi_passive",
            NamedGait::SymmetricSemiPassive => "symmetric_semi_passive",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.name() == name)
    }
}

/// Angle, rate and acceleration of one prescribed joint.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct JointSignal {
    pub angle: f64,
    pub rate: f64,
    pub accel: f64,
}

/// Prescribed signals at one instant. `phi1` is `None` in semi-passive mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaitSample {
    pub phi1: Option<JointSignal>,
    pub phi2: JointSignal,
}

fn cos_signal(mean: f64, amp: f64, w: f64, arg: f64) -> JointSignal {
    let (s, c) = arg.sin_cos();
    JointSignal {
        angle: mean + amp * c,
        rate: -amp * w * s,
        accel: -amp * w * w * c,
    }
}

fn sin_signal(mean: f64, amp: f64, w: f64, arg: f64) -> JointSignal {
    let (s, c) = arg.sin_cos();
    JointSignal {
        angle: mean + amp * s,
        rate: amp * w * c,
        accel: -amp * w * w * s,
    }
}

impl GaitSpec {
    pub fn with_omega(mut self, omega: f64) -> Self {
        self.omega = omega;
        self
    }

    pub fn period(&self) -> f64 {
        TAU / self.omega
    }

    pub fn validate(&self) -> Result<(), GaitError> {
        if !(self.omega.is_finite() && self.omega > 0.0) {
            return Err(GaitError::Frequency(self.omega));
        }
        for (name, a) in [("alpha1", self.alpha1), ("alpha2", self.alpha2)] {
            if !(a.is_finite() && a >= 0.0) {
                return Err(GaitError::Amplitude(name));
            }
        }
        // In semi-passive mode alpha1 is not prescribed; only the spring angle matters.
        let a1 = if self.mode == Actuation::Kinematic { self.alpha1 } else { 0.0 };
        if self.gamma1.abs() + a1 >= PI {
            return Err(GaitError::Folding { joint: 1 });
        }
        if self.gamma2.abs() + self.alpha2 >= PI {
            return Err(GaitError::Folding { joint: 2 });
        }
        Ok(())
    }

    pub fn eval(&self, t: f64) -> GaitSample {
        let w = self.omega;
        match self.mode {
            Actuation::Kinematic => GaitSample {
                phi1: Some(cos_signal(self.gamma1, self.alpha1, w, w * t + self.phase1)),
                phi2: sin_signal(self.gamma2, self.alpha2, w, w * t + self.phase2),
            },
            Actuation::SemiPassive => GaitSample {
                phi1: None,
                phi2: cos_signal(self.gamma2, self.alpha2, w, w * t + self.phase2),
            },
        }
    }

    /// First time `>= 0` at which the prescribed `phi2` crosses its mean value
    /// while decreasing.
    pub fn first_cycle_start(&self) -> f64 {
        // sin profile decreases through its mean at arg = pi, cos profile at pi/2.
        let target = match self.mode {
            Actuation::Kinematic => PI,
            Actuation::SemiPassive => FRAC_PI_2,
        };
        let arg = (target - self.phase2).rem_euclid(TAU);
        arg / self.omega
    }
}

/// Reaction torque of the passive torsion spring-damper at joint 1.
pub fn passive_torque(phi1: f64, phi1dot: f64, p: &RobotParams) -> f64 {
    -p.k_tau * (phi1 - p.gamma1) - p.c_tau * phi1dot
}
