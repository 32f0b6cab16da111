//! Step-size schedules for the two greedy constructions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_maps::SmoothnessConstants;

/// Ratios within this relative distance of an integer are rounded to it
/// before taking the ceiling, so `log 2 / log 2` yields exactly one block.
const CEIL_GUARD: f64 = 1e-12;

fn guarded_ceil(x: f64) -> usize {
    let r = x.round();
    if (x - r).abs() <= CEIL_GUARD * x.abs().max(1.0) {
        r as usize
    } else {
        x.ceil() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    FirstOrder,
    SecondOrder,
}

/// A resolved per-block step size and block budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EpsilonSchedule {
    /// `r = log(2/delta) / 2b`, `N = ceil(safety_c * r^2 / delta)`, `eps = r / N`.
    FirstOrder {
        delta: f64,
        r: f64,
        safety_c: f64,
        n_blocks: usize,
        epsilon: f64,
    },
    /// `eps = min(eps_delta, eps_lip)`, `N = ceil(log(1/delta) / log(1/(1 - b eps)))`.
    SecondOrder {
        delta: f64,
        /// Serialized as `null` when the constraint is vacuous.
        eps_delta: Option<f64>,
        eps_lip: Option<f64>,
        b: f64,
        n_blocks: usize,
        epsilon: f64,
    },
}

impl EpsilonSchedule {
    pub fn kind(&self) -> ScheduleKind {
        match self {
            Self::FirstOrder { .. } => ScheduleKind::FirstOrder,
            Self::SecondOrder { .. } => ScheduleKind::SecondOrder,
        }
    }

    pub fn epsilon(&self) -> f64 {
        match *self {
            Self::FirstOrder { epsilon, .. } | Self::SecondOrder { epsilon, .. } => epsilon,
        }
    }

    pub fn n_blocks(&self) -> usize {
        match *self {
            Self::FirstOrder { n_blocks, .. } | Self::SecondOrder { n_blocks, .. } => n_blocks,
        }
    }

    pub fn delta(&self) -> f64 {
        match *self {
            Self::FirstOrder { delta, .. } | Self::SecondOrder { delta, .. } => delta,
        }
    }

    /// Guaranteed per-block contraction of the squared MMD, `1 - b eps`
    /// (second order only).
    pub fn contraction(&self) -> Option<f64> {
        match *self {
            Self::SecondOrder { b, epsilon, .. } => Some(1.0 - b * epsilon),
            Self::FirstOrder { .. } => None,
        }
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Config(format!("target ratio delta must lie in (0, 1), got {delta}")));
    }
    Ok(())
}

pub fn schedule_first_order(delta: f64, b: f64, safety_c: f64) -> Result<EpsilonSchedule> {
    check_delta(delta)?;
    if !(b > 0.0 && b.is_finite()) {
        return Err(Error::Config(format!("b must be positive, got {b}")));
    }
    if !(safety_c > 0.0 && safety_c.is_finite()) {
        return Err(Error::Config(format!("safety_c must be positive, got {safety_c}")));
    }
    let r = (2.0 / delta).ln() / (2.0 * b);
    let n = guarded_ceil(safety_c * r * r / delta).max(1);
    Ok(EpsilonSchedule::FirstOrder {
        delta,
        r,
        safety_c,
        n_blocks: n,
        epsilon: r / n as f64,
    })
}

pub fn schedule_second_order(
    constants: &SmoothnessConstants,
    psi0_norm: f64,
    delta: f64,
    dim: usize,
    dim_phi: usize,
) -> Result<EpsilonSchedule> {
    check_delta(delta)?;
    if !(psi0_norm > 0.0 && psi0_norm.is_finite()) {
        return Err(Error::Input(format!("initial witness norm must be positive, got {psi0_norm}")));
    }
    let SmoothnessConstants {
        min_sv_sq: b,
        max_sv_sq: big_b,
        hessian_bound: c,
        lip_feat,
        lip_jac,
    } = *constants;
    let sqrt_dphi = (dim_phi as f64).sqrt();

    let quad = b / (2.0 * (psi0_norm * sqrt_dphi * big_b * c + big_b * big_b));
    let cubic_den = 2.0 * psi0_norm * sqrt_dphi * big_b.powf(1.5) * c * lip_feat;
    let cubic = if cubic_den > 0.0 {
        (b / cubic_den).sqrt()
    } else {
        f64::INFINITY
    };
    let eps_delta = quad.min(cubic);

    let lip_den = 2.0 * ((dim * dim_phi) as f64).sqrt() * lip_jac * psi0_norm;
    let eps_lip = if lip_den > 0.0 {
        1.0 / lip_den
    } else {
        f64::INFINITY
    };

    let epsilon = eps_delta.min(eps_lip);
    if !epsilon.is_finite() || epsilon <= 0.0 {
        return Err(Error::Schedule(format!("degenerate step size {epsilon}")));
    }
    let rate = b * epsilon;
    if rate >= 1.0 {
        return Err(Error::Schedule(format!("b * eps = {rate} >= 1")));
    }
    let n = guarded_ceil((1.0 / delta).ln() / (1.0 / (1.0 - rate)).ln()).max(1);
    let finite = |x: f64| x.is_finite().then_some(x);
    Ok(EpsilonSchedule::SecondOrder {
        delta,
        eps_delta: finite(eps_delta),
        eps_lip: finite(eps_lip),
        b,
        n_blocks: n,
        epsilon,
    })
}
