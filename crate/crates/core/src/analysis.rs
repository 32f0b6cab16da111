//! Per-block improvement decomposition and numerical checks of the three
//! descent bounds.
//!
//! For a block built from the witness `psi = psi(p, q)`:
//!
//! * `delta  = MMD^2(q, p) - MMD^2((Id + f)#q, p)` (exact),
//! * `delta1 = 2 eps mean_q ||J(z)^T psi||^2` (first-order term),
//! * `delta2 = delta - delta1` (remainder, `O(eps^2)`).
//!
//! `delta1` is the chain-rule quadratic form. The closed expression
//! `2 psi . E_q phi(z + f(z))` is not a first-order coefficient and is not used.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::feature_maps::FeatureMap;
use crate::flow::{push_block, ResidualBlock, LIPSCHITZ_LIMIT};
use crate::measures::{mmd_squared, psi, ParticleCloud};

/// Deterministic part of every bound-check tolerance.
pub const BASE_TOLERANCE: f64 = 1e-9;
/// Standard errors added to the tolerance of averaged quantities.
pub const SE_MULTIPLIER: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaDecomposition {
    pub epsilon: f64,
    pub mmd_sq_before: f64,
    pub mmd_sq_after: f64,
    pub delta: f64,
    pub delta1: f64,
    pub delta2: f64,
    /// Standard error of `delta1` as a particle average.
    pub delta1_se: f64,
    pub psi_norm: f64,
}

/// One numerical bound check. `slack` is positive when the bound holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub tolerance: f64,
    pub satisfied: bool,
    pub seed: Option<u64>,
    pub params: BTreeMap<String, f64>,
}

impl BoundCheck {
    /// `lhs >= rhs` up to `tolerance`.
    pub fn at_least(name: &str, lhs: f64, rhs: f64, tolerance: f64) -> Self {
        let slack = lhs - rhs;
        Self {
            name: name.to_string(),
            lhs,
            rhs,
            slack,
            tolerance,
            satisfied: slack >= -tolerance,
            seed: None,
            params: BTreeMap::new(),
        }
    }

    /// `lhs <= rhs` up to `tolerance`.
    pub fn at_most(name: &str, lhs: f64, rhs: f64, tolerance: f64) -> Self {
        let mut c = Self::at_least(name, rhs, lhs, tolerance);
        c.lhs = lhs;
        c.rhs = rhs;
        c
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn with_param(mut self, key: &str, value: f64) -> Self {
        self.params.insert(key.to_string(), value);
        self
    }
}

fn witness_block(q: &ParticleCloud, p: &ParticleCloud, map: &Arc<FeatureMap>, epsilon: f64) -> Result<ResidualBlock> {
    let w = psi(p, q, map)?;
    ResidualBlock::new_unchecked(map.clone(), epsilon, w.0)
}

/// `MMD^2(q, p) - MMD^2((Id + f)#q, p)`.
pub fn delta_exact(q: &ParticleCloud, p: &ParticleCloud, block: &ResidualBlock) -> Result<f64> {
    let map = block.map();
    let before = mmd_squared(q, p, map)?;
    let after = mmd_squared(&push_block(block, q)?, p, map)?;
    Ok(before - after)
}

fn check_witness(q: &ParticleCloud, p: &ParticleCloud, block: &ResidualBlock) -> Result<f64> {
    let w = psi(p, q, block.map())?;
    let scale = 1.0 + w.norm();
    let diff = (&w.0 - block.psi()).amax();
    if diff > 1e-12 * scale {
        return Err(Error::Input(format!(
            "block witness differs from psi(p, q) by {diff:e}"
        )));
    }
    Ok(w.norm())
}

/// `2 eps mean_q ||J(z)^T psi||^2`; the block's witness must be `psi(p, q)`.
pub fn delta_first_order(q: &ParticleCloud, p: &ParticleCloud, block: &ResidualBlock) -> Result<f64> {
    check_witness(q, p, block)?;
    Ok(2.0 * block.epsilon() * block.mean_sq_direction(q)?)
}

pub fn decompose(q: &ParticleCloud, p: &ParticleCloud, block: &ResidualBlock) -> Result<DeltaDecomposition> {
    let psi_norm = check_witness(q, p, block)?;
    let map = block.map();
    let before = mmd_squared(q, p, map)?;
    let after = mmd_squared(&push_block(block, q)?, p, map)?;
    let (mean, sd) = block.direction_moments(q)?;
    let eps = block.epsilon();
    let delta = before - after;
    let delta1 = 2.0 * eps * mean;
    Ok(DeltaDecomposition {
        epsilon: eps,
        mmd_sq_before: before,
        mmd_sq_after: after,
        delta,
        delta1,
        delta2: delta - delta1,
        delta1_se: 2.0 * eps * sd / (q.len() as f64).sqrt(),
        psi_norm,
    })
}

/// Decomposition for the witness block of `(q, p)` at step `epsilon`.
pub fn decompose_at(q: &ParticleCloud, p: &ParticleCloud, map: &Arc<FeatureMap>, epsilon: f64) -> Result<DeltaDecomposition> {
    decompose(q, p, &witness_block(q, p, map, epsilon)?)
}

/// First-order gain: `delta1 >= 2 eps b MMD^2`.
pub fn check_first_order_gain(q: &ParticleCloud, p: &ParticleCloud, map: &Arc<FeatureMap>, epsilon: f64) -> Result<BoundCheck> {
    let dd = decompose_at(q, p, map, epsilon)?;
    let b = map.constants().min_sv_sq;
    let rhs = 2.0 * epsilon * b * dd.mmd_sq_before;
    let tol = BASE_TOLERANCE + SE_MULTIPLIER * dd.delta1_se;
    Ok(BoundCheck::at_least("first_order_gain", dd.delta1, rhs, tol)
        .with_param("epsilon", epsilon)
        .with_param("mmd_sq", dd.mmd_sq_before)
        .with_param("b", b)
        .with_param("se", dd.delta1_se))
}

/// Sampled difference quotients of `f` against the analytic Lipschitz bound.
///
/// Anchors are drawn at several spatial scales and partners at several
/// separations, all from `seed`.
pub fn check_lipschitz_bound(block: &ResidualBlock, pair_samples: usize, seed: u64) -> BoundCheck {
    let d = block.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scales = [0.5, 2.0, 8.0];
    let steps = [1e-3, 0.1, 1.0, 5.0];
    let mut fx = vec![0.0; d];
    let mut fy = vec![0.0; d];
    let mut worst: f64 = 0.0;
    for k in 0..pair_samples.max(1) {
        let scale = scales[k % scales.len()];
        let step = steps[(k / scales.len()) % steps.len()];
        let x: Vec<f64> = (0..d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
        let y: Vec<f64> = x.iter().map(|v| v + step * rng.sample::<f64, _>(StandardNormal)).collect();
        let dist = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        if dist == 0.0 {
            continue;
        }
        block.displacement_into(&x, &mut fx);
        block.displacement_into(&y, &mut fy);
        let num = fx.iter().zip(&fy).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        worst = worst.max(num / dist);
    }
    let rhs = block.lipschitz_bound();
    BoundCheck::at_most("lipschitz_bound", worst, rhs, BASE_TOLERANCE)
        .with_seed(seed)
        .with_param("epsilon", block.epsilon())
        .with_param("psi_norm", block.psi().norm())
        .with_param("pairs", pair_samples as f64)
}

/// Analytic bound on the remainder magnitude at step `epsilon`.
pub fn remainder_bound(map: &FeatureMap, epsilon: f64, mmd_sq: f64, psi_norm: f64) -> f64 {
    let c = map.constants();
    let sqrt_b = c.max_sv_sq.sqrt();
    let dphi = (map.dim_out() as f64).sqrt();
    epsilon * epsilon
        * mmd_sq
        * c.max_sv_sq
        * (c.max_sv_sq + psi_norm * dphi * c.hessian_bound * (1.0 + epsilon * c.lip_feat * sqrt_b))
}

/// Remainder bound: `|delta2| <= eps^2 MMD^2 B (B + ||psi|| sqrt(d_phi) C (1 + eps L_feat sqrt(B)))`.
pub fn check_remainder(q: &ParticleCloud, p: &ParticleCloud, map: &Arc<FeatureMap>, epsilon: f64) -> Result<BoundCheck> {
    let dd = decompose_at(q, p, map, epsilon)?;
    let rhs = remainder_bound(map, epsilon, dd.mmd_sq_before, dd.psi_norm);
    let tol = BASE_TOLERANCE + SE_MULTIPLIER * dd.delta1_se;
    Ok(BoundCheck::at_most("remainder", dd.delta2.abs(), rhs, tol)
        .with_param("epsilon", epsilon)
        .with_param("mmd_sq", dd.mmd_sq_before)
        .with_param("psi_norm", dd.psi_norm)
        .with_param("se", dd.delta1_se))
}

/// Combined gain: `delta >= b eps MMD^2`, expected whenever `eps <= eps_delta`.
pub fn check_descent(q: &ParticleCloud, p: &ParticleCloud, map: &Arc<FeatureMap>, epsilon: f64) -> Result<BoundCheck> {
    let dd = decompose_at(q, p, map, epsilon)?;
    let b = map.constants().min_sv_sq;
    let rhs = b * epsilon * dd.mmd_sq_before;
    let tol = BASE_TOLERANCE + SE_MULTIPLIER * dd.delta1_se;
    Ok(BoundCheck::at_least("combined_descent", dd.delta, rhs, tol)
        .with_param("epsilon", epsilon)
        .with_param("mmd_sq", dd.mmd_sq_before))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaylorFit {
    pub slope: f64,
    pub intercept: f64,
    /// `(eps, |delta2|)` pairs that entered the fit.
    pub points: Vec<(f64, f64)>,
    pub excluded: Vec<f64>,
}

/// Least-squares slope of `log |delta2|` against `log eps`.
pub fn taylor_order_fit(q: &ParticleCloud, p: &ParticleCloud, map: &Arc<FeatureMap>, eps_grid: &[f64]) -> Result<TaylorFit> {
    check_dim(map.dim_in(), q.dim())?;
    if eps_grid.len() < 4 {
        return Err(Error::Input("Taylor fit needs at least 4 step sizes".into()));
    }
    if eps_grid.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
        return Err(Error::Input("step sizes must be positive".into()));
    }
    if eps_grid.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Input("step sizes must be strictly decreasing".into()));
    }
    if eps_grid[0] / eps_grid[eps_grid.len() - 1] < 100.0 * (1.0 - 1e-12) {
        return Err(Error::Input("step sizes must span at least two decades".into()));
    }
    let witness = psi(p, q, map)?;
    let mmd_sq = witness.norm_squared();
    let floor = 1e3 * f64::EPSILON * mmd_sq;
    let mut points = Vec::new();
    let mut excluded = Vec::new();
    for &eps in eps_grid {
        let block = ResidualBlock::new_unchecked(map.clone(), eps, witness.0.clone())?;
        if block.lipschitz_bound() > LIPSCHITZ_LIMIT {
            return Err(Error::Input(format!(
                "step {eps} breaks the 1/2-Lipschitz certificate"
            )));
        }
        let dd = decompose(q, p, &block)?;
        let r = dd.delta2.abs();
        if r < floor || r == 0.0 {
            excluded.push(eps);
        } else {
            points.push((eps, r));
        }
    }
    if points.len() < 3 {
        return Err(Error::Numeric(format!(
            "only {} step sizes have a remainder above round-off",
            points.len()
        )));
    }
    let xs: Vec<f64> = points.iter().map(|(e, _)| e.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|(_, r)| r.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    Ok(TaylorFit {
        slope,
        intercept: my - slope * mx,
        points,
        excluded,
    })
}

/// `n` log-spaced step sizes from `hi` down to `lo`.
pub fn log_grid(hi: f64, lo: f64, n: usize) -> Vec<f64> {
    let (a, b) = (hi.ln(), lo.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::{sample_distribution, DistributionSpec};
    use nalgebra::{DMatrix, DVector};

    fn id1() -> Arc<FeatureMap> {
        Arc::new(FeatureMap::identity(1).unwrap())
    }

    fn pm(x: f64) -> ParticleCloud {
        ParticleCloud::new(vec![x], 1).unwrap()
    }

    fn sine() -> Arc<FeatureMap> {
        Arc::new(FeatureMap::bounded_sine(0.5, DMatrix::from_row_slice(2, 2, &[1.0, 0.3, -0.8, 1.1])).unwrap())
    }

    fn gauss(mean: &[f64], n: usize, seed: u64) -> ParticleCloud {
        sample_distribution(&DistributionSpec::Gaussian { mean: mean.to_vec(), cov: None }, n, seed).unwrap()
    }

    #[test]
    fn point_mass_toy_closed_form() {
        let (q, p, map) = (pm(0.0), pm(1.0), id1());
        let dd = decompose_at(&q, &p, &map, 0.1).unwrap();
        assert!((dd.delta - 0.19).abs() < 1e-12);
        assert!((dd.delta1 - 0.2).abs() < 1e-12);
        assert!((dd.delta2 + 0.01).abs() < 1e-12);
        let l3 = check_remainder(&q, &p, &map, 0.1).unwrap();
        assert!((l3.lhs - 0.01).abs() < 1e-12 && (l3.rhs - 0.01).abs() < 1e-12);
        assert!(l3.satisfied);
        let l1 = check_first_order_gain(&q, &p, &map, 0.1).unwrap();
        assert!((l1.lhs - l1.rhs).abs() < 1e-15);
    }

    #[test]
    fn identity_delta_matches_hand_formula() {
        // d = 1 identity: psi = mp - mq, delta = 2 eps psi^2 - eps^2 psi^2
        let q = ParticleCloud::new(vec![-0.3, 0.1, 0.7], 1).unwrap();
        let p = ParticleCloud::new(vec![1.2, 2.0], 1).unwrap();
        let psi = 1.6 - 0.5 / 3.0;
        for eps in [0.05, 0.2, 0.5] {
            let dd = decompose_at(&q, &p, &id1(), eps).unwrap();
            let expect = 2.0 * eps * psi * psi - eps * eps * psi * psi;
            assert!((dd.delta - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_witness_gives_zero_everything() {
        let q = gauss(&[0.0, 0.0], 200, 1);
        let map = sine();
        let b = ResidualBlock::new(map.clone(), 0.1, DVector::zeros(4)).unwrap();
        assert_eq!(delta_exact(&q, &q, &b).unwrap(), 0.0);
        assert_eq!(delta_first_order(&q, &q, &b).unwrap(), 0.0);
        let l3 = check_remainder(&q, &q, &map, 0.1).unwrap();
        assert_eq!((l3.lhs, l3.rhs), (0.0, 0.0));
    }

    #[test]
    fn delta_first_order_rejects_foreign_witness() {
        let q = gauss(&[0.0, 0.0], 50, 1);
        let p = gauss(&[1.0, 0.0], 50, 2);
        let b = ResidualBlock::new(sine(), 0.1, DVector::from_element(4, 0.01)).unwrap();
        assert!(matches!(delta_first_order(&q, &p, &b), Err(Error::Input(_))));
    }

    #[test]
    fn decomposition_is_consistent() {
        let q = gauss(&[0.0, 0.0], 400, 3);
        let p = gauss(&[0.5, -0.5], 400, 4);
        let map = sine();
        let dd = decompose_at(&q, &p, &map, 0.03).unwrap();
        assert_eq!(dd.delta2, dd.delta - dd.delta1);
        let b = witness_block(&q, &p, &map, 0.03).unwrap();
        let independent = mmd_squared(&q, &p, &map).unwrap() - mmd_squared(&push_block(&b, &q).unwrap(), &p, &map).unwrap();
        assert!((independent - dd.delta).abs() < 1e-12);
        assert!(dd.delta1 >= 0.0);
    }

    #[test]
    fn checks_scale_linearly_in_epsilon() {
        let q = gauss(&[0.0, 0.0], 300, 5);
        let p = gauss(&[0.8, 0.2], 300, 6);
        let map = sine();
        let a = check_first_order_gain(&q, &p, &map, 0.01).unwrap();
        let b = check_first_order_gain(&q, &p, &map, 0.02).unwrap();
        assert!((b.lhs - 2.0 * a.lhs).abs() <= 1e-14 * b.lhs.abs());
        assert!((b.rhs - 2.0 * a.rhs).abs() <= 1e-14 * b.rhs.abs());

        let w = psi(&p, &q, &map).unwrap().0;
        let b1 = ResidualBlock::new(map.clone(), 0.01, w.clone()).unwrap();
        let b2 = ResidualBlock::new(map, 0.02, w).unwrap();
        let c1 = check_lipschitz_bound(&b1, 2000, 9);
        let c2 = check_lipschitz_bound(&b2, 2000, 9);
        assert!((c2.lhs - 2.0 * c1.lhs).abs() <= 1e-12 * c2.lhs);
        assert!((c2.rhs - 2.0 * c1.rhs).abs() <= 1e-15);
        assert!(c1.satisfied && c2.satisfied);
    }

    #[test]
    fn lipschitz_bound_affine_is_zero() {
        let map = Arc::new(FeatureMap::affine(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]), DVector::zeros(2)).unwrap());
        let b = ResidualBlock::new(map, 0.3, DVector::from_vec(vec![1.0, -1.0])).unwrap();
        let c = check_lipschitz_bound(&b, 1000, 1);
        assert_eq!(c.rhs, 0.0);
        assert!(c.lhs < 1e-12 && c.satisfied);
    }

    #[test]
    fn taylor_fit_identity_slope_two() {
        let fit = taylor_order_fit(&pm(0.0), &pm(1.0), &id1(), &log_grid(0.1, 1e-4, 7)).unwrap();
        assert!((fit.slope - 2.0).abs() < 1e-6, "{}", fit.slope);
        let scaled: Vec<f64> = log_grid(0.1, 1e-4, 7).iter().map(|e| e * 0.5).collect();
        let fit2 = taylor_order_fit(&pm(0.0), &pm(1.0), &id1(), &scaled).unwrap();
        assert!((fit2.slope - fit.slope).abs() < 1e-6);
    }

    #[test]
    fn taylor_fit_bounded_sine_is_second_order() {
        let q = gauss(&[0.0, 0.0], 1000, 7);
        let p = gauss(&[0.7, -0.4], 1000, 8);
        let fit = taylor_order_fit(&q, &p, &sine(), &log_grid(0.1, 1e-4, 7)).unwrap();
        assert!((1.9..=2.1).contains(&fit.slope), "{}", fit.slope);
    }

    #[test]
    fn taylor_fit_input_errors() {
        let (q, p, map) = (pm(0.0), pm(1.0), id1());
        assert!(taylor_order_fit(&q, &p, &map, &[0.1, 0.01, 0.001]).is_err());
        assert!(taylor_order_fit(&q, &p, &map, &[0.1, 0.05, 0.02, 0.01]).is_err());
        assert!(taylor_order_fit(&q, &p, &map, &[0.001, 0.01, 0.1, 1.0]).is_err());
        // identical clouds: every remainder is zero
        assert!(matches!(
            taylor_order_fit(&q, &q, &map, &log_grid(0.1, 1e-4, 5)),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn gain_gap_for_wide_feature_maps() {
        // d_phi > d: a witness orthogonal to range(J) has no first-order gain,
        // so sigma_min(J)^2 >= 1 does not give delta1 >= 2 eps MMD^2.
        // q and p share the mean but differ in spread, so psi is mostly in
        // the sine coordinates.
        let map = Arc::new(FeatureMap::bounded_sine(0.5, DMatrix::from_element(1, 1, 1.0)).unwrap());
        let spec_q = DistributionSpec::Gaussian { mean: vec![0.5], cov: Some(vec![vec![0.25]]) };
        let spec_p = DistributionSpec::Gaussian { mean: vec![0.5], cov: Some(vec![vec![4.0]]) };
        let q = sample_distribution(&spec_q, 4000, 1).unwrap();
        let p = sample_distribution(&spec_p, 4000, 2).unwrap();
        let c = check_first_order_gain(&q, &p, &map, 0.05).unwrap();
        assert!(!c.satisfied, "{c:?}");
        assert!(c.lhs < 0.5 * c.rhs);
        // the remainder bound is unaffected
        assert!(check_remainder(&q, &p, &map, 0.05).unwrap().satisfied);
    }
}
