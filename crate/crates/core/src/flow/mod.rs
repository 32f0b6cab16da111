//! Residual blocks `Id + eps * J(z)^T psi`, their composition, the greedy
//! construction loop, and fixed-point inversion.
//!
//! Orientation: `J(z)` is the `d_phi x d` Jacobian of the feature map, so the
//! displacement `eps * J(z)^T psi` is `eps` times the gradient of
//! `g(z) = psi . phi(z)`.

mod io;
mod schedule;

use std::sync::Arc;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use io::FlowFile;
pub use schedule::{schedule_first_order, schedule_second_order, EpsilonSchedule, ScheduleKind};

use crate::error::{check_dim, Error, Result};
use crate::feature_maps::FeatureMap;
use crate::measures::{feature_mean, psi, FeatureMean, ParticleCloud};

/// Largest admissible Lipschitz bound for the residual branch of a block.
pub const LIPSCHITZ_LIMIT: f64 = 0.5;

/// One layer `Id + f` with `f(z) = eps * J(z)^T psi`, `psi` frozen at build time.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    epsilon: f64,
    psi: DVector<f64>,
    map: Arc<FeatureMap>,
}

impl ResidualBlock {
    /// Fails with [`Error::Lipschitz`] (index 0) if the analytic bound exceeds 1/2.
    pub fn new(map: Arc<FeatureMap>, epsilon: f64, psi: DVector<f64>) -> Result<Self> {
        let block = Self::new_unchecked(map, epsilon, psi)?;
        let bound = block.lipschitz_bound();
        if !(bound <= LIPSCHITZ_LIMIT) {
            return Err(Error::Lipschitz { index: 0, bound });
        }
        Ok(block)
    }

    /// Validates shapes and finiteness but skips the 1/2-Lipschitz certificate.
    pub fn new_unchecked(map: Arc<FeatureMap>, epsilon: f64, psi: DVector<f64>) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::Input(format!("epsilon must be positive and finite, got {epsilon}")));
        }
        check_dim(map.dim_out(), psi.len())?;
        if psi.iter().any(|x| !x.is_finite()) {
            return Err(Error::Input("psi has non-finite entries".into()));
        }
        Ok(Self { epsilon, psi, map })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn psi(&self) -> &DVector<f64> {
        &self.psi
    }

    pub fn map(&self) -> &Arc<FeatureMap> {
        &self.map
    }

    pub fn dim(&self) -> usize {
        self.map.dim_in()
    }

    /// `f(z)` written into `out`.
    pub(crate) fn displacement_into(&self, z: &[f64], out: &mut [f64]) {
        self.map.grad_into(z, self.psi.as_slice(), out);
        for o in out.iter_mut() {
            *o *= self.epsilon;
        }
    }

    pub fn displacement(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), z.len())?;
        let mut out = vec![0.0; z.len()];
        self.displacement_into(z, &mut out);
        Ok(out)
    }

    /// `z + f(z)`.
    pub fn forward(&self, z: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.displacement(z)?;
        for (o, zi) in out.iter_mut().zip(z) {
            *o += zi;
        }
        Ok(out)
    }

    fn forward_in_place(&self, z: &mut [f64], scratch: &mut [f64]) {
        self.displacement_into(z, scratch);
        for (zi, s) in z.iter_mut().zip(scratch.iter()) {
            *zi += s;
        }
    }

    /// Analytic bound `eps * sqrt(d * d_phi) * L_Jac * ||psi||` on `Lip(f)`.
    pub fn lipschitz_bound(&self) -> f64 {
        let dims = (self.map.dim_in() * self.map.dim_out()) as f64;
        self.epsilon * dims.sqrt() * self.map.constants().lip_jac * self.psi.norm()
    }

    /// Mean over the cloud of `||J(z)^T psi||^2`.
    pub fn mean_sq_direction(&self, cloud: &ParticleCloud) -> Result<f64> {
        Ok(self.direction_moments(cloud)?.0)
    }

    /// Mean and sample standard deviation of `||J(z)^T psi||^2` over the cloud.
    pub(crate) fn direction_moments(&self, cloud: &ParticleCloud) -> Result<(f64, f64)> {
        check_dim(self.dim(), cloud.dim())?;
        let d = self.dim();
        let vals: Vec<f64> = cloud
            .as_slice()
            .par_chunks_exact(d)
            .map(|z| {
                let mut g = vec![0.0; d];
                self.map.grad_into(z, self.psi.as_slice(), &mut g);
                g.iter().map(|x| x * x).sum::<f64>()
            })
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = if vals.len() > 1 {
            vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Ok((mean, var.sqrt()))
    }

    /// Solves `x + f(x) = y` by iterating `x <- y - f(x)` from `x = y`.
    pub fn invert(&self, y: &[f64], tol: f64, max_iter: usize) -> Result<Inversion> {
        check_dim(self.dim(), y.len())?;
        if !(tol > 0.0) {
            return Err(Error::Input(format!("inversion tolerance must be positive, got {tol}")));
        }
        let d = y.len();
        let mut x = y.to_vec();
        let mut f = vec![0.0; d];
        let mut iterations = 0;
        loop {
            self.displacement_into(&x, &mut f);
            let residual = x
                .iter()
                .zip(&f)
                .zip(y)
                .map(|((xi, fi), yi)| (xi + fi - yi).powi(2))
                .sum::<f64>()
                .sqrt();
            if residual <= tol {
                return Ok(Inversion {
                    point: x,
                    iterations,
                    residual,
                });
            }
            if iterations == max_iter {
                return Err(Error::Inversion {
                    iterations,
                    residual,
                });
            }
            for ((xi, yi), fi) in x.iter_mut().zip(y).zip(&f) {
                *xi = yi - fi;
            }
            iterations += 1;
        }
    }
}

/// Result of inverting a single point through a block.
#[derive(Debug, Clone, PartialEq)]
pub struct Inversion {
    pub point: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

pub fn block_forward(block: &ResidualBlock, z: &[f64]) -> Result<Vec<f64>> {
    block.forward(z)
}

pub fn lipschitz_bound(block: &ResidualBlock) -> f64 {
    block.lipschitz_bound()
}

pub fn invert_block(block: &ResidualBlock, y: &[f64], tol: f64, max_iter: usize) -> Result<Inversion> {
    block.invert(y, tol, max_iter)
}

/// Ordered blocks over one shared feature map; the first block is applied first.
#[derive(Debug, Clone)]
pub struct ResidualFlow {
    map: Arc<FeatureMap>,
    blocks: Vec<ResidualBlock>,
}

impl ResidualFlow {
    pub fn empty(map: Arc<FeatureMap>) -> Self {
        Self {
            map,
            blocks: Vec::new(),
        }
    }

    /// Appends a block; it must share this flow's map and pass the certificate.
    pub fn push(&mut self, block: ResidualBlock) -> Result<()> {
        if !Arc::ptr_eq(&self.map, &block.map) {
            return Err(Error::Input("block uses a different feature map than the flow".into()));
        }
        let bound = block.lipschitz_bound();
        if !(bound <= LIPSCHITZ_LIMIT) {
            return Err(Error::Lipschitz {
                index: self.blocks.len() + 1,
                bound,
            });
        }
        self.blocks.push(block);
        Ok(())
    }

    pub fn map(&self) -> &Arc<FeatureMap> {
        &self.map
    }

    pub fn blocks(&self) -> &[ResidualBlock] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn forward_point(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.map.dim_in(), z.len())?;
        let mut x = z.to_vec();
        let mut scratch = vec![0.0; z.len()];
        for b in &self.blocks {
            b.forward_in_place(&mut x, &mut scratch);
        }
        Ok(x)
    }

    /// Inverts block by block, last block first. Returns the point and the
    /// largest iteration count used by any block.
    pub fn inverse_point(&self, y: &[f64], tol: f64, max_iter: usize) -> Result<(Vec<f64>, usize)> {
        check_dim(self.map.dim_in(), y.len())?;
        let mut x = y.to_vec();
        let mut worst = 0;
        for b in self.blocks.iter().rev() {
            let inv = b.invert(&x, tol, max_iter)?;
            worst = worst.max(inv.iterations);
            x = inv.point;
        }
        Ok((x, worst))
    }
}

/// Pushes every particle through all blocks in order.
pub fn push_forward(flow: &ResidualFlow, cloud: &ParticleCloud) -> Result<ParticleCloud> {
    check_dim(flow.map.dim_in(), cloud.dim())?;
    let d = cloud.dim();
    Ok(cloud.map_points(|z, out| {
        out.copy_from_slice(z);
        let mut scratch = vec![0.0; d];
        for b in &flow.blocks {
            b.forward_in_place(out, &mut scratch);
        }
    }))
}

pub(crate) fn push_block(block: &ResidualBlock, cloud: &ParticleCloud) -> Result<ParticleCloud> {
    check_dim(block.dim(), cloud.dim())?;
    let d = cloud.dim();
    Ok(cloud.map_points(|z, out| {
        out.copy_from_slice(z);
        let mut scratch = vec![0.0; d];
        block.forward_in_place(out, &mut scratch);
    }))
}

/// Smallest per-block residual tolerance handed out by [`block_tolerance`].
pub const BLOCK_TOL_FLOOR: f64 = 1e-14;

/// Per-block residual tolerance for inverting an `n_blocks` flow so that the
/// accumulated round-trip error stays within `roundtrip_tol`. Each block's
/// inversion error is at most twice its residual, and residuals add up along
/// the flow. Capped at `max_tol` and floored at [`BLOCK_TOL_FLOOR`].
pub fn block_tolerance(roundtrip_tol: f64, n_blocks: usize, max_tol: f64) -> f64 {
    (roundtrip_tol / (4.0 * n_blocks.max(1) as f64))
        .min(max_tol)
        .max(BLOCK_TOL_FLOOR)
}

/// Inverse pushforward of a cloud; also returns the worst per-block iteration count.
pub fn invert_cloud(
    flow: &ResidualFlow,
    cloud: &ParticleCloud,
    tol: f64,
    max_iter: usize,
) -> Result<(ParticleCloud, usize)> {
    check_dim(flow.map.dim_in(), cloud.dim())?;
    let d = cloud.dim();
    let results: Vec<(Vec<f64>, usize)> = cloud
        .as_slice()
        .par_chunks_exact(d)
        .map(|y| flow.inverse_point(y, tol, max_iter))
        .collect::<Result<_>>()?;
    let worst = results.iter().map(|r| r.1).max().unwrap_or(0);
    let pts: Vec<f64> = results.into_iter().flat_map(|r| r.0).collect();
    Ok((ParticleCloud::new(pts, d)?, worst))
}

/// Why [`build_flow`] stopped adding blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// `MMD^2 <= delta * MMD^2_0` was reached before the block budget ran out.
    TargetReached,
    /// `||psi|| <= stop_tol`.
    WitnessVanished,
    /// All `N` scheduled blocks were built.
    BudgetExhausted,
}

/// Per-block record of the construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockRecord {
    /// 1-based block index.
    pub m: usize,
    pub epsilon: f64,
    /// `MMD^2(q_m, p)` after this block.
    pub mmd_sq: f64,
    /// `MMD^2(q_{m-1}, p)` before this block.
    pub mmd_sq_before: f64,
    /// Exact improvement `mmd_sq_before - mmd_sq`.
    pub delta: f64,
    /// First-order term `2 eps mean ||J^T psi||^2`.
    pub delta1: f64,
    /// Remainder `delta - delta1`.
    pub delta2: f64,
    pub psi_norm: f64,
    pub lip_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub schedule: EpsilonSchedule,
    pub initial_mmd_sq: f64,
    pub final_mmd_sq: f64,
    pub initial_psi_norm: f64,
    /// `final / initial`, or 0 when the initial MMD is already 0.
    pub achieved_ratio: f64,
    pub target_met: bool,
    pub stop: StopReason,
    pub rows: Vec<BlockRecord>,
}

impl BuildReport {
    pub fn n_used(&self) -> usize {
        self.rows.len()
    }
}

fn ratio(final_mmd: f64, initial: f64) -> f64 {
    if initial > 0.0 {
        final_mmd / initial
    } else {
        0.0
    }
}

/// Greedy construction: each block uses the witness of the current
/// pushforward. Stops when the target ratio is met, the witness vanishes,
/// or the schedule's block budget is spent.
pub fn build_flow(
    q0: &ParticleCloud,
    p: &ParticleCloud,
    map: Arc<FeatureMap>,
    schedule: &EpsilonSchedule,
    stop_tol: f64,
) -> Result<(ResidualFlow, BuildReport, ParticleCloud)> {
    check_dim(map.dim_in(), q0.dim())?;
    check_dim(map.dim_in(), p.dim())?;
    if !(stop_tol >= 0.0) {
        return Err(Error::Input(format!("stop_tol must be >= 0, got {stop_tol}")));
    }
    // the target mean is fixed and each pushforward's mean is reused as the
    // next block's starting mean
    let mp = feature_mean(p, &map)?;
    let mut mq = feature_mean(q0, &map)?;
    let initial = (&mq.0 - &mp.0).norm_squared();
    let target = schedule.delta() * initial;
    let eps = schedule.epsilon();
    let mut flow = ResidualFlow::empty(map.clone());
    let mut rows = Vec::new();
    let mut q = q0.clone();
    let mut current = initial;
    let mut initial_psi_norm = None;
    let mut stop = StopReason::BudgetExhausted;

    for m in 1..=schedule.n_blocks() {
        let witness = FeatureMean(&mp.0 - &mq.0);
        let psi_norm = witness.norm();
        initial_psi_norm.get_or_insert(psi_norm);
        if psi_norm <= stop_tol {
            stop = StopReason::WitnessVanished;
            break;
        }
        if current <= target {
            stop = StopReason::TargetReached;
            break;
        }
        let block = ResidualBlock::new(map.clone(), eps, witness.0).map_err(|e| match e {
            Error::Lipschitz { bound, .. } => Error::Lipschitz { index: m, bound },
            other => other,
        })?;
        let delta1 = 2.0 * eps * block.mean_sq_direction(&q)?;
        let next = push_block(&block, &q)?;
        let mq_next = feature_mean(&next, &map)?;
        let after = (&mq_next.0 - &mp.0).norm_squared();
        let delta = current - after;
        rows.push(BlockRecord {
            m,
            epsilon: eps,
            mmd_sq: after,
            mmd_sq_before: current,
            delta,
            delta1,
            delta2: delta - delta1,
            psi_norm,
            lip_bound: block.lipschitz_bound(),
        });
        flow.push(block)?;
        q = next;
        mq = mq_next;
        current = after;
    }
    if stop == StopReason::BudgetExhausted && current <= target && !rows.is_empty() {
        // the last scheduled block landed on target; keep the more informative reason
        stop = StopReason::TargetReached;
    }

    let achieved_ratio = ratio(current, initial);
    let report = BuildReport {
        schedule: *schedule,
        initial_mmd_sq: initial,
        final_mmd_sq: current,
        initial_psi_norm: initial_psi_norm.unwrap_or_else(|| initial.sqrt()),
        achieved_ratio,
        target_met: current <= target,
        stop,
        rows,
    };
    Ok((flow, report, q))
}

/// Outcome of the first-order construction with `safety_c` doubling.
#[derive(Debug, Clone)]
pub struct FirstOrderRun {
    pub flow: ResidualFlow,
    pub report: BuildReport,
    pub pushed: ParticleCloud,
    pub safety_c: f64,
    pub attempts: usize,
}

/// Runs the first-order schedule, doubling `safety_c` until the target ratio
/// is met or `safety_c` would exceed `safety_c_cap`. The last attempt is
/// returned either way; check `report.target_met`.
pub fn build_first_order(
    q0: &ParticleCloud,
    p: &ParticleCloud,
    map: Arc<FeatureMap>,
    delta: f64,
    safety_c: f64,
    safety_c_cap: f64,
    stop_tol: f64,
) -> Result<FirstOrderRun> {
    let b = map.constants().min_sv_sq;
    let mut c = safety_c;
    let mut attempts = 0;
    loop {
        attempts += 1;
        let schedule = schedule_first_order(delta, b, c)?;
        let (flow, report, pushed) = build_flow(q0, p, map.clone(), &schedule, stop_tol)?;
        if report.target_met || c * 2.0 > safety_c_cap {
            return Ok(FirstOrderRun {
                flow,
                report,
                pushed,
                safety_c: c,
                attempts,
            });
        }
        c *= 2.0;
    }
}

/// Second-order schedule from the initial witness and the map's constants.
pub fn second_order_for(
    q0: &ParticleCloud,
    p: &ParticleCloud,
    map: &FeatureMap,
    delta: f64,
) -> Result<EpsilonSchedule> {
    let psi0 = psi(p, q0, map)?.norm();
    schedule_second_order(map.constants(), psi0, delta, map.dim_in(), map.dim_out())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::{sample_distribution, DistributionSpec};
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn id1() -> Arc<FeatureMap> {
        Arc::new(FeatureMap::identity(1).unwrap())
    }

    fn sine_map() -> Arc<FeatureMap> {
        Arc::new(
            FeatureMap::bounded_sine(0.5, DMatrix::from_row_slice(2, 2, &[1.0, -0.6, 0.4, 1.5])).unwrap(),
        )
    }

    fn pm(x: f64) -> ParticleCloud {
        ParticleCloud::new(vec![x], 1).unwrap()
    }

    #[test]
    fn block_tolerance_splits_the_budget() {
        assert_eq!(block_tolerance(1e-9, 1, 1e-12), 1e-12);
        assert_eq!(block_tolerance(1e-9, 1000, 1e-12), 1e-9 / 4000.0);
        assert_eq!(block_tolerance(1e-9, 10_000_000, 1e-12), BLOCK_TOL_FLOOR);
        assert_eq!(block_tolerance(1e-9, 0, 1e-12), 1e-12);
    }

    #[test]
    fn zero_witness_block_is_identity() {
        let b = ResidualBlock::new(sine_map(), 0.3, DVector::zeros(4)).unwrap();
        assert_eq!(b.forward(&[0.7, -2.0]).unwrap(), vec![0.7, -2.0]);
        let inv = b.invert(&[0.7, -2.0], 1e-12, 10).unwrap();
        assert_eq!(inv.iterations, 0);
        assert_eq!(inv.point, vec![0.7, -2.0]);
    }

    #[test]
    fn constant_shift_block() {
        let b = ResidualBlock::new(id1(), 0.1, DVector::from_vec(vec![1.0])).unwrap();
        assert_eq!(b.forward(&[0.0]).unwrap(), vec![0.1]);
        let inv = b.invert(&[0.1], 1e-12, 60).unwrap();
        assert!(inv.point[0].abs() <= 1e-12);
        assert_eq!(b.lipschitz_bound(), 0.0);
    }

    #[test]
    fn affine_displacement_is_transpose_product() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, -1.0, 3.0]);
        let map = Arc::new(FeatureMap::affine(a, DVector::zeros(2)).unwrap());
        let b = ResidualBlock::new(map, 0.5, DVector::from_vec(vec![1.0, -2.0])).unwrap();
        // A^T psi = (2*1 + -1*-2, 1*1 + 3*-2) = (4, -5)
        for z in [[0.0, 0.0], [3.0, -1.0]] {
            let f = b.displacement(&z).unwrap();
            assert_eq!(f, vec![2.0, -2.5]);
        }
    }

    #[test]
    fn lipschitz_bound_example() {
        let map = Arc::new(FeatureMap::bounded_sine(0.5, DMatrix::from_element(1, 1, 1.0)).unwrap());
        assert_eq!(map.constants().lip_jac, 0.5);
        let psi = DVector::from_vec(vec![0.6, 0.8]);
        let b = ResidualBlock::new(map, 0.1, psi).unwrap();
        let expect = 0.1 * 2f64.sqrt() * 0.5;
        assert!((b.lipschitz_bound() - expect).abs() < 1e-15);
        assert!((b.lipschitz_bound() - 0.0707).abs() < 1e-4);
    }

    #[test]
    fn sampled_lipschitz_never_exceeds_bound() {
        let map = sine_map();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let psi = DVector::from_fn(4, |_, _| rng.sample::<f64, _>(StandardNormal));
        let b = ResidualBlock::new(map, 0.05, psi).unwrap();
        let bound = b.lipschitz_bound();
        for _ in 0..10_000 {
            let x: Vec<f64> = (0..2).map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal)).collect();
            let y: Vec<f64> = x.iter().map(|v| v + rng.sample::<f64, _>(StandardNormal)).collect();
            let fx = b.displacement(&x).unwrap();
            let fy = b.displacement(&y).unwrap();
            let num: f64 = fx.iter().zip(&fy).map(|(a, c)| (a - c).powi(2)).sum::<f64>().sqrt();
            let den: f64 = x.iter().zip(&y).map(|(a, c)| (a - c).powi(2)).sum::<f64>().sqrt();
            assert!(num / den <= bound * (1.0 + 1e-12));
        }
    }

    #[test]
    fn certificate_violation_is_rejected() {
        let map = sine_map();
        let psi = DVector::from_element(4, 10.0);
        assert!(matches!(
            ResidualBlock::new(map.clone(), 1.0, psi.clone()),
            Err(Error::Lipschitz { .. })
        ));
        let mut flow = ResidualFlow::empty(map.clone());
        let b = ResidualBlock::new_unchecked(map, 1.0, psi).unwrap();
        assert!(matches!(flow.push(b), Err(Error::Lipschitz { index: 1, .. })));
    }

    #[test]
    fn inversion_fails_loudly_when_not_contractive() {
        // f(x) = 3 sin-ish displacement, far beyond the 1/2 certificate
        let map = Arc::new(FeatureMap::bounded_sine(1.0, DMatrix::from_element(1, 1, 3.0)).unwrap());
        let b = ResidualBlock::new_unchecked(map, 2.0, DVector::from_vec(vec![0.0, 1.0])).unwrap();
        assert!(matches!(b.invert(&[0.3], 1e-12, 60), Err(Error::Inversion { .. })));
    }

    #[test]
    fn push_forward_examples() {
        let map = id1();
        let flow = ResidualFlow::empty(map.clone());
        let c = pm(0.25);
        assert_eq!(push_forward(&flow, &c).unwrap(), c);

        let mut flow = ResidualFlow::empty(map.clone());
        flow.push(ResidualBlock::new(map.clone(), 0.1, DVector::zeros(1)).unwrap()).unwrap();
        assert_eq!(push_forward(&flow, &c).unwrap(), c);

        let mut flow = ResidualFlow::empty(map.clone());
        for _ in 0..2 {
            flow.push(ResidualBlock::new(map.clone(), 0.1, DVector::from_vec(vec![1.0])).unwrap()).unwrap();
        }
        assert!((push_forward(&flow, &pm(0.0)).unwrap().point(0)[0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn build_flow_identical_clouds_builds_nothing() {
        let q = pm(0.4);
        let s = schedule_second_order(
            FeatureMap::identity(1).unwrap().constants(),
            1.0,
            1e-3,
            1,
            1,
        )
        .unwrap();
        let (flow, report, _) = build_flow(&q, &q, id1(), &s, 1e-12).unwrap();
        assert!(flow.is_empty());
        assert_eq!(report.final_mmd_sq, 0.0);
        assert_eq!(report.stop, StopReason::WitnessVanished);
        assert_eq!(report.achieved_ratio, 0.0);
    }

    #[test]
    fn build_flow_point_mass_toy() {
        let (q, p) = (pm(0.0), pm(1.0));
        let map = id1();
        let s = second_order_for(&q, &p, &map, 1e-3).unwrap();
        assert_eq!(s.epsilon(), 0.5);
        let (flow, report, _) = build_flow(&q, &p, map, &s, 1e-12).unwrap();
        assert_eq!(flow.len(), 5);
        assert_eq!(report.stop, StopReason::TargetReached);
        for r in &report.rows {
            let expect = 0.25f64.powi(r.m as i32);
            assert!((r.mmd_sq - expect).abs() < 1e-15, "{r:?}");
            assert!((r.psi_norm - 0.5f64.powi(r.m as i32 - 1)).abs() < 1e-15);
        }
        assert!(report.achieved_ratio <= 1e-3);
    }

    #[test]
    fn round_trip_through_sine_blocks() {
        let map = sine_map();
        let q = sample_distribution(&DistributionSpec::Gaussian { mean: vec![0.0, 0.0], cov: None }, 1000, 1).unwrap();
        let p = sample_distribution(
            &DistributionSpec::Gaussian { mean: vec![1.0, -1.0], cov: None },
            1000,
            2,
        )
        .unwrap();
        let s = second_order_for(&q, &p, &map, 0.1).unwrap();
        let (flow, report, pushed) = build_flow(&q, &p, map, &s, 1e-12).unwrap();
        assert!(!flow.is_empty());
        assert_eq!(push_forward(&flow, &q).unwrap(), pushed);
        assert!(report.rows.iter().all(|r| r.lip_bound <= LIPSCHITZ_LIMIT));
        let (back, worst) = invert_cloud(&flow, &pushed, 1e-12, 60).unwrap();
        assert!(worst <= 60);
        for (a, b) in back.points().zip(q.points()) {
            let err: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            assert!(err <= 1e-9);
        }
        // witness norm never grows past its initial value
        let psi0 = report.initial_psi_norm;
        assert!(report.rows.iter().all(|r| r.psi_norm <= psi0 * (1.0 + 1e-12)));
    }

    #[test]
    fn displacement_is_gradient_of_witness_function() {
        let map = sine_map();
        let psi = DVector::from_vec(vec![0.3, -0.2, 0.7, 0.1]);
        let b = ResidualBlock::new(map.clone(), 1e-3, psi.clone()).unwrap();
        let h = 1e-5;
        let g = |z: &[f64]| map.eval(z).unwrap().dot(&psi);
        for z in [[0.1, 0.2], [-1.3, 2.2], [4.0, -0.5]] {
            let f = b.displacement(&z).unwrap();
            for j in 0..2 {
                let mut zp = z;
                let mut zm = z;
                zp[j] += h;
                zm[j] -= h;
                let fd = (g(&zp) - g(&zm)) / (2.0 * h);
                assert!((f[j] / 1e-3 - fd).abs() < 1e-8);
            }
        }
    }
}
