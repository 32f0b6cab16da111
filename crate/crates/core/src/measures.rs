//! Particle clouds, seeded samplers, and feature-space MMD.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::feature_maps::FeatureMap;

/// Particles per partial sum in [`feature_mean`]. Fixed so the reduction
/// tree, and hence the rounding, does not depend on the thread pool.
const REDUCTION_CHUNK: usize = 512;

/// `n` points in `R^d`, stored row-major. Uniform weights are implicit.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleCloud {
    points: Vec<f64>,
    dim: usize,
}

impl ParticleCloud {
    pub fn new(points: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Input("cloud dimension must be positive".into()));
        }
        if points.is_empty() || !points.len().is_multiple_of(dim) {
            return Err(Error::Input(format!(
                "cloud buffer of length {} does not hold a positive number of {dim}-dimensional points",
                points.len()
            )));
        }
        if points.iter().any(|x| !x.is_finite()) {
            return Err(Error::Input("cloud has non-finite coordinates".into()));
        }
        Ok(Self { points, dim })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Input("cloud rows have differing lengths".into()));
        }
        Self::new(rows.concat(), dim)
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, k: usize) -> &[f64] {
        &self.points[k * self.dim..(k + 1) * self.dim]
    }

    pub fn points(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.points.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.points
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.points
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.points().map(<[f64]>::to_vec).collect()
    }

    /// Applies `f` to every particle; output order matches input order.
    pub(crate) fn map_points<F>(&self, f: F) -> Self
    where
        F: Fn(&[f64], &mut [f64]) + Sync,
    {
        let mut out = vec![0.0; self.points.len()];
        out.par_chunks_exact_mut(self.dim)
            .zip(self.points.par_chunks_exact(self.dim))
            .for_each(|(o, z)| f(z, o));
        Self {
            points: out,
            dim: self.dim,
        }
    }

    /// One particle per line, `d` comma-separated columns, no header.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let mut rows = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let row = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Input(format!("csv line {}: {e}", lineno + 1)))?;
            rows.push(row);
        }
        Self::from_rows(&rows)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, crate::report::cloud_csv(self))?;
        Ok(())
    }
}

/// Mean of `phi` over a cloud; also used for the witness `psi(p, q)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMean(pub DVector<f64>);

impl FeatureMean {
    pub fn norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn norm_squared(&self) -> f64 {
        self.0.norm_squared()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `(1/n) sum_k phi(z_k)`.
pub fn feature_mean(cloud: &ParticleCloud, map: &FeatureMap) -> Result<FeatureMean> {
    check_dim(map.dim_in(), cloud.dim())?;
    let dout = map.dim_out();
    let chunk_len = REDUCTION_CHUNK * cloud.dim();
    let partials: Vec<Vec<f64>> = cloud
        .as_slice()
        .par_chunks(chunk_len)
        .map(|chunk| {
            let mut acc = vec![0.0; dout];
            let mut buf = vec![0.0; dout];
            for z in chunk.chunks_exact(cloud.dim()) {
                map.eval_into(z, &mut buf);
                for (a, b) in acc.iter_mut().zip(&buf) {
                    *a += b;
                }
            }
            acc
        })
        .collect();
    let mut total = DVector::zeros(dout);
    for p in &partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total /= cloud.len() as f64;
    Ok(FeatureMean(total))
}

/// `psi(p, q) = E_p phi - E_q phi`; its norm is `MMD(q, p)`.
pub fn psi(p: &ParticleCloud, q: &ParticleCloud, map: &FeatureMap) -> Result<FeatureMean> {
    let mp = feature_mean(p, map)?;
    let mq = feature_mean(q, map)?;
    Ok(FeatureMean(mp.0 - mq.0))
}

/// Biased (V-statistic) squared MMD, `||E_q phi - E_p phi||^2`.
pub fn mmd_squared(q: &ParticleCloud, p: &ParticleCloud, map: &FeatureMap) -> Result<f64> {
    let mq = feature_mean(q, map)?;
    let mp = feature_mean(p, map)?;
    Ok((mq.0 - mp.0).norm_squared())
}

/// Squared MMD through the kernel double sum with `K(x, z) = phi(x) . phi(z)`.
/// Quadratic in the number of particles; an independent route to
/// [`mmd_squared`].
pub fn mmd_squared_kernel(q: &ParticleCloud, p: &ParticleCloud, map: &FeatureMap) -> Result<f64> {
    check_dim(map.dim_in(), q.dim())?;
    check_dim(map.dim_in(), p.dim())?;
    let feats = |c: &ParticleCloud| -> Vec<DVector<f64>> {
        c.points().map(|z| map.eval(z).expect("dims checked")).collect()
    };
    let fq = feats(q);
    let fp = feats(p);
    let mean_kernel = |a: &[DVector<f64>], b: &[DVector<f64>]| {
        let mut s = 0.0;
        for x in a {
            for y in b {
                s += x.dot(y);
            }
        }
        s / (a.len() as f64 * b.len() as f64)
    };
    Ok(mean_kernel(&fq, &fq) + mean_kernel(&fp, &fp) - 2.0 * mean_kernel(&fq, &fp))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianComponent {
    pub mean: Vec<f64>,
    /// Defaults to the identity.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cov: Option<Vec<Vec<f64>>>,
}

/// Source/target distribution descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DistributionSpec {
    Gaussian {
        mean: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cov: Option<Vec<Vec<f64>>>,
    },
    GaussianMixture {
        components: Vec<GaussianComponent>,
        weights: Vec<f64>,
    },
    UniformBox {
        lo: Vec<f64>,
        hi: Vec<f64>,
    },
    PointMass {
        x: Vec<f64>,
    },
    /// Planar ring: angle uniform, radius `radius + noise * N(0, 1)`.
    Ring {
        radius: f64,
        noise: f64,
    },
    /// Explicit particles; `n` is ignored.
    Points {
        rows: Vec<Vec<f64>>,
    },
    /// Particles from a headerless CSV file; `n` is ignored.
    Csv {
        path: String,
    },
}

struct GaussianSampler {
    mean: Vec<f64>,
    factor: DMatrix<f64>,
}

impl GaussianSampler {
    fn new(mean: &[f64], cov: Option<&Vec<Vec<f64>>>) -> Result<Self> {
        let d = mean.len();
        if d == 0 || mean.iter().any(|x| !x.is_finite()) {
            return Err(Error::Config("gaussian mean must be nonempty and finite".into()));
        }
        let factor = match cov {
            None => DMatrix::identity(d, d),
            Some(rows) => {
                if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                    return Err(Error::Config(format!("covariance must be {d} x {d}")));
                }
                let c = DMatrix::from_fn(d, d, |i, j| rows[i][j]);
                if c.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Config("covariance has non-finite entries".into()));
                }
                let scale = c.amax().max(f64::MIN_POSITIVE);
                if (&c - c.transpose()).amax() > 1e-12 * scale {
                    return Err(Error::Config("covariance is not symmetric".into()));
                }
                let eig = SymmetricEigen::new(c);
                if eig.eigenvalues.iter().any(|l| *l < -1e-12 * scale) {
                    return Err(Error::Config("covariance is not positive semidefinite".into()));
                }
                let sqrt_l = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
                eig.eigenvectors * sqrt_l
            }
        };
        Ok(Self {
            mean: mean.to_vec(),
            factor,
        })
    }

    fn sample_into(&self, rng: &mut ChaCha8Rng, out: &mut Vec<f64>) {
        let d = self.mean.len();
        let g: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for i in 0..d {
            let mut x = self.mean[i];
            for (j, gj) in g.iter().enumerate() {
                x += self.factor[(i, j)] * gj;
            }
            out.push(x);
        }
    }
}

impl DistributionSpec {
    /// Ambient dimension implied by the descriptor, when it is known without I/O.
    pub fn dim(&self) -> Option<usize> {
        match self {
            Self::Gaussian { mean, .. } => Some(mean.len()),
            Self::GaussianMixture { components, .. } => components.first().map(|c| c.mean.len()),
            Self::UniformBox { lo, .. } => Some(lo.len()),
            Self::PointMass { x } => Some(x.len()),
            Self::Ring { .. } => Some(2),
            Self::Points { rows } => rows.first().map(Vec::len),
            Self::Csv { .. } => None,
        }
    }
}

/// Draws `n` particles from `spec`, consuming `rng` in particle order.
pub fn sample_with(spec: &DistributionSpec, n: usize, rng: &mut ChaCha8Rng) -> Result<ParticleCloud> {
    if n == 0 {
        return Err(Error::Config("particle count must be at least 1".into()));
    }
    match spec {
        DistributionSpec::Gaussian { mean, cov } => {
            let g = GaussianSampler::new(mean, cov.as_ref())?;
            let mut pts = Vec::with_capacity(n * mean.len());
            for _ in 0..n {
                g.sample_into(rng, &mut pts);
            }
            ParticleCloud::new(pts, mean.len())
        }
        DistributionSpec::GaussianMixture {
            components,
            weights,
        } => {
            if components.is_empty() || components.len() != weights.len() {
                return Err(Error::Config("mixture needs one weight per component".into()));
            }
            if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
                return Err(Error::Config("mixture weights must be nonnegative".into()));
            }
            let total: f64 = weights.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("mixture weights sum to {total}, not 1")));
            }
            let d = components[0].mean.len();
            let samplers = components
                .iter()
                .map(|c| {
                    if c.mean.len() != d {
                        return Err(Error::Config("mixture components differ in dimension".into()));
                    }
                    GaussianSampler::new(&c.mean, c.cov.as_ref())
                })
                .collect::<Result<Vec<_>>>()?;
            let mut pts = Vec::with_capacity(n * d);
            for _ in 0..n {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = samplers.len() - 1;
                for (i, w) in weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        pick = i;
                        break;
                    }
                }
                samplers[pick].sample_into(rng, &mut pts);
            }
            ParticleCloud::new(pts, d)
        }
        DistributionSpec::UniformBox { lo, hi } => {
            if lo.is_empty() || lo.len() != hi.len() {
                return Err(Error::Config("uniform_box bounds must be nonempty and equal length".into()));
            }
            if lo.iter().zip(hi).any(|(l, h)| !(l.is_finite() && h.is_finite() && l <= h)) {
                return Err(Error::Config("uniform_box needs finite lo <= hi".into()));
            }
            let mut pts = Vec::with_capacity(n * lo.len());
            for _ in 0..n {
                for (l, h) in lo.iter().zip(hi) {
                    let u: f64 = rng.random();
                    pts.push(l + (h - l) * u);
                }
            }
            ParticleCloud::new(pts, lo.len())
        }
        DistributionSpec::PointMass { x } => {
            if x.is_empty() {
                return Err(Error::Config("point_mass location must be nonempty".into()));
            }
            ParticleCloud::new(x.repeat(n), x.len()).map_err(|e| Error::Config(e.to_string()))
        }
        DistributionSpec::Ring { radius, noise } => {
            if !(radius.is_finite() && noise.is_finite() && *noise >= 0.0) {
                return Err(Error::Config("ring needs finite radius and noise >= 0".into()));
            }
            let mut pts = Vec::with_capacity(2 * n);
            for _ in 0..n {
                let theta = std::f64::consts::TAU * rng.random::<f64>();
                let g: f64 = rng.sample(StandardNormal);
                let r = radius + noise * g;
                pts.push(r * theta.cos());
                pts.push(r * theta.sin());
            }
            ParticleCloud::new(pts, 2)
        }
        DistributionSpec::Points { rows } => {
            ParticleCloud::from_rows(rows).map_err(|e| Error::Config(e.to_string()))
        }
        DistributionSpec::Csv { path } => ParticleCloud::read_csv(path),
    }
}

pub fn sample_distribution(spec: &DistributionSpec, n: usize, seed: u64) -> Result<ParticleCloud> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_with(spec, n, &mut rng)
}
