//! Finite-dimensional feature maps with analytic derivatives and declared
//! smoothness constants.
//!
//! Three families are shipped:
//!
//! * `affine`: `phi(z) = A z + c`. Constant Jacobian, zero Hessians.
//! * `bounded_sine`: `phi(z) = (z, alpha * sin(W z))`. The identity rows keep
//!   `sigma_min(J) >= 1` everywhere; `d_phi = d + m > d`.
//! * `sine_residual`: `phi(z) = z + alpha * sin(W z)` with square `W` and
//!   `alpha * sigma_max(W) < 1`, so `d_phi = d` and `J` stays invertible.
//!
//! Constants are declared analytically (or overridden from config) and are
//! cross-checked by [`certify_constants`], which can refute them but never
//! prove them.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Global bounds required by descent analysis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothnessConstants {
    /// Lower bound on `sigma_min(J(z))^2`.
    #[serde(rename = "b")]
    pub min_sv_sq: f64,
    /// Upper bound on `sigma_max(J(z))^2`.
    #[serde(rename = "B")]
    pub max_sv_sq: f64,
    /// Upper bound on `|lambda(hess phi_i(z))|` over all coordinates.
    #[serde(rename = "C")]
    pub hessian_bound: f64,
    /// Lipschitz constant of `phi`.
    #[serde(rename = "L_feat")]
    pub lip_feat: f64,
    /// Lipschitz constant of every entry of `J`.
    #[serde(rename = "L_Jac")]
    pub lip_jac: f64,
}

impl SmoothnessConstants {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.min_sv_sq,
            self.max_sv_sq,
            self.hessian_bound,
            self.lip_feat,
            self.lip_jac,
        ];
        if all.iter().any(|x| !x.is_finite()) {
            return Err(Error::Config("smoothness constants must be finite".into()));
        }
        if self.min_sv_sq <= 0.0 {
            return Err(Error::Config(format!("b must be positive, got {}", self.min_sv_sq)));
        }
        if self.min_sv_sq > self.max_sv_sq {
            return Err(Error::Config(format!(
                "b = {} exceeds B = {}",
                self.min_sv_sq, self.max_sv_sq
            )));
        }
        if self.hessian_bound < 0.0 || self.lip_feat < 0.0 || self.lip_jac < 0.0 {
            return Err(Error::Config("C, L_feat and L_Jac must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Family {
    Affine { a: DMatrix<f64>, c: DVector<f64> },
    BoundedSine { alpha: f64, w: DMatrix<f64> },
    SineResidual { alpha: f64, w: DMatrix<f64> },
}

/// A feature map `phi: R^d -> R^{d_phi}` together with its declared constants.
///
/// Immutable after construction; all methods take `&self`.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    family: Family,
    dim_in: usize,
    dim_out: usize,
    constants: SmoothnessConstants,
    spec: MapSpec,
}

fn singular_extremes(m: &DMatrix<f64>) -> (f64, f64) {
    let sv = m.clone().singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    (min, max)
}

fn max_row_norm_sq(w: &DMatrix<f64>) -> f64 {
    w.row_iter().map(|r| r.norm_squared()).fold(0.0, f64::max)
}

// max_{i,j} |W_ij| * ||w_i||
fn max_entry_times_row_norm(w: &DMatrix<f64>) -> f64 {
    w.row_iter()
        .map(|r| r.amax() * r.norm())
        .fold(0.0, f64::max)
}

fn row_dot(w: &DMatrix<f64>, k: usize, z: &[f64]) -> f64 {
    let mut s = 0.0;
    for (j, zj) in z.iter().enumerate() {
        s += w[(k, j)] * zj;
    }
    s
}

impl FeatureMap {
    /// `phi(z) = A z + c`; `A` must have full column rank.
    pub fn affine(a: DMatrix<f64>, c: DVector<f64>) -> Result<Self> {
        if a.nrows() == 0 || a.ncols() == 0 {
            return Err(Error::Config("affine map needs a nonempty matrix".into()));
        }
        check_dim(a.nrows(), c.len())?;
        if a.nrows() < a.ncols() {
            return Err(Error::Config(format!(
                "affine map with d_phi = {} < d = {} cannot have sigma_min > 0",
                a.nrows(),
                a.ncols()
            )));
        }
        let (smin, smax) = singular_extremes(&a);
        if !(smin > 0.0) {
            return Err(Error::Config("affine matrix is rank deficient".into()));
        }
        let constants = SmoothnessConstants {
            min_sv_sq: smin * smin,
            max_sv_sq: smax * smax,
            hessian_bound: 0.0,
            lip_feat: smax,
            lip_jac: 0.0,
        };
        let spec = MapSpec::Affine {
            matrix: Some(rows_of(&a)),
            offset: Some(c.iter().cloned().collect()),
            dim: None,
            seed: None,
            scale: None,
            constants: None,
        };
        Ok(Self {
            dim_in: a.ncols(),
            dim_out: a.nrows(),
            family: Family::Affine { a, c },
            constants,
            spec,
        })
    }

    pub fn identity(dim: usize) -> Result<Self> {
        Self::affine(DMatrix::identity(dim, dim), DVector::zeros(dim))
    }

    /// `phi(z) = (z, alpha * sin(W z))` with `W` of shape `m x d`.
    pub fn bounded_sine(alpha: f64, w: DMatrix<f64>) -> Result<Self> {
        if !(alpha.is_finite() && alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be finite and >= 0, got {alpha}")));
        }
        if w.nrows() == 0 || w.ncols() == 0 {
            return Err(Error::Config("bounded_sine needs a nonempty W".into()));
        }
        let (_, smax) = singular_extremes(&w);
        let big_b = 1.0 + alpha * alpha * smax * smax;
        let constants = SmoothnessConstants {
            min_sv_sq: 1.0,
            max_sv_sq: big_b,
            hessian_bound: alpha * max_row_norm_sq(&w),
            lip_feat: big_b.sqrt(),
            lip_jac: alpha * max_entry_times_row_norm(&w),
        };
        let spec = MapSpec::BoundedSine {
            alpha,
            w: Some(rows_of(&w)),
            dim: None,
            features: None,
            seed: None,
            w_scale: None,
            constants: None,
        };
        Ok(Self {
            dim_in: w.ncols(),
            dim_out: w.ncols() + w.nrows(),
            family: Family::BoundedSine { alpha, w },
            constants,
            spec,
        })
    }

    /// `phi(z) = z + alpha * sin(W z)` with square `W`, `alpha * sigma_max(W) < 1`.
    pub fn sine_residual(alpha: f64, w: DMatrix<f64>) -> Result<Self> {
        if !(alpha.is_finite() && alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be finite and >= 0, got {alpha}")));
        }
        if w.nrows() == 0 || w.nrows() != w.ncols() {
            return Err(Error::Config("sine_residual needs a nonempty square W".into()));
        }
        let (_, smax) = singular_extremes(&w);
        let s = alpha * smax;
        if s >= 1.0 {
            return Err(Error::Config(format!(
                "sine_residual requires alpha * sigma_max(W) < 1, got {s}"
            )));
        }
        let constants = SmoothnessConstants {
            min_sv_sq: (1.0 - s) * (1.0 - s),
            max_sv_sq: (1.0 + s) * (1.0 + s),
            hessian_bound: alpha * max_row_norm_sq(&w),
            lip_feat: 1.0 + s,
            lip_jac: alpha * max_entry_times_row_norm(&w),
        };
        let spec = MapSpec::SineResidual {
            alpha,
            w: Some(rows_of(&w)),
            dim: None,
            seed: None,
            w_scale: None,
            constants: None,
        };
        Ok(Self {
            dim_in: w.ncols(),
            dim_out: w.ncols(),
            family: Family::SineResidual { alpha, w },
            constants,
            spec,
        })
    }

    /// Replace the analytic constants with declared ones (validated, not certified).
    pub fn with_constants(mut self, constants: SmoothnessConstants) -> Result<Self> {
        constants.validate()?;
        self.constants = constants;
        self.spec.set_constants(Some(constants));
        Ok(self)
    }

    pub fn dim_in(&self) -> usize {
        self.dim_in
    }

    pub fn dim_out(&self) -> usize {
        self.dim_out
    }

    pub fn constants(&self) -> &SmoothnessConstants {
        &self.constants
    }

    /// The `MapSpec` this map was built from, with matrices inlined.
    pub fn spec(&self) -> &MapSpec {
        &self.spec
    }

    pub fn kind(&self) -> &'static str {
        match self.family {
            Family::Affine { .. } => "affine",
            Family::BoundedSine { .. } => "bounded_sine",
            Family::SineResidual { .. } => "sine_residual",
        }
    }

    /// Writes `phi(z)` into `out` without checking dimensions.
    pub(crate) fn eval_into(&self, z: &[f64], out: &mut [f64]) {
        match &self.family {
            Family::Affine { a, c } => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = c[i] + row_dot(a, i, z);
                }
            }
            Family::BoundedSine { alpha, w } => {
                let d = z.len();
                out[..d].copy_from_slice(z);
                for k in 0..w.nrows() {
                    out[d + k] = alpha * row_dot(w, k, z).sin();
                }
            }
            Family::SineResidual { alpha, w } => {
                for (k, o) in out.iter_mut().enumerate() {
                    *o = z[k] + alpha * row_dot(w, k, z).sin();
                }
            }
        }
    }

    /// Writes `J(z)^T psi`, the gradient of `psi . phi` at `z`, into `out`.
    pub(crate) fn grad_into(&self, z: &[f64], psi: &[f64], out: &mut [f64]) {
        match &self.family {
            Family::Affine { a, .. } => {
                for (j, o) in out.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for (i, p) in psi.iter().enumerate() {
                        s += a[(i, j)] * p;
                    }
                    *o = s;
                }
            }
            Family::BoundedSine { alpha, w } => {
                let d = z.len();
                out.copy_from_slice(&psi[..d]);
                for k in 0..w.nrows() {
                    let coef = alpha * row_dot(w, k, z).cos() * psi[d + k];
                    for (j, o) in out.iter_mut().enumerate() {
                        *o += coef * w[(k, j)];
                    }
                }
            }
            Family::SineResidual { alpha, w } => {
                out.copy_from_slice(psi);
                for k in 0..w.nrows() {
                    let coef = alpha * row_dot(w, k, z).cos() * psi[k];
                    for (j, o) in out.iter_mut().enumerate() {
                        *o += coef * w[(k, j)];
                    }
                }
            }
        }
    }

    pub fn eval(&self, z: &[f64]) -> Result<DVector<f64>> {
        self.check_point(z)?;
        let mut out = DVector::zeros(self.dim_out);
        self.eval_into(z, out.as_mut_slice());
        Ok(out)
    }

    /// `J(z)`, shape `d_phi x d`.
    pub fn jacobian(&self, z: &[f64]) -> Result<DMatrix<f64>> {
        self.check_point(z)?;
        let d = self.dim_in;
        Ok(match &self.family {
            Family::Affine { a, .. } => a.clone(),
            Family::BoundedSine { alpha, w } => {
                let mut j = DMatrix::zeros(self.dim_out, d);
                for i in 0..d {
                    j[(i, i)] = 1.0;
                }
                for k in 0..w.nrows() {
                    let c = alpha * row_dot(w, k, z).cos();
                    for col in 0..d {
                        j[(d + k, col)] = c * w[(k, col)];
                    }
                }
                j
            }
            Family::SineResidual { alpha, w } => {
                let mut j = DMatrix::identity(d, d);
                for k in 0..d {
                    let c = alpha * row_dot(w, k, z).cos();
                    for col in 0..d {
                        j[(k, col)] += c * w[(k, col)];
                    }
                }
                j
            }
        })
    }

    /// Hessian of coordinate `i` (0-based), shape `d x d`.
    pub fn hessian(&self, i: usize, z: &[f64]) -> Result<DMatrix<f64>> {
        self.check_point(z)?;
        if i >= self.dim_out {
            return Err(Error::Input(format!(
                "coordinate {i} out of range for d_phi = {}",
                self.dim_out
            )));
        }
        let d = self.dim_in;
        let outer = |alpha: f64, w: &DMatrix<f64>, k: usize| {
            let s = -alpha * row_dot(w, k, z).sin();
            let mut h = DMatrix::zeros(d, d);
            for r in 0..d {
                for c in r..d {
                    let v = s * w[(k, r)] * w[(k, c)];
                    h[(r, c)] = v;
                    h[(c, r)] = v;
                }
            }
            h
        };
        Ok(match &self.family {
            Family::Affine { .. } => DMatrix::zeros(d, d),
            Family::BoundedSine { alpha, w } => {
                if i < d {
                    DMatrix::zeros(d, d)
                } else {
                    outer(*alpha, w, i - d)
                }
            }
            Family::SineResidual { alpha, w } => outer(*alpha, w, i),
        })
    }

    fn check_point(&self, z: &[f64]) -> Result<()> {
        check_dim(self.dim_in, z.len())?;
        if z.iter().any(|x| !x.is_finite()) {
            return Err(Error::Input("point has non-finite coordinates".into()));
        }
        Ok(())
    }
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().cloned().collect()).collect()
}

fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if nrows == 0 || ncols == 0 {
        return Err(Error::Config(format!("{what} must be a nonempty matrix")));
    }
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Config(format!("{what} has ragged rows")));
    }
    if rows.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::Config(format!("{what} has non-finite entries")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |r, c| rows[r][c]))
}

fn gaussian_matrix(seed: u64, nrows: usize, ncols: usize, scale: f64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // row-major fill so the layout does not depend on nalgebra's storage order
    let mut m = DMatrix::zeros(nrows, ncols);
    for r in 0..nrows {
        for c in 0..ncols {
            let g: f64 = rng.sample(StandardNormal);
            m[(r, c)] = scale * g;
        }
    }
    m
}

/// Serializable description of a feature map, as found in experiment configs
/// and serialized flows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MapSpec {
    /// Explicit `matrix`/`offset`, or `dim` alone for the identity, or `dim`
    /// plus `seed` for `A = I + scale * G / sqrt(dim)` with Gaussian `G`.
    Affine {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        matrix: Option<Vec<Vec<f64>>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        offset: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dim: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        scale: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        constants: Option<SmoothnessConstants>,
    },
    /// Explicit `w`, or `dim`, `features`, `seed` (and `w_scale`, default 1).
    BoundedSine {
        alpha: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        w: Option<Vec<Vec<f64>>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dim: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        features: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        w_scale: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        constants: Option<SmoothnessConstants>,
    },
    /// Explicit square `w`, or `dim`, `seed` (and `w_scale`, default 1).
    SineResidual {
        alpha: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        w: Option<Vec<Vec<f64>>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dim: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        w_scale: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        constants: Option<SmoothnessConstants>,
    },
}

impl MapSpec {
    fn set_constants(&mut self, value: Option<SmoothnessConstants>) {
        match self {
            MapSpec::Affine { constants, .. }
            | MapSpec::BoundedSine { constants, .. }
            | MapSpec::SineResidual { constants, .. } => *constants = value,
        }
    }

    pub fn declared_constants(&self) -> Option<SmoothnessConstants> {
        match self {
            MapSpec::Affine { constants, .. }
            | MapSpec::BoundedSine { constants, .. }
            | MapSpec::SineResidual { constants, .. } => *constants,
        }
    }

    /// Input dimension `d`, when the `MapSpec` determines it without building.
    pub fn input_dim(&self) -> Option<usize> {
        let first_len = |rows: &Option<Vec<Vec<f64>>>| rows.as_ref().and_then(|r| r.first().map(Vec::len));
        match self {
            MapSpec::Affine { matrix, dim, .. } => first_len(matrix).or(*dim),
            MapSpec::BoundedSine { w, dim, .. } | MapSpec::SineResidual { w, dim, .. } => first_len(w).or(*dim),
        }
    }

    pub fn build(&self) -> Result<FeatureMap> {
        let map = match self {
            MapSpec::Affine {
                matrix,
                offset,
                dim,
                seed,
                scale,
                ..
            } => {
                let a = match (matrix, dim, seed) {
                    (Some(rows), _, None) => matrix_from_rows(rows, "affine matrix")?,
                    (None, Some(d), None) => DMatrix::identity(*d, *d),
                    (None, Some(d), Some(s)) => {
                        let g = gaussian_matrix(*s, *d, *d, scale.unwrap_or(0.3) / (*d as f64).sqrt());
                        DMatrix::identity(*d, *d) + g
                    }
                    _ => {
                        return Err(Error::Config(
                            "affine map needs `matrix`, or `dim` (optionally with `seed`)".into(),
                        ))
                    }
                };
                if let Some(d) = dim {
                    check_dim(*d, a.ncols()).map_err(|e| Error::Config(e.to_string()))?;
                }
                let c = match offset {
                    Some(c) => DVector::from_column_slice(c),
                    None => DVector::zeros(a.nrows()),
                };
                if c.len() != a.nrows() {
                    return Err(Error::Config("affine offset length must equal d_phi".into()));
                }
                FeatureMap::affine(a, c)?
            }
            MapSpec::BoundedSine {
                alpha,
                w,
                dim,
                features,
                seed,
                w_scale,
                ..
            } => {
                let w = match (w, dim, features, seed) {
                    (Some(rows), _, _, None) => matrix_from_rows(rows, "W")?,
                    (None, Some(d), Some(m), Some(s)) => {
                        gaussian_matrix(*s, *m, *d, w_scale.unwrap_or(1.0))
                    }
                    _ => {
                        return Err(Error::Config(
                            "bounded_sine needs `w`, or `dim`, `features` and `seed`".into(),
                        ))
                    }
                };
                if let Some(d) = dim {
                    check_dim(*d, w.ncols()).map_err(|e| Error::Config(e.to_string()))?;
                }
                FeatureMap::bounded_sine(*alpha, w)?
            }
            MapSpec::SineResidual {
                alpha,
                w,
                dim,
                seed,
                w_scale,
                ..
            } => {
                let w = match (w, dim, seed) {
                    (Some(rows), _, None) => matrix_from_rows(rows, "W")?,
                    (None, Some(d), Some(s)) => gaussian_matrix(*s, *d, *d, w_scale.unwrap_or(1.0)),
                    _ => {
                        return Err(Error::Config(
                            "sine_residual needs `w`, or `dim` and `seed`".into(),
                        ))
                    }
                };
                if let Some(d) = dim {
                    check_dim(*d, w.ncols()).map_err(|e| Error::Config(e.to_string()))?;
                }
                FeatureMap::sine_residual(*alpha, w)?
            }
        };
        let mut map = match self.declared_constants() {
            Some(c) => map.with_constants(c)?,
            None => map,
        };
        // keep the user's spec (seeded form) rather than the inlined one
        map.spec = self.clone();
        Ok(map)
    }
}

/// Worst-case observations from [`certify_constants`] against declared values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertificationReport {
    pub samples: usize,
    pub declared: SmoothnessConstants,
    pub observed_min_sv_sq: f64,
    pub observed_max_sv_sq: f64,
    pub observed_hessian_eig: f64,
    pub observed_lip_feat: f64,
    pub observed_lip_jac: f64,
    pub min_sv_sq_ok: bool,
    pub max_sv_sq_ok: bool,
    pub hessian_ok: bool,
    pub lip_feat_ok: bool,
    pub lip_jac_ok: bool,
    /// `d_phi <= d`: only then does `sigma_min(J)^2 >= b` bound the quadratic
    /// form `||J^T psi||^2 >= b ||psi||^2` for every `psi`. Informational.
    pub gain_rank_condition: bool,
    pub passed: bool,
}

impl CertificationReport {
    pub fn failures(&self) -> Vec<String> {
        let d = &self.declared;
        let mut out = Vec::new();
        if !self.min_sv_sq_ok {
            out.push(format!("b = {} > observed sigma_min^2 = {}", d.min_sv_sq, self.observed_min_sv_sq));
        }
        if !self.max_sv_sq_ok {
            out.push(format!("B = {} < observed sigma_max^2 = {}", d.max_sv_sq, self.observed_max_sv_sq));
        }
        if !self.hessian_ok {
            out.push(format!("C = {} < observed |lambda| = {}", d.hessian_bound, self.observed_hessian_eig));
        }
        if !self.lip_feat_ok {
            out.push(format!("L_feat = {} < observed {}", d.lip_feat, self.observed_lip_feat));
        }
        if !self.lip_jac_ok {
            out.push(format!("L_Jac = {} < observed {}", d.lip_jac, self.observed_lip_jac));
        }
        out
    }
}

const CERT_REL_TOL: f64 = 1e-9;
const CERT_ABS_TOL: f64 = 1e-12;

fn dominates(declared: f64, observed: f64) -> bool {
    observed <= declared * (1.0 + CERT_REL_TOL) + CERT_ABS_TOL
}

/// Samples points at several scales and compares the worst observed
/// singular values, Hessian eigenvalues and difference quotients against the
/// declared constants.
pub fn certify_constants(map: &FeatureMap, sample_budget: usize, rng_seed: u64) -> CertificationReport {
    let samples = sample_budget.max(1);
    let d = map.dim_in();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let scales = [0.1, 1.0, 3.0, 10.0];

    let mut min_sv_sq = f64::INFINITY;
    let mut max_sv_sq: f64 = 0.0;
    let mut hess: f64 = 0.0;
    let mut lip_feat: f64 = 0.0;
    let mut lip_jac: f64 = 0.0;

    for s in 0..samples {
        let scale = scales[s % scales.len()];
        let z: Vec<f64> = (0..d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
        let step = scales[(s / scales.len()) % scales.len()] * 0.1;
        let y: Vec<f64> = z
            .iter()
            .map(|zi| zi + step * rng.sample::<f64, _>(StandardNormal))
            .collect();

        let jz = map.jacobian(&z).expect("sampled point matches map dimension");
        let (smin, smax) = singular_extremes(&jz);
        // sigma_min over min(d, d_phi) singular values
        min_sv_sq = min_sv_sq.min(smin * smin);
        max_sv_sq = max_sv_sq.max(smax * smax);

        for i in 0..map.dim_out() {
            let h = map.hessian(i, &z).expect("index in range");
            let eig = SymmetricEigen::new(h).eigenvalues;
            hess = hess.max(eig.amax());
        }

        let dist = z.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        if dist > 0.0 {
            let fz = map.eval(&z).expect("dims");
            let fy = map.eval(&y).expect("dims");
            lip_feat = lip_feat.max((fy - fz).norm() / dist);
            let jy = map.jacobian(&y).expect("dims");
            lip_jac = lip_jac.max((jy - &jz).amax() / dist);
        }
    }

    let declared = *map.constants();
    let min_sv_sq_ok = min_sv_sq >= declared.min_sv_sq * (1.0 - CERT_REL_TOL) - CERT_ABS_TOL;
    let max_sv_sq_ok = dominates(declared.max_sv_sq, max_sv_sq);
    let hessian_ok = dominates(declared.hessian_bound, hess);
    let lip_feat_ok = dominates(declared.lip_feat, lip_feat);
    let lip_jac_ok = dominates(declared.lip_jac, lip_jac);
    CertificationReport {
        samples,
        declared,
        observed_min_sv_sq: min_sv_sq,
        observed_max_sv_sq: max_sv_sq,
        observed_hessian_eig: hess,
        observed_lip_feat: lip_feat,
        observed_lip_jac: lip_jac,
        min_sv_sq_ok,
        max_sv_sq_ok,
        hessian_ok,
        lip_feat_ok,
        lip_jac_ok,
        gain_rank_condition: map.dim_out() <= map.dim_in(),
        passed: min_sv_sq_ok && max_sv_sq_ok && hessian_ok && lip_feat_ok && lip_jac_ok,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    const H: f64 = 1e-5;

    fn sine_1d() -> FeatureMap {
        FeatureMap::bounded_sine(0.5, DMatrix::from_element(1, 1, 1.0)).unwrap()
    }

    fn fd_jacobian(map: &FeatureMap, z: &[f64]) -> DMatrix<f64> {
        let d = map.dim_in();
        let mut j = DMatrix::zeros(map.dim_out(), d);
        for col in 0..d {
            let mut zp = z.to_vec();
            let mut zm = z.to_vec();
            zp[col] += H;
            zm[col] -= H;
            let diff = (map.eval(&zp).unwrap() - map.eval(&zm).unwrap()) / (2.0 * H);
            j.set_column(col, &diff);
        }
        j
    }

    fn fd_hessian(map: &FeatureMap, i: usize, z: &[f64]) -> DMatrix<f64> {
        let d = map.dim_in();
        let mut h = DMatrix::zeros(d, d);
        for col in 0..d {
            let mut zp = z.to_vec();
            let mut zm = z.to_vec();
            zp[col] += H;
            zm[col] -= H;
            let row_p = map.jacobian(&zp).unwrap().row(i).transpose();
            let row_m = map.jacobian(&zm).unwrap().row(i).transpose();
            h.set_column(col, &((row_p - row_m) / (2.0 * H)));
        }
        h
    }

    fn shipped_maps() -> Vec<FeatureMap> {
        vec![
            FeatureMap::identity(2).unwrap(),
            MapSpec::Affine { matrix: None, offset: None, dim: Some(3), seed: Some(4), scale: None, constants: None }
                .build()
                .unwrap(),
            sine_1d(),
            MapSpec::BoundedSine { alpha: 0.7, w: None, dim: Some(3), features: Some(3), seed: Some(9), w_scale: None, constants: None }
                .build()
                .unwrap(),
            MapSpec::SineResidual { alpha: 0.3, w: None, dim: Some(2), seed: Some(1), w_scale: Some(0.8), constants: None }
                .build()
                .unwrap(),
        ]
    }

    #[test]
    fn identity_evaluates_to_input() {
        let m = FeatureMap::identity(3).unwrap();
        let z = [0.3, -1.0, 2.5];
        assert_eq!(m.eval(&z).unwrap().as_slice(), &z);
        assert!(m.hessian(1, &z).unwrap().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn bounded_sine_values() {
        let m = FeatureMap::bounded_sine(0.5, DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -0.5, 3.0])).unwrap();
        assert!(m.eval(&[0.0, 0.0]).unwrap().iter().all(|x| *x == 0.0));

        let m = sine_1d();
        let v = m.eval(&[FRAC_PI_2]).unwrap();
        assert_eq!(v[0], FRAC_PI_2);
        assert!((v[1] - 0.5).abs() < 1e-15);

        let j = m.jacobian(&[0.0]).unwrap();
        assert_eq!((j.nrows(), j.ncols()), (2, 1));
        assert_eq!(j[(0, 0)], 1.0);
        assert_eq!(j[(1, 0)], 0.5);

        let h = m.hessian(1, &[FRAC_PI_2]).unwrap();
        assert!((h[(0, 0)] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn affine_jacobian_is_matrix() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 0.0, 1.0, -1.0, 0.5]);
        let m = FeatureMap::affine(a.clone(), DVector::from_vec(vec![1.0, 0.0, -2.0])).unwrap();
        assert_eq!(m.jacobian(&[4.0, -7.0]).unwrap(), a);
        assert_eq!(m.eval(&[1.0, 1.0]).unwrap().as_slice(), &[4.0, 1.0, -2.5]);
    }

    #[test]
    fn input_errors() {
        let m = sine_1d();
        assert!(matches!(m.eval(&[1.0, 2.0]), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(m.hessian(2, &[0.0]), Err(Error::Input(_))));
        assert!(m.eval(&[f64::NAN]).is_err());
        assert!(FeatureMap::affine(DMatrix::zeros(1, 2), DVector::zeros(1)).is_err());
        assert!(FeatureMap::sine_residual(2.0, DMatrix::identity(2, 2)).is_err());
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for map in shipped_maps() {
            for _ in 0..100 {
                let z: Vec<f64> = (0..map.dim_in()).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
                let j = map.jacobian(&z).unwrap();
                let fd = fd_jacobian(&map, &z);
                let scale = 1.0 + j.amax();
                assert!((&j - &fd).amax() <= 1e-6 * scale, "{} jacobian", map.kind());
                for i in 0..map.dim_out() {
                    let h = map.hessian(i, &z).unwrap();
                    assert_eq!(h, h.transpose());
                    let fdh = fd_hessian(&map, i, &z);
                    assert!((&h - &fdh).amax() <= 1e-6 * (1.0 + h.amax()), "{} hessian", map.kind());
                }
                let psi: Vec<f64> = (0..map.dim_out()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                let mut g = vec![0.0; map.dim_in()];
                map.grad_into(&z, &psi, &mut g);
                let expect = j.transpose() * DVector::from_vec(psi);
                for (a, b) in g.iter().zip(expect.iter()) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn certification_of_scaled_identity() {
        let m = FeatureMap::affine(DMatrix::identity(2, 2) * 2.0, DVector::zeros(2)).unwrap();
        let c = m.constants();
        assert!((c.min_sv_sq - 4.0).abs() < 1e-12 && (c.max_sv_sq - 4.0).abs() < 1e-12);
        let r = certify_constants(&m, 200, 1);
        assert!(r.passed);
        assert!((r.observed_min_sv_sq - 4.0).abs() < 1e-12);
        assert!((r.observed_max_sv_sq - 4.0).abs() < 1e-12);
        assert_eq!(r.observed_hessian_eig, 0.0);
    }

    #[test]
    fn certification_of_bounded_sine() {
        let m = sine_1d();
        assert_eq!(m.constants().min_sv_sq, 1.0);
        assert!((m.constants().max_sv_sq - 1.25).abs() < 1e-15);
        let r = certify_constants(&m, 2000, 3);
        assert!(r.passed, "{:?}", r.failures());
        assert!(r.observed_min_sv_sq >= 1.0 - 1e-12);
        assert!(r.observed_max_sv_sq <= 1.25 + 1e-12);
        assert!(!r.gain_rank_condition);
    }

    #[test]
    fn all_shipped_maps_certify() {
        for m in shipped_maps() {
            let r = certify_constants(&m, 1000, 77);
            assert!(r.passed, "{}: {:?}", m.kind(), r.failures());
        }
    }

    #[test]
    fn under_declared_constants_fail() {
        let m = sine_1d();
        let mut c = *m.constants();
        c.max_sv_sq = 1.1;
        let r = certify_constants(&m.clone().with_constants(c).unwrap(), 500, 3);
        assert!(!r.passed && !r.max_sv_sq_ok);

        let mut c = *m.constants();
        c.min_sv_sq = 1.1;
        c.max_sv_sq = 1.25;
        let r = certify_constants(&m.with_constants(c).unwrap(), 500, 3);
        assert!(!r.min_sv_sq_ok);
    }

    #[test]
    fn spec_json_round_trip() {
        let json = r#"{"kind":"bounded_sine","alpha":0.5,"dim":2,"features":3,"seed":11}"#;
        let spec: MapSpec = serde_json::from_str(json).unwrap();
        let m = spec.build().unwrap();
        assert_eq!((m.dim_in(), m.dim_out()), (2, 5));
        let again: MapSpec = serde_json::from_str(&serde_json::to_string(m.spec()).unwrap()).unwrap();
        assert_eq!(&again, m.spec());
        assert!(serde_json::from_str::<MapSpec>(r#"{"kind":"affine","dim":1,"bogus":1}"#).is_err());
    }
}
