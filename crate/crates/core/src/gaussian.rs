//! Closed-form algebra of isotropic Gaussians and Gaussian mixtures, plus
//! the scaled distance and Gram matrices that every cost is built from.
//!
//! Two conventions live side by side here:
//!
//! * [`gauss_inner`], [`mixture_inner`] and [`mixture_norm`] are exact L2
//!   inner products. They use unscaled squared distances and carry the full
//!   multivariate normal constant.
//! * [`scaled_sq_dist`] and [`gauss_gram`] follow the cost recipe: squared
//!   distances are divided by the sample dimension before exponentiation, and
//!   the normal constant is dropped unless [`ConstantMode::FullPdf`] is asked
//!   for.
//!
//! For `d = 1` both conventions coincide.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Density of an isotropic `dim`-dimensional normal with the given variance,
/// evaluated at a point whose squared distance from the mean is `sq_dist`.
pub fn normal_density(sq_dist: f64, variance: f64, dim: usize) -> f64 {
    normal_constant(variance, dim) * (-sq_dist / (2.0 * variance)).exp()
}

/// `(2 pi v)^(-d/2)`.
pub fn normal_constant(variance: f64, dim: usize) -> f64 {
    (2.0 * PI * variance).powf(-(dim as f64) / 2.0)
}

fn check_variance(v: f64, what: &str) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{what} must be positive and finite, got {v}")))
    }
}

/// One isotropic Gaussian bump `N(X - mean; variance)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    mean: Vec<f64>,
    variance: f64,
}

impl GaussianComponent {
    pub fn new(mean: Vec<f64>, variance: f64) -> Result<Self> {
        if mean.is_empty() {
            return Err(Error::InvalidParameter("component mean must have d >= 1".into()));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite("component mean".into()));
        }
        check_variance(variance, "component variance")?;
        Ok(Self { mean, variance })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn pdf(&self, x: &[f64]) -> f64 {
        normal_density(sq_dist(&self.mean, x), self.variance, self.dim())
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Inner product of two Gaussian densities: `N(m1 - m2; v1 + v2)`.
pub fn gauss_inner(a: &GaussianComponent, b: &GaussianComponent) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch { expected: a.dim(), found: b.dim() });
    }
    Ok(normal_density(sq_dist(&a.mean, &b.mean), a.variance + b.variance, a.dim()))
}

/// A finite mixture `sum_k w_k N(X - m_k; v_k)` with normalized weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    components: Vec<GaussianComponent>,
}

impl GaussianMixture {
    /// Builds a mixture, rescaling `weights` to sum to one.
    pub fn new(weights: Vec<f64>, components: Vec<GaussianComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidParameter("mixture needs at least one component".into()));
        }
        if weights.len() != components.len() {
            return Err(Error::Shape(format!(
                "{} weights for {} components",
                weights.len(),
                components.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidParameter("mixture weights must be finite and >= 0".into()));
        }
        let dim = components[0].dim();
        if let Some(c) = components.iter().find(|c| c.dim() != dim) {
            return Err(Error::DimensionMismatch { expected: dim, found: c.dim() });
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidParameter("mixture weights sum to zero".into()));
        }
        let weights = weights.into_iter().map(|w| w / total).collect();
        Ok(Self { weights, components })
    }

    /// Equal-weight mixture.
    pub fn uniform(components: Vec<GaussianComponent>) -> Result<Self> {
        let k = components.len();
        Self::new(vec![1.0; k], components)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn pdf(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(&self.components).map(|(w, c)| w * c.pdf(x)).sum()
    }
}

/// Double sum over component pairs with arbitrary (not necessarily normalized)
/// weights. Callers have already checked dimensions.
pub(crate) fn weighted_inner(
    wp: &[f64],
    p: &[GaussianComponent],
    wq: &[f64],
    q: &[GaussianComponent],
) -> f64 {
    let mut acc = 0.0;
    for (wi, ci) in wp.iter().zip(p) {
        for (wj, cj) in wq.iter().zip(q) {
            acc += wi
                * wj
                * normal_density(sq_dist(&ci.mean, &cj.mean), ci.variance + cj.variance, ci.dim());
        }
    }
    acc
}

/// `<p, q> = sum_i sum_j w_i w'_j N(m_i - m'_j; v_i + v'_j)`.
pub fn mixture_inner(p: &GaussianMixture, q: &GaussianMixture) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch { expected: p.dim(), found: q.dim() });
    }
    Ok(weighted_inner(&p.weights, &p.components, &q.weights, &q.components))
}

/// Squared L2 norm `<p, p>`.
pub fn mixture_norm(p: &GaussianMixture) -> f64 {
    weighted_inner(&p.weights, &p.components, &p.weights, &p.components)
}

/// Whether Gram entries carry the Gaussian normalization constant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstantMode {
    /// Multiply by the `d`-dimensional normal constant of the summed variance.
    FullPdf,
    /// Plain `exp(-M / (2 v))`; every diagonal entry of an auto Gram is 1.
    ExpOnly,
}

/// `N x d` samples, one bump of variance `bandwidth` per row, uniform weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    samples: DMatrix<f64>,
    bandwidth: f64,
}

impl SampleBatch {
    pub fn new(samples: DMatrix<f64>, bandwidth: f64) -> Result<Self> {
        if samples.nrows() == 0 {
            return Err(Error::EmptyBatch);
        }
        if samples.ncols() == 0 {
            return Err(Error::InvalidParameter("samples must have d >= 1".into()));
        }
        if samples.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("sample batch".into()));
        }
        check_variance(bandwidth, "bandwidth")?;
        Ok(Self { samples, bandwidth })
    }

    pub fn from_rows(rows: &[Vec<f64>], bandwidth: f64) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        let d = rows[0].len();
        if let Some(r) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::DimensionMismatch { expected: d, found: r.len() });
        }
        Self::new(DMatrix::from_fn(n, d, |i, j| rows[i][j]), bandwidth)
    }

    /// One-dimensional batch.
    pub fn from_points(points: &[f64], bandwidth: f64) -> Result<Self> {
        Self::new(DMatrix::from_column_slice(points.len(), 1, points), bandwidth)
    }

    pub fn samples(&self) -> &DMatrix<f64> {
        &self.samples
    }

    pub fn into_samples(self) -> DMatrix<f64> {
        self.samples
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.samples.ncols()
    }

    /// Same bandwidth, new samples.
    pub fn with_samples(&self, samples: DMatrix<f64>) -> Result<Self> {
        Self::new(samples, self.bandwidth)
    }

    /// Every sample translated by `offset` (one entry per coordinate).
    pub fn shifted(&self, offset: &[f64]) -> Result<Self> {
        if offset.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), found: offset.len() });
        }
        let mut s = self.samples.clone();
        for mut row in s.row_iter_mut() {
            for (x, o) in row.iter_mut().zip(offset) {
                *x += o;
            }
        }
        self.with_samples(s)
    }
}

/// `||X_n - X'_k||^2 / d` for every pair of rows.
pub fn scaled_sq_dist(x: &DMatrix<f64>, xp: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = x.ncols();
    if xp.ncols() != d {
        return Err(Error::DimensionMismatch { expected: d, found: xp.ncols() });
    }
    if d == 0 {
        return Err(Error::InvalidParameter("samples must have d >= 1".into()));
    }
    let inv_d = 1.0 / d as f64;
    Ok(DMatrix::from_fn(x.nrows(), xp.nrows(), |n, k| {
        let mut acc = 0.0;
        for j in 0..d {
            let diff = x[(n, j)] - xp[(k, j)];
            acc += diff * diff;
        }
        acc * inv_d
    }))
}

/// `exp(-M / (2 v_sum))` elementwise over the scaled distances, optionally
/// times the `d`-dimensional normal constant of variance `v_sum`.
pub fn gauss_gram(
    x: &DMatrix<f64>,
    xp: &DMatrix<f64>,
    v_sum: f64,
    mode: ConstantMode,
) -> Result<DMatrix<f64>> {
    check_variance(v_sum, "v_sum")?;
    let m = scaled_sq_dist(x, xp)?;
    Ok(gram_from_sq_dist(&m, v_sum, x.ncols(), mode))
}

pub(crate) fn gram_from_sq_dist(
    m: &DMatrix<f64>,
    v_sum: f64,
    dim: usize,
    mode: ConstantMode,
) -> DMatrix<f64> {
    let scale = match mode {
        ConstantMode::FullPdf => normal_constant(v_sum, dim),
        ConstantMode::ExpOnly => 1.0,
    };
    let c = -1.0 / (2.0 * v_sum);
    m.map(|e| scale * (c * e).exp())
}

/// Cross and auto Gram matrices between a data batch and a model batch.
#[derive(Debug, Clone, PartialEq)]
pub struct GramBundle {
    /// `N x K` scaled squared distances.
    pub sq_dist: DMatrix<f64>,
    /// `N x K` cross Gram, variance `v_p + v_q`.
    pub cross: DMatrix<f64>,
    /// `N x N` data auto Gram, variance `2 v_p`.
    pub auto_rows: DMatrix<f64>,
    /// `K x K` model auto Gram, variance `2 v_q`.
    pub auto_cols: DMatrix<f64>,
    pub v_sum: f64,
    pub constant_mode: ConstantMode,
}

pub fn build_gram_bundle(
    data: &SampleBatch,
    model: &SampleBatch,
    mode: ConstantMode,
) -> Result<GramBundle> {
    if data.dim() != model.dim() {
        return Err(Error::DimensionMismatch { expected: data.dim(), found: model.dim() });
    }
    let d = data.dim();
    let v_sum = data.bandwidth + model.bandwidth;
    let sq_dist = scaled_sq_dist(&data.samples, &model.samples)?;
    let cross = gram_from_sq_dist(&sq_dist, v_sum, d, mode);
    let auto_rows = gauss_gram(&data.samples, &data.samples, 2.0 * data.bandwidth, mode)?;
    let auto_cols = gauss_gram(&model.samples, &model.samples, 2.0 * model.bandwidth, mode)?;
    Ok(GramBundle { sq_dist, cross, auto_rows, auto_cols, v_sum, constant_mode: mode })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn comp(mean: &[f64], v: f64) -> GaussianComponent {
        GaussianComponent::new(mean.to_vec(), v).unwrap()
    }

    fn random_mixture(rng: &mut ChaCha8Rng, k: usize, d: usize) -> GaussianMixture {
        let comps = (0..k)
            .map(|_| {
                let m: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
                comp(&m, rng.random_range(0.1..0.8))
            })
            .collect();
        let w = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
        GaussianMixture::new(w, comps).unwrap()
    }

    // Trapezoidal rule on [-8, 8] with step 0.01; the integrands vanish at the
    // ends, so this is the plain Riemann sum.
    fn quad_1d(f: impl Fn(f64) -> f64) -> f64 {
        let h = 0.01;
        let n = (16.0 / h) as usize;
        let mut acc = 0.0;
        for i in 0..=n {
            let x = -8.0 + i as f64 * h;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            acc += w * f(x);
        }
        acc * h
    }

    #[test]
    fn gauss_inner_hand_values() {
        let a = comp(&[0.0], 0.5);
        assert!((gauss_inner(&a, &a).unwrap() - 0.398_942_280_401_432_7).abs() < 1e-12);
        let b = comp(&[1.0], 0.5);
        assert!((gauss_inner(&a, &b).unwrap() - 0.241_970_724_519_143_37).abs() < 1e-12);
    }

    #[test]
    fn gauss_inner_dimension_mismatch() {
        let a = comp(&[0.0], 0.5);
        let b = comp(&[0.0, 1.0], 0.5);
        assert!(matches!(gauss_inner(&a, &b), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn gauss_inner_matches_2d_quadrature() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m1 = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let m2 = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let a = comp(&m1, 0.3);
        let b = comp(&m2, 0.7);
        let h = 0.01;
        let n = 1600;
        let mut acc = 0.0;
        for i in 0..=n {
            let x = -8.0 + i as f64 * h;
            let wi = if i == 0 || i == n { 0.5 } else { 1.0 };
            for j in 0..=n {
                let y = -8.0 + j as f64 * h;
                let wj = if j == 0 || j == n { 0.5 } else { 1.0 };
                acc += wi * wj * a.pdf(&[x, y]) * b.pdf(&[x, y]);
            }
        }
        acc *= h * h;
        assert!((acc - gauss_inner(&a, &b).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn mixture_reductions() {
        let c = comp(&[0.3, -0.2], 0.4);
        let single = GaussianMixture::uniform(vec![c.clone()]).unwrap();
        assert_eq!(mixture_norm(&single), gauss_inner(&c, &c).unwrap());

        let one = GaussianMixture::uniform(vec![comp(&[0.0], 0.5)]).unwrap();
        assert!((mixture_norm(&one) - 0.398_942_280_401_432_7).abs() < 1e-12);
        let merged = GaussianMixture::new(
            vec![0.5, 0.5],
            vec![comp(&[0.0], 0.5), comp(&[0.0], 0.5)],
        )
        .unwrap();
        assert!((mixture_norm(&merged) - mixture_norm(&one)).abs() < 1e-15);
    }

    #[test]
    fn mixture_inner_symmetric_and_matches_quadrature() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_mixture(&mut rng, 3, 2);
        let q = random_mixture(&mut rng, 3, 2);
        assert_eq!(mixture_inner(&p, &q).unwrap(), mixture_inner(&q, &p).unwrap());

        let p = random_mixture(&mut rng, 2, 1);
        let q = random_mixture(&mut rng, 2, 1);
        let quad = quad_1d(|x| p.pdf(&[x]) * q.pdf(&[x]));
        assert!((quad - mixture_inner(&p, &q).unwrap()).abs() < 1e-6);
        let quad = quad_1d(|x| p.pdf(&[x]).powi(2));
        assert!((quad - mixture_norm(&p)).abs() < 1e-6);
    }

    #[test]
    fn weights_are_normalized_and_inner_is_bilinear() {
        let comps = vec![comp(&[0.0], 0.2), comp(&[1.0], 0.3)];
        let p = GaussianMixture::new(vec![2.0, 6.0], comps.clone()).unwrap();
        assert!((p.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let q = GaussianMixture::uniform(vec![comp(&[0.5], 0.1)]).unwrap();
        let base = weighted_inner(&[0.25, 0.75], &comps, q.weights(), q.components());
        let scaled = weighted_inner(&[0.75, 2.25], &comps, q.weights(), q.components());
        assert!((scaled - 3.0 * base).abs() < 1e-14);
        assert!((mixture_inner(&p, &q).unwrap() - base).abs() < 1e-15);
    }

    #[test]
    fn mixture_rejects_bad_input() {
        assert!(GaussianMixture::new(vec![], vec![]).is_err());
        assert!(GaussianMixture::new(vec![-1.0], vec![comp(&[0.0], 1.0)]).is_err());
        assert!(GaussianMixture::new(vec![1.0, 1.0], vec![comp(&[0.0], 1.0), comp(&[0.0, 0.0], 1.0)])
            .is_err());
        assert!(GaussianComponent::new(vec![0.0], 0.0).is_err());
        assert!(GaussianComponent::new(vec![], 1.0).is_err());
    }

    #[test]
    fn scaled_sq_dist_cases() {
        let x = DMatrix::from_row_slice(1, 1, &[0.0]);
        let xp = DMatrix::from_row_slice(1, 1, &[2.0]);
        assert_eq!(scaled_sq_dist(&x, &xp).unwrap()[(0, 0)], 4.0);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = DMatrix::from_fn(7, 3, |_, _| rng.random_range(-2.0..2.0));
        let b = DMatrix::from_fn(5, 3, |_, _| rng.random_range(-2.0..2.0));
        let m = scaled_sq_dist(&a, &b).unwrap();
        for n in 0..7 {
            for k in 0..5 {
                let mut s = 0.0;
                for j in 0..3 {
                    s += (a[(n, j)] - b[(k, j)]).powi(2);
                }
                assert!((m[(n, k)] - s / 3.0).abs() < 1e-12);
            }
        }
        let self_d = scaled_sq_dist(&a, &a).unwrap();
        assert!((0..7).all(|i| self_d[(i, i)] == 0.0));
        assert!(scaled_sq_dist(&a, &DMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn gauss_gram_basic_properties() {
        let x = DMatrix::from_row_slice(4, 1, &[0.0, 0.1, 0.5, 2.0]);
        let g = gauss_gram(&x, &x, 0.3, ConstantMode::ExpOnly).unwrap();
        for i in 0..4 {
            assert_eq!(g[(i, i)], 1.0);
        }
        // Row 0 entries fall off as the partner moves away.
        assert!(g[(0, 1)] > g[(0, 2)] && g[(0, 2)] > g[(0, 3)]);
        assert!(gauss_gram(&x, &x, 0.0, ConstantMode::ExpOnly).is_err());
        assert!(gauss_gram(&x, &x, -1.0, ConstantMode::ExpOnly).is_err());
    }

    #[test]
    fn full_pdf_gram_matches_gauss_inner() {
        // 1D: no dimension scaling, so the entry is exactly the inner product
        // of two bumps whose variances sum to v_sum.
        let x = DMatrix::from_row_slice(1, 1, &[0.2]);
        let xp = DMatrix::from_row_slice(1, 1, &[-0.7]);
        let g = gauss_gram(&x, &xp, 0.9, ConstantMode::FullPdf).unwrap();
        let inner = gauss_inner(&comp(&[0.2], 0.4), &comp(&[-0.7], 0.5)).unwrap();
        assert!((g[(0, 0)] - inner).abs() < 1e-12);

        // 2D: dividing the squared distance by d is the same as a bump of
        // variance d * v_sum, up to the ratio of the normal constants.
        let x = DMatrix::from_row_slice(1, 2, &[0.2, 0.4]);
        let xp = DMatrix::from_row_slice(1, 2, &[-0.3, 1.0]);
        let v = 0.6;
        let g = gauss_gram(&x, &xp, v, ConstantMode::FullPdf).unwrap();
        let inner = gauss_inner(&comp(&[0.2, 0.4], v), &comp(&[-0.3, 1.0], v)).unwrap();
        let unfolded = inner * normal_constant(v, 2) / normal_constant(2.0 * v, 2);
        assert!((g[(0, 0)] - unfolded).abs() < 1e-12);
    }

    #[test]
    fn bundle_with_identical_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = DMatrix::from_fn(6, 2, |_, _| rng.random_range(-1.0..1.0));
        let b = SampleBatch::new(s, 0.05).unwrap();
        let g = build_gram_bundle(&b, &b, ConstantMode::ExpOnly).unwrap();
        assert_eq!(g.cross, g.cross.transpose());
        assert_eq!(g.cross, g.auto_rows);
        assert_eq!(g.v_sum, 0.1);
    }

    #[test]
    fn bundle_hand_values() {
        let data = SampleBatch::from_points(&[0.0, 1.0], 0.25).unwrap();
        let model = SampleBatch::from_points(&[0.5, -1.0], 0.25).unwrap();
        let g = build_gram_bundle(&data, &model, ConstantMode::ExpOnly).unwrap();
        // exp(-dist^2 / (2 * 0.5)) = exp(-dist^2)
        let expect = [[(-0.25f64).exp(), (-1.0f64).exp()], [(-0.25f64).exp(), (-4.0f64).exp()]];
        for n in 0..2 {
            for k in 0..2 {
                assert!((g.cross[(n, k)] - expect[n][k]).abs() < 1e-12);
            }
        }
        assert!((g.auto_rows[(0, 1)] - (-1.0f64).exp()).abs() < 1e-12);
        assert!((g.auto_cols[(0, 1)] - (-2.25f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn auto_grams_symmetric_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let n = rng.random_range(2..12);
            let k = rng.random_range(2..12);
            let d = rng.random_range(1..4);
            let data = SampleBatch::new(DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0)), 0.05)
                .unwrap();
            let model =
                SampleBatch::new(DMatrix::from_fn(k, d, |_, _| rng.random_range(-1.0..1.0)), 0.08)
                    .unwrap();
            let g = build_gram_bundle(&data, &model, ConstantMode::ExpOnly).unwrap();
            for m in [&g.auto_rows, &g.auto_cols] {
                assert!((m - m.transpose()).amax() <= 1e-12);
                let trace = m.trace();
                let min = m.clone().symmetric_eigenvalues().min();
                assert!(min >= -1e-10 * trace);
            }
            assert!(g.cross.iter().all(|&c| c > 0.0 && c <= 1.0));
        }
    }
}
