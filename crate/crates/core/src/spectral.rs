//! Numerical diagnostics for the decomposition view of the costs: weighted
//! SVDs of discrete density pairs, the nuclear-norm bound, the half-variance
//! factorization of a Gaussian kernel, the identity-function approximation,
//! singular functions on 2D grids and the whitened-residual orthonormality.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::costs::{add_jitter, svd, RegularizationPolicy};
use crate::error::{Error, Result};
use crate::gaussian::{gauss_gram, normal_constant, ConstantMode, SampleBatch};

/// Masses below this are treated as outside the support when rescaling.
pub const MASS_FLOOR: f64 = 1e-12;

/// Singular values at or below this are dropped before dividing by them.
pub const SIGMA_FLOOR: f64 = 1e-8;

/// Two probability mass functions on a shared finite support, with the
/// variance of the Gaussian kernel placed over that support.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDensityPair {
    support: DMatrix<f64>,
    p_mass: Vec<f64>,
    q_mass: Vec<f64>,
    kernel_variance: f64,
}

fn check_mass(m: &[f64], len: usize, name: &str) -> Result<()> {
    if m.len() != len {
        return Err(Error::Shape(format!("{name} has {} entries for {len} support points", m.len())));
    }
    if m.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::InvalidParameter(format!("{name} must be nonnegative")));
    }
    let total: f64 = m.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidParameter(format!("{name} sums to {total}, not 1")));
    }
    Ok(())
}

impl DiscreteDensityPair {
    pub fn new(
        support: DMatrix<f64>,
        p_mass: Vec<f64>,
        q_mass: Vec<f64>,
        kernel_variance: f64,
    ) -> Result<Self> {
        if support.nrows() == 0 || support.ncols() == 0 {
            return Err(Error::EmptyBatch);
        }
        check_mass(&p_mass, support.nrows(), "p_mass")?;
        check_mass(&q_mass, support.nrows(), "q_mass")?;
        if !(kernel_variance.is_finite() && kernel_variance > 0.0) {
            return Err(Error::InvalidParameter("kernel_variance must be positive".into()));
        }
        Ok(Self { support, p_mass, q_mass, kernel_variance })
    }

    /// Like [`new`](Self::new) but rescales both mass vectors to sum to one.
    pub fn normalized(
        support: DMatrix<f64>,
        p_mass: Vec<f64>,
        q_mass: Vec<f64>,
        kernel_variance: f64,
    ) -> Result<Self> {
        let norm = |m: Vec<f64>| {
            let t: f64 = m.iter().sum();
            m.into_iter().map(|x| x / t).collect::<Vec<_>>()
        };
        Self::new(support, norm(p_mass), norm(q_mass), kernel_variance)
    }

    pub fn support(&self) -> &DMatrix<f64> {
        &self.support
    }

    pub fn p_mass(&self) -> &[f64] {
        &self.p_mass
    }

    pub fn q_mass(&self) -> &[f64] {
        &self.q_mass
    }

    pub fn kernel_variance(&self) -> f64 {
        self.kernel_variance
    }

    /// Hermitian Gaussian kernel over the support.
    pub fn kernel(&self, mode: ConstantMode) -> DMatrix<f64> {
        gauss_gram(&self.support, &self.support, self.kernel_variance, mode)
            .expect("validated on construction")
    }

    /// `K(x, x)` in the given constant mode.
    pub fn kernel_diagonal(&self, mode: ConstantMode) -> f64 {
        match mode {
            ConstantMode::ExpOnly => 1.0,
            ConstantMode::FullPdf => normal_constant(self.kernel_variance, self.support.ncols()),
        }
    }
}

/// Flips each singular pair so that the first clearly nonzero entry of the
/// left vector is positive. The product `U S V^T` is unchanged.
pub(crate) fn normalize_signs(u: &mut DMatrix<f64>, v: &mut DMatrix<f64>) {
    for k in 0..u.ncols() {
        let col = u.column(k);
        let tol = 1e-12 * col.amax();
        let flip = col.iter().find(|x| x.abs() > tol).is_some_and(|x| *x < 0.0);
        if flip {
            u.column_mut(k).neg_mut();
            v.column_mut(k).neg_mut();
        }
    }
}

/// SVD factors with singular values in nonincreasing order. `left` and
/// `right` hold singular vectors as columns.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSvd {
    pub singular_values: DVector<f64>,
    pub left: DMatrix<f64>,
    pub right: DMatrix<f64>,
}

/// Sign-normalized thin SVD of an arbitrary matrix.
pub fn signed_svd(m: DMatrix<f64>) -> Result<WeightedSvd> {
    let dec = svd(m)?;
    let mut left = dec.u.expect("u requested");
    let mut right = dec.v_t.expect("v_t requested").transpose();
    normalize_signs(&mut left, &mut right);
    Ok(WeightedSvd { singular_values: dec.singular_values, left, right })
}

/// SVD of `diag(sqrt p) K diag(sqrt q)` for an explicit kernel matrix.
pub fn weighted_svd_with_kernel(kernel: &DMatrix<f64>, p: &[f64], q: &[f64]) -> Result<WeightedSvd> {
    let (m, n) = kernel.shape();
    if p.len() != m || q.len() != n {
        return Err(Error::Shape(format!(
            "kernel is {m}x{n} but masses have {} and {} entries",
            p.len(),
            q.len()
        )));
    }
    let weighted = DMatrix::from_fn(m, n, |i, j| p[i].sqrt() * kernel[(i, j)] * q[j].sqrt());
    signed_svd(weighted)
}

pub fn weighted_svd(pair: &DiscreteDensityPair, mode: ConstantMode) -> Result<WeightedSvd> {
    weighted_svd_with_kernel(&pair.kernel(mode), &pair.p_mass, &pair.q_mass)
}

impl WeightedSvd {
    /// Variational rescaling: rows of the left/right vectors divided by
    /// `sqrt p` / `sqrt q`. Rows with mass at or below [`MASS_FLOOR`] are
    /// set to zero. Only components with singular value above
    /// [`SIGMA_FLOOR`] are kept, since the others are not determined by the
    /// decomposition.
    pub fn rescaled(&self, p: &[f64], q: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
        let r = self.singular_values.iter().filter(|s| **s > SIGMA_FLOOR).count();
        let scale = |basis: &DMatrix<f64>, mass: &[f64]| {
            DMatrix::from_fn(basis.nrows(), r, |i, k| {
                if mass[i] > MASS_FLOOR {
                    basis[(i, k)] / mass[i].sqrt()
                } else {
                    0.0
                }
            })
        };
        (scale(&self.left, p), scale(&self.right, q))
    }

    pub fn nuclear_norm(&self) -> f64 {
        self.singular_values.sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NuclearBound {
    pub nuclear_norm: f64,
    /// `K(x, x)` of the kernel in the active constant mode.
    pub bound: f64,
    /// `p == q` elementwise, the case where the bound is attained.
    pub tight: bool,
    /// `nuclear_norm <= bound + 1e-9`.
    pub within_bound: bool,
}

/// Mass-weighted nuclear norm of the kernel against its diagonal value.
pub fn nuclear_bound_check(pair: &DiscreteDensityPair, mode: ConstantMode) -> Result<NuclearBound> {
    let dec = weighted_svd(pair, mode)?;
    let nuclear_norm = dec.nuclear_norm();
    let bound = pair.kernel_diagonal(mode);
    Ok(NuclearBound {
        nuclear_norm,
        bound,
        tight: pair.p_mass == pair.q_mass,
        within_bound: nuclear_norm <= bound + 1e-9,
    })
}

/// Equally spaced 1D quadrature nodes `lo, lo + step, ..., <= hi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureGrid {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl QuadratureGrid {
    pub fn new(lo: f64, hi: f64, step: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && hi > lo && step > 0.0 && step.is_finite()) {
            return Err(Error::InvalidParameter(format!("bad quadrature grid [{lo}, {hi}] / {step}")));
        }
        Ok(Self { lo, hi, step })
    }

    pub fn points(&self) -> Vec<f64> {
        let n = ((self.hi - self.lo) / self.step + 1e-9).floor() as usize;
        (0..=n).map(|i| self.lo + i as f64 * self.step).collect()
    }

    /// Same span, half the step.
    pub fn refined(&self) -> Self {
        Self { step: self.step / 2.0, ..*self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FactorizationCheck {
    pub max_abs_err: f64,
}

/// Largest deviation between `h K K^T` (kernel of variance `v` from the
/// evaluation points to the quadrature nodes) and the kernel of variance
/// `2 v` between the evaluation points. No accuracy precondition is
/// enforced; use this for convergence studies on deliberately coarse grids.
pub fn quadrature_factorization_error(grid: &QuadratureGrid, eval_points: &[f64], v: f64) -> Result<f64> {
    if eval_points.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let nodes = grid.points();
    let x = DMatrix::from_column_slice(eval_points.len(), 1, eval_points);
    let g = DMatrix::from_column_slice(nodes.len(), 1, &nodes);
    let half = gauss_gram(&x, &g, v, ConstantMode::FullPdf)?;
    let approx = &half * half.transpose() * grid.step;
    let exact = gauss_gram(&x, &x, 2.0 * v, ConstantMode::FullPdf)?;
    Ok((approx - exact).amax())
}

/// Checks that a Gaussian of variance `2 v` factors through two Gaussians of
/// variance `v` on the given quadrature grid. The grid must extend at least
/// `8 sqrt v` past every evaluation point and use a step of at most
/// `sqrt v / 10`.
pub fn half_variance_factorization(
    grid: &QuadratureGrid,
    eval_points: &[f64],
    v: f64,
) -> Result<FactorizationCheck> {
    if !(v.is_finite() && v > 0.0) {
        return Err(Error::InvalidParameter(format!("variance must be positive, got {v}")));
    }
    let sd = v.sqrt();
    if grid.step > sd / 10.0 {
        return Err(Error::GridTooCoarse(format!("step {} exceeds sqrt(v)/10 = {}", grid.step, sd / 10.0)));
    }
    let lo = eval_points.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = eval_points.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if grid.lo > lo - 8.0 * sd || grid.hi < hi + 8.0 * sd {
        return Err(Error::GridTooCoarse(format!(
            "grid [{}, {}] does not cover [{lo}, {hi}] by 8 sqrt(v)",
            grid.lo, grid.hi
        )));
    }
    Ok(FactorizationCheck { max_abs_err: quadrature_factorization_error(grid, eval_points, v)? })
}

/// The identity-function approximation `sum_k s_k f_k(x') g_k(x)` sampled on
/// a model-side grid (rows, `x'`) and a data-side grid (columns, `x`).
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityMap {
    pub model_grid: Vec<f64>,
    pub data_grid: Vec<f64>,
    /// Rows follow `model_grid`, columns follow `data_grid`.
    pub matrix: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    /// Rotated model residuals `V^T f` on the model grid, one column per
    /// singular value.
    pub model_basis: DMatrix<f64>,
    /// Rotated data residuals `U^T g` on the data grid.
    pub data_basis: DMatrix<f64>,
    pub diagonal_mass_ratio: f64,
}

impl IdentityMap {
    /// The same matrix rebuilt from the rotated bases and singular values.
    /// Equal to `matrix` up to rounding; its tiny entries are not reliable.
    pub fn from_factors(&self) -> DMatrix<f64> {
        let mut fs = self.model_basis.clone();
        for (k, s) in self.singular_values.iter().enumerate() {
            fs.column_mut(k).scale_mut(*s);
        }
        fs * self.data_basis.transpose()
    }

    /// Fraction of rows (with at least `1e-3` of the heaviest row's mass)
    /// whose largest entry lies within `radius` of the diagonal. Index
    /// offsets are converted to distances with the data grid's step.
    pub fn row_argmax_within(&self, radius: f64) -> f64 {
        let step = match self.data_grid.as_slice() {
            [a, b, ..] => b - a,
            _ => 1.0,
        };
        let abs = self.matrix.abs();
        let masses: Vec<f64> = abs.row_iter().map(|r| r.sum()).collect();
        let heaviest = masses.iter().cloned().fold(0.0, f64::max);
        let mut hits = 0usize;
        let mut rows = 0usize;
        for (i, row) in abs.row_iter().enumerate() {
            if masses[i] < 1e-3 * heaviest {
                continue;
            }
            rows += 1;
            if row.transpose().argmax().0.abs_diff(i) as f64 * step <= radius + 1e-12 {
                hits += 1;
            }
        }
        if rows == 0 {
            0.0
        } else {
            hits as f64 / rows as f64
        }
    }
}

/// Sum of `|entries|` within one index of the diagonal over the total sum.
pub fn diagonal_mass_ratio(m: &DMatrix<f64>) -> f64 {
    let mut band = 0.0;
    let mut total = 0.0;
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            let a = m[(i, j)].abs();
            total += a;
            if i.abs_diff(j) <= 1 {
                band += a;
            }
        }
    }
    if total > 0.0 {
        band / total
    } else {
        0.0
    }
}

/// `points` equally spaced values spanning the batch's range widened by
/// `3 sqrt(bandwidth)` on both sides. 1D batches only.
pub fn spanning_grid(batch: &SampleBatch, points: usize) -> Result<Vec<f64>> {
    if batch.dim() != 1 {
        return Err(Error::DimensionMismatch { expected: 1, found: batch.dim() });
    }
    if points < 2 {
        return Err(Error::InvalidParameter("a grid needs at least two points".into()));
    }
    let s = batch.samples();
    let pad = 3.0 * batch.bandwidth().sqrt();
    let lo = s.min() - pad;
    let hi = s.max() + pad;
    let step = (hi - lo) / (points - 1) as f64;
    Ok((0..points).map(|i| lo + i as f64 * step).collect())
}

fn check_grid(g: &[f64], name: &str) -> Result<()> {
    if g.is_empty() {
        return Err(Error::InvalidParameter(format!("{name} is empty")));
    }
    if g.windows(2).any(|w| !(w[1] >= w[0])) {
        return Err(Error::InvalidParameter(format!("{name} must be sorted")));
    }
    Ok(())
}

/// Evaluates the identity-function approximation of the cross Gram between
/// two 1D batches.
///
/// Each side is sampled on its own grid: model residuals on `model_grid`,
/// data residuals on `data_grid`. With grids that span each batch's own
/// range (see [`spanning_grid`]), a model that reproduces the data puts its
/// mass on the diagonal and a shifted model moves it off.
///
/// The singular factors are returned alongside, but `matrix` is assembled
/// as `F C^T G^T`, which equals `sum_k s_k f_k g_k^T` when every singular
/// triplet is kept and has no cancellation in its small entries.
pub fn identity_approximation(
    data: &SampleBatch,
    model: &SampleBatch,
    data_grid: &[f64],
    model_grid: &[f64],
) -> Result<IdentityMap> {
    if data.dim() != 1 || model.dim() != 1 {
        return Err(Error::DimensionMismatch { expected: 1, found: data.dim().max(model.dim()) });
    }
    check_grid(data_grid, "data grid")?;
    check_grid(model_grid, "model grid")?;
    let cross = gauss_gram(
        data.samples(),
        model.samples(),
        data.bandwidth() + model.bandwidth(),
        ConstantMode::ExpOnly,
    )?;
    let dec = signed_svd(cross.clone())?;

    let xg = DMatrix::from_column_slice(data_grid.len(), 1, data_grid);
    let yg = DMatrix::from_column_slice(model_grid.len(), 1, model_grid);
    let g = gauss_gram(&xg, data.samples(), data.bandwidth(), ConstantMode::ExpOnly)?;
    let f = gauss_gram(&yg, model.samples(), model.bandwidth(), ConstantMode::ExpOnly)?;
    let model_basis = &f * &dec.right;
    let data_basis = &g * &dec.left;
    let matrix = f * cross.transpose() * g.transpose();
    let diagonal_mass_ratio = diagonal_mass_ratio(&matrix);
    Ok(IdentityMap {
        model_grid: model_grid.to_vec(),
        data_grid: data_grid.to_vec(),
        matrix,
        singular_values: dec.singular_values,
        model_basis,
        data_basis,
        diagonal_mass_ratio,
    })
}

/// Rectangular grid over the plane; values are stored row-major by `y`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid2d {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub nx: usize,
    pub ny: usize,
}

impl Grid2d {
    pub fn xs(&self) -> Vec<f64> {
        linspace(self.x_min, self.x_max, self.nx)
    }

    pub fn ys(&self) -> Vec<f64> {
        linspace(self.y_min, self.y_max, self.ny)
    }

    /// `(nx * ny) x 2` matrix of grid points, `x` varying fastest.
    pub fn points(&self) -> DMatrix<f64> {
        let xs = self.xs();
        let ys = self.ys();
        DMatrix::from_fn(self.nx * self.ny, 2, |i, c| if c == 0 { xs[i % self.nx] } else { ys[i / self.nx] })
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let step = (hi - lo) / (n - 1) as f64;
    (0..n).map(|i| lo + i as f64 * step).collect()
}

/// Singular functions of the cross Gram extended onto a 2D grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SingularFunctions {
    pub grid: Grid2d,
    pub singular_values: Vec<f64>,
    /// Data-side functions, one `ny x nx` matrix each.
    pub left: Vec<DMatrix<f64>>,
    /// Model-side functions.
    pub right: Vec<DMatrix<f64>>,
}

/// Nystrom extension of the top singular vectors of the cross Gram.
///
/// With `C = U S V^T` (rows of `C` index data samples), the data-side
/// function is `u_k(x) = (1/s_k) sum_j k(x, Y_j) V_jk` and the model-side
/// function is `v_k(y) = (1/s_k) sum_n k(X_n, y) U_nk`, with `k` the cross
/// kernel. At the sample points these reproduce `U` and `V` exactly.
pub fn singular_function_grid(
    data: &SampleBatch,
    model: &SampleBatch,
    grid: &Grid2d,
    top_k: usize,
) -> Result<SingularFunctions> {
    if data.dim() != 2 || model.dim() != 2 {
        return Err(Error::DimensionMismatch { expected: 2, found: data.dim().max(model.dim()) });
    }
    if grid.nx == 0 || grid.ny == 0 {
        return Err(Error::InvalidParameter("grid needs at least one point per axis".into()));
    }
    let v_sum = data.bandwidth() + model.bandwidth();
    let cross = gauss_gram(data.samples(), model.samples(), v_sum, ConstantMode::ExpOnly)?;
    let dec = signed_svd(cross)?;
    let available = dec.singular_values.iter().filter(|s| **s > SIGMA_FLOOR).count();
    if top_k > available {
        return Err(Error::RankExceeded { requested: top_k, available });
    }
    let pts = grid.points();
    let to_model = gauss_gram(&pts, model.samples(), v_sum, ConstantMode::ExpOnly)?;
    let to_data = gauss_gram(&pts, data.samples(), v_sum, ConstantMode::ExpOnly)?;
    let mut left = Vec::with_capacity(top_k);
    let mut right = Vec::with_capacity(top_k);
    for k in 0..top_k {
        let s = dec.singular_values[k];
        let l = &to_model * dec.right.column(k) / s;
        let r = &to_data * dec.left.column(k) / s;
        left.push(DMatrix::from_row_slice(grid.ny, grid.nx, l.as_slice()));
        right.push(DMatrix::from_row_slice(grid.ny, grid.nx, r.as_slice()));
    }
    Ok(SingularFunctions {
        grid: *grid,
        singular_values: dec.singular_values.iter().take(top_k).cloned().collect(),
        left,
        right,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WhitenedCheck {
    pub max_dev: f64,
}

/// `R^{-1/2}` of a symmetric positive definite matrix.
fn inv_sqrt(m: &DMatrix<f64>, name: &'static str) -> Result<DMatrix<f64>> {
    let eig = nalgebra::SymmetricEigen::try_new(m.clone(), f64::EPSILON, 10_000)
        .ok_or(Error::EigenNoConvergence)?;
    if eig.eigenvalues.iter().any(|l| *l <= 0.0) {
        return Err(Error::Singular(name));
    }
    let d = eig.eigenvalues.map(|l| 1.0 / l.sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose())
}

/// Whitens both residual families with the jittered auto Grams, takes the
/// SVD of `R_F^{-1/2} C^T R_G^{-1/2}` and measures how far the whitened
/// singular bases are from orthonormal.
pub fn whitened_orthonormality_check(
    data: &SampleBatch,
    model: &SampleBatch,
    reg: &RegularizationPolicy,
) -> Result<WhitenedCheck> {
    let b = crate::gaussian::build_gram_bundle(data, model, ConstantMode::ExpOnly)?;
    let mut rf = b.auto_cols;
    add_jitter(&mut rf, reg.jitter_rel);
    let mut rg = b.auto_rows;
    add_jitter(&mut rg, reg.jitter_rel);
    let wf = inv_sqrt(&rf, "R_F")?;
    let wg = inv_sqrt(&rg, "R_G")?;
    let a = &wf * b.cross.transpose() * &wg;
    let dec = svd(a)?;
    let u = dec.u.expect("u requested");
    let v = dec.v_t.expect("v_t requested").transpose();
    let gf = u.transpose() * &wf * &rf * &wf * &u;
    let gg = v.transpose() * &wg * &rg * &wg * &v;
    let dev = |g: DMatrix<f64>| (g.clone() - DMatrix::identity(g.nrows(), g.ncols())).amax();
    Ok(WhitenedCheck { max_dev: dev(gf).max(dev(gg)) })
}
