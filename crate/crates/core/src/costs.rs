//! The four kernelized matrix costs and their analytic gradients with respect
//! to the generated centers.
//!
//! Every cost is evaluated on exp-only Gram matrices (the normalization
//! constant cancels or is irrelevant for training) and every cost is
//! reported as a value to be maximized. The log-determinant variant is the
//! one expression that is naturally minimized; its report is negated and
//! flagged.
//!
//! Gradients are assembled in two steps: the derivative of the cost with
//! respect to the entries of the cross Gram `C` (N x K) and model Gram `R_F`
//! (K x K), then the chain rule through
//! `C_nk = exp(-||X_n - Y_k||^2 / (2 d s))`, which gives
//! `dC_nk / dY_k = C_nk (X_n - Y_k) / (d s)`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SVD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{build_gram_bundle, ConstantMode, GramBundle, SampleBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    Scalar,
    VectorMatrix,
    MatrixMatrixTrace,
    MatrixMatrixLogDet,
    SvdNuclear,
}

impl CostKind {
    pub const ALL: [CostKind; 5] = [
        CostKind::Scalar,
        CostKind::VectorMatrix,
        CostKind::MatrixMatrixTrace,
        CostKind::MatrixMatrixLogDet,
        CostKind::SvdNuclear,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CostKind::Scalar => "scalar",
            CostKind::VectorMatrix => "vector_matrix",
            CostKind::MatrixMatrixTrace => "matrix_matrix_trace",
            CostKind::MatrixMatrixLogDet => "matrix_matrix_logdet",
            CostKind::SvdNuclear => "svd_nuclear",
        }
    }
}

impl fmt::Display for CostKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CostKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CostKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown cost kind `{s}`")))
    }
}

/// Which matrix-matrix expression to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixVariant {
    /// `Trace(R_G^-1 C R_F^-1 C^T)`.
    Trace,
    /// `Trace(C R_F^-1 C^T)`: the data Gram dropped.
    TraceNoRg,
    /// `logdet R_FG - logdet R_F - logdet R_G`, reported negated.
    LogDet,
}

/// Conditioning controls for the inverses and the SVD.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularizationPolicy {
    /// Diagonal jitter relative to the mean diagonal entry.
    pub jitter_rel: f64,
    /// Singular-value gaps below this are flagged as degenerate.
    pub svd_gap_floor: f64,
}

impl Default for RegularizationPolicy {
    fn default() -> Self {
        Self { jitter_rel: 1e-6, svd_gap_floor: 1e-8 }
    }
}

impl RegularizationPolicy {
    pub fn new(jitter_rel: f64, svd_gap_floor: f64) -> Result<Self> {
        if !(jitter_rel.is_finite() && jitter_rel > 0.0) {
            return Err(Error::InvalidParameter(format!("jitter_rel must be > 0, got {jitter_rel}")));
        }
        if !(svd_gap_floor.is_finite() && svd_gap_floor > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "svd_gap_floor must be > 0, got {svd_gap_floor}"
            )));
        }
        Ok(Self { jitter_rel, svd_gap_floor })
    }

    /// A policy with no jitter at all. Only useful to demonstrate that an
    /// unregularized rank-deficient Gram is reported as singular.
    pub fn unregularized() -> Self {
        Self { jitter_rel: 0.0, svd_gap_floor: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostDiagnostics {
    /// Absolute diagonal jitter added to the model Gram (0 if none needed).
    pub jitter_used: f64,
    /// Smallest gap between consecutive singular values (SVD cost only).
    pub min_singular_gap: Option<f64>,
    /// `min_singular_gap` fell below the policy floor; the gradient is then
    /// a subgradient.
    pub degenerate_spectrum: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub kind: CostKind,
    /// Value to maximize.
    pub value: f64,
    /// `d value / d centers`, K x d.
    pub grad_centers: DMatrix<f64>,
    pub diagnostics: CostDiagnostics,
    /// `value` is the negation of the expression as usually written
    /// (log-determinant variant).
    pub negated: bool,
}

impl CostReport {
    /// The expression in its usual orientation (undoes the negation of the
    /// log-determinant variant).
    pub fn natural_value(&self) -> f64 {
        if self.negated {
            -self.value
        } else {
            self.value
        }
    }
}

fn check_pair(data: &SampleBatch, model: &SampleBatch) -> Result<()> {
    if data.is_empty() || model.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if data.dim() != model.dim() {
        return Err(Error::DimensionMismatch { expected: data.dim(), found: model.dim() });
    }
    Ok(())
}

fn bundle(data: &SampleBatch, model: &SampleBatch) -> Result<GramBundle> {
    check_pair(data, model)?;
    build_gram_bundle(data, model, ConstantMode::ExpOnly)
}

/// Adds `rel * trace / n` to the diagonal; returns the absolute amount added.
pub(crate) fn add_jitter(m: &mut DMatrix<f64>, rel: f64) -> f64 {
    let n = m.nrows();
    let eps = rel * m.trace() / n as f64;
    for i in 0..n {
        m[(i, i)] += eps;
    }
    eps
}

/// Cholesky with a relative pivot check, so that an exactly rank-deficient
/// matrix is reported instead of producing a huge inverse.
pub(crate) fn spd_factor(m: DMatrix<f64>, name: &'static str) -> Result<Cholesky<f64, Dyn>> {
    let n = m.nrows();
    let scale = m.diagonal().amax().max(f64::MIN_POSITIVE);
    let chol = Cholesky::new(m).ok_or(Error::Singular(name))?;
    let l = chol.l_dirty();
    let min_pivot = (0..n).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
    if !(min_pivot > 4.0 * n as f64 * f64::EPSILON * scale) {
        return Err(Error::Singular(name));
    }
    Ok(chol)
}

fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    let l = chol.l_dirty();
    2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
}

/// Chain rule through the cross Gram: `g` holds `d cost / d C` (N x K).
fn cross_chain(
    data: &DMatrix<f64>,
    model: &DMatrix<f64>,
    cross: &DMatrix<f64>,
    g: &DMatrix<f64>,
    v_sum: f64,
) -> DMatrix<f64> {
    let (n, k, d) = (data.nrows(), model.nrows(), data.ncols());
    let scale = 1.0 / (d as f64 * v_sum);
    let mut out = DMatrix::zeros(k, d);
    for kk in 0..k {
        for nn in 0..n {
            let w = g[(nn, kk)] * cross[(nn, kk)] * scale;
            if w == 0.0 {
                continue;
            }
            for j in 0..d {
                out[(kk, j)] += w * (data[(nn, j)] - model[(kk, j)]);
            }
        }
    }
    out
}

/// Chain rule through the model auto Gram built with variance `v`: `h` holds
/// `d cost / d R_F`, entries treated as independent.
fn auto_chain(model: &DMatrix<f64>, auto: &DMatrix<f64>, h: &DMatrix<f64>, v: f64) -> DMatrix<f64> {
    let (k, d) = (model.nrows(), model.ncols());
    let scale = 1.0 / (d as f64 * v);
    let mut out = DMatrix::zeros(k, d);
    for i in 0..k {
        for jj in 0..k {
            if i == jj {
                continue;
            }
            let w = (h[(i, jj)] + h[(jj, i)]) * auto[(i, jj)] * scale;
            for c in 0..d {
                out[(i, c)] += w * (model[(jj, c)] - model[(i, c)]);
            }
        }
    }
    out
}

fn finish(kind: CostKind, value: f64, grad: DMatrix<f64>, diagnostics: CostDiagnostics, negated: bool) -> Result<CostReport> {
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("{kind} cost value")));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("{kind} cost gradient")));
    }
    Ok(CostReport { kind, value, grad_centers: grad, diagnostics, negated })
}

fn no_diagnostics() -> CostDiagnostics {
    CostDiagnostics { jitter_used: 0.0, min_singular_gap: None, degenerate_spectrum: false }
}

/// Batch estimate of `<p, p>` with exp-only kernels: the mean of the data
/// auto Gram at variance `2 v_p`.
pub fn batch_self_inner(batch: &SampleBatch) -> f64 {
    let g = crate::gaussian::gauss_gram(
        batch.samples(),
        batch.samples(),
        2.0 * batch.bandwidth(),
        ConstantMode::ExpOnly,
    )
    .expect("a valid batch has a positive bandwidth");
    g.sum() / (batch.len() * batch.len()) as f64
}

/// `<p, q>^2 / <q, q>` from the batch estimates of the inner products.
pub fn scalar_cost(data: &SampleBatch, model: &SampleBatch) -> Result<CostReport> {
    let b = bundle(data, model)?;
    let (n, k) = (data.len() as f64, model.len() as f64);
    let pq = b.cross.sum() / (n * k);
    let qq = b.auto_cols.sum() / (k * k);
    let value = pq * pq / qq;

    let g_cross = DMatrix::from_element(b.cross.nrows(), b.cross.ncols(), 2.0 * pq / qq / (n * k));
    let g_auto = DMatrix::from_element(model.len(), model.len(), -(pq * pq) / (qq * qq) / (k * k));
    let grad = cross_chain(data.samples(), model.samples(), &b.cross, &g_cross, b.v_sum)
        + auto_chain(model.samples(), &b.auto_cols, &g_auto, 2.0 * model.bandwidth());
    finish(CostKind::Scalar, value, grad, no_diagnostics(), false)
}

/// `P^T R^-1 P` with `P` the column means of the cross Gram and `R` the
/// jittered model Gram.
pub fn vector_matrix_cost(
    data: &SampleBatch,
    model: &SampleBatch,
    reg: &RegularizationPolicy,
) -> Result<CostReport> {
    let b = bundle(data, model)?;
    let n = data.len() as f64;
    let p: DVector<f64> = b.cross.row_mean().transpose();
    let mut r = b.auto_cols.clone();
    let jitter = add_jitter(&mut r, reg.jitter_rel);
    let chol = spd_factor(r, "R_F")?;
    let alpha = chol.solve(&p);
    let value = p.dot(&alpha);

    let g_cross = DMatrix::from_fn(b.cross.nrows(), b.cross.ncols(), |_, kk| 2.0 * alpha[kk] / n);
    let g_auto = -(&alpha * alpha.transpose());
    let grad = cross_chain(data.samples(), model.samples(), &b.cross, &g_cross, b.v_sum)
        + auto_chain(model.samples(), &b.auto_cols, &g_auto, 2.0 * model.bandwidth());
    let diag = CostDiagnostics { jitter_used: jitter, ..no_diagnostics() };
    finish(CostKind::VectorMatrix, value, grad, diag, false)
}

/// Schur-complement trace (optionally without the data Gram) or the
/// log-determinant form.
pub fn matrix_matrix_cost(
    data: &SampleBatch,
    model: &SampleBatch,
    reg: &RegularizationPolicy,
    variant: MatrixVariant,
) -> Result<CostReport> {
    let b = bundle(data, model)?;
    match variant {
        MatrixVariant::Trace | MatrixVariant::TraceNoRg => {
            let mut rf = b.auto_cols.clone();
            let jitter = add_jitter(&mut rf, reg.jitter_rel);
            let a = spd_factor(rf, "R_F")?.inverse();
            // bc = R_G^-1 C, or C itself when the data Gram is dropped.
            let bc = if variant == MatrixVariant::Trace {
                let mut rg = b.auto_rows.clone();
                add_jitter(&mut rg, reg.jitter_rel);
                spd_factor(rg, "R_G")?.solve(&b.cross)
            } else {
                b.cross.clone()
            };
            let ca = &b.cross * &a;
            let value = bc.component_mul(&ca).sum();
            let bca = &bc * &a;
            let g_cross = 2.0 * &bca;
            let g_auto = -(ca.transpose() * &bca);
            let grad = cross_chain(data.samples(), model.samples(), &b.cross, &g_cross, b.v_sum)
                + auto_chain(model.samples(), &b.auto_cols, &g_auto, 2.0 * model.bandwidth());
            let diag = CostDiagnostics { jitter_used: jitter, ..no_diagnostics() };
            finish(CostKind::MatrixMatrixTrace, value, grad, diag, false)
        }
        MatrixVariant::LogDet => {
            let (n, k) = (data.len(), model.len());
            let mut joint = DMatrix::zeros(k + n, k + n);
            joint.view_mut((0, 0), (k, k)).copy_from(&b.auto_cols);
            joint.view_mut((0, k), (k, n)).copy_from(&b.cross.transpose());
            joint.view_mut((k, 0), (n, k)).copy_from(&b.cross);
            joint.view_mut((k, k), (n, n)).copy_from(&b.auto_rows);
            add_jitter(&mut joint, reg.jitter_rel);
            let mut rf = b.auto_cols.clone();
            let jitter = add_jitter(&mut rf, reg.jitter_rel);
            let mut rg = b.auto_rows.clone();
            add_jitter(&mut rg, reg.jitter_rel);

            let joint = spd_factor(joint, "R_FG")?;
            let rf = spd_factor(rf, "R_F")?;
            let rg = spd_factor(rg, "R_G")?;
            let natural = log_det(&joint) - log_det(&rf) - log_det(&rg);

            let w = joint.inverse();
            let g_cross = -2.0 * w.view((k, 0), (n, k)).into_owned();
            let g_auto = rf.inverse() - w.view((0, 0), (k, k));
            let grad = cross_chain(data.samples(), model.samples(), &b.cross, &g_cross, b.v_sum)
                + auto_chain(model.samples(), &b.auto_cols, &g_auto, 2.0 * model.bandwidth());
            let diag = CostDiagnostics { jitter_used: jitter, ..no_diagnostics() };
            finish(CostKind::MatrixMatrixLogDet, -natural, grad, diag, true)
        }
    }
}

/// Sorted singular values of `m` with both factors, or an error if the
/// iteration does not converge.
fn reconstruction_error(dec: &SVD<f64, Dyn, Dyn>, m: &DMatrix<f64>) -> f64 {
    let mut us = dec.u.clone().expect("u requested");
    for (k, s) in dec.singular_values.iter().enumerate() {
        us.column_mut(k).scale_mut(*s);
    }
    (us * dec.v_t.as_ref().expect("v_t requested") - m).amax()
}

/// Entries smaller than this fraction of the largest one are zeroed before
/// the SVD. They cannot change any double-precision result, and sparse
/// matrices with a huge dynamic range are slow to converge.
const SVD_FLUSH: f64 = 1e-100;

fn faer_svd(w: &DMatrix<f64>) -> Option<SVD<f64, Dyn, Dyn>> {
    let (rows, cols) = w.shape();
    let a = faer::Mat::<f64>::from_fn(rows, cols, |i, j| w[(i, j)]);
    let dec = a.thin_svd().ok()?;
    let (u, v, s) = (dec.U(), dec.V(), dec.S().column_vector());
    let r = rows.min(cols);
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    Some(SVD {
        u: Some(DMatrix::from_fn(rows, r, |i, k| u[(i, order[k])])),
        v_t: Some(DMatrix::from_fn(r, cols, |k, j| v[(j, order[k])])),
        singular_values: DVector::from_fn(r, |k, _| s[order[k]]),
    })
}

/// Thin SVD with singular values in nonincreasing order.
///
/// The input is scaled to unit max-entry and negligible entries are flushed.
/// The factorization is checked against the input, with a Jacobi fallback.
pub(crate) fn svd(m: DMatrix<f64>) -> Result<SVD<f64, Dyn, Dyn>> {
    let (rows, cols) = m.shape();
    let r = rows.min(cols);
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("SVD input".into()));
    }
    let scale = m.amax();
    if r == 0 || scale == 0.0 {
        return Ok(SVD {
            u: Some(DMatrix::identity(rows, r)),
            v_t: Some(DMatrix::identity(r, cols)),
            singular_values: DVector::zeros(r),
        });
    }
    let mut w = m / scale;
    w.apply(|x| {
        if x.abs() < SVD_FLUSH {
            *x = 0.0
        }
    });
    let tol = 1e-10 * (rows.max(cols) as f64);
    let accept = |d: Option<SVD<f64, Dyn, Dyn>>| d.filter(|d| reconstruction_error(d, &w) <= tol);
    let mut dec = accept(faer_svd(&w))
        .or_else(|| accept(jacobi_svd(&w)))
        .ok_or(Error::SvdNoConvergence)?;
    dec.singular_values *= scale;
    Ok(dec)
}

/// One-sided Jacobi SVD, the slow but dependable fallback for inputs on
/// which the bidiagonal iteration stalls.
pub(crate) fn jacobi_svd(m: &DMatrix<f64>) -> Option<SVD<f64, Dyn, Dyn>> {
    if m.nrows() < m.ncols() {
        let t = jacobi_svd(&m.transpose())?;
        return Some(SVD {
            u: t.v_t.map(|v| v.transpose()),
            v_t: t.u.map(|u| u.transpose()),
            singular_values: t.singular_values,
        });
    }
    let (rows, n) = m.shape();
    let mut a = m.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    // Inner products below this are invisible at working precision.
    let abs_floor = (f64::EPSILON * m.norm()).powi(2);
    let mut converged = false;
    for _ in 0..100 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = a.column(p).norm_squared();
                let beta = a.column(q).norm_squared();
                let gamma = a.column(p).dot(&a.column(q));
                if gamma.abs() <= abs_floor || gamma.abs() <= f64::EPSILON * alpha.sqrt() * beta.sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + zeta.hypot(1.0));
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for mat in [&mut a, &mut v] {
                    for i in 0..mat.nrows() {
                        let (x, y) = (mat[(i, p)], mat[(i, q)]);
                        mat[(i, p)] = c * x - s * y;
                        mat[(i, q)] = s * x + c * y;
                    }
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return None;
    }
    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = (0..n).map(|j| a.column(j).norm()).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
    let mut u = DMatrix::zeros(rows, n);
    let mut vs = DMatrix::zeros(n, n);
    let mut sv = DVector::zeros(n);
    let floor = norms.iter().cloned().fold(0.0, f64::max) * f64::EPSILON * rows as f64;
    for (k, &j) in order.iter().enumerate() {
        sv[k] = norms[j];
        vs.set_column(k, &v.column(j));
        if norms[j] > floor {
            u.set_column(k, &(a.column(j) / norms[j]));
        }
    }
    // Complete the left basis for zero singular values.
    for k in 0..n {
        if norms[order[k]] > floor {
            continue;
        }
        for e in 0..rows {
            let mut cand = DVector::zeros(rows);
            cand[e] = 1.0;
            for j in 0..n {
                if j != k {
                    let proj = u.column(j).dot(&cand);
                    cand -= u.column(j) * proj;
                }
            }
            let nn = cand.norm();
            if nn > 1e-8 {
                u.set_column(k, &(cand / nn));
                break;
            }
        }
    }
    Some(SVD { u: Some(u), v_t: Some(vs.transpose()), singular_values: sv })
}

pub(crate) fn min_consecutive_gap(sorted_desc: &DVector<f64>) -> Option<f64> {
    sorted_desc
        .as_slice()
        .windows(2)
        .map(|w| w[0] - w[1])
        .reduce(f64::min)
}

/// Nuclear norm of the cross Gram. No batch normalization, so coincident
/// batches score exactly `N`.
pub fn svd_cost(
    data: &SampleBatch,
    model: &SampleBatch,
    reg: &RegularizationPolicy,
) -> Result<CostReport> {
    check_pair(data, model)?;
    let m = crate::gaussian::scaled_sq_dist(data.samples(), model.samples())?;
    let v_sum = data.bandwidth() + model.bandwidth();
    let cross = crate::gaussian::gram_from_sq_dist(&m, v_sum, data.dim(), ConstantMode::ExpOnly);
    let dec = svd(cross.clone())?;
    let value = dec.singular_values.sum();
    let u = dec.u.as_ref().expect("u requested");
    let v_t = dec.v_t.as_ref().expect("v_t requested");
    // Null directions get no weight, which picks the minimum-norm
    // subgradient when the Gram matrix is rank deficient.
    let floor = dec.singular_values.max() * f64::EPSILON * (cross.nrows().max(cross.ncols()) as f64);
    let r = dec.singular_values.iter().filter(|s| **s > floor).count();
    let g_cross = u.columns(0, r) * v_t.rows(0, r);
    let gap = min_consecutive_gap(&dec.singular_values);
    let grad = cross_chain(data.samples(), model.samples(), &cross, &g_cross, v_sum);
    let diag = CostDiagnostics {
        jitter_used: 0.0,
        min_singular_gap: gap,
        degenerate_spectrum: gap.is_some_and(|g| g < reg.svd_gap_floor),
    };
    finish(CostKind::SvdNuclear, value, grad, diag, false)
}

/// Uniform dispatch over [`CostKind`].
pub fn evaluate(
    kind: CostKind,
    data: &SampleBatch,
    model: &SampleBatch,
    reg: &RegularizationPolicy,
) -> Result<CostReport> {
    match kind {
        CostKind::Scalar => scalar_cost(data, model),
        CostKind::VectorMatrix => vector_matrix_cost(data, model, reg),
        CostKind::MatrixMatrixTrace => matrix_matrix_cost(data, model, reg, MatrixVariant::Trace),
        CostKind::MatrixMatrixLogDet => matrix_matrix_cost(data, model, reg, MatrixVariant::LogDet),
        CostKind::SvdNuclear => svd_cost(data, model, reg),
    }
}

/// `Trace(C C^T)`, the squared Frobenius norm of the cross Gram.
///
/// Not a training cost: it rewards piling every center onto the densest data
/// region, which is why the nuclear norm is used instead. Kept for the
/// comparison tests.
pub fn frobenius_baseline(data: &SampleBatch, model: &SampleBatch) -> Result<f64> {
    let b = bundle(data, model)?;
    Ok(b.cross.norm_squared())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn batch(rng: &mut ChaCha8Rng, n: usize, d: usize, spread: f64, v: f64) -> SampleBatch {
        SampleBatch::new(DMatrix::from_fn(n, d, |_, _| rng.random_range(-spread..spread)), v).unwrap()
    }

    // Central differences with h = 1e-5 (1 + |x|), one coordinate at a time.
    fn fd_grad(
        data: &SampleBatch,
        model: &SampleBatch,
        f: &dyn Fn(&SampleBatch, &SampleBatch) -> f64,
    ) -> DMatrix<f64> {
        let y = model.samples().clone();
        DMatrix::from_fn(y.nrows(), y.ncols(), |i, j| {
            let h = 1e-5 * (1.0 + y[(i, j)].abs());
            let mut plus = y.clone();
            plus[(i, j)] += h;
            let mut minus = y.clone();
            minus[(i, j)] -= h;
            let fp = f(data, &model.with_samples(plus).unwrap());
            let fm = f(data, &model.with_samples(minus).unwrap());
            (fp - fm) / (2.0 * h)
        })
    }

    fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).amax() / b.amax().max(1e-12)
    }

    #[test]
    fn names_round_trip() {
        for k in CostKind::ALL {
            assert_eq!(k.name().parse::<CostKind>().unwrap(), k);
        }
        assert!("frobenius".parse::<CostKind>().is_err());
    }

    #[test]
    fn scalar_cost_coincident_equals_self_inner() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = batch(&mut rng, 12, 2, 1.0, 0.05);
        let r = scalar_cost(&data, &data).unwrap();
        let pp = batch_self_inner(&data);
        assert!((r.value - pp).abs() < 1e-12);
    }

    #[test]
    fn scalar_cost_single_sample() {
        let v = 0.1;
        for t in [0.0, 0.3, -1.2] {
            let data = SampleBatch::from_points(&[0.0], v).unwrap();
            let model = SampleBatch::from_points(&[t], v).unwrap();
            let r = scalar_cost(&data, &model).unwrap();
            let expect = (-t * t / (2.0 * 2.0 * v)).exp().powi(2);
            assert!((r.value - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn empty_and_mismatched_batches() {
        let a = SampleBatch::from_points(&[0.0, 1.0], 0.1).unwrap();
        let b = SampleBatch::from_rows(&[vec![0.0, 0.0]], 0.1).unwrap();
        assert!(matches!(scalar_cost(&a, &b), Err(Error::DimensionMismatch { .. })));
        assert!(SampleBatch::from_points(&[], 0.1).is_err());
    }

    #[test]
    fn vector_matrix_single_center() {
        let data = SampleBatch::from_points(&[0.0, 0.4, -0.2], 0.05).unwrap();
        let model = SampleBatch::from_points(&[0.1], 0.05).unwrap();
        let reg = RegularizationPolicy::default();
        let r = vector_matrix_cost(&data, &model, &reg).unwrap();
        let p: f64 = [0.0f64, 0.4, -0.2].iter().map(|x| (-(x - 0.1f64).powi(2) / 0.2).exp()).sum::<f64>() / 3.0;
        let rr = 1.0 + reg.jitter_rel;
        assert!((r.value - p * p / rr).abs() < 1e-14);
        assert!((r.diagnostics.jitter_used - 1e-6).abs() < 1e-18);
    }

    #[test]
    fn unregularized_duplicate_centers_are_singular() {
        let data = SampleBatch::from_points(&[0.0, 0.5], 0.05).unwrap();
        let model = SampleBatch::from_points(&[0.2, 0.2, 0.7], 0.05).unwrap();
        let err = vector_matrix_cost(&data, &model, &RegularizationPolicy::unregularized());
        assert!(matches!(err, Err(Error::Singular("R_F"))));
        assert!(vector_matrix_cost(&data, &model, &RegularizationPolicy::default()).is_ok());
    }

    #[test]
    fn trace_variant_coincident_is_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // Well-separated points keep the Gram close to the identity, so the
        // jitter-induced shortfall sum_i (l_i / (l_i + eps))^2 stays tiny.
        let data = batch(&mut rng, 8, 2, 3.0, 0.01);
        let reg = RegularizationPolicy::new(1e-8, 1e-8).unwrap();
        let r = matrix_matrix_cost(&data, &data, &reg, MatrixVariant::Trace).unwrap();
        assert!((r.value - 8.0).abs() < 1e-6, "{}", r.value);
        let r = matrix_matrix_cost(&data, &data, &reg, MatrixVariant::TraceNoRg).unwrap();
        assert!((r.value - 8.0).abs() < 1e-6, "{}", r.value);
    }

    #[test]
    fn trace_and_logdet_rank_shifted_models_alike() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data = batch(&mut rng, 10, 1, 1.0, 0.02);
        let reg = RegularizationPolicy::default();
        let shifts = [0.05, 0.2, 0.6];
        let mut tr = vec![];
        let mut ld = vec![];
        for s in shifts {
            let model = data.shifted(&[s]).unwrap();
            tr.push(matrix_matrix_cost(&data, &model, &reg, MatrixVariant::Trace).unwrap().value);
            let r = matrix_matrix_cost(&data, &model, &reg, MatrixVariant::LogDet).unwrap();
            assert!(r.negated);
            assert_eq!(r.natural_value(), -r.value);
            ld.push(r.value);
        }
        let order = |v: &[f64]| {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|a, b| v[*b].partial_cmp(&v[*a]).unwrap());
            idx
        };
        assert_eq!(order(&tr), order(&ld));
        assert_eq!(order(&tr), vec![0, 1, 2]);
    }

    #[test]
    fn svd_cost_permuted_batch_is_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = batch(&mut rng, 9, 2, 1.0, 0.01);
        let mut rows: Vec<usize> = (0..9).collect();
        rows.reverse();
        rows.swap(0, 4);
        let model = data.with_samples(data.samples().select_rows(&rows)).unwrap();
        let r = svd_cost(&data, &model, &RegularizationPolicy::default()).unwrap();
        assert!((r.value - 9.0).abs() < 1e-9);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let reg = RegularizationPolicy::default();
        let variants: Vec<(&str, Box<dyn Fn(&SampleBatch, &SampleBatch) -> Result<CostReport>>)> = vec![
            ("scalar", Box::new(|d, m| scalar_cost(d, m))),
            ("vector", Box::new(move |d, m| vector_matrix_cost(d, m, &reg))),
            ("trace", Box::new(move |d, m| matrix_matrix_cost(d, m, &reg, MatrixVariant::Trace))),
            ("trace_no_rg", Box::new(move |d, m| matrix_matrix_cost(d, m, &reg, MatrixVariant::TraceNoRg))),
            ("logdet", Box::new(move |d, m| matrix_matrix_cost(d, m, &reg, MatrixVariant::LogDet))),
        ];
        for (name, f) in &variants {
            for _ in 0..20 {
                let d = rng.random_range(1..4);
                let (n, k) = (rng.random_range(3..7), rng.random_range(2..6));
                let data = batch(&mut rng, n, d, 1.0, 0.1);
                let model = batch(&mut rng, k, d, 1.0, 0.1);
                let r = f(&data, &model).unwrap();
                let fd = fd_grad(&data, &model, &|a, b| f(a, b).unwrap().value);
                let e = rel_err(&r.grad_centers, &fd);
                assert!(e < 1e-5, "{name}: rel err {e}");
            }
        }
    }

    #[test]
    fn svd_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let reg = RegularizationPolicy::default();
        let mut checked = 0;
        while checked < 20 {
            let d = rng.random_range(1..3);
            let n = rng.random_range(3..7);
            let data = batch(&mut rng, n, d, 1.0, 0.1);
            let model = batch(&mut rng, n, d, 1.0, 0.1);
            let r = svd_cost(&data, &model, &reg).unwrap();
            if r.diagnostics.min_singular_gap.unwrap() <= 1e-4 {
                continue;
            }
            let fd = fd_grad(&data, &model, &|a, b| svd_cost(a, b, &reg).unwrap().value);
            assert!(rel_err(&r.grad_centers, &fd) < 1e-4);
            checked += 1;
        }
    }

    #[test]
    fn svd_handles_vanishing_cross_gram() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let data = batch(&mut rng, 64, 2, 0.1, 0.001);
        let far = data.shifted(&[1.2, -0.8]).unwrap();
        let r = svd_cost(&data, &far, &RegularizationPolicy::default()).unwrap();
        assert!(r.value.is_finite() && r.value >= 0.0 && r.value < 1e-50);
        let spread = data.with_samples(data.samples() * 80.0).unwrap();
        let r = svd_cost(&data, &spread, &RegularizationPolicy::default()).unwrap();
        assert!(r.value.is_finite() && r.value >= 0.0);
        let zero = svd(DMatrix::zeros(3, 2)).unwrap();
        assert_eq!(zero.singular_values.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn jacobi_matches_reference_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for (r, c) in [(6, 4), (4, 6), (5, 5)] {
            let mut m = DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
            // Rank-deficient: repeat a column.
            let col = m.column(0).clone_owned();
            m.set_column(c - 1, &col);
            let j = jacobi_svd(&m).unwrap();
            let n = faer_svd(&m).unwrap();
            assert!((&j.singular_values - &n.singular_values).amax() < 1e-12);
            assert!(reconstruction_error(&n, &m) < 1e-12);
            assert!(reconstruction_error(&j, &m) < 1e-12);
            let u = j.u.unwrap();
            assert!((u.transpose() * &u - DMatrix::identity(u.ncols(), u.ncols())).amax() < 1e-10);
        }
    }

    #[test]
    fn frobenius_prefers_collapse_but_nuclear_does_not() {
        // A tight cluster plus a few outliers: stacking every center on the
        // cluster raises Trace(C C^T) above the coincident value, while the
        // nuclear norm drops.
        let pts = [0.0, 0.01, -0.01, 0.02, -0.02, 0.6, -0.6, 1.2];
        let data = SampleBatch::from_points(&pts, 0.01).unwrap();
        let collapsed = SampleBatch::from_points(&[0.0; 8], 0.01).unwrap();
        let reg = RegularizationPolicy::default();
        assert!(frobenius_baseline(&data, &collapsed).unwrap() > frobenius_baseline(&data, &data).unwrap());
        assert!(svd_cost(&data, &collapsed, &reg).unwrap().value < svd_cost(&data, &data, &reg).unwrap().value);
    }
}
