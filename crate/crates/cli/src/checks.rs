//! The invariant checks behind `kmc check-suite`. Every check produces one
//! record; errors are reported as failures, never skipped.

use kmc_core::costs::{batch_self_inner, evaluate, svd_cost, vector_matrix_cost, CostKind, RegularizationPolicy};
use kmc_core::experiments::{run_identity_map, run_singular_grid, run_sweep, IdentityMapConfig, SingularGridConfig, SweepConfig};
use kmc_core::gaussian::{
    build_gram_bundle, gauss_inner, mixture_inner, mixture_norm, ConstantMode, GaussianComponent, GaussianMixture,
    SampleBatch,
};
use kmc_core::mdn::{cost_and_param_grad, MdnModel, TrainConfig};
use kmc_core::patchnet::{stack_patches, BnMode, ImageSet, PatchNet, PatchNetConfig};
use kmc_core::spectral::{
    half_variance_factorization, nuclear_bound_check, quadrature_factorization_error, whitened_orthonormality_check,
    DiscreteDensityPair, QuadratureGrid,
};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::CheckSuiteConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Worst value of the checked quantity.
    pub value: f64,
    pub tolerance: f64,
    pub detail: String,
}

type Outcome = Result<(f64, String), String>;

fn record(name: &str, tolerance: f64, outcome: Outcome) -> CheckResult {
    match outcome {
        Ok((value, detail)) => CheckResult {
            name: name.into(),
            passed: value <= tolerance,
            value,
            tolerance,
            detail,
        },
        Err(detail) => CheckResult { name: name.into(), passed: false, value: f64::NAN, tolerance, detail },
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// Names in report order.
pub const CHECK_NAMES: [&str; 25] = [
    "quadrature_gauss_inner",
    "quadrature_mixture_inner",
    "quadrature_mixture_norm",
    "half_variance_factorization",
    "half_variance_refinement",
    "gradient_scalar",
    "gradient_vector_matrix",
    "gradient_matrix_matrix_trace",
    "gradient_matrix_matrix_logdet",
    "gradient_svd_nuclear",
    "gradient_mdn",
    "gradient_patchnet",
    "bound_scalar",
    "bound_vector_matrix",
    "bound_nuclear_norm",
    "nuclear_norm_permuted_equality",
    "weighted_nuclear_bound",
    "weighted_nuclear_tight",
    "gram_symmetric_psd",
    "whitened_orthonormality",
    "vector_matrix_rank_deficient",
    "sweep_peaks_at_zero",
    "sweep_svd_symmetry",
    "identity_map_ordering",
    "singular_grid_hermitian",
];

pub fn run_checks(cfg: &CheckSuiteConfig, seed: u64) -> Vec<CheckResult> {
    let n = cfg.instances.max(1);
    let reg = if cfg.jitter_rel > 0.0 {
        RegularizationPolicy::new(cfg.jitter_rel, 1e-8).map_err(e2s)
    } else {
        Ok(RegularizationPolicy::unregularized())
    };
    let rng = |k: u64| ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1000).wrapping_add(k));
    let with_reg = |f: &dyn Fn(&RegularizationPolicy) -> Outcome| reg.clone().and_then(|r| f(&r));
    let mut out = vec![
        record(CHECK_NAMES[0], 1e-6, quad_gauss_inner(&mut rng(0), n)),
        record(CHECK_NAMES[1], 1e-6, quad_mixture(&mut rng(1), n, false)),
        record(CHECK_NAMES[2], 1e-6, quad_mixture(&mut rng(2), n, true)),
        record(CHECK_NAMES[3], 1e-6, half_variance()),
        record(CHECK_NAMES[4], 0.0, half_variance_refinement()),
    ];
    let cost_kinds = [
        CostKind::Scalar,
        CostKind::VectorMatrix,
        CostKind::MatrixMatrixTrace,
        CostKind::MatrixMatrixLogDet,
        CostKind::SvdNuclear,
    ];
    for (i, kind) in cost_kinds.into_iter().enumerate() {
        let o = with_reg(&|r| cost_gradient(&mut rng(10 + i as u64), n, kind, r));
        out.push(record(CHECK_NAMES[5 + i], 1e-4, o));
    }
    out.push(record(CHECK_NAMES[10], 1e-4, with_reg(&|r| mdn_gradient(&mut rng(20), n, r))));
    out.push(record(CHECK_NAMES[11], 1e-4, patchnet_gradient(&mut rng(21), n)));
    out.push(record(CHECK_NAMES[12], 1e-9, cost_bound(&mut rng(30), 200, None)));
    out.push(record(CHECK_NAMES[13], 1e-9, with_reg(&|r| cost_bound(&mut rng(31), 200, Some(r)))));
    out.push(record(CHECK_NAMES[14], 1e-9, nuclear_bound(&mut rng(32), 500)));
    out.push(record(CHECK_NAMES[15], 1e-9, nuclear_permuted(&mut rng(33), 50)));
    out.push(record(CHECK_NAMES[16], 1e-9, weighted_nuclear(&mut rng(34), 100, false)));
    out.push(record(CHECK_NAMES[17], 1e-9, weighted_nuclear(&mut rng(35), 100, true)));
    out.push(record(CHECK_NAMES[18], 1e-12, gram_psd(&mut rng(36), n)));
    out.push(record(CHECK_NAMES[19], 1e-6, with_reg(&|r| whitened(&mut rng(37), n, r))));
    out.push(record(CHECK_NAMES[20], 0.0, with_reg(&rank_deficient)));
    let sweep = run_sweep(&SweepConfig { seed, ..SweepConfig::default() }).map_err(e2s);
    out.push(record(
        CHECK_NAMES[21],
        0.0,
        sweep.as_ref().map_err(Clone::clone).map(|t| {
            let off: f64 = (0..4).map(|c| t.argmax(c).abs()).sum();
            let peak_err: f64 = t
                .normalized
                .iter()
                .map(|col| (col.iter().cloned().fold(f64::MIN, f64::max) - 1.0).abs())
                .sum();
            (off + peak_err, format!("{} shifts", t.shifts.len()))
        }),
    ));
    out.push(record(
        CHECK_NAMES[22],
        0.02,
        sweep.map(|t| (t.asymmetry(3), "relative difference between s and -s".into())),
    ));
    out.push(record(CHECK_NAMES[23], 0.0, identity_ordering()));
    out.push(record(CHECK_NAMES[24], 1e-9, singular_hermitian()));
    out
}

fn rel_err(analytic: &[f64], fd: &[f64]) -> f64 {
    let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    analytic.iter().zip(fd).map(|(a, f)| (a - f).abs()).fold(0.0, f64::max) / scale
}

/// Trapezoid sums on `[-8, 8]` with step `h`.
fn quad_1d(h: f64, f: impl Fn(f64) -> f64) -> f64 {
    let n = (16.0 / h).round() as usize;
    (0..=n)
        .map(|i| {
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            w * f(-8.0 + i as f64 * h)
        })
        .sum::<f64>()
        * h
}

fn quad_2d(h: f64, f: impl Fn(f64, f64) -> f64) -> f64 {
    quad_1d(h, |x| quad_1d(h, |y| f(x, y)))
}

fn random_component(rng: &mut ChaCha8Rng, d: usize) -> GaussianComponent {
    let mean = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
    GaussianComponent::new(mean, rng.random_range(0.1..0.8)).expect("valid component")
}

fn random_mixture(rng: &mut ChaCha8Rng, d: usize) -> GaussianMixture {
    let k = rng.random_range(1..4);
    let comps = (0..k).map(|_| random_component(rng, d)).collect();
    let w = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
    GaussianMixture::new(w, comps).expect("valid mixture")
}

fn product_integral(a: impl Fn(&[f64]) -> f64, b: impl Fn(&[f64]) -> f64, d: usize) -> f64 {
    if d == 1 {
        quad_1d(0.01, |x| a(&[x]) * b(&[x]))
    } else {
        quad_2d(0.04, |x, y| a(&[x, y]) * b(&[x, y]))
    }
}

fn quad_gauss_inner(rng: &mut ChaCha8Rng, n: usize) -> Outcome {
    let mut worst = 0.0f64;
    for i in 0..n {
        let d = 1 + i % 2;
        let (a, b) = (random_component(rng, d), random_component(rng, d));
        let exact = gauss_inner(&a, &b).map_err(e2s)?;
        worst = worst.max((exact - product_integral(|x| a.pdf(x), |x| b.pdf(x), d)).abs());
    }
    Ok((worst, format!("{n} instances in 1D and 2D")))
}

fn quad_mixture(rng: &mut ChaCha8Rng, n: usize, norm: bool) -> Outcome {
    let mut worst = 0.0f64;
    for i in 0..n {
        let d = 1 + i % 2;
        let p = random_mixture(rng, d);
        let q = if norm { p.clone() } else { random_mixture(rng, d) };
        let exact = if norm { mixture_norm(&p) } else { mixture_inner(&p, &q).map_err(e2s)? };
        worst = worst.max((exact - product_integral(|x| p.pdf(x), |x| q.pdf(x), d)).abs());
    }
    Ok((worst, format!("{n} instances in 1D and 2D")))
}

fn half_variance() -> Outcome {
    let grid = QuadratureGrid::new(-8.0, 8.0, 0.01).map_err(e2s)?;
    let r = half_variance_factorization(&grid, &[-1.0, 0.0, 1.0], 0.5).map_err(e2s)?;
    Ok((r.max_abs_err, "v = 0.5 on [-8, 8] step 0.01".into()))
}

/// Number of refinements that increased the error while it was above the
/// rounding floor.
fn half_variance_refinement() -> Outcome {
    let mut grid = QuadratureGrid::new(-8.0, 8.0, 1.6).map_err(e2s)?;
    let mut errs = Vec::new();
    for _ in 0..8 {
        errs.push(quadrature_factorization_error(&grid, &[-1.0, 0.0, 1.0], 0.5).map_err(e2s)?);
        grid = grid.refined();
    }
    let bad = errs.windows(2).filter(|w| w[1] > w[0] && w[1] > 1e-13).count();
    Ok((bad as f64, format!("errors {errs:?}")))
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize, d: usize, spread: f64, v: f64) -> SampleBatch {
    SampleBatch::new(DMatrix::from_fn(n, d, |_, _| rng.random_range(-spread..spread)), v).expect("valid batch")
}

fn cost_fd(kind: CostKind, data: &SampleBatch, model: &SampleBatch, reg: &RegularizationPolicy) -> Result<Vec<f64>, String> {
    let y = model.samples().clone();
    let mut out = Vec::with_capacity(y.len());
    for j in 0..y.ncols() {
        for i in 0..y.nrows() {
            let h = 1e-5 * (1.0 + y[(i, j)].abs());
            let mut plus = y.clone();
            plus[(i, j)] += h;
            let mut minus = y.clone();
            minus[(i, j)] -= h;
            let fp = evaluate(kind, data, &model.with_samples(plus).map_err(e2s)?, reg).map_err(e2s)?.value;
            let fm = evaluate(kind, data, &model.with_samples(minus).map_err(e2s)?, reg).map_err(e2s)?.value;
            out.push((fp - fm) / (2.0 * h));
        }
    }
    Ok(out)
}

fn cost_gradient(rng: &mut ChaCha8Rng, n: usize, kind: CostKind, reg: &RegularizationPolicy) -> Outcome {
    let mut worst = 0.0f64;
    let mut done = 0;
    let mut skipped = 0;
    while done < n {
        let d = 1 + done % 2;
        let (n_data, n_model) = (rng.random_range(4..9), rng.random_range(3..8));
        let data = random_batch(rng, n_data, d, 1.0, 0.1);
        let model = random_batch(rng, n_model, d, 1.0, 0.1);
        let r = evaluate(kind, &data, &model, reg).map_err(e2s)?;
        if kind == CostKind::SvdNuclear && r.diagnostics.min_singular_gap.is_none_or(|g| g <= 1e-4) {
            skipped += 1;
            if skipped > 50 * n {
                return Err("no non-degenerate instances found".into());
            }
            continue;
        }
        let fd = cost_fd(kind, &data, &model, reg)?;
        worst = worst.max(rel_err(r.grad_centers.as_slice(), &fd));
        done += 1;
    }
    Ok((worst, format!("{n} instances, {skipped} degenerate skipped")))
}

fn mdn_gradient(rng: &mut ChaCha8Rng, n: usize, reg: &RegularizationPolicy) -> Outcome {
    let kinds = [CostKind::Scalar, CostKind::VectorMatrix, CostKind::MatrixMatrixTrace, CostKind::SvdNuclear];
    let mut worst = 0.0f64;
    for i in 0..n {
        let cfg = TrainConfig { cost: kinds[i % 4], bandwidth: 0.05, regularization: *reg, ..TrainConfig::default() };
        let model = MdnModel::new(3, &[8, 8], 2, rng.random()).map_err(e2s)?;
        let noise = DMatrix::from_fn(4, 3, |_, _| rng.random_range(0.0..1.0));
        let data = DMatrix::from_fn(4, 2, |_, _| rng.random_range(-0.5..0.5));
        let (_, grad) = cost_and_param_grad(&model, &noise, &data, &cfg).map_err(e2s)?;
        let p0 = model.params();
        let mut fd = Vec::with_capacity(p0.len());
        let mut m = model.clone();
        for k in 0..p0.len() {
            let h = 1e-5 * (1.0 + p0[k].abs());
            let mut p = p0.clone();
            p[k] += h;
            m.set_params(&p).map_err(e2s)?;
            let up = cost_and_param_grad(&m, &noise, &data, &cfg).map_err(e2s)?.0.value;
            p[k] -= 2.0 * h;
            m.set_params(&p).map_err(e2s)?;
            let down = cost_and_param_grad(&m, &noise, &data, &cfg).map_err(e2s)?.0.value;
            fd.push((up - down) / (2.0 * h));
        }
        worst = worst.max(rel_err(&grad, &fd));
    }
    Ok((worst, format!("{n} instances, N = K = 4, two hidden layers of 8")))
}

fn patchnet_gradient(rng: &mut ChaCha8Rng, n: usize) -> Outcome {
    let mut worst = 0.0f64;
    for i in 0..n {
        let (h, w) = (5, 5);
        let pixels = (0..4 * h * w).map(|_| rng.random::<f64>()).collect();
        let set = ImageSet::new(h, w, 1, pixels, vec![0, 1, 2, 1]).map_err(e2s)?;
        let cfg = PatchNetConfig {
            patch_size: if i % 2 == 0 { 3 } else { 1 },
            layer_widths: vec![3, 2],
            n_classes: 3,
            output_gain: 1.5,
            seed: rng.random(),
            ..PatchNetConfig::default()
        };
        let mut net = PatchNet::new(&cfg, h, w, 1).map_err(e2s)?;
        let p: Vec<f64> = net.params().iter().map(|v| v + rng.random_range(-0.3..0.3)).collect();
        net.set_params(&p).map_err(e2s)?;
        for l in net.layers_mut() {
            l.running_mean.apply(|m| *m = rng.random_range(0.2..0.6));
            l.running_var.apply(|v| *v = rng.random_range(0.05..0.3));
        }
        let x = stack_patches(&set, &[0, 1, 2, 3], cfg.patch_size).map_err(e2s)?;
        let (_, grad, _) = net.loss_and_grad(&x, &set.labels, BnMode::Eval).map_err(e2s)?;
        let p0 = net.params();
        let mut fd = Vec::with_capacity(p0.len());
        let mut m = net.clone();
        for k in 0..p0.len() {
            let step = 1e-5 * (1.0 + p0[k].abs());
            let mut p = p0.clone();
            p[k] += step;
            m.set_params(&p).map_err(e2s)?;
            let up = m.loss_and_grad(&x, &set.labels, BnMode::Eval).map_err(e2s)?.0;
            p[k] -= 2.0 * step;
            m.set_params(&p).map_err(e2s)?;
            let down = m.loss_and_grad(&x, &set.labels, BnMode::Eval).map_err(e2s)?.0;
            fd.push((up - down) / (2.0 * step));
        }
        worst = worst.max(rel_err(&grad, &fd));
    }
    Ok((worst, format!("{n} instances, 4 images of 5x5, batch norm in eval mode")))
}

/// Largest excess of the cost over the data self inner product.
fn cost_bound(rng: &mut ChaCha8Rng, n: usize, reg: Option<&RegularizationPolicy>) -> Outcome {
    let mut worst = f64::NEG_INFINITY;
    for i in 0..n {
        let d = 1 + i % 3;
        let v = rng.random_range(0.01..0.5);
        let (n_data, n_model) = (rng.random_range(2..12), rng.random_range(1..12));
        let data = random_batch(rng, n_data, d, 1.0, v);
        let model = random_batch(rng, n_model, d, 1.0, v);
        let value = match reg {
            None => evaluate(CostKind::Scalar, &data, &model, &RegularizationPolicy::default()),
            Some(r) => vector_matrix_cost(&data, &model, r),
        }
        .map_err(e2s)?
        .value;
        worst = worst.max(value - batch_self_inner(&data));
    }
    Ok((worst.max(0.0), format!("{n} instances, value minus data self inner product")))
}

fn nuclear_bound(rng: &mut ChaCha8Rng, n: usize) -> Outcome {
    let mut worst = f64::NEG_INFINITY;
    for i in 0..n {
        let size = rng.random_range(1..16);
        let d = 1 + i % 3;
        let v = rng.random_range(0.005..1.0);
        let data = random_batch(rng, size, d, 1.0, v);
        let model = random_batch(rng, size, d, 1.0, v);
        let r = svd_cost(&data, &model, &RegularizationPolicy::default()).map_err(e2s)?;
        worst = worst.max(r.value - size as f64);
    }
    Ok((worst.max(0.0), format!("{n} instances, nuclear norm minus N")))
}

fn nuclear_permuted(rng: &mut ChaCha8Rng, n: usize) -> Outcome {
    let mut worst = 0.0f64;
    for i in 0..n {
        let size = rng.random_range(1..16);
        let v = rng.random_range(0.005..1.0);
        let data = random_batch(rng, size, 1 + i % 3, 1.0, v);
        let mut perm: Vec<usize> = (0..size).collect();
        for k in (1..size).rev() {
            perm.swap(k, rng.random_range(0..=k));
        }
        let y = DMatrix::from_fn(size, data.dim(), |r, c| data.samples()[(perm[r], c)]);
        let model = data.with_samples(y).map_err(e2s)?;
        let r = svd_cost(&data, &model, &RegularizationPolicy::default()).map_err(e2s)?;
        worst = worst.max((r.value - size as f64).abs());
    }
    Ok((worst, format!("{n} permuted copies, |nuclear norm - N|")))
}

fn weighted_nuclear(rng: &mut ChaCha8Rng, n: usize, tight: bool) -> Outcome {
    let mut worst = f64::NEG_INFINITY;
    for i in 0..n {
        let m = rng.random_range(1..10);
        let support = DMatrix::from_fn(m, 1 + i % 2, |_, _| rng.random_range(-1.0..1.0));
        let p: Vec<f64> = (0..m).map(|_| rng.random_range(0.05..1.0)).collect();
        let q: Vec<f64> = if tight { p.clone() } else { (0..m).map(|_| rng.random_range(0.05..1.0)).collect() };
        let mode = if i % 2 == 0 { ConstantMode::ExpOnly } else { ConstantMode::FullPdf };
        let pair = DiscreteDensityPair::normalized(support, p, q, rng.random_range(0.01..0.5)).map_err(e2s)?;
        let b = nuclear_bound_check(&pair, mode).map_err(e2s)?;
        let gap = b.nuclear_norm - b.bound;
        worst = worst.max(if tight { gap.abs() / b.bound } else { gap });
    }
    let what = if tight { "relative |norm - bound| with p == q" } else { "norm minus bound" };
    Ok((worst.max(0.0), format!("{n} random pairs, {what}")))
}

fn gram_psd(rng: &mut ChaCha8Rng, n: usize) -> Outcome {
    let mut worst = 0.0f64;
    for i in 0..n {
        let d = 1 + i % 3;
        let data = random_batch(rng, 10, d, 1.0, 0.05);
        let model = random_batch(rng, 7, d, 1.0, 0.05);
        let b = build_gram_bundle(&data, &model, ConstantMode::ExpOnly).map_err(e2s)?;
        for g in [&b.auto_rows, &b.auto_cols] {
            worst = worst.max((g - g.transpose()).amax());
            let eig = nalgebra::SymmetricEigen::new(g.clone());
            let floor = -1e-12 * g.nrows() as f64;
            worst = worst.max((floor - eig.eigenvalues.min()).max(0.0));
        }
    }
    Ok((worst, format!("{n} instances, asymmetry and negative eigenvalues")))
}

fn whitened(rng: &mut ChaCha8Rng, n: usize, reg: &RegularizationPolicy) -> Outcome {
    let mut worst = 0.0f64;
    for _ in 0..n {
        let data = random_batch(rng, 6, 1, 2.0, 0.05);
        let model = random_batch(rng, 5, 1, 2.0, 0.05);
        worst = worst.max(whitened_orthonormality_check(&data, &model, reg).map_err(e2s)?.max_dev);
    }
    Ok((worst, format!("{n} instances")))
}

/// A model batch with a repeated sample has a singular auto Gram; the cost
/// must still evaluate to a finite value.
fn rank_deficient(reg: &RegularizationPolicy) -> Outcome {
    let data = SampleBatch::from_points(&[0.0, 0.5], 0.05).map_err(e2s)?;
    let model = SampleBatch::from_points(&[0.2, 0.2, 0.7], 0.05).map_err(e2s)?;
    let r = vector_matrix_cost(&data, &model, reg).map_err(|e| format!("jitter_rel {}: {e}", reg.jitter_rel))?;
    if r.value.is_finite() {
        Ok((0.0, format!("jitter used {:.3e}", r.diagnostics.jitter_used)))
    } else {
        Err("non-finite cost".into())
    }
}

fn identity_ordering() -> Outcome {
    let ratio = |shift: f64, bandwidth: f64| {
        run_identity_map(&IdentityMapConfig { shift, bandwidth, ..IdentityMapConfig::default() })
            .map(|m| m.diagonal_mass_ratio)
            .map_err(e2s)
    };
    let (r0, r5, r10) = (ratio(0.0, 0.001)?, ratio(0.5, 0.001)?, ratio(1.0, 0.001)?);
    let wide = ratio(0.0, 0.01)?;
    let violations = [r0 > r5, r5 > r10, wide < r0].iter().filter(|ok| !**ok).count();
    Ok((violations as f64, format!("ratios {r0:.4} > {r5:.4} > {r10:.4}, wider kernel {wide:.4}")))
}

fn singular_hermitian() -> Outcome {
    let base = SingularGridConfig::default();
    let cfg = SingularGridConfig {
        data: base.model.clone(),
        samples: 60,
        grid: kmc_core::spectral::Grid2d { nx: 12, ny: 8, ..base.grid },
        top_k: 3,
        ..base
    };
    let f = run_singular_grid(&cfg).map_err(e2s)?;
    let dev = f.left.iter().zip(&f.right).map(|(l, r)| (l - r).amax()).fold(0.0, f64::max);
    Ok((dev, "equal data and model specs".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_name_appears_once() {
        let cfg = CheckSuiteConfig { instances: 1, ..Default::default() };
        let results = run_checks(&cfg, 0);
        let mut names: Vec<&str> = results.iter().map(|r| r.name.as_str()).collect();
        let total = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), total);
        for n in CHECK_NAMES {
            assert!(names.contains(&n), "{n}");
        }
    }

    #[test]
    fn zero_jitter_fails_the_rank_deficient_case() {
        let r = rank_deficient(&RegularizationPolicy::unregularized());
        assert!(r.unwrap_err().contains("singular"));
        assert!(rank_deficient(&RegularizationPolicy::default()).is_ok());
    }

    #[test]
    fn quadrature_oracle_integrates_a_density() {
        let c = GaussianComponent::new(vec![0.3], 0.2).unwrap();
        assert!((quad_1d(0.01, |x| c.pdf(&[x])) - 1.0).abs() < 1e-12);
        let c2 = GaussianComponent::new(vec![0.3, -0.2], 0.2).unwrap();
        assert!((quad_2d(0.04, |x, y| c2.pdf(&[x, y])) - 1.0).abs() < 1e-10);
    }
}
