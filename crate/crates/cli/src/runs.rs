//! One function per experiment. Each writes its files through a
//! [`RunWriter`] and returns the manifest plus whether the run succeeded.

use std::path::Path;

use kmc_core::experiments::{run_identity_map, run_singular_grid, run_sweep, SWEEP_COSTS};
use kmc_core::mdn::{fit, ToyDataset};
use kmc_core::patchnet::{load_cifar_batch, load_idx_images, train_classifier, ImageSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::checks::run_checks;
use crate::config::{ExperimentConfig, ExperimentKind, ImageFormat};
use crate::output::{num, Manifest, RunWriter};

#[derive(Debug)]
pub enum RunError {
    /// Bad configuration or missing inputs; nothing was computed.
    Usage(String),
    /// The computation itself failed.
    Failed(String),
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunError::Usage(m) | RunError::Failed(m) => f.write_str(m),
        }
    }
}

impl From<std::io::Error> for RunError {
    fn from(e: std::io::Error) -> Self {
        RunError::Failed(format!("writing results: {e}"))
    }
}

fn core_err(e: kmc_core::Error) -> RunError {
    match e {
        kmc_core::Error::InvalidParameter(_) | kmc_core::Error::Shape(_) => RunError::Usage(e.to_string()),
        _ => RunError::Failed(e.to_string()),
    }
}

#[derive(Debug)]
pub struct RunOutcome {
    pub manifest: Manifest,
    /// False for a diverged fit or a failed check.
    pub ok: bool,
    /// One line for the terminal.
    pub summary: String,
}

/// Copies the top-level seed into every experiment section, so the
/// effective configuration written to disk is self-contained.
pub fn effective_config(mut cfg: ExperimentConfig, kind: ExperimentKind) -> Result<ExperimentConfig, RunError> {
    if let Some(k) = cfg.experiment {
        if k != kind {
            return Err(RunError::Usage(format!(
                "config is for `{}` but the `{}` subcommand was run",
                k.name(),
                kind.name()
            )));
        }
    }
    cfg.experiment = Some(kind);
    let s = cfg.seed;
    cfg.sweep.seed = s;
    cfg.fit_mdn.train.seed = s;
    cfg.singular_grid.seed = s;
    cfg.classify.net.seed = s;
    Ok(cfg)
}

pub fn run(cfg: &ExperimentConfig) -> Result<RunOutcome, RunError> {
    let kind = cfg.experiment.ok_or_else(|| RunError::Usage("no experiment selected".into()))?;
    match kind {
        ExperimentKind::Sweep => sweep(cfg),
        ExperimentKind::FitMdn => fit_mdn(cfg),
        ExperimentKind::IdentityMap => identity_map(cfg),
        ExperimentKind::SingularGrid => singular_grid(cfg),
        ExperimentKind::Classify => classify(cfg),
        ExperimentKind::CheckSuite => check_suite(cfg),
    }
}

fn sweep(cfg: &ExperimentConfig) -> Result<RunOutcome, RunError> {
    let table = run_sweep(&cfg.sweep).map_err(core_err)?;
    let mut w = RunWriter::new(cfg, "sweep")?;
    let mut header = vec!["shift".to_string()];
    header.extend(SWEEP_COSTS.iter().map(|c| c.to_string()));
    header.extend(SWEEP_COSTS.iter().map(|c| format!("{c}_norm")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = (0..table.shifts.len())
        .map(|i| {
            let mut r = vec![num(table.shifts[i])];
            r.extend(table.values.iter().map(|c| num(c[i])));
            r.extend(table.normalized.iter().map(|c| num(c[i])));
            r
        })
        .collect();
    w.table("sweep.csv", "table", &header, &rows)?;
    let argmax: serde_json::Map<_, _> =
        SWEEP_COSTS.iter().enumerate().map(|(c, name)| (name.to_string(), json!(table.argmax(c)))).collect();
    let asym: serde_json::Map<_, _> =
        SWEEP_COSTS.iter().enumerate().map(|(c, name)| (name.to_string(), json!(table.asymmetry(c)))).collect();
    w.json("metrics.json", "metrics", &json!({ "argmax_shift": argmax, "asymmetry": asym }))?;
    let summary = format!("{} shifts, svd asymmetry {:.3e}", table.shifts.len(), table.asymmetry(3));
    Ok(RunOutcome { manifest: w.finish("ok")?, ok: true, summary })
}

fn points_table(m: &nalgebra::DMatrix<f64>) -> (Vec<String>, Vec<Vec<String>>) {
    let header = (0..m.ncols()).map(|j| format!("x{j}")).collect();
    let rows = m.row_iter().map(|r| r.iter().map(|v| num(*v)).collect()).collect();
    (header, rows)
}

fn fit_mdn(cfg: &ExperimentConfig) -> Result<RunOutcome, RunError> {
    let fc = &cfg.fit_mdn;
    let data = ToyDataset::build(&fc.dataset).map_err(core_err)?;
    let model = fc.train.init_model(data.dim()).map_err(core_err)?;
    let report = fit(model, &fc.dataset, &fc.train).map_err(core_err)?;
    let mut w = RunWriter::new(cfg, "fit_mdn")?;
    let trace: Vec<Vec<String>> =
        report.cost_trace.iter().enumerate().map(|(i, c)| vec![i.to_string(), num(*c)]).collect();
    w.table("trace.csv", "trace", &["step", "cost"], &trace)?;
    let (h, rows) = points_table(&report.centers);
    w.table("centers.csv", "samples", &h.iter().map(String::as_str).collect::<Vec<_>>(), &rows)?;
    // A data draw of the same size, from a generator independent of training.
    let mut rng = ChaCha8Rng::seed_from_u64(fc.dataset.seed);
    rng.set_stream(3);
    let (h, rows) = points_table(&data.sample(fc.train.centers_k, &mut rng));
    w.table("data.csv", "samples", &h.iter().map(String::as_str).collect::<Vec<_>>(), &rows)?;
    w.json(
        "metrics.json",
        "metrics",
        &json!({
            "cost": fc.train.cost.name(),
            "steps_completed": report.cost_trace.len(),
            "final_cost": report.cost_trace.last(),
            "mode_coverage": report.mode_coverage,
            "diverged": report.diverged,
        }),
    )?;
    let ok = report.diverged.is_none();
    let summary = match &report.diverged {
        Some(m) => format!("diverged: {m}"),
        None => format!(
            "{} steps, mode coverage {}",
            report.cost_trace.len(),
            report.mode_coverage.map_or("n/a".into(), |c| format!("{c:.2}"))
        ),
    };
    Ok(RunOutcome { manifest: w.finish(if ok { "ok" } else { "diverged" })?, ok, summary })
}

fn identity_map(cfg: &ExperimentConfig) -> Result<RunOutcome, RunError> {
    let ic = &cfg.identity_map;
    if ic.shifts.is_empty() {
        return Err(RunError::Usage("identity_map.shifts is empty".into()));
    }
    let maps = ic
        .shifts
        .iter()
        .map(|&s| run_identity_map(&ic.at(s, cfg.seed)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(core_err)?;
    let mut w = RunWriter::new(cfg, "identity_map")?;
    let mut per_shift = Vec::new();
    for (i, (shift, m)) in ic.shifts.iter().zip(&maps).enumerate() {
        let name = format!("identity_{i}.csv");
        w.matrix(&name, "grid", &m.matrix)?;
        let grids: Vec<Vec<String>> =
            m.model_grid.iter().zip(&m.data_grid).map(|(a, b)| vec![num(*a), num(*b)]).collect();
        w.table(&format!("grid_{i}.csv"), "grid", &["model_x", "data_x"], &grids)?;
        per_shift.push(json!({
            "shift": shift,
            "matrix": name,
            "diagonal_mass_ratio": m.diagonal_mass_ratio,
            "singular_values": m.singular_values.as_slice(),
        }));
    }
    w.json(
        "metrics.json",
        "metrics",
        &json!({ "bandwidth": ic.bandwidth, "grid_points": ic.grid_points, "maps": per_shift }),
    )?;
    let ratios: Vec<String> = maps.iter().map(|m| format!("{:.3}", m.diagonal_mass_ratio)).collect();
    Ok(RunOutcome { manifest: w.finish("ok")?, ok: true, summary: format!("diagonal mass ratios {}", ratios.join(" ")) })
}

fn singular_grid(cfg: &ExperimentConfig) -> Result<RunOutcome, RunError> {
    let sc = &cfg.singular_grid;
    let f = run_singular_grid(sc).map_err(core_err)?;
    let mut w = RunWriter::new(cfg, "singular_grid")?;
    for k in 0..f.left.len() {
        w.matrix(&format!("left_{k}.csv"), "grid", &f.left[k])?;
        w.matrix(&format!("right_{k}.csv"), "grid", &f.right[k])?;
    }
    w.json(
        "metrics.json",
        "metrics",
        &json!({ "grid": f.grid, "bandwidth": sc.bandwidth, "singular_values": f.singular_values }),
    )?;
    let summary = format!("{} singular pairs on a {}x{} grid", f.left.len(), f.grid.nx, f.grid.ny);
    Ok(RunOutcome { manifest: w.finish("ok")?, ok: true, summary })
}

fn load_set(format: ImageFormat, images: &Path, labels: &Path, limit: Option<usize>) -> Result<ImageSet, RunError> {
    let mut need = vec![images];
    if format == ImageFormat::Idx {
        need.push(labels);
    }
    for p in need {
        if !p.is_file() {
            return Err(RunError::Usage(format!("dataset file not found: {}", p.display())));
        }
    }
    let set = match format {
        ImageFormat::Idx => load_idx_images(images, labels),
        ImageFormat::Cifar => load_cifar_batch(images),
    }
    .map_err(|e| RunError::Usage(format!("{}: {e}", images.display())))?;
    Ok(match limit {
        Some(n) => set.head(n),
        None => set,
    })
}

#[derive(Serialize)]
struct PatchRun {
    patch_size: usize,
    train_acc: f64,
    test_acc: f64,
    epochs_file: String,
}

fn classify(cfg: &ExperimentConfig) -> Result<RunOutcome, RunError> {
    let cc = &cfg.classify;
    if cc.patch_sizes.is_empty() {
        return Err(RunError::Usage("classify.patch_sizes is empty".into()));
    }
    let train = load_set(cc.format, &cc.train_images, &cc.train_labels, cc.train_limit)?;
    let test = load_set(cc.format, &cc.test_images, &cc.test_labels, cc.test_limit)?;
    let mut runs = Vec::new();
    let mut tables = Vec::new();
    for &p in &cc.patch_sizes {
        let net = kmc_core::patchnet::PatchNetConfig { patch_size: p, ..cc.net.clone() };
        let r = train_classifier(&train, &test, &net, &cc.training).map_err(core_err)?;
        let rows: Vec<Vec<String>> = r
            .epochs
            .iter()
            .map(|e| vec![e.epoch.to_string(), num(e.mean_loss), num(e.running_train_acc), num(e.test_acc)])
            .collect();
        let name = format!("epochs_p{p}.csv");
        tables.push((name.clone(), rows));
        runs.push(PatchRun { patch_size: p, train_acc: r.train_acc, test_acc: r.test_acc, epochs_file: name });
    }
    let non_decreasing = runs.windows(2).all(|w| w[1].test_acc >= w[0].test_acc);
    let mut w = RunWriter::new(cfg, "classify")?;
    for (name, rows) in &tables {
        w.table(name, "trace", &["epoch", "mean_loss", "running_train_acc", "test_acc"], rows)?;
    }
    w.json(
        "metrics.json",
        "metrics",
        &json!({
            "train_images": train.len(),
            "test_images": test.len(),
            "runs": runs,
            "test_acc_non_decreasing": non_decreasing,
        }),
    )?;
    let accs: Vec<String> = runs.iter().map(|r| format!("p{}={:.4}", r.patch_size, r.test_acc)).collect();
    Ok(RunOutcome { manifest: w.finish("ok")?, ok: true, summary: format!("test accuracy {}", accs.join(" ")) })
}

fn check_suite(cfg: &ExperimentConfig) -> Result<RunOutcome, RunError> {
    let results = run_checks(&cfg.check_suite, cfg.seed);
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    let mut w = RunWriter::new(cfg, "check_suite")?;
    w.json(
        "report.json",
        "metrics",
        &json!({ "passed": failed.is_empty(), "failed": failed, "checks": results }),
    )?;
    let ok = failed.is_empty();
    let summary = if ok {
        format!("all {} checks passed", results.len())
    } else {
        format!("{} of {} checks failed: {}", failed.len(), results.len(), failed.join(", "))
    };
    Ok(RunOutcome { manifest: w.finish(if ok { "ok" } else { "failed" })?, ok, summary })
}
