use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kmc_cli::output::Manifest;
use serde_json::Value;

fn kmc(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kmc"))
        .args(args)
        .arg("--output-dir")
        .arg(dir)
        .output()
        .unwrap()
}

fn with_config(cmd: &str, toml: &str, dir: &Path) -> Output {
    let cfg = dir.with_extension("toml");
    fs::write(&cfg, toml).unwrap();
    kmc(&[cmd, "--config", cfg.to_str().unwrap()], dir)
}

fn metrics(dir: &Path, name: &str) -> Value {
    serde_json::from_slice(&fs::read(dir.join(name)).unwrap()).unwrap()
}

fn csv_rows(path: &Path) -> Vec<Vec<f64>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

fn mnist(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-subset").join(name)
}

fn classify_toml(extra: &str) -> String {
    format!(
        "[classify]\ntrain_images = {:?}\ntrain_labels = {:?}\ntest_images = {:?}\ntest_labels = {:?}\n{extra}",
        mnist("train-images-idx3-ubyte.gz"),
        mnist("train-labels-idx1-ubyte.gz"),
        mnist("t10k-images-idx3-ubyte.gz"),
        mnist("t10k-labels-idx1-ubyte.gz"),
    )
}

#[test]
fn sweep_writes_a_validating_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sweep");
    let o = kmc(&["sweep"], &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = Manifest::load(&out).unwrap();
    assert_eq!(m.experiment, "sweep");
    m.validate(&out).unwrap();
    assert!(m.files.iter().any(|f| f.role == "metrics"));
    let text = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert!(text.starts_with("shift,sc,vc,mc,svd,sc_norm,vc_norm,mc_norm,svd_norm\n"));
    let rows = csv_rows(&out.join("sweep.csv"));
    for c in 5..9 {
        let peak = rows.iter().map(|r| r[c]).fold(f64::MIN, f64::max);
        assert_eq!(peak, 1.0);
        let at = rows.iter().find(|r| r[c] == peak).unwrap()[0];
        assert_eq!(at, 0.0);
    }
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("bad");
    let o = with_config("sweep", "seed = 1\n[sweep]\nsamples = \"many\"\n", &out);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));
    let o = with_config("sweep", "experiment = \"classify\"\n", &out);
    assert_eq!(o.status.code(), Some(2));
    let o = Command::new(env!("CARGO_BIN_EXE_kmc")).arg("frobnicate").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = with_config("classify", "[classify]\ntrain_images = \"/nonexistent/train.gz\"\n", &out);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/nonexistent/train.gz"));
    assert!(!out.join("manifest.json").exists());
}

#[test]
fn print_config_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_kmc"))
        .args(["fit-mdn", "--print-config", "--seed", "5"])
        .output()
        .unwrap();
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("experiment = \"fit_mdn\""));
    let cfg = kmc_cli::config::ExperimentConfig::from_toml(&text).unwrap();
    assert_eq!(cfg.seed, 5);
    assert_eq!(cfg.fit_mdn.train.seed, 5);
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn fit_mdn_emits_one_row_per_center() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("fit");
    let toml = "[fit_mdn.train]\ncost = \"scalar\"\nbatch_n = 32\ncenters_k = 48\nsteps = 30\n\
                learning_rate = { initial = 0.0003 }\nseed = 0\n";
    let o = with_config("fit-mdn", toml, &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(csv_rows(&out.join("centers.csv")).len(), 48);
    assert_eq!(csv_rows(&out.join("data.csv")).len(), 48);
    assert_eq!(csv_rows(&out.join("trace.csv")).len(), 30);
    let m = metrics(&out, "metrics.json");
    assert_eq!(m["steps_completed"], 30);
    assert!(m["mode_coverage"].as_f64().is_some());
    assert!(m["diverged"].is_null());
}

#[test]
fn identity_map_ratio_falls_with_shift() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("id");
    let o = kmc(&["identity-map"], &out);
    assert!(o.status.success());
    let m = metrics(&out, "metrics.json");
    let maps = m["maps"].as_array().unwrap();
    let ratio = |i: usize| maps[i]["diagonal_mass_ratio"].as_f64().unwrap();
    assert_eq!(maps[0]["shift"], 0.0);
    assert!(ratio(0) > 0.1, "{}", ratio(0));
    assert!(ratio(2) < ratio(0));
    let grid = csv_rows(&out.join("identity_0.csv"));
    assert_eq!(grid.len(), 200);
    assert_eq!(grid[0].len(), 200);
}

#[test]
fn singular_grid_equal_sides_give_equal_functions() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sg");
    let toml = "[singular_grid]\nsamples = 80\ntop_k = 2\n[singular_grid.data]\nkind = \"two_moons\"\n\
                [singular_grid.grid]\nx_min = -1.5\nx_max = 2.5\ny_min = -1.0\ny_max = 1.5\nnx = 20\nny = 12\n";
    let o = with_config("singular-grid", toml, &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for k in 0..2 {
        let l = csv_rows(&out.join(format!("left_{k}.csv")));
        let r = csv_rows(&out.join(format!("right_{k}.csv")));
        let diff = l.iter().flatten().zip(r.iter().flatten()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "{diff}");
    }
    assert_eq!(csv_rows(&out.join("left_0.csv")).len(), 12);
}

#[test]
fn untrained_classifier_is_at_chance() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("cls0");
    let toml = classify_toml(
        "train_limit = 200\ntest_limit = 500\n[classify.net]\nlayer_widths = [4]\n[classify.training]\nepochs = 0\n",
    );
    let o = with_config("classify", &toml, &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = metrics(&out, "metrics.json");
    let acc = m["runs"][0]["test_acc"].as_f64().unwrap();
    assert!(acc < 0.25, "{acc}");
    assert_eq!(csv_rows(&out.join("epochs_p1.csv")).len(), 0);
}

#[test]
fn trained_classifier_fits_train_at_least_as_well() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("cls");
    let toml = classify_toml(
        "train_limit = 1000\ntest_limit = 1000\npatch_sizes = [3]\n[classify.net]\nlayer_widths = [16]\n\
         [classify.training]\nepochs = 2\ncalibration_images = 512\n",
    );
    let o = with_config("classify", &toml, &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = metrics(&out, "metrics.json");
    let run = &m["runs"][0];
    let (train, test) = (run["train_acc"].as_f64().unwrap(), run["test_acc"].as_f64().unwrap());
    assert!(test > 0.5, "{test}");
    assert!(train >= test, "{train} < {test}");
    assert_eq!(csv_rows(&out.join("epochs_p3.csv")).len(), 2);
}

#[test]
fn check_suite_passes_and_reports_every_check_once() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("checks");
    let o = with_config("check-suite", "[check_suite]\ninstances = 4\n", &out);
    let r = metrics(&out, "report.json");
    assert!(o.status.success(), "{}", r);
    let names: Vec<&str> = r["checks"].as_array().unwrap().iter().map(|c| c["name"].as_str().unwrap()).collect();
    assert_eq!(names, kmc_cli::checks::CHECK_NAMES);
}

#[test]
fn zero_jitter_fails_the_suite() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("checks0");
    let o = with_config("check-suite", "[check_suite]\ninstances = 1\njitter_rel = 0.0\n", &out);
    assert_eq!(o.status.code(), Some(1));
    let r = metrics(&out, "report.json");
    let failed: Vec<&str> = r["failed"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert!(failed.contains(&"vector_matrix_rank_deficient"), "{failed:?}");
    let check = r["checks"].as_array().unwrap().iter().find(|c| c["name"] == "vector_matrix_rank_deficient").unwrap();
    assert!(check["detail"].as_str().unwrap().contains("singular"));
    assert_eq!(Manifest::load(&out).unwrap().status, "failed");
}
