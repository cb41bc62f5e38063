//! Result files: comma-separated tables with 17 significant digits, JSON
//! metrics, and a manifest listing every file with its SHA-256.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;

pub fn num(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of the configuration as written to `config.json`.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    sha256_hex(serde_json::to_string(cfg).expect("configuration serializes").as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    /// `trace`, `grid`, `metrics`, `samples`, `table`, `config` or
    /// `checkpoint`.
    pub role: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub experiment: String,
    pub config_hash: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub status: String,
    pub files: Vec<FileEntry>,
    pub library_version: String,
}

impl Manifest {
    pub fn load(dir: &Path) -> std::io::Result<Self> {
        let text = fs::read_to_string(dir.join("manifest.json"))?;
        serde_json::from_str(&text).map_err(std::io::Error::other)
    }

    /// Checks that every listed file exists with the recorded hash and that
    /// `config.json` hashes to `config_hash`.
    pub fn validate(&self, dir: &Path) -> Result<(), String> {
        for f in &self.files {
            let bytes = fs::read(dir.join(&f.path)).map_err(|e| format!("{}: {e}", f.path))?;
            if sha256_hex(&bytes) != f.sha256 {
                return Err(format!("{} does not match its recorded hash", f.path));
            }
        }
        let cfg: ExperimentConfig = serde_json::from_slice(&fs::read(dir.join("config.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        if config_hash(&cfg) != self.config_hash {
            return Err("config.json does not match the manifest hash".into());
        }
        Ok(())
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Collects the files of one run inside its output directory.
pub struct RunWriter {
    dir: PathBuf,
    experiment: String,
    started: u64,
    files: Vec<FileEntry>,
    config_hash: String,
}

impl RunWriter {
    pub fn new(cfg: &ExperimentConfig, experiment: &str) -> std::io::Result<Self> {
        fs::create_dir_all(&cfg.output_dir)?;
        let mut w = Self {
            dir: cfg.output_dir.clone(),
            experiment: experiment.to_string(),
            started: unix_now(),
            files: Vec::new(),
            config_hash: config_hash(cfg),
        };
        w.write("config.json", "config", serde_json::to_string_pretty(cfg)?.as_bytes())?;
        Ok(w)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn write(&mut self, name: &str, role: &str, bytes: &[u8]) -> std::io::Result<()> {
        fs::write(self.dir.join(name), bytes)?;
        self.files.push(FileEntry { path: name.to_string(), role: role.to_string(), sha256: sha256_hex(bytes) });
        Ok(())
    }

    pub fn table(&mut self, name: &str, role: &str, header: &[&str], rows: &[Vec<String>]) -> std::io::Result<()> {
        let mut out = header.join(",");
        out.push('\n');
        for r in rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        self.write(name, role, out.as_bytes())
    }

    /// Matrix rows as CSV rows under a `c0,c1,...` header.
    pub fn matrix(&mut self, name: &str, role: &str, m: &DMatrix<f64>) -> std::io::Result<()> {
        let header: Vec<String> = (0..m.ncols()).map(|j| format!("c{j}")).collect();
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        let rows: Vec<Vec<String>> = m.row_iter().map(|r| r.iter().map(|v| num(*v)).collect()).collect();
        self.table(name, role, &header, &rows)
    }

    pub fn json<T: Serialize>(&mut self, name: &str, role: &str, value: &T) -> std::io::Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, role, text.as_bytes())
    }

    pub fn raw(&mut self, name: &str, role: &str, bytes: &[u8]) -> std::io::Result<()> {
        self.write(name, role, bytes)
    }

    pub fn finish(self, status: &str) -> std::io::Result<Manifest> {
        let m = Manifest {
            experiment: self.experiment,
            config_hash: self.config_hash,
            started_unix: self.started,
            finished_unix: unix_now(),
            status: status.to_string(),
            files: self.files,
            library_version: env!("CARGO_PKG_VERSION").to_string(),
        };
        fs::write(self.dir.join("manifest.json"), serde_json::to_string_pretty(&m)?)?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_carry_seventeen_digits() {
        assert_eq!(num(0.1), "1.0000000000000001e-1");
        assert_eq!(num(1.0).parse::<f64>().unwrap(), 1.0);
        let x = 0.1 + 0.2;
        assert_eq!(num(x).parse::<f64>().unwrap(), x);
    }

    #[test]
    fn manifest_validates_and_detects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig { output_dir: dir.path().to_path_buf(), ..Default::default() };
        let mut w = RunWriter::new(&cfg, "sweep").unwrap();
        w.matrix("m.csv", "grid", &DMatrix::identity(2, 2)).unwrap();
        let m = w.finish("ok").unwrap();
        let loaded = Manifest::load(dir.path()).unwrap();
        assert_eq!(loaded, m);
        loaded.validate(dir.path()).unwrap();
        fs::write(dir.path().join("m.csv"), "c0\n").unwrap();
        assert!(loaded.validate(dir.path()).is_err());
    }
}
