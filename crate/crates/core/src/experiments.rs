//! Desk-scale experiment setups shared by the command-line tool and the
//! browser demo: the cost-versus-shift sweep, the identity-map picture and
//! singular functions on a 2D grid.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::costs::{matrix_matrix_cost, scalar_cost, svd_cost, vector_matrix_cost, MatrixVariant, RegularizationPolicy};
use crate::error::{Error, Result};
use crate::gaussian::SampleBatch;
use crate::mdn::{DatasetKind, DatasetParams, ToyDataset, ToyDatasetSpec};
use crate::spectral::{identity_approximation, singular_function_grid, spanning_grid, Grid2d, IdentityMap, SingularFunctions};

/// One-dimensional Gaussian mixture used to draw sample batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mixture1d {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Default for Mixture1d {
    /// Two equal bumps at +-0.4 with standard deviation 0.1.
    fn default() -> Self {
        Self { means: vec![-0.4, 0.4], stds: vec![0.1, 0.1], weights: vec![0.5, 0.5] }
    }
}

impl Mixture1d {
    fn dataset(&self) -> Result<ToyDataset> {
        ToyDataset::build(&ToyDatasetSpec {
            kind: DatasetKind::CustomMixture,
            params: DatasetParams {
                means: self.means.iter().map(|m| vec![*m]).collect(),
                stds: self.stds.clone(),
                weights: self.weights.clone(),
                ..DatasetParams::default()
            },
            seed: 0,
        })
    }

    /// `n` draws with a generator seeded by `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<f64>> {
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(self.dataset()?.sample(n, &mut rng).as_slice().to_vec())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    /// Data density.
    pub p: Mixture1d,
    /// Model density, moved along the shift grid.
    pub q: Mixture1d,
    pub samples: usize,
    pub bandwidth: f64,
    pub shift_min: f64,
    pub shift_max: f64,
    pub shift_step: f64,
    pub jitter_rel: f64,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            p: Mixture1d::default(),
            q: Mixture1d::default(),
            samples: 64,
            bandwidth: 0.01,
            shift_min: -1.0,
            shift_max: 1.0,
            shift_step: 0.05,
            jitter_rel: 1e-6,
            seed: 0,
        }
    }
}

/// Column names of a sweep, in table order.
pub const SWEEP_COSTS: [&str; 4] = ["sc", "vc", "mc", "svd"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub shifts: Vec<f64>,
    /// Raw values, one vector per entry of [`SWEEP_COSTS`].
    pub values: Vec<Vec<f64>>,
    /// Each column divided by its maximum.
    pub normalized: Vec<Vec<f64>>,
}

impl SweepTable {
    pub fn argmax(&self, column: usize) -> f64 {
        let col = &self.values[column];
        let mut best = 0;
        for (i, v) in col.iter().enumerate() {
            if *v > col[best] {
                best = i;
            }
        }
        self.shifts[best]
    }

    /// Largest relative difference between the normalized values at `s` and
    /// `-s`.
    pub fn asymmetry(&self, column: usize) -> f64 {
        let col = &self.normalized[column];
        let mut worst = 0.0f64;
        for (i, s) in self.shifts.iter().enumerate() {
            if let Some(j) = self.shifts.iter().position(|t| *t == -*s) {
                let scale = col[i].abs().max(col[j].abs());
                if scale > 0.0 {
                    worst = worst.max((col[i] - col[j]).abs() / scale);
                }
            }
        }
        worst
    }
}

/// Shifts `i * step` for every integer `i` with the value inside
/// `[min, max]`, so zero is hit exactly whenever it is in range.
pub fn shift_grid(min: f64, max: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(max >= min) || !min.is_finite() || !max.is_finite() {
        return Err(Error::InvalidParameter("shift grid needs step > 0 and min <= max".into()));
    }
    let lo = (min / step - 1e-9).ceil() as i64;
    let hi = (max / step + 1e-9).floor() as i64;
    if hi < lo {
        return Err(Error::InvalidParameter("shift grid is empty".into()));
    }
    Ok((lo..=hi).map(|i| i as f64 * step).collect())
}

/// Evaluates the scalar, vector-matrix, matrix-matrix (data Gram dropped)
/// and SVD costs between a data batch from `p` and a model batch from `q`
/// moved by each shift. Both batches are drawn with the same seed, so equal
/// specs give identical samples.
pub fn run_sweep(cfg: &SweepConfig) -> Result<SweepTable> {
    let reg = RegularizationPolicy::new(cfg.jitter_rel, 1e-8)?;
    let shifts = shift_grid(cfg.shift_min, cfg.shift_max, cfg.shift_step)?;
    let data = SampleBatch::from_points(&cfg.p.sample(cfg.samples, cfg.seed)?, cfg.bandwidth)?;
    let model = SampleBatch::from_points(&cfg.q.sample(cfg.samples, cfg.seed)?, cfg.bandwidth)?;
    let mut values = vec![Vec::with_capacity(shifts.len()); SWEEP_COSTS.len()];
    for &s in &shifts {
        let m = model.shifted(&[s])?;
        values[0].push(scalar_cost(&data, &m)?.value);
        values[1].push(vector_matrix_cost(&data, &m, &reg)?.value);
        values[2].push(matrix_matrix_cost(&data, &m, &reg, MatrixVariant::TraceNoRg)?.value);
        values[3].push(svd_cost(&data, &m, &reg)?.value);
    }
    let normalized = values
        .iter()
        .map(|col| {
            let peak = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            col.iter().map(|v| v / peak).collect()
        })
        .collect();
    Ok(SweepTable { shifts, values, normalized })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IdentityMapConfig {
    pub mixture: Mixture1d,
    pub samples: usize,
    pub bandwidth: f64,
    /// Offset of the model batch from the data batch.
    pub shift: f64,
    pub grid_points: usize,
    pub seed: u64,
}

impl Default for IdentityMapConfig {
    fn default() -> Self {
        Self { mixture: Mixture1d::default(), samples: 64, bandwidth: 0.001, shift: 0.0, grid_points: 200, seed: 7 }
    }
}

/// Identity-map approximation for a data batch and its shifted copy, each
/// sampled on a grid spanning its own batch.
pub fn run_identity_map(cfg: &IdentityMapConfig) -> Result<IdentityMap> {
    let data = SampleBatch::from_points(&cfg.mixture.sample(cfg.samples, cfg.seed)?, cfg.bandwidth)?;
    let model = data.shifted(&[cfg.shift])?;
    let dg = spanning_grid(&data, cfg.grid_points)?;
    let mg = spanning_grid(&model, cfg.grid_points)?;
    identity_approximation(&data, &model, &dg, &mg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SingularGridConfig {
    pub data: ToyDatasetSpec,
    pub model: ToyDatasetSpec,
    pub samples: usize,
    pub bandwidth: f64,
    pub grid: Grid2d,
    pub top_k: usize,
    pub seed: u64,
}

impl Default for SingularGridConfig {
    /// Gaussian data against a two-moon model.
    fn default() -> Self {
        Self {
            data: ToyDatasetSpec {
                kind: DatasetKind::SingleGaussian,
                params: DatasetParams { mean: vec![0.5, 0.25], std: 0.5, ..DatasetParams::default() },
                seed: 0,
            },
            model: ToyDatasetSpec { kind: DatasetKind::TwoMoons, params: DatasetParams::default(), seed: 0 },
            samples: 200,
            bandwidth: 0.05,
            grid: Grid2d { x_min: -1.5, x_max: 2.5, y_min: -1.0, y_max: 1.5, nx: 60, ny: 40 },
            top_k: 4,
            seed: 3,
        }
    }
}

/// Samples both sides with one generator each (seeded identically, so equal
/// specs give equal batches) and extends the top singular pairs to the grid.
pub fn run_singular_grid(cfg: &SingularGridConfig) -> Result<SingularFunctions> {
    let draw = |spec: &ToyDatasetSpec| -> Result<DMatrix<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(ToyDataset::build(spec)?.sample(cfg.samples, &mut rng))
    };
    let data = SampleBatch::new(draw(&cfg.data)?, cfg.bandwidth)?;
    let model = SampleBatch::new(draw(&cfg.model)?, cfg.bandwidth)?;
    singular_function_grid(&data, &model, &cfg.grid, cfg.top_k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shift_grid_hits_zero() {
        let g = shift_grid(-1.0, 1.0, 0.05).unwrap();
        assert_eq!(g.len(), 41);
        assert_eq!(g[20], 0.0);
        assert_eq!(g[0], -1.0);
        assert_eq!(g[40], 1.0);
        assert!(shift_grid(1.0, -1.0, 0.1).is_err());
    }

    #[test]
    fn default_sweep_peaks_at_zero() {
        let t = run_sweep(&SweepConfig::default()).unwrap();
        for c in 0..SWEEP_COSTS.len() {
            assert_eq!(t.argmax(c), 0.0, "{}", SWEEP_COSTS[c]);
            assert_eq!(t.normalized[c].iter().cloned().fold(f64::MIN, f64::max), 1.0);
        }
        assert!(t.asymmetry(3) <= 0.02, "{}", t.asymmetry(3));
    }

    #[test]
    fn equal_specs_give_equal_singular_functions() {
        let cfg = SingularGridConfig {
            data: SingularGridConfig::default().model,
            samples: 60,
            grid: Grid2d { x_min: -1.0, x_max: 2.0, y_min: -1.0, y_max: 1.0, nx: 8, ny: 6 },
            top_k: 2,
            ..SingularGridConfig::default()
        };
        let f = run_singular_grid(&cfg).unwrap();
        for k in 0..2 {
            assert!((&f.left[k] - &f.right[k]).amax() < 1e-9);
        }
    }

    #[test]
    fn identity_map_ratio_drops_with_shift() {
        let base = run_identity_map(&IdentityMapConfig::default()).unwrap();
        let moved = run_identity_map(&IdentityMapConfig { shift: 1.0, ..Default::default() }).unwrap();
        assert!(base.diagonal_mass_ratio > moved.diagonal_mass_ratio);
    }
}
