//! WebAssembly bindings for the demo page. Each export returns a JSON
//! string that the page parses and draws; the plain functions underneath are
//! what the tests call.

use kmc_core::experiments::{
    run_identity_map, run_singular_grid, run_sweep, IdentityMapConfig, Mixture1d, SingularGridConfig, SweepConfig,
    SWEEP_COSTS,
};
use kmc_core::mdn::{DatasetKind, DatasetParams, ToyDatasetSpec};
use kmc_core::spectral::Grid2d;
use serde_json::json;
use wasm_bindgen::prelude::*;

/// Two equal bumps at `+-separation / 2`.
fn two_bumps(separation: f64, std: f64) -> Mixture1d {
    Mixture1d { means: vec![-separation / 2.0, separation / 2.0], stds: vec![std, std], weights: vec![0.5, 0.5] }
}

pub fn sweep_table(separation: f64, std: f64, bandwidth: f64, samples: usize, seed: u64) -> Result<String, String> {
    let mix = two_bumps(separation, std);
    let cfg = SweepConfig { p: mix.clone(), q: mix, samples, bandwidth, seed, ..SweepConfig::default() };
    let t = run_sweep(&cfg).map_err(|e| e.to_string())?;
    let curves: serde_json::Map<_, _> =
        SWEEP_COSTS.iter().zip(&t.normalized).map(|(name, col)| (name.to_string(), json!(col))).collect();
    Ok(json!({ "shifts": t.shifts, "curves": curves, "svd_asymmetry": t.asymmetry(3) }).to_string())
}

pub fn identity_picture(shift: f64, bandwidth: f64, grid_points: usize, seed: u64) -> Result<String, String> {
    let cfg = IdentityMapConfig { shift, bandwidth, grid_points, seed, ..IdentityMapConfig::default() };
    let m = run_identity_map(&cfg).map_err(|e| e.to_string())?;
    let rows: Vec<Vec<f64>> = m.matrix.row_iter().map(|r| r.iter().cloned().collect()).collect();
    Ok(json!({
        "rows": rows,
        "model_grid": m.model_grid,
        "data_grid": m.data_grid,
        "diagonal_mass_ratio": m.diagonal_mass_ratio,
    })
    .to_string())
}

pub fn singular_pictures(model_is_moons: bool, bandwidth: f64, top_k: usize, seed: u64) -> Result<String, String> {
    let base = SingularGridConfig::default();
    let moons = ToyDatasetSpec { kind: DatasetKind::TwoMoons, params: DatasetParams::default(), seed: 0 };
    let cfg = SingularGridConfig {
        data: if model_is_moons { base.data.clone() } else { moons.clone() },
        model: moons,
        bandwidth,
        top_k,
        seed,
        grid: Grid2d { nx: 80, ny: 50, ..base.grid },
        ..base
    };
    let f = run_singular_grid(&cfg).map_err(|e| e.to_string())?;
    // Row-major, one row per y value.
    let flat = |ms: &[nalgebra::DMatrix<f64>]| -> Vec<Vec<f64>> {
        ms.iter().map(|m| m.transpose().as_slice().to_vec()).collect()
    };
    Ok(json!({
        "nx": f.grid.nx,
        "ny": f.grid.ny,
        "singular_values": f.singular_values,
        "left": flat(&f.left),
        "right": flat(&f.right),
    })
    .to_string())
}

fn js(r: Result<String, String>) -> Result<String, JsError> {
    r.map_err(|e| JsError::new(&e))
}

/// Normalized cost curves against the shift, as JSON.
#[wasm_bindgen]
pub fn sweep(separation: f64, std: f64, bandwidth: f64, samples: usize, seed: u32) -> Result<String, JsError> {
    js(sweep_table(separation, std, bandwidth, samples, seed.into()))
}

/// Identity-map matrix for a data batch and its shifted copy, as JSON.
#[wasm_bindgen]
pub fn identity_map(shift: f64, bandwidth: f64, grid_points: usize, seed: u32) -> Result<String, JsError> {
    js(identity_picture(shift, bandwidth, grid_points, seed.into()))
}

/// Top singular functions on a grid, as JSON. With `gaussian_data` the data
/// side is a Gaussian blob, otherwise both sides are two moons.
#[wasm_bindgen]
pub fn singular_functions(gaussian_data: bool, bandwidth: f64, top_k: usize, seed: u32) -> Result<String, JsError> {
    js(singular_pictures(gaussian_data, bandwidth, top_k, seed.into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> serde_json::Value {
        serde_json::from_str(s).unwrap()
    }

    #[test]
    fn sweep_curves_peak_at_one() {
        let v = parse(&sweep_table(0.8, 0.1, 0.01, 32, 0).unwrap());
        let shifts = v["shifts"].as_array().unwrap();
        for name in SWEEP_COSTS {
            let col = v["curves"][name].as_array().unwrap();
            assert_eq!(col.len(), shifts.len());
            let peak = col.iter().map(|x| x.as_f64().unwrap()).fold(f64::MIN, f64::max);
            assert_eq!(peak, 1.0);
        }
    }

    #[test]
    fn identity_matrix_is_square_grid() {
        let v = parse(&identity_picture(0.0, 0.001, 40, 7).unwrap());
        assert_eq!(v["rows"].as_array().unwrap().len(), 40);
        assert!(v["diagonal_mass_ratio"].as_f64().unwrap() > 0.5);
    }

    #[test]
    fn equal_sides_give_equal_functions() {
        let v = parse(&singular_pictures(false, 0.05, 2, 3).unwrap());
        let (nx, ny) = (v["nx"].as_u64().unwrap() as usize, v["ny"].as_u64().unwrap() as usize);
        for k in 0..2 {
            let l = v["left"][k].as_array().unwrap();
            let r = v["right"][k].as_array().unwrap();
            assert_eq!(l.len(), nx * ny);
            for (a, b) in l.iter().zip(r) {
                assert!((a.as_f64().unwrap() - b.as_f64().unwrap()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn bad_input_is_an_error() {
        assert!(sweep_table(0.8, 0.1, -1.0, 32, 0).is_err());
    }
}
