//! Mixture density network: a small MLP maps prior noise to the centers of
//! an equal-weight Gaussian mixture with a shared fixed variance, and the
//! centers are trained by gradient ascent on one of the matrix costs.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::costs::{evaluate, CostKind, CostReport, RegularizationPolicy};
use crate::error::{Error, Result};
use crate::gaussian::SampleBatch;
use crate::optim::{LrSchedule, OptimizerKind, OptimizerState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    Uniform,
    Gaussian,
    Hybrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub kind: PriorKind,
    #[serde(default = "default_prior_dim")]
    pub dim: usize,
    /// Uniform dimensions in a hybrid prior; the rest are standard normal.
    /// Defaults to half of `dim`.
    #[serde(default)]
    pub hybrid_split: Option<usize>,
}

fn default_prior_dim() -> usize {
    10
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self { kind: PriorKind::Uniform, dim: 10, hybrid_split: None }
    }
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidParameter("prior dim must be at least 1".into()));
        }
        if self.kind == PriorKind::Hybrid && self.uniform_dims() >= self.dim {
            return Err(Error::InvalidParameter("hybrid_split must be below dim".into()));
        }
        Ok(())
    }

    fn uniform_dims(&self) -> usize {
        match self.kind {
            PriorKind::Uniform => self.dim,
            PriorKind::Gaussian => 0,
            PriorKind::Hybrid => self.hybrid_split.unwrap_or(self.dim / 2),
        }
    }
}

/// `k x dim` noise matrix drawn from `rng`.
pub fn sample_prior_with<R: Rng>(spec: &PriorSpec, k: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    spec.validate()?;
    if k == 0 {
        return Err(Error::EmptyBatch);
    }
    let split = spec.uniform_dims();
    let mut out = DMatrix::zeros(k, spec.dim);
    for i in 0..k {
        for j in 0..spec.dim {
            out[(i, j)] = if j < split { rng.random::<f64>() } else { StandardNormal.sample(rng) };
        }
    }
    Ok(out)
}

pub fn sample_prior(spec: &PriorSpec, k: usize, seed: u64) -> Result<DMatrix<f64>> {
    sample_prior_with(spec, k, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Affine map `x -> W x + b` applied to row vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    /// `out x in`.
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Affine {
    fn apply(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = a * self.weight.transpose();
        for (j, b) in self.bias.iter().enumerate() {
            z.column_mut(j).add_scalar_mut(*b);
        }
        z
    }
}

/// MLP with `tanh` between layers and a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MdnModel {
    layers: Vec<Affine>,
}

/// Layer inputs recorded by the forward pass.
pub struct ForwardCache {
    inputs: Vec<DMatrix<f64>>,
}

impl MdnModel {
    pub fn from_layers(layers: Vec<Affine>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("a model needs at least one layer".into()));
        }
        for l in &layers {
            if l.bias.len() != l.weight.nrows() {
                return Err(Error::Shape("bias length differs from weight rows".into()));
            }
        }
        for w in layers.windows(2) {
            if w[1].weight.ncols() != w[0].weight.nrows() {
                return Err(Error::Shape(format!(
                    "layer of width {} feeds a layer expecting {}",
                    w[0].weight.nrows(),
                    w[1].weight.ncols()
                )));
            }
        }
        if layers.iter().any(|l| l.weight.iter().chain(l.bias.iter()).any(|x| !x.is_finite())) {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(Self { layers })
    }

    /// Glorot-uniform weights and zero biases.
    pub fn new(input_dim: usize, hidden: &[usize], output_dim: usize, seed: u64) -> Result<Self> {
        Self::with_output_gain(input_dim, hidden, output_dim, seed, 1.0)
    }

    /// Like [`new`](Self::new) with the output layer's weights multiplied by
    /// `gain`, which sets how widely the initial centers are spread.
    pub fn with_output_gain(
        input_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        seed: u64,
        gain: f64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut widths = vec![input_dim];
        widths.extend_from_slice(hidden);
        widths.push(output_dim);
        if widths.contains(&0) {
            return Err(Error::InvalidParameter("layer widths must be positive".into()));
        }
        let layers = widths
            .windows(2)
            .map(|w| {
                let limit = (6.0 / (w[0] + w[1]) as f64).sqrt();
                Affine {
                    weight: DMatrix::from_fn(w[1], w[0], |_, _| rng.random_range(-limit..limit)),
                    bias: DVector::zeros(w[1]),
                }
            })
            .collect::<Vec<_>>();
        let mut layers = layers;
        if let Some(last) = layers.last_mut() {
            last.weight *= gain;
        }
        Self::from_layers(layers)
    }

    pub fn layers(&self) -> &[Affine] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").weight.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Parameters flattened layer by layer: weight (column-major), then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(l.bias.as_slice());
        }
        out
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.param_count() {
            return Err(Error::Shape(format!("expected {} parameters, got {}", self.param_count(), p.len())));
        }
        let mut at = 0;
        for l in &mut self.layers {
            let n = l.weight.len();
            l.weight.as_mut_slice().copy_from_slice(&p[at..at + n]);
            at += n;
            let n = l.bias.len();
            l.bias.as_mut_slice().copy_from_slice(&p[at..at + n]);
            at += n;
        }
        Ok(())
    }

    pub fn forward(&self, noise: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.forward_cached(noise)?.0)
    }

    pub fn forward_cached(&self, noise: &DMatrix<f64>) -> Result<(DMatrix<f64>, ForwardCache)> {
        if noise.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.input_dim(), found: noise.ncols() });
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut a = noise.clone();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = l.apply(&a);
            if i < last {
                z.apply(|x| *x = x.tanh());
            }
            inputs.push(a);
            a = z;
        }
        Ok((a, ForwardCache { inputs }))
    }

    /// Gradient of `sum(grad_out .* forward(noise))` with respect to the
    /// flattened parameters.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &DMatrix<f64>) -> Vec<f64> {
        let mut grads: Vec<(DMatrix<f64>, DVector<f64>)> = Vec::with_capacity(self.layers.len());
        let mut dz = grad_out.clone();
        for (i, l) in self.layers.iter().enumerate().rev() {
            let a = &cache.inputs[i];
            let dw = dz.transpose() * a;
            let db = DVector::from_iterator(dz.ncols(), dz.column_iter().map(|c| c.sum()));
            grads.push((dw, db));
            if i > 0 {
                let mut da = &dz * &l.weight;
                da.zip_apply(a, |g, act| *g *= 1.0 - act * act);
                dz = da;
            }
        }
        grads.reverse();
        let mut out = Vec::with_capacity(self.param_count());
        for (dw, db) in grads {
            out.extend_from_slice(dw.as_slice());
            out.extend_from_slice(db.as_slice());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub cost: CostKind,
    #[serde(default = "default_bandwidth")]
    pub bandwidth: f64,
    pub batch_n: usize,
    pub centers_k: usize,
    pub steps: usize,
    pub learning_rate: LrSchedule,
    pub seed: u64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub prior: PriorSpec,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub regularization: RegularizationPolicy,
    /// Scale of the initial output weights, i.e. of the initial spread of
    /// the centers.
    #[serde(default = "default_gain")]
    pub output_gain: f64,
}

fn default_gain() -> f64 {
    2.0
}

fn default_bandwidth() -> f64 {
    0.001
}

fn default_hidden() -> Vec<usize> {
    vec![128, 128, 128]
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            cost: CostKind::SvdNuclear,
            bandwidth: default_bandwidth(),
            batch_n: 256,
            centers_k: 256,
            steps: 4000,
            learning_rate: LrSchedule::constant(3e-4),
            seed: 0,
            optimizer: OptimizerKind::default(),
            prior: PriorSpec::default(),
            hidden: default_hidden(),
            regularization: RegularizationPolicy::default(),
            output_gain: default_gain(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_n == 0 || self.centers_k == 0 || self.steps == 0 {
            return Err(Error::InvalidParameter("batch_n, centers_k and steps must be at least 1".into()));
        }
        if !(self.bandwidth.is_finite() && self.bandwidth > 0.0) {
            return Err(Error::InvalidParameter("bandwidth must be positive".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::InvalidParameter("hidden widths must be positive".into()));
        }
        self.learning_rate.validate()?;
        self.optimizer.validate()?;
        self.prior.validate()
    }

    /// A freshly initialized model for this configuration. The output bias
    /// is set so the initial centers average to zero over a seeded probe
    /// draw of the prior, which otherwise has a nonzero mean.
    pub fn init_model(&self, output_dim: usize) -> Result<MdnModel> {
        self.validate()?;
        let mut model =
            MdnModel::with_output_gain(self.prior.dim, &self.hidden, output_dim, self.seed, self.output_gain)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(2);
        let probe = model.forward(&sample_prior_with(&self.prior, 1024, &mut rng)?)?;
        let last = model.layers.last_mut().expect("nonempty");
        for (j, c) in probe.column_iter().enumerate() {
            last.bias[j] -= c.mean();
        }
        Ok(model)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    GaussMixture10,
    TwoMoons,
    SingleGaussian,
    CustomMixture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetParams {
    pub dim: usize,
    /// Means of the random mixture are drawn uniformly from `[-spread, spread]^dim`.
    pub spread: f64,
    pub std: f64,
    pub noise: f64,
    pub mean: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub stds: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Default for DatasetParams {
    fn default() -> Self {
        Self {
            dim: 2,
            spread: 0.5,
            std: 0.1,
            noise: 0.05,
            mean: vec![0.0, 0.0],
            means: Vec::new(),
            stds: Vec::new(),
            weights: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDatasetSpec {
    pub kind: DatasetKind,
    #[serde(default)]
    pub params: DatasetParams,
    #[serde(default)]
    pub seed: u64,
}

/// Sampler built from a [`ToyDatasetSpec`].
#[derive(Debug, Clone, PartialEq)]
pub enum ToyDataset {
    Mixture { means: Vec<Vec<f64>>, stds: Vec<f64>, weights: Vec<f64> },
    Moons { noise: f64 },
}

impl ToyDataset {
    pub fn build(spec: &ToyDatasetSpec) -> Result<Self> {
        let p = &spec.params;
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        match spec.kind {
            DatasetKind::GaussMixture10 => {
                if p.dim == 0 || !(p.std > 0.0) || !(p.spread > 0.0) {
                    return bad("mixture needs dim >= 1, std > 0 and spread > 0");
                }
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
                let means = (0..10)
                    .map(|_| (0..p.dim).map(|_| rng.random_range(-p.spread..p.spread)).collect())
                    .collect();
                Ok(Self::Mixture { means, stds: vec![p.std; 10], weights: vec![0.1; 10] })
            }
            DatasetKind::SingleGaussian => {
                if p.mean.is_empty() || !(p.std > 0.0) {
                    return bad("single gaussian needs a mean and std > 0");
                }
                Ok(Self::Mixture { means: vec![p.mean.clone()], stds: vec![p.std], weights: vec![1.0] })
            }
            DatasetKind::CustomMixture => {
                let k = p.means.len();
                if k == 0 || p.means.iter().any(|m| m.len() != p.means[0].len() || m.is_empty()) {
                    return bad("custom mixture needs means of one common dimension");
                }
                let stds = if p.stds.is_empty() { vec![p.std; k] } else { p.stds.clone() };
                let weights = if p.weights.is_empty() { vec![1.0; k] } else { p.weights.clone() };
                if stds.len() != k || weights.len() != k || stds.iter().any(|s| !(*s > 0.0)) {
                    return bad("custom mixture stds/weights must match the means and be positive");
                }
                let total: f64 = weights.iter().sum();
                if !(total > 0.0) || weights.iter().any(|w| *w < 0.0) {
                    return bad("custom mixture weights must be nonnegative with positive sum");
                }
                let weights = weights.iter().map(|w| w / total).collect();
                Ok(Self::Mixture { means: p.means.clone(), stds, weights })
            }
            DatasetKind::TwoMoons => {
                if !(p.noise >= 0.0) {
                    return bad("moon noise must be nonnegative");
                }
                Ok(Self::Moons { noise: p.noise })
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Mixture { means, .. } => means[0].len(),
            Self::Moons { .. } => 2,
        }
    }

    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> DMatrix<f64> {
        let d = self.dim();
        let mut out = DMatrix::zeros(n, d);
        for i in 0..n {
            match self {
                Self::Mixture { means, stds, weights } => {
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    let mut c = weights.len() - 1;
                    for (j, w) in weights.iter().enumerate() {
                        acc += w;
                        if u < acc {
                            c = j;
                            break;
                        }
                    }
                    for j in 0..d {
                        let z: f64 = StandardNormal.sample(rng);
                        out[(i, j)] = means[c][j] + stds[c] * z;
                    }
                }
                Self::Moons { noise } => {
                    let t = rng.random_range(0.0..std::f64::consts::PI);
                    let (x, y) = if rng.random_bool(0.5) {
                        (t.cos(), t.sin())
                    } else {
                        (1.0 - t.cos(), 0.5 - t.sin())
                    };
                    let zx: f64 = StandardNormal.sample(rng);
                    let zy: f64 = StandardNormal.sample(rng);
                    // Centered and scaled into roughly [-1, 1] x [-0.5, 0.5].
                    out[(i, 0)] = (x - 0.5) / 1.5 + noise * zx;
                    out[(i, 1)] = (y - 0.25) / 1.5 + noise * zy;
                }
            }
        }
        out
    }

    /// Fraction of mixture components with at least one center within two
    /// standard deviations of the component mean. `None` for the moons.
    pub fn mode_coverage(&self, centers: &DMatrix<f64>) -> Option<f64> {
        let Self::Mixture { means, stds, .. } = self else {
            return None;
        };
        let hit = means
            .iter()
            .zip(stds)
            .filter(|(m, s)| {
                centers.row_iter().any(|r| {
                    let d2: f64 = r.iter().zip(m.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                    d2.sqrt() <= 2.0 * **s
                })
            })
            .count();
        Some(hit as f64 / means.len() as f64)
    }
}

/// Cost of the centers generated from `noise` against `data`, and its
/// gradient with respect to the flattened model parameters.
pub fn cost_and_param_grad(
    model: &MdnModel,
    noise: &DMatrix<f64>,
    data: &DMatrix<f64>,
    cfg: &TrainConfig,
) -> Result<(CostReport, Vec<f64>)> {
    let (centers, cache) = model.forward_cached(noise)?;
    let model_batch = SampleBatch::new(centers, cfg.bandwidth)?;
    let data_batch = SampleBatch::new(data.clone(), cfg.bandwidth)?;
    let report = evaluate(cfg.cost, &data_batch, &model_batch, &cfg.regularization)?;
    let grad = model.backward(&cache, &report.grad_centers);
    Ok((report, grad))
}

/// Optimizer state plus the noise stream.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub optimizer: OptimizerState,
    pub prior_rng: ChaCha8Rng,
    pub step: usize,
}

impl TrainState {
    pub fn new(model: &MdnModel, cfg: &TrainConfig) -> Self {
        let mut prior_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        prior_rng.set_stream(1);
        Self { optimizer: OptimizerState::new(cfg.optimizer, model.param_count()), prior_rng, step: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub cost_value: f64,
    pub grad_norm: f64,
}

/// One ascent step on a fresh noise draw.
pub fn train_step(
    model: &mut MdnModel,
    data_batch: &DMatrix<f64>,
    cfg: &TrainConfig,
    state: &mut TrainState,
) -> Result<StepReport> {
    let noise = sample_prior_with(&cfg.prior, cfg.centers_k, &mut state.prior_rng)?;
    let (report, grad) = cost_and_param_grad(model, &noise, data_batch, cfg)?;
    let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if !report.value.is_finite() || !grad_norm.is_finite() {
        return Err(Error::NonFinite(format!("{} cost at step {}", cfg.cost, state.step)));
    }
    let descent: Vec<f64> = grad.iter().map(|g| -g).collect();
    let mut params = model.params();
    state.optimizer.step(&mut params, &descent, cfg.learning_rate.at(state.step));
    model.set_params(&params)?;
    state.step += 1;
    Ok(StepReport { cost_value: report.value, grad_norm })
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub model: MdnModel,
    pub cost_trace: Vec<f64>,
    pub mode_coverage: Option<f64>,
    /// Set when training stopped on a non-finite value; the trace then
    /// holds the steps completed before it.
    pub diverged: Option<String>,
    /// Centers generated from a fresh noise draw after training.
    pub centers: DMatrix<f64>,
}

/// Runs `cfg.steps` steps, each on a fresh data batch.
pub fn fit(mut model: MdnModel, dataset: &ToyDatasetSpec, cfg: &TrainConfig) -> Result<FitReport> {
    cfg.validate()?;
    let data = ToyDataset::build(dataset)?;
    if data.dim() != model.output_dim() {
        return Err(Error::DimensionMismatch { expected: data.dim(), found: model.output_dim() });
    }
    let mut data_rng = ChaCha8Rng::seed_from_u64(dataset.seed);
    data_rng.set_stream(1);
    let mut state = TrainState::new(&model, cfg);
    let mut cost_trace = Vec::with_capacity(cfg.steps);
    let mut diverged = None;
    for _ in 0..cfg.steps {
        let batch = data.sample(cfg.batch_n, &mut data_rng);
        match train_step(&mut model, &batch, cfg, &mut state) {
            Ok(r) => cost_trace.push(r.cost_value),
            Err(Error::NonFinite(msg)) => {
                diverged = Some(msg);
                break;
            }
            Err(e) => return Err(e),
        }
    }
    let noise = sample_prior_with(&cfg.prior, cfg.centers_k, &mut state.prior_rng)?;
    let centers = model.forward(&noise)?;
    let mode_coverage = data.mode_coverage(&centers);
    Ok(FitReport { model, cost_trace, mode_coverage, diverged, centers })
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerDump {
    rows: usize,
    cols: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

/// Model parameters with the configuration that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    version: u32,
    layers: Vec<LayerDump>,
    pub config: TrainConfig,
}

impl Checkpoint {
    pub fn new(model: &MdnModel, config: &TrainConfig) -> Self {
        let layers = model
            .layers
            .iter()
            .map(|l| LayerDump {
                rows: l.weight.nrows(),
                cols: l.weight.ncols(),
                weight: l.weight.as_slice().to_vec(),
                bias: l.bias.as_slice().to_vec(),
            })
            .collect();
        Self { version: CHECKPOINT_VERSION, layers, config: config.clone() }
    }

    pub fn model(&self) -> Result<MdnModel> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", self.version)));
        }
        let layers = self
            .layers
            .iter()
            .map(|l| {
                if l.weight.len() != l.rows * l.cols || l.bias.len() != l.rows {
                    return Err(Error::Format("layer shape does not match its data".into()));
                }
                Ok(Affine {
                    weight: DMatrix::from_column_slice(l.rows, l.cols, &l.weight),
                    bias: DVector::from_column_slice(&l.bias),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        MdnModel::from_layers(layers)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
