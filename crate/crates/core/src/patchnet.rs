//! Image classifier built from products of Gaussians. Every pixel or patch
//! goes through its own stack of Gaussian layers (shared affine maps,
//! position-specific anchors, per-position batch norm); positions only meet
//! in the final layer, where the mean squared distance to per-class anchors
//! is exponentiated.

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{LrSchedule, OptimizerKind, OptimizerState};

/// Images stored row-major as `height x width x channels`, intensities in
/// `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
    pub labels: Vec<u8>,
}

impl ImageSet {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        let per = height * width * channels;
        if per == 0 || pixels.len() != per * labels.len() {
            return Err(Error::Shape(format!(
                "{} pixel values for {} images of {height}x{width}x{channels}",
                pixels.len(),
                labels.len()
            )));
        }
        Ok(Self { height, width, channels, pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// The first `n` images (all of them if there are fewer).
    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            height: self.height,
            width: self.width,
            channels: self.channels,
            pixels: self.pixels[..n * self.image_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Parses an unsigned-byte IDX file (optionally gzipped) into its
/// dimensions and payload.
pub fn read_idx(path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    parse_idx(&read_maybe_gz(path)?).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse_idx(bytes: &[u8]) -> Result<(Vec<usize>, Vec<u8>)> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::Format("not an IDX file".into()));
    }
    if bytes[2] != 0x08 {
        return Err(Error::Format(format!("IDX element type 0x{:02x} is not unsigned byte", bytes[2])));
    }
    let nd = bytes[3] as usize;
    let body = 4 + 4 * nd;
    if bytes.len() < body {
        return Err(Error::Format("truncated IDX header".into()));
    }
    let dims: Vec<usize> = (0..nd)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize)
        .collect();
    let count: usize = dims.iter().product();
    if bytes.len() - body != count {
        return Err(Error::Format(format!("IDX payload has {} bytes, header says {count}", bytes.len() - body)));
    }
    Ok((dims, bytes[body..].to_vec()))
}

/// Loads an IDX image file (`n x rows x cols`) with its label file.
pub fn load_idx_images(images: &Path, labels: &Path) -> Result<ImageSet> {
    let (dims, px) = read_idx(images)?;
    let (ldims, lab) = read_idx(labels)?;
    if dims.len() != 3 || ldims.len() != 1 || dims[0] != ldims[0] {
        return Err(Error::Format(format!("image dims {dims:?} do not match label dims {ldims:?}")));
    }
    ImageSet::new(dims[1], dims[2], 1, px.iter().map(|&b| b as f64 / 255.0).collect(), lab)
}

/// Loads CIFAR-style binary batches: each record is one label byte followed
/// by the red, green and blue 32x32 planes.
pub fn load_cifar_batch(path: &Path) -> Result<ImageSet> {
    const PLANE: usize = 32 * 32;
    let raw = read_maybe_gz(path)?;
    if raw.is_empty() || raw.len() % (1 + 3 * PLANE) != 0 {
        return Err(Error::Format(format!("{}: size {} is not a whole number of records", path.display(), raw.len())));
    }
    let mut pixels = Vec::with_capacity(raw.len());
    let mut labels = Vec::new();
    for rec in raw.chunks(1 + 3 * PLANE) {
        labels.push(rec[0]);
        for p in 0..PLANE {
            for c in 0..3 {
                pixels.push(rec[1 + c * PLANE + p] as f64 / 255.0);
            }
        }
    }
    ImageSet::new(32, 32, 3, pixels, labels)
}

/// Stride-1 patches with zero padding, one row per pixel position. Columns
/// run over patch rows, patch columns, then channels.
pub fn extract_patches(image: &[f64], height: usize, width: usize, channels: usize, patch: usize) -> Result<DMatrix<f64>> {
    check_patch(height, width, patch)?;
    if image.len() != height * width * channels {
        return Err(Error::Shape(format!("image has {} values, expected {}", image.len(), height * width * channels)));
    }
    let mut out = DMatrix::zeros(height * width, patch * patch * channels);
    fill_patches(&mut out, 0, image, height, width, channels, patch);
    Ok(out)
}

fn check_patch(height: usize, width: usize, patch: usize) -> Result<()> {
    if patch == 0 || patch % 2 == 0 {
        return Err(Error::InvalidParameter(format!("patch size {patch} must be odd")));
    }
    if patch > height.min(width) {
        return Err(Error::InvalidParameter(format!("patch size {patch} exceeds the {height}x{width} image")));
    }
    Ok(())
}

fn fill_patches(out: &mut DMatrix<f64>, row0: usize, image: &[f64], h: usize, w: usize, c: usize, p: usize) {
    let r = (p / 2) as isize;
    for y in 0..h {
        for x in 0..w {
            let row = row0 + y * w + x;
            let mut col = 0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    let inside = yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w;
                    for ch in 0..c {
                        if inside {
                            out[(row, col)] = image[(yy as usize * w + xx as usize) * c + ch];
                        }
                        col += 1;
                    }
                }
            }
        }
    }
}

/// Patches of several images stacked so that row `b * T + t` is position
/// `t` of the `b`-th listed image.
pub fn stack_patches(set: &ImageSet, indices: &[usize], patch: usize) -> Result<DMatrix<f64>> {
    check_patch(set.height, set.width, patch)?;
    let t = set.positions();
    let mut out = DMatrix::zeros(indices.len() * t, patch * patch * set.channels);
    for (b, &i) in indices.iter().enumerate() {
        fill_patches(&mut out, b * t, set.image(i), set.height, set.width, set.channels, patch);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchNetConfig {
    pub patch_size: usize,
    pub layer_widths: Vec<usize>,
    pub n_classes: usize,
    /// Initial value of the trained output scale.
    pub alpha: f64,
    pub bn_epsilon: f64,
    /// Initial diagonal of the final affine map.
    pub output_gain: f64,
    pub seed: u64,
}

impl Default for PatchNetConfig {
    fn default() -> Self {
        Self {
            patch_size: 1,
            layer_widths: vec![32, 32],
            n_classes: 10,
            alpha: 1.0,
            bn_epsilon: 1e-5,
            output_gain: 100.0,
            seed: 0,
        }
    }
}

impl PatchNetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.into()));
        if self.patch_size == 0 || self.patch_size % 2 == 0 {
            return bad("patch_size must be odd");
        }
        if self.layer_widths.is_empty() || self.layer_widths.contains(&0) {
            return bad("layer_widths must be nonempty and positive");
        }
        if self.n_classes < 2 {
            return bad("n_classes must be at least 2");
        }
        if !(self.bn_epsilon > 0.0) || !self.alpha.is_finite() || !self.output_gain.is_finite() {
            return bad("bn_epsilon must be positive, alpha and output_gain finite");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with the stored population statistics.
    Eval,
}

/// One Gaussian layer: unit `j` at position `t` outputs
/// `exp(-((A y)_j + b_j - anchor[t, j])^2)`, followed by batch norm per
/// `(t, j)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussLayer {
    /// `out x in`.
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
    /// `T x out`; the other per-position tables share this shape.
    pub anchors: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    pub beta: DMatrix<f64>,
    pub running_mean: DMatrix<f64>,
    pub running_var: DMatrix<f64>,
}

impl GaussLayer {
    fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    fn trainable_len(&self) -> usize {
        self.weight.len() + self.bias.len() + 3 * self.anchors.len()
    }

    fn trainable_mut(&mut self) -> [&mut [f64]; 5] {
        [
            self.weight.as_mut_slice(),
            self.bias.as_mut_slice(),
            self.anchors.as_mut_slice(),
            self.gamma.as_mut_slice(),
            self.beta.as_mut_slice(),
        ]
    }

    fn trainable(&self) -> [&[f64]; 5] {
        [
            self.weight.as_slice(),
            self.bias.as_slice(),
            self.anchors.as_slice(),
            self.gamma.as_slice(),
            self.beta.as_slice(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchNet {
    config: PatchNetConfig,
    positions: usize,
    channels: usize,
    layers: Vec<GaussLayer>,
    /// One `T x width` anchor table per class.
    final_anchors: Vec<DMatrix<f64>>,
    /// `classes x classes`.
    out_weight: DMatrix<f64>,
    out_bias: DVector<f64>,
    alpha: f64,
}

struct LayerCache {
    input: DMatrix<f64>,
    resid: DMatrix<f64>,
    act: DMatrix<f64>,
    xhat: DMatrix<f64>,
    inv_std: DMatrix<f64>,
}

/// Intermediate values of one forward pass.
pub struct NetCache {
    mode: BnMode,
    batch: usize,
    layers: Vec<LayerCache>,
    features: DMatrix<f64>,
    /// `B x classes`, the exponentials before the final affine map.
    gauss: DMatrix<f64>,
    pre_alpha: DMatrix<f64>,
}

impl NetCache {
    /// Pre-normalization activations of each layer, `(B T) x width`.
    pub fn activations(&self) -> impl Iterator<Item = &DMatrix<f64>> {
        self.layers.iter().map(|l| &l.act)
    }

    /// Output of the last Gaussian layer, row `b * T + t`.
    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn gauss(&self) -> &DMatrix<f64> {
        &self.gauss
    }
}

impl PatchNet {
    /// Glorot-uniform affine maps, zero anchors, unit batch-norm scale except
    /// on the last layer, where it is `1/sqrt(width)` so that the final
    /// exponent starts near one. The final affine map starts as
    /// `output_gain * I`.
    pub fn new(config: &PatchNetConfig, height: usize, width: usize, channels: usize) -> Result<Self> {
        config.validate()?;
        check_patch(height, width, config.patch_size)?;
        let positions = height * width;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut dims = vec![config.patch_size * config.patch_size * channels];
        dims.extend_from_slice(&config.layer_widths);
        let last = config.layer_widths.len() - 1;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let limit = (6.0 / (w[0] + w[1]) as f64).sqrt();
                let scale = if i == last { 1.0 / (w[1] as f64).sqrt() } else { 1.0 };
                GaussLayer {
                    weight: DMatrix::from_fn(w[1], w[0], |_, _| rng.random_range(-limit..limit)),
                    bias: DVector::zeros(w[1]),
                    anchors: DMatrix::zeros(positions, w[1]),
                    gamma: DMatrix::from_element(positions, w[1], scale),
                    beta: DMatrix::zeros(positions, w[1]),
                    running_mean: DMatrix::zeros(positions, w[1]),
                    running_var: DMatrix::from_element(positions, w[1], 1.0),
                }
            })
            .collect();
        let k = config.n_classes;
        let wl = config.layer_widths[last];
        Ok(Self {
            config: config.clone(),
            positions,
            channels,
            layers,
            final_anchors: vec![DMatrix::zeros(positions, wl); k],
            out_weight: DMatrix::identity(k, k) * config.output_gain,
            out_bias: DVector::zeros(k),
            alpha: config.alpha,
        })
    }

    pub fn config(&self) -> &PatchNetConfig {
        &self.config
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn layers(&self) -> &[GaussLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [GaussLayer] {
        &mut self.layers
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(GaussLayer::trainable_len).sum::<usize>()
            + self.final_anchors.iter().map(|a| a.len()).sum::<usize>()
            + self.out_weight.len()
            + self.out_bias.len()
            + 1
    }

    /// Trainable parameters flattened in a fixed order (batch-norm running
    /// statistics are not included).
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            for s in l.trainable() {
                out.extend_from_slice(s);
            }
        }
        for a in &self.final_anchors {
            out.extend_from_slice(a.as_slice());
        }
        out.extend_from_slice(self.out_weight.as_slice());
        out.extend_from_slice(self.out_bias.as_slice());
        out.push(self.alpha);
        out
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.param_count() {
            return Err(Error::Shape(format!("expected {} parameters, got {}", self.param_count(), p.len())));
        }
        let mut at = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&p[at..at + dst.len()]);
            at += dst.len();
        };
        for l in &mut self.layers {
            for s in l.trainable_mut() {
                take(s);
            }
        }
        for a in &mut self.final_anchors {
            take(a.as_mut_slice());
        }
        take(self.out_weight.as_mut_slice());
        take(self.out_bias.as_mut_slice());
        self.alpha = p[p.len() - 1];
        Ok(())
    }

    fn check_input(&self, patches: &DMatrix<f64>) -> Result<usize> {
        let width = self.layers[0].weight.ncols();
        if patches.ncols() != width {
            return Err(Error::DimensionMismatch { expected: width, found: patches.ncols() });
        }
        if patches.nrows() == 0 || patches.nrows() % self.positions != 0 {
            return Err(Error::Shape(format!(
                "{} patch rows are not a positive multiple of {} positions",
                patches.nrows(),
                self.positions
            )));
        }
        Ok(patches.nrows() / self.positions)
    }

    /// Class scores (`B x classes`) for stacked patches, see [`stack_patches`].
    pub fn forward(&self, patches: &DMatrix<f64>, mode: BnMode) -> Result<DMatrix<f64>> {
        Ok(self.forward_cached(patches, mode)?.0)
    }

    pub fn forward_cached(&self, patches: &DMatrix<f64>, mode: BnMode) -> Result<(DMatrix<f64>, NetCache)> {
        let batch = self.check_input(patches)?;
        let t_len = self.positions;
        let rows = batch * t_len;
        let eps = self.config.bn_epsilon;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut y = patches.clone();
        for l in &self.layers {
            let out = l.out_dim();
            let mut resid = &y * l.weight.transpose();
            for j in 0..out {
                let b = l.bias[j];
                let anchor = col(&l.anchors, j);
                for blk in col_mut(&mut resid, j).chunks_exact_mut(t_len) {
                    for (r, a) in blk.iter_mut().zip(anchor) {
                        *r += b - a;
                    }
                }
            }
            let act = resid.map(|r| (-r * r).exp());
            let (mean, var) = match mode {
                BnMode::Train => batch_stats(&act, t_len),
                BnMode::Eval => (l.running_mean.clone(), l.running_var.clone()),
            };
            let inv_std = var.map(|v| 1.0 / (v + eps).sqrt());
            let mut xhat = DMatrix::zeros(rows, out);
            let mut next = DMatrix::zeros(rows, out);
            for j in 0..out {
                let (m, inv) = (col(&mean, j), col(&inv_std, j));
                let (g, be) = (col(&l.gamma, j), col(&l.beta, j));
                let a = col(&act, j);
                let xh = col_mut(&mut xhat, j);
                for (xb, ab) in xh.chunks_exact_mut(t_len).zip(a.chunks_exact(t_len)) {
                    for t in 0..t_len {
                        xb[t] = (ab[t] - m[t]) * inv[t];
                    }
                }
                let xh = col(&xhat, j);
                for (nb, xb) in col_mut(&mut next, j).chunks_exact_mut(t_len).zip(xh.chunks_exact(t_len)) {
                    for t in 0..t_len {
                        nb[t] = g[t] * xb[t] + be[t];
                    }
                }
            }
            caches.push(LayerCache { input: y, resid, act, xhat, inv_std });
            y = next;
        }
        let k = self.config.n_classes;
        let mut dist = DMatrix::<f64>::zeros(batch, k);
        for (c, anchor) in self.final_anchors.iter().enumerate() {
            for j in 0..y.ncols() {
                let an = col(anchor, j);
                for (b, yb) in col(&y, j).chunks_exact(t_len).enumerate() {
                    dist[(b, c)] += yb.iter().zip(an).map(|(u, v)| (u - v) * (u - v)).sum::<f64>();
                }
            }
        }
        let gauss = dist.map(|d| (-d / t_len as f64).exp());
        let mut pre_alpha = &gauss * self.out_weight.transpose();
        for (j, bias) in self.out_bias.iter().enumerate() {
            pre_alpha.column_mut(j).add_scalar_mut(*bias);
        }
        let scores = &pre_alpha * self.alpha;
        Ok((scores, NetCache { mode, batch, layers: caches, features: y, gauss, pre_alpha }))
    }

    /// Gradient of `sum(grad_scores .* scores)` with respect to
    /// [`params`](Self::params). In `Train` mode the batch statistics are
    /// differentiated through.
    pub fn backward(&self, cache: &NetCache, grad_scores: &DMatrix<f64>) -> Vec<f64> {
        let t_len = self.positions;
        let batch = cache.batch;
        let inv_t = 1.0 / t_len as f64;
        let d_alpha = grad_scores.dot(&cache.pre_alpha);
        let d_pre = grad_scores * self.alpha;
        let d_out_weight = d_pre.transpose() * &cache.gauss;
        let d_out_bias = DVector::from_iterator(d_pre.ncols(), d_pre.column_iter().map(|c| c.sum()));
        let d_gauss = &d_pre * &self.out_weight;
        // gauss = exp(-dist / T), dist = sum_{t,j} (y - anchor)^2
        let d_dist = d_gauss.component_mul(&cache.gauss) * (-inv_t);
        let y = &cache.features;
        let mut dy = DMatrix::zeros(y.nrows(), y.ncols());
        let mut d_final = Vec::with_capacity(self.final_anchors.len());
        for (c, anchor) in self.final_anchors.iter().enumerate() {
            let mut da = DMatrix::zeros(t_len, anchor.ncols());
            for j in 0..y.ncols() {
                let an = col(anchor, j);
                let yj = col(y, j);
                let dyj = col_mut(&mut dy, j);
                let daj = col_mut(&mut da, j);
                for b in 0..batch {
                    let g = 2.0 * d_dist[(b, c)];
                    let range = b * t_len..(b + 1) * t_len;
                    for ((dyv, dav), (yv, av)) in dyj[range.clone()].iter_mut().zip(daj.iter_mut()).zip(yj[range].iter().zip(an)) {
                        let diff = g * (yv - av);
                        *dyv += diff;
                        *dav -= diff;
                    }
                }
            }
            d_final.push(da);
        }

        let mut layer_grads = Vec::with_capacity(self.layers.len());
        for (li, (l, lc)) in self.layers.iter().zip(&cache.layers).enumerate().rev() {
            let out = l.out_dim();
            let mut d_gamma = DMatrix::zeros(t_len, out);
            let mut d_beta = DMatrix::zeros(t_len, out);
            let mut d_resid = DMatrix::zeros(dy.nrows(), out);
            let n = batch as f64;
            for j in 0..out {
                let (dyj, xhj) = (col(&dy, j), col(&lc.xhat, j));
                let (sg, sgx) = (col_mut(&mut d_beta, j), col_mut(&mut d_gamma, j));
                for (db, xb) in dyj.chunks_exact(t_len).zip(xhj.chunks_exact(t_len)) {
                    for t in 0..t_len {
                        sg[t] += db[t];
                        sgx[t] += db[t] * xb[t];
                    }
                }
                let (sg, sgx) = (col(&d_beta, j), col(&d_gamma, j));
                let (gam, inv) = (col(&l.gamma, j), col(&lc.inv_std, j));
                let (actj, rj) = (col(&lc.act, j), col(&lc.resid, j));
                let drj = col_mut(&mut d_resid, j);
                for b in 0..batch {
                    let range = b * t_len..(b + 1) * t_len;
                    let (db, xb) = (&dyj[range.clone()], &xhj[range.clone()]);
                    let (ab, rb) = (&actj[range.clone()], &rj[range.clone()]);
                    let out_b = &mut drj[range];
                    for t in 0..t_len {
                        let d_act = match cache.mode {
                            BnMode::Eval => db[t] * gam[t] * inv[t],
                            BnMode::Train => inv[t] * gam[t] * (db[t] - sg[t] / n - xb[t] * sgx[t] / n),
                        };
                        // act = exp(-r^2)
                        out_b[t] = -2.0 * rb[t] * ab[t] * d_act;
                    }
                }
            }
            let mut d_anchor = DMatrix::zeros(t_len, out);
            for j in 0..out {
                let dst = col_mut(&mut d_anchor, j);
                for blk in col(&d_resid, j).chunks_exact(t_len) {
                    for (d, g) in dst.iter_mut().zip(blk) {
                        *d -= g;
                    }
                }
            }
            let d_weight = d_resid.transpose() * &lc.input;
            let d_bias = DVector::from_iterator(out, d_resid.column_iter().map(|c| c.sum()));
            if li > 0 {
                dy = &d_resid * &l.weight;
            }
            layer_grads.push([
                d_weight.as_slice().to_vec(),
                d_bias.as_slice().to_vec(),
                d_anchor.as_slice().to_vec(),
                d_gamma.as_slice().to_vec(),
                d_beta.as_slice().to_vec(),
            ]);
        }
        layer_grads.reverse();

        let mut grad = Vec::with_capacity(self.param_count());
        for parts in layer_grads {
            for p in parts {
                grad.extend_from_slice(&p);
            }
        }
        for a in d_final {
            grad.extend_from_slice(a.as_slice());
        }
        grad.extend_from_slice(d_out_weight.as_slice());
        grad.extend_from_slice(d_out_bias.as_slice());
        grad.push(d_alpha);
        grad
    }

    /// Mean softmax cross-entropy of the scores, its gradient and the
    /// scores themselves.
    pub fn loss_and_grad(&self, patches: &DMatrix<f64>, labels: &[u8], mode: BnMode) -> Result<(f64, Vec<f64>, DMatrix<f64>)> {
        let (scores, cache) = self.forward_cached(patches, mode)?;
        if labels.len() != scores.nrows() {
            return Err(Error::DimensionMismatch { expected: scores.nrows(), found: labels.len() });
        }
        let (loss, d) = cross_entropy(&scores, labels)?;
        let grad = self.backward(&cache, &d);
        Ok((loss, grad, scores))
    }

    /// Replaces the running statistics with the mean of the per-batch
    /// statistics over `batches`, parameters held fixed.
    pub fn calibrate(&mut self, set: &ImageSet, batches: &[Vec<usize>]) -> Result<()> {
        if batches.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let t_len = self.positions;
        let mut sums: Vec<(DMatrix<f64>, DMatrix<f64>)> = self
            .layers
            .iter()
            .map(|l| (DMatrix::zeros(t_len, l.out_dim()), DMatrix::zeros(t_len, l.out_dim())))
            .collect();
        for idx in batches {
            let x = stack_patches(set, idx, self.config.patch_size)?;
            let (_, cache) = self.forward_cached(&x, BnMode::Train)?;
            for (s, lc) in sums.iter_mut().zip(&cache.layers) {
                let (m, v) = batch_stats(&lc.act, t_len);
                s.0 += m;
                s.1 += v;
            }
        }
        let n = batches.len() as f64;
        for (l, (m, v)) in self.layers.iter_mut().zip(sums) {
            l.running_mean = m / n;
            l.running_var = v / n;
        }
        Ok(())
    }

    /// Predicted classes in eval mode, `chunk` images at a time.
    pub fn predict(&self, set: &ImageSet, chunk: usize) -> Result<Vec<usize>> {
        let all: Vec<usize> = (0..set.len()).collect();
        let mut out = Vec::with_capacity(set.len());
        for idx in all.chunks(chunk.max(1)) {
            let x = stack_patches(set, idx, self.config.patch_size)?;
            out.extend(argmax_rows(&self.forward(&x, BnMode::Eval)?));
        }
        Ok(out)
    }

    pub fn accuracy(&self, set: &ImageSet) -> Result<f64> {
        if set.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if set.channels != self.channels || set.positions() != self.positions {
            return Err(Error::Shape("image set does not match the network input".into()));
        }
        let pred = self.predict(set, 250)?;
        let hits = pred.iter().zip(&set.labels).filter(|(p, l)| **p == **l as usize).count();
        Ok(hits as f64 / set.len() as f64)
    }
}

fn col(m: &DMatrix<f64>, j: usize) -> &[f64] {
    let n = m.nrows();
    &m.as_slice()[j * n..(j + 1) * n]
}

fn col_mut(m: &mut DMatrix<f64>, j: usize) -> &mut [f64] {
    let n = m.nrows();
    &mut m.as_mut_slice()[j * n..(j + 1) * n]
}

/// Per-`(t, j)` batch mean and biased variance of a `(B T) x width` matrix.
fn batch_stats(act: &DMatrix<f64>, t_len: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let w = act.ncols();
    let n = (act.nrows() / t_len) as f64;
    let mut mean = DMatrix::zeros(t_len, w);
    let mut var = DMatrix::zeros(t_len, w);
    for j in 0..w {
        let a = col(act, j);
        let m = col_mut(&mut mean, j);
        for blk in a.chunks_exact(t_len) {
            for (s, v) in m.iter_mut().zip(blk) {
                *s += v;
            }
        }
        m.iter_mut().for_each(|s| *s /= n);
        let m = col(&mean, j).to_vec();
        let q = col_mut(&mut var, j);
        for blk in a.chunks_exact(t_len) {
            for ((s, v), mu) in q.iter_mut().zip(blk).zip(&m) {
                *s += (v - mu) * (v - mu);
            }
        }
        q.iter_mut().for_each(|s| *s /= n);
    }
    (mean, var)
}

/// First index of each row's maximum.
pub fn argmax_rows(scores: &DMatrix<f64>) -> Vec<usize> {
    scores
        .row_iter()
        .map(|r| {
            let mut best = 0;
            for (j, v) in r.iter().enumerate() {
                if *v > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Mean softmax cross-entropy and its gradient with respect to the scores.
pub fn cross_entropy(scores: &DMatrix<f64>, labels: &[u8]) -> Result<(f64, DMatrix<f64>)> {
    let (b, k) = scores.shape();
    if labels.iter().any(|&l| l as usize >= k) {
        return Err(Error::InvalidParameter(format!("label out of range for {k} classes")));
    }
    let mut grad = DMatrix::zeros(b, k);
    let mut loss = 0.0;
    for (i, &lab) in labels.iter().enumerate() {
        let row = scores.row(i);
        let m = row.max();
        let z: f64 = row.iter().map(|s| (s - m).exp()).sum();
        loss += z.ln() + m - row[lab as usize];
        for j in 0..k {
            grad[(i, j)] = (row[j] - m).exp() / z / b as f64;
        }
        grad[(i, lab as usize)] -= 1.0 / b as f64;
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross-entropy".into()));
    }
    Ok((loss / b as f64, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Decays per epoch.
    pub learning_rate: LrSchedule,
    pub optimizer: OptimizerKind,
    /// Training images used to re-estimate the batch-norm statistics after
    /// each epoch.
    pub calibration_images: usize,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 64,
            learning_rate: LrSchedule { initial: 3e-3, decay_every: 1, decay_factor: 0.5 },
            optimizer: OptimizerKind::default(),
            calibration_images: 2048,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Accuracy of the batch-mode predictions made while training.
    pub running_train_acc: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone)]
pub struct ClassifierReport {
    pub model: PatchNet,
    pub epochs: Vec<EpochStats>,
    pub train_acc: f64,
    pub test_acc: f64,
}

/// Minimizes the cross-entropy with shuffled mini-batches (batch norm in
/// train mode), re-estimating the population statistics after each epoch.
pub fn train_classifier(
    train: &ImageSet,
    test: &ImageSet,
    cfg: &PatchNetConfig,
    tc: &ClassifierTrainConfig,
) -> Result<ClassifierReport> {
    tc.learning_rate.validate()?;
    tc.optimizer.validate()?;
    if tc.batch_size < 2 {
        return Err(Error::InvalidParameter("batch_size must be at least 2 for batch statistics".into()));
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if (train.height, train.width, train.channels) != (test.height, test.width, test.channels) {
        return Err(Error::Shape("train and test images differ in shape".into()));
    }
    if train.labels.iter().chain(&test.labels).any(|&l| l as usize >= cfg.n_classes) {
        return Err(Error::InvalidParameter(format!("labels must be below {}", cfg.n_classes)));
    }
    let mut net = PatchNet::new(cfg, train.height, train.width, train.channels)?;
    let mut opt = OptimizerState::new(tc.optimizer, net.param_count());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let lr = tc.learning_rate.at(epoch);
        let (mut loss_sum, mut hits, mut seen, mut n_batches) = (0.0, 0usize, 0usize, 0usize);
        let batches: Vec<Vec<usize>> = order
            .chunks(tc.batch_size)
            .filter(|c| c.len() >= 2)
            .map(<[usize]>::to_vec)
            .collect();
        for idx in &batches {
            let x = stack_patches(train, idx, cfg.patch_size)?;
            let labels: Vec<u8> = idx.iter().map(|&i| train.labels[i]).collect();
            let (loss, grad, scores) = net.loss_and_grad(&x, &labels, BnMode::Train)?;
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!("gradient in epoch {epoch}")));
            }
            let mut p = net.params();
            opt.step(&mut p, &grad, lr);
            net.set_params(&p)?;
            loss_sum += loss;
            n_batches += 1;
            hits += argmax_rows(&scores).iter().zip(&labels).filter(|(p, l)| **p == **l as usize).count();
            seen += idx.len();
        }
        let cal: Vec<Vec<usize>> = batches
            .iter()
            .scan(0usize, |used, b| {
                let take = *used < tc.calibration_images.max(1);
                *used += b.len();
                take.then(|| b.clone())
            })
            .collect();
        net.calibrate(train, &cal)?;
        epochs.push(EpochStats {
            epoch,
            mean_loss: loss_sum / n_batches.max(1) as f64,
            running_train_acc: hits as f64 / seen.max(1) as f64,
            test_acc: net.accuracy(test)?,
        });
    }
    let test_acc = net.accuracy(test)?;
    let train_acc = net.accuracy(train)?;
    Ok(ClassifierReport { model: net, epochs, train_acc, test_acc })
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PatchCheckpoint {
    version: u32,
    net: PatchNet,
}

impl PatchNet {
    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = PatchCheckpoint { version: CHECKPOINT_VERSION, net: self.clone() };
        std::fs::write(path, serde_json::to_string(&ck)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: PatchCheckpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", ck.version)));
        }
        Ok(ck.net)
    }
}
