//! Three-layer MLP that maps CNN feature maps into the text embedding space,
//! trained with a triplet hinge loss against category text embeddings.
//!
//! Forward pass, with `x` the flattened feature map:
//!
//! ```text
//! h1 = relu(x W1 + b1)
//! h2 = relu(h1 W2 + b2)
//! y  = h2 W3 + b3
//! u  = y / |y|
//! ```
//!
//! Gradients are derived by hand; there is no autodiff underneath.

use std::path::Path;
use std::sync::Arc;

use image::RgbImage;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{Embedding, Encoder, FeatureMap, RegionKey, EMBED_DIM, FEATURE_SHAPE};
use crate::error::{Error, Result};
use crate::ovt::Tensor;
use crate::prompts::CategoryTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpDims {
    pub input: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub output: usize,
}

impl Default for MlpDims {
    fn default() -> Self {
        MlpDims {
            input: FEATURE_SHAPE.iter().product(),
            hidden1: 2048,
            hidden2: 1024,
            output: EMBED_DIM,
        }
    }
}

impl MlpDims {
    fn widths(&self) -> [(usize, usize); 3] {
        [(self.input, self.hidden1), (self.hidden1, self.hidden2), (self.hidden2, self.output)]
    }
}

/// One fully connected layer; `weight` is fan_in x fan_out so that `out = x W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Layer {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Layer { weight: DMatrix::zeros(fan_in, fan_out), bias: DVector::zeros(fan_out) }
    }

    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        self.weight.tr_mul(x) + &self.bias
    }
}

/// MLP weights. Also used as the container for gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: [Layer; 3],
}

impl MlpParams {
    /// Xavier-uniform weights in +-sqrt(6 / (fan_in + fan_out)), zero biases.
    pub fn init(dims: MlpDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims.widths().map(|(fan_in, fan_out)| {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            Layer {
                weight: DMatrix::from_fn(fan_in, fan_out, |_, _| rng.random_range(-bound..=bound)),
                bias: DVector::zeros(fan_out),
            }
        });
        MlpParams { layers }
    }

    pub fn zeros(dims: MlpDims) -> Self {
        MlpParams { layers: dims.widths().map(|(i, o)| Layer::zeros(i, o)) }
    }

    pub fn dims(&self) -> MlpDims {
        let [l1, l2, l3] = &self.layers;
        MlpDims {
            input: l1.weight.nrows(),
            hidden1: l1.weight.ncols(),
            hidden2: l2.weight.ncols(),
            output: l3.weight.ncols(),
        }
    }

    /// Flat views of every parameter tensor, in (W1, b1, W2, b2, W3, b3) order.
    pub fn slices(&self) -> [&[f64]; 6] {
        let [l1, l2, l3] = &self.layers;
        [
            l1.weight.as_slice(),
            l1.bias.as_slice(),
            l2.weight.as_slice(),
            l2.bias.as_slice(),
            l3.weight.as_slice(),
            l3.bias.as_slice(),
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 6] {
        let [l1, l2, l3] = &mut self.layers;
        [
            l1.weight.as_mut_slice(),
            l1.bias.as_mut_slice(),
            l2.weight.as_mut_slice(),
            l2.bias.as_mut_slice(),
            l3.weight.as_mut_slice(),
            l3.bias.as_mut_slice(),
        ]
    }

    #[cfg(test)]
    fn add_scaled(&mut self, other: &MlpParams, scale: f64) {
        for (dst, src) in self.slices_mut().into_iter().zip(other.slices()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    fn scale(&mut self, factor: f64) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|&v| v == 0.0))
    }

    fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

struct Trace {
    x: DVector<f64>,
    z1: DVector<f64>,
    h1: DVector<f64>,
    z2: DVector<f64>,
    h2: DVector<f64>,
    y_norm: f64,
    u: DVector<f64>,
}

fn relu(v: &DVector<f64>) -> DVector<f64> {
    v.map(|x| x.max(0.0))
}

impl MlpParams {
    fn trace(&self, x: DVector<f64>) -> Result<Trace> {
        let [l1, l2, l3] = &self.layers;
        if x.len() != l1.weight.nrows() {
            return Err(Error::invalid(format!(
                "feature length {} does not match MLP input {}",
                x.len(),
                l1.weight.nrows()
            )));
        }
        let z1 = l1.apply(&x);
        let h1 = relu(&z1);
        let z2 = l2.apply(&h1);
        let h2 = relu(&z2);
        let y = l3.apply(&h2);
        let y_norm = y.norm();
        if !(y_norm >= 1e-12) {
            return Err(Error::DegenerateOutput { norm: y_norm });
        }
        let u = &y / y_norm;
        Ok(Trace { x, z1, h1, z2, h2, y_norm, u })
    }

    /// Unit-norm output in f64, for callers that keep full precision.
    pub fn forward(&self, features: &[f64]) -> Result<Vec<f64>> {
        Ok(self.trace(DVector::from_column_slice(features))?.u.as_slice().to_vec())
    }
}

fn features_to_vector(features: &FeatureMap) -> DVector<f64> {
    DVector::from_iterator(features.flat_len(), features.values().iter().map(|&v| v as f64))
}

pub fn mlp_forward(params: &MlpParams, features: &FeatureMap) -> Result<Embedding> {
    let u = params.trace(features_to_vector(features))?.u;
    Ok(Embedding::normalized(u.as_slice(), 1e-12).expect("trace output is unit norm"))
}

/// Distance used inside the triplet loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Distance {
    #[default]
    SquaredEuclidean,
    Euclidean,
    CosineDistance,
}

impl Distance {
    pub fn eval(self, a: &[f64], b: &[f64]) -> f64 {
        assert_eq!(a.len(), b.len(), "distance between vectors of different dims");
        match self {
            Distance::SquaredEuclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
            Distance::Euclidean => Distance::SquaredEuclidean.eval(a, b).sqrt(),
            Distance::CosineDistance => {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                1.0 - dot / (na * nb)
            }
        }
    }

    /// Gradient of `eval(a, b)` with respect to `a`.
    fn grad_first(self, a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
        match self {
            Distance::SquaredEuclidean => (a - b) * 2.0,
            Distance::Euclidean => {
                let diff = a - b;
                let n = diff.norm();
                // Subgradient 0 where the distance is not differentiable.
                if n == 0.0 {
                    DVector::zeros(a.len())
                } else {
                    diff / n
                }
            }
            Distance::CosineDistance => {
                let (na, nb) = (a.norm(), b.norm());
                let cos = a.dot(b) / (na * nb);
                -(b / (na * nb) - a * (cos / (na * na)))
            }
        }
    }
}

/// `max(0, d(a, p) - d(a, n) + margin)`.
pub fn triplet_loss(anchor: &[f64], positive: &[f64], negative: &[f64], margin: f64, distance: Distance) -> f64 {
    (distance.eval(anchor, positive) - distance.eval(anchor, negative) + margin).max(0.0)
}

/// One training triplet: anchor features and the two text embeddings.
#[derive(Debug, Clone)]
pub struct Triplet<'a> {
    pub anchor: &'a [f64],
    pub positive: &'a [f64],
    pub negative: &'a [f64],
}

/// Triplet loss of the MLP output and its exact gradient for every parameter.
/// The hinge's flat side, including the kink itself, yields all-zero gradients.
pub fn loss_gradients(
    params: &MlpParams,
    triplet: &Triplet<'_>,
    margin: f64,
    distance: Distance,
) -> Result<(f64, MlpParams)> {
    let mut grads = MlpParams::zeros(params.dims());
    let loss = accumulate_gradients(params, triplet, margin, distance, &mut grads, 1.0)?;
    Ok((loss, grads))
}

fn accumulate_gradients(
    params: &MlpParams,
    triplet: &Triplet<'_>,
    margin: f64,
    distance: Distance,
    grads: &mut MlpParams,
    weight: f64,
) -> Result<f64> {
    let t = params.trace(DVector::from_column_slice(triplet.anchor))?;
    let p = DVector::from_column_slice(triplet.positive);
    let n = DVector::from_column_slice(triplet.negative);
    if p.len() != t.u.len() || n.len() != t.u.len() {
        return Err(Error::invalid(format!(
            "text embedding dim {} does not match MLP output {}",
            p.len(),
            t.u.len()
        )));
    }
    let u = t.u.as_slice();
    let slack = distance.eval(u, triplet.positive) - distance.eval(u, triplet.negative) + margin;
    if !(slack > 0.0) {
        return Ok(slack.max(0.0));
    }

    let g_u = distance.grad_first(&t.u, &p) - distance.grad_first(&t.u, &n);
    // Through u = y / |y|.
    let g_y = (&g_u - &t.u * t.u.dot(&g_u)) / t.y_norm;

    let [_, l2, l3] = &params.layers;
    let [g1, g2, g3] = &mut grads.layers;

    g3.weight.ger(weight, &t.h2, &g_y, 1.0);
    g3.bias.axpy(weight, &g_y, 1.0);
    let g_z2 = (&l3.weight * &g_y).zip_map(&t.z2, |g, z| if z > 0.0 { g } else { 0.0 });

    g2.weight.ger(weight, &t.h1, &g_z2, 1.0);
    g2.bias.axpy(weight, &g_z2, 1.0);
    let g_z1 = (&l2.weight * &g_z2).zip_map(&t.z1, |g, z| if z > 0.0 { g } else { 0.0 });

    g1.weight.ger(weight, &t.x, &g_z1, 1.0);
    g1.bias.axpy(weight, &g_z1, 1.0);
    Ok(slack)
}

fn default_margin() -> f64 {
    0.2
}
fn default_lr() -> f64 {
    1e-4
}
fn default_batch() -> usize {
    64
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_margin")]
    pub margin: f64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub distance: Distance,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            margin: default_margin(),
            learning_rate: default_lr(),
            batch_size: default_batch(),
            epochs: 200,
            seed: 0,
            distance: Distance::default(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size < 1 {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::invalid(format!("margin must be >= 0, got {}", self.margin)));
        }
        Ok(())
    }
}

/// A labelled feature map for training.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub features: FeatureMap,
    pub category: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: MlpParams,
    /// Mean triplet loss of each epoch, measured before each batch's update.
    pub epoch_losses: Vec<f64>,
}

struct Adam {
    m: MlpParams,
    v: MlpParams,
    step: i32,
}

impl Adam {
    fn new(dims: MlpDims) -> Self {
        Adam { m: MlpParams::zeros(dims), v: MlpParams::zeros(dims), step: 0 }
    }

    fn update(&mut self, params: &mut MlpParams, grads: &MlpParams, cfg: &TrainConfig) {
        self.step += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.step);
        let c2 = 1.0 - cfg.beta2.powi(self.step);
        let tensors = params
            .slices_mut()
            .into_iter()
            .zip(self.m.slices_mut())
            .zip(self.v.slices_mut())
            .zip(grads.slices());
        for (((p, m), v), g) in tensors {
            for i in 0..p.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
    }
}

/// Trains with one sampled negative per sample per epoch.
pub fn train(
    params0: MlpParams,
    dataset: &[TrainSample],
    table: &CategoryTable,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_observed(params0, dataset, table, cfg, |_, _, _| {})
}

/// Like [`train`], calling `observe(epoch, params, mean_loss)` after each epoch (1-based).
pub fn train_observed(
    params0: MlpParams,
    dataset: &[TrainSample],
    table: &CategoryTable,
    cfg: &TrainConfig,
    mut observe: impl FnMut(usize, &MlpParams, f64),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("training dataset is empty"));
    }
    let n_cat = table.len();
    if n_cat < 2 {
        return Err(Error::invalid("training needs at least two categories to draw negatives"));
    }
    let dims = params0.dims();
    if table.dim() != dims.output {
        return Err(Error::invalid(format!(
            "text embedding dim {} does not match MLP output {}",
            table.dim(),
            dims.output
        )));
    }
    if let Some((i, s)) = dataset.iter().enumerate().find(|(_, s)| s.category >= n_cat) {
        return Err(Error::invalid(format!("sample {i} has category {} outside table of {n_cat}", s.category)));
    }
    let inputs: Vec<Vec<f64>> = dataset
        .iter()
        .map(|s| s.features.values().iter().map(|&v| v as f64).collect())
        .collect();
    if let Some(i) = inputs.iter().position(|x| x.len() != dims.input) {
        return Err(Error::invalid(format!(
            "sample {i} has {} features, MLP expects {}",
            inputs[i].len(),
            dims.input
        )));
    }
    let texts: Vec<Vec<f64>> = table.embeddings.iter().map(Embedding::to_f64).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = params0;
    let mut adam = Adam::new(dims);
    let mut grads = MlpParams::zeros(dims);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            grads.scale(0.0);
            let weight = 1.0 / chunk.len() as f64;
            let mut batch_loss = 0.0;
            for &i in chunk {
                let positive = dataset[i].category;
                let mut negative = rng.random_range(0..n_cat - 1);
                if negative >= positive {
                    negative += 1;
                }
                let triplet = Triplet { anchor: &inputs[i], positive: &texts[positive], negative: &texts[negative] };
                batch_loss += accumulate_gradients(&params, &triplet, cfg.margin, cfg.distance, &mut grads, weight)?;
            }
            if !batch_loss.is_finite() || !grads.is_finite() {
                return Err(Error::TrainingDiverged { epoch, batch, loss: batch_loss });
            }
            total += batch_loss;
            adam.update(&mut params, &grads, cfg);
        }
        let mean = total / dataset.len() as f64;
        epoch_losses.push(mean);
        observe(epoch, &params, mean);
    }
    Ok(TrainOutcome { params, epoch_losses })
}

/// Index of the closest category embedding by cosine similarity (lowest index on ties).
pub fn nearest_category(embedding: &[f64], table: &[Vec<f64>]) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (j, t) in table.iter().enumerate() {
        let s = 1.0 - Distance::CosineDistance.eval(embedding, t);
        if s > best.1 {
            best = (j, s);
        }
    }
    best.0
}

pub fn encode_image_mlp(params: &MlpParams, backend: &dyn Encoder, key: RegionKey, patch: &RgbImage) -> Result<Embedding> {
    mlp_forward(params, &backend.extract_features(key, patch)?)
}

/// Image encoder that runs CNN features from `backend` through a trained MLP.
pub struct MlpImageEncoder {
    params: Arc<MlpParams>,
    backend: Arc<dyn Encoder>,
}

impl MlpImageEncoder {
    pub fn new(params: Arc<MlpParams>, backend: Arc<dyn Encoder>) -> Self {
        MlpImageEncoder { params, backend }
    }
}

impl Encoder for MlpImageEncoder {
    fn encode_text(&self, prompt: &str) -> Result<Embedding> {
        self.backend.encode_text(prompt)
    }

    fn encode_image(&self, key: RegionKey, patch: &RgbImage) -> Result<Embedding> {
        encode_image_mlp(&self.params, self.backend.as_ref(), key, patch)
    }

    fn extract_features(&self, key: RegionKey, patch: &RgbImage) -> Result<FeatureMap> {
        self.backend.extract_features(key, patch)
    }

    fn preprocessing(&self) -> Option<String> {
        self.backend.preprocessing().map(|p| format!("mlp over {p}"))
    }
}

/// `mlp.json` next to the parameter tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub dims: MlpDims,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<TrainConfig>,
    pub epoch: usize,
    #[serde(default)]
    pub epoch_losses: Vec<f64>,
}

const PARAM_FILES: [&str; 6] = ["w1.ovt", "b1.ovt", "w2.ovt", "b2.ovt", "w3.ovt", "b3.ovt"];

/// Writes the parameters as f32 OVT tensors plus `mlp.json`.
pub fn save_checkpoint(dir: &Path, params: &MlpParams, meta: &CheckpointMeta) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, layer) in params.layers.iter().enumerate() {
        let (r, c) = layer.weight.shape();
        // Row-major on disk: fan_in rows of fan_out values.
        let w: Vec<f32> = layer.weight.transpose().as_slice().iter().map(|&v| v as f32).collect();
        Tensor::f32(vec![r, c], w)?.save(dir.join(PARAM_FILES[2 * i]))?;
        let b: Vec<f32> = layer.bias.iter().map(|&v| v as f32).collect();
        Tensor::f32(vec![c], b)?.save(dir.join(PARAM_FILES[2 * i + 1]))?;
    }
    let path = dir.join("mlp.json");
    let text = serde_json::to_string_pretty(meta).expect("checkpoint meta serializes");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<(MlpParams, CheckpointMeta)> {
    let meta_path = dir.join("mlp.json");
    let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)
        .map_err(|e| Error::Parse { path: meta_path.clone(), message: e.to_string() })?;
    if meta.format_version != 1 {
        return Err(Error::Format { path: meta_path, message: format!("unsupported version {}", meta.format_version) });
    }
    let mut params = MlpParams::zeros(meta.dims);
    for (i, layer) in params.layers.iter_mut().enumerate() {
        let (r, c) = layer.weight.shape();
        let read = |name: &str, dims: Vec<usize>| -> Result<Vec<f32>> {
            let path = dir.join(name);
            let t = Tensor::load(&path)?;
            if t.dims != dims {
                return Err(Error::Format { path, message: format!("expected dims {dims:?}, found {:?}", t.dims) });
            }
            t.into_f32().ok_or_else(|| Error::Format { path: dir.join(name), message: "expected f32".into() })
        };
        let w = read(PARAM_FILES[2 * i], vec![r, c])?;
        layer.weight = DMatrix::from_row_iterator(r, c, w.into_iter().map(f64::from));
        layer.bias = DVector::from_iterator(c, read(PARAM_FILES[2 * i + 1], vec![c])?.into_iter().map(f64::from));
    }
    Ok((params, meta))
}

#[derive(Debug, Deserialize)]
struct ManifestItem {
    features: std::path::PathBuf,
    category: usize,
}

/// Reads a training manifest: JSON list of `{"features": path, "category": index}`.
/// Paths are relative to the manifest's directory.
pub fn load_training_manifest(path: &Path) -> Result<Vec<TrainSample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let items: Vec<ManifestItem> =
        serde_json::from_str(&text).map_err(|e| Error::Parse { path: path.to_path_buf(), message: e.to_string() })?;
    let root = path.parent().unwrap_or(Path::new("."));
    items
        .into_iter()
        .map(|item| {
            let fpath = root.join(&item.features);
            let t = Tensor::load(&fpath)?;
            let shape: [usize; 3] = t.dims.clone().try_into().map_err(|_| Error::Format {
                path: fpath.clone(),
                message: format!("feature tensor must be 3-D, got {:?}", t.dims),
            })?;
            let values = t
                .into_f32()
                .ok_or_else(|| Error::Format { path: fpath.clone(), message: "expected f32 payload".into() })?;
            Ok(TrainSample { features: FeatureMap::new(shape, values)?, category: item.category })
        })
        .collect()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::prompts::{vocabulary, CategorySpec};
    use rand_distr::StandardNormal;

    /// Loop-based forward pass, independent of the nalgebra path.
    pub(crate) fn naive_forward(params: &MlpParams, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for (li, layer) in params.layers.iter().enumerate() {
            let (fan_in, fan_out) = layer.weight.shape();
            let mut out = vec![0.0; fan_out];
            for (j, o) in out.iter_mut().enumerate() {
                let mut acc = layer.bias[j];
                for i in 0..fan_in {
                    acc += h[i] * layer.weight[(i, j)];
                }
                *o = if li < 2 { acc.max(0.0) } else { acc };
            }
            h = out;
        }
        let n = h.iter().map(|v| v * v).sum::<f64>().sqrt();
        h.iter().map(|v| v / n).collect()
    }

    fn small_dims() -> MlpDims {
        MlpDims { input: 6, hidden1: 4, hidden2: 3, output: 2 }
    }

    fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    fn unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        let v = gaussian(rng, n);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / norm).collect()
    }

    #[test]
    fn identity_network_closed_form() {
        let eye = DMatrix::<f64>::identity(2, 2);
        let layer = Layer { weight: eye, bias: DVector::zeros(2) };
        let params = MlpParams { layers: [layer.clone(), layer.clone(), layer] };
        let fm = FeatureMap::new([1, 1, 2], vec![3.0, 4.0]).unwrap();
        let out = mlp_forward(&params, &fm).unwrap();
        assert_eq!(out.values(), &[0.6, 0.8]);
    }

    #[test]
    fn zero_input_is_degenerate() {
        let mut params = MlpParams::init(small_dims(), 1);
        for l in params.layers.iter_mut() {
            l.bias.fill(0.0);
        }
        let fm = FeatureMap::new([1, 1, 6], vec![0.0; 6]).unwrap();
        assert!(matches!(mlp_forward(&params, &fm), Err(Error::DegenerateOutput { .. })));
    }

    #[test]
    fn input_length_mismatch_rejected() {
        let params = MlpParams::init(small_dims(), 1);
        let fm = FeatureMap::new([1, 1, 5], vec![1.0; 5]).unwrap();
        assert!(matches!(mlp_forward(&params, &fm), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn default_dims_give_unit_512_output() {
        let dims = MlpDims::default();
        assert_eq!((dims.input, dims.hidden1, dims.hidden2, dims.output), (62720, 2048, 1024, 512));
        let params = MlpParams::init(dims, 0);
        let enc = crate::encoders::MockEncoder::new(3);
        let key = RegionKey { image_id: 0, region_id: 0 };
        let patch = RgbImage::from_pixel(4, 4, image::Rgb([10, 20, 30]));
        let out = encode_image_mlp(&params, &enc, key, &patch).unwrap();
        assert_eq!(out.dim(), 512);
        assert!((out.norm() - 1.0).abs() < 1e-6);
        // Composition law.
        let manual = mlp_forward(&params, &enc.extract_features(key, &patch).unwrap()).unwrap();
        assert_eq!(out, manual);
    }

    #[test]
    fn forward_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = MlpParams::init(MlpDims { input: 9, hidden1: 32, hidden2: 24, output: 4 }, 2);
        let mut checked = 0;
        for _ in 0..40 {
            let x: Vec<f64> = gaussian(&mut rng, 9);
            // All-dead ReLU layers are legitimately degenerate.
            let Ok(ours) = params.forward(&x) else { continue };
            checked += 1;
            for (a, b) in ours.iter().zip(naive_forward(&params, &x)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert!(checked >= 30, "only {checked} non-degenerate inputs");
    }

    #[test]
    fn triplet_hinge_cases() {
        let d = Distance::Euclidean;
        assert_eq!(triplet_loss(&[0.0], &[0.2], &[0.9], 0.3, d), 0.0);
        assert!((triplet_loss(&[0.0], &[0.8], &[0.5], 0.2, d) - 0.5).abs() <= 4.0 * f64::EPSILON);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for dist in [Distance::SquaredEuclidean, Distance::Euclidean, Distance::CosineDistance] {
            let a = unit(&mut rng, 5);
            let p = unit(&mut rng, 5);
            assert_eq!(triplet_loss(&a, &p, &p, 0.37, dist), 0.37);
        }
    }

    #[test]
    fn inactive_hinge_gives_exact_zero_gradients() {
        let params = MlpParams::init(small_dims(), 4);
        let x = [0.3, 0.1, 0.9, 0.2, 0.5, 0.7];
        let u = params.forward(&x).unwrap();
        let neg: Vec<f64> = u.iter().map(|v| -v).collect();
        let t = Triplet { anchor: &x, positive: &u, negative: &neg };
        let (loss, grads) = loss_gradients(&params, &t, 0.2, Distance::SquaredEuclidean).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.is_zero());

        // Exactly on the kink: d(a,p) - d(a,n) + margin == 0.
        let t = Triplet { anchor: &x, positive: &u, negative: &u };
        let (loss, grads) = loss_gradients(&params, &t, 0.0, Distance::SquaredEuclidean).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.is_zero());
    }

    /// Max over entries of |analytic - numeric| / max(|analytic|, |numeric|, 1e-6).
    pub(crate) fn finite_difference_error(
        params: &MlpParams,
        triplet: &Triplet<'_>,
        margin: f64,
        distance: Distance,
    ) -> f64 {
        let (_, grads) = loss_gradients(params, triplet, margin, distance).unwrap();
        let loss_at = |p: &MlpParams| {
            let u = naive_forward(p, triplet.anchor);
            triplet_loss(&u, triplet.positive, triplet.negative, margin, distance)
        };
        let h = 1e-5;
        let mut worst = 0.0f64;
        for t in 0..6 {
            for k in 0..params.slices()[t].len() {
                let mut plus = params.clone();
                plus.slices_mut()[t][k] += h;
                let mut minus = params.clone();
                minus.slices_mut()[t][k] -= h;
                let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                let analytic = grads.slices()[t][k];
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for trial in 0..24 {
            let dist = [Distance::SquaredEuclidean, Distance::Euclidean, Distance::CosineDistance][trial % 3];
            let mut params = MlpParams::init(small_dims(), trial as u64);
            for l in params.layers.iter_mut() {
                l.bias = DVector::from_iterator(l.bias.len(), gaussian(&mut rng, l.bias.len()).into_iter().map(|v| 0.1 * v));
            }
            let x: Vec<f64> = gaussian(&mut rng, 6);
            let p = unit(&mut rng, 2);
            let n = unit(&mut rng, 2);
            // A wide margin keeps the hinge active so the loss is smooth around the point.
            let t = Triplet { anchor: &x, positive: &p, negative: &n };
            let err = finite_difference_error(&params, &t, 5.0, dist);
            assert!(err < 1e-4, "trial {trial} ({dist:?}): relative error {err:e}");
        }
    }

    #[test]
    fn one_descent_step_lowers_active_loss() {
        let params = MlpParams::init(MlpDims { input: 8, hidden1: 6, hidden2: 5, output: 4 }, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x: Vec<f64> = (0..8).map(|_| rng.random::<f64>()).collect();
        let p = unit(&mut rng, 4);
        let n = params.forward(&x).unwrap();
        let t = Triplet { anchor: &x, positive: &p, negative: &n };
        let (before, grads) = loss_gradients(&params, &t, 0.2, Distance::SquaredEuclidean).unwrap();
        assert!(before > 0.0);
        let mut stepped = params.clone();
        stepped.add_scaled(&grads, -1e-3);
        let (after, _) = loss_gradients(&stepped, &t, 0.2, Distance::SquaredEuclidean).unwrap();
        assert!(after < before, "{after} !< {before}");
    }

    fn toy_problem() -> (Vec<TrainSample>, CategoryTable) {
        let names: Vec<(String, String)> = (0..4).map(|i| (format!("c{i}"), "thing".to_string())).collect();
        let vocab: Vec<CategorySpec> = vocabulary(names).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let embeddings = vocab.iter().map(|_| Embedding::normalized(&gaussian(&mut rng, 4), 1e-9).unwrap()).collect();
        let table = CategoryTable { categories: vocab, embeddings };
        let protos: Vec<Vec<f32>> = (0..4).map(|_| (0..8).map(|_| rng.random::<f32>()).collect()).collect();
        let samples = (0..40)
            .map(|i| {
                let c = i % 4;
                let v = protos[c].iter().map(|&p| p + 0.05 * rng.random::<f32>()).collect();
                TrainSample { features: FeatureMap::new([2, 2, 2], v).unwrap(), category: c }
            })
            .collect();
        (samples, table)
    }

    fn toy_dims() -> MlpDims {
        MlpDims { input: 8, hidden1: 16, hidden2: 8, output: 4 }
    }

    #[test]
    fn train_rejects_bad_config_and_data() {
        let (data, table) = toy_problem();
        let p0 = MlpParams::init(toy_dims(), 0);
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        assert!(matches!(train(p0.clone(), &data, &table, &cfg), Err(Error::InvalidArgument(_))));
        let cfg = TrainConfig { epochs: 1, learning_rate: 0.0, ..Default::default() };
        assert!(train(p0.clone(), &data, &table, &cfg).is_err());
        let cfg = TrainConfig { epochs: 1, ..Default::default() };
        assert!(train(p0.clone(), &[], &table, &cfg).is_err());
        let mut bad = data.clone();
        bad[0].category = 99;
        assert!(train(p0, &bad, &table, &cfg).is_err());
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let (data, table) = toy_problem();
        let cfg = TrainConfig { epochs: 30, learning_rate: 1e-2, batch_size: 8, seed: 3, ..Default::default() };
        let a = train(MlpParams::init(toy_dims(), 1), &data, &table, &cfg).unwrap();
        let b = train(MlpParams::init(toy_dims(), 1), &data, &table, &cfg).unwrap();
        assert_eq!(a.epoch_losses, b.epoch_losses);
        assert_eq!(a.params, b.params);
        assert_eq!(a.epoch_losses.len(), 30);
        assert!(a.epoch_losses.last().unwrap() < &a.epoch_losses[0]);
    }

    #[test]
    fn huge_learning_rate_reports_divergence_or_finishes_finite() {
        let (data, table) = toy_problem();
        let cfg = TrainConfig { epochs: 2, learning_rate: f64::MAX, batch_size: 8, ..Default::default() };
        match train(MlpParams::init(toy_dims(), 1), &data, &table, &cfg) {
            Err(Error::TrainingDiverged { epoch, .. }) => assert!(epoch >= 1),
            Err(Error::DegenerateOutput { .. }) => {}
            Ok(out) => assert!(out.epoch_losses.iter().all(|l| l.is_finite())),
            Err(e) => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn checkpoint_round_trip_at_f32_precision() {
        let dir = tempfile::tempdir().unwrap();
        let params = MlpParams::init(MlpDims { input: 5, hidden1: 4, hidden2: 3, output: 2 }, 9);
        let meta = CheckpointMeta {
            format_version: 1,
            dims: params.dims(),
            config: Some(TrainConfig::default()),
            epoch: 3,
            epoch_losses: vec![0.3, 0.2, 0.1],
        };
        save_checkpoint(dir.path(), &params, &meta).unwrap();
        let (back, meta_back) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(meta_back, meta);
        for (a, b) in params.slices().iter().zip(back.slices()) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
        // Weight layout survives the row-major conversion.
        assert_eq!(back.layers[0].weight[(4, 1)] as f32, params.layers[0].weight[(4, 1)] as f32);
    }

    #[test]
    fn training_manifest_loads_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        Tensor::f32(vec![1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap().save(dir.path().join("f.ovt")).unwrap();
        std::fs::write(dir.path().join("train.json"), r#"[{"features": "f.ovt", "category": 2}]"#).unwrap();
        let samples = load_training_manifest(&dir.path().join("train.json")).unwrap();
        assert_eq!(samples.len(), 1);
        assert_eq!(samples[0].category, 2);
        assert_eq!(samples[0].features.shape(), [1, 1, 3]);
    }
}
