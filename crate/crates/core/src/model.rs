//! MLP encoder with a linear classification head, trained on the fused loss.
//!
//! The encoder's final layer is linear and produces the raw representation.
//! The head reads that raw representation; the contrastive term reads its
//! L2-normalized copy.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{make_two_view_batch, AugmentationPolicy, Dataset, TwoViewBatch};
use crate::error::{Error, Result};
use crate::loss::{clce_value_and_gradient_raw, loss_terms_raw, normalize_rows, LossBreakdown, LossConfig, LossTerms};
use crate::rng::{derive_seed, rng_for};

/// Fully connected layer `y = x·W + b` with `W` of shape `(in, out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weights: Array2::zeros((inputs, outputs)),
            bias: Array1::zeros(outputs),
        }
    }

    /// He-scaled normal weights, zero bias.
    fn he<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let std = (2.0 / inputs as f64).sqrt();
        Self {
            weights: Array2::from_shape_simple_fn((inputs, outputs), || std * rng.sample::<f64, _>(StandardNormal)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weights.ncols()
    }

    fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weights) + &self.bias
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub num_classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    encoder: Vec<Dense>,
    head: Dense,
}

/// Gradients laid out like the model's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradients {
    pub encoder: Vec<Dense>,
    pub head: Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub raw: Array2<f64>,
    pub normalized: Array2<f64>,
    pub logits: Array2<f64>,
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

fn slices<'a>(layers: &'a [Dense], head: &'a Dense) -> Vec<&'a [f64]> {
    layers
        .iter()
        .chain(std::iter::once(head))
        .flat_map(|d| {
            [
                d.weights.as_slice().expect("standard layout"),
                d.bias.as_slice().expect("standard layout"),
            ]
        })
        .collect()
}

fn slices_mut<'a>(layers: &'a mut [Dense], head: &'a mut Dense) -> Vec<&'a mut [f64]> {
    layers
        .iter_mut()
        .chain(std::iter::once(head))
        .flat_map(|d| {
            [
                d.weights.as_slice_mut().expect("standard layout"),
                d.bias.as_slice_mut().expect("standard layout"),
            ]
        })
        .collect()
}

impl EncoderModel {
    /// Randomly initialized model (He-normal weights, zero biases).
    pub fn new(dims: &ModelDims, seed: u64) -> Result<Self> {
        if dims.input_dim == 0 || dims.embed_dim == 0 || dims.num_classes == 0 || dims.hidden.contains(&0) {
            return Err(Error::Config(format!("all model widths must be positive: {dims:?}")));
        }
        let mut rng = rng_for(seed, &[]);
        let mut widths = vec![dims.input_dim];
        widths.extend(&dims.hidden);
        widths.push(dims.embed_dim);
        let encoder = widths.windows(2).map(|w| Dense::he(w[0], w[1], &mut rng)).collect();
        let head = Dense::he(dims.embed_dim, dims.num_classes, &mut rng);
        Ok(Self { encoder, head })
    }

    /// Assembles a model from explicit parameters, checking that shapes chain.
    pub fn from_layers(encoder: Vec<Dense>, head: Dense) -> Result<Self> {
        if encoder.is_empty() {
            return Err(Error::Shape("encoder needs at least one layer".into()));
        }
        for (i, d) in encoder.iter().chain(std::iter::once(&head)).enumerate() {
            if d.bias.len() != d.outputs() || d.inputs() == 0 || d.outputs() == 0 {
                return Err(Error::Shape(format!("layer {i} has inconsistent shape")));
            }
        }
        for (i, pair) in encoder.windows(2).enumerate() {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::Shape(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].outputs(),
                    i + 1,
                    pair[1].inputs()
                )));
            }
        }
        let last = encoder.last().expect("non-empty");
        if last.outputs() != head.inputs() {
            return Err(Error::Shape(format!(
                "encoder produces {} features but head expects {}",
                last.outputs(),
                head.inputs()
            )));
        }
        let model = Self { encoder, head };
        if model.parameters().iter().any(|s| s.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numerical("non-finite parameter".into()));
        }
        Ok(model)
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            input_dim: self.encoder[0].inputs(),
            hidden: self.encoder[..self.encoder.len() - 1].iter().map(Dense::outputs).collect(),
            embed_dim: self.head.inputs(),
            num_classes: self.head.outputs(),
        }
    }

    pub fn encoder(&self) -> &[Dense] {
        &self.encoder
    }

    pub fn head(&self) -> &Dense {
        &self.head
    }

    /// Parameter tensors in a fixed order: each encoder layer's weights then
    /// bias, then the head's.
    pub fn parameters(&self) -> Vec<&[f64]> {
        slices(&self.encoder, &self.head)
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        slices_mut(&mut self.encoder, &mut self.head)
    }

    fn check_input(&self, inputs: ArrayView2<f64>) -> Result<()> {
        let expected = self.encoder[0].inputs();
        if inputs.ncols() != expected || inputs.nrows() == 0 {
            return Err(Error::Shape(format!(
                "input is {}x{}, model expects rows of width {expected}",
                inputs.nrows(),
                inputs.ncols()
            )));
        }
        Ok(())
    }

    /// Pre-activations of every encoder layer; the last one is the raw
    /// representation.
    fn encode(&self, inputs: ArrayView2<f64>) -> Vec<Array2<f64>> {
        let mut pre = Vec::with_capacity(self.encoder.len());
        let mut act = inputs.to_owned();
        for (i, layer) in self.encoder.iter().enumerate() {
            let z = layer.apply(act.view());
            if i + 1 < self.encoder.len() {
                act = z.mapv(relu);
            }
            pre.push(z);
        }
        pre
    }

    pub fn forward(&self, inputs: ArrayView2<f64>) -> Result<ForwardOutput> {
        self.check_input(inputs)?;
        let raw = self.encode(inputs).pop().expect("non-empty encoder");
        let (normalized, _) = normalize_rows(raw.view())?;
        let logits = self.head.apply(raw.view());
        Ok(ForwardOutput {
            raw,
            normalized,
            logits,
        })
    }

    /// Normalized embeddings only.
    pub fn embed(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward(inputs)?.normalized)
    }

    /// Row-level loss terms of the model on a labelled batch.
    pub fn loss_terms(&self, inputs: ArrayView2<f64>, labels: &[usize], config: &LossConfig) -> Result<LossTerms> {
        self.check_input(inputs)?;
        let raw = self.encode(inputs).pop().expect("non-empty encoder");
        let logits = self.head.apply(raw.view());
        loss_terms_raw(raw.view(), logits.view(), labels, config)
    }

    /// Loss and backpropagated parameter gradients.
    pub fn loss_and_gradients(
        &self,
        inputs: ArrayView2<f64>,
        labels: &[usize],
        config: &LossConfig,
    ) -> Result<(LossBreakdown, ModelGradients)> {
        self.check_input(inputs)?;
        let pre = self.encode(inputs);
        let raw = pre.last().expect("non-empty encoder");
        let logits = self.head.apply(raw.view());
        let (breakdown, grad) = clce_value_and_gradient_raw(raw.view(), logits.view(), labels, config)?;

        let head = Dense {
            weights: raw.t().dot(&grad.logits),
            bias: grad.logits.sum_axis(Axis(0)),
        };
        let mut delta = grad.embeddings + grad.logits.dot(&self.head.weights.t());
        let mut encoder = Vec::with_capacity(self.encoder.len());
        for l in (0..self.encoder.len()).rev() {
            let input = if l == 0 { inputs.to_owned() } else { pre[l - 1].mapv(relu) };
            encoder.push(Dense {
                weights: input.t().dot(&delta),
                bias: delta.sum_axis(Axis(0)),
            });
            if l > 0 {
                let mut back = delta.dot(&self.encoder[l].weights.t());
                back.zip_mut_with(&pre[l - 1], |d, &z| {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                });
                delta = back;
            }
        }
        encoder.reverse();
        Ok((breakdown, ModelGradients { encoder, head }))
    }
}

impl ModelGradients {
    pub fn tensors(&self) -> Vec<&[f64]> {
        slices(&self.encoder, &self.head)
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        slices_mut(&mut self.encoder, &mut self.head)
    }
}

/// Central-difference gradient of the model loss with respect to every
/// parameter, in [`EncoderModel::parameters`] order.
pub fn numeric_parameter_gradients(
    model: &EncoderModel,
    inputs: ArrayView2<f64>,
    labels: &[usize],
    config: &LossConfig,
    h: f64,
) -> Result<Vec<Vec<f64>>> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidStepSize(h));
    }
    let mut probe = model.clone();
    let shapes: Vec<usize> = model.parameters().iter().map(|s| s.len()).collect();
    let mut out = Vec::with_capacity(shapes.len());
    for (t, &len) in shapes.iter().enumerate() {
        let mut g = Vec::with_capacity(len);
        for k in 0..len {
            let orig = probe.parameters()[t][k];
            probe.parameters_mut()[t][k] = orig + h;
            let plus = probe.loss_terms(inputs, labels, config)?;
            probe.parameters_mut()[t][k] = orig - h;
            let minus = probe.loss_terms(inputs, labels, config)?;
            probe.parameters_mut()[t][k] = orig;
            g.push(crate::loss::central_difference(&plus, &minus, h));
        }
        out.push(g);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    SgdMomentum {
        learning_rate: f64,
        momentum: f64,
    },
    Adam {
        learning_rate: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::SgdMomentum {
            learning_rate: 0.05,
            momentum: 0.9,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::SgdMomentum { learning_rate, momentum } => {
                learning_rate >= 0.0 && learning_rate.is_finite() && (0.0..1.0).contains(&momentum)
            }
            OptimizerConfig::Adam {
                learning_rate,
                beta1,
                beta2,
                epsilon,
            } => {
                learning_rate >= 0.0
                    && learning_rate.is_finite()
                    && (0.0..1.0).contains(&beta1)
                    && (0.0..1.0).contains(&beta2)
                    && epsilon > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings: {self:?}")))
        }
    }
}

/// Optimizer hyperparameters plus per-parameter accumulators shaped like the
/// model's tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, model: &EncoderModel) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Vec<f64>> = model.parameters().iter().map(|s| vec![0.0; s.len()]).collect();
        let second = match config {
            OptimizerConfig::Adam { .. } => zeros.clone(),
            OptimizerConfig::SgdMomentum { .. } => Vec::new(),
        };
        Ok(Self {
            config,
            step: 0,
            first: zeros,
            second,
        })
    }

    pub fn apply(&mut self, model: &mut EncoderModel, grads: &ModelGradients) {
        self.step += 1;
        let params = model.parameters_mut();
        let grads = grads.tensors();
        match self.config {
            OptimizerConfig::SgdMomentum { learning_rate, momentum } => {
                for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.first) {
                    for ((p, &g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                        *v = momentum * *v + g;
                        *p -= learning_rate * *v;
                    }
                }
            }
            OptimizerConfig::Adam {
                learning_rate,
                beta1,
                beta2,
                epsilon,
            } => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.first).zip(&mut self.second) {
                    for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        *p -= learning_rate * (*m / c1) / ((*v / c2).sqrt() + epsilon);
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Samples per step; each contributes two views.
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    /// `None` selects [`AugmentationPolicy::vector_default`] scaled to the data.
    pub augmentation: Option<AugmentationPolicy>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 10,
            seed: 0,
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::default(),
            augmentation: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be >= 2, got {}", self.batch_size)));
        }
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        self.loss.validate()?;
        self.optimizer.validate()?;
        if let Some(p) = &self.augmentation {
            p.validate()?;
        }
        Ok(())
    }
}

/// One gradient step on a two-view batch. Returns the loss before the update.
/// On a non-finite loss or gradient nothing is modified.
pub fn train_step(
    model: &mut EncoderModel,
    optimizer: &mut OptimizerState,
    batch: &TwoViewBatch,
    config: &LossConfig,
) -> Result<LossBreakdown> {
    let step = optimizer.step as usize;
    let (breakdown, grads) = match model.loss_and_gradients(batch.inputs.view(), &batch.labels, config) {
        Err(Error::Numerical(_)) | Err(Error::DegenerateVector { .. }) => {
            return Err(Error::Divergence { step, loss: f64::NAN })
        }
        other => other?,
    };
    let finite = breakdown.clce.is_finite() && grads.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()));
    if !finite {
        return Err(Error::Divergence {
            step,
            loss: breakdown.clce,
        });
    }
    optimizer.apply(model, &grads);
    Ok(breakdown)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub ce: f64,
    pub lacln: f64,
    pub clce: f64,
}

/// Trains for `config.epochs` passes over `dataset`, shuffling each epoch
/// and drawing fresh augmentations per batch. The final partial batch of an
/// epoch is kept.
pub fn train(model: &mut EncoderModel, dataset: &Dataset, config: &TrainConfig) -> Result<Vec<StepRecord>> {
    config.validate()?;
    if dataset.input_dim() != model.dims().input_dim {
        return Err(Error::Shape(format!(
            "dataset has {} features, model expects {}",
            dataset.input_dim(),
            model.dims().input_dim
        )));
    }
    if dataset.is_empty() {
        return Err(Error::InsufficientData("empty training set".into()));
    }
    let policy = config
        .augmentation
        .clone()
        .unwrap_or_else(|| AugmentationPolicy::vector_default(dataset.feature_scale()));
    let mut optimizer = OptimizerState::new(config.optimizer, model)?;
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..config.epochs {
        let mut rng = rng_for(config.seed, &[1, epoch as u64]);
        order.shuffle(&mut rng);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let seed = derive_seed(config.seed, &[2, epoch as u64, b as u64]);
            let batch = make_two_view_batch(dataset, chunk, &policy, seed)?;
            let step = history.len();
            let loss = train_step(model, &mut optimizer, &batch, &config.loss)?;
            history.push(StepRecord {
                step,
                epoch,
                ce: loss.ce,
                lacln: loss.lacln,
                clce: loss.clce,
            });
        }
    }
    Ok(history)
}

const MAGIC: &[u8; 5] = b"CLCE1";

/// Serializes a model.
///
/// Layout, all integers little-endian `u64`, all reals little-endian IEEE-754
/// `f64`:
///
/// ```text
/// "CLCE1"                         5 bytes
/// layer_count L                   encoder layers
/// input_dim
/// width_1 .. width_L              output width of each encoder layer
/// num_classes
/// for each encoder layer, then the head:
///     weights (in × out, row-major)
///     bias (out)
/// ```
///
/// The file must end exactly after the head bias.
pub fn encode_checkpoint(model: &EncoderModel) -> Vec<u8> {
    let dims = model.dims();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let mut put = |v: u64| out.extend_from_slice(&v.to_le_bytes());
    put(model.encoder.len() as u64);
    put(dims.input_dim as u64);
    for layer in &model.encoder {
        put(layer.outputs() as u64);
    }
    put(dims.num_classes as u64);
    for tensor in model.parameters() {
        for v in tensor {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<EncoderModel> {
    let body = bytes
        .strip_prefix(MAGIC.as_slice())
        .ok_or_else(|| Error::CorruptCheckpoint("missing CLCE1 magic".into()))?;
    decode_body(body)
}

fn decode_body(mut cursor: &[u8]) -> Result<EncoderModel> {
    let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
    fn next_u64(cursor: &mut &[u8]) -> Option<u64> {
        let (head, rest) = cursor.split_first_chunk::<8>()?;
        *cursor = rest;
        Some(u64::from_le_bytes(*head))
    }
    fn next_f64(cursor: &mut &[u8]) -> Option<f64> {
        next_u64(cursor).map(f64::from_bits)
    }
    const MAX_WIDTH: u64 = 1 << 24;
    let dim = |c: &mut &[u8]| -> Result<usize> {
        match next_u64(c) {
            Some(v) if v > 0 && v <= MAX_WIDTH => Ok(v as usize),
            Some(v) => Err(corrupt(&format!("implausible dimension {v}"))),
            None => Err(corrupt("unexpected end of file")),
        }
    };
    let layers = dim(&mut cursor)?;
    if layers > 64 {
        return Err(corrupt(&format!("implausible layer count {layers}")));
    }
    let mut widths = vec![dim(&mut cursor)?];
    for _ in 0..layers {
        widths.push(dim(&mut cursor)?);
    }
    widths.push(dim(&mut cursor)?);

    let read_dense = |inputs: usize, outputs: usize, c: &mut &[u8]| -> Result<Dense> {
        let mut d = Dense::zeros(inputs, outputs);
        for v in d.weights.iter_mut().chain(d.bias.iter_mut()) {
            *v = next_f64(c).ok_or_else(|| corrupt("unexpected end of file"))?;
        }
        Ok(d)
    };
    let mut encoder = Vec::with_capacity(layers);
    for l in 0..layers {
        encoder.push(read_dense(widths[l], widths[l + 1], &mut cursor)?);
    }
    let head = read_dense(widths[layers], widths[layers + 1], &mut cursor)?;
    if !cursor.is_empty() {
        return Err(corrupt(&format!("{} trailing bytes", cursor.len())));
    }
    EncoderModel::from_layers(encoder, head).map_err(|e| corrupt(&e.to_string()))
}

pub fn save_checkpoint(model: &EncoderModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<EncoderModel> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_blobs;
    use crate::loss::relative_error;
    use ndarray::{arr1, arr2, array};

    fn tiny_model(seed: u64) -> EncoderModel {
        EncoderModel::new(
            &ModelDims {
                input_dim: 3,
                hidden: vec![5],
                embed_dim: 4,
                num_classes: 3,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn identity_encoder_passes_basis_vectors() {
        let enc = Dense {
            weights: Array2::eye(3),
            bias: Array1::zeros(3),
        };
        let model = EncoderModel::from_layers(vec![enc], Dense::zeros(3, 2)).unwrap();
        let out = model.forward(arr2(&[[1.0, 0.0, 0.0]]).view()).unwrap();
        assert_eq!(out.normalized, arr2(&[[1.0, 0.0, 0.0]]));
        assert_eq!(out.logits, arr2(&[[0.0, 0.0]]));
    }

    #[test]
    fn dead_path_surfaces_degenerate_vector() {
        let model = tiny_model(0);
        assert!(matches!(
            model.forward(arr2(&[[0.0, 0.0, 0.0]]).view()),
            Err(Error::DegenerateVector { .. })
        ));
        assert!(matches!(model.forward(arr2(&[[1.0, 2.0]]).view()), Err(Error::Shape(_))));
    }

    #[test]
    fn forward_matches_hand_rolled_arithmetic() {
        // 2-3-2 encoder, 2-class head
        let l1 = Dense {
            weights: array![[0.5, -1.0, 0.25], [1.5, 0.5, -0.75]],
            bias: arr1(&[0.1, -0.2, 0.0]),
        };
        let l2 = Dense {
            weights: array![[1.0, -0.5], [0.3, 0.2], [-1.2, 0.8]],
            bias: arr1(&[0.05, -0.05]),
        };
        let head = Dense {
            weights: array![[0.7, -0.1], [0.4, 0.9]],
            bias: arr1(&[0.0, 0.2]),
        };
        let model = EncoderModel::from_layers(vec![l1.clone(), l2.clone()], Dense::zeros(3, 1));
        assert!(model.is_err(), "head width mismatch must be rejected");
        let model = EncoderModel::from_layers(vec![l1.clone(), l2.clone()], head.clone()).unwrap();

        let x = [1.0, 1.0];
        let mut h = [0.0; 3];
        for j in 0..3 {
            let mut acc = l1.bias[j];
            for i in 0..2 {
                acc += x[i] * l1.weights[[i, j]];
            }
            h[j] = if acc > 0.0 { acc } else { 0.0 };
        }
        let mut r = [0.0; 2];
        for j in 0..2 {
            let mut acc = l2.bias[j];
            for i in 0..3 {
                acc += h[i] * l2.weights[[i, j]];
            }
            r[j] = acc;
        }
        let norm = (r[0] * r[0] + r[1] * r[1]).sqrt();
        let mut z = [0.0; 2];
        for j in 0..2 {
            z[j] = head.bias[j] + r[0] * head.weights[[0, j]] + r[1] * head.weights[[1, j]];
        }
        let out = model.forward(arr2(&[x]).view()).unwrap();
        for j in 0..2 {
            assert!((out.raw[[0, j]] - r[j]).abs() < 1e-12);
            assert!((out.normalized[[0, j]] - r[j] / norm).abs() < 1e-12);
            assert!((out.logits[[0, j]] - z[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let model = tiny_model(4);
        let x = array![[0.2, -0.3, 1.0], [1.0, 1.0, 1.0]];
        assert_eq!(model.forward(x.view()).unwrap(), model.forward(x.view()).unwrap());
        assert_eq!(tiny_model(4), model);
    }

    fn two_view_fixture() -> TwoViewBatch {
        TwoViewBatch {
            inputs: array![
                [1.0, 0.2, -0.3],
                [0.9, 0.25, -0.2],
                [-0.5, 1.0, 0.4],
                [-0.4, 1.1, 0.5],
                [0.3, -0.8, 1.2],
                [0.2, -0.9, 1.0],
                [1.1, 0.1, 0.1],
                [1.0, 0.0, 0.2],
            ],
            labels: vec![0, 0, 1, 1, 2, 2, 0, 0],
            sample_ids: vec![0, 0, 1, 1, 2, 2, 3, 3],
        }
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let model = tiny_model(11);
        let batch = two_view_fixture();
        for lambda in [0.0, 0.5, 1.0] {
            let cfg = LossConfig { lambda, ..LossConfig::default() };
            let (_, grads) = model.loss_and_gradients(batch.inputs.view(), &batch.labels, &cfg).unwrap();
            let numeric = numeric_parameter_gradients(&model, batch.inputs.view(), &batch.labels, &cfg, 1e-5).unwrap();
            let mut worst = 0.0f64;
            for (a, n) in grads.tensors().iter().zip(&numeric) {
                for (&a, &n) in a.iter().zip(n) {
                    worst = worst.max(relative_error(a, n));
                }
            }
            assert!(worst < 1e-4, "lambda {lambda}: {worst}");
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut model = tiny_model(2);
        let before = model.clone();
        let batch = two_view_fixture();
        for opt in [
            OptimizerConfig::SgdMomentum {
                learning_rate: 0.0,
                momentum: 0.9,
            },
            OptimizerConfig::Adam {
                learning_rate: 0.0,
                beta1: 0.9,
                beta2: 0.999,
                epsilon: 1e-8,
            },
        ] {
            let mut state = OptimizerState::new(opt, &model).unwrap();
            for _ in 0..3 {
                train_step(&mut model, &mut state, &batch, &LossConfig::default()).unwrap();
            }
            for (a, b) in model.parameters().iter().zip(before.parameters()) {
                assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }

    #[test]
    fn divergence_is_reported_and_model_untouched() {
        let mut model = tiny_model(2);
        let mut batch = two_view_fixture();
        batch.inputs[[0, 0]] = f64::INFINITY;
        let before = model.clone();
        let mut state = OptimizerState::new(OptimizerConfig::default(), &model).unwrap();
        assert!(matches!(
            train_step(&mut model, &mut state, &batch, &LossConfig::default()),
            Err(Error::Divergence { .. })
        ));
        assert_eq!(model, before);
    }

    #[test]
    fn ce_training_decreases_on_separable_blobs() {
        let ds = generate_blobs(2, 32, 4, 0.1, 5).unwrap();
        let mut model = EncoderModel::new(
            &ModelDims {
                input_dim: 4,
                hidden: vec![8],
                embed_dim: 4,
                num_classes: 2,
            },
            1,
        )
        .unwrap();
        let cfg = TrainConfig {
            batch_size: 16,
            epochs: 13,
            seed: 3,
            loss: LossConfig { lambda: 0.0, ..LossConfig::default() },
            optimizer: OptimizerConfig::SgdMomentum {
                learning_rate: 0.05,
                momentum: 0.9,
            },
            augmentation: Some(AugmentationPolicy::identity()),
        };
        let history = train(&mut model, &ds, &cfg).unwrap();
        assert!(history.len() >= 50);
        let first: f64 = history[..5].iter().map(|r| r.ce).sum();
        let last: f64 = history[45..50].iter().map(|r| r.ce).sum();
        assert!(last < 0.5 * first, "{first} -> {last}");
        assert!(history.iter().all(|r| r.lacln.is_finite()));
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = tiny_model(8);
        let bytes = encode_checkpoint(&model);
        assert_eq!(&bytes[..5], b"CLCE1");
        let back = decode_checkpoint(&bytes).unwrap();
        for (a, b) in model.parameters().iter().zip(back.parameters()) {
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(back.dims(), model.dims());
    }

    #[test]
    fn checkpoint_corruption_is_detected() {
        let bytes = encode_checkpoint(&tiny_model(8));
        for cut in [0, 3, 5, 12, bytes.len() - 1] {
            assert!(matches!(decode_checkpoint(&bytes[..cut]), Err(Error::CorruptCheckpoint(_))), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[4] = b'2';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::CorruptCheckpoint(_))));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(decode_checkpoint(&long), Err(Error::CorruptCheckpoint(_))));
    }
}
