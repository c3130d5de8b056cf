//! Layer-normalized MLP over rank vectors.
//!
//! Each hidden layer computes `dropout(relu(layernorm(W h + b)))`; the output
//! layer is affine with two logits, index 0 for Out-of-gallery and index 1 for
//! In-gallery. Layer normalization has a learned gain and shift per unit.
//! Dropout is inverted (kept units scaled by `1 / (1 - p)`) and only active in
//! training mode.

use std::fmt;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::framing::*;
use crate::protocol::Label;
use crate::rng::SeededRng;
use crate::scalar::Scalar;

pub const MODEL_MAGIC: &[u8; 5] = b"OGMLP";
pub const MODEL_VERSION: u32 = 1;

/// Layer-norm variance floor.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum MlpError {
    #[error("invalid classifier config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("input has a non-finite component")]
    NonFiniteInput,
    #[error("empty batch")]
    EmptyBatch,
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a model file (bad magic)")]
    BadMagic,
    #[error("unsupported model file version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt model file: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputScaling {
    /// Ranks fed as-is.
    Raw,
    /// Ranks divided by the gallery size, mapping them into `(0, 1]`.
    #[default]
    DivideByGallerySize,
}

impl InputScaling {
    fn code(self) -> u8 {
        match self {
            InputScaling::Raw => 0,
            InputScaling::DivideByGallerySize => 1,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(InputScaling::Raw),
            1 => Some(InputScaling::DivideByGallerySize),
            _ => None,
        }
    }
}

impl FromStr for InputScaling {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "raw" => Ok(InputScaling::Raw),
            "divide_by_gallery_size" | "gallery" => Ok(InputScaling::DivideByGallerySize),
            other => Err(format!("unknown input scaling {other:?}")),
        }
    }
}

impl fmt::Display for InputScaling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InputScaling::Raw => "raw",
            InputScaling::DivideByGallerySize => "divide_by_gallery_size",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpConfig {
    pub d_in: usize,
    pub hidden_sizes: Vec<usize>,
    pub dropout_p: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub folds: usize,
    pub rng_seed: u64,
    pub input_scaling: InputScaling,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            d_in: 3,
            hidden_sizes: vec![16, 16],
            dropout_p: 0.1,
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 20,
            folds: 10,
            rng_seed: 0,
            input_scaling: InputScaling::DivideByGallerySize,
        }
    }
}

impl MlpConfig {
    pub const OUTPUTS: usize = 2;

    pub fn validate(&self) -> Result<(), MlpError> {
        let bad = |m: String| Err(MlpError::Config(m));
        if self.d_in == 0 {
            return bad("d_in must be positive".into());
        }
        if self.hidden_sizes.contains(&0) {
            return bad(format!("hidden sizes must be positive: {:?}", self.hidden_sizes));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p {} not in [0, 1)", self.dropout_p));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.folds == 0 {
            return bad("batch_size, epochs and folds must be positive".into());
        }
        Ok(())
    }

    /// `(inputs, outputs)` of every layer, hidden layers first.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.d_in];
        dims.extend(&self.hidden_sizes);
        dims.push(Self::OUTPUTS);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    /// Classifier input for a rank vector.
    pub fn features<T: Scalar>(&self, ranks: &[u32], gallery_size: u32) -> Vec<T> {
        match self.input_scaling {
            InputScaling::Raw => ranks.iter().map(|&r| T::of(f64::from(r))).collect(),
            InputScaling::DivideByGallerySize => {
                let n = f64::from(gallery_size.max(1));
                ranks.iter().map(|&r| T::of(f64::from(r) / n)).collect()
            }
        }
    }
}

/// Parameters of one layer. `norm_gain`/`norm_shift` are empty on the output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs x inputs`.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub norm_gain: Vec<T>,
    pub norm_shift: Vec<T>,
}

impl<T: Scalar> LayerParams<T> {
    fn zeros(inputs: usize, outputs: usize, normalized: bool) -> Self {
        let n = if normalized { outputs } else { 0 };
        Self {
            inputs,
            outputs,
            weight: vec![T::zero(); inputs * outputs],
            bias: vec![T::zero(); outputs],
            norm_gain: vec![T::zero(); n],
            norm_shift: vec![T::zero(); n],
        }
    }

    pub fn has_norm(&self) -> bool {
        !self.norm_gain.is_empty()
    }

    fn affine(&self, h: &[T]) -> Vec<T> {
        (0..self.outputs)
            .map(|o| {
                let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
                row.iter().zip(h).fold(self.bias[o], |acc, (&w, &x)| acc + w * x)
            })
            .collect()
    }
}

/// Trainable parameters (also used, shape for shape, for gradients and
/// optimizer moments).
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<T> {
    pub layers: Vec<LayerParams<T>>,
}

impl<T: Scalar> MlpParams<T> {
    pub fn zeros(config: &MlpConfig) -> Self {
        let shapes = config.layer_shapes();
        let last = shapes.len() - 1;
        Self {
            layers: shapes
                .into_iter()
                .enumerate()
                .map(|(i, (a, b))| LayerParams::zeros(a, b, i < last))
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams::zeros(l.inputs, l.outputs, l.has_norm()))
                .collect(),
        }
    }

    /// Every parameter tensor, in file order.
    pub fn tensors(&self) -> Vec<&[T]> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight[..], &l.bias[..], &l.norm_gain[..], &l.norm_shift[..]])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    &mut l.weight[..],
                    &mut l.bias[..],
                    &mut l.norm_gain[..],
                    &mut l.norm_shift[..],
                ]
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    pub fn cast<U: Scalar>(&self) -> MlpParams<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::of(x.as_f64())).collect();
        MlpParams {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    inputs: l.inputs,
                    outputs: l.outputs,
                    weight: conv(&l.weight),
                    bias: conv(&l.bias),
                    norm_gain: conv(&l.norm_gain),
                    norm_shift: conv(&l.norm_shift),
                })
                .collect(),
        }
    }
}

/// Intermediate values of one hidden layer kept for backprop.
#[derive(Debug, Clone)]
pub struct HiddenCache<T> {
    pub input: Vec<T>,
    /// Layer-normalized pre-activation, before gain and shift.
    pub normalized: Vec<T>,
    pub inv_std: T,
    /// `gain * normalized + shift`, the ReLU input.
    pub pre_relu: Vec<T>,
    /// Per-unit dropout factor: 0 or `1 / (1 - p)`; all ones outside training.
    pub dropout: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    pub hidden: Vec<HiddenCache<T>>,
    pub output_input: Vec<T>,
}

/// Classifier decision with softmax confidences `[out_of_gallery, in_gallery]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub label: Label,
    pub confidence: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel<T> {
    pub config: MlpConfig,
    pub params: MlpParams<T>,
}

/// Numerically stable two-way softmax.
pub fn softmax2<T: Scalar>(logits: [T; 2]) -> [T; 2] {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    let s = e0 + e1;
    [e0 / s, e1 / s]
}

/// `-log softmax(logits)[label]`.
pub fn cross_entropy<T: Scalar>(logits: [T; 2], label: Label) -> T {
    let m = logits[0].max(logits[1]);
    let lse = m + ((logits[0] - m).exp() + (logits[1] - m).exp()).ln();
    lse - logits[label.index()]
}

impl<T: Scalar> MlpModel<T> {
    /// All weights, biases, gains and shifts zero.
    pub fn zeroed(config: MlpConfig) -> Result<Self, MlpError> {
        config.validate()?;
        let params = MlpParams::zeros(&config);
        Ok(Self { config, params })
    }

    /// He-uniform weights, `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`, drawn
    /// layer by layer in row-major order; zero biases and shifts, unit gains.
    pub fn init(config: MlpConfig, rng: &mut SeededRng) -> Result<Self, MlpError> {
        let mut model = Self::zeroed(config)?;
        for layer in &mut model.params.layers {
            let bound = (6.0 / layer.inputs as f64).sqrt();
            for w in &mut layer.weight {
                *w = T::of((2.0 * rng.unit() - 1.0) * bound);
            }
            for g in &mut layer.norm_gain {
                *g = T::one();
            }
        }
        Ok(model)
    }

    pub fn cast<U: Scalar>(&self) -> MlpModel<U> {
        MlpModel {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    fn check_input(&self, x: &[T]) -> Result<(), MlpError> {
        if x.len() != self.config.d_in {
            return Err(MlpError::ShapeMismatch(format!(
                "input length {} != d_in {}",
                x.len(),
                self.config.d_in
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(MlpError::NonFiniteInput);
        }
        Ok(())
    }

    /// Forward pass. Dropout is applied iff `dropout_rng` is given.
    pub fn forward(&self, x: &[T], mut dropout_rng: Option<&mut SeededRng>) -> Result<([T; 2], ForwardCache<T>), MlpError> {
        self.check_input(x)?;
        let eps = T::of(LAYER_NORM_EPS);
        let p = self.config.dropout_p;
        let keep_scale = T::of(1.0 / (1.0 - p));
        let (out_layer, hidden_layers) = self.params.layers.split_last().expect("at least one layer");

        let mut h = x.to_vec();
        let mut hidden = Vec::with_capacity(hidden_layers.len());
        for layer in hidden_layers {
            let a = layer.affine(&h);
            let n = T::of(a.len() as f64);
            let mean = a.iter().copied().sum::<T>() / n;
            let var = a.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv_std = T::one() / (var + eps).sqrt();
            let normalized: Vec<T> = a.iter().map(|&v| (v - mean) * inv_std).collect();
            let pre_relu: Vec<T> = normalized
                .iter()
                .zip(layer.norm_gain.iter().zip(&layer.norm_shift))
                .map(|(&z, (&g, &s))| g * z + s)
                .collect();
            let dropout: Vec<T> = match dropout_rng.as_deref_mut() {
                Some(rng) if p > 0.0 => (0..pre_relu.len())
                    .map(|_| if rng.unit() < p { T::zero() } else { keep_scale })
                    .collect(),
                _ => vec![T::one(); pre_relu.len()],
            };
            let out: Vec<T> = pre_relu
                .iter()
                .zip(&dropout)
                .map(|(&v, &d)| v.max(T::zero()) * d)
                .collect();
            hidden.push(HiddenCache {
                input: std::mem::replace(&mut h, out),
                normalized,
                inv_std,
                pre_relu,
                dropout,
            });
        }
        let logits = out_layer.affine(&h);
        Ok((
            [logits[0], logits[1]],
            ForwardCache {
                hidden,
                output_input: h,
            },
        ))
    }

    /// Inference-mode logits.
    pub fn logits(&self, x: &[T]) -> Result<[T; 2], MlpError> {
        Ok(self.forward(x, None)?.0)
    }

    /// Mean cross-entropy over `batch` and its gradient.
    pub fn loss_and_grad(
        &self,
        batch: &[(Vec<T>, Label)],
        mut dropout_rng: Option<&mut SeededRng>,
    ) -> Result<(T, MlpParams<T>), MlpError> {
        if batch.is_empty() {
            return Err(MlpError::EmptyBatch);
        }
        let scale = T::one() / T::of(batch.len() as f64);
        let mut grads = self.params.zeros_like();
        let mut loss = T::zero();
        for (x, label) in batch {
            let (logits, cache) = self.forward(x, dropout_rng.as_deref_mut())?;
            loss = loss + cross_entropy(logits, *label);
            let probs = softmax2(logits);
            let mut delta: Vec<T> = (0..2)
                .map(|k| {
                    let target = if k == label.index() { T::one() } else { T::zero() };
                    (probs[k] - target) * scale
                })
                .collect();
            self.backward(&cache, &mut delta, &mut grads);
        }
        Ok((loss * scale, grads))
    }

    /// Accumulates parameter gradients given `d loss / d logits` in `delta`.
    fn backward(&self, cache: &ForwardCache<T>, delta: &mut Vec<T>, grads: &mut MlpParams<T>) {
        let n_layers = self.params.layers.len();
        for li in (0..n_layers).rev() {
            let layer = &self.params.layers[li];
            let g = &mut grads.layers[li];
            let input = if li == n_layers - 1 {
                &cache.output_input
            } else {
                let hc = &cache.hidden[li];
                // Through dropout and ReLU.
                let dz: Vec<T> = delta
                    .iter()
                    .zip(&hc.dropout)
                    .zip(&hc.pre_relu)
                    .map(|((&d, &m), &z)| if z > T::zero() { d * m } else { T::zero() })
                    .collect();
                // Through gain/shift.
                let mut dxhat = Vec::with_capacity(dz.len());
                for j in 0..dz.len() {
                    g.norm_gain[j] = g.norm_gain[j] + dz[j] * hc.normalized[j];
                    g.norm_shift[j] = g.norm_shift[j] + dz[j];
                    dxhat.push(dz[j] * layer.norm_gain[j]);
                }
                // Through normalization.
                let n = T::of(dxhat.len() as f64);
                let mean_d = dxhat.iter().copied().sum::<T>() / n;
                let mean_dx = dxhat
                    .iter()
                    .zip(&hc.normalized)
                    .map(|(&d, &x)| d * x)
                    .sum::<T>()
                    / n;
                *delta = dxhat
                    .iter()
                    .zip(&hc.normalized)
                    .map(|(&d, &x)| hc.inv_std * (d - mean_d - x * mean_dx))
                    .collect();
                &hc.input
            };
            let mut upstream = vec![T::zero(); layer.inputs];
            for (o, &d) in delta.iter().enumerate() {
                g.bias[o] = g.bias[o] + d;
                let row = o * layer.inputs;
                for (i, &x) in input.iter().enumerate() {
                    g.weight[row + i] = g.weight[row + i] + d * x;
                    upstream[i] = upstream[i] + layer.weight[row + i] * d;
                }
            }
            *delta = upstream;
        }
    }

    /// Label and confidences for a rank vector.
    ///
    /// The label is In-gallery only if its confidence strictly exceeds the
    /// Out-of-gallery confidence; exact ties go to Out-of-gallery.
    pub fn predict(&self, ranks: &[u32], gallery_size: u32) -> Result<Prediction, MlpError> {
        let x = self.config.features::<T>(ranks, gallery_size);
        self.predict_features(&x)
    }

    pub fn predict_features(&self, x: &[T]) -> Result<Prediction, MlpError> {
        let logits = self.logits(x)?;
        let p = softmax2([logits[0].as_f64(), logits[1].as_f64()]);
        let label = if p[1] > p[0] {
            Label::InGallery
        } else {
            Label::OutOfGallery
        };
        Ok(Prediction { label, confidence: p })
    }

    /// Writes the model with parameters stored at the model's own width, so
    /// a save/load round trip is bit-exact for both `f32` and `f64`.
    ///
    /// Layout: magic `OGMLP`, `u32` version, `u8` parameter width (4 or 8);
    /// config block (`u32` d_in, `u32`
    /// hidden count, `u32` per hidden size, `f64` dropout, `f64` learning
    /// rate, `u32` batch size, `u32` epochs, `u32` folds, `u64` seed, `u8`
    /// input scaling); `u32` layer count; per layer `u32` inputs, `u32`
    /// outputs, `u8` has-norm, then weight, bias and (if normalized) gain and
    /// shift as little-endian floats of the declared width.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), MlpError> {
        let c = &self.config;
        w.write_all(MODEL_MAGIC)?;
        write_u32(w, MODEL_VERSION)?;
        let wide = std::mem::size_of::<T>() == 8;
        write_u8(w, if wide { 8 } else { 4 })?;
        write_u32(w, c.d_in as u32)?;
        write_u32(w, c.hidden_sizes.len() as u32)?;
        for &h in &c.hidden_sizes {
            write_u32(w, h as u32)?;
        }
        write_f64(w, c.dropout_p)?;
        write_f64(w, c.learning_rate)?;
        write_u32(w, c.batch_size as u32)?;
        write_u32(w, c.epochs as u32)?;
        write_u32(w, c.folds as u32)?;
        write_u64(w, c.rng_seed)?;
        write_u8(w, c.input_scaling.code())?;
        write_u32(w, self.params.layers.len() as u32)?;
        for l in &self.params.layers {
            write_u32(w, l.inputs as u32)?;
            write_u32(w, l.outputs as u32)?;
            write_u8(w, l.has_norm() as u8)?;
            for t in [&l.weight, &l.bias, &l.norm_gain, &l.norm_shift] {
                for &x in t {
                    if wide {
                        write_f64(w, x.as_f64())?;
                    } else {
                        write_f32(w, x.to_f32().unwrap_or(f32::NAN))?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, MlpError> {
        let magic: [u8; 5] = read_magic(&mut r)?;
        if &magic != MODEL_MAGIC {
            return Err(MlpError::BadMagic);
        }
        let version = read_u32(&mut r)?;
        if version != MODEL_VERSION {
            return Err(MlpError::UnsupportedVersion(version));
        }
        let width = read_u8(&mut r)?;
        if width != 4 && width != 8 {
            return Err(MlpError::Corrupt(format!("parameter width {width}")));
        }
        let d_in = read_u32(&mut r)? as usize;
        let n_hidden = read_u32(&mut r)? as usize;
        if n_hidden > 1024 {
            return Err(MlpError::Corrupt(format!("{n_hidden} hidden layers")));
        }
        let hidden_sizes = (0..n_hidden)
            .map(|_| read_u32(&mut r).map(|h| h as usize))
            .collect::<io::Result<Vec<_>>>()?;
        let dropout_p = read_f64(&mut r)?;
        let learning_rate = read_f64(&mut r)?;
        let batch_size = read_u32(&mut r)? as usize;
        let epochs = read_u32(&mut r)? as usize;
        let folds = read_u32(&mut r)? as usize;
        let rng_seed = read_u64(&mut r)?;
        let scaling_code = read_u8(&mut r)?;
        let input_scaling = InputScaling::from_code(scaling_code)
            .ok_or_else(|| MlpError::Corrupt(format!("input scaling code {scaling_code}")))?;
        let config = MlpConfig {
            d_in,
            hidden_sizes,
            dropout_p,
            learning_rate,
            batch_size,
            epochs,
            folds,
            rng_seed,
            input_scaling,
        };
        config.validate().map_err(|e| MlpError::Corrupt(e.to_string()))?;
        let expected = config.layer_shapes();
        let n_layers = read_u32(&mut r)? as usize;
        if n_layers != expected.len() {
            return Err(MlpError::ShapeMismatch(format!(
                "file has {n_layers} layers, config implies {}",
                expected.len()
            )));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for (i, &(want_in, want_out)) in expected.iter().enumerate() {
            let inputs = read_u32(&mut r)? as usize;
            let outputs = read_u32(&mut r)? as usize;
            let has_norm = read_u8(&mut r)? != 0;
            let want_norm = i + 1 < n_layers;
            if (inputs, outputs, has_norm) != (want_in, want_out, want_norm) {
                return Err(MlpError::ShapeMismatch(format!(
                    "layer {i} is {inputs}x{outputs} (norm {has_norm}), config implies {want_in}x{want_out} (norm {want_norm})"
                )));
            }
            let mut read_vec = |n: usize| -> Result<Vec<T>, MlpError> {
                (0..n)
                    .map(|_| {
                        let v = if width == 8 { read_f64(&mut r)? } else { f64::from(read_f32(&mut r)?) };
                        if !v.is_finite() {
                            return Err(MlpError::Corrupt(format!("non-finite parameter in layer {i}")));
                        }
                        Ok(T::of(v))
                    })
                    .collect()
            };
            let weight = read_vec(inputs * outputs)?;
            let bias = read_vec(outputs)?;
            let norm_len = if has_norm { outputs } else { 0 };
            let norm_gain = read_vec(norm_len)?;
            let norm_shift = read_vec(norm_len)?;
            layers.push(LayerParams {
                inputs,
                outputs,
                weight,
                bias,
                norm_gain,
                norm_shift,
            });
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(MlpError::Corrupt("trailing bytes after last layer".into()));
        }
        Ok(Self {
            config,
            params: MlpParams { layers },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), MlpError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MlpError> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}
