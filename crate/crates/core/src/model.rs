//! The network: convolutional encoder `f`, mirrored transposed-convolution
//! decoder `g`, and the classification head `h` made of the prototype
//! distance layer, the linear layer `W` and a softmax.

use std::fmt;
use std::str::FromStr;

use rand::distr::{Distribution, Open01};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{self, ConvSpec, Padding, ShapeError, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("unknown preset `{0}` (expected mnist, car, fashion, ablate-proto, ablate-all)")]
    UnknownPreset(String),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("model has no decoder (autoencoder disabled)")]
    NoDecoder,
    #[error("model has no prototype layer (dense ablation head)")]
    NoPrototypes,
    #[error("parameter {name} has shape {actual:?}, configuration needs {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("input batch has per-example shape {actual:?}, model expects {expected:?}")]
    Input { expected: Vec<usize>, actual: Vec<usize> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Sigmoid,
    LeakyRelu { slope: f64 },
    Relu,
    Identity,
}

impl Activation {
    pub fn forward(&self, x: &Tensor) -> Tensor {
        match *self {
            Activation::Sigmoid => tensor::sigmoid(x),
            Activation::LeakyRelu { slope } => tensor::leaky_relu(x, slope),
            Activation::Relu => tensor::relu(x),
            Activation::Identity => x.clone(),
        }
    }

    /// Gradient w.r.t. the pre-activation, given both sides of the forward.
    pub fn backward(&self, pre: &Tensor, post: &Tensor, grad: &Tensor) -> Tensor {
        match *self {
            Activation::Sigmoid => tensor::sigmoid_backward(post, grad),
            Activation::LeakyRelu { slope } => tensor::leaky_relu_backward(pre, slope, grad),
            Activation::Relu => tensor::relu_backward(pre, grad),
            Activation::Identity => grad.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub conv: ConvSpec,
    pub activation: Activation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WMode {
    Learned,
    /// `W = -I`, fixed; prediction becomes nearest-prototype.
    NegativeIdentity,
}

impl FromStr for WMode {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "learned" => Ok(WMode::Learned),
            "negid" | "negative_identity" | "negative-identity" => Ok(WMode::NegativeIdentity),
            other => Err(ModelError::Config(format!("unknown w-mode `{other}`"))),
        }
    }
}

impl fmt::Display for WMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WMode::Learned => "learned",
            WMode::NegativeIdentity => "negid",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    Prototype,
    /// Prototype layer replaced by a fully connected layer of the same width.
    DenseAblation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Mnist,
    Car,
    Fashion,
    AblateProto,
    AblateAll,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::Mnist,
        Preset::Car,
        Preset::Fashion,
        Preset::AblateProto,
        Preset::AblateAll,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Preset::Mnist => "mnist",
            Preset::Car => "car",
            Preset::Fashion => "fashion",
            Preset::AblateProto => "ablate-proto",
            Preset::AblateAll => "ablate-all",
        }
    }
}

impl FromStr for Preset {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.replace('_', "-");
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == norm)
            .ok_or_else(|| ModelError::UnknownPreset(s.to_string()))
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Leaky ReLU slope used by the car preset.
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    /// `[H, W, C]` of one input image.
    pub input_shape: [usize; 3],
    pub encoder: Vec<LayerSpec>,
    /// `decoder[i]` mirrors `encoder[L - 1 - i]` and shares its conv spec.
    pub decoder: Vec<LayerSpec>,
    pub n_prototypes: usize,
    pub n_classes: usize,
    pub w_mode: WMode,
    pub head_mode: HeadMode,
    pub autoencoder_enabled: bool,
    pub conv_bias: bool,
}

fn stack(
    input_channels: usize,
    channels: &[usize],
    kernel: usize,
    padding: Padding,
    activations: &[Activation],
) -> Vec<LayerSpec> {
    let mut cin = input_channels;
    channels
        .iter()
        .zip(activations)
        .map(|(&cout, &activation)| {
            let conv = ConvSpec::square(kernel, 2, padding, cin, cout);
            cin = cout;
            LayerSpec { conv, activation }
        })
        .collect()
}

fn mirror(encoder: &[LayerSpec], activations: &[Activation]) -> Vec<LayerSpec> {
    encoder
        .iter()
        .rev()
        .zip(activations)
        .map(|(l, &activation)| LayerSpec {
            conv: l.conv,
            activation,
        })
        .collect()
}

/// Architecture for a named preset.
pub fn preset(p: Preset) -> ModelConfig {
    let sig = Activation::Sigmoid;
    match p {
        Preset::Mnist | Preset::Fashion => {
            let encoder = stack(1, &[32, 32, 32, 10], 3, Padding::Same, &[sig; 4]);
            let decoder = mirror(&encoder, &[sig; 4]);
            ModelConfig {
                name: p.name().into(),
                input_shape: [28, 28, 1],
                encoder,
                decoder,
                n_prototypes: 15,
                n_classes: 10,
                w_mode: WMode::Learned,
                head_mode: HeadMode::Prototype,
                autoencoder_enabled: true,
                conv_bias: true,
            }
        }
        Preset::Car => {
            let leaky = Activation::LeakyRelu {
                slope: DEFAULT_LEAKY_SLOPE,
            };
            let encoder = stack(3, &[32, 10], 5, Padding::Valid, &[leaky, sig]);
            let decoder = mirror(&encoder, &[leaky, sig]);
            ModelConfig {
                name: p.name().into(),
                input_shape: [64, 64, 3],
                encoder,
                decoder,
                n_prototypes: 11,
                n_classes: 11,
                w_mode: WMode::Learned,
                head_mode: HeadMode::Prototype,
                autoencoder_enabled: true,
                conv_bias: true,
            }
        }
        Preset::AblateProto => ModelConfig {
            name: p.name().into(),
            head_mode: HeadMode::DenseAblation,
            ..preset(Preset::Mnist)
        },
        Preset::AblateAll => ModelConfig {
            name: p.name().into(),
            encoder: stack(1, &[32, 32, 32, 10], 3, Padding::Same, &[Activation::Relu; 4]),
            decoder: Vec::new(),
            head_mode: HeadMode::DenseAblation,
            autoencoder_enabled: false,
            ..preset(Preset::Mnist)
        },
    }
}

impl ModelConfig {
    pub fn with_w_mode(mut self, mode: WMode) -> Self {
        self.w_mode = mode;
        self
    }

    /// Spatial shape `[H, W, C]` produced by each encoder layer.
    pub fn encoder_shapes(&self) -> Result<Vec<[usize; 3]>, ModelError> {
        let mut shape = self.input_shape;
        let mut shapes = Vec::with_capacity(self.encoder.len());
        for (i, layer) in self.encoder.iter().enumerate() {
            if layer.conv.in_channels != shape[2] {
                return Err(ModelError::Config(format!(
                    "encoder layer {i} takes {} channels but receives {}",
                    layer.conv.in_channels, shape[2]
                )));
            }
            let (h, w) = layer.conv.output_hw(shape[0], shape[1]).ok_or_else(|| {
                ModelError::Config(format!(
                    "encoder layer {i}: kernel does not fit a {}x{} input",
                    shape[0], shape[1]
                ))
            })?;
            shape = [h, w, layer.conv.out_channels];
            shapes.push(shape);
        }
        Ok(shapes)
    }

    /// Feature-map shape of the encoder output.
    pub fn latent_shape(&self) -> [usize; 3] {
        self.encoder_shapes()
            .ok()
            .and_then(|s| s.last().copied())
            .unwrap_or(self.input_shape)
    }

    /// `q`, the length of a code vector.
    pub fn latent_dim(&self) -> usize {
        self.latent_shape().iter().product()
    }

    /// Input shape of encoder layer `i` (the target shape of its mirror).
    fn encoder_input_shape(&self, shapes: &[[usize; 3]], i: usize) -> [usize; 3] {
        if i == 0 {
            self.input_shape
        } else {
            shapes[i - 1]
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.encoder.is_empty() {
            return Err(ModelError::Config("encoder has no layers".into()));
        }
        if self.n_prototypes == 0 || self.n_classes == 0 {
            return Err(ModelError::Config("prototype and class counts must be positive".into()));
        }
        self.encoder_shapes()?;
        if self.w_mode == WMode::NegativeIdentity {
            if self.n_prototypes != self.n_classes {
                return Err(ModelError::Config(format!(
                    "W = -I needs one prototype per class, got m = {} and K = {}",
                    self.n_prototypes, self.n_classes
                )));
            }
            if self.head_mode != HeadMode::Prototype {
                return Err(ModelError::Config("W = -I requires the prototype head".into()));
            }
        }
        if self.autoencoder_enabled {
            if self.decoder.len() != self.encoder.len() {
                return Err(ModelError::Config(format!(
                    "decoder has {} layers, encoder has {}",
                    self.decoder.len(),
                    self.encoder.len()
                )));
            }
            for (i, (d, e)) in self.decoder.iter().zip(self.encoder.iter().rev()).enumerate() {
                if d.conv != e.conv {
                    return Err(ModelError::Config(format!(
                        "decoder layer {i} does not mirror its encoder layer"
                    )));
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub kernel: Tensor,
    pub bias: Tensor,
}

/// Learnable tensors. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub encoder: Vec<ConvParams>,
    pub decoder: Vec<ConvParams>,
    /// `[m, q]`: prototype vectors, or the dense layer's weights under the
    /// dense ablation head.
    pub prototypes: Tensor,
    /// `[m]`, dense ablation head only.
    pub head_bias: Option<Tensor>,
    /// `[K, m]`
    pub weights: Tensor,
}

impl NetworkParams {
    pub fn zeros_like(&self) -> Self {
        let z = |t: &Tensor| Tensor::zeros(t.shape());
        let zc = |l: &Vec<ConvParams>| {
            l.iter()
                .map(|c| ConvParams {
                    kernel: z(&c.kernel),
                    bias: z(&c.bias),
                })
                .collect()
        };
        Self {
            encoder: zc(&self.encoder),
            decoder: zc(&self.decoder),
            prototypes: z(&self.prototypes),
            head_bias: self.head_bias.as_ref().map(z),
            weights: z(&self.weights),
        }
    }

    /// Stable names used by checkpoints and diagnostics.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (part, layers) in [("encoder", &self.encoder), ("decoder", &self.decoder)] {
            for (i, l) in layers.iter().enumerate() {
                out.push((format!("{part}.{i}.kernel"), &l.kernel));
                out.push((format!("{part}.{i}.bias"), &l.bias));
            }
        }
        out.push(("prototypes".into(), &self.prototypes));
        if let Some(b) = &self.head_bias {
            out.push(("head_bias".into(), b));
        }
        out.push(("weights".into(), &self.weights));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (part, layers) in [("encoder", &mut self.encoder), ("decoder", &mut self.decoder)] {
            for (i, l) in layers.iter_mut().enumerate() {
                out.push((format!("{part}.{i}.kernel"), &mut l.kernel));
                out.push((format!("{part}.{i}.bias"), &mut l.bias));
            }
        }
        out.push(("prototypes".into(), &mut self.prototypes));
        if let Some(b) = &mut self.head_bias {
            out.push(("head_bias".into(), b));
        }
        out.push(("weights".into(), &mut self.weights));
        out
    }

    /// Expected `(name, shape)` list for a configuration.
    pub fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, l) in cfg.encoder.iter().enumerate() {
            out.push((format!("encoder.{i}.kernel"), l.conv.kernel_shape().to_vec()));
            out.push((format!("encoder.{i}.bias"), vec![l.conv.out_channels]));
        }
        if cfg.autoencoder_enabled {
            for (i, l) in cfg.decoder.iter().enumerate() {
                out.push((format!("decoder.{i}.kernel"), l.conv.kernel_shape().to_vec()));
                out.push((format!("decoder.{i}.bias"), vec![l.conv.in_channels]));
            }
        }
        out.push(("prototypes".into(), vec![cfg.n_prototypes, cfg.latent_dim()]));
        if cfg.head_mode == HeadMode::DenseAblation {
            out.push(("head_bias".into(), vec![cfg.n_prototypes]));
        }
        out.push(("weights".into(), vec![cfg.n_classes, cfg.n_prototypes]));
        out
    }

    /// Rebuilds parameters from named tensors, checking every shape.
    pub fn from_named(cfg: &ModelConfig, mut lookup: impl FnMut(&str) -> Option<Tensor>) -> Result<Self, ModelError> {
        let mut take = |name: &str, shape: &[usize]| -> Result<Tensor, ModelError> {
            let t = lookup(name).ok_or_else(|| ModelError::ParamShape {
                name: name.to_string(),
                expected: shape.to_vec(),
                actual: Vec::new(),
            })?;
            if t.shape() != shape {
                return Err(ModelError::ParamShape {
                    name: name.to_string(),
                    expected: shape.to_vec(),
                    actual: t.shape().to_vec(),
                });
            }
            Ok(t)
        };
        let mut layers = |part: &str, specs: &[LayerSpec], bias_len: fn(&ConvSpec) -> usize| {
            specs
                .iter()
                .enumerate()
                .map(|(i, l)| {
                    Ok(ConvParams {
                        kernel: take(&format!("{part}.{i}.kernel"), &l.conv.kernel_shape())?,
                        bias: take(&format!("{part}.{i}.bias"), &[bias_len(&l.conv)])?,
                    })
                })
                .collect::<Result<Vec<_>, ModelError>>()
        };
        let encoder = layers("encoder", &cfg.encoder, |c| c.out_channels)?;
        let decoder = if cfg.autoencoder_enabled {
            layers("decoder", &cfg.decoder, |c| c.in_channels)?
        } else {
            Vec::new()
        };
        let prototypes = take("prototypes", &[cfg.n_prototypes, cfg.latent_dim()])?;
        let head_bias = match cfg.head_mode {
            HeadMode::DenseAblation => Some(take("head_bias", &[cfg.n_prototypes])?),
            HeadMode::Prototype => None,
        };
        let weights = take("weights", &[cfg.n_classes, cfg.n_prototypes])?;
        Ok(Self {
            encoder,
            decoder,
            prototypes,
            head_bias,
            weights,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }
}

fn glorot(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-a..=a))
}

fn negative_identity(k: usize) -> Tensor {
    Tensor::from_fn(&[k, k], |i| if i / k == i % k { -1.0 } else { 0.0 })
}

/// Seeded initialization.
///
/// Conv kernels: uniform `±sqrt(6 / (fan_in + fan_out))` with
/// `fan = kh·kw·channels`, biases zero. Prototypes: uniform in the open
/// unit hypercube. `W`: uniform `±0.01`, or `-I` in negative-identity mode.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<NetworkParams, ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let conv = |l: &LayerSpec, bias_len: usize, rng: &mut ChaCha8Rng| {
        let c = &l.conv;
        let taps = c.kernel_h * c.kernel_w;
        ConvParams {
            kernel: glorot(&c.kernel_shape(), taps * c.in_channels, taps * c.out_channels, rng),
            bias: Tensor::zeros(&[bias_len]),
        }
    };
    let encoder: Vec<_> = cfg
        .encoder
        .iter()
        .map(|l| conv(l, l.conv.out_channels, &mut rng))
        .collect();
    let decoder: Vec<_> = if cfg.autoencoder_enabled {
        cfg.decoder
            .iter()
            .map(|l| conv(l, l.conv.in_channels, &mut rng))
            .collect()
    } else {
        Vec::new()
    };
    let (m, q, k) = (cfg.n_prototypes, cfg.latent_dim(), cfg.n_classes);
    let (prototypes, head_bias) = match cfg.head_mode {
        HeadMode::Prototype => (Tensor::from_fn(&[m, q], |_| Open01.sample(&mut rng)), None),
        HeadMode::DenseAblation => (glorot(&[m, q], q, m, &mut rng), Some(Tensor::zeros(&[m]))),
    };
    let weights = match cfg.w_mode {
        WMode::Learned => Tensor::from_fn(&[k, m], |_| rng.random_range(-0.01..=0.01)),
        WMode::NegativeIdentity => negative_identity(k),
    };
    Ok(NetworkParams {
        encoder,
        decoder,
        prototypes,
        head_bias,
        weights,
    })
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
struct LayerCache {
    inputs: Vec<Tensor>,
    pre: Vec<Tensor>,
    post: Vec<Tensor>,
}

/// Intermediate quantities of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `[b, q]` encoded inputs.
    pub z: Tensor,
    /// `[b, H, W, C]`, present when the autoencoder is enabled.
    pub reconstruction: Option<Tensor>,
    /// `[b, m]` squared distances to each prototype (dense-layer outputs
    /// under the dense ablation head).
    pub distances: Tensor,
    /// `[b, K]`
    pub logits: Tensor,
    /// `[b, K]`
    pub probabilities: Tensor,
    encoder_cache: LayerCache,
    decoder_cache: LayerCache,
}

fn check_batch(cfg: &ModelConfig, batch: &Tensor) -> Result<(), ModelError> {
    if batch.rank() != 4 || batch.shape()[1..] != cfg.input_shape {
        return Err(ModelError::Input {
            expected: cfg.input_shape.to_vec(),
            actual: batch.shape().get(1..).unwrap_or_default().to_vec(),
        });
    }
    Ok(())
}

fn run_encoder(params: &NetworkParams, cfg: &ModelConfig, batch: &Tensor) -> Result<(Tensor, LayerCache), ModelError> {
    let mut cache = LayerCache::default();
    let mut h = batch.clone();
    for (spec, p) in cfg.encoder.iter().zip(&params.encoder) {
        let pre = tensor::conv2d(&h, &p.kernel, &p.bias, &spec.conv)?;
        let post = spec.activation.forward(&pre);
        cache.inputs.push(std::mem::replace(&mut h, post.clone()));
        cache.pre.push(pre);
        cache.post.push(post);
    }
    Ok((h, cache))
}

fn run_decoder(params: &NetworkParams, cfg: &ModelConfig, latent: &Tensor) -> Result<(Tensor, LayerCache), ModelError> {
    if !cfg.autoencoder_enabled {
        return Err(ModelError::NoDecoder);
    }
    let shapes = cfg.encoder_shapes()?;
    let depth = cfg.encoder.len();
    let mut cache = LayerCache::default();
    let mut h = latent.clone();
    for (i, (spec, p)) in cfg.decoder.iter().zip(&params.decoder).enumerate() {
        let target = cfg.encoder_input_shape(&shapes, depth - 1 - i);
        let pre = tensor::deconv2d(&h, &p.kernel, &p.bias, &spec.conv, (target[0], target[1]))?;
        let post = spec.activation.forward(&pre);
        cache.inputs.push(std::mem::replace(&mut h, post.clone()));
        cache.pre.push(pre);
        cache.post.push(post);
    }
    Ok((h, cache))
}

/// Maps latent vectors `[n, q]` through the decoder to `[n, H, W, C]`.
pub fn decode(params: &NetworkParams, cfg: &ModelConfig, latent: &Tensor) -> Result<Tensor, ModelError> {
    let [h, w, c] = cfg.latent_shape();
    let maps = latent.clone().reshape(&[latent.dim(0), h, w, c])?;
    Ok(run_decoder(params, cfg, &maps)?.0)
}

/// Head outputs `[b, m]` for codes `z: [b, q]`.
fn head(params: &NetworkParams, cfg: &ModelConfig, z: &Tensor) -> Result<Tensor, ModelError> {
    match cfg.head_mode {
        HeadMode::Prototype => Ok(tensor::pairwise_sq_dist(z, &params.prototypes)?),
        HeadMode::DenseAblation => {
            let mut out = tensor::matmul_transposed(z, &params.prototypes)?;
            let bias = params.head_bias.as_ref().ok_or(ModelError::NoPrototypes)?;
            let m = bias.len();
            for row in out.data_mut().chunks_exact_mut(m) {
                for (o, b) in row.iter_mut().zip(bias.data()) {
                    *o += b;
                }
            }
            Ok(out)
        }
    }
}

/// Runs the head on given codes: returns `(distances, logits, probabilities)`.
pub fn classify_codes(
    params: &NetworkParams,
    cfg: &ModelConfig,
    z: &Tensor,
) -> Result<(Tensor, Tensor, Tensor), ModelError> {
    let distances = head(params, cfg, z)?;
    let logits = tensor::matmul_transposed(&distances, &params.weights)?;
    let probabilities = tensor::softmax_rows(&logits)?;
    Ok((distances, logits, probabilities))
}

pub fn forward(params: &NetworkParams, cfg: &ModelConfig, batch: &Tensor) -> Result<ForwardTrace, ModelError> {
    check_batch(cfg, batch)?;
    let (latent, encoder_cache) = run_encoder(params, cfg, batch)?;
    let b = batch.dim(0);
    let (reconstruction, decoder_cache) = if cfg.autoencoder_enabled {
        let (r, c) = run_decoder(params, cfg, &latent)?;
        (Some(r), c)
    } else {
        (None, LayerCache::default())
    };
    let z = latent.reshape(&[b, cfg.latent_dim()])?;
    let (distances, logits, probabilities) = classify_codes(params, cfg, &z)?;
    Ok(ForwardTrace {
        z,
        reconstruction,
        distances,
        logits,
        probabilities,
        encoder_cache,
        decoder_cache,
    })
}

/// Gradients of a scalar objective w.r.t. the trace outputs.
#[derive(Debug, Clone)]
pub struct Upstream {
    /// `[b, K]`
    pub logits: Tensor,
    /// `[b, m]`, added on top of what flows back from the logits.
    pub distances: Option<Tensor>,
    /// `[b, H, W, C]`
    pub reconstruction: Option<Tensor>,
}

/// Reverse pass through the whole network. Parameters that are not
/// trained (fixed `W = -I`, disabled conv biases) get zero gradients.
pub fn backward(
    params: &NetworkParams,
    cfg: &ModelConfig,
    trace: &ForwardTrace,
    upstream: &Upstream,
) -> Result<NetworkParams, ModelError> {
    let mut grads = params.zeros_like();
    let b = trace.z.dim(0);

    let (mut d_dist, d_w) = tensor::matmul_transposed_backward(&trace.distances, &params.weights, &upstream.logits);
    if cfg.w_mode == WMode::Learned {
        grads.weights = d_w;
    }
    if let Some(extra) = &upstream.distances {
        d_dist.add_scaled(extra, 1.0);
    }

    let mut dz = match cfg.head_mode {
        HeadMode::Prototype => {
            let (dz, dp) = tensor::pairwise_sq_dist_backward(&trace.z, &params.prototypes, &d_dist);
            grads.prototypes = dp;
            dz
        }
        HeadMode::DenseAblation => {
            let (dz, dp) = tensor::matmul_transposed_backward(&trace.z, &params.prototypes, &d_dist);
            grads.prototypes = dp;
            let m = cfg.n_prototypes;
            let mut db = Tensor::zeros(&[m]);
            for row in d_dist.data().chunks_exact(m) {
                for (s, g) in db.data_mut().iter_mut().zip(row) {
                    *s += g;
                }
            }
            grads.head_bias = Some(db);
            dz
        }
    };

    let [lh, lw, lc] = cfg.latent_shape();
    if let (Some(g_rec), true) = (&upstream.reconstruction, cfg.autoencoder_enabled) {
        let cache = &trace.decoder_cache;
        let mut g = g_rec.clone();
        for i in (0..cfg.decoder.len()).rev() {
            let spec = &cfg.decoder[i];
            let g_pre = spec.activation.backward(&cache.pre[i], &cache.post[i], &g);
            let cg = tensor::deconv2d_backward(&cache.inputs[i], &params.decoder[i].kernel, &spec.conv, &g_pre)?;
            grads.decoder[i].kernel = cg.kernel;
            grads.decoder[i].bias = cg.bias;
            g = cg.input;
        }
        dz.add_scaled(&g.reshape(&[b, lh * lw * lc])?, 1.0);
    }

    let cache = &trace.encoder_cache;
    let mut g = dz.reshape(&[b, lh, lw, lc])?;
    for i in (0..cfg.encoder.len()).rev() {
        let spec = &cfg.encoder[i];
        let g_pre = spec.activation.backward(&cache.pre[i], &cache.post[i], &g);
        let cg = tensor::conv2d_backward(&cache.inputs[i], &params.encoder[i].kernel, &spec.conv, &g_pre)?;
        grads.encoder[i].kernel = cg.kernel;
        grads.encoder[i].bias = cg.bias;
        g = cg.input;
    }

    if !cfg.conv_bias {
        for l in grads.encoder.iter_mut().chain(grads.decoder.iter_mut()) {
            l.bias = Tensor::zeros(l.bias.shape());
        }
    }
    Ok(grads)
}

/// Decodes every prototype into input space: `[m, H, W, C]`.
pub fn decode_prototypes(params: &NetworkParams, cfg: &ModelConfig) -> Result<Tensor, ModelError> {
    if !cfg.autoencoder_enabled {
        return Err(ModelError::NoDecoder);
    }
    if cfg.head_mode != HeadMode::Prototype {
        return Err(ModelError::NoPrototypes);
    }
    decode(params, cfg, &params.prototypes)
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn predict(params: &NetworkParams, cfg: &ModelConfig, batch: &Tensor) -> Result<Vec<usize>, ModelError> {
    let trace = forward(params, cfg, batch)?;
    Ok(predictions(&trace.probabilities))
}

/// Row-wise argmax of a `[b, K]` probability table.
pub fn predictions(probabilities: &Tensor) -> Vec<usize> {
    let k = probabilities.dim(1);
    probabilities.data().chunks_exact(k).map(argmax).collect()
}
