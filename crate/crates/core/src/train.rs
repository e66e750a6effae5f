//! Minibatch optimization of the full objective, evaluation, metrics and
//! checkpoints.
//!
//! All randomness is derived from a single run seed: parameter init, the
//! per-epoch shuffles, and per-step augmentation seeds. Together with the
//! step counter stored in a checkpoint this makes resumed runs identical
//! to uninterrupted ones.

use std::fs::{self, File};
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{elastic_deform, ElasticParams};
use crate::dataset::{BatchStream, Dataset};
use crate::loss::{self, Hyperparams, LossBreakdown, LossError, Optimizer, STEP_CSV_HEADER};
use crate::model::{self, HeadMode, ModelConfig, ModelError, NetworkParams, WMode};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("non-finite gradient in {tensor} at step {step}")]
    NonFiniteGradient { tensor: String, step: u64 },
    #[error("dataset does not fit the model: {0}")]
    Mismatch(String),
    #[error("invalid hyperparameters: {0}")]
    Hyper(String),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

/// Moment estimates kept by the adaptive optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    pub first: NetworkParams,
    pub second: NetworkParams,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: NetworkParams,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Completed epochs.
    pub epoch: u64,
    pub rng_seed: u64,
    pub best_validation_accuracy: f64,
    pub adam: Option<AdamMoments>,
}

/// Mixes a run seed with a purpose tag (splitmix64 finalizer).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SEED_INIT: u64 = 1;
const SEED_SHUFFLE: u64 = 2;
const SEED_AUGMENT: u64 = 3;

impl TrainState {
    pub fn fresh(cfg: &ModelConfig, hyper: &Hyperparams, seed: u64) -> Result<Self, ModelError> {
        let params = model::init_params(cfg, derive_seed(seed, SEED_INIT))?;
        let adam = (hyper.optimizer == Optimizer::Adam).then(|| AdamMoments {
            first: params.zeros_like(),
            second: params.zeros_like(),
        });
        Ok(Self {
            params,
            step: 0,
            epoch: 0,
            rng_seed: seed,
            best_validation_accuracy: 0.0,
            adam,
        })
    }
}

/// Whether a named parameter is updated under `cfg`.
fn is_trainable(name: &str, cfg: &ModelConfig) -> bool {
    if name == "weights" {
        return cfg.w_mode == WMode::Learned;
    }
    if name.ends_with(".bias") {
        return cfg.conv_bias;
    }
    true
}

fn check_finite(grads: &NetworkParams, step: u64) -> Result<(), TrainError> {
    match grads.named().into_iter().find(|(_, t)| !t.is_finite()) {
        Some((tensor, _)) => Err(TrainError::NonFiniteGradient { tensor, step }),
        None => Ok(()),
    }
}

/// `θ ← θ − lr·g`
pub fn sgd_update(param: &mut Tensor, grad: &Tensor, lr: f64) {
    param.add_scaled(grad, -lr);
}

/// Plain gradient-descent step on every trainable tensor. Rejects
/// non-finite gradients before touching any parameter.
pub fn sgd_step(state: &mut TrainState, grads: &NetworkParams, lr: f64, cfg: &ModelConfig) -> Result<(), TrainError> {
    check_finite(grads, state.step)?;
    let g = grads.named();
    for ((name, p), (_, g)) in state.params.named_mut().into_iter().zip(g) {
        if is_trainable(&name, cfg) {
            sgd_update(p, g, lr);
        }
    }
    state.step += 1;
    Ok(())
}

/// Adaptive-moment step (bias-corrected).
pub fn adam_step(state: &mut TrainState, grads: &NetworkParams, lr: f64, cfg: &ModelConfig) -> Result<(), TrainError> {
    check_finite(grads, state.step)?;
    let params = &state.params;
    let moments = state.adam.get_or_insert_with(|| AdamMoments {
        first: params.zeros_like(),
        second: params.zeros_like(),
    });
    let t = (state.step + 1) as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let params = state.params.named_mut();
    let firsts = moments.first.named_mut();
    let seconds = moments.second.named_mut();
    for ((((name, p), (_, m)), (_, v)), (_, g)) in params.into_iter().zip(firsts).zip(seconds).zip(grads.named()) {
        if !is_trainable(&name, cfg) {
            continue;
        }
        for (((p, m), v), &g) in p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data())
        {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        }
    }
    state.step += 1;
    Ok(())
}

/// Fraction of correct predictions on `d`, computed in chunks without
/// augmentation.
pub fn evaluate(params: &NetworkParams, cfg: &ModelConfig, d: &Dataset) -> Result<f64, ModelError> {
    if d.is_empty() {
        return Ok(0.0);
    }
    let preds = predict_dataset(params, cfg, d)?;
    let correct = preds.iter().zip(&d.labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / d.len() as f64)
}

const EVAL_CHUNK: usize = 250;

pub fn predict_dataset(params: &NetworkParams, cfg: &ModelConfig, d: &Dataset) -> Result<Vec<usize>, ModelError> {
    let mut out = Vec::with_capacity(d.len());
    let idx: Vec<usize> = (0..d.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        out.extend(model::predict(params, cfg, &d.images.select_rows(chunk))?);
    }
    Ok(out)
}

/// Mean per-example squared reconstruction error over `d`.
pub fn mean_reconstruction_error(params: &NetworkParams, cfg: &ModelConfig, d: &Dataset) -> Result<f64, LossError> {
    let idx: Vec<usize> = (0..d.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(EVAL_CHUNK) {
        let x = d.images.select_rows(chunk);
        let trace = model::forward(params, cfg, &x)?;
        let rec = trace.reconstruction.ok_or(ModelError::NoDecoder)?;
        total += loss::reconstruction_loss(&x, &rec)? * chunk.len() as f64;
    }
    Ok(total / d.len() as f64)
}

/// Elastic deformation settings; the seed is supplied per step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentSettings {
    pub sigma: f64,
    pub alpha: f64,
}

impl Default for AugmentSettings {
    fn default() -> Self {
        Self {
            sigma: 4.0,
            alpha: 20.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub hyper: Hyperparams,
    pub augment: Option<AugmentSettings>,
    /// Write `epoch-NNNN.pnck` every this many epochs (0 disables).
    pub checkpoint_every: u64,
    /// Directory for checkpoints and CSV logs; nothing is written if `None`.
    pub out_dir: Option<PathBuf>,
    /// Evaluate accuracy on the (undeformed) training set each epoch.
    pub eval_train: bool,
}

impl TrainOptions {
    pub fn new(hyper: Hyperparams) -> Self {
        Self {
            hyper,
            augment: None,
            checkpoint_every: 25,
            out_dir: None,
            eval_train: true,
        }
    }
}

/// Steps through minibatches of one training set.
pub struct Trainer<'a> {
    cfg: &'a ModelConfig,
    opts: &'a TrainOptions,
    train: &'a Dataset,
    state: TrainState,
    stream: BatchStream,
}

impl<'a> Trainer<'a> {
    pub fn new(
        cfg: &'a ModelConfig,
        opts: &'a TrainOptions,
        train: &'a Dataset,
        seed: u64,
    ) -> Result<Self, TrainError> {
        let state = TrainState::fresh(cfg, &opts.hyper, seed)?;
        Self::resume(cfg, opts, train, state)
    }

    pub fn resume(
        cfg: &'a ModelConfig,
        opts: &'a TrainOptions,
        train: &'a Dataset,
        state: TrainState,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        opts.hyper.validate().map_err(TrainError::Hyper)?;
        if train.image_shape() != cfg.input_shape {
            return Err(TrainError::Mismatch(format!(
                "images are {:?}, model `{}` expects {:?}",
                train.image_shape(),
                cfg.name,
                cfg.input_shape
            )));
        }
        if train.n_classes > cfg.n_classes {
            return Err(TrainError::Mismatch(format!(
                "dataset has {} classes, model has {}",
                train.n_classes, cfg.n_classes
            )));
        }
        if train.is_empty() {
            return Err(TrainError::Mismatch("training set is empty".into()));
        }
        let bs = opts.hyper.batch_size;
        let per_epoch = train.len().div_ceil(bs) as u64;
        let stream = BatchStream::resume(
            train.len(),
            bs,
            derive_seed(state.rng_seed, SEED_SHUFFLE),
            state.step / per_epoch,
            (state.step % per_epoch) as usize,
        );
        Ok(Self {
            cfg,
            opts,
            train,
            state,
            stream,
        })
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.stream.batches_per_epoch() as u64
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut TrainState {
        &mut self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    /// One optimizer step; returns the loss of the (augmented) batch before
    /// the update and its size.
    pub fn step(&mut self) -> Result<(LossBreakdown, usize), TrainError> {
        let batch = self.stream.next_batch(self.train);
        let images = match self.opts.augment {
            Some(a) => {
                let seed = derive_seed(derive_seed(self.state.rng_seed, SEED_AUGMENT), self.state.step);
                elastic_deform(&batch.images, &ElasticParams::new(a.sigma, a.alpha, seed))
            }
            None => batch.images,
        };
        let hyper = &self.opts.hyper;
        let (breakdown, grads, _) = loss::loss_and_grad(&self.state.params, self.cfg, &images, &batch.labels, hyper)?;
        match hyper.optimizer {
            Optimizer::Sgd => sgd_step(&mut self.state, &grads, hyper.learning_rate, self.cfg)?,
            Optimizer::Adam => adam_step(&mut self.state, &grads, hyper.learning_rate, self.cfg)?,
        }
        if self.state.step.is_multiple_of(self.steps_per_epoch()) {
            self.state.epoch = self.state.step / self.steps_per_epoch();
        }
        Ok((breakdown, batch.labels.len()))
    }

    /// Runs to the end of the current epoch. Returns every step's loss.
    pub fn run_epoch(&mut self) -> Result<Vec<(u64, LossBreakdown, usize)>, TrainError> {
        let spe = self.steps_per_epoch();
        let mut out = Vec::new();
        loop {
            let step = self.state.step;
            let (b, n) = self.step()?;
            out.push((step, b, n));
            if self.state.step.is_multiple_of(spe) {
                break;
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: u64,
    pub train_accuracy: Option<f64>,
    pub validation_accuracy: Option<f64>,
    /// Batch-size-weighted mean of the epoch's step losses.
    pub loss: LossBreakdown,
    pub seconds: f64,
}

pub const METRICS_CSV_HEADER: &str = "epoch,train_acc,val_acc,E,R,R1,R2,L,seconds";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            opt(self.train_accuracy),
            opt(self.validation_accuracy),
            l.cross_entropy,
            l.reconstruction,
            l.proto_to_data,
            l.data_to_proto,
            l.total,
            self.seconds
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub epochs: Vec<EpochMetrics>,
}

impl Metrics {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(METRICS_CSV_HEADER);
        s.push('\n');
        for e in &self.epochs {
            s.push_str(&e.csv_row());
            s.push('\n');
        }
        s
    }
}

/// Training and validation sets for a run.
#[derive(Debug, Clone, Copy)]
pub struct Splits<'a> {
    pub train: &'a Dataset,
    pub validation: Option<&'a Dataset>,
}

fn io_at(path: &Path) -> impl FnOnce(io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Trains until `hyper.epochs` epochs are complete, starting from `resume`
/// if given. `on_epoch` sees each epoch's metrics and state; it may write
/// extra artifacts.
pub fn train_loop(
    cfg: &ModelConfig,
    opts: &TrainOptions,
    data: Splits<'_>,
    seed: u64,
    resume: Option<TrainState>,
    mut on_epoch: impl FnMut(&EpochMetrics, &TrainState) -> Result<(), TrainError>,
) -> Result<(TrainState, Metrics), TrainError> {
    let mut trainer = match resume {
        Some(state) => Trainer::resume(cfg, opts, data.train, state)?,
        None => Trainer::new(cfg, opts, data.train, seed)?,
    };
    let mut metrics = Metrics::default();
    let mut step_log = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io_at(dir))?;
            let path = dir.join("steps.csv");
            let fresh = !path.exists() || trainer.state().step == 0;
            let file = fs::OpenOptions::new()
                .create(true)
                .append(!fresh)
                .write(true)
                .truncate(fresh)
                .open(&path)
                .map_err(io_at(&path))?;
            let mut w = BufWriter::new(file);
            if fresh {
                writeln!(w, "{STEP_CSV_HEADER}").map_err(io_at(&path))?;
            }
            Some((w, path))
        }
        None => None,
    };

    while trainer.state().epoch < opts.hyper.epochs {
        let started = Instant::now();
        let steps = trainer.run_epoch()?;
        if let Some((w, path)) = &mut step_log {
            for (step, b, _) in &steps {
                writeln!(w, "{}", b.csv_row(*step)).map_err(io_at(path))?;
            }
            w.flush().map_err(io_at(path))?;
        }
        let weighted: Vec<(LossBreakdown, usize)> = steps.iter().map(|(_, b, n)| (*b, *n)).collect();
        let state = trainer.state();
        let train_accuracy = if opts.eval_train {
            Some(evaluate(&state.params, cfg, data.train)?)
        } else {
            None
        };
        let validation_accuracy = data.validation.map(|v| evaluate(&state.params, cfg, v)).transpose()?;
        let epoch = EpochMetrics {
            epoch: state.epoch,
            train_accuracy,
            validation_accuracy,
            loss: LossBreakdown::weighted_mean(&weighted),
            seconds: started.elapsed().as_secs_f64(),
        };
        let improved = validation_accuracy.is_some_and(|v| v > state.best_validation_accuracy);
        if improved {
            trainer.state_mut().best_validation_accuracy = validation_accuracy.unwrap_or_default();
        }
        let state = trainer.state();
        if let Some(dir) = &opts.out_dir {
            if improved {
                save_checkpoint(state, cfg, &opts.hyper, &dir.join("best.pnck"))?;
            }
            if opts.checkpoint_every > 0 && state.epoch % opts.checkpoint_every == 0 {
                save_checkpoint(
                    state,
                    cfg,
                    &opts.hyper,
                    &dir.join(format!("epoch-{:04}.pnck", state.epoch)),
                )?;
            }
        }
        on_epoch(&epoch, state)?;
        metrics.epochs.push(epoch);
        if let Some(dir) = &opts.out_dir {
            let path = dir.join("metrics.csv");
            append_metrics(
                &path,
                metrics.epochs.last().expect("just pushed"),
                trainer.state().epoch == 1,
            )?;
        }
    }
    let state = trainer.into_state();
    if let Some(dir) = &opts.out_dir {
        save_checkpoint(&state, cfg, &opts.hyper, &dir.join("last.pnck"))?;
    }
    Ok((state, metrics))
}

fn append_metrics(path: &Path, row: &EpochMetrics, first: bool) -> Result<(), TrainError> {
    let fresh = first || !path.exists();
    let file = fs::OpenOptions::new()
        .create(true)
        .append(!fresh)
        .write(true)
        .truncate(fresh)
        .open(path)
        .map_err(io_at(path))?;
    let mut w = BufWriter::new(file);
    if fresh {
        writeln!(w, "{METRICS_CSV_HEADER}").map_err(io_at(path))?;
    }
    writeln!(w, "{}", row.csv_row()).map_err(io_at(path))?;
    w.flush().map_err(io_at(path))
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PNCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("not a checkpoint: magic bytes {found:?}, expected \"PNCK\"")]
    BadMagic { found: [u8; 4] },
    #[error("checkpoint format version {found} is not supported (expected {CHECKPOINT_VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint tensor {name} has shape {actual:?}, model needs {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("checkpoint was written for model `{found}`, not the requested `{expected}`")]
    ConfigMismatch { expected: String, found: String },
}

#[derive(Serialize, Deserialize)]
struct ConfigEcho {
    model: ModelConfig,
    hyper: Hyperparams,
}

/// A decoded checkpoint file.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub hyper: Hyperparams,
    pub state: TrainState,
}

impl Checkpoint {
    /// Ensures the checkpoint was produced for `cfg`.
    pub fn validate_against(&self, cfg: &ModelConfig) -> Result<(), CheckpointError> {
        if &self.model != cfg {
            return Err(CheckpointError::ConfigMismatch {
                expected: cfg.name.clone(),
                found: self.model.name.clone(),
            });
        }
        Ok(())
    }
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(buf: &mut Vec<u8>, b: &[u8]) {
    put_u32(buf, b.len() as u32);
    buf.extend_from_slice(b);
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_bytes(buf, name.as_bytes());
    put_u32(buf, t.rank() as u32);
    for &d in t.shape() {
        put_u64(buf, d as u64);
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes a checkpoint into bytes.
///
/// Layout (little endian): `"PNCK"`, `u32` version, length-prefixed JSON
/// config echo, `u64` step, `u64` epoch, `u64` seed, `f64` best validation
/// accuracy, `u8` optimizer-state flag, `u32` tensor count, then per
/// tensor: length-prefixed name, `u32` rank, `u64` dims, `f64` values.
pub fn encode_checkpoint(state: &TrainState, cfg: &ModelConfig, hyper: &Hyperparams) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut buf, CHECKPOINT_VERSION);
    let echo = serde_json::to_vec(&ConfigEcho {
        model: cfg.clone(),
        hyper: *hyper,
    })
    .expect("config serializes");
    put_bytes(&mut buf, &echo);
    put_u64(&mut buf, state.step);
    put_u64(&mut buf, state.epoch);
    put_u64(&mut buf, state.rng_seed);
    buf.extend_from_slice(&state.best_validation_accuracy.to_le_bytes());
    buf.push(state.adam.is_some() as u8);

    let mut tensors: Vec<(String, &Tensor)> = state.params.named();
    if let Some(adam) = &state.adam {
        tensors.extend(adam.first.named().into_iter().map(|(n, t)| (format!("adam.m.{n}"), t)));
        tensors.extend(adam.second.named().into_iter().map(|(n, t)| (format!("adam.v.{n}"), t)));
    }
    put_u32(&mut buf, tensors.len() as u32);
    for (name, t) in tensors {
        put_tensor(&mut buf, &name, t);
    }
    buf
}

pub fn save_checkpoint(
    state: &TrainState,
    cfg: &ModelConfig,
    hyper: &Hyperparams,
    path: &Path,
) -> Result<(), CheckpointError> {
    let bytes = encode_checkpoint(state, cfg, hyper);
    let tmp = path.with_extension("pnck.tmp");
    let io = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    fs::write(&tmp, bytes).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CheckpointError::Malformed(format!("unexpected end of file at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn prefixed(&mut self) -> Result<&'b [u8], CheckpointError> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    fn tensor(&mut self) -> Result<(String, Tensor), CheckpointError> {
        let name = String::from_utf8(self.prefixed()?.to_vec())
            .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?;
        let rank = self.u32()? as usize;
        let shape = (0..rank)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let len = len
            .filter(|&l| l.checked_mul(8).is_some_and(|b| b <= self.bytes.len()))
            .ok_or_else(|| CheckpointError::Malformed(format!("tensor {name} has impossible shape {shape:?}")))?;
        let data = self
            .take(len * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        Ok((name, t))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r
        .take(4)
        .map_err(|_| CheckpointError::BadMagic { found: [0; 4] })?
        .try_into()
        .expect("4 bytes");
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic { found: magic });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion { found: version });
    }
    let echo: ConfigEcho =
        serde_json::from_slice(r.prefixed()?).map_err(|e| CheckpointError::Malformed(format!("config echo: {e}")))?;
    let step = r.u64()?;
    let epoch = r.u64()?;
    let rng_seed = r.u64()?;
    let best_validation_accuracy = r.f64()?;
    let has_adam = r.take(1)?[0] != 0;
    let count = r.u32()? as usize;
    let mut tensors = std::collections::HashMap::with_capacity(count);
    for _ in 0..count {
        let (name, t) = r.tensor()?;
        tensors.insert(name, t);
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }

    let cfg = &echo.model;
    let mut rebuild = |prefix: &str| {
        NetworkParams::from_named(cfg, |name| tensors.remove(&format!("{prefix}{name}"))).map_err(|e| match e {
            ModelError::ParamShape { name, expected, actual } => CheckpointError::ShapeMismatch {
                name: format!("{prefix}{name}"),
                expected,
                actual,
            },
            other => CheckpointError::Malformed(other.to_string()),
        })
    };
    let params = rebuild("")?;
    let adam = if has_adam {
        Some(AdamMoments {
            first: rebuild("adam.m.")?,
            second: rebuild("adam.v.")?,
        })
    } else {
        None
    };
    if let Some(extra) = tensors.keys().next() {
        return Err(CheckpointError::Malformed(format!("unexpected tensor {extra}")));
    }
    Ok(Checkpoint {
        model: echo.model,
        hyper: echo.hyper,
        state: TrainState {
            params,
            step,
            epoch,
            rng_seed,
            best_validation_accuracy,
            adam,
        },
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    decode_checkpoint(&bytes)
}

/// Loads a checkpoint and checks it belongs to `cfg`.
pub fn load_checkpoint_for(path: &Path, cfg: &ModelConfig) -> Result<Checkpoint, CheckpointError> {
    let ck = load_checkpoint(path)?;
    ck.validate_against(cfg)?;
    Ok(ck)
}

/// `true` when the head has prototypes that R1/R2 act on.
pub fn has_prototype_head(cfg: &ModelConfig) -> bool {
    cfg.head_mode == HeadMode::Prototype
}
