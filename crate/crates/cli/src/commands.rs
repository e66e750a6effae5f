use std::fs;
use std::path::{Path, PathBuf};

use protonet::dataset::{self, Dataset, DatasetError};
use protonet::explain::{self, ExplainError, ImageKind};
use protonet::model::{self, HeadMode, ModelConfig};
use protonet::train::{self, Checkpoint, CheckpointError, Splits, TrainError, TrainOptions};
use protonet::Tensor;

use crate::config::{DataSource, Overrides, RunConfig};
use crate::{CliError, Split};

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io { path, source } => CliError::io(&path, source),
            other => CliError::Failed(other.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io { path, source } => CliError::io(&path, source),
            other => CliError::Failed(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Checkpoint(c) => c.into(),
            other => CliError::Failed(other.to_string()),
        }
    }
}

impl From<ExplainError> for CliError {
    fn from(e: ExplainError) -> Self {
        CliError::Failed(e.to_string())
    }
}

impl From<model::ModelError> for CliError {
    fn from(e: model::ModelError) -> Self {
        CliError::Failed(e.to_string())
    }
}

pub struct Data {
    pub train: Dataset,
    pub validation: Option<Dataset>,
    pub test: Dataset,
}

impl Data {
    fn split(&self, s: Split) -> Result<&Dataset, CliError> {
        match s {
            Split::Train => Ok(&self.train),
            Split::Test => Ok(&self.test),
            Split::Validation => self
                .validation
                .as_ref()
                .ok_or_else(|| CliError::Usage("no validation split (set --validation N)".into())),
        }
    }
}

/// Loads train/validation/test as described by `cfg`, shaped for `model`.
pub fn load_data(cfg: &RunConfig, model: &ModelConfig) -> Result<Data, CliError> {
    let k = model.n_classes;
    let (full, test) = match &cfg.data {
        Some(DataSource::Idx { dir }) => {
            let (ti, tl) = dataset::mnist_paths(dir, true);
            let (ei, el) = dataset::mnist_paths(dir, false);
            (
                dataset::load_idx(&ti, &tl)?.with_classes(k)?,
                dataset::load_idx(&ei, &el)?.with_classes(k)?,
            )
        }
        Some(DataSource::Manifest { root, train, test }) => {
            let shape = Some(model.input_shape);
            (
                dataset::load_image_dir(root, train, shape)?.with_classes(k)?,
                dataset::load_image_dir(root, test, shape)?.with_classes(k)?,
            )
        }
        None => {
            return Err(CliError::Usage(
                "no dataset given: pass --data-dir DIR or --train-manifest/--test-manifest".into(),
            ))
        }
    };
    for d in [&full, &test] {
        if d.image_shape() != model.input_shape {
            return Err(CliError::Failed(format!(
                "{} images are {:?}, model `{}` expects {:?}",
                d.name,
                d.image_shape(),
                model.name,
                model.input_shape
            )));
        }
    }
    let (train, validation) = if cfg.validation > 0 {
        let n = full.len().checked_sub(cfg.validation).ok_or_else(|| {
            CliError::Usage(format!(
                "--validation {} exceeds {} training examples",
                cfg.validation,
                full.len()
            ))
        })?;
        let mut parts = dataset::split(&full, &[n, cfg.validation], 0)?;
        let v = parts.pop().expect("two parts");
        (parts.pop().expect("two parts"), Some(v))
    } else {
        (full, None)
    };
    let train = match cfg.train_subset {
        Some(n) => train.take(n),
        None => train,
    };
    let test = match cfg.test_subset {
        Some(n) => test.take(n),
        None => test,
    };
    Ok(Data {
        train,
        validation,
        test,
    })
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))
}

fn can_decode_prototypes(m: &ModelConfig) -> bool {
    m.autoencoder_enabled && m.head_mode == HeadMode::Prototype
}

pub fn train(overrides: Overrides, resume: Option<&Path>) -> Result<(), CliError> {
    let mut cfg = RunConfig::resolve(&overrides)?;
    let resumed = resume.map(train::load_checkpoint).transpose()?;
    if let Some(ck) = &resumed {
        ck.validate_against(&cfg.model)?;
        if cfg.seed.is_some_and(|s| s != ck.state.rng_seed) {
            return Err(CliError::Usage(format!(
                "--seed differs from the checkpoint's seed {}",
                ck.state.rng_seed
            )));
        }
        cfg.seed = Some(ck.state.rng_seed);
    }
    let seed = match cfg.seed {
        Some(s) => s,
        None => {
            let s = rand::random::<u64>();
            cfg.seed = Some(s);
            s
        }
    };
    println!("seed={seed}");

    let data = load_data(&cfg, &cfg.model)?;
    fs::create_dir_all(&cfg.out).map_err(|e| CliError::Failed(format!("{}: {e}", cfg.out.display())))?;
    write_file(&cfg.out.join("run.cfg"), cfg.echo())?;
    println!(
        "training {} on {} images ({} validation, {} test), optimizer {}, lr {}, batch {}, {} epochs, augment {}",
        cfg.preset,
        data.train.len(),
        data.validation.as_ref().map_or(0, Dataset::len),
        data.test.len(),
        cfg.hyper.optimizer,
        cfg.hyper.learning_rate,
        cfg.hyper.batch_size,
        cfg.hyper.epochs,
        if cfg.augment.is_some() { "on" } else { "off" },
    );

    let mut opts = TrainOptions::new(cfg.hyper);
    opts.augment = cfg.augment;
    opts.checkpoint_every = cfg.checkpoint_every;
    opts.out_dir = Some(cfg.out.clone());

    let snapshots = cfg.snapshot_every > 0 && can_decode_prototypes(&cfg.model);
    let snap_dir = cfg.out.join("prototypes");
    let model_cfg = cfg.model.clone();
    let format = cfg.format;
    let on_epoch = |m: &train::EpochMetrics, state: &train::TrainState| -> Result<(), TrainError> {
        let acc = |v: Option<f64>| v.map_or("-".to_string(), |a| format!("{a:.4}"));
        println!(
            "epoch {:>4}  train_acc {}  val_acc {}  E {:.4}  R {:.3}  R1 {:.4}  R2 {:.4}  L {:.4}  {:.1}s",
            m.epoch,
            acc(m.train_accuracy),
            acc(m.validation_accuracy),
            m.loss.cross_entropy,
            m.loss.reconstruction,
            m.loss.proto_to_data,
            m.loss.data_to_proto,
            m.loss.total,
            m.seconds
        );
        if snapshots && m.epoch.is_multiple_of(cfg.snapshot_every) {
            let images = model::decode_prototypes(&state.params, &model_cfg)?;
            explain::export_images(
                &images,
                &snap_dir.join(format!("epoch-{:04}", m.epoch)),
                "prototype",
                format,
            )
            .map_err(|e| TrainError::Mismatch(e.to_string()))?;
        }
        Ok(())
    };
    let splits = Splits {
        train: &data.train,
        validation: data.validation.as_ref(),
    };
    let (state, _) = train::train_loop(&cfg.model, &opts, splits, seed, resumed.map(|c| c.state), on_epoch)?;

    if can_decode_prototypes(&cfg.model) {
        let images = model::decode_prototypes(&state.params, &cfg.model)?;
        explain::export_images(&images, &snap_dir.join("final"), "prototype", cfg.format)?;
        let gallery = explain::reconstruction_gallery(&state.params, &cfg.model, &data.train, 10, seed)?;
        gallery.write(&cfg.out, cfg.format)?;
    }
    let test_acc = train::evaluate(&state.params, &cfg.model, &data.test)?;
    write_file(&cfg.out.join("test_acc.txt"), format!("{test_acc}\n"))?;
    println!("test_acc={test_acc}");
    Ok(())
}

fn load_for_run(checkpoint: &Path, overrides: &Overrides) -> Result<(Checkpoint, RunConfig), CliError> {
    let ck = train::load_checkpoint(checkpoint)?;
    if let Some(p) = overrides.preset {
        if p.name() != ck.model.name {
            return Err(CheckpointError::ConfigMismatch {
                expected: p.name().into(),
                found: ck.model.name.clone(),
            }
            .into());
        }
    }
    let cfg = RunConfig::resolve(overrides)?;
    Ok((ck, cfg))
}

pub fn eval(checkpoint: &Path, split: Split, overrides: Overrides) -> Result<(), CliError> {
    let (ck, cfg) = load_for_run(checkpoint, &overrides)?;
    let data = load_data(&cfg, &ck.model)?;
    let acc = train::evaluate(&ck.state.params, &ck.model, data.split(split)?)?;
    println!("test_acc={acc}");
    Ok(())
}

pub enum Target {
    File(PathBuf),
    Index(Split, usize),
}

pub fn explain(checkpoint: &Path, target: Target, overrides: Overrides) -> Result<(), CliError> {
    let ck = train::load_checkpoint(checkpoint)?;
    let m = &ck.model;
    let image: Tensor = match target {
        Target::File(path) => {
            let img = dataset::load_image_file(&path, m.input_shape[2])?;
            if img.shape() != m.input_shape {
                return Err(CliError::Failed(format!(
                    "{} is {:?}, model expects {:?}",
                    path.display(),
                    img.shape(),
                    m.input_shape
                )));
            }
            img
        }
        Target::Index(split, i) => {
            let (_, cfg) = load_for_run(checkpoint, &overrides)?;
            let data = load_data(&cfg, m)?;
            let d = data.split(split)?;
            if i >= d.len() {
                return Err(CliError::Usage(format!(
                    "--index {i} out of range for {} examples",
                    d.len()
                )));
            }
            println!("label={}", d.labels[i]);
            Tensor::new(m.input_shape.to_vec(), d.images.row(i).to_vec()).expect("row shape")
        }
    };
    let e = explain::explain_input(&ck.state.params, m, &image)?;
    let out = overrides.out.unwrap_or_else(|| PathBuf::from("explanation"));
    let json = e.write_bundle(&out, overrides.format.unwrap_or(ImageKind::Pgm))?;
    print!("{}", e.render_text());
    println!("wrote {}", json.display());
    Ok(())
}

pub fn export_prototypes(checkpoint: &Path, out: &Path, format: ImageKind) -> Result<(), CliError> {
    let ck = train::load_checkpoint(checkpoint)?;
    let images = model::decode_prototypes(&ck.state.params, &ck.model)?;
    for path in explain::export_images(&images, out, "prototype", format)? {
        println!("{}", path.display());
    }
    Ok(())
}

pub fn report_weights(checkpoint: &Path, out: Option<&Path>, format: ImageKind) -> Result<(), CliError> {
    let ck = train::load_checkpoint(checkpoint)?;
    let mut report = explain::weight_report(&ck.state.params, &ck.model);
    if let Some(dir) = out {
        if can_decode_prototypes(&ck.model) {
            let images = model::decode_prototypes(&ck.state.params, &ck.model)?;
            report.prototype_files = explain::export_images(&images, dir, "prototype", format)?
                .iter()
                .map(|p| p.file_name().expect("file").to_string_lossy().into_owned())
                .collect();
        }
        fs::create_dir_all(dir).map_err(|e| CliError::Failed(format!("{}: {e}", dir.display())))?;
        write_file(&dir.join("weights.csv"), report.to_csv())?;
        write_file(&dir.join("weights.txt"), report.render_text())?;
    }
    print!("{}", report.render_text());
    Ok(())
}
