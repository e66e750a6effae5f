//! Run configuration: preset defaults, then a `key=value` file, then flags.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Args;
use protonet::explain::ImageKind;
use protonet::model::ModelConfig;
use protonet::train::AugmentSettings;
use protonet::{preset, Hyperparams, Optimizer, Preset, WMode};

use crate::CliError;

fn parse_on_off(s: &str) -> Result<bool, String> {
    match s {
        "on" | "true" | "1" | "yes" => Ok(true),
        "off" | "false" | "0" | "no" => Ok(false),
        other => Err(format!("expected on or off, got `{other}`")),
    }
}

/// Every setting a run can take. Unset fields fall through to the next
/// layer.
#[derive(Debug, Clone, Default, PartialEq, Args)]
pub struct Overrides {
    /// mnist, car, fashion, ablate-proto or ablate-all
    #[arg(long)]
    pub preset: Option<Preset>,
    /// Run seed; drawn at random and printed when omitted
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Learning rate
    #[arg(long)]
    pub lr: Option<f64>,
    /// Weight of the reconstruction term
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Weight of R1 (prototypes near some encoded input)
    #[arg(long)]
    pub lambda1: Option<f64>,
    /// Weight of R2 (encoded inputs near some prototype)
    #[arg(long)]
    pub lambda2: Option<f64>,
    /// sgd or adam
    #[arg(long)]
    pub optimizer: Option<Optimizer>,
    /// Elastic deformation of training batches: on or off
    #[arg(long, value_parser = parse_on_off)]
    pub augment: Option<bool>,
    /// Gaussian std of the displacement field (pixels)
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Displacement scale
    #[arg(long)]
    pub alpha: Option<f64>,
    /// learned or negid (W fixed to -I; sets one prototype per class)
    #[arg(long)]
    pub w_mode: Option<WMode>,
    /// Number of prototypes m
    #[arg(long)]
    pub prototypes: Option<usize>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Directory holding MNIST-layout IDX files
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Root that manifest paths are relative to
    #[arg(long)]
    pub image_root: Option<PathBuf>,
    /// `path,label` manifest of training images
    #[arg(long)]
    pub train_manifest: Option<PathBuf>,
    /// `path,label` manifest of test images
    #[arg(long)]
    pub test_manifest: Option<PathBuf>,
    /// Keep only the first N training examples
    #[arg(long)]
    pub train_subset: Option<usize>,
    /// Hold out N training examples for validation
    #[arg(long)]
    pub validation: Option<usize>,
    /// Keep only the first N test examples
    #[arg(long)]
    pub test_subset: Option<usize>,
    /// Checkpoint every N epochs (0 disables)
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Export decoded prototypes every N epochs (0 disables)
    #[arg(long)]
    pub snapshot_every: Option<u64>,
    /// Image format: pgm or png (color images are always png)
    #[arg(long)]
    pub format: Option<ImageKind>,
}

fn parse_value<T: FromStr>(key: &str, value: &str, line: usize) -> Result<Option<T>, CliError>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map(Some)
        .map_err(|e| CliError::Usage(format!("config line {line}: bad value for {key}: {e}")))
}

impl Overrides {
    /// Parses `key = value` lines; `#` starts a comment. Keys may use `-`
    /// or `_`. A `version` key is informational and ignored.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut o = Overrides::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let n = i + 1;
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {n}: expected key=value, got `{line}`")))?;
            let key = key.trim().replace('_', "-");
            let value = value.trim();
            match key.as_str() {
                "preset" => o.preset = parse_value(&key, value, n)?,
                "seed" => o.seed = parse_value(&key, value, n)?,
                "epochs" => o.epochs = parse_value(&key, value, n)?,
                "batch-size" => o.batch_size = parse_value(&key, value, n)?,
                "lr" => o.lr = parse_value(&key, value, n)?,
                "lambda" => o.lambda = parse_value(&key, value, n)?,
                "lambda1" => o.lambda1 = parse_value(&key, value, n)?,
                "lambda2" => o.lambda2 = parse_value(&key, value, n)?,
                "optimizer" => o.optimizer = parse_value(&key, value, n)?,
                "augment" => {
                    o.augment = Some(
                        parse_on_off(value).map_err(|e| CliError::Usage(format!("config line {n}: augment: {e}")))?,
                    )
                }
                "sigma" => o.sigma = parse_value(&key, value, n)?,
                "alpha" => o.alpha = parse_value(&key, value, n)?,
                "w-mode" => o.w_mode = parse_value(&key, value, n)?,
                "prototypes" => o.prototypes = parse_value(&key, value, n)?,
                "out" => o.out = Some(value.into()),
                "data-dir" => o.data_dir = Some(value.into()),
                "image-root" => o.image_root = Some(value.into()),
                "train-manifest" => o.train_manifest = Some(value.into()),
                "test-manifest" => o.test_manifest = Some(value.into()),
                "train-subset" => o.train_subset = parse_value(&key, value, n)?,
                "validation" => o.validation = parse_value(&key, value, n)?,
                "test-subset" => o.test_subset = parse_value(&key, value, n)?,
                "checkpoint-every" => o.checkpoint_every = parse_value(&key, value, n)?,
                "snapshot-every" => o.snapshot_every = parse_value(&key, value, n)?,
                "format" => o.format = parse_value(&key, value, n)?,
                "version" => {}
                other => return Err(CliError::Usage(format!("config line {n}: unknown key `{other}`"))),
            }
        }
        Ok(o)
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    /// `self` with every field set in `top` replaced.
    pub fn overlay(self, top: Overrides) -> Overrides {
        macro_rules! pick {
            ($($f:ident),*) => { Overrides { $($f: top.$f.or(self.$f)),* } };
        }
        pick!(
            preset,
            seed,
            epochs,
            batch_size,
            lr,
            lambda,
            lambda1,
            lambda2,
            optimizer,
            augment,
            sigma,
            alpha,
            w_mode,
            prototypes,
            out,
            data_dir,
            image_root,
            train_manifest,
            test_manifest,
            train_subset,
            validation,
            test_subset,
            checkpoint_every,
            snapshot_every,
            format
        )
    }
}

/// Where a run's images come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Idx {
        dir: PathBuf,
    },
    Manifest {
        root: PathBuf,
        train: PathBuf,
        test: PathBuf,
    },
}

/// Fully resolved settings of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub model: ModelConfig,
    pub hyper: Hyperparams,
    /// `None` until drawn.
    pub seed: Option<u64>,
    pub augment: Option<AugmentSettings>,
    pub out: PathBuf,
    pub data: Option<DataSource>,
    pub train_subset: Option<usize>,
    pub validation: usize,
    pub test_subset: Option<usize>,
    pub checkpoint_every: u64,
    pub snapshot_every: u64,
    pub format: ImageKind,
}

const DEFAULT_MNIST_VALIDATION: usize = 5000;

impl RunConfig {
    pub fn resolve(o: &Overrides) -> Result<Self, CliError> {
        let preset_id = o.preset.unwrap_or(Preset::Mnist);
        let mut model = preset(preset_id);
        let defaults = Hyperparams::default();
        let hyper = Hyperparams {
            lambda_r: o.lambda.unwrap_or(defaults.lambda_r),
            lambda_1: o.lambda1.unwrap_or(defaults.lambda_1),
            lambda_2: o.lambda2.unwrap_or(defaults.lambda_2),
            learning_rate: o.lr.unwrap_or(defaults.learning_rate),
            batch_size: o.batch_size.unwrap_or(defaults.batch_size),
            epochs: o.epochs.unwrap_or(defaults.epochs),
            optimizer: o.optimizer.unwrap_or(defaults.optimizer),
        };
        hyper.validate().map_err(CliError::Usage)?;

        if let Some(mode) = o.w_mode {
            model.w_mode = mode;
            if mode == WMode::NegativeIdentity {
                model.n_prototypes = model.n_classes;
            }
        }
        if let Some(m) = o.prototypes {
            model.n_prototypes = m;
        }
        model.validate().map_err(|e| CliError::Usage(e.to_string()))?;

        let is_car = preset_id == Preset::Car;
        let augment_on = o.augment.unwrap_or(!is_car);
        let base = AugmentSettings::default();
        let augment = augment_on.then(|| AugmentSettings {
            sigma: o.sigma.unwrap_or(base.sigma),
            alpha: o.alpha.unwrap_or(base.alpha),
        });
        if let Some(a) = augment {
            if !(a.sigma > 0.0 && a.alpha >= 0.0) {
                return Err(CliError::Usage(format!(
                    "augmentation needs sigma > 0 and alpha >= 0, got {} and {}",
                    a.sigma, a.alpha
                )));
            }
        }

        let data = match (&o.data_dir, &o.train_manifest, &o.test_manifest) {
            (Some(dir), None, None) => Some(DataSource::Idx { dir: dir.clone() }),
            (None, Some(train), Some(test)) => Some(DataSource::Manifest {
                root: o.image_root.clone().unwrap_or_else(|| PathBuf::from(".")),
                train: train.clone(),
                test: test.clone(),
            }),
            (None, None, None) => None,
            (Some(_), _, _) => {
                return Err(CliError::Usage("use either --data-dir or manifests, not both".into()));
            }
            _ => {
                return Err(CliError::Usage(
                    "--train-manifest and --test-manifest go together".into(),
                ))
            }
        };
        let validation = o.validation.unwrap_or(match data {
            Some(DataSource::Idx { .. }) => DEFAULT_MNIST_VALIDATION,
            _ => 0,
        });

        Ok(Self {
            preset: preset_id,
            model,
            hyper,
            seed: o.seed,
            augment,
            out: o
                .out
                .clone()
                .unwrap_or_else(|| PathBuf::from("runs").join(preset_id.name())),
            data,
            train_subset: o.train_subset,
            validation,
            test_subset: o.test_subset,
            checkpoint_every: o.checkpoint_every.unwrap_or(25),
            snapshot_every: o.snapshot_every.unwrap_or(10),
            format: o.format.unwrap_or(ImageKind::Pgm),
        })
    }

    /// `key=value` record that [`Overrides::parse`] reads back to the same
    /// configuration.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# protonet run configuration");
        let _ = writeln!(s, "version={}", protonet::VERSION);
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("preset", self.preset.to_string());
        if let Some(seed) = self.seed {
            kv("seed", seed.to_string());
        }
        kv("epochs", self.hyper.epochs.to_string());
        kv("batch-size", self.hyper.batch_size.to_string());
        kv("lr", self.hyper.learning_rate.to_string());
        kv("lambda", self.hyper.lambda_r.to_string());
        kv("lambda1", self.hyper.lambda_1.to_string());
        kv("lambda2", self.hyper.lambda_2.to_string());
        kv("optimizer", self.hyper.optimizer.to_string());
        kv("augment", if self.augment.is_some() { "on" } else { "off" }.into());
        if let Some(a) = self.augment {
            kv("sigma", a.sigma.to_string());
            kv("alpha", a.alpha.to_string());
        }
        kv("w-mode", self.model.w_mode.to_string());
        kv("prototypes", self.model.n_prototypes.to_string());
        kv("out", self.out.display().to_string());
        match &self.data {
            Some(DataSource::Idx { dir }) => kv("data-dir", dir.display().to_string()),
            Some(DataSource::Manifest { root, train, test }) => {
                kv("image-root", root.display().to_string());
                kv("train-manifest", train.display().to_string());
                kv("test-manifest", test.display().to_string());
            }
            None => {}
        }
        if let Some(n) = self.train_subset {
            kv("train-subset", n.to_string());
        }
        kv("validation", self.validation.to_string());
        if let Some(n) = self.test_subset {
            kv("test-subset", n.to_string());
        }
        kv("checkpoint-every", self.checkpoint_every.to_string());
        kv("snapshot-every", self.snapshot_every.to_string());
        kv(
            "format",
            match self.format {
                ImageKind::Pgm => "pgm",
                ImageKind::Png => "png",
            }
            .into(),
        );
        s
    }
}
