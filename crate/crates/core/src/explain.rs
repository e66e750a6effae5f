//! Interpretability outputs: per-input explanations, the weight report,
//! image export and reconstruction galleries.
//!
//! Every number here comes straight from the network's own forward pass;
//! rounding happens only when rendering text.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageBuffer, ImageEncoder, ImageFormat, Luma, Rgb};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::loss::{self, LossError};
use crate::model::{self, HeadMode, ModelConfig, ModelError, NetworkParams, WMode};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("image {image}: value {value} at offset {offset} is outside [0, 1]")]
    OutOfRange { image: usize, offset: usize, value: f64 },
    #[error("cannot export images with {0} channels (expected 1 or 3)")]
    Channels(usize),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    Encode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("unknown image format `{0}` (expected pgm or png)")]
    UnknownFormat(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageKind {
    Pgm,
    Png,
}

impl FromStr for ImageKind {
    type Err = ExplainError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "pgm" => Ok(Self::Pgm),
            "png" => Ok(Self::Png),
            _ => Err(ExplainError::UnknownFormat(s.into())),
        }
    }
}

impl ImageKind {
    /// Extension actually used for an image with `channels` channels; PGM
    /// cannot hold color, so RGB always goes to PNG.
    pub fn extension(self, channels: usize) -> &'static str {
        match (self, channels) {
            (Self::Pgm, 1) => "pgm",
            _ => "png",
        }
    }
}

/// `round(v * 255)` for `v` in `[0, 1]`.
pub fn quantize(v: f64) -> u8 {
    (v * 255.0).round() as u8
}

fn check_range(t: &Tensor) -> Result<(), ExplainError> {
    let per = t.len() / t.dim(0).max(1);
    match t.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
        Some(i) => Err(ExplainError::OutOfRange {
            image: i / per.max(1),
            offset: i % per.max(1),
            value: t.data()[i],
        }),
        None => Ok(()),
    }
}

/// Writes one `[H, W, C]` image.
pub fn write_image(
    pixels: &[f64],
    h: usize,
    w: usize,
    c: usize,
    path: &Path,
    kind: ImageKind,
) -> Result<(), ExplainError> {
    let bytes: Vec<u8> = pixels.iter().map(|&v| quantize(v)).collect();
    let encode = |source| ExplainError::Encode {
        path: path.to_path_buf(),
        source,
    };
    let (w, h) = (w as u32, h as u32);
    match (kind.extension(c), c) {
        ("pgm", _) => {
            let file = fs::File::create(path).map_err(|source| ExplainError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            PnmEncoder::new(io::BufWriter::new(file))
                .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
                .write_image(&bytes, w, h, ExtendedColorType::L8)
                .map_err(encode)
        }
        (_, 1) => ImageBuffer::<Luma<u8>, _>::from_raw(w, h, bytes)
            .expect("buffer size matches")
            .save_with_format(path, ImageFormat::Png)
            .map_err(encode),
        (_, 3) => ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, bytes)
            .expect("buffer size matches")
            .save_with_format(path, ImageFormat::Png)
            .map_err(encode),
        (_, other) => Err(ExplainError::Channels(other)),
    }
}

/// Writes each image of `[n, H, W, C]` to `dir/{prefix}-{i:02}.{ext}`.
pub fn export_images(images: &Tensor, dir: &Path, prefix: &str, kind: ImageKind) -> Result<Vec<PathBuf>, ExplainError> {
    let (h, w, c) = (images.dim(1), images.dim(2), images.dim(3));
    if c != 1 && c != 3 {
        return Err(ExplainError::Channels(c));
    }
    check_range(images)?;
    fs::create_dir_all(dir).map_err(|source| ExplainError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let ext = kind.extension(c);
    (0..images.dim(0))
        .map(|i| {
            let path = dir.join(format!("{prefix}-{i:02}.{ext}"));
            write_image(images.row(i), h, w, c, &path, kind)?;
            Ok(path)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Per-input explanation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Explanation {
    /// `[H, W, C]`
    pub input_image: Tensor,
    /// Squared distances to each prototype, length m.
    pub distances: Vec<f64>,
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub predicted: usize,
    /// Decoded prototypes `[m, H, W, C]`, if the model has a decoder.
    pub prototype_images: Option<Tensor>,
    /// Row of W for the predicted class: how much each prototype's
    /// distance moves that class's logit.
    pub weights_to_predicted: Vec<f64>,
}

/// JSON form of an [`Explanation`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRecord {
    pub distances: Vec<f64>,
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub predicted: usize,
    pub prototype_files: Vec<String>,
}

pub fn explain_input(params: &NetworkParams, cfg: &ModelConfig, image: &Tensor) -> Result<Explanation, ExplainError> {
    if cfg.head_mode != HeadMode::Prototype {
        return Err(ModelError::NoPrototypes.into());
    }
    let single = match image.rank() {
        3 => image
            .clone()
            .reshape(&[1, image.dim(0), image.dim(1), image.dim(2)])
            .map_err(ModelError::from)?,
        _ => image.clone(),
    };
    if single.rank() != 4 || single.dim(0) != 1 || single.shape()[1..] != cfg.input_shape {
        return Err(ModelError::Input {
            expected: cfg.input_shape.to_vec(),
            actual: image.shape().to_vec(),
        }
        .into());
    }
    let trace = model::forward(params, cfg, &single)?;
    let predicted = model::argmax(trace.probabilities.data());
    let prototype_images = if cfg.autoencoder_enabled {
        Some(model::decode_prototypes(params, cfg)?)
    } else {
        None
    };
    Ok(Explanation {
        input_image: single.reshape(&cfg.input_shape).map_err(ModelError::from)?,
        distances: trace.distances.into_data(),
        logits: trace.logits.into_data(),
        probabilities: trace.probabilities.into_data(),
        predicted,
        prototype_images,
        weights_to_predicted: params.weights.row(predicted).to_vec(),
    })
}

impl Explanation {
    pub fn record(&self, prototype_files: Vec<String>) -> ExplanationRecord {
        ExplanationRecord {
            distances: self.distances.clone(),
            logits: self.logits.clone(),
            probabilities: self.probabilities.clone(),
            predicted: self.predicted,
            prototype_files,
        }
    }

    /// Writes `input.*`, `prototype-XX.*` and `explanation.json` into
    /// `dir`. Returns the JSON path.
    pub fn write_bundle(&self, dir: &Path, kind: ImageKind) -> Result<PathBuf, ExplainError> {
        let s = self.input_image.shape();
        let input =
            Tensor::new(vec![1, s[0], s[1], s[2]], self.input_image.data().to_vec()).map_err(ModelError::from)?;
        export_images(&input, dir, "input", kind)?;
        let files = match &self.prototype_images {
            Some(p) => export_images(p, dir, "prototype", kind)?
                .into_iter()
                .map(|p| p.file_name().expect("file").to_string_lossy().into_owned())
                .collect(),
            None => Vec::new(),
        };
        let path = dir.join("explanation.json");
        let json = serde_json::to_string_pretty(&self.record(files)).expect("record serializes");
        fs::write(&path, json + "\n").map_err(|source| ExplainError::Io {
            path: path.clone(),
            source,
        })?;
        Ok(path)
    }

    /// Human-readable walkthrough: distances (five per row), then the
    /// class probabilities.
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "squared L2 distances to prototypes:");
        s.push_str(&render_distance_table(&self.distances, 5));
        let _ = writeln!(s, "class probabilities:");
        for (k, p) in self.probabilities.iter().enumerate() {
            let mark = if k == self.predicted { "  <- predicted" } else { "" };
            let _ = writeln!(s, "  {k:>2}: {p:.6}{mark}");
        }
        let _ = writeln!(
            s,
            "predicted class {} with probability {}",
            self.predicted, self.probabilities[self.predicted]
        );
        s
    }
}

/// Two-decimal display value; avoids printing `-0.00`.
pub fn round2(v: f64) -> String {
    let s = format!("{v:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

/// Lays out `values` `per_row` to a line, each labelled by prototype index.
pub fn render_distance_table(values: &[f64], per_row: usize) -> String {
    let mut s = String::new();
    for (r, chunk) in values.chunks(per_row.max(1)).enumerate() {
        let cells: Vec<String> = chunk
            .iter()
            .enumerate()
            .map(|(i, v)| format!("p{:<2} {:>8}", r * per_row + i, round2(*v)))
            .collect();
        let _ = writeln!(s, "  {}", cells.join("  "));
    }
    s
}

// ---------------------------------------------------------------------------
// Weight report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightReport {
    /// Wᵀ as `m` rows of `K` entries, full precision.
    pub matrix: Vec<Vec<f64>>,
    /// Per prototype, the class with the most negative weight (proxy for the
    /// class the decoded prototype looks like).
    pub most_negative_class: Vec<usize>,
    pub w_mode: WMode,
    pub note: Option<String>,
    pub prototype_files: Vec<String>,
}

pub fn weight_report(params: &NetworkParams, cfg: &ModelConfig) -> WeightReport {
    let (k, m) = (params.weights.dim(0), params.weights.dim(1));
    let matrix: Vec<Vec<f64>> = (0..m)
        .map(|j| (0..k).map(|c| params.weights.data()[c * m + j]).collect())
        .collect();
    let most_negative_class = matrix
        .iter()
        .map(|row| {
            let neg: Vec<f64> = row.iter().map(|v| -v).collect();
            model::argmax(&neg)
        })
        .collect();
    let note = (cfg.w_mode == WMode::NegativeIdentity)
        .then(|| "W is fixed to -I: each prototype votes only for its own class (nearest-prototype rule)".to_string());
    WeightReport {
        matrix,
        most_negative_class,
        w_mode: cfg.w_mode,
        note,
        prototype_files: Vec::new(),
    }
}

impl WeightReport {
    pub fn rows(&self) -> usize {
        self.matrix.len()
    }

    pub fn cols(&self) -> usize {
        self.matrix.first().map_or(0, Vec::len)
    }

    /// Full-precision CSV: `prototype,class_0..class_{K-1},most_negative`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("prototype");
        for c in 0..self.cols() {
            let _ = write!(s, ",class_{c}");
        }
        s.push_str(",most_negative\n");
        for (j, row) in self.matrix.iter().enumerate() {
            let _ = write!(s, "{j}");
            for v in row {
                let _ = write!(s, ",{v}");
            }
            let _ = writeln!(s, ",{}", self.most_negative_class[j]);
        }
        s
    }

    /// Rounded table; the most negative entry of each row is starred.
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        if let Some(note) = &self.note {
            let _ = writeln!(s, "note: {note}");
        }
        let _ = write!(s, "{:>6}", "");
        for c in 0..self.cols() {
            let _ = write!(s, "{:>9}", c);
        }
        s.push('\n');
        for (j, row) in self.matrix.iter().enumerate() {
            let _ = write!(s, "{:>6}", format!("p{j}"));
            for (c, v) in row.iter().enumerate() {
                let star = if c == self.most_negative_class[j] { "*" } else { " " };
                let _ = write!(s, "{:>8}{star}", round2(*v));
            }
            s.push('\n');
        }
        let _ = writeln!(s, "* most negative weight (class the prototype argues for)");
        s
    }
}

// ---------------------------------------------------------------------------
// Reconstruction gallery
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Gallery {
    /// Dataset rows shown, left to right.
    pub indices: Vec<usize>,
    /// `[1, 2H, kW, C]`: originals on top, reconstructions below.
    pub grid: Tensor,
    /// Squared reconstruction error of each shown image.
    pub errors: Vec<f64>,
}

pub fn reconstruction_gallery(
    params: &NetworkParams,
    cfg: &ModelConfig,
    d: &Dataset,
    k: usize,
    seed: u64,
) -> Result<Gallery, ExplainError> {
    if !cfg.autoencoder_enabled {
        return Err(ModelError::NoDecoder.into());
    }
    let k = k.min(d.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let indices = rand::seq::index::sample(&mut rng, d.len(), k).into_vec();
    let originals = d.images.select_rows(&indices);
    let trace = model::forward(params, cfg, &originals)?;
    let rec = trace.reconstruction.ok_or(ModelError::NoDecoder)?;
    let [h, w, c] = cfg.input_shape;
    let mut errors = Vec::with_capacity(k);
    for i in 0..k {
        let one = |t: &Tensor| Tensor::new(vec![1, h, w, c], t.row(i).to_vec()).expect("row shape");
        errors.push(loss::reconstruction_loss(&one(&originals), &one(&rec))?);
    }
    let mut grid = Tensor::zeros(&[1, 2 * h, k * w, c]);
    let row_stride = k * w * c;
    for (band, src) in [&originals, &rec].into_iter().enumerate() {
        for i in 0..k {
            let img = src.row(i);
            for y in 0..h {
                let dst = (band * h + y) * row_stride + i * w * c;
                grid.data_mut()[dst..dst + w * c].copy_from_slice(&img[y * w * c..(y + 1) * w * c]);
            }
        }
    }
    Ok(Gallery { indices, grid, errors })
}

impl Gallery {
    pub fn errors_csv(&self) -> String {
        let mut s = String::from("column,index,squared_error\n");
        for (col, (i, e)) in self.indices.iter().zip(&self.errors).enumerate() {
            let _ = writeln!(s, "{col},{i},{e}");
        }
        s
    }

    /// Writes `gallery.{ext}` and `gallery.csv`; returns the image path.
    pub fn write(&self, dir: &Path, kind: ImageKind) -> Result<PathBuf, ExplainError> {
        check_range(&self.grid)?;
        fs::create_dir_all(dir).map_err(|source| ExplainError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let (h, w, c) = (self.grid.dim(1), self.grid.dim(2), self.grid.dim(3));
        let path = dir.join(format!("gallery.{}", kind.extension(c)));
        write_image(self.grid.row(0), h, w, c, &path, kind)?;
        let csv = dir.join("gallery.csv");
        fs::write(&csv, self.errors_csv()).map_err(|source| ExplainError::Io { path: csv, source })?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, preset, Preset};
    use crate::tensor;

    #[test]
    fn quantization_rule() {
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(0.5), 128);
    }

    #[test]
    fn round2_display() {
        assert_eq!(round2(-20.4487), "-20.45");
        assert_eq!(round2(-0.001), "0.00");
        assert_eq!(round2(3.0), "3.00");
    }

    #[test]
    fn export_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::from_fn(&[2, 5, 4, 1], |i| (i % 17) as f64 / 16.0);
        for kind in [ImageKind::Pgm, ImageKind::Png] {
            let files = export_images(&t, dir.path(), "x", kind).unwrap();
            assert_eq!(files.len(), 2);
            for (n, f) in files.iter().enumerate() {
                let back = crate::dataset::load_image_file(f, 1).unwrap();
                for (a, b) in back.data().iter().zip(t.row(n)) {
                    assert!((a - b).abs() < 1.0 / 255.0);
                }
            }
        }
        let bytes = fs::read(dir.path().join("x-00.pgm")).unwrap();
        assert!(bytes.starts_with(b"P5"));
    }

    #[test]
    fn zero_image_zero_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let files = export_images(&Tensor::zeros(&[1, 3, 3, 1]), dir.path(), "z", ImageKind::Png).unwrap();
        let img = image::open(&files[0]).unwrap().into_luma8();
        assert!(img.into_raw().iter().all(|&b| b == 0));
    }

    #[test]
    fn rgb_goes_to_png_and_range_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let files = export_images(&Tensor::full(&[1, 2, 2, 3], 0.25), dir.path(), "c", ImageKind::Pgm).unwrap();
        assert_eq!(files[0].extension().unwrap(), "png");
        let bad = Tensor::new(vec![1, 1, 2, 1], vec![0.5, 1.2]).unwrap();
        assert!(matches!(
            export_images(&bad, dir.path(), "b", ImageKind::Png),
            Err(ExplainError::OutOfRange { offset: 1, .. })
        ));
    }

    #[test]
    fn explanation_recomposes() {
        let cfg = preset(Preset::Mnist);
        let params = init_params(&cfg, 4).unwrap();
        let img = Tensor::from_fn(&[28, 28, 1], |i| ((i * 7) % 13) as f64 / 13.0);
        let e = explain_input(&params, &cfg, &img).unwrap();
        assert_eq!(e.distances.len(), 15);
        assert!(e.distances.iter().all(|&d| d >= 0.0));
        assert!((e.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        let d = Tensor::new(vec![1, 15], e.distances.clone()).unwrap();
        let logits = tensor::matmul_transposed(&d, &params.weights).unwrap();
        let p = tensor::softmax_rows(&logits).unwrap();
        for (a, b) in p.data().iter().zip(&e.probabilities) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(e.prototype_images.as_ref().unwrap().shape(), &[15, 28, 28, 1]);
        assert_eq!(render_distance_table(&e.distances, 5).lines().count(), 3);
    }

    #[test]
    fn prototype_at_code_has_zero_distance() {
        let cfg = preset(Preset::Mnist);
        let mut params = init_params(&cfg, 2).unwrap();
        let img = Tensor::from_fn(&[1, 28, 28, 1], |i| (i % 5) as f64 / 5.0);
        let z = model::forward(&params, &cfg, &img).unwrap().z;
        params.prototypes.row_mut(6).copy_from_slice(z.row(0));
        let e = explain_input(&params, &cfg, &img).unwrap();
        assert_eq!(e.distances[6], 0.0);
    }

    #[test]
    fn explain_rejects_wrong_shape() {
        let cfg = preset(Preset::Mnist);
        let params = init_params(&cfg, 2).unwrap();
        assert!(explain_input(&params, &cfg, &Tensor::zeros(&[27, 28, 1])).is_err());
    }

    #[test]
    fn weight_report_shapes_and_negid() {
        let cfg = preset(Preset::Mnist);
        let params = init_params(&cfg, 1).unwrap();
        let r = weight_report(&params, &cfg);
        assert_eq!((r.rows(), r.cols()), (15, 10));
        assert!(r.note.is_none());
        assert_eq!(r.to_csv().lines().count(), 16);

        let mut cfg = cfg.with_w_mode(WMode::NegativeIdentity);
        cfg.n_prototypes = 10;
        let params = init_params(&cfg, 1).unwrap();
        let r = weight_report(&params, &cfg);
        assert_eq!(r.most_negative_class, (0..10).collect::<Vec<_>>());
        assert!(r.note.is_some());
        assert!(r.render_text().contains("-1.00*"));
    }

    #[test]
    fn gallery_layout_and_errors() {
        let cfg = preset(Preset::Mnist);
        let params = init_params(&cfg, 3).unwrap();
        let images = Tensor::from_fn(&[6, 28, 28, 1], |i| ((i * 31) % 29) as f64 / 29.0);
        let d = Dataset::new("t", images, vec![0; 6], 10).unwrap();
        let g = reconstruction_gallery(&params, &cfg, &d, 4, 9).unwrap();
        assert_eq!(g.grid.shape(), &[1, 56, 112, 1]);
        let (lo, hi) = g.grid.min_max();
        assert!(lo >= 0.0 && hi <= 1.0);
        for (i, e) in g.indices.iter().zip(&g.errors) {
            let x = d.images.select_rows(&[*i]);
            let rec = model::forward(&params, &cfg, &x).unwrap().reconstruction.unwrap();
            assert_eq!(*e, loss::reconstruction_loss(&x, &rec).unwrap());
        }
        // top-left pixel block is the first original
        assert_eq!(g.grid.data()[0], d.images.row(g.indices[0])[0]);
    }
}
