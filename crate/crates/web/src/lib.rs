//! Browser demo bindings.
//!
//! Three interactive operations, all computed by the `protonet` crate:
//! elastic deformation of a drawn digit, the class-decision field of a
//! prototype head over a 2-D latent plane, and the explanation of one point
//! in that plane.

use protonet::augment::{self, ElasticParams};
use protonet::model::argmax;
use protonet::tensor::{self, Tensor};
use wasm_bindgen::prelude::*;

/// Ten well-separated class colors (RGB).
const PALETTE: [[u8; 3]; 10] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
    [23, 190, 207],
];

/// Elastically deforms one grayscale `h × w` image (values in `[0, 1]`).
#[wasm_bindgen]
pub fn deform(pixels: &[f64], h: usize, w: usize, sigma: f64, alpha: f64, seed: u64) -> Result<Vec<f64>, JsError> {
    if pixels.len() != h * w || h < 2 || w < 2 {
        return Err(JsError::new("pixel count does not match h × w (need at least 2 × 2)"));
    }
    if sigma.is_nan() || sigma <= 0.0 || alpha.is_nan() || alpha < 0.0 {
        return Err(JsError::new("sigma must be > 0 and alpha >= 0"));
    }
    let batch = Tensor::new(vec![1, h, w, 1], pixels.to_vec()).map_err(|e| JsError::new(&e.to_string()))?;
    Ok(augment::elastic_deform(&batch, &ElasticParams::new(sigma, alpha, seed)).into_data())
}

/// Normalized 1-D Gaussian taps used by the deformation.
#[wasm_bindgen]
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>, JsError> {
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(JsError::new("sigma must be > 0"));
    }
    Ok(augment::gaussian_kernel_1d(sigma).into_data())
}

struct Head {
    prototypes: Tensor,
    weights: Tensor,
}

impl Head {
    /// `prototypes`: `m` points as `[x0, y0, x1, y1, ...]`; `weights`:
    /// `K × m` row-major.
    fn new(prototypes: &[f64], weights: &[f64]) -> Result<Self, String> {
        if prototypes.is_empty() || !prototypes.len().is_multiple_of(2) {
            return Err("prototypes must be a non-empty list of (x, y) pairs".into());
        }
        let m = prototypes.len() / 2;
        if weights.is_empty() || !weights.len().is_multiple_of(m) {
            return Err(format!("weights must have K × {m} entries"));
        }
        let k = weights.len() / m;
        Ok(Self {
            prototypes: Tensor::new(vec![m, 2], prototypes.to_vec()).map_err(|e| e.to_string())?,
            weights: Tensor::new(vec![k, m], weights.to_vec()).map_err(|e| e.to_string())?,
        })
    }

    /// `(distances, logits, probabilities)` rows for points `[n, 2]`.
    fn classify(&self, points: &Tensor) -> (Tensor, Tensor, Tensor) {
        let d = tensor::pairwise_sq_dist(points, &self.prototypes).expect("2-D points");
        let logits = tensor::matmul_transposed(&d, &self.weights).expect("weights match m");
        let p = tensor::softmax_rows(&logits).expect("rank 2");
        (d, logits, p)
    }
}

/// Predicted class and its probability at every pixel of a `width ×
/// height` view of `[-extent, extent]²`.
pub fn decision_map(
    prototypes: &[f64],
    weights: &[f64],
    width: usize,
    height: usize,
    extent: f64,
) -> Result<(Vec<usize>, Vec<f64>), String> {
    let head = Head::new(prototypes, weights)?;
    let coord = |i: usize, n: usize| extent * (2.0 * (i as f64 + 0.5) / n as f64 - 1.0);
    let mut pts = Vec::with_capacity(width * height * 2);
    for y in 0..height {
        for x in 0..width {
            pts.push(coord(x, width));
            pts.push(-coord(y, height));
        }
    }
    let points = Tensor::new(vec![width * height, 2], pts).map_err(|e| e.to_string())?;
    let (_, _, probs) = head.classify(&points);
    let k = probs.dim(1);
    let (mut class, mut conf) = (Vec::new(), Vec::new());
    for row in probs.data().chunks_exact(k) {
        let c = argmax(row);
        class.push(c);
        conf.push(row[c]);
    }
    Ok((class, conf))
}

/// RGBA image of the decision field: hue is the predicted class, opacity
/// its probability.
#[wasm_bindgen]
pub fn decision_field(
    prototypes: &[f64],
    weights: &[f64],
    width: usize,
    height: usize,
    extent: f64,
) -> Result<Vec<u8>, JsError> {
    let (class, conf) = decision_map(prototypes, weights, width, height, extent).map_err(|e| JsError::new(&e))?;
    let mut rgba = Vec::with_capacity(class.len() * 4);
    for (c, p) in class.into_iter().zip(conf) {
        let [r, g, b] = PALETTE[c % PALETTE.len()];
        let blend = |v: u8| (255.0 - (255.0 - v as f64) * p).round() as u8;
        rgba.extend_from_slice(&[blend(r), blend(g), blend(b), 255]);
    }
    Ok(rgba)
}

/// JSON explanation of one latent point: squared distances, logits,
/// probabilities and the predicted class.
#[wasm_bindgen]
pub fn explain_point(x: f64, y: f64, prototypes: &[f64], weights: &[f64]) -> Result<String, JsError> {
    explain_json(x, y, prototypes, weights).map_err(|e| JsError::new(&e))
}

pub fn explain_json(x: f64, y: f64, prototypes: &[f64], weights: &[f64]) -> Result<String, String> {
    let head = Head::new(prototypes, weights)?;
    let point = Tensor::new(vec![1, 2], vec![x, y]).map_err(|e| e.to_string())?;
    let (d, logits, p) = head.classify(&point);
    let record = protonet::explain::ExplanationRecord {
        distances: d.into_data(),
        logits: logits.into_data(),
        predicted: argmax(p.data()),
        probabilities: p.into_data(),
        prototype_files: Vec::new(),
    };
    serde_json::to_string(&record).map_err(|e| e.to_string())
}

/// Row-major `K × m` matrix `-scale · I` (requires `K = m`).
#[wasm_bindgen]
pub fn negative_identity(m: usize, scale: f64) -> Vec<f64> {
    let mut w = vec![0.0; m * m];
    for i in 0..m {
        w[i * m + i] = -scale;
    }
    w
}
