//! Elastic deformation of image batches.
//!
//! Each image gets its own displacement field: two uniform `[-1, 1]`
//! fields smoothed by a separable Gaussian (truncated at 3σ, zero
//! padded), scaled by α, then used to resample the image bilinearly with
//! clamp-to-edge borders. The randomness for image `i` depends only on
//! `(seed, i)`, so a batch can be deformed in parallel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElasticParams {
    /// Gaussian standard deviation in pixels, > 0.
    pub sigma: f64,
    /// Displacement scale, >= 0.
    pub alpha: f64,
    pub seed: u64,
}

impl ElasticParams {
    pub fn new(sigma: f64, alpha: f64, seed: u64) -> Self {
        assert!(sigma > 0.0, "sigma must be positive");
        assert!(alpha >= 0.0, "alpha must be non-negative");
        Self { sigma, alpha, seed }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

/// Normalized Gaussian taps of length `2·ceil(3σ) + 1`.
pub fn gaussian_kernel_1d(sigma: f64) -> Tensor {
    assert!(sigma > 0.0, "sigma must be positive");
    let radius = (3.0 * sigma).ceil() as i64;
    let weights: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let len = weights.len();
    Tensor::new(vec![len], weights.into_iter().map(|w| w / total).collect()).expect("1-D")
}

/// Separable zero-padded Gaussian blur of an `h × w` field.
pub fn gaussian_blur(field: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let sx = x as isize + k as isize - r;
                if sx >= 0 && (sx as usize) < w {
                    acc += kv * field[y * w + sx as usize];
                }
            }
            rows[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let sy = y as isize + k as isize - r;
                if sy >= 0 && (sy as usize) < h {
                    acc += kv * rows[sy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// The `(dx, dy)` displacement fields used for image `index`, each `h × w`
/// in row-major order.
pub fn displacement_field(h: usize, w: usize, params: &ElasticParams, index: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(index);
    let mut draw = || -> Vec<f64> { (0..h * w).map(|_| rng.random_range(-1.0..=1.0)).collect() };
    let raw_x = draw();
    let raw_y = draw();
    let kernel = gaussian_kernel_1d(params.sigma);
    let scale = |f: Vec<f64>| f.into_iter().map(|v| v * params.alpha).collect::<Vec<_>>();
    (
        scale(gaussian_blur(&raw_x, h, w, kernel.data())),
        scale(gaussian_blur(&raw_y, h, w, kernel.data())),
    )
}

/// Bilinear resampling of one `[h, w, c]` image at `(x + dx, y + dy)`.
pub fn warp_image(image: &[f64], h: usize, w: usize, c: usize, dx: &[f64], dy: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; h * w * c];
    let (max_x, max_y) = ((w - 1) as f64, (h - 1) as f64);
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let sx = (x as f64 + dx[p]).clamp(0.0, max_x);
            let sy = (y as f64 + dy[p]).clamp(0.0, max_y);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            let weights = [
                ((1.0 - fx) * (1.0 - fy), y0 * w + x0),
                (fx * (1.0 - fy), y0 * w + x1),
                ((1.0 - fx) * fy, y1 * w + x0),
                (fx * fy, y1 * w + x1),
            ];
            for ch in 0..c {
                let v: f64 = weights.iter().map(|&(wt, q)| wt * image[q * c + ch]).sum();
                out[p * c + ch] = v;
            }
        }
    }
    out
}

fn deform_one(image: &[f64], h: usize, w: usize, c: usize, params: &ElasticParams, index: u64) -> Vec<f64> {
    let (dx, dy) = displacement_field(h, w, params, index);
    warp_image(image, h, w, c, &dx, &dy)
}

/// Deforms every image of a `[b, H, W, C]` batch. `alpha = 0` returns the
/// batch unchanged.
pub fn elastic_deform(batch: &Tensor, params: &ElasticParams) -> Tensor {
    assert_eq!(batch.rank(), 4, "elastic_deform expects [b, H, W, C]");
    let (h, w, c) = (batch.dim(1), batch.dim(2), batch.dim(3));
    assert!(h >= 2 && w >= 2, "images must be at least 2x2");
    if params.alpha == 0.0 {
        return batch.clone();
    }
    let mut out = Tensor::zeros(batch.shape());

    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        let per = h * w * c;
        let mut work = || {
            out.data_mut().par_chunks_mut(per).enumerate().for_each(|(i, dst)| {
                dst.copy_from_slice(&deform_one(batch.row(i), h, w, c, params, i as u64));
            })
        };
        match worker_pool() {
            Some(pool) => pool.install(work),
            None => work(),
        }
    }
    #[cfg(not(feature = "parallel"))]
    for i in 0..batch.dim(0) {
        out.row_mut(i)
            .copy_from_slice(&deform_one(batch.row(i), h, w, c, params, i as u64));
    }
    out
}

/// Pool capped by `PROTONET_THREADS`, if set.
#[cfg(feature = "parallel")]
fn worker_pool() -> Option<&'static rayon::ThreadPool> {
    use std::sync::OnceLock;
    static POOL: OnceLock<Option<rayon::ThreadPool>> = OnceLock::new();
    POOL.get_or_init(|| {
        let threads: usize = std::env::var("PROTONET_THREADS").ok()?.parse().ok()?;
        rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build().ok()
    })
    .as_ref()
}
