//! Procedural synthetic latent grids used as the toy dataset: directional
//! gradients, checkerboards, and blobs that move across frames, with class
//! labels standing in for text prompts. Per-sample random amplitude and
//! offset make held-out samples require context to denoise, not just
//! position memorization.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{HthError, Result};
use crate::tensor::Tensor;

pub const N_CLASSES: usize = 8;

pub fn class_name(class: usize) -> &'static str {
    match class {
        0 => "gradient-x",
        1 => "gradient-y",
        2 => "checker-1",
        3 => "checker-2",
        4 => "blob-right",
        5 => "blob-down",
        6 => "blob-static",
        7 => "stripes-diag",
        _ => "unknown",
    }
}

/// One synthetic latent sample of shape [T, H, W, C] with values in roughly
/// [-2, 2].
pub fn synth_sample(
    class: usize,
    grid: (usize, usize, usize),
    channels: usize,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    if class >= N_CLASSES {
        return Err(HthError::invalid(format!("class {class} out of range")));
    }
    let (t, h, w) = grid;
    let amp = rng.gen_range(0.6..1.4);
    let off = rng.gen_range(-0.3..0.3);
    // blob geometry
    let sigma = (h.min(w) as f64 / 4.0).max(1.0);
    let cy0 = rng.gen_range(0.25..0.75) * h as f64;
    let cx0 = rng.gen_range(0.25..0.75) * w as f64;

    let norm = |i: usize, n: usize| {
        if n > 1 {
            2.0 * i as f64 / (n - 1) as f64 - 1.0
        } else {
            0.0
        }
    };
    let mut out = Tensor::zeros(&[t, h, w, channels]);
    let idx = |ti: usize, hi: usize, wi: usize, ci: usize| ((ti * h + hi) * w + wi) * channels + ci;
    for ti in 0..t {
        let tf = if t > 1 { ti as f64 / (t - 1) as f64 } else { 0.0 };
        for hi in 0..h {
            for wi in 0..w {
                let phi = match class {
                    0 => norm(wi, w),
                    1 => norm(hi, h),
                    2 => if (hi + wi) % 2 == 0 { 1.0 } else { -1.0 },
                    3 => if (hi / 2 + wi / 2) % 2 == 0 { 1.0 } else { -1.0 },
                    4 | 5 | 6 => {
                        let (cy, cx) = match class {
                            4 => (cy0, cx0 + tf * w as f64 * 0.5),
                            5 => (cy0 + tf * h as f64 * 0.5, cx0),
                            _ => (cy0, cx0),
                        };
                        // wrap the moving center so motion stays on-grid
                        let cy = cy % h as f64;
                        let cx = cx % w as f64;
                        let dy = hi as f64 - cy;
                        let dx = wi as f64 - cx;
                        2.0 * (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp() - 1.0
                    }
                    _ => ((hi + wi) as f64 * std::f64::consts::PI / 2.0).sin(),
                };
                for ci in 0..channels {
                    let ch_scale = 1.0 - 0.3 * ci as f64 / channels.max(2) as f64;
                    out.data_mut()[idx(ti, hi, wi, ci)] = amp * ch_scale * phi + off;
                }
            }
        }
    }
    Ok(out)
}

/// A fixed set of labelled samples, classes assigned round-robin.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub grid: (usize, usize, usize),
    pub channels: usize,
    pub samples: Vec<(Tensor, usize)>,
}

impl Dataset {
    pub fn generate(
        grid: (usize, usize, usize),
        channels: usize,
        n_samples: usize,
        n_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut samples = Vec::with_capacity(n_samples);
        for i in 0..n_samples {
            let class = i % n_classes.min(N_CLASSES);
            samples.push((synth_sample(class, grid, channels, &mut rng)?, class));
        }
        Ok(Dataset {
            grid,
            channels,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}
