//! Photometric (non-geometric) augmentations. None of these move pixels, so
//! labels derived from offsets stay valid.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentParams {
    pub noise_prob: f64,
    /// Gaussian noise standard deviation range.
    pub noise_sigma: [f64; 2],
    pub blur_prob: f64,
    /// Gaussian blur kernel sigma range, pixels.
    pub blur_sigma_px: [f64; 2],
    pub brightness_prob: f64,
    /// Maximum absolute additive brightness shift.
    pub brightness_delta: f64,
    pub contrast_prob: f64,
    /// Multiplicative contrast range around the image mean.
    pub contrast_factor: [f64; 2],
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            noise_prob: 0.5,
            noise_sigma: [0.01, 0.05],
            blur_prob: 0.5,
            blur_sigma_px: [0.5, 1.5],
            brightness_prob: 0.5,
            brightness_delta: 0.2,
            contrast_prob: 0.5,
            contrast_factor: [0.8, 1.25],
        }
    }
}

impl AugmentParams {
    pub fn disabled() -> Self {
        Self {
            noise_prob: 0.0,
            blur_prob: 0.0,
            brightness_prob: 0.0,
            contrast_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for p in [
            self.noise_prob,
            self.blur_prob,
            self.brightness_prob,
            self.contrast_prob,
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid(format!(
                    "augmentation probability {p} outside [0, 1]"
                )));
            }
        }
        for [lo, hi] in [self.noise_sigma, self.blur_sigma_px, self.contrast_factor] {
            if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
                return Err(invalid(format!("augmentation range [{lo}, {hi}] invalid")));
            }
        }
        if !(self.brightness_delta >= 0.0) {
            return Err(invalid("brightness delta must be non-negative"));
        }
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

fn clip(img: &mut Array2<f32>) {
    img.mapv_inplace(|v| v.clamp(0.0, 1.0));
}

pub fn add_gaussian_noise<R: Rng + ?Sized>(
    img: &Array2<f32>,
    sigma: f64,
    rng: &mut R,
) -> Array2<f32> {
    let normal = Normal::new(0.0, sigma.max(0.0)).expect("sigma is finite");
    let mut out = img.mapv(|v| v + normal.sample(rng) as f32);
    clip(&mut out);
    out
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let k: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with edge replication.
pub fn gaussian_blur(img: &Array2<f32>, sigma: f64) -> Array2<f32> {
    if !(sigma > 0.0) {
        return img.clone();
    }
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as i64;
    let (h, w) = img.dim();
    let pass = |src: &Array2<f32>, horizontal: bool| {
        let mut dst = Array2::<f32>::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                for (k, kv) in kernel.iter().enumerate() {
                    let off = k as i64 - r;
                    let (sy, sx) = if horizontal {
                        (y, (x as i64 + off).clamp(0, w as i64 - 1) as usize)
                    } else {
                        ((y as i64 + off).clamp(0, h as i64 - 1) as usize, x)
                    };
                    acc += kv * src[[sy, sx]] as f64;
                }
                dst[[y, x]] = acc as f32;
            }
        }
        dst
    };
    let mut out = pass(&pass(img, true), false);
    clip(&mut out);
    out
}

pub fn adjust_brightness(img: &Array2<f32>, delta: f64) -> Array2<f32> {
    let mut out = img.mapv(|v| v + delta as f32);
    clip(&mut out);
    out
}

/// Scales deviations from the image mean by `factor`.
pub fn adjust_contrast(img: &Array2<f32>, factor: f64) -> Array2<f32> {
    let mean = img.iter().map(|&v| v as f64).sum::<f64>() / img.len().max(1) as f64;
    let mut out = img.mapv(|v| ((v as f64 - mean) * factor + mean) as f32);
    clip(&mut out);
    out
}

/// Applies each augmentation independently with its configured probability.
/// The random stream is consumed identically whatever the outcome.
pub fn augment<R: Rng + ?Sized>(
    img: &Array2<f32>,
    rng: &mut R,
    params: &AugmentParams,
) -> Array2<f32> {
    let blur = (
        rng.random::<f64>() < params.blur_prob,
        uniform(rng, params.blur_sigma_px),
    );
    let contrast = (
        rng.random::<f64>() < params.contrast_prob,
        uniform(rng, params.contrast_factor),
    );
    let bright = (
        rng.random::<f64>() < params.brightness_prob,
        uniform(rng, [-params.brightness_delta, params.brightness_delta]),
    );
    let noise = (
        rng.random::<f64>() < params.noise_prob,
        uniform(rng, params.noise_sigma),
    );
    let noise_seed: u64 = rng.random();

    let mut out = img.clone();
    if blur.0 {
        out = gaussian_blur(&out, blur.1);
    }
    if contrast.0 {
        out = adjust_contrast(&out, contrast.1);
    }
    if bright.0 {
        out = adjust_brightness(&out, bright.1);
    }
    if noise.0 {
        let mut nrng = crate::rng::task_rng(noise_seed, &[]);
        out = add_gaussian_noise(&out, noise.1, &mut nrng);
    }
    out
}
