//! Mixup and spec-augment on (normalized) feature maps.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::audio::FeatureMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpecAugmentConfig {
    pub num_freq_masks: usize,
    pub max_freq_width: usize,
    pub num_time_masks: usize,
    pub max_time_width: usize,
}

impl Default for SpecAugmentConfig {
    fn default() -> Self {
        SpecAugmentConfig { num_freq_masks: 2, max_freq_width: 8, num_time_masks: 2, max_time_width: 40 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub mixup: bool,
    pub mixup_alpha: f64,
    pub spec_augment: bool,
    pub specaug: SpecAugmentConfig,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { mixup: false, mixup_alpha: 0.2, spec_augment: false, specaug: SpecAugmentConfig::default() }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self::default()
    }

    /// Check the mask widths against a `mel_bins × frames` map.
    pub fn validate_for(&self, mel_bins: usize, frames: usize) -> Result<()> {
        if self.mixup && !(self.mixup_alpha > 0.0 && self.mixup_alpha.is_finite()) {
            return Err(Error::config(format!("mixup_alpha must be > 0, got {}", self.mixup_alpha)));
        }
        if self.spec_augment {
            let s = &self.specaug;
            if s.max_freq_width > mel_bins {
                return Err(Error::config(format!(
                    "max_freq_width {} exceeds {mel_bins} mel bins",
                    s.max_freq_width
                )));
            }
            if s.max_time_width > frames {
                return Err(Error::config(format!("max_time_width {} exceeds {frames} frames", s.max_time_width)));
            }
        }
        Ok(())
    }
}

/// Draw λ ~ Beta(α, α).
pub fn sample_lambda<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::config(format!("mixup_alpha {alpha}: {e}")))?;
    Ok(beta.sample(rng))
}

/// `x = λ·x1 + (1−λ)·x2`, `y = λ·y1 + (1−λ)·y2`. λ = 1 returns `(x1, y1)` exactly.
pub fn mixup(
    x1: &FeatureMap,
    x2: &FeatureMap,
    y1: &[f64],
    y2: &[f64],
    lambda: f64,
) -> Result<(FeatureMap, Vec<f64>)> {
    if x1.values.shape() != x2.values.shape() {
        return Err(Error::dim(format!(
            "mixup of shapes {:?} and {:?}",
            x1.values.shape(),
            x2.values.shape()
        )));
    }
    if y1.len() != y2.len() {
        return Err(Error::dim(format!("mixup of label lengths {} and {}", y1.len(), y2.len())));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::config(format!("mixup lambda {lambda} outside [0, 1]")));
    }
    let mut data = x1.values.data().to_vec();
    mix_into(&mut data, x2.values.data(), lambda);
    let y = mix_labels(y1, y2, lambda);
    Ok((FeatureMap::new(Tensor::new(x1.values.shape().to_vec(), data)?, x1.frame_params)?, y))
}

pub(crate) fn mix_into(a: &mut [f32], b: &[f32], lambda: f64) {
    if lambda == 1.0 {
        return;
    }
    for (x, &y) in a.iter_mut().zip(b) {
        *x = (lambda * *x as f64 + (1.0 - lambda) * y as f64) as f32;
    }
}

pub(crate) fn mix_labels(y1: &[f64], y2: &[f64], lambda: f64) -> Vec<f64> {
    if lambda == 1.0 {
        return y1.to_vec();
    }
    y1.iter().zip(y2).map(|(a, b)| lambda * a + (1.0 - lambda) * b).collect()
}

/// A zeroed stripe: `[start, start + width)` along one axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stripe {
    pub start: usize,
    pub width: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Masks {
    pub freq: Vec<Stripe>,
    pub time: Vec<Stripe>,
}

impl Masks {
    /// Distinct mel bins covered by frequency stripes.
    pub fn freq_cover(&self, mel_bins: usize) -> Vec<bool> {
        cover(&self.freq, mel_bins)
    }

    pub fn time_cover(&self, frames: usize) -> Vec<bool> {
        cover(&self.time, frames)
    }
}

fn cover(stripes: &[Stripe], len: usize) -> Vec<bool> {
    let mut c = vec![false; len];
    for s in stripes {
        c[s.start..s.start + s.width].iter_mut().for_each(|v| *v = true);
    }
    c
}

/// Draw stripes: width ~ U[0, max], start ~ U[0, len − width].
pub fn draw_masks<R: Rng + ?Sized>(cfg: &SpecAugmentConfig, mel_bins: usize, frames: usize, rng: &mut R) -> Masks {
    let mut draw = |n: usize, max: usize, len: usize| -> Vec<Stripe> {
        (0..n)
            .map(|_| {
                let width = rng.random_range(0..=max.min(len));
                let start = rng.random_range(0..=len - width);
                Stripe { start, width }
            })
            .collect()
    };
    let freq = draw(cfg.num_freq_masks, cfg.max_freq_width, mel_bins);
    let time = draw(cfg.num_time_masks, cfg.max_time_width, frames);
    Masks { freq, time }
}

/// Zero the masked cells of a `[C, M, T]` buffer; the same masks apply to every channel.
pub fn apply_masks(data: &mut [f32], channels: usize, mel_bins: usize, frames: usize, masks: &Masks) {
    debug_assert_eq!(data.len(), channels * mel_bins * frames);
    let fc = masks.freq_cover(mel_bins);
    let tc = masks.time_cover(frames);
    for c in 0..channels {
        for m in 0..mel_bins {
            let row = &mut data[(c * mel_bins + m) * frames..][..frames];
            if fc[m] {
                row.iter_mut().for_each(|v| *v = 0.0);
            } else {
                for (v, &masked) in row.iter_mut().zip(&tc) {
                    if masked {
                        *v = 0.0;
                    }
                }
            }
        }
    }
}

/// Frequency and time masking; returns the augmented map and the drawn masks.
pub fn spec_augment<R: Rng + ?Sized>(
    x: &FeatureMap,
    cfg: &SpecAugmentConfig,
    rng: &mut R,
) -> Result<(FeatureMap, Masks)> {
    if cfg.max_freq_width > x.mel_bins() || cfg.max_time_width > x.frames() {
        return Err(Error::config(format!(
            "mask widths ({}, {}) exceed the {}×{} map",
            cfg.max_freq_width,
            cfg.max_time_width,
            x.mel_bins(),
            x.frames()
        )));
    }
    let masks = draw_masks(cfg, x.mel_bins(), x.frames(), rng);
    let mut out = x.clone();
    apply_masks(out.values.data_mut(), x.channels(), x.mel_bins(), x.frames(), &masks);
    Ok((out, masks))
}
