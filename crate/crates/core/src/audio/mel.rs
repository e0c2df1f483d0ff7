use std::f64::consts::PI;

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use super::wav::AudioClip;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Offset inside the log so digital silence maps to a finite value.
pub const LOG_EPS: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameParams {
    pub window: usize,
    pub hop: usize,
    pub fft_size: usize,
}

impl Default for FrameParams {
    fn default() -> Self {
        FrameParams { window: 2048, hop: 1024, fft_size: 2048 }
    }
}

impl FrameParams {
    /// Number of full frames in a signal of `len` samples (no centering).
    pub fn frame_count(&self, len: usize) -> Option<usize> {
        (len >= self.window).then(|| (len - self.window) / self.hop + 1)
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK-mel filters spanning 0 Hz to Nyquist.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    /// `mel_bins × (fft_size/2 + 1)` weights.
    weights: Vec<Vec<f64>>,
    centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(mel_bins: usize, fft_size: usize, sample_rate: u32) -> Result<Self> {
        if mel_bins == 0 || fft_size < 2 {
            return Err(Error::config(format!("mel_bins={mel_bins}, fft_size={fft_size}")));
        }
        let nyquist = sample_rate as f64 / 2.0;
        let top = hz_to_mel(nyquist);
        let edges: Vec<f64> =
            (0..mel_bins + 2).map(|i| mel_to_hz(top * i as f64 / (mel_bins + 1) as f64)).collect();
        let n_freqs = fft_size / 2 + 1;
        let bin_hz = sample_rate as f64 / fft_size as f64;
        let weights = (0..mel_bins)
            .map(|m| {
                let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..n_freqs)
                    .map(|k| {
                        let f = k as f64 * bin_hz;
                        let up = (f - lo) / (mid - lo);
                        let down = (hi - f) / (hi - mid);
                        up.min(down).max(0.0)
                    })
                    .collect()
            })
            .collect();
        Ok(MelFilterbank { weights, centers_hz: edges[1..=mel_bins].to_vec() })
    }

    pub fn mel_bins(&self) -> usize {
        self.weights.len()
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    fn apply(&self, magnitude: &[f64], out: &mut [f64]) {
        for (o, w) in out.iter_mut().zip(&self.weights) {
            *o = w.iter().zip(magnitude).map(|(a, b)| a * b).sum();
        }
    }
}

/// Log-mel spectrogram of one clip: `values` has shape `[channels, mel_bins, frames]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub values: Tensor<f32>,
    pub frame_params: FrameParams,
}

impl FeatureMap {
    pub fn new(values: Tensor<f32>, frame_params: FrameParams) -> Result<Self> {
        if values.shape().len() != 3 {
            return Err(Error::dim(format!("feature map must be [C, M, T], got {:?}", values.shape())));
        }
        Ok(FeatureMap { values, frame_params })
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn mel_bins(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[2]
    }
}

fn hann(n: usize) -> Vec<f64> {
    // periodic Hann
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

/// Magnitude STFT → mel filterbank → natural log with [`LOG_EPS`], per channel.
pub fn logmel(clip: &AudioClip, mel_bins: usize, params: FrameParams) -> Result<FeatureMap> {
    if params.window == 0 || params.hop == 0 || params.fft_size < params.window {
        return Err(Error::config(format!("invalid frame parameters {params:?}")));
    }
    let frames = params
        .frame_count(clip.len())
        .ok_or(Error::InputTooShort { samples: clip.len(), window: params.window })?;
    let bank = MelFilterbank::new(mel_bins, params.fft_size, clip.sample_rate)?;
    let window = hann(params.window);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(params.fft_size);
    let n_freqs = params.fft_size / 2 + 1;

    let channels = clip.num_channels();
    let mut out = vec![0.0f32; channels * mel_bins * frames];
    let mut buf = vec![Complex::new(0.0, 0.0); params.fft_size];
    let mut mag = vec![0.0; n_freqs];
    let mut mel = vec![0.0; mel_bins];
    for (c, samples) in clip.channels.iter().enumerate() {
        for t in 0..frames {
            let start = t * params.hop;
            for (j, b) in buf.iter_mut().enumerate() {
                *b = if j < params.window {
                    Complex::new(samples[start + j] as f64 * window[j], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            fft.process(&mut buf);
            for (m, b) in mag.iter_mut().zip(&buf) {
                *m = b.norm();
            }
            bank.apply(&mag, &mut mel);
            for (m, &v) in mel.iter().enumerate() {
                out[(c * mel_bins + m) * frames + t] = (v + LOG_EPS).ln() as f32;
            }
        }
    }
    FeatureMap::new(Tensor::new(vec![channels, mel_bins, frames], out)?, params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mel_of_1000_hz() {
        let m = hz_to_mel(1000.0);
        assert!((m - 999.985).abs() < 1e-2, "{m}");
        assert!((mel_to_hz(m) - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn silence_is_log_eps() {
        let clip = AudioClip::new(vec![vec![0.0; 8192]; 2], 48_000).unwrap();
        let f = logmel(&clip, 40, FrameParams::default()).unwrap();
        assert_eq!(f.values.shape(), &[2, 40, 7]);
        let expected = (LOG_EPS).ln() as f32;
        assert!(f.values.data().iter().all(|&v| v == expected));
    }

    #[test]
    fn ten_seconds_at_48k_gives_467_frames() {
        assert_eq!(FrameParams::default().frame_count(480_000), Some(467));
    }

    #[test]
    fn too_short() {
        let clip = AudioClip::new(vec![vec![0.0; 2047]], 48_000).unwrap();
        assert!(matches!(
            logmel(&clip, 40, FrameParams::default()),
            Err(Error::InputTooShort { samples: 2047, window: 2048 })
        ));
    }

    #[test]
    fn sine_at_center_lands_in_its_bin() {
        let rate = 48_000u32;
        let bank = MelFilterbank::new(40, 2048, rate).unwrap();
        for (j, &hz) in bank.centers_hz().iter().enumerate() {
            let s: Vec<f32> = (0..16_384)
                .map(|i| 0.5 * (2.0 * PI * hz * i as f64 / rate as f64).sin() as f32)
                .collect();
            let clip = AudioClip::new(vec![s], rate).unwrap();
            let f = logmel(&clip, 40, FrameParams::default()).unwrap();
            let t = f.frames();
            let avg: Vec<f64> = (0..40)
                .map(|m| f.values.data()[m * t..(m + 1) * t].iter().map(|&v| v as f64).sum::<f64>() / t as f64)
                .collect();
            let arg = (0..40).fold(0, |b, m| if avg[m] > avg[b] { m } else { b });
            assert_eq!(arg, j, "center {hz:.1} Hz");
        }
    }
}
