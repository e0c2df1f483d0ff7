//! Minimal RIFF/WAVE reader and writer for PCM-16 and IEEE float-32.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const WAVE_FORMAT_PCM: u16 = 1;
const WAVE_FORMAT_IEEE_FLOAT: u16 = 3;
const WAVE_FORMAT_EXTENSIBLE: u16 = 0xFFFE;

/// Decoded audio, one sample vector per channel, values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub channels: Vec<Vec<f32>>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(channels: Vec<Vec<f32>>, sample_rate: u32) -> Result<Self> {
        if channels.is_empty() || channels.len() > 2 {
            return Err(Error::config(format!("clips have 1 or 2 channels, got {}", channels.len())));
        }
        let len = channels[0].len();
        if channels.iter().any(|c| c.len() != len) {
            return Err(Error::dim("channels differ in length"));
        }
        if channels.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::config("audio samples must be finite"));
        }
        if sample_rate == 0 {
            return Err(Error::config("sample rate must be positive"));
        }
        Ok(AudioClip { channels, sample_rate })
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn duration_secs(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleFormat {
    Pcm16,
    Float32,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Decode {
                offset: self.pos as u64,
                message: format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_wav_bytes(&bytes)
}

pub fn decode_wav_bytes(bytes: &[u8]) -> Result<AudioClip> {
    let mut c = Cursor { bytes, pos: 0 };
    let bad = |offset: usize, message: String| Error::Decode { offset: offset as u64, message };

    if c.take(4, "RIFF tag")? != b"RIFF" {
        return Err(bad(0, "missing RIFF tag".into()));
    }
    c.u32("RIFF size")?;
    if c.take(4, "WAVE tag")? != b"WAVE" {
        return Err(bad(8, "missing WAVE tag".into()));
    }

    let mut fmt: Option<(u16, u16, u32, u16, usize)> = None;
    loop {
        let chunk_at = c.pos;
        let id = c.take(4, "chunk id")?;
        let size = c.u32("chunk size")? as usize;
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(bad(chunk_at, format!("fmt chunk of {size} bytes")));
                }
                let body_at = c.pos;
                let mut tag = c.u16("format tag")?;
                let channels = c.u16("channel count")?;
                let rate = c.u32("sample rate")?;
                c.u32("byte rate")?;
                c.u16("block align")?;
                let bits = c.u16("bits per sample")?;
                if tag == WAVE_FORMAT_EXTENSIBLE && size >= 40 {
                    c.take(8, "extensible header")?;
                    tag = c.u16("extensible subformat")?;
                }
                c.pos = body_at;
                c.take(size + (size & 1), "fmt chunk")?;
                fmt = Some((tag, channels, rate, bits, body_at));
            }
            b"data" => {
                let (tag, channels, rate, bits, fmt_at) =
                    fmt.ok_or_else(|| bad(chunk_at, "data chunk before fmt chunk".into()))?;
                let format = match (tag, bits) {
                    (WAVE_FORMAT_PCM, 16) => SampleFormat::Pcm16,
                    (WAVE_FORMAT_IEEE_FLOAT, 32) => SampleFormat::Float32,
                    _ => {
                        return Err(bad(fmt_at, format!("unsupported codec: format tag {tag}, {bits} bits")));
                    }
                };
                if !(1..=2).contains(&channels) {
                    return Err(bad(fmt_at + 2, format!("unsupported channel count {channels}")));
                }
                if rate == 0 {
                    return Err(bad(fmt_at + 4, "sample rate 0".into()));
                }
                let data_at = c.pos;
                let payload = c.take(size, "data chunk")?;
                let width = if format == SampleFormat::Pcm16 { 2 } else { 4 };
                let frame = width * channels as usize;
                if payload.len() % frame != 0 {
                    return Err(bad(data_at, format!("data size {size} is not a multiple of frame size {frame}")));
                }
                let frames = payload.len() / frame;
                let mut out = vec![Vec::with_capacity(frames); channels as usize];
                for (j, chunk) in payload.chunks_exact(width).enumerate() {
                    let v = match format {
                        SampleFormat::Pcm16 => i16::from_le_bytes([chunk[0], chunk[1]]) as f32 / 32768.0,
                        SampleFormat::Float32 => {
                            let v = f32::from_le_bytes(chunk.try_into().unwrap());
                            if !v.is_finite() {
                                return Err(bad(data_at + j * 4, "non-finite float sample".into()));
                            }
                            v.clamp(-1.0, 1.0)
                        }
                    };
                    out[j % channels as usize].push(v);
                }
                return AudioClip::new(out, rate);
            }
            _ => {
                c.take(size + (size & 1), "chunk body")?;
            }
        }
    }
}

pub fn encode_wav(clip: &AudioClip, format: SampleFormat) -> Vec<u8> {
    let channels = clip.num_channels() as u16;
    let (tag, bits) = match format {
        SampleFormat::Pcm16 => (WAVE_FORMAT_PCM, 16u16),
        SampleFormat::Float32 => (WAVE_FORMAT_IEEE_FLOAT, 32u16),
    };
    let block = channels * bits / 8;
    let data_len = clip.len() * block as usize;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&channels.to_le_bytes());
    out.extend_from_slice(&clip.sample_rate.to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate * block as u32).to_le_bytes());
    out.extend_from_slice(&block.to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for i in 0..clip.len() {
        for ch in &clip.channels {
            match format {
                SampleFormat::Pcm16 => {
                    let v = (ch[i].clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    out.extend_from_slice(&v.to_le_bytes());
                }
                SampleFormat::Float32 => out.extend_from_slice(&ch[i].to_le_bytes()),
            }
        }
    }
    out
}

pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip, format: SampleFormat) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_wav(clip, format)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pcm16_bytes(samples: &[i16], channels: u16, rate: u32) -> Vec<u8> {
        let clip = AudioClip::new(
            (0..channels as usize)
                .map(|c| samples.iter().skip(c).step_by(channels as usize).map(|&s| s as f32 / 32768.0).collect())
                .collect(),
            rate,
        )
        .unwrap();
        encode_wav(&clip, SampleFormat::Pcm16)
    }

    #[test]
    fn silence_one_second() {
        let bytes = pcm16_bytes(&vec![0i16; 2 * 48_000], 2, 48_000);
        let clip = decode_wav_bytes(&bytes).unwrap();
        assert_eq!(clip.num_channels(), 2);
        assert_eq!(clip.len(), 48_000);
        assert!(clip.channels.iter().flatten().all(|&v| v == 0.0));
        assert!((clip.duration_secs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn full_scale_normalizes_to_one() {
        let mut bytes = pcm16_bytes(&[0, 0], 1, 8000);
        let n = bytes.len();
        bytes[n - 4..n - 2].copy_from_slice(&32767i16.to_le_bytes());
        bytes[n - 2..].copy_from_slice(&(-32768i16).to_le_bytes());
        let clip = decode_wav_bytes(&bytes).unwrap();
        assert!((clip.channels[0][0] - 1.0).abs() <= 1.0 / 32768.0);
        assert_eq!(clip.channels[0][1], -1.0);
    }

    #[test]
    fn sine_round_trip_within_one_lsb() {
        let rate = 48_000;
        let sine: Vec<f32> =
            (0..rate).map(|i| 0.8 * (2.0 * std::f32::consts::PI * 440.0 * i as f32 / rate as f32).sin()).collect();
        let clip = AudioClip::new(vec![sine.clone(), sine], rate).unwrap();
        let back = decode_wav_bytes(&encode_wav(&clip, SampleFormat::Pcm16)).unwrap();
        let err = clip
            .channels
            .iter()
            .flatten()
            .zip(back.channels.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(err <= 1.0 / 32768.0, "max error {err}");

        let back32 = decode_wav_bytes(&encode_wav(&clip, SampleFormat::Float32)).unwrap();
        assert_eq!(back32, clip);
    }

    #[test]
    fn bad_magic_reports_offset() {
        let mut bytes = pcm16_bytes(&[0, 0], 1, 8000);
        bytes[8..12].copy_from_slice(b"AVI ");
        match decode_wav_bytes(&bytes) {
            Err(Error::Decode { offset, .. }) => assert_eq!(offset, 8),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unsupported_codec() {
        let mut bytes = pcm16_bytes(&[0, 0], 1, 8000);
        // 8-bit PCM
        bytes[34..36].copy_from_slice(&8u16.to_le_bytes());
        let err = decode_wav_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("unsupported codec"), "{err}");
    }

    #[test]
    fn truncated_data() {
        let bytes = pcm16_bytes(&[1, 2, 3, 4], 1, 8000);
        let err = decode_wav_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Decode { offset: 44, .. }), "{err}");
    }
}
