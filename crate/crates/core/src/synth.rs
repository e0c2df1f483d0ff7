//! Synthetic scene/city corpus.
//!
//! A clip's mel power is built from
//! - a per-scene rank-1 ambient pattern (spectral profile × slow temporal envelope),
//! - per-scene event bursts (a short band-limited template at random onsets),
//! - a per-city coloration (spectral tilt, gain and a stationary hum band),
//! - a per-recording-location spectral ripple,
//! - multiplicative log-normal noise, and a slightly jittered second channel.
//!
//! Scene identity lives in the ambient profile and events. The location
//! ripple is drawn per (scene, city, location), so clips of one scene from one
//! city cluster together and the clusters of a scene drift apart across
//! cities; a classifier that keys on those signatures fails on a new city.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audio::{AudioClip, FrameParams, MelFilterbank};
use crate::dataset::{Dataset, Example, Manifest, ManifestRow, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SCENE_NAMES: [&str; 10] = [
    "airport",
    "bus",
    "metro",
    "metro_station",
    "park",
    "public_square",
    "shopping_mall",
    "street_pedestrian",
    "street_traffic",
    "tram",
];
const CITY_NAMES: [&str; 10] =
    ["barcelona", "helsinki", "lisbon", "london", "lyon", "milan", "paris", "prague", "stockholm", "vienna"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub num_scenes: usize,
    pub num_cities: usize,
    pub clips_per_pair: usize,
    pub mel_bins: usize,
    pub frames: usize,
    pub channels: usize,
    /// Recording locations per (scene, city) pair.
    pub locations_per_pair: usize,
    /// City excluded from training; defaults to the last city.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub held_out_city: Option<usize>,
    /// Fraction of each seen-city pair routed to the eval split.
    pub eval_fraction: f64,
    /// Standard deviation of the per-cell log-normal noise.
    pub noise_level: f64,
    /// Scale of the city coloration (0 disables it).
    pub city_strength: f64,
    /// Scale of the per-location ripple (the scene-within-city signature).
    pub location_strength: f64,
    /// How far scene profiles may differ from a shared base profile, in (0, 1].
    pub scene_contrast: f64,
    /// Maximum event bursts per clip.
    pub max_events: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_scenes: 4,
            num_cities: 4,
            clips_per_pair: 40,
            mel_bins: 40,
            frames: 32,
            channels: 2,
            locations_per_pair: 2,
            held_out_city: None,
            eval_fraction: 0.25,
            noise_level: 0.7,
            city_strength: 0.5,
            location_strength: 1.5,
            scene_contrast: 0.3,
            max_events: 3,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_scenes < 2 || self.num_cities < 1 || self.clips_per_pair < 1 {
            return Err(Error::config("need >= 2 scenes, >= 1 city and >= 1 clip per pair"));
        }
        if self.mel_bins < 4 || self.frames < 4 || self.channels == 0 || self.locations_per_pair == 0 {
            return Err(Error::config("mel_bins and frames must be >= 4, channels and locations >= 1"));
        }
        if let Some(h) = self.held_out_city {
            if h >= self.num_cities {
                return Err(Error::config(format!("held_out_city {h} out of {} cities", self.num_cities)));
            }
        }
        if self.num_cities < 2 && self.held_out_city.is_some() {
            return Err(Error::config("cannot hold out the only city"));
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return Err(Error::config("eval_fraction must be in [0, 1)"));
        }
        for (name, v) in [
            ("noise_level", self.noise_level),
            ("city_strength", self.city_strength),
            ("location_strength", self.location_strength),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be >= 0")));
            }
        }
        if !(self.scene_contrast > 0.0 && self.scene_contrast <= 1.0) {
            return Err(Error::config("scene_contrast must be in (0, 1]"));
        }
        Ok(())
    }

    /// The city left out of training (`None` with a single city).
    pub fn held_out(&self) -> Option<usize> {
        self.held_out_city.or((self.num_cities >= 2).then(|| self.num_cities - 1))
    }

    pub fn scene_name(i: usize) -> String {
        SCENE_NAMES.get(i).map(|s| s.to_string()).unwrap_or_else(|| format!("scene{i}"))
    }

    pub fn city_name(i: usize) -> String {
        CITY_NAMES.get(i).map(|s| s.to_string()).unwrap_or_else(|| format!("city{i}"))
    }
}

/// One generated clip: linear mel power `[C, M, T]` plus labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthClip {
    pub name: String,
    pub scene: usize,
    pub city: usize,
    pub split: Split,
    pub power: Tensor<f32>,
}

impl SynthClip {
    /// Natural-log features, matching the log-mel front end's compression.
    pub fn log_features(&self) -> Tensor<f32> {
        self.power.map(|v| ((v as f64) + crate::audio::LOG_EPS).ln() as f32)
    }
}

struct SceneTemplate {
    profile: Vec<f64>,
    env_depth: f64,
    env_cycles: f64,
    event_center: f64,
    event_width: f64,
    event_frames: usize,
    event_gain: f64,
}

struct CityTemplate {
    tilt: f64,
    gain: f64,
    hum_center: f64,
    hum_gain: f64,
}

fn bump(m: f64, center: f64, width: f64) -> f64 {
    (-0.5 * ((m - center) / width).powi(2)).exp()
}

fn smooth_profile(rng: &mut ChaCha8Rng, bins: usize, bumps: usize) -> Vec<f64> {
    let parts: Vec<(f64, f64, f64)> = (0..bumps)
        .map(|_| {
            let c = rng.random_range(0.0..bins as f64);
            let w = rng.random_range(0.06..0.2) * bins as f64;
            let h = rng.random_range(0.5..2.0);
            (c, w, h)
        })
        .collect();
    (0..bins).map(|m| 0.2 + parts.iter().map(|&(c, w, h)| h * bump(m as f64, c, w)).sum::<f64>()).collect()
}

/// Generate every clip of the corpus, ordered by scene, city, clip index.
pub fn generate(spec: &SynthSpec) -> Result<Vec<SynthClip>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (m_bins, frames) = (spec.mel_bins, spec.frames);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");

    let base = smooth_profile(&mut rng, m_bins, 3);
    let scenes: Vec<SceneTemplate> = (0..spec.num_scenes)
        .map(|_| {
            let own = smooth_profile(&mut rng, m_bins, 3);
            let profile =
                base.iter().zip(&own).map(|(b, o)| (1.0 - spec.scene_contrast) * b + spec.scene_contrast * o).collect();
            SceneTemplate {
                profile,
                env_depth: rng.random_range(0.1..0.6),
                env_cycles: rng.random_range(0.5..3.0),
                event_center: rng.random_range(0.0..m_bins as f64),
                event_width: rng.random_range(0.03..0.08) * m_bins as f64,
                event_frames: rng.random_range(2..=(frames / 6).max(2)),
                event_gain: rng.random_range(1.5..4.0),
            }
        })
        .collect();
    let cities: Vec<CityTemplate> = (0..spec.num_cities)
        .map(|_| CityTemplate {
            tilt: rng.random_range(-1.5..1.5),
            gain: rng.random_range(-0.7f64..0.7).exp(),
            hum_center: rng.random_range(0.0..m_bins as f64),
            hum_gain: rng.random_range(0.5..2.0),
        })
        .collect();
    let locations: Vec<Vec<Vec<f64>>> = (0..spec.num_scenes * spec.num_cities)
        .map(|_| {
            (0..spec.locations_per_pair)
                .map(|_| {
                    let ripple = smooth_profile(&mut rng, m_bins, 2);
                    let mean = ripple.iter().sum::<f64>() / m_bins as f64;
                    ripple.iter().map(|r| (spec.location_strength * (r / mean - 1.0)).exp()).collect()
                })
                .collect()
        })
        .collect();

    let held_out = spec.held_out();
    let eval_per_pair = (spec.eval_fraction * spec.clips_per_pair as f64).round() as usize;
    let mut clips = Vec::with_capacity(spec.num_scenes * spec.num_cities * spec.clips_per_pair);
    for (s, scene) in scenes.iter().enumerate() {
        for (c, city) in cities.iter().enumerate() {
            for k in 0..spec.clips_per_pair {
                let loc = k % spec.locations_per_pair;
                let ripple = &locations[s * spec.num_cities + c][loc];
                let phase = rng.random_range(0.0..2.0 * PI);
                let mut clean = vec![0.0f64; m_bins * frames];
                for m in 0..m_bins {
                    let x = m as f64 / (m_bins - 1) as f64 - 0.5;
                    let color = city.gain * (spec.city_strength * city.tilt * x).exp();
                    let hum = spec.city_strength * city.hum_gain * bump(m as f64, city.hum_center, 1.0);
                    for t in 0..frames {
                        let env = 1.0
                            + scene.env_depth * (2.0 * PI * scene.env_cycles * t as f64 / frames as f64 + phase).sin();
                        clean[m * frames + t] = color * (scene.profile[m] * env * ripple[m] + hum);
                    }
                }
                let events = rng.random_range(0..=spec.max_events);
                for _ in 0..events {
                    let onset = rng.random_range(0..frames);
                    let gain = scene.event_gain * rng.random_range(0.7..1.3);
                    for t in onset..(onset + scene.event_frames).min(frames) {
                        for m in 0..m_bins {
                            clean[m * frames + t] += gain * bump(m as f64, scene.event_center, scene.event_width);
                        }
                    }
                }
                let mut power = Vec::with_capacity(spec.channels * m_bins * frames);
                for ch in 0..spec.channels {
                    let jitter = if ch == 0 { 0.0 } else { 0.1 };
                    for &v in &clean {
                        let n: f64 = std_normal.sample(&mut rng);
                        let j: f64 = std_normal.sample(&mut rng);
                        power.push((v * (spec.noise_level * n + jitter * j).exp()) as f32);
                    }
                }
                let split = if Some(c) == held_out || k < eval_per_pair { Split::Eval } else { Split::Train };
                clips.push(SynthClip {
                    name: format!("{}-{}-{}-{}-s", SynthSpec::scene_name(s), SynthSpec::city_name(c), loc, k),
                    scene: s,
                    city: c,
                    split,
                    power: Tensor::new(vec![spec.channels, m_bins, frames], power)?,
                });
            }
        }
    }
    Ok(clips)
}

/// Log-feature dataset straight from the generator (no audio round trip).
pub fn dataset(spec: &SynthSpec) -> Result<Dataset> {
    let clips = generate(spec)?;
    let mut ds = Dataset {
        scenes: (0..spec.num_scenes).map(SynthSpec::scene_name).collect(),
        cities: (0..spec.num_cities).map(SynthSpec::city_name).collect(),
        ..Default::default()
    };
    for clip in clips {
        let ex = Example { name: clip.name.clone(), features: clip.log_features(), scene: clip.scene, city: clip.city };
        match clip.split {
            Split::Train => ds.train.push(ex),
            Split::Eval => ds.eval.push(ex),
        }
    }
    Ok(ds)
}

/// Manifest rows for the clips, with `extension` appended to each name.
pub fn manifest(clips: &[SynthClip], extension: &str) -> Manifest {
    Manifest {
        rows: clips
            .iter()
            .map(|c| ManifestRow {
                path: format!("{}.{extension}", c.name),
                scene: SynthSpec::scene_name(c.scene),
                city: SynthSpec::city_name(c.city),
                device: Some("s".into()),
                split: c.split,
            })
            .collect(),
    }
}

/// Render a clip as audio: one sinusoid per mel-band centre whose amplitude
/// follows the band's power from frame to frame. The result spans exactly
/// the clip's frame count under `params`.
pub fn render_audio(clip: &SynthClip, params: FrameParams, sample_rate: u32) -> Result<AudioClip> {
    let &[channels, m_bins, frames] = clip.power.shape() else {
        return Err(Error::dim("synthetic power map must be [C, M, T]"));
    };
    let centers = MelFilterbank::new(m_bins, params.fft_size, sample_rate)?.centers_hz().to_vec();
    let len = (frames - 1) * params.hop + params.window;
    let scale = 0.5 / m_bins as f64;
    let mut out = Vec::with_capacity(channels);
    for ch in 0..channels {
        let p = &clip.power.data()[ch * m_bins * frames..(ch + 1) * m_bins * frames];
        let mut s = vec![0.0f64; len];
        for (m, &hz) in centers.iter().enumerate() {
            let w = 2.0 * PI * hz / sample_rate as f64;
            let phase = m as f64 * 0.7;
            for (i, v) in s.iter_mut().enumerate() {
                // frame t covers [t·hop, t·hop + window); interpolate between frame centres
                let pos = (i as f64 - params.window as f64 / 2.0) / params.hop as f64;
                let t0 = pos.floor().clamp(0.0, (frames - 1) as f64) as usize;
                let t1 = (t0 + 1).min(frames - 1);
                let f = (pos - t0 as f64).clamp(0.0, 1.0);
                let amp = ((1.0 - f) * p[m * frames + t0] as f64 + f * p[m * frames + t1] as f64).max(0.0).sqrt();
                *v += scale * amp * (w * i as f64 + phase).sin();
            }
        }
        out.push(s.into_iter().map(|v| v.clamp(-1.0, 1.0) as f32).collect());
    }
    AudioClip::new(out, sample_rate)
}
