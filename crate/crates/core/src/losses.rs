//! Cross-entropy, triplet and combined objectives, and the city-aware
//! triplet sampler.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Triplet margin α.
    pub margin: f64,
    /// Weight γ of the triplet term.
    pub gamma: f64,
    pub use_triplet: bool,
    /// L2-normalize embeddings before distances (off by default).
    #[serde(default)]
    pub normalize_embeddings: bool,
    /// Weight of the auxiliary per-band cross-entropy terms; 0 disables them.
    #[serde(default)]
    pub aux_band_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { margin: 0.2, gamma: 10.0, use_triplet: false, normalize_embeddings: false, aux_band_weight: 0.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::config(format!("triplet margin must be >= 0, got {}", self.margin)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.aux_band_weight >= 0.0 && self.aux_band_weight.is_finite()) {
            return Err(Error::config("aux_band_weight must be >= 0"));
        }
        Ok(())
    }
}

/// Mean cross-entropy between probability rows and (soft) target rows.
/// Probabilities below 1e-12 are clamped inside the log.
pub fn cross_entropy<F: Element>(g: &mut Graph<F>, probs: Var, targets: &[f64]) -> Result<Var> {
    g.cross_entropy(probs, targets)
}

/// Mean triplet hinge over the batch, on embedding rows of `emb`.
pub fn triplet_loss<F: Element>(g: &mut Graph<F>, emb: Var, batch: &TripletBatch, margin: f64) -> Result<Var> {
    g.triplet(emb, &batch.triples(), margin)
}

/// `ce + γ·triplet`.
pub fn combined_loss<F: Element>(g: &mut Graph<F>, ce: Var, triplet: Var, gamma: f64) -> Result<Var> {
    let scaled = g.scale(triplet, gamma);
    g.add(ce, scaled)
}

/// One-hot rows for integer labels.
pub fn one_hot(labels: &[usize], classes: usize) -> Vec<f64> {
    let mut out = vec![0.0; labels.len() * classes];
    for (r, &y) in labels.iter().enumerate() {
        out[r * classes + y] = 1.0;
    }
    out
}

/// Scene and environment (city) of one clip, as dense ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ClipMeta {
    pub scene: usize,
    pub city: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TripletBatch {
    pub anchors: Vec<usize>,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    /// Set where no different-city positive existed and a same-city clip was used.
    pub fallback: Vec<bool>,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn triples(&self) -> Vec<(usize, usize, usize)> {
        self.anchors
            .iter()
            .zip(&self.positives)
            .zip(&self.negatives)
            .map(|((&a, &p), &n)| (a, p, n))
            .collect()
    }
}

/// For each anchor: a positive drawn uniformly from clips of the same scene
/// recorded in a different city (falling back to the same city, never the
/// anchor itself) and a negative drawn uniformly from other scenes.
pub fn sample_triplets<R: Rng + ?Sized>(
    meta: &[ClipMeta],
    anchors: &[usize],
    scene_names: &dyn Fn(usize) -> String,
    rng: &mut R,
) -> Result<TripletBatch> {
    let mut batch = TripletBatch::default();
    let mut cross_city = Vec::new();
    let mut same_city = Vec::new();
    let mut other_scene = Vec::new();
    for &a in anchors {
        let anchor = *meta.get(a).ok_or_else(|| Error::dim(format!("anchor {a} out of {} clips", meta.len())))?;
        cross_city.clear();
        same_city.clear();
        other_scene.clear();
        for (j, m) in meta.iter().enumerate() {
            if m.scene != anchor.scene {
                other_scene.push(j);
            } else if m.city != anchor.city {
                cross_city.push(j);
            } else if j != a {
                same_city.push(j);
            }
        }
        let (pool, fallback) = if !cross_city.is_empty() {
            (&cross_city, false)
        } else if !same_city.is_empty() {
            (&same_city, true)
        } else {
            return Err(Error::Sampling {
                scene: scene_names(anchor.scene),
                message: "scene has a single clip, no positive exists".into(),
            });
        };
        if other_scene.is_empty() {
            return Err(Error::Sampling {
                scene: scene_names(anchor.scene),
                message: "no clip of another scene to use as negative".into(),
            });
        }
        batch.anchors.push(a);
        batch.positives.push(pool[rng.random_range(0..pool.len())]);
        batch.negatives.push(other_scene[rng.random_range(0..other_scene.len())]);
        batch.fallback.push(fallback);
    }
    Ok(batch)
}
