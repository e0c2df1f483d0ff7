//! Adam, the minibatch step, and the epoch loop.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_masks, draw_masks, mix_into, mix_labels, sample_lambda, AugmentConfig};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::eval::{accuracy, evaluate, EpochRecord, EvalReport, LastK};
use crate::losses::{combined_loss, one_hot, sample_triplets, triplet_loss, ClipMeta, LossConfig};
use crate::model::{Mode, Model, ModelSpec};
use crate::tensor::{BatchStats, Graph, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Independent random streams derived from the run seed, so that e.g.
/// enabling the triplet sampler does not perturb dropout or shuffling.
mod stream {
    pub const SHUFFLE: u64 = 1;
    pub const DROPOUT: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const TRIPLET: u64 = 4;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    /// Reported accuracy is the mean eval accuracy of the last `last_k` epochs.
    pub last_k: usize,
    /// Global gradient-norm clip; off when `None`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
    /// Also score the training split after every epoch.
    #[serde(default = "default_true")]
    pub track_train_accuracy: bool,
}

fn default_true() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            epochs: 200,
            batch_size: 32,
            seed: 0,
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
            last_k: 10,
            grad_clip: None,
            track_train_accuracy: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be >= 1"));
        }
        if self.last_k == 0 || self.last_k > self.epochs {
            return Err(Error::config(format!("last_k must be in 1..={}, got {}", self.epochs, self.last_k)));
        }
        if self.seed > i64::MAX as u64 {
            return Err(Error::config(format!("seed must be <= {}", i64::MAX)));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::config(format!("grad_clip must be > 0, got {c}")));
            }
        }
        self.loss.validate()?;
        if self.augment.mixup && self.loss.use_triplet {
            return Err(Error::config(
                "mixup cannot be combined with the triplet loss: mixed-up labels are not discrete, \
                 so same-scene positives and different-scene negatives are undefined",
            ));
        }
        Ok(())
    }
}

/// Bias-corrected Adam without weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub clip: Option<f64>,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = sizes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        Adam { lr, clip: None, t: 0, m, v }
    }

    pub fn with_clip(mut self, clip: Option<f64>) -> Self {
        self.clip = clip;
        self
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update. Every gradient is checked before any parameter changes, so
    /// a non-finite gradient leaves the parameters untouched.
    pub fn step(&mut self, params: &mut [(String, Tensor<f32>)], grads: &[Vec<f32>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer holds {} slots, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        let mut sq = 0.0f64;
        for ((name, p), g) in params.iter().zip(grads) {
            if p.numel() != g.len() {
                return Err(Error::dim(format!("gradient of `{name}` has {} values, expected {}", g.len(), p.numel())));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { name: name.clone() });
            }
            sq += g.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
        }
        let scale = match self.clip {
            Some(c) if sq.sqrt() > c => c / sq.sqrt(),
            _ => 1.0,
        };
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (i, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g[j] as f64 * scale;
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * gj;
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * gj * gj;
                let update = self.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + ADAM_EPS);
                *w = (*w as f64 - update) as f32;
            }
        }
        Ok(())
    }
}

/// A training minibatch: stacked inputs, soft target rows, and metadata.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[N, C, M, T]`
    pub input: Tensor<f32>,
    /// `N × num_classes`, row-major.
    pub targets: Vec<f64>,
    pub meta: Vec<ClipMeta>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub loss: f64,
    pub ce: f64,
    /// Triplet term before weighting; `None` when disabled or no anchor qualified.
    pub triplet: Option<f64>,
    pub triplets: usize,
    pub fallbacks: usize,
    /// Gradients in [`Model::params`] order.
    pub grads: Vec<Vec<f32>>,
    pub stats: Vec<BatchStats>,
}

/// Positions usable as anchors: their scene occurs at least twice in the batch
/// and at least one other scene is present.
pub fn in_batch_anchors(meta: &[ClipMeta]) -> Vec<usize> {
    let scenes: BTreeSet<usize> = meta.iter().map(|m| m.scene).collect();
    if scenes.len() < 2 {
        return Vec::new();
    }
    (0..meta.len())
        .filter(|&i| meta.iter().filter(|m| m.scene == meta[i].scene).count() >= 2)
        .collect()
}

/// Forward, objective and backward for one batch. No parameters change.
pub fn compute_gradients(
    model: &Model,
    batch: &Batch,
    loss: &LossConfig,
    dropout_rng: &mut ChaCha8Rng,
    triplet_rng: &mut ChaCha8Rng,
    scene_names: &[String],
) -> Result<StepOutput> {
    let mut g = Graph::<f32>::new();
    let bound = model.bind(&mut g, true);
    let (out, stats) = model.forward(&mut g, &bound, &batch.input, Mode::Train { dropout_rng })?;
    let ce = g.softmax_cross_entropy(out.logits, &batch.targets)?;
    let ce_value = g.value(ce).item() as f64;
    let mut total = ce;
    if loss.aux_band_weight > 0.0 {
        let w = loss.aux_band_weight / out.band_logits.len() as f64;
        for &bl in &out.band_logits {
            let c = g.softmax_cross_entropy(bl, &batch.targets)?;
            let c = g.scale(c, w);
            total = g.add(total, c)?;
        }
    }
    let (mut triplet, mut triplets, mut fallbacks) = (None, 0, 0);
    if loss.use_triplet {
        let anchors = in_batch_anchors(&batch.meta);
        let name = |s: usize| scene_names.get(s).cloned().unwrap_or_else(|| format!("#{s}"));
        let tb = sample_triplets(&batch.meta, &anchors, &name, triplet_rng)?;
        if !tb.is_empty() {
            let emb = if loss.normalize_embeddings { g.l2_normalize_rows(out.embedding)? } else { out.embedding };
            let t = triplet_loss(&mut g, emb, &tb, loss.margin)?;
            triplet = Some(g.value(t).item() as f64);
            triplets = tb.len();
            fallbacks = tb.fallback.iter().filter(|&&f| f).count();
            total = combined_loss(&mut g, total, t, loss.gamma)?;
        }
    }
    let loss_value = g.value(total).item() as f64;
    g.backward(total)?;
    let grads = bound
        .iter()
        .zip(model.params())
        .map(|(&v, (_, t))| g.grad(v).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    Ok(StepOutput { loss: loss_value, ce: ce_value, triplet, triplets, fallbacks, grads, stats })
}

/// Stack examples `idx` of the train split and apply augmentation.
pub fn make_batch<R: Rng + ?Sized>(
    data: &Dataset,
    idx: &[usize],
    augment: &AugmentConfig,
    num_classes: usize,
    rng: &mut R,
) -> Result<Batch> {
    let parts: Vec<&Tensor<f32>> = idx.iter().map(|&i| &data.train[i].features).collect();
    let mut input = Tensor::stack(&parts)?;
    let labels: Vec<usize> = idx.iter().map(|&i| data.train[i].scene).collect();
    let mut targets = one_hot(&labels, num_classes);
    let meta = idx.iter().map(|&i| ClipMeta { scene: data.train[i].scene, city: data.train[i].city }).collect();
    let &[n, c, m, t] = input.shape() else { unreachable!("stack of [C, M, T] maps") };
    let per = c * m * t;

    if augment.mixup && n > 1 {
        let lambda = sample_lambda(augment.mixup_alpha, rng)?;
        let mut partner: Vec<usize> = (0..n).collect();
        partner.shuffle(rng);
        let orig = input.data().to_vec();
        let orig_targets = targets.clone();
        for (i, &j) in partner.iter().enumerate() {
            mix_into(&mut input.data_mut()[i * per..(i + 1) * per], &orig[j * per..(j + 1) * per], lambda);
            let mixed = mix_labels(
                &orig_targets[i * num_classes..(i + 1) * num_classes],
                &orig_targets[j * num_classes..(j + 1) * num_classes],
                lambda,
            );
            targets[i * num_classes..(i + 1) * num_classes].copy_from_slice(&mixed);
        }
    }
    if augment.spec_augment {
        for i in 0..n {
            let masks = draw_masks(&augment.specaug, m, t, rng);
            apply_masks(&mut input.data_mut()[i * per..(i + 1) * per], c, m, t, &masks);
        }
    }
    Ok(Batch { input, targets, meta })
}

/// Random-stream position, enough to resume a ChaCha8 stream exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    /// Decimal `u128` word position.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        RngState { seed, stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        let pos: u128 = self.word_pos.parse().map_err(|_| Error::checkpoint("rng.word_pos", "not an integer"))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub report: EvalReport,
    /// Shuffle-stream position after the last epoch.
    pub rng: RngState,
}

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

pub fn train(spec: &ModelSpec, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(spec, data, cfg, |_| {})
}

/// Train from scratch; `progress` sees each epoch's record as it completes.
///
/// The returned report scores the final model on the eval split (on the
/// training split when no eval split exists) and carries the epoch curve and
/// the last-k average.
pub fn train_with_progress(
    spec: &ModelSpec,
    data: &Dataset,
    cfg: &TrainConfig,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let [c, m, t] = data.validate()?;
    if c != spec.channels[0] || m != spec.mel_bins {
        return Err(Error::config(format!(
            "features are [{c}, {m}, {t}] but the model expects {} channels and {} mel bins",
            spec.channels[0], spec.mel_bins
        )));
    }
    if data.scenes.len() != spec.num_classes {
        return Err(Error::config(format!(
            "dataset has {} scenes, model has {} classes",
            data.scenes.len(),
            spec.num_classes
        )));
    }
    cfg.augment.validate_for(m, t)?;

    let mut model = Model::build(spec, cfg.seed)?;
    let mut shuffle_rng = seeded(cfg.seed, stream::SHUFFLE);
    let mut dropout_rng = seeded(cfg.seed, stream::DROPOUT);
    let mut augment_rng = seeded(cfg.seed, stream::AUGMENT);
    let mut triplet_rng = seeded(cfg.seed, stream::TRIPLET);
    let mut adam = Adam::new(cfg.lr, model.params().iter().map(|(_, p)| p.numel())).with_clip(cfg.grad_clip);
    let train_cities: BTreeSet<String> = data.train_cities().into_iter().map(|i| data.cities[i].clone()).collect();

    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let batch = make_batch(data, idx, &cfg.augment, spec.num_classes, &mut augment_rng)?;
            let step = compute_gradients(&model, &batch, &cfg.loss, &mut dropout_rng, &mut triplet_rng, &data.scenes)?;
            adam.step(model.params_mut(), &step.grads)?;
            model.update_running_stats(&step.stats);
            loss_sum += step.loss;
            batches += 1;
        }
        let (eval_accuracy, unseen_city_accuracy) = if data.eval.is_empty() {
            (None, None)
        } else {
            let r = evaluate(&model, data, &data.eval, &train_cities)?;
            (Some(r.overall_accuracy), r.unseen_city_accuracy)
        };
        let train_accuracy = if cfg.track_train_accuracy { Some(accuracy(&model, &data.train)?) } else { None };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            train_accuracy,
            eval_accuracy,
            unseen_city_accuracy,
        };
        progress(&record);
        curve.push(record);
    }

    let scored = if data.eval.is_empty() { &data.train } else { &data.eval };
    let mut report = evaluate(&model, data, scored, &train_cities)?;
    let tail = &curve[curve.len() - cfg.last_k..];
    let mean = |f: fn(&EpochRecord) -> Option<f64>| -> Option<f64> {
        let vals: Option<Vec<f64>> = tail.iter().map(f).collect();
        vals.map(|v| v.iter().sum::<f64>() / v.len() as f64)
    };
    let overall = if data.eval.is_empty() { mean(|r| r.train_accuracy) } else { mean(|r| r.eval_accuracy) };
    report.last_k = overall.map(|overall_accuracy| LastK {
        k: cfg.last_k,
        overall_accuracy,
        unseen_city_accuracy: mean(|r| r.unseen_city_accuracy),
    });
    report.epoch_curve = curve;
    Ok(TrainOutcome { model, report, rng: RngState::capture(cfg.seed, &shuffle_rng) })
}
