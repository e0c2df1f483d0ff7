//! Sub-spectral factorized CNN.
//!
//! Each mel band gets its own classifier: two conv blocks
//! (conv pair → batch-norm → ReLU → 2×2 max-pool), a time average, a
//! hidden dense layer and a band classifier. The band hidden activations are
//! concatenated and fed to a two-layer global head.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audio::SubBandSplit;
use crate::error::{Error, Result};
use crate::tensor::{BatchStats, ConvKernel, Graph, Tensor, Var};

/// Which activation the triplet loss sees.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    /// Concatenated per-band hidden activations (input of the global head).
    #[default]
    BandHidden,
    /// Concatenated, time-averaged output of the last conv block of every band.
    FinalConv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub mel_bins: usize,
    pub sub_size: usize,
    pub overlap: usize,
    pub kernel_k: usize,
    /// `(C_in¹, C_out¹, C_in², C_out²)`.
    pub channels: [usize; 4],
    pub per_band_hidden: usize,
    pub global_hidden: usize,
    pub num_classes: usize,
    pub factorized: bool,
    pub dropout: f64,
    #[serde(default)]
    pub embedding: EmbeddingSource,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self::logmel40()
    }
}

impl ModelSpec {
    pub fn logmel40() -> Self {
        ModelSpec {
            mel_bins: 40,
            sub_size: 20,
            overlap: 10,
            kernel_k: 7,
            channels: [2, 64, 64, 64],
            per_band_hidden: 32,
            global_hidden: 100,
            num_classes: 10,
            factorized: true,
            dropout: 0.3,
            embedding: EmbeddingSource::BandHidden,
        }
    }

    pub fn logmel200() -> Self {
        ModelSpec { mel_bins: 200, channels: [2, 32, 32, 64], ..Self::logmel40() }
    }

    pub fn with_factorized(&self, factorized: bool) -> Self {
        ModelSpec { factorized, ..self.clone() }
    }

    pub fn validate(&self) -> Result<SubBandSplit> {
        let [c1i, c1o, c2i, c2o] = self.channels;
        if c2i != c1o {
            return Err(Error::config(format!("channel chain broken: C_out¹={c1o} but C_in²={c2i}")));
        }
        if [c1i, c1o, c2i, c2o].contains(&0) {
            return Err(Error::config("channel counts must be positive"));
        }
        if self.kernel_k == 0 || self.kernel_k % 2 == 0 {
            return Err(Error::config(format!("kernel_k must be odd for same padding, got {}", self.kernel_k)));
        }
        if self.per_band_hidden == 0 || self.global_hidden == 0 || self.num_classes < 2 {
            return Err(Error::config("hidden sizes must be positive and num_classes >= 2"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        let split = SubBandSplit::new(self.mel_bins, self.sub_size, self.overlap)?;
        if self.sub_size < 4 {
            return Err(Error::config("sub_size must be >= 4 to survive two 2x2 pools"));
        }
        Ok(split)
    }

    pub fn band_count(&self) -> Result<usize> {
        Ok(self.validate()?.len())
    }

    /// Width of the flattened, time-averaged second-block output.
    pub fn flat_dim(&self) -> usize {
        self.channels[3] * (self.sub_size / 2 / 2)
    }

    pub fn embedding_dim(&self) -> Result<usize> {
        let bands = self.band_count()?;
        Ok(match self.embedding {
            EmbeddingSource::BandHidden => bands * self.per_band_hidden,
            EmbeddingSource::FinalConv => bands * self.flat_dim(),
        })
    }

    /// Names and shapes of every learnable tensor, in build order.
    pub fn param_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let split = self.validate()?;
        let [c1i, c1o, c2i, c2o] = self.channels;
        let k = self.kernel_k;
        let mut out = Vec::new();
        for b in 0..split.len() {
            for (blk, ci, co) in [(1, c1i, c1o), (2, c2i, c2o)] {
                let p = format!("band{b}.conv{blk}");
                if self.factorized {
                    let mid = ci.min(co);
                    out.push((format!("{p}.v.weight"), vec![mid, ci, k, 1]));
                    out.push((format!("{p}.h.weight"), vec![co, mid, 1, k]));
                    out.push((format!("{p}.h.bias"), vec![co]));
                } else {
                    out.push((format!("{p}.weight"), vec![co, ci, k, k]));
                    out.push((format!("{p}.bias"), vec![co]));
                }
                out.push((format!("band{b}.bn{blk}.weight"), vec![co]));
                out.push((format!("band{b}.bn{blk}.bias"), vec![co]));
            }
            out.push((format!("band{b}.fc.weight"), vec![self.per_band_hidden, self.flat_dim()]));
            out.push((format!("band{b}.fc.bias"), vec![self.per_band_hidden]));
            out.push((format!("band{b}.classifier.weight"), vec![self.num_classes, self.per_band_hidden]));
            out.push((format!("band{b}.classifier.bias"), vec![self.num_classes]));
        }
        let concat = split.len() * self.per_band_hidden;
        out.push(("head.fc1.weight".into(), vec![self.global_hidden, concat]));
        out.push(("head.fc1.bias".into(), vec![self.global_hidden]));
        out.push(("head.fc2.weight".into(), vec![self.num_classes, self.global_hidden]));
        out.push(("head.fc2.bias".into(), vec![self.num_classes]));
        Ok(out)
    }

    /// Batch-norm running statistics, in build order.
    pub fn buffer_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let split = self.validate()?;
        let mut out = Vec::new();
        for b in 0..split.len() {
            for (blk, co) in [(1, self.channels[1]), (2, self.channels[3])] {
                out.push((format!("band{b}.bn{blk}.running_mean"), vec![co]));
                out.push((format!("band{b}.bn{blk}.running_var"), vec![co]));
            }
        }
        Ok(out)
    }
}

/// Per-layer parameter counts.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterReport {
    /// Layer name (tensor name without `.weight` / `.bias`) → count.
    pub layers: Vec<(String, usize)>,
    pub total: usize,
}

impl ParameterReport {
    pub fn for_spec(spec: &ModelSpec) -> Result<Self> {
        let mut layers: Vec<(String, usize)> = Vec::new();
        for (name, shape) in spec.param_shapes()? {
            let layer = name.rsplit_once('.').map_or(name.as_str(), |(l, _)| l).to_string();
            let n: usize = shape.iter().product();
            match layers.last_mut() {
                Some((l, c)) if *l == layer => *c += n,
                _ => layers.push((layer, n)),
            }
        }
        let total = layers.iter().map(|(_, c)| c).sum();
        Ok(ParameterReport { layers, total })
    }
}

/// Parameter totals of the same spec built with factorized and square kernels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FactorizationComparison {
    pub factorized: usize,
    pub full: usize,
}

impl FactorizationComparison {
    pub fn for_spec(spec: &ModelSpec) -> Result<Self> {
        Ok(FactorizationComparison {
            factorized: ParameterReport::for_spec(&spec.with_factorized(true))?.total,
            full: ParameterReport::for_spec(&spec.with_factorized(false))?.total,
        })
    }

    pub fn ratio(&self) -> f64 {
        self.factorized as f64 / self.full as f64
    }
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    pub band_logits: Vec<Var>,
    /// The representation selected by [`ModelSpec::embedding`].
    pub embedding: Var,
    pub band_hidden: Var,
}

/// Whether a forward pass updates batch-norm statistics and applies dropout.
pub enum Mode<'a> {
    Train { dropout_rng: &'a mut ChaCha8Rng },
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    split: SubBandSplit,
    params: Vec<(String, Tensor<f32>)>,
    buffers: Vec<(String, Tensor<f32>)>,
}

pub const BN_MOMENTUM: f64 = 0.1;

impl Model {
    /// Kaiming-normal conv weights (fan-in, ReLU gain), Xavier-normal dense
    /// weights, zero biases, unit batch-norm scales. Deterministic in `seed`.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let split = spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for (name, shape) in spec.param_shapes()? {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".bias") {
                vec![0.0; n]
            } else if name.contains(".bn") {
                vec![1.0; n]
            } else if shape.len() == 4 {
                let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                sample_normal(&mut rng, (2.0 / fan_in).sqrt(), n)
            } else {
                let (fan_out, fan_in) = (shape[0] as f64, shape[1] as f64);
                sample_normal(&mut rng, (2.0 / (fan_in + fan_out)).sqrt(), n)
            };
            params.push((name, Tensor::new(shape, data)?));
        }
        let buffers = spec
            .buffer_shapes()?
            .into_iter()
            .map(|(name, shape)| {
                let fill = if name.ends_with("running_var") { 1.0 } else { 0.0 };
                (name, Tensor::full(shape, fill))
            })
            .collect();
        Ok(Model { spec: spec.clone(), split, params, buffers })
    }

    /// Reassemble a model from named tensors (e.g. a checkpoint). Every
    /// expected tensor must be present with the expected shape.
    pub fn from_tensors(spec: &ModelSpec, tensors: &BTreeMap<String, Tensor<f32>>) -> Result<Self> {
        let split = spec.validate()?;
        let fetch = |name: String, shape: Vec<usize>| -> Result<(String, Tensor<f32>)> {
            let t = tensors
                .get(&name)
                .ok_or_else(|| Error::checkpoint(&name, "tensor missing"))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::checkpoint(
                    &name,
                    format!("shape {:?} disagrees with model spec {shape:?}", t.shape()),
                ));
            }
            Ok((name, t.clone()))
        };
        let params = spec.param_shapes()?.into_iter().map(|(n, s)| fetch(n, s)).collect::<Result<_>>()?;
        let buffers = spec.buffer_shapes()?.into_iter().map(|(n, s)| fetch(n, s)).collect::<Result<_>>()?;
        Ok(Model { spec: spec.clone(), split, params, buffers })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn split(&self) -> &SubBandSplit {
        &self.split
    }

    pub fn params(&self) -> &[(String, Tensor<f32>)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [(String, Tensor<f32>)] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[(String, Tensor<f32>)] {
        &self.buffers
    }

    /// Parameters followed by buffers.
    pub fn named_tensors(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.params.iter().chain(&self.buffers).map(|(n, t)| (n.as_str(), t))
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<f32>> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn buffer(&self, name: &str) -> &Tensor<f32> {
        &self.buffers.iter().find(|(n, _)| n == name).expect("buffer exists by construction").1
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn parameter_report(&self) -> ParameterReport {
        ParameterReport::for_spec(&self.spec).expect("spec validated at build")
    }

    /// Put every parameter on `g`; the returned handles follow [`Model::params`].
    pub fn bind(&self, g: &mut Graph<f32>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|(_, t)| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect()
    }

    /// Record the forward pass of `input` (`[N, C, mel_bins, T]`).
    pub fn forward(
        &self,
        g: &mut Graph<f32>,
        bound: &[Var],
        input: &Tensor<f32>,
        mut mode: Mode<'_>,
    ) -> Result<(ForwardOutput, Vec<BatchStats>)> {
        let s = input.shape();
        if s.len() != 4 || s[1] != self.spec.channels[0] || s[2] != self.spec.mel_bins || s[3] < 4 {
            return Err(Error::dim(format!(
                "model expects input [N, {}, {}, T>=4], got {s:?}",
                self.spec.channels[0], self.spec.mel_bins
            )));
        }
        assert_eq!(bound.len(), self.params.len(), "bind() output must match params");
        let p = |name: &str| -> Var {
            let i = self.params.iter().position(|(n, _)| n == name).expect("parameter exists by construction");
            bound[i]
        };
        let pad = self.spec.kernel_k / 2;
        let drop_p = self.spec.dropout;
        let mut stats = Vec::new();
        let mut hidden = Vec::with_capacity(self.split.len());
        let mut conv_feats = Vec::with_capacity(self.split.len());
        let mut band_logits = Vec::with_capacity(self.split.len());

        for (b, &(start, end)) in self.split.bands.iter().enumerate() {
            let mut x = g.constant(input.narrow(2, start, end - start)?);
            for blk in 1..=2 {
                let pre = format!("band{b}.conv{blk}");
                x = if self.spec.factorized {
                    let v = g.conv2d(x, p(&format!("{pre}.v.weight")), None, (1, 1), (pad, 0))?;
                    g.conv2d(v, p(&format!("{pre}.h.weight")), Some(p(&format!("{pre}.h.bias"))), (1, 1), (0, pad))?
                } else {
                    g.conv2d(x, p(&format!("{pre}.weight")), Some(p(&format!("{pre}.bias"))), (1, 1), (pad, pad))?
                };
                let gamma = p(&format!("band{b}.bn{blk}.weight"));
                let beta = p(&format!("band{b}.bn{blk}.bias"));
                x = match mode {
                    Mode::Train { .. } => {
                        let (y, st) = g.batchnorm2d_train(x, gamma, beta)?;
                        stats.push(st);
                        y
                    }
                    Mode::Eval => {
                        let rm = self.buffer(&format!("band{b}.bn{blk}.running_mean"));
                        let rv = self.buffer(&format!("band{b}.bn{blk}.running_var"));
                        g.batchnorm2d_eval(x, gamma, beta, rm.data(), rv.data())?
                    }
                };
                x = g.relu(x);
                x = g.maxpool2d(x, (2, 2))?;
            }
            let pooled = g.mean_last_axis(x)?;
            let n = g.shape(pooled)[0];
            let flat = g.reshape(pooled, vec![n, self.spec.flat_dim()])?;
            conv_feats.push(flat);
            let d = dropout(g, flat, drop_p, &mut mode)?;
            let h = g.dense(d, p(&format!("band{b}.fc.weight")), Some(p(&format!("band{b}.fc.bias"))))?;
            let h = g.relu(h);
            hidden.push(h);
            let d = dropout(g, h, drop_p, &mut mode)?;
            band_logits.push(g.dense(
                d,
                p(&format!("band{b}.classifier.weight")),
                Some(p(&format!("band{b}.classifier.bias"))),
            )?);
        }

        let band_hidden = g.concat_cols(&hidden)?;
        let d = dropout(g, band_hidden, drop_p, &mut mode)?;
        let z = g.dense(d, p("head.fc1.weight"), Some(p("head.fc1.bias")))?;
        let z = g.relu(z);
        let d = dropout(g, z, drop_p, &mut mode)?;
        let logits = g.dense(d, p("head.fc2.weight"), Some(p("head.fc2.bias")))?;
        let embedding = match self.spec.embedding {
            EmbeddingSource::BandHidden => band_hidden,
            EmbeddingSource::FinalConv => g.concat_cols(&conv_feats)?,
        };
        Ok((ForwardOutput { logits, band_logits, embedding, band_hidden }, stats))
    }

    /// Fold one training batch's statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &[BatchStats]) {
        assert_eq!(stats.len(), self.buffers.len() / 2, "one BatchStats per batch-norm layer");
        for (st, pair) in stats.iter().zip(self.buffers.chunks_mut(2)) {
            let (mean_buf, var_buf) = pair.split_at_mut(1);
            for (r, &m) in mean_buf[0].1.data_mut().iter_mut().zip(&st.mean) {
                *r = ((1.0 - BN_MOMENTUM) * *r as f64 + BN_MOMENTUM * m) as f32;
            }
            for (r, &v) in var_buf[0].1.data_mut().iter_mut().zip(&st.var_unbiased) {
                *r = ((1.0 - BN_MOMENTUM) * *r as f64 + BN_MOMENTUM * v) as f32;
            }
        }
    }

    /// Eval-mode logits and embeddings for a batch. Pure: no state changes.
    pub fn infer(&self, input: &Tensor<f32>) -> Result<Inference> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let (out, _) = self.forward(&mut g, &bound, input, Mode::Eval)?;
        Ok(Inference { logits: g.take(out.logits), embedding: g.take(out.embedding) })
    }

    /// Predicted class per row of `input` (argmax of the logits, lowest index on ties).
    pub fn predict(&self, input: &Tensor<f32>) -> Result<Vec<usize>> {
        let inf = self.infer(input)?;
        Ok(predict_rows(&inf.logits))
    }

    /// Equivalent square-kernel model: each factorized pair is replaced by
    /// the composed `(k,k)` kernel; all other tensors are copied.
    pub fn to_full_kernel(&self) -> Result<Model> {
        if !self.spec.factorized {
            return Ok(self.clone());
        }
        let full_spec = self.spec.with_factorized(false);
        let mut tensors: BTreeMap<String, Tensor<f32>> =
            self.named_tensors().map(|(n, t)| (n.to_string(), t.clone())).collect();
        for b in 0..self.split.len() {
            for blk in 1..=2 {
                let pre = format!("band{b}.conv{blk}");
                let v = ConvKernel::new(tensors[&format!("{pre}.v.weight")].clone(), None)?;
                let h = ConvKernel::new(
                    tensors[&format!("{pre}.h.weight")].clone(),
                    Some(tensors[&format!("{pre}.h.bias")].clone()),
                )?;
                let full = crate::tensor::compose_factorized(&v, &h)?;
                tensors.insert(format!("{pre}.weight"), full.weight);
                tensors.insert(format!("{pre}.bias"), full.bias.expect("horizontal stage has a bias"));
            }
        }
        Model::from_tensors(&full_spec, &tensors)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    /// `[N, num_classes]`
    pub logits: Tensor<f32>,
    pub embedding: Tensor<f32>,
}

fn dropout(g: &mut Graph<f32>, x: Var, p: f64, mode: &mut Mode<'_>) -> Result<Var> {
    match mode {
        Mode::Train { dropout_rng } if p > 0.0 => {
            let keep: Vec<bool> = (0..g.value(x).numel()).map(|_| dropout_rng.random::<f64>() >= p).collect();
            g.dropout(x, &keep, p)
        }
        _ => Ok(x),
    }
}

fn sample_normal(rng: &mut ChaCha8Rng, std: f64, n: usize) -> Vec<f32> {
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| dist.sample(rng) as f32).collect()
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn predict_rows(logits: &Tensor<f32>) -> Vec<usize> {
    let c = logits.shape()[1];
    logits.data().chunks(c).map(argmax).collect()
}
