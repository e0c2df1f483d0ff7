//! In-memory labeled feature sets, per-mel-bin normalization and the TSV
//! manifest.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::audio::parse_dcase_filename;
use crate::error::{Error, Result};
use crate::losses::ClipMeta;
use crate::tensor::Tensor;

/// One clip's features (`[C, M, T]`) with dense scene and city ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub name: String,
    pub features: Tensor<f32>,
    pub scene: usize,
    pub city: usize,
}

/// Train and eval examples sharing one scene / city vocabulary.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub scenes: Vec<String>,
    pub cities: Vec<String>,
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
}

impl Dataset {
    /// Check that every example has the same `[C, M, T]` shape and valid ids;
    /// returns that shape.
    pub fn validate(&self) -> Result<[usize; 3]> {
        let first = self
            .train
            .first()
            .ok_or_else(|| Error::config("training split is empty"))?;
        let shape = first.features.shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::dim(format!("features of {} are not [C, M, T]: {shape:?}", first.name)));
        }
        for e in self.train.iter().chain(&self.eval) {
            if e.features.shape() != shape.as_slice() {
                return Err(Error::dim(format!(
                    "features of {} have shape {:?}, expected {shape:?}",
                    e.name,
                    e.features.shape()
                )));
            }
            if e.scene >= self.scenes.len() || e.city >= self.cities.len() {
                return Err(Error::config(format!("{}: scene/city id out of range", e.name)));
            }
        }
        Ok([shape[0], shape[1], shape[2]])
    }

    pub fn train_cities(&self) -> BTreeSet<usize> {
        self.train.iter().map(|e| e.city).collect()
    }

    pub fn train_meta(&self) -> Vec<ClipMeta> {
        self.train.iter().map(|e| ClipMeta { scene: e.scene, city: e.city }).collect()
    }

    /// Fit normalization on the train split and apply it to both splits.
    pub fn normalize(&mut self) -> Result<NormStats> {
        let stats = NormStats::fit(self.train.iter().map(|e| &e.features))?;
        for e in self.train.iter_mut().chain(self.eval.iter_mut()) {
            stats.apply(&mut e.features)?;
        }
        Ok(stats)
    }
}

/// Per-mel-bin mean and standard deviation, pooled over channels and frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl NormStats {
    const MIN_STD: f64 = 1e-6;

    pub fn fit<'a>(features: impl IntoIterator<Item = &'a Tensor<f32>>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for f in features {
            let &[c, m, t] = f.shape() else {
                return Err(Error::dim(format!("expected [C, M, T], got {:?}", f.shape())));
            };
            if sum.is_empty() {
                sum = vec![0.0; m];
                sq = vec![0.0; m];
            } else if sum.len() != m {
                return Err(Error::dim(format!("mel bins {m} differ from {}", sum.len())));
            }
            for ch in 0..c {
                for bin in 0..m {
                    for &v in &f.data()[(ch * m + bin) * t..][..t] {
                        sum[bin] += v as f64;
                        sq[bin] += (v as f64) * (v as f64);
                    }
                }
            }
            count += c * t;
        }
        if count == 0 {
            return Err(Error::config("cannot fit normalization on an empty set"));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, mu)| ((q / n - mu * mu).max(0.0).sqrt().max(Self::MIN_STD)) as f32)
            .collect();
        Ok(NormStats { mean: mean.into_iter().map(|v| v as f32).collect(), std })
    }

    pub fn apply(&self, f: &mut Tensor<f32>) -> Result<()> {
        let &[c, m, t] = f.shape() else {
            return Err(Error::dim(format!("expected [C, M, T], got {:?}", f.shape())));
        };
        if m != self.mean.len() {
            return Err(Error::dim(format!(
                "features have {m} mel bins, normalization statistics have {}",
                self.mean.len()
            )));
        }
        let data = f.data_mut();
        for ch in 0..c {
            for bin in 0..m {
                let (mu, sd) = (self.mean[bin], self.std[bin]);
                for v in &mut data[(ch * m + bin) * t..][..t] {
                    *v = (*v - mu) / sd;
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub path: String,
    pub scene: String,
    pub city: String,
    pub device: Option<String>,
    pub split: Split,
}

/// Tab-separated clip list with a header row. Required columns: `path`,
/// `scene_label`, `split`; optional: `city` (taken from the file name when
/// absent or empty), `device`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or(Error::Manifest { line: 1, message: "empty manifest".into() })?;
        let cols: Vec<&str> = header.split('\t').map(str::trim).collect();
        let col = |name: &str| cols.iter().position(|c| *c == name);
        let need = |name: &str| {
            col(name).ok_or_else(|| Error::Manifest { line: 1, message: format!("header lacks a `{name}` column") })
        };
        let (path_i, scene_i, split_i) = (need("path")?, need("scene_label")?, need("split")?);
        let (city_i, device_i) = (col("city"), col("device"));

        let mut rows = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in lines {
            let lineno = i + 1;
            let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
            if fields.len() != cols.len() {
                return Err(Error::Manifest {
                    line: lineno,
                    message: format!("expected {} tab-separated fields, found {}", cols.len(), fields.len()),
                });
            }
            let path = fields[path_i].to_string();
            if path.is_empty() || fields[scene_i].is_empty() {
                return Err(Error::Manifest { line: lineno, message: "path and scene_label must be non-empty".into() });
            }
            if !seen.insert(path.clone()) {
                return Err(Error::Manifest { line: lineno, message: format!("duplicate path {path}") });
            }
            let split = match fields[split_i] {
                "train" => Split::Train,
                "eval" | "test" | "evaluate" => Split::Eval,
                other => {
                    return Err(Error::Manifest {
                        line: lineno,
                        message: format!("split must be `train` or `eval`, got `{other}`"),
                    })
                }
            };
            let city = match city_i.map(|c| fields[c]).filter(|c| !c.is_empty()) {
                Some(c) => c.to_string(),
                None => parse_dcase_filename(&path).map(|n| n.city).unwrap_or_default(),
            };
            let device = device_i.map(|d| fields[d].to_string()).filter(|d| !d.is_empty());
            rows.push(ManifestRow { path, scene: fields[scene_i].to_string(), city, device, split });
        }
        let manifest = Manifest { rows };
        manifest.check_eval_scenes()?;
        Ok(manifest)
    }

    fn check_eval_scenes(&self) -> Result<()> {
        let train: BTreeSet<&str> =
            self.rows.iter().filter(|r| r.split == Split::Train).map(|r| r.scene.as_str()).collect();
        for (i, r) in self.rows.iter().enumerate() {
            if r.split == Split::Eval && !train.contains(r.scene.as_str()) {
                return Err(Error::Manifest {
                    line: i + 2,
                    message: format!("eval scene `{}` has no training clips; add training data or drop the row", r.scene),
                });
            }
        }
        Ok(())
    }

    /// Triplet training needs a city for every clip.
    pub fn require_cities(&self) -> Result<()> {
        match self.rows.iter().position(|r| r.city.is_empty()) {
            Some(i) => Err(Error::Manifest {
                line: i + 2,
                message: format!(
                    "no city for {} (add a `city` column or use scene-city-location-segment-device.wav names)",
                    self.rows[i].path
                ),
            }),
            None => Ok(()),
        }
    }

    /// Sorted scene names of the training split.
    pub fn scenes(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.rows.iter().map(|r| r.scene.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    pub fn cities(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.rows.iter().map(|r| r.city.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("path\tscene_label\tcity\tdevice\tsplit\n");
        for r in &self.rows {
            let split = match r.split {
                Split::Train => "train",
                Split::Eval => "eval",
            };
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{split}\n",
                r.path,
                r.scene,
                r.city,
                r.device.as_deref().unwrap_or("")
            ));
        }
        s
    }

    /// Assemble a [`Dataset`] given a loader from manifest path to features.
    /// `scenes` fixes the label order (e.g. from a checkpoint); `None` uses
    /// the manifest's sorted scene names.
    pub fn load_dataset(
        &self,
        scenes: Option<&[String]>,
        mut load: impl FnMut(&ManifestRow) -> Result<Tensor<f32>>,
    ) -> Result<Dataset> {
        let scenes: Vec<String> = scenes.map(<[String]>::to_vec).unwrap_or_else(|| self.scenes());
        let scene_ids: BTreeMap<&str, usize> = scenes.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let cities = self.cities();
        let city_ids: BTreeMap<&str, usize> = cities.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let mut ds = Dataset { scenes: scenes.clone(), cities: cities.clone(), ..Default::default() };
        for (i, r) in self.rows.iter().enumerate() {
            let scene = *scene_ids.get(r.scene.as_str()).ok_or_else(|| Error::Manifest {
                line: i + 2,
                message: format!("scene `{}` is not one of the model's classes {scenes:?}", r.scene),
            })?;
            let ex = Example { name: r.path.clone(), features: load(r)?, scene, city: city_ids[r.city.as_str()] };
            match r.split {
                Split::Train => ds.train.push(ex),
                Split::Eval => ds.eval.push(ex),
            }
        }
        Ok(ds)
    }
}
