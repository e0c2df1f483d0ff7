//! Accuracy reports: overall, per city, unseen cities, confusion matrix.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Example};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

/// Clips per inference batch.
const EVAL_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unseen_city_accuracy: Option<f64>,
}

/// Eval accuracy averaged over the final `k` epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LastK {
    pub k: usize,
    pub overall_accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unseen_city_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub clips: usize,
    pub overall_accuracy: f64,
    /// Accuracy over clips whose city is absent from training; `None` when
    /// every evaluated city was seen.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unseen_city_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_k: Option<LastK>,
    pub per_city: BTreeMap<String, f64>,
    pub per_city_clips: BTreeMap<String, usize>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub epoch_curve: Vec<EpochRecord>,
}

impl EvalReport {
    /// Score predictions against labels. `cities[i]` names clip `i`'s city.
    pub fn from_predictions(
        predictions: &[usize],
        labels: &[usize],
        cities: &[&str],
        num_classes: usize,
        train_cities: &BTreeSet<String>,
    ) -> Result<Self> {
        if predictions.is_empty() {
            return Err(Error::config("evaluation set is empty"));
        }
        if predictions.len() != labels.len() || labels.len() != cities.len() {
            return Err(Error::dim("predictions, labels and cities differ in length"));
        }
        let mut confusion = vec![vec![0usize; num_classes]; num_classes];
        let mut city_counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        let (mut correct, mut unseen_correct, mut unseen_total) = (0, 0, 0);
        for ((&p, &y), &city) in predictions.iter().zip(labels).zip(cities) {
            if p >= num_classes || y >= num_classes {
                return Err(Error::dim(format!("class index out of range for {num_classes} classes")));
            }
            confusion[y][p] += 1;
            let hit = (p == y) as usize;
            correct += hit;
            let e = city_counts.entry(city.to_string()).or_default();
            e.0 += hit;
            e.1 += 1;
            if !train_cities.contains(city) {
                unseen_correct += hit;
                unseen_total += 1;
            }
        }
        let n = predictions.len();
        Ok(EvalReport {
            clips: n,
            overall_accuracy: correct as f64 / n as f64,
            unseen_city_accuracy: (unseen_total > 0).then(|| unseen_correct as f64 / unseen_total as f64),
            last_k: None,
            per_city: city_counts.iter().map(|(c, &(k, t))| (c.clone(), k as f64 / t as f64)).collect(),
            per_city_clips: city_counts.into_iter().map(|(c, (_, t))| (c, t)).collect(),
            confusion,
            epoch_curve: Vec::new(),
        })
    }

    /// Structured key-value text (TOML).
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("report fields are TOML-representable")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("report: {e}")))
    }

    pub fn curve_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = String::from("epoch,train_loss,train_accuracy,eval_accuracy,unseen_city_accuracy\n");
        for r in &self.epoch_curve {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch,
                r.train_loss,
                opt(r.train_accuracy),
                opt(r.eval_accuracy),
                opt(r.unseen_city_accuracy)
            ));
        }
        s
    }
}

/// Eval-mode predictions for each example, in order.
pub fn predict_examples(model: &Model, examples: &[Example]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(EVAL_BATCH) {
        let parts: Vec<&Tensor<f32>> = chunk.iter().map(|e| &e.features).collect();
        out.extend(model.predict(&Tensor::stack(&parts)?)?);
    }
    Ok(out)
}

/// Score `model` on `examples`. Cities of `data` not in `train_cities` count as unseen.
pub fn evaluate(
    model: &Model,
    data: &Dataset,
    examples: &[Example],
    train_cities: &BTreeSet<String>,
) -> Result<EvalReport> {
    let preds = predict_examples(model, examples)?;
    let labels: Vec<usize> = examples.iter().map(|e| e.scene).collect();
    let cities: Vec<&str> = examples.iter().map(|e| data.cities[e.city].as_str()).collect();
    EvalReport::from_predictions(&preds, &labels, &cities, model.spec().num_classes, train_cities)
}

/// Fraction of `examples` classified correctly.
pub fn accuracy(model: &Model, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::config("evaluation set is empty"));
    }
    let preds = predict_examples(model, examples)?;
    let hits = preds.iter().zip(examples).filter(|(p, e)| **p == e.scene).count();
    Ok(hits as f64 / examples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seen(cities: &[&str]) -> BTreeSet<String> {
        cities.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn all_correct() {
        let r = EvalReport::from_predictions(&[0, 1, 2], &[0, 1, 2], &["a", "b", "c"], 3, &seen(&["a", "b"])).unwrap();
        assert_eq!(r.overall_accuracy, 1.0);
        assert_eq!(r.unseen_city_accuracy, Some(1.0));
        assert!(r.per_city.values().all(|&v| v == 1.0));
    }

    #[test]
    fn confusion_rows_count_examples() {
        let r = EvalReport::from_predictions(&[0, 0, 1, 1], &[0, 1, 1, 1], &["a"; 4], 2, &seen(&["a"])).unwrap();
        assert_eq!(r.confusion, vec![vec![1, 0], vec![1, 2]]);
        assert_eq!(r.unseen_city_accuracy, None);
        assert_eq!(r.overall_accuracy, 0.75);
    }

    #[test]
    fn text_round_trip() {
        let mut r = EvalReport::from_predictions(&[0, 1], &[0, 0], &["x", "y"], 2, &seen(&["x"])).unwrap();
        r.epoch_curve.push(EpochRecord {
            epoch: 1,
            train_loss: 0.1,
            train_accuracy: Some(0.5),
            eval_accuracy: None,
            unseen_city_accuracy: None,
        });
        assert_eq!(EvalReport::from_text(&r.to_text()).unwrap(), r);
        assert!(r.curve_csv().starts_with("epoch,"));
    }

    #[test]
    fn empty_is_error() {
        assert!(EvalReport::from_predictions(&[], &[], &[], 2, &seen(&[])).is_err());
    }
}
