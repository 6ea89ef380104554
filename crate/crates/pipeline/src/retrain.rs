//! Augment-and-retrain: does adding generated samples to the training set
//! change held-out ID and OOD accuracy?

use riskydiff_core::dataset::LabeledSet;
use riskydiff_core::models::{accuracy, train_classifier, ClassifierArch, ClassifierConfig, ModelError};
use riskydiff_core::riskygen::GeneratedSample;
use riskydiff_core::seed;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub sd: f64,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, sd }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accuracies {
    /// Per seed, in seed order.
    pub id: Vec<f64>,
    pub ood: Vec<f64>,
    pub id_summary: MeanSd,
    pub ood_summary: MeanSd,
}

impl Accuracies {
    fn new(id: Vec<f64>, ood: Vec<f64>) -> Self {
        Self {
            id_summary: MeanSd::of(&id),
            ood_summary: MeanSd::of(&ood),
            id,
            ood,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub name: String,
    /// Samples added to the base training set.
    pub added: usize,
    /// Nothing was added; the arm is the baseline by construction.
    pub empty: bool,
    pub accuracy: Accuracies,
    /// Paired (same seed) differences to the baseline.
    pub id_delta: MeanSd,
    pub ood_delta: MeanSd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainTable {
    pub arch: ClassifierArch,
    pub seeds: Vec<u64>,
    pub baseline: Accuracies,
    pub arms: Vec<ArmResult>,
}

impl RetrainTable {
    pub fn arm(&self, name: &str) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.name == name)
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "arm", "added", "id_mean", "id_sd", "ood_mean", "ood_sd", "id_delta", "id_delta_sd",
            "ood_delta", "ood_delta_sd",
        ])?;
        let base = &self.baseline;
        let mut row = |name: &str, added: usize, acc: &Accuracies, d_id: MeanSd, d_ood: MeanSd| {
            w.write_record([
                name.to_string(),
                added.to_string(),
                acc.id_summary.mean.to_string(),
                acc.id_summary.sd.to_string(),
                acc.ood_summary.mean.to_string(),
                acc.ood_summary.sd.to_string(),
                d_id.mean.to_string(),
                d_id.sd.to_string(),
                d_ood.mean.to_string(),
                d_ood.sd.to_string(),
            ])
        };
        let zero = MeanSd { mean: 0.0, sd: 0.0 };
        row("baseline", 0, base, zero, zero)?;
        for a in &self.arms {
            row(&a.name, a.added, &a.accuracy, a.id_delta, a.ood_delta)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Generated samples as training data labelled with their intended category.
pub fn samples_as_set(samples: &[GeneratedSample], dims: usize) -> LabeledSet {
    let x = Array2::from_shape_fn((samples.len(), dims), |(i, j)| samples[i].x[j]);
    LabeledSet::new(x, samples.iter().map(|s| s.intended_category).collect())
}

/// Relabels every sample through a fixed-point-free class permutation
/// `y ↦ (y + r) mod K`, with `r ∈ [1, K)` drawn from `seed`.
pub fn mislabel(set: &LabeledSet, num_classes: usize, seed: u64) -> LabeledSet {
    let r = 1 + (seed::derive(seed, "mislabel") % (num_classes as u64 - 1)) as usize;
    LabeledSet::new(set.x.clone(), set.y.iter().map(|&y| (y + r) % num_classes).collect())
}

fn classifier_seed(s: u64) -> u64 {
    seed::derive(s, "retrain")
}

/// Trains the baseline on `base_train` and every arm on `base_train ∪ extra`
/// from scratch, once per seed, and reports accuracy on the two test sets.
pub fn retrain_arms(
    base_train: &LabeledSet,
    arms: &[(&str, LabeledSet)],
    test_id: &LabeledSet,
    test_ood: &LabeledSet,
    arch: ClassifierArch,
    cfg: &ClassifierConfig,
    seeds: &[u64],
) -> Result<RetrainTable, ModelError> {
    if seeds.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let eval = |set: &LabeledSet| -> Result<(Vec<f64>, Vec<f64>), ModelError> {
        let mut id = Vec::new();
        let mut ood = Vec::new();
        for &s in seeds {
            let m = train_classifier(set, arch, cfg, classifier_seed(s))?;
            id.push(accuracy(&m, test_id));
            ood.push(accuracy(&m, test_ood));
        }
        Ok((id, ood))
    };
    let (b_id, b_ood) = eval(base_train)?;
    let mut results = Vec::new();
    for (name, extra) in arms {
        let (id, ood) = if extra.is_empty() {
            (b_id.clone(), b_ood.clone())
        } else {
            eval(&base_train.concat(extra))?
        };
        let diff = |a: &[f64], b: &[f64]| MeanSd::of(&a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>());
        results.push(ArmResult {
            name: name.to_string(),
            added: extra.len(),
            empty: extra.is_empty(),
            id_delta: diff(&id, &b_id),
            ood_delta: diff(&ood, &b_ood),
            accuracy: Accuracies::new(id, ood),
        });
    }
    Ok(RetrainTable {
        arch,
        seeds: seeds.to_vec(),
        baseline: Accuracies::new(b_id, b_ood),
        arms: results,
    })
}

/// Single-arm retraining with the generated samples.
pub fn augment_and_retrain(
    generated: &[GeneratedSample],
    base_train: &LabeledSet,
    test_id: &LabeledSet,
    test_ood: &LabeledSet,
    arch: ClassifierArch,
    cfg: &ClassifierConfig,
    seeds: &[u64],
) -> Result<RetrainTable, ModelError> {
    let extra = samples_as_set(generated, base_train.dims());
    retrain_arms(base_train, &[("riskydiff", extra)], test_id, test_ood, arch, cfg, seeds)
}
