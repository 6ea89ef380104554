use super::{checkpoint, config_hash, minibatches, ModelError};
use crate::dataset::LabeledSet;
use crate::nn::{argmax, logsumexp_rows, softmax_rows, Adam, Mlp, Parameters};
use crate::seed;
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Architecture variants used to populate the transfer experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierArch {
    /// Softmax regression.
    Linear,
    Small,
    Wide,
    Deep,
}

impl ClassifierArch {
    pub const ALL: [ClassifierArch; 4] = [
        ClassifierArch::Linear,
        ClassifierArch::Small,
        ClassifierArch::Wide,
        ClassifierArch::Deep,
    ];

    pub fn hidden(self) -> Vec<usize> {
        match self {
            ClassifierArch::Linear => vec![],
            ClassifierArch::Small => vec![32],
            ClassifierArch::Wide => vec![128],
            ClassifierArch::Deep => vec![64, 64, 64],
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            ClassifierArch::Linear => "linear",
            ClassifierArch::Small => "small",
            ClassifierArch::Wide => "wide",
            ClassifierArch::Deep => "deep",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.tag() == tag)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// L2 penalty on weight matrices (not biases).
    pub weight_decay: f64,
    /// Anneal the learning rate to zero along a half cosine.
    pub cosine_decay: bool,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            lr: 3e-3,
            weight_decay: 0.0,
            cosine_decay: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetClassifier {
    pub arch: ClassifierArch,
    pub num_classes: usize,
    net: Mlp,
}

impl TargetClassifier {
    pub fn new(arch: ClassifierArch, dims: usize, num_classes: usize, seed: u64) -> Self {
        let mut sizes = vec![dims];
        sizes.extend(arch.hidden());
        sizes.push(num_classes);
        let net = Mlp::new(&sizes, &mut seed::child_rng(seed, "classifier/init"));
        Self {
            arch,
            num_classes,
            net,
        }
    }

    pub fn logits(&self, x: ArrayView2<f64>) -> Array2<f64> {
        self.net.forward(x)
    }

    /// Predicted labels, smallest index on ties.
    pub fn predict(&self, x: ArrayView2<f64>) -> Vec<usize> {
        self.logits(x).rows().into_iter().map(argmax).collect()
    }

    /// Per-sample cross-entropy at `labels` and its gradient w.r.t. `x`.
    pub fn loss_and_input_grad(
        &self,
        x: ArrayView2<f64>,
        labels: &[usize],
    ) -> (Vec<f64>, Array2<f64>) {
        let (logits, trace) = self.net.forward_traced(x);
        let (losses, grad_logits) = cross_entropy(logits.view(), labels);
        let grad = self.net.backward(&trace, grad_logits.view(), None);
        (losses, grad)
    }

    pub fn save(&self, dir: &Path, cfg: &ClassifierConfig, seed: u64) -> Result<(), ModelError> {
        checkpoint::save(
            dir,
            self,
            &format!("classifier/{}", self.arch.tag()),
            &config_hash(cfg),
            seed,
            serde_json::json!({ "sizes": self.net.sizes() }),
        )
    }

    pub fn load(dir: &Path) -> Result<Self, ModelError> {
        let manifest = checkpoint::read_manifest(dir)?;
        let tag = manifest
            .arch
            .strip_prefix("classifier/")
            .ok_or_else(|| ModelError::Checkpoint(format!("not a classifier: {}", manifest.arch)))?;
        let arch = ClassifierArch::from_tag(tag)
            .ok_or_else(|| ModelError::Checkpoint(format!("unknown arch {tag}")))?;
        let sizes: Vec<usize> = serde_json::from_value(manifest.extra["sizes"].clone())?;
        let (dims, k) = (sizes[0], *sizes.last().unwrap());
        let mut model = Self::new(arch, dims, k, 0);
        if model.net.sizes() != sizes {
            return Err(ModelError::Checkpoint("sizes do not match arch".into()));
        }
        checkpoint::load_into(dir, &manifest, &mut model)?;
        Ok(model)
    }
}

impl Parameters for TargetClassifier {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.net.visit(&mut |n, s, d| f(&format!("net.{n}"), s, d));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.net.visit_mut(&mut |n, d| f(&format!("net.{n}"), d));
    }
}

/// Per-row cross-entropy and its gradient w.r.t. the logits (not averaged).
///
/// The label component of the gradient is computed as `-Σ_{j≠y} p_j`, which
/// stays accurate when `p_y` rounds to 1.
pub fn cross_entropy(logits: ArrayView2<f64>, labels: &[usize]) -> (Vec<f64>, Array2<f64>) {
    let lse = logsumexp_rows(logits);
    let mut grad = softmax_rows(logits);
    let mut losses = Vec::with_capacity(labels.len());
    for (i, &y) in labels.iter().enumerate() {
        losses.push(lse[i] - logits[[i, y]]);
        let others: f64 = grad
            .row(i)
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != y)
            .map(|(_, p)| p)
            .sum();
        grad[[i, y]] = -others;
    }
    (losses, grad)
}

fn add_weight_decay(params: &Mlp, grads: &mut Mlp, decay: f64) {
    let mut weights = Vec::new();
    params.visit(&mut |name, _, data| {
        if name.ends_with("weight") {
            weights.push(data.to_vec());
        }
    });
    let mut next = weights.into_iter();
    grads.visit_mut(&mut |name, g| {
        if name.ends_with("weight") {
            let w = next.next().expect("same layout");
            g.iter_mut().zip(w).for_each(|(g, w)| *g += decay * w);
        }
    });
}

pub fn train_classifier(
    data: &LabeledSet,
    arch: ClassifierArch,
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<TargetClassifier, ModelError> {
    if data.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let mut distinct = data.y.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(ModelError::SingleCategory(distinct.len()));
    }
    let mut model = TargetClassifier::new(arch, data.dims(), data.num_classes(), seed);
    let mut opt = Adam::new(cfg.lr);
    let mut rng = seed::child_rng(seed, "classifier/batches");
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        if cfg.cosine_decay {
            let progress = epoch as f64 / cfg.epochs as f64;
            opt.lr = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        }
        for batch in minibatches(data.len(), cfg.batch_size, &mut rng) {
            let sub = data.select(&batch);
            let (logits, trace) = model.net.forward_traced(sub.x.view());
            let (losses, mut grad) = cross_entropy(logits.view(), &sub.y);
            let mean_loss = losses.iter().sum::<f64>() / losses.len() as f64;
            if !mean_loss.is_finite() {
                return Err(ModelError::NonFiniteLoss {
                    model: "classifier",
                    step,
                });
            }
            grad /= batch.len() as f64;
            let mut grads = model.net.zeros_like();
            model.net.backward(&trace, grad.view(), Some(&mut grads));
            if cfg.weight_decay > 0.0 {
                add_weight_decay(&model.net, &mut grads, cfg.weight_decay);
            }
            opt.step(&mut model.net, &grads);
            step += 1;
        }
    }
    model.round_to_f32();
    Ok(model)
}

pub fn accuracy(classifier: &TargetClassifier, data: &LabeledSet) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let pred = classifier.predict(data.x.view());
    pred.iter().zip(&data.y).filter(|(p, y)| p == y).count() as f64 / data.len() as f64
}

/// `e_i = 1(f(x_i) ≠ y_i)`.
pub fn compute_model_errors(classifier: &TargetClassifier, data: &LabeledSet) -> Vec<bool> {
    classifier
        .predict(data.x.view())
        .into_iter()
        .zip(&data.y)
        .map(|(p, &y)| p != y)
        .collect()
}
