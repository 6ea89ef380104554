use super::{checkpoint, config_hash, ModelError};
use crate::nn::{sigmoid, Adam, Mlp, Parameters};
use crate::seed;
use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ErrorPredictorConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub threshold: f64,
    /// Reweight the loss so both outcomes carry equal total weight.
    pub balance_classes: bool,
}

impl Default for ErrorPredictorConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32],
            epochs: 400,
            lr: 5e-3,
            threshold: 0.5,
            balance_classes: true,
        }
    }
}

/// MLP `g(c) ∈ [0, 1]` predicting whether the target model errs on a sample
/// whose image embedding is `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorPredictor {
    net: Mlp,
    pub threshold: f64,
    /// Set when training labels were all equal; `prob_error` is then this
    /// constant.
    pub constant: Option<f64>,
}

impl ErrorPredictor {
    pub fn constant(embed_dim: usize, value: f64, threshold: f64) -> Self {
        let mut net = Mlp::new(&[embed_dim, 1], &mut seed::rng(0));
        net.fill(0.0);
        Self {
            net,
            threshold,
            constant: Some(value.clamp(0.0, 1.0)),
        }
    }

    pub fn is_degenerate(&self) -> bool {
        self.constant.is_some()
    }

    pub fn prob_error_batch(&self, c: ArrayView2<f64>) -> Vec<f64> {
        if let Some(v) = self.constant {
            return vec![v; c.nrows()];
        }
        self.net.forward(c).column(0).iter().map(|&l| sigmoid(l)).collect()
    }

    pub fn prob_error(&self, c: ArrayView1<f64>) -> f64 {
        self.prob_error_batch(c.insert_axis(ndarray::Axis(0)))[0]
    }

    pub fn predicts_error(&self, c: ArrayView1<f64>) -> bool {
        self.prob_error(c) >= self.threshold
    }

    pub fn save(&self, dir: &Path, cfg: &ErrorPredictorConfig, seed: u64) -> Result<(), ModelError> {
        checkpoint::save(
            dir,
            self,
            "error_predictor/mlp",
            &config_hash(cfg),
            seed,
            serde_json::json!({
                "sizes": self.net.sizes(),
                "threshold": self.threshold,
                "constant": self.constant,
            }),
        )
    }

    pub fn load(dir: &Path) -> Result<Self, ModelError> {
        let manifest = checkpoint::read_manifest(dir)?;
        if manifest.arch != "error_predictor/mlp" {
            return Err(ModelError::Checkpoint(format!(
                "not an error predictor: {}",
                manifest.arch
            )));
        }
        let sizes: Vec<usize> = serde_json::from_value(manifest.extra["sizes"].clone())?;
        let mut model = Self {
            net: Mlp::new(&sizes, &mut seed::rng(0)),
            threshold: serde_json::from_value(manifest.extra["threshold"].clone())?,
            constant: serde_json::from_value(manifest.extra["constant"].clone())?,
        };
        checkpoint::load_into(dir, &manifest, &mut model)?;
        Ok(model)
    }
}

impl Parameters for ErrorPredictor {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.net.visit(&mut |n, s, d| f(&format!("net.{n}"), s, d));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.net.visit_mut(&mut |n, d| f(&format!("net.{n}"), d));
    }
}

/// Fits the error predictor on `(c_i, e_i)` pairs with full-batch binary
/// cross-entropy. All-equal labels give a constant predictor.
pub fn fit_error_predictor(
    embeddings: &Array2<f64>,
    errors: &[bool],
    cfg: &ErrorPredictorConfig,
    seed: u64,
) -> Result<ErrorPredictor, ModelError> {
    if embeddings.nrows() != errors.len() {
        return Err(ModelError::LengthMismatch {
            left: embeddings.nrows(),
            right: errors.len(),
        });
    }
    if errors.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let n = errors.len();
    let positives = errors.iter().filter(|&&e| e).count();
    if positives == 0 || positives == n {
        let value = if positives == 0 { 0.0 } else { 1.0 };
        return Ok(ErrorPredictor::constant(
            embeddings.ncols(),
            value,
            cfg.threshold,
        ));
    }
    let (w_pos, w_neg) = if cfg.balance_classes {
        (0.5 / positives as f64, 0.5 / (n - positives) as f64)
    } else {
        (1.0 / n as f64, 1.0 / n as f64)
    };
    let mut sizes = vec![embeddings.ncols()];
    sizes.extend(&cfg.hidden);
    sizes.push(1);
    let mut model = ErrorPredictor {
        net: Mlp::new(&sizes, &mut seed::child_rng(seed, "error_predictor/init")),
        threshold: cfg.threshold,
        constant: None,
    };
    let mut opt = Adam::new(cfg.lr);
    for step in 0..cfg.epochs {
        let (logits, trace) = model.net.forward_traced(embeddings.view());
        let mut grad = Array2::zeros((n, 1));
        let mut loss = 0.0;
        for i in 0..n {
            let l = logits[[i, 0]];
            let p = sigmoid(l);
            let (target, w) = if errors[i] { (1.0, w_pos) } else { (0.0, w_neg) };
            // log(1 + e^{-|l|}) form of the BCE
            loss += w * (l.max(0.0) - l * target + (-l.abs()).exp().ln_1p());
            grad[[i, 0]] = w * (p - target);
        }
        if !loss.is_finite() {
            return Err(ModelError::NonFiniteLoss {
                model: "error_predictor",
                step,
            });
        }
        let mut grads = model.net.zeros_like();
        model.net.backward(&trace, grad.view(), Some(&mut grads));
        opt.step(&mut model.net, &grads);
    }
    model.round_to_f32();
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn all_zero_errors_give_low_constant() {
        let c = Array2::from_shape_fn((5, 3), |(i, j)| (i * 3 + j) as f64);
        let p = fit_error_predictor(&c, &[false; 5], &Default::default(), 0).unwrap();
        assert!(p.is_degenerate());
        assert!(c.rows().into_iter().all(|r| p.prob_error(r) < 0.5));
        let p = fit_error_predictor(&c, &[true; 5], &Default::default(), 0).unwrap();
        assert!(c.rows().into_iter().all(|r| p.predicts_error(r)));
    }

    #[test]
    fn separable_clusters() {
        let mut rng = seed::rng(8);
        let n = 200;
        let mut c = Array2::zeros((n, 4));
        let mut e = Vec::new();
        for i in 0..n {
            let pos = i % 4 == 0; // imbalanced on purpose
            for j in 0..4 {
                let centre = if pos { 1.0 } else { -1.0 };
                c[[i, j]] = centre + 0.3 * rng.sample::<f64, _>(StandardNormal);
            }
            e.push(pos);
        }
        let p = fit_error_predictor(&c, &e, &Default::default(), 3).unwrap();
        let correct = c
            .rows()
            .into_iter()
            .zip(&e)
            .filter(|(r, &t)| p.predicts_error(*r) == t)
            .count();
        assert!(correct as f64 / n as f64 >= 0.95);
        assert!(c.rows().into_iter().all(|r| (0.0..=1.0).contains(&p.prob_error(r))));
    }

    #[test]
    fn length_mismatch_and_empty() {
        let c = Array2::zeros((3, 2));
        assert!(matches!(
            fit_error_predictor(&c, &[true, false], &Default::default(), 0),
            Err(ModelError::LengthMismatch { left: 3, right: 2 })
        ));
        assert!(matches!(
            fit_error_predictor(&Array2::zeros((0, 2)), &[], &Default::default(), 0),
            Err(ModelError::EmptyDataset)
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let c = Array2::from_shape_fn((6, 2), |(i, j)| (i as f64 - 2.5) * (j as f64 + 1.0));
        let e = [true, true, false, false, false, true];
        let cfg = ErrorPredictorConfig {
            epochs: 20,
            ..Default::default()
        };
        let p = fit_error_predictor(&c, &e, &cfg, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        p.save(dir.path(), &cfg, 1).unwrap();
        assert_eq!(ErrorPredictor::load(dir.path()).unwrap(), p);
    }
}
