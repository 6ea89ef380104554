use super::{checkpoint, config_hash, minibatches, ModelError};
use crate::dataset::LabeledSet;
use crate::nn::{Adam, Mlp, Parameters};
use crate::seed;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderConfig {
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    pub temperature: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 8,
            hidden: vec![64, 64],
            temperature: 0.07,
            epochs: 30,
            batch_size: 128,
            lr: 2e-3,
        }
    }
}

/// Two-tower embedder: an MLP image tower and a per-category text table,
/// both L2-normalized into a shared space.
#[derive(Debug, Clone, PartialEq)]
pub struct JointEmbedder {
    image: Mlp,
    /// Unnormalized category vectors, one row per category.
    text: Array2<f64>,
}

/// Row-wise `u / ‖u‖`; an all-zero row maps to the first basis vector.
fn normalize_rows(u: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let norms: Array1<f64> = u.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let mut h = u.clone();
    for (mut row, &n) in h.rows_mut().into_iter().zip(&norms) {
        if n > 0.0 {
            row /= n;
        } else {
            row.fill(0.0);
            row[0] = 1.0;
        }
    }
    (h, norms.mapv(|n| n.max(f64::MIN_POSITIVE)))
}

/// Gradient through `h = u / ‖u‖` row-wise.
fn normalize_backward(h: &Array2<f64>, norms: &Array1<f64>, grad_h: &Array2<f64>) -> Array2<f64> {
    let mut out = grad_h.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let hi = h.row(i);
        let proj = row.dot(&hi);
        row.zip_mut_with(&hi, |g, &hv| *g = (*g - proj * hv) / norms[i]);
    }
    out
}

impl JointEmbedder {
    pub fn new(dims: usize, num_classes: usize, cfg: &EmbedderConfig, seed: u64) -> Self {
        let mut rng = seed::child_rng(seed, "embedder/init");
        let mut sizes = vec![dims];
        sizes.extend(&cfg.hidden);
        sizes.push(cfg.embed_dim);
        let image = Mlp::new(&sizes, &mut rng);
        let text = Array2::from_shape_simple_fn((num_classes, cfg.embed_dim), || {
            rng.sample::<f64, _>(StandardNormal)
        });
        Self { image, text }
    }

    pub fn embed_dim(&self) -> usize {
        self.text.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.text.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.image.input_dim()
    }

    /// Unit-norm image embeddings, one row per input row.
    pub fn embed_image(&self, x: ArrayView2<f64>) -> Array2<f64> {
        normalize_rows(&self.image.forward(x)).0
    }

    /// Unit-norm category embedding.
    pub fn embed_text(&self, category: usize) -> Array1<f64> {
        normalize_rows(&self.text.row(category).insert_axis(Axis(0)).to_owned())
            .0
            .row(0)
            .to_owned()
    }

    /// All category embeddings, `K × d_e`.
    pub fn text_table(&self) -> Array2<f64> {
        normalize_rows(&self.text).0
    }

    /// `h(x_i) · y_text` per row and its gradient w.r.t. `x`.
    pub fn inner_product_and_grad(
        &self,
        x: ArrayView2<f64>,
        y_text: ArrayView1<f64>,
    ) -> (Vec<f64>, Array2<f64>) {
        let (u, trace) = self.image.forward_traced(x);
        let (h, norms) = normalize_rows(&u);
        let values = h.dot(&y_text).to_vec();
        let grad_h = Array2::from_shape_fn(h.raw_dim(), |(_, j)| y_text[j]);
        let grad_u = normalize_backward(&h, &norms, &grad_h);
        (values, self.image.backward(&trace, grad_u.view(), None))
    }

    pub fn save(&self, dir: &Path, cfg: &EmbedderConfig, seed: u64) -> Result<(), ModelError> {
        checkpoint::save(
            dir,
            self,
            "embedder/two_tower",
            &config_hash(cfg),
            seed,
            serde_json::json!({
                "image_sizes": self.image.sizes(),
                "num_classes": self.num_classes(),
            }),
        )
    }

    pub fn load(dir: &Path) -> Result<Self, ModelError> {
        let manifest = checkpoint::read_manifest(dir)?;
        if manifest.arch != "embedder/two_tower" {
            return Err(ModelError::Checkpoint(format!(
                "not an embedder: {}",
                manifest.arch
            )));
        }
        let sizes: Vec<usize> = serde_json::from_value(manifest.extra["image_sizes"].clone())?;
        let k: usize = serde_json::from_value(manifest.extra["num_classes"].clone())?;
        let cfg = EmbedderConfig {
            embed_dim: *sizes.last().unwrap(),
            hidden: sizes[1..sizes.len() - 1].to_vec(),
            ..Default::default()
        };
        let mut model = Self::new(sizes[0], k, &cfg, 0);
        checkpoint::load_into(dir, &manifest, &mut model)?;
        Ok(model)
    }

    /// Symmetric contrastive loss on a batch and its parameter gradients.
    fn contrastive_step(&self, x: ArrayView2<f64>, y: &[usize], temperature: f64) -> (f64, Self) {
        let b = y.len();
        let k = self.num_classes();
        let (u, trace) = self.image.forward_traced(x);
        let (h, norms) = normalize_rows(&u);
        let (t, tnorms) = normalize_rows(&self.text);
        let sims = h.dot(&t.t()) / temperature; // b × k

        // image -> category: softmax over the K categories.
        let mut grad = Array2::<f64>::zeros((b, k));
        let mut loss_i2t = 0.0;
        for i in 0..b {
            let row = sims.row(i);
            let max = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            loss_i2t += max + z.ln() - row[y[i]];
            for j in 0..k {
                let p = (row[j] - max).exp() / z;
                grad[[i, j]] += 0.5 * (p - if j == y[i] { 1.0 } else { 0.0 }) / b as f64;
            }
        }
        loss_i2t /= b as f64;

        // category -> image: softmax over the batch, every same-label image positive.
        let present: Vec<usize> = (0..k).filter(|c| y.contains(c)).collect();
        let mut loss_t2i = 0.0;
        for &c in &present {
            let col = sims.column(c);
            let max = col.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            let z: f64 = col.iter().map(|v| (v - max).exp()).sum();
            let pos: Vec<usize> = (0..b).filter(|&i| y[i] == c).collect();
            let np = pos.len() as f64;
            for &i in &pos {
                loss_t2i -= (col[i] - max - z.ln()) / np;
            }
            for i in 0..b {
                let q = (col[i] - max).exp() / z;
                let target = if y[i] == c { 1.0 / np } else { 0.0 };
                grad[[i, c]] += 0.5 * (q - target) / present.len() as f64;
            }
        }
        loss_t2i /= present.len() as f64;

        grad /= temperature;
        let grad_h = grad.dot(&t);
        let grad_t = grad.t().dot(&h);
        let grad_u = normalize_backward(&h, &norms, &grad_h);
        let grad_text = normalize_backward(&t, &tnorms, &grad_t);

        let mut grads = Self {
            image: self.image.zeros_like(),
            text: grad_text,
        };
        self.image.backward(&trace, grad_u.view(), Some(&mut grads.image));
        (0.5 * (loss_i2t + loss_t2i), grads)
    }
}

impl Parameters for JointEmbedder {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.image.visit(&mut |n, s, d| f(&format!("image.{n}"), s, d));
        f(
            "text",
            self.text.shape(),
            self.text.as_slice().expect("standard layout"),
        );
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.image.visit_mut(&mut |n, d| f(&format!("image.{n}"), d));
        f("text", self.text.as_slice_mut().expect("standard layout"));
    }
}

/// Trains both towers with a temperature-scaled symmetric contrastive loss
/// over (sample, category) pairs.
pub fn train_embedder(
    data: &LabeledSet,
    num_classes: usize,
    cfg: &EmbedderConfig,
    seed: u64,
) -> Result<JointEmbedder, ModelError> {
    if data.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let mut model = JointEmbedder::new(data.dims(), num_classes, cfg, seed);
    let mut opt = Adam::new(cfg.lr);
    let mut rng = seed::child_rng(seed, "embedder/batches");
    let mut step = 0;
    for _ in 0..cfg.epochs {
        for batch in minibatches(data.len(), cfg.batch_size, &mut rng) {
            let sub = data.select(&batch);
            let (loss, grads) = model.contrastive_step(sub.x.view(), &sub.y, cfg.temperature);
            if !loss.is_finite() {
                return Err(ModelError::NonFiniteLoss {
                    model: "embedder",
                    step,
                });
            }
            opt.step(&mut model, &grads);
            step += 1;
        }
    }
    model.round_to_f32();
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn embeddings_are_unit_norm_and_text_is_stable() {
        let cfg = EmbedderConfig::default();
        let m = JointEmbedder::new(3, 4, &cfg, 2);
        let x = array![[0.1, 2.0, -3.0], [0.0, 0.0, 0.0], [10.0, -10.0, 4.0]];
        for row in m.embed_image(x.view()).rows() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-6);
        }
        assert_eq!(m.embed_text(2), m.embed_text(2));
        assert!((m.embed_text(1).dot(&m.embed_text(1)) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn contrastive_gradient_matches_finite_differences() {
        let cfg = EmbedderConfig {
            embed_dim: 3,
            hidden: vec![5],
            ..Default::default()
        };
        let m = JointEmbedder::new(2, 3, &cfg, 7);
        let x = array![[0.5, -1.0], [1.5, 0.3], [-0.2, 0.8], [0.9, 0.9]];
        let y = [0, 1, 1, 2];
        let (_, grads) = m.contrastive_step(x.view(), &y, 0.5);
        let h = 1e-6;
        let check = |get: &dyn Fn(&mut JointEmbedder) -> &mut f64, analytic: f64| {
            let mut p = m.clone();
            *get(&mut p) += h;
            let mut q = m.clone();
            *get(&mut q) -= h;
            let num = (p.contrastive_step(x.view(), &y, 0.5).0
                - q.contrastive_step(x.view(), &y, 0.5).0)
                / (2.0 * h);
            assert!((num - analytic).abs() < 1e-6, "{num} vs {analytic}");
        };
        check(&|e| &mut e.text[[1, 2]], grads.text[[1, 2]]);
        check(
            &|e| &mut e.image.layers[0].weight[[1, 3]],
            grads.image.layers[0].weight[[1, 3]],
        );
        check(&|e| &mut e.image.layers[1].bias[0], grads.image.layers[1].bias[0]);
    }

    #[test]
    fn empty_dataset_rejected() {
        let empty = LabeledSet::new(Array2::zeros((0, 2)), vec![]);
        assert!(matches!(
            train_embedder(&empty, 2, &EmbedderConfig::default(), 0),
            Err(ModelError::EmptyDataset)
        ));
    }
}
