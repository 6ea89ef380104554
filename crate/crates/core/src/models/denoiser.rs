use super::{checkpoint, config_hash, JointEmbedder, ModelError};
use crate::dataset::LabeledSet;
use crate::diffusion::NoiseSchedule;
use crate::nn::{timestep_features, Adam, Mlp, MlpTrace, Parameters};
use crate::seed;
use ndarray::{s, Array1, Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::Path;

const MAX_PERIOD: f64 = 1000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub hidden: Vec<usize>,
    pub time_dim: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Probability of replacing each condition with its learned null vector.
    pub cond_dropout: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128, 128],
            time_dim: 16,
            steps: 6000,
            batch_size: 128,
            lr: 2e-3,
            cond_dropout: 0.1,
        }
    }
}

/// Conditional noise predictor `ε_θ(z_t, t, c, y_text)`.
///
/// The network sees `[z_t | sinusoidal(t) | c | y_text]`. Learned null
/// vectors stand in for dropped conditions, which is what makes
/// classifier-free mixing possible at sampling time.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePredictor {
    net: Mlp,
    null_image: Array1<f64>,
    null_text: Array1<f64>,
    data_dim: usize,
    embed_dim: usize,
    time_dim: usize,
}

impl NoisePredictor {
    pub fn new(data_dim: usize, embed_dim: usize, cfg: &DenoiserConfig, seed: u64) -> Self {
        assert!(cfg.time_dim.is_multiple_of(2), "time_dim must be even");
        let mut rng = seed::child_rng(seed, "denoiser/init");
        let mut sizes = vec![data_dim + cfg.time_dim + 2 * embed_dim];
        sizes.extend(&cfg.hidden);
        sizes.push(data_dim);
        let net = Mlp::new(&sizes, &mut rng);
        let mut draw = || {
            Array1::from_shape_simple_fn(embed_dim, || 0.1 * rng.sample::<f64, _>(StandardNormal))
        };
        let null_image = draw();
        let null_text = draw();
        Self {
            net,
            null_image,
            null_text,
            data_dim,
            embed_dim,
            time_dim: cfg.time_dim,
        }
    }

    pub fn data_dim(&self) -> usize {
        self.data_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    /// Null image and text conditions broadcast to `batch` rows.
    pub fn null_conditions(&self, batch: usize) -> (Array2<f64>, Array2<f64>) {
        let img = self
            .null_image
            .broadcast((batch, self.embed_dim))
            .unwrap()
            .to_owned();
        let txt = self
            .null_text
            .broadcast((batch, self.embed_dim))
            .unwrap()
            .to_owned();
        (img, txt)
    }

    fn inputs(
        &self,
        z: ArrayView2<f64>,
        t: usize,
        image: ArrayView2<f64>,
        text: ArrayView2<f64>,
    ) -> Array2<f64> {
        let b = z.nrows();
        let (d, td, e) = (self.data_dim, self.time_dim, self.embed_dim);
        let temb = timestep_features(t, td, MAX_PERIOD);
        let mut input = Array2::zeros((b, d + td + 2 * e));
        input.slice_mut(s![.., ..d]).assign(&z);
        for mut row in input.slice_mut(s![.., d..d + td]).rows_mut() {
            row.iter_mut().zip(&temb).for_each(|(r, v)| *r = *v);
        }
        input.slice_mut(s![.., d + td..d + td + e]).assign(&image);
        input.slice_mut(s![.., d + td + e..]).assign(&text);
        input
    }

    /// Predicted noise, same shape as `z`.
    pub fn predict(
        &self,
        z: ArrayView2<f64>,
        t: usize,
        image: ArrayView2<f64>,
        text: ArrayView2<f64>,
    ) -> Array2<f64> {
        self.net.forward(self.inputs(z, t, image, text).view())
    }

    pub fn predict_traced(
        &self,
        z: ArrayView2<f64>,
        t: usize,
        image: ArrayView2<f64>,
        text: ArrayView2<f64>,
    ) -> (Array2<f64>, MlpTrace) {
        self.net.forward_traced(self.inputs(z, t, image, text).view())
    }

    /// Vector-Jacobian product w.r.t. `z` for a traced evaluation.
    pub fn vjp_z(&self, trace: &MlpTrace, grad_out: ArrayView2<f64>) -> Array2<f64> {
        let g = self.net.backward(trace, grad_out, None);
        g.slice(s![.., ..self.data_dim]).to_owned()
    }

    pub fn save(&self, dir: &Path, cfg: &DenoiserConfig, seed: u64) -> Result<(), ModelError> {
        checkpoint::save(
            dir,
            self,
            "denoiser/mlp",
            &config_hash(cfg),
            seed,
            serde_json::json!({
                "sizes": self.net.sizes(),
                "data_dim": self.data_dim,
                "embed_dim": self.embed_dim,
                "time_dim": self.time_dim,
            }),
        )
    }

    pub fn load(dir: &Path) -> Result<Self, ModelError> {
        let manifest = checkpoint::read_manifest(dir)?;
        if manifest.arch != "denoiser/mlp" {
            return Err(ModelError::Checkpoint(format!(
                "not a denoiser: {}",
                manifest.arch
            )));
        }
        let get = |k: &str| -> Result<usize, ModelError> {
            Ok(serde_json::from_value(manifest.extra[k].clone())?)
        };
        let sizes: Vec<usize> = serde_json::from_value(manifest.extra["sizes"].clone())?;
        let cfg = DenoiserConfig {
            hidden: sizes[1..sizes.len() - 1].to_vec(),
            time_dim: get("time_dim")?,
            ..Default::default()
        };
        let mut model = Self::new(get("data_dim")?, get("embed_dim")?, &cfg, 0);
        checkpoint::load_into(dir, &manifest, &mut model)?;
        Ok(model)
    }
}

impl Parameters for NoisePredictor {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.net.visit(&mut |n, s, d| f(&format!("net.{n}"), s, d));
        f(
            "null_image",
            self.null_image.shape(),
            self.null_image.as_slice().unwrap(),
        );
        f(
            "null_text",
            self.null_text.shape(),
            self.null_text.as_slice().unwrap(),
        );
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.net.visit_mut(&mut |n, d| f(&format!("net.{n}"), d));
        f("null_image", self.null_image.as_slice_mut().unwrap());
        f("null_text", self.null_text.as_slice_mut().unwrap());
    }
}

/// Image and text conditions for every row of `data`.
fn conditions(data: &LabeledSet, embedder: &JointEmbedder) -> (Array2<f64>, Array2<f64>) {
    let image = embedder.embed_image(data.x.view());
    let table = embedder.text_table();
    let text = table.select(ndarray::Axis(0), &data.y);
    (image, text)
}

/// Trains `ε_θ` on `E‖ε − ε_θ(√ᾱ_t z_0 + √(1−ᾱ_t) ε, t, c, y_text)‖²` with
/// `c = h(x)` and `y_text` the category embedding, each independently
/// dropped to its null vector with probability `cond_dropout`.
pub fn train_denoiser(
    data: &LabeledSet,
    embedder: &JointEmbedder,
    schedule: &NoiseSchedule,
    cfg: &DenoiserConfig,
    seed: u64,
) -> Result<NoisePredictor, ModelError> {
    if data.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let (d, e) = (data.dims(), embedder.embed_dim());
    let mut model = NoisePredictor::new(d, e, cfg, seed);
    let (all_image, all_text) = conditions(data, embedder);
    let mut opt = Adam::new(cfg.lr).with_clip(1.0);
    let mut rng = seed::child_rng(seed, "denoiser/train");
    let b = cfg.batch_size.max(1);
    let td = cfg.time_dim;
    for step in 0..cfg.steps {
        // cosine decay to 10% of the base rate
        let progress = step as f64 / cfg.steps.max(1) as f64;
        opt.lr = cfg.lr * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));

        let rows: Vec<usize> = (0..b).map(|_| rng.random_range(0..data.len())).collect();
        let t = rng.random_range(1..=schedule.steps());
        let ab = schedule.alpha_bar(t);
        let eps = Array2::from_shape_simple_fn((b, d), || rng.sample::<f64, _>(StandardNormal));
        let x0 = data.x.select(ndarray::Axis(0), &rows);
        let zt = &x0 * ab.sqrt() + &eps * (1.0 - ab).sqrt();
        let mut image = all_image.select(ndarray::Axis(0), &rows);
        let mut text = all_text.select(ndarray::Axis(0), &rows);
        let drop_image: Vec<bool> = (0..b).map(|_| rng.random::<f64>() < cfg.cond_dropout).collect();
        let drop_text: Vec<bool> = (0..b).map(|_| rng.random::<f64>() < cfg.cond_dropout).collect();
        for i in 0..b {
            if drop_image[i] {
                image.row_mut(i).assign(&model.null_image);
            }
            if drop_text[i] {
                text.row_mut(i).assign(&model.null_text);
            }
        }
        let (pred, trace) = model.predict_traced(zt.view(), t, image.view(), text.view());
        let diff = &pred - &eps;
        let loss = diff.mapv(|v| v * v).mean().unwrap();
        if !loss.is_finite() {
            return Err(ModelError::NonFiniteLoss {
                model: "denoiser",
                step,
            });
        }
        let grad_out = diff * (2.0 / (b * d) as f64);
        let mut grads = NoisePredictor {
            net: model.net.zeros_like(),
            null_image: Array1::zeros(e),
            null_text: Array1::zeros(e),
            ..model.clone()
        };
        let grad_in = model.net.backward(&trace, grad_out.view(), Some(&mut grads.net));
        for i in 0..b {
            if drop_image[i] {
                grads.null_image += &grad_in.slice(s![i, d + td..d + td + e]);
            }
            if drop_text[i] {
                grads.null_text += &grad_in.slice(s![i, d + td + e..]);
            }
        }
        opt.step(&mut model, &grads);
    }
    model.round_to_f32();
    Ok(model)
}

/// Mean per-coordinate denoising loss on `data` with fully conditional
/// inputs, `draws` noise draws per sample, all randomness from `seed`.
pub fn denoising_loss(
    model: &NoisePredictor,
    data: &LabeledSet,
    embedder: &JointEmbedder,
    schedule: &NoiseSchedule,
    draws: usize,
    seed: u64,
) -> f64 {
    let (image, text) = conditions(data, embedder);
    let mut rng = seed::child_rng(seed, "denoiser/eval");
    let d = data.dims();
    let mut total = 0.0;
    let mut count = 0usize;
    for _ in 0..draws {
        for t in 1..=schedule.steps() {
            let ab = schedule.alpha_bar(t);
            let eps =
                Array2::from_shape_simple_fn((data.len(), d), || rng.sample::<f64, _>(StandardNormal));
            let zt = &data.x * ab.sqrt() + &eps * (1.0 - ab).sqrt();
            let pred = model.predict(zt.view(), t, image.view(), text.view());
            total += (&pred - &eps).mapv(|v| v * v).sum();
            count += data.len() * d;
        }
    }
    total / count as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{build_schedule, BetaSchedule};
    use crate::models::EmbedderConfig;
    use ndarray::array;

    fn tiny() -> (NoisePredictor, JointEmbedder) {
        let cfg = DenoiserConfig {
            hidden: vec![12, 12],
            time_dim: 4,
            ..Default::default()
        };
        let ecfg = EmbedderConfig {
            embed_dim: 3,
            hidden: vec![6],
            ..Default::default()
        };
        (
            NoisePredictor::new(2, 3, &cfg, 1),
            JointEmbedder::new(2, 2, &ecfg, 1),
        )
    }

    #[test]
    fn output_shape_and_determinism() {
        let (m, _) = tiny();
        let z = array![[0.1, 0.2], [0.3, -1.0], [2.0, 0.0]];
        let (img, txt) = m.null_conditions(3);
        let a = m.predict(z.view(), 4, img.view(), txt.view());
        assert_eq!(a.dim(), z.dim());
        assert_eq!(a, m.predict(z.view(), 4, img.view(), txt.view()));
    }

    #[test]
    fn vjp_z_matches_finite_differences() {
        let (m, _) = tiny();
        let z = array![[0.4, -0.7], [1.1, 0.2]];
        let img = array![[0.1, 0.5, -0.2], [0.3, 0.3, 0.3]];
        let txt = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let w = array![[0.3, -1.2], [0.8, 0.5]];
        let (_, trace) = m.predict_traced(z.view(), 3, img.view(), txt.view());
        let g = m.vjp_z(&trace, w.view());
        let h = 1e-6;
        for idx in ndarray::indices(z.raw_dim()) {
            let mut zp = z.clone();
            zp[idx] += h;
            let mut zm = z.clone();
            zm[idx] -= h;
            let fp = (&m.predict(zp.view(), 3, img.view(), txt.view()) * &w).sum();
            let fm = (&m.predict(zm.view(), 3, img.view(), txt.view()) * &w).sum();
            let num = (fp - fm) / (2.0 * h);
            assert!((num - g[idx]).abs() < 1e-6, "{num} vs {}", g[idx]);
        }
    }

    #[test]
    fn empty_dataset_rejected() {
        let (_, emb) = tiny();
        let schedule = build_schedule(&BetaSchedule::default(), 5).unwrap();
        let empty = LabeledSet::new(Array2::zeros((0, 2)), vec![]);
        assert!(matches!(
            train_denoiser(&empty, &emb, &schedule, &DenoiserConfig::default(), 0),
            Err(ModelError::EmptyDataset)
        ));
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let (mut m, _) = tiny();
        m.round_to_f32();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path(), &DenoiserConfig::default(), 1).unwrap();
        let back = NoisePredictor::load(dir.path()).unwrap();
        assert_eq!(back, m);
    }
}
