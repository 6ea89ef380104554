use super::guidance::mixed_prediction;
use super::{
    draw_condition, guided_noise, screen_embedding, CategoryStats, Conditions, GenerateError,
    GuidanceConfig, NoiseModel, RiskScore,
};
use crate::diffusion::{ddim_step, LatentBatch, NoiseSchedule};
use crate::models::{Decoder, ErrorPredictor, JointEmbedder, TargetClassifier};
use crate::seed;
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Everything the sampler reads. All models are used read-only.
pub struct GenerationModels<'a, N, D> {
    pub denoiser: &'a N,
    pub decoder: &'a D,
    pub classifier: &'a TargetClassifier,
    pub embedder: &'a JointEmbedder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub t: usize,
    /// `Ŝ` at the rough clean estimate; absent when nothing evaluated it.
    pub score: Option<f64>,
    pub grad_norm: f64,
    pub fired: bool,
    /// The state after this step, `z_{t−1}`.
    pub state: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedSample {
    pub x: Vec<f64>,
    pub intended_category: usize,
    pub prediction: usize,
    pub is_risky: bool,
    /// The image-embedding condition, at f32 precision.
    pub embedding_condition: Vec<f64>,
    pub screen_attempts: usize,
    /// False when screening hit its attempt budget and fell back to the
    /// best candidate. Always true with screening disabled.
    pub screen_accepted: bool,
    pub trace: Option<Vec<StepTrace>>,
}

/// Seed of the `i`-th sample of category `y`. Conditions and initial noise
/// come from separate child streams so that toggling screening never
/// changes `z_T`.
fn sample_seed(seed: u64, y: usize, i: usize) -> u64 {
    seed::derive(seed, &format!("sample/{y}/{i}"))
}

fn initial_noise(seeds: &[u64], dim: usize) -> Array2<f64> {
    let mut z = Array2::zeros((seeds.len(), dim));
    for (mut row, &s) in z.rows_mut().into_iter().zip(seeds) {
        let mut rng = seed::child_rng(s, "noise");
        row.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
    }
    z
}

fn text_rows(embedder: &JointEmbedder, y: usize, count: usize) -> Array2<f64> {
    let text = embedder.embed_text(y);
    text.broadcast((count, text.len())).unwrap().to_owned()
}

/// Values are stored as f32 on disk; rounding here keeps in-memory and
/// reloaded samples identical.
fn round_f32(x: Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v as f32 as f64)
}

/// Generates `count` samples of category `y`: screen a condition, start from
/// Gaussian noise and run guided DDIM down to `z_0`.
#[allow(clippy::too_many_arguments)]
pub fn generate<N: NoiseModel, D: Decoder>(
    y: usize,
    count: usize,
    models: &GenerationModels<'_, N, D>,
    stats: &CategoryStats,
    error_predictor: &ErrorPredictor,
    schedule: &NoiseSchedule,
    cfg: &GuidanceConfig,
    seed: u64,
) -> Result<Vec<GeneratedSample>, GenerateError> {
    cfg.validate()?;
    if count == 0 {
        return Ok(Vec::new());
    }
    let seeds: Vec<u64> = (0..count).map(|i| sample_seed(seed, y, i)).collect();
    let e = stats.dim();
    let mut image = Array2::zeros((count, e));
    let mut attempts = vec![1; count];
    let mut accepted = vec![true; count];
    for (i, &s) in seeds.iter().enumerate() {
        let mut rng = seed::child_rng(s, "condition");
        let c = if cfg.screening {
            let out = screen_embedding(stats, error_predictor, cfg, &mut rng);
            attempts[i] = out.attempts;
            accepted[i] = out.accepted;
            out.c
        } else {
            draw_condition(stats, &mut rng)
        };
        image.row_mut(i).assign(&c);
    }
    let cond = Conditions {
        image,
        text: text_rows(models.embedder, y, count),
    };
    let score = RiskScore::new(models.classifier, models.embedder, y, cfg.lambda);

    let mut z = LatentBatch::new(
        initial_noise(&seeds, models.denoiser.data_dim()),
        schedule.steps(),
    );
    let mut traces: Vec<Vec<StepTrace>> = vec![Vec::new(); if cfg.record_trace { count } else { 0 }];
    for t in (1..=schedule.steps()).rev() {
        let g = guided_noise(&z, &cond, models.denoiser, models.decoder, &score, cfg, schedule)?;
        z = ddim_step(&z, g.eps_hat.view(), schedule)
            .map_err(|source| GenerateError::NonFiniteState { step: t, source })?;
        if cfg.record_trace {
            for (i, tr) in traces.iter_mut().enumerate() {
                tr.push(StepTrace {
                    t,
                    score: g.score.as_ref().map(|s| s[i]),
                    grad_norm: g.grad_norms[i],
                    fired: g.fired[i],
                    state: z.data.row(i).to_vec(),
                });
            }
        }
    }
    if !z.is_finite() {
        return Err(GenerateError::NonFiniteState {
            step: 0,
            source: crate::diffusion::DiffusionError::NonFinite { what: "z_0" },
        });
    }
    let x = round_f32(models.decoder.decode(z.data.view()));
    let predictions = models.classifier.predict(x.view());
    let mut traces = traces.into_iter();
    Ok((0..count)
        .map(|i| GeneratedSample {
            x: x.row(i).to_vec(),
            intended_category: y,
            prediction: predictions[i],
            is_risky: predictions[i] != y,
            embedding_condition: cond.image.row(i).iter().map(|&v| v as f32 as f64).collect(),
            screen_attempts: attempts[i],
            screen_accepted: accepted[i],
            trace: traces.next(),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalSamples {
    /// Decoded samples, rounded to f32 precision.
    pub x: Array2<f64>,
    pub conditions: Array2<f64>,
    /// States `z_{T−1}, …, z_0`.
    pub trajectory: Vec<Array2<f64>>,
}

/// Plain conditional DDIM sampling with the same seed layout as
/// [`generate`]: no screening and no gradient guidance.
#[allow(clippy::too_many_arguments)]
pub fn sample_conditional<N: NoiseModel, D: Decoder>(
    y: usize,
    count: usize,
    denoiser: &N,
    decoder: &D,
    embedder: &JointEmbedder,
    stats: &CategoryStats,
    schedule: &NoiseSchedule,
    cfg_weight: f64,
    seed: u64,
) -> Result<ConditionalSamples, GenerateError> {
    let seeds: Vec<u64> = (0..count).map(|i| sample_seed(seed, y, i)).collect();
    let mut conditions = Array2::zeros((count, stats.dim()));
    for (mut row, &s) in conditions.rows_mut().into_iter().zip(&seeds) {
        let c: Array1<f64> = draw_condition(stats, &mut seed::child_rng(s, "condition"));
        row.assign(&c);
    }
    let cond = Conditions {
        image: conditions,
        text: text_rows(embedder, y, count),
    };
    let mut z = LatentBatch::new(initial_noise(&seeds, denoiser.data_dim()), schedule.steps());
    let mut trajectory = Vec::with_capacity(schedule.steps());
    for t in (1..=schedule.steps()).rev() {
        let eps = mixed_prediction(denoiser, z.data.view(), t, &cond, cfg_weight);
        z = ddim_step(&z, eps.view(), schedule)
            .map_err(|source| GenerateError::NonFiniteState { step: t, source })?;
        trajectory.push(z.data.clone());
    }
    Ok(ConditionalSamples {
        x: round_f32(decoder.decode(z.data.view())),
        conditions: cond.image,
        trajectory,
    })
}
