use super::{GenerateError, GuidanceConfig, GuidanceScore};
use crate::diffusion::{predict_z0, DiffusionError, LatentBatch, NoiseSchedule};
use crate::models::{Decoder, NoisePredictor};
use crate::nn::MlpTrace;
use ndarray::{Array2, ArrayView2, Zip};

/// A conditional noise predictor the sampler can differentiate through.
pub trait NoiseModel {
    type Trace;

    fn data_dim(&self) -> usize;

    fn predict(
        &self,
        z: ArrayView2<f64>,
        t: usize,
        image: ArrayView2<f64>,
        text: ArrayView2<f64>,
    ) -> Array2<f64>;

    fn predict_traced(
        &self,
        z: ArrayView2<f64>,
        t: usize,
        image: ArrayView2<f64>,
        text: ArrayView2<f64>,
    ) -> (Array2<f64>, Self::Trace);

    /// `J_zᵀ v` for the evaluation recorded in `trace`.
    fn vjp_z(&self, trace: &Self::Trace, v: ArrayView2<f64>) -> Array2<f64>;

    /// Conditions used for the unconditional branch of classifier-free guidance.
    fn null_conditions(&self, batch: usize) -> (Array2<f64>, Array2<f64>);
}

impl NoiseModel for NoisePredictor {
    type Trace = MlpTrace;

    fn data_dim(&self) -> usize {
        NoisePredictor::data_dim(self)
    }

    fn predict(
        &self,
        z: ArrayView2<f64>,
        t: usize,
        image: ArrayView2<f64>,
        text: ArrayView2<f64>,
    ) -> Array2<f64> {
        NoisePredictor::predict(self, z, t, image, text)
    }

    fn predict_traced(
        &self,
        z: ArrayView2<f64>,
        t: usize,
        image: ArrayView2<f64>,
        text: ArrayView2<f64>,
    ) -> (Array2<f64>, MlpTrace) {
        NoisePredictor::predict_traced(self, z, t, image, text)
    }

    fn vjp_z(&self, trace: &MlpTrace, v: ArrayView2<f64>) -> Array2<f64> {
        NoisePredictor::vjp_z(self, trace, v)
    }

    fn null_conditions(&self, batch: usize) -> (Array2<f64>, Array2<f64>) {
        NoisePredictor::null_conditions(self, batch)
    }
}

/// Per-row image and text conditions for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditions {
    pub image: Array2<f64>,
    pub text: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidedNoise {
    /// The guided prediction `ε̂`.
    pub eps_hat: Array2<f64>,
    /// The unguided prediction `ε_θ` (after CFG mixing).
    pub eps: Array2<f64>,
    /// `Ŝ` at the rough clean estimate, when it was evaluated.
    pub score: Option<Vec<f64>>,
    /// `∇_{z_t} Ŝ` before normalization, when guidance was active.
    pub grad: Option<Array2<f64>>,
    pub grad_norms: Vec<f64>,
    /// Whether guidance moved each row (its gradient norm cleared the floor).
    pub fired: Vec<bool>,
}

fn mix(cond: Array2<f64>, uncond: &Array2<f64>, w: f64) -> Array2<f64> {
    Zip::from(&cond)
        .and(uncond)
        .map_collect(|&c, &u| u + w * (c - u))
}

/// Noise prediction with optional classifier-free guidance, no tracing.
pub(crate) fn mixed_prediction<N: NoiseModel>(
    model: &N,
    z: ArrayView2<f64>,
    t: usize,
    cond: &Conditions,
    cfg_weight: f64,
) -> Array2<f64> {
    let eps_c = model.predict(z, t, cond.image.view(), cond.text.view());
    if cfg_weight == 1.0 {
        return eps_c;
    }
    let (ni, nt) = model.null_conditions(z.nrows());
    let eps_u = model.predict(z, t, ni.view(), nt.view());
    mix(eps_c, &eps_u, cfg_weight)
}

/// `ε̂ = ε_θ − s·√(1−ᾱ_t)·∇Ŝ/‖∇Ŝ‖`, with `Ŝ` evaluated at the decoded
/// clean estimate and differentiated w.r.t. `z_t` through the decoder and
/// (unless stopped) the noise predictor.
pub fn guided_noise<N: NoiseModel, D: Decoder, S: GuidanceScore>(
    zt: &LatentBatch,
    cond: &Conditions,
    model: &N,
    decoder: &D,
    score: &S,
    cfg: &GuidanceConfig,
    schedule: &NoiseSchedule,
) -> Result<GuidedNoise, GenerateError> {
    let t = zt.step;
    if t == 0 || t > schedule.steps() {
        return Err(DiffusionError::StepOutOfRange {
            step: t,
            max: schedule.steps(),
        }
        .into());
    }
    let b = zt.data.nrows();
    if cfg.s == 0.0 {
        let eps = mixed_prediction(model, zt.data.view(), t, cond, cfg.cfg_weight);
        let score = if cfg.record_trace {
            let z0 = predict_z0(zt, eps.view(), schedule)?;
            let x = decoder.decode(z0.data.view());
            Some(score.evaluate(x.view(), false)?.values)
        } else {
            None
        };
        return Ok(GuidedNoise {
            eps_hat: eps.clone(),
            eps,
            score,
            grad: None,
            grad_norms: vec![0.0; b],
            fired: vec![false; b],
        });
    }

    let (eps_c, trace_c) =
        model.predict_traced(zt.data.view(), t, cond.image.view(), cond.text.view());
    let (eps, trace_u) = if cfg.cfg_weight == 1.0 {
        (eps_c, None)
    } else {
        let (ni, nt) = model.null_conditions(b);
        let (eps_u, tr) = model.predict_traced(zt.data.view(), t, ni.view(), nt.view());
        (mix(eps_c, &eps_u, cfg.cfg_weight), Some(tr))
    };
    let z0 = predict_z0(zt, eps.view(), schedule)?;
    let x = decoder.decode(z0.data.view());
    let out = score.evaluate(x.view(), true)?;
    let grad_x = out.grad.expect("gradient requested");
    let grad_z0 = decoder.vjp(z0.data.view(), grad_x.view());

    let ab = schedule.alpha_bar(t);
    let (a, sd) = (ab.sqrt(), (1.0 - ab).sqrt());
    // ẑ_0 = (z_t − sd·ε(z_t)) / a
    let mut grad = grad_z0.mapv(|g| g / a);
    if !cfg.stop_grad_through_denoiser && sd != 0.0 {
        let jt = match &trace_u {
            None => model.vjp_z(&trace_c, grad_z0.view()),
            Some(tu) => {
                let w = cfg.cfg_weight;
                let mut j = model.vjp_z(&trace_c, grad_z0.view());
                j *= w;
                j.scaled_add(1.0 - w, &model.vjp_z(tu, grad_z0.view()));
                j
            }
        };
        grad.scaled_add(-sd / a, &jt);
    }

    let mut eps_hat = eps.clone();
    let mut grad_norms = Vec::with_capacity(b);
    let mut fired = Vec::with_capacity(b);
    for (i, (g, mut e)) in grad.rows().into_iter().zip(eps_hat.rows_mut()).enumerate() {
        let norm = g.dot(&g).sqrt();
        if !norm.is_finite() {
            return Err(GenerateError::NonFiniteGradient { step: t, sample: i });
        }
        grad_norms.push(norm);
        let fire = norm >= cfg.grad_norm_floor;
        fired.push(fire);
        if fire {
            e.scaled_add(-cfg.s * sd / norm, &g);
        }
    }
    Ok(GuidedNoise {
        eps_hat,
        eps,
        score: Some(out.values),
        grad: Some(grad),
        grad_norms,
        fired,
    })
}
