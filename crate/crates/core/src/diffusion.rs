//! Diffusion mathematics: noise schedules, closed-form forward noising,
//! the rough clean-point estimate and the deterministic DDIM reverse step.
//!
//! Everything here is a pure function of its inputs. Cumulative products are
//! kept in `f64` regardless of what precision the models run in.

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DiffusionError {
    #[error("schedule needs at least one step")]
    EmptySchedule,
    #[error("beta[{index}] = {value} is outside [0, 1)")]
    BetaOutOfRange { index: usize, value: f64 },
    #[error("expected {expected} betas, got {got}")]
    BetaCount { expected: usize, got: usize },
    #[error("step {step} outside [1, {max}]")]
    StepOutOfRange { step: usize, max: usize },
    #[error("batch at step {found}, expected step {expected}")]
    WrongStep { expected: usize, found: usize },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: (usize, usize), right: (usize, usize) },
    #[error("non-finite value in {what}")]
    NonFinite { what: &'static str },
}

/// Beta-schedule family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum BetaSchedule {
    /// `beta_t` linearly spaced over `[beta_min, beta_max]`.
    Linear { beta_min: f64, beta_max: f64 },
    /// Explicit per-step betas, one per step.
    Custom { betas: Vec<f64> },
}

impl Default for BetaSchedule {
    fn default() -> Self {
        BetaSchedule::Linear {
            beta_min: 1e-4,
            beta_max: 0.1,
        }
    }
}

/// Diffusion coefficients for `steps` steps.
///
/// `alphas[t - 1]` holds `α_t` for `t ∈ [1, T]`; `alpha_bars[t]` holds `ᾱ_t`
/// for `t ∈ [0, T]` with `ᾱ_0 = 1`, so the last reverse step lands exactly on
/// the clean-point estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.alphas.len()
    }

    /// `α_t` for `t ∈ [1, T]`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `ᾱ_t` for `t ∈ [0, T]`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_step(&self, t: usize) -> Result<(), DiffusionError> {
        if t == 0 || t > self.steps() {
            return Err(DiffusionError::StepOutOfRange {
                step: t,
                max: self.steps(),
            });
        }
        Ok(())
    }
}

/// Builds a schedule of `steps` steps from a beta family.
pub fn build_schedule(kind: &BetaSchedule, steps: usize) -> Result<NoiseSchedule, DiffusionError> {
    if steps == 0 {
        return Err(DiffusionError::EmptySchedule);
    }
    let betas: Vec<f64> = match kind {
        BetaSchedule::Linear { beta_min, beta_max } => {
            if steps == 1 {
                vec![*beta_min]
            } else {
                let span = beta_max - beta_min;
                (0..steps)
                    .map(|i| beta_min + span * i as f64 / (steps - 1) as f64)
                    .collect()
            }
        }
        BetaSchedule::Custom { betas } => {
            if betas.len() != steps {
                return Err(DiffusionError::BetaCount {
                    expected: steps,
                    got: betas.len(),
                });
            }
            betas.clone()
        }
    };
    // beta = 0 is admitted: the zero-noise schedule is a useful degenerate case.
    for (index, &value) in betas.iter().enumerate() {
        if !(0.0..1.0).contains(&value) || !value.is_finite() {
            return Err(DiffusionError::BetaOutOfRange { index, value });
        }
    }
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(steps + 1);
    alpha_bars.push(1.0);
    let mut acc = 1.0f64;
    for a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }
    Ok(NoiseSchedule { alphas, alpha_bars })
}

/// A batch of diffusion states (one row per sample) sitting at `step`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBatch {
    pub data: Array2<f64>,
    pub step: usize,
}

impl LatentBatch {
    pub fn new(data: Array2<f64>, step: usize) -> Self {
        Self { data, step }
    }

    /// A clean batch (step 0).
    pub fn clean(data: Array2<f64>) -> Self {
        Self { data, step: 0 }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn check_shapes(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<(), DiffusionError> {
    if a.dim() != b.dim() {
        return Err(DiffusionError::ShapeMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    Ok(())
}

/// `z_t = √ᾱ_t z_0 + √(1−ᾱ_t) ε`.
pub fn forward_diffuse(
    z0: &LatentBatch,
    t: usize,
    eps: ArrayView2<f64>,
    schedule: &NoiseSchedule,
) -> Result<LatentBatch, DiffusionError> {
    if z0.step != 0 {
        return Err(DiffusionError::WrongStep {
            expected: 0,
            found: z0.step,
        });
    }
    schedule.check_step(t)?;
    check_shapes(&z0.data.view(), &eps)?;
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = Zip::from(&z0.data)
        .and(&eps)
        .map_collect(|&x, &e| a * x + b * e);
    Ok(LatentBatch::new(data, t))
}

/// `ẑ_0 = (z_t − √(1−ᾱ_t) ε̂) / √ᾱ_t`.
pub fn predict_z0(
    zt: &LatentBatch,
    eps_hat: ArrayView2<f64>,
    schedule: &NoiseSchedule,
) -> Result<LatentBatch, DiffusionError> {
    let t = zt.step;
    schedule.check_step(t)?;
    check_shapes(&zt.data.view(), &eps_hat)?;
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = Zip::from(&zt.data)
        .and(&eps_hat)
        .map_collect(|&z, &e| (z - b * e) / a);
    Ok(LatentBatch::clean(data))
}

/// Deterministic (η = 0) DDIM step from `t` to `t − 1`:
/// `z_{t−1} = √ᾱ_{t−1} ẑ_0 + √(1−ᾱ_{t−1}) ε̂`.
pub fn ddim_step(
    zt: &LatentBatch,
    eps_hat: ArrayView2<f64>,
    schedule: &NoiseSchedule,
) -> Result<LatentBatch, DiffusionError> {
    if !zt.is_finite() {
        return Err(DiffusionError::NonFinite { what: "z_t" });
    }
    if !eps_hat.iter().all(|v| v.is_finite()) {
        return Err(DiffusionError::NonFinite {
            what: "noise prediction",
        });
    }
    let z0 = predict_z0(zt, eps_hat, schedule)?;
    let prev = zt.step - 1;
    let ab = schedule.alpha_bar(prev);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = Zip::from(&z0.data)
        .and(&eps_hat)
        .map_collect(|&x, &e| a * x + b * e);
    Ok(LatentBatch::new(data, prev))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    macro_rules! assert_close {
        ($a:expr, $b:expr, $tol:expr) => {{
            let (a, b): (f64, f64) = ($a, $b);
            assert!((a - b).abs() <= $tol, "{a} vs {b} (tol {})", $tol);
        }};
    }

    fn custom(betas: &[f64]) -> NoiseSchedule {
        build_schedule(
            &BetaSchedule::Custom {
                betas: betas.to_vec(),
            },
            betas.len(),
        )
        .unwrap()
    }

    /// Schedule whose ᾱ_1 and ᾱ_2 are the given values.
    fn two_step(ab1: f64, ab2: f64) -> NoiseSchedule {
        custom(&[1.0 - ab1, 1.0 - ab2 / ab1])
    }

    #[test]
    fn zero_noise_schedule() {
        let s = build_schedule(
            &BetaSchedule::Linear {
                beta_min: 0.0,
                beta_max: 0.0,
            },
            3,
        )
        .unwrap();
        assert_eq!(s.alphas(), &[1.0, 1.0, 1.0]);
        assert_eq!(s.alpha_bars(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn linear_two_steps_by_hand() {
        let s = build_schedule(
            &BetaSchedule::Linear {
                beta_min: 0.1,
                beta_max: 0.2,
            },
            2,
        )
        .unwrap();
        assert_close!(s.alpha(1), 0.9, 1e-15);
        assert_close!(s.alpha(2), 0.8, 1e-15);
        assert_eq!(s.alpha_bar(0), 1.0);
        assert_close!(s.alpha_bar(1), 0.9, 1e-15);
        assert_close!(s.alpha_bar(2), 0.72, 1e-15);
    }

    #[test]
    fn rejects_bad_schedules() {
        assert_eq!(
            build_schedule(&BetaSchedule::default(), 0),
            Err(DiffusionError::EmptySchedule)
        );
        assert!(matches!(
            build_schedule(&BetaSchedule::Custom { betas: vec![0.1, 1.0] }, 2),
            Err(DiffusionError::BetaOutOfRange { index: 1, .. })
        ));
        assert!(matches!(
            build_schedule(&BetaSchedule::Custom { betas: vec![-0.1] }, 1),
            Err(DiffusionError::BetaOutOfRange { index: 0, .. })
        ));
        assert!(matches!(
            build_schedule(&BetaSchedule::Custom { betas: vec![0.1] }, 2),
            Err(DiffusionError::BetaCount { .. })
        ));
    }

    #[test]
    fn default_schedule_invariants() {
        let s = build_schedule(&BetaSchedule::default(), 50).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        for t in 1..=50 {
            assert!((s.alpha_bar(t) - s.alpha_bar(t - 1) * s.alpha(t)).abs() < 1e-12);
            assert!(s.alpha_bar(t) > 0.0 && s.alpha_bar(t) <= s.alpha_bar(t - 1));
        }
    }

    #[test]
    fn forward_scalar() {
        let s = two_step(0.25, 0.1);
        let z0 = LatentBatch::clean(array![[2.0]]);
        let zt = forward_diffuse(&z0, 1, array![[1.0]].view(), &s).unwrap();
        assert_close!(zt.data[[0, 0]], 1.8660254037844386, 1e-12);
        assert_eq!(zt.step, 1);
    }

    #[test]
    fn forward_identity_and_zero_signal() {
        let s = custom(&[0.0, 0.0]);
        let z0 = LatentBatch::clean(array![[1.5, -2.0]]);
        let eps = array![[0.3, 0.7]];
        assert_eq!(forward_diffuse(&z0, 2, eps.view(), &s).unwrap().data, z0.data);

        let s = two_step(0.25, 0.1);
        let zeros = LatentBatch::clean(Array2::zeros((1, 2)));
        let zt = forward_diffuse(&zeros, 2, eps.view(), &s).unwrap();
        let scale = (1.0f64 - 0.1).sqrt();
        assert_close!(zt.data[[0, 0]], scale * 0.3, 1e-15);
        assert_close!(zt.data[[0, 1]], scale * 0.7, 1e-15);
    }

    #[test]
    fn forward_errors() {
        let s = two_step(0.25, 0.1);
        let z0 = LatentBatch::clean(array![[1.0, 2.0]]);
        assert!(matches!(
            forward_diffuse(&z0, 1, array![[1.0]].view(), &s),
            Err(DiffusionError::ShapeMismatch { .. })
        ));
        assert!(matches!(
            forward_diffuse(&z0, 3, array![[1.0, 1.0]].view(), &s),
            Err(DiffusionError::StepOutOfRange { step: 3, max: 2 })
        ));
        assert!(matches!(
            forward_diffuse(&z0, 0, array![[1.0, 1.0]].view(), &s),
            Err(DiffusionError::StepOutOfRange { .. })
        ));
    }

    #[test]
    fn predict_z0_scalar_cases() {
        let s = two_step(0.25, 0.1);
        let zt = LatentBatch::new(array![[1.0]], 1);
        let z0 = predict_z0(&zt, array![[0.5]].view(), &s).unwrap();
        assert_close!(z0.data[[0, 0]], 1.1339745962155614, 1e-12);
        let z0 = predict_z0(&zt, array![[0.0]].view(), &s).unwrap();
        assert_eq!(z0.data[[0, 0]], 2.0);
        let bad = LatentBatch::new(array![[1.0]], 0);
        assert!(predict_z0(&bad, array![[0.0]].view(), &s).is_err());
    }

    #[test]
    fn ddim_scalar_step() {
        // ᾱ_2 = 0.25, ᾱ_1 = 0.64
        let s = custom(&[0.36, 1.0 - 0.25 / 0.64]);
        let zt = LatentBatch::new(array![[1.0]], 2);
        let prev = ddim_step(&zt, array![[0.5]].view(), &s).unwrap();
        assert_eq!(prev.step, 1);
        assert_close!(prev.data[[0, 0]], 1.2071796769724492, 1e-12);
    }

    #[test]
    fn ddim_last_step_is_the_estimate() {
        let s = two_step(0.25, 0.1);
        let zt = LatentBatch::new(array![[1.0, -0.3]], 1);
        let eps = array![[0.5, 0.2]];
        let prev = ddim_step(&zt, eps.view(), &s).unwrap();
        let z0 = predict_z0(&zt, eps.view(), &s).unwrap();
        assert_eq!(prev.step, 0);
        assert_eq!(prev.data, z0.data);
    }

    #[test]
    fn ddim_rejects_non_finite() {
        let s = two_step(0.25, 0.1);
        let zt = LatentBatch::new(array![[f64::NAN]], 1);
        assert!(matches!(
            ddim_step(&zt, array![[0.0]].view(), &s),
            Err(DiffusionError::NonFinite { .. })
        ));
        let zt = LatentBatch::new(array![[0.0]], 1);
        assert!(matches!(
            ddim_step(&zt, array![[f64::INFINITY]].view(), &s),
            Err(DiffusionError::NonFinite { .. })
        ));
    }
}
