use super::{CategoryStats, GuidanceConfig};
use crate::models::ErrorPredictor;
use ndarray::Array1;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreenOutcome {
    pub c: Array1<f64>,
    pub accepted: bool,
    pub attempts: usize,
    pub prob_error: f64,
}

/// One draw of `c ~ N(μ̂, diag σ̂²)`.
pub fn draw_condition<R: Rng + ?Sized>(stats: &CategoryStats, rng: &mut R) -> Array1<f64> {
    Array1::from_shape_fn(stats.dim(), |j| {
        let z: f64 = rng.sample(StandardNormal);
        stats.mu[j] + stats.sigma2[j].sqrt() * z
    })
}

/// Draws conditions until the error predictor fires or the attempt budget
/// runs out. On exhaustion the candidate with the highest predicted error
/// probability is returned with `accepted = false`.
pub fn screen_embedding<R: Rng + ?Sized>(
    stats: &CategoryStats,
    predictor: &ErrorPredictor,
    cfg: &GuidanceConfig,
    rng: &mut R,
) -> ScreenOutcome {
    let mut best: Option<(Array1<f64>, f64)> = None;
    let attempts = cfg.max_screen_attempts.max(1);
    for attempt in 1..=attempts {
        let c = draw_condition(stats, rng);
        let p = predictor.prob_error(c.view());
        if p >= predictor.threshold {
            return ScreenOutcome {
                c,
                accepted: true,
                attempts: attempt,
                prob_error: p,
            };
        }
        if best.as_ref().is_none_or(|(_, bp)| p > *bp) {
            best = Some((c, p));
        }
    }
    let (c, prob_error) = best.expect("at least one attempt");
    ScreenOutcome {
        c,
        accepted: false,
        attempts,
        prob_error,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use ndarray::array;

    fn stats() -> CategoryStats {
        CategoryStats {
            category: 0,
            mu: array![1.0, -1.0, 0.0],
            sigma2: array![0.25, 1.0, 4.0],
            count: 10,
            degenerate: false,
        }
    }

    #[test]
    fn always_risky_accepts_first_draw() {
        let p = ErrorPredictor::constant(3, 1.0, 0.5);
        let out = screen_embedding(&stats(), &p, &GuidanceConfig::default(), &mut seed::rng(1));
        assert!(out.accepted);
        assert_eq!(out.attempts, 1);
        // the accepted condition is exactly the first draw of the stream
        assert_eq!(out.c, draw_condition(&stats(), &mut seed::rng(1)));
    }

    #[test]
    fn never_risky_exhausts_budget() {
        let p = ErrorPredictor::constant(3, 0.0, 0.5);
        let cfg = GuidanceConfig {
            max_screen_attempts: 5,
            ..Default::default()
        };
        let out = screen_embedding(&stats(), &p, &cfg, &mut seed::rng(4));
        assert!(!out.accepted);
        assert_eq!(out.attempts, 5);
        let mut rng = seed::rng(4);
        let draws: Vec<_> = (0..5).map(|_| draw_condition(&stats(), &mut rng)).collect();
        assert!(draws.contains(&out.c));
    }

    #[test]
    fn zero_variance_draws_equal_mean() {
        let mut s = stats();
        s.sigma2.fill(0.0);
        let mut rng = seed::rng(9);
        for _ in 0..20 {
            assert_eq!(draw_condition(&s, &mut rng), s.mu);
        }
    }
}
