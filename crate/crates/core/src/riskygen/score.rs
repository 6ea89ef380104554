use super::GenerateError;
use crate::models::{cross_entropy, JointEmbedder, TargetClassifier};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreOutput {
    /// One score per row of the input.
    pub values: Vec<f64>,
    /// Gradient of each row's score w.r.t. that row, when requested.
    pub grad: Option<Array2<f64>>,
}

/// A per-sample scalar objective the sampler climbs.
pub trait GuidanceScore {
    fn evaluate(&self, x: ArrayView2<f64>, with_grad: bool) -> Result<ScoreOutput, GenerateError>;
}

/// `Ŝ(x) = CE(f(x), y) + λ·h(x)·y_text` for a fixed category.
pub struct RiskScore<'a> {
    pub classifier: &'a TargetClassifier,
    pub embedder: &'a JointEmbedder,
    pub category: usize,
    pub y_text: Array1<f64>,
    pub lambda: f64,
}

impl<'a> RiskScore<'a> {
    /// Uses the embedder's own text embedding of `category`.
    pub fn new(
        classifier: &'a TargetClassifier,
        embedder: &'a JointEmbedder,
        category: usize,
        lambda: f64,
    ) -> Self {
        Self {
            classifier,
            embedder,
            category,
            y_text: embedder.embed_text(category),
            lambda,
        }
    }
}

impl GuidanceScore for RiskScore<'_> {
    fn evaluate(&self, x: ArrayView2<f64>, with_grad: bool) -> Result<ScoreOutput, GenerateError> {
        guidance_score(
            x,
            self.category,
            self.classifier,
            self.embedder,
            self.y_text.view(),
            self.lambda,
            with_grad,
        )
    }
}

/// Cross-entropy of the classifier at label `y` plus `λ` times the inner
/// product of the unit image embedding with `y_text`. With `λ = 0` the
/// embedder is not evaluated at all.
pub fn guidance_score(
    x: ArrayView2<f64>,
    y: usize,
    classifier: &TargetClassifier,
    embedder: &JointEmbedder,
    y_text: ArrayView1<f64>,
    lambda: f64,
    with_grad: bool,
) -> Result<ScoreOutput, GenerateError> {
    let labels = vec![y; x.nrows()];
    let (mut values, mut grad) = if with_grad {
        let (l, g) = classifier.loss_and_input_grad(x, &labels);
        (l, Some(g))
    } else {
        let logits = classifier.logits(x);
        if !logits.iter().all(|v| v.is_finite()) {
            return Err(GenerateError::NonFiniteLogits);
        }
        (cross_entropy(logits.view(), &labels).0, None)
    };
    if !values.iter().all(|v| v.is_finite()) {
        return Err(GenerateError::NonFiniteLogits);
    }
    if lambda != 0.0 {
        let (ip, ip_grad) = embedder.inner_product_and_grad(x, y_text);
        values.iter_mut().zip(&ip).for_each(|(v, p)| *v += lambda * p);
        if let Some(g) = grad.as_mut() {
            g.scaled_add(lambda, &ip_grad);
        }
    }
    Ok(ScoreOutput { values, grad })
}
