//! Metrics for generated sample sets: error rate against a classifier,
//! Fréchet distance to a reference set in embedding space, conformity
//! against the Bayes oracle and cross-model transfer.

use crate::dataset::BayesOracle;
use crate::models::{JointEmbedder, TargetClassifier};
use crate::riskygen::GeneratedSample;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no samples to evaluate")]
    Empty,
    #[error("no classifiers given")]
    NoClassifiers,
    #[error("fréchet distance needs at least 2 points per set, got {left} and {right}")]
    TooFewPoints { left: usize, right: usize },
    #[error("embedding widths differ: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn samples_matrix(samples: &[GeneratedSample]) -> Array2<f64> {
    let d = samples.first().map_or(0, |s| s.x.len());
    Array2::from_shape_fn((samples.len(), d), |(i, j)| samples[i].x[j])
}

/// Fraction of samples the classifier labels differently from the intended
/// category.
pub fn error_rate(samples: &[GeneratedSample], classifier: &TargetClassifier) -> Result<f64, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::Empty);
    }
    let pred = classifier.predict(samples_matrix(samples).view());
    let wrong = samples
        .iter()
        .zip(&pred)
        .filter(|(s, &p)| p != s.intended_category)
        .count();
    Ok(wrong as f64 / samples.len() as f64)
}

/// Fraction of samples whose oracle label equals the intended category.
pub fn conformity_rate(samples: &[GeneratedSample], oracle: &BayesOracle) -> Result<f64, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::Empty);
    }
    let labels = oracle.labels(&samples_matrix(samples));
    let ok = samples
        .iter()
        .zip(&labels)
        .filter(|(s, &l)| l == s.intended_category)
        .count();
    Ok(ok as f64 / samples.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Frechet {
    pub distance: f64,
    /// Covariances were restricted to their diagonals because one of the
    /// sets was too small for a full fit.
    pub diagonal: bool,
}

fn to_matrix(a: ArrayView2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn gaussian_fit(a: &DMatrix<f64>, diagonal: bool) -> (DVector<f64>, DMatrix<f64>) {
    let n = a.nrows() as f64;
    let mu = a.row_mean().transpose();
    let centred = DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)] - mu[j]);
    let mut cov = centred.transpose() * &centred / (n - 1.0);
    if diagonal {
        cov = DMatrix::from_diagonal(&cov.diagonal());
    }
    (mu, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

/// `‖μ₁−μ₂‖² + Tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^{1/2})` for two Gaussians. The trace of
/// the square root is taken as `Tr((√Σ₁ Σ₂ √Σ₁)^{1/2})`, whose argument is
/// symmetric PSD; negative eigenvalues from rounding are clamped to zero.
pub fn frechet_gaussians(
    mu1: &DVector<f64>,
    cov1: &DMatrix<f64>,
    mu2: &DVector<f64>,
    cov2: &DMatrix<f64>,
) -> f64 {
    let dm = mu1 - mu2;
    let s1 = psd_sqrt(cov1);
    let inner = &s1 * cov2 * &s1;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    (dm.dot(&dm) + cov1.trace() + cov2.trace() - 2.0 * tr_sqrt).max(0.0)
}

/// Fréchet distance between Gaussian fits of two embedding sets (rows are
/// points). Full covariances are used when both sets have more than
/// `d + 1` points, diagonal ones otherwise.
pub fn frechet_embedding_distance(
    generated: ArrayView2<f64>,
    reference: ArrayView2<f64>,
) -> Result<Frechet, EvalError> {
    if generated.nrows() < 2 || reference.nrows() < 2 {
        return Err(EvalError::TooFewPoints {
            left: generated.nrows(),
            right: reference.nrows(),
        });
    }
    if generated.ncols() != reference.ncols() {
        return Err(EvalError::DimMismatch {
            left: generated.ncols(),
            right: reference.ncols(),
        });
    }
    let d = generated.ncols();
    let diagonal = generated.nrows().min(reference.nrows()) <= d + 1;
    let (m1, c1) = gaussian_fit(&to_matrix(generated), diagonal);
    let (m2, c2) = gaussian_fit(&to_matrix(reference), diagonal);
    Ok(Frechet {
        distance: frechet_gaussians(&m1, &c1, &m2, &c2),
        diagonal,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRow {
    pub target_model: String,
    pub error_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub source_model: String,
    pub rows: Vec<TransferRow>,
}

impl TransferMatrix {
    pub fn write_csv(&self, path: &Path) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["source_model", "target_model", "error_rate"])?;
        for r in &self.rows {
            w.write_record([
                self.source_model.as_str(),
                r.target_model.as_str(),
                &r.error_rate.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Error rate of one fixed sample set under each of `classifiers`.
pub fn transfer_matrix(
    samples: &[GeneratedSample],
    source_model: &str,
    classifiers: &[(&str, &TargetClassifier)],
) -> Result<TransferMatrix, EvalError> {
    if classifiers.is_empty() {
        return Err(EvalError::NoClassifiers);
    }
    let rows = classifiers
        .iter()
        .map(|(name, c)| {
            Ok(TransferRow {
                target_model: name.to_string(),
                error_rate: error_rate(samples, c)?,
            })
        })
        .collect::<Result<_, EvalError>>()?;
    Ok(TransferMatrix {
        source_model: source_model.to_string(),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub category: usize,
    pub count: usize,
    pub error_rate: f64,
    pub conformity_rate: f64,
    /// Absent when either side has fewer than two points.
    pub frechet_distance: Option<f64>,
    pub frechet_diagonal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sample_count: usize,
    pub error_rate: f64,
    pub conformity_rate: f64,
    pub frechet_distance: f64,
    pub frechet_diagonal: bool,
    /// Size of the reference set of error samples.
    pub reference_count: usize,
    /// Samples whose screening ran out of attempts.
    pub screen_fallbacks: usize,
    pub per_category: Vec<CategoryMetrics>,
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<(), EvalError> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Samples the target model gets wrong, used as the Fréchet reference.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReference {
    /// Image embeddings of the misclassified samples.
    pub embeddings: Array2<f64>,
    /// Their true labels.
    pub labels: Vec<usize>,
}

impl ErrorReference {
    pub fn from_data(
        x: ArrayView2<f64>,
        labels: &[usize],
        classifier: &TargetClassifier,
        embedder: &JointEmbedder,
    ) -> Self {
        let pred = classifier.predict(x);
        let rows: Vec<usize> = (0..labels.len()).filter(|&i| pred[i] != labels[i]).collect();
        let sel = x.select(ndarray::Axis(0), &rows);
        Self {
            embeddings: embedder.embed_image(sel.view()),
            labels: rows.iter().map(|&i| labels[i]).collect(),
        }
    }
}

/// Full metric set for one generated sample set.
pub fn evaluate(
    samples: &[GeneratedSample],
    classifier: &TargetClassifier,
    embedder: &JointEmbedder,
    oracle: &BayesOracle,
    reference: &ErrorReference,
    config: serde_json::Value,
) -> Result<EvalReport, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::Empty);
    }
    let emb = embedder.embed_image(samples_matrix(samples).view());
    let overall = frechet_embedding_distance(emb.view(), reference.embeddings.view())?;
    let mut categories: Vec<usize> = samples.iter().map(|s| s.intended_category).collect();
    categories.sort_unstable();
    categories.dedup();
    let mut per_category = Vec::new();
    for y in categories {
        let idx: Vec<usize> = (0..samples.len())
            .filter(|&i| samples[i].intended_category == y)
            .collect();
        let subset: Vec<GeneratedSample> = idx.iter().map(|&i| samples[i].clone()).collect();
        let ref_idx: Vec<usize> = (0..reference.labels.len())
            .filter(|&i| reference.labels[i] == y)
            .collect();
        let fr = frechet_embedding_distance(
            emb.select(ndarray::Axis(0), &idx).view(),
            reference.embeddings.select(ndarray::Axis(0), &ref_idx).view(),
        )
        .ok();
        per_category.push(CategoryMetrics {
            category: y,
            count: idx.len(),
            error_rate: error_rate(&subset, classifier)?,
            conformity_rate: conformity_rate(&subset, oracle)?,
            frechet_distance: fr.map(|f| f.distance),
            frechet_diagonal: fr.is_some_and(|f| f.diagonal),
        });
    }
    Ok(EvalReport {
        sample_count: samples.len(),
        error_rate: error_rate(samples, classifier)?,
        conformity_rate: conformity_rate(samples, oracle)?,
        frechet_distance: overall.distance,
        frechet_diagonal: overall.diagonal,
        reference_count: reference.labels.len(),
        screen_fallbacks: samples.iter().filter(|s| !s.screen_accepted).count(),
        per_category,
        config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ClassifierArch, TargetClassifier};
    use crate::nn::Parameters;
    use ndarray::array;

    fn sample(x: Vec<f64>, y: usize) -> GeneratedSample {
        GeneratedSample {
            x,
            intended_category: y,
            prediction: 0,
            is_risky: y != 0,
            embedding_condition: vec![],
            screen_attempts: 1,
            screen_accepted: true,
            trace: None,
        }
    }

    /// Linear classifier whose logit for class `k` is `x_k`.
    fn coordinate_classifier(k: usize) -> TargetClassifier {
        let mut c = TargetClassifier::new(ClassifierArch::Linear, k, k, 0);
        c.visit_mut(&mut |name, data| {
            data.fill(0.0);
            if name.ends_with("weight") {
                for i in 0..k {
                    data[i * k + i] = 1.0;
                }
            }
        });
        c
    }

    #[test]
    fn error_rate_counts() {
        let c = coordinate_classifier(2);
        // predictions [0, 1, 1] vs intended [0, 0, 1]
        let s = vec![
            sample(vec![1.0, 0.0], 0),
            sample(vec![0.0, 1.0], 0),
            sample(vec![0.0, 1.0], 1),
        ];
        assert!((error_rate(&s, &c).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(error_rate(&s[..1], &c).unwrap(), 0.0);
        assert!(matches!(error_rate(&[], &c), Err(EvalError::Empty)));
    }

    #[test]
    fn frechet_basics() {
        let a = array![[0.0, 1.0], [2.0, 0.5], [1.0, -1.0], [3.0, 3.0], [-1.0, 0.0]];
        let f = frechet_embedding_distance(a.view(), a.view()).unwrap();
        assert!(f.distance.abs() < 1e-8);
        assert!(!f.diagonal);
        let one = DVector::from_vec(vec![1.0]);
        let zero = DVector::from_vec(vec![0.0]);
        let id = DMatrix::identity(1, 1);
        assert!((frechet_gaussians(&zero, &id, &one, &id) - 1.0).abs() < 1e-12);
        assert!(matches!(
            frechet_embedding_distance(a.slice(ndarray::s![..1, ..]), a.view()),
            Err(EvalError::TooFewPoints { left: 1, right: 5 })
        ));
    }

    #[test]
    fn small_sets_use_diagonal_fit() {
        let a = array![[0.0, 1.0, 2.0], [1.0, 0.0, 0.0], [2.0, 2.0, 1.0]];
        let b = array![[0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [0.5, 2.0, 1.0], [1.0, 3.0, 2.0], [3.0, 0.0, 1.0]];
        let f = frechet_embedding_distance(a.view(), b.view()).unwrap();
        assert!(f.diagonal);
        // diagonal case reduces to Σ (Δμ)² + (σ₁ − σ₂)² per coordinate
        let col = |m: &Array2<f64>, j: usize| {
            let c = m.column(j);
            let mu = c.mean().unwrap();
            let var = c.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (c.len() - 1) as f64;
            (mu, var.sqrt())
        };
        let expect: f64 = (0..3)
            .map(|j| {
                let ((m1, s1), (m2, s2)) = (col(&a, j), col(&b, j));
                (m1 - m2).powi(2) + (s1 - s2).powi(2)
            })
            .sum();
        assert!((f.distance - expect).abs() < 1e-10);
    }

    #[test]
    fn transfer_constant_classifier() {
        // every weight zero, bias favouring class 1
        let mut c = TargetClassifier::new(ClassifierArch::Linear, 2, 3, 0);
        c.visit_mut(&mut |name, data| {
            data.fill(0.0);
            if name.ends_with("bias") {
                data[1] = 1.0;
            }
        });
        let s = vec![
            sample(vec![0.0, 0.0], 0),
            sample(vec![1.0, 0.0], 1),
            sample(vec![0.0, 5.0], 2),
            sample(vec![0.0, 5.0], 1),
        ];
        let m = transfer_matrix(&s, "src", &[("const", &c)]).unwrap();
        assert_eq!(m.rows[0].error_rate, 0.5);
        assert!(matches!(transfer_matrix(&s, "src", &[]), Err(EvalError::NoClassifiers)));
    }
}
