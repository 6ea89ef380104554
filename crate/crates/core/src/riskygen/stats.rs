use super::GenerateError;
use ndarray::{Array1, ArrayView2};
use serde::{Deserialize, Serialize};

/// Mean and per-dimension variance of the image embeddings of one category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub category: usize,
    pub mu: Array1<f64>,
    pub sigma2: Array1<f64>,
    pub count: usize,
    /// Only one sample contributed, so `sigma2` is identically zero.
    pub degenerate: bool,
}

impl CategoryStats {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Population (divide-by-n) statistics of the rows labelled `y`.
pub fn estimate_category_stats(
    embeddings: ArrayView2<f64>,
    labels: &[usize],
    y: usize,
) -> Result<CategoryStats, GenerateError> {
    if embeddings.nrows() != labels.len() {
        return Err(GenerateError::LengthMismatch {
            embeddings: embeddings.nrows(),
            labels: labels.len(),
        });
    }
    let d = embeddings.ncols();
    let rows: Vec<_> = labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == y)
        .map(|(i, _)| embeddings.row(i))
        .collect();
    if rows.is_empty() {
        return Err(GenerateError::NoSamples(y));
    }
    let n = rows.len() as f64;
    let mut mu = Array1::zeros(d);
    for r in &rows {
        mu += r;
    }
    mu /= n;
    let mut sigma2 = Array1::<f64>::zeros(d);
    for r in &rows {
        let diff = r - &mu;
        sigma2 += &(&diff * &diff);
    }
    sigma2 /= n;
    Ok(CategoryStats {
        category: y,
        mu,
        sigma2,
        count: rows.len(),
        degenerate: rows.len() == 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use ndarray::{array, Array2};
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn two_point_population_variance() {
        let e = array![[0.0, 0.0], [2.0, 2.0], [9.0, 9.0]];
        let s = estimate_category_stats(e.view(), &[1, 1, 0], 1).unwrap();
        assert_eq!(s.mu, array![1.0, 1.0]);
        assert_eq!(s.sigma2, array![1.0, 1.0]);
        assert_eq!(s.count, 2);
        assert!(!s.degenerate);
    }

    #[test]
    fn single_sample_is_degenerate() {
        let e = array![[0.5, -1.5], [2.0, 2.0]];
        let s = estimate_category_stats(e.view(), &[3, 0], 3).unwrap();
        assert_eq!(s.mu, array![0.5, -1.5]);
        assert_eq!(s.sigma2, array![0.0, 0.0]);
        assert!(s.degenerate);
    }

    #[test]
    fn missing_category_and_length_mismatch() {
        let e = array![[0.0], [1.0]];
        assert!(matches!(
            estimate_category_stats(e.view(), &[0, 0], 2),
            Err(GenerateError::NoSamples(2))
        ));
        assert!(matches!(
            estimate_category_stats(e.view(), &[0], 0),
            Err(GenerateError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn recovers_known_gaussian() {
        let mean = [1.0, -2.0, 0.5];
        let sd = [0.5, 2.0, 1.0];
        let n = 1000;
        let mut rng = seed::rng(2024);
        let e = Array2::from_shape_fn((n, 3), |(_, j)| {
            mean[j] + sd[j] * rng.sample::<f64, _>(StandardNormal)
        });
        let s = estimate_category_stats(e.view(), &vec![0; n], 0).unwrap();
        for j in 0..3 {
            let var = sd[j] * sd[j];
            let se_mean = (var / n as f64).sqrt();
            // variance of the sample variance for a normal is 2σ⁴/n
            let se_var = (2.0 * var * var / n as f64).sqrt();
            assert!((s.mu[j] - mean[j]).abs() < 3.0 * se_mean, "mean {j}");
            assert!((s.sigma2[j] - var).abs() < 3.0 * se_var, "var {j}");
        }
    }
}
