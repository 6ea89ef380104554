//! Fréchet distance against closed forms and a hand-rolled Jacobi
//! eigensolver.

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;
use riskydiff_core::evaluation::{frechet_embedding_distance, frechet_gaussians};
use riskydiff_core::seed;

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).collect()
}

fn cholesky(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = m.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                l[i][j] = (m[i][i] - s).sqrt();
            } else {
                l[i][j] = (m[i][j] - s) / l[j][j];
            }
        }
    }
    l
}

/// `‖Δμ‖² + Tr Σ₁ + Tr Σ₂ − 2 Σ √λ_i(Lᵀ Σ₂ L)` with `Σ₁ = L Lᵀ`.
fn reference_distance(mu1: &[f64], c1: &[Vec<f64>], mu2: &[f64], c2: &[Vec<f64>]) -> f64 {
    let n = mu1.len();
    let l = cholesky(c1);
    let mut inner = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            inner[i][j] = (0..n)
                .flat_map(|a| (0..n).map(move |b| (a, b)))
                .map(|(a, b)| l[a][i] * c2[a][b] * l[b][j])
                .sum();
        }
    }
    let tr_sqrt: f64 = jacobi_eigenvalues(inner).iter().map(|v| v.max(0.0).sqrt()).sum();
    let dm: f64 = mu1.iter().zip(mu2).map(|(a, b)| (a - b).powi(2)).sum();
    let tr: f64 = (0..n).map(|i| c1[i][i] + c2[i][i]).sum();
    dm + tr - 2.0 * tr_sqrt
}

fn random_spd(n: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let a: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            m[i][j] = (0..n).map(|k| a[i][k] * a[j][k]).sum::<f64>() + if i == j { 0.1 } else { 0.0 };
        }
    }
    m
}

fn to_na(m: &[Vec<f64>]) -> DMatrix<f64> {
    DMatrix::from_fn(m.len(), m.len(), |i, j| m[i][j])
}

fn points(n: usize, d: usize, s: u64, shift: f64) -> Array2<f64> {
    let mut rng = seed::rng(s);
    Array2::from_shape_fn((n, d), |(_, j)| rng.sample::<f64, _>(StandardNormal) * (1.0 + j as f64) + shift)
}

#[test]
fn univariate_closed_form() {
    let one = |v: f64| DMatrix::from_element(1, 1, v);
    let d = frechet_gaussians(&DVector::from_element(1, 0.0), &one(1.0), &DVector::from_element(1, 1.0), &one(1.0));
    assert!((d - 1.0).abs() < 1e-6, "{d}");
    // (Δμ)² + (σ₁ − σ₂)²
    let d = frechet_gaussians(&DVector::from_element(1, 2.0), &one(4.0), &DVector::from_element(1, -1.0), &one(9.0));
    assert!((d - (9.0 + 1.0)).abs() < 1e-9, "{d}");
}

#[test]
fn random_3d_pairs_match_reference() {
    let mut rng = seed::rng(42);
    for _ in 0..50 {
        let c1 = random_spd(3, &mut rng);
        let c2 = random_spd(3, &mut rng);
        let mu1: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
        let mu2: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
        let got = frechet_gaussians(&DVector::from_vec(mu1.clone()), &to_na(&c1), &DVector::from_vec(mu2.clone()), &to_na(&c2));
        let want = reference_distance(&mu1, &c1, &mu2, &c2);
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
}

#[test]
fn identical_sets_are_at_distance_zero() {
    for (n, d) in [(50, 3), (5, 8), (200, 8)] {
        let a = points(n, d, n as u64, 0.3);
        let f = frechet_embedding_distance(a.view(), a.view()).unwrap();
        assert!(f.distance.abs() < 1e-8, "{n}x{d}: {}", f.distance);
        assert_eq!(f.diagonal, n <= d + 1);
    }
}

#[test]
fn too_few_points_is_an_error() {
    let a = points(1, 2, 0, 0.0);
    let b = points(10, 2, 1, 0.0);
    assert!(frechet_embedding_distance(a.view(), b.view()).is_err());
    assert!(frechet_embedding_distance(b.view(), a.view()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn symmetric(s in any::<u64>(), n1 in 2usize..40, n2 in 2usize..40, shift in -2.0f64..2.0) {
        let a = points(n1, 3, s, 0.0);
        let b = points(n2, 3, s.wrapping_add(1), shift);
        let ab = frechet_embedding_distance(a.view(), b.view()).unwrap().distance;
        let ba = frechet_embedding_distance(b.view(), a.view()).unwrap().distance;
        prop_assert!((ab - ba).abs() < 1e-8, "{ab} vs {ba}");
        prop_assert!(ab >= 0.0);
    }

    #[test]
    fn row_order_does_not_matter(s in any::<u64>(), rot in 0usize..30) {
        let a = points(30, 4, s, 0.0);
        let b = points(25, 4, s ^ 1, 0.5);
        let mut rows: Vec<usize> = (0..30).collect();
        rows.rotate_left(rot);
        rows.reverse();
        let shuffled = a.select(ndarray::Axis(0), &rows);
        let d1 = frechet_embedding_distance(a.view(), b.view()).unwrap().distance;
        let d2 = frechet_embedding_distance(shuffled.view(), b.view()).unwrap().distance;
        prop_assert!((d1 - d2).abs() < 1e-8);
    }

    #[test]
    fn pure_translation_costs_its_squared_length(s in any::<u64>(), v in prop::collection::vec(-3.0f64..3.0, 3)) {
        let a = points(40, 3, s, 0.0);
        let mut b = a.clone();
        for mut row in b.rows_mut() {
            row.iter_mut().zip(&v).for_each(|(x, d)| *x += d);
        }
        let want: f64 = v.iter().map(|d| d * d).sum();
        let got = frechet_embedding_distance(a.view(), b.view()).unwrap().distance;
        prop_assert!((got - want).abs() < 1e-6 * (1.0 + want), "{got} vs {want}");
    }
}
