//! Head scores and synthetic data checked against independent computations.

use fewshot_core::episodes::{episode_rng, sample_episode, synth_task_domain};
use fewshot_core::heads::{self, HeadKind, SupportSet};
use fewshot_core::numerics::{argmax, Tensor};
use fewshot_core::ShiftConfig;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_support(rng: &mut ChaCha8Rng, n: usize, k: usize, d: usize) -> SupportSet {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for c in 0..n {
        for _ in 0..k {
            rows.push((0..d).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<f64>>());
            labels.push(c);
        }
    }
    SupportSet::new(Tensor::from_rows(&rows).unwrap(), labels, n).unwrap()
}

fn class_rows(s: &SupportSet, c: usize) -> Vec<Vec<f64>> {
    s.class_rows(c).into_iter().map(|r| s.features().row(r).to_vec()).collect()
}

fn mean(rows: &[Vec<f64>]) -> Vec<f64> {
    let d = rows[0].len();
    (0..d).map(|i| rows.iter().map(|r| r[i]).sum::<f64>() / rows.len() as f64).collect()
}

/// Least-squares residual of `q - x0` against the span of `x_i - x0`, solved
/// through the normal equations.
fn affine_residual(rows: &[Vec<f64>], q: &[f64]) -> f64 {
    let d = q.len();
    let x0 = DVector::from_column_slice(&rows[0]);
    let target = DVector::from_column_slice(q) - &x0;
    if rows.len() == 1 {
        return target.norm_squared();
    }
    let a = DMatrix::from_fn(d, rows.len() - 1, |i, j| rows[j + 1][i] - x0[i]);
    let gram = a.transpose() * &a;
    let rhs = a.transpose() * &target;
    let coeff = gram.lu().solve(&rhs).expect("independent support samples");
    (target - a * coeff).norm_squared()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + y.abs()))
}

#[test]
fn metric_heads_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..200 {
        let (n, k, d) = (rng.random_range(2..6), rng.random_range(1..5), rng.random_range(5..9));
        let support = random_support(&mut rng, n, k, d);
        let q: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();

        let proto = heads::fit(HeadKind::Proto, &support, None).unwrap().score(&q).unwrap();
        let expected: Vec<f64> = (0..n)
            .map(|c| {
                let m = mean(&class_rows(&support, c));
                -m.iter().zip(&q).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
            })
            .collect();
        assert!(close(&proto, &expected, 1e-9), "proto trial {trial}");

        let matching = heads::fit(HeadKind::Matching, &support, None).unwrap().score(&q).unwrap();
        let qv = DVector::from_column_slice(&q);
        let expected: Vec<f64> = (0..n)
            .map(|c| {
                let rows = class_rows(&support, c);
                -rows
                    .iter()
                    .map(|r| {
                        let s = DVector::from_column_slice(r);
                        1.0 - s.dot(&qv) / (s.norm() * qv.norm())
                    })
                    .sum::<f64>()
                    / rows.len() as f64
            })
            .collect();
        assert!(close(&matching, &expected, 1e-9), "matching trial {trial}");

        let subspace = heads::fit(HeadKind::Subspace, &support, None).unwrap().score(&q).unwrap();
        let expected: Vec<f64> = (0..n).map(|c| -affine_residual(&class_rows(&support, c), &q)).collect();
        assert!(close(&subspace, &expected, 1e-9), "subspace trial {trial}: {subspace:?} vs {expected:?}");
    }
}

#[test]
fn nearest_centre_separates_synthetic_classes() {
    let cfg = ShiftConfig {
        classes: 10,
        samples_per_class: 40,
        ..ShiftConfig::default()
    };
    let data = synth_task_domain(&cfg).unwrap();
    // Centres estimated from the first half of each class, tested on the rest.
    let centres: Vec<Vec<f64>> = (0..data.n_classes())
        .map(|c| {
            let rows: Vec<Vec<f64>> = data.class_items(c)[..20]
                .iter()
                .map(|&i| data.items()[i].input.clone())
                .collect();
            mean(&rows)
        })
        .collect();
    let mut correct = 0;
    let mut total = 0;
    for c in 0..data.n_classes() {
        for &i in &data.class_items(c)[20..] {
            let x = &data.items()[i].input;
            let scores: Vec<f64> = centres
                .iter()
                .map(|m| -m.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
                .collect();
            correct += usize::from(argmax(&scores) == c);
            total += 1;
        }
    }
    assert!(correct as f64 / total as f64 > 0.99, "{correct}/{total}");
}

#[test]
fn sampler_is_roughly_uniform_over_classes() {
    let data = synth_task_domain(&ShiftConfig {
        classes: 20,
        samples_per_class: 20,
        ..ShiftConfig::default()
    })
    .unwrap();
    let mut counts = [0usize; 20];
    let episodes = 4000;
    for i in 0..episodes {
        let ep = sample_episode(&data, 5, 1, 3, &mut episode_rng(77, i)).unwrap();
        for c in ep.classes {
            counts[c] += 1;
        }
    }
    for c in counts {
        let f = c as f64 / episodes as f64;
        assert!((f - 0.25).abs() < 0.03, "{f}");
    }
}
