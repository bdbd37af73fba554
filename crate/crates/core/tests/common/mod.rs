//! Independent oracles shared by the metric tests and the acceptance suite.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Ties are likely because scores are drawn from a small grid.
pub fn random_set(rng: &mut ChaCha8Rng, max_n: usize) -> (Vec<f64>, Vec<bool>) {
    let n = rng.random_range(2..=max_n);
    let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
    labels[0] = true;
    labels[1] = false;
    let scores = (0..n).map(|_| rng.random_range(0..8) as f64 / 8.0).collect();
    (scores, labels)
}

pub fn psi(x: f64, y: f64) -> f64 {
    if x > y {
        1.0
    } else if x == y {
        0.5
    } else {
        0.0
    }
}

pub fn pairwise_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                num += psi(si, sj);
                pairs += 1.0;
            }
        }
    }
    num / pairs
}

pub fn double_loop_components(scores: &[f64], labels: &[bool]) -> (Vec<f64>, Vec<f64>) {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|p| *p.1).map(|p| *p.0).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|p| !*p.1).map(|p| *p.0).collect();
    let v10 = pos.iter().map(|&x| neg.iter().map(|&y| psi(x, y)).sum::<f64>() / neg.len() as f64).collect();
    let v01 = neg.iter().map(|&y| pos.iter().map(|&x| psi(x, y)).sum::<f64>() / pos.len() as f64).collect();
    (v10, v01)
}

/// Textbook DeLong from double-loop components.
pub fn naive_delong_z(a: &[f64], b: &[f64], labels: &[bool]) -> f64 {
    let (a10, a01) = double_loop_components(a, labels);
    let (b10, b01) = double_loop_components(b, labels);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let cov = |x: &[f64], y: &[f64]| {
        let (mx, my) = (mean(x), mean(y));
        x.iter().zip(y).map(|(p, q)| (p - mx) * (q - my)).sum::<f64>() / (x.len() - 1) as f64
    };
    let (m, n) = (a10.len() as f64, a01.len() as f64);
    let var = cov(&a10, &a10) / m + cov(&a01, &a01) / n + cov(&b10, &b10) / m + cov(&b01, &b01) / n
        - 2.0 * (cov(&a10, &b10) / m + cov(&a01, &b01) / n);
    (mean(&a10) - mean(&b10)) / var.sqrt()
}
