//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

pub mod grad;

pub fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// NT-Xent over rows `[view1; view2]` written out term by term.
pub fn nt_xent_oracle(rows: &[Vec<f64>], tau: f64) -> f64 {
    let m = rows.len();
    let n = m / 2;
    let z: Vec<Vec<f64>> = rows.iter().map(|r| unit(r)).collect();
    let mut total = 0.0;
    for i in 0..m {
        let j = if i < n { i + n } else { i - n };
        let mut denom = 0.0;
        for k in 0..m {
            if k != i {
                denom += (dot(&z[i], &z[k]) / tau).exp();
            }
        }
        total += -((dot(&z[i], &z[j]) / tau).exp() / denom).ln();
    }
    total / m as f64
}

/// Symmetric InfoNCE with diagonal positives.
pub fn info_nce_oracle(a: &[Vec<f64>], b: &[Vec<f64>], scale: f64) -> f64 {
    let m = a.len();
    let (a, b): (Vec<_>, Vec<_>) = (a.iter().map(|r| unit(r)).collect(), b.iter().map(|r| unit(r)).collect());
    let s = |i: usize, j: usize| scale * dot(&a[i], &b[j]);
    let mut rows = 0.0;
    let mut cols = 0.0;
    for i in 0..m {
        let lse_r = (0..m).map(|j| s(i, j).exp()).sum::<f64>().ln();
        let lse_c = (0..m).map(|j| s(j, i).exp()).sum::<f64>().ln();
        rows += lse_r - s(i, i);
        cols += lse_c - s(i, i);
    }
    0.5 * (rows + cols) / m as f64
}

pub fn alignment_oracle(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for i in 0..a.len() {
        let mut d = 0.0;
        for k in 0..a[i].len() {
            d += (a[i][k] - b[i][k]).powi(2);
        }
        total += d;
    }
    total / a.len() as f64
}

pub fn uniformity_oracle(x: &[Vec<f64>]) -> f64 {
    let n = x.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                total += (-2.0 * sq_dist(&x[i], &x[j])).exp();
            }
        }
    }
    (total / (n * (n - 1)) as f64).ln()
}

pub fn flatten(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}
