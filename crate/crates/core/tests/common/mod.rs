//! Naive reference implementations and random inputs shared by the
//! integration tests.
#![allow(dead_code)]

use condcov::ConfoundedSeries;
use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gauss(u: f64, h: f64) -> f64 {
    let s = u / h;
    (-0.5 * s * s).exp()
}

/// Hourly series with uniform confounder on `[lo, hi]` and outputs that
/// depend on it.
pub fn random_series(rng: &mut impl Rng, n: usize, p: usize, lo: f64, hi: f64) -> ConfoundedSeries {
    let z: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    let x = Array2::from_shape_fn((n, p), |(i, j)| {
        (j as f64 + 1.0) * 0.1 * z[i] + rng.random_range(-1.0..1.0) * (1.0 + 0.05 * z[i].abs())
    });
    ConfoundedSeries::new((0..n as i64).map(|i| i * 3600).collect(), x, z).unwrap()
}

/// Row-major copy of the outputs.
pub fn rows(series: &ConfoundedSeries) -> Vec<Vec<f64>> {
    series
        .outputs()
        .rows()
        .into_iter()
        .map(|r| r.to_vec())
        .collect()
}

/// Nadaraya-Watson mean at every observation, by double loop.
pub fn naive_nw_mean(z: &[f64], x: &[Vec<f64>], h: f64) -> Vec<Vec<f64>> {
    let p = x[0].len();
    z.iter()
        .map(|&zi| {
            let mut num = vec![0.0; p];
            let mut den = 0.0;
            for (zj, xj) in z.iter().zip(x) {
                let w = gauss(zj - zi, h);
                den += w;
                for c in 0..p {
                    num[c] += w * xj[c];
                }
            }
            num.iter().map(|v| v / den).collect()
        })
        .collect()
}

/// Local-linear mean at every observation: weighted least squares of
/// `x` on `(1, z_j - z_i)`, solved by Cramer's rule.
pub fn naive_ll_mean(z: &[f64], x: &[Vec<f64>], h: f64) -> Vec<Vec<f64>> {
    let p = x[0].len();
    z.iter()
        .map(|&zi| {
            let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
            let mut u = vec![0.0; p];
            let mut v = vec![0.0; p];
            for (zj, xj) in z.iter().zip(x) {
                let d = zj - zi;
                let w = gauss(d, h);
                a += w;
                b += w * d;
                c += w * d * d;
                for k in 0..p {
                    u[k] += w * xj[k];
                    v[k] += w * d * xj[k];
                }
            }
            (0..p)
                .map(|k| (c * u[k] - b * v[k]) / (a * c - b * b))
                .collect()
        })
        .collect()
}

/// Kernel-weighted residual outer products at each grid point.
pub fn naive_covariance(z: &[f64], resid: &[Vec<f64>], h: f64, grid: &[f64]) -> Vec<Vec<Vec<f64>>> {
    let p = resid[0].len();
    grid.iter()
        .map(|&g| {
            let mut num = vec![vec![0.0; p]; p];
            let mut den = 0.0;
            for (zi, ri) in z.iter().zip(resid) {
                let w = gauss(zi - g, h);
                den += w;
                for k in 0..p {
                    for l in 0..p {
                        num[k][l] += w * ri[k] * ri[l];
                    }
                }
            }
            num.into_iter()
                .map(|row| row.into_iter().map(|v| v / den).collect())
                .collect()
        })
        .collect()
}

/// Standard normal CDF by composite Simpson integration of the density.
pub fn normal_cdf(x: f64) -> f64 {
    let m = 20_000;
    let h = x / m as f64;
    let f = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = f(0.0) + f(x);
    for i in 1..m {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
    }
    0.5 + s * h / 3.0
}

/// Standard normal quantile by bisection on [`normal_cdf`].
pub fn normal_quantile(p: f64) -> f64 {
    let (mut lo, mut hi) = (-10.0, 10.0);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if normal_cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Two-pass sample standard deviation with divisor `n - 1`.
pub fn sample_sd(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}
