#![allow(clippy::needless_range_loop, clippy::type_complexity)]

mod common;

use common::*;
use condcov::bootstrap::{build_block_plan, resample_counts, resample_series, BlockSpan};
use condcov::kernel::{estimate_conditional_covariance, estimate_mean};
use condcov::rng::substream;
use condcov::{
    BlockMode, ConditionalEstimator, EstimatorConfig, EvaluationGrid, KernelFamily, KernelSpec,
    MeanEvaluation, MeanField, MeanMethod,
};
use ndarray::Array2;

fn close(a: f64, b: f64, rel: f64, scale: f64) -> bool {
    (a - b).abs() <= rel * b.abs().max(scale)
}

fn check_against_oracle(
    method: MeanMethod,
    naive_mean: fn(&[f64], &[Vec<f64>], f64) -> Vec<Vec<f64>>,
) {
    let h = 1.5;
    let spec = KernelSpec::gaussian(h).unwrap();
    let mut r = rng(11);
    for _ in 0..100 {
        let s = random_series(&mut r, 50, 2, -5.0, 20.0);
        let grid = EvaluationGrid::spanning(&s, 10).unwrap();
        let x = rows(&s);
        let m = naive_mean(s.confounder(), &x, h);
        let resid: Vec<Vec<f64>> = x
            .iter()
            .zip(&m)
            .map(|(xi, mi)| vec![xi[0] - mi[0], xi[1] - mi[1]])
            .collect();
        let want = naive_covariance(s.confounder(), &resid, h, grid.points());

        let mean = estimate_mean(&s, &spec, method).unwrap();
        for (i, mi) in m.iter().enumerate() {
            for c in 0..2 {
                assert!(close(mean.fitted[[i, c]], mi[c], 1e-12, 1e-300));
            }
        }
        // the covariance stage on identical residuals
        let lib_resid: Vec<Vec<f64>> = x
            .iter()
            .enumerate()
            .map(|(i, xi)| vec![xi[0] - mean.fitted[[i, 0]], xi[1] - mean.fitted[[i, 1]]])
            .collect();
        let stage = naive_covariance(s.confounder(), &lib_resid, h, grid.points());
        let got = estimate_conditional_covariance(&s, &mean, &spec, &grid).unwrap();
        let via_estimator =
            ConditionalEstimator::new(&s, &EstimatorConfig::new(spec, method), &grid)
                .unwrap()
                .estimate()
                .unwrap();
        for g in 0..10 {
            let scale = (want[g][0][0] * want[g][1][1]).sqrt();
            for k in 0..2 {
                for l in 0..2 {
                    assert!(
                        close(got.entry(g, k, l), stage[g][k][l], 1e-12, 1e-300),
                        "{method:?} g={g}"
                    );
                    // end to end, relative to the matrix scale
                    assert!(close(got.entry(g, k, l), want[g][k][l], 1e-12, scale));
                    assert!(close(
                        via_estimator.entry(g, k, l),
                        want[g][k][l],
                        1e-12,
                        scale
                    ));
                }
            }
        }
    }
}

#[test]
fn nadaraya_watson_pipeline_matches_double_loop() {
    check_against_oracle(MeanMethod::NadarayaWatson, naive_nw_mean);
}

#[test]
fn local_linear_pipeline_matches_double_loop() {
    check_against_oracle(MeanMethod::LocalLinear, naive_ll_mean);
}

#[test]
fn covariance_given_mean_matches_double_loop_for_p3() {
    let mut r = rng(5);
    let s = random_series(&mut r, 80, 3, 0.0, 10.0);
    let fitted = Array2::from_shape_fn((80, 3), |(i, j)| 0.01 * (i + j) as f64);
    let mean = MeanField {
        fitted: fitted.clone(),
        method: MeanMethod::NadarayaWatson,
        bandwidth: 1.0,
    };
    let grid = EvaluationGrid::linspace(-1.0, 11.0, 7).unwrap();
    let got =
        estimate_conditional_covariance(&s, &mean, &KernelSpec::gaussian(0.8).unwrap(), &grid)
            .unwrap();
    let resid: Vec<Vec<f64>> = rows(&s)
        .iter()
        .enumerate()
        .map(|(i, x)| (0..3).map(|j| x[j] - fitted[[i, j]]).collect())
        .collect();
    let want = naive_covariance(s.confounder(), &resid, 0.8, grid.points());
    for g in 0..7 {
        for k in 0..3 {
            for l in 0..3 {
                assert!(close(got.entry(g, k, l), want[g][k][l], 1e-12, 1e-300));
            }
        }
    }
}

#[test]
fn huge_bandwidth_gives_pooled_covariance() {
    let mut r = rng(3);
    let s = random_series(&mut r, 300, 2, -5.0, 20.0);
    let (lo, hi) = s.confounder_range();
    let spec = KernelSpec::gaussian(1e6 * (hi - lo)).unwrap();
    let grid = EvaluationGrid::spanning(&s, 10).unwrap();
    let x = rows(&s);
    let n = x.len() as f64;
    let mu: Vec<f64> = (0..2)
        .map(|c| x.iter().map(|r| r[c]).sum::<f64>() / n)
        .collect();
    let pooled = |k: usize, l: usize| {
        x.iter()
            .map(|r| (r[k] - mu[k]) * (r[l] - mu[l]))
            .sum::<f64>()
            / n
    };
    let f = ConditionalEstimator::new(
        &s,
        &EstimatorConfig::new(spec, MeanMethod::NadarayaWatson),
        &grid,
    )
    .unwrap()
    .estimate()
    .unwrap();
    for g in 0..10 {
        for k in 0..2 {
            for l in 0..2 {
                assert!(close(f.entry(g, k, l), pooled(k, l), 1e-6, 0.0));
            }
        }
    }
}

#[test]
fn weighted_estimate_equals_materialised_replicate() {
    let mut r = rng(8);
    let s = random_series(&mut r, 240, 2, -3.0, 12.0);
    let grid = EvaluationGrid::linspace(-2.0, 11.0, 9).unwrap();
    let cfg = EstimatorConfig::new(KernelSpec::gaussian(1.5).unwrap(), MeanMethod::LocalLinear);
    let est = ConditionalEstimator::new(&s, &cfg, &grid).unwrap();
    for mode in [BlockMode::Disjoint, BlockMode::Moving] {
        let plan = build_block_plan(&s, mode, BlockSpan::Day).unwrap();
        for rep in 0..5 {
            let counts = resample_counts(&plan, &mut substream(21, rep));
            let series = resample_series(&s, &plan, &mut substream(21, rep)).unwrap();
            assert_eq!(counts.iter().sum::<f64>(), 240.0);
            let direct = ConditionalEstimator::new(&series, &cfg, &grid)
                .unwrap()
                .estimate()
                .unwrap();
            let weighted = est.estimate_weighted(&counts).unwrap();
            for (a, b) in weighted.values().iter().zip(direct.values()) {
                assert!(close(*a, *b, 1e-10, 1e-12), "{a} {b}");
            }
        }
    }
}

#[test]
fn epanechnikov_pipeline_matches_double_loop() {
    let mut r = rng(17);
    let s = random_series(&mut r, 120, 2, 0.0, 6.0);
    let h = 2.5;
    let epa = |u: f64| (1.0 - (u / h).powi(2)).max(0.0);
    let z = s.confounder();
    let x = rows(&s);
    let mean: Vec<Vec<f64>> = z
        .iter()
        .map(|&zi| {
            let w: Vec<f64> = z.iter().map(|&zj| epa(zj - zi)).collect();
            let t: f64 = w.iter().sum();
            (0..2)
                .map(|c| w.iter().zip(&x).map(|(wj, xj)| wj * xj[c]).sum::<f64>() / t)
                .collect()
        })
        .collect();
    let grid = EvaluationGrid::linspace(0.5, 5.5, 6).unwrap();
    let spec = KernelSpec::new(KernelFamily::Epanechnikov, h).unwrap();
    let f = ConditionalEstimator::new(
        &s,
        &EstimatorConfig::new(spec, MeanMethod::NadarayaWatson),
        &grid,
    )
    .unwrap()
    .estimate()
    .unwrap();
    for (g, &zg) in grid.points().iter().enumerate() {
        let w: Vec<f64> = z.iter().map(|&zi| epa(zi - zg)).collect();
        let t: f64 = w.iter().sum();
        for k in 0..2 {
            for l in 0..2 {
                let v = (0..z.len())
                    .map(|i| w[i] * (x[i][k] - mean[i][k]) * (x[i][l] - mean[i][l]))
                    .sum::<f64>()
                    / t;
                assert!(close(f.entry(g, k, l), v, 1e-12, 1e-300));
            }
        }
    }
}

#[test]
fn gridded_mean_tracks_exact_mean() {
    let mut r = rng(2);
    let s = random_series(&mut r, 2000, 2, -5.0, 20.0);
    let grid = EvaluationGrid::spanning(&s, 25).unwrap();
    let base = EstimatorConfig::new(KernelSpec::gaussian(1.5).unwrap(), MeanMethod::LocalLinear);
    let exact = ConditionalEstimator::new(&s, &base, &grid)
        .unwrap()
        .estimate()
        .unwrap();
    let gridded = ConditionalEstimator::new(
        &s,
        &base.with_mean_evaluation(MeanEvaluation::Gridded(64)),
        &grid,
    )
    .unwrap()
    .estimate()
    .unwrap();
    for g in 0..25 {
        let scale = (exact.entry(g, 0, 0) * exact.entry(g, 1, 1)).sqrt();
        for k in 0..2 {
            for l in 0..2 {
                assert!((exact.entry(g, k, l) - gridded.entry(g, k, l)).abs() < 1e-3 * scale);
            }
        }
    }
}

/// K-fold score by brute force: contiguous folds, Nadaraya-Watson mean from
/// the training rows, held-out outer products against the training average.
fn naive_cv_score(z: &[f64], x: &[Vec<f64>], h: f64, folds: usize) -> f64 {
    let n = z.len();
    let p = x[0].len();
    let fold = |i: usize| i * folds / n;
    let mut score = 0.0;
    for f in 0..folds {
        let train: Vec<usize> = (0..n).filter(|&i| fold(i) != f).collect();
        let resid: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let den: f64 = train.iter().map(|&j| gauss(z[j] - z[i], h)).sum();
                (0..p)
                    .map(|c| {
                        x[i][c]
                            - train
                                .iter()
                                .map(|&j| gauss(z[j] - z[i], h) * x[j][c])
                                .sum::<f64>()
                                / den
                    })
                    .collect()
            })
            .collect();
        for i in (0..n).filter(|&i| fold(i) == f) {
            let den: f64 = train.iter().map(|&j| gauss(z[j] - z[i], h)).sum();
            for k in 0..p {
                for l in 0..p {
                    let pred = train
                        .iter()
                        .map(|&j| gauss(z[j] - z[i], h) * resid[j][k] * resid[j][l])
                        .sum::<f64>()
                        / den;
                    score += (resid[i][k] * resid[i][l] - pred).powi(2);
                }
            }
        }
    }
    score
}

#[test]
fn cross_validation_rejects_oversmoothing() {
    use condcov::kernel::cv_score;
    use condcov::{select_bandwidth_cv, ConfoundedSeries};
    use rand::Rng;
    let mut r = rng(31);
    let n = 300;
    let z: Vec<f64> = (0..n).map(|_| r.random_range(-5.0..20.0)).collect();
    // variance grows twentyfold across the range, correlation flips sign
    let x = Array2::from_shape_fn((n, 2), |_| r.random_range(-1.0..1.0f64));
    let x = Array2::from_shape_fn((n, 2), |(i, j)| {
        let s = 0.2 + (z[i] + 5.0) * 0.2;
        let rho = if z[i] < 7.0 { 0.9 } else { -0.9 };
        if j == 0 {
            s * x[[i, 0]]
        } else {
            s * (rho * x[[i, 0]] + (1.0 - rho * rho).sqrt() * x[[i, 1]])
        }
    });
    let s = ConfoundedSeries::new((0..n as i64).collect(), x, z.clone()).unwrap();
    let xr = rows(&s);
    let candidates = [0.1, 1.5, 50.0];
    let mut want = Vec::new();
    for &h in &candidates {
        let lib = cv_score(
            &s,
            &KernelSpec::gaussian(h).unwrap(),
            MeanMethod::NadarayaWatson,
            5,
        )
        .unwrap();
        let oracle = naive_cv_score(&z, &xr, h, 5);
        assert!(close(lib, oracle, 1e-9, 0.0), "{h}: {lib} {oracle}");
        want.push(oracle);
    }
    let best = candidates[(0..3).min_by(|&a, &b| want[a].total_cmp(&want[b])).unwrap()];
    let sel = select_bandwidth_cv(
        &s,
        &candidates,
        KernelFamily::Gaussian,
        MeanMethod::NadarayaWatson,
        5,
    )
    .unwrap();
    assert_eq!(sel.bandwidth, best);
    assert_ne!(sel.bandwidth, 50.0);
}
