mod common;

use common::*;
use condcov::bootstrap::{build_block_plan, resample_counts, resample_series, BlockSpan};
use condcov::data::min_eigenvalue;
use condcov::data::MissingMask;
use condcov::io::{from_structured, to_structured};
use condcov::rng::substream;
use condcov::{
    confidence_band, correlation_to_covariance, correlation_with_gaps, fill_missing_linear,
    BlockMode, ConditionalEstimator, ConfoundedSeries, EstimatorConfig, EvaluationGrid,
    ExportMetadata, ExportRow, ExportTable, FieldKind, KernelFamily, KernelSpec, MeanMethod,
    Statistic,
};
use ndarray::Array2;
use proptest::prelude::*;

fn series_from(z: &[f64], x: &[(f64, f64)]) -> ConfoundedSeries {
    let outputs =
        Array2::from_shape_fn((z.len(), 2), |(i, j)| if j == 0 { x[i].0 } else { x[i].1 });
    ConfoundedSeries::new(
        (0..z.len() as i64).map(|i| i * 3600).collect(),
        outputs,
        z.to_vec(),
    )
    .unwrap()
}

fn data(max: usize) -> impl Strategy<Value = (Vec<f64>, Vec<(f64, f64)>)> {
    (8..max).prop_flat_map(|n| {
        (
            prop::collection::vec(-10.0..30.0f64, n),
            prop::collection::vec((-5.0..5.0f64, -50.0..50.0f64), n),
        )
    })
}

fn kernel() -> impl Strategy<Value = KernelSpec> {
    (
        prop_oneof![
            Just(KernelFamily::Gaussian),
            Just(KernelFamily::Epanechnikov)
        ],
        0.5..20.0f64,
    )
        .prop_map(|(f, h)| KernelSpec::new(f, h).unwrap())
}

fn method() -> impl Strategy<Value = MeanMethod> {
    prop_oneof![
        Just(MeanMethod::NadarayaWatson),
        Just(MeanMethod::LocalLinear)
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn fields_are_symmetric_and_psd((z, x) in data(60), spec in kernel(), m in method()) {
        let s = series_from(&z, &x);
        let grid = EvaluationGrid::spanning(&s, 12).unwrap();
        if let Ok(f) = ConditionalEstimator::new(&s, &EstimatorConfig::new(spec, m), &grid).unwrap().estimate() {
            for g in 0..grid.len() {
                let a = f.matrix(g);
                let trace = a[[0, 0]] + a[[1, 1]];
                prop_assert!((a[[0, 1]] - a[[1, 0]]).abs() <= 1e-12);
                prop_assert!(min_eigenvalue(a) >= -1e-10 * trace);
            }
        }
    }

    #[test]
    fn row_order_does_not_matter((z, x) in data(40), spec in kernel(), m in method(), seed: u64) {
        let s = series_from(&z, &x);
        let mut order: Vec<usize> = (0..z.len()).collect();
        let mut r = rng(seed);
        for i in (1..order.len()).rev() {
            order.swap(i, rand::Rng::random_range(&mut r, 0..=i));
        }
        let zp: Vec<f64> = order.iter().map(|&i| z[i]).collect();
        let xp: Vec<(f64, f64)> = order.iter().map(|&i| x[i]).collect();
        let shuffled = series_from(&zp, &xp);
        let grid = EvaluationGrid::spanning(&s, 6).unwrap();
        let cfg = EstimatorConfig::new(spec, m);
        let a = ConditionalEstimator::new(&s, &cfg, &grid).unwrap().estimate();
        let b = ConditionalEstimator::new(&shuffled, &cfg, &grid).unwrap().estimate();
        let xmax = x.iter().map(|p| p.0.abs().max(p.1.abs())).fold(0.0, f64::max);
        if let (Ok(a), Ok(b)) = (a, b) {
            for g in 0..6 {
                let scale = a.entry(g, 0, 0).max(a.entry(g, 1, 1)).max(1e-300);
                for (u, v) in a.matrix(g).iter().zip(b.matrix(g).iter()) {
                    prop_assert!((u - v).abs() <= 1e-12 * scale.max(u.abs()) + 1e-14 * xmax * xmax, "{u} {v}");
                }
            }
        }
    }

    #[test]
    fn disjoint_plans_partition_rows(n in 2usize..400, len in 1usize..50) {
        let s = series_from(&vec![0.0; n], &vec![(0.0, 0.0); n]);
        match build_block_plan(&s, BlockMode::Disjoint, BlockSpan::Rows(len)) {
            Ok(plan) => {
                let all: Vec<usize> = plan.blocks().iter().flat_map(|b| b.clone()).collect();
                prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            }
            Err(_) => prop_assert!(len > n),
        }
    }

    #[test]
    fn moving_plans_hold_every_window(n in 2usize..400, tau in 1usize..50) {
        let s = series_from(&vec![0.0; n], &vec![(0.0, 0.0); n]);
        match build_block_plan(&s, BlockMode::Moving, BlockSpan::Rows(tau)) {
            Ok(plan) => {
                prop_assert_eq!(plan.len(), n - tau);
                for (k, b) in plan.blocks().iter().enumerate() {
                    prop_assert_eq!(b.clone(), k..k + tau + 1);
                }
            }
            Err(_) => prop_assert!(tau >= n),
        }
    }

    #[test]
    fn replicates_have_n_rows(n in 30usize..300, span in 1usize..29, moving: bool, seed: u64) {
        let z: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let s = series_from(&z, &vec![(1.0, 2.0); n]);
        let mode = if moving { BlockMode::Moving } else { BlockMode::Disjoint };
        let plan = build_block_plan(&s, mode, BlockSpan::Rows(span)).unwrap();
        let r = resample_series(&s, &plan, &mut substream(seed, 0)).unwrap();
        prop_assert_eq!(r.n(), n);
        let counts = resample_counts(&plan, &mut substream(seed, 0));
        prop_assert_eq!(counts.iter().sum::<f64>(), n as f64);
        // the same draws, viewed as multiplicities
        let mut seen = vec![0.0; n];
        for &v in r.confounder() {
            seen[v as usize] += 1.0;
        }
        prop_assert_eq!(seen, counts);
    }

    #[test]
    fn correlation_round_trips((z, x) in data(60), spec in kernel()) {
        let s = series_from(&z, &x);
        let grid = EvaluationGrid::spanning(&s, 8).unwrap();
        let cfg = EstimatorConfig::new(spec, MeanMethod::NadarayaWatson);
        if let Ok(f) = ConditionalEstimator::new(&s, &cfg, &grid).unwrap().estimate() {
            let r = correlation_with_gaps(&f).unwrap();
            prop_assert!(r.invariant_violation().is_none());
            if r.gaps().is_empty() {
                let back = correlation_to_covariance(&r, &f.variances()).unwrap();
                for (a, b) in back.values().iter().zip(f.values()) {
                    prop_assert!((a - b).abs() <= 1e-10 * b.abs().max(1e-12));
                }
            }
        }
    }

    #[test]
    fn interpolation_keeps_observed_cells_and_stays_between_neighbours(
        values in prop::collection::vec(prop::option::weighted(0.7, -100.0..100.0f64), 3..60),
    ) {
        prop_assume!(values.iter().any(|v| v.is_some()));
        let n = values.len();
        let col: Vec<f64> = values.iter().map(|v| v.unwrap_or(f64::NAN)).collect();
        let outputs = Array2::from_shape_fn((n, 1), |(i, _)| col[i]);
        let mask = MissingMask {
            outputs: Array2::from_shape_fn((n, 1), |(i, _)| values[i].is_none()),
            confounder: vec![false; n],
        };
        let raw = ConfoundedSeries::with_missing((0..n as i64).collect(), outputs, vec![0.0; n], mask).unwrap();
        let filled = fill_missing_linear(&raw).unwrap();
        let lo = col.iter().copied().filter(|v| v.is_finite()).fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
        for (i, obs) in values.iter().enumerate() {
            let v = filled.outputs()[[i, 0]];
            match *obs {
                Some(obs) => prop_assert_eq!(v, obs),
                None => prop_assert!(v >= lo && v <= hi),
            }
        }
        // a dense series is left alone
        let again = fill_missing_linear(&filled).unwrap();
        prop_assert_eq!(again.outputs(), filled.outputs());
    }

    #[test]
    fn structured_export_round_trips(
        g in 1usize..6,
        vals in prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::ZERO, 30),
    ) {
        let grid: Vec<f64> = (0..g).map(|i| i as f64 * 0.5 - 1.0).collect();
        let mut rows = Vec::new();
        let mut it = vals.iter().cycle();
        for &z in &grid {
            for (k, l) in [(1, 1), (1, 2), (2, 2)] {
                rows.push(ExportRow {
                    z,
                    k,
                    l,
                    estimate: Some(*it.next().unwrap()),
                    sd: Some(it.next().unwrap().abs()),
                    lower: Some(*it.next().unwrap()),
                    upper: Some(*it.next().unwrap()),
                });
            }
        }
        let table = ExportTable { rows };
        let meta = ExportMetadata::for_field(FieldKind::Covariance, 1.5);
        let (back, meta_back) = from_structured(&to_structured(&table, &meta).unwrap()).unwrap();
        prop_assert_eq!(&back, &table);
        prop_assert_eq!(meta_back, meta);
        prop_assert_eq!(ExportTable::from_delimited(&table.to_delimited()).unwrap(), table);
    }

    #[test]
    fn wider_level_nests_narrower(
        est in prop::collection::vec(-10.0..10.0f64, 5),
        reps in prop::collection::vec(prop::collection::vec(-10.0..10.0f64, 5), 2..40),
        a in 0.001..0.5f64,
        b in 0.001..0.5f64,
    ) {
        let grid = EvaluationGrid::linspace(0.0, 1.0, 5).unwrap();
        let st = Statistic { kind: FieldKind::Covariance, k: 0, l: 0 };
        let (wide, narrow) = (a.min(b), a.max(b));
        let w = confidence_band(&grid, st, &est, &reps, wide).unwrap();
        let nb = confidence_band(&grid, st, &est, &reps, narrow).unwrap();
        for (pw, pn) in w.points.iter().zip(&nb.points) {
            let (pw, pn) = (pw.unwrap(), pn.unwrap());
            prop_assert!(pw.lower <= pn.lower && pn.upper <= pw.upper);
            let asym = (pw.upper - pw.estimate) - (pw.estimate - pw.lower);
            prop_assert!(asym.abs() <= 1e-12 * pw.width().max(1.0));
        }
    }
}

#[test]
fn calendar_plans_partition_uneven_days() {
    let mut r = rng(4);
    let mut ts = Vec::new();
    let mut t = 7_200;
    for _ in 0..500 {
        t += 1_800 + (rand::Rng::random_range(&mut r, 0..6) * 1_800) as i64;
        ts.push(t);
    }
    let n = ts.len();
    let s = ConfoundedSeries::new(ts.clone(), Array2::zeros((n, 1)), vec![0.0; n]).unwrap();
    let plan = build_block_plan(&s, BlockMode::Disjoint, BlockSpan::Day).unwrap();
    let all: Vec<usize> = plan.blocks().iter().flat_map(|b| b.clone()).collect();
    assert_eq!(all, (0..n).collect::<Vec<_>>());
    for b in plan.blocks() {
        let day = ts[b.start] / 86_400;
        assert!(b.clone().all(|i| ts[i] / 86_400 == day));
    }
    let moving = build_block_plan(&s, BlockMode::Moving, BlockSpan::Day).unwrap();
    let width = moving.blocks()[0].len();
    assert_eq!(moving.len(), n - (width - 1));
    assert!(moving.blocks().iter().all(|b| b.len() == width));
}
