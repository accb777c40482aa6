use approx::assert_relative_eq;
use mmq_core::experiments::round_sig;
use mmq_core::importance::{
    fit_random_forest, impurity_importance, percentages, round_preserving_sum, shapley_values, AttributionDataset,
    ForestConfig,
};
use mmq_core::quantizers::{rtn_group_quantize, uniform_quantize};
use mmq_core::{Matrix, Matrix64};
use proptest::prelude::*;

fn matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Matrix64> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-1e3f64..1e3, r * c).prop_map(move |d| Matrix64::new(r, c, d).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn uniform_codes_stay_in_range(w in matrix(6, 12), bits in 2u8..=16) {
        let q = uniform_quantize(&w, bits).unwrap();
        let max = ((1u32 << bits) - 1) as u16;
        prop_assert!(q.codes().iter().all(|&c| c <= max));
        let (lo, hi) = w.min_max();
        let step = (hi - lo) / max as f64;
        let d = q.dequantize();
        for (a, b) in w.data().iter().zip(d.data()) {
            prop_assert!(*b >= lo - 1e-9 && *b <= hi + 1e-9);
            prop_assert!((a - b).abs() <= step / 2.0 + 1e-9 * (hi - lo).max(1.0));
        }
    }

    #[test]
    fn group_error_is_bounded_per_group(w in matrix(4, 20), bits in 2u8..=8, group in 1usize..8) {
        let q = rtn_group_quantize(&w, bits, group).unwrap();
        let d = q.dequantize();
        let max = ((1u32 << bits) - 1) as f64;
        if group >= w.len() {
            prop_assert_eq!(q, uniform_quantize(&w, bits).unwrap());
            return Ok(());
        }
        for r in 0..w.rows() {
            for (chunk, deq) in w.row(r).chunks(group).zip(d.row(r).chunks(group)) {
                let lo = chunk.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = chunk.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                for (a, b) in chunk.iter().zip(deq) {
                    prop_assert!((a - b).abs() <= (hi - lo) / (2.0 * max) + 1e-9 * (hi - lo).max(1.0));
                }
            }
        }
    }

    #[test]
    fn f32_and_f64_agree_on_codes(data in prop::collection::vec(-10.0f32..10.0, 24), bits in 2u8..=8) {
        let w32 = Matrix::new(4, 6, data.clone()).unwrap();
        let w64 = Matrix64::new(4, 6, data.iter().map(|&v| v as f64).collect()).unwrap();
        let (a, b) = (uniform_quantize(&w32, bits).unwrap(), uniform_quantize(&w64, bits).unwrap());
        prop_assert_eq!(a.codes(), b.codes());
    }

    #[test]
    fn percentages_sum_to_one_hundred(values in prop::collection::vec(0.0f64..1e6, 1..8)) {
        let (p, degenerate) = percentages(&values);
        prop_assert_eq!(degenerate, values.iter().all(|&v| v == 0.0));
        assert_relative_eq!(p.iter().sum::<f64>(), 100.0, max_relative = 1e-12);
    }

    #[test]
    fn rounding_preserves_the_total(values in prop::collection::vec(0.0f64..100.0, 1..6)) {
        let total: f64 = values.iter().sum();
        let scaled: Vec<f64> = values.iter().map(|v| 100.0 * v / total.max(1e-300)).collect();
        prop_assume!(total > 0.0);
        let rounded = round_preserving_sum(&scaled, 2);
        let cents: i64 = rounded.iter().map(|v| (v * 100.0).round() as i64).sum();
        prop_assert_eq!(cents, 10_000);
        for (r, v) in rounded.iter().zip(&scaled) {
            prop_assert!((r - v).abs() < 0.01 + 1e-9);
        }
    }

    #[test]
    fn round_sig_is_idempotent(x in prop::num::f64::NORMAL) {
        let once = round_sig(x);
        prop_assert_eq!(round_sig(once), once);
        prop_assert!((once - x).abs() <= 1e-5 * x.abs());
    }
}

fn dataset(rows: Vec<(f64, f64, f64)>) -> AttributionDataset {
    let x: Vec<Vec<f64>> = rows.iter().map(|&(a, b, _)| vec![a, b, 1.0]).collect();
    let y = rows.iter().map(|&(_, _, t)| t).collect();
    AttributionDataset::new(vec!["a".into(), "b".into(), "flat".into()], x, y).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn shapley_efficiency_and_null_player(
        rows in prop::collection::vec((0.0f64..16.0, 0.0f64..16.0, -1.0f64..1.0), 10..20),
        seed in any::<u64>(),
    ) {
        let data = dataset(rows);
        let forest = fit_random_forest(&data, ForestConfig { n_trees: 5, seed, ..ForestConfig::default() }).unwrap();
        let phi = shapley_values(&forest, &data).unwrap();
        let base = data.rows.iter().map(|r| forest.predict(r)).sum::<f64>() / data.len() as f64;
        for (x, p) in data.rows.iter().zip(&phi) {
            prop_assert!((p.iter().sum::<f64>() - (forest.predict(x) - base)).abs() < 1e-9);
            prop_assert_eq!(p[2], 0.0);
        }
    }

    #[test]
    fn impurity_shares_ignore_target_scale(
        rows in prop::collection::vec((0.0f64..16.0, 0.0f64..16.0, -1.0f64..1.0), 12..24),
        c in 0.1f64..100.0,
    ) {
        let data = dataset(rows);
        let config = ForestConfig { n_trees: 8, ..ForestConfig::default() };
        let a = impurity_importance(&fit_random_forest(&data, config).unwrap());
        let b = impurity_importance(&fit_random_forest(&data.scaled(c), config).unwrap());
        for (x, y) in a.features.iter().zip(&b.features) {
            prop_assert!((x.pct - y.pct).abs() < 1e-6, "{:?} {:?}", x, y);
        }
    }
}
