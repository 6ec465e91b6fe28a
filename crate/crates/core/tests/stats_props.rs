use proptest::prelude::*;

use seekit_core::stats::{pearson, permutation_pvalue};

/// Paired samples whose x and y both have visible spread.
fn paired() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (3usize..20)
        .prop_flat_map(|n| {
            (
                prop::collection::vec(-10.0f64..10.0, n),
                prop::collection::vec(-10.0f64..10.0, n),
            )
        })
        .prop_filter("needs spread", |(x, y)| spread(x) > 1e-2 && spread(y) > 1e-2)
}

fn spread(v: &[f64]) -> f64 {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|a| (a - mean).powi(2)).sum::<f64>()
}

proptest! {
    #[test]
    fn pearson_is_bounded_and_symmetric((x, y) in paired()) {
        let r = pearson(&x, &y).unwrap();
        prop_assert!((-1.0..=1.0).contains(&r));
        prop_assert!((r - pearson(&y, &x).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn pearson_is_affine_invariant((x, y) in paired(), a in 0.5f64..5.0, b in -10.0f64..10.0) {
        let r = pearson(&x, &y).unwrap();
        let xs: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        let ys: Vec<f64> = y.iter().map(|v| a * v - b).collect();
        prop_assert!((pearson(&xs, &y).unwrap() - r).abs() < 1e-12);
        prop_assert!((pearson(&x, &ys).unwrap() - r).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn pvalue_is_a_deterministic_probability((x, y) in paired(), seed in any::<u64>()) {
        let p = permutation_pvalue(&x, &y, 1000, seed).unwrap();
        prop_assert!(p > 0.0 && p <= 1.0);
        prop_assert_eq!(p, permutation_pvalue(&x, &y, 1000, seed).unwrap());
    }
}
