use proptest::prelude::*;
use qa_core::eval::{pearson, spearman, t_test_p, Correlation};

fn paired(len: std::ops::Range<usize>) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    len.prop_flat_map(|n| {
        let v = prop::collection::vec((-50i32..50).prop_map(f64::from), n);
        (v.clone(), v)
    })
}

fn r_close(a: &Correlation, b: &Correlation, tol: f64) -> bool {
    match (a, b) {
        (Correlation::Value { r: x, .. }, Correlation::Value { r: y, .. }) => (x - y).abs() <= tol,
        _ => a == b,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn spearman_is_rank_invariant((x, y) in paired(2..40)) {
        let f = |v: &f64| v * v * v + 7.0 * v;
        let g = |v: &f64| (v / 7.0).exp();
        let fx: Vec<f64> = x.iter().map(f).collect();
        let gy: Vec<f64> = y.iter().map(g).collect();
        prop_assert_eq!(spearman(&x, &y).unwrap(), spearman(&fx, &gy).unwrap());
    }

    #[test]
    fn pearson_is_affine_invariant((x, y) in paired(2..40), a in 0.1f64..10.0, b in -100.0f64..100.0) {
        let ax: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        let (before, after) = (pearson(&x, &y).unwrap(), pearson(&ax, &y).unwrap());
        prop_assert!(r_close(&before, &after, 1e-12), "{before:?} vs {after:?}");
    }

    #[test]
    fn correlations_are_symmetric((x, y) in paired(2..40)) {
        prop_assert_eq!(pearson(&x, &y).unwrap().r(), pearson(&y, &x).unwrap().r());
        prop_assert_eq!(spearman(&x, &y).unwrap().r(), spearman(&y, &x).unwrap().r());
    }

    #[test]
    fn p_decreases_as_r_grows(a in -0.999f64..0.999, b in -0.999f64..0.999, n in 3usize..200) {
        let (lo, hi) = if a.abs() <= b.abs() { (a, b) } else { (b, a) };
        let (p_lo, p_hi) = (t_test_p(lo, n).unwrap(), t_test_p(hi, n).unwrap());
        prop_assert!(p_hi <= p_lo, "|r| {lo} -> p {p_lo}, |r| {hi} -> p {p_hi}");
        prop_assert!((0.0..=1.0).contains(&p_lo));
    }
}
