use proptest::prelude::*;

use robquant::Tensor;
use robquant::quantizer::{FitMethod, QuantScheme, fit_params, quantize, quantize_levels, scale_step};

fn weights() -> impl Strategy<Value = (usize, Vec<f64>)> {
    (1usize..5, 1usize..24).prop_flat_map(|(c, n)| (Just(c), prop::collection::vec(-4.0f64..4.0, c * n)))
}

fn fit() -> impl Strategy<Value = FitMethod> {
    prop_oneof![Just(FitMethod::MinMax), Just(FitMethod::AciqAnalytic), Just(FitMethod::MseGrid)]
}

proptest! {
    #[test]
    fn symmetric_quantizer_is_odd_and_idempotent((c, v) in weights(), bits in 2u32..9, fit in fit()) {
        let t = Tensor::new(vec![c, v.len() / c], v).unwrap();
        let s = QuantScheme::weight(bits, 0, fit).unwrap();
        let p = fit_params(&t, &s).unwrap();
        let q = quantize(&t, &p, &s).unwrap();
        let neg = quantize(&t.map(|x| -x), &p, &s).unwrap();
        prop_assert!(q.data().iter().zip(neg.data()).all(|(a, b)| *a == -b));
        prop_assert_eq!(quantize(&q, &p, &s).unwrap(), q);
    }

    #[test]
    fn minmax_round_trip_within_half_step((c, v) in weights(), bits in 2u32..9) {
        let n = v.len() / c;
        let t = Tensor::new(vec![c, n], v).unwrap();
        let s = QuantScheme::weight(bits, 0, FitMethod::MinMax).unwrap();
        let p = fit_params(&t, &s).unwrap();
        let q = quantize(&t, &p, &s).unwrap();
        for (i, (x, y)) in t.data().iter().zip(q.data()).enumerate() {
            prop_assert!((x - y).abs() <= 0.5 * p.step[i / n] * (1.0 + 1e-12));
        }
    }

    #[test]
    fn levels_stay_in_range_and_scale_with_step((c, v) in weights(), bits in 2u32..9, ratio in 0.5f64..2.0) {
        let t = Tensor::new(vec![c, v.len() / c], v).unwrap();
        let s = QuantScheme::weight(bits, 0, FitMethod::MinMax).unwrap();
        let p = scale_step(&fit_params(&t, &s).unwrap(), ratio, &s).unwrap();
        let (lo, hi) = s.level_range();
        prop_assert!(quantize_levels(&t, &p, &s).unwrap().iter().all(|l| (lo..=hi).contains(l)));
    }

    #[test]
    fn activation_grid_holds_zero(v in prop::collection::vec(-3.0f64..5.0, 8..64), bits in 2u32..9) {
        let t = Tensor::from_vec(v);
        let s = QuantScheme::activation(bits).unwrap();
        let p = fit_params(&t, &s).unwrap();
        let z = quantize(&Tensor::from_vec(vec![0.0]), &p, &s).unwrap();
        prop_assert_eq!(z.data()[0], 0.0);
    }
}
