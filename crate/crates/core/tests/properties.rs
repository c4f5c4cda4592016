use proptest::prelude::*;

use early_exit::analysis::spearman;
use early_exit::calibration::{argmax, calibrated_confidence, Calibration};
use early_exit::routing::{default_thresholds, route_logits, RoutingPolicy};

fn vec_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (3usize..30).prop_flat_map(|n| {
        (
            prop::collection::vec(prop_oneof![(-5i32..5).prop_map(f64::from), -100.0..100.0f64], n),
            prop::collection::vec(prop_oneof![(-5i32..5).prop_map(f64::from), -100.0..100.0f64], n),
        )
    })
}

proptest! {
    #[test]
    fn spearman_is_symmetric((x, y) in vec_pair()) {
        prop_assert_eq!(spearman(&x, &y), spearman(&y, &x));
    }

    #[test]
    fn spearman_ignores_monotone_maps((x, y) in vec_pair()) {
        let fx: Vec<f64> = x.iter().map(|v| (v / 50.0).exp() * 3.0 + 1.0).collect();
        match (spearman(&x, &y), spearman(&fx, &y)) {
            (Ok(a), Ok(b)) => prop_assert!((a - b).abs() < 1e-12),
            (a, b) => prop_assert_eq!(a, b),
        }
    }

    #[test]
    fn spearman_is_bounded((x, y) in vec_pair()) {
        if let Ok(r) = spearman(&x, &y) {
            prop_assert!((-1.0..=1.0).contains(&r));
        }
    }

    #[test]
    fn temperature_keeps_argmax(
        z in prop::collection::vec(-300.0..300.0f64, 2..10),
        log_t in -4.6..4.6f64,
    ) {
        let c = calibrated_confidence(&z, log_t.exp());
        prop_assert_eq!(c.prediction, argmax(&z));
        prop_assert!(c.confidence <= 1.0 && c.confidence * z.len() as f64 >= 1.0 - 1e-12);
    }

    #[test]
    fn exit_index_grows_with_threshold(
        logits in prop::collection::vec(prop::collection::vec(-20.0..20.0f64, 3), 4),
        temps in prop::collection::vec(0.05..20.0f64, 4),
    ) {
        let cal = Calibration::from_temperatures(&temps).unwrap();
        let mut prev = 0;
        for t in default_thresholds() {
            let (exit, _, _) = route_logits(&logits, &cal, RoutingPolicy::new(t).unwrap()).unwrap();
            prop_assert!(exit >= prev);
            prev = exit;
        }
        prop_assert_eq!(prev, 3);
    }
}
