use proptest::prelude::*;
use stbalance::metrics::{kge, mae, mnse, pcc, pnse, r2, rmse, MetricSuite};

fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (3usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec(1.0f64..100.0, n),
            prop::collection::vec(-20.0f64..20.0, n),
        )
            .prop_map(|(y, noise)| {
                let p = y.iter().zip(&noise).map(|(a, e)| a + e).collect();
                (y, p)
            })
    })
}

proptest! {
    #[test]
    fn pcc_is_affine_invariant_but_kge_is_not((y, p) in pair(), a in 0.1f64..10.0, b in -50.0f64..50.0) {
        prop_assume!(pcc(&y, &p).is_ok());
        let q: Vec<f64> = p.iter().map(|v| a * v + b).collect();
        prop_assert!((pcc(&y, &p).unwrap() - pcc(&y, &q).unwrap()).abs() < 1e-9);
        if (a - 1.0).abs() > 0.05 || b.abs() > 1.0 {
            let k1 = kge(&y, &p).unwrap();
            let k2 = kge(&y, &q).unwrap();
            prop_assert!((k1 - k2).abs() > 1e-9, "kge unchanged under {}x + {}", a, b);
        }
    }

    #[test]
    fn error_scores_are_ordered((y, p) in pair()) {
        let m = mae(&y, &p).unwrap();
        let r = rmse(&y, &p).unwrap();
        prop_assert!(m >= 0.0 && m <= r + 1e-12);
        prop_assert!(r2(&y, &p).unwrap() <= 1.0);
        prop_assert!(mnse(&y, &p).unwrap() <= 1.0);
        prop_assert!(kge(&y, &p).unwrap() <= 1.0);
    }

    #[test]
    fn suite_matches_individual_scores((y, p) in pair()) {
        let n = y.len();
        let s = MetricSuite::compute(&y, &p, n, 0.0).unwrap();
        prop_assert_eq!(s.mae, mae(&y, &p).unwrap());
        prop_assert_eq!(s.rmse, rmse(&y, &p).unwrap());
        prop_assert_eq!(s.r2, r2(&y, &p).unwrap());
        prop_assert_eq!(s.kge, kge(&y, &p).unwrap());
        prop_assert_eq!(s.mnse, mnse(&y, &p).unwrap());
        prop_assert_eq!(s.pnse, pnse(&y, &p, n, 0.0).unwrap());
        prop_assert_eq!(s.pnse, if s.r2 > 0.0 { 1.0 } else { 0.0 });
    }
}

#[test]
fn perfect_forecast_scores() {
    let y = [3.0, 1.0, 4.0, 1.0, 5.0, 9.0];
    let s = MetricSuite::compute(&y, &y, 3, 0.0).unwrap();
    assert_eq!((s.mae, s.rmse), (0.0, 0.0));
    assert!((s.pcc - 1.0).abs() < 1e-12);
    assert_eq!((s.r2, s.kge, s.mnse, s.pnse), (1.0, 1.0, 1.0, 1.0));
    assert!(s.undefined.is_empty());
}

#[test]
fn pnse_counts_nodes_above_threshold() {
    // Node 0 perfect, node 1 predicted by its mean (NSE exactly 0).
    let y = [1.0, 2.0, 3.0, 4.0, 6.0, 8.0];
    let p = [1.0, 2.0, 3.0, 6.0, 6.0, 6.0];
    assert_eq!(pnse(&y, &p, 3, 0.0).unwrap(), 0.5);
    assert_eq!(pnse(&y, &p, 3, -0.1).unwrap(), 1.0);
    assert!(pnse(&y, &p, 4, 0.0).is_err());
}

#[test]
fn length_mismatch_names_the_metric() {
    let err = rmse(&[1.0, 2.0], &[1.0]).unwrap_err();
    assert!(err.to_string().contains("rmse"), "{err}");
}
