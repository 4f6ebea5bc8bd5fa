use ardiff::schedule::NoiseSchedule;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn linear_schedule_invariants(t in 1usize..400, start in 1e-5f64..0.05, span in 0.0f64..0.3) {
        let end = (start + span).min(0.9);
        let s = NoiseSchedule::linear(t, start, end).unwrap();
        prop_assert_eq!(s.beta(1), start);
        prop_assert_eq!(s.beta(t), end);
        prop_assert_eq!(s.alpha_bar(0), 1.0);
        for k in 1..=t {
            prop_assert!(s.beta(k) > 0.0 && s.beta(k) < 1.0);
            prop_assert!(s.alpha_bar(k) < s.alpha_bar(k - 1));
            let rel = (s.alpha_bar(k) - s.alpha_bar(k - 1) * (1.0 - s.beta(k))).abs() / s.alpha_bar(k);
            prop_assert!(rel <= 1e-12);
        }
    }

    #[test]
    fn eps_roundtrip(t in 1usize..100, x in proptest::collection::vec(-2.0f64..2.0, 4), e in proptest::collection::vec(-3.0f64..3.0, 4)) {
        let s = NoiseSchedule::linear(100, 1e-3, 0.05).unwrap();
        let zt = s.corrupt(&x, t, &e).unwrap();
        let back = s.eps_from_x0(&zt, &x, t).unwrap();
        for (a, b) in back.iter().zip(&e) {
            prop_assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn ddim_hits_corruption_of_prediction(t in 2usize..50, x in proptest::collection::vec(-2.0f64..2.0, 3), e in proptest::collection::vec(-3.0f64..3.0, 3)) {
        let s = NoiseSchedule::linear(50, 1e-3, 0.05).unwrap();
        let zt = s.corrupt(&x, t, &e).unwrap();
        let tp = t / 2;
        let a = s.ddim_step(&zt, &x, t, tp).unwrap();
        let b = s.corrupt(&x, tp, &e).unwrap();
        for (p, q) in a.iter().zip(&b) {
            prop_assert!((p - q).abs() < 1e-9);
        }
    }
}

#[test]
fn posterior_at_one_is_prediction() {
    let s = NoiseSchedule::default_linear(1000).unwrap();
    let x0 = [0.25, -1.5];
    assert_eq!(s.posterior_step(&[3.0, 4.0], &x0, 1, &[9.0, -9.0]).unwrap(), x0);
    assert_eq!(s.posterior_variance(1), 0.0);
}
