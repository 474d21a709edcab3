use proptest::prelude::*;
use shotnoise::simulate::likelihood_weight;
use shotnoise::{ell, poisson_tail_exact, simulate_prm, Control, ShotNoiseModel};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn entropy_inequality(a in 1e-6f64..10.0, b in 1e-6f64..10.0, sigma in 1.0f64..10.0) {
        let rhs = (sigma * a).exp() + ell(b).unwrap() / sigma;
        prop_assert!(a * b <= rhs);
    }

    #[test]
    fn ell_is_nonnegative_and_convex(x in 1e-3f64..50.0, h in 1e-3f64..1.0) {
        let (l, m, r) = (ell(x - h.min(x / 2.0)).unwrap(), ell(x).unwrap(), ell(x + h.min(x / 2.0)).unwrap());
        prop_assert!(m >= 0.0);
        prop_assert!(l + r - 2.0 * m >= -1e-12);
    }

    #[test]
    fn poisson_tail_is_monotone(mean in 0.1f64..200.0, k in 0u64..400) {
        let p0 = poisson_tail_exact(mean, k).unwrap();
        let p1 = poisson_tail_exact(mean, k + 1).unwrap();
        let q = poisson_tail_exact(mean * 1.1, k).unwrap();
        prop_assert!((0.0..=1.0).contains(&p0));
        prop_assert!(p1 <= p0);
        prop_assert!(q >= p0 * (1.0 - 1e-12));
    }

    #[test]
    fn control_json_round_trips(cells in 1usize..6, atoms in 1usize..4, seed in 0.01f64..5.0) {
        let c = Control::from_fn(1.5, cells, atoms, |j, k| seed * (1.0 + j as f64) / (1.0 + k as f64)).unwrap();
        let back = Control::from_json(&c.to_json().unwrap()).unwrap();
        prop_assert_eq!(c, back);
    }

    #[test]
    fn shots_are_deterministic_and_clamped(t in 0.0f64..5.0, x in 0.0f64..30.0, eps in 1e-3f64..1.0) {
        let m = ShotNoiseModel::from_json_str(r#"{"d":1,"T":1.0,
            "atoms":[{"id":"a","payload":[1.0],"weight":1.0}],
            "shape":{"family":"exponential","params":{"beta":1.5}},
            "value":{"family":"affine","params":{"matrix":[[1.0]]}}}"#).unwrap();
        let y1 = m.evaluate_shot(eps, t, 0, &[x]).unwrap();
        let y2 = m.evaluate_shot(eps, t, 0, &[x]).unwrap();
        prop_assert_eq!(&y1, &y2);
        prop_assert!(y1[0] >= 0.0);
    }

    #[test]
    fn unit_control_has_unit_weight(seed in any::<u64>(), eps in 0.05f64..1.0) {
        let m = ShotNoiseModel::unit_poisson();
        let g = Control::unit(1.0, 1).unwrap();
        let ev = simulate_prm(m.marks(), 1.0, eps, Some(&g), seed, 0).unwrap();
        let again = simulate_prm(m.marks(), 1.0, eps, None, seed, 0).unwrap();
        prop_assert_eq!(&ev.events, &again.events);
        prop_assert!((likelihood_weight(&ev, &g, m.marks(), 1.0).unwrap() - 1.0).abs() < 1e-12);
    }
}
