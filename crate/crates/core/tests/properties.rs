//! Property tests for structural invariants of splines, gadgets, schedules,
//! network serialization and reports.

use hoflow::bspline::cardinal_bspline;
use hoflow::harness::config::ExperimentConfig;
use hoflow::harness::report::{CheckResult, ExperimentReport};
use hoflow::relunet::{build_clip, build_mult, build_recip, ReluNetwork};
use hoflow::schedule::{Schedule, TimeGrid};
use proptest::prelude::*;

fn finite_or_special() -> impl Strategy<Value = f64> {
    prop_oneof![
        8 => -1e6f64..1e6,
        1 => Just(f64::NAN),
        1 => Just(f64::INFINITY),
        1 => Just(f64::NEG_INFINITY),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cardinal_splines_partition_unity(ell in 0usize..5, x in -3.0f64..3.0) {
        let mut sum = 0.0;
        for j in -10i64..10 {
            let v = cardinal_bspline(ell, x - j as f64);
            prop_assert!(v >= 0.0);
            sum += v;
        }
        prop_assert!((sum - 1.0).abs() <= 1e-12, "sum {sum}");
    }

    #[test]
    fn clip_is_exact(x in prop::collection::vec(-5.0f64..5.0, 3), a in -2.0f64..0.0, w in 0.1f64..3.0) {
        let lo = vec![a; 3];
        let hi = vec![a + w; 3];
        let net = build_clip(3, &lo, &hi).unwrap();
        let y = net.eval(&x).unwrap();
        for i in 0..3 {
            prop_assert!((y[i] - x[i].clamp(lo[i], hi[i])).abs() <= 1e-12);
        }
    }

    #[test]
    fn recip_within_accuracy(eps in 0.02f64..0.1, u in 0.0f64..1.0) {
        let net = build_recip(eps).unwrap();
        let x = eps * (1.0 / (eps * eps)).powf(u);
        let y = net.eval(&[x]).unwrap()[0];
        prop_assert!((y - 1.0 / x).abs() <= eps, "x {x} y {y}");
    }

    #[test]
    fn mult_absorbs_zero_and_is_accurate(x in prop::collection::vec(-1.0f64..1.0, 3), zero in 0usize..3) {
        let eps = 1e-2;
        let net = build_mult(3, 1.0, eps).unwrap();
        let y = net.eval(&x).unwrap()[0];
        prop_assert!((y - x.iter().product::<f64>()).abs() <= eps);
        let mut z = x.clone();
        z[zero] = 0.0;
        prop_assert_eq!(net.eval(&z).unwrap()[0], 0.0);
    }

    #[test]
    fn compose_matches_staged_evaluation(x in prop::collection::vec(-1.5f64..1.5, 2)) {
        let inner = build_clip(2, &[-1.0, -1.0], &[1.0, 1.0]).unwrap();
        let outer = build_mult(2, 1.0, 1e-2).unwrap();
        let net = ReluNetwork::compose(&outer, &inner).unwrap();
        let staged = outer.eval(&inner.eval(&x).unwrap()).unwrap();
        let direct = net.eval(&x).unwrap();
        prop_assert!((staged[0] - direct[0]).abs() <= 1e-12);
        prop_assert_eq!(net.depth(), outer.depth() + inner.depth() - 1);
    }

    #[test]
    fn network_text_round_trip(eps in 0.02f64..0.1, x in 0.02f64..50.0) {
        let net = build_recip(eps).unwrap();
        let back = ReluNetwork::from_text(&net.to_text()).unwrap();
        prop_assert_eq!(back.to_text(), net.to_text());
        prop_assert_eq!(back.eval(&[x]).unwrap()[0].to_bits(), net.eval(&[x]).unwrap()[0].to_bits());
    }

    #[test]
    fn rebased_schedule_preserves_marginal_variance(t_star in 0.05f64..0.3, u in 0.0f64..1.0) {
        let base = Schedule::rectified();
        let r = base.rebase(t_star).unwrap();
        let (_, a_star, b_star) = r.rebase_anchor().unwrap();
        let t = 2.0 * t_star + (0.999 - 2.0 * t_star) * u;
        let s = base.eval(t).unwrap();
        let q = r.eval(t).unwrap();
        prop_assert!((q.beta - s.beta / b_star).abs() <= 1e-12);
        let var = q.alpha * q.alpha + q.beta * q.beta * a_star * a_star;
        prop_assert!((var - s.alpha * s.alpha).abs() <= 1e-12);
    }

    #[test]
    fn time_grid_is_ordered(n in 4usize..4096, d in 1usize..4, r0 in 1.0f64..3.0) {
        if let Ok(g) = TimeGrid::new(r0, 0.05, n, d, 0.5) {
            let p = g.partition();
            prop_assert_eq!(p[0], g.t0());
            prop_assert!(p.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(*p.last().unwrap() <= 1.0);
        }
    }

    #[test]
    fn config_hash_is_a_function_of_content(seed in any::<u64>(), n in 8usize..512) {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = seed;
        cfg.grid.n = n;
        let back = ExperimentConfig::from_text(&cfg.to_text()).unwrap();
        prop_assert_eq!(back.hash(), cfg.hash());
        let mut other = cfg.clone();
        other.seed = seed.wrapping_add(1);
        prop_assert_ne!(other.hash(), cfg.hash());
    }

    #[test]
    fn report_json_round_trip(vals in prop::collection::vec((finite_or_special(), finite_or_special()), 1..6)) {
        let mut rep = ExperimentReport::new("verify", &ExperimentConfig::default());
        for (i, (v, b)) in vals.iter().enumerate() {
            rep.checks.push(CheckResult::new("s", &format!("c{i}"), v <= b, *v, *b).with_constant(*v));
        }
        rep.settle();
        let text = rep.to_json().unwrap();
        let back = ExperimentReport::from_json(&text).unwrap();
        prop_assert_eq!(back.to_json().unwrap(), text);
        for (c, (v, _)) in back.checks.iter().zip(&vals) {
            prop_assert!(c.value.to_bits() == v.to_bits() || (c.value.is_nan() && v.is_nan()));
        }
    }
}
