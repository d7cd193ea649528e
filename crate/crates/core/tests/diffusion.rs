mod common;

use common::*;
use dpg_core::diffusion::{forward_diffuse, predict_x0, DiffusionSchedule, ScheduleKind};
use dpg_core::numerics::{gaussian, RngStream, Tensor};
use proptest::prelude::*;

fn schedule() -> impl Strategy<Value = DiffusionSchedule> {
    (2usize..300, 1e-5f64..1e-3, 0.01f64..0.2)
        .prop_map(|(n, lo, hi)| DiffusionSchedule::new(n, lo, hi, ScheduleKind::Linear).unwrap())
}

proptest! {
    #[test]
    fn clean_sample_error_matches_weighted_noise_error(s in schedule(), seed in any::<u64>()) {
        let r = &mut rng(seed, "eq");
        let (lhs, rhs) = lookahead_identity(&s, r, 3);
        prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()));
    }

    #[test]
    fn forward_then_predict_round_trips(s in schedule(), seed in any::<u64>(), t_frac in 0.0f64..1.0) {
        let r = &mut rng(seed, "round-trip");
        let t = ((s.len() - 1) as f64 * t_frac) as usize;
        let x0 = gaussian(r, &[1, 4]);
        let z = gaussian(r, &[1, 4]);
        let x_t = forward_diffuse(&x0, t, &z, &s).unwrap();
        let back = predict_x0(&x_t, &z, t, &s).unwrap();
        // Absolute tolerance scales with 1/sqrt(alpha_bar) amplification.
        let tol = 1e-12 / s.alpha_bar(t).sqrt() * 8.0;
        for (a, b) in back.data().iter().zip(x0.data()) {
            prop_assert!((a - b).abs() <= tol.max(1e-12), "{a} vs {b}");
        }
    }
}

#[test]
fn round_trip_on_default_schedule_is_exact_to_1e12() {
    let s = DiffusionSchedule::new(100, 1e-4, 0.02, ScheduleKind::Linear).unwrap();
    let r = &mut rng(1, "default-round-trip");
    for t in 0..s.len() {
        let x0 = gaussian(r, &[1, 8]);
        let z = gaussian(r, &[1, 8]);
        let back = predict_x0(&forward_diffuse(&x0, t, &z, &s).unwrap(), &z, t, &s).unwrap();
        let err = back.sub(&x0).unwrap().data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err <= 1e-12, "t={t}: {err:e}");
    }
}

#[test]
fn forward_marginals_match_theory() {
    let s = DiffusionSchedule::new(100, 1e-3, 0.2, ScheduleKind::Linear).unwrap();
    let n = 100_000;
    let x0 = Tensor::row(vec![1.5, -0.5]).unwrap();
    for t in [0, 10, 50, 99] {
        let ab = s.alpha_bar(t);
        let stream = RngStream::new(t as u64, "marginal");
        let mut sum = [0.0; 2];
        let mut sq = [0.0; 2];
        for i in 0..n {
            let z = gaussian(&mut stream.rng_at(i), &[1, 2]);
            let x = forward_diffuse(&x0, t, &z, &s).unwrap();
            for k in 0..2 {
                sum[k] += x.data()[k];
                sq[k] += x.data()[k] * x.data()[k];
            }
        }
        for k in 0..2 {
            let mean = sum[k] / n as f64;
            let var = sq[k] / n as f64 - mean * mean;
            let want_mean = ab.sqrt() * x0.data()[k];
            let want_var = 1.0 - ab;
            let se_mean = (want_var / n as f64).sqrt();
            // Variance of the sample variance of a Gaussian is 2 sigma^4 / n.
            // Sixteen checks share one tolerance, hence four standard errors.
            let se_var = (2.0 * want_var * want_var / n as f64).sqrt();
            assert!(
                (mean - want_mean).abs() <= 4.0 * se_mean,
                "t={t} mean {mean} vs {want_mean}"
            );
            assert!((var - want_var).abs() <= 4.0 * se_var, "t={t} var {var} vs {want_var}");
        }
    }
}
