use basinlab::scalinglaw::{
    confident_fraction, entropy_cutoff, entropy_of_gap, fit_law, gap_stats, predict_log_c, BackgroundModel, LawPoint,
};
use basinlab::seed::rng_for;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::Exp;

fn backgrounds() -> [BackgroundModel; 3] {
    [BackgroundModel::TwoClassExact, BackgroundModel::TwoClassApprox, BackgroundModel::calibrated_flat_tail()]
}

proptest! {
    #[test]
    fn entropy_is_nonincreasing_past_one(a in 1.0f64..40.0, b in 1.0f64..40.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        for bg in backgrounds() {
            prop_assert!(entropy_of_gap(hi, &bg) <= entropy_of_gap(lo, &bg) + 1e-15);
        }
    }

    #[test]
    fn cutoff_inverts_entropy(h0 in 0.01f64..0.3) {
        for bg in backgrounds() {
            let d = entropy_cutoff(h0, &bg).unwrap();
            prop_assert!((entropy_of_gap(d, &bg) - h0).abs() < 1e-8);
        }
    }

    #[test]
    fn confident_fraction_is_a_fraction(xs in prop::collection::vec(0.0f64..5.0, 1..200), h0 in 0.0f64..5.0) {
        let c = confident_fraction(&xs, h0).unwrap();
        prop_assert!((0.0..=1.0).contains(&c));
        let direct = xs.iter().filter(|&&x| x < h0).count() as f64 / xs.len() as f64;
        prop_assert_eq!(c, direct);
    }

    #[test]
    fn exact_law_points_recover_the_cutoff(star in 2.0f64..8.0, bars in prop::collection::vec(0.5f64..5.0, 2..10)) {
        let points: Vec<LawPoint> = bars
            .iter()
            .enumerate()
            .map(|(i, &b)| LawPoint::new(&format!("p{i}"), "synthetic", b, star, (-star / b).exp(), None).unwrap())
            .collect();
        let fit = fit_law(&points).unwrap();
        prop_assert!((fit.slope + star).abs() < 1e-9 * star.max(1.0));
        for p in &points {
            prop_assert!((p.ratio - 1.0).abs() < 1e-9);
            prop_assert!((p.log_c_pred - predict_log_c(star, p.delta_bar).unwrap()).abs() < 1e-15);
        }
    }
}

// Exponential gaps with mean 2.5 past a cutoff of 5 leave e^-2 of the mass.
#[test]
fn monte_carlo_tail_at_two_and_a_half() {
    let bg = BackgroundModel::calibrated_flat_tail();
    let star = entropy_cutoff(0.1, &bg).unwrap();
    let mut rng = rng_for(5, "law/mc");
    let dist = Exp::new(1.0 / 2.5).unwrap();
    let gaps: Vec<f64> = (0..50_000).map(|_| rng.sample(dist)).collect();
    let h: Vec<f64> = gaps.iter().map(|&g| entropy_of_gap(g, &bg)).collect();
    let c = confident_fraction(&h, 0.1).unwrap();
    assert!((c - 0.135).abs() < 0.005, "{c}");
    assert!((c - (-star / 2.5).exp()).abs() < 0.005);
    let stats = gap_stats(&gaps).unwrap();
    assert!((stats.std_over_mean - 1.0).abs() < 0.03);
    assert!(stats.ks_p > 0.001);
}
