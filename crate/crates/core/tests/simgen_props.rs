use mflda::simgen::{base_curve_params, generate, Scenario, SimConfig};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quartic_solves_the_normal_equations(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = base_curve_params(&mut rng, 40);
        // QR on centred, rescaled abscissae: the fitted values do not depend
        // on the polynomial basis, and this one is far better conditioned
        let v = DMatrix::from_fn(6, 5, |i, k| ((c.knots_x[i] - 5.0) / 5.0).powi(k as i32));
        let y = DVector::from_column_slice(&c.knots_y);
        let qr = v.clone().qr();
        let eta = qr.r().solve_upper_triangular(&(qr.q().transpose() * y)).expect("full column rank");
        let fitted = &v * eta;
        for i in 0..6 {
            let ours = c.polynomial(c.knots_x[i]);
            prop_assert!((ours - fitted[i]).abs() <= 1e-6 * fitted.amax().max(1.0));
        }
    }
}

/// Welch t statistic of one feature at one time point between two groups.
fn welch(x: &[f64], y: &[f64]) -> f64 {
    let stats = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let s2 = v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        (m, s2 / v.len() as f64)
    };
    let ((mx, vx), (my, vy)) = (stats(x), stats(y));
    (mx - my) / (vx + vy).sqrt()
}

#[test]
fn only_signal_features_separate_the_groups() {
    let cfg = SimConfig::new(2, 40, 30, Scenario::AllTime, 17);
    let sim = generate(&cfg).unwrap();
    let signals = sim.truth.signal_features();
    assert_eq!(signals.len(), 3);
    let h = 20;
    let column = |j: usize, g: usize| -> Vec<f64> {
        (0..sim.labels.len()).filter(|&i| sim.labels[i] == g).map(|i| sim.tensor.get(i, j, h)).collect()
    };
    let mut loud_noise = 0;
    for j in 0..cfg.p {
        let t = welch(&column(j, 0), &column(j, 1)).abs();
        if signals.contains(&j) {
            assert!(t > 10.0, "signal feature {j} has t = {t}");
        } else if t > 3.5 {
            loud_noise += 1;
        }
    }
    assert!(loud_noise <= 1, "{loud_noise} noise features look separated");
}

#[test]
fn window_scenario_is_quiet_outside_the_window() {
    let cfg = SimConfig::new(2, 40, 20, Scenario::Window5To15, 3);
    let sim = generate(&cfg).unwrap();
    let j = sim.truth.signal_features()[0];
    let at = |h: usize, g: usize| -> Vec<f64> {
        (0..sim.labels.len()).filter(|&i| sim.labels[i] == g).map(|i| sim.tensor.get(i, j, h)).collect()
    };
    // grid index h holds time h + 1
    assert!(welch(&at(9, 0), &at(9, 1)).abs() > 10.0);
    assert!(welch(&at(30, 0), &at(30, 1)).abs() < 5.0);
}
