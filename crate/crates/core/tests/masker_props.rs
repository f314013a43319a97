use proptest::prelude::*;
use rana_core::decomposition::{decompose, rank_contributions, CalibrationSet};
use rana_core::maskers::{calibrate_b_masker, calibrate_neuron_masker, oracle_topk, Mask};
use rana_core::tensor::{seeded_rng, Matrix};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn applying_a_mask_is_idempotent(bits in prop::collection::vec(any::<bool>(), 1..32), seed in any::<u64>()) {
        let mut rng = seeded_rng(seed);
        let v = Matrix::gaussian(bits.len(), 1, 1.0, &mut rng).into_vec();
        let m = Mask::from_bits(bits);
        let once = m.apply(&v);
        prop_assert_eq!(m.apply(&once), once.clone());
        prop_assert_eq!(once.iter().filter(|x| **x != 0.0).count() <= m.count_ones(), true);
    }

    #[test]
    fn oracle_keeps_exactly_k_largest(v in prop::collection::vec(-10.0f64..10.0, 1..24), k in 0usize..24) {
        let k = k.min(v.len());
        let m = oracle_topk(&v, k);
        prop_assert_eq!(m.count_ones(), k);
        let kept_min = m.active().iter().map(|&j| v[j] * v[j]).fold(f64::INFINITY, f64::min);
        for j in 0..v.len() {
            if !m.get(j) {
                prop_assert!(v[j] * v[j] <= kept_min);
            }
        }
    }

    #[test]
    fn b_masker_calibration_lands_on_target(seed in any::<u64>(), frac in 0.05f64..1.0) {
        let mut rng = seeded_rng(seed);
        let w = Matrix::gaussian(12, 10, 1.0, &mut rng);
        let calib = CalibrationSet::new(Matrix::gaussian(10, 400, 1.0, &mut rng));
        let dec = decompose(&w, &calib, 10).unwrap();
        let stats = rank_contributions(&dec, &calib).unwrap();
        let target = frac * 10.0;
        let m = calibrate_b_masker(&stats, target).unwrap();
        // Continuous data: the realized mean is target rounded to one pooled entry.
        prop_assert!((m.calibrated_mean_active - target).abs() <= 1.0 / 400.0 + 1e-12);
        let realized: f64 = (0..400).map(|s| m.apply_energies(&stats.sample(s)).count_ones() as f64).sum::<f64>() / 400.0;
        prop_assert_eq!(realized, m.calibrated_mean_active);
    }

    #[test]
    fn neuron_calibration_lands_on_target(seed in any::<u64>(), frac in 0.05f64..1.0) {
        let mut rng = seeded_rng(seed);
        let down = Matrix::gaussian(6, 16, 1.0, &mut rng);
        let hidden = Matrix::gaussian(16, 300, 1.0, &mut rng);
        let target = frac * 16.0;
        let m = calibrate_neuron_masker(&down, &hidden, target).unwrap();
        prop_assert!((m.calibrated_mean_active - target).abs() <= 1.0 / 300.0 + 1e-12);
    }
}
