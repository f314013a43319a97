use proptest::prelude::*;
use rana_core::decomposition::{decompose, rank_contributions, truncation_error, CalibrationSet};
use rana_core::tensor::{matmul, seeded_rng, thin_svd, Matrix};

fn instance(seed: u64, o: usize, i: usize, k: usize) -> (Matrix, CalibrationSet) {
    let mut rng = seeded_rng(seed);
    (Matrix::gaussian(o, i, 1.0, &mut rng), CalibrationSet::new(Matrix::gaussian(i, k, 1.0, &mut rng)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn truncation_error_equals_discarded_spectrum(seed in any::<u64>(), o in 1usize..12, i in 1usize..12, k in 1usize..16) {
        let (w, calib) = instance(seed, o, i, k);
        let dec = decompose(&w, &calib, o.min(i)).unwrap();
        let wx = matmul(&w, calib.x()).unwrap();
        let s = thin_svd(&wx).unwrap().s;
        let total = wx.frobenius_sq();
        for r in 1..=dec.kept() {
            let oracle: f64 = s.iter().skip(r).map(|v| v * v).sum();
            let got = truncation_error(&dec, &calib, r).unwrap();
            prop_assert!((got - oracle).abs() <= 1e-9 * total.max(1.0), "r={} {} vs {}", r, got, oracle);
        }
    }

    #[test]
    fn contributions_sum_to_projected_energy(seed in any::<u64>(), o in 1usize..10, i in 1usize..10, k in 1usize..12) {
        let (w, calib) = instance(seed, o, i, k);
        let dec = decompose(&w, &calib, o.min(i)).unwrap();
        let stats = rank_contributions(&dec, &calib).unwrap();
        for s in 0..k {
            let bx = dec.project(&calib.sample(s)).unwrap();
            let direct: f64 = bx.iter().map(|v| v * v).sum();
            let pooled: f64 = stats.sample(s).iter().sum();
            prop_assert!((direct - pooled).abs() <= 1e-10 * direct.max(1.0));
        }
    }

    #[test]
    fn discarded_energy_is_monotone(seed in any::<u64>(), o in 2usize..10, i in 2usize..10) {
        let (w, calib) = instance(seed, o, i, 20);
        let dec = decompose(&w, &calib, o.min(i)).unwrap();
        for r in 1..=dec.kept() {
            prop_assert!(dec.discarded_energy(r) <= dec.discarded_energy(r - 1));
        }
    }

    #[test]
    fn factor_a_is_orthonormal(seed in any::<u64>(), o in 1usize..10, i in 1usize..10) {
        let (w, calib) = instance(seed, o, i, 24);
        let dec = decompose(&w, &calib, o.min(i)).unwrap();
        let ata = matmul(&dec.a().transpose(), dec.a()).unwrap();
        let id = Matrix::identity(dec.kept());
        prop_assert!(ata.sub(&id).unwrap().max_abs() <= 1e-10);
    }
}
