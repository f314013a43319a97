use rana_core::toy::{toy_model_divergence, AdaptTargets, DivergenceConfig, ToyTransformer, ToyTransformerSpec};

fn model(seed: u64) -> ToyTransformer {
    ToyTransformer::new(ToyTransformerSpec { blocks: 2, width: 16, hidden: 32, vocab: 32, seq_len: 8, seed, ..Default::default() }).unwrap()
}

fn deviation(m: &ToyTransformer, compression: f64, targets: AdaptTargets, seed: u64) -> f64 {
    let calib = m.sample_sequences(48, seed);
    let eval = m.sample_sequences(12, seed + 100);
    let cfg = DivergenceConfig { compression, targets, search: Default::default() };
    toy_model_divergence(m, &cfg, &calib, &eval).unwrap().mean_logit_deviation
}

#[test]
fn deviation_grows_with_compression() {
    for seed in 0..3 {
        let m = model(seed);
        let d: Vec<f64> = [0.1, 0.3, 0.5].iter().map(|&c| deviation(&m, c, AdaptTargets::QkvAndMlp, seed)).collect();
        assert!(d[0] <= d[1] && d[1] <= d[2], "seed {seed}: {d:?}");
    }
}

#[test]
fn spreading_compression_over_qkv_beats_mlp_only() {
    let wins = (0..5)
        .filter(|&seed| {
            let m = model(seed);
            deviation(&m, 0.4, AdaptTargets::QkvAndMlp, seed) <= deviation(&m, 0.4, AdaptTargets::MlpOnly, seed)
        })
        .count();
    assert!(wins >= 3, "{wins}/5");
}

#[test]
fn divergence_is_reproducible() {
    let m = model(9);
    assert_eq!(deviation(&m, 0.3, AdaptTargets::QkvAndMlp, 1).to_bits(), deviation(&m, 0.3, AdaptTargets::QkvAndMlp, 1).to_bits());
}
