use ldm_core::predictors::{gradcheck, DualEmbedConfig, DualEmbedModel, PredictorModel, Sample};

fn toy_model(seed: u64, layers: usize) -> PredictorModel {
    let cfg = DualEmbedConfig {
        d_model: 8,
        d_ff: 16,
        n_heads: 2,
        layers,
        dropout: 0.0,
        patch: 4,
        input_len: 16,
        horizon: 4,
    };
    PredictorModel::DualEmbed(DualEmbedModel::new(cfg, seed).unwrap())
}

/// Zero-mean, unit-variance inputs.
fn normalized_batch(seed: u64) -> Vec<Sample> {
    (0..4)
        .map(|k| {
            let phase = seed as f64 * 0.37 + k as f64;
            let x: Vec<f64> = (0..16).map(|t| (phase + t as f64 * 0.45).sin() * 1.4).collect();
            let y: Vec<f64> = (0..4).map(|t| (phase + (16 + t) as f64 * 0.45).sin() * 1.4).collect();
            (x, y)
        })
        .collect()
}

#[test]
fn dual_embed_gradients_match_finite_differences() {
    for (seed, layers) in [(0, 1), (1, 1), (2, 2)] {
        let m = toy_model(seed, layers);
        let r = gradcheck(&m, &normalized_batch(seed), 1e-3).unwrap();
        let within = r.fraction_within(1e-4);
        eprintln!(
            "seed {seed} layers {layers}: params {} max {:.3e} mean {:.3e} within 1e-4: {:.4}",
            r.num_params, r.max_rel_error, r.mean_rel_error, within
        );
        assert!(within >= 0.95);
        assert!(r.max_rel_error <= 1e-3);
    }
}
