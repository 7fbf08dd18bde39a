use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numcore::{grad_check, GradCheckOptions};

fn small(sel: &str) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        vocab_size: 11,
        max_train_len: 12,
        max_context: 64,
        t5_max_bucket: 6,
        fire_hidden: 4,
        ..ModelConfig::default()
    }
    .with_selector(sel.parse().unwrap())
}

fn random_ids(seed: u64, n: usize, vocab: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..vocab)).collect()
}

#[test]
fn param_count_matches_construction() {
    for sel in Selector::NAMES {
        for tie in [false, true] {
            let mut cfg = small(sel);
            cfg.tie_embeddings = tie;
            let model = Model::<f32>::new(cfg.clone(), 1).unwrap();
            assert_eq!(model.param_count(), cfg.param_count(), "{sel} tie={tie}");
        }
    }
    let default = ModelConfig::default();
    let d = default.d_model;
    let nope = default.clone().with_selector("nope".parse().unwrap());
    assert_eq!(default.param_count() - nope.param_count(), default.n_layers * 2 * d);
    let nw = default.clone().with_selector("cable-nw".parse().unwrap());
    assert_eq!(nw.param_count() - nope.param_count(), default.n_layers * d);
    // 12·d² per layer on top of embeddings, head and norms
    let v = default.vocab_size;
    assert_eq!(nope.param_count(), 2 * v * d + 2 * d + 4 * (12 * d * d + 4 * d));
}

#[test]
fn zero_head_gives_uniform_perplexity() {
    let mut model = Model::<f64>::new(small("cable"), 2).unwrap();
    let w = model.w_out.unwrap();
    *model.head.get_mut(w) = Tensor::zeros(vec![16, 11]);
    let ids = random_ids(3, 20, 11);
    let logits = model.forward(&ids).unwrap();
    assert!(logits.data().iter().all(|&v| v == 0.0));
    let ppl = model.loss(&ids).unwrap().exp();
    assert!((ppl - 11.0).abs() < 1e-9);
}

#[test]
fn forward_is_deterministic() {
    for sel in Selector::NAMES {
        let a = Model::<f32>::new(small(sel), 5).unwrap();
        let b = Model::<f32>::new(small(sel), 5).unwrap();
        let ids = random_ids(6, 10, 11);
        assert_eq!(a.forward(&ids).unwrap(), a.forward(&ids).unwrap());
        assert_eq!(a.forward(&ids).unwrap(), b.forward(&ids).unwrap());
    }
}

#[test]
fn loss_on_two_tokens_is_one_prediction() {
    let model = Model::<f64>::new(small("alibi"), 7).unwrap();
    let logits = model.forward(&[3]).unwrap();
    let row = logits.row(0);
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    assert!((model.loss(&[3, 9]).unwrap() - (lse - row[9])).abs() < 1e-12);
    assert!(matches!(model.loss(&[3]), Err(Error::Argument(_))));
}

#[test]
fn bad_inputs_are_rejected() {
    let model = Model::<f32>::new(small("learnable"), 8).unwrap();
    assert!(matches!(model.forward(&[11]), Err(Error::Index { index: 11, bound: 11, .. })));
    assert!(matches!(model.forward(&[]), Err(Error::Argument(_))));
    // learnable positions end at the training length
    assert!(model.forward(&random_ids(1, 12, 11)).is_ok());
    assert!(matches!(model.forward(&random_ids(1, 13, 11)), Err(Error::Index { .. })));
    let rope = Model::<f32>::new(small("rope"), 8).unwrap();
    assert!(matches!(rope.forward(&random_ids(1, 65, 11)), Err(Error::Argument(_))));
    assert!(matches!(rope.generate(&[], 3, 0.0, &mut ChaCha8Rng::seed_from_u64(0)), Err(Error::Argument(_))));
    let mut bad = small("nope");
    bad.d_model = 15;
    assert!(matches!(Model::<f32>::new(bad, 0), Err(Error::Config(_))));
}

#[test]
fn streaming_generation_matches_full_recompute() {
    for sel in Selector::NAMES {
        let mut cfg = small(sel);
        cfg.init_std = 0.2;
        let model = Model::<f64>::new(cfg, 9).unwrap();
        let prompt = random_ids(10, 3, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = if sel == "learnable" { 9 } else { 20 };
        let streamed = model.generate(&prompt, n, 0.0, &mut rng).unwrap();
        assert_eq!(streamed, model.generate(&prompt, n, 0.0, &mut rng).unwrap());
        let mut full = prompt.clone();
        for _ in 0..n {
            let logits = model.forward(&full).unwrap();
            full.push(argmax(logits.row(full.len() - 1)));
        }
        assert_eq!(streamed, full, "{sel}");
    }
}

#[test]
fn step_logits_match_forward_rows() {
    for sel in Selector::NAMES {
        let mut cfg = small(sel);
        cfg.init_std = 0.2;
        let model = Model::<f64>::new(cfg, 11).unwrap();
        let ids = random_ids(12, 12, 11);
        let full = model.forward(&ids).unwrap();
        let mut states = model.stream_states(ids.len());
        for (i, &tok) in ids.iter().enumerate() {
            let row = model.step(&mut states, tok).unwrap();
            for (a, b) in row.iter().zip(full.row(i)) {
                assert!((a - b).abs() < 1e-10, "{sel} {i}");
            }
        }
    }
}

#[test]
fn model_gradients_match_finite_differences() {
    for sel in ["cable", "cable-nw", "kcable", "alibi", "rope", "learnable", "fire"] {
        let mut cfg = small(sel);
        cfg.d_model = 32;
        cfg.n_heads = 4;
        cfg.init_std = 0.2;
        let model = Model::<f64>::new(cfg, 13).unwrap();
        let ids = random_ids(14, 9, 11);
        let params: Vec<Tensor<f64>> = model.stores().iter().flat_map(|s| s.iter().map(|p| p.value.clone())).collect();
        let report = grad_check(
            |tape, vars| {
                let mv = model.vars_from(vars);
                model.loss_tape(tape, &mv, &ids[..8], &ids[1..], 1, None)
            },
            &params,
            GradCheckOptions { tolerance: 1e-3, max_entries: Some(24), ..Default::default() },
        )
        .unwrap();
        assert!(report.passed(), "{sel}: {:.3e}", report.max_rel_err);
    }
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    for sel in Selector::NAMES {
        let model = Model::<f32>::new(small(sel), 15).unwrap();
        let mut ck = Checkpoint::from_model(&model, 42);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let _: u64 = rng.random();
        ck.rng = Some(RngState::capture(&rng));
        let n = ck.params.len();
        ck.optimizer = Some(OptimizerBlob { t: 7, m: vec![0.5; n], v: vec![0.25; n] });
        ck.extra = serde_json::json!({"note": "x"});
        let path = dir.path().join(format!("{sel}.ckpt"));
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let restored: Model<f32> = back.to_model().unwrap();
        let ids = random_ids(16, 10, 11);
        let (a, b) = (model.forward(&ids).unwrap(), restored.forward(&ids).unwrap());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        let mut resumed = back.rng.unwrap().restore().unwrap();
        assert_eq!(resumed.random::<u64>(), rng.random::<u64>());
    }
    let bytes = std::fs::read(dir.path().join("cable.ckpt")).unwrap();
    assert_eq!(&bytes[..8], b"CBLCKPT1");
    let mut broken = bytes.clone();
    broken[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&broken), Err(Error::Checkpoint { .. })));
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    assert!(matches!(Checkpoint::load(dir.path().join("missing.ckpt")), Err(Error::Checkpoint { .. })));
}
