use cable_core::attn::LayerPosEnc;
use cable_core::evalx::{
    bench, compare_table, dump_bias, grad_audit, parse_matrix_csv, ppl_sweep, BenchMode, EvalReport, HeadSelector,
    DUMP_CAP,
};
use cable_core::model::{Checkpoint, Model, ModelConfig};
use cable_core::posenc::{cable_bias, CableHeadParams};
use cable_core::{Tensor, Error};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cfg(sel: &str) -> ModelConfig {
    ModelConfig { n_layers: 2, n_heads: 4, d_model: 32, vocab_size: 13, max_train_len: 16, max_context: 600, ..ModelConfig::default() }
        .with_selector(sel.parse().unwrap())
}

fn ids(seed: u64, n: usize, v: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..v)).collect()
}

#[test]
fn zero_head_model_has_vocabulary_perplexity() {
    let mut model = Model::<f64>::new(cfg("cable"), 1).unwrap();
    let w = model.w_out.unwrap();
    model.head.get_mut(w).data_mut().iter_mut().for_each(|x| *x = 0.0);
    let rep = ppl_sweep(&model, &ids(2, 200, 13), &[8, 16, 32], "zero").unwrap();
    for row in &rep.rows {
        assert!((row.perplexity.unwrap() - 13.0).abs() < 1e-9);
    }
    // small random init stays close to uniform
    let init = Model::<f64>::new(cfg("alibi"), 1).unwrap();
    let ppl = ppl_sweep(&init, &ids(2, 200, 13), &[16], "init").unwrap().rows[0].perplexity.unwrap();
    assert!((ppl / 13.0 - 1.0).abs() < 0.1, "{ppl}");
}

#[test]
fn single_window_matches_model_loss() {
    let mut c = cfg("kcable");
    c.init_std = 0.3;
    let model = Model::<f64>::new(c, 3).unwrap();
    let toks = ids(4, 33, 13);
    let rep = ppl_sweep(&model, &toks, &[32], "k").unwrap();
    let row = &rep.rows[0];
    assert_eq!((row.windows, row.tokens_evaluated), (1, 32));
    assert!((row.perplexity.unwrap() - model.loss(&toks).unwrap().exp()).abs() < 1e-6);
}

#[test]
fn windows_do_not_overlap() {
    let mut c = cfg("rope");
    c.init_std = 0.3;
    let model = Model::<f64>::new(c, 5).unwrap();
    let toks = ids(6, 100, 13);
    let rep = ppl_sweep(&model, &toks, &[8, 30], "r").unwrap();
    // 99 predictions: 12 windows of 8 and 3 of 30
    assert_eq!(rep.rows[0].windows, 12);
    assert_eq!(rep.rows[1].windows, 3);
    let manual: f64 = (0..3).map(|w| model.loss(&toks[w * 30..w * 30 + 31]).unwrap()).sum::<f64>() / 3.0;
    assert!((rep.rows[1].perplexity.unwrap() - manual.exp()).abs() < 1e-9);
}

#[test]
fn unreachable_lengths_become_error_rows() {
    let model = Model::<f32>::new(cfg("learnable"), 7).unwrap();
    let rep = ppl_sweep(&model, &ids(8, 100, 13), &[16, 32, 200], "l").unwrap();
    assert!(rep.rows[0].perplexity.is_some());
    assert!(rep.rows[1].perplexity.is_none() && rep.rows[1].error.is_some());
    assert!(rep.rows[2].perplexity.is_none());
    assert!(matches!(ppl_sweep(&model, &ids(8, 100, 13), &[16, 8], "l"), Err(Error::Argument(_))));
}

#[test]
fn static_biases_ignore_content_and_cable_does_not() {
    let a = ids(9, 40, 13);
    let mut b = a.clone();
    b[20] = (b[20] + 1) % 13;
    for sel in ["alibi", "kerple", "t5", "fire", "cable", "kcable", "cable-nw"] {
        let mut c = cfg(sel);
        c.init_std = 0.3;
        let model = Model::<f64>::new(c, 10).unwrap();
        for layer in 0..2 {
            let da = dump_bias(&model, &a, layer, HeadSelector::All, None, DUMP_CAP).unwrap();
            let db = dump_bias(&model, &b, layer, HeadSelector::All, None, DUMP_CAP).unwrap();
            assert_eq!(da.content, "logit_delta");
            let same = da.heads.iter().zip(&db.heads).all(|((_, x), (_, y))| x == y);
            if sel.contains("cable") {
                let diff = da.heads.iter().zip(&db.heads).map(|((_, x), (_, y))| x.max_abs_diff(y)).fold(0.0, f64::max);
                assert!(diff > 1e-6, "{sel} layer {layer}");
            } else {
                assert!(same, "{sel} layer {layer}");
            }
        }
    }
}

/// Per-head key slice computed with plain loops.
fn key_slice(x: &Tensor<f64>, w_k: &Tensor<f64>, head: usize, dh: usize) -> Tensor<f64> {
    let (t, d) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![0.0; t * dh];
    for i in 0..t {
        for c in 0..dh {
            out[i * dh + c] = (0..d).map(|k| x.get(&[i, k]) * w_k.get(&[k, head * dh + c])).sum();
        }
    }
    Tensor::new(vec![t, dh], out).unwrap()
}

#[test]
fn dumped_csv_matches_recomputed_bias() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = cfg("cable");
    c.init_std = 0.3;
    let trained = Model::<f32>::new(c, 11).unwrap();
    let path = dir.path().join("m.ckpt");
    Checkpoint::from_model(&trained, 0).save(&path).unwrap();
    let model: Model<f64> = Checkpoint::load(&path).unwrap().to_model().unwrap();
    let toks = ids(12, 48, 13);
    let layer = 1;
    let out = dir.path().join("dump");
    let dump = dump_bias(&model, &toks, layer, HeadSelector::All, Some(&out), DUMP_CAP).unwrap();
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["heads"], serde_json::json!([0, 1, 2, 3]));

    let attn = &model.blocks[layer].attn;
    let (w_c, w_s, variant) = match &attn.posenc {
        LayerPosEnc::Cable { w_c, w_s, variant } => (*w_c, w_s.unwrap(), *variant),
        _ => unreachable!(),
    };
    let dh = 32 / 4;
    let x = model.attention_input(&toks, layer).unwrap();
    for (h, m) in &dump.heads {
        let p = CableHeadParams {
            w_c: attn.params.get(w_c).row(*h).to_vec(),
            w_s: attn.params.get(w_s).row(*h).to_vec(),
            variant,
        };
        let exact = cable_bias(&key_slice(&x, attn.params.get(attn.w_k), *h, dh), &p).unwrap();
        assert!(m.max_abs_diff(&exact) < 1e-6, "head {h}");
        let csv = parse_matrix_csv(&std::fs::read_to_string(out.join(format!("layer{layer}_head{h}.csv"))).unwrap()).unwrap();
        assert_eq!(csv.len(), 48);
        for (i, row) in csv.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let e = exact.get(&[i, j]);
                // six significant digits
                assert!((v - e).abs() <= 5e-6 * e.abs() + 1e-300, "{i},{j}: {v} vs {e}");
            }
        }
    }
    assert!(matches!(dump_bias(&model, &ids(1, 600, 13), 0, HeadSelector::All, None, DUMP_CAP), Err(Error::Argument(_))));
    assert!(matches!(dump_bias(&model, &toks, 2, HeadSelector::All, None, DUMP_CAP), Err(Error::Index { .. })));
    assert!(matches!(dump_bias(&model, &toks, 0, HeadSelector::One(4), None, DUMP_CAP), Err(Error::Index { .. })));
}

#[test]
fn cached_decode_beats_recompute() {
    let c = cfg("cable");
    let cached = bench(&c, BenchMode::InferUnbatched, 128, 1, 3, 0).unwrap();
    let naive = bench(&c, BenchMode::InferRecompute, 128, 1, 3, 0).unwrap();
    assert!(cached.tokens_per_second > 2.0 * naive.tokens_per_second, "{cached:?} {naive:?}");
    let train = bench(&c, BenchMode::TrainBatched, 32, 2, 3, 0).unwrap();
    assert!(train.peak_bytes > 0 && train.tokens_per_second > 0.0);
}

#[test]
fn audit_passes_and_projection_gradients_are_tight() {
    let model = Model::<f64>::new(cfg("cable"), 13).unwrap();
    let rep = grad_audit(&model, &ids(14, 9, 13), 1e-3, None).unwrap();
    assert!(rep.passed, "{rep:?}");
    for g in rep.groups.iter().filter(|g| g.name.contains("cable.w_")) {
        assert!(g.max_rel_err <= 1e-4, "{}: {:.3e}", g.name, g.max_rel_err);
        assert!(g.grad_norm > 0.0);
    }
    // with w_c = 0 every bias vanishes and w_s has nothing to weight
    let mut zeroed = model.clone();
    for block in &mut zeroed.blocks {
        let LayerPosEnc::Cable { w_c, .. } = block.attn.posenc.clone() else { unreachable!() };
        block.attn.params.get_mut(w_c).data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    let rep = grad_audit(&zeroed, &ids(14, 9, 13), 1e-3, None).unwrap();
    for g in rep.groups.iter().filter(|g| g.name.contains("cable.w_s")) {
        assert_eq!(g.grad_norm, 0.0, "{}", g.name);
    }
}

#[test]
fn reports_are_reproducible_and_comparable() {
    let toks = ids(15, 300, 13);
    let make = |sel: &str| {
        let model = Model::<f32>::new(cfg(sel), 16).unwrap();
        ppl_sweep(&model, &toks, &[16, 32, 64], sel).unwrap()
    };
    let (a, b) = (make("cable"), make("cable"));
    assert_eq!(a.without_timestamp().to_json().unwrap(), b.without_timestamp().to_json().unwrap());
    let back = EvalReport::from_json(&a.to_json().unwrap()).unwrap();
    assert_eq!(back, a);
    let table = compare_table(&[a, make("alibi")]);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "sequence_length,cable,alibi");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("16,"));
}
