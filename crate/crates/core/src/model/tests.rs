use super::*;
use crate::data::{Batch, BOS};
use crate::gradcheck::check_model;
use crate::reference;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

fn config(d: usize, n_layers: usize, vocab: usize) -> ModelConfig {
    ModelConfig {
        d,
        n_layers,
        dropout: 0.0,
        ..ModelConfig::new(vocab, vocab)
    }
}

fn jittered<F: Scalar>(cfg: ModelConfig, seed: u64) -> Model<F> {
    let mut m = Model::new(cfg).unwrap();
    m.params_mut().perturb(0.3, &mut ChaCha8Rng::seed_from_u64(seed));
    m
}

fn random_pairs(vocab: u32, n: usize, max_len: usize, seed: u64) -> Vec<(Vec<u32>, Vec<u32>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seq = |rng: &mut ChaCha8Rng| -> Vec<u32> {
        let len = rng.gen_range(1..=max_len);
        (0..len).map(|_| rng.gen_range(4..vocab)).collect()
    };
    (0..n).map(|_| (seq(&mut rng), seq(&mut rng))).collect()
}

fn logits_of<F: Scalar>(model: &Model<F>, batch: &Batch) -> Vec<F> {
    let mut pass = Pass::eval(model);
    let mem = pass.encode(&batch.src).unwrap();
    let logits = pass.decode_train(&batch.tgt_in, &mem).unwrap();
    pass.tape.values(logits).to_vec()
}

#[test]
fn single_layer_single_token_encode_is_the_layer_on_the_embedding() {
    let model: Model<f64> = jittered(config(6, 1, 9), 1);
    let mut pass = Pass::eval(&model);
    let mem = pass.encode(&TokenBatch::single(&[7]).unwrap()).unwrap();
    let got = pass.tape.values(mem.states).to_vec();

    let mut tape = Tape::<f64>::new();
    let bound = model.params().bind(&mut tape, false);
    let table = model.params().by_name("src_embed").unwrap();
    let row = tape.constant(&Tensor::new(&[1, 6], table.row(7).to_vec()).unwrap());
    let layer = &model.encoder_layers().unwrap()[0];
    let want = reference::encoder_layer(&mut tape, &bound, layer, row).unwrap();
    assert_eq!(got, tape.values(want));
}

#[test]
fn encoding_depends_on_source_order() {
    let model: Model<f64> = jittered(config(8, 2, 12), 2);
    let enc = |ids: &[u32]| {
        let mut pass = Pass::eval(&model);
        let mem = pass.encode(&TokenBatch::single(ids).unwrap()).unwrap();
        pass.tape.value(mem.states)
    };
    let a = enc(&[5, 6, 7, 8]);
    let b = enc(&[6, 5, 7, 8]);
    // Later positions see a different history even though their tokens agree.
    assert!(a.row(3).iter().zip(b.row(3)).any(|(x, y)| x != y));
}

#[test]
fn out_of_range_ids_are_vocabulary_errors() {
    let model: Model<f32> = Model::new(config(4, 1, 6)).unwrap();
    let mut pass = Pass::eval(&model);
    let err = pass.encode(&TokenBatch::single(&[4, 6]).unwrap()).unwrap_err();
    assert!(matches!(err, Error::Vocabulary { id: 6, size: 6 }));
    let mem = pass.encode(&TokenBatch::single(&[4]).unwrap()).unwrap();
    let err = pass.decode_train(&TokenBatch::single(&[BOS, 9]).unwrap(), &mem).unwrap_err();
    assert!(matches!(err, Error::Vocabulary { id: 9, .. }));
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let model: Model<f64> = jittered(config(8, 2, 11), 3);
    let batch = Batch::from_pairs(&random_pairs(11, 2, 4, 4)).unwrap();
    for r in check_model(&model, &batch, 1e-5, None).unwrap() {
        assert!(r.max_rel_error <= 1e-4, "{}: {}", r.name, r.max_rel_error);
    }
}

#[test]
fn ablated_and_lstm_gradients_match_finite_differences() {
    let batch = Batch::from_pairs(&random_pairs(9, 2, 3, 5)).unwrap();
    let variants = [
        ModelConfig { layer_norm: false, highway: false, multi_attention: false, ..config(6, 2, 9) },
        ModelConfig { cell: CellKind::Lstm, ..config(6, 2, 9) },
        ModelConfig { cell: CellKind::Lstm, input_feeding: true, ..config(4, 1, 9) },
    ];
    for cfg in variants {
        let model: Model<f64> = jittered(cfg.clone(), 6);
        for r in check_model(&model, &batch, 1e-5, None).unwrap() {
            assert!(r.max_rel_error <= 1e-4, "{cfg:?} {}: {}", r.name, r.max_rel_error);
        }
    }
}

#[test]
fn corrupted_backward_rule_is_caught_and_named() {
    let model: Model<f64> = jittered(config(4, 1, 7), 7);
    let batch = Batch::from_pairs(&random_pairs(7, 1, 3, 8)).unwrap();
    let reports = check_model(&model, &batch, 1e-5, Some(("layer_norm", 1.5))).unwrap();
    let worst = reports.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).unwrap();
    assert!(worst.max_rel_error > 1e-2);
    assert!(worst.name.starts_with("encoder.") || worst.name.starts_with("decoder."), "{}", worst.name);
    let clean = reports.iter().find(|r| r.name == "output.b").unwrap();
    assert!(clean.max_rel_error <= 1e-4, "output bias is downstream of every layer norm");
}

#[test]
fn decode_train_logit_shape() {
    let model: Model<f32> = Model::new(config(4, 2, 13)).unwrap();
    let batch = Batch::from_pairs(&random_pairs(13, 3, 5, 9)).unwrap();
    let mut pass = Pass::eval(&model);
    let mem = pass.encode(&batch.src).unwrap();
    let logits = pass.decode_train(&batch.tgt_in, &mem).unwrap();
    assert_eq!(pass.tape.shape(logits), &[batch.tgt_in.steps * 3, 13]);
}

#[test]
fn single_attention_bundle_without_multi_attention() {
    let cfg = ModelConfig { multi_attention: false, ..config(4, 3, 7) };
    let model: Model<f32> = Model::new(cfg).unwrap();
    assert_eq!(model.attention_count(), 1);
    let names: Vec<&str> = model.params().iter().map(|(n, _)| n).filter(|n| n.contains(".attn.")).collect();
    assert!(names.iter().all(|n| n.starts_with("decoder.2.")), "{names:?}");
    assert_eq!(Model::<f32>::new(config(4, 3, 7)).unwrap().attention_count(), 3);
}

/// Replays gold prefixes one step at a time and compares with the batched
/// teacher-forced logits.
fn incremental_logits<F: Scalar>(model: &Model<F>, batch: &Batch) -> Vec<F> {
    let mut pass = Pass::eval(model);
    let mem = pass.encode(&batch.src).unwrap();
    let mut state = pass.begin_decode(&mem);
    let b = batch.tgt_in.batch;
    let mut out = Vec::new();
    for t in 0..batch.tgt_in.steps {
        let tokens = &batch.tgt_in.ids[t * b..(t + 1) * b];
        let (logits, next) = pass.decode_step(tokens, &state, &mem).unwrap();
        out.extend_from_slice(pass.tape.values(logits));
        state = next;
    }
    out
}

#[test]
fn incremental_decoding_replays_teacher_forcing() {
    let variants = [
        config(8, 2, 10),
        ModelConfig { multi_attention: false, highway: false, ..config(8, 3, 10) },
        ModelConfig { cell: CellKind::Lstm, ..config(8, 2, 10) },
        ModelConfig { cell: CellKind::Lstm, input_feeding: true, ..config(8, 2, 10) },
    ];
    for (i, cfg) in variants.into_iter().enumerate() {
        let model: Model<f32> = jittered(cfg, 10 + i as u64);
        let batch = Batch::from_pairs(&random_pairs(10, 4, 6, 20 + i as u64)).unwrap();
        let batched = logits_of(&model, &batch);
        let stepped = incremental_logits(&model, &batch);
        let diff = batched.iter().zip(&stepped).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(diff <= 1e-6, "variant {i}: {diff}");
    }
}

#[test]
fn padding_does_not_change_a_sentence() {
    let model: Model<f32> = jittered(config(8, 2, 10), 30);
    let pairs = random_pairs(10, 5, 7, 31);
    let together = Batch::from_pairs(&pairs).unwrap();
    let all = logits_of(&model, &together);
    let v = 10;
    for (b, pair) in pairs.iter().enumerate() {
        let alone = logits_of(&model, &Batch::from_pairs(std::slice::from_ref(pair)).unwrap());
        for t in 0..=pair.1.len() {
            let row = (t * pairs.len() + b) * v;
            assert_eq!(&all[row..row + v], &alone[t * v..(t + 1) * v], "sentence {b} step {t}");
        }
    }
}

#[test]
fn uniform_logits_give_log_vocab_loss() {
    let mut model: Model<f64> = Model::new(config(4, 1, 9)).unwrap();
    for name in ["output.w", "output.b"] {
        let id = model.params().id(name).unwrap();
        let shape = model.params().get(id).shape().to_vec();
        *model.params_mut().get_mut(id) = Tensor::zeros(&shape);
    }
    let batch = Batch::from_pairs(&random_pairs(9, 3, 4, 40)).unwrap();
    let mut pass = Pass::eval(&model);
    let mem = pass.encode(&batch.src).unwrap();
    let logits = pass.decode_train(&batch.tgt_in, &mem).unwrap();
    let loss = pass.nll(logits, &batch.tgt_gold).unwrap();
    let l = pass.tape.values(loss)[0];
    assert!((l - 9f64.ln()).abs() < 1e-12);
    assert!((l.exp() - 9.0).abs() < 1e-10);
}

#[test]
fn confident_correct_logits_give_near_zero_loss() {
    // Output bias strongly favouring the gold token, which is the same at
    // every position.
    let mut model: Model<f64> = Model::new(config(4, 1, 6)).unwrap();
    let w = model.params().id("output.w").unwrap();
    *model.params_mut().get_mut(w) = Tensor::zeros(&[4, 6]);
    let b = model.params().id("output.b").unwrap();
    *model.params_mut().get_mut(b) = Tensor::new(&[6], vec![0.0, 0.0, 0.0, 40.0, 0.0, 0.0]).unwrap();
    let mut pass = Pass::eval(&model);
    let mem = pass.encode(&TokenBatch::single(&[4, 5]).unwrap()).unwrap();
    let logits = pass.decode_train(&TokenBatch::single(&[BOS]).unwrap(), &mem).unwrap();
    let loss = pass.nll(logits, &TokenBatch::single(&[crate::data::EOS]).unwrap()).unwrap();
    assert!(pass.tape.values(loss)[0] < 1e-15);
}

#[test]
fn padded_positions_get_no_logit_gradient() {
    let model: Model<f64> = jittered(config(4, 1, 8), 50);
    let batch = Batch::from_pairs(&[(vec![4, 5], vec![6]), (vec![4], vec![6, 7, 5])]).unwrap();
    let mut pass = Pass::with_regime(&model, Regime::inference(), true, 0);
    let mem = pass.encode(&batch.src).unwrap();
    let logits = pass.decode_train(&batch.tgt_in, &mem).unwrap();
    let loss = pass.nll(logits, &batch.tgt_gold).unwrap();
    pass.backward(loss).unwrap();
    let g = pass.tape.grad(logits).unwrap();
    for (row, ok) in batch.tgt_gold.valid.iter().enumerate() {
        if !ok {
            assert!(g.row(row).iter().all(|&x| x == 0.0));
        } else {
            assert!(g.row(row).iter().any(|&x| x != 0.0));
        }
    }
}

fn registered(model: &Model<f32>, prefix: &str) -> usize {
    model.params().iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, t)| t.len()).sum()
}

#[test]
fn layer_parameter_counts_at_width_500() {
    let model: Model<f32> = Model::new(config(500, 1, 5)).unwrap();
    assert_eq!(registered(&model, "encoder.0."), 753_000);
    assert_eq!(registered(&model, "decoder.0."), 1_757_500);
    assert_eq!(model.parameter_count(), model.params().element_count());
}

#[test]
fn closed_form_per_layer_counts() {
    for d in [8, 64, 500] {
        let one = parameter_count(&config(d, 1, 30));
        let two = parameter_count(&config(d, 2, 30));
        let embed_out = 2 * 30 * d + d * 30 + 30;
        assert_eq!(one - embed_out, 3 * d * d + 6 * d + 7 * d * d + 15 * d);
        assert_eq!(two - one, 3 * d * d + 6 * d + 7 * d * d + 15 * d);
    }
}

#[test]
fn ablation_flags_change_counts_by_their_deltas() {
    for d in [8, 64] {
        let n = 3;
        let full = parameter_count(&config(d, n, 20));
        let no_hw = parameter_count(&ModelConfig { highway: false, ..config(d, n, 20) });
        let no_ln = parameter_count(&ModelConfig { layer_norm: false, ..config(d, n, 20) });
        let no_ma = parameter_count(&ModelConfig { multi_attention: false, ..config(d, n, 20) });
        // Highway drops d columns of every fused W and 2d LN entries.
        assert_eq!(full - no_hw, 2 * n * (d * d + 2 * d));
        // Encoder: 3d-wide LN; decoder: fused, W_s, W_c, W_as, W_ah LNs.
        assert_eq!(full - no_ln, n * 6 * d + n * (6 * d + 2 * d + 2 * d + 4 * d));
        // Every decoder layer but the last loses W_c, W_as, W_ah, v and LNs.
        assert_eq!(full - no_ma, (n - 1) * (3 * d * d + 7 * d));
    }
}

#[test]
fn lstm_counts_match_registry() {
    for feed in [false, true] {
        let cfg = ModelConfig { cell: CellKind::Lstm, input_feeding: feed, ..config(6, 2, 9) };
        let model: Model<f32> = Model::new(cfg).unwrap();
        assert_eq!(model.parameter_count(), model.params().element_count());
    }
}

#[test]
fn invalid_configs_are_rejected() {
    assert!(Model::<f32>::new(config(5, 1, 9)).is_err());
    assert!(Model::<f32>::new(config(4, 0, 9)).is_err());
    assert!(Model::<f32>::new(ModelConfig { dropout: 1.0, ..config(4, 1, 9) }).is_err());
    assert!(Model::<f32>::new(config(4, 1, 4)).is_err());
}

#[test]
fn from_named_restores_exact_values_and_rejects_mismatches() {
    let a: Model<f32> = jittered(config(4, 2, 8), 60);
    let named: Vec<(String, Tensor<f32>)> = a.params().iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    let b = Model::from_named(a.config().clone(), named.clone()).unwrap();
    assert_eq!(a.params().tensors(), b.params().tensors());
    let mut wrong = named.clone();
    wrong[0].0 = "nope".into();
    assert!(matches!(Model::from_named(a.config().clone(), wrong), Err(Error::Checkpoint(_))));
    let mut short = named;
    short.pop();
    assert!(Model::from_named(a.config().clone(), short).is_err());
}

#[test]
fn dropout_passes_are_seeded() {
    let cfg = ModelConfig { dropout: 0.3, ..config(8, 2, 10) };
    let model: Model<f32> = jittered(cfg, 70);
    let batch = Batch::from_pairs(&random_pairs(10, 3, 5, 71)).unwrap();
    let run = |seed| {
        let mut pass = Pass::train(&model, seed);
        let mem = pass.encode(&batch.src).unwrap();
        let logits = pass.decode_train(&batch.tgt_in, &mem).unwrap();
        let loss = pass.nll(logits, &batch.tgt_gold).unwrap();
        pass.backward(loss).unwrap();
        (pass.tape.values(loss)[0], pass.param_grads())
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1).0, run(2).0);
    assert_ne!(run(1).0, logits_loss_without_dropout(&model, &batch));
}

fn logits_loss_without_dropout(model: &Model<f32>, batch: &Batch) -> f32 {
    let mut pass = Pass::eval(model);
    let mem = pass.encode(&batch.src).unwrap();
    let logits = pass.decode_train(&batch.tgt_in, &mem).unwrap();
    let loss = pass.nll(logits, &batch.tgt_gold).unwrap();
    pass.tape.values(loss)[0]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn closed_form_count_matches_registry(
        half_d in 1usize..6,
        n in 1usize..4,
        vocab in 5usize..12,
        ln: bool, ma: bool, hw: bool, lstm: bool, feed: bool,
    ) {
        let cfg = ModelConfig {
            layer_norm: ln,
            multi_attention: ma,
            highway: hw,
            input_feeding: feed,
            cell: if lstm { CellKind::Lstm } else { CellKind::Sr },
            ..config(2 * half_d, n, vocab)
        };
        let model: Model<f32> = Model::new(cfg.clone()).unwrap();
        prop_assert_eq!(parameter_count(&cfg), model.params().element_count());
    }
}
