use super::*;
use crate::model::{CellKind, ModelConfig};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny<F: Scalar>(cfg: ModelConfig, seed: u64, scale: f64) -> Model<F> {
    let mut m = Model::new(cfg).unwrap();
    m.params_mut().perturb(scale, &mut ChaCha8Rng::seed_from_u64(seed));
    m
}

fn cfg(d: usize, layers: usize, vocab: usize) -> ModelConfig {
    ModelConfig { d, n_layers: layers, dropout: 0.0, ..ModelConfig::new(vocab, vocab) }
}

fn random_src(rng: &mut ChaCha8Rng, vocab: u32) -> Vec<u32> {
    let len = rng.gen_range(1..=5);
    (0..len).map(|_| rng.gen_range(4..vocab)).collect()
}

/// Every output the beam could return: sequences ending in EOS with at
/// most `max_len` tokens, and EOS-free sequences of exactly `max_len`.
fn all_outputs(vocab: u32, max_len: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    let mut prefixes: Vec<Vec<u32>> = vec![Vec::new()];
    for len in 1..=max_len {
        let mut grown = Vec::new();
        for p in &prefixes {
            for v in 0..vocab {
                let mut s = p.clone();
                s.push(v);
                if v == EOS {
                    out.push(s);
                } else if len == max_len {
                    out.push(s);
                } else {
                    grown.push(s);
                }
            }
        }
        prefixes = grown;
    }
    out
}

#[test]
fn width_one_beam_is_greedy() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let models: Vec<Model<f32>> = vec![
        tiny(cfg(8, 2, 9), 2, 1.0),
        tiny(ModelConfig { multi_attention: false, ..cfg(8, 2, 9) }, 3, 1.0),
        tiny(ModelConfig { cell: CellKind::Lstm, ..cfg(8, 1, 9) }, 4, 1.0),
    ];
    for i in 0..100 {
        let model = &models[i % models.len()];
        let src = random_src(&mut rng, 9);
        let greedy = greedy_decode(model, &src, 7).unwrap();
        let beam = beam_search(model, &src, 1, 7).unwrap();
        assert_eq!(beam.best.tokens, greedy, "input {i}");
        assert_eq!(beam.nbest.len(), 1);
    }
}

#[test]
fn wide_beam_finds_the_enumerated_argmax() {
    let outputs = all_outputs(6, 4);
    assert_eq!(outputs.len(), 1 + 5 + 25 + 125 + 625);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for seed in 0..6 {
        let model: Model<f64> = tiny(cfg(6, 2, 6), 20 + seed, 1.5);
        let src: Vec<u32> = (0..3).map(|_| rng.gen_range(4..6)).collect();
        let scored: Vec<(f64, &Vec<u32>)> = outputs
            .iter()
            .map(|o| (sequence_log_prob(&model, &src, o).unwrap(), o))
            .collect();
        let (best_score, best_seq) = scored
            .iter()
            .copied()
            .min_by(|a, b| rank(a.0, a.1, b.0, b.1))
            .unwrap();
        let beam = beam_search(&model, &src, 6usize.pow(4), 4).unwrap();
        assert_eq!(&beam.best.tokens, best_seq, "seed {seed}");
        assert!((beam.best.log_prob - best_score).abs() < 1e-9);

        let greedy = greedy_decode(&model, &src, 4).unwrap();
        let g = sequence_log_prob(&model, &src, &greedy).unwrap();
        for k in [1, 2, 3, 5, 8] {
            let b = beam_search(&model, &src, k, 4).unwrap();
            assert!(b.best.log_prob >= g - 1e-12, "k={k}");
            assert!(b.best.log_prob <= best_score + 1e-12);
        }
    }
}

#[test]
fn beam_scores_agree_with_teacher_forcing() {
    let model: Model<f32> = tiny(cfg(8, 2, 10), 30, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..10 {
        let src = random_src(&mut rng, 10);
        let r = beam_search(&model, &src, 4, 6).unwrap();
        assert!(r.nbest.len() <= 4);
        for h in &r.nbest {
            let tf = sequence_log_prob(&model, &src, &h.tokens).unwrap();
            assert!((h.log_prob - tf).abs() <= 1e-5, "{} vs {tf}", h.log_prob);
            assert_eq!(h.finished, h.tokens.last() == Some(&EOS));
            assert!(h.finished || h.tokens.len() == 6);
            // Prefix scores can only fall as tokens are appended.
            let mut prev = 0.0;
            for n in 1..=h.tokens.len() {
                let p = sequence_log_prob(&model, &src, &h.tokens[..n]).unwrap();
                assert!(p <= prev + 1e-9);
                prev = p;
            }
        }
        for w in r.nbest.windows(2) {
            assert!(rank(w[0].log_prob, &w[0].tokens, w[1].log_prob, &w[1].tokens) != Ordering::Greater);
        }
    }
}

#[test]
fn eos_preferring_model_stops_immediately() {
    let mut model: Model<f32> = Model::new(cfg(4, 1, 7)).unwrap();
    let w = model.params().id("output.w").unwrap();
    *model.params_mut().get_mut(w) = Tensor::zeros(&[4, 7]);
    let b = model.params().id("output.b").unwrap();
    let mut bias = vec![0.0; 7];
    bias[EOS as usize] = 5.0;
    *model.params_mut().get_mut(b) = Tensor::new(&[7], bias).unwrap();
    assert_eq!(beam_search(&model, &[4, 5], 3, 10).unwrap().best.tokens, vec![EOS]);
    assert_eq!(greedy_decode(&model, &[4, 5], 10).unwrap(), vec![EOS]);
}

#[test]
fn max_len_bounds_output() {
    let model: Model<f32> = tiny(cfg(6, 1, 8), 40, 1.0);
    assert_eq!(greedy_decode(&model, &[4, 5, 6], 1).unwrap().len(), 1);
    let r = beam_search(&model, &[4, 5, 6], 3, 1).unwrap();
    assert!(r.nbest.iter().all(|h| h.tokens.len() == 1));
}

#[test]
fn greedy_ties_go_to_the_lowest_id() {
    let mut model: Model<f32> = Model::new(cfg(4, 1, 7)).unwrap();
    let w = model.params().id("output.w").unwrap();
    *model.params_mut().get_mut(w) = Tensor::zeros(&[4, 7]);
    assert_eq!(greedy_decode(&model, &[4], 3).unwrap(), vec![0, 0, 0]);
    assert_eq!(beam_search(&model, &[4], 1, 3).unwrap().best.tokens, vec![0, 0, 0]);
}

#[test]
fn invalid_requests() {
    let model: Model<f32> = Model::new(cfg(4, 1, 7)).unwrap();
    assert!(matches!(beam_search(&model, &[4], 0, 3), Err(Error::Config(_))));
    assert!(greedy_decode(&model, &[], 3).is_err());
    assert!(matches!(greedy_decode(&model, &[9], 3), Err(Error::Vocabulary { .. })));
}

#[test]
fn length_normalization_is_opt_in() {
    let model: Model<f64> = tiny(cfg(6, 1, 7), 50, 2.0);
    let plain = beam_search(&model, &[4, 5], 4, 5).unwrap();
    let norm = beam_search_with(&model, &[4, 5], &BeamOptions { width: 4, max_len: 5, length_normalize: true }).unwrap();
    let per_token = |h: &Hypothesis| h.log_prob / h.tokens.len() as f64;
    for h in &norm.nbest {
        assert!(per_token(&norm.best) >= per_token(h));
    }
    for h in &plain.nbest {
        assert!(plain.best.log_prob >= h.log_prob);
    }
}

#[test]
fn translate_line_round_trips_through_vocabularies() {
    let v = Vocabulary::from_tokens(["a", "b", "c"].map(String::from)).unwrap();
    let model: Model<f32> = tiny(cfg(6, 1, v.len()), 60, 1.0);
    assert_eq!(translate_line(&model, &v, &v, "", 1, 5).unwrap(), "");
    let greedy = translate_line(&model, &v, &v, "a b", 1, 5).unwrap();
    let ids = greedy_decode(&model, &v.encode("a b"), 5).unwrap();
    assert_eq!(greedy, v.decode(&ids));
    let beam = translate_line(&model, &v, &v, "a b", 3, 5).unwrap();
    assert!(beam.split_whitespace().count() <= 5);
}
