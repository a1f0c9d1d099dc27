use std::rc::Rc;

use rand::Rng as _;

use super::*;
use crate::tensor::{AdamConfig, AdamState, AttentionLayout, AttentionSegment};

fn toy(variant: Variant) -> ModelConfig {
    let mut c = variant.configure(&ModelConfig::toy(12));
    c.d_model = 16;
    c.ff_dim = 32;
    c.heads = 2;
    c
}

fn assert_rows_normalized(records: &[AttentionRecord]) {
    for r in records {
        for row in r.rows() {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "row sums to {s}");
            assert!(row.iter().all(|&w| (0.0..=1.0).contains(&w)));
        }
    }
}

#[test]
fn sinusoid_position_zero() {
    let pe = sinusoid_positions(3, 8).unwrap();
    for i in 0..8 {
        let expected = if i % 2 == 0 { 0.0 } else { 1.0 };
        assert_eq!(pe.row(0)[i], expected);
    }
}

#[test]
fn sinusoid_position_one() {
    let pe = sinusoid_positions(2, 8).unwrap();
    assert!((pe.row(1)[0] - 1f64.sin()).abs() < 1e-9);
    assert!((pe.row(1)[0] - 0.8414709848078965).abs() < 1e-9);
}

#[test]
fn sinusoid_range() {
    let pe = sinusoid_positions(200, 32).unwrap();
    assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn sinusoid_odd_dimension_rejected() {
    assert!(matches!(sinusoid_positions(4, 7), Err(Error::Config(_))));
}

#[test]
fn no_position_representation_is_position_independent() {
    let m = Model::new(toy(Variant::TransNoEncNoPos), 3).unwrap();
    let a = m.source_representation(&[5, 6, 5, 7]).unwrap();
    let b = m.source_representation(&[8, 5]).unwrap();
    assert_eq!(a.provenance, Provenance::EmbeddingsPlusPositions);
    assert_eq!(a.matrix.row(0), a.matrix.row(2));
    assert_eq!(a.matrix.row(0), b.matrix.row(1));
}

#[test]
fn encoder_free_representation_recomputed_from_parts() {
    let m = Model::new(toy(Variant::TransNoEnc), 4).unwrap();
    let src = [4, 9, 4, 11, 5];
    let rep = m.source_representation(&src).unwrap();
    let d = m.config().d_model;
    let e = m.params().get(m.source_embedding_id());
    let pe = sinusoid_positions(src.len(), d).unwrap();
    for (r, &tok) in src.iter().enumerate() {
        for j in 0..d {
            let expected = (d as f64).sqrt() * e.row(tok)[j] + pe.row(r)[j];
            assert!((rep.matrix.row(r)[j] - expected).abs() < 1e-12);
        }
    }
    // identical (token, position) pairs agree across sentences
    let other = m.source_representation(&[4, 7]).unwrap();
    assert_eq!(rep.matrix.row(0), other.matrix.row(0));
}

#[test]
fn source_representation_rejects_unknown_ids() {
    let m = Model::new(toy(Variant::TransNoEnc), 4).unwrap();
    assert!(matches!(m.source_representation(&[4, 99]), Err(Error::Contract(_))));
    assert!(matches!(m.source_representation(&[]), Err(Error::Contract(_))));
}

fn train_steps(m: &mut Model, pairs: &[(Vec<usize>, Vec<usize>)], steps: usize) -> f64 {
    let mut adam = AdamState::new(m.params(), AdamConfig { lr: 3e-3, ..AdamConfig::default() });
    let mut last = f64::NAN;
    for _ in 0..steps {
        let grads = {
            let mut g = Graph::with_params(m.params());
            let src: Vec<&[usize]> = pairs.iter().map(|p| p.0.as_slice()).collect();
            let inp: Vec<Vec<usize>> = pairs.iter().map(|p| p.1[..p.1.len() - 1].to_vec()).collect();
            let inp: Vec<&[usize]> = inp.iter().map(Vec::as_slice).collect();
            let out: Vec<usize> = pairs.iter().flat_map(|p| p.1[1..].iter().copied()).collect();
            let (logits, _) = m.forward(&mut g, &src, &inp, None, false).unwrap();
            let loss = g.cross_entropy(logits, &out, 0.0).unwrap();
            last = g.value(loss)[0] / out.len() as f64;
            g.backward(loss).unwrap()
        };
        m.params_mut().zero_grads();
        grads.accumulate_into(m.params_mut()).unwrap();
        adam.update(m.params_mut()).unwrap();
    }
    last
}

fn copy_pairs(n: usize, seed: u64) -> Vec<(Vec<usize>, Vec<usize>)> {
    let mut r = crate::rng::seeded(seed);
    (0..n)
        .map(|_| {
            let len = r.random_range(2..6);
            let s: Vec<usize> = (0..len).map(|_| r.random_range(4..12)).collect();
            let mut t = vec![crate::data::BOS];
            t.extend(s.iter().rev());
            t.push(crate::data::EOS);
            (s, t)
        })
        .collect()
}

#[test]
fn encoder_contextualizes_tokens() {
    let mut m = Model::new(toy(Variant::Transformer), 5).unwrap();
    train_steps(&mut m, &copy_pairs(16, 1), 50);
    let a = m.source_representation(&[6, 7, 8]).unwrap();
    let b = m.source_representation(&[9, 7, 10]).unwrap();
    assert_eq!(a.provenance, Provenance::EncoderOutput);
    let diff: f64 = a.matrix.row(1).iter().zip(b.matrix.row(1)).map(|(x, y)| (x - y).abs()).sum();
    assert!(diff > 1e-3, "same token, same position, different context: diff {diff}");
}

#[test]
fn training_reduces_loss_for_every_variant() {
    for v in Variant::ALL {
        let mut m = Model::new(toy(v), 6).unwrap();
        let pairs = copy_pairs(8, 2);
        let first = train_steps(&mut m, &pairs, 1);
        let later = train_steps(&mut m, &pairs, 30);
        assert!(later < first, "{v}: {first} -> {later}");
    }
}

#[test]
fn single_key_attention_weight_is_one() {
    for v in [Variant::Transformer, Variant::TransNoEnc, Variant::Rnns2s, Variant::Rnns2sNoEnc] {
        let m = Model::new(toy(v), 7).unwrap();
        let mut g = Graph::with_params(m.params());
        let (_, rec) = m.forward(&mut g, &[&[5]], &[&[1, 6, 7]], None, true).unwrap();
        assert!(!rec[0].is_empty());
        for row in rec[0].rows() {
            assert_eq!(row, &[1.0]);
        }
    }
}

#[test]
fn identical_keys_give_uniform_weights() {
    let mut g = Graph::new();
    let mut r = crate::rng::seeded(9);
    let n = 5;
    let d = 4;
    let q = g.leaf(Tensor::from_fn(&[3, d], |_| r.random_range(-1.0..1.0)));
    let key: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
    let k = g.leaf(Tensor::from_fn(&[n, d], |i| key[i % d]));
    let v = g.leaf(Tensor::from_fn(&[n, d], |_| r.random_range(-1.0..1.0)));
    let layout = Rc::new(AttentionLayout {
        heads: 2,
        segments: vec![AttentionSegment { q_start: 0, q_len: 3, k_start: 0, k_len: n }],
        causal: false,
    });
    let a = g.attention(q, k, v, layout).unwrap();
    for head in &g.attention_weights(a).unwrap()[0] {
        for row in head {
            for &w in row {
                assert!((w - 1.0 / n as f64).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn single_head_attention_matches_loops() {
    let mut r = crate::rng::seeded(10);
    let (tq, tk, d) = (4, 6, 8);
    let qd: Vec<f64> = (0..tq * d).map(|_| r.random_range(-2.0..2.0)).collect();
    let kd: Vec<f64> = (0..tk * d).map(|_| r.random_range(-2.0..2.0)).collect();
    let vd: Vec<f64> = (0..tk * d).map(|_| r.random_range(-2.0..2.0)).collect();
    let mut g = Graph::new();
    let q = g.constant(&[tq, d], qd.clone()).unwrap();
    let k = g.constant(&[tk, d], kd.clone()).unwrap();
    let v = g.constant(&[tk, d], vd.clone()).unwrap();
    let layout = Rc::new(AttentionLayout {
        heads: 1,
        segments: vec![AttentionSegment { q_start: 0, q_len: tq, k_start: 0, k_len: tk }],
        causal: false,
    });
    let a = g.attention(q, k, v, layout).unwrap();
    let out = g.value(a);
    for i in 0..tq {
        let mut scores = vec![0.0; tk];
        for j in 0..tk {
            let mut s = 0.0;
            for c in 0..d {
                s += qd[i * d + c] * kd[j * d + c];
            }
            scores[j] = s / (d as f64).sqrt();
        }
        let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
        for c in 0..d {
            let mut acc = 0.0;
            for j in 0..tk {
                acc += (scores[j] - mx).exp() / z * vd[j * d + c];
            }
            assert!((out[i * d + c] - acc).abs() < 1e-10);
        }
    }
}

#[test]
fn attention_shape_mismatch_is_dimension_error() {
    let mut g = Graph::new();
    let q = g.constant(&[2, 4], vec![0.0; 8]).unwrap();
    let k = g.constant(&[3, 6], vec![0.0; 18]).unwrap();
    let layout = Rc::new(AttentionLayout {
        heads: 2,
        segments: vec![AttentionSegment { q_start: 0, q_len: 2, k_start: 0, k_len: 3 }],
        causal: false,
    });
    assert!(matches!(g.attention(q, k, k, layout), Err(Error::Dimension(_))));
}

#[test]
fn decoder_is_causal() {
    for v in [Variant::Transformer, Variant::TransNoEnc, Variant::Rnns2s, Variant::Rnns2sNoAtt] {
        let m = Model::new(toy(v), 11).unwrap();
        let src = [4, 5, 6];
        let a = m.logits(&src, &[1, 7, 8, 9, 10]).unwrap();
        let b = m.logits(&src, &[1, 7, 8, 4, 11]).unwrap();
        let vsz = m.config().tgt_vocab;
        assert_eq!(a.data()[..3 * vsz], b.data()[..3 * vsz], "{v}");
        assert_ne!(a.data()[3 * vsz..], b.data()[3 * vsz..], "{v}");
    }
}

#[test]
fn batched_forward_matches_single_sentences() {
    for v in Variant::ALL {
        let m = Model::new(toy(v), 12).unwrap();
        let srcs: [&[usize]; 3] = [&[4, 5, 6], &[7], &[8, 9, 10, 11, 4]];
        let tgts: [&[usize]; 3] = [&[1, 5], &[1, 6, 7, 8], &[1]];
        let mut g = Graph::with_params(m.params());
        let (logits, recs) = m.forward(&mut g, &srcs, &tgts, None, true).unwrap();
        assert_rows_normalized(&recs);
        let batched = g.value(logits).to_vec();
        let mut single = Vec::new();
        for (s, t) in srcs.iter().zip(tgts) {
            single.extend_from_slice(m.logits(s, t).unwrap().data());
        }
        for (x, y) in batched.iter().zip(&single) {
            assert!((x - y).abs() < 1e-10, "{v}: {x} vs {y}");
        }
    }
}

#[test]
fn tied_output_projection_shares_storage() {
    let mut m = Model::new(toy(Variant::Transformer), 13).unwrap();
    assert_eq!(m.output_projection_id(), m.source_embedding_id());
    assert_eq!(m.output_projection_id(), m.target_embedding_id());
    let before = m.logits(&[4], &[1]).unwrap();
    let id = m.source_embedding_id();
    m.params_mut().get_mut(id).data_mut()[5 * 16] += 1.0;
    let after = m.logits(&[4], &[1]).unwrap();
    assert_ne!(before.data()[5], after.data()[5]);
    assert_eq!(m.embedding_ids().len(), 1);
}

#[test]
fn allocated_parameters_match_closed_form() {
    for v in Variant::ALL {
        let c = toy(v);
        let m = Model::new(c.clone(), 0).unwrap();
        assert_eq!(m.num_parameters(), c.parameter_count(), "{v}");
        let mut u = c.clone();
        u.tie_embeddings = false;
        assert_eq!(Model::new(u.clone(), 0).unwrap().num_parameters(), u.parameter_count(), "{v} untied");
    }
}

#[test]
fn encoder_layer_delta_matches_allocation() {
    let base = ModelConfig {
        decoder_layers: 1,
        d_model: 32,
        ff_dim: 48,
        ..ModelConfig::toy(10)
    };
    for family in [Variant::TransNoEnc, Variant::Rnns2sNoEnc] {
        let zero = family.configure(&base);
        let mut three = zero.clone();
        three.encoder_layers = 3;
        let delta = Model::new(three, 0).unwrap().num_parameters() - Model::new(zero.clone(), 0).unwrap().num_parameters();
        assert_eq!(delta, 3 * zero.encoder_layer_parameters());
    }
}

#[test]
fn no_attention_records_are_empty() {
    for v in [Variant::Rnns2sNoAtt, Variant::Rnns2sNoAttNoEnc] {
        let m = Model::new(toy(v), 14).unwrap();
        let mut g = Graph::with_params(m.params());
        let (_, rec) = m.forward(&mut g, &[&[4, 5]], &[&[1, 6]], None, true).unwrap();
        assert_eq!(rec.len(), 1);
        assert!(rec[0].is_empty());
    }
}

#[test]
fn records_have_one_layer_per_decoder_layer() {
    let m = Model::new(toy(Variant::Transformer), 15).unwrap();
    let mut g = Graph::with_params(m.params());
    let (_, rec) = m.forward(&mut g, &[&[4, 5, 6, 7]], &[&[1, 6, 8]], None, true).unwrap();
    assert_eq!(rec[0].layers(), 2);
    assert_eq!(rec[0].heads(), 2);
    assert_eq!(rec[0].tgt_len(), 3);
    assert_eq!(rec[0].src_len(), 4);
}

#[test]
fn no_attention_no_encoder_summary_is_mean_of_embeddings() {
    let m = Model::new(toy(Variant::Rnns2sNoAttNoEnc), 16).unwrap();
    let rep = m.source_representation(&[4, 5, 6]).unwrap();
    let enc = m.encode(&[4, 5, 6]).unwrap();
    let summary = enc.summary.unwrap();
    for j in 0..16 {
        let mean = (0..3).map(|r| rep.matrix.row(r)[j]).sum::<f64>() / 3.0;
        assert!((summary.data()[j] - mean).abs() < 1e-12);
    }
}

#[test]
fn next_log_probs_match_full_logits() {
    for v in Variant::ALL {
        let m = Model::new(toy(v), 17).unwrap();
        let src = [4, 9, 10];
        let enc = m.encode(&src).unwrap();
        let lp = m.next_log_probs(&enc, &[vec![1, 5, 6], vec![1]]).unwrap();
        let full = m.logits(&src, &[1, 5, 6]).unwrap();
        let row = crate::tensor::kernels::log_softmax_row(full.row(2));
        for (a, b) in lp[0].iter().zip(&row) {
            assert!((a - b).abs() < 1e-10);
        }
        let z: f64 = lp[1].iter().map(|x| x.exp()).sum();
        assert!((z - 1.0).abs() < 1e-9);
    }
}

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let tokens: Vec<String> = (0..8).map(|i| format!("w{i}")).collect();
    let vocab = crate::data::Vocabulary::from_tokens(tokens).unwrap();
    let c = toy(Variant::Rnns2s);
    let c = ModelConfig { src_vocab: vocab.len(), tgt_vocab: vocab.len(), ..c };
    let m = Model::new(c, 18).unwrap();
    m.save(&vocab, &path).unwrap();
    let (back, v2) = Model::load(&path).unwrap();
    assert_eq!(v2, vocab);
    assert_eq!(back.config(), m.config());
    assert_eq!(back.logits(&[4, 5], &[1, 6]).unwrap(), m.logits(&[4, 5], &[1, 6]).unwrap());
}

#[test]
fn from_parts_rejects_shape_mismatch() {
    let m = Model::new(toy(Variant::TransNoEnc), 0).unwrap();
    let (mut c, p) = m.into_parts();
    c.d_model = 32;
    assert!(matches!(Model::from_parts(c, p), Err(Error::Config(_))));
}

#[test]
fn model_is_shareable_across_threads() {
    fn assert_sync<T: Send + Sync>() {}
    assert_sync::<Model>();
    assert_sync::<EncodedSource>();
}
