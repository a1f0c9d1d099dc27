use rand::Rng as _;

use super::*;
use crate::data::{BOS, EOS};
use crate::model::Variant;

fn small(variant: Variant, vocab: usize) -> ModelConfig {
    let mut c = variant.configure(&ModelConfig::toy(vocab));
    c.d_model = 16;
    c.ff_dim = 32;
    c.heads = 2;
    c
}

fn reversal(n: usize, vocab: usize, seed: u64) -> Vec<Pair> {
    let mut r = crate::rng::seeded(seed);
    (0..n)
        .map(|_| {
            let len = r.random_range(2..5);
            let s: Vec<usize> = (0..len).map(|_| r.random_range(4..vocab)).collect();
            let mut t = vec![BOS];
            t.extend(s.iter().rev());
            t.push(EOS);
            Pair::new(s, t)
        })
        .collect()
}

struct Certain;

impl SequenceScorer for Certain {
    fn gold_log_probs(&self, pairs: &[Pair]) -> Result<Vec<Vec<f64>>> {
        Ok(pairs.iter().map(|p| vec![0.0; p.decoder_output().len()]).collect())
    }
}

#[test]
fn uniform_model_has_vocabulary_perplexity() {
    let mut m = Model::new(small(Variant::Transformer, 7), 1).unwrap();
    let e = m.output_projection_id();
    m.params_mut().get_mut(e).data_mut().fill(0.0);
    let ppl = perplexity(&m, &reversal(5, 7, 2)).unwrap();
    assert!((ppl - 7.0).abs() < 1e-9, "{ppl}");
}

#[test]
fn certain_scorer_has_unit_perplexity() {
    assert_eq!(perplexity(&Certain, &reversal(4, 9, 3)).unwrap(), 1.0);
}

#[test]
fn perplexity_matches_token_oracle() {
    let m = Model::new(small(Variant::Rnns2s, 10), 4).unwrap();
    let corpus = reversal(3, 10, 5);
    let mut nll = 0.0;
    let mut tokens = 0;
    for p in &corpus {
        let logits = m.logits(&p.source, p.decoder_input()).unwrap();
        for (t, &gold) in p.decoder_output().iter().enumerate() {
            let row = logits.row(t);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            nll += lse - row[gold];
            tokens += 1;
        }
    }
    let expected = (nll / tokens as f64).exp();
    assert!((perplexity(&m, &corpus).unwrap() - expected).abs() < 1e-10);
}

#[test]
fn perplexity_of_empty_corpus_is_data_error() {
    assert!(matches!(perplexity(&Certain, &[]), Err(Error::Data(_))));
}

fn run_schedule(ppls: &[f64]) -> (TrainState, Vec<ScheduleOutcome>) {
    let cfg = TrainConfig::default();
    let mut s = TrainState::new(1e-4, 0);
    let out = ppls.iter().map(|&p| lr_schedule_step(&mut s, p, &cfg)).collect();
    (s, out)
}

#[test]
fn eight_flat_checkpoints_decay_once() {
    let mut ppls = vec![10.0];
    ppls.extend([10.0; 8]);
    let (s, out) = run_schedule(&ppls);
    assert!((s.lr - 0.00007).abs() < 1e-15);
    assert_eq!(out.iter().filter(|o| o.decayed).count(), 1);
    assert!(out[8].decayed);
}

#[test]
fn improving_validation_keeps_rate() {
    let ppls: Vec<f64> = (0..50).map(|i| 100.0 - i as f64).collect();
    let (s, _) = run_schedule(&ppls);
    assert_eq!(s.lr, 1e-4);
    assert_eq!(s.best_val_ppl, 51.0);
}

#[test]
fn sixteen_flat_checkpoints_decay_twice() {
    let mut ppls = vec![10.0];
    ppls.extend([11.0; 16]);
    let (s, _) = run_schedule(&ppls);
    // independent simulation: one decay per 8 stale checkpoints
    let mut lr = 1e-4;
    for stale in 1..=16 {
        if stale % 8 == 0 {
            lr *= 0.7;
        }
    }
    assert_eq!(s.lr, lr);
    assert!((s.lr - 4.9e-5).abs() < 1e-15);
}

#[test]
fn early_stop_fires_exactly_at_patience() {
    let mut ppls = vec![5.0];
    ppls.extend([6.0; 40]);
    let (_, out) = run_schedule(&ppls);
    let first_stop = out.iter().position(|o| o.stop).unwrap();
    assert_eq!(first_stop, 32);
    assert!(!out[31].stop);
}

#[test]
fn improvement_resets_patience() {
    let mut ppls = vec![5.0];
    ppls.extend([6.0; 31]);
    ppls.push(4.0);
    ppls.extend([6.0; 31]);
    let (_, out) = run_schedule(&ppls);
    assert!(out.iter().all(|o| !o.stop));
}

fn toy_train_cfg() -> TrainConfig {
    TrainConfig {
        adam: AdamConfig { lr: 3e-3, ..AdamConfig::default() },
        checkpoint_interval: 10,
        batch_tokens: 64,
        seed: 7,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_budget_returns_initial_model() {
    let c = small(Variant::TransNoEnc, 10);
    let data = reversal(20, 10, 1);
    let out = train(&c, Corpora { train: &data, valid: &data }, 0, &toy_train_cfg()).unwrap();
    let fresh = Model::new(c, toy_train_cfg().seed).unwrap();
    assert_eq!(out.best.params(), fresh.params());
    assert!(out.metrics.is_empty());
    assert_eq!(out.best_checkpoint, None);
}

#[test]
fn training_is_deterministic() {
    let c = small(Variant::Rnns2s, 10);
    let data = reversal(30, 10, 2);
    let corpora = Corpora { train: &data, valid: &data[..10] };
    let a = train(&c, corpora, 25, &toy_train_cfg()).unwrap();
    let b = train(&c, corpora, 25, &toy_train_cfg()).unwrap();
    assert_eq!(a.best.params(), b.best.params());
    assert_eq!(a.metrics, b.metrics);
}

#[test]
fn best_checkpoint_has_lowest_validation_perplexity() {
    let c = small(Variant::Transformer, 10);
    let data = reversal(40, 10, 3);
    let valid = reversal(10, 10, 4);
    let out = train(&c, Corpora { train: &data, valid: &valid }, 60, &toy_train_cfg()).unwrap();
    assert_eq!(out.metrics.len(), 6);
    let best = perplexity(&out.best, &valid).unwrap();
    for m in &out.metrics {
        assert!(best <= m.val_ppl + 1e-12);
    }
    let idx = out.best_checkpoint.unwrap();
    assert_eq!(out.metrics[idx - 1].val_ppl, best);
}

#[test]
fn tail_updates_get_a_final_checkpoint() {
    let c = small(Variant::TransNoEnc, 10);
    let data = reversal(20, 10, 5);
    let out = train(&c, Corpora { train: &data, valid: &data }, 15, &toy_train_cfg()).unwrap();
    let updates: Vec<u64> = out.metrics.iter().map(|m| m.updates).collect();
    assert_eq!(updates, vec![10, 15]);
}

#[test]
fn nan_loss_names_the_update() {
    let c = small(Variant::TransNoEnc, 10);
    let data = reversal(20, 10, 6);
    let mut m = Model::new(c, 1).unwrap();
    let e = m.output_projection_id();
    m.params_mut().get_mut(e).data_mut()[0] = f64::NAN;
    let err = train_model(m, Corpora { train: &data, valid: &data }, 5, &toy_train_cfg()).unwrap_err();
    match err {
        Error::Divergence { update, .. } => assert_eq!(update, 1),
        other => panic!("unexpected {other:?}"),
    }
    assert!(format!("{}", Error::Divergence { update: 1, detail: "x".into() }).contains('1'));
}

#[test]
fn loss_on_fixed_batch_decreases_over_first_updates() {
    let c = small(Variant::TransNoEnc, 10);
    let data = reversal(8, 10, 7);
    let cfg = TrainConfig { batch_tokens: 10_000, checkpoint_interval: 50, ..toy_train_cfg() };
    let before = perplexity(&Model::new(c.clone(), cfg.seed).unwrap(), &data).unwrap();
    let out = train(&c, Corpora { train: &data, valid: &data }, 50, &cfg).unwrap();
    assert!(out.metrics[0].val_ppl < before);
}

#[test]
fn frozen_parameters_do_not_move() {
    let c = small(Variant::Rnns2sNoEnc, 10);
    let data = reversal(20, 10, 8);
    let mut m = Model::new(c, 2).unwrap();
    let e = m.source_embedding_id();
    m.params_mut().set_frozen(e, true);
    let before = m.params().get(e).data().to_vec();
    let out = train_model(m, Corpora { train: &data, valid: &data }, 20, &toy_train_cfg()).unwrap();
    assert_eq!(out.best.params().get(e).data(), before.as_slice());
    assert!(out.best.params().is_frozen(e));
}

#[test]
fn metrics_file_is_tab_separated() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.tsv");
    let rows = vec![CheckpointMetrics { checkpoint_index: 1, updates: 1000, train_loss: 2.5, val_ppl: 9.0, lr: 1e-4 }];
    write_metrics(&path, &rows).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines[1], "1\t1000\t2.5\t9\t0.0001");
}

#[test]
fn invalid_schedule_rejected() {
    let c = small(Variant::TransNoEnc, 10);
    let data = reversal(4, 10, 9);
    let cfg = TrainConfig { checkpoint_interval: 0, ..TrainConfig::default() };
    assert!(matches!(
        train(&c, Corpora { train: &data, valid: &data }, 1, &cfg),
        Err(Error::Config(_))
    ));
}
