//! Synthetic translation tasks over a 50-entry vocabulary: four reserved
//! ids plus 46 content tokens.

use nmt_ablation::analysis::corpus_bleu;
use nmt_ablation::data::{Pair, BOS, EOS};
use nmt_ablation::inference::{translate_all, BeamConfig};
use nmt_ablation::model::Model;
use rand::Rng;

pub const VOCAB: usize = 50;
const FIRST_CONTENT: usize = 4;

fn corpus(n: usize, seed: u64, reverse: bool) -> Vec<Pair> {
    let mut r = nmt_ablation::rng::seeded(seed);
    (0..n)
        .map(|_| {
            let len = r.random_range(3..=8);
            let src: Vec<usize> = (0..len).map(|_| r.random_range(FIRST_CONTENT..VOCAB)).collect();
            let mut tgt = vec![BOS];
            if reverse {
                tgt.extend(src.iter().rev());
            } else {
                tgt.extend(&src);
            }
            tgt.push(EOS);
            Pair::new(src, tgt)
        })
        .collect()
}

pub fn reversal(n: usize, seed: u64) -> Vec<Pair> {
    corpus(n, seed, true)
}

pub fn copy(n: usize, seed: u64) -> Vec<Pair> {
    corpus(n, seed, false)
}

pub struct Task {
    pub train: Vec<Pair>,
    pub valid: Vec<Pair>,
    pub test: Vec<Pair>,
}

/// 500 training sentences with separate validation and test draws.
pub fn reversal_task(seed: u64) -> Task {
    Task {
        train: reversal(500, 1000 + seed),
        valid: reversal(50, 2000 + seed),
        test: reversal(100, 3000 + seed),
    }
}

fn words(ids: &[usize]) -> String {
    ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ")
}

/// Corpus BLEU of beam-search output against the reference targets.
pub fn bleu(model: &Model, test: &[Pair], cfg: &BeamConfig) -> f64 {
    let sources: Vec<Vec<usize>> = test.iter().map(|p| p.source.clone()).collect();
    let hyps = translate_all(model, &sources, cfg).unwrap();
    let hyps: Vec<String> = hyps.iter().map(|h| words(h.content())).collect();
    let refs: Vec<String> = test
        .iter()
        .map(|p| {
            let out = p.decoder_output();
            words(&out[..out.len() - 1])
        })
        .collect();
    corpus_bleu(&hyps, &refs).unwrap()
}
