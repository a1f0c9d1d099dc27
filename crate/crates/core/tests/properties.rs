use std::collections::BTreeSet;

use nmt_ablation::analysis::{aer, corpus_bleu, links_from_matrix, merge_subword_attention, row_entropy, AlignmentLinks, GoldAlignment};
use nmt_ablation::data::{make_batches, Pair, Vocabulary};
use nmt_ablation::subword::{learn_bpe, restore_words, DEFAULT_MARKER};
use proptest::prelude::*;

fn word() -> impl Strategy<Value = String> {
    "[a-eé@]{1,8}"
}

fn sentence() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(word(), 1..8)
}

fn stochastic_row(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, n).prop_map(|r| {
        let z: f64 = r.iter().sum();
        r.into_iter().map(|x| x / z).collect()
    })
}

fn spans_for(sizes: &[usize]) -> Vec<std::ops::RangeInclusive<usize>> {
    let mut at = 0;
    sizes
        .iter()
        .map(|&n| {
            let s = at..=at + n - 1;
            at += n;
            s
        })
        .collect()
}

proptest! {
    #[test]
    fn bpe_restore_inverts_apply(train in prop::collection::vec(word(), 1..40), merges in 0usize..30, s in sentence()) {
        let s = s.join(" ");
        prop_assume!(!s.contains(DEFAULT_MARKER));
        let model = learn_bpe(train.iter().map(String::as_str), merges, DEFAULT_MARKER).unwrap();
        let pieces = model.apply(&s);
        let restored = restore_words(&pieces, DEFAULT_MARKER);
        prop_assert_eq!(restored.words.join(" "), s);
        prop_assert_eq!(restored.spans.last().map(|r| *r.end() + 1), Some(pieces.len()));
    }

    #[test]
    fn vocabulary_encode_decode(lines in prop::collection::vec(sentence(), 1..10)) {
        let text: Vec<String> = lines.iter().map(|l| l.join(" ")).collect();
        let vocab = Vocabulary::build(&text, 1).unwrap();
        for line in &text {
            prop_assert_eq!(&vocab.decode(&vocab.encode_source(line)), line);
            prop_assert_eq!(&vocab.decode(&vocab.encode_target(line)), line);
        }
        prop_assert_eq!(Vocabulary::from_text(&vocab.to_text()).unwrap(), vocab);
    }

    #[test]
    fn batching_preserves_the_multiset(
        lens in prop::collection::vec((1usize..10, 1usize..10), 1..60),
        budget in 1usize..40,
        seed in any::<u64>(),
    ) {
        let pairs: Vec<Pair> = lens
            .iter()
            .enumerate()
            .map(|(i, &(s, t))| Pair::new(vec![i + 4; s], [vec![1], vec![i + 4; t], vec![2]].concat()))
            .collect();
        let batches = make_batches(&pairs, budget, seed);
        let mut got: Vec<Pair> = batches.iter().flat_map(|b| b.pairs.clone()).collect();
        let mut want = pairs.clone();
        let key = |p: &Pair| (p.source.clone(), p.target.clone());
        got.sort_by_key(key);
        want.sort_by_key(key);
        prop_assert_eq!(got, want);
        for b in &batches {
            prop_assert!(b.token_count <= budget || b.len() == 1);
        }
    }

    #[test]
    fn bleu_ignores_sentence_order(
        pairs in prop::collection::vec((sentence(), sentence()), 1..10),
        rot in 0usize..10,
    ) {
        let hyps: Vec<String> = pairs.iter().map(|p| p.0.join(" ")).collect();
        let refs: Vec<String> = pairs.iter().map(|p| p.1.join(" ")).collect();
        let a = corpus_bleu(&hyps, &refs).unwrap();
        let k = rot % hyps.len();
        let (mut h2, mut r2) = (hyps.clone(), refs.clone());
        h2.rotate_left(k);
        r2.rotate_left(k);
        prop_assert!((a - corpus_bleu(&h2, &r2).unwrap()).abs() < 1e-9);
        prop_assert!((0.0..=100.0).contains(&a));
    }

    #[test]
    fn entropy_ignores_source_order(row in (1usize..12).prop_flat_map(stochastic_row), rot in 0usize..12) {
        let mut p = row.clone();
        p.rotate_left(rot % row.len());
        p.reverse();
        prop_assert!((row_entropy(&row) - row_entropy(&p)).abs() < 1e-12);
        prop_assert!(row_entropy(&row) <= (row.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn aer_is_zero_between_sure_and_possible(cells in prop::collection::vec((0usize..6, 0usize..6, 0u8..3), 0..30)) {
        // 0: sure and predicted, 1: possible and predicted, 2: possible only
        let sure: BTreeSet<_> = cells.iter().filter(|c| c.2 == 0).map(|c| (c.0, c.1)).collect();
        let possible: BTreeSet<_> = cells.iter().map(|c| (c.0, c.1)).collect();
        let predicted: BTreeSet<_> = cells.iter().filter(|c| c.2 < 2).map(|c| (c.0, c.1)).chain(sure.iter().copied()).collect();
        let v = aer(&AlignmentLinks(predicted), &GoldAlignment { sure, possible }).unwrap();
        prop_assert_eq!(v, 0.0);
    }

    #[test]
    fn alignment_covers_every_word(
        (t, s, m) in (1usize..7, 1usize..7).prop_flat_map(|(t, s)| {
            (Just(t), Just(s), prop::collection::vec(stochastic_row(s), t))
        }),
    ) {
        let links = links_from_matrix(&m);
        for i in 0..s {
            prop_assert!(links.0.iter().any(|l| l.0 == i));
        }
        for j in 0..t {
            prop_assert!(links.0.iter().any(|l| l.1 == j));
        }
        prop_assert!(links.len() >= s.max(t));
        prop_assert!(links.len() <= s + t);
    }

    #[test]
    fn source_merging_keeps_rows_stochastic(
        (sizes, rows) in prop::collection::vec(1usize..4, 1..6).prop_flat_map(|sizes| {
            let n: usize = sizes.iter().sum();
            (Just(sizes), prop::collection::vec(stochastic_row(n), 1..6))
        }),
    ) {
        let tgt = spans_for(&vec![1; rows.len()]);
        let merged = merge_subword_attention(&rows, &spans_for(&sizes), &tgt).unwrap();
        for r in &merged {
            prop_assert_eq!(r.len(), sizes.len());
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
