//! Parallel corpora, vocabularies and token-budget batching.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Token budget per mini-batch, counted on the target side.
pub const DEFAULT_BATCH_TOKENS: usize = 2048;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Frequency-sorted vocabulary over `sentences` (whitespace tokens).
    /// Equal counts are ordered lexicographically; tokens seen fewer than
    /// `min_count` times are left out and later map to UNK.
    pub fn build<S: AsRef<str>>(sentences: &[S], min_count: usize) -> Result<Self> {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for s in sentences {
            for tok in s.as_ref().split_whitespace() {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut entries: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, c)| c >= min_count && !SPECIALS.contains(&t))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Self::from_tokens(entries.into_iter().map(|(t, _)| t.to_string()))
    }

    /// Vocabulary with the reserved entries followed by `tokens` in order.
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Result<Self> {
        let mut v = Self {
            tokens: SPECIALS.iter().map(|s| s.to_string()).collect(),
            ids: SPECIALS.iter().enumerate().map(|(i, s)| (s.to_string(), i)).collect(),
        };
        for t in tokens {
            if v.ids.contains_key(&t) {
                return Err(Error::Data(format!("duplicate vocabulary entry {t:?}")));
            }
            v.ids.insert(t.clone(), v.tokens.len());
            v.tokens.push(t);
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(SPECIALS[UNK])
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Source side: plain ids, no sentence markers.
    pub fn encode_source(&self, sentence: &str) -> Vec<usize> {
        sentence.split_whitespace().map(|t| self.id(t)).collect()
    }

    /// Target side: BOS, ids, EOS.
    pub fn encode_target(&self, sentence: &str) -> Vec<usize> {
        let mut ids = vec![BOS];
        ids.extend(sentence.split_whitespace().map(|t| self.id(t)));
        ids.push(EOS);
        ids
    }

    /// Joins tokens, dropping PAD/BOS/EOS.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| !matches!(i, PAD | BOS | EOS))
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// `token<TAB>id` lines.
    pub fn to_text(&self) -> String {
        self.tokens
            .iter()
            .enumerate()
            .map(|(i, t)| format!("{t}\t{i}\n"))
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut rows: Vec<(usize, String)> = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
            let (tok, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::Data(format!("vocabulary line {}: missing tab", n + 1)))?;
            let id = id
                .parse()
                .map_err(|_| Error::Data(format!("vocabulary line {}: bad id {id:?}", n + 1)))?;
            rows.push((id, tok.to_string()));
        }
        rows.sort();
        if rows.iter().enumerate().any(|(i, (id, _))| *id != i) {
            return Err(Error::Data("vocabulary ids must be dense from 0".into()));
        }
        if rows.len() < SPECIALS.len() || rows.iter().zip(SPECIALS).any(|((_, t), s)| t != s) {
            return Err(Error::Data("vocabulary must start with the reserved tokens".into()));
        }
        Self::from_tokens(rows.into_iter().skip(SPECIALS.len()).map(|(_, t)| t))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Self::from_text(&text)
    }
}

/// One encoded sentence pair. `target` includes BOS and EOS.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pair {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

impl Pair {
    pub fn new(source: Vec<usize>, target: Vec<usize>) -> Self {
        Self { source, target }
    }

    /// Decoder inputs: the target without its final token.
    pub fn decoder_input(&self) -> &[usize] {
        &self.target[..self.target.len() - 1]
    }

    /// Decoder outputs: the target without BOS.
    pub fn decoder_output(&self) -> &[usize] {
        &self.target[1..]
    }
}

pub fn encode_corpus<S: AsRef<str>>(vocab: &Vocabulary, source: &[S], target: &[S]) -> Result<Vec<Pair>> {
    if source.len() != target.len() {
        return Err(Error::Data(format!(
            "parallel corpus has {} source and {} target lines",
            source.len(),
            target.len()
        )));
    }
    Ok(source
        .iter()
        .zip(target)
        .map(|(s, t)| Pair::new(vocab.encode_source(s.as_ref()), vocab.encode_target(t.as_ref())))
        .collect())
}

/// Length filters applied when reading training data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LengthFilter {
    pub max_len: usize,
    pub max_ratio: f64,
}

impl Default for LengthFilter {
    fn default() -> Self {
        Self {
            max_len: 100,
            max_ratio: 9.0,
        }
    }
}

impl LengthFilter {
    pub fn keeps(&self, src_words: usize, tgt_words: usize) -> bool {
        if src_words == 0 || tgt_words == 0 || src_words > self.max_len || tgt_words > self.max_len {
            return false;
        }
        let (a, b) = (src_words as f64, tgt_words as f64);
        a.max(b) / a.min(b) <= self.max_ratio
    }
}

pub fn read_lines(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    Ok(text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect())
}

/// Reads two aligned files (one sentence per line) and drops pairs rejected
/// by `filter`.
pub fn read_parallel(src: impl AsRef<Path>, tgt: impl AsRef<Path>, filter: Option<LengthFilter>) -> Result<(Vec<String>, Vec<String>)> {
    let s = read_lines(&src)?;
    let t = read_lines(&tgt)?;
    if s.len() != t.len() {
        return Err(Error::Data(format!(
            "{} has {} lines but {} has {}",
            src.as_ref().display(),
            s.len(),
            tgt.as_ref().display(),
            t.len()
        )));
    }
    Ok(match filter {
        None => (s, t),
        Some(f) => s
            .into_iter()
            .zip(t)
            .filter(|(a, b)| f.keeps(a.split_whitespace().count(), b.split_whitespace().count()))
            .unzip(),
    })
}

/// A padded mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub pairs: Vec<Pair>,
    /// `[sentences x max_src_len]`, PAD-filled
    pub source: Vec<Vec<usize>>,
    /// `[sentences x max_tgt_len]`, PAD-filled
    pub target: Vec<Vec<usize>>,
    pub source_mask: Vec<Vec<bool>>,
    pub target_mask: Vec<Vec<bool>>,
    /// Non-pad target tokens.
    pub token_count: usize,
}

impl Batch {
    pub fn new(pairs: Vec<Pair>) -> Self {
        let max_src = pairs.iter().map(|p| p.source.len()).max().unwrap_or(0);
        let max_tgt = pairs.iter().map(|p| p.target.len()).max().unwrap_or(0);
        let pad = |ids: &[usize], n: usize| {
            let mut v = ids.to_vec();
            v.resize(n, PAD);
            v
        };
        let mask = |len: usize, n: usize| (0..n).map(|i| i < len).collect::<Vec<_>>();
        Self {
            source: pairs.iter().map(|p| pad(&p.source, max_src)).collect(),
            target: pairs.iter().map(|p| pad(&p.target, max_tgt)).collect(),
            source_mask: pairs.iter().map(|p| mask(p.source.len(), max_src)).collect(),
            target_mask: pairs.iter().map(|p| mask(p.target.len(), max_tgt)).collect(),
            token_count: pairs.iter().map(|p| p.target.len()).sum(),
            pairs,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Greedy length-bucketed packing under a target-token budget. Pairs are
/// shuffled with `seed`, stably sorted by target length, packed in order,
/// and the resulting batches shuffled again. A pair larger than the budget
/// gets a batch of its own.
pub fn make_batches(pairs: &[Pair], token_budget: usize, seed: u64) -> Vec<Batch> {
    let mut rng = rng::seeded(seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);
    order.sort_by_key(|&i| pairs[i].target.len());

    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut used = 0;
    for i in order {
        let n = pairs[i].target.len();
        if n > token_budget {
            log::warn!("pair {i} has {n} target tokens, over the budget of {token_budget}; batching it alone");
            groups.push(vec![i]);
            continue;
        }
        if used + n > token_budget && !current.is_empty() {
            groups.push(std::mem::take(&mut current));
            used = 0;
        }
        current.push(i);
        used += n;
    }
    if !current.is_empty() {
        groups.push(current);
    }
    groups.shuffle(&mut rng);
    groups
        .into_iter()
        .map(|g| Batch::new(g.into_iter().map(|i| pairs[i].clone()).collect()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_token_corpus() {
        let v = Vocabulary::build(&["a"], 1).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("a"), 4);
    }

    #[test]
    fn equal_frequency_tie_is_lexicographic() {
        let v = Vocabulary::build(&["b a", "a b"], 1).unwrap();
        assert!(v.id("a") < v.id("b"));
    }

    #[test]
    fn min_count_maps_rare_tokens_to_unk() {
        let v = Vocabulary::build(&["x x y"], 2).unwrap();
        assert_eq!(v.id("y"), UNK);
        assert_eq!(v.id("x"), 4);
    }

    #[test]
    fn empty_corpus_is_a_data_error() {
        let empty: [&str; 0] = [];
        assert!(matches!(Vocabulary::build(&empty, 1), Err(Error::Data(_))));
        assert!(matches!(Vocabulary::build(&["  "], 1), Err(Error::Data(_))));
    }

    #[test]
    fn encoding_conventions() {
        let v = Vocabulary::build(&["hello world"], 1).unwrap();
        assert_eq!(v.encode_source("hello world"), vec![v.id("hello"), v.id("world")]);
        let t = v.encode_target("world");
        assert_eq!(t, vec![BOS, v.id("world"), EOS]);
        assert_eq!(v.decode(&t), "world");
        assert_eq!(v.encode_source("foo bar"), vec![UNK, UNK]);
    }

    #[test]
    fn vocab_text_round_trip() {
        let v = Vocabulary::build(&["c b a a"], 1).unwrap();
        let text = v.to_text();
        assert!(text.starts_with("<pad>\t0\n<s>\t1\n</s>\t2\n<unk>\t3\n"));
        assert_eq!(Vocabulary::from_text(&text).unwrap(), v);
    }

    #[test]
    fn exact_fit_is_one_batch() {
        let pairs: Vec<Pair> = (0..4).map(|i| Pair::new(vec![4 + i], vec![5; 512])).collect();
        let b = make_batches(&pairs, 2048, 0);
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].token_count, 2048);
    }

    #[test]
    fn budget_of_one_gives_singletons() {
        let pairs: Vec<Pair> = (0..7).map(|i| Pair::new(vec![4 + i], vec![1, 4 + i, 2])).collect();
        let b = make_batches(&pairs, 1, 3);
        assert_eq!(b.len(), 7);
        assert!(b.iter().all(|b| b.len() == 1));
    }

    #[test]
    fn batch_padding_and_masks() {
        let b = Batch::new(vec![Pair::new(vec![4, 5], vec![1, 4, 2]), Pair::new(vec![6], vec![1, 2])]);
        assert_eq!(b.source, vec![vec![4, 5], vec![6, PAD]]);
        assert_eq!(b.target[1], vec![1, 2, PAD]);
        assert_eq!(b.target_mask[1], vec![true, true, false]);
        assert_eq!(b.token_count, 5);
    }

    #[test]
    fn length_filter() {
        let f = LengthFilter::default();
        assert!(f.keeps(10, 12));
        assert!(!f.keeps(1, 10));
        assert!(!f.keeps(101, 100));
        assert!(!f.keeps(0, 3));
    }
}
