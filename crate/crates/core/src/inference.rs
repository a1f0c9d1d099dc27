//! Beam search, greedy decoding, forced decoding with attention capture, and
//! the attention dump format.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::Path;

use crate::data::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::{AttentionRecord, EncodedSource, Model};
use crate::par;
use crate::tensor::Graph;

pub const DEFAULT_BEAM: usize = 8;
pub const DEFAULT_MAX_LEN: usize = 100;

/// A next-token distribution conditioned on a source sentence.
pub trait StepScorer: Sync {
    type Source;

    fn start(&self, src: &[usize]) -> Result<Self::Source>;

    /// Log-probabilities over the vocabulary after each prefix. Prefixes
    /// start with BOS.
    fn next_log_probs(&self, source: &Self::Source, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>>;

    fn eos(&self) -> usize {
        EOS
    }

    /// Whether `token` may be produced at all.
    fn can_emit(&self, token: usize) -> bool {
        token != PAD && token != BOS
    }
}

impl StepScorer for Model {
    type Source = EncodedSource;

    fn start(&self, src: &[usize]) -> Result<EncodedSource> {
        self.encode(src)
    }

    fn next_log_probs(&self, source: &EncodedSource, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        Model::next_log_probs(self, source, prefixes)
    }
}

/// A decoded target sequence (without BOS).
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Ends in EOS once finished.
    pub tokens: Vec<usize>,
    /// Sum of the log-probabilities of every chosen token. An EOS appended
    /// by force at the length limit contributes nothing.
    pub log_prob: f64,
    pub finished: bool,
    /// Hit the length limit and was closed with a forced EOS.
    pub truncated: bool,
}

impl Hypothesis {
    /// `log_prob / len^alpha`, with len counting the final EOS.
    pub fn score(&self, alpha: f64) -> f64 {
        let len = self.tokens.len().max(1) as f64;
        self.log_prob / len.powf(alpha)
    }

    /// Tokens without the trailing EOS.
    pub fn content(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamConfig {
    pub beam: usize,
    /// Maximum generated tokens before a forced EOS.
    pub max_len: usize,
    /// Length-normalization exponent for final ranking.
    pub alpha: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam: DEFAULT_BEAM,
            max_len: DEFAULT_MAX_LEN,
            alpha: 1.0,
        }
    }
}

fn better(a: &Hypothesis, b: &Hypothesis, alpha: f64) -> bool {
    match a.score(alpha).total_cmp(&b.score(alpha)) {
        Ordering::Greater => true,
        Ordering::Less => false,
        Ordering::Equal => a.tokens < b.tokens,
    }
}

/// Beam search. At each step every live hypothesis is expanded by every
/// emittable token; the `beam` best expansions by cumulative log-probability
/// survive (ties go to the lexicographically smaller sequence). Expansions
/// ending in EOS leave the live set. Live hypotheses at `max_len` are closed
/// with a forced EOS and flagged. The result maximizes the length-normalized
/// score.
pub fn beam_search<S: StepScorer + ?Sized>(scorer: &S, src: &[usize], cfg: &BeamConfig) -> Result<Hypothesis> {
    if cfg.beam == 0 {
        return Err(Error::Config("beam size must be positive".into()));
    }
    if cfg.max_len == 0 {
        return Err(Error::Config("max_len must be positive".into()));
    }
    let eos = scorer.eos();
    let source = scorer.start(src)?;
    let mut live = vec![(Vec::<usize>::new(), 0.0f64)];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..cfg.max_len {
        let prefixes: Vec<Vec<usize>> = live
            .iter()
            .map(|(t, _)| std::iter::once(BOS).chain(t.iter().copied()).collect())
            .collect();
        let dists = scorer.next_log_probs(&source, &prefixes)?;
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (h, dist) in dists.iter().enumerate() {
            for (tok, &lp) in dist.iter().enumerate() {
                if scorer.can_emit(tok) && lp > f64::NEG_INFINITY {
                    cands.push((live[h].1 + lp, h, tok));
                }
            }
        }
        // equal-length prefixes, so this orders whole sequences lexicographically
        cands.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then_with(|| live[a.1].0.cmp(&live[b.1].0))
                .then(a.2.cmp(&b.2))
        });
        cands.truncate(cfg.beam);
        let mut next = Vec::with_capacity(cands.len());
        for (lp, h, tok) in cands {
            let mut tokens = live[h].0.clone();
            tokens.push(tok);
            if tok == eos {
                finished.push(Hypothesis { tokens, log_prob: lp, finished: true, truncated: false });
            } else {
                next.push((tokens, lp));
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
    }
    for (mut tokens, lp) in live {
        tokens.push(eos);
        finished.push(Hypothesis { tokens, log_prob: lp, finished: true, truncated: true });
    }
    let mut best = finished.pop().ok_or_else(|| Error::Contract("beam search produced no hypothesis".into()))?;
    for h in finished {
        if better(&h, &best, cfg.alpha) {
            best = h;
        }
    }
    Ok(best)
}

/// Argmax decoding (ties to the smaller id).
pub fn greedy<S: StepScorer + ?Sized>(scorer: &S, src: &[usize], max_len: usize) -> Result<Hypothesis> {
    let eos = scorer.eos();
    let source = scorer.start(src)?;
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    for _ in 0..max_len {
        let prefix: Vec<usize> = std::iter::once(BOS).chain(tokens.iter().copied()).collect();
        let dist = scorer.next_log_probs(&source, &[prefix])?.remove(0);
        let (tok, lp) = dist
            .iter()
            .enumerate()
            .filter(|(t, _)| scorer.can_emit(*t))
            .fold((usize::MAX, f64::NEG_INFINITY), |acc, (t, &lp)| if lp > acc.1 { (t, lp) } else { acc });
        if tok == usize::MAX {
            return Err(Error::Contract("no emittable token".into()));
        }
        tokens.push(tok);
        log_prob += lp;
        if tok == eos {
            return Ok(Hypothesis { tokens, log_prob, finished: true, truncated: false });
        }
    }
    tokens.push(eos);
    Ok(Hypothesis { tokens, log_prob, finished: true, truncated: true })
}

/// Beam-decodes every source sentence, in parallel across sentences.
pub fn translate_all(model: &Model, sources: &[Vec<usize>], cfg: &BeamConfig) -> Result<Vec<Hypothesis>> {
    par::map(sources, |s| beam_search(model, s, cfg)).into_iter().collect()
}

/// Teacher-forced pass over a reference.
#[derive(Debug, Clone, PartialEq)]
pub struct ForcedDecoding {
    /// The emitted tokens: the reference itself.
    pub tokens: Vec<usize>,
    /// Log-probability the model assigns to each emitted token.
    pub log_probs: Vec<f64>,
    /// `[decoder layer][head][reference position][source position]`; empty
    /// for models without attention.
    pub record: AttentionRecord,
}

/// Feeds `[BOS] + reference[..n-1]` and reads the attention over the source
/// for each of the `n` reference tokens (no BOS/EOS in `reference`).
pub fn forced_decode(model: &Model, src: &[usize], reference: &[usize]) -> Result<ForcedDecoding> {
    if reference.is_empty() {
        return Err(Error::Data("forced decoding needs a non-empty reference".into()));
    }
    let input: Vec<usize> = std::iter::once(BOS).chain(reference[..reference.len() - 1].iter().copied()).collect();
    let mut g = Graph::with_params(model.params());
    let (logits, mut records) = model.forward(&mut g, &[src], &[&input], None, true)?;
    let v = model.config().tgt_vocab;
    let log_probs = g
        .value(logits)
        .chunks(v)
        .zip(reference)
        .map(|(row, &t)| crate::tensor::kernels::log_softmax_row(row)[t])
        .collect();
    Ok(ForcedDecoding {
        tokens: reference.to_vec(),
        log_probs,
        record: records.pop().unwrap_or_default(),
    })
}

/// Forced decoding of many pairs, parallel across sentences, in input order.
pub fn forced_decode_all(model: &Model, pairs: &[(Vec<usize>, Vec<usize>)]) -> Result<Vec<ForcedDecoding>> {
    par::map(pairs, |(s, r)| forced_decode(model, s, r)).into_iter().collect()
}

/// Appends one record in dump format:
/// `sent <id> layers=<L> heads=<H> tgt=<T> src=<S>` and then `L*H*T` rows.
pub fn format_attention_record(out: &mut String, id: usize, record: &AttentionRecord) {
    let _ = writeln!(
        out,
        "sent {id} layers={} heads={} tgt={} src={}",
        record.layers(),
        record.heads(),
        record.tgt_len(),
        record.src_len()
    );
    for row in record.rows() {
        let mut first = true;
        for w in row {
            if !first {
                out.push(' ');
            }
            first = false;
            let _ = write!(out, "{w}");
        }
        out.push('\n');
    }
}

pub fn write_attention_dump(path: impl AsRef<Path>, records: &[AttentionRecord]) -> Result<()> {
    let mut text = String::new();
    for (i, r) in records.iter().enumerate() {
        format_attention_record(&mut text, i, r);
    }
    std::fs::write(path.as_ref(), text).map_err(|e| Error::io(path.as_ref(), e))
}

fn header_field(part: Option<&str>, key: &str, line_no: usize) -> Result<usize> {
    part.and_then(|p| p.strip_prefix(key))
        .and_then(|p| p.strip_prefix('='))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Data(format!("attention dump line {line_no}: expected {key}=<count>")))
}

/// Parses an attention dump into `(sentence id, record)` pairs.
pub fn parse_attention_dump(text: &str) -> Result<Vec<(usize, AttentionRecord)>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let mut out = Vec::new();
    while let Some((n, header)) = lines.next() {
        let mut parts = header.split_whitespace();
        if parts.next() != Some("sent") {
            return Err(Error::Data(format!("attention dump line {}: expected a sent header", n + 1)));
        }
        let id = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Data(format!("attention dump line {}: bad sentence id", n + 1)))?;
        let layers = header_field(parts.next(), "layers", n + 1)?;
        let heads = header_field(parts.next(), "heads", n + 1)?;
        let tgt = header_field(parts.next(), "tgt", n + 1)?;
        let src = header_field(parts.next(), "src", n + 1)?;
        let mut weights = vec![vec![Vec::with_capacity(tgt); heads]; layers];
        for layer in weights.iter_mut() {
            for head in layer.iter_mut() {
                for _ in 0..tgt {
                    let (m, row) = lines
                        .next()
                        .ok_or_else(|| Error::Data(format!("attention dump: sentence {id} is truncated")))?;
                    let vals: Vec<f64> = row
                        .split_whitespace()
                        .map(|v| {
                            v.parse()
                                .map_err(|_| Error::Data(format!("attention dump line {}: bad number {v:?}", m + 1)))
                        })
                        .collect::<Result<_>>()?;
                    if vals.len() != src {
                        return Err(Error::Data(format!(
                            "attention dump line {}: {} values, header says src={src}",
                            m + 1,
                            vals.len()
                        )));
                    }
                    head.push(vals);
                }
            }
        }
        out.push((id, AttentionRecord { weights }));
    }
    Ok(out)
}

pub fn read_attention_dump(path: impl AsRef<Path>) -> Result<Vec<(usize, AttentionRecord)>> {
    let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    parse_attention_dump(&text)
}
