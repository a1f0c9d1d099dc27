use std::collections::BTreeSet;
use std::fmt;
use std::ops::RangeInclusive;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::AttentionRecord;

/// Word alignment links `(source word, target word)`, 0-based.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AlignmentLinks(pub BTreeSet<(usize, usize)>);

impl AlignmentLinks {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, src: usize, tgt: usize) -> bool {
        self.0.contains(&(src, tgt))
    }

    /// Parses one Pharaoh line of sure links (`i-j`, source first).
    pub fn parse_pharaoh(line: &str) -> Result<Self> {
        let gold = GoldAlignment::parse_pharaoh(line)?;
        if gold.possible != gold.sure {
            return Err(Error::Data(format!("predicted links may not be possible-only: {line:?}")));
        }
        Ok(Self(gold.sure))
    }
}

impl FromIterator<(usize, usize)> for AlignmentLinks {
    fn from_iter<I: IntoIterator<Item = (usize, usize)>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

impl fmt::Display for AlignmentLinks {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, (s, t)) in self.0.iter().enumerate() {
            if k > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{s}-{t}")?;
        }
        Ok(())
    }
}

/// Reference alignment: sure links `S` and possible links `P` (`S ⊆ P`).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GoldAlignment {
    pub sure: BTreeSet<(usize, usize)>,
    pub possible: BTreeSet<(usize, usize)>,
}

impl GoldAlignment {
    /// Parses `i-j` (sure) and `i?j` (possible) tokens. Sure links are
    /// also possible.
    pub fn parse_pharaoh(line: &str) -> Result<Self> {
        let mut g = Self::default();
        for tok in line.split_whitespace() {
            let (sep, sure) = if tok.contains('-') { ('-', true) } else { ('?', false) };
            let parsed = tok
                .split_once(sep)
                .and_then(|(a, b)| Some((a.parse::<usize>().ok()?, b.parse::<usize>().ok()?)));
            let Some(link) = parsed else {
                return Err(Error::Data(format!("bad alignment token {tok:?}")));
            };
            if sure {
                g.sure.insert(link);
            }
            g.possible.insert(link);
        }
        Ok(g)
    }
}

/// One Pharaoh line per sentence.
pub fn read_gold_alignments(path: impl AsRef<Path>) -> Result<Vec<GoldAlignment>> {
    crate::data::read_lines(path)?
        .iter()
        .enumerate()
        .map(|(i, l)| {
            GoldAlignment::parse_pharaoh(l).map_err(|e| Error::Data(format!("alignment line {}: {e}", i + 1)))
        })
        .collect()
}

/// Link counts behind AER.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AerCounts {
    pub predicted: usize,
    pub sure: usize,
    pub predicted_sure: usize,
    pub predicted_possible: usize,
}

impl AerCounts {
    pub fn new(pred: &AlignmentLinks, gold: &GoldAlignment) -> Result<Self> {
        if !gold.sure.is_subset(&gold.possible) {
            return Err(Error::Data("sure links must all be possible links".into()));
        }
        Ok(Self {
            predicted: pred.len(),
            sure: gold.sure.len(),
            predicted_sure: pred.0.intersection(&gold.sure).count(),
            predicted_possible: pred.0.intersection(&gold.possible).count(),
        })
    }

    /// `1 - (|A∩S| + |A∩P|) / (|A| + |S|)`, 0 when both sets are empty.
    pub fn aer(&self) -> f64 {
        let denom = self.predicted + self.sure;
        if denom == 0 {
            return 0.0;
        }
        1.0 - (self.predicted_sure + self.predicted_possible) as f64 / denom as f64
    }
}

impl std::ops::Add for AerCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            predicted: self.predicted + o.predicted,
            sure: self.sure + o.sure,
            predicted_sure: self.predicted_sure + o.predicted_sure,
            predicted_possible: self.predicted_possible + o.predicted_possible,
        }
    }
}

pub fn aer(pred: &AlignmentLinks, gold: &GoldAlignment) -> Result<f64> {
    Ok(AerCounts::new(pred, gold)?.aer())
}

/// AER over a corpus, with link counts pooled across sentences.
pub fn corpus_aer(preds: &[AlignmentLinks], golds: &[GoldAlignment]) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(Error::Data(format!(
            "{} predicted alignments for {} references",
            preds.len(),
            golds.len()
        )));
    }
    let mut total = AerCounts::default();
    for (p, g) in preds.iter().zip(golds) {
        total = total + AerCounts::new(p, g)?;
    }
    Ok(total.aer())
}

fn check_partition(spans: &[RangeInclusive<usize>], n: usize, axis: &str) -> Result<()> {
    let mut next = 0;
    for s in spans {
        if *s.start() != next || s.end() < s.start() {
            return Err(Error::Contract(format!("{axis} spans {spans:?} do not partition 0..{n}")));
        }
        next = s.end() + 1;
    }
    if next != n {
        return Err(Error::Contract(format!("{axis} spans {spans:?} do not partition 0..{n}")));
    }
    Ok(())
}

/// Word-level attention from subword attention `[tgt subword][src subword]`:
/// source subwords of one word are summed, then target subword rows of one
/// word are averaged.
pub fn merge_subword_attention(
    weights: &[Vec<f64>],
    src_spans: &[RangeInclusive<usize>],
    tgt_spans: &[RangeInclusive<usize>],
) -> Result<Vec<Vec<f64>>> {
    let src_len = weights.first().map_or(0, Vec::len);
    if weights.iter().any(|r| r.len() != src_len) {
        return Err(Error::Dimension("ragged attention matrix".into()));
    }
    check_partition(src_spans, src_len, "source")?;
    check_partition(tgt_spans, weights.len(), "target")?;
    let summed: Vec<Vec<f64>> = weights
        .iter()
        .map(|row| src_spans.iter().map(|s| row[s.clone()].iter().sum()).collect())
        .collect();
    Ok(tgt_spans
        .iter()
        .map(|t| {
            let n = (t.end() - t.start() + 1) as f64;
            let mut out = vec![0.0; src_spans.len()];
            for row in &summed[t.clone()] {
                for (o, v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            out.iter_mut().for_each(|o| *o /= n);
            out
        })
        .collect())
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Bidirectional argmax links from a `[tgt word][src word]` matrix: each
/// target word to its highest-weighted source word, and each source word to
/// its highest-weighted target word. Ties go to the smaller index.
pub fn links_from_matrix(m: &[Vec<f64>]) -> AlignmentLinks {
    let src = m.first().map_or(0, Vec::len);
    let mut links = BTreeSet::new();
    if src == 0 {
        return AlignmentLinks(links);
    }
    for (t, row) in m.iter().enumerate() {
        links.insert((argmax(row.iter().copied()), t));
    }
    for s in 0..src {
        links.insert((s, argmax(m.iter().map(|r| r[s]))));
    }
    AlignmentLinks(links)
}

/// Alignment read off one decoder layer: heads summed, subwords merged,
/// bidirectional argmax.
pub fn extract_alignment(
    record: &AttentionRecord,
    src_spans: &[RangeInclusive<usize>],
    tgt_spans: &[RangeInclusive<usize>],
    layer: usize,
) -> Result<AlignmentLinks> {
    if record.is_empty() {
        return Err(Error::Data("the model records no attention to align with".into()));
    }
    let heads = record
        .weights
        .get(layer)
        .ok_or_else(|| Error::Contract(format!("layer {layer} out of range for {} layers", record.layers())))?;
    let (t, s) = (record.tgt_len(), record.src_len());
    let mut summed = vec![vec![0.0; s]; t];
    for head in heads {
        for (acc, row) in summed.iter_mut().zip(head) {
            for (a, w) in acc.iter_mut().zip(row) {
                *a += w;
            }
        }
    }
    let merged = merge_subword_attention(&summed, src_spans, tgt_spans)?;
    Ok(links_from_matrix(&merged))
}
