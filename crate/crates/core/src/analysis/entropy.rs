use crate::error::{Error, Result};
use crate::model::AttentionRecord;
use crate::par;

/// Largest tolerated deviation of a row sum from 1.
const ROW_SUM_TOL: f64 = 1e-4;

/// Mean attention entropy (nats) per decoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyProfile {
    pub per_layer: Vec<f64>,
    /// Mean of `per_layer`.
    pub overall: f64,
}

impl EntropyProfile {
    fn from_sums(sums: &[f64], steps: usize) -> Self {
        let per_layer: Vec<f64> = sums.iter().map(|s| s / steps.max(1) as f64).collect();
        let overall = if per_layer.is_empty() {
            0.0
        } else {
            per_layer.iter().sum::<f64>() / per_layer.len() as f64
        };
        Self { per_layer, overall }
    }
}

/// `-sum p ln p` with `0 ln 0 = 0`.
pub fn row_entropy(row: &[f64]) -> f64 {
    -row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

fn check_row(row: &[f64], layer: usize, head: usize, t: usize) -> Result<()> {
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > ROW_SUM_TOL || row.iter().any(|p| !(*p >= 0.0)) {
        return Err(Error::Data(format!(
            "attention row (layer {layer}, head {head}, step {t}) is not a distribution: sums to {s}"
        )));
    }
    Ok(())
}

/// Per-layer entropy sums over target steps, heads averaged first.
fn layer_sums(record: &AttentionRecord) -> Result<Vec<f64>> {
    let src = record.src_len();
    record
        .weights
        .iter()
        .enumerate()
        .map(|(l, heads)| {
            let mut total = 0.0;
            for t in 0..record.tgt_len() {
                let mut avg = vec![0.0; src];
                for (h, head) in heads.iter().enumerate() {
                    check_row(&head[t], l, h, t)?;
                    for (a, w) in avg.iter_mut().zip(&head[t]) {
                        *a += w / heads.len() as f64;
                    }
                }
                total += row_entropy(&avg);
            }
            Ok(total)
        })
        .collect()
}

/// Entropy of one sentence's attention: heads averaged within each layer,
/// then entropy per target step averaged over steps.
pub fn attention_entropy(record: &AttentionRecord) -> Result<EntropyProfile> {
    Ok(EntropyProfile::from_sums(&layer_sums(record)?, record.tgt_len()))
}

/// Corpus profile: per layer, the mean entropy over every target step of
/// every sentence.
pub fn corpus_entropy(records: &[AttentionRecord]) -> Result<EntropyProfile> {
    let records: Vec<&AttentionRecord> = records.iter().filter(|r| !r.is_empty()).collect();
    let Some(first) = records.first() else {
        return Err(Error::Data("no attention to measure".into()));
    };
    let layers = first.layers();
    if let Some(r) = records.iter().find(|r| r.layers() != layers) {
        return Err(Error::Data(format!(
            "records disagree on layer count: {layers} and {}",
            r.layers()
        )));
    }
    let sums = par::map(&records, |r| layer_sums(r));
    let mut total = vec![0.0; layers];
    let mut steps = 0;
    for (r, s) in records.iter().zip(sums) {
        for (t, v) in total.iter_mut().zip(s?) {
            *t += v;
        }
        steps += r.tgt_len();
    }
    Ok(EntropyProfile::from_sums(&total, steps))
}
