use std::rc::Rc;

use super::{dropout, spec, AttentionRecord, Init, Mode, Model, ModelConfig, ParamSpec, Provenance, SourceSide};
use crate::error::Result;
use crate::tensor::{AttentionLayout, AttentionSegment, Graph, ParamId, ParamStore, Var};

#[derive(Debug, Clone)]
struct LstmIds {
    wx: ParamId,
    wh: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
enum Head {
    Attention { wq: ParamId, wc: ParamId, wh: ParamId, b: ParamId },
    Summary { w: ParamId, wh: ParamId, b: ParamId },
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    encoder: Vec<LstmIds>,
    decoder: Vec<LstmIds>,
    head: Head,
}

fn lstm_specs(prefix: &str, d: usize) -> Vec<ParamSpec> {
    let a = 1.0 / (d as f64).sqrt();
    // gate order: input, forget, output, candidate
    vec![
        spec(format!("{prefix}.wx"), &[d, 4 * d], Init::Uniform(a)),
        spec(format!("{prefix}.wh"), &[d, 4 * d], Init::Uniform(a)),
        spec(format!("{prefix}.b"), &[4 * d], Init::ForgetBias(d)),
    ]
}

pub(crate) fn specs(c: &ModelConfig) -> Vec<ParamSpec> {
    let d = c.d_model;
    let mut out = Vec::new();
    for l in 0..c.encoder_layers {
        out.extend(lstm_specs(&format!("enc.{l}.lstm"), d));
    }
    for l in 0..c.decoder_layers {
        out.extend(lstm_specs(&format!("dec.{l}.lstm"), d));
    }
    if c.use_attention {
        out.push(spec("attn.wq", &[d, d], Init::Xavier));
        out.push(spec("out.wc", &[d, d], Init::Xavier));
    } else {
        out.push(spec("dec.summary.w", &[d, 4 * d], Init::Xavier));
    }
    out.push(spec("out.wh", &[d, d], Init::Xavier));
    out.push(spec("out.b", &[d], Init::Zeros));
    out
}

fn id(store: &ParamStore, name: &str) -> ParamId {
    store
        .id(name)
        .unwrap_or_else(|| panic!("parameter {name} was validated but is missing"))
}

fn lstm_ids(s: &ParamStore, p: &str) -> LstmIds {
    LstmIds {
        wx: id(s, &format!("{p}.wx")),
        wh: id(s, &format!("{p}.wh")),
        b: id(s, &format!("{p}.b")),
    }
}

fn spans_of(seqs: &[&[usize]]) -> Vec<(usize, usize)> {
    let mut off = 0;
    seqs.iter()
        .map(|s| {
            let span = (off, s.len());
            off += s.len();
            span
        })
        .collect()
}

/// Runs one LSTM layer over packed sentence-major rows `[sum(len) x d]`,
/// stepping all sentences in lockstep. Finished sentences keep their state.
/// Returns packed outputs and the final hidden state `[sentences x d]`.
fn run_lstm(
    g: &mut Graph<'_>,
    ids: &LstmIds,
    input: Var,
    spans: &[(usize, usize)],
    d: usize,
    extra_gates: Option<Var>,
) -> Result<(Var, Var)> {
    let batch = spans.len();
    let steps = spans.iter().map(|s| s.1).max().unwrap_or(0);
    let wx = g.param(ids.wx);
    let wh = g.param(ids.wh);
    let b = g.param(ids.b);
    let gx = g.matmul(input, wx)?;
    let gx = g.add_row(gx, b)?;
    let mut h = g.constant(&[batch, d], vec![0.0; batch * d])?;
    let mut c = h;
    let mut outputs = Vec::with_capacity(steps);
    for t in 0..steps {
        let rows: Vec<usize> = spans
            .iter()
            .map(|&(s, n)| if t < n { s + t } else { s })
            .collect();
        let mut gates = g.gather_rows(gx, &rows)?;
        let rec = g.matmul(h, wh)?;
        gates = g.add(gates, rec)?;
        if let Some(e) = extra_gates {
            gates = g.add(gates, e)?;
        }
        let i = g.slice_cols(gates, 0, d)?;
        let i = g.sigmoid(i);
        let f = g.slice_cols(gates, d, d)?;
        let f = g.sigmoid(f);
        let o = g.slice_cols(gates, 2 * d, d)?;
        let o = g.sigmoid(o);
        let cand = g.slice_cols(gates, 3 * d, d)?;
        let cand = g.tanh(cand);
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        let c_new = g.add(keep, write)?;
        let tc = g.tanh(c_new);
        let h_new = g.mul(o, tc)?;
        if spans.iter().all(|&(_, n)| t < n) {
            h = h_new;
            c = c_new;
        } else {
            let mut mask = Vec::with_capacity(batch * d);
            for &(_, n) in spans {
                mask.extend(std::iter::repeat_n(if t < n { 1.0 } else { 0.0 }, d));
            }
            let mask = g.constant(&[batch, d], mask)?;
            h = masked_update(g, h, h_new, mask)?;
            c = masked_update(g, c, c_new, mask)?;
        }
        outputs.push(h);
    }
    let stacked = g.concat_rows(&outputs)?;
    let order: Vec<usize> = spans
        .iter()
        .enumerate()
        .flat_map(|(i, &(_, n))| (0..n).map(move |t| t * batch + i))
        .collect();
    let packed = g.gather_rows(stacked, &order)?;
    Ok((packed, h))
}

/// `old + mask * (new - old)`
fn masked_update(g: &mut Graph<'_>, old: Var, new: Var, mask: Var) -> Result<Var> {
    let delta = g.sub(new, old)?;
    let delta = g.mul(delta, mask)?;
    g.add(old, delta)
}

impl Layout {
    pub fn resolve(c: &ModelConfig, s: &ParamStore) -> Self {
        let head = if c.use_attention {
            Head::Attention {
                wq: id(s, "attn.wq"),
                wc: id(s, "out.wc"),
                wh: id(s, "out.wh"),
                b: id(s, "out.b"),
            }
        } else {
            Head::Summary {
                w: id(s, "dec.summary.w"),
                wh: id(s, "out.wh"),
                b: id(s, "out.b"),
            }
        };
        Self {
            encoder: (0..c.encoder_layers).map(|l| lstm_ids(s, &format!("enc.{l}.lstm"))).collect(),
            decoder: (0..c.decoder_layers).map(|l| lstm_ids(s, &format!("dec.{l}.lstm"))).collect(),
            head,
        }
    }

    /// Per-position source states and the final top-layer encoder state
    /// (`None` without an encoder).
    fn run_encoder(
        &self,
        m: &Model,
        g: &mut Graph<'_>,
        sources: &[&[usize]],
        mode: &mut Mode<'_>,
    ) -> Result<(Var, Option<Var>, Provenance)> {
        let c = m.config();
        let spans = spans_of(sources);
        if self.encoder.is_empty() {
            let x = m.embed_with_positions(g, m.embeddings.src, sources, c.use_source_positions)?;
            let x = dropout(g, x, c.embed_dropout, mode)?;
            return Ok((x, None, Provenance::EmbeddingsPlusPositions));
        }
        let x = m.embed_with_positions(g, m.embeddings.src, sources, false)?;
        let mut x = dropout(g, x, c.embed_dropout, mode)?;
        let mut last = None;
        for (l, ids) in self.encoder.iter().enumerate() {
            if l > 0 {
                x = dropout(g, x, c.rnn_dropout, mode)?;
            }
            let (out, h) = run_lstm(g, ids, x, &spans, c.d_model, None)?;
            x = out;
            last = Some(h);
        }
        Ok((x, last, Provenance::EncoderOutput))
    }

    pub fn source_states(
        &self,
        m: &Model,
        g: &mut Graph<'_>,
        sources: &[&[usize]],
        mode: &mut Mode<'_>,
    ) -> Result<(Var, Provenance)> {
        let (x, _, p) = self.run_encoder(m, g, sources, mode)?;
        Ok((x, p))
    }

    pub fn encode(&self, m: &Model, g: &mut Graph<'_>, sources: &[&[usize]], mode: &mut Mode<'_>) -> Result<SourceSide> {
        let spans = spans_of(sources);
        let (states, last, _) = self.run_encoder(m, g, sources, mode)?;
        if m.config().use_attention {
            return Ok(SourceSide {
                memory: Some(states),
                spans,
                summary: None,
            });
        }
        let summary = match last {
            Some(h) => h,
            None => {
                let ranges: Vec<_> = spans.iter().map(|&(s, n)| s..s + n).collect();
                g.segment_mean(states, &ranges)?
            }
        };
        Ok(SourceSide {
            memory: None,
            spans,
            summary: Some(summary),
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn decode(
        &self,
        m: &Model,
        g: &mut Graph<'_>,
        source: &SourceSide,
        source_of: &[usize],
        targets: &[&[usize]],
        mode: &mut Mode<'_>,
        records: Option<&mut Vec<AttentionRecord>>,
    ) -> Result<Var> {
        let c = m.config();
        let d = c.d_model;
        let spans = spans_of(targets);
        let extra = match (&self.head, source.summary) {
            (Head::Summary { w, .. }, Some(summary)) => {
                let per_target = g.gather_rows(summary, source_of)?;
                let w = g.param(*w);
                Some(g.matmul(per_target, w)?)
            }
            _ => None,
        };
        let y = m.embed_with_positions(g, m.embeddings.tgt, targets, false)?;
        let mut y = dropout(g, y, c.embed_dropout, mode)?;
        for (l, ids) in self.decoder.iter().enumerate() {
            if l > 0 {
                y = dropout(g, y, c.rnn_dropout, mode)?;
            }
            let (out, _) = run_lstm(g, ids, y, &spans, d, if l == 0 { extra } else { None })?;
            y = out;
        }
        let y = dropout(g, y, c.rnn_dropout, mode)?;
        match &self.head {
            Head::Attention { wq, wc, wh, b } => {
                let memory = source.memory.expect("attention RNN source has memory");
                let layout = Rc::new(AttentionLayout {
                    heads: 1,
                    segments: spans
                        .iter()
                        .zip(source_of)
                        .map(|(&(s, n), &src)| {
                            let (ks, kn) = source.spans[src];
                            AttentionSegment { q_start: s, q_len: n, k_start: ks, k_len: kn }
                        })
                        .collect(),
                    causal: false,
                });
                let wq = g.param(*wq);
                let q = g.matmul(y, wq)?;
                let ctx = g.attention(q, memory, memory, layout)?;
                if let Some(r) = records {
                    *r = g
                        .attention_weights(ctx)
                        .expect("attention node")
                        .into_iter()
                        .map(|w| AttentionRecord { weights: vec![w] })
                        .collect();
                }
                let wc = g.param(*wc);
                let wh = g.param(*wh);
                let b = g.param(*b);
                let a = g.matmul(ctx, wc)?;
                let h = g.matmul(y, wh)?;
                let s = g.add(a, h)?;
                let s = g.add_row(s, b)?;
                Ok(g.tanh(s))
            }
            Head::Summary { wh, b, .. } => {
                if let Some(r) = records {
                    *r = vec![AttentionRecord::default(); targets.len()];
                }
                let wh = g.param(*wh);
                let b = g.param(*b);
                let h = g.matmul(y, wh)?;
                let h = g.add_row(h, b)?;
                Ok(g.tanh(h))
            }
        }
    }
}
