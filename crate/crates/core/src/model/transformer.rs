use std::rc::Rc;

use super::{dropout, spec, AttentionRecord, Init, Mode, Model, ModelConfig, ParamSpec, SourceSide};
use crate::error::Result;
use crate::tensor::{AttentionLayout, AttentionSegment, Graph, ParamId, ParamStore, Var};

#[derive(Debug, Clone)]
pub(crate) struct AttentionIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

#[derive(Debug, Clone)]
struct NormIds {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
struct FeedForwardIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    attn: AttentionIds,
    norm1: NormIds,
    ff: FeedForwardIds,
    norm2: NormIds,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    self_attn: AttentionIds,
    norm1: NormIds,
    cross: AttentionIds,
    norm2: NormIds,
    ff: FeedForwardIds,
    norm3: NormIds,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
}

fn attention_specs(prefix: &str, d: usize) -> Vec<ParamSpec> {
    ["q", "k", "v", "o"]
        .iter()
        .flat_map(|p| {
            [
                spec(format!("{prefix}.w{p}"), &[d, d], Init::Xavier),
                spec(format!("{prefix}.b{p}"), &[d], Init::Zeros),
            ]
        })
        .collect()
}

fn norm_specs(prefix: &str, d: usize) -> Vec<ParamSpec> {
    vec![
        spec(format!("{prefix}.gain"), &[d], Init::Ones),
        spec(format!("{prefix}.bias"), &[d], Init::Zeros),
    ]
}

fn ff_specs(prefix: &str, d: usize, ff: usize) -> Vec<ParamSpec> {
    vec![
        spec(format!("{prefix}.w1"), &[d, ff], Init::Xavier),
        spec(format!("{prefix}.b1"), &[ff], Init::Zeros),
        spec(format!("{prefix}.w2"), &[ff, d], Init::Xavier),
        spec(format!("{prefix}.b2"), &[d], Init::Zeros),
    ]
}

pub(crate) fn specs(c: &ModelConfig) -> Vec<ParamSpec> {
    let d = c.d_model;
    let mut out = Vec::new();
    for l in 0..c.encoder_layers {
        let p = format!("enc.{l}");
        out.extend(attention_specs(&format!("{p}.self"), d));
        out.extend(norm_specs(&format!("{p}.norm1"), d));
        out.extend(ff_specs(&format!("{p}.ff"), d, c.ff_dim));
        out.extend(norm_specs(&format!("{p}.norm2"), d));
    }
    for l in 0..c.decoder_layers {
        let p = format!("dec.{l}");
        out.extend(attention_specs(&format!("{p}.self"), d));
        out.extend(norm_specs(&format!("{p}.norm1"), d));
        out.extend(attention_specs(&format!("{p}.cross"), d));
        out.extend(norm_specs(&format!("{p}.norm2"), d));
        out.extend(ff_specs(&format!("{p}.ff"), d, c.ff_dim));
        out.extend(norm_specs(&format!("{p}.norm3"), d));
    }
    out
}

fn id(store: &ParamStore, name: String) -> ParamId {
    store
        .id(&name)
        .unwrap_or_else(|| panic!("parameter {name} was validated but is missing"))
}

fn attention_ids(s: &ParamStore, p: &str) -> AttentionIds {
    AttentionIds {
        wq: id(s, format!("{p}.wq")),
        bq: id(s, format!("{p}.bq")),
        wk: id(s, format!("{p}.wk")),
        bk: id(s, format!("{p}.bk")),
        wv: id(s, format!("{p}.wv")),
        bv: id(s, format!("{p}.bv")),
        wo: id(s, format!("{p}.wo")),
        bo: id(s, format!("{p}.bo")),
    }
}

fn norm_ids(s: &ParamStore, p: &str) -> NormIds {
    NormIds {
        gain: id(s, format!("{p}.gain")),
        bias: id(s, format!("{p}.bias")),
    }
}

fn ff_ids(s: &ParamStore, p: &str) -> FeedForwardIds {
    FeedForwardIds {
        w1: id(s, format!("{p}.w1")),
        b1: id(s, format!("{p}.b1")),
        w2: id(s, format!("{p}.w2")),
        b2: id(s, format!("{p}.b2")),
    }
}

fn linear(g: &mut Graph<'_>, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let w = g.param(w);
    let b = g.param(b);
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

/// Projected multi-head attention. Returns the output and the raw attention
/// node (whose weights can be read back for recording).
pub(crate) fn multi_head_attention(
    g: &mut Graph<'_>,
    ids: &AttentionIds,
    queries: Var,
    memory: Var,
    layout: Rc<AttentionLayout>,
) -> Result<(Var, Var)> {
    let q = linear(g, queries, ids.wq, ids.bq)?;
    let k = linear(g, memory, ids.wk, ids.bk)?;
    let v = linear(g, memory, ids.wv, ids.bv)?;
    let a = g.attention(q, k, v, layout)?;
    let out = linear(g, a, ids.wo, ids.bo)?;
    Ok((out, a))
}

fn norm(g: &mut Graph<'_>, x: Var, ids: &NormIds) -> Result<Var> {
    let gain = g.param(ids.gain);
    let bias = g.param(ids.bias);
    g.layer_norm(x, gain, bias)
}

fn feed_forward(g: &mut Graph<'_>, x: Var, ids: &FeedForwardIds) -> Result<Var> {
    let h = linear(g, x, ids.w1, ids.b1)?;
    let h = g.relu(h);
    linear(g, h, ids.w2, ids.b2)
}

/// Post-norm residual block: `norm(x + dropout(f))`.
fn residual(g: &mut Graph<'_>, x: Var, f: Var, ids: &NormIds, rate: f64, mode: &mut Mode<'_>) -> Result<Var> {
    let f = dropout(g, f, rate, mode)?;
    let s = g.add(x, f)?;
    norm(g, s, ids)
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

impl Layout {
    pub fn resolve(c: &ModelConfig, s: &ParamStore) -> Self {
        let encoder = (0..c.encoder_layers)
            .map(|l| EncoderLayer {
                attn: attention_ids(s, &format!("enc.{l}.self")),
                norm1: norm_ids(s, &format!("enc.{l}.norm1")),
                ff: ff_ids(s, &format!("enc.{l}.ff")),
                norm2: norm_ids(s, &format!("enc.{l}.norm2")),
            })
            .collect();
        let decoder = (0..c.decoder_layers)
            .map(|l| DecoderLayer {
                self_attn: attention_ids(s, &format!("dec.{l}.self")),
                norm1: norm_ids(s, &format!("dec.{l}.norm1")),
                cross: attention_ids(s, &format!("dec.{l}.cross")),
                norm2: norm_ids(s, &format!("dec.{l}.norm2")),
                ff: ff_ids(s, &format!("dec.{l}.ff")),
                norm3: norm_ids(s, &format!("dec.{l}.norm3")),
            })
            .collect();
        Self { encoder, decoder }
    }

    pub fn encode(&self, m: &Model, g: &mut Graph<'_>, sources: &[&[usize]], mode: &mut Mode<'_>) -> Result<SourceSide> {
        let c = m.config();
        let spans = spans_of(sources);
        let x = m.embed_with_positions(g, m.embeddings.src, sources, c.use_source_positions)?;
        let mut x = dropout(g, x, c.embed_dropout, mode)?;
        if !self.encoder.is_empty() {
            let layout = Rc::new(AttentionLayout {
                heads: c.heads,
                segments: spans
                    .iter()
                    .map(|&(s, n)| AttentionSegment { q_start: s, q_len: n, k_start: s, k_len: n })
                    .collect(),
                causal: false,
            });
            for layer in &self.encoder {
                let (a, _) = multi_head_attention(g, &layer.attn, x, x, layout.clone())?;
                x = residual(g, x, a, &layer.norm1, c.block_dropout, mode)?;
                let f = feed_forward(g, x, &layer.ff)?;
                x = residual(g, x, f, &layer.norm2, c.block_dropout, mode)?;
            }
        }
        Ok(SourceSide {
            memory: Some(x),
            spans,
            summary: None,
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
        mut records: Option<&mut Vec<AttentionRecord>>,
    ) -> Result<Var> {
        let c = m.config();
        let memory = source.memory.expect("transformer source has memory");
        let spans = spans_of(targets);
        let self_layout = Rc::new(AttentionLayout {
            heads: c.heads,
            segments: spans
                .iter()
                .map(|&(s, n)| AttentionSegment { q_start: s, q_len: n, k_start: s, k_len: n })
                .collect(),
            causal: true,
        });
        let cross_layout = Rc::new(AttentionLayout {
            heads: c.heads,
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
        if let Some(r) = records.as_deref_mut() {
            *r = vec![AttentionRecord::default(); targets.len()];
        }
        let y = m.embed_with_positions(g, m.embeddings.tgt, targets, true)?;
        let mut y = dropout(g, y, c.embed_dropout, mode)?;
        for layer in &self.decoder {
            let (a, _) = multi_head_attention(g, &layer.self_attn, y, y, self_layout.clone())?;
            y = residual(g, y, a, &layer.norm1, c.block_dropout, mode)?;
            let (a, node) = multi_head_attention(g, &layer.cross, y, memory, cross_layout.clone())?;
            if let Some(r) = records.as_deref_mut() {
                let weights = g.attention_weights(node).expect("attention node");
                for (rec, w) in r.iter_mut().zip(weights) {
                    rec.weights.push(w);
                }
            }
            y = residual(g, y, a, &layer.norm2, c.block_dropout, mode)?;
            let f = feed_forward(g, y, &layer.ff)?;
            y = residual(g, y, f, &layer.norm3, c.block_dropout, mode)?;
        }
        Ok(y)
    }
}
