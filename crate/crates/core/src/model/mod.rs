//! The ablation model zoo: post-norm Transformers with 0..N encoder layers and
//! LSTM sequence-to-sequence models whose encoder and attention can each be
//! removed.

mod config;
mod rnn;
mod transformer;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

pub use config::{Family, ModelConfig, Variant};

use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::checkpoint::Container;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Sinusoid position features: `pe[pos, 2i] = sin(pos / 10000^(2i/d))`,
/// `pe[pos, 2i+1] = cos(pos / 10000^(2i/d))`.
pub fn sinusoid_positions(length: usize, d_model: usize) -> Result<Tensor> {
    if d_model == 0 || d_model % 2 != 0 {
        return Err(Error::Config(format!("sinusoid positions need an even d_model, got {d_model}")));
    }
    let mut data = vec![0.0; length.max(1) * d_model];
    for pos in 0..length {
        for i in 0..d_model / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            data[pos * d_model + 2 * i] = angle.sin();
            data[pos * d_model + 2 * i + 1] = angle.cos();
        }
    }
    data.truncate(length * d_model);
    if length == 0 {
        return Err(Error::Dimension("sinusoid positions for an empty sequence".into()));
    }
    Tensor::new(&[length, d_model], data)
}

/// Attention weights captured for one sentence pair, indexed
/// `[layer][head][target step][source position]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttentionRecord {
    pub weights: Vec<Vec<Vec<Vec<f64>>>>,
}

impl AttentionRecord {
    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn layers(&self) -> usize {
        self.weights.len()
    }

    pub fn heads(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    pub fn tgt_len(&self) -> usize {
        self.weights
            .first()
            .and_then(|l| l.first())
            .map_or(0, Vec::len)
    }

    pub fn src_len(&self) -> usize {
        self.weights
            .first()
            .and_then(|l| l.first())
            .and_then(|h| h.first())
            .map_or(0, Vec::len)
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.weights
            .iter()
            .flat_map(|l| l.iter().flat_map(|h| h.iter().map(Vec::as_slice)))
    }
}

/// Where a source representation came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    /// Scaled word embeddings, plus sinusoids when positions are on.
    EmbeddingsPlusPositions,
    EncoderOutput,
}

/// What the decoder sees of one source sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceRepresentation {
    /// `[src_len x d_model]`
    pub matrix: Tensor,
    pub provenance: Provenance,
}

/// Source-side graph values for a batch of sentences.
#[derive(Debug, Clone)]
pub(crate) struct SourceSide {
    /// Packed `[sum(src_len) x d]` attention memory (absent for no-attention RNNs).
    pub memory: Option<Var>,
    /// `(start row, length)` per sentence in `memory`.
    pub spans: Vec<(usize, usize)>,
    /// `[sentences x d]` fixed summary for no-attention RNNs.
    pub summary: Option<Var>,
}

/// Encoded source values detached from any graph, reusable across decoding
/// steps.
#[derive(Debug, Clone)]
pub struct EncodedSource {
    memory: Option<Tensor>,
    spans: Vec<(usize, usize)>,
    summary: Option<Tensor>,
}

impl EncodedSource {
    fn attach(&self, g: &mut Graph<'_>) -> SourceSide {
        SourceSide {
            memory: self.memory.clone().map(|t| g.leaf(t)),
            spans: self.spans.clone(),
            summary: self.summary.clone().map(|t| g.leaf(t)),
        }
    }
}

/// Ids of the embedding tables.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Embeddings {
    pub src: ParamId,
    pub tgt: ParamId,
    pub out: ParamId,
}

#[derive(Debug, Clone)]
enum Body {
    Transformer(transformer::Layout),
    Rnn(rnn::Layout),
}

/// Initialization scheme for one parameter.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Init {
    Zeros,
    Ones,
    /// Xavier-uniform over (fan_in, fan_out) = the two extents.
    Xavier,
    Normal(f64),
    Uniform(f64),
    /// LSTM bias `[4d]`: zero except 1 on the forget gate block.
    ForgetBias(usize),
}

pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

pub(crate) fn spec(name: impl Into<String>, shape: &[usize], init: Init) -> ParamSpec {
    ParamSpec {
        name: name.into(),
        shape: shape.to_vec(),
        init,
    }
}

fn embedding_specs(c: &ModelConfig) -> Vec<ParamSpec> {
    let std = (c.d_model as f64).powf(-0.5);
    if c.tie_embeddings {
        vec![spec("embed", &[c.src_vocab, c.d_model], Init::Normal(std))]
    } else {
        vec![
            spec("src_embed", &[c.src_vocab, c.d_model], Init::Normal(std)),
            spec("tgt_embed", &[c.tgt_vocab, c.d_model], Init::Normal(std)),
            spec("out_proj", &[c.tgt_vocab, c.d_model], Init::Normal(std)),
        ]
    }
}

fn param_specs(c: &ModelConfig) -> Vec<ParamSpec> {
    let mut specs = embedding_specs(c);
    match c.family {
        Family::Transformer => specs.extend(transformer::specs(c)),
        Family::Rnn => specs.extend(rnn::specs(c)),
    }
    specs
}

fn init_tensor(spec: &ParamSpec, rng: &mut Rng) -> Tensor {
    match spec.init {
        Init::Zeros => Tensor::zeros(&spec.shape),
        Init::Ones => Tensor::from_fn(&spec.shape, |_| 1.0),
        Init::Xavier => {
            let (fan_in, fan_out) = (spec.shape[0], *spec.shape.last().unwrap());
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            Tensor::from_fn(&spec.shape, |_| rng.random_range(-a..a))
        }
        Init::Normal(std) => {
            let n = Normal::new(0.0, std).expect("positive std");
            Tensor::from_fn(&spec.shape, |_| n.sample(rng))
        }
        Init::Uniform(a) => Tensor::from_fn(&spec.shape, |_| rng.random_range(-a..a)),
        Init::ForgetBias(d) => Tensor::from_fn(&spec.shape, |i| if (d..2 * d).contains(&i) { 1.0 } else { 0.0 }),
    }
}

/// A model: configuration, parameters, and the resolved parameter layout.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    embeddings: Embeddings,
    body: Body,
}

/// Dropout switch for one forward pass: `Some(rng)` trains, `None` evaluates.
pub type Mode<'r> = Option<&'r mut Rng>;

pub(crate) fn dropout(g: &mut Graph<'_>, x: Var, rate: f64, mode: &mut Mode<'_>) -> Result<Var> {
    match mode {
        Some(r) => g.dropout(x, rate, true, *r),
        None => Ok(x),
    }
}

impl Model {
    /// Randomly initialized model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::seeded(seed);
        let mut params = ParamStore::new();
        for s in param_specs(&config) {
            let t = init_tensor(&s, &mut r);
            params.insert(&s.name, t)?;
        }
        Self::from_parts(config, params)
    }

    /// Wraps existing parameters, checking names and shapes against `config`.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != params.len() {
            return Err(Error::Config(format!(
                "configuration expects {} parameters, found {}",
                specs.len(),
                params.len()
            )));
        }
        for s in &specs {
            let t = params
                .by_name(&s.name)
                .ok_or_else(|| Error::Config(format!("missing parameter {}", s.name)))?;
            if t.shape() != s.shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    s.name,
                    t.shape(),
                    s.shape
                )));
            }
        }
        let id = |n: &str| params.id(n).expect("checked above");
        let embeddings = if config.tie_embeddings {
            let e = id("embed");
            Embeddings { src: e, tgt: e, out: e }
        } else {
            Embeddings {
                src: id("src_embed"),
                tgt: id("tgt_embed"),
                out: id("out_proj"),
            }
        };
        let body = match config.family {
            Family::Transformer => Body::Transformer(transformer::Layout::resolve(&config, &params)),
            Family::Rnn => Body::Rnn(rnn::Layout::resolve(&config, &params)),
        };
        Ok(Self {
            config,
            params,
            embeddings,
            body,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_parts(self) -> (ModelConfig, ParamStore) {
        (self.config, self.params)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn source_embedding_id(&self) -> ParamId {
        self.embeddings.src
    }

    pub fn target_embedding_id(&self) -> ParamId {
        self.embeddings.tgt
    }

    pub fn output_projection_id(&self) -> ParamId {
        self.embeddings.out
    }

    /// Ids of every embedding table (one when tied).
    pub fn embedding_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.embeddings.src, self.embeddings.tgt, self.embeddings.out];
        ids.dedup();
        ids
    }

    fn check_ids(&self, ids: &[usize], vocab: usize, side: &str) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::Contract(format!("empty {side} sequence")));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Contract(format!("{side} id {bad} outside vocabulary of {vocab}")));
        }
        Ok(())
    }

    /// `sqrt(d) * E[ids] (+ positions)`, packed over sentences.
    pub(crate) fn embed_with_positions(
        &self,
        g: &mut Graph<'_>,
        table: ParamId,
        sentences: &[&[usize]],
        positions: bool,
    ) -> Result<Var> {
        let d = self.config.d_model;
        let ids: Vec<usize> = sentences.iter().flat_map(|s| s.iter().copied()).collect();
        let e = g.param(table);
        let rows = g.gather_rows(e, &ids)?;
        let scaled = g.scale(rows, (d as f64).sqrt());
        if !positions {
            return Ok(scaled);
        }
        let max_len = sentences.iter().map(|s| s.len()).max().unwrap_or(1);
        let table = sinusoid_positions(max_len, d)?;
        let mut pe = Vec::with_capacity(ids.len() * d);
        for s in sentences {
            pe.extend_from_slice(&table.data()[..s.len() * d]);
        }
        let pe = g.constant(&[ids.len(), d], pe)?;
        g.add(scaled, pe)
    }

    pub(crate) fn encode_graph(&self, g: &mut Graph<'_>, sources: &[&[usize]], mode: &mut Mode<'_>) -> Result<SourceSide> {
        for s in sources {
            self.check_ids(s, self.config.src_vocab, "source")?;
        }
        match &self.body {
            Body::Transformer(l) => l.encode(self, g, sources, mode),
            Body::Rnn(l) => l.encode(self, g, sources, mode),
        }
    }

    /// Decoder hidden states, packed `[sum(tgt_len) x d]`. `targets[i]`
    /// attends to source sentence `source_of[i]`.
    pub(crate) fn decode_graph(
        &self,
        g: &mut Graph<'_>,
        source: &SourceSide,
        source_of: &[usize],
        targets: &[&[usize]],
        mode: &mut Mode<'_>,
        records: Option<&mut Vec<AttentionRecord>>,
    ) -> Result<Var> {
        for t in targets {
            self.check_ids(t, self.config.tgt_vocab, "target")?;
        }
        match &self.body {
            Body::Transformer(l) => l.decode(self, g, source, source_of, targets, mode, records),
            Body::Rnn(l) => l.decode(self, g, source, source_of, targets, mode, records),
        }
    }

    /// Output projection onto the target vocabulary.
    pub(crate) fn project(&self, g: &mut Graph<'_>, hidden: Var) -> Result<Var> {
        let out = g.param(self.embeddings.out);
        g.matmul_nt(hidden, out)
    }

    /// Teacher-forced forward pass over a batch of `(source, decoder input)`
    /// pairs. Returns packed logits `[sum(tgt_len) x |V|]` and, when
    /// `capture` is set, one attention record per pair.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        sources: &[&[usize]],
        targets: &[&[usize]],
        mut mode: Mode<'_>,
        capture: bool,
    ) -> Result<(Var, Vec<AttentionRecord>)> {
        if sources.len() != targets.len() {
            return Err(Error::Contract(format!(
                "{} sources for {} targets",
                sources.len(),
                targets.len()
            )));
        }
        let source = self.encode_graph(g, sources, &mut mode)?;
        let source_of: Vec<usize> = (0..sources.len()).collect();
        let mut records = Vec::new();
        let hidden = self.decode_graph(
            g,
            &source,
            &source_of,
            targets,
            &mut mode,
            capture.then_some(&mut records),
        )?;
        let logits = self.project(g, hidden)?;
        Ok((logits, records))
    }

    /// Evaluation-mode logits `[tgt_len x |V|]` for one sentence pair.
    pub fn logits(&self, source: &[usize], decoder_input: &[usize]) -> Result<Tensor> {
        let mut g = Graph::with_params(&self.params);
        let (logits, _) = self.forward(&mut g, &[source], &[decoder_input], None, false)?;
        Ok(g.tensor(logits))
    }

    /// What the decoder attends to for one source sentence (evaluation mode).
    /// For a no-attention RNN this is the encoder output (or the embedding
    /// sum) that feeds the summary.
    pub fn source_representation(&self, src_ids: &[usize]) -> Result<SourceRepresentation> {
        self.check_ids(src_ids, self.config.src_vocab, "source")?;
        let mut g = Graph::with_params(&self.params);
        let mut mode: Mode<'_> = None;
        let (matrix, provenance) = match &self.body {
            Body::Transformer(l) => {
                let side = l.encode(self, &mut g, &[src_ids], &mut mode)?;
                let p = if self.config.encoder_layers == 0 {
                    Provenance::EmbeddingsPlusPositions
                } else {
                    Provenance::EncoderOutput
                };
                (side.memory.expect("transformers always attend"), p)
            }
            Body::Rnn(l) => l.source_states(self, &mut g, &[src_ids], &mut mode)?,
        };
        Ok(SourceRepresentation {
            matrix: g.tensor(matrix),
            provenance,
        })
    }

    /// Runs the encoder once for decoding.
    pub fn encode(&self, src_ids: &[usize]) -> Result<EncodedSource> {
        let mut g = Graph::with_params(&self.params);
        let side = self.encode_graph(&mut g, &[src_ids], &mut None)?;
        Ok(EncodedSource {
            memory: side.memory.map(|v| g.tensor(v)),
            spans: side.spans,
            summary: side.summary.map(|v| g.tensor(v)),
        })
    }

    /// Next-token log-probabilities after each prefix (every prefix starts
    /// with BOS), all conditioned on `source`.
    pub fn next_log_probs(&self, source: &EncodedSource, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::with_params(&self.params);
        let side = source.attach(&mut g);
        let refs: Vec<&[usize]> = prefixes.iter().map(Vec::as_slice).collect();
        let source_of = vec![0; prefixes.len()];
        let hidden = self.decode_graph(&mut g, &side, &source_of, &refs, &mut None, None)?;
        let mut last = Vec::with_capacity(prefixes.len());
        let mut offset = 0;
        for p in prefixes {
            offset += p.len();
            last.push(offset - 1);
        }
        let rows = g.gather_rows(hidden, &last)?;
        let logits = self.project(&mut g, rows)?;
        let v = self.config.tgt_vocab;
        Ok(g.value(logits)
            .chunks(v)
            .map(crate::tensor::kernels::log_softmax_row)
            .collect())
    }

    /// Serializes configuration, vocabulary and parameters.
    pub fn to_container(&self, vocab: &Vocabulary) -> Container {
        Container {
            sections: vec![
                ("config".to_string(), self.config.to_kv()),
                ("vocab".to_string(), vocab.to_text()),
            ],
            params: self.params.clone(),
        }
    }

    pub fn from_container(c: Container) -> Result<(Self, Vocabulary)> {
        let config = ModelConfig::from_kv(
            c.section("config")
                .ok_or_else(|| Error::Data("checkpoint has no config section".into()))?,
        )?;
        let vocab = Vocabulary::from_text(
            c.section("vocab")
                .ok_or_else(|| Error::Data("checkpoint has no vocab section".into()))?,
        )?;
        if vocab.len() != config.src_vocab || vocab.len() != config.tgt_vocab {
            return Err(Error::Data(format!(
                "checkpoint vocabulary has {} entries, config expects {}/{}",
                vocab.len(),
                config.src_vocab,
                config.tgt_vocab
            )));
        }
        Ok((Self::from_parts(config, c.params)?, vocab))
    }

    pub fn save(&self, vocab: &Vocabulary, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_container(vocab).save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<(Self, Vocabulary)> {
        Self::from_container(Container::load(path)?)
    }
}

#[cfg(test)]
mod tests;
