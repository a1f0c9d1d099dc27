use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    Transformer,
    Rnn,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Transformer => "transformer",
            Family::Rnn => "rnn",
        })
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transformer" => Ok(Family::Transformer),
            "rnn" => Ok(Family::Rnn),
            _ => Err(Error::Config(format!("unknown model family {s:?}"))),
        }
    }
}

/// The seven architectures compared in the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Transformer,
    TransNoEnc,
    TransNoEncNoPos,
    Rnns2s,
    Rnns2sNoEnc,
    Rnns2sNoAtt,
    Rnns2sNoAttNoEnc,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Transformer,
        Variant::TransNoEnc,
        Variant::Rnns2s,
        Variant::Rnns2sNoEnc,
        Variant::Rnns2sNoAtt,
        Variant::Rnns2sNoAttNoEnc,
        Variant::TransNoEncNoPos,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Transformer => "Transformer",
            Variant::TransNoEnc => "Trans-noEnc",
            Variant::TransNoEncNoPos => "Trans-noEnc-noPos",
            Variant::Rnns2s => "RNNS2S",
            Variant::Rnns2sNoEnc => "RNNS2S-noEnc",
            Variant::Rnns2sNoAtt => "RNNS2S-noAtt",
            Variant::Rnns2sNoAttNoEnc => "RNNS2S-noAtt-noEnc",
        }
    }

    /// Rewrites `base` into this variant. Variants with an encoder keep
    /// `base.encoder_layers` (forced to at least one).
    pub fn configure(self, base: &ModelConfig) -> ModelConfig {
        let mut c = base.clone();
        let enc = base.encoder_layers.max(1);
        let (family, encoder_layers, use_attention, use_source_positions) = match self {
            Variant::Transformer => (Family::Transformer, enc, true, true),
            Variant::TransNoEnc => (Family::Transformer, 0, true, true),
            Variant::TransNoEncNoPos => (Family::Transformer, 0, true, false),
            Variant::Rnns2s => (Family::Rnn, enc, true, true),
            Variant::Rnns2sNoEnc => (Family::Rnn, 0, true, true),
            Variant::Rnns2sNoAtt => (Family::Rnn, enc, false, true),
            Variant::Rnns2sNoAttNoEnc => (Family::Rnn, 0, false, true),
        };
        c.family = family;
        c.encoder_layers = encoder_layers;
        c.use_attention = use_attention;
        c.use_source_positions = use_source_positions;
        c
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

/// Architecture switchboard.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub family: Family,
    /// 0 removes the encoder: the decoder attends to embeddings (+ positions).
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub use_attention: bool,
    pub use_source_positions: bool,
    pub d_model: usize,
    pub ff_dim: usize,
    pub heads: usize,
    pub tie_embeddings: bool,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub embed_dropout: f64,
    pub block_dropout: f64,
    pub rnn_dropout: f64,
}

impl ModelConfig {
    /// Full-size settings: 6+6 layers, d=768, 8 heads, tied embeddings.
    pub fn full(vocab: usize) -> Self {
        Self {
            family: Family::Transformer,
            encoder_layers: 6,
            decoder_layers: 6,
            use_attention: true,
            use_source_positions: true,
            d_model: 768,
            ff_dim: 2048,
            heads: 8,
            tie_embeddings: true,
            src_vocab: vocab,
            tgt_vocab: vocab,
            embed_dropout: 0.1,
            block_dropout: 0.1,
            rnn_dropout: 0.2,
        }
    }

    /// Desk-scale settings used by the toy experiments.
    pub fn toy(vocab: usize) -> Self {
        Self {
            encoder_layers: 2,
            decoder_layers: 2,
            d_model: 64,
            ff_dim: 256,
            heads: 4,
            embed_dropout: 0.0,
            block_dropout: 0.0,
            rnn_dropout: 0.0,
            ..Self::full(vocab)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.family == Family::Transformer && !self.use_attention {
            return fail("a transformer always uses encoder-decoder attention".into());
        }
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return fail(format!("d_model must be positive and even, got {}", self.d_model));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return fail(format!("heads ({}) must divide d_model ({})", self.heads, self.d_model));
        }
        if self.decoder_layers == 0 {
            return fail("decoder_layers must be positive".into());
        }
        if self.family == Family::Transformer && self.ff_dim == 0 {
            return fail("ff_dim must be positive".into());
        }
        if self.src_vocab < 5 || self.tgt_vocab < 5 {
            return fail("vocabularies need the reserved tokens plus at least one entry".into());
        }
        if self.tie_embeddings && self.src_vocab != self.tgt_vocab {
            return fail(format!(
                "tied embeddings need one joint vocabulary, got {} and {}",
                self.src_vocab, self.tgt_vocab
            ));
        }
        for (name, r) in [
            ("embed_dropout", self.embed_dropout),
            ("block_dropout", self.block_dropout),
            ("rnn_dropout", self.rnn_dropout),
        ] {
            if !(0.0..1.0).contains(&r) {
                return fail(format!("{name} must be in [0, 1), got {r}"));
            }
        }
        Ok(())
    }

    /// The variant this configuration corresponds to, if any.
    pub fn variant(&self) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| {
            let c = v.configure(self);
            c.family == self.family
                && (c.encoder_layers == 0) == (self.encoder_layers == 0)
                && c.use_attention == self.use_attention
                && (self.family == Family::Rnn || c.use_source_positions == self.use_source_positions)
        })
    }

    /// Scalars in one post-norm Transformer encoder layer: four `d x d`
    /// projections with biases, the two feed-forward maps with biases, and
    /// two layer norms.
    pub fn encoder_layer_parameters(&self) -> usize {
        let d = self.d_model;
        match self.family {
            Family::Transformer => 4 * d * d + 4 * d + 2 * d * self.ff_dim + self.ff_dim + d + 4 * d,
            Family::Rnn => 8 * d * d + 4 * d,
        }
    }

    pub fn decoder_layer_parameters(&self) -> usize {
        let d = self.d_model;
        match self.family {
            Family::Transformer => 2 * (4 * d * d + 4 * d) + 2 * d * self.ff_dim + self.ff_dim + d + 6 * d,
            Family::Rnn => 8 * d * d + 4 * d,
        }
    }

    pub fn embedding_parameters(&self) -> usize {
        let d = self.d_model;
        if self.tie_embeddings {
            self.src_vocab * d
        } else {
            self.src_vocab * d + 2 * self.tgt_vocab * d
        }
    }

    /// Parameters outside embeddings and layer stacks.
    pub fn head_parameters(&self) -> usize {
        let d = self.d_model;
        match (self.family, self.use_attention) {
            (Family::Transformer, _) => 0,
            // query projection, [context; state] output layer
            (Family::Rnn, true) => d * d + 2 * d * d + d,
            // source summary injection, output layer
            (Family::Rnn, false) => 4 * d * d + d * d + d,
        }
    }

    /// Closed-form parameter count.
    pub fn parameter_count(&self) -> usize {
        self.embedding_parameters()
            + self.encoder_layers * self.encoder_layer_parameters()
            + self.decoder_layers * self.decoder_layer_parameters()
            + self.head_parameters()
    }

    pub const KEYS: [&'static str; 14] = [
        "family",
        "encoder_layers",
        "decoder_layers",
        "use_attention",
        "use_source_positions",
        "d_model",
        "ff_dim",
        "heads",
        "tie_embeddings",
        "src_vocab",
        "tgt_vocab",
        "embed_dropout",
        "block_dropout",
        "rnn_dropout",
    ];

    /// Flat `key=value` lines, one per field.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.kv_pairs() {
            s.push_str(&format!("{k}={v}\n"));
        }
        s
    }

    fn kv_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("family", self.family.to_string()),
            ("encoder_layers", self.encoder_layers.to_string()),
            ("decoder_layers", self.decoder_layers.to_string()),
            ("use_attention", self.use_attention.to_string()),
            ("use_source_positions", self.use_source_positions.to_string()),
            ("d_model", self.d_model.to_string()),
            ("ff_dim", self.ff_dim.to_string()),
            ("heads", self.heads.to_string()),
            ("tie_embeddings", self.tie_embeddings.to_string()),
            ("src_vocab", self.src_vocab.to_string()),
            ("tgt_vocab", self.tgt_vocab.to_string()),
            ("embed_dropout", self.embed_dropout.to_string()),
            ("block_dropout", self.block_dropout.to_string()),
            ("rnn_dropout", self.rnn_dropout.to_string()),
        ]
    }

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
        }
        match key {
            "family" => self.family = value.parse()?,
            "encoder_layers" => self.encoder_layers = parse(key, value)?,
            "decoder_layers" => self.decoder_layers = parse(key, value)?,
            "use_attention" => self.use_attention = parse(key, value)?,
            "use_source_positions" => self.use_source_positions = parse(key, value)?,
            "d_model" => self.d_model = parse(key, value)?,
            "ff_dim" => self.ff_dim = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "tie_embeddings" => self.tie_embeddings = parse(key, value)?,
            "src_vocab" => self.src_vocab = parse(key, value)?,
            "tgt_vocab" => self.tgt_vocab = parse(key, value)?,
            "embed_dropout" => self.embed_dropout = parse(key, value)?,
            "block_dropout" => self.block_dropout = parse(key, value)?,
            "rnn_dropout" => self.rnn_dropout = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown model config key {key:?}"))),
        }
        Ok(())
    }

    /// Parses `to_kv` output. Every key must be present exactly once and
    /// unknown keys are rejected.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut seen = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("model config line {}: expected key=value", n + 1)))?;
            if seen.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("model config repeats key {k:?}")));
            }
        }
        let mut c = Self::toy(5);
        for (k, v) in &seen {
            c.set(k, v)?;
        }
        if let Some(missing) = Self::KEYS.iter().find(|k| !seen.contains_key(**k)) {
            return Err(Error::Config(format!("model config lacks {missing}")));
        }
        c.validate()?;
        Ok(c)
    }
}
