//! Experiment configuration: a flat `key=value` file layered over a preset.
//!
//! ```text
//! preset = toy
//! variant = Trans-noEnc
//! train_src = data/train.src
//! train_tgt = data/train.tgt
//! max_updates = 2000
//! ```
//!
//! The preset is applied first wherever it appears, then `variant`, then
//! every other key in file order. Blank lines and `#` comments are ignored.
//! Relative paths are resolved against the config file's directory and must
//! exist. `NMT_ABLATION_SEED` in the environment overrides `seed`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::LengthFilter;
use crate::error::{Error, Result};
use crate::inference::BeamConfig;
use crate::model::{ModelConfig, Variant};
use crate::subword::{DEFAULT_MARKER, DEFAULT_NUM_MERGES, TOY_NUM_MERGES};
use crate::training::TrainConfig;

pub const SEED_ENV: &str = "NMT_ABLATION_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Full,
    Toy,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "paper" => Ok(Preset::Full),
            "toy" => Ok(Preset::Toy),
            _ => Err(Error::Config(format!("preset: expected paper or toy, got {s:?}"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Full => "paper",
            Preset::Toy => "toy",
        })
    }
}

/// Data files an experiment refers to.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Paths {
    pub train_src: Option<PathBuf>,
    pub train_tgt: Option<PathBuf>,
    pub dev_src: Option<PathBuf>,
    pub dev_tgt: Option<PathBuf>,
    pub test_src: Option<PathBuf>,
    pub test_tgt: Option<PathBuf>,
    pub gold_alignments: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub variant: Option<Variant>,
    /// Vocabulary sizes are filled in once the data is read.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub max_updates: u64,
    pub beam: BeamConfig,
    pub bpe_merges: usize,
    pub bpe_marker: String,
    pub min_count: usize,
    pub filter: LengthFilter,
    pub neighbors: usize,
    pub paths: Paths,
}

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Full => Self {
                preset,
                variant: None,
                model: ModelConfig::full(0),
                train: TrainConfig::default(),
                max_updates: u64::MAX,
                beam: BeamConfig::default(),
                bpe_merges: DEFAULT_NUM_MERGES,
                bpe_marker: DEFAULT_MARKER.to_string(),
                min_count: 1,
                filter: LengthFilter::default(),
                neighbors: crate::analysis::DEFAULT_NEIGHBORS,
                paths: Paths::default(),
            },
            Preset::Toy => {
                let mut c = Self::preset(Preset::Full);
                c.preset = preset;
                c.model = ModelConfig {
                    embed_dropout: 0.3,
                    block_dropout: 0.3,
                    rnn_dropout: 0.3,
                    ..ModelConfig::toy(0)
                };
                c.train.checkpoint_interval = 50;
                c.train.adam.lr = 1e-3;
                c.train.batch_tokens = 256;
                c.max_updates = 4000;
                c.beam.max_len = 50;
                c.bpe_merges = TOY_NUM_MERGES;
                c
            }
        }
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    /// Model configuration for a joint vocabulary of `vocab` entries.
    pub fn model_config(&self, vocab: usize) -> Result<ModelConfig> {
        let c = ModelConfig {
            src_vocab: vocab,
            tgt_vocab: vocab,
            ..self.model.clone()
        };
        c.validate()?;
        Ok(c)
    }

    fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<()> {
        fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?} as {}", std::any::type_name::<T>())))
        }
        let path = |v: &str| -> Result<Option<PathBuf>> {
            let p = Path::new(v);
            let p = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
            if !p.exists() {
                return Err(Error::Config(format!("{key}: file {} does not exist", p.display())));
            }
            Ok(Some(p))
        };
        match key {
            "preset" | "variant" => unreachable!("applied before other keys"),
            "lr" => self.train.adam.lr = parse(key, value)?,
            "beta1" => self.train.adam.beta1 = parse(key, value)?,
            "beta2" => self.train.adam.beta2 = parse(key, value)?,
            "epsilon" => self.train.adam.epsilon = parse(key, value)?,
            "checkpoint_interval" => self.train.checkpoint_interval = parse(key, value)?,
            "patience" => self.train.patience = parse(key, value)?,
            "plateau_checkpoints" => self.train.plateau_checkpoints = parse(key, value)?,
            "decay" => self.train.decay = parse(key, value)?,
            "batch_tokens" => self.train.batch_tokens = parse(key, value)?,
            "label_smoothing" => self.train.label_smoothing = parse(key, value)?,
            "clip_norm" => {
                self.train.clip_norm = match value {
                    "auto" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "seed" => self.train.seed = parse(key, value)?,
            "max_updates" => self.max_updates = parse(key, value)?,
            "beam" => self.beam.beam = parse(key, value)?,
            "max_len" => self.beam.max_len = parse(key, value)?,
            "length_alpha" => self.beam.alpha = parse(key, value)?,
            "bpe_merges" => self.bpe_merges = parse(key, value)?,
            "bpe_marker" => self.bpe_marker = value.to_string(),
            "min_count" => self.min_count = parse(key, value)?,
            "max_sentence_len" => self.filter.max_len = parse(key, value)?,
            "max_length_ratio" => self.filter.max_ratio = parse(key, value)?,
            "neighbors" => self.neighbors = parse(key, value)?,
            "train_src" => self.paths.train_src = path(value)?,
            "train_tgt" => self.paths.train_tgt = path(value)?,
            "dev_src" => self.paths.dev_src = path(value)?,
            "dev_tgt" => self.paths.dev_tgt = path(value)?,
            "test_src" => self.paths.test_src = path(value)?,
            "test_tgt" => self.paths.test_tgt = path(value)?,
            "gold_alignments" => self.paths.gold_alignments = path(value)?,
            "src_vocab" | "tgt_vocab" => {
                return Err(Error::Config(format!("{key} is derived from the data and cannot be set")))
            }
            k if ModelConfig::KEYS.contains(&k) => self.model.set(k, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.beam.beam == 0 || self.beam.max_len == 0 {
            return Err(Error::Config("beam and max_len must be positive".into()));
        }
        // vocabulary size is unknown here; check everything else
        self.model_config(5.max(self.model.src_vocab))?;
        Ok(())
    }
}

/// Parses config text. Relative paths resolve against `base`.
pub fn parse_config(text: &str, base: &Path) -> Result<ExperimentConfig> {
    let mut entries: Vec<(usize, String, String)> = Vec::new();
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)));
        };
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if let Some(prev) = seen.insert(k.clone(), n + 1) {
            log::warn!("config key {k:?} set on lines {prev} and {}; the last value wins", n + 1);
            entries.retain(|e| e.1 != k);
        }
        entries.push((n + 1, k, v));
    }
    let lookup = |key: &str| entries.iter().find(|e| e.1 == key).map(|e| e.2.as_str());
    let preset = match lookup("preset") {
        Some(v) => v.parse()?,
        None => Preset::Full,
    };
    let mut cfg = ExperimentConfig::preset(preset);
    if let Some(v) = lookup("variant") {
        let variant: Variant = v.parse()?;
        cfg.model = variant.configure(&cfg.model);
        cfg.variant = Some(variant);
    }
    for (line, k, v) in &entries {
        if k == "preset" || k == "variant" {
            continue;
        }
        cfg.set(k, v, base)
            .map_err(|e| Error::Config(format!("line {line}: {}", e.to_string().trim_start_matches("config error: "))))?;
    }
    if let Ok(v) = std::env::var(SEED_ENV) {
        cfg.train.seed = v
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}: cannot parse {v:?} as a seed")))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, path.parent().unwrap_or(Path::new(".")))
}
