//! Optimization protocol: Adam, fixed-interval checkpoints scored by
//! validation perplexity, plateau learning-rate decay and patience-based
//! early stopping.

use std::io::Write;
use std::path::Path;

use crate::data::{make_batches, Pair, DEFAULT_BATCH_TOKENS};
use crate::error::{Error, Result};
use crate::model::{Family, Model, ModelConfig};
use crate::par;
use crate::rng;
use crate::tensor::{AdamConfig, AdamState, Graph};

pub const DEFAULT_CHECKPOINT_INTERVAL: u64 = 1000;
pub const DEFAULT_PATIENCE: usize = 32;
pub const DEFAULT_PLATEAU_CHECKPOINTS: usize = 8;
pub const DEFAULT_DECAY: f64 = 0.7;

/// Pairs per forward pass when scoring a corpus.
const EVAL_CHUNK: usize = 32;

/// Anything that can assign log-probabilities to gold target tokens.
pub trait SequenceScorer: Sync {
    /// For each pair, the log-probability of every token of
    /// `pair.decoder_output()` under teacher forcing.
    fn gold_log_probs(&self, pairs: &[Pair]) -> Result<Vec<Vec<f64>>>;
}

impl SequenceScorer for Model {
    fn gold_log_probs(&self, pairs: &[Pair]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::with_params(self.params());
        let src: Vec<&[usize]> = pairs.iter().map(|p| p.source.as_slice()).collect();
        let inp: Vec<&[usize]> = pairs.iter().map(Pair::decoder_input).collect();
        let (logits, _) = self.forward(&mut g, &src, &inp, None, false)?;
        let v = self.config().tgt_vocab;
        let mut rows = g.value(logits).chunks(v);
        Ok(pairs
            .iter()
            .map(|p| {
                p.decoder_output()
                    .iter()
                    .map(|&t| crate::tensor::kernels::log_softmax_row(rows.next().expect("one row per token"))[t])
                    .collect()
            })
            .collect())
    }
}

/// `exp(total NLL / total target tokens)` with EOS counted and BOS/PAD
/// excluded.
pub fn perplexity<S: SequenceScorer + ?Sized>(scorer: &S, corpus: &[Pair]) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Data("perplexity of an empty corpus".into()));
    }
    if let Some(p) = corpus.iter().find(|p| p.target.len() < 2) {
        return Err(Error::Data(format!("target {:?} has no tokens after BOS", p.target)));
    }
    let chunks: Vec<&[Pair]> = corpus.chunks(EVAL_CHUNK).collect();
    let scored = par::map(&chunks, |c| scorer.gold_log_probs(c));
    let mut nll = 0.0;
    let mut tokens = 0usize;
    for chunk in scored {
        for sentence in chunk? {
            tokens += sentence.len();
            nll -= sentence.iter().sum::<f64>();
        }
    }
    Ok((nll / tokens as f64).exp())
}

/// Optimizer and schedule settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub checkpoint_interval: u64,
    pub patience: usize,
    pub plateau_checkpoints: usize,
    pub decay: f64,
    /// Target tokens per batch.
    pub batch_tokens: usize,
    pub label_smoothing: f64,
    /// Global gradient-norm clip; `None` picks 1.0 for RNNs and no clipping
    /// for Transformers.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            checkpoint_interval: DEFAULT_CHECKPOINT_INTERVAL,
            patience: DEFAULT_PATIENCE,
            plateau_checkpoints: DEFAULT_PLATEAU_CHECKPOINTS,
            decay: DEFAULT_DECAY,
            batch_tokens: DEFAULT_BATCH_TOKENS,
            label_smoothing: 0.0,
            clip_norm: None,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.checkpoint_interval == 0 {
            return fail("checkpoint_interval must be positive".into());
        }
        if self.patience == 0 || self.plateau_checkpoints == 0 {
            return fail("patience and plateau_checkpoints must be positive".into());
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return fail(format!("decay must be in (0, 1], got {}", self.decay));
        }
        if !(self.adam.lr > 0.0) {
            return fail(format!("learning rate must be positive, got {}", self.adam.lr));
        }
        if self.batch_tokens == 0 {
            return fail("batch_tokens must be positive".into());
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return fail(format!("label_smoothing must be in [0, 1), got {}", self.label_smoothing));
        }
        Ok(())
    }

    fn clip_for(&self, c: &ModelConfig) -> Option<f64> {
        self.clip_norm.or(match c.family {
            Family::Rnn => Some(1.0),
            Family::Transformer => None,
        })
    }
}

/// Schedule bookkeeping across checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub update_count: u64,
    pub checkpoint_index: usize,
    pub best_val_ppl: f64,
    pub checkpoints_since_best: usize,
    pub lr: f64,
    pub seed: u64,
    pub plateau: usize,
}

impl TrainState {
    pub fn new(lr: f64, seed: u64) -> Self {
        Self {
            update_count: 0,
            checkpoint_index: 0,
            best_val_ppl: f64::INFINITY,
            checkpoints_since_best: 0,
            lr,
            seed,
            plateau: 0,
        }
    }
}

/// What one checkpoint decided.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScheduleOutcome {
    pub improved: bool,
    pub decayed: bool,
    pub stop: bool,
}

/// Records one checkpoint's validation perplexity. A strict improvement
/// resets both counters; otherwise the plateau counter advances, the rate is
/// multiplied by `decay` when it reaches `plateau_checkpoints` (and the
/// counter resets), and `stop` is raised once `patience` checkpoints in a row
/// have failed to improve.
pub fn lr_schedule_step(state: &mut TrainState, new_val_ppl: f64, cfg: &TrainConfig) -> ScheduleOutcome {
    state.checkpoint_index += 1;
    if new_val_ppl < state.best_val_ppl {
        state.best_val_ppl = new_val_ppl;
        state.checkpoints_since_best = 0;
        state.plateau = 0;
        return ScheduleOutcome { improved: true, decayed: false, stop: false };
    }
    state.checkpoints_since_best += 1;
    state.plateau += 1;
    let decayed = state.plateau >= cfg.plateau_checkpoints;
    if decayed {
        state.lr *= cfg.decay;
        state.plateau = 0;
    }
    ScheduleOutcome {
        improved: false,
        decayed,
        stop: state.checkpoints_since_best >= cfg.patience,
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMetrics {
    pub checkpoint_index: usize,
    pub updates: u64,
    /// Mean per-token training loss since the previous checkpoint.
    pub train_loss: f64,
    pub val_ppl: f64,
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "checkpoint_index\tupdates\ttrain_loss\tval_ppl\tlr";

impl CheckpointMetrics {
    pub fn tsv_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.checkpoint_index, self.updates, self.train_loss, self.val_ppl, self.lr
        )
    }
}

pub fn write_metrics(path: impl AsRef<Path>, rows: &[CheckpointMetrics]) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let mut text = String::from(METRICS_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&r.tsv_line());
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}

/// Training and validation data.
#[derive(Debug, Clone, Copy)]
pub struct Corpora<'a> {
    pub train: &'a [Pair],
    pub valid: &'a [Pair],
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the checkpoint with the lowest validation perplexity
    /// (the initial model when no checkpoint was taken).
    pub best: Model,
    pub best_checkpoint: Option<usize>,
    pub metrics: Vec<CheckpointMetrics>,
    pub state: TrainState,
    pub stopped_early: bool,
}

/// Trains a freshly initialized model (seeded from `cfg.seed`) for at most
/// `budget` updates.
pub fn train(model_config: &ModelConfig, corpora: Corpora<'_>, budget: u64, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let model = Model::new(model_config.clone(), cfg.seed)?;
    train_model(model, corpora, budget, cfg)
}

/// Continues training an existing model (frozen parameters stay fixed).
pub fn train_model(mut model: Model, corpora: Corpora<'_>, budget: u64, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpora.train.is_empty() {
        return Err(Error::Data("empty training corpus".into()));
    }
    if corpora.valid.is_empty() {
        return Err(Error::Data("empty validation corpus".into()));
    }
    let clip = cfg.clip_for(model.config());
    let mut state = TrainState::new(cfg.adam.lr, cfg.seed);
    let mut adam = AdamState::new(model.params(), cfg.adam);
    let mut master = rng::seeded(cfg.seed ^ 0x5eed_da7a);
    let mut dropout_rng = rng::split(&mut master);
    let mut best: Option<(Model, usize)> = None;
    let mut metrics = Vec::new();
    let mut stopped_early = false;
    let mut window_loss = 0.0;
    let mut window_tokens = 0usize;
    let mut epoch = 0u64;

    'outer: while state.update_count < budget {
        let batches = make_batches(corpora.train, cfg.batch_tokens, rand::RngCore::next_u64(&mut master));
        epoch += 1;
        log::debug!("epoch {epoch}: {} batches", batches.len());
        for batch in &batches {
            if state.update_count >= budget {
                break 'outer;
            }
            let (loss_sum, tokens, grads) = {
                let mut g = Graph::with_params(model.params());
                let src: Vec<&[usize]> = batch.pairs.iter().map(|p| p.source.as_slice()).collect();
                let inp: Vec<&[usize]> = batch.pairs.iter().map(Pair::decoder_input).collect();
                let out: Vec<usize> = batch.pairs.iter().flat_map(|p| p.decoder_output().iter().copied()).collect();
                let (logits, _) = model.forward(&mut g, &src, &inp, Some(&mut dropout_rng), false)?;
                let total = g.cross_entropy(logits, &out, cfg.label_smoothing)?;
                let loss = g.scale(total, 1.0 / out.len() as f64);
                let value = g.value(total)[0];
                (value, out.len(), g.backward(loss)?)
            };
            let update = state.update_count + 1;
            if !loss_sum.is_finite() {
                return Err(Error::Divergence {
                    update,
                    detail: format!("training loss is {loss_sum}"),
                });
            }
            model.params_mut().zero_grads();
            grads.accumulate_into(model.params_mut())?;
            let norm = match clip {
                Some(c) => model.params_mut().clip_grad_norm(c),
                None => model.params().grad_norm(),
            };
            if !norm.is_finite() {
                return Err(Error::Divergence {
                    update,
                    detail: format!("gradient norm is {norm}"),
                });
            }
            adam.lr = state.lr;
            adam.update(model.params_mut())?;
            state.update_count = update;
            window_loss += loss_sum;
            window_tokens += tokens;

            if state.update_count % cfg.checkpoint_interval == 0 {
                if checkpoint(&model, corpora, &mut state, cfg, &mut best, &mut metrics, &mut window_loss, &mut window_tokens)? {
                    stopped_early = true;
                    break 'outer;
                }
            }
        }
    }
    // score the tail of a run whose budget is not a multiple of the interval
    if !stopped_early && window_tokens > 0 {
        checkpoint(&model, corpora, &mut state, cfg, &mut best, &mut metrics, &mut window_loss, &mut window_tokens)?;
    }
    let (best, best_checkpoint) = match best {
        Some((m, i)) => (m, Some(i)),
        None => (model, None),
    };
    Ok(TrainOutcome {
        best,
        best_checkpoint,
        metrics,
        state,
        stopped_early,
    })
}

#[allow(clippy::too_many_arguments)]
fn checkpoint(
    model: &Model,
    corpora: Corpora<'_>,
    state: &mut TrainState,
    cfg: &TrainConfig,
    best: &mut Option<(Model, usize)>,
    metrics: &mut Vec<CheckpointMetrics>,
    window_loss: &mut f64,
    window_tokens: &mut usize,
) -> Result<bool> {
    let val_ppl = perplexity(model, corpora.valid)?;
    if !val_ppl.is_finite() {
        return Err(Error::Divergence {
            update: state.update_count,
            detail: format!("validation perplexity is {val_ppl}"),
        });
    }
    let lr_used = state.lr;
    let outcome = lr_schedule_step(state, val_ppl, cfg);
    let row = CheckpointMetrics {
        checkpoint_index: state.checkpoint_index,
        updates: state.update_count,
        train_loss: *window_loss / (*window_tokens).max(1) as f64,
        val_ppl,
        lr: lr_used,
    };
    log::info!("{}", row.tsv_line());
    metrics.push(row);
    *window_loss = 0.0;
    *window_tokens = 0;
    if outcome.improved {
        let mut snapshot = model.clone();
        snapshot.params_mut().zero_grads();
        *best = Some((snapshot, state.checkpoint_index));
    }
    if outcome.decayed {
        log::info!("validation plateau: learning rate now {}", state.lr);
    }
    if outcome.stop {
        log::info!(
            "early stop after {} checkpoints without improvement",
            state.checkpoints_since_best
        );
    }
    Ok(outcome.stop)
}

#[cfg(test)]
mod tests;
