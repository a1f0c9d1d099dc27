use std::fs;
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nmt_ablation::analysis::{
    attention_entropy, corpus_aer, corpus_bleu, corpus_entropy, extract_alignment, nearest_neighbors,
    read_gold_alignments, transplant_embeddings, AlignmentLinks,
};
use nmt_ablation::config::{load_config, ExperimentConfig, Preset};
use nmt_ablation::data::{encode_corpus, read_lines, Pair, read_parallel, Vocabulary};
use nmt_ablation::inference::{forced_decode_all, read_attention_dump, translate_all, write_attention_dump, BeamConfig};
use nmt_ablation::model::{Model, ModelConfig, Variant};
use nmt_ablation::subword::{learn_bpe, restore_words, BpeModel, DEFAULT_MARKER};
use nmt_ablation::training::{train, train_model, write_metrics, Corpora};
use nmt_ablation::{Error, Result};

/// Encoder-free and ablated NMT: training, decoding and attention analysis.
#[derive(Parser)]
#[command(name = "nmt-ablation", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn BPE merges from whitespace-tokenized text.
    LearnBpe {
        /// Training text files; all words are pooled.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value_t = nmt_ablation::subword::DEFAULT_NUM_MERGES)]
        merges: usize,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value = DEFAULT_MARKER)]
        marker: String,
    },
    /// Segment text with learned merges, or undo segmentation with --restore.
    ApplyBpe {
        #[arg(long, required_unless_present = "restore")]
        codes: Option<PathBuf>,
        #[command(flatten)]
        io: TextIo,
        #[arg(long, default_value = DEFAULT_MARKER)]
        marker: String,
        /// Join marked subwords back into words.
        #[arg(long)]
        restore: bool,
    },
    /// Train a model; writes model.ckpt and metrics.tsv into the output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        output_dir: PathBuf,
        /// Start from this checkpoint (vocabulary, architecture and frozen
        /// flags come from it).
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Beam-search translation, one hypothesis per input line.
    Translate {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        io: TextIo,
        #[arg(long, default_value_t = nmt_ablation::inference::DEFAULT_BEAM)]
        beam: usize,
        #[arg(long, default_value_t = nmt_ablation::inference::DEFAULT_MAX_LEN)]
        max_len: usize,
        /// Length-normalization exponent.
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        /// Join subwords marked with this marker in the output.
        #[arg(long)]
        restore: Option<String>,
    },
    /// Corpus BLEU of a hypothesis file against a reference file.
    ScoreBleu {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
    },
    /// Force-decode references and dump decoder attention.
    ForceAlign {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Alignment error rate against Pharaoh-format gold alignments.
    Aer {
        #[arg(long)]
        gold: PathBuf,
        /// Predicted links in Pharaoh format.
        #[arg(long, conflicts_with = "attention", required_unless_present = "attention")]
        links: Option<PathBuf>,
        /// Attention dump from force-align; every layer is scored.
        #[arg(long, requires_all = ["source", "target"])]
        attention: Option<PathBuf>,
        /// Subword source text the dump was made from.
        #[arg(long)]
        source: Option<PathBuf>,
        /// Subword target text the dump was made from.
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long, default_value = DEFAULT_MARKER)]
        marker: String,
    },
    /// Mean attention entropy per decoder layer, in nats.
    Entropy {
        #[arg(long)]
        attention: PathBuf,
    },
    /// Nearest neighbors of a token in a model's source embeddings.
    Neighbors {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, required = true)]
        token: Vec<String>,
        #[arg(short, long, default_value_t = nmt_ablation::analysis::DEFAULT_NEIGHBORS)]
        k: usize,
    },
    /// Copy embeddings from one checkpoint into another.
    Transplant {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Freeze the copied embeddings for later training.
        #[arg(long)]
        fixed: bool,
    },
    /// Analytic parameter count per component.
    Params(ParamsArgs),
}

#[derive(Args)]
struct TextIo {
    /// Defaults to standard input.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Defaults to standard output.
    #[arg(long)]
    output: Option<PathBuf>,
}

impl TextIo {
    fn read(&self) -> Result<Vec<String>> {
        match &self.input {
            Some(p) => read_lines(p),
            None => {
                let mut s = String::new();
                io::stdin()
                    .read_to_string(&mut s)
                    .map_err(|e| Error::io(Path::new("<stdin>"), e))?;
                Ok(s.lines().map(str::to_string).collect())
            }
        }
    }

    fn write(&self, lines: &[String]) -> Result<()> {
        let mut text = lines.join("\n");
        if !lines.is_empty() {
            text.push('\n');
        }
        match &self.output {
            Some(p) => fs::write(p, text).map_err(|e| Error::io(p, e)),
            None => io::stdout()
                .write_all(text.as_bytes())
                .map_err(|e| Error::io(Path::new("<stdout>"), e)),
        }
    }
}

#[derive(Args)]
struct ParamsArgs {
    /// Experiment config; the full-size preset when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    #[arg(long)]
    encoder_layers: Option<usize>,
    #[arg(long)]
    decoder_layers: Option<usize>,
    /// Joint vocabulary size, reserved tokens included.
    #[arg(long, default_value_t = 32_000)]
    vocab: usize,
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn experiment_corpora(cfg: &ExperimentConfig, vocab: Option<&Vocabulary>) -> Result<(Vocabulary, Vec<Pair>, Vec<Pair>)> {
    let need = |p: &Option<PathBuf>, key: &str| {
        p.clone().ok_or_else(|| Error::Config(format!("config key {key} is required for training")))
    };
    let (src, tgt) = read_parallel(need(&cfg.paths.train_src, "train_src")?, need(&cfg.paths.train_tgt, "train_tgt")?, Some(cfg.filter))?;
    let (dev_src, dev_tgt) = read_parallel(need(&cfg.paths.dev_src, "dev_src")?, need(&cfg.paths.dev_tgt, "dev_tgt")?, None)?;
    let vocab = match vocab {
        Some(v) => v.clone(),
        None => {
            let joint: Vec<&String> = src.iter().chain(&tgt).collect();
            Vocabulary::build(&joint, cfg.min_count)?
        }
    };
    let train = encode_corpus(&vocab, &src, &tgt)?;
    let valid = encode_corpus(&vocab, &dev_src, &dev_tgt)?;
    log::info!("{} training pairs, {} validation pairs, vocabulary {}", train.len(), valid.len(), vocab.len());
    Ok((vocab, train, valid))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::LearnBpe { inputs, merges, output, marker } => {
            let mut text = Vec::new();
            for p in &inputs {
                text.extend(read_lines(p)?);
            }
            let model = learn_bpe(text.iter().flat_map(|l| l.split_whitespace()), merges, &marker)?;
            if model.num_merges() < merges {
                log::warn!("only {} merges could be learned", model.num_merges());
            }
            model.save(&output)
        }
        Command::ApplyBpe { codes, io, marker, restore } => {
            let lines = io.read()?;
            let out: Vec<String> = if restore {
                lines
                    .iter()
                    .map(|l| restore_words(&l.split_whitespace().collect::<Vec<_>>(), &marker).words.join(" "))
                    .collect()
            } else {
                let model = BpeModel::load(codes.expect("clap enforces --codes"), &marker)?;
                lines.iter().map(|l| model.apply(l).join(" ")).collect()
            };
            io.write(&out)
        }
        Command::Train { config, output_dir, init } => {
            let cfg = load_config(&config)?;
            fs::create_dir_all(&output_dir).map_err(|e| Error::io(&output_dir, e))?;
            let (outcome, vocab) = match init {
                Some(ckpt) => {
                    let (model, vocab) = Model::load(&ckpt)?;
                    let (_, train, valid) = experiment_corpora(&cfg, Some(&vocab))?;
                    let corpora = Corpora { train: &train, valid: &valid };
                    (train_model(model, corpora, cfg.max_updates, &cfg.train)?, vocab)
                }
                None => {
                    let (vocab, train_set, valid) = experiment_corpora(&cfg, None)?;
                    let model = cfg.model_config(vocab.len())?;
                    let corpora = Corpora { train: &train_set, valid: &valid };
                    (train(&model, corpora, cfg.max_updates, &cfg.train)?, vocab)
                }
            };
            outcome.best.save(&vocab, output_dir.join("model.ckpt"))?;
            write_metrics(output_dir.join("metrics.tsv"), &outcome.metrics)?;
            log::info!(
                "best checkpoint {:?} after {} updates{}",
                outcome.best_checkpoint,
                outcome.state.update_count,
                if outcome.stopped_early { " (early stop)" } else { "" }
            );
            Ok(())
        }
        Command::Translate { model, io, beam, max_len, alpha, restore } => {
            let (model, vocab) = Model::load(&model)?;
            let sources: Vec<Vec<usize>> = io.read()?.iter().map(|l| vocab.encode_source(l)).collect();
            let hyps = translate_all(&model, &sources, &BeamConfig { beam, max_len, alpha })?;
            let out: Vec<String> = hyps
                .iter()
                .map(|h| {
                    let text = vocab.decode(h.content());
                    match &restore {
                        Some(m) => restore_words(&text.split_whitespace().collect::<Vec<_>>(), m).words.join(" "),
                        None => text,
                    }
                })
                .collect();
            io.write(&out)
        }
        Command::ScoreBleu { hyp, reference } => {
            let score = corpus_bleu(&read_lines(&hyp)?, &read_lines(&reference)?)?;
            println!("{score:.2}");
            Ok(())
        }
        Command::ForceAlign { model, source, target, output } => {
            let (model, vocab) = Model::load(&model)?;
            let (src, tgt) = read_parallel(&source, &target, None)?;
            let pairs: Vec<(Vec<usize>, Vec<usize>)> = src
                .iter()
                .zip(&tgt)
                .map(|(s, t)| (vocab.encode_source(s), vocab.encode_source(t)))
                .collect();
            let records: Vec<_> = forced_decode_all(&model, &pairs)?.into_iter().map(|f| f.record).collect();
            write_attention_dump(&output, &records)
        }
        Command::Aer { gold, links, attention, source, target, marker } => {
            let gold = read_gold_alignments(&gold)?;
            if let Some(links) = links {
                let preds = read_lines(&links)?
                    .iter()
                    .map(|l| AlignmentLinks::parse_pharaoh(l))
                    .collect::<Result<Vec<_>>>()?;
                println!("{:.4}", corpus_aer(&preds, &gold)?);
                return Ok(());
            }
            let records = read_attention_dump(attention.expect("clap enforces --links or --attention"))?;
            let (src, tgt) = read_parallel(source.unwrap(), target.unwrap(), None)?;
            if records.len() != src.len() || gold.len() != src.len() {
                return Err(Error::Data(format!(
                    "{} attention records, {} sentence pairs and {} gold alignments",
                    records.len(),
                    src.len(),
                    gold.len()
                )));
            }
            let layers = records.iter().map(|(_, r)| r.layers()).max().unwrap_or(0);
            if layers == 0 {
                return Err(Error::Data("the dump holds no attention".into()));
            }
            let spans = |line: &str| restore_words(&line.split_whitespace().collect::<Vec<_>>(), &marker).spans;
            let mut scores = Vec::with_capacity(layers);
            for layer in 0..layers {
                let preds = records
                    .iter()
                    .zip(src.iter().zip(&tgt))
                    .map(|((_, rec), (s, t))| extract_alignment(rec, &spans(s), &spans(t), layer))
                    .collect::<Result<Vec<_>>>()?;
                scores.push(corpus_aer(&preds, &gold)?);
            }
            let best = (0..layers).fold(0, |b, l| if scores[l] < scores[b] { l } else { b });
            let mut out = BufWriter::new(io::stdout());
            let w = |e| Error::io(Path::new("<stdout>"), e);
            writeln!(out, "layer\taer\tbest").map_err(w)?;
            for (l, s) in scores.iter().enumerate() {
                writeln!(out, "{}\t{s:.4}\t{}", l + 1, if l == best { "*" } else { "" }).map_err(w)?;
            }
            out.flush().map_err(w)
        }
        Command::Entropy { attention } => {
            let records: Vec<_> = read_attention_dump(&attention)?.into_iter().map(|(_, r)| r).collect();
            for (i, r) in records.iter().enumerate() {
                attention_entropy(r).map_err(|e| Error::Data(format!("record {i}: {e}")))?;
            }
            let profile = corpus_entropy(&records)?;
            println!("layer\tentropy_nats");
            for (l, e) in profile.per_layer.iter().enumerate() {
                println!("{}\t{e:.6}", l + 1);
            }
            println!("mean\t{:.6}", profile.overall);
            Ok(())
        }
        Command::Neighbors { model, token, k } => {
            let (model, vocab) = Model::load(&model)?;
            let table = model.params().get(model.source_embedding_id());
            println!("query\trank\tneighbor\tcosine");
            for t in &token {
                for (rank, n) in nearest_neighbors(table, &vocab, t, k)?.iter().enumerate() {
                    println!("{t}\t{}\t{}\t{:.6}", rank + 1, n.token, n.similarity);
                }
            }
            Ok(())
        }
        Command::Transplant { source, target, output, fixed } => {
            let (source, src_vocab) = Model::load(&source)?;
            let (target, tgt_vocab) = Model::load(&target)?;
            if src_vocab != tgt_vocab {
                return Err(Error::Config("source and target checkpoints use different vocabularies".into()));
            }
            transplant_embeddings(target, &source, fixed)?.save(&tgt_vocab, &output)
        }
        Command::Params(args) => {
            let cfg = match &args.config {
                Some(p) => load_config(p)?,
                None => ExperimentConfig::preset(Preset::Full),
            };
            let mut model: ModelConfig = cfg.model_config(args.vocab)?;
            if let Some(v) = args.variant {
                model = v.configure(&model);
            }
            if let Some(n) = args.encoder_layers {
                model.encoder_layers = n;
            }
            if let Some(n) = args.decoder_layers {
                model.decoder_layers = n;
            }
            model.validate()?;
            println!("component\tparameters");
            println!("embeddings\t{}", model.embedding_parameters());
            for l in 0..model.encoder_layers {
                println!("encoder.{l}\t{}", model.encoder_layer_parameters());
            }
            for l in 0..model.decoder_layers {
                println!("decoder.{l}\t{}", model.decoder_layer_parameters());
            }
            println!("head\t{}", model.head_parameters());
            println!("total\t{}", model.parameter_count());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        // usage errors exit with 2, --help and --version with 0
        Err(e) => e.exit(),
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
