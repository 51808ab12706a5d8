//! `codchain` command line.

use std::collections::HashMap;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use codchain::acme::CausalGraph;
use codchain::corpus::{corpus_hash, generate_synthetic, split, Side, SplitSpec, Vocabulary};
use codchain::eval::{evaluate, export_attention};
use codchain::icd::{CodeSystem, GemTable};
use codchain::model::{train, EncoderKind, ModelConfig, Preset, Seq2Seq};
use codchain::pipeline::{load_corpus, map_sources, run_experiment, write_corpus, PipelineConfig};
use codchain::search::{translate_corpus, SearchOptions, Translation};
use codchain::service::{serve, CodeDictionary, ServiceState};
use codchain::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "codchain", version, about = "Causal chain of death generation from discharge diagnosis codes")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set train.epochs=10`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus with its ACME and GEM tables.
    Synth(SynthArgs),
    /// Normalize codes and optionally map sources to ICD-10.
    Preprocess(PreprocessArgs),
    /// Drop records whose chain contains an invalid causal pair.
    ValidityCheck(ValidityArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Decode chains for a corpus.
    Translate(TranslateArgs),
    /// Score translations against references.
    Evaluate(EvaluateArgs),
    /// Run one cell of the experiment grid with cross-validation.
    Experiment(ExperimentArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value = "corpus")]
    name: String,
    #[arg(long)]
    records: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct PreprocessArgs {
    /// `.jsonl` file or `.src`/`.tgt` prefix.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Source coding system; defaults to `src_system`.
    #[arg(long, value_parser = parse_system)]
    system: Option<CodeSystem>,
    /// Map ICD-9 sources to ICD-10 with this GEM file.
    #[arg(long)]
    gem: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ValidityArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    acme: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Training corpus; defaults to `paths.corpus`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Validation corpus. Without it a validation share is split off.
    #[arg(long)]
    valid: Option<PathBuf>,
    /// Output checkpoint; defaults to `paths.checkpoint`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Per-epoch metrics JSONL.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Replace the model section with a preset for this encoder.
    #[arg(long)]
    encoder: Option<EncoderKind>,
    #[arg(long, default_value = "desk", requires = "encoder")]
    preset: Preset,
}

#[derive(Debug, Args)]
struct TranslateArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    input: PathBuf,
    /// Translation JSONL; stdout when absent.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    /// Length-penalty exponent for beam ranking; 0 disables it.
    #[arg(long)]
    length_penalty: Option<f64>,
    /// Restrict hypotheses to valid causal pairs.
    #[arg(long)]
    constrained: bool,
    /// ACME table for constraints and per-edge validity.
    #[arg(long)]
    acme: Option<PathBuf>,
    /// Write one attention grid per record into this directory.
    #[arg(long)]
    attention_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Translation JSONL.
    #[arg(long)]
    pred: PathBuf,
    /// Reference corpus, matched by record id.
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Report JSON; stdout when absent.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExperimentArgs {
    #[arg(long)]
    id: Option<u8>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Report JSON; defaults to `<output_dir>/experiment-<id>.json`.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    acme: Option<PathBuf>,
    #[arg(long)]
    gem: Option<PathBuf>,
    #[arg(long)]
    dictionary: Option<PathBuf>,
    /// Coding system of the model's sources; defaults to `src_system`.
    #[arg(long, value_parser = parse_system)]
    system: Option<CodeSystem>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
}

fn parse_system(s: &str) -> std::result::Result<CodeSystem, String> {
    CodeSystem::parse(s).ok_or_else(|| format!("unknown code system `{s}`"))
}

/// Failure with the process exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e.root() {
            Error::ConfigInvalid(_) => 1,
            root if root.is_data_error() => 2,
            _ => 3,
        };
        Failure { code, message: e.to_string() }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: 1, message: message.into() }
}

fn pick(flag: Option<PathBuf>, config: &Option<PathBuf>, what: &str) -> std::result::Result<PathBuf, Failure> {
    flag.or_else(|| config.clone()).ok_or_else(|| usage(format!("no {what} given by flag or config")))
}

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            std::fs::write(p, text).map_err(|e| Error::io(p, e))
        }
        None => std::io::stdout().write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e)),
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let base = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    base.with_overrides(&cli.overrides)
}

fn run(cli: Cli) -> std::result::Result<(), Failure> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Synth(a) => {
            if let Some(n) = a.records {
                cfg.synth.n_records = n;
            }
            if let Some(s) = a.seed {
                cfg.synth.seed = s;
            }
            let corpus = generate_synthetic(&cfg.synth)?;
            std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
            corpus.write_to(&a.out_dir, &a.name)?;
            eprintln!(
                "wrote {} records, {} ACME lines to {}",
                corpus.records.len(),
                corpus.acme_lines.len(),
                a.out_dir.display()
            );
        }
        Command::Preprocess(a) => {
            let records = load_corpus(&a.input, a.system.unwrap_or(cfg.src_system))?;
            let records = match a.gem {
                Some(path) => {
                    let (mapped, unmapped) = map_sources(&records, &GemTable::load(path)?);
                    eprintln!("{unmapped} source codes had no GEM target");
                    mapped
                }
                None => records,
            };
            write_corpus(&records, &a.output)?;
            eprintln!("wrote {} records, hash {}", records.len(), corpus_hash(&records));
        }
        Command::ValidityCheck(a) => {
            let graph = CausalGraph::load(pick(a.acme, &cfg.paths.acme, "ACME table")?)?;
            let records = load_corpus(&a.input, cfg.src_system)?;
            let out = graph.filter_corpus(&records);
            write_corpus(&out.kept, &a.output)?;
            eprintln!("kept {} records, removed {}", out.kept.len(), out.removed_count);
        }
        Command::Train(a) => {
            if let Some(kind) = a.encoder {
                cfg.model = ModelConfig::preset(kind, a.preset);
            }
            cfg.validate()?;
            let out = pick(a.checkpoint, &cfg.paths.checkpoint, "checkpoint path")?;
            let data = load_corpus(pick(a.data, &cfg.paths.corpus, "training corpus")?, cfg.src_system)?;
            let (train_set, valid_set) = match a.valid {
                Some(v) => (data, load_corpus(v, cfg.src_system)?),
                None => {
                    let (t, v, _) = cfg.split.ratios;
                    let s = split(&data, SplitSpec { ratios: (t, v, 0), seed: cfg.split.seed });
                    (s.train, s.valid)
                }
            };
            if a.metrics.is_some() {
                cfg.train.metrics_path = a.metrics;
            }
            let model = Seq2Seq::new(
                cfg.model.clone(),
                Vocabulary::build(&train_set, Side::Src, 1),
                Vocabulary::build(&train_set, Side::Tgt, 1),
            )?;
            eprintln!("{} parameters, {} train / {} valid records", model.num_parameters(), train_set.len(), valid_set.len());
            let outcome = train(model, &train_set, &valid_set, &cfg.train, |m| {
                eprintln!("epoch {} train_loss {:.4} valid_loss {:.4} valid_ppl {:.3}", m.epoch, m.train_loss, m.valid_loss, m.valid_ppl);
            })?;
            outcome.model.save(&out)?;
            eprintln!("best epoch {}, saved {}", outcome.best_epoch, out.display());
        }
        Command::Translate(a) => {
            let constrained = a.constrained || cfg.beam.constrained;
            let acme = a.acme.or(cfg.paths.acme.clone());
            if constrained && acme.is_none() {
                return Err(usage("constrained decoding needs an ACME table"));
            }
            let model = Seq2Seq::load(pick(a.model, &cfg.paths.checkpoint, "model checkpoint")?)?;
            let records = load_corpus(&a.input, cfg.src_system)?;
            let graph = acme.map(CausalGraph::load).transpose()?;
            let mask = match (&graph, constrained) {
                (Some(g), true) => Some(g.build_constraint_mask(&model.tgt_vocab)),
                _ => None,
            };
            let opts = SearchOptions {
                beam_size: a.beam.unwrap_or(cfg.beam.beam_size),
                max_len: a.max_len.unwrap_or(cfg.beam.max_len),
                mask: mask.as_ref(),
                length_penalty: a.length_penalty.unwrap_or(cfg.beam.length_penalty),
            };
            if opts.beam_size == 0 || opts.max_len == 0 || !(opts.length_penalty >= 0.0) {
                return Err(usage("beam size and max length must be positive and the length penalty non-negative"));
            }
            let decoded = translate_corpus(&model, &records, &opts, graph.as_ref())?;
            let mut text = String::new();
            for d in &decoded {
                text.push_str(&serde_json::to_string(&d.translation).map_err(Error::from)?);
                text.push('\n');
            }
            write_output(a.output.as_deref(), &text)?;
            if let Some(dir) = a.attention_dir {
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                for (d, r) in decoded.iter().zip(&records) {
                    let name: String =
                        r.id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect();
                    export_attention(&d.hypothesis.attention, &r.src_tokens(), &d.translation.chain, dir.join(format!("{name}.tsv")))?;
                }
            }
        }
        Command::Evaluate(a) => {
            let text = std::fs::read_to_string(&a.pred).map_err(|e| Error::io(&a.pred, e))?;
            let mut preds = Vec::new();
            for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let t: Translation = serde_json::from_str(line).map_err(|e| Error::CorpusParse {
                    path: a.pred.clone(),
                    line: i + 1,
                    msg: e.to_string(),
                })?;
                preds.push(t);
            }
            let refs = load_corpus(&a.reference, cfg.src_system)?;
            let by_id: HashMap<&str, Vec<String>> = refs.iter().map(|r| (r.id.as_str(), r.tgt_tokens())).collect();
            let mut pairs = Vec::with_capacity(preds.len());
            for p in preds {
                let reference = by_id
                    .get(p.id.as_str())
                    .ok_or_else(|| Error::InvalidRecord { id: p.id.clone(), msg: "no reference with this id".into() })?;
                pairs.push((p.chain, reference.clone()));
            }
            let report = evaluate(&pairs)?;
            let json = serde_json::to_string_pretty(&report).map_err(Error::from)? + "\n";
            write_output(a.output.as_deref(), &json)?;
        }
        Command::Experiment(a) => {
            if let Some(id) = a.id {
                cfg.experiment = id;
            }
            cfg.validate()?;
            let experiment = codchain::pipeline::Experiment::from_id(cfg.experiment)?;
            let records = load_corpus(pick(a.corpus, &cfg.paths.corpus, "corpus")?, cfg.src_system)?;
            let graph = match &cfg.paths.acme {
                Some(p) => Some(CausalGraph::load(p)?),
                None if experiment.needs_graph() => return Err(usage("this experiment needs paths.acme")),
                None => None,
            };
            let gem = match &cfg.paths.gem {
                Some(p) if experiment.gem_mapped => Some(GemTable::load(p)?),
                None if experiment.gem_mapped => return Err(usage("experiment 5 needs paths.gem")),
                _ => None,
            };
            let out = a.output.unwrap_or_else(|| cfg.paths.output_dir.join(format!("experiment-{}.json", cfg.experiment)));
            let report = run_experiment(&cfg, &records, graph.as_ref(), gem.as_ref(), |fold, m| {
                eprintln!("fold {fold} epoch {} train_loss {:.4} valid_loss {:.4}", m.epoch, m.train_loss, m.valid_loss);
            })?;
            write_output(Some(&out), &(serde_json::to_string_pretty(&report).map_err(Error::from)? + "\n"))?;
            eprintln!(
                "experiment {}: bleu {:.2} ({:.2}) exact {:.3} code {:.3} underlying {:.3}",
                report.experiment.id, report.mean.bleu, report.stddev.bleu, report.mean.exact, report.mean.code, report.mean.underlying
            );
        }
        Command::Serve(a) => {
            let model = Seq2Seq::load(pick(a.model, &cfg.paths.checkpoint, "model checkpoint")?)?;
            let graph = a.acme.or(cfg.paths.acme.clone()).map(CausalGraph::load).transpose()?;
            let gem = a.gem.or(cfg.paths.gem.clone()).map(GemTable::load).transpose()?;
            let dictionary = match a.dictionary.or(cfg.paths.dictionary.clone()) {
                Some(p) => CodeDictionary::load(p)?,
                None => CodeDictionary::bundled(),
            };
            let mut state = ServiceState::new(model, a.system.unwrap_or(cfg.src_system), graph, gem, dictionary);
            state.max_len = cfg.beam.max_len;
            let runtime = tokio::runtime::Runtime::new().map_err(|e| Error::io("<tokio runtime>", e))?;
            eprintln!("listening on {}", a.addr);
            runtime.block_on(serve(Arc::new(state), a.addr))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
