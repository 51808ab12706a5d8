//! Run configuration and the five-experiment grid.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::acme::CausalGraph;
use crate::corpus::{self, corpus_hash, kfold, split, Fold, Record, Side, SplitSpec, SyntheticConfig, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::icd::{map_sequence_9_to_10, CodeSystem, GemTable, MapPolicy};
use crate::model::{train, EpochMetrics, ModelConfig, Seq2Seq, TrainConfig};
use crate::search::{translate_corpus, SearchOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// `.jsonl` file, or a prefix with `.src` and `.tgt` files.
    pub corpus: Option<PathBuf>,
    pub acme: Option<PathBuf>,
    pub gem: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Tab-separated `code<TAB>description` lines for autocomplete.
    pub dictionary: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { corpus: None, acme: None, gem: None, checkpoint: None, dictionary: None, output_dir: PathBuf::from("runs") }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BeamConfig {
    pub beam_size: usize,
    pub max_len: usize,
    pub constrained: bool,
    /// Length-penalty exponent for beam ranking; 0 disables it.
    pub length_penalty: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self { beam_size: 5, max_len: 20, constrained: false, length_penalty: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub src_system: CodeSystem,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub beam: BeamConfig,
    pub split: SplitSpec,
    /// Number of cross-validation folds; 1 uses `split` once.
    pub folds: usize,
    pub experiment: u8,
    pub synth: SyntheticConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            src_system: CodeSystem::Icd9,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            beam: BeamConfig::default(),
            split: SplitSpec::default(),
            folds: 5,
            experiment: 1,
            synth: SyntheticConfig::default(),
        }
    }
}

fn set_path(value: &mut toml::Value, key: &str, new: toml::Value) -> Result<()> {
    let mut cur = value;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = cur.as_table_mut().ok_or_else(|| Error::ConfigInvalid(format!("`{key}`: `{part}` is not inside a table")))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), new);
            return Ok(());
        }
        cur = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
    }
    Err(Error::ConfigInvalid(format!("empty override key `{key}`")))
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::ConfigInvalid(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| e.context(format!("reading config {}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::ConfigInvalid(e.to_string()))
    }

    /// Applies `section.key=value` overrides. Values are parsed as TOML and
    /// fall back to plain strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut value = toml::Value::try_from(self).map_err(|e| Error::ConfigInvalid(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o.split_once('=').ok_or_else(|| Error::ConfigInvalid(format!("override `{o}` is not key=value")))?;
            let parsed = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            set_path(&mut value, key.trim(), parsed)?;
        }
        value.try_into().map_err(|e: toml::de::Error| Error::ConfigInvalid(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        Experiment::from_id(self.experiment)?;
        if self.beam.beam_size == 0 || self.beam.max_len == 0 {
            return Err(Error::ConfigInvalid("beam_size and max_len must be positive".into()));
        }
        if !(self.beam.length_penalty >= 0.0) {
            return Err(Error::ConfigInvalid("length_penalty must be non-negative".into()));
        }
        if self.folds == 0 {
            return Err(Error::ConfigInvalid("folds must be at least 1".into()));
        }
        Ok(())
    }
}

/// Loads a `.jsonl` corpus, or `<prefix>.src` / `<prefix>.tgt`.
pub fn load_corpus(path: impl AsRef<Path>, system: CodeSystem) -> Result<Vec<Record>> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e == "jsonl") {
        return corpus::load_jsonl(path, system);
    }
    let with = |ext: &str| {
        let mut p = path.as_os_str().to_owned();
        p.push(ext);
        PathBuf::from(p)
    };
    corpus::load_parallel(with(".src"), with(".tgt"), system)
}

/// Writes a `.jsonl` corpus, or `<prefix>.src` / `<prefix>.tgt`.
pub fn write_corpus(records: &[Record], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e == "jsonl") {
        return corpus::write_jsonl(records, path);
    }
    let with = |ext: &str| {
        let mut p = path.as_os_str().to_owned();
        p.push(ext);
        PathBuf::from(p)
    };
    corpus::write_parallel(records, with(".src"), with(".tgt"))
}

/// Maps every source sequence through the GEM table. Returns the mapped
/// copy and the number of unmapped source codes.
pub fn map_sources(records: &[Record], gem: &GemTable) -> (Vec<Record>, usize) {
    let mut unmapped = 0;
    let mapped = records
        .iter()
        .map(|r| {
            let m = map_sequence_9_to_10(&r.src, gem, MapPolicy::First);
            unmapped += m.unmapped_count;
            Record { id: r.id.clone(), src: m.codes, tgt: r.tgt.clone() }
        })
        .collect();
    (mapped, unmapped)
}

/// One cell of the experiment grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Experiment {
    pub id: u8,
    pub validity_check: bool,
    pub constrained: bool,
    pub gem_mapped: bool,
}

impl Experiment {
    pub fn from_id(id: u8) -> Result<Self> {
        let (validity_check, constrained, gem_mapped) = match id {
            1 => (false, false, false),
            2 => (true, false, false),
            3 => (false, true, false),
            4 => (true, true, false),
            5 => (false, false, true),
            other => return Err(Error::ConfigInvalid(format!("experiment must be 1-5, got {other}"))),
        };
        Ok(Self { id, validity_check, constrained, gem_mapped })
    }

    pub fn needs_graph(&self) -> bool {
        self.validity_check || self.constrained
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    /// Hash of the test fold before and after the fold ran.
    pub test_hash: String,
    pub test_hash_after: String,
    pub train_records: usize,
    pub valid_records: usize,
    pub removed_by_check: usize,
    pub unmapped_codes: usize,
    pub best_epoch: usize,
    pub history: Vec<EpochMetrics>,
    pub eval: EvalReport,
    /// Fraction of generated chains whose every edge is valid, when a table is loaded.
    pub valid_chain_rate: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Summary {
    pub bleu: f64,
    pub exact: f64,
    pub code: f64,
    pub underlying: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: Experiment,
    pub config: PipelineConfig,
    pub folds: Vec<FoldReport>,
    pub mean: Summary,
    /// Sample standard deviation; zero for a single fold.
    pub stddev: Summary,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn summarize(folds: &[FoldReport]) -> (Summary, Summary) {
    let pick = |f: fn(&FoldReport) -> f64| mean_std(&folds.iter().map(f).collect::<Vec<_>>());
    let (b, bs) = pick(|f| f.eval.bleu.score);
    let (e, es) = pick(|f| f.eval.exact);
    let (c, cs) = pick(|f| f.eval.code);
    let (u, us) = pick(|f| f.eval.underlying);
    (Summary { bleu: b, exact: e, code: c, underlying: u }, Summary { bleu: bs, exact: es, code: cs, underlying: us })
}

/// Folds for `config`: k-fold when `folds > 1`, else one split.
pub fn make_folds(records: &[Record], config: &PipelineConfig) -> Vec<Fold> {
    if config.folds > 1 {
        kfold(records, config.folds, config.split.seed)
    } else {
        let s = split(records, config.split);
        vec![Fold { train: s.train, valid: s.valid, test: s.test }]
    }
}

/// Runs one fold. The test fold is only read.
pub fn run_fold(
    index: usize,
    fold: &Fold,
    config: &PipelineConfig,
    experiment: Experiment,
    graph: Option<&CausalGraph>,
    gem: Option<&GemTable>,
    on_epoch: &mut dyn FnMut(usize, &EpochMetrics),
) -> Result<FoldReport> {
    let test_hash = corpus_hash(&fold.test);
    let (mut train_set, mut valid_set) = (fold.train.clone(), fold.valid.clone());
    let mut removed = 0;
    if experiment.validity_check {
        let g = graph.ok_or_else(|| Error::ConfigInvalid("validity check needs an ACME table".into()))?;
        let t = g.filter_corpus(&train_set);
        let v = g.filter_corpus(&valid_set);
        removed = t.removed_count + v.removed_count;
        train_set = t.kept;
        valid_set = v.kept;
    }
    let mut test_set = fold.test.clone();
    let mut unmapped = 0;
    if experiment.gem_mapped {
        let gem = gem.ok_or_else(|| Error::ConfigInvalid("experiment 5 needs a GEM table".into()))?;
        let (a, ua) = map_sources(&train_set, gem);
        let (b, ub) = map_sources(&valid_set, gem);
        let (c, uc) = map_sources(&test_set, gem);
        (train_set, valid_set, test_set) = (a, b, c);
        unmapped = ua + ub + uc;
    }
    let model = Seq2Seq::new(
        config.model.clone(),
        Vocabulary::build(&train_set, Side::Src, 1),
        Vocabulary::build(&train_set, Side::Tgt, 1),
    )?;
    let outcome = train(model, &train_set, &valid_set, &config.train, |m| on_epoch(index, m))?;
    let mask = if experiment.constrained {
        let g = graph.ok_or_else(|| Error::ConfigInvalid("constrained decoding needs an ACME table".into()))?;
        Some(g.build_constraint_mask(&outcome.model.tgt_vocab))
    } else {
        None
    };
    let opts = SearchOptions {
        beam_size: config.beam.beam_size,
        max_len: config.beam.max_len,
        mask: mask.as_ref(),
        length_penalty: config.beam.length_penalty,
    };
    let decoded = translate_corpus(&outcome.model, &test_set, &opts, graph)?;
    let pairs: Vec<(Vec<String>, Vec<String>)> =
        decoded.iter().zip(&test_set).map(|(d, r)| (d.translation.chain.clone(), r.tgt_tokens())).collect();
    let eval = evaluate(&pairs)?;
    let valid_chain_rate = graph.map(|g| {
        let ok = decoded.iter().filter(|d| g.chain_is_valid(&d.translation.chain).valid).count();
        ok as f64 / decoded.len().max(1) as f64
    });
    Ok(FoldReport {
        fold: index,
        test_hash_after: corpus_hash(&fold.test),
        test_hash,
        train_records: train_set.len(),
        valid_records: valid_set.len(),
        removed_by_check: removed,
        unmapped_codes: unmapped,
        best_epoch: outcome.best_epoch,
        history: outcome.history,
        eval,
        valid_chain_rate,
    })
}

/// Fold loop with mean and sample standard deviation across folds.
pub fn run_experiment(
    config: &PipelineConfig,
    records: &[Record],
    graph: Option<&CausalGraph>,
    gem: Option<&GemTable>,
    mut on_epoch: impl FnMut(usize, &EpochMetrics),
) -> Result<ExperimentReport> {
    config.validate()?;
    let experiment = Experiment::from_id(config.experiment)?;
    if records.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let folds = make_folds(records, config);
    let mut reports = Vec::with_capacity(folds.len());
    for (i, fold) in folds.iter().enumerate() {
        let r = run_fold(i, fold, config, experiment, graph, gem, &mut on_epoch)
            .map_err(|e| e.context(format!("experiment {} fold {i}", experiment.id)))?;
        reports.push(r);
    }
    let (mean, stddev) = summarize(&reports);
    Ok(ExperimentReport { experiment, config: config.clone(), folds: reports, mean, stddev })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SyntheticConfig};
    use crate::model::{EncoderKind, Preset};

    #[test]
    fn experiment_grid() {
        let e: Vec<(bool, bool, bool)> = (1..=5).map(|i| Experiment::from_id(i).unwrap()).map(|e| (e.validity_check, e.constrained, e.gem_mapped)).collect();
        assert_eq!(e, [(false, false, false), (true, false, false), (false, true, false), (true, true, false), (false, false, true)]);
        assert!(Experiment::from_id(0).is_err());
        assert!(Experiment::from_id(6).is_err());
    }

    #[test]
    fn toml_round_trip_and_overrides() {
        let cfg = PipelineConfig::from_toml("experiment = 3\n[model]\nencoder = \"brnn\"\nhidden_dims = [8, 8]\n[train]\nepochs = 2\n").unwrap();
        assert_eq!(cfg.experiment, 3);
        assert_eq!(cfg.model.encoder, EncoderKind::Brnn);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
        let back = PipelineConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        let o = cfg.with_overrides(&["train.epochs=7", "paths.corpus=data/x.jsonl", "beam.constrained=true", "src_system=\"icd10\""]).unwrap();
        assert_eq!(o.train.epochs, 7);
        assert_eq!(o.paths.corpus, Some(PathBuf::from("data/x.jsonl")));
        assert!(o.beam.constrained);
        assert_eq!(o.src_system, CodeSystem::Icd10);
        assert!(cfg.with_overrides(&["train.epochs"]).is_err());
        assert!(cfg.with_overrides(&["train.epochs=\"many\""]).is_err());
        assert!(PipelineConfig::from_toml("bogus = [").is_err());
        assert!(PipelineConfig::from_toml("[beam]\nbeam_sise = 3\n").is_err());
        assert!(cfg.with_overrides(&["model.hiden=4"]).is_err());
        PipelineConfig::default().validate().unwrap();
    }

    #[test]
    fn sample_stddev() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(m, 3.0);
        assert!((s - 2.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }

    fn small_run(experiment: u8) -> (ExperimentReport, Vec<Record>, CausalGraph) {
        let corpus = generate_synthetic(&SyntheticConfig { n_records: 150, src_vocab_size: 20, tgt_vocab_size: 12, ..SyntheticConfig::default() }).unwrap();
        let text = corpus.acme_lines.join("\n");
        let mut graph_rules = CausalGraph::parse(&text, Path::new("acme.txt")).unwrap().rules().to_vec();
        // drop some rules so the check removes records
        graph_rules.truncate(graph_rules.len() * 2 / 3);
        let graph = CausalGraph::from_rules(graph_rules);
        let gem = GemTable::parse(&corpus.gem_lines.join("\n"), Path::new("gem.txt")).unwrap();
        let mut model = ModelConfig::preset(EncoderKind::Lstm, Preset::Desk);
        model.embed_dim = 8;
        model.hidden_dims = vec![8];
        model.dec_hidden = 8;
        let config = PipelineConfig {
            experiment,
            folds: 2,
            model,
            train: TrainConfig { epochs: 2, batch_size: 16, ..TrainConfig::default() },
            beam: BeamConfig { beam_size: 2, max_len: 6, ..BeamConfig::default() },
            ..PipelineConfig::default()
        };
        let report = run_experiment(&config, &corpus.records, Some(&graph), Some(&gem), |_, _| {}).unwrap();
        (report, corpus.records, graph)
    }

    #[test]
    fn experiments_keep_test_folds_and_are_reproducible() {
        let (r1, records, _) = small_run(1);
        let folds = make_folds(&records, &r1.config);
        for e in [2, 4] {
            let (r, _, _) = small_run(e);
            for (f, fold) in r.folds.iter().zip(&folds) {
                assert_eq!(f.test_hash, corpus_hash(&fold.test));
                assert_eq!(f.test_hash, f.test_hash_after);
                assert_eq!(f.eval.n, fold.test.len());
            }
            assert!(r.folds.iter().any(|f| f.removed_by_check > 0));
            assert!(r.folds.iter().all(|f| f.train_records + f.valid_records + f.removed_by_check == records.len() - f.eval.n));
        }
        let (r3, _, _) = small_run(3);
        assert!(r3.folds.iter().all(|f| f.valid_chain_rate == Some(1.0)));
        let (again, _, _) = small_run(1);
        assert_eq!(again, r1);
        let (r5, _, _) = small_run(5);
        assert!(r5.folds.iter().all(|f| f.unmapped_codes == 0));
        assert_eq!(r1.folds.len(), 2);
    }
}
