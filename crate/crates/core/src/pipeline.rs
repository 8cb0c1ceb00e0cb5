//! End-to-end commands shared by the command-line tool and the bindings.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::corpus::{
    build_examples, choose_n, hold_out_dev, load_corpus, prepare, split_train_test,
    PhonemeInventory, SplitSpec, TrainingExample, UtteranceRecord,
};
use crate::embeddings::{load_vec_text, EmbeddingTable};
use crate::error::{Error, Result};
use crate::eval::{
    pca_diff_vectors, pca_points_csv, pca_svg, phonetic_accuracy, similarity_eval,
    similarity_report_csv, word_representations, Accuracy, PcaResult, SimilarityBenchmark,
    SimilarityResult, WordRepresentation,
};
use crate::model::checkpoint::Checkpoint;
use crate::model::{ModelConfig, ModelParams};
use crate::signal::MfccExtractor;
use crate::training::{history_csv, train, TrainOutcome};

/// Everything a checkpoint needs besides the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub run: RunConfig,
    pub model: ModelConfig,
    pub phones: Vec<String>,
}

impl Snapshot {
    pub fn inventory(&self) -> PhonemeInventory {
        PhonemeInventory::new(self.phones.clone())
    }
}

pub fn save_model(path: &Path, params: &ModelParams, snapshot: &Snapshot) -> Result<()> {
    let ckpt = Checkpoint {
        config_json: serde_json::to_string(snapshot)?,
        tensors: params
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect(),
    };
    ckpt.save(path)
}

/// Loads a checkpoint; with `expected` the weights are checked against that
/// configuration instead of the one stored alongside them.
pub fn load_model(path: &Path, expected: Option<&ModelConfig>) -> Result<(ModelParams, Snapshot)> {
    let ckpt = Checkpoint::load(path)?;
    let snapshot: Snapshot = serde_json::from_str(&ckpt.config_json)
        .map_err(|e| Error::Checkpoint(format!("unreadable configuration blob: {e}")))?;
    let cfg = expected.unwrap_or(&snapshot.model);
    let params = ModelParams::from_named(cfg, ckpt.tensors)?;
    Ok((params, snapshot))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
    All,
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            "all" => Ok(Split::All),
            other => Err(format!(
                "unknown split {other:?} (expected train, dev, test or all)"
            )),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
            Split::All => "all",
        })
    }
}

/// Examples for every split plus the resources they were built from.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub inventory: PhonemeInventory,
    pub n: usize,
    pub embeddings: EmbeddingTable,
    pub train: Vec<TrainingExample>,
    pub dev: Vec<TrainingExample>,
    pub test: Vec<TrainingExample>,
    pub train_utterances: usize,
    pub dev_utterances: usize,
    pub test_utterances: usize,
    pub unlisted_speakers: Vec<String>,
    pub truncated_segments: usize,
}

impl Dataset {
    pub fn split(&self, which: Split) -> Vec<TrainingExample> {
        match which {
            Split::Train => self.train.clone(),
            Split::Dev => self.dev.clone(),
            Split::Test => self.test.clone(),
            Split::All => [&self.train[..], &self.dev, &self.test].concat(),
        }
    }
}

fn load_embeddings(cfg: &RunConfig) -> Result<EmbeddingTable> {
    let table = load_vec_text(&cfg.embedding_path)?;
    if table.dim() != cfg.d_w {
        return Err(Error::Config(vec![format!(
            "{} holds {}-dimensional vectors but d_w is {}",
            cfg.embedding_path.display(),
            table.dim(),
            cfg.d_w
        )]));
    }
    Ok(table)
}

/// Loads, splits and featurizes the corpus named by `cfg`. `n` and the
/// phone inventory come from `cfg` and the data unless given.
pub fn load_dataset(
    cfg: &RunConfig,
    n: Option<usize>,
    inventory: Option<PhonemeInventory>,
) -> Result<Dataset> {
    let embeddings = load_embeddings(cfg)?;
    let records = load_corpus(&cfg.corpus_root)?;
    if records.is_empty() {
        return Err(Error::Corpus(format!(
            "{} lists no utterances",
            cfg.corpus_root.join("manifest.tsv").display()
        )));
    }
    let spec = SplitSpec::load(&cfg.split_path())?;
    let outcome = split_train_test(&records, &spec)?;
    let (train_recs, dev_recs) = hold_out_dev(outcome.train, cfg.dev_fraction, cfg.seed);
    let inventory = inventory.unwrap_or_else(|| PhonemeInventory::from_records(&records));
    let extractor = MfccExtractor::new(&cfg.mfcc)?;

    let n = match n.or(cfg.n) {
        Some(n) => n,
        None => {
            let counts: Vec<usize> = train_recs
                .iter()
                .flat_map(|r| {
                    r.words
                        .iter()
                        .map(|w| extractor.frame_count(w.end - w.start))
                })
                .collect();
            choose_n(&counts)
        }
    };
    let featurize = |recs: &[UtteranceRecord]| -> Result<(Vec<TrainingExample>, usize)> {
        if recs.is_empty() {
            return Ok((Vec::new(), 0));
        }
        let prepared = prepare(recs, &extractor, Some(n))?;
        let truncated = prepared
            .utterances
            .iter()
            .flat_map(|u| &u.segments)
            .filter(|s| s.truncated_from().is_some())
            .count();
        Ok((
            build_examples(&prepared, cfg.m, &inventory, &embeddings, cfg.aux_mode)?,
            truncated,
        ))
    };
    let (train, t1) = featurize(&train_recs)?;
    let (dev, t2) = featurize(&dev_recs)?;
    let (test, t3) = featurize(&outcome.test)?;
    Ok(Dataset {
        inventory,
        n,
        embeddings,
        train,
        dev,
        test,
        train_utterances: train_recs.len(),
        dev_utterances: dev_recs.len(),
        test_utterances: outcome.test.len(),
        unlisted_speakers: outcome.unlisted_speakers,
        truncated_segments: t1 + t2 + t3,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrepareSummary {
    pub n: usize,
    pub vocab: usize,
    pub phones: Vec<String>,
    pub train_utterances: usize,
    pub dev_utterances: usize,
    pub test_utterances: usize,
    pub train_examples: usize,
    pub dev_examples: usize,
    pub test_examples: usize,
    pub truncated_segments: usize,
    pub unlisted_speakers: Vec<String>,
}

/// Validates the corpus end to end and writes `prepare_summary.json`.
pub fn run_prepare(cfg: &RunConfig) -> Result<PrepareSummary> {
    let data = load_dataset(cfg, None, None)?;
    let summary = PrepareSummary {
        n: data.n,
        vocab: data.inventory.size(),
        phones: data.inventory.phones().to_vec(),
        train_utterances: data.train_utterances,
        dev_utterances: data.dev_utterances,
        test_utterances: data.test_utterances,
        train_examples: data.train.len(),
        dev_examples: data.dev.len(),
        test_examples: data.test.len(),
        truncated_segments: data.truncated_segments,
        unlisted_speakers: data.unlisted_speakers,
    };
    create_dir(&cfg.output_dir)?;
    write(
        &cfg.output_dir.join("prepare_summary.json"),
        &serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(summary)
}

pub const CHECKPOINT_FILE: &str = "checkpoint.step";
pub const HISTORY_FILE: &str = "history.csv";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.json";

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub outcome: TrainOutcome,
    pub snapshot: Snapshot,
    pub checkpoint: PathBuf,
    pub history: PathBuf,
    pub resolved_config: PathBuf,
}

/// Corpus to checkpoint: writes the checkpoint, the history CSV and the
/// resolved configuration into `cfg.output_dir`.
pub fn run_train(cfg: &RunConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let data = load_dataset(cfg, None, None)?;
    log::info!(
        "{} train / {} dev / {} test examples, n = {}, V = {}",
        data.train.len(),
        data.dev.len(),
        data.test.len(),
        data.n,
        data.inventory.size()
    );
    let model_cfg = cfg.model_config(data.inventory.size(), data.n);
    let params = ModelParams::init(&model_cfg, cfg.seed)?;
    let outcome = train(params, &data.train, &data.dev, &cfg.train, cfg.seed)?;

    let mut resolved = cfg.resolved();
    resolved.n = Some(data.n);
    let snapshot = Snapshot {
        run: resolved,
        model: model_cfg,
        phones: data.inventory.phones().to_vec(),
    };
    create_dir(&cfg.output_dir)?;
    let checkpoint = cfg.output_dir.join(CHECKPOINT_FILE);
    let history = cfg.output_dir.join(HISTORY_FILE);
    let resolved_config = cfg.output_dir.join(RESOLVED_CONFIG_FILE);
    save_model(&checkpoint, &outcome.params, &snapshot)?;
    write(&history, &history_csv(&outcome.history, true))?;
    write(&resolved_config, &snapshot.run.to_json())?;
    Ok(TrainReport {
        outcome,
        snapshot,
        checkpoint,
        history,
        resolved_config,
    })
}

/// Dataset matching a trained model: same `n`, same inventory.
pub fn dataset_for(snapshot: &Snapshot, config: Option<&RunConfig>) -> Result<Dataset> {
    let cfg = config.unwrap_or(&snapshot.run);
    load_dataset(cfg, Some(snapshot.model.n), Some(snapshot.inventory()))
}

fn expected_model(config: Option<&RunConfig>, checkpoint: &Path) -> Result<Option<ModelConfig>> {
    let Some(cfg) = config else { return Ok(None) };
    let ckpt = Checkpoint::load(checkpoint)?;
    let snapshot: Snapshot = serde_json::from_str(&ckpt.config_json)
        .map_err(|e| Error::Checkpoint(format!("unreadable configuration blob: {e}")))?;
    Ok(Some(cfg.model_config(
        snapshot.phones.len() + 4,
        cfg.n.unwrap_or(snapshot.model.n),
    )))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccuracyReport {
    pub split: Split,
    pub token_acc: f64,
    pub seq_acc: f64,
    pub mean_loss: f64,
    pub tokens: usize,
    pub sequences: usize,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub accuracy: AccuracyReport,
    pub similarity: Vec<(String, SimilarityResult)>,
}

/// Benchmark files (`*.tsv`) in `dir`, sorted by name.
fn benchmark_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.exists() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "tsv"))
        .collect();
    files.sort();
    Ok(files)
}

/// Accuracy on one split plus Spearman ρ for each benchmark in `benchmarks`.
/// Writes `accuracy.json` and `similarity_report.csv` into `out_dir`.
pub fn run_eval(
    checkpoint: &Path,
    split: Split,
    benchmarks: Option<&Path>,
    out_dir: &Path,
    config: Option<&RunConfig>,
) -> Result<EvalReport> {
    let expected = expected_model(config, checkpoint)?;
    let (params, snapshot) = load_model(checkpoint, expected.as_ref())?;
    let data = dataset_for(&snapshot, config)?;
    let examples = data.split(split);
    if examples.is_empty() {
        log::warn!("split {split} has no examples");
    }
    let batch = snapshot.run.train.batch_size;
    let acc: Accuracy = phonetic_accuracy(&params, &examples, batch)?;
    let accuracy = AccuracyReport {
        split,
        token_acc: acc.token_acc,
        seq_acc: acc.seq_acc,
        mean_loss: acc.mean_loss,
        tokens: acc.tokens,
        sequences: acc.sequences,
    };
    let files = match benchmarks {
        Some(dir) => benchmark_files(dir)?,
        None => Vec::new(),
    };
    let mut similarity = Vec::new();
    if files.is_empty() {
        log::warn!("no similarity benchmarks given; reporting accuracy only");
    } else {
        let reps = word_representations(&params, &examples, batch)?;
        for f in files {
            let bench = SimilarityBenchmark::load_tsv(&f)?;
            match similarity_eval(&reps, &bench) {
                Ok(r) => similarity.push((bench.name.clone(), r)),
                Err(Error::Analysis(msg)) => log::warn!("{msg}"),
                Err(e) => return Err(e),
            }
        }
    }
    create_dir(out_dir)?;
    write(
        &out_dir.join("accuracy.json"),
        &serde_json::to_string_pretty(&accuracy)?,
    )?;
    write(
        &out_dir.join("similarity_report.csv"),
        &similarity_report_csv(&similarity),
    )?;
    Ok(EvalReport {
        accuracy,
        similarity,
    })
}

/// Averaged latent vectors of every word in `split`.
pub fn representations(checkpoint: &Path, split: Split) -> Result<Vec<WordRepresentation>> {
    let (params, snapshot) = load_model(checkpoint, None)?;
    let data = dataset_for(&snapshot, None)?;
    word_representations(&params, &data.split(split), snapshot.run.train.batch_size)
}

/// Writes averaged word vectors in the `.vec` text format.
pub fn run_embed(checkpoint: &Path, split: Split, out: &Path) -> Result<Vec<WordRepresentation>> {
    let reps = representations(checkpoint, split)?;
    let dim = reps.first().map_or(0, |r| r.vector.len());
    let mut table = EmbeddingTable::new(dim);
    for r in &reps {
        table.insert(&r.word, &r.vector)?;
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    table.save_vec_text(out)?;
    Ok(reps)
}

/// Reads `word_a word_b` lines (tab or space separated, `#` comments).
pub fn load_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 2 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("expected two words, found {}", f.len()),
            });
        }
        out.push((f[0].to_lowercase(), f[1].to_lowercase()));
    }
    Ok(out)
}

/// PCA of the difference vectors of `pairs`; writes `pca_points.csv` and,
/// with `svg`, `pca_plot.svg`.
pub fn run_analyze(
    reps: &[WordRepresentation],
    pairs: &[(String, String)],
    out_dir: &Path,
    svg: bool,
) -> Result<PcaResult> {
    let result = pca_diff_vectors(reps, pairs)?;
    create_dir(out_dir)?;
    write(&out_dir.join("pca_points.csv"), &pca_points_csv(&result))?;
    if svg {
        write(&out_dir.join("pca_plot.svg"), &pca_svg(&result))?;
    }
    Ok(result)
}

/// Word vectors read back from a `.vec` file.
pub fn representations_from_vec(path: &Path) -> Result<Vec<WordRepresentation>> {
    let table = load_vec_text(path)?;
    Ok(table
        .words()
        .iter()
        .map(|w| WordRepresentation {
            word: w.clone(),
            vector: table.get(w).expect("listed word").to_vec(),
            occurrence_count: 1,
        })
        .collect())
}
