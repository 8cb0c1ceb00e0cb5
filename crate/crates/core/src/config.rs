//! Run configuration: one JSON file drives every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::AuxMode;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::signal::MfccConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus_root: PathBuf,
    /// Speaker split file; `<corpus_root>/split.tsv` when absent.
    pub split_file: Option<PathBuf>,
    pub embedding_path: PathBuf,
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Text-vector size; must equal `mfcc.d_mfcc`.
    pub d_w: usize,
    pub d_e: usize,
    /// Encoder size; defaults to `d_e`.
    pub d: Option<usize>,
    /// Bi-LSTM hidden size; defaults to `d_w`.
    pub hidden: Option<usize>,
    /// Frames per segment; derived from the training data when absent.
    pub n: Option<usize>,
    pub m: usize,
    pub aux_mode: AuxMode,
    pub normalize_attention: bool,
    /// Share of training speakers held out for early stopping.
    pub dev_fraction: f64,
    pub mfcc: MfccConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus_root: PathBuf::from("corpus"),
            split_file: None,
            embedding_path: PathBuf::from("corpus/embeddings.vec"),
            output_dir: PathBuf::from("run"),
            seed: 0,
            d_w: 50,
            d_e: 50,
            d: None,
            hidden: None,
            n: None,
            m: 3,
            aux_mode: AuxMode::DG,
            normalize_attention: false,
            dev_fraction: 0.1,
            mfcc: MfccConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses JSON and validates; relative paths are taken relative to `base`.
    pub fn from_json(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))?;
        cfg.rebase(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_json(&text, base)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.corpus_root);
        fix(&mut self.embedding_path);
        fix(&mut self.output_dir);
        if let Some(p) = &mut self.split_file {
            fix(p);
        }
    }

    /// Every validation failure, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.d_w != self.mfcc.d_mfcc {
            out.push(format!(
                "d_w ({}) must equal mfcc.d_mfcc ({})",
                self.d_w, self.mfcc.d_mfcc
            ));
        }
        for (name, v) in [("d_w", self.d_w), ("d_e", self.d_e), ("m", self.m)] {
            if v == 0 {
                out.push(format!("{name} must be positive"));
            }
        }
        for (name, v) in [("d", self.d), ("hidden", self.hidden), ("n", self.n)] {
            if v == Some(0) {
                out.push(format!("{name} must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.dev_fraction) {
            out.push(format!(
                "dev_fraction must lie in [0, 1), got {}",
                self.dev_fraction
            ));
        }
        out.extend(self.mfcc.problems());
        out.extend(self.train.problems());
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn split_path(&self) -> PathBuf {
        self.split_file
            .clone()
            .unwrap_or_else(|| self.corpus_root.join("split.tsv"))
    }

    /// A copy with every defaulted size filled in.
    pub fn resolved(&self) -> RunConfig {
        let mut c = self.clone();
        c.d = Some(self.d.unwrap_or(self.d_e));
        c.hidden = Some(self.hidden.unwrap_or(self.d_w));
        c.split_file = Some(self.split_path());
        c.mfcc.n_mels = Some(self.mfcc.resolved_n_mels());
        c
    }

    pub fn model_config(&self, vocab: usize, n: usize) -> ModelConfig {
        ModelConfig {
            d_mfcc: self.mfcc.d_mfcc,
            d_w: self.d_w,
            hidden: self.hidden.unwrap_or(self.d_w),
            d: self.d.unwrap_or(self.d_e),
            d_e: self.d_e,
            vocab,
            d_a: self.aux_mode.dim(),
            n,
            m: self.m,
            normalize_attention: self.normalize_attention,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
