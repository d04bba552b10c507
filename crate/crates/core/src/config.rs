//! Experiment configuration read from TOML, with command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::facts::CorpusParams;
use crate::model::ModelConfig;
use crate::residual::{OptimConfig, RegularizerConfig};
use crate::train::TrainConfig;
use crate::updater::{EditMode, EditSettings, PreservedSource};

/// Transformer shape; the vocabulary size and seed come from the corpus and
/// the experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelShape {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub edit_layers: Vec<usize>,
    pub mixing_start: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        let c = ModelConfig::desk(1, 0);
        Self {
            n_layers: c.n_layers,
            d_model: c.d_model,
            d_mlp: c.d_mlp,
            n_heads: c.n_heads,
            max_seq_len: c.max_seq_len,
            edit_layers: c.edit_layers,
            mixing_start: c.mixing_start,
        }
    }
}

impl ModelShape {
    pub fn model_config(&self, vocab_size: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            d_mlp: self.d_mlp,
            n_heads: self.n_heads,
            vocab_size,
            max_seq_len: self.max_seq_len,
            edit_layers: self.edit_layers.clone(),
            mixing_start: self.mixing_start,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub max_steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub eval_every: usize,
    pub recall_target: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            max_steps: t.max_steps,
            lr: t.lr,
            batch_size: t.batch_size,
            eval_every: t.eval_every,
            recall_target: t.recall_target,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSection {
    pub steps: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub restarts: usize,
}

impl Default for OptimSection {
    fn default() -> Self {
        let o = OptimConfig::default();
        Self {
            steps: o.steps,
            lr: o.lr,
            clip_norm: o.clip_norm,
            restarts: o.restarts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditSection {
    pub modes: Vec<EditMode>,
    pub tau_energy: f64,
    pub lambda_penalty: f64,
    pub lambda_kl: f64,
    pub lambda_wd: f64,
    pub nullspace_threshold: f64,
    pub l2: f64,
    pub batches: usize,
    pub batch_size: usize,
    pub preserved_source: PreservedSource,
    pub optim: OptimSection,
}

impl Default for EditSection {
    fn default() -> Self {
        Self {
            modes: vec![EditMode::Suit, EditMode::AlphaEdit, EditMode::Memit],
            tau_energy: 0.4,
            lambda_penalty: 0.3,
            lambda_kl: 0.0625,
            lambda_wd: 0.5,
            nullspace_threshold: 2e-2,
            l2: 10.0,
            batches: 2,
            batch_size: 10,
            preserved_source: PreservedSource::SubjectKeys,
            optim: OptimSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    TauEnergy,
    LambdaPenalty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
    pub mode: EditMode,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            parameter: SweepParameter::TauEnergy,
            values: (0..10).map(|i| i as f64 / 10.0).collect(),
            mode: EditMode::Suit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    pub grid_size: usize,
    /// Held-out facts whose prompts are used for perturbation and drift.
    pub n_heldout: usize,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            grid_size: 11,
            n_heldout: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Bundle directory name; `seed-<seed>` when absent.
    pub run_id: Option<String>,
    pub out_dir: PathBuf,
    pub corpus: CorpusParams,
    pub model: ModelShape,
    pub train: TrainSection,
    pub edit: EditSection,
    pub analysis: AnalysisSection,
    pub sweep: SweepSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            run_id: None,
            out_dir: PathBuf::from("out"),
            corpus: CorpusParams::default(),
            model: ModelShape::default(),
            train: TrainSection::default(),
            edit: EditSection::default(),
            analysis: AnalysisSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

/// Values given on the command line; each one replaces the file value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<EditMode>,
    pub tau_energy: Option<f64>,
    pub lambda_penalty: Option<f64>,
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(m) = o.mode {
            self.edit.modes = vec![m];
        }
        if let Some(t) = o.tau_energy {
            self.edit.tau_energy = t;
        }
        if let Some(l) = o.lambda_penalty {
            self.edit.lambda_penalty = l;
        }
        if let Some(d) = &o.out_dir {
            self.out_dir = d.clone();
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let e = &self.edit;
        if !(0.0..1.0).contains(&e.tau_energy) {
            return bad(format!("tau_energy must lie in [0, 1), got {}", e.tau_energy));
        }
        for (name, v) in [
            ("lambda_penalty", e.lambda_penalty),
            ("lambda_kl", e.lambda_kl),
            ("lambda_wd", e.lambda_wd),
            ("nullspace_threshold", e.nullspace_threshold),
            ("l2", e.l2),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        if e.modes.is_empty() {
            return bad("at least one edit mode is required".into());
        }
        if e.batches == 0 || e.batch_size == 0 {
            return bad("batches and batch_size must be positive".into());
        }
        if self.analysis.grid_size < 2 {
            return bad("analysis.grid_size must be at least 2".into());
        }
        for &v in &self.sweep.values {
            let ok = match self.sweep.parameter {
                SweepParameter::TauEnergy => (0.0..1.0).contains(&v),
                SweepParameter::LambdaPenalty => v >= 0.0 && v.is_finite(),
            };
            if !ok {
                return bad(format!("sweep value {v} outside the parameter's domain"));
            }
        }
        if let Some(id) = &self.run_id {
            if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
                return bad(format!("run_id `{id}` is not a plain directory name"));
            }
        }
        self.model.model_config(1, self.seed).validate()
    }

    pub fn run_id(&self) -> String {
        self.run_id.clone().unwrap_or_else(|| format!("seed-{}", self.seed))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(self.run_id())
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            max_steps: t.max_steps,
            lr: t.lr,
            batch_size: t.batch_size,
            eval_every: t.eval_every,
            recall_target: t.recall_target,
            seed: self.seed,
        }
    }

    pub fn edit_settings(&self, kl_template: Vec<crate::facts::TokenId>, prefixes: Vec<Vec<crate::facts::TokenId>>) -> EditSettings {
        let e = &self.edit;
        EditSettings {
            regularizer: RegularizerConfig {
                lambda_kl: e.lambda_kl,
                lambda_wd: e.lambda_wd,
                kl_prompt_template: kl_template,
            },
            lambda_penalty: e.lambda_penalty,
            optim: OptimConfig {
                steps: e.optim.steps,
                lr: e.optim.lr,
                clip_norm: e.optim.clip_norm,
                restarts: e.optim.restarts,
                seed: self.seed,
            },
            l2: e.l2,
            prefixes,
        }
    }
}
