//! Hyperparameter sweeps over `τ_energy` or `λ` from one frozen checkpoint.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, SweepParameter};
use crate::error::Result;
use crate::eval::{EvalReport, MetricCriterion};
use crate::facts::FactCorpus;
use crate::model::ModelState;
use crate::pipeline;
use crate::updater::EditMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
    /// Value of the parameter that is not swept.
    pub fixed_other: f64,
    pub mode: EditMode,
    pub batches: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl SweepSpec {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        let fixed_other = match cfg.sweep.parameter {
            SweepParameter::TauEnergy => cfg.edit.lambda_penalty,
            SweepParameter::LambdaPenalty => cfg.edit.tau_energy,
        };
        Self {
            parameter: cfg.sweep.parameter,
            values: cfg.sweep.values.clone(),
            fixed_other,
            mode: cfg.sweep.mode,
            batches: cfg.edit.batches,
            batch_size: cfg.edit.batch_size,
            seed: cfg.seed,
        }
    }

    /// The experiment configuration of one grid point.
    pub fn point_config(&self, base: &ExperimentConfig, value: f64) -> ExperimentConfig {
        let mut cfg = base.clone();
        cfg.seed = self.seed;
        cfg.edit.batches = self.batches;
        cfg.edit.batch_size = self.batch_size;
        cfg.edit.modes = vec![self.mode];
        match self.parameter {
            SweepParameter::TauEnergy => {
                cfg.edit.tau_energy = value;
                cfg.edit.lambda_penalty = self.fixed_other;
            }
            SweepParameter::LambdaPenalty => {
                cfg.edit.lambda_penalty = value;
                cfg.edit.tau_energy = self.fixed_other;
            }
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub reports: Vec<EvalReport>,
    pub rewrite_leakage: Option<f64>,
    /// Set when this point failed; the sweep carries on.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepBundle {
    pub schema_version: u32,
    pub spec: SweepSpec,
    pub points: Vec<SweepPoint>,
}

fn run_point(
    spec: &SweepSpec,
    base_cfg: &ExperimentConfig,
    corpus: &FactCorpus,
    model: &ModelState,
    value: f64,
) -> Result<SweepPoint> {
    let cfg = spec.point_config(base_cfg, value);
    cfg.validate()?;
    let edits = pipeline::select_edits(model, corpus, cfg.edit.batches * cfg.edit.batch_size)?;
    let stats = pipeline::layer_statistics(model, corpus, &edits, &cfg)?;
    let (_, bundle) = pipeline::edit_and_evaluate(model, corpus, &cfg, spec.mode, &edits, &stats)?;
    Ok(SweepPoint {
        value,
        reports: bundle.reports,
        rewrite_leakage: bundle.rewrite_leakage,
        error: None,
    })
}

/// One edit session and evaluation per grid value, each from a fresh copy
/// of `model`. Failed points are returned with `error` set.
pub fn run_sweep(
    spec: &SweepSpec,
    base_cfg: &ExperimentConfig,
    corpus: &FactCorpus,
    model: &ModelState,
) -> Vec<SweepPoint> {
    spec.values
        .par_iter()
        .map(|&value| {
            run_point(spec, base_cfg, corpus, model, value).unwrap_or_else(|e| SweepPoint {
                value,
                reports: Vec::new(),
                rewrite_leakage: None,
                error: Some(format!("{}: {e}", e.kind())),
            })
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct SweepRow<'a> {
    parameter: SweepParameter,
    value: f64,
    criterion: &'a str,
    metric: &'a str,
    score: Option<f64>,
    error: Option<&'a str>,
}

fn criterion_name(c: MetricCriterion) -> &'static str {
    match c {
        MetricCriterion::ProbabilityBased => "probability_based",
        MetricCriterion::GenerationBased => "generation_based",
        MetricCriterion::TokenLevel => "token_level",
    }
}

/// One row per (value, criterion, metric); failed points get one row with
/// the error message.
pub fn sweep_to_csv(parameter: SweepParameter, points: &[SweepPoint]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in points {
        if let Some(err) = &p.error {
            w.serialize(SweepRow {
                parameter,
                value: p.value,
                criterion: "",
                metric: "",
                score: None,
                error: Some(err),
            })?;
            continue;
        }
        for r in &p.reports {
            for (metric, score) in [
                ("efficacy", r.efficacy),
                ("generalization", r.generalization),
                ("specificity", r.specificity),
                ("s_harmonic", r.s_harmonic),
                ("fluency", r.fluency),
                ("consistency", r.consistency),
            ] {
                w.serialize(SweepRow {
                    parameter,
                    value: p.value,
                    criterion: criterion_name(r.criterion),
                    metric,
                    score: Some(score),
                    error: None,
                })?;
            }
        }
        if let Some(l) = p.rewrite_leakage {
            w.serialize(SweepRow {
                parameter,
                value: p.value,
                criterion: "",
                metric: "rewrite_leakage",
                score: Some(l),
                error: None,
            })?;
        }
    }
    let bytes = w
        .into_inner()
        .map_err(|e| crate::Error::InvalidInput(format!("csv flush: {e}")))?;
    String::from_utf8(bytes).map_err(|e| crate::Error::InvalidInput(format!("csv encoding: {e}")))
}
