//! End-to-end experiment stages and the on-disk report bundle.
//!
//! Bundle layout under `<out_dir>/<run_id>/`:
//! `corpus/`, `model/`, `edits/<mode>/`, `reports/`, `analysis/`, `sweep/`
//! and `manifest.json`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{self, DecompositionRow, LayerDrift, LeakageRow, VarianceRow};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport, MetricCriterion};
use crate::facts::{self, FactCorpus, Prompt};
use crate::keyspace;
use crate::model::{argmax, ModelState};
use crate::residual::{self, OptimConfig, ResidualKind, SwapDirections};
use crate::train::{self, TrainReport};
use crate::updater::{self, EditMode, EditSession, LayerStatistics};

pub const BUNDLE_SCHEMA_VERSION: u32 = 1;

/// Paths of every artifact in a run bundle.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Self { root: cfg.run_dir() }
    }

    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus").join("corpus.jsonl")
    }

    pub fn model(&self) -> PathBuf {
        self.root.join("model").join("model.json")
    }

    pub fn train_report(&self) -> PathBuf {
        self.root.join("model").join("train_report.json")
    }

    pub fn edit_dir(&self, mode: EditMode) -> PathBuf {
        self.root.join("edits").join(mode.label())
    }

    pub fn edited_model(&self, mode: EditMode) -> PathBuf {
        self.edit_dir(mode).join("model.json")
    }

    pub fn session_log(&self, mode: EditMode) -> PathBuf {
        self.edit_dir(mode).join("session.json")
    }

    pub fn report_json(&self, mode: EditMode) -> PathBuf {
        self.root.join("reports").join(format!("{}.json", mode.label()))
    }

    pub fn report_csv(&self, mode: EditMode) -> PathBuf {
        self.root.join("reports").join(format!("{}.csv", mode.label()))
    }

    pub fn analysis_dir(&self) -> PathBuf {
        self.root.join("analysis")
    }

    pub fn sweep_dir(&self) -> PathBuf {
        self.root.join("sweep")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
}

fn require(path: &Path, producer: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            producer: producer.to_string(),
        })
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Eligible facts (pre-edit argmax is the true object), at most one per
/// `(relation, object)` group, in corpus order.
pub fn select_edits(model: &ModelState, corpus: &FactCorpus, n: usize) -> Result<Vec<usize>> {
    let mut groups = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    for i in eval::eligible_facts(model, corpus)? {
        let t = &corpus.facts[i].triplet;
        if groups.insert((t.relation, t.object)) {
            out.push(i);
            if out.len() == n {
                return Ok(out);
            }
        }
    }
    Err(Error::InsufficientData(format!(
        "only {} editable facts from distinct groups, {n} requested",
        out.len()
    )))
}

/// Preserved-knowledge statistics and subspace basis for every edit layer.
pub fn layer_statistics(
    model: &ModelState,
    corpus: &FactCorpus,
    edited: &[usize],
    cfg: &ExperimentConfig,
) -> Result<BTreeMap<usize, LayerStatistics>> {
    let mut stats = BTreeMap::new();
    for &layer in &model.config.edit_layers {
        let preserved = updater::build_preserved(
            model,
            corpus,
            edited,
            layer,
            cfg.edit.nullspace_threshold,
            cfg.edit.preserved_source,
        )?;
        let k = keyspace::build_subject_matrix(model, &corpus.subject_pool, &corpus.prefix_pool, layer)?;
        let basis = keyspace::identify_agnostic_subspace(&k, cfg.edit.tau_energy, layer)?;
        stats.insert(
            layer,
            LayerStatistics {
                preserved,
                basis: Some(basis),
            },
        );
    }
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualLog {
    pub fact: usize,
    pub kind: ResidualKind,
    pub delta_norm: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub directions: Option<SwapDirections>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerLog {
    pub layer: usize,
    pub delta_frobenius: f64,
    pub key_rank_dims: usize,
    pub null_rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchLog {
    pub index: usize,
    pub facts: Vec<usize>,
    pub residuals: Vec<ResidualLog>,
    pub layers: Vec<LayerLog>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionLog {
    pub schema_version: u32,
    pub mode: EditMode,
    pub edited_facts: Vec<usize>,
    pub subspace_ranks: BTreeMap<usize, usize>,
    pub batches: Vec<BatchLog>,
    pub leakage: Vec<LeakageRow>,
    pub config: ExperimentConfig,
}

impl SessionLog {
    /// Mean leakage on rewrite keys at the first edit layer.
    pub fn rewrite_leakage(&self) -> Option<f64> {
        let first = self.leakage.iter().map(|r| r.layer).min()?;
        self.leakage
            .iter()
            .find(|r| r.layer == first && r.prompt_type == "rewrite")
            .map(|r| r.mean_leakage)
    }
}

#[derive(Debug, Clone)]
pub struct SessionOutcome {
    pub model: ModelState,
    pub log: SessionLog,
}

/// Leakage of the accumulated update `W_edited − W_base` on keys read from
/// the base model, for the edited subjects and their neighbors.
pub fn leakage_rows(
    base: &ModelState,
    edited: &ModelState,
    corpus: &FactCorpus,
    facts: &[usize],
    stats: &BTreeMap<usize, LayerStatistics>,
    mode: EditMode,
) -> Result<Vec<LeakageRow>> {
    let mut rows = Vec::new();
    for (&layer, st) in stats {
        let basis = st
            .basis
            .as_ref()
            .ok_or_else(|| Error::InvalidInput(format!("no basis at layer {layer}")))?;
        let delta = edited.down_proj_matrix(layer) - base.down_proj_matrix(layer);
        let mut keys = Vec::new();
        for &i in facts {
            let f = &corpus.facts[i];
            let k = keyspace::extract_key(base, &f.triplet.subject, &corpus.prefix_pool, layer)?;
            keys.push(("rewrite".to_string(), k));
            for p in &f.prompts.neighborhood {
                let k = keyspace::extract_key(base, p.subject(), &corpus.prefix_pool, layer)?;
                keys.push(("neighborhood".to_string(), k));
            }
        }
        rows.extend(analysis::leakage_table(mode.label(), &delta, &keys, basis)?);
    }
    Ok(rows)
}

/// Applies `edits` to a copy of `base` in consecutive batches.
pub fn run_session(
    base: &ModelState,
    corpus: &FactCorpus,
    cfg: &ExperimentConfig,
    mode: EditMode,
    edits: &[usize],
    stats: &BTreeMap<usize, LayerStatistics>,
) -> Result<SessionOutcome> {
    let settings = cfg.edit_settings(corpus.kl_template.clone(), corpus.prefix_pool.clone());
    let mut model = base.clone();
    let mut session = EditSession::new(mode, &base.config.edit_layers, base.config.d_mlp);
    let mut batches = Vec::new();
    for (index, chunk) in edits.chunks(cfg.edit.batch_size).enumerate() {
        let triplets: Vec<_> = chunk.iter().map(|&i| corpus.facts[i].triplet.clone()).collect();
        let batch = updater::apply_batch(&mut model, &triplets, &mut session, stats, &settings)?;
        let residuals = chunk
            .iter()
            .zip(&batch.edits)
            .map(|(&fact, e)| {
                let trace = &e.residual.optimizer_trace;
                ResidualLog {
                    fact,
                    kind: e.residual.kind,
                    delta_norm: crate::linalg::norm(&e.residual.delta),
                    initial_loss: trace.first().map_or(f64::NAN, |t| t.1),
                    final_loss: trace.last().map_or(f64::NAN, |t| t.1),
                    directions: e.directions.clone(),
                }
            })
            .collect();
        let layers = batch
            .layers
            .iter()
            .map(|r| LayerLog {
                layer: r.layer,
                delta_frobenius: r.delta.norm(),
                key_rank_dims: r.keys.nrows(),
                null_rank: stats[&r.layer].preserved.null_rank(),
            })
            .collect();
        batches.push(BatchLog {
            index,
            facts: chunk.to_vec(),
            residuals,
            layers,
        });
    }
    let leakage = leakage_rows(base, &model, corpus, edits, stats, mode)?;
    let subspace_ranks = stats
        .iter()
        .map(|(&l, s)| (l, s.basis.as_ref().map_or(0, |b| b.rank())))
        .collect();
    Ok(SessionOutcome {
        model,
        log: SessionLog {
            schema_version: BUNDLE_SCHEMA_VERSION,
            mode,
            edited_facts: edits.to_vec(),
            subspace_ranks,
            batches,
            leakage,
            config: cfg.clone(),
        },
    })
}

/// Evaluation results for one mode together with the configuration that
/// produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub schema_version: u32,
    pub mode: EditMode,
    pub edited_facts: Vec<usize>,
    pub rewrite_leakage: Option<f64>,
    pub reports: Vec<EvalReport>,
    pub config: ExperimentConfig,
}

impl ReportBundle {
    pub fn report(&self, criterion: MetricCriterion) -> Option<&EvalReport> {
        self.reports.iter().find(|r| r.criterion == criterion)
    }
}

/// Edits `base` in `mode` and evaluates the result; the in-memory form of
/// `edit` followed by `eval`.
pub fn edit_and_evaluate(
    base: &ModelState,
    corpus: &FactCorpus,
    cfg: &ExperimentConfig,
    mode: EditMode,
    edits: &[usize],
    stats: &BTreeMap<usize, LayerStatistics>,
) -> Result<(SessionOutcome, ReportBundle)> {
    let outcome = run_session(base, corpus, cfg, mode, edits, stats)?;
    let reports = eval::evaluate(&outcome.model, base, corpus, edits, mode.label())?;
    let bundle = ReportBundle {
        schema_version: BUNDLE_SCHEMA_VERSION,
        mode,
        edited_facts: edits.to_vec(),
        rewrite_leakage: outcome.log.rewrite_leakage(),
        reports,
        config: cfg.clone(),
    };
    Ok((outcome, bundle))
}

fn load_corpus(paths: &RunPaths) -> Result<FactCorpus> {
    require(&paths.corpus(), "subedit gen-corpus")?;
    facts::load_corpus(&paths.corpus())
}

fn load_model(paths: &RunPaths) -> Result<ModelState> {
    require(&paths.model(), "subedit train")?;
    ModelState::load(&paths.model())
}

fn load_edited(paths: &RunPaths, mode: EditMode) -> Result<(ModelState, SessionLog)> {
    let producer = format!("subedit edit --mode {}", mode.label());
    require(&paths.edited_model(mode), &producer)?;
    require(&paths.session_log(mode), &producer)?;
    Ok((
        ModelState::load(&paths.edited_model(mode))?,
        read_json(&paths.session_log(mode))?,
    ))
}

pub fn cmd_gen_corpus(cfg: &ExperimentConfig) -> Result<()> {
    let paths = RunPaths::new(cfg);
    let corpus = facts::generate_corpus(cfg.seed, cfg.corpus)?;
    write_text(&paths.corpus(), &facts::corpus_to_string(&corpus)?)?;
    write_manifest(&paths)
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<()> {
    let paths = RunPaths::new(cfg);
    let corpus = load_corpus(&paths)?;
    let mc = cfg.model.model_config(corpus.vocabulary.len(), cfg.seed);
    let (model, report) = train::train(mc, &corpus, &cfg.train_config())?;
    write_text(&paths.model(), &model.to_json()?)?;
    write_json(&paths.train_report(), &report)?;
    write_manifest(&paths)
}

pub fn cmd_edit(cfg: &ExperimentConfig) -> Result<()> {
    let paths = RunPaths::new(cfg);
    let corpus = load_corpus(&paths)?;
    let base = load_model(&paths)?;
    let edits = select_edits(&base, &corpus, cfg.edit.batches * cfg.edit.batch_size)?;
    let stats = layer_statistics(&base, &corpus, &edits, cfg)?;
    let outcomes: Vec<Result<SessionOutcome>> = cfg
        .edit
        .modes
        .par_iter()
        .map(|&mode| run_session(&base, &corpus, cfg, mode, &edits, &stats))
        .collect();
    for (mode, outcome) in cfg.edit.modes.iter().zip(outcomes) {
        let outcome = outcome?;
        write_text(&paths.edited_model(*mode), &outcome.model.to_json()?)?;
        write_json(&paths.session_log(*mode), &outcome.log)?;
    }
    write_manifest(&paths)
}

pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<()> {
    let paths = RunPaths::new(cfg);
    let corpus = load_corpus(&paths)?;
    let base = load_model(&paths)?;
    for &mode in &cfg.edit.modes {
        let (edited, log) = load_edited(&paths, mode)?;
        let reports = eval::evaluate(&edited, &base, &corpus, &log.edited_facts, mode.label())?;
        let bundle = ReportBundle {
            schema_version: BUNDLE_SCHEMA_VERSION,
            mode,
            edited_facts: log.edited_facts.clone(),
            rewrite_leakage: log.rewrite_leakage(),
            reports,
            config: cfg.clone(),
        };
        write_json(&paths.report_json(mode), &bundle)?;
        write_text(&paths.report_csv(mode), &eval::reports_to_csv(&bundle.reports)?)?;
    }
    write_manifest(&paths)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSummary {
    pub mode: EditMode,
    pub prompt_set: String,
    pub n_prompts: usize,
    pub mean_norm: f64,
    pub mean_subject_last_norm: f64,
    /// Share of prompts whose largest perturbation sits on the subject's
    /// last token.
    pub subject_last_peak: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeDrift {
    pub mode: EditMode,
    pub drift: Vec<LayerDrift>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub fact: usize,
    pub curve: analysis::SweepCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionRecord {
    pub fact: usize,
    /// The full baseline δ makes `o*` the argmax when patched in.
    pub converged: bool,
    pub row: DecompositionRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisBundle {
    pub schema_version: u32,
    pub variance: Vec<VarianceRow>,
    pub leakage: Vec<LeakageRow>,
    pub perturbation: Vec<PerturbationSummary>,
    pub drift: Vec<ModeDrift>,
    pub decomposition: Vec<DecompositionRecord>,
    pub decomposition_summary: Option<analysis::DecompositionSummary>,
    pub curves: Vec<CurveRecord>,
    pub config: ExperimentConfig,
}

/// Facts never edited and not used as neighbors of an edited fact.
pub fn heldout_facts(corpus: &FactCorpus, edited: &[usize], n: usize) -> Vec<usize> {
    let mut touched: BTreeSet<&[facts::TokenId]> = BTreeSet::new();
    for &i in edited {
        touched.insert(&corpus.facts[i].triplet.subject);
        for p in &corpus.facts[i].prompts.neighborhood {
            touched.insert(p.subject());
        }
    }
    (0..corpus.facts.len())
        .filter(|&i| !touched.contains(corpus.facts[i].triplet.subject.as_slice()))
        .take(n)
        .collect()
}

fn summarize_perturbation(
    mode: EditMode,
    prompt_set: &str,
    records: &[analysis::PerturbationRecord],
) -> PerturbationSummary {
    let n = records.len().max(1) as f64;
    let at_last = |r: &analysis::PerturbationRecord| {
        r.subject_last
            .iter()
            .position(|&b| b)
            .map_or(0.0, |t| r.norms[t])
    };
    let peak = records
        .iter()
        .filter(|r| r.subject_last.get(r.argmax()).copied().unwrap_or(false))
        .count();
    PerturbationSummary {
        mode,
        prompt_set: prompt_set.to_string(),
        n_prompts: records.len(),
        mean_norm: records.iter().map(|r| r.mean()).sum::<f64>() / n,
        mean_subject_last_norm: records.iter().map(at_last).sum::<f64>() / n,
        subject_last_peak: peak as f64 / n,
    }
}

/// Baseline δ against fitted swap directions, plus the component sweep, for
/// every edit, all measured on the base model.
pub fn decomposition_and_curves(
    base: &ModelState,
    corpus: &FactCorpus,
    cfg: &ExperimentConfig,
    edits: &[usize],
) -> Result<(Vec<DecompositionRecord>, Vec<CurveRecord>)> {
    let settings = cfg.edit_settings(corpus.kl_template.clone(), corpus.prefix_pool.clone());
    let layer = base.config.last_edit_layer();
    let results: Vec<Result<(DecompositionRecord, CurveRecord)>> = edits
        .par_iter()
        .enumerate()
        .map(|(j, &fact)| {
            let t = &corpus.facts[fact].triplet;
            let opt = OptimConfig {
                seed: settings.optim.seed.wrapping_add(j as u64),
                ..settings.optim.clone()
            };
            let delta = residual::optimize_delta_baseline(base, t, &settings.regularizer, layer, &opt)?;
            let (dirs, _) = residual::fit_swap_directions(base, t, settings.lambda_penalty, layer, &opt)?;
            let row = analysis::decompose_edit(base, t, &delta.delta, &dirs)?;
            let prompt = residual::rewrite_prompt(t);
            let patched = base.forward_with_stream_patch(
                &prompt.tokens,
                layer,
                prompt.subject_last(),
                &delta.delta,
            )?;
            let converged = Some(argmax(&patched) as facts::TokenId) == t.new_object;
            let curve = analysis::sweep_components(base, t, &dirs, cfg.analysis.grid_size)?;
            Ok((
                DecompositionRecord {
                    fact,
                    converged,
                    row,
                },
                CurveRecord { fact, curve },
            ))
        })
        .collect();
    let mut rows = Vec::new();
    let mut curves = Vec::new();
    for r in results {
        let (a, b) = r?;
        rows.push(a);
        curves.push(b);
    }
    Ok((rows, curves))
}

pub fn cmd_analyze(cfg: &ExperimentConfig) -> Result<()> {
    let paths = RunPaths::new(cfg);
    let corpus = load_corpus(&paths)?;
    let base = load_model(&paths)?;
    let mut edited_models = Vec::new();
    for &mode in &cfg.edit.modes {
        edited_models.push((mode, load_edited(&paths, mode)?));
    }
    let edits = edited_models[0].1 .1.edited_facts.clone();

    let mut variance = Vec::new();
    for &layer in &base.config.edit_layers {
        let k = keyspace::build_subject_matrix(&base, &corpus.subject_pool, &corpus.prefix_pool, layer)?;
        let basis = keyspace::identify_agnostic_subspace(&k, cfg.edit.tau_energy, layer)?;
        let keys: Vec<_> = corpus
            .subject_pool
            .iter()
            .enumerate()
            .map(|(j, s)| keyspace::KeyVector {
                layer,
                values: k.column(j).into_owned(),
                subject: s.clone(),
            })
            .collect();
        variance.push(analysis::variance_table(&keys, &basis)?);
    }

    let heldout = heldout_facts(&corpus, &edits, cfg.analysis.n_heldout);
    let heldout_prompts: Vec<Prompt> = heldout
        .iter()
        .map(|&i| corpus.facts[i].prompts.rewrite.clone())
        .collect();
    let edited_prompts: Vec<Prompt> = edits
        .iter()
        .map(|&i| corpus.facts[i].prompts.rewrite.clone())
        .collect();
    let mut leakage = Vec::new();
    let mut perturbation = Vec::new();
    let mut drift = Vec::new();
    for (mode, (model, log)) in &edited_models {
        leakage.extend(log.leakage.iter().cloned());
        for (name, prompts) in [("heldout", &heldout_prompts), ("edited", &edited_prompts)] {
            if prompts.is_empty() {
                continue;
            }
            let recs = analysis::perturbation_profile(&base, model, prompts)?;
            perturbation.push(summarize_perturbation(*mode, name, &recs));
        }
        if !heldout_prompts.is_empty() {
            drift.push(ModeDrift {
                mode: *mode,
                drift: analysis::mlp_output_drift(&base, model, &heldout_prompts)?,
            });
        }
    }

    let (decomposition, curves) = decomposition_and_curves(&base, &corpus, cfg, &edits)?;
    let converged: Vec<DecompositionRow> = decomposition
        .iter()
        .filter(|r| r.converged)
        .map(|r| r.row.clone())
        .collect();
    let decomposition_summary = analysis::delta_decomposition_table(&converged).ok();

    let dir = paths.analysis_dir();
    write_text(&dir.join("variance.csv"), &analysis::rows_to_csv(&variance)?)?;
    write_text(&dir.join("leakage.csv"), &analysis::rows_to_csv(&leakage)?)?;
    write_text(&dir.join("perturbation.csv"), &analysis::rows_to_csv(&perturbation)?)?;
    let drift_rows: Vec<_> = drift
        .iter()
        .flat_map(|d| {
            d.drift.iter().map(move |x| DriftRow {
                mode: d.mode,
                layer: x.layer,
                mean_norm: x.mean_norm,
            })
        })
        .collect();
    write_text(&dir.join("drift.csv"), &analysis::rows_to_csv(&drift_rows)?)?;
    let decomp_rows: Vec<_> = decomposition
        .iter()
        .map(|r| DecompositionCsvRow {
            fact: r.fact,
            converged: r.converged,
            parallel_ratio: r.row.parallel_ratio,
            p_full: r.row.p_full,
            p_parallel: r.row.p_parallel,
            p_perp: r.row.p_perp,
        })
        .collect();
    write_text(&dir.join("decomposition.csv"), &analysis::rows_to_csv(&decomp_rows)?)?;
    let mut dat = String::new();
    for c in &curves {
        dat.push_str(&format!("# fact {}\n", c.fact));
        dat.push_str(&analysis::sweep_to_columns(&c.curve));
        dat.push_str("\n\n");
    }
    write_text(&dir.join("sweep_curves.dat"), &dat)?;
    let bundle = AnalysisBundle {
        schema_version: BUNDLE_SCHEMA_VERSION,
        variance,
        leakage,
        perturbation,
        drift,
        decomposition,
        decomposition_summary,
        curves,
        config: cfg.clone(),
    };
    write_json(&dir.join("analysis.json"), &bundle)?;
    write_manifest(&paths)
}

#[derive(Debug, Clone, Serialize)]
struct DriftRow {
    mode: EditMode,
    layer: usize,
    mean_norm: f64,
}

#[derive(Debug, Clone, Serialize)]
struct DecompositionCsvRow {
    fact: usize,
    converged: bool,
    parallel_ratio: f64,
    p_full: f64,
    p_parallel: f64,
    p_perp: f64,
}

pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<()> {
    let paths = RunPaths::new(cfg);
    let corpus = load_corpus(&paths)?;
    let base = load_model(&paths)?;
    let spec = crate::sweep::SweepSpec::from_config(cfg);
    let points = crate::sweep::run_sweep(&spec, cfg, &corpus, &base);
    write_text(&paths.sweep_dir().join("sweep.csv"), &crate::sweep::sweep_to_csv(spec.parameter, &points)?)?;
    write_json(&paths.sweep_dir().join("sweep.json"), &crate::sweep::SweepBundle {
        schema_version: BUNDLE_SCHEMA_VERSION,
        spec,
        points,
    })?;
    write_manifest(&paths)
}

pub fn cmd_all(cfg: &ExperimentConfig) -> Result<()> {
    cmd_gen_corpus(cfg)?;
    cmd_train(cfg)?;
    cmd_edit(cfg)?;
    cmd_eval(cfg)?;
    cmd_analyze(cfg)?;
    cmd_sweep(cfg)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub artifacts: Vec<ManifestEntry>,
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// Every file in the bundle except the manifest itself, with its hash.
pub fn build_manifest(paths: &RunPaths) -> Result<Manifest> {
    let mut files = Vec::new();
    collect_files(&paths.root, &mut files)?;
    let manifest = paths.manifest();
    let mut artifacts = Vec::new();
    for f in files.into_iter().filter(|f| *f != manifest) {
        let bytes = fs::read(&f).map_err(|e| Error::io(&f, e))?;
        let rel = f
            .strip_prefix(&paths.root)
            .expect("under root")
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/");
        artifacts.push(ManifestEntry {
            path: rel,
            bytes: bytes.len() as u64,
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
    }
    artifacts.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(Manifest {
        schema_version: BUNDLE_SCHEMA_VERSION,
        artifacts,
    })
}

pub fn write_manifest(paths: &RunPaths) -> Result<()> {
    let m = build_manifest(paths)?;
    write_json(&paths.manifest(), &m)
}

/// Reads the training report written by `train`.
pub fn load_train_report(paths: &RunPaths) -> Result<TrainReport> {
    require(&paths.train_report(), "subedit train")?;
    read_json(&paths.train_report())
}
