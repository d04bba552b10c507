//! Measurements on edited models: residual perturbation, MLP output drift,
//! key variance, leakage, δ decomposition and the swap component sweep.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::facts::{FactTriplet, Prompt, TokenId};
use crate::keyspace::{self, KeyVector, SubspaceBasis};
use crate::linalg::{self, Matrix};
use crate::model::{softmax, ModelState};
use crate::residual::{self, SwapDirections};
use crate::updater;

pub const DEFAULT_GRID_SIZE: usize = 11;

/// Per-token residual difference at the last edit layer for one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationRecord {
    pub prompt: Vec<TokenId>,
    pub norms: Vec<f64>,
    pub subject_last: Vec<bool>,
}

impl PerturbationRecord {
    pub fn mean(&self) -> f64 {
        mean(&self.norms)
    }

    /// Index of the largest norm (first on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.norms.iter().enumerate() {
            if v > self.norms[best] {
                best = i;
            }
        }
        best
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn check_pair(original: &ModelState, edited: &ModelState) -> Result<()> {
    if original.config != edited.config {
        return Err(Error::DimensionMismatch(
            "original and edited models have different configs".into(),
        ));
    }
    Ok(())
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// `‖h_edited − h_original‖` per token at the last edit layer.
pub fn perturbation_profile(
    original: &ModelState,
    edited: &ModelState,
    prompts: &[Prompt],
) -> Result<Vec<PerturbationRecord>> {
    check_pair(original, edited)?;
    let layer = original.config.last_edit_layer();
    prompts
        .iter()
        .map(|p| {
            let a = original.forward_trace(&p.tokens)?;
            let b = edited.forward_trace(&p.tokens)?;
            let norms = a.residual[layer]
                .iter()
                .zip(&b.residual[layer])
                .map(|(x, y)| diff_norm(x, y))
                .collect();
            let subject_last = (0..p.tokens.len()).map(|t| t == p.subject_last()).collect();
            Ok(PerturbationRecord {
                prompt: p.tokens.clone(),
                norms,
                subject_last,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDrift {
    pub layer: usize,
    pub mean_norm: f64,
}

/// Mean `‖MLP_edited − MLP_original‖` at the subject's last token, per layer.
pub fn mlp_output_drift(
    original: &ModelState,
    edited: &ModelState,
    prompts: &[Prompt],
) -> Result<Vec<LayerDrift>> {
    check_pair(original, edited)?;
    if prompts.is_empty() {
        return Err(Error::InsufficientData("no prompts for drift".into()));
    }
    let n_layers = original.config.n_layers;
    let mut sums = vec![0.0; n_layers];
    for p in prompts {
        let a = original.forward_trace(&p.tokens)?;
        let b = edited.forward_trace(&p.tokens)?;
        let t = p.subject_last();
        for (l, s) in sums.iter_mut().enumerate() {
            *s += diff_norm(&a.mlp_out[l][t], &b.mlp_out[l][t]);
        }
    }
    Ok(sums
        .into_iter()
        .enumerate()
        .map(|(layer, s)| LayerDrift {
            layer,
            mean_norm: s / prompts.len() as f64,
        })
        .collect())
}

/// Logits of `o` and `o*` while scaling each swap component by `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub factors: Vec<f64>,
    pub object: TokenId,
    pub new_object: TokenId,
    pub o_under_w1: Vec<f64>,
    pub o_star_under_w1: Vec<f64>,
    pub o_under_w2: Vec<f64>,
    pub o_star_under_w2: Vec<f64>,
}

/// `(Δw₁, Δw₂)` with `Δw₁ = (hᵀw₂ − hᵀw₁) w₁` and `Δw₂ = (hᵀw₁ − hᵀw₂) w₂`.
pub fn swap_components(h: &[f64], d: &SwapDirections) -> Result<(Vec<f64>, Vec<f64>)> {
    if h.len() != d.w1.len() || h.len() != d.w2.len() {
        return Err(Error::DimensionMismatch("h and swap directions".into()));
    }
    let c = linalg::dot(h, &d.w2) - linalg::dot(h, &d.w1);
    Ok((
        d.w1.iter().map(|w| c * w).collect(),
        d.w2.iter().map(|w| -c * w).collect(),
    ))
}

/// Evenly spaced factors from 0 to 1 inclusive.
pub fn factor_grid(grid_size: usize) -> Result<Vec<f64>> {
    if grid_size < 2 {
        return Err(Error::InvalidInput("grid_size must be at least 2".into()));
    }
    Ok((0..grid_size)
        .map(|i| i as f64 / (grid_size - 1) as f64)
        .collect())
}

pub fn sweep_components(
    model: &ModelState,
    edit: &FactTriplet,
    d: &SwapDirections,
    grid_size: usize,
) -> Result<SweepCurve> {
    let factors = factor_grid(grid_size)?;
    let new_object = edit
        .new_object
        .ok_or_else(|| Error::InvalidInput("edit has no new object".into()))?;
    let layer = model.config.last_edit_layer();
    let prompt = residual::rewrite_prompt(edit);
    let h = residual::subject_residual(model, &prompt, layer)?;
    let (dw1, dw2) = swap_components(&h, d)?;
    let mut curve = SweepCurve {
        factors: factors.clone(),
        object: edit.object,
        new_object,
        o_under_w1: Vec::new(),
        o_star_under_w1: Vec::new(),
        o_under_w2: Vec::new(),
        o_star_under_w2: Vec::new(),
    };
    for &k in &factors {
        for (dw, o_out, star_out) in [
            (&dw1, &mut curve.o_under_w1, &mut curve.o_star_under_w1),
            (&dw2, &mut curve.o_under_w2, &mut curve.o_star_under_w2),
        ] {
            let patch: Vec<f64> = dw.iter().map(|x| k * x).collect();
            let logits =
                model.forward_with_stream_patch(&prompt.tokens, layer, prompt.subject_last(), &patch)?;
            o_out.push(logits[edit.object as usize]);
            star_out.push(logits[new_object as usize]);
        }
    }
    Ok(curve)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub layer: usize,
    pub tau_energy: f64,
    pub rank: usize,
    pub n_keys: usize,
    pub v_specific: f64,
    pub v_agnostic: f64,
}

/// Spread of subject-specific and agnostic key components.
pub fn variance_table(keys: &[KeyVector], basis: &SubspaceBasis) -> Result<VarianceRow> {
    let (v_specific, v_agnostic) = keyspace::component_variance(keys, basis)?;
    Ok(VarianceRow {
        layer: basis.layer,
        tau_energy: basis.tau_energy,
        rank: basis.rank(),
        n_keys: keys.len(),
        v_specific,
        v_agnostic,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageRow {
    pub mode: String,
    pub layer: usize,
    pub prompt_type: String,
    pub n: usize,
    pub mean_leakage: f64,
}

/// Mean leakage of `delta` over keys grouped by prompt type.
pub fn leakage_table(
    mode: &str,
    delta: &Matrix,
    keys: &[(String, KeyVector)],
    basis: &SubspaceBasis,
) -> Result<Vec<LeakageRow>> {
    let mut groups: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (kind, k) in keys {
        let v = updater::leakage_proportion(delta, k, basis)?;
        groups.entry(kind.as_str()).or_default().push(v);
    }
    Ok(groups
        .into_iter()
        .map(|(kind, vs)| LeakageRow {
            mode: mode.to_string(),
            layer: basis.layer,
            prompt_type: kind.to_string(),
            n: vs.len(),
            mean_leakage: mean(&vs),
        })
        .collect())
}

/// A baseline δ split against `span(w₁, w₂)` and the `p(o*)` each part gives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionRow {
    pub subject: Vec<TokenId>,
    pub parallel_ratio: f64,
    pub p_full: f64,
    pub p_parallel: f64,
    pub p_perp: f64,
}

pub fn decompose_edit(
    model: &ModelState,
    edit: &FactTriplet,
    delta: &[f64],
    d: &SwapDirections,
) -> Result<DecompositionRow> {
    let target = edit
        .new_object
        .ok_or_else(|| Error::InvalidInput("edit has no new object".into()))? as usize;
    let (par, perp, ratio) = residual::decompose_delta(delta, d)?;
    let layer = model.config.last_edit_layer();
    let prompt = residual::rewrite_prompt(edit);
    let p_of = |patch: &[f64]| -> Result<f64> {
        let logits =
            model.forward_with_stream_patch(&prompt.tokens, layer, prompt.subject_last(), patch)?;
        Ok(softmax(&logits)[target])
    };
    Ok(DecompositionRow {
        subject: edit.subject.clone(),
        parallel_ratio: ratio,
        p_full: p_of(delta)?,
        p_parallel: p_of(&par)?,
        p_perp: p_of(&perp)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionSummary {
    pub n: usize,
    pub mean_parallel_ratio: f64,
    pub mean_p_full: f64,
    pub mean_p_parallel: f64,
    pub mean_p_perp: f64,
    /// Share of edits where the parallel part gives at least the `p(o*)` of
    /// the perpendicular part.
    pub parallel_wins: f64,
}

pub fn delta_decomposition_table(rows: &[DecompositionRow]) -> Result<DecompositionSummary> {
    if rows.is_empty() {
        return Err(Error::InsufficientData("no decomposition rows".into()));
    }
    let col = |f: fn(&DecompositionRow) -> f64| mean(&rows.iter().map(f).collect::<Vec<_>>());
    let wins = rows.iter().filter(|r| r.p_parallel >= r.p_perp).count();
    Ok(DecompositionSummary {
        n: rows.len(),
        mean_parallel_ratio: col(|r| r.parallel_ratio),
        mean_p_full: col(|r| r.p_full),
        mean_p_parallel: col(|r| r.p_parallel),
        mean_p_perp: col(|r| r.p_perp),
        parallel_wins: wins as f64 / rows.len() as f64,
    })
}

/// Serializes rows as CSV with a header taken from the field names.
pub fn rows_to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::InvalidInput(format!("csv flush: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::InvalidInput(format!("csv encoding: {e}")))
}

/// Sweep curve as whitespace-separated columns with a `#` header line.
pub fn sweep_to_columns(curve: &SweepCurve) -> String {
    let mut out = String::from("# k o_w1 o_star_w1 o_w2 o_star_w2\n");
    for i in 0..curve.factors.len() {
        out.push_str(&format!(
            "{} {} {} {} {}\n",
            curve.factors[i],
            curve.o_under_w1[i],
            curve.o_star_under_w1[i],
            curve.o_under_w2[i],
            curve.o_star_under_w2[i]
        ));
    }
    out
}
