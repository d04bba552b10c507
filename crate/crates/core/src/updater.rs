//! Closed-form weight updates and the sequential batch-editing driver.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::facts::{FactCorpus, FactTriplet, Prompt, TokenId};
use crate::keyspace::{self, KeyVector, SubspaceBasis};
use crate::linalg::{self, Matrix, Vector};
use crate::model::ModelState;
use crate::residual::{
    self, OptimConfig, RegularizerConfig, ResidualResult, SwapDirections,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditMode {
    Suit,
    #[serde(rename = "alphaedit")]
    AlphaEdit,
    Memit,
    KOnly,
    DeltaOnly,
}

impl EditMode {
    pub const ALL: [EditMode; 5] = [
        EditMode::Suit,
        EditMode::AlphaEdit,
        EditMode::Memit,
        EditMode::KOnly,
        EditMode::DeltaOnly,
    ];

    pub fn label(self) -> &'static str {
        match self {
            EditMode::Suit => "suit",
            EditMode::AlphaEdit => "alphaedit",
            EditMode::Memit => "memit",
            EditMode::KOnly => "k_only",
            EditMode::DeltaOnly => "delta_only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "suit" => Ok(EditMode::Suit),
            "alphaedit" => Ok(EditMode::AlphaEdit),
            "memit" => Ok(EditMode::Memit),
            "k_only" => Ok(EditMode::KOnly),
            "delta_only" => Ok(EditMode::DeltaOnly),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }

    /// Keys have their entity-agnostic component removed.
    pub fn constrains_keys(self) -> bool {
        matches!(self, EditMode::Suit | EditMode::KOnly)
    }

    /// Residuals come from the two-direction swap update.
    pub fn uses_swap(self) -> bool {
        matches!(self, EditMode::Suit | EditMode::DeltaOnly)
    }

    /// Updates are confined to the preserved-knowledge null space.
    pub fn uses_null_space(self) -> bool {
        !matches!(self, EditMode::Memit)
    }
}

impl std::fmt::Display for EditMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Second-moment statistics of keys that must not change, and the
/// projector onto their (near) null space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreservedKnowledge {
    pub layer: usize,
    /// `K₀K₀ᵀ`.
    pub k0_cov: Matrix,
    pub n_keys: usize,
    pub nullspace_threshold: f64,
    pub projector: Matrix,
}

impl PreservedKnowledge {
    /// Statistics of the columns of `k0`. The projector spans eigenvectors
    /// whose eigenvalue is at most `nullspace_threshold · λ_max`.
    pub fn from_keys(k0: &Matrix, layer: usize, nullspace_threshold: f64) -> Result<Self> {
        if !(nullspace_threshold >= 0.0 && nullspace_threshold.is_finite()) {
            return Err(Error::InvalidInput("nullspace_threshold must be nonnegative".into()));
        }
        if k0.ncols() == 0 {
            return Err(Error::InsufficientData("empty preserved key set".into()));
        }
        linalg::ensure_finite(k0, "preserved keys")?;
        let mut cov = k0 * k0.transpose();
        cov = (&cov + cov.transpose()) * 0.5;
        let (values, vectors) = linalg::symmetric_eigen(&cov)?;
        let lambda_max = values.first().copied().unwrap_or(0.0).max(0.0);
        let cut = nullspace_threshold * lambda_max;
        let keep: Vec<usize> = (0..values.len()).filter(|&i| values[i] <= cut).collect();
        let mut basis = Matrix::zeros(cov.nrows(), keep.len());
        for (j, &i) in keep.iter().enumerate() {
            basis.set_column(j, &vectors.column(i));
        }
        let projector = &basis * basis.transpose();
        Ok(Self {
            layer,
            k0_cov: cov,
            n_keys: k0.ncols(),
            nullspace_threshold,
            projector,
        })
    }

    pub fn null_rank(&self) -> usize {
        self.projector.trace().round() as usize
    }
}

/// Where preserved keys are read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreservedSource {
    /// One prefix-averaged key per non-edited subject.
    SubjectKeys,
    /// The up-projection activation at every token position of every
    /// rewrite and paraphrase prompt of the non-edited facts.
    AllPositions,
    /// As `AllPositions` but skipping subject tokens: generic context keys.
    ContextPositions,
}

/// Preserved-knowledge statistics at `layer` from the corpus facts whose
/// indices are not in `edited`.
pub fn build_preserved(
    model: &ModelState,
    corpus: &FactCorpus,
    edited: &[usize],
    layer: usize,
    nullspace_threshold: f64,
    source: PreservedSource,
) -> Result<PreservedKnowledge> {
    let keep: Vec<usize> = (0..corpus.facts.len())
        .filter(|i| !edited.contains(i))
        .collect();
    if keep.is_empty() {
        return Err(Error::InsufficientData("every fact is edited".into()));
    }
    let d_mlp = model.config.d_mlp;
    let mut cols: Vec<Vec<f64>> = Vec::new();
    match source {
        PreservedSource::SubjectKeys => {
            for &i in &keep {
                let k = keyspace::extract_key(
                    model,
                    &corpus.facts[i].triplet.subject,
                    &corpus.prefix_pool,
                    layer,
                )?;
                cols.push(k.values.iter().copied().collect());
            }
        }
        PreservedSource::AllPositions | PreservedSource::ContextPositions => {
            let skip_subject = source == PreservedSource::ContextPositions;
            for &i in &keep {
                let f = &corpus.facts[i];
                for p in std::iter::once(&f.prompts.rewrite).chain(&f.prompts.paraphrases) {
                    let tr = model.forward_trace(&p.tokens)?;
                    for (t, k) in tr.up_activation[layer].iter().enumerate() {
                        if !(skip_subject && (p.subject_start..p.subject_end).contains(&t)) {
                            cols.push(k.clone());
                        }
                    }
                }
            }
        }
    }
    let mut k0 = Matrix::zeros(d_mlp, cols.len());
    for (j, c) in cols.iter().enumerate() {
        k0.set_column(j, &Vector::from_column_slice(c));
    }
    PreservedKnowledge::from_keys(&k0, layer, nullspace_threshold)
}

/// Relative eigenvalue cutoff for the MEMIT pseudo-inverse fallback.
pub const PINV_RCOND: f64 = 1e-10;

/// Solves for the weight update of one layer.
///
/// Null-space modes: `Δ = R Kᵀ P (K_p K_pᵀ P + K Kᵀ P + I)⁻¹`.
/// MEMIT mode: `Δ = R Kᵀ (L2 · C + K Kᵀ)⁻¹` with `C = K₀K₀ᵀ`, falling back to a
/// pseudo-inverse when the system is singular.
pub fn compute_delta(
    keys: &Matrix,
    residuals: &Matrix,
    prior_keys: &Matrix,
    preserved: &PreservedKnowledge,
    mode: EditMode,
    l2: f64,
) -> Result<Matrix> {
    let m = keys.nrows();
    if keys.ncols() != residuals.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "{} keys but {} residuals",
            keys.ncols(),
            residuals.ncols()
        )));
    }
    if preserved.projector.nrows() != m || prior_keys.nrows() != m {
        return Err(Error::DimensionMismatch("key dimension disagrees with statistics".into()));
    }
    linalg::ensure_finite(keys, "keys")?;
    linalg::ensure_finite(residuals, "residuals")?;
    if keys.ncols() == 0 {
        return Ok(Matrix::zeros(residuals.nrows(), m));
    }
    let kkt = keys * keys.transpose();
    let delta_t = if mode.uses_null_space() {
        let p = &preserved.projector;
        let a = (prior_keys * prior_keys.transpose() + &kkt) * p + Matrix::identity(m, m);
        // Δᵀ = Aᵀ⁻¹ P K Rᵀ
        linalg::solve_general(&a.transpose(), &(p * keys * residuals.transpose()))?
    } else {
        let a = &preserved.k0_cov * l2 + &kkt;
        let rhs = keys * residuals.transpose();
        match linalg::solve_spd(&a, &rhs) {
            Ok(x) => x,
            Err(Error::Factorization(_)) => linalg::solve_psd_pinv(&a, &rhs, PINV_RCOND)?,
            Err(e) => return Err(e),
        }
    };
    let delta = delta_t.transpose();
    linalg::ensure_finite(&delta, "weight update")?;
    Ok(delta)
}

/// `‖Δ U_t U_tᵀ k‖² / ‖Δ k‖²`.
pub fn leakage_proportion(delta: &Matrix, k: &KeyVector, b: &SubspaceBasis) -> Result<f64> {
    if delta.ncols() != k.values.len() {
        return Err(Error::DimensionMismatch("update and key".into()));
    }
    let full = (delta * &k.values).norm_squared();
    if full == 0.0 || !full.is_finite() {
        return Err(Error::UndefinedRatio("update annihilates the key".into()));
    }
    let agnostic = keyspace::agnostic_component(&k.values, b)?;
    Ok((delta * agnostic).norm_squared() / full)
}

/// Settings shared by every batch of a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditSettings {
    pub regularizer: RegularizerConfig,
    pub lambda_penalty: f64,
    pub optim: OptimConfig,
    pub l2: f64,
    pub prefixes: Vec<Vec<TokenId>>,
}

/// Per-layer statistics an edit session reads but never changes.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStatistics {
    pub preserved: PreservedKnowledge,
    pub basis: Option<SubspaceBasis>,
}

/// A sequential editing session.
#[derive(Debug, Clone, PartialEq)]
pub struct EditSession {
    pub mode: EditMode,
    pub edit_layers: Vec<usize>,
    pub prior_keys: BTreeMap<usize, Matrix>,
    pub batch_counter: usize,
}

impl EditSession {
    pub fn new(mode: EditMode, edit_layers: &[usize], d_mlp: usize) -> Self {
        Self {
            mode,
            edit_layers: edit_layers.to_vec(),
            prior_keys: edit_layers
                .iter()
                .map(|&l| (l, Matrix::zeros(d_mlp, 0)))
                .collect(),
            batch_counter: 0,
        }
    }

    pub fn edits_applied(&self, layer: usize) -> usize {
        self.prior_keys.get(&layer).map_or(0, Matrix::ncols)
    }
}

/// One edit of a batch with its target-side vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedEdit {
    pub triplet: FactTriplet,
    pub residual: ResidualResult,
    pub directions: Option<SwapDirections>,
    /// `h + δ` at the last edit layer.
    pub target_h: Vec<f64>,
}

/// What one layer of one batch did.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerEditRecord {
    pub layer: usize,
    /// Keys as used by the solve (constrained in constraining modes).
    pub keys: Matrix,
    pub raw_keys: Vec<KeyVector>,
    pub residuals: Matrix,
    pub delta: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditBatch {
    pub edits: Vec<PreparedEdit>,
    pub layers: Vec<LayerEditRecord>,
}

/// Computes δ (or δ′) for every edit on the current model.
pub fn prepare_edits(
    model: &ModelState,
    edits: &[FactTriplet],
    mode: EditMode,
    settings: &EditSettings,
    seed_offset: u64,
) -> Result<Vec<PreparedEdit>> {
    let layer = model.config.last_edit_layer();
    edits
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let opt = OptimConfig {
                seed: settings.optim.seed.wrapping_add(seed_offset).wrapping_add(i as u64),
                ..settings.optim.clone()
            };
            let (res, dirs) = if mode.uses_swap() {
                let (r, d) =
                    residual::optimize_delta_swap(model, t, settings.lambda_penalty, layer, &opt)?;
                (r, Some(d))
            } else {
                let r = residual::optimize_delta_baseline(
                    model,
                    t,
                    &settings.regularizer,
                    layer,
                    &opt,
                )?;
                (r, None)
            };
            let h = residual::subject_residual(model, &residual::rewrite_prompt(t), layer)?;
            let target_h = h.iter().zip(&res.delta).map(|(a, b)| a + b).collect();
            Ok(PreparedEdit {
                triplet: t.clone(),
                residual: res,
                directions: dirs,
                target_h,
            })
        })
        .collect()
}

/// Applies one batch: computes targets, then walks the edit layers in
/// ascending order, re-measuring the remaining gap at the last edit layer
/// before solving each layer's update.
pub fn apply_batch(
    model: &mut ModelState,
    edits: &[FactTriplet],
    session: &mut EditSession,
    stats: &BTreeMap<usize, LayerStatistics>,
    settings: &EditSettings,
) -> Result<EditBatch> {
    if edits.is_empty() {
        return Ok(EditBatch {
            edits: Vec::new(),
            layers: Vec::new(),
        });
    }
    let mode = session.mode;
    let last = model.config.last_edit_layer();
    let prepared = prepare_edits(
        model,
        edits,
        mode,
        settings,
        (session.batch_counter as u64) << 32,
    )?;
    let prompts: Vec<Prompt> = edits.iter().map(residual::rewrite_prompt).collect();
    let d_model = model.config.d_model;
    let d_mlp = model.config.d_mlp;
    let n = edits.len();
    let mut records = Vec::new();

    for &layer in &session.edit_layers {
        let st = stats
            .get(&layer)
            .ok_or_else(|| Error::InvalidInput(format!("no statistics for layer {layer}")))?;
        let mut keys = Matrix::zeros(d_mlp, n);
        let mut raw_keys = Vec::with_capacity(n);
        let mut resid = Matrix::zeros(d_model, n);
        for (j, (e, p)) in prepared.iter().zip(&prompts).enumerate() {
            let raw = keyspace::extract_key(model, &e.triplet.subject, &settings.prefixes, layer)?;
            let used = if mode.constrains_keys() {
                let b = st.basis.as_ref().ok_or_else(|| {
                    Error::InvalidInput(format!("mode {mode} needs a subspace basis at layer {layer}"))
                })?;
                keyspace::constrain_key(&raw, b)?
            } else {
                raw.clone()
            };
            keys.set_column(j, &used.values);
            raw_keys.push(raw);
            let h = residual::subject_residual(model, p, last)?;
            let gap: Vec<f64> = e.target_h.iter().zip(&h).map(|(t, c)| t - c).collect();
            let r = residual::spread_residual(&gap, &session.edit_layers, layer)?;
            resid.set_column(j, &Vector::from_vec(r));
        }
        let prior = &session.prior_keys[&layer];
        let delta = compute_delta(&keys, &resid, prior, &st.preserved, mode, settings.l2)?;
        model.add_to_down_proj(layer, &delta)?;
        records.push(LayerEditRecord {
            layer,
            keys,
            raw_keys,
            residuals: resid,
            delta,
        });
    }
    for rec in &records {
        let prior = session.prior_keys.get_mut(&rec.layer).expect("layer registered");
        let mut grown = Matrix::zeros(d_mlp, prior.ncols() + rec.keys.ncols());
        grown.columns_mut(0, prior.ncols()).copy_from(prior);
        grown
            .columns_mut(prior.ncols(), rec.keys.ncols())
            .copy_from(&rec.keys);
        *prior = grown;
    }
    session.batch_counter += 1;
    Ok(EditBatch {
        edits: prepared,
        layers: records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projector_extremes() {
        let zero = Matrix::zeros(4, 3);
        let pk = PreservedKnowledge::from_keys(&zero, 0, 2e-2).unwrap();
        assert!((pk.projector.clone() - Matrix::identity(4, 4)).amax() < 1e-12);
        let full = Matrix::identity(4, 4) * 3.0;
        let pk = PreservedKnowledge::from_keys(&full, 0, 2e-2).unwrap();
        assert!(pk.projector.amax() < 1e-12);
        assert!(PreservedKnowledge::from_keys(&Matrix::zeros(4, 0), 0, 2e-2).is_err());
    }

    #[test]
    fn single_edit_closed_form() {
        let k = Matrix::from_column_slice(3, 1, &[1.0, 2.0, -1.0]);
        let r = Matrix::from_column_slice(2, 1, &[0.5, -3.0]);
        let pk = PreservedKnowledge::from_keys(&Matrix::zeros(3, 1), 0, 2e-2).unwrap();
        let d = compute_delta(&k, &r, &Matrix::zeros(3, 0), &pk, EditMode::AlphaEdit, 10.0).unwrap();
        let expect = &r * k.transpose() / (k.norm_squared() + 1.0);
        assert!((d - expect).amax() < 1e-12);
    }

    #[test]
    fn zero_residual_gives_zero_update() {
        let k = Matrix::from_fn(5, 2, |i, j| (i + 2 * j) as f64 * 0.3 - 0.4);
        let r = Matrix::zeros(3, 2);
        let pk = PreservedKnowledge::from_keys(&Matrix::identity(5, 5), 0, 2e-2).unwrap();
        for mode in EditMode::ALL {
            let d = compute_delta(&k, &r, &Matrix::zeros(5, 0), &pk, mode, 10.0).unwrap();
            assert_eq!(d.amax(), 0.0);
        }
    }

    #[test]
    fn mode_names_round_trip() {
        for m in EditMode::ALL {
            assert_eq!(EditMode::parse(m.label()).unwrap(), m);
        }
        assert_eq!(EditMode::parse("k-only").unwrap(), EditMode::KOnly);
        assert!(EditMode::parse("rome").is_err());
    }
}
