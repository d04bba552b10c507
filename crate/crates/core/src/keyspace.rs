//! Key vectors, the subject key matrix and the entity-agnostic subspace.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::facts::TokenId;
use crate::linalg::{self, EnergySpectrum, Matrix, Vector};
use crate::model::ModelState;

/// Prefix-averaged MLP up-projection activation at a subject's last token.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyVector {
    pub layer: usize,
    pub values: Vector,
    pub subject: Vec<TokenId>,
}

/// Orthonormal basis `U_t` of the directions shared across subjects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubspaceBasis {
    /// `d_mlp × m`, orthonormal columns.
    pub basis: Matrix,
    pub spectrum: EnergySpectrum,
    pub tau_energy: f64,
    pub layer: usize,
}

impl SubspaceBasis {
    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    pub fn dim(&self) -> usize {
        self.basis.nrows()
    }

    /// `U_t U_tᵀ`.
    pub fn projector(&self) -> Result<Matrix> {
        linalg::projector_from_basis(&self.basis)
    }

    /// Builds a basis from explicit columns (used for constructed cases).
    pub fn from_columns(basis: Matrix, layer: usize) -> Result<Self> {
        if basis.ncols() > 0 && linalg::orthonormality_error(&basis) > linalg::ORTHONORMAL_TOL {
            return Err(Error::InvalidBasis("columns are not orthonormal".into()));
        }
        let m = basis.ncols();
        Ok(Self {
            spectrum: EnergySpectrum {
                singular_values: vec![1.0; m],
                total_energy: m as f64,
                selected_rank: m,
            },
            basis,
            tau_energy: 0.0,
            layer,
        })
    }
}

/// Mean over `prefixes` of the up-projection activation at the last subject
/// token of `prefix ++ subject` at `layer`.
pub fn extract_key(
    model: &ModelState,
    subject: &[TokenId],
    prefixes: &[Vec<TokenId>],
    layer: usize,
) -> Result<KeyVector> {
    if subject.is_empty() {
        return Err(Error::InvalidInput("empty subject".into()));
    }
    if layer >= model.config.n_layers {
        return Err(Error::Index(format!("layer {layer} out of range")));
    }
    let empty = [Vec::new()];
    let prefixes = if prefixes.is_empty() { &empty[..] } else { prefixes };
    let mut acc = Vector::zeros(model.config.d_mlp);
    for prefix in prefixes {
        let mut tokens = prefix.clone();
        tokens.extend_from_slice(subject);
        let trace = model.forward_trace(&tokens)?;
        let act = &trace.up_activation[layer][tokens.len() - 1];
        for (a, v) in acc.iter_mut().zip(act) {
            *a += v;
        }
    }
    acc /= prefixes.len() as f64;
    Ok(KeyVector {
        layer,
        values: acc,
        subject: subject.to_vec(),
    })
}

/// `K_subject = [k₁ | k₂ | …]`, one column per subject.
pub fn build_subject_matrix(
    model: &ModelState,
    subjects: &[Vec<TokenId>],
    prefixes: &[Vec<TokenId>],
    layer: usize,
) -> Result<Matrix> {
    if subjects.is_empty() {
        return Err(Error::InsufficientData("no subjects".into()));
    }
    let mut k = Matrix::zeros(model.config.d_mlp, subjects.len());
    for (j, s) in subjects.iter().enumerate() {
        k.set_column(j, &extract_key(model, s, prefixes, layer)?.values);
    }
    Ok(k)
}

/// Leading left singular vectors of `K_subject` carrying a `tau_energy`
/// fraction of the squared singular values. Columns are not centered.
pub fn identify_agnostic_subspace(
    k_subject: &Matrix,
    tau_energy: f64,
    layer: usize,
) -> Result<SubspaceBasis> {
    let svd = linalg::svd(k_subject)?;
    let spectrum = EnergySpectrum::new(svd.singular_values.clone(), tau_energy)?;
    let m = spectrum.selected_rank;
    let basis = svd.u.columns(0, m).into_owned();
    Ok(SubspaceBasis {
        basis,
        spectrum,
        tau_energy,
        layer,
    })
}

/// `k_{∼s} = U_t U_tᵀ k`.
pub fn agnostic_component(k: &Vector, b: &SubspaceBasis) -> Result<Vector> {
    if k.len() != b.dim() {
        return Err(Error::DimensionMismatch(format!(
            "key has {} entries, basis lives in {}",
            k.len(),
            b.dim()
        )));
    }
    Ok(&b.basis * (b.basis.transpose() * k))
}

/// `k′ = k − U_t U_tᵀ k`.
pub fn constrain_key(k: &KeyVector, b: &SubspaceBasis) -> Result<KeyVector> {
    let agnostic = agnostic_component(&k.values, b)?;
    Ok(KeyVector {
        layer: k.layer,
        values: &k.values - agnostic,
        subject: k.subject.clone(),
    })
}

/// Mean over coordinates of the per-coordinate population variance.
fn mean_coordinate_variance(vs: &[Vector]) -> f64 {
    let n = vs.len() as f64;
    let dim = vs[0].len();
    let mut mean = Vector::zeros(dim);
    for v in vs {
        mean += v;
    }
    mean /= n;
    let mut total = 0.0;
    for v in vs {
        total += (v - &mean).norm_squared();
    }
    total / (n * dim as f64)
}

/// `(V(k_s), V(k_{∼s}))`: spread of the subject-specific and agnostic
/// components across keys.
pub fn component_variance(keys: &[KeyVector], b: &SubspaceBasis) -> Result<(f64, f64)> {
    if keys.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "component variance needs at least 2 keys, got {}",
            keys.len()
        )));
    }
    let mut specific = Vec::with_capacity(keys.len());
    let mut agnostic = Vec::with_capacity(keys.len());
    for k in keys {
        let a = agnostic_component(&k.values, b)?;
        specific.push(&k.values - &a);
        agnostic.push(a);
    }
    Ok((
        mean_coordinate_variance(&specific),
        mean_coordinate_variance(&agnostic),
    ))
}
