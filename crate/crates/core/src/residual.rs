//! Target-side vectors: the baseline residual δ, the two-direction swap
//! update δ′ and the split of a residual across edit layers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::facts::{FactTriplet, Prompt, TokenId};
use crate::linalg::{self, dot, norm, Matrix, Vector};
use crate::model::{log_softmax, softmax, ModelState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularizerConfig {
    pub lambda_kl: f64,
    pub lambda_wd: f64,
    /// Tokens appended to the subject to form the KL prompt (`"is a"`).
    pub kl_prompt_template: Vec<TokenId>,
}

impl RegularizerConfig {
    pub fn new(kl_prompt_template: Vec<TokenId>) -> Self {
        Self {
            lambda_kl: 0.0625,
            lambda_wd: 0.5,
            kl_prompt_template,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lambda_kl >= 0.0 && self.lambda_wd >= 0.0) {
            return Err(Error::InvalidInput("regularizer weights must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Gradient descent settings shared by both residual optimizers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub steps: usize,
    pub lr: f64,
    pub clip_norm: f64,
    /// Independent random starts for the swap directions; the lowest final
    /// loss wins.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            lr: 0.5,
            clip_norm: 1.0,
            restarts: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualKind {
    Baseline,
    Suit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualResult {
    pub delta: Vec<f64>,
    pub kind: ResidualKind,
    pub optimizer_trace: Vec<(usize, f64)>,
}

/// Two unit directions whose projections the swap update exchanges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapDirections {
    pub w1: Vec<f64>,
    pub w2: Vec<f64>,
    pub lambda_penalty: f64,
    pub h_ref: Vec<f64>,
}

impl SwapDirections {
    /// Same directions with labels exchanged.
    pub fn relabeled(&self) -> Self {
        Self {
            w1: self.w2.clone(),
            w2: self.w1.clone(),
            ..self.clone()
        }
    }
}

/// The prompt an edit is written and measured on: subject then the
/// canonical relation template.
pub fn rewrite_prompt(edit: &FactTriplet) -> Prompt {
    Prompt::compose(&[], &edit.subject, &edit.relation_tokens)
}

fn target_of(edit: &FactTriplet) -> Result<TokenId> {
    edit.new_object
        .ok_or_else(|| Error::InvalidInput("edit has no new object".into()))
}

/// Residual stream after block `layer` at the subject's last token.
pub fn subject_residual(model: &ModelState, prompt: &Prompt, layer: usize) -> Result<Vec<f64>> {
    let trace = model.forward_trace(&prompt.tokens)?;
    trace
        .residual
        .get(layer)
        .map(|r| r[prompt.subject_last()].clone())
        .ok_or_else(|| Error::Index(format!("layer {layer} out of range")))
}

fn nll_loss(target: TokenId) -> impl Fn(&[f64]) -> (f64, Vec<f64>) {
    move |logits: &[f64]| {
        let mut p = softmax(logits);
        let value = -log_softmax(logits)[target as usize];
        p[target as usize] -= 1.0;
        (value, p)
    }
}

/// `KL(p_ref ‖ softmax(logits))` and its gradient with respect to `logits`.
fn kl_loss(reference: Vec<f64>) -> impl Fn(&[f64]) -> (f64, Vec<f64>) {
    let p_ref = softmax(&reference);
    let log_ref = log_softmax(&reference);
    move |logits: &[f64]| {
        let log_q = log_softmax(logits);
        let value: f64 = p_ref
            .iter()
            .zip(log_ref.iter().zip(&log_q))
            .map(|(p, (lr, lq))| if *p > 0.0 { p * (lr - lq) } else { 0.0 })
            .sum();
        let grad = log_q
            .iter()
            .zip(&p_ref)
            .map(|(lq, p)| lq.exp() - p)
            .collect();
        (value, grad)
    }
}

/// Objective of the baseline residual: target NLL on the rewrite prompt,
/// KL drift on the `"{subject} is a"` prompt and weight decay
/// `λ_WD ‖δ‖² / ‖h‖²`.
pub struct BaselineObjective<'a> {
    model: &'a ModelState,
    layer: usize,
    rewrite: Prompt,
    kl_prompt: Prompt,
    target: TokenId,
    kl_reference: Vec<f64>,
    reg: RegularizerConfig,
    /// `‖h‖²` at the patch point; the weight decay is measured relative to it.
    h_norm_sq: f64,
}

impl<'a> BaselineObjective<'a> {
    pub fn new(
        model: &'a ModelState,
        edit: &FactTriplet,
        reg: &RegularizerConfig,
        layer: usize,
    ) -> Result<Self> {
        reg.validate()?;
        let rewrite = rewrite_prompt(edit);
        let kl_prompt = Prompt::compose(&[], &edit.subject, &reg.kl_prompt_template);
        let kl_reference = model.logits(&kl_prompt.tokens)?;
        let h = subject_residual(model, &rewrite, layer)?;
        let h_norm_sq = dot(&h, &h).max(f64::MIN_POSITIVE);
        Ok(Self {
            model,
            layer,
            rewrite,
            kl_prompt,
            target: target_of(edit)?,
            kl_reference,
            reg: reg.clone(),
            h_norm_sq,
        })
    }

    pub fn value_and_grad(&self, delta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (nll, mut g) = self.model.grad_wrt_patch(
            &self.rewrite.tokens,
            self.layer,
            self.rewrite.subject_last(),
            delta,
            &nll_loss(self.target),
        )?;
        let mut value = nll;
        if self.reg.lambda_kl > 0.0 {
            let (kl, gk) = self.model.grad_wrt_patch(
                &self.kl_prompt.tokens,
                self.layer,
                self.kl_prompt.subject_last(),
                delta,
                &kl_loss(self.kl_reference.clone()),
            )?;
            value += self.reg.lambda_kl * kl;
            for (a, b) in g.iter_mut().zip(&gk) {
                *a += self.reg.lambda_kl * b;
            }
        }
        let wd = self.reg.lambda_wd / self.h_norm_sq;
        value += wd * dot(delta, delta);
        for (a, d) in g.iter_mut().zip(delta) {
            *a += 2.0 * wd * d;
        }
        Ok((value, g))
    }
}

fn clip(g: &mut [f64], max_norm: f64) {
    let n = norm(g);
    if n > max_norm && max_norm > 0.0 {
        let s = max_norm / n;
        g.iter_mut().for_each(|v| *v *= s);
    }
}

fn check_finite_loss(value: f64, step: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Optimization(format!("loss became {value} at step {step}")))
    }
}

/// Fixed-step clipped gradient descent. A step that would raise the loss is
/// retried with half the step size, so the returned trace never increases.
fn descend(
    x0: Vec<f64>,
    opt: &OptimConfig,
    f: &dyn Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
    project: &dyn Fn(&mut [f64]),
) -> Result<(Vec<f64>, Vec<(usize, f64)>)> {
    let mut x = x0;
    project(&mut x);
    let (mut value, mut grad) = f(&x)?;
    check_finite_loss(value, 0)?;
    let mut trace = vec![(0, value)];
    for step in 1..=opt.steps {
        clip(&mut grad, opt.clip_norm);
        let mut lr = opt.lr;
        let mut accepted = None;
        for _ in 0..30 {
            let mut cand: Vec<f64> = x.iter().zip(&grad).map(|(a, g)| a - lr * g).collect();
            project(&mut cand);
            let (v, g) = f(&cand)?;
            check_finite_loss(v, step)?;
            if v <= value {
                accepted = Some((cand, v, g));
                break;
            }
            lr *= 0.5;
        }
        match accepted {
            Some((cand, v, g)) => {
                x = cand;
                value = v;
                grad = g;
                trace.push((step, value));
            }
            None => break,
        }
    }
    Ok((x, trace))
}

/// Minimizes the baseline objective over δ starting from zero.
pub fn optimize_delta_baseline(
    model: &ModelState,
    edit: &FactTriplet,
    reg: &RegularizerConfig,
    layer: usize,
    opt: &OptimConfig,
) -> Result<ResidualResult> {
    let objective = BaselineObjective::new(model, edit, reg, layer)?;
    let (delta, trace) = descend(
        vec![0.0; model.config.d_model],
        opt,
        &|d| objective.value_and_grad(d),
        &|_| {},
    )?;
    Ok(ResidualResult {
        delta,
        kind: ResidualKind::Baseline,
        optimizer_trace: trace,
    })
}

/// `δ′ = (hᵀw₂ − hᵀw₁) w₁ + (hᵀw₁ − hᵀw₂) w₂`.
pub fn swap_update(h: &[f64], d: &SwapDirections) -> Result<Vec<f64>> {
    if h.len() != d.w1.len() || h.len() != d.w2.len() {
        return Err(Error::DimensionMismatch(format!(
            "h has {} entries, directions have {} and {}",
            h.len(),
            d.w1.len(),
            d.w2.len()
        )));
    }
    let c = dot(h, &d.w2) - dot(h, &d.w1);
    Ok(d.w1.iter().zip(&d.w2).map(|(a, b)| c * (a - b)).collect())
}

/// Objective of the swap directions: target NLL with `h + δ′(w₁, w₂)`
/// patched in, plus `λ (w₁ᵀw₂)²`.
pub struct SwapObjective<'a> {
    model: &'a ModelState,
    layer: usize,
    rewrite: Prompt,
    target: TokenId,
    pub h_ref: Vec<f64>,
    pub lambda_penalty: f64,
}

impl<'a> SwapObjective<'a> {
    pub fn new(
        model: &'a ModelState,
        edit: &FactTriplet,
        lambda_penalty: f64,
        layer: usize,
    ) -> Result<Self> {
        if !(lambda_penalty >= 0.0) {
            return Err(Error::InvalidInput("penalty weight must be nonnegative".into()));
        }
        let rewrite = rewrite_prompt(edit);
        let h_ref = subject_residual(model, &rewrite, layer)?;
        Ok(Self {
            model,
            layer,
            rewrite,
            target: target_of(edit)?,
            h_ref,
            lambda_penalty,
        })
    }

    /// Loss and gradients with respect to `w₁` and `w₂` taken as given
    /// (no normalization inside the objective).
    pub fn value_and_grad(&self, w1: &[f64], w2: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let dirs = SwapDirections {
            w1: w1.to_vec(),
            w2: w2.to_vec(),
            lambda_penalty: self.lambda_penalty,
            h_ref: self.h_ref.clone(),
        };
        let delta = swap_update(&self.h_ref, &dirs)?;
        let (nll, g) = self.model.grad_wrt_patch(
            &self.rewrite.tokens,
            self.layer,
            self.rewrite.subject_last(),
            &delta,
            &nll_loss(self.target),
        )?;
        let h = &self.h_ref;
        let c = dot(h, w2) - dot(h, w1);
        let gu: f64 = g.iter().zip(w1.iter().zip(w2)).map(|(gi, (a, b))| gi * (a - b)).sum();
        let overlap = dot(w1, w2);
        let pen = 2.0 * self.lambda_penalty * overlap;
        let g1 = (0..h.len())
            .map(|i| -gu * h[i] + c * g[i] + pen * w2[i])
            .collect();
        let g2 = (0..h.len())
            .map(|i| gu * h[i] - c * g[i] + pen * w1[i])
            .collect();
        Ok((nll + self.lambda_penalty * overlap * overlap, g1, g2))
    }
}

fn normalize(v: &mut [f64]) {
    let n = norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    normalize(&mut v);
    v
}

/// Fits `(w₁, w₂)` from independent random unit vectors by clipped gradient
/// descent, renormalizing both after every step, keeping the best of
/// `opt.restarts` starts. Labels are exchanged afterwards so that
/// `h_refᵀw₁ < h_refᵀw₂`.
pub fn fit_swap_directions(
    model: &ModelState,
    edit: &FactTriplet,
    lambda_penalty: f64,
    layer: usize,
    opt: &OptimConfig,
) -> Result<(SwapDirections, Vec<(usize, f64)>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(opt.seed);
    let dim = model.config.d_model;
    let mut best: Option<(SwapDirections, Vec<(usize, f64)>)> = None;
    for _ in 0..opt.restarts.max(1) {
        let w1 = random_unit(&mut rng, dim);
        let w2 = random_unit(&mut rng, dim);
        let run = fit_swap_directions_from(model, edit, lambda_penalty, layer, opt, w1, w2)?;
        let loss = run.1.last().expect("trace has the initial point").1;
        if best
            .as_ref()
            .is_none_or(|b| loss < b.1.last().expect("nonempty").1)
        {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one start"))
}

/// As [`fit_swap_directions`] with explicit starting directions.
pub fn fit_swap_directions_from(
    model: &ModelState,
    edit: &FactTriplet,
    lambda_penalty: f64,
    layer: usize,
    opt: &OptimConfig,
    w1: Vec<f64>,
    w2: Vec<f64>,
) -> Result<(SwapDirections, Vec<(usize, f64)>)> {
    let dim = model.config.d_model;
    if w1.len() != dim || w2.len() != dim {
        return Err(Error::DimensionMismatch("initial directions".into()));
    }
    let objective = SwapObjective::new(model, edit, lambda_penalty, layer)?;
    let mut x0 = w1;
    x0.extend(w2);
    let f = |x: &[f64]| {
        let (v, g1, g2) = objective.value_and_grad(&x[..dim], &x[dim..])?;
        let mut g = g1;
        g.extend(g2);
        Ok((v, g))
    };
    let project = |x: &mut [f64]| {
        let (a, b) = x.split_at_mut(dim);
        normalize(a);
        normalize(b);
    };
    let (x, trace) = descend(x0, opt, &f, &project)?;
    let mut dirs = SwapDirections {
        w1: x[..dim].to_vec(),
        w2: x[dim..].to_vec(),
        lambda_penalty,
        h_ref: objective.h_ref.clone(),
    };
    if dot(&dirs.h_ref, &dirs.w1) > dot(&dirs.h_ref, &dirs.w2) {
        dirs = dirs.relabeled();
    }
    Ok((dirs, trace))
}

/// Swap residual for an edit: fitted directions applied to `h_ref`.
pub fn optimize_delta_swap(
    model: &ModelState,
    edit: &FactTriplet,
    lambda_penalty: f64,
    layer: usize,
    opt: &OptimConfig,
) -> Result<(ResidualResult, SwapDirections)> {
    let (dirs, trace) = fit_swap_directions(model, edit, lambda_penalty, layer, opt)?;
    let delta = swap_update(&dirs.h_ref, &dirs)?;
    Ok((
        ResidualResult {
            delta,
            kind: ResidualKind::Suit,
            optimizer_trace: trace,
        },
        dirs,
    ))
}

/// Splits `delta` into its component in `span(w₁, w₂)` (oblique projection)
/// and the remainder; also returns `‖parallel‖² / ‖delta‖²`.
pub fn decompose_delta(delta: &[f64], d: &SwapDirections) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let n = delta.len();
    if d.w1.len() != n || d.w2.len() != n {
        return Err(Error::DimensionMismatch("delta and directions".into()));
    }
    let mut w = Matrix::zeros(n, 2);
    w.set_column(0, &Vector::from_column_slice(&d.w1));
    w.set_column(1, &Vector::from_column_slice(&d.w2));
    let p = linalg::oblique_projector(&w)?;
    let dv = Vector::from_column_slice(delta);
    let par = &p * &dv;
    let perp = &dv - &par;
    let total = dv.norm_squared();
    if total == 0.0 {
        return Err(Error::UndefinedRatio("delta is zero".into()));
    }
    Ok((
        par.iter().copied().collect(),
        perp.iter().copied().collect(),
        par.norm_squared() / total,
    ))
}

/// Share of the remaining residual gap assigned to `current_layer`: the gap
/// divided by the number of edit layers not yet processed (including this one).
pub fn spread_residual(
    remaining_gap: &[f64],
    edit_layers: &[usize],
    current_layer: usize,
) -> Result<Vec<f64>> {
    let pos = edit_layers
        .iter()
        .position(|&l| l == current_layer)
        .ok_or_else(|| Error::Index(format!("layer {current_layer} is not an edit layer")))?;
    let remaining = (edit_layers.len() - pos) as f64;
    Ok(remaining_gap.iter().map(|g| g / remaining).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dirs(w1: Vec<f64>, w2: Vec<f64>) -> SwapDirections {
        SwapDirections {
            w1,
            w2,
            lambda_penalty: 0.0,
            h_ref: vec![],
        }
    }

    #[test]
    fn swap_examples() {
        let d = dirs(vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]);
        let h = [2.0, 5.0, -1.0];
        let dp = swap_update(&h, &d).unwrap();
        let moved: Vec<f64> = h.iter().zip(&dp).map(|(a, b)| a + b).collect();
        assert_eq!(moved, vec![5.0, 2.0, -1.0]);
        assert_eq!(swap_update(&[3.0, 3.0, 7.0], &d).unwrap(), vec![0.0; 3]);
        assert_eq!(swap_update(&h, &d.relabeled()).unwrap(), dp);
        assert!(swap_update(&[1.0], &d).is_err());
    }

    #[test]
    fn decomposition_examples() {
        let d = dirs(vec![1.0, 0.0, 0.0], vec![0.6, 0.8, 0.0]);
        let (_, _, r) = decompose_delta(&[0.3, -0.2, 0.0], &d).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
        let (par, perp, r) = decompose_delta(&[0.0, 0.0, 2.0], &d).unwrap();
        assert!(r.abs() < 1e-12);
        assert!(norm(&par) < 1e-12);
        assert_eq!(perp, vec![0.0, 0.0, 2.0]);
        let collinear = dirs(vec![1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0]);
        assert!(matches!(
            decompose_delta(&[1.0, 0.0, 0.0], &collinear),
            Err(Error::IllConditioned(_))
        ));
    }

    #[test]
    fn spread_examples() {
        assert_eq!(spread_residual(&[4.0, 2.0], &[3], 3).unwrap(), vec![4.0, 2.0]);
        assert_eq!(spread_residual(&[4.0, 2.0], &[0, 1], 0).unwrap(), vec![2.0, 1.0]);
        assert_eq!(spread_residual(&[4.0, 2.0], &[0, 1], 1).unwrap(), vec![4.0, 2.0]);
        assert!(spread_residual(&[1.0], &[0, 1], 2).is_err());
    }

    #[test]
    fn kl_gradient_matches_fd() {
        let f = kl_loss(vec![0.3, -1.0, 2.0, 0.5]);
        let x = [1.0, 0.2, -0.4, 0.9];
        let (_, g) = f(&x);
        for i in 0..4 {
            let mut up = x;
            let mut dn = x;
            up[i] += 1e-6;
            dn[i] -= 1e-6;
            let fd = (f(&up).0 - f(&dn).0) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-8);
        }
        assert!(f(&[0.3, -1.0, 2.0, 0.5]).0.abs() < 1e-15);
    }
}
