//! Tiny pre-norm decoder-only transformer with hookable residual streams.
//!
//! All parameters live in one flat `Vec<f64>`; a [`Layout`] derived from the
//! config maps tensor names to ranges. The MLP down-projection of every
//! layer (`w_out`, `d_model × d_mlp`) is the linear associative memory that
//! the editors rewrite.
//!
//! Backpropagation is written by hand. The same backward pass serves
//! training (parameter gradients) and residual-stream patch optimization
//! (gradient with respect to an additive patch after a given block).

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::facts::TokenId;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub edit_layers: Vec<usize>,
    /// Attention in layers below this index only sees its own position, so
    /// everything known about a token up to that depth lives in its stream.
    #[serde(default)]
    pub mixing_start: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults for a given vocabulary.
    pub fn desk(vocab_size: usize, seed: u64) -> Self {
        Self {
            n_layers: 3,
            d_model: 64,
            d_mlp: 256,
            n_heads: 4,
            vocab_size,
            max_seq_len: 64,
            edit_layers: vec![0, 1],
            mixing_start: 2,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(format!("model config: {m}")));
        if self.n_layers == 0 || self.d_model == 0 || self.vocab_size == 0 {
            return bad("zero-sized dimension");
        }
        if self.d_mlp < self.d_model {
            return bad("d_mlp must be at least d_model");
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        if self.edit_layers.is_empty() {
            return bad("edit_layers must be nonempty");
        }
        if self.edit_layers.windows(2).any(|w| w[0] >= w[1]) {
            return bad("edit_layers must be strictly increasing");
        }
        if *self.edit_layers.last().expect("nonempty") >= self.n_layers {
            return bad("edit layer out of range");
        }
        if self.mixing_start >= self.n_layers {
            return bad("at least one layer must attend across positions");
        }
        Ok(())
    }

    /// The layer whose output residual is patched when computing targets.
    pub fn last_edit_layer(&self) -> usize {
        *self.edit_layers.last().expect("validated nonempty")
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerLayout {
    pub ln1_g: Range<usize>,
    pub ln1_b: Range<usize>,
    pub wq: Range<usize>,
    pub wk: Range<usize>,
    pub wv: Range<usize>,
    pub wo: Range<usize>,
    pub ln2_g: Range<usize>,
    pub ln2_b: Range<usize>,
    pub w_in: Range<usize>,
    pub b_in: Range<usize>,
    pub w_out: Range<usize>,
    pub b_out: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub tok_emb: Range<usize>,
    pub pos_emb: Range<usize>,
    pub layers: Vec<LayerLayout>,
    pub lnf_g: Range<usize>,
    pub lnf_b: Range<usize>,
    pub unembed: Range<usize>,
    pub total: usize,
}

impl Layout {
    pub fn new(c: &ModelConfig) -> Self {
        let mut at = 0usize;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let (d, m) = (c.d_model, c.d_mlp);
        let tok_emb = take(c.vocab_size * d);
        let pos_emb = take(c.max_seq_len * d);
        let layers = (0..c.n_layers)
            .map(|_| LayerLayout {
                ln1_g: take(d),
                ln1_b: take(d),
                wq: take(d * d),
                wk: take(d * d),
                wv: take(d * d),
                wo: take(d * d),
                ln2_g: take(d),
                ln2_b: take(d),
                w_in: take(m * d),
                b_in: take(m),
                w_out: take(d * m),
                b_out: take(d),
            })
            .collect();
        let lnf_g = take(d);
        let lnf_b = take(d);
        let unembed = take(c.vocab_size * d);
        Self {
            tok_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            unembed,
            total: at,
        }
    }

    /// Ranges of every parameter tensor paired with a stable name.
    pub fn named(&self) -> Vec<(String, Range<usize>)> {
        let mut out = vec![
            ("tok_emb".to_string(), self.tok_emb.clone()),
            ("pos_emb".to_string(), self.pos_emb.clone()),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, r) in [
                ("ln1_g", &l.ln1_g),
                ("ln1_b", &l.ln1_b),
                ("wq", &l.wq),
                ("wk", &l.wk),
                ("wv", &l.wv),
                ("wo", &l.wo),
                ("ln2_g", &l.ln2_g),
                ("ln2_b", &l.ln2_b),
                ("w_in", &l.w_in),
                ("b_in", &l.b_in),
                ("w_out", &l.w_out),
                ("b_out", &l.b_out),
            ] {
                out.push((format!("layers.{i}.{name}"), r.clone()));
            }
        }
        out.push(("lnf_g".to_string(), self.lnf_g.clone()));
        out.push(("lnf_b".to_string(), self.lnf_b.clone()));
        out.push(("unembed".to_string(), self.unembed.clone()));
        out
    }
}

/// Trained (or editable) model weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: Vec<f64>,
    layout: Layout,
}

/// Everything recorded during one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamTrace {
    /// `[layer][position]` residual stream after the full block.
    pub residual: Vec<Vec<Vec<f64>>>,
    /// `[layer][position]` MLP up-projection activation (the key).
    pub up_activation: Vec<Vec<Vec<f64>>>,
    /// `[layer][position]` MLP output added to the stream.
    pub mlp_out: Vec<Vec<Vec<f64>>>,
    /// Logits at the final position.
    pub logits: Vec<f64>,
}

/// Additive residual-stream patch after block `layer` at `position`.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub layer: usize,
    pub position: usize,
    pub delta: Vec<f64>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum LogitsAt {
    Last,
    All,
}

struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

struct LayerCache {
    ln1: LnCache,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    z: Vec<f64>,
    ln2: LnCache,
    b: Vec<f64>,
    pre: Vec<f64>,
    key: Vec<f64>,
    mlp_out: Vec<f64>,
    out: Vec<f64>,
}

struct ForwardCache {
    tokens: Vec<TokenId>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    f: Vec<f64>,
    /// `(position, logits)` for every position logits were computed at.
    logits: Vec<(usize, Vec<f64>)>,
}

// ---------------------------------------------------------------------------
// Small dense kernels (row-major `rows × cols`)
// ---------------------------------------------------------------------------

fn matvec(w: &[f64], cols: usize, x: &[f64], out: &mut [f64]) {
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

fn matvec_bias(w: &[f64], bias: &[f64], cols: usize, x: &[f64], out: &mut [f64]) {
    matvec(w, cols, x, out);
    for (o, b) in out.iter_mut().zip(bias) {
        *o += b;
    }
}

/// `dx += Wᵀ dy`
fn matvec_t_acc(w: &[f64], cols: usize, dy: &[f64], dx: &mut [f64]) {
    for (g, row) in dy.iter().zip(w.chunks_exact(cols)) {
        if *g == 0.0 {
            continue;
        }
        for (d, r) in dx.iter_mut().zip(row) {
            *d += g * r;
        }
    }
}

/// `dw += dy xᵀ`
fn outer_acc(dw: &mut [f64], cols: usize, dy: &[f64], x: &[f64]) {
    for (g, row) in dy.iter().zip(dw.chunks_exact_mut(cols)) {
        if *g == 0.0 {
            continue;
        }
        for (d, xv) in row.iter_mut().zip(x) {
            *d += g * xv;
        }
    }
}

fn layer_norm_rows(
    x: &[f64],
    d: usize,
    g: &[f64],
    b: &[f64],
    out: &mut [f64],
    cache: &mut LnCache,
) {
    for (t, (row, orow)) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)).enumerate() {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        cache.rstd[t] = rstd;
        let xh = &mut cache.xhat[t * d..(t + 1) * d];
        for i in 0..d {
            xh[i] = (row[i] - mean) * rstd;
            orow[i] = xh[i] * g[i] + b[i];
        }
    }
}

/// Backward through one layer-norm row. Accumulates into `dx`, `dg`, `db`.
fn layer_norm_back_row(
    dy: &[f64],
    xhat: &[f64],
    rstd: f64,
    g: &[f64],
    dx: &mut [f64],
    dg: Option<(&mut [f64], &mut [f64])>,
) {
    let d = dy.len();
    let mut mean_dxh = 0.0;
    let mut mean_dxh_xh = 0.0;
    for i in 0..d {
        let dxh = dy[i] * g[i];
        mean_dxh += dxh;
        mean_dxh_xh += dxh * xhat[i];
    }
    mean_dxh /= d as f64;
    mean_dxh_xh /= d as f64;
    for i in 0..d {
        let dxh = dy[i] * g[i];
        dx[i] += rstd * (dxh - mean_dxh - xhat[i] * mean_dxh_xh);
    }
    if let Some((dgv, dbv)) = dg {
        for i in 0..d {
            dgv[i] += dy[i] * xhat[i];
            dbv[i] += dy[i];
        }
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// Index of the largest logit; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

impl ModelState {
    /// Deterministic random initialization.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut fill = |r: &Range<usize>, std: f64, params: &mut Vec<f64>| {
            for p in &mut params[r.clone()] {
                let z: f64 = rng.sample(StandardNormal);
                *p = z * std;
            }
        };
        let d = config.d_model as f64;
        let m = config.d_mlp as f64;
        let resid_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        fill(&layout.tok_emb, 1.0, &mut params);
        fill(&layout.pos_emb, 0.3, &mut params);
        for l in &layout.layers {
            fill(&l.wq, 1.0 / d.sqrt(), &mut params);
            fill(&l.wk, 1.0 / d.sqrt(), &mut params);
            fill(&l.wv, 1.0 / d.sqrt(), &mut params);
            fill(&l.wo, resid_scale / d.sqrt(), &mut params);
            fill(&l.w_in, 1.0 / d.sqrt(), &mut params);
            fill(&l.w_out, resid_scale / m.sqrt(), &mut params);
            params[l.ln1_g.clone()].fill(1.0);
            params[l.ln2_g.clone()].fill(1.0);
        }
        params[layout.lnf_g.clone()].fill(1.0);
        fill(&layout.unembed, 1.0 / d.sqrt(), &mut params);
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    pub fn from_params(config: ModelConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(Error::DimensionMismatch(format!(
                "expected {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Down-projection `W_ℓ` (row-major `d_model × d_mlp`).
    pub fn down_proj(&self, layer: usize) -> &[f64] {
        &self.params[self.layout.layers[layer].w_out.clone()]
    }

    pub fn down_proj_mut(&mut self, layer: usize) -> &mut [f64] {
        let r = self.layout.layers[layer].w_out.clone();
        &mut self.params[r]
    }

    /// `W_ℓ` as a dense matrix.
    pub fn down_proj_matrix(&self, layer: usize) -> crate::linalg::Matrix {
        crate::linalg::Matrix::from_row_slice(
            self.config.d_model,
            self.config.d_mlp,
            self.down_proj(layer),
        )
    }

    /// `W_ℓ ← W_ℓ + Δ`.
    pub fn add_to_down_proj(&mut self, layer: usize, delta: &crate::linalg::Matrix) -> Result<()> {
        let (d, m) = (self.config.d_model, self.config.d_mlp);
        if delta.shape() != (d, m) {
            return Err(Error::DimensionMismatch(format!(
                "update is {:?}, expected ({d}, {m})",
                delta.shape()
            )));
        }
        crate::linalg::ensure_finite(delta, "weight update")?;
        let w = self.down_proj_mut(layer);
        for i in 0..d {
            for j in 0..m {
                w[i * m + j] += delta[(i, j)];
            }
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::InvalidInput("empty prompt".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::Index(format!(
                "prompt length {} exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(t) = tokens
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            return Err(Error::Vocabulary(format!("token id {t}")));
        }
        Ok(())
    }

    fn check_patch(&self, tokens: &[TokenId], patch: &Patch) -> Result<()> {
        if patch.layer >= self.config.n_layers {
            return Err(Error::Index(format!("layer {} out of range", patch.layer)));
        }
        if patch.position >= tokens.len() {
            return Err(Error::Index(format!(
                "position {} out of range for prompt of length {}",
                patch.position,
                tokens.len()
            )));
        }
        if patch.delta.len() != self.config.d_model {
            return Err(Error::DimensionMismatch(format!(
                "patch has {} entries, expected {}",
                patch.delta.len(),
                self.config.d_model
            )));
        }
        crate::linalg::ensure_finite_vec(&patch.delta, "patch")
    }

    fn forward_cached(
        &self,
        tokens: &[TokenId],
        patch: Option<&Patch>,
        at: LogitsAt,
    ) -> ForwardCache {
        let c = &self.config;
        let (d, m, nh, dh) = (c.d_model, c.d_mlp, c.n_heads, c.head_dim());
        let t_len = tokens.len();
        let p = &self.params;
        let lay = &self.layout;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut x = vec![0.0; t_len * d];
        for (t, &tok) in tokens.iter().enumerate() {
            let e = &p[lay.tok_emb.start + tok as usize * d..][..d];
            let pe = &p[lay.pos_emb.start + t * d..][..d];
            for i in 0..d {
                x[t * d + i] = e[i] + pe[i];
            }
        }

        let mut layers = Vec::with_capacity(c.n_layers);
        for (li, l) in lay.layers.iter().enumerate() {
            let mut ln1 = LnCache {
                xhat: vec![0.0; t_len * d],
                rstd: vec![0.0; t_len],
            };
            let mut a = vec![0.0; t_len * d];
            layer_norm_rows(&x, d, &p[l.ln1_g.clone()], &p[l.ln1_b.clone()], &mut a, &mut ln1);
            let mut q = vec![0.0; t_len * d];
            let mut k = vec![0.0; t_len * d];
            let mut v = vec![0.0; t_len * d];
            for t in 0..t_len {
                let at_ = &a[t * d..(t + 1) * d];
                matvec(&p[l.wq.clone()], d, at_, &mut q[t * d..(t + 1) * d]);
                matvec(&p[l.wk.clone()], d, at_, &mut k[t * d..(t + 1) * d]);
                matvec(&p[l.wv.clone()], d, at_, &mut v[t * d..(t + 1) * d]);
            }
            let mut probs = vec![0.0; nh * t_len * t_len];
            let mut z = vec![0.0; t_len * d];
            for h in 0..nh {
                let off = h * dh;
                for t in 0..t_len {
                    let lo = if li < c.mixing_start { t } else { 0 };
                    let qt = &q[t * d + off..t * d + off + dh];
                    let row = &mut probs[(h * t_len + t) * t_len..(h * t_len + t + 1) * t_len];
                    let mut max = f64::NEG_INFINITY;
                    for j in lo..=t {
                        let kj = &k[j * d + off..j * d + off + dh];
                        let s = qt.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                        row[j] = s;
                        max = max.max(s);
                    }
                    let mut sum = 0.0;
                    for rj in row[lo..=t].iter_mut() {
                        *rj = (*rj - max).exp();
                        sum += *rj;
                    }
                    for rj in row[lo..=t].iter_mut() {
                        *rj /= sum;
                    }
                    let zt = &mut z[t * d + off..t * d + off + dh];
                    for j in lo..=t {
                        let pj = row[j];
                        let vj = &v[j * d + off..j * d + off + dh];
                        for (zz, vv) in zt.iter_mut().zip(vj) {
                            *zz += pj * vv;
                        }
                    }
                }
            }
            let mut attn_out = vec![0.0; d];
            for t in 0..t_len {
                matvec(&p[l.wo.clone()], d, &z[t * d..(t + 1) * d], &mut attn_out);
                for i in 0..d {
                    x[t * d + i] += attn_out[i];
                }
            }
            let mut ln2 = LnCache {
                xhat: vec![0.0; t_len * d],
                rstd: vec![0.0; t_len],
            };
            let mut b = vec![0.0; t_len * d];
            layer_norm_rows(&x, d, &p[l.ln2_g.clone()], &p[l.ln2_b.clone()], &mut b, &mut ln2);
            let mut pre = vec![0.0; t_len * m];
            let mut key = vec![0.0; t_len * m];
            let mut mlp_out = vec![0.0; t_len * d];
            for t in 0..t_len {
                let pt = &mut pre[t * m..(t + 1) * m];
                matvec_bias(&p[l.w_in.clone()], &p[l.b_in.clone()], d, &b[t * d..(t + 1) * d], pt);
                let kt = &mut key[t * m..(t + 1) * m];
                for (kk, pp) in kt.iter_mut().zip(pt.iter()) {
                    *kk = gelu(*pp);
                }
                let ot = &mut mlp_out[t * d..(t + 1) * d];
                matvec_bias(&p[l.w_out.clone()], &p[l.b_out.clone()], m, kt, ot);
                for i in 0..d {
                    x[t * d + i] += ot[i];
                }
            }
            if let Some(pt) = patch.filter(|pt| pt.layer == li) {
                for i in 0..d {
                    x[pt.position * d + i] += pt.delta[i];
                }
            }
            layers.push(LayerCache {
                ln1,
                a,
                q,
                k,
                v,
                probs,
                z,
                ln2,
                b,
                pre,
                key,
                mlp_out,
                out: x.clone(),
            });
        }

        let mut lnf = LnCache {
            xhat: vec![0.0; t_len * d],
            rstd: vec![0.0; t_len],
        };
        let mut f = vec![0.0; t_len * d];
        layer_norm_rows(&x, d, &p[lay.lnf_g.clone()], &p[lay.lnf_b.clone()], &mut f, &mut lnf);
        let positions: Vec<usize> = match at {
            LogitsAt::Last => vec![t_len - 1],
            LogitsAt::All => (0..t_len).collect(),
        };
        let logits = positions
            .into_iter()
            .map(|t| {
                let mut lg = vec![0.0; c.vocab_size];
                matvec(&p[lay.unembed.clone()], d, &f[t * d..(t + 1) * d], &mut lg);
                (t, lg)
            })
            .collect();
        ForwardCache {
            tokens: tokens.to_vec(),
            layers,
            lnf,
            f,
            logits,
        }
    }

    /// Backward pass. `dlogits` pairs positions with loss gradients. When
    /// `grads` is given, parameter gradients are accumulated into it. The
    /// returned vector is the gradient w.r.t. the residual after block
    /// `probe.0` at position `probe.1`, if a probe was requested; with no
    /// parameter gradients requested the pass stops at that layer.
    fn backward(
        &self,
        cache: &ForwardCache,
        dlogits: &[(usize, Vec<f64>)],
        mut grads: Option<&mut [f64]>,
        probe: Option<(usize, usize)>,
    ) -> Option<Vec<f64>> {
        let c = &self.config;
        let (d, m, nh, dh) = (c.d_model, c.d_mlp, c.n_heads, c.head_dim());
        let t_len = cache.tokens.len();
        let p = &self.params;
        let lay = &self.layout;
        let scale = 1.0 / (dh as f64).sqrt();

        // unembedding and final norm
        let mut df = vec![0.0; t_len * d];
        for (t, dl) in dlogits {
            matvec_t_acc(&p[lay.unembed.clone()], d, dl, &mut df[t * d..(t + 1) * d]);
            if let Some(g) = grads.as_deref_mut() {
                outer_acc(
                    &mut g[lay.unembed.clone()],
                    d,
                    dl,
                    &cache.f[t * d..(t + 1) * d],
                );
            }
        }
        let mut dx = vec![0.0; t_len * d];
        {
            let gf = &p[lay.lnf_g.clone()];
            for t in 0..t_len {
                let dy = &df[t * d..(t + 1) * d];
                if dy.iter().all(|v| *v == 0.0) {
                    continue;
                }
                let xh = &cache.lnf.xhat[t * d..(t + 1) * d];
                let dxr = &mut dx[t * d..(t + 1) * d];
                match grads.as_deref_mut() {
                    Some(g) => {
                        let (lo, hi) = g.split_at_mut(lay.lnf_b.start);
                        let dg = &mut lo[lay.lnf_g.clone()];
                        let db = &mut hi[..d];
                        layer_norm_back_row(dy, xh, cache.lnf.rstd[t], gf, dxr, Some((dg, db)));
                    }
                    None => layer_norm_back_row(dy, xh, cache.lnf.rstd[t], gf, dxr, None),
                }
            }
        }

        let mut probe_grad = None;
        for li in (0..c.n_layers).rev() {
            if let Some((pl, pp)) = probe {
                if pl == li {
                    probe_grad = Some(dx[pp * d..(pp + 1) * d].to_vec());
                    if grads.is_none() {
                        return probe_grad;
                    }
                }
            }
            let l = &lay.layers[li];
            let lc = &cache.layers[li];

            // MLP
            let mut db_ln2 = vec![0.0; t_len * d];
            let mut dkey = vec![0.0; m];
            let mut dpre = vec![0.0; m];
            for t in 0..t_len {
                let dy = &dx[t * d..(t + 1) * d];
                dkey.fill(0.0);
                matvec_t_acc(&p[l.w_out.clone()], m, dy, &mut dkey);
                for j in 0..m {
                    dpre[j] = dkey[j] * gelu_grad(lc.pre[t * m + j]);
                }
                matvec_t_acc(&p[l.w_in.clone()], d, &dpre, &mut db_ln2[t * d..(t + 1) * d]);
                if let Some(g) = grads.as_deref_mut() {
                    outer_acc(&mut g[l.w_out.clone()], m, dy, &lc.key[t * m..(t + 1) * m]);
                    for (gb, v) in g[l.b_out.clone()].iter_mut().zip(dy) {
                        *gb += v;
                    }
                    outer_acc(&mut g[l.w_in.clone()], d, &dpre, &lc.b[t * d..(t + 1) * d]);
                    for (gb, v) in g[l.b_in.clone()].iter_mut().zip(&dpre) {
                        *gb += v;
                    }
                }
            }
            for t in 0..t_len {
                let dy = &db_ln2[t * d..(t + 1) * d];
                let xh = &lc.ln2.xhat[t * d..(t + 1) * d];
                let g2 = &p[l.ln2_g.clone()];
                let dxr = &mut dx[t * d..(t + 1) * d];
                match grads.as_deref_mut() {
                    Some(g) => {
                        let (lo, hi) = g.split_at_mut(l.ln2_b.start);
                        layer_norm_back_row(
                            dy,
                            xh,
                            lc.ln2.rstd[t],
                            g2,
                            dxr,
                            Some((&mut lo[l.ln2_g.clone()], &mut hi[..d])),
                        );
                    }
                    None => layer_norm_back_row(dy, xh, lc.ln2.rstd[t], g2, dxr, None),
                }
            }

            // attention
            let mut dz = vec![0.0; t_len * d];
            for t in 0..t_len {
                let dy = &dx[t * d..(t + 1) * d];
                matvec_t_acc(&p[l.wo.clone()], d, dy, &mut dz[t * d..(t + 1) * d]);
                if let Some(g) = grads.as_deref_mut() {
                    outer_acc(&mut g[l.wo.clone()], d, dy, &lc.z[t * d..(t + 1) * d]);
                }
            }
            let mut dq = vec![0.0; t_len * d];
            let mut dk = vec![0.0; t_len * d];
            let mut dv = vec![0.0; t_len * d];
            let mut dp = vec![0.0; t_len];
            for h in 0..nh {
                let off = h * dh;
                for t in 0..t_len {
                    let lo = if li < c.mixing_start { t } else { 0 };
                    let row = &lc.probs[(h * t_len + t) * t_len..(h * t_len + t + 1) * t_len];
                    let dzt = &dz[t * d + off..t * d + off + dh];
                    let mut dot_pdp = 0.0;
                    for j in lo..=t {
                        let vj = &lc.v[j * d + off..j * d + off + dh];
                        dp[j] = dzt.iter().zip(vj).map(|(a, b)| a * b).sum();
                        dot_pdp += row[j] * dp[j];
                        let dvj = &mut dv[j * d + off..j * d + off + dh];
                        for (a, b) in dvj.iter_mut().zip(dzt) {
                            *a += row[j] * b;
                        }
                    }
                    for j in lo..=t {
                        let ds = row[j] * (dp[j] - dot_pdp) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        for i in 0..dh {
                            dq[t * d + off + i] += ds * lc.k[j * d + off + i];
                            dk[j * d + off + i] += ds * lc.q[t * d + off + i];
                        }
                    }
                }
            }
            let mut da = vec![0.0; d];
            for t in 0..t_len {
                da.fill(0.0);
                let (dqt, dkt, dvt) = (
                    &dq[t * d..(t + 1) * d],
                    &dk[t * d..(t + 1) * d],
                    &dv[t * d..(t + 1) * d],
                );
                matvec_t_acc(&p[l.wq.clone()], d, dqt, &mut da);
                matvec_t_acc(&p[l.wk.clone()], d, dkt, &mut da);
                matvec_t_acc(&p[l.wv.clone()], d, dvt, &mut da);
                let at_ = &lc.a[t * d..(t + 1) * d];
                if let Some(g) = grads.as_deref_mut() {
                    outer_acc(&mut g[l.wq.clone()], d, dqt, at_);
                    outer_acc(&mut g[l.wk.clone()], d, dkt, at_);
                    outer_acc(&mut g[l.wv.clone()], d, dvt, at_);
                }
                let xh = &lc.ln1.xhat[t * d..(t + 1) * d];
                let g1 = &p[l.ln1_g.clone()];
                let dxr = &mut dx[t * d..(t + 1) * d];
                match grads.as_deref_mut() {
                    Some(g) => {
                        let (lo, hi) = g.split_at_mut(l.ln1_b.start);
                        layer_norm_back_row(
                            &da,
                            xh,
                            lc.ln1.rstd[t],
                            g1,
                            dxr,
                            Some((&mut lo[l.ln1_g.clone()], &mut hi[..d])),
                        );
                    }
                    None => layer_norm_back_row(&da, xh, lc.ln1.rstd[t], g1, dxr, None),
                }
            }
        }

        if let Some(g) = grads {
            for (t, &tok) in cache.tokens.iter().enumerate() {
                let dxr = &dx[t * d..(t + 1) * d];
                let e = &mut g[lay.tok_emb.start + tok as usize * d..][..d];
                for i in 0..d {
                    e[i] += dxr[i];
                }
                let pe = &mut g[lay.pos_emb.start + t * d..][..d];
                for i in 0..d {
                    pe[i] += dxr[i];
                }
            }
        }
        probe_grad
    }

    /// Logits at the final position.
    pub fn logits(&self, tokens: &[TokenId]) -> Result<Vec<f64>> {
        self.check_tokens(tokens)?;
        let mut cache = self.forward_cached(tokens, None, LogitsAt::Last);
        Ok(cache.logits.pop().expect("one position").1)
    }

    /// Logits at every position (teacher forcing).
    pub fn logits_all(&self, tokens: &[TokenId]) -> Result<Vec<Vec<f64>>> {
        self.check_tokens(tokens)?;
        let cache = self.forward_cached(tokens, None, LogitsAt::All);
        Ok(cache.logits.into_iter().map(|(_, l)| l).collect())
    }

    pub fn forward_trace(&self, tokens: &[TokenId]) -> Result<StreamTrace> {
        self.check_tokens(tokens)?;
        Ok(self.trace_from_cache(self.forward_cached(tokens, None, LogitsAt::Last)))
    }

    pub fn forward_trace_patched(&self, tokens: &[TokenId], patch: &Patch) -> Result<StreamTrace> {
        self.check_tokens(tokens)?;
        self.check_patch(tokens, patch)?;
        Ok(self.trace_from_cache(self.forward_cached(tokens, Some(patch), LogitsAt::Last)))
    }

    fn trace_from_cache(&self, mut cache: ForwardCache) -> StreamTrace {
        let (d, m) = (self.config.d_model, self.config.d_mlp);
        let split = |v: &[f64], w: usize| v.chunks_exact(w).map(<[f64]>::to_vec).collect();
        StreamTrace {
            residual: cache.layers.iter().map(|l| split(&l.out, d)).collect(),
            up_activation: cache.layers.iter().map(|l| split(&l.key, m)).collect(),
            mlp_out: cache.layers.iter().map(|l| split(&l.mlp_out, d)).collect(),
            logits: cache.logits.pop().expect("one position").1,
        }
    }

    /// Logits at the final position with `delta` added to the residual
    /// stream after block `layer` at `position`.
    pub fn forward_with_stream_patch(
        &self,
        tokens: &[TokenId],
        layer: usize,
        position: usize,
        delta: &[f64],
    ) -> Result<Vec<f64>> {
        let patch = Patch {
            layer,
            position,
            delta: delta.to_vec(),
        };
        self.check_tokens(tokens)?;
        self.check_patch(tokens, &patch)?;
        let mut cache = self.forward_cached(tokens, Some(&patch), LogitsAt::Last);
        Ok(cache.logits.pop().expect("one position").1)
    }

    /// Loss value and its gradient with respect to the patch `delta`.
    /// `loss` maps final-position logits to `(value, ∂value/∂logits)`.
    pub fn grad_wrt_patch(
        &self,
        tokens: &[TokenId],
        layer: usize,
        position: usize,
        delta: &[f64],
        loss: &dyn Fn(&[f64]) -> (f64, Vec<f64>),
    ) -> Result<(f64, Vec<f64>)> {
        let patch = Patch {
            layer,
            position,
            delta: delta.to_vec(),
        };
        self.check_tokens(tokens)?;
        self.check_patch(tokens, &patch)?;
        let cache = self.forward_cached(tokens, Some(&patch), LogitsAt::Last);
        let (t, logits) = &cache.logits[0];
        let (value, dl) = loss(logits);
        let grad = self
            .backward(&cache, &[(*t, dl)], None, Some((layer, position)))
            .expect("probe requested");
        Ok((value, grad))
    }

    /// Cross-entropy of `target` at the final position; accumulates parameter
    /// gradients into `grads` and returns the loss.
    pub fn loss_and_grad(&self, tokens: &[TokenId], target: TokenId, grads: &mut [f64]) -> Result<f64> {
        self.check_tokens(tokens)?;
        let cache = self.forward_cached(tokens, None, LogitsAt::Last);
        let (t, logits) = &cache.logits[0];
        let mut probs = softmax(logits);
        let loss = -probs[target as usize].ln();
        probs[target as usize] -= 1.0;
        self.backward(&cache, &[(*t, probs)], Some(grads), None);
        Ok(loss)
    }

    /// Greedy continuation of `prompt` by `n_new` tokens (stops at the
    /// context limit). Uses an incremental per-layer key/value cache.
    pub fn generate_greedy(&self, prompt: &[TokenId], n_new: usize) -> Result<Vec<TokenId>> {
        self.check_tokens(prompt)?;
        let mut dec = Decoder::new(self);
        let mut logits = Vec::new();
        for &t in prompt {
            logits = dec.step(t);
        }
        let mut out = Vec::with_capacity(n_new);
        for _ in 0..n_new {
            if dec.len() >= self.config.max_seq_len {
                break;
            }
            let next = argmax(&logits) as TokenId;
            out.push(next);
            if dec.len() + 1 > self.config.max_seq_len || out.len() == n_new {
                break;
            }
            logits = dec.step(next);
        }
        Ok(out)
    }
}

/// Incremental decoder state: keys and values of previous positions.
struct Decoder<'a> {
    model: &'a ModelState,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    pos: usize,
}

impl<'a> Decoder<'a> {
    fn new(model: &'a ModelState) -> Self {
        let n = model.config.n_layers;
        Self {
            model,
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            pos: 0,
        }
    }

    fn len(&self) -> usize {
        self.pos
    }

    fn step(&mut self, token: TokenId) -> Vec<f64> {
        let mdl = self.model;
        let c = &mdl.config;
        let (d, m, nh, dh) = (c.d_model, c.d_mlp, c.n_heads, c.head_dim());
        let p = &mdl.params;
        let lay = &mdl.layout;
        let scale = 1.0 / (dh as f64).sqrt();
        let t = self.pos;
        let mut x: Vec<f64> = (0..d)
            .map(|i| p[lay.tok_emb.start + token as usize * d + i] + p[lay.pos_emb.start + t * d + i])
            .collect();
        let mut scratch = LnCache {
            xhat: vec![0.0; d],
            rstd: vec![0.0; 1],
        };
        for (li, l) in lay.layers.iter().enumerate() {
            let mut a = vec![0.0; d];
            layer_norm_rows(&x, d, &p[l.ln1_g.clone()], &p[l.ln1_b.clone()], &mut a, &mut scratch);
            let mut q = vec![0.0; d];
            let mut k = vec![0.0; d];
            let mut v = vec![0.0; d];
            matvec(&p[l.wq.clone()], d, &a, &mut q);
            matvec(&p[l.wk.clone()], d, &a, &mut k);
            matvec(&p[l.wv.clone()], d, &a, &mut v);
            self.keys[li].extend_from_slice(&k);
            self.values[li].extend_from_slice(&v);
            let ks = &self.keys[li];
            let vs = &self.values[li];
            let mut z = vec![0.0; d];
            let mut row = vec![0.0; t + 1];
            let lo = if li < c.mixing_start { t } else { 0 };
            for h in 0..nh {
                let off = h * dh;
                let mut max = f64::NEG_INFINITY;
                for j in lo..=t {
                    let s = q[off..off + dh]
                        .iter()
                        .zip(&ks[j * d + off..j * d + off + dh])
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        * scale;
                    row[j] = s;
                    max = max.max(s);
                }
                let mut sum = 0.0;
                for r in row[lo..].iter_mut() {
                    *r = (*r - max).exp();
                    sum += *r;
                }
                for r in row[lo..].iter_mut() {
                    *r /= sum;
                }
                for j in lo..=t {
                    for i in 0..dh {
                        z[off + i] += row[j] * vs[j * d + off + i];
                    }
                }
            }
            let mut o = vec![0.0; d];
            matvec(&p[l.wo.clone()], d, &z, &mut o);
            for i in 0..d {
                x[i] += o[i];
            }
            let mut b = vec![0.0; d];
            layer_norm_rows(&x, d, &p[l.ln2_g.clone()], &p[l.ln2_b.clone()], &mut b, &mut scratch);
            let mut pre = vec![0.0; m];
            matvec_bias(&p[l.w_in.clone()], &p[l.b_in.clone()], d, &b, &mut pre);
            let key: Vec<f64> = pre.iter().map(|v| gelu(*v)).collect();
            let mut out = vec![0.0; d];
            matvec_bias(&p[l.w_out.clone()], &p[l.b_out.clone()], m, &key, &mut out);
            for i in 0..d {
                x[i] += out[i];
            }
        }
        let mut f = vec![0.0; d];
        layer_norm_rows(&x, d, &p[lay.lnf_g.clone()], &p[lay.lnf_b.clone()], &mut f, &mut scratch);
        let mut logits = vec![0.0; c.vocab_size];
        matvec(&p[lay.unembed.clone()], d, &f, &mut logits);
        self.pos += 1;
        logits
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CheckpointTensor {
    name: String,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    schema_version: u32,
    config: ModelConfig,
    tensors: Vec<CheckpointTensor>,
}

impl ModelState {
    pub fn to_json(&self) -> Result<String> {
        let tensors = self
            .layout
            .named()
            .into_iter()
            .map(|(name, r)| CheckpointTensor {
                name,
                values: self.params[r].to_vec(),
            })
            .collect();
        let ck = Checkpoint {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            config: self.config.clone(),
            tensors,
        };
        Ok(serde_json::to_string(&ck)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::InvalidInput(format!(
                "unsupported checkpoint schema {}",
                ck.schema_version
            )));
        }
        ck.config.validate()?;
        let layout = Layout::new(&ck.config);
        let mut params = vec![0.0; layout.total];
        let named = layout.named();
        if named.len() != ck.tensors.len() {
            return Err(Error::InvalidInput("checkpoint tensor count mismatch".into()));
        }
        for ((name, r), t) in named.into_iter().zip(ck.tensors) {
            if name != t.name || r.len() != t.values.len() {
                return Err(Error::InvalidInput(format!("bad checkpoint tensor `{}`", t.name)));
            }
            params[r].copy_from_slice(&t.values);
        }
        Self::from_params(ck.config, params)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelState {
        ModelState::init(ModelConfig {
            n_layers: 2,
            d_model: 8,
            d_mlp: 16,
            n_heads: 2,
            vocab_size: 11,
            max_seq_len: 12,
            edit_layers: vec![0, 1],
            mixing_start: 1,
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = tiny().config;
        c.edit_layers = vec![1, 0];
        assert!(c.validate().is_err());
        c.edit_layers = vec![2];
        assert!(c.validate().is_err());
        c.edit_layers = vec![];
        assert!(c.validate().is_err());
        c.edit_layers = vec![0];
        c.d_mlp = 4;
        assert!(c.validate().is_err());
    }

    #[test]
    fn single_token_trace() {
        let m = tiny();
        let tr = m.forward_trace(&[4]).unwrap();
        assert_eq!(tr.residual[0].len(), 1);
        assert_eq!(tr.up_activation[1][0].len(), 16);
        assert_eq!(tr.logits.len(), 11);
    }

    #[test]
    fn errors() {
        let m = tiny();
        assert!(matches!(m.forward_trace(&[99]), Err(Error::Vocabulary(_))));
        assert!(matches!(
            m.forward_with_stream_patch(&[1, 2], 0, 5, &[0.0; 8]),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn decoder_matches_full_forward() {
        let m = tiny();
        let prompt = [1, 5, 3, 7];
        let full = m.logits_all(&prompt).unwrap();
        let mut dec = Decoder::new(&m);
        for (i, &t) in prompt.iter().enumerate() {
            let l = dec.step(t);
            for (a, b) in l.iter().zip(&full[i]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = tiny();
        let back = ModelState::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.logits(&[1, 2, 3]).unwrap(), m.logits(&[1, 2, 3]).unwrap());
    }

    #[test]
    fn gelu_derivative_matches_fd() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn parameter_gradients_match_fd() {
        let m = tiny();
        let tokens = [2, 9, 4, 1];
        let target = 6;
        let mut g = vec![0.0; m.params.len()];
        m.loss_and_grad(&tokens, target, &mut g).unwrap();
        let mut probe = m.clone();
        let loss = |s: &ModelState| {
            let l = s.logits(&tokens).unwrap();
            -log_softmax(&l)[target as usize]
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut worst: f64 = 0.0;
        for (_, r) in m.layout().named() {
            for _ in 0..3 {
                let i = rng.random_range(r.clone());
                let h = 1e-5;
                let orig = probe.params[i];
                probe.params[i] = orig + h;
                let up = loss(&probe);
                probe.params[i] = orig - h;
                let down = loss(&probe);
                probe.params[i] = orig;
                let fd = (up - down) / (2.0 * h);
                let err = (fd - g[i]).abs() / (fd.abs().max(g[i].abs()).max(1e-6));
                if fd.abs().max(g[i].abs()) > 1e-7 {
                    worst = worst.max(err);
                }
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }
}
