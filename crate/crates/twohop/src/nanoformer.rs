//! Minimal decoder-only pre-norm transformer with a hand-derived backward
//! pass, at toy scale.
//!
//! Residual wiring per block is `Z = X + MHA(LN(X))`, `X' = Z + MLP(LN(Z))`
//! with causal multi-head attention, a GELU MLP of hidden width `4*d_m`, a
//! final LayerNorm, and an LM head tied to the token embedding. Supervision
//! is cross-entropy on the target token at the final input position only.

use crate::embmlp::{InitPolicy, TraceRecord};
use crate::taskgen::{Dataset, Example};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::{Read as _, Write as _};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NanoError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("sequence of length {len} exceeds context {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token {0} outside vocabulary")]
    UnknownToken(u32),
    #[error("non-finite loss encountered")]
    NumericalOverflow,
    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub d_vocab: usize,
    pub d_m: usize,
    pub d_k: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    /// Context length T.
    pub context: usize,
    pub init: InitPolicy,
    pub tie_embeddings: bool,
}

impl Default for TransformerConfig {
    /// Toy-scale defaults with the vocabulary left unset (0); callers fill
    /// `d_vocab` from the dataset layout before use.
    fn default() -> Self {
        Self::toy(0)
    }
}

impl TransformerConfig {
    /// Toy-scale defaults for a given vocabulary size.
    pub fn toy(d_vocab: usize) -> Self {
        Self {
            d_vocab,
            d_m: 64,
            d_k: 32,
            n_heads: 2,
            n_layers: 2,
            context: 3,
            init: InitPolicy::Standard,
            tie_embeddings: true,
        }
    }

    pub fn validate(&self) -> Result<(), NanoError> {
        if self.d_vocab == 0 || self.d_m == 0 || self.d_k == 0 || self.n_heads == 0 {
            return Err(NanoError::InvalidConfig(
                "vocabulary and widths must be positive".into(),
            ));
        }
        if self.n_layers == 0 {
            return Err(NanoError::InvalidConfig("need at least one layer".into()));
        }
        if self.context < 3 {
            return Err(NanoError::InvalidConfig("context must be >= 3".into()));
        }
        Ok(())
    }

    fn d_attn(&self) -> usize {
        self.n_heads * self.d_k
    }
}

/// One pre-norm block. All tensors are stored as matrices; vectors (LN
/// parameters and biases) are 1 x dim.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_scale: DMatrix<f64>,
    pub ln1_shift: DMatrix<f64>,
    pub w_q: DMatrix<f64>,
    pub b_q: DMatrix<f64>,
    pub w_k: DMatrix<f64>,
    pub b_k: DMatrix<f64>,
    pub w_v: DMatrix<f64>,
    pub b_v: DMatrix<f64>,
    pub w_o: DMatrix<f64>,
    pub b_o: DMatrix<f64>,
    pub ln2_scale: DMatrix<f64>,
    pub ln2_shift: DMatrix<f64>,
    pub w_up: DMatrix<f64>,
    pub b_up: DMatrix<f64>,
    pub w_down: DMatrix<f64>,
    pub b_down: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerParams {
    pub tok_emb: DMatrix<f64>,
    pub pos_emb: DMatrix<f64>,
    pub blocks: Vec<BlockParams>,
    pub lnf_scale: DMatrix<f64>,
    pub lnf_shift: DMatrix<f64>,
    /// Present only when embeddings are untied.
    pub head: Option<DMatrix<f64>>,
}

impl TransformerParams {
    pub fn zeros(config: &TransformerConfig) -> Self {
        let (d_m, d_a) = (config.d_m, config.d_attn());
        let block = || BlockParams {
            ln1_scale: DMatrix::zeros(1, d_m),
            ln1_shift: DMatrix::zeros(1, d_m),
            w_q: DMatrix::zeros(d_m, d_a),
            b_q: DMatrix::zeros(1, d_a),
            w_k: DMatrix::zeros(d_m, d_a),
            b_k: DMatrix::zeros(1, d_a),
            w_v: DMatrix::zeros(d_m, d_a),
            b_v: DMatrix::zeros(1, d_a),
            w_o: DMatrix::zeros(d_a, d_m),
            b_o: DMatrix::zeros(1, d_m),
            ln2_scale: DMatrix::zeros(1, d_m),
            ln2_shift: DMatrix::zeros(1, d_m),
            w_up: DMatrix::zeros(d_m, 4 * d_m),
            b_up: DMatrix::zeros(1, 4 * d_m),
            w_down: DMatrix::zeros(4 * d_m, d_m),
            b_down: DMatrix::zeros(1, d_m),
        };
        Self {
            tok_emb: DMatrix::zeros(config.d_vocab, d_m),
            pos_emb: DMatrix::zeros(config.context, d_m),
            blocks: (0..config.n_layers).map(|_| block()).collect(),
            lnf_scale: DMatrix::zeros(1, d_m),
            lnf_shift: DMatrix::zeros(1, d_m),
            head: if config.tie_embeddings {
                None
            } else {
                Some(DMatrix::zeros(d_m, config.d_vocab))
            },
        }
    }

    /// Visit every tensor in a fixed order. The boolean marks tensors
    /// subject to weight decay (weight matrices and embeddings; LayerNorm
    /// parameters and biases are exempt).
    pub fn for_each_tensor(&self, mut f: impl FnMut(String, bool, &DMatrix<f64>)) {
        f("tok_emb".into(), true, &self.tok_emb);
        f("pos_emb".into(), true, &self.pos_emb);
        for (l, b) in self.blocks.iter().enumerate() {
            f(format!("blocks.{l}.ln1_scale"), false, &b.ln1_scale);
            f(format!("blocks.{l}.ln1_shift"), false, &b.ln1_shift);
            f(format!("blocks.{l}.w_q"), true, &b.w_q);
            f(format!("blocks.{l}.b_q"), false, &b.b_q);
            f(format!("blocks.{l}.w_k"), true, &b.w_k);
            f(format!("blocks.{l}.b_k"), false, &b.b_k);
            f(format!("blocks.{l}.w_v"), true, &b.w_v);
            f(format!("blocks.{l}.b_v"), false, &b.b_v);
            f(format!("blocks.{l}.w_o"), true, &b.w_o);
            f(format!("blocks.{l}.b_o"), false, &b.b_o);
            f(format!("blocks.{l}.ln2_scale"), false, &b.ln2_scale);
            f(format!("blocks.{l}.ln2_shift"), false, &b.ln2_shift);
            f(format!("blocks.{l}.w_up"), true, &b.w_up);
            f(format!("blocks.{l}.b_up"), false, &b.b_up);
            f(format!("blocks.{l}.w_down"), true, &b.w_down);
            f(format!("blocks.{l}.b_down"), false, &b.b_down);
        }
        f("lnf_scale".into(), false, &self.lnf_scale);
        f("lnf_shift".into(), false, &self.lnf_shift);
        if let Some(h) = &self.head {
            f("head".into(), true, h);
        }
    }

    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(String, bool, &mut DMatrix<f64>)) {
        f("tok_emb".into(), true, &mut self.tok_emb);
        f("pos_emb".into(), true, &mut self.pos_emb);
        for (l, b) in self.blocks.iter_mut().enumerate() {
            f(format!("blocks.{l}.ln1_scale"), false, &mut b.ln1_scale);
            f(format!("blocks.{l}.ln1_shift"), false, &mut b.ln1_shift);
            f(format!("blocks.{l}.w_q"), true, &mut b.w_q);
            f(format!("blocks.{l}.b_q"), false, &mut b.b_q);
            f(format!("blocks.{l}.w_k"), true, &mut b.w_k);
            f(format!("blocks.{l}.b_k"), false, &mut b.b_k);
            f(format!("blocks.{l}.w_v"), true, &mut b.w_v);
            f(format!("blocks.{l}.b_v"), false, &mut b.b_v);
            f(format!("blocks.{l}.w_o"), true, &mut b.w_o);
            f(format!("blocks.{l}.b_o"), false, &mut b.b_o);
            f(format!("blocks.{l}.ln2_scale"), false, &mut b.ln2_scale);
            f(format!("blocks.{l}.ln2_shift"), false, &mut b.ln2_shift);
            f(format!("blocks.{l}.w_up"), true, &mut b.w_up);
            f(format!("blocks.{l}.b_up"), false, &mut b.b_up);
            f(format!("blocks.{l}.w_down"), true, &mut b.w_down);
            f(format!("blocks.{l}.b_down"), false, &mut b.b_down);
        }
        f("lnf_scale".into(), false, &mut self.lnf_scale);
        f("lnf_shift".into(), false, &mut self.lnf_shift);
        if let Some(h) = &mut self.head {
            f("head".into(), true, h);
        }
    }
}

/// Residual-stream snapshots: after the embedding and after each block.
#[derive(Debug, Clone)]
pub struct HiddenStates {
    pub d_m: usize,
    pub len: usize,
    /// `n_layers + 1` row-major buffers of shape `len x d_m`.
    pub layers: Vec<Vec<f64>>,
}

impl HiddenStates {
    pub fn at(&self, layer: usize, pos: usize) -> &[f64] {
        &self.layers[layer][pos * self.d_m..(pos + 1) * self.d_m]
    }
}

/// Initialize parameters for `config`, drawing per-matrix Gaussians whose
/// scale follows the init policy with the matrix's input dimension (row
/// count). The positional table is the exception: its row count is the tiny
/// context length, so its scale is taken from the width it feeds into —
/// otherwise "small" init would hand the three positions the largest
/// vectors in the model. LayerNorm scales start at 1, shifts and biases
/// at 0.
pub fn init_tf_params(config: &TransformerConfig, seed: u64) -> Result<TransformerParams, NanoError> {
    config.validate()?;
    if let InitPolicy::Small { gamma } = config.init {
        if gamma <= 0.5 {
            return Err(NanoError::InvalidConfig(format!(
                "small-init exponent must exceed 0.5, got {gamma}"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = TransformerParams::zeros(config);
    let init = config.init;
    let d_m = config.d_m;
    params.for_each_tensor_mut(|name, _, tensor| {
        if name.ends_with("scale") {
            tensor.fill(1.0);
        } else if name.ends_with("shift") || name.contains(".b_") {
            // zeros already
        } else {
            let dim = if name == "pos_emb" { d_m } else { tensor.nrows() };
            let sigma = init.sigma(dim);
            let dist = Normal::new(0.0, sigma).expect("positive sigma");
            for v in tensor.iter_mut() {
                *v = dist.sample(&mut rng);
            }
        }
    });
    Ok(params)
}

const LN_EPS: f64 = 1e-5;

struct LnCache {
    xhat: DMatrix<f64>,
    inv_std: Vec<f64>,
}

fn layer_norm_fwd(x: &DMatrix<f64>, scale: &DMatrix<f64>, shift: &DMatrix<f64>) -> (DMatrix<f64>, LnCache) {
    let (t, d) = (x.nrows(), x.ncols());
    let mut xhat = DMatrix::zeros(t, d);
    let mut out = DMatrix::zeros(t, d);
    let mut inv_std = vec![0.0; t];
    for i in 0..t {
        let mean = x.row(i).sum() / d as f64;
        let var = x.row(i).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std[i] = inv;
        for j in 0..d {
            let h = (x[(i, j)] - mean) * inv;
            xhat[(i, j)] = h;
            out[(i, j)] = h * scale[(0, j)] + shift[(0, j)];
        }
    }
    (out, LnCache { xhat, inv_std })
}

fn layer_norm_bwd(
    dy: &DMatrix<f64>,
    cache: &LnCache,
    scale: &DMatrix<f64>,
    dscale: &mut DMatrix<f64>,
    dshift: &mut DMatrix<f64>,
) -> DMatrix<f64> {
    let (t, d) = (dy.nrows(), dy.ncols());
    let mut dx = DMatrix::zeros(t, d);
    for i in 0..t {
        let mut mean_dh = 0.0;
        let mut mean_dh_xhat = 0.0;
        for j in 0..d {
            let dh = dy[(i, j)] * scale[(0, j)];
            dscale[(0, j)] += dy[(i, j)] * cache.xhat[(i, j)];
            dshift[(0, j)] += dy[(i, j)];
            mean_dh += dh;
            mean_dh_xhat += dh * cache.xhat[(i, j)];
        }
        mean_dh /= d as f64;
        mean_dh_xhat /= d as f64;
        for j in 0..d {
            let dh = dy[(i, j)] * scale[(0, j)];
            dx[(i, j)] = cache.inv_std[i] * (dh - mean_dh - cache.xhat[(i, j)] * mean_dh_xhat);
        }
    }
    dx
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

fn add_row_bias(m: &mut DMatrix<f64>, b: &DMatrix<f64>) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            m[(i, j)] += b[(0, j)];
        }
    }
}

fn col_sums_into(src: &DMatrix<f64>, dst: &mut DMatrix<f64>) {
    for i in 0..src.nrows() {
        for j in 0..src.ncols() {
            dst[(0, j)] += src[(i, j)];
        }
    }
}

struct BlockCache {
    x_in: DMatrix<f64>,
    ln1: LnCache,
    a: DMatrix<f64>,
    q: DMatrix<f64>,
    k: DMatrix<f64>,
    v: DMatrix<f64>,
    probs: Vec<DMatrix<f64>>,
    ctx: DMatrix<f64>,
    ln2: LnCache,
    b_normed: DMatrix<f64>,
    u_pre: DMatrix<f64>,
    g_act: DMatrix<f64>,
}

struct ForwardCache {
    blocks: Vec<BlockCache>,
    x_final: DMatrix<f64>,
    lnf: LnCache,
    f_out: DMatrix<f64>,
}

/// Forward over `segments` stacked sequences of equal length
/// `tokens.len() / segments`. Attention is causal within each segment and
/// blocked across segments, so the result matches running each sequence
/// alone; stacking exists purely to turn many tiny matrix products into a
/// few larger ones. Returns one logits row per segment (final position).
fn forward_segments(
    params: &TransformerParams,
    config: &TransformerConfig,
    tokens: &[u32],
    segments: usize,
) -> Result<(DMatrix<f64>, ForwardCache), NanoError> {
    debug_assert!(segments > 0 && tokens.len() % segments == 0);
    let t = tokens.len() / segments;
    if t == 0 || t > config.context {
        return Err(NanoError::SequenceTooLong {
            len: t,
            max: config.context,
        });
    }
    let rows = segments * t;
    let d_m = config.d_m;
    let mut x = DMatrix::zeros(rows, d_m);
    for (idx, &tok) in tokens.iter().enumerate() {
        let row = tok as usize;
        if row >= config.d_vocab {
            return Err(NanoError::UnknownToken(tok));
        }
        let p = idx % t;
        for j in 0..d_m {
            x[(idx, j)] = params.tok_emb[(row, j)] + params.pos_emb[(p, j)];
        }
    }
    let scale = 1.0 / (config.d_k as f64).sqrt();
    let mut blocks = Vec::with_capacity(config.n_layers);
    for b in &params.blocks {
        let x_in = x.clone();
        let (a, ln1) = layer_norm_fwd(&x_in, &b.ln1_scale, &b.ln1_shift);
        let mut q = &a * &b.w_q;
        add_row_bias(&mut q, &b.b_q);
        let mut k = &a * &b.w_k;
        add_row_bias(&mut k, &b.b_k);
        let mut v = &a * &b.w_v;
        add_row_bias(&mut v, &b.b_v);
        let mut ctx = DMatrix::zeros(rows, config.d_attn());
        let mut probs = Vec::with_capacity(config.n_heads);
        for h in 0..config.n_heads {
            let c0 = h * config.d_k;
            let mut p = DMatrix::zeros(rows, t);
            for s in 0..segments {
                let r0 = s * t;
                for i in 0..t {
                    let mut max_s = f64::NEG_INFINITY;
                    let mut scores = vec![0.0; i + 1];
                    for j in 0..=i {
                        let mut acc = 0.0;
                        for c in 0..config.d_k {
                            acc += q[(r0 + i, c0 + c)] * k[(r0 + j, c0 + c)];
                        }
                        scores[j] = acc * scale;
                        max_s = max_s.max(scores[j]);
                    }
                    let mut total = 0.0;
                    for j in 0..=i {
                        scores[j] = (scores[j] - max_s).exp();
                        total += scores[j];
                    }
                    for j in 0..=i {
                        p[(r0 + i, j)] = scores[j] / total;
                    }
                }
                for i in 0..t {
                    for c in 0..config.d_k {
                        let mut acc = 0.0;
                        for j in 0..=i {
                            acc += p[(r0 + i, j)] * v[(r0 + j, c0 + c)];
                        }
                        ctx[(r0 + i, c0 + c)] = acc;
                    }
                }
            }
            probs.push(p);
        }
        let mut o = &ctx * &b.w_o;
        add_row_bias(&mut o, &b.b_o);
        let z = &x_in + &o;
        let (b_normed, ln2) = layer_norm_fwd(&z, &b.ln2_scale, &b.ln2_shift);
        let mut u_pre = &b_normed * &b.w_up;
        add_row_bias(&mut u_pre, &b.b_up);
        let g_act = u_pre.map(gelu);
        let mut m = &g_act * &b.w_down;
        add_row_bias(&mut m, &b.b_down);
        x = &z + &m;
        blocks.push(BlockCache {
            x_in,
            ln1,
            a,
            q,
            k,
            v,
            probs,
            ctx,
            ln2,
            b_normed,
            u_pre,
            g_act,
        });
    }
    let x_final = x;
    let (f_out, lnf) = layer_norm_fwd(&x_final, &params.lnf_scale, &params.lnf_shift);
    let mut logits = DMatrix::zeros(segments, config.d_vocab);
    for s in 0..segments {
        let last = s * t + t - 1;
        match &params.head {
            Some(h) => {
                for vtok in 0..config.d_vocab {
                    let mut acc = 0.0;
                    for j in 0..d_m {
                        acc += f_out[(last, j)] * h[(j, vtok)];
                    }
                    logits[(s, vtok)] = acc;
                }
            }
            None => {
                for vtok in 0..config.d_vocab {
                    let mut acc = 0.0;
                    for j in 0..d_m {
                        acc += f_out[(last, j)] * params.tok_emb[(vtok, j)];
                    }
                    logits[(s, vtok)] = acc;
                }
            }
        }
    }
    Ok((
        logits,
        ForwardCache {
            blocks,
            x_final,
            lnf,
            f_out,
        },
    ))
}

fn forward_cached(
    params: &TransformerParams,
    config: &TransformerConfig,
    tokens: &[u32],
) -> Result<(Vec<f64>, ForwardCache), NanoError> {
    let (logits, cache) = forward_segments(params, config, tokens, 1)?;
    Ok((logits.row(0).iter().cloned().collect(), cache))
}

fn hidden_from_cache(cache: &ForwardCache, config: &TransformerConfig, t: usize) -> HiddenStates {
    let d_m = config.d_m;
    let mut layers = Vec::with_capacity(config.n_layers + 1);
    let flatten = |m: &DMatrix<f64>| {
        let mut buf = Vec::with_capacity(t * d_m);
        for i in 0..t {
            for j in 0..d_m {
                buf.push(m[(i, j)]);
            }
        }
        buf
    };
    layers.push(flatten(&cache.blocks[0].x_in));
    for (l, b) in cache.blocks.iter().enumerate() {
        if l + 1 < cache.blocks.len() {
            layers.push(flatten(&cache.blocks[l + 1].x_in));
        } else {
            let _ = b;
            layers.push(flatten(&cache.x_final));
        }
    }
    HiddenStates { d_m, len: t, layers }
}

/// Forward pass: next-token logits at the final position plus the residual
/// stream at every layer boundary.
pub fn tf_forward(
    params: &TransformerParams,
    config: &TransformerConfig,
    tokens: &[u32],
) -> Result<(Vec<f64>, HiddenStates), NanoError> {
    let (logits, cache) = forward_cached(params, config, tokens)?;
    let hidden = hidden_from_cache(&cache, config, tokens.len());
    Ok((logits, hidden))
}

/// Residual-stream snapshots for an input sequence.
pub fn extract_hidden(
    params: &TransformerParams,
    config: &TransformerConfig,
    tokens: &[u32],
) -> Result<HiddenStates, NanoError> {
    tf_forward(params, config, tokens).map(|(_, h)| h)
}

/// Backward companion of [`forward_segments`]: `dlogits` holds one row of
/// final-position logit gradients per segment; parameter gradients are
/// accumulated into `grads`.
fn backward_segments(
    params: &TransformerParams,
    config: &TransformerConfig,
    tokens: &[u32],
    segments: usize,
    cache: &ForwardCache,
    dlogits: &DMatrix<f64>,
    grads: &mut TransformerParams,
) {
    let t = tokens.len() / segments;
    let rows = segments * t;
    let d_m = config.d_m;
    // head
    let mut df = DMatrix::zeros(rows, d_m);
    for s in 0..segments {
        let last = s * t + t - 1;
        match (&params.head, &mut grads.head) {
            (Some(h), Some(dh)) => {
                for vtok in 0..config.d_vocab {
                    let dl = dlogits[(s, vtok)];
                    if dl == 0.0 {
                        continue;
                    }
                    for j in 0..d_m {
                        df[(last, j)] += dl * h[(j, vtok)];
                        dh[(j, vtok)] += dl * cache.f_out[(last, j)];
                    }
                }
            }
            _ => {
                for vtok in 0..config.d_vocab {
                    let dl = dlogits[(s, vtok)];
                    if dl == 0.0 {
                        continue;
                    }
                    for j in 0..d_m {
                        df[(last, j)] += dl * params.tok_emb[(vtok, j)];
                        grads.tok_emb[(vtok, j)] += dl * cache.f_out[(last, j)];
                    }
                }
            }
        }
    }
    let mut dx = layer_norm_bwd(
        &df,
        &cache.lnf,
        &params.lnf_scale,
        &mut grads.lnf_scale,
        &mut grads.lnf_shift,
    );
    let scale = 1.0 / (config.d_k as f64).sqrt();
    for (l, (b, bc)) in params.blocks.iter().zip(&cache.blocks).enumerate().rev() {
        let gb = &mut grads.blocks[l];
        // MLP branch: x = z + m
        let dm = dx.clone();
        let mut dz = dx;
        let dg = &dm * b.w_down.transpose();
        gb.w_down += bc.g_act.transpose() * &dm;
        col_sums_into(&dm, &mut gb.b_down);
        let mut du = dg;
        for i in 0..rows {
            for j in 0..du.ncols() {
                du[(i, j)] *= gelu_grad(bc.u_pre[(i, j)]);
            }
        }
        let db_normed = &du * b.w_up.transpose();
        gb.w_up += bc.b_normed.transpose() * &du;
        col_sums_into(&du, &mut gb.b_up);
        dz += layer_norm_bwd(&db_normed, &bc.ln2, &b.ln2_scale, &mut gb.ln2_scale, &mut gb.ln2_shift);
        // attention branch: z = x_in + o
        let do_ = dz.clone();
        let mut dx_in = dz;
        let dctx = &do_ * b.w_o.transpose();
        gb.w_o += bc.ctx.transpose() * &do_;
        col_sums_into(&do_, &mut gb.b_o);
        let mut dq = DMatrix::zeros(rows, config.d_attn());
        let mut dk = DMatrix::zeros(rows, config.d_attn());
        let mut dv = DMatrix::zeros(rows, config.d_attn());
        for h in 0..config.n_heads {
            let c0 = h * config.d_k;
            let p = &bc.probs[h];
            for s in 0..segments {
                let r0 = s * t;
                // dV and dP
                let mut dp = DMatrix::zeros(t, t);
                for i in 0..t {
                    for j in 0..=i {
                        let mut acc = 0.0;
                        for c in 0..config.d_k {
                            acc += dctx[(r0 + i, c0 + c)] * bc.v[(r0 + j, c0 + c)];
                            dv[(r0 + j, c0 + c)] += p[(r0 + i, j)] * dctx[(r0 + i, c0 + c)];
                        }
                        dp[(i, j)] = acc;
                    }
                }
                // softmax backward row-wise, then scores -> q, k
                for i in 0..t {
                    let mut dot = 0.0;
                    for j in 0..=i {
                        dot += dp[(i, j)] * p[(r0 + i, j)];
                    }
                    for j in 0..=i {
                        let ds = p[(r0 + i, j)] * (dp[(i, j)] - dot) * scale;
                        for c in 0..config.d_k {
                            dq[(r0 + i, c0 + c)] += ds * bc.k[(r0 + j, c0 + c)];
                            dk[(r0 + j, c0 + c)] += ds * bc.q[(r0 + i, c0 + c)];
                        }
                    }
                }
            }
        }
        let mut da = &dq * b.w_q.transpose();
        da += &dk * b.w_k.transpose();
        da += &dv * b.w_v.transpose();
        gb.w_q += bc.a.transpose() * &dq;
        gb.w_k += bc.a.transpose() * &dk;
        gb.w_v += bc.a.transpose() * &dv;
        col_sums_into(&dq, &mut gb.b_q);
        col_sums_into(&dk, &mut gb.b_k);
        col_sums_into(&dv, &mut gb.b_v);
        dx_in += layer_norm_bwd(&da, &bc.ln1, &b.ln1_scale, &mut gb.ln1_scale, &mut gb.ln1_shift);
        dx = dx_in;
    }
    for (idx, &tok) in tokens.iter().enumerate() {
        let p = idx % t;
        for j in 0..d_m {
            grads.tok_emb[(tok as usize, j)] += dx[(idx, j)];
            grads.pos_emb[(p, j)] += dx[(idx, j)];
        }
    }
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

/// Mean cross-entropy at the final position over the batch, plus optional
/// weight decay, with analytic gradients for every tensor. Also returns the
/// number of correct argmax predictions.
pub fn tf_loss_and_grads(
    params: &TransformerParams,
    config: &TransformerConfig,
    batch: &[Example],
    weight_decay: f64,
) -> Result<(f64, usize, TransformerParams), NanoError> {
    assert!(!batch.is_empty(), "batch must be non-empty");
    let mut grads = TransformerParams::zeros(config);
    if !config.tie_embeddings {
        grads.head = Some(DMatrix::zeros(config.d_m, config.d_vocab));
    }
    let inv_b = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut correct = 0usize;
    // stack same-length examples so each group runs one forward/backward
    let mut lengths: Vec<usize> = batch.iter().map(|ex| ex.tokens.len()).collect();
    lengths.sort_unstable();
    lengths.dedup();
    for t in lengths {
        let group: Vec<&Example> = batch.iter().filter(|ex| ex.tokens.len() == t).collect();
        let mut tokens = Vec::with_capacity(group.len() * t);
        for ex in &group {
            tokens.extend_from_slice(&ex.tokens);
        }
        let (logits, cache) = forward_segments(params, config, &tokens, group.len())?;
        let mut dlogits = DMatrix::zeros(group.len(), config.d_vocab);
        for (s, ex) in group.iter().enumerate() {
            let y = ex.target as usize;
            if y >= config.d_vocab {
                return Err(NanoError::UnknownToken(ex.target));
            }
            let row: Vec<f64> = (0..config.d_vocab).map(|v| logits[(s, v)]).collect();
            let lse = log_sum_exp(&row);
            loss += (lse - row[y]) * inv_b;
            let mut best = 0usize;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            if best == y {
                correct += 1;
            }
            for (i, &v) in row.iter().enumerate() {
                dlogits[(s, i)] = ((v - lse).exp() - if i == y { 1.0 } else { 0.0 }) * inv_b;
            }
        }
        backward_segments(params, config, &tokens, group.len(), &cache, &dlogits, &mut grads);
    }
    if !loss.is_finite() {
        return Err(NanoError::NumericalOverflow);
    }
    if weight_decay != 0.0 {
        let mut sq = 0.0;
        params.for_each_tensor(|_, decay, t| {
            if decay {
                sq += t.iter().map(|v| v * v).sum::<f64>();
            }
        });
        loss += 0.5 * weight_decay * sq;
        let mut sources: Vec<DMatrix<f64>> = Vec::new();
        params.for_each_tensor(|_, decay, t| {
            if decay {
                sources.push(t.clone());
            }
        });
        let mut idx = 0usize;
        grads.for_each_tensor_mut(|_, decay, g| {
            if decay {
                *g += &sources[idx] * weight_decay;
                idx += 1;
            }
        });
    }
    Ok((loss, correct, grads))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TfTrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_steps: usize,
    pub stop_loss: f64,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for TfTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 0.0,
            max_steps: 4000,
            stop_loss: 1e-4,
            log_every: 100,
            seed: 0,
        }
    }
}

struct Adam {
    m: Vec<DMatrix<f64>>,
    v: Vec<DMatrix<f64>>,
    t: usize,
}

impl Adam {
    fn new(params: &TransformerParams) -> Self {
        let mut m = Vec::new();
        params.for_each_tensor(|_, _, t| m.push(DMatrix::zeros(t.nrows(), t.ncols())));
        let v = m.clone();
        Self { m, v, t: 0 }
    }

    fn step(&mut self, params: &mut TransformerParams, grads: &TransformerParams, lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let bc1 = 1.0 - B1.powi(self.t as i32);
        let bc2 = 1.0 - B2.powi(self.t as i32);
        let mut g_flat: Vec<DMatrix<f64>> = Vec::new();
        grads.for_each_tensor(|_, _, g| g_flat.push(g.clone()));
        // walk params in the same fixed visiting order as the flattened grads
        let mut idx = 0usize;
        let (ms, vs) = (&mut self.m, &mut self.v);
        params.for_each_tensor_mut(|_, _, p| {
            let g = &g_flat[idx];
            let m = &mut ms[idx];
            let v = &mut vs[idx];
            for ((pv, gv), (mv, vv)) in p
                .iter_mut()
                .zip(g.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mv = B1 * *mv + (1.0 - B1) * gv;
                *vv = B2 * *vv + (1.0 - B2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + EPS);
            }
            idx += 1;
        });
    }
}

fn eval_ood(
    params: &TransformerParams,
    config: &TransformerConfig,
    dataset: &Dataset,
) -> Result<(f64, f64), NanoError> {
    if dataset.test_ood.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut hits = 0usize;
    let mut min_margin = f64::INFINITY;
    for ex in &dataset.test_ood {
        let (logits, _) = forward_cached(params, config, &ex.tokens)?;
        // predictions are ranked within the answer vocabulary
        let mut best = dataset.layout.out_vocab[0];
        let mut best_v = f64::NEG_INFINITY;
        let mut runner_up = f64::NEG_INFINITY;
        let target_logit = logits[ex.target as usize];
        for &tok in &dataset.layout.out_vocab {
            let v = logits[tok as usize];
            if v > best_v {
                best_v = v;
                best = tok;
            }
            if tok != ex.target && v > runner_up {
                runner_up = v;
            }
        }
        if best == ex.target {
            hits += 1;
        }
        min_margin = min_margin.min(target_logit - runner_up);
    }
    Ok((hits as f64 / dataset.test_ood.len() as f64, min_margin))
}

/// Train with adaptive moments on the dataset's train split, supervising the
/// target token at the final input position. Deterministic given the seed.
pub fn tf_train(
    dataset: &Dataset,
    config: &TransformerConfig,
    tc: &TfTrainConfig,
) -> Result<(TransformerParams, Vec<TraceRecord>), NanoError> {
    config.validate()?;
    let mut params = init_tf_params(config, tc.seed)?;
    let mut adam = Adam::new(&params);
    let mut trace = Vec::new();
    let mut end_step = tc.max_steps;
    let mut step = 0usize;
    while step < end_step {
        let (loss, correct, grads) =
            tf_loss_and_grads(&params, config, &dataset.train, tc.weight_decay).map_err(|e| {
                match e {
                    NanoError::NumericalOverflow => NanoError::Diverged {
                        step,
                        loss: f64::NAN,
                    },
                    other => other,
                }
            })?;
        let train_acc = correct as f64 / dataset.train.len() as f64;
        if tc.log_every > 0 && step % tc.log_every == 0 {
            let (ood_acc, min_margin) = eval_ood(&params, config, dataset)?;
            trace.push(TraceRecord {
                step,
                loss,
                train_acc,
                ood_acc,
                min_ood_margin: min_margin,
            });
        }
        if end_step == tc.max_steps && loss <= tc.stop_loss && train_acc == 1.0 {
            end_step = tc.max_steps.min(step + step.max(1));
        }
        adam.step(&mut params, &grads, tc.learning_rate);
        step += 1;
    }
    let (loss, correct, _) =
        tf_loss_and_grads(&params, config, &dataset.train, tc.weight_decay)?;
    let (ood_acc, min_margin) = eval_ood(&params, config, dataset)?;
    trace.push(TraceRecord {
        step,
        loss,
        train_acc: correct as f64 / dataset.train.len() as f64,
        ood_acc,
        min_ood_margin: min_margin,
    });
    Ok((params, trace))
}

// ---------------------------------------------------------------------------
// Checkpoints: magic, version, tensor count, then (name, shape, data) records
// ---------------------------------------------------------------------------

const TF_MAGIC: u32 = 0x4e46_4d52;
const TF_VERSION: u32 = 1;

pub fn save_tf_checkpoint(params: &TransformerParams, path: &Path) -> Result<(), NanoError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut count = 0u32;
    params.for_each_tensor(|_, _, _| count += 1);
    out.write_all(&TF_MAGIC.to_le_bytes())?;
    out.write_all(&TF_VERSION.to_le_bytes())?;
    out.write_all(&count.to_le_bytes())?;
    let mut io_err = None;
    params.for_each_tensor(|name, _, t| {
        if io_err.is_some() {
            return;
        }
        let mut write = || -> std::io::Result<()> {
            out.write_all(&(name.len() as u32).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            out.write_all(&(t.nrows() as u32).to_le_bytes())?;
            out.write_all(&(t.ncols() as u32).to_le_bytes())?;
            for i in 0..t.nrows() {
                for j in 0..t.ncols() {
                    out.write_all(&t[(i, j)].to_le_bytes())?;
                }
            }
            Ok(())
        };
        if let Err(e) = write() {
            io_err = Some(e);
        }
    });
    match io_err {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

pub fn load_tf_checkpoint(
    path: &Path,
    config: &TransformerConfig,
) -> Result<TransformerParams, NanoError> {
    let mut input = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut u32buf = [0u8; 4];
    let mut read_u32 = |input: &mut dyn std::io::Read| -> Result<u32, NanoError> {
        input.read_exact(&mut u32buf)?;
        Ok(u32::from_le_bytes(u32buf))
    };
    if read_u32(&mut input)? != TF_MAGIC {
        return Err(NanoError::BadCheckpoint("wrong magic".into()));
    }
    if read_u32(&mut input)? != TF_VERSION {
        return Err(NanoError::BadCheckpoint("unsupported version".into()));
    }
    let count = read_u32(&mut input)? as usize;
    let mut tensors = std::collections::BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u32(&mut input)? as usize;
        if name_len > 4096 {
            return Err(NanoError::BadCheckpoint("oversized tensor name".into()));
        }
        let mut name_buf = vec![0u8; name_len];
        input.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| NanoError::BadCheckpoint("non-utf8 tensor name".into()))?;
        let rows = read_u32(&mut input)? as usize;
        let cols = read_u32(&mut input)? as usize;
        let mut data = DMatrix::zeros(rows, cols);
        let mut f64buf = [0u8; 8];
        for i in 0..rows {
            for j in 0..cols {
                input.read_exact(&mut f64buf)?;
                data[(i, j)] = f64::from_le_bytes(f64buf);
            }
        }
        tensors.insert(name, data);
    }
    let mut params = TransformerParams::zeros(config);
    if !config.tie_embeddings {
        params.head = Some(DMatrix::zeros(config.d_m, config.d_vocab));
    }
    let mut missing = None;
    params.for_each_tensor_mut(|name, _, t| {
        match tensors.get(&name) {
            Some(src) if src.shape() == t.shape() => t.copy_from(src),
            Some(_) => missing = Some(format!("shape mismatch for {name}")),
            None => missing = Some(format!("missing tensor {name}")),
        }
    });
    match missing {
        Some(msg) => Err(NanoError::BadCheckpoint(msg)),
        None => Ok(params),
    }
}
