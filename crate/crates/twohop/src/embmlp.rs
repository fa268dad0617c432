//! The Emb-MLP model: sum of input-token embeddings followed by a linear
//! projection to output logits, trained with full-batch gradient descent on
//! softmax cross-entropy. All gradients are analytic.

use crate::taskgen::{Dataset, Example, VocabLayout};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EmbMlpError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("token {0} is not in the model vocabulary")]
    UnknownToken(u32),
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
}

/// Initialization policy for weight matrices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum InitPolicy {
    /// Every entry `N(0, 0.02^2)`.
    Standard,
    /// Every entry `N(0, sigma^2)` with `sigma = d1^(-gamma)` where `d1` is
    /// the matrix's input dimension. Requires `gamma > 0.5`.
    Small { gamma: f64 },
}

impl InitPolicy {
    pub fn sigma(&self, input_dim: usize) -> f64 {
        match self {
            InitPolicy::Standard => 0.02,
            InitPolicy::Small { gamma } => (input_dim as f64).powf(-gamma),
        }
    }

    pub fn validate(&self) -> Result<(), EmbMlpError> {
        if let InitPolicy::Small { gamma } = self {
            if *gamma <= 0.5 {
                return Err(EmbMlpError::InvalidConfig(format!(
                    "small init requires gamma > 0.5, got {gamma}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Optimizer {
    /// Plain full-batch gradient descent with a fixed step size.
    Gd,
    /// Adaptive moments (beta1 = 0.9, beta2 = 0.999, eps = 1e-8).
    Adam,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub init: InitPolicy,
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_steps: usize,
    pub stop_loss: f64,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            init: InitPolicy::Standard,
            optimizer: Optimizer::Gd,
            learning_rate: 0.5,
            weight_decay: 0.0,
            max_steps: 60_000,
            stop_loss: 1e-3,
            log_every: 200,
            seed: 0,
        }
    }
}

/// Model parameters: embedding `E` (`|V_in| x d_m`) and projection
/// `W_proj` (`d_m x |V_out|`). The product `E * W_proj` is the logit
/// template matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbMlpParams {
    pub e: DMatrix<f64>,
    pub w_proj: DMatrix<f64>,
}

impl EmbMlpParams {
    pub fn d_m(&self) -> usize {
        self.e.ncols()
    }
}

/// One per-step record of the training trace.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub ood_acc: f64,
    pub min_ood_margin: f64,
}

pub type TrainTrace = Vec<TraceRecord>;

/// An example re-indexed into the Emb-MLP input/output vocabularies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedExample {
    pub inputs: Vec<usize>,
    pub target: usize,
}

/// Map an example's global token ids onto in/out vocabulary indices.
pub fn encode(layout: &VocabLayout, ex: &Example) -> Result<EncodedExample, EmbMlpError> {
    let inputs = ex
        .tokens
        .iter()
        .map(|&t| layout.in_index(t).ok_or(EmbMlpError::UnknownToken(t)))
        .collect::<Result<Vec<_>, _>>()?;
    let target = layout
        .out_index(ex.target)
        .ok_or(EmbMlpError::UnknownToken(ex.target))?;
    Ok(EncodedExample { inputs, target })
}

pub fn encode_all(
    layout: &VocabLayout,
    examples: &[Example],
) -> Result<Vec<EncodedExample>, EmbMlpError> {
    examples.iter().map(|ex| encode(layout, ex)).collect()
}

/// Width that leaves `W = E * W_proj` unconstrained in rank.
pub fn default_width(layout: &VocabLayout) -> usize {
    layout.in_vocab.len().min(layout.out_vocab.len())
}

/// Sample fresh parameters. Deterministic given the seed.
pub fn init_params(
    layout: &VocabLayout,
    d_m: usize,
    init: InitPolicy,
    seed: u64,
) -> Result<EmbMlpParams, EmbMlpError> {
    if d_m < 2 {
        return Err(EmbMlpError::InvalidConfig(format!("d_m must be >= 2, got {d_m}")));
    }
    init.validate()?;
    let v_in = layout.in_vocab.len();
    let v_out = layout.out_vocab.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sample = |rows: usize, cols: usize, sigma: f64| {
        let normal = Normal::new(0.0, sigma).expect("sigma > 0");
        DMatrix::from_fn(rows, cols, |_, _| normal.sample(&mut rng))
    };
    let e = sample(v_in, d_m, init.sigma(v_in));
    let w_proj = sample(d_m, v_out, init.sigma(d_m));
    Ok(EmbMlpParams { e, w_proj })
}

/// Logits for one input sequence: `(sum of embedding rows) * W_proj`.
/// Order-invariant in the token sequence.
pub fn forward(params: &EmbMlpParams, inputs: &[usize]) -> DVector<f64> {
    let mut x = DVector::zeros(params.d_m());
    for &s in inputs {
        x += params.e.row(s).transpose();
    }
    params.w_proj.transpose() * x
}

/// Argmax with lowest-index tie-break.
pub fn argmax(logits: &DVector<f64>) -> usize {
    let mut best = 0;
    for i in 1..logits.len() {
        if logits[i] > logits[best] {
            best = i;
        }
    }
    best
}

fn log_sum_exp(logits: &DVector<f64>) -> f64 {
    let m = logits.max();
    m + logits.iter().map(|&l| (l - m).exp()).sum::<f64>().ln()
}

/// Mean softmax cross-entropy over the batch plus an L2 penalty
/// `weight_decay/2 * (||E||_F^2 + ||W_proj||_F^2)`, with exact analytic
/// gradients of that objective.
pub fn loss_and_grads(
    params: &EmbMlpParams,
    batch: &[EncodedExample],
    weight_decay: f64,
) -> (f64, DMatrix<f64>, DMatrix<f64>) {
    assert!(!batch.is_empty(), "batch must be non-empty");
    let d_m = params.d_m();
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut d_e = DMatrix::zeros(params.e.nrows(), d_m);
    let mut d_w = DMatrix::zeros(d_m, params.w_proj.ncols());
    for ex in batch {
        let mut x = DVector::zeros(d_m);
        for &s in &ex.inputs {
            x += params.e.row(s).transpose();
        }
        let logits = params.w_proj.transpose() * &x;
        let lse = log_sum_exp(&logits);
        loss += scale * (lse - logits[ex.target]);
        // d_logits = softmax - onehot, scaled by 1/B
        let mut d_logits = logits.map(|l| (l - lse).exp() * scale);
        d_logits[ex.target] -= scale;
        d_w += &x * d_logits.transpose();
        let d_x = &params.w_proj * d_logits;
        for &s in &ex.inputs {
            for k in 0..d_m {
                d_e[(s, k)] += d_x[k];
            }
        }
    }
    if weight_decay != 0.0 {
        loss += 0.5 * weight_decay * (params.e.norm_squared() + params.w_proj.norm_squared());
        d_e += weight_decay * &params.e;
        d_w += weight_decay * &params.w_proj;
    }
    (loss, d_e, d_w)
}

/// The logit template matrix `W = E * W_proj` (`|V_in| x |V_out|`).
pub fn logit_matrix(params: &EmbMlpParams) -> DMatrix<f64> {
    &params.e * &params.w_proj
}

fn accuracy(params: &EmbMlpParams, batch: &[EncodedExample]) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    let hits = batch
        .iter()
        .filter(|ex| argmax(&forward(params, &ex.inputs)) == ex.target)
        .count();
    hits as f64 / batch.len() as f64
}

fn min_margin(params: &EmbMlpParams, batch: &[EncodedExample]) -> f64 {
    let mut q = f64::INFINITY;
    for ex in batch {
        let logits = forward(params, &ex.inputs);
        let target = logits[ex.target];
        for (i, &l) in logits.iter().enumerate() {
            if i != ex.target {
                q = q.min(target - l);
            }
        }
    }
    q
}

/// Full-batch training until the step budget runs out or the stop criterion
/// fires (train accuracy 1.0 and loss below `stop_loss`, after which training
/// continues for ten times the steps already taken to let margins grow).
pub fn train(
    dataset: &Dataset,
    d_m: usize,
    config: &TrainConfig,
) -> Result<(EmbMlpParams, TrainTrace), EmbMlpError> {
    let train_set = encode_all(&dataset.layout, &dataset.train)?;
    let ood_set = encode_all(&dataset.layout, &dataset.test_ood)?;
    if train_set.is_empty() {
        return Err(EmbMlpError::InvalidConfig("empty training set".into()));
    }
    let mut params = init_params(&dataset.layout, d_m, config.init, config.seed)?;
    let mut trace = Vec::new();

    let mut m_e = DMatrix::zeros(params.e.nrows(), params.e.ncols());
    let mut v_e = m_e.clone();
    let mut m_w = DMatrix::zeros(params.w_proj.nrows(), params.w_proj.ncols());
    let mut v_w = m_w.clone();
    let (beta1, beta2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);

    let mut end_step = config.max_steps;
    let mut hit_step: Option<usize> = None;
    let mut step = 0;
    loop {
        let (loss, d_e, d_w) = loss_and_grads(&params, &train_set, config.weight_decay);
        if !loss.is_finite() {
            return Err(EmbMlpError::Diverged { step, loss });
        }
        let log_now = step % config.log_every.max(1) == 0 || step == end_step;
        if log_now {
            trace.push(TraceRecord {
                step,
                loss,
                train_acc: accuracy(&params, &train_set),
                ood_acc: accuracy(&params, &ood_set),
                min_ood_margin: min_margin(&params, &ood_set),
            });
        }
        if hit_step.is_none() && loss <= config.stop_loss && accuracy(&params, &train_set) == 1.0 {
            hit_step = Some(step);
            end_step = end_step.min(step + 10 * step.max(1));
        }
        if step >= end_step {
            break;
        }
        match config.optimizer {
            Optimizer::Gd => {
                params.e -= config.learning_rate * d_e;
                params.w_proj -= config.learning_rate * d_w;
            }
            Optimizer::Adam => {
                let t = (step + 1) as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                m_e = beta1 * &m_e + (1.0 - beta1) * &d_e;
                v_e = beta2 * &v_e + (1.0 - beta2) * d_e.map(|g| g * g);
                m_w = beta1 * &m_w + (1.0 - beta1) * &d_w;
                v_w = beta2 * &v_w + (1.0 - beta2) * d_w.map(|g| g * g);
                params.e -= config.learning_rate
                    * m_e.zip_map(&v_e, |m, v| (m / bc1) / ((v / bc2).sqrt() + eps));
                params.w_proj -= config.learning_rate
                    * m_w.zip_map(&v_w, |m, v| (m / bc1) / ((v / bc2).sqrt() + eps));
            }
        }
        step += 1;
    }
    if trace.last().map(|r| r.step) != Some(step) {
        let (loss, _, _) = loss_and_grads(&params, &train_set, config.weight_decay);
        trace.push(TraceRecord {
            step,
            loss,
            train_acc: accuracy(&params, &train_set),
            ood_acc: accuracy(&params, &ood_set),
            min_ood_margin: min_margin(&params, &ood_set),
        });
    }
    Ok((params, trace))
}

const CHECKPOINT_MAGIC: u32 = 0x4d42_4d45; // "EMBM" little-endian
const CHECKPOINT_VERSION: u32 = 1;

/// Write a checkpoint: header (magic, version, |V_in|, |V_out|, d_m as u32
/// little-endian) followed by row-major little-endian f64s for E then W_proj.
pub fn save_checkpoint<W: Write>(params: &EmbMlpParams, mut out: W) -> Result<(), EmbMlpError> {
    let header = [
        CHECKPOINT_MAGIC,
        CHECKPOINT_VERSION,
        params.e.nrows() as u32,
        params.w_proj.ncols() as u32,
        params.d_m() as u32,
    ];
    for v in header {
        out.write_all(&v.to_le_bytes())?;
    }
    for m in [&params.e, &params.w_proj] {
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                out.write_all(&m[(r, c)].to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn load_checkpoint<R: Read>(mut input: R) -> Result<EmbMlpParams, EmbMlpError> {
    let mut word = [0u8; 4];
    let mut read_u32 = |input: &mut R| -> Result<u32, EmbMlpError> {
        input.read_exact(&mut word)?;
        Ok(u32::from_le_bytes(word))
    };
    if read_u32(&mut input)? != CHECKPOINT_MAGIC {
        return Err(EmbMlpError::BadCheckpoint("wrong magic".into()));
    }
    if read_u32(&mut input)? != CHECKPOINT_VERSION {
        return Err(EmbMlpError::BadCheckpoint("unsupported version".into()));
    }
    let v_in = read_u32(&mut input)? as usize;
    let v_out = read_u32(&mut input)? as usize;
    let d_m = read_u32(&mut input)? as usize;
    let mut read_matrix = |rows: usize, cols: usize| -> Result<DMatrix<f64>, EmbMlpError> {
        let mut buf = [0u8; 8];
        let mut m = DMatrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                input.read_exact(&mut buf)?;
                m[(r, c)] = f64::from_le_bytes(buf);
            }
        }
        Ok(m)
    };
    let e = read_matrix(v_in, d_m)?;
    let w_proj = read_matrix(d_m, v_out)?;
    Ok(EmbMlpParams { e, w_proj })
}
