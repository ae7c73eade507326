//! Prediction network, joint network, RNN-T loss and greedy decoding.
//!
//! Output ids cover the whole vocabulary including blank (id 0). Lattice
//! rows are laid out as `t·(U+1) + u`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{log_add, log_sum_exp, Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::text::BLANK;

pub const PRED_EMBEDDING: &str = "pred.embedding";
const LSTM_WX: &str = "pred.lstm.0.w_x";
const LSTM_WH: &str = "pred.lstm.0.w_h";
const LSTM_B: &str = "pred.lstm.0.b";
pub const JOINT_W1: &str = "joint.w1";
const JOINT_B1: &str = "joint.b1";
const JOINT_W2: &str = "joint.w2";
const JOINT_B2: &str = "joint.b2";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransducerConfig {
    /// Output width, blank included.
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_emb: usize,
    pub d_pred: usize,
    pub d_joint: usize,
    pub max_symbols_per_frame: usize,
}

impl TransducerConfig {
    pub fn desk(vocab_size: usize) -> Self {
        TransducerConfig {
            vocab_size,
            d_model: 32,
            d_emb: 32,
            d_pred: 32,
            d_joint: 32,
            max_symbols_per_frame: 4,
        }
    }
}

pub fn init_transducer_params<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &TransducerConfig, rng: &mut R) {
    let d = cfg.d_pred;
    store.insert(PRED_EMBEDDING, Tensor::randn(&[cfg.vocab_size, cfg.d_emb], 1.0, rng));
    store.glorot(LSTM_WX, cfg.d_emb, 4 * d, rng);
    store.glorot(LSTM_WH, d, 4 * d, rng);
    // gate order: input, forget, cell, output
    let mut b = vec![0.0; 4 * d];
    b[d..2 * d].fill(1.0);
    store.insert(LSTM_B, Tensor::vector(b));
    store.glorot(JOINT_W1, cfg.d_model + d, cfg.d_joint, rng);
    store.zeros(JOINT_B1, &[cfg.d_joint]);
    store.glorot(JOINT_W2, cfg.d_joint, cfg.vocab_size, rng);
    store.zeros(JOINT_B2, &[cfg.vocab_size]);
}

/// Prediction-side block of the joint's first layer, `[d_pred × d_joint]`.
pub fn joint_prediction_block(store: &ParamStore, cfg: &TransducerConfig) -> Result<Tensor> {
    let w1 = store.get(JOINT_W1)?;
    Ok(w1.slice_rows(cfg.d_model, cfg.d_pred))
}

fn check_tokens(tokens: &[usize], vocab: usize) -> Result<()> {
    match tokens.iter().find(|&&t| t >= vocab) {
        Some(&id) => Err(Error::OutOfVocabulary { id, size: vocab }),
        None => Ok(()),
    }
}

/// `[(U+1) × d_pred]`: row 0 is the zero start state, row `u` the output
/// after consuming `history[..u]`.
pub fn prediction_forward<'p>(
    g: &Graph<'p>,
    store: &'p ParamStore,
    cfg: &TransducerConfig,
    history: &[usize],
) -> Result<Var> {
    check_tokens(history, cfg.vocab_size)?;
    let d = cfg.d_pred;
    let zero = g.constant(Tensor::zeros(&[1, d]));
    if history.is_empty() {
        return Ok(zero);
    }
    let table = store.bind(g, PRED_EMBEDDING)?;
    let wx = store.bind(g, LSTM_WX)?;
    let wh = store.bind(g, LSTM_WH)?;
    let b = store.bind(g, LSTM_B)?;
    let e = g.embedding(table, history)?;
    let xw = g.matmul(e, wx)?;
    let xw = g.add_bias(xw, b)?;
    let (mut h, mut c) = (zero, zero);
    let mut rows = vec![zero];
    for u in 0..history.len() {
        let gates = g.slice(xw, 0, u, 1)?;
        let gates = if u == 0 { gates } else { g.add(gates, g.matmul(h, wh)?)? };
        let i = g.sigmoid(g.slice(gates, 1, 0, d)?);
        let f = g.sigmoid(g.slice(gates, 1, d, d)?);
        let cand = g.tanh(g.slice(gates, 1, 2 * d, d)?);
        let o = g.sigmoid(g.slice(gates, 1, 3 * d, d)?);
        c = if u == 0 { g.mul(i, cand)? } else { g.add(g.mul(f, c)?, g.mul(i, cand)?)? };
        h = g.mul(o, g.tanh(c))?;
        rows.push(h);
    }
    g.concat(&rows, 0)
}

/// Log-probabilities over the lattice, `[(T'·(U+1)) × V]`.
pub fn joint_lattice<'p>(
    g: &Graph<'p>,
    store: &'p ParamStore,
    cfg: &TransducerConfig,
    enc: Var,
    pred: Var,
) -> Result<Var> {
    let (es, ps) = (g.shape(enc), g.shape(pred));
    if es.len() != 2 || es[1] != cfg.d_model || ps.len() != 2 || ps[1] != cfg.d_pred {
        return Err(Error::shape("joint", &es, &ps));
    }
    let w1 = store.bind(g, JOINT_W1)?;
    let w_enc = g.slice(w1, 0, 0, cfg.d_model)?;
    let w_pred = g.slice(w1, 0, cfg.d_model, cfg.d_pred)?;
    let b1 = store.bind(g, JOINT_B1)?;
    let e = g.add_bias(g.matmul(enc, w_enc)?, b1)?;
    let p = g.matmul(pred, w_pred)?;
    let z = g.tanh(g.outer_add_rows(e, p)?);
    let w2 = store.bind(g, JOINT_W2)?;
    let b2 = store.bind(g, JOINT_B2)?;
    let logits = g.add_bias(g.matmul(z, w2)?, b2)?;
    Ok(g.log_softmax(logits))
}

/// Single-cell joint: `enc_row` `[d_model]`, `pred_row` `[d_pred]` → `[V]`.
pub fn joint<'p>(
    g: &Graph<'p>,
    store: &'p ParamStore,
    cfg: &TransducerConfig,
    enc_row: Var,
    pred_row: Var,
) -> Result<Var> {
    let e = g.reshape(enc_row, &[1, cfg.d_model])?;
    let p = g.reshape(pred_row, &[1, cfg.d_pred])?;
    let out = joint_lattice(g, store, cfg, e, p)?;
    g.reshape(out, &[cfg.vocab_size])
}

/// Forward and backward variables over a `T × (U+1)` grid.
#[derive(Clone, Debug)]
pub struct RnntLattice {
    pub frames: usize,
    pub labels: usize,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    /// `log P(y|x)` from the forward pass.
    pub log_likelihood: f64,
    /// `log P(y|x)` from the backward pass.
    pub log_likelihood_beta: f64,
}

impl RnntLattice {
    pub fn alpha(&self, t: usize, u: usize) -> f64 {
        self.alpha[t * (self.labels + 1) + u]
    }

    pub fn beta(&self, t: usize, u: usize) -> f64 {
        self.beta[t * (self.labels + 1) + u]
    }
}

fn check_lattice(logp: &Tensor, frames: usize, target: &[usize]) -> Result<usize> {
    let u1 = target.len() + 1;
    if frames == 0 {
        return Err(Error::invalid("rnnt_loss", "no encoder frames"));
    }
    if logp.rank() != 2 || logp.shape()[0] != frames * u1 {
        return Err(Error::shape("rnnt_loss", logp.shape(), &[frames * u1]));
    }
    let v = logp.shape()[1];
    check_tokens(target, v)?;
    if target.contains(&BLANK) {
        return Err(Error::invalid("rnnt_loss", "blank in target"));
    }
    Ok(v)
}

/// α/β dynamic programme over log-probabilities laid out as in
/// [`joint_lattice`].
pub fn rnnt_lattice(logp: &Tensor, frames: usize, target: &[usize]) -> Result<RnntLattice> {
    let v = check_lattice(logp, frames, target)?;
    let (t_n, u_n) = (frames, target.len());
    let u1 = u_n + 1;
    let lp = logp.data();
    let blank = |t: usize, u: usize| lp[(t * u1 + u) * v + BLANK];
    let emit = |t: usize, u: usize| lp[(t * u1 + u) * v + target[u]];

    let mut alpha = vec![f64::NEG_INFINITY; t_n * u1];
    for t in 0..t_n {
        for u in 0..u1 {
            alpha[t * u1 + u] = if t == 0 && u == 0 {
                0.0
            } else {
                let from_t = if t > 0 { alpha[(t - 1) * u1 + u] + blank(t - 1, u) } else { f64::NEG_INFINITY };
                let from_u = if u > 0 { alpha[t * u1 + u - 1] + emit(t, u - 1) } else { f64::NEG_INFINITY };
                log_add(from_t, from_u)
            };
        }
    }
    let mut beta = vec![f64::NEG_INFINITY; t_n * u1];
    for t in (0..t_n).rev() {
        for u in (0..u1).rev() {
            beta[t * u1 + u] = if t == t_n - 1 && u == u_n {
                blank(t, u)
            } else {
                let to_t = if t + 1 < t_n { beta[(t + 1) * u1 + u] + blank(t, u) } else { f64::NEG_INFINITY };
                let to_u = if u < u_n { beta[t * u1 + u + 1] + emit(t, u) } else { f64::NEG_INFINITY };
                log_add(to_t, to_u)
            };
        }
    }
    Ok(RnntLattice {
        frames,
        labels: u_n,
        log_likelihood: alpha[(t_n - 1) * u1 + u_n] + blank(t_n - 1, u_n),
        log_likelihood_beta: beta[0],
        alpha,
        beta,
    })
}

/// Negative log-likelihood of `target` given lattice log-probabilities,
/// recorded as a differentiable scalar.
pub fn rnnt_loss<'p>(g: &Graph<'p>, logp: Var, frames: usize, target: &[usize]) -> Result<Var> {
    let lp = g.tensor(logp);
    let lat = rnnt_lattice(&lp, frames, target)?;
    let loss = -lat.log_likelihood;
    if !g.is_recording() {
        return Ok(g.constant(Tensor::scalar(loss)));
    }
    let v = lp.shape()[1];
    let u1 = target.len() + 1;
    let target = target.to_vec();
    let ll = lat.log_likelihood;
    let grad = {
        let lpd = lp.data();
        let mut grad = vec![0.0; lp.len()];
        for t in 0..frames {
            for u in 0..u1 {
                let row = (t * u1 + u) * v;
                let a = lat.alpha(t, u);
                let next_t = if t + 1 < frames {
                    lat.beta(t + 1, u)
                } else if u == u1 - 1 {
                    0.0
                } else {
                    f64::NEG_INFINITY
                };
                grad[row + BLANK] = -(a + lpd[row + BLANK] + next_t - ll).exp();
                if u + 1 < u1 {
                    let k = target[u];
                    grad[row + k] = -(a + lpd[row + k] + lat.beta(t, u + 1) - ll).exp();
                }
            }
        }
        grad
    };
    Ok(g.custom(
        &[logp],
        Tensor::scalar(loss),
        Box::new(move |up: &[f64]| vec![grad.iter().map(|x| x * up[0]).collect()]),
    ))
}

/// Prediction network, joint and loss for one utterance.
pub fn transducer_loss<'p>(
    g: &Graph<'p>,
    store: &'p ParamStore,
    cfg: &TransducerConfig,
    enc: Var,
    target: &[usize],
) -> Result<Var> {
    let frames = g.shape(enc)[0];
    let pred = prediction_forward(g, store, cfg, target)?;
    let logp = joint_lattice(g, store, cfg, enc, pred)?;
    rnnt_loss(g, logp, frames, target)
}

fn matvec_acc(out: &mut [f64], x: &[f64], w: &Tensor, row_offset: usize) {
    let cols = w.shape()[1];
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let wr = &w.data()[(row_offset + i) * cols..(row_offset + i + 1) * cols];
        for (o, &wv) in out.iter_mut().zip(wr) {
            *o += xi * wv;
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    crate::graph::sigmoid(x)
}

/// Step-wise prediction network and joint over plain tensors.
struct Stepper<'a> {
    cfg: &'a TransducerConfig,
    table: &'a Tensor,
    wx: &'a Tensor,
    wh: &'a Tensor,
    b: &'a Tensor,
    w1: &'a Tensor,
    w2: &'a Tensor,
    b2: &'a Tensor,
}

impl<'a> Stepper<'a> {
    fn new(store: &'a ParamStore, cfg: &'a TransducerConfig) -> Result<Self> {
        Ok(Stepper {
            cfg,
            table: store.get(PRED_EMBEDDING)?,
            wx: store.get(LSTM_WX)?,
            wh: store.get(LSTM_WH)?,
            b: store.get(LSTM_B)?,
            w1: store.get(JOINT_W1)?,
            w2: store.get(JOINT_W2)?,
            b2: store.get(JOINT_B2)?,
        })
    }

    fn lstm(&self, token: usize, h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let d = self.cfg.d_pred;
        let mut gates = self.b.data().to_vec();
        matvec_acc(&mut gates, self.table.row(token), self.wx, 0);
        matvec_acc(&mut gates, h, self.wh, 0);
        let mut c2 = vec![0.0; d];
        let mut h2 = vec![0.0; d];
        for j in 0..d {
            let i = sigmoid(gates[j]);
            let f = sigmoid(gates[d + j]);
            let cand = gates[2 * d + j].tanh();
            let o = sigmoid(gates[3 * d + j]);
            c2[j] = f * c[j] + i * cand;
            h2[j] = o * c2[j].tanh();
        }
        (h2, c2)
    }

    fn pred_proj(&self, h: &[f64]) -> Vec<f64> {
        let mut p = vec![0.0; self.cfg.d_joint];
        matvec_acc(&mut p, h, self.w1, self.cfg.d_model);
        p
    }

    fn logits(&self, enc_proj: &[f64], pred_proj: &[f64]) -> Vec<f64> {
        let z: Vec<f64> = enc_proj.iter().zip(pred_proj).map(|(a, b)| (a + b).tanh()).collect();
        let mut out = self.b2.data().to_vec();
        matvec_acc(&mut out, &z, self.w2, 0);
        out
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Greedy search: per frame, emit argmax tokens until blank wins or the
/// per-frame cap is reached. Ties go to the lowest id.
pub fn greedy_decode(store: &ParamStore, cfg: &TransducerConfig, enc: &Tensor) -> Result<Vec<usize>> {
    if cfg.max_symbols_per_frame == 0 {
        return Err(Error::invalid("greedy_decode", "max_symbols_per_frame must be at least 1"));
    }
    if enc.rank() != 2 || enc.shape()[1] != cfg.d_model {
        return Err(Error::shape("greedy_decode", enc.shape(), &[cfg.d_model]));
    }
    let s = Stepper::new(store, cfg)?;
    let b1 = store.get(JOINT_B1)?;
    let d = cfg.d_pred;
    let (mut h, mut c) = (vec![0.0; d], vec![0.0; d]);
    let mut pred = s.pred_proj(&h);
    let mut out = Vec::new();
    for t in 0..enc.shape()[0] {
        let mut e = b1.data().to_vec();
        matvec_acc(&mut e, enc.row(t), s.w1, 0);
        for _ in 0..cfg.max_symbols_per_frame {
            let k = argmax(&s.logits(&e, &pred));
            if k == BLANK {
                break;
            }
            out.push(k);
            (h, c) = s.lstm(k, &h, &c);
            pred = s.pred_proj(&h);
        }
    }
    Ok(out)
}

/// Log-probability row for one (encoder frame, history) pair without a graph.
pub fn joint_log_probs(store: &ParamStore, cfg: &TransducerConfig, enc_row: &[f64], history: &[usize]) -> Result<Vec<f64>> {
    check_tokens(history, cfg.vocab_size)?;
    let s = Stepper::new(store, cfg)?;
    let d = cfg.d_pred;
    let (mut h, mut c) = (vec![0.0; d], vec![0.0; d]);
    for &k in history {
        (h, c) = s.lstm(k, &h, &c);
    }
    let mut e = store.get(JOINT_B1)?.data().to_vec();
    matvec_acc(&mut e, enc_row, s.w1, 0);
    let logits = s.logits(&e, &s.pred_proj(&h));
    let z = log_sum_exp(&logits);
    Ok(logits.into_iter().map(|x| x - z).collect())
}
