//! Layer helpers over named parameters.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;

pub const LN_EPS: f64 = 1e-5;

/// `x · W + b` with `prefix.w` and, when present, `prefix.b`.
pub fn linear<'p>(g: &Graph<'p>, store: &'p ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w = store.bind(g, &format!("{prefix}.w"))?;
    let y = g.matmul(x, w)?;
    let bias = format!("{prefix}.b");
    if store.contains(&bias) {
        let b = store.bind(g, &bias)?;
        g.add_bias(y, b)
    } else {
        Ok(y)
    }
}

pub fn layer_norm<'p>(g: &Graph<'p>, store: &'p ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let gamma = store.bind(g, &format!("{prefix}.gamma"))?;
    let beta = store.bind(g, &format!("{prefix}.beta"))?;
    g.layer_norm(x, gamma, beta, LN_EPS)
}

/// Scaled dot-product attention over `heads` column groups of width
/// `d_head`. `q` is `[Tq × h·d]`, `k`/`v` are `[Tk × h·d]`, `visible` is a
/// row-major `[Tq × Tk]` mask. Returns concatenated head outputs `[Tq × h·d]`.
pub fn multi_head_attend(
    g: &Graph<'_>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    d_head: usize,
    visible: &[bool],
) -> Result<Var> {
    let (qs, ks) = (g.shape(q), g.shape(k));
    if qs.len() != 2 || ks.len() != 2 || qs[1] != heads * d_head || ks[1] != heads * d_head {
        return Err(Error::shape("multi_head_attend", &qs, &ks));
    }
    if visible.len() != qs[0] * ks[0] {
        return Err(Error::shape("multi_head_attend", &[qs[0], ks[0]], &[visible.len()]));
    }
    let scale = 1.0 / (d_head as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice(q, 1, h * d_head, d_head)?;
        let kh = g.slice(k, 1, h * d_head, d_head)?;
        let vh = g.slice(v, 1, h * d_head, d_head)?;
        let kt = g.transpose(kh)?;
        let logits = g.matmul(qh, kt)?;
        let logits = g.scale(logits, scale);
        let weights = g.softmax_masked(logits, visible)?;
        outs.push(g.matmul(weights, vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        g.concat(&outs, 1)
    }
}
