//! Streaming self-attention and the three ways of consuming prompts.
//!
//! - [`feature_concat`]: one summary row appended to every input frame.
//! - [`mhca_biasing`]: a separate cross-attention module with its own
//!   kernels, added residually to the self-attention output.
//! - [`mhsa_prompted`]: prompt rows concatenated in front of the acoustic
//!   frames on the key/value side only, projected by the block's own
//!   kernels and normalised by the same softmax.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::multi_head_attend;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::text::PromptEmbedding;

/// Visibility of keys for each acoustic query. Columns are the `prompt`
/// rows first, then the acoustic frames.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowMask {
    frames: usize,
    prompt: usize,
    context_window: usize,
    visible: Vec<bool>,
}

impl WindowMask {
    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt
    }

    pub fn context_window(&self) -> usize {
        self.context_window
    }

    pub fn cols(&self) -> usize {
        self.prompt + self.frames
    }

    pub fn visible(&self) -> &[bool] {
        &self.visible
    }

    pub fn is_visible(&self, query: usize, col: usize) -> bool {
        self.visible[query * self.cols() + col]
    }
}

/// Query `i` sees every prompt column and acoustic frames `i-CW ..= i`.
pub fn build_window_mask(frames: usize, prompt: usize, context_window: usize) -> WindowMask {
    let cols = prompt + frames;
    let mut visible = vec![false; frames * cols];
    for i in 0..frames {
        let row = &mut visible[i * cols..(i + 1) * cols];
        row[..prompt].fill(true);
        let lo = i.saturating_sub(context_window);
        row[prompt + lo..=prompt + i].fill(true);
    }
    WindowMask {
        frames,
        prompt,
        context_window,
        visible,
    }
}

/// Cross-attention kernels of one block.
#[derive(Clone, Copy, Debug)]
pub struct CrossAttentionParams {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
}

/// One block's attention kernels bound to a graph.
#[derive(Clone, Copy, Debug)]
pub struct AttentionBlockParams {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub heads: usize,
    pub d_head: usize,
    pub cross: Option<CrossAttentionParams>,
}

pub const SELF_KERNELS: [&str; 4] = ["w_q", "w_k", "w_v", "w_o"];
pub const CROSS_KERNELS: [&str; 4] = ["w_qca", "w_kca", "w_vca", "w_oca"];

/// Creates `prefix.w_{q,k,v,o}` and, with `cross`, `prefix.w_{q,k,v,o}ca`.
pub fn init_attention_params<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    d_model: usize,
    heads: usize,
    d_head: usize,
    cross: bool,
    rng: &mut R,
) {
    let inner = heads * d_head;
    for name in ["w_q", "w_k", "w_v"] {
        store.glorot(&format!("{prefix}.{name}"), d_model, inner, rng);
    }
    store.glorot(&format!("{prefix}.w_o"), inner, d_model, rng);
    if cross {
        init_cross_attention_params(store, prefix, d_model, heads, d_head, rng);
    }
}

pub fn init_cross_attention_params<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    d_model: usize,
    heads: usize,
    d_head: usize,
    rng: &mut R,
) {
    let inner = heads * d_head;
    for name in ["w_qca", "w_kca", "w_vca"] {
        store.glorot(&format!("{prefix}.{name}"), d_model, inner, rng);
    }
    store.glorot(&format!("{prefix}.w_oca"), inner, d_model, rng);
}

impl AttentionBlockParams {
    pub fn bind<'p>(
        g: &Graph<'p>,
        store: &'p ParamStore,
        prefix: &str,
        heads: usize,
        d_head: usize,
        with_cross: bool,
    ) -> Result<Self> {
        let b = |n: &str| store.bind(g, &format!("{prefix}.{n}"));
        let cross = if with_cross {
            Some(CrossAttentionParams {
                w_q: b("w_qca")?,
                w_k: b("w_kca")?,
                w_v: b("w_vca")?,
                w_o: b("w_oca")?,
            })
        } else {
            None
        };
        let p = AttentionBlockParams {
            w_q: b("w_q")?,
            w_k: b("w_k")?,
            w_v: b("w_v")?,
            w_o: b("w_o")?,
            heads,
            d_head,
            cross,
        };
        let inner = heads * d_head;
        for w in [p.w_q, p.w_k, p.w_v] {
            if g.shape(w)[1] != inner {
                return Err(Error::shape("attention kernels", &g.shape(w), &[inner]));
            }
        }
        Ok(p)
    }
}

fn check_mask(g: &Graph<'_>, a: Var, mask: &WindowMask, prompt: usize) -> Result<()> {
    let t = g.shape(a)[0];
    if mask.frames != t || mask.prompt != prompt {
        return Err(Error::ModeMismatch(format!(
            "mask built for {} frames and {} prompt rows, input has {t} frames and {prompt} prompt rows",
            mask.frames, mask.prompt
        )));
    }
    Ok(())
}

/// Masked multi-head self-attention over `A[T×d_model]`.
pub fn mhsa_plain(g: &Graph<'_>, a: Var, p: &AttentionBlockParams, mask: &WindowMask) -> Result<Var> {
    check_mask(g, a, mask, 0)?;
    let q = g.matmul(a, p.w_q)?;
    let k = g.matmul(a, p.w_k)?;
    let v = g.matmul(a, p.w_v)?;
    let heads = multi_head_attend(g, q, k, v, p.heads, p.d_head, mask.visible())?;
    g.matmul(heads, p.w_o)
}

/// Self-attention whose keys and values are computed from `P ⊕ A` with the
/// block's own kernels; queries come from `A` alone, so the output keeps
/// `T` rows. Prompts longer than `token_window` are rejected.
pub fn mhsa_prompted(
    g: &Graph<'_>,
    a: Var,
    prompt: &PromptEmbedding,
    p: &AttentionBlockParams,
    mask: &WindowMask,
    token_window: usize,
) -> Result<Var> {
    if prompt.len() > token_window {
        return Err(Error::invalid(
            "mhsa_prompted",
            format!("{} prompt rows exceed token window {token_window}", prompt.len()),
        ));
    }
    check_mask(g, a, mask, prompt.len())?;
    let kv_in = match prompt.var() {
        Some(pv) => g.concat(&[pv, a], 0)?,
        None => a,
    };
    let q = g.matmul(a, p.w_q)?;
    let k = g.matmul(kv_in, p.w_k)?;
    let v = g.matmul(kv_in, p.w_v)?;
    let heads = multi_head_attend(g, q, k, v, p.heads, p.d_head, mask.visible())?;
    g.matmul(heads, p.w_o)
}

/// Cross-attention from `mhsa_out` onto the prompt rows with separate
/// kernels, added to `mhsa_out`. An empty prompt contributes nothing.
pub fn mhca_biasing(g: &Graph<'_>, mhsa_out: Var, prompt: &PromptEmbedding, p: &AttentionBlockParams) -> Result<Var> {
    let ca = p
        .cross
        .ok_or_else(|| Error::ModeMismatch("cross-attention kernels are missing".into()))?;
    let Some(pv) = prompt.var() else {
        return Ok(mhsa_out);
    };
    let t = g.shape(mhsa_out)[0];
    let q = g.matmul(mhsa_out, ca.w_q)?;
    let k = g.matmul(pv, ca.w_k)?;
    let v = g.matmul(pv, ca.w_v)?;
    let visible = vec![true; t * prompt.len()];
    let heads = multi_head_attend(g, q, k, v, p.heads, p.d_head, &visible)?;
    let mhca = g.matmul(heads, ca.w_o)?;
    g.add(mhsa_out, mhca)
}

/// Appends the single summary row (or zeros of width `d_prompt` when the
/// prompt is empty) in front of every frame's features.
pub fn feature_concat(g: &Graph<'_>, prompt: &PromptEmbedding, a_input: Var) -> Result<Var> {
    let t = g.shape(a_input)[0];
    let repeated = match prompt.var() {
        None => g.constant(Tensor::zeros(&[t, prompt.d_model()])),
        Some(_) if prompt.len() != 1 => {
            return Err(Error::ModeMismatch(format!(
                "feature concatenation needs a single summary row, got {}",
                prompt.len()
            )))
        }
        Some(pv) => g.embedding(pv, &vec![0; t])?,
    };
    g.concat(&[repeated, a_input], 1)
}
