//! Streaming conformer encoder.
//!
//! Frame stacking → dense input projection → sinusoidal positions on the
//! acoustic frames → `n_blocks` conformer blocks. Every component is causal:
//! attention is restricted by a [`WindowMask`], the convolution is padded on
//! the left only, and normalisation is per frame. Encoding a prefix of the
//! input therefore reproduces the corresponding prefix of the full output.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    build_window_mask, feature_concat, init_attention_params, mhca_biasing, mhsa_plain, mhsa_prompted,
    AttentionBlockParams, WindowMask,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::text::PromptEmbedding;

/// How the encoder consumes the prompt.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConsumptionMode {
    None,
    FeatureConcat,
    CrossAttention,
    Prompt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_feat: usize,
    pub n_blocks: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_head: usize,
    pub conv_kernel: usize,
    pub ff_expansion: usize,
    pub subsample_factor: usize,
    pub context_window: usize,
    pub consumption: ConsumptionMode,
    /// Blocks that consume the prompt (prompt and cross-attention modes).
    pub prompt_blocks: Vec<usize>,
    pub token_window: usize,
}

impl EncoderConfig {
    pub fn desk(d_feat: usize, consumption: ConsumptionMode) -> Self {
        EncoderConfig {
            d_feat,
            n_blocks: 2,
            d_model: 32,
            heads: 2,
            d_head: 8,
            conv_kernel: 5,
            ff_expansion: 4,
            subsample_factor: 3,
            context_window: 40,
            consumption,
            prompt_blocks: vec![0, 1],
            token_window: 30,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.subsample_factor == 0 {
            return Err(Error::Config("subsample factor must be at least 1".into()));
        }
        if self.conv_kernel == 0 || self.heads == 0 || self.d_head == 0 {
            return Err(Error::Config("conv kernel, heads and head width must be positive".into()));
        }
        if let Some(b) = self.prompt_blocks.iter().find(|&&b| b >= self.n_blocks) {
            return Err(Error::Config(format!("prompt block {b} out of range 0..{}", self.n_blocks)));
        }
        Ok(())
    }

    /// Width of the input projection's input.
    pub fn input_dim(&self) -> usize {
        let stacked = self.d_feat * self.subsample_factor;
        if self.consumption == ConsumptionMode::FeatureConcat {
            stacked + self.d_model
        } else {
            stacked
        }
    }

    fn block_consumes(&self, block: usize) -> bool {
        matches!(self.consumption, ConsumptionMode::Prompt | ConsumptionMode::CrossAttention)
            && self.prompt_blocks.contains(&block)
    }
}

pub fn block_prefix(i: usize) -> String {
    format!("enc.blocks.{i}")
}

pub fn init_encoder_params<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut R) -> Result<()> {
    cfg.validate()?;
    let d = cfg.d_model;
    store.glorot("enc.input.w", cfg.input_dim(), d, rng);
    store.zeros("enc.input.b", &[d]);
    let inner = d * cfg.ff_expansion;
    for i in 0..cfg.n_blocks {
        let p = block_prefix(i);
        for ff in ["ff1", "ff2"] {
            store.layer_norm(&format!("{p}.{ff}.ln"), d);
            store.glorot(&format!("{p}.{ff}.up.w"), d, inner, rng);
            store.zeros(&format!("{p}.{ff}.up.b"), &[inner]);
            store.glorot(&format!("{p}.{ff}.down.w"), inner, d, rng);
            store.zeros(&format!("{p}.{ff}.down.b"), &[d]);
        }
        store.layer_norm(&format!("{p}.attn.ln"), d);
        let cross = cfg.consumption == ConsumptionMode::CrossAttention && cfg.prompt_blocks.contains(&i);
        init_attention_params(store, &format!("{p}.attn"), d, cfg.heads, cfg.d_head, cross, rng);
        store.layer_norm(&format!("{p}.conv.ln"), d);
        store.glorot(&format!("{p}.conv.pw_in.w"), d, 2 * d, rng);
        store.zeros(&format!("{p}.conv.pw_in.b"), &[2 * d]);
        let dw_limit = (3.0 / cfg.conv_kernel as f64).sqrt();
        store.insert(
            format!("{p}.conv.dw.w"),
            Tensor::uniform(&[cfg.conv_kernel, d], dw_limit, rng),
        );
        store.zeros(&format!("{p}.conv.dw.b"), &[d]);
        store.layer_norm(&format!("{p}.conv.mid_ln"), d);
        store.glorot(&format!("{p}.conv.pw_out.w"), d, d, rng);
        store.zeros(&format!("{p}.conv.pw_out.b"), &[d]);
        store.layer_norm(&format!("{p}.out_ln"), d);
    }
    Ok(())
}

/// Stacks consecutive groups of `factor` frames; the tail group is
/// zero-padded. `[T×d] → [⌈T/f⌉ × f·d]`.
pub fn subsample(features: &Tensor, factor: usize) -> Result<Tensor> {
    if features.rank() != 2 || features.shape()[0] == 0 {
        return Err(Error::invalid("subsample", format!("need at least one frame, got {:?}", features.shape())));
    }
    if factor == 0 {
        return Err(Error::invalid("subsample", "factor must be at least 1"));
    }
    let (t, d) = (features.shape()[0], features.shape()[1]);
    let out_t = t.div_ceil(factor);
    let mut data = vec![0.0; out_t * factor * d];
    data[..t * d].copy_from_slice(features.data());
    Tensor::new(vec![out_t, factor * d], data)
}

/// Sinusoidal absolute positions `[T×d]`.
pub fn positional_encoding(frames: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; frames * d];
    for t in 0..frames {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = t as f64 / 10000f64.powf(2.0 * pair / d as f64);
            data[t * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![frames, d], data).expect("consistent shape")
}

fn feed_forward<'p>(g: &Graph<'p>, store: &'p ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let h = nn::layer_norm(g, store, &format!("{prefix}.ln"), x)?;
    let h = nn::linear(g, store, &format!("{prefix}.up"), h)?;
    let h = g.swish(h);
    nn::linear(g, store, &format!("{prefix}.down"), h)
}

fn conv_module<'p>(g: &Graph<'p>, store: &'p ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let d = g.shape(x)[1];
    let h = nn::layer_norm(g, store, &format!("{prefix}.ln"), x)?;
    let h = nn::linear(g, store, &format!("{prefix}.pw_in"), h)?;
    let value = g.slice(h, 1, 0, d)?;
    let gate = g.slice(h, 1, d, d)?;
    let gate = g.sigmoid(gate);
    let h = g.mul(value, gate)?;
    let w = store.bind(g, &format!("{prefix}.dw.w"))?;
    let b = store.bind(g, &format!("{prefix}.dw.b"))?;
    let h = g.causal_depthwise_conv(h, w)?;
    let h = g.add_bias(h, b)?;
    let h = nn::layer_norm(g, store, &format!("{prefix}.mid_ln"), h)?;
    let h = g.swish(h);
    nn::linear(g, store, &format!("{prefix}.pw_out"), h)
}

/// One conformer block. `plain_mask` has no prompt columns; `prompt_mask`
/// matches `prompt` and is used only by prompt-consuming blocks.
#[allow(clippy::too_many_arguments)]
pub fn conformer_block<'p>(
    g: &Graph<'p>,
    store: &'p ParamStore,
    cfg: &EncoderConfig,
    block: usize,
    x: Var,
    prompt: &PromptEmbedding,
    plain_mask: &WindowMask,
    prompt_mask: &WindowMask,
) -> Result<Var> {
    let p = block_prefix(block);
    let ff = feed_forward(g, store, &format!("{p}.ff1"), x)?;
    let ff = g.scale(ff, 0.5);
    let x = g.add(x, ff)?;

    let h = nn::layer_norm(g, store, &format!("{p}.attn.ln"), x)?;
    let consumes = cfg.block_consumes(block);
    let with_cross = consumes && cfg.consumption == ConsumptionMode::CrossAttention;
    let ap = AttentionBlockParams::bind(g, store, &format!("{p}.attn"), cfg.heads, cfg.d_head, with_cross)?;
    let att = match (consumes, cfg.consumption) {
        (true, ConsumptionMode::Prompt) => mhsa_prompted(g, h, prompt, &ap, prompt_mask, cfg.token_window)?,
        (true, ConsumptionMode::CrossAttention) => {
            let sa = mhsa_plain(g, h, &ap, plain_mask)?;
            mhca_biasing(g, sa, prompt, &ap)?
        }
        _ => mhsa_plain(g, h, &ap, plain_mask)?,
    };
    let x = g.add(x, att)?;

    let c = conv_module(g, store, &format!("{p}.conv"), x)?;
    let x = g.add(x, c)?;

    let ff = feed_forward(g, store, &format!("{p}.ff2"), x)?;
    let ff = g.scale(ff, 0.5);
    let x = g.add(x, ff)?;
    nn::layer_norm(g, store, &format!("{p}.out_ln"), x)
}

/// Full encoder over raw feature frames `[T×d_feat]`, giving `[⌈T/f⌉ × d_model]`.
pub fn encode<'p>(
    g: &Graph<'p>,
    store: &'p ParamStore,
    cfg: &EncoderConfig,
    features: &Tensor,
    prompt: &PromptEmbedding,
) -> Result<Var> {
    if features.rank() != 2 || features.shape()[1] != cfg.d_feat {
        return Err(Error::shape("encode", features.shape(), &[cfg.d_feat]));
    }
    if !prompt.is_empty() && prompt.d_model() != cfg.d_model {
        return Err(Error::shape("encode prompt", &[prompt.len(), prompt.d_model()], &[cfg.d_model]));
    }
    match cfg.consumption {
        ConsumptionMode::None if !prompt.is_empty() => {
            return Err(Error::ModeMismatch("prompt given to an encoder without context consumption".into()))
        }
        ConsumptionMode::FeatureConcat if prompt.len() > 1 => {
            return Err(Error::ModeMismatch(format!(
                "feature concatenation takes at most one prompt row, got {}",
                prompt.len()
            )))
        }
        _ => {}
    }

    let stacked = g.constant(subsample(features, cfg.subsample_factor)?);
    let x_in = if cfg.consumption == ConsumptionMode::FeatureConcat {
        feature_concat(g, prompt, stacked)?
    } else {
        stacked
    };
    let t = g.shape(x_in)[0];
    let x = nn::linear(g, store, "enc.input", x_in)?;
    let pe = g.constant(positional_encoding(t, cfg.d_model));
    let mut x = g.add(x, pe)?;

    let plain_mask = build_window_mask(t, 0, cfg.context_window);
    let prompt_mask = if cfg.consumption == ConsumptionMode::Prompt {
        build_window_mask(t, prompt.len(), cfg.context_window)
    } else {
        plain_mask.clone()
    };
    for block in 0..cfg.n_blocks {
        x = conformer_block(g, store, cfg, block, x, prompt, &plain_mask, &prompt_mask)?;
    }
    Ok(x)
}
