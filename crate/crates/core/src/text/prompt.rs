//! Prompt generation: context tokens → encoder-width prompt rows.
//!
//! Tokens are embedded by one of four generators, passed through a stack of
//! dense + tanh projections, layer-normalised, and truncated to a fixed
//! token window.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::text::frozen::FrozenTextEncoder;

pub const EMBEDDING: &str = "prompt.embedding";
pub const LN: &str = "prompt.ln";

pub fn projection(k: usize) -> String {
    format!("prompt.proj.{k}")
}

/// How context tokens are embedded before projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContextGenerator {
    /// CLS row of the frozen text encoder (one row per context).
    FrozenSentence,
    /// Per-token rows of the frozen text encoder, CLS discarded.
    FrozenToken,
    /// Trainable table, randomly initialised.
    LearnedRandom,
    /// Trainable table copied from the prediction-network embedding.
    LearnedCopied,
}

impl ContextGenerator {
    pub fn is_frozen(self) -> bool {
        matches!(self, ContextGenerator::FrozenSentence | ContextGenerator::FrozenToken)
    }
}

/// Which end of an over-long prompt survives truncation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Truncation {
    #[default]
    First,
    Last,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    pub generator: ContextGenerator,
    /// Width of the generator output (frozen width or embedding width).
    pub d_enc: usize,
    /// Encoder model width; the last projection maps to it.
    pub d_model: usize,
    pub n_projections: usize,
    pub token_window: usize,
    #[serde(default)]
    pub truncation: Truncation,
}

impl PromptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.token_window == 0 {
            return Err(Error::Config("token window must be at least 1".into()));
        }
        if self.n_projections == 0 {
            return Err(Error::Config("at least one prompt projection is required".into()));
        }
        Ok(())
    }

    /// `(in, out)` widths of projection `k`; inner widths equal `d_enc`.
    pub fn projection_dims(&self, k: usize) -> (usize, usize) {
        let out = if k + 1 == self.n_projections {
            self.d_model
        } else {
            self.d_enc
        };
        (self.d_enc, out)
    }
}

/// Generator selection with the data each variant needs at run time.
#[derive(Clone, Copy, Debug)]
pub enum ContextEncoderKind<'a> {
    FrozenSentence(&'a FrozenTextEncoder),
    FrozenToken(&'a FrozenTextEncoder),
    LearnedRandom,
    LearnedCopied,
}

/// Prompt rows `P[S'×d_model]` bound to a graph; `S' = 0` means no context.
#[derive(Clone, Copy, Debug)]
pub struct PromptEmbedding {
    values: Option<Var>,
    rows: usize,
    d_model: usize,
}

impl PromptEmbedding {
    pub fn empty(d_model: usize) -> Self {
        PromptEmbedding {
            values: None,
            rows: 0,
            d_model,
        }
    }

    /// Wraps an existing `[S'×d_model]` node.
    pub fn from_var(g: &Graph<'_>, v: Var) -> Result<Self> {
        let shape = g.shape(v);
        if shape.len() != 2 {
            return Err(Error::invalid("prompt", format!("rank-2 prompt required, got {shape:?}")));
        }
        Ok(PromptEmbedding {
            values: (shape[0] > 0).then_some(v),
            rows: shape[0],
            d_model: shape[1],
        })
    }

    pub fn len(&self) -> usize {
        self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn var(&self) -> Option<Var> {
        self.values
    }
}

/// Creates projection, LN and (for learned generators) embedding parameters.
pub fn init_prompt_params<R: Rng + ?Sized>(
    store: &mut ParamStore,
    cfg: &PromptConfig,
    vocab_size: usize,
    rng: &mut R,
) -> Result<()> {
    cfg.validate()?;
    if !cfg.generator.is_frozen() {
        store.insert(EMBEDDING, Tensor::randn(&[vocab_size, cfg.d_enc], 1.0, rng));
    }
    for k in 0..cfg.n_projections {
        let (i, o) = cfg.projection_dims(k);
        store.glorot(&format!("{}.w", projection(k)), i, o, rng);
        store.zeros(&format!("{}.b", projection(k)), &[o]);
    }
    store.layer_norm(LN, cfg.d_model);
    Ok(())
}

/// Number of scalars on the prompt path: projections, biases, LN and the
/// learned table when there is one.
pub fn prompt_param_count(store: &ParamStore) -> usize {
    store
        .iter()
        .filter(|(n, _)| n.starts_with("prompt."))
        .map(|(_, t)| t.len())
        .sum()
}

/// Embeds context tokens as `[S×d_enc]`. Frozen variants enter the graph as
/// constants and receive no gradient.
pub fn encode_context<'p>(
    g: &Graph<'p>,
    store: &'p ParamStore,
    tokens: &[usize],
    kind: ContextEncoderKind<'_>,
) -> Result<Var> {
    match kind {
        ContextEncoderKind::FrozenSentence(enc) => {
            let out = enc.encode_cached(tokens)?;
            Ok(g.constant(out.hidden.slice_rows(0, 1)))
        }
        ContextEncoderKind::FrozenToken(enc) => {
            let out = enc.encode_cached(tokens)?;
            let rows = out.hidden.rows() - 1;
            Ok(g.constant(out.hidden.slice_rows(1, rows)))
        }
        ContextEncoderKind::LearnedRandom | ContextEncoderKind::LearnedCopied => {
            let table = store.bind(g, EMBEDDING)?;
            g.embedding(table, tokens)
        }
    }
}

/// Dense+tanh stack, LN, then keeps `min(S, TW)` rows from the configured end.
pub fn project_prompt<'p>(
    g: &Graph<'p>,
    store: &'p ParamStore,
    enc: Var,
    cfg: &PromptConfig,
) -> Result<PromptEmbedding> {
    cfg.validate()?;
    let shape = g.shape(enc);
    if shape.len() != 2 || shape[1] != cfg.d_enc {
        return Err(Error::shape("project_prompt", &shape, &[cfg.d_enc]));
    }
    let s = shape[0];
    if s == 0 {
        return Ok(PromptEmbedding::empty(cfg.d_model));
    }
    let mut h = enc;
    for k in 0..cfg.n_projections {
        let z = nn::linear(g, store, &projection(k), h)?;
        h = g.tanh(z);
    }
    let h = nn::layer_norm(g, store, LN, h)?;
    let keep = s.min(cfg.token_window);
    let out = if keep == s {
        h
    } else {
        let start = match cfg.truncation {
            Truncation::First => 0,
            Truncation::Last => s - keep,
        };
        g.slice(h, 0, start, keep)?
    };
    PromptEmbedding::from_var(g, out)
}

/// Initialises the learned context table as a value copy of `source` (the
/// prediction-network embedding) and, when `cp_source` is given, the first
/// projection weight as a copy of it. Every shape is validated before
/// anything is written.
pub fn init_copied(
    store: &mut ParamStore,
    cfg: &PromptConfig,
    vocab_size: usize,
    source: &Tensor,
    cp_source: Option<&Tensor>,
) -> Result<()> {
    let table_shape = [vocab_size, cfg.d_enc];
    if source.shape() != table_shape {
        return Err(Error::IncompatibleCopy {
            target: EMBEDDING.into(),
            expected: table_shape.to_vec(),
            got: source.shape().to_vec(),
        });
    }
    let first = format!("{}.w", projection(0));
    let (i, o) = cfg.projection_dims(0);
    if let Some(cp) = cp_source {
        if cp.shape() != [i, o] {
            return Err(Error::IncompatibleCopy {
                target: first,
                expected: vec![i, o],
                got: cp.shape().to_vec(),
            });
        }
    }
    store.insert(EMBEDDING, source.detached());
    if let Some(cp) = cp_source {
        store.insert(first, cp.detached());
    }
    Ok(())
}
