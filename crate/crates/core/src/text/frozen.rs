//! Frozen tiny transformer text encoder.
//!
//! Two post-norm transformer layers of width 128 with two heads, learned
//! positional rows and a prepended CLS row. Weights come from a seeded
//! generator and never train; outputs are plain tensors outside any graph.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrozenEncoderConfig {
    pub vocab_size: usize,
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_width: usize,
    pub max_positions: usize,
    pub seed: u64,
}

impl FrozenEncoderConfig {
    pub fn tiny(vocab_size: usize, seed: u64) -> Self {
        FrozenEncoderConfig {
            vocab_size,
            width: 128,
            heads: 2,
            layers: 2,
            ff_width: 512,
            max_positions: 512,
            seed,
        }
    }
}

/// Encoder output: `(S+1) × width`, row 0 is CLS.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenOutput {
    pub hidden: Tensor,
    /// Input was longer than `max_positions - 1` tokens and was cut.
    pub truncated: bool,
}

pub struct FrozenTextEncoder {
    config: FrozenEncoderConfig,
    params: ParamStore,
    cache: Mutex<HashMap<Vec<usize>, Arc<FrozenOutput>>>,
}

impl std::fmt::Debug for FrozenTextEncoder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FrozenTextEncoder")
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

impl FrozenTextEncoder {
    pub fn new(config: FrozenEncoderConfig) -> Result<Self> {
        let w = config.width;
        if config.heads == 0 || w % config.heads != 0 {
            return Err(Error::Config(format!("width {w} not divisible by {} heads", config.heads)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut p = ParamStore::new();
        p.insert("tok", Tensor::randn(&[config.vocab_size, w], 1.0, &mut rng));
        p.insert("cls", Tensor::randn(&[1, w], 1.0, &mut rng));
        p.insert("pos", Tensor::randn(&[config.max_positions, w], 1.0, &mut rng));
        p.layer_norm("emb_ln", w);
        for l in 0..config.layers {
            for name in ["q", "k", "v", "o"] {
                p.glorot(&format!("layers.{l}.attn.{name}.w"), w, w, &mut rng);
                p.zeros(&format!("layers.{l}.attn.{name}.b"), &[w]);
            }
            p.layer_norm(&format!("layers.{l}.ln1"), w);
            p.glorot(&format!("layers.{l}.ff.in.w"), w, config.ff_width, &mut rng);
            p.zeros(&format!("layers.{l}.ff.in.b"), &[config.ff_width]);
            p.glorot(&format!("layers.{l}.ff.out.w"), config.ff_width, w, &mut rng);
            p.zeros(&format!("layers.{l}.ff.out.b"), &[w]);
            p.layer_norm(&format!("layers.{l}.ln2"), w);
        }
        p.apply_mask(|_| false);
        Ok(FrozenTextEncoder {
            config,
            params: p,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &FrozenEncoderConfig {
        &self.config
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Encodes `tokens` with CLS prepended. Inputs longer than
    /// `max_positions - 1` are truncated and flagged.
    pub fn encode(&self, tokens: &[usize]) -> Result<FrozenOutput> {
        let keep = tokens.len().min(self.config.max_positions - 1);
        let truncated = keep < tokens.len();
        let tokens = &tokens[..keep];
        let g = Graph::inference();
        let hidden = self.forward(&g, tokens)?;
        Ok(FrozenOutput {
            hidden: g.tensor(hidden),
            truncated,
        })
    }

    /// [`encode`](Self::encode) memoised on the token sequence.
    pub fn encode_cached(&self, tokens: &[usize]) -> Result<Arc<FrozenOutput>> {
        if let Some(hit) = self.cache.lock().expect("cache lock").get(tokens) {
            return Ok(Arc::clone(hit));
        }
        let out = Arc::new(self.encode(tokens)?);
        self.cache
            .lock()
            .expect("cache lock")
            .insert(tokens.to_vec(), Arc::clone(&out));
        Ok(out)
    }

    fn forward<'p>(&'p self, g: &Graph<'p>, tokens: &[usize]) -> Result<Var> {
        let p = &self.params;
        let n = tokens.len() + 1;
        let tok = p.bind(g, "tok")?;
        let cls = p.bind(g, "cls")?;
        let pos = p.bind(g, "pos")?;
        let x = if tokens.is_empty() {
            cls
        } else {
            let e = g.embedding(tok, tokens)?;
            g.concat(&[cls, e], 0)?
        };
        let pos_rows = g.slice(pos, 0, 0, n)?;
        let x = g.add(x, pos_rows)?;
        let mut x = nn::layer_norm(g, p, "emb_ln", x)?;

        let heads = self.config.heads;
        let d_head = self.config.width / heads;
        let visible = vec![true; n * n];
        for l in 0..self.config.layers {
            let pre = format!("layers.{l}");
            let q = nn::linear(g, p, &format!("{pre}.attn.q"), x)?;
            let k = nn::linear(g, p, &format!("{pre}.attn.k"), x)?;
            let v = nn::linear(g, p, &format!("{pre}.attn.v"), x)?;
            let a = nn::multi_head_attend(g, q, k, v, heads, d_head, &visible)?;
            let a = nn::linear(g, p, &format!("{pre}.attn.o"), a)?;
            let r = g.add(x, a)?;
            x = nn::layer_norm(g, p, &format!("{pre}.ln1"), r)?;

            let h = nn::linear(g, p, &format!("{pre}.ff.in"), x)?;
            // sigmoid approximation of GELU
            let gate = g.sigmoid(g.scale(h, 1.702));
            let h = g.mul(h, gate)?;
            let h = nn::linear(g, p, &format!("{pre}.ff.out"), h)?;
            let r = g.add(x, h)?;
            x = nn::layer_norm(g, p, &format!("{pre}.ln2"), r)?;
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn enc() -> FrozenTextEncoder {
        FrozenTextEncoder::new(FrozenEncoderConfig::tiny(40, 3)).unwrap()
    }

    #[test]
    fn deterministic_and_cls_only_when_empty() {
        let e = enc();
        let a = e.encode(&[5, 6, 7]).unwrap();
        let b = e.encode(&[5, 6, 7]).unwrap();
        assert!(a.hidden.bit_eq(&b.hidden));
        assert_eq!(a.hidden.shape(), &[4, 128]);
        assert_eq!(e.encode(&[]).unwrap().hidden.shape(), &[1, 128]);
        // same seed, separate instance
        assert!(enc().encode(&[5, 6, 7]).unwrap().hidden.bit_eq(&a.hidden));
    }

    #[test]
    fn positions_break_permutation_symmetry() {
        let e = enc();
        let a = e.encode(&[5, 6, 7]).unwrap().hidden;
        let b = e.encode(&[7, 6, 5]).unwrap().hidden;
        assert!(a.max_abs_diff(&b) > 1e-3);
    }

    #[test]
    fn overlong_input_is_truncated() {
        let e = enc();
        let tokens = vec![3; 600];
        let out = e.encode(&tokens).unwrap();
        assert!(out.truncated);
        assert_eq!(out.hidden.shape(), &[512, 128]);
        assert!(!e.encode(&[3; 10]).unwrap().truncated);
    }

    #[test]
    fn frozen_parameters_are_not_trainable() {
        assert_eq!(enc().params.count_trainable(), 0);
    }
}
