//! Full context-prompted transducer: prompt path, encoder, prediction and
//! joint networks over one parameter store.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{self, ConsumptionMode, EncoderConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::text::{
    encode_context, init_copied, init_prompt_params, project_prompt, ContextEncoderKind, ContextGenerator,
    FrozenEncoderConfig, FrozenTextEncoder, PromptConfig, PromptEmbedding, Truncation,
};
use crate::transducer::{self, TransducerConfig};

const FROZEN_SEED: u64 = 0x5eed_7e47;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub transducer: TransducerConfig,
    pub prompt: Option<PromptConfig>,
    pub frozen: Option<FrozenEncoderConfig>,
}

impl ModelConfig {
    /// Desk-scale configuration. `generator` must be `None` exactly when
    /// `consumption` is [`ConsumptionMode::None`].
    pub fn desk(
        vocab_size: usize,
        d_feat: usize,
        consumption: ConsumptionMode,
        generator: Option<ContextGenerator>,
    ) -> Result<Self> {
        let encoder = EncoderConfig::desk(d_feat, consumption);
        let transducer = TransducerConfig::desk(vocab_size);
        let frozen = generator
            .filter(|g| g.is_frozen())
            .map(|_| FrozenEncoderConfig::tiny(vocab_size, FROZEN_SEED));
        let prompt = generator.map(|generator| PromptConfig {
            generator,
            d_enc: frozen.as_ref().map_or(transducer.d_emb, |f| f.width),
            d_model: encoder.d_model,
            n_projections: 2,
            token_window: encoder.token_window,
            truncation: Truncation::First,
        });
        let cfg = ModelConfig {
            encoder,
            transducer,
            prompt,
            frozen,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn consumption(&self) -> ConsumptionMode {
        self.encoder.consumption
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.encoder.d_model != self.transducer.d_model {
            return Err(Error::Config("encoder and joint widths differ".into()));
        }
        match (self.consumption(), &self.prompt) {
            (ConsumptionMode::None, Some(_)) => {
                return Err(Error::Config("prompt path configured without context consumption".into()))
            }
            (ConsumptionMode::None, None) => return Ok(()),
            (_, None) => return Err(Error::Config("context consumption needs a prompt path".into())),
            (mode, Some(p)) => {
                p.validate()?;
                if mode == ConsumptionMode::FeatureConcat && p.generator != ContextGenerator::FrozenSentence {
                    return Err(Error::Config("feature concatenation requires the frozen sentence generator".into()));
                }
                if p.d_model != self.encoder.d_model {
                    return Err(Error::Config("prompt width differs from encoder width".into()));
                }
                if p.generator.is_frozen() != self.frozen.is_some() {
                    return Err(Error::Config("frozen encoder configured inconsistently with generator".into()));
                }
                if let Some(f) = &self.frozen {
                    if f.width != p.d_enc {
                        return Err(Error::Config("frozen width differs from prompt input width".into()));
                    }
                } else if p.d_enc != self.transducer.d_emb {
                    return Err(Error::Config("learned context table must match the prediction embedding width".into()));
                }
            }
        }
        Ok(())
    }

    /// Same acoustic/label architecture with no context path.
    pub fn without_context(&self) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                consumption: ConsumptionMode::None,
                ..self.encoder.clone()
            },
            transducer: self.transducer.clone(),
            prompt: None,
            frozen: None,
        }
    }
}

pub struct Model {
    config: ModelConfig,
    pub params: ParamStore,
    frozen: Option<FrozenTextEncoder>,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("params", &self.params.len())
            .finish_non_exhaustive()
    }
}

fn init_params<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    encoder::init_encoder_params(&mut store, &cfg.encoder, rng)?;
    transducer::init_transducer_params(&mut store, &cfg.transducer, rng);
    if let Some(p) = &cfg.prompt {
        init_prompt_params(&mut store, p, cfg.transducer.vocab_size, rng)?;
    }
    Ok(store)
}

impl Model {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config, rng)?;
        Model::assemble(config, params)
    }

    /// Wraps loaded parameters; names and shapes must match `config` exactly.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let reference = init_params(&config, &mut ChaCha8Rng::seed_from_u64(0))?;
        for (name, t) in reference.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::IncompatibleCopy {
                    target: name.to_string(),
                    expected: t.shape().to_vec(),
                    got: got.shape().to_vec(),
                });
            }
        }
        if let Some(extra) = params.names().find(|n| !reference.contains(n)) {
            return Err(Error::UnknownParam(extra.to_string()));
        }
        Model::assemble(config, params)
    }

    /// Builds a variant from a context-free seed model. Every seed parameter
    /// is carried over; new context-path parameters start fresh. With
    /// feature concatenation the widened input projection keeps the seed
    /// rows and gets zero rows for the prompt columns. `copy_init` copies
    /// the prediction embedding into the learned context table and the
    /// prediction block of the joint into the first prompt projection.
    pub fn finetune_from<R: Rng + ?Sized>(
        seed: &Model,
        config: ModelConfig,
        copy_init: bool,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let mut params = init_params(&config, rng)?;
        for (name, src) in seed.params.iter() {
            let dst = params.get_mut(name).map_err(|_| Error::IncompatibleCopy {
                target: name.to_string(),
                expected: vec![],
                got: src.shape().to_vec(),
            })?;
            if dst.shape() == src.shape() {
                dst.data_mut().copy_from_slice(src.data());
            } else if name == "enc.input.w"
                && config.consumption() == ConsumptionMode::FeatureConcat
                && src.shape()[1] == dst.shape()[1]
                && src.shape()[0] < dst.shape()[0]
            {
                // prompt columns come first in the concatenated input
                let n = dst.len() - src.len();
                dst.data_mut()[..n].fill(0.0);
                dst.data_mut()[n..].copy_from_slice(src.data());
            } else {
                return Err(Error::IncompatibleCopy {
                    target: name.to_string(),
                    expected: dst.shape().to_vec(),
                    got: src.shape().to_vec(),
                });
            }
        }
        if copy_init {
            let p = config
                .prompt
                .as_ref()
                .filter(|p| p.generator == ContextGenerator::LearnedCopied)
                .ok_or_else(|| Error::Config("copy initialisation needs the copied learned generator".into()))?;
            let table = params.get(transducer::PRED_EMBEDDING)?.detached();
            let block = transducer::joint_prediction_block(&params, &config.transducer)?;
            init_copied(&mut params, p, config.transducer.vocab_size, &table, Some(&block))?;
        }
        Model::assemble(config, params)
    }

    fn assemble(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let frozen = config.frozen.clone().map(FrozenTextEncoder::new).transpose()?;
        Ok(Model {
            config,
            params,
            frozen,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Prompt rows for `context` tokens; empty context gives an empty prompt.
    pub fn prompt<'p>(&'p self, g: &Graph<'p>, context: &[usize]) -> Result<PromptEmbedding> {
        let d = self.config.encoder.d_model;
        let Some(pcfg) = &self.config.prompt else {
            return Ok(PromptEmbedding::empty(d));
        };
        if context.is_empty() {
            return Ok(PromptEmbedding::empty(d));
        }
        let kind = match (pcfg.generator, &self.frozen) {
            (ContextGenerator::FrozenSentence, Some(f)) => ContextEncoderKind::FrozenSentence(f),
            (ContextGenerator::FrozenToken, Some(f)) => ContextEncoderKind::FrozenToken(f),
            (ContextGenerator::LearnedRandom, _) => ContextEncoderKind::LearnedRandom,
            (ContextGenerator::LearnedCopied, _) => ContextEncoderKind::LearnedCopied,
            _ => return Err(Error::Config("frozen text encoder missing".into())),
        };
        let enc = encode_context(g, &self.params, context, kind)?;
        project_prompt(g, &self.params, enc, pcfg)
    }

    pub fn encode<'p>(&'p self, g: &Graph<'p>, features: &Tensor, context: &[usize]) -> Result<Var> {
        let prompt = self.prompt(g, context)?;
        encoder::encode(g, &self.params, &self.config.encoder, features, &prompt)
    }

    /// Transducer negative log-likelihood of `target`.
    pub fn loss<'p>(&'p self, g: &Graph<'p>, features: &Tensor, target: &[usize], context: &[usize]) -> Result<Var> {
        let enc = self.encode(g, features, context)?;
        transducer::transducer_loss(g, &self.params, &self.config.transducer, enc, target)
    }

    pub fn decode(&self, features: &Tensor, context: &[usize]) -> Result<Vec<usize>> {
        let g = Graph::inference();
        let enc = self.encode(&g, features, context)?;
        let enc = g.tensor(enc);
        transducer::greedy_decode(&self.params, &self.config.transducer, &enc)
    }

    /// Scalars beyond the context-free architecture of the same size.
    pub fn added_param_count(&self) -> usize {
        let base = init_params(&self.config.without_context(), &mut ChaCha8Rng::seed_from_u64(0))
            .map(|s| s.count())
            .unwrap_or(0);
        self.params.count().saturating_sub(base)
    }

    /// Scalars of the context-free architecture.
    pub fn base_param_count(&self) -> usize {
        self.params.count() - self.added_param_count()
    }
}
