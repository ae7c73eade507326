//! Previous-turn text to prompt embeddings.

pub mod frozen;
pub mod prompt;
pub mod vocab;

pub use frozen::{FrozenEncoderConfig, FrozenOutput, FrozenTextEncoder};
pub use prompt::{
    encode_context, init_copied, init_prompt_params, project_prompt, prompt_param_count,
    ContextEncoderKind, ContextGenerator, PromptConfig, PromptEmbedding, Truncation,
};
pub use vocab::{Vocabulary, BLANK, UNK};
