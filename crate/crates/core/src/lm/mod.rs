//! Character-level tokenizer and a tiny decoder-only transformer with exact
//! reverse-mode gradients, Adam training, LoRA adapters and checkpoints.

pub mod checkpoint;
mod kernels;
pub mod lora;
pub mod model;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use kernels::{log_softmax, logsumexp};
pub use lora::{lora_attach, lora_merge, LoraConfig};
pub use model::{DecodeState, Decoder, Model, ModelConfig};
pub use tensor::{GradientVec, ParamSet, Tensor};
pub use train::{adam_step, finetune, AdamState, TrainConfig};
pub use vocab::{TokenId, TokenSeq, Vocab};

use crate::error::Result;

pub fn tokenize(text: &str, vocab: &Vocab) -> Result<TokenSeq> {
    vocab.tokenize(text)
}

pub fn next_token_logprobs(model: &Model, prefix: &[TokenId]) -> Result<Vec<f64>> {
    model.next_token_logprobs(prefix)
}

pub fn sequence_logprob(model: &Model, x: &TokenSeq) -> Result<f64> {
    model.sequence_logprob(x.ids())
}

pub fn grad_logprob(model: &Model, x: &TokenSeq) -> Result<GradientVec> {
    model.grad_logprob(x.ids()).map(|(_, g)| g)
}
