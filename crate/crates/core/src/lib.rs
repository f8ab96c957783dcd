//! Novelty discovery by contrasting a pre-trained language model with its
//! fine-tuned copy.
//!
//! The crate trains tiny character-level transformers on synthetic corpora
//! ([`corpus`]), scores fine-tuning examples with the contrastive score and
//! classic out-of-distribution baselines ([`scoring`]), and rediscovers the
//! novel domains by contrastive generation ([`decoding`], [`cge`]), optionally
//! against models fine-tuned with DP-Adam ([`dp`]).

pub mod bench;
pub mod cge;
pub mod corpus;
pub mod decoding;
pub mod dp;
pub mod error;
pub mod lm;
pub mod rng;
pub mod scoring;

pub use error::{Error, Result};
