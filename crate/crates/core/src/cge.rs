//! Contrastive generative exploration: static and iterative generation loops
//! and the detection/coverage metrics used to judge them.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{DomainLabel, DomainOracle};
use crate::decoding::{decode, sample_from_ft, DecodeConfig, Generation};
use crate::error::{Error, Result};
use crate::lm::{finetune, lora_attach, LoraConfig, Model, TrainConfig};
use crate::rng;
use crate::scoring::contrastive_score;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CgeConfig {
    pub n_generate: usize,
    /// `decode.seed` is ignored; generation `i` uses a seed derived from `seed` and `i`.
    pub decode: DecodeConfig,
    pub iterative: bool,
    pub inner_learning_rate: f64,
    pub inner_steps: usize,
    /// Train adapters on the reference copy instead of all of its weights.
    pub inner_lora: Option<LoraConfig>,
    pub seed: u64,
}

impl Default for CgeConfig {
    fn default() -> Self {
        Self {
            n_generate: 100,
            decode: DecodeConfig::default(),
            iterative: false,
            inner_learning_rate: 3e-3,
            inner_steps: 4,
            inner_lora: None,
            seed: 0,
        }
    }
}

impl CgeConfig {
    pub fn validate(&self, model: &Model) -> Result<()> {
        if self.n_generate == 0 {
            return Err(Error::InvalidConfig("n_generate must be positive".into()));
        }
        if self.iterative && self.inner_steps == 0 {
            return Err(Error::InvalidConfig("inner_steps must be positive".into()));
        }
        self.inner_train().validate()?;
        self.decode.validate(model)
    }

    pub fn generation_seed(&self, index: usize) -> u64 {
        rng::derive_indexed(self.seed, "generation", index as u64)
    }

    fn decode_for(&self, index: usize) -> DecodeConfig {
        DecodeConfig {
            seed: self.generation_seed(index),
            ..self.decode
        }
    }

    fn inner_train(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.inner_learning_rate,
            batch_size: 1,
            epochs: self.inner_steps.max(1),
            max_steps: Some(self.inner_steps.max(1)),
            seed: rng::derive_seed(self.seed, "inner"),
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedExample {
    pub iteration: usize,
    pub generation: Generation,
    pub text: String,
    pub label: DomainLabel,
    /// Sequence contrastive score against the reference used to decode it.
    pub score_before: f64,
    /// Same score after the inner update; iterative runs only.
    pub score_after: Option<f64>,
    pub detection_so_far: f64,
    pub coverage_so_far: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationReport {
    pub examples: Vec<GeneratedExample>,
    pub detection_rate: f64,
    pub coverage_rate: f64,
    pub k: usize,
}

/// `(detection, coverage)`: share of novel-labeled examples and share of the
/// `k` novel domains seen at least once.
pub fn evaluate_generations(labels: &[DomainLabel], k: usize) -> (f64, f64) {
    assert!(k >= 1, "k must be positive");
    if labels.is_empty() {
        return (0.0, 0.0);
    }
    let novel: Vec<&str> = labels.iter().filter(|l| l.is_novel()).map(|l| l.as_str()).collect();
    let distinct: BTreeSet<&str> = novel.iter().copied().collect();
    (
        novel.len() as f64 / labels.len() as f64,
        distinct.len() as f64 / k as f64,
    )
}

fn build_report(
    ft: &Model,
    rows: Vec<(Generation, f64, Option<f64>)>,
    oracle: &dyn DomainOracle,
    k: usize,
) -> GenerationReport {
    let mut examples = Vec::with_capacity(rows.len());
    let mut labels = Vec::with_capacity(rows.len());
    for (iteration, (generation, score_before, score_after)) in rows.into_iter().enumerate() {
        let text = generation.text(ft);
        let label = oracle.classify(&text);
        labels.push(label.clone());
        let (detection_so_far, coverage_so_far) = evaluate_generations(&labels, k);
        examples.push(GeneratedExample {
            iteration,
            generation,
            text,
            label,
            score_before,
            score_after,
            detection_so_far,
            coverage_so_far,
        });
    }
    let (detection_rate, coverage_rate) = evaluate_generations(&labels, k);
    GenerationReport {
        examples,
        detection_rate,
        coverage_rate,
        k,
    }
}

/// Independent decodes against the fixed `pt`, in parallel.
pub fn static_generate(
    pt: &Model,
    ft: &Model,
    cfg: &CgeConfig,
    oracle: &dyn DomainOracle,
    k: usize,
) -> Result<GenerationReport> {
    pt.ensure_compatible(ft)?;
    cfg.validate(ft)?;
    let rows = (0..cfg.n_generate)
        .into_par_iter()
        .map(|i| {
            let g = decode(pt, ft, &cfg.decode_for(i))?;
            let s = contrastive_score(pt, ft, &g.seq())?;
            Ok((g, s, None))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(build_report(ft, rows, oracle, k))
}

/// Decodes against a working copy of `pt` that is fine-tuned on each
/// generated sequence before the next decode. Neither input is modified.
pub fn iterative_generate(
    pt: &Model,
    ft: &Model,
    cfg: &CgeConfig,
    oracle: &dyn DomainOracle,
    k: usize,
) -> Result<GenerationReport> {
    pt.ensure_compatible(ft)?;
    cfg.validate(ft)?;
    let mut reference = match &cfg.inner_lora {
        Some(lora) => lora_attach(pt, lora)?,
        None => pt.clone(),
    };
    let inner = cfg.inner_train();
    let mut rows = Vec::with_capacity(cfg.n_generate);
    for i in 0..cfg.n_generate {
        let g = decode(&reference, ft, &cfg.decode_for(i))?;
        let x = g.seq();
        let before = contrastive_score(&reference, ft, &x)?;
        reference = finetune(&reference, std::slice::from_ref(&x), &inner)?;
        let after = contrastive_score(&reference, ft, &x)?;
        rows.push((g, before, Some(after)));
    }
    Ok(build_report(ft, rows, oracle, k))
}

/// Static or iterative, as configured.
pub fn generate(
    pt: &Model,
    ft: &Model,
    cfg: &CgeConfig,
    oracle: &dyn DomainOracle,
    k: usize,
) -> Result<GenerationReport> {
    if cfg.iterative {
        iterative_generate(pt, ft, cfg, oracle, k)
    } else {
        static_generate(pt, ft, cfg, oracle, k)
    }
}

/// Baseline: plain samples from `ft`, scored against `pt` for the trace.
pub fn sample_ft_generate(
    pt: &Model,
    ft: &Model,
    cfg: &CgeConfig,
    oracle: &dyn DomainOracle,
    k: usize,
) -> Result<GenerationReport> {
    pt.ensure_compatible(ft)?;
    cfg.validate(ft)?;
    let rows = (0..cfg.n_generate)
        .into_par_iter()
        .map(|i| {
            let g = sample_from_ft(ft, cfg.decode.max_len, cfg.generation_seed(i))?;
            let s = contrastive_score(pt, ft, &g.seq())?;
            Ok((g, s, None))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(build_report(ft, rows, oracle, k))
}
