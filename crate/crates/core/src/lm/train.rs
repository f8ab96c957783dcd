use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::Model;
use super::tensor::{GradientVec, ParamSet};
use super::vocab::TokenSeq;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Optional hard cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 4,
            epochs: 3,
            max_steps: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.epsilon > 0.0
            && self.batch_size > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid training config {self:?}")))
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    step: u64,
    m: ParamSet,
    v: ParamSet,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut ParamSet, grads: &GradientVec, state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    params.check_congruent(grads)?;
    params.check_congruent(&state.m)?;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads.tensor(i).data();
        let m = state.m.tensor_mut(i).data_mut();
        for (mj, &gj) in m.iter_mut().zip(g) {
            *mj = cfg.beta1 * *mj + (1.0 - cfg.beta1) * gj;
        }
        let v = state.v.tensor_mut(i).data_mut();
        for (vj, &gj) in v.iter_mut().zip(g) {
            *vj = cfg.beta2 * *vj + (1.0 - cfg.beta2) * gj * gj;
        }
        let m = state.m.tensor(i).data();
        let v = state.v.tensor(i).data();
        let p = params.tensor_mut(i).data_mut();
        for ((pj, &mj), &vj) in p.iter_mut().zip(m).zip(v) {
            let mhat = mj / bc1;
            let vhat = vj / bc2;
            *pj -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

/// Per-example training loss `-log p(x) / |x|` and its gradient with respect
/// to the trainable parameters.
pub fn example_loss_grad(model: &Model, x: &TokenSeq) -> Result<(f64, GradientVec)> {
    let (logprob, mut grad) = model.grad_logprob(x.ids())?;
    let n = x.len() as f64;
    grad.scale(-1.0 / n);
    Ok((-logprob / n, grad))
}

/// Per-example gradients for a batch, computed in parallel and returned in
/// input order.
pub fn batch_loss_grads(model: &Model, batch: &[&TokenSeq]) -> Result<Vec<(f64, GradientVec)>> {
    batch.par_iter().map(|x| example_loss_grad(model, x)).collect()
}

/// Deterministic permutation of `0..n` for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::indexed_stream(seed, "epoch-shuffle", epoch as u64));
    order
}

/// Batches (or DP lots) for every epoch: contiguous blocks of each epoch's
/// shuffle, truncated at `max_steps`.
pub fn batch_schedule(n: usize, cfg: &TrainConfig, batch_size: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for epoch in 0..cfg.epochs {
        for chunk in epoch_order(n, cfg.seed, epoch).chunks(batch_size) {
            if cfg.max_steps.is_some_and(|m| out.len() >= m) {
                return out;
            }
            out.push(chunk.to_vec());
        }
    }
    out
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    /// Mean batch loss (nats per token) at each optimizer step.
    pub losses: Vec<f64>,
}

/// Fine-tunes a copy of `model`; the input is left untouched.
pub fn finetune(model: &Model, corpus: &[TokenSeq], cfg: &TrainConfig) -> Result<Model> {
    finetune_logged(model, corpus, cfg).map(|(m, _)| m)
}

pub fn finetune_logged(model: &Model, corpus: &[TokenSeq], cfg: &TrainConfig) -> Result<(Model, TrainLog)> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    cfg.validate()?;
    let mut model = model.clone();
    let mut state = AdamState::new(model.trainable());
    let mut log = TrainLog::default();
    for batch in batch_schedule(corpus.len(), cfg, cfg.batch_size) {
        let examples: Vec<&TokenSeq> = batch.iter().map(|&i| &corpus[i]).collect();
        let per_example = batch_loss_grads(&model, &examples)?;
        let (loss, grad) = mean_gradient(&per_example)?;
        adam_step(model.trainable_mut(), &grad, &mut state, cfg)?;
        log.losses.push(loss);
    }
    Ok((model, log))
}

/// Mean of losses and gradients, summed in input order.
pub(crate) fn mean_gradient(per_example: &[(f64, GradientVec)]) -> Result<(f64, GradientVec)> {
    let mut iter = per_example.iter();
    let (first_loss, first) = iter.next().ok_or(Error::EmptyLot)?;
    let mut sum = first.clone();
    let mut loss = *first_loss;
    for (l, g) in iter {
        sum.add_assign(g)?;
        loss += l;
    }
    let n = per_example.len() as f64;
    sum.scale(1.0 / n);
    Ok((loss / n, sum))
}

/// Mean per-token negative log-likelihood of `corpus`.
pub fn mean_nll(model: &Model, corpus: &[TokenSeq]) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let per: Vec<(f64, usize)> = corpus
        .par_iter()
        .map(|x| model.sequence_logprob(x.ids()).map(|lp| (-lp, x.len())))
        .collect::<Result<_>>()?;
    let (nll, tokens) = per.iter().fold((0.0, 0usize), |(a, n), (l, k)| (a + l, n + k));
    Ok(nll / tokens as f64)
}

/// `exp` of [`mean_nll`].
pub fn perplexity(model: &Model, corpus: &[TokenSeq]) -> Result<f64> {
    mean_nll(model, corpus).map(f64::exp)
}
