use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::kernels;
use super::model::Model;
use super::tensor::{GradientVec, ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::rng;

/// Low-rank adapter settings. `targets` are weight-name suffixes matched in
/// every layer, e.g. `attn.wq`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<String>,
    pub seed: u64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
            targets: ["attn.wq", "attn.wk", "attn.wv", "attn.wo"].map(String::from).to_vec(),
            seed: 0,
        }
    }
}

impl LoraConfig {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Adapter {
    target: usize,
    n_in: usize,
    n_out: usize,
}

/// Trainable pairs `A: [in, r]`, `B: [r, out]`; the effective weight of a
/// target is `W + (alpha / r) * A B`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapters {
    config: LoraConfig,
    adapters: Vec<Adapter>,
    params: ParamSet,
}

impl LoraAdapters {
    pub fn config(&self) -> &LoraConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn delta(&self, i: usize) -> Vec<f64> {
        let ad = &self.adapters[i];
        let r = self.config.rank;
        let mut delta = vec![0.0; ad.n_in * ad.n_out];
        kernels::matmul_acc(
            self.params.tensor(2 * i).data(),
            self.params.tensor(2 * i + 1).data(),
            &mut delta,
            ad.n_in,
            r,
            ad.n_out,
        );
        let s = self.config.scaling();
        delta.iter_mut().for_each(|x| *x *= s);
        delta
    }

    /// `(target index, merged weight)` for each adapter.
    pub(crate) fn merged_targets(&self, base: &ParamSet) -> Vec<(usize, Vec<f64>)> {
        (0..self.adapters.len())
            .map(|i| {
                let target = self.adapters[i].target;
                let mut w = base.tensor(target).data().to_vec();
                for (x, d) in w.iter_mut().zip(self.delta(i)) {
                    *x += d;
                }
                (target, w)
            })
            .collect()
    }

    /// Maps a gradient over effective weights onto the adapter pairs.
    pub(crate) fn project_gradient(&self, _base: &ParamSet, full: &GradientVec) -> GradientVec {
        let r = self.config.rank;
        let s = self.config.scaling();
        let mut out = self.params.zeros_like();
        for (i, ad) in self.adapters.iter().enumerate() {
            let g = full.tensor(ad.target).data();
            let a = self.params.tensor(2 * i).data();
            let b = self.params.tensor(2 * i + 1).data();
            let mut da = vec![0.0; ad.n_in * r];
            kernels::matmul_bt_acc(g, b, &mut da, ad.n_in, r, ad.n_out);
            let mut db = vec![0.0; r * ad.n_out];
            kernels::matmul_at_acc(a, g, &mut db, ad.n_in, r, ad.n_out);
            for (dst, src) in out.tensor_mut(2 * i).data_mut().iter_mut().zip(da) {
                *dst = s * src;
            }
            for (dst, src) in out.tensor_mut(2 * i + 1).data_mut().iter_mut().zip(db) {
                *dst = s * src;
            }
        }
        out
    }
}

/// Returns a copy of `model` with frozen base weights and fresh adapters.
pub fn lora_attach(model: &Model, cfg: &LoraConfig) -> Result<Model> {
    if model.has_lora() {
        return Err(Error::LoraAlreadyAttached);
    }
    if cfg.rank == 0 || !(cfg.alpha > 0.0) {
        return Err(Error::InvalidConfig("LoRA rank and alpha must be positive".into()));
    }
    let base = model.params();
    let mut rng = rng::stream(cfg.seed, "lora-init");
    let mut adapters = Vec::new();
    let mut params = ParamSet::new();
    for target in &cfg.targets {
        let matches: Vec<usize> = (0..base.len())
            .filter(|&i| base.name(i).ends_with(target.as_str()) && base.tensor(i).shape().len() == 2)
            .collect();
        if matches.is_empty() {
            return Err(Error::LoraTarget(target.clone()));
        }
        for idx in matches {
            let shape = base.tensor(idx).shape();
            let (n_in, n_out) = (shape[0], shape[1]);
            let normal = Normal::new(0.0, 1.0 / (n_in as f64).sqrt()).expect("finite std");
            let a: Vec<f64> = (0..n_in * cfg.rank).map(|_| normal.sample(&mut rng)).collect();
            params.push(
                format!("{}.lora_a", base.name(idx)),
                Tensor::from_vec(&[n_in, cfg.rank], a)?,
            );
            params.push(format!("{}.lora_b", base.name(idx)), Tensor::zeros(&[cfg.rank, n_out]));
            adapters.push(Adapter {
                target: idx,
                n_in,
                n_out,
            });
        }
    }
    let mut out = model.clone();
    out.lora = Some(LoraAdapters {
        config: cfg.clone(),
        adapters,
        params,
    });
    Ok(out)
}

/// Folds the adapters into the base weights and removes them.
pub fn lora_merge(model: &Model) -> Result<Model> {
    let lora = model.lora().ok_or(Error::LoraNotAttached)?;
    let mut params = model.params().clone();
    for (target, merged) in lora.merged_targets(model.params()) {
        params.tensor_mut(target).data_mut().copy_from_slice(&merged);
    }
    let mut out = model.clone();
    out.lora = None;
    *out.params_mut() = params;
    Ok(out)
}
