//! DP-Adam: per-example clipping and Gaussian noise ahead of an Adam update.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::train::{batch_loss_grads, batch_schedule, TrainLog};
use crate::lm::{adam_step, lora_attach, AdamState, GradientVec, LoraConfig, Model, ParamSet, TokenSeq, TrainConfig};
use crate::rng;

/// Noise multipliers of the sweep preset.
pub const SIGMA_GRID: [f64; 5] = [0.0, 0.1, 0.2, 0.4, 0.8];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpConfig {
    /// `inf` disables clipping.
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    /// Defaults to `1 / n` for a corpus of `n` examples.
    pub delta: Option<f64>,
    pub lot_size: usize,
    pub seed: u64,
}

impl Default for DpConfig {
    fn default() -> Self {
        Self {
            clip_norm: 1.0,
            noise_multiplier: 0.0,
            delta: None,
            lot_size: 4,
            seed: 0,
        }
    }
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return bad("clip_norm must be positive");
        }
        if !(self.noise_multiplier >= 0.0 && self.noise_multiplier.is_finite()) {
            return bad("noise_multiplier must be finite and non-negative");
        }
        if self.noise_multiplier > 0.0 && self.clip_norm.is_infinite() {
            return bad("noise requires a finite clip_norm");
        }
        if self.delta.is_some_and(|d| !(d > 0.0 && d < 1.0)) {
            return bad("delta must lie in (0, 1)");
        }
        if self.lot_size == 0 {
            return bad("lot_size must be positive");
        }
        Ok(())
    }

    pub fn delta_for(&self, n: usize) -> f64 {
        self.delta.unwrap_or(1.0 / n as f64)
    }
}

/// Rescales `g` to norm at most `c` (global norm over every array).
pub fn clip_gradient(g: &GradientVec, c: f64) -> GradientVec {
    let mut out = g.clone();
    let norm = g.norm();
    if norm > c {
        out.scale(c / norm);
    }
    out
}

/// `(sum of clipped gradients + N(0, sigma^2 C^2 I)) / L`.
pub fn noisy_mean<R: Rng>(per_example: &[GradientVec], dp: &DpConfig, rng: &mut R) -> Result<GradientVec> {
    let (first, rest) = per_example.split_first().ok_or(Error::EmptyLot)?;
    let mut sum = clip_gradient(first, dp.clip_norm);
    for g in rest {
        sum.add_assign(&clip_gradient(g, dp.clip_norm))?;
    }
    if dp.noise_multiplier > 0.0 {
        let normal = Normal::new(0.0, dp.noise_multiplier * dp.clip_norm).expect("validated std");
        for i in 0..sum.len() {
            for x in sum.tensor_mut(i).data_mut() {
                *x += normal.sample(rng);
            }
        }
    }
    sum.scale(1.0 / per_example.len() as f64);
    Ok(sum)
}

/// One DP-Adam update. Noise for step `t` comes from a stream derived from
/// `dp.seed` and `t`.
pub fn dp_adam_step(
    params: &mut ParamSet,
    per_example: &[GradientVec],
    dp: &DpConfig,
    train: &TrainConfig,
    state: &mut AdamState,
) -> Result<()> {
    let mut noise = rng::indexed_stream(dp.seed, "dp-noise", state.step());
    let g = noisy_mean(per_example, dp, &mut noise)?;
    adam_step(params, &g, state, train)
}

/// Everything an external accountant needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpManifest {
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    pub delta: f64,
    pub lot_size: usize,
    pub n_examples: usize,
    pub steps: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub train_seed: u64,
    pub noise_seed: u64,
    pub lora: Option<LoraConfig>,
}

/// Lot-wise DP-Adam over a seeded shuffle. With `lora`, the returned model
/// carries trained adapters on an unchanged base.
pub fn dp_finetune(
    model: &Model,
    corpus: &[TokenSeq],
    dp: &DpConfig,
    train: &TrainConfig,
    lora: Option<&LoraConfig>,
) -> Result<(Model, DpManifest, TrainLog)> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    dp.validate()?;
    train.validate()?;
    let mut model = match lora {
        Some(cfg) => lora_attach(model, cfg)?,
        None => model.clone(),
    };
    let mut state = AdamState::new(model.trainable());
    let mut log = TrainLog::default();
    let lots = batch_schedule(corpus.len(), train, dp.lot_size);
    for lot in &lots {
        let examples: Vec<&TokenSeq> = lot.iter().map(|&i| &corpus[i]).collect();
        let (losses, grads): (Vec<f64>, Vec<GradientVec>) = batch_loss_grads(&model, &examples)?.into_iter().unzip();
        dp_adam_step(model.trainable_mut(), &grads, dp, train, &mut state)?;
        log.losses.push(losses.iter().sum::<f64>() / losses.len() as f64);
    }
    let manifest = DpManifest {
        clip_norm: dp.clip_norm,
        noise_multiplier: dp.noise_multiplier,
        delta: dp.delta_for(corpus.len()),
        lot_size: dp.lot_size,
        n_examples: corpus.len(),
        steps: lots.len(),
        epochs: train.epochs,
        learning_rate: train.learning_rate,
        train_seed: train.seed,
        noise_seed: dp.seed,
        lora: lora.cloned(),
    };
    Ok((model, manifest, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::Tensor;
    use proptest::prelude::*;

    fn grad(values: &[f64]) -> GradientVec {
        let mut p = ParamSet::new();
        p.push("a", Tensor::from_vec(&[2], values[..2].to_vec()).unwrap());
        p.push(
            "b",
            Tensor::from_vec(&[values.len() - 2], values[2..].to_vec()).unwrap(),
        );
        p
    }

    #[test]
    fn clip_examples() {
        let g = grad(&[3.0, 0.0, 4.0]);
        assert_eq!(clip_gradient(&g, 5.0), g);
        assert_eq!(clip_gradient(&g, 10.0), g);
        let half = clip_gradient(&g, 2.5);
        assert_eq!(half.tensor(0).data(), &[1.5, 0.0]);
        assert_eq!(half.tensor(1).data(), &[2.0]);
        assert!((half.norm() - 2.5).abs() < 1e-12);
        let zero = grad(&[0.0, 0.0, 0.0]);
        assert_eq!(clip_gradient(&zero, 1.0), zero);
        assert_eq!(clip_gradient(&g, f64::INFINITY), g);
    }

    #[test]
    fn config_rules() {
        assert!(DpConfig::default().validate().is_ok());
        let inf_noisy = DpConfig {
            clip_norm: f64::INFINITY,
            noise_multiplier: 0.1,
            ..Default::default()
        };
        assert!(inf_noisy.validate().is_err());
        assert!(DpConfig {
            clip_norm: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(DpConfig {
            delta: Some(1.0),
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(DpConfig {
            lot_size: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert_eq!(DpConfig::default().delta_for(200), 0.005);
    }

    #[test]
    fn empty_lot_is_an_error() {
        let mut rng = rng::stream(0, "t");
        assert!(matches!(
            noisy_mean(&[], &DpConfig::default(), &mut rng),
            Err(Error::EmptyLot)
        ));
    }

    #[test]
    fn noise_covariance_matches_the_mechanism() {
        let dp = DpConfig {
            clip_norm: 0.5,
            noise_multiplier: 0.8,
            ..Default::default()
        };
        let lot = vec![
            grad(&[0.1, -0.2, 0.05, 0.0]),
            grad(&[0.3, 0.1, -0.1, 0.2]),
            grad(&[0.0, 0.0, 0.1, 0.1]),
        ];
        let clean = noisy_mean(
            &lot,
            &DpConfig {
                noise_multiplier: 0.0,
                ..dp
            },
            &mut rng::stream(0, "x"),
        )
        .unwrap();
        let dim = clean.numel();
        let reps = 10_000;
        let mut rng = rng::stream(42, "mc");
        let mut samples = Vec::with_capacity(reps);
        for _ in 0..reps {
            let g = noisy_mean(&lot, &dp, &mut rng).unwrap();
            samples.push((0..dim).map(|i| g.flat_get(i) - clean.flat_get(i)).collect::<Vec<_>>());
        }
        let expected = (dp.noise_multiplier * dp.clip_norm / lot.len() as f64).powi(2);
        for i in 0..dim {
            for j in 0..dim {
                let cov = samples.iter().map(|s| s[i] * s[j]).sum::<f64>() / reps as f64;
                if i == j {
                    assert!((cov / expected - 1.0).abs() < 0.05, "var {i}: {cov} vs {expected}");
                } else {
                    assert!(cov.abs() < 0.05 * expected, "cov {i},{j}: {cov}");
                }
            }
        }
    }

    proptest! {
        #[test]
        fn clipped_norm_never_exceeds_c(v in prop::collection::vec(-100.0f64..100.0, 3..12), c in 1e-3f64..50.0) {
            let g = grad(&v);
            let clipped = clip_gradient(&g, c);
            prop_assert!(clipped.norm() <= c + 1e-9);
            if g.norm() <= c {
                prop_assert_eq!(clipped, g);
            }
        }
    }
}
