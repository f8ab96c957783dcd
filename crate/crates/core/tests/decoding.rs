mod common;

use cge_core::decoding::{
    contrastive_step, decode, sample_from_ft, sample_sequence, DecodeConfig, StepScores, Strategy,
};
use cge_core::lm::{Model, ModelConfig, TokenId, Vocab};
use common::*;

fn cfg(strategy: Strategy, alpha: f64, beam_size: usize, max_len: usize, seed: u64) -> DecodeConfig {
    DecodeConfig {
        alpha,
        strategy,
        beam_size,
        max_len,
        seed,
    }
}

fn unigram(alphabet: &str, logprobs: &[f64]) -> Model {
    let v = Vocab::from_alphabet(alphabet);
    let c = ModelConfig {
        vocab_size: v.len(),
        context_len: 16,
        d_model: 4,
        n_layers: 1,
        n_heads: 1,
        d_ff: 4,
    };
    Model::unigram(c, v, logprobs).unwrap()
}

/// Chi-square statistic against a uniform expectation.
fn chi_square(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    let e = n as f64 / counts.len() as f64;
    counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum()
}

#[test]
fn same_seed_same_output() {
    let pt = tiny_model(1);
    let ft = tiny_model(2);
    for strategy in [Strategy::Ancestral, Strategy::Beam] {
        let c = cfg(strategy, 0.01, 4, 15, 77);
        assert_eq!(decode(&pt, &ft, &c).unwrap(), decode(&pt, &ft, &c).unwrap());
    }
    let c = cfg(Strategy::Ancestral, 0.0, 1, 15, 0);
    let outs: Vec<_> = (0..5)
        .map(|s| decode(&pt, &ft, &DecodeConfig { seed: s, ..c }).unwrap().tokens)
        .collect();
    assert!(outs.windows(2).any(|w| w[0] != w[1]));
}

#[test]
fn strong_bias_forces_the_symbol_until_max_len() {
    let pt = tiny_model(3);
    let mut ft = pt.clone();
    let z = pt.vocab().id_of('h').unwrap();
    ft.params_mut().get_mut("head.b").unwrap().data_mut()[z as usize] += 50.0;
    for strategy in [Strategy::Ancestral, Strategy::Beam] {
        let g = decode(&pt, &ft, &cfg(strategy, 1.0, 4, 12, 5)).unwrap();
        assert_eq!(g.tokens, vec![z; 12]);
        assert_eq!(g.text(&ft), "h".repeat(12));
    }
}

/// Greedy decoding of the step scores, recomputing every prefix from scratch.
fn greedy(pt: &Model, ft: &Model, alpha: f64, max_len: usize) -> Vec<TokenId> {
    let eos = ft.vocab().eos_id();
    let mut out = Vec::new();
    while out.len() < max_len {
        let step = contrastive_step(pt, ft, &out, alpha).unwrap();
        let v = step.argmax();
        out.push(v);
        if v == eos {
            break;
        }
    }
    out
}

#[test]
fn single_beam_is_greedy() {
    for seed in 0..6 {
        let pt = tiny_model(seed);
        let ft = tiny_model(seed + 100);
        for alpha in [0.0, 0.1, 1.0] {
            let g = decode(&pt, &ft, &cfg(Strategy::Beam, alpha, 1, 15, seed)).unwrap();
            assert_eq!(g.tokens, greedy(&pt, &ft, alpha, 15), "seed {seed} alpha {alpha}");
        }
    }
}

#[test]
fn beam_score_is_cumulative_step_score() {
    let pt = tiny_model(8);
    let ft = tiny_model(9);
    let g = decode(&pt, &ft, &cfg(Strategy::Beam, 0.05, 4, 15, 3)).unwrap();
    let mut total = 0.0;
    for t in 0..g.tokens.len() {
        let step = contrastive_step(&pt, &ft, &g.tokens[..t], 0.05).unwrap();
        assert!(step.admissible.contains(&g.tokens[t]));
        assert_eq!(step.admissible.len(), g.admissible_sizes[t]);
        total += step.scores[g.tokens[t] as usize];
    }
    assert!((total - g.score).abs() < 1e-9);
}

#[test]
fn identical_models_with_zero_alpha_sample_uniformly() {
    // Vocabulary {bos, eos, a}.
    let m = perturbed(
        Model::init(
            tiny_config(&Vocab::from_alphabet("a"), 4, 1),
            Vocab::from_alphabet("a"),
            1,
        )
        .unwrap(),
        1,
    );
    let mut counts = [0usize; 3];
    for seed in 0..3000 {
        let g = decode(&m, &m, &cfg(Strategy::Ancestral, 0.0, 1, 1, seed)).unwrap();
        counts[g.tokens[0] as usize] += 1;
    }
    // Critical value for two degrees of freedom at p = 0.01.
    assert!(chi_square(&counts) < 9.21, "{counts:?}");
}

#[test]
fn sampling_a_uniform_model_is_uniform() {
    let m = unigram("abcdef", &[0.0; 8]);
    let mut counts = [0usize; 8];
    let mut drawn = 0;
    let mut seed = 0;
    while drawn < 10_000 {
        for &t in &sample_from_ft(&m, 15, seed).unwrap().tokens {
            counts[t as usize] += 1;
            drawn += 1;
        }
        seed += 1;
    }
    // Critical value for seven degrees of freedom at p = 0.01.
    assert!(chi_square(&counts) < 18.475, "{counts:?}");
}

#[test]
fn certain_eos_gives_an_empty_body() {
    let mut lp = vec![-1e4; 4];
    lp[1] = 0.0;
    let m = unigram("ab", &lp);
    let g = sample_from_ft(&m, 10, 4).unwrap();
    assert_eq!(g.tokens, vec![m.vocab().eos_id()]);
    assert_eq!(g.text(&m), "");
    assert_eq!(sample_from_ft(&m, 10, 4).unwrap(), g);
}

#[test]
fn invalid_configs_are_rejected() {
    let m = tiny_model(1);
    assert!(sample_sequence(&m, &m, &cfg(Strategy::Beam, 1.5, 4, 10, 0)).is_err());
    assert!(sample_sequence(&m, &m, &cfg(Strategy::Beam, 0.1, 0, 10, 0)).is_err());
    assert!(sample_sequence(&m, &m, &cfg(Strategy::Beam, 0.1, 4, 16, 0)).is_err());
    assert!(sample_from_ft(&m, 0, 0).is_err());
    assert!(contrastive_step(&m, &m, &[2; 16], 0.1).is_err());
}

#[test]
fn step_scores_match_the_models() {
    let pt = tiny_model(5);
    let ft = tiny_model(6);
    let prefix = [3, 4, 5];
    let step = contrastive_step(&pt, &ft, &prefix, 0.3).unwrap();
    let expected = StepScores::from_logprobs(
        &pt.next_token_logprobs(&prefix).unwrap(),
        &ft.next_token_logprobs(&prefix).unwrap(),
        0.3,
    );
    assert_eq!(step, expected);
}
