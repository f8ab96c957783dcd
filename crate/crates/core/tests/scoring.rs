mod common;

use cge_core::lm::{Model, TokenSeq};
use cge_core::scoring::{baseline_score, contrastive_score, interpolate, score, taylor_check, Method, Reduction};
use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn seq(model: &Model, len: usize, seed: u64) -> TokenSeq {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TokenSeq::new(random_seq(model, len, &mut rng)).unwrap()
}

fn reference_logprob(m: &Model, x: &TokenSeq) -> f64 {
    let mut inputs = vec![m.vocab().bos_id()];
    inputs.extend_from_slice(&x.ids()[..x.len() - 1]);
    let rows = reference_logits(m, &inputs);
    rows.iter()
        .zip(x.ids())
        .map(|(r, &t)| reference_log_softmax(r)[t as usize])
        .sum()
}

fn reference_uniform_kl(m: &Model, x: &TokenSeq) -> f64 {
    let mut inputs = vec![m.vocab().bos_id()];
    inputs.extend_from_slice(&x.ids()[..x.len() - 1]);
    reference_logits(m, &inputs)
        .iter()
        .map(|r| {
            let lp = reference_log_softmax(r);
            let v = lp.len() as f64;
            lp.iter().map(|l| (1.0 / v) * (-v.ln() - l)).sum::<f64>()
        })
        .sum()
}

fn fd_norm(m: &Model, f: impl Fn(&Model) -> f64) -> f64 {
    (0..m.params().numel())
        .map(|i| central_difference(m, i, 1e-5, &f).powi(2))
        .sum::<f64>()
        .sqrt()
}

#[test]
fn gradnorm_pt_matches_finite_differences() {
    let m = tiny_model(11);
    let x = seq(&m, 7, 1);
    let analytic = baseline_score(Method::GradnormPt, &m, &m, &x).unwrap();
    let numeric = fd_norm(&m, |mm| reference_logprob(mm, &x));
    assert!(rel_err(analytic, numeric) < 1e-3, "{analytic} vs {numeric}");
}

#[test]
fn gradnorm_uniform_matches_finite_differences() {
    let m = tiny_model(12);
    let x = seq(&m, 6, 2);
    let analytic = baseline_score(Method::GradnormUniform, &m, &m, &x).unwrap();
    let numeric = fd_norm(&m, |mm| reference_uniform_kl(mm, &x));
    assert!(rel_err(analytic, numeric) < 1e-3, "{analytic} vs {numeric}");
}

#[test]
fn mean_reduction_divides_by_length() {
    let pt = tiny_model(1);
    let ft = tiny_model(2);
    let x = seq(&pt, 9, 3);
    for m in Method::ALL {
        let sum = score(m, &pt, &ft, &x, Reduction::Sum).unwrap();
        let mean = score(m, &pt, &ft, &x, Reduction::Mean).unwrap();
        assert!((sum / 9.0 - mean).abs() < 1e-12, "{m}");
    }
}

#[test]
fn identical_models_give_zero_taylor_gap() {
    let m = tiny_model(4);
    let r = taylor_check(&m, &m, &seq(&m, 8, 4)).unwrap();
    assert_eq!((r.s_exact, r.s_linear, r.abs_gap, r.delta_norm), (0.0, 0.0, 0.0, 0.0));
}

#[test]
fn taylor_gap_is_quadratic_in_the_delta() {
    let pt = tiny_model(5);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut direction = pt.params().zeros_like();
    for i in 0..direction.numel() {
        direction.flat_set(i, rng.gen_range(-1.0..1.0));
    }
    let x = seq(&pt, 10, 5);
    let gap = |eps: f64| {
        let mut p = pt.params().clone();
        p.add_scaled(&direction, eps).unwrap();
        taylor_check(&pt, &pt.with_params(p).unwrap(), &x).unwrap().abs_gap
    };
    for eps in [1e-2, 5e-3, 1e-3] {
        let ratio = gap(eps) / gap(eps / 2.0);
        assert!((2.0..=8.0).contains(&ratio), "eps {eps}: ratio {ratio}");
    }
}

#[test]
fn relative_gap_shrinks_along_the_interpolation_path() {
    let pt = tiny_model(6);
    let ft = tiny_model(7);
    let x = seq(&pt, 10, 6);
    // gap is O(lambda^2) while the score is O(lambda), so the ratio is O(lambda).
    let gaps: Vec<f64> = [0.1, 0.01, 0.001]
        .iter()
        .map(|&l| {
            taylor_check(&pt, &interpolate(&pt, &ft, l).unwrap(), &x)
                .unwrap()
                .rel_gap
        })
        .collect();
    assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2], "{gaps:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn contrastive_is_antisymmetric(a in 0u64..1000, b in 0u64..1000, s in 0u64..1000, len in 1usize..15) {
        let pt = tiny_model(a);
        let ft = tiny_model(b);
        let x = seq(&pt, len, s);
        let forward = contrastive_score(&pt, &ft, &x).unwrap();
        let backward = contrastive_score(&ft, &pt, &x).unwrap();
        prop_assert_eq!(forward, -backward);
    }

    #[test]
    fn constant_logit_shift_only_moves_energy(seed in 0u64..1000, c in -3.0f64..3.0, len in 1usize..12) {
        let pt = tiny_model(seed);
        let ft = tiny_model(seed + 1);
        let mut shifted = pt.clone();
        for b in shifted.params_mut().get_mut("head.b").unwrap().data_mut() {
            *b += c;
        }
        let x = seq(&pt, len, seed);
        for m in Method::ALL {
            let before = baseline_score(m, &pt, &ft, &x).unwrap();
            let after = baseline_score(m, &shifted, &ft, &x).unwrap();
            let expected = if m == Method::Energy { len as f64 * c } else { 0.0 };
            prop_assert!((after - before - expected).abs() < 1e-9, "{} moved by {}", m, after - before);
        }
    }
}
