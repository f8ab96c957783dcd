#![allow(dead_code)]

use cge_core::lm::{Model, ModelConfig, TokenId, Vocab};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_config(vocab: &Vocab, d_model: usize, n_layers: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab.len(),
        context_len: 16,
        d_model,
        n_layers,
        n_heads: 2,
        d_ff: 2 * d_model,
    }
}

pub fn tiny_model(seed: u64) -> Model {
    let vocab = Vocab::from_alphabet("abcdefgh");
    let cfg = tiny_config(&vocab, 8, 1);
    perturbed(Model::init(cfg, vocab, seed).unwrap(), seed)
}

/// Randomizes every weight, including gammas, betas and biases, so no
/// gradient path is trivially zero.
pub fn perturbed(mut model: Model, seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let params = model.params_mut();
    for i in 0..params.len() {
        let gamma = params.name(i).ends_with("gamma");
        for x in params.tensor_mut(i).data_mut() {
            let noise: f64 = rng.gen_range(-0.3..0.3);
            *x = if gamma { 1.0 + noise } else { *x + noise };
        }
    }
    model
}

pub fn random_seq(model: &Model, len: usize, rng: &mut impl Rng) -> Vec<TokenId> {
    cge_core::lm::model::random_tokens(model.vocab(), len, rng)
}

fn get<'a>(m: &'a Model, name: &str) -> &'a [f64] {
    m.params().get(name).unwrap_or_else(|| panic!("missing {name}")).data()
}

fn matvec(x: &[f64], w: &[f64], n_out: usize) -> Vec<f64> {
    (0..n_out)
        .map(|o| x.iter().enumerate().map(|(i, xi)| xi * w[i * n_out + o]).sum())
        .collect()
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(j, v)| g[j] * (v - mean) / (var + 1e-5).sqrt() + b[j])
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Straightforward per-position forward pass written independently of the
/// library kernels. Returns raw logits for every position of `inputs`.
pub fn reference_logits(m: &Model, inputs: &[TokenId]) -> Vec<Vec<f64>> {
    let cfg = *m.config();
    let d = cfg.d_model;
    let hd = d / cfg.n_heads;
    let mut hs: Vec<Vec<f64>> = inputs
        .iter()
        .enumerate()
        .map(|(t, &tok)| {
            let e = &get(m, "tok_emb")[tok as usize * d..(tok as usize + 1) * d];
            let p = &get(m, "pos_emb")[t * d..(t + 1) * d];
            e.iter().zip(p).map(|(a, b)| a + b).collect()
        })
        .collect();
    for l in 0..cfg.n_layers {
        let n = |s: &str| format!("layers.{l}.{s}");
        let a: Vec<Vec<f64>> = hs
            .iter()
            .map(|h| layer_norm(h, get(m, &n("ln1.gamma")), get(m, &n("ln1.beta"))))
            .collect();
        let q: Vec<Vec<f64>> = a.iter().map(|x| matvec(x, get(m, &n("attn.wq")), d)).collect();
        let k: Vec<Vec<f64>> = a.iter().map(|x| matvec(x, get(m, &n("attn.wk")), d)).collect();
        let v: Vec<Vec<f64>> = a.iter().map(|x| matvec(x, get(m, &n("attn.wv")), d)).collect();
        let mut next = Vec::new();
        for i in 0..hs.len() {
            let mut o = vec![0.0; d];
            for h in 0..cfg.n_heads {
                let r = h * hd..(h + 1) * hd;
                let scores: Vec<f64> = (0..=i)
                    .map(|j| {
                        q[i][r.clone()]
                            .iter()
                            .zip(&k[j][r.clone()])
                            .map(|(x, y)| x * y)
                            .sum::<f64>()
                            / (hd as f64).sqrt()
                    })
                    .collect();
                let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
                for j in 0..=i {
                    let p = (scores[j] - mx).exp() / z;
                    for e in r.clone() {
                        o[e] += p * v[j][e];
                    }
                }
            }
            let attn = matvec(&o, get(m, &n("attn.wo")), d);
            let h1: Vec<f64> = hs[i].iter().zip(&attn).map(|(a, b)| a + b).collect();
            let c = layer_norm(&h1, get(m, &n("ln2.gamma")), get(m, &n("ln2.beta")));
            let u = matvec(&c, get(m, &n("ff.w1")), cfg.d_ff);
            let act: Vec<f64> = u.iter().zip(get(m, &n("ff.b1"))).map(|(x, b)| gelu(x + b)).collect();
            let f = matvec(&act, get(m, &n("ff.w2")), d);
            let h2: Vec<f64> = h1
                .iter()
                .zip(&f)
                .zip(get(m, &n("ff.b2")))
                .map(|((a, b), c)| a + b + c)
                .collect();
            next.push(h2);
        }
        hs = next;
    }
    hs.iter()
        .map(|h| {
            let z = layer_norm(h, get(m, "ln_f.gamma"), get(m, "ln_f.beta"));
            matvec(&z, get(m, "head.w"), cfg.vocab_size)
                .iter()
                .zip(get(m, "head.b"))
                .map(|(a, b)| a + b)
                .collect()
        })
        .collect()
}

pub fn reference_log_softmax(xs: &[f64]) -> Vec<f64> {
    let mx = xs.iter().cloned().fold(f64::MIN, f64::max);
    let lse = mx + xs.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
    xs.iter().map(|x| x - lse).collect()
}

/// Central finite difference of `f` at flat parameter index `idx`.
pub fn central_difference(model: &Model, idx: usize, step: f64, f: impl Fn(&Model) -> f64) -> f64 {
    let mut plus = model.clone();
    let base = model.params().flat_get(idx);
    plus.params_mut().flat_set(idx, base + step);
    let mut minus = model.clone();
    minus.params_mut().flat_set(idx, base - step);
    (f(&plus) - f(&minus)) / (2.0 * step)
}

/// Relative error with an absolute floor for near-zero coordinates.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}
