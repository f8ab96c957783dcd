use std::borrow::Cow;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::kernels::{self, gelu, gelu_grad, layer_norm, layer_norm_backward, log_softmax};
use super::lora::LoraAdapters;
use super::tensor::{GradientVec, ParamSet, Tensor};
use super::vocab::{TokenId, Vocab};
use crate::error::{Error, Result};
use crate::rng;

/// Architecture of the decoder-only transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk(Vocab::standard().len())
    }
}

impl ModelConfig {
    /// The default architecture at the given vocabulary size.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            context_len: 64,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if self.vocab_size < 2 || self.context_len < 2 || self.d_model == 0 || self.d_ff == 0 {
            return bad("model dimensions must be positive");
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Names and shapes of every weight array, in canonical order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (v, c, d, f) = (self.vocab_size, self.context_len, self.d_model, self.d_ff);
        let mut out = vec![("tok_emb".to_string(), vec![v, d]), ("pos_emb".to_string(), vec![c, d])];
        for l in 0..self.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            out.extend([
                (p("ln1.gamma"), vec![d]),
                (p("ln1.beta"), vec![d]),
                (p("attn.wq"), vec![d, d]),
                (p("attn.wk"), vec![d, d]),
                (p("attn.wv"), vec![d, d]),
                (p("attn.wo"), vec![d, d]),
                (p("ln2.gamma"), vec![d]),
                (p("ln2.beta"), vec![d]),
                (p("ff.w1"), vec![d, f]),
                (p("ff.b1"), vec![f]),
                (p("ff.w2"), vec![f, d]),
                (p("ff.b2"), vec![d]),
            ]);
        }
        out.extend([
            ("ln_f.gamma".to_string(), vec![d]),
            ("ln_f.beta".to_string(), vec![d]),
            ("head.w".to_string(), vec![d, v]),
            ("head.b".to_string(), vec![v]),
        ]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

// Offsets of the per-layer arrays inside a layer block.
pub(crate) const LN1_G: usize = 0;
pub(crate) const LN1_B: usize = 1;
pub(crate) const WQ: usize = 2;
pub(crate) const WK: usize = 3;
pub(crate) const WV: usize = 4;
pub(crate) const WO: usize = 5;
pub(crate) const LN2_G: usize = 6;
pub(crate) const LN2_B: usize = 7;
pub(crate) const W1: usize = 8;
pub(crate) const B1: usize = 9;
pub(crate) const W2: usize = 10;
pub(crate) const B2: usize = 11;
pub(crate) const PER_LAYER: usize = 12;
const TOK_EMB: usize = 0;
const POS_EMB: usize = 1;

pub(crate) fn layer_index(layer: usize, offset: usize) -> usize {
    2 + layer * PER_LAYER + offset
}

fn final_index(cfg: &ModelConfig, offset: usize) -> usize {
    2 + cfg.n_layers * PER_LAYER + offset
}

/// A tiny decoder-only language model: weights, vocabulary and optional
/// LoRA adapters. Values are immutable once built; training returns copies.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    vocab: Vocab,
    params: ParamSet,
    pub(crate) lora: Option<LoraAdapters>,
}

impl Model {
    /// Randomly initialized model.
    pub fn init(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab.len() != config.vocab_size {
            return Err(Error::InvalidConfig(format!(
                "vocab has {} symbols but config expects {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        let mut rng = rng::stream(seed, "model-init");
        let residual_scale = 1.0 / ((2 * config.n_layers) as f64).sqrt();
        let mut params = ParamSet::new();
        for (name, shape) in config.param_shapes() {
            let std = if name.ends_with("gamma") {
                params.push(name, Tensor::filled(&shape, 1.0));
                continue;
            } else if name.ends_with("beta") || name.ends_with(".b1") || name.ends_with(".b2") || name == "head.b" {
                0.0
            } else if name == "tok_emb" {
                0.3
            } else if name == "pos_emb" {
                0.05
            } else {
                let fan_in = shape[0] as f64;
                let base = 1.0 / fan_in.sqrt();
                if name.ends_with("attn.wo") || name.ends_with("ff.w2") {
                    base * residual_scale
                } else if name == "head.w" {
                    0.5 * base
                } else {
                    base
                }
            };
            let n: usize = shape.iter().product();
            let data = if std == 0.0 {
                vec![0.0; n]
            } else {
                let normal = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            };
            params.push(name, Tensor::from_vec(&shape, data)?);
        }
        Ok(Self {
            config,
            vocab,
            params,
            lora: None,
        })
    }

    /// Builds a model from explicit weights, checking names and shapes.
    pub fn from_params(config: ModelConfig, vocab: Vocab, params: ParamSet) -> Result<Self> {
        config.validate()?;
        if vocab.len() != config.vocab_size {
            return Err(Error::InvalidConfig("vocab size does not match config".into()));
        }
        let expected = config.param_shapes();
        if expected.len() != params.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} arrays, got {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), (got_name, t)) in expected.iter().zip(params.iter()) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "expected {name} {shape:?}, got {got_name} {:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self {
            config,
            vocab,
            params,
            lora: None,
        })
    }

    /// All weights zero except the output bias, which holds `logprobs`:
    /// the model predicts the same distribution at every position.
    pub fn unigram(config: ModelConfig, vocab: Vocab, logprobs: &[f64]) -> Result<Self> {
        if logprobs.len() != config.vocab_size {
            return Err(Error::ShapeMismatch("unigram table must cover the vocab".into()));
        }
        let mut model = Self::init(config, vocab, 0)?;
        for i in 0..model.params.len() {
            model.params.tensor_mut(i).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        model
            .params
            .get_mut("head.b")
            .expect("head bias")
            .data_mut()
            .copy_from_slice(logprobs);
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    /// Base weights (adapters, if attached, are not folded in).
    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn lora(&self) -> Option<&LoraAdapters> {
        self.lora.as_ref()
    }

    pub fn has_lora(&self) -> bool {
        self.lora.is_some()
    }

    /// Parameters updated by training: the adapters if attached, else all weights.
    pub fn trainable(&self) -> &ParamSet {
        match &self.lora {
            Some(l) => l.params(),
            None => &self.params,
        }
    }

    pub fn trainable_mut(&mut self) -> &mut ParamSet {
        match &mut self.lora {
            Some(l) => l.params_mut(),
            None => &mut self.params,
        }
    }

    /// True when both models share architecture and vocabulary.
    pub fn compatible(&self, other: &Model) -> bool {
        self.config == other.config && self.vocab == other.vocab
    }

    pub fn ensure_compatible(&self, other: &Model) -> Result<()> {
        if self.compatible(other) {
            Ok(())
        } else {
            Err(Error::ConfigMismatch)
        }
    }

    /// Copy of this model with the given base weights.
    pub fn with_params(&self, params: ParamSet) -> Result<Self> {
        self.params.check_congruent(&params)?;
        Ok(Self {
            config: self.config,
            vocab: self.vocab.clone(),
            params,
            lora: self.lora.clone(),
        })
    }

    pub(crate) fn weights(&self) -> Weights<'_> {
        let mut w: Vec<Cow<'_, [f64]>> = self.params.tensors().iter().map(|t| Cow::Borrowed(t.data())).collect();
        if let Some(lora) = &self.lora {
            for (target, merged) in lora.merged_targets(&self.params) {
                w[target] = Cow::Owned(merged);
            }
        }
        Weights { w }
    }

    fn check_inputs(&self, ids: &[TokenId], limit: usize) -> Result<()> {
        if ids.len() > limit {
            return Err(Error::ContextOverflow { len: ids.len(), limit });
        }
        self.vocab.validate(ids)
    }

    /// Input positions `[bos, x_1, .., x_{n-1}]` used to score `x`.
    fn scoring_inputs(&self, x: &[TokenId]) -> Vec<TokenId> {
        let mut inputs = Vec::with_capacity(x.len());
        inputs.push(self.vocab.bos_id());
        inputs.extend_from_slice(&x[..x.len() - 1]);
        inputs
    }

    /// Log-probabilities of the next token after `bos, prefix..`.
    pub fn next_token_logprobs(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        self.check_inputs(prefix, self.config.context_len - 1)?;
        let mut inputs = Vec::with_capacity(prefix.len() + 1);
        inputs.push(self.vocab.bos_id());
        inputs.extend_from_slice(prefix);
        let trace = self.forward(&inputs);
        let v = self.config.vocab_size;
        let t = inputs.len() - 1;
        Ok(log_softmax(&trace.logits[t * v..(t + 1) * v]))
    }

    /// Per-position log-softmax rows for scoring `x`: row `t` is the
    /// distribution of `x_t` given `bos, x_<t`.
    pub fn position_logprobs(&self, x: &[TokenId]) -> Result<Vec<Vec<f64>>> {
        let logits = self.position_logits(x)?;
        Ok(logits.iter().map(|row| log_softmax(row)).collect())
    }

    /// Raw logits rows, aligned like [`Model::position_logprobs`].
    pub fn position_logits(&self, x: &[TokenId]) -> Result<Vec<Vec<f64>>> {
        if x.is_empty() {
            return Err(Error::EmptyInput);
        }
        self.check_inputs(x, self.config.context_len - 1)?;
        let trace = self.forward(&self.scoring_inputs(x));
        Ok(trace
            .logits
            .chunks(self.config.vocab_size)
            .map(<[f64]>::to_vec)
            .collect())
    }

    /// `log p(x) = sum_t log p(x_t | bos, x_<t)`.
    pub fn sequence_logprob(&self, x: &[TokenId]) -> Result<f64> {
        let rows = self.position_logprobs(x)?;
        Ok(rows.iter().zip(x).map(|(row, &tok)| row[tok as usize]).sum())
    }

    /// Exact gradient of [`Model::sequence_logprob`] with respect to the
    /// trainable parameters. Also returns the log-probability itself.
    pub fn grad_logprob(&self, x: &[TokenId]) -> Result<(f64, GradientVec)> {
        self.grad_with(x, |rows, dlogits| {
            let mut total = 0.0;
            for (t, &tok) in x.iter().enumerate() {
                let lp = log_softmax(&rows[t]);
                total += lp[tok as usize];
                for (v, d) in dlogits[t].iter_mut().enumerate() {
                    *d = -lp[v].exp();
                }
                dlogits[t][tok as usize] += 1.0;
            }
            total
        })
    }

    /// Runs forward on the scoring inputs of `x`, lets `objective` fill the
    /// gradient of a scalar with respect to each logits row and return that
    /// scalar, then back-propagates to the trainable parameters.
    pub fn grad_with<F>(&self, x: &[TokenId], objective: F) -> Result<(f64, GradientVec)>
    where
        F: FnOnce(&[Vec<f64>], &mut [Vec<f64>]) -> f64,
    {
        if x.is_empty() {
            return Err(Error::EmptyInput);
        }
        self.check_inputs(x, self.config.context_len - 1)?;
        let weights = self.weights();
        let trace = forward_pass(&self.config, &weights, &self.scoring_inputs(x));
        let v = self.config.vocab_size;
        let rows: Vec<Vec<f64>> = trace.logits.chunks(v).map(<[f64]>::to_vec).collect();
        let mut d_rows = vec![vec![0.0; v]; rows.len()];
        let value = objective(&rows, &mut d_rows);
        let dlogits: Vec<f64> = d_rows.concat();
        let grads = backward_pass(&self.config, &self.params, &weights, &trace, &dlogits);
        let grads = match &self.lora {
            Some(lora) => lora.project_gradient(&self.params, &grads),
            None => grads,
        };
        Ok((value, grads))
    }

    pub(crate) fn forward(&self, inputs: &[TokenId]) -> Trace {
        forward_pass(&self.config, &self.weights(), inputs)
    }

    /// Starts incremental decoding; see [`Decoder`].
    pub fn decoder(&self) -> Decoder<'_> {
        Decoder {
            model: self,
            weights: self.weights(),
        }
    }
}

/// Resolved weight slices, with LoRA targets already merged.
pub(crate) struct Weights<'a> {
    w: Vec<Cow<'a, [f64]>>,
}

impl Weights<'_> {
    fn get(&self, idx: usize) -> &[f64] {
        &self.w[idx]
    }
}

struct LnTrace {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

struct LayerTrace {
    ln1: LnTrace,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Attention weights, `[head, query, key]`, lower triangle only.
    probs: Vec<f64>,
    o: Vec<f64>,
    ln2: LnTrace,
    c: Vec<f64>,
    u: Vec<f64>,
    act: Vec<f64>,
}

pub(crate) struct Trace {
    inputs: Vec<TokenId>,
    layers: Vec<LayerTrace>,
    lnf: LnTrace,
    z: Vec<f64>,
    pub(crate) logits: Vec<f64>,
}

fn forward_pass(cfg: &ModelConfig, w: &Weights<'_>, inputs: &[TokenId]) -> Trace {
    let (t_len, d, f, v) = (inputs.len(), cfg.d_model, cfg.d_ff, cfg.vocab_size);
    let (n_heads, hd) = (cfg.n_heads, cfg.head_dim());
    let scale = 1.0 / (hd as f64).sqrt();

    let mut h = vec![0.0; t_len * d];
    let emb = w.get(TOK_EMB);
    let pos = w.get(POS_EMB);
    for (t, &tok) in inputs.iter().enumerate() {
        let e = &emb[tok as usize * d..(tok as usize + 1) * d];
        let p = &pos[t * d..(t + 1) * d];
        for j in 0..d {
            h[t * d + j] = e[j] + p[j];
        }
    }

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let li = |o| layer_index(l, o);
        let mut a = vec![0.0; t_len * d];
        let (xhat, rstd) = layer_norm(&h, w.get(li(LN1_G)), w.get(li(LN1_B)), &mut a, d);
        let ln1 = LnTrace { xhat, rstd };
        let mut q = vec![0.0; t_len * d];
        let mut k = vec![0.0; t_len * d];
        let mut vv = vec![0.0; t_len * d];
        kernels::matmul_acc(&a, w.get(li(WQ)), &mut q, t_len, d, d);
        kernels::matmul_acc(&a, w.get(li(WK)), &mut k, t_len, d, d);
        kernels::matmul_acc(&a, w.get(li(WV)), &mut vv, t_len, d, d);

        let mut probs = vec![0.0; n_heads * t_len * t_len];
        let mut o = vec![0.0; t_len * d];
        for hh in 0..n_heads {
            let off = hh * hd;
            for i in 0..t_len {
                let qi = &q[i * d + off..i * d + off + hd];
                let row = &mut probs[(hh * t_len + i) * t_len..(hh * t_len + i) * t_len + i + 1];
                let mut m = f64::NEG_INFINITY;
                for (j, s) in row.iter_mut().enumerate() {
                    *s = kernels::dot(qi, &k[j * d + off..j * d + off + hd]) * scale;
                    m = m.max(*s);
                }
                let mut z = 0.0;
                for s in row.iter_mut() {
                    *s = (*s - m).exp();
                    z += *s;
                }
                let oi = &mut o[i * d + off..i * d + off + hd];
                for (j, s) in row.iter_mut().enumerate() {
                    *s /= z;
                    let vj = &vv[j * d + off..j * d + off + hd];
                    for (oo, &x) in oi.iter_mut().zip(vj) {
                        *oo += *s * x;
                    }
                }
            }
        }
        kernels::matmul_acc(&o, w.get(li(WO)), &mut h, t_len, d, d);

        let mut c = vec![0.0; t_len * d];
        let (xhat, rstd) = layer_norm(&h, w.get(li(LN2_G)), w.get(li(LN2_B)), &mut c, d);
        let ln2 = LnTrace { xhat, rstd };
        let b1 = w.get(li(B1));
        let mut u: Vec<f64> = (0..t_len).flat_map(|_| b1.iter().copied()).collect();
        kernels::matmul_acc(&c, w.get(li(W1)), &mut u, t_len, d, f);
        let act: Vec<f64> = u.iter().map(|&x| gelu(x)).collect();
        let b2 = w.get(li(B2));
        for t in 0..t_len {
            for j in 0..d {
                h[t * d + j] += b2[j];
            }
        }
        kernels::matmul_acc(&act, w.get(li(W2)), &mut h, t_len, f, d);
        layers.push(LayerTrace {
            ln1,
            a,
            q,
            k,
            v: vv,
            probs,
            o,
            ln2,
            c,
            u,
            act,
        });
    }

    let mut z = vec![0.0; t_len * d];
    let (xhat, rstd) = layer_norm(&h, w.get(final_index(cfg, 0)), w.get(final_index(cfg, 1)), &mut z, d);
    let hb = w.get(final_index(cfg, 3));
    let mut logits: Vec<f64> = (0..t_len).flat_map(|_| hb.iter().copied()).collect();
    kernels::matmul_acc(&z, w.get(final_index(cfg, 2)), &mut logits, t_len, d, v);
    Trace {
        inputs: inputs.to_vec(),
        layers,
        lnf: LnTrace { xhat, rstd },
        z,
        logits,
    }
}

/// Gradient of `sum(dlogits * logits)` with respect to every (effective) weight.
fn backward_pass(cfg: &ModelConfig, layout: &ParamSet, w: &Weights<'_>, tr: &Trace, dlogits: &[f64]) -> ParamSet {
    let (t_len, d, f, v) = (tr.inputs.len(), cfg.d_model, cfg.d_ff, cfg.vocab_size);
    let (n_heads, hd) = (cfg.n_heads, cfg.head_dim());
    let scale = 1.0 / (hd as f64).sqrt();
    let mut g = layout.zeros_like();

    // Output head.
    let mut dz = vec![0.0; t_len * d];
    {
        let (wi, bi) = (final_index(cfg, 2), final_index(cfg, 3));
        kernels::matmul_bt_acc(dlogits, w.get(wi), &mut dz, t_len, d, v);
        kernels::matmul_at_acc(&tr.z, dlogits, g.tensor_mut(wi).data_mut(), t_len, d, v);
        let db = g.tensor_mut(bi).data_mut();
        for row in dlogits.chunks(v) {
            for (a, b) in db.iter_mut().zip(row) {
                *a += b;
            }
        }
    }
    let mut dh = vec![0.0; t_len * d];
    {
        let (gi, bi) = (final_index(cfg, 0), final_index(cfg, 1));
        let (dg, db) = g.pair_mut(gi, bi);
        layer_norm_backward(&dz, &tr.lnf.xhat, &tr.lnf.rstd, w.get(gi), &mut dh, dg, db, d);
    }

    for l in (0..cfg.n_layers).rev() {
        let lt = &tr.layers[l];
        let li = |o| layer_index(l, o);

        // Feed-forward block: h2 = h1 + gelu(c W1 + b1) W2 + b2.
        let mut dact = vec![0.0; t_len * f];
        kernels::matmul_bt_acc(&dh, w.get(li(W2)), &mut dact, t_len, f, d);
        kernels::matmul_at_acc(&lt.act, &dh, g.tensor_mut(li(W2)).data_mut(), t_len, f, d);
        {
            let db2 = g.tensor_mut(li(B2)).data_mut();
            for row in dh.chunks(d) {
                for (a, b) in db2.iter_mut().zip(row) {
                    *a += b;
                }
            }
        }
        let du: Vec<f64> = dact.iter().zip(&lt.u).map(|(da, &u)| da * gelu_grad(u)).collect();
        let mut dc = vec![0.0; t_len * d];
        kernels::matmul_bt_acc(&du, w.get(li(W1)), &mut dc, t_len, d, f);
        kernels::matmul_at_acc(&lt.c, &du, g.tensor_mut(li(W1)).data_mut(), t_len, d, f);
        {
            let db1 = g.tensor_mut(li(B1)).data_mut();
            for row in du.chunks(f) {
                for (a, b) in db1.iter_mut().zip(row) {
                    *a += b;
                }
            }
        }
        let mut dh1 = dh.clone();
        {
            let (dg, db) = g.pair_mut(li(LN2_G), li(LN2_B));
            layer_norm_backward(&dc, &lt.ln2.xhat, &lt.ln2.rstd, w.get(li(LN2_G)), &mut dh1, dg, db, d);
        }

        // Attention block: h1 = h + attn(LN(h)) Wo.
        let mut d_o = vec![0.0; t_len * d];
        kernels::matmul_bt_acc(&dh1, w.get(li(WO)), &mut d_o, t_len, d, d);
        kernels::matmul_at_acc(&lt.o, &dh1, g.tensor_mut(li(WO)).data_mut(), t_len, d, d);
        let mut dq = vec![0.0; t_len * d];
        let mut dk = vec![0.0; t_len * d];
        let mut dv = vec![0.0; t_len * d];
        let mut dp = vec![0.0; t_len];
        for hh in 0..n_heads {
            let off = hh * hd;
            for i in 0..t_len {
                let p = &lt.probs[(hh * t_len + i) * t_len..(hh * t_len + i) * t_len + i + 1];
                let doi = &d_o[i * d + off..i * d + off + hd];
                let mut weighted = 0.0;
                for j in 0..=i {
                    dp[j] = kernels::dot(doi, &lt.v[j * d + off..j * d + off + hd]);
                    weighted += p[j] * dp[j];
                    let dvj = &mut dv[j * d + off..j * d + off + hd];
                    for (x, &y) in dvj.iter_mut().zip(doi) {
                        *x += p[j] * y;
                    }
                }
                for j in 0..=i {
                    let ds = p[j] * (dp[j] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for e in 0..hd {
                        dq[i * d + off + e] += ds * lt.k[j * d + off + e];
                        dk[j * d + off + e] += ds * lt.q[i * d + off + e];
                    }
                }
            }
        }
        let mut da = vec![0.0; t_len * d];
        for (idx, dmat) in [(WQ, &dq), (WK, &dk), (WV, &dv)] {
            kernels::matmul_bt_acc(dmat, w.get(li(idx)), &mut da, t_len, d, d);
            kernels::matmul_at_acc(&lt.a, dmat, g.tensor_mut(li(idx)).data_mut(), t_len, d, d);
        }
        dh = dh1;
        {
            let (dg, db) = g.pair_mut(li(LN1_G), li(LN1_B));
            layer_norm_backward(&da, &lt.ln1.xhat, &lt.ln1.rstd, w.get(li(LN1_G)), &mut dh, dg, db, d);
        }
    }

    for (t, &tok) in tr.inputs.iter().enumerate() {
        let row = &dh[t * d..(t + 1) * d];
        let de = &mut g.tensor_mut(TOK_EMB).data_mut()[tok as usize * d..(tok as usize + 1) * d];
        for (a, b) in de.iter_mut().zip(row) {
            *a += b;
        }
        let dpos = &mut g.tensor_mut(POS_EMB).data_mut()[t * d..(t + 1) * d];
        for (a, b) in dpos.iter_mut().zip(row) {
            *a += b;
        }
    }
    g
}

/// Per-layer key/value cache for incremental decoding. Cloning a state forks
/// the decode (used by beam search).
#[derive(Debug, Clone)]
pub struct DecodeState {
    pos: usize,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

impl DecodeState {
    /// Number of positions consumed so far, including bos.
    pub fn position(&self) -> usize {
        self.pos
    }
}

/// Incremental forward pass over a fixed model.
pub struct Decoder<'m> {
    model: &'m Model,
    weights: Weights<'m>,
}

impl Decoder<'_> {
    pub fn model(&self) -> &Model {
        self.model
    }

    /// Feeds bos and returns the state plus the first next-token distribution.
    pub fn start(&self) -> (DecodeState, Vec<f64>) {
        let n = self.model.config.n_layers;
        let mut state = DecodeState {
            pos: 0,
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
        };
        let lp = self
            .step(&mut state, self.model.vocab.bos_id())
            .expect("bos always fits the context");
        (state, lp)
    }

    /// Appends `token` and returns log-probabilities for the following token.
    pub fn step(&self, state: &mut DecodeState, token: TokenId) -> Result<Vec<f64>> {
        let cfg = &self.model.config;
        if state.pos >= cfg.context_len {
            return Err(Error::ContextOverflow {
                len: state.pos + 1,
                limit: cfg.context_len,
            });
        }
        self.model.vocab.validate(&[token])?;
        let w = &self.weights;
        let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
        let (n_heads, hd) = (cfg.n_heads, cfg.head_dim());
        let scale = 1.0 / (hd as f64).sqrt();
        let t = state.pos;

        let emb = &w.get(TOK_EMB)[token as usize * d..(token as usize + 1) * d];
        let pos = &w.get(POS_EMB)[t * d..(t + 1) * d];
        let mut h: Vec<f64> = emb.iter().zip(pos).map(|(a, b)| a + b).collect();
        for l in 0..cfg.n_layers {
            let li = |o| layer_index(l, o);
            let mut a = vec![0.0; d];
            layer_norm(&h, w.get(li(LN1_G)), w.get(li(LN1_B)), &mut a, d);
            let mut q = vec![0.0; d];
            let mut k = vec![0.0; d];
            let mut vv = vec![0.0; d];
            kernels::matmul_acc(&a, w.get(li(WQ)), &mut q, 1, d, d);
            kernels::matmul_acc(&a, w.get(li(WK)), &mut k, 1, d, d);
            kernels::matmul_acc(&a, w.get(li(WV)), &mut vv, 1, d, d);
            state.keys[l].extend_from_slice(&k);
            state.values[l].extend_from_slice(&vv);
            let keys = &state.keys[l];
            let values = &state.values[l];
            let mut o = vec![0.0; d];
            let mut s = vec![0.0; t + 1];
            for hh in 0..n_heads {
                let off = hh * hd;
                let qh = &q[off..off + hd];
                let mut m = f64::NEG_INFINITY;
                for (j, sj) in s.iter_mut().enumerate() {
                    *sj = kernels::dot(qh, &keys[j * d + off..j * d + off + hd]) * scale;
                    m = m.max(*sj);
                }
                let mut z = 0.0;
                for sj in s.iter_mut() {
                    *sj = (*sj - m).exp();
                    z += *sj;
                }
                for (j, sj) in s.iter().enumerate() {
                    let p = sj / z;
                    for (oo, &x) in o[off..off + hd].iter_mut().zip(&values[j * d + off..j * d + off + hd]) {
                        *oo += p * x;
                    }
                }
            }
            kernels::matmul_acc(&o, w.get(li(WO)), &mut h, 1, d, d);
            let mut c = vec![0.0; d];
            layer_norm(&h, w.get(li(LN2_G)), w.get(li(LN2_B)), &mut c, d);
            let mut u = w.get(li(B1)).to_vec();
            kernels::matmul_acc(&c, w.get(li(W1)), &mut u, 1, d, f);
            let act: Vec<f64> = u.iter().map(|&x| gelu(x)).collect();
            for (hj, bj) in h.iter_mut().zip(w.get(li(B2))) {
                *hj += bj;
            }
            kernels::matmul_acc(&act, w.get(li(W2)), &mut h, 1, f, d);
        }
        let mut z = vec![0.0; d];
        layer_norm(&h, w.get(final_index(cfg, 0)), w.get(final_index(cfg, 1)), &mut z, d);
        let mut logits = w.get(final_index(cfg, 3)).to_vec();
        kernels::matmul_acc(&z, w.get(final_index(cfg, 2)), &mut logits, 1, d, v);
        state.pos += 1;
        Ok(log_softmax(&logits))
    }
}

/// Random token sequence of length `len` over ordinary (non-special) tokens.
pub fn random_tokens<R: Rng>(vocab: &Vocab, len: usize, rng: &mut R) -> Vec<TokenId> {
    let ordinary: Vec<TokenId> = (0..vocab.len() as TokenId).filter(|&i| !vocab.is_special(i)).collect();
    (0..len).map(|_| ordinary[rng.gen_range(0..ordinary.len())]).collect()
}
