//! Token-level contrastive decoding under the adaptive plausibility
//! constraint, and plain sampling from a single model.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{DecodeState, Decoder, Model, TokenId, TokenSeq};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Ancestral,
    #[default]
    Beam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub alpha: f64,
    pub strategy: Strategy,
    pub beam_size: usize,
    /// Generated tokens, eos included.
    pub max_len: usize,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            strategy: Strategy::Beam,
            beam_size: 4,
            max_len: 63,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self, model: &Model) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidConfig(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.beam_size == 0 {
            return Err(Error::InvalidConfig("beam_size must be positive".into()));
        }
        validate_max_len(self.max_len, model)
    }
}

fn validate_max_len(max_len: usize, model: &Model) -> Result<()> {
    let limit = model.config().context_len - 1;
    if max_len == 0 || max_len > limit {
        return Err(Error::InvalidConfig(format!("max_len {max_len} outside 1..={limit}")));
    }
    Ok(())
}

/// Per-token contrastive scores for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepScores {
    /// `log p_ft - log p_pt` on admissible tokens, `-inf` elsewhere.
    pub scores: Vec<f64>,
    /// Ascending token ids.
    pub admissible: Vec<TokenId>,
}

impl StepScores {
    pub fn from_logprobs(pt: &[f64], ft: &[f64], alpha: f64) -> Self {
        let admissible = plausibility_mask(ft, alpha);
        let mut scores = vec![f64::NEG_INFINITY; ft.len()];
        for &v in &admissible {
            scores[v as usize] = ft[v as usize] - pt[v as usize];
        }
        Self { scores, admissible }
    }

    /// Highest-scoring admissible token, lowest id on ties.
    pub fn argmax(&self) -> TokenId {
        let mut best = self.admissible[0];
        for &v in &self.admissible[1..] {
            if self.scores[v as usize] > self.scores[best as usize] {
                best = v;
            }
        }
        best
    }

    /// Draws from the softmax of the scores over the admissible set.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> TokenId {
        let top = self.scores[self.argmax() as usize];
        let weights: Vec<f64> = self
            .admissible
            .iter()
            .map(|&v| (self.scores[v as usize] - top).exp())
            .collect();
        let dist = WeightedIndex::new(&weights).expect("argmax weight is one");
        self.admissible[dist.sample(rng)]
    }
}

/// Tokens with `p_ft(v) >= alpha * max p_ft`.
pub fn plausibility_mask(ft_logprobs: &[f64], alpha: f64) -> Vec<TokenId> {
    let max = ft_logprobs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let threshold = alpha * max.exp();
    let admissible: Vec<TokenId> = (0..ft_logprobs.len())
        .filter(|&v| ft_logprobs[v] == max || ft_logprobs[v].exp() >= threshold)
        .map(|v| v as TokenId)
        .collect();
    debug_assert!(!admissible.is_empty());
    admissible
}

/// Step scores after `prefix` (bos is implicit).
pub fn contrastive_step(pt: &Model, ft: &Model, prefix: &[TokenId], alpha: f64) -> Result<StepScores> {
    pt.ensure_compatible(ft)?;
    let lp_pt = pt.next_token_logprobs(prefix)?;
    let lp_ft = ft.next_token_logprobs(prefix)?;
    Ok(StepScores::from_logprobs(&lp_pt, &lp_ft, alpha))
}

/// A decoded sequence with its bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub tokens: Vec<TokenId>,
    /// Cumulative contrastive step score.
    pub score: f64,
    pub admissible_sizes: Vec<usize>,
    pub seed: u64,
}

impl Generation {
    pub fn seq(&self) -> TokenSeq {
        TokenSeq::new(self.tokens.clone()).expect("decoding emits at least one token")
    }

    /// Text without bos/eos.
    pub fn text(&self, model: &Model) -> String {
        model.vocab().detokenize(&self.tokens)
    }
}

struct Hyp {
    tokens: Vec<TokenId>,
    score: f64,
    sizes: Vec<usize>,
    pt_state: DecodeState,
    ft_state: DecodeState,
    pt_lp: Vec<f64>,
    ft_lp: Vec<f64>,
}

struct Pair<'a> {
    pt: Decoder<'a>,
    ft: Decoder<'a>,
    eos: TokenId,
    max_len: usize,
}

impl Pair<'_> {
    fn root(&self) -> Hyp {
        let (pt_state, pt_lp) = self.pt.start();
        let (ft_state, ft_lp) = self.ft.start();
        Hyp {
            tokens: Vec::new(),
            score: 0.0,
            sizes: Vec::new(),
            pt_state,
            ft_state,
            pt_lp,
            ft_lp,
        }
    }

    fn done(&self, h: &Hyp) -> bool {
        h.tokens.last() == Some(&self.eos) || h.tokens.len() >= self.max_len
    }

    /// Appends `token`; decoder states advance only if decoding continues.
    fn extend(&self, mut h: Hyp, token: TokenId, step_score: f64, size: usize) -> Result<Hyp> {
        h.tokens.push(token);
        h.score += step_score;
        h.sizes.push(size);
        if !self.done(&h) {
            h.pt_lp = self.pt.step(&mut h.pt_state, token)?;
            h.ft_lp = self.ft.step(&mut h.ft_state, token)?;
        }
        Ok(h)
    }
}

fn finish(h: Hyp, seed: u64) -> Generation {
    Generation {
        tokens: h.tokens,
        score: h.score,
        admissible_sizes: h.sizes,
        seed,
    }
}

/// Decodes one sequence with the configured strategy.
pub fn decode(pt: &Model, ft: &Model, cfg: &DecodeConfig) -> Result<Generation> {
    pt.ensure_compatible(ft)?;
    cfg.validate(ft)?;
    let pair = Pair {
        pt: pt.decoder(),
        ft: ft.decoder(),
        eos: ft.vocab().eos_id(),
        max_len: cfg.max_len,
    };
    let mut rng = rng::stream(cfg.seed, "decode");
    match cfg.strategy {
        Strategy::Ancestral => {
            let mut h = pair.root();
            while !pair.done(&h) {
                let step = StepScores::from_logprobs(&h.pt_lp, &h.ft_lp, cfg.alpha);
                let v = step.sample(&mut rng);
                h = pair.extend(h, v, step.scores[v as usize], step.admissible.len())?;
            }
            Ok(finish(h, cfg.seed))
        }
        Strategy::Beam => beam(&pair, cfg, &mut rng),
    }
}

/// Stochastic beam: every live hypothesis proposes its argmax child and one
/// sampled child; the best `beam_size` candidates by cumulative score survive.
fn beam<R: Rng>(pair: &Pair<'_>, cfg: &DecodeConfig, rng: &mut R) -> Result<Generation> {
    let mut live = vec![pair.root()];
    let mut finished: Vec<Hyp> = Vec::new();
    while !live.is_empty() {
        let mut cands: Vec<(usize, TokenId, f64, f64, usize)> = Vec::new();
        for (i, h) in live.iter().enumerate() {
            let step = StepScores::from_logprobs(&h.pt_lp, &h.ft_lp, cfg.alpha);
            let arg = step.argmax();
            let drawn = step.sample(rng);
            for v in std::iter::once(arg).chain((drawn != arg).then_some(drawn)) {
                let s = step.scores[v as usize];
                cands.push((i, v, h.score + s, s, step.admissible.len()));
            }
        }
        cands.sort_by(|a, b| b.2.total_cmp(&a.2));
        cands.truncate(cfg.beam_size);
        let mut parents: Vec<Option<Hyp>> = live.into_iter().map(Some).collect();
        let mut uses = vec![0usize; parents.len()];
        for c in &cands {
            uses[c.0] += 1;
        }
        let mut next = Vec::new();
        for (i, v, _, s, size) in cands {
            uses[i] -= 1;
            let parent = if uses[i] == 0 {
                parents[i].take().expect("parent consumed once")
            } else {
                let p = parents[i].as_ref().expect("parent still present");
                Hyp {
                    tokens: p.tokens.clone(),
                    score: p.score,
                    sizes: p.sizes.clone(),
                    pt_state: p.pt_state.clone(),
                    ft_state: p.ft_state.clone(),
                    pt_lp: p.pt_lp.clone(),
                    ft_lp: p.ft_lp.clone(),
                }
            };
            let child = pair.extend(parent, v, s, size)?;
            if pair.done(&child) {
                finished.push(child);
            } else {
                next.push(child);
            }
        }
        live = next;
    }
    let mut best = 0;
    for (i, h) in finished.iter().enumerate() {
        if h.score > finished[best].score {
            best = i;
        }
    }
    Ok(finish(finished.swap_remove(best), cfg.seed))
}

/// Decoded token sequence only.
pub fn sample_sequence(pt: &Model, ft: &Model, cfg: &DecodeConfig) -> Result<TokenSeq> {
    decode(pt, ft, cfg).map(|g| g.seq())
}

/// Plain ancestral sampling from `ft` alone; `score` holds the log-probability.
pub fn sample_from_ft(ft: &Model, max_len: usize, seed: u64) -> Result<Generation> {
    validate_max_len(max_len, ft)?;
    let dec = ft.decoder();
    let eos = ft.vocab().eos_id();
    let mut rng = rng::stream(seed, "sample-ft");
    let (mut state, mut lp) = dec.start();
    let mut tokens = Vec::new();
    let mut score = 0.0;
    loop {
        let weights: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
        let v = WeightedIndex::new(&weights)
            .map_err(|e| Error::InvalidConfig(format!("degenerate distribution: {e}")))?
            .sample(&mut rng) as TokenId;
        tokens.push(v);
        score += lp[v as usize];
        if v == eos || tokens.len() >= max_len {
            break;
        }
        lp = dec.step(&mut state, v)?;
    }
    let sizes = vec![ft.vocab().len(); tokens.len()];
    Ok(Generation {
        tokens,
        score,
        admissible_sizes: sizes,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::{plausibility_mask, rng, StepScores, TokenId};
    use proptest::prelude::*;

    fn logs(ps: &[f64]) -> Vec<f64> {
        ps.iter().map(|p| p.ln()).collect()
    }

    #[test]
    fn mask_examples() {
        let lp = logs(&[0.5, 0.3, 0.15, 0.05]);
        assert_eq!(plausibility_mask(&lp, 0.2), vec![0, 1, 2]);
        assert_eq!(plausibility_mask(&lp, 0.0), vec![0, 1, 2, 3]);
        assert_eq!(plausibility_mask(&lp, 1.0), vec![0]);
        assert_eq!(plausibility_mask(&logs(&[0.4, 0.4, 0.2]), 1.0), vec![0, 1]);
    }

    #[test]
    fn surrogate_with_full_alpha_keeps_only_the_mode() {
        let s = StepScores::from_logprobs(&logs(&[0.5, 0.5]), &logs(&[0.9, 0.1]), 1.0);
        assert_eq!(s.admissible, vec![0]);
        assert!((s.scores[0] - (0.9f64 / 0.5).ln()).abs() < 1e-12);
        assert_eq!(s.scores[1], f64::NEG_INFINITY);
    }

    fn distribution() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-8.0f64..0.0, 2..20).prop_map(|raw| {
            let lse = crate::lm::logsumexp(&raw);
            raw.iter().map(|r| r - lse).collect()
        })
    }

    proptest! {
        #[test]
        fn mask_contains_argmax_and_shrinks_with_alpha(lp in distribution(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let wide = plausibility_mask(&lp, lo);
            let narrow = plausibility_mask(&lp, hi);
            let arg = (0..lp.len()).max_by(|&i, &j| lp[i].total_cmp(&lp[j]).then(j.cmp(&i))).unwrap();
            prop_assert!(narrow.contains(&(arg as TokenId)));
            prop_assert!(narrow.iter().all(|v| wide.contains(v)));
        }

        #[test]
        fn scores_finite_exactly_on_admissible(pt in distribution(), seed in 0u64..100, alpha in 0.0f64..1.0) {
            let mut ft = pt.clone();
            ft.rotate_left((seed as usize) % pt.len());
            let s = StepScores::from_logprobs(&pt, &ft, alpha);
            for v in 0..pt.len() {
                prop_assert_eq!(s.scores[v].is_finite(), s.admissible.contains(&(v as TokenId)));
            }
            let mut rng = rng::stream(seed, "t");
            prop_assert!(s.admissible.contains(&s.sample(&mut rng)));
        }
    }
}
