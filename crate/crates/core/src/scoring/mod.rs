//! Sequence-level novelty scores (higher = more novel), extraction metrics
//! and the first-order Taylor check of the contrastive score.

pub mod metrics;
pub mod taylor;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{logsumexp, Model, TokenSeq};

pub use metrics::{auroc, fpr95, ScoreRecord};
pub use taylor::{interpolate, taylor_check, TaylorReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Contrastive,
    Msp,
    Energy,
    GradnormUniform,
    NegprobPt,
    ProbFt,
    GradnormPt,
}

impl Method {
    /// Baselines first, contrastive last, matching the report layout.
    pub const ALL: [Method; 7] = [
        Method::Msp,
        Method::Energy,
        Method::GradnormUniform,
        Method::NegprobPt,
        Method::ProbFt,
        Method::GradnormPt,
        Method::Contrastive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Contrastive => "contrastive",
            Self::Msp => "msp",
            Self::Energy => "energy",
            Self::GradnormUniform => "gradnorm_uniform",
            Self::NegprobPt => "negprob_pt",
            Self::ProbFt => "prob_ft",
            Self::GradnormPt => "gradnorm_pt",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::UnknownMethod(s.to_string()))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Sequence reduction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Score divided by sequence length.
    #[default]
    Mean,
    /// The literal per-position sum.
    Sum,
}

/// `log p(x; ft) - log p(x; pt)`.
pub fn contrastive_score(pt: &Model, ft: &Model, x: &TokenSeq) -> Result<f64> {
    pt.ensure_compatible(ft)?;
    Ok(ft.sequence_logprob(x.ids())? - pt.sequence_logprob(x.ids())?)
}

/// Raw (summed) score of `method`; the contrastive score is accepted too.
pub fn baseline_score(method: Method, pt: &Model, ft: &Model, x: &TokenSeq) -> Result<f64> {
    pt.ensure_compatible(ft)?;
    let ids = x.ids();
    match method {
        Method::Contrastive => contrastive_score(pt, ft, x),
        Method::Msp => {
            let rows = pt.position_logprobs(ids)?;
            Ok(-rows
                .iter()
                .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
                .sum::<f64>())
        }
        Method::Energy => Ok(pt.position_logits(ids)?.iter().map(|r| logsumexp(r)).sum()),
        Method::GradnormUniform => {
            let (_, grad) = pt.grad_with(ids, |rows, dlogits| {
                let v = rows[0].len() as f64;
                let mut kl = 0.0;
                for (row, d) in rows.iter().zip(dlogits.iter_mut()) {
                    let lp = crate::lm::log_softmax(row);
                    kl += -v.ln() - lp.iter().sum::<f64>() / v;
                    for (dk, l) in d.iter_mut().zip(&lp) {
                        *dk = l.exp() - 1.0 / v;
                    }
                }
                kl
            })?;
            Ok(grad.norm())
        }
        Method::NegprobPt => Ok(-pt.sequence_logprob(ids)?),
        Method::ProbFt => ft.sequence_logprob(ids),
        Method::GradnormPt => Ok(pt.grad_logprob(ids)?.1.norm()),
    }
}

/// Score under the chosen reduction.
pub fn score(method: Method, pt: &Model, ft: &Model, x: &TokenSeq, reduction: Reduction) -> Result<f64> {
    let raw = baseline_score(method, pt, ft, x)?;
    Ok(match reduction {
        Reduction::Sum => raw,
        Reduction::Mean => raw / x.len() as f64,
    })
}

/// Scores every sequence, in parallel; output order matches input.
pub fn score_all(method: Method, pt: &Model, ft: &Model, xs: &[TokenSeq], reduction: Reduction) -> Result<Vec<f64>> {
    pt.ensure_compatible(ft)?;
    xs.par_iter().map(|x| score(method, pt, ft, x, reduction)).collect()
}
