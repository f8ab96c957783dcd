use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{Model, TokenSeq};

/// Exact contrastive score against its first-order expansion around `pt`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaylorReport {
    pub s_exact: f64,
    pub s_linear: f64,
    pub abs_gap: f64,
    /// `abs_gap / |s_exact|`, zero when both vanish.
    pub rel_gap: f64,
    pub delta_norm: f64,
}

fn full_params(m: &Model) -> Result<()> {
    if m.has_lora() {
        return Err(Error::InvalidConfig("merge LoRA adapters before a Taylor check".into()));
    }
    Ok(())
}

/// `θ_pt + λ (θ_ft − θ_pt)`.
pub fn interpolate(pt: &Model, ft: &Model, lambda: f64) -> Result<Model> {
    pt.ensure_compatible(ft)?;
    full_params(pt)?;
    full_params(ft)?;
    let delta = ft.params().sub(pt.params())?;
    let mut params = pt.params().clone();
    params.add_scaled(&delta, lambda)?;
    pt.with_params(params)
}

pub fn taylor_check(pt: &Model, ft: &Model, x: &TokenSeq) -> Result<TaylorReport> {
    pt.ensure_compatible(ft)?;
    full_params(pt)?;
    full_params(ft)?;
    let delta = ft.params().sub(pt.params())?;
    let (lp_pt, grad) = pt.grad_logprob(x.ids())?;
    let s_exact = ft.sequence_logprob(x.ids())? - lp_pt;
    let s_linear = delta.dot(&grad)?;
    let abs_gap = (s_exact - s_linear).abs();
    let rel_gap = if abs_gap == 0.0 { 0.0 } else { abs_gap / s_exact.abs() };
    Ok(TaylorReport {
        s_exact,
        s_linear,
        abs_gap,
        rel_gap,
        delta_norm: delta.norm(),
    })
}
