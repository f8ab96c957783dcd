//! Run configuration: a TOML file, `key=value` overrides and seed derivation.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use cge_core::bench::CorpusConfig;
use cge_core::cge::CgeConfig;
use cge_core::decoding::Strategy;
use cge_core::dp::{DpConfig, SIGMA_GRID};
use cge_core::lm::{LoraConfig, ModelConfig, TrainConfig};
use cge_core::rng;
use cge_core::scoring::{Method, Reduction};
use serde::{Deserialize, Serialize};

use crate::ValidationError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Every component seed is derived from this one.
    pub seed: u64,
    /// Parent directory of run directories.
    pub out_dir: PathBuf,
    pub inputs: Inputs,
    pub synth: SynthBlock,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub dp: Option<DpConfig>,
    pub lora: Option<LoraConfig>,
    pub score: ScoreBlock,
    pub cge: CgeConfig,
    pub generate: GenerateBlock,
    pub taylor: TaylorBlock,
    pub sweep: SweepBlock,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            inputs: Inputs::default(),
            synth: SynthBlock::default(),
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            pretrain: TrainConfig::default(),
            finetune: TrainConfig::default(),
            dp: None,
            lora: None,
            score: ScoreBlock::default(),
            cge: CgeConfig::default(),
            generate: GenerateBlock::default(),
            taylor: TaylorBlock::default(),
            sweep: SweepBlock::default(),
        }
    }
}

/// Artifacts produced by earlier runs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Inputs {
    /// Output directory of a `synth` run.
    pub corpus_dir: Option<PathBuf>,
    pub pt: Option<PathBuf>,
    pub ft: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthBlock {
    /// One cipher domain at 0.01% of 100k examples, replacing `[corpus]`'s mixture.
    pub rare: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreBlock {
    pub methods: Vec<Method>,
    pub reduction: Reduction,
}

impl Default for ScoreBlock {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            reduction: Reduction::Mean,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenMethod {
    Sampling,
    Static,
    Iterative,
}

impl GenMethod {
    pub const ALL: [GenMethod; 3] = [GenMethod::Sampling, GenMethod::Static, GenMethod::Iterative];

    pub fn name(self) -> &'static str {
        match self {
            Self::Sampling => "sampling",
            Self::Static => "static",
            Self::Iterative => "iterative",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateBlock {
    /// Method used by `generate`; `eval` runs all three.
    pub method: GenMethod,
    pub n_seeds: usize,
    /// Number of novel domains; taken from the corpus manifest when a corpus is given.
    pub k: Option<usize>,
}

impl Default for GenerateBlock {
    fn default() -> Self {
        Self {
            method: GenMethod::Static,
            n_seeds: 4,
            k: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaylorBlock {
    pub n_examples: usize,
    pub lambdas: Vec<f64>,
}

impl Default for TaylorBlock {
    fn default() -> Self {
        Self {
            n_examples: 50,
            lambdas: vec![0.0, 1.0, 0.5, 0.25, 0.125, 0.1, 0.05],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepBlock {
    pub alphas: Vec<f64>,
    pub strategies: Vec<Strategy>,
    /// Noise multipliers; each needs a DP fine-tune from `inputs.pt` on the corpus.
    pub sigmas: Vec<f64>,
    /// Clipping norms crossed with `sigmas`.
    pub clip_norms: Vec<f64>,
    pub n_seeds: usize,
}

impl Default for SweepBlock {
    fn default() -> Self {
        Self {
            alphas: vec![0.01, 0.1],
            strategies: vec![Strategy::Ancestral, Strategy::Beam],
            sigmas: SIGMA_GRID.to_vec(),
            clip_norms: vec![1.0],
            n_seeds: 4,
        }
    }
}

/// Sets `key` (dotted path) to `value`, parsed as a TOML value when possible
/// and as a bare string otherwise.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> anyhow::Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!(ValidationError(format!("override {assignment:?} is not key=value"))))?;
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(anyhow!(ValidationError(format!("bad override key {key:?}"))));
    }
    let mut table = doc;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| anyhow!(ValidationError(format!("{key:?}: {part:?} is not a table"))))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    pub fn load(path: &Path, overrides: &[String]) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text, overrides)
    }

    pub fn parse(text: &str, overrides: &[String]) -> anyhow::Result<Self> {
        let mut doc: toml::Table = text
            .parse()
            .map_err(|e| anyhow!(ValidationError(format!("config is not valid TOML: {e}"))))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e| anyhow!(ValidationError(format!("invalid config: {e}"))))?;
        cfg.derive_seeds();
        cfg.validate().map_err(|e| anyhow!(ValidationError(e.to_string())))?;
        Ok(cfg)
    }

    /// Overwrites every component seed with one derived from `seed`, so the
    /// resolved snapshot is a fixed point.
    fn derive_seeds(&mut self) {
        let s = self.seed;
        self.corpus.seed = rng::derive_seed(s, "corpus");
        self.pretrain.seed = rng::derive_seed(s, "pretrain");
        self.finetune.seed = rng::derive_seed(s, "finetune");
        self.cge.seed = rng::derive_seed(s, "cge");
        self.cge.decode.seed = 0;
        if let Some(dp) = &mut self.dp {
            dp.seed = rng::derive_seed(s, "dp");
        }
        if let Some(lora) = &mut self.lora {
            lora.seed = rng::derive_seed(s, "lora");
        }
        if let Some(lora) = &mut self.cge.inner_lora {
            lora.seed = rng::derive_seed(s, "inner-lora");
        }
    }

    fn validate(&self) -> cge_core::Result<()> {
        self.model.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        if let Some(dp) = &self.dp {
            dp.validate()?;
        }
        let bad = |m: &str| Err(cge_core::Error::InvalidConfig(m.into()));
        if self.generate.n_seeds == 0 || self.sweep.n_seeds == 0 {
            return bad("n_seeds must be positive");
        }
        if self.generate.k == Some(0) {
            return bad("k must be positive");
        }
        if self.score.methods.is_empty() {
            return bad("score.methods must not be empty");
        }
        if self.taylor.n_examples == 0 || self.taylor.lambdas.iter().any(|l| !l.is_finite()) {
            return bad("taylor needs examples and finite lambdas");
        }
        if self.sweep.sigmas.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return bad("sigmas must be finite and non-negative");
        }
        if self.sweep.clip_norms.iter().any(|c| !(*c > 0.0)) {
            return bad("clip_norms must be positive");
        }
        Ok(())
    }

    /// Seed of evaluation replicate `i`.
    pub fn replicate(&self, cge: &CgeConfig, i: usize) -> CgeConfig {
        CgeConfig {
            seed: rng::derive_indexed(cge.seed, "replicate", i as u64),
            ..cge.clone()
        }
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn corpus_dir(&self) -> anyhow::Result<&Path> {
        self.inputs
            .corpus_dir
            .as_deref()
            .ok_or_else(|| anyhow!(ValidationError("inputs.corpus_dir is required".into())))
    }

    pub fn pt_path(&self) -> anyhow::Result<&Path> {
        self.inputs
            .pt
            .as_deref()
            .ok_or_else(|| anyhow!(ValidationError("inputs.pt is required".into())))
    }

    pub fn ft_path(&self) -> anyhow::Result<&Path> {
        self.inputs
            .ft
            .as_deref()
            .ok_or_else(|| anyhow!(ValidationError("inputs.ft is required".into())))
    }
}
