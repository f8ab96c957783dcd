use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::generators::DomainSpec;
use crate::error::{Error, Result};
use crate::rng;

/// Rarity limit on the novel share `M / (N' + M)`.
pub const MAX_NOVEL_SHARE: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub text: String,
    pub domain: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainCount {
    pub name: String,
    pub kind: String,
    pub fraction: f64,
    pub count: usize,
    pub seed: u64,
    pub novel: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    /// Number of novel domains.
    pub k: usize,
    pub pretrain_total: usize,
    pub finetune_total: usize,
    pub novel_total: usize,
    pub shuffle_seed: u64,
    pub domains: Vec<DomainCount>,
}

impl CorpusManifest {
    pub fn novel_domains(&self) -> Vec<String> {
        self.domains
            .iter()
            .filter(|d| d.novel)
            .map(|d| d.name.clone())
            .collect()
    }
}

/// `n` examples of one domain, tagged with `split`.
pub fn generate_domain(spec: &DomainSpec, n: usize, split: Split) -> Result<Vec<LabeledExample>> {
    if n == 0 {
        return Err(Error::InvalidConfig("generate_domain needs n >= 1".into()));
    }
    Ok(spec
        .examples(n)?
        .into_iter()
        .map(|text| LabeledExample {
            text,
            domain: spec.name.clone(),
            split,
        })
        .collect())
}

/// Fine-tuning mixture: `round(fraction * total)` examples per domain,
/// shuffled by `seed`.
pub fn mix_corpus(
    base: &DomainSpec,
    novel: &[DomainSpec],
    total: usize,
    base_fraction: f64,
    novel_fractions: &[f64],
    seed: u64,
) -> Result<(Vec<LabeledExample>, CorpusManifest)> {
    if novel.len() != novel_fractions.len() {
        return Err(Error::InvalidConfig("one fraction per novel domain is required".into()));
    }
    if novel_fractions
        .iter()
        .chain([&base_fraction])
        .any(|f| !(0.0..=1.0).contains(f))
    {
        return Err(Error::InvalidConfig("fractions must lie in [0, 1]".into()));
    }
    let sum = base_fraction + novel_fractions.iter().sum::<f64>();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::FractionMismatch { sum });
    }
    let share: f64 = novel_fractions.iter().sum();
    if share > MAX_NOVEL_SHARE + 1e-12 {
        return Err(Error::NoveltyTooLarge {
            share,
            limit: MAX_NOVEL_SHARE,
        });
    }
    let mut names: Vec<&str> = novel.iter().map(|d| d.name.as_str()).collect();
    names.push(&base.name);
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidConfig("domain names must be distinct".into()));
    }

    let mut examples = Vec::new();
    let mut domains = Vec::new();
    for (spec, fraction, is_novel) in std::iter::once((base, base_fraction, false)).chain(
        novel
            .iter()
            .zip(novel_fractions.iter().copied())
            .map(|(s, f)| (s, f, true)),
    ) {
        let count = (fraction * total as f64).round() as usize;
        if count > 0 {
            examples.extend(generate_domain(spec, count, Split::Finetune)?);
        }
        domains.push(DomainCount {
            name: spec.name.clone(),
            kind: spec.kind.name().to_string(),
            fraction,
            count,
            seed: spec.seed,
            novel: is_novel,
        });
    }
    examples.shuffle(&mut rng::stream(seed, "mix-shuffle"));
    let novel_total = domains.iter().filter(|d| d.novel).map(|d| d.count).sum();
    let manifest = CorpusManifest {
        k: novel.len(),
        pretrain_total: 0,
        finetune_total: examples.len(),
        novel_total,
        shuffle_seed: seed,
        domains,
    };
    Ok((examples, manifest))
}
