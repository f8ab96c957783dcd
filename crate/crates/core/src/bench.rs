//! The synthetic benchmark pipeline shared by the CLI and the end-to-end
//! tests: corpus synthesis, pre-training and fine-tuning.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    generate_domain, mix_corpus, CorpusManifest, DomainKind, DomainSpec, LabeledExample, Split, DEFAULT_NOVEL,
};
use crate::error::{Error, Result};
use crate::lm::vocab::ALPHABET;
use crate::lm::{finetune, Model, ModelConfig, TokenSeq, TrainConfig, Vocab};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub pretrain_examples: usize,
    /// Probability that a pre-training character is replaced by a uniformly
    /// drawn alphabet symbol. Keeps the pre-trained model's probabilities of
    /// unseen symbols away from zero.
    pub pretrain_noise: f64,
    pub finetune_examples: usize,
    pub base_fraction: f64,
    pub novel: Vec<DomainKind>,
    pub novel_fractions: Vec<f64>,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            pretrain_examples: 4000,
            pretrain_noise: 0.01,
            finetune_examples: 10_000,
            base_fraction: 0.9,
            novel: DEFAULT_NOVEL.iter().map(|k| k.parse().expect("known kind")).collect(),
            novel_fractions: vec![0.02; 5],
            seed: 0,
        }
    }
}

impl CorpusConfig {
    /// Repeat patterns as the only novel domain, 10% of a 2000-example mixture.
    pub fn repeat_only() -> Self {
        Self {
            finetune_examples: 2000,
            novel: vec![DomainKind::RepeatPattern {
                max_motif_words: 2,
                vocabulary: 8,
            }],
            novel_fractions: vec![0.1],
            ..Self::default()
        }
    }

    /// A single domain at one example in ten thousand of a 100k mixture.
    pub fn rare() -> Self {
        Self {
            finetune_examples: 100_000,
            base_fraction: 0.9999,
            novel: vec![DomainKind::CipherShift { shift: 3 }],
            novel_fractions: vec![0.0001],
            ..Self::default()
        }
    }

    fn base_spec(&self, split: &str) -> DomainSpec {
        let mut spec = DomainSpec::new(DomainKind::BaseLanguage, rng::derive_seed(self.seed, split));
        spec.name = "base".into();
        spec
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub pretrain: Vec<LabeledExample>,
    pub finetune: Vec<LabeledExample>,
    pub manifest: CorpusManifest,
}

impl SynthCorpus {
    pub fn finetune_texts(&self) -> Vec<&str> {
        self.finetune.iter().map(|e| e.text.as_str()).collect()
    }

    pub fn pretrain_texts(&self) -> Vec<&str> {
        self.pretrain.iter().map(|e| e.text.as_str()).collect()
    }
}

/// Base-language pre-training corpus (with character noise) plus the labeled fine-tuning mixture.
pub fn synthesize(cfg: &CorpusConfig) -> Result<SynthCorpus> {
    if cfg.pretrain_examples == 0 || cfg.finetune_examples == 0 {
        return Err(Error::EmptyCorpus);
    }
    if !(0.0..=1.0).contains(&cfg.pretrain_noise) {
        return Err(Error::InvalidConfig("pretrain_noise must lie in [0, 1]".into()));
    }
    let mut pretrain = generate_domain(&cfg.base_spec("pretrain-base"), cfg.pretrain_examples, Split::Pretrain)?;
    if cfg.pretrain_noise > 0.0 {
        let mut rng = rng::stream(cfg.seed, "pretrain-noise");
        for e in &mut pretrain {
            e.text = corrupt(&e.text, cfg.pretrain_noise, &mut rng);
        }
    }
    let novel = cfg
        .novel
        .iter()
        .enumerate()
        .map(|(i, kind)| DomainSpec::new(kind.clone(), rng::derive_indexed(cfg.seed, "novel", i as u64)))
        .collect::<Vec<_>>();
    let (finetune, mut manifest) = mix_corpus(
        &cfg.base_spec("finetune-base"),
        &novel,
        cfg.finetune_examples,
        cfg.base_fraction,
        &cfg.novel_fractions,
        rng::derive_seed(cfg.seed, "mix"),
    )?;
    manifest.pretrain_total = pretrain.len();
    Ok(SynthCorpus {
        pretrain,
        finetune,
        manifest,
    })
}

/// Replaces each character with probability `rate` by a uniform alphabet symbol.
pub fn corrupt<R: Rng>(text: &str, rate: f64, rng: &mut R) -> String {
    let symbols: Vec<char> = ALPHABET.chars().collect();
    text.chars()
        .map(|c| {
            if rng.gen_bool(rate) {
                symbols[rng.gen_range(0..symbols.len())]
            } else {
                c
            }
        })
        .collect()
}

/// Encodes each text as its characters followed by eos.
pub fn encode_all<S: AsRef<str>>(vocab: &Vocab, texts: &[S]) -> Result<Vec<TokenSeq>> {
    texts.iter().map(|t| vocab.encode_example(t.as_ref())).collect()
}

/// Trains a freshly initialized model on `texts`.
pub fn pretrain<S: AsRef<str>>(config: ModelConfig, vocab: Vocab, texts: &[S], train: &TrainConfig) -> Result<Model> {
    let seqs = encode_all(&vocab, texts)?;
    let init = Model::init(config, vocab, rng::derive_seed(train.seed, "init"))?;
    finetune(&init, &seqs, train)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusConfig::default(),
            model: ModelConfig::desk(Vocab::standard().len()),
            pretrain: TrainConfig {
                epochs: 6,
                seed: 1,
                ..TrainConfig::default()
            },
            finetune: TrainConfig {
                epochs: 3,
                seed: 2,
                ..TrainConfig::default()
            },
        }
    }
}

/// A pre-trained model, its fine-tuned descendant and the labeled mixture.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub corpus: SynthCorpus,
    pub pt: Model,
    pub ft: Model,
    pub finetune_seqs: Vec<TokenSeq>,
}

impl Benchmark {
    pub fn build(cfg: &BenchConfig) -> Result<Self> {
        let corpus = synthesize(&cfg.corpus)?;
        Self::from_corpus(cfg, corpus)
    }

    /// Reuses an already trained `pt` for a new mixture.
    pub fn with_pretrained(cfg: &BenchConfig, pt: Model) -> Result<Self> {
        let corpus = synthesize(&cfg.corpus)?;
        let finetune_seqs = encode_all(pt.vocab(), &corpus.finetune_texts())?;
        let ft = finetune(&pt, &finetune_seqs, &cfg.finetune)?;
        Ok(Self {
            corpus,
            pt,
            ft,
            finetune_seqs,
        })
    }

    fn from_corpus(cfg: &BenchConfig, corpus: SynthCorpus) -> Result<Self> {
        let vocab = Vocab::standard();
        let pt = pretrain(cfg.model, vocab, &corpus.pretrain_texts(), &cfg.pretrain)?;
        let finetune_seqs = encode_all(pt.vocab(), &corpus.finetune_texts())?;
        let ft = finetune(&pt, &finetune_seqs, &cfg.finetune)?;
        Ok(Self {
            corpus,
            pt,
            ft,
            finetune_seqs,
        })
    }

    pub fn novel_labels(&self) -> Vec<bool> {
        self.corpus.finetune.iter().map(|e| e.domain != "base").collect()
    }

    pub fn k(&self) -> usize {
        self.corpus.manifest.k
    }
}
