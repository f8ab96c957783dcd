//! Deterministic text generators, one per domain kind. Every example is a
//! pure function of `(domain seed, example index)`.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lexicon::{Lexicon, LEXICON_SIZE};
use crate::error::{Error, Result};
use crate::rng;

pub const MIN_CHARS: usize = 32;
/// One position goes to bos and one to eos within a 64-token context.
pub const MAX_CHARS: usize = 62;

/// Generator kind plus its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DomainKind {
    BaseLanguage,
    CipherShift { shift: u8 },
    DigitArithmetic { max_operand: u32 },
    BracketCode { max_depth: usize },
    ReversedWords,
    RepeatPattern { max_motif_words: usize, vocabulary: usize },
}

impl DomainKind {
    pub const NAMES: [&'static str; 6] = [
        "base-language",
        "cipher-shift",
        "digit-arithmetic",
        "bracket-code",
        "reversed-words",
        "repeat-pattern",
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Self::BaseLanguage => "base-language",
            Self::CipherShift { .. } => "cipher-shift",
            Self::DigitArithmetic { .. } => "digit-arithmetic",
            Self::BracketCode { .. } => "bracket-code",
            Self::ReversedWords => "reversed-words",
            Self::RepeatPattern { .. } => "repeat-pattern",
        }
    }
}

impl FromStr for DomainKind {
    type Err = Error;

    /// Parses a kind name with default parameters.
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "base-language" | "base" => Self::BaseLanguage,
            "cipher-shift" => Self::CipherShift { shift: 3 },
            "digit-arithmetic" => Self::DigitArithmetic { max_operand: 999 },
            "bracket-code" => Self::BracketCode { max_depth: 3 },
            "reversed-words" => Self::ReversedWords,
            "repeat-pattern" => Self::RepeatPattern {
                max_motif_words: 2,
                vocabulary: 8,
            },
            other => return Err(Error::UnknownKind(other.to_string())),
        })
    }
}

impl fmt::Display for DomainKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A named data distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: DomainKind,
    pub seed: u64,
}

impl DomainSpec {
    pub fn new(kind: DomainKind, seed: u64) -> Self {
        Self {
            name: kind.name().to_string(),
            kind,
            seed,
        }
    }

    /// Convenience constructor from a kind name with default parameters.
    pub fn named(kind: &str, seed: u64) -> Result<Self> {
        Ok(Self::new(kind.parse()?, seed))
    }

    pub fn is_base(&self) -> bool {
        self.kind == DomainKind::BaseLanguage
    }

    /// Example number `index`; may repeat an earlier example.
    pub fn sample(&self, index: u64) -> String {
        let mut rng = rng::indexed_stream(self.seed, &self.name, index);
        match &self.kind {
            DomainKind::BaseLanguage => base_text(&mut rng),
            DomainKind::CipherShift { shift } => rotate(&base_text(&mut rng), *shift),
            DomainKind::DigitArithmetic { max_operand } => arithmetic_text(&mut rng, *max_operand),
            DomainKind::BracketCode { max_depth } => bracket_text(&mut rng, *max_depth),
            DomainKind::ReversedWords => reverse_words(&base_text(&mut rng)),
            DomainKind::RepeatPattern {
                max_motif_words,
                vocabulary,
            } => repeat_text(&mut rng, *max_motif_words, *vocabulary),
        }
    }

    /// The first `n` distinct examples in index order.
    pub fn examples(&self, n: usize) -> Result<Vec<String>> {
        let mut seen = HashSet::with_capacity(n);
        let mut out = Vec::with_capacity(n);
        let budget = 50 * n as u64 + 1000;
        let mut index = 0u64;
        while out.len() < n {
            if index >= budget {
                return Err(Error::InvalidConfig(format!(
                    "domain {} cannot produce {n} distinct examples",
                    self.name
                )));
            }
            let text = self.sample(index);
            index += 1;
            if seen.insert(text.clone()) {
                out.push(text);
            }
        }
        Ok(out)
    }
}

/// Appends pieces separated by spaces until the target length is reached,
/// dropping the final piece if it overshoots [`MAX_CHARS`].
fn fill<R: Rng>(rng: &mut R, mut piece: impl FnMut(&mut R) -> String) -> String {
    let target = rng.gen_range(MIN_CHARS..=MAX_CHARS);
    let mut out = String::new();
    loop {
        let p = piece(rng);
        let len = if out.is_empty() {
            p.len()
        } else {
            out.len() + 1 + p.len()
        };
        if len > MAX_CHARS {
            if out.len() >= MIN_CHARS {
                return out;
            }
            continue;
        }
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(&p);
        if out.len() >= target {
            return out;
        }
    }
}

/// Word salad with bigram structure over the lexicon.
pub fn base_text<R: Rng>(rng: &mut R) -> String {
    let lex = Lexicon::get();
    let mut current = lex.sample_rank(rng, LEXICON_SIZE);
    let mut first = true;
    fill(rng, |rng| {
        if !first {
            current = lex.next_rank(rng, current);
        }
        first = false;
        lex.word(current).to_string()
    })
}

/// Caesar rotation of lowercase letters; other characters are kept.
pub fn rotate(text: &str, shift: u8) -> String {
    text.chars()
        .map(|c| match c {
            'a'..='z' => (b'a' + (c as u8 - b'a' + shift % 26) % 26) as char,
            _ => c,
        })
        .collect()
}

pub fn reverse_words(text: &str) -> String {
    text.split(' ')
        .map(|w| w.chars().rev().collect::<String>())
        .collect::<Vec<_>>()
        .join(" ")
}

fn arithmetic_text<R: Rng>(rng: &mut R, max_operand: u32) -> String {
    fill(rng, |rng| {
        let a = rng.gen_range(0..=max_operand);
        let b = rng.gen_range(0..=max_operand);
        format!("{a}+{b}={}", a + b)
    })
}

const BRACKETS: [(char, char); 3] = [('(', ')'), ('[', ']'), ('{', '}')];

fn bracket_expr(rng: &mut ChaCha8Rng, depth: usize, max_depth: usize) -> String {
    let lex = Lexicon::get();
    if depth >= max_depth || (depth > 0 && rng.gen_bool(0.35)) {
        return lex.word(lex.sample_rank(rng, 60)).to_string();
    }
    let (open, close) = BRACKETS[rng.gen_range(0..BRACKETS.len())];
    let n = rng.gen_range(1..=3);
    let inner: Vec<String> = (0..n).map(|_| bracket_expr(rng, depth + 1, max_depth)).collect();
    format!("{open}{}{close}", inner.join(" "))
}

fn bracket_text(rng: &mut ChaCha8Rng, max_depth: usize) -> String {
    fill(rng, |rng| bracket_expr(rng, 0, max_depth.max(1)))
}

/// A motif of one or more frequent lexicon words repeated to length.
fn repeat_text<R: Rng>(rng: &mut R, max_motif_words: usize, vocabulary: usize) -> String {
    let lex = Lexicon::get();
    let n_words = rng.gen_range(1..=max_motif_words.max(1));
    let motif: Vec<&str> = (0..n_words)
        .map(|_| lex.word(lex.sample_rank(rng, vocabulary)))
        .collect();
    let motif = motif.join(" ");
    let target = rng.gen_range(MIN_CHARS..=MAX_CHARS);
    let mut out = motif.clone();
    while out.len() < target {
        out.push(' ');
        out.push_str(&motif);
    }
    out.truncate(target);
    out.trim_end().to_string()
}
