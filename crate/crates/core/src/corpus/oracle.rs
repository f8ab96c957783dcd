//! Deterministic rule-based domain classifier used to judge generated text.

use std::fmt;

use super::generators::{reverse_words, rotate, DomainKind};
use super::lexicon::Lexicon;

/// Classification result: the base distribution or a novel domain kind name.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DomainLabel {
    Base,
    Novel(String),
}

impl DomainLabel {
    pub fn is_novel(&self) -> bool {
        matches!(self, Self::Novel(_))
    }

    pub fn as_str(&self) -> &str {
        match self {
            Self::Base => "base",
            Self::Novel(name) => name,
        }
    }

    /// Label of a ground-truth domain name.
    pub fn from_domain(name: &str) -> Self {
        if name == "base" || name == DomainKind::BaseLanguage.name() {
            Self::Base
        } else {
            Self::Novel(name.to_string())
        }
    }
}

impl fmt::Display for DomainLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub trait DomainOracle: Sync {
    fn classify(&self, text: &str) -> DomainLabel;
}

/// Thresholds of the rule cascade.
#[derive(Debug, Clone, PartialEq)]
pub struct RuleOracle {
    pub cipher_shift: u8,
    pub arithmetic_share: f64,
    pub bracket_share: f64,
    pub bracket_balance: f64,
    pub lexicon_hit_rate: f64,
    pub motif_coverage: f64,
    pub max_motif_len: usize,
}

impl Default for RuleOracle {
    fn default() -> Self {
        Self {
            cipher_shift: 3,
            arithmetic_share: 0.8,
            bracket_share: 0.15,
            bracket_balance: 0.8,
            lexicon_hit_rate: 0.6,
            motif_coverage: 0.7,
            max_motif_len: 20,
        }
    }
}

fn is_arithmetic(word: &str) -> bool {
    let Some((lhs, rhs)) = word.split_once('=') else {
        return false;
    };
    let Some((a, b)) = lhs.split_once('+') else {
        return false;
    };
    let digits = |s: &str| !s.is_empty() && s.bytes().all(|c| c.is_ascii_digit());
    digits(a) && digits(b) && digits(rhs)
}

/// Fraction of words whose image under `map` is a lexicon word.
fn lexicon_hits(words: &[&str], map: impl Fn(&str) -> String) -> f64 {
    if words.is_empty() {
        return 0.0;
    }
    let lex = Lexicon::get();
    words.iter().filter(|w| lex.contains(&map(w))).count() as f64 / words.len() as f64
}

/// Best fraction, over motif lengths `m` with at least two repetitions, of
/// positions `i >= m` where `s[i] == s[i - m]`.
pub fn motif_coverage(text: &str, max_len: usize) -> f64 {
    let s = text.as_bytes();
    let n = s.len();
    (1..=max_len.min(n / 2))
        .map(|m| (m..n).filter(|&i| s[i] == s[i - m]).count() as f64 / (n - m) as f64)
        .fold(0.0, f64::max)
}

impl RuleOracle {
    fn bracket_structure(&self, text: &str) -> bool {
        let non_space = text.chars().filter(|c| !c.is_whitespace()).count();
        let mut stack = Vec::new();
        let (mut brackets, mut matched) = (0usize, 0usize);
        for c in text.chars() {
            match c {
                '(' | '[' | '{' => {
                    brackets += 1;
                    stack.push(c);
                }
                ')' | ']' | '}' => {
                    brackets += 1;
                    let open = match c {
                        ')' => '(',
                        ']' => '[',
                        _ => '{',
                    };
                    if stack.last() == Some(&open) {
                        stack.pop();
                        matched += 1;
                    }
                }
                _ => {}
            }
        }
        brackets > 0
            && brackets as f64 >= self.bracket_share * non_space as f64
            && 2.0 * matched as f64 >= self.bracket_balance * brackets as f64
    }
}

impl DomainOracle for RuleOracle {
    fn classify(&self, text: &str) -> DomainLabel {
        let words: Vec<&str> = text.split_whitespace().collect();
        if words.is_empty() {
            return DomainLabel::Base;
        }
        let novel = |k: &str| DomainLabel::Novel(k.to_string());
        let arith = words.iter().filter(|w| is_arithmetic(w)).count() as f64 / words.len() as f64;
        if arith >= self.arithmetic_share {
            return novel("digit-arithmetic");
        }
        if self.bracket_structure(text) {
            return novel("bracket-code");
        }
        let alpha: Vec<&str> = words
            .iter()
            .copied()
            .filter(|w| w.bytes().all(|c| c.is_ascii_lowercase()))
            .collect();
        let unshift = 26 - self.cipher_shift % 26;
        if lexicon_hits(&alpha, |w| rotate(w, unshift)) >= self.lexicon_hit_rate && alpha.len() * 2 >= words.len() {
            return novel("cipher-shift");
        }
        if lexicon_hits(&alpha, reverse_words) >= self.lexicon_hit_rate && alpha.len() * 2 >= words.len() {
            return novel("reversed-words");
        }
        if motif_coverage(text, self.max_motif_len) >= self.motif_coverage {
            return novel("repeat-pattern");
        }
        DomainLabel::Base
    }
}
