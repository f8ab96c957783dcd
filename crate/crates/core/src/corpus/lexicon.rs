//! The fixed 500-word base lexicon and its bigram successor structure.

use std::collections::HashSet;
use std::sync::OnceLock;

use rand::Rng;

use crate::rng;

pub const LEXICON_SIZE: usize = 500;
const CONSONANTS: &[u8] = b"bdfgkmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const SUCCESSORS: usize = 4;
/// Probability that the next word is one of the current word's successors.
const BIGRAM_STICKINESS: f64 = 0.75;
const ZIPF_EXPONENT: f64 = 1.0;

/// Consonant-vowel pseudo-words ranked by frequency, with a cumulative Zipf
/// table and a small fixed successor set per word.
#[derive(Debug)]
pub struct Lexicon {
    words: Vec<String>,
    index: HashSet<String>,
    cumulative: Vec<f64>,
    successors: Vec<[usize; SUCCESSORS]>,
}

impl Lexicon {
    fn build() -> Self {
        let mut rng = rng::stream(0x1e71c0, "lexicon");
        let mut words = Vec::with_capacity(LEXICON_SIZE);
        let mut index = HashSet::new();
        while words.len() < LEXICON_SIZE {
            let syllables = match rng.gen_range(0..20) {
                0..=1 => 1,
                2..=9 => 2,
                10..=16 => 3,
                _ => 4,
            };
            let mut w = String::new();
            for _ in 0..syllables {
                w.push(CONSONANTS[rng.gen_range(0..CONSONANTS.len())] as char);
                w.push(VOWELS[rng.gen_range(0..VOWELS.len())] as char);
            }
            if index.insert(w.clone()) {
                words.push(w);
            }
        }
        let weights: Vec<f64> = (1..=LEXICON_SIZE).map(|r| (r as f64).powf(-ZIPF_EXPONENT)).collect();
        let total: f64 = weights.iter().sum();
        let mut acc = 0.0;
        let cumulative = weights
            .iter()
            .map(|w| {
                acc += w / total;
                acc
            })
            .collect();
        let successors = (0..LEXICON_SIZE)
            .map(|_| std::array::from_fn(|_| rng.gen_range(0..LEXICON_SIZE)))
            .collect();
        Self {
            words,
            index,
            cumulative,
            successors,
        }
    }

    /// The shared lexicon instance.
    pub fn get() -> &'static Lexicon {
        static LEXICON: OnceLock<Lexicon> = OnceLock::new();
        LEXICON.get_or_init(Lexicon::build)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn word(&self, rank: usize) -> &str {
        &self.words[rank]
    }

    pub fn contains(&self, w: &str) -> bool {
        self.index.contains(w)
    }

    /// Zipf-distributed rank in `[0, limit)`.
    pub fn sample_rank<R: Rng>(&self, rng: &mut R, limit: usize) -> usize {
        let limit = limit.clamp(1, LEXICON_SIZE);
        let u: f64 = rng.gen::<f64>() * self.cumulative[limit - 1];
        self.cumulative[..limit].partition_point(|&c| c < u).min(limit - 1)
    }

    /// Next word rank under the bigram model.
    pub fn next_rank<R: Rng>(&self, rng: &mut R, current: usize) -> usize {
        if rng.gen::<f64>() < BIGRAM_STICKINESS {
            self.successors[current][rng.gen_range(0..SUCCESSORS)]
        } else {
            self.sample_rank(rng, LEXICON_SIZE)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lexicon_is_fixed_and_distinct() {
        let lex = Lexicon::get();
        assert_eq!(lex.words().len(), LEXICON_SIZE);
        assert_eq!(lex.index.len(), LEXICON_SIZE);
        assert_eq!(Lexicon::build().words, lex.words);
        assert!(lex.words().iter().all(|w| (2..=8).contains(&w.len())));
    }

    #[test]
    fn zipf_ranks_in_range() {
        let lex = Lexicon::get();
        let mut rng = rng::stream(1, "t");
        let mut counts = [0usize; 2];
        for _ in 0..10_000 {
            let r = lex.sample_rank(&mut rng, LEXICON_SIZE);
            assert!(r < LEXICON_SIZE);
            counts[usize::from(r >= 10)] += 1;
        }
        // The ten most frequent words carry about 43% of the mass.
        assert!(counts[0] > 3500 && counts[0] < 5200, "{counts:?}");
    }
}
