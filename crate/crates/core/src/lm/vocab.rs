use std::collections::HashMap;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";

/// Printable alphabet shared by every synthetic domain.
pub const ALPHABET: &str = " abcdefghijklmnopqrstuvwxyz0123456789+=()[]{}_.,;";

/// Character-level vocabulary with reserved begin/end symbols.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<char, TokenId>,
    bos_id: TokenId,
    eos_id: TokenId,
}

impl Vocab {
    /// Builds a vocabulary from an ordered symbol list. Ordinary symbols must
    /// be single characters; `bos` and `eos` must appear in the list.
    pub fn new(tokens: Vec<String>, bos: &str, eos: &str) -> Result<Self> {
        let mut index = HashMap::new();
        let mut bos_id = None;
        let mut eos_id = None;
        for (i, tok) in tokens.iter().enumerate() {
            let id = i as TokenId;
            if tok == bos {
                bos_id = Some(id);
                continue;
            }
            if tok == eos {
                eos_id = Some(id);
                continue;
            }
            let mut chars = tok.chars();
            let c = match (chars.next(), chars.next()) {
                (Some(c), None) => c,
                _ => return Err(Error::InvalidVocab(format!("symbol {tok:?} is not a single character"))),
            };
            if index.insert(c, id).is_some() {
                return Err(Error::InvalidVocab(format!("duplicate symbol {tok:?}")));
            }
        }
        let bos_id = bos_id.ok_or_else(|| Error::InvalidVocab("missing bos".into()))?;
        let eos_id = eos_id.ok_or_else(|| Error::InvalidVocab("missing eos".into()))?;
        if bos_id == eos_id || bos == eos {
            return Err(Error::InvalidVocab("bos and eos must differ".into()));
        }
        Ok(Self {
            tokens,
            index,
            bos_id,
            eos_id,
        })
    }

    /// The project vocabulary: bos, eos, then [`ALPHABET`].
    pub fn standard() -> Self {
        Self::from_alphabet(ALPHABET)
    }

    pub fn from_alphabet(alphabet: &str) -> Self {
        let mut tokens = vec![BOS.to_string(), EOS.to_string()];
        tokens.extend(alphabet.chars().map(String::from));
        Self::new(tokens, BOS, EOS).expect("alphabet must not repeat symbols")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn bos_id(&self) -> TokenId {
        self.bos_id
    }

    pub fn eos_id(&self) -> TokenId {
        self.eos_id
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn symbol(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id_of(&self, c: char) -> Option<TokenId> {
        self.index.get(&c).copied()
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id == self.bos_id || id == self.eos_id
    }

    /// Character-level tokenization. The bos token is never stored; it is
    /// prepended when a sequence is scored or generated.
    pub fn tokenize(&self, text: &str) -> Result<TokenSeq> {
        if text.is_empty() {
            return Err(Error::EmptyInput);
        }
        let ids = text
            .chars()
            .enumerate()
            .map(|(position, symbol)| self.id_of(symbol).ok_or(Error::UnknownSymbol { symbol, position }))
            .collect::<Result<Vec<_>>>()?;
        Ok(TokenSeq(ids))
    }

    /// Tokenizes `text` and appends the eos token.
    pub fn encode_example(&self, text: &str) -> Result<TokenSeq> {
        let mut seq = self.tokenize(text)?;
        seq.0.push(self.eos_id);
        Ok(seq)
    }

    /// Inverse of [`Vocab::tokenize`]; special tokens are dropped.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter(|&&id| !self.is_special(id))
            .filter_map(|&id| self.symbol(id))
            .collect()
    }

    pub fn validate(&self, ids: &[TokenId]) -> Result<()> {
        match ids.iter().find(|&&id| id as usize >= self.len()) {
            Some(&id) => Err(Error::InvalidToken(id)),
            None => Ok(()),
        }
    }
}

/// A non-empty sequence of token ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSeq(Vec<TokenId>);

impl TokenSeq {
    pub fn new(ids: Vec<TokenId>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::EmptyInput);
        }
        Ok(Self(ids))
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_ids(self) -> Vec<TokenId> {
        self.0
    }
}

impl AsRef<[TokenId]> for TokenSeq {
    fn as_ref(&self) -> &[TokenId] {
        &self.0
    }
}
