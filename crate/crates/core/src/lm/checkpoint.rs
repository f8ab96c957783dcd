//! Binary checkpoint format (all integers u32 little-endian):
//!
//! ```text
//! magic "CGELM\0" | version | vocab_size context_len d_model n_layers n_heads d_ff
//! | n_tokens (len bytes)* bos_id eos_id
//! | n_arrays (name_len name ndim dims* f64-le data)*
//! ```

use std::fs;
use std::path::Path;

use super::model::{Model, ModelConfig};
use super::tensor::{ParamSet, Tensor};
use super::vocab::Vocab;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"CGELM\0";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, x: usize) {
    out.extend_from_slice(&(x as u32).to_le_bytes());
}

pub fn encode_checkpoint(model: &Model) -> Result<Vec<u8>> {
    if model.has_lora() {
        return Err(Error::InvalidConfig("merge LoRA adapters before saving".into()));
    }
    let cfg = model.config();
    let mut out = Vec::with_capacity(16 + model.params().numel() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for x in [
        cfg.vocab_size,
        cfg.context_len,
        cfg.d_model,
        cfg.n_layers,
        cfg.n_heads,
        cfg.d_ff,
    ] {
        put_u32(&mut out, x);
    }
    let vocab = model.vocab();
    put_u32(&mut out, vocab.len());
    for tok in vocab.tokens() {
        put_u32(&mut out, tok.len());
        out.extend_from_slice(tok.as_bytes());
    }
    put_u32(&mut out, vocab.bos_id() as usize);
    put_u32(&mut out, vocab.eos_id() as usize);
    put_u32(&mut out, model.params().len());
    for (name, t) in model.params().iter() {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len());
        for &d in t.shape() {
            put_u32(&mut out, d);
        }
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(Error::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        self.u32().map(|x| x as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.usize()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::MalformedCheckpoint("non-utf8 string".into()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::NotACheckpoint);
    }
    let mut r = Reader {
        buf: bytes,
        pos: MAGIC.len(),
    };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let config = ModelConfig {
        vocab_size: r.usize()?,
        context_len: r.usize()?,
        d_model: r.usize()?,
        n_layers: r.usize()?,
        n_heads: r.usize()?,
        d_ff: r.usize()?,
    };
    let n_tokens = r.usize()?;
    if n_tokens > bytes.len() {
        return Err(Error::Truncated);
    }
    let tokens = (0..n_tokens).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
    let bos = r.usize()?;
    let eos = r.usize()?;
    let (bos_sym, eos_sym) = match (tokens.get(bos), tokens.get(eos)) {
        (Some(b), Some(e)) => (b.clone(), e.clone()),
        _ => return Err(Error::MalformedCheckpoint("special token ids out of range".into())),
    };
    let vocab = Vocab::new(tokens, &bos_sym, &eos_sym).map_err(|e| Error::MalformedCheckpoint(e.to_string()))?;
    let n_arrays = r.usize()?;
    let mut params = ParamSet::new();
    for _ in 0..n_arrays {
        let name = r.string()?;
        let ndim = r.usize()?;
        let dims = (0..ndim).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or(Error::Truncated)?;
        let raw = r.take(n.checked_mul(8).ok_or(Error::Truncated)?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.push(name, Tensor::from_vec(&dims, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::MalformedCheckpoint("trailing bytes".into()));
    }
    Model::from_params(config, vocab, params)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    decode_checkpoint(&fs::read(path)?)
}
