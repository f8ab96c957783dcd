//! Line-oriented corpus files: one escaped example per line, with an
//! optional line-aligned sidecar of domain labels.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

pub fn unescape(line: &str) -> Result<String> {
    let mut out = String::with_capacity(line.len());
    let mut chars = line.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some('r') => out.push('\r'),
            other => return Err(Error::Parse(format!("bad escape \\{other:?} in {line:?}"))),
        }
    }
    Ok(out)
}

pub fn write_lines<S: AsRef<str>>(path: impl AsRef<Path>, lines: &[S]) -> Result<()> {
    let mut body = String::new();
    for l in lines {
        body.push_str(&escape(l.as_ref()));
        body.push('\n');
    }
    fs::write(path, body)?;
    Ok(())
}

pub fn read_lines(path: impl AsRef<Path>) -> Result<Vec<String>> {
    fs::read_to_string(path)?.lines().map(unescape).collect()
}

/// Reads a corpus and its label sidecar, checking that they align.
pub fn read_labeled(corpus: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<(Vec<String>, Vec<String>)> {
    let texts = read_lines(corpus)?;
    let labels = read_lines(labels)?;
    if texts.len() != labels.len() {
        return Err(Error::Misaligned(format!(
            "{} examples but {} labels",
            texts.len(),
            labels.len()
        )));
    }
    Ok((texts, labels))
}
