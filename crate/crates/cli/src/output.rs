//! Run directories and plain-text report writers.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;

/// Creates `<parent>/<command>-<timestamp>-<seed>`, adding a numeric suffix
/// if that name is taken.
pub fn create_run_dir(parent: &Path, command: &str, seed: u64) -> anyhow::Result<PathBuf> {
    fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S");
    let base = format!("{command}-{stamp}-{seed}");
    let mut candidate = parent.join(&base);
    let mut n = 1;
    loop {
        match fs::create_dir(&candidate) {
            Ok(()) => return Ok(candidate),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                n += 1;
                candidate = parent.join(format!("{base}-{n}"));
            }
            Err(e) => return Err(e).with_context(|| format!("creating {}", candidate.display())),
        }
    }
}

/// Tab-separated table built row by row.
pub struct Tsv {
    body: String,
    width: usize,
}

impl Tsv {
    pub fn new(header: &[&str]) -> Self {
        Self {
            body: header.join("\t") + "\n",
            width: header.len(),
        }
    }

    pub fn row(&mut self, cells: &[&dyn Display]) {
        assert_eq!(cells.len(), self.width, "row width");
        let line: Vec<String> = cells.iter().map(|c| c.to_string()).collect();
        self.body.push_str(&line.join("\t"));
        self.body.push('\n');
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        fs::write(path, &self.body).with_context(|| format!("writing {}", path.display()))
    }
}

pub fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Mean and sample standard deviation.
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
