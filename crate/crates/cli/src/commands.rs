//! One function per subcommand. Each reads its inputs, writes into the run
//! directory and returns nothing else.

use std::path::Path;

use anyhow::{anyhow, Context};
use cge_core::bench::{encode_all, synthesize, CorpusConfig};
use cge_core::cge::{generate, sample_ft_generate, CgeConfig, GenerationReport};
use cge_core::corpus::io::{read_labeled, read_lines, write_lines};
use cge_core::corpus::{CorpusManifest, RuleOracle};
use cge_core::decoding::{DecodeConfig, Strategy};
use cge_core::dp::{dp_finetune, DpConfig};
use cge_core::lm::train::{epoch_order, finetune_logged, TrainLog};
use cge_core::lm::{load_checkpoint, lora_attach, lora_merge, save_checkpoint, Model, TokenSeq, Vocab};
use cge_core::scoring::{auroc, fpr95, interpolate, score_all, taylor_check, ScoreRecord, TaylorReport};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{GenMethod, RunConfig};
use crate::output::{mean_sd, write_text, Tsv};
use crate::ValidationError;

const PRETRAIN_FILE: &str = "pretrain.txt";
const FINETUNE_FILE: &str = "finetune.txt";
const LABELS_FILE: &str = "finetune.labels";
const MANIFEST_FILE: &str = "manifest.toml";

fn load_model(path: &Path) -> anyhow::Result<Model> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn finetune_corpus(cfg: &RunConfig, vocab: &Vocab) -> anyhow::Result<(Vec<TokenSeq>, Vec<String>)> {
    let dir = cfg.corpus_dir()?;
    let (texts, labels) = read_labeled(dir.join(FINETUNE_FILE), dir.join(LABELS_FILE))
        .with_context(|| format!("reading corpus in {}", dir.display()))?;
    Ok((encode_all(vocab, &texts)?, labels))
}

fn novel_domain_count(cfg: &RunConfig) -> anyhow::Result<usize> {
    if let Some(k) = cfg.generate.k {
        return Ok(k);
    }
    if let Some(dir) = &cfg.inputs.corpus_dir {
        let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))
            .with_context(|| format!("reading manifest in {}", dir.display()))?;
        let manifest: CorpusManifest = toml::from_str(&text)?;
        return Ok(manifest.k);
    }
    Ok(cfg.corpus.novel.len())
}

fn write_train_log(log: &TrainLog, path: &Path) -> anyhow::Result<()> {
    let mut t = Tsv::new(&["step", "loss"]);
    for (i, l) in log.losses.iter().enumerate() {
        t.row(&[&(i + 1), l]);
    }
    t.write(path)
}

pub fn synth(cfg: &RunConfig, dir: &Path) -> anyhow::Result<()> {
    let corpus_cfg = if cfg.synth.rare {
        CorpusConfig {
            seed: cfg.corpus.seed,
            ..CorpusConfig::rare()
        }
    } else {
        cfg.corpus.clone()
    };
    let corpus = synthesize(&corpus_cfg)?;
    write_lines(dir.join(PRETRAIN_FILE), &corpus.pretrain_texts())?;
    write_lines(dir.join(FINETUNE_FILE), &corpus.finetune_texts())?;
    let labels: Vec<&str> = corpus.finetune.iter().map(|e| e.domain.as_str()).collect();
    write_lines(dir.join(LABELS_FILE), &labels)?;
    write_text(&dir.join(MANIFEST_FILE), &toml::to_string(&corpus.manifest)?)
}

pub fn cmd_pretrain(cfg: &RunConfig, dir: &Path) -> anyhow::Result<()> {
    let corpus_dir = cfg.corpus_dir()?;
    let texts = read_lines(corpus_dir.join(PRETRAIN_FILE))
        .with_context(|| format!("reading {}", corpus_dir.join(PRETRAIN_FILE).display()))?;
    let vocab = Vocab::standard();
    if cfg.model.vocab_size != vocab.len() {
        return Err(anyhow!(ValidationError(format!(
            "model.vocab_size must be {}",
            vocab.len()
        ))));
    }
    let seqs = encode_all(&vocab, &texts)?;
    let init = Model::init(cfg.model, vocab, cge_core::rng::derive_seed(cfg.pretrain.seed, "init"))?;
    let (model, log) = finetune_logged(&init, &seqs, &cfg.pretrain)?;
    save_checkpoint(&model, dir.join("pt.ckpt"))?;
    write_train_log(&log, &dir.join("train_log.tsv"))
}

#[derive(Serialize)]
struct FinetuneSummary {
    steps: usize,
    examples: usize,
    lora: bool,
    dp: bool,
}

pub fn cmd_finetune(cfg: &RunConfig, dir: &Path) -> anyhow::Result<()> {
    let pt = load_model(cfg.pt_path()?)?;
    let (seqs, _) = finetune_corpus(cfg, pt.vocab())?;
    let (model, log) = match &cfg.dp {
        Some(dp) => {
            let (m, manifest, log) = dp_finetune(&pt, &seqs, dp, &cfg.finetune, cfg.lora.as_ref())?;
            write_text(&dir.join("dp_manifest.toml"), &toml::to_string(&manifest)?)?;
            (m, log)
        }
        None => {
            let start = match &cfg.lora {
                Some(l) => lora_attach(&pt, l)?,
                None => pt.clone(),
            };
            finetune_logged(&start, &seqs, &cfg.finetune)?
        }
    };
    let model = if model.has_lora() { lora_merge(&model)? } else { model };
    save_checkpoint(&model, dir.join("ft.ckpt"))?;
    write_train_log(&log, &dir.join("train_log.tsv"))?;
    let summary = FinetuneSummary {
        steps: log.losses.len(),
        examples: seqs.len(),
        lora: cfg.lora.is_some(),
        dp: cfg.dp.is_some(),
    };
    write_text(&dir.join("summary.toml"), &toml::to_string(&summary)?)
}

pub fn cmd_score(cfg: &RunConfig, dir: &Path) -> anyhow::Result<()> {
    let pt = load_model(cfg.pt_path()?)?;
    let ft = load_model(cfg.ft_path()?)?;
    let (seqs, labels) = finetune_corpus(cfg, pt.vocab())?;
    let mut scores = Tsv::new(&["index", "method", "score", "label"]);
    let mut metrics = Tsv::new(&["method", "auroc", "fpr95"]);
    for &method in &cfg.score.methods {
        let values = score_all(method, &pt, &ft, &seqs, cfg.score.reduction)?;
        let records = to_records(&values, &labels);
        for (r, label) in records.iter().zip(&labels) {
            scores.row(&[&r.index, &method, &r.score, label]);
        }
        metrics.row(&[&method, &auroc(&records)?, &fpr95(&records)?]);
    }
    scores.write(&dir.join("scores.tsv"))?;
    metrics.write(&dir.join("metrics.tsv"))
}

/// Joins scores with sidecar labels; anything but `base` is novel.
pub fn to_records(scores: &[f64], labels: &[String]) -> Vec<ScoreRecord> {
    scores
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(index, (&score, label))| ScoreRecord {
            index,
            score,
            novel: label != "base",
        })
        .collect()
}

#[derive(Serialize)]
struct DumpRecord<'a> {
    replicate: usize,
    iteration: usize,
    text: &'a str,
    label: &'a str,
    score: f64,
    admissible_sizes: &'a [usize],
    seed: u64,
    contrastive_before: f64,
    contrastive_after: Option<f64>,
}

fn run_method(
    pt: &Model,
    ft: &Model,
    cge: &CgeConfig,
    method: GenMethod,
    k: usize,
) -> cge_core::Result<GenerationReport> {
    let oracle = RuleOracle::default();
    match method {
        GenMethod::Sampling => sample_ft_generate(pt, ft, cge, &oracle, k),
        GenMethod::Static => generate(
            pt,
            ft,
            &CgeConfig {
                iterative: false,
                ..cge.clone()
            },
            &oracle,
            k,
        ),
        GenMethod::Iterative => generate(
            pt,
            ft,
            &CgeConfig {
                iterative: true,
                ..cge.clone()
            },
            &oracle,
            k,
        ),
    }
}

/// Runs `method` for every replicate seed, in parallel.
fn replicates(
    cfg: &RunConfig,
    pt: &Model,
    ft: &Model,
    cge: &CgeConfig,
    method: GenMethod,
    n: usize,
    k: usize,
) -> anyhow::Result<Vec<GenerationReport>> {
    (0..n)
        .into_par_iter()
        .map(|i| run_method(pt, ft, &cfg.replicate(cge, i), method, k).map_err(anyhow::Error::from))
        .collect()
}

fn write_generations(
    dir: &Path,
    method: GenMethod,
    reports: &[GenerationReport],
    summary: &mut Tsv,
) -> anyhow::Result<()> {
    let mut dump = String::new();
    let mut curve = Tsv::new(&[
        "replicate",
        "iteration",
        "text",
        "label",
        "score",
        "detection",
        "coverage",
    ]);
    for (r, report) in reports.iter().enumerate() {
        for e in &report.examples {
            let rec = DumpRecord {
                replicate: r,
                iteration: e.iteration,
                text: &e.text,
                label: e.label.as_str(),
                score: e.generation.score,
                admissible_sizes: &e.generation.admissible_sizes,
                seed: e.generation.seed,
                contrastive_before: e.score_before,
                contrastive_after: e.score_after,
            };
            dump.push_str(&serde_json::to_string(&rec)?);
            dump.push('\n');
            curve.row(&[
                &r,
                &e.iteration,
                &e.text,
                &e.label.as_str(),
                &e.generation.score,
                &e.detection_so_far,
                &e.coverage_so_far,
            ]);
        }
    }
    write_text(&dir.join(format!("generations-{}.jsonl", method.name())), &dump)?;
    curve.write(&dir.join(format!("curve-{}.tsv", method.name())))?;
    let det: Vec<f64> = reports.iter().map(|r| r.detection_rate).collect();
    let cov: Vec<f64> = reports.iter().map(|r| r.coverage_rate).collect();
    let (dm, ds) = mean_sd(&det);
    let (cm, cs) = mean_sd(&cov);
    summary.row(&[&method.name(), &reports.len(), &dm, &ds, &cm, &cs]);
    Ok(())
}

fn summary_table() -> Tsv {
    Tsv::new(&[
        "method",
        "n_seeds",
        "detection_mean",
        "detection_sd",
        "coverage_mean",
        "coverage_sd",
    ])
}

pub fn cmd_generate(cfg: &RunConfig, dir: &Path, methods: &[GenMethod]) -> anyhow::Result<()> {
    let pt = load_model(cfg.pt_path()?)?;
    let ft = load_model(cfg.ft_path()?)?;
    let k = novel_domain_count(cfg)?;
    let mut summary = summary_table();
    for &m in methods {
        let reports = replicates(cfg, &pt, &ft, &cfg.cge, m, cfg.generate.n_seeds, k)?;
        write_generations(dir, m, &reports, &mut summary)?;
    }
    summary.write(&dir.join("summary.tsv"))
}

pub fn cmd_taylor(cfg: &RunConfig, dir: &Path) -> anyhow::Result<()> {
    let pt = load_model(cfg.pt_path()?)?;
    let ft = load_model(cfg.ft_path()?)?;
    let (seqs, _) = finetune_corpus(cfg, pt.vocab())?;
    let order = epoch_order(seqs.len(), cge_core::rng::derive_seed(cfg.seed, "taylor-examples"), 0);
    let mut picked: Vec<usize> = order.into_iter().take(cfg.taylor.n_examples).collect();
    picked.sort_unstable();

    let lambdas = &cfg.taylor.lambdas;
    let models = lambdas
        .iter()
        .map(|&l| interpolate(&pt, &ft, l))
        .collect::<cge_core::Result<Vec<_>>>()?;
    let rows: Vec<Vec<TaylorReport>> = picked
        .par_iter()
        .map(|&i| {
            models
                .iter()
                .map(|m| taylor_check(&pt, m, &seqs[i]))
                .collect::<cge_core::Result<Vec<_>>>()
        })
        .collect::<cge_core::Result<_>>()?;

    let mut t = Tsv::new(&[
        "example",
        "lambda",
        "s_exact",
        "s_linear",
        "abs_gap",
        "rel_gap",
        "delta_norm",
    ]);
    for (&i, reports) in picked.iter().zip(&rows) {
        for (l, r) in lambdas.iter().zip(reports) {
            t.row(&[&i, l, &r.s_exact, &r.s_linear, &r.abs_gap, &r.rel_gap, &r.delta_norm]);
        }
    }
    t.write(&dir.join("taylor.tsv"))?;

    let mut ratios = Tsv::new(&["lambda", "half", "median_ratio", "n"]);
    for (a, &la) in lambdas.iter().enumerate() {
        let Some(b) = lambdas.iter().position(|&lb| la > 0.0 && (lb - la / 2.0).abs() < 1e-12) else {
            continue;
        };
        let mut r: Vec<f64> = rows
            .iter()
            .filter(|rep| rep[b].abs_gap > 0.0)
            .map(|rep| rep[a].abs_gap / rep[b].abs_gap)
            .collect();
        if r.is_empty() {
            continue;
        }
        r.sort_by(f64::total_cmp);
        ratios.row(&[&la, &lambdas[b], &median(&r), &r.len()]);
    }
    ratios.write(&dir.join("taylor_ratios.tsv"))
}

/// Median of a sorted slice.
pub fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

pub fn cmd_sweep(cfg: &RunConfig, dir: &Path) -> anyhow::Result<()> {
    let pt = load_model(cfg.pt_path()?)?;
    let k = novel_domain_count(cfg)?;
    let n = cfg.sweep.n_seeds;
    let mut cells = Tsv::new(&[
        "grid",
        "alpha",
        "strategy",
        "sigma",
        "clip_norm",
        "method",
        "replicate",
        "detection",
        "coverage",
    ]);
    let mut summary = Tsv::new(&[
        "grid",
        "alpha",
        "strategy",
        "sigma",
        "clip_norm",
        "method",
        "detection_mean",
        "coverage_mean",
    ]);
    let mut emit =
        |grid: &str, decode: &DecodeConfig, dp: Option<&DpConfig>, method: GenMethod, reports: &[GenerationReport]| {
            let strategy = strategy_name(decode.strategy);
            let (sigma, clip) = match dp {
                Some(dp) => (dp.noise_multiplier.to_string(), dp.clip_norm.to_string()),
                None => ("-".to_string(), "-".to_string()),
            };
            for (i, r) in reports.iter().enumerate() {
                cells.row(&[
                    &grid,
                    &decode.alpha,
                    &strategy,
                    &sigma,
                    &clip,
                    &method.name(),
                    &i,
                    &r.detection_rate,
                    &r.coverage_rate,
                ]);
            }
            let det: Vec<f64> = reports.iter().map(|r| r.detection_rate).collect();
            let cov: Vec<f64> = reports.iter().map(|r| r.coverage_rate).collect();
            summary.row(&[
                &grid,
                &decode.alpha,
                &strategy,
                &sigma,
                &clip,
                &method.name(),
                &mean_sd(&det).0,
                &mean_sd(&cov).0,
            ]);
        };

    if !cfg.sweep.alphas.is_empty() && !cfg.sweep.strategies.is_empty() {
        let ft = load_model(cfg.ft_path()?)?;
        for &alpha in &cfg.sweep.alphas {
            for &strategy in &cfg.sweep.strategies {
                let decode = DecodeConfig {
                    alpha,
                    strategy,
                    ..cfg.cge.decode
                };
                let cge = CgeConfig {
                    decode,
                    ..cfg.cge.clone()
                };
                let reports = replicates(cfg, &pt, &ft, &cge, GenMethod::Static, n, k)?;
                emit("decode", &decode, None, GenMethod::Static, &reports);
            }
        }
    }

    if !cfg.sweep.sigmas.is_empty() {
        let (seqs, _) = finetune_corpus(cfg, pt.vocab())?;
        let base_dp = cfg.dp.unwrap_or_else(|| DpConfig {
            seed: cge_core::rng::derive_seed(cfg.seed, "dp"),
            ..DpConfig::default()
        });
        for &clip_norm in &cfg.sweep.clip_norms {
            for &sigma in &cfg.sweep.sigmas {
                let dp = DpConfig {
                    noise_multiplier: sigma,
                    clip_norm,
                    ..base_dp
                };
                let (ft, _, _) = dp_finetune(&pt, &seqs, &dp, &cfg.finetune, cfg.lora.as_ref())?;
                let ft = if ft.has_lora() { lora_merge(&ft)? } else { ft };
                for method in [GenMethod::Sampling, GenMethod::Static] {
                    let reports = replicates(cfg, &pt, &ft, &cfg.cge, method, n, k)?;
                    emit("sigma", &cfg.cge.decode, Some(&dp), method, &reports);
                }
            }
        }
    }
    cells.write(&dir.join("sweep.tsv"))?;
    summary.write(&dir.join("sweep_summary.tsv"))
}

fn strategy_name(s: Strategy) -> &'static str {
    match s {
        Strategy::Ancestral => "ancestral",
        Strategy::Beam => "beam",
    }
}
