use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use cge_cli::commands::to_records;
use cge_cli::{execute, run, RunConfig};
use cge_core::bench::{encode_all, synthesize, CorpusConfig};
use cge_core::corpus::CorpusManifest;
use cge_core::lm::train::perplexity;
use cge_core::lm::{load_checkpoint, Model, ModelConfig, Vocab};
use cge_core::scoring::{auroc, fpr95};

const TINY: &str = r#"
seed = 3

[corpus]
pretrain_examples = 24
finetune_examples = 50

[model]
d_model = 16
n_layers = 1
n_heads = 2
d_ff = 32

[pretrain]
epochs = 1
batch_size = 8

[finetune]
epochs = 1
batch_size = 8

[cge]
n_generate = 3
inner_steps = 1

[cge.decode]
max_len = 16
beam_size = 2

[generate]
n_seeds = 2

[taylor]
n_examples = 4
lambdas = [0.0, 1.0, 0.5, 0.25]

[sweep]
sigmas = [0.0, 0.1]
n_seeds = 1
"#;

struct Pipeline {
    out: PathBuf,
    corpus: PathBuf,
    pt: PathBuf,
    ft: PathBuf,
}

fn config(out: &Path, extra: &[String]) -> RunConfig {
    let mut set = vec![format!("out_dir={:?}", out.display().to_string())];
    set.extend_from_slice(extra);
    RunConfig::parse(TINY, &set).unwrap()
}

fn inputs(p: &Pipeline) -> Vec<String> {
    vec![
        format!("inputs.corpus_dir={:?}", p.corpus.display().to_string()),
        format!("inputs.pt={:?}", p.pt.display().to_string()),
        format!("inputs.ft={:?}", p.ft.display().to_string()),
    ]
}

fn pipeline(out: &Path) -> Pipeline {
    let corpus = execute("synth", &config(out, &[])).unwrap();
    let set = vec![format!("inputs.corpus_dir={:?}", corpus.display().to_string())];
    let pt = execute("pretrain", &config(out, &set)).unwrap().join("pt.ckpt");
    let mut set = set;
    set.push(format!("inputs.pt={:?}", pt.display().to_string()));
    let ft = execute("finetune", &config(out, &set)).unwrap().join("ft.ckpt");
    Pipeline {
        out: out.to_path_buf(),
        corpus,
        pt,
        ft,
    }
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect()
}

fn read_tsv(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split('\t').map(String::from).collect())
        .collect()
}

#[test]
fn every_command_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let p = pipeline(tmp.path());
    for command in [
        "synth",
        "pretrain",
        "finetune",
        "score",
        "generate",
        "eval",
        "taylor-check",
        "sweep",
    ] {
        let cfg = config(&p.out, &inputs(&p));
        let a = execute(command, &cfg).unwrap();
        let b = execute(command, &cfg).unwrap();
        assert_ne!(a, b);
        let fa = files(&a);
        assert!(fa.contains_key("resolved_config.toml"), "{command}");
        assert!(fa.len() > 1, "{command}");
        assert_eq!(fa, files(&b), "{command}");
    }
}

#[test]
fn resolved_config_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = execute("synth", &config(tmp.path(), &[])).unwrap();
    let again = execute(
        "synth",
        &RunConfig::load(&dir.join("resolved_config.toml"), &[]).unwrap(),
    )
    .unwrap();
    assert_eq!(files(&dir), files(&again));
}

#[test]
fn synth_manifest_matches_requested_fractions() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = execute("synth", &config(tmp.path(), &["corpus.finetune_examples=1000".into()])).unwrap();
    let manifest: CorpusManifest = toml::from_str(&fs::read_to_string(dir.join("manifest.toml")).unwrap()).unwrap();
    assert_eq!(manifest.k, 5);
    let counts: Vec<usize> = manifest.domains.iter().map(|d| d.count).collect();
    assert_eq!(counts, vec![900, 20, 20, 20, 20, 20]);
    for d in &manifest.domains {
        assert_eq!(d.fraction, if d.novel { 0.02 } else { 0.9 });
    }
    let labels = fs::read_to_string(dir.join("finetune.labels")).unwrap();
    let corpus = fs::read_to_string(dir.join("finetune.txt")).unwrap();
    assert_eq!(labels.lines().count(), 1000);
    assert_eq!(corpus.lines().count(), 1000);
    assert_eq!(
        fs::read_to_string(dir.join("pretrain.txt")).unwrap().lines().count(),
        24
    );
}

#[test]
fn rare_mode_has_ten_novel_examples() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = execute("synth", &config(tmp.path(), &["synth.rare=true".into()])).unwrap();
    let labels = fs::read_to_string(dir.join("finetune.labels")).unwrap();
    assert_eq!(labels.lines().count(), 100_000);
    assert_eq!(labels.lines().filter(|l| *l != "base").count(), 10);
}

#[test]
fn zero_epoch_finetune_copies_the_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let p = pipeline(tmp.path());
    let mut set = inputs(&p);
    set.push("finetune.epochs=0".into());
    let dir = execute("finetune", &config(&p.out, &set)).unwrap();
    assert_eq!(fs::read(dir.join("ft.ckpt")).unwrap(), fs::read(&p.pt).unwrap());
    set.push("lora.rank=2".into());
    let dir = execute("finetune", &config(&p.out, &set)).unwrap();
    assert_eq!(fs::read(dir.join("ft.ckpt")).unwrap(), fs::read(&p.pt).unwrap());
}

#[test]
fn disabled_dp_matches_plain_finetune() {
    let tmp = tempfile::tempdir().unwrap();
    let p = pipeline(tmp.path());
    let mut set = inputs(&p);
    set.extend([
        "dp.noise_multiplier=0.0".into(),
        "dp.clip_norm=inf".into(),
        "dp.lot_size=8".into(),
    ]);
    let dir = execute("finetune", &config(&p.out, &set)).unwrap();
    assert_eq!(fs::read(dir.join("ft.ckpt")).unwrap(), fs::read(&p.ft).unwrap());
    assert!(dir.join("dp_manifest.toml").exists());
}

#[test]
fn lora_finetune_saves_a_merged_model() {
    let tmp = tempfile::tempdir().unwrap();
    let p = pipeline(tmp.path());
    let mut set = inputs(&p);
    set.push("lora.rank=2".into());
    let dir = execute("finetune", &config(&p.out, &set)).unwrap();
    let ft = load_checkpoint(dir.join("ft.ckpt")).unwrap();
    let pt = load_checkpoint(&p.pt).unwrap();
    assert!(!ft.has_lora());
    assert!(ft.compatible(&pt));
    assert_ne!(ft.params(), pt.params());
}

#[test]
fn score_tables_have_every_method() {
    let tmp = tempfile::tempdir().unwrap();
    let p = pipeline(tmp.path());
    let dir = execute("score", &config(&p.out, &inputs(&p))).unwrap();
    let metrics = read_tsv(&dir.join("metrics.tsv"));
    assert_eq!(metrics.len(), 7);
    let row = metrics.iter().find(|r| r[0] == "contrastive").unwrap();
    let a: f64 = row[1].parse().unwrap();
    assert!((0.0..=1.0).contains(&a));
    assert_eq!(read_tsv(&dir.join("scores.tsv")).len(), 7 * 50);
}

#[test]
fn separated_scores_through_the_label_join() {
    let labels: Vec<String> = ["base", "cipher-shift", "base", "repeat-pattern"]
        .map(String::from)
        .to_vec();
    let scores = [0.1, 5.0, -2.0, 3.0];
    let records = to_records(&scores, &labels);
    assert_eq!(auroc(&records).unwrap(), 1.0);
    assert_eq!(fpr95(&records).unwrap(), 0.0);
}

#[test]
fn misaligned_labels_are_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let p = pipeline(tmp.path());
    let labels = p.corpus.join("finetune.labels");
    let text = fs::read_to_string(&labels).unwrap();
    fs::write(&labels, text.lines().skip(1).collect::<Vec<_>>().join("\n") + "\n").unwrap();
    let err = execute("score", &config(&p.out, &inputs(&p))).unwrap_err();
    assert_eq!(cge_cli::exit_code(&err), 2);
}

#[test]
fn generation_reports_aggregate_every_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let p = pipeline(tmp.path());
    let dir = execute("eval", &config(&p.out, &inputs(&p))).unwrap();
    let summary = read_tsv(&dir.join("summary.tsv"));
    assert_eq!(
        summary.iter().map(|r| r[0].as_str()).collect::<Vec<_>>(),
        ["sampling", "static", "iterative"]
    );
    for row in &summary {
        assert_eq!(row[1], "2");
    }
    for m in ["sampling", "static", "iterative"] {
        let curve = read_tsv(&dir.join(format!("curve-{m}.tsv")));
        assert_eq!(curve.len(), 2 * 3);
        for seed in ["0", "1"] {
            let cov: Vec<f64> = curve
                .iter()
                .filter(|r| r[0] == seed)
                .map(|r| r[6].parse().unwrap())
                .collect();
            assert_eq!(cov.len(), 3);
            assert!(cov.windows(2).all(|w| w[0] <= w[1]));
        }
        let dump = fs::read_to_string(dir.join(format!("generations-{m}.jsonl"))).unwrap();
        assert_eq!(dump.lines().count(), 6);
        for line in dump.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v["text"].is_string());
        }
    }
}

#[test]
fn taylor_rows_at_lambda_zero_have_no_gap() {
    let tmp = tempfile::tempdir().unwrap();
    let p = pipeline(tmp.path());
    let dir = execute("taylor-check", &config(&p.out, &inputs(&p))).unwrap();
    let rows = read_tsv(&dir.join("taylor.tsv"));
    assert_eq!(rows.len(), 4 * 4);
    let mut norms = BTreeMap::new();
    for r in &rows {
        let lambda: f64 = r[1].parse().unwrap();
        if lambda == 0.0 {
            assert_eq!(r[4], "0");
            assert_eq!(r[5], "0");
        }
        norms.insert((r[0].clone(), r[1].clone()), r[6].parse::<f64>().unwrap());
    }
    for ((ex, l), n) in &norms {
        let full = norms[&(ex.clone(), "1".to_string())];
        let lambda: f64 = l.parse().unwrap();
        assert!((n - lambda * full).abs() <= 1e-9 * full.max(1.0));
    }
    assert!(dir.join("taylor_ratios.tsv").exists());
}

#[test]
fn sweep_covers_both_grids() {
    let tmp = tempfile::tempdir().unwrap();
    let p = pipeline(tmp.path());
    let dir = execute("sweep", &config(&p.out, &inputs(&p))).unwrap();
    let rows = read_tsv(&dir.join("sweep.tsv"));
    assert_eq!(rows.iter().filter(|r| r[0] == "decode").count(), 4);
    let sigma: Vec<_> = rows.iter().filter(|r| r[0] == "sigma").collect();
    assert_eq!(sigma.len(), 2 * 2);
}

fn argv(items: &[&str]) -> Vec<String> {
    std::iter::once("cge")
        .chain(items.iter().copied())
        .map(String::from)
        .collect()
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = format!("out_dir={:?}", tmp.path().display().to_string());
    assert_eq!(
        run(argv(&["synth", "--set", &out, "--set", "corpus.pretrain_examples=5"])),
        0
    );
    assert_eq!(run(argv(&["synth", "--set", &out, "--set", "corpus.bogus=1"])), 1);
    assert_eq!(
        run(argv(&["synth", "--set", &out, "--set", "corpus.base_fraction=0.5"])),
        1
    );
    assert_eq!(
        run(argv(&[
            "synth",
            "--set",
            &out,
            "--set",
            "corpus.novel=[\"klingon\"]",
            "--set",
            "corpus.novel_fractions=[0.1]"
        ])),
        1
    );
    assert_eq!(run(argv(&["score", "--set", &out])), 1);
    let missing = format!("inputs.pt={:?}", tmp.path().join("nope.ckpt").display().to_string());
    assert_eq!(run(argv(&["pretrain", "--set", &out, "--set", &missing])), 1);
    let corpus = format!("inputs.corpus_dir={:?}", tmp.path().display().to_string());
    assert_eq!(
        run(argv(&["finetune", "--set", &out, "--set", &missing, "--set", &corpus])),
        2
    );
    assert_eq!(run(argv(&["frobnicate"])), 1);
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "[bogus]\n").unwrap();
    assert_eq!(
        run(argv(&["synth", "--config", cfg.to_str().unwrap(), "--set", &out])),
        1
    );
}

#[test]
fn pretraining_lowers_held_out_perplexity() {
    let corpus = synthesize(&CorpusConfig {
        pretrain_examples: 8000,
        finetune_examples: 400,
        ..CorpusConfig::default()
    })
    .unwrap();
    let vocab = Vocab::standard();
    let held: Vec<String> = corpus
        .finetune
        .iter()
        .filter(|e| e.domain == "base")
        .map(|e| e.text.clone())
        .take(100)
        .collect();
    let held = encode_all(&vocab, &held).unwrap();
    let cfg = config(
        Path::new("unused"),
        &[
            "pretrain.max_steps=2000".into(),
            "pretrain.epochs=1".into(),
            "pretrain.batch_size=4".into(),
        ],
    );
    let texts = corpus.pretrain_texts();
    let init = Model::init(cfg.model, vocab.clone(), 11).unwrap();
    let trained = cge_core::bench::pretrain(cfg.model, vocab, &texts, &cfg.pretrain).unwrap();
    let before = perplexity(&init, &held).unwrap();
    let after = perplexity(&trained, &held).unwrap();
    assert!(after < 0.7 * before, "{before} -> {after}");
    assert_eq!(
        cfg.model,
        ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            ..ModelConfig::default()
        }
    );
}
