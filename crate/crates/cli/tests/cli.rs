use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use slt_core::adapters::count_parameters;
use slt_core::pipeline::{load_pretrain, Checkpoint};
use slt_core::pseudo_gloss::{localize, Span};
use slt_core::spatial::feature_file;

const CONFIG: &str = r#"
[synth]
train_samples = 120
test_samples = 10

[lm_pretrain]
epochs = 2
warmup_epochs = 1.0

[pretrain]
epochs = 3
warmup_epochs = 1.0

[translate]
epochs = 2
warmup_epochs = 1.0
"#;

fn slt(args: &[&str]) -> i32 {
    slt_cli::run(std::iter::once("slt").chain(args.iter().copied()))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// One synth → pretrain → train run shared by the tests below.
fn workdir() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("cli-pipeline");
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        let cfg = dir.join("config.toml");
        fs::write(&cfg, CONFIG).unwrap();
        let (data, pre, tr) = (dir.join("data"), dir.join("pre"), dir.join("tr"));
        assert_eq!(slt(&["synth", "--config", p(&cfg), "--seed", "5", "--out", p(&data)]), 0);
        assert_eq!(slt(&["pretrain", "--config", p(&cfg), "--data", p(&data), "--out", p(&pre)]), 0);
        let ckpt = pre.join("pretrain.ckpt");
        assert_eq!(slt(&["train", "--config", p(&cfg), "--data", p(&data), "--ckpt", p(&ckpt), "--out", p(&tr)]), 0);
        dir
    })
}

fn first_feature_file(dir: &Path) -> PathBuf {
    let mut files: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    files.into_iter().next().unwrap()
}

#[test]
fn exit_codes() {
    let bin = env!("CARGO_BIN_EXE_slt");
    let status = |args: &[&str]| Command::new(bin).args(args).output().unwrap().status.code();
    assert_eq!(status(&["--help"]), Some(0));
    assert_eq!(status(&["synth", "--bogus"]), Some(1));
    assert_eq!(status(&["params", "--ckpt", "/nonexistent/x.ckpt", "--out", "/tmp/never"]), Some(1));

    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.ckpt");
    fs::write(&bad, b"not a checkpoint").unwrap();
    assert_eq!(slt(&["params", "--ckpt", p(&bad), "--out", p(tmp.path())]), 1);
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[pretrain]\nwarmup_epochs = 500.0\n").unwrap();
    assert_eq!(slt(&["synth", "--config", p(&cfg), "--out", p(tmp.path())]), 1);
}

#[test]
fn extract_counts_pseudo_glosses() {
    let dir = workdir();
    let out = dir.join("extract");
    assert_eq!(slt(&["extract", "--corpus", p(&dir.join("data/train")), "--out", p(&out)]), 0);
    let vocab = fs::read_to_string(out.join("gloss_vocab.txt")).unwrap();
    assert_eq!(vocab.lines().filter(|l| !l.trim().is_empty()).count(), 20);
    assert!(out.join("manifest.json").exists());
}

#[test]
fn params_report_matches_checkpoint() {
    let dir = workdir();
    let out = dir.join("params");
    let ckpt = dir.join("tr/translate.ckpt");
    assert_eq!(slt(&["params", "--ckpt", p(&ckpt), "--out", p(&out)]), 0);
    let written: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("params.json")).unwrap()).unwrap();
    let expected = serde_json::to_value(count_parameters(&Checkpoint::load(&ckpt).unwrap().to_store())).unwrap();
    assert_eq!(written, expected);
}

#[test]
fn spot_heatmap_and_spans() {
    let dir = workdir();
    let ckpt = dir.join("pre/pretrain.ckpt");
    let sample = first_feature_file(&dir.join("data/test/features"));
    let out = dir.join("spot");
    assert_eq!(slt(&["spot", "--ckpt", p(&ckpt), "--sample", p(&sample), "--out", p(&out)]), 0);

    let c = Checkpoint::load(&ckpt).unwrap();
    let (_, store, model) = load_pretrain(&c).unwrap();
    let map = model.localization(&store, &feature_file::load(&sample).unwrap()).unwrap();
    let heat = feature_file::load(&out.join("heatmap.s2gf")).unwrap();
    assert_eq!(heat.shape(), map.e.shape());
    assert!(heat.max_abs_diff(&map.e) < 1e-6);
    let spans = localize(&map.e, 0.2).unwrap();
    assert_eq!(fs::read_to_string(out.join("spans.txt")).unwrap(), slt_cli::span_listing(&spans, model.vocab.glosses()));

    assert_eq!(slt(&["spot", "--ckpt", p(&ckpt), "--sample", p(&sample), "--threshold", "1.1", "--out", p(&out)]), 1);
}

#[test]
fn span_listing_of_nothing_is_header_only() {
    let glosses = vec!["regen".to_string(), "wind".to_string()];
    assert_eq!(slt_cli::span_listing(&[vec![], vec![]], &glosses), "# gloss\tstart\tend\n");
    let one = slt_cli::span_listing(&[vec![], vec![Span { start: 2, end: 5 }]], &glosses);
    assert_eq!(one.lines().nth(1), Some("wind\t2\t5"));
}

#[test]
fn evaluate_identity_corpus_scores_100() {
    let tmp = tempfile::tempdir().unwrap();
    let refs = tmp.path().join("refs.txt");
    fs::write(&refs, "der wind kommt aus dem norden\nmorgen regnet es im sueden\n").unwrap();
    let out = tmp.path().join("eval");
    assert_eq!(slt(&["evaluate", "--hyp", p(&refs), "--ref", p(&refs), "--out", p(&out)]), 0);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    for key in ["bleu1", "bleu2", "bleu3", "bleu4", "rouge_l"] {
        assert_eq!(report[key].as_f64(), Some(100.0), "{key}");
    }
}

#[test]
fn evaluate_checkpoint_on_split() {
    let dir = workdir();
    let out = dir.join("eval");
    let ckpt = dir.join("tr/translate.ckpt");
    assert_eq!(slt(&["evaluate", "--ckpt", p(&ckpt), "--data", p(&dir.join("data")), "--beam-width", "2", "--out", p(&out)]), 0);
    let hyps = fs::read_to_string(out.join("hypotheses.txt")).unwrap();
    assert_eq!(hyps.lines().count(), 10);
}

#[test]
fn artifacts_are_reproducible() {
    let dir = workdir();
    let cfg = dir.join("config.toml");
    let again = dir.join("again");
    assert_eq!(slt(&["synth", "--config", p(&cfg), "--seed", "5", "--out", p(&again.join("data"))]), 0);
    for f in ["train/corpus.jsonl", "train/spans.jsonl", "test/embeddings.txt"] {
        assert_eq!(fs::read(dir.join("data").join(f)).unwrap(), fs::read(again.join("data").join(f)).unwrap(), "{f}");
    }
    let pre = again.join("pre");
    assert_eq!(slt(&["pretrain", "--config", p(&cfg), "--data", p(&again.join("data")), "--out", p(&pre)]), 0);
    assert_eq!(fs::read(dir.join("pre/pretrain.ckpt")).unwrap(), fs::read(pre.join("pretrain.ckpt")).unwrap());
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(pre.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "pretrain");
    assert!(manifest["config_hash"].is_string());
}
