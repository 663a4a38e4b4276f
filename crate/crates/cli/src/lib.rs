//! `slt` command-line driver. [`run`] parses arguments, executes one stage
//! and maps the outcome to an exit code: 0 on success, 1 for invalid input
//! (flags, configuration, missing files) and 2 for failures at runtime.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use slt_core::adapters::count_parameters;
use slt_core::decoder::FrozenLM;
use slt_core::metrics;
use slt_core::numerics::ParamStore;
use slt_core::pipeline::{
    self, init_from_pretrain, load_pretrain, load_translation, pretrain, pretrain_checkpoint, text_checkpoint,
    train_translation, Checkpoint, Example, ExperimentConfig, Stage, TrainLog, TranslateOptions,
};
use slt_core::pseudo_gloss::{build_vocab, check_threshold, load_corpus, localize};
use slt_core::spatial::feature_file;
use slt_core::synthdata::{self, CORPUS_FILE};
use slt_core::{Error, Result};

pub const FRAME_DIR: &str = "frames";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Parser, Debug)]
#[command(name = "slt", version, about = "Gloss-free sign language translation at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment configuration (TOML); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic train/test splits.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Build the pseudo-gloss vocabulary of a tagged corpus.
    Extract {
        /// A corpus.jsonl file or a directory containing one.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pseudo-gloss pretraining of the sign encoder.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Directory written by `synth`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Translation training, optionally initialised from a pretrain checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Pretrain checkpoint used to initialise the sign encoder.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Freeze the spatial and encoder parameters.
        #[arg(long)]
        frozen_features: bool,
    },
    /// Score a translation checkpoint on a split, or a hypothesis file
    /// against a reference file.
    Evaluate {
        #[arg(long, conflicts_with_all = ["hyp", "reference"])]
        ckpt: Option<PathBuf>,
        #[arg(long, requires = "ckpt")]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, requires = "reference")]
        hyp: Option<PathBuf>,
        #[arg(long = "ref", requires = "hyp")]
        reference: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        beam_width: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export the localisation map and thresholded spans for one input.
    Spot {
        #[arg(long)]
        ckpt: PathBuf,
        /// Feature (or frame) file of the sample.
        #[arg(long)]
        sample: PathBuf,
        #[arg(long, default_value_t = 0.2)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameter accounting for a checkpoint.
    Params {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Runs one command; `args` includes the program name.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let argv: Vec<std::ffi::OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(cli.command, &argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn execute(command: Command, argv: &[String]) -> Result<()> {
    match command {
        Command::Synth { common } => synth(&common, argv),
        Command::Extract { corpus, out } => extract(&corpus, &out, argv),
        Command::Pretrain { common, data, threshold } => run_pretrain(&common, &data, threshold, argv),
        Command::Train { common, data, ckpt, frozen_features } => {
            run_train(&common, &data, ckpt.as_deref(), frozen_features, argv)
        }
        Command::Evaluate { ckpt, data, split, hyp, reference, beam_width, out } => match (ckpt, hyp, reference) {
            (Some(c), None, None) => {
                let data = data.ok_or_else(|| Error::Usage("--ckpt needs --data".into()))?;
                evaluate_checkpoint(&c, &data, &split, beam_width, &out, argv)
            }
            (None, Some(h), Some(r)) => evaluate_files(&h, &r, &out, argv),
            _ => Err(Error::Usage("evaluate needs either --ckpt and --data, or --hyp and --ref".into())),
        },
        Command::Spot { ckpt, sample, threshold, out } => spot(&ckpt, &sample, threshold, &out, argv),
        Command::Params { ckpt, out } => params(&ckpt, &out, argv),
    }
}

// ---- helpers -------------------------------------------------------------------

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.synth.seed = seed;
        for t in [&mut cfg.lm_pretrain, &mut cfg.pretrain, &mut cfg.translate] {
            t.seed = seed;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_manifest(out: &Path, command: &str, argv: &[String], hash: Option<String>, seed: Option<u64>, outputs: &[&str]) -> Result<()> {
    let m = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "config_hash": hash,
        "seed": seed,
        "args": argv.get(1..).unwrap_or_default(),
        "outputs": outputs,
    });
    write_text(&out.join(MANIFEST_FILE), &serde_json::to_string_pretty(&m).expect("manifest serialises"))
}

fn frame_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(FRAME_DIR).join(format!("{id}.s2gf"))
}

/// Loads a split written by `synth`, reading frames instead of features
/// when the configuration has a spatial front-end.
fn load_split(dir: &Path, cfg: &ExperimentConfig) -> Result<Vec<Example>> {
    let ds = synthdata::load(dir)?;
    ds.samples
        .iter()
        .map(|s| {
            let mut e = Example::from_synth(s);
            if cfg.spatial.is_some() {
                e.input = feature_file::load(&frame_path(dir, &s.id))?;
            }
            Ok(e)
        })
        .collect()
}

// ---- commands ------------------------------------------------------------------

fn synth(common: &Common, argv: &[String]) -> Result<()> {
    let cfg = load_config(common)?;
    let splits = synthdata::generate(&cfg.synth)?;
    for (name, ds) in [("train", &splits.train), ("test", &splits.test)] {
        let dir = common.out.join(name);
        ensure_dir(&dir)?;
        synthdata::export(ds, &dir)?;
        if let Some(sp) = &cfg.spatial {
            ensure_dir(&dir.join(FRAME_DIR))?;
            for s in &ds.samples {
                let frames = synthdata::render_frames(s, &splits.inventory, sp.image_size, sp.channels);
                feature_file::save(&frame_path(&dir, &s.id), &frames)?;
            }
        }
    }
    write_text(&common.out.join("config.toml"), &cfg.to_toml())?;
    println!(
        "wrote {} train and {} test samples to {}",
        splits.train.samples.len(),
        splits.test.samples.len(),
        common.out.display()
    );
    write_manifest(&common.out, "synth", argv, Some(cfg.hash()), Some(cfg.synth.seed), &["train", "test", "config.toml"])
}

fn extract(corpus: &Path, out: &Path, argv: &[String]) -> Result<()> {
    let path = if corpus.is_dir() { corpus.join(CORPUS_FILE) } else { corpus.to_path_buf() };
    let vocab = build_vocab(&load_corpus(&path)?)?;
    ensure_dir(out)?;
    write_text(&out.join(pipeline::EXTRA_VOCAB), &vocab.to_text())?;
    println!("{} pseudo-glosses", vocab.len());
    write_manifest(out, "extract", argv, None, None, &[pipeline::EXTRA_VOCAB])
}

fn run_pretrain(common: &Common, data: &Path, threshold: Option<f64>, argv: &[String]) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(t) = threshold {
        check_threshold(t)?;
        cfg.threshold = t;
    }
    let train = load_split(&data.join("train"), &cfg)?;
    let test_dir = data.join("test");
    let test = if test_dir.is_dir() { load_split(&test_dir, &cfg)? } else { Vec::new() };
    let ds = synthdata::load(&data.join("train"))?;
    let corpus: Vec<_> = ds.samples.iter().map(|s| s.sentence.clone()).collect();
    let vocab = build_vocab(&corpus)?;

    ensure_dir(&common.out)?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.pretrain.seed);
    let model = pipeline::PretrainModel::new(&mut store, &cfg, vocab.clone(), &ds.embeddings, &mut rng)?;
    let mut log = TrainLog::to_file(&common.out.join("pretrain_log.jsonl"))?;
    let outcome = pretrain(&mut store, &model, &train, &test, &cfg.pretrain, cfg.threshold, &mut log)?;
    pretrain_checkpoint(&store, Some(&outcome.adam), &cfg, &vocab).save(&common.out.join("pretrain.ckpt"))?;
    write_text(&common.out.join(pipeline::EXTRA_VOCAB), &vocab.to_text())?;
    if let Some(last) = outcome.epochs.last() {
        match last.metric {
            Some(f1) => println!("epoch {}: train loss {:.4}, presence F1 {:.4}", last.epoch, last.train_loss, f1),
            None => println!("epoch {}: train loss {:.4}", last.epoch, last.train_loss),
        }
    }
    write_manifest(
        &common.out,
        "pretrain",
        argv,
        Some(cfg.hash()),
        Some(cfg.pretrain.seed),
        &["pretrain.ckpt", "pretrain_log.jsonl", pipeline::EXTRA_VOCAB],
    )
}

fn run_train(common: &Common, data: &Path, ckpt: Option<&Path>, frozen: bool, argv: &[String]) -> Result<()> {
    let cfg = load_config(common)?;
    let init = ckpt.map(Checkpoint::load).transpose()?;
    if let Some(c) = &init {
        c.require_stage(Stage::Pretrain)?;
    }
    let train = load_split(&data.join("train"), &cfg)?;
    let test_dir = data.join("test");
    let val = if test_dir.is_dir() { load_split(&test_dir, &cfg)? } else { Vec::new() };

    ensure_dir(&common.out)?;
    let sentences: Vec<String> = train.iter().map(|e| e.text.clone()).collect();
    let mut store = ParamStore::new();
    let mut lm_log = TrainLog::to_file(&common.out.join("lm_log.jsonl"))?;
    let (lm, tokenizer): (FrozenLM, _) = pipeline::build_lm(&mut store, &cfg, &sentences, &mut lm_log)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.translate.seed);
    let model = pipeline::TranslationModel::new(&mut store, &cfg, lm, tokenizer, &mut rng)?;
    if let Some(c) = &init {
        init_from_pretrain(&mut store, c)?;
    }
    let opts = TranslateOptions { frozen_features: frozen, ..TranslateOptions::default() };
    let mut log = TrainLog::to_file(&common.out.join("train_log.jsonl"))?;
    let outcome = train_translation(&mut store, &model, &train, &val, &cfg.translate, &opts, &mut log)?;
    text_checkpoint(&store, Some(&outcome.adam), Stage::Translate, &cfg, &model.tokenizer)
        .save(&common.out.join("translate.ckpt"))?;
    model.tokenizer.save(&common.out.join(pipeline::EXTRA_TOKENIZER))?;
    if let Some(last) = outcome.epochs.last() {
        println!("epoch {}: train loss {:.4}, val loss {:?}", last.epoch, last.train_loss, last.eval_loss);
    }
    println!("{}", count_parameters(&store));
    write_manifest(
        &common.out,
        "train",
        argv,
        Some(cfg.hash()),
        Some(cfg.translate.seed),
        &["translate.ckpt", "lm_log.jsonl", "train_log.jsonl", pipeline::EXTRA_TOKENIZER],
    )
}

fn report_and_save(report: &metrics::EvalReport, out: &Path) -> Result<()> {
    println!("{report}");
    write_text(&out.join("report.json"), &serde_json::to_string_pretty(report).expect("report serialises"))
}

fn evaluate_checkpoint(ckpt: &Path, data: &Path, split: &str, width: usize, out: &Path, argv: &[String]) -> Result<()> {
    if width == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    let c = Checkpoint::load(ckpt)?;
    let (cfg, store, model) = load_translation(&c)?;
    let samples = load_split(&data.join(split), &cfg)?;
    let hyps = model.translate_all(&store, &samples, width, cfg.max_len)?;
    let refs: Vec<&str> = samples.iter().map(|e| e.text.as_str()).collect();
    let report = metrics::evaluate(&hyps, &refs)?;
    ensure_dir(out)?;
    let mut listing = String::new();
    for (e, h) in samples.iter().zip(&hyps) {
        listing.push_str(&format!("{}\t{}\n", e.id, h));
    }
    write_text(&out.join("hypotheses.txt"), &listing)?;
    report_and_save(&report, out)?;
    write_manifest(out, "evaluate", argv, Some(c.manifest.config_hash.clone()), None, &["hypotheses.txt", "report.json"])
}

fn evaluate_files(hyp: &Path, reference: &Path, out: &Path, argv: &[String]) -> Result<()> {
    let hyps: Vec<String> = read_text(hyp)?.lines().map(str::to_string).collect();
    let refs: Vec<String> = read_text(reference)?.lines().map(str::to_string).collect();
    let report = metrics::evaluate(&hyps, &refs)?;
    ensure_dir(out)?;
    report_and_save(&report, out)?;
    write_manifest(out, "evaluate", argv, None, None, &["report.json"])
}

fn spot(ckpt: &Path, sample: &Path, threshold: f64, out: &Path, argv: &[String]) -> Result<()> {
    check_threshold(threshold)?;
    let c = Checkpoint::load(ckpt)?;
    let (_, store, model) = load_pretrain(&c)?;
    let input = feature_file::load(sample)?;
    let map = model.localization(&store, &input)?;
    let spans = localize(&map.e, threshold)?;
    ensure_dir(out)?;
    feature_file::save(&out.join("heatmap.s2gf"), &map.e)?;
    write_text(&out.join("spans.txt"), &span_listing(&spans, model.vocab.glosses()))?;
    let found: usize = spans.iter().take(model.vocab.glosses().len()).map(Vec::len).sum();
    println!("{found} spans above {threshold}");
    write_manifest(out, "spot", argv, Some(c.manifest.config_hash.clone()), None, &["heatmap.s2gf", "spans.txt"])
}

/// One `gloss<TAB>start<TAB>end` line per span; the zero prototype is left out.
pub fn span_listing(spans: &[Vec<slt_core::pseudo_gloss::Span>], glosses: &[String]) -> String {
    let mut s = String::from("# gloss\tstart\tend\n");
    for (g, list) in glosses.iter().zip(spans) {
        for sp in list {
            s.push_str(&format!("{g}\t{}\t{}\n", sp.start, sp.end));
        }
    }
    s
}

fn params(ckpt: &Path, out: &Path, argv: &[String]) -> Result<()> {
    let c = Checkpoint::load(ckpt)?;
    let report = count_parameters(&c.to_store());
    ensure_dir(out)?;
    println!("{report}");
    write_text(&out.join("params.txt"), &format!("{report}\n"))?;
    write_text(&out.join("params.json"), &serde_json::to_string_pretty(&report).expect("report serialises"))?;
    write_manifest(out, "params", argv, Some(c.manifest.config_hash.clone()), None, &["params.txt", "params.json"])
}
