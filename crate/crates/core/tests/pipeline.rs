use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use slt_core::numerics::ParamStore;
use slt_core::pipeline::{
    build_lm, init_from_pretrain, load_pretrain, load_translation, pretrain, pretrain_checkpoint, text_checkpoint,
    train_translation, Checkpoint, Example, ExperimentConfig, PretrainModel, Stage, TrainLog, TranslateOptions,
    TranslationModel,
};
use slt_core::pseudo_gloss::build_vocab;
use slt_core::synthdata::{self, SynthSplits};

fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.synth.train_samples = 120;
    cfg.synth.test_samples = 24;
    cfg.pretrain.epochs = 6;
    cfg.pretrain.warmup_epochs = 1.0;
    cfg.translate.epochs = 3;
    cfg.translate.warmup_epochs = 1.0;
    cfg.lm_pretrain.epochs = 2;
    cfg.lm_pretrain.warmup_epochs = 1.0;
    cfg
}

fn data(cfg: &ExperimentConfig) -> (SynthSplits, Vec<Example>, Vec<Example>) {
    let splits = synthdata::generate(&cfg.synth).unwrap();
    let train = splits.train.samples.iter().map(Example::from_synth).collect();
    let test = splits.test.samples.iter().map(Example::from_synth).collect();
    (splits, train, test)
}

struct Pretrained {
    store: ParamStore,
    model: PretrainModel,
    log: TrainLog,
    ckpt: Checkpoint,
}

fn run_pretrain(cfg: &ExperimentConfig) -> Pretrained {
    let (splits, train, test) = data(cfg);
    let corpus: Vec<_> = splits.train.samples.iter().map(|s| s.sentence.clone()).collect();
    let vocab = build_vocab(&corpus).unwrap();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.pretrain.seed);
    let model = PretrainModel::new(&mut store, cfg, vocab.clone(), &splits.train.embeddings, &mut rng).unwrap();
    let mut log = TrainLog::new();
    let out = pretrain(&mut store, &model, &train, &test, &cfg.pretrain, cfg.threshold, &mut log).unwrap();
    assert!(out.max_clipped_norm <= cfg.pretrain.clip_norm + 1e-9);
    let ckpt = pretrain_checkpoint(&store, Some(&out.adam), cfg, &vocab);
    Pretrained { store, model, log, ckpt }
}

fn bits(store: &ParamStore, prefix: &str) -> Vec<u64> {
    store
        .iter()
        .filter(|(_, p)| p.name.starts_with(prefix) && !p.name.contains(".lora_"))
        .flat_map(|(_, p)| p.value.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>())
        .collect()
}

#[test]
fn pretraining_loss_decreases_and_checkpoint_preserves_f1() {
    let cfg = small_config();
    let run = run_pretrain(&cfg);
    let losses: Vec<f64> = run.log.split("train").map(|r| r.loss).collect();
    assert_eq!(losses.len(), cfg.pretrain.epochs);
    assert!(losses[..5].windows(2).all(|w| w[1] < w[0]), "{losses:?}");

    let (_, _, test) = data(&cfg);
    let (_, f1) = run.model.evaluate(&run.store, &test, cfg.threshold).unwrap();
    let bytes = run.ckpt.encode();
    let decoded = Checkpoint::decode(&bytes).unwrap();
    assert_eq!(decoded.manifest.stage, Stage::Pretrain);
    let (cfg2, store2, model2) = load_pretrain(&decoded).unwrap();
    assert_eq!(cfg2.hash(), cfg.hash());
    let (_, f1_back) = model2.evaluate(&store2, &test, cfg.threshold).unwrap();
    assert_eq!(f1, f1_back);
    assert_eq!(decoded.encode(), bytes);
}

#[test]
fn pretraining_is_deterministic() {
    let cfg = ExperimentConfig { pretrain: slt_core::pipeline::TrainConfig { epochs: 2, ..small_config().pretrain }, ..small_config() };
    let a = run_pretrain(&cfg);
    let b = run_pretrain(&cfg);
    assert_eq!(a.ckpt.encode(), b.ckpt.encode());
}

#[test]
fn frozen_features_leave_encoder_and_lm_untouched() {
    let cfg = small_config();
    let run = run_pretrain(&cfg);
    let (_, train, test) = data(&cfg);
    let sentences: Vec<String> = train.iter().map(|e| e.text.clone()).collect();
    let mut store = ParamStore::new();
    let (lm, tok) = build_lm(&mut store, &cfg, &sentences, &mut TrainLog::new()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = TranslationModel::new(&mut store, &cfg, lm, tok, &mut rng).unwrap();
    assert!(init_from_pretrain(&mut store, &run.ckpt).unwrap() > 0);
    let (enc_before, lm_before) = (bits(&store, "encoder."), bits(&store, "decoder.lm."));
    let adapt_before = bits(&store, "decoder.adapt.");

    let opts = TranslateOptions { frozen_features: true, ..TranslateOptions::default() };
    let mut log = TrainLog::new();
    let out = train_translation(&mut store, &model, &train, &test, &cfg.translate, &opts, &mut log).unwrap();
    assert!(out.max_clipped_norm <= cfg.translate.clip_norm + 1e-9);
    assert_eq!(bits(&store, "encoder."), enc_before);
    assert_eq!(bits(&store, "decoder.lm."), lm_before);
    assert_ne!(bits(&store, "decoder.adapt."), adapt_before);
    assert_eq!(log.split("val").count(), cfg.translate.epochs);

    // Round trip through the translation checkpoint.
    let ckpt = text_checkpoint(&store, Some(&out.adam), Stage::Translate, &cfg, &model.tokenizer);
    let (_, store2, model2) = load_translation(&Checkpoint::decode(&ckpt.encode()).unwrap()).unwrap();
    let a = model.translate_all(&store, &test[..4], 2, 8).unwrap();
    let b = model2.translate_all(&store2, &test[..4], 2, 8).unwrap();
    assert_eq!(a, b);
    assert_eq!(model.loss(&store, &test, 0.0).unwrap(), model2.loss(&store2, &test, 0.0).unwrap());
}
