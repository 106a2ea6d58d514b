mod common;

use std::path::{Path, PathBuf};

use futuresight::checkpoint;
use futuresight::formats;
use futuresight::runner::{run_training, step_checkpoint_path, RunConfig, FINAL_CHECKPOINT, METRICS_FILE, TOKENIZER_FILE};
use futuresight::Error;
use futuresight_core::corpus::{build_examples, build_idf_table, default_stopwords, PipelineConfig, Story};
use futuresight_core::evaluation::synthetic_suite;
use futuresight_core::model::InjectionMode;
use futuresight_core::tokenizer::Tokenizer;
use futuresight_core::training::{TrainConfig, TrainRecord};

struct Fixture {
    dir: tempfile::TempDir,
    dataset: PathBuf,
    tokenizer: PathBuf,
    vocab: usize,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let stories: Vec<Story> = synthetic_suite(12, 4).iter().map(|s| s.story().unwrap()).collect();
    let table = build_idf_table(&stories, &default_stopwords()).unwrap();
    let tok = Tokenizer::train(stories.iter().map(|s| s.raw_text.as_str()), 400).unwrap();
    let (examples, _) = build_examples(&stories, &PipelineConfig::default(), &tok, &table).unwrap();
    let dataset = dir.path().join("data.fsd");
    let tokenizer = dir.path().join("tok.json");
    formats::write_dataset(&dataset, &examples).unwrap();
    formats::write_tokenizer(&tokenizer, &tok).unwrap();
    Fixture {
        vocab: tok.vocab_size(),
        dir,
        dataset,
        tokenizer,
    }
}

fn config(f: &Fixture, out: &str) -> RunConfig {
    let mut model = common::tiny_config(f.vocab, InjectionMode::Memory);
    model.max_seq = 128;
    RunConfig {
        dataset: f.dataset.clone(),
        tokenizer: f.tokenizer.clone(),
        out: f.dir.path().join(out),
        model,
        train: TrainConfig {
            epochs: 2,
            accumulation_steps: 4,
            learning_rate: 1e-3,
            warmup_steps: 2,
            ..TrainConfig::default()
        },
        checkpoint_every: 2,
        resume: None,
        max_steps: None,
    }
}

fn metrics(out: &Path) -> Vec<TrainRecord> {
    formats::read_jsonl(&out.join(METRICS_FILE)).unwrap()
}

#[test]
fn run_writes_layout() {
    let f = fixture();
    let cfg = config(&f, "run");
    let summary = run_training(&cfg).unwrap();
    assert!(summary.completed);
    assert_eq!(summary.steps, 6);
    assert_eq!(summary.checkpoint, cfg.out.join(FINAL_CHECKPOINT));
    let records = metrics(&cfg.out);
    assert_eq!(records.iter().map(|r| r.step).collect::<Vec<_>>(), [1, 2, 3, 4, 5, 6]);
    assert!(records.iter().all(|r| r.mean_loss.is_finite() && r.tokens > 0));
    assert_eq!(records.iter().map(|r| r.epoch).collect::<Vec<_>>(), [0, 0, 0, 1, 1, 1]);
    for step in [2, 4, 6] {
        assert!(step_checkpoint_path(&cfg.out, step).exists());
    }
    assert_eq!(
        formats::read_tokenizer(&cfg.out.join(TOKENIZER_FILE)).unwrap(),
        formats::read_tokenizer(&f.tokenizer).unwrap()
    );
    let ck = checkpoint::load(&summary.checkpoint).unwrap();
    assert_eq!(ck.training.unwrap().progress.step, 6);
}

#[test]
fn same_seed_same_result() {
    let f = fixture();
    let a = run_training(&config(&f, "a")).unwrap();
    let b = run_training(&config(&f, "b")).unwrap();
    let (ma, mb) = (metrics(&f.dir.path().join("a")), metrics(&f.dir.path().join("b")));
    assert_eq!(
        ma.iter().map(|r| r.mean_loss).collect::<Vec<_>>(),
        mb.iter().map(|r| r.mean_loss).collect::<Vec<_>>()
    );
    let (ca, cb) = (checkpoint::load(&a.checkpoint).unwrap(), checkpoint::load(&b.checkpoint).unwrap());
    assert_eq!(ca.model.params(), cb.model.params());
}

#[test]
fn resume_matches_uninterrupted_run() {
    let f = fixture();
    let full = run_training(&config(&f, "full")).unwrap();

    let mut first = config(&f, "split");
    first.max_steps = Some(3);
    first.checkpoint_every = 0;
    let part = run_training(&first).unwrap();
    assert!(!part.completed);
    assert_eq!(part.checkpoint, step_checkpoint_path(&first.out, 3));

    let mut second = config(&f, "split");
    second.resume = Some(part.checkpoint.clone());
    let rest = run_training(&second).unwrap();
    assert!(rest.completed);

    let a = checkpoint::load(&full.checkpoint).unwrap();
    let b = checkpoint::load(&rest.checkpoint).unwrap();
    assert_eq!(a.model.params(), b.model.params());
    assert_eq!(a.training, b.training);
    let split = metrics(&second.out);
    let whole = metrics(&f.dir.path().join("full"));
    assert_eq!(
        split.iter().map(|r| (r.step, r.mean_loss.to_bits())).collect::<Vec<_>>(),
        whole.iter().map(|r| (r.step, r.mean_loss.to_bits())).collect::<Vec<_>>()
    );
}

#[test]
fn resume_errors() {
    let f = fixture();
    let mut cfg = config(&f, "bad");
    let corrupt = f.dir.path().join("corrupt.ckpt");
    std::fs::write(&corrupt, b"FSCKPT\0\0garbage-garbage-garbage").unwrap();
    cfg.resume = Some(corrupt);
    assert!(matches!(run_training(&cfg), Err(Error::Checkpoint { .. })));

    let weights_only = f.dir.path().join("weights.ckpt");
    let model = futuresight_core::model::Model::new(cfg.model.clone()).unwrap();
    checkpoint::save(&weights_only, &model, None).unwrap();
    cfg.resume = Some(weights_only.clone());
    assert!(matches!(run_training(&cfg), Err(Error::Checkpoint { message, .. }) if message.contains("optimizer")));

    let mut other = config(&f, "bad2");
    other.model.d_ff = 48;
    other.resume = Some(step_checkpoint_path(&config(&f, "x").out, 2));
    run_training(&config(&f, "x")).unwrap();
    assert!(matches!(run_training(&other), Err(Error::Checkpoint { message, .. }) if message.contains("d_ff")));
}

#[test]
fn dataset_is_not_modified_and_vocab_must_match() {
    let f = fixture();
    let before = std::fs::read(&f.dataset).unwrap();
    run_training(&config(&f, "ro")).unwrap();
    assert_eq!(std::fs::read(&f.dataset).unwrap(), before);

    let mut cfg = config(&f, "vocab");
    cfg.model.vocab_size += 1;
    assert!(matches!(run_training(&cfg), Err(Error::Usage(_))));
}
