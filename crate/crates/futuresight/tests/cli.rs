mod common;

use std::io::Cursor;
use std::path::Path;

use clap::{CommandFactory, Parser};
use futuresight::cli::{run, Cli};
use futuresight::formats;
use futuresight_core::evaluation::{BlindedItem, HumanEvalReport, KeyItem};
use futuresight_core::generation::Transcript;
use futuresight_core::model::InjectionMode;
use futuresight_core::training::TrainRecord;

fn exec(args: &[&str], stdin: &str) -> String {
    let cli = Cli::try_parse_from(std::iter::once("futuresight").chain(args.iter().copied())).unwrap();
    let mut out = Vec::new();
    run(cli, &mut Cursor::new(stdin.as_bytes().to_vec()), &mut out).unwrap();
    String::from_utf8(out).unwrap()
}

fn exec_err(args: &[&str]) -> futuresight::Error {
    let cli = Cli::try_parse_from(std::iter::once("futuresight").chain(args.iter().copied())).unwrap();
    run(cli, &mut Cursor::new(Vec::new()), &mut Vec::new()).unwrap_err()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_model_config(path: &Path, mode: InjectionMode) {
    formats::write_json(path, &common::tiny_config(0, mode)).unwrap();
}

#[test]
fn end_to_end_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let syn = d.join("syn");
    assert_eq!(exec(&["eval", "synthetic", "--n", "14", "--seed", "3", "--out", p(&syn)], ""), "stories 14\n");

    let dataset = d.join("corpus/data.fsd");
    let out = exec(
        &["corpus", "build", "--input", p(&syn.join("stories.jsonl")), "--out", p(&dataset), "--vocab", "400"],
        "",
    );
    assert!(out.starts_with("stories 14 examples 14 skipped_short 0"), "{out}");
    let examples = formats::read_dataset(&dataset).unwrap();
    assert_eq!(examples.len(), 14);
    assert!(d.join("corpus/tokenizer.json").exists() && d.join("corpus/idf.json").exists());

    for (name, mode) in [("mem", InjectionMode::Memory), ("none", InjectionMode::None)] {
        let cfg = d.join(format!("{name}.json"));
        write_model_config(&cfg, mode);
        let run_dir = d.join(name);
        let out = exec(
            &[
                "train", "--dataset", p(&dataset), "--model-config", p(&cfg), "--out", p(&run_dir), "--epochs", "1", "--accum", "7",
                "--seed", "2", "--warmup", "0", "--decay-steps", "2",
            ],
            "",
        );
        assert!(out.starts_with("steps 2 "), "{out}");
        assert!(run_dir.join("final.ckpt").exists());
        let records: Vec<TrainRecord> = formats::read_jsonl(&run_dir.join("metrics.jsonl")).unwrap();
        assert_eq!(records.iter().map(|r| r.learning_rate).collect::<Vec<_>>(), [3e-4, 1.5e-4]);
    }
    let ckpt = d.join("mem/final.ckpt");
    let baseline = d.join("none/final.ckpt");

    let context = "Ada planned a party. Ada invited many friends.";
    let gen_args = |extra: &[&'static str]| -> Vec<String> {
        let mut v: Vec<String> = ["generate", "--ckpt", p(&ckpt), "--context", context, "--future", "The dragon arrived.", "--distance", "2", "--seed", "5"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        v.extend(extra.iter().map(|s| s.to_string()));
        v
    };
    let a: Vec<String> = gen_args(&["--max-tokens", "12"]);
    let once = exec(&a.iter().map(String::as_str).collect::<Vec<_>>(), "");
    let again = exec(&a.iter().map(String::as_str).collect::<Vec<_>>(), "");
    assert_eq!(once, again);

    let repl = gen_args(&["--interactive", "--max-tokens", "4"]);
    let script = ":gen 12\n:future 1 The nurse arrived.\n\n:future 0\n:bogus\n:show\n:quit\n:gen 3\n";
    let out = exec(&repl.iter().map(String::as_str).collect::<Vec<_>>(), script);
    assert!(out.contains("[future set: 1 The nurse arrived.]"), "{out}");
    assert!(out.contains("usage: :future"), "{out}");
    assert!(out.contains("unknown command"), "{out}");
    let json_start = out.find("{\n").unwrap();
    let transcript: Transcript = serde_json::from_str(&out[json_start..]).unwrap();
    assert_eq!(transcript.futures.len(), 2);
    assert_eq!(transcript.futures[1].token_offset, 12.min(transcript.generated_ids.len()));
    assert!(once.trim_end().len() <= transcript.generated_text.len() || transcript.generated_ids.len() < 12);
    assert!(transcript.generated_text.starts_with(once.trim_end_matches('\n')));

    let s: f64 = exec(
        &["eval", "sensitivity", "--ckpt", p(&ckpt), "--context", context, "--future-a", "The dragon arrived.", "--future-b", "The nurse arrived."],
        "",
    )
    .trim()
    .parse()
    .unwrap();
    assert!((0.0..=1.0).contains(&s));

    let idf = d.join("corpus/idf.json");
    let r = exec(&["eval", "realization", "--idf", p(&idf), "--generated", "Intro. The dragon arrived.", "--future", "The dragon arrived."], "");
    assert_eq!(r.trim(), "1");
    let r = exec(&["eval", "realization", "--idf", p(&idf), "--generated", "x", "--future", "the"], "");
    assert_eq!(r.trim(), "null");

    let (blinded, key) = (d.join("he/blinded.jsonl"), d.join("he/key.jsonl"));
    let out = exec(
        &[
            "eval", "build-humaneval", "--ckpt", p(&ckpt), "--baseline", p(&baseline), "--dataset", p(&dataset), "--n-per-class", "4",
            "--sentences", "1", "--max-new-tokens", "24", "--blinded", p(&blinded), "--key", p(&key),
        ],
        "",
    );
    assert_eq!(out, "items 12\n");
    let blinded_items: Vec<BlindedItem> = formats::read_jsonl(&blinded).unwrap();
    let key_items: Vec<KeyItem> = formats::read_jsonl(&key).unwrap();
    assert_eq!(blinded_items.len(), 12);
    let raw = std::fs::read_to_string(&blinded).unwrap();
    assert!(!raw.contains("class") && !raw.contains("conditioned_on"));

    let answers = d.join("he/self.jsonl");
    let self_answers: Vec<serde_json::Value> =
        key_items.iter().map(|k| serde_json::json!({"item_id": k.item_id, "label": k.class})).collect();
    formats::write_jsonl(&answers, &self_answers).unwrap();
    let report: HumanEvalReport =
        serde_json::from_str(&exec(&["eval", "score-humaneval", "--key", p(&key), "--answers", p(&answers), p(&answers)], "")).unwrap();
    assert_eq!(report.mean.macro_avg.accuracy, 1.0);
    assert_eq!(report.std_dev.macro_avg.accuracy, 0.0);

    assert!(matches!(
        exec_err(&[
            "eval", "build-humaneval", "--ckpt", p(&baseline), "--baseline", p(&ckpt), "--dataset", p(&dataset), "--blinded", p(&blinded),
            "--key", p(&key)
        ]),
        futuresight::Error::Usage(_)
    ));
}

#[test]
fn missing_inputs_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.jsonl");
    assert!(matches!(
        exec_err(&["corpus", "build", "--input", p(&missing), "--out", p(&dir.path().join("d.fsd"))]),
        futuresight::Error::Io { .. }
    ));
    assert!(Cli::try_parse_from(["futuresight", "eval", "score-humaneval", "--key", "k"]).is_err());
}

#[test]
fn command_definition_is_consistent() {
    Cli::command().debug_assert();
}
