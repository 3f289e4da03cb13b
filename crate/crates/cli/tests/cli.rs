use std::collections::BTreeSet;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

use infill_core::examples::{read_dataset, Strategy};
use infill_core::pipeline::{Artifacts, Split};
use infill_core::tokenizer::Vocab;

const TINY: &str = r#"
version = 1
name = "tiny"
seed = 3

[corpus]
kind = "synthetic"
n_docs = 30

[vocab]
target_size = 1000

[examples]
masks_per_doc = 2

[model]
n_layers = 1
n_heads = 2
d_model = 16
d_ff = 32
max_seq_len = 256

[train]
batch_size = 4
max_steps = 4
warmup_steps = 1
eval_every = 2
"#;

fn infill(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_infill"))
        .arg("--config")
        .arg(dir.join("run.toml"))
        .arg("--out-dir")
        .arg(dir.join("out"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn error_line(out: &Output) -> Value {
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let last = stderr.lines().last().expect("an error line");
    serde_json::from_str(last).unwrap_or_else(|e| panic!("{e}: {last}"))
}

fn setup(config: &str) -> TempDir {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("run.toml"), config).unwrap();
    dir
}

#[test]
fn stages_run_in_order() {
    let dir = setup(TINY);
    let d = dir.path();
    let out = Artifacts::new(d.join("out"));

    let missing = error_line(&infill(d, &["train-vocab"]));
    assert_eq!(missing["error"], "missing_artifact");
    assert!(missing["path"].as_str().unwrap().ends_with("train.jsonl"));

    let summary: Value = serde_json::from_str(&ok(&infill(d, &["ingest"]))).unwrap();
    assert_eq!(summary["documents"]["train"].as_u64().unwrap() + summary["documents"]["valid"].as_u64().unwrap() + summary["documents"]["test"].as_u64().unwrap(), 30);
    let first = std::fs::read(out.corpus(Split::Train)).unwrap();
    ok(&infill(d, &["ingest"]));
    assert_eq!(std::fs::read(out.corpus(Split::Train)).unwrap(), first);

    ok(&infill(d, &["train-vocab"]));
    ok(&infill(d, &["make-examples", "--strategy", "all"]));
    let vocab = Vocab::load(&out.vocab()).unwrap();
    for split in [Split::Train, Split::Valid] {
        let ids: Vec<BTreeSet<String>> = Strategy::ALL
            .iter()
            .map(|&s| read_dataset(&out.dataset(split, s), &vocab).unwrap().into_iter().map(|e| e.doc_id).collect())
            .collect();
        assert!(!ids[0].is_empty());
        assert!(ids.iter().all(|s| s == &ids[0]));
    }

    let missing = error_line(&infill(d, &["eval"]));
    assert_eq!(missing["error"], "missing_artifact");

    let trained = ok(&infill(d, &["train", "--strategy", "all"]));
    assert_eq!(trained.lines().count(), 4);
    for s in Strategy::ALL {
        assert!(out.checkpoint(s).is_file());
        let log = std::fs::read_to_string(out.train_log(s)).unwrap();
        let entries: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert!(entries.iter().all(|e| e["step"].is_u64() && e["loss"].is_f64()));
    }

    let table = ok(&infill(d, &["eval"]));
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 5);
    let header: Vec<&str> = lines[0].split_whitespace().collect();
    assert_eq!(header, ["tiny", "PPL", "document", "paragraph", "sentence", "ngram", "word", "mixture", "Length"]);
    for (line, s) in lines[1..].iter().zip(Strategy::ALL) {
        let cells: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(cells[0], s.as_str());
        assert_eq!(cells.len(), 8);
    }
    assert_eq!(std::fs::read_to_string(out.report_txt()).unwrap(), table);

    let fill = ok(&infill(d, &["--seed", "5", "infill", "--text", "Anna met [blank:word] at the park."]));
    let result: Value = serde_json::from_str(&fill).unwrap();
    assert_eq!(result["diagnostics"]["blanks"], 1);
    assert_eq!(fill, ok(&infill(d, &["--seed", "5", "infill", "--text", "Anna met [blank:word] at the park."])));

    let bad = error_line(&infill(d, &["infill", "--text", "broken [blank:ngram"]));
    assert_eq!(bad["error"], "malformed_marker");
    assert_eq!(bad["offset"], 7);
}

#[test]
fn config_errors_list_every_key() {
    let dir = setup("version = 1\nspeed = 2\n[model]\nwidth = 3\n[train]\nseed = 1\n");
    let err = error_line(&infill(dir.path(), &["ingest"]));
    assert_eq!(err["error"], "config_invalid");
    assert_eq!(err["keys"], serde_json::json!(["model.width", "speed", "train.seed"]));

    let dir = setup("version = 1\n[examples]\nmasks_per_doc = 0\n[corpus]\nkind = \"synthetic\"\nn_docs = 1\n");
    let err = error_line(&infill(dir.path(), &["ingest"]));
    assert_eq!(err["keys"], serde_json::json!(["corpus.n_docs", "examples.masks_per_doc"]));

    let dir = setup(TINY);
    let out = Command::new(env!("CARGO_BIN_EXE_infill")).args(["--config", "/nonexistent/run.toml", "ingest"]).output().unwrap();
    assert_eq!(error_line(&out)["error"], "config_unreadable");
    drop(dir);
}

#[test]
fn file_corpus_is_ingested() {
    let dir = setup("");
    let d = dir.path();
    std::fs::write(d.join("train.txt"), "One day Anna met Ben.\n\nBen gave Carla a kite. Carla smiled.\n").unwrap();
    std::fs::write(d.join("valid.txt"), "Dora found a hat.\n").unwrap();
    std::fs::write(d.join("test.jsonl"), "{\"id\": \"t1\", \"text\": \"Eli lost a map.\"}\n").unwrap();
    let config = "version = 1\n[corpus]\nkind = \"files\"\nformat = \"blankline-txt\"\ntrain = \"train.txt\"\nvalid = \"valid.txt\"\ntest = \"test.txt\"\n";
    std::fs::write(d.join("run.toml"), config).unwrap();
    let err = error_line(&infill(d, &["ingest"]));
    assert_eq!(err["error"], "missing_artifact");

    std::fs::write(d.join("test.txt"), "Eli lost a map.\n").unwrap();
    let summary: Value = serde_json::from_str(&ok(&infill(d, &["ingest"]))).unwrap();
    assert_eq!(summary["documents"], serde_json::json!({ "train": 2, "valid": 1, "test": 1 }));
    let test = std::fs::read_to_string(d.join("out/corpus/test.jsonl")).unwrap();
    assert!(test.contains("\"id\":\"test:doc-000000\""), "{test}");
}
