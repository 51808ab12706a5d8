use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

use codchain::eval::AttentionGrid;
use codchain::model::Seq2Seq;

fn codchain(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_codchain")).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = codchain(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

const SMALL: &[&str] = &[
    "--set",
    "synth.src_vocab_size=15",
    "--set",
    "synth.tgt_vocab_size=10",
    "--set",
    "model.embed_dim=8",
    "--set",
    "model.hidden_dims=[8,8]",
    "--set",
    "model.dec_hidden=8",
    "--set",
    "train.epochs=2",
];

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(SMALL);
    v
}

#[test]
fn end_to_end_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &with_small(&["synth", "--out-dir", "data", "--records", "120", "--seed", "3"]));
    for f in ["corpus.src", "corpus.tgt", "corpus.jsonl", "acme.txt", "gem.txt"] {
        assert!(d.join("data").join(f).exists(), "{f}");
    }
    let out = ok(d, &["validity-check", "--input", "data/corpus", "--acme", "data/acme.txt", "--output", "data/checked.jsonl"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("kept 120"));
    ok(d, &["preprocess", "--input", "data/corpus.jsonl", "--gem", "data/gem.txt", "--output", "data/mapped"]);
    assert!(d.join("data/mapped.src").exists() && d.join("data/mapped.tgt").exists());

    ok(d, &with_small(&["train", "--data", "data/corpus.jsonl", "--checkpoint", "m.ckpt", "--metrics", "metrics.jsonl"]));
    let model = Seq2Seq::load(d.join("m.ckpt")).unwrap();
    assert_eq!(model.config.embed_dim, 8);
    let metrics = std::fs::read_to_string(d.join("metrics.jsonl")).unwrap();
    let lines: Vec<Value> = metrics.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    for (i, m) in lines.iter().enumerate() {
        assert_eq!(m["epoch"], i + 1);
        for k in ["train_loss", "valid_loss", "valid_ppl"] {
            assert!(m[k].as_f64().unwrap().is_finite(), "{k}");
        }
    }

    ok(d, &[
        "translate", "--model", "m.ckpt", "--input", "data/corpus.jsonl", "--output", "pred.jsonl", "--constrained", "--acme",
        "data/acme.txt", "--attention-dir", "att",
    ]);
    let graph = codchain::acme::CausalGraph::load(d.join("data/acme.txt")).unwrap();
    let preds: Vec<Value> = std::fs::read_to_string(d.join("pred.jsonl")).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(preds.len(), 120);
    for p in &preds {
        let chain: Vec<String> = serde_json::from_value(p["chain"].clone()).unwrap();
        assert!(graph.chain_is_valid(&chain).valid);
        assert_eq!(p["edge_valid"].as_array().unwrap().len(), chain.len().saturating_sub(1));
        assert!(p["log_prob"].as_f64().unwrap() <= 0.0);
        assert!(p["id"].is_string());
    }
    let first_id = preds[0]["id"].as_str().unwrap();
    let grid = AttentionGrid::parse(&std::fs::read_to_string(d.join("att").join(format!("{first_id}.tsv"))).unwrap()).unwrap();
    assert_eq!(grid.weights.len(), grid.tgt.len());

    let out = ok(d, &["evaluate", "--pred", "pred.jsonl", "--ref", "data/corpus.jsonl"]);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    for k in ["p1", "bp", "score"] {
        assert!(report["bleu"][k].is_number(), "{k}");
    }
    assert!(report["bleu"].get("p2").is_some());
    assert_eq!(report["n"], 120);
    for k in ["exact", "code", "underlying"] {
        let v = report[k].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v));
    }
}

#[test]
fn experiment_from_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &with_small(&["synth", "--out-dir", "data", "--records", "100"]));
    std::fs::write(
        d.join("run.toml"),
        "folds = 2\nexperiment = 4\n[paths]\ncorpus = \"data/corpus.jsonl\"\nacme = \"data/acme.txt\"\noutput_dir = \"runs\"\n\
         [model]\nembed_dim = 8\nhidden_dims = [8, 8]\ndec_hidden = 8\n[train]\nepochs = 1\n[beam]\nmax_len = 6\n",
    )
    .unwrap();
    ok(d, &["experiment", "--config", "run.toml"]);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(d.join("runs/experiment-4.json")).unwrap()).unwrap();
    assert_eq!(report["experiment"]["id"], 4);
    assert_eq!(report["folds"].as_array().unwrap().len(), 2);
    for f in report["folds"].as_array().unwrap() {
        assert_eq!(f["test_hash"], f["test_hash_after"]);
        assert_eq!(f["valid_chain_rate"], 1.0);
    }
    assert_eq!(report["config"]["model"]["embed_dim"], 8);

    let out = codchain(d, &["experiment", "--config", "run.toml", "--set", "experiment=9"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(code(&codchain(d, &["--help"])), 0);
    assert_eq!(code(&codchain(d, &["--version"])), 0);
    assert_eq!(code(&codchain(d, &[])), 1);
    assert_eq!(code(&codchain(d, &["frobnicate"])), 1);
    assert_eq!(code(&codchain(d, &["translate"])), 1);
    assert_eq!(code(&codchain(d, &["train", "--set", "novalue"])), 1);
    assert_eq!(code(&codchain(d, &["train", "--data", "x.jsonl"])), 1);
    assert_eq!(code(&codchain(d, &["translate", "--model", "missing.ckpt", "--input", "x.jsonl"])), 2);

    std::fs::write(d.join("bad.ckpt"), b"not a checkpoint").unwrap();
    std::fs::write(d.join("x.jsonl"), "{\"id\":\"a\",\"src\":[\"4280\"],\"tgt\":[\"I500\"]}\n").unwrap();
    assert_eq!(code(&codchain(d, &["translate", "--model", "bad.ckpt", "--input", "x.jsonl"])), 2);
    std::fs::write(d.join("broken.jsonl"), "{\"id\":\"a\",\"src\":[\"42#0\"],\"tgt\":[\"I500\"]}\n").unwrap();
    std::fs::write(d.join("acme.txt"), "D460 D460\n").unwrap();
    let out = codchain(d, &["validity-check", "--input", "broken.jsonl", "--acme", "acme.txt", "--output", "o.jsonl"]);
    assert_eq!(code(&out), 2);
    std::fs::write(d.join("bad.toml"), "folds = \"many\"\n").unwrap();
    assert_eq!(code(&codchain(d, &["experiment", "--config", "bad.toml"])), 1);
    let out = codchain(d, &["translate", "--model", "missing.ckpt", "--input", "x.jsonl", "--constrained"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}
