use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};

fn relgen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relgen"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("RELGEN_JOINT_TABLE")
        .env_remove("RELGEN_VISION_TABLE")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn ok(args: &[&str]) -> Output {
    let o = relgen(args);
    assert_eq!(code(&o), 0, "{args:?} failed:\n{}", String::from_utf8_lossy(&o.stderr));
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn sha(p: &Path) -> String {
    Sha256::digest(std::fs::read(p).unwrap()).iter().map(|b| format!("{b:02x}")).collect()
}

const SMALL_TRAIN: [&str; 6] = ["--set", "train.steps=4", "--set", "train.batch_size=2", "--set", "data.per_relation=1"];

fn train_into(out: &Path, extra: &[&str]) {
    let mut args = vec!["train", "--out", s(out)];
    args.extend(extra);
    ok(&args);
}

#[test]
fn exit_codes_for_parse_errors() {
    assert_eq!(code(&relgen(&[])), 1);
    assert_eq!(code(&relgen(&["train", "--bogus"])), 1);
    assert_eq!(code(&relgen(&["--help"])), 0);
    assert_eq!(code(&relgen(&["--version"])), 0);
}

#[test]
fn bad_config_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    assert_eq!(code(&relgen(&["train", "--out", s(&out), "--set", "train.stepz=3"])), 1);
    assert_eq!(code(&relgen(&["train", "--out", s(&out), "--set", "train.gamma=2"])), 1);
    assert_eq!(code(&relgen(&["bench", "build", "--out", s(&out), "--cases", "0"])), 1);
}

#[test]
fn train_writes_traceable_artifacts_and_replays() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    train_into(&a, &SMALL_TRAIN);
    for f in ["adapters.rlta", "train_log.jsonl", "train_summary.json", "run_config.json", "artifacts.json"] {
        assert!(a.join(f).is_file(), "missing {f}");
    }
    let record = read_json(&a.join("run_config.json"));
    let hash = record["resolved_hash"].as_str().unwrap().to_string();
    assert_eq!(record["config"]["train"]["steps"], 4);
    let arts = read_json(&a.join("artifacts.json"));
    assert_eq!(arts["resolved_hash"], hash.as_str());
    assert_eq!(read_json(&a.join("train_summary.json"))["resolved_hash"], hash.as_str());
    let files = arts["files"].as_object().unwrap();
    assert_eq!(files.len(), 4);
    for (name, digest) in files {
        assert_eq!(digest.as_str().unwrap(), sha(&a.join(name)), "{name}");
    }
    assert_eq!(std::fs::read_to_string(a.join("train_log.jsonl")).unwrap().lines().count(), 4);

    let b = dir.path().join("b");
    train_into(&b, &["--config", s(&a.join("run_config.json"))]);
    assert_eq!(read_json(&b.join("run_config.json"))["resolved_hash"], hash.as_str());
    for f in ["adapters.rlta", "train_log.jsonl"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs on replay");
    }
}

#[test]
fn generation_is_reproducible_and_uses_adapters() {
    let dir = tempfile::tempdir().unwrap();
    let train = dir.path().join("train");
    train_into(&train, &SMALL_TRAIN);
    let bench = dir.path().join("bench");
    ok(&["bench", "build", "--cases", "2", "--out", s(&bench)]);
    let manifest = read_json(&bench.join("manifest.json"));
    let case = &manifest["cases"][0];
    let subjects: Vec<Value> = case["subjects"]
        .as_array()
        .unwrap()
        .iter()
        .map(|sub| {
            serde_json::json!({
                "image": format!("bench/{}", sub["ref_image"].as_str().unwrap()),
                "class": sub["class"],
                "box": sub["box"],
            })
        })
        .collect();
    let req = serde_json::json!({ "text_prompt": case["prompt"], "subjects": subjects, "num_steps": 3 });
    let req_path = dir.path().join("req.json");
    std::fs::write(&req_path, req.to_string()).unwrap();

    let adapters = train.join("adapters.rlta");
    let run = |name: &str, with_adapters: bool| -> PathBuf {
        let out = dir.path().join(name);
        let mut args = vec!["generate", "--manifest", s(&req_path), "--out", s(&out)];
        if with_adapters {
            args.extend(["--adapters", s(&adapters)]);
        }
        ok(&args);
        out
    };
    let g1 = run("g1", true);
    let g2 = run("g2", true);
    let base = run("base", false);
    assert_eq!(std::fs::read(g1.join("000.png")).unwrap(), std::fs::read(g2.join("000.png")).unwrap());
    assert!(g1.join("grid.png").is_file() && g1.join("grid.json").is_file());
    assert_eq!(read_json(&g1.join("000.json"))["resolved_hash"], read_json(&train.join("run_config.json"))["resolved_hash"]);
    assert_ne!(std::fs::read(g1.join("000.png")).unwrap(), std::fs::read(base.join("000.png")).unwrap());
}

#[test]
fn bench_run_and_evaluate_agree() {
    let dir = tempfile::tempdir().unwrap();
    let bench = dir.path().join("bench");
    ok(&["bench", "build", "--cases", "3", "--out", s(&bench)]);
    let manifest = bench.join("manifest.json");
    let run = dir.path().join("run");
    ok(&["bench", "run", "--manifest", s(&manifest), "--out", s(&run), "--set", "sampler.num_steps=2"]);
    let eval = dir.path().join("eval");
    ok(&[
        "evaluate",
        "--manifest",
        s(&manifest),
        "--outputs",
        s(&run.join("outputs")),
        "--out",
        s(&eval),
        "--set",
        "sampler.num_steps=2",
    ]);
    assert_eq!(std::fs::read(run.join("report.json")).unwrap(), std::fs::read(eval.join("report.json")).unwrap());
    let report = read_json(&eval.join("report.json"));
    assert_eq!(report["cases"].as_array().map(Vec::len), Some(3));

    let ext = relgen(&[
        "evaluate",
        "--manifest",
        s(&manifest),
        "--outputs",
        s(&run.join("outputs")),
        "--backend",
        "external",
        "--out",
        s(&dir.path().join("ext")),
    ]);
    assert_eq!(code(&ext), 1);
    assert!(String::from_utf8_lossy(&ext.stderr).contains("--joint-table"));
}

#[test]
fn missing_input_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = relgen(&["generate", "--manifest", s(&dir.path().join("nope.json")), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn inspect_local_tokens_dumps_grid_and_pca() {
    let dir = tempfile::tempdir().unwrap();
    let bench = dir.path().join("bench");
    ok(&["bench", "build", "--cases", "1", "--out", s(&bench)]);
    let image = std::fs::read_dir(bench.join("refs")).unwrap().next().unwrap().unwrap().path();
    let out = dir.path().join("tokens.json");
    ok(&["inspect", "local-tokens", "--image", s(&image), "--out", s(&out)]);
    let v = read_json(&out);
    let grid = v["grid"].as_u64().unwrap() as usize;
    assert_eq!(v["local_tokens"].as_array().unwrap().len(), grid * grid);
    let dense = &v["dense"];
    let cells = (dense["height"].as_u64().unwrap() * dense["width"].as_u64().unwrap()) as usize;
    assert_eq!(v["pca"]["cells"].as_array().unwrap().len(), cells);
    assert_eq!(v["pca"]["components"].as_array().unwrap().len(), 2);

    let small = dir.path().join("small.json");
    ok(&["inspect", "local-tokens", "--image", s(&image), "--out", s(&small), "--set", "model.encoder.grid=2"]);
    assert_eq!(read_json(&small)["local_tokens"].as_array().unwrap().len(), 4);
}

#[test]
fn ablate_rejects_oversized_grids_and_unknown_axes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("abl");
    let big = relgen(&[
        "ablate",
        "--out",
        s(&out),
        "--axis",
        "lambda=1,2,3,4,5,6",
        "--axis",
        "ablation_mode=full,no_kml,blank_image_prompt,no_local_tokens",
        "--axis",
        "num_local_tokens=2x2,4x4",
    ]);
    assert_eq!(code(&big), 1);
    assert!(!out.join("runs").exists());
    assert_eq!(code(&relgen(&["ablate", "--out", s(&out), "--axis", "depth=1,2"])), 1);
    assert_eq!(code(&relgen(&["ablate", "--out", s(&out)])), 1);
}

#[test]
fn ablate_runs_every_combination() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("abl");
    let mut args = vec!["ablate", "--out", s(&out), "--axis", "ablation_mode=full,no_kml"];
    args.extend(SMALL_TRAIN);
    args.extend(["--set", "bench.cases=2", "--set", "sampler.num_steps=2"]);
    ok(&args);
    let v = read_json(&out.join("ablation.json"));
    let runs = v["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 2);
    assert_ne!(runs[0]["resolved_hash"], runs[1]["resolved_hash"]);
    let table = std::fs::read_to_string(out.join("ablation.txt")).unwrap();
    assert!(table.contains("ablation_mode=full") && table.contains("ablation_mode=no_kml"));
    assert!(out.join("runs/01/adapters.rlta").is_file());
}

#[test]
fn data_build_then_train_on_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["data", "build", "--out", s(&data), "--set", "data.per_relation=1"]);
    let manifest = data.join("manifest.jsonl");
    assert!(std::fs::read_to_string(&manifest).unwrap().lines().count() > 0);
    let train = dir.path().join("train");
    train_into(&train, &["--manifest", s(&manifest), "--set", "train.steps=2", "--set", "train.batch_size=2"]);
    assert!(train.join("adapters.rlta").is_file());
}
