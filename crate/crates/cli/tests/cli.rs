//! End-to-end runs of the `vkd` binary on the smoke preset.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn vkd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vkd")).args(args).output().expect("vkd runs")
}

fn ok(args: &[&str]) -> String {
    let out = vkd(args);
    assert!(
        out.status.success(),
        "vkd {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn digest_dir(dir: &Path) -> Vec<(String, String)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    files
        .iter()
        .map(|p| {
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            let hex: String = Sha256::digest(fs::read(p).unwrap()).iter().map(|b| format!("{:02x}", b)).collect();
            (name, hex)
        })
        .collect()
}

fn json_lines(path: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn gen_data_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        ok(&["gen-data", "--preset", "smoke", "--count", "12", "--out", dir.to_str().unwrap()]);
    }
    let (da, db) = (digest_dir(&a), digest_dir(&b));
    assert!(da.iter().any(|(n, _)| n == "dialogues.jsonl"));
    assert_eq!(da, db);

    let c = tmp.path().join("c");
    ok(&["gen-data", "--preset", "smoke", "--set", "data_seed=9", "--count", "12", "--out", c.to_str().unwrap()]);
    assert_ne!(digest_dir(&c), da);
}

#[test]
fn train_resume_infer_and_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let d = data.to_str().unwrap();
    ok(&["gen-data", "--preset", "smoke", "--count", "16", "--out", d]);

    let full = tmp.path().join("full");
    let stdout = ok(&["pretrain", "--preset", "smoke", "--data", d, "--steps", "6", "--out", full.to_str().unwrap()]);
    assert!(stdout.starts_with("# resolved config"));
    assert!(stdout.contains("n_queries = 4"));
    assert_eq!(json_lines(&full.join("train_log.jsonl")).len(), 6);

    let part = tmp.path().join("part");
    let p = part.to_str().unwrap();
    ok(&["pretrain", "--preset", "smoke", "--data", d, "--steps", "6", "--checkpoint-every", "3", "--out", p]);
    let resumed = tmp.path().join("resumed");
    let step3 = part.join("step-3.vkd");
    ok(&["pretrain", "--resume", step3.to_str().unwrap(), "--data", d, "--steps", "6", "--out", resumed.to_str().unwrap()]);
    assert_eq!(fs::read(full.join("checkpoint.vkd")).unwrap(), fs::read(resumed.join("checkpoint.vkd")).unwrap());

    let ckpt = full.join("checkpoint.vkd");
    let c = ckpt.to_str().unwrap();
    let dialogues = data.join("dialogues.jsonl");
    let tuned = tmp.path().join("tuned");
    ok(&["finetune", "--checkpoint", c, "--data", dialogues.to_str().unwrap(), "--steps", "3", "--out", tuned.to_str().unwrap()]);
    let log = json_lines(&tuned.join("finetune_log.jsonl"));
    assert_eq!(log.len(), 3);
    assert!(log.iter().all(|r| r.get("l_nll").is_some() && r.get("l_kd").is_none()));

    let tc = tuned.join("checkpoint.vkd");
    let inf = tmp.path().join("infer");
    ok(&["infer", "--checkpoint", tc.to_str().unwrap(), "--context", "hello there", "--max-new", "8", "--out", inf.to_str().unwrap()]);
    assert_eq!(json_lines(&inf.join("responses.jsonl")).len(), 1);

    let txt = tmp.path().join("txt");
    ok(&["textualize", "--checkpoint", c, "--context", "a red circle", "--max-new", "8", "--out", txt.to_str().unwrap()]);
    assert_eq!(json_lines(&txt.join("textualizations.jsonl"))[0]["context"], "a red circle");

    let ev = tmp.path().join("eval");
    let stdout = ok(&[
        "eval", "--checkpoint", tc.to_str().unwrap(), "--data", dialogues.to_str().unwrap(),
        "--max-new", "6", "--per-sample", "--out", ev.to_str().unwrap(),
    ]);
    assert!(stdout.contains("ppl"));
    let names: Vec<String> = json_lines(&ev.join("eval.jsonl"))
        .iter()
        .map(|r| r["metric"].as_str().unwrap().to_string())
        .collect();
    for m in ["ppl", "bleu1", "rouge_l", "average", "extrema", "greedy", "dis1", "dis2"] {
        assert!(names.iter().any(|n| n == m), "missing {} in {:?}", m, names);
    }
    let csv = fs::read_to_string(ev.join("per_sample.csv")).unwrap();
    // Generated text may hold any byte, newlines included; those sit inside quotes.
    let mut quoted = false;
    let mut records = 0;
    for ch in csv.chars() {
        match ch {
            '"' => quoted = !quoted,
            '\n' if !quoted => records += 1,
            _ => {}
        }
    }
    assert_eq!(records, 17);
}

#[test]
fn ablating_tim_drops_it_from_the_log() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("ab");
    ok(&[
        "ablate", "--preset", "smoke", "--set", "total_steps=4", "--disable", "tim",
        "--probe-fit", "8", "--probe-eval", "8", "--out", out.to_str().unwrap(),
    ]);
    let cfg = fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(cfg.contains("disable_tim = true"));
    let (l2, l3) = (0.2, 0.2);
    for r in json_lines(&out.join("train_log.jsonl")) {
        assert!(r.get("l_tim").is_none());
        let want = l2 * r["l_tamim"].as_f64().unwrap() + l3 * r["l_iamtm"].as_f64().unwrap();
        assert!((r["l_kd"].as_f64().unwrap() - want).abs() < 1e-12);
    }
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert!(summary["probe"]["text_accuracy"].is_number());
}

#[test]
fn usage_errors_exit_with_two() {
    let out = vkd(&["pretrain", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    let out = vkd(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(vkd(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_with_one_and_a_category() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.vkd");
    let out = vkd(&["infer", "--checkpoint", missing.to_str().unwrap(), "--context", "hi", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[io]:"));

    let out = vkd(&["gen-data", "--preset", "smoke", "--set", "n_queries=0", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr).into_owned();
    assert!(err.starts_with("error[config]:") && err.contains("n_queries"), "{}", err);

    let out = vkd(&["gen-data", "--preset", "tiny", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn checkpoint_overrides_must_keep_the_architecture() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    ok(&["pretrain", "--preset", "smoke", "--steps", "1", "--out", run.to_str().unwrap()]);
    let ckpt = run.join("checkpoint.vkd");
    let out = vkd(&[
        "infer", "--checkpoint", ckpt.to_str().unwrap(), "--set", "d_k=16", "--context", "hi",
        "--out", tmp.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("d_k"));
}
