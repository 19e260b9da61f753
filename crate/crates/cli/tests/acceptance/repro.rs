//! Every command rerun with the same configuration and seed reproduces its
//! outputs exactly, wall-clock fields aside.

use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::common::{metrics_without_time, run_ok, s};

fn manifest_without_time(dir: &Path) -> Value {
    let mut v: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("created_unix");
    v
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

/// Returns the trained checkpoint for later criteria.
pub fn run(work: &Path, held_dir: &Path) -> (Result<String, String>, PathBuf) {
    let mut mismatches = Vec::new();

    let prepare = |name: &str| {
        let out = work.join(name);
        let hash = run_ok(&["prepare", "--out", s(&out), "--seed", "5", "--count", "64"]);
        (out, hash)
    };
    let (data_a, hash_a) = prepare("repro-data-a");
    let (data_b, hash_b) = prepare("repro-data-b");
    if hash_a != hash_b || manifest_without_time(&data_a) != manifest_without_time(&data_b) {
        mismatches.push("prepare");
    }

    let train = |name: &str| {
        let cfg = work.join(format!("{name}.toml"));
        std::fs::write(&cfg, format!("dataset = {:?}\nout_dir = {name:?}\n[train]\niterations = 10\nseed = 4\n", s(&data_a))).unwrap();
        let ckpt = PathBuf::from(run_ok(&["train", "--config", s(&cfg)]).trim());
        (work.join(name), ckpt)
    };
    let (run_a, ckpt_a) = train("repro-run-a");
    let (run_b, ckpt_b) = train("repro-run-b");
    if metrics_without_time(&run_a.join("metrics.jsonl")) != metrics_without_time(&run_b.join("metrics.jsonl")) {
        mismatches.push("train metrics log");
    }
    if read(&ckpt_a) != read(&ckpt_b) {
        mismatches.push("train checkpoint");
    }
    let hash = |dir: &Path| -> Value { serde_json::from_slice::<Value>(&read(&dir.join("run_config.json"))).unwrap()["hash"].clone() };
    if hash(&run_a) != hash(&run_b) {
        mismatches.push("run config hash");
    }

    let seq = data_a.join("sequences/00000000.json");
    let generate = |name: &str| {
        let out = work.join(name);
        run_ok(&["generate", "--checkpoint", s(&ckpt_a), "--sequence", s(&seq), "--out", s(&out), "--seed", "8"]);
        out
    };
    let (gen_a, gen_b) = (generate("repro-gen-a"), generate("repro-gen-b"));
    for k in 0..3 {
        let name = format!("step-{k}.png");
        if read(&gen_a.join(&name)) != read(&gen_b.join(&name)) {
            mismatches.push("generate images");
        }
    }
    if read(&gen_a.join("generation.json")) != read(&gen_b.join("generation.json")) {
        mismatches.push("generate document");
    }

    let eval = || run_ok(&["eval", "--checkpoint", s(&ckpt_a), "--dataset", s(held_dir), "--metric", "consistency", "--seed", "3"]);
    if eval() != eval() {
        mismatches.push("eval report");
    }

    let outcome = if mismatches.is_empty() {
        Ok("prepare, train (metrics log, checkpoint, config hash), generate and eval reruns identical".into())
    } else {
        Err(format!("reruns differ: {}", mismatches.join(", ")))
    };
    (outcome, ckpt_a)
}
