//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Set `ISGGEN_ACCEPTANCE_ONLY` to a comma-separated subset of
//! `properties,gradients,repro,parity,smoke,ablation,direction` to run part
//! of it; `ablation` needs `smoke` for its default-weight runs.

#[path = "../common/mod.rs"]
mod common;
mod gradients;
mod parity;
mod properties;
mod repro;
mod training;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use common::{run_ok, s};

struct Report {
    failed: usize,
    ran: usize,
    selected: Option<Vec<String>>,
}

impl Report {
    fn wants(&self, key: &str) -> bool {
        self.selected.as_ref().is_none_or(|s| s.iter().any(|k| k == key))
    }

    fn record(&mut self, key: &str, title: &str, f: impl FnOnce() -> Result<String, String>) {
        if !self.wants(key) {
            return;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        self.ran += 1;
        match outcome {
            Ok(detail) => println!("PASS  {title}: {detail} [{secs:.0}s]"),
            Err(detail) => {
                self.failed += 1;
                println!("FAIL  {title}: {detail} [{secs:.0}s]");
            }
        }
    }
}

fn main() -> ExitCode {
    let selected = std::env::var("ISGGEN_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').map(|k| k.trim().to_string()).filter(|k| !k.is_empty()).collect());
    let mut report = Report { failed: 0, ran: 0, selected };
    let work = tempfile::tempdir().expect("temporary directory");
    let work = work.path();

    // Shared datasets: a 64-image training set for the smoke and ablation
    // runs, a larger one for the direction check, and 64 held-out sequences.
    let prepare = |name: &str, seed: u64, count: usize, split: &str| {
        let out = work.join(name);
        run_ok(&["prepare", "--out", s(&out), "--seed", &seed.to_string(), "--count", &count.to_string(), "--split", split]);
        out
    };
    let held_dir = prepare("held-out", 202, 64, "val");

    report.record("properties", "unit/property suite (spot checks)", properties::run);
    report.record("gradients", "gradient checks", gradients::run);

    let mut checkpoint = None;
    report.record("repro", "reproducibility", || {
        let (outcome, ckpt) = repro::run(work, &held_dir);
        checkpoint = Some(ckpt);
        outcome
    });
    report.record("parity", "service/rollout parity", || {
        let ckpt = match checkpoint.take() {
            Some(c) => c,
            None => {
                let (_, c) = repro::run(work, &held_dir);
                c
            }
        };
        parity::run(work, &ckpt, &held_dir)
    });

    let mut smoke_runs = None;
    if report.wants("smoke") || report.wants("ablation") {
        let small_dir = prepare("train-64", 101, 64, "train");
        let small = training::load(&small_dir);
        let held = training::load(&held_dir);
        report.record("smoke", "training smoke", || training::smoke(&small, &mut smoke_runs));
        report.record("ablation", "no intermediate supervision + perceptual ablation", || {
            training::ablation(&small_dir, &small, &held, smoke_runs.as_ref())
        });
    }
    if report.wants("direction") {
        let train_dir = prepare("train-512", 1, 512, "train");
        report.record("direction", "direction check (incremental vs independent)", || training::direction(work, &train_dir, &held_dir));
    }

    println!("{} of {} criteria passed", report.ran - report.failed, report.ran);
    if report.failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
