#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

pub fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_isggen"));
    cmd.env("ISGGEN_LOG", "warn");
    // Keep the caller's environment from leaking overrides into the tests.
    for (k, _) in std::env::vars() {
        if k.starts_with("ISGGEN_") && k != "ISGGEN_LOG" {
            cmd.env_remove(k);
        }
    }
    cmd
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

pub fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "isggen {args:?} failed with {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small synthetic dataset matching the tiny model preset.
pub fn tiny_dataset(dir: &Path, count: usize, seed: u64) -> PathBuf {
    let out = dir.join(format!("data-{count}-{seed}"));
    run_ok(&[
        "prepare", "--source", "synth", "--out", s(&out), "--seed", &seed.to_string(), "--count", &count.to_string(),
        "--image-size", "16", "--mask-size", "8",
    ]);
    out
}

/// Write a run file for the tiny preset and return its path.
pub fn tiny_run_file(dir: &Path, dataset: &Path, out_dir: &str, iterations: u64, extra: &str) -> PathBuf {
    let path = dir.join(format!("{out_dir}.toml"));
    let text = format!(
        "dataset = {dataset:?}\nout_dir = {out_dir:?}\n\n[model]\npreset = \"tiny\"\n\n[train]\niterations = {iterations}\nbatch_size = 4\nseed = 3\ncheckpoint_every = 1\n{extra}\n",
        dataset = s(dataset),
    );
    std::fs::write(&path, text).unwrap();
    path
}

/// Metrics log lines with the wall-clock field removed.
pub fn metrics_without_time(path: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("elapsed_ms");
            v
        })
        .collect()
}

pub struct Server {
    pub child: Child,
    pub addr: String,
}

impl Server {
    pub fn start(checkpoint: &Path, store: &Path) -> Server {
        let mut child = bin()
            .args(["serve", "--checkpoint", s(checkpoint), "--store", s(store), "--addr", "127.0.0.1:0"])
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .unwrap();
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
        let addr = line.trim().strip_prefix("listening on ").unwrap_or_else(|| panic!("unexpected banner {line:?}")).to_string();
        Server { child, addr }
    }

    /// One HTTP/1.1 request; returns the status code and body.
    pub fn request(&self, method: &str, path: &str, body: Option<&str>) -> (u16, Vec<u8>) {
        let mut stream = TcpStream::connect(&self.addr).unwrap();
        let body = body.unwrap_or("");
        write!(
            stream,
            "{method} {path} HTTP/1.1\r\nHost: {}\r\nConnection: close\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{body}",
            self.addr,
            body.len()
        )
        .unwrap();
        let mut raw = Vec::new();
        stream.read_to_end(&mut raw).unwrap();
        let split = raw.windows(4).position(|w| w == b"\r\n\r\n").expect("response has a header");
        let head = String::from_utf8_lossy(&raw[..split]).to_string();
        let status = head.split_whitespace().nth(1).unwrap().parse().unwrap();
        let mut payload = raw[split + 4..].to_vec();
        if head.to_ascii_lowercase().contains("transfer-encoding: chunked") {
            payload = dechunk(&payload);
        }
        (status, payload)
    }

    pub fn json(&self, method: &str, path: &str, body: Option<&str>) -> (u16, serde_json::Value) {
        let (status, bytes) = self.request(method, path, body);
        (status, serde_json::from_slice(&bytes).unwrap_or(serde_json::Value::Null))
    }

    /// Ask for a graceful shutdown and wait for the exit status.
    pub fn terminate(mut self) -> std::process::ExitStatus {
        Command::new("kill").args(["-TERM", &self.child.id().to_string()]).status().unwrap();
        self.child.wait().unwrap()
    }
}

fn dechunk(mut data: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    loop {
        let line_end = data.windows(2).position(|w| w == b"\r\n").unwrap();
        let size = usize::from_str_radix(std::str::from_utf8(&data[..line_end]).unwrap().trim(), 16).unwrap();
        data = &data[line_end + 2..];
        if size == 0 {
            return out;
        }
        out.extend_from_slice(&data[..size]);
        data = &data[size + 2..];
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}
