//! Service stepping against offline rollouts, bit for bit.

use std::path::Path;

use serde_json::{json, Value};

use isggen_core::imageio::encode_png;
use isggen_core::trainer::{load_checkpoint, rollout_images, RolloutMode};
use isggen_core::{GraphSequence, Vocabulary};
use isggen_service::SessionStore;

use crate::common::Server;
use crate::training::load;

/// The edit that grows a session graph from step `k - 1` to step `k`.
fn edit(seq: &GraphSequence, k: usize, vocab: &Vocabulary) -> String {
    let g = &seq.steps()[k];
    let prev = k.checked_sub(1).map(|p| &seq.steps()[p]);
    let nodes: Vec<Value> = g
        .nodes()
        .iter()
        .filter(|n| prev.is_none_or(|p| !p.contains(n.id)))
        .map(|n| json!({ "id": n.id.0, "category": vocab.category_name(n.category).unwrap() }))
        .collect();
    let edges: Vec<Value> = g
        .edges()
        .iter()
        .filter(|e| prev.is_none_or(|p| !p.edges().contains(e)))
        .map(|e| json!({ "subject": e.subject.0, "predicate": vocab.predicate_name(e.predicate).unwrap(), "object": e.object.0 }))
        .collect();
    json!({ "add_nodes": nodes, "add_edges": edges }).to_string()
}

pub fn run(work: &Path, checkpoint: &Path, held_dir: &Path) -> Result<String, String> {
    let model = load_checkpoint(checkpoint).and_then(|c| c.restore_model()).map_err(|e| e.to_string())?;
    let vocab = model.config.vocabulary.clone();
    let held = load(held_dir);
    let store = work.join("parity-store");
    let server = Server::start(checkpoint, &store);
    let mut compared = 0;
    for (i, ex) in held.examples.iter().take(8).enumerate() {
        let seed = 1000 + i as u64;
        let offline = rollout_images(&model, &ex.sequence, seed, RolloutMode::Incremental).map_err(|e| e.to_string())?;
        let (status, created) = server.json("POST", "/v1/sessions", Some(&json!({ "seed": seed }).to_string()));
        if status != 201 {
            return Err(format!("session creation returned {status}: {created}"));
        }
        let id = created["session_id"].as_str().unwrap().to_string();
        for (k, want) in offline.iter().enumerate() {
            let (status, v) = server.json("POST", &format!("/v1/sessions/{id}/graph"), Some(&edit(&ex.sequence, k, &vocab)));
            if status != 200 {
                return Err(format!("graph edit returned {status}: {v}"));
            }
            let (status, step) = server.json("POST", &format!("/v1/sessions/{id}/step"), None);
            if status != 200 || step["step_index"] != k {
                return Err(format!("step {k} returned {status}: {step}"));
            }
            let (status, png) = server.request("GET", step["image_url"].as_str().unwrap(), None);
            if status != 200 || png != encode_png(want).map_err(|e| e.to_string())? {
                return Err(format!("sequence {i} step {k}: served PNG differs from the offline rollout"));
            }
            let raw = SessionStore::open(&store).map_err(|e| e.to_string())?.read_raw_image(&id, k).map_err(|e| e.body.message)?;
            if raw != *want {
                return Err(format!("sequence {i} step {k}: stored image differs by {:e}", raw.max_abs_diff(want)));
            }
            compared += 1;
        }
    }
    if !server.terminate().success() {
        return Err("server did not shut down cleanly".into());
    }
    Ok(format!("{compared} step images over 8 sequences identical (PNG bytes and f64 values)"))
}
