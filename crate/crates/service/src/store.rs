//! Directory-backed session store:
//!
//! ```text
//! <root>/sessions/<id>/session.json   session document
//! <root>/sessions/<id>/images/<k>.png  8-bit image of step k
//! <root>/sessions/<id>/images/<k>.f64  the same image at full precision
//! ```
//!
//! The full-precision image is what the next step feeds back into the
//! generator; the PNGs are for clients. Every file is written to a temporary
//! name and renamed, and the session document is written last, so a step that
//! fails part-way leaves the previous state intact.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use isggen_core::Tensor;

use crate::error::{ApiError, ApiResult};
use crate::session::Session;

#[derive(Clone, Debug)]
pub struct SessionStore {
    root: PathBuf,
    locks: Arc<Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>>,
}

fn io_error(path: &Path, e: std::io::Error) -> ApiError {
    ApiError::internal(format!("{}: {e}", path.display()))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> ApiResult<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| io_error(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| io_error(path, e))
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-')
}

impl SessionStore {
    pub fn open(root: impl Into<PathBuf>) -> std::io::Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(root.join("sessions"))?;
        Ok(Self { root, locks: Arc::default() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn dir(&self, id: &str) -> PathBuf {
        self.root.join("sessions").join(id)
    }

    /// Per-session lock serializing edits and steps.
    pub fn lock(&self, id: &str) -> Arc<tokio::sync::Mutex<()>> {
        let mut locks = self.locks.lock().expect("lock table poisoned");
        locks.entry(id.to_string()).or_default().clone()
    }

    pub fn create(&self, session: &Session) -> ApiResult<()> {
        let images = self.dir(&session.id).join("images");
        std::fs::create_dir_all(&images).map_err(|e| io_error(&images, e))?;
        self.save(session)
    }

    pub fn load(&self, id: &str) -> ApiResult<Session> {
        let missing = || ApiError::not_found("session_not_found", format!("no session `{id}`"));
        if !valid_id(id) {
            return Err(missing());
        }
        let path = self.dir(id).join("session.json");
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(missing()),
            Err(e) => return Err(io_error(&path, e)),
        };
        serde_json::from_str(&text).map_err(|e| ApiError::internal(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, session: &Session) -> ApiResult<()> {
        let bytes = serde_json::to_vec_pretty(session).map_err(|e| ApiError::internal(e.to_string()))?;
        write_atomic(&self.dir(&session.id).join("session.json"), &bytes)
    }

    pub fn image_path(&self, id: &str, k: usize) -> PathBuf {
        self.dir(id).join("images").join(format!("{k}.png"))
    }

    pub fn write_image(&self, id: &str, k: usize, png: &[u8]) -> ApiResult<()> {
        write_atomic(&self.image_path(id, k), png)
    }

    pub fn read_image(&self, id: &str, k: usize) -> ApiResult<Vec<u8>> {
        let path = self.image_path(id, k);
        std::fs::read(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => ApiError::not_found("image_not_found", format!("session `{id}` has no image {k}")),
            _ => io_error(&path, e),
        })
    }

    fn raw_path(&self, id: &str, k: usize) -> PathBuf {
        self.dir(id).join("images").join(format!("{k}.f64"))
    }

    /// Store a step's image at full precision: rank, shape, then values, all
    /// little-endian.
    pub fn write_raw_image(&self, id: &str, k: usize, image: &Tensor) -> ApiResult<()> {
        let mut bytes = Vec::with_capacity(8 * (1 + image.shape().len() + image.len()));
        bytes.extend((image.shape().len() as u64).to_le_bytes());
        for &d in image.shape() {
            bytes.extend((d as u64).to_le_bytes());
        }
        for &x in image.data() {
            bytes.extend(x.to_le_bytes());
        }
        write_atomic(&self.raw_path(id, k), &bytes)
    }

    pub fn read_raw_image(&self, id: &str, k: usize) -> ApiResult<Tensor> {
        let path = self.raw_path(id, k);
        let bytes = std::fs::read(&path).map_err(|e| io_error(&path, e))?;
        let corrupt = || ApiError::internal(format!("{}: corrupt image file", path.display()));
        let words: Vec<[u8; 8]> = bytes.chunks_exact(8).map(|c| c.try_into().expect("8 bytes")).collect();
        let rank = words.first().map(|w| u64::from_le_bytes(*w) as usize).ok_or_else(corrupt)?;
        let shape: Vec<usize> = words.get(1..1 + rank).ok_or_else(corrupt)?.iter().map(|w| u64::from_le_bytes(*w) as usize).collect();
        let data: Vec<f64> = words[1 + rank..].iter().map(|w| f64::from_le_bytes(*w)).collect();
        Tensor::new(shape, data).map_err(|_| corrupt())
    }
}
