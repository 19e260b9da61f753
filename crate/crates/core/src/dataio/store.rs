//! On-disk dataset layout: `images/*.png`, `sequences/*.json`,
//! `objects/*.json` and a `manifest.json` tying them together.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DatasetSpec, FilterStats, TrainingExample};
use crate::error::{Error, Result};
use crate::imageio;
use crate::sgraph::{deserialize_sequence, serialize_sequence, BBox, NodeId, Vocabulary};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: u64,
    pub image: String,
    pub sequence: String,
    pub objects: String,
    pub num_objects: usize,
}

/// Everything describing a prepared dataset except wall-clock fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub source: String,
    pub seed: u64,
    pub spec: DatasetSpec,
    pub vocabulary: Vocabulary,
    pub filter_stats: FilterStats,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("manifest serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    #[serde(flatten)]
    manifest: Manifest,
    content_hash: String,
    created_unix: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectDocument {
    pub id: u32,
    pub category: String,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    /// Row-major `mask_size x mask_size` raster.
    pub mask: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectsFile {
    image_id: u64,
    objects: Vec<ObjectDocument>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub examples: Vec<TrainingExample>,
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Write examples under `dir` and return the manifest that was recorded.
pub fn write_dataset(
    dir: &Path,
    source: &str,
    seed: u64,
    spec: &DatasetSpec,
    vocabulary: &Vocabulary,
    filter_stats: FilterStats,
    examples: &[TrainingExample],
) -> Result<Manifest> {
    for sub in ["images", "sequences", "objects"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut entries = Vec::with_capacity(examples.len());
    for ex in examples {
        let stem = format!("{:08}", ex.image_id);
        let entry = ManifestEntry {
            image_id: ex.image_id,
            image: format!("images/{stem}.png"),
            sequence: format!("sequences/{stem}.json"),
            objects: format!("objects/{stem}.json"),
            num_objects: ex.boxes.len(),
        };
        imageio::write_png(&dir.join(&entry.image), &ex.image)?;
        write_file(&dir.join(&entry.sequence), serialize_sequence(&ex.sequence, vocabulary)?.as_bytes())?;
        let graph = ex.final_graph();
        let objects = ex
            .boxes
            .iter()
            .map(|(id, b)| {
                let category = graph
                    .category_of(*id)
                    .and_then(|c| vocabulary.category_name(c))
                    .ok_or_else(|| Error::validation(format!("object {id} missing from the final graph")))?;
                Ok(ObjectDocument {
                    id: id.0,
                    category: category.to_string(),
                    bbox: b.to_array(),
                    mask: ex.masks[id].data().to_vec(),
                })
            })
            .collect::<Result<_>>()?;
        let doc = ObjectsFile { image_id: ex.image_id, objects };
        write_file(&dir.join(&entry.objects), &serde_json::to_vec_pretty(&doc)?)?;
        entries.push(entry);
    }
    let manifest = Manifest {
        source: source.into(),
        seed,
        spec: spec.clone(),
        vocabulary: vocabulary.clone(),
        filter_stats,
        entries,
    };
    let file = ManifestFile {
        content_hash: manifest.content_hash(),
        created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        manifest,
    };
    write_file(&dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(&file)?)?;
    Ok(file.manifest)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let file: ManifestFile = serde_json::from_str(&read_file(&dir.join(MANIFEST_FILE))?)?;
    let manifest = file.manifest;
    if manifest.content_hash() != file.content_hash {
        return Err(Error::validation(format!("{}: manifest content hash mismatch", dir.display())));
    }
    let vocab = &manifest.vocabulary;
    let m = manifest.spec.mask_size;
    let s = manifest.spec.image_size;
    let mut examples = Vec::with_capacity(manifest.entries.len());
    for (index, entry) in manifest.entries.iter().enumerate() {
        let record = |e: Error| Error::Record { index, message: format!("{}: {e}", entry.objects) };
        let image = imageio::read_png(&dir.join(&entry.image))?;
        image.check_shape("load_dataset", &[3, s, s])?;
        let sequence = deserialize_sequence(&read_file(&dir.join(&entry.sequence))?, vocab)?;
        let objects: ObjectsFile = serde_json::from_str(&read_file(&dir.join(&entry.objects))?).map_err(|e| record(e.into()))?;
        let mut boxes = BTreeMap::new();
        let mut masks = BTreeMap::new();
        for o in objects.objects {
            let [x0, y0, x1, y1] = o.bbox;
            boxes.insert(NodeId(o.id), BBox::new(x0, y0, x1, y1).map_err(record)?);
            masks.insert(NodeId(o.id), Tensor::new(vec![m, m], o.mask).map_err(record)?);
        }
        let final_ids = sequence.last().map(|g| g.node_ids()).unwrap_or_default();
        if final_ids != boxes.keys().copied().collect() {
            return Err(record(Error::validation("object ids differ from the final graph's nodes")));
        }
        examples.push(TrainingExample { image_id: entry.image_id, sequence, image, boxes, masks });
    }
    Ok(Dataset { manifest, examples })
}

#[cfg(test)]
mod tests {
    use super::super::{make_training_example, synth_shapes, synth_vocabulary};
    use super::*;
    use crate::imageio::quantize;

    #[test]
    fn datasets_round_trip_and_hash_stably() {
        let spec = DatasetSpec::default();
        let vocab = synth_vocabulary();
        let examples: Vec<_> = synth_shapes(4, 1, &spec)
            .unwrap()
            .iter()
            .map(|(img, _)| make_training_example(img, &spec, 1).unwrap())
            .collect();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = write_dataset(a.path(), "synth", 1, &spec, &vocab, FilterStats::default(), &examples).unwrap();
        let mb = write_dataset(b.path(), "synth", 1, &spec, &vocab, FilterStats::default(), &examples).unwrap();
        assert_eq!(ma.content_hash(), mb.content_hash());
        assert_eq!(ma.entries.len(), 4);

        let loaded = load_dataset(a.path()).unwrap();
        assert_eq!(loaded.manifest, ma);
        for (orig, back) in examples.iter().zip(&loaded.examples) {
            assert_eq!(back.sequence, orig.sequence);
            assert_eq!(back.boxes, orig.boxes);
            assert_eq!(back.masks, orig.masks);
            assert_eq!(back.image, quantize(&orig.image));
        }

        let path = a.path().join(MANIFEST_FILE);
        let tampered = read_file(&path).unwrap().replace("\"seed\": 1", "\"seed\": 2");
        write_file(&path, tampered.as_bytes()).unwrap();
        assert!(load_dataset(a.path()).is_err());
    }
}
