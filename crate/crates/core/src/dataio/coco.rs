//! COCO-format annotation loading.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Deserialize;

use super::{apply_filters, AnnotatedImage, AnnotatedObject, DatasetSpec, FilterStats};
use crate::error::{Error, Result};
use crate::imageio;
use crate::sgraph::{BBox, Vocabulary};
use crate::tensor::Tensor;

#[derive(Deserialize, Default)]
struct CocoFile {
    #[serde(default)]
    images: Vec<serde_json::Value>,
    #[serde(default)]
    annotations: Vec<serde_json::Value>,
    #[serde(default)]
    categories: Vec<serde_json::Value>,
}

#[derive(Deserialize)]
struct CocoImage {
    id: u64,
    #[serde(default)]
    file_name: String,
    width: u32,
    height: u32,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
    #[serde(default)]
    segmentation: Option<Segmentation>,
    #[serde(default)]
    iscrowd: u8,
}

#[derive(Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Segmentation {
    Polygons(Vec<Vec<f64>>),
    Rle { size: [u32; 2], counts: RleCounts },
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RleCounts {
    Runs(Vec<u32>),
    Compressed(String),
}

/// Decode the compact string form of COCO run-length counts.
fn decode_rle_string(s: &str) -> Result<Vec<u32>> {
    let bytes = s.as_bytes();
    let mut counts: Vec<i64> = Vec::new();
    let mut p = 0;
    while p < bytes.len() {
        let (mut x, mut k, mut more) = (0i64, 0, true);
        while more {
            let c = *bytes.get(p).ok_or_else(|| Error::validation("truncated RLE string"))? as i64 - 48;
            x |= (c & 0x1f) << (5 * k);
            more = c & 0x20 != 0;
            p += 1;
            k += 1;
            if !more && (c & 0x10) != 0 {
                x |= -1i64 << (5 * k);
            }
        }
        if counts.len() > 2 {
            x += counts[counts.len() - 2];
        }
        counts.push(x);
    }
    counts
        .into_iter()
        .map(|c| u32::try_from(c).map_err(|_| Error::validation("negative RLE run")))
        .collect()
}

/// Point-sampled membership test in image pixel coordinates.
enum Region {
    Polygons(Vec<Vec<(f64, f64)>>),
    /// Column-major binary raster of `height x width`.
    Raster { height: usize, width: usize, bits: Vec<bool> },
}

impl Region {
    fn from_segmentation(seg: Segmentation) -> Result<Self> {
        match seg {
            Segmentation::Polygons(polys) => Ok(Region::Polygons(
                polys.iter().map(|p| p.chunks_exact(2).map(|c| (c[0], c[1])).collect()).collect(),
            )),
            Segmentation::Rle { size: [h, w], counts } => {
                let runs = match counts {
                    RleCounts::Runs(r) => r,
                    RleCounts::Compressed(s) => decode_rle_string(&s)?,
                };
                let (height, width) = (h as usize, w as usize);
                let mut bits = Vec::with_capacity(height * width);
                for (i, &r) in runs.iter().enumerate() {
                    bits.extend(std::iter::repeat_n(i % 2 == 1, r as usize));
                }
                if bits.len() != height * width {
                    return Err(Error::validation(format!(
                        "RLE covers {} pixels, size is {height}x{width}",
                        bits.len()
                    )));
                }
                Ok(Region::Raster { height, width, bits })
            }
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Region::Polygons(polys) => polys.iter().any(|poly| {
                let mut inside = false;
                let n = poly.len();
                for i in 0..n {
                    let (xi, yi) = poly[i];
                    let (xj, yj) = poly[(i + n - 1) % n];
                    if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                }
                inside
            }),
            Region::Raster { height, width, bits } => {
                let (c, r) = (x.floor(), y.floor());
                if c < 0.0 || r < 0.0 || c as usize >= *width || r as usize >= *height {
                    return false;
                }
                bits[c as usize * height + r as usize]
            }
        }
    }
}

/// Filtered images from one annotation file, produced lazily. Image files
/// are only decoded when an image directory is attached.
pub struct AnnotationStream {
    spec: DatasetSpec,
    vocabulary: Vocabulary,
    images: std::vec::IntoIter<CocoImage>,
    annotations: HashMap<u64, Vec<CocoAnnotation>>,
    category_index: BTreeMap<u64, usize>,
    image_dir: Option<PathBuf>,
    stats: FilterStats,
}

fn records<T: DeserializeOwned>(values: Vec<serde_json::Value>, list: &str) -> Result<Vec<T>> {
    values
        .into_iter()
        .enumerate()
        .map(|(index, v)| {
            serde_path_to_error::deserialize(v).map_err(|e| Error::Record {
                index,
                message: format!("{list}: {} at `{}`", e.inner(), e.path()),
            })
        })
        .collect()
}

/// Parse a COCO annotation document. An empty file gives an empty stream.
pub fn load_annotations(path: &Path, spec: &DatasetSpec) -> Result<AnnotationStream> {
    spec.validate()?;
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: CocoFile = if text.trim().is_empty() { CocoFile::default() } else { serde_json::from_str(&text)? };
    let images: Vec<CocoImage> = records(file.images, "images")?;
    let anns: Vec<CocoAnnotation> = records(file.annotations, "annotations")?;
    let mut cats: Vec<CocoCategory> = records(file.categories, "categories")?;
    cats.sort_by_key(|c| c.id);

    let category_index: BTreeMap<u64, usize> = cats.iter().enumerate().map(|(i, c)| (c.id, i)).collect();
    let vocabulary = Vocabulary::new(cats.into_iter().map(|c| c.name).collect(), Vec::new())?;
    let known: HashSet<u64> = images.iter().map(|i| i.id).collect();
    let mut annotations: HashMap<u64, Vec<CocoAnnotation>> = HashMap::new();
    for (index, a) in anns.into_iter().enumerate() {
        if !known.contains(&a.image_id) {
            return Err(Error::Record { index, message: format!("annotations: unknown image_id {}", a.image_id) });
        }
        if !category_index.contains_key(&a.category_id) {
            return Err(Error::Record { index, message: format!("annotations: unknown category_id {}", a.category_id) });
        }
        annotations.entry(a.image_id).or_default().push(a);
    }
    Ok(AnnotationStream {
        spec: spec.clone(),
        vocabulary,
        images: images.into_iter(),
        annotations,
        category_index,
        image_dir: None,
        stats: FilterStats::default(),
    })
}

impl AnnotationStream {
    /// Resolve each image's `file_name` against `dir` and attach its pixels.
    pub fn with_images(mut self, dir: impl Into<PathBuf>) -> Self {
        self.image_dir = Some(dir.into());
        self
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    /// Counts for everything pulled from the stream so far.
    pub fn stats(&self) -> FilterStats {
        self.stats
    }

    fn object(&self, ann: CocoAnnotation, img: &CocoImage) -> Result<Option<AnnotatedObject>> {
        let (w, h) = (img.width as f64, img.height as f64);
        let [bx, by, bw, bh] = ann.bbox;
        let Ok(bbox) = BBox::clamped(bx / w, by / h, (bx + bw) / w, (by + bh) / h) else {
            return Ok(None);
        };
        let m = self.spec.mask_size;
        let mask = match ann.segmentation {
            None => None,
            Some(seg) => {
                let region = Region::from_segmentation(seg)?;
                Some(Tensor::from_fn(&[m, m], |k| {
                    let (a, b) = (k / m, k % m);
                    let x = (bbox.x0 + (b as f64 + 0.5) / m as f64 * bbox.width()) * w;
                    let y = (bbox.y0 + (a as f64 + 0.5) / m as f64 * bbox.height()) * h;
                    region.contains(x, y) as u8 as f64
                }))
            }
        };
        Ok(Some(AnnotatedObject { category: self.category_index[&ann.category_id], bbox, mask }))
    }

    /// The image with its usable objects, plus how many annotations had
    /// degenerate boxes and were dropped as below any area threshold.
    fn assemble(&mut self, img: CocoImage) -> Result<(AnnotatedImage, usize)> {
        let anns = self.annotations.remove(&img.id).unwrap_or_default();
        let mut objects = Vec::with_capacity(anns.len());
        let mut degenerate = 0;
        for ann in anns.into_iter().filter(|a| a.iscrowd == 0) {
            match self.object(ann, &img)? {
                Some(o) => objects.push(o),
                None => degenerate += 1,
            }
        }
        let pixels = match &self.image_dir {
            Some(dir) => Some(imageio::read_resized(&dir.join(&img.file_name), self.spec.image_size)?.map(|x| (x + 1.0) / 2.0)),
            None => None,
        };
        Ok((AnnotatedImage { image_id: img.id, pixels, objects }, degenerate))
    }
}

impl Iterator for AnnotationStream {
    type Item = Result<AnnotatedImage>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let img = self.images.next()?;
            let (candidate, degenerate) = match self.assemble(img) {
                Ok(x) => x,
                Err(e) => return Some(Err(e)),
            };
            let before = candidate.objects.len();
            let (kept, outcome) = apply_filters(candidate, &self.spec);
            self.stats.record(before + degenerate, outcome.with_extra_removed(degenerate));
            if let Some(img) = kept {
                return Some(Ok(img));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn write(dir: &Path, doc: &serde_json::Value) -> PathBuf {
        let p = dir.join("ann.json");
        std::fs::write(&p, doc.to_string()).unwrap();
        p
    }

    fn ann(image_id: u64, category_id: u64, bbox: [f64; 4]) -> serde_json::Value {
        json!({"id": 1, "image_id": image_id, "category_id": category_id, "bbox": bbox, "iscrowd": 0})
    }

    #[test]
    fn filters_small_objects_then_counts() {
        let dir = tempfile::tempdir().unwrap();
        let big = [0.0, 0.0, 30.0, 30.0];
        let tiny = [0.0, 0.0, 5.0, 5.0];
        let mut anns: Vec<_> = (0..8).map(|_| ann(1, 1, big)).collect();
        anns.push(ann(1, 2, tiny));
        anns.push(ann(1, 2, tiny));
        anns.extend([ann(2, 1, big), ann(2, 1, big), ann(2, 1, tiny)]);
        let doc = json!({
            "images": [{"id": 1, "width": 100, "height": 100, "file_name": "a.png"},
                       {"id": 2, "width": 100, "height": 100, "file_name": "b.png"}],
            "annotations": anns,
            "categories": [{"id": 2, "name": "cat"}, {"id": 1, "name": "dog"}],
        });
        let mut stream = load_annotations(&write(dir.path(), &doc), &DatasetSpec::default()).unwrap();
        assert_eq!(stream.vocabulary().categories(), ["dog", "cat"]);
        let got: Vec<_> = stream.by_ref().collect::<Result<_>>().unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].image_id, 1);
        assert_eq!(got[0].objects.len(), 8);
        let s = stream.stats();
        assert_eq!((s.images_seen, s.images_kept, s.images_too_few_objects), (2, 1, 1));
        assert_eq!(s.objects_below_area, 3);
    }

    #[test]
    fn empty_file_is_empty_stream() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.json");
        std::fs::write(&p, "").unwrap();
        assert_eq!(load_annotations(&p, &DatasetSpec::default()).unwrap().count(), 0);
        assert!(load_annotations(&dir.path().join("missing.json"), &DatasetSpec::default()).is_err());
    }

    #[test]
    fn malformed_and_mismatched_records_are_indexed() {
        let dir = tempfile::tempdir().unwrap();
        let doc = json!({
            "images": [{"id": 1, "width": 10, "height": 10}],
            "annotations": [ann(1, 1, [0.0, 0.0, 5.0, 5.0]), {"image_id": 1, "category_id": 1, "bbox": "wide"}],
            "categories": [{"id": 1, "name": "a"}],
        });
        match load_annotations(&write(dir.path(), &doc), &DatasetSpec::default()) {
            Err(Error::Record { index: 1, message }) => assert!(message.contains("bbox"), "{message}"),
            other => panic!("{:?}", other.map(|_| ())),
        }
        let doc = json!({
            "images": [{"id": 1, "width": 10, "height": 10}],
            "annotations": [ann(1, 1, [0.0, 0.0, 5.0, 5.0]), ann(7, 1, [0.0, 0.0, 5.0, 5.0])],
            "categories": [{"id": 1, "name": "a"}],
        });
        match load_annotations(&write(dir.path(), &doc), &DatasetSpec::default()) {
            Err(Error::Record { index: 1, message }) => assert!(message.contains("image_id 7"), "{message}"),
            other => panic!("{:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn segmentations_become_box_cropped_masks() {
        let dir = tempfile::tempdir().unwrap();
        // A right triangle filling the lower-left half of its box, and the
        // same region as an uncompressed RLE.
        let poly = json!([[0.0, 0.0, 0.0, 40.0, 40.0, 40.0]]);
        let (h, w) = (40u32, 40u32);
        let mut bits = vec![0u8; 1600];
        for c in 0..40usize {
            for r in 0..40usize {
                if r as f64 + 0.5 > c as f64 + 0.5 {
                    bits[c * 40 + r] = 1;
                }
            }
        }
        let mut runs = Vec::new();
        let (mut cur, mut len) = (0u8, 0u32);
        for &b in &bits {
            if b == cur {
                len += 1;
            } else {
                runs.push(len);
                cur = b;
                len = 1;
            }
        }
        runs.push(len);
        let mut anns = vec![];
        for seg in [poly, json!({"size": [h, w], "counts": runs})] {
            anns.push(json!({"image_id": 1, "category_id": 1, "bbox": [0.0, 0.0, 40.0, 40.0], "segmentation": seg}));
        }
        anns.push(ann(1, 1, [0.0, 0.0, 20.0, 20.0]));
        let doc = json!({"images": [{"id": 1, "width": 40, "height": 40}], "annotations": anns, "categories": [{"id": 1, "name": "a"}]});
        let spec = DatasetSpec { mask_size: 4, ..Default::default() };
        let img = load_annotations(&write(dir.path(), &doc), &spec).unwrap().next().unwrap().unwrap();
        let expect = Tensor::from_fn(&[4, 4], |k| ((k / 4) > (k % 4)) as u8 as f64);
        assert_eq!(img.objects[0].mask.as_ref().unwrap(), &expect);
        assert_eq!(img.objects[1].mask.as_ref().unwrap(), &expect);
        assert!(img.objects[2].mask.is_none());
        assert!((img.objects[0].area_fraction() - 6.0 / 16.0).abs() < 1e-12);
    }

    #[test]
    fn compressed_rle_decodes() {
        // Runs [3, 2, 10] encoded in the compact alphabet.
        assert_eq!(decode_rle_string("32:").unwrap(), vec![3, 2, 10]);
    }

    #[test]
    fn image_files_are_loaded_and_resized() {
        let dir = tempfile::tempdir().unwrap();
        let pixels = Tensor::full(&[3, 20, 30], 1.0);
        imageio::write_png(&dir.path().join("x.png"), &pixels).unwrap();
        let anns: Vec<_> = (0..3).map(|_| ann(5, 1, [0.0, 0.0, 15.0, 10.0])).collect();
        let doc = json!({"images": [{"id": 5, "width": 30, "height": 20, "file_name": "x.png"}], "annotations": anns, "categories": [{"id": 1, "name": "a"}]});
        let spec = DatasetSpec { image_size: 16, ..Default::default() };
        let img = load_annotations(&write(dir.path(), &doc), &spec).unwrap().with_images(dir.path()).next().unwrap().unwrap();
        let px = img.pixels.unwrap();
        assert_eq!(px.shape(), [3, 16, 16]);
        assert!(px.data().iter().all(|&x| (x - 1.0).abs() < 1e-9));
        assert_eq!(img.objects[0].bbox, BBox::new(0.0, 0.0, 0.5, 0.5).unwrap());
    }
}
