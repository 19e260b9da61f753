//! Annotated images, the object filters applied to them, and conversion
//! into training examples.

mod coco;
mod store;
mod synth;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use coco::{load_annotations, AnnotationStream};
pub use store::{load_dataset, write_dataset, Dataset, Manifest, ManifestEntry, ObjectDocument};
pub use synth::{synth_shapes, synth_vocabulary, Shape, COLORS};

use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::sgraph::{build_graph, make_splits_with, BBox, GraphSequence, NodeId, SceneGraph, DEFAULT_SPLIT_STEPS};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub min_object_area_fraction: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    pub image_size: usize,
    /// Side of the per-object mask raster, cropped to the object's box.
    pub mask_size: usize,
    /// Fraction of ordered object pairs that receive a relation edge.
    pub edge_density: f64,
    pub steps: usize,
    pub split: String,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            min_object_area_fraction: 0.02,
            min_objects: 3,
            max_objects: 8,
            image_size: 64,
            mask_size: 16,
            edge_density: 0.5,
            steps: DEFAULT_SPLIT_STEPS,
            split: "train".into(),
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.min_object_area_fraction) {
            return Err(Error::validation(format!(
                "min_object_area_fraction {} outside [0, 1)",
                self.min_object_area_fraction
            )));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::validation(format!(
                "object count range {}..={} is empty",
                self.min_objects, self.max_objects
            )));
        }
        if self.image_size < 8 || self.mask_size == 0 || self.steps == 0 {
            return Err(Error::validation("image_size must be at least 8, mask_size and steps positive"));
        }
        if !(self.edge_density > 0.0 && self.edge_density <= 1.0) {
            return Err(Error::validation(format!("edge_density {} outside (0, 1]", self.edge_density)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedObject {
    pub category: usize,
    pub bbox: BBox,
    /// `[m, m]` raster in `[0, 1]` covering the box only.
    pub mask: Option<Tensor>,
}

impl AnnotatedObject {
    /// Covered fraction of the image: from the mask when present, else the box.
    pub fn area_fraction(&self) -> f64 {
        match &self.mask {
            Some(m) => self.bbox.area() * m.mean(),
            None => self.bbox.area(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedImage {
    pub image_id: u64,
    /// `[3, S, S]` in `[0, 1]`; absent when annotations were loaded without
    /// their image files.
    pub pixels: Option<Tensor>,
    pub objects: Vec<AnnotatedObject>,
}

/// Why an image was dropped, if it was.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterOutcome {
    Kept { removed_objects: usize },
    TooFew { remaining: usize, removed_objects: usize },
    TooMany { remaining: usize, removed_objects: usize },
}

impl FilterOutcome {
    pub fn with_extra_removed(self, n: usize) -> Self {
        match self {
            FilterOutcome::Kept { removed_objects } => FilterOutcome::Kept { removed_objects: removed_objects + n },
            FilterOutcome::TooFew { remaining, removed_objects } => {
                FilterOutcome::TooFew { remaining, removed_objects: removed_objects + n }
            }
            FilterOutcome::TooMany { remaining, removed_objects } => {
                FilterOutcome::TooMany { remaining, removed_objects: removed_objects + n }
            }
        }
    }
}

/// Remove small objects, then enforce the object-count range.
pub fn apply_filters(img: AnnotatedImage, spec: &DatasetSpec) -> (Option<AnnotatedImage>, FilterOutcome) {
    let before = img.objects.len();
    let objects: Vec<_> = img
        .objects
        .into_iter()
        .filter(|o| o.area_fraction() >= spec.min_object_area_fraction)
        .collect();
    let removed_objects = before - objects.len();
    let remaining = objects.len();
    if remaining < spec.min_objects {
        return (None, FilterOutcome::TooFew { remaining, removed_objects });
    }
    if remaining > spec.max_objects {
        return (None, FilterOutcome::TooMany { remaining, removed_objects });
    }
    (Some(AnnotatedImage { objects, ..img }), FilterOutcome::Kept { removed_objects })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterStats {
    pub images_seen: usize,
    pub images_kept: usize,
    pub images_too_few_objects: usize,
    pub images_too_many_objects: usize,
    pub objects_seen: usize,
    pub objects_below_area: usize,
    pub objects_kept: usize,
}

impl FilterStats {
    pub fn record(&mut self, objects_before: usize, outcome: FilterOutcome) {
        self.images_seen += 1;
        self.objects_seen += objects_before;
        match outcome {
            FilterOutcome::Kept { removed_objects } => {
                self.images_kept += 1;
                self.objects_below_area += removed_objects;
                self.objects_kept += objects_before - removed_objects;
            }
            FilterOutcome::TooFew { removed_objects, .. } => {
                self.images_too_few_objects += 1;
                self.objects_below_area += removed_objects;
            }
            FilterOutcome::TooMany { removed_objects, .. } => {
                self.images_too_many_objects += 1;
                self.objects_below_area += removed_objects;
            }
        }
    }
}

/// One training sequence with its only supervision: the final image and
/// per-object boxes and masks. Intermediate images have no field here.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub image_id: u64,
    pub sequence: GraphSequence,
    /// `[3, S, S]` in `[-1, 1]`.
    pub image: Tensor,
    pub boxes: BTreeMap<NodeId, BBox>,
    pub masks: BTreeMap<NodeId, Tensor>,
}

impl TrainingExample {
    pub fn final_graph(&self) -> &SceneGraph {
        self.sequence.last().expect("sequences are non-empty")
    }
}

/// Node `i` of the graph is object `i` of the image.
pub fn scene_graph_for(img: &AnnotatedImage, spec: &DatasetSpec, seed: u64) -> Result<SceneGraph> {
    let objects: Vec<_> = img
        .objects
        .iter()
        .enumerate()
        .map(|(i, o)| (NodeId(i as u32), o.category, o.bbox))
        .collect();
    build_graph(&objects, spec.edge_density, derive_seed(seed, 2 * img.image_id))
}

pub fn make_training_example(img: &AnnotatedImage, spec: &DatasetSpec, seed: u64) -> Result<TrainingExample> {
    let pixels = img
        .pixels
        .as_ref()
        .ok_or_else(|| Error::validation(format!("image {} has no pixels", img.image_id)))?;
    pixels.check_shape("make_training_example", &[3, spec.image_size, spec.image_size])?;
    let graph = scene_graph_for(img, spec, seed)?;
    let sequence = make_splits_with(&graph, spec.steps, derive_seed(seed, 2 * img.image_id + 1))?;
    let m = spec.mask_size;
    let mut boxes = BTreeMap::new();
    let mut masks = BTreeMap::new();
    for (i, o) in img.objects.iter().enumerate() {
        let id = NodeId(i as u32);
        boxes.insert(id, o.bbox);
        let mask = match &o.mask {
            Some(mask) => {
                mask.check_shape("make_training_example", &[m, m])?;
                mask.clone()
            }
            None => Tensor::ones(&[m, m]),
        };
        masks.insert(id, mask);
    }
    Ok(TrainingExample {
        image_id: img.image_id,
        sequence,
        image: pixels.map(|x| 2.0 * x - 1.0),
        boxes,
        masks,
    })
}
