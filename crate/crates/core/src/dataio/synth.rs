//! Deterministic renders of flat-coloured squares, circles and triangles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{scene_graph_for, AnnotatedImage, AnnotatedObject, DatasetSpec};
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::sgraph::{BBox, SceneGraph, Vocabulary};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }

    /// Whether `(u, v)`, relative to the shape's frame in `[0, 1]^2`, is covered.
    /// Triangles point up.
    pub fn covers(self, u: f64, v: f64) -> bool {
        if !(0.0..1.0).contains(&u) || !(0.0..1.0).contains(&v) {
            return false;
        }
        match self {
            Shape::Square => true,
            Shape::Circle => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
            Shape::Triangle => (u - 0.5).abs() <= 0.5 * v,
        }
    }
}

pub const COLORS: [(&str, [f64; 3]); 3] = [
    ("red", [0.9, 0.15, 0.15]),
    ("green", [0.15, 0.75, 0.2]),
    ("blue", [0.2, 0.3, 0.95]),
];

/// Category `colour_index * 3 + shape_index`, named `"{colour} {shape}"`.
pub fn synth_vocabulary() -> Vocabulary {
    let names = COLORS
        .iter()
        .flat_map(|(c, _)| Shape::ALL.iter().map(move |s| format!("{c} {}", s.name())))
        .collect();
    Vocabulary::new(names, Vec::new()).expect("synthetic category names are unique")
}

#[derive(Clone, Copy, Debug)]
struct Placed {
    shape: Shape,
    color: usize,
    /// Continuous frame `(x0, y0, w, h)` in normalized units.
    frame: [f64; 4],
}

impl Placed {
    fn covers(&self, x: f64, y: f64) -> bool {
        let [x0, y0, w, h] = self.frame;
        self.shape.covers((x - x0) / w, (y - y0) / h)
    }

    /// Pixel-centre raster on an `s x s` grid.
    fn raster(&self, s: usize) -> Vec<bool> {
        let mut out = vec![false; s * s];
        for i in 0..s {
            for j in 0..s {
                out[i * s + j] = self.covers((j as f64 + 0.5) / s as f64, (i as f64 + 0.5) / s as f64);
            }
        }
        out
    }
}

/// Tight normalized bound of a raster, or `None` if it is empty.
pub(crate) fn raster_bound(raster: &[bool], s: usize) -> Option<BBox> {
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for (k, _) in raster.iter().enumerate().filter(|(_, &on)| on) {
        let (r, c) = (k / s, k % s);
        r0 = r0.min(r);
        r1 = r1.max(r);
        c0 = c0.min(c);
        c1 = c1.max(c);
    }
    if r0 == usize::MAX {
        return None;
    }
    let f = s as f64;
    BBox::new(c0 as f64 / f, r0 as f64 / f, (c1 + 1) as f64 / f, (r1 + 1) as f64 / f).ok()
}

fn overlap(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let w = (a[0] + a[2]).min(b[0] + b[2]) - a[0].max(b[0]);
    let h = (a[1] + a[3]).min(b[1] + b[3]) - a[1].max(b[1]);
    w.max(0.0) * h.max(0.0)
}

fn place(rng: &mut ChaCha8Rng, existing: &[Placed], spec: &DatasetSpec) -> Placed {
    let s = spec.image_size;
    let mut candidate = None;
    for _ in 0..200 {
        let shape = Shape::ALL[rng.random_range(0..3)];
        let color = rng.random_range(0..COLORS.len());
        let w = rng.random_range(0.2..0.42);
        let h = rng.random_range(0.2..0.42);
        let frame = [rng.random_range(0.0..1.0 - w), rng.random_range(0.0..1.0 - h), w, h];
        let p = Placed { shape, color, frame };
        let area = p.raster(s).iter().filter(|&&on| on).count() as f64 / (s * s) as f64;
        if area < spec.min_object_area_fraction {
            continue;
        }
        let crowded = existing
            .iter()
            .any(|e| overlap(&e.frame, &frame) > 0.3 * (w * h).min(e.frame[2] * e.frame[3]));
        candidate = Some(p);
        if !crowded {
            break;
        }
    }
    candidate.expect("frames of at least 0.2 x 0.2 always clear the default area threshold")
}

/// Shapes in painting order plus the background level.
fn sample_scene(img_id: u64, seed: u64, spec: &DatasetSpec) -> (Vec<Placed>, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, img_id));
    let count = rng.random_range(spec.min_objects..=spec.max_objects);
    let mut placed: Vec<Placed> = Vec::with_capacity(count);
    for _ in 0..count {
        let p = place(&mut rng, &placed, spec);
        placed.push(p);
    }
    (placed, rng.random_range(0.35..0.65))
}

fn render(img_id: u64, seed: u64, spec: &DatasetSpec) -> Result<AnnotatedImage> {
    let (placed, gray) = sample_scene(img_id, seed, spec);
    let count = placed.len();
    let s = spec.image_size;
    let mut pixels = Tensor::full(&[3, s, s], gray);
    let m = spec.mask_size;
    let mut objects = Vec::with_capacity(count);
    for p in &placed {
        let raster = p.raster(s);
        let rgb = COLORS[p.color].1;
        for (k, _) in raster.iter().enumerate().filter(|(_, &on)| on) {
            for (c, v) in rgb.iter().enumerate() {
                pixels.data_mut()[c * s * s + k] = *v;
            }
        }
        let bbox = raster_bound(&raster, s)
            .ok_or_else(|| Error::validation("placed shape covers no pixels"))?;
        let mask = Tensor::from_fn(&[m, m], |k| {
            let (a, b) = (k / m, k % m);
            let x = bbox.x0 + (b as f64 + 0.5) / m as f64 * bbox.width();
            let y = bbox.y0 + (a as f64 + 0.5) / m as f64 * bbox.height();
            p.covers(x, y) as u8 as f64
        });
        let category = p.color * Shape::ALL.len() + Shape::ALL.iter().position(|&x| x == p.shape).unwrap();
        objects.push(AnnotatedObject { category, bbox, mask: Some(mask) });
    }
    Ok(AnnotatedImage { image_id: img_id, pixels: Some(pixels), objects })
}

/// `count` rendered images with ids `0..count`, each with its full scene
/// graph. Masks are amodal: later shapes paint over earlier ones in the
/// image but not in the masks.
pub fn synth_shapes(count: usize, seed: u64, spec: &DatasetSpec) -> Result<Vec<(AnnotatedImage, SceneGraph)>> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::validation("synth_shapes needs count >= 1"));
    }
    (0..count as u64)
        .map(|id| {
            let img = render(id, seed, spec)?;
            let graph = scene_graph_for(&img, spec, seed)?;
            Ok((img, graph))
        })
        .collect()
}
