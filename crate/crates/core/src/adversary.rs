//! Image-level and object-level discriminators and the adversarial loss.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, Init, Linear, ParamStore};
use crate::sgraph::BBox;
use crate::tensor::Tensor;

const SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscConfig {
    /// Widths of the stride-2 convolutions of the patch discriminator.
    pub image_channels: Vec<usize>,
    /// Widths of the stride-2 convolutions applied to each object crop.
    pub object_channels: Vec<usize>,
    pub crop_size: usize,
}

impl Default for DiscConfig {
    fn default() -> Self {
        Self {
            image_channels: vec![16, 32, 32],
            object_channels: vec![16, 32, 32],
            crop_size: 32,
        }
    }
}

impl DiscConfig {
    pub fn validate(&self, image_size: usize) -> Result<()> {
        let fits = |n: usize, size: usize| n > 0 && size % (1 << n) == 0;
        if !fits(self.image_channels.len(), image_size) {
            return Err(Error::validation(format!(
                "{} image discriminator layers do not divide resolution {image_size}",
                self.image_channels.len()
            )));
        }
        if !fits(self.object_channels.len(), self.crop_size) {
            return Err(Error::validation(format!(
                "{} object discriminator layers do not divide crop size {}",
                self.object_channels.len(),
                self.crop_size
            )));
        }
        Ok(())
    }

    pub fn patch_grid(&self, image_size: usize) -> usize {
        image_size >> self.image_channels.len()
    }
}

#[derive(Clone, Debug)]
pub struct DiscOutput {
    /// Realism logits: `[1, g, g]` patches for images, `[n, 1]` for crops.
    pub realism: Var,
    /// `[n, C]` category logits, object level only.
    pub class_logits: Option<Var>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Generator,
    Discriminator,
}

fn conv_stack(store: &mut ParamStore, init: &mut Init, prefix: &str, widths: &[usize]) -> Vec<Conv2d> {
    let mut input = 3;
    widths
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let conv = Conv2d::new(store, init, &format!("{prefix}.conv{i}"), input, w, 4, 2, 1);
            input = w;
            conv
        })
        .collect()
}

fn run_stack(p: &Bound, convs: &[Conv2d], x: &Var) -> Var {
    convs.iter().fold(x.clone(), |x, c| c.forward(p, &x).leaky_relu(SLOPE))
}

#[derive(Clone, Debug)]
pub struct Discriminators {
    cfg: DiscConfig,
    image_size: usize,
    image_convs: Vec<Conv2d>,
    image_head: Conv2d,
    object_convs: Vec<Conv2d>,
    object_realism: Linear,
    object_class: Linear,
}

impl Discriminators {
    pub fn new(store: &mut ParamStore, init: &mut Init, cfg: &DiscConfig, image_size: usize, num_categories: usize) -> Self {
        let image_convs = conv_stack(store, init, "d_img", &cfg.image_channels);
        let image_head = Conv2d::new(store, init, "d_img.head", *cfg.image_channels.last().unwrap(), 1, 3, 1, 1);
        let object_convs = conv_stack(store, init, "d_obj", &cfg.object_channels);
        let side = cfg.crop_size >> cfg.object_channels.len();
        let flat = cfg.object_channels.last().unwrap() * side * side;
        Self {
            cfg: cfg.clone(),
            image_size,
            image_convs,
            image_head,
            object_convs,
            object_realism: Linear::new(store, init, "d_obj.realism", flat, 1),
            object_class: Linear::new(store, init, "d_obj.class", flat, num_categories),
        }
    }

    fn check_image(&self, image: &Var) -> Result<()> {
        let want = [3, self.image_size, self.image_size];
        if image.shape() != want {
            return Err(Error::Shape { op: "discriminator", expected: want.to_vec(), actual: image.shape().to_vec() });
        }
        Ok(())
    }

    /// Patch realism logits for a `[3, S, S]` image.
    pub fn d_image(&self, p: &Bound, image: &Var) -> Result<DiscOutput> {
        self.check_image(image)?;
        let x = run_stack(p, &self.image_convs, image);
        Ok(DiscOutput {
            realism: self.image_head.forward(p, &x),
            class_logits: None,
        })
    }

    /// Crop every box to `crop_size`, score it and classify it. `None` when
    /// there are no boxes.
    pub fn d_object(&self, p: &Bound, image: &Var, boxes: &[BBox], categories: &[usize]) -> Result<Option<DiscOutput>> {
        self.check_image(image)?;
        if boxes.len() != categories.len() {
            return Err(Error::validation(format!("{} boxes but {} categories", boxes.len(), categories.len())));
        }
        if boxes.is_empty() {
            return Ok(None);
        }
        let rows: Vec<Var> = crop_objects(image, boxes, self.cfg.crop_size)?
            .iter()
            .map(|crop| {
                let f = run_stack(p, &self.object_convs, crop);
                let n = f.value().len();
                f.reshape(&[1, n])
            })
            .collect();
        let features = Var::concat(&rows, 0);
        Ok(Some(DiscOutput {
            realism: self.object_realism.forward(p, &features),
            class_logits: Some(self.object_class.forward(p, &features)),
        }))
    }
}

/// Bilinear crops of each box, resized to `size x size`.
pub fn crop_objects(image: &Var, boxes: &[BBox], size: usize) -> Result<Vec<Var>> {
    boxes
        .iter()
        .map(|b| {
            b.validate()?;
            Ok(image.crop_resize(b.to_array(), size))
        })
        .collect()
}

/// Adversarial loss on logits. The discriminator side is the binary cross
/// entropy of real scores against 1 plus fake scores against 0; the
/// generator side is the non-saturating `-log D(fake)`. Absent score sets
/// contribute nothing.
pub fn gan_loss(real: Option<&Var>, fake: Option<&Var>, side: Side) -> Var {
    let term = |v: Option<&Var>, target: f64| {
        v.map(|v| v.bce_with_logits(&Tensor::full(v.shape(), target)))
    };
    let parts: Vec<Var> = match side {
        Side::Discriminator => [term(real, 1.0), term(fake, 0.0)].into_iter().flatten().collect(),
        Side::Generator => term(fake, 1.0).into_iter().collect(),
    };
    parts
        .into_iter()
        .reduce(|a, b| a.add(&b))
        .unwrap_or_else(|| Var::constant(Tensor::scalar(0.0)))
}

/// Flatten and join score tensors so they can share one loss term.
pub fn stack_scores(scores: &[Var]) -> Option<Var> {
    if scores.is_empty() {
        return None;
    }
    let flat: Vec<Var> = scores.iter().map(|s| s.reshape(&[s.value().len()])).collect();
    Some(Var::concat(&flat, 0))
}
