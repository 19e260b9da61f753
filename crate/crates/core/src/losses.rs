//! Pixel and perceptual losses, the frozen perceptual feature extractor and
//! the weighted generator objective.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::layoutnet::{box_loss, mask_loss, ObjectLayout};
use crate::nn::Init;
use crate::sgraph::{BBox, NodeId};
use crate::tensor::Tensor;

const FEATURE_EPS: f64 = 1e-10;

/// Anything that maps a `[3, H, W]` image to a list of `[C, h, w]` feature
/// maps. Implemented by [`PerceptualExtractor`]; a pretrained network can be
/// plugged in instead.
pub trait FeatureExtractor {
    fn features(&self, image: &Var) -> Vec<Var>;
}

/// Small convolutional pyramid with frozen random weights.
#[derive(Clone, Debug)]
pub struct PerceptualExtractor {
    layers: Vec<(Tensor, Tensor)>,
}

impl PerceptualExtractor {
    pub const DEFAULT_SEED: u64 = 0x5eed_f00d;

    pub fn new(seed: u64) -> Self {
        let mut init = Init::new(seed);
        let widths = [(3, 8), (8, 16), (16, 16)];
        let layers = widths
            .iter()
            .map(|&(i, o)| {
                let w = init.fan_in(&[o, i, 3, 3], i * 9);
                let b = init.uniform(&[o], 0.1);
                (w, b)
            })
            .collect();
        Self { layers }
    }
}

impl Default for PerceptualExtractor {
    fn default() -> Self {
        Self::new(Self::DEFAULT_SEED)
    }
}

impl FeatureExtractor for PerceptualExtractor {
    fn features(&self, image: &Var) -> Vec<Var> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut x = image.clone();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            if i > 0 {
                x = x.avg_pool2();
            }
            x = x.conv2d(&Var::constant(w.clone()), Some(&Var::constant(b.clone())), 1, 1).leaky_relu(0.2);
            out.push(x.clone());
        }
        out
    }
}

fn same_shape(op: &'static str, a: &Var, b: &Var) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape { op, expected: a.shape().to_vec(), actual: b.shape().to_vec() });
    }
    Ok(())
}

/// Mean absolute difference.
pub fn pixel_loss(a: &Var, b: &Var) -> Result<Var> {
    same_shape("pixel_loss", a, b)?;
    Ok(a.sub(b).abs().mean())
}

/// Sum over feature layers of the mean squared distance between
/// channel-normalized feature maps.
pub fn perceptual_loss(a: &Var, b: &Var, extractor: &dyn FeatureExtractor) -> Result<Var> {
    same_shape("perceptual_loss", a, b)?;
    let fa = extractor.features(a);
    let fb = extractor.features(b);
    Ok(fa
        .iter()
        .zip(&fb)
        .map(|(x, y)| {
            x.channel_unit_normalize(FEATURE_EPS)
                .sub(&y.channel_unit_normalize(FEATURE_EPS))
                .square()
                .mean()
        })
        .reduce(|s, t| s.add(&t))
        .expect("extractor yields at least one layer"))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub gan: f64,
    #[serde(rename = "box")]
    pub bbox: f64,
    pub mask: f64,
    pub pixel: f64,
    pub pixel_step: f64,
    pub perceptual: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gan: 0.01,
            bbox: 10.0,
            mask: 0.1,
            pixel: 1.0,
            pixel_step: 0.5,
            perceptual: 1.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self { gan: 0.0, bbox: 0.0, mask: 0.0, pixel: 0.0, pixel_step: 0.0, perceptual: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.gan, self.bbox, self.mask, self.pixel, self.pixel_step, self.perceptual];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::validation(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Unweighted value of every generator loss term plus the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub gan: f64,
    #[serde(rename = "box")]
    pub bbox: f64,
    pub mask: f64,
    pub pixel: f64,
    pub pixel_step: f64,
    pub perceptual: f64,
    pub total: f64,
}

impl LossReport {
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        w.gan * self.gan
            + w.bbox * self.bbox
            + w.mask * self.mask
            + w.pixel * self.pixel
            + w.pixel_step * self.pixel_step
            + w.perceptual * self.perceptual
    }

    pub fn is_finite(&self) -> bool {
        [self.gan, self.bbox, self.mask, self.pixel, self.pixel_step, self.perceptual, self.total]
            .iter()
            .all(|x| x.is_finite())
    }

    /// Element-wise mean of several reports.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let mut m = LossReport::default();
        for r in reports {
            m.gan += r.gan / n;
            m.bbox += r.bbox / n;
            m.mask += r.mask / n;
            m.pixel += r.pixel / n;
            m.pixel_step += r.pixel_step / n;
            m.perceptual += r.perceptual / n;
            m.total += r.total / n;
        }
        m
    }
}

/// What the generator produced at one step of a sequence.
#[derive(Clone, Debug)]
pub struct StepOutput {
    /// `[3, S, S]` image.
    pub image: Var,
    /// Predicted layouts of every object present at this step.
    pub objects: Vec<ObjectLayout>,
    /// Generator-side adversarial loss for this step's image.
    pub adversarial: Var,
}

/// Supervision for one sequence: the final image plus boxes and masks for
/// every object. There is deliberately no slot for intermediate images.
#[derive(Clone, Copy, Debug)]
pub struct LossTargets<'a> {
    pub image: &'a Tensor,
    pub boxes: &'a BTreeMap<NodeId, BBox>,
    pub masks: &'a BTreeMap<NodeId, Tensor>,
}

fn mean_of(vars: Vec<Var>) -> Var {
    let n = vars.len();
    vars.into_iter()
        .reduce(|a, b| a.add(&b))
        .map(|s| s.scale(1.0 / n as f64))
        .unwrap_or_else(|| Var::constant(Tensor::scalar(0.0)))
}

fn sum_of(vars: Vec<Var>) -> Var {
    vars.into_iter()
        .reduce(|a, b| a.add(&b))
        .unwrap_or_else(|| Var::constant(Tensor::scalar(0.0)))
}

/// The weighted generator objective over one rolled-out sequence.
///
/// Adversarial, box and mask terms are averaged over steps; the step-to-step
/// pixel term and the perceptual term against the target are summed over
/// transitions and over non-final steps respectively.
pub fn total_generator_loss(
    steps: &[StepOutput],
    targets: &LossTargets<'_>,
    weights: &LossWeights,
    extractor: &dyn FeatureExtractor,
) -> Result<(Var, LossReport)> {
    let last = steps.last().ok_or_else(|| Error::validation("no generated steps to score"))?;
    let target = Var::constant(targets.image.clone());

    let gan = mean_of(steps.iter().map(|s| s.adversarial.clone()).collect());
    let bbox = mean_of(steps.iter().map(|s| box_loss(&s.objects, targets.boxes)).collect::<Result<_>>()?);
    let mask = mean_of(steps.iter().map(|s| mask_loss(&s.objects, targets.masks)).collect::<Result<_>>()?);
    let pixel = pixel_loss(&last.image, &target)?;
    let pixel_step = sum_of(
        steps
            .windows(2)
            .map(|w| pixel_loss(&w[1].image, &w[0].image))
            .collect::<Result<_>>()?,
    );
    let perceptual = sum_of(
        steps[..steps.len() - 1]
            .iter()
            .map(|s| perceptual_loss(&s.image, &target, extractor))
            .collect::<Result<_>>()?,
    );

    let total = gan
        .scale(weights.gan)
        .add(&bbox.scale(weights.bbox))
        .add(&mask.scale(weights.mask))
        .add(&pixel.scale(weights.pixel))
        .add(&pixel_step.scale(weights.pixel_step))
        .add(&perceptual.scale(weights.perceptual));
    let report = LossReport {
        gan: gan.item(),
        bbox: bbox.item(),
        mask: mask.item(),
        pixel: pixel.item(),
        pixel_step: pixel_step.item(),
        perceptual: perceptual.item(),
        total: total.item(),
    };
    Ok((total, report))
}
