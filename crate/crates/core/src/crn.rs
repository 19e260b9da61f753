//! Cascaded refinement network: renders a layout map plus a noise volume
//! into an RGB image, doubling resolution at every module.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, Init, ParamStore};
use crate::tensor::Tensor;

const NORM_EPS: f64 = 1e-5;
const SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrnConfig {
    pub start_resolution: usize,
    pub output_resolution: usize,
    /// Output channels of each refinement module, one entry per doubling.
    pub channels: Vec<usize>,
    pub noise_channels: usize,
}

impl Default for CrnConfig {
    fn default() -> Self {
        Self {
            start_resolution: 4,
            output_resolution: 64,
            channels: vec![32, 24, 16, 16],
            noise_channels: 8,
        }
    }
}

impl CrnConfig {
    pub fn full_scale() -> Self {
        Self {
            channels: vec![1024, 512, 256, 128],
            ..Self::default()
        }
    }

    pub fn num_modules(&self) -> usize {
        (self.output_resolution / self.start_resolution).trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let ratio_ok = self.start_resolution > 0
            && self.output_resolution % self.start_resolution == 0
            && (self.output_resolution / self.start_resolution).is_power_of_two()
            && self.output_resolution > self.start_resolution;
        if !ratio_ok {
            return Err(Error::validation(format!(
                "output resolution {} must be the start resolution {} times a power of two",
                self.output_resolution, self.start_resolution
            )));
        }
        if self.noise_channels < 3 {
            return Err(Error::validation(format!("need at least 3 noise channels, got {}", self.noise_channels)));
        }
        if self.channels.len() != self.num_modules() || self.channels.contains(&0) {
            return Err(Error::validation(format!(
                "expected {} non-zero module widths, got {:?}",
                self.num_modules(),
                self.channels
            )));
        }
        Ok(())
    }
}

/// Noise for one generation and, after the first step, the image it should
/// stay close to.
#[derive(Clone, Debug)]
pub struct GenContext {
    /// `[3, H, W]` in `[-1, 1]`; a graph node so gradients can reach the
    /// step that produced it.
    pub previous_image: Option<Var>,
    /// `[C_n, H, W]` standard normal samples.
    pub noise: Tensor,
}

impl GenContext {
    /// The generator's noise input with the previous image, if any, written
    /// over channels 0..2.
    pub fn noise_input(&self) -> Var {
        let noise = Var::constant(self.noise.clone());
        match &self.previous_image {
            None => noise,
            Some(prev) => {
                let c = self.noise.dim(0);
                Var::concat(&[prev.clone(), noise.narrow(0, 3, c - 3)], 0)
            }
        }
    }
}

pub fn make_context(cfg: &CrnConfig, previous: Option<Var>, seed: u64) -> Result<GenContext> {
    let s = cfg.output_resolution;
    if let Some(prev) = &previous {
        if prev.shape() != [3, s, s] {
            return Err(Error::Shape {
                op: "make_context",
                expected: vec![3, s, s],
                actual: prev.shape().to_vec(),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Tensor::from_fn(&[cfg.noise_channels, s, s], |_| StandardNormal.sample(&mut rng));
    Ok(GenContext { previous_image: previous, noise })
}

#[derive(Clone, Debug)]
struct RefinementModule {
    first: Conv2d,
    second: Conv2d,
}

#[derive(Clone, Debug)]
pub struct Crn {
    cfg: CrnConfig,
    layout_dim: usize,
    modules: Vec<RefinementModule>,
    final_conv: Conv2d,
    to_rgb: Conv2d,
}

impl Crn {
    pub fn new(store: &mut ParamStore, init: &mut Init, cfg: &CrnConfig, layout_dim: usize) -> Self {
        let cond = layout_dim + cfg.noise_channels;
        let mut prev = 0;
        let modules = cfg
            .channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let m = RefinementModule {
                    first: Conv2d::new(store, init, &format!("crn.module{i}.conv0"), prev + cond, c, 3, 1, 1),
                    second: Conv2d::new(store, init, &format!("crn.module{i}.conv1"), c, c, 3, 1, 1),
                };
                prev = c;
                m
            })
            .collect();
        let final_conv = Conv2d::new(store, init, "crn.final.conv", prev + cfg.noise_channels, prev, 3, 1, 1);
        let to_rgb = Conv2d::new(store, init, "crn.final.rgb", prev, 3, 1, 1, 0);
        Self {
            cfg: cfg.clone(),
            layout_dim,
            modules,
            final_conv,
            to_rgb,
        }
    }

    pub fn config(&self) -> &CrnConfig {
        &self.cfg
    }

    /// `[D, S, S]` layout to `[3, S, S]` image in `[-1, 1]`.
    pub fn generate(&self, p: &Bound, layout: &Var, ctx: &GenContext) -> Result<Var> {
        self.generate_traced(p, layout, ctx).map(|(img, _)| img)
    }

    /// Like [`Crn::generate`], also returning each module's output shape.
    pub fn generate_traced(&self, p: &Bound, layout: &Var, ctx: &GenContext) -> Result<(Var, Vec<Vec<usize>>)> {
        let s = self.cfg.output_resolution;
        let want = [self.layout_dim, s, s];
        if layout.shape() != want {
            return Err(Error::Shape { op: "crn.generate", expected: want.to_vec(), actual: layout.shape().to_vec() });
        }
        ctx.noise.check_shape("crn.generate", &[self.cfg.noise_channels, s, s])?;
        let noise = ctx.noise_input();
        if let Some(prev) = &ctx.previous_image {
            if prev.shape() != [3, s, s] {
                return Err(Error::Shape { op: "crn.generate", expected: vec![3, s, s], actual: prev.shape().to_vec() });
            }
        }

        // Conditioning pyramid, finest level first.
        let mut pyramid = vec![Var::concat(&[layout.clone(), noise.clone()], 0)];
        while pyramid.last().unwrap().shape()[1] > self.cfg.start_resolution {
            let next = pyramid.last().unwrap().avg_pool2();
            pyramid.push(next);
        }

        let mut trace = Vec::with_capacity(self.modules.len());
        let mut features: Option<Var> = None;
        for (i, m) in self.modules.iter().enumerate() {
            let cond = &pyramid[pyramid.len() - 1 - i];
            let input = match &features {
                Some(f) => Var::concat(&[f.clone(), cond.clone()], 0),
                None => cond.clone(),
            };
            let x = m.first.forward(p, &input).instance_norm(NORM_EPS).leaky_relu(SLOPE);
            let x = m.second.forward(p, &x).instance_norm(NORM_EPS).leaky_relu(SLOPE);
            let x = x.upsample_nearest2();
            trace.push(x.shape().to_vec());
            features = Some(x);
        }
        let features = features.expect("config validated to have at least one module");
        let x = Var::concat(&[features, noise], 0);
        let x = self.final_conv.forward(p, &x).leaky_relu(SLOPE);
        Ok((self.to_rgb.forward(p, &x).tanh(), trace))
    }
}
