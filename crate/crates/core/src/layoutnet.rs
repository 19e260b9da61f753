//! Box and mask regression from object embeddings, and composition of the
//! per-object predictions into a spatial layout map.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::gcn::NodeEmbeddings;
use crate::nn::{Bound, ConvTranspose2d, Init, Linear, ParamStore};
use crate::sgraph::{BBox, NodeId};
use crate::tensor::Tensor;

pub const MASK_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutConfig {
    /// Side of the square per-object mask; `4 * 2^k`.
    pub mask_size: usize,
    pub box_hidden_dim: usize,
    pub mask_channels: usize,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        Self {
            mask_size: 16,
            box_hidden_dim: 64,
            mask_channels: 16,
        }
    }
}

impl LayoutConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.mask_size >= 4 && self.mask_size % 4 == 0 && (self.mask_size / 4).is_power_of_two();
        if !ok {
            return Err(Error::validation(format!("mask size {} must be 4 * 2^k", self.mask_size)));
        }
        Ok(())
    }
}

/// Predicted (or supplied) layout of one object.
#[derive(Clone, Debug)]
pub struct ObjectLayout {
    pub node_id: NodeId,
    /// `[4]` normalized corners `(x0, y0, x1, y1)`.
    pub bbox: Var,
    /// `[m, m]` soft mask in `[0, 1]`.
    pub mask: Var,
    /// `[1, D]` embedding row.
    pub embedding: Var,
}

impl ObjectLayout {
    pub fn bbox_value(&self) -> BBox {
        let b = self.bbox.value().data();
        BBox { x0: b[0], y0: b[1], x1: b[2], y1: b[3] }
    }
}

/// `[D, S, S]` scene layout.
pub type LayoutMap = Var;

#[derive(Clone, Debug)]
pub struct LayoutNet {
    cfg: LayoutConfig,
    box_hidden: Linear,
    box_out: Linear,
    mask_seed: Linear,
    mask_up: Vec<ConvTranspose2d>,
}

impl LayoutNet {
    pub fn new(store: &mut ParamStore, init: &mut Init, cfg: &LayoutConfig, embed_dim: usize) -> Self {
        let c = cfg.mask_channels;
        let box_hidden = Linear::new(store, init, "layout.box.hidden", embed_dim, cfg.box_hidden_dim);
        let box_out = Linear::new(store, init, "layout.box.output", cfg.box_hidden_dim, 4);
        let mask_seed = Linear::new(store, init, "layout.mask.seed", embed_dim, c * 16);
        let doublings = (cfg.mask_size / 4).trailing_zeros() as usize;
        let mask_up = (0..doublings)
            .map(|i| {
                let out = if i + 1 == doublings { 1 } else { c };
                ConvTranspose2d::new(store, init, &format!("layout.mask.up{i}"), c, out, 4, 2, 1)
            })
            .collect();
        Self {
            cfg: cfg.clone(),
            box_hidden,
            box_out,
            mask_seed,
            mask_up,
        }
    }

    pub fn config(&self) -> &LayoutConfig {
        &self.cfg
    }

    /// One box and one soft mask per embedded node, in embedding order.
    pub fn predict_layout(&self, p: &Bound, emb: &NodeEmbeddings) -> Vec<ObjectLayout> {
        if emb.is_empty() {
            return Vec::new();
        }
        let vectors = emb.vectors();
        let hidden = self.box_hidden.forward(p, vectors).leaky_relu(0.2);
        let boxes = self.box_out.forward(p, &hidden).box_from_params();
        let seeds = self.mask_seed.forward(p, vectors);
        let (c, m) = (self.cfg.mask_channels, self.cfg.mask_size);
        emb.ids()
            .iter()
            .enumerate()
            .map(|(i, &node_id)| {
                let mut x = seeds.narrow(0, i, 1).reshape(&[c, 4, 4]).leaky_relu(0.2);
                for (j, up) in self.mask_up.iter().enumerate() {
                    x = up.forward(p, &x);
                    if j + 1 < self.mask_up.len() {
                        x = x.leaky_relu(0.2);
                    }
                }
                ObjectLayout {
                    node_id,
                    bbox: boxes.narrow(0, i, 1).reshape(&[4]),
                    mask: x.sigmoid().reshape(&[m, m]),
                    embedding: vectors.narrow(0, i, 1),
                }
            })
            .collect()
    }
}

/// Warp each mask into its box on a `size x size` canvas, weight it by the
/// object's embedding and sum over objects. Overlaps add.
pub fn compose(objs: &[ObjectLayout], embed_dim: usize, size: usize) -> LayoutMap {
    let mut total: Option<Var> = None;
    for o in objs {
        let warped = o.mask.warp_into_box(&o.bbox, size).reshape(&[1, size * size]);
        let plane = o.embedding.transpose().matmul(&warped);
        total = Some(match total {
            Some(t) => t.add(&plane),
            None => plane,
        });
    }
    match total {
        Some(t) => t.reshape(&[embed_dim, size, size]),
        None => Var::constant(Tensor::zeros(&[embed_dim, size, size])),
    }
}

fn match_targets<'a, T>(pred: &[ObjectLayout], target: &'a BTreeMap<NodeId, T>) -> Result<Vec<&'a T>> {
    pred.iter()
        .map(|o| {
            target
                .get(&o.node_id)
                .ok_or_else(|| Error::validation(format!("no target for node {}", o.node_id)))
        })
        .collect()
}

/// Mean absolute difference over all objects and box coordinates.
pub fn box_loss(pred: &[ObjectLayout], target: &BTreeMap<NodeId, BBox>) -> Result<Var> {
    let targets = match_targets(pred, target)?;
    if pred.is_empty() {
        return Ok(Var::constant(Tensor::scalar(0.0)));
    }
    let predicted = Var::concat(&pred.iter().map(|o| o.bbox.clone()).collect::<Vec<_>>(), 0);
    let wanted = Tensor::from_parts(vec![4 * pred.len()], targets.iter().flat_map(|b| b.to_array()).collect());
    Ok(predicted.sub(&Var::constant(wanted)).abs().mean())
}

/// Mean binary cross entropy over every mask cell of every object.
pub fn mask_loss(pred: &[ObjectLayout], target: &BTreeMap<NodeId, Tensor>) -> Result<Var> {
    let targets = match_targets(pred, target)?;
    if pred.is_empty() {
        return Ok(Var::constant(Tensor::scalar(0.0)));
    }
    for (o, t) in pred.iter().zip(&targets) {
        t.check_shape("mask_loss", o.mask.shape())?;
    }
    let n = pred[0].mask.value().len();
    let predicted = Var::concat(&pred.iter().map(|o| o.mask.reshape(&[n])).collect::<Vec<_>>(), 0);
    let wanted = Tensor::from_parts(
        vec![n * pred.len()],
        targets.iter().flat_map(|t| t.data().iter().copied()).collect(),
    );
    Ok(predicted.bce(&wanted, MASK_EPS))
}
