//! Graph convolution over scene graphs.
//!
//! Every layer applies one shared MLP to each `(subject, predicate, object)`
//! triple and averages the resulting candidate vectors per node. Predicate
//! vectors are replaced by the MLP's middle output.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Bound, Init, Linear, ParamStore};
use crate::sgraph::{NodeId, SceneGraph};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GcnConfig {
    pub embed_dim: usize,
    pub num_layers: usize,
    pub hidden_dim: usize,
}

impl Default for GcnConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            num_layers: 2,
            hidden_dim: 64,
        }
    }
}

impl GcnConfig {
    /// Dimensions used for full-size training runs.
    pub fn full_scale() -> Self {
        Self {
            embed_dim: 128,
            num_layers: 5,
            hidden_dim: 512,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::validation("gcn dimensions must be at least 1"));
        }
        Ok(())
    }
}

/// Per-node output vectors in graph node order, plus the final predicate
/// vectors (one per edge).
#[derive(Clone, Debug)]
pub struct NodeEmbeddings {
    ids: Vec<NodeId>,
    vectors: Var,
    predicates: Var,
}

impl NodeEmbeddings {
    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    /// `[n, D]` matrix whose rows follow [`NodeEmbeddings::ids`].
    pub fn vectors(&self) -> &Var {
        &self.vectors
    }

    pub fn predicates(&self) -> &Var {
        &self.predicates
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn vector(&self, id: NodeId) -> Option<&[f64]> {
        let row = self.ids.iter().position(|&i| i == id)?;
        let d = self.dim();
        Some(&self.vectors.value().data()[row * d..(row + 1) * d])
    }

    /// Drop the rows of nodes that were already generated. Embedding happens
    /// on the full graph first, so the surviving rows still carry relational
    /// context from the dropped nodes.
    pub fn filter_generated(&self, generated: &BTreeSet<NodeId>) -> Result<NodeEmbeddings> {
        if let Some(unknown) = generated.iter().find(|id| !self.ids.contains(id)) {
            return Err(Error::validation(format!("generated node {unknown} is not in the graph")));
        }
        let keep: Vec<usize> = (0..self.ids.len()).filter(|&i| !generated.contains(&self.ids[i])).collect();
        Ok(NodeEmbeddings {
            ids: keep.iter().map(|&i| self.ids[i]).collect(),
            vectors: self.vectors.index_select(&keep),
            predicates: self.predicates.clone(),
        })
    }
}

#[derive(Clone, Debug)]
struct EdgeMlp {
    hidden: Linear,
    output: Linear,
}

#[derive(Clone, Debug)]
pub struct Gcn {
    cfg: GcnConfig,
    num_categories: usize,
    num_predicates: usize,
    category_table: String,
    predicate_table: String,
    layers: Vec<EdgeMlp>,
}

impl Gcn {
    pub fn new(store: &mut ParamStore, init: &mut Init, cfg: &GcnConfig, num_categories: usize, num_predicates: usize) -> Self {
        let d = cfg.embed_dim;
        let bound = 1.0 / (d as f64).sqrt();
        let category_table = "gcn.category_embedding".to_string();
        let predicate_table = "gcn.predicate_embedding".to_string();
        store.insert(&category_table, init.uniform(&[num_categories, d], bound));
        store.insert(&predicate_table, init.uniform(&[num_predicates, d], bound));
        let layers = (0..cfg.num_layers)
            .map(|l| EdgeMlp {
                hidden: Linear::new(store, init, &format!("gcn.layer{l}.hidden"), 3 * d, cfg.hidden_dim),
                output: Linear::new(store, init, &format!("gcn.layer{l}.output"), cfg.hidden_dim, 3 * d),
            })
            .collect();
        Self {
            cfg: cfg.clone(),
            num_categories,
            num_predicates,
            category_table,
            predicate_table,
            layers,
        }
    }

    pub fn config(&self) -> &GcnConfig {
        &self.cfg
    }

    pub fn embed(&self, p: &Bound, graph: &SceneGraph) -> Result<NodeEmbeddings> {
        let d = self.cfg.embed_dim;
        let n = graph.len();
        let categories: Vec<usize> = graph.nodes().iter().map(|node| node.category).collect();
        if let Some(c) = categories.iter().find(|&&c| c >= self.num_categories) {
            return Err(Error::validation(format!("category index {c} outside vocabulary of {}", self.num_categories)));
        }
        let predicates: Vec<usize> = graph.edges().iter().map(|e| e.predicate).collect();
        if let Some(pr) = predicates.iter().find(|&&pr| pr >= self.num_predicates) {
            return Err(Error::validation(format!("predicate index {pr} outside vocabulary of {}", self.num_predicates)));
        }
        let ids: Vec<NodeId> = graph.nodes().iter().map(|node| node.id).collect();
        let row = |id: NodeId| graph.position(id).expect("validated graph");
        let subjects: Vec<usize> = graph.edges().iter().map(|e| row(e.subject)).collect();
        let objects: Vec<usize> = graph.edges().iter().map(|e| row(e.object)).collect();

        let mut counts = vec![0usize; n];
        for &i in subjects.iter().chain(&objects) {
            counts[i] += 1;
        }
        let inv_counts: Vec<f64> = counts.iter().map(|&c| if c > 0 { 1.0 / c as f64 } else { 0.0 }).collect();
        let isolated: Vec<f64> = counts.iter().map(|&c| if c == 0 { 1.0 } else { 0.0 }).collect();

        let mut obj = p.var(&self.category_table).index_select(&categories);
        let mut pred = p.var(&self.predicate_table).index_select(&predicates);
        if !predicates.is_empty() {
            for layer in &self.layers {
                let triple = Var::concat(&[obj.index_select(&subjects), pred.clone(), obj.index_select(&objects)], 1);
                let h = layer.hidden.forward(p, &triple).relu();
                let out = layer.output.forward(p, &h);
                let cand_s = out.narrow(1, 0, d);
                pred = out.narrow(1, d, d);
                let cand_o = out.narrow(1, 2 * d, d);
                let pooled = cand_s.index_add(&subjects, n).add(&cand_o.index_add(&objects, n));
                obj = pooled.scale_rows(&inv_counts).add(&obj.scale_rows(&isolated));
            }
        }
        Ok(NodeEmbeddings {
            ids,
            vectors: obj,
            predicates: pred,
        })
    }
}
