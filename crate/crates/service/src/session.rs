use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::json;

use isggen_core::sgraph::{Edge, Node};
use isggen_core::{NodeId, SceneGraph, Vocabulary};

use crate::error::{ApiError, ApiResult};

/// Persistent state of one session. The current graph holds generated and
/// pending nodes alike; `generated` marks the former.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub checkpoint: String,
    pub seed: u64,
    pub graph: SceneGraph,
    pub generated: BTreeSet<NodeId>,
    pub steps: Vec<StepRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step_index: usize,
    pub new_node_ids: Vec<NodeId>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewNode {
    /// Chosen by the server when absent.
    pub id: Option<u32>,
    pub category: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeView {
    pub subject: u32,
    pub predicate: String,
    pub object: u32,
}

/// A batch of graph edits, applied all-or-nothing. Removals run before
/// additions.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphEdit {
    pub add_nodes: Vec<NewNode>,
    pub add_edges: Vec<EdgeView>,
    pub remove_nodes: Vec<u32>,
    pub remove_edges: Vec<EdgeView>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeView {
    pub id: u32,
    pub category: String,
    pub generated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphView {
    pub nodes: Vec<NodeView>,
    pub edges: Vec<EdgeView>,
    pub pending: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepView {
    pub step_index: usize,
    pub new_node_ids: Vec<u32>,
    pub image_url: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub checkpoint: String,
    pub seed: u64,
    pub graph: GraphView,
    pub steps: Vec<StepView>,
}

fn resolve_edge(e: &EdgeView, vocab: &Vocabulary) -> ApiResult<Edge> {
    let predicate = vocab
        .predicate_id(&e.predicate)
        .ok_or_else(|| ApiError::invalid("unknown_predicate", format!("unknown predicate `{}`", e.predicate)))?;
    Ok(Edge { subject: NodeId(e.subject), predicate, object: NodeId(e.object) })
}

impl Session {
    pub fn new(id: String, checkpoint: String, seed: u64) -> Self {
        Self { id, checkpoint, seed, graph: SceneGraph::empty(), generated: BTreeSet::new(), steps: Vec::new() }
    }

    pub fn pending(&self) -> BTreeSet<NodeId> {
        self.graph.node_ids().difference(&self.generated).copied().collect()
    }

    pub fn image_url(&self, k: usize) -> String {
        format!("/v1/sessions/{}/images/{k}", self.id)
    }

    /// Apply an edit to a copy of the graph and return it; nothing changes on
    /// error. Generated nodes, and edges between two generated nodes, cannot
    /// be removed.
    pub fn apply(&self, edit: &GraphEdit, vocab: &Vocabulary) -> ApiResult<SceneGraph> {
        let mut g = self.graph.clone();
        let invalid = |e: isggen_core::Error| ApiError::invalid("invalid_graph", e.to_string());
        for e in &edit.remove_edges {
            let edge = resolve_edge(e, vocab)?;
            if self.generated.contains(&edge.subject) && self.generated.contains(&edge.object) {
                return Err(ApiError::conflict("generated_edge_locked", "edges between generated nodes cannot be removed")
                    .with_detail(json!({ "edge": e })));
            }
            g.remove_edge(&edge).map_err(invalid)?;
        }
        for &id in &edit.remove_nodes {
            if self.generated.contains(&NodeId(id)) {
                return Err(ApiError::conflict("generated_node_locked", format!("node {id} has already been generated"))
                    .with_detail(json!({ "node_id": id })));
            }
            g.remove_node(NodeId(id)).map_err(invalid)?;
        }
        let mut next = g.nodes().iter().map(|n| n.id.0 + 1).chain(self.generated.iter().map(|n| n.0 + 1)).max().unwrap_or(0);
        for n in &edit.add_nodes {
            let category = vocab
                .category_id(&n.category)
                .ok_or_else(|| ApiError::invalid("unknown_category", format!("unknown category `{}`", n.category)))?;
            let id = n.id.unwrap_or(next);
            if self.generated.contains(&NodeId(id)) {
                return Err(ApiError::conflict("generated_node_locked", format!("node id {id} belongs to a generated node")));
            }
            g.add_node(Node { id: NodeId(id), category }).map_err(invalid)?;
            next = next.max(id + 1);
        }
        for e in &edit.add_edges {
            g.add_edge(resolve_edge(e, vocab)?).map_err(invalid)?;
        }
        Ok(g)
    }

    pub fn graph_view(&self, vocab: &Vocabulary) -> GraphView {
        let name = |c: usize| vocab.category_name(c).unwrap_or("?").to_string();
        GraphView {
            nodes: self
                .graph
                .nodes()
                .iter()
                .map(|n| NodeView { id: n.id.0, category: name(n.category), generated: self.generated.contains(&n.id) })
                .collect(),
            edges: self
                .graph
                .edges()
                .iter()
                .map(|e| EdgeView {
                    subject: e.subject.0,
                    predicate: vocab.predicate_name(e.predicate).unwrap_or("?").to_string(),
                    object: e.object.0,
                })
                .collect(),
            pending: self.pending().iter().map(|n| n.0).collect(),
        }
    }

    pub fn step_view(&self, step: &StepRecord) -> StepView {
        StepView {
            step_index: step.step_index,
            new_node_ids: step.new_node_ids.iter().map(|n| n.0).collect(),
            image_url: self.image_url(step.step_index),
        }
    }

    pub fn view(&self, vocab: &Vocabulary) -> SessionView {
        SessionView {
            session_id: self.id.clone(),
            checkpoint: self.checkpoint.clone(),
            seed: self.seed,
            graph: self.graph_view(vocab),
            steps: self.steps.iter().map(|s| self.step_view(s)).collect(),
        }
    }
}
