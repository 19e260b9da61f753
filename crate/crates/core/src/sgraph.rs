//! Scene graphs: vocabulary, geometric relations, incremental splits and
//! the JSON document format.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// The six mutually exclusive geometric predicates, in vocabulary order.
pub const GEOMETRIC_PREDICATES: [&str; 6] = ["left of", "right of", "above", "below", "inside", "surrounding"];

pub const LEFT_OF: usize = 0;
pub const RIGHT_OF: usize = 1;
pub const ABOVE: usize = 2;
pub const BELOW: usize = 3;
pub const INSIDE: usize = 4;
pub const SURROUNDING: usize = 5;

pub const DEFAULT_SPLIT_STEPS: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyRepr", into = "VocabularyRepr")]
pub struct Vocabulary {
    object_categories: Vec<String>,
    predicates: Vec<String>,
    category_index: HashMap<String, usize>,
    predicate_index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyRepr {
    object_categories: Vec<String>,
    predicates: Vec<String>,
}

impl TryFrom<VocabularyRepr> for Vocabulary {
    type Error = Error;

    fn try_from(r: VocabularyRepr) -> Result<Self> {
        if r.predicates.len() < GEOMETRIC_PREDICATES.len()
            || r.predicates.iter().zip(GEOMETRIC_PREDICATES).any(|(a, b)| a != b)
        {
            return Err(Error::parse("predicates", "must start with the six geometric predicates in order"));
        }
        Vocabulary::new(r.object_categories, r.predicates[GEOMETRIC_PREDICATES.len()..].to_vec())
    }
}

impl From<Vocabulary> for VocabularyRepr {
    fn from(v: Vocabulary) -> Self {
        VocabularyRepr {
            object_categories: v.object_categories,
            predicates: v.predicates,
        }
    }
}

impl Vocabulary {
    /// Build a vocabulary from category names and any dataset-specific
    /// predicates, which are appended after the six geometric ones.
    pub fn new(object_categories: Vec<String>, extra_predicates: Vec<String>) -> Result<Self> {
        let predicates: Vec<String> = GEOMETRIC_PREDICATES
            .iter()
            .map(|s| s.to_string())
            .chain(extra_predicates)
            .collect();
        let category_index = unique_index(&object_categories, "object_categories")?;
        let predicate_index = unique_index(&predicates, "predicates")?;
        Ok(Self {
            object_categories,
            predicates,
            category_index,
            predicate_index,
        })
    }

    pub fn categories(&self) -> &[String] {
        &self.object_categories
    }

    pub fn predicates(&self) -> &[String] {
        &self.predicates
    }

    pub fn num_categories(&self) -> usize {
        self.object_categories.len()
    }

    pub fn num_predicates(&self) -> usize {
        self.predicates.len()
    }

    pub fn category_id(&self, name: &str) -> Option<usize> {
        self.category_index.get(name).copied()
    }

    pub fn predicate_id(&self, name: &str) -> Option<usize> {
        self.predicate_index.get(name).copied()
    }

    pub fn category_name(&self, idx: usize) -> Option<&str> {
        self.object_categories.get(idx).map(String::as_str)
    }

    pub fn predicate_name(&self, idx: usize) -> Option<&str> {
        self.predicates.get(idx).map(String::as_str)
    }

    /// Content hash identifying this exact vocabulary in documents.
    pub fn version(&self) -> String {
        let mut h = Sha256::new();
        for name in self.object_categories.iter().chain(std::iter::once(&String::new())).chain(&self.predicates) {
            h.update(name.as_bytes());
            h.update([0u8]);
        }
        format!("v1-{}", &hex::encode(h.finalize())[..12])
    }
}

fn unique_index(names: &[String], field: &str) -> Result<HashMap<String, usize>> {
    let mut index = HashMap::with_capacity(names.len());
    for (i, n) in names.iter().enumerate() {
        if index.insert(n.clone(), i).is_some() {
            return Err(Error::parse(field, format!("duplicate name `{n}`")));
        }
    }
    Ok(index)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Axis-aligned box in normalized image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let b = BBox { x0, y0, x1, y1 };
        b.validate()?;
        Ok(b)
    }

    /// Clamp coordinates into the unit square, then validate.
    pub fn clamped(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let c = |v: f64| v.clamp(0.0, 1.0);
        Self::new(c(x0), c(y0), c(x1), c(y1))
    }

    pub fn validate(&self) -> Result<()> {
        let coords = [self.x0, self.y0, self.x1, self.y1];
        if coords.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::validation(format!("box {self:?} outside the unit square")));
        }
        if !(self.x0 < self.x1 && self.y0 < self.y1) {
            return Err(Error::validation(format!("box {self:?} is empty or inverted")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    /// Strict containment: every edge of `self` lies inside `outer` and the
    /// boxes are not identical.
    pub fn strictly_inside(&self, outer: &BBox) -> bool {
        self.x0 >= outer.x0 && self.y0 >= outer.y0 && self.x1 <= outer.x1 && self.y1 <= outer.y1 && self != outer
    }
}

/// Geometric predicate of `subject` relative to `object`.
///
/// Containment wins first; otherwise the dominant axis of the centre offset
/// decides, and exact ties between the axes go to the horizontal relation.
pub fn infer_relation(subject: &BBox, object: &BBox) -> Result<usize> {
    subject.validate()?;
    object.validate()?;
    if subject.strictly_inside(object) {
        return Ok(INSIDE);
    }
    if object.strictly_inside(subject) {
        return Ok(SURROUNDING);
    }
    let (sx, sy) = subject.center();
    let (ox, oy) = object.center();
    let (dx, dy) = (sx - ox, sy - oy);
    Ok(if dx.abs() >= dy.abs() {
        if dx > 0.0 {
            RIGHT_OF
        } else {
            LEFT_OF
        }
    } else if dy < 0.0 {
        ABOVE
    } else {
        BELOW
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub category: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub subject: NodeId,
    pub predicate: usize,
    pub object: NodeId,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneGraph {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
}

impl SceneGraph {
    pub fn new(nodes: Vec<Node>, edges: Vec<Edge>) -> Result<Self> {
        let g = Self { nodes, edges };
        g.validate()?;
        Ok(g)
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node_ids(&self) -> BTreeSet<NodeId> {
        self.nodes.iter().map(|n| n.id).collect()
    }

    pub fn position(&self, id: NodeId) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.position(id).is_some()
    }

    pub fn category_of(&self, id: NodeId) -> Option<usize> {
        self.nodes.iter().find(|n| n.id == id).map(|n| n.category)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for n in &self.nodes {
            if !seen.insert(n.id) {
                return Err(Error::validation(format!("duplicate node id {}", n.id)));
            }
        }
        for e in &self.edges {
            if e.subject == e.object {
                return Err(Error::validation(format!("self-loop on node {}", e.subject)));
            }
            for end in [e.subject, e.object] {
                if !seen.contains(&end) {
                    return Err(Error::validation(format!("edge references missing node {end}")));
                }
            }
        }
        Ok(())
    }

    /// Check category and predicate indices against a vocabulary.
    pub fn check_vocabulary(&self, vocab: &Vocabulary) -> Result<()> {
        for n in &self.nodes {
            if n.category >= vocab.num_categories() {
                return Err(Error::validation(format!("node {} has unknown category {}", n.id, n.category)));
            }
        }
        for e in &self.edges {
            if e.predicate >= vocab.num_predicates() {
                return Err(Error::validation(format!("edge {}->{} has unknown predicate {}", e.subject, e.object, e.predicate)));
            }
        }
        Ok(())
    }

    pub fn add_node(&mut self, node: Node) -> Result<()> {
        if self.contains(node.id) {
            return Err(Error::validation(format!("duplicate node id {}", node.id)));
        }
        self.nodes.push(node);
        Ok(())
    }

    pub fn add_edge(&mut self, edge: Edge) -> Result<()> {
        if edge.subject == edge.object {
            return Err(Error::validation(format!("self-loop on node {}", edge.subject)));
        }
        for end in [edge.subject, edge.object] {
            if !self.contains(end) {
                return Err(Error::validation(format!("edge references missing node {end}")));
            }
        }
        self.edges.push(edge);
        Ok(())
    }

    /// Remove a node together with every edge touching it.
    pub fn remove_node(&mut self, id: NodeId) -> Result<()> {
        let pos = self
            .position(id)
            .ok_or_else(|| Error::validation(format!("no node with id {id}")))?;
        self.nodes.remove(pos);
        self.edges.retain(|e| e.subject != id && e.object != id);
        Ok(())
    }

    pub fn remove_edge(&mut self, edge: &Edge) -> Result<()> {
        let pos = self
            .edges
            .iter()
            .position(|e| e == edge)
            .ok_or_else(|| Error::validation(format!("no edge {}->{}", edge.subject, edge.object)))?;
        self.edges.remove(pos);
        Ok(())
    }

    /// Nodes in `keep` (in this graph's order) plus every edge whose
    /// endpoints both survive.
    pub fn induced_subgraph(&self, keep: &BTreeSet<NodeId>) -> SceneGraph {
        SceneGraph {
            nodes: self.nodes.iter().filter(|n| keep.contains(&n.id)).copied().collect(),
            edges: self
                .edges
                .iter()
                .filter(|e| keep.contains(&e.subject) && keep.contains(&e.object))
                .copied()
                .collect(),
        }
    }

    /// The same graph with nodes sorted by id and edges sorted by
    /// `(subject, predicate, object)`, so equal graphs built in different
    /// insertion orders compute identically.
    pub fn canonical(&self) -> SceneGraph {
        let mut g = self.clone();
        g.nodes.sort_by_key(|n| n.id);
        g.edges.sort();
        g
    }

    /// True when every node and edge of `self` appears in `larger` with the
    /// same category bindings.
    pub fn is_subgraph_of(&self, larger: &SceneGraph) -> bool {
        self.nodes.iter().all(|n| larger.category_of(n.id) == Some(n.category))
            && self.edges.iter().all(|e| larger.edges.contains(e))
    }
}

/// Sample `round(density * n * (n - 1))` distinct ordered pairs and label
/// each with its geometric relation.
pub fn build_graph(objects: &[(NodeId, usize, BBox)], edge_density: f64, seed: u64) -> Result<SceneGraph> {
    if objects.is_empty() {
        return Err(Error::validation("cannot build a scene graph from zero objects"));
    }
    if !(edge_density > 0.0 && edge_density <= 1.0) {
        return Err(Error::validation(format!("edge density {edge_density} outside (0, 1]")));
    }
    let nodes: Vec<Node> = objects.iter().map(|&(id, category, _)| Node { id, category }).collect();
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for i in 0..objects.len() {
        for j in 0..objects.len() {
            if i != j {
                pairs.push((i, j));
            }
        }
    }
    let count = ((edge_density * pairs.len() as f64).round() as usize).min(pairs.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pairs.shuffle(&mut rng);
    let mut chosen = pairs[..count].to_vec();
    chosen.sort_unstable();
    let mut edges = Vec::with_capacity(count);
    for (i, j) in chosen {
        edges.push(Edge {
            subject: objects[i].0,
            predicate: infer_relation(&objects[i].2, &objects[j].2)?,
            object: objects[j].0,
        });
    }
    SceneGraph::new(nodes, edges)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphSequence {
    steps: Vec<SceneGraph>,
}

impl GraphSequence {
    pub fn new(steps: Vec<SceneGraph>) -> Result<Self> {
        let s = Self { steps };
        s.validate()?;
        Ok(s)
    }

    pub fn steps(&self) -> &[SceneGraph] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn last(&self) -> Option<&SceneGraph> {
        self.steps.last()
    }

    pub fn validate(&self) -> Result<()> {
        for (k, g) in self.steps.iter().enumerate() {
            g.validate().map_err(|e| Error::validation(format!("step {k}: {e}")))?;
        }
        for (k, w) in self.steps.windows(2).enumerate() {
            if !w[0].is_subgraph_of(&w[1]) {
                return Err(Error::validation(format!("step {} is not contained in step {}", k, k + 1)));
            }
        }
        Ok(())
    }

    /// Node ids first introduced at step `k`.
    pub fn new_nodes(&self, k: usize) -> BTreeSet<NodeId> {
        let current = self.steps[k].node_ids();
        if k == 0 {
            return current;
        }
        let previous = self.steps[k - 1].node_ids();
        current.difference(&previous).copied().collect()
    }
}

/// Node counts for an incremental split of `n` nodes into `steps` steps:
/// the first step holds half the nodes and each later step adds an equal
/// share of the rest, each floored and clamped to at least one.
pub fn split_sizes(n: usize, steps: usize) -> Vec<usize> {
    assert!(steps >= 1);
    (0..steps)
        .map(|k| {
            if k + 1 == steps {
                return n;
            }
            let fraction = 0.5 + 0.5 * k as f64 / (steps - 1) as f64;
            ((fraction * n as f64).floor() as usize).max(1)
        })
        .collect()
}

pub fn make_splits(graph: &SceneGraph, seed: u64) -> Result<GraphSequence> {
    make_splits_with(graph, DEFAULT_SPLIT_STEPS, seed)
}

/// Randomly order the nodes, take growing prefixes as the step node sets
/// and keep the induced edges of the full graph at each step.
pub fn make_splits_with(graph: &SceneGraph, steps: usize, seed: u64) -> Result<GraphSequence> {
    if graph.is_empty() {
        return Err(Error::validation("cannot split an empty scene graph"));
    }
    if steps == 0 {
        return Err(Error::validation("a graph sequence needs at least one step"));
    }
    let mut order: Vec<NodeId> = graph.nodes.iter().map(|n| n.id).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let out = split_sizes(order.len(), steps)
        .into_iter()
        .map(|size| graph.induced_subgraph(&order[..size].iter().copied().collect()))
        .collect();
    GraphSequence::new(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphDocument {
    pub vocabulary_version: String,
    pub nodes: Vec<NodeDocument>,
    pub edges: Vec<EdgeDocument>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeDocument {
    pub id: u32,
    pub category: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeDocument {
    pub s: u32,
    pub p: String,
    pub o: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceDocument {
    pub steps: Vec<GraphDocument>,
}

impl GraphDocument {
    pub fn from_graph(graph: &SceneGraph, vocab: &Vocabulary) -> Result<Self> {
        graph.check_vocabulary(vocab)?;
        Ok(Self {
            vocabulary_version: vocab.version(),
            nodes: graph
                .nodes
                .iter()
                .map(|n| NodeDocument {
                    id: n.id.0,
                    category: vocab.object_categories[n.category].clone(),
                })
                .collect(),
            edges: graph
                .edges
                .iter()
                .map(|e| EdgeDocument {
                    s: e.subject.0,
                    p: vocab.predicates[e.predicate].clone(),
                    o: e.object.0,
                })
                .collect(),
        })
    }

    pub fn to_graph(&self, vocab: &Vocabulary) -> Result<SceneGraph> {
        if self.vocabulary_version != vocab.version() {
            return Err(Error::parse(
                "vocabulary_version",
                format!("document uses `{}`, expected `{}`", self.vocabulary_version, vocab.version()),
            ));
        }
        let mut graph = SceneGraph::empty();
        for (i, n) in self.nodes.iter().enumerate() {
            let category = vocab
                .category_id(&n.category)
                .ok_or_else(|| Error::parse(format!("nodes[{i}].category"), format!("unknown category `{}`", n.category)))?;
            graph
                .add_node(Node { id: NodeId(n.id), category })
                .map_err(|e| Error::parse(format!("nodes[{i}].id"), e.to_string()))?;
        }
        for (i, e) in self.edges.iter().enumerate() {
            let predicate = vocab
                .predicate_id(&e.p)
                .ok_or_else(|| Error::parse(format!("edges[{i}].p"), format!("unknown predicate `{}`", e.p)))?;
            for (field, id) in [("s", e.s), ("o", e.o)] {
                if !graph.contains(NodeId(id)) {
                    return Err(Error::parse(format!("edges[{i}].{field}"), format!("no node with id {id}")));
                }
            }
            graph
                .add_edge(Edge {
                    subject: NodeId(e.s),
                    predicate,
                    object: NodeId(e.o),
                })
                .map_err(|err| Error::parse(format!("edges[{i}]"), err.to_string()))?;
        }
        Ok(graph)
    }
}

fn parse_json<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::parse(if path == "." { "document".to_string() } else { path }, e.into_inner().to_string())
    })
}

pub fn serialize_graph(graph: &SceneGraph, vocab: &Vocabulary) -> Result<String> {
    Ok(serde_json::to_string_pretty(&GraphDocument::from_graph(graph, vocab)?)?)
}

pub fn deserialize_graph(text: &str, vocab: &Vocabulary) -> Result<SceneGraph> {
    parse_json::<GraphDocument>(text)?.to_graph(vocab)
}

pub fn serialize_sequence(seq: &GraphSequence, vocab: &Vocabulary) -> Result<String> {
    let doc = SequenceDocument {
        steps: seq
            .steps
            .iter()
            .map(|g| GraphDocument::from_graph(g, vocab))
            .collect::<Result<_>>()?,
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}

pub fn deserialize_sequence(text: &str, vocab: &Vocabulary) -> Result<GraphSequence> {
    let doc: SequenceDocument = parse_json(text)?;
    let steps = doc
        .steps
        .iter()
        .enumerate()
        .map(|(k, g)| {
            g.to_graph(vocab).map_err(|e| match e {
                Error::Parse { field, message } => Error::parse(format!("steps[{k}].{field}"), message),
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    GraphSequence::new(steps).map_err(|e| Error::parse("steps", e.to_string()))
}
