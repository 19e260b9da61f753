//! Incremental scene-graph-to-image generation.
//!
//! A scene graph is embedded by a graph convolution network, each object's
//! embedding is turned into a box and a soft mask that are composed into a
//! spatial layout, and a cascaded refinement network renders the layout into
//! an image. When the graph grows, only the new objects are laid out and the
//! previous image is fed back through the generator's noise channels so
//! earlier content is preserved.

pub mod adversary;
pub mod autograd;
pub mod config;
pub mod crn;
pub mod dataio;
pub mod error;
pub mod gcn;
pub mod gradcheck;
pub mod imageio;
pub mod layoutnet;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod seed;
pub mod sgraph;
pub mod tensor;
pub mod trainer;

pub use autograd::Var;
pub use error::{Error, Result};
pub use sgraph::{BBox, GraphSequence, NodeId, SceneGraph, Vocabulary};
pub use tensor::Tensor;
