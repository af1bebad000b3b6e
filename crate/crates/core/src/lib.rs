//! Graph fraud detection with a layered residual GNN.
//!
//! A multi-relation graph is stored as per-relation CSR adjacency over a
//! shared node set. Each model layer filters every node's candidate
//! neighborhood with a learned similarity measure (l1 on class scores, or
//! cosine on small tanh embeddings), mean-aggregates what survives,
//! combines relations with adaptive keep-thresholds, and applies a residual
//! update with optional partial neighborhood normalization (node-wise or
//! batch-wise statistics over the selected messages only). From a configured
//! layer onwards the candidate sets widen to same-relation 2-hop. Layers are
//! supervised individually; thresholds adapt between epochs from the average
//! selected distances.
//!
//! The crate ships its own dense reverse-mode tape ([`tape`]), a synthetic
//! multi-relation fraud-graph generator ([`synth`]), and the training loop,
//! metrics, and checkpointing used by the `fraudgnn` CLI.

pub mod checkpoint;
pub mod config;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod norm;
pub mod optim;
pub mod params;
pub mod similarity;
pub mod synth;
pub mod tape;
pub mod threshold;
pub mod train;

pub use config::RunConfig;
pub use graph::MultiRelationGraph;
pub use model::{Model, ModelConfig};
pub use train::{train, TrainOutput};
