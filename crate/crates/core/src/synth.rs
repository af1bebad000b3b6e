//! Labeled multi-relation synthetic fraud graphs.
//!
//! Features come from two Gaussian clusters (a configurable fraction of fraud
//! nodes is camouflaged by resampling from the benign cluster); edges are
//! sampled per relation to hit a target mean degree exactly, preferring
//! same-label endpoints with probability `intra_class_preference`.
//!
//! Generation is single-threaded and fully determined by the seed: the same
//! config writes byte-identical dataset directories.

use std::collections::HashSet;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{GraphError, MultiRelationGraph};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("relation {relation}: target mean degree {target} needs more than n-1 = {max} partners")]
    InfeasibleDegree {
        relation: usize,
        target: f64,
        max: usize,
    },
    #[error("relation {relation}: could not place {remaining} more distinct edges")]
    Exhausted { relation: usize, remaining: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_nodes: usize,
    pub fraud_ratio: f64,
    /// Target mean degree per relation; length fixes the relation count.
    pub mean_degrees: Vec<f64>,
    /// Probability that an edge is forced to connect same-label endpoints.
    pub intra_class_preference: f64,
    pub feature_dim: usize,
    /// Euclidean distance between the class feature means.
    pub class_separation: f64,
    /// Fraction of fraud nodes whose features are resampled from the benign
    /// cluster.
    pub camouflage_rate: f64,
    pub seed: u64,
}

impl SynthConfig {
    /// Yelp-like preset: sparse relations, 14.5% fraud, 32 features.
    pub fn sparse(num_nodes: usize, seed: u64) -> Self {
        Self {
            num_nodes,
            fraud_ratio: 0.145,
            mean_degrees: vec![4.0, 8.0, 10.0],
            intra_class_preference: 0.8,
            feature_dim: 32,
            class_separation: 1.6,
            camouflage_rate: 0.3,
            seed,
        }
    }

    /// Amazon-like preset: relations 1-2 are 19x denser than the sparse
    /// preset's, 9.5% fraud, 25 features.
    pub fn dense(num_nodes: usize, seed: u64) -> Self {
        Self {
            num_nodes,
            fraud_ratio: 0.095,
            mean_degrees: vec![76.0, 152.0, 12.0],
            intra_class_preference: 0.5,
            feature_dim: 25,
            class_separation: 1.6,
            camouflage_rate: 0.3,
            seed,
        }
    }

    fn validate(&self) -> Result<(), SynthError> {
        if self.num_nodes < 2 {
            return Err(SynthError::Invalid("need at least 2 nodes".into()));
        }
        for (name, v) in [
            ("fraud_ratio", self.fraud_ratio),
            ("intra_class_preference", self.intra_class_preference),
            ("camouflage_rate", self.camouflage_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(SynthError::Invalid(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if self.mean_degrees.is_empty() {
            return Err(SynthError::Invalid("at least one relation required".into()));
        }
        if self.feature_dim == 0 {
            return Err(SynthError::Invalid("feature_dim must be >= 1".into()));
        }
        if self.class_separation < 0.0 || !self.class_separation.is_finite() {
            return Err(SynthError::Invalid("class_separation must be non-negative".into()));
        }
        for (r, &d) in self.mean_degrees.iter().enumerate() {
            if d < 0.0 || !d.is_finite() {
                return Err(SynthError::Invalid(format!("mean degree {d} of relation {r}")));
            }
            if d > (self.num_nodes - 1) as f64 {
                return Err(SynthError::InfeasibleDegree {
                    relation: r,
                    target: d,
                    max: self.num_nodes - 1,
                });
            }
        }
        Ok(())
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<MultiRelationGraph, SynthError> {
    cfg.validate()?;
    let n = cfg.num_nodes;
    let d = cfg.feature_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Labels: round(ratio * n) fraud nodes scattered by a seeded shuffle.
    let fraud_count = ((cfg.fraud_ratio * n as f64).round() as usize).min(n);
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut rng);
    let mut labels = vec![0u8; n];
    for &u in ids.iter().take(fraud_count) {
        labels[u] = 1;
    }

    // Features: two Gaussian clusters separated by `class_separation` along
    // the all-ones direction; camouflaged frauds draw from the benign cluster.
    let shift = cfg.class_separation / (d as f64).sqrt();
    let mut features = vec![0.0f64; n * d];
    for u in 0..n {
        let camouflaged = labels[u] == 1 && rng.gen_bool(cfg.camouflage_rate);
        let mean = if labels[u] == 1 && !camouflaged { shift } else { 0.0 };
        for k in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            features[u * d + k] = mean + z;
        }
    }

    let class_members: [Vec<u32>; 2] = {
        let mut benign = Vec::new();
        let mut fraud = Vec::new();
        for (u, &l) in labels.iter().enumerate() {
            if l == 0 {
                benign.push(u as u32);
            } else {
                fraud.push(u as u32);
            }
        }
        [benign, fraud]
    };

    let mut edge_lists = Vec::with_capacity(cfg.mean_degrees.len());
    for (r, &deg) in cfg.mean_degrees.iter().enumerate() {
        let target_edges = (deg * n as f64 / 2.0).round() as usize;
        let mut seen: HashSet<(u32, u32)> = HashSet::with_capacity(target_edges * 2);
        let mut edges = Vec::with_capacity(target_edges);
        let mut attempts = 0usize;
        let attempt_cap = 200 * target_edges.max(64);
        while edges.len() < target_edges {
            attempts += 1;
            if attempts > attempt_cap {
                return Err(SynthError::Exhausted {
                    relation: r,
                    remaining: target_edges - edges.len(),
                });
            }
            let (u, v) = if rng.gen_bool(cfg.intra_class_preference) {
                let u = rng.gen_range(0..n) as u32;
                let members = &class_members[labels[u as usize] as usize];
                if members.len() < 2 {
                    continue;
                }
                let v = loop {
                    let v = members[rng.gen_range(0..members.len())];
                    if v != u {
                        break v;
                    }
                };
                (u, v)
            } else {
                let u = rng.gen_range(0..n) as u32;
                let v = loop {
                    let v = rng.gen_range(0..n) as u32;
                    if v != u {
                        break v;
                    }
                };
                (u, v)
            };
            let key = (u.min(v), u.max(v));
            if seen.insert(key) {
                edges.push(key);
            }
        }
        edge_lists.push(edges);
    }

    Ok(MultiRelationGraph::from_parts(n, d, features, labels, &edge_lists)?)
}
