//! The layered residual classifier.
//!
//! Every layer: filter each relation's candidate set by learned similarity,
//! mean-aggregate the kept neighbors per relation, combine relations with the
//! threshold weights, update through a linear map + ReLU, normalize, add the
//! residual, and read out 2-class logits. Candidate sets widen from 1-hop to
//! same-relation 2-hop at `iis_start_layer`.
//!
//! Selection runs on raw data (no gradient); the update path runs on the
//! tape. Centers with no candidates under any relation pass their embedding
//! through unchanged and skip the classifier update path statistics.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::MultiRelationGraph;
use crate::norm::{self, NormConfig, NormMode, RunningStats};
use crate::params::{xavier_uniform, ParamTensor};
use crate::similarity::{filter_by_distance, NeighborSelection, SimMode, SimilarityModule};
use crate::tape::{softmax_raw, Tape, Value};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub sim_embed_dim: usize,
    /// First layer (1-based) whose candidate sets widen to 2-hop;
    /// `num_layers + 1` disables the widening entirely.
    pub iis_start_layer: usize,
    pub sim_mode: SimMode,
    pub norm: NormConfig,
    pub lambda_sim: f64,
    pub class_weights: [f64; 2],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 6,
            hidden_dim: 64,
            sim_embed_dim: 8,
            iis_start_layer: 4,
            sim_mode: SimMode::Cosine,
            norm: NormConfig::default(),
            lambda_sim: 1.0,
            class_weights: [1.0, 1.0],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.num_layers == 0 {
            return Err("num_layers must be >= 1".into());
        }
        if self.hidden_dim == 0 || self.sim_embed_dim == 0 {
            return Err("dimensions must be >= 1".into());
        }
        if self.iis_start_layer < 1 || self.iis_start_layer > self.num_layers + 1 {
            return Err(format!(
                "iis_start_layer {} outside 1..={}",
                self.iis_start_layer,
                self.num_layers + 1
            ));
        }
        if self.lambda_sim < 0.0 {
            return Err("lambda_sim must be non-negative".into());
        }
        if self.class_weights.iter().any(|w| *w <= 0.0) {
            return Err("class weights must be positive".into());
        }
        Ok(())
    }
}

/// One layer's learnable state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerParams {
    pub similarity: SimilarityModule,
    pub w_update: ParamTensor,
    pub b_update: ParamTensor,
    pub w_cls: ParamTensor,
    pub b_cls: ParamTensor,
    /// Keep thresholds p_r, one per relation, in (0, 1].
    pub thresholds: Vec<f64>,
    /// Running statistics for batch-wise normalization at inference.
    pub running: RunningStats,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Model {
    pub cfg: ModelConfig,
    pub feature_dim: usize,
    pub num_relations: usize,
    pub input_w: ParamTensor,
    pub input_b: ParamTensor,
    pub layers: Vec<LayerParams>,
}

/// Tape handles for every parameter of one layer, registered once per step.
#[derive(Clone, Copy)]
pub struct LayerHandles {
    pub sim_w: Value,
    pub sim_b: Value,
    pub w_update: Value,
    pub b_update: Value,
    pub w_cls: Value,
    pub b_cls: Value,
}

/// Tape handles for every model parameter. Gradients accumulate into these
/// leaves across the forward pass and any auxiliary losses built on the same
/// tape, so the trainer reads one gradient per parameter after backward.
pub struct ModelHandles {
    pub input_w: Value,
    pub input_b: Value,
    pub layers: Vec<LayerHandles>,
}

impl ModelHandles {
    /// Handles in the same order as [`Model::params_mut`].
    pub fn all(&self) -> Vec<Value> {
        let mut out = vec![self.input_w, self.input_b];
        for l in &self.layers {
            out.extend([l.sim_w, l.sim_b, l.w_update, l.b_update, l.w_cls, l.b_cls]);
        }
        out
    }
}

/// Same-relation 2-hop candidate lists, materialized once per graph when the
/// widened layers need them.
pub struct CandidateCache {
    two_hop: Option<Vec<Vec<Vec<u32>>>>,
}

impl CandidateCache {
    pub fn build(graph: &MultiRelationGraph, need_two_hop: bool) -> Self {
        let two_hop = need_two_hop.then(|| {
            (0..graph.num_relations())
                .map(|r| {
                    (0..graph.num_nodes())
                        .map(|u| graph.two_hop_candidates(u, r))
                        .collect()
                })
                .collect()
        });
        Self { two_hop }
    }

    pub fn candidates<'a>(
        &'a self,
        graph: &'a MultiRelationGraph,
        u: usize,
        r: usize,
        two_hop: bool,
    ) -> &'a [u32] {
        if two_hop {
            let cache = self
                .two_hop
                .as_ref()
                .expect("2-hop candidates requested but not materialized");
            &cache[r][u]
        } else {
            graph.neighbors(u, r)
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOpts {
    pub training: bool,
    /// Sweep chunk size; batch-wise normalization statistics are computed per
    /// chunk of this many centers.
    pub batch_size: usize,
    pub collect_selections: bool,
}

/// Per-layer diagnostics from one forward pass.
#[derive(Debug, Clone)]
pub struct LayerStats {
    /// Sum of kept-neighbor distances per relation.
    pub dist_sum: Vec<f64>,
    /// Number of kept neighbors per relation.
    pub dist_count: Vec<usize>,
    /// Mean over centers (with any kept neighbor) of the same-label fraction
    /// among kept neighbors. Diagnostic only.
    pub label_agreement: Option<f64>,
    /// Centers with no candidates under any relation.
    pub isolated: usize,
    /// Rows that bypassed normalization.
    pub bypassed: usize,
}

impl LayerStats {
    /// Average kept distance for one relation, when anything was kept.
    pub fn avg_distance(&self, r: usize) -> Option<f64> {
        (self.dist_count[r] > 0).then(|| self.dist_sum[r] / self.dist_count[r] as f64)
    }
}

pub struct LayerForward {
    pub h: Value,
    pub logits: Value,
    pub stats: LayerStats,
    pub selections: Option<Vec<Vec<NeighborSelection>>>,
}

pub struct ForwardOutput {
    /// h^(l-1) data fed to each layer (pair sampling reads these).
    pub layer_inputs: Vec<Vec<f64>>,
    /// h^(l) per layer.
    pub embeddings: Vec<Value>,
    /// Per-layer classifier logits over all nodes.
    pub logits: Vec<Value>,
    pub stats: Vec<LayerStats>,
    /// `[layer][relation][node]` when requested.
    pub selections: Option<Vec<Vec<Vec<NeighborSelection>>>>,
    /// Post-pass running statistics per layer; committed by the trainer after
    /// a training step, discarded otherwise.
    pub updated_running: Vec<RunningStats>,
}

impl Model {
    pub fn new(
        cfg: ModelConfig,
        feature_dim: usize,
        num_relations: usize,
        rng: &mut impl Rng,
    ) -> Self {
        cfg.validate().expect("invalid model config");
        assert!(num_relations >= 1, "at least one relation required");
        let h = cfg.hidden_dim;
        let layers = (0..cfg.num_layers)
            .map(|_| LayerParams {
                similarity: SimilarityModule::new(cfg.sim_mode, h, cfg.sim_embed_dim, rng),
                w_update: xavier_uniform(2 * h, h, rng),
                b_update: ParamTensor::zeros(1, h),
                w_cls: xavier_uniform(h, 2, rng),
                b_cls: ParamTensor::zeros(1, 2),
                thresholds: vec![0.5; num_relations],
                running: RunningStats::new(h),
            })
            .collect();
        Self {
            cfg,
            feature_dim,
            num_relations,
            input_w: xavier_uniform(feature_dim, h, rng),
            input_b: ParamTensor::zeros(1, h),
            layers,
        }
    }

    /// Whether layer `l` (1-based) draws candidates from the 2-hop sets.
    pub fn layer_uses_two_hop(&self, layer: usize) -> bool {
        layer >= self.cfg.iis_start_layer
    }

    pub fn needs_two_hop(&self) -> bool {
        self.cfg.iis_start_layer <= self.cfg.num_layers
    }

    /// Fixed-order mutable references to every parameter tensor.
    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut out: Vec<&mut ParamTensor> = vec![&mut self.input_w, &mut self.input_b];
        for layer in &mut self.layers {
            out.push(&mut layer.similarity.weight);
            out.push(&mut layer.similarity.bias);
            out.push(&mut layer.w_update);
            out.push(&mut layer.b_update);
            out.push(&mut layer.w_cls);
            out.push(&mut layer.b_cls);
        }
        out
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        let mut out = vec![self.input_w.len(), self.input_b.len()];
        for layer in &self.layers {
            out.push(layer.similarity.weight.len());
            out.push(layer.similarity.bias.len());
            out.push(layer.w_update.len());
            out.push(layer.b_update.len());
            out.push(layer.w_cls.len());
            out.push(layer.b_cls.len());
        }
        out
    }

    /// Copy controller thresholds into the layers (start of each epoch).
    pub fn set_thresholds(&mut self, per_layer: &[Vec<f64>]) {
        assert_eq!(per_layer.len(), self.layers.len());
        for (layer, t) in self.layers.iter_mut().zip(per_layer) {
            assert_eq!(t.len(), self.num_relations);
            layer.thresholds = t.clone();
        }
    }

    /// Register every parameter on the tape once.
    pub fn register(&self, tape: &Tape) -> ModelHandles {
        ModelHandles {
            input_w: self.input_w.tracked(tape),
            input_b: self.input_b.tracked(tape),
            layers: self
                .layers
                .iter()
                .map(|l| LayerHandles {
                    sim_w: l.similarity.weight.tracked(tape),
                    sim_b: l.similarity.bias.tracked(tape),
                    w_update: l.w_update.tracked(tape),
                    b_update: l.b_update.tracked(tape),
                    w_cls: l.w_cls.tracked(tape),
                    b_cls: l.b_cls.tracked(tape),
                })
                .collect(),
        }
    }

    /// Shared linear + ReLU projection of raw features into the hidden width.
    pub fn input_projection(&self, tape: &Tape, x: Value, handles: &ModelHandles) -> Value {
        assert_eq!(x.cols(), self.feature_dim, "feature dim mismatch");
        tape.relu(tape.add_bias(tape.matmul(x, handles.input_w), handles.input_b))
    }

    /// One layer over the whole node set.
    #[allow(clippy::too_many_arguments)]
    pub fn layer_forward(
        &self,
        tape: &Tape,
        layer: usize,
        prev: Value,
        prev_data: &[f64],
        graph: &MultiRelationGraph,
        cache: &CandidateCache,
        handles: &LayerHandles,
        running: &mut RunningStats,
        opts: &ForwardOpts,
    ) -> LayerForward {
        let n = graph.num_nodes();
        let h = self.cfg.hidden_dim;
        let r_count = self.num_relations;
        assert_eq!(prev.rows(), n, "previous embeddings must cover all nodes");
        assert_eq!(prev.cols(), h);
        let lp = &self.layers[layer - 1];
        let two_hop = self.layer_uses_two_hop(layer);
        let sim_embeds = lp.similarity.embed_all(prev_data, n);
        let s = lp.similarity.embed_dim();
        let labels = graph.labels();

        // Selection: rank each candidate set by distance, keep the top
        // ceil(p_r * n) (data path; no gradient flows through ranking).
        let mut kept_lists: Vec<Vec<Vec<u32>>> = vec![Vec::with_capacity(n); r_count];
        let mut stats = LayerStats {
            dist_sum: vec![0.0; r_count],
            dist_count: vec![0; r_count],
            label_agreement: None,
            isolated: 0,
            bypassed: 0,
        };
        let mut selections = opts
            .collect_selections
            .then(|| vec![Vec::with_capacity(n); r_count]);
        let mut agree_sum = 0.0;
        let mut agree_centers = 0usize;
        let mut n_sel_all: Vec<usize> = vec![0; n];
        let mut dist_buf: Vec<f64> = Vec::new();
        for u in 0..n {
            let e_u = &sim_embeds[u * s..(u + 1) * s];
            let mut kept_total = 0usize;
            let mut same_total = 0usize;
            for r in 0..r_count {
                let cands = cache.candidates(graph, u, r, two_hop);
                dist_buf.clear();
                dist_buf.extend(cands.iter().map(|&v| {
                    lp.similarity
                        .distance_raw(e_u, &sim_embeds[v as usize * s..(v as usize + 1) * s])
                }));
                let (kept, kept_d) = filter_by_distance(cands, &dist_buf, lp.thresholds[r]);
                stats.dist_sum[r] += kept_d.iter().sum::<f64>();
                stats.dist_count[r] += kept.len();
                kept_total += kept.len();
                same_total += kept
                    .iter()
                    .filter(|&&v| labels[v as usize] == labels[u])
                    .count();
                if let Some(sel) = selections.as_mut() {
                    sel[r].push(NeighborSelection {
                        center: u as u32,
                        relation: r,
                        kept: kept.clone(),
                        distances: kept_d,
                        threshold: lp.thresholds[r],
                        candidate_count: cands.len(),
                        two_hop,
                    });
                }
                kept_lists[r].push(kept);
            }
            n_sel_all[u] = kept_total;
            if kept_total > 0 {
                agree_sum += same_total as f64 / kept_total as f64;
                agree_centers += 1;
            }
        }
        if agree_centers > 0 {
            stats.label_agreement = Some(agree_sum / agree_centers as f64);
        }

        let active: Vec<u32> = (0..n).filter(|&u| n_sel_all[u] > 0).map(|u| u as u32).collect();
        let isolated: Vec<u32> = (0..n).filter(|&u| n_sel_all[u] == 0).map(|u| u as u32).collect();
        stats.isolated = isolated.len();

        let (w_cls, b_cls) = (handles.w_cls, handles.b_cls);

        if active.is_empty() {
            // Nothing to aggregate anywhere: the whole layer is a residual
            // pass, but logits still read out.
            let logits = tape.add_bias(tape.matmul(prev, w_cls), b_cls);
            return LayerForward {
                h: prev,
                logits,
                stats,
                selections,
            };
        }

        // Restrict the update path to active centers.
        let all_active = isolated.is_empty();
        let (h_prev_act, lists_act, n_sel_act): (Value, Vec<Vec<Vec<u32>>>, Vec<usize>) = if all_active
        {
            (prev, kept_lists, n_sel_all.clone())
        } else {
            let gathered = tape.gather_rows(prev, &active);
            let lists = kept_lists
                .into_iter()
                .map(|per_rel| {
                    active
                        .iter()
                        .map(|&u| per_rel[u as usize].clone())
                        .collect::<Vec<_>>()
                })
                .collect();
            let counts = active.iter().map(|&u| n_sel_all[u as usize]).collect();
            (gathered, lists, counts)
        };

        let need_sums = !matches!(self.cfg.norm.mode, NormMode::None);
        let msg_means: Vec<Value> = lists_act
            .iter()
            .map(|lists| tape.gather_mean_rows(prev, lists.clone()))
            .collect();
        let msg_sums: Vec<Value> = if need_sums {
            lists_act
                .iter()
                .map(|lists| tape.gather_sum_rows(prev, lists.clone()))
                .collect()
        } else {
            Vec::new()
        };

        // Inter-relation combination weighted by the thresholds.
        let mut combined = tape.scale(msg_means[0], lp.thresholds[0]);
        for r in 1..r_count {
            combined = tape.add(combined, tape.scale(msg_means[r], lp.thresholds[r]));
        }

        let z = tape.concat_rows(h_prev_act, combined);
        let pre = tape.relu(tape.add_bias(tape.matmul(z, handles.w_update), handles.b_update));

        let normed = match self.cfg.norm.mode {
            NormMode::None => pre,
            NormMode::NodeWise => {
                let res = norm::node_wise_normalize(
                    tape,
                    pre,
                    &msg_sums,
                    &lp.thresholds,
                    &n_sel_act,
                    self.cfg.norm.eps,
                );
                stats.bypassed += res.bypassed;
                res.out
            }
            NormMode::BatchWise => {
                // Sweep chunks of batch_size centers; each chunk gets its own
                // statistics in training mode.
                let m = h_prev_act.rows();
                let chunk = opts.batch_size.max(1);
                if m <= chunk {
                    let res = norm::batch_wise_normalize(
                        tape,
                        pre,
                        &msg_sums,
                        &lp.thresholds,
                        &n_sel_act,
                        opts.training,
                        &self.cfg.norm,
                        running,
                    );
                    stats.bypassed += res.bypassed;
                    res.out
                } else {
                    let mut parts = Vec::new();
                    let mut start = 0;
                    while start < m {
                        let end = (start + chunk).min(m);
                        let idx: Vec<u32> = (start as u32..end as u32).collect();
                        let pre_c = tape.gather_rows(pre, &idx);
                        let sums_c: Vec<Value> =
                            msg_sums.iter().map(|&t| tape.gather_rows(t, &idx)).collect();
                        let res = norm::batch_wise_normalize(
                            tape,
                            pre_c,
                            &sums_c,
                            &lp.thresholds,
                            &n_sel_act[start..end],
                            opts.training,
                            &self.cfg.norm,
                            running,
                        );
                        stats.bypassed += res.bypassed;
                        parts.push(res.out);
                        start = end;
                    }
                    tape.vcat(&parts)
                }
            }
        };

        let h_act = tape.add(normed, h_prev_act);

        let (h_new, logits) = if all_active {
            let logits = tape.add_bias(tape.matmul(h_act, w_cls), b_cls);
            (h_act, logits)
        } else {
            let h_iso = tape.gather_rows(prev, &isolated);
            let stacked = tape.vcat(&[h_act, h_iso]);
            let mut perm = vec![0u32; n];
            for (pos, &u) in active.iter().chain(isolated.iter()).enumerate() {
                perm[u as usize] = pos as u32;
            }
            let h_new = tape.permute_rows(stacked, &perm);
            let logits = tape.add_bias(tape.matmul(h_new, w_cls), b_cls);
            (h_new, logits)
        };

        LayerForward {
            h: h_new,
            logits,
            stats,
            selections,
        }
    }

    /// Full pass over the graph: input projection then every layer.
    pub fn forward(
        &self,
        tape: &Tape,
        graph: &MultiRelationGraph,
        cache: &CandidateCache,
        handles: &ModelHandles,
        opts: &ForwardOpts,
    ) -> ForwardOutput {
        assert_eq!(graph.feature_dim(), self.feature_dim, "feature dim mismatch");
        assert_eq!(graph.num_relations(), self.num_relations, "relation count mismatch");
        let n = graph.num_nodes();
        let x = tape.constant(n, self.feature_dim, graph.features().to_vec());
        let mut prev = self.input_projection(tape, x, handles);

        let mut layer_inputs = Vec::with_capacity(self.cfg.num_layers);
        let mut embeddings = Vec::with_capacity(self.cfg.num_layers);
        let mut logits = Vec::with_capacity(self.cfg.num_layers);
        let mut stats = Vec::with_capacity(self.cfg.num_layers);
        let mut selections = opts.collect_selections.then(Vec::new);
        let mut updated_running: Vec<RunningStats> =
            self.layers.iter().map(|l| l.running.clone()).collect();

        for layer in 1..=self.cfg.num_layers {
            let prev_data = tape.value(prev);
            let out = self.layer_forward(
                tape,
                layer,
                prev,
                &prev_data,
                graph,
                cache,
                &handles.layers[layer - 1],
                &mut updated_running[layer - 1],
                opts,
            );
            layer_inputs.push(prev_data);
            embeddings.push(out.h);
            logits.push(out.logits);
            stats.push(out.stats);
            if let (Some(all), Some(sel)) = (selections.as_mut(), out.selections) {
                all.push(sel);
            }
            prev = out.h;
        }

        ForwardOutput {
            layer_inputs,
            embeddings,
            logits,
            stats,
            selections,
            updated_running,
        }
    }

    /// Commit running statistics returned by a training forward pass.
    pub fn commit_running(&mut self, updated: Vec<RunningStats>) {
        assert_eq!(updated.len(), self.layers.len());
        for (layer, stats) in self.layers.iter_mut().zip(updated) {
            layer.running = stats;
        }
    }

    /// Fraud probability (class 1) per requested node, from the final layer's
    /// logits in inference mode.
    pub fn predict(
        &self,
        graph: &MultiRelationGraph,
        cache: &CandidateCache,
        nodes: &[u32],
        batch_size: usize,
    ) -> Vec<f64> {
        for &u in nodes {
            assert!((u as usize) < graph.num_nodes(), "unknown node id {u}");
        }
        let tape = Tape::new();
        let handles = self.register(&tape);
        let opts = ForwardOpts {
            training: false,
            batch_size,
            collect_selections: false,
        };
        let out = self.forward(&tape, graph, cache, &handles, &opts);
        let final_logits = tape.value(*out.logits.last().expect("at least one layer"));
        nodes
            .iter()
            .map(|&u| {
                let row = &final_logits[u as usize * 2..u as usize * 2 + 2];
                softmax_raw(row)[1]
            })
            .collect()
    }
}

/// Combined training objective: sum over layers of class-weighted
/// cross-entropy plus `lambda_sim` times that layer's similarity loss.
pub struct LossBreakdown {
    pub total: Value,
    pub ce_per_layer: Vec<f64>,
    pub sim_per_layer: Vec<f64>,
}

pub fn total_loss(
    tape: &Tape,
    per_layer_logits: &[Value],
    labels: &[u8],
    class_weights: &[f64; 2],
    sim_losses: &[Value],
    lambda_sim: f64,
) -> LossBreakdown {
    assert_eq!(per_layer_logits.len(), sim_losses.len(), "one sim loss per layer");
    assert!(!per_layer_logits.is_empty(), "no layers produced logits");
    let mut ce_per_layer = Vec::with_capacity(per_layer_logits.len());
    let mut sim_per_layer = Vec::with_capacity(per_layer_logits.len());
    let mut total: Option<Value> = None;
    for (logits, sim) in per_layer_logits.iter().zip(sim_losses) {
        let ce = tape.softmax_cross_entropy(*logits, labels, class_weights);
        ce_per_layer.push(tape.scalar(ce));
        sim_per_layer.push(tape.scalar(*sim));
        let layer_total = tape.add(ce, tape.scale(*sim, lambda_sim));
        total = Some(match total {
            Some(t) => tape.add(t, layer_total),
            None => layer_total,
        });
    }
    LossBreakdown {
        total: total.unwrap(),
        ce_per_layer,
        sim_per_layer,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn opts() -> ForwardOpts {
        ForwardOpts {
            training: true,
            batch_size: 64,
            collect_selections: true,
        }
    }

    fn tiny_graph() -> MultiRelationGraph {
        // 4 nodes, 1 relation: path 0-1-2, node 3 isolated.
        MultiRelationGraph::from_parts(
            4,
            3,
            vec![
                1.0, 0.0, 0.5, //
                0.0, 1.0, 0.5, //
                1.0, 1.0, 0.0, //
                0.2, 0.2, 0.2,
            ],
            vec![0, 1, 0, 0],
            &[vec![(0, 1), (1, 2)]],
        )
        .unwrap()
    }

    fn small_model(graph: &MultiRelationGraph, norm_mode: NormMode) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = ModelConfig {
            num_layers: 2,
            hidden_dim: 5,
            sim_embed_dim: 3,
            iis_start_layer: 3,
            norm: NormConfig {
                mode: norm_mode,
                ..NormConfig::default()
            },
            ..ModelConfig::default()
        };
        Model::new(cfg, graph.feature_dim(), graph.num_relations(), &mut rng)
    }

    #[test]
    fn isolated_node_keeps_its_embedding() {
        let graph = tiny_graph();
        let model = small_model(&graph, NormMode::None);
        let cache = CandidateCache::build(&graph, false);
        let tape = Tape::new();
        let handles = model.register(&tape);
        let out = model.forward(&tape, &graph, &cache, &handles, &opts());
        let h0 = &out.layer_inputs[1]; // input to layer 2 == output of layer 1
        let h1 = tape.value(out.embeddings[1]);
        let hd = model.cfg.hidden_dim;
        // Node 3 has no neighbors: rows must match across every layer.
        assert_eq!(&h0[3 * hd..4 * hd], &h1[3 * hd..4 * hd]);
        assert_eq!(out.stats[0].isolated, 1);
    }

    #[test]
    fn zeroed_update_makes_layers_identity() {
        let graph = tiny_graph();
        let mut model = small_model(&graph, NormMode::None);
        for layer in &mut model.layers {
            layer.w_update.data.iter_mut().for_each(|v| *v = 0.0);
            layer.b_update.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let cache = CandidateCache::build(&graph, false);
        let tape = Tape::new();
        let handles = model.register(&tape);
        let out = model.forward(&tape, &graph, &cache, &handles, &opts());
        let first_input = &out.layer_inputs[0];
        let last = tape.value(*out.embeddings.last().unwrap());
        assert_eq!(first_input, &last);
    }

    #[test]
    fn layer_matches_straight_line_oracle() {
        let graph = tiny_graph();
        let model = small_model(&graph, NormMode::None);
        let cache = CandidateCache::build(&graph, false);
        let tape = Tape::new();
        let handles = model.register(&tape);
        let out = model.forward(&tape, &graph, &cache, &handles, &opts());

        // Oracle: recompute layer 1 for node 1 (neighbors 0 and 2, p = 0.5
        // keeps ceil(0.5 * 2) = 1 best) with plain loops.
        let h0 = &out.layer_inputs[0];
        let hd = model.cfg.hidden_dim;
        let lp = &model.layers[0];
        let sims = lp.similarity.embed_all(h0, graph.num_nodes());
        let s = lp.similarity.embed_dim();
        let d0 = lp.similarity.distance_raw(&sims[s..2 * s], &sims[0..s]);
        let d2 = lp.similarity.distance_raw(&sims[s..2 * s], &sims[2 * s..3 * s]);
        let kept: usize = if d0 <= d2 { 0 } else { 2 };
        let msg: Vec<f64> = h0[kept * hd..(kept + 1) * hd]
            .iter()
            .map(|v| v * lp.thresholds[0])
            .collect();
        let mut z = h0[hd..2 * hd].to_vec();
        z.extend_from_slice(&msg);
        let mut pre = lp.b_update.data.clone();
        for (k, zv) in z.iter().enumerate() {
            for c in 0..hd {
                pre[c] += zv * lp.w_update.data[k * hd + c];
            }
        }
        pre.iter_mut().for_each(|v| *v = v.max(0.0));
        let expect: Vec<f64> = pre.iter().zip(&h0[hd..2 * hd]).map(|(a, b)| a + b).collect();

        let got = tape.value(out.embeddings[0]);
        for (a, b) in expect.iter().zip(&got[hd..2 * hd]) {
            assert!((a - b).abs() < 1e-12, "oracle mismatch {a} vs {b}");
        }
    }

    #[test]
    fn neighbor_input_order_does_not_change_output() {
        let feats = vec![
            0.3, 0.1, //
            -0.2, 0.5, //
            0.8, -0.1, //
            0.0, 0.4, //
            0.6, 0.6,
        ];
        let edges = vec![(0u32, 1u32), (0, 2), (0, 3), (0, 4), (1, 2)];
        let mut shuffled = edges.clone();
        shuffled.reverse();
        shuffled.swap(0, 2);
        let flipped: Vec<(u32, u32)> = shuffled.iter().map(|&(a, b)| (b, a)).collect();
        let g1 = MultiRelationGraph::from_parts(5, 2, feats.clone(), vec![0, 1, 0, 1, 0], &[edges]).unwrap();
        let g2 = MultiRelationGraph::from_parts(5, 2, feats, vec![0, 1, 0, 1, 0], &[flipped]).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = ModelConfig {
            num_layers: 2,
            hidden_dim: 4,
            sim_embed_dim: 2,
            iis_start_layer: 2,
            ..ModelConfig::default()
        };
        let model = Model::new(cfg, 2, 1, &mut rng);
        let run = |g: &MultiRelationGraph| {
            let cache = CandidateCache::build(g, true);
            let tape = Tape::new();
            let handles = model.register(&tape);
            let out = model.forward(&tape, g, &cache, &handles, &opts());
            tape.value(*out.embeddings.last().unwrap())
        };
        assert_eq!(run(&g1), run(&g2));
    }

    #[test]
    fn full_threshold_mean_aggregation_matches_sage_oracle() {
        // p = 1 keeps every neighbor, so the layer is
        // relu(W [h || mean(neigh)] + b) + h.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 20;
        let feats: Vec<f64> = (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut edges = Vec::new();
        for u in 0..n as u32 {
            for v in (u + 1)..n as u32 {
                if rng.gen_bool(0.2) {
                    edges.push((u, v));
                }
            }
        }
        let graph = MultiRelationGraph::from_parts(n, 3, feats, vec![0; n], &[edges]).unwrap();
        let mut model = small_model(&graph, NormMode::None);
        for layer in &mut model.layers {
            layer.thresholds = vec![1.0];
        }
        let cache = CandidateCache::build(&graph, false);
        let tape = Tape::new();
        let handles = model.register(&tape);
        let out = model.forward(&tape, &graph, &cache, &handles, &opts());

        let h0 = &out.layer_inputs[0];
        let hd = model.cfg.hidden_dim;
        let lp = &model.layers[0];
        let got = tape.value(out.embeddings[0]);
        for u in 0..n {
            let neigh = graph.neighbors(u, 0);
            if neigh.is_empty() {
                assert_eq!(&got[u * hd..(u + 1) * hd], &h0[u * hd..(u + 1) * hd]);
                continue;
            }
            let mut mean = vec![0.0; hd];
            for &v in neigh {
                for c in 0..hd {
                    mean[c] += h0[v as usize * hd + c];
                }
            }
            mean.iter_mut().for_each(|m| *m /= neigh.len() as f64);
            let mut z = h0[u * hd..(u + 1) * hd].to_vec();
            z.extend_from_slice(&mean);
            let mut pre = lp.b_update.data.clone();
            for (k, zv) in z.iter().enumerate() {
                for c in 0..hd {
                    pre[c] += zv * lp.w_update.data[k * hd + c];
                }
            }
            for c in 0..hd {
                let expect = pre[c].max(0.0) + h0[u * hd + c];
                let actual = got[u * hd + c];
                assert!((expect - actual).abs() < 1e-9, "node {u} dim {c}");
            }
        }
    }

    #[test]
    fn two_hop_starts_at_configured_layer() {
        // Path 0-1-2: node 2 is exactly two hops from 0.
        let graph = MultiRelationGraph::from_parts(
            3,
            2,
            vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.001],
            vec![0, 1, 0],
            &[vec![(0, 1), (1, 2)]],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = ModelConfig {
            num_layers: 3,
            hidden_dim: 4,
            sim_embed_dim: 2,
            iis_start_layer: 2,
            ..ModelConfig::default()
        };
        let model = Model::new(cfg, 2, 1, &mut rng);
        let cache = CandidateCache::build(&graph, true);
        let tape = Tape::new();
        let handles = model.register(&tape);
        let out = model.forward(&tape, &graph, &cache, &handles, &opts());
        let sel = out.selections.unwrap();
        // Layer 1 (index 0): 1-hop only.
        assert!(!sel[0][0][0].two_hop);
        assert_eq!(sel[0][0][0].candidate_count, 1);
        // Layers 2 and 3: widened set for node 0 includes node 2.
        for l in 1..3 {
            assert!(sel[l][0][0].two_hop);
            assert_eq!(sel[l][0][0].candidate_count, 2);
        }
    }

    #[test]
    fn total_loss_with_zero_lambda_is_plain_cross_entropy() {
        let tape = Tape::new();
        let logits = tape.leaf(2, 2, vec![0.3, -0.3, 0.1, 0.9]);
        let sim = tape.constant(1, 1, vec![123.0]);
        let breakdown = total_loss(&tape, &[logits], &[0, 1], &[1.0, 1.0], &[sim], 0.0);
        let ce = tape.softmax_cross_entropy(logits, &[0, 1], &[1.0, 1.0]);
        assert_eq!(tape.scalar(breakdown.total), tape.scalar(ce));
    }

    #[test]
    fn six_identical_layers_give_six_times_the_loss() {
        let tape = Tape::new();
        let logits = tape.leaf(2, 2, vec![0.3, -0.3, 0.1, 0.9]);
        let sims: Vec<Value> = (0..6).map(|_| tape.constant(1, 1, vec![0.25])).collect();
        let breakdown = total_loss(&tape, &[logits; 6], &[0, 1], &[1.0, 1.0], &sims, 1.0);
        let single = tape.softmax_cross_entropy(logits, &[0, 1], &[1.0, 1.0]);
        let expect = 6.0 * (tape.scalar(single) + 0.25);
        assert!((tape.scalar(breakdown.total) - expect).abs() < 1e-12);
    }

    #[test]
    fn total_loss_matches_hand_summed_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let tape = Tape::new();
        let mut logit_vals = Vec::new();
        let mut sim_vals = Vec::new();
        let mut logits = Vec::new();
        let mut sims = Vec::new();
        let labels: Vec<u8> = (0..4).map(|_| rng.gen_range(0..2) as u8).collect();
        let weights = [1.0, 2.5];
        for _ in 0..3 {
            let lv: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let sv = rng.gen_range(0.0..0.5);
            logits.push(tape.leaf(4, 2, lv.clone()));
            sims.push(tape.constant(1, 1, vec![sv]));
            logit_vals.push(lv);
            sim_vals.push(sv);
        }
        let lambda = 0.7;
        let breakdown = total_loss(&tape, &logits, &labels, &weights, &sims, lambda);

        let mut expect = 0.0;
        for (lv, sv) in logit_vals.iter().zip(&sim_vals) {
            let mut num = 0.0;
            let mut den = 0.0;
            for (i, &y) in labels.iter().enumerate() {
                let (a, b) = (lv[i * 2], lv[i * 2 + 1]);
                let m = a.max(b);
                let lse = m + ((a - m).exp() + (b - m).exp()).ln();
                let nll = lse - if y == 0 { a } else { b };
                num += weights[y as usize] * nll;
                den += weights[y as usize];
            }
            expect += num / den + lambda * sv;
        }
        assert!((tape.scalar(breakdown.total) - expect).abs() < 1e-10);
    }

    #[test]
    fn predict_probabilities_are_in_open_interval() {
        let graph = tiny_graph();
        let model = small_model(&graph, NormMode::BatchWise);
        let cache = CandidateCache::build(&graph, false);
        let probs = model.predict(&graph, &cache, &[0, 1, 2, 3], 64);
        for p in probs {
            assert!(p > 0.0 && p < 1.0);
        }
        assert_eq!(softmax_raw(&[0.0, 0.0])[1], 0.5);
    }
}
