//! Per-layer neighbor similarity: a learned embedding per node plus a
//! distance in [0, 2] (cosine) or [0, 1] (mean absolute difference of class
//! scores), and top-fraction filtering of candidate neighbor sets.
//!
//! Selection runs on plain slices — it is a ranking step and carries no
//! gradient. The same module parameters also run on the tape for the margin
//! loss that trains them, since ranking itself is not differentiable.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::params::{xavier_uniform, ParamTensor};
use crate::tape::{cosine_distance_raw, l1_distance_raw, softmax_raw, Tape, Value};

/// Margin used by the label-aware pair loss.
pub const SIM_LOSS_MARGIN: f64 = 0.5;

/// Per-center cap on sampled same-label / different-label pairs.
pub const SIM_PAIRS_PER_CENTER: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SimMode {
    /// Mean absolute difference between 2-class softmax scores.
    L1,
    /// Cosine distance between tanh-activated embeddings.
    Cosine,
}

/// One layer's learned similarity measure: a linear map to a small embedding
/// followed by tanh (cosine mode) or softmax over 2 class scores (l1 mode).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimilarityModule {
    pub mode: SimMode,
    pub weight: ParamTensor,
    pub bias: ParamTensor,
}

/// Outcome of filtering one candidate set for one (center, relation, layer).
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborSelection {
    pub center: u32,
    pub relation: usize,
    /// Kept neighbor ids, sorted ascending.
    pub kept: Vec<u32>,
    /// Distances aligned with `kept`.
    pub distances: Vec<f64>,
    /// Threshold p_r that produced this selection.
    pub threshold: f64,
    /// Size of the candidate set before filtering.
    pub candidate_count: usize,
    /// Whether the candidate set was the widened 2-hop set.
    pub two_hop: bool,
}

impl NeighborSelection {
    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }
}

impl SimilarityModule {
    pub fn new(mode: SimMode, in_dim: usize, embed_dim: usize, rng: &mut impl Rng) -> Self {
        let out_dim = match mode {
            SimMode::L1 => 2,
            SimMode::Cosine => embed_dim,
        };
        assert!(out_dim >= 1, "similarity embedding dim must be >= 1");
        Self {
            mode,
            weight: xavier_uniform(in_dim, out_dim, rng),
            bias: ParamTensor::zeros(1, out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows
    }

    pub fn embed_dim(&self) -> usize {
        self.weight.cols
    }

    /// Embed `n` feature rows without recording gradients (selection path).
    pub fn embed_all(&self, rows: &[f64], n: usize) -> Vec<f64> {
        let (in_dim, out_dim) = (self.in_dim(), self.embed_dim());
        assert_eq!(rows.len(), n * in_dim, "embed_all input shape mismatch");
        let mut out = vec![0.0; n * out_dim];
        for i in 0..n {
            let x = &rows[i * in_dim..(i + 1) * in_dim];
            let y = &mut out[i * out_dim..(i + 1) * out_dim];
            y.copy_from_slice(&self.bias.data);
            for (k, &xv) in x.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let wrow = &self.weight.data[k * out_dim..(k + 1) * out_dim];
                for (yo, wv) in y.iter_mut().zip(wrow) {
                    *yo += xv * wv;
                }
            }
            match self.mode {
                SimMode::Cosine => y.iter_mut().for_each(|v| *v = v.tanh()),
                SimMode::L1 => {
                    let sm = softmax_raw(y);
                    y.copy_from_slice(&sm);
                }
            }
        }
        out
    }

    /// Embed tracked feature rows on the tape (loss path).
    pub fn embed_tape(&self, tape: &Tape, x: Value) -> Value {
        let w = tape.leaf(self.weight.rows, self.weight.cols, self.weight.data.clone());
        let b = tape.leaf(self.bias.rows, self.bias.cols, self.bias.data.clone());
        let z = tape.add_bias(tape.matmul(x, w), b);
        match self.mode {
            SimMode::Cosine => tape.tanh(z),
            SimMode::L1 => tape.softmax_rows(z),
        }
    }

    /// Embed tracked rows through already-registered parameter handles, so
    /// gradients join the rest of the step's accumulation.
    pub fn embed_tracked(&self, tape: &Tape, x: Value, w: Value, b: Value) -> Value {
        let z = tape.add_bias(tape.matmul(x, w), b);
        match self.mode {
            SimMode::Cosine => tape.tanh(z),
            SimMode::L1 => tape.softmax_rows(z),
        }
    }

    /// Distance between two already-embedded rows.
    pub fn distance_raw(&self, e_u: &[f64], e_v: &[f64]) -> f64 {
        match self.mode {
            SimMode::Cosine => cosine_distance_raw(e_u, e_v),
            SimMode::L1 => l1_distance_raw(e_u, e_v),
        }
    }

    /// Per-row distances between aligned embedded rows, on the tape.
    pub fn distance_tape(&self, tape: &Tape, e_u: Value, e_v: Value) -> Value {
        match self.mode {
            SimMode::Cosine => tape.row_cosine_distance(e_u, e_v),
            SimMode::L1 => tape.row_l1_distance(e_u, e_v),
        }
    }

    /// Full differentiable distance between one pair of raw feature rows.
    pub fn pair_distance(&self, tape: &Tape, h_u: Value, h_v: Value) -> Value {
        let e_u = self.embed_tape(tape, h_u);
        let e_v = self.embed_tape(tape, h_v);
        self.distance_tape(tape, e_u, e_v)
    }

    /// Embed and filter one candidate set. `candidate_feats` holds one row of
    /// `in_dim` values per candidate, aligned with `candidates`.
    pub fn select(
        &self,
        center_feat: &[f64],
        candidate_feats: &[f64],
        candidates: &[u32],
        p: f64,
    ) -> (Vec<u32>, Vec<f64>) {
        let center_embed = self.embed_all(center_feat, 1);
        let cand_embeds = self.embed_all(candidate_feats, candidates.len());
        let s = self.embed_dim();
        let distances: Vec<f64> = (0..candidates.len())
            .map(|i| self.distance_raw(&center_embed, &cand_embeds[i * s..(i + 1) * s]))
            .collect();
        filter_by_distance(candidates, &distances, p)
    }
}

/// Keep the ceil(p * n) nearest candidates (at least one when any exist),
/// ties broken by lower node id. Returns kept ids sorted ascending with
/// distances aligned.
pub fn filter_by_distance(candidates: &[u32], distances: &[f64], p: f64) -> (Vec<u32>, Vec<f64>) {
    assert!(p > 0.0 && p <= 1.0, "threshold {p} outside (0, 1]");
    assert_eq!(candidates.len(), distances.len(), "candidate/distance length mismatch");
    let n = candidates.len();
    if n == 0 {
        return (Vec::new(), Vec::new());
    }
    assert!(distances.iter().all(|d| d.is_finite()), "non-finite distance");
    let keep = ((p * n as f64).ceil() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_unstable_by(|&a, &b| {
        distances[a]
            .total_cmp(&distances[b])
            .then(candidates[a].cmp(&candidates[b]))
    });
    order.truncate(keep);
    order.sort_unstable_by_key(|&i| candidates[i]);
    let kept = order.iter().map(|&i| candidates[i]).collect();
    let kept_distances = order.iter().map(|&i| distances[i]).collect();
    (kept, kept_distances)
}

/// Label-aware pair loss on a column of distances: same-label pairs pay their
/// distance, different-label pairs pay the margin shortfall.
pub fn hinge_pair_loss(tape: &Tape, distances: Value, same_label: &[bool], margin: f64) -> Value {
    assert_eq!(distances.cols(), 1, "distances must be a column");
    assert_eq!(distances.rows(), same_label.len(), "pair count mismatch");
    let same_mask: Vec<f64> = same_label.iter().map(|&s| if s { 1.0 } else { 0.0 }).collect();
    let diff_mask: Vec<f64> = same_label.iter().map(|&s| if s { 0.0 } else { 1.0 }).collect();
    let pull = tape.scale_rows(distances, &same_mask);
    let shortfall = tape.relu(tape.add_const(tape.scale(distances, -1.0), margin));
    let push = tape.scale_rows(shortfall, &diff_mask);
    tape.mean_rows(tape.add(pull, push))
}

/// Mean pair loss over sampled (center, neighbor, same_label) feature rows.
/// Empty pair sets contribute a constant zero.
pub fn similarity_loss(
    module: &SimilarityModule,
    tape: &Tape,
    center_feats: Value,
    neighbor_feats: Value,
    same_label: &[bool],
    margin: f64,
) -> Value {
    if same_label.is_empty() {
        return tape.constant(1, 1, vec![0.0]);
    }
    let e_c = module.embed_tape(tape, center_feats);
    let e_n = module.embed_tape(tape, neighbor_feats);
    let d = module.distance_tape(tape, e_c, e_n);
    hinge_pair_loss(tape, d, same_label, margin)
}

/// [`similarity_loss`] against already-registered parameter handles.
#[allow(clippy::too_many_arguments)]
pub fn similarity_loss_tracked(
    module: &SimilarityModule,
    tape: &Tape,
    w: Value,
    b: Value,
    center_feats: Value,
    neighbor_feats: Value,
    same_label: &[bool],
    margin: f64,
) -> Value {
    if same_label.is_empty() {
        return tape.constant(1, 1, vec![0.0]);
    }
    let e_c = module.embed_tracked(tape, center_feats, w, b);
    let e_n = module.embed_tracked(tape, neighbor_feats, w, b);
    let d = module.distance_tape(tape, e_c, e_n);
    hinge_pair_loss(tape, d, same_label, margin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheck};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn module(mode: SimMode) -> SimilarityModule {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        SimilarityModule::new(mode, 4, 3, &mut rng)
    }

    #[test]
    fn identical_inputs_have_zero_distance() {
        let m = module(SimMode::Cosine);
        let x = [0.4, -1.0, 2.0, 0.1];
        let e = m.embed_all(&x, 1);
        assert!(m.distance_raw(&e, &e).abs() < 1e-12);
        let l1 = module(SimMode::L1);
        let e = l1.embed_all(&x, 1);
        assert_eq!(l1.distance_raw(&e, &e), 0.0);
    }

    #[test]
    fn orthogonal_embeddings_have_unit_cosine_distance() {
        // Raw harness: identity embedding, no activation.
        assert_eq!(cosine_distance_raw(&[1.0, 0.0], &[0.0, 1.0]), 1.0);
    }

    #[test]
    fn hand_computed_cosine_distance() {
        // dot = 4, norms sqrt(5) each -> S = 0.8, distance 0.2.
        let d = cosine_distance_raw(&[1.0, 2.0], &[2.0, 1.0]);
        assert!((d - 0.2).abs() < 1e-12);
    }

    #[test]
    fn l1_distance_of_opposite_score_rows_is_one() {
        assert_eq!(l1_distance_raw(&[1.0, 0.0], &[0.0, 1.0]), 1.0);
    }

    #[test]
    fn l1_distance_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = module(SimMode::L1);
        for _ in 0..50 {
            let a: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let ea = m.embed_all(&a, 1);
            let eb = m.embed_all(&b, 1);
            assert_eq!(m.distance_raw(&ea, &eb), m.distance_raw(&eb, &ea));
        }
    }

    #[test]
    fn filter_keeps_nearest_by_ceiling_rule() {
        let candidates = [10, 20, 30];
        let distances = [0.1, 0.5, 0.3];
        let (kept, d) = filter_by_distance(&candidates, &distances, 0.5);
        assert_eq!(kept, vec![10, 30]);
        assert_eq!(d, vec![0.1, 0.3]);
        // ceil(0.67 * 3) = 3 keeps everything.
        let (kept, _) = filter_by_distance(&candidates, &distances, 0.67);
        assert_eq!(kept, vec![10, 20, 30]);
    }

    #[test]
    fn filter_keeps_all_at_full_threshold() {
        let (kept, _) = filter_by_distance(&[1, 2, 3, 4], &[0.9, 0.1, 0.5, 0.2], 1.0);
        assert_eq!(kept, vec![1, 2, 3, 4]);
    }

    #[test]
    fn single_candidate_always_kept() {
        let (kept, _) = filter_by_distance(&[7], &[1.9], 0.01);
        assert_eq!(kept, vec![7]);
    }

    #[test]
    fn ties_break_toward_lower_node_id() {
        let (kept, _) = filter_by_distance(&[5, 2, 9], &[0.5, 0.5, 0.5], 0.3);
        assert_eq!(kept, vec![2]);
        let (kept, _) = filter_by_distance(&[5, 2, 9], &[0.5, 0.5, 0.5], 0.6);
        assert_eq!(kept, vec![2, 5]);
    }

    #[test]
    fn hinge_loss_hand_example() {
        // Same-label pair at 0.2 pays 0.2; different-label pair at 0.1 pays
        // margin 0.5 - 0.1 = 0.4; mean = 0.3.
        let tape = Tape::new();
        let d = tape.leaf(2, 1, vec![0.2, 0.1]);
        let loss = hinge_pair_loss(&tape, d, &[true, false], SIM_LOSS_MARGIN);
        assert!((tape.scalar(loss) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn satisfied_pairs_produce_zero_loss() {
        let tape = Tape::new();
        let d = tape.leaf(2, 1, vec![0.0, 0.9]);
        let loss = hinge_pair_loss(&tape, d, &[true, false], SIM_LOSS_MARGIN);
        assert_eq!(tape.scalar(loss), 0.0);
    }

    #[test]
    fn empty_pair_set_gives_zero_loss() {
        let m = module(SimMode::Cosine);
        let tape = Tape::new();
        let c = tape.constant(0, 4, vec![]);
        let n = tape.constant(0, 4, vec![]);
        let loss = similarity_loss(&m, &tape, c, n, &[], SIM_LOSS_MARGIN);
        assert_eq!(tape.scalar(loss), 0.0);
    }

    #[test]
    fn pair_distance_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for mode in [SimMode::Cosine, SimMode::L1] {
            let m = {
                let mut r = ChaCha8Rng::seed_from_u64(23);
                SimilarityModule::new(mode, 3, 4, &mut r)
            };
            for _ in 0..10 {
                let hu: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let hv: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
                check_gradients(
                    &GradCheck::default(),
                    &[(1, 3, hu), (1, 3, hv)],
                    |t, inputs| m.pair_distance(t, inputs[0], inputs[1]),
                );
            }
        }
    }
}
