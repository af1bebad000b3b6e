//! Partial neighborhood normalization.
//!
//! Both variants normalize the post-aggregation center embedding using
//! statistics of the similarity-selected neighbors' message sums, weighted by
//! the per-relation thresholds. There are no learnable scale or shift
//! parameters. Rows whose selection is empty bypass normalization entirely
//! and are excluded from any statistics.
//!
//! Node-wise: per center u with combined message t = sum_r p_r * msgsum_r and
//! n = |selected(u)| over all relations,
//!
//! ```text
//! mu      = (1 / (d n)) sum_i t_i
//! sigma^2 = (1 / (d n)) sum_i (t_i - mu)^2
//! out     = (h - mu) / sqrt(sigma^2 + eps)
//! ```
//!
//! Batch-wise: per feature i over the m statistics-included rows,
//!
//! ```text
//! mu_i      = (1/m) sum_j t_{j,i} / n_j
//! sigma_i^2 = (1/m) sum_j (t_{j,i} - mu_i)^2 / n_j
//! out_{j,i} = (h_{j,i} - mu_i) / sqrt(sigma_i^2 + eps)
//! ```
//!
//! Note the asymmetry in the batch-wise variance: the deviation uses the raw
//! message sum t_{j,i}, while 1/n_j weights the squared deviation from
//! outside. That is the committed formula; the oracle tests transcribe it
//! with plain loops.

use serde::{Deserialize, Serialize};

use crate::tape::{Tape, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormMode {
    None,
    NodeWise,
    BatchWise,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NormConfig {
    pub mode: NormMode,
    pub eps: f64,
    /// Running-statistics momentum for batch-wise inference.
    pub momentum: f64,
}

impl Default for NormConfig {
    fn default() -> Self {
        Self {
            mode: NormMode::None,
            eps: 1e-5,
            momentum: 0.9,
        }
    }
}

/// Running per-feature statistics for batch-wise inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
        }
    }

    fn update(&mut self, momentum: f64, mean: &[f64], var: &[f64]) {
        for (m, x) in self.mean.iter_mut().zip(mean) {
            *m = momentum * *m + (1.0 - momentum) * x;
        }
        for (v, x) in self.var.iter_mut().zip(var) {
            *v = momentum * *v + (1.0 - momentum) * x;
        }
    }
}

/// Result of a normalization op: the output tensor and how many rows bypassed
/// normalization because they had no selected neighbors.
pub struct NormOutcome {
    pub out: Value,
    pub bypassed: usize,
}

/// Dispatch on mode; `None` is an exact pass-through.
#[allow(clippy::too_many_arguments)]
pub fn apply(
    tape: &Tape,
    cfg: &NormConfig,
    h: Value,
    msg_sums: &[Value],
    weights: &[f64],
    n_sel: &[usize],
    training: bool,
    running: Option<&mut RunningStats>,
) -> NormOutcome {
    match cfg.mode {
        NormMode::None => NormOutcome { out: h, bypassed: 0 },
        NormMode::NodeWise => node_wise_normalize(tape, h, msg_sums, weights, n_sel, cfg.eps),
        NormMode::BatchWise => batch_wise_normalize(
            tape,
            h,
            msg_sums,
            weights,
            n_sel,
            training,
            cfg,
            running.expect("batch-wise normalization needs running stats"),
        ),
    }
}

/// Combined message t = sum_r p_r * msgsum_r.
fn combine(tape: &Tape, msg_sums: &[Value], weights: &[f64]) -> Value {
    assert_eq!(msg_sums.len(), weights.len(), "one weight per relation");
    assert!(!msg_sums.is_empty(), "at least one relation required");
    let mut t = tape.scale(msg_sums[0], weights[0]);
    for (m, &p) in msg_sums.iter().zip(weights).skip(1) {
        t = tape.add(t, tape.scale(*m, p));
    }
    t
}

/// Split rows into (normalized rows, bypass rows) and re-assemble in the
/// original order after `f` maps the active sub-block.
fn with_active_rows(
    tape: &Tape,
    h: Value,
    msg_sums: &[Value],
    n_sel: &[usize],
    f: impl FnOnce(Value, &[Value], &[usize]) -> Value,
) -> NormOutcome {
    let m = h.rows();
    let active: Vec<u32> = (0..m).filter(|&j| n_sel[j] > 0).map(|j| j as u32).collect();
    let bypass: Vec<u32> = (0..m).filter(|&j| n_sel[j] == 0).map(|j| j as u32).collect();
    if bypass.is_empty() {
        return NormOutcome {
            out: f(h, msg_sums, n_sel),
            bypassed: 0,
        };
    }
    if active.is_empty() {
        return NormOutcome { out: h, bypassed: m };
    }
    let h_active = tape.gather_rows(h, &active);
    let msgs_active: Vec<Value> = msg_sums.iter().map(|&s| tape.gather_rows(s, &active)).collect();
    let n_active: Vec<usize> = active.iter().map(|&j| n_sel[j as usize]).collect();
    let out_active = f(h_active, &msgs_active, &n_active);
    let h_bypass = tape.gather_rows(h, &bypass);
    let stacked = tape.vcat(&[out_active, h_bypass]);
    // Stacked row order is [active..., bypass...]; permute back to input order.
    let mut perm = vec![0u32; m];
    for (pos, &j) in active.iter().chain(bypass.iter()).enumerate() {
        perm[j as usize] = pos as u32;
    }
    NormOutcome {
        out: tape.permute_rows(stacked, &perm),
        bypassed: bypass.len(),
    }
}

/// Normalize each row by the scalar mean/variance of its own combined
/// neighborhood message. Rows with `n_sel == 0` pass through unchanged.
pub fn node_wise_normalize(
    tape: &Tape,
    h: Value,
    msg_sums: &[Value],
    weights: &[f64],
    n_sel: &[usize],
    eps: f64,
) -> NormOutcome {
    assert!(h.rows() > 0, "empty batch");
    assert_eq!(n_sel.len(), h.rows(), "one selection count per row");
    assert!(eps > 0.0, "eps must be positive");
    let d = h.cols();
    with_active_rows(tape, h, msg_sums, n_sel, |h, msgs, n| {
        let t = combine(tape, msgs, weights);
        let inv_dn: Vec<f64> = n.iter().map(|&k| 1.0 / (d as f64 * k as f64)).collect();
        let mu = tape.scale_rows(tape.row_sum(t), &inv_dn);
        let dev = tape.sub_col_broadcast(t, mu);
        let var = tape.scale_rows(tape.row_sum(tape.mul(dev, dev)), &inv_dn);
        let denom = tape.sqrt(tape.add_const(var, eps));
        tape.div_col_broadcast(tape.sub_col_broadcast(h, mu), denom)
    })
}

/// Normalize each feature by statistics over the batch's selected-message
/// sums. Training mode folds the batch statistics into `running`; inference
/// mode reads them instead.
#[allow(clippy::too_many_arguments)]
pub fn batch_wise_normalize(
    tape: &Tape,
    h: Value,
    msg_sums: &[Value],
    weights: &[f64],
    n_sel: &[usize],
    training: bool,
    cfg: &NormConfig,
    running: &mut RunningStats,
) -> NormOutcome {
    assert!(h.rows() > 0, "empty batch");
    assert_eq!(n_sel.len(), h.rows(), "one selection count per row");
    assert_eq!(running.mean.len(), h.cols(), "running stats dim mismatch");
    let eps = cfg.eps;
    if !training {
        let mu = tape.constant(1, h.cols(), running.mean.clone());
        let var = tape.constant(1, h.cols(), running.var.clone());
        let denom = tape.sqrt(tape.add_const(var, eps));
        return with_active_rows(tape, h, msg_sums, n_sel, |h, _, _| {
            tape.div_row_broadcast(tape.sub_row_broadcast(h, mu), denom)
        });
    }
    let momentum = cfg.momentum;
    let mut batch_stats: Option<(Vec<f64>, Vec<f64>)> = None;
    let outcome = with_active_rows(tape, h, msg_sums, n_sel, |h, msgs, n| {
        let t = combine(tape, msgs, weights);
        let inv_n: Vec<f64> = n.iter().map(|&k| 1.0 / k as f64).collect();
        let mu = tape.mean_rows(tape.scale_rows(t, &inv_n));
        let dev = tape.sub_row_broadcast(t, mu);
        let var = tape.mean_rows(tape.scale_rows(tape.mul(dev, dev), &inv_n));
        batch_stats = Some((tape.value(mu), tape.value(var)));
        let denom = tape.sqrt(tape.add_const(var, eps));
        tape.div_row_broadcast(tape.sub_row_broadcast(h, mu), denom)
    });
    if let Some((mean, var)) = batch_stats {
        running.update(momentum, &mean, &var);
    }
    outcome
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheck};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    const EPS: f64 = 1e-5;

    fn cfg(mode: NormMode) -> NormConfig {
        NormConfig {
            mode,
            eps: EPS,
            momentum: 0.9,
        }
    }

    #[test]
    fn node_wise_hand_example() {
        // One relation, p = 1, one neighbor with features [2, 2], center
        // h = [4, 0]: mu = 2, sigma^2 = 0, out = [2, -2] / sqrt(eps).
        let tape = Tape::new();
        let h = tape.leaf(1, 2, vec![4.0, 0.0]);
        let msg = tape.leaf(1, 2, vec![2.0, 2.0]);
        let res = node_wise_normalize(&tape, h, &[msg], &[1.0], &[1], EPS);
        let expect = 2.0 / EPS.sqrt();
        let got = tape.value(res.out);
        assert!((got[0] - expect).abs() < 1e-9);
        assert!((got[1] + expect).abs() < 1e-9);
        assert_eq!(res.bypassed, 0);
    }

    #[test]
    fn node_wise_centered_input_maps_to_zero() {
        // h equal to broadcast(mu) normalizes to the zero vector.
        let tape = Tape::new();
        let h = tape.leaf(1, 2, vec![2.0, 2.0]);
        let msg = tape.leaf(1, 2, vec![2.0, 2.0]);
        let res = node_wise_normalize(&tape, h, &[msg], &[1.0], &[1], EPS);
        assert_eq!(tape.value(res.out), vec![0.0, 0.0]);
    }

    #[test]
    fn node_wise_mean_scales_with_neighbors() {
        // With h = 0 and a constant message the variance is 0, so the output
        // is -mu/sqrt(eps); doubling the message must double it exactly.
        let tape = Tape::new();
        let h = tape.leaf(1, 3, vec![0.0, 0.0, 0.0]);
        let once = tape.leaf(1, 3, vec![1.5, 1.5, 1.5]);
        let twice = tape.leaf(1, 3, vec![3.0, 3.0, 3.0]);
        let a = node_wise_normalize(&tape, h, &[once], &[1.0], &[1], EPS);
        let b = node_wise_normalize(&tape, h, &[twice], &[1.0], &[1], EPS);
        let (a, b) = (tape.value(a.out), tape.value(b.out));
        for i in 0..3 {
            assert!((b[i] - 2.0 * a[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_selection_rows_pass_through() {
        let tape = Tape::new();
        let h = tape.leaf(2, 2, vec![4.0, 0.0, 7.0, -3.0]);
        let msg = tape.leaf(2, 2, vec![2.0, 2.0, 0.0, 0.0]);
        let res = node_wise_normalize(&tape, h, &[msg], &[1.0], &[1, 0], EPS);
        let got = tape.value(res.out);
        assert_eq!(res.bypassed, 1);
        assert_eq!(&got[2..], &[7.0, -3.0]);
        assert!((got[0] - 2.0 / EPS.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn batch_wise_symmetric_messages_have_zero_mean() {
        let tape = Tape::new();
        let h = tape.leaf(2, 2, vec![1.0, 1.0, 1.0, 1.0]);
        let msg = tape.leaf(2, 2, vec![3.0, -2.0, -3.0, 2.0]);
        let mut running = RunningStats::new(2);
        let c = cfg(NormMode::BatchWise);
        let _ = batch_wise_normalize(&tape, h, &[msg], &[1.0], &[1, 1], true, &c, &mut running);
        // momentum 0.9 over initial mean 0: updated mean stays 0 exactly.
        assert_eq!(running.mean, vec![0.0, 0.0]);
    }

    #[test]
    fn batch_wise_identical_self_consistent_rows_normalize_to_zero() {
        // Every node: one selected neighbor, message sum equal to its own h.
        let tape = Tape::new();
        let h = tape.leaf(3, 2, vec![2.0, -1.0, 2.0, -1.0, 2.0, -1.0]);
        let msg = tape.leaf(3, 2, vec![2.0, -1.0, 2.0, -1.0, 2.0, -1.0]);
        let mut running = RunningStats::new(2);
        let c = cfg(NormMode::BatchWise);
        let res = batch_wise_normalize(&tape, h, &[msg], &[1.0], &[1, 1, 1], true, &c, &mut running);
        for v in tape.value(res.out) {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn batch_wise_matches_loop_oracle() {
        // Literal loop transcription of the committed formula, independent of
        // the tape composition.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let (m, d, r) = (8, 4, 2);
            let h: Vec<f64> = (0..m * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let msgs: Vec<Vec<f64>> = (0..r)
                .map(|_| (0..m * d).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .collect();
            let weights: Vec<f64> = (0..r).map(|_| rng.gen_range(0.1..1.0)).collect();
            let n_sel: Vec<usize> = (0..m).map(|_| rng.gen_range(1..6)).collect();

            let tape = Tape::new();
            let hh = tape.leaf(m, d, h.clone());
            let mm: Vec<Value> = msgs.iter().map(|x| tape.leaf(m, d, x.clone())).collect();
            let mut running = RunningStats::new(d);
            let c = cfg(NormMode::BatchWise);
            let res = batch_wise_normalize(&tape, hh, &mm, &weights, &n_sel, true, &c, &mut running);
            let got = tape.value(res.out);

            let oracle = batch_oracle(&h, &msgs, &weights, &n_sel, m, d, EPS);
            for (a, b) in got.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-12, "batch-wise mismatch {a} vs {b}");
            }
        }
    }

    fn batch_oracle(
        h: &[f64],
        msgs: &[Vec<f64>],
        weights: &[f64],
        n_sel: &[usize],
        m: usize,
        d: usize,
        eps: f64,
    ) -> Vec<f64> {
        let mut out = vec![0.0; m * d];
        for i in 0..d {
            let mut mu = 0.0;
            for j in 0..m {
                let mut t = 0.0;
                for (r, msg) in msgs.iter().enumerate() {
                    t += weights[r] * msg[j * d + i];
                }
                mu += t / n_sel[j] as f64;
            }
            mu /= m as f64;
            let mut var = 0.0;
            for j in 0..m {
                let mut t = 0.0;
                for (r, msg) in msgs.iter().enumerate() {
                    t += weights[r] * msg[j * d + i];
                }
                var += (t - mu) * (t - mu) / n_sel[j] as f64;
            }
            var /= m as f64;
            for j in 0..m {
                out[j * d + i] = (h[j * d + i] - mu) / (var + eps).sqrt();
            }
        }
        out
    }

    #[test]
    fn node_wise_invariant_to_relation_order() {
        let tape = Tape::new();
        let h = tape.leaf(1, 2, vec![1.0, -1.0]);
        let m1 = tape.leaf(1, 2, vec![0.5, 2.0]);
        let m2 = tape.leaf(1, 2, vec![-1.0, 0.25]);
        let a = node_wise_normalize(&tape, h, &[m1, m2], &[0.3, 0.8], &[3], EPS);
        let b = node_wise_normalize(&tape, h, &[m2, m1], &[0.8, 0.3], &[3], EPS);
        for (x, y) in tape.value(a.out).iter().zip(tape.value(b.out).iter()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn inference_uses_running_statistics() {
        let tape = Tape::new();
        let h = tape.leaf(1, 2, vec![3.0, 5.0]);
        let msg = tape.leaf(1, 2, vec![0.0, 0.0]);
        let mut running = RunningStats {
            mean: vec![1.0, 1.0],
            var: vec![4.0, 4.0],
        };
        let c = cfg(NormMode::BatchWise);
        let res = batch_wise_normalize(&tape, h, &[msg], &[1.0], &[1], false, &c, &mut running);
        let got = tape.value(res.out);
        assert!((got[0] - 2.0 / (4.0 + EPS).sqrt()).abs() < 1e-12);
        assert!((got[1] - 4.0 / (4.0 + EPS).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let (m, d) = (4, 3);
            let h: Vec<f64> = (0..m * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let msg: Vec<f64> = (0..m * d).map(|_| rng.gen_range(1.0..3.0)).collect();
            let n_sel = vec![2usize; m];
            check_gradients(
                &GradCheck::default(),
                &[(m, d, h.clone()), (m, d, msg.clone())],
                |t, inputs| {
                    let res = node_wise_normalize(t, inputs[0], &[inputs[1]], &[0.7], &n_sel, EPS);
                    t.mean_rows(t.row_sum(t.mul(res.out, res.out)))
                },
            );
            check_gradients(
                &GradCheck::default(),
                &[(m, d, h), (m, d, msg)],
                |t, inputs| {
                    let c = cfg(NormMode::BatchWise);
                    let mut running = RunningStats::new(d);
                    let res = batch_wise_normalize(
                        t, inputs[0], &[inputs[1]], &[0.7], &n_sel, true, &c, &mut running,
                    );
                    t.mean_rows(t.row_sum(t.mul(res.out, res.out)))
                },
            );
        }
    }
}
