//! End-to-end training: stratified split, per-step full-graph forward,
//! per-layer supervision plus similarity pair loss, Adam updates, threshold
//! adaptation between epochs, and per-epoch held-out evaluation.
//!
//! Every source of randomness derives from the run seed, and all compute is
//! deterministic, so identical configs produce byte-identical logs.

use std::fmt::Write as _;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::graph::MultiRelationGraph;
use crate::metrics::{EvalReport, MetricsError};
use crate::model::{total_loss, CandidateCache, ForwardOpts, Model};
use crate::norm::NormMode;
use crate::optim::AdamState;
use crate::similarity::{similarity_loss_tracked, SimMode, SIM_LOSS_MARGIN, SIM_PAIRS_PER_CENTER};
use crate::tape::Tape;
use crate::threshold::{ThresholdController, ThresholdError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at epoch {epoch} step {step}; aborting")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Threshold(#[from] ThresholdError),
    #[error("evaluation failed: {0}")]
    Metrics(#[from] MetricsError),
}

/// Train/test node ids, both sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<u32>,
    pub test: Vec<u32>,
}

/// Label-stratified split: `train_frac` of each class, rounded, seeded.
pub fn stratified_split(labels: &[u8], train_frac: f64, seed: u64) -> Split {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in [0u8, 1u8] {
        let mut members: Vec<u32> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(u, _)| u as u32)
            .collect();
        let mut rng = rng_for(seed, 0x5_000 + class as u64);
        members.shuffle(&mut rng);
        let take = (train_frac * members.len() as f64).round() as usize;
        train.extend_from_slice(&members[..take]);
        test.extend_from_slice(&members[take..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Split { train, test }
}

/// Class weights countering imbalance: benign weight 1, fraud weight
/// benign/fraud on the training split.
pub fn class_weights(labels: &[u8], train: &[u32]) -> [f64; 2] {
    let fraud = train.iter().filter(|&&u| labels[u as usize] == 1).count();
    let benign = train.len() - fraud;
    if fraud == 0 || benign == 0 {
        [1.0, 1.0]
    } else {
        [1.0, benign as f64 / fraud as f64]
    }
}

#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean over the epoch's steps of the combined objective.
    pub total_loss: f64,
    pub ce_per_layer: Vec<f64>,
    pub sim_per_layer: Vec<f64>,
    /// Thresholds in effect during this epoch, layer-major.
    pub thresholds: Vec<Vec<f64>>,
    /// Mean kept-neighbor distance per (layer, relation).
    pub avg_distance: Vec<Vec<Option<f64>>>,
    /// Mean same-label fraction among kept neighbors, per layer.
    pub label_agreement: Vec<Option<f64>>,
    pub eval: EvalReport,
}

pub struct TrainOutput {
    pub model: Model,
    pub logs: Vec<EpochLog>,
    pub split: Split,
}

fn rng_for(seed: u64, purpose: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Evaluate hard predictions (fraud iff p > 0.5) and ranking on `nodes`.
pub fn evaluate(
    model: &Model,
    graph: &MultiRelationGraph,
    cache: &CandidateCache,
    nodes: &[u32],
    batch_size: usize,
) -> Result<EvalReport, MetricsError> {
    let probs = model.predict(graph, cache, nodes, batch_size);
    let labels: Vec<u8> = nodes.iter().map(|&u| graph.labels()[u as usize]).collect();
    let preds: Vec<u8> = probs.iter().map(|&p| (p > 0.5) as u8).collect();
    EvalReport::compute(&labels, &preds, &probs)
}

/// Sampled similarity pairs for one (layer, step).
struct PairSample {
    centers: Vec<u32>,
    neighbors: Vec<u32>,
    same: Vec<bool>,
}

fn sample_pairs(
    graph: &MultiRelationGraph,
    cache: &CandidateCache,
    two_hop: bool,
    batch: &[u32],
    is_train: &[bool],
    rng: &mut ChaCha8Rng,
) -> PairSample {
    let labels = graph.labels();
    let mut centers = Vec::new();
    let mut neighbors = Vec::new();
    let mut same = Vec::new();
    let mut pool: Vec<u32> = Vec::new();
    for &u in batch {
        pool.clear();
        for r in 0..graph.num_relations() {
            pool.extend_from_slice(cache.candidates(graph, u as usize, r, two_hop));
        }
        pool.sort_unstable();
        pool.dedup();
        pool.retain(|&v| is_train[v as usize] && v != u);
        let (same_pool, diff_pool): (Vec<u32>, Vec<u32>) = pool
            .iter()
            .partition(|&&v| labels[v as usize] == labels[u as usize]);
        for (candidates, is_same) in [(same_pool, true), (diff_pool, false)] {
            for &v in candidates.choose_multiple(rng, SIM_PAIRS_PER_CENTER) {
                centers.push(u);
                neighbors.push(v);
                same.push(is_same);
            }
        }
    }
    PairSample {
        centers,
        neighbors,
        same,
    }
}

fn gather_feature_rows(data: &[f64], width: usize, ids: &[u32]) -> Vec<f64> {
    let mut out = Vec::with_capacity(ids.len() * width);
    for &u in ids {
        let u = u as usize;
        out.extend_from_slice(&data[u * width..(u + 1) * width]);
    }
    out
}

/// Run the full training loop on a loaded graph.
pub fn train(graph: &MultiRelationGraph, cfg: &RunConfig) -> Result<TrainOutput, TrainError> {
    cfg.validate()?;
    let split = stratified_split(graph.labels(), cfg.train_frac, cfg.seed);
    assert!(!split.train.is_empty(), "empty training split");

    let mut model_cfg = cfg.model;
    model_cfg.class_weights = class_weights(graph.labels(), &split.train);
    let mut init_rng = rng_for(cfg.seed, 0x1);
    let mut model = Model::new(
        model_cfg,
        graph.feature_dim(),
        graph.num_relations(),
        &mut init_rng,
    );
    let cache = CandidateCache::build(graph, model.needs_two_hop());
    let mut controller = ThresholdController::new(
        cfg.threshold,
        model.cfg.num_layers,
        graph.num_relations(),
    );
    let mut adam = AdamState::new(cfg.adam, &model.param_sizes());

    let mut is_train = vec![false; graph.num_nodes()];
    for &u in &split.train {
        is_train[u as usize] = true;
    }

    let layers = model.cfg.num_layers;
    let relations = graph.num_relations();
    let mut logs = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let thresholds = controller.snapshot();
        model.set_thresholds(&thresholds);

        let mut order = split.train.clone();
        order.shuffle(&mut rng_for(cfg.seed, 0x10_000 + epoch as u64));

        let mut total_sum = 0.0;
        let mut ce_sums = vec![0.0; layers];
        let mut sim_sums = vec![0.0; layers];
        let mut dist_sums = vec![vec![0.0; relations]; layers];
        let mut dist_counts = vec![vec![0usize; relations]; layers];
        let mut agree_sums = vec![0.0; layers];
        let mut agree_counts = vec![0usize; layers];
        let mut steps = 0usize;

        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let tape = Tape::new();
            let handles = model.register(&tape);
            let opts = ForwardOpts {
                training: true,
                batch_size: cfg.batch_size,
                collect_selections: false,
            };
            let fwd = model.forward(&tape, graph, &cache, &handles, &opts);

            let mut sim_losses = Vec::with_capacity(layers);
            for layer in 1..=layers {
                let mut pair_rng = rng_for(
                    cfg.seed,
                    0x20_000_000
                        + (epoch as u64) * 1_000_003
                        + (step as u64) * 1_009
                        + layer as u64,
                );
                let sample = sample_pairs(
                    graph,
                    &cache,
                    model.layer_uses_two_hop(layer),
                    batch,
                    &is_train,
                    &mut pair_rng,
                );
                let sim = if sample.same.is_empty() {
                    tape.constant(1, 1, vec![0.0])
                } else {
                    let width = model.cfg.hidden_dim;
                    let inputs = &fwd.layer_inputs[layer - 1];
                    // Pair embeddings see the layer inputs as constants: the
                    // auxiliary loss trains the similarity maps only.
                    let c = tape.constant(
                        sample.centers.len(),
                        width,
                        gather_feature_rows(inputs, width, &sample.centers),
                    );
                    let nb = tape.constant(
                        sample.neighbors.len(),
                        width,
                        gather_feature_rows(inputs, width, &sample.neighbors),
                    );
                    similarity_loss_tracked(
                        &model.layers[layer - 1].similarity,
                        &tape,
                        handles.layers[layer - 1].sim_w,
                        handles.layers[layer - 1].sim_b,
                        c,
                        nb,
                        &sample.same,
                        SIM_LOSS_MARGIN,
                    )
                };
                sim_losses.push(sim);
            }

            let batch_labels: Vec<u8> = batch.iter().map(|&u| graph.labels()[u as usize]).collect();
            let batch_logits: Vec<_> = fwd
                .logits
                .iter()
                .map(|&lg| tape.gather_rows(lg, batch))
                .collect();
            let breakdown = total_loss(
                &tape,
                &batch_logits,
                &batch_labels,
                &model.cfg.class_weights,
                &sim_losses,
                model.cfg.lambda_sim,
            );
            let loss_value = tape.scalar(breakdown.total);
            if !loss_value.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, step });
            }

            tape.backward(breakdown.total);
            let grads: Vec<Vec<f64>> = handles.all().iter().map(|&h| tape.grad(h)).collect();
            model.commit_running(fwd.updated_running);
            adam.step(model.params_mut().into_iter().map(|p| &mut p.data), &grads);

            total_sum += loss_value;
            for l in 0..layers {
                ce_sums[l] += breakdown.ce_per_layer[l];
                sim_sums[l] += breakdown.sim_per_layer[l];
                for r in 0..relations {
                    dist_sums[l][r] += fwd.stats[l].dist_sum[r];
                    dist_counts[l][r] += fwd.stats[l].dist_count[r];
                }
                if let Some(a) = fwd.stats[l].label_agreement {
                    agree_sums[l] += a;
                    agree_counts[l] += 1;
                }
            }
            steps += 1;
        }

        let inv = 1.0 / steps as f64;
        let avg_distance: Vec<Vec<Option<f64>>> = (0..layers)
            .map(|l| {
                (0..relations)
                    .map(|r| {
                        (dist_counts[l][r] > 0)
                            .then(|| dist_sums[l][r] / dist_counts[l][r] as f64)
                    })
                    .collect()
            })
            .collect();
        controller.observe_epoch(&avg_distance)?;

        let eval = evaluate(&model, graph, &cache, &split.test, cfg.batch_size)?;
        logs.push(EpochLog {
            epoch,
            total_loss: total_sum * inv,
            ce_per_layer: ce_sums.iter().map(|s| s * inv).collect(),
            sim_per_layer: sim_sums.iter().map(|s| s * inv).collect(),
            thresholds,
            avg_distance,
            label_agreement: (0..layers)
                .map(|l| (agree_counts[l] > 0).then(|| agree_sums[l] / agree_counts[l] as f64))
                .collect(),
            eval,
        });
    }

    Ok(TrainOutput { model, logs, split })
}

// ---- CSV artifacts ---------------------------------------------------------

/// `loss_per_layer.csv`: one row per epoch with the combined objective and
/// per-layer cross-entropy / similarity terms.
pub fn loss_csv(logs: &[EpochLog]) -> String {
    let layers = logs.first().map_or(0, |l| l.ce_per_layer.len());
    let mut out = String::from("# loss_per_layer v1\n");
    out.push_str("epoch,total");
    for l in 1..=layers {
        let _ = write!(out, ",ce_layer{l}");
    }
    for l in 1..=layers {
        let _ = write!(out, ",sim_layer{l}");
    }
    out.push('\n');
    for log in logs {
        let _ = write!(out, "{},{}", log.epoch, log.total_loss);
        for v in &log.ce_per_layer {
            let _ = write!(out, ",{v}");
        }
        for v in &log.sim_per_layer {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// `thresholds.csv`: long format, one row per (epoch, layer, relation).
pub fn thresholds_csv(logs: &[EpochLog]) -> String {
    let mut out = String::from("# thresholds v1\nepoch,layer,relation,threshold\n");
    for log in logs {
        for (l, row) in log.thresholds.iter().enumerate() {
            for (r, p) in row.iter().enumerate() {
                let _ = writeln!(out, "{},{},{},{}", log.epoch, l + 1, r + 1, p);
            }
        }
    }
    out
}

/// `eval_per_epoch.csv`: held-out metrics per epoch.
pub fn eval_csv(logs: &[EpochLog]) -> String {
    let mut out = String::from("# eval_per_epoch v1\n");
    let _ = writeln!(out, "epoch,{}", EvalReport::CSV_HEADER);
    for log in logs {
        let _ = writeln!(out, "{},{}", log.epoch, log.eval.to_csv_row());
    }
    out
}

// ---- Ablation ladder -------------------------------------------------------

/// The four-stage configuration ladder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationStage {
    L1Base,
    Cosine,
    CosineNorm,
    CosineNormIis,
}

impl AblationStage {
    pub const ALL: [AblationStage; 4] = [
        AblationStage::L1Base,
        AblationStage::Cosine,
        AblationStage::CosineNorm,
        AblationStage::CosineNormIis,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AblationStage::L1Base => "l1_base",
            AblationStage::Cosine => "cosine",
            AblationStage::CosineNorm => "cosine_norm",
            AblationStage::CosineNormIis => "cosine_norm_iis",
        }
    }

    /// Derive the stage's config from a base config.
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        let disabled = cfg.model.num_layers + 1;
        match self {
            AblationStage::L1Base => {
                cfg.model.sim_mode = SimMode::L1;
                cfg.model.norm.mode = NormMode::None;
                cfg.model.iis_start_layer = disabled;
            }
            AblationStage::Cosine => {
                cfg.model.sim_mode = SimMode::Cosine;
                cfg.model.norm.mode = NormMode::None;
                cfg.model.iis_start_layer = disabled;
            }
            AblationStage::CosineNorm => {
                cfg.model.sim_mode = SimMode::Cosine;
                cfg.model.norm.mode = NormMode::BatchWise;
                cfg.model.iis_start_layer = disabled;
            }
            AblationStage::CosineNormIis => {
                cfg.model.sim_mode = SimMode::Cosine;
                cfg.model.norm.mode = NormMode::BatchWise;
                cfg.model.iis_start_layer = base.model.iis_start_layer.min(cfg.model.num_layers);
            }
        }
        cfg
    }
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub stage: &'static str,
    pub seed: u64,
    pub recall: f64,
    pub precision: f64,
    pub macro_f1: f64,
    pub auc: f64,
}

/// Run the ladder with shared seeds. Stages run sequentially per seed so the
/// whole table is reproducible.
pub fn run_ablation(
    graph: &MultiRelationGraph,
    base: &RunConfig,
    seeds: &[u64],
) -> Result<Vec<AblationRow>, TrainError> {
    let mut rows = Vec::with_capacity(AblationStage::ALL.len() * seeds.len());
    for stage in AblationStage::ALL {
        for &seed in seeds {
            let mut cfg = stage.apply(base);
            cfg.seed = seed;
            let out = train(graph, &cfg)?;
            let last = out.logs.last().expect("at least one epoch");
            rows.push(AblationRow {
                stage: stage.name(),
                seed,
                recall: last.eval.recall,
                precision: last.eval.precision,
                macro_f1: last.eval.macro_f1,
                auc: last.eval.auc,
            });
        }
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("# ablation v1\nstage,seed,recall,precision,macro_f1,auc\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.stage, r.seed, r.recall, r.precision, r.macro_f1, r.auc
        );
    }
    out
}
