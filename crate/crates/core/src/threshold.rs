//! Between-epoch controller for the per-(layer, relation) keep thresholds.
//!
//! After each epoch the trainer reports the average selected-neighbor
//! distance for every (layer, relation). A falling or equal average earns a
//! +1 reward and nudges the threshold up by one step; a rising average earns
//! -1 and nudges it down. Once 9 of the last 10 rewards point the same
//! positive way (window sum >= 8) the threshold freezes for the rest of the
//! run.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ThresholdError {
    #[error("average distance for layer {layer} relation {relation} is not finite")]
    NonFiniteDistance { layer: usize, relation: usize },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ThresholdConfig {
    /// Step size tau; also the lower clamp for p.
    pub step: f64,
    /// Reward window length.
    pub window: usize,
    /// Freeze when the window sum reaches this value.
    pub freeze_at: i32,
    /// Initial threshold for every (layer, relation).
    pub initial: f64,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        Self {
            step: 0.02,
            window: 10,
            freeze_at: 8,
            initial: 0.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Cell {
    p: f64,
    last_distance: Option<f64>,
    rewards: Vec<i32>,
    frozen: bool,
}

/// Thresholds for every (layer, relation) pair plus their update state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThresholdController {
    cfg: ThresholdConfig,
    layers: usize,
    relations: usize,
    cells: Vec<Cell>,
}

impl ThresholdController {
    pub fn new(cfg: ThresholdConfig, layers: usize, relations: usize) -> Self {
        assert!(cfg.step > 0.0 && cfg.step < 1.0, "step must be in (0, 1)");
        assert!(cfg.initial >= cfg.step && cfg.initial <= 1.0);
        let cells = vec![
            Cell {
                p: cfg.initial,
                last_distance: None,
                rewards: Vec::new(),
                frozen: false,
            };
            layers * relations
        ];
        Self {
            cfg,
            layers,
            relations,
            cells,
        }
    }

    pub fn threshold(&self, layer: usize, relation: usize) -> f64 {
        self.cells[self.index(layer, relation)].p
    }

    pub fn is_frozen(&self, layer: usize, relation: usize) -> bool {
        self.cells[self.index(layer, relation)].frozen
    }

    /// Snapshot of all thresholds, layer-major.
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        (0..self.layers)
            .map(|l| (0..self.relations).map(|r| self.threshold(l, r)).collect())
            .collect()
    }

    fn index(&self, layer: usize, relation: usize) -> usize {
        assert!(layer < self.layers && relation < self.relations);
        layer * self.relations + relation
    }

    /// Feed one epoch's average selected distances. `None` entries (no
    /// observations for that pair this epoch) leave the cell untouched.
    pub fn observe_epoch(&mut self, avg_distance: &[Vec<Option<f64>>]) -> Result<(), ThresholdError> {
        assert_eq!(avg_distance.len(), self.layers, "one row per layer");
        for (l, row) in avg_distance.iter().enumerate() {
            assert_eq!(row.len(), self.relations, "one entry per relation");
            for (r, entry) in row.iter().enumerate() {
                let Some(d) = entry else { continue };
                if !d.is_finite() {
                    return Err(ThresholdError::NonFiniteDistance { layer: l, relation: r });
                }
                let step = self.cfg.step;
                let (window, freeze_at) = (self.cfg.window, self.cfg.freeze_at);
                let idx = self.index(l, r);
                let cell = &mut self.cells[idx];
                if cell.frozen {
                    continue;
                }
                let Some(prev) = cell.last_distance else {
                    // First observation is the baseline; no update.
                    cell.last_distance = Some(*d);
                    continue;
                };
                let reward = if *d <= prev { 1 } else { -1 };
                cell.p = (cell.p + step * reward as f64).clamp(step, 1.0);
                cell.last_distance = Some(*d);
                cell.rewards.push(reward);
                if cell.rewards.len() > window {
                    let drop = cell.rewards.len() - window;
                    cell.rewards.drain(..drop);
                }
                if cell.rewards.len() == window && cell.rewards.iter().sum::<i32>() >= freeze_at {
                    cell.frozen = true;
                }
            }
        }
        Ok(())
    }
}
