use serde::{Deserialize, Serialize};

use super::config::ScheduleConfig;
use crate::error::{Error, Result};

/// Minimum decrease of the validation loss that counts as an improvement.
pub const IMPROVEMENT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Continue,
    ReduceLr,
    Stop,
}

/// Schedule bookkeeping of a run. `epoch` counts completed training epochs;
/// the validation loss of the untrained model seeds `best_val_loss`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub best_val_loss: Option<f64>,
    pub best_epoch: usize,
    pub epochs_since_improve: usize,
    pub lr_current: f64,
}

impl TrainState {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            epoch: 0,
            best_val_loss: None,
            best_epoch: 0,
            epochs_since_improve: 0,
            lr_current: learning_rate,
        }
    }

    /// State after observing the validation loss of the initial model.
    pub fn with_initial_loss(learning_rate: f64, val_loss: f64) -> Self {
        Self { best_val_loss: Some(val_loss), ..Self::new(learning_rate) }
    }
}

/// Advance the schedule by one epoch given that epoch's validation loss.
pub fn schedule_step(state: &TrainState, val_loss: f64, cfg: &ScheduleConfig) -> Result<(TrainState, Action)> {
    let epoch = state.epoch + 1;
    if !val_loss.is_finite() {
        return Err(Error::Diverged { component: "val_loss".into(), epoch });
    }
    let mut next = state.clone();
    next.epoch = epoch;
    let improved = state.best_val_loss.map_or(true, |best| val_loss < best - IMPROVEMENT_TOLERANCE);
    if improved {
        next.best_val_loss = Some(val_loss);
        next.best_epoch = epoch;
        next.epochs_since_improve = 0;
        return Ok((next, Action::Continue));
    }
    next.epochs_since_improve += 1;
    let waited = next.epochs_since_improve;
    if waited >= cfg.early_stop_patience {
        return Ok((next, Action::Stop));
    }
    if waited % cfg.lr_patience == 0 {
        next.lr_current *= cfg.lr_factor;
        return Ok((next, Action::ReduceLr));
    }
    Ok((next, Action::Continue))
}
