//! Multi-stage loss schedule and the cosine learning-rate decay.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Which pair losses are live in an epoch. Cross-entropy is always live.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageLosses {
    pub cl: bool,
    pub kl: bool,
}

impl StageLosses {
    pub const CL_ONLY: StageLosses = StageLosses { cl: true, kl: false };
    pub const BOTH: StageLosses = StageLosses { cl: true, kl: true };
    pub const KL_ONLY: StageLosses = StageLosses { cl: false, kl: true };
    pub const NONE: StageLosses = StageLosses { cl: false, kl: false };

    /// 1, 2 or 3 for the stage this set corresponds to; 0 for no pair loss.
    pub fn stage_number(self) -> u8 {
        match (self.cl, self.kl) {
            (true, false) => 1,
            (true, true) => 2,
            (false, true) => 3,
            (false, false) => 0,
        }
    }
}

/// Stage 1 (contrastive only) covers the first `first_percent` of epochs,
/// stage 3 (KL only) the last `last_percent`, stage 2 (both) the rest.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageSchedule {
    pub first_percent: u32,
    pub last_percent: u32,
    pub total_epochs: usize,
}

impl StageSchedule {
    pub fn new(first_percent: u32, last_percent: u32, total_epochs: usize) -> Result<Self> {
        let s = StageSchedule {
            first_percent,
            last_percent,
            total_epochs,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.first_percent + self.last_percent > 100 {
            return Err(Error::config(
                "stage.x_percent, stage.y_percent",
                format!(
                    "x + y must not exceed 100, got x = {} and y = {}",
                    self.first_percent, self.last_percent
                ),
            ));
        }
        Ok(())
    }

    pub fn first_stage_epochs(&self) -> usize {
        self.first_percent as usize * self.total_epochs / 100
    }

    pub fn last_stage_epochs(&self) -> usize {
        self.last_percent as usize * self.total_epochs / 100
    }

    pub fn stage_of(&self, epoch: usize) -> Result<StageLosses> {
        self.validate()?;
        if epoch >= self.total_epochs {
            return Err(Error::contract(format!(
                "epoch {epoch} outside schedule of {} epochs",
                self.total_epochs
            )));
        }
        if epoch < self.first_stage_epochs() {
            Ok(StageLosses::CL_ONLY)
        } else if epoch >= self.total_epochs - self.last_stage_epochs() {
            Ok(StageLosses::KL_ONLY)
        } else {
            Ok(StageLosses::BOTH)
        }
    }
}

/// `min + ½(max − min)(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total_steps: usize, max_lr: f64, min_lr: f64) -> f64 {
    if total_steps == 0 {
        return max_lr;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    min_lr + 0.5 * (max_lr - min_lr) * (1.0 + (PI * t).cos())
}
