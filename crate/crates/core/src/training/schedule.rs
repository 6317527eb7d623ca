use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Learning rate as a function of the epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant { lr: f64 },
    /// `base / factor^k` after the `k`-th milestone epoch.
    StepDecay {
        base: f64,
        factor: f64,
        milestones: Vec<usize>,
    },
    /// `(first epoch, lr)` segments in increasing epoch order.
    Piecewise { segments: Vec<(usize, f64)> },
}

impl LrSchedule {
    /// 1e-3, divided by 5 at epochs 10 and 20.
    pub fn single_source() -> Self {
        LrSchedule::StepDecay {
            base: 1e-3,
            factor: 5.0,
            milestones: vec![10, 20],
        }
    }

    /// 1e-4 for epochs 0 to 4, then 2e-5.
    pub fn fused() -> Self {
        LrSchedule::Piecewise {
            segments: vec![(0, 1e-4), (5, 2e-5)],
        }
    }

    /// The fused schedule with both rates multiplied by `scale`, for
    /// corpora too small to take enough steps at the default rates.
    pub fn fused_scaled(scale: f64) -> Self {
        LrSchedule::Piecewise {
            segments: vec![(0, 1e-4 * scale), (5, 2e-5 * scale)],
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self {
            LrSchedule::Constant { lr } => *lr,
            LrSchedule::StepDecay {
                base,
                factor,
                milestones,
            } => {
                let k = milestones.iter().filter(|&&m| epoch >= m).count();
                base / factor.powi(k as i32)
            }
            LrSchedule::Piecewise { segments } => segments
                .iter()
                .take_while(|(start, _)| *start <= epoch)
                .last()
                .map_or(0.0, |(_, lr)| *lr),
        }
    }

    /// Checks the schedule against the total epoch count.
    pub fn validate(&self, epochs: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match self {
            LrSchedule::Constant { lr } if !(*lr > 0.0) => bad(format!("learning rate {lr} must be positive")),
            LrSchedule::StepDecay {
                base,
                factor,
                milestones,
            } => {
                if !(*base > 0.0) || !(*factor > 0.0) {
                    return bad("step decay needs a positive base and factor".into());
                }
                if milestones.windows(2).any(|w| w[0] >= w[1]) {
                    return bad("milestones must increase".into());
                }
                if milestones.last().is_some_and(|&m| m >= epochs.max(1)) {
                    return bad(format!("milestone beyond the {epochs} training epochs"));
                }
                Ok(())
            }
            LrSchedule::Piecewise { segments } => {
                if segments.first().is_none_or(|s| s.0 != 0) {
                    return bad("piecewise schedule must start at epoch 0".into());
                }
                if segments.windows(2).any(|w| w[0].0 >= w[1].0) {
                    return bad("piecewise segments must increase".into());
                }
                if segments.iter().any(|s| !(s.1 > 0.0)) {
                    return bad("learning rates must be positive".into());
                }
                if segments.last().is_some_and(|s| s.0 >= epochs.max(1)) {
                    return bad(format!("segment beyond the {epochs} training epochs"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}
