use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::model::Phase;

/// Frame interval growing linearly from `start` to `end` over the first
/// `steps` steps of a stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntervalRamp {
    pub start: usize,
    pub end: usize,
    pub steps: usize,
}

impl IntervalRamp {
    pub fn at(&self, step: usize) -> usize {
        if self.steps == 0 || step >= self.steps {
            return self.end;
        }
        let f = step as f64 / self.steps as f64;
        (self.start as f64 + f * (self.end as f64 - self.start as f64)).round() as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrPolicy {
    pub peak: f64,
    /// Fraction of the stage spent in linear warmup.
    pub warmup: f64,
    /// Learning rate reached at the end of the cosine decay, as a fraction
    /// of `peak`.
    pub floor: f64,
}

impl Default for LrPolicy {
    fn default() -> Self {
        Self {
            peak: 3e-4,
            warmup: 0.05,
            floor: 0.0,
        }
    }
}

impl LrPolicy {
    /// Learning rate at `step` of a stage of `total` steps.
    pub fn at(&self, step: usize, total: usize) -> f64 {
        let warm = ((self.warmup * total as f64).ceil() as usize).max(1);
        if step < warm {
            return self.peak * (step + 1) as f64 / warm as f64;
        }
        let span = total.saturating_sub(warm).max(1);
        let f = ((step - warm) as f64 / span as f64).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * f).cos());
        self.peak * (self.floor + (1.0 - self.floor) * cos)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub phase: Phase,
    pub views: usize,
    pub interval: IntervalRamp,
    pub steps: usize,
    /// Camera loss weight for this stage.
    pub lambda: f64,
    pub lr: LrPolicy,
}

impl Stage {
    /// First-to-last frame distance at the start of the stage.
    pub fn initial_span(&self) -> usize {
        (self.views - 1) * self.interval.start
    }

    pub fn final_span(&self) -> usize {
        (self.views - 1) * self.interval.end
    }

    pub fn name(&self) -> String {
        let p = match self.phase {
            Phase::Distill => "distill",
            Phase::Nvs => "nvs",
        };
        format!("{p}@{}", self.views)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSchedule {
    pub stages: Vec<Stage>,
}

/// Step budgets of the default curriculum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageBudgets {
    pub distill: usize,
    pub nvs2: usize,
    pub nvs4: usize,
    pub nvs8: usize,
}

impl Default for StageBudgets {
    fn default() -> Self {
        Self {
            distill: 5000,
            nvs2: 10000,
            nvs4: 5000,
            nvs8: 5000,
        }
    }
}

impl TrainingSchedule {
    /// Distillation on two views, then novel-view training on 2, 4 and 8
    /// views, truncated at `max_views`. Each stage opens with a span no
    /// wider than the previous stage ends with.
    pub fn default_for(max_views: usize, budgets: StageBudgets, lambda: f64, lr: LrPolicy) -> Result<Self, TrainError> {
        if ![2, 4, 8].contains(&max_views) {
            return Err(TrainError::Schedule(format!("max views must be 2, 4 or 8, got {max_views}")));
        }
        let ramp = |start, end, steps: usize| IntervalRamp {
            start,
            end,
            steps: steps / 2,
        };
        let stage = |phase, views, interval, steps| Stage {
            phase,
            views,
            interval,
            steps,
            lambda,
            lr,
        };
        let mut stages = vec![
            stage(Phase::Distill, 2, ramp(1, 4, budgets.distill), budgets.distill),
            stage(Phase::Nvs, 2, ramp(2, 6, budgets.nvs2), budgets.nvs2),
        ];
        if max_views >= 4 {
            stages.push(stage(Phase::Nvs, 4, ramp(2, 3, budgets.nvs4), budgets.nvs4));
        }
        if max_views >= 8 {
            stages.push(stage(Phase::Nvs, 8, ramp(1, 2, budgets.nvs8), budgets.nvs8));
        }
        let s = Self { stages };
        s.validate(max_views, None)?;
        Ok(s)
    }

    pub fn total_steps(&self) -> usize {
        self.stages.iter().map(|s| s.steps).sum()
    }

    /// Stage index and step within it for a global step, or `None` past the
    /// end.
    pub fn locate(&self, step: usize) -> Option<(usize, usize)> {
        let mut base = 0;
        for (i, s) in self.stages.iter().enumerate() {
            if step < base + s.steps {
                return Some((i, step - base));
            }
            base += s.steps;
        }
        None
    }

    /// Checks view counts, ramps and span encapsulation; with `frames`, also
    /// that every clip fits a trajectory of that length.
    pub fn validate(&self, max_views: usize, frames: Option<usize>) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Schedule(m));
        if self.stages.is_empty() {
            return bad("schedule has no stages".into());
        }
        let mut last_nvs_views = 0;
        for (i, s) in self.stages.iter().enumerate() {
            let name = s.name();
            if s.views < 1 || s.views > max_views {
                return bad(format!("stage {i} ({name}) uses {} views, model allows {max_views}", s.views));
            }
            if s.interval.start == 0 || s.interval.end < s.interval.start {
                return bad(format!("stage {i} ({name}) has interval ramp {}..{}", s.interval.start, s.interval.end));
            }
            if s.steps == 0 || !(s.lr.peak > 0.0) {
                return bad(format!("stage {i} ({name}) needs positive steps and learning rate"));
            }
            if let Some(f) = frames {
                if s.final_span() >= f {
                    return bad(format!("stage {i} ({name}) spans {} frames of {f}", s.final_span() + 1));
                }
            }
            if s.phase == Phase::Nvs {
                if s.views < last_nvs_views {
                    return bad(format!("stage {i} ({name}) reduces the view count"));
                }
                last_nvs_views = s.views;
            }
            if i > 0 {
                let prev = &self.stages[i - 1];
                if s.initial_span() > prev.final_span() {
                    return bad(format!(
                        "stage {i} ({name}) opens with span {} wider than the previous stage's final span {}",
                        s.initial_span(),
                        prev.final_span()
                    ));
                }
            }
        }
        if last_nvs_views != max_views {
            return bad(format!("novel-view stages end at {last_nvs_views} views, expected {max_views}"));
        }
        Ok(())
    }
}
