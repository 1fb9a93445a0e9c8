//! Server interpolation-rate schedule `f(t)`.

use std::f64::consts::PI;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScheduleShape {
    CosineAnnealing,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleSpec {
    pub eta_max: f64,
    pub eta_min: f64,
    pub total_rounds: u32,
    pub shape: ScheduleShape,
}

impl ScheduleSpec {
    pub fn new(eta_max: f64, eta_min: f64, total_rounds: u32, shape: ScheduleShape) -> Result<Self> {
        if !(0.0 <= eta_min && eta_min <= eta_max && eta_max <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "schedule needs 0 <= eta_min <= eta_max <= 1, got eta_min={eta_min}, eta_max={eta_max}"
            )));
        }
        Ok(Self {
            eta_max,
            eta_min,
            total_rounds,
            shape,
        })
    }

    pub fn constant(eta: f64, total_rounds: u32) -> Result<Self> {
        Self::new(eta, eta, total_rounds, ScheduleShape::Constant)
    }

    /// `f(t)`. Cosine annealing follows
    /// `eta_min + (eta_max - eta_min) * (1 + cos(pi * t / T)) / 2`
    /// and returns the endpoints exactly at `t = 0` and `t = T`.
    pub fn value(&self, t: u32) -> Result<f64> {
        if t > self.total_rounds {
            return Err(Error::InvalidArgument(format!(
                "round {t} past the schedule horizon {}",
                self.total_rounds
            )));
        }
        Ok(match self.shape {
            ScheduleShape::Constant => self.eta_max,
            ScheduleShape::CosineAnnealing => {
                if t == 0 {
                    self.eta_max
                } else if t == self.total_rounds {
                    self.eta_min
                } else {
                    let progress = t as f64 / self.total_rounds as f64;
                    let v = self.eta_min
                        + 0.5 * (self.eta_max - self.eta_min) * (1.0 + (PI * progress).cos());
                    v.clamp(self.eta_min, self.eta_max)
                }
            }
        })
    }
}

/// Free-function form of [`ScheduleSpec::value`].
pub fn schedule_value(s: &ScheduleSpec, t: u32) -> Result<f64> {
    s.value(t)
}
