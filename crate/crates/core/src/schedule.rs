//! Mixing-weight (`α`) schedules over training steps.

use std::fmt;

use crate::error::{contract_err, Result};

/// Default dwell time of each cyclic value, in steps.
pub const DEFAULT_CYCLE_PERIOD: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub enum ScheduleSpec {
    Constant { value: f64 },
    /// Linear ramp from `start` to `target` over `ramp_steps`, then flat.
    Gradual { start: f64, target: f64, ramp_steps: usize },
    /// `values[(step / period) % len]`.
    Cyclic { values: Vec<f64>, period: usize },
}

impl ScheduleSpec {
    pub fn constant(value: f64) -> Result<Self> {
        Self::Constant { value }.validated()
    }

    pub fn gradual(start: f64, target: f64, ramp_steps: usize) -> Result<Self> {
        Self::Gradual { start, target, ramp_steps }.validated()
    }

    pub fn cyclic(values: Vec<f64>, period: usize) -> Result<Self> {
        Self::Cyclic { values, period }.validated()
    }

    fn validated(self) -> Result<Self> {
        self.validate()?;
        Ok(self)
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ScheduleSpec::Constant { .. } => "constant",
            ScheduleSpec::Gradual { .. } => "gradual",
            ScheduleSpec::Cyclic { .. } => "cyclic",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, a: f64| {
            if (0.0..=1.0).contains(&a) {
                Ok(())
            } else {
                contract_err("ScheduleSpec", format!("{name} = {a} outside [0, 1]"))
            }
        };
        match self {
            ScheduleSpec::Constant { value } => unit("value", *value),
            ScheduleSpec::Gradual { start, target, ramp_steps } => {
                unit("start", *start)?;
                unit("target", *target)?;
                if *ramp_steps == 0 {
                    return contract_err("ScheduleSpec", "ramp_steps must be >= 1");
                }
                Ok(())
            }
            ScheduleSpec::Cyclic { values, period } => {
                if values.is_empty() || *period == 0 {
                    return contract_err("ScheduleSpec", "cyclic schedule needs values and a period >= 1");
                }
                values.iter().try_for_each(|&v| unit("cycle value", v))
            }
        }
    }
}

impl fmt::Display for ScheduleSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScheduleSpec::Constant { value } => write!(f, "constant({value})"),
            ScheduleSpec::Gradual { start, target, ramp_steps } => {
                write!(f, "gradual({start} -> {target} over {ramp_steps})")
            }
            ScheduleSpec::Cyclic { values, period } => write!(f, "cyclic({values:?} every {period})"),
        }
    }
}

/// `α` at a training step.
pub fn alpha_at(spec: &ScheduleSpec, step: usize) -> Result<f64> {
    spec.validate()?;
    Ok(match spec {
        ScheduleSpec::Constant { value } => *value,
        ScheduleSpec::Gradual { start, target, ramp_steps } => {
            let frac = (step as f64 / *ramp_steps as f64).min(1.0);
            (start + (target - start) * frac).clamp(0.0, 1.0)
        }
        ScheduleSpec::Cyclic { values, period } => values[(step / period) % values.len()],
    })
}

/// `(step, α)` for `step = 0..steps`.
pub fn alpha_table(spec: &ScheduleSpec, steps: usize) -> Result<Vec<(usize, f64)>> {
    (0..steps).map(|s| alpha_at(spec, s).map(|a| (s, a))).collect()
}
