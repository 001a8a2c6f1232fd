//! `schedule`: dumps `α` per step for a schedule given by config keys.

use magattn::schedule::{alpha_at, ScheduleSpec};

use crate::config::{Key, RunConfig, Schema};
use crate::error::{usage, Result};
use crate::output::{write_csv, Manifest, RunOutput};
use crate::Report;

/// Keys describing a schedule; shared with `train`.
pub const SCHEDULE_KEYS: [Key; 7] = [
    Key::new("schedule", "constant", "constant | gradual | cyclic"),
    Key::new("alpha", "0.5", "constant mixing weight"),
    Key::new("alpha_start", "0.01", "gradual: value at step 0"),
    Key::new("alpha_target", "0.5", "gradual: value from ramp_steps on"),
    Key::new("ramp_steps", "100", "gradual: steps of the linear ramp"),
    Key::new("cycle_values", "0,0.5,1.0", "cyclic: values visited in order"),
    Key::new("cycle_period", "100", "cyclic: steps spent on each value"),
];

pub fn schema() -> Schema {
    let mut keys = SCHEDULE_KEYS.to_vec();
    keys.extend([
        Key::new("first_step", "0", "first step to dump"),
        Key::new("steps", "300", "number of steps to dump"),
    ]);
    Schema::new("schedule", "Dump the mixing weight per training step", &keys)
}

/// Builds the schedule named by `schedule` from its parameter keys.
pub fn schedule_from(cfg: &RunConfig) -> Result<ScheduleSpec> {
    let spec = match cfg.raw("schedule") {
        "constant" => ScheduleSpec::constant(cfg.get("alpha")?),
        "gradual" => ScheduleSpec::gradual(cfg.get("alpha_start")?, cfg.get("alpha_target")?, cfg.get("ramp_steps")?),
        "cyclic" => ScheduleSpec::cyclic(cfg.list("cycle_values")?, cfg.get("cycle_period")?),
        other => return usage(format!("schedule '{other}' is not constant, gradual or cyclic")),
    };
    spec.or_else(|e| usage(format!("invalid schedule: {e}")))
}

/// `(step, α)` rows over the configured range.
pub fn dump(cfg: &RunConfig) -> Result<Vec<(usize, f64)>> {
    let spec = schedule_from(cfg)?;
    let first: usize = cfg.get("first_step")?;
    let steps: usize = cfg.get("steps")?;
    (first..first + steps).map(|s| Ok((s, alpha_at(&spec, s)?))).collect()
}

pub fn run(cfg: &RunConfig) -> Result<Report> {
    let rows = dump(cfg)?;
    let spec = schedule_from(cfg)?;
    let out = RunOutput::create(&cfg.out_dir(), "schedule")?;
    write_csv(&out.csv_path(), &["step", "alpha"], rows.iter().map(|(s, a)| [s.to_string(), a.to_string()]))?;
    let mut m = Manifest::default();
    m.note("seed", cfg.seed()?);
    m.note("schedule", &spec);
    m.note("artifact", out.csv_path().display());
    let manifest = m.write(&out, cfg)?;
    println!("schedule {spec}: {} rows -> {}", rows.len(), out.csv_path().display());
    Ok(Report { passed: true, csv: out.csv_path(), manifest })
}

#[cfg(test)]
mod tests {
    use super::*;
    use magattn::schedule::DEFAULT_CYCLE_PERIOD;

    #[test]
    fn default_period_matches_the_library() {
        let key = SCHEDULE_KEYS.iter().find(|k| k.name == "cycle_period").unwrap();
        assert_eq!(key.default, DEFAULT_CYCLE_PERIOD.to_string());
    }

    #[test]
    fn gradual_rows() {
        let s = schema();
        let mut cfg = RunConfig::defaults(&s);
        cfg.set(&s, "schedule", "gradual").unwrap();
        cfg.set(&s, "steps", "101").unwrap();
        let rows = dump(&cfg).unwrap();
        assert_eq!(rows[0], (0, 0.01));
        assert!((rows[50].1 - 0.255).abs() < 1e-12);
        assert_eq!(rows[100], (100, 0.5));
        cfg.set(&s, "schedule", "linear").unwrap();
        assert!(dump(&cfg).is_err());
        cfg.set(&s, "schedule", "constant").unwrap();
        cfg.set(&s, "alpha", "1.5").unwrap();
        assert!(dump(&cfg).is_err());
    }
}
