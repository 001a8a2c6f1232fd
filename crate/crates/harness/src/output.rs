//! Run artifacts: `<command>-<timestamp>.csv` and a matching `.manifest`.
//!
//! The manifest records the run (version, seed, artifacts, summary results) as `#`
//! comment lines followed by the fully resolved configuration as `key = value`
//! lines, so it can be passed back with `--config` to repeat the run.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::error::{io_err, HarnessError, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Names the artifacts of one run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    /// `<command>-<timestamp>`, plus `-N` if that name was taken.
    pub stem: String,
    pub created: String,
}

impl RunOutput {
    pub fn create(dir: &Path, command: &str) -> Result<Self> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let now = chrono::Utc::now();
        let base = format!("{command}-{}", now.format("%Y%m%dT%H%M%S%.3fZ"));
        let mut stem = base.clone();
        let mut n = 1;
        while dir.join(format!("{stem}.csv")).exists() || dir.join(format!("{stem}.manifest")).exists() {
            stem = format!("{base}-{n}");
            n += 1;
        }
        Ok(Self { dir: dir.to_path_buf(), stem, created: now.to_rfc3339() })
    }

    pub fn csv_path(&self) -> PathBuf {
        self.dir.join(format!("{}.csv", self.stem))
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.dir.join(format!("{}.manifest", self.stem))
    }

    /// Sibling artifact path, e.g. `with_suffix("-ckpt")`.
    pub fn with_suffix(&self, suffix: &str) -> PathBuf {
        self.dir.join(format!("{}{suffix}", self.stem))
    }
}

/// Writes a CSV with a header row.
pub fn write_csv<I, R>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
{
    let err = |source| HarnessError::Csv { path: path.to_path_buf(), source };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(r).map_err(err)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Accumulates summary lines for the manifest.
#[derive(Debug, Clone, Default)]
pub struct Manifest {
    notes: Vec<(String, String)>,
}

impl Manifest {
    pub fn note(&mut self, key: impl Into<String>, value: impl ToString) {
        self.notes.push((key.into(), value.to_string()));
    }

    pub fn render(&self, out: &RunOutput, cfg: &RunConfig) -> String {
        let mut s = format!("# magattn {VERSION}\n# command {}\n# created {}\n", cfg.command, out.created);
        for (k, v) in &self.notes {
            s.push_str(&format!("# {k} {v}\n"));
        }
        for (k, v) in cfg.pairs() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    pub fn write(&self, out: &RunOutput, cfg: &RunConfig) -> Result<PathBuf> {
        let path = out.manifest_path();
        fs::write(&path, self.render(out, cfg)).map_err(io_err(&path))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{parse_config, Key, Schema};

    #[test]
    fn names_do_not_collide() {
        let dir = tempfile::tempdir().unwrap();
        let a = RunOutput::create(dir.path(), "demo").unwrap();
        write_csv(&a.csv_path(), &["x"], [["1"]]).unwrap();
        let b = RunOutput::create(dir.path(), "demo").unwrap();
        assert_ne!(a.csv_path(), b.csv_path());
        assert!(a.stem.starts_with("demo-"));
    }

    #[test]
    fn manifest_is_a_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let schema = Schema::new("demo", "", &[Key::new("steps", "10", "")]);
        let cfg = RunConfig::defaults(&schema);
        let out = RunOutput::create(dir.path(), "demo").unwrap();
        let mut m = Manifest::default();
        m.note("result", "ok");
        let text = m.render(&out, &cfg);
        assert!(text.contains("# result ok"));
        let keys: Vec<String> = parse_config(&text).unwrap().into_iter().map(|(_, k, _)| k).collect();
        assert_eq!(keys, ["out", "seed", "steps"]);
    }
}
