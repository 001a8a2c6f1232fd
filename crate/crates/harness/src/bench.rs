//! `bench`: forward wall time of the softmax branch (`α = 0`) and the linear
//! branch (`α = 1`) over a geometric sweep of sequence lengths.

use std::fmt;
use std::time::Instant;

use magattn::attention::{liza_forward, AttentionConfig, AttentionParams, LizaCache};
use magattn::numerics::Eager;
use magattn::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Key, RunConfig, Schema};
use crate::error::{usage, Result};
use crate::output::{write_csv, Manifest, RunOutput};
use crate::Report;

pub fn schema() -> Schema {
    Schema::new(
        "bench",
        "Time the softmax and linear branches over sequence length",
        &[
            Key::new("T", "1024,2048,4096,8192,16384", "sequence lengths").short('T'),
            Key::new("d_head", "32", "head width"),
            Key::new("heads", "1", "number of heads"),
            Key::new("batch", "1", "batch size"),
            Key::new("chunk", "64", "linear-branch chunk size"),
            Key::new("branches", "softmax,linear", "branches to time"),
            Key::new("warmup", "1", "untimed runs per point"),
            Key::new("repeats", "3", "timed runs per point (median reported)"),
            Key::new("slope_softmax", "1.7,2.3", "accepted log-log slope range of the softmax branch"),
            Key::new("slope_linear", "0.8,1.3", "accepted log-log slope range of the linear branch"),
        ],
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    /// `α = 0`: only softmax attention runs.
    Softmax,
    /// `α = 1`: only the linear memory branch runs.
    Linear,
}

impl Branch {
    pub fn alpha(self) -> f64 {
        match self {
            Branch::Softmax => 0.0,
            Branch::Linear => 1.0,
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Branch::Softmax => "softmax",
            Branch::Linear => "linear",
        })
    }
}

impl std::str::FromStr for Branch {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "softmax" => Ok(Self::Softmax),
            "linear" => Ok(Self::Linear),
            _ => Err(format!("unknown branch '{s}' (softmax|linear)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchSpec {
    pub seq_lens: Vec<usize>,
    pub d_head: usize,
    pub heads: usize,
    pub batch: usize,
    pub chunk: usize,
    pub branches: Vec<Branch>,
    pub warmup: usize,
    pub repeats: usize,
}

impl BenchSpec {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        let spec = Self {
            seq_lens: cfg.list("T")?,
            d_head: cfg.get("d_head")?,
            heads: cfg.get("heads")?,
            batch: cfg.get("batch")?,
            chunk: cfg.get("chunk")?,
            branches: cfg.list("branches")?,
            warmup: cfg.get("warmup")?,
            repeats: cfg.get("repeats")?,
        };
        if spec.seq_lens.is_empty() || spec.seq_lens.contains(&0) {
            return usage("T must list positive lengths");
        }
        if spec.d_head == 0 || spec.heads == 0 || spec.batch == 0 || spec.chunk == 0 || spec.repeats == 0 {
            return usage("d_head, heads, batch, chunk and repeats must be positive");
        }
        if spec.branches.is_empty() {
            return usage("branches must name softmax and/or linear");
        }
        Ok(spec)
    }
}

/// One timed point.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub seq_len: usize,
    pub branch: Branch,
    /// Median over the timed repeats.
    pub wall_time_s: f64,
    /// Decoding state this branch keeps for the sequence (KV cache for softmax,
    /// fast-weight state and small buffers for linear).
    pub peak_state_bytes: usize,
    pub repeats: usize,
}

pub fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = points.iter().map(|&(x, y)| (x.ln(), y.ln())).unzip();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

/// Times every `(T, branch)` point. Rows are ordered by branch, then `T`.
pub fn run_bench(spec: &BenchSpec, seed: u64, mut on_row: impl FnMut(&BenchRow)) -> Result<Vec<BenchRow>> {
    let d_model = spec.d_head * spec.heads;
    let mut cfg = AttentionConfig::new(d_model, spec.heads)?;
    cfg.chunk.chunk_size = spec.chunk;
    let params = AttentionParams::<Tensor<f32>>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let mut seq_lens = spec.seq_lens.clone();
    seq_lens.sort_unstable();
    seq_lens.dedup();
    let mut rows = Vec::new();
    for &branch in &spec.branches {
        cfg.mag.alpha = branch.alpha();
        for &t in &seq_lens {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(t as u64));
            let x = Tensor::<f32>::rand_uniform([spec.batch, t, d_model], -1.0, 1.0, &mut rng);
            for _ in 0..spec.warmup {
                liza_forward(&mut Eager, &params, &x, &cfg, None)?;
            }
            let mut times = Vec::with_capacity(spec.repeats);
            for _ in 0..spec.repeats {
                let start = Instant::now();
                let y = liza_forward(&mut Eager, &params, &x, &cfg, None)?;
                times.push(start.elapsed().as_secs_f64());
                std::hint::black_box(y);
            }
            let mut cache = LizaCache::new(&cfg, spec.batch)?;
            liza_forward(&mut Eager, &params, &x, &cfg, Some(&mut cache))?;
            let fp = cache.footprint();
            let elems = match branch {
                Branch::Softmax => fp.softmax,
                Branch::Linear => fp.linear,
            };
            let row = BenchRow {
                seq_len: t,
                branch,
                wall_time_s: median(&mut times),
                peak_state_bytes: elems * std::mem::size_of::<f32>(),
                repeats: spec.repeats,
            };
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Fitted slope of one branch and whether its state stayed constant.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchSummary {
    pub branch: Branch,
    pub slope: f64,
    pub state_constant: bool,
}

pub fn summarize(rows: &[BenchRow]) -> Vec<BranchSummary> {
    let mut out = Vec::new();
    for branch in [Branch::Softmax, Branch::Linear] {
        let pts: Vec<&BenchRow> = rows.iter().filter(|r| r.branch == branch).collect();
        if pts.len() < 2 {
            continue;
        }
        let slope = loglog_slope(&pts.iter().map(|r| (r.seq_len as f64, r.wall_time_s)).collect::<Vec<_>>());
        let state_constant = pts.iter().all(|r| r.peak_state_bytes == pts[0].peak_state_bytes);
        out.push(BranchSummary { branch, slope, state_constant });
    }
    out
}

fn range(cfg: &RunConfig, key: &str) -> Result<(f64, f64)> {
    match cfg.list::<f64>(key)?.as_slice() {
        [lo, hi] if lo <= hi => Ok((*lo, *hi)),
        _ => usage(format!("{key} must be 'low,high'")),
    }
}

pub fn run(cfg: &RunConfig) -> Result<Report> {
    let spec = BenchSpec::from_config(cfg)?;
    let (soft_range, lin_range) = (range(cfg, "slope_softmax")?, range(cfg, "slope_linear")?);
    let out = RunOutput::create(&cfg.out_dir(), "bench")?;
    let rows = run_bench(&spec, cfg.seed()?, |r| {
        println!("{:<8} T={:<6} median={:.4}s state={}B", r.branch, r.seq_len, r.wall_time_s, r.peak_state_bytes)
    })?;
    write_csv(
        &out.csv_path(),
        &["T", "branch", "wall_time_s", "peak_state_bytes", "repeats"],
        rows.iter().map(|r| {
            [r.seq_len.to_string(), r.branch.to_string(), format!("{:.6e}", r.wall_time_s), r.peak_state_bytes.to_string(), r.repeats.to_string()]
        }),
    )?;
    let mut m = Manifest::default();
    m.note("seed", cfg.seed()?);
    let mut passed = true;
    for s in summarize(&rows) {
        let (lo, hi) = if s.branch == Branch::Softmax { soft_range } else { lin_range };
        let slope_ok = (lo..=hi).contains(&s.slope);
        // the softmax KV cache grows with T
        let state_ok = s.branch == Branch::Softmax || s.state_constant;
        passed &= slope_ok && state_ok;
        let line = format!("slope={:.3} range=[{lo},{hi}] state_constant={} pass={}", s.slope, s.state_constant, slope_ok && state_ok);
        println!("{} {line}", s.branch);
        m.note(format!("branch {}", s.branch), line);
    }
    m.note("artifact", out.csv_path().display());
    let manifest = m.write(&out, cfg)?;
    println!("{} -> {}", if passed { "PASS" } else { "FAIL" }, out.csv_path().display());
    Ok(Report { passed, csv: out.csv_path(), manifest })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_laws() {
        let pts: Vec<(f64, f64)> = [1.0, 2.0, 4.0, 8.0].iter().map(|&x| (x, 3.0 * x * x)).collect();
        assert!((loglog_slope(&pts) - 2.0).abs() < 1e-12);
        let pts: Vec<(f64, f64)> = [10.0, 100.0].iter().map(|&x| (x, 0.5 * x)).collect();
        assert!((loglog_slope(&pts) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn medians() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn small_sweep_rows() {
        let spec = BenchSpec {
            seq_lens: vec![32, 16],
            d_head: 4,
            heads: 1,
            batch: 1,
            chunk: 8,
            branches: vec![Branch::Softmax, Branch::Linear],
            warmup: 0,
            repeats: 1,
        };
        let rows = run_bench(&spec, 0, |_| {}).unwrap();
        let key: Vec<(Branch, usize)> = rows.iter().map(|r| (r.branch, r.seq_len)).collect();
        assert_eq!(key, [(Branch::Softmax, 16), (Branch::Softmax, 32), (Branch::Linear, 16), (Branch::Linear, 32)]);
        assert_eq!(rows[1].peak_state_bytes, 2 * rows[0].peak_state_bytes);
        assert_eq!(rows[2].peak_state_bytes, rows[3].peak_state_bytes);
    }
}
