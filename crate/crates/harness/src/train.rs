//! `train`: trains the toy model on a synthetic task, streaming the trajectory to
//! CSV, checkpointing, and reporting held-out accuracy at the end.

use std::path::PathBuf;

use magattn::attention::{AttentionConfig, BetaSource, Mixing};
use magattn::expansion::{ExpansionMode, ExpansionSpec};
use magattn::memory::StateNonlinearity;
use magattn_toy::checkpoint::{load, save};
use magattn_toy::{build_model, evaluate, headline, Accuracy, ModelConfig, ParityTargets, StepRecord, TaskKind, TaskSpec, TrainConfig, Trainer};

use crate::config::{Key, RunConfig, Schema};
use crate::error::{usage, HarnessError, Result};
use crate::output::{Manifest, RunOutput};
use crate::schedule::{schedule_from, SCHEDULE_KEYS};
use crate::Report;

const TRAIN_KEYS: [Key; 26] = [
    Key::new("task", "copy", "parity | copy | assoc_recall"),
    Key::new("length", "16", "parity bits, copy symbols or recall pairs"),
    Key::new("vocab", "16", "task vocabulary (parity always uses 2)"),
    Key::new("parity_targets", "running", "parity: score every prefix (running) or the last bit (final)"),
    Key::new("d_model", "64", "model width"),
    Key::new("n_heads", "2", "attention heads"),
    Key::new("n_layers", "2", "transformer blocks"),
    Key::new("mlp_hidden", "256", "MLP hidden width"),
    Key::new("max_seq_len", "64", "longest sequence the position table covers"),
    Key::new("tie_embeddings", "false", "reuse the token embedding as the output head"),
    Key::new("nh", "1", "virtual tokens per real token"),
    Key::new("expansion", "derivative", "derivative | rotary | both | alternate"),
    Key::new("chunk", "64", "linear-branch chunk size"),
    Key::new("nonlinearity", "none", "chunk-boundary state map: none | gelu | tanh"),
    Key::new("mixing", "gated", "gated | cross_gate"),
    Key::new("beta_source", "k", "k | v | kv"),
    Key::new("share_projections", "true", "linear branch reuses the softmax projections"),
    Key::new("steps", "200", "total optimizer steps"),
    Key::new("batch_size", "16", "sequences per step"),
    Key::new("lr", "1e-3", "Adam learning rate"),
    Key::new("grad_clip", "1.0", "global gradient-norm clip"),
    Key::new("eval_samples", "500", "held-out sequences per evaluated length"),
    Key::new("eval_lengths", "", "extra task lengths to evaluate (generalization)"),
    Key::new("checkpoint_every", "0", "checkpoint period in steps (0: only at the end)"),
    Key::new("resume", "", "checkpoint prefix to continue from"),
    Key::new("log_every", "50", "print every N steps (0: silent)"),
];

/// Keys that do not change what is being trained and may differ on resume.
const RUN_ONLY_KEYS: [&str; 7] = ["steps", "out", "resume", "checkpoint_every", "log_every", "eval_samples", "eval_lengths"];

pub fn schema() -> Schema {
    let mut keys = TRAIN_KEYS.to_vec();
    keys.extend(SCHEDULE_KEYS);
    Schema::new("train", "Train the toy model on a synthetic task", &keys)
}

/// Everything needed to build and train a model.
#[derive(Debug, Clone)]
pub struct TrainJob {
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub train: TrainConfig,
    pub eval_samples: usize,
    pub eval_lengths: Vec<usize>,
}

fn parse<T: std::str::FromStr<Err = String>>(cfg: &RunConfig, key: &str) -> Result<T> {
    cfg.raw(key).parse().or_else(|e: String| usage(format!("{key}: {e}")))
}

pub fn job_from_config(cfg: &RunConfig) -> Result<TrainJob> {
    let mut task = TaskSpec {
        kind: parse::<TaskKind>(cfg, "task")?,
        length: cfg.get("length")?,
        vocab_size: cfg.get("vocab")?,
        parity_targets: parse::<ParityTargets>(cfg, "parity_targets")?,
    };
    if task.kind == TaskKind::Parity {
        task.vocab_size = 2;
    }
    task.validate().or_else(|e| usage(e.to_string()))?;

    let (d_model, n_heads): (usize, usize) = (cfg.get("d_model")?, cfg.get("n_heads")?);
    let bad = |e: magattn::Error| HarnessError::Usage(e.to_string());
    let expansion = ExpansionSpec::new(parse::<ExpansionMode>(cfg, "expansion")?, cfg.get("nh")?).map_err(bad)?;
    let mut attention = AttentionConfig::new(d_model, n_heads).map_err(bad)?.with_virtual_tokens(expansion).map_err(bad)?;
    attention.chunk.chunk_size = cfg.get("chunk")?;
    attention.chunk.nonlinearity = parse::<StateNonlinearity>(cfg, "nonlinearity")?;
    attention.mag.mixing = parse::<Mixing>(cfg, "mixing")?;
    attention.beta_source = parse::<BetaSource>(cfg, "beta_source")?;
    attention.share_projections = cfg.flag("share_projections")?;
    attention.validate().map_err(bad)?;

    let model = ModelConfig {
        vocab_size: task.model_vocab(),
        d_model,
        n_layers: cfg.get("n_layers")?,
        n_heads,
        max_seq_len: cfg.get("max_seq_len")?,
        mlp_hidden: cfg.get("mlp_hidden")?,
        tie_embeddings: cfg.flag("tie_embeddings")?,
        attention,
    };
    model.validate().or_else(|e| usage(e.to_string()))?;
    let eval_lengths: Vec<usize> = cfg.list("eval_lengths")?;
    for len in std::iter::once(task.length).chain(eval_lengths.iter().copied()) {
        let t = task.with_length(len);
        t.validate().or_else(|e| usage(e.to_string()))?;
        if t.seq_len() > model.max_seq_len {
            return usage(format!("task length {len} needs {} positions, max_seq_len is {}", t.seq_len(), model.max_seq_len));
        }
    }
    let train = TrainConfig {
        steps: cfg.get("steps")?,
        batch_size: cfg.get("batch_size")?,
        learning_rate: cfg.get("lr")?,
        grad_clip_norm: cfg.get("grad_clip")?,
        seed: cfg.seed()?,
        schedule: schedule_from(cfg)?,
    };
    train.validate().or_else(|e| usage(e.to_string()))?;
    Ok(TrainJob { model, task, train, eval_samples: cfg.get("eval_samples")?, eval_lengths })
}

/// A fresh trainer, or one restored from `resume` (whose recorded configuration
/// must agree with `cfg` on every key that shapes the run).
pub fn build_trainer(job: &TrainJob, cfg: &RunConfig, resume: Option<&std::path::Path>) -> Result<Trainer> {
    let model = build_model::<f32>(&job.model, job.train.seed)?;
    let mut trainer = Trainer::new(model, job.task, job.train.clone())?;
    if let Some(prefix) = resume {
        let ck = load::<f32>(prefix)?;
        for (k, v) in &ck.meta {
            if RUN_ONLY_KEYS.contains(&k.as_str()) {
                continue;
            }
            let now = cfg.raw(k);
            if now != v {
                return usage(format!("checkpoint was trained with {k} = {v}, this run has {k} = {now}"));
            }
        }
        trainer.restore(&ck)?;
    }
    Ok(trainer)
}

/// Held-out accuracy per task length, drawn from a stream disjoint from training.
pub fn held_out(trainer: &Trainer, job: &TrainJob) -> Result<Vec<(usize, Accuracy)>> {
    let alpha = magattn::schedule::alpha_at(&job.train.schedule, trainer.step.saturating_sub(1))?;
    let mut lengths = vec![job.task.length];
    lengths.extend(job.eval_lengths.iter().filter(|&&l| l != job.task.length));
    let seed = job.train.seed ^ 0x5eed_e7a1;
    lengths
        .into_iter()
        .map(|l| Ok((l, evaluate(&trainer.model, &job.task.with_length(l), job.eval_samples, seed, alpha)?)))
        .collect()
}

fn meta(cfg: &RunConfig) -> Vec<(String, String)> {
    cfg.pairs().filter(|(_, v)| !v.contains('\n')).map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

pub fn run(cfg: &RunConfig) -> Result<Report> {
    let job = job_from_config(cfg)?;
    let resume = Some(cfg.raw("resume")).filter(|s| !s.is_empty()).map(PathBuf::from);
    let mut trainer = build_trainer(&job, cfg, resume.as_deref())?;
    let every: usize = cfg.get("checkpoint_every")?;
    let log_every: usize = cfg.get("log_every")?;
    let out = RunOutput::create(&cfg.out_dir(), "train")?;
    let csv_path = out.csv_path();
    let ck_prefix = out.with_suffix("-ckpt");
    let csv_err = |source| HarnessError::Csv { path: csv_path.clone(), source };
    let mut w = csv::Writer::from_path(&csv_path).map_err(csv_err)?;
    w.write_record(["step", "loss", "alpha", "grad_norm"]).map_err(csv_err)?;
    println!(
        "train {} (length {}) with {} parameters, steps {}..{}",
        job.task.kind,
        job.task.length,
        trainer.model.num_parameters(),
        trainer.step,
        job.train.steps
    );
    let metas = meta(cfg);
    let mut first_loss = None;
    let mut last: Option<StepRecord> = None;
    let mut snapshots = Vec::new();
    let steps = job.train.steps;
    let result = loop {
        if trainer.step >= steps {
            break Ok(());
        }
        let r = match trainer.train_step() {
            Ok(r) => r,
            Err(e) => break Err(HarnessError::from(e)),
        };
        w.write_record([r.step.to_string(), r.loss.to_string(), r.alpha.to_string(), r.grad_norm.to_string()])
            .map_err(csv_err)?;
        first_loss.get_or_insert(r.loss);
        if log_every > 0 && r.step % log_every == 0 {
            println!("step {:>6} loss {:.5} alpha {:.3} grad_norm {:.4}", r.step, r.loss, r.alpha, r.grad_norm);
        }
        if every > 0 && trainer.step % every == 0 {
            save(&ck_prefix, &trainer, &metas)?;
            snapshots.push(trainer.step);
        }
        last = Some(r);
    };
    w.flush().map_err(|e| HarnessError::Io { path: csv_path.clone(), source: e })?;
    let mut m = Manifest::default();
    m.note("seed", job.train.seed);
    m.note("artifact", csv_path.display());
    if let Err(e) = result {
        m.note("diverged", e.to_string().replace('\n', " | "));
        m.write(&out, cfg)?;
        return Err(e);
    }
    if snapshots.last() != Some(&trainer.step) {
        save(&ck_prefix, &trainer, &metas)?;
    }
    m.note("checkpoint", ck_prefix.display());
    if let Some(r) = &resume {
        m.note("resumed_from", r.display());
    }
    if let (Some(f), Some(l)) = (first_loss, last) {
        m.note("loss", format!("first={f} last={} ratio={:.4}", l.loss, l.loss / f));
        println!("loss {f:.5} -> {:.5}", l.loss);
    }
    for (len, acc) in held_out(&trainer, &job)? {
        let line = format!(
            "headline={:.4} per_position={:.4} final_position={:.4} exact_match={:.4} samples={}",
            headline(&job.task, &acc),
            acc.per_position,
            acc.final_position,
            acc.exact_match,
            acc.samples
        );
        println!("eval length {len}: {line}");
        m.note(format!("eval length={len}"), line);
    }
    let manifest = m.write(&out, cfg)?;
    println!("trajectory -> {}, checkpoint -> {}", csv_path.display(), ck_prefix.display());
    Ok(Report { passed: true, csv: csv_path, manifest })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_build_a_copy_job() {
        let cfg = RunConfig::defaults(&schema());
        let job = job_from_config(&cfg).unwrap();
        assert_eq!(job.task.kind, TaskKind::Copy);
        assert_eq!(job.model.vocab_size, 16);
        assert_eq!(job.model.attention.n_h(), 1);
    }

    #[test]
    fn parity_forces_binary_vocab_and_rejects_long_tasks() {
        let s = schema();
        let mut cfg = RunConfig::defaults(&s);
        cfg.set(&s, "task", "parity").unwrap();
        cfg.set(&s, "nh", "2").unwrap();
        let job = job_from_config(&cfg).unwrap();
        assert_eq!(job.model.vocab_size, 2);
        assert_eq!(job.model.attention.n_h(), 2);
        cfg.set(&s, "eval_lengths", "65").unwrap();
        assert!(matches!(job_from_config(&cfg), Err(HarnessError::Usage(_))));
        cfg.set(&s, "eval_lengths", "").unwrap();
        cfg.set(&s, "expansion", "sideways").unwrap();
        assert!(matches!(job_from_config(&cfg), Err(HarnessError::Usage(_))));
    }
}
