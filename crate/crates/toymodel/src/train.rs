//! Training loop and evaluation.

use magattn::numerics::{Backend, Tape};
use magattn::schedule::{alpha_at, ScheduleSpec};
use magattn::Element;

use crate::error::{Divergence, Result, ToyError};
use crate::model::{forward, Model};
use crate::optim::{clip_grad_norm, Adam};
use crate::tasks::{gen_batch, Batch, TaskKind, TaskSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub grad_clip_norm: f64,
    pub seed: u64,
    pub schedule: ScheduleSpec,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(ToyError::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(ToyError::Config(format!("learning_rate {} must be finite and >= 0", self.learning_rate)));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(ToyError::Config(format!("grad_clip_norm {} must be > 0", self.grad_clip_norm)));
        }
        self.schedule.validate()?;
        Ok(())
    }
}

/// One row of the training trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// Loss of this step's batch before the update.
    pub loss: f64,
    pub alpha: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Masked cross-entropy and gradients for one batch.
pub struct LossAndGrads<F: Element> {
    pub loss: f64,
    pub grads: Vec<magattn::Tensor<F>>,
}

/// Loss and parameter gradients (in [`crate::model::ModelParams::named`] order).
pub fn loss_and_grads<F: Element>(model: &Model<F>, batch: &Batch, alpha: f64) -> Result<LossAndGrads<F>> {
    let mut tape = Tape::new();
    let params = model.params.map(|_, t| tape.leaf(t.clone(), true));
    let logits = forward(&mut tape, &params, &model.cfg, &batch.tokens, batch.batch, alpha)?;
    let flat = tape.reshape(&logits, &[batch.tokens.len(), model.cfg.vocab_size])?;
    let loss = tape.cross_entropy(&flat, &batch.targets, &batch.mask)?;
    let value = tape.value(loss).item()?.as_f64();
    let g = tape.backward(loss)?;
    let grads = params
        .named()
        .into_iter()
        .map(|(_, v)| g.get(*v).cloned().ok_or_else(|| ToyError::Config("missing gradient".into())))
        .collect::<Result<Vec<_>>>()?;
    Ok(LossAndGrads { loss: value, grads })
}

/// Stateful trainer; [`Trainer::step`] is the number of updates applied so far.
#[derive(Debug, Clone)]
pub struct Trainer<F: Element = f32> {
    pub model: Model<F>,
    pub task: TaskSpec,
    pub cfg: TrainConfig,
    pub opt: Adam<F>,
    pub step: usize,
}

impl<F: Element> Trainer<F> {
    pub fn new(model: Model<F>, task: TaskSpec, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        task.validate()?;
        if task.model_vocab() > model.cfg.vocab_size || task.seq_len() > model.cfg.max_seq_len {
            return Err(ToyError::Config(format!(
                "task needs vocab {} and length {}, model has {} and {}",
                task.model_vocab(),
                task.seq_len(),
                model.cfg.vocab_size,
                model.cfg.max_seq_len
            )));
        }
        let named = model.params.named();
        let opt = Adam::new(cfg.learning_rate, named.iter().map(|(_, t)| t.shape()))?;
        Ok(Self { model, task, cfg, opt, step: 0 })
    }

    /// Runs one update and returns its record.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let step = self.step;
        let alpha = alpha_at(&self.cfg.schedule, step)?;
        let batch = gen_batch(&self.task, self.cfg.batch_size, self.cfg.seed, step as u64)?;
        let LossAndGrads { loss, mut grads } = loss_and_grads(&self.model, &batch, alpha)?;
        let finite = grads.iter().all(|g| g.data().iter().all(|x| x.is_finite()));
        if !loss.is_finite() || !finite {
            let names = self.model.params.named();
            let grad_norms = names
                .iter()
                .zip(&grads)
                .map(|((n, _), g)| (n.clone(), crate::optim::global_norm(std::slice::from_ref(g))))
                .collect();
            return Err(ToyError::Diverged(Box::new(Divergence { step, alpha, loss, grad_norms })));
        }
        let grad_norm = clip_grad_norm(&mut grads, self.cfg.grad_clip_norm);
        self.opt.advance();
        let mut i = 0;
        let opt = &mut self.opt;
        self.model.params = self.model.params.map(|_, p| {
            let mut p = p.clone();
            opt.update(i, &mut p, &grads[i]);
            i += 1;
            p
        });
        self.step += 1;
        Ok(StepRecord { step, loss, alpha, grad_norm })
    }

    /// Trains until `self.step == until` (capped by `cfg.steps`), reporting each record.
    pub fn run_until(&mut self, until: usize, mut on_step: impl FnMut(&StepRecord) -> Result<()>) -> Result<Vec<StepRecord>> {
        let end = until.min(self.cfg.steps);
        let mut out = Vec::with_capacity(end.saturating_sub(self.step));
        while self.step < end {
            let r = self.train_step()?;
            on_step(&r)?;
            out.push(r);
        }
        Ok(out)
    }
}

/// Trains a fresh trainer for `cfg.steps` and returns it with the trajectory.
pub fn train<F: Element>(model: Model<F>, task: TaskSpec, cfg: TrainConfig) -> Result<(Trainer<F>, Vec<StepRecord>)> {
    let mut t = Trainer::new(model, task, cfg)?;
    let steps = t.cfg.steps;
    let records = t.run_until(steps, |_| Ok(()))?;
    Ok((t, records))
}

/// Accuracies over freshly generated examples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Accuracy {
    pub samples: usize,
    /// Fraction of scored positions predicted exactly.
    pub per_position: f64,
    /// Fraction of examples whose last scored position is right (for parity: the
    /// parity of the whole string).
    pub final_position: f64,
    /// Fraction of examples with every scored position right.
    pub exact_match: f64,
}

/// Greedy accuracy on `n_samples` examples drawn from `seed` (disjoint from the
/// training stream when `seed` differs from the training seed).
pub fn evaluate<F: Element>(model: &Model<F>, task: &TaskSpec, n_samples: usize, seed: u64, alpha: f64) -> Result<Accuracy> {
    const EVAL_BATCH: usize = 50;
    let v = model.cfg.vocab_size;
    let (mut pos_ok, mut pos_n, mut last_ok, mut exact_ok) = (0usize, 0usize, 0usize, 0usize);
    let mut done = 0;
    let mut chunk = 0u64;
    while done < n_samples {
        let b = EVAL_BATCH.min(n_samples - done);
        let batch = gen_batch(task, b, seed, chunk)?;
        let logits = model.logits(&batch.tokens, b, alpha)?;
        let t = batch.seq_len;
        for s in 0..b {
            let mut all = true;
            let mut last = None;
            for i in 0..t {
                let idx = s * t + i;
                if !batch.mask[idx] {
                    continue;
                }
                let row = &logits.data()[idx * v..(idx + 1) * v];
                let pred = (0..v).max_by(|&a, &c| row[a].partial_cmp(&row[c]).unwrap_or(std::cmp::Ordering::Equal)).unwrap_or(0);
                let ok = pred == batch.targets[idx];
                pos_ok += ok as usize;
                pos_n += 1;
                all &= ok;
                last = Some(ok);
            }
            exact_ok += all as usize;
            last_ok += last.unwrap_or(false) as usize;
        }
        done += b;
        chunk += 1;
    }
    let n = n_samples.max(1) as f64;
    Ok(Accuracy {
        samples: n_samples,
        per_position: pos_ok as f64 / pos_n.max(1) as f64,
        final_position: last_ok as f64 / n,
        exact_match: exact_ok as f64 / n,
    })
}

/// Task-appropriate headline accuracy: the final position for parity and recall,
/// exact match of the whole copy otherwise.
pub fn headline(task: &TaskSpec, acc: &Accuracy) -> f64 {
    match task.kind {
        TaskKind::Parity | TaskKind::AssocRecall => acc.final_position,
        TaskKind::Copy => acc.per_position,
    }
}
