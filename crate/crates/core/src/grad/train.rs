//! Toy next-token training on synthetic tasks that need attention.

use super::{backward_masked, clip_global_norm, masked_loss, GradientSet, LrSchedule, Optimizer, OptimizerKind};
use crate::error::{Error, Result};
use crate::kernel::Rng;
use crate::model::ModelWeights;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    /// `x_1 … x_k SEP x_1 … x_k`; loss on the repeated half.
    Copy,
    /// Random tokens with a marked pair `M b` early on and `M` again at the
    /// end; loss on predicting `b` after the second marker.
    Induction,
}

impl Task {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Task::Copy),
            "induction" => Ok(Task::Induction),
            _ => Err(Error::config(format!("unknown task '{s}' (copy|induction)"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Copy => "copy",
            Task::Induction => "induction",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: LrSchedule,
    pub optimizer: OptimizerKind,
    /// Global-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub task: Task,
    /// Input length per sequence.
    pub seq_len: usize,
    pub seed: u64,
    /// Stop once a step's loss falls below this value.
    pub target_loss: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 3000,
            batch_size: 8,
            lr: 3e-3,
            schedule: LrSchedule::Constant,
            optimizer: OptimizerKind::ADAM,
            grad_clip: 1.0,
            task: Task::Copy,
            seq_len: 24,
            seed: 0,
            target_loss: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::config("lr must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.task == Task::Copy && (self.seq_len < 2 || self.seq_len % 2 != 0) {
            return Err(Error::config("copy task needs an even seq_len ≥ 2"));
        }
        if self.task == Task::Induction && self.seq_len < 6 {
            return Err(Error::config("induction task needs seq_len ≥ 6"));
        }
        Ok(())
    }
}

pub type Example = (Vec<usize>, Vec<Option<usize>>);

/// Copy sequences over symbols `0..V−1`; `V−1` is the separator.
pub fn copy_task_batch(rng: &mut Rng, batch: usize, seq_len: usize, vocab: usize) -> Vec<Example> {
    let k = seq_len / 2;
    let sep = vocab - 1;
    (0..batch)
        .map(|_| {
            let xs: Vec<usize> = (0..k).map(|_| rng.below(vocab - 1)).collect();
            let mut s = xs.clone();
            s.push(sep);
            s.extend_from_slice(&xs);
            let tokens = s[..2 * k].to_vec();
            let targets = (0..2 * k).map(|t| (t >= k).then(|| s[t + 1])).collect();
            (tokens, targets)
        })
        .collect()
}

/// Induction sequences; `V−1` is the marker.
pub fn induction_task_batch(rng: &mut Rng, batch: usize, seq_len: usize, vocab: usize) -> Vec<Example> {
    let marker = vocab - 1;
    (0..batch)
        .map(|_| {
            let mut s: Vec<usize> = (0..seq_len).map(|_| rng.below(vocab - 1)).collect();
            let p = rng.below(seq_len / 2);
            s[p] = marker;
            let answer = s[p + 1];
            s[seq_len - 1] = marker;
            let mut targets = vec![None; seq_len];
            targets[seq_len - 1] = Some(answer);
            (s, targets)
        })
        .collect()
}

fn batch(task: Task, rng: &mut Rng, n: usize, seq_len: usize, vocab: usize) -> Vec<Example> {
    match task {
        Task::Copy => copy_task_batch(rng, n, seq_len, vocab),
        Task::Induction => induction_task_batch(rng, n, seq_len, vocab),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Loss of the untrained model on the first batch.
    pub initial_loss: f64,
    /// Mean batch loss at each step, before that step's update.
    pub losses: Vec<f64>,
    /// First step whose loss fell below `target_loss`.
    pub reached_target: Option<usize>,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.losses.last().copied().unwrap_or(self.initial_loss)
    }
}

/// Trains `w` in place. Deterministic under `cfg.seed`.
pub fn train_toy(cfg: &TrainConfig, w: &mut ModelWeights) -> Result<TrainReport> {
    cfg.validate()?;
    let vocab = w.config.vocab_size;
    if vocab < 3 {
        return Err(Error::config("toy tasks need vocab_size ≥ 3"));
    }
    let mut rng = Rng::new(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, w);
    let first = batch(cfg.task, &mut rng.clone(), cfg.batch_size, cfg.seq_len, vocab);
    let mut initial_loss = 0.0;
    for (tokens, targets) in &first {
        initial_loss += masked_loss(w, tokens, targets)? / first.len() as f64;
    }
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut reached_target = None;
    for step in 0..cfg.steps {
        let examples = batch(cfg.task, &mut rng, cfg.batch_size, cfg.seq_len, vocab);
        let mut grads = GradientSet::zeros_like(w);
        let mut loss = 0.0;
        for (tokens, targets) in &examples {
            let (l, g) = backward_masked(w, tokens, targets)?;
            loss += l;
            grads.add(&g)?;
        }
        let n = examples.len() as f64;
        loss /= n;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        grads.scale(1.0 / n);
        losses.push(loss);
        if let Some(target) = cfg.target_loss {
            if loss < target {
                reached_target = Some(step);
                break;
            }
        }
        clip_global_norm(&mut grads, cfg.grad_clip);
        let lr = cfg.schedule.lr_at(cfg.lr, step, cfg.steps);
        opt.step(w, &grads, lr)?;
    }
    Ok(TrainReport { initial_loss, losses, reached_target })
}

/// `step,loss` CSV with LF line endings.
pub fn loss_csv(report: &TrainReport) -> String {
    let mut out = String::from("step,loss\n");
    for (i, l) in report.losses.iter().enumerate() {
        out.push_str(&format!("{i},{l:.6}\n"));
    }
    out
}
