//! Analytic gradients, the finite-difference oracle, optimisers and the toy
//! trainer.

mod backward;
pub mod ops;
mod optim;
mod train;

use std::collections::HashMap;

pub use backward::{backward, backward_masked, masked_loss, Targets};
pub use optim::{clip_global_norm, LrSchedule, Optimizer, OptimizerKind};
pub use train::{copy_task_batch, induction_task_batch, loss_csv, train_toy, Task, TrainConfig, TrainReport};

use crate::error::{Error, Result};
use crate::kernel::{Real, Rng, Tensor};
use crate::model::ModelWeights;

/// One gradient tensor per weight tensor, keyed and ordered like
/// [`ModelWeights::tensors`]. Group-shared matrices have one entry.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl GradientSet {
    pub fn zeros_like<T: Real>(w: &ModelWeights<T>) -> Self {
        let entries: Vec<(String, Tensor)> = w
            .tensors()
            .into_iter()
            .map(|(n, t)| (n, Tensor::zeros(t.shape())))
            .collect();
        let index = entries.iter().enumerate().map(|(i, (n, _))| (n.clone(), i)).collect();
        GradientSet { entries, index }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn accumulate(&mut self, name: &str, g: &Tensor) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("no parameter named {name}")))?;
        self.entries[i].1.add_assign(g)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn global_norm(&self) -> f64 {
        self.entries.iter().map(|(_, t)| t.sum_sq()).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for (_, t) in &mut self.entries {
            *t = t.scale(s);
        }
    }

    /// Adds `other` entry by entry; key sets must match.
    pub fn add(&mut self, other: &GradientSet) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Invalid("gradient sets have different keys".into()));
        }
        for ((na, a), (nb, b)) in self.entries.iter_mut().zip(&other.entries) {
            if na != nb {
                return Err(Error::Invalid(format!("gradient key {na} vs {nb}")));
            }
            a.add_assign(b)?;
        }
        Ok(())
    }
}

/// Central difference `(f(x+h) − f(x−h)) / 2h` of a scalar function.
pub fn fd_scalar(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Smallest magnitude used as the denominator of [`rel_err`].
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `|a − b| / max(|a|, |b|, REL_ERR_FLOOR)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Central finite difference of the masked loss w.r.t. element `index` of
/// the tensor called `name`.
pub fn fd_grad(
    w: &ModelWeights,
    name: &str,
    index: usize,
    h: f64,
    tokens: &[usize],
    targets: Targets,
) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Invalid(format!("finite-difference step {h} outside [1e-7, 1e-3]")));
    }
    let eval = |delta: f64| -> Result<f64> {
        let mut p = w.clone();
        {
            let mut slots = p.tensors_mut();
            let (_, t) = slots
                .iter_mut()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Invalid(format!("no parameter named {name}")))?;
            let v = t
                .data_mut()
                .get_mut(index)
                .ok_or_else(|| Error::Invalid(format!("{name}[{index}] out of range")))?;
            *v += delta;
        }
        p.refresh_gate_tables()?;
        masked_loss(&p, tokens, targets)
    };
    Ok((eval(h)? - eval(-h)?) / (2.0 * h))
}

/// Outcome of a finite-difference probe of one coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct GradProbe {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Compares analytic gradients with central differences on `per_tensor`
/// random coordinates of every weight tensor.
pub fn grad_check(
    w: &ModelWeights,
    tokens: &[usize],
    targets: Targets,
    per_tensor: usize,
    h: f64,
    rng: &mut Rng,
) -> Result<Vec<GradProbe>> {
    let (_, grads) = backward_masked(w, tokens, targets)?;
    let mut probes = Vec::new();
    for (name, g) in grads.iter() {
        for _ in 0..per_tensor {
            let index = rng.below(g.len());
            let numeric = fd_grad(w, name, index, h, tokens, targets)?;
            let analytic = g.data()[index];
            probes.push(GradProbe {
                name: name.to_string(),
                index,
                analytic,
                numeric,
                rel_err: rel_err(analytic, numeric),
            });
        }
    }
    Ok(probes)
}
