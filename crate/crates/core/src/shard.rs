//! In-process simulation of dimension-wise sharding of the embedding gate.
//!
//! The gate output dimension `d_out = n_h·(d_nope + d_v)` is split into `W`
//! contiguous column blocks of `W_ue`. Every worker holds a replica of the
//! embedding table, computes its block of `g = Emb(id) · W_ue`, and an
//! ordered concatenation stands in for the all-gather.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::kernel::counter::{tagged, MatmulTag};
use crate::kernel::{embed_lookup, matmul, Real, Tensor};
use crate::latent::LatentAttnWeights;

#[derive(Debug, Clone, PartialEq)]
pub struct ShardPlan<T: Real = f64> {
    workers: usize,
    d_out: usize,
    ranges: Vec<Range<usize>>,
    emb: Tensor<T>,
    slices: Vec<Tensor<T>>,
}

impl<T: Real> ShardPlan<T> {
    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    /// `kv_emb_dim × d_out/W` block held by worker `i`.
    pub fn slice(&self, i: usize) -> &Tensor<T> {
        &self.slices[i]
    }

    pub fn slice_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.slices[i]
    }

    pub fn emb(&self) -> &Tensor<T> {
        &self.emb
    }

    /// Concatenates the worker blocks back into the full `W_ue`.
    pub fn reassemble(&self) -> Result<Tensor<T>> {
        let parts: Vec<&Tensor<T>> = self.slices.iter().collect();
        Tensor::concat_cols(&parts)
    }
}

pub fn make_plan<T: Real>(w: &LatentAttnWeights<T>, workers: usize) -> Result<ShardPlan<T>> {
    let g = w
        .gate
        .as_ref()
        .ok_or_else(|| Error::Invalid("sharding needs an embedding-gated layer".into()))?;
    let d_out = g.w_ue.last_dim();
    if workers == 0 || d_out % workers != 0 {
        return Err(Error::Invalid(format!(
            "{workers} workers do not evenly divide gate dim {d_out}"
        )));
    }
    let local = d_out / workers;
    let ranges: Vec<Range<usize>> = (0..workers).map(|i| i * local..(i + 1) * local).collect();
    let slices = ranges
        .iter()
        .map(|r| g.w_ue.slice_cols(r.start, r.end))
        .collect::<Result<_>>()?;
    Ok(ShardPlan { workers, d_out, ranges, emb: g.emb.clone(), slices })
}

fn worker_gate<T: Real>(emb: &Tensor<T>, slice: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>> {
    let e = embed_lookup(emb, ids)?;
    tagged(MatmulTag::Gate, || matmul(&e, slice))
}

/// Each worker computes its gate block; blocks are gathered in worker order.
/// With `parallel`, workers run on scoped threads.
pub fn sharded_gate<T: Real>(plan: &ShardPlan<T>, ids: &[usize], parallel: bool) -> Result<Tensor<T>> {
    if plan.slices.len() != plan.workers || plan.slices.iter().any(|s| s.outer() != plan.emb.last_dim()) {
        return Err(Error::Invalid("shard plan does not match its embedding table".into()));
    }
    let parts: Vec<Result<Tensor<T>>> = if parallel && plan.workers > 1 {
        std::thread::scope(|scope| {
            let handles: Vec<_> = plan
                .slices
                .iter()
                .map(|s| scope.spawn(move || worker_gate(&plan.emb, s, ids)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        })
    } else {
        plan.slices.iter().map(|s| worker_gate(&plan.emb, s, ids)).collect()
    };
    let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor<T>> = parts.iter().collect();
    Tensor::concat_cols(&refs)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkerMemory {
    pub worker: usize,
    pub col_start: usize,
    pub col_end: usize,
    pub w_ue_elements: usize,
    /// Replicated embedding table.
    pub emb_elements: usize,
    pub activation_elements_per_token: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardMemoryReport {
    pub workers: usize,
    pub d_out: usize,
    pub kv_emb_dim: usize,
    pub w_ue_total: usize,
    /// Elements moved by the all-gather per token.
    pub comm_elements_per_token: usize,
    pub rows: Vec<WorkerMemory>,
}

pub const SHARD_COLUMNS: &str =
    "worker,col_start,col_end,w_ue_elements,emb_elements,activation_elements_per_token,comm_elements_per_token";

impl ShardMemoryReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{SHARD_COLUMNS}\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.worker,
                r.col_start,
                r.col_end,
                r.w_ue_elements,
                r.emb_elements,
                r.activation_elements_per_token,
                self.comm_elements_per_token
            ));
        }
        out
    }
}

pub fn shard_memory_report<T: Real>(plan: &ShardPlan<T>) -> ShardMemoryReport {
    let kv_emb_dim = plan.emb.last_dim();
    let rows = plan
        .ranges
        .iter()
        .zip(&plan.slices)
        .enumerate()
        .map(|(i, (r, s))| WorkerMemory {
            worker: i,
            col_start: r.start,
            col_end: r.end,
            w_ue_elements: s.len(),
            emb_elements: plan.emb.len(),
            activation_elements_per_token: r.len(),
        })
        .collect();
    ShardMemoryReport {
        workers: plan.workers,
        d_out: plan.d_out,
        kv_emb_dim,
        w_ue_total: kv_emb_dim * plan.d_out,
        comm_elements_per_token: plan.d_out,
        rows,
    }
}

/// Per-worker `W_ue` elements for a geometry, without materialising it.
pub fn per_worker_w_ue(kv_emb_dim: usize, d_out: usize, workers: usize) -> Result<usize> {
    if workers == 0 || d_out % workers != 0 {
        return Err(Error::Invalid(format!("{workers} workers do not evenly divide gate dim {d_out}")));
    }
    Ok(kv_emb_dim * d_out / workers)
}
