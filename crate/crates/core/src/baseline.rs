//! Reference MHA / GQA / MQA attention with dense per-head caches.
//!
//! These layers apply RoPE to the full head dimension of queries and keys.
//! They serve as oracles and as accounting baselines for the latent layers.

use crate::attn::{causal_attend, dot_concat, AttnProbs};
use crate::config::Variant;
use crate::error::{Error, Result};
use crate::kernel::{matmul, Real, Tensor};
use crate::kvcache::DenseKVCache;
use crate::rope::{apply_rope, RopeFreqs};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BaselineShape {
    pub d_model: usize,
    pub n_head: usize,
    /// `n_head` for MHA, `n_g` for GQA, 1 for MQA.
    pub n_kv: usize,
    pub head_dim: usize,
}

impl BaselineShape {
    pub fn kv_width(&self) -> usize {
        self.n_kv * self.head_dim
    }

    pub fn q_width(&self) -> usize {
        self.n_head * self.head_dim
    }

    /// Query heads served by each key/value head.
    pub fn group(&self) -> usize {
        self.n_head / self.n_kv
    }
}

/// Key/value projections; shared by all layers of a group.
#[derive(Debug, Clone, PartialEq)]
pub struct KvProjection<T: Real = f64> {
    /// `d_model × n_kv·d_h`
    pub wk: Tensor<T>,
    /// `d_model × n_kv·d_h`
    pub wv: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineAttnWeights<T: Real = f64> {
    /// `d_model × n_h·d_h`
    pub wq: Tensor<T>,
    /// `n_h·d_h × d_model`
    pub wo: Tensor<T>,
}

/// Intermediates kept for backpropagation. `keys`/`values` hold every
/// cached row the new queries attended to.
#[derive(Debug, Clone)]
pub struct BaselineTrace<T: Real> {
    pub q: Tensor<T>,
    pub keys: Tensor<T>,
    pub values: Tensor<T>,
    pub probs: AttnProbs<T>,
    pub u: Tensor<T>,
}

/// Per-token cache elements of a baseline variant over `l` layers.
pub fn cache_elems_baseline(variant: Variant, n_h: usize, n_g: usize, d_h: usize, l: usize) -> u64 {
    let kv_heads = match variant {
        Variant::Mha => n_h,
        Variant::Gqa => n_g,
        _ => 1,
    };
    (2 * kv_heads * d_h * l) as u64
}

pub(crate) fn check_positions(positions: &[usize], cached: usize, leader: bool, rows: usize) -> Result<()> {
    if positions.is_empty() || positions.len() != rows {
        return Err(Error::Invalid(format!(
            "{} positions for {rows} input rows",
            positions.len()
        )));
    }
    if positions.windows(2).any(|w| w[1] != w[0] + 1) {
        return Err(Error::Invalid("positions must be consecutive".into()));
    }
    let start = positions[0];
    let expected = if leader { start } else { start + rows };
    if cached != expected {
        return Err(Error::CacheDiscontinuity { cached, start });
    }
    Ok(())
}

/// Causal attention over `x` (`T × d_model`). When `kv` is given the new
/// keys/values are computed and appended to `cache`; otherwise the layer
/// reuses rows its group leader already appended.
#[allow(clippy::too_many_arguments)]
pub fn baseline_attend_traced<T: Real>(
    shape: BaselineShape,
    x: &Tensor<T>,
    w: &BaselineAttnWeights<T>,
    kv: Option<&KvProjection<T>>,
    cache: &mut DenseKVCache<T>,
    positions: &[usize],
    freqs: &RopeFreqs,
    want_trace: bool,
) -> Result<(Tensor<T>, Option<BaselineTrace<T>>)> {
    let t_new = x.outer();
    check_positions(positions, cache.len(), kv.is_some(), t_new)?;
    let dh = shape.head_dim;
    if freqs.d_rope() != dh {
        return Err(Error::shape("baseline_attend", &[dh], &[freqs.d_rope()]));
    }
    let q = matmul(x, &w.wq)?;
    let q = apply_rope(&q.reshape(&[t_new, shape.n_head, dh])?, positions, freqs)?
        .reshape(&[t_new, shape.q_width()])?;
    if let Some(kv) = kv {
        let k = matmul(x, &kv.wk)?;
        let v = matmul(x, &kv.wv)?;
        let k = apply_rope(&k.reshape(&[t_new, shape.n_kv, dh])?, positions, freqs)?
            .reshape(&[t_new, shape.kv_width()])?;
        for i in 0..t_new {
            cache.append(k.row(i), v.row(i))?;
        }
    }
    let start = positions[0];
    let s_total = cache.len();
    let group = shape.group();
    let scale = T::one() / T::of(dh as f64).sqrt();
    let (u, probs) = causal_attend(
        shape.n_head,
        t_new,
        start,
        s_total,
        dh,
        scale,
        |h, t, s| {
            let g = h / group;
            dot_concat(&q.row(t)[h * dh..(h + 1) * dh], &[], &cache.key_row(s)[g * dh..(g + 1) * dh], &[])
        },
        |h, s| {
            let g = h / group;
            &cache.value_row(s)[g * dh..(g + 1) * dh]
        },
    );
    let u = Tensor::new(&[t_new, shape.q_width()], u)?;
    let out = matmul(&u, &w.wo)?;
    if !want_trace {
        return Ok((out, None));
    }
    let gather = |row: &dyn Fn(usize) -> Vec<T>| -> Result<Tensor<T>> {
        Tensor::new(&[s_total, shape.kv_width()], (0..s_total).flat_map(row).collect())
    };
    let keys = gather(&|s| cache.key_row(s).to_vec())?;
    let values = gather(&|s| cache.value_row(s).to_vec())?;
    Ok((out, Some(BaselineTrace { q, keys, values, probs, u })))
}

/// [`baseline_attend_traced`] without the trace.
pub fn baseline_attend<T: Real>(
    shape: BaselineShape,
    x: &Tensor<T>,
    w: &BaselineAttnWeights<T>,
    kv: Option<&KvProjection<T>>,
    cache: &mut DenseKVCache<T>,
    positions: &[usize],
    freqs: &RopeFreqs,
) -> Result<Tensor<T>> {
    baseline_attend_traced(shape, x, w, kv, cache, positions, freqs, false).map(|(out, _)| out)
}
