//! Causal softmax attention shared by the baseline and latent layers.

use crate::kernel::{softmax_slice, Real};

/// Attention probabilities of one layer, `n_head × T × S` with zeros above
/// the causal boundary. Row `t` attends to keys `0..=start + t`.
#[derive(Debug, Clone)]
pub struct AttnProbs<T: Real> {
    pub n_head: usize,
    pub t: usize,
    pub s: usize,
    pub start: usize,
    pub data: Vec<T>,
}

impl<T: Real> AttnProbs<T> {
    pub fn row(&self, h: usize, t: usize) -> &[T] {
        let off = (h * self.t + t) * self.s;
        &self.data[off..off + self.start + t + 1]
    }
}

/// Dot product of the concatenations `[a1; a2] · [b1; b2]`, accumulated left
/// to right exactly as if the vectors had been materialised.
#[inline]
pub fn dot_concat<T: Real>(a1: &[T], a2: &[T], b1: &[T], b2: &[T]) -> T {
    let acc = a1.iter().zip(b1).fold(T::zero(), |acc, (&x, &y)| acc + x * y);
    a2.iter().zip(b2).fold(acc, |acc, (&x, &y)| acc + x * y)
}

/// Runs causal attention for `t_new` query rows starting at absolute
/// position `start` over `s_total` keys.
///
/// `score(h, t, s)` returns the unscaled score; `value(h, s)` the value
/// vector of width `d_v`. Returns the concatenated head outputs
/// (`t_new × n_head·d_v`) and the probabilities.
pub fn causal_attend<'a, T: Real>(
    n_head: usize,
    t_new: usize,
    start: usize,
    s_total: usize,
    d_v: usize,
    scale: T,
    score: impl Fn(usize, usize, usize) -> T,
    value: impl Fn(usize, usize) -> &'a [T],
) -> (Vec<T>, AttnProbs<T>) {
    debug_assert_eq!(start + t_new, s_total);
    let mut probs = vec![T::zero(); n_head * t_new * s_total];
    let mut out = vec![T::zero(); t_new * n_head * d_v];
    for h in 0..n_head {
        for t in 0..t_new {
            let visible = start + t + 1;
            let off = (h * t_new + t) * s_total;
            let row = &mut probs[off..off + visible];
            for (s, r) in row.iter_mut().enumerate() {
                *r = score(h, t, s);
            }
            softmax_slice(row, scale);
            let o = &mut out[(t * n_head + h) * d_v..(t * n_head + h + 1) * d_v];
            for (s, &p) in row.iter().enumerate() {
                for (ov, &vv) in o.iter_mut().zip(value(h, s)) {
                    *ov = *ov + p * vv;
                }
            }
        }
    }
    (
        out,
        AttnProbs {
            n_head,
            t: t_new,
            s: s_total,
            start,
            data: probs,
        },
    )
}
