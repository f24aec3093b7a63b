//! Rotary position embedding for the decoupled positional sub-vectors.
//!
//! Pairs are adjacent, `(x[2i], x[2i+1])`, rotated by
//! `angle(t, i) = t · base^(-2i / d_rope)`.

use crate::error::{Error, Result};
use crate::kernel::{Real, Tensor};

pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;

#[derive(Debug, Clone)]
pub struct RopeFreqs {
    d_rope: usize,
    max_len: usize,
    base: f64,
    angles: Tensor<f64>,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RopeFreqs {
    pub fn d_rope(&self) -> usize {
        self.d_rope
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    /// `max_len × d_rope/2` angle table.
    pub fn angles(&self) -> &Tensor<f64> {
        &self.angles
    }

    pub fn angle(&self, t: usize, i: usize) -> f64 {
        self.angles.at(t, i)
    }
}

pub fn build_freqs(d_rope: usize, max_len: usize, base: f64) -> Result<RopeFreqs> {
    if d_rope == 0 || d_rope % 2 != 0 {
        return Err(Error::config(format!("rotary dim must be even and positive, got {d_rope}")));
    }
    if max_len == 0 {
        return Err(Error::config("rotary table length must be positive"));
    }
    if !(base > 1.0) {
        return Err(Error::config(format!("rotary base must exceed 1, got {base}")));
    }
    let half = d_rope / 2;
    let inv_freq: Vec<f64> = (0..half)
        .map(|i| base.powf(-((2 * i) as f64) / d_rope as f64))
        .collect();
    let mut angles = Vec::with_capacity(max_len * half);
    for t in 0..max_len {
        angles.extend(inv_freq.iter().map(|f| t as f64 * f));
    }
    let cos = angles.iter().map(|a| a.cos()).collect();
    let sin = angles.iter().map(|a| a.sin()).collect();
    Ok(RopeFreqs {
        d_rope,
        max_len,
        base,
        angles: Tensor::new(&[max_len, half], angles)?,
        cos,
        sin,
    })
}

fn rotate<T: Real>(x: &Tensor<T>, positions: &[usize], freqs: &RopeFreqs, inverse: bool) -> Result<Tensor<T>> {
    let d = freqs.d_rope;
    if x.last_dim() != d {
        return Err(Error::shape("apply_rope", x.shape(), &[d]));
    }
    if positions.is_empty() || x.outer() % positions.len() != 0 {
        return Err(Error::shape("apply_rope", x.shape(), &[positions.len()]));
    }
    if let Some(&p) = positions.iter().find(|&&p| p >= freqs.max_len) {
        return Err(Error::PositionOverflow {
            position: p,
            max_len: freqs.max_len,
        });
    }
    let per_pos = x.outer() / positions.len();
    let half = d / 2;
    let mut out = x.clone();
    for (r, row) in out.data_mut().chunks_exact_mut(d).enumerate() {
        let base = positions[r / per_pos] * half;
        for i in 0..half {
            let c = T::of(freqs.cos[base + i]);
            let s = if inverse { -T::of(freqs.sin[base + i]) } else { T::of(freqs.sin[base + i]) };
            let (a, b) = (row[2 * i], row[2 * i + 1]);
            row[2 * i] = a * c - b * s;
            row[2 * i + 1] = a * s + b * c;
        }
    }
    Ok(out)
}

/// Rotates every row of `x`. Rows are grouped evenly over `positions`, so a
/// `[T × n_h × d_rope]` tensor with `T` positions rotates all heads of token
/// `t` by the same angles.
pub fn apply_rope<T: Real>(x: &Tensor<T>, positions: &[usize], freqs: &RopeFreqs) -> Result<Tensor<T>> {
    rotate(x, positions, freqs, false)
}

/// Transpose of [`apply_rope`]; used to backpropagate through the rotation.
pub fn apply_rope_inverse<T: Real>(x: &Tensor<T>, positions: &[usize], freqs: &RopeFreqs) -> Result<Tensor<T>> {
    rotate(x, positions, freqs, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{dot, init_linear, Init, Rng};

    #[test]
    fn build_examples() {
        let f = build_freqs(2, 8, 500.0).unwrap();
        for t in 0..8 {
            assert_eq!(f.angle(t, 0), t as f64);
        }
        let f = build_freqs(4, 3, 10_000.0).unwrap();
        assert!(f.angles().row(0).iter().all(|&a| a == 0.0));
        assert!((f.angle(1, 1) - 0.01).abs() < 1e-15);
        assert!(build_freqs(3, 4, 10_000.0).is_err());
    }

    #[test]
    fn apply_examples() {
        let f = build_freqs(2, 4, DEFAULT_ROPE_BASE).unwrap();
        let x = Tensor::<f64>::from_rows(&[&[1.0, 0.0]]).unwrap();
        let y = apply_rope(&x, &[1], &f).unwrap();
        assert!((y.data()[0] - 1f64.cos()).abs() < 1e-15);
        assert!((y.data()[1] - 1f64.sin()).abs() < 1e-15);
        let y0 = apply_rope(&x, &[0], &f).unwrap();
        assert!(y0.bit_eq(&x));
        match apply_rope(&x, &[4], &f) {
            Err(Error::PositionOverflow { position: 4, max_len: 4 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn inverse_undoes_rotation() {
        let f = build_freqs(8, 16, DEFAULT_ROPE_BASE).unwrap();
        let x: Tensor = init_linear(&mut Rng::new(4), 6, 8, Init::Normal(1.0)).unwrap();
        let pos = [0, 3, 5];
        let back = apply_rope_inverse(&apply_rope(&x, &pos, &f).unwrap(), &pos, &f).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-14);
    }

    #[test]
    fn relative_position_property() {
        let f = build_freqs(8, 16, DEFAULT_ROPE_BASE).unwrap();
        let mut rng = Rng::new(11);
        let q: Tensor = init_linear(&mut rng, 1, 8, Init::Normal(1.0)).unwrap();
        let k: Tensor = init_linear(&mut rng, 1, 8, Init::Normal(1.0)).unwrap();
        let score = |m: usize, n: usize| {
            dot(apply_rope(&q, &[m], &f).unwrap().data(), apply_rope(&k, &[n], &f).unwrap().data())
        };
        assert!((score(0, 5) - score(3, 8)).abs() < 1e-10);
    }
}
