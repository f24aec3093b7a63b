use super::counter;
use super::real::Real;
use super::rng::Rng;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_INIT_STD: f64 = 0.02;

/// `a[m×k] · b[k×n]`. Each output entry is accumulated left to right over
/// `k`, so equal inputs give bit-identical outputs regardless of how many
/// rows are processed together.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    counter::record();
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + aip * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `a[m×k] · b[n×k]ᵀ`.
pub fn matmul_nt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1] {
        return Err(Error::shape("matmul_nt", a.shape(), b.shape()));
    }
    counter::record();
    let (m, n) = (a.shape()[0], b.shape()[0]);
    let mut out = Vec::with_capacity(m * n);
    for arow in a.rows() {
        for brow in b.rows() {
            out.push(dot(arow, brow));
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `a[k×m]ᵀ · b[k×n]`.
pub fn matmul_tn<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[0] != b.shape()[0] {
        return Err(Error::shape("matmul_tn", a.shape(), b.shape()));
    }
    counter::record();
    let (m, n) = (a.shape()[1], b.shape()[1]);
    let mut out = vec![T::zero(); m * n];
    for (arow, brow) in a.rows().zip(b.rows()) {
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Stabilised softmax of `scale · row`, in place.
pub fn softmax_slice<T: Real>(row: &mut [T], scale: T) {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = ((*x - max) * scale).exp();
        sum = sum + *x;
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
}

/// Row-wise softmax of `scale · x` over the last dimension.
pub fn softmax_rows<T: Real>(x: &Tensor<T>, scale: T) -> Result<Tensor<T>> {
    if !(scale > T::zero()) {
        return Err(Error::Invalid(format!("softmax scale must be positive, got {scale}")));
    }
    let mut out = x.clone();
    let d = out.last_dim();
    for row in out.data_mut().chunks_exact_mut(d) {
        softmax_slice(row, scale);
    }
    Ok(out)
}

fn check_norm_params<T: Real>(
    op: &'static str,
    x: &Tensor<T>,
    params: &[&Tensor<T>],
    eps: f64,
) -> Result<()> {
    let d = x.last_dim();
    for p in params {
        if p.len() != d {
            return Err(Error::shape(op, x.shape(), p.shape()));
        }
    }
    if !(eps > 0.0) {
        return Err(Error::Invalid(format!("{op}: eps must be positive")));
    }
    Ok(())
}

/// Per-row statistics `(mean, 1/sqrt(var + eps))` with population variance.
#[inline]
pub fn layer_norm_stats<T: Real>(row: &[T], eps: T) -> (T, T) {
    let d = T::of(row.len() as f64);
    let mean = row.iter().fold(T::zero(), |s, &v| s + v) / d;
    let var = row.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) / d;
    (mean, T::one() / (var + eps).sqrt())
}

/// LayerNorm over the last dimension with affine `gamma`, `beta`.
pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    check_norm_params("layer_norm", x, &[gamma, beta], eps)?;
    let (g, b, e) = (gamma.data(), beta.data(), T::of(eps));
    let mut out = x.clone();
    let d = x.last_dim();
    for row in out.data_mut().chunks_exact_mut(d) {
        let (mean, inv) = layer_norm_stats(row, e);
        for (i, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * g[i] + b[i];
        }
    }
    Ok(out)
}

/// `1/sqrt(mean(x²) + eps)` for one row.
#[inline]
pub fn rms_inv<T: Real>(row: &[T], eps: T) -> T {
    let d = T::of(row.len() as f64);
    let ms = row.iter().fold(T::zero(), |s, &v| s + v * v) / d;
    T::one() / (ms + eps).sqrt()
}

/// RMSNorm over the last dimension: `gamma · x / sqrt(mean(x²) + eps)`.
pub fn rms_norm<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    check_norm_params("rms_norm", x, &[gamma], eps)?;
    let (g, e) = (gamma.data(), T::of(eps));
    let mut out = x.clone();
    let d = x.last_dim();
    for row in out.data_mut().chunks_exact_mut(d) {
        let inv = rms_inv(row, e);
        for (i, v) in row.iter_mut().enumerate() {
            *v = g[i] * (*v * inv);
        }
    }
    Ok(out)
}

/// Gathers rows of `table` by id.
pub fn embed_lookup<T: Real>(table: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>> {
    if table.rank() != 2 {
        return Err(Error::shape("embed_lookup", table.shape(), &[2]));
    }
    if ids.is_empty() {
        return Err(Error::Invalid("embed_lookup: empty id list".into()));
    }
    let (v, d) = (table.shape()[0], table.shape()[1]);
    let mut out = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= v {
            return Err(Error::TokenOutOfRange { id, vocab: v });
        }
        out.extend_from_slice(table.row(id));
    }
    Ok(Tensor::from_parts(vec![ids.len(), d], out))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(0.044715);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * k * x * x)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `N(0, std²)`.
    Normal(f64),
    /// `N(0, 1/cols)`.
    ScaledNormal,
    Zeros,
    Identity,
}

/// Allocates a `rows × cols` weight drawn from `scheme`.
pub fn init_linear<T: Real>(rng: &mut Rng, rows: usize, cols: usize, scheme: Init) -> Result<Tensor<T>> {
    if rows == 0 || cols == 0 {
        return Err(Error::Invalid(format!("init_linear: {rows}x{cols}")));
    }
    let std = match scheme {
        Init::Normal(s) => s,
        Init::ScaledNormal => 1.0 / (cols as f64).sqrt(),
        Init::Zeros => return Ok(Tensor::zeros(&[rows, cols])),
        Init::Identity => {
            if rows != cols {
                return Err(Error::Invalid(format!(
                    "identity init requires a square matrix, got {rows}x{cols}"
                )));
            }
            return Ok(Tensor::eye(rows));
        }
    };
    let data = (0..rows * cols).map(|_| T::of(std * rng.normal())).collect();
    Ok(Tensor::from_parts(vec![rows, cols], data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let a = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&Tensor::eye(2), &a).unwrap(), a);
        let b = t(&[&[5.0, 6.0], &[7.0, 8.0]]);
        assert_eq!(matmul(&a, &b).unwrap(), t(&[&[19.0, 22.0], &[43.0, 50.0]]));
        let z = Tensor::zeros(&[2, 3]);
        assert_eq!(matmul(&a, &z).unwrap(), Tensor::zeros(&[2, 3]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let err = matmul(&a, &a).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn transposed_variants_agree_with_plain_matmul() {
        let mut rng = Rng::new(3);
        let a: Tensor = init_linear(&mut rng, 3, 4, Init::Normal(1.0)).unwrap();
        let b: Tensor = init_linear(&mut rng, 5, 4, Init::Normal(1.0)).unwrap();
        assert!(matmul_nt(&a, &b).unwrap().max_abs_diff(&matmul(&a, &b.transpose()).unwrap()) < 1e-14);
        let c: Tensor = init_linear(&mut rng, 3, 5, Init::Normal(1.0)).unwrap();
        assert!(matmul_tn(&a, &c).unwrap().max_abs_diff(&matmul(&a.transpose(), &c).unwrap()) < 1e-14);
    }

    #[test]
    fn softmax_examples() {
        let x = t(&[&[0.0, 0.0, 0.0]]);
        let y = softmax_rows(&x, 1.0).unwrap();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = softmax_rows(&t(&[&[42.0]]), 7.0).unwrap();
        assert_eq!(y.data(), &[1.0]);
        let y = softmax_rows(&t(&[&[0.0, 3f64.ln()]]), 1.0).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-15);
        assert!((y.data()[1] - 0.75).abs() < 1e-15);
        assert!(softmax_rows(&x, 0.0).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Tensor::filled(&[3], 1.0);
        let zeros = Tensor::zeros(&[3]);
        let y = layer_norm(&t(&[&[1.0, 1.0, 1.0]]), &ones, &zeros, 1e-5).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);

        let y = layer_norm(&t(&[&[-1.0, 1.0]]), &Tensor::filled(&[2], 1.0), &Tensor::zeros(&[2]), 1e-300)
            .unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-12 && (y.data()[1] - 1.0).abs() < 1e-12);

        let x = t(&[&[0.3, -2.0, 5.0]]);
        let g = Tensor::vector(&[0.5, 2.0, -1.0]).unwrap();
        let b = Tensor::vector(&[1.0, -3.0, 0.25]).unwrap();
        let shifted = layer_norm(&x, &g, &b, 1e-5).unwrap();
        let plain = layer_norm(&x, &g, &Tensor::zeros(&[3]), 1e-5).unwrap().add(&b.reshape(&[1, 3]).unwrap()).unwrap();
        assert!(shifted.max_abs_diff(&plain) < 1e-15);
    }

    #[test]
    fn rms_norm_examples() {
        let g = Tensor::filled(&[2], 1.0);
        let y = rms_norm(&t(&[&[2.0, 2.0]]), &g, 1e-300).unwrap();
        assert!(y.max_abs_diff(&t(&[&[1.0, 1.0]])) < 1e-15);
        let y = rms_norm(&t(&[&[0.0, 0.0]]), &g, 1e-5).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);
        let x = t(&[&[0.5, -1.5]]);
        let a = rms_norm(&x, &g, 1e-300).unwrap();
        let b = rms_norm(&x.scale(7.5), &g, 1e-300).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-15);
    }

    #[test]
    fn norms_reject_bad_params() {
        let x = Tensor::<f64>::zeros(&[1, 3]);
        assert!(rms_norm(&x, &Tensor::zeros(&[2]), 1e-5).is_err());
        assert!(rms_norm(&x, &Tensor::zeros(&[3]), 0.0).is_err());
    }

    #[test]
    fn embed_examples() {
        let table = t(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        assert_eq!(embed_lookup(&table, &[0]).unwrap().data(), &[1.0, 2.0]);
        assert_eq!(embed_lookup(&table, &[2, 2]).unwrap().data(), &[5.0, 6.0, 5.0, 6.0]);
        assert_eq!(embed_lookup(&table, &[2, 0]).unwrap(), t(&[&[5.0, 6.0], &[1.0, 2.0]]));
        match embed_lookup(&table, &[3]) {
            Err(Error::TokenOutOfRange { id: 3, vocab: 3 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn init_schemes() {
        let mut rng = Rng::new(1);
        assert_eq!(init_linear::<f64>(&mut rng, 2, 3, Init::Zeros).unwrap(), Tensor::zeros(&[2, 3]));
        assert_eq!(init_linear::<f64>(&mut rng, 3, 3, Init::Identity).unwrap(), Tensor::eye(3));
        assert!(init_linear::<f64>(&mut rng, 2, 3, Init::Identity).is_err());
        let a: Tensor = init_linear(&mut Rng::new(9), 4, 4, Init::Normal(0.02)).unwrap();
        let b: Tensor = init_linear(&mut Rng::new(9), 4, 4, Init::Normal(0.02)).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }
}
