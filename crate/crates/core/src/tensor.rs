//! Dense row-major tensors and the forward kernels shared by the tape.
//!
//! Everything is `f64`. Most operations treat a tensor as a matrix: a 1-D
//! tensor of length `n` is viewed as a single row `[1, n]`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(default)]
    pub requires_grad: bool,
    #[serde(skip)]
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|x| *x = value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Self::filled(&[1], value)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::Shape {
                    op: "from_rows",
                    lhs: vec![rows.len(), cols],
                    rhs: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    /// Samples entries from `N(0, std^2)`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let mut t = Self::zeros(shape);
        if std > 0.0 {
            let normal = Normal::new(0.0, std).expect("std is positive");
            t.data.iter_mut().for_each(|x| *x = normal.sample(rng));
        }
        t
    }

    /// Samples entries uniformly from `[-bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let mut t = Self::zeros(shape);
        if bound > 0.0 {
            t.data
                .iter_mut()
                .for_each(|x| *x = rng.random_range(-bound..bound));
        }
        t
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Matrix view `(rows, cols)`; 1-D tensors are a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, c] => (*r, *c),
            other => {
                let c = *other.last().unwrap();
                (self.data.len() / c.max(1), c)
            }
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().0
    }

    pub fn cols(&self) -> usize {
        self.dims2().1
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = self.dims2();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out).expect("transpose keeps numel")
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `scale * g` into the gradient accumulator.
    pub fn accumulate_grad(&mut self, g: &[f64], scale: f64) {
        let acc = self
            .grad
            .get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (a, &x) in acc.iter_mut().zip(g) {
            *a += scale * x;
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        let data = self.data.iter().map(|x| x * s).collect();
        Tensor::new(self.shape.clone(), data).expect("same shape")
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor::new(self.shape.clone(), data)
    }
}

/// `a · b` for `a: [m,k]`, `b: [k,n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2();
    let (k2, n) = b.dims2();
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    matmul_into(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

/// `a · bᵀ` for `a: [m,k]`, `b: [n,k]`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2();
    let (n, k2) = b.dims2();
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul_nt",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    matmul_nt_into(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

/// out[m,n] += a[m,k] · b[k,n]
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// out[m,n] += a[m,k] · b[n,k]ᵀ
pub(crate) fn matmul_nt_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in a_row.iter().zip(b_row) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

/// out[k,n] += a[m,k]ᵀ · b[m,n]
pub(crate) fn matmul_tn_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// Numerically stable softmax of one vector.
pub fn softmax(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::EmptyAxis("softmax"));
    }
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

pub fn log_softmax(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::EmptyAxis("log_softmax"));
    }
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(x.iter().map(|v| v - lse).collect())
}

/// Row-wise softmax. Columns with `key_mask[j] == false` get probability
/// exactly zero, as if their score were `-inf`.
pub fn softmax_rows(x: &Tensor, key_mask: Option<&[bool]>) -> Result<Tensor> {
    let (r, c) = x.dims2();
    if c == 0 {
        return Err(Error::EmptyAxis("softmax_rows"));
    }
    if let Some(mask) = key_mask {
        if mask.len() != c {
            return Err(Error::Shape {
                op: "softmax_rows",
                lhs: x.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::EmptyAxis("softmax_rows (all keys masked)"));
        }
    }
    let keep = |j: usize| key_mask.is_none_or(|m| m[j]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = x.row(i);
        let max = (0..c)
            .filter(|&j| keep(j))
            .map(|j| row[j])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..c {
            if keep(j) {
                let e = (row[j] - max).exp();
                out[i * c + j] = e;
                sum += e;
            }
        }
        for v in &mut out[i * c..(i + 1) * c] {
            *v /= sum;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Per-row layer normalization followed by `gamma * x_hat + beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(layer_norm_parts(x, gamma, beta, eps)?.0)
}

/// Returns `(output, x_hat, inv_std per row)`.
pub(crate) fn layer_norm_parts(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    if eps <= 0.0 {
        return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let (r, d) = x.dims2();
    if gamma.numel() != d || beta.numel() != d {
        return Err(Error::Shape {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; r * d];
    let mut x_hat = vec![0.0; r * d];
    let mut inv_stds = Vec::with_capacity(r);
    for i in 0..r {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let inv_std = 1.0 / (var + eps).sqrt();
        inv_stds.push(inv_std);
        for j in 0..d {
            let xh = (row[j] - mean) * inv_std;
            x_hat[i * d + j] = xh;
            out[i * d + j] = gamma.data()[j] * xh + beta.data()[j];
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, x_hat, inv_stds))
}

/// `-log softmax(logits)[target]`.
pub fn cross_entropy(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(Error::Index {
            what: "cross_entropy target",
            index: target,
            len: logits.len(),
        });
    }
    Ok(-log_softmax(logits)?[target])
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_identity_and_hand_cases() {
        let b = Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        assert_eq!(matmul(&Tensor::eye(2), &b).unwrap().data(), b.data());

        let a = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let c = Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        let out = matmul(&a, &c).unwrap();
        assert_eq!(out.shape(), &[1, 1]);
        assert_eq!(out.data(), &[11.0]);

        let z = Tensor::zeros(&[2, 3]);
        let any = Tensor::from_rows(&[
            vec![1.0, -2.0, 3.0, 4.0],
            vec![0.5, 6.0, -7.0, 8.0],
            vec![9.0, 1.0, 2.0, -3.0],
        ])
        .unwrap();
        let out = matmul(&z, &any).unwrap();
        assert_eq!(out.shape(), &[2, 4]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.0, 1.0, 2.0], vec![3.0, -4.0, 5.0]]).unwrap();
        let lhs = matmul_nt(&a, &b).unwrap();
        let rhs = matmul(&a, &b.transpose()).unwrap();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn softmax_cases() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p[0] - 1.0).abs() < 1e-12 && p[1] < 1e-300);
        let p = softmax(&[1f64.ln(), 2f64.ln(), 3f64.ln()]).unwrap();
        assert!(close(&p, &[1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0], 1e-12));
        assert!(matches!(softmax(&[]), Err(Error::EmptyAxis(_))));
        let p = softmax(&[1e4, -1e4, 3.0]).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn masked_softmax_zeroes_masked_keys() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let p = softmax_rows(&x, Some(&[true, false, true])).unwrap();
        assert_eq!(p.data()[1], 0.0);
        assert!((p.data()[0] + p.data()[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_cases() {
        let ones = Tensor::filled(&[3], 1.0);
        let zeros = Tensor::zeros(&[3]);
        let x = Tensor::from_rows(&[vec![4.0, 4.0, 4.0]]).unwrap();
        let y = layer_norm(&x, &ones, &zeros, 1e-12).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let g2 = Tensor::filled(&[2], 1.0);
        let b2 = Tensor::zeros(&[2]);
        let x = Tensor::from_rows(&[vec![1.0, -1.0]]).unwrap();
        let y = layer_norm(&x, &g2, &b2, 1e-12).unwrap();
        assert!(close(y.data(), &[1.0, -1.0], 1e-9));

        let beta = Tensor::new(vec![3], vec![0.3, -0.2, 7.0]).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, 5.0, -2.0], vec![0.0, 0.1, 0.2]]).unwrap();
        let y = layer_norm(&x, &zeros, &beta, 1e-5).unwrap();
        for r in 0..2 {
            assert_eq!(y.row(r), beta.data());
        }
        assert!(layer_norm(&x, &ones, &zeros, 0.0).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        assert!((cross_entropy(&[0.0; 4], 2).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!(cross_entropy(&[1e4, 0.0, 0.0], 0).unwrap().abs() < 1e-12);
        let l = cross_entropy(&[0.0, 3f64.ln()], 0).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!(matches!(cross_entropy(&[0.0, 1.0], 2), Err(Error::Index { .. })));
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn new_rejects_bad_numel() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    }
}
