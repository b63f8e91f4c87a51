//! Dense row-major f64 tensors and the raw math the autodiff tape builds on.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Dense n-dimensional array of f64 values in row-major order.
///
/// `shape.iter().product() == data.len()` always holds; constructors enforce it.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Config(format!(
                "tensor shape {:?} expects {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("zero dimension in shape {shape:?}")));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![1.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// Row-major matrix from nested slices, for tests and small fixtures.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        Tensor {
            shape: vec![r, c],
            data: rows.concat(),
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Normal(0, std^2) samples.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("std must be finite and positive");
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        Tensor { shape, data }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Single value of a scalar ([1]-shaped) tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on non-scalar tensor {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    /// Interpret as a matrix, failing with the op name otherwise.
    pub fn dims2(&self, op: &str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            _ => Err(Error::Config(format!(
                "{op}: expected rank-2 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let (r, c) = (self.shape[0], self.shape[1..].iter().product::<usize>());
        assert!(i < r);
        &self.data[i * c..(i + 1) * c]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// In-place elementwise accumulation; shapes must match.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("add_assign", &self.shape, &other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, c: f64) {
        for v in &mut self.data {
            *v *= c;
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// `[m,k] x [k,n] -> [m,n]`
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, ka) = a.dims2("matmul")?;
    let (kb, n) = b.dims2("matmul")?;
    if ka != kb {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * ka..(i + 1) * ka];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a x b^T`: `[m,n] x [k,n] -> [m,k]`
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, na) = a.dims2("matmul_nt")?;
    let (k, nb) = b.dims2("matmul_nt")?;
    if na != nb {
        return Err(Error::shape("matmul_nt", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a.data[i * na..(i + 1) * na];
        for j in 0..k {
            let brow = &b.data[j * na..(j + 1) * na];
            out[i * k + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::new(vec![m, k], out)
}

/// `a^T x b`: `[m,k] x [m,n] -> [k,n]`
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ma, k) = a.dims2("matmul_tn")?;
    let (mb, n) = b.dims2("matmul_tn")?;
    if ma != mb {
        return Err(Error::shape("matmul_tn", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; k * n];
    for i in 0..ma {
        let arow = &a.data[i * k..(i + 1) * k];
        let brow = &b.data[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![k, n], out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2("transpose")?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

/// How the right operand of an elementwise op lines up with the left.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Broadcast {
    /// Identical shapes.
    Same,
    /// rhs is a vector applied to every row of a rank-2 lhs.
    Row,
    /// rhs is a scalar.
    Scalar,
}

/// Determine how `rhs` broadcasts onto `lhs` for elementwise ops.
pub fn broadcast_kind(op: &str, lhs: &[usize], rhs: &[usize]) -> Result<Broadcast> {
    if lhs == rhs {
        return Ok(Broadcast::Same);
    }
    if rhs == [1] {
        return Ok(Broadcast::Scalar);
    }
    if lhs.len() == 2 && rhs.len() == 1 && rhs[0] == lhs[1] {
        return Ok(Broadcast::Row);
    }
    Err(Error::shape(op, lhs, rhs))
}

/// Elementwise combine with broadcasting; `f` is applied as `f(lhs, rhs)`.
pub fn zip_broadcast(
    op: &str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let kind = broadcast_kind(op, &a.shape, &b.shape)?;
    let data = match kind {
        Broadcast::Same => a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
        Broadcast::Scalar => {
            let y = b.data[0];
            a.data.iter().map(|&x| f(x, y)).collect()
        }
        Broadcast::Row => {
            let n = b.data.len();
            a.data
                .chunks_exact(n)
                .flat_map(|row| row.iter().zip(&b.data).map(|(&x, &y)| f(x, y)))
                .collect()
        }
    };
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
    })
}

/// Reduce a full-shaped gradient down to the broadcast shape of `rhs`.
pub fn reduce_to_broadcast(grad: &Tensor, kind: Broadcast, rhs_shape: &[usize]) -> Tensor {
    match kind {
        Broadcast::Same => grad.clone(),
        Broadcast::Scalar => Tensor::scalar(grad.data.iter().sum()),
        Broadcast::Row => {
            let n = rhs_shape[0];
            let mut out = vec![0.0; n];
            for row in grad.data.chunks_exact(n) {
                for (o, &g) in out.iter_mut().zip(row) {
                    *o += g;
                }
            }
            Tensor {
                shape: vec![n],
                data: out,
            }
        }
    }
}

/// Exact (erf-based) GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// GELU derivative: Phi(x) + x * phi(x).
pub fn gelu_grad(x: f64) -> f64 {
    let phi = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    cdf + x * phi
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Tensor::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 3]);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "unexpected message: {msg}");
    }

    #[test]
    fn transpose_variants_agree() {
        let a = Tensor::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let b = Tensor::from_rows(&[&[1.0, 0.5], &[2.0, -1.0], &[0.0, 3.0]]);
        let direct = matmul(&a, &b).unwrap();
        let via_nt = matmul_nt(&a, &transpose(&b).unwrap()).unwrap();
        let via_tn = matmul_tn(&transpose(&a).unwrap(), &b).unwrap();
        assert_eq!(direct, via_nt);
        assert_eq!(direct, via_tn);
    }

    #[test]
    fn gelu_reference_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert_eq!(gelu_grad(0.0), 0.5);
        assert!((gelu(1.0) - 0.841344746068543).abs() < 1e-12);
    }

    #[test]
    fn broadcast_row_and_scalar() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let v = Tensor::from_vec(vec![10.0, 20.0]);
        let sum = zip_broadcast("add", &a, &v, |x, y| x + y).unwrap();
        assert_eq!(sum.data(), &[11.0, 22.0, 13.0, 24.0]);
        let s = Tensor::scalar(2.0);
        let prod = zip_broadcast("mul", &a, &s, |x, y| x * y).unwrap();
        assert_eq!(prod.data(), &[2.0, 4.0, 6.0, 8.0]);
    }
}
