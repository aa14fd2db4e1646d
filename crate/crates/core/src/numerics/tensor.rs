use rand::Rng;

use super::error::{NumericsError, Result};
use super::scalar::Scalar;

/// Dense row-major tensor value. Immutable once built except through the
/// explicit `data_mut` hook used by optimizer updates.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NumericsError::ShapeLen {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(|i| f(i)).collect(),
        }
    }

    /// i.i.d. standard-normal entries, optionally scaled.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let std = T::of(std);
        Self::from_fn(shape, |_| T::sample_normal(rng) * std)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterpret the same flat buffer under a new shape.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(NumericsError::ShapeLen {
                shape: shape.to_vec(),
                len: self.data.len(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(NumericsError::dim(op, &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    /// self + c * other, the affine form used by the erasure targets.
    pub fn add_scaled(&self, other: &Self, c: T) -> Result<Self> {
        self.zip_map(other, "add_scaled", |a, b| a + c * b)
    }

    pub fn sum(&self) -> T {
        // Plain sequential fold: the fixed summation order keeps runs
        // bit-reproducible.
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn mean(&self) -> T {
        self.sum() / T::of(self.data.len() as f64)
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(NumericsError::dim("dot", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b))
    }

    pub fn norm(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, &v| acc + v * v)
            .sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, &v| acc.max(v.abs()))
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v.as_f64()).collect(),
        }
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v.as_f64() as f32).collect(),
        }
    }

    /// 2-D matrix product on values (metric/oracle math; the tape has its own).
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = as_2d("matmul", &self.shape)?;
        let (k2, n) = as_2d("matmul", &other.shape)?;
        if k != k2 {
            return Err(NumericsError::dim("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![T::zero(); m * n];
        super::kernels::gemm_nn(&self.data, &other.data, &mut out, m, k, n, false);
        Tensor::new(&[m, n], out)
    }

    pub fn transpose2(&self) -> Result<Self> {
        let (m, n) = as_2d("transpose", &self.shape)?;
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(&[n, m], out)
    }
}

fn as_2d(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [m, n] => Ok((*m, *n)),
        _ => Err(NumericsError::dim(op, shape, &[])),
    }
}

/// Numerically stable softmax along one axis (max-subtraction form).
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.shape().len() {
        return Err(NumericsError::contract(format!(
            "softmax axis {axis} out of range for shape {:?}",
            x.shape()
        )));
    }
    if !x.is_finite() {
        return Err(NumericsError::non_finite("softmax input"));
    }
    let shape = x.shape().to_vec();
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![T::zero(); x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * axis_len * inner + i;
            let lane = |j: usize| base + j * inner;
            let mut max = x.data[lane(0)];
            for j in 1..axis_len {
                max = max.max(x.data[lane(j)]);
            }
            let mut denom = T::zero();
            for j in 0..axis_len {
                let e = (x.data[lane(j)] - max).exp();
                out[lane(j)] = e;
                denom += e;
            }
            for j in 0..axis_len {
                out[lane(j)] = out[lane(j)] / denom;
            }
        }
    }
    Tensor::new(&shape, out)
}

/// Weight tensor paired with its gradient accumulator. A plain `Tensor` is a
/// constant; wrapping it in `Param` is what marks it as requiring gradients.
#[derive(Clone, Debug)]
pub struct Param<T: Scalar = f32> {
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        Param { value, grad: None }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn accumulate(&mut self, g: &Tensor<T>) -> Result<()> {
        match &mut self.grad {
            Some(acc) => {
                *acc = acc.add(g)?;
            }
            None => {
                if g.shape() != self.value.shape() {
                    return Err(NumericsError::dim("grad", self.value.shape(), g.shape()));
                }
                self.grad = Some(g.clone());
            }
        }
        Ok(())
    }
}
