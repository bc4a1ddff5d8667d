use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.is_empty() || expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); shape.iter().product()] }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn vector(data: Vec<T>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| T::of(v)).collect())
    }

    pub fn one_hot(len: usize, index: usize) -> Self {
        let mut t = Self::zeros(&[len]);
        t.data[index] = T::one();
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn expect_vector(&self, what: &str) -> Result<usize> {
        if self.rank() != 1 {
            return Err(Error::Shape(format!("{what}: expected 1-D tensor, got shape {:?}", self.shape)));
        }
        Ok(self.shape[0])
    }

    pub fn expect_matrix(&self, what: &str) -> Result<(usize, usize)> {
        if self.rank() != 2 {
            return Err(Error::Shape(format!("{what}: expected 2-D tensor, got shape {:?}", self.shape)));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    /// Element `(i, j)` of a matrix.
    #[inline]
    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.shape[1] + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, k) = self.expect_matrix("matmul lhs")?;
        let (k2, m) = other.expect_matrix("matmul rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul {:?} x {:?}", self.shape, other.shape)));
        }
        let mut out = vec![T::zero(); n * m];
        for i in 0..n {
            let dst = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                axpy(self.data[i * k + p], &other.data[p * m..(p + 1) * m], dst);
            }
        }
        Tensor::new(vec![n, m], out)
    }

    pub fn transpose(&self) -> Result<Tensor<T>> {
        let (n, m) = self.expect_matrix("transpose")?;
        let mut out = vec![T::zero(); n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = self.data[i * m + j];
            }
        }
        Tensor::new(vec![m, n], out)
    }

    pub fn zip_with(&self, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!("elementwise {:?} vs {:?}", self.shape, other.shape)));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn scale(&self, k: T) -> Tensor<T> {
        self.map(|v| v * k)
    }

    pub fn dot(&self, other: &Tensor<T>) -> Result<T> {
        if self.data.len() != other.data.len() {
            return Err(Error::Shape(format!("dot {:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(dot(&self.data, &other.data))
    }

    pub fn norm(&self) -> T {
        dot(&self.data, &self.data).sqrt()
    }

    /// Index of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.data)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::of(v.as_f64())).collect() }
    }
}

#[inline]
pub(crate) fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub(crate) fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// `out = x · W` for a row vector `x` and a row-major `[x.len(), out.len()]` matrix.
#[inline]
pub(crate) fn vecmat<T: Scalar>(x: &[T], w: &[T], out: &mut [T]) {
    let cols = out.len();
    out.iter_mut().for_each(|o| *o = T::zero());
    for (i, &xi) in x.iter().enumerate() {
        axpy(xi, &w[i * cols..(i + 1) * cols], out);
    }
}

/// `out += W · y` where `W` is `[out.len(), y.len()]` row-major (i.e. `y · Wᵀ`).
#[inline]
pub(crate) fn matvec_acc<T: Scalar>(w: &[T], y: &[T], out: &mut [T]) {
    let cols = y.len();
    for (i, o) in out.iter_mut().enumerate() {
        *o += dot(&w[i * cols..(i + 1) * cols], y);
    }
}

/// `G += xᵀ · y` for row vectors `x` and `y`; `G` is `[x.len(), y.len()]`.
#[inline]
pub(crate) fn outer_acc<T: Scalar>(x: &[T], y: &[T], g: &mut [T]) {
    let cols = y.len();
    for (i, &xi) in x.iter().enumerate() {
        axpy(xi, y, &mut g[i * cols..(i + 1) * cols]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_shape() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![], vec![]).is_err());
    }

    #[test]
    fn matmul_small() {
        let a = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::<f64>::from_f64(&[2, 1], &[1.0, -1.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[-1.0, -1.0]);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(Tensor::vector(vec![1.0f64, 3.0, 3.0]).argmax(), 1);
    }

    #[test]
    fn vecmat_matches_matmul() {
        let w = Tensor::<f64>::from_f64(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut out = [0.0; 2];
        vecmat(&[1.0, 0.5, -1.0], w.data(), &mut out);
        let x = Tensor::<f64>::from_f64(&[1, 3], &[1.0, 0.5, -1.0]).unwrap();
        assert_eq!(x.matmul(&w).unwrap().data(), &out);
    }
}
