//! Dense row-major tensors generic over `f32`/`f64`.
//!
//! Training runs in `f32`; the finite-difference gradient checks instantiate
//! the same networks in `f64`. Matrix products go through `matrixmultiply`,
//! everything else is plain loops.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use num_traits::Float;
use rand::Rng;

use crate::error::{ensure, CoreResult};
use crate::rng::normal_f64;

/// Element type of every tensor in the crate.
pub trait Scalar:
    Float + num_traits::NumAssign + fmt::Debug + fmt::Display + Default + Send + Sync + 'static
{
    /// C = alpha * A(m,k) * B(k,n) + beta * C(m,n), arbitrary strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }
}

/// Contiguous row-major tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> CoreResult<Self> {
        let n: usize = shape.iter().product();
        ensure!(
            n == data.len(),
            ShapeMismatch,
            "shape {shape:?} wants {n} elements, got {}",
            data.len()
        );
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// N(0, std) entries, Box-Muller over the given stream.
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(normal_f64(rng) * std)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
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

    /// Reinterpret the buffer under a new shape of equal element count.
    pub fn reshape(mut self, shape: &[usize]) -> CoreResult<Self> {
        let n: usize = shape.iter().product();
        ensure!(
            n == self.data.len(),
            ShapeMismatch,
            "cannot reshape {:?} into {shape:?}",
            self.shape
        );
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn scale(&mut self, s: T) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Convert element type; used to lift f32 models into f64 for checks.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }

    /// Row-major matrix product: self (m,k) * rhs (k,n).
    pub fn matmul(&self, rhs: &Tensor<T>) -> CoreResult<Tensor<T>> {
        ensure!(
            self.shape.len() == 2 && rhs.shape.len() == 2,
            ShapeMismatch,
            "matmul wants 2-d operands, got {:?} and {:?}",
            self.shape,
            rhs.shape
        );
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (rhs.shape[0], rhs.shape[1]);
        ensure!(
            k == k2,
            ShapeMismatch,
            "matmul inner dims {k} vs {k2} differ"
        );
        let mut out = Tensor::zeros(&[m, n]);
        unsafe {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                self.data.as_ptr(),
                k as isize,
                1,
                rhs.data.as_ptr(),
                n as isize,
                1,
                T::zero(),
                out.data.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        Ok(out)
    }

    /// self (m,k) * rhs^T where rhs is (n,k).
    pub fn matmul_transposed(&self, rhs: &Tensor<T>) -> CoreResult<Tensor<T>> {
        ensure!(
            self.shape.len() == 2 && rhs.shape.len() == 2,
            ShapeMismatch,
            "matmul wants 2-d operands, got {:?} and {:?}",
            self.shape,
            rhs.shape
        );
        let (m, k) = (self.shape[0], self.shape[1]);
        let (n, k2) = (rhs.shape[0], rhs.shape[1]);
        ensure!(
            k == k2,
            ShapeMismatch,
            "matmul inner dims {k} vs {k2} differ"
        );
        let mut out = Tensor::zeros(&[m, n]);
        unsafe {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                self.data.as_ptr(),
                k as isize,
                1,
                rhs.data.as_ptr(),
                1,
                k as isize,
                T::zero(),
                out.data.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        Ok(out)
    }

    /// self^T (k,m)^T=(m,k)... transpose of self (k,m) times rhs (k,n).
    pub fn t_matmul(&self, rhs: &Tensor<T>) -> CoreResult<Tensor<T>> {
        ensure!(
            self.shape.len() == 2 && rhs.shape.len() == 2,
            ShapeMismatch,
            "matmul wants 2-d operands, got {:?} and {:?}",
            self.shape,
            rhs.shape
        );
        let (k, m) = (self.shape[0], self.shape[1]);
        let (k2, n) = (rhs.shape[0], rhs.shape[1]);
        ensure!(
            k == k2,
            ShapeMismatch,
            "matmul inner dims {k} vs {k2} differ"
        );
        let mut out = Tensor::zeros(&[m, n]);
        unsafe {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                self.data.as_ptr(),
                1,
                m as isize,
                rhs.data.as_ptr(),
                n as isize,
                1,
                T::zero(),
                out.data.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        Ok(out)
    }
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{} elements]", self.data.len())
        }
    }
}

/// Euclidean distance between two equal-length vectors.
pub fn euclidean<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut s = T::zero();
    for (x, y) in a.iter().zip(b.iter()) {
        let d = *x - *y;
        s += d * d;
    }
    s.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Tensor::from_vec(&[2, 3], vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::from_vec(&[3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_transposed_matches_explicit() {
        let a = Tensor::from_vec(&[2, 3], vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let bt = Tensor::from_vec(&[2, 3], vec![7.0, 9.0, 11.0, 8.0, 10.0, 12.0]).unwrap();
        let c = a.matmul_transposed(&bt).unwrap();
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn t_matmul_matches_explicit() {
        // a is (3,2); a^T (2,3) * b (3,2) = c (2,2)
        let a = Tensor::from_vec(&[3, 2], vec![1.0f64, 4.0, 2.0, 5.0, 3.0, 6.0]).unwrap();
        let b = Tensor::from_vec(&[3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = a.t_matmul(&b).unwrap();
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn shape_validation() {
        assert!(Tensor::<f32>::from_vec(&[2, 2], vec![1.0; 3]).is_err());
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn euclidean_basic() {
        assert_eq!(euclidean(&[0.0f64, 0.0], &[3.0, 4.0]), 5.0);
    }
}
