//! Dense row-major tensors over f32/f64 with a GEMM kernel hook.

use std::fmt;
use std::ops::AddAssign;

use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::NumericsError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

/// Scalar element of a tensor: f32 for training throughput, f64 for gradient
/// checks and oracles.
pub trait Element:
    Float + AddAssign + std::iter::Sum + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// C = alpha * A(m x k) * B(k x n) + beta * C, arbitrary strides.
    ///
    /// # Safety
    /// Pointers must cover the strided index ranges and C must not alias A or B.
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
}

impl Element for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }

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
}

impl Element for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }

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
}

/// A dense row-major tensor. Rank 0 (scalar), 1 and 2 cover this
/// architecture; no broadcasting beyond bias-add over the last dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    /// Marks a parameter whose gradient should be accumulated when inserted
    /// into a graph as a leaf.
    pub requires_grad: bool,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, NumericsError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NumericsError::Invalid {
                op: "tensor_new",
                msg: format!("shape {shape:?} wants {expected} elements, got {}", data.len()),
            });
        }
        Ok(Tensor { shape, data, requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor { shape, data: vec![T::zero(); len], requires_grad: false }
    }

    pub fn full(shape: Vec<usize>, v: T) -> Self {
        let len = shape.iter().product();
        Tensor { shape, data: vec![v; len], requires_grad: false }
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![], data: vec![v], requires_grad: false }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> T) -> Self {
        let len = shape.iter().product();
        Tensor { shape, data: (0..len).map(&mut f).collect(), requires_grad: false }
    }

    /// Entries i.i.d. uniform in [-bound, bound]. The random stream is drawn
    /// in f64 so f32 and f64 tensors built from the same seed agree.
    pub fn rand_uniform(shape: Vec<usize>, bound: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| T::from_f64(rng.gen_range(-bound..=bound)))
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
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

    pub fn item(&self) -> T {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// (rows, cols) of a rank-2 tensor; rank-1 maps to (1, n).
    pub fn dims2(&self) -> Result<(usize, usize), NumericsError> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            [n] => Ok((1, *n)),
            other => Err(NumericsError::Invalid {
                op: "dims2",
                msg: format!("expected rank <= 2, got shape {other:?}"),
            }),
        }
    }

    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self, NumericsError> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "reshape",
                left: self.shape.clone(),
                right: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
            requires_grad: false,
        }
    }

    /// Converts element type, passing through f64.
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
            requires_grad: self.requires_grad,
        }
    }

    pub fn sq_l2_norm(&self) -> T {
        self.data.iter().map(|&x| x * x).sum()
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * T::DTYPE.size_bytes());
        for &x in &self.data {
            x.write_le(&mut out);
        }
        out
    }

    pub fn from_le_bytes(shape: Vec<usize>, bytes: &[u8]) -> Result<Self, NumericsError> {
        let n: usize = shape.iter().product();
        let width = T::DTYPE.size_bytes();
        if bytes.len() != n * width {
            return Err(NumericsError::Invalid {
                op: "from_le_bytes",
                msg: format!("shape {shape:?} wants {} bytes, got {}", n * width, bytes.len()),
            });
        }
        let data = bytes.chunks_exact(width).map(T::read_le).collect();
        Ok(Tensor { shape, data, requires_grad: false })
    }
}

/// C(m x n) += alpha * A(m x k) * B(k x n), all row-major contiguous.
pub(crate) fn gemm_nn<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        T::gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// C(m x n) += alpha * A^T * B where A is stored (k x m) row-major.
pub(crate) fn gemm_tn<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        T::gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// C(m x n) += alpha * A * B^T where B is stored (n x k) row-major.
pub(crate) fn gemm_nt<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        T::gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_identity() {
        let eye = vec![1.0f64, 0.0, 0.0, 1.0];
        let a = vec![1.0, 2.0, 3.0, 4.0];
        let mut c = vec![0.0; 4];
        gemm_nn(2, 2, 2, 1.0, &eye, &a, 0.0, &mut c);
        assert_eq!(c, a);
    }

    #[test]
    fn gemm_transposed_variants() {
        // A = [[1,2],[3,4],[5,6]] (3x2), B = [[1,0],[0,1],[1,1]] (3x2)
        let a = vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        // A^T * B = 2x2
        let mut c = vec![0.0; 4];
        gemm_tn(2, 3, 2, 1.0, &a, &b, 0.0, &mut c);
        assert_eq!(c, vec![6.0, 8.0, 8.0, 10.0]);
        // A * B^T would need A 3x2 * B^T 2x3 -> 3x3
        let mut d = vec![0.0; 9];
        gemm_nt(3, 2, 3, 1.0, &a, &b, 0.0, &mut d);
        assert_eq!(d, vec![1.0, 2.0, 3.0, 3.0, 4.0, 7.0, 5.0, 6.0, 11.0]);
    }

    #[test]
    fn le_bytes_round_trip() {
        let t = Tensor::<f32>::from_fn(vec![2, 3], |i| i as f32 * 0.5);
        let bytes = t.to_le_bytes();
        let back = Tensor::<f32>::from_le_bytes(vec![2, 3], &bytes).unwrap();
        assert_eq!(t.shape(), back.shape());
        assert_eq!(t.data(), back.data());
        let t64 = Tensor::<f64>::from_fn(vec![4], |i| (i as f64).sqrt());
        let back64 = Tensor::<f64>::from_le_bytes(vec![4], &t64.to_le_bytes()).unwrap();
        assert_eq!(t64.data(), back64.data());
    }

    #[test]
    fn deterministic_rand_across_dtypes() {
        use rand::SeedableRng;
        let mut r1 = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut r2 = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let a = Tensor::<f32>::rand_uniform(vec![8], 0.5, &mut r1);
        let b = Tensor::<f64>::rand_uniform(vec![8], 0.5, &mut r2);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*x, *y as f32);
        }
    }
}
