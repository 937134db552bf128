//! Dense 4-D tensors and the reverse-mode differentiation graph.
//!
//! Layout is fixed to `(N, C, H, W)` row-major. Two element types are
//! supported: `f32` for training and inference, `f64` for the verification
//! suites (finite-difference gradient checks, oracle comparisons).

mod conv;
mod graph;
mod pool;

pub use conv::ConvParams;
pub use graph::{Graph, NodeId, PoolKind};

use std::fmt;

use crate::error::{Error, Result};

/// Element type of a tensor: `f32` or `f64`.
///
/// Extends `num_traits::Float` with conversion helpers and a GEMM kernel so
/// convolution dispatches to an optimized matrix multiply for either width.
pub trait Scalar:
    num_traits::Float + num_traits::FloatConst + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn into_f64(self) -> f64;

    /// C <- alpha * A(m,k) * B(k,n) + beta * C(m,n), arbitrary strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn into_f64(self) -> f64 {
                self as f64
            }

            #[allow(clippy::too_many_arguments)]
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                debug_assert!(a.len() >= ((m - 1) as isize * rsa + (k.max(1) - 1) as isize * csa) as usize + 1 || k == 0);
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Extents of a 4-D tensor: batch, channels, height, width.
#[derive(Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    /// Shape of a scalar (single-element) tensor.
    pub fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub fn count(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Flat offset of element `(n, c, h, w)` in row-major order.
    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    pub fn contains(&self, n: usize, c: usize, h: usize, w: usize) -> bool {
        n < self.n && c < self.c && h < self.h && w < self.w
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Dense row-major 4-D array.
#[derive(Clone, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![T::zero(); shape.count()],
        }
    }

    pub fn filled(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.count()],
        }
    }

    /// Wrap an existing buffer; `data.len()` must equal `shape.count()`.
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.count() {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                detail: format!("shape {} needs {} values, got {}", shape, shape.count(), data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.count());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    /// Scalar (1,1,1,1) tensor.
    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Shape::scalar(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.shape.offset(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: T) {
        let i = self.shape.offset(n, c, h, w);
        self.data[i] = v;
    }

    /// Reinterpret as a new shape with the same element count. Data order is
    /// unchanged (row-major view).
    pub fn reshaped(mut self, shape: Shape) -> Result<Self> {
        if shape.count() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                detail: format!("{} -> {}", self.shape, shape),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Single value of a scalar tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Convert elementwise to another scalar type (f32 <-> f64).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(Scalar::into_f64(*v))).collect(),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor<{}>", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

/// Fill a tensor with samples from the standard normal distribution.
pub fn randn<T: Scalar>(shape: Shape, rng: &mut impl rand::Rng) -> Tensor<T> {
    use rand_distr::{Distribution, StandardNormal};
    let mut data = Vec::with_capacity(shape.count());
    for _ in 0..shape.count() {
        let v: f64 = StandardNormal.sample(rng);
        data.push(T::from_f64(v));
    }
    Tensor { shape, data }
}

/// Uniform samples in `[lo, hi)`.
pub fn rand_uniform<T: Scalar>(shape: Shape, lo: f64, hi: f64, rng: &mut impl rand::Rng) -> Tensor<T> {
    let mut data = Vec::with_capacity(shape.count());
    for _ in 0..shape.count() {
        data.push(T::from_f64(rng.gen_range(lo..hi)));
    }
    Tensor { shape, data }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_offsets_are_row_major() {
        let s = Shape::new(2, 3, 4, 5);
        assert_eq!(s.count(), 120);
        assert_eq!(s.offset(0, 0, 0, 0), 0);
        assert_eq!(s.offset(0, 0, 0, 1), 1);
        assert_eq!(s.offset(0, 0, 1, 0), 5);
        assert_eq!(s.offset(0, 1, 0, 0), 20);
        assert_eq!(s.offset(1, 0, 0, 0), 60);
    }

    #[test]
    fn from_vec_rejects_length_mismatch() {
        assert!(Tensor::<f32>::from_vec(Shape::new(1, 1, 2, 2), vec![0.0; 3]).is_err());
    }

    #[test]
    fn reshape_preserves_data_order() {
        let t = Tensor::<f32>::from_vec(Shape::new(1, 2, 2, 1), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = t.reshaped(Shape::new(4, 1, 1, 1)).unwrap();
        assert_eq!(r.data(), &[1.0, 2.0, 3.0, 4.0]);
    }
}
