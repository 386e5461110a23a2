use std::fmt::Debug;

use num_traits::Float;
use rustfft::FftNum;

use crate::error::{Error, Result};

/// Element type of a [`Tensor`]: `f32` for optimisation, `f64` for gradient checks.
pub trait Scalar: Float + FftNum + Default + Debug + Send + Sync + 'static {
    /// `c = alpha·a·b + beta·c` on row-major matrices with explicit strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
    );

    fn of(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("representable constant")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

fn check_gemm<T>(m: usize, k: usize, n: usize, a: &[T], sa: (isize, isize), b: &[T], sb: (isize, isize), c: &[T]) {
    let last = |rows: usize, cols: usize, s: (isize, isize)| {
        if rows == 0 || cols == 0 {
            0
        } else {
            ((rows - 1) as isize * s.0 + (cols - 1) as isize * s.1) as usize + 1
        }
    };
    assert!(a.len() >= last(m, k, sa), "gemm: a too short");
    assert!(b.len() >= last(k, n, sb), "gemm: b too short");
    assert!(c.len() >= m * n, "gemm: c too short");
}

impl Scalar for f32 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: &[f32],
        sa: (isize, isize),
        b: &[f32],
        sb: (isize, isize),
        beta: f32,
        c: &mut [f32],
    ) {
        check_gemm(m, k, n, a, sa, b, sb, c);
        // SAFETY: bounds of every operand were checked against the strides above.
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, alpha, a.as_ptr(), sa.0, sa.1, b.as_ptr(), sb.0, sb.1, beta,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
}

impl Scalar for f64 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[f64],
        sa: (isize, isize),
        b: &[f64],
        sb: (isize, isize),
        beta: f64,
        c: &mut [f64],
    ) {
        check_gemm(m, k, n, a, sa, b, sb, c);
        // SAFETY: as above.
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, alpha, a.as_ptr(), sa.0, sa.1, b.as_ptr(), sb.0, sb.1, beta,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
}

/// Shape `(batch, channel, height, width)`.
pub type Shape = [usize; 4];

pub fn shape_len(s: &Shape) -> usize {
    s.iter().product()
}

/// Dense row-major 4-D array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Shape,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![T::zero(); shape_len(&shape)],
        }
    }

    pub fn filled(shape: Shape, v: T) -> Self {
        Self {
            shape,
            data: vec![v; shape_len(&shape)],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape_len(&shape) {
            return Err(Error::shape(format!(
                "tensor of shape {shape:?} needs {} values, got {}",
                shape_len(&shape),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: [1, 1, 1, 1],
            data: vec![v],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Height × width.
    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on a tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }
}
