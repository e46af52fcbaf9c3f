use std::fmt::Debug;
use std::iter::Sum;
use std::ops::AddAssign;

use num_traits::{Float, NumCast};

/// Scalar type the kernel runs on: `f32` for training and inference, `f64`
/// for gradient checking.
pub trait Real: Float + NumCast + Default + Sum + AddAssign + Debug + Send + Sync + 'static {
    fn of(v: f64) -> Self {
        <Self as NumCast>::from(v).unwrap()
    }

    fn as_f64(self) -> f64 {
        <f64 as NumCast>::from(self).unwrap()
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Channel-major `c x h x w` activation tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3<T> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor3<T> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor3 { c, h, w, data: vec![T::zero(); c * h * w] }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), c * h * w, "tensor data length");
        Tensor3 { c, h, w, data }
    }

    pub fn plane_len(&self) -> usize {
        self.h * self.w
    }

    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.h + y) * self.w + x]
    }

    pub fn cast<U: Real>(&self) -> Tensor3<U> {
        Tensor3 { c: self.c, h: self.h, w: self.w, data: self.data.iter().map(|v| U::of(v.as_f64())).collect() }
    }
}
