use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Scalar type the network runs in: `f32` for training, `f64` for gradient
/// checks.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    /// Convolution inner kernel; see `conv::correlate`.
    #[allow(clippy::too_many_arguments)]
    fn correlate(x: &[Self], xs: usize, cin: usize, w: &[Self], taps: &[usize], out: &mut [Self], os: usize, cout: usize) {
        super::conv::portable::correlate(x, xs, cin, w, taps, out, os, cout)
    }

    /// Weight-gradient inner kernel; see `conv::weight_grad`.
    #[allow(clippy::too_many_arguments)]
    fn weight_grad(x: &[Self], xs: usize, cin: usize, dy: &[Self], os: usize, cout: usize, taps: &[usize], gw: &mut [Self]) {
        super::conv::portable::weight_grad(x, xs, cin, dy, os, cout, taps, gw)
    }

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    fn correlate(x: &[f32], xs: usize, cin: usize, w: &[f32], taps: &[usize], out: &mut [f32], os: usize, cout: usize) {
        #[cfg(target_arch = "x86_64")]
        if super::conv::avx512::available() {
            // SAFETY: the feature is present and the caller checked the bounds
            return unsafe { super::conv::avx512::correlate(x, xs, cin, w, taps, out, os, cout) };
        }
        super::conv::portable::correlate(x, xs, cin, w, taps, out, os, cout)
    }

    fn weight_grad(x: &[f32], xs: usize, cin: usize, dy: &[f32], os: usize, cout: usize, taps: &[usize], gw: &mut [f32]) {
        #[cfg(target_arch = "x86_64")]
        if super::conv::avx512::available() {
            // SAFETY: as above
            return unsafe { super::conv::avx512::weight_grad(x, xs, cin, dy, os, cout, taps, gw) };
        }
        super::conv::portable::weight_grad(x, xs, cin, dy, os, cout, taps, gw)
    }
}

impl Real for f64 {}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!("{} values for shape {shape:?}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok([n, c, h, w]),
            other => Err(Error::Shape(format!("expected a 4-d tensor, got {other:?}"))),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}
