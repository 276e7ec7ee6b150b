//! Dense row-major tensors.
//!
//! A [`Tensor`] is a flat `Vec` plus a shape of rank 1 to 4. Feature maps use
//! the `[batch, channel, height, width]` layout throughout the crate. The
//! element type is `f32` for training and inference; `f64` exists so that
//! finite-difference gradient checks have enough precision.
//!
//! There is no broadcasting: binary ops require identical shapes, or take a
//! scalar explicitly.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 4;

/// Floating point element of a tensor.
pub trait Element:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + 'static
{
    const NAME: &'static str;

    /// `c = alpha * a * b + beta * c` for row-major `a: m×k`, `b: k×n`, `c: m×n`
    /// given as strided views.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: (&[Self], isize, isize),
        b: (&[Self], isize, isize),
        beta: Self,
        c: (&mut [Self], isize, isize),
    );

    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("float conversion")
    }

    fn to_f64_lossy(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("float conversion")
    }
}

fn check_view<T>(len: usize, rows: usize, cols: usize, rs: isize, cs: isize) {
    if rows == 0 || cols == 0 {
        return;
    }
    assert!(rs >= 0 && cs >= 0, "negative strides are not supported");
    let last = (rows - 1) * rs as usize + (cols - 1) * cs as usize;
    assert!(
        last < len,
        "gemm view out of bounds: {rows}x{cols} strides ({rs},{cs}) over {len} {}",
        std::any::type_name::<T>()
    );
}

macro_rules! impl_element {
    ($t:ty, $name:literal, $gemm:path) => {
        impl Element for $t {
            const NAME: &'static str = $name;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: (&[Self], isize, isize),
                b: (&[Self], isize, isize),
                beta: Self,
                c: (&mut [Self], isize, isize),
            ) {
                check_view::<$t>(a.0.len(), m, k, a.1, a.2);
                check_view::<$t>(b.0.len(), k, n, b.1, b.2);
                check_view::<$t>(c.0.len(), m, n, c.1, c.2);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: all three views were bounds-checked above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.0.as_ptr(),
                        a.1,
                        a.2,
                        b.0.as_ptr(),
                        b.1,
                        b.2,
                        beta,
                        c.0.as_mut_ptr(),
                        c.1,
                        c.2,
                    )
                }
            }
        }
    };
}

impl_element!(f32, "f32", matrixmultiply::sgemm);
impl_element!(f64, "f64", matrixmultiply::dgemm);

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor<{}>{:?} ", std::any::type_name::<T>(), self.shape)?;
        let head = &self.data[..self.data.len().min(PREVIEW)];
        if self.data.len() > PREVIEW {
            write!(f, "{head:?}..")
        } else {
            write!(f, "{head:?}")
        }
    }
}

pub(crate) fn validate_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > MAX_RANK || shape.contains(&0) {
        return Err(Error::InvalidShape(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let len = validate_shape(shape)?;
        if len != data.len() {
            return Err(Error::DataLength {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let len = validate_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn zeros_like(other: &Self) -> Self {
        Tensor {
            shape: other.shape.clone(),
            data: vec![T::zero(); other.data.len()],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let len = validate_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        })
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

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::invalid(
                "item",
                format!("tensor of shape {:?} is not a scalar", self.shape),
            )),
        }
    }

    /// Splits a rank-4 shape into `(n, c, h, w)`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok((n, c, h, w)),
            s => Err(Error::invalid(
                "dims4",
                format!("expected a rank-4 tensor, got shape {s:?}"),
            )),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let len = validate_shape(shape)?;
        if len != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape.clone(),
                right: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other, op)?;
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

    pub fn expect_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
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

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_scalar(&self, s: T) -> Self {
        self.map(|v| v + s)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum_all(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean_all(&self) -> T {
        self.sum_all() / T::from_usize(self.data.len()).expect("length fits the element type")
    }

    /// Sums over `axes`. Reduced axes are dropped, or kept with size 1 when
    /// `keep_dims` is set. Reducing every axis without `keep_dims` yields shape `[1]`.
    pub fn sum_axes(&self, axes: &[usize], keep_dims: bool) -> Result<Self> {
        let rank = self.rank();
        let mut reduced = [false; MAX_RANK];
        for &axis in axes {
            if axis >= rank {
                return Err(Error::AxisOutOfRange { axis, rank });
            }
            reduced[axis] = true;
        }

        let kept_shape: Vec<usize> = self
            .shape
            .iter()
            .enumerate()
            .map(|(i, &d)| if reduced[i] { 1 } else { d })
            .collect();
        let out_len: usize = kept_shape.iter().product();
        let mut out = vec![T::zero(); out_len];

        let out_strides = strides(&kept_shape);
        let mut index = [0usize; MAX_RANK];
        for &v in &self.data {
            let offset: usize = (0..rank)
                .filter(|&i| !reduced[i])
                .map(|i| index[i] * out_strides[i])
                .sum();
            out[offset] += v;
            // Advance the row-major multi-index.
            for i in (0..rank).rev() {
                index[i] += 1;
                if index[i] < self.shape[i] {
                    break;
                }
                index[i] = 0;
            }
        }

        let shape = if keep_dims {
            kept_shape
        } else {
            let dropped: Vec<usize> = (0..rank)
                .filter(|&i| !reduced[i])
                .map(|i| self.shape[i])
                .collect();
            if dropped.is_empty() {
                vec![1]
            } else {
                dropped
            }
        };
        Tensor::new(&shape, out)
    }

    pub fn mean_axes(&self, axes: &[usize], keep_dims: bool) -> Result<Self> {
        let summed = self.sum_axes(axes, keep_dims)?;
        let count = self.len() / summed.len();
        Ok(summed.scale(T::one() / T::from_usize(count).expect("count fits the element type")))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut out = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        out[i] = out[i + 1] * shape[i + 1];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn constructors() {
        assert_eq!(Tensor::<f32>::zeros(&[2, 2]).unwrap().data(), &[0.0; 4]);
        assert_eq!(Tensor::full(&[1, 3], 2.5f32).unwrap().data(), &[2.5; 3]);
        assert_eq!(Tensor::<f32>::ones(&[1]).unwrap().data(), &[1.0]);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(matches!(
            Tensor::<f32>::zeros(&[2, 0]),
            Err(Error::InvalidShape(_))
        ));
        assert!(Tensor::<f32>::zeros(&[]).is_err());
        assert!(Tensor::<f32>::zeros(&[1, 1, 1, 1, 1]).is_err());
        assert!(matches!(
            Tensor::new(&[2], vec![1.0f32]),
            Err(Error::DataLength { .. })
        ));
    }

    #[test]
    fn elementwise() {
        let a = t(&[2], &[1.0, 2.0]);
        let b = t(&[2], &[3.0, 4.0]);
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(a.add(&Tensor::zeros_like(&a)).unwrap(), a);
        assert_eq!(t(&[3], &[1.0, 2.0, 3.0]).scale(0.0).data(), &[0.0; 3]);
        assert!(matches!(
            a.add(&t(&[3], &[0.0; 3])),
            Err(Error::ShapeMismatch { op: "add", .. })
        ));
    }

    #[test]
    fn reductions() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(a.sum_axes(&[0, 1], false).unwrap().data(), &[10.0]);
        assert_eq!(a.sum_all(), 10.0);
        assert_eq!(t(&[2, 2], &[2.0; 4]).mean_all(), 2.0);
        let s0 = a.sum_axes(&[0], false).unwrap();
        assert_eq!(s0.shape(), &[2]);
        assert_eq!(s0.data(), &[4.0, 6.0]);
        let s1 = a.sum_axes(&[1], true).unwrap();
        assert_eq!(s1.shape(), &[2, 1]);
        assert_eq!(s1.data(), &[3.0, 7.0]);
        assert!(matches!(
            a.sum_axes(&[2], false),
            Err(Error::AxisOutOfRange { axis: 2, rank: 2 })
        ));
    }

    #[test]
    fn mean_over_spatial_axes() {
        let x = Tensor::<f32>::from_fn(&[2, 3, 2, 2], |i| i as f32).unwrap();
        let m = x.mean_axes(&[0, 2, 3], false).unwrap();
        assert_eq!(m.shape(), &[3]);
        // channel 0 holds 0..4 and 12..16
        assert_eq!(m.data()[0], 7.5);
    }

    #[test]
    fn gemm_matches_hand_product() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0f64, 0.0, 0.0, 1.0, 1.0, 1.0]; // 3x2
        let mut c = [0.0f64; 4];
        f64::gemm(2, 3, 2, 1.0, (&a, 3, 1), (&b, 2, 1), 0.0, (&mut c, 2, 1));
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
    }

    fn small_shape() -> impl Strategy<Value = Vec<usize>> {
        prop::collection::vec(1usize..5, 1..=4)
    }

    fn tensor_pair() -> impl Strategy<Value = (Tensor, Tensor, Tensor)> {
        small_shape().prop_flat_map(|shape| {
            let len: usize = shape.iter().product();
            let v = move || prop::collection::vec(-100.0f32..100.0, len);
            (v(), v(), v()).prop_map(move |(a, b, c)| {
                (
                    Tensor::new(&shape, a).unwrap(),
                    Tensor::new(&shape, b).unwrap(),
                    Tensor::new(&shape, c).unwrap(),
                )
            })
        })
    }

    /// `|l − r| <= rel · scale` elementwise.
    fn close(l: &Tensor, r: &Tensor, scale: &Tensor, rel: f32) -> bool {
        l.data()
            .iter()
            .zip(r.data())
            .zip(scale.data())
            .all(|((x, y), s)| (x - y).abs() <= rel * s)
    }

    proptest! {
        #[test]
        fn add_mul_commute_and_associate((a, b, c) in tensor_pair()) {
            prop_assert_eq!(a.add(&b).unwrap(), b.add(&a).unwrap());
            prop_assert_eq!(a.mul(&b).unwrap(), b.mul(&a).unwrap());
            let abs = |t: &Tensor| t.map(f32::abs);
            // rounding error of a sum scales with the operand magnitudes
            let l = a.add(&b).unwrap().add(&c).unwrap();
            let r = a.add(&b.add(&c).unwrap()).unwrap();
            let scale = abs(&a).add(&abs(&b)).unwrap().add(&abs(&c)).unwrap();
            prop_assert!(close(&l, &r, &scale, 1e-6));
            let l = a.mul(&b).unwrap().mul(&c).unwrap();
            let r = a.mul(&b.mul(&c).unwrap()).unwrap();
            prop_assert!(close(&l, &r, &abs(&l), 1e-6));
        }

        #[test]
        fn sum_of_axis0_sum_is_total_in_f64(
            shape in small_shape(),
            seed in prop::collection::vec(-1000i32..1000, 256),
        ) {
            let x = Tensor::<f64>::from_fn(&shape, |i| seed[i % seed.len()] as f64 * 0.5).unwrap();
            let total = x.sum_all();
            let nested = x.sum_axes(&[0], false).unwrap().sum_all();
            prop_assert_eq!(total, nested);
        }

        #[test]
        fn reshape_round_trip_preserves_data(shape in small_shape()) {
            let x = Tensor::<f32>::from_fn(&shape, |i| i as f32 * 0.25).unwrap();
            let flat = x.reshape(&[x.len()]).unwrap();
            let back = flat.reshape(&shape).unwrap();
            prop_assert_eq!(back, x);
        }
    }
}
