//! Dense row-major tensors and the elementwise/reduction primitives the
//! rest of the crate builds on.
//!
//! Images are laid out channels-last (`[h, w, c]`) and videos as
//! `[t, h, w, c]`, so the frame axis is outermost.

mod real;
mod shape;

pub use real::Real;
pub(crate) use real::{gemm, MatRef};
pub use shape::Shape;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Max,
}

impl BinaryOp {
    #[inline]
    pub fn apply<T: Real>(self, a: T, b: T) -> T {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Max => a.max(b),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryOp {
    Sigmoid,
    Tanh,
    Relu,
    Scale(f64),
}

impl UnaryOp {
    #[inline]
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            UnaryOp::Sigmoid => sigmoid(x),
            UnaryOp::Tanh => x.tanh(),
            UnaryOp::Relu => x.max(T::ZERO),
            UnaryOp::Scale(k) => x * T::from_f64(k),
        }
    }
}

/// Logistic function, evaluated so neither branch overflows.
#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::full(dims, T::ZERO)
    }

    pub fn full(dims: &[usize], value: T) -> Result<Self> {
        let shape = Shape::new(dims.to_vec())?;
        let data = vec![value; shape.len()];
        Ok(Tensor { shape, data })
    }

    pub fn from_vec(dims: &[usize], data: Vec<T>) -> Result<Self> {
        let shape = Shape::new(dims.to_vec())?;
        if data.len() != shape.len() {
            return Err(Error::InvalidShape {
                dims: dims.to_vec(),
                reason: "data length does not match element count",
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let shape = Shape::new(dims.to_vec())?;
        let data = (0..shape.len()).map(&mut f).collect();
        Ok(Tensor { shape, data })
    }

    /// Rank-1, single-element tensor.
    pub fn scalar(value: T) -> Self {
        Tensor { shape: Shape::new(vec![1]).expect("[1] is valid"), data: vec![value] }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn rank(&self) -> usize {
        self.shape.rank()
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

    /// In-place access for optimizer updates.
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, coords: &[usize]) -> Result<T> {
        Ok(self.data[self.shape.flat_index(coords)?])
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::mismatch("item", &[1], self.dims()));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Self> {
        let shape = Shape::new(dims.to_vec())?;
        if shape.len() != self.len() {
            return Err(Error::mismatch("reshape", self.dims(), dims));
        }
        Ok(Tensor { shape, data: self.data.clone() })
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(self, op: &'static str) -> Result<Self> {
        if self.all_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn elementwise(op: BinaryOp, a: &Self, b: &Self) -> Result<Self> {
        if a.shape != b.shape {
            return Err(Error::mismatch("elementwise", a.dims(), b.dims()));
        }
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| op.apply(x, y)).collect();
        Tensor { shape: a.shape.clone(), data }.ensure_finite("elementwise")
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        Self::elementwise(BinaryOp::Add, self, other)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        Self::elementwise(BinaryOp::Sub, self, other)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        Self::elementwise(BinaryOp::Mul, self, other)
    }

    pub fn maximum(&self, other: &Self) -> Result<Self> {
        Self::elementwise(BinaryOp::Max, self, other)
    }

    pub fn map(&self, op: UnaryOp) -> Result<Self> {
        let data = self.data.iter().map(|&x| op.apply(x)).collect();
        Tensor { shape: self.shape.clone(), data }.ensure_finite("map")
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize(self.len())
    }

    /// Arithmetic mean over `axes`; the reduced axes are removed. Reducing
    /// every axis yields a `[1]` tensor.
    pub fn reduce_mean(&self, axes: &[usize]) -> Result<Self> {
        let plan = ReducePlan::new(self.dims(), axes)?;
        let mut out = vec![T::ZERO; plan.out_len];
        for (i, &v) in self.data.iter().enumerate() {
            out[plan.out_index(i)] += v;
        }
        let inv = T::ONE / T::from_usize(plan.group);
        out.iter_mut().for_each(|v| *v *= inv);
        Tensor::from_vec(&plan.out_dims, out)
    }

    /// `[m,k]·[k,n] → [m,n]`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k, n) = matmul_dims(self.dims(), other.dims())?;
        let mut out = vec![T::ZERO; m * n];
        gemm(MatRef::new(&self.data, m, k), MatRef::new(&other.data, k, n), &mut out, false);
        Tensor::from_vec(&[m, n], out)?.ensure_finite("matmul")
    }

    /// Sub-tensor at `index` along the leading axis.
    pub fn index_axis0(&self, index: usize) -> Result<Self> {
        let dims = self.dims();
        if dims.len() < 2 {
            return Err(Error::invalid("index_axis0 needs rank ≥ 2"));
        }
        if index >= dims[0] {
            return Err(Error::invalid(format!("index {index} out of range for extent {}", dims[0])));
        }
        let inner = self.len() / dims[0];
        Tensor::from_vec(&dims[1..], self.data[index * inner..(index + 1) * inner].to_vec())
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::invalid("stack of zero tensors"))?;
        let mut dims = vec![items.len()];
        dims.extend_from_slice(first.dims());
        let mut data = Vec::with_capacity(first.len() * items.len());
        for item in items {
            if item.shape != first.shape {
                return Err(Error::mismatch("stack", first.dims(), item.dims()));
            }
            data.extend_from_slice(&item.data);
        }
        Tensor::from_vec(&dims, data)
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::mismatch("max_abs_diff", self.dims(), other.dims()));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a.to_f64() - b.to_f64()).abs()).fold(0.0, f64::max))
    }
}

impl<T: Real> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor<{}>{:?} ", T::NAME, self.shape)?;
        let head: Vec<_> = self.data.iter().take(PREVIEW).collect();
        if self.data.len() > PREVIEW {
            write!(f, "{head:?}…")
        } else {
            write!(f, "{head:?}")
        }
    }
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    match (a, b) {
        ([m, k], [k2, n]) if k == k2 => Ok((*m, *k, *n)),
        _ => Err(Error::mismatch("matmul", a, b)),
    }
}

/// Maps input flat indices to output flat indices for a mean reduction.
pub(crate) struct ReducePlan {
    pub out_dims: Vec<usize>,
    pub out_len: usize,
    /// Number of inputs averaged into each output.
    pub group: usize,
    in_dims: Vec<usize>,
    keep: Vec<bool>,
    out_strides_full: Vec<usize>,
}

impl ReducePlan {
    pub fn new(dims: &[usize], axes: &[usize]) -> Result<Self> {
        let rank = dims.len();
        let mut keep = vec![true; rank];
        for &axis in axes {
            if axis >= rank {
                return Err(Error::InvalidAxis { axis, rank });
            }
            if !keep[axis] {
                return Err(Error::invalid(format!("axis {axis} listed twice")));
            }
            keep[axis] = false;
        }
        let mut out_dims: Vec<usize> = dims.iter().zip(&keep).filter(|(_, &k)| k).map(|(&d, _)| d).collect();
        let group = dims.iter().zip(&keep).filter(|(_, &k)| !k).map(|(&d, _)| d).product();
        // Stride of each input axis inside the output (0 for reduced axes).
        let mut out_strides_full = vec![0; rank];
        let mut stride = 1;
        for axis in (0..rank).rev() {
            if keep[axis] {
                out_strides_full[axis] = stride;
                stride *= dims[axis];
            }
        }
        if out_dims.is_empty() {
            out_dims.push(1);
        }
        Ok(ReducePlan {
            out_len: out_dims.iter().product(),
            out_dims,
            group,
            in_dims: dims.to_vec(),
            keep,
            out_strides_full,
        })
    }

    #[inline]
    pub fn out_index(&self, mut flat: usize) -> usize {
        let mut out = 0;
        for axis in (0..self.in_dims.len()).rev() {
            let d = self.in_dims[axis];
            if self.keep[axis] {
                out += (flat % d) * self.out_strides_full[axis];
            }
            flat /= d;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(dims: &[usize], data: &[f32]) -> Tensor {
        Tensor::from_vec(dims, data.to_vec()).unwrap()
    }

    #[test]
    fn zeros_examples() {
        assert_eq!(Tensor::<f32>::zeros(&[2, 2]).unwrap().data(), &[0.0; 4]);
        assert_eq!(Tensor::<f32>::zeros(&[1]).unwrap().data(), &[0.0]);
        assert_eq!(Tensor::<f32>::zeros(&[3, 1, 2]).unwrap().len(), 6);
        assert!(Tensor::<f32>::zeros(&[usize::MAX, 3]).is_err());
    }

    #[test]
    fn elementwise_examples() {
        assert_eq!(t(&[2], &[1., 2.]).add(&t(&[2], &[3., 4.])).unwrap().data(), &[4., 6.]);
        assert_eq!(t(&[2], &[2., 3.]).mul(&t(&[2], &[0., 1.])).unwrap().data(), &[0., 3.]);
        assert_eq!(t(&[2], &[-1., 5.]).maximum(&t(&[2], &[0., 0.])).unwrap().data(), &[0., 5.]);
        assert!(t(&[2], &[1., 2.]).add(&t(&[1], &[1.])).is_err());
    }

    #[test]
    fn map_examples() {
        assert_eq!(t(&[1], &[0.]).map(UnaryOp::Sigmoid).unwrap().data(), &[0.5]);
        assert_eq!(t(&[1], &[0.]).map(UnaryOp::Tanh).unwrap().data(), &[0.0]);
        assert_eq!(t(&[2], &[-2., 3.]).map(UnaryOp::Relu).unwrap().data(), &[0., 3.]);
        assert_eq!(t(&[2], &[-2., 3.]).map(UnaryOp::Scale(2.0)).unwrap().data(), &[-4., 6.]);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(-1000.0f32), 0.0);
        assert_eq!(sigmoid(1000.0f32), 1.0);
    }

    #[test]
    fn non_finite_results_are_errors() {
        let big = t(&[1], &[f32::MAX]);
        assert!(matches!(big.add(&big), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn reduce_mean_examples() {
        let x = t(&[2, 2], &[1., 3., 5., 7.]);
        let all = x.reduce_mean(&[0, 1]).unwrap();
        assert_eq!(all.dims(), &[1]);
        assert_eq!(all.data(), &[4.0]);
        assert_eq!(x.reduce_mean(&[1]).unwrap().data(), &[2., 6.]);
        assert_eq!(x.reduce_mean(&[0]).unwrap().data(), &[3., 5.]);
        let c = Tensor::full(&[3, 4, 2], 2.5f32).unwrap();
        assert_eq!(c.reduce_mean(&[0, 2]).unwrap().data(), &[2.5; 4]);
        assert!(x.reduce_mean(&[2]).is_err());
        assert!(x.reduce_mean(&[1, 1]).is_err());
    }

    #[test]
    fn matmul_examples() {
        let id = t(&[2, 2], &[1., 0., 0., 1.]);
        let m = t(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(id.matmul(&m).unwrap().data(), m.data());
        assert_eq!(t(&[1, 2], &[1., 2.]).matmul(&t(&[2, 1], &[3., 4.])).unwrap().data(), &[11.]);
        assert!(m.matmul(&t(&[3, 1], &[1., 2., 3.])).is_err());
    }

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn matmul_matches_triple_loop_4x5x3() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let a: Vec<f32> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = t(&[4, 5], &a).matmul(&t(&[5, 3], &b)).unwrap();
        let a64: Vec<f64> = a.iter().map(|&v| v as f64).collect();
        let b64: Vec<f64> = b.iter().map(|&v| v as f64).collect();
        let want = naive_matmul(&a64, &b64, 4, 5, 3);
        for (g, w) in got.data().iter().zip(&want) {
            assert!((*g as f64 - w).abs() <= 1e-5 * w.abs().max(1.0));
        }
    }

    fn vals(len: usize) -> impl Strategy<Value = Vec<f32>> {
        prop::collection::vec(-10.0f32..10.0, len)
    }

    proptest! {
        #[test]
        fn add_mul_commute_and_associate((a, b, c) in (1usize..20).prop_flat_map(|n| (vals(n), vals(n), vals(n)))) {
            let n = a.len();
            let (a, b, c) = (t(&[n], &a), t(&[n], &b), t(&[n], &c));
            prop_assert!(a.add(&b).unwrap().max_abs_diff(&b.add(&a).unwrap()).unwrap() <= 1e-6);
            prop_assert!(a.mul(&b).unwrap().max_abs_diff(&b.mul(&a).unwrap()).unwrap() <= 1e-6);
            let l = a.add(&b).unwrap().add(&c).unwrap();
            let r = a.add(&b.add(&c).unwrap()).unwrap();
            // Sums of magnitude ≤ 30 carry f32 rounding of a few ulps.
            prop_assert!(l.max_abs_diff(&r).unwrap() <= 1e-6 * 30.0 * 2.0);
            let l = a.mul(&b).unwrap().mul(&c).unwrap();
            let r = a.mul(&b.mul(&c).unwrap()).unwrap();
            for (x, y) in l.data().iter().zip(r.data()) {
                prop_assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0));
            }
        }

        #[test]
        fn reduce_mean_all_is_sum_over_n(data in prop::collection::vec(-10.0f32..10.0, 1..64)) {
            let n = data.len();
            let x = t(&[n], &data);
            let mean = x.reduce_mean(&[0]).unwrap().item().unwrap() as f64;
            let sum: f64 = data.iter().map(|&v| v as f64).sum();
            let want = sum / n as f64;
            prop_assert!((mean - want).abs() <= 1e-6 * want.abs().max(1e-3) + 1e-6);
        }

        #[test]
        fn matmul_matches_oracle(m in 1usize..=16, k in 1usize..=16, n in 1usize..=16, seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let want = naive_matmul(&a, &b, m, k, n);
            let got = Tensor::from_vec(&[m, k], a).unwrap().matmul(&Tensor::from_vec(&[k, n], b).unwrap()).unwrap();
            for (g, w) in got.data().iter().zip(&want) {
                prop_assert!((g - w).abs() <= 1e-5 * w.abs().max(1e-3));
            }
        }
    }
}
