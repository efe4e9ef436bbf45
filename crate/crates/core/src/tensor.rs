//! Dense row-major arrays.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

/// A dense, row-major n-dimensional array.
///
/// The gradient buffer that pairs with a value during training lives on the
/// [`Tape`](crate::tape::Tape) node that produced it, so a `Tensor` is a plain value.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<S>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(Error::BadBuffer {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| S::lit(v)).collect())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: S) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, S::one())
    }

    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> S) -> Self {
        let shape = shape.into();
        let data = (0..numel(&shape)).map(&mut f).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Extent of axis `axis`; negative-style access is not supported.
    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn item(&self) -> S {
        self.data[0]
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut off = 0;
        for (&i, &e) in index.iter().zip(&self.shape) {
            assert!(i < e, "index {index:?} out of bounds for {:?}", self.shape);
            off = off * e + i;
        }
        off
    }

    pub fn get(&self, index: &[usize]) -> S {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: S) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| T::from_f64(v.as_f64()).unwrap_or(T::nan()))
                .collect(),
        }
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn norm_sq(&self) -> S {
        self.data.iter().map(|&v| v * v).sum()
    }

    /// Largest elementwise absolute difference; errors when shapes differ.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "max_abs_diff",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    /// Half-open range `[start, end)` along `axis`.
    pub fn slice_axis(&self, axis: usize, start: usize, end: usize) -> Result<Self> {
        if axis >= self.rank() || start > end || end > self.shape[axis] {
            return Err(invalid(alloc::format!(
                "slice [{start}, {end}) on axis {axis} of {:?}",
                self.shape
            )));
        }
        let outer = numel(&self.shape[..axis]);
        let inner = numel(&self.shape[axis + 1..]);
        let len = self.shape[axis];
        let width = end - start;
        let mut data = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = o * len * inner;
            data.extend_from_slice(&self.data[base + start * inner..base + end * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = width;
        Ok(Tensor { shape, data })
    }

    /// Joins two tensors along `axis`; all other extents must agree.
    pub fn concat_axis(&self, other: &Self, axis: usize) -> Result<Self> {
        let compatible = self.rank() == other.rank()
            && axis < self.rank()
            && self
                .shape
                .iter()
                .zip(&other.shape)
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let outer = numel(&self.shape[..axis]);
        let inner = numel(&self.shape[axis + 1..]);
        let (la, lb) = (self.shape[axis], other.shape[axis]);
        let mut data = Vec::with_capacity(self.numel() + other.numel());
        for o in 0..outer {
            data.extend_from_slice(&self.data[o * la * inner..(o + 1) * la * inner]);
            data.extend_from_slice(&other.data[o * lb * inner..(o + 1) * lb * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = la + lb;
        Ok(Tensor { shape, data })
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || core::mem::replace(&mut seen[p], true)) {
            return Err(invalid(alloc::format!("permutation {perm:?} for rank {rank}")));
        }
        let mut in_strides = vec![1usize; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * self.shape[i + 1];
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let n = self.numel();
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; rank];
        for _ in 0..n {
            let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
            data.push(self.data[off]);
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                if idx[ax] < out_shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Ok(Tensor {
            shape: out_shape,
            data,
        })
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&self) -> Result<Self> {
        let r = self.rank();
        if r < 2 {
            return Err(invalid("transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    /// Batched matrix product `[.., m, k] @ [.., k, n]`.
    ///
    /// The right operand is either rank 2 (shared across the batch) or carries
    /// the same leading batch extents as the left one.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        let plan = MatmulPlan::new(self.shape(), rhs.shape())?;
        let mut out = vec![S::zero(); plan.batch * plan.m * plan.n];
        plan.run(&self.data, &rhs.data, &mut out);
        Tensor::new(plan.out_shape.clone(), out)
    }
}

/// Shape bookkeeping for batched matmul, shared with the tape's backward pass.
#[derive(Clone, Debug)]
pub(crate) struct MatmulPlan {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub rhs_batched: bool,
    pub out_shape: Vec<usize>,
}

impl MatmulPlan {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        };
        if a.len() < 2 || b.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (kb, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != kb {
            return Err(mismatch());
        }
        let lead = &a[..a.len() - 2];
        let rhs_batched = b.len() > 2;
        if rhs_batched && &b[..b.len() - 2] != lead {
            return Err(mismatch());
        }
        let mut out_shape = lead.to_vec();
        out_shape.extend([m, n]);
        Ok(MatmulPlan {
            batch: numel(lead),
            m,
            k,
            n,
            rhs_batched,
            out_shape,
        })
    }

    fn rhs_off(&self, i: usize) -> usize {
        if self.rhs_batched {
            i * self.k * self.n
        } else {
            0
        }
    }

    pub fn run<S: Scalar>(&self, a: &[S], b: &[S], out: &mut [S]) {
        let (m, k, n) = (self.m, self.k, self.n);
        for i in 0..self.batch {
            S::gemm(
                m,
                k,
                n,
                S::one(),
                &a[i * m * k..],
                k,
                1,
                &b[self.rhs_off(i)..],
                n,
                1,
                S::zero(),
                &mut out[i * m * n..],
                n,
                1,
            );
        }
    }

    /// Accumulates `ga += g @ bᵀ` and `gb += aᵀ @ g`.
    pub fn backward<S: Scalar>(
        &self,
        a: &[S],
        b: &[S],
        g: &[S],
        ga: Option<&mut [S]>,
        gb: Option<&mut [S]>,
    ) {
        let (m, k, n) = (self.m, self.k, self.n);
        if let Some(ga) = ga {
            for i in 0..self.batch {
                S::gemm(
                    m,
                    n,
                    k,
                    S::one(),
                    &g[i * m * n..],
                    n,
                    1,
                    &b[self.rhs_off(i)..],
                    1,
                    n,
                    S::one(),
                    &mut ga[i * m * k..],
                    k,
                    1,
                );
            }
        }
        if let Some(gb) = gb {
            if self.rhs_batched {
                for i in 0..self.batch {
                    S::gemm(
                        k,
                        m,
                        n,
                        S::one(),
                        &a[i * m * k..],
                        1,
                        k,
                        &g[i * m * n..],
                        n,
                        1,
                        S::one(),
                        &mut gb[i * k * n..],
                        n,
                        1,
                    );
                }
            } else {
                // Shared rhs: fold the batch into the row dimension.
                let rows = self.batch * m;
                S::gemm(k, rows, n, S::one(), a, 1, k, g, n, 1, S::one(), gb, n, 1);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn rejects_bad_buffer() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let id = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]);
        assert_eq!(id.matmul(&b).unwrap(), b);
        let r = t(&[1, 2], &[1.0, 2.0]).matmul(&t(&[2, 1], &[3.0, 4.0])).unwrap();
        assert_eq!(r.data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = t(&[2, 3], &[0.0; 6]).matmul(&t(&[2, 2], &[0.0; 4])).unwrap_err();
        let msg = alloc::format!("{err}");
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn batched_matmul_matches_per_batch() {
        let a = Tensor::<f64>::from_fn(vec![3, 2, 4], |i| (i as f64 * 0.37).sin());
        let b = Tensor::<f64>::from_fn(vec![3, 4, 5], |i| (i as f64 * 0.11).cos());
        let c = a.matmul(&b).unwrap();
        for bi in 0..3 {
            let ai = a.slice_axis(0, bi, bi + 1).unwrap().reshape(vec![2, 4]).unwrap();
            let bb = b.slice_axis(0, bi, bi + 1).unwrap().reshape(vec![4, 5]).unwrap();
            let ci = c.slice_axis(0, bi, bi + 1).unwrap().reshape(vec![2, 5]).unwrap();
            assert!(ai.matmul(&bb).unwrap().max_abs_diff(&ci).unwrap() < 1e-15);
        }
    }

    #[test]
    fn permute_and_transpose() {
        let a = Tensor::<f64>::from_fn(vec![2, 3], |i| i as f64);
        let at = a.transpose_last2().unwrap();
        assert_eq!(at.shape(), &[3, 2]);
        assert_eq!(at.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        assert!(a.permute(&[0, 0]).is_err());
    }

    #[test]
    fn slice_concat_inverse() {
        let a = Tensor::<f64>::from_fn(vec![2, 5, 3], |i| i as f64);
        let l = a.slice_axis(1, 0, 2).unwrap();
        let r = a.slice_axis(1, 2, 5).unwrap();
        assert_eq!(l.concat_axis(&r, 1).unwrap(), a);
    }
}
