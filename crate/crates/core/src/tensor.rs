//! Minimal dense tensor used throughout the crate.
//!
//! Row-major, last axis fastest. Training runs in `f32`, verification
//! (finite-difference checks, metric oracles) in `f64`; everything numeric
//! is generic over [`Scalar`] to support both.

use crate::error::{Error, Result};

/// Element type for tensors: `f32` or `f64`.
pub trait Scalar:
    num_traits::Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense n-dimensional tensor, row-major with the last axis fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    dims: Vec<usize>,
    data: Vec<S>,
}

/// Row-major strides for `dims`.
pub fn strides_for(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * dims[i + 1];
    }
    s
}

pub fn num_elems(dims: &[usize]) -> usize {
    dims.iter().product()
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(dims: &[usize]) -> Self {
        Tensor {
            dims: dims.to_vec(),
            data: vec![S::zero(); num_elems(dims)],
        }
    }

    pub fn full(dims: &[usize], v: S) -> Self {
        Tensor {
            dims: dims.to_vec(),
            data: vec![v; num_elems(dims)],
        }
    }

    pub fn from_vec(dims: &[usize], data: Vec<S>) -> Result<Self> {
        if num_elems(dims) != data.len() {
            return Err(Error::Shape(format!(
                "dims {:?} require {} elements, got {}",
                dims,
                num_elems(dims),
                data.len()
            )));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn scalar(v: S) -> Self {
        Tensor {
            dims: vec![1],
            data: vec![v],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Single element of a tensor with exactly one element.
    pub fn item(&self) -> S {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Same data, new dims (element count must match).
    pub fn reshaped(&self, dims: &[usize]) -> Result<Self> {
        if num_elems(dims) != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} ({} elems) to {:?}",
                self.dims,
                self.data.len(),
                dims
            )));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let r = self.rank();
        if perm.len() != r {
            return Err(Error::Shape(format!(
                "permutation {:?} does not match rank {}",
                perm, r
            )));
        }
        let mut seen = vec![false; r];
        for &p in perm {
            if p >= r || seen[p] {
                return Err(Error::Shape(format!("invalid permutation {:?}", perm)));
            }
            seen[p] = true;
        }
        let out_dims: Vec<usize> = perm.iter().map(|&p| self.dims[p]).collect();
        let in_strides = strides_for(&self.dims);
        // stride to advance in the input when output coordinate i increments
        let gather_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut out = vec![S::zero(); self.data.len()];
        let mut coords = vec![0usize; r];
        let mut in_idx = 0usize;
        for slot in out.iter_mut() {
            *slot = self.data[in_idx];
            // odometer increment over output coords
            for ax in (0..r).rev() {
                coords[ax] += 1;
                in_idx += gather_strides[ax];
                if coords[ax] < out_dims[ax] {
                    break;
                }
                in_idx -= gather_strides[ax] * out_dims[ax];
                coords[ax] = 0;
            }
        }
        Ok(Tensor {
            dims: out_dims,
            data: out,
        })
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn convert<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.as_f64())).collect(),
        }
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn sliced(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.rank() {
            return Err(Error::Shape(format!(
                "slice axis {} out of rank {}",
                axis,
                self.rank()
            )));
        }
        if start + len > self.dims[axis] {
            return Err(Error::Shape(format!(
                "slice {}..{} exceeds axis {} of size {}",
                start,
                start + len,
                axis,
                self.dims[axis]
            )));
        }
        let outer: usize = self.dims[..axis].iter().product();
        let inner: usize = self.dims[axis + 1..].iter().product();
        let mut out_dims = self.dims.clone();
        out_dims[axis] = len;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * self.dims[axis] + start) * inner;
            out.extend_from_slice(&self.data[base..base + len * inner]);
        }
        Ok(Tensor {
            dims: out_dims,
            data: out,
        })
    }

    /// Concatenate tensors along `axis`; all other dims must match.
    pub fn concat(parts: &[&Tensor<S>], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let r = first.rank();
        if axis >= r {
            return Err(Error::Shape(format!("concat axis {} out of rank {}", axis, r)));
        }
        let mut axis_total = 0usize;
        for p in parts {
            if p.rank() != r {
                return Err(Error::Shape("concat rank mismatch".into()));
            }
            for d in 0..r {
                if d != axis && p.dims[d] != first.dims[d] {
                    return Err(Error::Shape(format!(
                        "concat dim {} mismatch: {:?} vs {:?}",
                        d, p.dims, first.dims
                    )));
                }
            }
            axis_total += p.dims[axis];
        }
        let mut out_dims = first.dims.clone();
        out_dims[axis] = axis_total;
        let outer: usize = first.dims[..axis].iter().product();
        let inner: usize = first.dims[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(num_elems(&out_dims));
        for o in 0..outer {
            for p in parts {
                let chunk = p.dims[axis] * inner;
                out.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        Ok(Tensor {
            dims: out_dims,
            data: out,
        })
    }
}

/// Output dims of an equal-rank broadcast (each axis: equal, or one side 1).
pub fn broadcast_dims(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "broadcast requires equal rank: {:?} vs {:?}",
            a, b
        )));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            if x == y || y == 1 {
                Ok(x.max(y))
            } else if x == 1 {
                Ok(y)
            } else {
                Err(Error::Shape(format!("cannot broadcast {:?} with {:?}", a, b)))
            }
        })
        .collect()
}

/// Elementwise binary op with equal-rank broadcasting.
pub fn broadcast_zip<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    f: impl Fn(S, S) -> S,
) -> Result<Tensor<S>> {
    let out_dims = broadcast_dims(a.dims(), b.dims())?;
    if a.dims() == b.dims() {
        // fast path, no striding
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Ok(Tensor {
            dims: out_dims,
            data,
        });
    }
    let r = out_dims.len();
    let sa = strides_for(a.dims());
    let sb = strides_for(b.dims());
    let stride_a: Vec<usize> = (0..r).map(|i| if a.dims()[i] == 1 { 0 } else { sa[i] }).collect();
    let stride_b: Vec<usize> = (0..r).map(|i| if b.dims()[i] == 1 { 0 } else { sb[i] }).collect();
    let n = num_elems(&out_dims);
    let mut out = Vec::with_capacity(n);
    let mut coords = vec![0usize; r];
    let (mut ia, mut ib) = (0usize, 0usize);
    for _ in 0..n {
        out.push(f(a.data()[ia], b.data()[ib]));
        for ax in (0..r).rev() {
            coords[ax] += 1;
            ia += stride_a[ax];
            ib += stride_b[ax];
            if coords[ax] < out_dims[ax] {
                break;
            }
            ia -= stride_a[ax] * out_dims[ax];
            ib -= stride_b[ax] * out_dims[ax];
            coords[ax] = 0;
        }
    }
    Ok(Tensor {
        dims: out_dims,
        data: out,
    })
}

/// Sum `t` down to `target_dims` over the axes where `target_dims` is 1.
/// Inverse of broadcasting, used by gradients of broadcast ops.
pub fn reduce_to_dims<S: Scalar>(t: &Tensor<S>, target_dims: &[usize]) -> Result<Tensor<S>> {
    if t.dims() == target_dims {
        return Ok(t.clone());
    }
    if t.rank() != target_dims.len() {
        return Err(Error::Shape(format!(
            "reduce rank mismatch: {:?} -> {:?}",
            t.dims(),
            target_dims
        )));
    }
    let r = t.rank();
    let ts = strides_for(target_dims);
    let stride_out: Vec<usize> = (0..r)
        .map(|i| if target_dims[i] == 1 { 0 } else { ts[i] })
        .collect();
    let mut out = Tensor::zeros(target_dims);
    let mut coords = vec![0usize; r];
    let mut oi = 0usize;
    for &v in t.data() {
        out.data[oi] += v;
        for ax in (0..r).rev() {
            coords[ax] += 1;
            oi += stride_out[ax];
            if coords[ax] < t.dims()[ax] {
                break;
            }
            oi -= stride_out[ax] * t.dims()[ax];
            coords[ax] = 0;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strides_row_major() {
        assert_eq!(strides_for(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides_for(&[5]), vec![1]);
    }

    #[test]
    fn permute_roundtrip() {
        let t = Tensor::<f64>::from_vec(&[2, 3, 4], (0..24).map(|v| v as f64).collect()).unwrap();
        let p = t.permuted(&[2, 0, 1]).unwrap();
        assert_eq!(p.dims(), &[4, 2, 3]);
        // inverse permutation of [2,0,1] is [1,2,0]
        let back = p.permuted(&[1, 2, 0]).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn permute_values() {
        let t = Tensor::<f64>::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = t.permuted(&[1, 0]).unwrap();
        assert_eq!(p.data(), &[1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn slice_concat_inverse() {
        let t = Tensor::<f64>::from_vec(&[2, 5, 3], (0..30).map(|v| v as f64).collect()).unwrap();
        let a = t.sliced(1, 0, 2).unwrap();
        let b = t.sliced(1, 2, 3).unwrap();
        let back = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn broadcast_add_and_reduce() {
        let a = Tensor::<f64>::from_vec(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::<f64>::from_vec(&[2, 1], vec![10., 20.]).unwrap();
        let c = broadcast_zip(&a, &b, |x, y| x + y).unwrap();
        assert_eq!(c.data(), &[11., 12., 13., 24., 25., 26.]);
        let r = reduce_to_dims(&a, &[2, 1]).unwrap();
        assert_eq!(r.data(), &[6., 15.]);
        let r2 = reduce_to_dims(&a, &[1, 3]).unwrap();
        assert_eq!(r2.data(), &[5., 7., 9.]);
    }
}
