//! Layout ops and reductions.

use super::{Backward, BackwardCx, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{numel, Scalar, Tensor};

struct ReshapeBackward;

impl<T: Scalar> Backward<T> for ReshapeBackward {
    fn backward(&self, cx: &BackwardCx<'_, T>) -> Vec<Option<Vec<T>>> {
        vec![Some(cx.grad.to_vec())]
    }
}

/// Maps each output linear index to the input linear index it reads.
fn permute_map(shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let in_strides = Tensor::<f32>::strides_of(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = numel(shape);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let mut offset = 0usize;
    for _ in 0..n {
        map.push(offset);
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, map)
}

/// Gather by index map: `out[i] = x[map[i]]`; backward scatters.
struct GatherBackward {
    map: Vec<usize>,
}

impl<T: Scalar> Backward<T> for GatherBackward {
    fn backward(&self, cx: &BackwardCx<'_, T>) -> Vec<Option<Vec<T>>> {
        let mut g = vec![T::zero(); cx.inputs[0].numel()];
        for (&src, &gi) in self.map.iter().zip(cx.grad) {
            g[src] += gi;
        }
        vec![Some(g)]
    }
}

struct ConcatBackward {
    outer: usize,
    inner: usize,
    sizes: Vec<usize>,
}

impl<T: Scalar> Backward<T> for ConcatBackward {
    fn backward(&self, cx: &BackwardCx<'_, T>) -> Vec<Option<Vec<T>>> {
        let total: usize = self.sizes.iter().sum();
        let mut out = Vec::with_capacity(self.sizes.len());
        let mut start = 0;
        for (k, &s) in self.sizes.iter().enumerate() {
            if !cx.needs[k] {
                out.push(None);
                start += s;
                continue;
            }
            let mut g = Vec::with_capacity(self.outer * s * self.inner);
            for o in 0..self.outer {
                let base = (o * total + start) * self.inner;
                g.extend_from_slice(&cx.grad[base..base + s * self.inner]);
            }
            out.push(Some(g));
            start += s;
        }
        out
    }
}

struct SumAllBackward {
    scale: f64,
}

impl<T: Scalar> Backward<T> for SumAllBackward {
    fn backward(&self, cx: &BackwardCx<'_, T>) -> Vec<Option<Vec<T>>> {
        let v = cx.grad[0] * T::lit(self.scale);
        vec![Some(vec![v; cx.inputs[0].numel()])]
    }
}

struct SumAxisBackward {
    outer: usize,
    len: usize,
    inner: usize,
    scale: f64,
}

impl<T: Scalar> Backward<T> for SumAxisBackward {
    fn backward(&self, cx: &BackwardCx<'_, T>) -> Vec<Option<Vec<T>>> {
        let s = T::lit(self.scale);
        let mut g = vec![T::zero(); self.outer * self.len * self.inner];
        for o in 0..self.outer {
            let src = &cx.grad[o * self.inner..(o + 1) * self.inner];
            for l in 0..self.len {
                let dst = &mut g[(o * self.len + l) * self.inner..][..self.inner];
                dst.iter_mut().zip(src).for_each(|(d, &v)| *d = v * s);
            }
        }
        vec![Some(g)]
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

impl<T: Scalar> Graph<T> {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check_var(x)?;
        let t = self.value(x);
        if numel(shape) != t.numel() {
            return Err(Error::shape(format!("cannot reshape {:?} into {:?}", t.shape(), shape)));
        }
        let out = Tensor::from_vec(shape.to_vec(), t.data().to_vec())?;
        self.push("reshape", out, &[x], ReshapeBackward)
    }

    fn gather(&mut self, op: &'static str, x: Var, shape: Vec<usize>, map: Vec<usize>) -> Result<Var> {
        let src = self.value(x).data();
        let data = map.iter().map(|&i| src[i]).collect();
        let out = Tensor::from_vec(shape, data)?;
        self.push(op, out, &[x], GatherBackward { map })
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        self.check_var(x)?;
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(format!("invalid permutation {perm:?} for shape {shape:?}")));
        }
        let (out_shape, map) = permute_map(&shape, perm);
        self.gather("permute", x, out_shape, map)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let nd = self.shape(x).len();
        if nd < 2 {
            return Err(Error::shape("transpose needs at least two dimensions"));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(x, &perm)
    }

    /// Repeats size-1 axes up to `shape` (same rank required).
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check_var(x)?;
        let src = self.shape(x).to_vec();
        if src.len() != shape.len() || src.iter().zip(shape).any(|(&s, &d)| s != d && s != 1) {
            return Err(Error::shape(format!("cannot broadcast {src:?} to {shape:?}")));
        }
        let in_strides = Tensor::<f32>::strides_of(&src);
        let out_strides = Tensor::<f32>::strides_of(shape);
        let map = (0..numel(shape))
            .map(|i| {
                let mut off = 0;
                for d in 0..shape.len() {
                    let c = (i / out_strides[d]) % shape[d];
                    if src[d] != 1 {
                        off += c * in_strides[d];
                    }
                }
                off
            })
            .collect();
        self.gather("broadcast_to", x, shape.to_vec(), map)
    }

    /// Selects entries `indices` along `axis` (indices may repeat).
    pub fn index_select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        self.check_var(x)?;
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(Error::shape(format!("index {bad} out of range for axis of size {len}")));
        }
        let mut map = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let base = (o * len + i) * inner;
                map.extend(base..base + inner);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = indices.len();
        self.gather("index_select", x, out_shape, map)
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let size = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::shape(format!("axis {axis} out of range")))?;
        if start + len > size {
            return Err(Error::shape(format!("narrow [{start}, {}) exceeds axis size {size}", start + len)));
        }
        let idx: Vec<usize> = (start..start + len).collect();
        self.index_select(x, axis, &idx)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::shape("concat of zero tensors"))?;
        for &x in xs {
            self.check_var(x)?;
        }
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(format!("axis {axis} out of range for {base:?}")));
        }
        let mut sizes = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape(format!("concat along {axis}: {base:?} vs {s:?}")));
            }
            sizes.push(s[axis]);
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let total: usize = sizes.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&x, &s) in xs.iter().zip(&sizes) {
                let src = self.value(x).data();
                data.extend_from_slice(&src[o * s * inner..(o + 1) * s * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push("concat", Tensor::from_vec(shape, data)?, xs, ConcatBackward { outer, inner, sizes })
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check_var(x)?;
        let s: T = self.value(x).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), &[x], SumAllBackward { scale: 1.0 })
    }

    /// Mean of all elements, as a rank-0 tensor.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check_var(x)?;
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::shape("mean of empty tensor"));
        }
        let s: T = self.value(x).data().iter().copied().sum();
        let m = s / T::lit(n as f64);
        self.push("mean", Tensor::scalar(m), &[x], SumAllBackward { scale: 1.0 / n as f64 })
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        self.check_var(x)?;
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let scale = if mean { 1.0 / len as f64 } else { 1.0 };
        let src = self.value(x).data();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut data[o * inner..(o + 1) * inner];
            for l in 0..len {
                let row = &src[(o * len + l) * inner..][..inner];
                dst.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
            }
            if mean {
                dst.iter_mut().for_each(|d| *d *= T::lit(scale));
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let op = if mean { "mean_axis" } else { "sum_axis" };
        self.push(op, Tensor::from_vec(out_shape, data)?, &[x], SumAxisBackward { outer, len, inner, scale })
    }

    /// Sum over one axis (the axis is removed).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    /// Mean over one axis (the axis is removed).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }
}
