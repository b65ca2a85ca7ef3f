//! Normalisation, softmax and the classification loss.

use super::{Backward, BackwardCx, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

struct LayerNormBackward<T> {
    dim: usize,
    normalized: Vec<T>,
    rstd: Vec<T>,
}

impl<T: Scalar> Backward<T> for LayerNormBackward<T> {
    fn backward(&self, cx: &BackwardCx<'_, T>) -> Vec<Option<Vec<T>>> {
        let d = self.dim;
        let gamma = cx.inputs[1].data();
        let g = cx.grad;
        let inv_d = T::lit(1.0 / d as f64);
        let gx = cx.needs[0].then(|| {
            let mut out = vec![T::zero(); g.len()];
            for (r, rstd) in self.rstd.iter().enumerate() {
                let row = r * d..(r + 1) * d;
                let xhat = &self.normalized[row.clone()];
                let gr = &g[row.clone()];
                let mut mean_g = T::zero();
                let mut mean_gx = T::zero();
                for j in 0..d {
                    let gh = gr[j] * gamma[j];
                    mean_g += gh;
                    mean_gx += gh * xhat[j];
                }
                mean_g *= inv_d;
                mean_gx *= inv_d;
                for j in 0..d {
                    out[r * d + j] = *rstd * (gr[j] * gamma[j] - mean_g - xhat[j] * mean_gx);
                }
            }
            out
        });
        let ggamma = cx.needs[1].then(|| {
            let mut out = vec![T::zero(); d];
            for (gr, xr) in g.chunks_exact(d).zip(self.normalized.chunks_exact(d)) {
                for j in 0..d {
                    out[j] += gr[j] * xr[j];
                }
            }
            out
        });
        let gbeta = cx.needs[2].then(|| {
            let mut out = vec![T::zero(); d];
            for gr in g.chunks_exact(d) {
                out.iter_mut().zip(gr).for_each(|(o, &v)| *o += v);
            }
            out
        });
        vec![gx, ggamma, gbeta]
    }
}

struct SoftmaxBackward {
    dim: usize,
}

impl<T: Scalar> Backward<T> for SoftmaxBackward {
    fn backward(&self, cx: &BackwardCx<'_, T>) -> Vec<Option<Vec<T>>> {
        let y = cx.output.data();
        let mut out = vec![T::zero(); y.len()];
        for ((o, yr), gr) in out.chunks_exact_mut(self.dim).zip(y.chunks_exact(self.dim)).zip(cx.grad.chunks_exact(self.dim)) {
            let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
            for j in 0..self.dim {
                o[j] = yr[j] * (gr[j] - dot);
            }
        }
        vec![Some(out)]
    }
}

struct CrossEntropyBackward<T> {
    probs: Vec<T>,
    labels: Vec<usize>,
    classes: usize,
}

impl<T: Scalar> Backward<T> for CrossEntropyBackward<T> {
    fn backward(&self, cx: &BackwardCx<'_, T>) -> Vec<Option<Vec<T>>> {
        let scale = cx.grad[0] / T::lit(self.labels.len() as f64);
        let mut out = self.probs.clone();
        for (r, &label) in self.labels.iter().enumerate() {
            out[r * self.classes + label] -= T::one();
        }
        out.iter_mut().for_each(|v| *v *= scale);
        vec![Some(out)]
    }
}

fn softmax_rows<T: Scalar>(x: &[T], dim: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (o, row) in out.chunks_exact_mut(dim).zip(x.chunks_exact(dim)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (oj, &v) in o.iter_mut().zip(row) {
            *oj = (v - max).exp();
            total += *oj;
        }
        o.iter_mut().for_each(|v| *v /= total);
    }
    out
}

impl<T: Scalar> Graph<T> {
    /// Normalises the trailing axis, then applies `gamma`/`beta` (both of
    /// that axis's length).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        for v in [x, gamma, beta] {
            self.check_var(v)?;
        }
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("layer_norm of a rank-0 tensor"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(format!(
                "layer_norm over {d}: gamma {:?}, beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let src = self.value(x).data();
        let (ga, be) = (self.value(gamma).data(), self.value(beta).data());
        let rows = src.len() / d.max(1);
        let mut normalized = vec![T::zero(); src.len()];
        let mut out = vec![T::zero(); src.len()];
        let mut rstds = Vec::with_capacity(rows);
        let inv_d = T::lit(1.0 / d as f64);
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rstd = T::one() / (var + T::lit(eps)).sqrt();
            rstds.push(rstd);
            for j in 0..d {
                let xh = (row[j] - mean) * rstd;
                normalized[r * d + j] = xh;
                out[r * d + j] = xh * ga[j] + be[j];
            }
        }
        let value = Tensor::from_vec(shape, out)?;
        self.push(
            "layer_norm",
            value,
            &[x, gamma, beta],
            LayerNormBackward { dim: d, normalized, rstd: rstds },
        )
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.check_var(x)?;
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("softmax of a rank-0 tensor"))?;
        let out = softmax_rows(self.value(x).data(), d);
        self.push("softmax", Tensor::from_vec(shape, out)?, &[x], SoftmaxBackward { dim: d })
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check_var(logits)?;
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() || shape[0] == 0 {
            return Err(Error::shape(format!("cross_entropy: logits {shape:?} with {} labels", labels.len())));
        }
        let classes = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!("label {bad} out of range for {classes} classes")));
        }
        let x = self.value(logits).data();
        let probs = softmax_rows(x, classes);
        let mut total = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = &x[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            total += lse - row[label];
        }
        let loss = total / T::lit(labels.len() as f64);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            &[logits],
            CrossEntropyBackward { probs, labels: labels.to_vec(), classes },
        )
    }
}
