//! Central-difference gradient checking.
//!
//! The relative error of one coordinate is `|a − n| / max(|a|, |n|, floor)`
//! where `a` is the analytic and `n` the numeric derivative. The floor keeps
//! coordinates whose true derivative is ~0 from reporting huge relative
//! errors out of rounding noise.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(input index, element index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }
}

/// Gradient-check settings. [`grad_check`] covers the common case.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub eps: f64,
    pub tol: f64,
    pub floor: f64,
    /// Check at most this many randomly chosen elements per input.
    pub max_per_input: Option<usize>,
    pub seed: u64,
}

impl GradCheck {
    pub fn new(eps: f64, tol: f64) -> Self {
        GradCheck { eps, tol, floor: 1e-3, max_per_input: None, seed: 0 }
    }

    pub fn sampled(mut self, max_per_input: usize, seed: u64) -> Self {
        self.max_per_input = Some(max_per_input);
        self.seed = seed;
        self
    }

    pub fn run<F>(&self, f: F, inputs: &[Tensor<f64>]) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    {
        if !(self.eps > 0.0) {
            return Err(Error::invalid("grad_check eps must be positive"));
        }
        let eval = |vals: &[Tensor<f64>], with_grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
            let mut g = Graph::new();
            let vars: Vec<Var> = vals.iter().map(|t| g.param(t)).collect();
            let out = f(&mut g, &vars)?;
            if g.value(out).numel() != 1 {
                return Err(Error::shape(format!("grad_check: function returned shape {:?}", g.shape(out))));
            }
            let y = g.value(out).data()[0];
            if !y.is_finite() {
                return Err(Error::NonFinite { op: "grad_check" });
            }
            let mut grads = Vec::new();
            if with_grad {
                g.backward(out)?;
                for v in &vars {
                    grads.push(g.grad(*v).map(<[f64]>::to_vec).unwrap_or_default());
                }
            }
            Ok((y, grads))
        };

        let (_, analytic) = eval(inputs, true)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut work: Vec<Tensor<f64>> = inputs.to_vec();
        let mut report = GradCheckReport { max_rel_error: 0.0, max_abs_error: 0.0, worst: None, checked: 0, tol: self.tol };
        for (i, input) in inputs.iter().enumerate() {
            let n = input.numel();
            let coords: Vec<usize> = match self.max_per_input {
                Some(m) if m < n => {
                    let mut c = sample(&mut rng, n, m).into_vec();
                    c.sort_unstable();
                    c
                }
                _ => (0..n).collect(),
            };
            for j in coords {
                let x0 = input.data()[j];
                work[i].data_mut()[j] = x0 + self.eps;
                let (plus, _) = eval(&work, false)?;
                work[i].data_mut()[j] = x0 - self.eps;
                let (minus, _) = eval(&work, false)?;
                work[i].data_mut()[j] = x0;
                let numeric = (plus - minus) / (2.0 * self.eps);
                let a = analytic[i].get(j).copied().unwrap_or(0.0);
                let abs = (a - numeric).abs();
                let rel = abs / a.abs().max(numeric.abs()).max(self.floor);
                report.checked += 1;
                report.max_abs_error = report.max_abs_error.max(abs);
                if rel > report.max_rel_error || report.worst.is_none() {
                    report.max_rel_error = report.max_rel_error.max(rel);
                    report.worst = Some((i, j));
                }
            }
        }
        Ok(report)
    }
}

/// Compares the analytic gradient of the scalar `f(inputs)` against central
/// differences with step `eps`, over every input element.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    GradCheck::new(eps, tol).run(f, inputs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_exact_unit_gradient() {
        // integer inputs and a power-of-two step keep every difference exact
        let x = Tensor::from_vec([5], vec![1.0, -2.0, 3.0, 0.0, 7.0]).unwrap();
        let r = grad_check(|g, v| g.sum(v[0]), &[x], 2f64.powi(-20), 1e-4).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert_eq!(r.max_abs_error, 0.0);
        assert_eq!(r.checked, 5);
    }

    #[test]
    fn sigmoid_sum_passes() {
        let x = Tensor::from_vec([4], vec![0.3, -1.2, 2.5, 0.0]).unwrap();
        let r = grad_check(
            |g, v| {
                let s = g.sigmoid(v[0])?;
                g.sum(s)
            },
            &[x],
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        // relu's kink: the check straddles 0 and the derivative jumps
        let x = Tensor::from_vec([1], vec![0.0]).unwrap();
        let r = grad_check(
            |g, v| {
                let s = g.relu(v[0])?;
                g.sum(s)
            },
            &[x],
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(!r.passed());
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let x = Tensor::from_vec([1], vec![1000.0]).unwrap();
        let r = grad_check(
            |g, v| {
                let e = g.exp(v[0])?;
                g.sum(e)
            },
            &[x],
            1e-6,
            1e-4,
        );
        assert!(matches!(r, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn sampling_limits_coordinates() {
        let x = Tensor::from_vec([50], (0..50).map(|i| i as f64 * 0.1).collect()).unwrap();
        let r = GradCheck::new(1e-6, 1e-4)
            .sampled(7, 3)
            .run(
                |g, v| {
                    let t = g.tanh(v[0])?;
                    g.sum(t)
                },
                &[x],
            )
            .unwrap();
        assert_eq!(r.checked, 7);
        assert!(r.passed());
    }
}
