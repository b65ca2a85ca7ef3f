//! Pointwise ops.
//!
//! Binary ops broadcast only over leading dimensions: the shorter operand's
//! shape must be a suffix of the longer one's (e.g. `[N, L, E] + [E]`).
//! Anything else needs an explicit [`Graph::broadcast_to`].

use super::{Backward, BackwardCx, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

struct BinaryBackward {
    kind: BinaryKind,
}

fn reduce_to<T: Scalar>(g: Vec<T>, len: usize) -> Vec<T> {
    if g.len() == len {
        return g;
    }
    let mut out = vec![T::zero(); len];
    for chunk in g.chunks_exact(len) {
        out.iter_mut().zip(chunk).for_each(|(o, &v)| *o += v);
    }
    out
}

impl<T: Scalar> Backward<T> for BinaryBackward {
    fn backward(&self, cx: &BackwardCx<'_, T>) -> Vec<Option<Vec<T>>> {
        let (a, b) = (cx.inputs[0].data(), cx.inputs[1].data());
        let (na, nb) = (a.len(), b.len());
        let g = cx.grad;
        let ga = cx.needs[0].then(|| {
            let full: Vec<T> = match self.kind {
                BinaryKind::Add | BinaryKind::Sub => g.to_vec(),
                BinaryKind::Mul => g.iter().enumerate().map(|(i, &gi)| gi * b[i % nb]).collect(),
            };
            reduce_to(full, na)
        });
        let gb = cx.needs[1].then(|| {
            let full: Vec<T> = match self.kind {
                BinaryKind::Add => g.to_vec(),
                BinaryKind::Sub => g.iter().map(|&v| -v).collect(),
                BinaryKind::Mul => g.iter().enumerate().map(|(i, &gi)| gi * a[i % na]).collect(),
            };
            reduce_to(full, nb)
        });
        vec![ga, gb]
    }
}

/// Unary pointwise functions.
#[derive(Clone, Copy, Debug)]
enum Unary {
    Exp,
    Tanh,
    Sigmoid,
    Softplus,
    Silu,
    Gelu,
    Relu,
    Scale(f64),
    AddScalar(f64),
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Exp => "exp",
            Unary::Tanh => "tanh",
            Unary::Sigmoid => "sigmoid",
            Unary::Softplus => "softplus",
            Unary::Silu => "silu",
            Unary::Gelu => "gelu",
            Unary::Relu => "relu",
            Unary::Scale(_) => "scale",
            Unary::AddScalar(_) => "add_scalar",
        }
    }

    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Unary::Exp => x.exp(),
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::Silu => x * sigmoid(x),
            Unary::Gelu => {
                let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
                T::lit(0.5) * x * (T::one() + inner.tanh())
            }
            Unary::Relu => x.max(T::zero()),
            Unary::Scale(s) => x * T::lit(s),
            Unary::AddScalar(s) => x + T::lit(s),
        }
    }

    /// d out / d in, given input `x` and output `y`.
    fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Unary::Exp => y,
            Unary::Tanh => T::one() - y * y,
            Unary::Sigmoid => y * (T::one() - y),
            Unary::Softplus => sigmoid(x),
            Unary::Silu => {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            }
            Unary::Gelu => {
                let c = T::lit(GELU_C);
                let a = T::lit(GELU_A);
                let t = (c * (x + a * x * x * x)).tanh();
                let half = T::lit(0.5);
                half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
            }
            Unary::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Unary::Scale(s) => T::lit(s),
            Unary::AddScalar(_) => T::one(),
        }
    }
}

struct UnaryBackward {
    f: Unary,
}

impl<T: Scalar> Backward<T> for UnaryBackward {
    fn backward(&self, cx: &BackwardCx<'_, T>) -> Vec<Option<Vec<T>>> {
        let x = cx.inputs[0].data();
        let y = cx.output.data();
        let g = x
            .iter()
            .zip(y)
            .zip(cx.grad)
            .map(|((&xi, &yi), &gi)| gi * self.f.derivative(xi, yi))
            .collect();
        vec![Some(g)]
    }
}

impl<T: Scalar> Graph<T> {
    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        self.check_var(a)?;
        self.check_var(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        let out_shape = if sa.len() >= sb.len() && sa.ends_with(sb) {
            sa.to_vec()
        } else if sb.ends_with(sa) {
            sb.to_vec()
        } else {
            return Err(Error::shape(format!(
                "{kind:?}: shapes {sa:?} and {sb:?} do not broadcast (only leading dimensions may differ)"
            )));
        };
        let (da, db) = (ta.data(), tb.data());
        let (na, nb) = (da.len(), db.len());
        let n = na.max(nb);
        let data: Vec<T> = match kind {
            BinaryKind::Add => (0..n).map(|i| da[i % na] + db[i % nb]).collect(),
            BinaryKind::Sub => (0..n).map(|i| da[i % na] - db[i % nb]).collect(),
            BinaryKind::Mul => (0..n).map(|i| da[i % na] * db[i % nb]).collect(),
        };
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        };
        self.push(name, Tensor::from_vec(out_shape, data)?, &[a, b], BinaryBackward { kind })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    fn unary(&mut self, f: Unary, x: Var) -> Result<Var> {
        self.check_var(x)?;
        let out = self.value(x).map(|v| f.apply(v));
        self.push(f.name(), out, &[x], UnaryBackward { f })
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary(Unary::Scale(s), x)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary(Unary::AddScalar(s), x)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, x)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Softplus, x)
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Silu, x)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Gelu, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Relu, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_fn(f: impl Fn(&mut Graph<f64>, Var) -> Result<Var>, x: f64) -> (f64, f64) {
        let mut g = Graph::new();
        let v = g.param(&Tensor::from_vec([1], vec![x]).unwrap());
        let y = f(&mut g, v).unwrap();
        let out = g.value(y).data()[0];
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        (out, g.grad(v).unwrap()[0])
    }

    #[test]
    fn analytic_values() {
        assert_eq!(scalar_fn(|g, v| g.sigmoid(v), 0.0).0, 0.5);
        assert_eq!(scalar_fn(|g, v| g.tanh(v), 0.0), (0.0, 1.0));
        assert!((scalar_fn(|g, v| g.softplus(v), 0.0).0 - 2f64.ln()).abs() < 1e-15);
        assert_eq!(scalar_fn(|g, v| g.relu(v), -1.0), (0.0, 0.0));
        assert_eq!(scalar_fn(|g, v| g.silu(v), 0.0), (0.0, 0.5));
        assert_eq!(scalar_fn(|g, v| g.gelu(v), 0.0), (0.0, 0.5));
    }

    #[test]
    fn softplus_is_stable_for_large_inputs() {
        let (big, dbig) = scalar_fn(|g, v| g.softplus(v), 800.0);
        assert_eq!(big, 800.0);
        assert_eq!(dbig, 1.0);
        let (small, _) = scalar_fn(|g, v| g.softplus(v), -800.0);
        assert!(small >= 0.0 && small < 1e-300);
    }

    #[test]
    fn leading_dimension_broadcast() {
        let mut g = Graph::<f64>::new();
        let a = g.param(&Tensor::from_vec([2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let b = g.param(&Tensor::from_vec([3], vec![10.0, 20.0, 30.0]).unwrap());
        let c = g.mul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[10.0, 40.0, 90.0, 40.0, 100.0, 180.0]);
        let s = g.sum(c).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(b).unwrap(), &[5.0, 7.0, 9.0]);
        assert_eq!(g.grad(a).unwrap(), &[10.0, 20.0, 30.0, 10.0, 20.0, 30.0]);

        let bad = g.constant(Tensor::zeros([2]));
        assert!(matches!(g.add(a, bad), Err(Error::Shape(_))));
    }
}
