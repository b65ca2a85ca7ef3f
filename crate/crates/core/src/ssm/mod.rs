//! Diagonal state-space models: discretisation, the time-invariant
//! recurrence, and the input-dependent (selective) scan.

pub mod kernel;

use rand::{Rng, RngExt};

use crate::autodiff::{Backward, BackwardCx, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{fan_in_uniform, ParamId, ParamStore, Session};
use crate::tensor::{Scalar, Tensor};

pub use kernel::{associative_scan, linear_recurrence, ScanArgs, ScanDims, ScanForward, ScanGrads, ScanMode};

/// Zero-order-hold discretisation of a diagonal system for one step `Δ`:
/// `Ā = exp(Δ·A)` and `B̄ = Δ·B` (or the exact `(Ā − 1)/A · B` when `exact`).
pub fn zoh_discretize(a: &[f64], b: &[f64], delta: f64, exact: bool) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(delta > 0.0) {
        return Err(Error::invalid(format!("step size must be positive, got {delta}")));
    }
    if a.len() != b.len() {
        return Err(Error::shape(format!("A has {} entries, B has {}", a.len(), b.len())));
    }
    let abar: Vec<f64> = a.iter().map(|&v| (delta * v).exp()).collect();
    let bbar = a
        .iter()
        .zip(b)
        .zip(&abar)
        .map(|((&av, &bv), &ab)| if exact && av != 0.0 { (ab - 1.0) / av * bv } else { delta * bv })
        .collect();
    Ok((abar, bbar))
}

/// Time-invariant recurrence per channel: `h_t = Ā h_{t−1} + B̄ x_t`,
/// `y_t = C·h_t + D x_t`, from `h_{−1} = 0`.
///
/// `x: [L, E]`; `abar`, `bbar`, `c`: `[E, N]`; `d: [E]`.
pub fn lti_scan<T: Scalar>(abar: &Tensor<T>, bbar: &Tensor<T>, c: &Tensor<T>, d: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let sx = x.shape();
    if sx.len() != 2 {
        return Err(Error::shape(format!("scan input must be [L, E], got {sx:?}")));
    }
    let (l, e_n) = (sx[0], sx[1]);
    let s_n = abar.shape().get(1).copied().unwrap_or(0);
    for (name, t) in [("Ā", abar), ("B̄", bbar), ("C", c)] {
        if t.shape() != [e_n, s_n] {
            return Err(Error::shape(format!("{name} must be [{e_n}, {s_n}], got {:?}", t.shape())));
        }
    }
    if d.shape() != [e_n] {
        return Err(Error::shape(format!("D must be [{e_n}], got {:?}", d.shape())));
    }
    let mut h = vec![T::zero(); e_n * s_n];
    let mut y = Vec::with_capacity(l * e_n);
    for t in 0..l {
        for e in 0..e_n {
            let xt = x.data()[t * e_n + e];
            let mut acc = d.data()[e] * xt;
            for s in 0..s_n {
                let k = e * s_n + s;
                h[k] = abar.data()[k] * h[k] + bbar.data()[k] * xt;
                acc += c.data()[k] * h[k];
            }
            y.push(acc);
        }
    }
    Tensor::from_vec(vec![l, e_n], y)
}

/// Options for [`Graph::selective_scan`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ScanOptions {
    pub mode: ScanMode,
    pub exact_zoh: bool,
}

struct ScanBackward<T> {
    dims: ScanDims,
    opts: ScanOptions,
    fwd: ScanForward<T>,
}

impl<T: Scalar> Backward<T> for ScanBackward<T> {
    fn backward(&self, cx: &BackwardCx<'_, T>) -> Vec<Option<Vec<T>>> {
        let args = ScanArgs {
            dims: self.dims,
            x: cx.inputs[0].data(),
            delta: cx.inputs[1].data(),
            a: cx.inputs[2].data(),
            b: cx.inputs[3].data(),
            c: cx.inputs[4].data(),
            d: cx.inputs[5].data(),
            exact_zoh: self.opts.exact_zoh,
        };
        let g = kernel::backward(&args, &self.fwd, cx.grad, self.opts.mode);
        [g.x, g.delta, g.a, g.b, g.c, g.d]
            .into_iter()
            .zip(&cx.needs)
            .map(|(v, &need)| need.then_some(v))
            .collect()
    }
}

impl<T: Scalar> Graph<T> {
    /// Selective scan with per-token `delta`, `b`, `c`.
    ///
    /// `x`, `delta`: `[B, L, E]`; `a`: `[E, N]`; `b`, `c`: `[B, L, N]`;
    /// `d`: `[E]`. Returns `y: [B, L, E]`.
    pub fn selective_scan(&mut self, x: Var, delta: Var, a: Var, b: Var, c: Var, d: Var, opts: ScanOptions) -> Result<Var> {
        for v in [x, delta, a, b, c, d] {
            self.check_var(v)?;
        }
        let sx = self.shape(x).to_vec();
        let sa = self.shape(a).to_vec();
        if sx.len() != 3 || sa.len() != 2 || sa[0] != sx[2] {
            return Err(Error::shape(format!("selective_scan: x {sx:?}, A {sa:?}")));
        }
        let dims = ScanDims { batch: sx[0], len: sx[1], channels: sx[2], state: sa[1] };
        let bc_shape = [dims.batch, dims.len, dims.state];
        if self.shape(delta) != sx.as_slice()
            || self.shape(b) != bc_shape
            || self.shape(c) != bc_shape
            || self.shape(d) != [dims.channels]
        {
            return Err(Error::shape(format!(
                "selective_scan: x {sx:?}, delta {:?}, A {sa:?}, B {:?}, C {:?}, D {:?}",
                self.shape(delta),
                self.shape(b),
                self.shape(c),
                self.shape(d)
            )));
        }
        let args = ScanArgs {
            dims,
            x: self.value(x).data(),
            delta: self.value(delta).data(),
            a: self.value(a).data(),
            b: self.value(b).data(),
            c: self.value(c).data(),
            d: self.value(d).data(),
            exact_zoh: opts.exact_zoh,
        };
        let mut fwd = kernel::forward(&args, opts.mode);
        let y = Tensor::from_vec(sx, std::mem::take(&mut fwd.y))?;
        self.push("selective_scan", y, &[x, delta, a, b, c, d], ScanBackward { dims, opts, fwd })
    }
}

/// Rank of the low-rank `Δ` projection for `channels` inner channels.
pub fn dt_rank(channels: usize) -> usize {
    channels.div_ceil(16).max(1)
}

/// One selective SSM over `[B, L, E]` sequences.
///
/// Per token: `[Δ_low, B, C] = x·W_x`, `Δ = softplus(Δ_low·W_Δ + b_Δ)`,
/// `A = −exp(A_log)`.
#[derive(Clone, Debug)]
pub struct S6 {
    pub channels: usize,
    pub state: usize,
    pub rank: usize,
    pub x_proj: ParamId,
    pub dt_proj: ParamId,
    pub dt_bias: ParamId,
    pub b_bias: Option<ParamId>,
    pub c_bias: Option<ParamId>,
    pub a_log: ParamId,
    pub d: ParamId,
}

/// Inverse of softplus, for initialising `b_Δ`.
fn inv_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl S6 {
    /// `with_bc_bias` adds learnable offsets to the `B` and `C` projections.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        state: usize,
        with_bc_bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let rank = dt_rank(channels);
        let x_proj = store.add(
            format!("{name}.x_proj"),
            fan_in_uniform(&[channels, rank + 2 * state], channels, rng),
            true,
        );
        let dt_proj = store.add(format!("{name}.dt_proj"), fan_in_uniform(&[rank, channels], rank, rng), true);
        let (lo, hi) = (0.01f64.ln(), 0.1f64.ln());
        let bias: Vec<f64> = (0..channels)
            .map(|_| inv_softplus((lo + (hi - lo) * rng.random::<f64>()).exp()))
            .collect();
        let dt_bias = store.add(format!("{name}.dt_bias"), Tensor::from_f64([channels], &bias).expect("length"), false);
        let b_bias = with_bc_bias.then(|| store.add(format!("{name}.b_bias"), Tensor::zeros([state]), false));
        let c_bias = with_bc_bias.then(|| store.add(format!("{name}.c_bias"), Tensor::zeros([state]), false));
        let a_log: Vec<f64> = (0..channels).flat_map(|_| (0..state).map(|n| ((n + 1) as f64).ln())).collect();
        let a_log = store.add(format!("{name}.a_log"), Tensor::from_f64([channels, state], &a_log).expect("length"), false);
        let d = store.add(format!("{name}.d"), Tensor::full([channels], T::one()), false);
        S6 { channels, state, rank, x_proj, dt_proj, dt_bias, b_bias, c_bias, a_log, d }
    }

    /// Per-token `(Δ, B, C)` for `x: [B, L, E]`.
    pub fn heads<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<(Var, Var, Var)> {
        let wx = s.p(self.x_proj);
        let proj = s.g.matmul(x, wx)?;
        let nd = s.g.shape(proj).len() - 1;
        let dt_low = s.g.narrow(proj, nd, 0, self.rank)?;
        let mut b = s.g.narrow(proj, nd, self.rank, self.state)?;
        let mut c = s.g.narrow(proj, nd, self.rank + self.state, self.state)?;
        if let Some(bb) = self.b_bias {
            let v = s.p(bb);
            b = s.g.add(b, v)?;
        }
        if let Some(cb) = self.c_bias {
            let v = s.p(cb);
            c = s.g.add(c, v)?;
        }
        let wdt = s.p(self.dt_proj);
        let bdt = s.p(self.dt_bias);
        let dt = s.g.linear(dt_low, wdt, Some(bdt))?;
        let dt = s.g.softplus(dt)?;
        Ok((dt, b, c))
    }

    /// `A = −exp(A_log)`.
    pub fn a_matrix<T: Scalar>(&self, s: &mut Session<T>) -> Result<Var> {
        let al = s.p(self.a_log);
        let e = s.g.exp(al)?;
        s.g.neg(e)
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var, opts: ScanOptions) -> Result<Var> {
        let sx = s.g.shape(x).to_vec();
        if sx.len() != 3 || sx[2] != self.channels {
            return Err(Error::shape(format!("S6 expects [B, L, {}], got {sx:?}", self.channels)));
        }
        let (dt, b, c) = self.heads(s, x)?;
        let a = self.a_matrix(s)?;
        let d = s.p(self.d);
        s.g.selective_scan(x, dt, a, b, c, d, opts)
    }
}
