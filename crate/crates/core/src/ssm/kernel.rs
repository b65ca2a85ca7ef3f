//! Selective-scan kernels on raw buffers.
//!
//! Layouts: `x`, `delta`: `[B, L, E]`; `a`: `[E, N]`; `b`, `c`: `[B, L, N]`;
//! `d`: `[E]`. Saved states and decays are `[B, L, E, N]`.
//!
//! Per channel `(e, s)` and token `t`:
//!
//! ```text
//! ā_t = exp(Δ_t a)      u_t = β(Δ_t, a) · B_t x_t
//! h_t = ā_t h_{t−1} + u_t,   h_{−1} = 0
//! y_t = Σ_s C_t h_t + D x_t
//! ```
//!
//! where `β = Δ` (first-order hold approximation) or `(ā − 1)/a` (exact
//! zero-order hold).

use rayon::prelude::*;

use crate::tensor::Scalar;

/// Evaluation strategy for the recurrence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum ScanMode {
    /// Token-by-token loop.
    #[default]
    Sequential,
    /// Work-efficient associative prefix scan, channels in parallel.
    Parallel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanDims {
    pub batch: usize,
    pub len: usize,
    pub channels: usize,
    pub state: usize,
}

impl ScanDims {
    pub fn tokens(&self) -> usize {
        self.batch * self.len
    }

    pub fn state_len(&self) -> usize {
        self.batch * self.len * self.channels * self.state
    }
}

/// Borrowed scan operands.
#[derive(Clone, Copy, Debug)]
pub struct ScanArgs<'a, T> {
    pub dims: ScanDims,
    pub x: &'a [T],
    pub delta: &'a [T],
    pub a: &'a [T],
    pub b: &'a [T],
    pub c: &'a [T],
    pub d: &'a [T],
    pub exact_zoh: bool,
}

#[derive(Clone, Debug)]
pub struct ScanForward<T> {
    pub y: Vec<T>,
    pub h: Vec<T>,
    pub abar: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct ScanGrads<T> {
    pub x: Vec<T>,
    pub delta: Vec<T>,
    pub a: Vec<T>,
    pub b: Vec<T>,
    pub c: Vec<T>,
    pub d: Vec<T>,
}

impl<T: Scalar> ScanGrads<T> {
    fn zeros(d: ScanDims) -> Self {
        let tok = d.tokens();
        ScanGrads {
            x: vec![T::zero(); tok * d.channels],
            delta: vec![T::zero(); tok * d.channels],
            a: vec![T::zero(); d.channels * d.state],
            b: vec![T::zero(); tok * d.state],
            c: vec![T::zero(); tok * d.state],
            d: vec![T::zero(); d.channels],
        }
    }
}

/// Input coefficient `β(Δ, a)` and its partials `(∂β/∂Δ, ∂β/∂a)`.
#[inline]
fn input_coef<T: Scalar>(dt: T, a: T, abar: T, exact: bool) -> (T, T, T) {
    if !exact {
        return (dt, T::one(), T::zero());
    }
    if a == T::zero() {
        return (dt, T::one(), dt * dt * T::lit(0.5));
    }
    let beta = (abar - T::one()) / a;
    (beta, abar, (dt * abar * a - (abar - T::one())) / (a * a))
}

/// `h_t = a_t h_{t−1} + b_t` from `h_{−1} = 0`, written into `out`.
///
/// Blelloch up-sweep/down-sweep over `(a, b)` pairs under
/// `(a₂, b₂) ∘ (a₁, b₁) = (a₂a₁, a₂b₁ + b₂)`; `ta`/`tb` are scratch buffers.
pub fn associative_scan<T: Scalar>(a: &[T], b: &[T], out: &mut [T], ta: &mut Vec<T>, tb: &mut Vec<T>) {
    let n = a.len();
    if n == 0 {
        return;
    }
    let p = n.next_power_of_two();
    ta.clear();
    tb.clear();
    ta.extend_from_slice(a);
    tb.extend_from_slice(b);
    ta.resize(p, T::one());
    tb.resize(p, T::zero());
    let mut half = 1;
    while half < p {
        let stride = 2 * half;
        let mut i = 0;
        while i < p {
            let (l, r) = (i + half - 1, i + stride - 1);
            tb[r] = ta[r] * tb[l] + tb[r];
            ta[r] = ta[r] * ta[l];
            i += stride;
        }
        half = stride;
    }
    ta[p - 1] = T::one();
    tb[p - 1] = T::zero();
    while half > 1 {
        let stride = half;
        half /= 2;
        let mut i = 0;
        while i < p {
            let (l, r) = (i + half - 1, i + stride - 1);
            let (la, lb) = (ta[l], tb[l]);
            ta[l] = ta[r];
            tb[l] = tb[r];
            // prefix before this block, then the left half
            tb[r] = la * tb[r] + lb;
            ta[r] = la * ta[r];
            i += stride;
        }
    }
    // exclusive prefix maps h_{−1}=0 to tb[t]; apply element t
    for t in 0..n {
        out[t] = a[t] * tb[t] + b[t];
    }
}

/// Plain loop counterpart of [`associative_scan`].
pub fn linear_recurrence<T: Scalar>(a: &[T], b: &[T], out: &mut [T]) {
    let mut h = T::zero();
    for t in 0..a.len() {
        h = a[t] * h + b[t];
        out[t] = h;
    }
}

pub fn forward<T: Scalar>(args: &ScanArgs<'_, T>, mode: ScanMode) -> ScanForward<T> {
    match mode {
        ScanMode::Sequential => forward_sequential(args),
        ScanMode::Parallel => forward_parallel(args),
    }
}

pub fn backward<T: Scalar>(args: &ScanArgs<'_, T>, fwd: &ScanForward<T>, dy: &[T], mode: ScanMode) -> ScanGrads<T> {
    match mode {
        ScanMode::Sequential => backward_sequential(args, fwd, dy),
        ScanMode::Parallel => backward_parallel(args, fwd, dy),
    }
}

fn forward_sequential<T: Scalar>(args: &ScanArgs<'_, T>) -> ScanForward<T> {
    let ScanDims { batch, len, channels: e_n, state: s_n } = args.dims;
    let mut y = vec![T::zero(); batch * len * e_n];
    let mut hs = vec![T::zero(); args.dims.state_len()];
    let mut abars = vec![T::zero(); args.dims.state_len()];
    let mut h = vec![T::zero(); e_n * s_n];
    for bi in 0..batch {
        h.iter_mut().for_each(|v| *v = T::zero());
        for t in 0..len {
            let tok = bi * len + t;
            let bt = &args.b[tok * s_n..][..s_n];
            let ct = &args.c[tok * s_n..][..s_n];
            for e in 0..e_n {
                let dt = args.delta[tok * e_n + e];
                let xt = args.x[tok * e_n + e];
                let ae = &args.a[e * s_n..][..s_n];
                let he = &mut h[e * s_n..][..s_n];
                let base = (tok * e_n + e) * s_n;
                let ho = &mut hs[base..base + s_n];
                let ao = &mut abars[base..base + s_n];
                let mut acc = T::zero();
                if args.exact_zoh {
                    for s in 0..s_n {
                        let ab = (dt * ae[s]).exp();
                        let (beta, _, _) = input_coef(dt, ae[s], ab, true);
                        he[s] = ab * he[s] + beta * bt[s] * xt;
                        acc += ct[s] * he[s];
                        ho[s] = he[s];
                        ao[s] = ab;
                    }
                } else {
                    let dtx = dt * xt;
                    for s in 0..s_n {
                        let ab = (dt * ae[s]).exp();
                        he[s] = ab * he[s] + dtx * bt[s];
                        acc += ct[s] * he[s];
                        ho[s] = he[s];
                        ao[s] = ab;
                    }
                }
                y[tok * e_n + e] = acc + args.d[e] * xt;
            }
        }
    }
    ScanForward { y, h: hs, abar: abars }
}

fn backward_sequential<T: Scalar>(args: &ScanArgs<'_, T>, fwd: &ScanForward<T>, dy: &[T]) -> ScanGrads<T> {
    let dims = args.dims;
    let ScanDims { batch, len, channels: e_n, state: s_n } = dims;
    let mut g = ScanGrads::zeros(dims);
    // carry = ā_{t+1} · ∂L/∂h_{t+1}
    let mut carry = vec![T::zero(); e_n * s_n];
    for bi in 0..batch {
        carry.iter_mut().for_each(|v| *v = T::zero());
        for t in (0..len).rev() {
            let tok = bi * len + t;
            let bt = &args.b[tok * s_n..][..s_n];
            let ct = &args.c[tok * s_n..][..s_n];
            for e in 0..e_n {
                let i = tok * e_n + e;
                let (dt, xt, gy) = (args.delta[i], args.x[i], dy[i]);
                let ae = &args.a[e * s_n..][..s_n];
                let base = i * s_n;
                let h_now = &fwd.h[base..base + s_n];
                let abar = &fwd.abar[base..base + s_n];
                let ce = &mut carry[e * s_n..][..s_n];
                let mut gx = gy * args.d[e];
                let mut gdt = T::zero();
                for s in 0..s_n {
                    let gh = gy * ct[s] + ce[s];
                    let h_prev = if t > 0 { fwd.h[base - e_n * s_n + s] } else { T::zero() };
                    let (beta, dbeta_dt, dbeta_da) = input_coef(dt, ae[s], abar[s], args.exact_zoh);
                    g.c[tok * s_n + s] += gy * h_now[s];
                    g.b[tok * s_n + s] += gh * beta * xt;
                    gx += gh * beta * bt[s];
                    let gab = gh * h_prev * abar[s];
                    let gu = gh * bt[s] * xt;
                    gdt += gab * ae[s] + gu * dbeta_dt;
                    g.a[e * s_n + s] += gab * dt + gu * dbeta_da;
                    ce[s] = abar[s] * gh;
                }
                g.x[i] = gx;
                g.delta[i] = gdt;
                g.d[e] += gy * xt;
            }
        }
    }
    g
}

struct ChannelOut<T> {
    y: Vec<T>,
    h: Vec<T>,
    abar: Vec<T>,
}

fn forward_parallel<T: Scalar>(args: &ScanArgs<'_, T>) -> ScanForward<T> {
    let ScanDims { batch, len, channels: e_n, state: s_n } = args.dims;
    let cols: Vec<ChannelOut<T>> = (0..batch * e_n)
        .into_par_iter()
        .map_init(
            || (vec![T::zero(); len], vec![T::zero(); len], vec![T::zero(); len], Vec::new(), Vec::new()),
            |(ab, u, hbuf, ta, tb), be| {
                let (bi, e) = (be / e_n, be % e_n);
                let mut out = ChannelOut {
                    y: vec![T::zero(); len],
                    h: vec![T::zero(); len * s_n],
                    abar: vec![T::zero(); len * s_n],
                };
                for s in 0..s_n {
                    let a = args.a[e * s_n + s];
                    for t in 0..len {
                        let tok = bi * len + t;
                        let dt = args.delta[tok * e_n + e];
                        ab[t] = (dt * a).exp();
                        let (beta, _, _) = input_coef(dt, a, ab[t], args.exact_zoh);
                        u[t] = beta * args.b[tok * s_n + s] * args.x[tok * e_n + e];
                    }
                    associative_scan(ab, u, hbuf, ta, tb);
                    for t in 0..len {
                        out.y[t] += args.c[(bi * len + t) * s_n + s] * hbuf[t];
                        out.h[t * s_n + s] = hbuf[t];
                        out.abar[t * s_n + s] = ab[t];
                    }
                }
                for t in 0..len {
                    let i = (bi * len + t) * e_n + e;
                    out.y[t] += args.d[e] * args.x[i];
                }
                out
            },
        )
        .collect();
    let mut fwd = ScanForward {
        y: vec![T::zero(); batch * len * e_n],
        h: vec![T::zero(); args.dims.state_len()],
        abar: vec![T::zero(); args.dims.state_len()],
    };
    for (be, col) in cols.into_iter().enumerate() {
        let (bi, e) = (be / e_n, be % e_n);
        for t in 0..len {
            let i = (bi * len + t) * e_n + e;
            fwd.y[i] = col.y[t];
            fwd.h[i * s_n..(i + 1) * s_n].copy_from_slice(&col.h[t * s_n..(t + 1) * s_n]);
            fwd.abar[i * s_n..(i + 1) * s_n].copy_from_slice(&col.abar[t * s_n..(t + 1) * s_n]);
        }
    }
    fwd
}

struct ChannelGrads<T> {
    x: Vec<T>,
    delta: Vec<T>,
    a: Vec<T>,
    b: Vec<T>,
    c: Vec<T>,
    d: T,
}

/// The adjoint `∂L/∂h_t = C_t dy_t + ā_{t+1} ∂L/∂h_{t+1}` is itself a linear
/// recurrence run backwards in time, so it reuses [`associative_scan`].
fn backward_parallel<T: Scalar>(args: &ScanArgs<'_, T>, fwd: &ScanForward<T>, dy: &[T]) -> ScanGrads<T> {
    let dims = args.dims;
    let ScanDims { batch, len, channels: e_n, state: s_n } = dims;
    let parts: Vec<ChannelGrads<T>> = (0..batch * e_n)
        .into_par_iter()
        .map_init(
            || (vec![T::zero(); len], vec![T::zero(); len], vec![T::zero(); len], Vec::new(), Vec::new()),
            |(ra, rb, gh_rev, ta, tb), be| {
                let (bi, e) = (be / e_n, be % e_n);
                let mut out = ChannelGrads {
                    x: vec![T::zero(); len],
                    delta: vec![T::zero(); len],
                    a: vec![T::zero(); s_n],
                    b: vec![T::zero(); len * s_n],
                    c: vec![T::zero(); len * s_n],
                    d: T::zero(),
                };
                let idx = |t: usize| (bi * len + t) * e_n + e;
                for s in 0..s_n {
                    let a = args.a[e * s_n + s];
                    for r in 0..len {
                        let t = len - 1 - r;
                        let tok = bi * len + t;
                        ra[r] = if t + 1 < len { fwd.abar[idx(t + 1) * s_n + s] } else { T::zero() };
                        rb[r] = dy[idx(t)] * args.c[tok * s_n + s];
                    }
                    associative_scan(ra, rb, gh_rev, ta, tb);
                    for t in 0..len {
                        let tok = bi * len + t;
                        let i = idx(t);
                        let gh = gh_rev[len - 1 - t];
                        let (dt, xt, gy, bts) = (args.delta[i], args.x[i], dy[i], args.b[tok * s_n + s]);
                        let ab = fwd.abar[i * s_n + s];
                        let h_prev = if t > 0 { fwd.h[idx(t - 1) * s_n + s] } else { T::zero() };
                        let (beta, dbeta_dt, dbeta_da) = input_coef(dt, a, ab, args.exact_zoh);
                        out.c[t * s_n + s] = gy * fwd.h[i * s_n + s];
                        out.b[t * s_n + s] = gh * beta * xt;
                        out.x[t] += gh * beta * bts;
                        let gab = gh * h_prev * ab;
                        let gu = gh * bts * xt;
                        out.delta[t] += gab * a + gu * dbeta_dt;
                        out.a[s] += gab * dt + gu * dbeta_da;
                    }
                }
                for t in 0..len {
                    let i = idx(t);
                    out.x[t] += dy[i] * args.d[e];
                    out.d += dy[i] * args.x[i];
                }
                out
            },
        )
        .collect();
    let mut g = ScanGrads::zeros(dims);
    // fixed reduction order over (batch, channel)
    for (be, p) in parts.into_iter().enumerate() {
        let (bi, e) = (be / e_n, be % e_n);
        for t in 0..len {
            let tok = bi * len + t;
            g.x[tok * e_n + e] = p.x[t];
            g.delta[tok * e_n + e] = p.delta[t];
            for s in 0..s_n {
                g.b[tok * s_n + s] += p.b[t * s_n + s];
                g.c[tok * s_n + s] += p.c[t * s_n + s];
            }
        }
        for s in 0..s_n {
            g.a[e * s_n + s] += p.a[s];
        }
        g.d[e] += p.d;
    }
    g
}
