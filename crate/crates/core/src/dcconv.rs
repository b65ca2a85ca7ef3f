//! Dynamic contour convolution: a 1-D kernel whose taps follow a predicted,
//! rotated contour through each pixel, plus the snake (angle fixed at 0),
//! free-offset deformable, and rigid variants.
//!
//! For a kernel of odd length `k = 2m + 1`, tap `c ∈ [−m, m]` sits at
//!
//! ```text
//! K_c = (x, y) + v_c · R(θ),   R(θ) = [[cos θ, −sin θ], [sin θ, cos θ]]
//! ```
//!
//! with the row vector `v_c = (c, S_c)` for an x-initialised kernel and
//! `(S_c, c)` for a y-initialised one. `S_c` is the running sum of the
//! predicted offsets on that side of the centre (`S_0 = 0`), so consecutive
//! taps drift at most one pixel perpendicular to the axis.
//!
//! Offsets are stored as `k − 1` channels: channel `2(c−1)` holds `δ_{+c}`
//! and channel `2(c−1)+1` holds `δ_{−c}`.

use std::f64::consts::FRAC_PI_2;

use rand::Rng;

use crate::autodiff::{Backward, BackwardCx, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{fan_in_uniform, Conv2d, ParamId, ParamStore, Session};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Axis {
    X,
    Y,
}

/// Which deformation the layer applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DeformMode {
    /// Chained offsets and a predicted rotation.
    DcConv,
    /// Chained offsets, angle fixed at 0.
    DsConv,
    /// An unconstrained `(Δx, Δy)` per tap.
    Dcn,
    /// The straight axis-aligned kernel.
    Rigid,
}

impl DeformMode {
    pub const ALL: [DeformMode; 4] = [DeformMode::DcConv, DeformMode::DsConv, DeformMode::Dcn, DeformMode::Rigid];

    pub fn as_str(self) -> &'static str {
        match self {
            DeformMode::DcConv => "dcconv",
            DeformMode::DsConv => "dsconv",
            DeformMode::Dcn => "dcn",
            DeformMode::Rigid => "rigid",
        }
    }

    /// Output channels of the prediction head, or 0 if there is none.
    pub fn head_channels(self, k: usize) -> usize {
        match self {
            DeformMode::DcConv | DeformMode::DsConv => k,
            DeformMode::Dcn => 2 * k,
            DeformMode::Rigid => 0,
        }
    }
}

impl std::str::FromStr for DeformMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DeformMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown deform mode {s:?} (expected dcconv, dsconv, dcn or rigid)")))
    }
}

fn check_k(k: usize) -> Result<usize> {
    if k % 2 == 0 || k == 0 {
        return Err(Error::invalid(format!("contour kernel length must be odd, got {k}")));
    }
    Ok(k / 2)
}

/// Offset channel holding `δ_{sign·c}` for `c ≥ 1`.
fn offset_channel(c: usize, positive: bool) -> usize {
    2 * (c - 1) + usize::from(!positive)
}

/// `v_c` before rotation for every tap, given one pixel's offsets.
fn axis_vectors<T: Scalar>(delta: impl Fn(usize) -> T, axis: Axis, k: usize) -> Vec<(T, T)> {
    let m = k / 2;
    let mut out = vec![(T::zero(), T::zero()); k];
    for positive in [true, false] {
        let mut s = T::zero();
        for c in 1..=m {
            s += delta(offset_channel(c, positive));
            let along = T::lit(if positive { c as f64 } else { -(c as f64) });
            let t = if positive { m + c } else { m - c };
            out[t] = match axis {
                Axis::X => (along, s),
                Axis::Y => (s, along),
            };
        }
    }
    out
}

/// Positions of the `k` taps around `center = (x, y)`.
///
/// `delta` holds the `k − 1` offsets in channel order; `theta` is the angle
/// in radians.
pub fn contour_positions(center: (f64, f64), delta: &[f64], theta: f64, axis: Axis, k: usize) -> Result<Vec<(f64, f64)>> {
    check_k(k)?;
    if delta.len() != k - 1 {
        return Err(Error::shape(format!("{} offsets for a kernel of length {k}", delta.len())));
    }
    let (sin, cos) = theta.sin_cos();
    Ok(axis_vectors(|i| delta[i], axis, k)
        .into_iter()
        .map(|(vx, vy)| (center.0 + vx * cos + vy * sin, center.1 - vx * sin + vy * cos))
        .collect())
}

/// Positions of an undeformed kernel, `[N, k·H·W, 2]`, tap-major.
pub fn rigid_coords<T: Scalar>(n: usize, h: usize, w: usize, axis: Axis, k: usize) -> Result<Tensor<T>> {
    let m = check_k(k)? as f64;
    let mut out = Vec::with_capacity(n * k * h * w * 2);
    for _ in 0..n {
        for t in 0..k {
            let c = t as f64 - m;
            let (dx, dy) = match axis {
                Axis::X => (c, 0.0),
                Axis::Y => (0.0, c),
            };
            for i in 0..h {
                for j in 0..w {
                    out.push(T::lit(j as f64 + dx));
                    out.push(T::lit(i as f64 + dy));
                }
            }
        }
    }
    Tensor::from_vec(vec![n, k * h * w, 2], out)
}

struct ContourBackward<T> {
    axis: Axis,
    k: usize,
    hw: usize,
    n: usize,
    /// `(sin θ, cos θ)` per pixel when an angle input is present.
    trig: Option<Vec<(T, T)>>,
}

impl<T: Scalar> Backward<T> for ContourBackward<T> {
    fn backward(&self, cx: &BackwardCx<'_, T>) -> Vec<Option<Vec<T>>> {
        let (k, hw, m) = (self.k, self.hw, self.k / 2);
        let delta = cx.inputs[0].data();
        let mut gd = vec![T::zero(); delta.len()];
        let mut gt = self.trig.as_ref().map(|_| vec![T::zero(); self.n * hw]);
        for b in 0..self.n {
            for p in 0..hw {
                let (sin, cos) = self.trig.as_ref().map_or((T::zero(), T::one()), |t| t[b * hw + p]);
                let grad_at = |t: usize| {
                    let gi = ((b * k + t) * hw + p) * 2;
                    (cx.grad[gi], cx.grad[gi + 1])
                };
                // d pos / d S along the perpendicular coordinate
                let ds = |gx: T, gy: T| match self.axis {
                    Axis::X => gx * sin + gy * cos,
                    Axis::Y => gx * cos - gy * sin,
                };
                for positive in [true, false] {
                    // offset δ_{±j} feeds S_c for every c ≥ j on its side
                    let mut acc = T::zero();
                    for c in (1..=m).rev() {
                        let t = if positive { m + c } else { m - c };
                        let (gx, gy) = grad_at(t);
                        acc += ds(gx, gy);
                        gd[(b * (k - 1) + offset_channel(c, positive)) * hw + p] += acc;
                    }
                }
                if let Some(gt) = gt.as_mut() {
                    let vecs = axis_vectors(|ch| delta[(b * (k - 1) + ch) * hw + p], self.axis, k);
                    let mut acc = T::zero();
                    for (t, (vx, vy)) in vecs.into_iter().enumerate() {
                        let (gx, gy) = grad_at(t);
                        acc += gx * (vy * cos - vx * sin) - gy * (vx * cos + vy * sin);
                    }
                    gt[b * hw + p] = acc;
                }
            }
        }
        let mut out = vec![cx.needs[0].then_some(gd)];
        if self.trig.is_some() {
            out.push(gt.filter(|_| cx.needs[1]));
        }
        out
    }
}

impl<T: Scalar> Graph<T> {
    /// Tap positions `[N, k·H·W, 2]` from offsets `[N, k−1, H, W]` and an
    /// optional angle `[N, 1, H, W]` (absent means θ = 0).
    pub fn contour_coords(&mut self, delta: Var, theta: Option<Var>, axis: Axis) -> Result<Var> {
        self.check_var(delta)?;
        let sd = self.shape(delta).to_vec();
        if sd.len() != 4 {
            return Err(Error::shape(format!("contour offsets must be [N, k-1, H, W], got {sd:?}")));
        }
        let (n, k, h, w) = (sd[0], sd[1] + 1, sd[2], sd[3]);
        check_k(k)?;
        let hw = h * w;
        let trig: Option<Vec<(T, T)>> = match theta {
            Some(t) => {
                self.check_var(t)?;
                if self.shape(t) != [n, 1, h, w] {
                    return Err(Error::shape(format!("contour angle {:?} for offsets {sd:?}", self.shape(t))));
                }
                Some(self.value(t).data().iter().map(|a| a.sin_cos()).collect())
            }
            None => None,
        };
        let dd = self.value(delta).data();
        let mut out = vec![T::zero(); n * k * hw * 2];
        for b in 0..n {
            for i in 0..h {
                for j in 0..w {
                    let p = i * w + j;
                    let (sin, cos) = trig.as_ref().map_or((T::zero(), T::one()), |t| t[b * hw + p]);
                    let vecs = axis_vectors(|ch| dd[(b * (k - 1) + ch) * hw + p], axis, k);
                    for (t, (vx, vy)) in vecs.into_iter().enumerate() {
                        let o = ((b * k + t) * hw + p) * 2;
                        out[o] = T::lit(j as f64) + (vx * cos + vy * sin);
                        out[o + 1] = T::lit(i as f64) + (vy * cos - vx * sin);
                    }
                }
            }
        }
        let value = Tensor::from_vec(vec![n, k * hw, 2], out)?;
        let mut inputs = vec![delta];
        inputs.extend(theta);
        self.push("contour_coords", value, &inputs, ContourBackward { axis, k, hw, n, trig })
    }
}

/// Angle handling for a forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum AngleSource {
    /// Whatever the mode prescribes.
    #[default]
    Predicted,
    /// Replace the predicted angle by a constant (radians).
    Fixed(f64),
}

/// Predicted offsets and angle for one layer call.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// `[N, k−1, H, W]` in `[−1, 1]` (chained modes) or `[N, 2k, H, W]` (dcn).
    pub offsets: Option<Var>,
    /// `[N, 1, H, W]` in `[0, π/2]`.
    pub theta: Option<Var>,
    /// `[N, k·H·W, 2]`.
    pub coords: Var,
}

/// One deformable 1-D convolution layer, weight `[Cout, Cin, k]`.
#[derive(Clone, Debug)]
pub struct DcConv {
    pub axis: Axis,
    pub mode: DeformMode,
    pub k: usize,
    pub cin: usize,
    pub cout: usize,
    pub weight: ParamId,
    pub bias: ParamId,
    pub head: Option<Conv2d>,
}

impl DcConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        axis: Axis,
        mode: DeformMode,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        check_k(k)?;
        let weight = store.add(format!("{name}.weight"), fan_in_uniform(&[cout, cin, k], cin * k, rng), true);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([cout]), false);
        let head = match mode.head_channels(k) {
            0 => None,
            ch => Some(Conv2d::zeroed(store, &format!("{name}.head"), cin, ch, 3, 1)),
        };
        Ok(DcConv { axis, mode, k, cin, cout, weight, bias, head })
    }

    /// Runs the prediction head and builds the sampling positions.
    pub fn positions<T: Scalar>(&self, s: &mut Session<T>, x: Var, angle: AngleSource) -> Result<HeadOutput> {
        let sx = s.g.shape(x).to_vec();
        if sx.len() != 4 || sx[1] != self.cin {
            return Err(Error::shape(format!("contour conv expects [N, {}, H, W], got {sx:?}", self.cin)));
        }
        let (n, h, w, k) = (sx[0], sx[2], sx[3], self.k);
        match (self.mode, &self.head) {
            (DeformMode::Rigid, _) => {
                let coords = s.g.constant(rigid_coords(n, h, w, self.axis, k)?);
                Ok(HeadOutput { offsets: None, theta: None, coords })
            }
            (DeformMode::Dcn, Some(head)) => {
                let raw = head.forward(s, x)?;
                // [N, k, 2, H, W] → [N, k, H, W, 2]
                let r = s.g.reshape(raw, &[n, k, 2, h, w])?;
                let r = s.g.permute(r, &[0, 1, 3, 4, 2])?;
                let r = s.g.reshape(r, &[n, k * h * w, 2])?;
                let base = s.g.constant(rigid_coords(n, h, w, self.axis, k)?);
                let coords = s.g.add(base, r)?;
                Ok(HeadOutput { offsets: Some(raw), theta: None, coords })
            }
            (DeformMode::DcConv | DeformMode::DsConv, Some(head)) => {
                let raw = head.forward(s, x)?;
                let rd = s.g.narrow(raw, 1, 0, k - 1)?;
                let delta = s.g.tanh(rd)?;
                let theta = match (self.mode, angle) {
                    (_, AngleSource::Fixed(a)) => Some(s.g.constant(Tensor::full([n, 1, h, w], T::lit(a)))),
                    (DeformMode::DsConv, AngleSource::Predicted) => None,
                    (_, AngleSource::Predicted) => {
                        let rt = s.g.narrow(raw, 1, k - 1, 1)?;
                        let sg = s.g.sigmoid(rt)?;
                        Some(s.g.scale(sg, FRAC_PI_2)?)
                    }
                };
                let coords = s.g.contour_coords(delta, theta, self.axis)?;
                Ok(HeadOutput { offsets: Some(delta), theta, coords })
            }
            (mode, None) => Err(Error::Config(format!("{} layer is missing its prediction head", mode.as_str()))),
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        self.forward_with(s, x, AngleSource::Predicted)
    }

    pub fn forward_with<T: Scalar>(&self, s: &mut Session<T>, x: Var, angle: AngleSource) -> Result<Var> {
        let head = self.positions(s, x, angle)?;
        let sx = s.g.shape(x).to_vec();
        let (n, h, w, k, cin) = (sx[0], sx[2], sx[3], self.k, self.cin);
        let hw = h * w;
        let samples = s.g.bilinear_sample(x, head.coords)?; // [N, Cin, k·HW]
        let samples = s.g.reshape(samples, &[n, cin, k, hw])?;
        let cols = s.g.permute(samples, &[0, 3, 1, 2])?; // [N, HW, Cin, k]
        let cols = s.g.reshape(cols, &[n, hw, cin * k])?;
        let wt = s.p(self.weight);
        let wt = s.g.reshape(wt, &[self.cout, cin * k])?;
        let wt = s.g.transpose(wt)?;
        let b = s.p(self.bias);
        let y = s.g.linear(cols, wt, Some(b))?; // [N, HW, Cout]
        let y = s.g.permute(y, &[0, 2, 1])?;
        s.g.reshape(y, &[n, self.cout, h, w])
    }
}
