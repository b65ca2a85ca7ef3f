//! Bilinear sampling at continuous pixel coordinates.

use super::{Backward, BackwardCx, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// The four neighbours of a sample point with their bilinear weights.
/// Out-of-range neighbours carry `None` and read as zero.
struct Taps<T> {
    idx: [Option<usize>; 4],
    fx: T,
    fy: T,
}

impl<T: Scalar> Taps<T> {
    fn new(x: T, y: T, h: usize, w: usize) -> Self {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let xi = x0.to_i64().unwrap_or(i64::MIN / 2);
        let yi = y0.to_i64().unwrap_or(i64::MIN / 2);
        let at = |yy: i64, xx: i64| {
            (yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w).then(|| yy as usize * w + xx as usize)
        };
        Taps {
            idx: [at(yi, xi), at(yi, xi + 1), at(yi + 1, xi), at(yi + 1, xi + 1)],
            fx,
            fy,
        }
    }

    fn weights(&self) -> [T; 4] {
        let (fx, fy) = (self.fx, self.fy);
        let (gx, gy) = (T::one() - fx, T::one() - fy);
        [gx * gy, fx * gy, gx * fy, fx * fy]
    }

    fn read(&self, plane: &[T]) -> [T; 4] {
        self.idx.map(|i| i.map_or(T::zero(), |i| plane[i]))
    }
}

struct SampleBackward {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    p: usize,
}

impl<T: Scalar> Backward<T> for SampleBackward {
    fn backward(&self, cx: &BackwardCx<'_, T>) -> Vec<Option<Vec<T>>> {
        let (img, coords) = (cx.inputs[0].data(), cx.inputs[1].data());
        let (c, hw, p) = (self.c, self.h * self.w, self.p);
        let mut gi = cx.needs[0].then(|| vec![T::zero(); img.len()]);
        let mut gc = cx.needs[1].then(|| vec![T::zero(); coords.len()]);
        for n in 0..self.n {
            for j in 0..p {
                let ci = (n * p + j) * 2;
                let taps = Taps::new(coords[ci], coords[ci + 1], self.h, self.w);
                let wts = taps.weights();
                let (mut dx, mut dy) = (T::zero(), T::zero());
                for ch in 0..c {
                    let g = cx.grad[(n * c + ch) * p + j];
                    let base = (n * c + ch) * hw;
                    if let Some(gi) = gi.as_mut() {
                        for (slot, wt) in taps.idx.iter().zip(wts) {
                            if let Some(i) = slot {
                                gi[base + i] += g * wt;
                            }
                        }
                    }
                    if gc.is_some() {
                        let [v00, v01, v10, v11] = taps.read(&img[base..base + hw]);
                        dx += g * ((T::one() - taps.fy) * (v01 - v00) + taps.fy * (v11 - v10));
                        dy += g * ((T::one() - taps.fx) * (v10 - v00) + taps.fx * (v11 - v01));
                    }
                }
                if let Some(gc) = gc.as_mut() {
                    gc[ci] += dx;
                    gc[ci + 1] += dy;
                }
            }
        }
        vec![gi, gc]
    }
}

impl<T: Scalar> Graph<T> {
    /// Samples `input: [N, C, H, W]` at `coords: [N, P, 2]` (each an `(x, y)`
    /// pair, x along columns) giving `[N, C, P]`. Neighbours outside the
    /// image read as zero.
    pub fn bilinear_sample(&mut self, input: Var, coords: Var) -> Result<Var> {
        self.check_var(input)?;
        self.check_var(coords)?;
        let si = self.shape(input).to_vec();
        let sc = self.shape(coords).to_vec();
        if si.len() != 4 || sc.len() != 3 || sc[2] != 2 || sc[0] != si[0] {
            return Err(Error::shape(format!("bilinear_sample: input {si:?}, coords {sc:?}")));
        }
        let (n, c, h, w, p) = (si[0], si[1], si[2], si[3], sc[1]);
        let img = self.value(input).data();
        let co = self.value(coords).data();
        let mut out = vec![T::zero(); n * c * p];
        for b in 0..n {
            for j in 0..p {
                let ci = (b * p + j) * 2;
                let taps = Taps::new(co[ci], co[ci + 1], h, w);
                let wts = taps.weights();
                for ch in 0..c {
                    let base = (b * c + ch) * h * w;
                    let vals = taps.read(&img[base..base + h * w]);
                    out[(b * c + ch) * p + j] = vals.iter().zip(wts).map(|(&v, wt)| v * wt).sum();
                }
            }
        }
        let value = Tensor::from_vec(vec![n, c, p], out)?;
        self.push("bilinear_sample", value, &[input, coords], SampleBackward { n, c, h, w, p })
    }
}
