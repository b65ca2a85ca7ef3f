//! 2D convolution (cross-correlation, no kernel flip).

use super::{Backward, BackwardCx, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Scalar, Strides, Tensor};

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn cols_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn cols_cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Source pixel for output `(oy, ox)` and tap `(ky, kx)`, if in bounds.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.pad)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad)?;
        (y < self.h && x < self.w).then_some((y, x))
    }
}

fn im2col<T: Scalar>(geo: &ConvGeom, img: &[T], cols: &mut [T]) {
    let nc = geo.cols_cols();
    for c in 0..geo.cin {
        let plane = &img[c * geo.h * geo.w..(c + 1) * geo.h * geo.w];
        for ky in 0..geo.kh {
            for kx in 0..geo.kw {
                let row = ((c * geo.kh + ky) * geo.kw + kx) * nc;
                for oy in 0..geo.ho {
                    for ox in 0..geo.wo {
                        cols[row + oy * geo.wo + ox] = match geo.source(oy, ox, ky, kx) {
                            Some((y, x)) => plane[y * geo.w + x],
                            None => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(geo: &ConvGeom, cols: &[T], img: &mut [T]) {
    let nc = geo.cols_cols();
    for c in 0..geo.cin {
        let plane = &mut img[c * geo.h * geo.w..(c + 1) * geo.h * geo.w];
        for ky in 0..geo.kh {
            for kx in 0..geo.kw {
                let row = ((c * geo.kh + ky) * geo.kw + kx) * nc;
                for oy in 0..geo.ho {
                    for ox in 0..geo.wo {
                        if let Some((y, x)) = geo.source(oy, ox, ky, kx) {
                            plane[y * geo.w + x] += cols[row + oy * geo.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

struct Conv2dBackward {
    geo: ConvGeom,
    has_bias: bool,
}

impl<T: Scalar> Backward<T> for Conv2dBackward {
    fn backward(&self, cx: &BackwardCx<'_, T>) -> Vec<Option<Vec<T>>> {
        let geo = &self.geo;
        let input = cx.inputs[0].data();
        let weight = cx.inputs[1].data();
        let (kr, kc) = (geo.cols_rows(), geo.cols_cols());
        let in_plane = geo.cin * geo.h * geo.w;
        let out_plane = geo.cout * kc;
        let mut cols = vec![T::zero(); kr * kc];
        let mut gin = cx.needs[0].then(|| vec![T::zero(); input.len()]);
        let mut gw = cx.needs[1].then(|| vec![T::zero(); weight.len()]);
        for n in 0..geo.n {
            let g = &cx.grad[n * out_plane..(n + 1) * out_plane];
            if let Some(gw) = gw.as_mut() {
                im2col(geo, &input[n * in_plane..(n + 1) * in_plane], &mut cols);
                // dW += dY · colsᵀ
                gemm(geo.cout, kc, kr, g, Strides::row_major(kc), &cols, Strides::transposed(kc), T::one(), gw, Strides::row_major(kr));
            }
            if let Some(gin) = gin.as_mut() {
                // dcols = Wᵀ · dY
                gemm(kr, geo.cout, kc, weight, Strides::transposed(kr), g, Strides::row_major(kc), T::zero(), &mut cols, Strides::row_major(kc));
                col2im_add(geo, &cols, &mut gin[n * in_plane..(n + 1) * in_plane]);
            }
        }
        let mut out = vec![gin, gw];
        if self.has_bias {
            out.push(cx.needs[2].then(|| {
                let mut gb = vec![T::zero(); geo.cout];
                for (i, chunk) in cx.grad.chunks_exact(kc).enumerate() {
                    gb[i % geo.cout] += chunk.iter().copied().sum::<T>();
                }
                gb
            }));
        }
        out
    }
}

struct DwConvBackward {
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    k: usize,
}

impl DwConvBackward {
    #[inline]
    fn source(&self, i: usize, j: usize, di: usize, dj: usize) -> Option<(usize, usize)> {
        let p = self.k / 2;
        let y = (i + di).checked_sub(p)?;
        let x = (j + dj).checked_sub(p)?;
        (y < self.h && x < self.w).then_some((y, x))
    }
}

impl<T: Scalar> Backward<T> for DwConvBackward {
    fn backward(&self, cx: &BackwardCx<'_, T>) -> Vec<Option<Vec<T>>> {
        let (x, wt) = (cx.inputs[0].data(), cx.inputs[1].data());
        let (h, w, c, k) = (self.h, self.w, self.c, self.k);
        let mut gx = cx.needs[0].then(|| vec![T::zero(); x.len()]);
        let mut gw = cx.needs[1].then(|| vec![T::zero(); wt.len()]);
        for n in 0..self.n {
            for i in 0..h {
                for j in 0..w {
                    let go = &cx.grad[((n * h + i) * w + j) * c..][..c];
                    for di in 0..k {
                        for dj in 0..k {
                            let Some((y, xx)) = self.source(i, j, di, dj) else { continue };
                            let src = ((n * h + y) * w + xx) * c;
                            if let Some(gx) = gx.as_mut() {
                                for ch in 0..c {
                                    gx[src + ch] += go[ch] * wt[(ch * k + di) * k + dj];
                                }
                            }
                            if let Some(gw) = gw.as_mut() {
                                for ch in 0..c {
                                    gw[(ch * k + di) * k + dj] += go[ch] * x[src + ch];
                                }
                            }
                        }
                    }
                }
            }
        }
        let gb = cx.needs[2].then(|| {
            let mut gb = vec![T::zero(); c];
            for row in cx.grad.chunks_exact(c) {
                gb.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
            }
            gb
        });
        vec![gx, gw, gb]
    }
}

impl<T: Scalar> Graph<T> {
    /// `input: [N, Cin, H, W]`, `weight: [Cout, Cin, kh, kw]`, `bias: [Cout]`.
    ///
    /// Output spatial size is `floor((H + 2·pad − kh) / stride) + 1`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        self.check_var(input)?;
        self.check_var(weight)?;
        let si = self.shape(input).to_vec();
        let sw = self.shape(weight).to_vec();
        if si.len() != 4 || sw.len() != 4 {
            return Err(Error::shape(format!("conv2d expects 4-D input and weight, got {si:?} and {sw:?}")));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be at least 1"));
        }
        let (n, cin, h, w) = (si[0], si[1], si[2], si[3]);
        let (cout, wcin, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if wcin != cin {
            return Err(Error::shape(format!("conv2d: input has {cin} channels, weight expects {wcin}")));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape(format!("conv2d: kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad})")));
        }
        if let Some(b) = bias {
            self.check_var(b)?;
            if self.shape(b) != [cout] {
                return Err(Error::shape(format!("conv2d: bias {:?} for {cout} output channels", self.shape(b))));
            }
        }
        let geo = ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        };
        let (kr, kc) = (geo.cols_rows(), geo.cols_cols());
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let mut out = vec![T::zero(); n * cout * kc];
        let mut cols = vec![T::zero(); kr * kc];
        for b in 0..n {
            im2col(&geo, &x[b * cin * h * w..(b + 1) * cin * h * w], &mut cols);
            let dst = &mut out[b * cout * kc..(b + 1) * cout * kc];
            gemm(cout, kr, kc, wt, Strides::row_major(kr), &cols, Strides::row_major(kc), T::zero(), dst, Strides::row_major(kc));
        }
        if let Some(bv) = bias {
            let bd = self.value(bv).data();
            for (i, chunk) in out.chunks_exact_mut(kc).enumerate() {
                let bias_c = bd[i % cout];
                chunk.iter_mut().for_each(|v| *v += bias_c);
            }
        }
        let value = Tensor::from_vec(vec![n, cout, geo.ho, geo.wo], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push("conv2d", value, &inputs, Conv2dBackward { geo, has_bias: bias.is_some() })
    }

    /// Depthwise `k×k` convolution on channels-last `[N, H, W, C]`, stride 1,
    /// padding `k/2`; `weight: [C, k, k]`, `bias: [C]`.
    pub fn dwconv_nhwc(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        for v in [x, weight, bias] {
            self.check_var(v)?;
        }
        let sx = self.shape(x).to_vec();
        let sw = self.shape(weight).to_vec();
        if sx.len() != 4 || sw.len() != 3 || sw[0] != sx[3] || sw[1] != sw[2] || sw[1] % 2 == 0 || self.shape(bias) != [sx[3]] {
            return Err(Error::shape(format!(
                "dwconv_nhwc: input {sx:?}, weight {sw:?}, bias {:?}",
                self.shape(bias)
            )));
        }
        let bw = DwConvBackward { n: sx[0], h: sx[1], w: sx[2], c: sx[3], k: sw[1] };
        let (h, w, c, k) = (bw.h, bw.w, bw.c, bw.k);
        let xs = self.value(x).data();
        let wt = self.value(weight).data();
        let bs = self.value(bias).data();
        let mut out = vec![T::zero(); xs.len()];
        for n in 0..bw.n {
            for i in 0..h {
                for j in 0..w {
                    let dst = &mut out[((n * h + i) * w + j) * c..][..c];
                    dst.copy_from_slice(bs);
                    for di in 0..k {
                        for dj in 0..k {
                            let Some((y, xx)) = bw.source(i, j, di, dj) else { continue };
                            let src = &xs[((n * h + y) * w + xx) * c..][..c];
                            for ch in 0..c {
                                dst[ch] += src[ch] * wt[(ch * k + di) * k + dj];
                            }
                        }
                    }
                }
            }
        }
        self.push("dwconv_nhwc", Tensor::from_vec(sx, out)?, &[x, weight, bias], bw)
    }
}
