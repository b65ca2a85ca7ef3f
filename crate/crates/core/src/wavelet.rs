//! Single-level Haar DWT, its inverse, and recursive pyramids.
//!
//! Each 2×2 block `[[a, b], [c, d]]` maps to
//!
//! ```text
//! LL = (a + b + c + d) / 2    LH = (a + b − c − d) / 2
//! HL = (a − b + c − d) / 2    HH = (a − b − c + d) / 2
//! ```
//!
//! i.e. stride-2 cross-correlation with four fixed ±½ filters. The transform
//! is orthonormal, so the inverse applies the same signs.

use crate::autodiff::{Backward, BackwardCx, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// One of the four sub-bands.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Band {
    LL,
    LH,
    HL,
    HH,
}

impl Band {
    pub const ALL: [Band; 4] = [Band::LL, Band::LH, Band::HL, Band::HH];
    pub const HIGH: [Band; 3] = [Band::LH, Band::HL, Band::HH];

    /// Filter signs for block entries `[a, b, c, d]`.
    fn signs(self) -> [f64; 4] {
        match self {
            Band::LL => [1.0, 1.0, 1.0, 1.0],
            Band::LH => [1.0, 1.0, -1.0, -1.0],
            Band::HL => [1.0, -1.0, 1.0, -1.0],
            Band::HH => [1.0, -1.0, -1.0, 1.0],
        }
    }
}

/// The four bands of one decomposition level, each `[N, C, H/2, W/2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SubBands<T: Scalar = f32> {
    pub ll: Tensor<T>,
    pub lh: Tensor<T>,
    pub hl: Tensor<T>,
    pub hh: Tensor<T>,
}

impl<T: Scalar> SubBands<T> {
    pub fn get(&self, band: Band) -> &Tensor<T> {
        match band {
            Band::LL => &self.ll,
            Band::LH => &self.lh,
            Band::HL => &self.hl,
            Band::HH => &self.hh,
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.ll.shape()
    }

    /// Sum of squares over all four bands.
    pub fn energy(&self) -> f64 {
        Band::ALL.iter().map(|&b| self.get(b).sum_squares()).sum()
    }
}

/// Levels `1..=L`; level `ℓ` has resolution `H/2^ℓ × W/2^ℓ`.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletPyramid<T: Scalar = f32> {
    pub levels: Vec<SubBands<T>>,
}

impl<T: Scalar> WaveletPyramid<T> {
    /// Bands of level `ℓ` (1-based).
    pub fn level(&self, l: usize) -> Option<&SubBands<T>> {
        l.checked_sub(1).and_then(|i| self.levels.get(i))
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }
}

fn check_even(shape: &[usize]) -> Result<()> {
    if shape.len() != 4 {
        return Err(Error::shape(format!("Haar DWT expects [N, C, H, W], got {shape:?}")));
    }
    if shape[2] % 2 != 0 || shape[3] % 2 != 0 || shape[2] == 0 || shape[3] == 0 {
        return Err(Error::shape(format!("Haar DWT needs even, nonzero H and W, got {}x{}", shape[2], shape[3])));
    }
    Ok(())
}

fn analyse<T: Scalar>(band: Band, shape: &[usize], x: &[T]) -> Vec<T> {
    let (planes, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let (ho, wo) = (h / 2, w / 2);
    let s = band.signs().map(|v| T::lit(0.5 * v));
    let mut out = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for i in 0..ho {
            let top = &plane[2 * i * w..];
            let bot = &plane[(2 * i + 1) * w..];
            for j in 0..wo {
                out.push(s[0] * top[2 * j] + s[1] * top[2 * j + 1] + s[2] * bot[2 * j] + s[3] * bot[2 * j + 1]);
            }
        }
    }
    out
}

/// Adds the adjoint (= inverse contribution) of one band into `img`.
fn synthesise_add<T: Scalar>(band: Band, out_shape: &[usize], coeffs: &[T], img: &mut [T]) {
    let (planes, h, w) = (out_shape[0] * out_shape[1], out_shape[2], out_shape[3]);
    let (ho, wo) = (h / 2, w / 2);
    let s = band.signs().map(|v| T::lit(0.5 * v));
    for p in 0..planes {
        let plane = &mut img[p * h * w..(p + 1) * h * w];
        for i in 0..ho {
            for j in 0..wo {
                let v = coeffs[(p * ho + i) * wo + j];
                plane[2 * i * w + 2 * j] += s[0] * v;
                plane[2 * i * w + 2 * j + 1] += s[1] * v;
                plane[(2 * i + 1) * w + 2 * j] += s[2] * v;
                plane[(2 * i + 1) * w + 2 * j + 1] += s[3] * v;
            }
        }
    }
}

fn half_shape(shape: &[usize]) -> Vec<usize> {
    vec![shape[0], shape[1], shape[2] / 2, shape[3] / 2]
}

/// One-level Haar DWT of `[N, C, H, W]`; H and W must be even.
pub fn haar_dwt<T: Scalar>(image: &Tensor<T>) -> Result<SubBands<T>> {
    check_even(image.shape())?;
    let hs = half_shape(image.shape());
    let band = |b| Tensor::from_vec(hs.clone(), analyse(b, image.shape(), image.data()));
    Ok(SubBands { ll: band(Band::LL)?, lh: band(Band::LH)?, hl: band(Band::HL)?, hh: band(Band::HH)? })
}

/// Exact inverse of [`haar_dwt`].
pub fn haar_idwt<T: Scalar>(bands: &SubBands<T>) -> Result<Tensor<T>> {
    let s = bands.ll.shape();
    if s.len() != 4 || Band::ALL.iter().any(|&b| bands.get(b).shape() != s) {
        return Err(Error::shape(format!(
            "inverse Haar DWT needs four equal [N, C, h, w] bands, got {:?} {:?} {:?} {:?}",
            bands.ll.shape(),
            bands.lh.shape(),
            bands.hl.shape(),
            bands.hh.shape()
        )));
    }
    let out_shape = vec![s[0], s[1], s[2] * 2, s[3] * 2];
    let mut img = vec![T::zero(); out_shape.iter().product()];
    for b in Band::ALL {
        synthesise_add(b, &out_shape, bands.get(b).data(), &mut img);
    }
    Tensor::from_vec(out_shape, img)
}

/// `num_levels` recursive decompositions, each of the previous LL band.
pub fn dwt_pyramid<T: Scalar>(image: &Tensor<T>, num_levels: usize) -> Result<WaveletPyramid<T>> {
    let s = image.shape();
    let div = 1usize
        .checked_shl(num_levels as u32)
        .ok_or_else(|| Error::invalid(format!("{num_levels} DWT levels")))?;
    if s.len() != 4 || s[2] % div != 0 || s[3] % div != 0 || s[2] < div || s[3] < div {
        return Err(Error::shape(format!("{num_levels}-level DWT needs H and W divisible by {div}, got {s:?}")));
    }
    let mut levels: Vec<SubBands<T>> = Vec::with_capacity(num_levels);
    for _ in 0..num_levels {
        let next = haar_dwt(levels.last().map_or(image, |l| &l.ll))?;
        levels.push(next);
    }
    Ok(WaveletPyramid { levels })
}

struct HaarBackward {
    band: Band,
    in_shape: Vec<usize>,
}

impl<T: Scalar> Backward<T> for HaarBackward {
    fn backward(&self, cx: &BackwardCx<'_, T>) -> Vec<Option<Vec<T>>> {
        let mut g = vec![T::zero(); cx.inputs[0].numel()];
        synthesise_add(self.band, &self.in_shape, cx.grad, &mut g);
        vec![Some(g)]
    }
}

impl<T: Scalar> Graph<T> {
    /// One Haar sub-band of `x: [N, C, H, W]`, recorded on the tape.
    pub fn haar_band(&mut self, x: Var, band: Band) -> Result<Var> {
        self.check_var(x)?;
        let shape = self.shape(x).to_vec();
        check_even(&shape)?;
        let out = analyse(band, &shape, self.value(x).data());
        let value = Tensor::from_vec(half_shape(&shape), out)?;
        self.push("haar_band", value, &[x], HaarBackward { band, in_shape: shape })
    }

    /// All four bands in `[LL, LH, HL, HH]` order.
    pub fn haar_dwt(&mut self, x: Var) -> Result<[Var; 4]> {
        Ok([
            self.haar_band(x, Band::LL)?,
            self.haar_band(x, Band::LH)?,
            self.haar_band(x, Band::HL)?,
            self.haar_band(x, Band::HH)?,
        ])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_by_two_example() {
        let img = Tensor::<f64>::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = haar_dwt(&img).unwrap();
        assert_eq!(
            [b.ll.data()[0], b.lh.data()[0], b.hl.data()[0], b.hh.data()[0]],
            [5.0, -2.0, -1.0, 0.0]
        );
        assert_eq!(b.energy(), img.sum_squares());
        assert_eq!(haar_idwt(&b).unwrap(), img);
    }

    #[test]
    fn constant_image_has_no_detail() {
        let img = Tensor::<f64>::full([2, 3, 8, 8], 0.3);
        let p = dwt_pyramid(&img, 3).unwrap();
        for (l, bands) in p.levels.iter().enumerate() {
            let expect = 0.3 * 2f64.powi(l as i32 + 1);
            assert!(bands.ll.data().iter().all(|&v| (v - expect).abs() < 1e-14));
            for b in Band::HIGH {
                assert!(bands.get(b).data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn odd_sizes_are_rejected() {
        let img = Tensor::<f64>::zeros([1, 1, 3, 4]);
        assert!(matches!(haar_dwt(&img), Err(Error::Shape(_))));
        assert!(dwt_pyramid(&Tensor::<f64>::zeros([1, 1, 12, 12]), 3).is_err());
    }

    #[test]
    fn pyramid_resolutions_halve() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Tensor::<f64>::rand_uniform([1, 3, 64, 64], 0.0, 1.0, &mut rng);
        let p = dwt_pyramid(&img, 3).unwrap();
        let sizes: Vec<usize> = p.levels.iter().map(|l| l.shape()[2]).collect();
        assert_eq!(sizes, [32, 16, 8]);
        assert_eq!(p.level(1).unwrap(), &haar_dwt(&img).unwrap());
    }

    #[test]
    fn graph_band_matches_tensor_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = Tensor::<f64>::rand_uniform([2, 2, 6, 4], -1.0, 1.0, &mut rng);
        let bands = haar_dwt(&img).unwrap();
        let mut g = Graph::new();
        let x = g.constant(img);
        let vars = g.haar_dwt(x).unwrap();
        for (v, b) in vars.iter().zip(Band::ALL) {
            assert_eq!(g.value(*v), bands.get(b));
        }
    }
}
