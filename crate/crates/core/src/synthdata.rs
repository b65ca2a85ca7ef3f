//! Procedural corpus: smooth "real" images with thin contour arcs, and "fake"
//! counterparts made by blending a warped, colour-shifted and faintly noisy
//! copy of the image back into itself across a feathered elliptical boundary.
//!
//! Every sample draws from its own ChaCha stream keyed by `(seed, index)`, so
//! a corpus is identical however it is generated.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{encode_tns, read_tns, Tensor};

pub const REAL: u8 = 0;
pub const FAKE: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    /// `[3, S, S]` in `[0, 1]`.
    pub image: Tensor<f32>,
    pub label: u8,
    /// Blend weight `[1, S, S]`; fakes only. Zero exactly outside the ellipse.
    pub mask: Option<Tensor<f32>>,
    /// Anti-aliased coverage of the drawn contour arcs `[1, S, S]`; reals only.
    pub contours: Option<Tensor<f32>>,
    pub seed: u64,
}

/// Seed of sample `index` in a corpus seeded with `seed`.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng.next_u64()
}

#[derive(Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    rot: f64,
}

impl Ellipse {
    fn random(rng: &mut impl Rng, size: f64, center_lo: f64, center_hi: f64, r_lo: f64, r_hi: f64) -> Self {
        Ellipse {
            cx: rng.random_range(center_lo..center_hi) * size,
            cy: rng.random_range(center_lo..center_hi) * size,
            rx: rng.random_range(r_lo..r_hi) * size,
            ry: rng.random_range(r_lo..r_hi) * size,
            rot: rng.random_range(0.0..PI),
        }
    }

    /// Local frame coordinates of a pixel centre.
    fn local(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.rot.sin_cos();
        (dx * c + dy * s, -dx * s + dy * c)
    }

    fn rho(&self, x: f64, y: f64) -> f64 {
        let (u, v) = self.local(x, y);
        ((u / self.rx).powi(2) + (v / self.ry).powi(2)).sqrt()
    }

    /// First-order signed distance to the outline (positive inside).
    fn inside_distance(&self, x: f64, y: f64) -> f64 {
        let (u, v) = self.local(x, y);
        let rho = ((u / self.rx).powi(2) + (v / self.ry).powi(2)).sqrt().max(1e-9);
        let gx = u / (self.rx * self.rx * rho);
        let gy = v / (self.ry * self.ry * rho);
        (1.0 - rho) / gx.hypot(gy).max(1e-9)
    }

    fn angle(&self, x: f64, y: f64) -> f64 {
        let (u, v) = self.local(x, y);
        (v / self.ry).atan2(u / self.rx)
    }
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// A "real" image. `size` must be even and at least 32.
pub fn generate_real(seed: u64, size: usize) -> Result<SynthSample> {
    if size < 32 || size % 2 != 0 {
        return Err(Error::invalid(format!("image size must be even and ≥ 32, got {size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sz = size as f64;
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.3..0.7));
    let blobs: Vec<(Ellipse, [f64; 3])> = (0..rng.random_range(2..=4))
        .map(|_| {
            let e = Ellipse::random(&mut rng, sz, 0.1, 0.9, 0.15, 0.5);
            let amp = std::array::from_fn(|_| rng.random_range(-0.15..0.15));
            (e, amp)
        })
        .collect();
    // (fx, fy, phase, amplitude per channel), at most 2 cycles per image
    let waves: Vec<(f64, f64, f64, [f64; 3])> = (0..3)
        .map(|_| {
            let fx = rng.random_range(-2.0..2.0) * 2.0 * PI / sz;
            let fy = rng.random_range(-2.0..2.0) * 2.0 * PI / sz;
            let ph = rng.random_range(0.0..2.0 * PI);
            (fx, fy, ph, std::array::from_fn(|_| rng.random_range(-0.03..0.03)))
        })
        .collect();
    let arcs: Vec<(Ellipse, f64, f64, f64, f64)> = (0..rng.random_range(1..=2))
        .map(|_| {
            let e = Ellipse::random(&mut rng, sz, 0.25, 0.75, 0.15, 0.4);
            let start = rng.random_range(-PI..PI);
            let span = rng.random_range(0.5 * PI..1.5 * PI);
            let width = rng.random_range(1.0..2.0);
            let ink = rng.random_range(0.0..0.15);
            (e, start, span, width, ink)
        })
        .collect();
    let plane = size * size;
    let mut img = vec![0.0f32; 3 * plane];
    let mut cover = vec![0.0f32; plane];
    for py in 0..size {
        for px in 0..size {
            let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
            let mut rgb = base;
            for (e, amp) in &blobs {
                let r = e.rho(x, y);
                let w = (-0.5 * r * r * 2.0).exp();
                rgb.iter_mut().zip(amp).for_each(|(c, a)| *c += a * w);
            }
            for (fx, fy, ph, amp) in &waves {
                let s = (fx * x + fy * y + ph).sin();
                rgb.iter_mut().zip(amp).for_each(|(c, a)| *c += a * s);
            }
            let mut cov: f64 = 0.0;
            for (e, start, span, width, ink) in &arcs {
                let d = e.inside_distance(x, y).abs();
                let k = clamp01(width / 2.0 + 0.5 - d);
                if k <= 0.0 {
                    continue;
                }
                let rel = (e.angle(x, y) - start).rem_euclid(2.0 * PI);
                if rel > *span {
                    continue;
                }
                rgb.iter_mut().for_each(|c| *c = *c * (1.0 - k) + ink * k);
                cov = cov.max(k);
            }
            for (c, v) in rgb.iter().enumerate() {
                img[c * plane + py * size + px] = clamp01(*v) as f32;
            }
            cover[py * size + px] = cov as f32;
        }
    }
    Ok(SynthSample {
        image: Tensor::from_vec([3, size, size], img)?,
        label: REAL,
        mask: None,
        contours: Some(Tensor::from_vec([1, size, size], cover)?),
        seed,
    })
}

/// Nearest-pixel read with edge clamping; keeps the copy as sharp as the source.
fn sample_clamped(plane: &[f32], size: usize, x: f64, y: f64) -> f64 {
    let m = (size - 1) as f64;
    let (x, y) = (x.round().clamp(0.0, m) as usize, y.round().clamp(0.0, m) as usize);
    plane[y * size + x] as f64
}

/// Blend parameters drawn for one fake.
#[derive(Clone, Copy, Debug)]
pub struct BlendParams {
    pub shift: (f64, f64),
    pub scale: f64,
    pub rotation: f64,
    pub color: [f64; 3],
    pub contrast: f64,
    pub feather: f64,
    /// Std of the pixel noise carried by the copy; the dense cue a fake leaves
    /// in its region, since reals have no per-pixel noise.
    pub noise: f64,
    pub noise_seed: u64,
}

impl BlendParams {
    pub fn random(rng: &mut impl Rng) -> Self {
        let sign = |rng: &mut dyn rand::Rng| if rng.random::<bool>() { 1.0 } else { -1.0 };
        BlendParams {
            shift: (rng.random_range(-2.5..2.5), rng.random_range(-2.5..2.5)),
            scale: rng.random_range(0.99..1.01),
            rotation: rng.random_range(-0.01..0.01),
            color: std::array::from_fn(|_| sign(rng) * rng.random_range(0.08..0.16)),
            contrast: rng.random_range(0.85..1.15),
            feather: rng.random_range(1.0..3.0),
            noise: rng.random_range(0.01..0.02),
            noise_seed: rng.random(),
        }
    }

    /// No warp and no colour change.
    pub fn identity() -> Self {
        BlendParams { shift: (0.0, 0.0), scale: 1.0, rotation: 0.0, color: [0.0; 3], contrast: 1.0, feather: 2.0, noise: 0.0, noise_seed: 0 }
    }
}

/// Blends a transformed copy of `real` into itself inside `region`. Pixels
/// where the mask is zero are copied from the source untouched.
pub fn blend(real: &Tensor<f32>, region: (f64, f64, f64, f64, f64), p: &BlendParams) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let sh = real.shape();
    if sh.len() != 3 || sh[1] != sh[2] {
        return Err(Error::shape(format!("blend expects [C, S, S], got {sh:?}")));
    }
    let (ch, size) = (sh[0], sh[1]);
    let plane = size * size;
    let e = Ellipse { cx: region.0, cy: region.1, rx: region.2, ry: region.3, rot: region.4 };
    let c0 = size as f64 / 2.0;
    let (sr, cr) = p.rotation.sin_cos();
    let src = real.data();
    let means: Vec<f64> = (0..ch).map(|c| src[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).sum::<f64>() / plane as f64).collect();
    let mut noise = ChaCha8Rng::seed_from_u64(p.noise_seed);
    let mut out = src.to_vec();
    let mut mask = vec![0.0f32; plane];
    for py in 0..size {
        for px in 0..size {
            let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
            let d = e.inside_distance(x, y);
            if d <= 0.0 {
                continue;
            }
            let t = clamp01(d / p.feather);
            let m = t * t * (3.0 - 2.0 * t);
            mask[py * size + px] = m as f32;
            // inverse map: where the warped copy reads from
            let (ux, uy) = (x - 0.5 - c0 - p.shift.0, y - 0.5 - c0 - p.shift.1);
            let sx = (ux * cr + uy * sr) / p.scale + c0;
            let sy = (-ux * sr + uy * cr) / p.scale + c0;
            for c in 0..ch {
                let pl = &src[c * plane..(c + 1) * plane];
                let n: f64 = noise.sample(rand_distr::StandardNormal);
                let warped = sample_clamped(pl, size, sx, sy) + p.noise * n;
                let jit = (warped - means[c]) * p.contrast + means[c] + p.color[c % 3];
                let i = c * plane + py * size + px;
                out[i] = clamp01(m * jit + (1.0 - m) * pl[py * size + px] as f64) as f32;
            }
        }
    }
    Ok((Tensor::from_vec(sh.to_vec(), out)?, Tensor::from_vec([1, size, size], mask)?))
}

/// Mean absolute difference inside the mask support.
pub fn masked_mean_abs_diff(a: &Tensor<f32>, b: &Tensor<f32>, mask: &Tensor<f32>) -> f64 {
    let plane = mask.numel();
    let (mut sum, mut count) = (0.0, 0usize);
    for (i, (&x, &y)) in a.data().iter().zip(b.data()).enumerate() {
        if mask.data()[i % plane] > 0.0 {
            sum += (x as f64 - y as f64).abs();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// A "fake" derived from `real`. Degenerate draws (no visible change) are
/// rejected and redrawn.
pub fn generate_fake(real: &SynthSample, seed: u64) -> Result<SynthSample> {
    if real.label != REAL {
        return Err(Error::invalid("generate_fake needs a real sample"));
    }
    let size = real.image.shape()[1] as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..64 {
        let e = Ellipse::random(&mut rng, size, 0.3, 0.7, 0.18, 0.32);
        let p = BlendParams::random(&mut rng);
        let (image, mask) = blend(&real.image, (e.cx, e.cy, e.rx, e.ry, e.rot), &p)?;
        if masked_mean_abs_diff(&image, &real.image, &mask) > 1e-3 {
            return Ok(SynthSample { image, label: FAKE, mask: Some(mask), contours: None, seed });
        }
    }
    Err(Error::invalid(format!("no non-degenerate blend found for seed {seed}")))
}

/// Real/fake pair `index` of a corpus; both members share a source image.
pub fn generate_pair(seed: u64, index: u64, size: usize) -> Result<(SynthSample, SynthSample)> {
    let s = sample_seed(seed, index);
    let real = generate_real(s, size)?;
    let fake = generate_fake(&real, s ^ 0x9E37_79B9_7F4A_7C15)?;
    Ok((real, fake))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: String,
    pub label: u8,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// Hex SHA-256 over all image payloads in manifest order.
    pub fingerprint: String,
}

pub const MANIFEST_NAME: &str = "manifest.txt";

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&format!("{}\t{}\t{}\n", e.path, e.label, e.seed));
        }
        s.push_str(&format!("# fp={}\n", self.fingerprint));
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut fingerprint = None;
        for (no, line) in text.lines().enumerate() {
            if let Some(fp) = line.strip_prefix("# fp=") {
                fingerprint = Some(fp.trim().to_string());
                continue;
            }
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || Error::Format(format!("manifest line {}: {line:?}", no + 1));
            let mut parts = line.split('\t');
            let path = parts.next().ok_or_else(bad)?.to_string();
            let label: u8 = parts.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
            let seed: u64 = parts.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
            if label > 1 || parts.next().is_some() {
                return Err(bad());
            }
            entries.push(ManifestEntry { path, label, seed });
        }
        let fingerprint = fingerprint.ok_or_else(|| Error::Format("manifest has no fingerprint line".into()))?;
        Ok(Manifest { entries, fingerprint })
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(MANIFEST_NAME);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(&text)
    }
}

/// Writes `n/2` real/fake pairs to `out_dir` as `.tns` files plus a manifest.
/// Pairs are listed adjacently so any contiguous split keeps them together.
pub fn generate_corpus(n: usize, size: usize, seed: u64, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    if n == 0 || n % 2 != 0 {
        return Err(Error::invalid(format!("corpus size must be even and positive, got {n}")));
    }
    let out = out_dir.as_ref();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let pairs: Vec<Result<[(ManifestEntry, Vec<u8>); 2]>> = (0..n / 2)
        .into_par_iter()
        .map(|i| {
            let (real, fake) = generate_pair(seed, i as u64, size)?;
            let mut files = Vec::with_capacity(2);
            for (s, kind) in [(real, "real"), (fake, "fake")] {
                let name = format!("{kind}_{i:06}.tns");
                let bytes = encode_tns(&s.image)?;
                let path = out.join(&name);
                fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
                files.push((ManifestEntry { path: name, label: s.label, seed: s.seed }, bytes));
            }
            let [a, b]: [_; 2] = files.try_into().map_err(|_| Error::invalid("pair"))?;
            Ok([a, b])
        })
        .collect();
    let mut hasher = Sha256::new();
    let mut entries = Vec::with_capacity(n);
    for pair in pairs {
        for (entry, bytes) in pair? {
            hasher.update(&bytes);
            entries.push(entry);
        }
    }
    let manifest = Manifest { entries, fingerprint: hex(&hasher.finalize()) };
    let path = out.join(MANIFEST_NAME);
    fs::write(&path, manifest.to_text()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Images and labels loaded into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub paths: Vec<String>,
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, Manifest)> {
        let dir = dir.as_ref();
        let manifest = Manifest::load(dir)?;
        let images = manifest
            .entries
            .par_iter()
            .map(|e| read_tns::<f32>(dir.join(&e.path)))
            .collect::<Result<Vec<_>>>()?;
        let ds = Dataset {
            paths: manifest.entries.iter().map(|e| e.path.clone()).collect(),
            images,
            labels: manifest.entries.iter().map(|e| e.label).collect(),
        };
        Ok((ds, manifest))
    }

    /// Rows `range` as a new dataset.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Dataset {
            paths: self.paths[range.clone()].to_vec(),
            images: self.images[range.clone()].to_vec(),
            labels: self.labels[range].to_vec(),
        }
    }

    /// First 80% for training, last 20% held out. For an even row count the
    /// held-out share is rounded to whole pairs, so no real/fake pair is cut.
    pub fn split(&self) -> (Self, Self) {
        let n = self.len();
        let held = if n % 2 == 0 { 2 * ((n / 2 + 2) / 5) } else { n / 5 };
        let cut = n - held;
        (self.slice(0..cut), self.slice(cut..self.len()))
    }
}

/// Path of the manifest for a corpus directory.
pub fn manifest_path(dir: impl AsRef<Path>) -> PathBuf {
    dir.as_ref().join(MANIFEST_NAME)
}

/// Reference classifier: 3×3 mean filter on raw pixels followed by logistic
/// regression trained with full-batch gradient descent. Returns fake scores
/// for `test`.
pub fn mean_filter_baseline(train: &Dataset, test: &Dataset, epochs: usize, lr: f64) -> Result<Vec<f64>> {
    let feats = |ds: &Dataset| -> Vec<Vec<f64>> { ds.images.iter().map(mean_filter3).collect() };
    let (xtr, xte) = (feats(train), feats(test));
    let dim = xtr.first().map_or(0, Vec::len);
    // standardise per feature on the training set
    let mut mu = vec![0.0; dim];
    let mut sd = vec![0.0; dim];
    for x in &xtr {
        mu.iter_mut().zip(x).for_each(|(m, v)| *m += v);
    }
    mu.iter_mut().for_each(|m| *m /= xtr.len() as f64);
    for x in &xtr {
        sd.iter_mut().zip(x.iter().zip(&mu)).for_each(|(s, (v, m))| *s += (v - m).powi(2));
    }
    sd.iter_mut().for_each(|s| *s = (*s / xtr.len() as f64).sqrt().max(1e-6));
    let norm = |x: &[f64]| -> Vec<f64> { x.iter().zip(mu.iter().zip(&sd)).map(|(v, (m, s))| (v - m) / s).collect() };
    let xtr: Vec<Vec<f64>> = xtr.iter().map(|x| norm(x)).collect();
    let xte: Vec<Vec<f64>> = xte.iter().map(|x| norm(x)).collect();
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
    for _ in 0..epochs {
        let mut gw = vec![0.0; dim];
        let mut gb = 0.0;
        for (x, &y) in xtr.iter().zip(&train.labels) {
            let z: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
            let r = sig(z) - y as f64;
            gw.iter_mut().zip(x).for_each(|(g, v)| *g += r * v);
            gb += r;
        }
        let inv = 1.0 / xtr.len() as f64;
        w.iter_mut().zip(&gw).for_each(|(wi, g)| *wi -= lr * (g * inv + 1e-3 * *wi));
        b -= lr * gb * inv;
    }
    Ok(xte.iter().map(|x| sig(x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b)).collect())
}

/// 3×3 box filter with edge clamping, flattened.
fn mean_filter3(img: &Tensor<f32>) -> Vec<f64> {
    let sh = img.shape();
    let (c, h, w) = (sh[0], sh[1], sh[2]);
    let d = img.data();
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                        let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                        s += d[ch * h * w + yy * w + xx] as f64;
                    }
                }
                out.push(s / 9.0);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_blend_is_a_no_op() {
        let real = generate_real(3, 32).unwrap();
        let (img, mask) = blend(&real.image, (16.0, 16.0, 8.0, 6.0, 0.3), &BlendParams::identity()).unwrap();
        assert_eq!(img, real.image);
        assert!(mask.data().iter().any(|&m| m > 0.0));
    }

    #[test]
    fn manifest_text_round_trip() {
        let m = Manifest {
            entries: vec![
                ManifestEntry { path: "real_000000.tns".into(), label: 0, seed: 5 },
                ManifestEntry { path: "fake_000000.tns".into(), label: 1, seed: 6 },
            ],
            fingerprint: "ab".repeat(32),
        };
        assert_eq!(Manifest::parse(&m.to_text()).unwrap(), m);
        assert!(Manifest::parse("a\t2\t1\n# fp=00\n").is_err());
    }

    #[test]
    fn odd_sizes_are_rejected() {
        assert!(generate_real(0, 31).is_err());
        assert!(generate_real(0, 16).is_err());
    }
}
