use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wmamba::wavelet::{dwt_pyramid, haar_dwt, haar_idwt, Band};
use wmamba::Tensor;

/// Block-wise Haar written out per 2×2 block: a b / c d.
fn oracle(img: &Tensor<f64>) -> [Vec<f64>; 4] {
    let s = img.shape();
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let px = |p: usize, y: usize, x: usize| img.data()[(p * h + y) * w + x];
    let mut out: [Vec<f64>; 4] = Default::default();
    for p in 0..planes {
        for y in (0..h).step_by(2) {
            for x in (0..w).step_by(2) {
                let (a, b, c, d) = (px(p, y, x), px(p, y, x + 1), px(p, y + 1, x), px(p, y + 1, x + 1));
                out[0].push((a + b + c + d) / 2.0);
                out[1].push((a + b - c - d) / 2.0);
                out[2].push((a - b + c - d) / 2.0);
                out[3].push((a - b - c + d) / 2.0);
            }
        }
    }
    out
}

fn image(seed: u64, n: usize, c: usize, h: usize, w: usize) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::rand_uniform([n, c, h, w], -2.0, 2.0, &mut rng)
}

#[test]
fn matches_block_formula() {
    let img = image(3, 2, 3, 6, 10);
    let bands = haar_dwt(&img).unwrap();
    let want = oracle(&img);
    for (band, w) in Band::ALL.into_iter().zip(&want) {
        let got = bands.get(band);
        assert_eq!(got.shape(), &[2, 3, 3, 5]);
        for (a, b) in got.data().iter().zip(w) {
            assert!((a - b).abs() < 1e-14, "{band:?}: {a} vs {b}");
        }
    }
}

#[test]
fn worked_example() {
    let img = Tensor::<f64>::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let b = haar_dwt(&img).unwrap();
    assert_eq!(b.ll.data(), &[5.0]);
    assert_eq!(b.lh.data(), &[-2.0]);
    assert_eq!(b.hl.data(), &[-1.0]);
    assert_eq!(b.hh.data(), &[0.0]);
    assert_eq!(haar_idwt(&b).unwrap(), img);
}

#[test]
fn pyramid_levels_transform_the_previous_approximation() {
    let img = image(5, 1, 2, 16, 16);
    let pyr = dwt_pyramid(&img, 3).unwrap();
    assert_eq!(pyr.num_levels(), 3);
    let mut ll = img;
    for l in 1..=3 {
        let direct = haar_dwt(&ll).unwrap();
        let level = pyr.level(l).unwrap();
        for band in Band::ALL {
            assert_eq!(level.get(band), direct.get(band));
        }
        ll = direct.ll.clone();
    }
}

#[test]
fn odd_sides_are_rejected() {
    assert!(haar_dwt(&image(0, 1, 1, 5, 4)).is_err());
    assert!(haar_dwt(&image(0, 1, 1, 4, 7)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn inverse_recovers_the_image(seed in any::<u64>(), hh in 1usize..=16, ww in 1usize..=16, c in 1usize..=3) {
        let img = image(seed, 1, c, 2 * hh, 2 * ww);
        let back = haar_idwt(&haar_dwt(&img).unwrap()).unwrap();
        prop_assert!(back.max_abs_diff(&img).unwrap() <= 1e-12);
    }

    #[test]
    fn energy_is_preserved(seed in any::<u64>(), hh in 1usize..=16, ww in 1usize..=16) {
        let img = image(seed, 2, 1, 2 * hh, 2 * ww);
        let e = img.sum_squares();
        let rel = (haar_dwt(&img).unwrap().energy() - e).abs() / e;
        prop_assert!(rel <= 1e-9);
    }

    #[test]
    fn transform_is_linear(seed in any::<u64>(), k in -3.0f64..3.0) {
        let a = image(seed, 1, 1, 8, 8);
        let b = image(seed ^ 1, 1, 1, 8, 8);
        let sum = Tensor::from_vec([1, 1, 8, 8], a.data().iter().zip(b.data()).map(|(x, y)| x + k * y).collect()).unwrap();
        let (ta, tb, ts) = (haar_dwt(&a).unwrap(), haar_dwt(&b).unwrap(), haar_dwt(&sum).unwrap());
        for band in Band::ALL {
            for ((x, y), s) in ta.get(band).data().iter().zip(tb.get(band).data()).zip(ts.get(band).data()) {
                prop_assert!((x + k * y - s).abs() < 1e-12);
            }
        }
    }
}
