use proptest::prelude::*;
use wmamba::synthdata::{
    blend, generate_corpus, generate_fake, generate_pair, generate_real, masked_mean_abs_diff, mean_filter_baseline, BlendParams, Dataset, Manifest, FAKE,
    REAL,
};
use wmamba::metrics::auc;

const SIZE: usize = 64;

/// Level-1 Haar detail energy per 2×2 block, summed over channels.
fn detail_energy(img: &[f32], ch: usize, size: usize) -> Vec<f64> {
    let half = size / 2;
    let mut e = vec![0.0; half * half];
    for c in 0..ch {
        let px = |y: usize, x: usize| img[(c * size + y) * size + x] as f64;
        for i in 0..half {
            for j in 0..half {
                let (a, b, cc, d) = (px(2 * i, 2 * j), px(2 * i, 2 * j + 1), px(2 * i + 1, 2 * j), px(2 * i + 1, 2 * j + 1));
                let lh = (a + b - cc - d) / 2.0;
                let hl = (a - b + cc - d) / 2.0;
                let hh = (a - b - cc + d) / 2.0;
                e[i * half + j] += lh * lh + hl * hl + hh * hh;
            }
        }
    }
    e
}

/// Blocks whose centre lies within `r` pixels of a pixel where `raster > 0`.
fn near(raster: &[f32], size: usize, r: f64) -> Vec<bool> {
    let on: Vec<(f64, f64)> = (0..size * size)
        .filter(|&i| raster[i] > 0.0)
        .map(|i| ((i % size) as f64 + 0.5, (i / size) as f64 + 0.5))
        .collect();
    let half = size / 2;
    (0..half * half)
        .map(|b| {
            let (x, y) = (2.0 * (b % half) as f64 + 1.0, 2.0 * (b / half) as f64 + 1.0);
            on.iter().any(|&(px, py)| (px - x).hypot(py - y) <= r)
        })
        .collect()
}

#[test]
fn reals_are_deterministic_and_clamped() {
    for seed in 0..20 {
        let a = generate_real(seed, SIZE).unwrap();
        assert_eq!(a, generate_real(seed, SIZE).unwrap());
        assert_eq!(a.label, REAL);
        assert_eq!(a.image.shape(), &[3, SIZE, SIZE]);
        assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    assert_ne!(generate_real(1, SIZE).unwrap().image, generate_real(2, SIZE).unwrap().image);
}

#[test]
fn detail_energy_sits_on_the_contours() {
    let mut worst = 1.0f64;
    for seed in 0..50 {
        let s = generate_real(seed, SIZE).unwrap();
        let e = detail_energy(s.image.data(), 3, SIZE);
        let close = near(s.contours.as_ref().unwrap().data(), SIZE, 3.0);
        let total: f64 = e.iter().sum();
        let inside: f64 = e.iter().zip(&close).filter(|(_, &c)| c).map(|(v, _)| v).sum();
        worst = worst.min(inside / total);
    }
    assert!(worst >= 0.8, "worst share near contours {worst:.3}");
}

#[test]
fn fakes_differ_only_inside_the_mask() {
    for idx in 0..30 {
        let (real, fake) = generate_pair(3, idx, SIZE).unwrap();
        assert_eq!(fake.label, FAKE);
        let mask = fake.mask.as_ref().unwrap().data();
        let plane = SIZE * SIZE;
        for (i, (a, b)) in real.image.data().iter().zip(fake.image.data()).enumerate() {
            if mask[i % plane] == 0.0 {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        assert!(fake.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn fakes_are_subtle_but_visible() {
    for idx in 0..100 {
        let (real, fake) = generate_pair(11, idx, SIZE).unwrap();
        let d = masked_mean_abs_diff(&fake.image, &real.image, fake.mask.as_ref().unwrap());
        assert!(d > 0.0 && d < 0.2, "pair {idx}: {d}");
    }
}

#[test]
fn identity_blend_is_rejected_as_degenerate() {
    let real = generate_real(4, SIZE).unwrap();
    let region = (32.0, 32.0, 12.0, 9.0, 0.3);
    let (img, mask) = blend(&real.image, region, &BlendParams::identity()).unwrap();
    assert_eq!(img, real.image);
    assert!(masked_mean_abs_diff(&img, &real.image, &mask) == 0.0);
    // the generator never returns such a draw
    let fake = generate_fake(&real, 99).unwrap();
    assert!(masked_mean_abs_diff(&fake.image, &real.image, fake.mask.as_ref().unwrap()) > 1e-3);
    assert!(generate_fake(&fake, 1).is_err());
}

#[test]
fn fakes_carry_more_detail_energy_inside_the_mask() {
    let (mut fake_e, mut real_e) = (0.0, 0.0);
    for idx in 0..100 {
        let (real, fake) = generate_pair(5, idx, SIZE).unwrap();
        let mask = fake.mask.as_ref().unwrap().data();
        // levels 1 and 2; level 2 acts on the level-1 approximation
        for (img, acc) in [(&real.image, &mut real_e), (&fake.image, &mut fake_e)] {
            let mut plane: Vec<f32> = img.data().to_vec();
            let mut size = SIZE;
            let mut m: Vec<f32> = mask.to_vec();
            for _ in 0..2 {
                let e = detail_energy(&plane, 3, size);
                let half = size / 2;
                for b in 0..half * half {
                    let (i, j) = (b / half, b % half);
                    let inside = [(0, 0), (0, 1), (1, 0), (1, 1)].iter().any(|(di, dj)| m[(2 * i + di) * size + 2 * j + dj] > 0.0);
                    if inside {
                        *acc += e[b];
                    }
                }
                plane = approx(&plane, 3, size);
                m = (0..half * half).map(|b| m[(2 * (b / half)) * size + 2 * (b % half)].max(m[(2 * (b / half) + 1) * size + 2 * (b % half) + 1])).collect();
                size = half;
            }
        }
    }
    assert!(fake_e > real_e, "fake {fake_e:.4} vs real {real_e:.4}");
}

fn approx(img: &[f32], ch: usize, size: usize) -> Vec<f32> {
    let half = size / 2;
    let mut out = Vec::with_capacity(ch * half * half);
    for c in 0..ch {
        let px = |y: usize, x: usize| img[(c * size + y) * size + x];
        for i in 0..half {
            for j in 0..half {
                out.push((px(2 * i, 2 * j) + px(2 * i, 2 * j + 1) + px(2 * i + 1, 2 * j) + px(2 * i + 1, 2 * j + 1)) / 2.0);
            }
        }
    }
    out
}

#[test]
fn corpus_is_balanced_reproducible_and_split_evenly() {
    let dir = tempfile::tempdir().unwrap();
    let a = generate_corpus(100, 32, 7, dir.path().join("a")).unwrap();
    let b = generate_corpus(100, 32, 7, dir.path().join("b")).unwrap();
    let c = generate_corpus(100, 32, 8, dir.path().join("c")).unwrap();
    assert_eq!(a.fingerprint, b.fingerprint);
    assert_ne!(a.fingerprint, c.fingerprint);
    assert_eq!(a.fingerprint.len(), 64);
    assert_eq!(a.entries.iter().filter(|e| e.label == FAKE).count(), 50);
    assert_eq!(Manifest::load(dir.path().join("a")).unwrap(), a);

    let (ds, _) = Dataset::load(dir.path().join("a")).unwrap();
    assert_eq!(ds.len(), 100);
    let (train, held) = ds.split();
    assert_eq!((train.len(), held.len()), (80, 20));
    for part in [&train, &held] {
        assert_eq!(part.labels.iter().filter(|&&l| l == FAKE).count() * 2, part.len());
    }
    assert!(generate_corpus(7, 32, 7, dir.path().join("odd")).is_err());
}

#[test]
fn manifest_lines_are_path_label_seed() {
    let dir = tempfile::tempdir().unwrap();
    generate_corpus(4, 32, 1, dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 5);
    for l in &lines[..4] {
        let f: Vec<&str> = l.split('\t').collect();
        assert_eq!(f.len(), 3);
        assert!(dir.path().join(f[0]).exists());
        assert!(f[1] == "0" || f[1] == "1");
        f[2].parse::<u64>().unwrap();
    }
    assert!(lines[4].starts_with("# fp=") && lines[4].len() == 5 + 64);
}

#[test]
fn mean_filter_baseline_stays_near_chance() {
    let dir = tempfile::tempdir().unwrap();
    generate_corpus(400, SIZE, 7, dir.path()).unwrap();
    let (ds, _) = Dataset::load(dir.path()).unwrap();
    let (train, held) = ds.split();
    let scores = mean_filter_baseline(&train, &held, 200, 0.1).unwrap();
    let a = auc(&scores, &held.labels).unwrap();
    assert!(a < 0.7, "baseline AUC {a}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn pairs_depend_only_on_seed_and_index(seed in any::<u64>(), idx in 0u64..1000) {
        let (r1, f1) = generate_pair(seed, idx, 32).unwrap();
        let (r2, f2) = generate_pair(seed, idx, 32).unwrap();
        prop_assert_eq!(r1, r2);
        prop_assert_eq!(f1, f2);
    }
}
