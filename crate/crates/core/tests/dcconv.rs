use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wmamba::dcconv::{contour_positions, AngleSource, Axis, DcConv, DeformMode};
use wmamba::nn::{ParamStore, Session};
use wmamba::verify::{dcconv_geometry, perturb};
use wmamba::{Graph, Tensor};

/// Plain 1-D convolution along `axis` with zero padding, `k` taps centred.
fn rigid_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], axis: Axis) -> Vec<f64> {
    let (cin, h, wd) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let m = (k / 2) as isize;
    let mut out = vec![0.0; cout * h * wd];
    for co in 0..cout {
        for i in 0..h {
            for j in 0..wd {
                let mut acc = b[co];
                for ci in 0..cin {
                    for t in 0..k {
                        let c = t as isize - m;
                        let (yy, xx) = match axis {
                            Axis::X => (i as isize, j as isize + c),
                            Axis::Y => (i as isize + c, j as isize),
                        };
                        if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < wd {
                            acc += w.data()[(co * cin + ci) * k + t] * x.data()[(ci * h + yy as usize) * wd + xx as usize];
                        }
                    }
                }
                out[(co * h + i) * wd + j] = acc;
            }
        }
    }
    out
}

fn forward(layer: &DcConv, store: &ParamStore<f64>, x: &Tensor<f64>, angle: AngleSource) -> Tensor<f64> {
    let mut g = Graph::new();
    let mut s = Session::inference(&mut g, store);
    let xv = s.g.constant(x.clone());
    let y = layer.forward_with(&mut s, xv, angle).unwrap();
    s.g.value(y).clone()
}

#[test]
fn rigid_layer_is_a_one_dimensional_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for axis in [Axis::X, Axis::Y] {
        for k in [3, 5, 9] {
            let mut store = ParamStore::new();
            let layer = DcConv::new(&mut store, "c", 2, 3, k, axis, DeformMode::Rigid, &mut rng).unwrap();
            perturb(&mut store, 0.5, &mut rng);
            let x = Tensor::<f64>::randn([1, 2, 5, 6], 1.0, &mut rng);
            let want = rigid_oracle(&x, store.get(layer.weight), store.get(layer.bias).data(), axis);
            let got = forward(&layer, &store, &x, AngleSource::Predicted);
            for (a, b) in got.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{axis:?} k={k}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn fresh_chained_layers_start_as_the_rigid_kernel() {
    // a zero head gives zero offsets; dsconv then has no rotation at all
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::<f64>::randn([2, 2, 4, 5], 1.0, &mut rng);
    for axis in [Axis::X, Axis::Y] {
        let mut store = ParamStore::new();
        let layer = DcConv::new(&mut store, "c", 2, 2, 5, axis, DeformMode::DsConv, &mut rng).unwrap();
        let got = forward(&layer, &store, &x, AngleSource::Predicted);
        for n in 0..2 {
            let xn = Tensor::from_vec([1, 2, 4, 5], x.data()[n * 40..(n + 1) * 40].to_vec()).unwrap();
            let want = rigid_oracle(&xn, store.get(layer.weight), store.get(layer.bias).data(), axis);
            for (a, b) in got.data()[n * 40..(n + 1) * 40].iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn contour_positions_follow_the_rotated_running_sum() {
    // k = 5, offsets for +1, −1, +2, −2
    let delta = [0.5, -0.25, 1.0, 0.75];
    let pos = contour_positions((10.0, 20.0), &delta, 0.0, Axis::X, 5).unwrap();
    let want = [(-2.0, 0.5), (-1.0, -0.25), (0.0, 0.0), (1.0, 0.5), (2.0, 1.5)];
    for (p, w) in pos.iter().zip(want) {
        assert!((p.0 - 10.0 - w.0).abs() < 1e-15 && (p.1 - 20.0 - w.1).abs() < 1e-15);
    }
    let theta = std::f64::consts::FRAC_PI_2;
    let rot = contour_positions((0.0, 0.0), &delta, theta, Axis::X, 5).unwrap();
    for (r, w) in rot.iter().zip(want) {
        // a quarter turn maps (vx, vy) to (vy, −vx)
        assert!((r.0 - w.1).abs() < 1e-12 && (r.1 + w.0).abs() < 1e-12);
    }
}

#[test]
fn every_mode_gives_finite_outputs_of_the_right_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::<f64>::randn([2, 3, 6, 4], 1.0, &mut rng);
    for mode in DeformMode::ALL {
        let mut store = ParamStore::new();
        let layer = DcConv::new(&mut store, "c", 3, 5, 7, Axis::Y, mode, &mut rng).unwrap();
        perturb(&mut store, 1.0, &mut rng);
        let y = forward(&layer, &store, &x, AngleSource::Predicted);
        assert_eq!(y.shape(), &[2, 5, 6, 4]);
        assert!(y.all_finite());
    }
}

#[test]
fn even_kernels_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::<f64>::new();
    assert!(DcConv::new(&mut store, "c", 1, 1, 4, Axis::X, DeformMode::DcConv, &mut rng).is_err());
}

#[test]
fn geometry_over_many_head_outputs() {
    let g = dcconv_geometry(30, 11).unwrap();
    assert!(g.offsets_in_range && g.angles_in_range);
    assert!(g.min_step >= 1.0 - 1e-12 && g.max_step <= 2f64.sqrt() + 1e-12, "{g:?}");
    assert!(g.frozen_equals_dsconv);
    assert!(g.rigid_error <= 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn adjacent_taps_are_one_to_root_two_apart(
        delta in proptest::collection::vec(-1.0f64..=1.0, 8),
        theta in 0.0f64..=std::f64::consts::FRAC_PI_2,
        y_axis in any::<bool>(),
    ) {
        let axis = if y_axis { Axis::Y } else { Axis::X };
        let pos = contour_positions((3.0, 4.0), &delta, theta, axis, 9).unwrap();
        for w in pos.windows(2) {
            let d = (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1);
            prop_assert!((1.0 - 1e-12..=2f64.sqrt() + 1e-12).contains(&d));
        }
        prop_assert_eq!(pos[4], (3.0, 4.0));
    }
}
