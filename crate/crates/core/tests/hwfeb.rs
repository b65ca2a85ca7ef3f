use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wmamba::dcconv::DeformMode;
use wmamba::hwfeb::{BandMode, BandVars, GateMode, SpatialGate, Wfem, WfemConfig};
use wmamba::nn::{ParamStore, Session};
use wmamba::verify::perturb;
use wmamba::{Graph, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gate(mode: GateMode, f: &Tensor<f64>, a: &Tensor<f64>) -> (Tensor<f64>, ParamStore<f64>, SpatialGate) {
    let mut r = rng(1);
    let mut store = ParamStore::new();
    let gate = SpatialGate::new(&mut store, "g", mode, f.shape()[3], &mut r);
    perturb(&mut store, 0.3, &mut r);
    let mut g = Graph::new();
    let mut s = Session::inference(&mut g, &store);
    let (fv, av) = (s.g.constant(f.clone()), s.g.constant(a.clone()));
    let y = gate.forward(&mut s, fv, av).unwrap();
    (s.g.value(y).clone(), store, gate)
}

#[test]
fn gate_modes_follow_their_formulas() {
    let mut r = rng(0);
    let (n, h, w, c) = (2, 3, 4, 5);
    let f = Tensor::<f64>::randn([n, h, w, c], 1.0, &mut r);
    let a = Tensor::<f64>::rand_uniform([n, 1, h, w], 0.0, 1.0, &mut r);
    let at = |b: usize, i: usize, j: usize| a.data()[(b * h + i) * w + j];
    for mode in GateMode::ALL {
        let (y, store, g) = gate(mode, &f, &a);
        assert_eq!(y.shape(), &[n, h, w, c]);
        for b in 0..n {
            for i in 0..h {
                for j in 0..w {
                    let px = ((b * h + i) * w + j) * c;
                    let fv = &f.data()[px..px + c];
                    let av = at(b, i, j);
                    let want: Vec<f64> = match mode {
                        GateMode::GateSkip => fv.iter().map(|v| v * av + v).collect(),
                        GateMode::GateNoSkip => fv.iter().map(|v| v * av).collect(),
                        GateMode::Add => fv.iter().map(|v| v + av).collect(),
                        GateMode::ConcatProj => {
                            let p = g.proj.as_ref().unwrap();
                            let wt = store.get(p.weight).data();
                            let bias = store.get(p.bias.unwrap()).data();
                            (0..c)
                                .map(|o| bias[o] + (0..c).map(|k| fv[k] * wt[k * c + o]).sum::<f64>() + av * wt[c * c + o])
                                .collect()
                        }
                    };
                    for (got, want) in y.data()[px..px + c].iter().zip(want) {
                        assert!((got - want).abs() < 1e-12, "{mode:?}");
                    }
                }
            }
        }
    }
}

#[test]
fn gate_rejects_mismatched_attention() {
    let mut r = rng(2);
    let f = Tensor::<f64>::randn([1, 3, 3, 2], 1.0, &mut r);
    let a = Tensor::<f64>::rand_uniform([1, 1, 3, 4], 0.0, 1.0, &mut r);
    let mut store = ParamStore::new();
    let gate = SpatialGate::new(&mut store, "g", GateMode::GateSkip, 2, &mut r);
    let mut g = Graph::new();
    let mut s = Session::inference(&mut g, &store);
    let (fv, av) = (s.g.constant(f), s.g.constant(a));
    assert!(gate.forward(&mut s, fv, av).is_err());
}

fn attention(wfem: &Wfem, store: &ParamStore<f64>, bands: &[Tensor<f64>; 4], scale: f64) -> Tensor<f64> {
    let mut g = Graph::new();
    let mut s = Session::inference(&mut g, store);
    let v = bands.clone().map(|t| s.g.constant(t));
    let y = wfem.forward(&mut s, &BandVars { ll: v[0], lh: v[1], hl: v[2], hh: v[3] }, scale).unwrap();
    s.g.value(y).clone()
}

fn wfem(band_mode: BandMode, deform_mode: DeformMode, seed: u64) -> (Wfem, ParamStore<f64>) {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let cfg = WfemConfig { image_channels: 3, branch_channels: 4, k: 5, band_mode, deform_mode };
    let m = Wfem::new(&mut store, "w", cfg, &mut r).unwrap();
    perturb(&mut store, 0.3, &mut r);
    (m, store)
}

fn bands(seed: u64) -> [Tensor<f64>; 4] {
    let mut r = rng(seed);
    [0; 4].map(|_| Tensor::randn([2, 3, 6, 6], 1.0, &mut r))
}

#[test]
fn attention_is_a_probability_map() {
    for band_mode in [BandMode::HighOnly, BandMode::WithLl] {
        for deform in DeformMode::ALL {
            let (m, store) = wfem(band_mode, deform, 3);
            let a = attention(&m, &store, &bands(4), 0.5);
            assert_eq!(a.shape(), &[2, 1, 6, 6]);
            assert!(a.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
}

#[test]
fn high_only_ignores_the_approximation_band() {
    let (m, store) = wfem(BandMode::HighOnly, DeformMode::DcConv, 5);
    let mut b = bands(6);
    let before = attention(&m, &store, &b, 1.0);
    b[0] = b[0].map(|v| 3.0 * v - 1.0);
    assert_eq!(attention(&m, &store, &b, 1.0), before);

    let (m, store) = wfem(BandMode::WithLl, DeformMode::DcConv, 5);
    let mut b = bands(6);
    let before = attention(&m, &store, &b, 1.0);
    b[0] = b[0].map(|v| 3.0 * v - 1.0);
    assert_ne!(attention(&m, &store, &b, 1.0), before);
}

#[test]
fn band_scale_is_applied_to_the_input() {
    let (m, store) = wfem(BandMode::HighOnly, DeformMode::Rigid, 7);
    let b = bands(8);
    let halved = b.clone().map(|t| t.map(|v| 0.5 * v));
    let a = attention(&m, &store, &b, 0.5);
    let c = attention(&m, &store, &halved, 1.0);
    assert!(a.max_abs_diff(&c).unwrap() < 1e-14);
}

#[test]
fn samples_are_processed_independently() {
    let (m, store) = wfem(BandMode::HighOnly, DeformMode::DcConv, 9);
    let b = bands(10);
    let both = attention(&m, &store, &b, 1.0);
    let first = b.clone().map(|t| Tensor::from_vec([1, 3, 6, 6], t.data()[..108].to_vec()).unwrap());
    assert_eq!(attention(&m, &store, &first, 1.0).data(), &both.data()[..36]);
}
