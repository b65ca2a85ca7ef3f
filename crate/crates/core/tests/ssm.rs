use proptest::prelude::*;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wmamba::autodiff::gradcheck::GradCheck;
use wmamba::nn::{ParamStore, Session};
use wmamba::ssm::{lti_scan, ScanMode, ScanOptions, S6};
use wmamba::{Graph, Tensor};

struct Instance {
    x: Tensor<f64>,
    delta: Tensor<f64>,
    a: Tensor<f64>,
    b: Tensor<f64>,
    c: Tensor<f64>,
    d: Tensor<f64>,
}

fn instance(rng: &mut ChaCha8Rng, batch: usize, len: usize, e: usize, n: usize) -> Instance {
    Instance {
        x: Tensor::randn([batch, len, e], 1.0, rng),
        delta: Tensor::rand_uniform([batch, len, e], 0.01, 0.5, rng),
        a: Tensor::rand_uniform([e, n], -3.0, -0.05, rng),
        b: Tensor::randn([batch, len, n], 1.0, rng),
        c: Tensor::randn([batch, len, n], 1.0, rng),
        d: Tensor::randn([e], 1.0, rng),
    }
}

fn run(inst: &Instance, opts: ScanOptions) -> Tensor<f64> {
    let mut g = Graph::new();
    let vars = [&inst.x, &inst.delta, &inst.a, &inst.b, &inst.c, &inst.d].map(|t| g.constant(t.clone()));
    let y = g.selective_scan(vars[0], vars[1], vars[2], vars[3], vars[4], vars[5], opts).unwrap();
    g.value(y).clone()
}

/// Token-by-token evaluation written straight from the recurrence.
fn literal(inst: &Instance, exact: bool) -> Vec<f64> {
    let s = inst.x.shape();
    let (bn, l, e) = (s[0], s[1], s[2]);
    let n = inst.a.shape()[1];
    let mut y = vec![0.0; bn * l * e];
    for b in 0..bn {
        for ch in 0..e {
            let mut h = vec![0.0; n];
            for t in 0..l {
                let tok = b * l + t;
                let dt = inst.delta.data()[tok * e + ch];
                let x = inst.x.data()[tok * e + ch];
                let mut out = inst.d.data()[ch] * x;
                for k in 0..n {
                    let a = inst.a.data()[ch * n + k];
                    let abar = (dt * a).exp();
                    let bbar = if exact { (abar - 1.0) / a } else { dt } * inst.b.data()[tok * n + k];
                    h[k] = abar * h[k] + bbar * x;
                    out += inst.c.data()[tok * n + k] * h[k];
                }
                y[tok * e + ch] = out;
            }
        }
    }
    y
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn sequential_matches_literal_recurrence() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let inst = instance(&mut rng, 1, 7, 2, 3);
    for exact in [false, true] {
        let y = run(&inst, ScanOptions { mode: ScanMode::Sequential, exact_zoh: exact });
        assert!(max_diff(y.data(), &literal(&inst, exact)) < 1e-12);
    }
}

#[test]
fn constant_heads_reduce_to_time_invariant_scan() {
    // zero projections, biases carry the constants
    let (e, n, l) = (3, 2, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::<f64>::new();
    let s6 = S6::new(&mut store, "s", e, n, true, &mut rng);
    *store.get_mut(s6.x_proj) = Tensor::zeros(store.get(s6.x_proj).shape().to_vec());
    let dt = 0.3f64;
    let dt_raw = dt + (-(-dt).exp_m1()).ln();
    *store.get_mut(s6.dt_bias) = Tensor::full([e], dt_raw);
    let bvals = [0.5, -1.0];
    let cvals = [2.0, 0.25];
    *store.get_mut(s6.b_bias.unwrap()) = Tensor::from_vec([n], bvals.to_vec()).unwrap();
    *store.get_mut(s6.c_bias.unwrap()) = Tensor::from_vec([n], cvals.to_vec()).unwrap();
    let x = Tensor::<f64>::randn([1, l, e], 1.0, &mut rng);

    let mut g = Graph::new();
    let mut s = Session::new(&mut g, &store);
    let xv = s.g.constant(x.clone());
    let y = s6.forward(&mut s, xv, ScanOptions::default()).unwrap();
    let got = s.g.value(y).data().to_vec();

    let a: Vec<f64> = store.get(s6.a_log).data().iter().map(|v| -v.exp()).collect();
    let abar: Vec<f64> = a.iter().map(|v| (dt * v).exp()).collect();
    let bbar: Vec<f64> = (0..e * n).map(|i| dt * bvals[i % n]).collect();
    let cm: Vec<f64> = (0..e * n).map(|i| cvals[i % n]).collect();
    let want = lti_scan(
        &Tensor::from_vec([e, n], abar).unwrap(),
        &Tensor::from_vec([e, n], bbar).unwrap(),
        &Tensor::from_vec([e, n], cm).unwrap(),
        store.get(s6.d),
        &x.reshape([l, e]).unwrap(),
    )
    .unwrap();
    assert!(max_diff(&got, want.data()) < 1e-12);
}

#[test]
fn single_token() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inst = instance(&mut rng, 1, 1, 1, 1);
    let want = {
        let (dt, x) = (inst.delta.data()[0], inst.x.data()[0]);
        inst.c.data()[0] * dt * inst.b.data()[0] * x + inst.d.data()[0] * x
    };
    for mode in [ScanMode::Sequential, ScanMode::Parallel] {
        let y = run(&inst, ScanOptions { mode, exact_zoh: false });
        assert!((y.data()[0] - want).abs() < 1e-15);
    }
}

#[test]
fn long_sequences_stay_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut inst = instance(&mut rng, 1, 10_000, 2, 4);
    inst.x = Tensor::rand_uniform([1, 10_000, 2], -1.0, 1.0, &mut rng);
    inst.b = Tensor::rand_uniform([1, 10_000, 4], -1.0, 1.0, &mut rng);
    inst.c = Tensor::rand_uniform([1, 10_000, 4], -1.0, 1.0, &mut rng);
    for mode in [ScanMode::Sequential, ScanMode::Parallel] {
        let y = run(&inst, ScanOptions { mode, exact_zoh: false });
        // |h| ≤ max|B̄x| / (1 − max Ā); Ā ≤ exp(0.01·(−0.05))
        let amax = (0.01f64 * -0.05).exp();
        let bound = 0.5 / (1.0 - amax) * 4.0 + inst.d.data().iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(y.all_finite());
        assert!(y.data().iter().all(|v| v.abs() <= bound));
    }
}

#[test]
fn scan_is_linear_in_the_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let inst = instance(&mut rng, 2, 9, 3, 2);
    let y1 = run(&inst, ScanOptions::default());
    let scaled = Instance { x: inst.x.map(|v| -2.5 * v), ..inst };
    let y2 = run(&scaled, ScanOptions::default());
    for (a, b) in y1.data().iter().zip(y2.data()) {
        assert!((-2.5 * a - b).abs() < 1e-12);
    }
}

#[test]
fn gradients_in_both_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for seed in 0..5u64 {
        let inst = instance(&mut rng, 2, 5, 2, 3);
        let w = Tensor::<f64>::randn([2, 5, 2], 1.0, &mut rng);
        for mode in [ScanMode::Sequential, ScanMode::Parallel] {
            for exact in [false, true] {
                let opts = ScanOptions { mode, exact_zoh: exact };
                let w = w.clone();
                let report = GradCheck::new(1e-6, 1e-4)
                    .run(
                        move |g, v| {
                            let y = g.selective_scan(v[0], v[1], v[2], v[3], v[4], v[5], opts)?;
                            let wv = g.constant(w.clone());
                            let p = g.mul(y, wv)?;
                            g.sum(p)
                        },
                        &[inst.x.clone(), inst.delta.clone(), inst.a.clone(), inst.b.clone(), inst.c.clone(), inst.d.clone()],
                    )
                    .unwrap();
                assert!(report.passed(), "seed {seed} {opts:?}: {report:?}");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]
    #[test]
    fn parallel_equals_sequential(seed in any::<u64>(), len in 1usize..65, e in 1usize..9, n in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = rng.random_range(1..3);
        let inst = instance(&mut rng, batch, len, e, n);
        let seq = run(&inst, ScanOptions { mode: ScanMode::Sequential, exact_zoh: false });
        let par = run(&inst, ScanOptions { mode: ScanMode::Parallel, exact_zoh: false });
        prop_assert!(max_diff(seq.data(), par.data()) < 1e-10);
    }
}
