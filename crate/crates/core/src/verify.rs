//! Oracle suites: exactness of the wavelet transform, scan equivalence,
//! contour-kernel geometry, cross-scan round trips and finite-difference
//! gradient checks over every differentiable operation.

use std::f64::consts::FRAC_PI_2;
use std::time::Instant;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::gradcheck::{GradCheck, GradCheckReport};
use crate::autodiff::{Graph, Var};
use crate::dcconv::{AngleSource, Axis, DcConv, DeformMode};
use crate::error::{Error, Result};
use crate::hwfeb::{BandMode, BandVars, GateMode, SpatialGate, Wfem, WfemConfig};
use crate::model::{ModelConfig, WMamba};
use crate::nn::{ParamStore, Session};
use crate::ss2d::{cross_merge, cross_scan, ScanOrder, VssBlock, VssConfig};
use crate::ssm::{ScanMode, ScanOptions};
use crate::tensor::Tensor;
use crate::wavelet::{haar_dwt, haar_idwt, SubBands};

/// Outcome of one suite.
#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub name: String,
    pub passed: bool,
    /// Worst observed error, in the suite's own measure.
    pub max_error: f64,
    pub tol: f64,
    pub cases: usize,
    pub detail: String,
    pub seconds: f64,
}

impl SuiteReport {
    fn new(name: &str, max_error: f64, tol: f64, cases: usize, detail: String) -> Self {
        SuiteReport { name: name.into(), passed: max_error <= tol, max_error, tol, cases, detail, seconds: 0.0 }
    }
}

// ---------------------------------------------------------------- wavelet

#[derive(Clone, Copy, Debug)]
pub struct WaveletStats {
    pub max_roundtrip: f64,
    pub max_parseval_rel: f64,
    pub worked_example_exact: bool,
}

/// `n` random f64 images with even sides in 8..=64.
pub fn wavelet_stats(n: usize, seed: u64) -> Result<WaveletStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut rt, mut pv) = (0.0f64, 0.0f64);
    for _ in 0..n {
        let h = 2 * rng.random_range(4..=32);
        let w = 2 * rng.random_range(4..=32);
        let c = rng.random_range(1..=3);
        let img = Tensor::<f64>::rand_uniform([1, c, h, w], -1.0, 1.0, &mut rng);
        let bands = haar_dwt(&img)?;
        rt = rt.max(haar_idwt(&bands)?.max_abs_diff(&img)?);
        let e = img.sum_squares();
        pv = pv.max((bands.energy() - e).abs() / e);
    }
    let img = Tensor::<f64>::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0])?;
    let b = haar_dwt(&img)?;
    let worked = [b.ll.data()[0], b.lh.data()[0], b.hl.data()[0], b.hh.data()[0]] == [5.0, -2.0, -1.0, 0.0];
    let back = haar_idwt(&SubBands {
        ll: Tensor::from_vec([1, 1, 1, 1], vec![5.0])?,
        lh: Tensor::from_vec([1, 1, 1, 1], vec![-2.0])?,
        hl: Tensor::from_vec([1, 1, 1, 1], vec![-1.0])?,
        hh: Tensor::from_vec([1, 1, 1, 1], vec![0.0])?,
    })?;
    Ok(WaveletStats { max_roundtrip: rt, max_parseval_rel: pv, worked_example_exact: worked && back == img })
}

fn wavelet_suite() -> Result<SuiteReport> {
    let s = wavelet_stats(200, 1)?;
    let err = s.max_roundtrip.max(s.max_parseval_rel * 1e-3);
    let mut r = SuiteReport::new(
        "wavelet",
        if s.worked_example_exact { err } else { f64::INFINITY },
        1e-12,
        200,
        format!("round trip {:.2e}, Parseval rel {:.2e}, worked example {}", s.max_roundtrip, s.max_parseval_rel, s.worked_example_exact),
    );
    r.passed &= s.max_parseval_rel <= 1e-9;
    Ok(r)
}

// ---------------------------------------------------------------- scan

/// Random selective-scan inputs `(x, Δ, A, B, C, D)` in f64.
pub fn random_scan_instance(rng: &mut ChaCha8Rng, batch: usize, len: usize, e: usize, n: usize) -> [Tensor<f64>; 6] {
    [
        Tensor::randn([batch, len, e], 1.0, rng),
        Tensor::rand_uniform([batch, len, e], 0.01, 0.5, rng),
        Tensor::rand_uniform([e, n], -3.0, -0.05, rng),
        Tensor::randn([batch, len, n], 1.0, rng),
        Tensor::randn([batch, len, n], 1.0, rng),
        Tensor::randn([e], 1.0, rng),
    ]
}

pub fn run_scan(inst: &[Tensor<f64>; 6], opts: ScanOptions) -> Result<Tensor<f64>> {
    let mut g = Graph::new();
    let v = inst.clone().map(|t| g.constant(t));
    let y = g.selective_scan(v[0], v[1], v[2], v[3], v[4], v[5], opts)?;
    Ok(g.value(y).clone())
}

/// Max |parallel − sequential| over `n` random instances (L ≤ 64, N ≤ 8, C ≤ 8).
pub fn scan_equivalence(n: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let (b, l, e, s) = (rng.random_range(1..=2), rng.random_range(1..=64), rng.random_range(1..=8), rng.random_range(1..=8));
        let inst = random_scan_instance(&mut rng, b, l, e, s);
        for exact in [false, true] {
            let seq = run_scan(&inst, ScanOptions { mode: ScanMode::Sequential, exact_zoh: exact })?;
            let par = run_scan(&inst, ScanOptions { mode: ScanMode::Parallel, exact_zoh: exact })?;
            worst = worst.max(seq.max_abs_diff(&par)?);
        }
    }
    Ok(worst)
}

/// Ā = 0.5, B̄ = 1, C = 1, D = 0, x = [1, 1, 1] should give [1, 1.5, 1.75].
/// Returns the max error over both scan modes.
pub fn scan_worked_example() -> Result<f64> {
    // Δ = 1 with A = ln 0.5 gives Ā = 0.5 and (approximate ZOH) B̄ = Δ·B = 1
    let inst = [
        Tensor::from_vec([1, 3, 1], vec![1.0; 3])?,
        Tensor::from_vec([1, 3, 1], vec![1.0; 3])?,
        Tensor::from_vec([1, 1], vec![0.5f64.ln()])?,
        Tensor::from_vec([1, 3, 1], vec![1.0; 3])?,
        Tensor::from_vec([1, 3, 1], vec![1.0; 3])?,
        Tensor::from_vec([1], vec![0.0])?,
    ];
    let want = [1.0, 1.5, 1.75];
    let mut worst = 0.0f64;
    for mode in [ScanMode::Sequential, ScanMode::Parallel] {
        let y = run_scan(&inst, ScanOptions { mode, exact_zoh: false })?;
        for (a, b) in y.data().iter().zip(want) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

fn scan_suite() -> Result<SuiteReport> {
    let eq = scan_equivalence(50, 2)?;
    let ex = scan_worked_example()?;
    let mut r = SuiteReport::new("scan", eq, 1e-10, 50, format!("parallel vs sequential {eq:.2e}, worked example {ex:.2e}"));
    r.passed &= ex <= 1e-15;
    Ok(r)
}

// ---------------------------------------------------------------- dcconv

#[derive(Clone, Copy, Debug)]
pub struct GeometryStats {
    pub samples: usize,
    pub offsets_in_range: bool,
    pub angles_in_range: bool,
    pub min_step: f64,
    pub max_step: f64,
    pub frozen_equals_dsconv: bool,
    pub rigid_error: f64,
}

/// Fills every parameter with `N(0, scale²)` noise added to its value.
pub fn perturb(store: &mut ParamStore<f64>, scale: f64, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        let noise = Tensor::<f64>::randn(shape, scale, rng);
        let p = store.get_mut(id);
        p.data_mut().iter_mut().zip(noise.data()).for_each(|(a, b)| *a += b);
    }
}

/// Runs `trials` random head outputs through both chained modes and checks
/// ranges and step lengths; also the θ-frozen and zero-head equivalences.
pub fn dcconv_geometry(trials: usize, seed: u64) -> Result<GeometryStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut st = GeometryStats {
        samples: 0,
        offsets_in_range: true,
        angles_in_range: true,
        min_step: f64::INFINITY,
        max_step: 0.0,
        frozen_equals_dsconv: true,
        rigid_error: 0.0,
    };
    for trial in 0..trials {
        let k = [3, 5, 7][trial % 3];
        let axis = if trial % 2 == 0 { Axis::X } else { Axis::Y };
        let (h, w, cin) = (rng.random_range(2..=6), rng.random_range(2..=6), rng.random_range(1..=3));
        let x = Tensor::<f64>::randn([1, cin, h, w], 1.0, &mut rng);
        let scale = rng.random_range(0.1..3.0);
        for mode in [DeformMode::DcConv, DeformMode::DsConv] {
            let mut store = ParamStore::new();
            let layer = DcConv::new(&mut store, "dc", cin, 2, k, axis, mode, &mut rng)?;
            perturb(&mut store, scale, &mut rng);
            let mut g = Graph::new();
            let mut s = Session::inference(&mut g, &store);
            let xv = s.g.constant(x.clone());
            let out = layer.positions(&mut s, xv, AngleSource::Predicted)?;
            let off = s.g.value(out.offsets.expect("chained modes predict offsets"));
            st.offsets_in_range &= off.data().iter().all(|d| (-1.0..=1.0).contains(d));
            if let Some(t) = out.theta {
                st.angles_in_range &= s.g.value(t).data().iter().all(|a| (0.0..=FRAC_PI_2).contains(a));
            }
            let c = s.g.value(out.coords).data();
            let hw = h * w;
            for p in 0..hw {
                for t in 1..k {
                    let (a, b) = (((t - 1) * hw + p) * 2, (t * hw + p) * 2);
                    let d = (c[b] - c[a]).hypot(c[b + 1] - c[a + 1]);
                    st.min_step = st.min_step.min(d);
                    st.max_step = st.max_step.max(d);
                }
            }
            st.samples += hw;

            if mode == DeformMode::DcConv {
                // same weights with the angle frozen at 0, against a dsconv layer
                let mut ds_store = ParamStore::new();
                let ds = DcConv::new(&mut ds_store, "dc", cin, 2, k, axis, DeformMode::DsConv, &mut rng)?;
                copy_params(&store, &mut ds_store)?;
                let frozen = layer.forward_with(&mut s, xv, AngleSource::Fixed(0.0))?;
                let frozen = s.g.value(frozen).clone();
                let mut g2 = Graph::new();
                let mut s2 = Session::inference(&mut g2, &ds_store);
                let xv2 = s2.g.constant(x.clone());
                let y2 = ds.forward(&mut s2, xv2)?;
                st.frozen_equals_dsconv &= s2.g.value(y2) == &frozen;
            }
        }
        // zero-initialised dsconv against the rigid layer with the same weights
        let mut store = ParamStore::new();
        let ds = DcConv::new(&mut store, "dc", cin, 2, k, axis, DeformMode::DsConv, &mut rng)?;
        let mut rstore = ParamStore::new();
        let rigid = DcConv::new(&mut rstore, "dc", cin, 2, k, axis, DeformMode::Rigid, &mut rng)?;
        for name in ["dc.weight", "dc.bias"] {
            let (a, b) = (store.find(name).expect("weight"), rstore.find(name).expect("weight"));
            *rstore.get_mut(b) = store.get(a).clone();
        }
        let run = |layer: &DcConv, store: &ParamStore<f64>| -> Result<Tensor<f64>> {
            let mut g = Graph::new();
            let mut s = Session::inference(&mut g, store);
            let xv = s.g.constant(x.clone());
            let y = layer.forward(&mut s, xv)?;
            Ok(s.g.value(y).clone())
        };
        st.rigid_error = st.rigid_error.max(run(&ds, &store)?.max_abs_diff(&run(&rigid, &rstore)?)?);
    }
    Ok(st)
}

/// Copies every parameter of `src` into the same-named slot of `dst`.
fn copy_params(src: &ParamStore<f64>, dst: &mut ParamStore<f64>) -> Result<()> {
    let ids: Vec<_> = dst.ids().collect();
    for id in ids {
        let name = dst.entry(id).name.clone();
        let from = src.find(&name).ok_or_else(|| Error::invalid(format!("missing {name}")))?;
        *dst.get_mut(id) = src.get(from).clone();
    }
    Ok(())
}

fn dcconv_suite() -> Result<SuiteReport> {
    let g = dcconv_geometry(60, 3)?;
    let ok = g.offsets_in_range && g.angles_in_range && g.min_step >= 1.0 - 1e-12 && g.max_step <= 2f64.sqrt() + 1e-12 && g.frozen_equals_dsconv;
    let mut r = SuiteReport::new(
        "dcconv",
        g.rigid_error,
        1e-12,
        g.samples,
        format!(
            "steps in [{:.4}, {:.4}], offsets ok {}, angles ok {}, frozen = dsconv {}, zero head vs rigid {:.2e}",
            g.min_step, g.max_step, g.offsets_in_range, g.angles_in_range, g.frozen_equals_dsconv, g.rigid_error
        ),
    );
    r.passed &= ok;
    Ok(r)
}

// ---------------------------------------------------------------- cross scan

pub fn cross_scan_roundtrip(n: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..n {
        let (h, w, c) = (rng.random_range(1..=9), rng.random_range(1..=9), rng.random_range(1..=4));
        let grid = Tensor::<f64>::randn([1, h, w, c], 1.0, &mut rng);
        let order = if i % 2 == 0 { ScanOrder::Cross } else { ScanOrder::Diagonal };
        let back = cross_merge(&cross_scan(&grid, order)?, h, w, order)?;
        worst = worst.max(back.max_abs_diff(&grid)?);
    }
    Ok(worst)
}

fn cross_scan_suite() -> Result<SuiteReport> {
    let e = cross_scan_roundtrip(100, 4)?;
    Ok(SuiteReport::new("cross_scan", e, 1e-15, 100, format!("merge(scan(G)) vs G {e:.2e}")))
}

// ---------------------------------------------------------------- gradients

type CaseFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + Send + Sync>;

/// One differentiable operation set up for a finite-difference check.
pub struct GradCase {
    pub name: String,
    pub inputs: Vec<Tensor<f64>>,
    pub f: CaseFn,
    /// Check at most this many elements per input (all when `None`).
    pub sample: Option<usize>,
}

/// Reduces `y` to a scalar with fixed random weights so every output
/// element contributes a distinct gradient.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = Tensor::randn(g.shape(y).to_vec(), 1.0, &mut rng);
    let wv = g.constant(w);
    let p = g.mul(y, wv)?;
    g.sum(p)
}

fn simple(name: &str, inputs: Vec<Tensor<f64>>, seed: u64, op: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + Send + Sync + 'static) -> GradCase {
    GradCase {
        name: name.into(),
        inputs,
        f: Box::new(move |g, v| {
            let y = op(g, v)?;
            weighted_sum(g, y, seed)
        }),
        sample: None,
    }
}

/// A module case: inputs are `extra` followed by every parameter of `store`.
fn module(
    name: &str,
    store: ParamStore<f64>,
    extra: Vec<Tensor<f64>>,
    seed: u64,
    sample: Option<usize>,
    op: impl Fn(&mut Session<f64>, &[Var]) -> Result<Var> + Send + Sync + 'static,
) -> GradCase {
    let n_extra = extra.len();
    let mut inputs = extra;
    inputs.extend(store.entries().iter().map(|e| e.value.clone()));
    GradCase {
        name: name.into(),
        inputs,
        f: Box::new(move |g, v| {
            let mut s = Session::new(g, &store);
            for (id, &var) in store.ids().collect::<Vec<_>>().iter().zip(&v[n_extra..]) {
                s.bind(*id, var)?;
            }
            let y = op(&mut s, &v[..n_extra])?;
            weighted_sum(s.g, y, seed)
        }),
        sample,
    }
}

fn tiny_model_config(seed: u64) -> ModelConfig {
    ModelConfig {
        input_size: 16,
        stem_patch: 2,
        stage_depths: vec![1, 1],
        stage_dims: vec![4, 8],
        ssm_state_dim: 2,
        dcconv_k: 3,
        wfem_channels: 2,
        seed,
        ..ModelConfig::desk()
    }
}

/// Every gradient case for one seed.
pub fn gradient_cases(seed: u64) -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut cases = Vec::new();
    let t = |shape: &[usize], r: &mut ChaCha8Rng| Tensor::<f64>::randn(shape.to_vec(), 1.0, r);

    cases.push(simple("conv2d", vec![t(&[2, 2, 5, 5], r), t(&[3, 2, 3, 3], r), t(&[3], r)], seed, |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1)));
    cases.push(simple("conv2d_strided", vec![t(&[1, 2, 6, 6], r), t(&[2, 2, 2, 2], r)], seed, |g, v| g.conv2d(v[0], v[1], None, 2, 0)));
    cases.push(simple("dwconv", vec![t(&[1, 4, 4, 3], r), t(&[3, 3, 3], r), t(&[3], r)], seed, |g, v| g.dwconv_nhwc(v[0], v[1], v[2])));
    // coordinates kept off integer lattice points, where bilinear weights kink
    let coords = Tensor::<f64>::rand_uniform([2, 7, 2], -1.5, 4.5, r).map(|c| if (c - c.round()).abs() < 0.05 { c + 0.1 } else { c });
    cases.push(simple("bilinear_sample", vec![t(&[2, 2, 4, 4], r), coords], seed, |g, v| g.bilinear_sample(v[0], v[1])));

    let unary: [(&str, fn(&mut Graph<f64>, Var) -> Result<Var>); 8] = [
        ("exp", |g, x| g.exp(x)),
        ("tanh", |g, x| g.tanh(x)),
        ("sigmoid", |g, x| g.sigmoid(x)),
        ("softplus", |g, x| g.softplus(x)),
        ("silu", |g, x| g.silu(x)),
        ("gelu", |g, x| g.gelu(x)),
        ("relu", |g, x| g.relu(x)),
        ("softmax", |g, x| g.softmax(x)),
    ];
    for (name, op) in unary {
        let x = t(&[3, 4], r).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
        cases.push(simple(name, vec![x], seed, move |g, v| op(g, v[0])));
    }
    cases.push(simple("add_sub_mul", vec![t(&[2, 3, 4], r), t(&[3, 4], r)], seed, |g, v| {
        let a = g.add(v[0], v[1])?;
        let b = g.sub(a, v[1])?;
        let c = g.mul(b, v[1])?;
        let d = g.scale(c, -1.5)?;
        g.add_scalar(d, 0.25)
    }));
    cases.push(simple("matmul_transpose", vec![t(&[3, 4], r), t(&[5, 4], r)], seed, |g, v| {
        let bt = g.transpose(v[1])?;
        g.matmul(v[0], bt)
    }));
    cases.push(simple("linear", vec![t(&[2, 3, 4], r), t(&[4, 5], r), t(&[5], r)], seed, |g, v| g.linear(v[0], v[1], Some(v[2]))));
    cases.push(simple("reshape_permute_concat", vec![t(&[2, 3, 4], r), t(&[2, 1, 4], r)], seed, |g, v| {
        let c = g.concat(&[v[0], v[1]], 1)?;
        let p = g.permute(c, &[2, 0, 1])?;
        let q = g.reshape(p, &[4, 8])?;
        let s = g.index_select(q, 1, &[7, 0, 3, 3])?;
        g.narrow(s, 0, 1, 2)
    }));
    cases.push(simple("reductions", vec![t(&[2, 3, 4], r)], seed, |g, v| {
        let a = g.mean_axis(v[0], 1)?;
        let b = g.sum_axis(v[0], 2)?;
        let m = g.mean(v[0])?;
        let m = g.reshape(m, &[1, 1])?;
        let bb = g.broadcast_to(m, &[2, 4])?;
        let s = g.add(a, bb)?;
        let sb = g.sum(b)?;
        let sb = g.reshape(sb, &[1, 1])?;
        let sb = g.broadcast_to(sb, &[2, 4])?;
        g.mul(s, sb)
    }));
    cases.push(simple("layer_norm", vec![t(&[3, 6], r), t(&[6], r), t(&[6], r)], seed, |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)));
    let labels: Vec<usize> = (0..4).map(|i| (i + seed as usize) % 3).collect();
    cases.push(GradCase {
        name: "cross_entropy".into(),
        inputs: vec![t(&[4, 3], r)],
        f: Box::new(move |g, v| g.cross_entropy(v[0], &labels)),
        sample: None,
    });
    cases.push(simple("haar_dwt", vec![t(&[2, 2, 4, 6], r)], seed, |g, v| {
        let b = g.haar_dwt(v[0])?;
        g.concat(&b, 1)
    }));
    let delta = Tensor::<f64>::rand_uniform([1, 4, 3, 3], -1.0, 1.0, r);
    let theta = Tensor::<f64>::rand_uniform([1, 1, 3, 3], 0.0, FRAC_PI_2, r);
    for axis in [Axis::X, Axis::Y] {
        cases.push(simple(&format!("contour_coords_{axis:?}"), vec![delta.clone(), theta.clone()], seed, move |g, v| g.contour_coords(v[0], Some(v[1]), axis)));
    }
    for exact in [false, true] {
        for mode in [ScanMode::Sequential, ScanMode::Parallel] {
            let [x, d, a, b, c, dd] = random_scan_instance(r, 2, 5, 2, 3);
            let opts = ScanOptions { mode, exact_zoh: exact };
            cases.push(simple(&format!("selective_scan_{mode:?}_{}", if exact { "exact" } else { "approx" }), vec![x, d, a, b, c, dd], seed, move |g, v| {
                g.selective_scan(v[0], v[1], v[2], v[3], v[4], v[5], opts)
            }));
        }
    }

    for mode in DeformMode::ALL {
        for axis in [Axis::X, Axis::Y] {
            let mut store = ParamStore::new();
            let layer = DcConv::new(&mut store, "dc", 2, 2, 3, axis, mode, r)?;
            perturb(&mut store, 0.3, r);
            cases.push(module(&format!("dcconv_{}_{axis:?}", mode.as_str()), store, vec![t(&[1, 2, 4, 4], r)], seed, None, move |s, v| layer.forward(s, v[0])));
        }
    }
    let mut store = ParamStore::new();
    let mut cfg = VssConfig::new(8, 2);
    cfg.scan.mode = if seed % 2 == 0 { ScanMode::Sequential } else { ScanMode::Parallel };
    let block = VssBlock::new(&mut store, "vss", cfg, r);
    perturb(&mut store, 0.1, r);
    cases.push(module("vss_block", store, vec![t(&[1, 4, 4, 8], r)], seed, Some(12), move |s, v| block.forward(s, v[0])));

    for band_mode in [BandMode::HighOnly, BandMode::WithLl] {
        let mut store = ParamStore::new();
        let wc = WfemConfig { image_channels: 1, branch_channels: 2, k: 3, band_mode, deform_mode: DeformMode::DcConv };
        let wfem = Wfem::new(&mut store, "wfem", wc, r)?;
        perturb(&mut store, 0.3, r);
        let bands: Vec<Tensor<f64>> = (0..4).map(|_| t(&[1, 1, 4, 4], r)).collect();
        cases.push(module(&format!("wfem_{}", band_mode.as_str()), store, bands, seed, Some(12), move |s, v| {
            wfem.forward(s, &BandVars { ll: v[0], lh: v[1], hl: v[2], hh: v[3] }, 0.5)
        }));
    }
    for mode in GateMode::ALL {
        let mut store = ParamStore::new();
        let gate = SpatialGate::new(&mut store, "gate", mode, 3, r);
        let att = Tensor::<f64>::rand_uniform([2, 1, 3, 3], 0.05, 0.95, r);
        cases.push(module(&format!("spatial_gate_{}", mode.as_str()), store, vec![t(&[2, 3, 3, 3], r), att], seed, None, move |s, v| gate.forward(s, v[0], v[1])));
    }

    let mut store = ParamStore::new();
    let model = WMamba::new(tiny_model_config(seed), &mut store)?;
    perturb(&mut store, 0.05, r);
    let images = Tensor::<f64>::rand_uniform([2, 3, 16, 16], 0.0, 1.0, r);
    let labels = [0usize, 1];
    let n_extra = 1;
    let mut inputs = vec![images];
    inputs.extend(store.entries().iter().map(|e| e.value.clone()));
    cases.push(GradCase {
        name: "model_loss".into(),
        inputs,
        f: Box::new(move |g, v| {
            let mut s = Session::new(g, &store);
            for (id, &var) in store.ids().collect::<Vec<_>>().iter().zip(&v[n_extra..]) {
                s.bind(*id, var)?;
            }
            let logits = model.forward(&mut s, v[0])?;
            s.g.cross_entropy(logits, &labels)
        }),
        sample: Some(4),
    });
    Ok(cases)
}

/// Per-case worst report over `seeds`, for cases whose name contains `filter`.
pub fn check_gradients(seeds: &[u64], filter: Option<&str>) -> Result<Vec<(String, GradCheckReport)>> {
    let mut out: Vec<(String, GradCheckReport)> = Vec::new();
    for &seed in seeds {
        for case in gradient_cases(seed)? {
            if filter.is_some_and(|f| !case.name.contains(f)) {
                continue;
            }
            let mut gc = GradCheck::new(1e-6, 1e-4);
            if let Some(n) = case.sample {
                gc = gc.sampled(n, seed);
            }
            let rep = gc.run(&case.f, &case.inputs)?;
            match out.iter_mut().find(|(n, _)| n == &case.name) {
                Some((_, worst)) => {
                    if rep.max_rel_error > worst.max_rel_error {
                        let checked = worst.checked + rep.checked;
                        *worst = rep;
                        worst.checked = checked;
                    } else {
                        worst.checked += rep.checked;
                    }
                }
                None => out.push((case.name, rep)),
            }
        }
    }
    Ok(out)
}

fn gradient_suite() -> Result<SuiteReport> {
    let reports = check_gradients(&[0, 1, 2, 3, 4], None)?;
    let worst = reports.iter().map(|(_, r)| r.max_rel_error).fold(0.0, f64::max);
    let failing: Vec<&str> = reports.iter().filter(|(_, r)| !r.passed()).map(|(n, _)| n.as_str()).collect();
    let checked: usize = reports.iter().map(|(_, r)| r.checked).sum();
    let mut r = SuiteReport::new(
        "gradients",
        worst,
        1e-4,
        checked,
        if failing.is_empty() { format!("{} operations", reports.len()) } else { format!("failing: {}", failing.join(", ")) },
    );
    r.passed &= failing.is_empty();
    Ok(r)
}

// ---------------------------------------------------------------- registry

pub struct Suite {
    pub name: &'static str,
    run: fn() -> Result<SuiteReport>,
}

pub fn suites() -> Vec<Suite> {
    vec![
        Suite { name: "wavelet", run: wavelet_suite },
        Suite { name: "scan", run: scan_suite },
        Suite { name: "dcconv", run: dcconv_suite },
        Suite { name: "cross_scan", run: cross_scan_suite },
        Suite { name: "gradients", run: gradient_suite },
    ]
}

/// Runs every suite whose name contains `filter`. Errors become failed rows.
pub fn run_suites(filter: Option<&str>) -> Vec<SuiteReport> {
    suites()
        .into_iter()
        .filter(|s| filter.is_none_or(|f| s.name.contains(f)))
        .map(|s| {
            let t = Instant::now();
            let mut r = (s.run)().unwrap_or_else(|e| SuiteReport {
                name: s.name.into(),
                passed: false,
                max_error: f64::INFINITY,
                tol: 0.0,
                cases: 0,
                detail: format!("error: {e}"),
                seconds: 0.0,
            });
            r.seconds = t.elapsed().as_secs_f64();
            r
        })
        .collect()
}
