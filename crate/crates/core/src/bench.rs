//! Timing experiments: selective-scan cost against sequence length, and
//! model cost (optionally accuracy) against patch count.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, WMamba};
use crate::nn::{ParamStore, Session};
use crate::ssm::{ScanMode, ScanOptions};
use crate::synthdata::Dataset;
use crate::tensor::Tensor;
use crate::train::{evaluate, TrainConfig, Trainer};

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 { xs[n / 2] } else { 0.5 * (xs[n / 2 - 1] + xs[n / 2]) }
}

#[derive(Clone, Debug)]
pub struct ScanTiming {
    pub length: usize,
    pub mode: ScanMode,
    pub median_seconds: f64,
    /// Time relative to the previous (half) length in the same mode.
    pub ratio: Option<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct ScanBenchConfig {
    pub lengths: [u32; 2],
    pub channels: usize,
    pub state: usize,
    pub trials: usize,
    pub seed: u64,
}

impl Default for ScanBenchConfig {
    /// `L = 2^10 .. 2^14`, 16 channels, state 16, median of 5.
    fn default() -> Self {
        ScanBenchConfig { lengths: [10, 14], channels: 16, state: 16, trials: 5, seed: 0 }
    }
}

/// Forward selective-scan wall time for each `L = 2^p`, both modes.
pub fn bench_scan(cfg: &ScanBenchConfig) -> Result<Vec<ScanTiming>> {
    if cfg.trials == 0 || cfg.lengths[0] > cfg.lengths[1] {
        return Err(Error::invalid("scan bench needs trials > 0 and an increasing length range"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::new();
    for mode in [ScanMode::Sequential, ScanMode::Parallel] {
        let mut prev: Option<f64> = None;
        for p in cfg.lengths[0]..=cfg.lengths[1] {
            let l = 1usize << p;
            let (e, n) = (cfg.channels, cfg.state);
            let x = Tensor::<f32>::randn([1, l, e], 1.0, &mut rng);
            let delta = Tensor::<f32>::rand_uniform([1, l, e], 0.01, 0.2, &mut rng);
            let a = Tensor::<f32>::rand_uniform([e, n], -2.0, -0.1, &mut rng);
            let b = Tensor::<f32>::randn([1, l, n], 1.0, &mut rng);
            let c = Tensor::<f32>::randn([1, l, n], 1.0, &mut rng);
            let d = Tensor::<f32>::randn([e], 1.0, &mut rng);
            let mut times = Vec::with_capacity(cfg.trials);
            // one untimed warm-up run
            for trial in 0..=cfg.trials {
                let mut g = Graph::new();
                let v = [&x, &delta, &a, &b, &c, &d].map(|t| g.constant(t.clone()));
                let t0 = Instant::now();
                let y = g.selective_scan(v[0], v[1], v[2], v[3], v[4], v[5], ScanOptions { mode, exact_zoh: false })?;
                let dt = t0.elapsed().as_secs_f64();
                std::hint::black_box(g.value(y));
                if trial > 0 {
                    times.push(dt);
                }
            }
            let m = median(times);
            rows.push(ScanTiming { length: l, mode, median_seconds: m, ratio: prev.map(|p| m / p) });
            prev = Some(m);
        }
    }
    Ok(rows)
}

pub fn scan_csv(rows: &[ScanTiming]) -> String {
    let mut s = String::from("length,mode,median_seconds,ratio\n");
    for r in rows {
        let mode = match r.mode {
            ScanMode::Sequential => "sequential",
            ScanMode::Parallel => "parallel",
        };
        let ratio = r.ratio.map(|v| format!("{v:.4}")).unwrap_or_default();
        let _ = writeln!(s, "{},{mode},{:.6e},{ratio}", r.length, r.median_seconds);
    }
    s
}

#[derive(Clone, Debug)]
pub struct PatchTiming {
    pub patches: usize,
    pub stem_patch: usize,
    pub forward_seconds: f64,
    pub auc: Option<f64>,
}

/// Optional short training run per patch count.
pub struct PatchTraining<'a> {
    pub train: &'a Dataset,
    pub heldout: &'a Dataset,
    pub cfg: TrainConfig,
}

/// Forward time of a 4-image batch (median of `trials`) for each stem
/// patch size; with `training`, also held-out AUC after a short run.
pub fn bench_patches(base: &ModelConfig, stems: &[usize], trials: usize, training: Option<&PatchTraining>) -> Result<Vec<PatchTiming>> {
    let mut rows = Vec::new();
    for &stem in stems {
        let cfg = ModelConfig { stem_patch: stem, ..base.clone() };
        cfg.validate()?;
        let mut store = ParamStore::<f32>::new();
        let model = WMamba::new(cfg.clone(), &mut store)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let batch = Tensor::<f32>::rand_uniform([4, cfg.image_channels, cfg.input_size, cfg.input_size], 0.0, 1.0, &mut rng);
        let mut times = Vec::new();
        for trial in 0..=trials.max(1) {
            let mut g = Graph::new();
            let mut s = Session::inference(&mut g, &store);
            let x = s.g.constant(batch.clone());
            let t0 = Instant::now();
            let y = model.forward(&mut s, x)?;
            let dt = t0.elapsed().as_secs_f64();
            std::hint::black_box(s.g.value(y));
            if trial > 0 {
                times.push(dt);
            }
        }
        let auc = match training {
            Some(t) => {
                let mut tr = Trainer::new(cfg.clone(), t.cfg.clone())?;
                tr.run(t.train, None, None, |_| {})?;
                Some(evaluate(&tr.model, &tr.store, t.heldout)?.auc)
            }
            None => None,
        };
        let side = cfg.input_size / stem;
        rows.push(PatchTiming { patches: side * side, stem_patch: stem, forward_seconds: median(times), auc });
    }
    Ok(rows)
}

pub fn patches_csv(rows: &[PatchTiming]) -> String {
    let mut s = String::from("patches,stem_patch,forward_seconds,auc\n");
    for r in rows {
        let auc = r.auc.map(|v| format!("{v:.6}")).unwrap_or_default();
        let _ = writeln!(s, "{},{},{:.6e},{auc}", r.patches, r.stem_patch, r.forward_seconds);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn scan_rows_cover_the_grid() {
        let cfg = ScanBenchConfig { lengths: [4, 6], channels: 2, state: 2, trials: 1, seed: 0 };
        let rows = bench_scan(&cfg).unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows[0].ratio.is_none() && rows[1].ratio.is_some());
        assert_eq!(scan_csv(&rows).lines().count(), 7);
    }
}
