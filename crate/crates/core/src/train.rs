//! Training loop, evaluation and run-directory bookkeeping.
//!
//! A batch is split into fixed-size shards that run on the rayon pool; shard
//! gradients are summed in shard order, so results do not depend on the
//! number of worker threads. Batch composition depends only on the seed and
//! the step counter, which is what makes resuming exact.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Graph;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::metrics::{accuracy, auc, fake_probability};
use crate::model::{ModelConfig, WMamba, MODEL_KEYS};
use crate::nn::{ParamStore, Session};
use crate::optim::{lr_at, AdamW, AdamWConfig};
use crate::synthdata::Dataset;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Samples per gradient shard; fixed so the reduction order is too.
    pub shard_size: usize,
    pub log_every: u64,
    /// 0 disables held-out evaluation during training.
    pub eval_every: u64,
    /// 0 disables intermediate checkpoints.
    pub checkpoint_every: u64,
    /// Stop once held-out AUC reaches this value (0 disables).
    pub target_auc: f64,
    /// Keep each real/fake pair (adjacent manifest rows) in the same batch.
    pub paired: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            shard_size: 4,
            log_every: 10,
            eval_every: 100,
            checkpoint_every: 500,
            target_auc: 0.0,
            paired: true,
        }
    }
}

pub const TRAIN_KEYS: [&str; 13] = [
    "steps",
    "batch_size",
    "lr",
    "weight_decay",
    "beta1",
    "beta2",
    "adam_eps",
    "shard_size",
    "log_every",
    "eval_every",
    "checkpoint_every",
    "target_auc",
    "paired",
];

fn num<N: std::str::FromStr>(key: &str, v: &str) -> Result<N> {
    v.trim().parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

impl TrainConfig {
    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr, weight_decay: self.weight_decay, beta1: self.beta1, beta2: self.beta2, eps: self.adam_eps }
    }

    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        vec![
            ("steps", self.steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("shard_size", self.shard_size.to_string()),
            ("log_every", self.log_every.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("target_auc", self.target_auc.to_string()),
            ("paired", self.paired.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "steps" => self.steps = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "lr" => self.lr = num(key, v)?,
            "weight_decay" => self.weight_decay = num(key, v)?,
            "beta1" => self.beta1 = num(key, v)?,
            "beta2" => self.beta2 = num(key, v)?,
            "adam_eps" => self.adam_eps = num(key, v)?,
            "shard_size" => self.shard_size = num(key, v)?,
            "log_every" => self.log_every = num(key, v)?,
            "eval_every" => self.eval_every = num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = num(key, v)?,
            "target_auc" => self.target_auc = num(key, v)?,
            "paired" => self.paired = num(key, v)?,
            _ => return Err(Error::Config(format!("unknown training key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.shard_size == 0 {
            return Err(Error::Config("batch_size and shard_size must be positive".into()));
        }
        if self.paired && self.batch_size % 2 != 0 {
            return Err(Error::Config(format!("paired batches need an even batch_size, got {}", self.batch_size)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || self.weight_decay < 0.0 {
            return Err(Error::Config(format!("bad lr {} / weight_decay {}", self.lr, self.weight_decay)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Stacks `[C, S, S]` images into `[N, C, S, S]`.
pub fn stack(images: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = images.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let mut shape = vec![images.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(images.len() * first.numel());
    for im in images {
        if im.shape() != first.shape() {
            return Err(Error::shape(format!("mixed image shapes {:?} and {:?}", first.shape(), im.shape())));
        }
        data.extend_from_slice(im.data());
    }
    Tensor::from_vec(shape, data)
}

/// Fake-class probability for every image, one forward pass per sample.
pub fn predict(model: &WMamba, store: &ParamStore<f32>, images: &[Tensor<f32>]) -> Result<Vec<f64>> {
    images
        .par_iter()
        .map(|im| {
            let logits = logits(model, store, &stack(&[im])?)?;
            Ok(fake_probability(logits[0] as f64, logits[1] as f64))
        })
        .collect()
}

/// Raw logits `[N·2]` for a batch, without building gradients.
pub fn logits(model: &WMamba, store: &ParamStore<f32>, batch: &Tensor<f32>) -> Result<Vec<f32>> {
    let mut g = Graph::new();
    let mut s = Session::inference(&mut g, store);
    let x = s.g.constant(batch.clone());
    let y = model.forward(&mut s, x)?;
    Ok(s.g.value(y).data().to_vec())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub auc: f64,
    pub accuracy: f64,
    pub scores: Vec<f64>,
}

pub fn evaluate(model: &WMamba, store: &ParamStore<f32>, data: &Dataset) -> Result<EvalResult> {
    let scores = predict(model, store, &data.images)?;
    Ok(EvalResult { auc: auc(&scores, &data.labels)?, accuracy: accuracy(&scores, &data.labels), scores })
}

#[derive(Clone, Debug)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

/// Something that happened during [`Trainer::run`].
#[derive(Clone, Debug)]
pub enum Event {
    Log { step: u64, loss: f64, auc: Option<f64> },
    Eval { step: u64, auc: f64, accuracy: f64 },
    Checkpoint { step: u64 },
}

#[derive(Clone, Debug, Default)]
pub struct TrainSummary {
    /// Per-step losses of this invocation.
    pub losses: Vec<f64>,
    /// `(step, auc, accuracy)` for every held-out evaluation.
    pub evals: Vec<(u64, f64, f64)>,
    pub final_step: u64,
    pub reached_target: bool,
}

pub struct Trainer {
    pub model: WMamba,
    pub store: ParamStore<f32>,
    pub opt: AdamW<f32>,
    pub cfg: TrainConfig,
    /// Completed updates.
    pub step: u64,
    perms: HashMap<u64, Vec<usize>>,
}

const BATCH_STREAM: u64 = 0xBA7C_4000;

impl Trainer {
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let model = WMamba::new(model_cfg, &mut store)?;
        let opt = AdamW::new(cfg.optimizer(), &store);
        Ok(Trainer { model, store, opt, cfg, step: 0, perms: HashMap::new() })
    }

    /// Dataset rows of the batch for `step`. Each epoch is a fresh
    /// permutation keyed by `(seed, epoch)`; step `t` takes global positions
    /// `t·B .. t·B + B`. In paired mode the permutation is over pairs of
    /// adjacent rows and each position contributes both members.
    pub fn batch_indices(&mut self, n: usize, step: u64) -> Vec<usize> {
        let group = if self.cfg.paired { 2 } else { 1 };
        let units = (n / group).max(1);
        let per_step = (self.cfg.batch_size / group) as u64;
        let seed = self.model.cfg.seed;
        let mut rows = Vec::with_capacity(self.cfg.batch_size);
        for j in 0..per_step {
            let pos = step * per_step + j;
            let epoch = pos / units as u64;
            let perm = self.perms.entry(epoch).or_insert_with(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ BATCH_STREAM);
                rng.set_stream(epoch);
                let mut p: Vec<usize> = (0..units).collect();
                p.shuffle(&mut rng);
                p
            });
            let u = perm[(pos % units as u64) as usize];
            rows.extend((0..group).map(|k| u * group + k));
        }
        rows
    }

    /// Checks that a dataset can be batched as configured.
    pub fn check_dataset(&self, data: &Dataset) -> Result<()> {
        if data.is_empty() {
            return Err(Error::invalid("empty training set"));
        }
        if self.cfg.paired {
            let ok = data.len() % 2 == 0 && data.labels.chunks(2).all(|p| p[0] != p[1]);
            if !ok {
                return Err(Error::invalid("paired batching needs adjacent real/fake rows (set paired=false otherwise)"));
            }
        }
        Ok(())
    }

    /// Mean cross-entropy over `rows` with its gradient and per-sample scores.
    pub fn loss_and_grads(&self, data: &Dataset, rows: &[usize]) -> Result<(f64, Vec<Vec<f32>>, Vec<f64>)> {
        let total = rows.len() as f64;
        let shards: Vec<Result<(f64, Vec<Vec<f32>>, Vec<f64>)>> = rows
            .par_chunks(self.cfg.shard_size)
            .map(|chunk| {
                let imgs: Vec<&Tensor<f32>> = chunk.iter().map(|&i| &data.images[i]).collect();
                let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i] as usize).collect();
                let mut g = Graph::new();
                let mut s = Session::new(&mut g, &self.store);
                let x = s.g.constant(stack(&imgs)?);
                let logits = self.model.forward(&mut s, x)?;
                let ce = s.g.cross_entropy(logits, &labels)?;
                let loss = s.g.scale(ce, chunk.len() as f64 / total)?;
                let lv = s.g.value(logits).data().to_vec();
                let scores = lv.chunks(2).map(|p| fake_probability(p[0] as f64, p[1] as f64)).collect();
                s.g.backward(loss)?;
                let l = s.g.value(loss).data()[0] as f64;
                Ok((l, s.grads(), scores))
            })
            .collect();
        let mut loss = 0.0;
        let mut grads: Option<Vec<Vec<f32>>> = None;
        let mut scores = Vec::with_capacity(rows.len());
        for shard in shards {
            let (l, gs, sc) = shard?;
            loss += l;
            scores.extend(sc);
            match &mut grads {
                None => grads = Some(gs),
                Some(acc) => acc.iter_mut().zip(&gs).for_each(|(a, g)| a.iter_mut().zip(g).for_each(|(x, y)| *x += y)),
            }
        }
        Ok((loss, grads.ok_or_else(|| Error::invalid("empty batch"))?, scores))
    }

    fn diagnostic(&self, grads: &[Vec<f32>]) -> String {
        let mut out = String::new();
        let mut worst: Vec<(f64, &str)> = grads
            .iter()
            .zip(self.store.entries())
            .map(|(g, e)| (g.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt(), e.name.as_str()))
            .collect();
        let bad: Vec<&str> = worst.iter().filter(|(n, _)| !n.is_finite()).map(|(_, name)| *name).collect();
        if !bad.is_empty() {
            let _ = write!(out, "non-finite gradients in {}; ", bad.join(", "));
        }
        worst.retain(|(n, _)| n.is_finite());
        worst.sort_by(|a, b| b.0.total_cmp(&a.0));
        let top: Vec<String> = worst.iter().take(3).map(|(n, name)| format!("{name}={n:.3e}")).collect();
        let _ = write!(out, "largest gradient norms: {}", top.join(", "));
        out
    }

    /// One optimizer update on the batch for the current step.
    pub fn train_step(&mut self, data: &Dataset) -> Result<StepStats> {
        let rows = self.batch_indices(data.len(), self.step);
        let (loss, grads, scores) = self.loss_and_grads(data, &rows)?;
        if !loss.is_finite() || grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::Diverged { step: self.step, loss, diagnostic: self.diagnostic(&grads) });
        }
        let lr = lr_at(self.cfg.lr, self.step, self.cfg.steps);
        self.opt.step(&mut self.store, &grads, lr)?;
        self.step += 1;
        Ok(StepStats { step: self.step, loss, lr, scores, labels: rows.iter().map(|&i| data.labels[i]).collect() })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let params = self.store.entries().iter().map(|e| (e.name.clone(), e.value.clone())).collect();
        let mut config: Vec<(String, String)> = self.model.cfg.to_kv().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        config.extend(self.cfg.to_kv().into_iter().map(|(k, v)| (k.to_string(), v)));
        config.push(("step".into(), self.step.to_string()));
        config.push(("optimizer_t".into(), self.opt.t.to_string()));
        let mut optimizer = Vec::with_capacity(2 * self.store.len());
        for (e, m) in self.store.entries().iter().zip(&self.opt.m) {
            optimizer.push((format!("m.{}", e.name), m.clone()));
        }
        for (e, v) in self.store.entries().iter().zip(&self.opt.v) {
            optimizer.push((format!("v.{}", e.name), v.clone()));
        }
        Checkpoint { params, config, optimizer }
    }

    /// Rebuilds a trainer, including optimizer moments and step counter.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let (model_cfg, cfg) = configs_from_checkpoint(ck)?;
        let mut t = Trainer::new(model_cfg, cfg)?;
        load_params(&mut t.store, &ck.params)?;
        let get = |k: &str| ck.get(k).ok_or_else(|| Error::Format(format!("checkpoint lacks {k}")));
        t.step = num("step", get("step")?)?;
        t.opt.t = num("optimizer_t", get("optimizer_t")?)?;
        let n = t.store.len();
        if ck.optimizer.len() == 2 * n {
            for i in 0..n {
                let name = &t.store.entries()[i].name;
                let (mn, m) = &ck.optimizer[i];
                let (vn, v) = &ck.optimizer[n + i];
                if mn != &format!("m.{name}") || vn != &format!("v.{name}") || m.shape() != t.opt.m[i].shape() || v.shape() != t.opt.v[i].shape() {
                    return Err(Error::Format(format!("optimizer state does not match parameter {name}")));
                }
                t.opt.m[i] = m.clone();
                t.opt.v[i] = v.clone();
            }
        } else if !ck.optimizer.is_empty() {
            return Err(Error::Format(format!("optimizer table has {} tensors for {n} parameters", ck.optimizer.len())));
        }
        Ok(t)
    }

    /// Trains until `cfg.steps` (or the held-out target), writing
    /// `metrics.csv`, `eval.csv` and checkpoints into `out` when given.
    pub fn run(&mut self, train: &Dataset, heldout: Option<&Dataset>, out: Option<&Path>, mut on_event: impl FnMut(&Event)) -> Result<TrainSummary> {
        let mut metrics = match out {
            Some(dir) => Some(open_csv(&dir.join("metrics.csv"), "step,loss,auc", self.step)?),
            None => None,
        };
        let mut evals = match (out, heldout) {
            (Some(dir), Some(_)) => Some(open_csv(&dir.join("eval.csv"), "step,auc,accuracy", self.step)?),
            _ => None,
        };
        self.check_dataset(train)?;
        let mut summary = TrainSummary::default();
        let (mut win_loss, mut win_n, mut win_scores, mut win_labels) = (0.0, 0u64, Vec::new(), Vec::new());
        while self.step < self.cfg.steps {
            let st = self.train_step(train)?;
            summary.losses.push(st.loss);
            win_loss += st.loss;
            win_n += 1;
            win_scores.extend(st.scores);
            win_labels.extend(st.labels);
            let step = self.step;
            if self.cfg.log_every > 0 && (step % self.cfg.log_every == 0 || step == self.cfg.steps) {
                let a = auc(&win_scores, &win_labels).ok();
                let loss = win_loss / win_n as f64;
                if let Some(f) = metrics.as_mut() {
                    let auc_txt = a.map(|v| format!("{v:.6}")).unwrap_or_default();
                    writeln!(f, "{step},{loss:.6},{auc_txt}").map_err(|e| Error::io("metrics.csv", e))?;
                }
                on_event(&Event::Log { step, loss, auc: a });
                (win_loss, win_n) = (0.0, 0);
                win_scores.clear();
                win_labels.clear();
            }
            let mut stop = false;
            if let Some(h) = heldout {
                if self.cfg.eval_every > 0 && (step % self.cfg.eval_every == 0 || step == self.cfg.steps) {
                    let r = evaluate(&self.model, &self.store, h)?;
                    if let Some(f) = evals.as_mut() {
                        writeln!(f, "{step},{:.6},{:.6}", r.auc, r.accuracy).map_err(|e| Error::io("eval.csv", e))?;
                    }
                    on_event(&Event::Eval { step, auc: r.auc, accuracy: r.accuracy });
                    summary.evals.push((step, r.auc, r.accuracy));
                    if self.cfg.target_auc > 0.0 && r.auc >= self.cfg.target_auc {
                        summary.reached_target = true;
                        stop = true;
                    }
                }
            }
            if let Some(dir) = out {
                if self.cfg.checkpoint_every > 0 && step % self.cfg.checkpoint_every == 0 {
                    self.to_checkpoint().save(dir.join(format!("ckpt_{step:06}.wmbk")))?;
                    self.to_checkpoint().save(dir.join("latest.wmbk"))?;
                    on_event(&Event::Checkpoint { step });
                }
            }
            if stop {
                break;
            }
        }
        if let Some(dir) = out {
            self.to_checkpoint().save(dir.join("final.wmbk"))?;
            self.to_checkpoint().save(dir.join("latest.wmbk"))?;
        }
        summary.final_step = self.step;
        Ok(summary)
    }
}

/// Opens a CSV for appending, keeping only rows at or before `step` so a
/// resumed run continues the file cleanly.
fn open_csv(path: &Path, header: &str, step: u64) -> Result<fs::File> {
    let mut kept = format!("{header}\n");
    if step > 0 {
        if let Ok(old) = fs::read_to_string(path) {
            for line in old.lines().skip(1) {
                let s: Option<u64> = line.split(',').next().and_then(|v| v.parse().ok());
                if s.is_some_and(|s| s <= step) {
                    kept.push_str(line);
                    kept.push('\n');
                }
            }
        }
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))?;
    fs::OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))
}

pub fn configs_from_checkpoint(ck: &Checkpoint) -> Result<(ModelConfig, TrainConfig)> {
    let mut model = ModelConfig::desk();
    let mut train = TrainConfig::default();
    for (k, v) in &ck.config {
        if MODEL_KEYS.contains(&k.as_str()) {
            model.set(k, v)?;
        } else if TRAIN_KEYS.contains(&k.as_str()) {
            train.set(k, v)?;
        }
    }
    model.validate()?;
    Ok((model, train))
}

/// Copies a named parameter table into `store`; names and shapes must match.
pub fn load_params(store: &mut ParamStore<f32>, params: &[(String, Tensor<f32>)]) -> Result<()> {
    if params.len() != store.len() {
        return Err(Error::Format(format!("checkpoint has {} parameters, model has {}", params.len(), store.len())));
    }
    let ids: Vec<_> = store.ids().collect();
    for (id, (name, t)) in ids.into_iter().zip(params) {
        let e = store.entry(id);
        if &e.name != name || e.value.shape() != t.shape() {
            return Err(Error::Format(format!("parameter {name} {:?} does not match {} {:?}", t.shape(), e.name, e.value.shape())));
        }
        *store.get_mut(id) = t.clone();
    }
    Ok(())
}

/// Model and parameters from a checkpoint, for inference.
pub fn load_model(ck: &Checkpoint) -> Result<(WMamba, ParamStore<f32>)> {
    let (cfg, _) = configs_from_checkpoint(ck)?;
    let mut store = ParamStore::new();
    let model = WMamba::new(cfg, &mut store)?;
    load_params(&mut store, &ck.params)?;
    Ok((model, store))
}
