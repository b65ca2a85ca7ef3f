//! The full classifier: patch stem, VSS stages gated by wavelet attention,
//! and a linear head producing two logits (real, fake).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::dcconv::DeformMode;
use crate::error::{Error, Result};
use crate::hwfeb::{BandMode, BandVars, GateMode, SpatialGate, Wfem, WfemConfig};
use crate::nn::{Conv2d, LayerNorm, Linear, ParamStore, Session};
use crate::ss2d::{ScanOrder, VssBlock, VssConfig};
use crate::ssm::{ScanMode, ScanOptions};
use crate::tensor::Scalar;
use crate::wavelet::Band;

/// Which stages receive wavelet attention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Hierarchy {
    /// Every stage, each from its own decomposition level.
    #[default]
    Multi,
    /// Only the first stage.
    Single,
}

impl Hierarchy {
    pub fn as_str(self) -> &'static str {
        match self {
            Hierarchy::Multi => "multi",
            Hierarchy::Single => "single",
        }
    }
}

impl std::str::FromStr for Hierarchy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multi" => Ok(Hierarchy::Multi),
            "single" => Ok(Hierarchy::Single),
            _ => Err(Error::Config(format!("unknown hierarchy {s:?} (expected multi or single)"))),
        }
    }
}

/// Where in a stage the gate is applied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum GatePosition {
    /// Once, before the first block.
    #[default]
    Entry,
    /// Once, after the last block.
    Exit,
    /// Before every block.
    Every,
}

impl GatePosition {
    pub fn as_str(self) -> &'static str {
        match self {
            GatePosition::Entry => "entry",
            GatePosition::Exit => "exit",
            GatePosition::Every => "every",
        }
    }
}

impl std::str::FromStr for GatePosition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entry" => Ok(GatePosition::Entry),
            "exit" => Ok(GatePosition::Exit),
            "every" => Ok(GatePosition::Every),
            _ => Err(Error::Config(format!("unknown gate position {s:?} (expected entry, exit or every)"))),
        }
    }
}

fn parse_scan_mode(s: &str) -> Result<ScanMode> {
    match s {
        "sequential" => Ok(ScanMode::Sequential),
        "parallel" => Ok(ScanMode::Parallel),
        _ => Err(Error::Config(format!("unknown scan mode {s:?} (expected sequential or parallel)"))),
    }
}

fn scan_mode_str(m: ScanMode) -> &'static str {
    match m {
        ScanMode::Sequential => "sequential",
        ScanMode::Parallel => "parallel",
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub input_size: usize,
    pub image_channels: usize,
    pub stem_patch: usize,
    pub stage_depths: Vec<usize>,
    pub stage_dims: Vec<usize>,
    pub ssm_state_dim: usize,
    pub dcconv_k: usize,
    pub wfem_channels: usize,
    pub gate_mode: GateMode,
    pub band_mode: BandMode,
    pub hierarchy: Hierarchy,
    pub deform_mode: DeformMode,
    pub gate_position: GatePosition,
    pub scan_order: ScanOrder,
    pub scan_mode: ScanMode,
    pub exact_zoh: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

pub const MODEL_KEYS: [&str; 17] = [
    "input_size",
    "image_channels",
    "stem_patch",
    "stage_depths",
    "stage_dims",
    "ssm_state_dim",
    "dcconv_k",
    "wfem_channels",
    "gate_mode",
    "band_mode",
    "hierarchy",
    "deform_mode",
    "gate_position",
    "scan_order",
    "scan_mode",
    "exact_zoh",
    "seed",
];

fn parse_list(v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|_| Error::Config(format!("bad list entry {p:?} in {v:?}"))))
        .collect()
}

fn parse_num<N: std::str::FromStr>(key: &str, v: &str) -> Result<N> {
    v.trim().parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn join(list: &[usize]) -> String {
    list.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl ModelConfig {
    /// 64×64 input, two stages.
    pub fn desk() -> Self {
        ModelConfig {
            input_size: 64,
            image_channels: 3,
            stem_patch: 4,
            stage_depths: vec![2, 2],
            stage_dims: vec![32, 64],
            ssm_state_dim: 16,
            dcconv_k: 5,
            wfem_channels: 8,
            gate_mode: GateMode::GateSkip,
            band_mode: BandMode::HighOnly,
            hierarchy: Hierarchy::Multi,
            deform_mode: DeformMode::DcConv,
            gate_position: GatePosition::Entry,
            scan_order: ScanOrder::Cross,
            scan_mode: ScanMode::Sequential,
            exact_zoh: false,
            seed: 0,
        }
    }

    /// 224×224 input, four stages, kernel length 9.
    pub fn full_scale() -> Self {
        ModelConfig {
            input_size: 224,
            stage_depths: vec![2, 2, 15, 2],
            stage_dims: vec![96, 192, 384, 768],
            dcconv_k: 9,
            ..Self::desk()
        }
    }

    pub fn num_stages(&self) -> usize {
        self.stage_dims.len()
    }

    /// Decomposition level feeding stage 0 (`log2(stem_patch)`).
    pub fn first_level(&self) -> usize {
        self.stem_patch.trailing_zeros() as usize
    }

    pub fn gated_stages(&self) -> usize {
        match self.hierarchy {
            Hierarchy::Multi => self.num_stages(),
            Hierarchy::Single => 1.min(self.num_stages()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let s = self.num_stages();
        if s == 0 || self.stage_depths.len() != s {
            return bad(format!("stage_depths {:?} and stage_dims {:?} must be non-empty and equally long", self.stage_depths, self.stage_dims));
        }
        if self.stage_dims.iter().any(|&d| d == 0) || self.image_channels == 0 || self.ssm_state_dim == 0 || self.wfem_channels == 0 {
            return bad("dimensions must be positive".into());
        }
        if !self.stem_patch.is_power_of_two() || self.stem_patch < 2 {
            return bad(format!("stem_patch must be a power of two ≥ 2, got {}", self.stem_patch));
        }
        if self.dcconv_k % 2 == 0 {
            return bad(format!("dcconv_k must be odd, got {}", self.dcconv_k));
        }
        let down = self.stem_patch << (s - 1);
        if self.input_size == 0 || self.input_size % down != 0 {
            return bad(format!("input_size {} must be divisible by stem_patch·2^(stages−1) = {down}", self.input_size));
        }
        let levels = self.first_level() + self.gated_stages() - 1;
        if self.input_size % (1 << levels) != 0 {
            return bad(format!("input_size {} must be divisible by 2^{levels} for the wavelet pyramid", self.input_size));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        vec![
            ("input_size", self.input_size.to_string()),
            ("image_channels", self.image_channels.to_string()),
            ("stem_patch", self.stem_patch.to_string()),
            ("stage_depths", join(&self.stage_depths)),
            ("stage_dims", join(&self.stage_dims)),
            ("ssm_state_dim", self.ssm_state_dim.to_string()),
            ("dcconv_k", self.dcconv_k.to_string()),
            ("wfem_channels", self.wfem_channels.to_string()),
            ("gate_mode", self.gate_mode.as_str().into()),
            ("band_mode", self.band_mode.as_str().into()),
            ("hierarchy", self.hierarchy.as_str().into()),
            ("deform_mode", self.deform_mode.as_str().into()),
            ("gate_position", self.gate_position.as_str().into()),
            ("scan_order", self.scan_order.as_str().into()),
            ("scan_mode", scan_mode_str(self.scan_mode).into()),
            ("exact_zoh", self.exact_zoh.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    /// Sets one field from its text form; unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "input_size" => self.input_size = parse_num(key, v)?,
            "image_channels" => self.image_channels = parse_num(key, v)?,
            "stem_patch" => self.stem_patch = parse_num(key, v)?,
            "stage_depths" => self.stage_depths = parse_list(v)?,
            "stage_dims" => self.stage_dims = parse_list(v)?,
            "ssm_state_dim" => self.ssm_state_dim = parse_num(key, v)?,
            "dcconv_k" => self.dcconv_k = parse_num(key, v)?,
            "wfem_channels" => self.wfem_channels = parse_num(key, v)?,
            "gate_mode" => self.gate_mode = v.parse()?,
            "band_mode" => self.band_mode = v.parse()?,
            "hierarchy" => self.hierarchy = v.parse()?,
            "deform_mode" => self.deform_mode = v.parse()?,
            "gate_position" => self.gate_position = v.parse()?,
            "scan_order" => self.scan_order = v.parse()?,
            "scan_mode" => self.scan_mode = parse_scan_mode(v)?,
            "exact_zoh" => self.exact_zoh = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown model key {key:?}"))),
        }
        Ok(())
    }

    pub fn from_kv(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = Self::desk();
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.to_kv() {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }
}

/// What the gates see during a forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AttentionSource {
    #[default]
    Predicted,
    /// Attention maps replaced by zeros.
    Zero,
    /// Gates skipped entirely (plain backbone).
    Off,
}

struct Stage {
    wfem: Option<Wfem>,
    gate: Option<SpatialGate>,
    blocks: Vec<VssBlock>,
    down: Option<(Conv2d, LayerNorm)>,
}

/// The classifier. Parameters live in a [`ParamStore`] created alongside.
pub struct WMamba {
    pub cfg: ModelConfig,
    stem: Conv2d,
    stem_norm: LayerNorm,
    stages: Vec<Stage>,
    head_norm: LayerNorm,
    head: Linear,
}

impl WMamba {
    /// Builds the model and registers freshly initialised parameters,
    /// seeded from `cfg.seed`.
    pub fn new<T: Scalar>(cfg: ModelConfig, store: &mut ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let rng = &mut rng;
        let d0 = cfg.stage_dims[0];
        let stem = Conv2d::new(store, "stem", cfg.image_channels, d0, cfg.stem_patch, cfg.stem_patch, 0, rng);
        let stem_norm = LayerNorm::new(store, "stem.norm", d0);
        let mut stages = Vec::with_capacity(cfg.num_stages());
        for (si, (&depth, &dim)) in cfg.stage_depths.iter().zip(&cfg.stage_dims).enumerate() {
            let name = format!("stage{si}");
            let gated = si < cfg.gated_stages();
            let wfem = if gated {
                let wc = WfemConfig {
                    image_channels: cfg.image_channels,
                    branch_channels: cfg.wfem_channels,
                    k: cfg.dcconv_k,
                    band_mode: cfg.band_mode,
                    deform_mode: cfg.deform_mode,
                };
                Some(Wfem::new(store, &format!("{name}.wfem"), wc, rng)?)
            } else {
                None
            };
            let gate = gated.then(|| SpatialGate::new(store, &format!("{name}.gate"), cfg.gate_mode, dim, rng));
            let mut vss = VssConfig::new(dim, cfg.ssm_state_dim);
            vss.order = cfg.scan_order;
            vss.scan = ScanOptions { mode: cfg.scan_mode, exact_zoh: cfg.exact_zoh };
            let blocks = (0..depth).map(|b| VssBlock::new(store, &format!("{name}.block{b}"), vss, rng)).collect();
            let down = cfg.stage_dims.get(si + 1).map(|&next| {
                (
                    Conv2d::new(store, &format!("{name}.down"), dim, next, 2, 2, 0, rng),
                    LayerNorm::new(store, &format!("{name}.down.norm"), next),
                )
            });
            stages.push(Stage { wfem, gate, blocks, down });
        }
        let last = *cfg.stage_dims.last().expect("validated");
        let head_norm = LayerNorm::new(store, "head.norm", last);
        let head = Linear::new(store, "head", last, 2, true, rng);
        Ok(WMamba { cfg, stem, stem_norm, stages, head_norm, head })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, images: Var) -> Result<Var> {
        self.forward_with(s, images, AttentionSource::Predicted)
    }

    /// `images: [N, C, S, S]` → logits `[N, 2]`.
    pub fn forward_with<T: Scalar>(&self, s: &mut Session<T>, images: Var, attention: AttentionSource) -> Result<Var> {
        let pooled = self.features(s, images, attention)?;
        self.head.forward(s, pooled)
    }

    /// Pooled features `[N, C_last]` that feed the classifier head.
    pub fn features<T: Scalar>(&self, s: &mut Session<T>, images: Var, attention: AttentionSource) -> Result<Var> {
        let cfg = &self.cfg;
        let si = s.g.shape(images).to_vec();
        if si.len() != 4 || si[1] != cfg.image_channels || si[2] != cfg.input_size || si[3] != cfg.input_size {
            return Err(Error::shape(format!(
                "expected images [N, {}, {}, {}], got {si:?}",
                cfg.image_channels, cfg.input_size, cfg.input_size
            )));
        }
        let n = si[0];
        let maps = match attention {
            AttentionSource::Off => Vec::new(),
            _ => self.attention_maps(s, images, attention == AttentionSource::Zero)?,
        };

        let x = self.stem.forward(s, images)?;
        let x = s.g.permute(x, &[0, 2, 3, 1])?;
        let mut x = self.stem_norm.forward(s, x)?;
        for (idx, stage) in self.stages.iter().enumerate() {
            let map = maps.get(idx).copied().flatten();
            let gate = |s: &mut Session<T>, x: Var| -> Result<Var> {
                match (map, &stage.gate) {
                    (Some(a), Some(g)) => g.forward(s, x, a),
                    _ => Ok(x),
                }
            };
            if cfg.gate_position == GatePosition::Entry {
                x = gate(s, x)?;
            }
            for block in &stage.blocks {
                if cfg.gate_position == GatePosition::Every {
                    x = gate(s, x)?;
                }
                x = block.forward(s, x)?;
            }
            if cfg.gate_position == GatePosition::Exit {
                x = gate(s, x)?;
            }
            if let Some((conv, norm)) = &stage.down {
                let y = s.g.permute(x, &[0, 3, 1, 2])?;
                let y = conv.forward(s, y)?;
                let y = s.g.permute(y, &[0, 2, 3, 1])?;
                x = norm.forward(s, y)?;
            }
        }
        let x = self.head_norm.forward(s, x)?;
        let sx = s.g.shape(x).to_vec();
        let x = s.g.reshape(x, &[n, sx[1] * sx[2], sx[3]])?;
        s.g.mean_axis(x, 1)
    }

    /// One attention map `[N, 1, h, w]` per stage (`None` for ungated stages).
    pub fn attention_maps<T: Scalar>(&self, s: &mut Session<T>, images: Var, zero: bool) -> Result<Vec<Option<Var>>> {
        let first = self.cfg.first_level();
        let mut out = Vec::with_capacity(self.stages.len());
        let mut ll = images;
        let mut level = 0;
        for stage in &self.stages {
            let Some(wfem) = &stage.wfem else {
                out.push(None);
                continue;
            };
            let target = first + out.len();
            let mut bands = None;
            while level < target {
                let [l, lh, hl, hh] = s.g.haar_dwt(ll)?;
                bands = Some(BandVars { ll: l, lh, hl, hh });
                ll = l;
                level += 1;
            }
            let bands = bands.ok_or_else(|| Error::Config("wavelet levels out of order".into()))?;
            let a = if zero {
                let sh = s.g.shape(bands.ll).to_vec();
                s.g.constant(crate::tensor::Tensor::zeros([sh[0], 1, sh[2], sh[3]]))
            } else {
                wfem.forward(s, &bands, 0.5f64.powi(target as i32))?
            };
            out.push(Some(a));
        }
        Ok(out)
    }

    /// Ids of one representative parameter per sub-module, by name.
    pub fn probe_names(&self) -> Vec<&'static str> {
        let mut names = vec!["stem.weight", "stage0.block0.fc1.weight", "stage0.block0.s6_0.x_proj", "head.weight"];
        if self.stages[0].wfem.is_some() {
            names.push("stage0.wfem.proj.weight");
            if self.cfg.deform_mode != DeformMode::Rigid {
                names.push("stage0.wfem.dc_x.head.weight");
            }
        }
        names
    }
}

/// Bands used by a module (exposed for tests and tooling).
pub fn band_list(mode: BandMode) -> &'static [Band] {
    match mode {
        BandMode::HighOnly => &Band::HIGH,
        BandMode::WithLl => &Band::ALL,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_text_round_trip() {
        let mut cfg = ModelConfig::desk();
        cfg.gate_mode = GateMode::ConcatProj;
        cfg.stage_depths = vec![1, 3];
        cfg.seed = 99;
        let pairs: BTreeMap<String, String> = cfg
            .to_text()
            .lines()
            .map(|l| {
                let (k, v) = l.split_once('=').unwrap();
                (k.to_string(), v.to_string())
            })
            .collect();
        assert_eq!(pairs.len(), MODEL_KEYS.len());
        assert_eq!(ModelConfig::from_kv(&pairs).unwrap(), cfg);
    }

    #[test]
    fn invariants_are_enforced() {
        let mut cfg = ModelConfig::desk();
        cfg.input_size = 60;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::desk();
        cfg.dcconv_k = 4;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::desk();
        cfg.stage_dims = vec![32];
        assert!(cfg.validate().is_err());
        assert!(ModelConfig::desk().set("colour", "red").is_err());
        ModelConfig::full_scale().validate().unwrap();
    }
}
