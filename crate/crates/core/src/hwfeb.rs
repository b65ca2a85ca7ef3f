//! Wavelet attention: per-level feature extraction modules that turn Haar
//! sub-bands into spatial attention maps, and the gates that apply them.

use rand::Rng;

use crate::autodiff::Var;
use crate::dcconv::{Axis, DcConv, DeformMode};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Linear, ParamStore, Session};
use crate::tensor::Scalar;

/// Which sub-bands feed a module.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum BandMode {
    /// LH, HL, HH.
    #[default]
    HighOnly,
    /// LL, LH, HL, HH.
    WithLl,
}

impl BandMode {
    pub fn num_bands(self) -> usize {
        match self {
            BandMode::HighOnly => 3,
            BandMode::WithLl => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BandMode::HighOnly => "high_only",
            BandMode::WithLl => "with_ll",
        }
    }
}

impl std::str::FromStr for BandMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "high_only" => Ok(BandMode::HighOnly),
            "with_ll" => Ok(BandMode::WithLl),
            _ => Err(Error::Config(format!("unknown band mode {s:?} (expected high_only or with_ll)"))),
        }
    }
}

/// How an attention map is combined with a feature map `F`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum GateMode {
    /// `F ⊙ A + F`.
    #[default]
    GateSkip,
    /// `F + A` (broadcast over channels).
    Add,
    /// Learned 1×1 projection of `[F, A]` back to `C` channels.
    ConcatProj,
    /// `F ⊙ A`.
    GateNoSkip,
}

impl GateMode {
    pub const ALL: [GateMode; 4] = [GateMode::GateSkip, GateMode::Add, GateMode::ConcatProj, GateMode::GateNoSkip];

    pub fn as_str(self) -> &'static str {
        match self {
            GateMode::GateSkip => "gate_skip",
            GateMode::Add => "add",
            GateMode::ConcatProj => "concat_proj",
            GateMode::GateNoSkip => "gate_no_skip",
        }
    }
}

impl std::str::FromStr for GateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GateMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown gate mode {s:?} (expected gate_skip, add, concat_proj or gate_no_skip)")))
    }
}

/// Sub-band inputs for one module: `[N, C, h, w]` each.
#[derive(Clone, Copy, Debug)]
pub struct BandVars {
    pub ll: Var,
    pub lh: Var,
    pub hl: Var,
    pub hh: Var,
}

/// Hyperparameters of one feature extraction module.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WfemConfig {
    pub image_channels: usize,
    pub branch_channels: usize,
    pub k: usize,
    pub band_mode: BandMode,
    pub deform_mode: DeformMode,
}

/// Two contour convolutions (x- and y-initialised) and a 3×3 convolution in
/// parallel, fused by a 1×1 projection and a sigmoid.
#[derive(Clone, Debug)]
pub struct Wfem {
    pub cfg: WfemConfig,
    pub dc_x: DcConv,
    pub dc_y: DcConv,
    pub std_conv: Conv2d,
    pub proj: Conv2d,
}

impl Wfem {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: WfemConfig, rng: &mut impl Rng) -> Result<Self> {
        let cin = cfg.image_channels * cfg.band_mode.num_bands();
        let cb = cfg.branch_channels;
        let dc_x = DcConv::new(store, &format!("{name}.dc_x"), cin, cb, cfg.k, Axis::X, cfg.deform_mode, rng)?;
        let dc_y = DcConv::new(store, &format!("{name}.dc_y"), cin, cb, cfg.k, Axis::Y, cfg.deform_mode, rng)?;
        let std_conv = Conv2d::new(store, &format!("{name}.conv"), cin, cb, 3, 1, 1, rng);
        let proj = Conv2d::new(store, &format!("{name}.proj"), 3 * cb, 1, 1, 1, 0, rng);
        Ok(Wfem { cfg, dc_x, dc_y, std_conv, proj })
    }

    /// Concatenated band input `[N, bands·C, h, w]`, multiplied by `scale`.
    pub fn input<T: Scalar>(&self, s: &mut Session<T>, bands: &BandVars, scale: f64) -> Result<Var> {
        let list: Vec<Var> = match self.cfg.band_mode {
            BandMode::HighOnly => vec![bands.lh, bands.hl, bands.hh],
            BandMode::WithLl => vec![bands.ll, bands.lh, bands.hl, bands.hh],
        };
        let x = s.g.concat(&list, 1)?;
        if scale == 1.0 {
            Ok(x)
        } else {
            s.g.scale(x, scale)
        }
    }

    /// Attention map `[N, 1, h, w]` with values in `(0, 1)`.
    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, bands: &BandVars, scale: f64) -> Result<Var> {
        let x = self.input(s, bands, scale)?;
        let a = self.dc_x.forward(s, x)?;
        let b = self.dc_y.forward(s, x)?;
        let c = self.std_conv.forward(s, x)?;
        let cat = s.g.concat(&[a, b, c], 1)?;
        let logit = self.proj.forward(s, cat)?;
        s.g.sigmoid(logit)
    }
}

/// Applies an attention map to a channels-last feature map.
#[derive(Clone, Debug)]
pub struct SpatialGate {
    pub mode: GateMode,
    /// Present for [`GateMode::ConcatProj`].
    pub proj: Option<Linear>,
}

impl SpatialGate {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, mode: GateMode, channels: usize, rng: &mut impl Rng) -> Self {
        let proj = (mode == GateMode::ConcatProj).then(|| Linear::new(store, &format!("{name}.proj"), channels + 1, channels, true, rng));
        SpatialGate { mode, proj }
    }

    /// `f: [N, h, w, C]`, `attention: [N, 1, h, w]`.
    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, f: Var, attention: Var) -> Result<Var> {
        let sf = s.g.shape(f).to_vec();
        let sa = s.g.shape(attention).to_vec();
        if sf.len() != 4 || sa != [sf[0], 1, sf[1], sf[2]] {
            return Err(Error::shape(format!("gate: features {sf:?} (NHWC) vs attention {sa:?} (N1HW)")));
        }
        let a = s.g.reshape(attention, &[sf[0], sf[1], sf[2], 1])?;
        match self.mode {
            GateMode::ConcatProj => {
                let proj = self.proj.as_ref().ok_or_else(|| Error::Config("concat gate without projection".into()))?;
                let cat = s.g.concat(&[f, a], 3)?;
                proj.forward(s, cat)
            }
            mode => {
                let ab = s.g.broadcast_to(a, &sf)?;
                match mode {
                    GateMode::GateSkip => {
                        let fa = s.g.mul(f, ab)?;
                        s.g.add(fa, f)
                    }
                    GateMode::GateNoSkip => s.g.mul(f, ab),
                    _ => s.g.add(f, ab),
                }
            }
        }
    }

    /// Same as [`SpatialGate::forward`] for channels-first `f: [N, C, h, w]`.
    pub fn forward_nchw<T: Scalar>(&self, s: &mut Session<T>, f: Var, attention: Var) -> Result<Var> {
        let nhwc = s.g.permute(f, &[0, 2, 3, 1])?;
        let out = self.forward(s, nhwc, attention)?;
        s.g.permute(out, &[0, 3, 1, 2])
    }
}
