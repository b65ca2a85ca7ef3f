//! Variant matrix over gating, band selection, hierarchy and deformation,
//! sampled to ten configurations that together touch every level of every
//! factor.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::dcconv::DeformMode;
use crate::error::Result;
use crate::hwfeb::{BandMode, GateMode};
use crate::model::{Hierarchy, ModelConfig};
use crate::synthdata::Dataset;
use crate::train::{evaluate, TrainConfig, Trainer};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Variant {
    pub gate_mode: GateMode,
    pub band_mode: BandMode,
    pub hierarchy: Hierarchy,
    pub deform_mode: DeformMode,
}

impl Variant {
    pub fn name(&self) -> String {
        format!("{}/{}/{}/{}", self.gate_mode.as_str(), self.band_mode.as_str(), self.hierarchy.as_str(), self.deform_mode.as_str())
    }

    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            gate_mode: self.gate_mode,
            band_mode: self.band_mode,
            hierarchy: self.hierarchy,
            deform_mode: self.deform_mode,
            ..base.clone()
        }
    }
}

/// The reference configuration, one variant per non-default level, and one
/// variant changing all four factors at once.
pub fn matrix() -> Vec<Variant> {
    use {BandMode as B, DeformMode as D, GateMode as G, Hierarchy as H};
    let base = Variant { gate_mode: G::GateSkip, band_mode: B::HighOnly, hierarchy: H::Multi, deform_mode: D::DcConv };
    let mut out = vec![base];
    out.extend([G::Add, G::ConcatProj, G::GateNoSkip].map(|gate_mode| Variant { gate_mode, ..base }));
    out.push(Variant { band_mode: B::WithLl, ..base });
    out.push(Variant { hierarchy: H::Single, ..base });
    out.extend([D::DsConv, D::Dcn, D::Rigid].map(|deform_mode| Variant { deform_mode, ..base }));
    out.push(Variant { gate_mode: G::Add, band_mode: B::WithLl, hierarchy: H::Single, deform_mode: D::DsConv });
    out
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: Variant,
    pub steps: u64,
    pub final_loss: f64,
    pub auc: f64,
    pub accuracy: f64,
    pub seconds: f64,
}

/// Trains every variant from the same seed and data, then scores it on
/// `heldout`. Each run's files go to `out/<index>` when `out` is given.
pub fn run(
    variants: &[Variant],
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    train: &Dataset,
    heldout: &Dataset,
    out: Option<&Path>,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (i, v) in variants.iter().enumerate() {
        let t0 = Instant::now();
        let mut tr = Trainer::new(v.apply(base), train_cfg.clone())?;
        let dir = out.map(|d| d.join(format!("{i:02}")));
        if let Some(d) = &dir {
            std::fs::create_dir_all(d).map_err(|e| crate::error::Error::io(d, e))?;
        }
        let summary = tr.run(train, None, dir.as_deref(), |_| {})?;
        let r = evaluate(&tr.model, &tr.store, heldout)?;
        let row = AblationRow {
            variant: *v,
            steps: summary.final_step,
            final_loss: summary.losses.last().copied().unwrap_or(f64::NAN),
            auc: r.auc,
            accuracy: r.accuracy,
            seconds: t0.elapsed().as_secs_f64(),
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

pub fn csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("gate_mode,band_mode,hierarchy,deform_mode,steps,final_loss,auc,accuracy,seconds\n");
    for r in rows {
        let v = r.variant;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{:.6},{:.6},{:.6},{:.2}",
            v.gate_mode.as_str(),
            v.band_mode.as_str(),
            v.hierarchy.as_str(),
            v.deform_mode.as_str(),
            r.steps,
            r.final_loss,
            r.auc,
            r.accuracy,
            r.seconds
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_touches_every_level() {
        let m = matrix();
        assert_eq!(m.len(), 10);
        for g in GateMode::ALL {
            assert!(m.iter().any(|v| v.gate_mode == g));
        }
        for d in DeformMode::ALL {
            assert!(m.iter().any(|v| v.deform_mode == d));
        }
        assert!(m.iter().any(|v| v.band_mode == BandMode::WithLl));
        assert!(m.iter().any(|v| v.hierarchy == Hierarchy::Single));
        let names: std::collections::BTreeSet<_> = m.iter().map(Variant::name).collect();
        assert_eq!(names.len(), 10);
    }
}
