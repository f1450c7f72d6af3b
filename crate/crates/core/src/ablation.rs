//! Sweeps over the eight combinations of layer norm, multi-attention and
//! highway, each trained for a single stage.

use std::fmt::Write as _;

use crate::data::{Batch, Batcher};
use crate::error::Result;
use crate::model::{parameter_count, Model, ModelConfig};
use crate::training::{train_loop, Status, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Flags {
    pub layer_norm: bool,
    pub multi_attention: bool,
    pub highway: bool,
}

impl Flags {
    pub const FULL: Flags = Flags { layer_norm: true, multi_attention: true, highway: true };

    /// All eight combinations, full model first.
    pub fn all() -> Vec<Flags> {
        (0..8u8)
            .map(|m| Flags { layer_norm: m & 4 == 0, multi_attention: m & 2 == 0, highway: m & 1 == 0 })
            .collect()
    }

    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            layer_norm: self.layer_norm,
            multi_attention: self.multi_attention,
            highway: self.highway,
            ..base.clone()
        }
    }

    /// Names of the removed components, e.g. `-LN -HW`; `full` for none.
    pub fn label(self) -> String {
        let mut parts = Vec::new();
        if !self.layer_norm {
            parts.push("-LN");
        }
        if !self.multi_attention {
            parts.push("-MA");
        }
        if !self.highway {
            parts.push("-HW");
        }
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join(" ")
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub flags: Flags,
    pub params: usize,
    pub status: Status,
    /// Best validation perplexity; `None` when training failed to converge.
    pub ppl: Option<f64>,
}

impl AblationRow {
    pub fn outcome(&self) -> String {
        match self.ppl {
            Some(p) => format!("{p:.4}"),
            None => Status::FailedToConverge.as_str().into(),
        }
    }
}

/// Trains every flag combination of `base` with single-stage training.
/// `progress` receives each finished row.
pub fn ablate(
    base: &ModelConfig,
    train: &Batcher,
    valid: &[Batch],
    config: &TrainConfig,
    progress: &mut dyn FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let tc = TrainConfig { single_stage: true, ..config.clone() };
    let mut rows = Vec::with_capacity(8);
    for flags in Flags::all() {
        let cfg = flags.apply(base);
        let model: Model<f32> = Model::new(cfg.clone())?;
        let out = train_loop(model, train, valid, &tc, &mut std::io::sink())?;
        let ppl = match out.status {
            Status::FailedToConverge => None,
            _ => Some(out.best_ppl),
        };
        let row = AblationRow { flags, params: parameter_count(&cfg), status: out.status, ppl };
        progress(&row);
        rows.push(row);
    }
    Ok(rows)
}

pub fn format_table(rows: &[AblationRow]) -> String {
    let full = rows.iter().find(|r| r.flags == Flags::FULL).and_then(|r| r.ppl);
    let mut s = format!("{:<12} {:>10} {:>20} {:>10}\n", "model", "params", "valid ppl", "delta");
    for r in rows {
        let delta = match (r.ppl, full) {
            (Some(p), Some(f)) => format!("{:+.4}", p - f),
            _ => "-".into(),
        };
        let _ = writeln!(s, "{:<12} {:>10} {:>20} {:>10}", r.flags.label(), r.params, r.outcome(), delta);
    }
    s
}
