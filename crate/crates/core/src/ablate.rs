//! The four encoder/decoder ablation runs under one seed and one data stream.

use std::fmt::Write as _;

use crate::config::RunConfig;
use crate::data::SamplePair;
use crate::error::{Error, Result};
use crate::metrics::{metrics, MetricSet};
use crate::train::{evaluate, train, EpochStats};

/// `(csdw_enabled, led_enabled)` in table order: baseline first, full model last.
pub const VARIANTS: [(bool, bool); 4] = [(false, false), (true, false), (false, true), (true, true)];

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub csdw: bool,
    pub led: bool,
    pub best_epoch: usize,
    pub metrics: MetricSet,
    pub data_digest: [u8; 32],
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

fn mark(on: bool) -> &'static str {
    if on {
        "√"
    } else {
        "×"
    }
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("CSDW,LED,IoU\n");
        for r in &self.rows {
            writeln!(out, "{},{},{:.2}", mark(r.csdw), mark(r.led), r.metrics.iou * 100.0).unwrap();
        }
        out
    }

    fn find(&self, csdw: bool, led: bool) -> Option<&AblationRow> {
        self.rows.iter().find(|r| (r.csdw, r.led) == (csdw, led))
    }

    /// Full-model IoU minus baseline IoU.
    pub fn iou_gap(&self) -> Option<f64> {
        Some(self.find(true, true)?.metrics.iou - self.find(false, false)?.metrics.iou)
    }

    pub fn data_parity(&self) -> bool {
        self.rows.windows(2).all(|w| w[0].data_digest == w[1].data_digest)
    }
}

/// Train every variant of `base` and score the best checkpoint of each on `eval_set`.
pub fn ablate(
    base: &RunConfig,
    train_set: &[SamplePair],
    val_set: &[SamplePair],
    eval_set: &[SamplePair],
    mut on_epoch: impl FnMut(&RunConfig, &EpochStats),
) -> Result<AblationReport> {
    let mut rows = Vec::with_capacity(VARIANTS.len());
    for (csdw, led) in VARIANTS {
        let mut cfg = base.clone();
        cfg.model.csdw_enabled = csdw;
        cfg.model.led_enabled = led;
        let out = train(&cfg, train_set, val_set, |e| on_epoch(&cfg, e))?;
        let model = out.best.model()?;
        let (counts, _) = evaluate(&model, eval_set, &cfg.infer)?;
        rows.push(AblationRow {
            csdw,
            led,
            best_epoch: out.best.best_epoch,
            metrics: metrics(&counts)?,
            data_digest: out.data_digest,
        });
    }
    let report = AblationReport { rows };
    if !report.data_parity() {
        return Err(Error::InvalidArgument("ablation runs consumed different training streams".into()));
    }
    Ok(report)
}
