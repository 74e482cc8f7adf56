//! The decoupled two-step training procedure: pseudo-label with a frozen
//! teacher, distill the student on those labels, then fine-tune on ground
//! truth. Also the multi-teacher aggregation rules and the experiment
//! harnesses built on top.

mod aggregate;
mod train;

pub mod experiments;

pub use aggregate::{aggregate, AggregateMode};
pub use train::{
    detect_dataset, gt_sets, pseudo_label, run_stage, subsample_fraction, val_map50, StageKind,
    StageSetup, EVAL_SCORE_THRESH,
};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Knobs shared by every training stage. Stage-specific epoch defaults
/// (teacher 60, distillation 40, fine-tuning 30) live in the CLI; this
/// default is the fine-tuning one.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Score threshold for keeping teacher detections as pseudo labels.
    pub score_thresh: f64,
    pub nms_iou: f64,
    pub ignore_thresh: f64,
    pub use_feature_term: bool,
    pub label_fraction: f64,
    pub augment_flip: bool,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            lr: 3e-3,
            seed: 0,
            score_thresh: 0.3,
            nms_iou: 0.5,
            ignore_thresh: 0.5,
            use_feature_term: true,
            label_fraction: 1.0,
            augment_flip: true,
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.epochs > 0
            && self.batch_size > 0
            && self.lr >= 0.0
            && (0.0..=1.0).contains(&self.score_thresh)
            && (0.0..=1.0).contains(&self.nms_iou)
            && (0.0..=1.0).contains(&self.ignore_thresh)
            && self.label_fraction > 0.0
            && self.label_fraction <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("train_config", format!("{:?}", self)))
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        TrainConfig {
            seed,
            ..self.clone()
        }
    }
}

/// One epoch of stage metrics. `l_feat` is absent whenever the feature
/// term is disabled.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub l_feat: Option<f64>,
    pub l_box: f64,
    pub l_conf: f64,
    pub l_class: f64,
    pub val_map50: f64,
}

/// Append-only record of one training run. The best epoch's parameters are
/// the ones the stage returns.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub stage: String,
    pub config: TrainConfig,
    pub epochs: Vec<EpochRow>,
    pub final_map50: f64,
    pub best_map50: f64,
    pub best_epoch: usize,
    pub wall_clock_secs: f64,
    pub train_hash: String,
    pub val_hash: String,
}

impl RunRecord {
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("epoch,L_F,L_box,L_conf,L_class,val_mAP50\n");
        for row in &self.epochs {
            let lf = row.l_feat.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                row.epoch, lf, row.l_box, row.l_conf, row.l_class, row.val_map50
            ));
        }
        out
    }

    /// Write `config.json` and `metrics.csv` into a run directory.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cpath = dir.join("config.json");
        let payload = serde_json::json!({
            "stage": self.stage,
            "config": self.config,
            "best_map50": self.best_map50,
            "best_epoch": self.best_epoch,
            "final_map50": self.final_map50,
            "train_hash": self.train_hash,
            "val_hash": self.val_hash,
        });
        std::fs::write(&cpath, serde_json::to_string_pretty(&payload).unwrap())
            .map_err(|e| Error::io(&cpath, e))?;
        let mpath = dir.join("metrics.csv");
        std::fs::write(&mpath, self.metrics_csv()).map_err(|e| Error::io(&mpath, e))?;
        Ok(())
    }
}

/// A row of `sweep.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub fraction: f64,
    pub method: String,
    pub seed: u64,
    pub map50: f64,
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut out = String::from("fraction,method,seed,mAP50\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.fraction, r.method, r.seed, r.map50));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
