use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::RoutingStats;

/// Routing summary of one MoE layer at one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRouting {
    pub layer: usize,
    pub expert_load: Vec<usize>,
    pub dropped: usize,
    /// Max/min expert load; absent when some expert received no tokens.
    pub load_imbalance: Option<f64>,
}

impl LayerRouting {
    pub fn from_stats(layer: usize, s: &RoutingStats) -> Self {
        let r = s.load_imbalance();
        Self {
            layer,
            expert_load: s.expert_load.clone(),
            dropped: s.dropped,
            load_imbalance: r.is_finite().then_some(r),
        }
    }
}

/// One JSON-lines record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    /// Optimised loss.
    pub loss: f64,
    /// Cross-entropy component (LM runs).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ce: Option<f64>,
    /// Mean per-layer auxiliary loss, before weighting (MoE runs).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aux: Option<f64>,
    /// Smallest dynamic-convolution coefficient in the batch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub routing: Vec<LayerRouting>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_ce: Option<f64>,
    /// Accuracy over the full training set (classifier runs).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub model: String,
    pub task: String,
    pub config_hash: String,
    pub seed: u64,
    pub steps: usize,
    /// Mean optimised loss over the last tenth of the steps.
    pub final_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_ce: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_aux: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_accuracy: Option<f64>,
    /// Smallest dynamic-convolution coefficient seen in training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_min: Option<f64>,
    /// Expert loads summed over the last tenth of the steps, per MoE layer.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub final_expert_load: Vec<Vec<usize>>,
    pub params: u64,
    /// FLOPs per sample (CNN) or per token (LM), one MAC = one FLOP.
    pub flops: u64,
}

impl RunSummary {
    /// Median over layers of max/min expert load at the end of training;
    /// infinite when some expert in that layer received nothing.
    pub fn final_load_imbalance(&self) -> Option<f64> {
        let mut ratios: Vec<f64> = self
            .final_expert_load
            .iter()
            .map(|l| {
                let max = *l.iter().max().unwrap_or(&0) as f64;
                let min = *l.iter().min().unwrap_or(&0) as f64;
                if min == 0.0 {
                    f64::INFINITY
                } else {
                    max / min
                }
            })
            .collect();
        if ratios.is_empty() {
            return None;
        }
        ratios.sort_by(f64::total_cmp);
        Some(ratios[ratios.len() / 2])
    }
}

/// Everything a run produced. Wall-clock time is kept out of the
/// serialized documents so identical runs give identical files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub summary: RunSummary,
    /// Optimised loss at every step.
    pub loss_trace: Vec<f64>,
    pub epochs: Vec<EpochLog>,
    #[serde(skip)]
    pub logs: Vec<StepLog>,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

pub const RUN_LOG_FILE: &str = "run.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

impl RunRecord {
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for log in &self.logs {
            serde_json::to_writer(&mut out, log)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Writes `run.jsonl` and `summary.json` into `dir`.
    pub fn write_to_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut jsonl = Vec::new();
        self.write_jsonl(&mut jsonl)?;
        std::fs::write(dir.join(RUN_LOG_FILE), jsonl)?;
        std::fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    /// Reads a `summary.json` (or a directory containing one).
    pub fn read_summary(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = if path.is_dir() { path.join(SUMMARY_FILE) } else { path.to_path_buf() };
        let text = std::fs::read_to_string(&file)?;
        serde_json::from_str(&text).map_err(|e| Error::Validation {
            location: file.display().to_string(),
            message: e.to_string(),
        })
    }
}
