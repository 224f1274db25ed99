use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{FlopConvention, LayerCost, RatioReport};
use crate::error::Result;

/// Column contract of the CSV table.
pub const CSV_COLUMNS: [&str; 6] = ["layer", "kind", "params_weights", "params_biases", "flops", "notes"];

/// Summed counts over a set of layers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Totals {
    pub params: u64,
    pub params_weights: u64,
    pub params_biases: u64,
    /// Bias-free plus bias FLOPs.
    pub flops: u64,
    pub flops_weights: u64,
    pub flops_biases: u64,
}

impl Totals {
    pub fn of(layers: &[LayerCost]) -> Self {
        let mut t = Totals::default();
        for l in layers {
            t.params_weights += l.params_weights;
            t.params_biases += l.params_biases;
            t.flops_weights += l.flops;
            t.flops_biases += l.flops_biases;
        }
        t.params = t.params_weights + t.params_biases;
        t.flops = t.flops_weights + t.flops_biases;
        t
    }
}

/// Per-layer and total counts of a model, optionally compared against a
/// baseline (the same model without dynamic convolutions or experts).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub model: String,
    pub flop_convention: FlopConvention,
    pub layers: Vec<LayerCost>,
    pub totals: Totals,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<Totals>,
    /// Bias-free ratios against the baseline.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratios: Option<RatioReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

impl ComplexityReport {
    /// Report over `layers` counted in MACs, rescaled to `convention`.
    pub fn new(model: impl Into<String>, layers: Vec<LayerCost>, convention: FlopConvention) -> Self {
        let layers: Vec<LayerCost> = layers.into_iter().map(|l| l.scaled(convention)).collect();
        Self {
            model: model.into(),
            flop_convention: convention,
            totals: Totals::of(&layers),
            layers,
            baseline: None,
            ratios: None,
            flags: Vec::new(),
        }
    }

    pub fn layer(&self, name: &str) -> Option<&LayerCost> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per layer, then a `total` row. `flops` includes bias FLOPs;
    /// the bias share is restated in `notes`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_COLUMNS)?;
        for l in &self.layers {
            let mut notes = l.notes.clone();
            if l.flops_biases > 0 {
                if !notes.is_empty() {
                    notes.push_str("; ");
                }
                notes.push_str(&format!("bias flops {}", l.flops_biases));
            }
            w.write_record([
                l.name.clone(),
                l.kind.to_string(),
                l.params_weights.to_string(),
                l.params_biases.to_string(),
                l.total_flops().to_string(),
                notes,
            ])?;
        }
        let t = &self.totals;
        w.write_record([
            "total".to_string(),
            String::new(),
            t.params_weights.to_string(),
            t.params_biases.to_string(),
            t.flops.to_string(),
            format!("params {}; {}", t.params, self.flop_convention),
        ])?;
        w.flush()?;
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv writer emits utf-8"))
    }

    /// Short human-readable summary.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("model: {}\n", self.model));
        let width = self.layers.iter().map(|l| l.name.len()).max().unwrap_or(5).max(5);
        for l in &self.layers {
            s.push_str(&format!(
                "  {:<width$}  {:<14} params {:>14}  flops {:>16}\n",
                l.name,
                l.kind.to_string(),
                l.params(),
                l.total_flops(),
            ));
        }
        let t = &self.totals;
        s.push_str(&format!(
            "total params: {} ({} weights + {} biases/norms)\n",
            t.params, t.params_weights, t.params_biases
        ));
        s.push_str(&format!(
            "total flops ({}): {} ({} bias-free)\n",
            self.flop_convention, t.flops, t.flops_weights
        ));
        if let Some(r) = &self.ratios {
            s.push_str(&format!("r_param: {}\n", r.r_param));
            s.push_str(&format!("r_flops: {}\n", r.r_flops));
            if let Some(a) = r.r_param_approx {
                s.push_str(&format!("r_param approx (1/K^2 + M): {a:.6}\n"));
            }
            if let Some(a) = r.r_flops_approx {
                s.push_str(&format!("r_flops approx: {a:.6}\n"));
            }
            for f in &r.flags {
                s.push_str(&format!("flag: {f}\n"));
            }
        }
        for f in &self.flags {
            s.push_str(&format!("flag: {f}\n"));
        }
        s
    }
}
