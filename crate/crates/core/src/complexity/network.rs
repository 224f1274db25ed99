use serde::{Deserialize, Serialize};

use super::{count_conv, count_dynamic_conv, ratios, ComplexityReport, FlopConvention, LayerCost, LayerKind, Totals};
use crate::error::Result;
use crate::layers::MoePlacement;
use crate::models::{CnnDescriptor, DynamicConvDescriptor, LlamaDescriptor, ModelDescriptor};

/// Counts every convolution of the descriptor's plan and the classifier.
/// Pooling, activations and residual additions are not counted.
pub fn count_cnn(desc: &CnnDescriptor, convention: FlopConvention) -> Result<ComplexityReport> {
    let layers = cnn_layers(desc)?;
    let mut report = ComplexityReport::new(desc.name.clone(), layers, convention);
    if desc.dynamic.is_some() {
        let base = ComplexityReport::new(
            desc.name.clone(),
            cnn_layers(&desc.clone().without_dynamic())?,
            convention,
        );
        report.ratios = Some(totals_ratio(&base.totals, &report.totals)?);
        report.baseline = Some(base.totals);
    }
    Ok(report)
}

fn cnn_layers(desc: &CnnDescriptor) -> Result<Vec<LayerCost>> {
    let plan = desc.plan()?;
    let mut layers = Vec::with_capacity(plan.sites.len() + 1);
    for site in &plan.sites {
        let (h, w) = site.out_hw;
        let cost = match site.dynamic {
            Some(m) => {
                let dynamic = count_dynamic_conv(&site.spec, m, h, w)?;
                let r = ratios(&count_conv(&site.spec.with_bias(false), h, w), &dynamic)?;
                let mut d = dynamic;
                d.notes.push_str(&format!(
                    "; r_param {}; r_flops {}",
                    r.r_param, r.r_flops
                ));
                d
            }
            None => count_conv(&site.spec, h, w),
        };
        layers.push(cost.named(site.name.clone()));
    }
    let (c, n) = (plan.classifier_in as u64, plan.num_classes as u64);
    layers.push(LayerCost {
        name: "classifier".into(),
        kind: LayerKind::Linear,
        params_weights: c * n,
        params_biases: n,
        flops: c * n,
        flops_biases: n,
        conv: None,
        notes: String::new(),
    });
    Ok(layers)
}

fn totals_ratio(base: &Totals, with: &Totals) -> Result<super::RatioReport> {
    let as_cost = |t: &Totals| LayerCost {
        name: String::new(),
        kind: LayerKind::Linear,
        params_weights: t.params_weights,
        params_biases: t.params_biases,
        flops: t.flops_weights,
        flops_biases: t.flops_biases,
        conv: None,
        notes: String::new(),
    };
    ratios(&as_cost(base), &as_cost(with))
}

/// Context used for transformer FLOPs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerFlops {
    /// Positions each generated token attends over.
    pub prompt_len: usize,
    /// Generated tokens counted.
    pub response_len: usize,
}

impl TransformerFlops {
    /// Full-context prompt and a single output token.
    pub fn for_descriptor(desc: &LlamaDescriptor) -> Self {
        Self {
            prompt_len: desc.max_seq_len,
            response_len: 1,
        }
    }
}

/// Exact parameter totals and FLOPs for `response_len` generated tokens.
///
/// Per layer: attention `4·d²`, SwiGLU `3·d·d_ff` (with MoE, the chosen
/// projection is replicated `N` times and a `d·N` router added), two RMSNorm
/// gains. Plus embedding `V·d`, final norm and an untied `d·V` head.
/// Per-token FLOPs are the active matmul MACs (one expert per token) plus the
/// attention context term `2·prompt_len·d` per layer; embedding lookups and
/// norms are not counted.
pub fn count_transformer(
    desc: &LlamaDescriptor,
    flops: TransformerFlops,
    convention: FlopConvention,
) -> Result<ComplexityReport> {
    desc.validate()?;
    let d = desc.d_model as u64;
    let ff = desc.d_ff as u64;
    let v = desc.vocab_size as u64;
    let tokens = flops.response_len as u64;
    let ctx = flops.prompt_len as u64;
    let norm = |name: String| LayerCost {
        name,
        kind: LayerKind::Norm,
        params_weights: 0,
        params_biases: d,
        flops: 0,
        flops_biases: 0,
        conv: None,
        notes: "rms norm gain".into(),
    };
    let mut layers = vec![LayerCost {
        name: "embedding".into(),
        kind: LayerKind::Embedding,
        params_weights: v * d,
        params_biases: 0,
        flops: 0,
        flops_biases: 0,
        conv: None,
        notes: "lookup, no FLOPs".into(),
    }];
    for i in 0..desc.n_layers {
        layers.push(norm(format!("layers.{i}.attn_norm")));
        layers.push(LayerCost {
            name: format!("layers.{i}.attention"),
            kind: LayerKind::Attention,
            params_weights: 4 * d * d,
            params_biases: 0,
            flops: tokens * (4 * d * d + 2 * ctx * d),
            flops_biases: 0,
            conv: None,
            notes: format!("projections 4*d^2; context term 2*{ctx}*d"),
        });
        layers.push(norm(format!("layers.{i}.ffn_norm")));
        match &desc.moe {
            None => layers.push(LayerCost {
                name: format!("layers.{i}.ffn"),
                kind: LayerKind::Ffn,
                params_weights: 3 * d * ff,
                params_biases: 0,
                flops: tokens * 3 * d * ff,
                flops_biases: 0,
                conv: None,
                notes: "swiglu gate/up/down".into(),
            }),
            Some(moe) => {
                let n = moe.n_experts as u64;
                layers.push(LayerCost {
                    name: format!("layers.{i}.ffn"),
                    kind: LayerKind::MoeFfn,
                    params_weights: (2 + n) * d * ff,
                    params_biases: 0,
                    flops: tokens * 3 * d * ff,
                    flops_biases: 0,
                    conv: None,
                    notes: format!(
                        "{} replicated x{n}; top-1 so one expert active",
                        placement_name(moe.placement)
                    ),
                });
                layers.push(LayerCost {
                    name: format!("layers.{i}.router"),
                    kind: LayerKind::Router,
                    params_weights: d * n,
                    params_biases: 0,
                    flops: tokens * d * n,
                    flops_biases: 0,
                    conv: None,
                    notes: String::new(),
                });
            }
        }
    }
    layers.push(norm("final_norm".into()));
    layers.push(LayerCost {
        name: "lm_head".into(),
        kind: LayerKind::LmHead,
        params_weights: d * v,
        params_biases: 0,
        flops: tokens * d * v,
        flops_biases: 0,
        conv: None,
        notes: "untied".into(),
    });
    let mut report = ComplexityReport::new(desc.name.clone(), layers, convention);
    if desc.moe.is_some() {
        let mut dense = desc.clone();
        dense.moe = None;
        let base = count_transformer(&dense, flops, convention)?;
        report.ratios = Some(totals_ratio(&base.totals, &report.totals)?);
        report.baseline = Some(base.totals);
    }
    Ok(report)
}

fn placement_name(p: MoePlacement) -> &'static str {
    match p {
        MoePlacement::Gate => "gate",
        MoePlacement::UpProj => "up_proj",
        MoePlacement::DownProj => "down_proj",
    }
}

fn count_single_dynamic(desc: &DynamicConvDescriptor, convention: FlopConvention) -> Result<ComplexityReport> {
    let (h, w) = desc.output_size()?;
    let dynamic = count_dynamic_conv(&desc.conv, desc.m, h, w)?.named(desc.name.clone());
    let standard = count_conv(&desc.conv, h, w).named(format!("{} (standard)", desc.name));
    let r = ratios(&standard, &dynamic)?;
    let mut report = ComplexityReport::new(desc.name.clone(), vec![dynamic], convention);
    report.baseline = Some(Totals::of(&[standard.scaled(convention)]));
    report.ratios = Some(r);
    Ok(report)
}

/// Dispatches on the descriptor type. Transformers use
/// [`TransformerFlops::for_descriptor`] unless `flops` is given.
pub fn count_descriptor(
    desc: &ModelDescriptor,
    convention: FlopConvention,
    flops: Option<TransformerFlops>,
) -> Result<ComplexityReport> {
    match desc {
        ModelDescriptor::Cnn(d) => count_cnn(d, convention),
        ModelDescriptor::Llama(d) => {
            count_transformer(d, flops.unwrap_or_else(|| TransformerFlops::for_descriptor(d)), convention)
        }
        ModelDescriptor::DynamicConv(d) => count_single_dynamic(d, convention),
    }
}
