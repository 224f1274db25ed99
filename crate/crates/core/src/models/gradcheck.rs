//! Finite-difference verification of a model's gradients, summarised per
//! layer.
//!
//! Convolutional networks are checked one layer at a time: every convolution
//! site (and the classifier) runs in isolation on a random input of its own
//! shape, covering its parameters and its input gradient. A whole ReLU
//! network is a poor finite-difference subject: thousands of activations sit
//! near their kinks, so no step size is both kink-free and above rounding
//! noise. Language models are smooth away from routing ties and are checked
//! end to end.

use serde::Serialize;

use super::Model;
use crate::error::Result;
use crate::layers::{Bound, ParamId, ParamStore};
use crate::rng::Prng;
use crate::tensor::{check_gradients_at, GradReport, OpKind, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckOptions {
    /// Seeds for the probe inputs and the sampled coordinates; one pass each.
    pub seeds: Vec<u64>,
    pub tolerance: f64,
    /// Central-difference step; `None` picks [`default_step`].
    pub step: Option<f64>,
    /// Step for layer inputs. Input coordinates skipped by a strided
    /// convolution reach the output only through the router's global
    /// average, which divides their effect by H·W; a wider step keeps that
    /// small gradient above rounding noise while moving the router input by
    /// only `input_step / (H·W)`.
    pub input_step: f64,
    /// Half-width of the seeded uniform jitter added to every parameter
    /// before checking, so zero-initialised biases and routers are checked
    /// at a generic point.
    pub jitter: f64,
    /// Coordinates sampled per tensor and seed.
    pub coords_per_tensor: usize,
    /// Corrupts the backward rule of this op (negative control).
    pub fault: Option<OpKind>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            tolerance: 1e-5,
            step: None,
            input_step: 1e-3,
            jitter: 0.05,
            coords_per_tensor: 6,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerGradCheck {
    pub layer: String,
    /// Checked tensors: parameter names, plus `input` for isolated layers.
    pub tensors: Vec<String>,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Tensor holding the worst coordinate.
    pub worst_tensor: String,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelGradCheck {
    pub model: String,
    pub seeds: Vec<u64>,
    pub tolerance: f64,
    pub step: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fault: Option<String>,
    pub layers: Vec<LayerGradCheck>,
    pub passed: bool,
}

impl ModelGradCheck {
    pub fn failing(&self) -> impl Iterator<Item = &LayerGradCheck> {
        self.layers.iter().filter(|l| !l.passed)
    }
}

/// Every checked function is smooth away from isolated kinks (an isolated
/// convolution is linear in its weights apart from the router), so a wide
/// step keeps rounding noise far below the tolerance.
pub fn default_step(_model: &Model) -> f64 {
    1e-4
}

/// `[b, c, h, w]` probe images with a per-(sample, channel) offset, like
/// post-activation feature maps, so pooled router inputs are not near zero.
fn feature_maps(rng: &mut Prng, b: usize, c: usize, h: usize, w: usize) -> Tensor {
    let offsets: Vec<f64> = (0..b * c).map(|_| rng.normal()).collect();
    let mut x = rng.normal_tensor([b, c, h, w], 1.0);
    for (i, v) in x.data_mut().iter_mut().enumerate() {
        *v += offsets[i / (h * w)];
    }
    x
}

/// Layer a parameter tensor belongs to: dynamic-convolution routers and
/// expert banks, and the per-expert MoE projections, fold into their owner.
pub fn layer_of(param: &str) -> &str {
    for marker in [".router", ".experts", ".expert_biases"] {
        if let Some(i) = param.find(marker) {
            return &param[..i];
        }
    }
    match param.rsplit_once('.') {
        Some((layer, leaf))
            if matches!(leaf, "weight" | "bias" | "wq" | "wk" | "wv" | "wo" | "gate" | "up" | "down") =>
        {
            layer
        }
        _ => param,
    }
}

/// Accumulates per-layer results over tensors and seeds, in first-seen order.
#[derive(Default)]
struct Collector {
    layers: Vec<LayerGradCheck>,
}

impl Collector {
    fn add(&mut self, layer: &str, tensor: &str, report: &GradReport) {
        let idx = match self.layers.iter().position(|l| l.layer == layer) {
            Some(i) => i,
            None => {
                self.layers.push(LayerGradCheck {
                    layer: layer.to_string(),
                    tensors: Vec::new(),
                    checked: 0,
                    max_rel_error: 0.0,
                    worst_tensor: tensor.to_string(),
                    passed: true,
                });
                self.layers.len() - 1
            }
        };
        let entry = &mut self.layers[idx];
        if !entry.tensors.iter().any(|t| t == tensor) {
            entry.tensors.push(tensor.to_string());
        }
        entry.checked += report.checked;
        if report.max_rel_error > entry.max_rel_error {
            entry.max_rel_error = report.max_rel_error;
            entry.worst_tensor = tensor.to_string();
        }
    }
}

fn sample_coords(n: usize, limit: usize, rng: &Prng, label: &str) -> Vec<usize> {
    let mut coords: Vec<usize> = (0..n).collect();
    if limit < n {
        rng.split(label).shuffle(&mut coords);
        coords.truncate(limit);
        coords.sort_unstable();
    }
    coords
}

/// Contracts `out` with a fixed random tensor so every output coordinate
/// carries gradient.
fn readout<'t>(tape: &'t Tape, out: Var<'t>, rng: &Prng) -> Result<Var<'t>> {
    let r = rng.split("readout").normal_tensor(out.shape(), 1.0);
    Ok(out.mul(tape.constant(r))?.sum())
}

struct Checker<'a> {
    opts: &'a GradCheckOptions,
    step: f64,
    rng: Prng,
}

impl Checker<'_> {
    /// Checks the parameters `ids` of `store` and, when given, the input `x`
    /// of a function `f(tape, params, x)`.
    fn run<F>(
        &self,
        out: &mut Collector,
        layer: &str,
        store: &ParamStore,
        ids: &[ParamId],
        x: Option<&Tensor>,
        f: F,
    ) -> Result<()>
    where
        F: for<'t> Fn(&'t Tape, &Bound<'t>, Option<Var<'t>>) -> Result<Var<'t>>,
    {
        let fault = self.opts.fault;
        let arm = |tape: &Tape| {
            if let Some(op) = fault {
                tape.inject_fault(op);
            }
        };
        for &id in ids {
            let name = store.name(id);
            let coords = sample_coords(store.get(id).numel(), self.opts.coords_per_tensor, &self.rng, name);
            let report = check_gradients_at(
                |tape, v| {
                    arm(tape);
                    let p = store.bind_with(tape, id, v);
                    let input = x.map(|x| tape.constant(x.clone()));
                    f(tape, &p, input)
                },
                store.get(id),
                self.step,
                &coords,
            )?;
            out.add(layer, name, &report);
        }
        if let Some(x) = x {
            let coords = sample_coords(x.numel(), self.opts.coords_per_tensor, &self.rng, &format!("{layer}:input"));
            let report = check_gradients_at(
                |tape, v| {
                    arm(tape);
                    let p = store.bind_frozen(tape);
                    f(tape, &p, Some(v))
                },
                x,
                self.opts.input_step,
                &coords,
            )?;
            out.add(layer, "input", &report);
        }
        Ok(())
    }
}

pub fn gradcheck_model(model: &Model, opts: &GradCheckOptions) -> Result<ModelGradCheck> {
    let step = opts.step.unwrap_or_else(|| default_step(model));
    let mut out = Collector::default();
    for &seed in &opts.seeds {
        let rng = Prng::new(seed).split("gradcheck");
        let mut jittered = model.clone();
        let mut jitter = rng.split("jitter");
        let store = jittered.params_mut();
        let all: Vec<ParamId> = store.ids().collect();
        for &id in &all {
            for v in store.get_mut(id).data_mut() {
                *v += jitter.uniform(-opts.jitter, opts.jitter);
            }
        }
        let checker = Checker {
            opts,
            step,
            rng: rng.split("coords"),
        };
        let mut inputs = rng.split("inputs");
        match &jittered {
            Model::Cnn(m) => {
                let store = &m.params;
                for site in &m.plan.sites {
                    let ids: Vec<ParamId> = all
                        .iter()
                        .copied()
                        .filter(|&id| layer_of(store.name(id)) == site.name)
                        .collect();
                    let x = feature_maps(&mut inputs, 2, site.spec.c_in, site.in_hw.0, site.in_hw.1);
                    checker.run(&mut out, &site.name, store, &ids, Some(&x), |tape, p, x| {
                        let y = m.site_forward(&site.name, p, x.expect("input"))?;
                        readout(tape, y, &rng.split(&site.name))
                    })?;
                }
                let ids: Vec<ParamId> = all
                    .iter()
                    .copied()
                    .filter(|&id| layer_of(store.name(id)) == "classifier")
                    .collect();
                let x = inputs.normal_tensor([2, m.plan.classifier_in], 1.0);
                checker.run(&mut out, "classifier", store, &ids, Some(&x), |tape, p, x| {
                    let y = m.classifier_forward(p, x.expect("input"))?;
                    readout(tape, y, &rng.split("classifier"))
                })?;
            }
            Model::DynamicConv(m) => {
                let d = &m.descriptor;
                let x = feature_maps(&mut inputs, 2, d.conv.c_in, d.input_size[0], d.input_size[1]);
                checker.run(&mut out, &d.name, &m.params, &all, Some(&x), |tape, p, x| {
                    let y = m.forward(p, x.expect("input"))?;
                    readout(tape, y, &rng)
                })?;
            }
            Model::Lm(m) => {
                let d = &m.descriptor;
                let len = d.max_seq_len.min(8);
                let seqs: Vec<Vec<usize>> = (0..2)
                    .map(|_| (0..len).map(|_| inputs.below(d.vocab_size)).collect())
                    .collect();
                let mut names: Vec<&str> = Vec::new();
                for &id in &all {
                    let l = layer_of(m.params.name(id));
                    if !names.contains(&l) {
                        names.push(l);
                    }
                }
                for layer in names {
                    let ids: Vec<ParamId> = all
                        .iter()
                        .copied()
                        .filter(|&id| layer_of(m.params.name(id)) == layer)
                        .collect();
                    checker.run(&mut out, layer, &m.params, &ids, None, |tape, p, _| {
                        let y = m.forward(p, &seqs)?.logits;
                        readout(tape, y, &rng)
                    })?;
                }
            }
        }
    }
    let mut layers = out.layers;
    for l in &mut layers {
        l.passed = l.max_rel_error <= opts.tolerance;
    }
    Ok(ModelGradCheck {
        model: model.descriptor().name().to_string(),
        seeds: opts.seeds.clone(),
        tolerance: opts.tolerance,
        step,
        fault: opts.fault.map(|op| op.to_string()),
        passed: layers.iter().all(|l| l.passed),
        layers,
    })
}
