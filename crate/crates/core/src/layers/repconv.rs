//! Multi-branch convolution that folds into a single kernel for inference.

use super::conv::ConvSpec;
use super::params::{Bound, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::rng::Prng;
use crate::tensor::{Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RepMode {
    /// `sum_b scale_b · conv2d(x, W_b)`.
    Train,
    /// `conv2d(x, folded)`.
    Folded,
}

#[derive(Clone, Debug)]
pub struct RepConvLayer {
    pub spec: ConvSpec,
    pub branches: Vec<ParamId>,
    pub branch_biases: Vec<ParamId>,
    pub branch_scales: Vec<f64>,
    folded: Option<(Tensor, Option<Tensor>)>,
}

impl RepConvLayer {
    /// One branch per entry of `scales`, all with the shape of `spec`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        spec: ConvSpec,
        scales: Vec<f64>,
        rng: &mut Prng,
    ) -> Result<Self> {
        spec.validate()?;
        if scales.is_empty() {
            return Err(Error::Validation {
                location: name.to_string(),
                message: "re-parameterized convolution needs at least one branch".into(),
            });
        }
        let mut rng = rng.split(name);
        let branches = (0..scales.len())
            .map(|b| store.add(format!("{name}.branch{b}.weight"), spec.init_weight(&mut rng)))
            .collect();
        let branch_biases = if spec.has_bias {
            (0..scales.len())
                .map(|b| store.add(format!("{name}.branch{b}.bias"), Tensor::zeros([spec.c_out])))
                .collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            spec,
            branches,
            branch_biases,
            branch_scales: scales,
            folded: None,
        })
    }

    /// Collapses the branches: `folded = sum_b scale_b · W_b` (biases likewise).
    pub fn fold_branches(&mut self, store: &ParamStore) {
        let weighted_sum = |ids: &[ParamId], shape: &[usize]| {
            let mut acc = Tensor::zeros(shape.to_vec());
            for (&id, &s) in ids.iter().zip(&self.branch_scales) {
                acc.add_assign(&store.get(id).scale(s));
            }
            acc
        };
        let weight = weighted_sum(&self.branches, &self.spec.weight_shape());
        let bias = self
            .spec
            .has_bias
            .then(|| weighted_sum(&self.branch_biases, &[self.spec.c_out]));
        self.folded = Some((weight, bias));
    }

    pub fn folded_weight(&self) -> Option<&Tensor> {
        self.folded.as_ref().map(|(w, _)| w)
    }

    /// Parameter elements remaining for inference after folding.
    pub fn inference_param_count(&self) -> Option<usize> {
        self.folded
            .as_ref()
            .map(|(w, b)| w.numel() + b.as_ref().map_or(0, Tensor::numel))
    }

    pub fn forward<'t>(&self, params: &Bound<'t>, x: Var<'t>, mode: RepMode) -> Result<Var<'t>> {
        self.spec.check_input("rep_conv", &x)?;
        let s = &self.spec;
        match mode {
            RepMode::Train => {
                let mut acc: Option<Var<'t>> = None;
                for (i, (&w, &scale)) in self.branches.iter().zip(&self.branch_scales).enumerate() {
                    let bias = self.branch_biases.get(i).map(|&b| params.get(b));
                    let y = x
                        .conv2d(params.get(w), bias, s.stride, s.padding, s.groups)?
                        .scale(scale);
                    acc = Some(match acc {
                        Some(a) => a.add(y)?,
                        None => y,
                    });
                }
                Ok(acc.expect("at least one branch"))
            }
            RepMode::Folded => {
                let (w, b) = self.folded.as_ref().ok_or_else(|| {
                    Error::State("folded mode requested before fold_branches".into())
                })?;
                let tape = x.tape();
                let bias = b.as_ref().map(|b| tape.constant(b.clone()));
                x.conv2d(tape.constant(w.clone()), bias, s.stride, s.padding, s.groups)
            }
        }
    }
}
