//! Standard, dynamic and re-parameterized convolutions, Ghost modules, and the
//! SwiGLU / sparse-MoE feed-forward blocks.
//!
//! Layers hold [`ParamId`]s into a [`ParamStore`]; a forward pass takes the
//! store bound to a tape ([`Bound`]).

mod conv;
mod dynamic;
mod ffn;
mod ghost;
mod params;
mod repconv;

pub use conv::{Conv2d, ConvSpec};
pub use dynamic::{DynamicConvLayer, RouterMlp};
pub use ffn::{
    expert_capacity, load_balancing_loss, swiglu_ffn_forward, top1, Dispatch, MoEFfnLayer,
    MoeConfig, MoeOutput, MoePlacement, RoutingStats, SwiGluFfn,
};
pub use ghost::{GhostModule, CHEAP_KERNEL};
pub use params::{check_param_gradients, Bound, ParamId, ParamStore};
pub use repconv::{RepConvLayer, RepMode};

use crate::error::Result;
use crate::rng::Prng;
use crate::tensor::Var;

/// A convolution site that is either static or dynamic.
#[derive(Clone, Debug)]
pub enum ConvUnit {
    Static(Conv2d),
    Dynamic(DynamicConvLayer),
}

impl ConvUnit {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        spec: ConvSpec,
        dynamic_experts: Option<usize>,
        rng: &mut Prng,
    ) -> Result<Self> {
        Ok(match dynamic_experts {
            Some(m) => ConvUnit::Dynamic(DynamicConvLayer::new(store, name, spec, m, rng)?),
            None => ConvUnit::Static(Conv2d::new(store, name, spec, rng)?),
        })
    }

    pub fn spec(&self) -> &ConvSpec {
        match self {
            ConvUnit::Static(c) => &c.spec,
            ConvUnit::Dynamic(d) => &d.spec,
        }
    }

    pub fn experts(&self) -> Option<usize> {
        match self {
            ConvUnit::Static(_) => None,
            ConvUnit::Dynamic(d) => Some(d.m),
        }
    }

    pub fn forward_traced<'t>(
        &self,
        params: &Bound<'t>,
        x: Var<'t>,
        trace: &mut Vec<Var<'t>>,
    ) -> Result<Var<'t>> {
        match self {
            ConvUnit::Static(c) => c.forward(params, x),
            ConvUnit::Dynamic(d) => {
                let (y, alpha) = d.forward_with_coefficients(params, x)?;
                trace.push(alpha);
                Ok(y)
            }
        }
    }
}
