use super::conv::{Conv2d, ConvSpec};
use super::params::{Bound, ParamStore};
use super::ConvUnit;
use crate::error::{Error, Result};
use crate::rng::Prng;
use crate::tensor::Var;

/// Kernel of the depthwise cheap operation.
pub const CHEAP_KERNEL: usize = 3;

/// Half of the output channels come from a pointwise "primary" convolution;
/// the other half from a depthwise 3x3 "cheap" convolution of the primary
/// output. The two halves are concatenated along channels.
#[derive(Clone, Debug)]
pub struct GhostModule {
    pub c_in: usize,
    pub c_out: usize,
    pub primary: ConvUnit,
    pub cheap: Conv2d,
    pub relu: bool,
}

impl GhostModule {
    /// `dynamic_experts = Some(m)` makes the primary pointwise convolution a
    /// dynamic convolution with `m` experts.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        relu: bool,
        has_bias: bool,
        dynamic_experts: Option<usize>,
        rng: &mut Prng,
    ) -> Result<Self> {
        if c_out == 0 || c_out % 2 != 0 {
            return Err(Error::Validation {
                location: name.to_string(),
                message: format!("ghost module output channels must be even, got {c_out}"),
            });
        }
        let half = c_out / 2;
        let primary = ConvUnit::new(
            store,
            &format!("{name}.primary"),
            Self::primary_spec(c_in, c_out, has_bias),
            dynamic_experts,
            rng,
        )?;
        let cheap = Conv2d::new(
            store,
            &format!("{name}.cheap"),
            Self::cheap_spec(c_out, has_bias),
            rng,
        )?;
        debug_assert_eq!(cheap.spec.c_out, half);
        Ok(Self {
            c_in,
            c_out,
            primary,
            cheap,
            relu,
        })
    }

    pub fn primary_spec(c_in: usize, c_out: usize, has_bias: bool) -> ConvSpec {
        ConvSpec::new(c_in, c_out / 2, 1).with_bias(has_bias)
    }

    pub fn cheap_spec(c_out: usize, has_bias: bool) -> ConvSpec {
        ConvSpec::depthwise(c_out / 2, CHEAP_KERNEL).with_bias(has_bias)
    }

    pub fn forward<'t>(&self, params: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        self.forward_traced(params, x, &mut Vec::new())
    }

    /// As [`GhostModule::forward`], pushing dynamic-conv coefficients to `trace`.
    pub fn forward_traced<'t>(
        &self,
        params: &Bound<'t>,
        x: Var<'t>,
        trace: &mut Vec<Var<'t>>,
    ) -> Result<Var<'t>> {
        let mut primary = self.primary.forward_traced(params, x, trace)?;
        if self.relu {
            primary = primary.relu();
        }
        let mut cheap = self.cheap.forward(params, primary)?;
        if self.relu {
            cheap = cheap.relu();
        }
        x.tape().concat(&[primary, cheap], 1)
    }
}
