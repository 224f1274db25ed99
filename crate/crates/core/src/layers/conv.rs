use serde::{Deserialize, Serialize};

use super::params::{Bound, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::rng::Prng;
use crate::tensor::kernels::conv_out_extent;
use crate::tensor::{Tensor, Var};

/// Static shape of a 2-D convolution with square kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub padding: usize,
    #[serde(default = "one")]
    pub groups: usize,
    #[serde(default)]
    pub has_bias: bool,
}

fn one() -> usize {
    1
}

impl ConvSpec {
    /// Stride 1, "same" padding `k / 2`, one group, no bias.
    pub fn new(c_in: usize, c_out: usize, k: usize) -> Self {
        Self {
            c_in,
            c_out,
            k,
            stride: 1,
            padding: k / 2,
            groups: 1,
            has_bias: false,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    /// Depthwise `k x k` convolution over `channels`.
    pub fn depthwise(channels: usize, k: usize) -> Self {
        Self::new(channels, channels, k).with_groups(channels)
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |message: String| Error::Validation {
            location: "conv spec".into(),
            message,
        };
        if self.c_in == 0 || self.c_out == 0 || self.k == 0 || self.stride == 0 || self.groups == 0 {
            return Err(invalid(format!(
                "c_in, c_out, k, stride and groups must be positive: {self:?}"
            )));
        }
        if self.c_in % self.groups != 0 || self.c_out % self.groups != 0 {
            return Err(invalid(format!(
                "channels ({} in, {} out) not divisible by {} groups",
                self.c_in, self.c_out, self.groups
            )));
        }
        Ok(())
    }

    pub fn cin_per_group(&self) -> usize {
        self.c_in / self.groups
    }

    /// `[C_out, C_in / groups, K, K]`.
    pub fn weight_shape(&self) -> [usize; 4] {
        [self.c_out, self.cin_per_group(), self.k, self.k]
    }

    pub fn weight_numel(&self) -> usize {
        self.weight_shape().iter().product()
    }

    pub fn bias_numel(&self) -> usize {
        if self.has_bias {
            self.c_out
        } else {
            0
        }
    }

    /// Output spatial size for an `h x w` input.
    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        Some((
            conv_out_extent(h, self.k, self.stride, self.padding)?,
            conv_out_extent(w, self.k, self.stride, self.padding)?,
        ))
    }

    pub(crate) fn check_input(&self, op: &'static str, x: &Var<'_>) -> Result<()> {
        let shape = x.shape();
        if shape.rank() != 4 {
            return Err(Error::RankMismatch {
                op,
                expected: 4,
                got: shape.rank(),
            });
        }
        if shape.dim(1) != self.c_in {
            return Err(Error::ShapeMismatch {
                op,
                axis: 1,
                expected: self.c_in,
                got: shape.dim(1),
            });
        }
        Ok(())
    }

    /// Kaiming-uniform weight of this spec.
    pub(crate) fn init_weight(&self, rng: &mut Prng) -> Tensor {
        rng.kaiming_uniform(self.weight_shape(), self.cin_per_group() * self.k * self.k)
    }
}

/// A plain convolution layer.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv2d {
    pub fn new(store: &mut ParamStore, name: &str, spec: ConvSpec, rng: &mut Prng) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng.split(name);
        let weight = store.add(format!("{name}.weight"), spec.init_weight(&mut rng));
        let bias = spec
            .has_bias
            .then(|| store.add(format!("{name}.bias"), Tensor::zeros([spec.c_out])));
        Ok(Self { spec, weight, bias })
    }

    pub fn forward<'t>(&self, params: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        self.spec.check_input("conv2d", &x)?;
        x.conv2d(
            params.get(self.weight),
            self.bias.map(|b| params.get(b)),
            self.spec.stride,
            self.spec.padding,
            self.spec.groups,
        )
    }
}
