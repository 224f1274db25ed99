//! Dynamic convolution: an input-conditioned convex combination of `M` expert
//! kernels.
//!
//! For each sample `b` of a batch:
//!
//! ```text
//! alpha_b = softmax(W2 · relu(W1 · pool(x_b) + b1) + b2)      (length M)
//! W'_b    = sum_i alpha_b[i] · W_i
//! y_b     = conv2d(x_b, W'_b)
//! ```
//!
//! `pool` is global average pooling and the router's hidden width equals
//! `C_in`. Expert biases, when present, are fused with the same coefficients.

use super::conv::ConvSpec;
use super::params::{Bound, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::rng::Prng;
use crate::tensor::{Tensor, Var};

/// Two-layer coefficient generator `C_in -> C_in -> M`.
#[derive(Clone, Debug)]
pub struct RouterMlp {
    pub c_in: usize,
    pub m: usize,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl RouterMlp {
    /// `w1` is Kaiming-uniform; `w2` and `b2` start at zero so the initial
    /// coefficients are uniform.
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, m: usize, rng: &mut Prng) -> Self {
        let mut rng = rng.split(name);
        Self {
            c_in,
            m,
            w1: store.add(format!("{name}.w1"), rng.kaiming_uniform([c_in, c_in], c_in)),
            b1: store.add(format!("{name}.b1"), Tensor::zeros([c_in])),
            w2: store.add(format!("{name}.w2"), Tensor::zeros([c_in, m])),
            b2: store.add(format!("{name}.b2"), Tensor::zeros([m])),
        }
    }

    /// Weight elements (`C_in² + C_in·M`) and bias elements (`C_in + M`).
    pub fn param_counts(&self) -> (usize, usize) {
        (self.c_in * self.c_in + self.c_in * self.m, self.c_in + self.m)
    }

    /// Logits `[B, M]` from pooled features `[B, C_in]`.
    pub fn logits<'t>(&self, params: &Bound<'t>, pooled: Var<'t>) -> Result<Var<'t>> {
        pooled
            .matmul(params.get(self.w1))?
            .add_bias(params.get(self.b1))?
            .relu()
            .matmul(params.get(self.w2))?
            .add_bias(params.get(self.b2))
    }
}

#[derive(Clone, Debug)]
pub struct DynamicConvLayer {
    pub spec: ConvSpec,
    pub m: usize,
    /// `[M, C_out, C_in / groups, K, K]`.
    pub experts: ParamId,
    /// `[M, C_out]`.
    pub expert_biases: Option<ParamId>,
    pub router: RouterMlp,
}

impl DynamicConvLayer {
    pub fn new(store: &mut ParamStore, name: &str, spec: ConvSpec, m: usize, rng: &mut Prng) -> Result<Self> {
        spec.validate()?;
        if m == 0 {
            return Err(Error::Validation {
                location: name.to_string(),
                message: "dynamic convolution needs at least one expert".into(),
            });
        }
        let mut erng = rng.split(&format!("{name}.experts"));
        let banks: Vec<Tensor> = (0..m).map(|_| spec.init_weight(&mut erng)).collect();
        let experts = store.add(format!("{name}.experts"), Tensor::stack(&banks)?);
        let expert_biases = spec
            .has_bias
            .then(|| store.add(format!("{name}.expert_biases"), Tensor::zeros([m, spec.c_out])));
        let router = RouterMlp::new(store, &format!("{name}.router"), spec.c_in, m, rng);
        Ok(Self {
            spec,
            m,
            experts,
            expert_biases,
            router,
        })
    }

    /// Mixing coefficients `[B, M]` for input `x: [B, C_in, H, W]`.
    pub fn coefficients<'t>(&self, params: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        self.spec.check_input("dynamic_conv", &x)?;
        let pooled = x.global_avg_pool()?;
        self.router.logits(params, pooled)?.softmax(1)
    }

    pub fn forward<'t>(&self, params: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(self.forward_with_coefficients(params, x)?.0)
    }

    /// Output together with the per-sample coefficients that produced it.
    pub fn forward_with_coefficients<'t>(
        &self,
        params: &Bound<'t>,
        x: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let alpha = self.coefficients(params, x)?;
        let batch = x.shape().dim(0);
        let w_shape = self.spec.weight_shape();
        let bank = params
            .get(self.experts)
            .reshape([self.m, self.spec.weight_numel()])?;
        let fused = alpha.matmul(bank)?;
        let fused_bias = match self.expert_biases {
            Some(b) => Some(alpha.matmul(params.get(b))?),
            None => None,
        };
        let mut outputs = Vec::with_capacity(batch);
        for b in 0..batch {
            let w = fused.narrow(0, b, 1)?.reshape(w_shape)?;
            let bias = match fused_bias {
                Some(fb) => Some(fb.narrow(0, b, 1)?.reshape([self.spec.c_out])?),
                None => None,
            };
            outputs.push(x.narrow(0, b, 1)?.conv2d(
                w,
                bias,
                self.spec.stride,
                self.spec.padding,
                self.spec.groups,
            )?);
        }
        let y = if outputs.len() == 1 {
            outputs[0]
        } else {
            x.tape().concat(&outputs, 0)?
        };
        Ok((y, alpha))
    }
}
