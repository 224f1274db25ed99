//! SwiGLU feed-forward blocks and the sparse top-1 mixture-of-experts FFN.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::params::{Bound, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::rng::Prng;
use crate::tensor::{Tensor, Var};

/// `(silu(x · gate) ⊙ (x · up)) · down` for `x: [T, d_model]`.
pub fn swiglu_ffn_forward<'t>(
    x: Var<'t>,
    gate_w: Var<'t>,
    up_w: Var<'t>,
    down_w: Var<'t>,
) -> Result<Var<'t>> {
    let g = x.matmul(gate_w)?.silu();
    let u = x.matmul(up_w)?;
    if g.shape() != u.shape() {
        return Err(Error::ShapeMismatch {
            op: "swiglu",
            axis: 1,
            expected: g.shape().dim(1),
            got: u.shape().dim(1),
        });
    }
    g.mul(u)?.matmul(down_w)
}

fn linear_init(rng: &mut Prng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    rng.uniform_tensor([fan_in, fan_out], -bound, bound)
}

/// Dense SwiGLU FFN.
#[derive(Clone, Debug)]
pub struct SwiGluFfn {
    pub d_model: usize,
    pub d_ff: usize,
    pub gate: ParamId,
    pub up: ParamId,
    pub down: ParamId,
}

impl SwiGluFfn {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, d_ff: usize, rng: &mut Prng) -> Self {
        let mut rng = rng.split(name);
        Self {
            d_model,
            d_ff,
            gate: store.add(format!("{name}.gate"), linear_init(&mut rng, d_model, d_ff)),
            up: store.add(format!("{name}.up"), linear_init(&mut rng, d_model, d_ff)),
            down: store.add(format!("{name}.down"), linear_init(&mut rng, d_ff, d_model)),
        }
    }

    pub fn forward<'t>(&self, params: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        swiglu_ffn_forward(x, params.get(self.gate), params.get(self.up), params.get(self.down))
    }
}

/// Which SwiGLU projection is replicated per expert.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MoePlacement {
    Gate,
    UpProj,
    DownProj,
}

impl MoePlacement {
    pub const ALL: [MoePlacement; 3] = [MoePlacement::Gate, MoePlacement::UpProj, MoePlacement::DownProj];
}

impl fmt::Display for MoePlacement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MoePlacement::Gate => "gate",
            MoePlacement::UpProj => "up_proj",
            MoePlacement::DownProj => "down_proj",
        })
    }
}

impl FromStr for MoePlacement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gate" => Ok(MoePlacement::Gate),
            "up_proj" | "up" => Ok(MoePlacement::UpProj),
            "down_proj" | "down" => Ok(MoePlacement::DownProj),
            other => Err(Error::InvalidArgument(format!(
                "unknown MoE placement `{other}` (expected gate, up_proj or down_proj)"
            ))),
        }
    }
}

/// Expert capacity `ceil(capacity_factor · tokens / experts)`.
///
/// A relative slack of 1e-9 absorbs binary rounding of the product, so that for
/// example `1.1 · 10 / 1` gives 11 rather than 12.
pub fn expert_capacity(capacity_factor: f64, tokens: usize, experts: usize) -> usize {
    let raw = capacity_factor * tokens as f64 / experts as f64;
    (raw - raw.abs() * 1e-9).ceil().max(0.0) as usize
}

/// Top-1 expert per row of `probs: [T, N]`; ties go to the lowest index.
pub fn top1(probs: &Tensor) -> Vec<usize> {
    let n = probs.dims()[1];
    probs
        .data()
        .chunks(n)
        .map(|row| {
            let mut best = 0;
            for (i, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Token-to-expert assignment after applying capacity in token order.
#[derive(Clone, Debug, PartialEq)]
pub struct Dispatch {
    /// Top-1 choice of every token.
    pub choice: Vec<usize>,
    /// Kept token indices per expert, ascending.
    pub kept: Vec<Vec<usize>>,
    pub dropped: Vec<usize>,
    pub capacity: usize,
}

impl Dispatch {
    pub fn new(choice: Vec<usize>, n_experts: usize, capacity: usize) -> Self {
        let mut kept = vec![Vec::new(); n_experts];
        let mut dropped = Vec::new();
        for (t, &e) in choice.iter().enumerate() {
            if kept[e].len() < capacity {
                kept[e].push(t);
            } else {
                dropped.push(t);
            }
        }
        Self {
            choice,
            kept,
            dropped,
            capacity,
        }
    }

    /// Fraction of tokens whose top-1 choice is each expert (before capacity).
    pub fn dispatch_fractions(&self, n_experts: usize) -> Vec<f64> {
        let mut f = vec![0.0; n_experts];
        for &e in &self.choice {
            f[e] += 1.0;
        }
        let t = self.choice.len().max(1) as f64;
        f.iter_mut().for_each(|v| *v /= t);
        f
    }
}

/// Load-balancing loss `N · sum_i f_i · P_i` for plain numbers.
pub fn load_balancing_loss(fractions: &[f64], mean_probs: &[f64]) -> f64 {
    let n = fractions.len() as f64;
    n * fractions.iter().zip(mean_probs).map(|(f, p)| f * p).sum::<f64>()
}

/// Per-call routing record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingStats {
    /// Tokens computed by each expert.
    pub expert_load: Vec<usize>,
    pub kept: usize,
    pub dropped: usize,
    pub capacity: usize,
    /// `f_i`: fraction of tokens routed to each expert by top-1 choice.
    pub dispatch_fraction: Vec<f64>,
    /// `P_i`: mean router probability of each expert.
    pub mean_prob: Vec<f64>,
}

impl RoutingStats {
    /// Max/min expert load; infinite when some expert got nothing.
    pub fn load_imbalance(&self) -> f64 {
        let max = self.expert_load.iter().copied().max().unwrap_or(0) as f64;
        let min = self.expert_load.iter().copied().min().unwrap_or(0) as f64;
        if min == 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoeConfig {
    pub n_experts: usize,
    pub placement: MoePlacement,
    #[serde(default = "default_capacity_factor")]
    pub capacity_factor: f64,
    #[serde(default = "default_aux_loss_weight")]
    pub aux_loss_weight: f64,
}

fn default_capacity_factor() -> f64 {
    1.25
}

fn default_aux_loss_weight() -> f64 {
    0.01
}

impl MoeConfig {
    pub fn new(n_experts: usize, placement: MoePlacement) -> Self {
        Self {
            n_experts,
            placement,
            capacity_factor: default_capacity_factor(),
            aux_loss_weight: default_aux_loss_weight(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |message: String| Error::Validation {
            location: "moe".into(),
            message,
        };
        if self.n_experts == 0 {
            return Err(bad("n_experts must be at least 1".into()));
        }
        if !(self.capacity_factor > 0.0) || !self.capacity_factor.is_finite() {
            return Err(bad(format!("capacity_factor {} must be positive", self.capacity_factor)));
        }
        if !(self.aux_loss_weight >= 0.0) || !self.aux_loss_weight.is_finite() {
            return Err(bad(format!(
                "aux_loss_weight {} must be non-negative",
                self.aux_loss_weight
            )));
        }
        Ok(())
    }
}

/// Output of [`MoEFfnLayer::forward`].
pub struct MoeOutput<'t> {
    pub y: Var<'t>,
    pub aux_loss: Var<'t>,
    pub stats: RoutingStats,
}

/// Sparse top-1 MoE over a SwiGLU FFN: one projection is replicated per
/// expert, the other two are shared.
#[derive(Clone, Debug)]
pub struct MoEFfnLayer {
    pub d_model: usize,
    pub d_ff: usize,
    pub config: MoeConfig,
    /// `[d_model, N]`.
    pub router_w: ParamId,
    pub gate: Vec<ParamId>,
    pub up: Vec<ParamId>,
    pub down: Vec<ParamId>,
}

impl MoEFfnLayer {
    /// Active experts per token.
    pub const K: usize = 1;

    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        d_ff: usize,
        config: MoeConfig,
        rng: &mut Prng,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = rng.split(name);
        let n = config.n_experts;
        let router_w = store.add(format!("{name}.router"), linear_init(&mut rng, d_model, n));
        let mut make = |proj: MoePlacement, fan_in: usize, fan_out: usize| -> Vec<ParamId> {
            let short = match proj {
                MoePlacement::Gate => "gate",
                MoePlacement::UpProj => "up",
                MoePlacement::DownProj => "down",
            };
            if proj == config.placement {
                (0..n)
                    .map(|e| {
                        store.add(
                            format!("{name}.experts.{e}.{short}"),
                            linear_init(&mut rng, fan_in, fan_out),
                        )
                    })
                    .collect()
            } else {
                vec![store.add(format!("{name}.{short}"), linear_init(&mut rng, fan_in, fan_out))]
            }
        };
        let gate = make(MoePlacement::Gate, d_model, d_ff);
        let up = make(MoePlacement::UpProj, d_model, d_ff);
        let down = make(MoePlacement::DownProj, d_ff, d_model);
        Ok(Self {
            d_model,
            d_ff,
            config,
            router_w,
            gate,
            up,
            down,
        })
    }

    pub fn n_experts(&self) -> usize {
        self.config.n_experts
    }

    fn pick(ids: &[ParamId], e: usize) -> ParamId {
        if ids.len() == 1 {
            ids[0]
        } else {
            ids[e]
        }
    }

    /// Router probabilities `[T, N]`.
    pub fn router_probs<'t>(&self, params: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(params.get(self.router_w))?.softmax(1)
    }

    pub fn forward<'t>(&self, params: &Bound<'t>, x: Var<'t>) -> Result<MoeOutput<'t>> {
        const OP: &str = "moe_ffn";
        let shape = x.shape();
        if shape.rank() != 2 {
            return Err(Error::RankMismatch {
                op: OP,
                expected: 2,
                got: shape.rank(),
            });
        }
        if shape.dim(1) != self.d_model {
            return Err(Error::ShapeMismatch {
                op: OP,
                axis: 1,
                expected: self.d_model,
                got: shape.dim(1),
            });
        }
        let tokens = shape.dim(0);
        if tokens == 0 {
            return Err(Error::InvalidArgument("MoE forward needs at least one token".into()));
        }
        let n = self.n_experts();
        let tape = x.tape();
        let probs = self.router_probs(params, x)?;
        let probs_value = probs.value();
        let capacity = expert_capacity(self.config.capacity_factor, tokens, n);
        let dispatch = Dispatch::new(top1(&probs_value), n, capacity);

        let mut y: Option<Var<'t>> = None;
        for (e, idx) in dispatch.kept.iter().enumerate() {
            if idx.is_empty() {
                continue;
            }
            let xe = x.gather_rows(idx)?;
            let out = swiglu_ffn_forward(
                xe,
                params.get(Self::pick(&self.gate, e)),
                params.get(Self::pick(&self.up, e)),
                params.get(Self::pick(&self.down, e)),
            )?;
            let coords: Vec<(usize, usize)> = idx.iter().map(|&t| (t, e)).collect();
            let gated = out.mul_rows(probs.pick(&coords)?)?;
            let placed = gated.scatter_rows(idx, tokens)?;
            y = Some(match y {
                Some(acc) => acc.add(placed)?,
                None => placed,
            });
        }
        let y = y.unwrap_or_else(|| tape.constant(Tensor::zeros([tokens, self.d_model])));

        let fractions = dispatch.dispatch_fractions(n);
        let mean_prob = probs.mean_axis(0)?;
        let f = tape.constant(Tensor::from_vec([n], fractions.clone())?);
        let aux_loss = mean_prob.mul(f)?.sum().scale(n as f64);

        let stats = RoutingStats {
            expert_load: dispatch.kept.iter().map(Vec::len).collect(),
            kept: tokens - dispatch.dropped.len(),
            dropped: dispatch.dropped.len(),
            capacity,
            dispatch_fraction: fractions,
            mean_prob: mean_prob.value().data().to_vec(),
        };
        Ok(MoeOutput { y, aux_loss, stats })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn capacity_rounding() {
        assert_eq!(expert_capacity(1.25, 8, 4), 3);
        assert_eq!(expert_capacity(1.1, 10, 1), 11);
        assert_eq!(expert_capacity(1.0, 12, 4), 3);
        assert_eq!(expert_capacity(4.0, 7, 4), 7);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let p = Tensor::from_vec([2, 3], vec![0.4, 0.4, 0.2, 0.1, 0.45, 0.45]).unwrap();
        assert_eq!(top1(&p), vec![0, 1]);
    }

    #[test]
    fn dispatch_respects_capacity_in_token_order() {
        let d = Dispatch::new(vec![0, 0, 1, 0, 0], 2, 2);
        assert_eq!(d.kept, vec![vec![0, 1], vec![2]]);
        assert_eq!(d.dropped, vec![3, 4]);
        assert_eq!(d.dispatch_fractions(2), vec![0.8, 0.2]);
    }

    #[test]
    fn placement_parses() {
        for p in MoePlacement::ALL {
            assert_eq!(p.to_string().parse::<MoePlacement>().unwrap(), p);
        }
        assert!("attn".parse::<MoePlacement>().is_err());
    }
}
