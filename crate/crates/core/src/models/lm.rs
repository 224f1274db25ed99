//! Decoder-only transformer: pre-norm blocks with RMSNorm, causal multi-head
//! attention without positional encodings, and a SwiGLU or sparse-MoE FFN.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Bound, MoEFfnLayer, MoeConfig, ParamId, ParamStore, RoutingStats, SwiGluFfn};
use crate::rng::Prng;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LlamaDescriptor {
    pub name: String,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moe: Option<MoeConfig>,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

fn default_norm_eps() -> f64 {
    1e-6
}

impl LlamaDescriptor {
    /// Hidden 2048, intermediate 8191, 16 heads, 12 layers, 32000-token
    /// vocabulary, 2048-token context.
    pub fn llama_1b() -> Self {
        Self {
            name: "llama-1b".into(),
            d_model: 2048,
            d_ff: 8191,
            n_heads: 16,
            n_layers: 12,
            vocab_size: 32000,
            max_seq_len: 2048,
            moe: None,
            norm_eps: default_norm_eps(),
        }
    }

    /// d=64, d_ff=256, 4 heads, 2 layers, vocabulary 100.
    pub fn tiny() -> Self {
        Self {
            name: "tiny-lm".into(),
            d_model: 64,
            d_ff: 256,
            n_heads: 4,
            n_layers: 2,
            vocab_size: 100,
            max_seq_len: 64,
            moe: None,
            norm_eps: default_norm_eps(),
        }
    }

    pub fn with_moe(mut self, moe: MoeConfig) -> Self {
        self.moe = Some(moe);
        self
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |location: &str, message: String| Error::Validation {
            location: location.into(),
            message,
        };
        for (field, v) in [
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                return Err(fail(field, format!("{field} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(fail(
                "n_heads",
                format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads),
            ));
        }
        if !(self.norm_eps > 0.0) {
            return Err(fail("norm_eps", format!("{} must be positive", self.norm_eps)));
        }
        if let Some(moe) = &self.moe {
            moe.validate()?;
        }
        Ok(())
    }
}

fn linear_init(rng: &mut Prng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    rng.uniform_tensor([fan_in, fan_out], -bound, bound)
}

#[derive(Clone, Debug)]
pub enum FfnBlock {
    Dense(SwiGluFfn),
    Moe(MoEFfnLayer),
}

#[derive(Clone, Debug)]
struct Block {
    attn_norm: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ffn_norm: ParamId,
    ffn: FfnBlock,
}

/// Runnable transformer built from a [`LlamaDescriptor`].
#[derive(Clone, Debug)]
pub struct LmModel {
    pub descriptor: LlamaDescriptor,
    pub params: ParamStore,
    embedding: ParamId,
    blocks: Vec<Block>,
    final_norm: ParamId,
    lm_head: ParamId,
}

/// Forward result: logits for every position of every sequence (rows in
/// sequence order) and per-MoE-layer auxiliary losses and routing stats.
pub struct LmOutput<'t> {
    pub logits: Var<'t>,
    pub aux_losses: Vec<Var<'t>>,
    pub routing: Vec<RoutingStats>,
}

impl LmModel {
    pub fn build(desc: &LlamaDescriptor, rng: &Prng) -> Result<Self> {
        desc.validate()?;
        let mut rng = rng.split("lm");
        let (d, v) = (desc.d_model, desc.vocab_size);
        let mut params = ParamStore::new();
        let embedding = params.add("embedding", rng.normal_tensor([v, d], 1.0));
        let mut blocks = Vec::with_capacity(desc.n_layers);
        for i in 0..desc.n_layers {
            let p = format!("layers.{i}");
            let attn_norm = params.add(format!("{p}.attn_norm"), Tensor::ones([d]));
            let wq = params.add(format!("{p}.attention.wq"), linear_init(&mut rng, d, d));
            let wk = params.add(format!("{p}.attention.wk"), linear_init(&mut rng, d, d));
            let wv = params.add(format!("{p}.attention.wv"), linear_init(&mut rng, d, d));
            let wo = params.add(format!("{p}.attention.wo"), linear_init(&mut rng, d, d));
            let ffn_norm = params.add(format!("{p}.ffn_norm"), Tensor::ones([d]));
            let name = format!("{p}.ffn");
            let ffn = match desc.moe {
                None => FfnBlock::Dense(SwiGluFfn::new(&mut params, &name, d, desc.d_ff, &mut rng)),
                Some(cfg) => FfnBlock::Moe(MoEFfnLayer::new(&mut params, &name, d, desc.d_ff, cfg, &mut rng)?),
            };
            blocks.push(Block {
                attn_norm,
                wq,
                wk,
                wv,
                wo,
                ffn_norm,
                ffn,
            });
        }
        let final_norm = params.add("final_norm", Tensor::ones([d]));
        let lm_head = params.add("lm_head", linear_init(&mut rng, d, v));
        Ok(Self {
            descriptor: desc.clone(),
            params,
            embedding,
            blocks,
            final_norm,
            lm_head,
        })
    }

    fn check_tokens(&self, seqs: &[Vec<usize>]) -> Result<()> {
        if seqs.is_empty() || seqs.iter().any(Vec::is_empty) {
            return Err(Error::InvalidArgument("need at least one non-empty sequence".into()));
        }
        for s in seqs {
            if s.len() > self.descriptor.max_seq_len {
                return Err(Error::InvalidArgument(format!(
                    "sequence of length {} exceeds max_seq_len {}",
                    s.len(),
                    self.descriptor.max_seq_len
                )));
            }
            if let Some(&bad) = s.iter().find(|&&t| t >= self.descriptor.vocab_size) {
                return Err(Error::InvalidArgument(format!(
                    "token {bad} outside vocabulary of {}",
                    self.descriptor.vocab_size
                )));
            }
        }
        Ok(())
    }

    fn attention<'t>(&self, p: &Bound<'t>, blk: &Block, x: Var<'t>, lens: &[usize]) -> Result<Var<'t>> {
        let tape = x.tape();
        let hd = self.descriptor.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let q = x.matmul(p.get(blk.wq))?;
        let k = x.matmul(p.get(blk.wk))?;
        let v = x.matmul(p.get(blk.wv))?;
        let mut per_seq = Vec::with_capacity(lens.len());
        let mut offset = 0;
        for &t in lens {
            let mask = tape.constant(causal_mask(t));
            let (qs, ks, vs) = (q.narrow(0, offset, t)?, k.narrow(0, offset, t)?, v.narrow(0, offset, t)?);
            let mut heads = Vec::with_capacity(self.descriptor.n_heads);
            for h in 0..self.descriptor.n_heads {
                let qh = qs.narrow(1, h * hd, hd)?;
                let kh = ks.narrow(1, h * hd, hd)?;
                let vh = vs.narrow(1, h * hd, hd)?;
                let weights = qh.matmul(kh.transpose()?)?.scale(scale).add(mask)?.softmax(1)?;
                heads.push(weights.matmul(vh)?);
            }
            per_seq.push(tape.concat(&heads, 1)?);
            offset += t;
        }
        tape.concat(&per_seq, 0)?.matmul(p.get(blk.wo))
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, seqs: &[Vec<usize>]) -> Result<LmOutput<'t>> {
        self.check_tokens(seqs)?;
        let eps = self.descriptor.norm_eps;
        let lens: Vec<usize> = seqs.iter().map(Vec::len).collect();
        let flat: Vec<usize> = seqs.iter().flatten().copied().collect();
        let mut h = p.get(self.embedding).gather_rows(&flat)?;
        let mut aux_losses = Vec::new();
        let mut routing = Vec::new();
        for blk in &self.blocks {
            let a = self.attention(p, blk, h.rms_norm(p.get(blk.attn_norm), eps)?, &lens)?;
            h = h.add(a)?;
            let n = h.rms_norm(p.get(blk.ffn_norm), eps)?;
            let f = match &blk.ffn {
                FfnBlock::Dense(ffn) => ffn.forward(p, n)?,
                FfnBlock::Moe(moe) => {
                    let out = moe.forward(p, n)?;
                    aux_losses.push(out.aux_loss);
                    routing.push(out.stats);
                    out.y
                }
            };
            h = h.add(f)?;
        }
        let logits = h
            .rms_norm(p.get(self.final_norm), eps)?
            .matmul(p.get(self.lm_head))?;
        Ok(LmOutput {
            logits,
            aux_losses,
            routing,
        })
    }

    /// Logits `[T, V]` for one sequence without recording gradients.
    pub fn predict(&self, tokens: &[usize]) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let out = self.forward(&p, &[tokens.to_vec()])?;
        let logits = out.logits.value();
        Ok((*logits).clone())
    }
}

/// `[t, t]` additive mask: 0 on and below the diagonal, −∞ above.
pub fn causal_mask(t: usize) -> Tensor {
    let mut m = Tensor::zeros([t, t]);
    for r in 0..t {
        for c in r + 1..t {
            m.data_mut()[r * t + c] = f64::NEG_INFINITY;
        }
    }
    m
}
