use std::time::Instant;

use serde::Serialize;

use super::config::{config_hash, TrainConfig};
use super::data::{gaussian_blobs, procedural_grammar, BlobDataset, DatasetSpec, TokenStream};
use super::optim::{adamw_step, clip_grad_norm, cosine_lr, AdamWState};
use super::record::{EpochLog, LayerRouting, RunRecord, RunSummary, StepLog};
use crate::complexity::{count_cnn, count_transformer, FlopConvention, TransformerFlops};
use crate::error::{Error, Result};
use crate::layers::ParamStore;
use crate::models::{CnnModel, LmModel, Model};
use crate::rng::Prng;
use crate::tensor::{Tape, Tensor, Var};

/// Deterministic epoch-wise shuffled batches; the last batch of an epoch may
/// be short.
struct Batcher {
    n: usize,
    batch: usize,
    rng: Prng,
    order: Vec<usize>,
    pos: usize,
    epoch: usize,
}

impl Batcher {
    fn new(n: usize, batch: usize, seed: u64) -> Self {
        Self {
            n,
            batch,
            rng: Prng::new(seed).split("batches"),
            order: Vec::new(),
            pos: 0,
            epoch: 0,
        }
    }

    /// Next batch and whether it starts a new epoch.
    fn next(&mut self) -> (Vec<usize>, bool) {
        let fresh = self.pos >= self.order.len();
        if fresh {
            self.order = (0..self.n).collect();
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
            self.epoch += 1;
        }
        let end = (self.pos + self.batch).min(self.n);
        let b = self.order[self.pos..end].to_vec();
        self.pos = end;
        (b, fresh)
    }
}

fn tail_mean(xs: &[f64]) -> f64 {
    let k = (xs.len() / 10).max(1).min(xs.len());
    xs[xs.len() - k..].iter().sum::<f64>() / k as f64
}

fn optimise(
    step: usize,
    params: &mut ParamStore,
    mut grads: Vec<Tensor>,
    state: &mut AdamWState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if let Some(c) = cfg.grad_clip {
        clip_grad_norm(&mut grads, c);
    }
    adamw_step(params, &grads, state, lr, cfg.weight_decay, &cfg.optimizer).map_err(|e| match e {
        Error::NonFiniteGradient(param) => Error::GradientDivergence { step, param },
        e => e,
    })
}

#[derive(Serialize)]
struct HashInput<'a, D: Serialize, M: Serialize> {
    config: &'a TrainConfig,
    model: &'a M,
    data: D,
}

/// Fraction of correctly classified examples over the whole dataset.
pub fn classifier_accuracy(model: &CnnModel, data: &BlobDataset) -> Result<f64> {
    let mut correct = 0usize;
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(64) {
        let (x, y) = data.batch(chunk);
        let logits = model.predict(&x)?;
        let c = logits.dims()[1];
        for (r, &label) in y.iter().enumerate() {
            let row = &logits.data()[r * c..(r + 1) * c];
            let arg = (0..c).fold(0, |best, j| if row[j] > row[best] { j } else { best });
            correct += usize::from(arg == label);
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Trains `model` on `data` with label-smoothed cross-entropy.
pub fn train_classifier(model: &mut CnnModel, data: &BlobDataset, cfg: &TrainConfig) -> Result<RunRecord> {
    let started = Instant::now();
    let d = &model.descriptor;
    let dims = data.images.dims();
    if dims[1] != d.in_channels || dims[2] != d.input_size[0] || dims[3] != d.input_size[1] {
        return Err(Error::Validation {
            location: "dataset".into(),
            message: format!(
                "images {:?} do not match model input {}x{:?}",
                &dims[1..],
                d.in_channels,
                d.input_size
            ),
        });
    }
    if data.num_classes != d.num_classes {
        return Err(Error::Validation {
            location: "dataset".into(),
            message: format!("{} classes but model predicts {}", data.num_classes, d.num_classes),
        });
    }
    let (total, warmup, _) = cfg.budget(data.len())?;
    let hash = config_hash(&HashInput {
        config: cfg,
        model: &model.descriptor,
        data: (data.len(), data.images.numel()),
    })?;
    let mut state = AdamWState::new(&model.params);
    let mut batcher = Batcher::new(data.len(), cfg.batch_size, cfg.seed);
    let mut losses = Vec::with_capacity(total);
    let mut logs = Vec::new();
    let mut epochs = Vec::new();
    let mut epoch_losses: Vec<f64> = Vec::new();
    let mut alpha_min: Option<f64> = None;

    let close_epoch = |model: &CnnModel, epochs: &mut Vec<EpochLog>, epoch_losses: &mut Vec<f64>| -> Result<()> {
        if epoch_losses.is_empty() {
            return Ok(());
        }
        epochs.push(EpochLog {
            epoch: epochs.len() + 1,
            mean_loss: epoch_losses.iter().sum::<f64>() / epoch_losses.len() as f64,
            mean_ce: None,
            train_accuracy: Some(classifier_accuracy(model, data)?),
        });
        epoch_losses.clear();
        Ok(())
    };

    for step in 0..total {
        let (idx, fresh) = batcher.next();
        if fresh {
            close_epoch(model, &mut epochs, &mut epoch_losses)?;
        }
        let lr = cosine_lr(step, total, warmup, cfg.base_lr, cfg.final_lr_fraction)?;
        let (x, y) = data.batch(&idx);
        let tape = Tape::new();
        let p = model.params.bind(&tape);
        let out = model.forward(&p, tape.constant(x))?;
        let loss = out.logits.cross_entropy_with_label_smoothing(&y, cfg.label_smoothing)?;
        let value = loss.value().item();
        if !value.is_finite() {
            return Err(Error::Divergence { step, loss: value });
        }
        let step_alpha = out
            .coefficients
            .iter()
            .flat_map(|a| a.value().data().to_vec())
            .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |m| m.min(v))));
        if let Some(a) = step_alpha {
            alpha_min = Some(alpha_min.map_or(a, |m| m.min(a)));
        }
        tape.backward(loss)?;
        let grads = p.grads(&tape);
        optimise(step, &mut model.params, grads, &mut state, lr, cfg)?;
        losses.push(value);
        epoch_losses.push(value);
        if step % cfg.log_every == 0 || step + 1 == total {
            logs.push(StepLog {
                step,
                lr,
                loss: value,
                ce: None,
                aux: None,
                alpha_min: step_alpha,
                routing: Vec::new(),
            });
        }
    }
    close_epoch(model, &mut epochs, &mut epoch_losses)?;
    let flops = count_cnn(&model.descriptor, FlopConvention::Mac1)?.totals.flops;
    let summary = RunSummary {
        model: model.descriptor.name.clone(),
        task: "classifier".into(),
        config_hash: hash,
        seed: cfg.seed,
        steps: total,
        final_loss: tail_mean(&losses),
        final_ce: None,
        final_aux: None,
        train_accuracy: Some(classifier_accuracy(model, data)?),
        alpha_min,
        final_expert_load: Vec::new(),
        params: model.params.num_elements() as u64,
        flops,
    };
    Ok(RunRecord {
        summary,
        loss_trace: losses,
        epochs,
        logs,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

/// Auxiliary-loss weight in effect: the config overrides the descriptor.
pub fn effective_aux_weight(model: &LmModel, cfg: &TrainConfig) -> f64 {
    cfg.aux_loss_weight
        .or(model.descriptor.moe.map(|m| m.aux_loss_weight))
        .unwrap_or(0.0)
}

/// Loss of one LM batch: cross-entropy over every position plus
/// `aux_weight ·` the mean auxiliary loss of the MoE layers.
pub struct LmLoss<'t> {
    pub total: Var<'t>,
    pub ce: f64,
    pub aux: Option<f64>,
    pub routing: Vec<LayerRouting>,
}

pub fn lm_loss<'t>(
    model: &LmModel,
    p: &crate::layers::Bound<'t>,
    batch: &[(Vec<usize>, Vec<usize>)],
    label_smoothing: f64,
    aux_weight: f64,
) -> Result<LmLoss<'t>> {
    let inputs: Vec<Vec<usize>> = batch.iter().map(|(x, _)| x.clone()).collect();
    let targets: Vec<usize> = batch.iter().flat_map(|(_, y)| y.iter().copied()).collect();
    let out = model.forward(p, &inputs)?;
    let ce = out.logits.cross_entropy_with_label_smoothing(&targets, label_smoothing)?;
    let ce_value = ce.value().item();
    let routing = out
        .routing
        .iter()
        .enumerate()
        .map(|(i, s)| LayerRouting::from_stats(i, s))
        .collect();
    if out.aux_losses.is_empty() {
        return Ok(LmLoss {
            total: ce,
            ce: ce_value,
            aux: None,
            routing,
        });
    }
    let n = out.aux_losses.len() as f64;
    let mut sum = out.aux_losses[0];
    for a in &out.aux_losses[1..] {
        sum = sum.add(*a)?;
    }
    let mean_aux = sum.scale(1.0 / n);
    let aux_value = mean_aux.value().item();
    let total = if aux_weight == 0.0 {
        ce
    } else {
        ce.add(mean_aux.scale(aux_weight))?
    };
    Ok(LmLoss {
        total,
        ce: ce_value,
        aux: Some(aux_value),
        routing,
    })
}

/// Trains `model` on non-overlapping windows of `max_seq_len` tokens.
pub fn train_lm(model: &mut LmModel, stream: &TokenStream, cfg: &TrainConfig) -> Result<RunRecord> {
    let started = Instant::now();
    if stream.vocab != model.descriptor.vocab_size {
        return Err(Error::Validation {
            location: "dataset".into(),
            message: format!(
                "stream vocabulary {} differs from model vocabulary {}",
                stream.vocab, model.descriptor.vocab_size
            ),
        });
    }
    let aux_weight = effective_aux_weight(model, cfg);
    if !(aux_weight >= 0.0) {
        return Err(Error::InvalidArgument(format!("aux_loss_weight {aux_weight} must be >= 0")));
    }
    let windows = stream.windows(model.descriptor.max_seq_len);
    let (total, warmup, _) = cfg.budget(windows.len())?;
    let hash = config_hash(&HashInput {
        config: cfg,
        model: &model.descriptor,
        data: (stream.vocab, stream.tokens.len()),
    })?;
    let mut state = AdamWState::new(&model.params);
    let mut batcher = Batcher::new(windows.len(), cfg.batch_size, cfg.seed);
    let mut losses = Vec::with_capacity(total);
    let mut ces = Vec::with_capacity(total);
    let mut auxes = Vec::new();
    let mut loads: Vec<Vec<Vec<usize>>> = Vec::with_capacity(total);
    let mut logs = Vec::new();
    let mut epochs: Vec<EpochLog> = Vec::new();
    let mut epoch_acc: (Vec<f64>, Vec<f64>) = (Vec::new(), Vec::new());
    let close_epoch = |epochs: &mut Vec<EpochLog>, acc: &mut (Vec<f64>, Vec<f64>)| {
        if acc.0.is_empty() {
            return;
        }
        let n = acc.0.len() as f64;
        epochs.push(EpochLog {
            epoch: epochs.len() + 1,
            mean_loss: acc.0.iter().sum::<f64>() / n,
            mean_ce: Some(acc.1.iter().sum::<f64>() / n),
            train_accuracy: None,
        });
        acc.0.clear();
        acc.1.clear();
    };

    for step in 0..total {
        let (idx, fresh) = batcher.next();
        if fresh {
            close_epoch(&mut epochs, &mut epoch_acc);
        }
        let lr = cosine_lr(step, total, warmup, cfg.base_lr, cfg.final_lr_fraction)?;
        let batch: Vec<(Vec<usize>, Vec<usize>)> = idx.iter().map(|&i| windows[i].clone()).collect();
        let tape = Tape::new();
        let p = model.params.bind(&tape);
        let loss = lm_loss(model, &p, &batch, cfg.label_smoothing, aux_weight)?;
        let value = loss.total.value().item();
        if !value.is_finite() {
            return Err(Error::Divergence { step, loss: value });
        }
        tape.backward(loss.total)?;
        let grads = p.grads(&tape);
        optimise(step, &mut model.params, grads, &mut state, lr, cfg)?;
        losses.push(value);
        ces.push(loss.ce);
        epoch_acc.0.push(value);
        epoch_acc.1.push(loss.ce);
        if let Some(a) = loss.aux {
            auxes.push(a);
        }
        loads.push(loss.routing.iter().map(|r| r.expert_load.clone()).collect());
        if step % cfg.log_every == 0 || step + 1 == total {
            logs.push(StepLog {
                step,
                lr,
                loss: value,
                ce: Some(loss.ce),
                aux: loss.aux,
                alpha_min: None,
                routing: loss.routing,
            });
        }
    }
    close_epoch(&mut epochs, &mut epoch_acc);

    let tail = (total / 10).max(1);
    let final_expert_load = match loads.last() {
        Some(last) if !last.is_empty() => (0..last.len())
            .map(|layer| {
                let experts = last[layer].len();
                (0..experts)
                    .map(|e| loads[total - tail..].iter().map(|s| s[layer][e]).sum())
                    .collect()
            })
            .collect(),
        _ => Vec::new(),
    };
    let flops = count_transformer(
        &model.descriptor,
        TransformerFlops {
            prompt_len: model.descriptor.max_seq_len,
            response_len: 1,
        },
        FlopConvention::Mac1,
    )?
    .totals
    .flops;
    let summary = RunSummary {
        model: model.descriptor.name.clone(),
        task: "lm".into(),
        config_hash: hash,
        seed: cfg.seed,
        steps: total,
        final_loss: tail_mean(&losses),
        final_ce: Some(tail_mean(&ces)),
        final_aux: (!auxes.is_empty()).then(|| tail_mean(&auxes)),
        train_accuracy: None,
        alpha_min: None,
        final_expert_load,
        params: model.params.num_elements() as u64,
        flops,
    };
    Ok(RunRecord {
        summary,
        loss_trace: losses,
        epochs,
        logs,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

/// Generates `dataset` and trains `model` on it: blobs for CNNs, token
/// streams for language models.
pub fn train(model: &mut Model, dataset: &DatasetSpec, cfg: &TrainConfig) -> Result<RunRecord> {
    match (model, dataset) {
        (Model::Cnn(m), DatasetSpec::GaussianBlobs(spec)) => train_classifier(m, &gaussian_blobs(spec)?, cfg),
        (Model::Lm(m), DatasetSpec::TokenStream(spec)) => train_lm(m, &procedural_grammar(spec)?, cfg),
        (Model::DynamicConv(_), _) => Err(Error::InvalidArgument(
            "a lone dynamic convolution has no training task; use a cnn or llama descriptor".into(),
        )),
        (Model::Cnn(_), _) => Err(Error::InvalidArgument("cnn models train on gaussian_blobs data".into())),
        (Model::Lm(_), _) => Err(Error::InvalidArgument("llama models train on token_stream data".into())),
    }
}
