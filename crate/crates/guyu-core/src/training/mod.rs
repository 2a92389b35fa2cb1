//! MLE training with the weighted joint context+response loss, Adam with
//! Noam learning-rate decay, validation-based model selection, and bit-exact
//! checkpointing (see [`checkpoint`]).

pub mod checkpoint;

pub use checkpoint::ModelCheckpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{NodeId, ParamStore, Tape};
use crate::corpus::{make_batches, AssembledSequence, Batch};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Context-loss weight; 0 trains on the response alone.
    pub lambda: f32,
    pub batch_size: usize,
    pub max_steps: usize,
    pub warmup_steps: usize,
    pub lr_scale: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: f64,
    pub validation_interval: usize,
    pub stage: Stage,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(lambda: f32, stage: Stage) -> Self {
        Self {
            lambda,
            batch_size: 16,
            max_steps: 1000,
            warmup_steps: 4000,
            lr_scale: 1.0,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            grad_clip: 1.0,
            validation_interval: 50,
            stage,
            seed: 0,
        }
    }

    pub fn validated(self) -> Result<Self> {
        if self.lambda < 0.0 {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        if self.warmup_steps < 1 {
            return Err(Error::Config("warmup_steps must be >= 1".into()));
        }
        if self.batch_size < 1 || self.max_steps < 1 {
            return Err(Error::Config(
                "batch_size and max_steps must be >= 1".into(),
            ));
        }
        Ok(self)
    }
}

/// Tape handles for the three loss reductions over one batch.
pub struct LossNodes {
    pub joint: NodeId,
    pub response: NodeId,
    pub context: NodeId,
    pub response_targets: usize,
    pub context_targets: usize,
    /// False when the batch has no context targets (context loss pinned 0).
    pub has_context: bool,
}

/// Per-target CE masks are derived from each row's context length and valid
/// length, so they stay well-defined at lambda = 1 where the numeric weights
/// of context and response coincide.
fn target_masks<T: Scalar>(batch: &Batch) -> (Vec<usize>, Tensor<T>, Tensor<T>, usize, usize) {
    let b = batch.rows();
    let t = batch.width();
    let mut targets = vec![0usize; b * t];
    let mut resp = Tensor::zeros(&[b * t]);
    let mut ctx = Tensor::zeros(&[b * t]);
    let mut n_resp = 0usize;
    let mut n_ctx = 0usize;
    for (row, ids) in batch.ids.iter().enumerate() {
        let len = batch.lengths[row];
        let m = batch.context_lens[row];
        for col in 0..t {
            let target_pos = col + 1;
            let idx = row * t + col;
            if target_pos < len {
                targets[idx] = ids[target_pos] as usize;
                if target_pos < m {
                    ctx.data_mut()[idx] = T::one();
                    n_ctx += 1;
                } else {
                    resp.data_mut()[idx] = T::one();
                    n_resp += 1;
                }
            }
        }
    }
    (targets, resp, ctx, n_resp, n_ctx)
}

/// Builds the Eq.-style losses from logits [B, T, V]: per-token mean NLL over
/// response targets, per-token mean over context targets, and their
/// lambda-weighted sum. joint(lambda=0) reduces bitwise to the response term.
pub fn joint_loss_nodes<T: Scalar>(
    tape: &mut Tape<T>,
    logits: NodeId,
    batch: &Batch,
    lambda: T,
) -> Result<LossNodes> {
    let shape = tape.value(logits).shape().to_vec();
    if shape.len() != 3 || shape[0] != batch.rows() || shape[1] != batch.width() {
        return Err(Error::Shape(format!(
            "logits {:?} do not match batch {}x{}",
            shape,
            batch.rows(),
            batch.width()
        )));
    }
    let (targets, resp_mask, ctx_mask, n_resp, n_ctx) = target_masks::<T>(batch);
    if n_resp == 0 {
        return Err(Error::Contract("batch has no response targets".into()));
    }
    let flat = tape.reshape(logits, &[shape[0] * shape[1], shape[2]])?;
    let nll = tape.cross_entropy(flat, targets)?;

    let resp_mask = tape.constant(resp_mask);
    let masked_resp = tape.mul(nll, resp_mask)?;
    let sum_resp = tape.sum(masked_resp);
    let response = tape.scale(sum_resp, T::from_f64(1.0 / n_resp as f64));

    let (context, has_context) = if n_ctx == 0 {
        (tape.constant(Tensor::scalar(T::zero())), false)
    } else {
        let ctx_mask = tape.constant(ctx_mask);
        let masked_ctx = tape.mul(nll, ctx_mask)?;
        let sum_ctx = tape.sum(masked_ctx);
        (tape.scale(sum_ctx, T::from_f64(1.0 / n_ctx as f64)), true)
    };

    let weighted_ctx = tape.scale(context, lambda);
    let joint = tape.add(response, weighted_ctx)?;
    Ok(LossNodes {
        joint,
        response,
        context,
        response_targets: n_resp,
        context_targets: n_ctx,
        has_context,
    })
}

/// Mean NLL over response targets (weight-1 positions).
pub fn response_nll<T: Scalar>(
    tape: &mut Tape<T>,
    logits: NodeId,
    batch: &Batch,
) -> Result<NodeId> {
    Ok(joint_loss_nodes(tape, logits, batch, T::zero())?.response)
}

/// Mean NLL over context targets; 0 (flagged) when there are none.
pub fn context_nll<T: Scalar>(
    tape: &mut Tape<T>,
    logits: NodeId,
    batch: &Batch,
) -> Result<(NodeId, bool)> {
    let nodes = joint_loss_nodes(tape, logits, batch, T::zero())?;
    Ok((nodes.context, nodes.has_context))
}

/// scale * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5).
pub fn noam_lr(step: usize, d_model: usize, warmup: usize, scale: f64) -> Result<f64> {
    if step == 0 {
        return Err(Error::Contract("noam_lr step must be >= 1".into()));
    }
    if warmup == 0 || d_model == 0 {
        return Err(Error::Contract("warmup and d_model must be >= 1".into()));
    }
    let s = step as f64;
    let w = warmup as f64;
    Ok(scale * (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5)))
}

/// Adam first/second moment buffers plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: usize,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        Self {
            m: params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect(),
            v: params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }
}

/// One bias-corrected Adam update from the gradients stored in `params`.
/// A non-finite gradient aborts the step with parameters untouched.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    state: &mut AdamState<T>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(Error::Shape(
            "optimizer state does not match parameters".into(),
        ));
    }
    for p in params.iter() {
        if !p.grad.all_finite() {
            return Err(Error::Train(format!("non-finite gradient in {}", p.name)));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::from_f64(beta1);
    let b2 = T::from_f64(beta2);
    let one = T::one();
    let corr1 = T::from_f64(1.0 - beta1.powi(t));
    let corr2 = T::from_f64(1.0 - beta2.powi(t));
    let lr_t = T::from_f64(lr);
    let eps_t = T::from_f64(eps);

    for (pid, p) in params.iter_mut().enumerate() {
        let m = state.m[pid].data_mut();
        let v = state.v[pid].data_mut();
        let g = p.grad.data();
        for ((w, (&gi, mi)), vi) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(g.iter().zip(m.iter_mut()))
            .zip(v.iter_mut())
        {
            *mi = b1 * *mi + (one - b1) * gi;
            *vi = b2 * *vi + (one - b2) * gi * gi;
            let m_hat = *mi / corr1;
            let v_hat = *vi / corr2;
            *w = *w - lr_t * m_hat / (v_hat.sqrt() + eps_t);
        }
    }
    Ok(())
}

/// Scales gradients so the global L2 norm does not exceed `max_norm`;
/// returns the pre-clip norm.
pub fn clip_grad_norm<T: Scalar>(params: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for p in params.iter() {
        for &g in p.grad.data() {
            let g = g.to_f64();
            sq += g * g;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let factor = T::from_f64(max_norm / norm);
        for p in params.iter_mut() {
            for g in p.grad.data_mut() {
                *g *= factor;
            }
        }
    }
    norm
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
}

#[derive(Debug)]
pub struct TrainRun {
    pub checkpoint: ModelCheckpoint,
    pub history: Vec<LossRecord>,
}

/// Joint loss over a whole split in inference mode: the response and context
/// means are pooled across all batches before the lambda combination.
pub fn eval_loss(
    model: &Model<f32>,
    seqs: &[AssembledSequence],
    lambda: f32,
    batch_size: usize,
) -> Result<f64> {
    let mut sum_resp = 0.0f64;
    let mut sum_ctx = 0.0f64;
    let mut n_resp = 0usize;
    let mut n_ctx = 0usize;
    for batch in make_batches(seqs, batch_size, None)? {
        let mut tape = Tape::new();
        let logits = model.forward::<ChaCha8Rng>(&mut tape, &batch.ids, None)?;
        let nodes = joint_loss_nodes(&mut tape, logits, &batch, lambda)?;
        sum_resp += tape.value(nodes.response).item()?.to_f64() * nodes.response_targets as f64;
        sum_ctx += tape.value(nodes.context).item()?.to_f64() * nodes.context_targets as f64;
        n_resp += nodes.response_targets;
        n_ctx += nodes.context_targets;
    }
    if n_resp == 0 {
        return Err(Error::Contract(
            "validation split has no response targets".into(),
        ));
    }
    let resp = sum_resp / n_resp as f64;
    let ctx = if n_ctx == 0 {
        0.0
    } else {
        sum_ctx / n_ctx as f64
    };
    Ok(resp + lambda as f64 * ctx)
}

/// Runs the training loop: forward, joint loss, backward, global-norm clip,
/// Adam with the Noam schedule. Validates every `validation_interval` steps
/// (and at the last step) and returns the checkpoint with the lowest
/// validation loss. Fully deterministic for a fixed config.
pub fn train(
    model: &mut Model<f32>,
    train_seqs: &[AssembledSequence],
    valid_seqs: &[AssembledSequence],
    cfg: &TrainConfig,
    vocab_hash: &str,
    mut on_record: impl FnMut(&LossRecord),
) -> Result<TrainRun> {
    let cfg = cfg.clone().validated()?;
    if train_seqs.is_empty() {
        return Err(Error::Contract("training split is empty".into()));
    }
    if valid_seqs.is_empty() {
        return Err(Error::Contract("validation split is empty".into()));
    }
    let lambda = cfg.lambda;
    let d_model = model.config().d_model;
    let mut adam = AdamState::new(model.params());
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history: Vec<LossRecord> = Vec::new();
    let mut best: Option<(f64, usize, ParamStore<f32>)> = None;

    let mut step = 0usize;
    let mut epoch = 0u64;
    'outer: loop {
        let batches = make_batches(
            train_seqs,
            cfg.batch_size,
            Some(cfg.seed.wrapping_add(epoch)),
        )?;
        for batch in batches {
            step += 1;
            model.params_mut().zero_grads();
            let mut tape = Tape::new();
            let logits = model.forward(&mut tape, &batch.ids, Some(&mut dropout_rng))?;
            let nodes = joint_loss_nodes(&mut tape, logits, &batch, lambda)?;
            let train_loss = tape.value(nodes.joint).item()?.to_f64();
            if !train_loss.is_finite() {
                // history so far has already been streamed to on_record
                return Err(Error::Train(format!(
                    "loss diverged to {} at step {} ({} records kept)",
                    train_loss,
                    step,
                    history.len()
                )));
            }
            tape.backward(nodes.joint, model.params_mut())?;
            drop(tape);
            clip_grad_norm(model.params_mut(), cfg.grad_clip);
            let lr = noam_lr(step, d_model, cfg.warmup_steps, cfg.lr_scale)?;
            adam_step(
                model.params_mut(),
                &mut adam,
                lr,
                cfg.beta1,
                cfg.beta2,
                cfg.eps,
            )?;

            let validate = step % cfg.validation_interval == 0 || step == cfg.max_steps;
            let val_loss = if validate {
                let v = eval_loss(model, valid_seqs, lambda, cfg.batch_size)?;
                let improved = best.as_ref().map_or(true, |(bv, _, _)| v < *bv);
                if improved {
                    best = Some((v, step, model.params().clone()));
                }
                Some(v)
            } else {
                None
            };
            let record = LossRecord {
                step,
                lr,
                train_loss,
                val_loss,
            };
            on_record(&record);
            history.push(record);
            if step == cfg.max_steps {
                break 'outer;
            }
        }
        epoch += 1;
    }

    let (val_loss, best_step, best_params) = best.expect("at least one validation ran");
    let mut best_model = model.clone();
    *best_model.params_mut() = best_params;
    let checkpoint =
        ModelCheckpoint::from_model(&best_model, vocab_hash, best_step as u64, val_loss, lambda);
    Ok(TrainRun {
        checkpoint,
        history,
    })
}
