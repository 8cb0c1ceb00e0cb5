//! Loss, Adam with global-norm clipping, and the epoch loop with early
//! stopping on dev token accuracy.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::TrainingExample;
use crate::error::{Error, Result};
use crate::eval::{phonetic_accuracy, Accuracy};
use crate::model::{
    decode_teacher_forced, encode, is_regularized, time_major_targets, ModelParams,
};
use crate::rng::{substream, Substream};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub l2_penalty: f32,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub early_stop_patience: usize,
    pub early_stopping: bool,
    pub grad_clip_norm: f32,
    /// Examples per gradient shard. Shards are fixed by position within the
    /// batch and summed in order, so results do not depend on `workers`.
    pub micro_batch: usize,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 100,
            lr: 0.01,
            l2_penalty: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            early_stop_patience: 3,
            early_stopping: true,
            grad_clip_norm: 5.0,
            micro_batch: 25,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, v) in [
            ("train.epochs", self.epochs),
            ("train.batch_size", self.batch_size),
            ("train.early_stop_patience", self.early_stop_patience),
            ("train.micro_batch", self.micro_batch),
            ("train.workers", self.workers),
        ] {
            if v == 0 {
                out.push(format!("{name} must be positive"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            out.push(format!("train.lr must be positive, got {}", self.lr));
        }
        if !(self.l2_penalty >= 0.0 && self.l2_penalty.is_finite()) {
            out.push(format!(
                "train.l2_penalty must be non-negative, got {}",
                self.l2_penalty
            ));
        }
        for (name, b) in [
            ("train.adam_beta1", self.adam_beta1),
            ("train.adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&b) {
                out.push(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if self.adam_eps <= 0.0 {
            out.push(format!(
                "train.adam_eps must be positive, got {}",
                self.adam_eps
            ));
        }
        if self.grad_clip_norm <= 0.0 {
            out.push(format!(
                "train.grad_clip_norm must be positive, got {}",
                self.grad_clip_norm
            ));
        }
        if self.early_stop_patience > self.epochs {
            out.push(format!(
                "train.early_stop_patience ({}) exceeds train.epochs ({})",
                self.early_stop_patience, self.epochs
            ));
        }
        out
    }
}

/// Sum over all rows of `-log softmax(logits)[target]`.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<f32> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let ce = tape.cross_entropy(l, targets)?;
    Ok(tape.value(ce).item())
}

/// `penalty · Σ‖W‖²` over LSTM and Bi-LSTM weight matrices.
pub fn l2_term(params: &ModelParams, penalty: f32) -> f32 {
    let total: f64 = params
        .named()
        .into_iter()
        .filter(|(name, _)| is_regularized(name))
        .flat_map(|(_, t)| t.data().iter().map(|&x| f64::from(x) * f64::from(x)))
        .sum();
    (f64::from(penalty) * total) as f32
}

fn l2_on_tape(
    tape: &mut Tape,
    names: &[String],
    vars: &[Var],
    penalty: f32,
) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for (name, &v) in names.iter().zip(vars) {
        if !is_regularized(name) {
            continue;
        }
        let s = tape.sum_squares(v)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, s)?,
            None => s,
        });
    }
    acc.map(|a| tape.scale(a, penalty)).transpose()
}

/// Loss and parameter gradients of one shard. `scale` turns the summed
/// cross-entropy into its share of the batch mean.
fn shard_gradients(
    params: &ModelParams,
    shard: &[&TrainingExample],
    scale: f32,
    l2_penalty: Option<f32>,
) -> Result<(f64, Vec<Vec<f32>>)> {
    let cfg = &params.config;
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, true);
    let enc = encode(&mut tape, cfg, &p, shard)?;
    let logits = decode_teacher_forced(&mut tape, cfg, &p, enc.z_new, shard)?;
    let ce = tape.cross_entropy(logits, &time_major_targets(cfg, shard))?;
    let mut loss = tape.scale(ce, scale)?;
    if let Some(penalty) = l2_penalty.filter(|&x| x > 0.0) {
        if let Some(l2) = l2_on_tape(&mut tape, &params.names(), &p.all, penalty)? {
            loss = tape.add(loss, l2)?;
        }
    }
    tape.backward(loss)?;
    let grads = params
        .tensors()
        .iter()
        .zip(&p.all)
        .map(|(t, &v)| {
            tape.grad(v)
                .map_or_else(|| vec![0.0; t.len()], <[f32]>::to_vec)
        })
        .collect();
    Ok((f64::from(tape.value(loss).item()), grads))
}

/// Batch loss (mean cross-entropy plus L2) and its gradients. The batch is
/// cut into fixed shards of `micro_batch`; shard results are summed in
/// shard order whatever the number of workers.
pub fn batch_gradients(
    params: &ModelParams,
    batch: &[&TrainingExample],
    config: &TrainConfig,
    pool: Option<&rayon::ThreadPool>,
) -> Result<(f64, Vec<Vec<f32>>)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f32;
    let shards: Vec<&[&TrainingExample]> = batch.chunks(config.micro_batch.max(1)).collect();
    let run = |i: usize| {
        shard_gradients(
            params,
            shards[i],
            scale,
            (i == 0).then_some(config.l2_penalty),
        )
    };
    let results: Vec<Result<(f64, Vec<Vec<f32>>)>> = match pool {
        Some(pool) if shards.len() > 1 => {
            use rayon::prelude::*;
            pool.install(|| (0..shards.len()).into_par_iter().map(run).collect())
        }
        _ => (0..shards.len()).map(run).collect(),
    };
    let mut total_loss = 0.0;
    let mut total: Option<Vec<Vec<f32>>> = None;
    for r in results {
        let (loss, grads) = r?;
        total_loss += loss;
        match &mut total {
            None => total = Some(grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(grads) {
                    a.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
        }
    }
    Ok((total_loss, total.expect("at least one shard")))
}

/// First and second moment buffers for each parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes
            .into_iter()
            .map(|n| (vec![0.0; n], vec![0.0; n]))
            .unzip();
        OptimizerState { step: 0, m, v }
    }

    pub fn for_params(params: &ModelParams) -> Self {
        Self::new(params.tensors().iter().map(|t| t.len()))
    }
}

/// Global L2 norm of a gradient set.
pub fn global_norm(grads: &[Vec<f32>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter().map(|&x| f64::from(x) * f64::from(x)))
        .sum::<f64>()
        .sqrt()
}

/// One bias-corrected Adam update after clipping the gradients to a global
/// norm of `grad_clip_norm`. Non-finite gradients abort with the name of the
/// first offending parameter.
pub fn adam_step(
    params: Vec<&mut Tensor>,
    names: &[String],
    grads: &[Vec<f32>],
    state: &mut OptimizerState,
    config: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Dimension(format!(
            "{} parameters, {} gradients, {} optimizer buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), name) in params.iter().zip(grads).zip(names) {
        if p.len() != g.len() {
            return Err(Error::Dimension(format!(
                "{name}: gradient has {} values, parameter {}",
                g.len(),
                p.len()
            )));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!(
                "non-finite gradient for parameter {name}"
            )));
        }
    }
    let norm = global_norm(grads);
    let clip = f64::from(config.grad_clip_norm);
    let factor = if norm > clip { clip / norm } else { 1.0 };
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let lr = f64::from(config.lr);
    for (i, p) in params.into_iter().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            let g = f64::from(grads[i][j]) * factor;
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let update = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + config.adam_eps);
            *x = (f64::from(*x) - update) as f32;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean batch loss (cross-entropy plus L2) over the epoch.
    pub train_loss: f64,
    /// Dev metrics; absent when there is no dev set.
    pub dev: Option<Accuracy>,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best-dev parameters, or the final ones without a dev set.
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// History as CSV. With `include_time = false` the `seconds` column is left
/// empty so the text depends only on the seed and inputs.
pub fn history_csv(history: &[EpochRecord], include_time: bool) -> String {
    let mut out = String::from("epoch,train_loss,dev_loss,dev_token_acc,dev_seq_acc,seconds\n");
    for r in history {
        let (dl, dt, ds) = match &r.dev {
            Some(a) => (
                a.mean_loss.to_string(),
                a.token_acc.to_string(),
                a.seq_acc.to_string(),
            ),
            None => Default::default(),
        };
        let secs = if include_time {
            format!("{:.3}", r.seconds)
        } else {
            String::new()
        };
        writeln!(out, "{},{},{dl},{dt},{ds},{secs}", r.epoch, r.train_loss).unwrap();
    }
    out
}

/// Called after every epoch; return `false` to stop.
pub type EpochHook<'a> = dyn FnMut(&EpochRecord, &ModelParams) -> bool + 'a;

pub fn train(
    init: ModelParams,
    train_set: &[TrainingExample],
    dev_set: &[TrainingExample],
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    train_with_hook(init, train_set, dev_set, config, seed, &mut |_, _| true)
}

pub fn train_with_hook(
    init: ModelParams,
    train_set: &[TrainingExample],
    dev_set: &[TrainingExample],
    config: &TrainConfig,
    seed: u64,
    hook: &mut EpochHook<'_>,
) -> Result<TrainOutcome> {
    let problems = config.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    if train_set.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    let early_stopping = config.early_stopping && !dev_set.is_empty();
    if config.early_stopping && dev_set.is_empty() {
        log::warn!("dev set is empty; early stopping disabled");
    }
    let pool = if config.workers > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(config.workers)
                .build()
                .map_err(|e| Error::Contract(format!("cannot start worker pool: {e}")))?,
        )
    } else {
        None
    };
    let names = init.names();
    let mut params = init;
    let mut state = OptimizerState::for_params(&params);
    let mut rng = substream(seed, Substream::Shuffle);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&TrainingExample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss, grads) = batch_gradients(&params, &batch, config, pool.as_ref())?;
            adam_step(params.tensors_mut(), &names, &grads, &mut state, config)?;
            loss_sum += loss;
            batches += 1;
        }
        let dev = if dev_set.is_empty() {
            None
        } else {
            Some(phonetic_accuracy(&params, dev_set, config.batch_size)?)
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            dev,
            seconds: started.elapsed().as_secs_f64(),
        };
        match &dev {
            Some(a) => log::info!(
                "epoch {epoch}: train loss {:.4}, dev loss {:.4}, dev token acc {:.4}, dev seq acc {:.4}",
                record.train_loss,
                a.mean_loss,
                a.token_acc,
                a.seq_acc
            ),
            None => log::info!("epoch {epoch}: train loss {:.4}", record.train_loss),
        }
        let keep_going = hook(&record, &params);
        history.push(record);
        if let Some(a) = dev {
            if best.as_ref().is_none_or(|(acc, _, _)| a.token_acc > *acc) {
                best = Some((a.token_acc, epoch, params.clone()));
                since_best = 0;
            } else {
                since_best += 1;
            }
            if early_stopping && since_best >= config.early_stop_patience {
                log::info!("early stopping after epoch {epoch}");
                stopped_early = true;
                break;
            }
        }
        if !keep_going {
            break;
        }
    }
    let (params, best_epoch) = match best {
        Some((_, epoch, p)) => (p, epoch),
        None => (params, history.len()),
    };
    Ok(TrainOutcome {
        params,
        history,
        best_epoch,
        stopped_early,
    })
}
