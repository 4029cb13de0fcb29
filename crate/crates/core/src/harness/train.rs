use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::eval::{evaluate, prepare_eval_set, EvalConfig};
use super::optim::{AdamW, AdamWConfig, StepOutcome};
use crate::augment::{normalize_pair, AugmentConfig, Augmenter, TrainingSample};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::io::Sample;
use crate::losses::{loss_g2, LossConfig};
use crate::metrics::MetricConfig;
use crate::net::{assemble_input, stack_batch, BlockKind, Mode, NetConfig, Network};
use crate::seed::{rng_from, split_seed};

// seed streams
const S_INIT: u64 = 0x1417;
const S_EPOCH: u64 = 0xE90C;
const S_VAL: u64 = 0x7A1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    #[serde(flatten)]
    pub optimizer: AdamWConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub net: NetConfig,
    pub augment: AugmentConfig,
    /// Share of the data set held out for validation by the command-line
    /// tool.
    pub val_fraction: f64,
    /// Sparsity levels whose mean RMSE selects the best checkpoint. Level 0
    /// only measures the fallback scale, so it is left out by default.
    pub val_levels: Vec<f64>,
    /// When false, samples that already carry an X are used as stored.
    pub augment_on_the_fly: bool,
    /// Step-loss log period (0 disables step records).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamWConfig::default(),
            epochs: 20,
            batch_size: 8,
            seed: 0,
            loss: LossConfig::default(),
            net: NetConfig::desk(),
            augment: AugmentConfig::default(),
            val_fraction: 0.1,
            val_levels: vec![0.01, 0.1, 1.0],
            augment_on_the_fly: true,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::invalid(format!("lr must be positive, got {}", o.lr)));
        }
        for (name, b) in [("beta1", o.beta1), ("beta2", o.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if o.weight_decay < 0.0 || o.eps <= 0.0 {
            return Err(Error::invalid("weight_decay must be >= 0 and eps > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if self.net.block_kind == BlockKind::BN && self.batch_size < 2 {
            return Err(Error::invalid("batch-norm blocks need batch_size >= 2"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::invalid("val_fraction must be in [0, 1)"));
        }
        if !self.augment.target_height.is_multiple_of(self.net.size_divisor()) {
            return Err(Error::invalid(format!(
                "target_height {} is not a multiple of {}",
                self.augment.target_height,
                self.net.size_divisor()
            )));
        }
        self.net.validate()?;
        self.augment.validate()?;
        self.eval_config().validate()
    }

    pub fn steps_per_epoch(&self, train_len: usize) -> usize {
        let full = train_len / self.batch_size;
        let rest = train_len % self.batch_size;
        // a batch-norm net cannot take a final batch of one
        full + usize::from(rest > 1 || (rest == 1 && self.net.block_kind == BlockKind::ReZero))
    }

    fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            sparsity_levels: self.val_levels.clone(),
            metrics: MetricConfig::default(),
            seed: split_seed(self.seed, S_VAL),
            target_height: self.augment.target_height,
            ..EvalConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub skipped: usize,
    pub train_loss: f64,
    /// Mean RMSE over the validation levels, when there is a validation set.
    pub val_rmse: Option<f64>,
}

pub struct TrainOutcome {
    /// Network with the lowest validation RMSE (the last one without a
    /// validation set).
    pub best: Network<f64>,
    pub last: Network<f64>,
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochRecord>,
    /// Batch loss of every step, in order.
    pub step_losses: Vec<f64>,
}

fn log_line(log: &mut dyn Write, value: serde_json::Value) -> Result<()> {
    writeln!(log, "{value}").map_err(|e| Error::io("<training log>", e))
}

/// Minimizes the combined loss over the network defined by `config.net`.
/// Every epoch reshuffles the training set and draws fresh degradations
/// from per-(epoch, sample) seeds; JSON lines describing the run go to
/// `log`.
pub fn train(
    train_set: &[Sample],
    val_set: &[Sample],
    config: &TrainConfig,
    log: &mut dyn Write,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let augmenter = Augmenter::new(config.augment.clone())?;
    let mut net = Network::<f64>::new(config.net, split_seed(config.seed, S_INIT))?;
    let steps_per_epoch = config.steps_per_epoch(train_set.len());
    let total_steps = config.epochs * steps_per_epoch;
    let mut opt = AdamW::new(config.optimizer, net.params(), total_steps);
    let val = prepare_eval_set(val_set, config.augment.target_height)?;
    let eval_config = config.eval_config();

    log_line(
        log,
        json!({
            "event": "config",
            "config": config,
            "train_samples": train_set.len(),
            "val_samples": val_set.len(),
            "parameters": net.parameter_count(),
            "total_steps": total_steps,
        }),
    )?;

    let mut best = net.clone();
    let mut best_rmse = f64::INFINITY;
    let mut best_epoch = None;
    let mut history = Vec::with_capacity(config.epochs);
    let mut step_losses = Vec::with_capacity(total_steps);
    let mut step = 0;
    for epoch in 0..config.epochs {
        let epoch_seed = split_seed(split_seed(config.seed, S_EPOCH), epoch as u64);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng_from(epoch_seed, 0));
        let (mut loss_sum, mut skipped) = (0.0, 0);
        for b in 0..steps_per_epoch {
            let idx = &order[b * config.batch_size..((b + 1) * config.batch_size).min(order.len())];
            let batch = idx
                .iter()
                .map(|&i| {
                    training_sample(
                        &augmenter,
                        &train_set[i],
                        config,
                        split_seed(epoch_seed, 1 + i as u64),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let (loss, outcome) = train_step(&mut net, &mut opt, &batch, &config.loss, step)?;
            if !loss.is_finite() {
                log_line(
                    log,
                    json!({"event": "diverged", "step": step, "loss": loss.to_string()}),
                )?;
                return Err(Error::Diverged { step, loss });
            }
            if outcome == StepOutcome::Skipped {
                skipped += 1;
                log_line(log, json!({"event": "skipped", "step": step}))?;
            }
            if config.log_every > 0 && step % config.log_every == 0 {
                log_line(log, json!({"event": "step", "step": step, "loss": loss}))?;
            }
            loss_sum += loss;
            step_losses.push(loss);
            step += 1;
        }
        let val_rmse = if val.is_empty() {
            None
        } else {
            let table = evaluate(&net, &val, &eval_config)?;
            let r = table.rmse();
            Some(r.iter().sum::<f64>() / r.len() as f64)
        };
        let record = EpochRecord {
            epoch,
            steps: steps_per_epoch,
            skipped,
            train_loss: loss_sum / steps_per_epoch.max(1) as f64,
            val_rmse,
        };
        log::info!(
            "epoch {epoch}: train loss {:.5}, val rmse {:?}",
            record.train_loss,
            record.val_rmse
        );
        log_line(log, json!({"event": "epoch", "record": &record}))?;
        match val_rmse {
            Some(r) if r < best_rmse => {
                best_rmse = r;
                best = net.clone();
                best_epoch = Some(epoch);
            }
            None => {
                best = net.clone();
                best_epoch = Some(epoch);
            }
            _ => {}
        }
        history.push(record);
    }
    log_line(
        log,
        json!({"event": "done", "steps": step, "best_epoch": best_epoch}),
    )?;
    Ok(TrainOutcome {
        best,
        last: net,
        best_epoch,
        history,
        step_losses,
    })
}

fn training_sample(
    aug: &Augmenter,
    s: &Sample,
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainingSample<f64>> {
    match (&s.x, config.augment_on_the_fly) {
        (Some(x), false) => {
            let (rgb, gt) = normalize_pair(&s.rgb, &s.gt, config.augment.target_height)?;
            if x.dims() != gt.dims() {
                return Err(Error::invalid(format!(
                    "sample {}: stored X must already be {}x{}",
                    s.id,
                    gt.height(),
                    gt.width()
                )));
            }
            Ok(TrainingSample {
                rgb,
                x: x.clone(),
                gt,
            })
        }
        _ => aug.sample(&s.rgb, &s.gt, seed),
    }
}

/// Forward, loss averaged over the batch, backward, optimizer update.
/// Returns the batch loss.
pub fn train_step(
    net: &mut Network<f64>,
    opt: &mut AdamW<f64>,
    batch: &[TrainingSample<f64>],
    loss: &LossConfig,
    step: usize,
) -> Result<(f64, StepOutcome)> {
    let inputs = batch
        .iter()
        .map(|s| assemble_input(&s.rgb, &s.x))
        .collect::<Result<Vec<_>>>()?;
    let mut g = Graph::new();
    let input = g.input(stack_batch(&inputs)?);
    let fwd = net.forward(&mut g, input, Mode::Train)?;
    let mut total = None;
    for (k, s) in batch.iter().enumerate() {
        let d = g.batch_item(fwd.output, k)?;
        let (l, _) = loss_g2(&mut g, d, &s.gt, &s.x, loss)?;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    let total = total.ok_or_else(|| Error::invalid("empty batch"))?;
    let mean = g.mul_scalar(total, 1.0 / batch.len() as f64)?;
    let value = g.value(mean).item();
    if !value.is_finite() {
        return Ok((value, StepOutcome::Skipped));
    }
    g.backward(mean)?;
    net.update_running_stats(&fwd);
    let grads: Vec<_> = fwd.params.iter().map(|&p| g.grad(p)).collect();
    let outcome = opt.step(net.params_mut(), &grads, step);
    Ok((value, outcome))
}
