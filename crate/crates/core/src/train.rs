//! Optimization of a regressor under a chosen loss: Adam with seeded
//! minibatch shuffling, Gaussian input-noise injection, early stopping on
//! validation loss, and ensemble orchestration.

use crate::data::WindowedSamples;
use crate::error::{Error, Result};
use crate::loss::{eval_mse, LossSpec};
use crate::regressor::{backward, forward, init_params, ModelConfig, ParamVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Noise injected into inputs: std per channel = noise_frac x channel
    /// std over the training split.
    pub noise_frac: f64,
    pub seed: u64,
    /// Extend noise injection to the targets as well.
    pub noise_targets: bool,
    /// Validate with plain MSE instead of the training loss.
    pub validate_with_mse: bool,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            batch_size: 128,
            max_epochs: 500,
            patience: 5,
            noise_frac: 0.1,
            seed: 0,
            noise_targets: false,
            validate_with_mse: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return Err(Error::BadParameter("betas must lie in (0, 1)".into()));
        }
        if self.patience == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::BadParameter(
                "patience, batch_size, max_epochs must be positive".into(),
            ));
        }
        if self.noise_frac < 0.0 || !(self.lr > 0.0) {
            return Err(Error::BadParameter(
                "noise_frac must be nonnegative and lr positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> SplitSpec {
        SplitSpec {
            train: 0.5,
            val: 0.1,
            test: 0.4,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.train <= 0.0 || self.val <= 0.0 || self.test <= 0.0 {
            return Err(Error::BadParameter("split fractions must be positive".into()));
        }
        if ((self.train + self.val + self.test) - 1.0).abs() > 1e-12 {
            return Err(Error::BadParameter("split fractions must sum to 1".into()));
        }
        Ok(())
    }
}

/// Contiguous time-ordered split of windowed samples.
#[derive(Debug, Clone)]
pub struct SplitWindows {
    pub train: WindowedSamples,
    pub val: WindowedSamples,
    pub test: WindowedSamples,
}

/// Partition samples into train/val/test segments in order. Segment sizes
/// are floors of the fractions; the remainder goes to the test segment.
pub fn split_contiguous(samples: &WindowedSamples, spec: &SplitSpec) -> Result<SplitWindows> {
    spec.validate()?;
    let n = samples.len();
    let n_train = (spec.train * n as f64).floor() as usize;
    let n_val = (spec.val * n as f64).floor() as usize;
    let n_test = n - n_train - n_val;
    if n_train < 10 || n_val < 10 || n_test < 10 {
        return Err(Error::TooFewSamples(format!(
            "split sizes ({n_train}, {n_val}, {n_test}) need at least 10 each"
        )));
    }
    Ok(SplitWindows {
        train: samples.slice(0, n_train),
        val: samples.slice(n_train, n_train + n_val),
        test: samples.slice(n_train + n_val, n),
    })
}

/// First and second moment accumulators for Adam.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> AdamState {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One Adam update with bias correction. Returns an error on non-finite
/// gradients so the caller can attribute the failing batch.
pub fn adam_step(
    params: &mut ParamVector,
    grads: &ParamVector,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::ShapeMismatch("adam state/grad length".into()));
    }
    if grads.values.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient { batch_index: 0 });
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads.values[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params.values[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps_adam);
    }
    Ok(())
}

/// A trained model: the best-validation parameter snapshot and the loss
/// history that produced it.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub params: ParamVector,
    pub cfg: ModelConfig,
    pub history: Vec<(f64, f64)>,
    pub stopped_epoch: usize,
    pub best_epoch: usize,
    pub best_val: f64,
}

/// Train under `loss` with early stopping.
///
/// Each epoch shuffles the training samples (seeded), perturbs the inputs
/// of every minibatch with zero-mean Gaussian noise scaled per channel from
/// the training split, and applies Adam. Validation (no noise) runs after
/// each epoch; training stops once `patience` consecutive epochs fail to
/// improve the best validation loss, returning the best snapshot.
///
/// When `epoch_log` is given, one CSV line per epoch is appended:
/// `epoch,train_loss,val_loss,best_val,elapsed_s`.
pub fn train(
    cfg: &ModelConfig,
    loss: &LossSpec,
    data: &SplitWindows,
    tcfg: &TrainConfig,
    mut epoch_log: Option<&mut dyn Write>,
) -> Result<TrainedModel> {
    tcfg.validate()?;
    loss.validate()?;
    let started = std::time::Instant::now();
    let mut params = init_params(cfg, tcfg.seed)?;
    let mut adam = AdamState::new(params.len());
    // separate stream for shuffling and noise so the initializer draws are
    // independent of the epoch schedule
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed ^ 0x9e37_79b9_7f4a_7c15);

    let n_train = data.train.len();
    let f = data.train.n_features;
    // per-channel noise scale from the training split only
    let mut noise_std = vec![0.0; f];
    if tcfg.noise_frac > 0.0 {
        let rows = n_train * data.train.history;
        for c in 0..f {
            let mut mean = 0.0;
            for r in 0..rows {
                mean += data.train.windows[r * f + c];
            }
            mean /= rows as f64;
            let mut var = 0.0;
            for r in 0..rows {
                let d = data.train.windows[r * f + c] - mean;
                var += d * d;
            }
            noise_std[c] = tcfg.noise_frac * (var / rows as f64).sqrt();
        }
    }
    let target_noise_std = if tcfg.noise_targets && tcfg.noise_frac > 0.0 {
        let mean = data.train.targets.iter().sum::<f64>() / n_train as f64;
        let var = data
            .train
            .targets
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / n_train as f64;
        tcfg.noise_frac * var.sqrt()
    } else {
        0.0
    };

    // precomputed output weights are indexed by training sample, so batches
    // slice them; validation targets are different samples and must go
    // through the density model instead
    let full_weights = match loss.kind {
        crate::loss::LossKind::Ow => loss.ow_weights.clone(),
        _ => None,
    };
    if let Some(w) = &full_weights {
        if w.len() != n_train {
            return Err(Error::LengthMismatch {
                expected: n_train,
                got: w.len(),
            });
        }
    }
    let mut batch_spec = loss.clone();
    batch_spec.ow_weights = None;
    let val_spec = {
        let mut s = loss.clone();
        s.ow_weights = None;
        if !tcfg.validate_with_mse {
            s.validate()?;
        }
        s
    };

    let val_batch = data.val.to_batch();
    let mut indices: Vec<usize> = (0..n_train).collect();
    let mut history: Vec<(f64, f64)> = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_params = params.clone();
    let mut wait = 0usize;

    for epoch in 1..=tcfg.max_epochs {
        indices.shuffle(&mut rng);
        let mut train_loss_acc = 0.0;
        for (batch_index, chunk) in indices.chunks(tcfg.batch_size).enumerate() {
            let mut batch = data.train.gather(chunk);
            if tcfg.noise_frac > 0.0 {
                for (i, v) in batch.inputs.iter_mut().enumerate() {
                    let c = i % f;
                    if noise_std[c] > 0.0 {
                        let n: f64 = StandardNormal.sample(&mut rng);
                        *v += noise_std[c] * n;
                    }
                }
                if target_noise_std > 0.0 {
                    for v in batch.targets.iter_mut() {
                        let n: f64 = StandardNormal.sample(&mut rng);
                        *v += target_noise_std * n;
                    }
                }
            }
            let predictions = forward(&params, cfg, &batch)?;
            let eval = if let Some(w) = &full_weights {
                batch_spec.ow_weights = Some(chunk.iter().map(|&i| w[i]).collect());
                batch_spec.evaluate(&batch.targets, &predictions)?
            } else {
                loss.evaluate(&batch.targets, &predictions)?
            };
            if !eval.value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    history: history.clone(),
                });
            }
            train_loss_acc += eval.value * chunk.len() as f64;
            let grads = backward(&params, cfg, &batch, &eval.grad)?;
            adam_step(&mut params, &grads, &mut adam, tcfg).map_err(|e| match e {
                Error::NonFiniteGradient { .. } => Error::NonFiniteGradient { batch_index },
                other => other,
            })?;
        }
        let train_loss = train_loss_acc / n_train as f64;
        if !train_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                history: history.clone(),
            });
        }

        let val_pred = forward(&params, cfg, &val_batch)?;
        let val_loss = if tcfg.validate_with_mse {
            eval_mse(&val_batch.targets, &val_pred)?.value
        } else {
            val_spec.evaluate(&val_batch.targets, &val_pred)?.value
        };
        history.push((train_loss, val_loss));
        if let Some(log) = epoch_log.as_deref_mut() {
            writeln!(
                log,
                "{epoch},{train_loss},{val_loss},{},{}",
                best_val.min(val_loss),
                started.elapsed().as_secs_f64()
            )?;
        }
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_params = params.clone();
            wait = 0;
        } else {
            wait += 1;
            if wait >= tcfg.patience {
                break;
            }
        }
    }

    Ok(TrainedModel {
        params: best_params,
        cfg: cfg.clone(),
        stopped_epoch: history.len(),
        best_epoch,
        best_val,
        history,
    })
}

/// Linear-interpolation percentile of unsorted values, `q` in [0, 1].
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if sorted.len() == 1 {
        return sorted[0];
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Mean and 10th/90th percentile summary of one metric across members.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub p10: f64,
    pub p90: f64,
}

pub fn aggregate(values: &[f64]) -> Aggregate {
    Aggregate {
        mean: values.iter().sum::<f64>() / values.len() as f64,
        p10: percentile(values, 0.1),
        p90: percentile(values, 0.9),
    }
}

/// Outcome of an ensemble run: per-member models (by seed order), failures
/// flagged rather than fatal, and the best-validation aggregate.
#[derive(Debug)]
pub struct EnsembleResult {
    pub members: Vec<Result<TrainedModel>>,
    pub seeds: Vec<u64>,
    pub best_val: Option<Aggregate>,
}

impl EnsembleResult {
    pub fn succeeded(&self) -> Vec<&TrainedModel> {
        self.members.iter().filter_map(|m| m.as_ref().ok()).collect()
    }

    pub fn failures(&self) -> Vec<(u64, String)> {
        self.members
            .iter()
            .zip(&self.seeds)
            .filter_map(|(m, s)| m.as_ref().err().map(|e| (*s, e.to_string())))
            .collect()
    }
}

/// Train `n` independently seeded members. Members run in parallel; results
/// are keyed by seed order so execution order cannot affect the outcome.
/// Individual failures are recorded and the rest continue.
pub fn train_ensemble(
    n: usize,
    seeds: &[u64],
    cfg: &ModelConfig,
    loss: &LossSpec,
    data: &SplitWindows,
    tcfg: &TrainConfig,
) -> Result<EnsembleResult> {
    if n == 0 || seeds.len() < n {
        return Err(Error::BadParameter(format!(
            "need at least {n} seeds, have {}",
            seeds.len()
        )));
    }
    let seeds = &seeds[..n];
    {
        let mut unique = seeds.to_vec();
        unique.sort_unstable();
        unique.dedup();
        if unique.len() != seeds.len() {
            return Err(Error::BadParameter("seeds must be distinct".into()));
        }
    }
    let members: Vec<Result<TrainedModel>> = seeds
        .par_iter()
        .map(|&seed| {
            let member_cfg = TrainConfig { seed, ..*tcfg };
            train(cfg, loss, data, &member_cfg, None)
        })
        .collect();
    let vals: Vec<f64> = members
        .iter()
        .filter_map(|m| m.as_ref().ok().map(|t| t.best_val))
        .collect();
    let best_val = if vals.is_empty() {
        None
    } else {
        Some(aggregate(&vals))
    };
    Ok(EnsembleResult {
        members,
        seeds: seeds.to_vec(),
        best_val,
    })
}
