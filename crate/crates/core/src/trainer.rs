//! Training loop: decoupled-weight-decay optimizer, linear warmup with
//! plateau halving, early stopping, per-epoch checkpoints, checkpoint
//! averaging, and warm-started fine-tuning at new depths.
//!
//! Batch members are processed independently (optionally in parallel) and
//! their gradients summed in index order, so runs are bit-reproducible
//! regardless of thread count.

use ndarray::ArrayD;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

use crate::autodiff::{Arr, Tape};
use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::datagen::{Manifest, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::model::{forward_on_tape, init_model, ModelConfig, ModelParams, ParamVars};
use crate::objectives::{training_loss_on_tape, LossConfig, LossTerm};

/// Training hyperparameters. Defaults follow the reference recipe; tests
/// shrink them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub plateau_patience_epochs: usize,
    pub lr_decay_factor: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub finetune_lr: f64,
    pub average_top_k: usize,
    pub grad_clip: f64,
    /// Process batch members on the thread pool. Results are identical
    /// with and without; off forces a strictly single-threaded run.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            warmup_steps: 2000,
            plateau_patience_epochs: 3,
            lr_decay_factor: 0.5,
            max_epochs: 150,
            early_stop_patience: 10,
            weight_decay: 1e-2,
            batch_size: 4,
            seed: 0,
            finetune_lr: 1e-4,
            average_top_k: 5,
            grad_clip: 5.0,
            parallel: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_lr <= 0.0 || self.finetune_lr <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0 < self.lr_decay_factor && self.lr_decay_factor < 1.0) {
            return Err(Error::Config("lr_decay_factor must be in (0, 1)".into()));
        }
        if self.warmup_steps == 0
            || self.plateau_patience_epochs == 0
            || self.max_epochs == 0
            || self.early_stop_patience == 0
            || self.batch_size == 0
            || self.average_top_k == 0
        {
            return Err(Error::Config("counts in the train config must be positive".into()));
        }
        if self.weight_decay < 0.0 || self.grad_clip <= 0.0 {
            return Err(Error::Config("bad weight_decay or grad_clip".into()));
        }
        Ok(())
    }
}

/// Learning-rate schedule: linear warmup to `base_lr` at `warmup_steps`
/// (step is the 1-indexed optimizer update), then one halving per plateau
/// event, a plateau being `plateau_patience_epochs` consecutive
/// non-improving epochs.
pub fn lr_at(step: usize, epochs_since_improvement: usize, cfg: &TrainConfig) -> f64 {
    let warm = if step >= cfg.warmup_steps {
        cfg.base_lr
    } else {
        cfg.base_lr * step as f64 / cfg.warmup_steps as f64
    };
    let halvings = (epochs_since_improvement / cfg.plateau_patience_epochs) as i32;
    warm * cfg.lr_decay_factor.powi(halvings)
}

/// Fine-tuning schedule: constant warm start at `finetune_lr` with the
/// same plateau halving, no warmup.
fn finetune_lr_at(epochs_since_improvement: usize, cfg: &TrainConfig) -> f64 {
    let halvings = (epochs_since_improvement / cfg.plateau_patience_epochs) as i32;
    cfg.finetune_lr * cfg.lr_decay_factor.powi(halvings)
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// First/second moment estimates keyed like the parameter store.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub m: BTreeMap<String, Arr>,
    pub v: BTreeMap<String, Arr>,
    pub step: usize,
}

impl OptimState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros = |p: &ModelParams| -> BTreeMap<String, Arr> {
            p.tensors
                .iter()
                .map(|(k, t)| (k.clone(), ArrayD::zeros(t.raw_dim())))
                .collect()
        };
        Self {
            m: zeros(params),
            v: zeros(params),
            step: 0,
        }
    }

    /// Flattens both moment maps into one archive keyed by prefix.
    pub fn to_tensors(&self) -> BTreeMap<String, Arr> {
        let mut out = BTreeMap::new();
        for (k, t) in &self.m {
            out.insert(format!("m.{k}"), t.clone());
        }
        for (k, t) in &self.v {
            out.insert(format!("v.{k}"), t.clone());
        }
        out
    }

    pub fn from_tensors(
        tensors: BTreeMap<String, Arr>,
        step: usize,
        params: &ModelParams,
    ) -> Result<Self> {
        let mut state = Self::new(params);
        state.step = step;
        for (k, t) in tensors {
            if let Some(rest) = k.strip_prefix("m.") {
                state.m.insert(rest.to_string(), t);
            } else if let Some(rest) = k.strip_prefix("v.") {
                state.v.insert(rest.to_string(), t);
            } else {
                return Err(Error::Checkpoint(format!("unexpected optimizer tensor {k}")));
            }
        }
        Ok(state)
    }
}

/// One decoupled-weight-decay update. `grads` must be keyed like the
/// parameter store; missing keys are treated as zero gradients.
pub fn adamw_step(
    params: &mut ModelParams,
    state: &mut OptimState,
    grads: &BTreeMap<String, Arr>,
    lr: f64,
    weight_decay: f64,
    grad_clip: f64,
) {
    // Global-norm clipping.
    let norm: f64 = grads
        .values()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    let clip_scale = if norm > grad_clip { grad_clip / norm } else { 1.0 };
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for (name, p) in params.tensors.iter_mut() {
        let m = state.m.get_mut(name).expect("moment m");
        let v = state.v.get_mut(name).expect("moment v");
        let zero = ArrayD::zeros(p.raw_dim());
        let g = grads.get(name).unwrap_or(&zero);
        for (((pi, mi), vi), gi) in p
            .iter_mut()
            .zip(m.iter_mut())
            .zip(v.iter_mut())
            .zip(g.iter())
        {
            let gc = gi * clip_scale;
            *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gc;
            *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gc * gc;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *pi -= lr * (mhat / (vhat.sqrt() + ADAM_EPS) + weight_decay * *pi);
        }
    }
}

/// One structured log line per epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub components: BTreeMap<String, f64>,
}

/// Result of a training or fine-tuning run.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub checkpoints: Vec<Checkpoint>,
    pub averaged: ModelParams,
    pub log: Vec<LogRecord>,
    pub stopped_early: bool,
}

impl TrainRun {
    pub fn best_checkpoint(&self) -> &Checkpoint {
        self.checkpoints
            .iter()
            .min_by(|a, b| a.val_loss.partial_cmp(&b.val_loss).unwrap())
            .expect("at least one checkpoint")
    }
}

/// Loss and named gradients of one example.
fn example_grads(
    params: &ModelParams,
    entry_example: &crate::datagen::MixtureExample,
    loss_cfg: &LossConfig,
    depths: (usize, usize),
) -> Result<(f64, BTreeMap<LossTerm, f64>, Vec<Arr>, Vec<String>)> {
    let mut tape = Tape::new(true);
    let pv = ParamVars::new(&mut tape, params);
    let run = forward_on_tape(
        &mut tape,
        &pv,
        params,
        &entry_example.mixture,
        depths.0,
        depths.1,
        true,
    )?;
    let (loss_var, breakdown) =
        training_loss_on_tape(&mut tape, &run.view(), &entry_example.sources, loss_cfg)?;
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite { stage: "loss" });
    }
    let mut grads = tape.backward(loss_var);
    let mut names = Vec::new();
    let mut out = Vec::new();
    for (name, var) in pv.iter() {
        names.push(name.clone());
        out.push(
            grads
                .take(*var)
                .unwrap_or_else(|| ArrayD::zeros(params.tensors[name].raw_dim())),
        );
    }
    Ok((breakdown.total, breakdown.components, out, names))
}

/// Mean loss and gradients over a batch of manifest entries.
fn batch_grads(
    params: &ModelParams,
    manifest: &Manifest,
    batch: &[&ManifestEntry],
    loss_cfg: &LossConfig,
    depths: (usize, usize),
    parallel: bool,
) -> Result<(f64, BTreeMap<LossTerm, f64>, BTreeMap<String, Arr>)> {
    let eval = |entry: &&ManifestEntry| -> Result<_> {
        let ex = manifest.example(entry)?;
        example_grads(params, &ex, loss_cfg, depths)
    };
    let results: Vec<_> = if parallel {
        batch.par_iter().map(eval).collect::<Result<_>>()?
    } else {
        batch.iter().map(eval).collect::<Result<_>>()?
    };
    let n = results.len() as f64;
    let mut total = 0.0;
    let mut comp_sums: BTreeMap<LossTerm, f64> = BTreeMap::new();
    let mut grad_map: BTreeMap<String, Arr> = BTreeMap::new();
    for (loss, comps, grads, names) in results {
        total += loss;
        for (t, v) in comps {
            *comp_sums.entry(t).or_insert(0.0) += v;
        }
        for (name, g) in names.into_iter().zip(grads) {
            match grad_map.get_mut(&name) {
                Some(acc) => *acc += &g,
                None => {
                    grad_map.insert(name, g);
                }
            }
        }
    }
    for g in grad_map.values_mut() {
        *g /= n;
    }
    for v in comp_sums.values_mut() {
        *v /= n;
    }
    Ok((total / n, comp_sums, grad_map))
}

/// Mean validation loss at the given depths.
fn validation_loss(
    params: &ModelParams,
    manifest: &Manifest,
    loss_cfg: &LossConfig,
    depths: (usize, usize),
    parallel: bool,
) -> Result<f64> {
    let entries = manifest.split_entries(Split::Val);
    if entries.is_empty() {
        return Err(Error::Manifest("validation split is empty".into()));
    }
    let eval = |entry: &&ManifestEntry| -> Result<f64> {
        let ex = manifest.example(entry)?;
        let mut tape = Tape::new(false);
        let pv = ParamVars::new(&mut tape, params);
        let run = forward_on_tape(&mut tape, &pv, params, &ex.mixture, depths.0, depths.1, true)?;
        let (_, bd) = training_loss_on_tape(&mut tape, &run.view(), &ex.sources, loss_cfg)?;
        Ok(bd.total)
    };
    let losses: Vec<f64> = if parallel {
        entries.par_iter().map(eval).collect::<Result<_>>()?
    } else {
        entries.iter().map(eval).collect::<Result<_>>()?
    };
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

enum Schedule {
    Warmup,
    Finetune,
}

struct LoopCfg<'a> {
    loss_cfg: &'a LossConfig,
    train_cfg: &'a TrainConfig,
    manifest: &'a Manifest,
    depths: (usize, usize),
    schedule: Schedule,
    out_dir: Option<&'a Path>,
}

fn append_log_line(path: &Path, rec: &LogRecord) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    let line = serde_json::to_string(rec).map_err(|e| Error::Checkpoint(format!("log: {e}")))?;
    writeln!(f, "{line}")?;
    Ok(())
}

fn train_loop(mut params: ModelParams, lc: LoopCfg<'_>) -> Result<TrainRun> {
    lc.train_cfg.validate()?;
    lc.loss_cfg.validate()?;
    let train_entries = lc.manifest.split_entries(Split::Train);
    if train_entries.is_empty() {
        return Err(Error::Manifest("train split is empty".into()));
    }
    let mut optim = OptimState::new(&params);
    let mut checkpoints: Vec<Checkpoint> = Vec::new();
    let mut log = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut epochs_since_improvement = 0usize;
    let mut global_step = 0usize;
    let mut stopped_early = false;
    let log_path = lc.out_dir.map(|d| d.join("train_log.jsonl"));
    if let Some(d) = lc.out_dir {
        std::fs::create_dir_all(d)?;
    }

    for epoch in 0..lc.train_cfg.max_epochs {
        // Seed-determined batch order.
        let mut order: Vec<usize> = (0..train_entries.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(
            lc.train_cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
        );
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut epoch_components: BTreeMap<LossTerm, f64> = BTreeMap::new();
        let mut batches = 0usize;
        let mut last_lr = 0.0;
        for chunk in order.chunks(lc.train_cfg.batch_size) {
            let batch: Vec<&ManifestEntry> = chunk.iter().map(|&i| train_entries[i]).collect();
            let (loss, comps, grads) = batch_grads(
                &params,
                lc.manifest,
                &batch,
                lc.loss_cfg,
                lc.depths,
                lc.train_cfg.parallel,
            )?;
            if !loss.is_finite() {
                return Err(Error::NonFinite { stage: "training" });
            }
            global_step += 1;
            let lr = match lc.schedule {
                Schedule::Warmup => lr_at(global_step, epochs_since_improvement, lc.train_cfg),
                Schedule::Finetune => finetune_lr_at(epochs_since_improvement, lc.train_cfg),
            };
            last_lr = lr;
            adamw_step(
                &mut params,
                &mut optim,
                &grads,
                lr,
                lc.train_cfg.weight_decay,
                lc.train_cfg.grad_clip,
            );
            epoch_loss += loss;
            for (t, v) in comps {
                *epoch_components.entry(t).or_insert(0.0) += v;
            }
            batches += 1;
        }
        epoch_loss /= batches as f64;
        for v in epoch_components.values_mut() {
            *v /= batches as f64;
        }

        let val_loss = validation_loss(
            &params,
            lc.manifest,
            lc.loss_cfg,
            lc.depths,
            lc.train_cfg.parallel,
        )?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite { stage: "validation" });
        }

        let ckpt = Checkpoint {
            params: params.clone(),
            optimizer: optim.clone(),
            loss: lc.loss_cfg.clone(),
            train: lc.train_cfg.clone(),
            epoch,
            val_loss,
            depths: lc.depths,
            loss_label: lc.loss_cfg.label(),
        };
        if let Some(dir) = lc.out_dir {
            save_checkpoint(&dir.join(format!("epoch{epoch:03}")), &ckpt)?;
        }
        checkpoints.push(ckpt);

        let rec = LogRecord {
            epoch,
            step: global_step,
            lr: last_lr,
            train_loss: epoch_loss,
            val_loss,
            components: epoch_components
                .iter()
                .map(|(t, v)| (t.name().to_string(), *v))
                .collect(),
        };
        if let Some(p) = &log_path {
            append_log_line(p, &rec)?;
        }
        log.push(rec);

        // Strictly-lower-than-best improvement rule.
        if val_loss < best_val {
            best_val = val_loss;
            epochs_since_improvement = 0;
        } else {
            epochs_since_improvement += 1;
            if epochs_since_improvement >= lc.train_cfg.early_stop_patience {
                stopped_early = true;
                break;
            }
        }
    }

    let averaged = average_checkpoints(&checkpoints, lc.train_cfg.average_top_k)?;
    if let Some(dir) = lc.out_dir {
        let best = checkpoints
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.val_loss.partial_cmp(&b.1.val_loss).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        let mut avg_ckpt = checkpoints[best].clone();
        avg_ckpt.params = averaged.clone();
        save_checkpoint(&dir.join("averaged"), &avg_ckpt)?;
    }
    Ok(TrainRun {
        checkpoints,
        averaged,
        log,
        stopped_early,
    })
}

/// Trains a fresh model on the manifest's train split.
pub fn train(
    model_cfg: &ModelConfig,
    loss_cfg: &LossConfig,
    train_cfg: &TrainConfig,
    manifest: &Manifest,
    out_dir: Option<&Path>,
) -> Result<TrainRun> {
    let params = init_model(model_cfg, train_cfg.seed)?;
    train_loop(
        params,
        LoopCfg {
            loss_cfg,
            train_cfg,
            manifest,
            depths: (model_cfg.n_sep, model_cfg.n_re),
            schedule: Schedule::Warmup,
            out_dir,
        },
    )
}

/// Selects the `k` lowest-validation-loss checkpoints (clipped to the
/// available count) and averages their parameters tensor-wise.
pub fn average_checkpoints(checkpoints: &[Checkpoint], k: usize) -> Result<ModelParams> {
    if checkpoints.is_empty() {
        return Err(Error::Checkpoint("no checkpoints to average".into()));
    }
    let mut order: Vec<usize> = (0..checkpoints.len()).collect();
    order.sort_by(|&a, &b| {
        checkpoints[a]
            .val_loss
            .partial_cmp(&checkpoints[b].val_loss)
            .unwrap()
            .then(checkpoints[a].epoch.cmp(&checkpoints[b].epoch))
    });
    let chosen = &order[..k.min(order.len())];
    let mut avg = checkpoints[chosen[0]].params.clone();
    let n = chosen.len() as f64;
    for t in avg.tensors.values_mut() {
        t.fill(0.0);
    }
    for &i in chosen {
        for (name, t) in &checkpoints[i].params.tensors {
            *avg.tensors.get_mut(name).expect("matching tensor") += &(t / n);
        }
    }
    Ok(avg)
}

/// Warm-starts a trained checkpoint at new depths and fine-tunes it.
///
/// Requires shared separator/reconstructor parameters, which make shapes
/// depth-independent; non-shared checkpoints with mismatched stack
/// layouts fail to load.
pub fn finetune(
    base: &Checkpoint,
    new_depths: (usize, usize),
    loss_cfg: &LossConfig,
    train_cfg: &TrainConfig,
    manifest: &Manifest,
    out_dir: Option<&Path>,
) -> Result<TrainRun> {
    let (n_sep, n_re) = new_depths;
    if n_sep < 1 || n_re < 1 {
        return Err(Error::Depth("fine-tune depths must be >= 1".into()));
    }
    let base_cfg = &base.params.config;
    if n_sep < base.depths.0 || n_re < base.depths.1 {
        eprintln!(
            "warning: fine-tuning to shallower depths ({:?} -> {:?})",
            base.depths, new_depths
        );
    }
    let mut new_cfg = base_cfg.clone();
    new_cfg.n_sep = n_sep;
    new_cfg.n_re = n_re;
    // Re-validating against the new config catches non-shared stacks whose
    // copy counts no longer line up.
    let params = ModelParams::from_tensors(
        new_cfg.clone(),
        base.params.tensors.clone(),
        base.params.init_seed,
    )?;
    train_loop(
        params,
        LoopCfg {
            loss_cfg,
            train_cfg,
            manifest,
            depths: new_depths,
            schedule: Schedule::Finetune,
            out_dir,
        },
    )
}

/// Convenience used by tests and the CLI: the fine-tune epoch budget is
/// 20 % of the base run unless overridden.
pub fn default_finetune_epochs(base_max_epochs: usize) -> usize {
    (base_max_epochs / 5).max(1)
}
