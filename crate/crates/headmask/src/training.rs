//! Training loops: plain baseline, random head masking, and
//! importance-targeted head masking, all sharing one Adam step path.
//!
//! Masked variants re-sample the mask every batch. The importance variant
//! runs two passes per batch: a throwaway forward/backward on the unmasked
//! model to rank heads by gate gradient (no parameter or moment update),
//! then the real update with the top-n heads masked. Both passes re-seed
//! the dropout generator from (seed, step), so they see identical dropout
//! masks, and exactly one optimizer step happens per batch.

use std::fmt;
use std::fmt::Write as _;
use std::path::Path;

use crate::data::{BatchIter, Corpus, PAD};
use crate::error::{Error, Result};
use crate::importance::{batch_importance, top_n_heads};
use crate::model::{count_heads, ForwardOpts, LossMode, MaskSet, Model, ModelConfig};
use crate::rng::{counter_rng, Stream};
use crate::tensor::Tape;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Baseline,
    Random,
    Impt,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Baseline => write!(f, "baseline"),
            Variant::Random => write!(f, "random"),
            Variant::Impt => write!(f, "impt"),
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "random" => Ok(Variant::Random),
            "impt" => Ok(Variant::Impt),
            other => Err(Error::usage(format!("unknown variant '{}'", other))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub variant: Variant,
    /// Heads masked per batch; ignored for the baseline.
    pub mask_n: usize,
    pub max_steps: usize,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    pub adam_eps: f32,
    pub label_smoothing: f32,
    pub seed: u64,
    /// Dev token-accuracy evaluation period in steps; 0 disables.
    pub eval_every: usize,
    /// Fixed learning rate instead of the schedule (tests, experiments).
    pub lr_override: Option<f32>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Baseline,
            mask_n: 3,
            max_steps: 3000,
            batch_size: 32,
            warmup_steps: 400,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-9,
            label_smoothing: 0.1,
            seed: 42,
            eval_every: 200,
            lr_override: None,
        }
    }
}

/// Inverse-square-root schedule with linear warmup:
/// d_model^-0.5 * min(step^-0.5, step * warmup^-1.5).
pub fn lr_schedule(step: usize, d_model: usize, warmup: usize) -> Result<f32> {
    if step == 0 {
        return Err(Error::usage("lr_schedule: step starts at 1"));
    }
    let s = step as f64;
    let w = (warmup.max(1)) as f64;
    let lr = (d_model as f64).powf(-0.5) * (s.powf(-0.5)).min(s * w.powf(-1.5));
    Ok(lr as f32)
}

/// Label-smoothed cross entropy of `logits[n, v]` against `targets`,
/// averaged over non-pad positions: the standalone form of the loss the
/// model's forward pass assembles internally.
pub fn label_smoothed_loss(
    tape: &mut Tape,
    logits: crate::tensor::TensorId,
    targets: &[u32],
    epsilon: f32,
    pad_id: u32,
) -> Result<crate::tensor::TensorId> {
    let per_token = tape.smoothed_ce(logits, targets, pad_id, epsilon)?;
    let nonpad = targets.iter().filter(|&&t| t != pad_id).count();
    if nonpad == 0 {
        return Err(Error::usage("label_smoothed_loss: all targets are pad"));
    }
    let w = 1.0 / nonpad as f32;
    let weights: Vec<f32> =
        targets.iter().map(|&t| if t == pad_id { 0.0 } else { w }).collect();
    let wt = tape.constant(weights, &[targets.len()])?;
    let weighted = tape.mul(per_token, wt)?;
    tape.sum_all(weighted)
}

/// Adam with bias correction; moments live here, one slot per parameter.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: u64,
}

impl Adam {
    pub fn new(model: &Model, beta1: f32, beta2: f32, eps: f32) -> Self {
        let m = model.params().iter().map(|p| vec![0.0; p.data.len()]).collect();
        let v = model.params().iter().map(|p| vec![0.0; p.data.len()]).collect();
        Adam { m, v, beta1, beta2, eps, t: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update over all parameters. `grads[i]` pairs with parameter i;
    /// missing gradients are zeros.
    pub fn step(&mut self, model: &mut Model, grads: &[Option<Vec<f32>>], lr: f32) {
        self.t += 1;
        let bc1 = 1.0 - (self.beta1 as f64).powi(self.t as i32);
        let bc2 = 1.0 - (self.beta2 as f64).powi(self.t as i32);
        for (i, param) in model.params_mut().iter_mut().enumerate() {
            let Some(grad) = grads[i].as_ref() else {
                // Zero gradient still decays the moments.
                for (m, v) in self.m[i].iter_mut().zip(self.v[i].iter_mut()) {
                    *m *= self.beta1;
                    *v *= self.beta2;
                }
                for (w, (m, v)) in
                    param.data.iter_mut().zip(self.m[i].iter().zip(self.v[i].iter()))
                {
                    let mh = (*m as f64 / bc1) as f32;
                    let vh = (*v as f64 / bc2) as f32;
                    *w -= lr * mh / (vh.sqrt() + self.eps);
                }
                continue;
            };
            for (j, w) in param.data.iter_mut().enumerate() {
                let g = grad[j];
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mh = (*m as f64 / bc1) as f32;
                let vh = (*v as f64 / bc2) as f32;
                *w -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }

    /// FNV-1a over the moment buffers; used to assert the importance pass
    /// leaves the optimizer untouched.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for buf in self.m.iter().chain(self.v.iter()) {
            for v in buf {
                for b in v.to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }
}

pub const TRAIN_LOG_HEADER: &str = "step,variant,loss,lr,dev_metric,masked_heads";

/// One training-log row; `masked` holds flat head ids.
#[derive(Debug, Clone)]
pub struct LogRow {
    pub step: usize,
    pub variant: Variant,
    pub loss: f32,
    pub lr: f32,
    pub dev_metric: Option<f32>,
    pub masked: Vec<usize>,
}

impl LogRow {
    fn csv_row(&self) -> String {
        let dev = self.dev_metric.map(|v| v.to_string()).unwrap_or_default();
        let masked: Vec<String> = self.masked.iter().map(|f| f.to_string()).collect();
        format!(
            "{},{},{},{},{},{}",
            self.step,
            self.variant,
            self.loss,
            self.lr,
            dev,
            masked.join(";")
        )
    }
}

pub fn train_log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from(TRAIN_LOG_HEADER);
    out.push('\n');
    for row in rows {
        writeln!(out, "{}", row.csv_row()).unwrap();
    }
    out
}

pub fn write_train_log(rows: &[LogRow], path: &Path) -> Result<()> {
    std::fs::write(path, train_log_csv(rows))?;
    Ok(())
}

/// Per-step audit of the importance variant's mechanics.
#[derive(Debug, Clone)]
pub struct ImptAudit {
    pub step: usize,
    /// Parameter checksum unchanged across pass 1.
    pub params_untouched: bool,
    /// Adam moment checksum unchanged across pass 1.
    pub moments_untouched: bool,
    /// Flat ids masked in pass 2.
    pub masked: Vec<usize>,
    /// Flat ids of the pass-1 argmax-n heads.
    pub argmax: Vec<usize>,
}

/// Final state of a training run.
#[derive(Debug)]
pub struct TrainState {
    pub model: Model,
    pub adam: Adam,
    pub step: usize,
    pub running_loss: f32,
    pub log: Vec<LogRow>,
    pub audits: Vec<ImptAudit>,
    /// Last dev token accuracy, when eval_every fired at least once.
    pub dev_accuracy: Option<f32>,
}

/// Train a fresh model on the corpus train split.
pub fn train(corpus: &Corpus, model_config: &ModelConfig, cfg: &TrainConfig) -> Result<TrainState> {
    let model = Model::new(model_config.clone(), cfg.seed)?;
    train_model(model, corpus, cfg)
}

pub fn train_baseline(
    corpus: &Corpus,
    model_config: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainState> {
    if cfg.variant != Variant::Baseline {
        return Err(Error::usage("train_baseline: config variant is not baseline"));
    }
    train(corpus, model_config, cfg)
}

pub fn train_random_mask(
    corpus: &Corpus,
    model_config: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainState> {
    if cfg.variant != Variant::Random {
        return Err(Error::usage("train_random_mask: config variant is not random"));
    }
    train(corpus, model_config, cfg)
}

pub fn train_importance_mask(
    corpus: &Corpus,
    model_config: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainState> {
    if cfg.variant != Variant::Impt {
        return Err(Error::usage("train_importance_mask: config variant is not impt"));
    }
    train(corpus, model_config, cfg)
}

/// Uniform sample of `n` distinct heads from the global pool.
pub fn sample_mask(
    config: &ModelConfig,
    n: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<MaskSet> {
    let total = count_heads(config);
    if n > total {
        return Err(Error::usage(format!("mask_n {} exceeds {} heads", n, total)));
    }
    let picks = rand::seq::index::sample(rng, total, n);
    let heads = picks
        .into_iter()
        .map(|flat| crate::model::HeadId::from_flat(flat, config))
        .collect::<Result<Vec<_>>>()?;
    Ok(MaskSet::from_masked(heads))
}

/// Training loop over an existing model (lets callers resume or inject
/// prepared weights).
pub fn train_model(mut model: Model, corpus: &Corpus, cfg: &TrainConfig) -> Result<TrainState> {
    let total = count_heads(&model.config);
    if cfg.mask_n > total && cfg.variant != Variant::Baseline {
        return Err(Error::usage(format!(
            "mask_n {} exceeds the model's {} heads",
            cfg.mask_n, total
        )));
    }
    if cfg.batch_size == 0 || cfg.max_steps == 0 {
        return Err(Error::usage("batch_size and max_steps must be positive"));
    }
    if corpus.train.is_empty() {
        return Err(Error::usage("corpus has no training pairs"));
    }

    let mut adam = Adam::new(&model, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut iter = BatchIter::new(&corpus.train, cfg.batch_size, cfg.seed, true);
    let mut log = Vec::with_capacity(cfg.max_steps);
    let mut audits = Vec::new();
    let mut running_loss = 0.0f32;
    let mut dev_accuracy = None;

    for step in 1..=cfg.max_steps {
        let batch = iter.next_batch();

        let (mask, audit_seed) = match cfg.variant {
            Variant::Baseline => (MaskSet::all_ones(), None),
            Variant::Random => {
                let mut rng = counter_rng(cfg.seed, Stream::Mask, step as u64);
                (sample_mask(&model.config, cfg.mask_n, &mut rng)?, None)
            }
            Variant::Impt => {
                // Pass 1: rank heads on this batch without touching
                // parameters or moments.
                let params_before = model.param_checksum();
                let moments_before = adam.checksum();
                let report = batch_importance(
                    &model,
                    &batch,
                    &MaskSet::all_ones(),
                    cfg.label_smoothing,
                    Some(counter_rng(cfg.seed, Stream::Dropout, step as u64)),
                )?;
                let top = top_n_heads(&report, cfg.mask_n)?;
                let params_untouched = model.param_checksum() == params_before;
                let moments_untouched = adam.checksum() == moments_before;
                let argmax: Vec<usize> =
                    top.iter().map(|h| h.flat(&model.config)).collect();
                (MaskSet::from_masked(top), Some((params_untouched, moments_untouched, argmax)))
            }
        };
        let expected_masked = match cfg.variant {
            Variant::Baseline => 0,
            _ => cfg.mask_n,
        };
        debug_assert_eq!(mask.count_masked(), expected_masked);

        // Pass 2 (the only pass for baseline/random): forward, backward,
        // one Adam update.
        let mut tape = Tape::new();
        let opts = ForwardOpts {
            dropout_rng: Some(counter_rng(cfg.seed, Stream::Dropout, step as u64)),
            loss_mode: LossMode::TokenMean,
            label_smoothing: cfg.label_smoothing,
            gate_overrides: None,
        };
        let out = model.forward(&mut tape, &batch, &mask, opts)?;
        let loss = tape.scalar(out.loss);
        if !loss.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite loss {} at step {}",
                loss, step
            )));
        }
        tape.backward(out.loss)?;
        let grads: Vec<Option<Vec<f32>>> =
            out.param_ids.iter().map(|&id| tape.grad(id).map(<[f32]>::to_vec)).collect();
        drop(tape);

        let lr = match cfg.lr_override {
            Some(lr) => lr,
            None => lr_schedule(step, model.config.d_model, cfg.warmup_steps)?,
        };
        adam.step(&mut model, &grads, lr);

        running_loss = if step == 1 { loss } else { 0.98 * running_loss + 0.02 * loss };
        let masked_flat: Vec<usize> =
            mask.masked_heads().iter().map(|h| h.flat(&model.config)).collect();
        if let Some((params_untouched, moments_untouched, argmax)) = audit_seed {
            audits.push(ImptAudit {
                step,
                params_untouched,
                moments_untouched,
                masked: masked_flat.clone(),
                argmax,
            });
        }

        let dev_metric = if cfg.eval_every > 0
            && (step % cfg.eval_every == 0 || step == cfg.max_steps)
            && !corpus.dev.is_empty()
        {
            let acc = token_accuracy(
                &model,
                &corpus.dev,
                &MaskSet::all_ones(),
                cfg.label_smoothing,
            )?;
            dev_accuracy = Some(acc);
            Some(acc)
        } else {
            None
        };
        log.push(LogRow { step, variant: cfg.variant, loss, lr, dev_metric, masked: masked_flat });
    }

    Ok(TrainState { model, adam, step: cfg.max_steps, running_loss, log, audits, dev_accuracy })
}

/// Teacher-forced next-token accuracy over non-pad positions.
pub fn token_accuracy(
    model: &Model,
    pairs: &[crate::data::Pair],
    mask: &MaskSet,
    label_smoothing: f32,
) -> Result<f32> {
    if pairs.is_empty() {
        return Err(Error::usage("token_accuracy: empty split"));
    }
    let batches = crate::data::epoch_batches(pairs, 64, 0, false, 0);
    let mut correct = 0usize;
    let mut total = 0usize;
    for batch in &batches {
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &batch, mask, ForwardOpts::eval(label_smoothing))?;
        let v = model.config.vocab_tgt;
        let logits = tape.data(out.logits);
        for (pos, &t) in batch.tgt_out.iter().enumerate() {
            if t == PAD {
                continue;
            }
            total += 1;
            let lane = &logits[pos * v..(pos + 1) * v];
            if crate::model::argmax(lane) as u32 == t {
                correct += 1;
            }
        }
    }
    Ok(correct as f32 / total as f32)
}
