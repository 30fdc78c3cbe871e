//! Masked-loss training with momentum SGD and global-norm clipping.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::linalg::Matrix;
use super::model::{ForwardCache, MicroLm};
use crate::corpus::{AlignedSequence, MaskKind, SegmentedTokenSequence};
use crate::error::{Error, Result};
use crate::losses::masked_nll_grad;

/// Which token set a training run optimises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Dialogue tokens of narrative sequences.
    Ipt,
    /// Response tokens of chat sequences.
    Response,
    /// Query tokens of chat sequences.
    Ask,
    /// Every token; used for the language-model warm-up of the base model.
    Full,
}

impl LossKind {
    pub fn mask(self) -> MaskKind {
        match self {
            LossKind::Ipt => MaskKind::Dialogue,
            LossKind::Response => MaskKind::Response,
            LossKind::Ask => MaskKind::Query,
            LossKind::Full => MaskKind::Full,
        }
    }
}

/// Update rule. Momentum SGD is the default; Adam (β₁ = 0.9, β₂ = 0.999,
/// ε = 1e-8, bias-corrected) trains the micro model far faster per step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

/// Learning-rate schedule over the run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Constant,
    /// Linear decay from `learning_rate` at step 0 towards zero at `steps`.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub grad_clip: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub schedule: Schedule,
    pub seed: u64,
}

fn default_momentum() -> f64 {
    0.9
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200,
            batch_size: 8,
            learning_rate: 0.05,
            grad_clip: 1.0,
            momentum: default_momentum(),
            optimizer: OptimizerKind::Sgd,
            schedule: Schedule::Constant,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Multiplier on `learning_rate` at `step`.
    pub fn lr_scale(&self, step: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => 1.0,
            Schedule::Linear => 1.0 - step as f64 / self.steps.max(1) as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::Config("learning_rate and grad_clip must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Side report of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub label: String,
    pub loss_kind: LossKind,
    pub mask_kind: MaskKind,
    pub init_fingerprint: String,
    pub final_fingerprint: String,
    /// Mean masked loss of each executed step.
    pub step_losses: Vec<f64>,
    pub skipped_batches: usize,
    pub truncated_sequences: usize,
}

const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Optimizer state with global-norm clipping.
pub(crate) struct Optimizer {
    kind: OptimizerKind,
    velocity: Vec<f64>,
    second: Vec<f64>,
    t: i32,
    lr: f64,
    momentum: f64,
    clip: f64,
}

impl Optimizer {
    pub(crate) fn new(n: usize, config: &TrainConfig) -> Self {
        Optimizer {
            kind: config.optimizer,
            velocity: vec![0.0; n],
            second: match config.optimizer {
                OptimizerKind::Adam => vec![0.0; n],
                OptimizerKind::Sgd => Vec::new(),
            },
            t: 0,
            lr: config.learning_rate,
            momentum: config.momentum,
            clip: config.grad_clip,
        }
    }

    /// Applies one update with the learning rate scaled by `lr_scale`;
    /// returns the pre-clip gradient norm.
    pub(crate) fn step(&mut self, params: &mut [f64], grads: &mut [f64], lr_scale: f64) -> f64 {
        let lr = self.lr * lr_scale;
        let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > self.clip {
            let s = self.clip / norm;
            grads.iter_mut().for_each(|g| *g *= s);
        }
        match self.kind {
            OptimizerKind::Sgd => {
                for ((p, v), g) in params.iter_mut().zip(&mut self.velocity).zip(grads.iter()) {
                    *v = self.momentum * *v + g;
                    *p -= lr * *v;
                }
            }
            OptimizerKind::Adam => {
                self.t += 1;
                let b1 = self.momentum;
                let c1 = 1.0 - b1.powi(self.t);
                let c2 = 1.0 - ADAM_BETA2.powi(self.t);
                for (((p, m), s), g) in params
                    .iter_mut()
                    .zip(&mut self.velocity)
                    .zip(&mut self.second)
                    .zip(grads.iter())
                {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *s = ADAM_BETA2 * *s + (1.0 - ADAM_BETA2) * g * g;
                    *p -= lr * (*m / c1) / ((*s / c2).sqrt() + ADAM_EPS);
                }
            }
        }
        norm
    }
}

/// Aligns a sequence for `mask`, truncating to the model's context window.
pub(crate) fn prepare(seq: &SegmentedTokenSequence, mask: MaskKind, context_len: usize) -> (AlignedSequence, bool) {
    let mut a = seq.aligned(mask);
    let truncated = a.inputs.len() > context_len;
    if truncated {
        a.inputs.truncate(context_len);
        a.targets.truncate(context_len);
        a.mask.truncate(context_len);
    }
    (a, truncated)
}

/// Forward + backward of `scale · masked total` for one aligned sequence.
pub(crate) fn accumulate_grad(
    model: &MicroLm,
    a: &AlignedSequence,
    scale: f64,
    grads: &mut [f64],
) -> Result<f64> {
    if a.inputs.is_empty() {
        return Ok(0.0);
    }
    let (logits, cache): (Matrix, ForwardCache) = model.forward_cached(&a.inputs, Some(&a.mask))?;
    let (res, dlogits) = masked_nll_grad(&logits, &a.targets, &a.mask, scale)?;
    if res.masked_count > 0 {
        model.backward(&cache, &dlogits, grads);
    }
    Ok(res.total)
}

/// Deterministic epoch-shuffled batch indices.
pub(crate) struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub(crate) fn new(n: usize, seed: u64) -> Self {
        let mut s = BatchSampler {
            order: (0..n).collect(),
            cursor: n,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    pub(crate) fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.reshuffle();
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Trains a copy of `init` on `sequences` with the masked loss of
/// `loss_kind`. `init` is never modified; the result's lineage records it.
pub fn train(
    init: &Checkpoint,
    sequences: &[SegmentedTokenSequence],
    loss_kind: LossKind,
    config: &TrainConfig,
    label: &str,
) -> Result<(Checkpoint, TrainReport)> {
    config.validate()?;
    let mask = loss_kind.mask();
    if sequences.is_empty() {
        return Err(Error::Training("no training sequences".into()));
    }
    if let Some(bad) = sequences.iter().find(|s| !mask.compatible(s.source_kind())) {
        return Err(Error::Training(format!(
            "{:?} sequence incompatible with {loss_kind:?} loss",
            bad.source_kind()
        )));
    }
    let mut model = init.model().clone();
    let ctx = model.config().context_len;
    let mut truncated_sequences = 0;
    let prepared: Vec<AlignedSequence> = sequences
        .iter()
        .map(|s| {
            let (a, t) = prepare(s, mask, ctx);
            truncated_sequences += t as usize;
            a
        })
        .collect();
    if prepared.iter().all(|a| a.masked_count() == 0) {
        return Err(Error::Training(format!(
            "no sequence has supervisable positions under {loss_kind:?}"
        )));
    }

    let mut opt = Optimizer::new(model.num_params(), config);
    let mut sampler = BatchSampler::new(prepared.len(), config.seed);
    let mut grads = vec![0.0; model.num_params()];
    let mut step_losses = Vec::with_capacity(config.steps);
    let mut skipped = 0;
    for step in 0..config.steps {
        let batch = sampler.next_batch(config.batch_size);
        let count: usize = batch.iter().map(|&i| prepared[i].masked_count()).sum();
        if count == 0 {
            log::warn!("step {step}: batch has no supervisable tokens, skipped");
            skipped += 1;
            continue;
        }
        grads.fill(0.0);
        let scale = 1.0 / count as f64;
        let mut total = 0.0;
        for &i in &batch {
            total += accumulate_grad(&model, &prepared[i], scale, &mut grads)?;
        }
        opt.step(model.params_mut(), &mut grads, config.lr_scale(step));
        step_losses.push(total / count as f64);
        log::debug!("{label} step {step}: loss {:.4}", total / count as f64);
    }
    if config.steps > 0 && skipped == config.steps {
        return Err(Error::Training("every batch was skipped".into()));
    }
    let out = init.derive(model, label);
    let report = TrainReport {
        label: label.to_string(),
        loss_kind,
        mask_kind: mask,
        init_fingerprint: init.fingerprint().to_string(),
        final_fingerprint: out.fingerprint().to_string(),
        step_losses,
        skipped_batches: skipped,
        truncated_sequences,
    };
    Ok((out, report))
}
