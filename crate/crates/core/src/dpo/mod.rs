//! Preference pairs from generated dialogues, and direct preference
//! optimisation against a frozen reference model.

mod negatives;

use serde::{Deserialize, Serialize};

pub use negatives::{construct_negatives, truncate_first_clause, NegativeMix, NegativeSources, Negatives};

use crate::corpus::{render_chat, AlignedSequence, MaskKind, PersonaCard, PreferenceSample};
use crate::error::{Error, Result};
use crate::losses::{dpo_loss, masked_nll_grad, preference_margin, sequence_logprob, sigmoid};
use crate::microlm::linalg::Matrix;
use crate::microlm::{
    prepare, BatchSampler, Checkpoint, ForwardCache, MicroLm, Optimizer, OptimizerKind, Schedule, TrainConfig,
    Tokenizer,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpoConfig {
    pub beta: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    #[serde(default)]
    pub negative_mix: NegativeMix,
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub schedule: Schedule,
}

fn default_clip() -> f64 {
    1.0
}

impl Default for DpoConfig {
    fn default() -> Self {
        DpoConfig {
            beta: 0.1,
            steps: 300,
            batch_size: 8,
            learning_rate: 0.05,
            seed: 0,
            negative_mix: NegativeMix::default(),
            grad_clip: default_clip(),
            optimizer: OptimizerKind::Sgd,
            schedule: Schedule::Constant,
        }
    }
}

impl DpoConfig {
    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            grad_clip: self.grad_clip,
            optimizer: self.optimizer,
            schedule: self.schedule,
            seed: self.seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if self.steps == 0 {
            return Err(Error::Config("dpo steps must be positive".into()));
        }
        self.negative_mix.validate()?;
        self.train_config().validate()
    }
}

/// Side report of [`train_dpo`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoReport {
    pub init_fingerprint: String,
    pub reference_fingerprint: String,
    pub final_fingerprint: String,
    /// Mean preference loss of each step's batch, before its update.
    pub step_losses: Vec<f64>,
    /// Mean implicit margin `β·Δ` of each step's batch, before its update.
    pub step_margins: Vec<f64>,
    /// Pairs whose final response fell outside the context window.
    pub unsupervised_pairs: usize,
}

struct Pair {
    chosen: AlignedSequence,
    rejected: AlignedSequence,
    ref_chosen: f64,
    ref_rejected: f64,
}

fn aligned_pair(pref: &PreferenceSample, cards: &[PersonaCard], ctx: usize) -> Result<(AlignedSequence, AlignedSequence)> {
    let card = match &pref.persona_id {
        None => None,
        Some(id) => Some(
            cards
                .iter()
                .find(|c| &c.id == id)
                .ok_or_else(|| Error::InvalidRecord(format!("preference refers to unknown persona `{id}`")))?,
        ),
    };
    let render = |s| -> Result<AlignedSequence> {
        Ok(prepare(&render_chat(&s, card, &Tokenizer)?, MaskKind::FinalResponse, ctx).0)
    };
    Ok((render(pref.chosen_sample())?, render(pref.rejected_sample())?))
}

/// Log-probability of the masked targets, with what backward needs.
fn forward_logprob(model: &MicroLm, a: &AlignedSequence) -> Result<(f64, Option<(ForwardCache, Matrix)>)> {
    if a.masked_count() == 0 {
        return Ok((0.0, None));
    }
    let (logits, cache) = model.forward_cached(&a.inputs, Some(&a.mask))?;
    let (res, dlogits) = masked_nll_grad(&logits, &a.targets, &a.mask, 1.0)?;
    Ok((-res.total, Some((cache, dlogits))))
}

/// Trains a copy of `policy_init` on `preferences` with the DPO loss. The
/// reference is `policy_init` itself, which is only read.
pub fn train_dpo(
    policy_init: &Checkpoint,
    preferences: &[PreferenceSample],
    cards: &[PersonaCard],
    config: &DpoConfig,
) -> Result<(Checkpoint, DpoReport)> {
    config.validate()?;
    if preferences.len() < config.batch_size {
        return Err(Error::Training(format!(
            "{} preference pairs is fewer than one batch of {}",
            preferences.len(),
            config.batch_size
        )));
    }
    let reference = policy_init.model();
    let ctx = reference.config().context_len;
    let mut pairs = Vec::with_capacity(preferences.len());
    let mut unsupervised = 0;
    for p in preferences {
        let (chosen, rejected) = aligned_pair(p, cards, ctx)?;
        if chosen.masked_count() == 0 || rejected.masked_count() == 0 {
            unsupervised += 1;
        }
        let ref_chosen = forward_logprob(reference, &chosen)?.0;
        let ref_rejected = forward_logprob(reference, &rejected)?.0;
        pairs.push(Pair {
            chosen,
            rejected,
            ref_chosen,
            ref_rejected,
        });
    }
    if unsupervised > 0 {
        log::warn!("{unsupervised} preference pairs have no response tokens inside the context window");
    }

    let tc = config.train_config();
    let mut model = reference.clone();
    let mut opt = Optimizer::new(model.num_params(), &tc);
    let mut sampler = BatchSampler::new(pairs.len(), config.seed);
    let mut grads = vec![0.0; model.num_params()];
    let (mut step_losses, mut step_margins) = (Vec::new(), Vec::new());
    let b = config.batch_size as f64;
    for step in 0..config.steps {
        grads.fill(0.0);
        let (mut loss, mut margin) = (0.0, 0.0);
        for i in sampler.next_batch(config.batch_size) {
            let p = &pairs[i];
            let (lc, gc) = forward_logprob(&model, &p.chosen)?;
            let (lr, gr) = forward_logprob(&model, &p.rejected)?;
            let m = preference_margin(lc, lr, p.ref_chosen, p.ref_rejected, config.beta);
            loss += dpo_loss(lc, lr, p.ref_chosen, p.ref_rejected, config.beta)?;
            margin += m;
            // ∂loss/∂logp_chosen = −β·σ(−m); the cached gradients are of −logp.
            let coef = config.beta * sigmoid(-m) / b;
            for (g, sign) in [(gc, 1.0), (gr, -1.0)] {
                if let Some((cache, mut dlogits)) = g {
                    dlogits.data.iter_mut().for_each(|x| *x *= sign * coef);
                    model.backward(&cache, &dlogits, &mut grads);
                }
            }
        }
        opt.step(model.params_mut(), &mut grads, tc.lr_scale(step));
        step_losses.push(loss / b);
        step_margins.push(margin / b);
        log::debug!("dpo step {step}: loss {:.5} margin {:.5}", loss / b, margin / b);
    }
    let out = policy_init.derive(model, "M_dpo");
    let report = DpoReport {
        init_fingerprint: policy_init.fingerprint().to_string(),
        reference_fingerprint: policy_init.fingerprint().to_string(),
        final_fingerprint: out.fingerprint().to_string(),
        step_losses,
        step_margins,
        unsupervised_pairs: unsupervised,
    };
    Ok((out, report))
}

/// `β · ((chosen_policy − chosen_ref) − (rejected_policy − rejected_ref))`
/// over the final response of each side.
pub fn implicit_margin(
    policy: &Checkpoint,
    reference: &Checkpoint,
    pref: &PreferenceSample,
    cards: &[PersonaCard],
    beta: f64,
) -> Result<f64> {
    let card = pref
        .persona_id
        .as_ref()
        .and_then(|id| cards.iter().find(|c| &c.id == id));
    if pref.persona_id.is_some() && card.is_none() {
        return Err(Error::InvalidRecord("preference refers to an unknown persona".into()));
    }
    let chosen = render_chat(&pref.chosen_sample(), card, &Tokenizer)?;
    let rejected = render_chat(&pref.rejected_sample(), card, &Tokenizer)?;
    let lp = |m: &Checkpoint, s| sequence_logprob(m.model(), s, MaskKind::FinalResponse);
    Ok(preference_margin(
        lp(policy, &chosen)?,
        lp(policy, &rejected)?,
        lp(reference, &chosen)?,
        lp(reference, &rejected)?,
        beta,
    ))
}

/// Mean of [`implicit_margin`] over `prefs`.
pub fn mean_margin(
    policy: &Checkpoint,
    reference: &Checkpoint,
    prefs: &[PreferenceSample],
    cards: &[PersonaCard],
    beta: f64,
) -> Result<f64> {
    if prefs.is_empty() {
        return Err(Error::InvalidRecord("no preference pairs to score".into()));
    }
    let mut total = 0.0;
    for p in prefs {
        total += implicit_margin(policy, reference, p, cards, beta)?;
    }
    Ok(total / prefs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ChatTurn, Criterion};
    use crate::losses::softplus_neg;
    use crate::microlm::ModelConfig;

    fn base() -> Checkpoint {
        Checkpoint::init(
            ModelConfig {
                embed_dim: 16,
                num_heads: 2,
                num_layers: 1,
                context_len: 64,
                init_seed: 8,
                ..Default::default()
            },
            "M_t",
        )
        .unwrap()
    }

    fn prefs() -> Vec<PreferenceSample> {
        (0..6)
            .map(|i| PreferenceSample {
                persona_id: None,
                context: if i % 2 == 0 { vec![ChatTurn::new("hey", "hi there")] } else { vec![] },
                query: format!("what is {i}?"),
                chosen: format!("it is {i}, friend!"),
                rejected: "It is.".into(),
                criterion: Criterion::Truncation,
            })
            .collect()
    }

    fn cfg() -> DpoConfig {
        DpoConfig {
            steps: 30,
            batch_size: 3,
            learning_rate: 0.01,
            optimizer: OptimizerKind::Adam,
            ..Default::default()
        }
    }

    #[test]
    fn first_step_is_ln2_and_reference_frozen() {
        let b = base();
        let fp = b.fingerprint().to_string();
        let (out, rep) = train_dpo(&b, &prefs(), &[], &cfg()).unwrap();
        assert!((rep.step_losses[0] - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(rep.step_margins[0], 0.0);
        assert_eq!(b.fingerprint(), fp);
        assert_eq!(rep.reference_fingerprint, fp);
        assert!(out.lineage().contains(&fp));
        assert!(rep.step_losses.last().unwrap() < &rep.step_losses[0]);
        let m = mean_margin(&out, &b, &prefs(), &[], 0.1).unwrap();
        assert!(m > 0.0, "{m}");
        let (again, _) = train_dpo(&b, &prefs(), &[], &cfg()).unwrap();
        assert_eq!(again.fingerprint(), out.fingerprint());
    }

    #[test]
    fn margin_identities() {
        let b = base();
        let (policy, _) = train_dpo(&b, &prefs(), &[], &DpoConfig { steps: 5, ..cfg() }).unwrap();
        for p in prefs() {
            assert_eq!(implicit_margin(&b, &b, &p, &[], 0.1).unwrap(), 0.0);
            let m = implicit_margin(&policy, &b, &p, &[], 0.1).unwrap();
            let s = implicit_margin(&policy, &b, &p.swapped(), &[], 0.1).unwrap();
            assert!((m + s).abs() < 1e-9);
            let lp = |c: &Checkpoint, x: &PreferenceSample, chosen: bool| {
                let s = if chosen { x.chosen_sample() } else { x.rejected_sample() };
                let seq = render_chat(&s, None, &Tokenizer).unwrap();
                sequence_logprob(c.model(), &seq, MaskKind::FinalResponse).unwrap()
            };
            let loss = dpo_loss(lp(&policy, &p, true), lp(&policy, &p, false), lp(&b, &p, true), lp(&b, &p, false), 0.1)
                .unwrap();
            assert!((loss - softplus_neg(m)).abs() < 1e-9);
        }
    }

    #[test]
    fn too_few_pairs() {
        let c = DpoConfig { batch_size: 10, ..cfg() };
        assert!(train_dpo(&base(), &prefs(), &[], &c).is_err());
    }

    /// Finite-difference check of the DPO gradient on one parameter.
    #[test]
    fn gradient_matches_finite_difference() {
        let b = base();
        let p = &prefs()[0];
        let (c, r) = aligned_pair(p, &[], 64).unwrap();
        let mut shifted = b.model().clone();
        // Move the policy off the reference so σ(−m) is not exactly 1/2.
        shifted.params_mut().iter_mut().enumerate().for_each(|(i, x)| *x += 1e-3 * ((i % 7) as f64 - 3.0));
        let beta = 0.5;
        let refc = forward_logprob(b.model(), &c).unwrap().0;
        let refr = forward_logprob(b.model(), &r).unwrap().0;
        let loss_at = |m: &MicroLm| {
            let lc = forward_logprob(m, &c).unwrap().0;
            let lr = forward_logprob(m, &r).unwrap().0;
            dpo_loss(lc, lr, refc, refr, beta).unwrap()
        };
        let mut grads = vec![0.0; shifted.num_params()];
        let (lc, gc) = forward_logprob(&shifted, &c).unwrap();
        let (lr, gr) = forward_logprob(&shifted, &r).unwrap();
        let coef = beta * sigmoid(-preference_margin(lc, lr, refc, refr, beta));
        for (g, sign) in [(gc, 1.0), (gr, -1.0)] {
            let (cache, mut d) = g.unwrap();
            d.data.iter_mut().for_each(|x| *x *= sign * coef);
            shifted.backward(&cache, &d, &mut grads);
        }
        let n = shifted.num_params();
        for idx in [0, n / 3, n / 2, n - 1] {
            let h = 1e-5;
            let mut plus = shifted.clone();
            plus.params_mut()[idx] += h;
            let mut minus = shifted.clone();
            minus.params_mut()[idx] -= h;
            let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            assert!((fd - grads[idx]).abs() < 1e-6 + 1e-4 * fd.abs(), "{idx}: {fd} vs {}", grads[idx]);
        }
    }
}
