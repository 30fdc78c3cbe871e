//! Masked negative log-likelihood and the preference objective.
//!
//! Every masked loss is `total = -Σ_{t : mask[t]} log softmax(logits[t])[targets[t]]`.
//! The kernel is shift-free: row `t` of `logits` scores `targets[t]`, and the
//! caller aligns the arrays (see [`SegmentedTokenSequence::aligned`]).
//!
//! | loss            | counted positions                 |
//! |-----------------|-----------------------------------|
//! | [`ipt_loss`]    | predicted token labelled Dialogue |
//! | [`response_loss`] | predicted token labelled Response |
//! | [`ask_loss`]    | predicted token labelled Query    |
//! | [`format_loss`] | predicted token labelled Format   |

use serde::{Deserialize, Serialize};

use crate::corpus::{MaskKind, SegmentedTokenSequence, SequenceKind};
use crate::error::{Error, Result};
use crate::microlm::linalg::{log_sum_exp, Matrix};
use crate::microlm::{MicroLm, TokenId};

/// Sum and mean forms of a masked loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskedLossResult {
    pub total: f64,
    pub mean: f64,
    pub masked_count: usize,
}

impl MaskedLossResult {
    pub const EMPTY: MaskedLossResult = MaskedLossResult {
        total: 0.0,
        mean: 0.0,
        masked_count: 0,
    };

    pub fn from_total(total: f64, masked_count: usize) -> Self {
        let mean = if masked_count == 0 {
            0.0
        } else {
            total / masked_count as f64
        };
        MaskedLossResult {
            total,
            mean,
            masked_count,
        }
    }

    /// Pools two results as if their positions were one set.
    pub fn pooled(self, other: MaskedLossResult) -> Self {
        MaskedLossResult::from_total(self.total + other.total, self.masked_count + other.masked_count)
    }
}

fn check_shapes(logits: &Matrix, targets: &[TokenId], mask: &[bool]) -> Result<()> {
    if logits.rows != targets.len() || targets.len() != mask.len() {
        return Err(Error::Shape(format!(
            "logits have {} rows, targets {}, mask {}",
            logits.rows,
            targets.len(),
            mask.len()
        )));
    }
    if let Some(&t) = targets.iter().find(|&&t| t as usize >= logits.cols) {
        return Err(Error::Shape(format!(
            "target {t} outside {} logit columns",
            logits.cols
        )));
    }
    Ok(())
}

/// Masked negative log-likelihood.
pub fn masked_nll(logits: &Matrix, targets: &[TokenId], mask: &[bool]) -> Result<MaskedLossResult> {
    check_shapes(logits, targets, mask)?;
    let mut total = 0.0;
    let mut count = 0;
    for (t, (&target, &m)) in targets.iter().zip(mask).enumerate() {
        if m {
            let row = logits.row(t);
            total += log_sum_exp(row) - row[target as usize];
            count += 1;
        }
    }
    Ok(MaskedLossResult::from_total(total, count))
}

/// [`masked_nll`] together with `scale · ∂total/∂logits`. Rows outside the
/// mask get an exactly-zero gradient.
pub fn masked_nll_grad(
    logits: &Matrix,
    targets: &[TokenId],
    mask: &[bool],
    scale: f64,
) -> Result<(MaskedLossResult, Matrix)> {
    check_shapes(logits, targets, mask)?;
    let mut grad = Matrix::zeros(logits.rows, logits.cols);
    let mut total = 0.0;
    let mut count = 0;
    for (t, (&target, &m)) in targets.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        let row = logits.row(t);
        let lse = log_sum_exp(row);
        total += lse - row[target as usize];
        count += 1;
        let g = grad.row_mut(t);
        for (gi, &z) in g.iter_mut().zip(row) {
            *gi = scale * (z - lse).exp();
        }
        g[target as usize] -= scale;
    }
    Ok((MaskedLossResult::from_total(total, count), grad))
}

fn require_kind(seq: &SegmentedTokenSequence, mask: MaskKind) -> Result<()> {
    if !mask.compatible(seq.source_kind()) {
        return Err(Error::InvalidRecord(format!(
            "{mask:?} mask does not apply to a {:?} sequence",
            seq.source_kind()
        )));
    }
    Ok(())
}

/// Masked loss of `model` on `seq` under `mask`.
pub fn masked_loss(model: &MicroLm, seq: &SegmentedTokenSequence, mask: MaskKind) -> Result<MaskedLossResult> {
    require_kind(seq, mask)?;
    let a = seq.aligned(mask);
    if a.inputs.is_empty() {
        return Ok(MaskedLossResult::EMPTY);
    }
    let (logits, _) = model.forward_cached(&a.inputs, Some(&a.mask))?;
    masked_nll(&logits, &a.targets, &a.mask)
}

/// Dialogue-only loss on a narrative sequence, conditioned on the full prefix.
pub fn ipt_loss(model: &MicroLm, seq: &SegmentedTokenSequence) -> Result<MaskedLossResult> {
    if seq.source_kind() != SequenceKind::Ipt {
        return Err(Error::InvalidRecord("ipt_loss needs an ipt sequence".into()));
    }
    let r = masked_loss(model, seq, MaskKind::Dialogue)?;
    if r.masked_count == 0 {
        log::warn!("ipt sequence has no predictable dialogue positions");
    }
    Ok(r)
}

/// Loss on response tokens only.
pub fn response_loss(model: &MicroLm, seq: &SegmentedTokenSequence) -> Result<MaskedLossResult> {
    masked_loss(model, seq, MaskKind::Response)
}

/// Loss on query tokens only; trains the user-simulating agent.
pub fn ask_loss(model: &MicroLm, seq: &SegmentedTokenSequence) -> Result<MaskedLossResult> {
    masked_loss(model, seq, MaskKind::Query)
}

/// Loss on template tokens; the remainder of the partition.
pub fn format_loss(model: &MicroLm, seq: &SegmentedTokenSequence) -> Result<MaskedLossResult> {
    masked_loss(model, seq, MaskKind::Format)
}

/// Unmasked loss over every predicted position.
pub fn full_loss(model: &MicroLm, seq: &SegmentedTokenSequence) -> Result<MaskedLossResult> {
    masked_loss(model, seq, MaskKind::Full)
}

/// Summed log-probability of the selected tokens.
pub fn sequence_logprob(model: &MicroLm, seq: &SegmentedTokenSequence, mask: MaskKind) -> Result<f64> {
    Ok(-masked_loss(model, seq, mask)?.total)
}

/// `ln(1 + e^{-x})` without overflow.
pub fn softplus_neg(x: f64) -> f64 {
    if x > 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `β · ((chosen_policy − chosen_ref) − (rejected_policy − rejected_ref))`.
pub fn preference_margin(
    logp_chosen_policy: f64,
    logp_rejected_policy: f64,
    logp_chosen_ref: f64,
    logp_rejected_ref: f64,
    beta: f64,
) -> f64 {
    beta * ((logp_chosen_policy - logp_chosen_ref) - (logp_rejected_policy - logp_rejected_ref))
}

/// Direct preference loss `−log σ(margin)`.
pub fn dpo_loss(
    logp_chosen_policy: f64,
    logp_rejected_policy: f64,
    logp_chosen_ref: f64,
    logp_rejected_ref: f64,
    beta: f64,
) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(Error::Config(format!("beta must be positive, got {beta}")));
    }
    Ok(softplus_neg(preference_margin(
        logp_chosen_policy,
        logp_rejected_policy,
        logp_chosen_ref,
        logp_rejected_ref,
        beta,
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{render_and_segment, ChatSample, ChatTurn, DialogueTurn, NarrativeDialogue};
    use crate::microlm::{ModelConfig, Tokenizer};

    fn tiny() -> MicroLm {
        MicroLm::new(ModelConfig {
            embed_dim: 16,
            num_heads: 2,
            num_layers: 2,
            context_len: 64,
            init_seed: 11,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn all_false_mask() {
        let l = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]);
        let r = masked_nll(&l, &[0, 1], &[false, false]).unwrap();
        assert_eq!(r, MaskedLossResult::EMPTY);
    }

    #[test]
    fn uniform_four() {
        let l = Matrix::zeros(1, 4);
        let r = masked_nll(&l, &[2], &[true]).unwrap();
        assert!((r.total - 4f64.ln()).abs() < 1e-12);
        assert!((r.total - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch() {
        let l = Matrix::zeros(2, 4);
        assert!(masked_nll(&l, &[1], &[true]).is_err());
        assert!(masked_nll(&l, &[1, 9], &[true, true]).is_err());
    }

    #[test]
    fn grad_zero_outside_mask() {
        let l = Matrix::from_vec(2, 3, vec![0.1, 0.5, -0.2, 1.0, 2.0, 3.0]);
        let (_, g) = masked_nll_grad(&l, &[0, 1], &[true, false], 1.0).unwrap();
        assert!(g.row(1).iter().all(|&v| v == 0.0));
        assert!(g.row(0).iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn dpo_closed_forms() {
        assert!((dpo_loss(-3.0, -4.0, -3.0, -4.0, 0.5).unwrap() - 2f64.ln()).abs() < 1e-15);
        let v = dpo_loss(0.0, -10.0, 0.0, 0.0, 1.0).unwrap();
        assert!((v - (1.0 + (-10f64).exp()).ln()).abs() < 1e-15);
        assert!((v - 4.54e-5).abs() < 1e-7);
        assert!(dpo_loss(0.0, 0.0, 0.0, 0.0, 0.0).is_err());
        assert!(dpo_loss(0.0, 0.0, 0.0, 0.0, -1.0).is_err());
    }

    #[test]
    fn dpo_extreme_margins_finite() {
        assert!(dpo_loss(0.0, 1e6, 0.0, 0.0, 1.0).unwrap().is_finite());
        assert_eq!(dpo_loss(1e6, 0.0, 0.0, 0.0, 1.0).unwrap(), 0.0);
    }

    fn ipt_fixture() -> NarrativeDialogue {
        NarrativeDialogue {
            narration: "Dusk. ".into(),
            turns: vec![
                DialogueTurn {
                    character: "Ann".into(),
                    utterance: "Hello there".into(),
                },
                DialogueTurn {
                    character: "Bo".into(),
                    utterance: "Hi".into(),
                },
            ],
        }
    }

    #[test]
    fn single_dialogue_position() {
        let m = tiny();
        let n = NarrativeDialogue {
            narration: "x".into(),
            turns: vec![DialogueTurn {
                character: "A".into(),
                utterance: "z".into(),
            }],
        };
        let s = render_and_segment(&n, &Tokenizer).unwrap();
        let j = s.labels().iter().position(|&l| l == crate::corpus::Label::Dialogue).unwrap();
        // The utterance byte and the `<|end|>` closing it.
        let logits = m.forward(&s.tokens()[..j + 1]).unwrap();
        let expect: f64 = (j - 1..=j)
            .map(|r| log_sum_exp(logits.row(r)) - logits.row(r)[s.tokens()[r + 1] as usize])
            .sum();
        let got = ipt_loss(&m, &s).unwrap();
        assert_eq!(got.masked_count, 2);
        assert!((got.total - expect).abs() < 1e-12);
    }

    #[test]
    fn ipt_excludes_narration_rows() {
        let m = tiny();
        let s = render_and_segment(&ipt_fixture(), &Tokenizer).unwrap();
        let a = s.aligned(MaskKind::Dialogue);
        let mut logits = m.forward(&a.inputs).unwrap();
        let base = masked_nll(&logits, &a.targets, &a.mask).unwrap();
        for t in 0..a.mask.len() {
            if !a.mask[t] {
                logits.row_mut(t)[3] += 5.0;
            }
        }
        assert_eq!(masked_nll(&logits, &a.targets, &a.mask).unwrap(), base);
        assert!((ipt_loss(&m, &s).unwrap().total - base.total).abs() < 1e-12);
    }

    #[test]
    fn response_mask_symmetry() {
        let m = tiny();
        let c = ChatSample {
            persona_id: None,
            turns: vec![ChatTurn::new("how are you", "fine"), ChatTurn::new("ok?", "yes")],
        };
        let s = render_and_segment(&c, &Tokenizer).unwrap();
        let swapped = s.with_roles_swapped();
        let a = ask_loss(&m, &s).unwrap();
        let r = response_loss(&m, &swapped).unwrap();
        assert!((a.total - r.total).abs() <= 1e-12 * a.total.abs());
        assert_eq!(a.masked_count, r.masked_count);
    }

    #[test]
    fn wrong_kind_rejected() {
        let m = tiny();
        let s = render_and_segment(&ipt_fixture(), &Tokenizer).unwrap();
        assert!(response_loss(&m, &s).is_err());
        let c = render_and_segment(&ChatSample::single(None, "a", "b"), &Tokenizer).unwrap();
        assert!(ipt_loss(&m, &c).is_err());
    }

    #[test]
    fn logprob_is_negative_response_loss() {
        let m = tiny();
        let s = render_and_segment(&ChatSample::single(None, "a", "bcd"), &Tokenizer).unwrap();
        let lp = sequence_logprob(&m, &s, MaskKind::Response).unwrap();
        assert_eq!(lp, -response_loss(&m, &s).unwrap().total);
    }

    #[test]
    fn concatenation_is_not_additive() {
        // Context changes the conditional distribution, so the log-prob of a
        // two-turn sample differs from the sum over its single-turn parts.
        let m = tiny();
        let a = ChatSample::single(None, "hi", "yo");
        let b = ChatSample::single(None, "and?", "so");
        let ab = ChatSample {
            persona_id: None,
            turns: vec![a.turns[0].clone(), b.turns[0].clone()],
        };
        let lp = |c: &ChatSample| {
            sequence_logprob(&m, &render_and_segment(c, &Tokenizer).unwrap(), MaskKind::Response).unwrap()
        };
        assert!((lp(&ab) - (lp(&a) + lp(&b))).abs() > 1e-9);
    }
}
