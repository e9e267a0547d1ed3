//! Label-smoothed cross-entropy.
//!
//! With smoothing `eps` and gold token `i`, the target distribution puts
//! `1 - eps` on `i` and spreads `eps` evenly over the other tokens, giving
//! `L = -(1 - eps) log p(i) - sum_{j != i} eps / (|V| - 1) log p(j)`.
//! Under [`EosSmoothingPolicy::ExcludeEosGold`] the EoS family is left out
//! of smoothing entirely: an EoS gold is trained with plain cross-entropy and
//! EoS tokens receive no share of `eps` at content positions.

use serde::{Deserialize, Serialize};

use super::StepDistribution;
use crate::encoding::Vocab;
use crate::error::{Error, Result};
use crate::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EosSmoothingPolicy {
    #[default]
    Standard,
    ExcludeEosGold,
}

/// Target distribution for one position, stored implicitly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothedTarget {
    pub gold: TokenId,
    pub gold_weight: f64,
    /// Weight of each non-gold token that receives smoothing mass.
    pub other_weight: f64,
    /// Whether EoS-family tokens are excluded from the smoothing mass.
    pub exclude_eos: bool,
}

impl SmoothedTarget {
    pub fn new(gold: TokenId, eps: f64, policy: EosSmoothingPolicy, vocab: &Vocab) -> Result<Self> {
        if !(0.0..1.0).contains(&eps) {
            return Err(Error::InvalidSmoothing(eps));
        }
        vocab.check_id(gold)?;
        let v = vocab.size();
        let target = match policy {
            EosSmoothingPolicy::ExcludeEosGold if vocab.is_eos(gold) => SmoothedTarget {
                gold,
                gold_weight: 1.0,
                other_weight: 0.0,
                exclude_eos: true,
            },
            EosSmoothingPolicy::ExcludeEosGold => {
                let receivers = v - vocab.eos_family_len() - 1;
                SmoothedTarget {
                    gold,
                    gold_weight: 1.0 - eps,
                    other_weight: if receivers > 0 { eps / receivers as f64 } else { 0.0 },
                    exclude_eos: true,
                }
            }
            EosSmoothingPolicy::Standard => SmoothedTarget {
                gold,
                gold_weight: 1.0 - eps,
                other_weight: eps / (v - 1) as f64,
                exclude_eos: false,
            },
        };
        Ok(target)
    }

    pub fn weight(&self, j: TokenId, vocab: &Vocab) -> f64 {
        if j == self.gold {
            self.gold_weight
        } else if self.exclude_eos && vocab.is_eos(j) {
            0.0
        } else {
            self.other_weight
        }
    }

    /// `-sum_j q_j log p_j`.
    pub fn loss(&self, log_probs: &[f64], vocab: &Vocab) -> f64 {
        let mut loss = -self.gold_weight * log_probs[self.gold as usize];
        if self.other_weight > 0.0 {
            let others: f64 = log_probs
                .iter()
                .enumerate()
                .filter(|&(j, _)| {
                    let j = j as TokenId;
                    j != self.gold && !(self.exclude_eos && vocab.is_eos(j))
                })
                .map(|(_, lp)| lp)
                .sum();
            loss -= self.other_weight * others;
        }
        loss
    }

    /// Writes `scale * (p - q)`, the loss gradient with respect to the logits.
    pub fn logit_grad(&self, log_probs: &[f64], vocab: &Vocab, scale: f64, out: &mut [f64]) {
        for (j, (o, lp)) in out.iter_mut().zip(log_probs).enumerate() {
            *o = scale * (lp.exp() - self.weight(j as TokenId, vocab));
        }
    }
}

pub fn label_smoothed_loss(
    dist: &StepDistribution,
    gold: TokenId,
    eps: f64,
    policy: EosSmoothingPolicy,
    vocab: &Vocab,
) -> Result<f64> {
    if dist.log_probs.len() != vocab.size() {
        return Err(Error::Incompatible(format!(
            "distribution over {} tokens, vocabulary has {}",
            dist.log_probs.len(),
            vocab.size()
        )));
    }
    Ok(SmoothedTarget::new(gold, eps, policy, vocab)?.loss(&dist.log_probs, vocab))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::EosMode;

    // |V| = 4 with the single EoS at id 3 (content size 1).
    fn vocab4() -> Vocab {
        Vocab::new(1, EosMode::Single)
    }

    fn dist(p: &[f64]) -> StepDistribution {
        StepDistribution {
            log_probs: p.iter().map(|v| v.ln()).collect(),
        }
    }

    #[test]
    fn worked_example() {
        // -0.9 ln 0.7 - (0.1/3) * 3 ln 0.1
        let expected = -0.9 * 0.7f64.ln() - 0.1 * 0.1f64.ln();
        let loss = label_smoothed_loss(
            &dist(&[0.7, 0.1, 0.1, 0.1]),
            0,
            0.1,
            EosSmoothingPolicy::Standard,
            &vocab4(),
        )
        .unwrap();
        assert!((loss - expected).abs() < 1e-14);
        assert!((loss - 0.5513).abs() < 5e-5);
    }

    #[test]
    fn zero_smoothing_is_cross_entropy_for_both_policies() {
        let d = dist(&[0.4, 0.3, 0.2, 0.1]);
        for policy in [EosSmoothingPolicy::Standard, EosSmoothingPolicy::ExcludeEosGold] {
            for gold in 0..4 {
                let loss = label_smoothed_loss(&d, gold, 0.0, policy, &vocab4()).unwrap();
                assert!((loss + d.log_probs[gold as usize]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn exclude_policy_at_eos_and_content_gold() {
        let d = dist(&[0.4, 0.3, 0.2, 0.1]);
        let v = vocab4();
        let at_eos =
            label_smoothed_loss(&d, 3, 0.1, EosSmoothingPolicy::ExcludeEosGold, &v).unwrap();
        assert!((at_eos + 0.1f64.ln()).abs() < 1e-15);
        // content gold 2: eps spread over {0, 1}, not over EoS
        let at_content =
            label_smoothed_loss(&d, 2, 0.1, EosSmoothingPolicy::ExcludeEosGold, &v).unwrap();
        let expected = -0.9 * 0.2f64.ln() - 0.05 * (0.4f64.ln() + 0.3f64.ln());
        assert!((at_content - expected).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_smoothing() {
        let d = dist(&[0.25; 4]);
        for eps in [-0.1, 1.0, f64::NAN] {
            assert!(matches!(
                label_smoothed_loss(&d, 0, eps, EosSmoothingPolicy::Standard, &vocab4()),
                Err(Error::InvalidSmoothing(_))
            ));
        }
    }

    #[test]
    fn decomposes_into_gold_and_mean_other_terms() {
        let d = dist(&[0.5, 0.2, 0.2, 0.1]);
        let eps = 0.1;
        for gold in 0..4usize {
            let ce = |j: usize| -d.log_probs[j];
            let mean_other = (0..4).filter(|&j| j != gold).map(ce).sum::<f64>() / 3.0;
            let expected = (1.0 - eps) * ce(gold) + eps * mean_other;
            let loss = label_smoothed_loss(
                &d,
                gold as TokenId,
                eps,
                EosSmoothingPolicy::Standard,
                &vocab4(),
            )
            .unwrap();
            assert!((loss - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn smoothed_target_is_the_minimizer() {
        // The loss is cross-entropy against q, minimized at p = q; any
        // perturbation that keeps p normalized increases it.
        let v = vocab4();
        let eps = 0.1;
        let q = [1.0 - eps, eps / 3.0, eps / 3.0, eps / 3.0];
        let at_q = label_smoothed_loss(&dist(&q), 0, eps, EosSmoothingPolicy::Standard, &v).unwrap();
        for (i, j) in [(0, 1), (1, 2), (2, 0), (3, 1)] {
            let mut p = q;
            p[i] -= 0.01;
            p[j] += 0.01;
            let moved =
                label_smoothed_loss(&dist(&p), 0, eps, EosSmoothingPolicy::Standard, &v).unwrap();
            assert!(moved > at_q);
        }
    }

    #[test]
    fn target_weights_sum_to_one() {
        let v = Vocab::new(5, EosMode::Multi { l_max: 3 });
        for policy in [EosSmoothingPolicy::Standard, EosSmoothingPolicy::ExcludeEosGold] {
            for gold in 0..v.size() as TokenId {
                let t = SmoothedTarget::new(gold, 0.1, policy, &v).unwrap();
                let sum: f64 = (0..v.size() as TokenId).map(|j| t.weight(j, &v)).sum();
                assert!((sum - 1.0).abs() < 1e-14);
            }
        }
    }
}
