//! Tiny encoder-decoder transformer with tied output embeddings.
//!
//! Pre-norm layers, fixed sinusoidal positions, GELU feed-forward, and
//! double precision everywhere. Gradients are derived by hand in
//! [`transformer`] and checked against central differences by
//! [`gradient_check`].

mod checkpoint;
mod incremental;
mod loss;
mod optim;
mod params;
mod train;
mod transformer;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use incremental::{DecoderState, EncodedSource};
pub use loss::{label_smoothed_loss, EosSmoothingPolicy, SmoothedTarget};
pub use optim::{Adam, OptimizerSpec};
pub use params::{
    Architecture, Attention, DecoderLayer, EncoderLayer, FeedForward, LayerNorm, Linear,
    Parameters, TensorInfo, Tensors,
};
pub use train::{
    batch_loss, compare_gradients, gradient_check, loss_and_gradients, teacher_forced_accuracy,
    train, train_from, GradCheckReport, TrainOutcome, TrainSpec, TrainState, GRAD_CHECK_FLOOR,
};

use crate::encoding::BOS;
use crate::error::{Error, Result};
use crate::TokenId;
use transformer::{log_softmax_in_place, segments, Packed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ffn: usize,
    pub max_len: usize,
    pub label_smoothing: f64,
    pub eos_policy: EosSmoothingPolicy,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 32,
            n_heads: 4,
            n_layers: 2,
            d_ffn: 128,
            max_len: 64,
            label_smoothing: 0.1,
            eos_policy: EosSmoothingPolicy::Standard,
            dropout: 0.0,
            seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::InvalidSmoothing(self.label_smoothing));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!(
                "dropout {} is outside [0, 1)",
                self.dropout
            )));
        }
        self.architecture(3).validate()
    }

    pub fn architecture(&self, vocab_size: usize) -> Architecture {
        Architecture {
            vocab_size,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            d_ffn: self.d_ffn,
            max_len: self.max_len,
        }
    }
}

/// Log-probabilities over the whole vocabulary at one decoder position.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDistribution {
    pub log_probs: Vec<f64>,
}

impl StepDistribution {
    pub fn prob_sum(&self) -> f64 {
        self.log_probs.iter().map(|lp| lp.exp()).sum()
    }

    pub fn log_prob(&self, id: TokenId) -> f64 {
        self.log_probs[id as usize]
    }

    pub fn min_log_prob(&self) -> f64 {
        self.log_probs.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

pub(crate) fn check_ids(params: &Parameters, ids: &[TokenId]) -> Result<()> {
    let size = params.arch.vocab_size;
    match ids.iter().find(|&&id| id as usize >= size) {
        Some(&id) => Err(Error::TokenOutOfRange { id, size }),
        None => Ok(()),
    }
}

pub(crate) fn check_len(params: &Parameters, len: usize) -> Result<()> {
    if len > params.arch.max_len {
        Err(Error::SequenceTooLong {
            length: len,
            max_len: params.arch.max_len,
        })
    } else {
        Ok(())
    }
}

/// Next-token distributions after `[BOS]` and after each prefix token:
/// `target_prefix.len() + 1` distributions in total.
pub fn forward(
    params: &Parameters,
    source: &[TokenId],
    target_prefix: &[TokenId],
) -> Result<Vec<StepDistribution>> {
    if source.is_empty() {
        return Err(Error::InvalidArgument("source must be non-empty".into()));
    }
    check_len(params, source.len())?;
    check_len(params, target_prefix.len() + 1)?;
    check_ids(params, source)?;
    check_ids(params, target_prefix)?;

    let mut tgt = Vec::with_capacity(target_prefix.len() + 1);
    tgt.push(BOS);
    tgt.extend_from_slice(target_prefix);
    let src_segs = segments([source.len()]);
    let tgt_segs = segments([tgt.len()]);
    let packed = Packed {
        src: source,
        src_segs: &src_segs,
        tgt: &tgt,
        tgt_segs: &tgt_segs,
    };
    let (logits, _) = transformer::forward_packed(params, &packed, None);
    Ok(rows_to_distributions(logits))
}

fn rows_to_distributions(mut logits: Array2<f64>) -> Vec<StepDistribution> {
    logits
        .rows_mut()
        .into_iter()
        .map(|mut row| {
            let slice = row.as_slice_mut().expect("contiguous");
            log_softmax_in_place(slice);
            StepDistribution {
                log_probs: slice.to_vec(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::{EosMode, Vocab};

    fn tiny() -> (Parameters, Vocab) {
        let vocab = Vocab::new(9, EosMode::Single);
        let config = ModelConfig {
            d_model: 8,
            n_heads: 2,
            d_ffn: 16,
            max_len: 16,
            ..ModelConfig::default()
        };
        let params = Parameters::init(config.architecture(vocab.size()), 3).unwrap();
        (params, vocab)
    }

    #[test]
    fn distributions_normalize() {
        let (params, _) = tiny();
        let dists = forward(&params, &[2, 3, 4], &[5, 6]).unwrap();
        assert_eq!(dists.len(), 3);
        for d in &dists {
            assert!((d.prob_sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fresh_model_is_near_uniform() {
        let vocab = Vocab::new(64, EosMode::Multi { l_max: 32 });
        let params =
            Parameters::init(ModelConfig::default().architecture(vocab.size()), 1).unwrap();
        let first = &forward(&params, &[2, 9, 30, 4, 17], &[]).unwrap()[0];
        let max = first.log_probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(max - first.min_log_prob() < 1.0);
    }

    #[test]
    fn forward_validates_inputs() {
        let (params, _) = tiny();
        assert!(matches!(
            forward(&params, &[2, 99], &[]),
            Err(Error::TokenOutOfRange { id: 99, .. })
        ));
        assert!(matches!(
            forward(&params, &[2; 17], &[]),
            Err(Error::SequenceTooLong { .. })
        ));
        assert!(matches!(
            forward(&params, &[2], &[3; 16]),
            Err(Error::SequenceTooLong { .. })
        ));
        assert!(forward(&params, &[], &[]).is_err());
    }

    #[test]
    fn prefix_positions_are_causal() {
        // Appending tokens must not change earlier distributions.
        let (params, _) = tiny();
        let short = forward(&params, &[2, 3, 4], &[5]).unwrap();
        let long = forward(&params, &[2, 3, 4], &[5, 7, 8]).unwrap();
        for (a, b) in short.iter().zip(&long) {
            for (x, y) in a.log_probs.iter().zip(&b.log_probs) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tied_embedding_row_drives_input_and_logit() {
        let (params, _) = tiny();
        let tok: TokenId = 5;
        let before = forward(&params, &[2, 3], &[tok]).unwrap();
        let mut bumped = params.clone();
        // Not a constant shift: the final layer norm makes hidden states
        // zero-mean, which would cancel it in the logit.
        for (i, v) in bumped.tgt_embed.row_mut(tok as usize).iter_mut().enumerate() {
            *v += 0.3 * (i as f64 - 1.5);
        }
        let after = forward(&bumped, &[2, 3], &[tok]).unwrap();
        let gap = |d: &StepDistribution| d.log_probs[7] - d.log_probs[8];

        // Position 0 reads only [BOS]: its hidden state is unchanged, so only
        // the logit of `tok` moves.
        assert!((gap(&after[0]) - gap(&before[0])).abs() < 1e-12);
        assert!((after[0].log_probs[tok as usize] - before[0].log_probs[tok as usize]).abs() > 1e-4);

        // Position 1 reads `tok` as input, so its hidden state moves too.
        assert!((gap(&after[1]) - gap(&before[1])).abs() > 1e-6);
    }
}
