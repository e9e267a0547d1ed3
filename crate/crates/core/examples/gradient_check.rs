//! Compares the hand-written backward pass with central differences.
//!
//!     cargo run --example gradient_check

use eoslab::corpus::SentencePair;
use eoslab::encoding::{Batch, EosMode, Vocab};
use eoslab::model::{compare_gradients, loss_and_gradients, EosSmoothingPolicy, ModelConfig, Parameters};

fn main() -> eoslab::Result<()> {
    let pairs = [
        SentencePair { source: vec![2, 3, 4], target: vec![5, 6] },
        SentencePair { source: vec![7, 2], target: vec![3, 3, 4] },
    ];
    let refs: Vec<&SentencePair> = pairs.iter().collect();
    for mode in [EosMode::Single, EosMode::Multi { l_max: 6 }] {
        let vocab = Vocab::new(8, mode);
        let batch = Batch::from_pairs(&refs, &vocab)?;
        for eps in [0.0, 0.1] {
            for policy in [EosSmoothingPolicy::Standard, EosSmoothingPolicy::ExcludeEosGold] {
                let config = ModelConfig {
                    d_model: 8,
                    n_heads: 2,
                    d_ffn: 16,
                    max_len: 12,
                    label_smoothing: eps,
                    eos_policy: policy,
                    ..ModelConfig::default()
                };
                // Move off the fresh initialization, where attention is nearly
                // uniform and its gradients vanish.
                let mut params = Parameters::init(config.architecture(vocab.size()), 5)?;
                let flat: Vec<f64> = params
                    .flatten()
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v + 0.4 * ((i as f64) * 0.7).sin())
                    .collect();
                params.assign_flat(&flat)?;
                let (loss, grads) = loss_and_gradients(&params, &batch, &config, &vocab)?;
                let report = compare_gradients(&params, &batch, &config, &vocab, &grads, 1e-5)?;
                println!(
                    "{mode:<6} eps={eps:<3} {policy:?}: loss {loss:.5}, max rel err {:.2e} over {} coords, {} below floor (worst {})",
                    report.max_relative_error, report.coordinates, report.below_floor, report.worst_tensor
                );
            }
        }
    }
    Ok(())
}
