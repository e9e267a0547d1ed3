//! When does the empty output beat a real one?
//!
//!     cargo run --example empty_preference

use eoslab::decode::{empty_preferred, prefers_empty};
use eoslab::encoding::{EosMode, Vocab};
use eoslab::model::{ModelConfig, Parameters};

fn main() -> eoslab::Result<()> {
    // A 20-token candidate at an average per-token log-prob, against the
    // log-prob of ending the output immediately.
    for (per_token, empty) in [(-0.40, -8.94), (-0.51, -9.41)] {
        let candidate = per_token * 20.0;
        let pref = prefers_empty(empty, [candidate]);
        println!(
            "candidate {candidate:>6.2} vs empty {empty:>6.2}: empty preferred = {}",
            pref.preferred
        );
    }

    // The same comparison on a real (untrained) model, using the
    // hypotheses found by beam search.
    let vocab = Vocab::new(9, EosMode::Single);
    let config = ModelConfig {
        d_model: 8,
        n_heads: 2,
        d_ffn: 16,
        max_len: 16,
        ..ModelConfig::default()
    };
    let params = Parameters::init(config.architecture(vocab.size()), 1)?;
    for k in [1, 4, 16] {
        let pref = empty_preferred(&params, &[2, 3, 4], &vocab, k)?;
        println!(
            "beam {k:<2}: empty {:.3}, best non-empty {:?}, preferred {}{}",
            pref.empty_log_prob,
            pref.best_nonempty_log_prob,
            pref.preferred,
            if pref.vacuous { " (no non-empty candidate)" } else { "" }
        );
    }
    Ok(())
}
