//! Beam search against exhaustive search on a model small enough to
//! enumerate every output.
//!
//!     cargo run --release --example beam_vs_exact

use eoslab::decode::{beam_decode, exact_decode, greedy_decode};
use eoslab::encoding::{EosMode, Vocab};
use eoslab::model::{ModelConfig, Parameters};

fn main() -> eoslab::Result<()> {
    // 9 content tokens + [PAD], [BOS], [EOS] = 12 tokens.
    let vocab = Vocab::new(9, EosMode::Single);
    let config = ModelConfig {
        d_model: 8,
        n_heads: 2,
        d_ffn: 16,
        max_len: 12,
        ..ModelConfig::default()
    };
    let mut params = Parameters::init(config.architecture(vocab.size()), 3)?;
    // An untrained model is almost uniform; sharpen it so search matters.
    params.tgt_embed.mapv_inplace(|v| v * 60.0);
    let source = [2, 7, 4, 9];
    let max_steps = 4;

    let exact = exact_decode(&params, &source, &vocab, max_steps)?;
    println!("exact    {:>9.4}  {:?}", exact.log_prob, exact.tokens);
    let greedy = greedy_decode(&params, &source, &vocab, max_steps)?;
    println!(
        "greedy   {:>9.4}  {:?}{}",
        greedy.log_prob,
        greedy.tokens,
        if greedy.finished { "" } else { " (unfinished)" }
    );
    for k in [1, 2, 4, 16, 64, 6561] {
        let result = beam_decode(&params, &source, &vocab, k, max_steps)?;
        let best = result.best().expect("beam returns a hypothesis");
        println!("beam {k:<4} {:>9.4}  {:?}", best.log_prob, best.tokens);
    }
    Ok(())
}
