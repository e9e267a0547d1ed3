//! Keeps only the most frequent target lengths per source length and shows
//! the length model getting sharper.
//!
//!     cargo run --release --example filter_corpus

use eoslab::corpus::{filter_by_length_percentile, generate_corpus, self_perplexity, GenSpec};

fn main() -> eoslab::Result<()> {
    let corpus = generate_corpus(&GenSpec::default())?;
    for keep in [1.0, 0.75, 0.5] {
        let filtered = filter_by_length_percentile(&corpus, keep)?;
        println!(
            "keep={keep:<4} pairs={:>5} Q-perplexity={:.4} spec={}",
            filtered.pairs.len(),
            self_perplexity(&filtered)?,
            filtered.spec
        );
    }
    Ok(())
}
