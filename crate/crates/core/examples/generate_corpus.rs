//! Generates corpora across the noise grid and prints how uncertain the
//! target length is for each.
//!
//!     cargo run --release --example generate_corpus -- [out_dir]

use std::path::PathBuf;

use eoslab::corpus::{estimate_length_model, generate_corpus, self_perplexity, GenSpec};

fn main() -> eoslab::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from);
    for sigma in [0.0, 0.5, 1.0, 2.0] {
        let spec = GenSpec {
            sigma,
            ..GenSpec::default()
        };
        let corpus = generate_corpus(&spec)?;
        let model = estimate_length_model(&corpus)?;
        let row: Vec<String> = model.row(12).map(|(l, c)| format!("{l}:{c}")).collect();
        println!(
            "sigma={sigma:<4} pairs={} Q-perplexity={:.4}  counts at m=12: {}",
            corpus.pairs.len(),
            self_perplexity(&corpus)?,
            row.join(" ")
        );
        if let Some(dir) = &out {
            corpus.save(&dir.join(format!("train.sigma{sigma}.txt")))?;
        }
    }
    let first = &generate_corpus(&GenSpec::default())?.pairs[0];
    println!("first pair: {:?} -> {:?}", first.source, first.target);
    Ok(())
}
