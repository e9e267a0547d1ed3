//! A complete small experiment: generate, filter, train, evaluate, report.
//!
//!     cargo run --release --example pipeline -- [out_dir]

use std::path::PathBuf;

use eoslab::corpus::GenSpec;
use eoslab::harness::{cmd_report, run_pipeline, ExperimentConfig};
use eoslab::model::TrainSpec;

fn main() -> eoslab::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map_or_else(|| std::env::temp_dir().join("eoslab-pipeline"), PathBuf::from);
    let mut config = ExperimentConfig {
        beams: vec![1, 4],
        keep_fractions: vec![0.5],
        test_pairs: 50,
        gen: GenSpec {
            pair_count: 2000,
            ..GenSpec::default()
        },
        train: TrainSpec {
            steps: 300,
            log_every: 100,
            ..TrainSpec::default()
        },
        ..ExperimentConfig::default()
    };
    config.apply_seed();
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.toml"), config.to_toml())?;

    run_pipeline(&config, &dir)?;
    print!("{}", cmd_report(&[dir.join("metrics.csv")], None)?);
    println!("outputs in {}", dir.display());
    Ok(())
}
