//! Trains the reference model on a corpus and prints the evaluation row.
//!
//!     cargo run --release --example train_copy_task -- [sigma] [epsilon] [single|multi] [steps] [lr] [pairs]

use std::time::Instant;

use eoslab::corpus::{generate_corpus, generate_test_corpus, self_perplexity, GenSpec};
use eoslab::encoding::{build_vocab, EosMode};
use eoslab::harness::{evaluate, RunInfo};
use eoslab::metrics::reference_avg_logprob;
use eoslab::model::{train, EosSmoothingPolicy, ModelConfig, TrainSpec};

fn main() -> eoslab::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let sigma: f64 = args.first().map_or(Ok(0.0), |s| s.parse()).expect("sigma");
    let epsilon: f64 = args.get(1).map_or(Ok(0.0), |s| s.parse()).expect("epsilon");
    let mode: EosMode = args.get(2).map_or(Ok(EosMode::Single), |s| s.parse())?;
    let steps: usize = args.get(3).map_or(Ok(3000), |s| s.parse()).expect("steps");
    let mut spec = TrainSpec {
        steps,
        log_every: 0,
        ..TrainSpec::default()
    };
    if let Some(lr) = args.get(4) {
        spec.optimizer.learning_rate = lr.parse().expect("learning rate");
    }

    let mut gen = GenSpec {
        sigma,
        ..GenSpec::default()
    };
    if let Some(n) = args.get(5) {
        gen.pair_count = n.parse().expect("pair count");
    }
    let corpus = generate_corpus(&gen)?;
    let test = generate_test_corpus(&gen, 200)?;
    let vocab = build_vocab(&corpus, mode)?;
    let config = ModelConfig {
        label_smoothing: epsilon,
        eos_policy: match mode {
            EosMode::Single => EosSmoothingPolicy::Standard,
            EosMode::Multi { .. } => EosSmoothingPolicy::ExcludeEosGold,
        },
        ..ModelConfig::default()
    };

    let start = Instant::now();
    let outcome = train(&config, &corpus, &vocab, &spec)?;
    let elapsed = start.elapsed();
    let tail: Vec<f64> = outcome.loss_curve.iter().rev().take(50).map(|p| p.1).collect();
    println!(
        "{steps} steps in {:.1}s, final loss {:.4}",
        elapsed.as_secs_f64(),
        tail.iter().sum::<f64>() / tail.len() as f64
    );

    let mut seen = corpus.clone();
    seen.pairs.truncate(200);
    let on_train = reference_avg_logprob(outcome.params(), &seen, &vocab)?;
    println!("reference log-prob on 200 training pairs: {:.4}", on_train.mean);

    let info = RunInfo {
        run_id: "example".into(),
        seed: gen.seed,
        sigma,
        q_perplexity: self_perplexity(&corpus)?,
        train_corpus: corpus.header(),
    };
    let eval = evaluate(outcome.params(), &vocab, epsilon, &test, &[1, 4, 16], &info, false)?;
    println!("{}", eoslab::metrics::CSV_HEADER);
    for r in &eval.reports {
        println!("{}", r.csv_row());
    }
    Ok(())
}
