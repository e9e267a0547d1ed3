//! Label-smoothed loss on a toy distribution, and where its optimum sits.
//!
//!     cargo run --example label_smoothing

use eoslab::encoding::{EosMode, Vocab};
use eoslab::model::{label_smoothed_loss, EosSmoothingPolicy, StepDistribution};

fn dist(p: &[f64]) -> StepDistribution {
    StepDistribution {
        log_probs: p.iter().map(|x| x.ln()).collect(),
    }
}

fn main() -> eoslab::Result<()> {
    // Two content tokens plus [PAD], [BOS], [EOS]: |V| = 5.
    let vocab = Vocab::new(2, EosMode::Single);
    let gold = 2;
    let eps = 0.1;
    let sharp = dist(&[0.001, 0.001, 0.995, 0.002, 0.001]);
    let smoothed_optimum = {
        let other = eps / 4.0;
        dist(&[other, other, 1.0 - eps, other, other])
    };
    for policy in [EosSmoothingPolicy::Standard, EosSmoothingPolicy::ExcludeEosGold] {
        for (name, d) in [("sharp", &sharp), ("1-eps / eps/(V-1)", &smoothed_optimum)] {
            println!(
                "{policy:?} eps={eps} {name:>18}: loss {:.4}  (eps=0: {:.4})",
                label_smoothed_loss(d, gold, eps, policy, &vocab)?,
                label_smoothed_loss(d, gold, 0.0, policy, &vocab)?
            );
        }
    }
    // With smoothing the sharp distribution is no longer optimal: every
    // non-gold token, the terminator included, is pulled toward eps/(|V|-1).
    Ok(())
}
