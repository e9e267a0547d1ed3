//! Run-level statistics over decoded test sets.

use std::io::Write;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::decode::{beam_decode, default_max_steps, greedy_decode, score_sequence, Hypothesis};
use crate::encoding::Vocab;
use crate::error::{Error, Result};
use crate::model::{forward, Parameters};
use crate::TokenId;

/// CSV column order of [`MetricsReport::csv_row`].
pub const CSV_HEADER: &str = "run_id,eos_mode,epsilon,beam_k,sigma,length_ratio,empty_ratio,\
min_first_logp,eos_first_logp,ref_avg_logp,q_perplexity,task_accuracy";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub run_id: String,
    pub eos_mode: String,
    pub epsilon: f64,
    pub beam_k: usize,
    pub sigma: f64,
    pub length_ratio: f64,
    pub empty_ratio: f64,
    pub min_first_logp: f64,
    pub eos_first_logp: f64,
    pub ref_avg_logp: f64,
    pub q_perplexity: f64,
    pub task_accuracy: f64,
    pub seed: u64,
    /// Test pairs left out of `ref_avg_logp` because they did not fit the model.
    pub ref_skipped: usize,
}

impl MetricsReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.run_id,
            self.eos_mode,
            self.epsilon,
            self.beam_k,
            self.sigma,
            self.length_ratio,
            self.empty_ratio,
            self.min_first_logp,
            self.eos_first_logp,
            self.ref_avg_logp,
            self.q_perplexity,
            self.task_accuracy
        )
    }

    pub fn all_finite(&self) -> bool {
        [
            self.epsilon,
            self.sigma,
            self.length_ratio,
            self.empty_ratio,
            self.min_first_logp,
            self.eos_first_logp,
            self.ref_avg_logp,
            self.q_perplexity,
            self.task_accuracy,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

pub fn write_csv<W: Write>(mut out: W, reports: &[MetricsReport]) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in reports {
        writeln!(out, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Output content tokens over reference content tokens.
pub fn length_ratio(outputs: &[Hypothesis], references: &[Vec<TokenId>]) -> Result<f64> {
    if outputs.len() != references.len() {
        return Err(Error::InvalidArgument(format!(
            "{} outputs for {} references",
            outputs.len(),
            references.len()
        )));
    }
    let reference: usize = references.iter().map(Vec::len).sum();
    if reference == 0 {
        return Err(Error::InvalidArgument("references have no tokens".into()));
    }
    let produced: usize = outputs.iter().map(Hypothesis::len).sum();
    Ok(produced as f64 / reference as f64)
}

/// Fraction of outputs with no content tokens.
pub fn empty_ratio(outputs: &[Hypothesis]) -> Result<f64> {
    if outputs.is_empty() {
        return Err(Error::InvalidArgument("no outputs".into()));
    }
    let empty = outputs.iter().filter(|h| h.is_empty()).count();
    Ok(empty as f64 / outputs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FirstPositionStats {
    /// Mean over sources of the smallest first-position log-prob.
    pub min_first_logp: f64,
    /// Mean over sources of the first-position log-prob of the terminator
    /// that would produce the empty output.
    pub eos_first_logp: f64,
}

pub fn first_position_stats(
    params: &Parameters,
    sources: &[Vec<TokenId>],
    vocab: &Vocab,
) -> Result<FirstPositionStats> {
    if sources.is_empty() {
        return Err(Error::InvalidArgument("no sources".into()));
    }
    let eos = vocab.empty_terminator();
    let per_source: Vec<(f64, f64)> = sources
        .par_iter()
        .map(|src| {
            let first = forward(params, src, &[])?.swap_remove(0);
            Ok((first.min_log_prob(), first.log_prob(eos)))
        })
        .collect::<Result<_>>()?;
    let n = per_source.len() as f64;
    Ok(FirstPositionStats {
        min_first_logp: per_source.iter().map(|p| p.0).sum::<f64>() / n,
        eos_first_logp: per_source.iter().map(|p| p.1).sum::<f64>() / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceLogProb {
    /// Mean over scored pairs of `log P(y|x) / (l + 1)`.
    pub mean: f64,
    pub skipped: usize,
}

/// Per-token reference log-prob; the terminator counts as a token.
pub fn reference_avg_logprob(
    params: &Parameters,
    corpus: &Corpus,
    vocab: &Vocab,
) -> Result<ReferenceLogProb> {
    if corpus.pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let scores: Vec<Option<f64>> = corpus
        .pairs
        .par_iter()
        .map(|p| match score_sequence(params, &p.source, &p.target, vocab) {
            Ok(s) => Ok(Some(s / (p.target.len() + 1) as f64)),
            Err(Error::TargetTooLong { .. } | Error::SequenceTooLong { .. }) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<_>>()?;
    let scored: Vec<f64> = scores.iter().flatten().copied().collect();
    let skipped = scores.len() - scored.len();
    if skipped > 0 {
        warn!("{skipped} over-length reference pairs skipped");
    }
    if scored.is_empty() {
        return Err(Error::InvalidArgument("every reference pair is over-length".into()));
    }
    Ok(ReferenceLogProb {
        mean: scored.iter().sum::<f64>() / scored.len() as f64,
        skipped,
    })
}

/// Fraction of test sources whose greedy output matches the reference.
pub fn task_accuracy(params: &Parameters, corpus: &Corpus, vocab: &Vocab) -> Result<f64> {
    if corpus.pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let hits: Vec<bool> = corpus
        .pairs
        .par_iter()
        .map(|p| {
            let steps = default_max_steps(params, vocab, p.source.len());
            let h = greedy_decode(params, &p.source, vocab, steps)?;
            Ok(h.finished && h.tokens == p.target)
        })
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}

/// Best beam-`k` output for every source, in input order.
pub fn decode_all(
    params: &Parameters,
    sources: &[Vec<TokenId>],
    vocab: &Vocab,
    k: usize,
) -> Result<Vec<Hypothesis>> {
    sources
        .par_iter()
        .map(|src| {
            let steps = default_max_steps(params, vocab, src.len());
            let result = beam_decode(params, src, vocab, k, steps)?;
            Ok(result.best().cloned().expect("beam search returns a hypothesis"))
        })
        .collect()
}

/// Spearman rank correlation with average ranks for ties. Returns 0 when
/// either side is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidArgument(
            "spearman needs two equal-length samples of size >= 2".into(),
        ));
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx).powi(2);
        vy += (b - my).powi(2);
    }
    if vx == 0.0 || vy == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (vx * vy).sqrt())
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::EosMode;
    use crate::model::ModelConfig;

    fn hyp(tokens: &[TokenId]) -> Hypothesis {
        Hypothesis {
            tokens: tokens.to_vec(),
            log_prob: -1.0,
            finished: true,
            terminator: Some(99),
        }
    }

    #[test]
    fn ratios() {
        let outs = [hyp(&[]), hyp(&[2, 3])];
        assert_eq!(empty_ratio(&outs).unwrap(), 0.5);
        assert_eq!(empty_ratio(&outs[1..]).unwrap(), 0.0);
        let refs = vec![vec![4, 5], vec![2, 3]];
        assert_eq!(length_ratio(&outs, &refs).unwrap(), 0.5);
        assert_eq!(length_ratio(&[hyp(&[4, 5]), hyp(&[2, 3])], &refs).unwrap(), 1.0);
        assert_eq!(length_ratio(&[hyp(&[]), hyp(&[])], &refs).unwrap(), 0.0);
        assert!(length_ratio(&outs, &refs[..1]).is_err());
        assert!(length_ratio(&[hyp(&[])], &[vec![]]).is_err());
        assert!(empty_ratio(&[]).is_err());
    }

    #[test]
    fn spearman_against_pearson_of_ranks() {
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 25.0, 100.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        // Ranks x: 1,2.5,2.5,4; y: 1,2,3,4. Pearson by hand: cov 4.5, vx 4.5, vy 5.
        let r = spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((r - 4.5 / (4.5f64 * 5.0).sqrt()).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert!(spearman(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn uniform_model_first_position() {
        let vocab = Vocab::new(9, EosMode::Single);
        let config = ModelConfig {
            d_model: 8,
            n_heads: 2,
            d_ffn: 16,
            max_len: 12,
            ..ModelConfig::default()
        };
        let mut params = Parameters::init(config.architecture(vocab.size()), 3).unwrap();
        // Zero output embeddings give exactly uniform distributions.
        params.tgt_embed.fill(0.0);
        let stats = first_position_stats(&params, &[vec![2, 3], vec![4]], &vocab).unwrap();
        let expected = -(vocab.size() as f64).ln();
        assert!((stats.min_first_logp - expected).abs() < 1e-12);
        assert!((stats.eos_first_logp - expected).abs() < 1e-12);
    }

    #[test]
    fn reference_logprob_matches_forward() {
        let vocab = Vocab::new(9, EosMode::Multi { l_max: 6 });
        let config = ModelConfig {
            d_model: 8,
            n_heads: 2,
            d_ffn: 16,
            max_len: 12,
            ..ModelConfig::default()
        };
        let params = Parameters::init(config.architecture(vocab.size()), 4).unwrap();
        let pairs = vec![
            crate::corpus::SentencePair { source: vec![2, 3], target: vec![4, 5, 6] },
            crate::corpus::SentencePair { source: vec![7], target: vec![] },
            // Too long for l_max 6: skipped.
            crate::corpus::SentencePair { source: vec![7], target: vec![2; 7] },
        ];
        let corpus = Corpus {
            pairs: pairs.clone(),
            split: crate::corpus::Split::Test,
            seed: 0,
            alphabet_size: 9,
            spec: "test".into(),
        };
        let got = reference_avg_logprob(&params, &corpus, &vocab).unwrap();
        assert_eq!(got.skipped, 1);
        let mut expected = 0.0;
        for p in &pairs[..2] {
            let dists = forward(&params, &p.source, &p.target).unwrap();
            let mut gold = p.target.clone();
            gold.push(vocab.eos_for_length(p.target.len()).unwrap());
            let total: f64 = dists.iter().zip(&gold).map(|(d, &g)| d.log_prob(g)).sum();
            expected += total / gold.len() as f64;
        }
        assert!((got.mean - expected / 2.0).abs() < 1e-10);
        assert!(got.mean < 0.0);
    }

    #[test]
    fn csv_row_order() {
        let r = MetricsReport {
            run_id: "abc".into(),
            eos_mode: "single".into(),
            epsilon: 0.1,
            beam_k: 4,
            sigma: 2.0,
            length_ratio: 0.5,
            empty_ratio: 0.25,
            min_first_logp: -9.0,
            eos_first_logp: -3.0,
            ref_avg_logp: -0.5,
            q_perplexity: 6.0,
            task_accuracy: 0.0,
            seed: 1,
            ref_skipped: 0,
        };
        assert_eq!(r.csv_row(), "abc,single,0.1,4,2,0.5,0.25,-9,-3,-0.5,6,0");
        assert_eq!(CSV_HEADER.split(',').count(), r.csv_row().split(',').count());
        assert!(r.all_finite());
    }
}
