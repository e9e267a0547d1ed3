//! Sequence scoring and search.
//!
//! Scores are raw model log-probabilities: no length normalization and no
//! word bonus. Decoders only expand content tokens and the terminator the
//! stop rule allows at the current step; everything else (`[PAD]`, `[BOS]`,
//! and in multi mode every `[EOS-l]` that would end the output at the wrong
//! length) is masked out without renormalizing.
//!
//! `max_steps` bounds the content length. After `max_steps` content tokens
//! only the terminator may follow; greedy search reports such an output as
//! unfinished when the terminator is not its argmax.

use std::cmp::Ordering;

use serde::Serialize;

use crate::encoding::{Vocab, BOS};
use crate::error::{Error, Result};
use crate::model::{forward, DecoderState, Parameters, StepDistribution};
use crate::TokenId;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Hypothesis {
    /// Content tokens, without the terminator.
    pub tokens: Vec<TokenId>,
    /// Sum of the chosen factors, including the terminator's when finished.
    pub log_prob: f64,
    pub finished: bool,
    pub terminator: Option<TokenId>,
}

impl Hypothesis {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Outcome of comparing the empty output against the non-empty candidates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EmptyPreference {
    pub preferred: bool,
    pub empty_log_prob: f64,
    pub best_nonempty_log_prob: Option<f64>,
    /// True when there was no non-empty candidate to compare against.
    pub vacuous: bool,
}

/// `P(empty | x) > P(y | x)` for every candidate `y`.
pub fn prefers_empty(empty_log_prob: f64, candidates: impl IntoIterator<Item = f64>) -> EmptyPreference {
    let best = candidates.into_iter().fold(None, |acc: Option<f64>, s| {
        Some(acc.map_or(s, |a| a.max(s)))
    });
    EmptyPreference {
        preferred: best.is_none_or(|b| empty_log_prob > b),
        empty_log_prob,
        best_nonempty_log_prob: best,
        vacuous: best.is_none(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    /// Finished hypotheses, best first.
    pub hypotheses: Vec<Hypothesis>,
    /// Best surviving unfinished hypothesis, if search ran out of steps
    /// before finishing anything.
    pub unfinished: Option<Hypothesis>,
    pub first_step: StepDistribution,
    pub beam_size: usize,
    pub empty: EmptyPreference,
}

impl DecodeResult {
    /// Highest-scoring finished output, else the unfinished fallback.
    pub fn best(&self) -> Option<&Hypothesis> {
        self.hypotheses.first().or(self.unfinished.as_ref())
    }

    pub fn to_json(&self, source: &[TokenId]) -> serde_json::Value {
        let hyps: Vec<_> = self
            .hypotheses
            .iter()
            .map(|h| {
                serde_json::json!({
                    "ids": h.tokens,
                    "logp": h.log_prob,
                    "terminator": h.terminator,
                })
            })
            .collect();
        serde_json::json!({
            "source_ids": source,
            "hypotheses": hyps,
            "empty_logp": self.empty.empty_log_prob,
            "empty_preferred": self.empty.preferred,
        })
    }
}

/// One retained hypothesis at one search step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRecord {
    pub step: usize,
    pub prefix_ids: Vec<TokenId>,
    pub chosen_id: TokenId,
    pub logp_step: f64,
    pub logp_cum: f64,
}

/// `2 m + 4`, capped so that the decoder never runs past `max_len` and, in
/// multi mode, every content length has a terminator.
pub fn default_max_steps(params: &Parameters, vocab: &Vocab, source_len: usize) -> usize {
    let mut steps = 2 * source_len + 4;
    steps = steps.min(params.arch.max_len - 1);
    if let Some(l_max) = vocab.l_max() {
        steps = steps.min(l_max);
    }
    steps
}

fn check_max_steps(params: &Parameters, vocab: &Vocab, max_steps: usize) -> Result<()> {
    if max_steps + 1 > params.arch.max_len {
        return Err(Error::InvalidArgument(format!(
            "max_steps {max_steps} needs {} decoder positions, model has {}",
            max_steps + 1,
            params.arch.max_len
        )));
    }
    if let Some(l_max) = vocab.l_max() {
        if max_steps > l_max {
            return Err(Error::InvalidArgument(format!(
                "max_steps {max_steps} exceeds l_max {l_max}"
            )));
        }
    }
    if vocab.size() != params.arch.vocab_size {
        return Err(Error::Incompatible(format!(
            "vocabulary has {} tokens, model expects {}",
            vocab.size(),
            params.arch.vocab_size
        )));
    }
    Ok(())
}

/// The terminator allowed after `content_len` content tokens.
fn terminator(vocab: &Vocab, content_len: usize) -> Option<TokenId> {
    vocab.eos_for_length(content_len)
}

/// Tokens that may be emitted after `content_len` content tokens, ascending.
fn legal_tokens(vocab: &Vocab, content_len: usize, max_steps: usize) -> Vec<TokenId> {
    let mut out: Vec<TokenId> = if content_len < max_steps {
        vocab.content_ids().collect()
    } else {
        Vec::new()
    };
    out.extend(terminator(vocab, content_len));
    out
}

/// log P(target | source) including the terminator factor, computed with
/// the cached step-by-step decoder.
pub fn score_sequence(
    params: &Parameters,
    source: &[TokenId],
    target: &[TokenId],
    vocab: &Vocab,
) -> Result<f64> {
    let eos = terminator(vocab, target.len()).ok_or(Error::TargetTooLong {
        length: target.len(),
        l_max: vocab.l_max().unwrap_or(0),
    })?;
    if target.len() + 1 > params.arch.max_len {
        return Err(Error::SequenceTooLong {
            length: target.len() + 1,
            max_len: params.arch.max_len,
        });
    }
    let enc = params.encode(source)?;
    let mut state = vec![params.start_state()];
    let mut input = BOS;
    let mut total = 0.0;
    for &gold in target.iter().chain(std::iter::once(&eos)) {
        let lp = params.step(&enc, &mut state, &[input])?;
        total += lp[[0, gold as usize]];
        input = gold;
    }
    Ok(total)
}

/// Argmax token among `legal`, ties to the lower id.
fn argmax(row: &[f64], legal: &[TokenId]) -> TokenId {
    let mut best = legal[0];
    for &t in &legal[1..] {
        if row[t as usize] > row[best as usize] {
            best = t;
        }
    }
    best
}

pub fn greedy_decode(
    params: &Parameters,
    source: &[TokenId],
    vocab: &Vocab,
    max_steps: usize,
) -> Result<Hypothesis> {
    check_max_steps(params, vocab, max_steps)?;
    let enc = params.encode(source)?;
    let mut state = vec![params.start_state()];
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
        terminator: None,
    };
    let mut input = BOS;
    loop {
        let lp = params.step(&enc, &mut state, &[input])?;
        let row = lp.row(0);
        let row = row.as_slice().expect("contiguous");
        let mut candidates = vocab.content_ids().collect::<Vec<_>>();
        candidates.extend(terminator(vocab, hyp.len()));
        let choice = argmax(row, &candidates);
        if vocab.is_eos(choice) {
            hyp.log_prob += row[choice as usize];
            hyp.finished = true;
            hyp.terminator = Some(choice);
            return Ok(hyp);
        }
        if hyp.len() == max_steps {
            return Ok(hyp);
        }
        hyp.log_prob += row[choice as usize];
        hyp.tokens.push(choice);
        input = choice;
    }
}

struct Beam {
    hyp: Hypothesis,
    state: DecoderState,
    next_input: TokenId,
}

struct Candidate {
    score: f64,
    parent: usize,
    token: TokenId,
    step_lp: f64,
}

fn rank(a: &Candidate, b: &Candidate) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.parent.cmp(&b.parent))
        .then(a.token.cmp(&b.token))
}

/// Length-synchronous beam search.
///
/// At each step every active hypothesis is expanded with its legal tokens
/// and candidates are ranked by cumulative log-prob. Terminated candidates
/// ranked within the top `k` are collected as finished; the best `k`
/// unterminated candidates form the next beam. Search stops once `k`
/// finished hypotheses score at least as well as every active one (scores
/// only decrease, so none of the active ones can catch up), or when the
/// content length reaches `max_steps` and only terminators remain.
pub fn beam_decode(
    params: &Parameters,
    source: &[TokenId],
    vocab: &Vocab,
    k: usize,
    max_steps: usize,
) -> Result<DecodeResult> {
    beam_decode_traced(params, source, vocab, k, max_steps, None)
}

pub fn beam_decode_traced(
    params: &Parameters,
    source: &[TokenId],
    vocab: &Vocab,
    k: usize,
    max_steps: usize,
    mut trace: Option<&mut Vec<TraceRecord>>,
) -> Result<DecodeResult> {
    if k == 0 {
        return Err(Error::InvalidArgument("beam size must be at least 1".into()));
    }
    check_max_steps(params, vocab, max_steps)?;
    let enc = params.encode(source)?;
    let mut active = vec![Beam {
        hyp: Hypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
            finished: false,
            terminator: None,
        },
        state: params.start_state(),
        next_input: BOS,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let mut first_step = None;

    for t in 1..=max_steps + 1 {
        let content_len = t - 1;
        let legal = legal_tokens(vocab, content_len, max_steps);
        let mut states: Vec<DecoderState> = active.iter().map(|b| b.state.clone()).collect();
        let inputs: Vec<TokenId> = active.iter().map(|b| b.next_input).collect();
        let lp = params.step(&enc, &mut states, &inputs)?;
        if first_step.is_none() {
            first_step = Some(StepDistribution {
                log_probs: lp.row(0).to_vec(),
            });
        }

        let mut candidates = Vec::with_capacity(active.len() * legal.len());
        for (i, beam) in active.iter().enumerate() {
            for &tok in &legal {
                let step_lp = lp[[i, tok as usize]];
                candidates.push(Candidate {
                    score: beam.hyp.log_prob + step_lp,
                    parent: i,
                    token: tok,
                    step_lp,
                });
            }
        }
        candidates.sort_by(rank);

        let mut next = Vec::with_capacity(k);
        for (r, c) in candidates.iter().enumerate() {
            if r >= k && next.len() >= k {
                break;
            }
            let parent = &active[c.parent];
            let is_end = vocab.is_eos(c.token);
            if is_end && r >= k {
                continue;
            }
            if !is_end && next.len() >= k {
                continue;
            }
            if let Some(trace) = trace.as_deref_mut() {
                trace.push(TraceRecord {
                    step: t,
                    prefix_ids: parent.hyp.tokens.clone(),
                    chosen_id: c.token,
                    logp_step: c.step_lp,
                    logp_cum: c.score,
                });
            }
            if is_end {
                finished.push(Hypothesis {
                    tokens: parent.hyp.tokens.clone(),
                    log_prob: c.score,
                    finished: true,
                    terminator: Some(c.token),
                });
            } else {
                let mut tokens = parent.hyp.tokens.clone();
                tokens.push(c.token);
                next.push(Beam {
                    hyp: Hypothesis {
                        tokens,
                        log_prob: c.score,
                        finished: false,
                        terminator: None,
                    },
                    state: states[c.parent].clone(),
                    next_input: c.token,
                });
            }
        }
        active = next;
        if active.is_empty() {
            break;
        }
        let best_active = active
            .iter()
            .map(|b| b.hyp.log_prob)
            .fold(f64::NEG_INFINITY, f64::max);
        let settled = finished.iter().filter(|h| h.log_prob >= best_active).count();
        if settled >= k {
            break;
        }
    }

    finished.sort_by(|a, b| b.log_prob.total_cmp(&a.log_prob));
    let unfinished = if finished.is_empty() {
        active.into_iter().map(|b| b.hyp).next()
    } else {
        None
    };
    let first_step = first_step.expect("at least one step runs");
    let empty_log_prob = first_step.log_prob(vocab.empty_terminator());
    let empty = prefers_empty(
        empty_log_prob,
        finished.iter().filter(|h| !h.is_empty()).map(|h| h.log_prob),
    );
    Ok(DecodeResult {
        hypotheses: finished,
        unfinished,
        first_step,
        beam_size: k,
        empty,
    })
}

/// Compares the empty output's score against the non-empty hypotheses
/// finished by a width-`k` beam search.
pub fn empty_preferred(
    params: &Parameters,
    source: &[TokenId],
    vocab: &Vocab,
    k: usize,
) -> Result<EmptyPreference> {
    let max_steps = default_max_steps(params, vocab, source.len());
    empty_preferred_within(params, source, vocab, k, max_steps)
}

/// [`empty_preferred`] with an explicit content-length bound.
pub fn empty_preferred_within(
    params: &Parameters,
    source: &[TokenId],
    vocab: &Vocab,
    k: usize,
    max_steps: usize,
) -> Result<EmptyPreference> {
    let result = beam_decode(params, source, vocab, k, max_steps)?;
    let empty_log_prob = score_sequence(params, source, &[], vocab)?;
    Ok(prefers_empty(
        empty_log_prob,
        result
            .hypotheses
            .iter()
            .filter(|h| !h.is_empty())
            .map(|h| h.log_prob),
    ))
}

/// Largest search space [`exact_decode`] will enumerate.
pub const EXACT_SEARCH_LIMIT: u128 = 10_000_000;

fn search_space(vocab: &Vocab, max_steps: usize) -> u128 {
    let c = vocab.content_size() as u128;
    let mut total = 0u128;
    let mut level = 1u128;
    for _ in 0..=max_steps {
        total = total.saturating_add(level);
        level = level.saturating_mul(c);
    }
    total
}

/// True argmax over every output with at most `max_steps` content tokens,
/// by exhaustive enumeration. Each prefix is scored with a full forward
/// pass, independently of the cached decoder used by the other searches.
pub fn exact_decode(
    params: &Parameters,
    source: &[TokenId],
    vocab: &Vocab,
    max_steps: usize,
) -> Result<Hypothesis> {
    check_max_steps(params, vocab, max_steps)?;
    let count = search_space(vocab, max_steps);
    if count > EXACT_SEARCH_LIMIT {
        return Err(Error::SearchSpaceTooLarge {
            count,
            limit: EXACT_SEARCH_LIMIT,
        });
    }
    let mut best: Option<Hypothesis> = None;
    let mut stack: Vec<(Vec<TokenId>, f64)> = vec![(Vec::new(), 0.0)];
    while let Some((prefix, score)) = stack.pop() {
        let dists = forward(params, source, &prefix)?;
        let next = dists.last().expect("one distribution per position");
        let eos = terminator(vocab, prefix.len()).expect("max_steps checked against l_max");
        let total = score + next.log_prob(eos);
        if best.as_ref().is_none_or(|b| total > b.log_prob) {
            best = Some(Hypothesis {
                tokens: prefix.clone(),
                log_prob: total,
                finished: true,
                terminator: Some(eos),
            });
        }
        if prefix.len() < max_steps {
            for tok in vocab.content_ids().rev() {
                let mut child = prefix.clone();
                child.push(tok);
                stack.push((child, score + next.log_prob(tok)));
            }
        }
    }
    Ok(best.expect("the empty output is always enumerated"))
}

/// Everything [`exact_decode`] would consider, with scores, best first.
/// Meant for small tests.
pub fn enumerate_outputs(
    params: &Parameters,
    source: &[TokenId],
    vocab: &Vocab,
    max_steps: usize,
) -> Result<Vec<Hypothesis>> {
    check_max_steps(params, vocab, max_steps)?;
    let count = search_space(vocab, max_steps);
    if count > EXACT_SEARCH_LIMIT {
        return Err(Error::SearchSpaceTooLarge {
            count,
            limit: EXACT_SEARCH_LIMIT,
        });
    }
    let mut out = Vec::new();
    let mut stack: Vec<(Vec<TokenId>, f64)> = vec![(Vec::new(), 0.0)];
    while let Some((prefix, score)) = stack.pop() {
        let dists = forward(params, source, &prefix)?;
        let next = dists.last().expect("one distribution per position");
        let eos = terminator(vocab, prefix.len()).expect("max_steps checked against l_max");
        if prefix.len() < max_steps {
            for tok in vocab.content_ids() {
                let mut child = prefix.clone();
                child.push(tok);
                stack.push((child, score + next.log_prob(tok)));
            }
        }
        out.push(Hypothesis {
            log_prob: score + next.log_prob(eos),
            tokens: prefix,
            finished: true,
            terminator: Some(eos),
        });
    }
    out.sort_by(|a, b| b.log_prob.total_cmp(&a.log_prob));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::EosMode;
    use crate::model::ModelConfig;

    fn tiny(mode: EosMode, seed: u64) -> (Parameters, Vocab) {
        let content = match mode {
            EosMode::Single => 9,
            EosMode::Multi { l_max } => 12 - 3 - l_max,
        };
        let vocab = Vocab::new(content, mode);
        let config = ModelConfig {
            d_model: 8,
            n_heads: 2,
            d_ffn: 16,
            max_len: 12,
            ..ModelConfig::default()
        };
        let mut params = Parameters::init(config.architecture(vocab.size()), seed).unwrap();
        // Sharpen the untrained model so searches disagree.
        params.tgt_embed.mapv_inplace(|v| v * 60.0);
        (params, vocab)
    }

    #[test]
    fn worked_empty_preference_examples() {
        assert!(!prefers_empty(-8.94, [-0.40 * 20.0]).preferred);
        assert!(prefers_empty(-9.41, [-0.51 * 20.0]).preferred);
        let none = prefers_empty(-3.0, []);
        assert!(none.preferred && none.vacuous);
    }

    #[test]
    fn empty_score_is_first_terminator_probability() {
        for mode in [EosMode::Single, EosMode::Multi { l_max: 4 }] {
            let (params, vocab) = tiny(mode, 1);
            let src = [2, 3, 4];
            let empty = score_sequence(&params, &src, &[], &vocab).unwrap();
            let first = &forward(&params, &src, &[]).unwrap()[0];
            assert!((empty - first.log_prob(vocab.empty_terminator())).abs() < 1e-12);
        }
    }

    #[test]
    fn greedy_equals_beam_one() {
        for seed in 0..6 {
            for mode in [EosMode::Single, EosMode::Multi { l_max: 4 }] {
                let (params, vocab) = tiny(mode, seed);
                let src = [2, 5, 3];
                let g = greedy_decode(&params, &src, &vocab, 4).unwrap();
                let b = beam_decode(&params, &src, &vocab, 1, 4).unwrap();
                assert_eq!(b.best().unwrap().tokens, g.tokens);
                if g.finished {
                    assert!((b.best().unwrap().log_prob - g.log_prob).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn multi_mode_terminators_match_length() {
        let (params, vocab) = tiny(EosMode::Multi { l_max: 4 }, 3);
        let result = beam_decode(&params, &[2, 3], &vocab, 8, 4).unwrap();
        assert!(!result.hypotheses.is_empty());
        for h in &result.hypotheses {
            assert_eq!(h.terminator, vocab.eos_for_length(h.len()));
            assert!(h.tokens.iter().all(|&t| !vocab.is_eos(t)));
        }
    }

    #[test]
    fn zero_steps_gives_empty_output() {
        let (params, vocab) = tiny(EosMode::Single, 2);
        let h = exact_decode(&params, &[2, 3], &vocab, 0).unwrap();
        assert!(h.is_empty());
        let b = beam_decode(&params, &[2, 3], &vocab, 3, 0).unwrap();
        assert!(b.best().unwrap().is_empty());
    }

    #[test]
    fn exact_bounds_beam_and_saturated_beam_is_exact() {
        for seed in 0..4 {
            let (params, vocab) = tiny(EosMode::Single, seed);
            let src = [2, 7, 4];
            let exact = exact_decode(&params, &src, &vocab, 3).unwrap();
            let all = enumerate_outputs(&params, &src, &vocab, 3).unwrap();
            assert!((all[0].log_prob - exact.log_prob).abs() < 1e-12);
            for k in [1, 2, 8, 64] {
                let b = beam_decode(&params, &src, &vocab, k, 3).unwrap();
                assert!(b.best().unwrap().log_prob <= exact.log_prob + 1e-10);
            }
            let saturated = beam_decode(&params, &src, &vocab, 729, 3).unwrap();
            let best = saturated.best().unwrap();
            assert!((best.log_prob - exact.log_prob).abs() < 1e-10);
            assert_eq!(best.tokens, exact.tokens);
        }
    }

    #[test]
    fn search_guard() {
        let vocab = Vocab::new(64, EosMode::Single);
        let params = Parameters::init(ModelConfig::default().architecture(vocab.size()), 1).unwrap();
        assert!(matches!(
            exact_decode(&params, &[2], &vocab, 5),
            Err(Error::SearchSpaceTooLarge { .. })
        ));
    }

    #[test]
    fn trace_records_retained_hypotheses() {
        let (params, vocab) = tiny(EosMode::Single, 5);
        let mut trace = Vec::new();
        let result = beam_decode_traced(&params, &[2, 3], &vocab, 2, 3, Some(&mut trace)).unwrap();
        assert!(!trace.is_empty());
        assert_eq!(trace[0].step, 1);
        assert!(trace.iter().filter(|r| r.step == 1).count() <= 2);
        let json = result.to_json(&[2, 3]);
        assert_eq!(json["source_ids"], serde_json::json!([2, 3]));
        assert!(json["hypotheses"].is_array());
    }

    #[test]
    fn max_steps_validation() {
        let (params, vocab) = tiny(EosMode::Multi { l_max: 4 }, 1);
        assert!(beam_decode(&params, &[2], &vocab, 2, 5).is_err());
        assert!(greedy_decode(&params, &[2], &vocab, 12).is_err());
        assert!(beam_decode(&params, &[2], &vocab, 0, 3).is_err());
    }
}
