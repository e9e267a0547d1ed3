use log::{debug, info};
use ndarray::Array2;
use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::loss::SmoothedTarget;
use super::optim::{Adam, OptimizerSpec};
use super::transformer::{
    backward_packed, forward_packed, log_softmax_in_place, segments, DropoutCtx, Packed, Segment,
};
use super::{check_len, ModelConfig, Parameters};
use crate::corpus::{Corpus, SentencePair};
use crate::encoding::{epoch_order, Batch, Vocab};
use crate::error::{Error, Result};
use crate::rng::{indexed_substream, substream, Stream};
use crate::TokenId;

struct PackedBatch {
    src: Vec<TokenId>,
    src_segs: Vec<Segment>,
    tgt: Vec<TokenId>,
    tgt_segs: Vec<Segment>,
    gold: Vec<TokenId>,
}

impl PackedBatch {
    fn new(batch: &Batch, params: &Parameters, vocab: &Vocab) -> Result<Self> {
        if vocab.size() != params.arch.vocab_size {
            return Err(Error::Incompatible(format!(
                "vocabulary has {} tokens, model expects {}",
                vocab.size(),
                params.arch.vocab_size
            )));
        }
        if batch.loss_positions() == 0 {
            return Err(Error::EmptyLossMask);
        }
        let mut packed = PackedBatch {
            src: Vec::new(),
            src_segs: Vec::new(),
            tgt: Vec::new(),
            tgt_segs: Vec::new(),
            gold: Vec::new(),
        };
        let mut src_lens = Vec::with_capacity(batch.len());
        let mut tgt_lens = Vec::with_capacity(batch.len());
        for i in 0..batch.len() {
            let src = batch.source_row(i);
            let tgt = batch.target_input_row(i);
            if src.is_empty() {
                return Err(Error::InvalidArgument(format!("batch row {i} has no source")));
            }
            check_len(params, src.len())?;
            check_len(params, tgt.len())?;
            src_lens.push(src.len());
            tgt_lens.push(tgt.len());
            packed.src.extend(src);
            packed.tgt.extend(tgt);
            packed.gold.extend(batch.target_gold_row(i));
        }
        super::check_ids(params, &packed.src)?;
        super::check_ids(params, &packed.tgt)?;
        super::check_ids(params, &packed.gold)?;
        packed.src_segs = segments(src_lens);
        packed.tgt_segs = segments(tgt_lens);
        Ok(packed)
    }

    fn view(&self) -> Packed<'_> {
        Packed {
            src: &self.src,
            src_segs: &self.src_segs,
            tgt: &self.tgt,
            tgt_segs: &self.tgt_segs,
        }
    }
}

fn targets(packed: &PackedBatch, config: &ModelConfig, vocab: &Vocab) -> Result<Vec<SmoothedTarget>> {
    packed
        .gold
        .iter()
        .map(|&g| SmoothedTarget::new(g, config.label_smoothing, config.eos_policy, vocab))
        .collect()
}

fn loss_and_gradients_inner(
    params: &Parameters,
    packed: &PackedBatch,
    config: &ModelConfig,
    vocab: &Vocab,
    drop: Option<DropoutCtx<'_>>,
    batch_index: usize,
) -> Result<(f64, Parameters)> {
    let targets = targets(packed, config, vocab)?;
    let (mut logits, cache) = forward_packed(params, &packed.view(), drop);
    let n = targets.len() as f64;
    let mut dlogits = Array2::zeros(logits.raw_dim());
    let mut total = 0.0;
    for ((mut row, mut grad), target) in logits
        .rows_mut()
        .into_iter()
        .zip(dlogits.rows_mut())
        .zip(&targets)
    {
        let lp = row.as_slice_mut().expect("contiguous");
        log_softmax_in_place(lp);
        total += target.loss(lp, vocab);
        target.logit_grad(lp, vocab, 1.0 / n, grad.as_slice_mut().expect("contiguous"));
    }
    let loss = total / n;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { batch: batch_index });
    }
    let grads = backward_packed(params, &packed.view(), &cache, &dlogits);
    Ok((loss, grads))
}

/// Mean label-smoothed loss over the batch's unmasked positions and its
/// gradient with respect to every parameter (no dropout).
pub fn loss_and_gradients(
    params: &Parameters,
    batch: &Batch,
    config: &ModelConfig,
    vocab: &Vocab,
) -> Result<(f64, Parameters)> {
    let packed = PackedBatch::new(batch, params, vocab)?;
    loss_and_gradients_inner(params, &packed, config, vocab, None, 0)
}

/// Forward-only version of [`loss_and_gradients`].
pub fn batch_loss(params: &Parameters, batch: &Batch, config: &ModelConfig, vocab: &Vocab) -> Result<f64> {
    let packed = PackedBatch::new(batch, params, vocab)?;
    let targets = targets(&packed, config, vocab)?;
    let (mut logits, _) = forward_packed(params, &packed.view(), None);
    let mut total = 0.0;
    for (mut row, target) in logits.rows_mut().into_iter().zip(&targets) {
        let lp = row.as_slice_mut().expect("contiguous");
        log_softmax_in_place(lp);
        total += target.loss(lp, vocab);
    }
    Ok(total / targets.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_tensor: String,
    pub worst_index: usize,
    /// Analytic and numeric values at the worst coordinate.
    pub worst_pair: (f64, f64),
    pub coordinates: usize,
    /// Coordinates whose gradient is below [`GRAD_CHECK_FLOOR`].
    pub below_floor: usize,
}

/// Minimum number of coordinates compared.
const GRAD_CHECK_COORDS: usize = 200;

/// Central differences at h = 1e-5 carry roundoff of about
/// `f64::EPSILON * |L| / h`, roughly 1e-10 here. Gradients smaller than this
/// floor cannot be resolved in relative terms, so they are compared in
/// absolute terms instead (and some, like attention key biases, are exactly
/// zero).
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares `analytic` to central differences `(L(θ+h) - L(θ-h)) / 2h` on a
/// random sample of coordinates that covers every tensor. The relative error
/// uses `max(|analytic|, |numeric|, GRAD_CHECK_FLOOR)` as denominator.
pub fn compare_gradients(
    params: &Parameters,
    batch: &Batch,
    config: &ModelConfig,
    vocab: &Vocab,
    analytic: &Parameters,
    h: f64,
) -> Result<GradCheckReport> {
    let infos = params.tensor_infos();
    let per_tensor = GRAD_CHECK_COORDS.div_ceil(infos.len()).max(2);
    let mut rng = substream(config.seed, Stream::GradCheck);
    let analytic_flat = analytic.flatten();

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_tensor: String::new(),
        worst_index: 0,
        worst_pair: (0.0, 0.0),
        coordinates: 0,
        below_floor: 0,
    };
    let mut probe = params.clone();
    let mut offset = 0;
    for info in &infos {
        let numel = info.numel();
        let picks = index::sample(&mut rng, numel, per_tensor.min(numel));
        for i in picks.iter() {
            let original = probe_value(&mut probe, &info.name, i, None);
            probe_value(&mut probe, &info.name, i, Some(original + h));
            let plus = batch_loss(&probe, batch, config, vocab)?;
            probe_value(&mut probe, &info.name, i, Some(original - h));
            let minus = batch_loss(&probe, batch, config, vocab)?;
            probe_value(&mut probe, &info.name, i, Some(original));

            let numeric = (plus - minus) / (2.0 * h);
            let exact = analytic_flat[offset + i];
            let scale = exact.abs().max(numeric.abs());
            if scale < GRAD_CHECK_FLOOR {
                report.below_floor += 1;
            }
            let denom = scale.max(GRAD_CHECK_FLOOR);
            let err = (exact - numeric).abs() / denom;
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst_tensor = info.name.clone();
                report.worst_index = i;
                report.worst_pair = (exact, numeric);
            }
            report.coordinates += 1;
        }
        offset += numel;
    }
    Ok(report)
}

/// Reads element `i` of tensor `name`, optionally overwriting it.
fn probe_value(params: &mut Parameters, name: &str, i: usize, set: Option<f64>) -> f64 {
    let mut old = f64::NAN;
    params.tensor_mut(name, |data| {
        old = data[i];
        if let Some(v) = set {
            data[i] = v;
        }
    });
    old
}

/// Maximum relative error between backprop and central differences.
pub fn gradient_check(
    params: &Parameters,
    batch: &Batch,
    config: &ModelConfig,
    vocab: &Vocab,
    h: f64,
) -> Result<f64> {
    let (_, grads) = loss_and_gradients(params, batch, config, vocab)?;
    Ok(compare_gradients(params, batch, config, vocab, &grads, h)?.max_relative_error)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSpec {
    pub steps: usize,
    pub batch_size: usize,
    pub shuffle_seed: u64,
    pub optimizer: OptimizerSpec,
    /// Log the running loss every this many steps; 0 disables logging.
    pub log_every: usize,
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec {
            steps: 3000,
            batch_size: 32,
            shuffle_seed: 1,
            optimizer: OptimizerSpec::default(),
            log_every: 500,
        }
    }
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: Parameters,
    pub adam: Adam,
}

impl TrainState {
    pub fn fresh(config: &ModelConfig, vocab: &Vocab, optimizer: OptimizerSpec) -> Result<Self> {
        config.validate()?;
        let params = Parameters::init(config.architecture(vocab.size()), config.seed)?;
        let adam = Adam::new(optimizer, params.num_params());
        Ok(TrainState { params, adam })
    }

    pub fn steps_done(&self) -> usize {
        self.adam.steps
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// `(global step, batch loss)` for every update performed.
    pub loss_curve: Vec<(usize, f64)>,
}

impl TrainOutcome {
    pub fn params(&self) -> &Parameters {
        &self.state.params
    }

    pub fn write_loss_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "step,loss")?;
        for (step, loss) in &self.loss_curve {
            writeln!(out, "{step},{loss}")?;
        }
        Ok(())
    }
}

pub fn train(
    config: &ModelConfig,
    corpus: &Corpus,
    vocab: &Vocab,
    spec: &TrainSpec,
) -> Result<TrainOutcome> {
    let state = TrainState::fresh(config, vocab, spec.optimizer.clone())?;
    train_from(state, config, corpus, vocab, spec)
}

/// Runs `spec.steps` more updates. Batch order depends only on the global
/// step, so a resumed run replays exactly what an uninterrupted one would.
pub fn train_from(
    mut state: TrainState,
    config: &ModelConfig,
    corpus: &Corpus,
    vocab: &Vocab,
    spec: &TrainSpec,
) -> Result<TrainOutcome> {
    config.validate()?;
    if spec.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    if corpus.pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let n = corpus.pairs.len();
    let per_epoch = n.div_ceil(spec.batch_size);
    let mut order: Option<(usize, Vec<usize>)> = None;
    let mut curve = Vec::with_capacity(spec.steps);
    let mut running = 0.0;

    for _ in 0..spec.steps {
        let step = state.adam.steps;
        let (epoch, pos) = (step / per_epoch, step % per_epoch);
        if order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            order = Some((epoch, epoch_order(n, spec.shuffle_seed, epoch as u64)));
        }
        let idx = &order.as_ref().expect("set above").1;
        let chunk = &idx[pos * spec.batch_size..((pos + 1) * spec.batch_size).min(n)];
        let pairs: Vec<&SentencePair> = chunk.iter().map(|&i| &corpus.pairs[i]).collect();
        let batch = Batch::from_pairs(&pairs, vocab)?;
        let packed = PackedBatch::new(&batch, &state.params, vocab)?;

        let mut rng = indexed_substream(config.seed, Stream::Dropout, step as u64);
        let drop = (config.dropout > 0.0).then(|| DropoutCtx {
            rate: config.dropout,
            rng: &mut rng,
        });
        let (loss, grads) = loss_and_gradients_inner(&state.params, &packed, config, vocab, drop, step)
            .map_err(|e| match e {
                Error::NonFiniteLoss { .. } => Error::Diverged { step },
                e => e,
            })?;
        if !grads.all_finite() {
            return Err(Error::Diverged { step });
        }
        state.adam.update(&mut state.params, &grads);
        curve.push((step, loss));

        running += loss;
        if spec.log_every > 0 && (step + 1) % spec.log_every == 0 {
            info!("step {} loss {:.4}", step + 1, running / spec.log_every as f64);
            running = 0.0;
        }
    }
    debug!("trained {} steps", spec.steps);
    Ok(TrainOutcome {
        state,
        loss_curve: curve,
    })
}

/// Fraction of gold tokens (content and terminator) that are the argmax of
/// the teacher-forced distribution, ties going to the lower id.
pub fn teacher_forced_accuracy(params: &Parameters, corpus: &Corpus, vocab: &Vocab) -> Result<f64> {
    if corpus.pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let (mut correct, mut total) = (0usize, 0usize);
    for chunk in corpus.pairs.chunks(64) {
        let refs: Vec<&SentencePair> = chunk.iter().collect();
        let batch = Batch::from_pairs(&refs, vocab)?;
        let packed = PackedBatch::new(&batch, params, vocab)?;
        let (logits, _) = forward_packed(params, &packed.view(), None);
        for (row, &gold) in logits.rows().into_iter().zip(&packed.gold) {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc })
                .0;
            correct += usize::from(best == gold as usize);
            total += 1;
        }
    }
    Ok(correct as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, GenSpec};
    use crate::encoding::{build_vocab, EosMode};
    use crate::model::EosSmoothingPolicy;

    fn small_setup(mode: EosMode) -> (Corpus, Vocab, ModelConfig) {
        let corpus = generate_corpus(&GenSpec {
            source_alphabet: 6,
            target_alphabet: 6,
            m_min: 2,
            m_max: 5,
            pair_count: 8,
            ..GenSpec::default()
        })
        .unwrap();
        let vocab = build_vocab(&corpus, mode).unwrap();
        let config = ModelConfig {
            d_model: 8,
            n_heads: 2,
            d_ffn: 16,
            max_len: 16,
            ..ModelConfig::default()
        };
        (corpus, vocab, config)
    }

    fn batch_of(corpus: &Corpus, vocab: &Vocab, n: usize) -> Batch {
        let refs: Vec<&SentencePair> = corpus.pairs.iter().take(n).collect();
        Batch::from_pairs(&refs, vocab).unwrap()
    }

    #[test]
    fn empty_loss_mask_is_rejected() {
        let (corpus, vocab, config) = small_setup(EosMode::Single);
        let params = Parameters::init(config.architecture(vocab.size()), 1).unwrap();
        let mut batch = batch_of(&corpus, &vocab, 2);
        batch.loss_mask.fill(false);
        assert!(matches!(
            loss_and_gradients(&params, &batch, &config, &vocab),
            Err(Error::EmptyLossMask)
        ));
    }

    #[test]
    fn duplicating_pairs_keeps_mean_loss() {
        let (corpus, vocab, config) = small_setup(EosMode::Single);
        let params = Parameters::init(config.architecture(vocab.size()), 1).unwrap();
        let once: Vec<&SentencePair> = corpus.pairs.iter().take(3).collect();
        let twice: Vec<&SentencePair> = once.iter().chain(once.iter()).copied().collect();
        let a = batch_loss(&params, &Batch::from_pairs(&once, &vocab).unwrap(), &config, &vocab)
            .unwrap();
        let b = batch_loss(&params, &Batch::from_pairs(&twice, &vocab).unwrap(), &config, &vocab)
            .unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_between_paths() {
        let (corpus, vocab, config) = small_setup(EosMode::Multi { l_max: 10 });
        let params = Parameters::init(config.architecture(vocab.size()), 2).unwrap();
        let batch = batch_of(&corpus, &vocab, 4);
        let (l1, _) = loss_and_gradients(&params, &batch, &config, &vocab).unwrap();
        let l2 = batch_loss(&params, &batch, &config, &vocab).unwrap();
        assert_eq!(l1, l2);
    }

    #[test]
    fn gradient_check_small_model() {
        for mode in [EosMode::Single, EosMode::Multi { l_max: 10 }] {
            let (corpus, vocab, base) = small_setup(mode);
            for eps in [0.0, 0.1] {
                for policy in [EosSmoothingPolicy::Standard, EosSmoothingPolicy::ExcludeEosGold] {
                    let config = ModelConfig {
                        label_smoothing: eps,
                        eos_policy: policy,
                        ..base.clone()
                    };
                    let params = Parameters::init(config.architecture(vocab.size()), 4).unwrap();
                    let batch = batch_of(&corpus, &vocab, 2);
                    let err = gradient_check(&params, &batch, &config, &vocab, 1e-5).unwrap();
                    assert!(err < 1e-4, "{mode:?} eps={eps} {policy:?}: {err}");
                }
            }
        }
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let (corpus, vocab, config) = small_setup(EosMode::Single);
        let params = Parameters::init(config.architecture(vocab.size()), 4).unwrap();
        let batch = batch_of(&corpus, &vocab, 2);
        let (_, mut grads) = loss_and_gradients(&params, &batch, &config, &vocab).unwrap();
        grads.decoder[0].ffn.up.weight.mapv_inplace(|g| g * 2.0);
        let report = compare_gradients(&params, &batch, &config, &vocab, &grads, 1e-5).unwrap();
        assert!(report.max_relative_error > 0.4, "{report:?}");
        assert_eq!(report.worst_tensor, "decoder.0.ffn.up.weight");
        assert!(report.coordinates >= 200);
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let (corpus, vocab, config) = small_setup(EosMode::Single);
        let spec = TrainSpec {
            steps: 0,
            ..TrainSpec::default()
        };
        let out = train(&config, &corpus, &vocab, &spec).unwrap();
        let init = Parameters::init(config.architecture(vocab.size()), config.seed).unwrap();
        assert_eq!(out.state.params, init);
        assert!(out.loss_curve.is_empty());
    }

    #[test]
    fn resumed_training_matches_uninterrupted() {
        let (corpus, vocab, config) = small_setup(EosMode::Single);
        let spec = |steps| TrainSpec {
            steps,
            batch_size: 3,
            log_every: 0,
            ..TrainSpec::default()
        };
        let full = train(&config, &corpus, &vocab, &spec(7)).unwrap();
        let first = train(&config, &corpus, &vocab, &spec(4)).unwrap();
        let rest = train_from(first.state, &config, &corpus, &vocab, &spec(3)).unwrap();
        assert_eq!(full.state, rest.state);
        assert_eq!(&full.loss_curve[4..], &rest.loss_curve[..]);
    }

    #[test]
    fn training_reduces_loss_with_dropout() {
        let (corpus, vocab, config) = small_setup(EosMode::Single);
        let config = ModelConfig {
            dropout: 0.1,
            ..config
        };
        let spec = TrainSpec {
            steps: 60,
            batch_size: 8,
            log_every: 0,
            optimizer: OptimizerSpec {
                learning_rate: 3e-3,
                warmup_steps: 5,
                ..OptimizerSpec::default()
            },
            ..TrainSpec::default()
        };
        let a = train(&config, &corpus, &vocab, &spec).unwrap();
        let b = train(&config, &corpus, &vocab, &spec).unwrap();
        assert_eq!(a.state, b.state);
        let first = a.loss_curve[0].1;
        let last = a.loss_curve.last().unwrap().1;
        assert!(last < first, "{first} -> {last}");
    }
}
