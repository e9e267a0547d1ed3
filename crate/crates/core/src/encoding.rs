//! Vocabularies for the single-EoS and per-length EoS regimes, target
//! encoding and padded batches.
//!
//! Id layout: `[PAD]=0`, `[BOS]=1`, content tokens `t0..t{C-1}` at
//! `2..2+C`, then the EoS family. In single mode the family is one `[EOS]`;
//! in multi mode it is `[EOS-0]..[EOS-Lmax]`, where `[EOS-l]` terminates a
//! target of content length `l`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, SentencePair};
use crate::error::{Error, Result};
use crate::rng::{indexed_substream, Stream};
use crate::TokenId;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const FIRST_CONTENT_ID: TokenId = 2;

pub const DEFAULT_L_MAX: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EosMode {
    Single,
    Multi { l_max: usize },
}

impl fmt::Display for EosMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EosMode::Single => f.write_str("single"),
            EosMode::Multi { .. } => f.write_str("multi"),
        }
    }
}

impl FromStr for EosMode {
    type Err = Error;

    /// Accepts `single`, `multi` (default `l_max`) and `multi:<l_max>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(EosMode::Single),
            "multi" => Ok(EosMode::Multi {
                l_max: DEFAULT_L_MAX,
            }),
            _ => s
                .strip_prefix("multi:")
                .and_then(|v| v.parse().ok())
                .map(|l_max| EosMode::Multi { l_max })
                .ok_or_else(|| Error::InvalidArgument(format!("unknown eos mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    content_size: usize,
    eos_mode: EosMode,
}

impl Vocab {
    pub fn new(content_size: usize, eos_mode: EosMode) -> Self {
        Vocab {
            content_size,
            eos_mode,
        }
    }

    pub fn eos_mode(&self) -> EosMode {
        self.eos_mode
    }

    pub fn content_size(&self) -> usize {
        self.content_size
    }

    pub fn eos_family_start(&self) -> TokenId {
        FIRST_CONTENT_ID + self.content_size as TokenId
    }

    pub fn eos_family_len(&self) -> usize {
        match self.eos_mode {
            EosMode::Single => 1,
            EosMode::Multi { l_max } => l_max + 1,
        }
    }

    pub fn size(&self) -> usize {
        self.eos_family_start() as usize + self.eos_family_len()
    }

    pub fn l_max(&self) -> Option<usize> {
        match self.eos_mode {
            EosMode::Single => None,
            EosMode::Multi { l_max } => Some(l_max),
        }
    }

    pub fn is_eos(&self, id: TokenId) -> bool {
        id >= self.eos_family_start() && (id as usize) < self.size()
    }

    pub fn is_content(&self, id: TokenId) -> bool {
        id >= FIRST_CONTENT_ID && id < self.eos_family_start()
    }

    pub fn content_ids(&self) -> std::ops::Range<TokenId> {
        FIRST_CONTENT_ID..self.eos_family_start()
    }

    pub fn eos_ids(&self) -> std::ops::Range<TokenId> {
        self.eos_family_start()..self.size() as TokenId
    }

    /// The terminator that ends a target of content length `l`; `None` when
    /// `l` exceeds `l_max` in multi mode.
    pub fn eos_for_length(&self, l: usize) -> Option<TokenId> {
        match self.eos_mode {
            EosMode::Single => Some(self.eos_family_start()),
            EosMode::Multi { l_max } => {
                (l <= l_max).then(|| self.eos_family_start() + l as TokenId)
            }
        }
    }

    /// Inverse of [`Vocab::eos_for_length`] in multi mode.
    pub fn eos_length(&self, id: TokenId) -> Option<usize> {
        match self.eos_mode {
            EosMode::Multi { .. } if self.is_eos(id) => {
                Some((id - self.eos_family_start()) as usize)
            }
            _ => None,
        }
    }

    /// The terminator whose first-position probability is the empty output's.
    pub fn empty_terminator(&self) -> TokenId {
        self.eos_family_start()
    }

    pub fn check_id(&self, id: TokenId) -> Result<()> {
        if (id as usize) < self.size() {
            Ok(())
        } else {
            Err(Error::TokenOutOfRange {
                id,
                size: self.size(),
            })
        }
    }

    pub fn token_string(&self, id: TokenId) -> String {
        match id {
            PAD => "[PAD]".into(),
            BOS => "[BOS]".into(),
            id if self.is_content(id) => format!("t{}", id - FIRST_CONTENT_ID),
            id => match self.eos_mode {
                EosMode::Single => "[EOS]".into(),
                EosMode::Multi { .. } => {
                    format!("[EOS-{}]", id - self.eos_family_start())
                }
            },
        }
    }

    /// JSON export: token string to id, plus `eos_mode` and `l_max`.
    pub fn to_json(&self) -> serde_json::Value {
        let tokens: BTreeMap<String, TokenId> = (0..self.size() as TokenId)
            .map(|id| (self.token_string(id), id))
            .collect();
        serde_json::json!({
            "eos_mode": self.eos_mode.to_string(),
            "l_max": self.l_max(),
            "tokens": tokens,
        })
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Vocab> {
        let bad = |m: &str| Error::InvalidArgument(format!("vocab json: {m}"));
        let tokens = value
            .get("tokens")
            .and_then(|t| t.as_object())
            .ok_or_else(|| bad("missing tokens"))?;
        let content_size = tokens.keys().filter(|k| k.starts_with('t')).count();
        let eos_mode = match value.get("eos_mode").and_then(|m| m.as_str()) {
            Some("single") => EosMode::Single,
            Some("multi") => EosMode::Multi {
                l_max: value
                    .get("l_max")
                    .and_then(|v| v.as_u64())
                    .ok_or_else(|| bad("multi mode needs l_max"))? as usize,
            },
            _ => return Err(bad("eos_mode must be single or multi")),
        };
        let vocab = Vocab::new(content_size, eos_mode);
        for (name, id) in tokens {
            let id = id.as_u64().ok_or_else(|| bad("ids must be integers"))? as TokenId;
            if vocab.token_string(id) != *name {
                return Err(bad(&format!("token {name} has unexpected id {id}")));
            }
        }
        Ok(vocab)
    }
}

pub fn build_vocab(corpus: &Corpus, eos_mode: EosMode) -> Result<Vocab> {
    if corpus.pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if let EosMode::Multi { l_max } = eos_mode {
        let longest = corpus.max_target_len();
        if longest > l_max {
            return Err(Error::TargetTooLong {
                length: longest,
                l_max,
            });
        }
    }
    Ok(Vocab::new(corpus.alphabet_size, eos_mode))
}

/// Appends the terminator for the target's length.
pub fn encode_target(target: &[TokenId], vocab: &Vocab) -> Result<Vec<TokenId>> {
    if target.is_empty() {
        return Err(Error::InvalidArgument("target must be non-empty".into()));
    }
    let eos = vocab
        .eos_for_length(target.len())
        .ok_or(Error::TargetTooLong {
            length: target.len(),
            l_max: vocab.l_max().unwrap_or(0),
        })?;
    for &id in target {
        vocab.check_id(id)?;
    }
    let mut out = Vec::with_capacity(target.len() + 1);
    out.extend_from_slice(target);
    out.push(eos);
    Ok(out)
}

/// Padded teacher-forcing batch. Row `i` of `target_input` is
/// `[BOS] y_1 .. y_l`, row `i` of `target_gold` is `y_1 .. y_l EOS`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub source: Array2<TokenId>,
    pub source_mask: Array2<bool>,
    pub target_input: Array2<TokenId>,
    pub target_gold: Array2<TokenId>,
    pub loss_mask: Array2<bool>,
}

impl Batch {
    pub fn from_pairs(pairs: &[&SentencePair], vocab: &Vocab) -> Result<Batch> {
        if pairs.is_empty() {
            return Err(Error::InvalidArgument("batch needs at least one pair".into()));
        }
        let src_w = pairs.iter().map(|p| p.source.len()).max().unwrap_or(0);
        let tgt_w = pairs.iter().map(|p| p.target.len() + 1).max().unwrap_or(0);
        let n = pairs.len();
        let mut batch = Batch {
            source: Array2::from_elem((n, src_w), PAD),
            source_mask: Array2::from_elem((n, src_w), false),
            target_input: Array2::from_elem((n, tgt_w), PAD),
            target_gold: Array2::from_elem((n, tgt_w), PAD),
            loss_mask: Array2::from_elem((n, tgt_w), false),
        };
        for (i, pair) in pairs.iter().enumerate() {
            if pair.source.is_empty() {
                return Err(Error::InvalidArgument("source must be non-empty".into()));
            }
            for (j, &id) in pair.source.iter().enumerate() {
                vocab.check_id(id)?;
                batch.source[[i, j]] = id;
                batch.source_mask[[i, j]] = true;
            }
            let gold = encode_target(&pair.target, vocab)?;
            for (j, &id) in gold.iter().enumerate() {
                batch.target_input[[i, j]] = if j == 0 { BOS } else { gold[j - 1] };
                batch.target_gold[[i, j]] = id;
                batch.loss_mask[[i, j]] = true;
            }
        }
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.source.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn loss_positions(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }

    /// Unpadded source ids of row `i`.
    pub fn source_row(&self, i: usize) -> Vec<TokenId> {
        masked_row(&self.source, &self.source_mask, i)
    }

    pub fn target_input_row(&self, i: usize) -> Vec<TokenId> {
        masked_row(&self.target_input, &self.loss_mask, i)
    }

    pub fn target_gold_row(&self, i: usize) -> Vec<TokenId> {
        masked_row(&self.target_gold, &self.loss_mask, i)
    }
}

fn masked_row(ids: &Array2<TokenId>, mask: &Array2<bool>, i: usize) -> Vec<TokenId> {
    ids.row(i)
        .iter()
        .zip(mask.row(i))
        .filter(|(_, &m)| m)
        .map(|(&id, _)| id)
        .collect()
}

/// Number of batches one epoch over `corpus` yields.
pub fn batches_per_epoch(corpus: &Corpus, batch_size: usize) -> usize {
    corpus.pairs.len().div_ceil(batch_size)
}

/// Pair order for `epoch`, derived from the shuffle seed alone.
pub fn epoch_order(pair_count: usize, shuffle_seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..pair_count).collect();
    order.shuffle(&mut indexed_substream(shuffle_seed, Stream::Shuffle, epoch));
    order
}

/// One epoch of batches in seed-determined order; every pair appears once.
pub fn make_batches(
    corpus: &Corpus,
    vocab: &Vocab,
    batch_size: usize,
    shuffle_seed: u64,
) -> Result<Vec<Batch>> {
    make_epoch_batches(corpus, vocab, batch_size, shuffle_seed, 0)
}

pub fn make_epoch_batches(
    corpus: &Corpus,
    vocab: &Vocab,
    batch_size: usize,
    shuffle_seed: u64,
    epoch: u64,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    if corpus.pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let order = epoch_order(corpus.pairs.len(), shuffle_seed, epoch);
    order
        .chunks(batch_size)
        .map(|chunk| {
            let pairs: Vec<&SentencePair> = chunk.iter().map(|&i| &corpus.pairs[i]).collect();
            Batch::from_pairs(&pairs, vocab)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, GenSpec, Split};

    fn tiny_corpus(targets: &[Vec<TokenId>]) -> Corpus {
        Corpus {
            pairs: targets
                .iter()
                .map(|t| SentencePair {
                    source: vec![2, 3],
                    target: t.clone(),
                })
                .collect(),
            split: Split::Train,
            seed: 0,
            alphabet_size: 64,
            spec: "manual".into(),
        }
    }

    #[test]
    fn vocab_sizes() {
        let corpus = tiny_corpus(&[vec![7, 9]]);
        let single = build_vocab(&corpus, EosMode::Single).unwrap();
        assert_eq!(single.size(), 64 + 2 + 1);
        let multi = build_vocab(&corpus, EosMode::Multi { l_max: 32 }).unwrap();
        assert_eq!(multi.eos_ids().len(), 33);
        assert_eq!(multi.token_string(multi.eos_family_start()), "[EOS-0]");
        assert_eq!(multi.token_string(multi.size() as TokenId - 1), "[EOS-32]");
        assert_eq!(single.token_string(single.eos_family_start()), "[EOS]");
        assert_eq!(single.token_string(2), "t0");
    }

    #[test]
    fn multi_vocab_rejects_long_targets() {
        let corpus = tiny_corpus(&[vec![5; 4]]);
        assert!(matches!(
            build_vocab(&corpus, EosMode::Multi { l_max: 3 }),
            Err(Error::TargetTooLong { length: 4, l_max: 3 })
        ));
    }

    #[test]
    fn eos_lookup_is_consistent() {
        let v = Vocab::new(8, EosMode::Multi { l_max: 5 });
        for l in 0..=5 {
            let id = v.eos_for_length(l).unwrap();
            assert!(v.is_eos(id));
            assert_eq!(v.eos_length(id), Some(l));
        }
        assert_eq!(v.eos_for_length(6), None);
        assert!(!v.is_eos(v.size() as TokenId));
        assert!(!v.is_eos(FIRST_CONTENT_ID + 7));
        assert!(v.is_content(FIRST_CONTENT_ID + 7));
    }

    #[test]
    fn encode_target_examples() {
        let single = Vocab::new(64, EosMode::Single);
        let eos = single.eos_family_start();
        assert_eq!(encode_target(&[7, 9], &single).unwrap(), vec![7, 9, eos]);

        let multi = Vocab::new(64, EosMode::Multi { l_max: 32 });
        let eos2 = multi.eos_for_length(2).unwrap();
        assert_eq!(encode_target(&[7, 9], &multi).unwrap(), vec![7, 9, eos2]);
        assert_eq!(
            encode_target(&[5], &multi).unwrap(),
            vec![5, multi.eos_for_length(1).unwrap()]
        );
        let small = Vocab::new(64, EosMode::Multi { l_max: 1 });
        assert!(matches!(
            encode_target(&[5, 5], &small),
            Err(Error::TargetTooLong { .. })
        ));
    }

    #[test]
    fn vocab_json_round_trip() {
        for mode in [EosMode::Single, EosMode::Multi { l_max: 6 }] {
            let v = Vocab::new(10, mode);
            let json = v.to_json();
            assert_eq!(json["tokens"]["[PAD]"], 0);
            assert_eq!(json["tokens"]["[BOS]"], 1);
            assert_eq!(Vocab::from_json(&json).unwrap(), v);
        }
    }

    #[test]
    fn batch_sizes_and_determinism() {
        let spec = GenSpec {
            pair_count: 10,
            ..GenSpec::default()
        };
        let corpus = generate_corpus(&spec).unwrap();
        let vocab = build_vocab(&corpus, EosMode::Single).unwrap();
        let batches = make_batches(&corpus, &vocab, 4, 9).unwrap();
        let sizes: Vec<usize> = batches.iter().map(Batch::len).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        assert_eq!(batches, make_batches(&corpus, &vocab, 4, 9).unwrap());

        let mut seen: Vec<Vec<TokenId>> = batches
            .iter()
            .flat_map(|b| (0..b.len()).map(move |i| b.source_row(i)))
            .collect();
        let mut expected: Vec<Vec<TokenId>> =
            corpus.pairs.iter().map(|p| p.source.clone()).collect();
        seen.sort();
        expected.sort();
        assert_eq!(seen, expected);
    }

    #[test]
    fn loss_mask_counts_content_plus_terminator() {
        // lengths 2, 1, 3 -> (2+1) + (1+1) + (3+1) = 9
        let corpus = tiny_corpus(&[vec![4, 5], vec![6], vec![7, 8, 9]]);
        let vocab = build_vocab(&corpus, EosMode::Multi { l_max: 8 }).unwrap();
        let refs: Vec<&SentencePair> = corpus.pairs.iter().collect();
        let batch = Batch::from_pairs(&refs, &vocab).unwrap();
        assert_eq!(batch.loss_positions(), 9);
        assert_eq!(batch.target_input.ncols(), 4);
        assert_eq!(batch.target_input_row(1), vec![BOS, 6]);
        assert_eq!(
            batch.target_gold_row(2),
            vec![7, 8, 9, vocab.eos_for_length(3).unwrap()]
        );
        assert_eq!(batch.target_gold[[1, 2]], PAD);
        assert!(!batch.loss_mask[[1, 2]]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn terminator_strips_back_and_matches_length(
                target in proptest::collection::vec(2u32..66, 1..20),
                multi in any::<bool>(),
            ) {
                let mode = if multi { EosMode::Multi { l_max: 20 } } else { EosMode::Single };
                let vocab = Vocab::new(64, mode);
                let enc = encode_target(&target, &vocab).unwrap();
                prop_assert_eq!(&enc[..target.len()], &target[..]);
                prop_assert_eq!(enc[target.len()], vocab.eos_for_length(target.len()).unwrap());
            }

            #[test]
            fn gold_never_contains_eos0(seed in 0u64..500) {
                let corpus = generate_corpus(&GenSpec { seed, pair_count: 40, ..GenSpec::default() }).unwrap();
                let vocab = build_vocab(&corpus, EosMode::Multi { l_max: 32 }).unwrap();
                let eos0 = vocab.eos_for_length(0).unwrap();
                for batch in make_batches(&corpus, &vocab, 8, seed).unwrap() {
                    for i in 0..batch.len() {
                        let gold = batch.target_gold_row(i);
                        let l = gold.len() - 1;
                        prop_assert!(!gold.contains(&eos0));
                        prop_assert_eq!(gold[l], vocab.eos_for_length(l).unwrap());
                        prop_assert!(gold[..l].iter().all(|&t| !vocab.is_eos(t)));
                    }
                }
            }
        }
    }
}
