//! Synthetic parallel corpora and the target-length model Q(l|m).
//!
//! The task is a permuted copy: every source token is mapped through a fixed
//! bijection of the alphabet, then the target is stretched or shrunk by a
//! random length offset drawn from a discrete Laplace on `[-D, D]`. The noise
//! scale `sigma` is the single knob controlling how uncertain the target
//! length is given the source length.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::FIRST_CONTENT_ID;
use crate::error::{Error, Result};
use crate::rng::{substream, Stream};
use crate::TokenId;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SentencePair {
    pub source: Vec<TokenId>,
    /// Content tokens only; the terminator is added by the encoder.
    pub target: Vec<TokenId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub pairs: Vec<SentencePair>,
    pub split: Split,
    pub seed: u64,
    /// Number of content symbols; token ids span
    /// `FIRST_CONTENT_ID..FIRST_CONTENT_ID + alphabet_size`.
    pub alphabet_size: usize,
    /// Canonical description of how the corpus was produced.
    pub spec: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSpec {
    pub source_alphabet: usize,
    pub target_alphabet: usize,
    pub m_min: usize,
    pub m_max: usize,
    /// Scale of the discrete Laplace length offset; 0 disables length noise.
    pub sigma: f64,
    pub max_delta: usize,
    pub pair_count: usize,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            source_alphabet: 64,
            target_alphabet: 64,
            m_min: 4,
            m_max: 24,
            sigma: 2.0,
            max_delta: 4,
            pair_count: 20_000,
            seed: 1,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        if self.source_alphabet != self.target_alphabet {
            return Err(Error::InvalidSpec(format!(
                "source alphabet ({}) and target alphabet ({}) must have equal size",
                self.source_alphabet, self.target_alphabet
            )));
        }
        if self.source_alphabet == 0 {
            return Err(Error::InvalidSpec("alphabet must be non-empty".into()));
        }
        if self.m_min < 1 {
            return Err(Error::InvalidSpec("m_min must be at least 1".into()));
        }
        if self.m_min > self.m_max {
            return Err(Error::InvalidSpec(format!(
                "m_min ({}) exceeds m_max ({})",
                self.m_min, self.m_max
            )));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "sigma must be finite and nonnegative, got {}",
                self.sigma
            )));
        }
        if self.pair_count < 1 {
            return Err(Error::InvalidSpec("pair_count must be at least 1".into()));
        }
        Ok(())
    }

    /// Canonical string used in corpus headers; excludes the seed.
    pub fn canonical(&self) -> String {
        format!(
            "src={};tgt={};m={}..{};sigma={};max_delta={};pairs={}",
            self.source_alphabet,
            self.target_alphabet,
            self.m_min,
            self.m_max,
            self.sigma,
            self.max_delta,
            self.pair_count
        )
    }

    /// Longest target these settings can produce.
    pub fn max_target_len(&self) -> usize {
        self.m_max + if self.sigma > 0.0 { self.max_delta } else { 0 }
    }

    /// The seed-determined token bijection, as a table over symbol indices.
    pub fn permutation(&self) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..self.source_alphabet).collect();
        perm.shuffle(&mut substream(self.seed, Stream::Permutation));
        perm
    }
}

/// Generates the training corpus described by `spec`.
pub fn generate_corpus(spec: &GenSpec) -> Result<Corpus> {
    generate_split(spec, Split::Train, spec.pair_count)
}

/// Generates held-out pairs under the same bijection as [`generate_corpus`]
/// but from an independent sample stream.
pub fn generate_test_corpus(spec: &GenSpec, count: usize) -> Result<Corpus> {
    if count == 0 {
        return Err(Error::InvalidSpec("test corpus needs at least one pair".into()));
    }
    generate_split(spec, Split::Test, count)
}

fn generate_split(spec: &GenSpec, split: Split, count: usize) -> Result<Corpus> {
    spec.validate()?;
    let perm = spec.permutation();
    let mut rng = substream(
        spec.seed,
        match split {
            Split::Train => Stream::TrainPairs,
            Split::Test => Stream::TestPairs,
        },
    );
    let offsets = OffsetSampler::new(spec.sigma, spec.max_delta);
    let alphabet = spec.source_alphabet;

    let pairs = (0..count)
        .map(|_| {
            let m = rng.gen_range(spec.m_min..=spec.m_max);
            let symbols: Vec<usize> = (0..m).map(|_| rng.gen_range(0..alphabet)).collect();
            let delta = offsets.sample(&mut rng);
            let l = (m as i64 + delta).max(1) as usize;
            let mapped: Vec<usize> = symbols.iter().map(|&s| perm[s]).collect();
            let target = adjust_length(mapped, l, &mut rng);
            SentencePair {
                source: symbols.iter().map(|&s| to_id(s)).collect(),
                target: target.into_iter().map(to_id).collect(),
            }
        })
        .collect();

    Ok(Corpus {
        pairs,
        split,
        seed: spec.seed,
        alphabet_size: alphabet,
        spec: spec.canonical(),
    })
}

fn to_id(symbol: usize) -> TokenId {
    FIRST_CONTENT_ID + symbol as TokenId
}

/// P(delta = d) proportional to exp(-|d| / sigma) on [-max_delta, max_delta].
struct OffsetSampler {
    weights: Option<WeightedIndex<f64>>,
    max_delta: i64,
}

impl OffsetSampler {
    fn new(sigma: f64, max_delta: usize) -> Self {
        let max_delta = max_delta as i64;
        let weights = (sigma > 0.0 && max_delta > 0).then(|| {
            let w = (-max_delta..=max_delta).map(|d| (-(d.abs() as f64) / sigma).exp());
            WeightedIndex::new(w).expect("weights are positive")
        });
        OffsetSampler { weights, max_delta }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> i64 {
        match &self.weights {
            Some(w) => w.sample(rng) as i64 - self.max_delta,
            None => 0,
        }
    }
}

/// Deletes uniformly chosen positions, or duplicates uniformly chosen tokens
/// in place, until the sequence has length `l`.
fn adjust_length<R: Rng>(mut seq: Vec<usize>, l: usize, rng: &mut R) -> Vec<usize> {
    let m = seq.len();
    if l < m {
        let mut drop = index::sample(rng, m, m - l).into_vec();
        drop.sort_unstable();
        for &i in drop.iter().rev() {
            seq.remove(i);
        }
    } else {
        for _ in m..l {
            let i = rng.gen_range(0..seq.len());
            seq.insert(i, seq[i]);
        }
    }
    seq
}

/// Empirical Q(l|m) from (source length, target length) counts.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LengthModel {
    counts: BTreeMap<usize, BTreeMap<usize, u64>>,
}

impl LengthModel {
    pub fn count(&self, m: usize, l: usize) -> u64 {
        self.counts
            .get(&m)
            .and_then(|row| row.get(&l))
            .copied()
            .unwrap_or(0)
    }

    pub fn marginal(&self, m: usize) -> u64 {
        self.counts.get(&m).map_or(0, |row| row.values().sum())
    }

    /// Q(l|m); zero when `m` was never observed.
    pub fn q(&self, l: usize, m: usize) -> f64 {
        let total = self.marginal(m);
        if total == 0 {
            0.0
        } else {
            self.count(m, l) as f64 / total as f64
        }
    }

    pub fn source_lengths(&self) -> impl Iterator<Item = usize> + '_ {
        self.counts.keys().copied()
    }

    /// Target lengths observed with source length `m`, with counts.
    pub fn row(&self, m: usize) -> impl Iterator<Item = (usize, u64)> + '_ {
        self.counts
            .get(&m)
            .into_iter()
            .flat_map(|row| row.iter().map(|(&l, &c)| (l, c)))
    }

    /// `(m, l, count)` triples in ascending order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, u64)> + '_ {
        self.counts
            .iter()
            .flat_map(|(&m, row)| row.iter().map(move |(&l, &c)| (m, l, c)))
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "m,l,count")?;
        for (m, l, c) in self.entries() {
            writeln!(out, "{m},{l},{c}")?;
        }
        Ok(())
    }
}

pub fn estimate_length_model(corpus: &Corpus) -> Result<LengthModel> {
    if corpus.pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut model = LengthModel::default();
    for pair in &corpus.pairs {
        *model
            .counts
            .entry(pair.source.len())
            .or_default()
            .entry(pair.target.len())
            .or_insert(0) += 1;
    }
    Ok(model)
}

/// exp of the mean negative natural-log Q(l_i|m_i) over the corpus.
pub fn length_model_perplexity(model: &LengthModel, corpus: &Corpus) -> Result<f64> {
    if corpus.pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut nll = 0.0;
    for pair in &corpus.pairs {
        let (m, l) = (pair.source.len(), pair.target.len());
        let q = model.q(l, m);
        if q <= 0.0 {
            return Err(Error::UnseenLength { m, l });
        }
        nll -= q.ln();
    }
    Ok((nll / corpus.pairs.len() as f64).exp())
}

/// Perplexity of the length model estimated on `corpus` itself.
pub fn self_perplexity(corpus: &Corpus) -> Result<f64> {
    length_model_perplexity(&estimate_length_model(corpus)?, corpus)
}

/// For every source length, keeps the most frequent target lengths until at
/// least `keep_fraction` of that source length's mass is covered (the length
/// crossing the threshold is kept). Equal counts rank by `|l - m|`, then `l`.
pub fn filter_by_length_percentile(corpus: &Corpus, keep_fraction: f64) -> Result<Corpus> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::InvalidKeepFraction(keep_fraction));
    }
    let model = estimate_length_model(corpus)?;
    let mut kept: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for m in model.source_lengths() {
        let mut row: Vec<(usize, u64)> = model.row(m).collect();
        row.sort_by(|a, b| {
            b.1.cmp(&a.1)
                .then(a.0.abs_diff(m).cmp(&b.0.abs_diff(m)))
                .then(a.0.cmp(&b.0))
        });
        let total = model.marginal(m) as f64;
        let mut covered = 0u64;
        let lengths = kept.entry(m).or_default();
        for (l, c) in row {
            lengths.push(l);
            covered += c;
            // Small slack so that e.g. 3/4 >= 0.75 is not lost to rounding.
            if covered as f64 >= keep_fraction * total - 1e-9 {
                break;
            }
        }
    }

    let pairs: Vec<SentencePair> = corpus
        .pairs
        .iter()
        .filter(|p| kept[&p.source.len()].contains(&p.target.len()))
        .cloned()
        .collect();
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let spec = if keep_fraction < 1.0 {
        format!("{};keep={}", corpus.spec, keep_fraction)
    } else {
        corpus.spec.clone()
    };
    Ok(Corpus {
        pairs,
        spec,
        ..corpus.clone()
    })
}

impl Corpus {
    pub fn max_target_len(&self) -> usize {
        self.pairs.iter().map(|p| p.target.len()).max().unwrap_or(0)
    }

    pub fn max_source_len(&self) -> usize {
        self.pairs.iter().map(|p| p.source.len()).max().unwrap_or(0)
    }

    pub fn header(&self) -> String {
        format!(
            "# seed={} spec={};alphabet={};split={}",
            self.seed, self.spec, self.alphabet_size, self.split
        )
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{}", self.header())?;
        for pair in &self.pairs {
            write_ids(&mut out, &pair.source)?;
            out.write_all(b"\t")?;
            write_ids(&mut out, &pair.target)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::harness::write_atomic(path, |w| Ok(self.write_to(w)?))
    }

    pub fn load(path: &Path) -> Result<Corpus> {
        let file = fs::File::open(path)?;
        Corpus::read_from(BufReader::new(file), path)
    }

    pub fn read_from<R: BufRead>(reader: R, path: &Path) -> Result<Corpus> {
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| parse_err(1, "missing header".into()))??;
        let (seed, spec, alphabet_size, split) =
            parse_header(&header).map_err(|m| parse_err(1, m))?;

        let mut pairs = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            let lineno = i + 2;
            if line.trim().is_empty() {
                continue;
            }
            let (src, tgt) = line
                .split_once('\t')
                .ok_or_else(|| parse_err(lineno, "expected <source>\\t<target>".into()))?;
            let source = parse_ids(src).map_err(|m| parse_err(lineno, m))?;
            let target = parse_ids(tgt).map_err(|m| parse_err(lineno, m))?;
            if source.is_empty() || target.is_empty() {
                return Err(parse_err(lineno, "source and target must be non-empty".into()));
            }
            let limit = FIRST_CONTENT_ID as usize + alphabet_size;
            if let Some(&bad) = source
                .iter()
                .chain(&target)
                .find(|&&t| t < FIRST_CONTENT_ID || t as usize >= limit)
            {
                return Err(parse_err(
                    lineno,
                    format!("token {bad} outside the content range"),
                ));
            }
            pairs.push(SentencePair { source, target });
        }
        if pairs.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(Corpus {
            pairs,
            split,
            seed,
            alphabet_size,
            spec,
        })
    }
}

fn write_ids<W: Write>(out: &mut W, ids: &[TokenId]) -> std::io::Result<()> {
    for (i, id) in ids.iter().enumerate() {
        if i > 0 {
            out.write_all(b" ")?;
        }
        write!(out, "{id}")?;
    }
    Ok(())
}

fn parse_ids(s: &str) -> std::result::Result<Vec<TokenId>, String> {
    s.split_whitespace()
        .map(|t| t.parse().map_err(|_| format!("bad token id {t:?}")))
        .collect()
}

fn parse_header(line: &str) -> std::result::Result<(u64, String, usize, Split), String> {
    let rest = line
        .strip_prefix("# ")
        .ok_or_else(|| "header must start with '# '".to_string())?;
    let (seed_part, spec_part) = rest
        .split_once(' ')
        .ok_or_else(|| "header must contain seed= and spec=".to_string())?;
    let seed = seed_part
        .strip_prefix("seed=")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| format!("bad seed field {seed_part:?}"))?;
    let spec_full = spec_part
        .strip_prefix("spec=")
        .ok_or_else(|| format!("bad spec field {spec_part:?}"))?;

    let mut alphabet = None;
    let mut split = Split::Train;
    let mut spec_fields = Vec::new();
    for field in spec_full.split(';') {
        match field.split_once('=') {
            Some(("alphabet", v)) => {
                alphabet = Some(v.parse().map_err(|_| format!("bad alphabet {v:?}"))?)
            }
            Some(("split", v)) => split = v.parse().map_err(|e: Error| e.to_string())?,
            _ => spec_fields.push(field),
        }
    }
    let alphabet = alphabet.ok_or_else(|| "spec is missing alphabet=".to_string())?;
    Ok((seed, spec_fields.join(";"), alphabet, split))
}
