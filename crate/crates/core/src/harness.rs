//! Config-driven pipeline behind the `eoslab` binary.
//!
//! An experiment is one TOML file:
//!
//! ```toml
//! seed = 7
//! out_dir = "runs/sigma2"
//! eos_mode = "single"        # or "multi", "multi:32"
//! beams = [1, 4, 16]
//! keep_fractions = [0.75, 0.5]
//! test_pairs = 200
//!
//! [gen]
//! sigma = 2.0
//!
//! [model]
//! label_smoothing = 0.1
//!
//! [train]
//! steps = 3000
//! ```
//!
//! Omitted fields take their defaults. The top-level `seed` feeds every
//! random stream; per-stage seed fields may only repeat that value.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::corpus::{
    estimate_length_model, filter_by_length_percentile, generate_corpus, generate_test_corpus,
    self_perplexity, Corpus, GenSpec,
};
use crate::decode::{beam_decode_traced, default_max_steps, DecodeResult, TraceRecord};
use crate::encoding::{build_vocab, EosMode, Vocab};
use crate::error::{Error, Result};
use crate::metrics::{
    empty_ratio, first_position_stats, length_ratio, reference_avg_logprob, task_accuracy,
    write_csv, MetricsReport,
};
use crate::model::{
    load_checkpoint, save_checkpoint, train, train_from, Checkpoint, ModelConfig, Parameters,
    TrainSpec,
};
use crate::TokenId;

/// Writes `path` through a temporary file in the same directory and renames
/// it into place, so a failed write never leaves a truncated file behind.
pub fn write_atomic<F>(path: &Path, write: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<()>,
{
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let tmp = tempfile::NamedTempFile::new_in(dir)?;
    let mut out = BufWriter::new(tmp.reopen()?);
    write(&mut out)?;
    out.flush()?;
    out.get_ref().sync_all()?;
    drop(out);
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, |w| Ok(w.write_all(text.as_bytes())?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    #[serde(serialize_with = "ser_eos_mode", deserialize_with = "de_eos_mode")]
    pub eos_mode: EosMode,
    pub beams: Vec<usize>,
    pub keep_fractions: Vec<f64>,
    pub test_pairs: usize,
    pub gen: GenSpec,
    pub model: ModelConfig,
    pub train: TrainSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut config = ExperimentConfig {
            seed: 1,
            out_dir: PathBuf::from("runs/default"),
            eos_mode: EosMode::Single,
            beams: vec![1, 4, 16],
            keep_fractions: Vec::new(),
            test_pairs: 200,
            gen: GenSpec::default(),
            model: ModelConfig::default(),
            train: TrainSpec::default(),
        };
        config.apply_seed();
        config
    }
}

fn ser_eos_mode<S: Serializer>(mode: &EosMode, s: S) -> std::result::Result<S::Ok, S::Error> {
    match mode {
        EosMode::Single => s.serialize_str("single"),
        EosMode::Multi { l_max } => s.serialize_str(&format!("multi:{l_max}")),
    }
}

fn de_eos_mode<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<EosMode, D::Error> {
    let s = String::deserialize(d)?;
    s.parse().map_err(serde::de::Error::custom)
}

const STAGE_SEEDS: [(&str, &str); 3] = [("gen", "seed"), ("model", "seed"), ("train", "shuffle_seed")];

impl ExperimentConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<ExperimentConfig> {
        let raw: toml::Table = text
            .parse()
            .map_err(|e| Error::Config(format!("{}: {e}", origin.display())))?;
        let seed = raw
            .get("seed")
            .and_then(|v| v.as_integer())
            .unwrap_or(ExperimentConfig::default().seed as i64);
        for (table, key) in STAGE_SEEDS {
            let value = raw.get(table).and_then(|t| t.get(key));
            if value.is_some_and(|v| v.as_integer() != Some(seed)) {
                return Err(Error::Config(format!(
                    "{}: [{table}].{key} is derived from the top-level seed; remove it",
                    origin.display()
                )));
            }
        }
        let mut config: ExperimentConfig = toml::from_str(text)
            .map_err(|e| Error::Config(format!("{}: {e}", origin.display())))?;
        config.apply_seed();
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path)?;
        ExperimentConfig::from_toml(&text, path)
    }

    /// Propagates the top-level seed into every stage.
    pub fn apply_seed(&mut self) {
        self.gen.seed = self.seed;
        self.model.seed = self.seed;
        self.train.shuffle_seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.model.validate()?;
        if self.beams.contains(&0) {
            return Err(Error::Config("beam sizes must be at least 1".into()));
        }
        if self.test_pairs == 0 {
            return Err(Error::Config("test_pairs must be at least 1".into()));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        for &f in &self.keep_fractions {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::InvalidKeepFraction(f));
            }
        }
        if let EosMode::Multi { l_max } = self.eos_mode {
            if self.gen.max_target_len() > l_max {
                return Err(Error::Config(format!(
                    "targets can reach length {}, beyond l_max {l_max}",
                    self.gen.max_target_len()
                )));
            }
        }
        let needed = self.gen.m_max.max(self.gen.max_target_len() + 1);
        if self.model.max_len < needed {
            return Err(Error::Config(format!(
                "model.max_len {} is too small for the corpus, which needs {needed}",
                self.model.max_len
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Stable identifier: hash of the canonical config, excluding `out_dir`.
    pub fn run_id(&self) -> String {
        let mut canonical = self.clone();
        canonical.out_dir = PathBuf::new();
        hash_id(&[canonical.to_toml().as_bytes()])
    }
}

fn hash_id(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
        h.update([0u8]);
    }
    hex::encode(&h.finalize()[..6])
}

/// Metadata recorded next to a checkpoint for later evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub run_id: String,
    pub seed: u64,
    pub sigma: f64,
    pub q_perplexity: f64,
    pub train_corpus: String,
}

impl RunInfo {
    pub fn new(config: &ExperimentConfig, corpus: &Corpus) -> Result<RunInfo> {
        Ok(RunInfo {
            run_id: hash_id(&[config.run_id().as_bytes(), corpus.header().as_bytes()]),
            seed: config.seed,
            sigma: config.gen.sigma,
            q_perplexity: self_perplexity(corpus)?,
            train_corpus: corpus.header(),
        })
    }
}

fn run_info_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("run.json")
}

#[derive(Debug, Clone)]
pub struct GenOutputs {
    pub train: PathBuf,
    pub test: PathBuf,
    pub length_model: PathBuf,
}

pub fn cmd_gen(config_path: &Path, out: Option<&Path>) -> Result<GenOutputs> {
    let config = ExperimentConfig::load(config_path)?;
    let dir = out.map_or_else(|| config.out_dir.clone(), Path::to_path_buf);
    gen_into(&config, &dir)
}

pub fn gen_into(config: &ExperimentConfig, dir: &Path) -> Result<GenOutputs> {
    let train = generate_corpus(&config.gen)?;
    let test = generate_test_corpus(&config.gen, config.test_pairs)?;
    let outputs = GenOutputs {
        train: dir.join("train.txt"),
        test: dir.join("test.txt"),
        length_model: dir.join("length_model.csv"),
    };
    train.save(&outputs.train)?;
    test.save(&outputs.test)?;
    let model = estimate_length_model(&train)?;
    write_atomic(&outputs.length_model, |w| Ok(model.write_csv(w)?))?;
    info!(
        "wrote {} training and {} test pairs to {}",
        train.pairs.len(),
        test.pairs.len(),
        dir.display()
    );
    Ok(outputs)
}

#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub checkpoint: PathBuf,
    pub loss_curve: PathBuf,
    pub info: RunInfo,
}

/// Trains on `corpus_path` (or continues from `resume`) and writes
/// `model.ckpt`, `loss.csv` and `model.run.json` into the output directory.
pub fn cmd_train(
    config_path: &Path,
    corpus_path: &Path,
    out: Option<&Path>,
    resume: Option<&Path>,
) -> Result<TrainOutputs> {
    let config = ExperimentConfig::load(config_path)?;
    let dir = out.map_or_else(|| config.out_dir.clone(), Path::to_path_buf);
    let corpus = Corpus::load(corpus_path)?;
    let resume = resume.map(load_checkpoint).transpose()?;
    train_into(&config, &corpus, &dir, resume)
}

pub fn train_into(
    config: &ExperimentConfig,
    corpus: &Corpus,
    dir: &Path,
    resume: Option<Checkpoint>,
) -> Result<TrainOutputs> {
    let vocab = build_vocab(corpus, config.eos_mode)?;
    let outcome = match resume {
        Some(ckpt) => {
            if ckpt.vocab != vocab || ckpt.config != config.model {
                return Err(Error::Incompatible(
                    "checkpoint was trained with a different model config or vocabulary".into(),
                ));
            }
            train_from(ckpt.state, &config.model, corpus, &vocab, &config.train)?
        }
        None => train(&config.model, corpus, &vocab, &config.train)?,
    };
    let info = RunInfo::new(config, corpus)?;
    let outputs = TrainOutputs {
        checkpoint: dir.join("model.ckpt"),
        loss_curve: dir.join("loss.csv"),
        info: info.clone(),
    };
    let checkpoint = Checkpoint {
        config: config.model.clone(),
        vocab,
        state: outcome.state.clone(),
    };
    save_checkpoint(&outputs.checkpoint, &checkpoint)?;
    write_atomic(&outputs.loss_curve, |w| Ok(outcome.write_loss_csv(w)?))?;
    write_text(
        &run_info_path(&outputs.checkpoint),
        &serde_json::to_string_pretty(&info)?,
    )?;
    Ok(outputs)
}

/// Decoded outputs of one beam size, in test-set order.
#[derive(Debug, Clone)]
pub struct BeamOutputs {
    pub beam_k: usize,
    pub results: Vec<DecodeResult>,
    pub traces: Vec<Vec<TraceRecord>>,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub reports: Vec<MetricsReport>,
    pub beams: Vec<BeamOutputs>,
}

/// Scores one trained model on a test corpus, one report per beam size.
pub fn evaluate(
    params: &Parameters,
    vocab: &Vocab,
    epsilon: f64,
    test: &Corpus,
    beams: &[usize],
    info: &RunInfo,
    keep_traces: bool,
) -> Result<Evaluation> {
    if test.pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if test.alphabet_size != vocab.content_size() {
        return Err(Error::Incompatible(format!(
            "test corpus alphabet {} does not match the model's {} content tokens",
            test.alphabet_size,
            vocab.content_size()
        )));
    }
    let sources: Vec<Vec<TokenId>> = test.pairs.iter().map(|p| p.source.clone()).collect();
    let references: Vec<Vec<TokenId>> = test.pairs.iter().map(|p| p.target.clone()).collect();
    let first = first_position_stats(params, &sources, vocab)?;
    let reference = reference_avg_logprob(params, test, vocab)?;
    let accuracy = task_accuracy(params, test, vocab)?;

    let mut reports = Vec::new();
    let mut outputs = Vec::new();
    for &k in beams {
        let decoded: Vec<(DecodeResult, Vec<TraceRecord>)> = sources
            .par_iter()
            .map(|src| {
                let steps = default_max_steps(params, vocab, src.len());
                let mut trace = Vec::new();
                let result = beam_decode_traced(
                    params,
                    src,
                    vocab,
                    k,
                    steps,
                    keep_traces.then_some(&mut trace),
                )?;
                Ok((result, trace))
            })
            .collect::<Result<_>>()?;
        let (results, traces): (Vec<_>, Vec<_>) = decoded.into_iter().unzip();
        let best: Vec<_> = results
            .iter()
            .map(|r| r.best().cloned().expect("beam search returns a hypothesis"))
            .collect();
        reports.push(MetricsReport {
            run_id: info.run_id.clone(),
            eos_mode: vocab.eos_mode().to_string(),
            epsilon,
            beam_k: k,
            sigma: info.sigma,
            length_ratio: length_ratio(&best, &references)?,
            empty_ratio: empty_ratio(&best)?,
            min_first_logp: first.min_first_logp,
            eos_first_logp: first.eos_first_logp,
            ref_avg_logp: reference.mean,
            q_perplexity: info.q_perplexity,
            task_accuracy: accuracy,
            seed: info.seed,
            ref_skipped: reference.skipped,
        });
        outputs.push(BeamOutputs {
            beam_k: k,
            results,
            traces,
        });
    }
    Ok(Evaluation {
        reports,
        beams: outputs,
    })
}

#[derive(Debug, Clone)]
pub struct EvalOutputs {
    pub metrics_csv: PathBuf,
    pub metrics_json: PathBuf,
    pub reports: Vec<MetricsReport>,
}

/// Evaluates a checkpoint on a test corpus. Beam sizes default to the
/// config's list. Run metadata comes from the `.run.json` file written next
/// to the checkpoint by `cmd_train`.
pub fn cmd_eval(
    config_path: &Path,
    checkpoint_path: &Path,
    test_path: &Path,
    beams: &[usize],
    out: Option<&Path>,
    trace: bool,
) -> Result<EvalOutputs> {
    let config = ExperimentConfig::load(config_path)?;
    let dir = out.map_or_else(|| config.out_dir.clone(), Path::to_path_buf);
    let beams = if beams.is_empty() { &config.beams[..] } else { beams };
    if beams.contains(&0) {
        return Err(Error::InvalidArgument("beam sizes must be at least 1".into()));
    }
    let ckpt = load_checkpoint(checkpoint_path)?;
    let info_path = run_info_path(checkpoint_path);
    let info: RunInfo = serde_json::from_str(&fs::read_to_string(&info_path).map_err(|e| {
        Error::InvalidArgument(format!("cannot read run info {}: {e}", info_path.display()))
    })?)?;
    let test = Corpus::load(test_path)?;
    let eval = evaluate(
        &ckpt.state.params,
        &ckpt.vocab,
        ckpt.config.label_smoothing,
        &test,
        beams,
        &info,
        trace,
    )?;

    for beam in &eval.beams {
        let path = dir.join(format!("decode_k{}.jsonl", beam.beam_k));
        write_atomic(&path, |w| {
            for (pair, result) in test.pairs.iter().zip(&beam.results) {
                serde_json::to_writer(&mut *w, &result.to_json(&pair.source))?;
                w.write_all(b"\n")?;
            }
            Ok(())
        })?;
        if trace {
            let path = dir.join(format!("trace_k{}.jsonl", beam.beam_k));
            write_atomic(&path, |w| {
                for records in &beam.traces {
                    for r in records {
                        serde_json::to_writer(&mut *w, r)?;
                        w.write_all(b"\n")?;
                    }
                }
                Ok(())
            })?;
        }
    }
    let outputs = EvalOutputs {
        metrics_csv: dir.join("metrics.csv"),
        metrics_json: dir.join("metrics.json"),
        reports: eval.reports,
    };
    write_atomic(&outputs.metrics_csv, |w| Ok(write_csv(w, &outputs.reports)?))?;
    write_text(
        &outputs.metrics_json,
        &serde_json::to_string_pretty(&outputs.reports)?,
    )?;
    Ok(outputs)
}

/// Default output name for a filtered corpus: `train.txt` becomes
/// `train.keep0.75.txt`.
pub fn filtered_path(corpus: &Path, keep_fraction: f64) -> PathBuf {
    let stem = corpus.file_stem().map_or_else(|| "corpus".into(), |s| s.to_string_lossy());
    corpus.with_file_name(format!("{stem}.keep{keep_fraction}.txt"))
}

pub fn cmd_filter(corpus_path: &Path, keep_fraction: f64, out: Option<&Path>) -> Result<PathBuf> {
    let corpus = Corpus::load(corpus_path)?;
    let filtered = filter_by_length_percentile(&corpus, keep_fraction)?;
    let path = out.map_or_else(|| filtered_path(corpus_path, keep_fraction), Path::to_path_buf);
    filtered.save(&path)?;
    info!(
        "kept {} of {} pairs; Q perplexity {:.4} -> {:.4}",
        filtered.pairs.len(),
        corpus.pairs.len(),
        self_perplexity(&corpus)?,
        self_perplexity(&filtered)?
    );
    Ok(path)
}

/// Concatenates metrics CSVs into one table and renders it for the terminal.
pub fn cmd_report(inputs: &[PathBuf], out: Option<&Path>) -> Result<String> {
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("no metrics files given".into()));
    }
    let mut rows: Vec<Vec<String>> = Vec::new();
    for path in inputs {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        if header != crate::metrics::CSV_HEADER {
            return Err(Error::Parse {
                path: path.clone(),
                line: 1,
                message: "not a metrics CSV".into(),
            });
        }
        for (i, line) in lines.enumerate() {
            let cells: Vec<String> = line.split(',').map(str::to_string).collect();
            if cells.len() != header.split(',').count() {
                return Err(Error::Parse {
                    path: path.clone(),
                    line: i + 2,
                    message: format!("expected {} columns", header.split(',').count()),
                });
            }
            rows.push(cells);
        }
    }
    if let Some(out) = out {
        write_atomic(out, |w| {
            writeln!(w, "{}", crate::metrics::CSV_HEADER)?;
            for row in &rows {
                writeln!(w, "{}", row.join(","))?;
            }
            Ok(())
        })?;
    }
    Ok(render_table(&rows))
}

fn render_table(rows: &[Vec<String>]) -> String {
    let header: Vec<String> = crate::metrics::CSV_HEADER.split(',').map(str::to_string).collect();
    let shown: Vec<Vec<String>> = std::iter::once(header)
        .chain(rows.iter().map(|r| {
            r.iter()
                .map(|c| match c.parse::<f64>() {
                    Ok(v) if c.contains('.') || c.contains('e') => format!("{v:.4}"),
                    _ => c.clone(),
                })
                .collect()
        }))
        .collect();
    let widths: Vec<usize> = (0..shown[0].len())
        .map(|i| shown.iter().map(|r| r[i].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &shown {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// gen, train on the full corpus and on every filtered variant, then eval.
/// Returns all metrics rows in a fixed order.
pub fn run_pipeline(config: &ExperimentConfig, dir: &Path) -> Result<Vec<MetricsReport>> {
    config.validate()?;
    let gen = gen_into(config, dir)?;
    let test = Corpus::load(&gen.test)?;
    let mut variants = vec![(dir.join("full"), gen.train.clone())];
    for &f in &config.keep_fractions {
        let path = filtered_path(&gen.train, f);
        let corpus = filter_by_length_percentile(&Corpus::load(&gen.train)?, f)?;
        corpus.save(&path)?;
        variants.push((dir.join(format!("keep{f}")), path));
    }
    let mut reports = Vec::new();
    for (run_dir, corpus_path) in variants {
        let corpus = Corpus::load(&corpus_path)?;
        let trained = train_into(config, &corpus, &run_dir, None)?;
        let ckpt = load_checkpoint(&trained.checkpoint)?;
        let eval = evaluate(
            &ckpt.state.params,
            &ckpt.vocab,
            ckpt.config.label_smoothing,
            &test,
            &config.beams,
            &trained.info,
            false,
        )?;
        write_atomic(&run_dir.join("metrics.csv"), |w| Ok(write_csv(w, &eval.reports)?))?;
        reports.extend(eval.reports);
    }
    write_atomic(&dir.join("metrics.csv"), |w| Ok(write_csv(w, &reports)?))?;
    Ok(reports)
}
