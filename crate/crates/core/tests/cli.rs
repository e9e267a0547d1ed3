use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use eoslab::corpus::{self_perplexity, Corpus};
use eoslab::model::{load_checkpoint, Parameters};

const CONFIG: &str = r#"
seed = 3
eos_mode = "single"
beams = [1, 3]
test_pairs = 12

[gen]
pair_count = 300
m_min = 3
m_max = 8
source_alphabet = 10
target_alphabet = 10

[model]
d_model = 8
n_heads = 2
d_ffn = 16
max_len = 16

[train]
steps = 20
batch_size = 8
log_every = 0
"#;

fn eoslab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eoslab"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = eoslab(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_is_deterministic_and_matches_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    fs::write(&cfg, CONFIG).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["gen", "--config", s(&cfg), "--out", s(&a)]);
    ok(&["gen", "--config", s(&cfg), "--out", s(&b)]);
    for name in ["train.txt", "test.txt", "length_model.csv"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    let train = Corpus::load(&a.join("train.txt")).unwrap();
    assert_eq!(train.seed, 3);
    assert_eq!(train.pairs.len(), 300);
    assert!(fs::read_to_string(a.join("train.txt")).unwrap().starts_with("# seed=3 "));
    assert!(fs::read_to_string(a.join("length_model.csv")).unwrap().starts_with("m,l,count\n"));
}

#[test]
fn filter_full_keep_is_identity_and_smaller_keep_sharpens() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    fs::write(&cfg, CONFIG).unwrap();
    ok(&["gen", "--config", s(&cfg), "--out", s(dir.path())]);
    let train = dir.path().join("train.txt");
    let same = ok(&["filter", "--keep-fraction", "1.0", s(&train)]);
    assert_eq!(fs::read(same.trim()).unwrap(), fs::read(&train).unwrap());

    let mut last = self_perplexity(&Corpus::load(&train).unwrap()).unwrap();
    for keep in ["0.75", "0.5"] {
        let out = dir.path().join(format!("k{keep}.txt"));
        ok(&["filter", "--keep-fraction", keep, "--out", s(&out), s(&train)]);
        let ppl = self_perplexity(&Corpus::load(&out).unwrap()).unwrap();
        assert!(ppl < last, "{keep}: {ppl} vs {last}");
        last = ppl;
    }
    assert!(!eoslab(&["filter", "--keep-fraction", "0", s(&train)]).status.success());
}

#[test]
fn train_eval_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    fs::write(&cfg, CONFIG).unwrap();
    let d = dir.path();
    ok(&["gen", "--config", s(&cfg), "--out", s(d)]);
    ok(&["train", "--config", s(&cfg), "--out", s(&d.join("run")), s(&d.join("train.txt"))]);
    let ckpt = d.join("run/model.ckpt");
    assert!(ckpt.exists());
    let loss = fs::read_to_string(d.join("run/loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 21);

    ok(&[
        "eval", "--config", s(&cfg), "--out", s(&d.join("eval")), "--beam", "1", "--beam", "2",
        "--trace", s(&ckpt), s(&d.join("test.txt")),
    ]);
    let csv = fs::read_to_string(d.join("eval/metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], eoslab::metrics::CSV_HEADER);
    assert_eq!(lines.len(), 3);
    assert!(lines[1].contains(",single,0.1,1,"));
    let decoded = fs::read_to_string(d.join("eval/decode_k2.jsonl")).unwrap();
    assert_eq!(decoded.lines().count(), 12);
    let first: serde_json::Value = serde_json::from_str(decoded.lines().next().unwrap()).unwrap();
    for key in ["source_ids", "hypotheses", "empty_logp", "empty_preferred"] {
        assert!(first.get(key).is_some(), "{key}");
    }
    let trace = fs::read_to_string(d.join("eval/trace_k1.jsonl")).unwrap();
    let rec: serde_json::Value = serde_json::from_str(trace.lines().next().unwrap()).unwrap();
    for key in ["step", "prefix_ids", "chosen_id", "logp_step", "logp_cum"] {
        assert!(rec.get(key).is_some(), "{key}");
    }

    let table = ok(&["report", "--out", s(&d.join("all.csv")), s(&d.join("eval/metrics.csv"))]);
    assert_eq!(table.lines().count(), 3);
    assert_eq!(fs::read_to_string(d.join("all.csv")).unwrap(), csv);
}

#[test]
fn zero_steps_checkpoint_equals_init_and_resume_continues() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("exp.toml");
    fs::write(&cfg, CONFIG.replace("steps = 20", "steps = 0")).unwrap();
    ok(&["gen", "--config", s(&cfg), "--out", s(d)]);
    ok(&["train", "--config", s(&cfg), "--out", s(&d.join("z")), s(&d.join("train.txt"))]);
    let ckpt = load_checkpoint(&d.join("z/model.ckpt")).unwrap();
    let init = Parameters::init(ckpt.config.architecture(ckpt.vocab.size()), 3).unwrap();
    assert_eq!(ckpt.state.params, init);

    // 10 + 10 resumed steps equal 20 straight steps.
    let cfg10 = d.join("ten.toml");
    let cfg20 = d.join("twenty.toml");
    fs::write(&cfg10, CONFIG.replace("steps = 20", "steps = 10")).unwrap();
    fs::write(&cfg20, CONFIG).unwrap();
    let train = d.join("train.txt");
    ok(&["train", "--config", s(&cfg10), "--out", s(&d.join("r1")), s(&train)]);
    ok(&[
        "train", "--config", s(&cfg10), "--out", s(&d.join("r2")), "--resume",
        s(&d.join("r1/model.ckpt")), s(&train),
    ]);
    ok(&["train", "--config", s(&cfg20), "--out", s(&d.join("straight")), s(&train)]);
    assert_eq!(
        fs::read(d.join("r2/model.ckpt")).unwrap(),
        fs::read(d.join("straight/model.ckpt")).unwrap()
    );
}

#[test]
fn errors_exit_nonzero_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "seed = 1\n[model]\nd_modle = 8\n").unwrap();
    let out = eoslab(&["gen", "--config", s(&cfg), "--out", s(dir.path())]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("d_modle"), "{err}");
    assert!(!dir.path().join("train.txt").exists());

    let out = eoslab(&["eval", "--config", s(&cfg), "missing.ckpt", "missing.txt"]);
    assert!(!out.status.success());
    assert!(!eoslab(&["report"]).status.success());
}

#[test]
fn eval_rejects_mismatched_test_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("exp.toml");
    fs::write(&cfg, CONFIG).unwrap();
    ok(&["gen", "--config", s(&cfg), "--out", s(d)]);
    ok(&["train", "--config", s(&cfg), "--out", s(&d.join("run")), s(&d.join("train.txt"))]);
    let other = d.join("other.toml");
    fs::write(&other, CONFIG.replace("_alphabet = 10", "_alphabet = 12")).unwrap();
    ok(&["gen", "--config", s(&other), "--out", s(&d.join("other"))]);
    let out = eoslab(&[
        "eval", "--config", s(&cfg), "--out", s(&d.join("eval")), s(&d.join("run/model.ckpt")),
        s(&d.join("other/test.txt")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("incompatible"));
}
