//! End-to-end checks of the command layer: config validation, output
//! determinism, table-backed evaluation, checkpoint fingerprinting, and
//! the binary's exit-code contract.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use seqpe::encoder::PeTable;
use seqpe::SeqPeError;
use seqpe_cli::commands;
use seqpe_cli::config::{ExtentSpec, RunConfig};

/// A small sequential-encoder language-model run that trains in well
/// under a second.
const LM_CONFIG: &str = r#"
task = "lm"
pe = "seq-sum"
seed = 3

[model]
d_model = 32
layers = 1
heads = 2
vocab = 32

[positions]
base = 10
digits = 3
l_train = 12
l_max = [100]
encoder_layers = 1
encoder_heads = 2

[train]
steps = 4
batch = 2
alpha = 0.1
beta = 0.1
contrastive_batch = 6
distill_batch = 6
distill_heads = 2

[data]
length = 2000
period = 6
seed = 11

[eval]
extents = [12, 20]
tokens = 600
"#;

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

fn load(dir: &Path, text: &str) -> RunConfig {
    RunConfig::load(&write_config(dir, text)).unwrap()
}

#[test]
fn config_errors_carry_file_and_line_information() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "task = \"lm\"\npe = \"rope\"\n\n[train]\nsteps = \"many\"\n");
    let err = RunConfig::load(&path).unwrap_err().to_string();
    assert!(err.contains("run.toml"), "no file name in {err:?}");
    assert!(err.contains("line 5"), "no line number in {err:?}");

    let path = write_config(dir.path(), "task = \"lm\"\npe = \"rope\"\nbanana = 1\n");
    let err = RunConfig::load(&path).unwrap_err().to_string();
    assert!(err.contains("banana"), "unknown field not named in {err:?}");
}

#[test]
fn extent_specs_parse_both_shapes() {
    assert_eq!(ExtentSpec::parse("64").unwrap(), ExtentSpec::Len(64));
    assert_eq!(ExtentSpec::parse("14x14").unwrap(), ExtentSpec::Grid([14, 14]));
    assert!(ExtentSpec::parse("3x4x5").is_err());
    assert!(ExtentSpec::parse("abc").is_err());
}

#[test]
fn regularizer_weights_require_the_sequential_encoder() {
    let dir = tempfile::tempdir().unwrap();
    let text = LM_CONFIG.replace("pe = \"seq-sum\"", "pe = \"rope\"");
    let err = RunConfig::load(&write_config(dir.path(), &text)).unwrap_err();
    assert!(
        matches!(&err, SeqPeError::ConfigInvalid(m) if m.contains("alpha")),
        "unexpected error {err:?}"
    );
}

#[test]
fn extents_beyond_the_digit_range_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    // Two digits in base 10 can express coordinates up to 99.
    let text = LM_CONFIG.replace("digits = 3", "digits = 2").replace("l_max = [100]", "l_max = [101]");
    let err = RunConfig::load(&write_config(dir.path(), &text)).unwrap_err();
    assert!(
        matches!(&err, SeqPeError::ConfigInvalid(m) if m.contains("representable")),
        "unexpected error {err:?}"
    );
}

#[test]
fn full_range_distillation_warns_about_inert_shifts() {
    let dir = tempfile::tempdir().unwrap();
    let text = LM_CONFIG.replace("l_max = [100]", "l_max = [1000]");
    let cfg = load(dir.path(), &text);
    let warnings = cfg.validate().unwrap();
    assert!(
        warnings.iter().any(|w| w.contains("headroom")),
        "expected an inert-shift warning, got {warnings:?}"
    );
    // With headroom left, no such warning.
    let cfg = load(dir.path(), LM_CONFIG);
    assert!(cfg.validate().unwrap().is_empty());
}

#[test]
fn training_twice_writes_byte_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = load(dir.path(), LM_CONFIG);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    commands::cmd_train(&cfg, &a).unwrap();
    commands::cmd_train(&cfg, &b).unwrap();
    for name in ["metrics.jsonl", "checkpoint.bin", "summary.json"] {
        let x = fs::read(a.join(name)).unwrap();
        let y = fs::read(b.join(name)).unwrap();
        assert_eq!(x, y, "{name} differs between identical runs");
    }
    // Metrics log one object per step with the four loss fields.
    let metrics = fs::read_to_string(a.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
    for line in metrics.lines() {
        for key in ["\"step\"", "\"l_main\"", "\"l_delta\"", "\"l_ood\"", "\"total\""] {
            assert!(line.contains(key), "{key} missing from {line}");
        }
    }
}

#[test]
fn evaluation_at_the_training_extent_reproduces_the_training_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = load(dir.path(), LM_CONFIG);
    let out = dir.path().join("run");
    let summary = commands::cmd_train(&cfg, &out).unwrap();
    let csv = dir.path().join("eval.csv");
    commands::cmd_eval(&cfg, &out.join("checkpoint.bin"), None, None, &csv).unwrap();
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("extent,metric"));
    let first = lines.next().unwrap();
    // Shortest-roundtrip formatting makes string equality the same as bit
    // equality of the measured number.
    assert_eq!(first, format!("12,{}", summary.value));
}

#[test]
fn table_backed_evaluation_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = load(dir.path(), LM_CONFIG);
    let out = dir.path().join("run");
    commands::cmd_train(&cfg, &out).unwrap();
    let ckpt = out.join("checkpoint.bin");
    let table = dir.path().join("table.bin");
    commands::cmd_precompute(&cfg, &ckpt, &table).unwrap();

    let live = dir.path().join("live.csv");
    let frozen = dir.path().join("frozen.csv");
    commands::cmd_eval(&cfg, &ckpt, None, None, &live).unwrap();
    commands::cmd_eval(&cfg, &ckpt, Some(&table), None, &frozen).unwrap();
    assert_eq!(fs::read(&live).unwrap(), fs::read(&frozen).unwrap());

    // The table covers the widest configured extent and round-trips
    // byte-for-byte.
    let loaded = PeTable::load(&table).unwrap();
    assert_eq!(loaded.region.bounds, vec![20]);
    let copy = dir.path().join("copy.bin");
    loaded.save(&copy).unwrap();
    assert_eq!(fs::read(&table).unwrap(), fs::read(&copy).unwrap());
}

#[test]
fn checkpoints_refuse_foreign_configs_but_tolerate_eval_changes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = load(dir.path(), LM_CONFIG);
    let out = dir.path().join("run");
    commands::cmd_train(&cfg, &out).unwrap();
    let ckpt = out.join("checkpoint.bin");

    // A different seed is a different training run.
    let foreign = load(dir.path(), &LM_CONFIG.replace("seed = 3", "seed = 4"));
    let err = commands::cmd_eval(&foreign, &ckpt, None, None, &dir.path().join("x.csv"));
    assert!(
        matches!(err, Err(SeqPeError::ContainerMismatch(_))),
        "foreign checkpoint accepted: {err:?}"
    );

    // Evaluation settings do not touch the trained parameters, so the
    // fingerprint tolerates them.
    let retuned = load(dir.path(), &LM_CONFIG.replace("tokens = 600", "tokens = 900"));
    commands::cmd_eval(&retuned, &ckpt, None, None, &dir.path().join("y.csv")).unwrap();
}

#[test]
fn heatmaps_are_symmetric_dot_product_matrices() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = load(dir.path(), LM_CONFIG);
    let out = dir.path().join("run");
    commands::cmd_train(&cfg, &out).unwrap();
    let maps = dir.path().join("maps");
    commands::cmd_heatmap(&cfg, &out.join("checkpoint.bin"), None, None, None, &maps).unwrap();
    let text = fs::read_to_string(maps.join("heatmap.csv")).unwrap();
    let matrix: Vec<Vec<f64>> = text
        .lines()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(matrix.len(), 12);
    for row in &matrix {
        assert_eq!(row.len(), 12);
    }
    for i in 0..12 {
        for j in 0..12 {
            assert_eq!(matrix[i][j].to_bits(), matrix[j][i].to_bits(), "({i},{j})");
        }
    }
}

#[test]
fn gradcheck_rejects_wide_models() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = load(dir.path(), &LM_CONFIG.replace("d_model = 32", "d_model = 64"));
    let err = commands::cmd_gradcheck(&cfg, 1, None);
    assert!(
        matches!(err, Err(SeqPeError::ConfigInvalid(ref m)) if m.contains("32")),
        "wide model accepted: {err:?}"
    );
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_seqpe"))
}

#[test]
fn the_binary_distinguishes_config_and_numeric_failures() {
    // Missing config: exit 1.
    let out = bin()
        .args(["train", "--config", "/definitely/not/here.toml"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));

    // A sabotaged gradient check is a numeric failure: exit 2.
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(
        dir.path(),
        &LM_CONFIG
            .replace("d_model = 32", "d_model = 16")
            .replace("alpha = 0.1", "alpha = 0.0")
            .replace("beta = 0.1", "beta = 0.0"),
    );
    let out = bin()
        .args(["gradcheck", "--config"])
        .arg(&path)
        .args(["--sabotage", "embed.weight:0"])
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(2),
        "stdout: {} stderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );

    // The same invocation without sabotage passes: exit 0.
    let out = bin()
        .args(["gradcheck", "--config"])
        .arg(&path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn help_and_version_exit_zero_but_unknown_commands_do_not() {
    assert_eq!(bin().arg("--help").output().unwrap().status.code(), Some(0));
    assert_eq!(bin().arg("--version").output().unwrap().status.code(), Some(0));
    assert_eq!(bin().arg("frobnicate").output().unwrap().status.code(), Some(1));
    assert_eq!(bin().output().unwrap().status.code(), Some(1));
}
