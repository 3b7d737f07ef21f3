//! Black-box tests of the `cellsearch` binary: exit codes, artifacts,
//! determinism of the primary outputs.

use std::path::Path;
use std::process::{Command, Output};

use cellsearch_audio::wav::write_pcm16;
use cellsearch_core::genotype::{parse_genotype, serialize_genotype, Genotype};
use cellsearch_core::ops::{OpKind, OpSet};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cellsearch"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).env_remove("CELLSEARCH_DATA").output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).to_string()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).to_string()
}

fn toy_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join("toy.toml");
    let body = format!(
        r#"
seed = 0
op_set = "nas2"
synthetic = true

[search]
epochs = 2
batch_size = 8
w_lr = 0.05
alpha_lr = 0.003

[supernet]
num_cells = 1
init_channels = 4
num_classes = 3

[plan]
depth = 2
channels = 4

[final_train]
epochs = 1

[synthetic_data]
classes = 3
train = 24
val = 24
test = 24
feat_h = 20
feat_w = 12
noise = 0.4
{extra}
"#
    );
    std::fs::write(&path, body).unwrap();
    path
}

#[test]
fn search_produces_parseable_genotype_and_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let config = toy_config(dir.path(), "");
    let out_dir = dir.path().join("run");
    let out = run(&["search", "--config", config.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));

    let genotype_text = std::fs::read_to_string(out_dir.join("best.genotype")).unwrap();
    let genotype = parse_genotype(&genotype_text).unwrap();
    assert_eq!(genotype.op_set, OpSet::Nas2);

    let metrics = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,train_loss,val_loss,val_acc,alpha_entropy,lr"));
    assert_eq!(metrics.lines().count(), 3, "{metrics}");

    // the snapshot reparses to the identical byte stream
    let snapshot = std::fs::read_to_string(out_dir.join("config.toml")).unwrap();
    let reparsed: cellsearch_cli::config::RunConfig = toml::from_str(&snapshot).unwrap();
    assert_eq!(reparsed.snapshot(), snapshot);
    assert!(out_dir.join("search_epoch2.ckpt").exists());
}

#[test]
fn search_is_deterministic_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let config = toy_config(dir.path(), "");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out_dir in [&a, &b] {
        let out =
            run(&["search", "--config", config.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    }
    let ga = std::fs::read(a.join("best.genotype")).unwrap();
    let gb = std::fs::read(b.join("best.genotype")).unwrap();
    assert_eq!(ga, gb);
}

#[test]
fn missing_data_root_exits_2_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let out = run(&["search", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("data_root"), "stderr: {}", stderr(&out));
}

#[test]
fn missing_out_dir_exits_2() {
    let out = run(&["search", "--synthetic"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("out_dir"), "stderr: {}", stderr(&out));
}

#[test]
fn locked_run_directory_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let config = toy_config(dir.path(), "");
    let out_dir = dir.path().join("run");
    std::fs::create_dir_all(&out_dir).unwrap();
    std::fs::write(out_dir.join(".lock"), b"").unwrap();
    let out = run(&["search", "--config", config.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("locked"), "stderr: {}", stderr(&out));
}

fn write_genotype(dir: &Path, op_set: OpSet) -> std::path::PathBuf {
    let path = dir.join("cells.genotype");
    let g = Genotype::uniform(op_set, OpKind::DilConv3);
    std::fs::write(&path, serialize_genotype(&g)).unwrap();
    path
}

#[test]
fn train_writes_report_model_and_consistent_params() {
    let dir = tempfile::tempdir().unwrap();
    let config = toy_config(dir.path(), "");
    let genotype = write_genotype(dir.path(), OpSet::Nas2);
    let out_dir = dir.path().join("run");
    let out = run(&[
        "train",
        "--genotype",
        genotype.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));

    let report = std::fs::read_to_string(out_dir.join("report.txt")).unwrap();
    assert!(report.contains("test_accuracy="), "{report}");
    assert!(report.contains("parameters="), "{report}");
    assert!(out_dir.join("model.ckpt").exists());
    assert!(out_dir.join("model.plan.toml").exists());

    // report parameter count equals the params command's total
    let reported: usize = report
        .lines()
        .find_map(|l| l.strip_prefix("parameters="))
        .unwrap()
        .parse()
        .unwrap();
    let params_out = run(&[
        "params",
        "--genotype",
        genotype.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
    ]);
    assert_eq!(params_out.status.code(), Some(0));
    let text = stdout(&params_out);
    let total: usize = text
        .lines()
        .find_map(|l| l.strip_prefix("total_params="))
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(total, reported);
}

#[test]
fn train_is_deterministic_and_depth_12_lists_four_reductions() {
    let dir = tempfile::tempdir().unwrap();
    let config = toy_config(dir.path(), "");
    let genotype = write_genotype(dir.path(), OpSet::Nas2);
    let accuracy_of = |out_dir: &Path| -> String {
        let out = run(&[
            "train",
            "--genotype",
            genotype.to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--depth",
            "12",
        ]);
        assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
        let report = std::fs::read_to_string(out_dir.join("report.txt")).unwrap();
        let reductions = report.lines().filter(|l| l.ends_with(": reduction")).count();
        assert_eq!(reductions, 4, "{report}");
        report.lines().find(|l| l.starts_with("test_accuracy=")).unwrap().to_string()
    };
    let a = accuracy_of(&dir.path().join("a"));
    let b = accuracy_of(&dir.path().join("b"));
    assert_eq!(a, b);
}

#[test]
fn params_total_grows_with_channels() {
    let dir = tempfile::tempdir().unwrap();
    let genotype = write_genotype(dir.path(), OpSet::Nas1);
    let total_at = |channels: &str| -> usize {
        let out = run(&["params", "--genotype", genotype.to_str().unwrap(), "--channels", channels]);
        assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
        stdout(&out)
            .lines()
            .find_map(|l| l.strip_prefix("total_params="))
            .unwrap()
            .parse()
            .unwrap()
    };
    assert!(total_at("36") > total_at("16"));
}

#[test]
fn params_rejects_bad_genotype_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.genotype");
    std::fs::write(&path, "genotype v1\nop_set nas1\nnormal 2 wavelet_conv 0 identity 1\n").unwrap();
    let out = run(&["params", "--genotype", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("wavelet_conv"), "stderr: {}", stderr(&out));
}

#[test]
fn features_of_silence_are_101_identical_rows() {
    let dir = tempfile::tempdir().unwrap();
    let wav = dir.path().join("silence.wav");
    write_pcm16(&wav, &vec![0.0; 16000], 16000).unwrap();
    let csv = dir.path().join("features.csv");
    let out = run(&["features", "--wav", wav.to_str().unwrap(), "--out", csv.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let text = std::fs::read_to_string(&csv).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 101);
    assert_eq!(rows[0].split(',').count(), 40);
    assert!(rows.iter().all(|&r| r == rows[0]));
}

#[test]
fn features_rejects_malformed_wav_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let wav = dir.path().join("junk.wav");
    std::fs::write(&wav, b"this is not audio").unwrap();
    let csv = dir.path().join("features.csv");
    let out = run(&["features", "--wav", wav.to_str().unwrap(), "--out", csv.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("RIFF"), "stderr: {}", stderr(&out));
}

#[test]
fn eval_reports_accuracy_and_balanced_confusion() {
    let dir = tempfile::tempdir().unwrap();
    let config = toy_config(dir.path(), "");
    let genotype = write_genotype(dir.path(), OpSet::Nas2);
    let train_dir = dir.path().join("train");
    let out = run(&[
        "train",
        "--genotype",
        genotype.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--out",
        train_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));

    let eval_dir = dir.path().join("eval");
    let model = train_dir.join("model.ckpt");
    let out = run(&[
        "eval",
        "--model",
        model.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("test_accuracy="), "{}", stdout(&out));

    // confusion rows sum to the per-class test counts (24 samples, 3 classes)
    let eval_text = std::fs::read_to_string(eval_dir.join("eval.txt")).unwrap();
    let rows: Vec<&str> = eval_text.lines().filter(|l| l.starts_with("class")).collect();
    assert_eq!(rows.len(), 3);
    for row in rows {
        let sum: usize = row.split(',').skip(1).map(|v| v.parse::<usize>().unwrap()).sum();
        assert_eq!(sum, 8, "{row}");
    }
}

#[test]
fn eval_of_untrained_model_sits_at_chance() {
    let dir = tempfile::tempdir().unwrap();
    let config = toy_config(dir.path(), "");
    // epochs = 0: fresh random weights straight to the checkpoint
    let text = std::fs::read_to_string(&config).unwrap().replace("epochs = 1", "epochs = 0");
    std::fs::write(&config, text).unwrap();
    let genotype = write_genotype(dir.path(), OpSet::Nas2);
    let train_dir = dir.path().join("train");
    let out = run(&[
        "train",
        "--genotype",
        genotype.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--out",
        train_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let report = std::fs::read_to_string(train_dir.join("report.txt")).unwrap();
    let acc: f64 = report
        .lines()
        .find_map(|l| l.strip_prefix("test_accuracy="))
        .unwrap()
        .parse()
        .unwrap();
    // 3 balanced classes: chance is 1/3
    assert!((acc - 1.0 / 3.0).abs() < 0.25, "accuracy {acc}");
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = run(&["search", "--frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}
