use std::fs;
use std::path::Path;
use std::process::Command;

use rsmgan::detect::ScoreMethod;
use rsmgan::experiment::{self, ExperimentConfig, RunPaths, FAILED_MARKER};
use rsmgan::plot;

const TINY: &str = r#"
name = "tiny"
seeds = [3]
[dataset]
n_series = 4
length = 2000
validation_anomalies = 1
test_anomalies = 2
[mcm]
windows = [5, 10]
[network]
epochs = 2
batch_size = 16
conv_layers = [
  { channels = 4, kernel = 3, stride = 1 },
  { channels = 4, kernel = 3, stride = 2 },
]
critic_channels = [4, 4, 4]
"#;

fn tiny(out: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::from_toml(TINY).unwrap();
    c.output_dir = out.to_path_buf();
    c
}

fn read(path: impl AsRef<Path>) -> String {
    fs::read_to_string(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

#[test]
fn reruns_are_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = experiment::run_experiment(&tiny(&dir.path().join("a"))).unwrap();
    let b = experiment::run_experiment(&tiny(&dir.path().join("b"))).unwrap();
    assert_eq!(a.children[0].mean, b.children[0].mean);
    for method in ScoreMethod::ALL {
        let pa = RunPaths::for_seed(&a.root, 3);
        let pb = RunPaths::for_seed(&b.root, 3);
        assert_eq!(read(pa.eval_json(method)), read(pb.eval_json(method)));
        assert_eq!(read(pa.trace_csv(method)), read(pb.trace_csv(method)));
    }
    assert_eq!(a.manifest.config_hash, tiny(&a.root).hash().unwrap());
    assert!(!a.root.join(FAILED_MARKER).exists());
}

#[test]
fn sweep_writes_one_child_per_combination() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny(dir.path());
    config.sweep.train_anomalies = vec![0, 1];
    config.sweep.noise_scale = vec![0.05];
    let summary = experiment::run_experiment(&config).unwrap();
    let labels: Vec<_> = summary.children.iter().map(|c| c.label.as_str()).collect();
    assert_eq!(labels.len(), 2);
    assert_ne!(labels[0], labels[1]);
    for child in &summary.children {
        assert!(child.dir.join("mean.json").exists());
        assert!(child.dir.join("seed-3").join("dataset").join("labels.json").exists());
    }

    let csv = read(dir.path().join("results.csv"));
    let lines: Vec<_> = csv.lines().collect();
    assert!(lines[0].starts_with("run,method,seeds,precision"));
    assert_eq!(lines.len(), 1 + 2 * ScoreMethod::ALL.len());
    assert_eq!(summary.rows().len(), 2 * ScoreMethod::ALL.len());

    let train_labels = |child: usize| -> usize {
        let path = summary.children[child].dir.join("seed-3/dataset/labels.json");
        let labels: Vec<serde_json::Value> = serde_json::from_str(&read(path)).unwrap();
        labels.iter().filter(|l| l["split"] == "train").count()
    };
    assert_eq!((train_labels(0), train_labels(1)), (0, 1));

    let manifest: serde_json::Value = serde_json::from_str(&read(dir.path().join("manifest.json"))).unwrap();
    assert_eq!(manifest["runs"].as_array().unwrap().len(), 2);
    assert_eq!(manifest["device"], "cpu");
    let saved = ExperimentConfig::from_toml(&read(dir.path().join("config.toml"))).unwrap();
    assert_eq!(saved, config);
}

#[test]
fn plots_carry_trace_scores_and_label_windows() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny(dir.path());
    experiment::run_experiment(&config).unwrap();
    let paths = RunPaths::for_seed(dir.path(), 3);
    let written = plot::emit_plots(&paths, config.mcm.step).unwrap();
    assert_eq!(written.len(), ScoreMethod::ALL.len());
    for method in ScoreMethod::ALL {
        let svg = read(paths.plots_dir().join(format!("{method}.svg")));
        let trace = experiment::load_trace(&paths, method).unwrap();
        let want: Vec<f64> = trace.scores.iter().map(|&s| s as f64).collect();
        assert_eq!(plot::plotted_values(&svg).unwrap(), want);
        assert_eq!(plot::shaded_windows(&svg), config.dataset.test_anomalies);
    }
}

#[test]
fn failures_leave_a_marker() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("data.csv");
    let labels = dir.path().join("labels.json");
    fs::write(&csv, "timestamp,a\nnot-a-time,oops\n").unwrap();
    fs::write(&labels, "[]").unwrap();
    let mut config = tiny(&dir.path().join("out"));
    config.external = Some(experiment::ExternalData {
        csv,
        labels,
        holidays: None,
    });
    let err = experiment::run_experiment(&config).unwrap_err();
    let seed_marker = read(dir.path().join("out/seed-3").join(FAILED_MARKER));
    assert_eq!(seed_marker.trim(), err.to_string());
    assert!(dir.path().join("out").join(FAILED_MARKER).exists());
}

#[test]
fn unknown_config_keys_are_rejected() {
    assert!(ExperimentConfig::from_toml("[network]\nepoch = 3\n").is_err());
    assert!(ExperimentConfig::from_toml("[mcm]\nwindows = [10, 5]\n")
        .unwrap()
        .validate()
        .is_err());
}

fn cli(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_rsmgan"))
        .args(args)
        .env_remove("RSMGAN_DEVICE")
        .env("RUST_LOG", "warn")
        .current_dir(dir)
        .output()
        .unwrap()
}

#[test]
fn cli_stages_match_run_all() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    for stage in ["generate", "featurize", "train", "detect", "rootcause"] {
        let out = cli(dir.path(), &["-c", "tiny.toml", "-o", "staged", stage]);
        assert!(out.status.success(), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out = cli(dir.path(), &["-c", "tiny.toml", "-o", "staged", "evaluate"]);
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.lines().count(), ScoreMethod::ALL.len());

    let out = cli(dir.path(), &["-c", "tiny.toml", "-o", "whole", "run-all"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for method in ScoreMethod::ALL {
        let staged = RunPaths::for_seed(&dir.path().join("staged"), 3);
        let whole = RunPaths::for_seed(&dir.path().join("whole"), 3);
        assert_eq!(read(staged.eval_json(method)), read(whole.eval_json(method)));
    }

    let out = cli(dir.path(), &["-c", "tiny.toml", "-o", "whole", "plot"]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), ScoreMethod::ALL.len());
}

#[test]
fn cli_rejects_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(dir.path(), &["--device", "cuda", "generate"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("cuda"));

    let out = cli(dir.path(), &["-c", "missing.toml", "generate"]);
    assert!(!out.status.success());

    // Training before generating fails and leaves a marker in the seed dir.
    let out = cli(dir.path(), &["-o", "empty", "train"]);
    assert!(!out.status.success());
    assert!(dir.path().join("empty/seed-1").join(FAILED_MARKER).exists());
}
