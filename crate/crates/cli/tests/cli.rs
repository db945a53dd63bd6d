use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mil_core::experiment::{read_metrics, ExperimentConfig, MaskReport};

fn mil(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mil"))
        .args(args)
        .current_dir(dir)
        .env_remove("MIL_CACHE_DIR")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = mil(dir, args);
    assert!(
        out.status.success(),
        "mil {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const SMALL: [&str; 8] = ["--env", "distractor-regression", "--n-train", "20", "--max-epochs", "100", "--test-episodes", "3"];

#[test]
fn stub_table_reproduces_hand_trace() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(dir.path(), &["run-mil", "--stub-losses", "11=1.0,01=0.2,10=0.5,00=0.9", "-o", "out"]);
    assert!(stdout.contains("mask 01 l_out 0.2 after 2 sweeps"), "{stdout}");
    let metrics = read_metrics(&fs::read_to_string(dir.path().join("out/metrics.csv")).unwrap()).unwrap();
    let chosen: Vec<u8> = metrics.rows.iter().filter_map(|r| r.chosen).collect();
    assert_eq!(chosen, vec![0, 1, 0, 1]);
}

#[test]
fn gen_data_counts_refusal_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["gen-data", "--env", "corridor-two-stage", "--aug", "--seeds", "3", "-o", "a"];
    ok(dir.path(), &args);
    let seed = dir.path().join("a/seed-3");
    let count = |f: &str| trajectory_lines(&seed.join(f));
    assert_eq!(
        [count("train.jsonl"), count("val.jsonl"), count("test.jsonl"), count("augmented.jsonl")],
        [100, 10, 50, 60]
    );

    let refused = mil(dir.path(), &args);
    assert!(!refused.status.success());
    assert!(String::from_utf8_lossy(&refused.stderr).contains("--force"));

    ok(dir.path(), &["gen-data", "--env", "corridor-two-stage", "--aug", "--seeds", "3", "-o", "b"]);
    for f in ["train.jsonl", "val.jsonl", "test.jsonl", "augmented.jsonl", "stats.json", "config.toml"] {
        assert_eq!(fs::read(seed.join(f)).unwrap(), fs::read(dir.path().join("b/seed-3").join(f)).unwrap(), "{f}");
    }
    let mut forced = args.to_vec();
    forced.push("--force");
    ok(dir.path(), &forced);
}

/// Trajectory lines of a dataset file, excluding the header record.
fn trajectory_lines(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count() - 1
}

#[test]
fn runs_are_byte_identical_and_flags_beat_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("exp.toml"), "n_train = 7\nseeds = [0, 1]\n[train]\nmax_epochs = 50\n").unwrap();
    let base = ["run-mil", "--config", "exp.toml", "--env", "distractor-regression", "--n-train", "20", "--test-episodes", "3"];
    let run = |out: &'static str| {
        let mut args = base.to_vec();
        args.extend(["-o", out]);
        ok(dir.path(), &args);
        fs::read(dir.path().join(out).join("metrics.csv")).unwrap()
    };
    let a = run("a");
    let b = run("b");
    assert_eq!(a, b);

    let file = read_metrics(std::str::from_utf8(&a).unwrap()).unwrap();
    let config: ExperimentConfig = serde_json::from_str(&file.config_json).unwrap();
    assert_eq!(config.n_train, 20, "flag overrides file");
    assert_eq!(config.train.max_epochs, 50, "file overrides default");
    assert_eq!(config.seeds, vec![0, 1]);
    assert_eq!(config.n_val, ExperimentConfig::default().n_val);
    assert!(!file.build_id.is_empty());
    assert!(dir.path().join("a/policy_seed1.json").exists());
}

#[test]
fn reversed_order_reports_canonical_names() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["run-mil", "--seeds", "0", "--modality-order", "noise_b,noise_a,shifted_copy,signal", "-o", "out"];
    args.extend(SMALL);
    ok(dir.path(), &args);
    let text = fs::read_to_string(dir.path().join("out/mask_report_seed0.json")).unwrap();
    let report: MaskReport = serde_json::from_str(&text).unwrap();
    let names: Vec<&str> = report.modalities.iter().map(|m| m.name.as_str()).collect();
    assert_eq!(names, ["signal", "shifted_copy", "noise_a", "noise_b"]);
    assert_eq!(report.history[0].modality, "noise_b");
    for (i, m) in report.modalities.iter().enumerate() {
        assert_eq!(m.bit, report.mask.get(i));
    }
}

#[test]
fn baselines_aggregate_matches_rows_and_plot_renders() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["run-baselines", "--seeds", "0,1", "--k-masks", "2", "-o", "out"];
    args.extend(SMALL);
    ok(dir.path(), &args);
    let file = read_metrics(&fs::read_to_string(dir.path().join("out/baselines.csv")).unwrap()).unwrap();
    let methods: Vec<&str> = file.rows.iter().filter(|r| r.row_kind == "aggregate").map(|r| r.method.as_str()).collect();
    assert!(methods.len() >= 6, "{methods:?}");
    for agg in file.rows.iter().filter(|r| r.row_kind == "aggregate") {
        let vals: Vec<f64> = file
            .rows
            .iter()
            .filter(|r| r.row_kind == "method" && r.method == agg.method)
            .map(|r| r.test_metric.unwrap())
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64;
        assert!((agg.mean.unwrap() - mean).abs() <= 1e-12 * mean.abs().max(1.0), "{}", agg.method);
        assert!((agg.std.unwrap() - var.sqrt()).abs() <= 1e-12 * var.sqrt().max(1.0), "{}", agg.method);
    }
    let stdout = ok(dir.path(), &["plot", "out/baselines.csv", "-o", "plots"]);
    assert!(stdout.contains("methods.svg"));
    let svg = fs::read_to_string(dir.path().join("plots/methods.svg")).unwrap();
    assert!(svg.contains("bc_nomask") && svg.contains("build: "));
}

#[test]
fn brute_force_ranks_all_nonempty_masks_and_flags_mil() {
    let dir = tempfile::tempdir().unwrap();
    let mut mil_args = vec!["run-mil", "--seeds", "0", "-o", "out"];
    mil_args.extend(SMALL);
    ok(dir.path(), &mil_args);
    let mut args = vec!["brute-force", "--seeds", "0", "-o", "out", "--mil-report", "out/mask_report_seed0.json"];
    args.extend(SMALL);
    let stdout = ok(dir.path(), &args);
    assert!(stdout.contains("MIL mask"), "{stdout}");
    let file = read_metrics(&fs::read_to_string(dir.path().join("out/brute_force.csv")).unwrap()).unwrap();
    let ranked: Vec<_> = file.rows.iter().filter(|r| r.row_kind == "ranked").collect();
    assert_eq!(ranked.len(), 15);
    let losses: Vec<f64> = ranked.iter().map(|r| r.l_out.unwrap()).collect();
    assert!(losses.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(ranked[0].mask_bits.as_deref().unwrap().as_bytes()[1], b'0', "top mask drops the shifted copy");
}

#[test]
fn saved_data_gives_the_same_run_as_in_memory_data() {
    let dir = tempfile::tempdir().unwrap();
    let mut gen = vec!["gen-data", "--seeds", "2", "-o", "data"];
    gen.extend(SMALL);
    ok(dir.path(), &gen);
    let mut from_disk = vec!["run-mil", "--seeds", "2", "--data", "data", "-o", "disk"];
    from_disk.extend(SMALL);
    ok(dir.path(), &from_disk);
    let mut in_memory = vec!["run-mil", "--seeds", "2", "-o", "mem"];
    in_memory.extend(SMALL);
    ok(dir.path(), &in_memory);
    assert_eq!(
        fs::read(dir.path().join("disk/metrics.csv")).unwrap(),
        fs::read(dir.path().join("mem/metrics.csv")).unwrap()
    );
}

#[test]
fn gradcheck_exit_code_reflects_result() {
    let dir = tempfile::tempdir().unwrap();
    let pass = mil(dir.path(), &["gradcheck", "--cases", "8", "--report", "r.json"]);
    assert!(pass.status.success());
    assert!(String::from_utf8_lossy(&pass.stdout).contains("max rel err"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(report["cases"].as_array().unwrap().len(), 8);
    let fail = mil(dir.path(), &["gradcheck", "--cases", "4", "--corrupt-analytic"]);
    assert!(!fail.status.success());
}

#[test]
fn invalid_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = mil(dir.path(), &["run-mil", "--env", "nowhere"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown environment"));
    fs::write(dir.path().join("bad.toml"), "n_trian = 3\n").unwrap();
    let out = mil(dir.path(), &["run-mil", "--config", "bad.toml"]);
    assert!(!out.status.success());
}
