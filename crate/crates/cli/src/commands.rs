use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use mil_core::baselines::{brute_force_oracle, TestMetric};
use mil_core::bilevel::{permuted_run, MaskEvaluator, StubLossTable, TrainingEvaluator};
use mil_core::datasets::{DemoDataset, NormStats, Role};
use mil_core::dynamics::AugmentedValSets;
use mil_core::experiment::{
    aggregate, build_bundle, run_baselines_seed, run_mil_seed, ExperimentConfig, MaskReport, MetricsRow,
    MetricsWriter, SeedData,
};
use mil_core::gradcheck::{run_suite, GradcheckConfig};
use mil_core::policy::{MaskVector, PolicyParams};
use serde::{Deserialize, Serialize};

use crate::args::{BruteForceArgs, GenDataArgs, GradcheckArgs, RunArgs, RunMilArgs};

pub const BUILD_ID: &str = env!("MIL_BUILD_ID");
pub const CHECKPOINT_FORMAT: &str = "mil-policy/1";

const TRAIN_FILE: &str = "train.jsonl";
const VAL_FILE: &str = "val.jsonl";
const TEST_FILE: &str = "test.jsonl";
const AUG_FILE: &str = "augmented.jsonl";
const STATS_FILE: &str = "stats.json";
const CONFIG_FILE: &str = "config.toml";

pub fn seed_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed-{seed}"))
}

/// Final policy of one MIL run with everything needed to act in the
/// environment: normalization stats, mask and provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub build: String,
    pub seed: u64,
    pub mask: MaskVector,
    pub stats: NormStats,
    pub params: PolicyParams,
    pub config: ExperimentConfig,
}

pub fn gen_data(args: &GenDataArgs) -> Result<()> {
    let config = args.config.resolve()?;
    let mut names = vec![TRAIN_FILE, VAL_FILE, TEST_FILE, STATS_FILE, CONFIG_FILE];
    if args.aug {
        names.push(AUG_FILE);
    }
    if !args.force {
        for &s in &config.seeds {
            if let Some(p) = names.iter().map(|n| seed_dir(&args.out, s).join(n)).find(|p| p.exists()) {
                bail!("{} already exists; pass --force to overwrite", p.display());
            }
        }
    }
    let config_text = format!("# build: {BUILD_ID}\n{}", config.to_toml_string());
    for &s in &config.seeds {
        let dir = seed_dir(&args.out, s);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let data = SeedData::generate(&config, s)?;
        data.train_raw.save(&dir.join(TRAIN_FILE))?;
        data.val_raw.save(&dir.join(VAL_FILE))?;
        data.test_raw.save(&dir.join(TEST_FILE))?;
        data.stats.save(&dir.join(STATS_FILE))?;
        fs::write(dir.join(CONFIG_FILE), &config_text)?;
        let mut line = format!(
            "seed {s}: {} train, {} val, {} test trajectories",
            data.train_raw.len(),
            data.val_raw.len(),
            data.test_raw.len()
        );
        if args.aug {
            let aug = data.augmented(&config)?;
            aug.combined()?.save(&dir.join(AUG_FILE))?;
            line += &format!(", {} augmented ({} success, {} failure)", aug.len(), aug.success.len(), aug.failure.len());
        }
        println!("{line} -> {}", dir.display());
    }
    Ok(())
}

fn load_role(dir: &Path, name: &str, role: Role) -> Result<DemoDataset> {
    let path = dir.join(name);
    let ds = DemoDataset::load(&path).with_context(|| format!("loading {}", path.display()))?;
    ensure!(ds.role == role, "{} holds {} data, expected {role}", path.display(), ds.role);
    Ok(ds)
}

/// Loads one seed written by `gen-data`, or generates it when no data
/// directory is given.
pub fn seed_data(config: &ExperimentConfig, data_dir: Option<&Path>, seed: u64) -> Result<SeedData> {
    let Some(root) = data_dir else {
        return Ok(SeedData::generate(config, seed)?);
    };
    let dir = seed_dir(root, seed);
    let train = load_role(&dir, TRAIN_FILE, Role::Train)?;
    let val = load_role(&dir, VAL_FILE, Role::Val)?;
    let test = load_role(&dir, TEST_FILE, Role::Test)?;
    let aug_path = dir.join(AUG_FILE);
    let aug = if aug_path.exists() {
        Some(AugmentedValSets::from_combined(&load_role(&dir, AUG_FILE, Role::Augmented)?)?)
    } else {
        None
    };
    let data = SeedData::from_raw(config.env_spec()?, seed, train, val, test, aug)?;
    let stats_path = dir.join(STATS_FILE);
    if stats_path.exists() {
        let saved = NormStats::load(&stats_path)?;
        ensure!(
            saved.fingerprint() == data.stats.fingerprint(),
            "{} does not match the training data next to it",
            stats_path.display()
        );
    }
    Ok(data)
}

/// Runs `work` per seed, `jobs` seeds at a time, and hands results to `sink`
/// in seed order so that outputs do not depend on scheduling.
fn per_seed<T: Send>(
    seeds: &[u64],
    jobs: usize,
    work: impl Fn(u64) -> Result<T> + Sync,
    mut sink: impl FnMut(u64, T) -> Result<()>,
) -> Result<()> {
    for chunk in seeds.chunks(jobs.max(1)) {
        let results: Vec<Result<T>> = if chunk.len() == 1 {
            vec![work(chunk[0])]
        } else {
            std::thread::scope(|scope| {
                let work = &work;
                let handles: Vec<_> = chunk.iter().map(|&s| scope.spawn(move || work(s))).collect();
                handles.into_iter().map(|h| h.join().expect("worker thread panicked")).collect()
            })
        };
        for (&s, r) in chunk.iter().zip(results) {
            sink(s, r.with_context(|| format!("seed {s}"))?)?;
        }
    }
    Ok(())
}

fn metrics_writer(path: &Path, config: &ExperimentConfig) -> Result<MetricsWriter<BufWriter<File>>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(MetricsWriter::new(BufWriter::new(file), BUILD_ID, config)?)
}

fn kept_names(names: &[&str], mask: &MaskVector) -> String {
    let kept: Vec<&str> = names.iter().enumerate().filter(|(i, _)| mask.get(*i) == 1).map(|(_, n)| *n).collect();
    if kept.is_empty() {
        "none".into()
    } else {
        kept.join(", ")
    }
}

pub fn run_mil(args: &RunMilArgs) -> Result<()> {
    let run = &args.run;
    let config = run.config.resolve()?;
    if let Some(table) = &args.stub_losses {
        return run_stub(run, &config, table);
    }
    let cache = run.config.cache(&config)?;
    let mut writer = metrics_writer(&run.out.join("metrics.csv"), &config)?;
    per_seed(
        &config.seeds,
        run.jobs,
        |s| {
            let data = seed_data(&config, run.data.as_deref(), s)?;
            let result = run_mil_seed(&config, &data, &cache)?;
            Ok((data, result))
        },
        |s, (data, r)| {
            for row in MetricsRow::mil_rows(&data.env, &r) {
                writer.write(&row)?;
            }
            let report = MaskReport::new(BUILD_ID, &config, &data.env, &r);
            fs::write(run.out.join(format!("mask_report_seed{s}.json")), report.to_json())?;
            let checkpoint = Checkpoint {
                format: CHECKPOINT_FORMAT.into(),
                build: BUILD_ID.into(),
                seed: s,
                mask: r.outcome.mask.clone(),
                stats: data.stats.clone(),
                params: r.policy().clone(),
                config: config.clone(),
            };
            fs::write(run.out.join(format!("policy_seed{s}.json")), serde_json::to_string(&checkpoint)?)?;
            println!(
                "seed {s}: mask {} [{}] l_out {:.6e}, test {} {:.6}, {} sweeps",
                r.outcome.mask,
                kept_names(&data.env.schema().names(), &r.outcome.mask),
                r.outcome.l_out,
                r.metric,
                r.test_metric,
                r.outcome.state.sweep_count
            );
            Ok(())
        },
    )?;
    println!("wrote {}", run.out.display());
    Ok(())
}

/// Parses `bits=loss` pairs separated by commas.
pub fn parse_stub_losses(text: &str) -> Result<StubLossTable> {
    let pairs = text
        .split(',')
        .map(|pair| {
            let (bits, loss) = pair.split_once('=').with_context(|| format!("expected bits=loss, got {pair:?}"))?;
            let loss: f64 = loss.trim().parse().with_context(|| format!("bad loss in {pair:?}"))?;
            Ok((bits.trim(), loss))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StubLossTable::new(pairs)?)
}

fn run_stub(run: &RunArgs, config: &ExperimentConfig, table: &str) -> Result<()> {
    let stub = parse_stub_losses(table)?;
    let m = stub.num_modalities();
    let order: Vec<usize> = (0..m).collect();
    let outcome = permuted_run(&stub, &config.outer, &order)?;
    let names: Vec<String> = (0..m).map(|i| format!("m{i}")).collect();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut writer = metrics_writer(&run.out.join("metrics.csv"), config)?;
    for d in &outcome.state.history {
        writer.write(&MetricsRow::decision("stub", "mil_stub", 0, &names, d, 0.0))?;
        println!(
            "sweep {} bit {}: L(0) {} L(1) {} -> {} mask {}",
            d.sweep,
            d.bit,
            d.loss_zero(),
            d.loss_one(),
            d.chosen,
            d.mask
        );
    }
    writer.write(&MetricsRow {
        row_kind: "final".into(),
        method: "mil_stub".into(),
        env: "stub".into(),
        seed: Some(0),
        sweep: Some(outcome.state.sweep_count),
        mask_bits: Some(outcome.mask.to_string()),
        l_out: Some(outcome.l_out),
        ..Default::default()
    })?;
    println!("mask {} l_out {} after {} sweeps", outcome.mask, outcome.l_out, outcome.state.sweep_count);
    Ok(())
}

pub fn run_baselines(run: &RunArgs) -> Result<()> {
    let config = run.config.resolve()?;
    let cache = run.config.cache(&config)?;
    let metric = TestMetric::for_env(&config.env_spec()?);
    let mut writer = metrics_writer(&run.out.join("baselines.csv"), &config)?;
    let mut scores = Vec::new();
    per_seed(
        &config.seeds,
        run.jobs,
        |s| {
            let data = seed_data(&config, run.data.as_deref(), s)?;
            Ok(run_baselines_seed(&config, &data, &cache)?)
        },
        |s, seed_scores| {
            for score in seed_scores {
                writer.write(&MetricsRow::method(&config.env, metric, &score))?;
                scores.push(score);
            }
            println!("seed {s} done");
            Ok(())
        },
    )?;
    let results = aggregate(&scores, metric)?;
    println!("{:<20} {:>3} {:>14} {:>12}", "method", "n", format!("mean {metric}"), "std");
    for r in &results {
        writer.write(&MetricsRow::aggregate(&config.env, r))?;
        let std = r.std.map(|s| format!("{s:.6}")).unwrap_or_else(|| "-".into());
        println!("{:<20} {:>3} {:>14.6} {:>12}", r.method, r.runs.len(), r.mean, std);
        if let Some(note) = &r.note {
            println!("  note: {note}");
        }
    }
    println!("wrote {}", run.out.join("baselines.csv").display());
    Ok(())
}

pub fn brute_force(args: &BruteForceArgs) -> Result<()> {
    let run = &args.run;
    let config = run.config.resolve()?;
    let cache = run.config.cache(&config)?;
    let kind = config.resolved_loss_kind();
    let metric = TestMetric::for_env(&config.env_spec()?);
    let mut reports = BTreeMap::new();
    for path in &args.mil_reports {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let report: MaskReport = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        ensure!(report.env == config.env, "{} is a {} run, not {}", path.display(), report.env, config.env);
        reports.insert(report.seed, report);
    }
    let mut writer = metrics_writer(&run.out.join("brute_force.csv"), &config)?;
    per_seed(
        &config.seeds,
        run.jobs,
        |s| {
            let data = seed_data(&config, run.data.as_deref(), s)?;
            let (bundle, _) = build_bundle(&config, &data, kind)?;
            let train_config = config.train_for_seed(s);
            let evaluator = TrainingEvaluator::new(&data.train, &bundle, &train_config, kind, &cache)?;
            let harness = data.harness(&config)?;
            Ok(brute_force_oracle(&evaluator, args.include_empty, Some(&harness))?)
        },
        |s, ranked| {
            for (rank, r) in ranked.iter().enumerate() {
                writer.write(&MetricsRow::ranked(&config.env, s, rank + 1, metric, r))?;
            }
            let best = &ranked[0];
            println!("seed {s}: best mask {} l_out {:.6e} ({} masks ranked)", best.mask, best.l_out, ranked.len());
            if let Some(report) = reports.get(&s) {
                let rank = ranked.iter().position(|r| r.mask == report.mask).map(|p| p + 1);
                match rank {
                    Some(1) => println!("  MIL mask {} is the L_out minimizer", report.mask),
                    Some(k) => println!("  MIL mask {} ranks {k}, not the L_out minimizer", report.mask),
                    None => println!("  MIL mask {} is not among the ranked masks", report.mask),
                }
            }
            Ok(())
        },
    )?;
    println!("wrote {}", run.out.join("brute_force.csv").display());
    Ok(())
}

pub fn gradcheck(args: &GradcheckArgs) -> Result<ExitCode> {
    let config = GradcheckConfig {
        cases: args.cases,
        step: args.step,
        tolerance: args.tolerance,
        seed: args.seed,
        corrupt_analytic: args.corrupt_analytic,
    };
    let report = run_suite(&config)?;
    for case in &report.cases {
        println!(
            "{} {}: {} entries, max rel err {:.3e}",
            if case.passed { "ok  " } else { "FAIL" },
            case.label,
            case.num_checked,
            case.max_rel_error
        );
    }
    let failed = report.cases.iter().filter(|c| !c.passed).count();
    println!(
        "{} cases, {failed} failed, max rel err {:.3e} (tolerance {:e}, build {BUILD_ID})",
        report.cases.len(),
        report.max_rel_error(),
        config.tolerance
    );
    if let Some(path) = &args.report {
        fs::write(path, serde_json::to_string_pretty(&report)?).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
