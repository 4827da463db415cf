//! Subcommand implementations. Each one writes only below its output
//! directory and finishes with a `manifest.json` listing what it wrote.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde::Serialize;
use snnlr_core::carbon::{carbon_emission, emission_csv, emission_reduction, EmissionRow, PowerMode};
use snnlr_core::events::{generate_synthetic, load_events, split_dataset, EventSample};
use snnlr_core::schedule::{baseline_entry, build_schedule, exploration_grid, PolicyConfig};
use snnlr_core::trainer::{
    explore_grid, report_csv, report_text, speedup_report, train, Dataset, RunLog, SpeedupRow,
};

use crate::config::{ConfigErrors, ExperimentConfig};

/// Why a subcommand failed; maps onto the process exit code.
#[derive(Debug)]
pub enum Failure {
    Config(ConfigErrors),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(e) => write!(f, "{e}"),
            Failure::Runtime(e) => write!(f, "error: {e:#}"),
        }
    }
}

impl From<ConfigErrors> for Failure {
    fn from(e: ConfigErrors) -> Self {
        Failure::Config(e)
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

pub type CmdResult<T = ()> = Result<T, Failure>;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "SNNLR_OUT";

/// `--out`, then the config's `output_dir`, then `$SNNLR_OUT/<command>`,
/// then `snnlr-out/<command>`.
pub fn resolve_out(flag: Option<&Path>, cfg: Option<&ExperimentConfig>, command: &str) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = cfg.and_then(|c| c.output_dir.clone()) {
        return p;
    }
    let root = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("snnlr-out"));
    root.join(command)
}

/// Collects written files so the manifest can list them.
struct Output {
    root: PathBuf,
    files: Vec<String>,
}

impl Output {
    fn create(root: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Self { root: root.to_path_buf(), files: Vec::new() })
    }

    fn write(&mut self, rel: &str, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        self.files.push(rel.to_string());
        Ok(())
    }

    fn write_run(&mut self, stem: &str, log: &RunLog) -> anyhow::Result<()> {
        self.write(&format!("{stem}.json"), log.to_json()?)?;
        self.write(&format!("{stem}.csv"), log.to_csv())
    }

    fn finish<C: Serialize>(mut self, command: &str, seed: Option<u64>, config: &C) -> anyhow::Result<()> {
        self.files.sort();
        let manifest = Manifest { command, seed, files: &self.files, config };
        let json = serde_json::to_string_pretty(&manifest)?;
        fs::write(self.root.join("manifest.json"), json + "\n")?;
        Ok(())
    }
}

#[derive(Serialize)]
struct Manifest<'a, C: Serialize> {
    command: &'a str,
    seed: Option<u64>,
    files: &'a [String],
    config: &'a C,
}

fn load_samples(cfg: &ExperimentConfig) -> anyhow::Result<Vec<EventSample>> {
    match &cfg.dataset.path {
        Some(path) => {
            let samples = load_events(path).with_context(|| format!("loading {}", path.display()))?;
            let (w, h) = (cfg.dataset.width, cfg.dataset.height);
            if let Some(s) = samples.iter().find(|s| s.width != w || s.height != h) {
                return Err(anyhow!(
                    "dataset sample is {}x{} but the config expects {w}x{h}",
                    s.width,
                    s.height
                ));
            }
            Ok(samples)
        }
        None => Ok(generate_synthetic(cfg.seed, cfg.dataset.n_samples, &cfg.dataset.synthetic())?),
    }
}

pub fn prepare_dataset(cfg: &ExperimentConfig) -> anyhow::Result<Dataset> {
    let samples = load_samples(cfg)?;
    let (train, test) = split_dataset(&samples, cfg.dataset.train_fraction, cfg.seed)?;
    Ok(Dataset::from_split(&train, &test, cfg.dataset.timesteps, cfg.dataset.frame_mode)?)
}

fn pool(jobs: Option<usize>) -> anyhow::Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = jobs {
        b = b.num_threads(n.max(1));
    }
    Ok(b.build()?)
}

fn hours(log: &RunLog, through: Option<usize>) -> f64 {
    let secs = match through {
        Some(e) => log.wall_time_through(e),
        None => log.records.iter().map(|r| r.wall_time_s).sum(),
    };
    secs / 3600.0
}

fn mode_name(mode: PowerMode) -> &'static str {
    match mode {
        PowerMode::GpuOnly => "gpu-only",
        PowerMode::Full => "full",
    }
}

pub fn cmd_train(cfg: &ExperimentConfig, out: &Path, jobs: Option<usize>) -> CmdResult {
    let label = cfg.train.label();
    let spec = cfg.network_spec();
    let tc = cfg.train_config();
    let mut output = Output::create(out)?;
    let (log, net) = pool(jobs)?.install(|| -> anyhow::Result<_> {
        let data = prepare_dataset(cfg)?;
        Ok(train(&label, &tc, &spec, &data)?)
    })?;

    output.write_run("run", &log)?;
    output.write("schedule.csv", build_schedule(&tc.policy).map_err(anyhow::Error::from)?.to_csv())?;
    output.write("weights.snnw", net.to_checkpoint().map_err(anyhow::Error::from)?)?;
    let mut rows = Vec::new();
    for mode in [PowerMode::GpuOnly, PowerMode::Full] {
        let report = carbon_emission(&cfg.carbon.profile().for_mode(mode), hours(&log, None))
            .map_err(anyhow::Error::from)?;
        rows.push(EmissionRow { label: format!("{label}/{}", mode_name(mode)), report, reduction_pct: None });
    }
    output.write("emissions.csv", emission_csv(&rows))?;
    output.finish("train", Some(cfg.seed), cfg)?;

    if let snnlr_core::trainer::RunStatus::Diverged { epoch, detail } = &log.status {
        return Err(Failure::Runtime(anyhow!("training diverged at epoch {epoch}: {detail}")));
    }
    Ok(())
}

/// Directory name for one sweep value, e.g. `lr_5e-6`.
pub fn lr_dir(lr: f64) -> String {
    format!("lr_{lr:e}")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub lr: f64,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub first_stable_epoch: Option<usize>,
    pub effective: bool,
}

/// Marks values whose final accuracy trails the best final accuracy by
/// more than `margin` points.
pub fn summarize_sweep(results: &[(f64, &RunLog)], margin: f64) -> Vec<SweepRow> {
    let top = results
        .iter()
        .filter_map(|(_, l)| l.final_test_accuracy())
        .fold(f64::NEG_INFINITY, f64::max);
    results
        .iter()
        .map(|&(lr, log)| {
            let final_accuracy = log.final_test_accuracy().unwrap_or(0.0);
            SweepRow {
                lr,
                final_accuracy,
                best_accuracy: log.records.iter().map(|r| r.test_accuracy).fold(0.0, f64::max),
                first_stable_epoch: log.first_stable_epoch,
                effective: !log.diverged() && final_accuracy >= top - margin,
            }
        })
        .collect()
}

fn sweep_text(rows: &[SweepRow], margin: f64) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:>10}  {:>9}  {:>8}  {:>13}  status", "lr", "final_acc", "best_acc", "first_stable");
    for r in rows {
        let _ = writeln!(
            out,
            "{:>10e}  {:>8.1}%  {:>7.1}%  {:>13}  {}",
            r.lr,
            r.final_accuracy,
            r.best_accuracy,
            r.first_stable_epoch.map(|e| e.to_string()).unwrap_or_else(|| "-".into()),
            if r.effective { "effective" } else { "ineffective" }
        );
    }
    let effective: Vec<f64> = rows.iter().filter(|r| r.effective).map(|r| r.lr).collect();
    match (effective.iter().copied().reduce(f64::min), effective.iter().copied().reduce(f64::max)) {
        (Some(lo), Some(hi)) => {
            let _ = writeln!(out, "\nrecommended range: {lo:e} ..= {hi:e} (within {margin} points of the best)");
        }
        _ => {
            let _ = writeln!(out, "\nno effective value found");
        }
    }
    out
}

pub fn cmd_sweep(cfg: &ExperimentConfig, out: &Path, jobs: Option<usize>) -> CmdResult {
    let spec = cfg.network_spec();
    let base = cfg.train_config();
    let mut output = Output::create(out)?;
    let results: Vec<(f64, anyhow::Result<RunLog>)> = pool(jobs)?.install(|| {
        let data = match prepare_dataset(cfg) {
            Ok(d) => d,
            Err(e) => return vec![(f64::NAN, Err(e))],
        };
        use rayon::prelude::*;
        cfg.sweep
            .lrs
            .par_iter()
            .map(|&lr| {
                let mut tc = base.clone();
                tc.policy = PolicyConfig::decreasing_step(lr, base.epochs);
                tc.early_stop = false;
                (lr, train(&lr_dir(lr), &tc, &spec, &data).map(|(l, _)| l).map_err(anyhow::Error::from))
            })
            .collect()
    });

    let mut ok = Vec::new();
    let mut failures = Vec::new();
    for (lr, res) in &results {
        match res {
            Ok(log) => {
                output.write_run(&format!("{}/run", lr_dir(*lr)), log)?;
                ok.push((*lr, log));
            }
            Err(e) if lr.is_nan() => return Err(Failure::Runtime(anyhow!("{e:#}"))),
            Err(e) => failures.push(format!("{}: {e:#}", lr_dir(*lr))),
        }
    }
    let rows = summarize_sweep(&ok, cfg.sweep.margin);
    let mut csv = String::from("lr,final_test_acc,best_test_acc,first_stable_epoch,effective\n");
    for r in &rows {
        let stable = r.first_stable_epoch.map(|e| e.to_string()).unwrap_or_default();
        let _ = writeln!(csv, "{:e},{},{},{},{}", r.lr, r.final_accuracy, r.best_accuracy, stable, r.effective);
    }
    output.write("sweep_summary.csv", csv)?;
    output.write("sweep_summary.txt", sweep_text(&rows, cfg.sweep.margin))?;
    output.write("sweep_curves.csv", curves_csv(&ok))?;
    output.finish("sweep", Some(cfg.seed), cfg)?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(anyhow!("{} sweep run(s) failed: {}", failures.len(), failures.join("; "))))
    }
}

/// Test accuracy per epoch, one column per learning rate.
fn curves_csv(runs: &[(f64, &RunLog)]) -> String {
    let mut out = String::from("epoch");
    for (lr, _) in runs {
        let _ = write!(out, ",{}", lr_dir(*lr));
    }
    out.push('\n');
    let n = runs.iter().map(|(_, l)| l.records.len()).max().unwrap_or(0);
    for i in 0..n {
        let _ = write!(out, "{}", i + 1);
        for (_, l) in runs {
            match l.records.get(i) {
                Some(r) => {
                    let _ = write!(out, ",{}", r.test_accuracy);
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

/// Speedup rows and emission rows for grid runs against the baseline.
pub fn build_report(
    baseline: &RunLog,
    runs: &[RunLog],
    cfg: &ExperimentConfig,
) -> anyhow::Result<(Vec<SpeedupRow>, Vec<EmissionRow>)> {
    let profile = cfg.carbon.profile().for_mode(cfg.carbon.mode);
    let rows = runs
        .iter()
        .map(|r| speedup_report(r, baseline))
        .collect::<Result<Vec<_>, _>>()?;

    let full = carbon_emission(&profile, hours(baseline, None))?;
    let mut emissions = vec![EmissionRow {
        label: format!("{}_full", baseline.label),
        report: full,
        reduction_pct: None,
    }];
    let reduce = |r| -> anyhow::Result<Option<f64>> {
        if full.co2e_lbs > 0.0 {
            Ok(Some(emission_reduction(&r, &full)?))
        } else {
            Ok(None)
        }
    };
    if let Some(e) = baseline.first_stable_epoch {
        let fast = carbon_emission(&profile, hours(baseline, Some(e)))?;
        emissions.push(EmissionRow { label: format!("{}_fast", baseline.label), report: fast, reduction_pct: reduce(fast)? });
    }
    for run in runs {
        let report = carbon_emission(&profile, hours(run, run.first_stable_epoch))?;
        emissions.push(EmissionRow { label: run.label.clone(), report, reduction_pct: reduce(report)? });
    }
    Ok((rows, emissions))
}

fn write_report(output: &mut Output, baseline: &RunLog, runs: &[RunLog], cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let (rows, emissions) = build_report(baseline, runs, cfg)?;
    output.write("report.csv", report_csv(&rows))?;
    output.write("report.txt", report_text(&rows, &baseline.label))?;
    output.write("emissions.csv", emission_csv(&emissions))
}

pub fn cmd_explore(cfg: &ExperimentConfig, out: &Path, jobs: Option<usize>, only: &[String]) -> CmdResult {
    let mut grid = exploration_grid();
    if !only.is_empty() {
        let known: Vec<String> = grid.iter().map(|e| e.label.clone()).collect();
        let unknown: Vec<String> = only
            .iter()
            .filter(|o| !known.contains(o))
            .map(|o| format!("--only {o}: not a grid label (known: {})", known.join(", ")))
            .collect();
        if !unknown.is_empty() {
            return Err(Failure::Config(ConfigErrors(unknown)));
        }
        grid.retain(|e| only.contains(&e.label));
    }
    let grid: Vec<_> = grid.into_iter().map(|e| e.with_epochs(cfg.explore.horizon)).collect();
    let spec = cfg.network_spec();
    let base = cfg.train_config();
    let mut candidate = base.clone();
    candidate.early_stop = cfg.explore.early_stop;
    let baseline_cfg = {
        let mut b = base.with_entry(&baseline_entry(cfg.explore.horizon));
        b.early_stop = false;
        b
    };

    let mut output = Output::create(out)?;
    let (baseline, results) = pool(jobs)?.install(|| -> anyhow::Result<_> {
        let data = prepare_dataset(cfg)?;
        let (b, r) = rayon::join(
            || train("SOTA_DS", &baseline_cfg, &spec, &data).map(|(l, _)| l),
            || explore_grid(&grid, &candidate, &spec, &data),
        );
        Ok((b?, r))
    })?;

    output.write_run(&format!("baseline/{}", baseline.label), &baseline)?;
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for (label, res) in results {
        match res {
            Ok(log) => {
                output.write_run(&format!("runs/{label}"), &log)?;
                runs.push(log);
            }
            Err(e) => failures.push(format!("{label}: {e}")),
        }
    }
    write_report(&mut output, &baseline, &runs, cfg)?;
    output.finish("explore", Some(cfg.seed), cfg)?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(anyhow!("{} grid run(s) failed: {}", failures.len(), failures.join("; "))))
    }
}

fn read_log(path: &Path) -> anyhow::Result<RunLog> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    RunLog::from_json(&text).with_context(|| format!("parsing {}", path.display()))
}

fn json_files(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    Ok(files)
}

/// Rebuilds the report tables from the run logs of an `explore` directory,
/// keeping grid order for known labels.
pub fn cmd_report(cfg: &ExperimentConfig, dir: &Path) -> CmdResult {
    let baselines = json_files(&dir.join("baseline"))?;
    let [baseline_path] = baselines.as_slice() else {
        return Err(Failure::Runtime(anyhow!(
            "expected exactly one baseline log in {}, found {}",
            dir.join("baseline").display(),
            baselines.len()
        )));
    };
    let baseline = read_log(baseline_path)?;
    let mut by_label: BTreeMap<String, RunLog> = BTreeMap::new();
    for p in json_files(&dir.join("runs"))? {
        let log = read_log(&p)?;
        by_label.insert(log.label.clone(), log);
    }
    let mut runs = Vec::new();
    for e in exploration_grid() {
        if let Some(l) = by_label.remove(&e.label) {
            runs.push(l);
        }
    }
    runs.extend(by_label.into_values());

    let mut output = Output { root: dir.to_path_buf(), files: Vec::new() };
    write_report(&mut output, &baseline, &runs, cfg)?;
    let carbon = &cfg.carbon;
    fs::write(
        dir.join("report_manifest.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "command": "report",
            "seed": baseline.config.seed,
            "files": output.files,
            "carbon": carbon,
        }))
        .map_err(anyhow::Error::from)?
            + "\n",
    )
    .map_err(anyhow::Error::from)?;
    Ok(())
}

/// Writes an `epoch,lr` trace to `out`, or returns it when `out` is `None`.
pub fn cmd_schedule(policy: &PolicyConfig, out: Option<&Path>) -> CmdResult<Option<String>> {
    let trace = build_schedule(policy).map_err(|e| match e {
        snnlr_core::Error::Validation(v) => Failure::Config(ConfigErrors(v)),
        other => Failure::Config(ConfigErrors(vec![other.to_string()])),
    })?;
    match out {
        None => Ok(Some(trace.to_csv())),
        Some(dir) => {
            let mut output = Output::create(dir)?;
            output.write("schedule.csv", trace.to_csv())?;
            output.finish("schedule", None, policy)?;
            Ok(None)
        }
    }
}
