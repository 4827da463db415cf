//! Epoch loop, accuracy-stability detection and speedup reporting.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{accumulate_frames, EventSample, FrameMode, FrameTensor};
use crate::rng::{self, streams};
use crate::schedule::{build_schedule, GridEntry, PolicyConfig};
use crate::snn::{Network, NetworkSpec};

/// Training counts as stable once the last `window` accuracies have a
/// population standard deviation of at most `acc_th` percentage points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityCriterion {
    pub window: usize,
    pub acc_th: f64,
}

impl Default for StabilityCriterion {
    fn default() -> Self {
        Self { window: 10, acc_th: 1.0 }
    }
}

pub fn stability_check(accuracies: &[f64], crit: &StabilityCriterion) -> bool {
    if crit.window == 0 || accuracies.len() < crit.window {
        return false;
    }
    let tail = &accuracies[accuracies.len() - crit.window..];
    let n = tail.len() as f64;
    let mean = tail.iter().sum::<f64>() / n;
    let var = tail.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    var.sqrt() <= crit.acc_th
}

/// Which accuracy series feeds the stability criterion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AccuracySource {
    #[default]
    Test,
    Train,
}

/// Source of the per-epoch durations written to run logs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "clock", rename_all = "kebab-case")]
pub enum Clock {
    /// Wall-clock time of each epoch.
    Measured,
    /// A fixed charge per epoch, which keeps logs reproducible byte for byte.
    Nominal { seconds_per_epoch: f64 },
}

impl Default for Clock {
    fn default() -> Self {
        Clock::Nominal { seconds_per_epoch: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub policy: PolicyConfig,
    pub batch_size: usize,
    pub v_th: f64,
    /// Maximum number of epochs to run; at most the policy horizon.
    pub epochs: usize,
    pub seed: u64,
    pub stability: StabilityCriterion,
    pub early_stop: bool,
    #[serde(default)]
    pub accuracy_source: AccuracySource,
    #[serde(default)]
    pub clock: Clock,
}

impl TrainConfig {
    /// Step-decay setup: init 1e-3, B=40, V_th=0.4.
    pub fn reference(epochs: usize, seed: u64) -> Self {
        Self {
            policy: PolicyConfig::decreasing_step(1e-3, epochs),
            batch_size: 40,
            v_th: 0.4,
            epochs,
            seed,
            stability: StabilityCriterion::default(),
            early_stop: false,
            accuracy_source: AccuracySource::Test,
            clock: Clock::default(),
        }
    }

    /// Applies a grid entry's policy and overrides.
    pub fn with_entry(&self, entry: &GridEntry) -> Self {
        Self {
            policy: entry.policy,
            batch_size: entry.overrides.batch_size,
            v_th: entry.overrides.v_th,
            ..self.clone()
        }
    }

    pub fn collect_violations(&self, errs: &mut Vec<String>) {
        self.policy.collect_violations(errs);
        if self.batch_size == 0 {
            errs.push("batch_size must be at least 1".into());
        }
        if !self.v_th.is_finite() {
            errs.push(format!("v_th must be finite, got {}", self.v_th));
        }
        if self.epochs == 0 {
            errs.push("epochs must be at least 1".into());
        }
        if self.epochs > self.policy.epochs {
            errs.push(format!(
                "epochs ({}) exceed the policy horizon ({})",
                self.epochs, self.policy.epochs
            ));
        }
        if self.stability.window < 2 {
            errs.push("stability window must be at least 2".into());
        }
        if !(self.stability.acc_th > 0.0) {
            errs.push(format!("acc_th must be positive, got {}", self.stability.acc_th));
        }
        if self.early_stop && self.epochs < self.stability.window {
            errs.push(format!(
                "early stopping needs epochs ({}) >= stability window ({})",
                self.epochs, self.stability.window
            ));
        }
        if let Clock::Nominal { seconds_per_epoch } = self.clock {
            if !(seconds_per_epoch >= 0.0 && seconds_per_epoch.is_finite()) {
                errs.push(format!("seconds_per_epoch must be non-negative, got {seconds_per_epoch}"));
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        self.collect_violations(&mut errs);
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Percent correct over the epoch's training batches.
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub train_loss: f64,
    pub wall_time_s: f64,
    /// Stability criterion holds on the accuracies up to this epoch.
    pub stable_so_far: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum RunStatus {
    Completed,
    EarlyStopped,
    Diverged { epoch: usize, detail: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub label: String,
    pub config: TrainConfig,
    pub records: Vec<EpochRecord>,
    pub first_stable_epoch: Option<usize>,
    pub accuracy_at_stability: Option<f64>,
    pub total_wall_time_s: f64,
    #[serde(flatten)]
    pub status: RunStatus,
}

impl RunLog {
    pub fn diverged(&self) -> bool {
        matches!(self.status, RunStatus::Diverged { .. })
    }

    pub fn final_test_accuracy(&self) -> Option<f64> {
        self.records.last().map(|r| r.test_accuracy)
    }

    /// Time spent up to and including `epoch`.
    pub fn wall_time_through(&self, epoch: usize) -> f64 {
        self.records.iter().take_while(|r| r.epoch <= epoch).map(|r| r.wall_time_s).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Parse {
            offset: 0,
            message: format!("run log: {e}"),
        })
    }

    /// `epoch,lr,train_acc,test_acc,wall_s,stable`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr,train_acc,test_acc,wall_s,stable\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{:.16e},{},{},{},{}",
                r.epoch, r.lr, r.train_accuracy, r.test_accuracy, r.wall_time_s, r.stable_so_far
            );
        }
        out
    }
}

/// Smallest epoch whose accuracy prefix satisfies the criterion.
pub fn first_stable_epoch(records: &[EpochRecord], crit: &StabilityCriterion, source: AccuracySource) -> Option<usize> {
    let accs: Vec<f64> = records
        .iter()
        .map(|r| match source {
            AccuracySource::Test => r.test_accuracy,
            AccuracySource::Train => r.train_accuracy,
        })
        .collect();
    (1..=accs.len())
        .find(|&n| stability_check(&accs[..n], crit))
        .map(|n| records[n - 1].epoch)
}

/// Frames and labels ready for the network.
#[derive(Debug, Clone)]
pub struct LabeledFrames {
    pub frames: Vec<FrameTensor>,
    pub labels: Vec<usize>,
}

impl LabeledFrames {
    pub fn from_samples(samples: &[EventSample], timesteps: usize, mode: FrameMode) -> Result<Self> {
        let frames = samples
            .par_iter()
            .map(|s| accumulate_frames(s, timesteps, mode))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { frames, labels: samples.iter().map(|s| s.label as usize).collect() })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    fn pairs(&self) -> Vec<(&FrameTensor, usize)> {
        self.frames.iter().zip(self.labels.iter().copied()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: LabeledFrames,
    pub test: LabeledFrames,
}

impl Dataset {
    pub fn from_split(
        train: &[EventSample],
        test: &[EventSample],
        timesteps: usize,
        mode: FrameMode,
    ) -> Result<Self> {
        Ok(Self {
            train: LabeledFrames::from_samples(train, timesteps, mode)?,
            test: LabeledFrames::from_samples(test, timesteps, mode)?,
        })
    }

    fn check(&self, n_classes: usize) -> Result<()> {
        if self.train.is_empty() || self.test.is_empty() {
            return Err(Error::Argument("training and test sets must both be non-empty".into()));
        }
        for part in [&self.train, &self.test] {
            if let Some(&bad) = part.labels.iter().find(|&&l| l >= n_classes) {
                return Err(Error::Argument(format!("label {bad} out of range for {n_classes} classes")));
            }
        }
        let mut seen = vec![false; n_classes];
        for &l in &self.train.labels {
            seen[l] = true;
        }
        if seen.iter().filter(|&&s| s).count() < 2 {
            return Err(Error::Argument("training set must contain at least two classes".into()));
        }
        Ok(())
    }
}

/// Percent of `data` the network classifies correctly. Leaves `net` untouched.
pub fn evaluate(net: &Network, data: &LabeledFrames) -> Result<f64> {
    let correct = net.accuracy(&data.pairs())?;
    Ok(correct * 100.0)
}

fn percent(correct: usize, total: usize) -> f64 {
    correct as f64 * 100.0 / total as f64
}

fn divergence(loss: f64, net: &Network) -> Option<String> {
    if !loss.is_finite() {
        Some(format!("loss {loss}"))
    } else if !net.all_finite() {
        Some("non-finite weights after update".into())
    } else {
        None
    }
}

/// Runs the full protocol and also returns the trained network.
pub fn train(label: &str, cfg: &TrainConfig, spec: &NetworkSpec, data: &Dataset) -> Result<(RunLog, Network)> {
    cfg.validate()?;
    let mut spec = spec.clone();
    spec.lif.v_th = cfg.v_th;
    spec.validate()?;
    data.check(spec.n_classes)?;
    let trace = build_schedule(&cfg.policy)?;
    let mut net = Network::new(spec, cfg.seed)?;

    let started = Instant::now();
    let train_pairs = data.train.pairs();
    let mut accs = Vec::with_capacity(cfg.epochs);
    let mut log = RunLog {
        label: label.to_string(),
        config: cfg.clone(),
        records: Vec::with_capacity(cfg.epochs),
        first_stable_epoch: None,
        accuracy_at_stability: None,
        total_wall_time_s: 0.0,
        status: RunStatus::Completed,
    };

    'epochs: for epoch in 1..=cfg.epochs {
        let epoch_start = Instant::now();
        let lr = trace.get(epoch).expect("epoch within schedule horizon");
        let mut order: Vec<usize> = (0..train_pairs.len()).collect();
        order.shuffle(&mut rng::derive(cfg.seed, streams::SHUFFLE, epoch as u64));

        let (mut correct, mut seen, mut loss) = (0, 0, 0.0);
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<(&FrameTensor, usize)> = idx.iter().map(|&i| train_pairs[i]).collect();
            let res = net.batch_gradients(&batch)?;
            if res.loss_sum.is_finite() {
                net.update_weights(&res.grad_sum, lr, res.len)?;
            }
            if let Some(detail) = divergence(res.loss_sum, &net) {
                log.status = RunStatus::Diverged { epoch, detail };
                break 'epochs;
            }
            correct += res.correct;
            seen += res.len;
            loss += res.loss_sum;
        }
        let train_accuracy = percent(correct, seen);
        let test_accuracy = evaluate(&net, &data.test)?;
        accs.push(match cfg.accuracy_source {
            AccuracySource::Test => test_accuracy,
            AccuracySource::Train => train_accuracy,
        });
        let stable = stability_check(&accs, &cfg.stability);
        let wall_time_s = match cfg.clock {
            Clock::Measured => epoch_start.elapsed().as_secs_f64(),
            Clock::Nominal { seconds_per_epoch } => seconds_per_epoch,
        };
        log.records.push(EpochRecord {
            epoch,
            lr,
            train_accuracy,
            test_accuracy,
            train_loss: loss / seen as f64,
            wall_time_s,
            stable_so_far: stable,
        });
        if stable && log.first_stable_epoch.is_none() {
            log.first_stable_epoch = Some(epoch);
            log.accuracy_at_stability = accs.last().copied();
        }
        if stable && cfg.early_stop {
            log.status = RunStatus::EarlyStopped;
            break;
        }
    }

    log.total_wall_time_s = match cfg.clock {
        Clock::Measured => started.elapsed().as_secs_f64(),
        Clock::Nominal { .. } => log.records.iter().map(|r| r.wall_time_s).sum(),
    };
    Ok((log, net))
}

pub fn run_training(cfg: &TrainConfig, spec: &NetworkSpec, data: &Dataset) -> Result<RunLog> {
    train(cfg.policy.kind.name(), cfg, spec, data).map(|(log, _)| log)
}

/// One row of a speedup comparison against a baseline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedupRow {
    pub label: String,
    pub first_stable_epoch: Option<usize>,
    pub accuracy_at_stability: Option<f64>,
    /// Baseline's full epoch count over the candidate's first stable epoch.
    pub speedup_full: Option<f64>,
    /// Baseline's first stable epoch over the candidate's.
    pub speedup_stable: Option<f64>,
}

impl SpeedupRow {
    pub fn stable(&self) -> bool {
        self.first_stable_epoch.is_some()
    }
}

pub fn speedup_from_epochs(
    label: &str,
    candidate_stable: Option<usize>,
    accuracy_at_stability: Option<f64>,
    baseline_total: usize,
    baseline_stable: Option<usize>,
) -> SpeedupRow {
    let ratio = |num: usize, den: usize| num as f64 / den as f64;
    SpeedupRow {
        label: label.to_string(),
        first_stable_epoch: candidate_stable,
        accuracy_at_stability,
        speedup_full: candidate_stable.map(|c| ratio(baseline_total, c)),
        speedup_stable: candidate_stable.zip(baseline_stable).map(|(c, b)| ratio(b, c)),
    }
}

pub fn speedup_report(candidate: &RunLog, baseline: &RunLog) -> Result<SpeedupRow> {
    if candidate.records.is_empty() || baseline.records.is_empty() {
        return Err(Error::Argument("speedup needs non-empty run logs".into()));
    }
    Ok(speedup_from_epochs(
        &candidate.label,
        candidate.first_stable_epoch,
        candidate.accuracy_at_stability,
        baseline.records.len(),
        baseline.first_stable_epoch,
    ))
}

pub fn format_speedup(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.1}x")).unwrap_or_else(|| "unstable".into())
}

pub const REPORT_COLUMNS: [&str; 5] = [
    "label",
    "first_stable_epoch",
    "accuracy_at_stability_pct",
    "speedup_vs_baseline_full",
    "speedup_vs_baseline_first_stable",
];

pub fn report_csv(rows: &[SpeedupRow]) -> String {
    let mut out = REPORT_COLUMNS.join(",");
    out.push('\n');
    for r in rows {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.1}")).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.label,
            r.first_stable_epoch.map(|e| e.to_string()).unwrap_or_default(),
            opt(r.accuracy_at_stability),
            opt(r.speedup_full),
            opt(r.speedup_stable)
        );
    }
    out
}

/// Aligned plain-text table with the same column order as [`report_csv`].
pub fn report_text(rows: &[SpeedupRow], baseline_label: &str) -> String {
    let headers = [
        "setting".to_string(),
        "first stable [epochs]".to_string(),
        "accuracy at first stable".to_string(),
        format!("speedup vs {baseline_label} full"),
        format!("speedup vs {baseline_label} first stable"),
    ];
    let cells: Vec<[String; 5]> = rows
        .iter()
        .map(|r| {
            [
                r.label.clone(),
                r.first_stable_epoch.map(|e| e.to_string()).unwrap_or_else(|| "-".into()),
                r.accuracy_at_stability.map(|a| format!("{a:.1}%")).unwrap_or_else(|| "-".into()),
                format_speedup(r.speedup_full),
                format_speedup(r.speedup_stable),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = headers.iter().map(String::len).collect();
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, row: &[String]| {
        let parts: Vec<String> = row.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
        let _ = writeln!(out, "| {} |", parts.join(" | "));
    };
    line(&mut out, &headers);
    let _ = writeln!(out, "|{}|", widths.iter().map(|w| "-".repeat(w + 2)).collect::<Vec<_>>().join("|"));
    for row in &cells {
        line(&mut out, row);
    }
    out
}

/// One run per grid entry on a shared dataset. Failed entries are kept as
/// errors and do not stop the others; results follow grid order.
pub fn explore_grid(
    grid: &[GridEntry],
    base: &TrainConfig,
    spec: &NetworkSpec,
    data: &Dataset,
) -> Vec<(String, Result<RunLog>)> {
    grid.par_iter()
        .map(|entry| {
            let cfg = base.with_entry(entry);
            let res = train(&entry.label, &cfg, spec, data).map(|(log, _)| log);
            (entry.label.clone(), res)
        })
        .collect()
}
