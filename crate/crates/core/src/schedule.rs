//! Epoch-indexed learning-rate policies.
//!
//! Every policy is a pure function of the 1-based epoch index. The six
//! policies follow the usual textbook pseudocode literally, including its
//! modular boundary behaviour (`ep % interval == 0` marks a boundary).

use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the per-cycle maximum shrinks in the decreasing-cyclical policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "decay")]
#[derive(Default)]
pub enum CycleMaxDecay {
    /// `cur_max = max - lr_dec * n_cycles` with
    /// `lr_dec = (max - min) / (epochs / c_length - 1)`.
    #[default]
    Linear,
    /// `cur_max = max * factor^n_cycles`.
    Multiplicative { factor: f64 },
}


/// Cycle layout for warm restarts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "restart")]
pub enum RestartMode {
    /// `peaks` cycles of (near) equal length spanning the schedule horizon.
    EqualCycles { peaks: usize },
    /// Cycle lengths `t_max, t_max*t_mult, t_max*t_mult^2, ...`.
    Geometric { t_max: usize, t_mult: usize },
}

/// Which cosine update the warm-restart policy uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RestartFormula {
    /// Amplitude `max - min` in every cycle, so each restart returns to `max`.
    #[default]
    Standard,
    /// Amplitude taken from the previous epoch's rate, compounding the decay
    /// across epochs. Starts from `init_lr`.
    LiteralRecurrence,
}

fn default_r_f() -> f64 {
    0.5
}
fn default_r_int() -> usize {
    20
}
fn default_d_rate() -> f64 {
    0.98
}
fn default_one() -> usize {
    1
}
fn default_p_ep() -> usize {
    90
}
fn default_d_ep() -> usize {
    180
}
fn default_low() -> f64 {
    1e-5
}
fn default_high() -> f64 {
    1e-2
}
fn default_end() -> f64 {
    1e-8
}
fn default_h_cycle() -> usize {
    25
}
fn default_c_length() -> usize {
    40
}
fn default_restart() -> RestartMode {
    RestartMode::Geometric { t_max: 4, t_mult: 2 }
}

/// Policy-specific parameters. Unset fields take the reference defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum PolicyKind {
    DecreasingStep {
        #[serde(default = "default_r_f")]
        r_f: f64,
        #[serde(default = "default_r_int")]
        r_int: usize,
    },
    ExponentialDecay {
        #[serde(default = "default_d_rate")]
        d_rate: f64,
        #[serde(default = "default_one")]
        d_steps: usize,
    },
    OneCycle {
        #[serde(default = "default_p_ep")]
        p_ep: usize,
        #[serde(default = "default_d_ep")]
        d_ep: usize,
        #[serde(default = "default_low")]
        start: f64,
        #[serde(default = "default_high")]
        max: f64,
        #[serde(default = "default_low")]
        min: f64,
        #[serde(default = "default_end")]
        end: f64,
    },
    Cyclical {
        #[serde(default = "default_low")]
        min: f64,
        #[serde(default = "default_high")]
        max: f64,
        #[serde(default = "default_h_cycle")]
        h_cycle: usize,
    },
    DecreasingCyclical {
        #[serde(default = "default_low")]
        min: f64,
        #[serde(default = "default_high")]
        max: f64,
        #[serde(default = "default_c_length")]
        c_length: usize,
        #[serde(default)]
        cycle_max: CycleMaxDecay,
    },
    WarmRestarts {
        #[serde(default = "default_low")]
        min: f64,
        #[serde(default = "default_high")]
        max: f64,
        #[serde(default = "default_restart")]
        mode: RestartMode,
        #[serde(default)]
        formula: RestartFormula,
    },
}

impl PolicyKind {
    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::DecreasingStep { .. } => "DecreasingStep",
            PolicyKind::ExponentialDecay { .. } => "ExponentialDecay",
            PolicyKind::OneCycle { .. } => "OneCycle",
            PolicyKind::Cyclical { .. } => "Cyclical",
            PolicyKind::DecreasingCyclical { .. } => "DecreasingCyclical",
            PolicyKind::WarmRestarts { .. } => "WarmRestarts",
        }
    }
}

/// A learning-rate policy over a fixed horizon of `epochs` epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub init_lr: f64,
    pub epochs: usize,
    #[serde(flatten)]
    pub kind: PolicyKind,
}

impl PolicyConfig {
    /// Step decay: halve every 20 epochs.
    pub fn decreasing_step(init_lr: f64, epochs: usize) -> Self {
        Self {
            init_lr,
            epochs,
            kind: PolicyKind::DecreasingStep { r_f: default_r_f(), r_int: default_r_int() },
        }
    }

    /// Decay by 0.98 every epoch.
    pub fn exponential_decay(init_lr: f64, epochs: usize) -> Self {
        Self {
            init_lr,
            epochs,
            kind: PolicyKind::ExponentialDecay { d_rate: default_d_rate(), d_steps: 1 },
        }
    }

    /// One-cycle with the peak at epoch 90 and the drop at 180.
    pub fn one_cycle(init_lr: f64, epochs: usize) -> Self {
        Self::one_cycle_with_peak(init_lr, epochs, default_p_ep())
    }

    /// One-cycle variant peaking at epoch 100 (descent still ends at 180).
    pub fn one_cycle_peak_100(init_lr: f64, epochs: usize) -> Self {
        Self::one_cycle_with_peak(init_lr, epochs, 100)
    }

    fn one_cycle_with_peak(init_lr: f64, epochs: usize, p_ep: usize) -> Self {
        Self {
            init_lr,
            epochs,
            kind: PolicyKind::OneCycle {
                p_ep,
                d_ep: default_d_ep(),
                start: default_low(),
                max: default_high(),
                min: default_low(),
                end: default_end(),
            },
        }
    }

    pub fn cyclical(init_lr: f64, epochs: usize) -> Self {
        Self {
            init_lr,
            epochs,
            kind: PolicyKind::Cyclical {
                min: default_low(),
                max: default_high(),
                h_cycle: default_h_cycle(),
            },
        }
    }

    pub fn decreasing_cyclical(init_lr: f64, epochs: usize) -> Self {
        Self {
            init_lr,
            epochs,
            kind: PolicyKind::DecreasingCyclical {
                min: default_low(),
                max: default_high(),
                c_length: default_c_length(),
                cycle_max: CycleMaxDecay::Linear,
            },
        }
    }

    /// Warm restarts with geometric cycles 4, 8, 16, ...
    pub fn warm_restarts_geometric(init_lr: f64, epochs: usize) -> Self {
        Self {
            init_lr,
            epochs,
            kind: PolicyKind::WarmRestarts {
                min: default_low(),
                max: default_high(),
                mode: default_restart(),
                formula: RestartFormula::Standard,
            },
        }
    }

    /// Warm restarts with `peaks` equal cycles.
    pub fn warm_restarts_peaks(init_lr: f64, epochs: usize, peaks: usize) -> Self {
        Self {
            init_lr,
            epochs,
            kind: PolicyKind::WarmRestarts {
                min: default_low(),
                max: default_high(),
                mode: RestartMode::EqualCycles { peaks },
                formula: RestartFormula::Standard,
            },
        }
    }

    /// Checks every invariant and reports all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        self.collect_violations(&mut errs);
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }

    pub(crate) fn collect_violations(&self, errs: &mut Vec<String>) {
        let positive = |errs: &mut Vec<String>, name: &str, v: f64| {
            if !(v.is_finite() && v > 0.0) {
                errs.push(format!("{name} must be a positive finite number, got {v}"));
            }
        };
        let bounds = |errs: &mut Vec<String>, min: f64, max: f64| {
            positive(errs, "min", min);
            positive(errs, "max", max);
            if min > max {
                errs.push(format!("min ({min}) must not exceed max ({max})"));
            }
        };
        positive(errs, "init_lr", self.init_lr);
        if self.epochs == 0 {
            errs.push("epochs must be at least 1".into());
        }
        match self.kind {
            PolicyKind::DecreasingStep { r_f, r_int } => {
                if !(r_f > 0.0 && r_f <= 1.0) {
                    errs.push(format!("r_f must lie in (0, 1], got {r_f}"));
                }
                if r_int == 0 {
                    errs.push("r_int must be at least 1".into());
                }
            }
            PolicyKind::ExponentialDecay { d_rate, d_steps } => {
                if !(d_rate > 0.0 && d_rate <= 1.0) {
                    errs.push(format!("d_rate must lie in (0, 1], got {d_rate}"));
                }
                if d_steps == 0 {
                    errs.push("d_steps must be at least 1".into());
                }
            }
            PolicyKind::OneCycle { p_ep, d_ep, start, max, min, end } => {
                bounds(errs, min, max);
                positive(errs, "start", start);
                positive(errs, "end", end);
                if start > max {
                    errs.push(format!("start ({start}) must not exceed max ({max})"));
                }
                if end > min {
                    errs.push(format!("end ({end}) must not exceed min ({min})"));
                }
                if !(0 < p_ep && p_ep < d_ep && d_ep < self.epochs) {
                    errs.push(format!(
                        "one-cycle needs 0 < p_ep < d_ep < epochs, got p_ep={p_ep}, d_ep={d_ep}, epochs={}",
                        self.epochs
                    ));
                }
            }
            PolicyKind::Cyclical { min, max, h_cycle } => {
                bounds(errs, min, max);
                if h_cycle == 0 {
                    errs.push("h_cycle must be at least 1".into());
                }
            }
            PolicyKind::DecreasingCyclical { min, max, c_length, cycle_max } => {
                bounds(errs, min, max);
                if c_length == 0 {
                    errs.push("c_length must be at least 1".into());
                } else if !self.epochs.is_multiple_of(c_length) {
                    errs.push(format!(
                        "c_length ({c_length}) must divide epochs ({})",
                        self.epochs
                    ));
                } else if cycle_max == CycleMaxDecay::Linear && self.epochs / c_length < 2 {
                    errs.push("linear cycle-max decay needs at least two cycles".into());
                }
                if let CycleMaxDecay::Multiplicative { factor } = cycle_max {
                    if !(factor > 0.0 && factor <= 1.0) {
                        errs.push(format!("cycle-max factor must lie in (0, 1], got {factor}"));
                    }
                }
            }
            PolicyKind::WarmRestarts { min, max, mode, formula } => {
                bounds(errs, min, max);
                match mode {
                    RestartMode::EqualCycles { peaks } => {
                        if peaks == 0 || peaks > self.epochs {
                            errs.push(format!(
                                "peaks must lie in [1, epochs={}], got {peaks}",
                                self.epochs
                            ));
                        }
                    }
                    RestartMode::Geometric { t_max, t_mult } => {
                        if t_max == 0 {
                            errs.push("t_max must be at least 1".into());
                        }
                        if t_mult == 0 {
                            errs.push("t_mult must be at least 1".into());
                        }
                    }
                }
                if formula == RestartFormula::LiteralRecurrence && self.init_lr < min {
                    errs.push(format!(
                        "literal warm restarts need init_lr >= min, got {} < {min}",
                        self.init_lr
                    ));
                }
            }
        }
    }

    /// Inclusive `[lower, upper]` envelope every rate of this policy lies in.
    pub fn bounds(&self) -> (f64, f64) {
        match self.kind {
            PolicyKind::DecreasingStep { .. } | PolicyKind::ExponentialDecay { .. } => {
                (0.0, self.init_lr)
            }
            PolicyKind::OneCycle { end, max, .. } => (end, max),
            PolicyKind::Cyclical { min, max, .. } | PolicyKind::DecreasingCyclical { min, max, .. } => {
                (min, max)
            }
            PolicyKind::WarmRestarts { min, max, formula, .. } => match formula {
                RestartFormula::Standard => (min, max),
                RestartFormula::LiteralRecurrence => (min, self.init_lr),
            },
        }
    }

    fn check_epoch(&self, ep: usize) -> Result<()> {
        if ep == 0 || ep > self.epochs {
            return Err(Error::Argument(format!(
                "epoch {ep} outside 1..={}",
                self.epochs
            )));
        }
        Ok(())
    }

    /// Learning rate at 1-based epoch `ep`.
    pub fn lr_at(&self, ep: usize) -> Result<f64> {
        self.check_epoch(ep)?;
        Ok(match self.kind {
            PolicyKind::DecreasingStep { r_f, r_int } => decreasing_step(self.init_lr, r_f, r_int, ep),
            PolicyKind::ExponentialDecay { d_rate, d_steps } => {
                exponential_decay(self.init_lr, d_rate, d_steps, ep)
            }
            PolicyKind::OneCycle { p_ep, d_ep, start, max, min, end } => {
                one_cycle(p_ep, d_ep, start, max, min, end, self.epochs, ep)
            }
            PolicyKind::Cyclical { min, max, h_cycle } => cyclical(min, max, h_cycle, ep),
            PolicyKind::DecreasingCyclical { min, max, c_length, cycle_max } => {
                decreasing_cyclical(min, max, c_length, cycle_max, self.epochs, ep)
            }
            PolicyKind::WarmRestarts { min, max, mode, formula } => match formula {
                RestartFormula::Standard => {
                    let (t_cur, t_i) = restart_position(mode, self.epochs, ep);
                    cosine(min, max, t_cur, t_i)
                }
                // The recurrence needs every earlier epoch.
                RestartFormula::LiteralRecurrence => {
                    let mut lr = self.init_lr;
                    for e in 1..=ep {
                        let (t_cur, t_i) = restart_position(mode, self.epochs, e);
                        lr = cosine(min, lr, t_cur, t_i);
                    }
                    lr
                }
            },
        })
    }
}

fn decreasing_step(init: f64, r_f: f64, r_int: usize, ep: usize) -> f64 {
    let exponent = (ep / r_int) as i32;
    init * r_f.powi(exponent)
}

fn exponential_decay(init: f64, d_rate: f64, d_steps: usize, ep: usize) -> f64 {
    init * d_rate.powf(ep as f64 / d_steps as f64)
}

#[allow(clippy::too_many_arguments)]
fn one_cycle(
    p_ep: usize,
    d_ep: usize,
    start: f64,
    max: f64,
    min: f64,
    end: f64,
    epochs: usize,
    ep: usize,
) -> f64 {
    if ep < p_ep {
        start + (max - start) / p_ep as f64 * ep as f64
    } else if ep < d_ep {
        max - (max - min) / (d_ep - p_ep) as f64 * (ep - p_ep) as f64
    } else {
        min - (min - end) / (epochs - d_ep) as f64 * (ep - d_ep) as f64
    }
}

fn cyclical(min: f64, max: f64, h_cycle: usize, ep: usize) -> f64 {
    let pos = ep % (2 * h_cycle);
    if pos < h_cycle {
        min + (max - min) * pos as f64 / h_cycle as f64
    } else {
        max - (max - min) * (pos - h_cycle) as f64 / h_cycle as f64
    }
}

fn decreasing_cyclical(
    min: f64,
    max: f64,
    c_length: usize,
    cycle_max: CycleMaxDecay,
    epochs: usize,
    ep: usize,
) -> f64 {
    let n_cycles = ep / c_length;
    let cur_max = match cycle_max {
        CycleMaxDecay::Linear => {
            let lr_dec = (max - min) / ((epochs / c_length) as f64 - 1.0);
            max - lr_dec * n_cycles as f64
        }
        CycleMaxDecay::Multiplicative { factor } => max * factor.powi(n_cycles as i32),
    };
    let progress = (ep % c_length) as f64 / c_length as f64;
    let lr = cur_max - (cur_max - min) * progress;
    lr.max(min)
}

/// Position `(t_cur, t_i)` of epoch `ep` inside its restart cycle.
fn restart_position(mode: RestartMode, epochs: usize, ep: usize) -> (usize, usize) {
    match mode {
        RestartMode::Geometric { t_max, t_mult } => {
            let mut t_i = t_max;
            let mut t_cur = ep;
            while t_cur >= t_i {
                t_cur -= t_i;
                t_i *= t_mult;
            }
            (t_cur, t_i)
        }
        RestartMode::EqualCycles { peaks } => {
            // Boundaries b_k = floor(k * epochs / peaks); an epoch sitting on a
            // boundary opens a fresh cycle.
            let mut k = 0;
            while k < peaks && (k + 1) * epochs / peaks <= ep {
                k += 1;
            }
            let start = k * epochs / peaks;
            let len = if k == peaks {
                epochs / peaks
            } else {
                (k + 1) * epochs / peaks - start
            };
            (ep - start, len.max(1))
        }
    }
}

fn cosine(min: f64, amplitude_top: f64, t_cur: usize, t_i: usize) -> f64 {
    min + (amplitude_top - min) * 0.5 * (1.0 + (PI * t_cur as f64 / t_i as f64).cos())
}

/// Epochs at which a warm-restart cycle begins (rate back at its maximum).
pub fn restart_epochs(cfg: &PolicyConfig) -> Vec<usize> {
    match cfg.kind {
        PolicyKind::WarmRestarts { mode, .. } => (1..=cfg.epochs)
            .filter(|&ep| restart_position(mode, cfg.epochs, ep).0 == 0)
            .collect(),
        _ => Vec::new(),
    }
}

/// The materialized learning rate for every epoch of a policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleTrace {
    lr_by_epoch: Vec<f64>,
}

impl ScheduleTrace {
    /// Rate at 1-based epoch `ep`.
    pub fn get(&self, ep: usize) -> Option<f64> {
        ep.checked_sub(1).and_then(|i| self.lr_by_epoch.get(i).copied())
    }

    pub fn len(&self) -> usize {
        self.lr_by_epoch.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lr_by_epoch.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.lr_by_epoch
    }

    /// `epoch,lr` CSV with 17 significant digits per rate.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr\n");
        for (i, lr) in self.lr_by_epoch.iter().enumerate() {
            let _ = writeln!(out, "{},{:.16e}", i + 1, lr);
        }
        out
    }
}

/// Evaluates `cfg` at every epoch of its horizon.
pub fn build_schedule(cfg: &PolicyConfig) -> Result<ScheduleTrace> {
    cfg.validate()?;
    let mut lr_by_epoch = Vec::with_capacity(cfg.epochs);
    match cfg.kind {
        PolicyKind::WarmRestarts { min, mode, formula: RestartFormula::LiteralRecurrence, .. } => {
            let mut lr = cfg.init_lr;
            for ep in 1..=cfg.epochs {
                let (t_cur, t_i) = restart_position(mode, cfg.epochs, ep);
                lr = cosine(min, lr, t_cur, t_i);
                lr_by_epoch.push(lr);
            }
        }
        _ => {
            for ep in 1..=cfg.epochs {
                lr_by_epoch.push(cfg.lr_at(ep)?);
            }
        }
    }
    Ok(ScheduleTrace { lr_by_epoch })
}

/// Training settings a grid entry overrides on top of a base config.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOverrides {
    pub batch_size: usize,
    pub v_th: f64,
}

/// One labelled setting of the policy exploration grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub label: String,
    pub policy: PolicyConfig,
    pub overrides: TrainOverrides,
}

impl GridEntry {
    /// Same entry with the policy horizon rescaled to `epochs`.
    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.policy.epochs = epochs;
        self
    }
}

/// Horizon of the exploration grid's policies.
pub const GRID_EPOCHS: usize = 200;

/// The twelve warm-restart / exponential-decay settings explored against
/// the step-decay baseline.
pub fn exploration_grid() -> Vec<GridEntry> {
    let mut grid = Vec::with_capacity(12);
    for peaks in [2, 3, 4, 6, 7, 10] {
        grid.push(GridEntry {
            label: format!("WR_{peaks}P"),
            policy: PolicyConfig::warm_restarts_peaks(1e-2, GRID_EPOCHS, peaks),
            overrides: TrainOverrides { batch_size: 40, v_th: 0.4 },
        });
    }
    for (b, v) in [(40, 3), (40, 4), (40, 5), (40, 6), (30, 4), (20, 4)] {
        grid.push(GridEntry {
            label: format!("ED_B{b}_V{v}"),
            policy: PolicyConfig::exponential_decay(1e-2, GRID_EPOCHS),
            overrides: TrainOverrides { batch_size: b, v_th: v as f64 / 10.0 },
        });
    }
    grid
}

/// The step-decay reference setting (init 1e-3, B=40, V_th=0.4).
pub fn baseline_entry(epochs: usize) -> GridEntry {
    GridEntry {
        label: "SOTA_DS".into(),
        policy: PolicyConfig::decreasing_step(1e-3, epochs),
        overrides: TrainOverrides { batch_size: 40, v_th: 0.4 },
    }
}
