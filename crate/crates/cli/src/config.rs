//! Experiment configuration: one TOML file plus dotted `--set` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use snnlr_core::carbon::{PowerMode, PowerProfile};
use snnlr_core::events::{FrameMode, SyntheticConfig};
use snnlr_core::schedule::{PolicyConfig, GRID_EPOCHS};
use snnlr_core::snn::{InputShape, LayerSpec, LifParams, NetworkSpec, SurrogateConfig};
use snnlr_core::trainer::{AccuracySource, Clock, StabilityCriterion, TrainConfig};
use toml::{Table, Value};

/// Step sizes tried by `sweep` unless the config lists its own.
pub const DEFAULT_SWEEP_LRS: [f64; 7] = [1e-6, 5e-6, 1e-5, 5e-5, 1e-2, 5e-2, 1e-1];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Every random stream (data, split, weights, shuffling) derives from this.
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub network: NetworkConfig,
    pub train: TrainSection,
    pub carbon: CarbonConfig,
    pub sweep: SweepConfig,
    pub explore: ExploreConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            output_dir: None,
            dataset: DatasetConfig::default(),
            network: NetworkConfig::default(),
            train: TrainSection::default(),
            carbon: CarbonConfig::default(),
            sweep: SweepConfig::default(),
            explore: ExploreConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Event container to load instead of generating synthetic samples.
    pub path: Option<PathBuf>,
    pub n_samples: usize,
    pub train_fraction: f64,
    pub width: u16,
    pub height: u16,
    pub duration_us: u32,
    pub events_per_sample: usize,
    pub noise_fraction: f64,
    pub timesteps: usize,
    pub frame_mode: FrameMode,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let synth = SyntheticConfig::default();
        Self {
            path: None,
            n_samples: 250,
            train_fraction: 0.8,
            width: synth.width,
            height: synth.height,
            duration_us: synth.duration_us,
            events_per_sample: synth.events_per_sample,
            noise_fraction: synth.noise_fraction,
            timesteps: 10,
            frame_mode: FrameMode::default(),
        }
    }
}

impl DatasetConfig {
    pub fn synthetic(&self) -> SyntheticConfig {
        SyntheticConfig {
            width: self.width,
            height: self.height,
            duration_us: self.duration_us,
            events_per_sample: self.events_per_sample,
            noise_fraction: self.noise_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Explicit topology; the small conv/dense stack is used when absent.
    pub layers: Option<Vec<LayerSpec>>,
    pub n_classes: usize,
    pub v_rest: f64,
    pub tau: f64,
    pub r_in: f64,
    pub width_a: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        let lif = LifParams::default();
        Self {
            layers: None,
            n_classes: 2,
            v_rest: lif.v_rest,
            tau: lif.tau,
            r_in: lif.r_in,
            width_a: SurrogateConfig::default().width_a,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// Run label; defaults to the policy kind.
    pub label: Option<String>,
    pub epochs: usize,
    pub batch_size: usize,
    pub v_th: f64,
    pub early_stop: bool,
    pub accuracy_source: AccuracySource,
    /// Record real elapsed time instead of a fixed charge per epoch.
    pub measure_time: bool,
    pub seconds_per_epoch: f64,
    pub stability: StabilityCriterion,
    /// `epochs` defaults to the run length when omitted in the file.
    pub policy: PolicyConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            label: None,
            epochs: 60,
            batch_size: 40,
            v_th: 0.4,
            early_stop: false,
            accuracy_source: AccuracySource::Test,
            measure_time: false,
            seconds_per_epoch: 1.0,
            stability: StabilityCriterion::default(),
            policy: PolicyConfig::exponential_decay(1e-2, 60),
        }
    }
}

impl TrainSection {
    pub fn clock(&self) -> Clock {
        if self.measure_time {
            Clock::Measured
        } else {
            Clock::Nominal { seconds_per_epoch: self.seconds_per_epoch }
        }
    }

    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.policy.kind.name().to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CarbonConfig {
    pub p_cpu: f64,
    pub p_mem: f64,
    pub p_gpu: f64,
    pub g: u32,
    pub mode: PowerMode,
}

impl Default for CarbonConfig {
    fn default() -> Self {
        Self { p_cpu: 100.0, p_mem: 50.0, p_gpu: 300.0, g: 1, mode: PowerMode::GpuOnly }
    }
}

impl CarbonConfig {
    pub fn profile(&self) -> PowerProfile {
        PowerProfile { p_cpu: self.p_cpu, p_mem: self.p_mem, p_gpu: self.p_gpu, g: self.g }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub lrs: Vec<f64>,
    /// A value is flagged ineffective when its final accuracy trails the
    /// best final accuracy by more than this many points.
    pub margin: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { lrs: DEFAULT_SWEEP_LRS.to_vec(), margin: 10.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExploreConfig {
    /// Horizon the grid's policies are defined over.
    pub horizon: usize,
    /// Stop each grid run at its first stable epoch.
    pub early_stop: bool,
}

impl Default for ExploreConfig {
    fn default() -> Self {
        Self { horizon: GRID_EPOCHS, early_stop: true }
    }
}

/// Problems found while loading a config, reported together.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigErrors(pub Vec<String>);

impl std::fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "config error: {e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

fn one(msg: impl Into<String>) -> ConfigErrors {
    ConfigErrors(vec![msg.into()])
}

/// Parses `path.to.key=value`. The value is read as a TOML literal, falling
/// back to a bare string.
pub fn parse_override(s: &str) -> Result<(Vec<String>, Value), String> {
    let (key, raw) = s.split_once('=').ok_or_else(|| format!("override `{s}` is not of the form key=value"))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(format!("override `{s}` has an empty key segment"));
    }
    let raw = raw.trim();
    let value = toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((path, value))
}

pub fn apply_overrides(root: &mut Table, overrides: &[String]) -> Result<(), ConfigErrors> {
    let mut errs = Vec::new();
    for o in overrides {
        match parse_override(o) {
            Ok((path, value)) => {
                if let Err(e) = set_path(root, &path, value) {
                    errs.push(e);
                }
            }
            Err(e) => errs.push(e),
        }
    }
    if errs.is_empty() {
        Ok(())
    } else {
        Err(ConfigErrors(errs))
    }
}

fn set_path(root: &mut Table, path: &[String], value: Value) -> Result<(), String> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut table = root;
    for (i, seg) in parents.iter().enumerate() {
        let entry = table.entry(seg.clone()).or_insert_with(|| Value::Table(Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| format!("`{}` is not a table", path[..=i].join(".")))?;
    }
    table.insert(last.clone(), value);
    Ok(())
}

/// `exponential-decay`, `exponential_decay` and `ExponentialDecay` all name
/// the same policy.
pub fn normalize_kind(kind: &str) -> String {
    if !kind.contains(['-', '_']) && kind.starts_with(|c: char| c.is_ascii_uppercase()) {
        return kind.to_string();
    }
    kind.split(['-', '_'])
        .filter(|p| !p.is_empty())
        .map(|p| {
            let mut c = p.chars();
            c.next()
                .map(|f| f.to_ascii_uppercase().to_string() + &c.as_str().to_ascii_lowercase())
                .unwrap_or_default()
        })
        .collect()
}

/// Normalizes a policy table in place, filling `epochs` from `default_epochs`.
pub fn fill_policy(policy: &mut Table, default_epochs: i64) {
    if let Some(Value::String(kind)) = policy.get("kind") {
        let k = normalize_kind(kind);
        policy.insert("kind".into(), Value::String(k));
    }
    policy.entry("epochs").or_insert(Value::Integer(default_epochs));
}

fn fill_defaults(root: &mut Table) -> Result<(), String> {
    let train = root
        .entry("train")
        .or_insert_with(|| Value::Table(Table::new()))
        .as_table_mut()
        .ok_or("`train` is not a table")?;
    let epochs = match train.get("epochs") {
        Some(Value::Integer(e)) => *e,
        Some(_) => return Err("train.epochs must be an integer".into()),
        None => TrainSection::default().epochs as i64,
    };
    let policy = train
        .entry("policy")
        .or_insert_with(|| Value::Table(Table::new()))
        .as_table_mut()
        .ok_or("`train.policy` is not a table")?;
    policy.entry("kind").or_insert_with(|| Value::String("ExponentialDecay".into()));
    policy.entry("init_lr").or_insert(Value::Float(1e-2));
    fill_policy(policy, epochs);
    Ok(())
}

impl ExperimentConfig {
    /// Reads `path` (or starts empty), applies overrides and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigErrors> {
        let mut root = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| one(format!("cannot read {}: {e}", p.display())))?;
                toml::from_str::<Table>(&text).map_err(|e| one(format!("{}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        apply_overrides(&mut root, overrides)?;
        Self::from_table(root)
    }

    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self, ConfigErrors> {
        let mut root = toml::from_str::<Table>(text).map_err(|e| one(e.to_string()))?;
        apply_overrides(&mut root, overrides)?;
        Self::from_table(root)
    }

    fn from_table(mut root: Table) -> Result<Self, ConfigErrors> {
        fill_defaults(&mut root).map_err(one)?;
        let cfg: Self = Value::Table(root).try_into().map_err(|e: toml::de::Error| one(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn network_spec(&self) -> NetworkSpec {
        let (h, w) = (self.dataset.height as usize, self.dataset.width as usize);
        let mut spec = NetworkSpec::desk_default(h, w, self.dataset.timesteps);
        spec.input = InputShape { channels: 2, height: h, width: w };
        if let Some(layers) = &self.network.layers {
            spec.layers = layers.clone();
        }
        spec.n_classes = self.network.n_classes;
        spec.lif = LifParams {
            v_rest: self.network.v_rest,
            v_th: self.train.v_th,
            tau: self.network.tau,
            r_in: self.network.r_in,
        };
        spec.surrogate = SurrogateConfig { width_a: self.network.width_a };
        spec
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            policy: self.train.policy,
            batch_size: self.train.batch_size,
            v_th: self.train.v_th,
            epochs: self.train.epochs,
            seed: self.seed,
            stability: self.train.stability,
            early_stop: self.train.early_stop,
            accuracy_source: self.train.accuracy_source,
            clock: self.train.clock(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigErrors> {
        let mut errs = Vec::new();
        let d = &self.dataset;
        match &d.path {
            Some(p) if !p.is_file() => errs.push(format!("dataset.path {} does not exist", p.display())),
            Some(_) => {}
            None => {
                if d.n_samples < 4 || !d.n_samples.is_multiple_of(2) {
                    errs.push(format!("dataset.n_samples must be even and at least 4, got {}", d.n_samples));
                }
                if let Err(snnlr_core::Error::Validation(v)) = d.synthetic().validate() {
                    errs.extend(v.into_iter().map(|m| format!("dataset: {m}")));
                }
            }
        }
        if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
            errs.push(format!("dataset.train_fraction must lie in (0, 1), got {}", d.train_fraction));
        }
        if d.timesteps == 0 {
            errs.push("dataset.timesteps must be at least 1".into());
        }
        if d.width == 0 || d.height == 0 {
            errs.push("dataset dimensions must be non-zero".into());
        } else {
            let mut net_errs = Vec::new();
            self.network_spec().collect_violations(&mut net_errs);
            errs.extend(net_errs.into_iter().map(|m| format!("network: {m}")));
        }
        let mut train_errs = Vec::new();
        self.train_config().collect_violations(&mut train_errs);
        errs.extend(train_errs.into_iter().map(|m| format!("train: {m}")));
        if let Err(snnlr_core::Error::Validation(v)) = self.carbon.profile().validate() {
            errs.extend(v.into_iter().map(|m| format!("carbon: {m}")));
        }
        if self.sweep.lrs.is_empty() {
            errs.push("sweep.lrs must not be empty".into());
        }
        for lr in &self.sweep.lrs {
            if !(lr.is_finite() && *lr > 0.0) {
                errs.push(format!("sweep.lrs entries must be positive, got {lr}"));
            }
        }
        if !(self.sweep.margin >= 0.0) {
            errs.push(format!("sweep.margin must be non-negative, got {}", self.sweep.margin));
        }
        if self.explore.horizon < self.train.epochs {
            errs.push(format!(
                "explore.horizon ({}) must cover train.epochs ({})",
                self.explore.horizon, self.train.epochs
            ));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ConfigErrors(errs))
        }
    }
}
