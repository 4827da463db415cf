//! Event-camera samples: data model, synthetic generator, binary container
//! and accumulation into per-timestep frames.
//!
//! # Container layout
//!
//! All integers little-endian.
//!
//! ```text
//! magic        4 bytes  "EVDS"
//! version      u8       1
//! n_samples    u32
//! per sample:
//!   label      u16
//!   duration   u32      microseconds
//!   width      u16
//!   height     u16
//!   n_events   u32
//!   per event: x u16, y u16, t u32, polarity u8 (1 = positive, 0 = negative)
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, streams};

pub const MAGIC: &[u8; 4] = b"EVDS";
pub const FORMAT_VERSION: u8 = 1;
const SAMPLE_HEADER_BYTES: usize = 2 + 4 + 2 + 2 + 4;
const EVENT_BYTES: usize = 2 + 2 + 4 + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    /// Frame channel this polarity accumulates into.
    pub fn channel(self) -> usize {
        match self {
            Polarity::Positive => 0,
            Polarity::Negative => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub x: u16,
    pub y: u16,
    /// Microseconds since the start of the sample.
    pub t: u32,
    pub polarity: Polarity,
}

/// One labelled recording.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventSample {
    pub events: Vec<Event>,
    pub label: u16,
    pub duration_us: u32,
    pub width: u16,
    pub height: u16,
}

impl EventSample {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Argument("sensor dimensions must be non-zero".into()));
        }
        if self.duration_us == 0 {
            return Err(Error::Argument("sample duration must be non-zero".into()));
        }
        let mut last_t = 0;
        for (i, e) in self.events.iter().enumerate() {
            if e.x >= self.width || e.y >= self.height {
                return Err(Error::Argument(format!(
                    "event {i} at ({}, {}) outside {}x{} sensor",
                    e.x, e.y, self.width, self.height
                )));
            }
            if e.t >= self.duration_us {
                return Err(Error::Argument(format!(
                    "event {i} timestamp {} not below duration {}",
                    e.t, self.duration_us
                )));
            }
            if e.t < last_t {
                return Err(Error::Argument(format!("event {i} out of time order")));
            }
            last_t = e.t;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrameMode {
    /// Per-bin event counts.
    #[default]
    Count,
    /// 1 where at least one event landed.
    Binary,
}

/// Event counts binned into `[timesteps, 2, height, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTensor {
    pub timesteps: usize,
    pub height: usize,
    pub width: usize,
    data: Vec<f64>,
}

impl FrameTensor {
    pub const CHANNELS: usize = 2;

    pub fn zeros(timesteps: usize, height: usize, width: usize) -> Self {
        Self {
            timesteps,
            height,
            width,
            data: vec![0.0; timesteps * Self::CHANNELS * height * width],
        }
    }

    /// Builds a tensor from raw `[t, c, y, x]`-ordered data.
    pub fn from_vec(timesteps: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != timesteps * Self::CHANNELS * height * width {
            return Err(Error::Argument(format!(
                "frame data has {} entries, expected {}",
                data.len(),
                timesteps * Self::CHANNELS * height * width
            )));
        }
        Ok(Self { timesteps, height, width, data })
    }

    pub fn frame_len(&self) -> usize {
        Self::CHANNELS * self.height * self.width
    }

    /// Flattened `[c, y, x]` input of one timestep.
    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn get(&self, t: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(t, c, y, x)]
    }

    fn index(&self, t: usize, c: usize, y: usize, x: usize) -> usize {
        ((t * Self::CHANNELS + c) * self.height + y) * self.width + x
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// Timestep bin of an event at `t` when `duration_us` is split into `timesteps` bins.
pub fn time_bin(t: u32, timesteps: usize, duration_us: u32) -> usize {
    (u64::from(t) * timesteps as u64 / u64::from(duration_us)) as usize
}

pub fn accumulate_frames(sample: &EventSample, timesteps: usize, mode: FrameMode) -> Result<FrameTensor> {
    if timesteps == 0 {
        return Err(Error::Argument("timestep count must be at least 1".into()));
    }
    sample.validate()?;
    let mut frames = FrameTensor::zeros(timesteps, sample.height as usize, sample.width as usize);
    for e in &sample.events {
        let b = time_bin(e.t, timesteps, sample.duration_us);
        let i = frames.index(b, e.polarity.channel(), e.y as usize, e.x as usize);
        match mode {
            FrameMode::Count => frames.data[i] += 1.0,
            FrameMode::Binary => frames.data[i] = 1.0,
        }
    }
    Ok(frames)
}

/// Parameters of the synthetic two-class generator.
///
/// Class 1 samples carry a bar sweeping horizontally across the sensor, its
/// leading edge emitting positive events and its trailing edge negative ones.
/// Class 0 samples are uniform noise with the same event-count distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub width: u16,
    pub height: u16,
    pub duration_us: u32,
    /// Mean events per sample; actual counts are uniform within ±20%.
    pub events_per_sample: usize,
    /// Share of a class-1 sample's events drawn as uniform noise.
    pub noise_fraction: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            width: 32,
            height: 32,
            duration_us: 100_000,
            events_per_sample: 1500,
            noise_fraction: 0.2,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.width == 0 || self.height == 0 {
            errs.push("synthetic sensor dimensions must be non-zero".to_string());
        }
        if self.duration_us == 0 {
            errs.push("synthetic duration must be non-zero".into());
        }
        if !(0.0..=1.0).contains(&self.noise_fraction) {
            errs.push(format!("noise_fraction must lie in [0, 1], got {}", self.noise_fraction));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }
}

/// Generates `n_samples` balanced samples with the default event density.
pub fn generate_synthetic_dataset(
    seed: u64,
    n_samples: usize,
    width: u16,
    height: u16,
    duration_us: u32,
) -> Result<Vec<EventSample>> {
    let cfg = SyntheticConfig { width, height, duration_us, ..SyntheticConfig::default() };
    generate_synthetic(seed, n_samples, &cfg)
}

pub fn generate_synthetic(seed: u64, n_samples: usize, cfg: &SyntheticConfig) -> Result<Vec<EventSample>> {
    cfg.validate()?;
    if n_samples < 2 || !n_samples.is_multiple_of(2) {
        return Err(Error::Argument(format!(
            "need an even number of at least 2 samples, got {n_samples}"
        )));
    }
    Ok((0..n_samples)
        .map(|i| synthetic_sample(seed, i as u64, (i % 2) as u16, cfg))
        .collect())
}

fn synthetic_sample(seed: u64, index: u64, label: u16, cfg: &SyntheticConfig) -> EventSample {
    let mut rng = rng::derive(seed, streams::DATASET, index);
    let (w, h) = (cfg.width as i64, cfg.height as i64);
    let lo = (cfg.events_per_sample as f64 * 0.8).round() as usize;
    let hi = (cfg.events_per_sample as f64 * 1.2).round() as usize;
    let n = rng.gen_range(lo..=hi.max(lo));

    let uniform = |rng: &mut rand_chacha::ChaCha8Rng| Event {
        x: rng.gen_range(0..cfg.width),
        y: rng.gen_range(0..cfg.height),
        t: rng.gen_range(0..cfg.duration_us),
        polarity: if rng.gen_bool(0.5) { Polarity::Positive } else { Polarity::Negative },
    };

    let mut events = Vec::with_capacity(n);
    if label == 0 {
        events.extend((0..n).map(|_| uniform(&mut rng)));
    } else {
        let bar_width = 2;
        let len = rng.gen_range((h / 3).max(1)..=(2 * h / 3).max(1));
        let y0 = rng.gen_range(0..=(h - len).max(0));
        let rightward = rng.gen_bool(0.5);
        let (x_from, x_to) = if rightward { (-bar_width, w + bar_width) } else { (w + bar_width, -bar_width) };
        let dir = if rightward { 1 } else { -1 };
        for _ in 0..n {
            if rng.gen_bool(cfg.noise_fraction) {
                events.push(uniform(&mut rng));
                continue;
            }
            let t = rng.gen_range(0..cfg.duration_us);
            let centre = x_from as f64 + (x_to - x_from) as f64 * f64::from(t) / f64::from(cfg.duration_us);
            let leading = rng.gen_bool(0.5);
            let edge = if leading { centre + dir as f64 } else { centre - (dir * bar_width) as f64 };
            let x = edge.round() as i64;
            if !(0..w).contains(&x) {
                // bar outside the field of view; keep the rate with a noise event
                events.push(uniform(&mut rng));
                continue;
            }
            events.push(Event {
                x: x as u16,
                y: (y0 + rng.gen_range(0..len)).min(h - 1) as u16,
                t,
                polarity: if leading { Polarity::Positive } else { Polarity::Negative },
            });
        }
    }
    events.sort_by_key(|e| e.t);
    EventSample {
        events,
        label,
        duration_us: cfg.duration_us,
        width: cfg.width,
        height: cfg.height,
    }
}

pub fn encode_events(samples: &[EventSample]) -> Result<Vec<u8>> {
    let total_events: usize = samples.iter().map(|s| s.events.len()).sum();
    let mut buf = Vec::with_capacity(9 + samples.len() * SAMPLE_HEADER_BYTES + total_events * EVENT_BYTES);
    buf.extend_from_slice(MAGIC);
    buf.push(FORMAT_VERSION);
    buf.extend_from_slice(&count_u32(samples.len(), "sample count")?.to_le_bytes());
    for s in samples {
        buf.extend_from_slice(&s.label.to_le_bytes());
        buf.extend_from_slice(&s.duration_us.to_le_bytes());
        buf.extend_from_slice(&s.width.to_le_bytes());
        buf.extend_from_slice(&s.height.to_le_bytes());
        buf.extend_from_slice(&count_u32(s.events.len(), "event count")?.to_le_bytes());
        for e in &s.events {
            buf.extend_from_slice(&e.x.to_le_bytes());
            buf.extend_from_slice(&e.y.to_le_bytes());
            buf.extend_from_slice(&e.t.to_le_bytes());
            buf.push(matches!(e.polarity, Polarity::Positive) as u8);
        }
    }
    Ok(buf)
}

fn count_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Argument(format!("{what} {n} does not fit the container")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let end = self.pos + N;
        let chunk = self.bytes.get(self.pos..end).ok_or_else(|| Error::Parse {
            offset: self.pos as u64,
            message: format!("unexpected end of data reading {what}"),
        })?;
        self.pos = end;
        Ok(chunk.try_into().expect("slice length"))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take::<1>(what)?[0])
    }
    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(what)?))
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(what)?))
    }

    fn fail(&self, at: usize, message: String) -> Error {
        Error::Parse { offset: at as u64, message }
    }
}

pub fn decode_events(bytes: &[u8]) -> Result<Vec<EventSample>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take::<4>("magic")?;
    if &magic != MAGIC {
        return Err(r.fail(0, "bad magic, not an event dataset".into()));
    }
    let version = r.u8("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "container version {version}, this build reads version {FORMAT_VERSION}"
        )));
    }
    let n_samples = r.u32("sample count")? as usize;
    // Cap preallocation by what the remaining bytes could possibly hold.
    let mut samples = Vec::with_capacity(n_samples.min(bytes.len() / SAMPLE_HEADER_BYTES));
    for _ in 0..n_samples {
        let header_at = r.pos;
        let label = r.u16("label")?;
        let duration_us = r.u32("duration")?;
        let width = r.u16("width")?;
        let height = r.u16("height")?;
        let n_events = r.u32("event count")? as usize;
        if width == 0 || height == 0 || duration_us == 0 {
            return Err(r.fail(header_at, "sample header has zero dimensions or duration".into()));
        }
        let remaining = (bytes.len() - r.pos) / EVENT_BYTES;
        let mut events = Vec::with_capacity(n_events.min(remaining));
        let mut last_t = 0;
        for _ in 0..n_events {
            let at = r.pos;
            let x = r.u16("event x")?;
            let y = r.u16("event y")?;
            let t = r.u32("event t")?;
            let polarity = match r.u8("event polarity")? {
                0 => Polarity::Negative,
                1 => Polarity::Positive,
                p => return Err(r.fail(at + 8, format!("polarity byte {p} is neither 0 nor 1"))),
            };
            if x >= width || y >= height {
                return Err(r.fail(at, format!("event ({x}, {y}) outside {width}x{height} sensor")));
            }
            if t >= duration_us || t < last_t {
                return Err(r.fail(at + 4, format!("event timestamp {t} out of order or range")));
            }
            last_t = t;
            events.push(Event { x, y, t, polarity });
        }
        samples.push(EventSample { events, label, duration_us, width, height });
    }
    if r.pos != bytes.len() {
        return Err(r.fail(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(samples)
}

pub fn save_events(samples: &[EventSample], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_events(samples)?)?;
    Ok(())
}

pub fn load_events(path: impl AsRef<Path>) -> Result<Vec<EventSample>> {
    decode_events(&fs::read(path)?)
}

/// `index,label,n_events,duration_us` rows for inspection.
pub fn metadata_csv(samples: &[EventSample]) -> String {
    let mut out = String::from("index,label,n_events,duration_us\n");
    for (i, s) in samples.iter().enumerate() {
        let _ = writeln!(out, "{i},{},{},{}", s.label, s.events.len(), s.duration_us);
    }
    out
}

/// Seeded stratified split. Each partition keeps the input order.
pub fn split_dataset(
    samples: &[EventSample],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<EventSample>, Vec<EventSample>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Argument(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let mut labels: Vec<u16> = samples.iter().map(|s| s.label).collect();
    labels.sort_unstable();
    labels.dedup();

    let mut in_train = vec![false; samples.len()];
    for &label in &labels {
        let mut idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].label == label).collect();
        let n_train = (idx.len() as f64 * train_fraction).round() as usize;
        if n_train == 0 || n_train == idx.len() {
            return Err(Error::Argument(format!(
                "class {label} with {} samples cannot put at least one sample in each split at fraction {train_fraction}",
                idx.len()
            )));
        }
        let mut rng = rng::derive(seed, streams::SPLIT, u64::from(label));
        idx.shuffle(&mut rng);
        for &i in &idx[..n_train] {
            in_train[i] = true;
        }
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (s, &t) in samples.iter().zip(&in_train) {
        if t {
            train.push(s.clone());
        } else {
            test.push(s.clone());
        }
    }
    Ok((train, test))
}
