//! Discrete-time leaky integrate-and-fire layers trained by backpropagation
//! through time with a rectangular surrogate derivative.
//!
//! Each layer integrates its input current with a forward-Euler step of
//! `dV/dt = (-(V - V_r) + R*I) / tau` (one timestep per frame), fires when
//! the candidate potential reaches `V_th` and hard-resets to `V_r`. The
//! reset path is treated as a constant in the backward pass.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::FrameTensor;
use crate::rng::{self, streams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LifParams {
    pub v_rest: f64,
    pub v_th: f64,
    /// Membrane time constant in timesteps.
    pub tau: f64,
    pub r_in: f64,
}

impl Default for LifParams {
    fn default() -> Self {
        Self { v_rest: 0.0, v_th: 0.4, tau: 2.0, r_in: 3.0 }
    }
}

impl LifParams {
    fn collect_violations(&self, errs: &mut Vec<String>) {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            errs.push(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.r_in > 0.0 && self.r_in.is_finite()) {
            errs.push(format!("r_in must be positive, got {}", self.r_in));
        }
        if !(self.v_th > self.v_rest) {
            errs.push(format!(
                "v_th ({}) must exceed v_rest ({})",
                self.v_th, self.v_rest
            ));
        }
    }

    /// Euler candidate potential before the threshold test.
    #[inline]
    pub fn integrate(&self, v: f64, i_in: f64) -> f64 {
        v + (-(v - self.v_rest) + self.r_in * i_in) / self.tau
    }
}

/// One LIF update. Returns the next stored potential and whether it fired.
pub fn lif_step(v: f64, i_in: f64, p: &LifParams) -> Result<(f64, bool)> {
    if !v.is_finite() || !i_in.is_finite() {
        return Err(Error::Numeric(format!("lif_step(v={v}, i_in={i_in})")));
    }
    let u = p.integrate(v, i_in);
    if u >= p.v_th {
        Ok((p.v_rest, true))
    } else {
        Ok((u, false))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateConfig {
    /// Width of the rectangular window centred on `v_th`.
    pub width_a: f64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self { width_a: 1.0 }
    }
}

/// Stand-in for the derivative of the spike function at candidate potential `u`.
#[inline]
pub fn surrogate_grad(u: f64, cfg: &SurrogateConfig, p: &LifParams) -> f64 {
    if (u - p.v_th).abs() <= cfg.width_a / 2.0 {
        1.0 / cfg.width_a
    } else {
        0.0
    }
}

/// Continuous spike whose derivative is exactly [`surrogate_grad`].
#[inline]
fn relaxed_spike(u: f64, cfg: &SurrogateConfig, p: &LifParams) -> f64 {
    ((u - p.v_th) / cfg.width_a + 0.5).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum LayerSpec {
    Dense { in_features: usize, out_features: usize },
    Conv2d { in_ch: usize, out_ch: usize, kernel: usize, stride: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input: InputShape,
    pub layers: Vec<LayerSpec>,
    pub lif: LifParams,
    pub surrogate: SurrogateConfig,
    pub timesteps: usize,
    pub n_classes: usize,
}

/// Layer with every dimension resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Layer {
    Dense { n_in: usize, n_out: usize },
    Conv {
        in_ch: usize,
        in_h: usize,
        in_w: usize,
        out_ch: usize,
        out_h: usize,
        out_w: usize,
        k: usize,
        s: usize,
    },
}

impl Layer {
    fn n_in(&self) -> usize {
        match *self {
            Layer::Dense { n_in, .. } => n_in,
            Layer::Conv { in_ch, in_h, in_w, .. } => in_ch * in_h * in_w,
        }
    }

    fn n_out(&self) -> usize {
        match *self {
            Layer::Dense { n_out, .. } => n_out,
            Layer::Conv { out_ch, out_h, out_w, .. } => out_ch * out_h * out_w,
        }
    }

    fn n_weights(&self) -> usize {
        match *self {
            Layer::Dense { n_in, n_out } => n_in * n_out,
            Layer::Conv { in_ch, out_ch, k, .. } => out_ch * in_ch * k * k,
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            Layer::Dense { n_in, .. } => n_in,
            Layer::Conv { in_ch, k, .. } => in_ch * k * k,
        }
    }
}

impl NetworkSpec {
    /// Conv2d(2->8, k=5, s=2) -> Dense(->32) -> Dense(->2).
    pub fn desk_default(height: usize, width: usize, timesteps: usize) -> Self {
        let input = InputShape { channels: FrameTensor::CHANNELS, height, width };
        let conv = LayerSpec::Conv2d { in_ch: 2, out_ch: 8, kernel: 5, stride: 2 };
        let out_h = height.saturating_sub(5) / 2 + 1;
        let out_w = width.saturating_sub(5) / 2 + 1;
        Self {
            input,
            layers: vec![
                conv,
                LayerSpec::Dense { in_features: 8 * out_h * out_w, out_features: 32 },
                LayerSpec::Dense { in_features: 32, out_features: 2 },
            ],
            lif: LifParams::default(),
            surrogate: SurrogateConfig::default(),
            timesteps,
            n_classes: 2,
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

    pub fn collect_violations(&self, errs: &mut Vec<String>) {
        self.lif.collect_violations(errs);
        if !(self.surrogate.width_a > 0.0 && self.surrogate.width_a.is_finite()) {
            errs.push(format!("surrogate width must be positive, got {}", self.surrogate.width_a));
        }
        if self.timesteps == 0 {
            errs.push("timesteps must be at least 1".into());
        }
        if self.n_classes == 0 {
            errs.push("n_classes must be at least 1".into());
        }
        if let Err(e) = self.resolve() {
            errs.push(e);
        }
    }

    fn resolve(&self) -> std::result::Result<Vec<Layer>, String> {
        if self.input.is_empty() {
            return Err("input shape must be non-empty".into());
        }
        if self.layers.is_empty() {
            return Err("network needs at least one layer".into());
        }
        // (channels, height, width) while still spatial
        let mut spatial = Some((self.input.channels, self.input.height, self.input.width));
        let mut flat = self.input.len();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let layer = match *l {
                LayerSpec::Conv2d { in_ch, out_ch, kernel, stride } => {
                    let (c, h, w) = spatial
                        .ok_or_else(|| format!("layer {i}: conv2d cannot follow a dense layer"))?;
                    if in_ch != c {
                        return Err(format!("layer {i}: conv2d expects {in_ch} channels, input has {c}"));
                    }
                    if out_ch == 0 || kernel == 0 || stride == 0 {
                        return Err(format!("layer {i}: conv2d sizes must be positive"));
                    }
                    if kernel > h || kernel > w {
                        return Err(format!("layer {i}: kernel {kernel} larger than {h}x{w} input"));
                    }
                    let (out_h, out_w) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
                    spatial = Some((out_ch, out_h, out_w));
                    Layer::Conv { in_ch, in_h: h, in_w: w, out_ch, out_h, out_w, k: kernel, s: stride }
                }
                LayerSpec::Dense { in_features, out_features } => {
                    if in_features != flat {
                        return Err(format!(
                            "layer {i}: dense expects {in_features} inputs, previous layer gives {flat}"
                        ));
                    }
                    if out_features == 0 {
                        return Err(format!("layer {i}: dense needs at least one output"));
                    }
                    spatial = None;
                    Layer::Dense { n_in: in_features, n_out: out_features }
                }
            };
            flat = layer.n_out();
            out.push(layer);
        }
        if flat != self.n_classes {
            return Err(format!(
                "final layer has {flat} outputs but n_classes is {}",
                self.n_classes
            ));
        }
        Ok(out)
    }

    pub fn n_weights(&self) -> Result<usize> {
        let layers = self.resolve().map_err(|e| Error::Validation(vec![e]))?;
        Ok(layers.iter().map(Layer::n_weights).sum())
    }
}

/// How the forward pass turns a candidate potential into a spike.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpikeFn {
    /// Binary spike, the model as trained and evaluated.
    Heaviside,
    /// Ramp `clamp((u - v_th)/a + 1/2, 0, 1)`, whose derivative is the
    /// rectangular surrogate. Used to check gradients numerically.
    Relaxed,
}

/// Trajectories of one layer over a forward pass, `[t * n + i]`.
#[derive(Debug, Clone)]
struct LayerTrace {
    candidate: Vec<f64>,
    spikes: Vec<f64>,
}

/// Per-timestep trajectories kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Vec<f64>>,
    layers: Vec<LayerTrace>,
}

impl ForwardCache {
    /// Spikes of layer `l` at timestep `t`.
    pub fn spikes(&self, l: usize, t: usize) -> &[f64] {
        let n = self.layers[l].spikes.len() / self.inputs.len();
        &self.layers[l].spikes[t * n..(t + 1) * n]
    }

    /// Candidate potentials (before the threshold test) of layer `l` at timestep `t`.
    pub fn candidates(&self, l: usize, t: usize) -> &[f64] {
        let n = self.layers[l].candidate.len() / self.inputs.len();
        &self.layers[l].candidate[t * n..(t + 1) * n]
    }
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Output spikes summed over all timesteps, one entry per class.
    pub spike_counts: Vec<f64>,
    pub cache: Option<ForwardCache>,
}

impl ForwardPass {
    /// Argmax of the spike counts; ties go to the lowest class index.
    pub fn prediction(&self) -> usize {
        predict(&self.spike_counts)
    }
}

pub fn predict(counts: &[f64]) -> usize {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

/// Mean squared error between firing rates `count / T` and the one-hot target.
pub fn rate_mse(counts: &[f64], target: usize, timesteps: usize) -> f64 {
    let n = counts.len() as f64;
    counts
        .iter()
        .enumerate()
        .map(|(c, &k)| {
            let y = if c == target { 1.0 } else { 0.0 };
            let d = k / timesteps as f64 - y;
            d * d
        })
        .sum::<f64>()
        / n
}

/// Weight gradients, laid out like [`Network::weights`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Self { layers: net.weights.iter().map(|w| vec![0.0; w.len()]).collect() }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.layers.iter_mut().flatten().for_each(|x| *x *= k);
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers.iter().flatten().copied()
    }
}

/// Summed gradients and statistics of a mini-batch.
#[derive(Debug, Clone)]
pub struct BatchResult {
    pub grad_sum: Gradients,
    pub loss_sum: f64,
    pub correct: usize,
    pub len: usize,
}

/// Samples per gradient-accumulation chunk; fixed so reductions do not
/// depend on the worker count.
const CHUNK: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<Layer>,
    weights: Vec<Vec<f64>>,
    seed: u64,
}

impl Network {
    /// Uniform init in `[-b, b]` with `b = sqrt(1 / fan_in)`.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let layers = spec.resolve().map_err(|e| Error::Validation(vec![e]))?;
        let weights = layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let bound = (1.0 / l.fan_in() as f64).sqrt();
                let mut rng = rng::derive(seed, streams::WEIGHTS, i as u64);
                (0..l.n_weights()).map(|_| rng.gen_range(-bound..=bound)).collect()
            })
            .collect();
        Ok(Self { spec, layers, weights, seed })
    }

    /// Network with caller-provided weights.
    pub fn with_weights(spec: NetworkSpec, weights: Vec<Vec<f64>>, seed: u64) -> Result<Self> {
        spec.validate()?;
        let layers = spec.resolve().map_err(|e| Error::Validation(vec![e]))?;
        if weights.len() != layers.len()
            || weights.iter().zip(&layers).any(|(w, l)| w.len() != l.n_weights())
        {
            return Err(Error::Argument("weight shapes do not match the network spec".into()));
        }
        Ok(Self { spec, layers, weights, seed })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.weights
    }

    pub fn set_v_th(&mut self, v_th: f64) -> Result<()> {
        let mut lif = self.spec.lif;
        lif.v_th = v_th;
        let mut errs = Vec::new();
        lif.collect_violations(&mut errs);
        if !errs.is_empty() {
            return Err(Error::Validation(errs));
        }
        self.spec.lif = lif;
        Ok(())
    }

    fn check_input(&self, input: &FrameTensor) -> Result<()> {
        let want = self.spec.input;
        if input.timesteps != self.spec.timesteps
            || input.height != want.height
            || input.width != want.width
            || FrameTensor::CHANNELS != want.channels
        {
            return Err(Error::Argument(format!(
                "input is {}x{}x{}x{}, network expects {}x{}x{}x{}",
                input.timesteps,
                FrameTensor::CHANNELS,
                input.height,
                input.width,
                self.spec.timesteps,
                want.channels,
                want.height,
                want.width
            )));
        }
        Ok(())
    }

    /// Runs all timesteps with freshly reset membranes and keeps the trajectories.
    pub fn forward(&self, input: &FrameTensor) -> Result<ForwardPass> {
        self.run(input, SpikeFn::Heaviside, true)
    }

    /// Forward pass without a cache, for evaluation.
    pub fn forward_eval(&self, input: &FrameTensor) -> Result<ForwardPass> {
        self.run(input, SpikeFn::Heaviside, false)
    }

    pub fn forward_with(&self, input: &FrameTensor, spike_fn: SpikeFn) -> Result<ForwardPass> {
        self.run(input, spike_fn, true)
    }

    fn run(&self, input: &FrameTensor, spike_fn: SpikeFn, keep: bool) -> Result<ForwardPass> {
        self.check_input(input)?;
        let t_steps = self.spec.timesteps;
        let lif = &self.spec.lif;
        let sur = &self.spec.surrogate;

        let mut membranes: Vec<Vec<f64>> =
            self.layers.iter().map(|l| vec![lif.v_rest; l.n_out()]).collect();
        let mut traces: Vec<LayerTrace> = self
            .layers
            .iter()
            .map(|l| {
                let n = if keep { l.n_out() * t_steps } else { 0 };
                LayerTrace { candidate: Vec::with_capacity(n), spikes: Vec::with_capacity(n) }
            })
            .collect();
        let n_classes = self.spec.n_classes;
        let mut counts = vec![0.0; n_classes];
        let mut current: Vec<f64> = Vec::new();
        let mut spikes: Vec<f64> = Vec::new();
        let mut prev: Vec<f64> = Vec::new();

        for t in 0..t_steps {
            let frame = input.frame(t);
            for (l, layer) in self.layers.iter().enumerate() {
                let x: &[f64] = if l == 0 { frame } else { &prev };
                current.clear();
                current.resize(layer.n_out(), 0.0);
                linear_forward(layer, &self.weights[l], x, &mut current);

                spikes.clear();
                let v = &mut membranes[l];
                for (vi, &i_in) in v.iter_mut().zip(&current) {
                    let u = lif.integrate(*vi, i_in);
                    let s = match spike_fn {
                        SpikeFn::Heaviside => {
                            if u >= lif.v_th {
                                *vi = lif.v_rest;
                                1.0
                            } else {
                                *vi = u;
                                0.0
                            }
                        }
                        SpikeFn::Relaxed => {
                            let s = relaxed_spike(u, sur, lif);
                            *vi = u * (1.0 - s) + lif.v_rest * s;
                            s
                        }
                    };
                    if keep {
                        traces[l].candidate.push(u);
                    }
                    spikes.push(s);
                }
                if keep {
                    traces[l].spikes.extend_from_slice(&spikes);
                }
                std::mem::swap(&mut prev, &mut spikes);
            }
            for (c, s) in counts.iter_mut().zip(&prev) {
                *c += s;
            }
        }

        let cache = keep.then(|| ForwardCache {
            inputs: (0..t_steps).map(|t| input.frame(t).to_vec()).collect(),
            layers: traces,
        });
        Ok(ForwardPass { spike_counts: counts, cache })
    }

    /// Gradient of `loss_scale * rate_mse` w.r.t. every weight, unrolled
    /// over time with the surrogate in place of the spike derivative.
    pub fn backward(&self, pass: &ForwardPass, target: usize, loss_scale: f64) -> Result<Gradients> {
        let cache = pass
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("backward needs a forward pass with a cache".into()))?;
        if target >= self.spec.n_classes {
            return Err(Error::Argument(format!(
                "target class {target} out of range for {} classes",
                self.spec.n_classes
            )));
        }
        let t_steps = self.spec.timesteps;
        let lif = &self.spec.lif;
        let sur = &self.spec.surrogate;
        let n_classes = self.spec.n_classes;
        let leak = 1.0 - 1.0 / lif.tau;
        let drive = lif.r_in / lif.tau;

        // dL/ds for the top layer, identical at every timestep.
        let top: Vec<f64> = pass
            .spike_counts
            .iter()
            .enumerate()
            .map(|(c, &k)| {
                let y = if c == target { 1.0 } else { 0.0 };
                loss_scale * 2.0 * (k / t_steps as f64 - y) / (n_classes as f64 * t_steps as f64)
            })
            .collect();
        let mut d_spikes: Vec<f64> = top.repeat(t_steps);

        let mut grads = Gradients::zeros_like(self);
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let n = layer.n_out();
            let trace = &cache.layers[l];
            let mut d_below = if l > 0 { vec![0.0; layer.n_in() * t_steps] } else { Vec::new() };
            let mut dv_next = vec![0.0; n];
            let mut d_current = vec![0.0; n];
            for t in (0..t_steps).rev() {
                let u = &trace.candidate[t * n..(t + 1) * n];
                let s = &trace.spikes[t * n..(t + 1) * n];
                let ds = &d_spikes[t * n..(t + 1) * n];
                let mut any = false;
                for i in 0..n {
                    let du = ds[i] * surrogate_grad(u[i], sur, lif) + dv_next[i] * (1.0 - s[i]);
                    dv_next[i] = du * leak;
                    d_current[i] = du * drive;
                    any |= d_current[i] != 0.0;
                }
                if !any {
                    continue;
                }
                let x: &[f64] = if l == 0 { &cache.inputs[t] } else { cache.spikes(l - 1, t) };
                linear_backward_weights(layer, x, &d_current, &mut grads.layers[l]);
                if l > 0 {
                    let m = layer.n_in();
                    linear_backward_input(
                        layer,
                        &self.weights[l],
                        &d_current,
                        &mut d_below[t * m..(t + 1) * m],
                    );
                }
            }
            d_spikes = d_below;
        }
        Ok(grads)
    }

    /// Forward and backward over a mini-batch, combining per-sample
    /// gradients in sample order.
    pub fn batch_gradients(&self, batch: &[(&FrameTensor, usize)]) -> Result<BatchResult> {
        let partials: Vec<Result<BatchResult>> = batch
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut acc = BatchResult {
                    grad_sum: Gradients::zeros_like(self),
                    loss_sum: 0.0,
                    correct: 0,
                    len: 0,
                };
                for &(frames, target) in chunk {
                    let pass = self.forward(frames)?;
                    acc.loss_sum += rate_mse(&pass.spike_counts, target, self.spec.timesteps);
                    acc.correct += usize::from(pass.prediction() == target);
                    acc.len += 1;
                    acc.grad_sum.add_assign(&self.backward(&pass, target, 1.0)?);
                }
                Ok(acc)
            })
            .collect();
        let mut total = BatchResult {
            grad_sum: Gradients::zeros_like(self),
            loss_sum: 0.0,
            correct: 0,
            len: 0,
        };
        for p in partials {
            let p = p?;
            total.grad_sum.add_assign(&p.grad_sum);
            total.loss_sum += p.loss_sum;
            total.correct += p.correct;
            total.len += p.len;
        }
        Ok(total)
    }

    /// `w <- w - lr * grad_sum / batch_size`.
    pub fn update_weights(&mut self, grad_sum: &Gradients, lr: f64, batch_size: usize) -> Result<()> {
        if batch_size == 0 {
            return Err(Error::Argument("batch size must be at least 1".into()));
        }
        if grad_sum.layers.len() != self.weights.len()
            || grad_sum.layers.iter().zip(&self.weights).any(|(g, w)| g.len() != w.len())
        {
            return Err(Error::Argument("gradient shapes do not match the weights".into()));
        }
        let step = lr / batch_size as f64;
        for (w, g) in self.weights.iter_mut().zip(&grad_sum.layers) {
            for (wi, gi) in w.iter_mut().zip(g) {
                *wi -= step * gi;
            }
        }
        Ok(())
    }

    /// Fraction (0..=1) of samples classified correctly.
    pub fn accuracy(&self, samples: &[(&FrameTensor, usize)]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::Argument("cannot evaluate an empty set".into()));
        }
        let correct: Result<Vec<bool>> = samples
            .par_iter()
            .map(|&(x, y)| Ok(self.forward_eval(x)?.prediction() == y))
            .collect();
        Ok(correct?.into_iter().filter(|&c| c).count() as f64 / samples.len() as f64)
    }

    pub fn all_finite(&self) -> bool {
        self.weights.iter().flatten().all(|w| w.is_finite())
    }
}

fn linear_forward(layer: &Layer, w: &[f64], x: &[f64], out: &mut [f64]) {
    match *layer {
        Layer::Dense { n_in, n_out } => {
            let active: Vec<(usize, f64)> =
                x.iter().copied().enumerate().filter(|&(_, v)| v != 0.0).collect();
            for (o, acc) in out.iter_mut().enumerate().take(n_out) {
                let row = &w[o * n_in..(o + 1) * n_in];
                *acc = active.iter().map(|&(j, v)| row[j] * v).sum();
            }
        }
        Layer::Conv { in_ch, in_h, in_w, out_ch, out_h, out_w, k, s } => {
            // scatter from the (sparse) non-zero inputs
            for ic in 0..in_ch {
                for iy in 0..in_h {
                    for ix in 0..in_w {
                        let v = x[(ic * in_h + iy) * in_w + ix];
                        if v == 0.0 {
                            continue;
                        }
                        for_each_tap(iy, ix, k, s, out_h, out_w, |ky, kx, oy, ox| {
                            for oc in 0..out_ch {
                                out[(oc * out_h + oy) * out_w + ox] +=
                                    w[((oc * in_ch + ic) * k + ky) * k + kx] * v;
                            }
                        });
                    }
                }
            }
        }
    }
}

fn linear_backward_weights(layer: &Layer, x: &[f64], d_out: &[f64], gw: &mut [f64]) {
    match *layer {
        Layer::Dense { n_in, .. } => {
            let active: Vec<(usize, f64)> =
                x.iter().copied().enumerate().filter(|&(_, v)| v != 0.0).collect();
            for (o, &d) in d_out.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &mut gw[o * n_in..(o + 1) * n_in];
                for &(j, v) in &active {
                    row[j] += d * v;
                }
            }
        }
        Layer::Conv { in_ch, in_h, in_w, out_ch, out_h, out_w, k, s } => {
            for ic in 0..in_ch {
                for iy in 0..in_h {
                    for ix in 0..in_w {
                        let v = x[(ic * in_h + iy) * in_w + ix];
                        if v == 0.0 {
                            continue;
                        }
                        for_each_tap(iy, ix, k, s, out_h, out_w, |ky, kx, oy, ox| {
                            for oc in 0..out_ch {
                                gw[((oc * in_ch + ic) * k + ky) * k + kx] +=
                                    d_out[(oc * out_h + oy) * out_w + ox] * v;
                            }
                        });
                    }
                }
            }
        }
    }
}

fn linear_backward_input(layer: &Layer, w: &[f64], d_out: &[f64], d_in: &mut [f64]) {
    match *layer {
        Layer::Dense { n_in, .. } => {
            for (o, &d) in d_out.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &w[o * n_in..(o + 1) * n_in];
                for (di, &wi) in d_in.iter_mut().zip(row) {
                    *di += wi * d;
                }
            }
        }
        Layer::Conv { in_ch, in_h, in_w, out_ch, out_h, out_w, k, s } => {
            for oc in 0..out_ch {
                for oy in 0..out_h {
                    for ox in 0..out_w {
                        let d = d_out[(oc * out_h + oy) * out_w + ox];
                        if d == 0.0 {
                            continue;
                        }
                        for ic in 0..in_ch {
                            for ky in 0..k {
                                for kx in 0..k {
                                    d_in[(ic * in_h + oy * s + ky) * in_w + ox * s + kx] +=
                                        w[((oc * in_ch + ic) * k + ky) * k + kx] * d;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Calls `f(ky, kx, oy, ox)` for every output position reading input pixel `(iy, ix)`.
#[inline]
fn for_each_tap(
    iy: usize,
    ix: usize,
    k: usize,
    s: usize,
    out_h: usize,
    out_w: usize,
    mut f: impl FnMut(usize, usize, usize, usize),
) {
    for ky in 0..k.min(iy + 1) {
        let dy = iy - ky;
        if !dy.is_multiple_of(s) || dy / s >= out_h {
            continue;
        }
        for kx in 0..k.min(ix + 1) {
            let dx = ix - kx;
            if !dx.is_multiple_of(s) || dx / s >= out_w {
                continue;
            }
            f(ky, kx, dy / s, dx / s);
        }
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"SNNW";
const CHECKPOINT_VERSION: u8 = 1;

impl Network {
    /// `magic, version, u32 spec-JSON length, spec JSON, u64 seed,
    /// u32 layer count, per layer (u64 length, f64 weights)`; little-endian.
    pub fn to_checkpoint(&self) -> Result<Vec<u8>> {
        let spec = serde_json::to_vec(&self.spec)
            .map_err(|e| Error::Format(format!("cannot encode network spec: {e}")))?;
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.push(CHECKPOINT_VERSION);
        buf.extend_from_slice(&(spec.len() as u32).to_le_bytes());
        buf.extend_from_slice(&spec);
        buf.extend_from_slice(&self.seed.to_le_bytes());
        buf.extend_from_slice(&(self.weights.len() as u32).to_le_bytes());
        for w in &self.weights {
            buf.extend_from_slice(&(w.len() as u64).to_le_bytes());
            for x in w {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(buf)
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize, what: &str| -> Result<&[u8]> {
            let chunk = bytes.get(pos..pos + n).ok_or_else(|| Error::Parse {
                offset: pos as u64,
                message: format!("unexpected end of checkpoint reading {what}"),
            })?;
            pos += n;
            Ok(chunk)
        };
        if take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Parse { offset: 0, message: "not a network checkpoint".into() });
        }
        let version = take(1, "version")?[0];
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("checkpoint version {version} unsupported")));
        }
        let spec_len = u32::from_le_bytes(take(4, "spec length")?.try_into().unwrap()) as usize;
        let spec_at = 9;
        let spec: NetworkSpec = serde_json::from_slice(take(spec_len, "spec")?)
            .map_err(|e| Error::Parse { offset: spec_at, message: format!("bad network spec: {e}") })?;
        let seed = u64::from_le_bytes(take(8, "seed")?.try_into().unwrap());
        let n_layers = u32::from_le_bytes(take(4, "layer count")?.try_into().unwrap()) as usize;
        let mut weights = Vec::new();
        for _ in 0..n_layers.min(1024) {
            let len = u64::from_le_bytes(take(8, "layer length")?.try_into().unwrap()) as usize;
            let raw = take(len.saturating_mul(8), "weights")?;
            weights.push(
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            );
        }
        Network::with_weights(spec, weights, seed)
    }
}
