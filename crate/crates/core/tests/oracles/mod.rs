//! Independent reference implementations used as test oracles.
//!
//! Nothing here calls into the library's schedule or network code: the
//! schedules are line-by-line transcriptions of the policy pseudocode with
//! their running state, and the network oracle is a plain dense LIF
//! simulator evaluated by central finite differences.

#![allow(dead_code)]

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use snnlr_core::events::FrameTensor;
use snnlr_core::schedule::{
    CycleMaxDecay, PolicyConfig, PolicyKind, RestartFormula, RestartMode,
};
use snnlr_core::snn::{InputShape, LayerSpec, LifParams, Network, NetworkSpec, SpikeFn, SurrogateConfig};

pub const EPOCHS: usize = 200;
pub const INIT: f64 = 0.1;

pub fn decreasing_step_trace(init: f64, r_f: f64, r_int: usize, epochs: usize) -> Vec<f64> {
    let mut out = Vec::new();
    let mut cur_lr = init;
    for ep in 1..=epochs {
        if ep % r_int == 0 {
            cur_lr *= r_f;
        }
        out.push(cur_lr);
    }
    out
}

pub fn exponential_decay_trace(init: f64, d_rate: f64, d_steps: usize, epochs: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for ep in 1..=epochs {
        let lr = init * d_rate.powf(ep as f64 / d_steps as f64);
        out.push(lr);
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn one_cycle_trace(epochs: usize, p_ep: usize, d_ep: usize, start: f64, max: f64, min: f64, end: f64) -> Vec<f64> {
    let mut out = Vec::new();
    for ep in 1..=epochs {
        let ep_f = ep as f64;
        let lr = if ep < p_ep {
            start + (max - start) / p_ep as f64 * ep_f
        } else if ep < d_ep {
            max - (max - min) / (d_ep - p_ep) as f64 * (ep_f - p_ep as f64)
        } else {
            min - (min - end) / (epochs - d_ep) as f64 * (ep_f - d_ep as f64)
        };
        out.push(lr);
    }
    out
}

pub fn cyclical_trace(epochs: usize, min: f64, max: f64, h_cycle: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for ep in 1..=epochs {
        let cycle_pos = ep % (h_cycle * 2);
        let lr = if cycle_pos < h_cycle {
            min + (max - min) * cycle_pos as f64 / h_cycle as f64
        } else {
            max - (max - min) * (cycle_pos - h_cycle) as f64 / h_cycle as f64
        };
        out.push(lr);
    }
    out
}

pub fn decreasing_cyclical_trace(epochs: usize, max: f64, min: f64, c_length: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for ep in 1..=epochs {
        let n_cycles = (ep / c_length) as f64;
        let lr_dec = (max - min) / ((epochs / c_length) as f64 - 1.0);
        let cur_max = max - lr_dec * n_cycles;
        let cur_prog = (ep % c_length) as f64 / c_length as f64;
        let mut lr = cur_max - (cur_max - min) * cur_prog;
        lr = lr.max(min);
        out.push(lr);
    }
    out
}

/// Geometric warm restarts. With `running = true` the cosine restarts from
/// the previous epoch's rate exactly as the pseudocode's recurrence reads;
/// otherwise every cycle restarts from `top`.
pub fn warm_restarts_trace(epochs: usize, top: f64, min: f64, t_max: usize, t_mult: usize, running: bool) -> Vec<f64> {
    let mut out = Vec::new();
    let mut lr = top;
    for ep in 1..=epochs {
        let mut t_i = t_max;
        let mut t_cur = ep;
        for _i in 0..=ep {
            if t_cur < t_i {
                break;
            }
            t_cur -= t_i;
            t_i *= t_mult;
        }
        let from = if running { lr } else { top };
        lr = min + (from - min) * 0.5 * (1.0 + (PI * t_cur as f64 / t_i as f64).cos());
        out.push(lr);
    }
    out
}

/// Equal-length cosine cycles, boundaries at floor(k * epochs / peaks).
pub fn equal_cycles_trace(epochs: usize, top: f64, min: f64, peaks: usize) -> Vec<f64> {
    let bounds: Vec<usize> = (0..=peaks).map(|k| k * epochs / peaks).collect();
    (1..=epochs)
        .map(|ep| {
            // number of boundaries already reached
            let k = (1..=peaks).filter(|&j| bounds[j] <= ep).count();
            let start = bounds[k];
            let len = if k == peaks { epochs / peaks } else { bounds[k + 1] - bounds[k] };
            let t_cur = ep - start;
            min + (top - min) * 0.5 * (1.0 + (PI * t_cur as f64 / len as f64).cos())
        })
        .collect()
}

/// The six policies at their pseudocode defaults (step factor 0.5) with
/// their reference traces.
pub fn reference_policies() -> Vec<(&'static str, PolicyConfig, Vec<f64>)> {
    let e = EPOCHS;
    vec![
        (
            "decreasing step",
            PolicyConfig { init_lr: INIT, epochs: e, kind: PolicyKind::DecreasingStep { r_f: 0.5, r_int: 20 } },
            decreasing_step_trace(INIT, 0.5, 20, e),
        ),
        (
            "exponential decay",
            PolicyConfig { init_lr: INIT, epochs: e, kind: PolicyKind::ExponentialDecay { d_rate: 0.98, d_steps: 1 } },
            exponential_decay_trace(INIT, 0.98, 1, e),
        ),
        (
            "one-cycle",
            PolicyConfig {
                init_lr: INIT,
                epochs: e,
                kind: PolicyKind::OneCycle { p_ep: 90, d_ep: 180, start: 1e-5, max: 1e-2, min: 1e-5, end: 1e-8 },
            },
            one_cycle_trace(e, 90, 180, 1e-5, 1e-2, 1e-5, 1e-8),
        ),
        (
            "cyclical",
            PolicyConfig { init_lr: INIT, epochs: e, kind: PolicyKind::Cyclical { min: 1e-5, max: 1e-2, h_cycle: 25 } },
            cyclical_trace(e, 1e-5, 1e-2, 25),
        ),
        (
            "decreasing cyclical",
            PolicyConfig {
                init_lr: INIT,
                epochs: e,
                kind: PolicyKind::DecreasingCyclical { min: 1e-5, max: 1e-2, c_length: 40, cycle_max: CycleMaxDecay::Linear },
            },
            decreasing_cyclical_trace(e, 1e-2, 1e-5, 40),
        ),
        (
            "warm restarts",
            PolicyConfig {
                init_lr: INIT,
                epochs: e,
                kind: PolicyKind::WarmRestarts {
                    min: 1e-5,
                    max: 1e-2,
                    mode: RestartMode::Geometric { t_max: 4, t_mult: 2 },
                    formula: RestartFormula::Standard,
                },
            },
            warm_restarts_trace(e, 1e-2, 1e-5, 4, 2, false),
        ),
        (
            "warm restarts (running recurrence)",
            PolicyConfig {
                init_lr: INIT,
                epochs: e,
                kind: PolicyKind::WarmRestarts {
                    min: 1e-5,
                    max: 1e-2,
                    mode: RestartMode::Geometric { t_max: 4, t_mult: 2 },
                    formula: RestartFormula::LiteralRecurrence,
                },
            },
            warm_restarts_trace(e, INIT, 1e-5, 4, 2, true),
        ),
    ]
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let scale = x.abs().max(y.abs());
            if scale == 0.0 {
                0.0
            } else {
                (x - y).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}

/// Dense LIF network simulated directly from the neuron equations.
pub struct DenseOracle {
    pub sizes: Vec<usize>,
    pub lif: LifParams,
    pub width_a: f64,
}

/// Reset gates of every layer, timestep and neuron.
pub type Gates = Vec<Vec<Vec<f64>>>;

pub struct OracleRun {
    pub loss: f64,
    pub gates: Gates,
    /// Smallest distance of any candidate potential to the edge of the
    /// surrogate window; positive means every probe point is interior.
    pub window_margin: f64,
}

impl DenseOracle {
    /// Relaxed forward pass. Spikes are `clamp((u - v_th)/a + 1/2, 0, 1)`.
    /// With `frozen` set, the reset uses those gates instead of the live
    /// spikes, which is what a gradient-stopped reset differentiates.
    pub fn run(&self, weights: &[Vec<f64>], inputs: &[Vec<f64>], target: usize, frozen: Option<&Gates>) -> OracleRun {
        let p = &self.lif;
        let t_steps = inputs.len();
        let n_layers = self.sizes.len() - 1;
        let mut v: Vec<Vec<f64>> = (1..=n_layers).map(|l| vec![p.v_rest; self.sizes[l]]).collect();
        let mut gates: Gates = vec![Vec::new(); n_layers];
        let n_out = self.sizes[n_layers];
        let mut counts = vec![0.0; n_out];
        let mut margin = f64::INFINITY;
        for (t, frame) in inputs.iter().enumerate() {
            let mut x = frame.clone();
            for l in 0..n_layers {
                let (n_in, n) = (self.sizes[l], self.sizes[l + 1]);
                let mut s = vec![0.0; n];
                let mut g_row = vec![0.0; n];
                for o in 0..n {
                    let mut i_in = 0.0;
                    for i in 0..n_in {
                        i_in += weights[l][o * n_in + i] * x[i];
                    }
                    let u = v[l][o] + (-(v[l][o] - p.v_rest) + p.r_in * i_in) / p.tau;
                    margin = margin.min(self.width_a / 2.0 - (u - p.v_th).abs());
                    s[o] = ((u - p.v_th) / self.width_a + 0.5).clamp(0.0, 1.0);
                    let g = frozen.map_or(s[o], |f| f[l][t][o]);
                    g_row[o] = s[o];
                    v[l][o] = u * (1.0 - g) + p.v_rest * g;
                }
                gates[l].push(g_row);
                x = s;
            }
            for (c, s) in counts.iter_mut().zip(&x) {
                *c += s;
            }
        }
        let loss = counts
            .iter()
            .enumerate()
            .map(|(c, k)| {
                let y = if c == target { 1.0 } else { 0.0 };
                (k / t_steps as f64 - y).powi(2)
            })
            .sum::<f64>()
            / n_out as f64;
        OracleRun { loss, gates, window_margin: margin }
    }
}

pub struct GradCheck {
    pub n_weights: usize,
    pub max_rel_err: f64,
    pub window_margin: f64,
}

/// Compares the library's backward pass with central differences of the
/// oracle on a 6-8-2 dense network over 3 timesteps.
pub fn gradient_check(seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes = vec![6, 8, 2];
    let t_steps = 3;
    // Wide window so every candidate potential stays in the linear part of
    // the relaxed spike and the loss is smooth at the probe points.
    let lif = LifParams { v_rest: 0.0, v_th: 0.4, tau: 2.0, r_in: 1.0 };
    let width_a = 12.0;
    let weights: Vec<Vec<f64>> = sizes
        .windows(2)
        .map(|w| (0..w[0] * w[1]).map(|_| rng.gen_range(-0.8..0.8)).collect())
        .collect();
    let inputs: Vec<Vec<f64>> = (0..t_steps).map(|_| (0..6).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
    let target = rng.gen_range(0..2);

    let spec = NetworkSpec {
        input: InputShape { channels: 2, height: 1, width: 3 },
        layers: vec![
            LayerSpec::Dense { in_features: 6, out_features: 8 },
            LayerSpec::Dense { in_features: 8, out_features: 2 },
        ],
        lif,
        surrogate: SurrogateConfig { width_a },
        timesteps: t_steps,
        n_classes: 2,
    };
    let net = Network::with_weights(spec, weights.clone(), seed).unwrap();
    let frames = FrameTensor::from_vec(t_steps, 1, 3, inputs.concat()).unwrap();
    let pass = net.forward_with(&frames, SpikeFn::Relaxed).unwrap();
    let analytic = net.backward(&pass, target, 1.0).unwrap();

    let oracle = DenseOracle { sizes, lif, width_a };
    let base = oracle.run(&weights, &inputs, target, None);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut margin = base.window_margin;
    let mut n = 0;
    for l in 0..weights.len() {
        for k in 0..weights[l].len() {
            let mut plus = weights.clone();
            plus[l][k] += h;
            let mut minus = weights.clone();
            minus[l][k] -= h;
            let up = oracle.run(&plus, &inputs, target, Some(&base.gates));
            let down = oracle.run(&minus, &inputs, target, Some(&base.gates));
            margin = margin.min(up.window_margin).min(down.window_margin);
            let fd = (up.loss - down.loss) / (2.0 * h);
            let g = analytic.layers[l][k];
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-8);
            worst = worst.max(rel);
            n += 1;
        }
    }
    GradCheck { n_weights: n, max_rel_err: worst, window_margin: margin }
}

/// Sub-threshold membrane trajectory for a current sequence, v_th out of reach.
pub fn subthreshold_trajectory(p: &LifParams, currents: &[f64]) -> Vec<f64> {
    let mut v = p.v_rest;
    currents
        .iter()
        .map(|&i| {
            v += (-(v - p.v_rest) + p.r_in * i) / p.tau;
            v
        })
        .collect()
}
