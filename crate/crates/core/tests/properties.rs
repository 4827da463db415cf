mod oracles;

use proptest::prelude::*;
use snnlr_core::carbon::{carbon_emission, emission_reduction, PowerProfile};
use snnlr_core::events::{
    accumulate_frames, decode_events, encode_events, generate_synthetic_dataset, time_bin, Event, EventSample,
    FrameMode, Polarity,
};
use snnlr_core::schedule::{build_schedule, CycleMaxDecay, PolicyConfig, PolicyKind, RestartFormula, RestartMode};
use snnlr_core::snn::{lif_step, LifParams, Network, NetworkSpec};
use snnlr_core::trainer::{first_stable_epoch, stability_check, AccuracySource, EpochRecord, StabilityCriterion};

fn policy() -> impl Strategy<Value = PolicyConfig> {
    let epochs = 20usize..300;
    let init = 1e-5f64..1.0;
    (epochs, init, 0usize..6, any::<u64>()).prop_map(|(epochs, init_lr, k, salt)| {
        let pick = |lo: usize, hi: usize| lo + (salt as usize) % (hi - lo + 1);
        let kind = match k {
            0 => PolicyKind::DecreasingStep { r_f: 0.1 + (salt % 90) as f64 / 100.0, r_int: pick(1, 40) },
            1 => PolicyKind::ExponentialDecay { d_rate: 0.5 + (salt % 50) as f64 / 100.0, d_steps: pick(1, 5) },
            2 => {
                let p_ep = pick(1, epochs / 2 - 1);
                PolicyKind::OneCycle { p_ep, d_ep: p_ep + epochs / 3, start: 1e-5, max: 1e-2, min: 1e-5, end: 1e-8 }
            }
            3 => PolicyKind::Cyclical { min: 1e-5, max: 1e-2, h_cycle: pick(1, 30) },
            4 => {
                // cycle length must divide the horizon
                let divisors: Vec<usize> = (1..=epochs / 2).filter(|d| epochs % d == 0).collect();
                let c_length = divisors[salt as usize % divisors.len()];
                let cycle_max = if salt % 2 == 0 {
                    CycleMaxDecay::Linear
                } else {
                    CycleMaxDecay::Multiplicative { factor: 0.9 }
                };
                PolicyKind::DecreasingCyclical { min: 1e-5, max: 1e-2, c_length, cycle_max }
            }
            _ => {
                let mode = if salt % 2 == 0 {
                    RestartMode::EqualCycles { peaks: pick(1, 10) }
                } else {
                    RestartMode::Geometric { t_max: pick(1, 8), t_mult: pick(1, 3) }
                };
                PolicyKind::WarmRestarts { min: 1e-5, max: 1e-2, mode, formula: RestartFormula::Standard }
            }
        };
        PolicyConfig { init_lr, epochs, kind }
    })
}

proptest! {
    #[test]
    fn schedule_values_stay_in_bounds(cfg in policy()) {
        prop_assume!(cfg.validate().is_ok());
        let t = build_schedule(&cfg).unwrap();
        prop_assert_eq!(t.len(), cfg.epochs);
        let (lo, hi) = cfg.bounds();
        for &lr in t.values() {
            prop_assert!(lr.is_finite() && lr > 0.0);
            prop_assert!(lr >= lo * (1.0 - 1e-12) && lr <= hi * (1.0 + 1e-12), "{lr} outside [{lo}, {hi}]");
        }
    }

    #[test]
    fn decaying_policies_never_increase(cfg in policy()) {
        prop_assume!(matches!(cfg.kind, PolicyKind::DecreasingStep { .. } | PolicyKind::ExponentialDecay { .. }));
        let t = build_schedule(&cfg).unwrap();
        for w in t.values().windows(2) {
            prop_assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn cyclical_is_periodic(h in 1usize..40, extra in 0usize..100) {
        let epochs = 4 * h + extra;
        let cfg = PolicyConfig { init_lr: 0.1, epochs, kind: PolicyKind::Cyclical { min: 1e-5, max: 1e-2, h_cycle: h } };
        let t = build_schedule(&cfg).unwrap();
        for ep in 1..=epochs - 2 * h {
            prop_assert_eq!(t.get(ep), t.get(ep + 2 * h));
        }
    }

    #[test]
    fn csv_round_trips(cfg in policy()) {
        prop_assume!(cfg.validate().is_ok());
        let t = build_schedule(&cfg).unwrap();
        let parsed: Vec<f64> = t.to_csv().lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
        prop_assert_eq!(parsed.as_slice(), t.values());
    }
}

fn sample_strategy() -> impl Strategy<Value = EventSample> {
    (1u16..40, 1u16..40, 1u32..200_000, 0u16..2).prop_flat_map(|(w, h, dur, label)| {
        proptest::collection::vec((0..w, 0..h, 0..dur, any::<bool>()), 0..120).prop_map(move |mut raw| {
            raw.sort_by_key(|e| e.2);
            EventSample {
                events: raw
                    .into_iter()
                    .map(|(x, y, t, p)| Event { x, y, t, polarity: if p { Polarity::Positive } else { Polarity::Negative } })
                    .collect(),
                label,
                duration_us: dur,
                width: w,
                height: h,
            }
        })
    })
}

proptest! {
    #[test]
    fn count_frames_conserve_events(s in sample_strategy(), t_steps in 1usize..20) {
        let f = accumulate_frames(&s, t_steps, FrameMode::Count).unwrap();
        prop_assert_eq!(f.sum(), s.events.len() as f64);
        prop_assert!(f.data().iter().all(|&v| v >= 0.0));
        let b = accumulate_frames(&s, t_steps, FrameMode::Binary).unwrap();
        prop_assert!(b.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn events_land_in_their_bin(s in sample_strategy(), t_steps in 1usize..20) {
        for e in &s.events {
            let b = time_bin(e.t, t_steps, s.duration_us) as u64;
            let (t, n, d) = (u64::from(e.t), t_steps as u64, u64::from(s.duration_us));
            prop_assert!(b * d <= t * n && t * n < (b + 1) * d);
        }
    }

    #[test]
    fn container_round_trips(samples in proptest::collection::vec(sample_strategy(), 0..6)) {
        let bytes = encode_events(&samples).unwrap();
        prop_assert_eq!(decode_events(&bytes).unwrap(), samples);
    }

    #[test]
    fn truncation_is_an_error_not_a_panic(samples in proptest::collection::vec(sample_strategy(), 1..3), cut in 0.0f64..1.0) {
        let bytes = encode_events(&samples).unwrap();
        let n = (bytes.len() as f64 * cut) as usize;
        prop_assert!(decode_events(&bytes[..n]).is_err());
    }

    #[test]
    fn generator_is_deterministic(seed in any::<u64>()) {
        let a = encode_events(&generate_synthetic_dataset(seed, 4, 16, 16, 50_000).unwrap()).unwrap();
        let b = encode_events(&generate_synthetic_dataset(seed, 4, 16, 16, 50_000).unwrap()).unwrap();
        prop_assert_eq!(a, b);
    }
}

fn profile() -> impl Strategy<Value = PowerProfile> {
    (0.0f64..500.0, 0.0f64..200.0, 0.0f64..800.0, 0u32..9).prop_map(|(p_cpu, p_mem, p_gpu, g)| PowerProfile { p_cpu, p_mem, p_gpu, g })
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1e-300)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn emission_is_linear(p in profile(), q in profile(), hours in 0.0f64..100.0, k in 0.0f64..10.0) {
        let e = |p: &PowerProfile, h: f64| carbon_emission(p, h).unwrap().co2e_lbs;
        prop_assert!(close(e(&p, k * hours), k * e(&p, hours)));
        // superposition in the power terms (same GPU count)
        let sum = PowerProfile { p_cpu: p.p_cpu + q.p_cpu, p_mem: p.p_mem + q.p_mem, p_gpu: p.p_gpu + q.p_gpu, g: p.g };
        let q_same = PowerProfile { g: p.g, ..q };
        prop_assert!(close(e(&sum, hours), e(&p, hours) + e(&q_same, hours)));
        let r = carbon_emission(&p, hours).unwrap();
        prop_assert_eq!(r.co2e_lbs, 0.954 * r.p_train_kw * r.duration_h);
    }

    #[test]
    fn emission_is_monotone(p in profile(), hours in 0.0f64..100.0, bump in 0.0f64..100.0, field in 0usize..5) {
        let base = carbon_emission(&p, hours).unwrap().co2e_lbs;
        let (q, h) = match field {
            0 => (PowerProfile { p_cpu: p.p_cpu + bump, ..p }, hours),
            1 => (PowerProfile { p_mem: p.p_mem + bump, ..p }, hours),
            2 => (PowerProfile { p_gpu: p.p_gpu + bump, ..p }, hours),
            3 => (PowerProfile { g: p.g + 1, ..p }, hours),
            _ => (p, hours + bump),
        };
        prop_assert!(carbon_emission(&q, h).unwrap().co2e_lbs >= base);
    }

    #[test]
    fn reduction_equals_time_reduction(p in profile(), base_h in 0.1f64..100.0, frac in 0.0f64..1.0) {
        prop_assume!(p.g > 0 && p.p_gpu > 0.0);
        let base = carbon_emission(&p, base_h).unwrap();
        let cand = carbon_emission(&p, base_h * frac).unwrap();
        let r = emission_reduction(&cand, &base).unwrap();
        prop_assert!((r - 100.0 * (1.0 - frac)).abs() < 1e-9);
    }
}

proptest! {
    #[test]
    fn subthreshold_response_superposes(
        a in proptest::collection::vec(-1.0f64..1.0, 50),
        b in proptest::collection::vec(-1.0f64..1.0, 50),
        alpha in -2.0f64..2.0,
        beta in -2.0f64..2.0,
    ) {
        let p = LifParams { v_rest: 0.2, v_th: 1e9, tau: 3.0, r_in: 1.5 };
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| alpha * x + beta * y).collect();
        let (ta, tb, tm) = (
            oracles::subthreshold_trajectory(&p, &a),
            oracles::subthreshold_trajectory(&p, &b),
            oracles::subthreshold_trajectory(&p, &mix),
        );
        let mut v = p.v_rest;
        for i in 0..50 {
            let (next, spike) = lif_step(v, mix[i], &p).unwrap();
            prop_assert!(!spike);
            prop_assert!((next - tm[i]).abs() <= 1e-12);
            v = next;
            let lin = p.v_rest + alpha * (ta[i] - p.v_rest) + beta * (tb[i] - p.v_rest);
            prop_assert!((tm[i] - lin).abs() <= 1e-9);
        }
    }

    #[test]
    fn spike_resets_to_rest(v in -1.0f64..1.0, i_in in -2.0f64..4.0) {
        let p = LifParams::default();
        let (next, spike) = lif_step(v, i_in, &p).unwrap();
        if spike {
            prop_assert_eq!(next, p.v_rest);
        } else {
            prop_assert!(next < p.v_th);
        }
    }

    #[test]
    fn spike_counts_bounded_by_timesteps(seed in any::<u64>(), t_steps in 1usize..6) {
        let data = generate_synthetic_dataset(seed, 2, 12, 12, 10_000).unwrap();
        let net = Network::new(NetworkSpec::desk_default(12, 12, t_steps), seed).unwrap();
        for s in &data {
            let f = accumulate_frames(s, t_steps, FrameMode::Count).unwrap();
            let pass = net.forward(&f).unwrap();
            prop_assert!(pass.spike_counts.iter().all(|&c| (0.0..=t_steps as f64).contains(&c) && c.fract() == 0.0));
            let cache = pass.cache.unwrap();
            for l in 0..3 {
                for t in 0..t_steps {
                    prop_assert!(cache.spikes(l, t).iter().all(|&s| s == 0.0 || s == 1.0));
                }
            }
        }
    }
}

fn records(accs: &[f64]) -> Vec<EpochRecord> {
    accs.iter()
        .enumerate()
        .map(|(i, &a)| EpochRecord {
            epoch: i + 1,
            lr: 1e-2,
            train_accuracy: a,
            test_accuracy: a,
            train_loss: 0.0,
            wall_time_s: 1.0,
            stable_so_far: false,
        })
        .collect()
}

proptest! {
    #[test]
    fn first_stable_epoch_is_minimal(accs in proptest::collection::vec(40.0f64..100.0, 0..60), th in 0.1f64..20.0) {
        let crit = StabilityCriterion { window: 10, acc_th: th };
        let found = first_stable_epoch(&records(&accs), &crit, AccuracySource::Test);
        match found {
            Some(e) => {
                prop_assert!(e >= crit.window);
                prop_assert!(stability_check(&accs[..e], &crit));
                for n in 0..e {
                    prop_assert!(!stability_check(&accs[..n], &crit));
                }
            }
            None => {
                for n in 0..=accs.len() {
                    prop_assert!(!stability_check(&accs[..n], &crit));
                }
            }
        }
    }

    #[test]
    fn oscillation_beyond_threshold_never_stabilizes(amp in 2.01f64..20.0, len in 0usize..200) {
        let accs: Vec<f64> = (0..len).map(|i| if i % 2 == 0 { 80.0 - amp / 2.0 } else { 80.0 + amp / 2.0 }).collect();
        let crit = StabilityCriterion::default();
        prop_assert_eq!(first_stable_epoch(&records(&accs), &crit, AccuracySource::Test), None);
    }
}
