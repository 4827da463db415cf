//! Training power and CO2-equivalent emission estimates.
//!
//! Units: component powers in watts, training power in kilowatts, duration
//! in hours, emissions in pounds of CO2e.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Power usage effectiveness applied to the summed component power.
pub const PUE: f64 = 1.58;
/// Pounds of CO2e emitted per kilowatt-hour.
pub const LBS_CO2E_PER_KWH: f64 = 0.954;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PowerProfile {
    /// Average CPU power, watts.
    pub p_cpu: f64,
    /// Average DRAM power, watts.
    pub p_mem: f64,
    /// Average power of one GPU, watts.
    pub p_gpu: f64,
    /// Number of GPUs.
    pub g: u32,
}

/// Which components count towards training power.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PowerMode {
    /// GPU processes only; CPU and DRAM power are ignored.
    #[default]
    GpuOnly,
    Full,
}

impl PowerProfile {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        for (name, v) in [("p_cpu", self.p_cpu), ("p_mem", self.p_mem), ("p_gpu", self.p_gpu)] {
            if !(v.is_finite() && v >= 0.0) {
                errs.push(format!("{name} must be a non-negative number of watts, got {v}"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }

    /// The profile as seen under `mode`.
    pub fn for_mode(self, mode: PowerMode) -> Self {
        match mode {
            PowerMode::Full => self,
            PowerMode::GpuOnly => Self { p_cpu: 0.0, p_mem: 0.0, ..self },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmissionReport {
    pub p_train_kw: f64,
    pub duration_h: f64,
    pub co2e_lbs: f64,
}

/// Total training power in kilowatts.
pub fn training_power(profile: &PowerProfile) -> Result<f64> {
    profile.validate()?;
    Ok(PUE * (profile.p_cpu + profile.p_mem + f64::from(profile.g) * profile.p_gpu) / 1000.0)
}

pub fn carbon_emission(profile: &PowerProfile, duration_h: f64) -> Result<EmissionReport> {
    if !(duration_h.is_finite() && duration_h >= 0.0) {
        return Err(Error::Argument(format!(
            "training duration must be a non-negative number of hours, got {duration_h}"
        )));
    }
    let p_train_kw = training_power(profile)?;
    Ok(EmissionReport {
        p_train_kw,
        duration_h,
        co2e_lbs: LBS_CO2E_PER_KWH * p_train_kw * duration_h,
    })
}

/// Percent of the baseline's emission saved by the candidate.
pub fn emission_reduction(candidate: &EmissionReport, baseline: &EmissionReport) -> Result<f64> {
    if !(baseline.co2e_lbs > 0.0) {
        return Err(Error::Argument("baseline emission must be positive".into()));
    }
    Ok(100.0 * (1.0 - candidate.co2e_lbs / baseline.co2e_lbs))
}

/// A labelled emission row for comparison tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmissionRow {
    pub label: String,
    pub report: EmissionReport,
    pub reduction_pct: Option<f64>,
}

/// `label,p_train_kw,hours,co2e_lbs,reduction_pct`; an empty reduction
/// column marks a row without a baseline.
pub fn emission_csv(rows: &[EmissionRow]) -> String {
    let mut out = String::from("label,p_train_kw,hours,co2e_lbs,reduction_pct\n");
    for r in rows {
        let reduction = r.reduction_pct.map(|p| format!("{p:.2}")).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{:.6},{:.9},{:.9},{}",
            r.label, r.report.p_train_kw, r.report.duration_h, r.report.co2e_lbs, reduction
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile(g: u32) -> PowerProfile {
        PowerProfile { p_cpu: 100.0, p_mem: 50.0, p_gpu: 300.0, g }
    }

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    #[test]
    fn power_examples() {
        assert!(rel(training_power(&profile(1)).unwrap(), 0.711) < 1e-12);
        assert!(rel(training_power(&profile(2)).unwrap(), 1.185) < 1e-12);
        assert_eq!(training_power(&PowerProfile::default()).unwrap(), 0.0);
    }

    #[test]
    fn emission_examples() {
        let r = carbon_emission(&profile(1), 9.0).unwrap();
        assert!(rel(r.co2e_lbs, 6.104646) < 1e-12);
        assert_eq!(r.co2e_lbs, LBS_CO2E_PER_KWH * r.p_train_kw * r.duration_h);
        assert_eq!(carbon_emission(&profile(1), 0.0).unwrap().co2e_lbs, 0.0);
        let twice = carbon_emission(&profile(1), 18.0).unwrap();
        assert!(rel(twice.co2e_lbs, 2.0 * r.co2e_lbs) < 1e-15);
    }

    #[test]
    fn rejects_negative_inputs() {
        assert!(carbon_emission(&profile(1), -1.0).is_err());
        let bad = PowerProfile { p_cpu: -1.0, p_gpu: -2.0, ..profile(1) };
        match training_power(&bad) {
            Err(Error::Validation(v)) => assert_eq!(v.len(), 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn reductions() {
        let base = carbon_emission(&profile(1), 200.0).unwrap();
        assert_eq!(emission_reduction(&base, &base).unwrap(), 0.0);
        let fast = carbon_emission(&profile(1), 19.0).unwrap();
        assert!((emission_reduction(&fast, &base).unwrap() - 90.5).abs() < 1e-9);
        let zero = carbon_emission(&profile(1), 0.0).unwrap();
        assert_eq!(emission_reduction(&zero, &base).unwrap(), 100.0);
        assert!(emission_reduction(&base, &zero).is_err());
    }

    #[test]
    fn gpu_only_mode_drops_host_power() {
        let p = profile(1).for_mode(PowerMode::GpuOnly);
        assert_eq!((p.p_cpu, p.p_mem, p.p_gpu), (0.0, 0.0, 300.0));
        assert_eq!(profile(1).for_mode(PowerMode::Full), profile(1));
    }

    #[test]
    fn csv_shape() {
        let base = carbon_emission(&profile(1), 2.0).unwrap();
        let csv = emission_csv(&[
            EmissionRow { label: "base".into(), report: base, reduction_pct: None },
            EmissionRow { label: "fast".into(), report: base, reduction_pct: Some(0.0) },
        ]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "label,p_train_kw,hours,co2e_lbs,reduction_pct");
        assert!(lines[1].ends_with(','));
        assert!(lines[2].ends_with(",0.00"));
    }
}
