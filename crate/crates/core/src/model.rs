//! Physical parameter set, derived scales and pump bookkeeping.
//!
//! All quantities are dimensionless, measured in units of a reference
//! frequency chosen by the caller (conventionally the mean mechanical
//! frequency, so that `OmegaBar = 1`).

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weak-coupling ratios at or above this value are reported as warnings.
pub const WEAK_COUPLING_WARN: f64 = 0.1;

fn one() -> f64 {
    1.0
}

/// Physical rates of the two-oscillator, one-cavity system.
///
/// The field names in the JSON form are the canonical ones (`Delta1`,
/// `zHO1`, ...); unknown keys are rejected.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemParams {
    pub omega1: f64,
    pub omega2: f64,
    pub g1: f64,
    pub g2: f64,
    pub kappa: f64,
    #[serde(rename = "Delta1")]
    pub delta1: f64,
    #[serde(rename = "Delta2")]
    pub delta2: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    #[serde(rename = "zHO1", default = "one")]
    pub z_ho1: f64,
    #[serde(rename = "zHO2", default = "one")]
    pub z_ho2: f64,
    #[serde(default)]
    pub gamma1: f64,
    #[serde(default)]
    pub gamma2: f64,
    #[serde(default)]
    pub nth1: f64,
    #[serde(default)]
    pub nth2: f64,
}

impl Default for SystemParams {
    fn default() -> Self {
        SystemParams {
            omega1: 1.05,
            omega2: 0.95,
            g1: 0.01,
            g2: 0.01,
            kappa: 1.0,
            delta1: 0.05,
            delta2: -0.05,
            alpha1: 1.0,
            alpha2: 1.0,
            z_ho1: 1.0,
            z_ho2: 1.0,
            gamma1: 0.0,
            gamma2: 0.0,
            nth1: 0.0,
            nth2: 0.0,
        }
    }
}

impl SystemParams {
    pub fn omegas(&self) -> [f64; 2] {
        [self.omega1, self.omega2]
    }

    pub fn couplings(&self) -> [f64; 2] {
        [self.g1, self.g2]
    }

    pub fn detunings(&self) -> [f64; 2] {
        [self.delta1, self.delta2]
    }

    pub fn amplitudes(&self) -> [f64; 2] {
        [self.alpha1, self.alpha2]
    }

    pub fn delta_bar(&self) -> f64 {
        0.5 * (self.delta1 + self.delta2)
    }

    /// Copy with the pump detunings placed symmetrically around `delta_bar`
    /// with splitting `delta1 - delta2 = split`.
    pub fn with_detunings(&self, delta_bar: f64, split: f64) -> SystemParams {
        SystemParams {
            delta1: delta_bar + 0.5 * split,
            delta2: delta_bar - 0.5 * split,
            ..*self
        }
    }

    /// Copy with the mechanical frequencies set from their mean and splitting.
    pub fn with_mechanics(&self, omega_bar: f64, delta_omega: f64) -> SystemParams {
        SystemParams {
            omega1: omega_bar + 0.5 * delta_omega,
            omega2: omega_bar - 0.5 * delta_omega,
            ..*self
        }
    }

    /// Beam-splitter bare resonance `Delta1 - Delta2 = omega1 - omega2` at the given centre.
    pub fn at_bs_resonance(&self, delta_bar: f64) -> SystemParams {
        self.with_detunings(delta_bar, self.omega1 - self.omega2)
    }

    /// Parametric bare resonance `Delta1 - Delta2 = omega1 + omega2` at the given centre.
    pub fn at_pa_resonance(&self, delta_bar: f64) -> SystemParams {
        self.with_detunings(delta_bar, self.omega1 + self.omega2)
    }

    pub fn thermal_enabled(&self) -> bool {
        self.gamma1 > 0.0 || self.gamma2 > 0.0
    }

    /// `g1 g2 alpha1 alpha2 / (kappa |omega1 - omega2|)`.
    pub fn weak_coupling_ratio(&self) -> f64 {
        (self.g1 * self.g2 * self.alpha1 * self.alpha2).abs()
            / (self.kappa * (self.omega1 - self.omega2).abs())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Hard,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Signed distance from the boundary; positive means satisfied.
    pub margin: f64,
    pub severity: Severity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
    pub weak_coupling_ratio: f64,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.checks
            .iter()
            .all(|c| c.passed || c.severity == Severity::Warning)
    }

    pub fn warnings(&self) -> impl Iterator<Item = &Check> {
        self.checks
            .iter()
            .filter(|c| !c.passed && c.severity == Severity::Warning)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks
            .iter()
            .filter(|c| !c.passed && c.severity == Severity::Hard)
    }

    pub fn summary(&self) -> String {
        let bad: Vec<String> = self
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| format!("{} ({:?}, margin {:.3e})", c.name, c.severity, c.margin))
            .collect();
        if bad.is_empty() {
            "all checks passed".to_string()
        } else {
            bad.join("; ")
        }
    }
}

/// Check every invariant of `p`. Non-physical values are hard errors; a
/// large weak-coupling ratio is only a warning so sweeps can probe the
/// boundary of the approximation.
pub fn validate(p: &SystemParams) -> Result<ValidationReport> {
    let mut checks = Vec::new();
    let mut hard = |name: &str, margin: f64| {
        checks.push(Check {
            name: name.to_string(),
            passed: margin > 0.0 && margin.is_finite(),
            margin,
            severity: Severity::Hard,
        })
    };
    hard("omega2 > 0", p.omega2);
    hard("omega1 > omega2", p.omega1 - p.omega2);
    hard("kappa > 0", p.kappa);
    hard("zHO1 > 0", p.z_ho1);
    hard("zHO2 > 0", p.z_ho2);
    // zero is allowed for these, so shift the margin by the smallest positive value
    let nonneg = |v: f64| if v >= 0.0 { v + f64::MIN_POSITIVE } else { v };
    hard("alpha1 >= 0", nonneg(p.alpha1));
    hard("alpha2 >= 0", nonneg(p.alpha2));
    hard("gamma1 >= 0", nonneg(p.gamma1));
    hard("gamma2 >= 0", nonneg(p.gamma2));
    hard("nth1 >= 0", nonneg(p.nth1));
    hard("nth2 >= 0", nonneg(p.nth2));
    for (name, v) in [
        ("g1 finite", p.g1),
        ("g2 finite", p.g2),
        ("Delta1 finite", p.delta1),
        ("Delta2 finite", p.delta2),
    ] {
        hard(name, if v.is_finite() { 1.0 } else { -1.0 });
    }

    let ratio = p.weak_coupling_ratio();
    checks.push(Check {
        name: "weak coupling g1 g2 alpha1 alpha2 / kappa << omega1 - omega2".to_string(),
        passed: ratio < WEAK_COUPLING_WARN,
        margin: WEAK_COUPLING_WARN - ratio,
        severity: Severity::Warning,
    });

    let report = ValidationReport {
        checks,
        weak_coupling_ratio: ratio,
    };
    if report.is_valid() {
        Ok(report)
    } else {
        Err(Error::InvalidParams(report))
    }
}

/// Scales that the closed-form rates are written in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivedScales {
    #[serde(rename = "G1")]
    pub big_g1: f64,
    #[serde(rename = "G2")]
    pub big_g2: f64,
    #[serde(rename = "deltaOmega")]
    pub delta_omega: f64,
    #[serde(rename = "OmegaBar")]
    pub omega_bar: f64,
    #[serde(rename = "DeltaBar")]
    pub delta_bar: f64,
}

/// Effective couplings use the geometric-mean amplitude, which reduces to
/// `G_j = g_j alpha` when the two pumps have equal amplitude.
pub fn derived_scales(p: &SystemParams) -> DerivedScales {
    let alpha = (p.alpha1 * p.alpha2).sqrt();
    DerivedScales {
        big_g1: p.g1 * alpha,
        big_g2: p.g2 * alpha,
        delta_omega: p.omega1 - p.omega2,
        omega_bar: 0.5 * (p.omega1 + p.omega2),
        delta_bar: 0.5 * (p.delta1 + p.delta2),
    }
}

/// Two-tone coherent drive in the lab frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PumpDrive {
    pub eta1: Complex64,
    pub eta2: Complex64,
    #[serde(rename = "omegaL1")]
    pub omega_l1: f64,
    #[serde(rename = "omegaL2")]
    pub omega_l2: f64,
    #[serde(rename = "omegac")]
    pub omega_c: f64,
}

impl PumpDrive {
    pub fn detunings(&self) -> (f64, f64) {
        (self.omega_c - self.omega_l1, self.omega_c - self.omega_l2)
    }
}

/// Classical intracavity amplitudes that cancel the drive terms.
pub fn steady_amplitudes(drive: &PumpDrive, kappa: f64) -> (Complex64, Complex64) {
    let (d1, d2) = drive.detunings();
    let amp = |eta: Complex64, delta: f64| {
        -Complex64::i() * eta / Complex64::new(0.5 * kappa, delta)
    };
    (amp(drive.eta1, d1), amp(drive.eta2, d2))
}

/// Result of converting a complex drive into real, non-negative amplitudes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResolvedDrive {
    pub alpha1: f64,
    pub alpha2: f64,
    /// Phases removed from each amplitude (`alpha_j = |alpha_j| e^{i phase_j}`).
    pub phase1: f64,
    pub phase2: f64,
    pub delta1: f64,
    pub delta2: f64,
}

impl PumpDrive {
    pub fn resolve(&self, kappa: f64) -> Result<ResolvedDrive> {
        if !(kappa > 0.0) {
            return Err(Error::InvalidArgument(format!("kappa must be positive, got {kappa}")));
        }
        if !(self.omega_l2 > self.omega_l1) {
            return Err(Error::InvalidArgument(format!(
                "pump ordering requires omegaL2 > omegaL1 (got {} <= {})",
                self.omega_l2, self.omega_l1
            )));
        }
        let (a1, a2) = steady_amplitudes(self, kappa);
        let (d1, d2) = self.detunings();
        Ok(ResolvedDrive {
            alpha1: a1.norm(),
            alpha2: a2.norm(),
            phase1: a1.arg(),
            phase2: a2.arg(),
            delta1: d1,
            delta2: d2,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn drive(eta1: Complex64, d1: f64) -> PumpDrive {
        PumpDrive {
            eta1,
            eta2: Complex64::new(0.0, 0.0),
            omega_l1: 10.0 - d1,
            omega_l2: 20.0,
            omega_c: 10.0,
        }
    }

    #[test]
    fn amplitude_cancels_for_resonant_drive() {
        let (a1, _) = steady_amplitudes(&drive(Complex64::new(0.0, 0.5), 0.0), 1.0);
        assert_relative_eq!(a1.re, 1.0, epsilon = 1e-15);
        assert_relative_eq!(a1.im, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn zero_drive_gives_zero_amplitude() {
        let (a1, a2) = steady_amplitudes(&drive(Complex64::new(0.0, 0.0), 0.3), 1.0);
        assert_eq!(a1.norm(), 0.0);
        assert_eq!(a2.norm(), 0.0);
    }

    #[test]
    fn detuned_amplitude_matches_hand_arithmetic() {
        // -i / (1 + i) = (-1 - i) / 2
        let (a1, _) = steady_amplitudes(&drive(Complex64::new(1.0, 0.0), 1.0), 2.0);
        assert_relative_eq!(a1.re, -0.5, epsilon = 1e-15);
        assert_relative_eq!(a1.im, -0.5, epsilon = 1e-15);
    }

    #[test]
    fn resolve_strips_phases() {
        let r = drive(Complex64::new(1.0, 0.0), 1.0).resolve(2.0).unwrap();
        assert_relative_eq!(r.alpha1, 0.5f64.sqrt(), epsilon = 1e-15);
        assert_relative_eq!(r.phase1, -0.75 * std::f64::consts::PI, epsilon = 1e-15);
        assert_eq!(r.delta1, 1.0);
    }

    #[test]
    fn resolve_rejects_misordered_pumps() {
        let mut d = drive(Complex64::new(1.0, 0.0), 1.0);
        d.omega_l2 = 1.0;
        assert!(d.resolve(1.0).is_err());
    }

    #[test]
    fn validate_weak_coupling_ratio() {
        let p = SystemParams {
            g1: 0.001,
            g2: 0.001,
            alpha1: 10.0,
            alpha2: 10.0,
            ..SystemParams::default()
        };
        let r = validate(&p).unwrap();
        assert_relative_eq!(r.weak_coupling_ratio, 1e-3, max_relative = 1e-12);
        assert_eq!(r.warnings().count(), 0);
    }

    #[test]
    fn zero_mechanical_frequency_is_hard_error() {
        let p = SystemParams {
            omega2: 0.0,
            ..SystemParams::default()
        };
        match validate(&p) {
            Err(Error::InvalidParams(rep)) => {
                assert!(rep.failures().any(|c| c.name == "omega2 > 0"));
            }
            other => panic!("expected hard error, got {other:?}"),
        }
    }

    #[test]
    fn boundary_coupling_is_warning_only() {
        // G1 G2 / kappa = delta omega = 0.1
        let p = SystemParams {
            g1: 0.1f64.sqrt(),
            g2: 0.1f64.sqrt(),
            ..SystemParams::default()
        };
        let r = validate(&p).unwrap();
        assert_relative_eq!(r.weak_coupling_ratio, 1.0, max_relative = 1e-12);
        assert_eq!(r.warnings().count(), 1);
    }

    #[test]
    fn derived_scale_examples() {
        let p = SystemParams {
            omega1: 1.05,
            omega2: 0.95,
            delta1: 2.05,
            delta2: 1.95,
            g1: 0.01,
            alpha1: 1.0,
            alpha2: 1.0,
            ..SystemParams::default()
        };
        let s = derived_scales(&p);
        assert_relative_eq!(s.delta_omega, 0.1, epsilon = 1e-14);
        assert_relative_eq!(s.omega_bar, 1.0, epsilon = 1e-14);
        assert_relative_eq!(s.delta_bar, 2.0, epsilon = 1e-14);
        assert_relative_eq!(s.big_g1, 0.01, epsilon = 1e-16);
    }

    #[test]
    fn json_rejects_unknown_keys() {
        let s = r#"{"omega1":1.05,"omega2":0.95,"g1":0.01,"g2":0.01,"kappa":1,
            "Delta1":0.05,"Delta2":-0.05,"alpha1":1,"alpha2":1,"bogus":3}"#;
        assert!(serde_json::from_str::<SystemParams>(s).is_err());
        let ok = s.replace(",\"bogus\":3", "");
        let p: SystemParams = serde_json::from_str(&ok).unwrap();
        assert_eq!(p.z_ho1, 1.0);
        assert_eq!(p.gamma1, 0.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn amplitude_is_linear_in_drive(
                re in -3.0..3.0f64, im in -3.0..3.0f64,
                cre in -2.0..2.0f64, cim in -2.0..2.0f64,
                d1 in -5.0..5.0f64, kappa in 0.01..5.0f64,
            ) {
                let c = Complex64::new(cre, cim);
                let base = drive(Complex64::new(re, im), d1);
                let scaled = drive(c * Complex64::new(re, im), d1);
                let (a, _) = steady_amplitudes(&base, kappa);
                let (b, _) = steady_amplitudes(&scaled, kappa);
                prop_assert!((b - c * a).norm() <= 1e-12 * (1.0 + b.norm()));
            }

            #[test]
            fn amplitude_is_lorentzian(
                re in -3.0..3.0f64, im in -3.0..3.0f64,
                d1 in -5.0..5.0f64, kappa in 0.01..5.0f64,
            ) {
                let eta = Complex64::new(re, im);
                let (a, _) = steady_amplitudes(&drive(eta, d1), kappa);
                let expect = eta.norm_sqr() / (kappa * kappa / 4.0 + d1 * d1);
                prop_assert!((a.norm_sqr() - expect).abs() <= 1e-12 * (1.0 + expect));
            }

            #[test]
            fn scales_round_trip(w2 in 0.01..5.0f64, dw in 1e-4..3.0f64) {
                let p = SystemParams { omega1: w2 + dw, omega2: w2, ..SystemParams::default() };
                let s = derived_scales(&p);
                prop_assert!((s.omega_bar + 0.5 * s.delta_omega - p.omega1).abs() <= 4.0 * f64::EPSILON * p.omega1);
                prop_assert!((s.omega_bar - 0.5 * s.delta_omega - p.omega2).abs() <= 4.0 * f64::EPSILON * p.omega1);
                prop_assert!(s.omega_bar > 0.5 * s.delta_omega);
            }
        }
    }
}
