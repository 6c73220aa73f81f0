use omsim::coeffs::{
    bs_rates, pa_rates, resonance_mismatch, spring_shift, CoeffSetBS, CoeffSetPA, ResonanceCheck,
    ResonanceKind, RESONANCE_TOL,
};
use omsim::model::{derived_scales, DerivedScales, SystemParams};
use serde::Serialize;

use crate::error::CliResult;
use crate::io::{ParamsSpec, VERSION};

#[derive(Debug, Serialize)]
struct ResonanceStatus {
    #[serde(flatten)]
    check: ResonanceCheck,
    satisfied: bool,
}

impl ResonanceStatus {
    fn of(p: &SystemParams, kind: ResonanceKind) -> ResonanceStatus {
        let check = resonance_mismatch(p, kind);
        let tol = RESONANCE_TOL * 0.5 * (p.omega1 + p.omega2);
        ResonanceStatus {
            satisfied: check.satisfied(tol),
            check,
        }
    }
}

/// Field order here is the key order of the JSON output.
#[derive(Debug, Serialize)]
struct CoeffsReport {
    version: &'static str,
    params: SystemParams,
    #[serde(rename = "DerivedScales")]
    scales: DerivedScales,
    #[serde(rename = "dOmega")]
    spring_shifts: [f64; 2],
    weak_coupling_ratio: f64,
    #[serde(rename = "resonanceBS")]
    resonance_bs: ResonanceStatus,
    #[serde(rename = "resonancePA")]
    resonance_pa: ResonanceStatus,
    /// Closed-form rates; only meaningful where the matching resonance holds.
    #[serde(rename = "BS")]
    bs: CoeffSetBS,
    #[serde(rename = "PA")]
    pa: CoeffSetPA,
}

/// Pretty JSON with derived scales, both coefficient sets and the spring shifts.
pub fn run(spec: &ParamsSpec, bare: bool) -> CliResult<Vec<u8>> {
    let p = spec.resolve(bare)?;
    let scales = derived_scales(&p);
    let report = CoeffsReport {
        version: VERSION,
        params: p,
        scales,
        spring_shifts: [spring_shift(&p, 0), spring_shift(&p, 1)],
        weak_coupling_ratio: p.weak_coupling_ratio(),
        resonance_bs: ResonanceStatus::of(&p, ResonanceKind::BS),
        resonance_pa: ResonanceStatus::of(&p, ResonanceKind::PA),
        bs: bs_rates(&scales, p.kappa),
        pa: pa_rates(&scales, p.kappa),
    };
    let mut out = serde_json::to_vec_pretty(&report).expect("report serializes");
    out.push(b'\n');
    Ok(out)
}
