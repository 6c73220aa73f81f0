use std::path::Path;

use omsim::coeffs::{bs_coefficients, pa_coefficients};
use omsim::dynamics::{
    compare_tiers, evolve_with, CompareOptions, EvolveOptions, IntegratorDiagnostics, ModelTier,
    TierKind,
};
use omsim::fock::{partial_trace, write_snapshot, DensityMatrix, FockSpace};
use omsim::model::SystemParams;
use omsim::observables::{covariance, duan_value, occupations};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::io::{num, write_atomic, CsvOut, ParamsSpec, ResonanceSpec};

/// Rate that a scaled time refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RateName {
    #[serde(rename = "JBS")]
    Jbs,
    #[serde(rename = "JPA")]
    Jpa,
    #[serde(rename = "GammaPlus")]
    GammaPlus,
}

/// Either an absolute time or `value / |rate|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TimeSpec {
    Absolute(f64),
    Scaled { value: f64, per: RateName },
}

impl TimeSpec {
    pub fn resolve(self, p: &SystemParams) -> CliResult<f64> {
        match self {
            TimeSpec::Absolute(t) => Ok(t),
            TimeSpec::Scaled { value, per } => {
                let rate = match per {
                    RateName::Jbs => bs_coefficients(p)?.j_bs,
                    RateName::Jpa => pa_coefficients(p)?.j_pa,
                    RateName::GammaPlus => pa_coefficients(p)?.gamma_plus,
                };
                if rate == 0.0 {
                    return Err(CliError::Validation(format!("{per:?} vanishes at these parameters")));
                }
                Ok(value / rate.abs())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitialState {
    Vacuum,
    Fock(Vec<usize>),
    Thermal(Vec<f64>),
}

impl InitialState {
    /// Mechanical two-mode state.
    fn build(&self, space: &FockSpace) -> CliResult<DensityMatrix> {
        let bad = |what: String| CliError::Validation(format!("initial state: {what}"));
        match self {
            InitialState::Vacuum => Ok(DensityMatrix::vacuum(space)),
            InitialState::Fock(n) => {
                if n.len() != 2 {
                    return Err(bad(format!("need 2 occupations, got {}", n.len())));
                }
                for (k, (&occ, &cut)) in n.iter().zip(space.cutoffs()).enumerate() {
                    if occ > cut {
                        return Err(bad(format!("mode {k} occupation {occ} exceeds cutoff {cut}")));
                    }
                }
                Ok(DensityMatrix::fock(space, n)?)
            }
            InitialState::Thermal(n) => {
                if n.len() != 2 || n.iter().any(|&v| !(v >= 0.0)) {
                    return Err(bad(format!("need 2 non-negative mean occupations, got {n:?}")));
                }
                Ok(DensityMatrix::thermal(space, n)?)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Observable {
    Occupations,
    Covariance,
    Duan,
    Trace,
    TopPopulation,
}

fn default_true() -> bool {
    true
}

fn default_cutoffs() -> [usize; 2] {
    [6, 6]
}

fn default_cavity() -> usize {
    2
}

fn default_observables() -> Vec<Observable> {
    vec![Observable::Occupations]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub params: SystemParams,
    #[serde(default)]
    pub resonance: Option<ResonanceSpec>,
    pub tier: TierKind,
    #[serde(default = "default_true")]
    pub thermal: bool,
    #[serde(default = "default_true")]
    pub dissipation: bool,
    #[serde(default)]
    pub mechanical_drive: bool,
    /// Mechanical cutoffs.
    #[serde(default = "default_cutoffs")]
    pub cutoffs: [usize; 2],
    #[serde(default = "default_cavity")]
    pub cavity_cutoff: usize,
    pub initial: InitialState,
    pub t_end: TimeSpec,
    pub dt: TimeSpec,
    #[serde(default = "default_observables")]
    pub observables: Vec<Observable>,
    #[serde(default)]
    pub snapshot_times: Vec<TimeSpec>,
    /// Run every tier side by side instead of `tier` alone.
    #[serde(default)]
    pub compare: bool,
    #[serde(default)]
    pub options: Option<EvolveOptions>,
}

/// Run settings after resonance placement and time scaling.
#[derive(Debug, Clone, Serialize)]
struct Resolved<'a> {
    params: SystemParams,
    t_end: f64,
    dt: f64,
    snapshot_times: Vec<f64>,
    config: &'a RunConfig,
}

impl RunConfig {
    fn model_tier(&self) -> ModelTier {
        let mut t = ModelTier::new(self.tier).with_thermal(self.thermal);
        if !self.dissipation {
            t = t.without_dissipation();
        }
        if self.mechanical_drive {
            t = t.with_mechanical_drive();
        }
        t
    }
}

fn frame_name(kind: TierKind) -> &'static str {
    if kind.is_effective() {
        "spring-shifted"
    } else {
        "mechanical-rotating"
    }
}

pub struct RunOutput {
    pub csv: Vec<u8>,
    pub diagnostics: Vec<(TierKind, IntegratorDiagnostics)>,
}

pub fn run(cfg: &RunConfig, bare: bool, side_dir: &Path, stem: &str) -> CliResult<RunOutput> {
    let p = ParamsSpec {
        params: cfg.params,
        resonance: cfg.resonance,
    }
    .resolve(bare)?;
    let t_end = cfg.t_end.resolve(&p)?;
    let dt = cfg.dt.resolve(&p)?;
    if !(t_end > 0.0 && dt > 0.0 && t_end.is_finite() && dt.is_finite()) {
        return Err(CliError::Validation(format!(
            "need finite t_end > 0 and dt > 0, got {t_end} and {dt}"
        )));
    }
    let snapshot_times = cfg
        .snapshot_times
        .iter()
        .map(|s| s.resolve(&p))
        .collect::<CliResult<Vec<f64>>>()?;
    let resolved = Resolved {
        params: p,
        t_end,
        dt,
        snapshot_times: snapshot_times.clone(),
        config: cfg,
    };
    let mech_space = FockSpace::new(&cfg.cutoffs)?;
    let rho0 = cfg.initial.build(&mech_space)?;
    let opts = cfg.options.unwrap_or_default();
    if cfg.compare {
        return compare(&p, &rho0, t_end, dt, cfg, &opts, &resolved);
    }
    let tier = cfg.model_tier();
    let start = if cfg.tier == TierKind::FullDisplaced {
        let cavity = DensityMatrix::vacuum(&FockSpace::new(&[cfg.cavity_cutoff])?);
        DensityMatrix::product(&[cavity, rho0])?
    } else {
        rho0
    };

    let n_samples = (t_end / dt - 1e-9).ceil().max(1.0) as usize;
    // requested snapshot times land on the nearest output sample
    let snap_index: Vec<usize> = snapshot_times
        .iter()
        .map(|&t| ((t / dt).round().max(0.0) as usize).min(n_samples))
        .collect();
    let mut rows = Vec::new();
    let mut snapshots = Vec::new();
    let mut k = 0;
    let diag = evolve_with(&tier, &p, &start, t_end, dt, &opts, |t, s| {
        for (j, _) in snap_index.iter().enumerate().filter(|(_, &i)| i == k) {
            snapshots.push((j, t, s.clone()));
        }
        let mech = if cfg.tier == TierKind::FullDisplaced {
            partial_trace(s, &[1, 2])?
        } else {
            s.clone()
        };
        rows.push(observable_row(t, s, &mech, &cfg.observables)?);
        k += 1;
        Ok(())
    })?;

    for (j, t, s) in &snapshots {
        let path = side_dir.join(format!("{stem}_snap{j}.txt"));
        let mut buf = Vec::new();
        write_snapshot(&mut buf, s, *t, frame_name(cfg.tier))?;
        write_atomic(&path, &buf)?;
    }

    let mut out = CsvOut::new("evolve", &resolved)?;
    out.comment(&format!("tier: {}, frame: {}", cfg.tier.name(), frame_name(cfg.tier)));
    out.comment(&format!("diagnostics: {}", serde_json::to_string(&diag).expect("serializes")));
    let csv = out.table(observable_header(&cfg.observables), rows)?;
    Ok(RunOutput {
        csv,
        diagnostics: vec![(cfg.tier, diag)],
    })
}

fn observable_header(obs: &[Observable]) -> Vec<String> {
    let mut h = vec!["time".to_string()];
    for o in obs {
        match o {
            Observable::Occupations => h.extend(["n1".into(), "n2".into()]),
            Observable::Covariance => {
                for i in 0..4 {
                    for j in i..4 {
                        h.push(format!("V{i}{j}"));
                    }
                }
            }
            Observable::Duan => h.push("duan".into()),
            Observable::Trace => h.push("trace".into()),
            Observable::TopPopulation => h.extend(["top1".into(), "top2".into()]),
        }
    }
    h
}

/// Observables of the mechanical state `mech`; the trace is taken of the full `state`.
fn observable_row(
    t: f64,
    state: &DensityMatrix,
    mech: &DensityMatrix,
    obs: &[Observable],
) -> omsim::Result<Vec<String>> {
    let mut row = vec![num(t)];
    for o in obs {
        match o {
            Observable::Occupations => row.extend(occupations(mech).into_iter().map(num)),
            Observable::Covariance => {
                let v = covariance(mech)?.matrix;
                for i in 0..4 {
                    for j in i..4 {
                        row.push(num(v[(i, j)]));
                    }
                }
            }
            Observable::Duan => row.push(num(duan_value(&covariance(mech)?))),
            Observable::Trace => row.push(num(state.trace().re)),
            Observable::TopPopulation => row.extend(mech.top_level_populations().into_iter().map(num)),
        }
    }
    Ok(row)
}

fn compare(
    p: &SystemParams,
    rho0: &DensityMatrix,
    t_end: f64,
    dt: f64,
    cfg: &RunConfig,
    opts: &EvolveOptions,
    resolved: &Resolved,
) -> CliResult<RunOutput> {
    let copts = CompareOptions {
        cavity_cutoff: cfg.cavity_cutoff,
        samples: (t_end / dt - 1e-9).ceil().max(1.0) as usize,
        evolve: *opts,
    };
    let report = compare_tiers(p, rho0, t_end, &copts)?;
    let mut header = vec!["time".to_string()];
    for s in &report.tiers {
        header.push(format!("n1_{}", s.tier.name()));
        header.push(format!("n2_{}", s.tier.name()));
    }
    for m in &report.pairs {
        header.push(format!("fidelity_{}_{}", m.reference.name(), m.other.name()));
    }
    let rows = (0..report.times.len()).map(|k| {
        let mut row = vec![num(report.times[k])];
        for s in &report.tiers {
            row.push(num(s.occupations[k][0]));
            row.push(num(s.occupations[k][1]));
        }
        for m in &report.pairs {
            row.push(num(m.fidelities[k]));
        }
        row
    });
    let mut out = CsvOut::new("evolve --compare", resolved)?;
    out.comment("frame: mechanical-rotating (effective tiers rotated back by the spring shifts)");
    for m in &report.pairs {
        out.comment(&format!(
            "{} vs {}: max relative occupation deviation {}, max absolute {}, min fidelity {}",
            m.reference.name(),
            m.other.name(),
            num(m.max_relative_occupation_deviation),
            num(m.max_absolute_occupation_deviation),
            num(m.min_fidelity)
        ));
    }
    let csv = out.table(header, rows)?;
    Ok(RunOutput {
        csv,
        diagnostics: report
            .tiers
            .iter()
            .map(|s| (s.tier, s.diagnostics.clone()))
            .collect(),
    })
}
