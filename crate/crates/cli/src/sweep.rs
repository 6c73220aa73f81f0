use omsim::coeffs::{
    bs_coefficients, jbs_zeros, pa_coefficients, resonance_detunings, spring_shift, ResonanceKind,
};
use omsim::model::{validate, SystemParams};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::io::{num, place_on_resonance, CsvOut};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    #[default]
    Linear,
    Log,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub name: String,
    pub min: f64,
    pub max: f64,
    pub points: usize,
    #[serde(default)]
    pub scale: Scale,
}

/// Names an axis may carry. `Delta1`/`Delta2` are absent on purpose: the
/// detunings follow from `DeltaBar` and the resonance condition.
pub const AXIS_NAMES: [&str; 18] = [
    "DeltaBar", "OmegaBar", "deltaOmega", "g", "alpha", "omega1", "omega2", "g1", "g2", "kappa",
    "alpha1", "alpha2", "zHO1", "zHO2", "gamma1", "gamma2", "nth1", "nth2",
];

impl Axis {
    pub fn check(&self) -> CliResult<()> {
        if !AXIS_NAMES.contains(&self.name.as_str()) {
            return Err(CliError::Validation(format!(
                "unknown axis '{}'; expected one of {}",
                self.name,
                AXIS_NAMES.join(", ")
            )));
        }
        if self.points < 2 {
            return Err(CliError::Validation(format!(
                "axis '{}' needs at least 2 points, got {}",
                self.name, self.points
            )));
        }
        if !(self.min.is_finite() && self.max.is_finite() && self.min < self.max) {
            return Err(CliError::Validation(format!(
                "axis '{}' needs finite min < max, got [{}, {}]",
                self.name, self.min, self.max
            )));
        }
        if self.scale == Scale::Log && self.min <= 0.0 {
            return Err(CliError::Validation(format!(
                "log axis '{}' needs positive bounds",
                self.name
            )));
        }
        Ok(())
    }

    pub fn values(&self) -> Vec<f64> {
        let last = (self.points - 1) as f64;
        (0..self.points)
            .map(|i| {
                let f = i as f64 / last;
                match self.scale {
                    Scale::Linear => self.min + (self.max - self.min) * f,
                    Scale::Log => self.min * (self.max / self.min).powf(f),
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Target {
    #[serde(rename = "JBS")]
    Jbs,
    #[serde(rename = "GammaTotal")]
    GammaTotal,
    #[serde(rename = "JPA")]
    Jpa,
    #[serde(rename = "xiPA")]
    XiPa,
    #[serde(rename = "resonance-correction-BS")]
    CorrectionBs,
    #[serde(rename = "resonance-correction-PA")]
    CorrectionPa,
    #[serde(rename = "jbs-zeros")]
    JbsZeros,
}

impl Target {
    fn columns(self) -> Vec<&'static str> {
        match self {
            Target::Jbs => vec!["Delta1", "Delta2", "JBS", "JBS_norm"],
            Target::GammaTotal => vec!["Delta1", "Delta2", "GammaTotal", "GammaTotal_norm"],
            Target::Jpa => vec!["Delta1", "Delta2", "JPA", "JPA_norm"],
            Target::XiPa => vec!["Delta1", "Delta2", "xiPA", "xiPA_norm"],
            Target::CorrectionBs | Target::CorrectionPa => vec![
                "Delta1",
                "Delta2",
                "dOmega1",
                "dOmega2",
                "correction",
                "iterations",
                "residual",
            ],
            Target::JbsZeros => vec!["zero_count", "zero_lo", "zero_hi"],
        }
    }

    /// Index of the column that gets a `value / max |value|` companion.
    fn normalized(self) -> Option<usize> {
        match self {
            Target::Jbs | Target::GammaTotal | Target::Jpa | Target::XiPa => Some(2),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub params: SystemParams,
    pub axes: Vec<Axis>,
    pub target: Target,
}

impl SweepSpec {
    pub fn check(&self) -> CliResult<()> {
        if self.axes.is_empty() {
            return Err(CliError::Validation("a sweep needs at least one axis".into()));
        }
        for (i, a) in self.axes.iter().enumerate() {
            a.check()?;
            if self.axes[..i].iter().any(|b| b.name == a.name) {
                return Err(CliError::Validation(format!("axis '{}' appears twice", a.name)));
            }
        }
        Ok(())
    }

    /// Cartesian grid, first axis slowest.
    pub fn grid(&self) -> Vec<Vec<f64>> {
        let mut grid = vec![Vec::new()];
        for axis in &self.axes {
            let values = axis.values();
            grid = grid
                .into_iter()
                .flat_map(|head| {
                    values.iter().map(move |&v| {
                        let mut row = head.clone();
                        row.push(v);
                        row
                    })
                })
                .collect();
        }
        grid
    }
}

/// Parameters at one grid point plus the requested central detuning.
fn point_params(base: &SystemParams, axes: &[Axis], values: &[f64]) -> (SystemParams, f64) {
    let mut p = *base;
    let mut delta_bar = base.delta_bar();
    for (axis, &v) in axes.iter().zip(values) {
        let omega_bar = 0.5 * (p.omega1 + p.omega2);
        let dw = p.omega1 - p.omega2;
        match axis.name.as_str() {
            "DeltaBar" => delta_bar = v,
            "OmegaBar" => p = p.with_mechanics(v, dw),
            "deltaOmega" => p = p.with_mechanics(omega_bar, v),
            "g" => (p.g1, p.g2) = (v, v),
            "alpha" => (p.alpha1, p.alpha2) = (v, v),
            "omega1" => p.omega1 = v,
            "omega2" => p.omega2 = v,
            "g1" => p.g1 = v,
            "g2" => p.g2 = v,
            "kappa" => p.kappa = v,
            "alpha1" => p.alpha1 = v,
            "alpha2" => p.alpha2 = v,
            "zHO1" => p.z_ho1 = v,
            "zHO2" => p.z_ho2 = v,
            "gamma1" => p.gamma1 = v,
            "gamma2" => p.gamma2 = v,
            "nth1" => p.nth1 = v,
            "nth2" => p.nth2 = v,
            other => unreachable!("axis '{other}' passed validation"),
        }
    }
    (p, delta_bar)
}

fn evaluate(target: Target, p: &SystemParams, delta_bar: f64, bare: bool) -> omsim::Result<Vec<f64>> {
    validate(p)?;
    let on = |kind| place_on_resonance(p, kind, delta_bar, bare);
    Ok(match target {
        Target::Jbs | Target::GammaTotal => {
            let q = on(ResonanceKind::BS)?;
            let c = bs_coefficients(&q)?;
            let v = if target == Target::Jbs { c.j_bs } else { c.gamma_total };
            vec![q.delta1, q.delta2, v]
        }
        Target::Jpa | Target::XiPa => {
            let q = on(ResonanceKind::PA)?;
            let c = pa_coefficients(&q)?;
            let v = if target == Target::Jpa { c.j_pa } else { c.xi_pa };
            vec![q.delta1, q.delta2, v]
        }
        Target::CorrectionBs | Target::CorrectionPa => {
            let kind = if target == Target::CorrectionBs {
                ResonanceKind::BS
            } else {
                ResonanceKind::PA
            };
            let s = resonance_detunings(kind, delta_bar, p)?;
            let q = s.apply(p);
            vec![
                s.delta1,
                s.delta2,
                spring_shift(&q, 0),
                spring_shift(&q, 1),
                s.correction,
                s.iterations as f64,
                s.residual,
            ]
        }
        Target::JbsZeros => {
            let z = jbs_zeros(p);
            let lo = z.first().copied().unwrap_or(f64::NAN);
            let hi = if z.len() > 1 { z[z.len() - 1] } else { f64::NAN };
            vec![z.len() as f64, lo, hi]
        }
    })
}

/// Row of values for a point that failed, keeping whatever diagnostics the
/// error carries.
fn failed_row(target: Target, e: &omsim::Error) -> Vec<f64> {
    let mut row = vec![f64::NAN; target.columns().len() - target.normalized().map_or(0, |_| 1)];
    if let (Target::CorrectionBs | Target::CorrectionPa, omsim::Error::NoConvergence { iterations, residual }) =
        (target, e)
    {
        row[5] = *iterations as f64;
        row[6] = *residual;
    }
    row
}

pub struct SweepResult {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub failed: usize,
}

/// Evaluate every grid point on `workers` threads; rows come back in grid order.
pub fn run(spec: &SweepSpec, bare: bool, workers: Option<usize>) -> CliResult<SweepResult> {
    spec.check()?;
    let grid = spec.grid();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Validation(format!("cannot build worker pool: {e}")))?;
    let results: Vec<Result<Vec<f64>, (Vec<f64>, String)>> = pool.install(|| {
        grid.par_iter()
            .map(|values| {
                let (p, db) = point_params(&spec.params, &spec.axes, values);
                evaluate(spec.target, &p, db, bare)
                    .map_err(|e| (failed_row(spec.target, &e), e.to_string()))
            })
            .collect()
    });

    let norm_col = spec.target.normalized();
    let peak = norm_col.map(|k| {
        results
            .iter()
            .filter_map(|r| r.as_ref().ok())
            .map(|v| v[k].abs())
            .fold(0.0, f64::max)
    });

    let mut header: Vec<String> = spec.axes.iter().map(|a| a.name.clone()).collect();
    header.extend(spec.target.columns().iter().map(|c| c.to_string()));
    header.push("error".into());
    header.push("message".into());

    let mut failed = 0;
    let rows = grid
        .iter()
        .zip(&results)
        .map(|(values, r)| {
            let mut row: Vec<String> = values.iter().map(|&v| num(v)).collect();
            let (mut cells, flag, message) = match r {
                Ok(v) => (v.clone(), "0", String::new()),
                Err((partial, msg)) => {
                    failed += 1;
                    (partial.clone(), "1", msg.clone())
                }
            };
            if let (Some(k), Some(peak)) = (norm_col, peak) {
                cells.push(if peak > 0.0 { cells[k] / peak } else { f64::NAN });
            }
            row.extend(cells.iter().map(|&v| num(v)));
            row.push(flag.into());
            row.push(message);
            row
        })
        .collect();
    Ok(SweepResult {
        header,
        rows,
        failed,
    })
}

pub fn to_csv(command: &str, spec: &impl Serialize, bare: bool, result: SweepResult) -> CliResult<Vec<u8>> {
    let mut out = CsvOut::new(command, spec)?;
    out.comment(&format!(
        "resonance: {}",
        if bare { "bare" } else { "spring-corrected" }
    ));
    out.comment(&format!("points: {}, failed: {}", result.rows.len(), result.failed));
    out.table(result.header, result.rows)
}

/// Correction map for one resonance type; a sweep whose target is fixed by `mode`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResonanceConfig {
    pub params: SystemParams,
    pub mode: ResonanceKind,
    pub axes: Vec<Axis>,
}

impl ResonanceConfig {
    pub fn as_sweep(&self) -> SweepSpec {
        SweepSpec {
            params: self.params,
            axes: self.axes.clone(),
            target: match self.mode {
                ResonanceKind::BS => Target::CorrectionBs,
                ResonanceKind::PA => Target::CorrectionPa,
            },
        }
    }
}
