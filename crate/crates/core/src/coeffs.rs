//! Closed-form coefficients of the reduced and effective master equations.
//!
//! Conventions:
//! * `L(x) = 1 / (kappa^2/4 + x^2)` is the cavity Lorentzian.
//! * Coupling matrices act on the operator vector `(b1, b2, b1^dag, b2^dag)`
//!   with block layout `[[D-, O-], [O+, D+]]`.
//! * Spring shifts are reported with the sign of the physical frequency shift
//!   (the generator `-i[H, rho]` with `H = dOmega b^dag b`), which is
//!   `-Im` of the corresponding coupling-matrix entry.
//! * Exchange rates `JBS`, `JPA` are reported as `Im([O1+]12 + [O1-]12)`,
//!   positive for blue-side `DeltaBar > 0`. The Hamiltonian they generate is
//!   `-J (b1^dag b2 + h.c.)`, see [`CoeffSetBS::hamiltonian_coupling`].

use nalgebra::Matrix4;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{derived_scales, DerivedScales, SystemParams};

/// Mismatch allowed between the pump splitting and the resonance condition.
pub const RESONANCE_TOL: f64 = 1e-6;

/// Fixed-point settings for [`resonance_detunings`].
pub const FIXED_POINT_DAMPING: f64 = 0.5;
pub const FIXED_POINT_MAX_ITER: usize = 200;
pub const FIXED_POINT_TOL: f64 = 1e-10;

/// Points and half-width (in units of `OmegaBar`) of the zero-bracketing scan.
pub const ZERO_SCAN_POINTS: usize = 2001;
pub const ZERO_SCAN_HALF_WIDTH: f64 = 5.0;
pub const ZERO_BISECT_TOL: f64 = 1e-12;

#[inline]
pub fn lorentzian(kappa: f64, x: f64) -> f64 {
    1.0 / (0.25 * kappa * kappa + x * x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Frame {
    Lab,
    MechanicalRotating,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ResonanceKind {
    BS,
    PA,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CouplingMatrices {
    pub m1: Matrix4<Complex64>,
    pub m2: Matrix4<Complex64>,
    pub m3: Matrix4<Complex64>,
    pub t: f64,
    pub frame: Frame,
}

/// Position of a block entry in the 4x4 layout.
/// `upper` selects the annihilation rows (`D-`, `O-`), `diag` the D blocks.
#[inline]
fn slot(upper: bool, diag: bool, m: usize, n: usize) -> (usize, usize) {
    match (upper, diag) {
        (true, true) => (m, n),
        (true, false) => (m, n + 2),
        (false, false) => (m + 2, n),
        (false, true) => (m + 2, n + 2),
    }
}

/// Frequency picked up by a block entry when moving to the mechanical frame.
#[inline]
fn block_frequency(p: &SystemParams, upper: bool, diag: bool, m: usize, n: usize) -> f64 {
    let w = p.omegas();
    let sign = if upper { -1.0 } else { 1.0 };
    if diag {
        sign * (w[m] + w[n])
    } else {
        sign * (w[m] - w[n])
    }
}

/// Visit every term `amp * exp(i freq t)` of the three matrices.
///
/// The callback receives `(matrix index 0..3, row, col, amp, freq)` where
/// `freq` includes the frame phase when `rotating` is set.
fn for_each_term<F: FnMut(usize, usize, usize, Complex64, f64)>(
    p: &SystemParams,
    rotating: bool,
    mut visit: F,
) {
    let g = p.couplings();
    let a = p.amplitudes();
    let d = p.detunings();
    let w = p.omegas();
    let half = 0.5 * p.kappa;
    let c = |re: f64, im: f64| Complex64::new(re, im);

    for upper in [true, false] {
        // `pm` is +1 for the `+` blocks (lower rows), -1 for the `-` blocks.
        let pm = if upper { -1.0 } else { 1.0 };
        for diag in [true, false] {
            for m in 0..2 {
                for n in 0..2 {
                    let (r, col) = slot(upper, diag, m, n);
                    let frame = if rotating {
                        block_frequency(p, upper, diag, m, n)
                    } else {
                        0.0
                    };
                    let gg = g[m] * g[n];
                    for k in 0..2 {
                        for l in 0..2 {
                            let aa = a[k] * a[l];
                            if gg * aa == 0.0 {
                                continue;
                            }
                            let fwd = d[l] - d[k];
                            // M1: D uses (Delta_l +- w_n), O uses (Delta_l -+ w_n)
                            let s1 = if diag { pm } else { -pm };
                            let amp1 = -gg * aa / c(half, d[l] + s1 * w[n]);
                            visit(0, r, col, amp1, fwd + frame);
                            // M2: both blocks use (Delta_l -+ w_m)
                            let amp2 = -gg * aa / c(half, -(d[l] - pm * w[m]));
                            visit(1, r, col, amp2, -fwd + frame);
                            // M3: first term (Delta_l +- w_m); second term
                            // (Delta_l -+ w_n) for D and (Delta_l +- w_n) for O
                            let amp3a = gg * aa / c(half, d[l] + pm * w[m]);
                            let s3 = if diag { -pm } else { pm };
                            let amp3b = gg * aa / c(half, -(d[l] + s3 * w[n]));
                            visit(2, r, col, amp3a, fwd + frame);
                            visit(2, r, col, amp3b, -fwd + frame);
                        }
                    }
                }
            }
        }
    }
}

/// The three coupling matrices at time `t`.
pub fn coupling_matrices(p: &SystemParams, t: f64, frame: Frame) -> CouplingMatrices {
    let mut ms = [Matrix4::<Complex64>::zeros(); 3];
    let rotating = frame == Frame::MechanicalRotating;
    for_each_term(p, rotating, |i, r, c, amp, freq| {
        ms[i][(r, c)] += amp * Complex64::from_polar(1.0, freq * t);
    });
    CouplingMatrices {
        m1: ms[0],
        m2: ms[1],
        m3: ms[2],
        t,
        frame,
    }
}

/// Mechanical-frame matrices keeping only terms whose total frequency is
/// below `tol`: the rotating-wave projection of the reduced equation.
pub fn secular_matrices(p: &SystemParams, tol: f64) -> CouplingMatrices {
    let mut ms = [Matrix4::<Complex64>::zeros(); 3];
    for_each_term(p, true, |i, r, c, amp, freq| {
        if freq.abs() < tol {
            ms[i][(r, c)] += amp;
        }
    });
    CouplingMatrices {
        m1: ms[0],
        m2: ms[1],
        m3: ms[2],
        t: 0.0,
        frame: Frame::MechanicalRotating,
    }
}

impl CouplingMatrices {
    pub fn all(&self) -> [&Matrix4<Complex64>; 3] {
        [&self.m1, &self.m2, &self.m3]
    }

    /// Upper bound on any entry magnitude: `sum_kl g_m g_n a_k a_l / (kappa/2)`,
    /// doubled for the jump matrix.
    pub fn entry_bound(p: &SystemParams, m: usize, n: usize) -> [f64; 3] {
        let g = p.couplings();
        let sa: f64 = p.amplitudes().iter().sum();
        let b = g[m] * g[n] * sa * sa / (0.5 * p.kappa);
        [b, b, 2.0 * b]
    }
}

/// Physical spring shift of oscillator `i` (0 or 1).
pub fn spring_shift(p: &SystemParams, i: usize) -> f64 {
    let g = p.couplings()[i];
    let w = p.omegas()[i];
    let k = p.kappa;
    let mut s = 0.0;
    for (a, d) in p.amplitudes().iter().zip(p.detunings()) {
        let lo = d - w;
        let hi = d + w;
        s += a * a * (lo * lorentzian(k, lo) + hi * lorentzian(k, hi));
    }
    -g * g * s
}

/// Instantaneous frequency shift `dOmega_i + R_i(t)` read from the lab-frame
/// coupling matrices.
pub fn optical_spring_timeseries(p: &SystemParams, i: usize, times: &[f64]) -> Vec<f64> {
    times
        .iter()
        .map(|&t| {
            let cm = coupling_matrices(p, t, Frame::Lab);
            -(cm.m1[(i + 2, i)] - cm.m2[(i, i + 2)]).im
        })
        .collect()
}

/// Inter-oscillator spring constant at time `t`, scaled by the zero-point lengths.
pub fn spring_constant(p: &SystemParams, t: f64) -> f64 {
    let cm = coupling_matrices(p, t, Frame::Lab);
    -(cm.m1[(2, 1)] - cm.m2[(1, 2)]).im / (p.z_ho1 * p.z_ho2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Red,
    Blue,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SidebandLine {
    /// `Delta_k - w_j` (red) or `Delta_k + w_j` (blue).
    pub frequency: f64,
    pub amplitude: Complex64,
    pub pump: usize,
    pub oscillator: usize,
    pub branch: Branch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidebandSpectrum {
    pub lines: Vec<SidebandLine>,
    /// Groups of line indices whose frequencies coincide within the tolerance.
    pub matched: Vec<Vec<usize>>,
    pub unmatched: Vec<usize>,
}

/// The eight sideband lines and their overlap structure.
pub fn sideband_spectrum(p: &SystemParams, tol: f64) -> SidebandSpectrum {
    let g = p.couplings();
    let a = p.amplitudes();
    let d = p.detunings();
    let w = p.omegas();
    let mut lines = Vec::with_capacity(8);
    for k in 0..2 {
        for j in 0..2 {
            for branch in [Branch::Red, Branch::Blue] {
                let frequency = match branch {
                    Branch::Red => d[k] - w[j],
                    Branch::Blue => d[k] + w[j],
                };
                lines.push(SidebandLine {
                    frequency,
                    amplitude: g[j] * a[k] / Complex64::new(0.5 * p.kappa, frequency),
                    pump: k,
                    oscillator: j,
                    branch,
                });
            }
        }
    }
    let mut seen = [false; 8];
    let mut matched = Vec::new();
    let mut unmatched = Vec::new();
    for i in 0..lines.len() {
        if seen[i] {
            continue;
        }
        let group: Vec<usize> = (i..lines.len())
            .filter(|&j| !seen[j] && (lines[j].frequency - lines[i].frequency).abs() <= tol)
            .collect();
        for &j in &group {
            seen[j] = true;
        }
        if group.len() > 1 {
            matched.push(group);
        } else {
            unmatched.push(i);
        }
    }
    SidebandSpectrum {
        lines,
        matched,
        unmatched,
    }
}

/// Effective beam-splitter coefficient set.
///
/// Products `GammaBar * nBar` are kept in cancelled form so they stay finite
/// where the occupations diverge (`DeltaBar = 0`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoeffSetBS {
    #[serde(rename = "JBS")]
    pub j_bs: f64,
    #[serde(rename = "GammaBar1")]
    pub gamma_bar1: f64,
    #[serde(rename = "GammaBar2")]
    pub gamma_bar2: f64,
    #[serde(rename = "GammaBar")]
    pub gamma_bar: f64,
    #[serde(rename = "nBar1")]
    pub n_bar1: f64,
    #[serde(rename = "nBar2")]
    pub n_bar2: f64,
    #[serde(rename = "nBar")]
    pub n_bar: f64,
    #[serde(rename = "GammaBarNBar1")]
    pub gamma_n_bar1: f64,
    #[serde(rename = "GammaBarNBar2")]
    pub gamma_n_bar2: f64,
    #[serde(rename = "GammaBarNBar")]
    pub gamma_n_bar: f64,
    #[serde(rename = "GammaTotal")]
    pub gamma_total: f64,
}

impl CoeffSetBS {
    /// Coefficient of `(b1^dag b2 + b1 b2^dag)` in the effective Hamiltonian.
    pub fn hamiltonian_coupling(&self) -> f64 {
        -self.j_bs
    }

    /// Rates `(down, up)` of `L(b_j)` and `L(b_j^dag)` for oscillator `j`.
    pub fn single_mode_rates(&self, j: usize) -> (f64, f64) {
        let (g, gn) = match j {
            0 => (self.gamma_bar1, self.gamma_n_bar1),
            _ => (self.gamma_bar2, self.gamma_n_bar2),
        };
        (gn + g, gn)
    }

    /// Rates `(down, up)` of `L(B)` and `L(B^dag)`.
    pub fn collective_rates(&self) -> (f64, f64) {
        (self.gamma_n_bar + self.gamma_bar, self.gamma_n_bar)
    }

    pub fn anti_damped(&self) -> [bool; 3] {
        [self.n_bar1 < 0.0, self.n_bar2 < 0.0, self.n_bar < 0.0]
    }
}

/// Exchange rate in terms of the two matched-sideband positions `DeltaBar -+ centre`.
pub fn exchange_rate(g1g2: f64, kappa: f64, delta_bar: f64, centre: f64) -> f64 {
    let lo = delta_bar - centre;
    let hi = delta_bar + centre;
    g1g2 * (lo * lorentzian(kappa, lo) + hi * lorentzian(kappa, hi))
}

/// `(GammaBar, nBar, GammaBar*nBar)` of a pseudo-thermal bath whose cooling and
/// heating sidebands sit at `DeltaBar - shift` and `DeltaBar + shift`.
fn bath(weight: f64, kappa: f64, delta_bar: f64, shift: f64) -> (f64, f64, f64) {
    let lo = lorentzian(kappa, delta_bar - shift);
    let hi = lorentzian(kappa, delta_bar + shift);
    let gamma = 4.0 * weight * kappa * delta_bar * shift * lo * hi;
    let n = 1.0 / (lo * 4.0 * delta_bar * shift);
    (gamma, n, weight * kappa * hi)
}

/// Beam-splitter rates from derived scales, without any resonance check.
pub fn bs_rates(s: &DerivedScales, kappa: f64) -> CoeffSetBS {
    let (g1, g2) = (s.big_g1, s.big_g2);
    let (db, ob, dw) = (s.delta_bar, s.omega_bar, s.delta_omega);
    let (gamma_bar1, n_bar1, gamma_n_bar1) = bath(g1 * g1, kappa, db, ob + dw);
    let (gamma_bar2, n_bar2, gamma_n_bar2) = bath(g2 * g2, kappa, db, ob - dw);
    let (gamma_bar, n_bar, gamma_n_bar) = bath(g1 * g2, kappa, db, ob);
    CoeffSetBS {
        j_bs: exchange_rate(g1 * g2, kappa, db, ob),
        gamma_bar1,
        gamma_bar2,
        gamma_bar,
        n_bar1,
        n_bar2,
        n_bar,
        gamma_n_bar1,
        gamma_n_bar2,
        gamma_n_bar,
        gamma_total: gamma_n_bar + gamma_n_bar1 + gamma_n_bar2,
    }
}

/// Effective parametric-amplifier coefficient set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoeffSetPA {
    #[serde(rename = "JPA")]
    pub j_pa: f64,
    #[serde(rename = "GammaBar1")]
    pub gamma_bar1: f64,
    #[serde(rename = "GammaBar2")]
    pub gamma_bar2: f64,
    #[serde(rename = "GammaPlus")]
    pub gamma_plus: f64,
    #[serde(rename = "GammaMinus")]
    pub gamma_minus: f64,
    #[serde(rename = "nBar1")]
    pub n_bar1: f64,
    #[serde(rename = "nBar2")]
    pub n_bar2: f64,
    #[serde(rename = "GammaBarNBar1")]
    pub gamma_n_bar1: f64,
    #[serde(rename = "GammaBarNBar2")]
    pub gamma_n_bar2: f64,
    #[serde(rename = "xiPA")]
    pub xi_pa: f64,
}

impl CoeffSetPA {
    /// Coefficient of `(b1 b2 + b1^dag b2^dag)` in the effective Hamiltonian.
    pub fn hamiltonian_coupling(&self) -> f64 {
        -self.j_pa
    }

    pub fn single_mode_rates(&self, j: usize) -> (f64, f64) {
        let (g, gn) = match j {
            0 => (self.gamma_bar1, self.gamma_n_bar1),
            _ => (self.gamma_bar2, self.gamma_n_bar2),
        };
        (gn + g, gn)
    }

    pub fn decoherence(&self) -> f64 {
        self.gamma_n_bar1 + self.gamma_n_bar2 + self.gamma_plus + self.gamma_minus
    }
}

/// Parametric-amplifier rates from derived scales, without any resonance check.
pub fn pa_rates(s: &DerivedScales, kappa: f64) -> CoeffSetPA {
    let (g1, g2) = (s.big_g1, s.big_g2);
    let (db, ob, dw) = (s.delta_bar, s.omega_bar, s.delta_omega);
    let (gamma_bar1, n_bar1, gamma_n_bar1) = bath(g1 * g1, kappa, db, 2.0 * ob + 0.5 * dw);
    let (gamma_bar2, n_bar2, gamma_n_bar2) = bath(g2 * g2, kappa, db, 2.0 * ob - 0.5 * dw);
    let gamma_plus = g1 * g2 * kappa * lorentzian(kappa, db + 0.5 * dw);
    let gamma_minus = g1 * g2 * kappa * lorentzian(kappa, db - 0.5 * dw);
    let j_pa = exchange_rate(g1 * g2, kappa, db, 0.5 * dw);
    let mut c = CoeffSetPA {
        j_pa,
        gamma_bar1,
        gamma_bar2,
        gamma_plus,
        gamma_minus,
        n_bar1,
        n_bar2,
        gamma_n_bar1,
        gamma_n_bar2,
        xi_pa: 0.0,
    };
    c.xi_pa = j_pa / c.decoherence();
    c
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResonanceCheck {
    pub bare_mismatch: f64,
    pub renormalized_mismatch: f64,
}

impl ResonanceCheck {
    pub fn satisfied(&self, tol: f64) -> bool {
        self.bare_mismatch.min(self.renormalized_mismatch) < tol
    }
}

/// Distance of the pump splitting from the bare and spring-corrected conditions.
pub fn resonance_mismatch(p: &SystemParams, kind: ResonanceKind) -> ResonanceCheck {
    let split = p.delta1 - p.delta2;
    let (d1, d2) = (spring_shift(p, 0), spring_shift(p, 1));
    let (bare, shift) = match kind {
        ResonanceKind::BS => (p.omega1 - p.omega2, d1 - d2),
        ResonanceKind::PA => (p.omega1 + p.omega2, d1 + d2),
    };
    ResonanceCheck {
        bare_mismatch: (split - bare).abs(),
        renormalized_mismatch: (split - bare - shift).abs(),
    }
}

fn check_preconditions(p: &SystemParams, kind: ResonanceKind) -> Result<DerivedScales> {
    let check = resonance_mismatch(p, kind);
    let tol = RESONANCE_TOL * 0.5 * (p.omega1 + p.omega2);
    if !check.satisfied(tol) {
        return Err(Error::ResonanceMismatch {
            mode: match kind {
                ResonanceKind::BS => "beam-splitter",
                ResonanceKind::PA => "parametric",
            },
            mismatch: check.bare_mismatch.min(check.renormalized_mismatch),
            tolerance: tol,
        });
    }
    let scale = p.alpha1.abs().max(p.alpha2.abs());
    if (p.alpha1 - p.alpha2).abs() > 1e-12 * scale {
        return Err(Error::UnequalAmplitudes {
            alpha1: p.alpha1,
            alpha2: p.alpha2,
        });
    }
    Ok(derived_scales(p))
}

/// Beam-splitter coefficients for a resonant parameter set with equal pumps.
pub fn bs_coefficients(p: &SystemParams) -> Result<CoeffSetBS> {
    let s = check_preconditions(p, ResonanceKind::BS)?;
    Ok(bs_rates(&s, p.kappa))
}

/// Parametric-amplifier coefficients for a resonant parameter set with equal pumps.
pub fn pa_coefficients(p: &SystemParams) -> Result<CoeffSetPA> {
    let s = check_preconditions(p, ResonanceKind::PA)?;
    Ok(pa_rates(&s, p.kappa))
}

/// Uniform scan of `DeltaBar` over `[-half_width, half_width] * OmegaBar`.
pub fn detuning_grid(omega_bar: f64, points: usize, half_width: f64) -> Vec<f64> {
    let last = (points - 1) as f64;
    (0..points)
        .map(|i| omega_bar * half_width * (2.0 * i as f64 - last) / last)
        .collect()
}

fn scan_zeros<F: Fn(f64) -> f64>(f: F, grid: &[f64], exclude: f64) -> Vec<f64> {
    let vals: Vec<f64> = grid.iter().map(|&x| f(x)).collect();
    let mut roots = Vec::new();
    for i in 0..grid.len() {
        if vals[i] == 0.0 {
            roots.push(grid[i]);
            continue;
        }
        if i + 1 < grid.len() && vals[i] * vals[i + 1] < 0.0 {
            let (mut lo, mut hi) = (grid[i], grid[i + 1]);
            let mut flo = vals[i];
            while hi - lo > ZERO_BISECT_TOL {
                let mid = 0.5 * (lo + hi);
                let fm = f(mid);
                if fm == 0.0 {
                    lo = mid;
                    hi = mid;
                    break;
                }
                if fm * flo < 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                    flo = fm;
                }
            }
            roots.push(0.5 * (lo + hi));
        }
    }
    roots.retain(|r| r.abs() > exclude);
    roots
}

/// Non-zero detunings at which the two exchange pathways cancel, `JBS = 0`.
pub fn jbs_zeros(p: &SystemParams) -> Vec<f64> {
    let s = derived_scales(p);
    let g = s.big_g1 * s.big_g2;
    let grid = detuning_grid(s.omega_bar, ZERO_SCAN_POINTS, ZERO_SCAN_HALF_WIDTH);
    scan_zeros(
        |x| exchange_rate(g, p.kappa, x, s.omega_bar),
        &grid,
        1e-9 * s.omega_bar,
    )
}

/// Non-zero detunings with `JPA = 0`.
pub fn jpa_zeros(p: &SystemParams) -> Vec<f64> {
    let s = derived_scales(p);
    let g = s.big_g1 * s.big_g2;
    let grid = detuning_grid(s.omega_bar, ZERO_SCAN_POINTS, ZERO_SCAN_HALF_WIDTH);
    scan_zeros(
        |x| exchange_rate(g, p.kappa, x, 0.5 * s.delta_omega),
        &grid,
        1e-9 * s.omega_bar,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResonanceSolution {
    #[serde(rename = "Delta1")]
    pub delta1: f64,
    #[serde(rename = "Delta2")]
    pub delta2: f64,
    /// `(dOmega1 -+ dOmega2) / (deltaOmega or 2 OmegaBar)`.
    pub correction: f64,
    pub iterations: usize,
    pub residual: f64,
}

impl ResonanceSolution {
    pub fn apply(&self, p: &SystemParams) -> SystemParams {
        SystemParams {
            delta1: self.delta1,
            delta2: self.delta2,
            ..*p
        }
    }
}

/// Solve the spring-corrected resonance condition at fixed `DeltaBar` by
/// damped fixed-point iteration from the bare splitting.
pub fn resonance_detunings(
    kind: ResonanceKind,
    delta_bar: f64,
    p: &SystemParams,
) -> Result<ResonanceSolution> {
    let (bare, sign) = match kind {
        ResonanceKind::BS => (p.omega1 - p.omega2, -1.0),
        ResonanceKind::PA => (p.omega1 + p.omega2, 1.0),
    };
    let omega_bar = 0.5 * (p.omega1 + p.omega2);
    let target = |split: f64| {
        let q = p.with_detunings(delta_bar, split);
        bare + spring_shift(&q, 0) + sign * spring_shift(&q, 1)
    };
    let mut split = bare;
    let mut residual = (target(split) - split).abs();
    let mut iterations = 0;
    while residual >= FIXED_POINT_TOL * omega_bar {
        if iterations == FIXED_POINT_MAX_ITER || !residual.is_finite() {
            return Err(Error::NoConvergence {
                iterations,
                residual,
            });
        }
        split += FIXED_POINT_DAMPING * (target(split) - split);
        residual = (target(split) - split).abs();
        iterations += 1;
    }
    let q = p.with_detunings(delta_bar, split);
    let correction = (spring_shift(&q, 0) + sign * spring_shift(&q, 1)) / bare;
    Ok(ResonanceSolution {
        delta1: q.delta1,
        delta2: q.delta2,
        correction,
        iterations,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn bs_params(delta_bar: f64) -> SystemParams {
        SystemParams::default().at_bs_resonance(delta_bar)
    }

    // independent evaluation of the printed exchange-rate expression
    fn printed_exchange(g1g2: f64, kappa: f64, db: f64, centre: f64) -> f64 {
        let num = Complex64::new(kappa, 2.0 * db);
        let den = Complex64::new(0.25 * kappa * kappa + centre * centre - db * db, kappa * db);
        (g1g2 * num / den).im
    }

    #[test]
    fn single_pump_single_mode_entry() {
        let p = SystemParams {
            g2: 0.0,
            alpha2: 0.0,
            delta1: 0.7,
            ..SystemParams::default()
        };
        let cm = coupling_matrices(&p, 3.1, Frame::Lab);
        let expect = -p.g1 * p.g1 * p.alpha1 * p.alpha1
            / Complex64::new(0.5 * p.kappa, p.delta1 - p.omega1);
        assert_relative_eq!(cm.m1[(2, 0)].re, expect.re, max_relative = 1e-14);
        assert_relative_eq!(cm.m1[(2, 0)].im, expect.im, max_relative = 1e-14);
    }

    #[test]
    fn zero_second_coupling_clears_its_entries() {
        let p = SystemParams {
            g2: 0.0,
            ..SystemParams::default()
        };
        let cm = coupling_matrices(&p, 0.4, Frame::MechanicalRotating);
        for m in cm.all() {
            for r in 0..4 {
                for c in 0..4 {
                    if r % 2 == 1 || c % 2 == 1 {
                        assert_eq!(m[(r, c)].norm(), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn single_pump_is_static_in_lab_frame() {
        let p = SystemParams {
            alpha2: 0.0,
            ..SystemParams::default()
        };
        let a = coupling_matrices(&p, 0.0, Frame::Lab);
        let b = coupling_matrices(&p, 17.3, Frame::Lab);
        for (x, y) in a.all().iter().zip(b.all()) {
            assert!((*x - y).norm() < 1e-15);
        }
    }

    #[test]
    fn spring_shift_examples() {
        let off = SystemParams {
            alpha1: 0.0,
            alpha2: 0.0,
            ..SystemParams::default()
        };
        assert_eq!(spring_shift(&off, 0), 0.0);

        let p = SystemParams {
            alpha2: 0.0,
            delta1: 1.05,
            ..SystemParams::default()
        };
        let w = p.omega1;
        let expect = -p.g1 * p.g1 * 2.0 * w / (0.25 + 4.0 * w * w);
        assert_relative_eq!(spring_shift(&p, 0), expect, max_relative = 1e-14);

        // a resonant pump has balanced sidebands
        let q = SystemParams {
            delta1: 0.0,
            delta2: 0.0,
            ..SystemParams::default()
        };
        assert!(spring_shift(&q, 0).abs() < 1e-18);
    }

    #[test]
    fn spring_series_constant_without_second_pump() {
        let p = SystemParams {
            alpha2: 0.0,
            delta1: 0.3,
            ..SystemParams::default()
        };
        let series = optical_spring_timeseries(&p, 1, &[0.0, 1.0, 2.5, 9.0]);
        for v in series {
            assert_relative_eq!(v, spring_shift(&p, 1), max_relative = 1e-13);
        }
    }

    #[test]
    fn spring_constant_scales_with_lengths() {
        let p = bs_params(1.0);
        let q = SystemParams {
            z_ho1: 2.0,
            z_ho2: 2.0,
            ..p
        };
        assert_relative_eq!(spring_constant(&q, 0.3), 0.25 * spring_constant(&p, 0.3), max_relative = 1e-14);
        let r = SystemParams { g2: 0.0, ..p };
        assert_eq!(spring_constant(&r, 0.3), 0.0);
    }

    #[test]
    fn sidebands_at_bs_resonance() {
        let p = bs_params(0.8);
        let s = sideband_spectrum(&p, 1e-9);
        assert_eq!(s.lines.len(), 8);
        assert_eq!(s.matched.len(), 2);
        assert_eq!(s.unmatched.len(), 4);
        let mut freqs: Vec<f64> = s.matched.iter().map(|g| s.lines[g[0]].frequency).collect();
        freqs.sort_by(f64::total_cmp);
        assert_relative_eq!(freqs[0], 0.8 - 1.0, epsilon = 1e-12);
        assert_relative_eq!(freqs[1], 0.8 + 1.0, epsilon = 1e-12);
    }

    #[test]
    fn sidebands_at_pa_resonance() {
        let p = SystemParams::default().at_pa_resonance(0.8);
        let s = sideband_spectrum(&p, 1e-9);
        assert_eq!(s.matched.len(), 2);
        let mut freqs: Vec<f64> = s.matched.iter().map(|g| s.lines[g[0]].frequency).collect();
        freqs.sort_by(f64::total_cmp);
        assert_relative_eq!(freqs[0], 0.8 - 0.05, epsilon = 1e-12);
        assert_relative_eq!(freqs[1], 0.8 + 0.05, epsilon = 1e-12);
    }

    #[test]
    fn generic_sidebands_do_not_match() {
        let p = SystemParams {
            delta1: 0.37,
            delta2: -1.21,
            ..SystemParams::default()
        };
        let s = sideband_spectrum(&p, 1e-9);
        assert!(s.matched.is_empty());
        assert_eq!(s.unmatched.len(), 8);
    }

    #[test]
    fn exchange_rate_matches_printed_form_up_to_sign() {
        for db in [-3.0, -0.7, 0.2, 1.5, 4.0] {
            let ours = exchange_rate(1e-4, 1.0, db, 1.0);
            let printed = printed_exchange(1e-4, 1.0, db, 1.0);
            assert_relative_eq!(ours, -printed, max_relative = 1e-12);
        }
    }

    #[test]
    fn bs_examples() {
        let c = bs_coefficients(&bs_params(0.0)).unwrap();
        assert_eq!(c.j_bs, 0.0);
        assert_eq!(c.gamma_bar, 0.0);
        assert!(c.n_bar.is_infinite());
        let g1g2 = 1e-4;
        assert_relative_eq!(c.gamma_n_bar, g1g2 / (0.25 + 1.0), max_relative = 1e-14);

        let c = bs_coefficients(&bs_params(1.0)).unwrap();
        assert_relative_eq!(c.n_bar, 1.0 / 16.0, max_relative = 1e-14);
    }

    #[test]
    fn cancelled_product_is_continuous_at_zero() {
        let at_zero = bs_coefficients(&bs_params(0.0)).unwrap().gamma_n_bar;
        for h in [1e-3, 1e-5, 1e-7] {
            let c = bs_coefficients(&bs_params(h)).unwrap();
            let product = c.gamma_bar * c.n_bar;
            assert_relative_eq!(product, at_zero, max_relative = 10.0 * h);
        }
    }

    #[test]
    fn bs_rejects_off_resonance_and_unequal_pumps() {
        let off = SystemParams {
            delta1: 1.0,
            delta2: 0.5,
            ..SystemParams::default()
        };
        assert!(matches!(bs_coefficients(&off), Err(Error::ResonanceMismatch { .. })));
        let uneq = SystemParams {
            alpha2: 0.5,
            ..bs_params(1.0)
        };
        assert!(matches!(bs_coefficients(&uneq), Err(Error::UnequalAmplitudes { .. })));
    }

    #[test]
    fn pa_examples() {
        let p = SystemParams::default().at_pa_resonance(0.0);
        let c = pa_coefficients(&p).unwrap();
        assert_eq!(c.j_pa, 0.0);
        let p = SystemParams::default().at_pa_resonance(-0.05);
        let c = pa_coefficients(&p).unwrap();
        assert_relative_eq!(c.gamma_plus, 4.0 * 1e-4 / 1.0, max_relative = 1e-12);
        assert!(c.gamma_minus > 0.0);
    }

    #[test]
    fn bs_route_agreement() {
        for db in [-2.0, -0.4, 0.9, 1.5, 3.0] {
            let p = bs_params(db);
            let sec = secular_matrices(&p, 1e-9);
            let route = (sec.m1[(2, 1)] + sec.m1[(0, 3)]).im;
            let c = bs_coefficients(&p).unwrap();
            assert_relative_eq!(route, c.j_bs, max_relative = 1e-12);
        }
    }

    #[test]
    fn pa_route_agreement() {
        for db in [-2.0, 0.9, 3.0] {
            let p = SystemParams::default().at_pa_resonance(db);
            let sec = secular_matrices(&p, 1e-9);
            // b1^dag b2^dag and b2^dag b1^dag entries of D1+
            let route = (sec.m1[(2, 3)] + sec.m1[(3, 2)]).im;
            let c = pa_coefficients(&p).unwrap();
            assert_relative_eq!(route, c.j_pa, max_relative = 1e-12);
        }
    }

    #[test]
    fn zeros_for_narrow_and_broad_cavities() {
        let broad = SystemParams {
            kappa: 3.0,
            ..SystemParams::default()
        };
        assert!(jbs_zeros(&broad).is_empty());
        let narrow = SystemParams {
            kappa: 1.0,
            ..SystemParams::default()
        };
        let roots = jbs_zeros(&narrow);
        assert_eq!(roots.len(), 2);
        for r in roots {
            assert_relative_eq!(r * r, 0.75, max_relative = 1e-8);
        }
    }

    #[test]
    fn fixed_point_without_coupling_is_bare() {
        let p = SystemParams {
            g1: 0.0,
            g2: 0.0,
            ..SystemParams::default()
        };
        let s = resonance_detunings(ResonanceKind::BS, 0.5, &p).unwrap();
        assert_eq!(s.delta1 - s.delta2, p.omega1 - p.omega2);
        assert_eq!(s.correction, 0.0);
        assert_eq!(s.iterations, 0);
    }

    #[test]
    fn fixed_point_contract() {
        let p = SystemParams {
            kappa: 0.1,
            ..SystemParams::default()
        };
        for kind in [ResonanceKind::BS, ResonanceKind::PA] {
            let s = resonance_detunings(kind, 0.97, &p).unwrap();
            let q = s.apply(&p);
            let m = resonance_mismatch(&q, kind);
            assert!(m.renormalized_mismatch < 1e-10);
            assert_relative_eq!(0.5 * (q.delta1 + q.delta2), 0.97, epsilon = 1e-14);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn params() -> impl Strategy<Value = SystemParams> {
            (
                0.2..3.0f64,
                0.01..1.5f64,
                0.001..0.05f64,
                0.001..0.05f64,
                0.05..10.0f64,
                -5.0..5.0f64,
                -5.0..5.0f64,
                0.0..3.0f64,
                0.0..3.0f64,
            )
                .prop_map(|(w2, dw, g1, g2, kappa, d1, d2, a1, a2)| SystemParams {
                    omega1: w2 + dw,
                    omega2: w2,
                    g1,
                    g2,
                    kappa,
                    delta1: d1,
                    delta2: d2,
                    alpha1: a1,
                    alpha2: a2,
                    ..SystemParams::default()
                })
        }

        fn scales() -> impl Strategy<Value = (DerivedScales, f64)> {
            (0.001..0.1f64, 0.001..0.1f64, 0.01..1.9f64, 0.05..10.0f64, -8.0..8.0f64)
                .prop_map(|(g1, g2, dw, kappa, db)| {
                    (
                        DerivedScales {
                            big_g1: g1,
                            big_g2: g2,
                            delta_omega: dw,
                            omega_bar: 1.0,
                            delta_bar: db,
                        },
                        kappa,
                    )
                })
        }

        proptest! {
            #[test]
            fn entries_respect_magnitude_bound(p in params(), t in 0.0..50.0f64) {
                let cm = coupling_matrices(&p, t, Frame::Lab);
                for m in 0..2 {
                    for n in 0..2 {
                        let bound = CouplingMatrices::entry_bound(&p, m, n);
                        for (i, mat) in cm.all().iter().enumerate() {
                            for (r, c) in [(m, n), (m, n + 2), (m + 2, n), (m + 2, n + 2)] {
                                prop_assert!(mat[(r, c)].norm() <= bound[i] * (1.0 + 1e-12));
                            }
                        }
                    }
                }
            }

            #[test]
            fn frame_change_preserves_magnitudes_of_single_pump(p in params(), t in 0.0..50.0f64) {
                let q = SystemParams { alpha2: 0.0, ..p };
                let lab = coupling_matrices(&q, t, Frame::Lab);
                let rot = coupling_matrices(&q, t, Frame::MechanicalRotating);
                for (a, b) in lab.all().iter().zip(rot.all()) {
                    for (x, y) in a.iter().zip(b.iter()) {
                        prop_assert!((x.norm() - y.norm()).abs() <= 1e-12 * (1.0 + x.norm()));
                    }
                }
            }

            #[test]
            fn bs_symmetries((s, kappa) in scales()) {
                let c = bs_rates(&s, kappa);
                let m = bs_rates(&DerivedScales { delta_bar: -s.delta_bar, ..s }, kappa);
                let tol = 1e-12 * (1.0 + c.j_bs.abs());
                prop_assert!((c.j_bs + m.j_bs).abs() <= tol);
                for (a, b) in [(c.gamma_bar, m.gamma_bar), (c.gamma_bar1, m.gamma_bar1), (c.gamma_bar2, m.gamma_bar2)] {
                    prop_assert!((a + b).abs() <= 1e-12 * (1e-12 + a.abs()));
                }
                for (a, b) in [(c.n_bar, m.n_bar), (c.n_bar1, m.n_bar1), (c.n_bar2, m.n_bar2)] {
                    prop_assert!(a.signum() != b.signum() || a.abs() < 1e-300);
                }
                // reflecting the detuning swaps the heating and cooling rates
                for j in 0..2 {
                    let (down, up) = c.single_mode_rates(j);
                    let (mdown, mup) = m.single_mode_rates(j);
                    prop_assert!((up - mdown).abs() <= 1e-12 * down.max(up));
                    prop_assert!((down - mup).abs() <= 1e-12 * down.max(up));
                }
                let (down, up) = c.collective_rates();
                let (mdown, mup) = m.collective_rates();
                prop_assert!((up - mdown).abs() <= 1e-12 * down.max(up));
                prop_assert!((down - mup).abs() <= 1e-12 * down.max(up));
            }

            #[test]
            fn cancelled_product_matches_closed_form((s, kappa) in scales()) {
                let c = bs_rates(&s, kappa);
                let expect = s.big_g1 * s.big_g2 * kappa * lorentzian(kappa, s.delta_bar + s.omega_bar);
                prop_assert!((c.gamma_n_bar - expect).abs() <= 1e-14 * expect);
                if s.delta_bar.abs() > 1e-6 {
                    let prod = c.gamma_bar * c.n_bar;
                    prop_assert!((prod - expect).abs() <= 1e-9 * expect);
                }
            }

            #[test]
            fn pa_bs_duality((s, kappa) in scales()) {
                let pa = pa_rates(&s, kappa);
                let bs = bs_rates(&DerivedScales { omega_bar: 0.5 * s.delta_omega, ..s }, kappa);
                prop_assert!((pa.j_pa - bs.j_bs).abs() <= 1e-12 * bs.j_bs.abs().max(1e-300));
            }

            #[test]
            fn pa_collective_rates_positive((s, kappa) in scales()) {
                let pa = pa_rates(&s, kappa);
                prop_assert!(pa.gamma_plus > 0.0 && pa.gamma_minus > 0.0);
                prop_assert!((pa.xi_pa * pa.decoherence() - pa.j_pa).abs() <= 1e-14 * pa.j_pa.abs().max(1e-300));
            }

            #[test]
            fn matched_sidebands_at_bs_resonance(p in params(), db in -4.0..4.0f64) {
                let q = p.at_bs_resonance(db);
                let s = sideband_spectrum(&q, 1e-9);
                prop_assert!(s.matched.len() >= 2);
                let lo = q.delta1 - q.omega1;
                let hi = q.delta1 + q.omega2;
                prop_assert!((lo - (q.delta2 - q.omega2)).abs() < 1e-12);
                prop_assert!((hi - (q.delta2 + q.omega1)).abs() < 1e-12);
            }
        }
    }
}
