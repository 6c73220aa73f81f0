//! Expectation values, second moments, Wigner functions and entanglement
//! diagnostics of mechanical density matrices.
//!
//! Quadratures are `X = (b + b^dag)/2` and `P = (b - b^dag)/(2i)`, so the
//! vacuum has `Var(X) = Var(P) = 1/4`. Phase-space coordinates `(x, p)` are
//! the real and imaginary parts of the coherent amplitude in the same units.

use std::io::Write;

use nalgebra::{DMatrix, Matrix4, Vector4};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coeffs::{pa_coefficients, ResonanceKind};
use crate::dynamics::{evolve_with, EvolveOptions, ModelTier, TierKind};
use crate::error::{Error, Result};
use crate::fock::{CMatrix, DensityMatrix, FockSpace, Operator};
use crate::model::SystemParams;

/// Coarsest grid spacing accepted by [`wigner`]: four points per
/// zero-point width (`sigma = 1/2`).
pub const WIGNER_MAX_SPACING: f64 = 0.125;

const I: Complex64 = Complex64::new(0.0, 1.0);

/// `<b_k^dag b_k>` for every mode of the state.
pub fn occupations(rho: &DensityMatrix) -> Vec<f64> {
    let sp = rho.space();
    (0..sp.modes())
        .map(|k| {
            let n = Operator::number(sp, k).expect("mode index in range");
            n.expect(rho.matrix()).re
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovarianceMatrix {
    /// Symmetrized covariance over `(X1, P1, X2, P2)`.
    pub matrix: Matrix4<f64>,
    pub mean: Vector4<f64>,
}

impl CovarianceMatrix {
    pub fn var(&self, coeffs: [f64; 4]) -> f64 {
        let v = Vector4::from(coeffs);
        (v.transpose() * self.matrix * v)[(0, 0)]
    }

    /// `Var(X_j) Var(P_j)` for oscillator `j`.
    pub fn uncertainty_product(&self, j: usize) -> f64 {
        self.matrix[(2 * j, 2 * j)] * self.matrix[(2 * j + 1, 2 * j + 1)]
    }

    /// Robertson-Schroedinger determinant `Var X Var P - Cov(X,P)^2` for oscillator `j`.
    pub fn mode_determinant(&self, j: usize) -> f64 {
        let (a, b) = (2 * j, 2 * j + 1);
        self.matrix[(a, a)] * self.matrix[(b, b)] - self.matrix[(a, b)].powi(2)
    }
}

fn quadratures(space: &FockSpace) -> Result<[Operator; 4]> {
    let mut out = Vec::with_capacity(4);
    for k in 0..2 {
        let b = Operator::lower(space, k)?;
        let bd = b.dagger();
        out.push(b.add(&bd).scale_re(0.5));
        out.push(b.add(&bd.scale_re(-1.0)).scale(-0.5 * I));
    }
    Ok(out.try_into().expect("four quadratures"))
}

fn require_two_modes(rho: &DensityMatrix) -> Result<()> {
    if rho.space().modes() != 2 {
        return Err(Error::Shape(format!(
            "expected a two-mode state, got {} modes",
            rho.space().modes()
        )));
    }
    Ok(())
}

/// Means and symmetrized covariances of `(X1, P1, X2, P2)` for a two-mode state.
pub fn covariance(rho: &DensityMatrix) -> Result<CovarianceMatrix> {
    require_two_modes(rho)?;
    let q = quadratures(rho.space())?;
    let m = rho.matrix();
    let mean = Vector4::from_fn(|i, _| q[i].expect(m).re);
    let mut matrix = Matrix4::zeros();
    for i in 0..4 {
        for j in i..4 {
            let sym = (q[i].mul(&q[j]).expect(m) + q[j].mul(&q[i]).expect(m)).re * 0.5;
            let v = sym - mean[i] * mean[j];
            matrix[(i, j)] = v;
            matrix[(j, i)] = v;
        }
    }
    Ok(CovarianceMatrix { matrix, mean })
}

/// Rotation-optimized Duan value: half the minimum over the relative phase of
/// `Var(X1 + X2') + Var(P1 - P2')`. Separable states give at least 1/2.
pub fn duan_value(cov: &CovarianceMatrix) -> f64 {
    let v = &cov.matrix;
    let total = v[(0, 0)] + v[(1, 1)] + v[(2, 2)] + v[(3, 3)];
    let a = v[(0, 2)] - v[(1, 3)];
    let b = v[(0, 3)] + v[(1, 2)];
    0.5 * (total - 2.0 * a.hypot(b))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollectiveMoments {
    pub mean: Complex64,
    /// `<B^dag B>`.
    pub number: f64,
    /// `<[B, B^dag]>`.
    pub commutator: f64,
    pub var_x: f64,
    pub var_p: f64,
}

/// Collective operator `sqrt(G1/G2) b1 + sqrt(G2/G1) b2` (BS) or with `b2^dag` (PA).
pub fn collective_operator(
    space: &FockSpace,
    kind: ResonanceKind,
    g1: f64,
    g2: f64,
) -> Result<Operator> {
    if !(g1 > 0.0 && g2 > 0.0) {
        return Err(Error::ZeroCoupling);
    }
    let b1 = Operator::lower(space, 0)?;
    let b2 = Operator::lower(space, 1)?;
    let second = match kind {
        ResonanceKind::BS => b2,
        ResonanceKind::PA => b2.dagger(),
    };
    Ok(b1.scale_re((g1 / g2).sqrt()).add(&second.scale_re((g2 / g1).sqrt())))
}

pub fn collective_mode_moments(
    rho: &DensityMatrix,
    kind: ResonanceKind,
    g1: f64,
    g2: f64,
) -> Result<CollectiveMoments> {
    require_two_modes(rho)?;
    let b = collective_operator(rho.space(), kind, g1, g2)?;
    let bd = b.dagger();
    let m = rho.matrix();
    let mean = b.expect(m);
    let bdb = bd.mul(&b).expect(m).re;
    let bbd = b.mul(&bd).expect(m).re;
    let x = b.add(&bd).scale_re(0.5);
    let p = b.add(&bd.scale_re(-1.0)).scale(-0.5 * I);
    let var = |q: &Operator| q.mul(q).expect(m).re - q.expect(m).re.powi(2);
    Ok(CollectiveMoments {
        mean,
        number: bdb,
        commutator: bbd - bdb,
        var_x: var(&x),
        var_p: var(&p),
    })
}

/// Uhlmann fidelity `(Tr sqrt(sqrt(rho) sigma sqrt(rho)))^2`.
pub fn fidelity(rho: &DensityMatrix, sigma: &DensityMatrix) -> Result<f64> {
    if rho.space() != sigma.space() {
        return Err(Error::Shape("fidelity between states on different spaces".into()));
    }
    let sqrt_rho = psd_sqrt(rho.matrix());
    let inner = &sqrt_rho * sigma.matrix() * &sqrt_rho;
    let s: f64 = hermitian_eigenvalues(&inner)
        .iter()
        .map(|&l| l.max(0.0).sqrt())
        .sum();
    Ok(s * s)
}

fn hermitian_eigenvalues(m: &CMatrix) -> Vec<f64> {
    let h = (m + m.adjoint()) * Complex64::new(0.5, 0.0);
    h.symmetric_eigenvalues().iter().cloned().collect()
}

fn psd_sqrt(m: &CMatrix) -> CMatrix {
    let h = (m + m.adjoint()) * Complex64::new(0.5, 0.0);
    let eig = h.symmetric_eigen();
    let n = m.nrows();
    let mut d = CMatrix::zeros(n, n);
    for (i, &l) in eig.eigenvalues.iter().enumerate() {
        d[(i, i)] = Complex64::new(l.max(0.0).sqrt(), 0.0);
    }
    &eig.eigenvectors * d * eig.eigenvectors.adjoint()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub p_min: f64,
    pub p_max: f64,
    pub nx: usize,
    pub np: usize,
}

impl GridSpec {
    pub fn square(half_width: f64, points: usize) -> GridSpec {
        GridSpec {
            x_min: -half_width,
            x_max: half_width,
            p_min: -half_width,
            p_max: half_width,
            nx: points,
            np: points,
        }
    }

    fn axis(lo: f64, hi: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect()
    }

    fn spacing(&self) -> (f64, f64) {
        (
            (self.x_max - self.x_min) / (self.nx - 1) as f64,
            (self.p_max - self.p_min) / (self.np - 1) as f64,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WignerGrid {
    pub xs: Vec<f64>,
    pub ps: Vec<f64>,
    /// `values[ip][ix]`.
    pub values: Vec<Vec<f64>>,
}

impl WignerGrid {
    /// Trapezoid-free Riemann sum `sum W dx dp`.
    pub fn integral(&self) -> f64 {
        let dx = self.xs[1] - self.xs[0];
        let dp = self.ps[1] - self.ps[0];
        self.values.iter().flatten().sum::<f64>() * dx * dp
    }

    /// `integral W dp` on the x grid.
    pub fn marginal_x(&self) -> Vec<f64> {
        let dp = self.ps[1] - self.ps[0];
        (0..self.xs.len())
            .map(|ix| self.values.iter().map(|row| row[ix]).sum::<f64>() * dp)
            .collect()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Half-widths of the half-maximum contour along the x and p axes through the peak.
    pub fn half_max_widths(&self) -> (f64, f64) {
        let (mut best, mut bi, mut bj) = (f64::NEG_INFINITY, 0, 0);
        for (j, row) in self.values.iter().enumerate() {
            for (i, &v) in row.iter().enumerate() {
                if v > best {
                    best = v;
                    bi = i;
                    bj = j;
                }
            }
        }
        let half = 0.5 * best;
        let row: Vec<f64> = self.values[bj].clone();
        let col: Vec<f64> = self.values.iter().map(|r| r[bi]).collect();
        (
            crossing_width(&self.xs, &row, bi, half),
            crossing_width(&self.ps, &col, bj, half),
        )
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "x,p,W")?;
        for (j, p) in self.ps.iter().enumerate() {
            for (i, x) in self.xs.iter().enumerate() {
                writeln!(w, "{:.16e},{:.16e},{:.16e}", x, p, self.values[j][i])?;
            }
        }
        Ok(())
    }

    /// 8-bit binary graymap, black at the minimum and white at the maximum.
    /// The top image row is the largest `p`.
    pub fn write_pgm<W: Write>(&self, mut w: W) -> Result<()> {
        let lo = self.values.iter().flatten().cloned().fold(f64::INFINITY, f64::min);
        let hi = self.max();
        let span = if hi > lo { hi - lo } else { 1.0 };
        write!(w, "P5\n{} {}\n255\n", self.xs.len(), self.ps.len())?;
        let mut bytes = Vec::with_capacity(self.xs.len() * self.ps.len());
        for row in self.values.iter().rev() {
            bytes.extend(row.iter().map(|&v| ((v - lo) / span * 255.0).round() as u8));
        }
        w.write_all(&bytes)?;
        Ok(())
    }
}

/// Distance between the two half-level crossings on either side of `peak`,
/// halved, using linear interpolation between samples.
fn crossing_width(axis: &[f64], vals: &[f64], peak: usize, level: f64) -> f64 {
    let find = |range: Box<dyn Iterator<Item = usize>>, step: isize| -> f64 {
        for i in range {
            let j = (i as isize + step) as usize;
            if vals[j] < level {
                let f = (vals[i] - level) / (vals[i] - vals[j]);
                return axis[i] + f * (axis[j] - axis[i]);
            }
        }
        if step > 0 {
            axis[axis.len() - 1]
        } else {
            axis[0]
        }
    };
    let right = find(Box::new(peak..vals.len() - 1), 1);
    let left = find(Box::new((1..=peak).rev()), -1);
    0.5 * (right - left)
}

/// Column-by-column matrix of the displacement `D(beta)` restricted to the
/// first `n` input states, on a padded output space of `pad` levels.
fn displacement_columns(beta: Complex64, n: usize, pad: usize) -> DMatrix<Complex64> {
    let mut e = DMatrix::<Complex64>::zeros(pad, n);
    // D(beta)|0> is the coherent state |beta>
    let mut amp = Complex64::new((-0.5 * beta.norm_sqr()).exp(), 0.0);
    for m in 0..pad {
        e[(m, 0)] = amp;
        amp = amp * beta / ((m + 1) as f64).sqrt();
    }
    // D|k+1> = (a^dag - beta^*) D|k> / sqrt(k+1)
    for k in 0..n - 1 {
        let s = 1.0 / ((k + 1) as f64).sqrt();
        for m in 0..pad {
            let raised = if m > 0 {
                e[(m - 1, k)] * (m as f64).sqrt()
            } else {
                Complex64::new(0.0, 0.0)
            };
            e[(m, k + 1)] = (raised - beta.conj() * e[(m, k)]) * s;
        }
    }
    e
}

/// Wigner function of a single-mode state by the displaced-parity series
/// `W(alpha) = (2/pi) sum_m (-1)^m <m| D(-alpha) rho D(-alpha)^dag |m>`.
pub fn wigner(rho: &DensityMatrix, grid: &GridSpec) -> Result<WignerGrid> {
    if rho.space().modes() != 1 {
        return Err(Error::Shape(format!(
            "wigner needs a single-mode state, got {} modes",
            rho.space().modes()
        )));
    }
    if grid.nx < 2 || grid.np < 2 {
        return Err(Error::InvalidArgument("wigner grid needs at least 2 points per axis".into()));
    }
    let (dx, dp) = grid.spacing();
    if dx > WIGNER_MAX_SPACING || dp > WIGNER_MAX_SPACING || !(dx > 0.0 && dp > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "wigner grid too coarse: spacing ({dx:.3}, {dp:.3}) exceeds {WIGNER_MAX_SPACING} \
             (four points per zero-point width)"
        )));
    }
    let n = rho.space().dim();
    let xs = GridSpec::axis(grid.x_min, grid.x_max, grid.nx);
    let ps = GridSpec::axis(grid.p_min, grid.p_max, grid.np);
    let reach = xs
        .iter()
        .map(|x| x.abs())
        .fold(0.0, f64::max)
        .hypot(ps.iter().map(|p| p.abs()).fold(0.0, f64::max));
    let pad = n + ((reach + (n as f64).sqrt() + 6.0).powi(2)).ceil() as usize;
    let r = rho.matrix();
    let values: Vec<Vec<f64>> = ps
        .par_iter()
        .map(|&p| {
            xs.iter()
                .map(|&x| {
                    let e = displacement_columns(-Complex64::new(x, p), n, pad);
                    let er = &e * r;
                    let mut acc = 0.0;
                    for m in 0..pad {
                        let mut d = Complex64::new(0.0, 0.0);
                        for k in 0..n {
                            d += er[(m, k)] * e[(m, k)].conj();
                        }
                        acc += if m % 2 == 0 { d.re } else { -d.re };
                    }
                    acc * 2.0 / std::f64::consts::PI
                })
                .collect()
        })
        .collect();
    Ok(WignerGrid { xs, ps, values })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XiReport {
    #[serde(rename = "xiPA")]
    pub xi_pa: f64,
    #[serde(rename = "JPA")]
    pub j_pa: f64,
    pub times: Vec<f64>,
    pub duan: Vec<f64>,
    /// Per sample: top Fock populations still below the truncation threshold.
    pub resolved: Vec<bool>,
    /// Minimum over resolved samples only.
    pub min_duan: f64,
    pub entangled: bool,
    pub truncated: bool,
}

/// Evolve the effective parametric-amplifier equation from vacuum and track
/// the Duan value next to the closed-form `xiPA`.
pub fn xi_trajectory_check(
    p: &SystemParams,
    t_end: f64,
    cutoff: usize,
    samples: usize,
    opts: &EvolveOptions,
) -> Result<XiReport> {
    let c = pa_coefficients(p)?;
    let space = FockSpace::new(&[cutoff, cutoff])?;
    let tier = ModelTier::new(TierKind::EffectivePA);
    let dt = t_end / samples.max(1) as f64;
    let mut times = Vec::new();
    let mut duan = Vec::new();
    let mut resolved = Vec::new();
    let diag = evolve_with(&tier, p, &DensityMatrix::vacuum(&space), t_end, dt, opts, |t, s| {
        times.push(t);
        duan.push(duan_value(&covariance(s)?));
        let top = s.top_level_populations();
        resolved.push(top.iter().all(|&v| v <= opts.truncation_threshold));
        Ok(())
    })?;
    let min_duan = duan
        .iter()
        .zip(&resolved)
        .filter(|(_, &ok)| ok)
        .map(|(&d, _)| d)
        .fold(f64::INFINITY, f64::min);
    Ok(XiReport {
        xi_pa: c.xi_pa,
        j_pa: c.j_pa,
        times,
        duan,
        resolved,
        min_duan,
        entangled: min_duan < 0.5 - 1e-9,
        truncated: diag.truncated,
    })
}
