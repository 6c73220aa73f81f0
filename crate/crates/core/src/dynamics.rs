//! Master-equation generators for every model tier and the step-doubling
//! RK4 integrator shared by all of them.
//!
//! All tiers run in the frame co-rotating with the bare mechanical
//! frequencies. The full tier keeps the cavity as mode 0 followed by the two
//! oscillators; the other tiers act on the two oscillators only.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::coeffs::{
    bs_coefficients, coupling_matrices, pa_coefficients, spring_shift, Frame,
};
use crate::error::{Error, Result};
use crate::fock::{
    hermiticity_defect, hermitize, mechanical_bvec, min_eigenvalue, partial_trace, trace,
    BilinearPlan, CMatrix, DensityMatrix, FockSpace, LinearCombo, Operator,
    SparseMat,
};
use crate::model::{derived_scales, SystemParams};
use crate::observables::{covariance, fidelity, occupations, CovarianceMatrix};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);
const I: Complex64 = Complex64::new(0.0, 1.0);

/// Serialized with the kebab-case names of [`TierKind::name`]; the CamelCase
/// variant names are accepted on input as well.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TierKind {
    #[serde(rename = "full-displaced", alias = "FullDisplaced")]
    FullDisplaced,
    #[serde(rename = "reduced-time-dependent", alias = "ReducedTimeDependent")]
    ReducedTimeDependent,
    #[serde(rename = "effective-bs", alias = "EffectiveBS")]
    EffectiveBS,
    #[serde(rename = "effective-pa", alias = "EffectivePA")]
    EffectivePA,
    #[serde(rename = "pa-dissipator-only", alias = "PADissipatorOnly")]
    PADissipatorOnly,
}

impl TierKind {
    pub const ALL: [TierKind; 5] = [
        TierKind::FullDisplaced,
        TierKind::ReducedTimeDependent,
        TierKind::EffectiveBS,
        TierKind::EffectivePA,
        TierKind::PADissipatorOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TierKind::FullDisplaced => "full-displaced",
            TierKind::ReducedTimeDependent => "reduced-time-dependent",
            TierKind::EffectiveBS => "effective-bs",
            TierKind::EffectivePA => "effective-pa",
            TierKind::PADissipatorOnly => "pa-dissipator-only",
        }
    }

    pub fn is_effective(self) -> bool {
        matches!(
            self,
            TierKind::EffectiveBS | TierKind::EffectivePA | TierKind::PADissipatorOnly
        )
    }

    /// Number of modes of the space this tier acts on.
    pub fn modes(self) -> usize {
        if self == TierKind::FullDisplaced {
            3
        } else {
            2
        }
    }
}

impl std::str::FromStr for TierKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<TierKind> {
        TierKind::ALL
            .into_iter()
            .find(|k| k.name() == s || format!("{k:?}") == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown tier '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelTier {
    pub kind: TierKind,
    /// Mechanical baths `gamma_i [(n_i + 1) L(b_i) + n_i L(b_i^dag)]`.
    pub thermal: bool,
    /// Cavity-induced dissipators of the effective tiers.
    pub dissipation: bool,
    /// Reinstate the `|alpha(t)|^2` radiation-pressure drive (full tier only).
    pub mechanical_drive: bool,
}

impl ModelTier {
    pub fn new(kind: TierKind) -> ModelTier {
        ModelTier {
            kind,
            thermal: true,
            dissipation: true,
            mechanical_drive: false,
        }
    }

    pub fn without_dissipation(mut self) -> ModelTier {
        self.dissipation = false;
        self
    }

    pub fn with_thermal(mut self, on: bool) -> ModelTier {
        self.thermal = on;
        self
    }

    pub fn with_mechanical_drive(mut self) -> ModelTier {
        self.mechanical_drive = true;
        self
    }

    fn check(&self) -> Result<()> {
        if !self.dissipation && !self.kind.is_effective() {
            return Err(Error::InvalidArgument(format!(
                "cavity dissipation cannot be switched off in the {} tier",
                self.kind.name()
            )));
        }
        if self.mechanical_drive && self.kind != TierKind::FullDisplaced {
            return Err(Error::InvalidArgument(
                "the mechanical drive term exists only in the full-displaced tier".into(),
            ));
        }
        Ok(())
    }
}

/// Time-dependent part of a generator.
#[derive(Debug, Clone)]
enum Driven {
    None,
    Reduced {
        plan: BilinearPlan,
        params: SystemParams,
    },
    Full {
        combo: LinearCombo,
        params: SystemParams,
        drive: bool,
    },
}

/// Precomputed Liouvillian of one tier on one space:
/// `d rho/dt = -i[H + H(t), rho] + sum_k rate_k L(c_k) + (bilinear part)`.
///
/// The anticommutator parts are folded into `K = H - (i/2) sum_k rate_k c_k^dag c_k`,
/// so for Hermitian `rho` the unitary and decay parts are `A + A^dag` with
/// `A = -i K rho`, and the jumps are `rate c (c rho)^dag`. Only left products remain.
#[derive(Debug, Clone)]
pub struct Generator {
    space: FockSpace,
    effective: SparseMat,
    jumps: Vec<(SparseMat, f64)>,
    driven: Driven,
}

fn push_term(out: &mut Vec<(SparseMat, f64)>, c: &Operator, rate: f64) {
    if rate != 0.0 {
        out.push((c.sparse().clone(), rate));
    }
}

const TILE: usize = 32;

/// `m <- m + m^dag`, walked in tiles to stay in cache.
fn add_adjoint_in_place(m: &mut CMatrix) {
    let n = m.nrows();
    for jb in (0..n).step_by(TILE) {
        for ib in (0..=jb).step_by(TILE) {
            for j in jb..(jb + TILE).min(n) {
                for i in ib..(ib + TILE).min(j) {
                    let v = m[(i, j)] + m[(j, i)].conj();
                    m[(i, j)] = v;
                    m[(j, i)] = v.conj();
                }
            }
        }
    }
    for j in 0..n {
        m[(j, j)] = Complex64::new(2.0 * m[(j, j)].re, 0.0);
    }
}

/// `dst <- src^dag`, tiled.
fn adjoint_into(src: &CMatrix, dst: &mut CMatrix) {
    let n = src.nrows();
    for jb in (0..n).step_by(TILE) {
        for ib in (0..n).step_by(TILE) {
            for j in jb..(jb + TILE).min(n) {
                for i in ib..(ib + TILE).min(n) {
                    dst[(j, i)] = src[(i, j)].conj();
                }
            }
        }
    }
}

/// Dense buffers reused across generator calls.
#[derive(Debug, Clone)]
pub struct Scratch {
    left: CMatrix,
    adjoint: CMatrix,
}

impl Scratch {
    pub fn new(dim: usize) -> Scratch {
        Scratch {
            left: CMatrix::zeros(dim, dim),
            adjoint: CMatrix::zeros(dim, dim),
        }
    }
}

impl Generator {
    pub fn new(tier: &ModelTier, p: &SystemParams, space: &FockSpace) -> Result<Generator> {
        tier.check()?;
        if space.modes() != tier.kind.modes() {
            return Err(Error::Shape(format!(
                "the {} tier needs a {}-mode space, got {} modes",
                tier.kind.name(),
                tier.kind.modes(),
                space.modes()
            )));
        }
        let mech = if tier.kind == TierKind::FullDisplaced {
            [1, 2]
        } else {
            [0, 1]
        };
        let b1 = Operator::lower(space, mech[0])?;
        let b2 = Operator::lower(space, mech[1])?;
        let mut dissipators = Vec::new();
        let mut hamiltonian = None;
        let mut driven = Driven::None;

        if tier.thermal {
            for (b, (gamma, nth)) in [&b1, &b2]
                .into_iter()
                .zip([(p.gamma1, p.nth1), (p.gamma2, p.nth2)])
            {
                push_term(&mut dissipators, b, gamma * (nth + 1.0));
                push_term(&mut dissipators, &b.dagger(), gamma * nth);
            }
        }

        let s = derived_scales(p);
        let collective = |second: &Operator| -> Option<Operator> {
            (s.big_g1 * s.big_g2 > 0.0).then(|| {
                b1.scale_re((s.big_g1 / s.big_g2).sqrt())
                    .add(&second.scale_re((s.big_g2 / s.big_g1).sqrt()))
            })
        };

        match tier.kind {
            TierKind::FullDisplaced => {
                let a = Operator::lower(space, 0)?;
                push_term(&mut dissipators, &a, p.kappa);
                let ad = a.dagger();
                let (b1d, b2d) = (b1.dagger(), b2.dagger());
                let ops = [
                    ad.mul(&b1),
                    ad.mul(&b2),
                    ad.mul(&b1d),
                    ad.mul(&b2d),
                    a.mul(&b1d),
                    a.mul(&b2d),
                    a.mul(&b1),
                    a.mul(&b2),
                    b1.clone(),
                    b2.clone(),
                    b1d,
                    b2d,
                ];
                let mats: Vec<SparseMat> = ops.iter().map(|o| o.sparse().clone()).collect();
                driven = Driven::Full {
                    combo: LinearCombo::new(&mats),
                    params: *p,
                    drive: tier.mechanical_drive,
                };
            }
            TierKind::ReducedTimeDependent => {
                driven = Driven::Reduced {
                    plan: BilinearPlan::new(&mechanical_bvec(space, mech[0], mech[1])?)?,
                    params: *p,
                };
            }
            TierKind::EffectiveBS => {
                let c = bs_coefficients(p)?;
                let exchange = b1.dagger().mul(&b2);
                let h = exchange.add(&exchange.dagger()).scale_re(c.hamiltonian_coupling());
                hamiltonian = Some(h.sparse().clone());
                if tier.dissipation {
                    for (j, b) in [&b1, &b2].into_iter().enumerate() {
                        let (down, up) = c.single_mode_rates(j);
                        push_term(&mut dissipators, b, down);
                        push_term(&mut dissipators, &b.dagger(), up);
                    }
                    if let Some(big_b) = collective(&b2) {
                        let (down, up) = c.collective_rates();
                        push_term(&mut dissipators, &big_b, down);
                        push_term(&mut dissipators, &big_b.dagger(), up);
                    }
                }
            }
            TierKind::EffectivePA => {
                let c = pa_coefficients(p)?;
                let pair = b1.mul(&b2);
                let h = pair.add(&pair.dagger()).scale_re(c.hamiltonian_coupling());
                hamiltonian = Some(h.sparse().clone());
                if tier.dissipation {
                    for (j, b) in [&b1, &b2].into_iter().enumerate() {
                        let (down, up) = c.single_mode_rates(j);
                        push_term(&mut dissipators, b, down);
                        push_term(&mut dissipators, &b.dagger(), up);
                    }
                    if let Some(big_b) = collective(&b2.dagger()) {
                        push_term(&mut dissipators, &big_b, c.gamma_minus);
                        push_term(&mut dissipators, &big_b.dagger(), c.gamma_plus);
                    }
                }
            }
            TierKind::PADissipatorOnly => {
                let c = pa_coefficients(p)?;
                if tier.dissipation {
                    let big_b = collective(&b2.dagger()).ok_or(Error::ZeroCoupling)?;
                    push_term(&mut dissipators, &big_b, c.gamma_plus);
                }
            }
        }

        let dim = space.dim();
        let mut effective = hamiltonian.unwrap_or_else(|| SparseMat::zeros(dim));
        for (c, rate) in &dissipators {
            let decay = c.adjoint().matmul(c).scale(Complex64::new(0.0, -0.5 * rate));
            effective = effective.add(&decay);
        }
        Ok(Generator {
            space: space.clone(),
            effective,
            jumps: dissipators,
            driven,
        })
    }

    pub fn space(&self) -> &FockSpace {
        &self.space
    }

    /// `out = d rho/dt` at time `t`. `rho` must be Hermitian; the result is
    /// Hermitian by construction.
    pub fn apply(&self, t: f64, rho: &CMatrix, out: &mut CMatrix) {
        self.apply_with(t, rho, out, &mut Scratch::new(rho.nrows()));
    }

    /// [`Generator::apply`] with caller-owned buffers.
    pub fn apply_with(&self, t: f64, rho: &CMatrix, out: &mut CMatrix, scratch: &mut Scratch) {
        out.fill(ZERO);
        self.effective.mul_left_acc(rho, -I, out);
        if let Driven::Full {
            combo,
            params,
            drive,
        } = &self.driven
        {
            let h = combo.combine(&full_coefficients(params, t, *drive));
            h.mul_left_acc(rho, -I, out);
        }
        add_adjoint_in_place(out);
        for (c, rate) in &self.jumps {
            scratch.left.fill(ZERO);
            c.mul_left_acc(rho, ONE, &mut scratch.left);
            adjoint_into(&scratch.left, &mut scratch.adjoint);
            c.mul_left_acc(&scratch.adjoint, Complex64::new(*rate, 0.0), out);
        }
        if let Driven::Reduced { plan, params } = &self.driven {
            let m = coupling_matrices(params, t, Frame::MechanicalRotating);
            plan.accumulate(&m.m1, &m.m2, &m.m3, rho, out);
        }
    }
}

/// Weights of `(a^dag b_j, a^dag b_j^dag, a b_j^dag, a b_j, b_j, b_j^dag)` in the
/// displaced Hamiltonian `-g_j (alpha(t)^* a + alpha(t) a^dag)(b_j e^{-i w_j t} + h.c.)`
/// with `alpha(t) = sum_k alpha_k e^{i Delta_k t}`.
fn full_coefficients(p: &SystemParams, t: f64, drive: bool) -> [Complex64; 12] {
    let g = p.couplings();
    let w = p.omegas();
    let amps = p.amplitudes();
    let det = p.detunings();
    let field = |shift: f64| -> Complex64 {
        amps.iter()
            .zip(det)
            .map(|(&a, d)| Complex64::from_polar(a, (d + shift) * t))
            .sum()
    };
    let mut c = [ZERO; 12];
    for j in 0..2 {
        let lower = -g[j] * field(-w[j]);
        let raise = -g[j] * field(w[j]);
        c[j] = lower;
        c[2 + j] = raise;
        c[4 + j] = lower.conj();
        c[6 + j] = raise.conj();
    }
    if drive {
        let alpha = field(0.0);
        for j in 0..2 {
            let v = -g[j] * alpha.norm_sqr() * Complex64::from_polar(1.0, -w[j] * t);
            c[8 + j] = v;
            c[10 + j] = v.conj();
        }
    }
    c
}

/// `d rho/dt` of `tier` at time `t`.
pub fn rhs(tier: &ModelTier, p: &SystemParams, t: f64, rho: &DensityMatrix) -> Result<CMatrix> {
    let gen = Generator::new(tier, p, rho.space())?;
    let n = rho.space().dim();
    let mut out = CMatrix::zeros(n, n);
    gen.apply(t, rho.matrix(), &mut out);
    Ok(out)
}

/// Missing fields take their defaults when deserialized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvolveOptions {
    /// Accepted local error per step (max entry of the Richardson estimate).
    pub tolerance: f64,
    pub max_trace_defect: f64,
    /// Top-level population above which the trajectory is flagged as truncated.
    pub truncation_threshold: f64,
    pub fail_on_truncation: bool,
    /// Compute the smallest eigenvalue at every output sample.
    pub check_positivity: bool,
    /// First trial step; defaults to the output interval.
    pub initial_step: Option<f64>,
    pub min_step: f64,
}

impl Default for EvolveOptions {
    fn default() -> Self {
        EvolveOptions {
            tolerance: 1e-9,
            max_trace_defect: 1e-6,
            truncation_threshold: 1e-3,
            fail_on_truncation: false,
            check_positivity: false,
            initial_step: None,
            min_step: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegratorDiagnostics {
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    pub max_trace_defect: f64,
    /// Largest Hermiticity defect seen before re-symmetrization.
    pub max_hermiticity_defect: f64,
    /// Per-mode maximum over samples of the top Fock-level population.
    pub max_top_population: Vec<f64>,
    pub truncated: bool,
    /// Smallest eigenvalue over samples, when requested.
    pub min_eigenvalue: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DensityMatrix>,
    pub diagnostics: IntegratorDiagnostics,
}

/// Buffers for one classical RK4 step.
struct Rk4 {
    k: [CMatrix; 3],
    stage: CMatrix,
    scratch: Scratch,
}

impl Rk4 {
    fn new(n: usize) -> Rk4 {
        Rk4 {
            k: std::array::from_fn(|_| CMatrix::zeros(n, n)),
            stage: CMatrix::zeros(n, n),
            scratch: Scratch::new(n),
        }
    }

    /// One step of size `h` from `rho` (with `k1 = f(t, rho)`) into `out`.
    fn step(&mut self, gen: &Generator, t: f64, rho: &CMatrix, k1: &CMatrix, h: f64, out: &mut CMatrix) {
        let Rk4 { k, stage, scratch } = self;
        let [k2, k3, k4] = k;
        set_axpy(stage, rho, 0.5 * h, k1);
        gen.apply_with(t + 0.5 * h, stage, k2, scratch);
        set_axpy(stage, rho, 0.5 * h, k2);
        gen.apply_with(t + 0.5 * h, stage, k3, scratch);
        set_axpy(stage, rho, h, k3);
        gen.apply_with(t + h, stage, k4, scratch);
        let w = h / 6.0;
        for ((((o, &r), &a), (&b, &c)), &d) in out
            .iter_mut()
            .zip(rho.iter())
            .zip(k1.iter())
            .zip(k2.iter().zip(k3.iter()))
            .zip(k4.iter())
        {
            *o = r + (a + (b + c) * 2.0 + d) * w;
        }
    }
}

/// `out <- x + s y`.
fn set_axpy(out: &mut CMatrix, x: &CMatrix, s: f64, y: &CMatrix) {
    for ((o, &a), &b) in out.iter_mut().zip(x.iter()).zip(y.iter()) {
        *o = a + b * s;
    }
}

fn max_abs_diff(a: &CMatrix, b: &CMatrix) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

/// Output times `0, dt, 2 dt, ...` ending exactly at `t_end`.
fn sample_times(t_end: f64, dt: f64) -> Vec<f64> {
    let n = ((t_end / dt) - 1e-9).ceil().max(1.0) as usize;
    (0..=n).map(|i| if i == n { t_end } else { i as f64 * dt }).collect()
}

/// Integrate and hand every output sample to `observe` instead of storing it.
pub fn evolve_with<F>(
    tier: &ModelTier,
    p: &SystemParams,
    rho0: &DensityMatrix,
    t_end: f64,
    dt: f64,
    opts: &EvolveOptions,
    mut observe: F,
) -> Result<IntegratorDiagnostics>
where
    F: FnMut(f64, &DensityMatrix) -> Result<()>,
{
    if !(t_end > 0.0 && dt > 0.0 && t_end.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "need t_end > 0 and dt > 0, got t_end = {t_end}, dt = {dt}"
        )));
    }
    let d0 = rho0.diagnostics();
    if !d0.is_valid() {
        return Err(Error::InvalidArgument(format!(
            "initial state is not a valid density matrix: {d0:?}"
        )));
    }
    let gen = Generator::new(tier, p, rho0.space())?;
    let space = rho0.space().clone();
    let n = space.dim();
    let mut diag = IntegratorDiagnostics {
        accepted_steps: 0,
        rejected_steps: 0,
        max_trace_defect: 0.0,
        max_hermiticity_defect: 0.0,
        max_top_population: vec![0.0; space.modes()],
        truncated: false,
        min_eigenvalue: None,
    };

    let mut sample = |t: f64, m: &CMatrix, diag: &mut IntegratorDiagnostics| -> Result<()> {
        let state = DensityMatrix::from_matrix_unchecked(&space, m.clone())?;
        for (mx, top) in diag.max_top_population.iter_mut().zip(state.top_level_populations()) {
            *mx = mx.max(top);
        }
        if diag.max_top_population.iter().any(|&v| v > opts.truncation_threshold) {
            diag.truncated = true;
            if opts.fail_on_truncation {
                return Err(Error::Diagnostics(format!(
                    "top Fock level population {:?} exceeds {:.1e} at t = {t}",
                    diag.max_top_population, opts.truncation_threshold
                )));
            }
        }
        if opts.check_positivity {
            let e = min_eigenvalue(m);
            diag.min_eigenvalue = Some(diag.min_eigenvalue.map_or(e, |v: f64| v.min(e)));
        }
        observe(t, &state)
    };

    let times = sample_times(t_end, dt);
    let mut rho = rho0.matrix().clone();
    sample(0.0, &rho, &mut diag)?;
    let mut t = 0.0;
    let mut h = opts.initial_step.unwrap_or(dt).min(dt);
    let mut k1 = CMatrix::zeros(n, n);
    let mut k1_half = CMatrix::zeros(n, n);
    let mut full = CMatrix::zeros(n, n);
    let mut mid = CMatrix::zeros(n, n);
    let mut fine = CMatrix::zeros(n, n);
    let mut rk = Rk4::new(n);
    for &target in &times[1..] {
        while t < target {
            let step = h.min(target - t);
            let last = step == target - t;
            gen.apply_with(t, &rho, &mut k1, &mut rk.scratch);
            rk.step(&gen, t, &rho, &k1, step, &mut full);
            rk.step(&gen, t, &rho, &k1, 0.5 * step, &mut mid);
            gen.apply_with(t + 0.5 * step, &mid, &mut k1_half, &mut rk.scratch);
            rk.step(&gen, t + 0.5 * step, &mid, &k1_half, 0.5 * step, &mut fine);
            let err = max_abs_diff(&fine, &full) / 15.0;
            if !err.is_finite() {
                return Err(Error::Diagnostics(format!("non-finite state at t = {t}")));
            }
            if err < opts.tolerance {
                std::mem::swap(&mut rho, &mut fine);
                diag.max_hermiticity_defect =
                    diag.max_hermiticity_defect.max(hermiticity_defect(&rho));
                hermitize(&mut rho);
                let td = (trace(&rho) - ONE).norm();
                diag.max_trace_defect = diag.max_trace_defect.max(td);
                if td > opts.max_trace_defect {
                    return Err(Error::Diagnostics(format!(
                        "trace defect {td:.3e} exceeds {:.1e} at t = {t}",
                        opts.max_trace_defect
                    )));
                }
                t = if last { target } else { t + step };
                diag.accepted_steps += 1;
                if err < opts.tolerance / 32.0 {
                    h = (2.0 * step.max(h)).min(dt);
                }
            } else {
                diag.rejected_steps += 1;
                h = 0.5 * step;
                if h < opts.min_step {
                    return Err(Error::Diagnostics(format!(
                        "step size fell below {:.1e} at t = {t}",
                        opts.min_step
                    )));
                }
            }
        }
        sample(t, &rho, &mut diag)?;
    }
    Ok(diag)
}

/// Integrate from `rho0` to `t_end`, storing states every `dt`.
pub fn evolve(
    tier: &ModelTier,
    p: &SystemParams,
    rho0: &DensityMatrix,
    t_end: f64,
    dt: f64,
    opts: &EvolveOptions,
) -> Result<Trajectory> {
    let mut times = Vec::new();
    let mut states = Vec::new();
    let diagnostics = evolve_with(tier, p, rho0, t_end, dt, opts, |t, s| {
        times.push(t);
        states.push(s.clone());
        Ok(())
    })?;
    Ok(Trajectory {
        times,
        states,
        diagnostics,
    })
}

/// Conjugate a two-mode state by `exp(-i sum_j shift_j n_j t)`.
pub fn rotate_by_shifts(rho: &DensityMatrix, shifts: [f64; 2], t: f64) -> DensityMatrix {
    let sp = rho.space();
    let phase: Vec<f64> = (0..sp.dim())
        .map(|i| (shifts[0] * sp.digit(i, 0) as f64 + shifts[1] * sp.digit(i, 1) as f64) * t)
        .collect();
    let mut m = rho.matrix().clone();
    for c in 0..sp.dim() {
        for r in 0..sp.dim() {
            m[(r, c)] *= Complex64::from_polar(1.0, phase[c] - phase[r]);
        }
    }
    DensityMatrix::from_matrix_unchecked(sp, m).expect("same shape")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompareOptions {
    pub cavity_cutoff: usize,
    pub samples: usize,
    pub evolve: EvolveOptions,
}

impl Default for CompareOptions {
    fn default() -> Self {
        CompareOptions {
            cavity_cutoff: 2,
            samples: 100,
            evolve: EvolveOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierSeries {
    pub tier: TierKind,
    pub occupations: Vec<[f64; 2]>,
    pub covariances: Vec<CovarianceMatrix>,
    pub diagnostics: IntegratorDiagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub reference: TierKind,
    pub other: TierKind,
    /// `max_{t,i} |n_i - n_i'|` divided by the largest reference occupation.
    pub max_relative_occupation_deviation: f64,
    pub max_absolute_occupation_deviation: f64,
    pub fidelities: Vec<f64>,
    pub min_fidelity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierReport {
    pub times: Vec<f64>,
    pub tiers: Vec<TierSeries>,
    pub pairs: Vec<PairMetrics>,
}

impl TierReport {
    pub fn pair(&self, reference: TierKind, other: TierKind) -> Option<&PairMetrics> {
        self.pairs
            .iter()
            .find(|m| m.reference == reference && m.other == other)
    }
}

/// Effective tier matching the resonance that `p` satisfies, if any.
pub fn effective_tier_for(p: &SystemParams) -> Option<TierKind> {
    if bs_coefficients(p).is_ok() {
        Some(TierKind::EffectiveBS)
    } else if pa_coefficients(p).is_ok() {
        Some(TierKind::EffectivePA)
    } else {
        None
    }
}

/// Run one tier and return its mechanical states in the bare rotating frame.
fn mechanical_run(
    kind: TierKind,
    p: &SystemParams,
    rho0_mech: &DensityMatrix,
    t_end: f64,
    opts: &CompareOptions,
) -> Result<(Vec<f64>, Vec<DensityMatrix>, IntegratorDiagnostics)> {
    let tier = ModelTier::new(kind);
    let dt = t_end / opts.samples.max(1) as f64;
    let start = if kind == TierKind::FullDisplaced {
        let cavity = DensityMatrix::vacuum(&FockSpace::new(&[opts.cavity_cutoff])?);
        DensityMatrix::product(&[cavity, rho0_mech.clone()])?
    } else {
        rho0_mech.clone()
    };
    let shifts = [spring_shift(p, 0), spring_shift(p, 1)];
    let mut times = Vec::new();
    let mut states = Vec::new();
    let diag = evolve_with(&tier, p, &start, t_end, dt, &opts.evolve, |t, s| {
        let mech = match kind {
            TierKind::FullDisplaced => partial_trace(s, &[1, 2])?,
            k if k.is_effective() => rotate_by_shifts(s, shifts, t),
            _ => s.clone(),
        };
        times.push(t);
        states.push(mech);
        Ok(())
    })?;
    Ok((times, states, diag))
}

fn pair_metrics(
    reference: (TierKind, &[DensityMatrix], &[[f64; 2]]),
    other: (TierKind, &[DensityMatrix], &[[f64; 2]]),
) -> Result<PairMetrics> {
    let peak = reference.2.iter().flatten().cloned().fold(0.0, f64::max);
    let abs_dev = reference
        .2
        .iter()
        .zip(other.2)
        .flat_map(|(a, b)| [(a[0] - b[0]).abs(), (a[1] - b[1]).abs()])
        .fold(0.0, f64::max);
    let fidelities: Vec<f64> = reference
        .1
        .iter()
        .zip(other.1)
        .map(|(a, b)| fidelity(a, b))
        .collect::<Result<_>>()?;
    Ok(PairMetrics {
        reference: reference.0,
        other: other.0,
        max_relative_occupation_deviation: if peak > 0.0 { abs_dev / peak } else { abs_dev },
        max_absolute_occupation_deviation: abs_dev,
        min_fidelity: fidelities.iter().cloned().fold(1.0, f64::min),
        fidelities,
    })
}

/// Evolve the full, reduced and (when resonant) effective tiers from the same
/// mechanical state in parallel and compare them at matched times.
pub fn compare_tiers(
    p: &SystemParams,
    rho0_mech: &DensityMatrix,
    t_end: f64,
    opts: &CompareOptions,
) -> Result<TierReport> {
    if rho0_mech.space().modes() != 2 {
        return Err(Error::Shape("compare_tiers needs a two-mode mechanical state".into()));
    }
    if opts.cavity_cutoff < 2 {
        return Err(Error::InvalidArgument("the full tier needs a cavity cutoff of at least 2".into()));
    }
    let effective = effective_tier_for(p);
    let run = |k| mechanical_run(k, p, rho0_mech, t_end, opts);
    let (full, (reduced, eff)) = rayon::join(
        || run(TierKind::FullDisplaced),
        || rayon::join(|| run(TierKind::ReducedTimeDependent), || effective.map(run)),
    );
    let mut runs = vec![(TierKind::FullDisplaced, full?), (TierKind::ReducedTimeDependent, reduced?)];
    if let (Some(k), Some(r)) = (effective, eff) {
        runs.push((k, r?));
    }
    let times = runs[0].1 .0.clone();

    let mut tiers = Vec::new();
    for (kind, (_, states, diag)) in &runs {
        let occ = states
            .iter()
            .map(|s| {
                let o = occupations(s);
                [o[0], o[1]]
            })
            .collect();
        let cov = states.iter().map(covariance).collect::<Result<_>>()?;
        tiers.push(TierSeries {
            tier: *kind,
            occupations: occ,
            covariances: cov,
            diagnostics: diag.clone(),
        });
    }
    let mut pairs = Vec::new();
    for w in 0..runs.len() - 1 {
        let (a, b) = (&runs[w], &runs[w + 1]);
        pairs.push(pair_metrics(
            (a.0, &a.1 .1, &tiers[w].occupations),
            (b.0, &b.1 .1, &tiers[w + 1].occupations),
        )?);
    }
    Ok(TierReport {
        times,
        tiers,
        pairs,
    })
}
