//! Truncated Fock spaces, ladder operators and density matrices.
//!
//! Basis states are indexed row-major with the first mode most significant,
//! so for cutoffs `(2, 5, 5)` the state `|n_c, n_1, n_2>` sits at
//! `25 n_c + 5 n_1 + n_2`. Mode order is fixed as (cavity, mech1, mech2)
//! when a cavity is present and (mech1, mech2) otherwise.

use std::io::{BufRead, Write};

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type CMatrix = DMatrix<Complex64>;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

/// Tolerances a state must meet to count as a valid density matrix.
pub const HERMITICITY_TOL: f64 = 1e-10;
pub const TRACE_TOL: f64 = 1e-8;
pub const POSITIVITY_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FockSpace {
    cutoffs: Vec<usize>,
    #[serde(skip)]
    strides: Vec<usize>,
}

impl FockSpace {
    pub fn new(cutoffs: &[usize]) -> Result<FockSpace> {
        if cutoffs.is_empty() {
            return Err(Error::InvalidArgument("a Fock space needs at least one mode".into()));
        }
        if let Some(c) = cutoffs.iter().find(|&&c| c < 2) {
            return Err(Error::InvalidArgument(format!("cutoff {c} is below the minimum of 2")));
        }
        let mut strides = vec![1; cutoffs.len()];
        for k in (0..cutoffs.len() - 1).rev() {
            strides[k] = strides[k + 1] * cutoffs[k + 1];
        }
        Ok(FockSpace {
            cutoffs: cutoffs.to_vec(),
            strides,
        })
    }

    pub fn cutoffs(&self) -> &[usize] {
        &self.cutoffs
    }

    pub fn modes(&self) -> usize {
        self.cutoffs.len()
    }

    pub fn dim(&self) -> usize {
        self.cutoffs.iter().product()
    }

    pub fn stride(&self, mode: usize) -> usize {
        self.strides[mode]
    }

    /// Occupation of `mode` in basis state `index`.
    #[inline]
    pub fn digit(&self, index: usize, mode: usize) -> usize {
        (index / self.strides[mode]) % self.cutoffs[mode]
    }

    pub fn index(&self, occupations: &[usize]) -> Result<usize> {
        if occupations.len() != self.modes() {
            return Err(Error::Shape(format!(
                "{} occupations for a {}-mode space",
                occupations.len(),
                self.modes()
            )));
        }
        let mut idx = 0;
        for (k, (&n, &c)) in occupations.iter().zip(&self.cutoffs).enumerate() {
            if n >= c {
                return Err(Error::InvalidArgument(format!(
                    "occupation {n} of mode {k} exceeds cutoff {c}"
                )));
            }
            idx += n * self.strides[k];
        }
        Ok(idx)
    }

    fn check_mode(&self, mode: usize) -> Result<()> {
        if mode >= self.modes() {
            Err(Error::BadMode {
                index: mode,
                modes: self.modes(),
            })
        } else {
            Ok(())
        }
    }
}

/// Sparse square matrix stored as triplets; enough for ladder-operator algebra.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMat {
    dim: usize,
    entries: Vec<(usize, usize, Complex64)>,
}

impl SparseMat {
    pub fn zeros(dim: usize) -> SparseMat {
        SparseMat {
            dim,
            entries: Vec::new(),
        }
    }

    pub fn identity(dim: usize) -> SparseMat {
        SparseMat {
            dim,
            entries: (0..dim).map(|i| (i, i, ONE)).collect(),
        }
    }

    pub fn from_triplets(dim: usize, entries: Vec<(usize, usize, Complex64)>) -> SparseMat {
        let mut s = SparseMat { dim, entries };
        s.compress();
        s
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[(usize, usize, Complex64)] {
        &self.entries
    }

    /// Sort, merge duplicates and drop exact zeros.
    fn compress(&mut self) {
        self.entries.sort_by_key(|&(r, c, _)| (r, c));
        let mut out: Vec<(usize, usize, Complex64)> = Vec::with_capacity(self.entries.len());
        for &(r, c, v) in &self.entries {
            match out.last_mut() {
                Some(last) if last.0 == r && last.1 == c => last.2 += v,
                _ => out.push((r, c, v)),
            }
        }
        out.retain(|e| e.2 != ZERO);
        self.entries = out;
    }

    pub fn adjoint(&self) -> SparseMat {
        SparseMat::from_triplets(
            self.dim,
            self.entries.iter().map(|&(r, c, v)| (c, r, v.conj())).collect(),
        )
    }

    pub fn scale(&self, s: Complex64) -> SparseMat {
        SparseMat::from_triplets(
            self.dim,
            self.entries.iter().map(|&(r, c, v)| (r, c, s * v)).collect(),
        )
    }

    pub fn add(&self, other: &SparseMat) -> SparseMat {
        let mut e = self.entries.clone();
        e.extend_from_slice(&other.entries);
        SparseMat::from_triplets(self.dim, e)
    }

    pub fn matmul(&self, other: &SparseMat) -> SparseMat {
        // rows of `other` grouped for lookup
        let mut rows: Vec<Vec<(usize, Complex64)>> = vec![Vec::new(); other.dim];
        for &(r, c, v) in &other.entries {
            rows[r].push((c, v));
        }
        let mut e = Vec::new();
        for &(r, k, v) in &self.entries {
            for &(c, w) in &rows[k] {
                e.push((r, c, v * w));
            }
        }
        SparseMat::from_triplets(self.dim, e)
    }

    pub fn to_dense(&self) -> CMatrix {
        let mut m = CMatrix::zeros(self.dim, self.dim);
        for &(r, c, v) in &self.entries {
            m[(r, c)] += v;
        }
        m
    }

    /// `out += s * A x`.
    pub fn mul_left_acc(&self, x: &CMatrix, s: Complex64, out: &mut CMatrix) {
        let n = self.dim;
        let xs = x.as_slice();
        let os = out.as_mut_slice();
        let scaled: Vec<(usize, usize, Complex64)> =
            self.entries.iter().map(|&(r, c, v)| (r, c, s * v)).collect();
        // column by column so both operands are walked contiguously
        for (src, dst) in xs.chunks_exact(n).zip(os.chunks_exact_mut(n)) {
            for &(r, c, sv) in &scaled {
                dst[r] += sv * src[c];
            }
        }
    }

    /// `out += s * x A`.
    pub fn mul_right_acc(&self, x: &CMatrix, s: Complex64, out: &mut CMatrix) {
        let n = self.dim;
        let xs = x.as_slice();
        let os = out.as_mut_slice();
        for &(r, c, v) in &self.entries {
            let sv = s * v;
            let (src, dst) = (&xs[r * n..(r + 1) * n], &mut os[c * n..(c + 1) * n]);
            for (o, &xv) in dst.iter_mut().zip(src) {
                *o += sv * xv;
            }
        }
    }

    pub fn mul_left(&self, x: &CMatrix) -> CMatrix {
        let mut out = CMatrix::zeros(self.dim, x.ncols());
        self.mul_left_acc(x, ONE, &mut out);
        out
    }

    pub fn mul_right(&self, x: &CMatrix) -> CMatrix {
        let mut out = CMatrix::zeros(x.nrows(), self.dim);
        self.mul_right_acc(x, ONE, &mut out);
        out
    }
}

/// Operator on a Fock space, kept in sparse form.
#[derive(Debug, Clone, PartialEq)]
pub struct Operator {
    space: FockSpace,
    mat: SparseMat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LadderKind {
    Lower,
    Raise,
}

/// Truncated annihilation or creation operator on one mode, embedded with identities.
pub fn ladder(space: &FockSpace, mode: usize, kind: LadderKind) -> Result<Operator> {
    space.check_mode(mode)?;
    let stride = space.stride(mode);
    let mut e = Vec::new();
    for idx in 0..space.dim() {
        let n = space.digit(idx, mode);
        if n >= 1 {
            // <n-1| b |n> = sqrt(n)
            e.push((idx - stride, idx, Complex64::new((n as f64).sqrt(), 0.0)));
        }
    }
    let lower = SparseMat::from_triplets(space.dim(), e);
    let mat = match kind {
        LadderKind::Lower => lower,
        LadderKind::Raise => lower.adjoint(),
    };
    Ok(Operator {
        space: space.clone(),
        mat,
    })
}

impl Operator {
    pub fn new(space: &FockSpace, mat: SparseMat) -> Result<Operator> {
        if mat.dim() != space.dim() {
            return Err(Error::Shape(format!(
                "operator of size {} on a space of dimension {}",
                mat.dim(),
                space.dim()
            )));
        }
        Ok(Operator {
            space: space.clone(),
            mat,
        })
    }

    pub fn identity(space: &FockSpace) -> Operator {
        Operator {
            space: space.clone(),
            mat: SparseMat::identity(space.dim()),
        }
    }

    pub fn zeros(space: &FockSpace) -> Operator {
        Operator {
            space: space.clone(),
            mat: SparseMat::zeros(space.dim()),
        }
    }

    pub fn lower(space: &FockSpace, mode: usize) -> Result<Operator> {
        ladder(space, mode, LadderKind::Lower)
    }

    pub fn raise(space: &FockSpace, mode: usize) -> Result<Operator> {
        ladder(space, mode, LadderKind::Raise)
    }

    pub fn number(space: &FockSpace, mode: usize) -> Result<Operator> {
        let b = Operator::lower(space, mode)?;
        Ok(b.dagger().mul(&b))
    }

    pub fn space(&self) -> &FockSpace {
        &self.space
    }

    pub fn sparse(&self) -> &SparseMat {
        &self.mat
    }

    pub fn to_dense(&self) -> CMatrix {
        self.mat.to_dense()
    }

    pub fn dagger(&self) -> Operator {
        Operator {
            space: self.space.clone(),
            mat: self.mat.adjoint(),
        }
    }

    pub fn mul(&self, other: &Operator) -> Operator {
        Operator {
            space: self.space.clone(),
            mat: self.mat.matmul(&other.mat),
        }
    }

    pub fn add(&self, other: &Operator) -> Operator {
        Operator {
            space: self.space.clone(),
            mat: self.mat.add(&other.mat),
        }
    }

    pub fn scale(&self, s: Complex64) -> Operator {
        Operator {
            space: self.space.clone(),
            mat: self.mat.scale(s),
        }
    }

    pub fn scale_re(&self, s: f64) -> Operator {
        self.scale(Complex64::new(s, 0.0))
    }

    /// `Tr(self * rho)`.
    pub fn expect(&self, rho: &CMatrix) -> Complex64 {
        self.mat
            .entries()
            .iter()
            .map(|&(r, c, v)| v * rho[(c, r)])
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateDiagnostics {
    pub trace_defect: f64,
    pub hermiticity_defect: f64,
    pub min_eigenvalue: f64,
}

impl StateDiagnostics {
    pub fn is_valid(&self) -> bool {
        self.trace_defect <= TRACE_TOL
            && self.hermiticity_defect <= HERMITICITY_TOL
            && self.min_eigenvalue >= -POSITIVITY_TOL
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    space: FockSpace,
    mat: CMatrix,
}

/// Largest entry of `m - m^dag`.
pub fn hermiticity_defect(m: &CMatrix) -> f64 {
    let n = m.nrows();
    let mut worst: f64 = 0.0;
    for j in 0..n {
        for i in 0..=j {
            worst = worst.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    worst
}

/// Replace `m` by its Hermitian part.
pub fn hermitize(m: &mut CMatrix) {
    let n = m.nrows();
    for j in 0..n {
        for i in 0..j {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)].conj());
            m[(i, j)] = avg;
            m[(j, i)] = avg.conj();
        }
        m[(j, j)].im = 0.0;
    }
}

pub fn trace(m: &CMatrix) -> Complex64 {
    m.diagonal().iter().sum()
}

/// Smallest eigenvalue of the Hermitian part of `m`.
pub fn min_eigenvalue(m: &CMatrix) -> f64 {
    let mut h = m.clone();
    hermitize(&mut h);
    h.symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

impl DensityMatrix {
    /// Wrap a matrix after checking shape and the state invariants.
    pub fn new(space: &FockSpace, mat: CMatrix) -> Result<DensityMatrix> {
        let rho = DensityMatrix::from_matrix_unchecked(space, mat)?;
        let d = rho.diagnostics();
        if !d.is_valid() {
            return Err(Error::InvalidArgument(format!(
                "not a density matrix: trace defect {:.2e}, hermiticity defect {:.2e}, min eigenvalue {:.2e}",
                d.trace_defect, d.hermiticity_defect, d.min_eigenvalue
            )));
        }
        Ok(rho)
    }

    /// Wrap a matrix checking only its shape; used for integrator output.
    pub fn from_matrix_unchecked(space: &FockSpace, mat: CMatrix) -> Result<DensityMatrix> {
        if mat.nrows() != space.dim() || mat.ncols() != space.dim() {
            return Err(Error::Shape(format!(
                "{}x{} matrix on a space of dimension {}",
                mat.nrows(),
                mat.ncols(),
                space.dim()
            )));
        }
        Ok(DensityMatrix {
            space: space.clone(),
            mat,
        })
    }

    pub fn from_ket(space: &FockSpace, ket: &[Complex64]) -> Result<DensityMatrix> {
        if ket.len() != space.dim() {
            return Err(Error::Shape(format!(
                "ket of length {} on a space of dimension {}",
                ket.len(),
                space.dim()
            )));
        }
        let norm: f64 = ket.iter().map(|c| c.norm_sqr()).sum();
        if norm == 0.0 {
            return Err(Error::InvalidArgument("zero ket".into()));
        }
        let mat = CMatrix::from_fn(space.dim(), space.dim(), |i, j| {
            ket[i] * ket[j].conj() / norm
        });
        Ok(DensityMatrix {
            space: space.clone(),
            mat,
        })
    }

    pub fn fock(space: &FockSpace, occupations: &[usize]) -> Result<DensityMatrix> {
        let idx = space.index(occupations)?;
        let mut mat = CMatrix::zeros(space.dim(), space.dim());
        mat[(idx, idx)] = ONE;
        Ok(DensityMatrix {
            space: space.clone(),
            mat,
        })
    }

    pub fn vacuum(space: &FockSpace) -> DensityMatrix {
        let zeros = vec![0; space.modes()];
        DensityMatrix::fock(space, &zeros).expect("vacuum always fits")
    }

    /// Product of truncated thermal states, renormalized after truncation.
    pub fn thermal(space: &FockSpace, n_bar: &[f64]) -> Result<DensityMatrix> {
        if n_bar.len() != space.modes() {
            return Err(Error::Shape(format!(
                "{} occupations for a {}-mode space",
                n_bar.len(),
                space.modes()
            )));
        }
        if n_bar.iter().any(|&n| !(n >= 0.0)) {
            return Err(Error::InvalidArgument("thermal occupations must be non-negative".into()));
        }
        let factors: Vec<CMatrix> = n_bar
            .iter()
            .zip(space.cutoffs())
            .map(|(&n, &c)| {
                let q = n / (1.0 + n);
                let w: Vec<f64> = (0..c).map(|k| q.powi(k as i32)).collect();
                let z: f64 = w.iter().sum();
                CMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
                    c,
                    w.iter().map(|x| Complex64::new(x / z, 0.0)),
                ))
            })
            .collect();
        DensityMatrix::from_matrix_unchecked(space, kron_all(&factors))
    }

    /// Tensor product of single-mode states, in mode order.
    pub fn product(states: &[DensityMatrix]) -> Result<DensityMatrix> {
        let cutoffs: Vec<usize> = states
            .iter()
            .flat_map(|s| s.space.cutoffs().to_vec())
            .collect();
        let space = FockSpace::new(&cutoffs)?;
        let mats: Vec<CMatrix> = states.iter().map(|s| s.mat.clone()).collect();
        DensityMatrix::from_matrix_unchecked(&space, kron_all(&mats))
    }

    pub fn space(&self) -> &FockSpace {
        &self.space
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.mat
    }

    pub fn into_matrix(self) -> CMatrix {
        self.mat
    }

    pub fn trace(&self) -> Complex64 {
        trace(&self.mat)
    }

    pub fn diagnostics(&self) -> StateDiagnostics {
        StateDiagnostics {
            trace_defect: (self.trace() - ONE).norm(),
            hermiticity_defect: hermiticity_defect(&self.mat),
            min_eigenvalue: min_eigenvalue(&self.mat),
        }
    }

    /// Marginal population of the highest Fock level of each mode.
    pub fn top_level_populations(&self) -> Vec<f64> {
        let sp = &self.space;
        (0..sp.modes())
            .map(|k| {
                let top = sp.cutoffs()[k] - 1;
                (0..sp.dim())
                    .filter(|&i| sp.digit(i, k) == top)
                    .map(|i| self.mat[(i, i)].re)
                    .sum()
            })
            .collect()
    }

    pub fn expect(&self, op: &Operator) -> Result<Complex64> {
        if op.space() != &self.space {
            return Err(Error::Shape("operator and state live on different spaces".into()));
        }
        Ok(op.expect(&self.mat))
    }
}

fn kron_all(mats: &[CMatrix]) -> CMatrix {
    let mut acc = CMatrix::from_element(1, 1, ONE);
    for m in mats {
        acc = acc.kronecker(m);
    }
    acc
}

fn check_same(op: &Operator, rho: &DensityMatrix) -> Result<()> {
    if op.space() != rho.space() {
        return Err(Error::Shape(format!(
            "operator on {:?} applied to a state on {:?}",
            op.space().cutoffs(),
            rho.space().cutoffs()
        )));
    }
    Ok(())
}

/// `c rho c^dag - (c^dag c rho + rho c^dag c) / 2`.
pub fn lindblad_apply(c: &Operator, rho: &DensityMatrix) -> Result<CMatrix> {
    check_same(c, rho)?;
    let term = LindbladTerm::new(c, 1.0);
    let mut out = CMatrix::zeros(rho.mat.nrows(), rho.mat.ncols());
    term.accumulate(&rho.mat, &mut out);
    Ok(out)
}

/// Precomputed pieces of `rate * L(c)`.
#[derive(Debug, Clone)]
pub struct LindbladTerm {
    rate: f64,
    c: SparseMat,
    cd: SparseMat,
    cdc: SparseMat,
}

impl LindbladTerm {
    pub fn new(c: &Operator, rate: f64) -> LindbladTerm {
        let cd = c.sparse().adjoint();
        let cdc = cd.matmul(c.sparse());
        LindbladTerm {
            rate,
            c: c.sparse().clone(),
            cd,
            cdc,
        }
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn accumulate(&self, rho: &CMatrix, out: &mut CMatrix) {
        if self.rate == 0.0 {
            return;
        }
        let r = Complex64::new(self.rate, 0.0);
        let crho = self.c.mul_left(rho);
        self.cd.mul_right_acc(&crho, r, out);
        let h = Complex64::new(-0.5 * self.rate, 0.0);
        self.cdc.mul_left_acc(rho, h, out);
        self.cdc.mul_right_acc(rho, h, out);
    }
}

/// Fixed-pattern linear combination `sum_i c_i A_i` of sparse operators,
/// re-weighted cheaply on every call.
#[derive(Debug, Clone)]
pub struct LinearCombo {
    dim: usize,
    positions: Vec<(usize, usize)>,
    parts: Vec<Vec<(usize, Complex64)>>,
    terms: usize,
}

impl LinearCombo {
    pub fn new(ops: &[SparseMat]) -> LinearCombo {
        let dim = ops.first().map_or(0, |o| o.dim());
        let mut all: Vec<(usize, usize, usize, Complex64)> = Vec::new();
        for (i, op) in ops.iter().enumerate() {
            all.extend(op.entries().iter().map(|&(r, c, v)| (r, c, i, v)));
        }
        all.sort_by_key(|&(r, c, i, _)| (r, c, i));
        let mut positions = Vec::new();
        let mut parts: Vec<Vec<(usize, Complex64)>> = Vec::new();
        for (r, c, i, v) in all {
            if positions.last() != Some(&(r, c)) {
                positions.push((r, c));
                parts.push(Vec::new());
            }
            parts.last_mut().unwrap().push((i, v));
        }
        LinearCombo {
            dim,
            positions,
            parts,
            terms: ops.len(),
        }
    }

    pub fn terms(&self) -> usize {
        self.terms
    }

    pub fn combine(&self, coeffs: &[Complex64]) -> SparseMat {
        let entries = self
            .positions
            .iter()
            .zip(&self.parts)
            .map(|(&(r, c), part)| (r, c, part.iter().map(|&(i, v)| coeffs[i] * v).sum()))
            .collect();
        SparseMat {
            dim: self.dim,
            entries,
        }
    }
}

/// Operator products needed to apply the bilinear generator quickly.
#[derive(Debug, Clone)]
pub struct BilinearPlan {
    b: Vec<SparseMat>,
    pairs: LinearCombo,
}

impl BilinearPlan {
    /// `bvec` must be ordered `(b1, b2, b1^dag, b2^dag)`.
    pub fn new(bvec: &[Operator; 4]) -> Result<BilinearPlan> {
        let space = bvec[0].space();
        if bvec.iter().any(|b| b.space() != space) {
            return Err(Error::Shape("ladder operators on different spaces".into()));
        }
        let b: Vec<SparseMat> = bvec.iter().map(|o| o.sparse().clone()).collect();
        let mut pairs = Vec::with_capacity(16);
        for m in 0..4 {
            for n in 0..4 {
                pairs.push(b[m].matmul(&b[n]));
            }
        }
        Ok(BilinearPlan {
            b,
            pairs: LinearCombo::new(&pairs),
        })
    }

    pub fn dim(&self) -> usize {
        self.b[0].dim()
    }

    /// `out += sum_mn M1 b_m b_n rho + M2 rho b_m b_n + M3 b_m rho b_n`.
    pub fn accumulate(
        &self,
        m1: &nalgebra::Matrix4<Complex64>,
        m2: &nalgebra::Matrix4<Complex64>,
        m3: &nalgebra::Matrix4<Complex64>,
        rho: &CMatrix,
        out: &mut CMatrix,
    ) {
        let flat = |m: &nalgebra::Matrix4<Complex64>| {
            let mut c = [ZERO; 16];
            for i in 0..4 {
                for j in 0..4 {
                    c[4 * i + j] = m[(i, j)];
                }
            }
            c
        };
        self.pairs.combine(&flat(m1)).mul_left_acc(rho, ONE, out);
        self.pairs.combine(&flat(m2)).mul_right_acc(rho, ONE, out);
        for m in 0..4 {
            if (0..4).all(|n| m3[(m, n)] == ZERO) {
                continue;
            }
            let brho = self.b[m].mul_left(rho);
            for n in 0..4 {
                let c = m3[(m, n)];
                if c != ZERO {
                    self.b[n].mul_right_acc(&brho, c, out);
                }
            }
        }
    }
}

/// Apply the bilinear generator of the reduced equation to `rho`.
pub fn bilinear_dissipator(
    m: &crate::coeffs::CouplingMatrices,
    bvec: &[Operator; 4],
    rho: &DensityMatrix,
) -> Result<CMatrix> {
    check_same(&bvec[0], rho)?;
    let plan = BilinearPlan::new(bvec)?;
    let mut out = CMatrix::zeros(rho.mat.nrows(), rho.mat.ncols());
    plan.accumulate(&m.m1, &m.m2, &m.m3, &rho.mat, &mut out);
    Ok(out)
}

/// The vector `(b_i, b_j, b_i^dag, b_j^dag)` for two modes of `space`.
pub fn mechanical_bvec(space: &FockSpace, i: usize, j: usize) -> Result<[Operator; 4]> {
    let bi = Operator::lower(space, i)?;
    let bj = Operator::lower(space, j)?;
    let (bid, bjd) = (bi.dagger(), bj.dagger());
    Ok([bi, bj, bid, bjd])
}

/// Reduced state on the modes in `keep` (any order; output follows ascending mode order).
pub fn partial_trace(rho: &DensityMatrix, keep: &[usize]) -> Result<DensityMatrix> {
    let sp = rho.space();
    if keep.is_empty() {
        return Err(Error::InvalidArgument("partial trace must keep at least one mode".into()));
    }
    let mut kept: Vec<usize> = keep.to_vec();
    kept.sort_unstable();
    kept.dedup();
    if kept.len() != keep.len() {
        return Err(Error::InvalidArgument("repeated mode in partial trace".into()));
    }
    for &k in &kept {
        sp.check_mode(k)?;
    }
    let sub_cut: Vec<usize> = kept.iter().map(|&k| sp.cutoffs()[k]).collect();
    let sub = FockSpace::new(&sub_cut)?;
    let traced: Vec<usize> = (0..sp.modes()).filter(|k| !kept.contains(k)).collect();
    let key = |i: usize| -> (usize, usize) {
        let kept_idx = kept
            .iter()
            .enumerate()
            .map(|(pos, &k)| sp.digit(i, k) * sub.stride(pos))
            .sum();
        let mut t = 0;
        for &k in &traced {
            t = t * sp.cutoffs()[k] + sp.digit(i, k);
        }
        (kept_idx, t)
    };
    let keys: Vec<(usize, usize)> = (0..sp.dim()).map(key).collect();
    let mut out = CMatrix::zeros(sub.dim(), sub.dim());
    for j in 0..sp.dim() {
        for i in 0..sp.dim() {
            if keys[i].1 == keys[j].1 {
                out[(keys[i].0, keys[j].0)] += rho.mat[(i, j)];
            }
        }
    }
    DensityMatrix::from_matrix_unchecked(&sub, out)
}

/// Two-mode rotation `exp[theta (b_i^dag b_j - b_i b_j^dag)]`, dense.
pub fn rotation_unitary(space: &FockSpace, i: usize, j: usize, theta: f64) -> Result<CMatrix> {
    if i == j {
        return Err(Error::InvalidArgument("rotation needs two distinct modes".into()));
    }
    let bi = Operator::lower(space, i)?;
    let bj = Operator::lower(space, j)?;
    let gen = bi
        .dagger()
        .mul(&bj)
        .add(&bi.mul(&bj.dagger()).scale_re(-1.0))
        .scale_re(theta);
    Ok(gen.to_dense().exp())
}

/// Conjugate `rho` by the two-mode rotation on modes `(i, j)`.
pub fn mode_rotate(rho: &DensityMatrix, modes: (usize, usize), theta: f64) -> Result<DensityMatrix> {
    let u = rotation_unitary(rho.space(), modes.0, modes.1, theta)?;
    let out = &u * &rho.mat * u.adjoint();
    DensityMatrix::from_matrix_unchecked(rho.space(), out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotHeader {
    pub cutoffs: Vec<usize>,
    pub time: f64,
    pub frame: String,
}

/// Write a snapshot: one JSON header line, then one line per row with
/// `re im` pairs for every column.
pub fn write_snapshot<W: Write>(
    mut w: W,
    rho: &DensityMatrix,
    time: f64,
    frame: &str,
) -> Result<()> {
    let header = SnapshotHeader {
        cutoffs: rho.space().cutoffs().to_vec(),
        time,
        frame: frame.to_string(),
    };
    writeln!(w, "{}", serde_json::to_string(&header)?)?;
    let n = rho.mat.nrows();
    for i in 0..n {
        let row: Vec<String> = (0..n)
            .map(|j| {
                let v = rho.mat[(i, j)];
                format!("{:.16e} {:.16e}", v.re, v.im)
            })
            .collect();
        writeln!(w, "{}", row.join(" "))?;
    }
    Ok(())
}

pub fn read_snapshot<R: BufRead>(r: R) -> Result<(SnapshotHeader, DensityMatrix)> {
    let mut lines = r.lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::InvalidArgument("empty snapshot".into()))??;
    let header: SnapshotHeader = serde_json::from_str(&first)?;
    let space = FockSpace::new(&header.cutoffs)?;
    let n = space.dim();
    let mut mat = CMatrix::zeros(n, n);
    for i in 0..n {
        let line = lines
            .next()
            .ok_or_else(|| Error::InvalidArgument(format!("snapshot truncated at row {i}")))??;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::InvalidArgument(format!("row {i}: {e}")))?;
        if vals.len() != 2 * n {
            return Err(Error::Shape(format!("row {i} has {} numbers, expected {}", vals.len(), 2 * n)));
        }
        for j in 0..n {
            mat[(i, j)] = Complex64::new(vals[2 * j], vals[2 * j + 1]);
        }
    }
    let rho = DensityMatrix::from_matrix_unchecked(&space, mat)?;
    Ok((header, rho))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    pub(crate) fn random_state(space: &FockSpace, seed: u64) -> DensityMatrix {
        // deterministic pseudo-random A A^dag / Tr
        let n = space.dim();
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        let a = CMatrix::from_fn(n, n, |_, _| c(next(), next()));
        let m = &a * a.adjoint();
        let t = trace(&m);
        DensityMatrix::from_matrix_unchecked(space, m / t).unwrap()
    }

    #[test]
    fn cutoff_two_lowering() {
        let sp = FockSpace::new(&[2]).unwrap();
        let b = ladder(&sp, 0, LadderKind::Lower).unwrap().to_dense();
        assert_eq!(b[(0, 1)], ONE);
        assert_eq!(b[(1, 0)], ZERO);
        assert_eq!(b[(0, 0)], ZERO);
        assert_eq!(b[(1, 1)], ZERO);
    }

    #[test]
    fn rejects_bad_modes_and_cutoffs() {
        assert!(FockSpace::new(&[1, 3]).is_err());
        let sp = FockSpace::new(&[3, 3]).unwrap();
        assert!(matches!(ladder(&sp, 2, LadderKind::Lower), Err(Error::BadMode { .. })));
    }

    #[test]
    fn commutator_is_identity_below_top_level() {
        let sp = FockSpace::new(&[5]).unwrap();
        let b = Operator::lower(&sp, 0).unwrap().to_dense();
        let comm = &b * b.adjoint() - b.adjoint() * &b;
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { ONE } else { ZERO };
                assert!((comm[(i, j)] - expect).norm() < 1e-14);
            }
        }
        assert_relative_eq!(comm[(4, 4)].re, -4.0, epsilon = 1e-14);
    }

    #[test]
    fn number_operator_spectrum() {
        let sp = FockSpace::new(&[6]).unwrap();
        let n = Operator::number(&sp, 0).unwrap().to_dense();
        let mut ev: Vec<f64> = n.symmetric_eigenvalues().iter().cloned().collect();
        ev.sort_by(f64::total_cmp);
        for (k, e) in ev.iter().enumerate() {
            assert_relative_eq!(*e, k as f64, epsilon = 1e-12);
        }
    }

    #[test]
    fn ladders_on_different_modes_commute() {
        let sp = FockSpace::new(&[2, 3, 4]).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i == j {
                    continue;
                }
                let a = Operator::lower(&sp, i).unwrap().to_dense();
                let b = Operator::raise(&sp, j).unwrap().to_dense();
                assert!((&a * &b - &b * &a).norm() == 0.0);
            }
        }
    }

    #[test]
    fn lindblad_examples() {
        let sp = FockSpace::new(&[3]).unwrap();
        let a = Operator::lower(&sp, 0).unwrap();
        let vac = DensityMatrix::vacuum(&sp);
        assert_eq!(lindblad_apply(&a, &vac).unwrap().norm(), 0.0);
        let one = DensityMatrix::fock(&sp, &[1]).unwrap();
        let out = lindblad_apply(&a, &one).unwrap();
        let mut expect = CMatrix::zeros(3, 3);
        expect[(0, 0)] = ONE;
        expect[(1, 1)] = -ONE;
        assert!((out - expect).norm() < 1e-15);
    }

    #[test]
    fn lindblad_shape_mismatch() {
        let a = Operator::lower(&FockSpace::new(&[3]).unwrap(), 0).unwrap();
        let rho = DensityMatrix::vacuum(&FockSpace::new(&[4]).unwrap());
        assert!(lindblad_apply(&a, &rho).is_err());
    }

    #[test]
    fn bilinear_single_jump_entry() {
        // M3 entry selecting b1^dag rho b1 on the vacuum gives |1,0><1,0|
        let sp = FockSpace::new(&[3, 3]).unwrap();
        let bvec = mechanical_bvec(&sp, 0, 1).unwrap();
        let mut m = crate::coeffs::CouplingMatrices {
            m1: nalgebra::Matrix4::zeros(),
            m2: nalgebra::Matrix4::zeros(),
            m3: nalgebra::Matrix4::zeros(),
            t: 0.0,
            frame: crate::coeffs::Frame::Lab,
        };
        let vac = DensityMatrix::vacuum(&sp);
        assert_eq!(bilinear_dissipator(&m, &bvec, &vac).unwrap().norm(), 0.0);
        m.m3[(2, 0)] = c(0.7, 0.0);
        let out = bilinear_dissipator(&m, &bvec, &vac).unwrap();
        let b1d = bvec[2].to_dense();
        let b1 = bvec[0].to_dense();
        let expect = b1d * vac.matrix() * b1 * c(0.7, 0.0);
        assert!((out.clone() - expect).norm() < 1e-15);
        assert_relative_eq!(out[(3, 3)].re, 0.7, epsilon = 1e-15);
    }

    #[test]
    fn partial_trace_examples() {
        let a = FockSpace::new(&[3]).unwrap();
        let b = FockSpace::new(&[2]).unwrap();
        let ra = random_state(&a, 1);
        let rb = random_state(&b, 2);
        let prod = DensityMatrix::product(&[ra.clone(), rb.clone()]).unwrap();
        let back = partial_trace(&prod, &[0]).unwrap();
        assert!((back.matrix() - ra.matrix()).norm() < 1e-14);
        let back = partial_trace(&prod, &[1]).unwrap();
        assert!((back.matrix() - rb.matrix()).norm() < 1e-14);

        let sp = FockSpace::new(&[3, 4]).unwrap();
        let mixed = DensityMatrix::from_matrix_unchecked(&sp, CMatrix::identity(12, 12) / c(12.0, 0.0)).unwrap();
        let r = partial_trace(&mixed, &[0]).unwrap();
        assert!((r.matrix() - CMatrix::identity(3, 3) / c(3.0, 0.0)).norm() < 1e-15);
        assert!(partial_trace(&mixed, &[]).is_err());
        assert!(partial_trace(&mixed, &[2]).is_err());
    }

    #[test]
    fn rotation_swaps_single_excitation() {
        let sp = FockSpace::new(&[3, 3]).unwrap();
        let one = DensityMatrix::fock(&sp, &[1, 0]).unwrap();
        let same = mode_rotate(&one, (0, 1), 0.0).unwrap();
        assert!((same.matrix() - one.matrix()).norm() < 1e-14);
        let swapped = mode_rotate(&one, (0, 1), std::f64::consts::FRAC_PI_2).unwrap();
        let target = sp.index(&[0, 1]).unwrap();
        assert_relative_eq!(swapped.matrix()[(target, target)].re, 1.0, epsilon = 1e-12);
        assert!(mode_rotate(&one, (1, 1), 0.3).is_err());
    }

    #[test]
    fn snapshot_round_trip() {
        let sp = FockSpace::new(&[2, 3]).unwrap();
        let rho = random_state(&sp, 7);
        let mut buf = Vec::new();
        write_snapshot(&mut buf, &rho, 1.25, "mechanical-rotating").unwrap();
        let (h, back) = read_snapshot(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(h.cutoffs, vec![2, 3]);
        assert_eq!(h.time, 1.25);
        assert_eq!(back.matrix(), rho.matrix());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn weights() -> impl Strategy<Value = [f64; 4]> {
            prop::array::uniform4(0.0..2.0f64)
        }

        proptest! {
            #[test]
            fn dissipator_is_traceless(seed in 0u64..10_000, mode in 0usize..2) {
                let sp = FockSpace::new(&[3, 4]).unwrap();
                let rho = random_state(&sp, seed);
                let a = Operator::lower(&sp, mode).unwrap();
                let out = lindblad_apply(&a, &rho).unwrap();
                prop_assert!(trace(&out).norm() < 1e-14);
                prop_assert!(hermiticity_defect(&out) < 1e-14);
            }

            #[test]
            fn bilinear_reduces_to_lindblad_sum(w in weights(), seed in 0u64..10_000) {
                let sp = FockSpace::new(&[3, 3]).unwrap();
                let bvec = mechanical_bvec(&sp, 0, 1).unwrap();
                let rho = random_state(&sp, seed);
                let mut m = crate::coeffs::CouplingMatrices {
                    m1: nalgebra::Matrix4::zeros(),
                    m2: nalgebra::Matrix4::zeros(),
                    m3: nalgebra::Matrix4::zeros(),
                    t: 0.0,
                    frame: crate::coeffs::Frame::Lab,
                };
                // jump operator c_k = bvec[k]; L(c) = c rho c^dag - ...
                // with c^dag = bvec[(k+2)%4]
                let mut expect = CMatrix::zeros(9, 9);
                for k in 0..4 {
                    let dag = (k + 2) % 4;
                    m.m3[(k, dag)] = c(w[k], 0.0);
                    m.m1[(dag, k)] = c(-0.5 * w[k], 0.0);
                    m.m2[(dag, k)] = c(-0.5 * w[k], 0.0);
                    expect += lindblad_apply(&bvec[k], &rho).unwrap() * c(w[k], 0.0);
                }
                let out = bilinear_dissipator(&m, &bvec, &rho).unwrap();
                prop_assert!((out - expect).norm() < 1e-13);
            }

            #[test]
            fn rotation_is_unitary(theta in -3.2..3.2f64, seed in 0u64..10_000) {
                let sp = FockSpace::new(&[4, 4]).unwrap();
                let rho = random_state(&sp, seed);
                let out = mode_rotate(&rho, (0, 1), theta).unwrap();
                prop_assert!((out.trace() - rho.trace()).norm() < 1e-12);
                let mut a: Vec<f64> = rho.matrix().clone().symmetric_eigenvalues().iter().cloned().collect();
                let mut b: Vec<f64> = out.matrix().clone().symmetric_eigenvalues().iter().cloned().collect();
                a.sort_by(f64::total_cmp);
                b.sort_by(f64::total_cmp);
                for (x, y) in a.iter().zip(&b) {
                    prop_assert!((x - y).abs() < 1e-10);
                }
            }

            #[test]
            fn partial_trace_preserves_trace(seed in 0u64..10_000, keep in 0usize..3) {
                let sp = FockSpace::new(&[2, 3, 3]).unwrap();
                let rho = random_state(&sp, seed);
                let r = partial_trace(&rho, &[keep]).unwrap();
                prop_assert!((r.trace() - rho.trace()).norm() < 1e-13);
            }

            #[test]
            fn operations_keep_hermiticity(seed in 0u64..10_000, theta in -1.0..1.0f64) {
                let sp = FockSpace::new(&[3, 3]).unwrap();
                let rho = random_state(&sp, seed);
                let before = hermiticity_defect(rho.matrix());
                let r = mode_rotate(&rho, (0, 1), theta).unwrap();
                prop_assert!(hermiticity_defect(r.matrix()) <= before + 1e-14);
                let p = partial_trace(&rho, &[1]).unwrap();
                prop_assert!(hermiticity_defect(p.matrix()) <= before + 1e-14);
            }
        }
    }
}
