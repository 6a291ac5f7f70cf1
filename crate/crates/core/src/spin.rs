//! Spin-chain dynamics: Hamiltonian construction, piecewise-constant
//! propagation, fidelity, and exact derivatives of the infidelity.
//!
//! The chain is an Ising model in a controllable transverse field,
//!
//! ```text
//! H(u) = -J Σ_j σ_j^z σ_{j+1}^z - g Σ_j σ_j^z σ_{j+2}^z + u Σ_j σ_j^x
//! ```
//!
//! with J ≡ 1 internally (energies in units of J, durations in 1/J). Each
//! time step applies `exp(-i H(u_k) Δt)` built from the Hermitian
//! eigendecomposition of `H(u_k)`, which is exactly unitary and lets the
//! same eigenbasis drive the spectral (divided-difference) formulas for the
//! exact gradient and Hessian of the infidelity `C = 1 - F`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{AtlasError, Result};

pub type CMat = DMatrix<Complex64>;
pub type CVec = DVector<Complex64>;

/// Chain boundary condition. Periodic wraps both the nearest- and
/// next-nearest-neighbor coupling sums.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    Open,
    Periodic,
}

/// Physical problem definition: chain size, couplings, boundary condition,
/// and the state-transfer endpoints.
#[derive(Debug, Clone)]
pub struct SpinChainSpec {
    l: usize,
    j: f64,
    g: f64,
    boundary: Boundary,
    psi0: CVec,
    psit: CVec,
}

const NORM_TOL: f64 = 1e-12;

impl SpinChainSpec {
    /// Spec with the default state pair |0...0> -> |1...1> and J = 1.
    /// `g` is the next-nearest coupling in units of J.
    pub fn new(l: usize, g: f64, boundary: Boundary) -> Result<Self> {
        if l < 1 {
            return Err(AtlasError::InvalidSpec("spin count L must be >= 1".into()));
        }
        let dim = 1usize << l;
        let mut psi0 = CVec::zeros(dim);
        let mut psit = CVec::zeros(dim);
        psi0[0] = Complex64::new(1.0, 0.0);
        psit[dim - 1] = Complex64::new(1.0, 0.0);
        Ok(Self { l, j: 1.0, g, boundary, psi0, psit })
    }

    /// Spec with explicit initial and target states (each of dimension 2^L,
    /// normalized within 1e-12).
    pub fn with_states(l: usize, g: f64, boundary: Boundary, psi0: CVec, psit: CVec) -> Result<Self> {
        let mut spec = Self::new(l, g, boundary)?;
        let dim = spec.dim();
        for (name, v) in [("psi0", &psi0), ("psit", &psit)] {
            if v.len() != dim {
                return Err(AtlasError::InvalidSpec(format!(
                    "{name} has dimension {}, expected 2^L = {dim}",
                    v.len()
                )));
            }
            if (v.norm() - 1.0).abs() > NORM_TOL {
                return Err(AtlasError::InvalidSpec(format!("{name} is not normalized")));
            }
        }
        spec.psi0 = psi0;
        spec.psit = psit;
        Ok(spec)
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn g(&self) -> f64 {
        self.g
    }

    pub fn j(&self) -> f64 {
        self.j
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    pub fn dim(&self) -> usize {
        1 << self.l
    }

    pub fn psi0(&self) -> &CVec {
        &self.psi0
    }

    pub fn psit(&self) -> &CVec {
        &self.psit
    }

    /// Diagonal of the drift part `-J Σ σ^z σ^z - g Σ σ^z σ^z` in the
    /// computational basis (bit j of the index = spin j, |0> has σ^z = +1).
    fn drift_diagonal(&self) -> Vec<f64> {
        let l = self.l;
        let dim = self.dim();
        let sign = |b: usize, j: usize| -> f64 {
            if (b >> j) & 1 == 0 {
                1.0
            } else {
                -1.0
            }
        };
        let (nn_bonds, nnn_bonds): (Vec<(usize, usize)>, Vec<(usize, usize)>) = match self.boundary {
            Boundary::Open => (
                (0..l.saturating_sub(1)).map(|j| (j, j + 1)).collect(),
                (0..l.saturating_sub(2)).map(|j| (j, j + 2)).collect(),
            ),
            Boundary::Periodic => (
                (0..l).map(|j| (j, (j + 1) % l)).collect(),
                (0..l).map(|j| (j, (j + 2) % l)).collect(),
            ),
        };
        (0..dim)
            .map(|b| {
                let zz: f64 = nn_bonds.iter().map(|&(a, c)| sign(b, a) * sign(b, c)).sum();
                let zz2: f64 = nnn_bonds.iter().map(|&(a, c)| sign(b, a) * sign(b, c)).sum();
                -self.j * zz - self.g * zz2
            })
            .collect()
    }

    /// The control operator Σ_j σ_j^x as a dense matrix.
    fn control_operator(&self) -> CMat {
        let dim = self.dim();
        let mut hx = CMat::zeros(dim, dim);
        for b in 0..dim {
            for j in 0..self.l {
                hx[(b ^ (1 << j), b)] += Complex64::new(1.0, 0.0);
            }
        }
        hx
    }
}

/// Piecewise-constant control pulse: N amplitudes over total duration T,
/// each bounded by |u_k| <= u_max.
#[derive(Debug, Clone, PartialEq)]
pub struct Pulse {
    u: Vec<f64>,
    t: f64,
    u_max: f64,
}

impl Pulse {
    pub fn new(u: Vec<f64>, t: f64, u_max: f64) -> Result<Self> {
        if u.is_empty() {
            return Err(AtlasError::InvalidPulse("pulse has no time steps".into()));
        }
        if !(t > 0.0) || !t.is_finite() {
            return Err(AtlasError::InvalidPulse(format!("duration T = {t} must be positive")));
        }
        if !(u_max > 0.0) || !u_max.is_finite() {
            return Err(AtlasError::InvalidPulse(format!("u_max = {u_max} must be positive")));
        }
        for (k, &uk) in u.iter().enumerate() {
            if !uk.is_finite() {
                return Err(AtlasError::InvalidPulse(format!("amplitude u[{k}] is not finite")));
            }
            if uk.abs() > u_max {
                return Err(AtlasError::InvalidPulse(format!(
                    "amplitude u[{k}] = {uk} exceeds bound {u_max}"
                )));
            }
        }
        Ok(Self { u, t, u_max })
    }

    pub fn amplitudes(&self) -> &[f64] {
        &self.u
    }

    pub fn duration(&self) -> f64 {
        self.t
    }

    pub fn u_max(&self) -> f64 {
        self.u_max
    }

    pub fn n_steps(&self) -> usize {
        self.u.len()
    }

    pub fn dt(&self) -> f64 {
        self.t / self.u.len() as f64
    }

    /// Same duration and bound, different amplitudes.
    pub fn with_amplitudes(&self, u: Vec<f64>) -> Result<Self> {
        Pulse::new(u, self.t, self.u_max)
    }
}

/// Result of propagating a pulse: the N+1 states, with the step unitaries
/// optionally kept for reuse.
#[derive(Debug, Clone)]
pub struct Propagation {
    pub states: Vec<CVec>,
    pub step_unitaries: Option<Vec<CMat>>,
}

impl Propagation {
    pub fn final_state(&self) -> &CVec {
        self.states.last().expect("propagation has at least the initial state")
    }
}

struct StepEigen {
    vals: DVector<f64>,
    vecs: CMat,
}

impl StepEigen {
    fn unitary(&self, dt: f64) -> CMat {
        let phases = self.vals.map(|lam| (Complex64::new(0.0, -lam * dt)).exp());
        let mut m = self.vecs.clone();
        for (c, mut col) in (0..m.ncols()).zip(m.column_iter_mut()) {
            col *= phases[c];
        }
        &m * self.vecs.adjoint()
    }
}

/// Builds H(u) as a dense Hermitian matrix.
pub fn build_hamiltonian(spec: &SpinChainSpec, u: f64) -> Result<CMat> {
    if !u.is_finite() {
        return Err(AtlasError::InvalidPulse("control amplitude is not finite".into()));
    }
    let mut h = spec.control_operator() * Complex64::new(u, 0.0);
    for (b, d) in spec.drift_diagonal().into_iter().enumerate() {
        h[(b, b)] += Complex64::new(d, 0.0);
    }
    Ok(h)
}

/// Hermitian eigendecomposition H = V diag(vals) V^dag. Runs sequentially
/// for bitwise reproducibility regardless of worker count, and keeps small
/// residuals even for the exactly degenerate spectra these ring Hamiltonians
/// produce.
fn hermitian_eigen(h: &CMat) -> Result<(DVector<f64>, CMat)> {
    static SEQ: std::sync::Once = std::sync::Once::new();
    SEQ.call_once(|| faer::set_global_parallelism(faer::Par::Seq));
    let dim = h.nrows();
    let mut m = faer::Mat::<Complex64>::zeros(dim, dim);
    for j in 0..dim {
        for i in 0..dim {
            m[(i, j)] = h[(i, j)];
        }
    }
    let eig = m
        .self_adjoint_eigen(faer::Side::Lower)
        .map_err(|e| AtlasError::InvalidSpec(format!("eigendecomposition failed: {e:?}")))?;
    let vals = DVector::from_iterator(dim, (0..dim).map(|i| eig.S()[i].re));
    let mut vecs = CMat::zeros(dim, dim);
    for j in 0..dim {
        for i in 0..dim {
            vecs[(i, j)] = eig.U()[(i, j)];
        }
    }
    Ok((vals, vecs))
}

fn eigensteps(spec: &SpinChainSpec, pulse: &Pulse) -> Result<Vec<StepEigen>> {
    let hx = spec.control_operator();
    let drift = spec.drift_diagonal();
    pulse
        .amplitudes()
        .iter()
        .map(|&u| {
            if !u.is_finite() {
                return Err(AtlasError::InvalidPulse("control amplitude is not finite".into()));
            }
            let mut h = &hx * Complex64::new(u, 0.0);
            for (b, &d) in drift.iter().enumerate() {
                h[(b, b)] += Complex64::new(d, 0.0);
            }
            let (vals, vecs) = hermitian_eigen(&h)?;
            Ok(StepEigen { vals, vecs })
        })
        .collect()
}

/// Propagates psi0 through the pulse, caching the step unitaries.
pub fn propagate(spec: &SpinChainSpec, pulse: &Pulse) -> Result<Propagation> {
    let dt = pulse.dt();
    let steps = eigensteps(spec, pulse)?;
    let mut states = Vec::with_capacity(pulse.n_steps() + 1);
    let mut unitaries = Vec::with_capacity(pulse.n_steps());
    states.push(spec.psi0.clone());
    for step in &steps {
        let u = step.unitary(dt);
        let next = &u * states.last().unwrap();
        states.push(next);
        unitaries.push(u);
    }
    Ok(Propagation { states, step_unitaries: Some(unitaries) })
}

/// Fidelity F = |<psit|psi(T)>|^2, invariant under global phase.
pub fn fidelity(spec: &SpinChainSpec, pulse: &Pulse) -> Result<f64> {
    let prop = propagate(spec, pulse)?;
    Ok(overlap(spec, prop.final_state()).norm_sqr())
}

/// Infidelity C = 1 - F.
pub fn infidelity(spec: &SpinChainSpec, pulse: &Pulse) -> Result<f64> {
    Ok(1.0 - fidelity(spec, pulse)?)
}

fn overlap(spec: &SpinChainSpec, state: &CVec) -> Complex64 {
    spec.psit.dotc(state)
}

/// First divided difference of f(x) = exp(s x), computed in the exact
/// product form `s * exp(s*(a+b)/2) * sinhc(s*(a-b)/2)`, stable for any gap.
fn dd1(a: f64, b: f64, s: Complex64) -> Complex64 {
    s * (s * (0.5 * (a + b))).exp() * csinhc(s * (0.5 * (a - b)))
}

fn csinhc(w: Complex64) -> Complex64 {
    if w.norm() < 1e-3 {
        let w2 = w * w;
        Complex64::new(1.0, 0.0) + w2 / 6.0 + w2 * w2 / 120.0 + w2 * w2 * w2 / 5040.0
    } else {
        w.sinh() / w
    }
}

/// Second divided difference of f(x) = exp(s x). For well-separated nodes it
/// uses the recursive definition with the widest gap in the denominator; for
/// clustered nodes it switches to a Taylor series around the node mean
/// (complete homogeneous symmetric polynomials), avoiding cancellation.
fn dd2(a: f64, b: f64, c: f64, s: Complex64) -> Complex64 {
    let mut x = [a, b, c];
    x.sort_by(|p, q| p.partial_cmp(q).unwrap());
    let spread = (x[2] - x[0]) * s.norm();
    if spread > 0.5 {
        (dd1(x[0], x[1], s) - dd1(x[1], x[2], s)) / (x[0] - x[2])
    } else {
        let m = (x[0] + x[1] + x[2]) / 3.0;
        let y = [x[0] - m, x[1] - m, x[2] - m];
        let y_abs = [y[0].abs(), y[1].abs(), y[2].abs()];
        // f[x0,x1,x2] = e^{sm} * sum_{n>=2} s^n h_{n-2}(y) / n!
        let mut sum = Complex64::new(0.0, 0.0);
        let mut s_pow = s * s; // s^n starting at n = 2
        let mut fact = 2.0; // n!
        for n in 2..40usize {
            let h = homogeneous_sym3(&y, n - 2);
            sum += s_pow * (h / fact);
            // h_n(y) can vanish exactly (mean-centering forces h_1 = 0), so
            // the stopping test bounds the term by its absolute-value nodes.
            let bound = s_pow.norm() * homogeneous_sym3(&y_abs, n - 2) / fact;
            if bound < 1e-18 * sum.norm().max(1e-30) {
                break;
            }
            s_pow *= s;
            fact *= (n + 1) as f64;
        }
        (s * m).exp() * sum
    }
}

/// Complete homogeneous symmetric polynomial h_n(y0, y1, y2).
fn homogeneous_sym3(y: &[f64; 3], n: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..=n {
        // h_{n-i}(y0, y1) * y2^i
        let mut h2 = 0.0;
        for a in 0..=(n - i) {
            h2 += y[0].powi(a as i32) * y[1].powi((n - i - a) as i32);
        }
        total += h2 * y[2].powi(i as i32);
    }
    total
}

struct DerivativeWorkspace {
    dt: f64,
    overlap: Complex64,
    /// Forward states phi[k] (state after k steps), k = 0..=N.
    fwd: Vec<CVec>,
    /// Backward states bwd[k] = (U_{N-1}...U_{k+1})^dag psit, k = 0..N.
    bwd: Vec<CVec>,
    steps: Vec<StepEigen>,
    unitaries: Vec<CMat>,
    /// Control operator rotated into each step eigenbasis, B_k = V^dag Hx V.
    rotated_control: Vec<CMat>,
}

fn derivative_workspace(spec: &SpinChainSpec, pulse: &Pulse) -> Result<DerivativeWorkspace> {
    let n = pulse.n_steps();
    let dt = pulse.dt();
    let steps = eigensteps(spec, pulse)?;
    let unitaries: Vec<CMat> = steps.iter().map(|s| s.unitary(dt)).collect();

    let mut fwd = Vec::with_capacity(n + 1);
    fwd.push(spec.psi0.clone());
    for u in &unitaries {
        let next = u * fwd.last().unwrap();
        fwd.push(next);
    }

    let mut bwd = vec![CVec::zeros(spec.dim()); n];
    bwd[n - 1] = spec.psit.clone();
    for k in (0..n - 1).rev() {
        bwd[k] = unitaries[k + 1].ad_mul(&bwd[k + 1]);
    }

    let hx = spec.control_operator();
    let rotated_control: Vec<CMat> =
        steps.iter().map(|s| s.vecs.ad_mul(&(&hx * &s.vecs))).collect();

    let overlap = overlap(spec, fwd.last().unwrap());
    Ok(DerivativeWorkspace { dt, overlap, fwd, bwd, steps, unitaries, rotated_control })
}

impl DerivativeWorkspace {
    /// dU_k = V (B ∘ Γ) V^dag with Γ_ab the first divided difference of
    /// exp(-i λ Δt) at the step eigenvalues.
    fn step_derivative(&self, k: usize) -> CMat {
        let s = Complex64::new(0.0, -self.dt);
        let eig = &self.steps[k];
        let d = eig.vals.len();
        let mut m = self.rotated_control[k].clone();
        for a in 0..d {
            for b in 0..d {
                m[(a, b)] *= dd1(eig.vals[a], eig.vals[b], s);
            }
        }
        &eig.vecs * m * eig.vecs.adjoint()
    }

    /// <bwd_k| d2U_k |fwd_k> with the second Fréchet derivative expressed via
    /// second divided differences in the step eigenbasis.
    fn second_derivative_overlap(&self, k: usize) -> Complex64 {
        let s = Complex64::new(0.0, -self.dt);
        let eig = &self.steps[k];
        let d = eig.vals.len();
        let b_mat = &self.rotated_control[k];
        let left = eig.vecs.ad_mul(&self.bwd[k]); // V^dag bwd
        let right = eig.vecs.ad_mul(&self.fwd[k]); // V^dag fwd
        let mut acc = Complex64::new(0.0, 0.0);
        for a in 0..d {
            for b in 0..d {
                let mut inner = Complex64::new(0.0, 0.0);
                for c in 0..d {
                    inner += b_mat[(a, c)] * b_mat[(c, b)] * dd2(eig.vals[a], eig.vals[c], eig.vals[b], s);
                }
                acc += left[a].conj() * (2.0 * inner) * right[b];
            }
        }
        acc
    }
}

/// Exact gradient of the infidelity with respect to each control amplitude.
pub fn infidelity_gradient(spec: &SpinChainSpec, pulse: &Pulse) -> Result<Vec<f64>> {
    Ok(infidelity_value_and_gradient(spec, pulse)?.1)
}

/// Infidelity and its exact gradient in one propagation pass.
pub fn infidelity_value_and_gradient(spec: &SpinChainSpec, pulse: &Pulse) -> Result<(f64, Vec<f64>)> {
    let ws = derivative_workspace(spec, pulse)?;
    let o = ws.overlap;
    let grad = (0..pulse.n_steps())
        .map(|k| {
            let du = ws.step_derivative(k);
            let g = ws.bwd[k].dotc(&(&du * &ws.fwd[k]));
            -2.0 * (o.conj() * g).re
        })
        .collect();
    Ok((1.0 - o.norm_sqr(), grad))
}

/// Exact N x N Hessian of the infidelity (symmetric by construction).
pub fn infidelity_hessian(spec: &SpinChainSpec, pulse: &Pulse) -> Result<DMatrix<f64>> {
    let n = pulse.n_steps();
    let ws = derivative_workspace(spec, pulse)?;
    let o = ws.overlap;

    let step_derivs: Vec<CMat> = (0..n).map(|k| ws.step_derivative(k)).collect();
    let first: Vec<Complex64> =
        (0..n).map(|k| ws.bwd[k].dotc(&(&step_derivs[k] * &ws.fwd[k]))).collect();
    let kicked: Vec<CVec> = (0..n).map(|k| &step_derivs[k] * &ws.fwd[k]).collect();
    let pulled: Vec<CVec> = (0..n).map(|k| step_derivs[k].ad_mul(&ws.bwd[k])).collect();

    let mut hess = DMatrix::zeros(n, n);
    for j in 0..n {
        // Cross terms: push dU_j fwd_j through the later steps.
        let mut m = kicked[j].clone();
        for k in j + 1..n {
            let o_jk = pulled[k].dotc(&m);
            hess[(j, k)] = -2.0 * (first[j].conj() * first[k] + o.conj() * o_jk).re;
            if k + 1 < n {
                m = &ws.unitaries[k] * m;
            }
        }
        let o_jj = ws.second_derivative_overlap(j);
        hess[(j, j)] = -2.0 * (first[j].conj() * first[j] + o.conj() * o_jj).re;
    }
    // Mirror the strict upper triangle.
    for j in 0..n {
        for k in 0..j {
            hess[(j, k)] = hess[(k, j)];
        }
    }
    Ok(hess)
}

/// Diagonal of the infidelity Hessian, cheaper than the full matrix; used by
/// the ruggedness measure.
pub fn infidelity_hessian_diag(spec: &SpinChainSpec, pulse: &Pulse) -> Result<Vec<f64>> {
    let n = pulse.n_steps();
    let ws = derivative_workspace(spec, pulse)?;
    let o = ws.overlap;
    Ok((0..n)
        .map(|k| {
            let du = ws.step_derivative(k);
            let g = ws.bwd[k].dotc(&(&du * &ws.fwd[k]));
            let o_kk = ws.second_derivative_overlap(k);
            -2.0 * (g.conj() * g + o.conj() * o_kk).re
        })
        .collect())
}
