//! Exact many-body propagation in the fixed-N Fock basis.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::BhParams;
use crate::error::{Error, Result};
use crate::observables::Trajectory;
use crate::timegrid::TimeGrid;

/// Default cap on the Fock-space dimension.
pub const DEFAULT_DIMENSION_CAP: usize = 2_000_000;
/// Below this dimension states are propagated by full diagonalization.
pub const DENSE_LIMIT: usize = 4000;
/// Per-step tolerance of the Krylov propagator.
pub const KRYLOV_TOL: f64 = 1e-10;

fn binomial(n: u64, k: u64) -> Option<u64> {
    let k = k.min(n - k.min(n));
    let mut r: u64 = 1;
    for i in 0..k {
        r = r.checked_mul(n - i)? / (i + 1);
    }
    Some(r)
}

/// Occupation-number basis with `Σ n_i = N`, ordered lexicographically descending.
#[derive(Debug, Clone)]
pub struct FockBasis {
    n: usize,
    sites: usize,
    occ: Vec<u32>,
    /// `comp[m][r]` = number of ways to put `r` atoms on `m` sites.
    comp: Vec<Vec<u64>>,
}

pub fn build_basis(n: usize, sites: usize, cap: usize) -> Result<FockBasis> {
    if n < 1 || sites < 1 {
        return Err(Error::validation("basis needs N ≥ 1 and I ≥ 1"));
    }
    FockBasis::with_cap(n, sites, cap)
}

impl FockBasis {
    fn with_cap(n: usize, sites: usize, cap: usize) -> Result<Self> {
        let dim = binomial((n + sites - 1) as u64, (sites - 1) as u64)
            .filter(|d| *d <= cap as u64)
            .ok_or_else(|| Error::resource(format!("Fock space of N={n}, I={sites} exceeds the cap {cap}")))?
            as usize;
        let mut comp = vec![vec![0u64; n + 1]; sites + 1];
        for r in 0..=n {
            comp[1][r] = 1;
        }
        for m in 2..=sites {
            for r in 0..=n {
                comp[m][r] = (0..=r).map(|v| comp[m - 1][r - v]).sum();
            }
        }
        let mut occ = Vec::with_capacity(dim * sites);
        let mut cur = vec![0u32; sites];
        fn fill(pos: usize, left: u32, cur: &mut Vec<u32>, out: &mut Vec<u32>) {
            let s = cur.len();
            if pos == s - 1 {
                cur[pos] = left;
                out.extend_from_slice(cur);
                return;
            }
            for v in (0..=left).rev() {
                cur[pos] = v;
                fill(pos + 1, left - v, cur, out);
            }
        }
        fill(0, n as u32, &mut cur, &mut occ);
        debug_assert_eq!(occ.len(), dim * sites);
        Ok(FockBasis { n, sites, occ, comp })
    }

    pub fn atoms(&self) -> usize {
        self.n
    }
    pub fn sites(&self) -> usize {
        self.sites
    }
    pub fn dim(&self) -> usize {
        self.occ.len() / self.sites
    }
    pub fn state(&self, idx: usize) -> &[u32] {
        &self.occ[idx * self.sites..(idx + 1) * self.sites]
    }

    /// Index of an occupation vector, `None` if it is not in the basis.
    pub fn index(&self, occ: &[u32]) -> Option<usize> {
        if occ.len() != self.sites || occ.iter().map(|&x| x as usize).sum::<usize>() != self.n {
            return None;
        }
        let mut idx = 0u64;
        let mut left = self.n;
        for (pos, &v) in occ.iter().enumerate().take(self.sites - 1) {
            let rest = self.sites - pos - 1;
            // states with a larger entry here come first
            for w in (v as usize + 1)..=left {
                idx += self.comp[rest][left - w];
            }
            left -= v as usize;
        }
        Some(idx as usize)
    }
}

/// Real symmetric Hamiltonian in compressed-row form.
#[derive(Debug, Clone)]
pub struct HamiltonianMatrix {
    dim: usize,
    row_ptr: Vec<usize>,
    col: Vec<usize>,
    val: Vec<f64>,
    pub params: BhParams,
}

pub fn build_hamiltonian(basis: &FockBasis, params: &BhParams) -> Result<HamiltonianMatrix> {
    params.validate()?;
    if params.sites != basis.sites() {
        return Err(Error::validation("basis and parameters disagree on the site count"));
    }
    let links = params.links();
    let dim = basis.dim();
    let s = basis.sites();
    let mut row_ptr = Vec::with_capacity(dim + 1);
    let mut col = Vec::new();
    let mut val = Vec::new();
    row_ptr.push(0);
    let mut row: Vec<(usize, f64)> = Vec::new();
    let mut tmp = vec![0u32; s];
    for r in 0..dim {
        row.clear();
        let st = basis.state(r);
        let mut diag = 0.0;
        for i in 0..s {
            let ni = st[i] as f64;
            diag += params.eps(i) * ni + 0.5 * params.u * ni * (ni - 1.0);
        }
        row.push((r, diag));
        for &(a, b) in &links {
            for (i, j) in [(a, b), (b, a)] {
                // a_i† a_j
                if st[j] == 0 {
                    continue;
                }
                tmp.copy_from_slice(st);
                tmp[j] -= 1;
                tmp[i] += 1;
                let c = basis.index(&tmp).expect("hop stays in the basis");
                let amp = -params.j * ((st[i] as f64 + 1.0) * st[j] as f64).sqrt();
                row.push((c, amp));
            }
        }
        row.sort_by_key(|e| e.0);
        let mut last: Option<usize> = None;
        for &(c, v) in &row {
            if last == Some(c) {
                *val.last_mut().unwrap() += v;
            } else {
                col.push(c);
                val.push(v);
                last = Some(c);
            }
        }
        row_ptr.push(col.len());
    }
    Ok(HamiltonianMatrix { dim, row_ptr, col, val, params: params.clone() })
}

impl HamiltonianMatrix {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Nonzero entries `(row, col, value)`.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.dim)
            .flat_map(move |r| (self.row_ptr[r]..self.row_ptr[r + 1]).map(move |p| (r, self.col[p], self.val[p])))
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        (self.row_ptr[r]..self.row_ptr[r + 1]).find(|&p| self.col[p] == c).map(|p| self.val[p]).unwrap_or(0.0)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for (r, c, v) in self.entries() {
            m[(r, c)] = v;
        }
        m
    }

    pub fn apply(&self, x: &[Complex64], y: &mut [Complex64]) {
        for r in 0..self.dim {
            let mut s = Complex64::new(0.0, 0.0);
            for p in self.row_ptr[r]..self.row_ptr[r + 1] {
                s += x[self.col[p]] * self.val[p];
            }
            y[r] = s;
        }
    }
}

/// Initial many-body state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InitialKind {
    /// All atoms on the first site.
    AllInOneWell,
    FockVector {
        occupations: Vec<u32>,
    },
    /// Coherent state projected onto fixed N, amplitudes `z_i` given as `[re, im]`.
    CoherentProjection {
        amplitudes: Vec<[f64; 2]>,
    },
}

pub fn initial_state(basis: &FockBasis, kind: &InitialKind) -> Result<Vec<Complex64>> {
    let dim = basis.dim();
    let mut psi = vec![Complex64::new(0.0, 0.0); dim];
    match kind {
        InitialKind::AllInOneWell => {
            psi[0] = Complex64::new(1.0, 0.0);
        }
        InitialKind::FockVector { occupations } => {
            let idx = basis
                .index(occupations)
                .ok_or_else(|| Error::validation(format!("occupations {occupations:?} are not in the basis")))?;
            psi[idx] = Complex64::new(1.0, 0.0);
        }
        InitialKind::CoherentProjection { amplitudes } => {
            if amplitudes.len() != basis.sites() {
                return Err(Error::validation("one coherent amplitude per site is required"));
            }
            let z: Vec<Complex64> = amplitudes.iter().map(|a| Complex64::new(a[0], a[1])).collect();
            // log-factorials keep large N finite
            let lf: Vec<f64> = (0..=basis.atoms())
                .scan(0.0, |acc, m| {
                    if m > 0 {
                        *acc += (m as f64).ln();
                    }
                    Some(*acc)
                })
                .collect();
            for (idx, c) in psi.iter_mut().enumerate() {
                let mut amp = Complex64::new(1.0, 0.0);
                let mut ok = true;
                for (i, &ni) in basis.state(idx).iter().enumerate() {
                    if ni > 0 {
                        if z[i].norm() == 0.0 {
                            ok = false;
                            break;
                        }
                        amp *= (z[i].ln() * ni as f64 - 0.5 * lf[ni as usize]).exp();
                    }
                }
                *c = if ok { amp } else { Complex64::new(0.0, 0.0) };
            }
            let norm: f64 = psi.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(Error::validation("coherent amplitudes give a non-normalizable state"));
            }
            psi.iter_mut().for_each(|c| *c /= norm);
        }
    }
    Ok(psi)
}

/// Which expectation value to take.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Observable {
    Populations,
    Spdm,
    Energy,
}

pub fn populations(basis: &FockBasis, psi: &[Complex64]) -> Vec<f64> {
    let s = basis.sites();
    let mut n = vec![0.0; s];
    for (idx, c) in psi.iter().enumerate() {
        let p = c.norm_sqr();
        for (i, &ni) in basis.state(idx).iter().enumerate() {
            n[i] += p * ni as f64;
        }
    }
    n
}

/// Single-particle density matrix `⟨a_i† a_j⟩`, row-major `I×I`.
pub fn spdm(basis: &FockBasis, psi: &[Complex64]) -> Vec<Complex64> {
    let s = basis.sites();
    let mut rho = vec![Complex64::new(0.0, 0.0); s * s];
    let mut tmp = vec![0u32; s];
    for (idx, c) in psi.iter().enumerate() {
        let st = basis.state(idx);
        for i in 0..s {
            rho[i * s + i] += c.norm_sqr() * st[i] as f64;
            for j in 0..s {
                if i == j || st[j] == 0 {
                    continue;
                }
                // a_i† a_j |st⟩ = √((n_i+1) n_j) |st'⟩
                tmp.copy_from_slice(st);
                tmp[j] -= 1;
                tmp[i] += 1;
                let t = basis.index(&tmp).expect("hop stays in the basis");
                let amp = ((st[i] as f64 + 1.0) * st[j] as f64).sqrt();
                rho[i * s + j] += psi[t].conj() * c * amp;
            }
        }
    }
    rho
}

pub fn energy(h: &HamiltonianMatrix, psi: &[Complex64]) -> f64 {
    let mut hp = vec![Complex64::new(0.0, 0.0); psi.len()];
    h.apply(psi, &mut hp);
    psi.iter().zip(&hp).map(|(a, b)| (a.conj() * b).re).sum()
}

/// Expectation values as a flat list: populations (I), SPDM (I², row-major,
/// real then imaginary parts interleaved), or energy (1).
pub fn measure(psi: &[Complex64], basis: &FockBasis, h: &HamiltonianMatrix, observable: Observable) -> Vec<f64> {
    match observable {
        Observable::Populations => populations(basis, psi),
        Observable::Spdm => spdm(basis, psi).iter().flat_map(|c| [c.re, c.im]).collect(),
        Observable::Energy => vec![energy(h, psi)],
    }
}

fn norm(v: &[Complex64]) -> f64 {
    v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
}

/// Lanczos approximation of `exp(−iτH)v`. Returns the achieved error estimate.
fn krylov_exp(h: &HamiltonianMatrix, v: &[Complex64], tau: f64, m_max: usize, out: &mut [Complex64]) -> f64 {
    let dim = v.len();
    let beta0 = norm(v);
    let mut q: Vec<Vec<Complex64>> = vec![v.iter().map(|c| c / beta0).collect()];
    let mut alpha = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    let mut w = vec![Complex64::new(0.0, 0.0); dim];
    let mut breakdown = false;
    for j in 0..m_max.min(dim) {
        h.apply(&q[j], &mut w);
        let a: f64 = q[j].iter().zip(&w).map(|(x, y)| (x.conj() * y).re).sum();
        alpha.push(a);
        // full reorthogonalization, twice
        for _ in 0..2 {
            for qi in &q {
                let p: Complex64 = qi.iter().zip(&w).map(|(x, y)| x.conj() * y).sum();
                for (wv, qv) in w.iter_mut().zip(qi) {
                    *wv -= p * qv;
                }
            }
        }
        let b = norm(&w);
        if b < 1e-13 * beta0.max(1.0) || j + 1 == dim {
            breakdown = true;
            break;
        }
        beta.push(b);
        if j + 1 == m_max {
            break;
        }
        q.push(w.iter().map(|c| c / b).collect());
    }
    let m = alpha.len();
    let mut t = DMatrix::zeros(m, m);
    for i in 0..m {
        t[(i, i)] = alpha[i];
        if i + 1 < m {
            t[(i, i + 1)] = beta[i];
            t[(i + 1, i)] = beta[i];
        }
    }
    let eig = SymmetricEigen::new(t);
    let mut y = vec![Complex64::new(0.0, 0.0); m];
    for r in 0..m {
        for c in 0..m {
            let phase = Complex64::from_polar(1.0, -tau * eig.eigenvalues[c]);
            y[r] += eig.eigenvectors[(r, c)] * phase * eig.eigenvectors[(0, c)];
        }
    }
    let err = if breakdown { 0.0 } else { beta0 * beta[m - 1] * y[m - 1].norm() };
    out.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
    for (j, qj) in q.iter().enumerate().take(m) {
        let cj = y[j] * beta0;
        for (o, x) in out.iter_mut().zip(qj) {
            *o += cj * x;
        }
    }
    err
}

/// Krylov propagation over `tau`, halving substeps until each meets `tol`.
pub fn krylov_propagate(h: &HamiltonianMatrix, psi: &mut Vec<Complex64>, tau: f64, tol: f64) -> Result<()> {
    let mut done = 0.0;
    let mut sub = tau;
    let mut out = vec![Complex64::new(0.0, 0.0); psi.len()];
    let mut halvings = 0;
    while done < tau * (1.0 - 1e-14) {
        let step = sub.min(tau - done);
        let err = krylov_exp(h, psi, step, 40, &mut out);
        if err > tol {
            halvings += 1;
            if halvings > 30 {
                return Err(Error::Convergence { what: "Krylov propagation".into(), residual: err });
            }
            sub = step / 2.0;
            continue;
        }
        std::mem::swap(psi, &mut out);
        done += step;
    }
    Ok(())
}

/// Propagator chosen by dimension.
enum Propagator {
    Dense { vecs: DMatrix<f64>, vals: Vec<f64> },
    Krylov,
}

/// Evolve `ψ0` over the grid, calling `visit(k, ψ(t_k))` at every grid point.
pub fn evolve_exact_with(
    h: &HamiltonianMatrix,
    psi0: &[Complex64],
    grid: &TimeGrid,
    mut visit: impl FnMut(usize, &[Complex64]),
) -> Result<()> {
    if psi0.len() != h.dim() {
        return Err(Error::validation("state and Hamiltonian dimensions differ"));
    }
    let hbar = h.params.hbar;
    let prop = if h.dim() < DENSE_LIMIT {
        let e = SymmetricEigen::new(h.to_dense());
        Propagator::Dense { vecs: e.eigenvectors, vals: e.eigenvalues.iter().copied().collect() }
    } else {
        Propagator::Krylov
    };
    match prop {
        Propagator::Dense { vecs, vals } => {
            let dim = h.dim();
            let mut c0 = vec![Complex64::new(0.0, 0.0); dim];
            for m in 0..dim {
                for r in 0..dim {
                    c0[m] += vecs[(r, m)] * psi0[r];
                }
            }
            let mut psi = vec![Complex64::new(0.0, 0.0); dim];
            let mut cm = vec![Complex64::new(0.0, 0.0); dim];
            for k in 0..grid.n_steps {
                let t = grid.t(k) - grid.t0;
                for m in 0..dim {
                    cm[m] = c0[m] * Complex64::from_polar(1.0, -vals[m] * t / hbar);
                }
                for r in 0..dim {
                    let mut s = Complex64::new(0.0, 0.0);
                    for m in 0..dim {
                        s += vecs[(r, m)] * cm[m];
                    }
                    psi[r] = s;
                }
                visit(k, &psi);
            }
        }
        Propagator::Krylov => {
            let mut psi = psi0.to_vec();
            visit(0, &psi);
            for k in 1..grid.n_steps {
                krylov_propagate(h, &mut psi, grid.dt / hbar, KRYLOV_TOL)?;
                visit(k, &psi);
            }
        }
    }
    Ok(())
}

/// Full state trajectory.
pub fn evolve_exact(h: &HamiltonianMatrix, psi0: &[Complex64], grid: &TimeGrid) -> Result<Vec<Vec<Complex64>>> {
    let mut out = Vec::with_capacity(grid.n_steps);
    evolve_exact_with(h, psi0, grid, |_, psi| out.push(psi.to_vec()))?;
    Ok(out)
}

/// Number-conserving observables along a trajectory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExactSeries {
    /// `populations[k][i]`
    pub populations: Vec<Vec<f64>>,
    /// `spdm[k]` row-major `I×I`
    pub spdm: Vec<Vec<Complex64>>,
    pub energy: Vec<f64>,
    pub norm: Vec<f64>,
}

impl ExactSeries {
    /// Populations, momentum intensities, total, energy and norm as named columns.
    pub fn trajectory(&self, grid: TimeGrid, params: &BhParams) -> Result<Trajectory> {
        let mut tr = super::lattice_trajectory(grid, params, &self.populations, &self.spdm, self.energy.clone())?
            .with_provenance("scheme", "exact");
        tr.push("norm", "1", self.norm.clone())?;
        Ok(tr)
    }

    fn zeros(steps: usize, sites: usize) -> Self {
        ExactSeries {
            populations: vec![vec![0.0; sites]; steps],
            spdm: vec![vec![Complex64::new(0.0, 0.0); sites * sites]; steps],
            energy: vec![0.0; steps],
            norm: vec![0.0; steps],
        }
    }

    fn add(&mut self, k: usize, w: f64, basis: &FockBasis, h: &HamiltonianMatrix, psi: &[Complex64]) {
        for (a, b) in self.populations[k].iter_mut().zip(populations(basis, psi)) {
            *a += w * b;
        }
        for (a, b) in self.spdm[k].iter_mut().zip(spdm(basis, psi)) {
            *a += b * w;
        }
        self.energy[k] += w * energy(h, psi);
        self.norm[k] += w * norm(psi).powi(2);
    }
}

/// Evolve a fixed-N state and record its observables.
pub fn observe_exact(n: usize, params: &BhParams, kind: &InitialKind, grid: &TimeGrid) -> Result<ExactSeries> {
    let basis = build_basis(n, params.sites, DEFAULT_DIMENSION_CAP)?;
    let h = build_hamiltonian(&basis, params)?;
    let psi0 = initial_state(&basis, kind)?;
    let mut series = ExactSeries::zeros(grid.n_steps, params.sites);
    evolve_exact_with(&h, &psi0, grid, |k, psi| series.add(k, 1.0, &basis, &h, psi))?;
    Ok(series)
}

/// Exact evolution of a product of site coherent states `|z_1,…,z_I⟩`:
/// a Poisson mixture of fixed-N coherent projections.
pub fn observe_coherent(amplitudes: &[Complex64], params: &BhParams, grid: &TimeGrid) -> Result<ExactSeries> {
    params.validate()?;
    if amplitudes.len() != params.sites {
        return Err(Error::validation("one coherent amplitude per site is required"));
    }
    let nbar: f64 = amplitudes.iter().map(|z| z.norm_sqr()).sum();
    let mut series = ExactSeries::zeros(grid.n_steps, params.sites);
    if nbar == 0.0 {
        return Ok(series);
    }
    let amp: Vec<[f64; 2]> = amplitudes.iter().map(|z| [z.re, z.im]).collect();
    let log_p = |m: usize| -> f64 {
        let lf: f64 = (1..=m).map(|x| (x as f64).ln()).sum();
        -nbar + m as f64 * nbar.ln() - lf
    };
    let hi = (nbar + 12.0 * nbar.sqrt() + 20.0).ceil() as usize;
    // the vacuum sector carries weight but no atoms
    let w0 = (-nbar).exp();
    series.norm.iter_mut().for_each(|x| *x += w0);
    for m in 1..=hi {
        let w = log_p(m).exp();
        if w < 1e-17 {
            continue;
        }
        let basis = build_basis(m, params.sites, DEFAULT_DIMENSION_CAP)?;
        let h = build_hamiltonian(&basis, params)?;
        let psi0 = initial_state(&basis, &InitialKind::CoherentProjection { amplitudes: amp.clone() })?;
        evolve_exact_with(&h, &psi0, grid, |k, psi| series.add(k, w, &basis, &h, psi))?;
    }
    Ok(series)
}
