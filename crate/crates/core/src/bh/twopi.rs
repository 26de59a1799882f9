//! Two-time equations of motion for the Bose-Hubbard lattice.
//!
//! Each site carries two real field components `φ = (φ₁, φ₂)` with
//! `Φ = (φ₁ + iφ₂)/√2`, so the kernel has `n = 2I` rows ordered `(site, component)`.
//! In this basis the Weyl-ordered Hamiltonian reads
//! `H = ½ φᵀKφ + Σ_i (U/8)(φ_i·φ_i)² + const` with `K = h⊗1₂ − U·1`.
//! `F` and `ρ` are real; `ρ(t,t) = −Ε`.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::BhParams;
use crate::dense;
use crate::error::{Error, Result};
use crate::observables::Trajectory;
use crate::timegrid::{
    allocate_kernel, initialize_kernel, trapezoid_weight, CausalSystem, HistoryWindow, SelfEnergyRow, TimeGrid,
    TwoTimeKernel, VolterraStepper, DEFAULT_MEMORY_BUDGET,
};

/// Number of real field components per site.
pub const FIELD_COMPONENTS: usize = 2;

/// Truncation of the two-particle-irreducible part of the effective action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Irreducible part discarded; Gaussian fluctuations around the mean field.
    Bogoliubov,
    /// Double-bubble only: time-local self-energy.
    Hfb,
    /// All second-order diagrams (setting-sun and basketball).
    SecondOrder,
    /// Next-to-leading order of the 1/𝒩 expansion, truncated at second order in U.
    LargeNNlo,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Scheme::Bogoliubov, Scheme::Hfb, Scheme::SecondOrder, Scheme::LargeNNlo];

    pub fn tag(&self) -> &'static str {
        match self {
            Scheme::Bogoliubov => "bogoliubov",
            Scheme::Hfb => "hfb",
            Scheme::SecondOrder => "second-order",
            Scheme::LargeNNlo => "large-n-nlo",
        }
    }

    fn has_memory(&self) -> bool {
        matches!(self, Scheme::SecondOrder | Scheme::LargeNNlo)
    }
}

/// Field-algebra form of the second-order self-energy on one site pair.
/// `g` is the 2×2 Wightman block `G^>(t,z)`, `phi` = mean field at `t`, `psi` at `z`.
/// Returns `(basketball, setting-sun)` parts of `Σ^>` without the `−2U²/𝒩²` prefactor.
pub fn sigma_structures(
    scheme: Scheme,
    g: &[Complex64; 4],
    phi: [f64; 2],
    psi: [f64; 2],
) -> ([Complex64; 4], [Complex64; 4]) {
    let z = Complex64::new(0.0, 0.0);
    let mut ggt = [z; 4]; // G Gᵀ
    let mut gtg = [z; 4]; // Gᵀ G
    for a in 0..2 {
        for b in 0..2 {
            for c in 0..2 {
                ggt[a * 2 + b] += g[a * 2 + c] * g[b * 2 + c];
                gtg[a * 2 + b] += g[c * 2 + a] * g[c * 2 + b];
            }
        }
    }
    let tr = ggt[0] + ggt[3];
    let mut bb = [z; 4];
    let mut ss = [z; 4];
    // φᵀ G ψ
    let mut pgp = z;
    for a in 0..2 {
        for b in 0..2 {
            pgp += g[a * 2 + b] * phi[a] * psi[b];
        }
    }
    let gpsi = [g[0] * psi[0] + g[1] * psi[1], g[2] * psi[0] + g[3] * psi[1]];
    let gtphi = [g[0] * phi[0] + g[2] * phi[1], g[1] * phi[0] + g[3] * phi[1]];
    let ggtphi = [ggt[0] * phi[0] + ggt[1] * phi[1], ggt[2] * phi[0] + ggt[3] * phi[1]];
    let gtgpsi = [gtg[0] * psi[0] + gtg[1] * psi[1], gtg[2] * psi[0] + gtg[3] * psi[1]];
    for a in 0..2 {
        for b in 0..2 {
            let i = a * 2 + b;
            bb[i] = g[i] * tr;
            ss[i] = 2.0 * g[i] * pgp + tr * (phi[a] * psi[b]);
            if scheme == Scheme::SecondOrder {
                let mut ggtg = z;
                for c in 0..2 {
                    ggtg += ggt[a * 2 + c] * g[c * 2 + b];
                }
                bb[i] += 2.0 * ggtg;
                ss[i] += 2.0 * gpsi[a] * gtphi[b] + 2.0 * ggtphi[a] * psi[b] + 2.0 * phi[a] * gtgpsi[b];
            }
        }
    }
    (bb, ss)
}

/// Mean-field initial data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoPiInitial {
    /// Condensate amplitude `Φ_i(0)` per site as `[re, im]`; `|Φ_i|²` atoms.
    pub condensate: Vec<[f64; 2]>,
}

impl TwoPiInitial {
    /// All `n` atoms condensed on the first site.
    pub fn all_in_one_well(n: f64, sites: usize) -> Self {
        let mut c = vec![[0.0, 0.0]; sites];
        c[0] = [n.sqrt(), 0.0];
        TwoPiInitial { condensate: c }
    }

    /// Coherent amplitudes `z_i` of the equivalent many-body state.
    pub fn amplitudes(&self) -> Vec<Complex64> {
        self.condensate.iter().map(|a| Complex64::new(a[0], a[1])).collect()
    }
}

/// A two-time run description.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoPiConfig {
    pub params: BhParams,
    pub scheme: Scheme,
    pub grid: TimeGrid,
    pub initial: TwoPiInitial,
    pub window: HistoryWindow,
    pub memory_budget: u64,
}

impl TwoPiConfig {
    pub fn new(params: BhParams, scheme: Scheme, grid: TimeGrid, initial: TwoPiInitial) -> Self {
        TwoPiConfig {
            params,
            scheme,
            grid,
            initial,
            window: HistoryWindow::default(),
            memory_budget: DEFAULT_MEMORY_BUDGET,
        }
    }
}

/// Mean field and scheme data driving the kernel equations.
#[derive(Debug, Clone)]
pub struct BhSystem {
    params: BhParams,
    scheme: Scheme,
    sites: usize,
    n: usize,
    /// `K = h⊗1₂ − U·1`
    k_mat: Vec<f64>,
    /// `φ(t_k)`, `n` entries per row
    phi: Vec<f64>,
    /// mean-field memory `Σ_z w Σ⁰_ρ(t_r, z) φ(z)` for the last two evaluated rows
    mf_mem: [(usize, Vec<f64>); 2],
    dt: f64,
    window: HistoryWindow,
}

impl BhSystem {
    fn new(cfg: &TwoPiConfig) -> Result<Self> {
        let p = &cfg.params;
        p.validate()?;
        if cfg.initial.condensate.len() != p.sites {
            return Err(Error::validation(format!(
                "initial condensate has {} entries for {} sites",
                cfg.initial.condensate.len(),
                p.sites
            )));
        }
        let sites = p.sites;
        let n = FIELD_COMPONENTS * sites;
        let h = p.single_particle();
        let mut k_mat = vec![0.0; n * n];
        for i in 0..sites {
            for j in 0..sites {
                for a in 0..2 {
                    k_mat[(2 * i + a) * n + 2 * j + a] = h[i * sites + j];
                }
            }
        }
        for d in 0..n {
            k_mat[d * n + d] -= p.u;
        }
        let mut phi = vec![0.0; n * cfg.grid.n_steps];
        for (i, c) in cfg.initial.condensate.iter().enumerate() {
            let s = std::f64::consts::SQRT_2;
            phi[2 * i] = s * c[0];
            phi[2 * i + 1] = s * c[1];
        }
        Ok(BhSystem {
            params: p.clone(),
            scheme: cfg.scheme,
            sites,
            n,
            k_mat,
            phi,
            mf_mem: [(usize::MAX, vec![0.0; n]), (usize::MAX, vec![0.0; n])],
            dt: cfg.grid.dt,
            window: cfg.window,
        })
    }

    pub fn phi(&self, k: usize) -> &[f64] {
        &self.phi[k * self.n..(k + 1) * self.n]
    }

    fn phi_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.phi[k * self.n..(k + 1) * self.n]
    }

    /// Local generator `M` (with or without the fluctuation part).
    fn local(&self, phi: &[f64], c: &[f64], with_f: bool, m: &mut [f64]) {
        let n = self.n;
        let u = self.params.u;
        m.copy_from_slice(&self.k_mat);
        for i in 0..self.sites {
            let b = 2 * i;
            let p2 = phi[b] * phi[b] + phi[b + 1] * phi[b + 1];
            let trf = c[b * n + b] + c[(b + 1) * n + b + 1];
            for a in 0..2 {
                for d in 0..2 {
                    let mut v = 2.0 * phi[b + a] * phi[b + d];
                    if a == d {
                        v += p2;
                    }
                    if with_f {
                        v += 2.0 * c[(b + a) * n + b + d];
                        if a == d {
                            v += trf;
                        }
                    }
                    m[(b + a) * n + b + d] += 0.5 * u * v;
                }
            }
        }
        let hb = self.params.hbar;
        if hb != 1.0 {
            m.iter_mut().for_each(|x| *x /= hb);
        }
    }

    /// Generator of the mean-field equation, `force = M_φ φ`.
    fn mean_field_matrix(&self, phi: &[f64], c: &[f64], m: &mut [f64]) {
        let n = self.n;
        let u = self.params.u;
        m.copy_from_slice(&self.k_mat);
        for i in 0..self.sites {
            let b = 2 * i;
            let p2 = phi[b] * phi[b] + phi[b + 1] * phi[b + 1];
            let trf = c[b * n + b] + c[(b + 1) * n + b + 1];
            for a in 0..2 {
                for d in 0..2 {
                    let mut v = 2.0 * c[(b + a) * n + b + d];
                    if a == d {
                        v += p2 + trf;
                    }
                    m[(b + a) * n + b + d] += 0.5 * u * v;
                }
            }
        }
        let hb = self.params.hbar;
        if hb != 1.0 {
            m.iter_mut().for_each(|x| *x /= hb);
        }
    }

    fn mf_memory(&self, row: usize) -> &[f64] {
        if self.mf_mem[0].0 == row {
            &self.mf_mem[0].1
        } else if self.mf_mem[1].0 == row {
            &self.mf_mem[1].1
        } else {
            panic!("mean-field memory of row {row} was not evaluated")
        }
    }

    fn store_mf_memory(&mut self, row: usize, v: Vec<f64>) {
        if self.mf_mem[0].0 == row {
            self.mf_mem[0].1 = v;
        } else if self.mf_mem[1].0 == row {
            self.mf_mem[1].1 = v;
        } else {
            // keep the most recent other row
            let keep = if self.mf_mem[0].0 == usize::MAX
                || (self.mf_mem[1].0 != usize::MAX && self.mf_mem[1].0 > self.mf_mem[0].0)
            {
                0
            } else {
                1
            };
            self.mf_mem[keep] = (row, v);
        }
    }

    /// Right-hand side `dφ/dt = Ε[M_φ φ + ∫ Σ⁰_ρ φ]` at row `k` (memory from the last evaluation).
    pub fn mean_field_rhs(&self, kernel: &TwoTimeKernel, k: usize) -> Vec<f64> {
        let n = self.n;
        let mut m = vec![0.0; n * n];
        let phi = self.phi(k);
        self.mean_field_matrix(phi, kernel.f(k, k), &mut m);
        let mut f = vec![0.0; n];
        for a in 0..n {
            for b in 0..n {
                f[a] += m[a * n + b] * phi[b];
            }
        }
        if self.scheme.has_memory() && (self.mf_mem[0].0 == k || self.mf_mem[1].0 == k) {
            for (x, y) in f.iter_mut().zip(self.mf_memory(k)) {
                *x += y;
            }
        }
        let mut out = vec![0.0; n];
        for m in 0..n / 2 {
            out[2 * m] = f[2 * m + 1];
            out[2 * m + 1] = -f[2 * m];
        }
        out
    }
}

impl CausalSystem for BhSystem {
    fn dim(&self) -> usize {
        self.n
    }

    fn aux_len(&self) -> usize {
        self.n
    }

    fn aux(&self, k: usize) -> &[f64] {
        self.phi(k)
    }

    fn set_aux(&mut self, k: usize, v: &[f64]) {
        self.phi_mut(k).copy_from_slice(v);
    }

    fn local_matrix(&self, phi: &[f64], c: &[f64], m: &mut [f64]) {
        self.local(phi, c, self.scheme != Scheme::Bogoliubov, m);
    }

    fn aux_matrix(&self, phi: &[f64], c: &[f64], g: &mut [f64]) {
        self.mean_field_matrix(phi, c, g);
    }

    fn aux_memory(&self, k: usize) -> Option<&[f64]> {
        self.scheme.has_memory().then(|| self.mf_memory(k))
    }

    fn aux_is_mean_field(&self) -> bool {
        true
    }

    fn self_energy(&mut self, kernel: &TwoTimeKernel, k: usize, sigma: &mut SelfEnergyRow) -> Result<bool> {
        if !self.scheme.has_memory() {
            return Ok(false);
        }
        let n = self.n;
        let s = self.sites;
        let hb = self.params.hbar;
        let pref = 2.0 * self.params.u * self.params.u / (FIELD_COMPONENTS * FIELD_COMPONENTS) as f64 / (hb * hb);
        let start = self.window.0.map(|w| k.saturating_sub(w)).unwrap_or(0);
        let mut mfm = vec![0.0; n];
        let zc = Complex64::new(0.0, 0.0);
        for z in start..=k {
            let f = kernel.f(k, z);
            let r = kernel.rho(k, z);
            let w = trapezoid_weight(self.dt, start, k, z);
            let (sf, sr) = sigma.blocks_mut(z);
            for i in 0..s {
                let phi = [self.phi[k * n + 2 * i], self.phi[k * n + 2 * i + 1]];
                for j in 0..s {
                    let psi = [self.phi[z * n + 2 * j], self.phi[z * n + 2 * j + 1]];
                    let mut g = [zc; 4];
                    for a in 0..2 {
                        for b in 0..2 {
                            let idx = (2 * i + a) * n + 2 * j + b;
                            g[a * 2 + b] = Complex64::new(f[idx], -0.5 * r[idx]);
                        }
                    }
                    let (bb, ss) = sigma_structures(self.scheme, &g, phi, psi);
                    for a in 0..2 {
                        for b in 0..2 {
                            let idx = (2 * i + a) * n + 2 * j + b;
                            let gt = -pref * (bb[a * 2 + b] + ss[a * 2 + b]);
                            sf[idx] = gt.re;
                            sr[idx] = -2.0 * gt.im;
                            // mean-field memory uses the field-independent part
                            let s0 = -2.0 * (-pref * bb[a * 2 + b]).im;
                            mfm[2 * i + a] += w * s0 * psi[b];
                        }
                    }
                }
            }
        }
        if let Some(p) = mfm.iter().position(|x| !x.is_finite()) {
            return Err(Error::Blowup {
                step: k,
                t: k as f64 * self.dt,
                t_prime: 0.0,
                index: p,
                what: "non-finite self-energy".into(),
            });
        }
        self.store_mf_memory(k, mfm);
        Ok(true)
    }
}

/// Observables of one time slice.
#[derive(Debug, Clone, PartialEq)]
pub struct BhSample {
    pub populations: Vec<f64>,
    pub condensate: Vec<f64>,
    /// `Φ_i` per site.
    pub field: Vec<Complex64>,
    /// `⟨a_i† a_j⟩`, row-major.
    pub spdm: Vec<Complex64>,
    pub total: f64,
    /// Gaussian (Hartree-Fock-Bogoliubov) energy functional.
    pub energy: f64,
}

/// Stateful two-time solver; rows are filled one step at a time.
#[derive(Debug, Clone)]
pub struct TwoPiSolver {
    pub config: TwoPiConfig,
    kernel: TwoTimeKernel,
    system: BhSystem,
    stepper: VolterraStepper,
    current: usize,
}

impl TwoPiSolver {
    pub fn new(config: TwoPiConfig) -> Result<Self> {
        let system = BhSystem::new(&config)?;
        let mut kernel = allocate_kernel(&config.grid, config.params.sites, FIELD_COMPONENTS, config.memory_budget)?;
        let n = system.n;
        // vacuum fluctuations: ⟨φ_a φ_b⟩_sym = ½δ_ab
        let mut f0 = vec![0.0; n * n];
        for d in 0..n {
            f0[d * n + d] = 0.5;
        }
        initialize_kernel(&mut kernel, &f0)?;
        let stepper = VolterraStepper::new(config.grid.dt, n, config.window);
        Ok(TwoPiSolver { config, kernel, system, stepper, current: 0 })
    }

    /// Index of the last completed row.
    pub fn current(&self) -> usize {
        self.current
    }

    pub fn kernel(&self) -> &TwoTimeKernel {
        &self.kernel
    }

    pub fn step(&mut self) -> Result<()> {
        let k = self.current;
        self.stepper.step(&mut self.kernel, &mut self.system, &self.config.grid, k)?;
        self.current = k + 1;
        Ok(())
    }

    /// Step until row `k` is complete.
    pub fn run_to(&mut self, k: usize) -> Result<()> {
        while self.current < k.min(self.config.grid.n_steps - 1) {
            self.step()?;
        }
        Ok(())
    }

    pub fn is_done(&self) -> bool {
        self.current + 1 >= self.config.grid.n_steps
    }

    pub fn mean_field(&self, k: usize) -> &[f64] {
        self.system.phi(k)
    }

    pub fn mean_field_rhs(&mut self, k: usize) -> Vec<f64> {
        self.system.mean_field_rhs(&self.kernel, k)
    }

    pub fn sample(&self, k: usize) -> BhSample {
        assert!(k <= self.current);
        let p = &self.config.params;
        let s = p.sites;
        let n = self.system.n;
        let phi = self.system.phi(k);
        let c_f = self.kernel.f(k, k);
        let mut c = vec![0.0; n * n];
        for a in 0..n {
            for b in 0..n {
                c[a * n + b] = phi[a] * phi[b] + c_f[a * n + b];
            }
        }
        let mut spdm = vec![Complex64::new(0.0, 0.0); s * s];
        for i in 0..s {
            for j in 0..s {
                let (i1, i2, j1, j2) = (2 * i, 2 * i + 1, 2 * j, 2 * j + 1);
                let mut v =
                    Complex64::new(0.5 * (c[i1 * n + j1] + c[i2 * n + j2]), 0.5 * (c[i1 * n + j2] - c[i2 * n + j1]));
                if i == j {
                    v -= 0.5;
                }
                spdm[i * s + j] = v;
            }
        }
        let populations: Vec<f64> = (0..s).map(|i| spdm[i * s + i].re).collect();
        let condensate: Vec<f64> =
            (0..s).map(|i| 0.5 * (phi[2 * i] * phi[2 * i] + phi[2 * i + 1] * phi[2 * i + 1])).collect();
        let field: Vec<Complex64> =
            (0..s).map(|i| Complex64::new(phi[2 * i], phi[2 * i + 1]) / std::f64::consts::SQRT_2).collect();
        let total = populations.iter().sum();
        // energy
        let mut e = 0.0;
        for a in 0..n {
            for b in 0..n {
                e += 0.5 * self.system.k_mat[a * n + b] * c[b * n + a];
            }
        }
        for i in 0..s {
            let b = 2 * i;
            let p2 = phi[b] * phi[b] + phi[b + 1] * phi[b + 1];
            let f11 = c_f[b * n + b];
            let f22 = c_f[(b + 1) * n + b + 1];
            let f12 = c_f[b * n + b + 1];
            let trf = f11 + f22;
            let pfp = phi[b] * phi[b] * f11 + 2.0 * phi[b] * phi[b + 1] * f12 + phi[b + 1] * phi[b + 1] * f22;
            let trf2 = f11 * f11 + f22 * f22 + 2.0 * f12 * f12;
            e += p.u / 8.0 * (p2 * p2 + 2.0 * p2 * trf + 4.0 * pfp + trf * trf + 2.0 * trf2);
        }
        let h = p.single_particle();
        let trh: f64 = (0..s).map(|i| h[i * s + i]).sum();
        e += -0.5 * trh + p.u * s as f64 / 4.0;
        BhSample { populations, condensate, field, spdm, total, energy: e }
    }

    /// Smallest normal-mode frequency of the initial fluctuation generator.
    /// A Goldstone-respecting truncation would have an exact zero mode.
    pub fn goldstone_gap(&self) -> f64 {
        let n = self.system.n;
        let mut m = vec![0.0; n * n];
        self.system.local(self.system.phi(0), self.kernel.f(0, 0), self.config.scheme != Scheme::Bogoliubov, &mut m);
        let mut a = vec![0.0; n * n];
        dense::apply_symplectic(n, &m, &mut a);
        let ev = DMatrix::from_row_slice(n, n, &a).complex_eigenvalues();
        ev.iter().map(|z| z.norm()).fold(f64::INFINITY, f64::min)
    }

    /// Solver state for checkpointing: rows filled, kernel storage and mean-field history.
    pub fn state(&self) -> (usize, &[f64], &[f64], &[f64]) {
        let (f, r) = self.kernel.raw();
        let n = self.system.n;
        (self.current, f, r, &self.system.phi[..(self.current + 1) * n])
    }

    pub fn restore(&mut self, current: usize, f: &[f64], rho: &[f64], phi: &[f64]) -> Result<()> {
        let n = self.system.n;
        if current >= self.config.grid.n_steps || phi.len() != (current + 1) * n {
            return Err(Error::validation("checkpoint does not match the run configuration"));
        }
        self.kernel.restore(current + 1, f, rho)?;
        self.system.phi[..phi.len()].copy_from_slice(phi);
        self.system.mf_mem = [(usize::MAX, vec![0.0; n]), (usize::MAX, vec![0.0; n])];
        self.stepper = VolterraStepper::new(self.config.grid.dt, n, self.config.window);
        self.current = current;
        Ok(())
    }
}

/// Lattice columns plus `condensate_i`.
pub fn samples_trajectory(
    samples: &[BhSample],
    grid: TimeGrid,
    params: &BhParams,
    scheme: Scheme,
) -> Result<Trajectory> {
    let mut grid = grid;
    grid.n_steps = samples.len();
    let pops: Vec<Vec<f64>> = samples.iter().map(|s| s.populations.clone()).collect();
    let spdm: Vec<Vec<Complex64>> = samples.iter().map(|s| s.spdm.clone()).collect();
    let mut tr = super::lattice_trajectory(grid, params, &pops, &spdm, samples.iter().map(|s| s.energy).collect())?
        .with_provenance("scheme", scheme.tag());
    for i in 0..params.sites {
        tr.push(&format!("condensate_{i}"), "atoms", samples.iter().map(|s| s.condensate[i]).collect())?;
    }
    Ok(tr)
}

/// Run a configuration to the end and return every time slice.
pub fn evolve_2pi(config: TwoPiConfig) -> Result<Vec<BhSample>> {
    let mut solver = TwoPiSolver::new(config)?;
    let mut out = vec![solver.sample(0)];
    while !solver.is_done() {
        solver.step()?;
        out.push(solver.sample(solver.current()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bh::exact::{observe_coherent, observe_exact, InitialKind};
    use crate::bh::Boundary;

    fn cfg(n: f64, u: f64, scheme: Scheme, dt: f64, t: f64, b: Boundary) -> TwoPiConfig {
        let params = BhParams::new(2, 1.0, u, b);
        let grid = TimeGrid::spanning(0.0, t, dt).unwrap();
        TwoPiConfig::new(params, scheme, grid, TwoPiInitial::all_in_one_well(n, 2))
    }

    #[test]
    fn free_limit_matches_exact_for_every_scheme() {
        let grid = TimeGrid::spanning(0.0, 5.0, 0.02).unwrap();
        let exact =
            observe_exact(20, &BhParams::new(2, 1.0, 0.0, Boundary::Open), &InitialKind::AllInOneWell, &grid).unwrap();
        for s in Scheme::ALL {
            let tr = evolve_2pi(cfg(20.0, 0.0, s, 0.02, 5.0, Boundary::Open)).unwrap();
            for (k, smp) in tr.iter().enumerate() {
                assert!((smp.populations[0] - exact.populations[k][0]).abs() < 1e-8, "{s:?} {k}");
            }
        }
    }

    #[test]
    fn classical_limit_is_gross_pitaevskii() {
        // Bogoliubov mean field with vanishing fluctuations would be GP; check the force at t=0
        let mut c = cfg(10.0, 0.3, Scheme::Hfb, 0.01, 0.1, Boundary::Open);
        c.initial.condensate = vec![[2.0, 0.5], [1.0, -1.0]];
        let mut s = TwoPiSolver::new(c).unwrap();
        let rhs = s.mean_field_rhs(0);
        // GP: i dΦ_i/dt = −J Φ_j − U Φ_i + U(|Φ_i|² + 1)Φ_i  (vacuum F = ½ gives the +1 shift)
        let phis = [Complex64::new(2.0, 0.5), Complex64::new(1.0, -1.0)];
        for i in 0..2 {
            let j = 1 - i;
            let rhs_gp = -phis[j] - 0.3 * phis[i] + 0.3 * (phis[i].norm_sqr() + 1.0) * phis[i];
            let dphi = rhs_gp * Complex64::new(0.0, -1.0);
            let got = Complex64::new(rhs[2 * i], rhs[2 * i + 1]) / std::f64::consts::SQRT_2;
            assert!((got - dphi).norm() < 1e-12, "{got} vs {dphi}");
        }
    }

    #[test]
    fn symmetric_double_well_keeps_symmetry() {
        let mut c = cfg(10.0, 0.5, Scheme::SecondOrder, 0.02, 1.0, Boundary::Open);
        c.initial.condensate = vec![[1.5, 0.0], [1.5, 0.0]];
        let tr = evolve_2pi(c).unwrap();
        for s in &tr {
            assert!((s.populations[0] - s.populations[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn second_order_self_energy_is_quadratic_in_u() {
        let g = [
            Complex64::new(0.7, -0.2),
            Complex64::new(0.1, 0.3),
            Complex64::new(-0.2, 0.05),
            Complex64::new(0.4, -0.1),
        ];
        let (bb, ss) = sigma_structures(Scheme::SecondOrder, &g, [1.0, 0.3], [0.2, -0.8]);
        let mag = |u: f64| {
            let pref = 2.0 * u * u / 4.0;
            bb.iter().zip(&ss).map(|(a, b)| ((a + b) * pref).norm()).sum::<f64>()
        };
        let slope = (mag(1e-2).ln() - mag(1e-3).ln()) / (1e-2f64.ln() - 1e-3f64.ln());
        assert!((slope - 2.0).abs() < 0.05);
        let (bb, ss) = sigma_structures(Scheme::SecondOrder, &[Complex64::new(0.0, 0.0); 4], [0.0; 2], [0.0; 2]);
        assert!(bb.iter().chain(ss.iter()).all(|x| x.norm() == 0.0));
    }

    #[test]
    fn short_time_hfb_tracks_exact() {
        let n = 40.0;
        let u = 4.0 / n;
        let c = cfg(n, u, Scheme::Hfb, 0.005, 1.0, Boundary::Open);
        let grid = c.grid;
        let tr = evolve_2pi(c).unwrap();
        let ex = observe_coherent(
            &TwoPiInitial::all_in_one_well(n, 2).amplitudes(),
            &BhParams::new(2, 1.0, u, Boundary::Open),
            &grid,
        )
        .unwrap();
        for (k, s) in tr.iter().enumerate() {
            assert!((s.populations[0] - ex.populations[k][0]).abs() < 0.01 * n);
        }
    }

    #[test]
    fn memory_forcings_cancel_in_the_number_balance() {
        for scheme in [Scheme::SecondOrder, Scheme::LargeNNlo] {
            let params = BhParams::new(2, 1.0, 0.1, Boundary::DoubleLink);
            let grid = TimeGrid::spanning(0.0, 2.0, 0.02).unwrap();
            let cfg = TwoPiConfig::new(params, scheme, grid, TwoPiInitial::all_in_one_well(40.0, 2));
            let mut s = TwoPiSolver::new(cfg).unwrap();
            s.run_to(60).unwrap();
            let (k, n) = (60, 4);
            let mut em = vec![0.0; n * n];
            dense::apply_symplectic(n, s.stepper.mem.f(k), &mut em);
            let tr: f64 = (0..n).map(|i| em[i * n + i]).sum();
            let phi = s.system.phi(k);
            let mx = s.system.mf_memory(k);
            let dot: f64 = (0..2).map(|m| phi[2 * m] * mx[2 * m + 1] - phi[2 * m + 1] * mx[2 * m]).sum();
            assert!(tr.abs() > 1.0);
            assert!((tr + dot).abs() < 1e-12 * tr.abs(), "{scheme:?}: {tr} {dot}");
        }
    }

    #[test]
    fn number_is_conserved() {
        for s in [Scheme::Hfb, Scheme::SecondOrder, Scheme::LargeNNlo] {
            let tr = evolve_2pi(cfg(10.0, 0.4, s, 0.01, 3.0, Boundary::DoubleLink)).unwrap();
            let n0 = tr[0].total;
            let drift = tr.iter().map(|x| (x.total - n0).abs() / n0).fold(0.0, f64::max);
            assert!(drift < 1e-6, "{s:?}: {drift}");
        }
    }
}
