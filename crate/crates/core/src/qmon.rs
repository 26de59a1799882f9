//! Quantum-mechanical O(N) model `H = Σ_A p_A²/2 + (M²/2) x·x + (λ/8N)(x·x)²`
//! in the symmetric phase, with the auxiliary field `χ = M² + (λ/2N) x·x`.
//!
//! Every component carries the same two-point function, `⟨x_A x_B⟩ = δ_AB ħ F`.
//! Kernels are stored without the factor `ħ` (so `ρ(t,t) = 0`, `∂_t ρ(t,t')|_{t=t'} = 1`)
//! and the coupling enters as `λħ`.
//!
//! Time stepping is the second-order leapfrog in both time arguments with trapezoidal
//! memory sums. At leading order only the local mass `χ̄(t) = M² + (λħ/2) F(t,t)`
//! survives. At next-to-leading order the mass gains `(λħ/N) F(t,t)` and the
//! self-energy is one `F`/`ρ` line times the resummed bubble chain `I`.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::observables::{mode_entropy, Trajectory};
use crate::timegrid::{TimeGrid, DEFAULT_MEMORY_BUDGET};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QmonParams {
    /// Number of field components `N`.
    pub components: usize,
    pub m2: f64,
    pub lambda: f64,
    #[serde(default = "one")]
    pub hbar: f64,
}

fn one() -> f64 {
    1.0
}

impl QmonParams {
    pub fn new(components: usize, m2: f64, lambda: f64) -> Self {
        QmonParams { components, m2, lambda, hbar: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.components < 1 {
            return Err(Error::validation("need at least one component"));
        }
        if !self.m2.is_finite() || !self.lambda.is_finite() || !self.hbar.is_finite() {
            return Err(Error::validation("parameters must be finite"));
        }
        if self.lambda < 0.0 {
            return Err(Error::validation("lambda must be nonnegative"));
        }
        if !(self.hbar > 0.0) {
            return Err(Error::validation("hbar must be positive"));
        }
        Ok(())
    }

    /// `M² < 0` with `λ > 0`: allowed, but outside the symmetric phase the
    /// background `x̄ = 0` is not the ground state.
    pub fn negative_mass(&self) -> bool {
        self.m2 < 0.0
    }

    fn coupling(&self) -> f64 {
        self.lambda * self.hbar
    }
}

/// Solve `g(χ) = 0` for increasing `g` on `(lo, hi)` by safeguarded Newton steps.
fn increasing_root(g: impl Fn(f64) -> (f64, f64), mut lo: f64, mut hi: f64) -> Result<f64> {
    let mut x = 0.5 * (lo + hi);
    for _ in 0..200 {
        let (v, d) = g(x);
        if v == 0.0 {
            return Ok(x);
        }
        if v < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let newton = x - v / d;
        let next = if d > 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if (next - x).abs() <= 1e-16 * x.abs().max(1e-300) || hi - lo <= 1e-16 * hi.abs() {
            return Ok(next);
        }
        x = next;
    }
    Err(Error::Convergence { what: "gap equation".into(), residual: g(x).0.abs() })
}

/// Static leading-order gap: the positive root of `χ = M² + λħ/(4√χ)`.
pub fn gap_static(p: &QmonParams) -> Result<f64> {
    p.validate()?;
    let c = p.coupling();
    if c == 0.0 {
        if p.m2 > 0.0 {
            return Ok(p.m2);
        }
        return Err(Error::Range(format!(
            "no positive gap for M² = {} without coupling; the broken phase is not treated",
            p.m2
        )));
    }
    let g = |x: f64| (x - p.m2 - 0.25 * c / x.sqrt(), 1.0 + 0.125 * c / (x * x.sqrt()));
    // g(hi) > 0 and g(lo) < 0
    let hi = p.m2.max(0.0) + (0.25 * c).powf(2.0 / 3.0) + 0.25 * c / p.m2.max(1e-300).sqrt().max(1.0) + 1.0;
    let mut lo = hi;
    while g(lo).0 >= 0.0 {
        lo *= 0.25;
    }
    increasing_root(g, lo, hi)
}

/// Equal-time covariance `(a, b) = (⟨x_k²⟩, ⟨x_k x_{k−1}⟩)` of the stationary state of the
/// leapfrog map with frequency² `w2` and unit symplectic eigenvalue ½.
pub fn discrete_vacuum(w2: f64, dt: f64) -> Result<(f64, f64)> {
    let s = dt * dt * w2;
    if !(w2 > 0.0) || s >= 4.0 {
        return Err(Error::validation(format!(
            "no stable discrete vacuum for ω² = {w2} at dt = {dt} (need 0 < ω²dt² < 4)"
        )));
    }
    let a = 1.0 / (2.0 * w2.sqrt() * (1.0 - 0.25 * s).sqrt());
    Ok((a, (1.0 - 0.5 * s) * a))
}

/// Leading-order gap consistent with the leapfrog vacuum at time step `dt`:
/// `χ = M² + (λħ/2)·a(χ, dt)`; tends to [`gap_static`] as `dt → 0`.
pub fn gap_discrete(p: &QmonParams, dt: f64) -> Result<f64> {
    let chi0 = gap_static(p)?;
    let c = p.coupling();
    if c == 0.0 {
        discrete_vacuum(chi0, dt)?;
        return Ok(chi0);
    }
    let a = |x: f64| 1.0 / (2.0 * x.sqrt() * (1.0 - 0.25 * dt * dt * x).sqrt());
    let g = |x: f64| {
        let h = 1e-7 * x;
        let v = x - p.m2 - 0.5 * c * a(x);
        let d = 1.0 - 0.5 * c * (a(x + h) - a(x - h)) / (2.0 * h);
        (v, d)
    };
    // a(χ) diverges at the stability edge 4/dt², so bracket the lower root from chi0 upwards
    let edge = 4.0 / (dt * dt);
    let mut hi = chi0;
    while g(hi).0 <= 0.0 {
        hi = 0.5 * (hi + edge);
        if edge - hi < 1e-9 * edge {
            return Err(Error::validation(format!("time step {dt} too large for the gap {chi0}")));
        }
    }
    let mut lo = chi0;
    while g(lo).0 >= 0.0 {
        lo *= 0.5;
    }
    increasing_root(g, lo, hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QmonOrder {
    Lo,
    Nlo,
}

/// Gaussian initial data with `⟨xp⟩ = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum QmonInitial {
    /// Leading-order gap vacuum (lattice-consistent) of the given mass and coupling,
    /// defaulting to those of the run. Different values quench the system at `t = 0`.
    GapVacuum {
        #[serde(default)]
        m2: Option<f64>,
        #[serde(default)]
        lambda: Option<f64>,
    },
    /// Vacuum of a free oscillator of frequency² `omega2`.
    Vacuum { omega2: f64 },
}

impl Default for QmonInitial {
    fn default() -> Self {
        QmonInitial::GapVacuum { m2: None, lambda: None }
    }
}

impl QmonInitial {
    /// Frequency² of the same vacuum without the lattice correction.
    pub fn omega2_continuum(&self, p: &QmonParams) -> Result<f64> {
        match *self {
            QmonInitial::GapVacuum { m2, lambda } => {
                gap_static(&QmonParams { m2: m2.unwrap_or(p.m2), lambda: lambda.unwrap_or(p.lambda), ..*p })
            }
            QmonInitial::Vacuum { omega2 } => Ok(omega2),
        }
    }

    /// Frequency² of the initial vacuum for a run of parameters `p` at step `dt`.
    pub fn omega2(&self, p: &QmonParams, dt: f64) -> Result<f64> {
        match *self {
            QmonInitial::GapVacuum { m2, lambda } => {
                let q = QmonParams { m2: m2.unwrap_or(p.m2), lambda: lambda.unwrap_or(p.lambda), ..*p };
                gap_discrete(&q, dt)
            }
            QmonInitial::Vacuum { omega2 } => Ok(omega2),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QmonConfig {
    pub params: QmonParams,
    pub order: QmonOrder,
    pub grid: TimeGrid,
    pub initial: QmonInitial,
    pub memory_budget: u64,
}

impl QmonConfig {
    pub fn new(params: QmonParams, order: QmonOrder, grid: TimeGrid) -> Self {
        QmonConfig { params, order, grid, initial: QmonInitial::default(), memory_budget: DEFAULT_MEMORY_BUDGET }
    }
}

/// Equal-time data of one step, per component and in physical units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QmonSample {
    pub chi_bar: f64,
    pub x2: f64,
    pub p2: f64,
    pub xp: f64,
    /// Symplectic eigenvalue of the `(x_k, x_{k+1})` pair, in units of `ħ`.
    pub nu: f64,
    /// `N·s(ν)`
    pub entropy: f64,
    /// Leading-order energy per component.
    pub energy: f64,
}

fn tri(r: usize) -> usize {
    r * (r + 1) / 2
}

/// Leapfrog two-time solver. Rows `0..=current` are filled; observables at step `k`
/// need row `k+1`, so the grid's `n_steps` points need `n_steps + 1` rows.
#[derive(Debug, Clone)]
pub struct QmonSolver {
    pub config: QmonConfig,
    f: Vec<f64>,
    r: Vec<f64>,
    rows: usize,
    capacity: usize,
    /// `F(−1,−1), F(−1,0), F(1,−1)` of the initial data run backwards one step
    back: [f64; 3],
    // per-step workspace
    irho: Vec<f64>,
    ifn: Vec<f64>,
    acc: Vec<f64>,
    a: Vec<f64>,
    wir: Vec<f64>,
    wif: Vec<f64>,
    wsf: Vec<f64>,
    wsr: Vec<f64>,
    sf: Vec<f64>,
    sr: Vec<f64>,
    pm: Vec<f64>,
    qm: Vec<f64>,
    mr: Vec<f64>,
    simd: bool,
}

impl QmonSolver {
    pub fn new(config: QmonConfig) -> Result<Self> {
        let p = &config.params;
        p.validate()?;
        let dt = config.grid.dt;
        let capacity = config.grid.n_steps + 1;
        let bytes = (tri(capacity) as u64).saturating_mul(16);
        if bytes > config.memory_budget {
            return Err(Error::resource(format!(
                "two-time storage for {capacity} rows needs {bytes} bytes, budget {}",
                config.memory_budget
            )));
        }
        let w2 = config.initial.omega2(p, dt)?;
        let (a, _) = discrete_vacuum(w2, dt)?;
        // the vacuum as moments of x₀ and the discrete momentum p̃ with x₁ = c x₀ + dt p̃;
        // row 1 follows from the post-quench mass, and reproduces the lattice vacuum when
        // that mass equals w2
        let pv = a * w2 * (1.0 - 0.25 * dt * dt * w2);
        let mut m0 = p.m2 + 0.5 * p.coupling() * a;
        if config.order == QmonOrder::Nlo {
            m0 += p.coupling() / p.components as f64 * a;
        }
        let c0 = 1.0 - 0.5 * dt * dt * m0;
        let (f10, f11) = (c0 * a, c0 * c0 * a + dt * dt * pv);
        let mut f = Vec::new();
        let mut r = Vec::new();
        f.try_reserve_exact(tri(capacity)).map_err(|e| Error::resource(e.to_string()))?;
        r.try_reserve_exact(tri(capacity)).map_err(|e| Error::resource(e.to_string()))?;
        f.extend_from_slice(&[a, f10, f11]);
        r.extend_from_slice(&[0.0, dt, 0.0]);
        let mut s = QmonSolver {
            config,
            f,
            r,
            rows: 2,
            capacity,
            back: [0.0; 3],
            irho: Vec::new(),
            ifn: Vec::new(),
            acc: Vec::new(),
            a: Vec::new(),
            wir: Vec::new(),
            wif: Vec::new(),
            wsf: Vec::new(),
            wsr: Vec::new(),
            sf: Vec::new(),
            sr: Vec::new(),
            pm: Vec::new(),
            qm: Vec::new(),
            mr: Vec::new(),
            simd: kernels::detect(),
        };
        let m0 = s.local_mass(0);
        let c = 2.0 - dt * dt * m0;
        let f00 = a;
        s.back = [c * c * f00 - 2.0 * c * f10 + f11, c * f00 - f10, c * f10 - f11];
        Ok(s)
    }

    /// Last row written.
    pub fn current(&self) -> usize {
        self.rows - 1
    }

    /// Steps whose observables are available.
    pub fn available(&self) -> usize {
        (self.rows - 1).min(self.config.grid.n_steps)
    }

    pub fn is_done(&self) -> bool {
        self.rows >= self.capacity
    }

    #[inline]
    pub fn f_at(&self, t: usize, s: usize) -> f64 {
        if t >= s {
            self.f[tri(t) + s]
        } else {
            self.f[tri(s) + t]
        }
    }

    #[inline]
    pub fn rho_at(&self, t: usize, s: usize) -> f64 {
        if t >= s {
            self.r[tri(t) + s]
        } else {
            -self.r[tri(s) + t]
        }
    }

    fn chi_bar(&self, k: usize) -> f64 {
        let p = &self.config.params;
        p.m2 + 0.5 * p.coupling() * self.f_at(k, k)
    }

    /// Mass in the kernel equations at row `k`.
    fn local_mass(&self, k: usize) -> f64 {
        let p = &self.config.params;
        let mut m = self.chi_bar(k);
        if self.config.order == QmonOrder::Nlo {
            m += p.coupling() / p.components as f64 * self.f_at(k, k);
        }
        m
    }

    fn prepare(&mut self, len: usize) {
        for v in [
            &mut self.irho,
            &mut self.ifn,
            &mut self.acc,
            &mut self.a,
            &mut self.wir,
            &mut self.wif,
            &mut self.wsf,
            &mut self.wsr,
            &mut self.sf,
            &mut self.sr,
            &mut self.pm,
            &mut self.qm,
            &mut self.mr,
        ] {
            v.clear();
            v.resize(len, 0.0);
        }
    }

    /// Memory sums of row `k` into `pm − qm` (statistical) and `mr` (spectral).
    fn memory(&mut self, k: usize) {
        let p = self.config.params;
        let h = self.config.grid.dt;
        let le = p.coupling();
        let le2 = 0.5 * le;
        let pref = -le / p.components as f64;
        self.prepare(k + 1);
        let ok = tri(k);
        let (fk, rk) = (&self.f[ok..ok + k + 1], &self.r[ok..ok + k + 1]);
        let wz = |z: usize| if z == 0 || z == k { 0.5 * h } else { h };

        // chain, spectral part: descending rows
        for row in (0..=k).rev() {
            let ir = le * fk[row] * rk[row] - self.acc[row];
            self.irho[row] = ir;
            if ir == 0.0 {
                continue;
            }
            let o = tri(row);
            let (fr, rr) = (&self.f[o..o + row], &self.r[o..o + row]);
            let s1 = h * ir * le;
            let s2 = wz(row) * ir * le2;
            kernels::chain(self.simd, fr, rr, s1, s2, &mut self.acc[..row], &mut self.a[..row]);
            let d = self.f[o + row];
            self.a[row] += s2 * d * d;
        }
        for c in 0..=k {
            self.wir[c] = if c == 0 { 0.5 * h } else { h } * self.irho[c];
        }

        // chain statistical part, self-energy and memory sums: ascending rows
        for row in 0..=k {
            let o = tri(row);
            let (fr, rr) = (&self.f[o..o + row], &self.r[o..o + row]);
            let wrow = if row == 0 { 0.5 * h } else { h };
            let (x, y) = (fk[row], rk[row]);
            // Σ_ρ(k,row) is needed by the fused scatter below; it depends on sums of
            // columns c < row only, so gather first
            let [alo, bb, pd, qd] = kernels::gather(
                self.simd,
                fr,
                rr,
                [&self.wir[..row], &self.wif[..row], &self.wsr[..row], &self.wsf[..row]],
            );
            let ifr = le2 * (x * x - 0.25 * y * y) - (self.a[row] + le2 * alo) - le * bb;
            self.ifn[row] = ifr;
            let sfr = pref * (x * ifr - 0.25 * y * self.irho[row]);
            let srr = pref * (y * ifr + x * self.irho[row]);
            self.sf[row] = sfr;
            self.sr[row] = srr;
            self.wif[row] = wrow * ifr;
            self.wsf[row] = wrow * sfr;
            self.wsr[row] = wrow * srr;
            let diag = self.f[o + row];
            self.pm[row] += pd + wz(row) * srr * diag;
            self.qm[row] = -qd;
            let sp = wz(row) * srr;
            let sm = if row == k { 0.5 * h } else { h } * srr;
            if sp != 0.0 || sm != 0.0 {
                kernels::scatter(self.simd, fr, rr, sp, sm, &mut self.pm[..row], &mut self.mr[..row]);
            }
        }
    }

    /// Fill the next row.
    pub fn step(&mut self) -> Result<()> {
        if self.is_done() {
            return Err(Error::validation("grid exhausted"));
        }
        let k = self.rows - 1;
        let h = self.config.grid.dt;
        let h2 = h * h;
        let nlo = self.config.order == QmonOrder::Nlo && self.config.params.lambda != 0.0;
        if nlo {
            self.memory(k);
        }
        let m2 = self.local_mass(k);
        let (ok, om) = (tri(k), tri(k - 1));
        let mut fr = Vec::with_capacity(k + 2);
        let mut rr = Vec::with_capacity(k + 2);
        for l in 0..=k {
            let (fkl, rkl) = (self.f[ok + l], self.r[ok + l]);
            let (fml, rml) =
                if l < k { (self.f[om + l], self.r[om + l]) } else { (self.f[ok + k - 1], -self.r[ok + k - 1]) };
            let (mf, mrho) = if nlo { (self.pm[l] - self.qm[l], self.mr[l]) } else { (0.0, 0.0) };
            fr.push(2.0 * fkl - fml - h2 * (m2 * fkl + mf));
            rr.push(2.0 * rkl - rml - h2 * (m2 * rkl + mrho));
        }
        // ρ(k+1,k) = ρ(k,k−1) holds in exact arithmetic; assign it
        rr[k] = self.r[ok + k - 1];
        // diagonal from the equation in the second argument at t' = t_k
        let mut md = 0.0;
        if nlo {
            for z in 0..=k {
                let wk = if z == 0 || z == k { 0.5 * h } else { h };
                let wk1 = if z == 0 { 0.5 * h } else { h };
                md += wk * self.sr[z] * fr[z] + wk1 * self.sf[z] * rr[z];
            }
        }
        let fd = 2.0 * fr[k] - fr[k - 1] - h2 * (m2 * fr[k] + md);
        fr.push(fd);
        rr.push(0.0);
        if let Some(p) = fr.iter().chain(rr.iter()).position(|x| !x.is_finite()) {
            let l = p % (k + 2);
            return Err(Error::Blowup {
                step: k + 1,
                t: self.config.grid.t(k + 1),
                t_prime: self.config.grid.t(l),
                index: 0,
                what: "non-finite two-time function".into(),
            });
        }
        self.f.extend_from_slice(&fr);
        self.r.extend_from_slice(&rr);
        self.rows += 1;
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        while !self.is_done() {
            self.step()?;
        }
        Ok(())
    }

    /// Observables at step `k`; needs rows `k+1`.
    pub fn sample(&self, k: usize) -> Result<QmonSample> {
        if k + 1 >= self.rows {
            return Err(Error::validation(format!("step {k} not yet available")));
        }
        let p = &self.config.params;
        let h = self.config.grid.dt;
        let hb = p.hbar;
        let (fkk, fk1, f11) = (self.f_at(k, k), self.f_at(k + 1, k), self.f_at(k + 1, k + 1));
        let (fmm, fmk, f1m) = if k == 0 {
            (self.back[0], self.back[1], self.back[2])
        } else {
            (self.f_at(k - 1, k - 1), self.f_at(k, k - 1), self.f_at(k + 1, k - 1))
        };
        let p2 = (f11 - 2.0 * f1m + fmm) / (4.0 * h * h);
        let xp = (fk1 - fmk) / (2.0 * h);
        let det = fkk * f11 - fk1 * fk1;
        let w = self.rho_at(k + 1, k);
        // truncations may dip below the uncertainty bound by discretisation error;
        // ν is reported raw, the entropy of the clamped value
        let nu = det.max(0.0).sqrt() / w;
        let chi = p.m2 + 0.5 * p.coupling() * fkk;
        let x2 = hb * fkk;
        let energy = 0.5 * hb * p2 + 0.5 * p.m2 * x2 + p.lambda / 8.0 * x2 * x2;
        Ok(QmonSample {
            chi_bar: chi,
            x2,
            p2: hb * p2,
            xp: hb * xp,
            nu,
            entropy: p.components as f64 * mode_entropy(nu.max(0.5)),
            energy,
        })
    }

    /// Raw storage for checkpoints: rows filled and the two triangles.
    pub fn state(&self) -> (usize, &[f64], &[f64]) {
        (self.rows, &self.f, &self.r)
    }

    pub fn restore(&mut self, rows: usize, f: &[f64], r: &[f64]) -> Result<()> {
        if rows < 2 || rows > self.capacity || f.len() != tri(rows) || r.len() != tri(rows) {
            return Err(Error::validation("checkpoint does not match the run configuration"));
        }
        if f[..3] != self.f[..3] || r[..3] != self.r[..3] {
            return Err(Error::validation("checkpoint initial data differ from the configuration"));
        }
        self.f.clear();
        self.f.extend_from_slice(f);
        self.r.clear();
        self.r.extend_from_slice(r);
        self.rows = rows;
        Ok(())
    }

    /// Trajectory of every grid point: `chi_bar`, `x2`, `p2`, `xp`, `nu`, `entropy`, `energy`.
    pub fn trajectory(&self) -> Result<Trajectory> {
        let n = self.available();
        let mut cols: [Vec<f64>; 7] = Default::default();
        for k in 0..n {
            let s = self.sample(k)?;
            for (c, v) in cols.iter_mut().zip([s.chi_bar, s.x2, s.p2, s.xp, s.nu, s.entropy, s.energy]) {
                c.push(v);
            }
        }
        let mut grid = self.config.grid;
        grid.n_steps = n;
        let p = &self.config.params;
        let mut tr = Trajectory::new(grid)
            .with_provenance("model", "qmon")
            .with_provenance(
                "order",
                match self.config.order {
                    QmonOrder::Lo => "lo",
                    QmonOrder::Nlo => "nlo",
                },
            )
            .with_provenance("components", p.components)
            .with_provenance("m2", p.m2)
            .with_provenance("lambda", p.lambda)
            .with_provenance("hbar", p.hbar);
        let names = [
            ("chi_bar", "frequency^2"),
            ("x2", "length^2"),
            ("p2", "momentum^2"),
            ("xp", "action"),
            ("nu", "1"),
            ("entropy", "k_B"),
            ("energy", "energy"),
        ];
        for ((name, unit), c) in names.iter().zip(cols) {
            tr.push(name, unit, c)?;
        }
        Ok(tr)
    }
}

pub fn evolve_qmon(config: QmonConfig) -> Result<Trajectory> {
    let mut s = QmonSolver::new(config)?;
    s.run()?;
    s.trajectory()
}

pub fn evolve_lo(params: QmonParams, initial: QmonInitial, grid: TimeGrid) -> Result<Trajectory> {
    let mut c = QmonConfig::new(params, QmonOrder::Lo, grid);
    c.initial = initial;
    evolve_qmon(c)
}

pub fn evolve_nlo(params: QmonParams, initial: QmonInitial, grid: TimeGrid) -> Result<Trajectory> {
    let mut c = QmonConfig::new(params, QmonOrder::Nlo, grid);
    c.initial = initial;
    evolve_qmon(c)
}

/// Settings of the exact zero-angular-momentum solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadialOptions {
    /// Number of radial oscillator functions.
    pub basis: usize,
    /// Largest weight tolerated in the top tenth of the basis.
    pub edge_tol: f64,
}

impl Default for RadialOptions {
    fn default() -> Self {
        RadialOptions { basis: 200, edge_tol: 1e-12 }
    }
}

/// Exact dynamics of an O(N)-invariant state. The radial problem in `N` dimensions is
/// expanded in the `ℓ = 0` eigenfunctions of the isotropic oscillator whose ground state
/// is the initial vacuum, `L_n^{(N/2−1)}(ω r²/ħ) e^{−ωr²/2ħ}`. There `ωr²/ħ` is
/// tridiagonal, the quartic term pentadiagonal. Returns `x2 = ⟨r²⟩/N` and the energy.
pub fn evolve_exact_radial(
    params: &QmonParams,
    initial: &QmonInitial,
    grid: &TimeGrid,
    opts: RadialOptions,
) -> Result<Trajectory> {
    params.validate()?;
    let w2 = initial.omega2_continuum(params)?;
    if !(w2 > 0.0) {
        return Err(Error::validation("initial vacuum needs a positive frequency"));
    }
    let nb = opts.basis;
    if nb < 4 {
        return Err(Error::validation("radial basis needs at least 4 functions"));
    }
    let hb = params.hbar;
    let w = w2.sqrt();
    let n = params.components as f64;
    let alpha = 0.5 * n - 1.0;
    // s = ω r²/ħ on one extra row so that s² is exact in the kept block
    let m = nb + 1;
    let mut sm = DMatrix::<f64>::zeros(m, m);
    for i in 0..m {
        sm[(i, i)] = 2.0 * i as f64 + alpha + 1.0;
        if i + 1 < m {
            let v = -(((i + 1) as f64) * (i as f64 + alpha + 1.0)).sqrt();
            sm[(i, i + 1)] = v;
            sm[(i + 1, i)] = v;
        }
    }
    let s2 = &sm * &sm;
    let l = hb / w; // r² = l·s
    let mut h = DMatrix::<f64>::zeros(nb, nb);
    for i in 0..nb {
        for j in 0..nb {
            let mut v = 0.5 * (params.m2 - w2) * l * sm[(i, j)] + params.lambda / (8.0 * n) * l * l * s2[(i, j)];
            if i == j {
                v += hb * w * (2.0 * i as f64 + alpha + 1.0);
            }
            h[(i, j)] = v;
        }
    }
    let eig = SymmetricEigen::new(h.clone());
    // initial vector e₀ in the eigenbasis
    let c0: Vec<f64> = (0..nb).map(|j| eig.eigenvectors[(0, j)]).collect();
    let edge = nb - (nb / 10).max(2);
    let mut x2 = Vec::with_capacity(grid.n_steps);
    let mut energy = Vec::with_capacity(grid.n_steps);
    let mut norm = Vec::with_capacity(grid.n_steps);
    let mut psi = vec![Complex64::new(0.0, 0.0); nb];
    let mut spsi = vec![Complex64::new(0.0, 0.0); nb];
    let e_val: f64 = (0..nb).map(|j| c0[j] * c0[j] * eig.eigenvalues[j]).sum();
    for k in 0..grid.n_steps {
        let t = grid.t(k) - grid.t0;
        let ph: Vec<Complex64> = (0..nb).map(|j| Complex64::from_polar(c0[j], -eig.eigenvalues[j] * t / hb)).collect();
        for (i, p) in psi.iter_mut().enumerate() {
            let mut acc = Complex64::new(0.0, 0.0);
            for (j, z) in ph.iter().enumerate() {
                acc += eig.eigenvectors[(i, j)] * z;
            }
            *p = acc;
        }
        let tail: f64 = psi[edge..].iter().map(|z| z.norm_sqr()).sum();
        if tail > opts.edge_tol {
            return Err(Error::Reflection { t: grid.t(k) });
        }
        for i in 0..nb {
            let mut acc = Complex64::new(0.0, 0.0);
            for j in i.saturating_sub(1)..(i + 2).min(nb) {
                acc += sm[(i, j)] * psi[j];
            }
            spsi[i] = acc;
        }
        let r2: f64 = psi.iter().zip(&spsi).map(|(a, b)| (a.conj() * b).re).sum::<f64>() * l;
        x2.push(r2 / n);
        energy.push(e_val / n);
        norm.push(psi.iter().map(|z| z.norm_sqr()).sum());
    }
    let mut tr = Trajectory::new(*grid)
        .with_provenance("model", "qmon")
        .with_provenance("order", "exact")
        .with_provenance("components", params.components)
        .with_provenance("m2", params.m2)
        .with_provenance("lambda", params.lambda)
        .with_provenance("hbar", params.hbar)
        .with_provenance("basis", nb);
    tr.push("x2", "length^2", x2)?;
    tr.push("energy", "energy", energy)?;
    tr.push("norm", "1", norm)?;
    Ok(tr)
}

/// Row kernels of the memory sums. The wide path only changes instruction selection:
/// no fused multiply-add and the same lane-wise summation order, so both paths give
/// bit-identical results.
mod kernels {
    const L: usize = 8;

    pub fn detect() -> bool {
        #[cfg(target_arch = "x86_64")]
        {
            std::is_x86_feature_detected!("avx2")
        }
        #[cfg(not(target_arch = "x86_64"))]
        {
            false
        }
    }

    #[inline(always)]
    fn chain_body(fr: &[f64], rr: &[f64], s1: f64, s2: f64, acc: &mut [f64], a: &mut [f64]) {
        let n = acc.len();
        let (fr, rr, a) = (&fr[..n], &rr[..n], &mut a[..n]);
        for c in 0..n {
            let (x, y) = (fr[c], rr[c]);
            acc[c] += s1 * (x * y);
            a[c] += s2 * (x * x - 0.25 * (y * y));
        }
    }

    #[inline(always)]
    fn scatter_body(fr: &[f64], rr: &[f64], sp: f64, sm: f64, pm: &mut [f64], mr: &mut [f64]) {
        let n = pm.len();
        let (fr, rr, mr) = (&fr[..n], &rr[..n], &mut mr[..n]);
        for c in 0..n {
            pm[c] += sp * fr[c];
            mr[c] += sm * rr[c];
        }
    }

    /// `[Σ w0·(x²−y²/4), Σ w1·xy, Σ w2·x, Σ w3·y]`
    #[inline(always)]
    fn gather_body(fr: &[f64], rr: &[f64], w: [&[f64]; 4]) -> [f64; 4] {
        let n = w[0].len();
        let (fr, rr) = (&fr[..n], &rr[..n]);
        let (w0, w1, w2, w3) = (&w[0][..n], &w[1][..n], &w[2][..n], &w[3][..n]);
        let mut s = [[0.0f64; L]; 4];
        let m = n / L * L;
        let it = fr[..m]
            .chunks_exact(L)
            .zip(rr[..m].chunks_exact(L))
            .zip(w0[..m].chunks_exact(L).zip(w1[..m].chunks_exact(L)))
            .zip(w2[..m].chunks_exact(L).zip(w3[..m].chunks_exact(L)));
        for (((x, y), (a0, a1)), (a2, a3)) in it {
            let (x, y): (&[f64; L], &[f64; L]) = (x.try_into().unwrap(), y.try_into().unwrap());
            for j in 0..L {
                s[0][j] += a0[j] * (x[j] * x[j] - 0.25 * (y[j] * y[j]));
                s[1][j] += a1[j] * (x[j] * y[j]);
                s[2][j] += a2[j] * x[j];
                s[3][j] += a3[j] * y[j];
            }
        }
        finish(s, fr, rr, w, m)
    }

    /// Fold the lanes in a fixed tree and add the remainder from column `m`.
    #[inline(always)]
    fn finish(s: [[f64; L]; 4], fr: &[f64], rr: &[f64], w: [&[f64]; 4], m: usize) -> [f64; 4] {
        let mut out = [0.0; 4];
        for (o, v) in out.iter_mut().zip(&s) {
            *o = ((v[0] + v[1]) + (v[2] + v[3])) + ((v[4] + v[5]) + (v[6] + v[7]));
        }
        for c in m..w[0].len() {
            let (x, y) = (fr[c], rr[c]);
            out[0] += w[0][c] * (x * x - 0.25 * (y * y));
            out[1] += w[1][c] * (x * y);
            out[2] += w[2][c] * x;
            out[3] += w[3][c] * y;
        }
        out
    }

    #[cfg(target_arch = "x86_64")]
    mod wide {
        use std::arch::x86_64::*;

        use super::L;

        #[target_feature(enable = "avx2")]
        pub unsafe fn chain(fr: &[f64], rr: &[f64], s1: f64, s2: f64, acc: &mut [f64], a: &mut [f64]) {
            let n = acc.len();
            assert!(fr.len() >= n && rr.len() >= n && a.len() >= n);
            let m = n / 4 * 4;
            let (vs1, vs2, q) = (_mm256_set1_pd(s1), _mm256_set1_pd(s2), _mm256_set1_pd(0.25));
            let mut c = 0;
            while c < m {
                let x = _mm256_loadu_pd(fr.as_ptr().add(c));
                let y = _mm256_loadu_pd(rr.as_ptr().add(c));
                let pa = acc.as_mut_ptr().add(c);
                let pb = a.as_mut_ptr().add(c);
                _mm256_storeu_pd(pa, _mm256_add_pd(_mm256_loadu_pd(pa), _mm256_mul_pd(vs1, _mm256_mul_pd(x, y))));
                let qf = _mm256_sub_pd(_mm256_mul_pd(x, x), _mm256_mul_pd(q, _mm256_mul_pd(y, y)));
                _mm256_storeu_pd(pb, _mm256_add_pd(_mm256_loadu_pd(pb), _mm256_mul_pd(vs2, qf)));
                c += 4;
            }
            super::chain_body(&fr[m..], &rr[m..], s1, s2, &mut acc[m..], &mut a[m..])
        }

        #[target_feature(enable = "avx2")]
        pub unsafe fn scatter(fr: &[f64], rr: &[f64], sp: f64, sm: f64, pm: &mut [f64], mr: &mut [f64]) {
            let n = pm.len();
            assert!(fr.len() >= n && rr.len() >= n && mr.len() >= n);
            let m = n / 4 * 4;
            let (vp, vm) = (_mm256_set1_pd(sp), _mm256_set1_pd(sm));
            let mut c = 0;
            while c < m {
                let x = _mm256_loadu_pd(fr.as_ptr().add(c));
                let y = _mm256_loadu_pd(rr.as_ptr().add(c));
                let pa = pm.as_mut_ptr().add(c);
                let pb = mr.as_mut_ptr().add(c);
                _mm256_storeu_pd(pa, _mm256_add_pd(_mm256_loadu_pd(pa), _mm256_mul_pd(vp, x)));
                _mm256_storeu_pd(pb, _mm256_add_pd(_mm256_loadu_pd(pb), _mm256_mul_pd(vm, y)));
                c += 4;
            }
            super::scatter_body(&fr[m..], &rr[m..], sp, sm, &mut pm[m..], &mut mr[m..])
        }

        #[target_feature(enable = "avx2")]
        pub unsafe fn gather(fr: &[f64], rr: &[f64], w: [&[f64]; 4]) -> [f64; 4] {
            let n = w[0].len();
            assert!(fr.len() >= n && rr.len() >= n && w.iter().all(|v| v.len() == n));
            let m = n / L * L;
            let q = _mm256_set1_pd(0.25);
            let z = _mm256_setzero_pd();
            // lanes 0..4 and 4..8 of each of the four sums
            let mut s = [[z; 2]; 4];
            let mut c = 0;
            while c < m {
                for h in 0..2 {
                    let o = c + 4 * h;
                    let x = _mm256_loadu_pd(fr.as_ptr().add(o));
                    let y = _mm256_loadu_pd(rr.as_ptr().add(o));
                    let qf = _mm256_sub_pd(_mm256_mul_pd(x, x), _mm256_mul_pd(q, _mm256_mul_pd(y, y)));
                    let l0 = _mm256_loadu_pd(w[0].as_ptr().add(o));
                    let l1 = _mm256_loadu_pd(w[1].as_ptr().add(o));
                    let l2 = _mm256_loadu_pd(w[2].as_ptr().add(o));
                    let l3 = _mm256_loadu_pd(w[3].as_ptr().add(o));
                    s[0][h] = _mm256_add_pd(s[0][h], _mm256_mul_pd(l0, qf));
                    s[1][h] = _mm256_add_pd(s[1][h], _mm256_mul_pd(l1, _mm256_mul_pd(x, y)));
                    s[2][h] = _mm256_add_pd(s[2][h], _mm256_mul_pd(l2, x));
                    s[3][h] = _mm256_add_pd(s[3][h], _mm256_mul_pd(l3, y));
                }
                c += L;
            }
            let mut lanes = [[0.0f64; L]; 4];
            for (dst, src) in lanes.iter_mut().zip(&s) {
                _mm256_storeu_pd(dst.as_mut_ptr(), src[0]);
                _mm256_storeu_pd(dst.as_mut_ptr().add(4), src[1]);
            }
            super::finish(lanes, fr, rr, w, m)
        }
    }

    pub fn chain(simd: bool, fr: &[f64], rr: &[f64], s1: f64, s2: f64, acc: &mut [f64], a: &mut [f64]) {
        #[cfg(target_arch = "x86_64")]
        if simd {
            // SAFETY: `simd` is only set when the CPU reports AVX2
            return unsafe { wide::chain(fr, rr, s1, s2, acc, a) };
        }
        let _ = simd;
        chain_body(fr, rr, s1, s2, acc, a)
    }

    pub fn scatter(simd: bool, fr: &[f64], rr: &[f64], sp: f64, sm: f64, pm: &mut [f64], mr: &mut [f64]) {
        #[cfg(target_arch = "x86_64")]
        if simd {
            // SAFETY: as above
            return unsafe { wide::scatter(fr, rr, sp, sm, pm, mr) };
        }
        let _ = simd;
        scatter_body(fr, rr, sp, sm, pm, mr)
    }

    pub fn gather(simd: bool, fr: &[f64], rr: &[f64], w: [&[f64]; 4]) -> [f64; 4] {
        #[cfg(target_arch = "x86_64")]
        if simd {
            // SAFETY: as above
            return unsafe { wide::gather(fr, rr, w) };
        }
        let _ = simd;
        gather_body(fr, rr, w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observables::linear_fit;
    use proptest::prelude::*;

    fn bisect_gap(m2: f64, lambda: f64) -> f64 {
        let g = |x: f64| x - m2 - lambda / (4.0 * x.sqrt());
        let (mut lo, mut hi) = (1e-12, 10.0 + m2.abs() + lambda);
        for _ in 0..400 {
            let mid = 0.5 * (lo + hi);
            if g(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    fn grid(dt: f64, n: usize) -> TimeGrid {
        TimeGrid::new(0.0, dt, n).unwrap()
    }

    fn quench(m2: f64) -> QmonInitial {
        QmonInitial::GapVacuum { m2: Some(m2), lambda: None }
    }

    #[test]
    fn gap_matches_bisection() {
        let chi = gap_static(&QmonParams::new(20, 1.0, 1.0)).unwrap();
        assert!((chi - bisect_gap(1.0, 1.0)).abs() < 1e-12);
        assert!((chi - 1.2258).abs() < 1e-4);
        for (m2, l) in [(0.1, 3.0), (-0.5, 2.0), (4.0, 0.01), (0.0, 1.0)] {
            let c = gap_static(&QmonParams::new(1, m2, l)).unwrap();
            assert!((c - bisect_gap(m2, l)).abs() < 1e-12 * c.max(1.0), "{m2} {l}");
        }
    }

    #[test]
    fn gap_without_coupling_is_the_bare_mass() {
        assert_eq!(gap_static(&QmonParams::new(4, 1.0, 0.0)).unwrap(), 1.0);
        assert_eq!(gap_static(&QmonParams::new(4, 0.37, 0.0)).unwrap(), 0.37);
        assert!(matches!(gap_static(&QmonParams::new(4, -1.0, 0.0)), Err(Error::Range(_))));
    }

    #[test]
    fn strong_coupling_gap_grows_as_two_thirds_power() {
        let ls = [1e6, 1e7, 1e8];
        let x: Vec<f64> = ls.iter().map(|l: &f64| l.ln()).collect();
        let y: Vec<f64> = ls.iter().map(|&l| gap_static(&QmonParams::new(1, 1.0, l)).unwrap().ln()).collect();
        let slope = linear_fit(&x, &y).0;
        assert!((slope - 2.0 / 3.0).abs() < 0.01, "{slope}");
    }

    #[test]
    fn invalid_parameters() {
        assert!(QmonParams::new(0, 1.0, 1.0).validate().is_err());
        assert!(QmonParams::new(1, 1.0, -1.0).validate().is_err());
        assert!(QmonParams::new(1, f64::NAN, 1.0).validate().is_err());
        assert!(discrete_vacuum(1.0, 2.5).is_err());
    }

    #[test]
    fn lattice_gap_approaches_the_static_gap() {
        let p = QmonParams::new(20, 1.0, 1.0);
        let chi = gap_static(&p).unwrap();
        let e1 = gap_discrete(&p, 0.02).unwrap() - chi;
        let e2 = gap_discrete(&p, 0.01).unwrap() - chi;
        assert!((e1 / e2 - 4.0).abs() < 0.05, "{e1} {e2}");
        // the lattice gap solves its own equation
        let c = gap_discrete(&p, 0.05).unwrap();
        let (a, _) = discrete_vacuum(c, 0.05).unwrap();
        assert!((c - 1.0 - 0.5 * a).abs() < 1e-13);
    }

    #[test]
    fn lo_vacuum_is_stationary() {
        let p = QmonParams::new(20, 1.0, 1.0);
        let t = evolve_lo(p, QmonInitial::default(), grid(0.02, 2000)).unwrap();
        let chi = t.column("chi_bar").unwrap();
        assert!(
            chi.iter().all(|c| (c - chi[0]).abs() < 1e-12),
            "{}",
            chi.iter().fold(0.0f64, |m, c| m.max((c - chi[0]).abs()))
        );
        let s = t.column("entropy").unwrap();
        assert!(s.iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn lo_quench_keeps_entropy_and_energy() {
        let p = QmonParams::new(20, 1.0, 1.0);
        let run = |dt: f64| evolve_lo(p, quench(3.0), grid(dt, (20.0 / dt) as usize)).unwrap();
        let (a, b) = (run(0.01), run(0.005));
        let s = a.column("entropy").unwrap();
        assert!(s.iter().all(|v| (v - s[0]).abs() < 1e-8));
        let nu = a.column("nu").unwrap();
        assert!(nu.iter().all(|v| (v - 0.5).abs() < 1e-10));
        let drift = |t: &Trajectory| {
            let e = t.column("energy").unwrap();
            e.iter().map(|v| (v - e[0]).abs()).fold(0.0, f64::max) / e[0].abs()
        };
        let (da, db) = (drift(&a), drift(&b));
        assert!(da < 1e-4, "{da}");
        assert!(da / db > 3.5, "{da} {db}");
        let chi = a.column("chi_bar").unwrap();
        assert!(chi.iter().any(|c| (c - chi[0]).abs() > 0.1));
    }

    #[test]
    fn nlo_without_coupling_is_free_motion() {
        let p = QmonParams::new(5, 1.0, 0.0);
        let g = grid(0.01, 400);
        let a = evolve_nlo(p, QmonInitial::Vacuum { omega2: 2.0 }, g).unwrap();
        let b = evolve_lo(p, QmonInitial::Vacuum { omega2: 2.0 }, g).unwrap();
        assert_eq!(a.column("x2"), b.column("x2"));
        let x2 = a.column("x2").unwrap();
        for (k, v) in x2.iter().enumerate() {
            let t = g.t(k);
            // leapfrog phase error only
            let exact = 0.5 / 2f64.sqrt() * t.cos().powi(2) + 0.5 * 2f64.sqrt() * t.sin().powi(2);
            assert!((v - exact).abs() < 1e-4, "{t} {v} {exact}");
        }
    }

    #[test]
    fn exact_radial_free_motion_is_closed_form() {
        let w0 = 2.0f64;
        for n in [1usize, 3, 20] {
            let p = QmonParams::new(n, 1.0, 0.0);
            let g = grid(0.05, 400);
            let t = evolve_exact_radial(&p, &QmonInitial::Vacuum { omega2: w0 * w0 }, &g, RadialOptions::default())
                .unwrap();
            for (k, v) in t.column("x2").unwrap().iter().enumerate() {
                let s = g.t(k);
                let exact = 0.5 / w0 * s.cos().powi(2) + 0.5 * w0 * s.sin().powi(2);
                assert!((v - exact).abs() < 1e-10, "{n} {s} {v} {exact}");
            }
            assert!(t.column("norm").unwrap().iter().all(|v| (v - 1.0).abs() < 1e-12));
        }
    }

    /// Sinc grid in one dimension with exact propagation in its eigenbasis.
    fn grid_oracle(m2: f64, lambda: f64, omega0: f64, times: &[f64]) -> Vec<f64> {
        let (n, l) = (241usize, 9.0);
        let dx = 2.0 * l / (n - 1) as f64;
        let xs: Vec<f64> = (0..n).map(|i| -l + i as f64 * dx).collect();
        let mut h = nalgebra::DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let d = i as f64 - j as f64;
                h[(i, j)] = if i == j {
                    std::f64::consts::PI.powi(2) / (6.0 * dx * dx)
                        + 0.5 * m2 * xs[i].powi(2)
                        + lambda / 8.0 * xs[i].powi(4)
                } else {
                    (-1f64).powi(d as i32) / (dx * dx * d * d)
                };
            }
        }
        let eig = nalgebra::SymmetricEigen::new(h);
        let mut psi0: Vec<f64> = xs.iter().map(|x| (-0.5 * omega0 * x * x).exp()).collect();
        let norm = psi0.iter().map(|v| v * v).sum::<f64>().sqrt();
        psi0.iter_mut().for_each(|v| *v /= norm);
        let c: Vec<f64> = (0..n).map(|j| (0..n).map(|i| eig.eigenvectors[(i, j)] * psi0[i]).sum()).collect();
        times
            .iter()
            .map(|&t| {
                (0..n)
                    .map(|i| {
                        let z: Complex64 = (0..n)
                            .map(|j| eig.eigenvectors[(i, j)] * Complex64::from_polar(c[j], -eig.eigenvalues[j] * t))
                            .sum();
                        z.norm_sqr() * xs[i] * xs[i]
                    })
                    .sum()
            })
            .collect()
    }

    #[test]
    fn exact_radial_quartic_matches_a_position_grid() {
        let p = QmonParams::new(1, 1.0, 1.0);
        let g = grid(0.25, 40);
        let t = evolve_exact_radial(&p, &QmonInitial::Vacuum { omega2: 4.0 }, &g, RadialOptions::default()).unwrap();
        let times: Vec<f64> = (0..g.n_steps).map(|k| g.t(k)).collect();
        let oracle = grid_oracle(1.0, 1.0, 2.0, &times);
        for (a, b) in t.column("x2").unwrap().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-8, "{a} {b}");
        }
    }

    #[test]
    fn exact_radial_detects_a_small_basis() {
        let p = QmonParams::new(3, 1.0, 50.0);
        let r = evolve_exact_radial(
            &p,
            &QmonInitial::Vacuum { omega2: 1.0 },
            &grid(0.1, 50),
            RadialOptions { basis: 12, edge_tol: 1e-12 },
        );
        assert!(matches!(r, Err(Error::Reflection { .. })));
    }

    #[test]
    fn nlo_is_closer_to_exact_than_lo() {
        let p = QmonParams::new(10, 1.0, 1.0);
        let g = grid(0.01, 300);
        let init = quench(2.0);
        let ex = evolve_exact_radial(&p, &init, &g, RadialOptions::default()).unwrap();
        let lo = evolve_lo(p, init, g).unwrap();
        let nlo = evolve_nlo(p, init, g).unwrap();
        let err = |t: &Trajectory| {
            t.column("x2").unwrap().iter().zip(ex.column("x2").unwrap()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        };
        let (el, en) = (err(&lo), err(&nlo));
        assert!(en < 0.5 * el, "lo {el} nlo {en}");
    }

    #[test]
    fn nlo_correction_scales_as_inverse_n() {
        let g = grid(0.02, 250);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for n in [25usize, 50, 100, 200] {
            let p = QmonParams::new(n, 1.0, 1.0);
            let lo = evolve_lo(p, quench(2.0), g).unwrap();
            let nlo = evolve_nlo(p, quench(2.0), g).unwrap();
            let d = lo
                .column("chi_bar")
                .unwrap()
                .iter()
                .zip(nlo.column("chi_bar").unwrap())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            x.push((n as f64).ln());
            y.push(d.ln());
        }
        let slope = linear_fit(&x, &y).0;
        assert!((slope + 1.0).abs() < 0.1, "{slope}");
    }

    #[test]
    fn wide_and_portable_kernels_agree_bitwise() {
        let cfg = QmonConfig {
            initial: quench(2.0),
            ..QmonConfig::new(QmonParams::new(7, 1.0, 1.5), QmonOrder::Nlo, grid(0.02, 203))
        };
        let mut a = QmonSolver::new(cfg.clone()).unwrap();
        let mut b = QmonSolver::new(cfg).unwrap();
        b.simd = false;
        a.run().unwrap();
        b.run().unwrap();
        assert_eq!(
            a.state().1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.state().1.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(
            a.state().2.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.state().2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn restore_continues_identically() {
        let cfg = QmonConfig {
            initial: quench(2.0),
            ..QmonConfig::new(QmonParams::new(4, 1.0, 1.0), QmonOrder::Nlo, grid(0.02, 150))
        };
        let mut full = QmonSolver::new(cfg.clone()).unwrap();
        full.run().unwrap();
        let mut part = QmonSolver::new(cfg.clone()).unwrap();
        for _ in 0..60 {
            part.step().unwrap();
        }
        let (rows, f, r) = part.state();
        let mut resumed = QmonSolver::new(cfg).unwrap();
        resumed.restore(rows, f, r).unwrap();
        resumed.run().unwrap();
        assert_eq!(full.trajectory().unwrap(), resumed.trajectory().unwrap());
        assert!(resumed.restore(1, &[], &[]).is_err());
    }

    #[test]
    fn storage_budget_is_enforced() {
        let mut cfg = QmonConfig::new(QmonParams::new(4, 1.0, 1.0), QmonOrder::Nlo, grid(0.01, 100_000));
        cfg.memory_budget = 1 << 30;
        assert!(matches!(QmonSolver::new(cfg), Err(Error::Resource(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn gap_solves_its_equation(m2 in -2.0f64..5.0, lambda in 0.01f64..50.0) {
            let p = QmonParams::new(3, m2, lambda);
            let c = gap_static(&p).unwrap();
            prop_assert!(c > 0.0);
            prop_assert!((c - m2 - lambda / (4.0 * c.sqrt())).abs() < 1e-12 * c.max(1.0));
        }

        #[test]
        fn lo_keeps_the_symplectic_invariant(m0 in 0.2f64..4.0, lambda in 0.0f64..5.0, n in 1usize..50) {
            let p = QmonParams::new(n, 1.0, lambda);
            let t = evolve_lo(p, quench(m0), grid(0.02, 300)).unwrap();
            prop_assert!(t.column("nu").unwrap().iter().all(|v| (v - 0.5).abs() < 1e-9));
        }

        #[test]
        fn kernels_keep_their_symmetry(n in 1usize..30, m0 in 0.5f64..3.0) {
            let cfg = QmonConfig { initial: quench(m0), ..QmonConfig::new(QmonParams::new(n, 1.0, 1.0), QmonOrder::Nlo, grid(0.05, 40)) };
            let mut s = QmonSolver::new(cfg).unwrap();
            s.run().unwrap();
            for t in 0..s.current() {
                prop_assert_eq!(s.rho_at(t, t), 0.0);
                for u in 0..t {
                    prop_assert_eq!(s.f_at(t, u), s.f_at(u, t));
                    prop_assert_eq!(s.rho_at(t, u), -s.rho_at(u, t));
                }
            }
        }
    }
}
