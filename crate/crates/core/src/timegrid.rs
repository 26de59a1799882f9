//! Uniform time grids, triangular two-time storage and the causal
//! predictor-corrector used by the two-time solvers.
//!
//! Every two-point function is split into a statistical part `F` and a
//! spectral part `ρ`, both real in the real-field basis used throughout.
//! Only the lower triangle `l ≤ k` is stored; the upper triangle follows
//! from `F(t,t')ᵀ = F(t',t)` and `ρ(t,t')ᵀ = −ρ(t',t)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dense;
use crate::error::{Error, Result};

/// Default memory budget for two-time storage.
pub const DEFAULT_MEMORY_BUDGET: u64 = 4 << 30;

/// Uniform time grid. `n_steps` is the number of stored time points,
/// `t_k = t0 + k·dt` for `k < n_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t0: f64,
    pub dt: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, dt: f64, n_steps: usize) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::validation(format!("dt must be positive and finite, got {dt}")));
        }
        if !t0.is_finite() {
            return Err(Error::validation("t0 must be finite"));
        }
        if n_steps < 1 {
            return Err(Error::validation("n_steps must be at least 1"));
        }
        Ok(TimeGrid { t0, dt, n_steps })
    }

    /// Grid covering `[t0, t0 + t_end]` inclusive.
    pub fn spanning(t0: f64, t_end: f64, dt: f64) -> Result<Self> {
        if !(t_end >= 0.0) {
            return Err(Error::validation("final time must be nonnegative"));
        }
        let steps = (t_end / dt).round();
        if !steps.is_finite() || steps > 1e12 {
            return Err(Error::resource(format!("grid with {steps} steps")));
        }
        Self::new(t0, dt, steps as usize + 1)
    }

    #[inline]
    pub fn t(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.n_steps).map(|k| self.t(k)).collect()
    }

    /// Same interval at half the step.
    pub fn refined(&self) -> TimeGrid {
        TimeGrid { t0: self.t0, dt: self.dt / 2.0, n_steps: 2 * (self.n_steps - 1) + 1 }
    }
}

#[inline]
fn tri(k: usize) -> usize {
    k * (k + 1) / 2
}

/// Lower-triangular storage of `F(t_k, t_l)` and `ρ(t_k, t_l)`, `l ≤ k`,
/// as `dim × dim` row-major blocks with `dim = site_count · field_index_count`.
#[derive(Debug, Clone)]
pub struct TwoTimeKernel {
    site_count: usize,
    field_index_count: usize,
    dim: usize,
    capacity: usize,
    filled: usize,
    f: Vec<f64>,
    rho: Vec<f64>,
}

/// Bytes needed to store a kernel on `n_steps` points.
pub fn kernel_bytes(n_steps: usize, site_count: usize, field_index_count: usize) -> Option<u64> {
    let dim = (site_count as u64).checked_mul(field_index_count as u64)?;
    let pairs = (n_steps as u64).checked_mul(n_steps as u64 + 1)? / 2;
    pairs.checked_mul(dim * dim)?.checked_mul(2 * 8)
}

pub fn allocate_kernel(
    grid: &TimeGrid,
    site_count: usize,
    field_index_count: usize,
    budget: u64,
) -> Result<TwoTimeKernel> {
    if site_count < 1 || field_index_count < 1 {
        return Err(Error::validation("kernel needs at least one site and one field index"));
    }
    let bytes = kernel_bytes(grid.n_steps, site_count, field_index_count)
        .ok_or_else(|| Error::resource("two-time storage size overflows"))?;
    if bytes > budget {
        return Err(Error::resource(format!("two-time storage needs {bytes} bytes, budget is {budget}")));
    }
    let dim = site_count * field_index_count;
    let len = tri(grid.n_steps) * dim * dim;
    let alloc = |what: &str| -> Result<Vec<f64>> {
        let mut v = Vec::new();
        v.try_reserve_exact(len).map_err(|_| Error::resource(format!("cannot allocate {what} storage")))?;
        v.resize(len, 0.0);
        Ok(v)
    };
    Ok(TwoTimeKernel {
        site_count,
        field_index_count,
        dim,
        capacity: grid.n_steps,
        filled: 0,
        f: alloc("F")?,
        rho: alloc("rho")?,
    })
}

impl TwoTimeKernel {
    pub fn site_count(&self) -> usize {
        self.site_count
    }
    pub fn field_index_count(&self) -> usize {
        self.field_index_count
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    /// Number of time points the storage can hold.
    pub fn capacity(&self) -> usize {
        self.capacity
    }
    /// Number of completed rows.
    pub fn filled(&self) -> usize {
        self.filled
    }
    pub fn set_filled(&mut self, rows: usize) {
        assert!(rows <= self.capacity);
        self.filled = rows;
    }
    /// Number of stored time pairs per index block.
    pub fn stored_pairs(&self) -> usize {
        tri(self.capacity)
    }

    #[inline]
    fn offset(&self, k: usize, l: usize) -> usize {
        debug_assert!(l <= k && k < self.capacity);
        (tri(k) + l) * self.dim * self.dim
    }

    #[inline]
    pub fn f(&self, k: usize, l: usize) -> &[f64] {
        let o = self.offset(k, l);
        &self.f[o..o + self.dim * self.dim]
    }
    #[inline]
    pub fn rho(&self, k: usize, l: usize) -> &[f64] {
        let o = self.offset(k, l);
        &self.rho[o..o + self.dim * self.dim]
    }
    #[inline]
    pub fn f_mut(&mut self, k: usize, l: usize) -> &mut [f64] {
        let o = self.offset(k, l);
        let d2 = self.dim * self.dim;
        &mut self.f[o..o + d2]
    }
    #[inline]
    pub fn rho_mut(&mut self, k: usize, l: usize) -> &mut [f64] {
        let o = self.offset(k, l);
        let d2 = self.dim * self.dim;
        &mut self.rho[o..o + d2]
    }

    /// Blocks `(k, 0..=k)` of F, contiguous.
    pub fn f_row(&self, k: usize) -> &[f64] {
        let d2 = self.dim * self.dim;
        &self.f[tri(k) * d2..tri(k + 1) * d2]
    }
    pub fn rho_row(&self, k: usize) -> &[f64] {
        let d2 = self.dim * self.dim;
        &self.rho[tri(k) * d2..tri(k + 1) * d2]
    }
    pub fn rows_mut(&mut self, k: usize) -> (&mut [f64], &mut [f64]) {
        let d2 = self.dim * self.dim;
        let r = tri(k) * d2..tri(k + 1) * d2;
        (&mut self.f[r.clone()], &mut self.rho[r])
    }

    /// Single entry with the symmetry relations applied for `l > k`.
    pub fn f_entry(&self, k: usize, l: usize, a: usize, b: usize) -> f64 {
        if l <= k {
            self.f(k, l)[a * self.dim + b]
        } else {
            self.f(l, k)[b * self.dim + a]
        }
    }
    pub fn rho_entry(&self, k: usize, l: usize, a: usize, b: usize) -> f64 {
        if l <= k {
            self.rho(k, l)[a * self.dim + b]
        } else {
            -self.rho(l, k)[b * self.dim + a]
        }
    }

    /// Largest violation of the equal-time exchange relations over filled rows:
    /// `F(t,t)` symmetric and `ρ(t,t)` antisymmetric.
    pub fn equal_time_asymmetry(&self) -> f64 {
        let n = self.dim;
        let mut worst = 0.0f64;
        for k in 0..self.filled {
            let f = self.f(k, k);
            let r = self.rho(k, k);
            for a in 0..n {
                for b in 0..n {
                    worst = worst.max((f[a * n + b] - f[b * n + a]).abs());
                    worst = worst.max((r[a * n + b] + r[b * n + a]).abs());
                }
            }
        }
        worst
    }

    /// Raw storage for checkpointing.
    pub fn raw(&self) -> (&[f64], &[f64]) {
        let used = tri(self.filled) * self.dim * self.dim;
        (&self.f[..used], &self.rho[..used])
    }

    /// Restore rows from raw storage written by [`raw`](Self::raw).
    pub fn restore(&mut self, rows: usize, f: &[f64], rho: &[f64]) -> Result<()> {
        let used = tri(rows) * self.dim * self.dim;
        if rows > self.capacity || f.len() != used || rho.len() != used {
            return Err(Error::validation("checkpoint kernel does not match the grid"));
        }
        self.f[..used].copy_from_slice(f);
        self.rho[..used].copy_from_slice(rho);
        self.filled = rows;
        Ok(())
    }
}

/// Self-energy blocks `Σ(t_k, t_z)` for `z = 0..=k`.
#[derive(Debug, Clone, Default)]
pub struct SelfEnergyRow {
    pub dim: usize,
    pub len: usize,
    pub f: Vec<f64>,
    pub rho: Vec<f64>,
}

impl SelfEnergyRow {
    pub fn new(dim: usize) -> Self {
        SelfEnergyRow { dim, len: 0, f: Vec::new(), rho: Vec::new() }
    }

    /// Resize to `len` zeroed blocks.
    pub fn reset(&mut self, len: usize) {
        let d2 = self.dim * self.dim;
        self.len = len;
        self.f.clear();
        self.f.resize(len * d2, 0.0);
        self.rho.clear();
        self.rho.resize(len * d2, 0.0);
    }

    #[inline]
    pub fn f(&self, z: usize) -> &[f64] {
        let d2 = self.dim * self.dim;
        &self.f[z * d2..(z + 1) * d2]
    }
    #[inline]
    pub fn rho(&self, z: usize) -> &[f64] {
        let d2 = self.dim * self.dim;
        &self.rho[z * d2..(z + 1) * d2]
    }
    pub fn blocks_mut(&mut self, z: usize) -> (&mut [f64], &mut [f64]) {
        let d2 = self.dim * self.dim;
        (&mut self.f[z * d2..(z + 1) * d2], &mut self.rho[z * d2..(z + 1) * d2])
    }
}

/// Trapezoid weight of node `z` on `[t_a, t_b]`.
#[inline(always)]
pub fn trapezoid_weight(dt: f64, a: usize, b: usize, z: usize) -> f64 {
    if b <= a || z < a || z > b {
        0.0
    } else if z == a || z == b {
        0.5 * dt
    } else {
        dt
    }
}

/// Optional finite history: memory integrals then start at `t_{k−window}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct HistoryWindow(pub Option<usize>);

impl HistoryWindow {
    #[inline]
    fn start(&self, k: usize) -> usize {
        match self.0 {
            Some(w) => k.saturating_sub(w),
            None => 0,
        }
    }
}

/// Memory integrals of row `k` before the symplectic factor:
/// `a(l) = ∫₀^{t_k} Σ_ρ(t_k,z) F(z,t_l)`, `b(l) = ∫₀^{t_l} Σ_F(t_k,z) ρ(z,t_l)`,
/// `c(l) = ∫_{t_l}^{t_k} Σ_ρ(t_k,z) ρ(z,t_l)`, packed as `mf = a − b`, `mr = c`.
#[derive(Debug, Clone, Default)]
pub struct MemoryRow {
    pub dim: usize,
    pub len: usize,
    pub f: Vec<f64>,
    pub rho: Vec<f64>,
}

impl MemoryRow {
    pub fn new(dim: usize) -> Self {
        MemoryRow { dim, len: 0, f: Vec::new(), rho: Vec::new() }
    }
    fn reset(&mut self, len: usize) {
        let d2 = self.dim * self.dim;
        self.len = len;
        self.f.clear();
        self.f.resize(len * d2, 0.0);
        self.rho.clear();
        self.rho.resize(len * d2, 0.0);
    }
    #[inline]
    pub fn f(&self, l: usize) -> &[f64] {
        let d2 = self.dim * self.dim;
        &self.f[l * d2..(l + 1) * d2]
    }
    #[inline]
    pub fn rho(&self, l: usize) -> &[f64] {
        let d2 = self.dim * self.dim;
        &self.rho[l * d2..(l + 1) * d2]
    }
}

/// Rows per reduction chunk. Fixed so that the summation tree does not
/// depend on the number of worker threads.
const CHUNK_ROWS: usize = 32;

/// Partial sums of the memory integrals from rows `z ∈ [z0, z1)`.
/// Each row is streamed once: entries `(z, l<z)` feed targets `l` through
/// the column part and target `z` through the transposed row part.
#[inline(always)]
fn memory_chunk_impl(
    n: usize,
    kernel: &TwoTimeKernel,
    sigma: &SelfEnergyRow,
    k: usize,
    dt: f64,
    window: HistoryWindow,
    z0: usize,
    z1: usize,
    acc_f: &mut [f64],
    acc_r: &mut [f64],
) {
    let d2 = n * n;
    let s0 = window.start(k);
    let mut tmp = [0.0f64; 64];
    let tmp = if d2 <= 64 { &mut tmp[..d2] } else { unreachable!() };
    for z in z0..z1 {
        let frow = kernel.f_row(z);
        let rrow = kernel.rho_row(z);
        let sr = sigma.rho(z);
        let sf = sigma.f(z);
        let wk = trapezoid_weight(dt, s0, k, z);
        // column part: entries (z, l) with l ≤ z feed targets l
        for l in 0..=z {
            let fb = &frow[l * d2..(l + 1) * d2];
            let rb = &rrow[l * d2..(l + 1) * d2];
            let out_f = &mut acc_f[l * d2..(l + 1) * d2];
            let out_r = &mut acc_r[l * d2..(l + 1) * d2];
            if wk != 0.0 {
                dense::matmul_acc(n, wk, sr, fb, out_f);
            }
            let wc = trapezoid_weight(dt, l.max(s0), k, z);
            if wc != 0.0 {
                dense::matmul_acc(n, wc, sr, rb, out_r);
            }
            if l == z {
                let wb = trapezoid_weight(dt, s0, l, z);
                if wb != 0.0 {
                    dense::matmul_acc(n, -wb, sf, rb, out_f);
                }
            }
        }
        // row part: entries (z, y) with y < z feed target z transposed
        let out_f = &mut acc_f[z * d2..(z + 1) * d2];
        for v in tmp.iter_mut() {
            *v = 0.0;
        }
        for y in s0..z {
            let wk = trapezoid_weight(dt, s0, k, y);
            let wb = trapezoid_weight(dt, s0, z, y);
            let fb = &frow[y * d2..(y + 1) * d2];
            let rb = &rrow[y * d2..(y + 1) * d2];
            // Σ_ρ(k,y) F(y,z) = Σ_ρ(k,y) F(z,y)ᵀ ; −Σ_F(k,y) ρ(y,z) = +Σ_F(k,y) ρ(z,y)ᵀ
            if wk != 0.0 {
                dense::matmul_acc_bt(n, wk, sigma.rho(y), fb, tmp);
            }
            if wb != 0.0 {
                dense::matmul_acc_bt(n, wb, sigma.f(y), rb, tmp);
            }
        }
        for (o, t) in out_f.iter_mut().zip(tmp.iter()) {
            *o += *t;
        }
    }
}

fn memory_chunk<const N: usize>(
    kernel: &TwoTimeKernel,
    sigma: &SelfEnergyRow,
    k: usize,
    dt: f64,
    window: HistoryWindow,
    z0: usize,
    z1: usize,
    acc_f: &mut [f64],
    acc_r: &mut [f64],
) {
    memory_chunk_impl(N, kernel, sigma, k, dt, window, z0, z1, acc_f, acc_r)
}

fn memory_chunk_dyn(
    kernel: &TwoTimeKernel,
    sigma: &SelfEnergyRow,
    k: usize,
    dt: f64,
    window: HistoryWindow,
    z0: usize,
    z1: usize,
    acc_f: &mut [f64],
    acc_r: &mut [f64],
) {
    memory_chunk_impl(kernel.dim(), kernel, sigma, k, dt, window, z0, z1, acc_f, acc_r)
}

/// Evaluate the memory integrals of row `k` for all `l ≤ k` (rows `0..=k`
/// of the kernel must be present). Result independent of thread count.
pub fn memory_integrals(
    kernel: &TwoTimeKernel,
    sigma: &SelfEnergyRow,
    k: usize,
    dt: f64,
    window: HistoryWindow,
    out: &mut MemoryRow,
) {
    let n = kernel.dim();
    assert!(n * n <= 64, "block dimension {n} too large for the memory kernel");
    assert!(sigma.len > k);
    let d2 = n * n;
    let len = k + 1;
    out.dim = n;
    out.reset(len);
    let s0 = window.start(k);
    let chunks: Vec<(usize, usize)> = (s0..len).step_by(CHUNK_ROWS).map(|a| (a, (a + CHUNK_ROWS).min(len))).collect();
    let run = |&(z0, z1): &(usize, usize)| {
        // rows z ≥ z0 only touch targets l ≤ z < z1
        let mut af = vec![0.0; z1 * d2];
        let mut ar = vec![0.0; z1 * d2];
        let f = match n {
            1 => memory_chunk::<1>,
            2 => memory_chunk::<2>,
            4 => memory_chunk::<4>,
            6 => memory_chunk::<6>,
            8 => memory_chunk::<8>,
            _ => memory_chunk_dyn,
        };
        f(kernel, sigma, k, dt, window, z0, z1, &mut af, &mut ar);
        (af, ar)
    };
    let partials: Vec<(Vec<f64>, Vec<f64>)> =
        if chunks.len() > 1 { chunks.par_iter().map(run).collect() } else { chunks.iter().map(run).collect() };
    // fixed-order reduction
    for (af, ar) in &partials {
        for (o, v) in out.f.iter_mut().zip(af.iter()) {
            *o += *v;
        }
        for (o, v) in out.rho.iter_mut().zip(ar.iter()) {
            *o += *v;
        }
    }
}

/// A system of first-order two-time equations
/// `∂_t F(t,t') = Ε[M(t) F(t,t') + ∫ Σ_ρ F − ∫ Σ_F ρ]`,
/// `∂_t ρ(t,t') = Ε[M(t) ρ(t,t') + ∫ Σ_ρ ρ]`
/// on pairs of canonical components, with Ε the symplectic form.
///
/// An optional auxiliary vector `x` (a mean field, say) obeys `dx/dt = Ε[G(x, C) x + m_x]`
/// with `C = F(t,t)` and a memory forcing `m_x` supplied by the system.
pub trait CausalSystem {
    fn dim(&self) -> usize;

    /// Length of the auxiliary vector; must be even.
    fn aux_len(&self) -> usize {
        0
    }

    fn aux(&self, _k: usize) -> &[f64] {
        &[]
    }

    fn set_aux(&mut self, _k: usize, _v: &[f64]) {}

    /// Local generator `M` for auxiliary state `aux` and equal-time covariance `c`.
    fn local_matrix(&self, aux: &[f64], c: &[f64], m: &mut [f64]);

    /// Generator `G` of the auxiliary equation.
    fn aux_matrix(&self, _aux: &[f64], _c: &[f64], _g: &mut [f64]) {}

    /// Fill `Σ(t_k, t_z)` for `z ≤ k`. Returns `false` when the self-energy vanishes identically.
    fn self_energy(&mut self, kernel: &TwoTimeKernel, k: usize, sigma: &mut SelfEnergyRow) -> Result<bool>;

    /// Memory forcing of the auxiliary equation at row `k`, valid after `self_energy(k)`.
    fn aux_memory(&self, _k: usize) -> Option<&[f64]> {
        None
    }

    /// True when the auxiliary vector is the mean field of the kernel's own components.
    /// Within a step the memory forcing is then interpolated for the full second moment
    /// `C + x xᵀ`, which keeps the cancellation between the two forcings that a
    /// phase-invariant self-energy guarantees at every grid point.
    fn aux_is_mean_field(&self) -> bool {
        false
    }
}

/// Canonical equal-time spectral block `ρ(t,t) = −Ε`.
pub fn canonical_rho(n: usize) -> Vec<f64> {
    dense::symplectic(n).iter().map(|x| -x).collect()
}

/// Local substeps per step unless configured otherwise.
pub const DEFAULT_SUBSTEPS: usize = 128;

/// Workspace for stepping a [`CausalSystem`] with the exponential
/// trapezoidal predictor-corrector (one corrector pass).
///
/// The memory integrals are evaluated on the grid. Within a step the time-local
/// flow of `C`, the auxiliary vector and the propagator is integrated with
/// `substeps` exponential-midpoint substeps, the memory forcing interpolated linearly.
#[derive(Debug, Clone)]
pub struct VolterraStepper {
    pub dt: f64,
    pub window: HistoryWindow,
    pub substeps: usize,
    n: usize,
    sig: SelfEnergyRow,
    pub(crate) mem: MemoryRow,
    aux_mem: Vec<f64>,
    sig1: SelfEnergyRow,
    mem1: MemoryRow,
    primed: Option<usize>,
}

/// Result of integrating the local flow across one step.
struct Flow {
    u: Vec<f64>,
    c: Vec<f64>,
    aux: Vec<f64>,
}

fn symplectic_vec(v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for m in 0..v.len() / 2 {
        out[2 * m] = v[2 * m + 1];
        out[2 * m + 1] = -v[2 * m];
    }
    out
}

fn lerp(a: &[f64], b: &[f64], th: f64, out: &mut [f64]) {
    for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
        *o = (1.0 - th) * x + th * y;
    }
}

impl VolterraStepper {
    pub fn new(dt: f64, dim: usize, window: HistoryWindow) -> Self {
        VolterraStepper {
            dt,
            window,
            substeps: DEFAULT_SUBSTEPS,
            n: dim,
            sig: SelfEnergyRow::new(dim),
            mem: MemoryRow::new(dim),
            aux_mem: Vec::new(),
            sig1: SelfEnergyRow::new(dim),
            mem1: MemoryRow::new(dim),
            primed: None,
        }
    }

    pub fn with_substeps(mut self, substeps: usize) -> Self {
        self.substeps = substeps.max(1);
        self
    }

    /// Self-energy of the last evaluated row.
    pub fn sigma(&self) -> &SelfEnergyRow {
        &self.sig
    }

    fn evaluate<S: CausalSystem>(
        &self,
        kernel: &TwoTimeKernel,
        sys: &mut S,
        k: usize,
        sig: &mut SelfEnergyRow,
        mem: &mut MemoryRow,
    ) -> Result<Vec<f64>> {
        sig.dim = self.n;
        sig.reset(k + 1);
        let nonzero = sys.self_energy(kernel, k, sig)?;
        if nonzero {
            memory_integrals(kernel, sig, k, self.dt, self.window, mem);
        } else {
            mem.dim = self.n;
            mem.reset(k + 1);
        }
        let na = sys.aux_len();
        Ok(match sys.aux_memory(k) {
            Some(v) if nonzero => symplectic_vec(v),
            _ => vec![0.0; na],
        })
    }

    /// Evaluate self-energy and memory at row `k`.
    pub fn prime<S: CausalSystem>(&mut self, kernel: &TwoTimeKernel, sys: &mut S, k: usize) -> Result<()> {
        let mut sig = std::mem::take(&mut self.sig);
        let mut mem = std::mem::take(&mut self.mem);
        let r = self.evaluate(kernel, sys, k, &mut sig, &mut mem);
        self.sig = sig;
        self.mem = mem;
        self.aux_mem = r?;
        self.primed = Some(k);
        Ok(())
    }

    /// Integrate `C' = AC + CAᵀ + S`, `x' = Bx + f`, `U' = AU` over one step with
    /// `A = ΕM(x, C)`, `B = ΕG(x, C)` and forcings interpolated from `(s0, f0)` to `(s1, f1)`.
    #[allow(clippy::too_many_arguments)]
    fn local_flow<S: CausalSystem>(
        &self,
        sys: &S,
        c0: &[f64],
        x0: &[f64],
        x1: &[f64],
        s0: &[f64],
        s1: &[f64],
        f0: &[f64],
        f1: &[f64],
    ) -> Flow {
        let n = self.n;
        let d2 = n * n;
        let na = x0.len();
        let moment = na == n && na > 0 && sys.aux_is_mean_field();
        let total = |s: &[f64], f: &[f64], x: &[f64]| {
            let mut t = s.to_vec();
            if moment {
                outer_sym(n, 1.0, f, x, &mut t);
            }
            t
        };
        let (s0, s1) = (total(s0, f0, x0), total(s1, f1, x1));
        let m = self.substeps.max(1);
        let h = self.dt / m as f64;
        let mut u = vec![0.0; d2];
        for i in 0..n {
            u[i * n + i] = 1.0;
        }
        let mut c = c0.to_vec();
        let mut x = x0.to_vec();
        let (mut sa, mut sb) = (vec![0.0; d2], vec![0.0; d2]);
        let (mut fa, mut fb) = (vec![0.0; na], vec![0.0; na]);
        let mut mm = vec![0.0; d2];
        let mut a = vec![0.0; d2];
        let mut gm = vec![0.0; na * na];
        let mut b = vec![0.0; na * na];
        let mut cm = vec![0.0; d2];
        let mut xm = vec![0.0; na];
        let mut tmp = vec![0.0; d2];
        let mut tmp2 = vec![0.0; d2];
        for j in 0..m {
            lerp(&s0, &s1, j as f64 / m as f64, &mut sa);
            lerp(&s0, &s1, (j + 1) as f64 / m as f64, &mut sb);
            lerp(f0, f1, j as f64 / m as f64, &mut fa);
            lerp(f0, f1, (j + 1) as f64 / m as f64, &mut fb);
            if moment {
                outer_sym(n, -1.0, &fa, &x, &mut sa);
            }
            // half-step Euler to the midpoint
            sys.local_matrix(&x, &c, &mut mm);
            dense::apply_symplectic(n, &mm, &mut a);
            dense::matmul(n, &a, &c, &mut tmp);
            for p in 0..n {
                for q in 0..n {
                    cm[p * n + q] = c[p * n + q] + 0.5 * h * (tmp[p * n + q] + tmp[q * n + p] + sa[p * n + q]);
                }
            }
            if na > 0 {
                sys.aux_matrix(&x, &c, &mut gm);
                dense::apply_symplectic(na, &gm, &mut b);
                for p in 0..na {
                    let mut s = fa[p];
                    for q in 0..na {
                        s += b[p * na + q] * x[q];
                    }
                    xm[p] = x[p] + 0.5 * h * s;
                }
            }
            // exponential midpoint; the auxiliary vector first so the end forcing sees it
            if na > 0 {
                sys.aux_matrix(&xm, &cm, &mut gm);
                dense::apply_symplectic(na, &gm, &mut b);
                b.iter_mut().for_each(|v| *v *= h);
                let eb = dense::expm(na, &b);
                let y: Vec<f64> = x.iter().zip(&fa).map(|(p, q)| p + 0.5 * h * q).collect();
                for p in 0..na {
                    let mut s = 0.5 * h * fb[p];
                    for q in 0..na {
                        s += eb[p * na + q] * y[q];
                    }
                    x[p] = s;
                }
                if moment {
                    outer_sym(n, -1.0, &fb, &x, &mut sb);
                }
            }
            sys.local_matrix(&xm, &cm, &mut mm);
            dense::apply_symplectic(n, &mm, &mut a);
            a.iter_mut().for_each(|v| *v *= h);
            let e = dense::expm(n, &a);
            for i in 0..d2 {
                tmp[i] = c[i] + 0.5 * h * sa[i];
            }
            dense::matmul(n, &e, &tmp, &mut tmp2);
            c.iter_mut().for_each(|v| *v = 0.0);
            dense::matmul_acc_bt(n, 1.0, &tmp2, &e, &mut c);
            for p in 0..n {
                for q in 0..=p {
                    let v = 0.5 * (c[p * n + q] + c[q * n + p]) + 0.5 * h * sb[p * n + q];
                    c[p * n + q] = v;
                    c[q * n + p] = v;
                }
            }
            dense::matmul(n, &e, &u, &mut tmp);
            u.copy_from_slice(&tmp);
        }
        Flow { u, c, aux: x }
    }

    /// Fill row `k+1` from rows `0..=k`.
    pub fn step<S: CausalSystem>(
        &mut self,
        kernel: &mut TwoTimeKernel,
        sys: &mut S,
        grid: &TimeGrid,
        k: usize,
    ) -> Result<()> {
        if k + 1 >= kernel.capacity() {
            return Err(Error::validation("grid exhausted"));
        }
        if kernel.filled() < k + 1 {
            return Err(Error::validation(format!("row {k} has not been computed")));
        }
        if self.primed != Some(k) {
            self.prime(kernel, sys, k)?;
        }
        let n = self.n;
        let d2 = n * n;

        let mut em_k = vec![0.0; (k + 1) * d2]; // Ε·mf(k,l)
        let mut emr_k = vec![0.0; (k + 1) * d2];
        for l in 0..=k {
            dense::apply_symplectic(n, self.mem.f(l), &mut em_k[l * d2..(l + 1) * d2]);
            dense::apply_symplectic(n, self.mem.rho(l), &mut emr_k[l * d2..(l + 1) * d2]);
        }
        let s_k = sym_part(n, &em_k[k * d2..]);
        let c_k = kernel.f(k, k).to_vec();
        let x_k = sys.aux(k).to_vec();
        let fx_k = self.aux_mem.clone();

        // predictor: forcing frozen at t_k
        let flow = self.local_flow(sys, &c_k, &x_k, &x_k, &s_k, &s_k, &fx_k, &fx_k);
        self.write_row(kernel, k, &flow, &em_k, &emr_k, &em_k, &emr_k);
        kernel.set_filled(k + 2);
        sys.set_aux(k + 1, &flow.aux);

        // evaluate at the predicted row
        let mut sig1 = std::mem::take(&mut self.sig1);
        let mut mem1 = std::mem::take(&mut self.mem1);
        let r = self.evaluate(kernel, sys, k + 1, &mut sig1, &mut mem1);
        let fx_1 = r?;
        let mut em1 = vec![0.0; (k + 2) * d2];
        let mut emr1 = vec![0.0; (k + 2) * d2];
        for l in 0..=k + 1 {
            dense::apply_symplectic(n, mem1.f(l), &mut em1[l * d2..(l + 1) * d2]);
            dense::apply_symplectic(n, mem1.rho(l), &mut emr1[l * d2..(l + 1) * d2]);
        }
        self.sig1 = sig1;
        self.mem1 = mem1;
        let s_1 = sym_part(n, &em1[(k + 1) * d2..]);

        // corrector
        let x_1 = sys.aux(k + 1).to_vec();
        let flow = self.local_flow(sys, &c_k, &x_k, &x_1, &s_k, &s_1, &fx_k, &fx_1);
        self.write_row(kernel, k, &flow, &em_k, &emr_k, &em1, &emr1);
        sys.set_aux(k + 1, &flow.aux);

        // check the new row
        let (fr, rr) = (kernel.f_row(k + 1), kernel.rho_row(k + 1));
        for (which, data) in [("F", fr), ("rho", rr), ("auxiliary", &flow.aux[..])] {
            if let Some(p) = dense::all_finite(data) {
                let l = if which == "auxiliary" { k + 1 } else { p / d2 };
                return Err(Error::Blowup {
                    step: k + 1,
                    t: grid.t(k + 1),
                    t_prime: grid.t(l),
                    index: p % d2,
                    what: format!("non-finite {which} entry"),
                });
            }
        }

        // final evaluation feeds the next step
        self.prime(kernel, sys, k + 1)
    }

    /// Rows `F(k+1,l) = U[F(k,l) + (dt/2)m_k(l)] + (dt/2)m₁(l)` for `l ≤ k`,
    /// the equal-time block from the local flow and `ρ(k+1,k+1) = −Ε`.
    #[allow(clippy::too_many_arguments)]
    fn write_row(
        &self,
        kernel: &mut TwoTimeKernel,
        k: usize,
        flow: &Flow,
        em_k: &[f64],
        emr_k: &[f64],
        em1: &[f64],
        emr1: &[f64],
    ) {
        let n = self.n;
        let d2 = n * n;
        let h = 0.5 * self.dt;
        let mut tmp = vec![0.0; d2];
        let mut out = vec![0.0; d2];
        for l in 0..=k {
            for is_f in [true, false] {
                let (src, m, m1) = if is_f { (kernel.f(k, l), em_k, em1) } else { (kernel.rho(k, l), emr_k, emr1) };
                for i in 0..d2 {
                    tmp[i] = src[i] + h * m[l * d2 + i];
                }
                dense::matmul(n, &flow.u, &tmp, &mut out);
                for i in 0..d2 {
                    out[i] += h * m1[l * d2 + i];
                }
                let dst = if is_f { kernel.f_mut(k + 1, l) } else { kernel.rho_mut(k + 1, l) };
                dst.copy_from_slice(&out);
            }
        }
        kernel.f_mut(k + 1, k + 1).copy_from_slice(&flow.c);
        kernel.rho_mut(k + 1, k + 1).copy_from_slice(&canonical_rho(n));
    }
}

/// `t += alpha (f xᵀ + x fᵀ)`
fn outer_sym(n: usize, alpha: f64, f: &[f64], x: &[f64], t: &mut [f64]) {
    for i in 0..n {
        for j in 0..n {
            t[i * n + j] += alpha * (f[i] * x[j] + x[i] * f[j]);
        }
    }
}

/// `m + mᵀ` of the leading block of `m`.
fn sym_part(n: usize, m: &[f64]) -> Vec<f64> {
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            s[i * n + j] = m[i * n + j] + m[j * n + i];
        }
    }
    s
}

/// One predictor-corrector step of `sys` filling row `k+1` of `kernel`.
pub fn volterra_step<S: CausalSystem>(
    kernel: &mut TwoTimeKernel,
    sys: &mut S,
    stepper: &mut VolterraStepper,
    grid: &TimeGrid,
    k: usize,
) -> Result<()> {
    stepper.step(kernel, sys, grid, k)
}

/// Set row 0 to the given equal-time covariance with canonical ρ.
pub fn initialize_kernel(kernel: &mut TwoTimeKernel, f00: &[f64]) -> Result<()> {
    let n = kernel.dim();
    if f00.len() != n * n {
        return Err(Error::validation("initial covariance has the wrong shape"));
    }
    kernel.f_mut(0, 0).copy_from_slice(f00);
    kernel.rho_mut(0, 0).copy_from_slice(&canonical_rho(n));
    kernel.set_filled(1);
    Ok(())
}
