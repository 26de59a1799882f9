//! Small row-major dense matrix helpers for the n×n blocks of the two-time kernels.

#[inline(always)]
pub fn matmul(n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for m in 0..n {
                s += a[i * n + m] * b[m * n + j];
            }
            out[i * n + j] = s;
        }
    }
}

/// `out += alpha * a * b`
#[inline(always)]
pub fn matmul_acc(n: usize, alpha: f64, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..n {
        for m in 0..n {
            let am = alpha * a[i * n + m];
            for j in 0..n {
                out[i * n + j] += am * b[m * n + j];
            }
        }
    }
}

/// `out += alpha * a * bᵀ`
#[inline(always)]
pub fn matmul_acc_bt(n: usize, alpha: f64, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for m in 0..n {
                s += a[i * n + m] * b[j * n + m];
            }
            out[i * n + j] += alpha * s;
        }
    }
}

pub fn transpose(n: usize, a: &[f64], out: &mut [f64]) {
    for i in 0..n {
        for j in 0..n {
            out[j * n + i] = a[i * n + j];
        }
    }
}

/// Left-multiply by the symplectic form: rows (2m, 2m+1) of `a` become (row 2m+1, −row 2m).
pub fn apply_symplectic(n: usize, a: &[f64], out: &mut [f64]) {
    for m in 0..n / 2 {
        let (r0, r1) = (2 * m * n, (2 * m + 1) * n);
        for j in 0..n {
            out[r0 + j] = a[r1 + j];
            out[r1 + j] = -a[r0 + j];
        }
    }
}

/// The symplectic form itself, ⊕ [[0,1],[−1,0]].
pub fn symplectic(n: usize) -> Vec<f64> {
    let mut e = vec![0.0; n * n];
    for m in 0..n / 2 {
        e[(2 * m) * n + 2 * m + 1] = 1.0;
        e[(2 * m + 1) * n + 2 * m] = -1.0;
    }
    e
}

/// exp(a) for a small dense matrix: scaling and squaring around a Taylor sum
/// truncated once the terms fall below rounding.
pub fn expm(n: usize, a: &[f64]) -> Vec<f64> {
    let norm = (0..n).map(|i| a[i * n..(i + 1) * n].iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max);
    let mut squarings = 0;
    let mut scale = 1.0;
    while norm * scale > 0.5 {
        scale *= 0.5;
        squarings += 1;
    }
    let mut out = vec![0.0; n * n];
    let mut term = vec![0.0; n * n];
    let mut next = vec![0.0; n * n];
    for i in 0..n {
        out[i * n + i] = 1.0;
        term[i * n + i] = 1.0;
    }
    let scaled: Vec<f64> = a.iter().map(|x| x * scale).collect();
    for j in 1..30 {
        matmul(n, &term, &scaled, &mut next);
        let inv = 1.0 / j as f64;
        let mut big = 0.0f64;
        for (t, v) in term.iter_mut().zip(&next) {
            *t = v * inv;
            big = big.max(t.abs());
        }
        for (o, t) in out.iter_mut().zip(&term) {
            *o += t;
        }
        if big < 1e-18 {
            break;
        }
    }
    for _ in 0..squarings {
        matmul(n, &out, &out, &mut next);
        out.copy_from_slice(&next);
    }
    out
}

pub fn all_finite(a: &[f64]) -> Option<usize> {
    a.iter().position(|x| !x.is_finite())
}
