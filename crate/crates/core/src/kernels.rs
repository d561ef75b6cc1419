//! Dense matrix kernels.
//!
//! Every output element is accumulated as `((0 + a0*b0) + a1*b1) + ...` with the
//! reduction index ascending, whichever tile shape computes it. Results are
//! therefore bit-identical across tilings, batch sizes and thread counts.

use rayon::prelude::*;

use crate::tensor::Float;

const MR: usize = 4;
const NR: usize = 32;
/// Reduction block: a `KC × m` panel of `b` stays cache resident while every
/// row block of `a` streams past it.
const KC: usize = 256;

/// Below this many multiply-adds a product runs on the calling thread.
const PAR_THRESHOLD: usize = 1 << 18;

/// `acc + x * y`, fused when the target has FMA. Either way the rounding is
/// fixed for a given build, so every code path below agrees bit for bit.
#[inline(always)]
pub(crate) fn madd<T: Float>(acc: T, x: T, y: T) -> T {
    if cfg!(target_feature = "fma") {
        x.mul_add(y, acc)
    } else {
        acc + x * y
    }
}

/// `c[n×m] = a[n×k] · b[k×m]` (overwrites `c`).
pub fn gemm<T: Float>(a: &[T], b: &[T], c: &mut [T], n: usize, k: usize, m: usize) {
    gemm_dispatch::<T, false>(a, b, c, n, k, m);
}

/// `c[k×m] = a[p×k]ᵀ · b[p×m]` (overwrites `c`), reducing over `p` in ascending order.
pub fn gemm_tn_into<T: Float>(a: &[T], b: &[T], c: &mut [T], p: usize, k: usize, m: usize) {
    gemm_dispatch::<T, true>(a, b, c, k, p, m);
}

/// `c[n×m] = a[n×k] · b[m×k]ᵀ` (overwrites `c`). `scratch` holds the
/// transposed `b` and is reused across calls.
pub fn gemm_nt_into<T: Float>(a: &[T], b: &[T], c: &mut [T], n: usize, k: usize, m: usize, scratch: &mut Vec<T>) {
    assert_eq!(b.len(), m * k);
    scratch.clear();
    scratch.resize(m * k, T::zero());
    transpose_into(b, m, k, scratch);
    gemm(a, scratch, c, n, k, m);
}

/// `c[k×m] = a[p×k]ᵀ · b[p×m]`.
pub fn gemm_tn<T: Float>(a: &[T], b: &[T], p: usize, k: usize, m: usize) -> Vec<T> {
    let mut c = vec![T::zero(); k * m];
    gemm_tn_into(a, b, &mut c, p, k, m);
    c
}

/// `c[n×m] = a[n×k] · b[m×k]ᵀ`.
pub fn gemm_nt<T: Float>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut c = vec![T::zero(); n * m];
    gemm_nt_into(a, b, &mut c, n, k, m, &mut Vec::new());
    c
}

/// `TA` selects whether `a` is stored as `n×k` or as its transpose `k×n`.
fn gemm_dispatch<T: Float, const TA: bool>(a: &[T], b: &[T], c: &mut [T], n: usize, k: usize, m: usize) {
    assert_eq!(a.len(), n * k);
    assert_eq!(b.len(), k * m);
    assert_eq!(c.len(), n * m);
    if m == 0 {
        return;
    }
    if n * k * m >= PAR_THRESHOLD && n >= 2 * MR && rayon::current_num_threads() > 1 {
        let rows_per_task = (n / rayon::current_num_threads()).max(MR).next_multiple_of(MR);
        c.par_chunks_mut(rows_per_task * m)
            .enumerate()
            .for_each(|(t, c)| gemm_rows::<T, TA>(a, b, c, t * rows_per_task, c.len() / m, n, k, m));
    } else {
        gemm_rows::<T, TA>(a, b, c, 0, n, n, k, m);
    }
}

/// Rows `[i0, i0 + rows)` of the product into `c`, which holds exactly those rows.
#[allow(clippy::too_many_arguments)]
fn gemm_rows<T: Float, const TA: bool>(
    a: &[T],
    b: &[T],
    c: &mut [T],
    i0: usize,
    rows: usize,
    n: usize,
    k: usize,
    m: usize,
) {
    if k == 0 {
        c.fill(T::zero());
        return;
    }
    let a = Lhs { data: a, n, k, i0 };
    for p0 in (0..k).step_by(KC) {
        let p1 = (p0 + KC).min(k);
        let first = p0 == 0;
        let mut i = 0;
        while i + MR <= rows {
            row_block::<T, MR, TA>(&a, b, c, i, p0, p1, m, first);
            i += MR;
        }
        match rows - i {
            0 => {}
            1 => row_block::<T, 1, TA>(&a, b, c, i, p0, p1, m, first),
            2 => row_block::<T, 2, TA>(&a, b, c, i, p0, p1, m, first),
            3 => row_block::<T, 3, TA>(&a, b, c, i, p0, p1, m, first),
            _ => unreachable!(),
        }
    }
}

/// Left operand with rows offset by `i0`.
struct Lhs<'a, T> {
    data: &'a [T],
    n: usize,
    k: usize,
    i0: usize,
}

/// Rows `[i, i + R)` (relative to `c`) over reduction range `[p0, p1)`.
#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn row_block<T: Float, const R: usize, const TA: bool>(
    a: &Lhs<T>,
    b: &[T],
    c: &mut [T],
    i: usize,
    p0: usize,
    p1: usize,
    m: usize,
    first: bool,
) {
    let mut j = 0;
    while j + NR <= m {
        tile::<T, R, NR, TA>(a, b, c, i, j, p0, p1, m, first);
        j += NR;
    }
    if j + 16 <= m {
        tile::<T, R, 16, TA>(a, b, c, i, j, p0, p1, m, first);
        j += 16;
    }
    if j + 8 <= m {
        tile::<T, R, 8, TA>(a, b, c, i, j, p0, p1, m, first);
        j += 8;
    }
    if j + 4 <= m {
        tile::<T, R, 4, TA>(a, b, c, i, j, p0, p1, m, first);
        j += 4;
    }
    while j < m {
        tile::<T, R, 1, TA>(a, b, c, i, j, p0, p1, m, first);
        j += 1;
    }
}

#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn tile<T: Float, const R: usize, const C: usize, const TA: bool>(
    a: &Lhs<T>,
    b: &[T],
    c: &mut [T],
    i: usize,
    j: usize,
    p0: usize,
    p1: usize,
    m: usize,
    first: bool,
) {
    let mut acc = [[T::zero(); C]; R];
    if !first {
        for r in 0..R {
            acc[r].copy_from_slice(&c[(i + r) * m + j..(i + r) * m + j + C]);
        }
    }
    let gi = a.i0 + i;
    let b = &b[p0 * m + j..];
    if TA {
        let cols = &a.data[p0 * a.n..p1 * a.n];
        for p in 0..p1 - p0 {
            let bp: &[T; C] = b[p * m..p * m + C].try_into().unwrap();
            let ap: &[T; R] = cols[p * a.n + gi..p * a.n + gi + R].try_into().unwrap();
            for r in 0..R {
                for q in 0..C {
                    acc[r][q] = madd(acc[r][q], ap[r], bp[q]);
                }
            }
        }
    } else {
        let a_rows: [&[T]; R] = std::array::from_fn(|r| &a.data[(gi + r) * a.k + p0..(gi + r) * a.k + p1]);
        for p in 0..p1 - p0 {
            let bp: &[T; C] = b[p * m..p * m + C].try_into().unwrap();
            for r in 0..R {
                let av = a_rows[r][p];
                for q in 0..C {
                    acc[r][q] = madd(acc[r][q], av, bp[q]);
                }
            }
        }
    }
    for r in 0..R {
        c[(i + r) * m + j..(i + r) * m + j + C].copy_from_slice(&acc[r]);
    }
}

/// Out-of-place transpose of a row-major `rows×cols` matrix.
pub fn transpose<T: Float>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    transpose_into(a, rows, cols, &mut out);
    out
}

/// Writes the transpose of the row-major `rows×cols` matrix `a` into `out`.
pub fn transpose_into<T: Float>(a: &[T], rows: usize, cols: usize, out: &mut [T]) {
    assert_eq!(a.len(), rows * cols);
    assert_eq!(out.len(), rows * cols);
    const B: usize = 32;
    for i0 in (0..rows).step_by(B) {
        for j0 in (0..cols).step_by(B) {
            for i in i0..(i0 + B).min(rows) {
                for j in j0..(j0 + B).min(cols) {
                    out[j * rows + i] = a[i * cols + j];
                }
            }
        }
    }
}

/// Branch-free `exp` on f32 (relative error within a few ulp); vectorizes in
/// elementwise loops. Inputs below about -87.3 flush to the smallest normal.
#[inline(always)]
pub(crate) fn exp_f32(x: f32) -> f32 {
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    let c = x.clamp(-87.3, 88.7);
    let n = (c * std::f32::consts::LOG2_E).round_ties_even();
    let r = c - n * LN2_HI - n * LN2_LO;
    let mut p = 1.987_569_1e-4_f32;
    p = madd(1.398_199_9e-3, p, r);
    p = madd(8.333_452e-3, p, r);
    p = madd(4.166_579_6e-2, p, r);
    p = madd(1.666_666_5e-1, p, r);
    p = madd(5e-1, p, r);
    let y = madd(r, p, r * r) + 1.0;
    // n + 127 lands in the low mantissa bits once 2^23 is added.
    let scale = f32::from_bits(((n + 8_388_735.0).to_bits() - 0x4B00_0000) << 23);
    if x.is_nan() {
        x
    } else {
        y * scale
    }
}

/// Branch-free `tanh` on f32 built on [`exp_f32`].
#[inline(always)]
pub(crate) fn tanh_f32(x: f32) -> f32 {
    let a = x.abs();
    let z = x * x;
    let mut p = -5.704_988_7e-3_f32;
    p = madd(2.063_909e-2, p, z);
    p = madd(-5.373_971_6e-2, p, z);
    p = madd(1.333_144_2e-1, p, z);
    p = madd(-3.333_328e-1, p, z);
    let small = madd(x, p * z, x);
    let large = (1.0 - 2.0 / (exp_f32(2.0 * a) + 1.0)).copysign(x);
    if a < 0.625 {
        small
    } else {
        large
    }
}
