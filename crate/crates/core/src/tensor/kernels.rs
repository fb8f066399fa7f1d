//! Dense row-major kernels.
//!
//! Every output element of [`gemm`] is accumulated from `0.0` in ascending
//! inner-index order, so results are bit-identical to the textbook triple
//! loop. Register tiling only changes which elements are in flight, never the
//! order of additions within one element.

const MR: usize = 4;
const NR: usize = 16;

/// `out[m×n] = a[m×k] · b[k×n]`, overwriting `out`.
pub fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let n_main = n - n % NR;
    let m_main = m - m % MR;
    let mut i = 0;
    while i < m_main {
        let mut j = 0;
        while j < n_main {
            tile_full(a, b, out, i, j, k, n);
            j += NR;
        }
        if n_main < n {
            tile_edge(a, b, out, i, MR, n_main, n - n_main, k, n);
        }
        i += MR;
    }
    if m_main < m {
        let rows = m - m_main;
        let mut j = 0;
        while j < n_main {
            tile_edge(a, b, out, m_main, rows, j, NR, k, n);
            j += NR;
        }
        if n_main < n {
            tile_edge(a, b, out, m_main, rows, n_main, n - n_main, k, n);
        }
    }
}

#[inline(always)]
fn tile_full(a: &[f64], b: &[f64], out: &mut [f64], i: usize, j: usize, k: usize, n: usize) {
    let mut acc = [[0.0f64; NR]; MR];
    let a0 = &a[i * k..(i + 1) * k];
    let a1 = &a[(i + 1) * k..(i + 2) * k];
    let a2 = &a[(i + 2) * k..(i + 3) * k];
    let a3 = &a[(i + 3) * k..(i + 4) * k];
    for p in 0..k {
        let brow: &[f64; NR] = b[p * n + j..p * n + j + NR].try_into().unwrap();
        let av = [a0[p], a1[p], a2[p], a3[p]];
        for r in 0..MR {
            for c in 0..NR {
                acc[r][c] += av[r] * brow[c];
            }
        }
    }
    for r in 0..MR {
        out[(i + r) * n + j..(i + r) * n + j + NR].copy_from_slice(&acc[r]);
    }
}

#[allow(clippy::too_many_arguments)]
fn tile_edge(
    a: &[f64],
    b: &[f64],
    out: &mut [f64],
    i: usize,
    rows: usize,
    j: usize,
    cols: usize,
    k: usize,
    n: usize,
) {
    let mut acc = [[0.0f64; NR]; MR];
    for p in 0..k {
        let brow = &b[p * n + j..p * n + j + cols];
        for r in 0..rows {
            let av = a[(i + r) * k + p];
            for c in 0..cols {
                acc[r][c] += av * brow[c];
            }
        }
    }
    for r in 0..rows {
        out[(i + r) * n + j..(i + r) * n + j + cols].copy_from_slice(&acc[r][..cols]);
    }
}

/// Row-major transpose of an `r×c` matrix.
pub fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    const B: usize = 32;
    for i0 in (0..r).step_by(B) {
        for j0 in (0..c).step_by(B) {
            for i in i0..(i0 + B).min(r) {
                for j in j0..(j0 + B).min(c) {
                    out[j * r + i] = x[i * c + j];
                }
            }
        }
    }
    out
}

/// `out += a` elementwise.
pub fn add_assign(out: &mut [f64], a: &[f64]) {
    for (o, v) in out.iter_mut().zip(a) {
        *o += v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn matches_triple_loop_bitwise_on_ragged_shapes() {
        let mut seed = 7u64;
        let mut next = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        for &(m, k, n) in &[(1, 1, 1), (3, 4, 2), (5, 7, 17), (9, 33, 40), (4, 16, 16), (13, 3, 31)] {
            let a: Vec<f64> = (0..m * k).map(|_| next()).collect();
            let b: Vec<f64> = (0..k * n).map(|_| next()).collect();
            let mut out = vec![0.0; m * n];
            gemm(&a, &b, &mut out, m, k, n);
            let want = naive(&a, &b, m, k, n);
            for (x, y) in out.iter().zip(&want) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn transpose_round_trips() {
        let x: Vec<f64> = (0..35).map(|v| v as f64).collect();
        let t = transpose(&x, 5, 7);
        assert_eq!(t[7 * 0 + 0], 0.0);
        assert_eq!(t[1 * 5 + 0], 1.0);
        assert_eq!(transpose(&t, 7, 5), x);
    }
}
