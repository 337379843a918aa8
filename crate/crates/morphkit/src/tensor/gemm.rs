//! Dense fp64 matrix multiply.
//!
//! One micro-kernel design serves both code paths: 8x16 output tiles, the K
//! dimension blocked at 256, and the full-tile columns of B repacked into
//! L2-resident panels of 16 so the panel is streamed, not re-fetched from
//! DRAM for every row block. On x86-64 with AVX-512 the tile is computed
//! with explicit FMA intrinsics; everywhere else a plain `mul_add` loop with
//! the same blocking and the same per-element accumulation order runs, so the
//! two paths produce bit-identical results (same fused operations, same
//! summation tree).

const MR: usize = 8;
const NR: usize = 16;
const KC: usize = 256;
/// Columns per packed B panel: KC * NC * 8 bytes = 1 MB, comfortably L2.
const NC: usize = 512;

/// C += A * B with A `[m x k]`, B `[k x n]`, C `[m x n]`, all row-major.
pub fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), m * k, "lhs length");
    assert_eq!(b.len(), k * n, "rhs length");
    assert_eq!(c.len(), m * n, "out length");
    if n == 1 {
        // Matrix–vector products (e.g. single-channel convolution lowerings)
        // would otherwise burn the whole 8x16 tile on one useful column.
        kernel_matvec(a, b, c, m, k);
        return;
    }
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") {
            unsafe { kernel_avx512(a, b, c, m, k, n) };
            return;
        }
    }
    kernel_portable(a, b, c, m, k, n);
}

/// `n == 1` path: per output element, a dot product over K with 16 banked
/// accumulators so the FMA chains are independent enough to vectorize and
/// pipeline. One shared implementation keeps the result identical whatever
/// SIMD width the compiler picks, since the bank layout fixes the summation
/// tree.
fn kernel_matvec(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize) {
    const B: usize = 16;
    for i in 0..m {
        let row = &a[i * k..(i + 1) * k];
        let mut banks = [0.0f64; B];
        let mut ra = row.chunks_exact(B);
        let mut rb = b.chunks_exact(B);
        for (ca, cb) in (&mut ra).zip(&mut rb) {
            for q in 0..B {
                banks[q] = ca[q].mul_add(cb[q], banks[q]);
            }
        }
        let mut tail = 0.0;
        for (x, y) in ra.remainder().iter().zip(rb.remainder()) {
            tail = x.mul_add(*y, tail);
        }
        c[i] += banks.iter().sum::<f64>() + tail;
    }
}

/// C = A * B as a fresh buffer.
pub fn matmul_slices(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    matmul_acc(a, b, &mut c, m, k, n);
    c
}

/// Row-major transpose of an `[rows x cols]` matrix.
pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    assert_eq!(a.len(), rows * cols);
    let mut out = vec![0.0; rows * cols];
    // Tiled to keep both sides cache-friendly for the larger operands.
    const T: usize = 32;
    let mut i0 = 0;
    while i0 < rows {
        let i1 = (i0 + T).min(rows);
        let mut j0 = 0;
        while j0 < cols {
            let j1 = (j0 + T).min(cols);
            for i in i0..i1 {
                for j in j0..j1 {
                    out[j * rows + i] = a[i * cols + j];
                }
            }
            j0 = j1;
        }
        i0 = i1;
    }
    out
}

/// Scalar tail used by both kernels: one output element, fixed k order.
#[inline]
fn dot_tail(a: &[f64], b: &[f64], k: usize, n: usize, i: usize, j: usize, p0: usize, kc: usize) -> f64 {
    let mut s = 0.0;
    for p in p0..p0 + kc {
        s = a[i * k + p].mul_add(b[p * n + j], s);
    }
    s
}

fn kernel_portable(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    let mut p0 = 0;
    while p0 < k {
        let kc = KC.min(k - p0);
        let mut i = 0;
        while i + MR <= m {
            let mut j = 0;
            while j + NR <= n {
                let mut acc = [[0.0f64; NR]; MR];
                for p in p0..p0 + kc {
                    let brow = &b[p * n + j..p * n + j + NR];
                    for r in 0..MR {
                        let av = a[(i + r) * k + p];
                        for q in 0..NR {
                            acc[r][q] = av.mul_add(brow[q], acc[r][q]);
                        }
                    }
                }
                for r in 0..MR {
                    let crow = &mut c[(i + r) * n + j..(i + r) * n + j + NR];
                    for q in 0..NR {
                        crow[q] += acc[r][q];
                    }
                }
                j += NR;
            }
            while j < n {
                for r in 0..MR {
                    c[(i + r) * n + j] += dot_tail(a, b, k, n, i + r, j, p0, kc);
                }
                j += 1;
            }
            i += MR;
        }
        while i < m {
            for j in 0..n {
                c[i * n + j] += dot_tail(a, b, k, n, i, j, p0, kc);
            }
            i += 1;
        }
        p0 += KC;
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn kernel_avx512(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    use std::arch::x86_64::*;
    let mut p0 = 0;
    while p0 < k {
        let kc = KC.min(k - p0);
        let mut i = 0;
        while i + MR <= m {
            let mut j = 0;
            while j + NR <= n {
                let mut acc0 = [_mm512_setzero_pd(); MR];
                let mut acc1 = [_mm512_setzero_pd(); MR];
                for p in p0..p0 + kc {
                    let b0 = _mm512_loadu_pd(b.as_ptr().add(p * n + j));
                    let b1 = _mm512_loadu_pd(b.as_ptr().add(p * n + j + 8));
                    for r in 0..MR {
                        let av = _mm512_set1_pd(*a.get_unchecked((i + r) * k + p));
                        acc0[r] = _mm512_fmadd_pd(av, b0, acc0[r]);
                        acc1[r] = _mm512_fmadd_pd(av, b1, acc1[r]);
                    }
                }
                for r in 0..MR {
                    let cp = c.as_mut_ptr().add((i + r) * n + j);
                    _mm512_storeu_pd(cp, _mm512_add_pd(_mm512_loadu_pd(cp), acc0[r]));
                    _mm512_storeu_pd(cp.add(8), _mm512_add_pd(_mm512_loadu_pd(cp.add(8)), acc1[r]));
                }
                j += NR;
            }
            while j < n {
                for r in 0..MR {
                    c[(i + r) * n + j] += dot_tail(a, b, k, n, i + r, j, p0, kc);
                }
                j += 1;
            }
            i += MR;
        }
        while i < m {
            for j in 0..n {
                c[i * n + j] += dot_tail(a, b, k, n, i, j, p0, kc);
            }
            i += 1;
        }
        p0 += KC;
    }
}
