//! Dense f64 kernels: matrix products and im2col convolution lowering.
//!
//! The matmul micro-kernel uses AVX2+FMA when the CPU has it (checked once at
//! runtime) and falls back to a blocked scalar loop otherwise. Both paths
//! compute each output element with the same k-order accumulation per lane
//! group, and every element is written by exactly one task, so results do not
//! depend on threading.

use crate::par;

#[cfg(target_arch = "x86_64")]
use std::sync::OnceLock;

#[cfg(target_arch = "x86_64")]
fn has_avx2_fma() -> bool {
    static FLAG: OnceLock<bool> = OnceLock::new();
    *FLAG.get_or_init(|| is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma"))
}

/// c += a (m x k, row-major) * b (k x n, row-major)
pub fn matmul_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // Parallelize across row blocks only for work worth the fork overhead.
    // Chunks stay multiples of 6 rows so the 6-row micro-kernel sees the same
    // row grouping as an unchunked run (bit-identical results either way).
    if par::parallel_enabled() && m * k * n >= 1 << 18 && m >= 12 {
        let rows_per = m.div_ceil(6 * num_chunks(m)).max(1).next_multiple_of(6);
        par::for_each_row_chunk(c, n, rows_per, |row0, chunk| {
            let rows = chunk.len() / n;
            matmul_nn_block(&a[row0 * k..(row0 + rows) * k], b, chunk, rows, k, n);
        });
    } else {
        matmul_nn_block(a, b, c, m, k, n);
    }
}

/// c += a (m x k) * b^T (b is n x k, row-major)
///
/// Implemented as an explicit transpose of b followed by the NN kernel: the
/// row-against-row dot form stalls on horizontal reductions for the small k
/// this workload produces, while the broadcast-FMA NN kernel streams.
pub fn matmul_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    let bt = transpose(b, n, k);
    matmul_nn(a, &bt, c, m, k, n);
}

fn num_chunks(_m: usize) -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads().max(1)
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

fn matmul_nn_block(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    #[cfg(target_arch = "x86_64")]
    if has_avx2_fma() {
        unsafe { matmul_nn_avx(a, b, c, m, k, n) };
        return;
    }
    matmul_nn_scalar(a, b, c, m, k, n);
}

fn matmul_nn_scalar(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        let cr = &mut c[i * n..(i + 1) * n];
        for (kk, &av) in ar.iter().enumerate() {
            let br = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                cr[j] += av * br[j];
            }
        }
    }
}

/// 6-row x 8-col register-blocked kernel (12 accumulators + 2 B lanes + 1
/// broadcast stay within the 16 ymm registers); tails fall back to scalar.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn matmul_nn_avx(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    use std::arch::x86_64::*;
    let mut i = 0;
    while i + 6 <= m {
        let mut j = 0;
        while j + 8 <= n {
            let mut acc = [[_mm256_setzero_pd(); 2]; 6];
            for kk in 0..k {
                let b0 = _mm256_loadu_pd(b.as_ptr().add(kk * n + j));
                let b1 = _mm256_loadu_pd(b.as_ptr().add(kk * n + j + 4));
                for r in 0..6 {
                    let av = _mm256_set1_pd(*a.get_unchecked((i + r) * k + kk));
                    acc[r][0] = _mm256_fmadd_pd(av, b0, acc[r][0]);
                    acc[r][1] = _mm256_fmadd_pd(av, b1, acc[r][1]);
                }
            }
            for r in 0..6 {
                let p = c.as_mut_ptr().add((i + r) * n + j);
                _mm256_storeu_pd(p, _mm256_add_pd(_mm256_loadu_pd(p), acc[r][0]));
                _mm256_storeu_pd(p.add(4), _mm256_add_pd(_mm256_loadu_pd(p.add(4)), acc[r][1]));
            }
            j += 8;
        }
        while j < n {
            for r in 0..6 {
                let mut s = 0.0;
                for kk in 0..k {
                    s += a[(i + r) * k + kk] * b[kk * n + j];
                }
                c[(i + r) * n + j] += s;
            }
            j += 1;
        }
        i += 6;
    }
    // 4-row tier for medium tails
    while i + 4 <= m {
        let mut j = 0;
        while j + 8 <= n {
            let mut acc = [[_mm256_setzero_pd(); 2]; 4];
            for kk in 0..k {
                let b0 = _mm256_loadu_pd(b.as_ptr().add(kk * n + j));
                let b1 = _mm256_loadu_pd(b.as_ptr().add(kk * n + j + 4));
                for r in 0..4 {
                    let av = _mm256_set1_pd(*a.get_unchecked((i + r) * k + kk));
                    acc[r][0] = _mm256_fmadd_pd(av, b0, acc[r][0]);
                    acc[r][1] = _mm256_fmadd_pd(av, b1, acc[r][1]);
                }
            }
            for r in 0..4 {
                let p = c.as_mut_ptr().add((i + r) * n + j);
                _mm256_storeu_pd(p, _mm256_add_pd(_mm256_loadu_pd(p), acc[r][0]));
                _mm256_storeu_pd(p.add(4), _mm256_add_pd(_mm256_loadu_pd(p.add(4)), acc[r][1]));
            }
            j += 8;
        }
        while j < n {
            for r in 0..4 {
                let mut s = 0.0;
                for kk in 0..k {
                    s += a[(i + r) * k + kk] * b[kk * n + j];
                }
                c[(i + r) * n + j] += s;
            }
            j += 1;
        }
        i += 4;
    }
    // tail rows: vectorized rank-1 updates
    while i < m {
        let cr = c.as_mut_ptr().add(i * n);
        for kk in 0..k {
            let av = *a.get_unchecked(i * k + kk);
            let avv = _mm256_set1_pd(av);
            let br = b.as_ptr().add(kk * n);
            let mut j = 0;
            while j + 4 <= n {
                let cv = _mm256_loadu_pd(cr.add(j));
                _mm256_storeu_pd(cr.add(j), _mm256_fmadd_pd(avv, _mm256_loadu_pd(br.add(j)), cv));
                j += 4;
            }
            while j < n {
                *cr.add(j) += av * *br.add(j);
                j += 1;
            }
        }
        i += 1;
    }
}

/// out (cols x rows) = transpose of a (rows x cols)
pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

// ── Convolution lowering ─────────────────────────────────────────────

/// Spatial geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub c_out: usize,
    pub ksize: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn h_out(&self) -> usize {
        (self.h_in + 2 * self.pad - self.ksize) / self.stride + 1
    }
    pub fn w_out(&self) -> usize {
        (self.w_in + 2 * self.pad - self.ksize) / self.stride + 1
    }
}

/// Unfold x (C_in x H x W) into a (C_in*k*k) x (H_out*W_out) matrix.
pub fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ho, wo) = (g.h_out(), g.w_out());
    let hw = ho * wo;
    let mut cols = vec![0.0; g.c_in * g.ksize * g.ksize * hw];
    for c in 0..g.c_in {
        for ky in 0..g.ksize {
            for kx in 0..g.ksize {
                let row = ((c * g.ksize + ky) * g.ksize + kx) * hw;
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h_in as isize {
                        continue;
                    }
                    let src = (c * g.h_in + iy as usize) * g.w_in;
                    let dst = row + oy * wo;
                    // clip the ox range so the inner loop is branch-free
                    let ox_lo = g.pad.saturating_sub(kx).div_ceil(g.stride).min(wo);
                    let ox_hi = if g.w_in + g.pad > kx {
                        ((g.w_in + g.pad - kx - 1) / g.stride + 1).min(wo)
                    } else {
                        0
                    };
                    if g.stride == 1 {
                        let ix0 = (ox_lo + kx) as isize - g.pad as isize;
                        debug_assert!(ix0 >= 0);
                        let len = ox_hi.saturating_sub(ox_lo);
                        let s0 = src + ix0 as usize;
                        cols[dst + ox_lo..dst + ox_lo + len].copy_from_slice(&x[s0..s0 + len]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            let ix = ox * g.stride + kx - g.pad;
                            cols[dst + ox] = x[src + ix];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Fold gradient columns back onto the input layout (scatter-add inverse of im2col).
pub fn col2im(dcols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ho, wo) = (g.h_out(), g.w_out());
    let hw = ho * wo;
    let mut dx = vec![0.0; g.c_in * g.h_in * g.w_in];
    for c in 0..g.c_in {
        for ky in 0..g.ksize {
            for kx in 0..g.ksize {
                let row = ((c * g.ksize + ky) * g.ksize + kx) * hw;
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h_in as isize {
                        continue;
                    }
                    let dst = (c * g.h_in + iy as usize) * g.w_in;
                    let src = row + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w_in as isize {
                            dx[dst + ix as usize] += dcols[src + ox];
                        }
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for kk in 0..k {
                    c[i * n + j] += a[i * k + kk] * b[kk * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matmul_matches_naive() {
        let mut rng = crate::rng::stream(1, "kern", 0);
        for &(m, k, n) in &[(1usize, 1usize, 1usize), (3, 5, 7), (17, 33, 9), (64, 64, 64), (70, 13, 65)] {
            let a = crate::rng::normal_vec(&mut rng, m * k, 1.0);
            let b = crate::rng::normal_vec(&mut rng, k * n, 1.0);
            let want = naive_nn(&a, &b, m, k, n);
            let mut c = vec![0.0; m * n];
            matmul_nn(&a, &b, &mut c, m, k, n);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-10, "nn {m}x{k}x{n}");
            }
            let bt = transpose(&b, k, n);
            let mut c2 = vec![0.0; m * n];
            matmul_nt(&a, &bt, &mut c2, m, k, n);
            for (x, y) in c2.iter().zip(&want) {
                assert!((x - y).abs() < 1e-10, "nt {m}x{k}x{n}");
            }
        }
    }

    #[test]
    fn im2col_col2im_adjoint() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y: the pair is a valid
        // linear adjoint, which is exactly what conv backward relies on.
        let g = ConvGeom { c_in: 3, h_in: 8, w_in: 6, c_out: 1, ksize: 3, stride: 2, pad: 1 };
        let mut rng = crate::rng::stream(2, "kern", 0);
        let x = crate::rng::normal_vec(&mut rng, g.c_in * g.h_in * g.w_in, 1.0);
        let cols = im2col(&x, &g);
        let y = crate::rng::normal_vec(&mut rng, cols.len(), 1.0);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let xi = col2im(&y, &g);
        let rhs: f64 = x.iter().zip(&xi).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}
