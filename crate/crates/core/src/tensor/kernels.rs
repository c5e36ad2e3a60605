//! Raw numeric kernels. Products and reductions accumulate in `f64`.

/// `out[m×n] = A·B` with element strides: `A(i, p) = a[i*a_rs + p*a_cs]`,
/// `B(p, j) = b[p*b_rs + j*b_cs]`. Operands are widened so the products
/// accumulate in `f64`.
#[allow(clippy::too_many_arguments)]
fn gemm(a: &[f32], a_rs: usize, a_cs: usize, b: &[f32], b_rs: usize, b_cs: usize, m: usize, k: usize, n: usize) -> Vec<f32> {
    if m == 0 || n == 0 || k == 0 {
        return vec![0.0; m * n];
    }
    assert!(a.len() > (m - 1) * a_rs + (k - 1) * a_cs && b.len() > (k - 1) * b_rs + (n - 1) * b_cs);
    let a64: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let b64: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let mut out = vec![0.0f64; m * n];
    // SAFETY: the assertion above bounds every strided read, and `out` is
    // an owned m×n row-major buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a64.as_ptr(),
            a_rs as isize,
            a_cs as isize,
            b64.as_ptr(),
            b_rs as isize,
            b_cs as isize,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    out.into_iter().map(|v| v as f32).collect()
}

/// Row-major `A[m×k] · B[k×n]`.
pub(crate) fn matmul_nn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    gemm(a, k, 1, b, n, 1, m, k, n)
}

/// `Aᵀ · B` with `A` stored row-major as `k×m`.
pub(crate) fn matmul_tn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    gemm(a, 1, m, b, n, 1, m, k, n)
}

/// `A · Bᵀ` with `A` row-major `m×k` and `B` row-major `n×k`.
pub(crate) fn matmul_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    gemm(a, k, 1, b, 1, k, m, k, n)
}

#[cfg(test)]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    // Four independent lanes keep the loop vectorizable.
    let mut s = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            s[l] += a[4 * c + l] as f64 * b[4 * c + l] as f64;
        }
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] as f64 * b[i] as f64;
    }
    (s[0] + s[1]) + (s[2] + s[3]) + tail
}

pub(crate) fn out_dim(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    (padded >= k).then(|| (padded - k) / stride + 1)
}

/// Output positions `lo..hi` whose input index `o·stride + tap − pad`
/// falls inside `0..size`.
pub(crate) fn valid_range(size: usize, out: usize, stride: usize, pad: usize, tap: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(tap).div_ceil(stride);
    let hi = if size + pad > tap { ((size + pad - tap - 1) / stride + 1).min(out) } else { 0 };
    (lo, hi.max(lo))
}

/// Unfold `[c×h×w]` into columns `[(c·k·k) × (ho·wo)]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col(x: &[f32], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Vec<f32> {
    let p = ho * wo;
    let mut cols = vec![0.0f32; c * k * k * p];
    for ci in 0..c {
        for ky in 0..k {
            let (y_lo, y_hi) = valid_range(h, ho, stride, pad, ky);
            for kx in 0..k {
                let (x_lo, x_hi) = valid_range(w, wo, stride, pad, kx);
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in y_lo..y_hi {
                    let iy = oy * stride + ky - pad;
                    let src = &x[(ci * h + iy) * w..(ci * h + iy + 1) * w];
                    let d = &mut dst[oy * wo..(oy + 1) * wo];
                    if stride == 1 {
                        d[x_lo..x_hi].copy_from_slice(&src[x_lo + kx - pad..x_hi + kx - pad]);
                    } else {
                        for ox in x_lo..x_hi {
                            d[ox] = src[ox * stride + kx - pad];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into `[c×h×w]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im(cols: &[f32], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Vec<f32> {
    let p = ho * wo;
    let mut x = vec![0.0f32; c * h * w];
    for ci in 0..c {
        for ky in 0..k {
            let (y_lo, y_hi) = valid_range(h, ho, stride, pad, ky);
            for kx in 0..k {
                let (x_lo, x_hi) = valid_range(w, wo, stride, pad, kx);
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in y_lo..y_hi {
                    let iy = oy * stride + ky - pad;
                    let dst = &mut x[(ci * h + iy) * w..(ci * h + iy + 1) * w];
                    let s = &src[oy * wo..(oy + 1) * wo];
                    if stride == 1 {
                        for (d, v) in dst[x_lo + kx - pad..x_hi + kx - pad].iter_mut().zip(&s[x_lo..x_hi]) {
                            *d += v;
                        }
                    } else {
                        for ox in x_lo..x_hi {
                            dst[ox * stride + kx - pad] += s[ox];
                        }
                    }
                }
            }
        }
    }
    x
}

pub(crate) fn transpose(x: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    const B: usize = 32;
    let mut out = vec![0.0f32; x.len()];
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for c in c0..(c0 + B).min(cols) {
                    out[c * rows + r] = x[r * cols + c];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_variants_agree() {
        let a: Vec<f32> = (0..6).map(|v| v as f32 * 0.5 - 1.0).collect(); // 2×3
        let b: Vec<f32> = (0..12).map(|v| (v as f32).sin()).collect(); // 3×4
        let nn = matmul_nn(&a, &b, 2, 3, 4);
        let at = transpose(&a, 2, 3);
        for (x, y) in matmul_tn(&at, &b, 2, 3, 4).iter().zip(&nn) {
            assert!((x - y).abs() < 1e-6);
        }
        let bt = transpose(&b, 3, 4);
        let nt = matmul_nt(&a, &bt, 2, 3, 4);
        for (x, y) in nt.iter().zip(&nn) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let (c, h, w, k, s, p) = (2, 5, 4, 3, 2, 1);
        let ho = out_dim(h, k, s, p).unwrap();
        let wo = out_dim(w, k, s, p).unwrap();
        let x: Vec<f32> = (0..c * h * w).map(|v| ((v * 7) % 11) as f32 - 5.0).collect();
        let y: Vec<f32> = (0..c * k * k * ho * wo).map(|v| ((v * 3) % 5) as f32 - 2.0).collect();
        let lhs = dot(&im2col(&x, c, h, w, k, s, p, ho, wo), &y);
        let rhs = dot(&x, &col2im(&y, c, h, w, k, s, p, ho, wo));
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn valid_range_matches_brute_force() {
        for size in 1..9 {
            for k in [1, 3, 5] {
                for stride in 1..4 {
                    for pad in 0..=k / 2 + 1 {
                        let Some(out) = out_dim(size, k, stride, pad) else { continue };
                        for tap in 0..k {
                            let ok: Vec<usize> = (0..out)
                                .filter(|&o| {
                                    let i = (o * stride + tap) as isize - pad as isize;
                                    i >= 0 && (i as usize) < size
                                })
                                .collect();
                            let (lo, hi) = valid_range(size, out, stride, pad, tap);
                            assert_eq!((lo..hi).collect::<Vec<_>>(), ok, "{size} {k} {stride} {pad} {tap}");
                        }
                    }
                }
            }
        }
    }
}
