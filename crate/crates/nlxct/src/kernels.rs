//! Pure numeric kernels shared by the forward and backward passes.
//!
//! Everything here is a plain function over flat row-major slices with
//! explicit dimensions; the tape decides when to call what.

/// out[m,n] += a[m,k] * b[k,n]
pub fn mm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,n] += a[m,k] * b[n,k]^T
pub fn mm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow.iter()) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

/// out[k,n] += a[m,k]^T * b[m,n]
pub fn mm_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
}

// ── Activations ─────────────────────────────────────────────────────

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// gelu via the tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_deriv(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ── Convolution geometry ────────────────────────────────────────────

/// Output spatial size for one axis: floor((size + 2*pad - k) / stride) + 1.
pub fn conv_out_size(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// Unroll one channel-group of `x` into patch rows.
///
/// `x` is [B,C,H,W]; channels `[c0, c0+cg)` contribute. The result has
/// `b*oh*ow` rows of length `cg*kh*kw`, zero-filled where the padded window
/// leaves the input.
#[allow(clippy::too_many_arguments)]
pub fn im2col(
    x: &[f64],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    c0: usize,
    cg: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    cols: &mut Vec<f64>,
) -> (usize, usize) {
    let oh = conv_out_size(h, kh, stride, pad);
    let ow = conv_out_size(w, kw, stride, pad);
    let kcols = cg * kh * kw;
    let rows = b * oh * ow;
    cols.clear();
    cols.resize(rows, 0.0);
    cols.resize(rows * kcols, 0.0);
    let mut r = 0usize;
    for bi in 0..b {
        for oy in 0..oh {
            let iy0 = (oy * stride) as isize - pad as isize;
            for ox in 0..ow {
                let ix0 = (ox * stride) as isize - pad as isize;
                let row = &mut cols[r * kcols..(r + 1) * kcols];
                let mut col = 0usize;
                for ci in 0..cg {
                    let cbase = ((bi * c + c0 + ci) * h) as isize;
                    for ky in 0..kh {
                        let iy = iy0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            col += kw;
                            continue;
                        }
                        let rbase = ((cbase + iy) as usize) * w;
                        for kx in 0..kw {
                            let ix = ix0 + kx as isize;
                            if ix >= 0 && ix < w as isize {
                                row[col] = x[rbase + ix as usize];
                            }
                            col += 1;
                        }
                    }
                }
                r += 1;
            }
        }
    }
    (rows, kcols)
}

/// Scatter patch-row gradients back onto the input, accumulating overlaps.
#[allow(clippy::too_many_arguments)]
pub fn col2im_acc(
    dcols: &[f64],
    dx: &mut [f64],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    c0: usize,
    cg: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) {
    let oh = conv_out_size(h, kh, stride, pad);
    let ow = conv_out_size(w, kw, stride, pad);
    let kcols = cg * kh * kw;
    let mut r = 0usize;
    for bi in 0..b {
        for oy in 0..oh {
            let iy0 = (oy * stride) as isize - pad as isize;
            for ox in 0..ow {
                let ix0 = (ox * stride) as isize - pad as isize;
                let row = &dcols[r * kcols..(r + 1) * kcols];
                let mut col = 0usize;
                for ci in 0..cg {
                    let cbase = ((bi * c + c0 + ci) * h) as isize;
                    for ky in 0..kh {
                        let iy = iy0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            col += kw;
                            continue;
                        }
                        let rbase = ((cbase + iy) as usize) * w;
                        for kx in 0..kw {
                            let ix = ix0 + kx as isize;
                            if ix >= 0 && ix < w as isize {
                                dx[rbase + ix as usize] += row[col];
                            }
                            col += 1;
                        }
                    }
                }
                r += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_against_triple_loop() {
        // independent oracle: naive triple loop, separate from mm_acc's layout
        let m = 3;
        let k = 4;
        let n = 2;
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64) * 0.37 - 1.1).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64) * -0.21 + 0.5).collect();
        let mut expect = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                expect[i * n + j] = s;
            }
        }
        let mut got = vec![0.0; m * n];
        mm_acc(&a, &b, &mut got, m, k, n);
        for (g, e) in got.iter().zip(expect.iter()) {
            assert!((g - e).abs() < 1e-12);
        }
        // transposed variants agree with the same oracle
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut got_nt = vec![0.0; m * n];
        mm_nt_acc(&a, &bt, &mut got_nt, m, k, n);
        for (g, e) in got_nt.iter().zip(expect.iter()) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn gelu_symmetry_point_and_slope() {
        assert_eq!(gelu(0.0), 0.0);
        // derivative via central difference
        let h = 1e-6;
        for &x in &[-2.0, -0.3, 0.0, 0.7, 3.0] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_deriv(x) - fd).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn conv_out_size_formula() {
        assert_eq!(conv_out_size(4, 3, 1, 0), 2);
        assert_eq!(conv_out_size(64, 4, 4, 0), 16);
        assert_eq!(conv_out_size(16, 3, 1, 1), 16);
        assert_eq!(conv_out_size(8, 2, 2, 0), 4);
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y
        let (b, c, h, w, kh, kw, s, p) = (1, 2, 5, 4, 3, 2, 2, 1);
        let x: Vec<f64> = (0..b * c * h * w).map(|i| (i as f64 * 0.7).sin()).collect();
        let mut cols = Vec::new();
        let (rows, kcols) = im2col(&x, b, c, h, w, 0, c, kh, kw, s, p, &mut cols);
        let y: Vec<f64> = (0..rows * kcols).map(|i| (i as f64 * 0.3).cos()).collect();
        let lhs: f64 = cols.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
        let mut xback = vec![0.0; x.len()];
        col2im_acc(&y, &mut xback, b, c, h, w, 0, c, kh, kw, s, p);
        let rhs: f64 = x.iter().zip(xback.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
