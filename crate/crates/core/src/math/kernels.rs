//! Forward and backward kernels for the primitives the tape records.
//!
//! All image tensors are `[n, c, h, w]`. Convolution lowers to GEMM through
//! an explicit column buffer.

use matrixmultiply::dgemm;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

/// `c = alpha * a(m×k) · b(k×n) + beta * c`, all row-major and contiguous.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, alpha: f64, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    // SAFETY: slices are sized by the callers to m×k, k×n and m×n with the
    // row-major strides passed here.
    unsafe {
        dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c = a(m×k) · b(n×k)ᵀ + beta * c`.
#[allow(clippy::too_many_arguments)]
fn gemm_bt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    // SAFETY: b is n×k row-major; reading it with strides (1, k) yields bᵀ.
    unsafe {
        dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c = a(k×m)ᵀ · b(k×n)`.
fn gemm_at(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    // SAFETY: a is k×m row-major; strides (1, m) read it transposed.
    unsafe {
        dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(g: &ConvGeometry, x: &[f64], col: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    let mut row = 0;
    for c in 0..g.in_c {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *out = if ix < 0 || ix >= g.in_w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im(g: &ConvGeometry, col: &[f64], dx: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    let mut row = 0;
    for c in 0..g.in_c {
        let plane = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let src = &col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            line[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Batched 2-d convolution. `w` is `[out_c, in_c, k, k]`, `b` is `[out_c]`.
pub fn conv2d_forward(g: &ConvGeometry, n: usize, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane_out = g.out_c * oh * ow;
    let plane_in = g.in_c * g.in_h * g.in_w;
    let rows = g.col_rows();
    let mut out = vec![0.0; n * plane_out];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; rows * oh * ow]
    };
    for i in 0..n {
        let xi = &x[i * plane_in..(i + 1) * plane_in];
        let oi = &mut out[i * plane_out..(i + 1) * plane_out];
        for (c, &bias) in b.iter().enumerate() {
            oi[c * oh * ow..(c + 1) * oh * ow].fill(bias);
        }
        let cols: &[f64] = if g.is_pointwise() {
            xi
        } else {
            im2col(g, xi, &mut col);
            &col
        };
        gemm(g.out_c, rows, oh * ow, 1.0, w, cols, 1.0, oi);
    }
    out
}

/// Gradients of a batched convolution. Each requested gradient is returned
/// as `Some`; `dx` is skipped when the input does not need one.
#[allow(clippy::type_complexity)]
pub fn conv2d_backward(
    g: &ConvGeometry,
    n: usize,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane_out = g.out_c * oh * ow;
    let plane_in = g.in_c * g.in_h * g.in_w;
    let rows = g.col_rows();
    let mut dx = want_dx.then(|| vec![0.0; n * plane_in]);
    let mut dw = want_dw.then(|| vec![0.0; w.len()]);
    let mut db = want_dw.then(|| vec![0.0; g.out_c]);
    let mut col = vec![0.0; rows * oh * ow];
    for i in 0..n {
        let dyi = &dy[i * plane_out..(i + 1) * plane_out];
        if let (Some(dw), Some(db)) = (dw.as_mut(), db.as_mut()) {
            let xi = &x[i * plane_in..(i + 1) * plane_in];
            let cols: &[f64] = if g.is_pointwise() {
                xi
            } else {
                im2col(g, xi, &mut col);
                &col
            };
            gemm_bt(g.out_c, oh * ow, rows, dyi, cols, 1.0, dw);
            for (c, acc) in db.iter_mut().enumerate() {
                *acc += dyi[c * oh * ow..(c + 1) * oh * ow].iter().sum::<f64>();
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dxi = &mut dx[i * plane_in..(i + 1) * plane_in];
            if g.is_pointwise() {
                gemm_at(rows, g.out_c, oh * ow, w, dyi, dxi);
            } else {
                gemm_at(rows, g.out_c, oh * ow, w, dyi, &mut col);
                col2im(g, &col, dxi);
            }
        }
    }
    (dx, dw, db)
}

/// Interpolation taps for one axis of a bilinear resize with half-pixel
/// centers (the `align_corners = false` convention).
#[derive(Clone, Debug)]
pub struct Taps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    w_hi: Vec<f64>,
}

impl Taps {
    pub fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let mut lo = Vec::with_capacity(output);
        let mut hi = Vec::with_capacity(output);
        let mut w_hi = Vec::with_capacity(output);
        for o in 0..output {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            lo.push(i0);
            hi.push(i1);
            w_hi.push(if i1 == i0 { 0.0 } else { src - i0 as f64 });
        }
        Self { lo, hi, w_hi }
    }
}

pub fn upsample_forward(
    planes: usize,
    (ih, iw): (usize, usize),
    (oh, ow): (usize, usize),
    x: &[f64],
) -> Vec<f64> {
    let ty = Taps::new(ih, oh);
    let tx = Taps::new(iw, ow);
    let mut out = vec![0.0; planes * oh * ow];
    let mut rows = vec![0.0; ih * ow];
    for p in 0..planes {
        let src = &x[p * ih * iw..(p + 1) * ih * iw];
        for y in 0..ih {
            for o in 0..ow {
                let a = src[y * iw + tx.lo[o]];
                let b = src[y * iw + tx.hi[o]];
                rows[y * ow + o] = a + tx.w_hi[o] * (b - a);
            }
        }
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for o in 0..oh {
            let (r0, r1, t) = (ty.lo[o], ty.hi[o], ty.w_hi[o]);
            for c in 0..ow {
                let a = rows[r0 * ow + c];
                let b = rows[r1 * ow + c];
                dst[o * ow + c] = a + t * (b - a);
            }
        }
    }
    out
}

pub fn upsample_backward(
    planes: usize,
    (ih, iw): (usize, usize),
    (oh, ow): (usize, usize),
    dy: &[f64],
) -> Vec<f64> {
    let ty = Taps::new(ih, oh);
    let tx = Taps::new(iw, ow);
    let mut dx = vec![0.0; planes * ih * iw];
    let mut rows = vec![0.0; ih * ow];
    for p in 0..planes {
        rows.fill(0.0);
        let g = &dy[p * oh * ow..(p + 1) * oh * ow];
        for o in 0..oh {
            let (r0, r1, t) = (ty.lo[o], ty.hi[o], ty.w_hi[o]);
            for c in 0..ow {
                let v = g[o * ow + c];
                rows[r0 * ow + c] += (1.0 - t) * v;
                rows[r1 * ow + c] += t * v;
            }
        }
        let dst = &mut dx[p * ih * iw..(p + 1) * ih * iw];
        for y in 0..ih {
            for o in 0..ow {
                let v = rows[y * ow + o];
                dst[y * iw + tx.lo[o]] += (1.0 - tx.w_hi[o]) * v;
                dst[y * iw + tx.hi[o]] += tx.w_hi[o] * v;
            }
        }
    }
    dx
}

/// Softmax over the channel axis of `[n, c, h, w]`.
pub fn softmax_channels(n: usize, c: usize, hw: usize, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let mut buf = vec![0.0; c];
    for i in 0..n {
        let base = i * c * hw;
        for p in 0..hw {
            let mut m = f64::NEG_INFINITY;
            for (k, b) in buf.iter_mut().enumerate() {
                *b = x[base + k * hw + p];
                m = m.max(*b);
            }
            let mut s = 0.0;
            for b in buf.iter_mut() {
                *b = (*b - m).exp();
                s += *b;
            }
            for (k, b) in buf.iter().enumerate() {
                out[base + k * hw + p] = b / s;
            }
        }
    }
    out
}

pub fn softmax_channels_backward(n: usize, c: usize, hw: usize, y: &[f64], dy: &[f64]) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for i in 0..n {
        let base = i * c * hw;
        for p in 0..hw {
            let dot: f64 = (0..c)
                .map(|k| y[base + k * hw + p] * dy[base + k * hw + p])
                .sum();
            for k in 0..c {
                let j = base + k * hw + p;
                dx[j] = y[j] * (dy[j] - dot);
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(g: &ConvGeometry, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; g.out_c * oh * ow];
        for o in 0..g.out_c {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = b[o];
                    for c in 0..g.in_c {
                        for ky in 0..g.kernel {
                            for kx in 0..g.kernel {
                                let iy = (y * g.stride + ky) as isize - g.padding as isize;
                                let ix = (xx * g.stride + kx) as isize - g.padding as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < g.in_h && (ix as usize) < g.in_w {
                                    s += w[((o * g.in_c + c) * g.kernel + ky) * g.kernel + kx]
                                        * x[(c * g.in_h + iy as usize) * g.in_w + ix as usize];
                                }
                            }
                        }
                    }
                    out[(o * oh + y) * ow + xx] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let g = ConvGeometry {
            in_c: 2,
            in_h: 7,
            in_w: 6,
            out_c: 3,
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        let x: Vec<f64> = (0..2 * 7 * 6).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
        let w: Vec<f64> = (0..3 * 2 * 9).map(|i| ((i * 13 % 7) as f64) * 0.1 - 0.3).collect();
        let b = vec![0.5, -0.25, 0.0];
        let fast = conv2d_forward(&g, 1, &x, &w, &b);
        let slow = naive_conv(&g, &x, &w, &b);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_identity_and_constant() {
        let x: Vec<f64> = (0..9).map(|v| v as f64).collect();
        assert_eq!(upsample_forward(1, (3, 3), (3, 3), &x), x);
        let c = vec![2.0; 4];
        assert!(upsample_forward(1, (2, 2), (8, 8), &c)
            .iter()
            .all(|v| (v - 2.0).abs() < 1e-15));
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let x: Vec<f64> = (0..2 * 3 * 4).map(|v| (v as f64 * 0.7).sin()).collect();
        let dy: Vec<f64> = (0..2 * 12 * 16).map(|v| (v as f64 * 0.3).cos()).collect();
        let y = upsample_forward(2, (3, 4), (12, 16), &x);
        let dx = upsample_backward(2, (3, 4), (12, 16), &dy);
        let lhs: f64 = y.iter().zip(&dy).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
