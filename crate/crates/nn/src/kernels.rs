//! Raw numeric kernels on contiguous NCHW buffers.
//!
//! Convolutions lower to im2col + GEMM. Everything here is single-threaded
//! and accumulates in a fixed order, so results are bit-reproducible.

/// Geometry of a square-kernel 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_size(&self, input: usize) -> usize {
        assert!(
            input + 2 * self.pad >= self.kernel,
            "input {input} too small for kernel {} with pad {}",
            self.kernel,
            self.pad
        );
        (input + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Output size of the transposed convolution with this geometry.
    pub fn transposed_out_size(&self, input: usize) -> usize {
        (input - 1) * self.stride + self.kernel - 2 * self.pad
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// `c = a · b (+ beta·c)` on row-major matrices; `ta`/`tb` read the stored
/// operand transposed.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds checked above against the strides chosen for each layout.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfold one `[channels, h, w]` image into a `[channels·k·k, oh·ow]` matrix.
pub fn im2col(
    input: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    g: ConvGeom,
    oh: usize,
    ow: usize,
    cols: &mut [f64],
) {
    let k = g.kernel;
    let spatial = oh * ow;
    for c in 0..channels {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * spatial..(row + 1) * spatial];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate columns back into the image.
pub fn col2im(
    cols: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    g: ConvGeom,
    oh: usize,
    ow: usize,
    out: &mut [f64],
) {
    let k = g.kernel;
    let spatial = oh * ow;
    for c in 0..channels {
        let plane = &mut out[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * spatial..(row + 1) * spatial];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Shapes of a convolution call: input `[n, cin, h, w]`, output `[n, cout, oh, ow]`.
#[derive(Debug, Clone, Copy)]
pub struct ConvShape {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub oh: usize,
    pub ow: usize,
}

pub fn conv2d_forward(x: &[f64], weight: &[f64], s: ConvShape, g: ConvGeom, out: &mut [f64]) {
    let rows = s.cin * g.kernel * g.kernel;
    let spatial = s.oh * s.ow;
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; rows * spatial]
    };
    for b in 0..s.n {
        let xb = &x[b * s.cin * s.h * s.w..(b + 1) * s.cin * s.h * s.w];
        let ob = &mut out[b * s.cout * spatial..(b + 1) * s.cout * spatial];
        let colref: &[f64] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, s.cin, s.h, s.w, g, s.oh, s.ow, &mut cols);
            &cols
        };
        gemm(s.cout, rows, spatial, weight, false, colref, false, ob, 0.0);
    }
}

/// Gradient of a convolution with respect to its input.
pub fn conv2d_backward_input(
    dout: &[f64],
    weight: &[f64],
    s: ConvShape,
    g: ConvGeom,
    dx: &mut [f64],
) {
    let rows = s.cin * g.kernel * g.kernel;
    let spatial = s.oh * s.ow;
    let mut dcols = vec![0.0; rows * spatial];
    for b in 0..s.n {
        let db = &dout[b * s.cout * spatial..(b + 1) * s.cout * spatial];
        let dxb = &mut dx[b * s.cin * s.h * s.w..(b + 1) * s.cin * s.h * s.w];
        if g.is_pointwise() {
            gemm(rows, s.cout, spatial, weight, true, db, false, dxb, 1.0);
        } else {
            gemm(rows, s.cout, spatial, weight, true, db, false, &mut dcols, 0.0);
            col2im(&dcols, s.cin, s.h, s.w, g, s.oh, s.ow, dxb);
        }
    }
}

/// Gradient of a convolution with respect to its weights (accumulated).
pub fn conv2d_backward_weight(
    dout: &[f64],
    x: &[f64],
    s: ConvShape,
    g: ConvGeom,
    dweight: &mut [f64],
) {
    let rows = s.cin * g.kernel * g.kernel;
    let spatial = s.oh * s.ow;
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; rows * spatial]
    };
    for b in 0..s.n {
        let xb = &x[b * s.cin * s.h * s.w..(b + 1) * s.cin * s.h * s.w];
        let db = &dout[b * s.cout * spatial..(b + 1) * s.cout * spatial];
        let colref: &[f64] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, s.cin, s.h, s.w, g, s.oh, s.ow, &mut cols);
            &cols
        };
        gemm(s.cout, spatial, rows, db, false, colref, true, dweight, 1.0);
    }
}

/// Transposed convolution. `s` describes the *forward* convolution that this
/// operator is the adjoint of: `s.cout/oh/ow` is this op's input and
/// `s.cin/h/w` its output. Weights are `[s.cout, s.cin, k, k]`.
pub fn conv_transpose2d_forward(
    x: &[f64],
    weight: &[f64],
    s: ConvShape,
    g: ConvGeom,
    out: &mut [f64],
) {
    out.fill(0.0);
    // Adjoint of the convolution whose weight matrix is [s.cout, s.cin·k·k].
    conv2d_backward_input(x, weight, s, g, out);
}

pub fn avg_pool_forward(
    x: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    g: ConvGeom,
    out: &mut [f64],
) {
    let (oh, ow) = (g.out_size(h), g.out_size(w));
    let norm = 1.0 / (g.kernel * g.kernel) as f64;
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ki in 0..g.kernel {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..g.kernel {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            acc += src[iy as usize * w + ix as usize];
                        }
                    }
                }
                dst[oy * ow + ox] = acc * norm;
            }
        }
    }
}

pub fn avg_pool_backward(
    dout: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    g: ConvGeom,
    dx: &mut [f64],
) {
    let (oh, ow) = (g.out_size(h), g.out_size(w));
    let norm = 1.0 / (g.kernel * g.kernel) as f64;
    for p in 0..planes {
        let src = &dout[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let gval = src[oy * ow + ox] * norm;
                for ki in 0..g.kernel {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..g.kernel {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[iy as usize * w + ix as usize] += gval;
                        }
                    }
                }
            }
        }
    }
}
