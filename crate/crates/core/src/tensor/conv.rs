//! Convolution kernels: im2col + GEMM for dense convolution, direct loops
//! for the depthwise case.

use super::linalg::gemm;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kh: usize, kw: usize, stride: usize, pad: usize) -> Option<Self> {
        let (n, c, h, w) = (input[0], input[1], input[2], input[3]);
        if stride == 0 || kh > h + 2 * pad || kw > w + 2 * pad {
            return None;
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Some(Self {
            n,
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        })
    }

    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one sample (`c × h × w`) into a `(c·kh·kw) × (oh·ow)` matrix.
fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let ncols = g.col_cols();
    for ch in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ch * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &x[(ch * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
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

/// Adjoint of [`im2col`]: scatters-adds columns back into a sample gradient.
fn col2im(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let ncols = g.col_cols();
    for ch in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ch * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(ch * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    g: &ConvGeom,
    filters: usize,
    x: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let in_sample = g.c * g.h * g.w;
    let out_sample = filters * g.col_cols();
    let mut out = vec![0.0; g.n * out_sample];
    let mut cols = vec![0.0; if g.is_pointwise() { 0 } else { g.col_rows() * g.col_cols() }];
    for s in 0..g.n {
        let xs = &x[s * in_sample..(s + 1) * in_sample];
        let os = &mut out[s * out_sample..(s + 1) * out_sample];
        if let Some(b) = bias {
            for (f, row) in os.chunks_mut(g.col_cols()).enumerate() {
                row.fill(b[f]);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        let src: &[f64] = if g.is_pointwise() {
            xs
        } else {
            im2col(g, xs, &mut cols);
            &cols
        };
        gemm(filters, g.col_rows(), g.col_cols(), weight, false, src, false, beta, os);
    }
    out
}

/// Gradients of a dense convolution. Returns `(dx, dweight, dbias)`, each
/// only when requested.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    filters: usize,
    x: &[f64],
    weight: &[f64],
    dout: &[f64],
    want: (bool, bool, bool),
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let in_sample = g.c * g.h * g.w;
    let out_sample = filters * g.col_cols();
    let mut dx = want.0.then(|| vec![0.0; g.n * in_sample]);
    let mut dw = want.1.then(|| vec![0.0; weight.len()]);
    let mut db = want.2.then(|| vec![0.0; filters]);
    let pointwise = g.is_pointwise();
    let mut cols = vec![0.0; if pointwise { 0 } else { g.col_rows() * g.col_cols() }];
    let mut dcols = vec![0.0; g.col_rows() * g.col_cols()];
    for s in 0..g.n {
        let ds = &dout[s * out_sample..(s + 1) * out_sample];
        if let Some(db) = db.as_mut() {
            for (f, row) in ds.chunks(g.col_cols()).enumerate() {
                db[f] += row.iter().sum::<f64>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            let xs = &x[s * in_sample..(s + 1) * in_sample];
            let src: &[f64] = if pointwise {
                xs
            } else {
                im2col(g, xs, &mut cols);
                &cols
            };
            gemm(filters, g.col_cols(), g.col_rows(), ds, false, src, true, 1.0, dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[s * in_sample..(s + 1) * in_sample];
            if pointwise {
                gemm(g.col_rows(), filters, g.col_cols(), weight, true, ds, false, 1.0, dxs);
            } else {
                gemm(g.col_rows(), filters, g.col_cols(), weight, true, ds, false, 0.0, &mut dcols);
                col2im(g, &dcols, dxs);
            }
        }
    }
    (dx, dw, db)
}

/// Depthwise convolution: channel `c` of the input is filtered only by
/// kernel `c` (weight shape `[c, 1, kh, kw]`).
pub(crate) fn depthwise_forward(g: &ConvGeom, x: &[f64], weight: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.n * g.c * g.oh * g.ow];
    for s in 0..g.n {
        for ch in 0..g.c {
            let xs = &x[(s * g.c + ch) * g.h * g.w..][..g.h * g.w];
            let ks = &weight[ch * g.kh * g.kw..][..g.kh * g.kw];
            let os = &mut out[(s * g.c + ch) * g.oh * g.ow..][..g.oh * g.ow];
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut acc = 0.0;
                    for ki in 0..g.kh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kj in 0..g.kw {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            acc += xs[iy as usize * g.w + ix as usize] * ks[ki * g.kw + kj];
                        }
                    }
                    os[oy * g.ow + ox] = acc;
                }
            }
        }
    }
    out
}

pub(crate) fn depthwise_backward(
    g: &ConvGeom,
    x: &[f64],
    weight: &[f64],
    dout: &[f64],
    want: (bool, bool),
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let mut dx = want.0.then(|| vec![0.0; x.len()]);
    let mut dw = want.1.then(|| vec![0.0; weight.len()]);
    for s in 0..g.n {
        for ch in 0..g.c {
            let base = (s * g.c + ch) * g.h * g.w;
            let ds = &dout[(s * g.c + ch) * g.oh * g.ow..][..g.oh * g.ow];
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let go = ds[oy * g.ow + ox];
                    if go == 0.0 {
                        continue;
                    }
                    for ki in 0..g.kh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kj in 0..g.kw {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            let xi = base + iy as usize * g.w + ix as usize;
                            let wi = (ch * g.kh + ki) * g.kw + kj;
                            if let Some(dx) = dx.as_mut() {
                                dx[xi] += go * weight[wi];
                            }
                            if let Some(dw) = dw.as_mut() {
                                dw[wi] += go * x[xi];
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}
