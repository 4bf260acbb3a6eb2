//! Raw loops behind the tape primitives. All reductions run in a fixed
//! order so results are bit-reproducible.

use super::scalar::Scalar;

/// `c[m,n] = a[m,k] * b[k,n]`.
pub(crate) fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// Gradients of [`matmul`] with respect to both operands.
pub(crate) fn matmul_backward<S: Scalar>(
    a: &[S],
    b: &[S],
    dc: &[S],
    m: usize,
    k: usize,
    n: usize,
) -> (Vec<S>, Vec<S>) {
    let mut da = vec![S::zero(); m * k];
    for i in 0..m {
        let drow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = S::zero();
            for (&d, &bv) in drow.iter().zip(brow) {
                acc += d * bv;
            }
            da[i * k + p] = acc;
        }
    }
    let mut db = vec![S::zero(); k * n];
    for i in 0..m {
        let drow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let dbrow = &mut db[p * n..(p + 1) * n];
            for (g, &d) in dbrow.iter_mut().zip(drow) {
                *g += av * d;
            }
        }
    }
    (da, db)
}

/// Static description of one 2-D convolution over a `[batch, cin, h, w]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub(crate) fn new(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if input.len() != 4 || kernel.len() != 4 || stride == 0 {
            return None;
        }
        let (batch, cin, h, w) = (input[0], input[1], input[2], input[3]);
        let (cout, kcin, k, k2) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if kcin != cin || k != k2 || h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Some(Self {
            batch,
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            ho,
            wo,
        })
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn in_size(&self) -> usize {
        self.cin * self.h * self.w
    }

    fn out_size(&self) -> usize {
        self.cout * self.ho * self.wo
    }

    /// Input coordinate read by output position `o` at kernel offset `kk`.
    fn source(&self, o: usize, kk: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + kk) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

fn im2col<S: Scalar>(x: &[S], g: &ConvGeom, col: &mut [S]) {
    let cols = g.cols();
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (c * g.k + ky) * g.k + kx;
                let dst = &mut col[r * cols..(r + 1) * cols];
                for oy in 0..g.ho {
                    let sy = g.source(oy, ky, g.h);
                    for ox in 0..g.wo {
                        dst[oy * g.wo + ox] = match (sy, g.source(ox, kx, g.w)) {
                            (Some(y), Some(xx)) => x[(c * g.h + y) * g.w + xx],
                            _ => S::zero(),
                        };
                    }
                }
            }
        }
    }
}

fn col2im<S: Scalar>(dcol: &[S], g: &ConvGeom, dx: &mut [S]) {
    let cols = g.cols();
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (c * g.k + ky) * g.k + kx;
                let src = &dcol[r * cols..(r + 1) * cols];
                for oy in 0..g.ho {
                    let Some(y) = g.source(oy, ky, g.h) else { continue };
                    for ox in 0..g.wo {
                        if let Some(xx) = g.source(ox, kx, g.w) {
                            dx[(c * g.h + y) * g.w + xx] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d<S: Scalar>(x: &[S], weight: &[S], bias: &[S], g: &ConvGeom) -> Vec<S> {
    let (rows, cols) = (g.rows(), g.cols());
    let mut out = vec![S::zero(); g.batch * g.out_size()];
    let mut col = vec![S::zero(); rows * cols];
    for b in 0..g.batch {
        im2col(&x[b * g.in_size()..(b + 1) * g.in_size()], g, &mut col);
        let ob = &mut out[b * g.out_size()..(b + 1) * g.out_size()];
        for co in 0..g.cout {
            let orow = &mut ob[co * cols..(co + 1) * cols];
            orow.fill(bias[co]);
            for r in 0..rows {
                let wv = weight[co * rows + r];
                if wv == S::zero() {
                    continue;
                }
                let crow = &col[r * cols..(r + 1) * cols];
                for (o, &cv) in orow.iter_mut().zip(crow) {
                    *o += wv * cv;
                }
            }
        }
    }
    out
}

/// Returns `(dx, dweight, dbias)`.
pub(crate) fn conv2d_backward<S: Scalar>(
    x: &[S],
    weight: &[S],
    dout: &[S],
    g: &ConvGeom,
    need_dx: bool,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let (rows, cols) = (g.rows(), g.cols());
    let mut dx = vec![S::zero(); if need_dx { x.len() } else { 0 }];
    let mut dw = vec![S::zero(); weight.len()];
    let mut db = vec![S::zero(); g.cout];
    let mut col = vec![S::zero(); rows * cols];
    let mut dcol = vec![S::zero(); rows * cols];
    for b in 0..g.batch {
        im2col(&x[b * g.in_size()..(b + 1) * g.in_size()], g, &mut col);
        let db_out = &dout[b * g.out_size()..(b + 1) * g.out_size()];
        dcol.fill(S::zero());
        for co in 0..g.cout {
            let drow = &db_out[co * cols..(co + 1) * cols];
            db[co] += drow.iter().copied().sum::<S>();
            for r in 0..rows {
                let crow = &col[r * cols..(r + 1) * cols];
                let mut acc = S::zero();
                for (&d, &cv) in drow.iter().zip(crow) {
                    acc += d * cv;
                }
                dw[co * rows + r] += acc;
                if need_dx {
                    let wv = weight[co * rows + r];
                    if wv != S::zero() {
                        let dc = &mut dcol[r * cols..(r + 1) * cols];
                        for (t, &d) in dc.iter_mut().zip(drow) {
                            *t += wv * d;
                        }
                    }
                }
            }
        }
        if need_dx {
            col2im(&dcol, g, &mut dx[b * g.in_size()..(b + 1) * g.in_size()]);
        }
    }
    (dx, dw, db)
}

/// Stride-1 convolution over the zero-insertion upsampling of `x` by
/// `factor`, without materializing the zeros. `g` describes the convolution
/// on the upsampled input.
pub(crate) fn upconv2d<S: Scalar>(x: &[S], weight: &[S], bias: &[S], g: &ConvGeom, factor: usize) -> Vec<S> {
    let (h, w) = (g.h / factor, g.w / factor);
    let (hw, plane) = (h * w, g.ho * g.wo);
    let mut out = vec![S::zero(); g.batch * g.out_size()];
    for b in 0..g.batch {
        let xb = &x[b * g.cin * hw..(b + 1) * g.cin * hw];
        for co in 0..g.cout {
            let orow = &mut out[(b * g.cout + co) * plane..(b * g.cout + co + 1) * plane];
            orow.fill(bias[co]);
            for ci in 0..g.cin {
                let xp = &xb[ci * hw..(ci + 1) * hw];
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let wv = weight[((co * g.cin + ci) * g.k + ky) * g.k + kx];
                        if wv == S::zero() {
                            continue;
                        }
                        for iy in 0..h {
                            let Some(oy) = (factor * iy + g.pad).checked_sub(ky).filter(|&v| v < g.ho) else { continue };
                            for ix in 0..w {
                                let Some(ox) = (factor * ix + g.pad).checked_sub(kx).filter(|&v| v < g.wo) else { continue };
                                orow[oy * g.wo + ox] += wv * xp[iy * w + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(dx, dweight, dbias)` for [`upconv2d`].
pub(crate) fn upconv2d_backward<S: Scalar>(
    x: &[S],
    weight: &[S],
    dout: &[S],
    g: &ConvGeom,
    factor: usize,
    need_dx: bool,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let (h, w) = (g.h / factor, g.w / factor);
    let (hw, plane) = (h * w, g.ho * g.wo);
    let mut dx = vec![S::zero(); if need_dx { x.len() } else { 0 }];
    let mut dw = vec![S::zero(); weight.len()];
    let mut db = vec![S::zero(); g.cout];
    for b in 0..g.batch {
        let xb = &x[b * g.cin * hw..(b + 1) * g.cin * hw];
        for co in 0..g.cout {
            let drow = &dout[(b * g.cout + co) * plane..(b * g.cout + co + 1) * plane];
            db[co] += drow.iter().copied().sum::<S>();
            for ci in 0..g.cin {
                let xp = &xb[ci * hw..(ci + 1) * hw];
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let widx = ((co * g.cin + ci) * g.k + ky) * g.k + kx;
                        let wv = weight[widx];
                        let mut acc = S::zero();
                        for iy in 0..h {
                            let Some(oy) = (factor * iy + g.pad).checked_sub(ky).filter(|&v| v < g.ho) else { continue };
                            for ix in 0..w {
                                let Some(ox) = (factor * ix + g.pad).checked_sub(kx).filter(|&v| v < g.wo) else { continue };
                                let d = drow[oy * g.wo + ox];
                                acc += d * xp[iy * w + ix];
                                if need_dx {
                                    dx[(b * g.cin + ci) * hw + iy * w + ix] += wv * d;
                                }
                            }
                        }
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Zero-insertion upsampling of the two trailing axes by `factor`.
pub(crate) fn upsample_zero<S: Scalar>(x: &[S], planes: usize, h: usize, w: usize, factor: usize) -> Vec<S> {
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![S::zero(); planes * oh * ow];
    for p in 0..planes {
        for i in 0..h {
            for j in 0..w {
                out[(p * oh + i * factor) * ow + j * factor] = x[(p * h + i) * w + j];
            }
        }
    }
    out
}

pub(crate) fn upsample_zero_backward<S: Scalar>(
    dy: &[S],
    planes: usize,
    h: usize,
    w: usize,
    factor: usize,
) -> Vec<S> {
    let (oh, ow) = (h * factor, w * factor);
    let mut dx = vec![S::zero(); planes * h * w];
    for p in 0..planes {
        for i in 0..h {
            for j in 0..w {
                dx[(p * h + i) * w + j] = dy[(p * oh + i * factor) * ow + j * factor];
            }
        }
    }
    dx
}
