//! Raw slice kernels shared by the tape and by tests.
//!
//! All buffers are row-major. Convolution works on one image at a time via
//! an im2col buffer of shape `[C*kh*kw, Ho*Wo]`.

/// Dot product with four partial sums so the loop vectorizes.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let k = i * 4;
        s[0] += a[k] * b[k];
        s[1] += a[k + 1] * b[k + 1];
        s[2] += a[k + 2] * b[k + 2];
        s[3] += a[k + 3] * b[k + 3];
    }
    let mut tail = 0.0;
    for k in chunks * 4..a.len() {
        tail += a[k] * b[k];
    }
    (s[0] + s[1]) + (s[2] + s[3]) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `c[m,n] += a[m,k] * b[k,n]`
pub fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                axpy(av, &b[p * n..(p + 1) * n], crow);
            }
        }
    }
}

/// `c[m,k] += a[m,n] * b[k,n]^T`
pub fn gemm_abt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            c[i * k + p] += dot(arow, &b[p * n..(p + 1) * n]);
        }
    }
}

/// `c[k,n] += a[m,k]^T * b[m,n]`
pub fn gemm_atb_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                axpy(av, brow, &mut c[p * n..(p + 1) * n]);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.padding - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.padding - self.kw) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let hw = ho * wo;
    let pad = g.padding as isize;
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for di in 0..g.kh {
            for dj in 0..g.kw {
                let row = (c * g.kh + di) * g.kw + dj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oi in 0..ho {
                    let ii = (oi * g.stride + di) as isize - pad;
                    let out_row = &mut dst[oi * wo..(oi + 1) * wo];
                    if ii < 0 || ii >= g.height as isize {
                        out_row.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[ii as usize * g.width..(ii as usize + 1) * g.width];
                    for (oj, v) in out_row.iter_mut().enumerate() {
                        let jj = (oj * g.stride + dj) as isize - pad;
                        *v = if jj < 0 || jj >= g.width as isize {
                            0.0
                        } else {
                            src[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_acc(cols: &[f64], g: &ConvGeom, gx: &mut [f64]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let hw = ho * wo;
    let pad = g.padding as isize;
    for c in 0..g.channels {
        let plane = &mut gx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for di in 0..g.kh {
            for dj in 0..g.kw {
                let row = (c * g.kh + di) * g.kw + dj;
                let src = &cols[row * hw..(row + 1) * hw];
                for oi in 0..ho {
                    let ii = (oi * g.stride + di) as isize - pad;
                    if ii < 0 || ii >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[ii as usize * g.width..(ii as usize + 1) * g.width];
                    for oj in 0..wo {
                        let jj = (oj * g.stride + dj) as isize - pad;
                        if jj >= 0 && jj < g.width as isize {
                            dst[jj as usize] += src[oi * wo + oj];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of one image `[C,H,W]` with `[K,C,kh,kw]` plus bias.
pub fn conv2d_forward(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let hw = g.out_h() * g.out_w();
    for (k, bias) in b.iter().enumerate() {
        out[k * hw..(k + 1) * hw].iter_mut().for_each(|v| *v = *bias);
    }
    if g.is_pointwise() {
        gemm_acc(w, x, out, g.out_channels, g.channels, hw);
    } else {
        let mut cols = vec![0.0; g.patch_len() * hw];
        im2col(x, g, &mut cols);
        gemm_acc(w, &cols, out, g.out_channels, g.patch_len(), hw);
    }
}

/// Accumulates gradients of one image's convolution into the provided buffers.
pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    g: &ConvGeom,
    gx: Option<&mut [f64]>,
    gw: Option<&mut [f64]>,
    gb: Option<&mut [f64]>,
) {
    let hw = g.out_h() * g.out_w();
    if let Some(gb) = gb {
        for (k, acc) in gb.iter_mut().enumerate() {
            *acc += gout[k * hw..(k + 1) * hw].iter().sum::<f64>();
        }
    }
    let pl = g.patch_len();
    if g.is_pointwise() {
        if let Some(gw) = gw {
            gemm_abt_acc(gout, x, gw, g.out_channels, hw, pl);
        }
        if let Some(gx) = gx {
            gemm_atb_acc(w, gout, gx, g.out_channels, pl, hw);
        }
        return;
    }
    if let Some(gw) = gw {
        let mut cols = vec![0.0; pl * hw];
        im2col(x, g, &mut cols);
        gemm_abt_acc(gout, &cols, gw, g.out_channels, hw, pl);
    }
    if let Some(gx) = gx {
        let mut gcols = vec![0.0; pl * hw];
        gemm_atb_acc(w, gout, &mut gcols, g.out_channels, pl, hw);
        col2im_acc(&gcols, g, gx);
    }
}

/// Transposed convolution (no padding) of one image `[C,H,W]` with kernel
/// `[C,K,kh,kw]`; output is `[K,(H-1)*s+kh,(W-1)*s+kw]`.
pub fn conv_transpose2d_forward(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let (oh, ow) = transpose_out_hw(g);
    for (k, bias) in b.iter().enumerate() {
        out[k * oh * ow..(k + 1) * oh * ow].iter_mut().for_each(|v| *v = *bias);
    }
    for c in 0..g.channels {
        for i in 0..g.height {
            for j in 0..g.width {
                let xv = x[(c * g.height + i) * g.width + j];
                if xv == 0.0 {
                    continue;
                }
                for k in 0..g.out_channels {
                    let wbase = (c * g.out_channels + k) * g.kh * g.kw;
                    for a in 0..g.kh {
                        let orow = (k * oh + i * g.stride + a) * ow + j * g.stride;
                        for bb in 0..g.kw {
                            out[orow + bb] += xv * w[wbase + a * g.kw + bb];
                        }
                    }
                }
            }
        }
    }
}

pub fn transpose_out_hw(g: &ConvGeom) -> (usize, usize) {
    (
        (g.height - 1) * g.stride + g.kh,
        (g.width - 1) * g.stride + g.kw,
    )
}

pub fn conv_transpose2d_backward(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    g: &ConvGeom,
    mut gx: Option<&mut [f64]>,
    mut gw: Option<&mut [f64]>,
    gb: Option<&mut [f64]>,
) {
    let (oh, ow) = transpose_out_hw(g);
    if let Some(gb) = gb {
        for (k, acc) in gb.iter_mut().enumerate() {
            *acc += gout[k * oh * ow..(k + 1) * oh * ow].iter().sum::<f64>();
        }
    }
    for c in 0..g.channels {
        for i in 0..g.height {
            for j in 0..g.width {
                let xi = (c * g.height + i) * g.width + j;
                let xv = x[xi];
                let mut acc = 0.0;
                for k in 0..g.out_channels {
                    let wbase = (c * g.out_channels + k) * g.kh * g.kw;
                    for a in 0..g.kh {
                        let orow = (k * oh + i * g.stride + a) * ow + j * g.stride;
                        for bb in 0..g.kw {
                            let go = gout[orow + bb];
                            acc += go * w[wbase + a * g.kw + bb];
                            if let Some(gw) = gw.as_deref_mut() {
                                gw[wbase + a * g.kw + bb] += xv * go;
                            }
                        }
                    }
                }
                if let Some(gx) = gx.as_deref_mut() {
                    gx[xi] += acc;
                }
            }
        }
    }
}

/// 2x2/2 max pooling over `planes` planes of `h x w`. Returns the output and
/// the flat input index chosen for every output cell; ties keep the first
/// cell in row-major order.
pub fn maxpool2x2(x: &[f64], planes: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + 2 * i * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + di) * w + 2 * j + dj;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Numerically stable softmax over consecutive rows of length `k`.
pub fn softmax_rows(x: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, dst) in x.chunks(k).zip(out.chunks_mut(k)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - m).exp();
            s += *d;
        }
        dst.iter_mut().for_each(|d| *d /= s);
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Smooth-L1 (Huber with beta = 1).
pub fn smooth_l1(t: f64) -> f64 {
    if t.abs() < 1.0 {
        0.5 * t * t
    } else {
        t.abs() - 0.5
    }
}

pub fn smooth_l1_grad(t: f64) -> f64 {
    if t.abs() < 1.0 {
        t
    } else {
        t.signum()
    }
}

/// `max(z,0) - z*t + ln(1 + e^-|z|)`
pub fn bce_with_logits(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}
