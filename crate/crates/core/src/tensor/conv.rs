//! Direct-loop 2-d convolutions (cross-correlation) on the tape.

use super::{invalid, shape_err, BackwardCtx, Result, Tape, TapeOp, TensorId};

fn out_extent(op: &'static str, axis: &str, size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = size + 2 * pad;
    if padded < k {
        return Err(shape_err(
            op,
            format!("kernel {} exceeds padded {} extent {}", k, axis, padded),
        ));
    }
    let span = padded - k;
    if span % stride != 0 {
        return Err(shape_err(
            op,
            format!("{} extent {} with pad {} and kernel {} is not divisible by stride {}", axis, size, pad, k, stride),
        ));
    }
    Ok(span / stride + 1)
}

#[derive(Debug)]
struct Conv2dOp {
    stride: usize,
    pad: usize,
}

#[derive(Debug)]
struct DepthwiseConv2dOp {
    pad: usize,
}

struct ConvDims {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    ho: usize,
    wo: usize,
}

/// Valid tap range for one output coordinate: taps u with
/// 0 <= o*stride - pad + u < extent.
#[inline]
fn tap_range(o: usize, stride: usize, pad: usize, k: usize, extent: usize) -> (usize, usize) {
    let off = o * stride;
    let lo = pad.saturating_sub(off).min(k);
    let hi = (extent + pad - off).min(k);
    (lo, hi.max(lo))
}

fn conv_forward(x: &[f64], wt: &[f64], d: &ConvDims, stride: usize, pad: usize) -> Vec<f64> {
    let mut out = vec![0.0; d.n * d.c_out * d.ho * d.wo];
    for n in 0..d.n {
        for co in 0..d.c_out {
            for ho in 0..d.ho {
                let (u_lo, u_hi) = tap_range(ho, stride, pad, d.k, d.h);
                let hi0 = (ho * stride) as isize - pad as isize;
                for wo in 0..d.wo {
                    let (v_lo, v_hi) = tap_range(wo, stride, pad, d.k, d.w);
                    let wi0 = wo * stride + v_lo - pad;
                    let width = v_hi - v_lo;
                    let mut acc = 0.0;
                    for ci in 0..d.c_in {
                        let xbase = (n * d.c_in + ci) * d.h;
                        let wbase = ((co * d.c_in + ci) * d.k) * d.k;
                        for u in u_lo..u_hi {
                            let hi = (hi0 + u as isize) as usize;
                            let xrow = &x[(xbase + hi) * d.w + wi0..(xbase + hi) * d.w + wi0 + width];
                            let wrow = &wt[wbase + u * d.k + v_lo..wbase + u * d.k + v_lo + width];
                            for (xv, wv) in xrow.iter().zip(wrow.iter()) {
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((n * d.c_out + co) * d.ho + ho) * d.wo + wo] = acc;
                }
            }
        }
    }
    out
}

/// Scatter the output gradient back through the same tap pattern. The two
/// gradient targets run as separate passes so the inner loops stay tight.
fn conv_backward(
    x: &[f64],
    wt: &[f64],
    g: &[f64],
    d: &ConvDims,
    stride: usize,
    pad: usize,
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
) {
    if let Some(dx) = dx {
        for n in 0..d.n {
            for co in 0..d.c_out {
                for ho in 0..d.ho {
                    let (u_lo, u_hi) = tap_range(ho, stride, pad, d.k, d.h);
                    let hi0 = (ho * stride) as isize - pad as isize;
                    for wo in 0..d.wo {
                        let gv = g[((n * d.c_out + co) * d.ho + ho) * d.wo + wo];
                        if gv == 0.0 {
                            continue;
                        }
                        let (v_lo, v_hi) = tap_range(wo, stride, pad, d.k, d.w);
                        let wi0 = wo * stride + v_lo - pad;
                        let width = v_hi - v_lo;
                        for ci in 0..d.c_in {
                            let xbase = (n * d.c_in + ci) * d.h;
                            let wbase = ((co * d.c_in + ci) * d.k) * d.k;
                            for u in u_lo..u_hi {
                                let hi = (hi0 + u as isize) as usize;
                                let drow = &mut dx[(xbase + hi) * d.w + wi0..(xbase + hi) * d.w + wi0 + width];
                                let wrow = &wt[wbase + u * d.k + v_lo..wbase + u * d.k + v_lo + width];
                                for (dv, wv) in drow.iter_mut().zip(wrow.iter()) {
                                    *dv += gv * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(dw) = dw {
        for n in 0..d.n {
            for co in 0..d.c_out {
                for ho in 0..d.ho {
                    let (u_lo, u_hi) = tap_range(ho, stride, pad, d.k, d.h);
                    let hi0 = (ho * stride) as isize - pad as isize;
                    for wo in 0..d.wo {
                        let gv = g[((n * d.c_out + co) * d.ho + ho) * d.wo + wo];
                        if gv == 0.0 {
                            continue;
                        }
                        let (v_lo, v_hi) = tap_range(wo, stride, pad, d.k, d.w);
                        let wi0 = wo * stride + v_lo - pad;
                        let width = v_hi - v_lo;
                        for ci in 0..d.c_in {
                            let xbase = (n * d.c_in + ci) * d.h;
                            let wbase = ((co * d.c_in + ci) * d.k) * d.k;
                            for u in u_lo..u_hi {
                                let hi = (hi0 + u as isize) as usize;
                                let xrow = &x[(xbase + hi) * d.w + wi0..(xbase + hi) * d.w + wi0 + width];
                                let wrow = &mut dw[wbase + u * d.k + v_lo..wbase + u * d.k + v_lo + width];
                                for (wv, xv) in wrow.iter_mut().zip(xrow.iter()) {
                                    *wv += gv * xv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

impl TapeOp for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, ctx: &mut BackwardCtx<'_>) {
        let x = ctx.input(0);
        let w = ctx.input(1);
        let xs = ctx.shape(x).to_vec();
        let ws = ctx.shape(w).to_vec();
        let os = ctx.out_shape().to_vec();
        let d = ConvDims {
            n: xs[0],
            c_in: xs[1],
            h: xs[2],
            w: xs[3],
            c_out: ws[0],
            k: ws[2],
            ho: os[2],
            wo: os[3],
        };
        let mut dx = if ctx.needs_grad(x) { Some(vec![0.0; ctx.data(x).len()]) } else { None };
        let mut dw = if ctx.needs_grad(w) { Some(vec![0.0; ctx.data(w).len()]) } else { None };
        conv_backward(
            ctx.data(x),
            ctx.data(w),
            ctx.out_grad(),
            &d,
            self.stride,
            self.pad,
            dx.as_deref_mut(),
            dw.as_deref_mut(),
        );
        if let Some(dx) = dx {
            ctx.add_grad(x, &dx);
        }
        if let Some(dw) = dw {
            ctx.add_grad(w, &dw);
        }
    }
}

impl TapeOp for DepthwiseConv2dOp {
    fn name(&self) -> &'static str {
        "depthwise_conv2d"
    }

    fn backward(&self, ctx: &mut BackwardCtx<'_>) {
        let x = ctx.input(0);
        let w = ctx.input(1);
        let xs = ctx.shape(x).to_vec();
        let ws = ctx.shape(w).to_vec();
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let k = ws[2];
        let g = ctx.out_grad();
        let mut dx = if ctx.needs_grad(x) { Some(vec![0.0; ctx.data(x).len()]) } else { None };
        let mut dw = if ctx.needs_grad(w) { Some(vec![0.0; ctx.data(w).len()]) } else { None };
        let pad = self.pad as isize;
        let xd = ctx.data(x);
        let wt = ctx.data(w);
        for nn in 0..n {
            for cc in 0..c {
                let base = (nn * c + cc) * h;
                for ho in 0..h {
                    for wo in 0..wd {
                        let gv = g[(base + ho) * wd + wo];
                        if gv == 0.0 {
                            continue;
                        }
                        for u in 0..k {
                            let hi = ho as isize - pad + u as isize;
                            if hi < 0 || hi >= h as isize {
                                continue;
                            }
                            for v in 0..k {
                                let wi = wo as isize - pad + v as isize;
                                if wi < 0 || wi >= wd as isize {
                                    continue;
                                }
                                let xi = (base + hi as usize) * wd + wi as usize;
                                let widx = (cc * k + u) * k + v;
                                if let Some(dx) = dx.as_deref_mut() {
                                    dx[xi] += gv * wt[widx];
                                }
                                if let Some(dw) = dw.as_deref_mut() {
                                    dw[widx] += gv * xd[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
        if let Some(dx) = dx {
            ctx.add_grad(x, &dx);
        }
        if let Some(dw) = dw {
            ctx.add_grad(w, &dw);
        }
    }
}

impl Tape {
    /// 2-d cross-correlation: x [N,Cin,H,W] * w [Cout,Cin,k,k].
    ///
    /// Output extents must divide exactly: (H + 2·pad − k) % stride == 0.
    pub fn conv2d(&mut self, x: TensorId, w: TensorId, stride: usize, pad: usize) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 {
            return Err(shape_err("conv2d", format!("input must be [N,Cin,H,W], got {:?}", xs)));
        }
        if ws.len() != 4 || ws[2] != ws[3] {
            return Err(shape_err("conv2d", format!("weight must be [Cout,Cin,k,k], got {:?}", ws)));
        }
        if xs[1] != ws[1] {
            return Err(shape_err(
                "conv2d",
                format!("input channel axis 1 ({}) != weight channel axis 1 ({})", xs[1], ws[1]),
            ));
        }
        if stride == 0 || ws[2] == 0 {
            return Err(invalid("conv2d", "stride and kernel must be >= 1".into()));
        }
        let ho = out_extent("conv2d", "H", xs[2], ws[2], stride, pad)?;
        let wo = out_extent("conv2d", "W", xs[3], ws[3], stride, pad)?;
        let d = ConvDims {
            n: xs[0],
            c_in: xs[1],
            h: xs[2],
            w: xs[3],
            c_out: ws[0],
            k: ws[2],
            ho,
            wo,
        };
        let out = conv_forward(self.data(x), self.data(w), &d, stride, pad);
        Ok(self.push_op(
            out,
            vec![d.n, d.c_out, ho, wo],
            vec![x, w],
            Box::new(Conv2dOp { stride, pad }),
        ))
    }

    /// Depthwise convolution: x [N,C,H,W] * w [C,1,k,k], k odd, size-preserving.
    pub fn depthwise_conv2d(&mut self, x: TensorId, w: TensorId) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 {
            return Err(shape_err("depthwise_conv2d", format!("input must be [N,C,H,W], got {:?}", xs)));
        }
        if ws.len() != 4 || ws[1] != 1 || ws[2] != ws[3] {
            return Err(shape_err(
                "depthwise_conv2d",
                format!("weight must be [C,1,k,k], got {:?}", ws),
            ));
        }
        if xs[1] != ws[0] {
            return Err(shape_err(
                "depthwise_conv2d",
                format!("input channels ({}) != weight channels ({})", xs[1], ws[0]),
            ));
        }
        let k = ws[2];
        if k % 2 == 0 {
            return Err(invalid("depthwise_conv2d", format!("kernel size {} must be odd", k)));
        }
        let pad = (k - 1) / 2;
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let xd = self.data(x);
        let wt = self.data(w);
        let mut out = vec![0.0; n * c * h * wd];
        let ipad = pad as isize;
        for nn in 0..n {
            for cc in 0..c {
                let base = (nn * c + cc) * h;
                for ho in 0..h {
                    for wo in 0..wd {
                        let mut acc = 0.0;
                        for u in 0..k {
                            let hi = ho as isize - ipad + u as isize;
                            if hi < 0 || hi >= h as isize {
                                continue;
                            }
                            for v in 0..k {
                                let wi = wo as isize - ipad + v as isize;
                                if wi < 0 || wi >= wd as isize {
                                    continue;
                                }
                                acc += xd[(base + hi as usize) * wd + wi as usize] * wt[(cc * k + u) * k + v];
                            }
                        }
                        out[(base + ho) * wd + wo] = acc;
                    }
                }
            }
        }
        Ok(self.push_op(out, xs, vec![x, w], Box::new(DepthwiseConv2dOp { pad })))
    }
}

/// Reference convolution written as the literal six-nested-loop sum over
/// `x[n, ci, ho*stride - pad + u, wo*stride - pad + v] * w[co, ci, u, v]`.
/// Used only to check the tape kernel; keep it naive.
pub fn conv2d_oracle(
    x: &[f64],
    xs: &[usize],
    w: &[f64],
    ws: &[usize],
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let (n, c_in, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (c_out, k) = (ws[0], ws[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * c_out * ho * wo];
    for nn in 0..n {
        for co in 0..c_out {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..c_in {
                        for u in 0..k {
                            for v in 0..k {
                                let iy = (oy * stride + u) as isize - pad as isize;
                                let ix = (ox * stride + v) as isize - pad as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize {
                                    acc += x[((nn * c_in + ci) * h + iy as usize) * wd + ix as usize]
                                        * w[((co * c_in + ci) * k + u) * k + v];
                                }
                            }
                        }
                    }
                    out[((nn * c_out + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

/// Reference depthwise convolution, size-preserving, channel-diagonal.
pub fn depthwise_conv2d_oracle(x: &[f64], xs: &[usize], w: &[f64], k: usize) -> Vec<f64> {
    let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let pad = (k - 1) / 2;
    let mut out = vec![0.0; n * c * h * wd];
    for nn in 0..n {
        for cc in 0..c {
            for oy in 0..h {
                for ox in 0..wd {
                    let mut acc = 0.0;
                    for u in 0..k {
                        for v in 0..k {
                            let iy = (oy + u) as isize - pad as isize;
                            let ix = (ox + v) as isize - pad as isize;
                            if iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize {
                                acc += x[((nn * c + cc) * h + iy as usize) * wd + ix as usize]
                                    * w[(cc * k + u) * k + v];
                            }
                        }
                    }
                    out[((nn * c + cc) * h + oy) * wd + ox] = acc;
                }
            }
        }
    }
    out
}
