//! Spatial operations: 2-D convolution, bilinear upsampling, and 2x2 average
//! pooling.
//!
//! Convolution is the cross-correlation form (no kernel flip) with zero
//! padding, lowered to a matrix product via im2col. The column buffer is
//! rebuilt per batch element in both passes, trading a little recompute for
//! not retaining large activations on the tape.

use super::graph::{add_grad, Node, Op};
use super::ops::{mm, mm_tn, transpose};
use super::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Output extent of a convolution along one axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Contract("convolution stride must be positive".into()));
    }
    if input + 2 * pad < kernel {
        return Err(Error::Shape(format!(
            "kernel {kernel} does not fit input {input} with padding {pad}"
        )));
    }
    Ok((input + 2 * pad - kernel) / stride + 1)
}

/// Gather the padded input patches of one image into a `[cin*kh*kw, oh*ow]`
/// column matrix (zeros where the patch hangs over the border).
#[allow(clippy::too_many_arguments)]
fn im2col<R: Real>(
    x: &[R],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    col: &mut [R],
) {
    debug_assert_eq!(col.len(), cin * kh * kw * oh * ow);
    let l = oh * ow;
    for ci in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let q = (ci * kh + ky) * kw + kx;
                let dst = &mut col[q * l..(q + 1) * l];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        for d in drow.iter_mut() {
                            *d = R::zero();
                        }
                        continue;
                    }
                    let src_row = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            R::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add a column-matrix gradient back onto the input image.
#[allow(clippy::too_many_arguments)]
fn col2im_add<R: Real>(
    dcol: &[R],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dx: &mut [R],
) {
    let l = oh * ow;
    for ci in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let q = (ci * kh + ky) * kw + kx;
                let src = &dcol[q * l..(q + 1) * l];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut dx[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            let i = ix as usize;
                            drow[i] = drow[i] + src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Precomputed source indices and blend weight for one interpolated axis.
fn bilinear_axis(out: usize, factor: usize, input: usize) -> Vec<(usize, usize, f64)> {
    (0..out)
        .map(|d| {
            // Half-pixel mapping with edge clamp.
            let s = ((d as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

impl<R: Real> Graph<R> {
    /// 2-D convolution (cross-correlation) of `x` `[B,Cin,H,W]` with weights
    /// `[Cout,Cin,kh,kw]`, optional bias `[Cout]`, zero padding `pad` on all
    /// sides and equal stride in both axes. The output extent follows
    /// `(H + 2*pad - kh) / stride + 1` (floor division).
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (bs, cin, h, wd) = self.value(x).dims4()?;
        let (cout, wcin, kh, kw) = self.value(w).dims4()?;
        if wcin != cin {
            return Err(Error::Shape(format!(
                "conv2d weights expect {wcin} input channels, input has {cin}"
            )));
        }
        if let Some(bv) = b {
            if self.value(bv).len() != cout {
                return Err(Error::Shape(format!(
                    "conv2d bias must have {cout} elements, got {}",
                    self.value(bv).len()
                )));
            }
        }
        let oh = conv_out_extent(h, kh, stride, pad)?;
        let ow = conv_out_extent(wd, kw, stride, pad)?;
        let (q, l) = (cin * kh * kw, oh * ow);
        let mut col = vec![R::zero(); q * l];
        let mut out = vec![R::zero(); bs * cout * l];
        let wdat = self.value(w).data();
        let xdat = self.value(x).data();
        let bias: Option<Vec<R>> = b.map(|bv| self.value(bv).data().to_vec());
        for bi in 0..bs {
            im2col(
                &xdat[bi * cin * h * wd..(bi + 1) * cin * h * wd],
                cin,
                h,
                wd,
                kh,
                kw,
                stride,
                pad,
                oh,
                ow,
                &mut col,
            );
            let oslice = &mut out[bi * cout * l..(bi + 1) * cout * l];
            mm(wdat, &col, cout, q, l, oslice);
            if let Some(bias) = &bias {
                for co in 0..cout {
                    let bvv = bias[co];
                    for o in &mut oslice[co * l..(co + 1) * l] {
                        *o = *o + bvv;
                    }
                }
            }
        }
        let value = Tensor::new(&[bs, cout, oh, ow], out)?;
        let needs =
            self.needs(x) || self.needs(w) || b.map(|bv| self.needs(bv)).unwrap_or(false);
        self.push(value, Op::Conv2d { x, w, b, stride, pad }, needs)
    }

    /// Bilinear upsampling by an integer factor using half-pixel source
    /// coordinates `s = (d + 0.5)/factor - 0.5` with edge clamping.
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor < 2 {
            return Err(Error::Contract(format!(
                "upsample factor must be at least 2, got {factor}"
            )));
        }
        let (b, c, h, w) = self.value(x).dims4()?;
        let (oh, ow) = (h * factor, w * factor);
        let ys = bilinear_axis(oh, factor, h);
        let xs = bilinear_axis(ow, factor, w);
        let data = self.value(x).data();
        let mut out = vec![R::zero(); b * c * oh * ow];
        for bc in 0..b * c {
            let src = &data[bc * h * w..(bc + 1) * h * w];
            let dst = &mut out[bc * oh * ow..(bc + 1) * oh * ow];
            for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
                let ty = R::of(ty);
                let r0 = &src[y0 * w..(y0 + 1) * w];
                let r1 = &src[y1 * w..(y1 + 1) * w];
                let drow = &mut dst[oy * ow..(oy + 1) * ow];
                for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
                    let tx = R::of(tx);
                    let top = r0[x0] + tx * (r0[x1] - r0[x0]);
                    let bot = r1[x0] + tx * (r1[x1] - r1[x0]);
                    drow[ox] = top + ty * (bot - top);
                }
            }
        }
        let value = Tensor::new(&[b, c, oh, ow], out)?;
        let needs = self.needs(x);
        self.push(value, Op::UpsampleBilinear { x, factor }, needs)
    }

    /// Convenience wrapper for the factor-2 case used between scales.
    pub fn upsample_bilinear_x2(&mut self, x: Var) -> Result<Var> {
        self.upsample_bilinear(x, 2)
    }

    /// 2x2 average pooling with stride 2; spatial extents must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!(
                "avg_pool2 requires even extents, got {h}x{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let quarter = R::of(0.25);
        let data = self.value(x).data();
        let mut out = vec![R::zero(); b * c * oh * ow];
        for bc in 0..b * c {
            let src = &data[bc * h * w..(bc + 1) * h * w];
            let dst = &mut out[bc * oh * ow..(bc + 1) * oh * ow];
            for oy in 0..oh {
                let r0 = &src[2 * oy * w..(2 * oy + 1) * w];
                let r1 = &src[(2 * oy + 1) * w..(2 * oy + 2) * w];
                let drow = &mut dst[oy * ow..(oy + 1) * ow];
                for ox in 0..ow {
                    drow[ox] =
                        (r0[2 * ox] + r0[2 * ox + 1] + r1[2 * ox] + r1[2 * ox + 1]) * quarter;
                }
            }
        }
        let value = Tensor::new(&[b, c, oh, ow], out)?;
        let needs = self.needs(x);
        self.push(value, Op::AvgPool2(x), needs)
    }
}

/// Backward rules for the spatial operations.
pub(crate) fn backward_conv_family<R: Real>(
    nodes: &[Node<R>],
    grads: &mut [Option<Tensor<R>>],
    idx: usize,
    gout: &Tensor<R>,
) -> Result<()> {
    let needs = |v: Var| nodes[v.0].needs_grad;
    let val = |v: Var| &nodes[v.0].value;
    let g = gout.data();
    match &nodes[idx].op {
        Op::Conv2d { x, w, b, stride, pad } => {
            let (bs, cin, h, wd) = val(*x).dims4()?;
            let (cout, _, kh, kw) = val(*w).dims4()?;
            let (oh, ow) = {
                let s = nodes[idx].value.shape();
                (s[2], s[3])
            };
            let (q, l) = (cin * kh * kw, oh * ow);
            if let Some(bv) = *b {
                if needs(bv) {
                    let mut db = vec![R::zero(); cout];
                    for bi in 0..bs {
                        for co in 0..cout {
                            let base = (bi * cout + co) * l;
                            let mut s = R::zero();
                            for &gg in &g[base..base + l] {
                                s = s + gg;
                            }
                            db[co] = db[co] + s;
                        }
                    }
                    add_grad(grads, bv, val(bv).shape(), &db);
                }
            }
            let need_w = needs(*w);
            let need_x = needs(*x);
            if need_w || need_x {
                let xdat = val(*x).data();
                let wdat = val(*w).data();
                let mut col = vec![R::zero(); q * l];
                let mut col_t = vec![R::zero(); q * l];
                let mut dw = if need_w { vec![R::zero(); cout * q] } else { Vec::new() };
                let mut dx = if need_x { vec![R::zero(); bs * cin * h * wd] } else { Vec::new() };
                let mut dcol = if need_x { vec![R::zero(); q * l] } else { Vec::new() };
                for bi in 0..bs {
                    let gslice = &g[bi * cout * l..(bi + 1) * cout * l];
                    if need_w {
                        im2col(
                            &xdat[bi * cin * h * wd..(bi + 1) * cin * h * wd],
                            cin, h, wd, kh, kw, *stride, *pad, oh, ow, &mut col,
                        );
                        // dW += G · colᵀ, accumulated over the batch.
                        transpose(&col, q, l, &mut col_t);
                        mm(gslice, &col_t, cout, l, q, &mut dw);
                    }
                    if need_x {
                        // dCol = Wᵀ · G, then scatter back onto the image.
                        for d in dcol.iter_mut() {
                            *d = R::zero();
                        }
                        mm_tn(wdat, gslice, cout, q, l, &mut dcol);
                        col2im_add(
                            &dcol,
                            cin, h, wd, kh, kw, *stride, *pad, oh, ow,
                            &mut dx[bi * cin * h * wd..(bi + 1) * cin * h * wd],
                        );
                    }
                }
                if need_w {
                    add_grad(grads, *w, val(*w).shape(), &dw);
                }
                if need_x {
                    add_grad(grads, *x, val(*x).shape(), &dx);
                }
            }
        }
        Op::UpsampleBilinear { x, factor } => {
            if needs(*x) {
                let (b, c, h, w) = val(*x).dims4()?;
                let (oh, ow) = (h * factor, w * factor);
                let ys = bilinear_axis(oh, *factor, h);
                let xs = bilinear_axis(ow, *factor, w);
                let mut dx = vec![R::zero(); b * c * h * w];
                for bc in 0..b * c {
                    let gsl = &g[bc * oh * ow..(bc + 1) * oh * ow];
                    let dsl = &mut dx[bc * h * w..(bc + 1) * h * w];
                    for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
                        let ty = R::of(ty);
                        for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
                            let tx = R::of(tx);
                            let gg = gsl[oy * ow + ox];
                            let one = R::one();
                            dsl[y0 * w + x0] = dsl[y0 * w + x0] + gg * (one - ty) * (one - tx);
                            dsl[y0 * w + x1] = dsl[y0 * w + x1] + gg * (one - ty) * tx;
                            dsl[y1 * w + x0] = dsl[y1 * w + x0] + gg * ty * (one - tx);
                            dsl[y1 * w + x1] = dsl[y1 * w + x1] + gg * ty * tx;
                        }
                    }
                }
                add_grad(grads, *x, val(*x).shape(), &dx);
            }
        }
        Op::AvgPool2(x) => {
            if needs(*x) {
                let (b, c, h, w) = val(*x).dims4()?;
                let (oh, ow) = (h / 2, w / 2);
                let quarter = R::of(0.25);
                let mut dx = vec![R::zero(); b * c * h * w];
                for bc in 0..b * c {
                    let gsl = &g[bc * oh * ow..(bc + 1) * oh * ow];
                    let dsl = &mut dx[bc * h * w..(bc + 1) * h * w];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gg = gsl[oy * ow + ox] * quarter;
                            dsl[2 * oy * w + 2 * ox] = dsl[2 * oy * w + 2 * ox] + gg;
                            dsl[2 * oy * w + 2 * ox + 1] = dsl[2 * oy * w + 2 * ox + 1] + gg;
                            dsl[(2 * oy + 1) * w + 2 * ox] = dsl[(2 * oy + 1) * w + 2 * ox] + gg;
                            dsl[(2 * oy + 1) * w + 2 * ox + 1] =
                                dsl[(2 * oy + 1) * w + 2 * ox + 1] + gg;
                        }
                    }
                }
                add_grad(grads, *x, val(*x).shape(), &dx);
            }
        }
        _ => unreachable!("backward_conv_family called for a non-spatial op"),
    }
    Ok(())
}
