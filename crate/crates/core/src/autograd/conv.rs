use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

/// Output extent of a sliding window, or an error when it is not a positive
/// integer.
pub(crate) fn window_out(extent: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if k == 0 || stride == 0 {
        return Err(Error::Shape(format!("kernel {k} and stride {stride} must be positive")));
    }
    let padded = extent + 2 * pad;
    if padded < k {
        return Err(Error::Shape(format!("window {k} larger than padded extent {padded}")));
    }
    Ok((padded - k) / stride + 1)
}

#[derive(Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn cols(&self) -> usize {
        self.c * self.k * self.k
    }
    fn spatial(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds one sample `[C,H,W]` into `[C·k·k, OH·OW]`.
fn im2col<E: Element>(x: &[E], g: &Geometry, cols: &mut [E]) {
    let (k, s, p) = (g.k, g.stride as isize, g.pad as isize);
    let n = g.spatial();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((c * k + ky) * k + kx) * n..((c * k + ky) * k + kx + 1) * n];
                for oy in 0..g.oh {
                    let iy = oy as isize * s - p + ky as isize;
                    let dst = &mut row[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        dst.iter_mut().for_each(|v| *v = E::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = ox as isize * s - p + kx as isize;
                        *d = if ix < 0 || ix >= g.w as isize { E::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back onto a `[C,H,W]` buffer.
fn col2im<E: Element>(cols: &[E], g: &Geometry, x: &mut [E]) {
    let (k, s, p) = (g.k, g.stride as isize, g.pad as isize);
    let n = g.spatial();
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((c * k + ky) * k + kx) * n..((c * k + ky) * k + kx + 1) * n];
                for oy in 0..g.oh {
                    let iy = oy as isize * s - p + ky as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = ox as isize * s - p + kx as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += row[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn nchw(shape: &[usize], op: &str) -> Result<(usize, usize, usize, usize)> {
    match shape {
        [b, c, h, w] => Ok((*b, *c, *h, *w)),
        _ => Err(Error::Shape(format!("{op} expects [B,C,H,W], got {shape:?}"))),
    }
}

impl<E: Element> Tape<E> {
    /// Cross-correlation of `input [B,Cin,H,W]` with `kernel [Cout,Cin,k,k]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (b, c, h, w) = nchw(self.shape(input), "conv2d")?;
        let ks = self.shape(kernel).to_vec();
        if ks.len() != 4 || ks[1] != c || ks[2] != ks[3] {
            return Err(Error::ShapeMismatch { op: "conv2d", left: self.shape(input).to_vec(), right: ks });
        }
        let (o, k) = (ks[0], ks[2]);
        if k == 0 || stride == 0 {
            return Err(Error::Shape(format!("conv2d kernel {k} stride {stride}")));
        }
        let padded_h = h + 2 * pad;
        let padded_w = w + 2 * pad;
        if padded_h < k || padded_w < k {
            return Err(Error::Shape(format!("conv2d kernel {k} exceeds padded input {padded_h}x{padded_w}")));
        }
        let g = Geometry { c, h, w, k, stride, pad, oh: (padded_h - k) / stride + 1, ow: (padded_w - k) / stride + 1 };
        let n = g.spatial();
        let ckk = g.cols();
        let x = self.value(input).data();
        let kv = self.value(kernel).data();
        let mut out = vec![E::zero(); b * o * n];
        let mut cols = vec![E::zero(); ckk * n];
        for bi in 0..b {
            im2col(&x[bi * c * h * w..(bi + 1) * c * h * w], &g, &mut cols);
            E::gemm(o, ckk, n, kv, (ckk as isize, 1), &cols, (n as isize, 1), E::zero(), &mut out[bi * o * n..(bi + 1) * o * n]);
        }
        let value = Tensor::from_vec(&[b, o, g.oh, g.ow], out)?;
        Ok(self.push(
            value,
            &[input, kernel],
            Box::new(move |ctx| {
                let x = ctx.inputs[0].data();
                let kv = ctx.inputs[1].data();
                let gout = ctx.grad.data();
                let mut gx = ctx.needs[0].then(|| vec![E::zero(); b * c * h * w]);
                let mut gk = ctx.needs[1].then(|| vec![E::zero(); o * ckk]);
                let mut cols = vec![E::zero(); ckk * n];
                let mut gcols = vec![E::zero(); ckk * n];
                for bi in 0..b {
                    let go = &gout[bi * o * n..(bi + 1) * o * n];
                    if let Some(gk) = gk.as_mut() {
                        im2col(&x[bi * c * h * w..(bi + 1) * c * h * w], &g, &mut cols);
                        // gk[o, ckk] += go[o, n] · cols^T[n, ckk]
                        E::gemm(o, n, ckk, go, (n as isize, 1), &cols, (1, n as isize), E::one(), gk);
                    }
                    if let Some(gx) = gx.as_mut() {
                        // gcols[ckk, n] = kernel^T[ckk, o] · go[o, n]
                        E::gemm(ckk, o, n, kv, (1, ckk as isize), go, (n as isize, 1), E::zero(), &mut gcols);
                        col2im(&gcols, &g, &mut gx[bi * c * h * w..(bi + 1) * c * h * w]);
                    }
                }
                vec![
                    gx.map(|d| Tensor::from_vec(&[b, c, h, w], d).unwrap()),
                    gk.map(|d| Tensor::from_vec(&[o, c, k, k], d).unwrap()),
                ]
            }),
        ))
    }

    /// Windowed pooling over `[B,C,H,W]`. Padding counts toward the average
    /// window; max pooling pads with -inf and breaks ties toward the lowest
    /// index.
    pub fn pool2d(&mut self, input: Var, kind: PoolKind, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let (b, c, h, w) = nchw(self.shape(input), "pool2d")?;
        if 2 * pad > k {
            return Err(Error::Shape(format!("pool padding {pad} exceeds half the window {k}")));
        }
        let oh = window_out(h, k, stride, pad)?;
        let ow = window_out(w, k, stride, pad)?;
        let x = self.value(input).data();
        let planes = b * c;
        let mut out = vec![E::zero(); planes * oh * ow];
        let mut arg = if kind == PoolKind::Max { vec![0usize; out.len()] } else { vec![] };
        let inv = E::one() / E::from_usize(k * k).unwrap();
        for pl in 0..planes {
            let src = &x[pl * h * w..(pl + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let oi = pl * oh * ow + oy * ow + ox;
                    let mut best = E::neg_infinity();
                    let mut best_i = usize::MAX;
                    let mut acc = E::zero();
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let li = iy as usize * w + ix as usize;
                            let v = src[li];
                            acc += v;
                            if best_i == usize::MAX || v > best {
                                best = v;
                                best_i = li;
                            }
                        }
                    }
                    match kind {
                        PoolKind::Max => {
                            out[oi] = best;
                            arg[oi] = pl * h * w + best_i;
                        }
                        PoolKind::Avg => out[oi] = acc * inv,
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[b, c, oh, ow], out)?;
        Ok(self.push(
            value,
            &[input],
            Box::new(move |ctx| {
                let gout = ctx.grad.data();
                let mut gx = vec![E::zero(); planes * h * w];
                match kind {
                    PoolKind::Max => {
                        for (oi, &ii) in arg.iter().enumerate() {
                            gx[ii] += gout[oi];
                        }
                    }
                    PoolKind::Avg => {
                        for pl in 0..planes {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let gv = gout[pl * oh * ow + oy * ow + ox] * inv;
                                    for ky in 0..k {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..k {
                                            let ix = (ox * stride + kx) as isize - pad as isize;
                                            if ix >= 0 && ix < w as isize {
                                                gx[pl * h * w + iy as usize * w + ix as usize] += gv;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                vec![Some(Tensor::from_vec(&[b, c, h, w], gx).unwrap())]
            }),
        ))
    }

    /// Adaptive average pooling to `size × size` (bins `floor(i·H/s)..ceil((i+1)·H/s)`).
    pub fn adaptive_avg_pool2d(&mut self, input: Var, size: usize) -> Result<Var> {
        let (b, c, h, w) = nchw(self.shape(input), "adaptive_avg_pool2d")?;
        if size == 0 {
            return Err(Error::Shape("adaptive pool size must be positive".into()));
        }
        let bins = |extent: usize| -> Vec<(usize, usize)> {
            (0..size).map(|i| (i * extent / size, ((i + 1) * extent).div_ceil(size))).collect()
        };
        let (by, bx) = (bins(h), bins(w));
        let x = self.value(input).data();
        let planes = b * c;
        let mut out = vec![E::zero(); planes * size * size];
        for pl in 0..planes {
            for (oy, &(y0, y1)) in by.iter().enumerate() {
                for (ox, &(x0, x1)) in bx.iter().enumerate() {
                    let mut acc = E::zero();
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            acc += x[pl * h * w + yy * w + xx];
                        }
                    }
                    out[pl * size * size + oy * size + ox] = acc / E::from_usize((y1 - y0) * (x1 - x0)).unwrap();
                }
            }
        }
        let value = Tensor::from_vec(&[b, c, size, size], out)?;
        Ok(self.push(
            value,
            &[input],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut gx = vec![E::zero(); planes * h * w];
                for pl in 0..planes {
                    for (oy, &(y0, y1)) in by.iter().enumerate() {
                        for (ox, &(x0, x1)) in bx.iter().enumerate() {
                            let gv = g[pl * size * size + oy * size + ox] / E::from_usize((y1 - y0) * (x1 - x0)).unwrap();
                            for yy in y0..y1 {
                                for xx in x0..x1 {
                                    gx[pl * h * w + yy * w + xx] += gv;
                                }
                            }
                        }
                    }
                }
                vec![Some(Tensor::from_vec(&[b, c, h, w], gx).unwrap())]
            }),
        ))
    }

    /// Global average pooling `[B,C,H,W] -> [B,C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        nchw(self.shape(input), "global_avg_pool")?;
        self.mean_axes(input, &[2, 3])
    }
}
