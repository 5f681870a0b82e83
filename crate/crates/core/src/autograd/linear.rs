use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Per-channel batch statistics from a training-mode normalisation.
#[derive(Clone, Debug)]
pub struct BatchStats<E> {
    pub mean: Vec<E>,
    /// Biased (population) variance.
    pub var: Vec<E>,
    /// Elements reduced per channel.
    pub count: usize,
}

fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::Shape(format!("batch_norm needs [B,C,...], got {shape:?}")));
    }
    let inner: usize = shape[2..].iter().product();
    Ok((shape[0], shape[1], inner))
}

impl<E: Element> Tape<E> {
    /// Affine map `x·Wᵀ + b` for `x [..., Fin]`, `weight [Fout, Fin]`.
    pub fn dense(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        let fin = *xs.last().ok_or_else(|| Error::Shape("dense on rank-0 input".into()))?;
        if ws.len() != 2 || ws[1] != fin {
            return Err(Error::ShapeMismatch { op: "dense", left: xs, right: ws });
        }
        let fout = ws[0];
        if let Some(b) = bias {
            if self.shape(b) != [fout] {
                return Err(Error::ShapeMismatch { op: "dense bias", left: vec![fout], right: self.shape(b).to_vec() });
            }
        }
        let rows = self.value(x).len() / fin.max(1);
        let mut out = vec![E::zero(); rows * fout];
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for r in 0..rows {
                out[r * fout..(r + 1) * fout].copy_from_slice(bv);
            }
        }
        let beta = if bias.is_some() { E::one() } else { E::zero() };
        E::gemm(rows, fin, fout, self.value(x).data(), (fin as isize, 1), self.value(weight).data(), (1, fin as isize), beta, &mut out);
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = fout;
        let value = Tensor::from_vec(&out_shape, out)?;
        let inputs: Vec<Var> = match bias {
            Some(b) => vec![x, weight, b],
            None => vec![x, weight],
        };
        Ok(self.push(
            value,
            &inputs,
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut res = Vec::with_capacity(3);
                res.push(ctx.needs[0].then(|| {
                    let mut gx = vec![E::zero(); rows * fin];
                    E::gemm(rows, fout, fin, g, (fout as isize, 1), ctx.inputs[1].data(), (fin as isize, 1), E::zero(), &mut gx);
                    Tensor::from_vec(&xs, gx).unwrap()
                }));
                res.push(ctx.needs[1].then(|| {
                    let mut gw = vec![E::zero(); fout * fin];
                    E::gemm(fout, rows, fin, g, (1, fout as isize), ctx.inputs[0].data(), (fin as isize, 1), E::zero(), &mut gw);
                    Tensor::from_vec(&[fout, fin], gw).unwrap()
                }));
                if ctx.inputs.len() == 3 {
                    res.push(ctx.needs[2].then(|| {
                        let mut gb = vec![E::zero(); fout];
                        for r in 0..rows {
                            for (acc, &v) in gb.iter_mut().zip(&g[r * fout..(r + 1) * fout]) {
                                *acc += v;
                            }
                        }
                        Tensor::from_vec(&[fout], gb).unwrap()
                    }));
                }
                res
            }),
        ))
    }

    /// Training-mode batch normalisation over every axis except 1.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats<E>)> {
        let (b, c, inner) = channel_layout(self.shape(x))?;
        self.check_affine(gamma, beta, c)?;
        let xv = self.value(x).data();
        let count = b * inner;
        let n = E::from_usize(count).unwrap();
        let mut mean = vec![E::zero(); c];
        let mut var = vec![E::zero(); c];
        for bi in 0..b {
            for ch in 0..c {
                let s = &xv[(bi * c + ch) * inner..(bi * c + ch + 1) * inner];
                mean[ch] += s.iter().copied().sum::<E>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        for bi in 0..b {
            for ch in 0..c {
                let s = &xv[(bi * c + ch) * inner..(bi * c + ch + 1) * inner];
                var[ch] += s.iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum::<E>();
            }
        }
        var.iter_mut().for_each(|v| *v /= n);
        let eps = E::from_f64_lossy(eps);
        let inv_std: Vec<E> = var.iter().map(|&v| E::one() / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data();
        let mut xhat = vec![E::zero(); xv.len()];
        let mut out = vec![E::zero(); xv.len()];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * inner;
                for i in base..base + inner {
                    xhat[i] = (xv[i] - mean[ch]) * inv_std[ch];
                    out[i] = gv[ch] * xhat[i] + bv[ch];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let value = Tensor::from_vec(&shape, out)?;
        let stats = BatchStats { mean, var, count };
        let var_out = self.push(
            value,
            &[x, gamma, beta],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut sum_g = vec![E::zero(); c];
                let mut sum_gx = vec![E::zero(); c];
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * inner;
                        for i in base..base + inner {
                            sum_g[ch] += g[i];
                            sum_gx[ch] += g[i] * xhat[i];
                        }
                    }
                }
                let gamma = ctx.inputs[1].data();
                let gx = ctx.needs[0].then(|| {
                    let mut gx = vec![E::zero(); g.len()];
                    for bi in 0..b {
                        for ch in 0..c {
                            let k = gamma[ch] * inv_std[ch] / n;
                            let base = (bi * c + ch) * inner;
                            for i in base..base + inner {
                                gx[i] = k * (n * g[i] - sum_g[ch] - xhat[i] * sum_gx[ch]);
                            }
                        }
                    }
                    Tensor::from_vec(&shape, gx).unwrap()
                });
                vec![
                    gx,
                    ctx.needs[1].then(|| Tensor::from_vec(&[c], sum_gx).unwrap()),
                    ctx.needs[2].then(|| Tensor::from_vec(&[c], sum_g).unwrap()),
                ]
            }),
        );
        Ok((var_out, stats))
    }

    /// Inference-mode normalisation with fixed statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[E], var: &[E], eps: f64) -> Result<Var> {
        let (b, c, inner) = channel_layout(self.shape(x))?;
        self.check_affine(gamma, beta, c)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::Shape(format!("running stats of length {} for {c} channels", mean.len())));
        }
        let eps = E::from_f64_lossy(eps);
        let inv_std: Vec<E> = var.iter().map(|&v| E::one() / (v + eps).sqrt()).collect();
        let mean = mean.to_vec();
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = vec![E::zero(); xv.len()];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * inner;
                for i in base..base + inner {
                    out[i] = gv[ch] * (xv[i] - mean[ch]) * inv_std[ch] + bv[ch];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let value = Tensor::from_vec(&shape, out)?;
        Ok(self.push(
            value,
            &[x, gamma, beta],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let xv = ctx.inputs[0].data();
                let gamma = ctx.inputs[1].data();
                let mut gx = vec![E::zero(); g.len()];
                let mut sum_g = vec![E::zero(); c];
                let mut sum_gx = vec![E::zero(); c];
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * inner;
                        for i in base..base + inner {
                            gx[i] = g[i] * gamma[ch] * inv_std[ch];
                            sum_g[ch] += g[i];
                            sum_gx[ch] += g[i] * (xv[i] - mean[ch]) * inv_std[ch];
                        }
                    }
                }
                vec![
                    ctx.needs[0].then(|| Tensor::from_vec(&shape, gx).unwrap()),
                    ctx.needs[1].then(|| Tensor::from_vec(&[c], sum_gx).unwrap()),
                    ctx.needs[2].then(|| Tensor::from_vec(&[c], sum_g).unwrap()),
                ]
            }),
        ))
    }

    fn check_affine(&self, gamma: Var, beta: Var, c: usize) -> Result<()> {
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::ShapeMismatch {
                op: "batch_norm affine",
                left: self.shape(gamma).to_vec(),
                right: vec![c],
            });
        }
        Ok(())
    }
}
