use std::rc::Rc;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{strides, Element, Tensor};

/// Maps each input linear index to its output linear index after removing
/// `axes` (which must be sorted and unique).
fn reduction_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let out_shape: Vec<usize> =
        shape.iter().enumerate().filter(|(i, _)| !axes.contains(i)).map(|(_, &d)| d).collect();
    let out_strides = strides(&out_shape);
    let rank = shape.len();
    let mut eff = vec![0usize; rank];
    let mut j = 0;
    for (i, e) in eff.iter_mut().enumerate() {
        if !axes.contains(&i) {
            *e = out_strides[j];
            j += 1;
        }
    }
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    let mut idx = 0usize;
    for _ in 0..n {
        map.push(idx);
        for d in (0..rank).rev() {
            counter[d] += 1;
            idx += eff[d];
            if counter[d] < shape[d] {
                break;
            }
            idx -= eff[d] * counter[d];
            counter[d] = 0;
        }
    }
    (out_shape, map)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Mean,
    Max,
}

impl<E: Element> Tape<E> {
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let in_shape = self.shape(a).to_vec();
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(
            value,
            &[a],
            Box::new(move |ctx| vec![Some(ctx.grad.clone().reshape(&in_shape).unwrap())]),
        ))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape(format!("invalid permutation {perm:?} for {shape:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let in_strides = strides(&shape);
        // src index for every output position
        let eff: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let n = self.value(a).len();
        let mut map = Vec::with_capacity(n);
        let mut counter = vec![0usize; shape.len()];
        let mut idx = 0usize;
        for _ in 0..n {
            map.push(idx);
            for d in (0..out_shape.len()).rev() {
                counter[d] += 1;
                idx += eff[d];
                if counter[d] < out_shape[d] {
                    break;
                }
                idx -= eff[d] * counter[d];
                counter[d] = 0;
            }
        }
        let src = self.value(a).data();
        let data: Vec<E> = map.iter().map(|&i| src[i]).collect();
        let value = Tensor::from_vec(&out_shape, data)?;
        Ok(self.push(
            value,
            &[a],
            Box::new(move |ctx| {
                let mut g = Tensor::zeros(&shape);
                let gd = g.data_mut();
                for (o, &i) in map.iter().enumerate() {
                    gd[i] = ctx.grad.data()[o];
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Mean or max over `axes`, removing them from the shape. Max routes the
    /// gradient to the first maximal element.
    pub fn reduce(&mut self, a: Var, axes: &[usize], kind: ReduceKind) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if axes.iter().any(|&ax| ax >= shape.len()) {
            return Err(Error::Shape(format!("reduce axes {axes:?} invalid for {shape:?}")));
        }
        let (out_shape, map) = reduction_map(&shape, &axes);
        let out_len: usize = out_shape.iter().product();
        let count = shape.iter().product::<usize>() / out_len.max(1);
        let src = self.value(a).data();
        let map = Rc::new(map);
        match kind {
            ReduceKind::Mean => {
                let mut out = vec![E::zero(); out_len];
                for (&v, &o) in src.iter().zip(map.iter()) {
                    out[o] += v;
                }
                let inv = E::one() / E::from_usize(count).unwrap();
                out.iter_mut().for_each(|v| *v *= inv);
                let value = Tensor::from_vec(&out_shape, out)?;
                Ok(self.push(
                    value,
                    &[a],
                    Box::new(move |ctx| {
                        let g = ctx.grad.data();
                        let data = map.iter().map(|&o| g[o] * inv).collect();
                        vec![Some(Tensor::from_vec(&shape, data).unwrap())]
                    }),
                ))
            }
            ReduceKind::Max => {
                let mut out = vec![E::neg_infinity(); out_len];
                let mut arg = vec![usize::MAX; out_len];
                for (i, (&v, &o)) in src.iter().zip(map.iter()).enumerate() {
                    if arg[o] == usize::MAX || v > out[o] {
                        out[o] = v;
                        arg[o] = i;
                    }
                }
                let value = Tensor::from_vec(&out_shape, out)?;
                Ok(self.push(
                    value,
                    &[a],
                    Box::new(move |ctx| {
                        let mut g = Tensor::zeros(&shape);
                        let gd = g.data_mut();
                        for (o, &i) in arg.iter().enumerate() {
                            gd[i] += ctx.grad.data()[o];
                        }
                        vec![Some(g)]
                    }),
                ))
            }
        }
    }

    pub fn mean_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(a, axes, ReduceKind::Mean)
    }

    pub fn max_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(a, axes, ReduceKind::Max)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| Error::Shape("empty concat".into()))?).to_vec();
        if axis >= first.len() {
            return Err(Error::Shape(format!("concat axis {axis} invalid for {first:?}")));
        }
        let mut extents = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::ShapeMismatch { op: "concat", left: first.clone(), right: s.to_vec() });
            }
            extents.push(s[axis]);
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total: usize = extents.iter().sum();
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &ext) in parts.iter().zip(&extents) {
                let src = self.value(p).data();
                data.extend_from_slice(&src[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let value = Tensor::from_vec(&out_shape, data)?;
        let shapes: Vec<Vec<usize>> = parts.iter().map(|&p| self.shape(p).to_vec()).collect();
        Ok(self.push(
            value,
            parts,
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut grads: Vec<Vec<E>> = extents.iter().map(|&e| Vec::with_capacity(outer * e * inner)).collect();
                for o in 0..outer {
                    let mut off = o * total * inner;
                    for (gp, &ext) in grads.iter_mut().zip(&extents) {
                        gp.extend_from_slice(&g[off..off + ext * inner]);
                        off += ext * inner;
                    }
                }
                grads
                    .into_iter()
                    .zip(&shapes)
                    .zip(&ctx.needs)
                    .map(|((d, s), &need)| need.then(|| Tensor::from_vec(s, d).unwrap()))
                    .collect()
            }),
        ))
    }

    /// Mean softmax cross-entropy of `logits [N,K]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::Shape(format!("cross_entropy logits {shape:?} vs {} labels", labels.len())));
        }
        let (n, k) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Shape(format!("label {bad} out of range for {k} classes")));
        }
        let x = self.value(logits).data();
        let mut probs = vec![E::zero(); n * k];
        let mut loss = E::zero();
        for i in 0..n {
            let row = &x[i * k..(i + 1) * k];
            let m = row.iter().copied().fold(E::neg_infinity(), E::max);
            let z: E = row.iter().map(|&v| (v - m).exp()).sum();
            for j in 0..k {
                probs[i * k + j] = (row[j] - m).exp() / z;
            }
            loss += -(row[labels[i]] - m - z.ln());
        }
        let nn = E::from_usize(n).unwrap();
        loss /= nn;
        let labels = labels.to_vec();
        Ok(self.push(
            Tensor::from_vec(&[1], vec![loss])?,
            &[logits],
            Box::new(move |ctx| {
                let g = ctx.grad.data()[0] / nn;
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * k + l] -= E::one();
                }
                d.iter_mut().for_each(|v| *v *= g);
                vec![Some(Tensor::from_vec(&[n, k], d).unwrap())]
            }),
        ))
    }
}
