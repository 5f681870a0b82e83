use std::rc::Rc;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{strides, Element, Tensor};

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

/// Numpy-style broadcast of two shapes (right aligned, extents equal or 1).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each linear index of `out`, the linear index of the broadcast source.
fn index_map(out: &[usize], src: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let src_strides = strides(src);
    let mut eff = vec![0usize; rank];
    for i in 0..src.len() {
        let oi = i + rank - src.len();
        eff[oi] = if src[i] == 1 { 0 } else { src_strides[i] };
    }
    let n: usize = out.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    let mut idx = 0usize;
    for _ in 0..n {
        map.push(idx);
        for d in (0..rank).rev() {
            counter[d] += 1;
            idx += eff[d];
            if counter[d] < out[d] {
                break;
            }
            idx -= eff[d] * counter[d];
            counter[d] = 0;
        }
    }
    map
}

/// Sums `g` (shaped like the broadcast output) back onto `shape`.
fn reduce_to<E: Element>(g: &[E], map: Option<&[usize]>, shape: &[usize]) -> Tensor<E> {
    match map {
        None => Tensor::from_vec(shape, g.to_vec()).unwrap(),
        Some(map) => {
            let mut out = Tensor::zeros(shape);
            let d = out.data_mut();
            for (gi, &si) in g.iter().zip(map) {
                d[si] += *gi;
            }
            out
        }
    }
}

impl<E: Element> Tape<E> {
    fn binary(&mut self, op: Binary, a: Var, b: Var, name: &'static str) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(&sa, &sb)
            .ok_or(Error::ShapeMismatch { op: name, left: sa.clone(), right: sb.clone() })?;
        let map_a: Option<Rc<Vec<usize>>> =
            if sa == out_shape { None } else { Some(Rc::new(index_map(&out_shape, &sa))) };
        let map_b: Option<Rc<Vec<usize>>> =
            if sb == out_shape { None } else { Some(Rc::new(index_map(&out_shape, &sb))) };
        let n: usize = out_shape.iter().product();
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let pick = |map: &Option<Rc<Vec<usize>>>, i: usize| map.as_ref().map_or(i, |m| m[i]);
        let mut out = Vec::with_capacity(n);
        match (&map_a, &map_b, op) {
            (None, None, Binary::Add) => out.extend(av.iter().zip(bv).map(|(&x, &y)| x + y)),
            (None, None, Binary::Sub) => out.extend(av.iter().zip(bv).map(|(&x, &y)| x - y)),
            (None, None, Binary::Mul) => out.extend(av.iter().zip(bv).map(|(&x, &y)| x * y)),
            _ => {
                for i in 0..n {
                    let x = av[pick(&map_a, i)];
                    let y = bv[pick(&map_b, i)];
                    out.push(match op {
                        Binary::Add => x + y,
                        Binary::Sub => x - y,
                        Binary::Mul => x * y,
                    });
                }
            }
        }
        let value = Tensor::from_vec(&out_shape, out)?;
        Ok(self.push(
            value,
            &[a, b],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut res = vec![None, None];
                if ctx.needs[0] {
                    let ga = match op {
                        Binary::Add | Binary::Sub => g.to_vec(),
                        Binary::Mul => {
                            let bv = ctx.inputs[1].data();
                            g.iter().enumerate().map(|(i, &gi)| gi * bv[pick(&map_b, i)]).collect()
                        }
                    };
                    res[0] = Some(reduce_to(&ga, map_a.as_deref().map(|v| v.as_slice()), &sa));
                }
                if ctx.needs[1] {
                    let gb: Vec<E> = match op {
                        Binary::Add => g.to_vec(),
                        Binary::Sub => g.iter().map(|&v| -v).collect(),
                        Binary::Mul => {
                            let av = ctx.inputs[0].data();
                            g.iter().enumerate().map(|(i, &gi)| gi * av[pick(&map_a, i)]).collect()
                        }
                    };
                    res[1] = Some(reduce_to(&gb, map_b.as_deref().map(|v| v.as_slice()), &sb));
                }
                res
            }),
        ))
    }

    /// `a + b` with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b, "add")
    }

    /// `a - b` with broadcasting.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b, "sub")
    }

    /// `a ∘ b` with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b, "mul")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    /// `a * s + c`.
    pub fn affine(&mut self, a: Var, s: f64, c: f64) -> Var {
        let s = E::from_f64_lossy(s);
        let c = E::from_f64_lossy(c);
        let value = self.value(a).map(|v| v * s + c);
        self.push(value, &[a], Box::new(move |ctx| vec![Some(ctx.grad.map(|g| g * s))]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| if v > E::zero() { v } else { E::zero() });
        self.push(
            value,
            &[a],
            Box::new(|ctx| {
                let g = ctx.grad.zip_map(ctx.inputs[0], |g, x| if x > E::zero() { g } else { E::zero() });
                vec![Some(g.unwrap())]
            }),
        )
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let shape = self.shape(a).to_vec();
        self.push(
            Tensor::from_vec(&[1], vec![s]).unwrap(),
            &[a],
            Box::new(move |ctx| vec![Some(Tensor::full(&shape, ctx.grad.data()[0]))]),
        )
    }
}
