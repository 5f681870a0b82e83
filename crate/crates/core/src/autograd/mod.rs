//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its output value and, when any input
//! requires a gradient, a backward rule. [`Tape::backward`] walks the nodes
//! in reverse execution order and accumulates gradients into the inputs.
//! Only leaf gradients are retained after the sweep; intermediate gradients
//! are released as soon as they have been propagated.
//!
//! A tape lives for one forward/backward pass and is dropped (or
//! [`cleared`](Tape::clear)) before the next optimizer step.

mod conv;
mod elementwise;
mod linear;
mod shape;
mod spiking;

pub(crate) use conv::window_out as window_extent;
pub use conv::PoolKind;
pub use linear::BatchStats;
pub use shape::ReduceKind;
pub use spiking::{LifRun, SpikeMode};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Values handed to a backward rule.
pub(crate) struct BackwardCtx<'a, E> {
    pub grad: &'a Tensor<E>,
    pub inputs: Vec<&'a Tensor<E>>,
    pub needs: Vec<bool>,
}

type BackwardFn<E> = Box<dyn Fn(&BackwardCtx<'_, E>) -> Vec<Option<Tensor<E>>>>;

struct Node<E> {
    value: Tensor<E>,
    requires_grad: bool,
    grad: Option<Tensor<E>>,
    inputs: Vec<Var>,
    backward: Option<BackwardFn<E>>,
}

/// Ordered record of executed operations.
pub struct Tape<E> {
    nodes: Vec<Node<E>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    /// Registers a leaf. Leaves that require a gradient receive one after
    /// [`backward`](Self::backward).
    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, requires_grad, grad: None, inputs: vec![], backward: None });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<E>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<E>> {
        self.nodes[v.0].grad.take()
    }

    /// Detached copy of a value as a new constant.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub(crate) fn push(&mut self, value: Tensor<E>, inputs: &[Var], backward: BackwardFn<E>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            inputs: if requires_grad { inputs.to_vec() } else { vec![] },
            backward: if requires_grad { Some(backward) } else { None },
        });
        Var(self.nodes.len() - 1)
    }

    /// Backpropagates from a scalar root (seed 1).
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let shape = self.shape(root).to_vec();
        if self.value(root).len() != 1 {
            return Err(Error::NonScalarRoot(shape));
        }
        self.backward_with_seed(root, Tensor::ones(&shape))
    }

    pub fn backward_with_seed(&mut self, root: Var, seed: Tensor<E>) -> Result<()> {
        if seed.shape() != self.shape(root) {
            return Err(Error::ShapeMismatch {
                op: "backward seed",
                left: seed.shape().to_vec(),
                right: self.shape(root).to_vec(),
            });
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        accumulate(&mut self.nodes[root.0].grad, seed);
        for i in (0..=root.0).rev() {
            if self.nodes[i].backward.is_none() {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else { continue };
            let results = {
                let node = &self.nodes[i];
                let ctx = BackwardCtx {
                    grad: &grad,
                    inputs: node.inputs.iter().map(|v| &self.nodes[v.0].value).collect(),
                    needs: node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect(),
                };
                (node.backward.as_ref().unwrap())(&ctx)
            };
            let inputs = self.nodes[i].inputs.clone();
            for (input, g) in inputs.into_iter().zip(results) {
                if let Some(g) = g {
                    if self.nodes[input.0].requires_grad {
                        debug_assert_eq!(g.shape(), self.nodes[input.0].value.shape());
                        accumulate(&mut self.nodes[input.0].grad, g);
                    }
                }
            }
        }
        Ok(())
    }
}

/// A trainable tensor together with its binding on the current tape.
#[derive(Clone, Debug)]
pub struct Param<E> {
    pub value: Tensor<E>,
    var: Option<Var>,
}

impl<E: Element> Param<E> {
    pub fn new(value: Tensor<E>) -> Self {
        Self { value, var: None }
    }

    /// Registers the value as a leaf and remembers the handle.
    pub fn bind(&mut self, tape: &mut Tape<E>, requires_grad: bool) -> Var {
        let v = tape.leaf(self.value.clone(), requires_grad);
        self.var = Some(v);
        v
    }

    pub fn bound(&self) -> Option<Var> {
        self.var
    }

    pub fn unbind(&mut self) {
        self.var = None;
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

fn accumulate<E: Element>(slot: &mut Option<Tensor<E>>, g: Tensor<E>) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    //! Central finite-difference oracle shared by the op tests.
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Checks the tape gradient of `sum(w ∘ f(inputs))` (random weights `w`)
    /// against central differences with step 1e-5.
    pub fn check_gradients(
        inputs: &[Tensor<f64>],
        seed: u64,
        f: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
    ) -> f64 {
        let objective = |xs: &[Tensor<f64>]| -> (f64, Vec<Tensor<f64>>) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
            let out = f(&mut tape, &vars);
            let w = random(tape.shape(out), seed ^ 0xabcdef);
            let value: f64 = tape.value(out).data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
            tape.backward_with_seed(out, w).unwrap();
            let grads = vars
                .iter()
                .map(|&v| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(v))))
                .collect();
            (value, grads)
        };
        let (_, analytic) = objective(inputs);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (which, x) in inputs.iter().enumerate() {
            for i in 0..x.len() {
                let mut plus = inputs.to_vec();
                plus[which].data_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[which].data_mut()[i] -= h;
                let numeric = (objective(&plus).0 - objective(&minus).0) / (2.0 * h);
                let a = analytic[which].data()[i];
                let err = (a - numeric).abs() / (a.abs().max(numeric.abs()).max(1e-2));
                worst = worst.max(err);
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn non_scalar_root_without_seed_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(&[2]), true);
        let y = tape.scale(x, 2.0);
        assert!(matches!(tape.backward(y), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // y = x*x + x  → dy/dx = 2x + 1
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[1], vec![3.0]).unwrap(), true);
        let sq = tape.mul(x, x).unwrap();
        let y = tape.add(sq, x).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn backward_of_sum_of_squares_is_two_x() {
        let mut tape = Tape::<f64>::new();
        let xv = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let x = tape.leaf(xv.clone(), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn constants_get_no_grad() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(&[2]), true);
        let c = tape.constant(Tensor::ones(&[2]));
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn replay_is_bit_identical() {
        let run = || {
            let mut tape = Tape::<f64>::new();
            let x = tape.leaf(testutil::random(&[2, 3, 5, 5], 1), true);
            let k = tape.leaf(testutil::random(&[4, 3, 3, 3], 2), true);
            let y = tape.conv2d(x, k, 1, 1).unwrap();
            let y = tape.relu(y);
            let s = tape.sum(y);
            tape.backward(s).unwrap();
            (tape.grad(x).unwrap().clone(), tape.grad(k).unwrap().clone())
        };
        let (a, b) = run();
        let (c, d) = run();
        assert_eq!(a.data(), c.data());
        assert_eq!(b.data(), d.data());
    }
}
