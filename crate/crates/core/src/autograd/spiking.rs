use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::neuron::{atan_primitive, atan_surrogate_grad, LifConfig};
use crate::tensor::{Element, Tensor};

/// Forward behaviour of a spike nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SpikeMode {
    /// Exact Heaviside with Θ(0) = 1; ATan surrogate in the backward pass.
    #[default]
    Heaviside,
    /// Smooth twin: the surrogate's primitive in the forward pass, so the
    /// backward pass is its true derivative. Used for gradient checking.
    Smooth,
}

fn fire<E: Element>(v: E, alpha: f64, mode: SpikeMode) -> E {
    match mode {
        SpikeMode::Heaviside => {
            if v >= E::zero() {
                E::one()
            } else {
                E::zero()
            }
        }
        SpikeMode::Smooth => E::from_f64_lossy(atan_primitive(v.to_f64().unwrap(), alpha)),
    }
}

fn fire_grad<E: Element>(v: E, alpha: f64) -> E {
    E::from_f64_lossy(atan_surrogate_grad(v.to_f64().unwrap(), alpha))
}

/// Result of a multi-step LIF evaluation.
pub struct LifRun<E> {
    pub spikes: Var,
    /// Hidden state after the last step, detached from the tape.
    pub final_h: Tensor<E>,
}

impl<E: Element> Tape<E> {
    /// Elementwise spike function of `v` (already shifted by the threshold).
    pub fn spike(&mut self, v: Var, alpha: f64, mode: SpikeMode) -> Var {
        let value = self.value(v).map(|x| fire(x, alpha, mode));
        self.push(
            value,
            &[v],
            Box::new(move |ctx| {
                vec![Some(ctx.grad.zip_map(ctx.inputs[0], |g, x| g * fire_grad(x, alpha)).unwrap())]
            }),
        )
    }

    /// Runs the LIF recurrence over `steps` time steps. `input` is laid out
    /// time-major: its leading extent is `steps · batch` and each step owns a
    /// contiguous block of `len / steps` elements. `h0` holds the hidden
    /// state entering step 0.
    ///
    /// Per step: `U = H + (I − (H − u_reset)) / tau`, `S = Θ(U − u_threshold)`,
    /// `H ← U·(1 − S)`. With `detach_reset` the reset does not propagate
    /// gradient through `S`.
    pub fn lif_multistep(
        &mut self,
        input: Var,
        steps: usize,
        h0: &Tensor<E>,
        cfg: &LifConfig,
        mode: SpikeMode,
    ) -> Result<LifRun<E>> {
        let x = self.value(input);
        if steps == 0 || x.len() % steps != 0 {
            return Err(Error::Shape(format!("{} elements do not split into {steps} steps", x.len())));
        }
        let m = x.len() / steps;
        if h0.len() != m {
            return Err(Error::ShapeMismatch {
                op: "lif state",
                left: h0.shape().to_vec(),
                right: vec![m],
            });
        }
        if x.has_nan() {
            return Err(Error::NaN("LIF input".into()));
        }
        let inv_tau = E::from_f64_lossy(1.0 / cfg.tau);
        let u_reset = E::from_f64_lossy(cfg.u_reset);
        let thr = E::from_f64_lossy(cfg.u_threshold);
        let alpha = cfg.surrogate_alpha;
        let detach = cfg.detach_reset;
        let xd = x.data();
        let mut h = h0.data().to_vec();
        let mut u_all = vec![E::zero(); xd.len()];
        let mut s_all = vec![E::zero(); xd.len()];
        for t in 0..steps {
            for i in 0..m {
                let j = t * m + i;
                let u = h[i] + (xd[j] - (h[i] - u_reset)) * inv_tau;
                let s = fire(u - thr, alpha, mode);
                u_all[j] = u;
                s_all[j] = s;
                h[i] = u * (E::one() - s);
            }
        }
        let shape = x.shape().to_vec();
        let value = Tensor::from_vec(&shape, s_all.clone())?;
        let final_h = Tensor::from_vec(h0.shape(), h)?;
        let spikes = self.push(
            value,
            &[input],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut gi = vec![E::zero(); g.len()];
                // dL/dH_t carried backwards; the state after the last step is unused.
                let mut gh = vec![E::zero(); m];
                let leak = E::one() - inv_tau;
                for t in (0..steps).rev() {
                    for i in 0..m {
                        let j = t * m + i;
                        let u = u_all[j];
                        let s = s_all[j];
                        let sg = fire_grad(u - thr, alpha);
                        let mut gu = g[j] * sg + gh[i] * (E::one() - s);
                        if !detach {
                            gu -= gh[i] * u * sg;
                        }
                        gi[j] = gu * inv_tau;
                        gh[i] = gu * leak;
                    }
                }
                vec![Some(Tensor::from_vec(&shape, gi).unwrap())]
            }),
        );
        Ok(LifRun { spikes, final_h })
    }
}
