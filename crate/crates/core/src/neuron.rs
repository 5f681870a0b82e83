//! Leaky integrate-and-fire dynamics.
//!
//! The iterative form used throughout the engine:
//!
//! ```text
//! U_t = H_{t-1} + (I_t - (H_{t-1} - u_reset)) / tau
//! S_t = Θ(U_t - u_threshold)
//! H_t = U_t · (1 - S_t)
//! ```
//!
//! Θ(0) = 1. After a spike the stored state is `U·0 = 0`, which is the
//! reset potential for the default `u_reset = 0`. For a nonzero `u_reset`
//! the recurrence above is still followed literally.
//!
//! Training replaces dΘ/dU with the ATan surrogate
//! `alpha / (2·(1 + (π·alpha·v/2)²))`.

use std::f64::consts::PI;

use crate::autograd::{SpikeMode, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, SpikeTensor, Tensor};

/// Derivative of the ATan surrogate at `v` (distance to threshold).
pub fn atan_surrogate_grad(v: f64, alpha: f64) -> f64 {
    let z = PI * alpha * v / 2.0;
    alpha / (2.0 * (1.0 + z * z))
}

/// Primitive of [`atan_surrogate_grad`]: a sigmoid-shaped step from 0 to 1.
pub fn atan_primitive(v: f64, alpha: f64) -> f64 {
    (PI * alpha * v / 2.0).atan() / PI + 0.5
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ResetMode {
    #[default]
    Hard,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LifConfig {
    pub tau: f64,
    pub u_threshold: f64,
    pub u_reset: f64,
    pub surrogate_alpha: f64,
    pub reset_mode: ResetMode,
    /// Treat `S` in the reset term as a constant during backpropagation.
    pub detach_reset: bool,
}

impl Default for LifConfig {
    fn default() -> Self {
        Self {
            tau: 2.0,
            u_threshold: 1.0,
            u_reset: 0.0,
            surrogate_alpha: 2.0,
            reset_mode: ResetMode::Hard,
            detach_reset: true,
        }
    }
}

impl LifConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.u_threshold > self.u_reset) {
            return Err(Error::Config(format!(
                "u_threshold ({}) must exceed u_reset ({})",
                self.u_threshold, self.u_reset
            )));
        }
        if !(self.surrogate_alpha > 0.0) {
            return Err(Error::Config("surrogate_alpha must be positive".into()));
        }
        Ok(())
    }
}

/// Hidden membrane potentials carried between time steps.
#[derive(Clone, Debug, PartialEq)]
pub struct LifState<E> {
    pub h: Tensor<E>,
}

impl<E: Element> LifState<E> {
    pub fn new(shape: &[usize], cfg: &LifConfig) -> Self {
        Self { h: Tensor::full(shape, E::from_f64_lossy(cfg.u_reset)) }
    }

    pub fn reset(&mut self, cfg: &LifConfig) {
        let r = E::from_f64_lossy(cfg.u_reset);
        self.h.data_mut().iter_mut().for_each(|v| *v = r);
    }
}

/// One step of the recurrence outside the tape.
pub fn lif_step<E: Element>(state: &mut LifState<E>, input: &Tensor<E>, cfg: &LifConfig) -> Result<SpikeTensor<E>> {
    if input.shape() != state.h.shape() {
        return Err(Error::ShapeMismatch {
            op: "lif_step",
            left: state.h.shape().to_vec(),
            right: input.shape().to_vec(),
        });
    }
    if input.has_nan() {
        return Err(Error::NaN("lif_step input".into()));
    }
    let inv_tau = E::from_f64_lossy(1.0 / cfg.tau);
    let u_reset = E::from_f64_lossy(cfg.u_reset);
    let thr = E::from_f64_lossy(cfg.u_threshold);
    let mut spikes = Tensor::zeros(input.shape());
    for ((h, &i), s) in state.h.data_mut().iter_mut().zip(input.data()).zip(spikes.data_mut()) {
        let u = *h + (i - (*h - u_reset)) * inv_tau;
        *s = if u - thr >= E::zero() { E::one() } else { E::zero() };
        *h = u * (E::one() - *s);
    }
    SpikeTensor::new(spikes)
}

/// Heaviside of `v` with Θ(0) = 1.
pub fn spike_fn<E: Element>(v: &Tensor<E>) -> SpikeTensor<E> {
    SpikeTensor::new(v.map(|x| if x >= E::zero() { E::one() } else { E::zero() })).expect("binary by construction")
}

/// Spiking neuron applied once, from a freshly reset state, to a drive
/// tensor. Used by the attention modules, which evaluate their neuron on
/// pooled descriptors once per forward pass.
pub fn single_step_on_tape<E: Element>(tape: &mut Tape<E>, drive: Var, cfg: &LifConfig, mode: SpikeMode) -> Var {
    // U = u_reset + (I - 0) / tau starting from H = u_reset
    let shifted = tape.affine(drive, 1.0 / cfg.tau, cfg.u_reset - cfg.u_threshold);
    tape.spike(shifted, cfg.surrogate_alpha, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one(v: f64) -> Tensor<f64> {
        Tensor::from_vec(&[1], vec![v]).unwrap()
    }

    #[test]
    fn table_one_defaults() {
        let c = LifConfig::default();
        assert_eq!((c.u_threshold, c.u_reset, c.tau, c.reset_mode), (1.0, 0.0, 2.0, ResetMode::Hard));
        c.validate().unwrap();
    }

    #[test]
    fn subthreshold_step() {
        let cfg = LifConfig::default();
        let mut st = LifState::new(&[1], &cfg);
        let s = lif_step(&mut st, &one(1.0), &cfg).unwrap();
        assert_eq!(s.tensor().data(), &[0.0]);
        assert_eq!(st.h.data(), &[0.5]);
    }

    #[test]
    fn suprathreshold_step_resets() {
        let cfg = LifConfig::default();
        let mut st = LifState { h: one(0.9) };
        let s = lif_step(&mut st, &one(1.5), &cfg).unwrap();
        assert_eq!(s.tensor().data(), &[1.0]);
        assert_eq!(st.h.data(), &[0.0]);
    }

    #[test]
    fn zero_input_is_quiescent() {
        let cfg = LifConfig::default();
        let mut st = LifState::<f64>::new(&[3], &cfg);
        for _ in 0..50 {
            assert_eq!(lif_step(&mut st, &Tensor::zeros(&[3]), &cfg).unwrap().count(), 0);
        }
    }

    #[test]
    fn invalid_configs() {
        assert!(LifConfig { tau: 0.0, ..Default::default() }.validate().is_err());
        assert!(LifConfig { u_threshold: 0.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn shape_mismatch_and_nan() {
        let cfg = LifConfig::default();
        let mut st = LifState::<f64>::new(&[2], &cfg);
        assert!(lif_step(&mut st, &one(0.0), &cfg).is_err());
        let bad = Tensor::from_vec(&[2], vec![0.0, f64::NAN]).unwrap();
        assert!(matches!(lif_step(&mut st, &bad, &cfg), Err(Error::NaN(_))));
    }

    #[test]
    fn surrogate_closed_form() {
        assert_eq!(atan_surrogate_grad(0.0, 2.0), 1.0);
        assert!((atan_primitive(0.0, 2.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn spike_fn_step() {
        let v = Tensor::from_vec(&[2], vec![0.2, -0.2]).unwrap();
        assert_eq!(spike_fn(&v).tensor().data(), &[1.0, 0.0]);
    }

    proptest! {
        #[test]
        fn outputs_binary_and_reset_exact(inputs in proptest::collection::vec(-3.0f64..3.0, 1..40)) {
            let cfg = LifConfig::default();
            let mut st = LifState::new(&[1], &cfg);
            for i in inputs {
                let s = lif_step(&mut st, &one(i), &cfg).unwrap();
                let s = s.tensor().data()[0];
                prop_assert!(s == 0.0 || s == 1.0);
                if s == 1.0 {
                    prop_assert_eq!(st.h.data()[0], cfg.u_reset);
                }
            }
        }

        #[test]
        fn monotone_in_input(a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let cfg = LifConfig::default();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let fire = |i: f64| {
                let mut st = LifState::new(&[1], &cfg);
                lif_step(&mut st, &one(i), &cfg).unwrap().tensor().data()[0]
            };
            prop_assert!(fire(lo) <= fire(hi));
        }
    }
}
