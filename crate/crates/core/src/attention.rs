//! Binary attention: promoting modules (MA) on the backbone and inhibitory
//! modules (IA) on projection shortcuts.
//!
//! Every module pools its input to descriptors, maps them through shared
//! weights, and fires a spiking neuron once on the result. The weights are
//! therefore exactly binary and gating keeps binary tensors binary.
//!
//! | dimension | pooled over | weight shape (time-major) |
//! |-----------|-------------|---------------------------|
//! | T         | C, H, W     | `[T, N]`                  |
//! | C         | H, W        | `[T, N, C]`               |
//! | S         | C           | `[T, N, 1, H, W]`         |
//!
//! The channel reduction factor is called `channel_reduction` and the
//! spatial kernel size `spatial_kernel`; the customary single-letter names
//! collide.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autograd::{Param, SpikeMode, Tape, Var};
use crate::error::{Error, Result};
use crate::network::{kaiming_uniform, Ctx, SynapseKind};
use crate::neuron::{single_step_on_tape, LifConfig};
use crate::tensor::{Element, SpikeTensor, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Dimension {
    Temporal,
    Channel,
    Spatial,
}

impl Dimension {
    pub fn letter(self) -> char {
        match self {
            Dimension::Temporal => 'T',
            Dimension::Channel => 'C',
            Dimension::Spatial => 'S',
        }
    }

    fn from_letter(c: &str) -> Option<Self> {
        match c {
            "T" => Some(Dimension::Temporal),
            "C" => Some(Dimension::Channel),
            "S" => Some(Dimension::Spatial),
            _ => None,
        }
    }
}

/// MA position inside a block (rows a–d of the block layout table).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum Placement {
    /// After the first BN of the backbone and of the post-join stage.
    #[default]
    A,
    /// After the second BN of the backbone and of the post-join stage.
    B,
    /// After the first backbone BN only.
    C,
    /// After the second backbone BN only.
    D,
}

impl Placement {
    pub fn letter(self) -> char {
        match self {
            Placement::A => 'a',
            Placement::B => 'b',
            Placement::C => 'c',
            Placement::D => 'd',
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Promoting,
    Inhibitory,
}

/// Which attention modules a network carries and where.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AttentionPlan {
    pub ma: Option<Dimension>,
    pub ia: Option<Dimension>,
    pub placement: Placement,
}

impl AttentionPlan {
    /// MA and IA on the same dimension.
    pub fn synergistic(dim: Dimension, placement: Placement) -> Self {
        Self { ma: Some(dim), ia: Some(dim), placement }
    }

    pub fn is_empty(&self) -> bool {
        self.ma.is_none() && self.ia.is_none()
    }
}

impl fmt::Display for AttentionPlan {
    /// `T/a` for matching MA and IA; otherwise `MA-T+IA-S/b`, `IA-C/a`, ...
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.ma, self.ia) {
            (Some(m), Some(i)) if m == i => write!(f, "{}", m.letter())?,
            _ => {
                let mut parts = Vec::new();
                if let Some(m) = self.ma {
                    parts.push(format!("MA-{}", m.letter()));
                }
                if let Some(i) = self.ia {
                    parts.push(format!("IA-{}", i.letter()));
                }
                if parts.is_empty() {
                    parts.push("none".into());
                }
                write!(f, "{}", parts.join("+"))?;
            }
        }
        write!(f, "/{}", self.placement.letter())
    }
}

impl FromStr for AttentionPlan {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Attention(format!("invalid attention plan {s:?}"));
        let (dims, placement) = s.trim().split_once('/').ok_or_else(bad)?;
        let placement = match placement {
            "a" => Placement::A,
            "b" => Placement::B,
            "c" => Placement::C,
            "d" => Placement::D,
            _ => return Err(bad()),
        };
        if let Some(d) = Dimension::from_letter(dims) {
            return Ok(Self::synergistic(d, placement));
        }
        let mut plan = AttentionPlan { ma: None, ia: None, placement };
        if dims == "none" {
            return Ok(plan);
        }
        for part in dims.split('+') {
            let (role, dim) = part.split_once('-').ok_or_else(bad)?;
            let dim = Dimension::from_letter(dim).ok_or_else(bad)?;
            let slot = match role {
                "MA" => &mut plan.ma,
                "IA" => &mut plan.ia,
                _ => return Err(bad()),
            };
            if slot.replace(dim).is_some() {
                return Err(bad());
            }
        }
        Ok(plan)
    }
}

/// Reduction factors and kernel size of the attention modules.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub temporal_reduction: usize,
    pub channel_reduction: usize,
    pub spatial_kernel: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self { temporal_reduction: 4, channel_reduction: 16, spatial_kernel: 7 }
    }
}

fn reduced(extent: usize, factor: usize, what: &str) -> Result<usize> {
    if factor == 0 {
        return Err(Error::Attention(format!("{what} reduction factor must be positive")));
    }
    if extent < factor {
        return Ok(1);
    }
    if extent % factor != 0 {
        return Err(Error::Attention(format!("{what} extent {extent} is not divisible by reduction {factor}")));
    }
    Ok(extent / factor)
}

#[derive(Clone, Debug)]
pub struct TemporalAttention<E> {
    /// `[T/r, T]`
    pub w_t0: Param<E>,
    /// `[T, T/r]`
    pub w_t1: Param<E>,
    pub neuron: LifConfig,
}

#[derive(Clone, Debug)]
pub struct ChannelAttention<E> {
    /// `[C/k, C]`
    pub w_c0: Param<E>,
    /// `[C, C/k]`
    pub w_c1: Param<E>,
    pub neuron: LifConfig,
}

#[derive(Clone, Debug)]
pub struct SpatialAttention<E> {
    /// `[1, 2, ks, ks]`, input channels ordered (max, mean).
    pub kernel: Param<E>,
    pub neuron: LifConfig,
}

impl<E: Element> TemporalAttention<E> {
    pub fn new(steps: usize, reduction: usize, neuron: LifConfig, rng: &mut impl Rng) -> Result<Self> {
        let hidden = reduced(steps, reduction, "temporal")?;
        Ok(Self {
            w_t0: Param::new(kaiming_uniform(&[hidden, steps], steps, rng)),
            w_t1: Param::new(kaiming_uniform(&[steps, hidden], hidden, rng)),
            neuron,
        })
    }

    pub fn steps(&self) -> usize {
        self.w_t0.value.shape()[1]
    }

    pub fn hidden(&self) -> usize {
        self.w_t0.value.shape()[0]
    }
}

impl<E: Element> ChannelAttention<E> {
    pub fn new(channels: usize, reduction: usize, neuron: LifConfig, rng: &mut impl Rng) -> Result<Self> {
        let hidden = reduced(channels, reduction, "channel")?;
        Ok(Self {
            w_c0: Param::new(kaiming_uniform(&[hidden, channels], channels, rng)),
            w_c1: Param::new(kaiming_uniform(&[channels, hidden], hidden, rng)),
            neuron,
        })
    }

    pub fn channels(&self) -> usize {
        self.w_c0.value.shape()[1]
    }

    pub fn hidden(&self) -> usize {
        self.w_c0.value.shape()[0]
    }
}

impl<E: Element> SpatialAttention<E> {
    pub fn new(kernel: usize, neuron: LifConfig, rng: &mut impl Rng) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Attention(format!("spatial kernel must be odd, got {kernel}")));
        }
        Ok(Self { kernel: Param::new(kaiming_uniform(&[1, 2, kernel, kernel], 2 * kernel * kernel, rng)), neuron })
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.value.shape()[2]
    }
}

#[derive(Clone, Debug)]
pub enum AttentionKind<E> {
    Temporal(TemporalAttention<E>),
    Channel(ChannelAttention<E>),
    Spatial(SpatialAttention<E>),
}

impl<E: Element> AttentionKind<E> {
    pub fn new(
        dim: Dimension,
        steps: usize,
        channels: usize,
        cfg: &AttentionConfig,
        neuron: &LifConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(match dim {
            Dimension::Temporal => {
                AttentionKind::Temporal(TemporalAttention::new(steps, cfg.temporal_reduction, neuron.clone(), rng)?)
            }
            Dimension::Channel => {
                AttentionKind::Channel(ChannelAttention::new(channels, cfg.channel_reduction, neuron.clone(), rng)?)
            }
            Dimension::Spatial => {
                AttentionKind::Spatial(SpatialAttention::new(cfg.spatial_kernel, neuron.clone(), rng)?)
            }
        })
    }

    pub fn dimension(&self) -> Dimension {
        match self {
            AttentionKind::Temporal(_) => Dimension::Temporal,
            AttentionKind::Channel(_) => Dimension::Channel,
            AttentionKind::Spatial(_) => Dimension::Spatial,
        }
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Param<E>)> {
        match self {
            AttentionKind::Temporal(a) => vec![("w_t0", &mut a.w_t0), ("w_t1", &mut a.w_t1)],
            AttentionKind::Channel(a) => vec![("w_c0", &mut a.w_c0), ("w_c1", &mut a.w_c1)],
            AttentionKind::Spatial(a) => vec![("kernel", &mut a.kernel)],
        }
    }

    pub fn params(&self) -> Vec<(&'static str, &Param<E>)> {
        match self {
            AttentionKind::Temporal(a) => vec![("w_t0", &a.w_t0), ("w_t1", &a.w_t1)],
            AttentionKind::Channel(a) => vec![("w_c0", &a.w_c0), ("w_c1", &a.w_c1)],
            AttentionKind::Spatial(a) => vec![("kernel", &a.kernel)],
        }
    }

    fn neuron(&self) -> &LifConfig {
        match self {
            AttentionKind::Temporal(a) => &a.neuron,
            AttentionKind::Channel(a) => &a.neuron,
            AttentionKind::Spatial(a) => &a.neuron,
        }
    }

    /// Binary mask for `x` laid out `[T·N, C, H, W]`, shaped to broadcast
    /// against it: `[T·N,1,1,1]`, `[T·N,C,1,1]` or `[T·N,1,H,W]`.
    pub(crate) fn mask(&mut self, ctx: &mut Ctx<'_, E>, name: &str, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::Shape(format!("attention expects a rank-4 feature map, got {shape:?}")));
        }
        let steps = ctx.steps;
        let (tn, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let n = tn / steps;
        let trainable = ctx.opts.trainable;
        let mode = ctx.opts.spike_mode;
        let neuron = self.neuron().clone();
        // Both pooling branches read every input element once per step.
        ctx.note_synapse(&format!("{name}.pool"), SynapseKind::Pool, false, true, (2 * c * h * w * steps) as u64, x);
        let (drive, out_shape) = match self {
            AttentionKind::Temporal(a) => {
                if a.steps() != steps {
                    return Err(Error::ShapeMismatch { op: "temporal attention steps", left: vec![a.steps()], right: vec![steps] });
                }
                let w0 = a.w_t0.bind(ctx.tape, trainable);
                let w1 = a.w_t1.bind(ctx.tape, trainable);
                let hid = a.hidden();
                let avg = ctx.tape.mean_axes(x, &[1, 2, 3])?;
                let max = ctx.tape.max_axes(x, &[1, 2, 3])?;
                let mut branches = Vec::new();
                for d in [avg, max] {
                    let d = ctx.tape.reshape(d, &[steps, n])?;
                    let d = ctx.tape.permute(d, &[1, 0])?;
                    let z = ctx.tape.dense(d, w0, None)?;
                    let z = ctx.tape.relu(z);
                    branches.push(ctx.tape.dense(z, w1, None)?);
                }
                // one T-vector per sample and branch, evaluated once per pass
                ctx.note_fixed_flops(&format!("{name}.fc0"), SynapseKind::Dense, (2 * steps * hid) as u64);
                ctx.note_fixed_flops(&format!("{name}.fc1"), SynapseKind::Dense, (2 * hid * steps) as u64);
                let sum = ctx.tape.add(branches[0], branches[1])?;
                let sum = ctx.tape.permute(sum, &[1, 0])?;
                (sum, vec![tn, 1, 1, 1])
            }
            AttentionKind::Channel(a) => {
                if a.channels() != c {
                    return Err(Error::ShapeMismatch { op: "channel attention channels", left: vec![a.channels()], right: vec![c] });
                }
                let w0 = a.w_c0.bind(ctx.tape, trainable);
                let w1 = a.w_c1.bind(ctx.tape, trainable);
                let hid = a.hidden();
                let avg = ctx.tape.mean_axes(x, &[2, 3])?;
                let max = ctx.tape.max_axes(x, &[2, 3])?;
                let mut branches = Vec::new();
                for d in [avg, max] {
                    let z = ctx.tape.dense(d, w0, None)?;
                    let z = ctx.tape.relu(z);
                    branches.push(ctx.tape.dense(z, w1, None)?);
                }
                ctx.note_fixed_flops(&format!("{name}.fc0"), SynapseKind::Dense, (2 * c * hid * steps) as u64);
                ctx.note_fixed_flops(&format!("{name}.fc1"), SynapseKind::Dense, (2 * hid * c * steps) as u64);
                (ctx.tape.add(branches[0], branches[1])?, vec![tn, c, 1, 1])
            }
            AttentionKind::Spatial(a) => {
                let ks = a.kernel_size();
                let k = a.kernel.bind(ctx.tape, trainable);
                let max = ctx.tape.max_axes(x, &[1])?;
                let max = ctx.tape.reshape(max, &[tn, 1, h, w])?;
                let avg = ctx.tape.mean_axes(x, &[1])?;
                let avg = ctx.tape.reshape(avg, &[tn, 1, h, w])?;
                let both = ctx.tape.concat(&[max, avg], 1)?;
                let y = ctx.tape.conv2d(both, k, 1, (ks - 1) / 2)?;
                ctx.note_fixed_flops(&format!("{name}.conv"), SynapseKind::Conv, (h * w * ks * ks * 2 * steps) as u64);
                (y, vec![tn, 1, h, w])
            }
        };
        let spikes = single_step_on_tape(ctx.tape, drive, &neuron, mode);
        ctx.note_neurons(&format!("{name}.sn"), true, spikes, steps);
        ctx.tape.reshape(spikes, &out_shape)
    }
}

/// Time-major `[T,N,...]` input folded to `[T·N, C, H, W]`.
fn fold(x: &Tensor<impl Element>) -> Result<(usize, usize, Vec<usize>)> {
    let s = x.shape();
    if s.len() != 5 {
        return Err(Error::Shape(format!("expected [T,N,C,H,W], got {s:?}")));
    }
    Ok((s[0], s[1], vec![s[0] * s[1], s[2], s[3], s[4]]))
}

fn standalone<E: Element>(x: &Tensor<E>, att: &AttentionKind<E>, out: &[usize]) -> Result<SpikeTensor<E>> {
    let (steps, _, folded) = fold(x)?;
    let mut tape = Tape::new();
    let mut att = att.clone();
    let opts = crate::network::ForwardOptions { trainable: false, spike_mode: SpikeMode::Heaviside, ..Default::default() };
    let mut record = crate::metrics::SpikeRecord::new(steps);
    record.samples = (folded[0] / steps) as u64;
    let xv = tape.constant(x.clone().reshape(&folded)?);
    let mut ctx = Ctx::new(&mut tape, steps, &opts, &mut record);
    let m = att.mask(&mut ctx, "attention", xv)?;
    SpikeTensor::new(tape.value(m).clone().reshape(out)?)
}

/// Temporal weights `[T, N]` for `x` shaped `[T,N,C,H,W]`.
pub fn ma_t_weights<E: Element>(x: &Tensor<E>, att: &TemporalAttention<E>) -> Result<SpikeTensor<E>> {
    let (t, n, _) = fold(x)?;
    standalone(x, &AttentionKind::Temporal(att.clone()), &[t, n])
}

/// Channel weights `[T, N, C]`.
pub fn ma_c_weights<E: Element>(x: &Tensor<E>, att: &ChannelAttention<E>) -> Result<SpikeTensor<E>> {
    let (t, n, f) = fold(x)?;
    standalone(x, &AttentionKind::Channel(att.clone()), &[t, n, f[1]])
}

/// Spatial weights `[T, N, 1, H, W]`.
pub fn ia_s_weights<E: Element>(x: &Tensor<E>, att: &SpatialAttention<E>) -> Result<SpikeTensor<E>> {
    let (t, n, f) = fold(x)?;
    standalone(x, &AttentionKind::Spatial(att.clone()), &[t, n, 1, f[2], f[3]])
}

/// Weights of any module, shaped per its dimension as above. The same
/// computation serves promoting and inhibitory instances.
pub fn ia_weights<E: Element>(x: &Tensor<E>, att: &AttentionKind<E>) -> Result<SpikeTensor<E>> {
    match att {
        AttentionKind::Temporal(a) => ma_t_weights(x, a),
        AttentionKind::Channel(a) => ma_c_weights(x, a),
        AttentionKind::Spatial(a) => ia_s_weights(x, a),
    }
}

/// Multiplies `x` (`[T,N,C,H,W]`) by `w` replicated along the axes it lacks.
pub fn apply_attention<E: Element>(x: &Tensor<E>, w: &SpikeTensor<E>, dim: Dimension) -> Result<Tensor<E>> {
    let s = x.shape();
    let w = w.tensor();
    let expected: Vec<usize> = match (dim, s.len()) {
        (Dimension::Temporal, 5) => vec![s[0], s[1]],
        (Dimension::Channel, 5) => vec![s[0], s[1], s[2]],
        (Dimension::Spatial, 5) => vec![s[0], s[1], 1, s[3], s[4]],
        _ => return Err(Error::Shape(format!("expected [T,N,C,H,W], got {s:?}"))),
    };
    if w.shape() != expected.as_slice() {
        return Err(Error::ShapeMismatch { op: "apply_attention", left: s.to_vec(), right: w.shape().to_vec() });
    }
    let (c, hw) = (s[2], s[3] * s[4]);
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let tn = i / (c * hw);
        let ch = (i / hw) % c;
        let p = i % hw;
        let m = match dim {
            Dimension::Temporal => w.data()[tn],
            Dimension::Channel => w.data()[tn * c + ch],
            Dimension::Spatial => w.data()[tn * hw + p],
        };
        *v *= m;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::testutil::random;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn fire(drive: f64, cfg: &LifConfig) -> f64 {
        if cfg.u_reset + drive / cfg.tau - cfg.u_threshold >= 0.0 {
            1.0
        } else {
            0.0
        }
    }

    fn mlp(w0: &Tensor<f64>, w1: &Tensor<f64>, d: &[f64]) -> Vec<f64> {
        let (h, f) = (w0.shape()[0], w0.shape()[1]);
        let mut z = vec![0.0; h];
        for i in 0..h {
            for j in 0..f {
                z[i] += w0.data()[i * f + j] * d[j];
            }
            z[i] = z[i].max(0.0);
        }
        (0..f).map(|o| (0..h).map(|i| w1.data()[o * h + i] * z[i]).sum()).collect()
    }

    fn at(x: &Tensor<f64>, t: usize, n: usize, c: usize, h: usize, w: usize) -> f64 {
        let s = x.shape();
        x.data()[(((t * s[1] + n) * s[2] + c) * s[3] + h) * s[4] + w]
    }

    #[test]
    fn plan_strings_round_trip() {
        for s in ["T/a", "C/b", "S/d", "MA-T/c", "IA-S/a", "MA-C+IA-S/b", "none/a"] {
            let p: AttentionPlan = s.parse().unwrap();
            assert_eq!(p.to_string(), s);
        }
        assert!("T/e".parse::<AttentionPlan>().is_err());
        assert!("MA-T+MA-C/a".parse::<AttentionPlan>().is_err());
    }

    #[test]
    fn temporal_matches_loop_oracle() {
        let (t, n, c, h, w) = (4, 3, 2, 3, 3);
        for seed in 0..5 {
            let x = random(&[t, n, c, h, w], seed).map(|v| v * 4.0);
            let att = TemporalAttention::<f64>::new(t, 2, LifConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let got = ma_t_weights(&x, &att).unwrap();
            let mut avg = vec![vec![0.0; t]; n];
            let mut max = vec![vec![f64::NEG_INFINITY; t]; n];
            for ti in 0..t {
                for ni in 0..n {
                    for ci in 0..c {
                        for hi in 0..h {
                            for wi in 0..w {
                                let v = at(&x, ti, ni, ci, hi, wi);
                                avg[ni][ti] += v / (c * h * w) as f64;
                                max[ni][ti] = max[ni][ti].max(v);
                            }
                        }
                    }
                }
            }
            for ni in 0..n {
                let a = mlp(&att.w_t0.value, &att.w_t1.value, &avg[ni]);
                let m = mlp(&att.w_t0.value, &att.w_t1.value, &max[ni]);
                for ti in 0..t {
                    assert_eq!(got.tensor().data()[ti * n + ni], fire(a[ti] + m[ti], &att.neuron));
                }
            }
        }
    }

    #[test]
    fn channel_matches_loop_oracle() {
        let (t, n, c, h, w) = (2, 2, 8, 3, 2);
        for seed in 0..5 {
            let x = random(&[t, n, c, h, w], 10 + seed).map(|v| v * 4.0);
            let att = ChannelAttention::<f64>::new(c, 4, LifConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let got = ma_c_weights(&x, &att).unwrap();
            assert_eq!(got.tensor().shape(), &[t, n, c]);
            for ti in 0..t {
                for ni in 0..n {
                    let mut avg = vec![0.0; c];
                    let mut max = vec![f64::NEG_INFINITY; c];
                    for ci in 0..c {
                        for hi in 0..h {
                            for wi in 0..w {
                                let v = at(&x, ti, ni, ci, hi, wi);
                                avg[ci] += v / (h * w) as f64;
                                max[ci] = max[ci].max(v);
                            }
                        }
                    }
                    let a = mlp(&att.w_c0.value, &att.w_c1.value, &avg);
                    let m = mlp(&att.w_c0.value, &att.w_c1.value, &max);
                    for ci in 0..c {
                        assert_eq!(got.tensor().data()[(ti * n + ni) * c + ci], fire(a[ci] + m[ci], &att.neuron));
                    }
                }
            }
        }
    }

    #[test]
    fn spatial_matches_loop_oracle() {
        let (t, n, c, h, w) = (2, 2, 3, 5, 4);
        for seed in 0..5 {
            let x = random(&[t, n, c, h, w], 20 + seed).map(|v| v * 4.0);
            let att = SpatialAttention::<f64>::new(3, LifConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let got = ia_s_weights(&x, &att).unwrap();
            let k = &att.kernel.value;
            for ti in 0..t {
                for ni in 0..n {
                    let pooled = |ch: usize, hi: usize, wi: usize| {
                        let vals: Vec<f64> = (0..c).map(|ci| at(&x, ti, ni, ci, hi, wi)).collect();
                        if ch == 0 {
                            vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                        } else {
                            vals.iter().sum::<f64>() / c as f64
                        }
                    };
                    for hi in 0..h {
                        for wi in 0..w {
                            let mut acc = 0.0;
                            for ch in 0..2 {
                                for dy in 0..3 {
                                    for dx in 0..3 {
                                        let (yy, xx) = (hi as isize + dy as isize - 1, wi as isize + dx as isize - 1);
                                        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                                            continue;
                                        }
                                        acc += k.data()[(ch * 3 + dy) * 3 + dx] * pooled(ch, yy as usize, xx as usize);
                                    }
                                }
                            }
                            let idx = (ti * n + ni) * h * w + hi * w + wi;
                            assert_eq!(got.tensor().data()[idx], fire(acc, &att.neuron));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn zero_weights_gate_everything() {
        let x = random(&[4, 2, 16, 3, 3], 3);
        let mut t = TemporalAttention::<f64>::new(4, 4, LifConfig::default(), &mut rng()).unwrap();
        t.w_t0.value = Tensor::zeros(t.w_t0.value.shape());
        let wt = ma_t_weights(&x, &t).unwrap();
        assert_eq!(wt.count(), 0);
        assert_eq!(apply_attention(&x, &wt, Dimension::Temporal).unwrap().count_nonzero(), 0);
        let mut c = ChannelAttention::<f64>::new(16, 16, LifConfig::default(), &mut rng()).unwrap();
        c.w_c1.value = Tensor::zeros(c.w_c1.value.shape());
        assert_eq!(ma_c_weights(&x, &c).unwrap().count(), 0);
        let mut s = SpatialAttention::<f64>::new(7, LifConfig::default(), &mut rng()).unwrap();
        s.kernel.value = Tensor::zeros(s.kernel.value.shape());
        assert_eq!(ia_s_weights(&x, &s).unwrap().count(), 0);
    }

    #[test]
    fn saturated_weights_are_identity() {
        let x = Tensor::<f64>::ones(&[2, 2, 4, 3, 3]);
        let mut s = SpatialAttention::<f64>::new(3, LifConfig::default(), &mut rng()).unwrap();
        s.kernel.value = Tensor::full(s.kernel.value.shape(), 10.0);
        let w = ia_s_weights(&x, &s).unwrap();
        assert_eq!(w.count(), w.tensor().len());
        assert_eq!(apply_attention(&x, &w, Dimension::Spatial).unwrap(), x);
        let mut t = TemporalAttention::<f64>::new(2, 4, LifConfig::default(), &mut rng()).unwrap();
        t.w_t0.value = Tensor::ones(t.w_t0.value.shape());
        t.w_t1.value = Tensor::ones(t.w_t1.value.shape());
        let w = ma_t_weights(&x, &t).unwrap();
        assert_eq!(w.count(), 4);
    }

    #[test]
    fn constant_input_doubles_single_branch() {
        // avg and max descriptors coincide, so the drive is twice one branch
        let x = Tensor::<f64>::full(&[4, 1, 2, 2, 2], 0.3);
        let mut t = TemporalAttention::<f64>::new(4, 4, LifConfig::default(), &mut rng()).unwrap();
        t.w_t0.value = Tensor::from_vec(&[1, 4], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        // single branch drive per step: 1.2 · [1, 2, 3, 0.5]; fires iff 2·that/2 ≥ 1
        t.w_t1.value = Tensor::from_vec(&[4, 1], vec![1.0, 2.0, 3.0, 0.5]).unwrap();
        let w = ma_t_weights(&x, &t).unwrap();
        assert_eq!(w.tensor().data(), &[1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn repeated_evaluation_is_identical() {
        let x = random(&[4, 2, 16, 3, 3], 5);
        let c = ChannelAttention::<f64>::new(16, 16, LifConfig::default(), &mut rng()).unwrap();
        assert_eq!(ma_c_weights(&x, &c).unwrap(), ma_c_weights(&x, &c).unwrap());
    }

    #[test]
    fn gating_binary_stays_binary() {
        let x = random(&[2, 2, 3, 4, 4], 8).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
        let s = SpatialAttention::<f64>::new(7, LifConfig::default(), &mut rng()).unwrap();
        let w = ia_s_weights(&x, &s).unwrap();
        assert!(apply_attention(&x, &w, Dimension::Spatial).unwrap().is_binary());
    }

    #[test]
    fn shape_errors() {
        assert!(SpatialAttention::<f64>::new(4, LifConfig::default(), &mut rng()).is_err());
        assert!(TemporalAttention::<f64>::new(6, 4, LifConfig::default(), &mut rng()).is_err());
        let t = TemporalAttention::<f64>::new(4, 4, LifConfig::default(), &mut rng()).unwrap();
        assert!(ma_t_weights(&random(&[2, 1, 1, 2, 2], 1), &t).is_err());
        let w = SpikeTensor::new(Tensor::<f64>::ones(&[3, 2])).unwrap();
        assert!(apply_attention(&random(&[2, 2, 1, 1, 1], 1), &w, Dimension::Temporal).is_err());
    }
}
