//! Layer graphs built from architecture strings.
//!
//! Activations are laid out time-major, `[T·N, C, H, W]`: every layer other
//! than the LIF neurons treats the time steps as extra batch entries, and
//! batch normalisation therefore pools its statistics over time as well.
//! The classifier output is averaged over time into `[N, classes]`.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::{parse_arch, ArchToken};
use crate::attention::{AttentionConfig, AttentionKind, AttentionPlan, Dimension, Role};
use crate::autograd::{Param, PoolKind, SpikeMode, Tape, Var};
use crate::error::{Error, Result};
use crate::metrics::{conv_flops, fc_flops, SpikeRecord, SynapseCounters};
use crate::neuron::LifConfig;
use crate::residual::{build_block, BlockLayout, BlockTopology, JoinMode};
use crate::tensor::{Element, Tensor};

pub use crate::metrics::SynapseKind;

/// Uniform in `±sqrt(6 / fan_in)`.
pub fn kaiming_uniform<E: Element>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<E> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| E::from_f64_lossy(rng.gen_range(-bound..bound))).collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

/// Replicates a static batch `[N,C,H,W]` over `steps` time steps.
pub fn encode_static<E: Element>(images: &Tensor<E>, steps: usize) -> Result<Tensor<E>> {
    if steps == 0 {
        return Err(Error::Config("time steps must be at least 1".into()));
    }
    let mut shape = vec![steps];
    shape.extend_from_slice(images.shape());
    let mut data = Vec::with_capacity(images.len() * steps);
    for _ in 0..steps {
        data.extend_from_slice(images.data());
    }
    Tensor::from_vec(&shape, data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    Train,
    #[default]
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOptions {
    /// Batch statistics (train) or running statistics (eval) in BN.
    pub mode: Mode,
    pub spike_mode: SpikeMode,
    /// Register parameters as gradient-requiring leaves.
    pub trainable: bool,
    /// Fail on non-binary operands to bitwise joins.
    pub strict: bool,
    /// Update BN running statistics in train mode.
    pub update_stats: bool,
    /// Keep a copy of every spiking layer's output.
    pub capture: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            mode: Mode::Eval,
            spike_mode: SpikeMode::Heaviside,
            trainable: false,
            strict: true,
            update_stats: true,
            capture: false,
        }
    }
}

impl ForwardOptions {
    pub fn training() -> Self {
        Self { mode: Mode::Train, trainable: true, ..Default::default() }
    }
}

pub struct ForwardOutput<E> {
    /// `[N, classes]`, averaged over time steps.
    pub logits: Var,
    pub record: SpikeRecord,
    /// Spiking layer outputs when [`ForwardOptions::capture`] is set.
    pub captures: Vec<(String, Tensor<E>)>,
}

/// Per-pass state threaded through the layers.
pub(crate) struct Ctx<'a, E> {
    pub tape: &'a mut Tape<E>,
    pub steps: usize,
    pub opts: &'a ForwardOptions,
    pub record: &'a mut SpikeRecord,
    pub captures: Vec<(String, Tensor<E>)>,
    /// Input of an average pool that directly precedes a dense layer.
    pub pool_source: Option<Var>,
}

impl<'a, E: Element> Ctx<'a, E> {
    pub fn new(tape: &'a mut Tape<E>, steps: usize, opts: &'a ForwardOptions, record: &'a mut SpikeRecord) -> Self {
        Self { tape, steps, opts, record, captures: Vec::new(), pool_source: None }
    }

    fn counters(&mut self, name: &str, kind: SynapseKind, flops: u64) -> &mut SynapseCounters {
        self.record.synapses.entry(name.to_string()).or_insert_with(|| SynapseCounters::new(kind, flops))
    }

    pub fn note_synapse(&mut self, name: &str, kind: SynapseKind, encoder: bool, attention: bool, flops: u64, x: Var) {
        let values: Vec<f64> = self.tape.value(x).data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
        let c = self.counters(name, kind, flops);
        c.encoder = encoder;
        c.attention = attention;
        c.observe(values.into_iter());
    }

    pub fn note_fixed_flops(&mut self, name: &str, kind: SynapseKind, flops: u64) {
        let c = self.counters(name, kind, flops);
        c.attention = true;
        c.full = true;
    }

    pub fn note_neurons(&mut self, name: &str, attention: bool, spikes: Var, steps: usize) {
        let v = self.tape.value(spikes);
        let count = v.count_nonzero() as u64;
        let sample_steps = self.record.samples.max(1) * steps as u64;
        let neurons = v.len() as u64 / sample_steps;
        if self.opts.capture {
            self.captures.push((name.to_string(), v.clone()));
        }
        let c = self.record.neurons.entry(name.to_string()).or_insert(crate::metrics::NeuronCounters {
            attention,
            neurons,
            spikes: 0,
            sample_steps: 0,
        });
        c.spikes += count;
        c.sample_steps += sample_steps;
    }
}

fn nan_check<E: Element>(tape: &Tape<E>, v: Var, name: &str) -> Result<()> {
    if tape.value(v).has_nan() {
        return Err(Error::NaN(name.to_string()));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Conv<E> {
    pub name: String,
    /// `[out, in, k, k]`
    pub weight: Param<E>,
    pub stride: usize,
    pub padding: usize,
    pub encoder: bool,
}

#[derive(Clone, Debug)]
pub struct BatchNorm<E> {
    pub name: String,
    pub gamma: Param<E>,
    pub beta: Param<E>,
    pub running_mean: Vec<E>,
    /// Unbiased running variance.
    pub running_var: Vec<E>,
    pub eps: f64,
    pub momentum: f64,
}

#[derive(Clone, Debug)]
pub struct Lif<E> {
    pub name: String,
    pub cfg: LifConfig,
    /// Hidden state carried into the next forward pass; `None` is `u_reset`.
    pub state: Option<Tensor<E>>,
}

#[derive(Clone, Debug)]
pub struct Dense<E> {
    pub name: String,
    /// `[out, in]`
    pub weight: Param<E>,
    pub bias: Param<E>,
}

#[derive(Clone, Debug)]
pub struct Attention<E> {
    pub name: String,
    pub role: Role,
    pub kind: AttentionKind<E>,
}

#[derive(Clone, Debug)]
pub enum Layer<E> {
    Conv(Conv<E>),
    BatchNorm(BatchNorm<E>),
    Lif(Lif<E>),
    MaxPool { name: String, kernel: usize, stride: usize, padding: usize },
    AdaptiveAvgPool { name: String, size: usize },
    GlobalAvgPool { name: String },
    Dense(Dense<E>),
    Attention(Attention<E>),
}

impl<E: Element> Layer<E> {
    pub fn name(&self) -> &str {
        match self {
            Layer::Conv(l) => &l.name,
            Layer::BatchNorm(l) => &l.name,
            Layer::Lif(l) => &l.name,
            Layer::MaxPool { name, .. } | Layer::AdaptiveAvgPool { name, .. } | Layer::GlobalAvgPool { name } => name,
            Layer::Dense(l) => &l.name,
            Layer::Attention(l) => &l.name,
        }
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<E>)> {
        match self {
            Layer::Conv(l) => vec![(format!("{}.weight", l.name), &mut l.weight)],
            Layer::BatchNorm(l) => {
                vec![(format!("{}.gamma", l.name), &mut l.gamma), (format!("{}.beta", l.name), &mut l.beta)]
            }
            Layer::Dense(l) => {
                vec![(format!("{}.weight", l.name), &mut l.weight), (format!("{}.bias", l.name), &mut l.bias)]
            }
            Layer::Attention(l) => {
                let name = l.name.clone();
                l.kind.params_mut().into_iter().map(|(p, v)| (format!("{name}.{p}"), v)).collect()
            }
            _ => vec![],
        }
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut Vec<E>)> {
        match self {
            Layer::BatchNorm(l) => vec![
                (format!("{}.running_mean", l.name), &mut l.running_mean),
                (format!("{}.running_var", l.name), &mut l.running_var),
            ],
            _ => vec![],
        }
    }

    /// Conv, dense and attention-internal names that appear in a record.
    fn synapse_names(&self, out: &mut Vec<String>) {
        match self {
            Layer::Conv(l) => out.push(l.name.clone()),
            Layer::Dense(l) => out.push(l.name.clone()),
            Layer::Attention(l) => {
                out.push(format!("{}.pool", l.name));
                match l.kind.dimension() {
                    Dimension::Spatial => out.push(format!("{}.conv", l.name)),
                    _ => {
                        out.push(format!("{}.fc0", l.name));
                        out.push(format!("{}.fc1", l.name));
                    }
                }
            }
            _ => {}
        }
    }

    fn reset(&mut self) {
        if let Layer::Lif(l) = self {
            l.state = None;
        }
    }

    fn forward(&mut self, ctx: &mut Ctx<'_, E>, x: Var) -> Result<Var> {
        let steps = ctx.steps;
        let pool_source = ctx.pool_source.take();
        match self {
            Layer::Conv(l) => {
                let k = l.weight.bind(ctx.tape, ctx.opts.trainable);
                let y = ctx.tape.conv2d(x, k, l.stride, l.padding)?;
                let ws = l.weight.value.shape();
                let ys = ctx.tape.shape(y);
                let flops = conv_flops(ys[2], ys[3], ws[2], ws[1], ws[0]) * steps as u64;
                ctx.note_synapse(&l.name, SynapseKind::Conv, l.encoder, false, flops, x);
                nan_check(ctx.tape, y, &l.name)?;
                Ok(y)
            }
            Layer::BatchNorm(l) => {
                let g = l.gamma.bind(ctx.tape, ctx.opts.trainable);
                let b = l.beta.bind(ctx.tape, ctx.opts.trainable);
                let y = match ctx.opts.mode {
                    Mode::Train => {
                        let (y, stats) = ctx.tape.batch_norm_train(x, g, b, l.eps)?;
                        if ctx.opts.update_stats {
                            let m = E::from_f64_lossy(l.momentum);
                            let keep = E::one() - m;
                            let n = stats.count as f64;
                            let unbias = E::from_f64_lossy(if n > 1.0 { n / (n - 1.0) } else { 1.0 });
                            for (r, &v) in l.running_mean.iter_mut().zip(&stats.mean) {
                                *r = keep * *r + m * v;
                            }
                            for (r, &v) in l.running_var.iter_mut().zip(&stats.var) {
                                *r = keep * *r + m * v * unbias;
                            }
                        }
                        y
                    }
                    Mode::Eval => ctx.tape.batch_norm_eval(x, g, b, &l.running_mean, &l.running_var, l.eps)?,
                };
                nan_check(ctx.tape, y, &l.name)?;
                Ok(y)
            }
            Layer::Lif(l) => {
                let m = ctx.tape.value(x).len() / steps;
                let h0 = match &l.state {
                    Some(h) => h.clone(),
                    None => Tensor::full(&[m], E::from_f64_lossy(l.cfg.u_reset)),
                };
                let run = ctx.tape.lif_multistep(x, steps, &h0, &l.cfg, ctx.opts.spike_mode).map_err(|e| match e {
                    Error::NaN(_) => Error::NaN(l.name.clone()),
                    Error::ShapeMismatch { left, right, .. } => Error::Shape(format!(
                        "{}: stored state {left:?} does not fit input {right:?}; call reset_states between batches of different size",
                        l.name
                    )),
                    other => other,
                })?;
                l.state = Some(run.final_h);
                ctx.note_neurons(&l.name, false, run.spikes, steps);
                Ok(run.spikes)
            }
            Layer::MaxPool { kernel, stride, padding, .. } => ctx.tape.pool2d(x, PoolKind::Max, *kernel, *stride, *padding),
            Layer::AdaptiveAvgPool { size, .. } => {
                ctx.pool_source = Some(x);
                ctx.tape.adaptive_avg_pool2d(x, *size)
            }
            Layer::GlobalAvgPool { .. } => {
                ctx.pool_source = Some(x);
                ctx.tape.global_avg_pool(x)
            }
            Layer::Dense(l) => {
                let shape = ctx.tape.shape(x).to_vec();
                let x = if shape.len() > 2 {
                    ctx.tape.reshape(x, &[shape[0], shape[1..].iter().product()])?
                } else {
                    x
                };
                let w = l.weight.bind(ctx.tape, ctx.opts.trainable);
                let b = l.bias.bind(ctx.tape, ctx.opts.trainable);
                let ws = l.weight.value.shape();
                let flops = fc_flops(ws[1], ws[0]) * steps as u64;
                // Averaging commutes with the dense map, so a pooled head
                // is driven by the spikes that enter the pool.
                ctx.note_synapse(&l.name, SynapseKind::Dense, false, false, flops, pool_source.unwrap_or(x));
                let y = ctx.tape.dense(x, w, Some(b))?;
                nan_check(ctx.tape, y, &l.name)?;
                Ok(y)
            }
            Layer::Attention(l) => {
                let mask = l.kind.mask(ctx, &l.name, x)?;
                ctx.tape.mul(x, mask)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub enum Shortcut<E> {
    Identity,
    Projection(Vec<Layer<E>>),
    /// Removed after its output was verified silent; the join passes the
    /// backbone through.
    Pruned,
}

#[derive(Clone, Debug)]
pub struct ResidualBlock<E> {
    pub name: String,
    pub layout: BlockLayout,
    pub backbone: Vec<Layer<E>>,
    pub shortcut: Shortcut<E>,
    pub post: Vec<Layer<E>>,
}

impl<E: Element> ResidualBlock<E> {
    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer<E>> {
        let short: &mut [Layer<E>] = match &mut self.shortcut {
            Shortcut::Projection(v) => v,
            _ => &mut [],
        };
        self.backbone.iter_mut().chain(short.iter_mut()).chain(self.post.iter_mut())
    }

    fn layers(&self) -> impl Iterator<Item = &Layer<E>> {
        let short: &[Layer<E>] = match &self.shortcut {
            Shortcut::Projection(v) => v,
            _ => &[],
        };
        self.backbone.iter().chain(short.iter()).chain(self.post.iter())
    }

    /// Name of the spiking layer whose output feeds the join from the
    /// shortcut side, for projection shortcuts that end in one.
    pub fn shortcut_neuron(&self) -> Option<&str> {
        match &self.shortcut {
            Shortcut::Projection(v) => match v.last() {
                Some(Layer::Lif(l)) => Some(&l.name),
                _ => None,
            },
            _ => None,
        }
    }

    fn forward(&mut self, ctx: &mut Ctx<'_, E>, x: Var) -> Result<Var> {
        let mut b = x;
        for l in &mut self.backbone {
            b = l.forward(ctx, b)?;
        }
        let s = match &mut self.shortcut {
            Shortcut::Identity => Some(x),
            Shortcut::Projection(layers) => {
                let mut s = x;
                for l in layers {
                    s = l.forward(ctx, s)?;
                }
                Some(s)
            }
            Shortcut::Pruned => None,
        };
        let mut y = match s {
            Some(s) => {
                let strict = ctx.opts.strict.then_some(self.name.as_str());
                ctx.tape.join(b, s, self.layout.join, strict)?
            }
            None => b,
        };
        for l in &mut self.post {
            y = l.forward(ctx, y)?;
        }
        Ok(y)
    }
}

#[derive(Clone, Debug)]
pub enum Node<E> {
    Layer(Layer<E>),
    Block(ResidualBlock<E>),
}

/// Everything needed to rebuild a network deterministically.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub arch: String,
    /// `[C, H, W]` of one time step of one sample.
    pub input: [usize; 3],
    pub timesteps: usize,
    pub join: JoinMode,
    pub topology: BlockTopology,
    pub plan: Option<AttentionPlan>,
    pub lif: LifConfig,
    pub attention: AttentionConfig,
    pub seed: u64,
}

impl NetworkSpec {
    /// OR-SEW blocks for OR joins, SEW blocks otherwise, no attention.
    pub fn new(arch: &str, input: [usize; 3], timesteps: usize, join: JoinMode) -> Self {
        Self {
            arch: arch.to_string(),
            input,
            timesteps,
            join,
            topology: if join == JoinMode::Or { BlockTopology::OrSew } else { BlockTopology::Sew },
            plan: None,
            lif: LifConfig::default(),
            attention: AttentionConfig::default(),
            seed: 0,
        }
    }

    pub fn with_plan(mut self, plan: Option<AttentionPlan>) -> Self {
        self.plan = plan;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

#[derive(Clone, Debug)]
pub struct Network<E> {
    pub spec: NetworkSpec,
    pub nodes: Vec<Node<E>>,
    pub classes: usize,
}

#[derive(Clone, Copy, Debug)]
enum Extent {
    Map(usize, usize, usize),
    Flat(usize),
}

struct Builder<'a, R> {
    rng: &'a mut R,
    spec: &'a NetworkSpec,
    encoder_done: bool,
}

#[derive(Default)]
struct Names {
    counts: std::collections::HashMap<&'static str, usize>,
}

impl Names {
    fn next(&mut self, prefix: &str, kind: &'static str) -> String {
        let c = self.counts.entry(kind).or_default();
        let name = format!("{prefix}{kind}{c}");
        *c += 1;
        name
    }
}

impl<R: Rng> Builder<'_, R> {
    fn layer<E: Element>(
        &mut self,
        tok: &ArchToken,
        extent: &mut Extent,
        names: &mut Names,
        prefix: &str,
        top_level: bool,
    ) -> Result<Layer<E>> {
        let map = |e: &Extent, what: &str| match *e {
            Extent::Map(c, h, w) => Ok((c, h, w)),
            Extent::Flat(_) => Err(Error::Config(format!("{what} needs a feature map, got a flat vector"))),
        };
        let layer = match tok {
            ArchToken::Conv { channels, kernel, stride, padding } => {
                let (c, h, w) = map(extent, "conv")?;
                let oh = crate::autograd::window_extent(h, *kernel, *stride, *padding)?;
                let ow = crate::autograd::window_extent(w, *kernel, *stride, *padding)?;
                *extent = Extent::Map(*channels, oh, ow);
                let encoder = top_level && !self.encoder_done;
                self.encoder_done = true;
                Layer::Conv(Conv {
                    name: names.next(prefix, "conv"),
                    weight: Param::new(kaiming_uniform(&[*channels, c, *kernel, *kernel], c * kernel * kernel, self.rng)),
                    stride: *stride,
                    padding: *padding,
                    encoder,
                })
            }
            ArchToken::BatchNorm => {
                let c = match *extent {
                    Extent::Map(c, _, _) => c,
                    Extent::Flat(f) => f,
                };
                Layer::BatchNorm(BatchNorm {
                    name: names.next(prefix, "bn"),
                    gamma: Param::new(Tensor::ones(&[c])),
                    beta: Param::new(Tensor::zeros(&[c])),
                    running_mean: vec![E::zero(); c],
                    running_var: vec![E::one(); c],
                    eps: 1e-5,
                    momentum: 0.1,
                })
            }
            ArchToken::Lif => Layer::Lif(Lif { name: names.next(prefix, "lif"), cfg: self.spec.lif.clone(), state: None }),
            ArchToken::MaxPool { kernel, stride, padding } => {
                let (c, h, w) = map(extent, "max pooling")?;
                if 2 * padding > *kernel {
                    return Err(Error::Config(format!("max pool padding {padding} exceeds half the window {kernel}")));
                }
                let oh = crate::autograd::window_extent(h, *kernel, *stride, *padding)?;
                let ow = crate::autograd::window_extent(w, *kernel, *stride, *padding)?;
                *extent = Extent::Map(c, oh, ow);
                Layer::MaxPool { name: names.next(prefix, "mp"), kernel: *kernel, stride: *stride, padding: *padding }
            }
            ArchToken::AdaptiveAvgPool { size } => {
                let (c, _, _) = map(extent, "adaptive pooling")?;
                *extent = Extent::Map(c, *size, *size);
                Layer::AdaptiveAvgPool { name: names.next(prefix, "aap"), size: *size }
            }
            ArchToken::GlobalAvgPool => {
                let (c, _, _) = map(extent, "global pooling")?;
                *extent = Extent::Flat(c);
                Layer::GlobalAvgPool { name: names.next(prefix, "ap") }
            }
            ArchToken::Dense { features } => {
                let fin = match *extent {
                    Extent::Map(c, h, w) => c * h * w,
                    Extent::Flat(f) => f,
                };
                *extent = Extent::Flat(*features);
                Layer::Dense(Dense {
                    name: names.next(prefix, "fc"),
                    weight: Param::new(kaiming_uniform(&[*features, fin], fin, self.rng)),
                    bias: Param::new(Tensor::zeros(&[*features])),
                })
            }
            ArchToken::Ma | ArchToken::Ia => {
                let (c, _, _) = map(extent, "attention")?;
                let (role, dim, kind) = match tok {
                    ArchToken::Ma => (Role::Promoting, self.spec.plan.and_then(|p| p.ma), "ma"),
                    _ => (Role::Inhibitory, self.spec.plan.and_then(|p| p.ia), "ia"),
                };
                let dim = dim.ok_or_else(|| Error::Attention(format!("{tok} requires an attention plan with that role")))?;
                Layer::Attention(Attention {
                    name: names.next(prefix, kind),
                    role,
                    kind: AttentionKind::new(dim, self.spec.timesteps, c, &self.spec.attention, &self.spec.lif, self.rng)?,
                })
            }
            ArchToken::Block { .. } | ArchToken::Repeat { .. } => {
                return Err(Error::Config(format!("{tok} is not a plain layer")));
            }
        };
        Ok(layer)
    }

    fn stage<E: Element>(&mut self, tokens: &[ArchToken], extent: &mut Extent, prefix: &str) -> Result<Vec<Layer<E>>> {
        let mut names = Names::default();
        tokens.iter().map(|t| self.layer(t, extent, &mut names, prefix, false)).collect()
    }
}

/// Builds a network from its spec. Parameters are Kaiming-uniform (conv,
/// dense, attention), BN starts at `gamma = 1`, `beta = 0`.
pub fn build_network<E: Element>(spec: &NetworkSpec) -> Result<Network<E>> {
    spec.lif.validate()?;
    if spec.timesteps == 0 {
        return Err(Error::Config("time steps must be at least 1".into()));
    }
    let plan = spec.plan.filter(|p| !p.is_empty());
    if let Some(p) = plan {
        if spec.join != JoinMode::Or {
            return Err(Error::Attention(format!("attention plan {p} requires the OR join, got {}", spec.join)));
        }
    }
    let tokens = parse_arch(&spec.arch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut b = Builder { rng: &mut rng, spec, encoder_done: false };
    let [c, h, w] = spec.input;
    let mut extent = Extent::Map(c, h, w);
    let mut names = Names::default();
    let mut nodes = Vec::new();
    let mut blocks = 0;
    for tok in &tokens {
        match tok {
            ArchToken::Block { channels, stride } => {
                let Extent::Map(cin, _, _) = extent else {
                    return Err(Error::Config("residual block needs a feature map".into()));
                };
                let layout = build_block(spec.topology, cin, *channels, *stride, spec.join, plan.as_ref())?;
                let name = format!("block{blocks}");
                blocks += 1;
                let mut short_extent = extent;
                let backbone = b.stage(&layout.backbone, &mut extent, &format!("{name}.main."))?;
                let shortcut = match &layout.shortcut {
                    Some(t) => Shortcut::Projection(b.stage(t, &mut short_extent, &format!("{name}.short."))?),
                    None => Shortcut::Identity,
                };
                let post = b.stage(&layout.post, &mut extent, &format!("{name}.post."))?;
                nodes.push(Node::Block(ResidualBlock { name, layout, backbone, shortcut, post }));
            }
            _ => nodes.push(Node::Layer(b.layer(tok, &mut extent, &mut names, "", true)?)),
        }
    }
    let classes = match (nodes.last(), extent) {
        (Some(Node::Layer(Layer::Dense(_))), Extent::Flat(k)) => k,
        _ => return Err(Error::Config("architecture must end with a fully connected layer".into())),
    };
    Ok(Network { spec: spec.clone(), nodes, classes })
}

impl<E: Element> Network<E> {
    pub fn layers(&self) -> Vec<&Layer<E>> {
        let mut out = Vec::new();
        for n in &self.nodes {
            match n {
                Node::Layer(l) => out.push(l),
                Node::Block(b) => out.extend(b.layers()),
            }
        }
        out
    }

    fn layers_mut(&mut self) -> Vec<&mut Layer<E>> {
        let mut out = Vec::new();
        for n in &mut self.nodes {
            match n {
                Node::Layer(l) => out.push(l),
                Node::Block(b) => out.extend(b.layers_mut()),
            }
        }
        out
    }

    pub fn blocks(&self) -> impl Iterator<Item = &ResidualBlock<E>> {
        self.nodes.iter().filter_map(|n| match n {
            Node::Block(b) => Some(b),
            _ => None,
        })
    }

    /// Trainable parameters in graph order.
    pub fn params_mut(&mut self) -> Vec<(String, &mut Param<E>)> {
        self.layers_mut().into_iter().flat_map(|l| l.params_mut()).collect()
    }

    pub fn params(&self) -> Vec<(String, Tensor<E>)> {
        let mut me = self.clone();
        me.params_mut().into_iter().map(|(n, p)| (n, p.value.clone())).collect()
    }

    /// Non-trainable state (BN running statistics) in graph order.
    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Vec<E>)> {
        self.layers_mut().into_iter().flat_map(|l| l.buffers_mut()).collect()
    }

    pub fn param_count(&self) -> usize {
        let mut me = self.clone();
        me.params_mut().iter().map(|(_, p)| p.len()).sum()
    }

    /// Conv, dense and attention-internal layer names in graph order.
    pub fn synapse_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for l in self.layers() {
            l.synapse_names(&mut out);
        }
        out
    }

    /// Names of all main-path spiking layers.
    pub fn neuron_names(&self) -> Vec<String> {
        self.layers()
            .into_iter()
            .filter_map(|l| match l {
                Layer::Lif(l) => Some(l.name.clone()),
                _ => None,
            })
            .collect()
    }

    /// `(block, shortcut neuron)` for every unpruned projection shortcut.
    pub fn shortcut_neurons(&self) -> Vec<(String, String)> {
        self.blocks().filter_map(|b| b.shortcut_neuron().map(|n| (b.name.clone(), n.to_string()))).collect()
    }

    pub fn pruned_blocks(&self) -> Vec<String> {
        self.blocks().filter(|b| matches!(b.shortcut, Shortcut::Pruned)).map(|b| b.name.clone()).collect()
    }

    /// Replaces a block's projection shortcut by nothing; the join then
    /// passes the backbone through. No verification is done here.
    pub fn remove_shortcut(&mut self, block: &str) -> Result<()> {
        let b = self
            .nodes
            .iter_mut()
            .find_map(|n| match n {
                Node::Block(b) if b.name == block => Some(b),
                _ => None,
            })
            .ok_or_else(|| Error::UnknownLayer(block.to_string()))?;
        if !matches!(b.layout.join, JoinMode::Or | JoinMode::Add) {
            return Err(Error::Config(format!("{block}: a silent shortcut is only absorbed by OR or ADD joins")));
        }
        match b.shortcut {
            Shortcut::Projection(_) => {
                b.shortcut = Shortcut::Pruned;
                Ok(())
            }
            Shortcut::Pruned => Ok(()),
            Shortcut::Identity => Err(Error::Config(format!("{block} has an identity shortcut"))),
        }
    }

    /// Clears every LIF hidden state back to `u_reset`.
    pub fn reset_states(&mut self) {
        for l in self.layers_mut() {
            l.reset();
        }
    }

    /// Runs `input` (`[T, N, C, H, W]`) through the graph.
    pub fn forward(&mut self, tape: &mut Tape<E>, input: &Tensor<E>, opts: &ForwardOptions) -> Result<ForwardOutput<E>> {
        let s = input.shape();
        let [c, h, w] = self.spec.input;
        let steps = self.spec.timesteps;
        if s.len() != 5 || s[0] != steps || s[2..] != [c, h, w] {
            return Err(Error::ShapeMismatch { op: "network input", left: vec![steps, 0, c, h, w], right: s.to_vec() });
        }
        let n = s[1];
        let mut record = SpikeRecord::new(steps);
        record.samples = n as u64;
        let x = tape.constant(input.clone().reshape(&[steps * n, c, h, w])?);
        let mut ctx = Ctx::new(tape, steps, opts, &mut record);
        let mut y = x;
        for node in &mut self.nodes {
            y = match node {
                Node::Layer(l) => l.forward(&mut ctx, y)?,
                Node::Block(b) => b.forward(&mut ctx, y)?,
            };
        }
        let captures = std::mem::take(&mut ctx.captures);
        let y = tape.reshape(y, &[steps, n, self.classes])?;
        let logits = tape.mean_axes(y, &[0])?;
        nan_check(tape, logits, "logits")?;
        Ok(ForwardOutput { logits, record, captures })
    }

    /// Forward without gradients in eval mode, states reset before and after.
    pub fn infer(&mut self, input: &Tensor<E>) -> Result<(Tensor<E>, SpikeRecord)> {
        self.reset_states();
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, input, &ForwardOptions::default())?;
        self.reset_states();
        Ok((tape.value(out.logits).clone(), out.record))
    }

    /// Forgets tape bindings after a pass.
    pub fn unbind(&mut self) {
        for (_, p) in self.params_mut() {
            p.unbind();
        }
    }
}

impl<E: Element> fmt::Display for Network<E> {
    /// One line per node; blocks are shown as their layouts.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for n in &self.nodes {
            match n {
                Node::Layer(l) => writeln!(f, "{}", l.name())?,
                Node::Block(b) => {
                    let pruned = if matches!(b.shortcut, Shortcut::Pruned) { " (shortcut pruned)" } else { "" };
                    writeln!(f, "{}: {}{pruned}", b.name, b.layout)?
                }
            }
        }
        write!(f, "classes: {}", self.classes)
    }
}
