//! Residual joins, block layouts and the spike-drivenness audit.
//!
//! | join | `g(x, y)`         |
//! |------|-------------------|
//! | ADD  | `x + y`           |
//! | AND  | `x · y`           |
//! | IAND | `(1 − x) · y`     |
//! | OR   | `(x + y) − x · y` |
//!
//! The bitwise joins are differentiated through these arithmetic forms, so
//! e.g. `∂OR/∂x = 1 − y`.

use std::fmt;
use std::str::FromStr;

use crate::arch::{render, ArchToken};
use crate::attention::{AttentionPlan, Placement};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::metrics::{OpClass, SpikeRecord, SynapseKind};
use crate::network::{ForwardOptions, Mode, Network};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum JoinMode {
    Add,
    And,
    Iand,
    #[default]
    Or,
}

impl JoinMode {
    pub fn is_bitwise(self) -> bool {
        self != JoinMode::Add
    }

    fn apply<E: Element>(self, x: E, y: E) -> E {
        match self {
            JoinMode::Add => x + y,
            JoinMode::And => x * y,
            JoinMode::Iand => (E::one() - x) * y,
            JoinMode::Or => (x + y) - x * y,
        }
    }
}

impl fmt::Display for JoinMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            JoinMode::Add => "ADD",
            JoinMode::And => "AND",
            JoinMode::Iand => "IAND",
            JoinMode::Or => "OR",
        })
    }
}

impl FromStr for JoinMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "ADD" => Ok(JoinMode::Add),
            "AND" => Ok(JoinMode::And),
            "IAND" => Ok(JoinMode::Iand),
            "OR" => Ok(JoinMode::Or),
            _ => Err(Error::Config(format!("unknown join mode {s:?}"))),
        }
    }
}

fn non_binary<E: Element>(t: &Tensor<E>) -> usize {
    t.data().iter().filter(|&&v| v != E::zero() && v != E::one()).count()
}

/// Joins two same-shaped tensors.
pub fn join<E: Element>(x: &Tensor<E>, y: &Tensor<E>, mode: JoinMode) -> Result<Tensor<E>> {
    if x.shape() != y.shape() {
        return Err(Error::ShapeMismatch { op: "join", left: x.shape().to_vec(), right: y.shape().to_vec() });
    }
    x.zip_map(y, |a, b| mode.apply(a, b))
}

/// [`join`] that rejects non-binary operands to a bitwise mode.
pub fn join_strict<E: Element>(x: &Tensor<E>, y: &Tensor<E>, mode: JoinMode, layer: &str) -> Result<Tensor<E>> {
    if mode.is_bitwise() {
        let count = non_binary(x) + non_binary(y);
        if count > 0 {
            return Err(Error::NonBinary { layer: layer.to_string(), count });
        }
    }
    join(x, y, mode)
}

impl<E: Element> Tape<E> {
    /// Differentiable join. With `strict = Some(layer)` a bitwise mode
    /// fails on non-binary operands.
    pub fn join(&mut self, x: Var, y: Var, mode: JoinMode, strict: Option<&str>) -> Result<Var> {
        if self.shape(x) != self.shape(y) {
            return Err(Error::ShapeMismatch { op: "join", left: self.shape(x).to_vec(), right: self.shape(y).to_vec() });
        }
        if let (Some(layer), true) = (strict, mode.is_bitwise()) {
            let count = non_binary(self.value(x)) + non_binary(self.value(y));
            if count > 0 {
                return Err(Error::NonBinary { layer: layer.to_string(), count });
            }
        }
        match mode {
            JoinMode::Add => self.add(x, y),
            JoinMode::And => self.mul(x, y),
            JoinMode::Iand => {
                let nx = self.affine(x, -1.0, 1.0);
                self.mul(nx, y)
            }
            JoinMode::Or => {
                let s = self.add(x, y)?;
                let p = self.mul(x, y)?;
                self.sub(s, p)
            }
        }
    }
}

/// Residual block wiring.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum BlockTopology {
    /// Neuron after the join: `SN(g(W2·SN(W1·I), I))`.
    Vanilla,
    /// Pre-activation: `g(W2·SN(W1·SN(I)), I)` on real values.
    Ms,
    /// Join of two spike tensors with a selectable join.
    Sew,
    /// Join of two spike tensors with OR and attention insertion points.
    #[default]
    OrSew,
}

impl fmt::Display for BlockTopology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlockTopology::Vanilla => "vanilla",
            BlockTopology::Ms => "ms",
            BlockTopology::Sew => "sew",
            BlockTopology::OrSew => "or-sew",
        })
    }
}

impl FromStr for BlockTopology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vanilla" => Ok(BlockTopology::Vanilla),
            "ms" => Ok(BlockTopology::Ms),
            "sew" => Ok(BlockTopology::Sew),
            "or-sew" | "orsew" => Ok(BlockTopology::OrSew),
            _ => Err(Error::Config(format!("unknown block topology {s:?}"))),
        }
    }
}

/// Token-level layout of one residual block.
///
/// The backbone and shortcut are joined; the post-join stage follows the
/// join without a second residual connection. `shortcut = None` is the
/// identity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockLayout {
    pub topology: BlockTopology,
    pub join: JoinMode,
    pub backbone: Vec<ArchToken>,
    pub shortcut: Option<Vec<ArchToken>>,
    pub post: Vec<ArchToken>,
}

impl fmt::Display for BlockLayout {
    /// `backbone | shortcut | post`, with `identity` for an identity shortcut.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let short = self.shortcut.as_deref().map(render).unwrap_or_else(|| "identity".into());
        write!(f, "{} | {} | {}", render(&self.backbone), short, render(&self.post))
    }
}

fn conv(channels: usize, kernel: usize, stride: usize) -> ArchToken {
    ArchToken::Conv { channels, kernel, stride, padding: kernel / 2 }
}

/// Lays out a block. A projection shortcut is used when the block
/// downsamples or changes the channel count; otherwise it is the identity.
pub fn build_block(
    topology: BlockTopology,
    in_channels: usize,
    channels: usize,
    stride: usize,
    join: JoinMode,
    plan: Option<&AttentionPlan>,
) -> Result<BlockLayout> {
    use ArchToken::{BatchNorm as Bn, Ia, Lif, Ma};
    if channels == 0 || in_channels == 0 {
        return Err(Error::Config("block channels must be positive".into()));
    }
    if stride == 0 {
        return Err(Error::Config("block stride must be positive".into()));
    }
    let plan = plan.filter(|p| !p.is_empty());
    if let Some(p) = plan {
        if topology != BlockTopology::OrSew {
            return Err(Error::Attention(format!("attention plan {p} requires the OR-SEW topology, got {topology}")));
        }
        if join != JoinMode::Or {
            return Err(Error::Attention(format!("attention plan {p} requires the OR join, got {join}")));
        }
    }
    if topology == BlockTopology::OrSew && join != JoinMode::Or {
        return Err(Error::Config(format!("OR-SEW blocks join with OR, got {join}")));
    }
    let projection = stride != 1 || in_channels != channels;
    let c3s = conv(channels, 3, stride);
    let c3 = conv(channels, 3, 1);
    let c1s = ArchToken::Conv { channels, kernel: 1, stride, padding: 0 };
    let layout = match topology {
        BlockTopology::Sew | BlockTopology::OrSew => {
            let has_ma = plan.is_some_and(|p| p.ma.is_some());
            let has_ia = plan.is_some_and(|p| p.ia.is_some());
            let placement = plan.map(|p| p.placement).unwrap_or_default();
            let ma = |first: bool, post: bool| {
                has_ma
                    && match placement {
                        Placement::A => first,
                        Placement::B => !first,
                        Placement::C => first && !post,
                        Placement::D => !first && !post,
                    }
            };
            let stage = |c_first: ArchToken, post: bool| {
                let mut v = vec![c_first, Bn];
                if ma(true, post) {
                    v.push(Ma);
                }
                v.extend([Lif, c3.clone(), Bn]);
                if ma(false, post) {
                    v.push(Ma);
                }
                v.push(Lif);
                v
            };
            let shortcut = projection.then(|| {
                let mut v = vec![c1s.clone(), Bn];
                if has_ia {
                    v.push(Ia);
                }
                v.push(Lif);
                v
            });
            BlockLayout { topology, join, backbone: stage(c3s, false), shortcut, post: stage(c3.clone(), true) }
        }
        BlockTopology::Vanilla => BlockLayout {
            topology,
            join,
            backbone: vec![c3s, Bn, Lif, c3.clone(), Bn],
            shortcut: projection.then(|| vec![c1s.clone(), Bn]),
            post: vec![Lif, c3.clone(), Bn, Lif, c3.clone(), Bn, Lif],
        },
        BlockTopology::Ms => BlockLayout {
            topology,
            join,
            backbone: vec![Lif, c3s, Bn, Lif, c3.clone(), Bn],
            shortcut: projection.then(|| vec![c1s.clone(), Bn]),
            post: vec![Lif, c3.clone(), Bn, Lif, c3.clone(), Bn],
        },
    };
    Ok(layout)
}

/// One conv or dense layer in an audit.
#[derive(Clone, Debug, PartialEq)]
pub struct AuditLine {
    pub name: String,
    pub kind: SynapseKind,
    pub class: OpClass,
    pub encoder: bool,
    pub nonzero_fraction: f64,
    pub non_binary: u64,
    pub max_non_binary: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditReport {
    pub lines: Vec<AuditLine>,
}

impl AuditReport {
    /// Builds the report from recorded counters; attention internals and
    /// pooling are not part of the audit.
    pub fn from_record(record: &SpikeRecord) -> Self {
        let lines = record
            .synapses
            .iter()
            .filter(|(_, c)| !c.attention && c.kind != SynapseKind::Pool)
            .map(|(name, c)| AuditLine {
                name: name.clone(),
                kind: c.kind,
                class: if c.encoder || c.non_binary > 0 { OpClass::Mac } else { OpClass::Ac },
                encoder: c.encoder,
                nonzero_fraction: c.fr(),
                non_binary: c.non_binary,
                max_non_binary: c.max_non_binary,
            })
            .collect();
        Self { lines }
    }

    /// Non-encoder layers that received non-binary input.
    pub fn violations(&self) -> Vec<&AuditLine> {
        self.lines.iter().filter(|l| !l.encoder && l.class == OpClass::Mac).collect()
    }

    pub fn fully_spike_driven(&self) -> bool {
        self.violations().is_empty()
    }
}

impl fmt::Display for AuditReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<32} {:>5} {:>5} {:>10}", "layer", "kind", "class", "nonzero")?;
        for l in &self.lines {
            let tag = if l.encoder { " (encoder)" } else { "" };
            writeln!(f, "{:<32} {:>5} {:>5} {:>10.6}{tag}", l.name, l.kind, l.class, l.nonzero_fraction)?;
        }
        let v = self.violations();
        if v.is_empty() {
            write!(f, "fully spike-driven outside the encoder")
        } else {
            writeln!(f, "{} layer(s) receive non-binary input:", v.len())?;
            for l in &v {
                writeln!(f, "  {}: {} values, max magnitude {}", l.name, l.non_binary, l.max_non_binary)?;
            }
            Ok(())
        }
    }
}

/// Runs `batch` (`[T,N,...]`) through the network in permissive mode and
/// classifies every conv and dense layer by the binarity of its input.
pub fn audit_spike_drivenness<E: Element>(network: &mut Network<E>, batch: &Tensor<E>, mode: Mode) -> Result<AuditReport> {
    network.reset_states();
    let opts = ForwardOptions { mode, trainable: false, strict: false, update_stats: false, ..Default::default() };
    let mut tape = Tape::new();
    let out = network.forward(&mut tape, batch, &opts)?;
    network.reset_states();
    Ok(AuditReport::from_record(&out.record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::Dimension;

    fn bits(n: usize, code: usize) -> Tensor<f64> {
        Tensor::from_vec(&[n], (0..n).map(|i| ((code >> i) & 1) as f64).collect()).unwrap()
    }

    #[test]
    fn truth_tables() {
        let cases = [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)];
        let x = Tensor::from_vec(&[4], cases.iter().map(|c| c.0).collect()).unwrap();
        let y = Tensor::from_vec(&[4], cases.iter().map(|c| c.1).collect()).unwrap();
        assert_eq!(join(&x, &y, JoinMode::Or).unwrap().data(), &[0.0, 1.0, 1.0, 1.0]);
        assert_eq!(join(&x, &y, JoinMode::Iand).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(join(&x, &y, JoinMode::And).unwrap().data(), &[0.0, 0.0, 0.0, 1.0]);
        assert_eq!(join(&x, &y, JoinMode::Add).unwrap().data(), &[0.0, 1.0, 1.0, 2.0]);
    }

    #[test]
    fn or_absorbs_zero() {
        for code in 0..256 {
            let x = bits(8, code);
            assert_eq!(join(&x, &Tensor::zeros(&[8]), JoinMode::Or).unwrap(), x);
        }
    }

    #[test]
    fn strict_rejects_non_binary() {
        let x = Tensor::from_vec(&[2], vec![0.5, 1.0]).unwrap();
        let err = join_strict(&x, &x, JoinMode::Or, "block0").unwrap_err();
        assert!(matches!(err, Error::NonBinary { ref layer, count: 2 } if layer == "block0"));
        assert!(join_strict(&x, &x, JoinMode::Add, "block0").is_ok());
    }

    #[test]
    fn or_gradient_is_one_minus_other() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[2], vec![0.0, 1.0]).unwrap(), true);
        let y = tape.leaf(Tensor::from_vec(&[2], vec![1.0, 0.0]).unwrap(), true);
        let j = tape.join(x, y, JoinMode::Or, Some("j")).unwrap();
        let s = tape.sum(j);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0]);
        assert_eq!(tape.grad(y).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn layouts() {
        let plan = AttentionPlan::synergistic(Dimension::Temporal, Placement::C);
        let l = build_block(BlockTopology::OrSew, 64, 128, 2, JoinMode::Or, Some(&plan)).unwrap();
        assert_eq!(render(&l.backbone), "c128k3s2p1-BN-MA-LIF-c128k3s1p1-BN-LIF");
        assert_eq!(render(l.shortcut.as_ref().unwrap()), "c128k1s2-BN-IA-LIF");
        assert_eq!(render(&l.post), "c128k3s1p1-BN-LIF-c128k3s1p1-BN-LIF");
        let l = build_block(BlockTopology::Sew, 64, 128, 2, JoinMode::Add, None).unwrap();
        assert_eq!(l.to_string(), "c128k3s2p1-BN-LIF-c128k3s1p1-BN-LIF | c128k1s2-BN-LIF | c128k3s1p1-BN-LIF-c128k3s1p1-BN-LIF");
        let l = build_block(BlockTopology::OrSew, 128, 128, 1, JoinMode::Or, None).unwrap();
        assert!(l.shortcut.is_none());
    }

    #[test]
    fn attention_requires_or_sew() {
        let plan = AttentionPlan::synergistic(Dimension::Channel, Placement::A);
        assert!(matches!(build_block(BlockTopology::Sew, 8, 8, 2, JoinMode::Add, Some(&plan)), Err(Error::Attention(_))));
        assert!(matches!(build_block(BlockTopology::Sew, 8, 8, 2, JoinMode::Or, Some(&plan)), Err(Error::Attention(_))));
        assert!(build_block(BlockTopology::OrSew, 8, 8, 2, JoinMode::Add, None).is_err());
    }
}
