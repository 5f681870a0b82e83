//! Experiment configuration files.
//!
//! Grammar: `#` starts a comment, `[section]` opens a section, every other
//! non-blank line is `key = value`. Keys are unique within a section and
//! unknown keys are rejected. Lists (the augmentation pipeline) are
//! separated by `;`. Floats are written in shortest round-trip form so
//! `parse(render(c)) == c`.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use indexmap::IndexMap;

use crate::arch;
use crate::attention::{AttentionConfig, AttentionPlan};
use crate::data::{load_idx, synth_events, FramedEventSet, LabeledSet, SynthKind, Transform};
use crate::error::{Error, Result};
use crate::network::NetworkSpec;
use crate::neuron::{LifConfig, ResetMode};
use crate::residual::{BlockTopology, JoinMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Optimizer {
    #[default]
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Loss {
    /// Cross-entropy on logits averaged over time.
    #[default]
    CrossEntropy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub timesteps: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: Optimizer,
    pub loss: Loss,
    pub seed: u64,
    pub augment: Vec<Transform>,
}

impl TrainConfig {
    pub fn mnist() -> Self {
        Self::new(1e-2, 16, 128, 100, vec![])
    }

    pub fn fashion_mnist() -> Self {
        Self::new(1e-2, 16, 128, 100, vec![Transform::HorizontalFlip { p: 0.5 }, Transform::Normalize { mean: 0.5, std: 0.5 }])
    }

    pub fn dvs_gesture() -> Self {
        Self::new(1e-4, 32, 32, 1000, vec![])
    }

    /// The horizontal translate bound is a pixel count of 2.5 on 128-wide
    /// frames, expressed here as a fraction.
    pub fn cifar10_dvs() -> Self {
        Self::new(
            1e-3,
            16,
            128,
            500,
            vec![Transform::HorizontalFlip { p: 0.5 }, Transform::Translate { fx: 2.5 / 128.0, fy: 5.0 / 128.0 }],
        )
    }

    pub fn preset(dataset: &str) -> Result<Self> {
        match dataset {
            "mnist" => Ok(Self::mnist()),
            "fashion-mnist" => Ok(Self::fashion_mnist()),
            "dvs-gesture" => Ok(Self::dvs_gesture()),
            "cifar10-dvs" => Ok(Self::cifar10_dvs()),
            _ => Err(Error::Config(format!("no hyper-parameter preset for {dataset:?}"))),
        }
    }

    fn new(lr: f64, timesteps: usize, batch_size: usize, epochs: usize, augment: Vec<Transform>) -> Self {
        Self { lr, timesteps, batch_size, epochs, optimizer: Optimizer::Adam, loss: Loss::CrossEntropy, seed: 0, augment }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and >= 0", self.lr)));
        }
        if self.timesteps == 0 || self.batch_size == 0 {
            return Err(Error::Config("timesteps and batch_size must be positive".into()));
        }
        self.augment.iter().try_for_each(Transform::validate)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Idx { train_images: PathBuf, train_labels: PathBuf, test_images: PathBuf, test_labels: PathBuf },
    /// A framed event container. Without a test file, `split` is the
    /// fraction of samples used for training and must be given.
    Events { train: PathBuf, test: Option<PathBuf>, split: Option<f64> },
    Synth { kind: SynthKind, train: usize, test: usize, height: usize, width: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    /// Hyper-parameter family, e.g. `mnist`; informational.
    pub dataset: String,
    pub data: DataSource,
    pub arch: String,
    pub join: JoinMode,
    pub topology: BlockTopology,
    pub plan: Option<AttentionPlan>,
    pub attention: AttentionConfig,
    pub lif: LifConfig,
    pub train: TrainConfig,
    /// Present every frame as its own sample (single-step baseline).
    pub per_frame: bool,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl ExperimentConfig {
    /// Encoder plus one OR-SEW block at T=4 on the bundled MNIST subset.
    pub fn desk_mnist(data_dir: &Path) -> Self {
        let mut train = TrainConfig::mnist();
        train.timesteps = 4;
        train.epochs = 10;
        train.batch_size = 32;
        train.lr = 1e-2;
        Self {
            name: "desk-mnist".into(),
            dataset: "mnist".into(),
            data: DataSource::Idx {
                train_images: data_dir.join("train-images-idx3-ubyte.gz"),
                train_labels: data_dir.join("train-labels-idx1-ubyte.gz"),
                test_images: data_dir.join("t10k-images-idx3-ubyte.gz"),
                test_labels: data_dir.join("t10k-labels-idx1-ubyte.gz"),
            },
            arch: arch::presets::DESK_MNIST.into(),
            join: JoinMode::Or,
            topology: BlockTopology::OrSew,
            plan: None,
            attention: AttentionConfig::default(),
            lif: LifConfig::default(),
            train,
            per_frame: false,
            output_dir: "runs/desk-mnist".into(),
            seed: 0,
        }
    }

    /// OR net with temporal attention on two-class synthetic motion.
    pub fn desk_motion() -> Self {
        let mut train = TrainConfig::dvs_gesture();
        train.timesteps = 8;
        train.epochs = 10;
        train.batch_size = 16;
        train.lr = 1e-2;
        Self {
            name: "desk-motion".into(),
            dataset: "synthetic".into(),
            data: DataSource::Synth { kind: SynthKind::TwoClassMotion, train: 256, test: 256, height: 8, width: 8 },
            arch: arch::presets::DESK_MOTION.into(),
            join: JoinMode::Or,
            topology: BlockTopology::OrSew,
            plan: Some("T/a".parse().expect("valid plan")),
            attention: AttentionConfig { temporal_reduction: 2, ..AttentionConfig::default() },
            lif: LifConfig::default(),
            train,
            per_frame: false,
            output_dir: "runs/desk-motion".into(),
            seed: 0,
        }
    }

    pub fn network_spec(&self, input: [usize; 3]) -> NetworkSpec {
        NetworkSpec {
            arch: self.arch.clone(),
            input,
            timesteps: if self.per_frame { 1 } else { self.train.timesteps },
            join: self.join,
            topology: self.topology,
            plan: self.plan,
            lif: self.lif.clone(),
            attention: self.attention,
            seed: self.seed,
        }
    }

    /// Training settings as the trainer sees them: a per-frame run is a
    /// single-step run.
    pub fn effective_train(&self) -> TrainConfig {
        let mut t = self.train.clone();
        if self.per_frame {
            t.timesteps = 1;
        }
        t
    }

    /// Train and test sets; per-frame configs see every frame as a sample.
    pub fn datasets(&self) -> Result<(LabeledSet, LabeledSet)> {
        let (train, test): (LabeledSet, LabeledSet) = match &self.data {
            DataSource::Idx { train_images, train_labels, test_images, test_labels } => {
                (load_idx(train_images, train_labels)?.into(), load_idx(test_images, test_labels)?.into())
            }
            DataSource::Events { train, test: Some(test), .. } => {
                (FramedEventSet::load(train)?.into(), FramedEventSet::load(test)?.into())
            }
            DataSource::Events { train, test: None, split } => {
                let all: LabeledSet = FramedEventSet::load(train)?.into();
                let split = split.ok_or_else(|| Error::Config("events without a test file need an explicit split".into()))?;
                let cut = (all.len() as f64 * split).floor() as usize;
                let idx: Vec<usize> = (0..all.len()).collect();
                (all.subset(&idx[..cut])?, all.subset(&idx[cut..])?)
            }
            DataSource::Synth { kind, train, test, height, width } => {
                let t = self.train.timesteps;
                (
                    synth_events(*kind, *train, t, *height, *width, self.seed)?.into(),
                    synth_events(*kind, *test, t, *height, *width, self.seed + 1)?.into(),
                )
            }
        };
        if self.per_frame {
            Ok((train.frames_as_samples()?, test.frames_as_samples()?))
        } else {
            Ok((train, test))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::DatasetNotFound(path.to_path_buf()));
        }
        std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?.parse()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_string()).map_err(|e| Error::io(path, e))
    }
}

fn list(ts: &[Transform]) -> String {
    if ts.is_empty() {
        "none".into()
    } else {
        ts.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
    }
}

impl fmt::Display for ExperimentConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::new();
        let _ = writeln!(s, "[experiment]\nname = {}\ndataset = {}\nseed = {}\noutput_dir = {}", self.name, self.dataset, self.seed, self.output_dir.display());
        s.push_str("\n[data]\n");
        let _ = match &self.data {
            DataSource::Idx { train_images, train_labels, test_images, test_labels } => writeln!(
                s,
                "source = idx\ntrain_images = {}\ntrain_labels = {}\ntest_images = {}\ntest_labels = {}",
                train_images.display(),
                train_labels.display(),
                test_images.display(),
                test_labels.display()
            ),
            DataSource::Events { train, test, split } => {
                let _ = writeln!(s, "source = events\ntrain = {}", train.display());
                if let Some(t) = test {
                    let _ = writeln!(s, "test = {}", t.display());
                }
                match split {
                    Some(v) => writeln!(s, "split = {v:?}"),
                    None => Ok(()),
                }
            }
            DataSource::Synth { kind, train, test, height, width } => {
                writeln!(s, "source = synth\nkind = {kind}\ntrain = {train}\ntest = {test}\nheight = {height}\nwidth = {width}")
            }
        };
        let _ = writeln!(s, "per_frame = {}", self.per_frame);
        let a = &self.attention;
        let _ = writeln!(
            s,
            "\n[network]\narch = {}\njoin = {}\ntopology = {}\nattention = {}\ntemporal_reduction = {}\nchannel_reduction = {}\nspatial_kernel = {}",
            self.arch,
            self.join,
            self.topology,
            self.plan.map(|p| p.to_string()).unwrap_or_else(|| "none".into()),
            a.temporal_reduction,
            a.channel_reduction,
            a.spatial_kernel
        );
        let l = &self.lif;
        let _ = writeln!(
            s,
            "\n[lif]\ntau = {:?}\nthreshold = {:?}\nreset = {:?}\nalpha = {:?}\ndetach_reset = {}",
            l.tau, l.u_threshold, l.u_reset, l.surrogate_alpha, l.detach_reset
        );
        let t = &self.train;
        let _ = writeln!(
            s,
            "\n[train]\nlr = {:?}\ntimesteps = {}\nbatch_size = {}\nepochs = {}\noptimizer = adam\nloss = cross-entropy\nseed = {}\naugment = {}",
            t.lr,
            t.timesteps,
            t.batch_size,
            t.epochs,
            t.seed,
            list(&t.augment)
        );
        f.write_str(&s)
    }
}

type Sections = IndexMap<String, IndexMap<String, (usize, String)>>;

fn parse_sections(text: &str) -> Result<Sections> {
    let mut out: Sections = IndexMap::new();
    let mut current: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let lineno = i + 1;
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            if out.contains_key(name) {
                return Err(Error::Config(format!("line {lineno}: duplicate section [{name}]")));
            }
            out.insert(name.to_string(), IndexMap::new());
            current = Some(name.to_string());
            continue;
        }
        let section = current.as_ref().ok_or_else(|| Error::Config(format!("line {lineno}: key outside a section")))?;
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("line {lineno}: expected key = value")))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if out[section].insert(k.clone(), (lineno, v)).is_some() {
            return Err(Error::Config(format!("line {lineno}: duplicate key {k}")));
        }
    }
    Ok(out)
}

struct Section<'a> {
    name: &'a str,
    entries: IndexMap<String, (usize, String)>,
}

impl Section<'_> {
    fn take(&mut self, key: &str) -> Result<String> {
        self.opt(key)?.ok_or_else(|| Error::Config(format!("[{}] is missing {key}", self.name)))
    }

    fn opt(&mut self, key: &str) -> Result<Option<String>> {
        Ok(self.entries.shift_remove(key).map(|(_, v)| v))
    }

    fn parse<T: FromStr>(&mut self, key: &str) -> Result<T> {
        let v = self.take(key)?;
        v.parse().map_err(|_| Error::Config(format!("[{}] {key}: cannot parse {v:?}", self.name)))
    }

    fn parse_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        if self.entries.contains_key(key) {
            self.parse(key)
        } else {
            Ok(default)
        }
    }

    fn finish(self) -> Result<()> {
        match self.entries.iter().next() {
            Some((k, (line, _))) => Err(Error::Config(format!("line {line}: unknown key {k} in [{}]", self.name))),
            None => Ok(()),
        }
    }
}

impl FromStr for ExperimentConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut sections = parse_sections(text)?;
        let has_lif = sections.contains_key("lif");
        let mut section = |name: &'static str| -> Result<Section<'static>> {
            let entries = sections.shift_remove(name).ok_or_else(|| Error::Config(format!("missing section [{name}]")))?;
            Ok(Section { name, entries })
        };
        let mut e = section("experiment")?;
        let (name, dataset, seed, output_dir) = (e.take("name")?, e.take("dataset")?, e.parse("seed")?, PathBuf::from(e.take("output_dir")?));
        e.finish()?;

        let mut d = section("data")?;
        let data = match d.take("source")?.as_str() {
            "idx" => DataSource::Idx {
                train_images: d.take("train_images")?.into(),
                train_labels: d.take("train_labels")?.into(),
                test_images: d.take("test_images")?.into(),
                test_labels: d.take("test_labels")?.into(),
            },
            "events" => {
                let train = d.take("train")?.into();
                let test = d.opt("test")?.map(PathBuf::from);
                let split = match d.opt("split")? {
                    Some(v) => Some(v.parse::<f64>().map_err(|_| Error::Config(format!("[data] split: cannot parse {v:?}")))?),
                    None => None,
                };
                match (&test, split) {
                    (None, None) => return Err(Error::Config("[data] events without a test file need an explicit split".into())),
                    (_, Some(s)) if !(s > 0.0 && s < 1.0) => return Err(Error::Config(format!("[data] split {s} must lie in (0, 1)"))),
                    _ => {}
                }
                DataSource::Events { train, test, split }
            }
            "synth" => DataSource::Synth {
                kind: d.take("kind")?.parse()?,
                train: d.parse("train")?,
                test: d.parse("test")?,
                height: d.parse("height")?,
                width: d.parse("width")?,
            },
            other => return Err(Error::Config(format!("[data] unknown source {other:?}"))),
        };
        let per_frame = d.parse_or("per_frame", false)?;
        d.finish()?;

        let mut n = section("network")?;
        let arch = n.take("arch")?;
        arch::parse_arch(&arch)?;
        let join: JoinMode = n.take("join")?.parse()?;
        let topology = match n.opt("topology")? {
            Some(t) => t.parse()?,
            None if join == JoinMode::Or => BlockTopology::OrSew,
            None => BlockTopology::Sew,
        };
        let plan = match n.opt("attention")?.as_deref() {
            None | Some("none") => None,
            Some(p) => Some(p.parse()?),
        };
        let base = AttentionConfig::default();
        let attention = AttentionConfig {
            temporal_reduction: n.parse_or("temporal_reduction", base.temporal_reduction)?,
            channel_reduction: n.parse_or("channel_reduction", base.channel_reduction)?,
            spatial_kernel: n.parse_or("spatial_kernel", base.spatial_kernel)?,
        };
        n.finish()?;

        let base = LifConfig::default();
        let lif = match has_lif {
            false => base,
            true => {
                let mut l = section("lif")?;
                let lif = LifConfig {
                    tau: l.parse_or("tau", base.tau)?,
                    u_threshold: l.parse_or("threshold", base.u_threshold)?,
                    u_reset: l.parse_or("reset", base.u_reset)?,
                    surrogate_alpha: l.parse_or("alpha", base.surrogate_alpha)?,
                    reset_mode: ResetMode::Hard,
                    detach_reset: l.parse_or("detach_reset", base.detach_reset)?,
                };
                l.finish()?;
                lif
            }
        };
        lif.validate()?;

        let mut t = section("train")?;
        let preset = TrainConfig::preset(&dataset).ok();
        let mut need = |key: &str, pick: fn(&TrainConfig) -> f64| -> Result<f64> {
            match (t.entries.contains_key(key), &preset) {
                (false, Some(p)) => Ok(pick(p)),
                _ => t.parse(key),
            }
        };
        let lr = need("lr", |p| p.lr)?;
        let timesteps = need("timesteps", |p| p.timesteps as f64)? as usize;
        let batch_size = need("batch_size", |p| p.batch_size as f64)? as usize;
        let epochs = need("epochs", |p| p.epochs as f64)? as usize;
        match t.opt("optimizer")?.as_deref() {
            None | Some("adam") => {}
            Some(o) => return Err(Error::Config(format!("[train] unsupported optimizer {o:?}"))),
        }
        match t.opt("loss")?.as_deref() {
            None | Some("cross-entropy") => {}
            Some(o) => return Err(Error::Config(format!("[train] unsupported loss {o:?}"))),
        }
        let train_seed = t.parse_or("seed", 0u64)?;
        let augment = match t.opt("augment")? {
            None => preset.map(|p| p.augment).unwrap_or_default(),
            Some(v) if v == "none" => vec![],
            Some(v) => v.split(';').map(str::parse).collect::<Result<_>>()?,
        };
        t.finish()?;
        let train = TrainConfig { lr, timesteps, batch_size, epochs, optimizer: Optimizer::Adam, loss: Loss::CrossEntropy, seed: train_seed, augment };
        train.validate()?;

        if let Some(extra) = sections.keys().next() {
            return Err(Error::Config(format!("unknown section [{extra}]")));
        }
        Ok(Self { name, dataset, data, arch, join, topology, plan, attention, lif, train, per_frame, output_dir, seed })
    }
}
