//! Datasets, augmentation and checkpoints.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use flate2::read::GzDecoder;
use rand::Rng;

use crate::attention::{AttentionConfig, AttentionPlan};
use crate::error::{Error, Result};
use crate::network::{build_network, encode_static, Network, NetworkSpec};
use crate::neuron::{LifConfig, ResetMode};
use crate::tensor::{Element, Tensor};

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

/// Reads a file, transparently inflating gzip content.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::DatasetNotFound(path.to_path_buf()));
    }
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out).map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &'static str) -> Result<u32> {
    let b = bytes.get(at..at + 4).ok_or(Error::Truncated { what, expected: at + 4, found: bytes.len() })?;
    Ok(u32::from_be_bytes(b.try_into().unwrap()))
}

/// Images scaled to `[0, 1]` and their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxDataset {
    /// `[N, 1, H, W]`
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl IdxDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Loads an IDX image/label pair (optionally gzip-compressed).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<IdxDataset> {
    let img = read_maybe_gz(images_path)?;
    let lab = read_maybe_gz(labels_path)?;
    let magic = be_u32(&img, 0, "image header")?;
    if magic != IDX_IMAGES {
        return Err(Error::BadMagic { what: "images", expected: IDX_IMAGES, found: magic });
    }
    let magic = be_u32(&lab, 0, "label header")?;
    if magic != IDX_LABELS {
        return Err(Error::BadMagic { what: "labels", expected: IDX_LABELS, found: magic });
    }
    let n = be_u32(&img, 4, "image header")? as usize;
    let h = be_u32(&img, 8, "image header")? as usize;
    let w = be_u32(&img, 12, "image header")? as usize;
    let nl = be_u32(&lab, 4, "label header")? as usize;
    let need = 16 + n * h * w;
    if img.len() != need {
        return Err(Error::Truncated { what: "image payload", expected: need, found: img.len() });
    }
    if lab.len() != 8 + nl {
        return Err(Error::Truncated { what: "label payload", expected: 8 + nl, found: lab.len() });
    }
    if n != nl {
        return Err(Error::CountMismatch { images: n, labels: nl });
    }
    let data = img[16..].iter().map(|&b| b as f32 / 255.0).collect();
    Ok(IdxDataset { images: Tensor::from_vec(&[n, 1, h, w], data)?, labels: lab[8..].iter().map(|&b| b as usize).collect() })
}

/// Writes an uncompressed IDX pair; `pixels` holds `n·h·w` bytes.
pub fn write_idx(images_path: &Path, labels_path: &Path, pixels: &[u8], n: usize, h: usize, w: usize, labels: &[u8]) -> Result<()> {
    if pixels.len() != n * h * w || labels.len() != n {
        return Err(Error::CountMismatch { images: pixels.len() / (h * w).max(1), labels: labels.len() });
    }
    let mut img = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES, n as u32, h as u32, w as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend_from_slice(pixels);
    let mut lab = Vec::with_capacity(8 + n);
    lab.extend_from_slice(&IDX_LABELS.to_be_bytes());
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    fs::write(images_path, img).map_err(|e| Error::io(images_path, e))?;
    fs::write(labels_path, lab).map_err(|e| Error::io(labels_path, e))
}

/// Pre-framed event tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct FramedEventSet {
    /// `[N, T, 2, H, W]`, binary or event counts.
    pub frames: Tensor<f32>,
    pub labels: Vec<usize>,
}

const EVENTS_HEADER: &str = "synares-events 1";

impl FramedEventSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn steps(&self) -> usize {
        self.frames.shape()[1]
    }

    /// Text header, one byte per element (counts saturate at 255), then
    /// one little-endian `u32` label per sample.
    pub fn save(&self, path: &Path) -> Result<()> {
        let s = self.frames.shape();
        let mut out = format!("{EVENTS_HEADER}\nshape {} {} {} {} {}\nend\n", s[0], s[1], s[2], s[3], s[4]).into_bytes();
        out.extend(self.frames.data().iter().map(|&v| v.clamp(0.0, 255.0) as u8));
        for &l in &self.labels {
            out.extend_from_slice(&(l as u32).to_le_bytes());
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::DatasetNotFound(path.to_path_buf()));
        }
        let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (header, payload) = split_header(&raw)?;
        let mut lines = header.lines();
        let version = lines.next().unwrap_or_default();
        if version != EVENTS_HEADER {
            return Err(Error::VersionMismatch { found: version.to_string(), expected: EVENTS_HEADER.to_string() });
        }
        let shape: Vec<usize> = lines
            .next()
            .and_then(|l| l.strip_prefix("shape "))
            .ok_or_else(|| Error::Corrupt("missing shape line".into()))?
            .split_whitespace()
            .map(|v| v.parse().map_err(|_| Error::Corrupt(format!("bad extent {v:?}"))))
            .collect::<Result<_>>()?;
        if shape.len() != 5 || shape[2] != 2 {
            return Err(Error::Corrupt(format!("expected [N,T,2,H,W], got {shape:?}")));
        }
        let count: usize = shape.iter().product();
        let need = count + 4 * shape[0];
        if payload.len() != need {
            return Err(Error::Truncated { what: "event payload", expected: need, found: payload.len() });
        }
        let frames = Tensor::from_vec(&shape, payload[..count].iter().map(|&b| b as f32).collect())?;
        let labels = payload[count..].chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize).collect();
        Ok(Self { frames, labels })
    }
}

fn split_header(raw: &[u8]) -> Result<(&str, &[u8])> {
    const END: &[u8] = b"\nend\n";
    let pos = raw.windows(END.len()).position(|w| w == END).ok_or_else(|| Error::Corrupt("missing header terminator".into()))?;
    let header = std::str::from_utf8(&raw[..pos]).map_err(|_| Error::Corrupt("header is not UTF-8".into()))?;
    Ok((header, &raw[pos + END.len()..]))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    /// Four classes: bar moving right, left, down, up.
    MovingBar,
    /// Two classes: vertical bar moving right or left.
    TwoClassMotion,
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "moving-bar" => Ok(SynthKind::MovingBar),
            "two-class-motion" => Ok(SynthKind::TwoClassMotion),
            _ => Err(Error::Config(format!("unknown synthetic dataset {s:?}"))),
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SynthKind::MovingBar => "moving-bar",
            SynthKind::TwoClassMotion => "two-class-motion",
        })
    }
}

/// Bar width in pixels.
const BAR: usize = 2;

/// Moving-bar event frames whose class is carried only by the direction of
/// motion. The bar moves one pixel per step and wraps around; start
/// positions are stratified per class, so every single frame has the same
/// class-conditional pixel distribution. Both polarity channels carry the
/// bar.
pub fn synth_events(kind: SynthKind, n: usize, steps: usize, h: usize, w: usize, seed: u64) -> Result<FramedEventSet> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    if steps < 2 {
        return Err(Error::Config("synthetic motion needs at least 2 time steps".into()));
    }
    if h < BAR || w < BAR {
        return Err(Error::Config(format!("frame {h}x{w} is smaller than the bar")));
    }
    let classes = match kind {
        SynthKind::MovingBar => 4,
        SynthKind::TwoClassMotion => 2,
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let mut seen = vec![0usize; classes];
    let plane = h * w;
    let mut data = vec![0f32; n * steps * 2 * plane];
    for (i, &label) in labels.iter().enumerate() {
        // stratified start within the class, random offset shared by the class
        let k = seen[label];
        seen[label] += 1;
        let horizontal = label < 2;
        let extent = if horizontal { w } else { h };
        let start = k % extent;
        let sign: isize = if label % 2 == 0 { 1 } else { -1 };
        for t in 0..steps {
            let pos = (start as isize + sign * t as isize).rem_euclid(extent as isize) as usize;
            for p in 0..2 {
                let base = ((i * steps + t) * 2 + p) * plane;
                for d in 0..BAR {
                    let line = (pos + d) % extent;
                    if horizontal {
                        for y in 0..h {
                            data[base + y * w + line] = 1.0;
                        }
                    } else {
                        for x in 0..w {
                            data[base + line * w + x] = 1.0;
                        }
                    }
                }
            }
        }
    }
    let set = FramedEventSet { frames: Tensor::from_vec(&[n, steps, 2, h, w], data)?, labels };
    check_frame_histograms(&set, classes, if kind == SynthKind::MovingBar { 2 } else { 1 })?;
    Ok(set)
}

/// Per-frame pixel occupancy counts per class, at every time step. Classes
/// within one `group` (consecutive labels) must have identical histograms
/// when the class counts are multiples of the motion extent.
pub fn frame_histograms(set: &FramedEventSet, classes: usize) -> Vec<Vec<Vec<u32>>> {
    let s = set.frames.shape();
    let (steps, per) = (s[1], s[2] * s[3] * s[4]);
    let mut hist = vec![vec![vec![0u32; per]; steps]; classes];
    for (i, &l) in set.labels.iter().enumerate() {
        for t in 0..steps {
            let base = (i * steps + t) * per;
            for (acc, &v) in hist[l][t].iter_mut().zip(&set.frames.data()[base..base + per]) {
                *acc += (v != 0.0) as u32;
            }
        }
    }
    hist
}

fn check_frame_histograms(set: &FramedEventSet, classes: usize, groups: usize) -> Result<()> {
    let s = set.frames.shape();
    let extent_ok = |label: usize| {
        let extent = if label < 2 { s[4] } else { s[3] };
        set.labels.iter().filter(|&&l| l == label).count() % extent == 0
    };
    let hist = frame_histograms(set, classes);
    for g in 0..groups {
        let (a, b) = (2 * g, 2 * g + 1);
        if extent_ok(a) && extent_ok(b) && set.labels.iter().filter(|&&l| l == a).count() == set.labels.iter().filter(|&&l| l == b).count() && hist[a] != hist[b] {
            return Err(Error::Corrupt(format!("frame histograms of classes {a} and {b} differ")));
        }
    }
    Ok(())
}

/// A labelled set ready for batching.
#[derive(Clone, Debug, PartialEq)]
pub enum Samples {
    /// `[N, C, H, W]`, replicated over time.
    Static(Tensor<f32>),
    /// `[N, T, C, H, W]`
    Framed(Tensor<f32>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub samples: Samples,
    pub labels: Vec<usize>,
}

impl From<IdxDataset> for LabeledSet {
    fn from(d: IdxDataset) -> Self {
        Self { samples: Samples::Static(d.images), labels: d.labels }
    }
}

impl From<FramedEventSet> for LabeledSet {
    fn from(d: FramedEventSet) -> Self {
        Self { samples: Samples::Framed(d.frames), labels: d.labels }
    }
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of one time step.
    pub fn input_shape(&self) -> [usize; 3] {
        let s = match &self.samples {
            Samples::Static(t) => &t.shape()[1..],
            Samples::Framed(t) => &t.shape()[2..],
        };
        [s[0], s[1], s[2]]
    }

    pub fn classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Every frame as its own sample with the sequence label.
    pub fn frames_as_samples(&self) -> Result<LabeledSet> {
        match &self.samples {
            Samples::Static(_) => Ok(self.clone()),
            Samples::Framed(t) => {
                let s = t.shape();
                let data = t.clone().reshape(&[s[0] * s[1], s[2], s[3], s[4]])?;
                let labels = self.labels.iter().flat_map(|&l| std::iter::repeat(l).take(s[1])).collect();
                Ok(LabeledSet { samples: Samples::Static(data), labels })
            }
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Result<LabeledSet> {
        let pick = |t: &Tensor<f32>| -> Result<Tensor<f32>> {
            let rows: Vec<Tensor<f32>> = indices.iter().map(|&i| t.slice_rows(i, i + 1)).collect::<Result<_>>()?;
            Tensor::stack_rows(&rows)
        };
        let samples = match &self.samples {
            Samples::Static(t) => Samples::Static(pick(t)?),
            Samples::Framed(t) => Samples::Framed(pick(t)?),
        };
        Ok(LabeledSet { samples, labels: indices.iter().map(|&i| self.labels[i]).collect() })
    }

    /// Consecutive un-augmented batches covering the whole set in order.
    pub fn ordered_batches<E: Element>(&self, steps: usize, batch_size: usize) -> Result<Vec<(Tensor<E>, Vec<usize>)>> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let order: Vec<usize> = (0..self.len()).collect();
        order.chunks(batch_size.max(1)).map(|c| self.batch(c, steps, &[], &mut rng)).collect()
    }

    /// Time-major batch `[T, n, C, H, W]` for the given sample indices.
    pub fn batch<E: Element>(
        &self,
        indices: &[usize],
        steps: usize,
        transforms: &[Transform],
        rng: &mut impl Rng,
    ) -> Result<(Tensor<E>, Vec<usize>)> {
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let [c, h, w] = self.input_shape();
        let per = c * h * w;
        let batch = match &self.samples {
            Samples::Static(t) => {
                let mut data = Vec::with_capacity(indices.len() * per);
                for &i in indices {
                    data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
                }
                let mut b = Tensor::from_vec(&[indices.len(), c, h, w], data)?;
                augment(&mut b, transforms, rng)?;
                encode_static(&b.cast::<E>(), steps)?
            }
            Samples::Framed(t) => {
                let ts = t.shape()[1];
                if ts != steps {
                    return Err(Error::ShapeMismatch { op: "framed batch steps", left: vec![ts], right: vec![steps] });
                }
                let n = indices.len();
                let mut data = vec![0f32; steps * n * per];
                for (j, &i) in indices.iter().enumerate() {
                    let mut sample = Tensor::from_vec(&[steps, c, h, w], t.data()[i * steps * per..(i + 1) * steps * per].to_vec())?;
                    // one random draw per sequence so every frame moves alike
                    augment_sequence(&mut sample, transforms, rng)?;
                    for s in 0..steps {
                        data[(s * n + j) * per..(s * n + j + 1) * per].copy_from_slice(&sample.data()[s * per..(s + 1) * per]);
                    }
                }
                Tensor::from_vec(&[steps, n, c, h, w], data)?.cast::<E>()
            }
        };
        Ok((batch, labels))
    }
}

/// Per-sample data augmentation.
#[derive(Clone, Debug, PartialEq)]
pub enum Transform {
    /// Mirror left-right with probability `p`.
    HorizontalFlip { p: f64 },
    /// Integer shift up to `round(fx·W)` / `round(fy·H)` pixels, zero fill.
    Translate { fx: f64, fy: f64 },
    /// `(x − mean) / std`
    Normalize { mean: f64, std: f64 },
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Transform::HorizontalFlip { p } => write!(f, "flip({p})"),
            Transform::Translate { fx, fy } => write!(f, "translate({fx},{fy})"),
            Transform::Normalize { mean, std } => write!(f, "normalize({mean},{std})"),
        }
    }
}

impl FromStr for Transform {
    type Err = Error;

    /// `flip(0.5)`, `translate(0.02,0.04)`, `normalize(0.5,0.5)`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let unknown = || Error::UnknownTransform(s.to_string());
        let (name, rest) = s.split_once('(').ok_or_else(unknown)?;
        let args: Vec<f64> = rest
            .strip_suffix(')')
            .ok_or_else(unknown)?
            .split(',')
            .map(|a| a.trim().parse::<f64>().map_err(|_| unknown()))
            .collect::<Result<_>>()?;
        let t = match (name.trim(), args.as_slice()) {
            ("flip", &[p]) => Transform::HorizontalFlip { p },
            ("translate", &[fx, fy]) => Transform::Translate { fx, fy },
            ("normalize", &[mean, std]) => Transform::Normalize { mean, std },
            _ => return Err(unknown()),
        };
        t.validate()?;
        Ok(t)
    }
}

impl Transform {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Transform::HorizontalFlip { p } => (0.0..=1.0).contains(&p),
            Transform::Translate { fx, fy } => (0.0..=1.0).contains(&fx) && (0.0..=1.0).contains(&fy),
            Transform::Normalize { std, .. } => std > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("transform {self} has out-of-range arguments")))
        }
    }
}

fn flip_plane(x: &mut [f32], h: usize, w: usize) {
    for row in x.chunks_exact_mut(w).take(h) {
        row.reverse();
    }
}

fn shift_plane(x: &mut [f32], h: usize, w: usize, dx: isize, dy: isize) {
    let src = x.to_vec();
    for y in 0..h {
        for xx in 0..w {
            let (sy, sx) = (y as isize - dy, xx as isize - dx);
            x[y * w + xx] = if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                src[sy as usize * w + sx as usize]
            } else {
                0.0
            };
        }
    }
}

/// Applies `transforms` in order to every image of `[N, C, H, W]`, drawing
/// independent decisions per image.
pub fn augment(batch: &mut Tensor<f32>, transforms: &[Transform], rng: &mut impl Rng) -> Result<()> {
    let s = batch.shape().to_vec();
    if s.len() != 4 {
        return Err(Error::Shape(format!("augment expects [N,C,H,W], got {s:?}")));
    }
    let per = s[1] * s[2] * s[3];
    for img in batch.data_mut().chunks_exact_mut(per) {
        let mut one = Tensor::from_vec(&[1, s[1], s[2], s[3]], img.to_vec())?;
        augment_sequence(&mut one, transforms, rng)?;
        img.copy_from_slice(one.data());
    }
    Ok(())
}

/// One random decision per transform, applied to every `[C,H,W]` slice of
/// `x` (`[S, C, H, W]`).
fn augment_sequence(x: &mut Tensor<f32>, transforms: &[Transform], rng: &mut impl Rng) -> Result<()> {
    let s = x.shape().to_vec();
    let (h, w) = (s[2], s[3]);
    for t in transforms {
        match *t {
            Transform::HorizontalFlip { p } => {
                if rng.gen_bool(p) {
                    for plane in x.data_mut().chunks_exact_mut(h * w) {
                        flip_plane(plane, h, w);
                    }
                }
            }
            Transform::Translate { fx, fy } => {
                let mx = (fx * w as f64).round() as isize;
                let my = (fy * h as f64).round() as isize;
                let dx = rng.gen_range(-mx..=mx);
                let dy = rng.gen_range(-my..=my);
                if dx != 0 || dy != 0 {
                    for plane in x.data_mut().chunks_exact_mut(h * w) {
                        shift_plane(plane, h, w, dx, dy);
                    }
                }
            }
            Transform::Normalize { mean, std } => {
                let (m, sd) = (mean as f32, std as f32);
                x.data_mut().iter_mut().for_each(|v| *v = (*v - m) / sd);
            }
        }
    }
    Ok(())
}

const CHECKPOINT_HEADER: &str = "synares-checkpoint 1";

fn spec_header(spec: &NetworkSpec, pruned: &[String]) -> String {
    let l = &spec.lif;
    let a = &spec.attention;
    let [c, h, w] = spec.input;
    format!(
        "{CHECKPOINT_HEADER}\narch {}\ninput {c} {h} {w}\ntimesteps {}\njoin {}\ntopology {}\nattention {}\nattention_config {} {} {}\nlif {:?} {:?} {:?} {:?} {}\nseed {}\npruned {}\n",
        spec.arch,
        spec.timesteps,
        spec.join,
        spec.topology,
        spec.plan.map(|p| p.to_string()).unwrap_or_else(|| "none".into()),
        a.temporal_reduction,
        a.channel_reduction,
        a.spatial_kernel,
        l.tau,
        l.u_threshold,
        l.u_reset,
        l.surrogate_alpha,
        l.detach_reset,
        spec.seed,
        if pruned.is_empty() { "-".to_string() } else { pruned.join(",") },
    )
}

/// Text header (format version, network spec, pruned blocks), then for each
/// parameter and BN statistic in graph order: name length (`u32`), name,
/// element count (`u64`) and little-endian `f32` values.
pub fn save_checkpoint<E: Element>(network: &Network<E>, path: &Path) -> Result<()> {
    let mut out = spec_header(&network.spec, &network.pruned_blocks()).into_bytes();
    out.extend_from_slice(b"end\n");
    let mut net = network.clone();
    let mut blocks: Vec<(String, Vec<E>)> = net.params_mut().into_iter().map(|(n, p)| (n, p.value.data().to_vec())).collect();
    blocks.extend(net.buffers_mut().into_iter().map(|(n, b)| (n, b.clone())));
    for (name, values) in blocks {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(values.len() as u64).to_le_bytes());
        for v in values {
            out.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

fn field<'a>(lines: &mut std::str::Lines<'a>, key: &str) -> Result<&'a str> {
    let line = lines.next().ok_or_else(|| Error::Corrupt(format!("missing {key} line")))?;
    line.strip_prefix(key)
        .and_then(|r| r.strip_prefix(' '))
        .ok_or_else(|| Error::Corrupt(format!("expected {key}, got {line:?}")))
}

fn num<T: FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Corrupt(format!("bad {what} {s:?}")))
}

fn parse_spec(header: &str) -> Result<(NetworkSpec, Vec<String>)> {
    let mut lines = header.lines();
    let version = lines.next().unwrap_or_default();
    if version != CHECKPOINT_HEADER {
        return Err(Error::VersionMismatch { found: version.to_string(), expected: CHECKPOINT_HEADER.to_string() });
    }
    let arch = field(&mut lines, "arch")?.to_string();
    let input: Vec<usize> = field(&mut lines, "input")?.split_whitespace().map(|v| num(v, "input extent")).collect::<Result<_>>()?;
    if input.len() != 3 {
        return Err(Error::Corrupt("input needs three extents".into()));
    }
    let timesteps = num(field(&mut lines, "timesteps")?, "timesteps")?;
    let join = field(&mut lines, "join")?.parse()?;
    let topology = field(&mut lines, "topology")?.parse()?;
    let plan = match field(&mut lines, "attention")? {
        "none" => None,
        p => Some(p.parse::<AttentionPlan>()?),
    };
    let ac: Vec<usize> = field(&mut lines, "attention_config")?.split_whitespace().map(|v| num(v, "attention config")).collect::<Result<_>>()?;
    if ac.len() != 3 {
        return Err(Error::Corrupt("attention_config needs three values".into()));
    }
    let lif: Vec<&str> = field(&mut lines, "lif")?.split_whitespace().collect();
    if lif.len() != 5 {
        return Err(Error::Corrupt("lif needs five values".into()));
    }
    let lif = LifConfig {
        tau: num(lif[0], "tau")?,
        u_threshold: num(lif[1], "threshold")?,
        u_reset: num(lif[2], "reset")?,
        surrogate_alpha: num(lif[3], "alpha")?,
        reset_mode: ResetMode::Hard,
        detach_reset: num(lif[4], "detach_reset")?,
    };
    let seed = num(field(&mut lines, "seed")?, "seed")?;
    let pruned = match field(&mut lines, "pruned")? {
        "-" => vec![],
        p => p.split(',').map(String::from).collect(),
    };
    let spec = NetworkSpec {
        arch,
        input: [input[0], input[1], input[2]],
        timesteps,
        join,
        topology,
        plan,
        lif,
        attention: AttentionConfig { temporal_reduction: ac[0], channel_reduction: ac[1], spatial_kernel: ac[2] },
        seed,
    };
    Ok((spec, pruned))
}

/// Rebuilds the network recorded in a checkpoint and restores its values.
pub fn load_checkpoint<E: Element>(path: &Path) -> Result<Network<E>> {
    if !path.exists() {
        return Err(Error::DatasetNotFound(path.to_path_buf()));
    }
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, mut payload) = split_header(&raw).map_err(|_| Error::Corrupt(format!("{}: not a checkpoint", path.display())))?;
    let (spec, pruned) = parse_spec(header)?;
    let mut net: Network<E> = build_network(&spec).map_err(|e| Error::ArchMismatch(format!("cannot rebuild recorded network: {e}")))?;
    for b in &pruned {
        net.remove_shortcut(b)?;
    }
    let mut take = |n: usize| -> Result<&[u8]> {
        if payload.len() < n {
            return Err(Error::Truncated { what: "checkpoint payload", expected: n, found: payload.len() });
        }
        let (head, tail) = payload.split_at(n);
        payload = tail;
        Ok(head)
    };
    let mut read_block = |expected: &str, len: usize| -> Result<Vec<E>> {
        let nlen = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(nlen)?).map_err(|_| Error::Corrupt("parameter name is not UTF-8".into()))?.to_string();
        let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        if name != expected || count != len {
            return Err(Error::ArchMismatch(format!("stored {name} ({count} values) where the architecture has {expected} ({len} values)")));
        }
        let bytes = take(count.checked_mul(4).ok_or_else(|| Error::Corrupt("block length overflow".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| E::from_f32(f32::from_le_bytes(c.try_into().unwrap())).unwrap()).collect())
    };
    for (name, p) in net.params_mut() {
        let values = read_block(&name, p.len())?;
        p.value = Tensor::from_vec(p.value.shape(), values)?;
    }
    for (name, b) in net.buffers_mut() {
        *b = read_block(&name, b.len())?;
    }
    if !payload.is_empty() {
        return Err(Error::ArchMismatch(format!("{} trailing bytes after the last parameter", payload.len())));
    }
    Ok(net)
}

/// Replaces the stored architecture string; used to exercise mismatch
/// detection.
pub fn rewrite_checkpoint_arch(path: &Path, arch: &str) -> Result<()> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, payload) = split_header(&raw)?;
    let header: Vec<String> =
        header.lines().map(|l| if l.starts_with("arch ") { format!("arch {arch}") } else { l.to_string() }).collect();
    let mut out = header.join("\n").into_bytes();
    out.extend_from_slice(b"\nend\n");
    out.extend_from_slice(payload);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
