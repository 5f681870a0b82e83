//! Spike counts, firing rates, operation counts and energy estimates.
//!
//! Energy per sample:
//!
//! ```text
//! E = e_mac · FL_encoder + Σ_layers e_class · FL_l · fr_l
//! ```
//!
//! where `FL` counts multiply-accumulate positions over all time steps,
//! `fr` is the fraction of nonzero elements in the layer's input and
//! `e_class` is `e_ac` for layers whose input was strictly binary and `e_mac`
//! otherwise. Attention dense layers and the spatial attention conv operate
//! on real descriptors and are charged `e_mac` at full FLOPs; their pooling
//! reductions are charged `e_ac`. Bias additions and batch-norm arithmetic
//! are not counted.

use std::fmt;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};

/// MAC positions of a conv layer per sample and time step.
pub fn conv_flops(out_h: usize, out_w: usize, kernel: usize, in_channels: usize, out_channels: usize) -> u64 {
    (out_h * out_w * kernel * kernel * in_channels * out_channels) as u64
}

/// MAC positions of a dense layer per sample and time step.
pub fn fc_flops(in_features: usize, out_features: usize) -> u64 {
    (in_features * out_features) as u64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynapseKind {
    Conv,
    Dense,
    Pool,
}

impl fmt::Display for SynapseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SynapseKind::Conv => "conv",
            SynapseKind::Dense => "fc",
            SynapseKind::Pool => "pool",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpClass {
    Mac,
    Ac,
}

impl fmt::Display for OpClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OpClass::Mac => "MAC",
            OpClass::Ac => "AC",
        })
    }
}

/// Input statistics of one conv, dense or pooling layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SynapseCounters {
    pub kind: SynapseKind,
    pub encoder: bool,
    pub attention: bool,
    /// Charged at full FLOPs regardless of input sparsity.
    pub full: bool,
    /// MAC positions per sample over all time steps.
    pub flops_per_sample: u64,
    pub inputs: u64,
    pub nonzero: u64,
    pub non_binary: u64,
    pub max_non_binary: f64,
}

impl SynapseCounters {
    pub fn new(kind: SynapseKind, flops_per_sample: u64) -> Self {
        Self {
            kind,
            encoder: false,
            attention: false,
            full: false,
            flops_per_sample,
            inputs: 0,
            nonzero: 0,
            non_binary: 0,
            max_non_binary: 0.0,
        }
    }

    /// Fraction of nonzero input elements; 1 for full-charge layers.
    pub fn fr(&self) -> f64 {
        if self.full {
            1.0
        } else if self.inputs == 0 {
            0.0
        } else {
            self.nonzero as f64 / self.inputs as f64
        }
    }

    pub fn class(&self) -> OpClass {
        if self.kind == SynapseKind::Pool {
            OpClass::Ac
        } else if self.encoder || self.full || self.non_binary > 0 {
            OpClass::Mac
        } else {
            OpClass::Ac
        }
    }

    pub fn observe(&mut self, values: impl Iterator<Item = f64>) {
        for v in values {
            self.inputs += 1;
            if v != 0.0 {
                self.nonzero += 1;
                if v != 1.0 {
                    self.non_binary += 1;
                    self.max_non_binary = self.max_non_binary.max(v.abs());
                }
            }
        }
    }

    fn merge(&mut self, other: &Self) {
        self.inputs += other.inputs;
        self.nonzero += other.nonzero;
        self.non_binary += other.non_binary;
        self.max_non_binary = self.max_non_binary.max(other.max_non_binary);
    }
}

/// Output statistics of one spiking layer.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuronCounters {
    pub attention: bool,
    pub neurons: u64,
    pub spikes: u64,
    /// Samples times time steps observed.
    pub sample_steps: u64,
}

impl NeuronCounters {
    /// Spikes per neuron per time step.
    pub fn rate(&self) -> f64 {
        let denom = self.neurons * self.sample_steps;
        if denom == 0 {
            0.0
        } else {
            self.spikes as f64 / denom as f64
        }
    }
}

/// Counters accumulated over one or more forward passes.
#[derive(Clone, Debug, PartialEq)]
pub struct SpikeRecord {
    pub timesteps: usize,
    pub samples: u64,
    pub synapses: IndexMap<String, SynapseCounters>,
    pub neurons: IndexMap<String, NeuronCounters>,
}

impl SpikeRecord {
    pub fn new(timesteps: usize) -> Self {
        Self { timesteps, samples: 0, synapses: IndexMap::new(), neurons: IndexMap::new() }
    }

    pub fn synapse(&self, name: &str) -> Result<&SynapseCounters> {
        self.synapses.get(name).ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    pub fn neuron(&self, name: &str) -> Result<&NeuronCounters> {
        self.neurons.get(name).ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    pub fn merge(&mut self, other: &SpikeRecord) {
        self.samples += other.samples;
        for (k, v) in &other.synapses {
            match self.synapses.get_mut(k) {
                Some(s) => s.merge(v),
                None => {
                    self.synapses.insert(k.clone(), v.clone());
                }
            }
        }
        for (k, v) in &other.neurons {
            match self.neurons.get_mut(k) {
                Some(s) => {
                    s.spikes += v.spikes;
                    s.sample_steps += v.sample_steps;
                }
                None => {
                    self.neurons.insert(k.clone(), v.clone());
                }
            }
        }
    }
}

/// Total output spikes of all spiking layers.
pub fn spike_count(record: &SpikeRecord) -> u64 {
    record.neurons.values().map(|n| n.spikes).sum()
}

/// Output firing rate (spikes per neuron per step) of every spiking layer.
pub fn firing_rates(record: &SpikeRecord) -> IndexMap<String, f64> {
    record.neurons.iter().map(|(k, v)| (k.clone(), v.rate())).collect()
}

/// Input nonzero fraction of every conv, dense and pooling layer.
pub fn input_rates(record: &SpikeRecord) -> IndexMap<String, f64> {
    record.synapses.iter().map(|(k, v)| (k.clone(), v.fr())).collect()
}

/// Spike totals under the two customary normalisations.
#[derive(Clone, Debug, PartialEq)]
pub struct SpikeSummary {
    pub total: u64,
    pub per_sample: f64,
    /// Spikes per neuron per sample, summed over time steps.
    pub per_neuron_per_sample: f64,
    /// Spikes per neuron per time step.
    pub per_neuron_per_step: f64,
}

pub fn spike_summary(record: &SpikeRecord) -> SpikeSummary {
    let total = spike_count(record);
    let neurons: u64 = record.neurons.values().map(|n| n.neurons).sum();
    let samples = record.samples.max(1) as f64;
    let per_sample = total as f64 / samples;
    let per_neuron_per_sample = if neurons == 0 { 0.0 } else { per_sample / neurons as f64 };
    SpikeSummary {
        total,
        per_sample,
        per_neuron_per_sample,
        per_neuron_per_step: per_neuron_per_sample / record.timesteps.max(1) as f64,
    }
}

/// Per-layer counters that enter the energy estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCounters {
    pub name: String,
    pub kind: SynapseKind,
    pub flops: u64,
    pub fr: f64,
    pub klass: OpClass,
    pub spikes_out: Option<u64>,
}

/// Energy per operation in picojoules.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyModel {
    pub e_mac: f64,
    pub e_ac: f64,
}

impl Default for EnergyModel {
    /// 45 nm figures: 4.6 pJ per MAC, 0.9 pJ per AC.
    fn default() -> Self {
        Self { e_mac: 4.6, e_ac: 0.9 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnergyLine {
    pub layer: LayerCounters,
    pub energy_pj: f64,
}

/// Energy per inference sample.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyReport {
    pub model: EnergyModel,
    pub lines: Vec<EnergyLine>,
    pub total_pj: f64,
}

impl EnergyReport {
    pub fn total_uj(&self) -> f64 {
        self.total_pj * 1e-6
    }

    pub fn total_mj(&self) -> f64 {
        self.total_pj * 1e-9
    }

    pub fn mac_flops(&self) -> u64 {
        self.lines.iter().filter(|l| l.layer.klass == OpClass::Mac).map(|l| l.layer.flops).sum()
    }

    pub fn ac_ops(&self) -> f64 {
        self.lines
            .iter()
            .filter(|l| l.layer.klass == OpClass::Ac)
            .map(|l| l.layer.flops as f64 * l.layer.fr)
            .sum()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        w.write_record(["layer", "kind", "class", "flops", "fr", "energy_pj"]).map_err(|e| csv_err(path, e))?;
        for l in &self.lines {
            w.write_record([
                l.layer.name.clone(),
                l.layer.kind.to_string(),
                l.layer.klass.to_string(),
                l.layer.flops.to_string(),
                format!("{:.9}", l.layer.fr),
                format!("{:.6}", l.energy_pj),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
        w.write_record(["total", "", "", "", "", &format!("{:.6}", self.total_pj)]).map_err(|e| csv_err(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

impl fmt::Display for EnergyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "# energy per sample; e_mac={} pJ e_ac={} pJ; attention dense/conv charged MAC at full FLOPs, pooling AC; bias and BN excluded",
            self.model.e_mac, self.model.e_ac
        )?;
        writeln!(f, "{:<32} {:>5} {:>5} {:>14} {:>9} {:>14}", "layer", "kind", "class", "flops", "fr", "energy_pj")?;
        for l in &self.lines {
            writeln!(
                f,
                "{:<32} {:>5} {:>5} {:>14} {:>9.5} {:>14.3}",
                l.layer.name, l.layer.kind, l.layer.klass, l.layer.flops, l.layer.fr, l.energy_pj
            )?;
        }
        write!(f, "total: {:.3} pJ = {:.6} uJ = {:.9} mJ", self.total_pj, self.total_uj(), self.total_mj())
    }
}

/// Energy from recorded counters, restricted to `layers` (all synapse
/// records when `None`). A listed layer missing from the record is an error.
pub fn estimate_energy_from(record: &SpikeRecord, layers: Option<&[String]>, model: &EnergyModel) -> Result<EnergyReport> {
    let names: Vec<String> = match layers {
        Some(l) => l.to_vec(),
        None => record.synapses.keys().cloned().collect(),
    };
    let mut lines = Vec::with_capacity(names.len());
    for name in names {
        let c = record.synapse(&name)?;
        let klass = c.class();
        let fr = if c.encoder { 1.0 } else { c.fr() };
        let e = match klass {
            OpClass::Mac => model.e_mac,
            OpClass::Ac => model.e_ac,
        };
        let energy_pj = e * c.flops_per_sample as f64 * fr;
        lines.push(EnergyLine {
            layer: LayerCounters { name, kind: c.kind, flops: c.flops_per_sample, fr, klass, spikes_out: None },
            energy_pj,
        });
    }
    let total_pj = lines.iter().map(|l| l.energy_pj).sum();
    Ok(EnergyReport { model: model.clone(), lines, total_pj })
}

/// Mean firing rate per layer and epoch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FiringRateTrace {
    epochs: Vec<usize>,
    rates: Vec<IndexMap<String, f64>>,
}

impl FiringRateTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn epochs(&self) -> &[usize] {
        &self.epochs
    }

    pub fn rates(&self) -> &[IndexMap<String, f64>] {
        &self.rates
    }

    pub fn push(&mut self, epoch: usize, rates: IndexMap<String, f64>) -> Result<()> {
        if let Some(&last) = self.epochs.last() {
            if epoch <= last {
                return Err(Error::Config(format!("trace epochs must increase: {epoch} after {last}")));
            }
        }
        self.epochs.push(epoch);
        self.rates.push(rates);
        Ok(())
    }

    pub fn layers(&self) -> Vec<String> {
        let mut names: IndexMap<String, ()> = IndexMap::new();
        for r in &self.rates {
            for k in r.keys() {
                names.entry(k.clone()).or_default();
            }
        }
        names.into_keys().collect()
    }

    pub fn series(&self, layer: &str) -> Option<Vec<Option<f64>>> {
        if !self.rates.iter().any(|r| r.contains_key(layer)) {
            return None;
        }
        Some(self.rates.iter().map(|r| r.get(layer).copied()).collect())
    }

    /// `epoch,<layer>...` with one row per epoch; absent values are empty.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let layers = self.layers();
        let mut w = csv_writer(path)?;
        let mut header = vec!["epoch".to_string()];
        header.extend(layers.iter().cloned());
        w.write_record(&header).map_err(|e| csv_err(path, e))?;
        for (e, r) in self.epochs.iter().zip(&self.rates) {
            let mut row = vec![e.to_string()];
            row.extend(layers.iter().map(|l| r.get(l).map(|v| format!("{v:e}")).unwrap_or_default()));
            w.write_record(&row).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::DatasetNotFound(path.to_path_buf()));
        }
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let header: Vec<String> = r.headers().map_err(|e| csv_err(path, e))?.iter().map(String::from).collect();
        if header.first().map(String::as_str) != Some("epoch") {
            return Err(Error::Corrupt(format!("{}: first column must be epoch", path.display())));
        }
        let mut trace = Self::new();
        for row in r.records() {
            let row = row.map_err(|e| csv_err(path, e))?;
            let parse = |s: &str| s.parse::<f64>().map_err(|_| Error::Corrupt(format!("bad number {s:?} in {}", path.display())));
            let epoch = row[0].parse::<usize>().map_err(|_| Error::Corrupt(format!("bad epoch {:?}", &row[0])))?;
            let mut rates = IndexMap::new();
            for (name, v) in header.iter().zip(row.iter()).skip(1) {
                if !v.is_empty() {
                    rates.insert(name.clone(), parse(v)?);
                }
            }
            trace.push(epoch, rates)?;
        }
        Ok(trace)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrunableShortcut {
    pub layer: String,
    /// First epoch of the final run of exact zeros.
    pub first_zero_epoch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruningReport {
    pub patience: usize,
    pub flagged: Vec<PrunableShortcut>,
}

impl fmt::Display for PruningReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.flagged.is_empty() {
            return write!(f, "nothing to prune (patience {})", self.patience);
        }
        writeln!(f, "prunable shortcuts (patience {}):", self.patience)?;
        for s in &self.flagged {
            writeln!(f, "  {} silent since epoch {}", s.layer, s.first_zero_epoch)?;
        }
        Ok(())
    }
}

/// Default patience for the exact-zero rule.
pub const PRUNING_PATIENCE: usize = 5;

/// Flags shortcut neurons whose firing rate was exactly zero in each of the
/// last `patience` epochs of the trace.
pub fn detect_natural_pruning(trace: &FiringRateTrace, shortcuts: &[String], patience: usize) -> Result<PruningReport> {
    let mut report = PruningReport { patience, flagged: Vec::new() };
    if shortcuts.is_empty() {
        return Ok(report);
    }
    if patience == 0 || trace.len() < patience {
        return Err(Error::InsufficientEpochs { have: trace.len(), need: patience.max(1) });
    }
    for name in shortcuts {
        let series = trace.series(name).ok_or_else(|| Error::UnknownLayer(name.clone()))?;
        let zero_run = series.iter().rev().take_while(|v| **v == Some(0.0)).count();
        if zero_run >= patience {
            let first = series.len() - zero_run;
            report.flagged.push(PrunableShortcut { layer: name.clone(), first_zero_epoch: trace.epochs()[first] });
        }
    }
    Ok(report)
}

pub(crate) fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    csv::Writer::from_path(path).map_err(|e| csv_err(path, e))
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Corrupt(format!("{}: {other:?}", path.display())),
    }
}


/// Energy of every conv, dense and attention layer of `network`, failing
/// when `record` lacks one of them.
pub fn estimate_energy<E: crate::Element>(
    network: &crate::network::Network<E>,
    record: &SpikeRecord,
    model: &EnergyModel,
) -> Result<EnergyReport> {
    estimate_energy_from(record, Some(&network.synapse_names()), model)
}

/// Removes the shortcuts named in `flagged` (block names or shortcut neuron
/// names) after checking that each stays silent on every verification batch
/// (`[T, N, C, H, W]`).
pub fn apply_pruning<E: crate::Element>(
    network: &crate::network::Network<E>,
    flagged: &[String],
    verification: &[crate::Tensor<E>],
) -> Result<crate::network::Network<E>> {
    let shortcuts = network.shortcut_neurons();
    let mut targets = Vec::new();
    for f in flagged {
        let hit = shortcuts.iter().find(|(block, neuron)| block == f || neuron == f);
        targets.push(hit.cloned().ok_or_else(|| Error::UnknownLayer(f.clone()))?);
    }
    if targets.is_empty() {
        return Ok(network.clone());
    }
    if verification.is_empty() {
        return Err(Error::Config("pruning needs at least one verification batch".into()));
    }
    let mut probe = network.clone();
    for (i, batch) in verification.iter().enumerate() {
        let (_, record) = probe.infer(batch)?;
        for (_, neuron) in &targets {
            let spikes = record.neuron(neuron)?.spikes;
            if spikes > 0 {
                return Err(Error::PruneRefused { shortcut: neuron.clone(), batch: i, spikes: spikes as usize });
            }
        }
    }
    let mut pruned = network.clone();
    for (block, _) in &targets {
        pruned.remove_shortcut(block)?;
    }
    Ok(pruned)
}

/// Totals recovered from an energy CSV written by [`EnergyReport::write_csv`].
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyTotals {
    pub mac_flops: u64,
    pub ac_ops: f64,
    pub total_pj: f64,
    pub total_uj: f64,
}

pub fn read_energy_csv(path: &Path) -> Result<EnergyTotals> {
    if !path.exists() {
        return Err(Error::DatasetNotFound(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let bad = |what: &str| Error::Corrupt(format!("{}: bad {what}", path.display()));
    let (mut mac_flops, mut ac_ops, mut total) = (0u64, 0.0, None);
    for row in r.records() {
        let row = row.map_err(|e| csv_err(path, e))?;
        if row.len() != 6 {
            return Err(bad("row width"));
        }
        if &row[0] == "total" {
            total = Some(row[5].parse::<f64>().map_err(|_| bad("total"))?);
            continue;
        }
        let flops: u64 = row[3].parse().map_err(|_| bad("flops"))?;
        let fr: f64 = row[4].parse().map_err(|_| bad("fr"))?;
        match &row[2] {
            "MAC" => mac_flops += flops,
            "AC" => ac_ops += flops as f64 * fr,
            _ => return Err(bad("class")),
        }
    }
    let total_pj = total.ok_or_else(|| bad("missing total row"))?;
    Ok(EnergyTotals { mac_flops, ac_ops, total_pj, total_uj: total_pj * 1e-6 })
}
