//! Python bindings: networks, joins, the LIF recurrence, event synthesis,
//! audits, energy and pruning. Tensors cross the boundary as flat lists
//! plus an explicit batch size; the layout is time-major `[T, N, C, H, W]`.

use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use synares::attention::AttentionPlan;
use synares::data::{load_checkpoint, save_checkpoint, synth_events as synth, SynthKind};
use synares::metrics::{self, EnergyModel, FiringRateTrace};
use synares::network::{build_network, encode_static, Network as CoreNetwork, NetworkSpec};
use synares::neuron::{lif_step, LifConfig, LifState};
use synares::residual::{self, audit_spike_drivenness, JoinMode};
use synares::{Error, Tensor};

create_exception!(synares, SynaresError, PyException);

fn py_err(e: Error) -> PyErr {
    SynaresError::new_err(format!("{}: {}", e.kind(), e))
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(py_err)
}

/// Elementwise residual join of two equally long spike vectors. Bitwise
/// modes reject non-binary operands unless `strict` is false.
#[pyfunction]
#[pyo3(signature = (x, y, mode = "OR", strict = true))]
fn join(x: Vec<f64>, y: Vec<f64>, mode: &str, strict: bool) -> PyResult<Vec<f64>> {
    let mode: JoinMode = parse(mode)?;
    let a = Tensor::<f64>::from_vec(&[x.len()], x).map_err(py_err)?;
    let b = Tensor::<f64>::from_vec(&[y.len()], y).map_err(py_err)?;
    let out = if strict { residual::join_strict(&a, &b, mode, "join") } else { residual::join(&a, &b, mode) };
    Ok(out.map_err(py_err)?.into_data())
}

/// Runs one LIF neuron over a sequence of input currents.
/// Returns `(spikes, membrane_after_reset)`.
#[pyfunction]
#[pyo3(signature = (inputs, tau = 2.0, threshold = 1.0, reset = 0.0))]
fn lif_trace(inputs: Vec<f64>, tau: f64, threshold: f64, reset: f64) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let cfg = LifConfig { tau, u_threshold: threshold, u_reset: reset, ..LifConfig::default() };
    cfg.validate().map_err(py_err)?;
    let mut state = LifState::<f64>::new(&[1], &cfg);
    let mut spikes = Vec::with_capacity(inputs.len());
    let mut hidden = Vec::with_capacity(inputs.len());
    for i in inputs {
        let s = lif_step(&mut state, &Tensor::scalar(i).reshape(&[1]).map_err(py_err)?, &cfg).map_err(py_err)?;
        spikes.push(s.tensor().data()[0]);
        hidden.push(state.h.data()[0]);
    }
    Ok((spikes, hidden))
}

#[pyfunction]
fn conv_flops(out_h: usize, out_w: usize, kernel: usize, in_channels: usize, out_channels: usize) -> u64 {
    metrics::conv_flops(out_h, out_w, kernel, in_channels, out_channels)
}

#[pyfunction]
fn fc_flops(in_features: usize, out_features: usize) -> u64 {
    metrics::fc_flops(in_features, out_features)
}

/// Exact-zero pruning rule over per-epoch firing rates.
/// Returns `(layer, first_zero_epoch)` for every flagged shortcut.
#[pyfunction]
#[pyo3(signature = (rates, shortcuts, patience = metrics::PRUNING_PATIENCE))]
fn detect_natural_pruning(
    rates: Vec<HashMap<String, f64>>,
    shortcuts: Vec<String>,
    patience: usize,
) -> PyResult<Vec<(String, usize)>> {
    let mut trace = FiringRateTrace::new();
    for (epoch, r) in rates.into_iter().enumerate() {
        let mut sorted: Vec<_> = r.into_iter().collect();
        sorted.sort_by(|a, b| a.0.cmp(&b.0));
        trace.push(epoch, sorted.into_iter().collect()).map_err(py_err)?;
    }
    let report = metrics::detect_natural_pruning(&trace, &shortcuts, patience).map_err(py_err)?;
    Ok(report.flagged.into_iter().map(|s| (s.layer, s.first_zero_epoch)).collect())
}

/// Synthetic event frames. Returns `(frames, shape, labels)` with frames
/// flattened from `[N, T, 2, H, W]`.
#[pyfunction]
#[pyo3(signature = (kind, n, steps, height, width, seed = 0))]
fn synth_events(
    kind: &str,
    n: usize,
    steps: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> PyResult<(Vec<f32>, Vec<usize>, Vec<usize>)> {
    let kind: SynthKind = parse(kind)?;
    let set = synth(kind, n, steps, height, width, seed).map_err(py_err)?;
    let shape = set.frames.shape().to_vec();
    Ok((set.frames.into_data(), shape, set.labels))
}

/// A spiking residual network with `f32` parameters.
#[pyclass(unsendable)]
struct Network {
    inner: CoreNetwork<f32>,
}

impl Network {
    /// Accepts `[T, N, C, H, W]` or a static `[N, C, H, W]` batch that is
    /// repeated over the network's time steps.
    fn input(&self, data: Vec<f32>, n: usize) -> PyResult<Tensor<f32>> {
        let spec = &self.inner.spec;
        let [c, h, w] = spec.input;
        let t = spec.timesteps;
        let sample = c * h * w;
        if data.len() == t * n * sample {
            Tensor::from_vec(&[t, n, c, h, w], data).map_err(py_err)
        } else if data.len() == n * sample {
            let x = Tensor::from_vec(&[n, c, h, w], data).map_err(py_err)?;
            encode_static(&x, t).map_err(py_err)
        } else {
            Err(py_err(Error::ShapeMismatch {
                op: "network input",
                left: vec![t, n, c, h, w],
                right: vec![data.len()],
            }))
        }
    }
}

#[pymethods]
impl Network {
    #[new]
    #[pyo3(signature = (arch, input, timesteps, join = "OR", plan = None, seed = 0))]
    fn new(arch: &str, input: (usize, usize, usize), timesteps: usize, join: &str, plan: Option<&str>, seed: u64) -> PyResult<Self> {
        let join: JoinMode = parse(join)?;
        let plan: Option<AttentionPlan> = plan.map(parse).transpose()?;
        let spec = NetworkSpec::new(arch, [input.0, input.1, input.2], timesteps, join).with_plan(plan).with_seed(seed);
        Ok(Self { inner: build_network(&spec).map_err(py_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: load_checkpoint(&path).map_err(py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner, &path).map_err(py_err)
    }

    #[getter]
    fn timesteps(&self) -> usize {
        self.inner.spec.timesteps
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.classes
    }

    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    fn synapse_names(&self) -> Vec<String> {
        self.inner.synapse_names()
    }

    /// `(block, shortcut neuron)` pairs of blocks that still have a shortcut.
    fn shortcut_neurons(&self) -> Vec<(String, String)> {
        self.inner.shortcut_neurons()
    }

    fn pruned_blocks(&self) -> Vec<String> {
        self.inner.pruned_blocks()
    }

    fn remove_shortcut(&mut self, block: &str) -> PyResult<()> {
        self.inner.remove_shortcut(block).map_err(py_err)
    }

    /// Returns `(logits, spike_count, firing_rates)`; logits are flattened
    /// `[N, classes]` averaged over time.
    fn infer(&mut self, data: Vec<f32>, n: usize) -> PyResult<(Vec<f32>, u64, HashMap<String, f64>)> {
        let x = self.input(data, n)?;
        let (logits, record) = self.inner.infer(&x).map_err(py_err)?;
        let rates = metrics::firing_rates(&record).into_iter().collect();
        Ok((logits.into_data(), metrics::spike_count(&record), rates))
    }

    /// Per synaptic layer `(name, class, non_binary_inputs)` in eval mode.
    fn audit(&mut self, data: Vec<f32>, n: usize) -> PyResult<Vec<(String, String, u64)>> {
        let x = self.input(data, n)?;
        let report = audit_spike_drivenness(&mut self.inner, &x, synares::network::Mode::Eval).map_err(py_err)?;
        Ok(report.lines.into_iter().map(|l| (l.name, l.class.to_string(), l.non_binary)).collect())
    }

    /// Per-sample inference energy: `(total_pj, mac_flops, ac_ops)`.
    fn energy(&mut self, data: Vec<f32>, n: usize) -> PyResult<(f64, u64, f64)> {
        let x = self.input(data, n)?;
        let (_, record) = self.inner.infer(&x).map_err(py_err)?;
        let report = metrics::estimate_energy(&self.inner, &record, &EnergyModel::default()).map_err(py_err)?;
        Ok((report.total_pj, report.mac_flops(), report.ac_ops()))
    }

    fn __repr__(&self) -> String {
        self.inner.to_string()
    }
}

#[pymodule]
#[pyo3(name = "synares")]
fn synares_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SynaresError", m.py().get_type::<SynaresError>())?;
    m.add_class::<Network>()?;
    m.add_function(wrap_pyfunction!(join, m)?)?;
    m.add_function(wrap_pyfunction!(lif_trace, m)?)?;
    m.add_function(wrap_pyfunction!(conv_flops, m)?)?;
    m.add_function(wrap_pyfunction!(fc_flops, m)?)?;
    m.add_function(wrap_pyfunction!(detect_natural_pruning, m)?)?;
    m.add_function(wrap_pyfunction!(synth_events, m)?)?;
    Ok(())
}
