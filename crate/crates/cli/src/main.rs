//! `synares`: train, evaluate, audit and prune spiking OR-residual networks.
//!
//! Exit codes: 0 success, 1 audit or pruning verification failure, 2 usage
//! or environment error. Errors end with one machine-readable line on
//! stderr: `error kind=<Kind> message=<text>`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use synares::config::ExperimentConfig;
use synares::data::{self, load_checkpoint, save_checkpoint, FramedEventSet, LabeledSet, SynthKind};
use synares::metrics::{self, apply_pruning, detect_natural_pruning, estimate_energy, EnergyModel, EnergyReport, FiringRateTrace, PRUNING_PATIENCE};
use synares::network::{build_network, Mode, Network};
use synares::residual::audit_spike_drivenness;
use synares::train::{evaluate, Trainer, TrainingLog};
use synares::Error;

/// File names inside a run directory.
const CONFIG_FILE: &str = "config.txt";
const CHECKPOINT_FILE: &str = "checkpoint.bin";
const LOG_FILE: &str = "log.csv";
const TRACE_FILE: &str = "trace.csv";
const ENERGY_FILE: &str = "energy.csv";
const REPORT_FILE: &str = "report.csv";

#[derive(Parser)]
#[command(name = "synares", version, about = "Spiking OR-residual networks with synergistic attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from an experiment config; writes checkpoint, logs and trace to its output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint; epoch numbering follows the existing log.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Accuracy, loss and spike counts of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 64)]
        batch: usize,
    },
    /// MAC/AC classification of every conv and dense layer; exit 1 unless fully spike-driven.
    Audit {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 64)]
        batch: usize,
    },
    /// Energy estimate per inference sample.
    Energy {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// CSV destination; defaults to energy.csv next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        batch: usize,
    },
    /// Detect silent shortcuts in a trace, verify and remove them.
    Prune {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Verification data; defaults to the test set of the config next to the trace.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = PRUNING_PATIENCE)]
        patience: usize,
        #[arg(long, default_value_t = 64)]
        batch: usize,
    },
    /// Summary table (accuracy, spikes, MAC/AC, energy) of one or more run directories.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Write a synthetic event dataset.
    Synth {
        #[arg(long, default_value = "two-class-motion")]
        kind: String,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 8)]
        t: usize,
        #[arg(long, default_value_t = 8)]
        h: usize,
        #[arg(long, default_value_t = 8)]
        w: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    kind: String,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::PruneRefused { .. } => 1,
            _ => 2,
        };
        Failure { code, kind: e.kind().to_string(), message: e.to_string() }
    }
}

fn fail(code: u8, kind: &str, message: impl Into<String>) -> Failure {
    Failure { code, kind: kind.into(), message: message.into() }
}

type Outcome = Result<u8, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error kind={} message={}", f.kind, f.message.replace('\n', " "));
            ExitCode::from(f.code)
        }
    }
}

fn run(cmd: Command) -> Outcome {
    match cmd {
        Command::Train { config, resume } => train(&config, resume.as_deref()),
        Command::Eval { ckpt, data, batch } => eval(&ckpt, &data, batch),
        Command::Audit { ckpt, data, batch } => audit(&ckpt, &data, batch),
        Command::Energy { ckpt, data, out, batch } => {
            let out = out.unwrap_or_else(|| ckpt.with_file_name(ENERGY_FILE));
            energy(&ckpt, &data, &out, batch)
        }
        Command::Prune { ckpt, trace, out, data, patience, batch } => prune(&ckpt, &trace, &out, data.as_deref(), patience, batch),
        Command::Report { run_dir } => report(&run_dir),
        Command::Synth { kind, n, t, h, w, seed, out } => {
            let kind: SynthKind = kind.parse()?;
            let set = data::synth_events(kind, n, t, h, w, seed)?;
            set.save(&out)?;
            println!("wrote {n} {kind} sequences ({t}x2x{h}x{w}) to {}", out.display());
            Ok(0)
        }
    }
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| fail(2, "IoError", format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| fail(2, "IoError", format!("{}: {e}", path.display())))
}

/// Evaluation data: an experiment config (its test split), a framed event
/// container, or a directory holding `t10k-*` IDX files.
fn load_data(path: &Path) -> Result<LabeledSet, Failure> {
    if !path.exists() {
        return Err(Error::DatasetNotFound(path.to_path_buf()).into());
    }
    if path.is_dir() {
        for suffix in ["", ".gz"] {
            let images = path.join(format!("t10k-images-idx3-ubyte{suffix}"));
            let labels = path.join(format!("t10k-labels-idx1-ubyte{suffix}"));
            if images.exists() && labels.exists() {
                return Ok(data::load_idx(&images, &labels)?.into());
            }
        }
        return Err(Error::DatasetNotFound(path.join("t10k-images-idx3-ubyte")).into());
    }
    let head = fs::read(path).map_err(|e| fail(2, "IoError", format!("{}: {e}", path.display())))?;
    if head.starts_with(b"synares-events") {
        return Ok(FramedEventSet::load(path)?.into());
    }
    let cfg = ExperimentConfig::load(path)?;
    Ok(cfg.datasets()?.1)
}

/// Fits the data to the network: sequences become frames for single-step
/// networks.
fn adapt(net: &Network<f32>, set: LabeledSet) -> Result<LabeledSet, Failure> {
    let framed = matches!(set.samples, data::Samples::Framed(_));
    let set = if framed && net.spec.timesteps == 1 { set.frames_as_samples()? } else { set };
    if set.is_empty() {
        return Err(fail(2, "EmptyDataset", "the dataset holds no samples"));
    }
    if set.input_shape() != net.spec.input {
        return Err(fail(
            2,
            "ShapeError",
            format!("data frames {:?} do not match the network input {:?}", set.input_shape(), net.spec.input),
        ));
    }
    Ok(set)
}

fn train(config: &Path, resume: Option<&Path>) -> Outcome {
    let cfg = ExperimentConfig::load(config)?;
    let (train_set, test_set) = cfg.datasets()?;
    let out = cfg.output_dir.clone();
    let mut net: Network<f32> = match resume {
        Some(ckpt) => load_checkpoint(ckpt)?,
        None => build_network(&cfg.network_spec(train_set.input_shape()))?,
    };
    let mut trainer = Trainer::new(&mut net, cfg.effective_train())?;
    if resume.is_some() {
        let log = out.join(LOG_FILE);
        if log.exists() {
            let epochs = TrainingLog::read_csv(&log)?;
            let trace = FiringRateTrace::read_csv(&out.join(TRACE_FILE))?;
            trainer = trainer.resume(TrainingLog { epochs, trace });
        }
    }
    write(&out.join(CONFIG_FILE), &cfg.to_string())?;
    println!("{:>5} {:>10} {:>9} {:>9} {:>12}  flagged", "epoch", "loss", "train", "test", "spikes");
    trainer.fit(&train_set, &test_set, |r| {
        println!(
            "{:>5} {:>10.5} {:>9.4} {:>9.4} {:>12}  {}",
            r.epoch,
            r.train_loss,
            r.train_accuracy,
            r.test_accuracy,
            r.spikes,
            if r.flagged.is_empty() { "-".to_string() } else { r.flagged.join(",") }
        )
    })?;
    let log = trainer.log.clone();
    drop(trainer);
    log.write_csv(&out.join(LOG_FILE))?;
    log.trace.write_csv(&out.join(TRACE_FILE))?;
    save_checkpoint(&net, &out.join(CHECKPOINT_FILE))?;
    let eval = evaluate(&mut net, &test_set, cfg.train.batch_size)?;
    let report = estimate_energy(&net, &eval.record, &EnergyModel::default())?;
    report.write_csv(&out.join(ENERGY_FILE))?;
    println!("wrote {} ({} parameters)", out.join(CHECKPOINT_FILE).display(), net.param_count());
    Ok(0)
}

fn eval(ckpt: &Path, data: &Path, batch: usize) -> Outcome {
    let mut net: Network<f32> = load_checkpoint(ckpt)?;
    let set = adapt(&net, load_data(data)?)?;
    let ev = evaluate(&mut net, &set, batch)?;
    let s = metrics::spike_summary(&ev.record);
    println!("samples {}\naccuracy {:.4}\nloss {:.5}", set.len(), ev.accuracy, ev.loss);
    println!(
        "spikes {} ({:.2} per sample, {:.4} per neuron per sample, {:.4} per neuron per step)",
        s.total, s.per_sample, s.per_neuron_per_sample, s.per_neuron_per_step
    );
    Ok(0)
}

fn batches(set: &LabeledSet, steps: usize, batch: usize) -> Result<Vec<synares::Tensor<f32>>, Failure> {
    Ok(set.ordered_batches::<f32>(steps, batch)?.into_iter().map(|(x, _)| x).collect())
}

fn audit(ckpt: &Path, data: &Path, batch: usize) -> Outcome {
    let mut net: Network<f32> = load_checkpoint(ckpt)?;
    let set = adapt(&net, load_data(data)?)?;
    let mut violations: Vec<(usize, String)> = Vec::new();
    let mut first = None;
    for (i, x) in batches(&set, net.spec.timesteps, batch)?.iter().enumerate() {
        let report = audit_spike_drivenness(&mut net, x, Mode::Eval)?;
        violations.extend(report.violations().iter().map(|l| (i, l.name.clone())));
        first.get_or_insert(report);
    }
    if let Some(r) = first {
        println!("{r}");
    }
    if violations.is_empty() {
        println!("all batches spike-driven outside the encoder");
        Ok(0)
    } else {
        let mut layers: Vec<&str> = violations.iter().map(|(_, n)| n.as_str()).collect();
        layers.sort_unstable();
        layers.dedup();
        println!("NOT spike-driven: {}", layers.join(", "));
        Ok(1)
    }
}

fn energy_report(net: &mut Network<f32>, set: &LabeledSet, batch: usize) -> Result<EnergyReport, Failure> {
    let ev = evaluate(net, set, batch)?;
    Ok(estimate_energy(net, &ev.record, &EnergyModel::default())?)
}

fn energy(ckpt: &Path, data: &Path, out: &Path, batch: usize) -> Outcome {
    let mut net: Network<f32> = load_checkpoint(ckpt)?;
    let set = adapt(&net, load_data(data)?)?;
    let report = energy_report(&mut net, &set, batch)?;
    print!("{report}");
    report.write_csv(out)?;
    println!("wrote {}", out.display());
    Ok(0)
}

fn prune(ckpt: &Path, trace_path: &Path, out: &Path, data: Option<&Path>, patience: usize, batch: usize) -> Outcome {
    let net: Network<f32> = load_checkpoint(ckpt)?;
    let trace = FiringRateTrace::read_csv(trace_path).map_err(|e| match e {
        Error::Io { .. } => Error::DatasetNotFound(trace_path.to_path_buf()),
        other => other,
    })?;
    let shortcuts: Vec<String> = net.shortcut_neurons().into_iter().map(|(_, n)| n).collect();
    let report = detect_natural_pruning(&trace, &shortcuts, patience)?;
    println!("{report}");
    if report.flagged.is_empty() {
        save_checkpoint(&net, out)?;
        return Ok(0);
    }
    let data = match data {
        Some(d) => d.to_path_buf(),
        None => trace_path.with_file_name(CONFIG_FILE),
    };
    let set = adapt(&net, load_data(&data)?)?;
    let flagged: Vec<String> = report.flagged.iter().map(|f| f.layer.clone()).collect();
    let pruned = apply_pruning(&net, &flagged, &batches(&set, net.spec.timesteps, batch)?)?;
    save_checkpoint(&pruned, out)?;
    println!(
        "removed {} shortcut(s); parameters {} -> {}; wrote {}",
        flagged.len(),
        net.param_count(),
        pruned.param_count(),
        out.display()
    );
    Ok(0)
}

/// One row per run directory: final epoch of `log.csv` and totals of
/// `energy.csv`.
fn report(run_dir: &Path) -> Outcome {
    if !run_dir.is_dir() {
        return Err(Error::DatasetNotFound(run_dir.to_path_buf()).into());
    }
    let mut runs: Vec<PathBuf> = Vec::new();
    if run_dir.join(LOG_FILE).exists() {
        runs.push(run_dir.to_path_buf());
    } else {
        let entries = fs::read_dir(run_dir).map_err(|e| fail(2, "IoError", format!("{}: {e}", run_dir.display())))?;
        runs.extend(entries.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| p.join(LOG_FILE).exists()));
        runs.sort();
    }
    if runs.is_empty() {
        return Err(Error::DatasetNotFound(run_dir.join(LOG_FILE)).into());
    }
    let header = "run,epochs,test_accuracy,spikes,mac_flops,ac_ops,energy_uj";
    let mut csv = format!("{header}\n");
    let mut table = format!("{:<24} {:>6} {:>9} {:>12} {:>14} {:>14} {:>12}\n", "run", "epochs", "accuracy", "spikes", "MAC", "AC", "energy (µJ)");
    for run in &runs {
        let log = TrainingLog::read_csv(&run.join(LOG_FILE))?;
        let last = log.last().ok_or_else(|| fail(2, "CorruptPayload", format!("{}: empty log", run.display())))?;
        let energy = metrics::read_energy_csv(&run.join(ENERGY_FILE))?;
        let name = run.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let _ = writeln!(
            csv,
            "{name},{},{:?},{},{},{:?},{:?}",
            log.len(),
            last.test_accuracy,
            last.spikes,
            energy.mac_flops,
            energy.ac_ops,
            energy.total_uj
        );
        let _ = writeln!(
            table,
            "{name:<24} {:>6} {:>9.4} {:>12} {:>14} {:>14.1} {:>12.4}",
            log.len(),
            last.test_accuracy,
            last.spikes,
            energy.mac_flops,
            energy.ac_ops,
            energy.total_uj
        );
    }
    print!("{table}");
    write(&run_dir.join(REPORT_FILE), &csv)?;
    Ok(0)
}
