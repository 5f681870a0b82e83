use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use synares::data::save_checkpoint;
use synares::metrics::FiringRateTrace;
use synares::network::{build_network, Network, NetworkSpec};
use synares::residual::JoinMode;

fn synares(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_synares")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn config(out_dir: &Path, epochs: usize) -> String {
    format!(
        "[experiment]
name = tiny
dataset = synthetic
seed = 0
output_dir = {}

[data]
source = synth
kind = two-class-motion
train = 32
test = 16
height = 8
width = 8

[network]
arch = c4k3s1p1-BN-LIF-(OR-SEW Block(c8))-AP-FC2
join = OR
attention = none

[train]
lr = 0.01
timesteps = 4
batch_size = 16
epochs = {epochs}
seed = 0
",
        out_dir.display()
    )
}

#[test]
fn missing_dataset_exits_2_with_kind() {
    let dir = tempfile::tempdir().unwrap();
    let net: Network<f32> = build_network(&NetworkSpec::new("c4k3s1p1-BN-LIF-AP-FC2", [1, 4, 4], 2, JoinMode::Or)).unwrap();
    let ckpt = dir.path().join("net.bin");
    save_checkpoint(&net, &ckpt).unwrap();
    let missing = dir.path().join("nowhere");
    let o = synares(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--data", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("kind=DatasetNotFound"), "{}", stderr(&o));
}

#[test]
fn unreadable_checkpoint_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("junk.bin");
    fs::write(&ckpt, b"not a checkpoint").unwrap();
    let o = synares(&["audit", "--ckpt", ckpt.to_str().unwrap(), "--data", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error kind="), "{}", stderr(&o));
}

#[test]
fn train_eval_audit_energy_report_prune() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("runs").join("tiny");
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, config(&run, 2)).unwrap();

    let o = synares(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["config.txt", "checkpoint.bin", "log.csv", "trace.csv", "energy.csv"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let ckpt = run.join("checkpoint.bin");
    let ckpt_s = ckpt.to_str().unwrap();
    let cfg_s = cfg.to_str().unwrap();

    let o = synares(&["eval", "--ckpt", ckpt_s, "--data", cfg_s]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("samples 16"), "{}", stdout(&o));

    let o = synares(&["audit", "--ckpt", ckpt_s, "--data", cfg_s]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("spike-driven outside the encoder"));

    let energy = dir.path().join("e.csv");
    let o = synares(&["energy", "--ckpt", ckpt_s, "--data", cfg_s, "--out", energy.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(fs::read_to_string(&energy).unwrap().starts_with("layer,kind,class,flops,fr,energy_pj"));

    // Resuming continues the epoch numbering.
    fs::write(&cfg, config(&run, 1)).unwrap();
    let o = synares(&["train", "--config", cfg_s, "--resume", ckpt_s]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let log = fs::read_to_string(run.join("log.csv")).unwrap();
    let epochs: Vec<&str> = log.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(epochs, ["0", "1", "2"]);

    let o = synares(&["report", "--run-dir", dir.path().join("runs").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report = fs::read_to_string(dir.path().join("runs").join("report.csv")).unwrap();
    assert!(report.starts_with("run,epochs,test_accuracy,spikes,mac_flops,ac_ops,energy_uj\ntiny,3,"), "{report}");

    // The shortcut of a freshly trained net fires, so nothing is flagged.
    let out = dir.path().join("pruned.bin");
    let o = synares(&[
        "prune",
        "--ckpt",
        ckpt_s,
        "--trace",
        run.join("trace.csv").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--patience",
        "2",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("nothing to prune"), "{}", stdout(&o));
    assert!(out.exists());
}

fn silent_trace(path: &Path, layer: &str, epochs: usize) {
    let mut trace = FiringRateTrace::new();
    for e in 0..epochs {
        trace.push(e, [(layer.to_string(), 0.0)].into_iter().collect()).unwrap();
    }
    trace.write_csv(path).unwrap();
}

/// `silence` drives the shortcut BN to a constant -1 (never fires) instead
/// of a constant +2 (fires every step).
fn prune_setup(silence: bool) -> (tempfile::TempDir, Output) {
    let dir = tempfile::tempdir().unwrap();
    let spec = NetworkSpec::new("c4k3s1p1-BN-LIF-(OR-SEW Block(c8))-AP-FC2", [2, 8, 8], 4, JoinMode::Or).with_seed(5);
    let mut net: Network<f32> = build_network(&spec).unwrap();
    for (name, p) in net.params_mut() {
        if name.starts_with("block0.short.bn") {
            let v = if name.ends_with(".gamma") { 0.0 } else if silence { -1.0 } else { 2.0 };
            p.value.data_mut().iter_mut().for_each(|x| *x = v);
        }
    }
    let ckpt = dir.path().join("net.bin");
    save_checkpoint(&net, &ckpt).unwrap();
    let (_, neuron) = net.shortcut_neurons()[0].clone();
    silent_trace(&dir.path().join("trace.csv"), &neuron, 5);
    let data = dir.path().join("events.bin");
    let o = synares(&["synth", "--kind", "moving-bar", "--n", "8", "--t", "4", "--out", data.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = synares(&[
        "prune",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--trace",
        dir.path().join("trace.csv").to_str().unwrap(),
        "--out",
        dir.path().join("pruned.bin").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
    ]);
    (dir, o)
}

#[test]
fn prune_removes_a_verified_silent_shortcut() {
    let (dir, o) = prune_setup(true);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("removed 1 shortcut"), "{}", stdout(&o));
    let pruned: Network<f32> = synares::data::load_checkpoint(&dir.path().join("pruned.bin")).unwrap();
    assert_eq!(pruned.pruned_blocks(), ["block0"]);
}

#[test]
fn prune_refuses_a_shortcut_that_fires() {
    let (dir, o) = prune_setup(false);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("kind=PruneRefused"), "{}", stderr(&o));
    assert!(!dir.path().join("pruned.bin").exists());
}
