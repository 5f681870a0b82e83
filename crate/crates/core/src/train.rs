//! Surrogate-gradient training through time.

use std::path::Path;
use std::time::Instant;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use crate::config::{Loss, Optimizer, TrainConfig};
use crate::autograd::{Param, Tape};
use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::metrics::{self, detect_natural_pruning, FiringRateTrace, SpikeRecord, PRUNING_PATIENCE};
use crate::network::{ForwardOptions, Network};
use crate::tensor::{Element, Tensor};

/// Adam without weight decay.
#[derive(Clone, Debug)]
pub struct Adam<E> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<E>>,
    v: Vec<Vec<E>>,
}

impl<E: Element> Adam<E> {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> usize {
        self.step as usize
    }

    /// Updates every parameter that has a gradient; the moments are indexed
    /// by position, so the parameter list must keep its order.
    pub fn update(&mut self, params: &mut [(String, &mut Param<E>)], grads: &[Option<Tensor<E>>]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, p)| vec![E::zero(); p.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c = |x: f64| E::from_f64(x).unwrap();
        let (b1, b2) = (c(self.beta1), c(self.beta2));
        let (one, eps, lr) = (E::one(), c(self.eps), c(self.lr));
        let bc1 = c(1.0 - self.beta1.powi(self.step));
        let bc2 = c(1.0 - self.beta2.powi(self.step));
        for (i, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Loss, accuracy and spike counters of one pass over a set.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub record: SpikeRecord,
}

fn argmax<E: Element>(row: &[E]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

fn correct<E: Element>(logits: &Tensor<E>, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    labels.iter().enumerate().filter(|(i, &l)| argmax(&logits.data()[i * k..(i + 1) * k]) == l).count()
}

/// Eval-mode pass over `set` in fixed order.
pub fn evaluate<E: Element>(network: &mut Network<E>, set: &LabeledSet, batch_size: usize) -> Result<Evaluation> {
    let steps = network.spec.timesteps;
    let mut record = SpikeRecord::new(steps);
    let (mut loss, mut hits) = (0.0, 0);
    for (x, labels) in set.ordered_batches::<E>(steps, batch_size)? {
        network.reset_states();
        let mut tape = Tape::new();
        let out = network.forward(&mut tape, &x, &ForwardOptions::default())?;
        let ce = tape.cross_entropy(out.logits, &labels)?;
        loss += tape.value(ce).data()[0].to_f64().unwrap() * labels.len() as f64;
        hits += correct(tape.value(out.logits), &labels);
        record.merge(&out.record);
    }
    network.reset_states();
    let n = set.len().max(1) as f64;
    Ok(Evaluation { loss: loss / n, accuracy: hits as f64 / n, record })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
    /// Output spikes over the whole test set.
    pub spikes: u64,
    pub flagged: Vec<String>,
    pub seconds: f64,
}

/// Per-epoch results and the firing-rate trace of the evaluation set.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    pub trace: FiringRateTrace,
}

const LOG_COLUMNS: [&str; 8] = ["epoch", "train_loss", "train_accuracy", "test_loss", "test_accuracy", "spikes", "flagged", "seconds"];

impl TrainingLog {
    pub fn last_epoch(&self) -> Option<usize> {
        self.epochs.last().map(|e| e.epoch)
    }

    /// `log.csv` columns as in [`LOG_COLUMNS`]; flagged shortcuts are
    /// joined with `;`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = metrics::csv_writer(path)?;
        w.write_record(LOG_COLUMNS).map_err(|e| metrics::csv_err(path, e))?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                format!("{:?}", e.train_loss),
                format!("{:?}", e.train_accuracy),
                format!("{:?}", e.test_loss),
                format!("{:?}", e.test_accuracy),
                e.spikes.to_string(),
                e.flagged.join(";"),
                format!("{:.3}", e.seconds),
            ])
            .map_err(|e| metrics::csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Vec<EpochRecord>> {
        if !path.exists() {
            return Err(Error::DatasetNotFound(path.to_path_buf()));
        }
        let mut r = csv::Reader::from_path(path).map_err(|e| metrics::csv_err(path, e))?;
        let header = r.headers().map_err(|e| metrics::csv_err(path, e))?.clone();
        if header.iter().ne(LOG_COLUMNS) {
            return Err(Error::Corrupt(format!("{}: unexpected log header", path.display())));
        }
        let bad = |what: &str| Error::Corrupt(format!("{}: bad {what}", path.display()));
        let mut out = Vec::new();
        for row in r.records() {
            let row = row.map_err(|e| metrics::csv_err(path, e))?;
            let f = |i: usize| row[i].parse::<f64>().map_err(|_| bad(LOG_COLUMNS[i]));
            out.push(EpochRecord {
                epoch: row[0].parse().map_err(|_| bad("epoch"))?,
                train_loss: f(1)?,
                train_accuracy: f(2)?,
                test_loss: f(3)?,
                test_accuracy: f(4)?,
                spikes: row[5].parse().map_err(|_| bad("spikes"))?,
                flagged: row[6].split(';').filter(|s| !s.is_empty()).map(String::from).collect(),
                seconds: f(7)?,
            });
        }
        Ok(out)
    }
}

/// Mini-batch loop with a per-epoch evaluation. Epoch numbers continue from
/// `log` so a resumed run appends to the same record.
pub struct Trainer<'a, E> {
    pub network: &'a mut Network<E>,
    pub cfg: TrainConfig,
    pub optimizer: Adam<E>,
    pub log: TrainingLog,
    /// Evaluation batch size; defaults to the training batch size.
    pub eval_batch: usize,
}

impl<'a, E: Element> Trainer<'a, E> {
    pub fn new(network: &'a mut Network<E>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.timesteps != network.spec.timesteps {
            return Err(Error::Config(format!(
                "train timesteps {} differ from the network's {}",
                cfg.timesteps, network.spec.timesteps
            )));
        }
        let optimizer = Adam::new(cfg.lr);
        let eval_batch = cfg.batch_size;
        Ok(Self { network, cfg, optimizer, log: TrainingLog::default(), eval_batch })
    }

    pub fn resume(mut self, log: TrainingLog) -> Self {
        self.log = log;
        self
    }

    fn next_epoch(&self) -> usize {
        self.log.last_epoch().map_or(0, |e| e + 1)
    }

    /// One optimisation step; returns the batch loss and hit count.
    pub fn step(&mut self, x: &Tensor<E>, labels: &[usize], epoch: usize, step: usize) -> Result<(f64, usize)> {
        let net = &mut *self.network;
        net.reset_states();
        let mut tape = Tape::new();
        let opts = ForwardOptions::training();
        let diverged = |detail: String| Error::Diverged { epoch, step, detail };
        let out = match net.forward(&mut tape, x, &opts) {
            Err(Error::NaN(layer)) => return Err(diverged(format!("NaN in {layer}"))),
            r => r?,
        };
        let loss = tape.cross_entropy(out.logits, labels)?;
        let value = tape.value(loss).data()[0].to_f64().unwrap();
        if !value.is_finite() {
            return Err(diverged(format!("loss {value}")));
        }
        let hits = correct(tape.value(out.logits), labels);
        tape.backward(loss)?;
        let mut params = net.params_mut();
        let grads: Vec<Option<Tensor<E>>> = params.iter().map(|(_, p)| p.bound().and_then(|v| tape.take_grad(v))).collect();
        if let Some((name, _)) = params.iter().zip(&grads).find_map(|((n, _), g)| g.as_ref().filter(|g| g.has_nan()).map(|_| (n.clone(), ()))) {
            return Err(diverged(format!("NaN gradient for {name}")));
        }
        self.optimizer.update(&mut params, &grads);
        drop(params);
        net.unbind();
        net.reset_states();
        Ok((value, hits))
    }

    /// Trains for `cfg.epochs` further epochs, calling `on_epoch` after
    /// each evaluation.
    pub fn fit(&mut self, train: &LabeledSet, test: &LabeledSet, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<&TrainingLog> {
        let first = self.next_epoch();
        for epoch in first..first + self.cfg.epochs {
            let started = Instant::now();
            // per-epoch stream so resumed runs shuffle like uninterrupted ones
            let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch as u64));
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut rng);
            let (mut loss, mut hits) = (0.0, 0);
            for (step, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
                let (x, labels) = train.batch::<E>(chunk, self.cfg.timesteps, &self.cfg.augment, &mut rng)?;
                let (l, h) = self.step(&x, &labels, epoch, step)?;
                loss += l * chunk.len() as f64;
                hits += h;
            }
            let eval = evaluate(self.network, test, self.eval_batch)?;
            self.log.trace.push(epoch, metrics::firing_rates(&eval.record))?;
            let shortcuts: Vec<String> = self.network.shortcut_neurons().into_iter().map(|(_, n)| n).collect();
            let flagged = if self.log.trace.len() >= PRUNING_PATIENCE {
                detect_natural_pruning(&self.log.trace, &shortcuts, PRUNING_PATIENCE)?.flagged.into_iter().map(|f| f.layer).collect()
            } else {
                Vec::new()
            };
            let n = train.len().max(1) as f64;
            let record = EpochRecord {
                epoch,
                train_loss: loss / n,
                train_accuracy: hits as f64 / n,
                test_loss: eval.loss,
                test_accuracy: eval.accuracy,
                spikes: metrics::spike_count(&eval.record),
                flagged,
                seconds: started.elapsed().as_secs_f64(),
            };
            on_epoch(&record);
            self.log.epochs.push(record);
        }
        Ok(&self.log)
    }
}

/// Trains `network` on `train`, evaluating on `test` after every epoch.
pub fn train<E: Element>(network: &mut Network<E>, train: &LabeledSet, test: &LabeledSet, cfg: &TrainConfig) -> Result<TrainingLog> {
    let mut t = Trainer::new(network, cfg.clone())?;
    t.fit(train, test, |_| {})?;
    Ok(t.log)
}

/// Mean firing rate per layer in a trace row, for display.
pub fn rates_line(rates: &IndexMap<String, f64>) -> String {
    rates.iter().map(|(k, v)| format!("{k}={v:.4}")).collect::<Vec<_>>().join(" ")
}
