//! Joint objective, the training loop, the flow-fitting phase and
//! checkpoints.

mod checkpoint;
mod config;
mod model;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blockworld::{Vocab, STATE_DIM};
use crate::datastore::{Batch, DatasetRecord};
use crate::encoders::{reparameterize, GaussianEmbedding};
use crate::error::{ClaspError, Result};
use crate::substrate::{Adam, AdamConfig, Graph, Mode, NoiseKey, ParamStore, Tensor};

pub use checkpoint::{Checkpoint, CKPT_MAGIC, CKPT_VERSION};
pub use config::{PriorSource, PriorTarget, Schedule, TrainConfig};
pub use model::{captioner_config, encoder_config, ClaspModel, LossNodes, Weights};

pub const METRICS_HEADER: &str = "step,total,align,caption,pi";
pub const PRIOR_METRICS_HEADER: &str = "step,prior";

/// Loss values of one step or one evaluation pass.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub align: f64,
    /// Summed caption NLL per caption.
    pub caption: f64,
    /// Caption NLL per non-PAD target token.
    pub caption_per_token: f64,
    pub gen: f64,
    pub kl: f64,
}

impl LossBreakdown {
    fn is_finite(&self) -> bool {
        [self.total, self.align, self.caption, self.gen, self.kl]
            .iter()
            .all(|v| v.is_finite())
    }

    /// One metrics line. Values print in shortest round-trip form so equal
    /// runs give byte-equal files.
    pub fn metrics_line(&self, step: u64) -> String {
        format!(
            "{step},{},{},{},{}",
            self.total as f32, self.align as f32, self.caption as f32, self.gen as f32
        )
    }
}

/// Indices of the records used at `step`: epochs of shuffled full batches,
/// each epoch shuffled from `(seed, epoch)`.
pub fn batch_indices(len: usize, batch_size: usize, seed: u64, step: u64) -> Result<Vec<usize>> {
    if len < 2 {
        return Err(ClaspError::InsufficientRecords(format!(
            "training needs at least 2 records, got {len}"
        )));
    }
    let n = batch_size.min(len);
    let per_epoch = (len / n) as u64;
    let epoch = step / per_epoch;
    let pos = (step % per_epoch) as usize;
    let mut idx: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch + 1);
    idx.shuffle(&mut rng);
    Ok(idx[pos * n..(pos + 1) * n].to_vec())
}

/// A model, its parameters and optimizer state mid-training.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub vocab: Vocab,
    pub model: ClaspModel,
    pub store: ParamStore<f32>,
    pub adam: Adam<f32>,
    pub step: u64,
    pub prior_step: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let model = ClaspModel::new(&mut store, &config, vocab.len())?;
        let adam = Adam::new(adam_config(config.lr), &store);
        Ok(Self {
            config,
            vocab,
            model,
            store,
            adam,
            step: 0,
            prior_step: 0,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(ckpt.config.clone(), ckpt.vocab.clone())?;
        if ckpt.store.lookup("flow.0.scale.0.w").is_some() {
            t.model.add_flow(&mut t.store, t.config.seed)?;
        }
        if t.store.len() != ckpt.store.len() {
            return Err(ClaspError::Checkpoint(format!(
                "checkpoint holds {} parameters, configuration builds {}",
                ckpt.store.len(),
                t.store.len()
            )));
        }
        t.store.load_values(&ckpt.store)?;
        t.step = ckpt.step;
        t.prior_step = ckpt.prior_step;
        t.adam = match &ckpt.adam {
            Some(a) => a.clone(),
            None => Adam::new(adam_config(t.config.lr), &t.store),
        };
        t.pad_moments();
        Ok(t)
    }

    /// Optimizer slots for parameters registered after the optimizer.
    fn pad_moments(&mut self) {
        for p in self.store.iter().skip(self.adam.m.len()) {
            self.adam.m.push(vec![0.0; p.value.len()]);
            self.adam.v.push(vec![0.0; p.value.len()]);
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            store: self.store.clone(),
            step: self.step,
            adam: Some(self.adam.clone()),
            prior_step: self.prior_step,
        }
    }

    /// Loss weights at `step`; the staged schedule trains alignment alone
    /// for the first half.
    pub fn weights_at(&self, step: u64) -> Weights {
        let mut w = Weights::of(&self.config);
        if self.config.schedule == Schedule::Staged && step < self.config.steps / 2 {
            w.caption = 0.0;
            w.gen = 0.0;
        }
        w
    }

    /// One optimizer step on the batch scheduled for the current step.
    /// A non-finite loss leaves the parameters untouched and errors.
    pub fn train_step(&mut self, records: &[DatasetRecord]) -> Result<LossBreakdown> {
        let idx = batch_indices(
            records.len(),
            self.config.batch_size,
            self.config.seed,
            self.step,
        )?;
        let refs: Vec<&DatasetRecord> = idx.iter().map(|&i| &records[i]).collect();
        let batch = Batch::from_records(&refs);
        let mode = Mode::Train(NoiseKey::new(self.config.seed, self.step));
        let mut g = Graph::new();
        let nodes = self.model.total_loss(
            &mut g,
            &self.store,
            &batch,
            self.weights_at(self.step),
            self.config.tau,
            mode,
        )?;
        let b = read_breakdown(&g, &nodes, batch.len());
        if !b.is_finite() {
            return Err(ClaspError::NonFinite(format!(
                "loss at step {}: {b:?}",
                self.step
            )));
        }
        g.backward(nodes.total, &mut self.store);
        self.adam.step(&mut self.store)?;
        self.step += 1;
        Ok(b)
    }

    /// Trains until `until` steps have been taken, writing one metrics line
    /// every `log_every` steps. On a non-finite loss the current state is
    /// saved to `abort_path` (if given) before the error is returned.
    pub fn run(
        &mut self,
        records: &[DatasetRecord],
        until: u64,
        mut metrics: Option<&mut dyn Write>,
        abort_path: Option<&Path>,
    ) -> Result<Option<LossBreakdown>> {
        let mut last = None;
        while self.step < until {
            let step = self.step;
            let b = match self.train_step(records) {
                Ok(b) => b,
                Err(e @ ClaspError::NonFinite(_)) => {
                    if let Some(p) = abort_path {
                        self.checkpoint().save(p)?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            if (step + 1) % self.config.log_every == 0 || step + 1 == until {
                if let Some(w) = metrics.as_deref_mut() {
                    writeln!(w, "{}", b.metrics_line(step))?;
                }
            }
            last = Some(b);
        }
        Ok(last)
    }

    /// Eval-mode losses over `records` (no noise, no dropout), averaged
    /// over chunks of `batch_size`.
    pub fn evaluate(&self, records: &[DatasetRecord]) -> Result<LossBreakdown> {
        if records.is_empty() {
            return Err(ClaspError::InsufficientRecords(
                "nothing to evaluate".into(),
            ));
        }
        let n = self.config.batch_size.max(2);
        let mut acc = LossBreakdown::default();
        let mut tokens = 0usize;
        let mut cap_sum = 0.0;
        for chunk in records.chunks(n) {
            let refs: Vec<&DatasetRecord> = chunk.iter().collect();
            let batch = Batch::from_records(&refs);
            let mut g = Graph::new();
            let nodes = self.model.total_loss(
                &mut g,
                &self.store,
                &batch,
                Weights::of(&self.config),
                self.config.tau,
                Mode::Eval,
            )?;
            let b = read_breakdown(&g, &nodes, batch.len());
            let w = chunk.len() as f64 / records.len() as f64;
            acc.total += w * b.total;
            acc.align += w * b.align;
            acc.caption += w * b.caption;
            acc.gen += w * b.gen;
            acc.kl += w * b.kl;
            cap_sum += b.caption * chunk.len() as f64;
            tokens += nodes.caption_tokens;
        }
        acc.caption_per_token = cap_sum / tokens.max(1) as f64;
        Ok(acc)
    }

    /// Targets for the flow: one `z` row per record, from the frozen
    /// behavior encoder.
    fn prior_targets(&self, records: &[DatasetRecord]) -> Result<Tensor<f32>> {
        let d = self.model.d();
        let mut data = Vec::with_capacity(records.len() * d);
        for chunk in records.chunks(64) {
            let trajs: Vec<_> = chunk.iter().map(|r| &r.trajectory).collect();
            let mut g = Graph::new();
            let embs = if self.config.prior_source == PriorSource::Text {
                let caps: Vec<Vec<u32>> = chunk.iter().map(|r| r.caption.clone()).collect();
                self.model
                    .text
                    .forward(&mut g, &self.store, &caps, Mode::Eval)?
                    .read(&g)
            } else {
                self.model
                    .behavior
                    .forward_trajectories(&mut g, &self.store, &trajs, Mode::Eval)?
                    .read(&g)
            };
            for (r, e) in chunk.iter().zip(embs) {
                let e = match self.config.prior_target {
                    PriorTarget::Mean => e,
                    PriorTarget::Sample => {
                        let key = NoiseKey::new(self.config.seed, u64::MAX);
                        let eps = key.normal::<f32>(&format!("prior.{}", r.record_id), d);
                        let raw: Vec<f32> =
                            e.mu.iter()
                                .zip(&e.logvar)
                                .zip(&eps)
                                .map(|((&m, &lv), &n)| m + n * (lv * 0.5).exp())
                                .collect();
                        GaussianEmbedding {
                            mu: raw,
                            logvar: vec![0.0; d],
                        }
                    }
                };
                if self.config.prior_normalize {
                    data.extend(reparameterize(&e, &vec![0.0; d])?.z);
                } else {
                    data.extend(e.mu);
                }
            }
        }
        Ok(Tensor::from_vec(records.len(), d, data))
    }

    /// Fits the flow on frozen encoder outputs. Only `flow.*` parameters are
    /// updated. Returns the step-0 and final losses.
    pub fn fit_prior(
        &mut self,
        records: &[DatasetRecord],
        mut metrics: Option<&mut dyn Write>,
    ) -> Result<(f64, f64)> {
        self.model.add_flow(&mut self.store, self.config.seed)?;
        self.pad_moments();
        let flow = self.model.flow.clone().expect("flow just added");
        let z = self.prior_targets(records)?;
        let s0: Vec<f32> = records
            .iter()
            .flat_map(|r| r.trajectory.states[0].to_vector())
            .collect();
        let ids = self.store.owned_by("flow");
        let mut adam = Adam::new(adam_config(self.config.prior_lr), &self.store);
        let d = self.model.d();
        let (mut first, mut last) = (f64::NAN, f64::NAN);
        for step in 0..self.config.prior_steps {
            let idx = batch_indices(
                records.len(),
                self.config.prior_batch,
                self.config.seed ^ 0x0070_7269_6f72,
                step,
            )?;
            let zb: Vec<f32> = idx.iter().flat_map(|&i| z.row(i).iter().copied()).collect();
            let sb: Vec<f32> = idx
                .iter()
                .flat_map(|&i| s0[i * STATE_DIM..(i + 1) * STATE_DIM].iter().copied())
                .collect();
            let mut g = Graph::new();
            let zi = g.constant(Tensor::from_vec(idx.len(), d, zb));
            let si = g.constant(Tensor::from_vec(idx.len(), STATE_DIM, sb));
            let loss = flow.prior_loss(&mut g, &self.store, zi, si);
            let v = g.value(loss).item() as f64;
            if !v.is_finite() {
                return Err(ClaspError::NonFinite(format!("prior loss at step {step}")));
            }
            if step == 0 {
                first = v;
            }
            last = v;
            g.backward(loss, &mut self.store);
            adam.step_subset(&mut self.store, &ids)?;
            self.prior_step = step + 1;
            if (step + 1) % self.config.log_every == 0 || step + 1 == self.config.prior_steps {
                if let Some(w) = metrics.as_deref_mut() {
                    writeln!(w, "{step},{}", v as f32)?;
                }
            }
        }
        Ok((first, last))
    }
}

fn adam_config(lr: f64) -> AdamConfig {
    AdamConfig {
        lr,
        ..AdamConfig::default()
    }
}

fn read_breakdown(g: &Graph<f32>, n: &LossNodes, batch_len: usize) -> LossBreakdown {
    let v = |id| g.value(id).item() as f64;
    let caption = v(n.caption);
    LossBreakdown {
        total: v(n.total),
        align: v(n.align),
        caption,
        caption_per_token: caption * batch_len as f64 / n.caption_tokens.max(1) as f64,
        gen: v(n.gen),
        kl: v(n.kl),
    }
}

/// Where a run writes its outputs.
#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    pub metrics: Option<PathBuf>,
    /// Final checkpoint, also written when training aborts.
    pub checkpoint: Option<PathBuf>,
}

fn open_metrics(path: &Path, header: &str, append: bool) -> Result<BufWriter<File>> {
    let existed = append && path.exists();
    let f = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)?;
    let mut w = BufWriter::new(f);
    if !existed {
        writeln!(w, "{header}")?;
    }
    Ok(w)
}

fn run_to_end(
    t: &mut Trainer,
    records: &[DatasetRecord],
    opts: &FitOptions,
    append: bool,
) -> Result<Checkpoint> {
    let mut metrics = match &opts.metrics {
        Some(p) => Some(open_metrics(p, METRICS_HEADER, append)?),
        None => None,
    };
    let until = t.config.steps;
    t.run(
        records,
        until,
        metrics.as_mut().map(|w| w as &mut dyn Write),
        opts.checkpoint.as_deref(),
    )?;
    if let Some(w) = metrics.as_mut() {
        w.flush()?;
    }
    let ckpt = t.checkpoint();
    if let Some(p) = &opts.checkpoint {
        ckpt.save(p)?;
    }
    Ok(ckpt)
}

/// Trains from scratch on `records` for `config.steps` steps.
pub fn fit(
    config: TrainConfig,
    vocab: Vocab,
    records: &[DatasetRecord],
    opts: &FitOptions,
) -> Result<Checkpoint> {
    let mut t = Trainer::new(config, vocab)?;
    run_to_end(&mut t, records, opts, false)
}

/// Continues a checkpoint up to its configured step count, appending to the
/// metrics file.
pub fn resume(
    ckpt: &Checkpoint,
    records: &[DatasetRecord],
    opts: &FitOptions,
) -> Result<Checkpoint> {
    let mut t = Trainer::from_checkpoint(ckpt)?;
    run_to_end(&mut t, records, opts, true)
}

/// Adds and fits the flow on top of a trained checkpoint.
pub fn fit_prior(
    ckpt: &Checkpoint,
    records: &[DatasetRecord],
    opts: &FitOptions,
) -> Result<Checkpoint> {
    let mut t = Trainer::from_checkpoint(ckpt)?;
    let mut metrics = match &opts.metrics {
        Some(p) => Some(open_metrics(p, PRIOR_METRICS_HEADER, false)?),
        None => None,
    };
    t.fit_prior(records, metrics.as_mut().map(|w| w as &mut dyn Write))?;
    if let Some(w) = metrics.as_mut() {
        w.flush()?;
    }
    let out = t.checkpoint();
    if let Some(p) = &opts.checkpoint {
        out.save(p)?;
    }
    Ok(out)
}
