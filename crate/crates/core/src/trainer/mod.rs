//! Two-stage synthetic training harness.

mod checkpoint;
mod optim;
mod tasks;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, RngState, TensorRecord, MAGIC, VERSION};
pub use optim::{clip_grads, grad_norm, lr_at, AdamW};
pub use tasks::{Batch, TaskKind, TaskSpec, EVAL_STREAM};

use crate::config::{ModelConfig, StageConfig};
use crate::error::{CheckpointError, Error, Result};
use crate::mamoe::{write_events, RoutingEvent};
use crate::model::Model;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub task: TaskKind,
    pub loss: f64,
    pub aux_loss: f64,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Draws a task according to `mix`, iterating kinds in their fixed order.
pub fn sample_task<R: Rng + ?Sized>(mix: &StageConfig, rng: &mut R) -> TaskKind {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = None;
    for (&kind, &ratio) in &mix.mix {
        if ratio <= 0.0 {
            continue;
        }
        acc += ratio;
        last = Some(kind);
        if u < acc {
            return kind;
        }
    }
    last.expect("validated mix has positive mass")
}

/// Offsets the content streams of stage 2 away from stage 1.
fn content_step(stage: u8, step: u64) -> u64 {
    (u64::from(stage) - 1) << 40 | step
}

pub struct Trainer {
    pub model: Model,
    pub opt: AdamW,
    pub tasks: TaskSpec,
    pub stage: u8,
    /// Steps completed in the current stage.
    pub step: u64,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: Model, stage: u8) -> Result<Self> {
        let cfg = &model.config;
        cfg.training.stage(stage)?;
        let tasks = TaskSpec::new(cfg.seed, cfg.training.seq_len, cfg.v_text, cfg.code_vocab)?;
        let opt = AdamW::new(&model.store, cfg.training.weight_decay);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(u64::from(stage));
        Ok(Self {
            model,
            opt,
            tasks,
            stage,
            step: 0,
            rng,
        })
    }

    pub fn from_config(config: ModelConfig, stage: u8) -> Result<Self> {
        Self::new(Model::new(config)?, stage)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    pub fn stage_config(&self) -> &StageConfig {
        self.model
            .config
            .training
            .stage(self.stage)
            .expect("stage validated at construction")
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config().training.total_steps
    }

    pub fn current_lr(&self) -> f64 {
        let t = &self.config().training;
        lr_at(self.step, t.lr, t.warmup_steps, t.total_steps)
    }

    /// Draws the next batch, advancing the task-sampling generator.
    pub fn next_batch(&mut self) -> Result<Batch> {
        let stage = self.stage_config().clone();
        let kind = sample_task(&stage, &mut self.rng);
        self.tasks
            .gen_batch(kind, stage.batch_size, content_step(self.stage, self.step))
    }

    /// One optimizer step on `batch`. Returns metrics and, when requested,
    /// the batch's routing events.
    pub fn train_on(&mut self, batch: &Batch, log_events: bool) -> Result<(StepMetrics, Vec<RoutingEvent>)> {
        let lr = self.current_lr();
        let mut ev = self.model.evaluate(&batch.seqs, &batch.targets)?;
        let loss = ev.total();
        if !loss.is_finite() {
            let tensor = ev.tape.first_non_finite().unwrap_or_else(|| "loss".into());
            return Err(Error::NonFinite { tensor });
        }
        ev.tape.backward(ev.parts.total)?;
        self.model.store.collect_grads(&ev.tape, &ev.bound)?;
        for (name, t) in self.model.store.iter() {
            if t.grad().is_some_and(|g| g.iter().any(|x| !x.is_finite())) {
                return Err(Error::NonFinite {
                    tensor: format!("{name}.grad"),
                });
            }
        }
        let clip = self.config().training.grad_clip;
        let norm = clip_grads(&mut self.model.store, clip);
        self.opt.step(&mut self.model.store, lr)?;
        if let Some((name, _)) = self.model.store.iter().find(|(_, t)| !t.is_finite()) {
            return Err(Error::NonFinite { tensor: name.to_string() });
        }
        self.model.store.zero_grads();
        let metrics = StepMetrics {
            step: self.step,
            task: batch.kind,
            loss,
            aux_loss: ev.aux(),
            lr,
            grad_norm: norm,
        };
        let events = if log_events { ev.events(self.step) } else { Vec::new() };
        self.step += 1;
        Ok((metrics, events))
    }

    pub fn train_step(&mut self, log_events: bool) -> Result<(StepMetrics, Vec<RoutingEvent>)> {
        let batch = self.next_batch()?;
        self.train_on(&batch, log_events)
    }

    /// Runs the remaining steps of the stage, reporting to `sink`.
    pub fn run_stage(&mut self, sink: &mut dyn StageSink) -> Result<Vec<StepMetrics>> {
        let total = self.config().training.total_steps;
        let log_every = self.config().training.log_every;
        let ckpt_every = self.config().training.ckpt_every;
        let mut history = Vec::with_capacity(total.saturating_sub(self.step) as usize);
        while !self.is_done() {
            let step = self.step;
            let log = step % log_every == 0 || step + 1 == total;
            let (metrics, events) = self.train_step(log)?;
            sink.on_step(&metrics, &events)?;
            history.push(metrics);
            if self.step % ckpt_every == 0 || self.is_done() {
                sink.on_checkpoint(self)?;
            }
        }
        sink.finish()?;
        Ok(history)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let tensors = self
            .model
            .store
            .iter()
            .map(|(name, t)| TensorRecord {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect();
        Checkpoint {
            config: self.model.config.clone(),
            stage: self.stage,
            step: self.step,
            tensors,
            adam_t: self.opt.t,
            adam_m: self.opt.m.clone(),
            adam_v: self.opt.v.clone(),
            rng: RngState {
                seed: self.rng.get_seed(),
                stream: self.rng.get_stream(),
                word_pos: self.rng.get_word_pos(),
            },
        }
    }

    /// Restores parameters, optimizer moments, step and sampler state.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let model = model_from_checkpoint(ckpt)?;
        let mut t = Self::new(model, ckpt.stage)?;
        if ckpt.adam_m.len() != t.opt.m.len() || ckpt.adam_v.len() != t.opt.v.len() {
            return Err(CheckpointError::Malformed("optimizer state does not match parameters".into()).into());
        }
        for ((m, v), (cm, cv)) in t.opt.m.iter().zip(&t.opt.v).zip(ckpt.adam_m.iter().zip(&ckpt.adam_v)) {
            if m.len() != cm.len() || v.len() != cv.len() {
                return Err(CheckpointError::Malformed("optimizer moment has the wrong length".into()).into());
            }
        }
        t.opt.m = ckpt.adam_m.clone();
        t.opt.v = ckpt.adam_v.clone();
        t.opt.t = ckpt.adam_t;
        t.step = ckpt.step;
        let mut rng = ChaCha8Rng::from_seed(ckpt.rng.seed);
        rng.set_stream(ckpt.rng.stream);
        rng.set_word_pos(ckpt.rng.word_pos);
        t.rng = rng;
        Ok(t)
    }
}

/// Rebuilds a model from a checkpoint's config and tensors only.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<Model> {
    let mut model = Model::new(ckpt.config.clone())?;
    if ckpt.tensors.len() != model.store.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} tensors stored, model has {}",
            ckpt.tensors.len(),
            model.store.len()
        ))
        .into());
    }
    for rec in &ckpt.tensors {
        let id = model
            .store
            .find(&rec.name)
            .ok_or_else(|| CheckpointError::Malformed(format!("unknown tensor {}", rec.name)))?;
        let t = model.store.get_mut(id);
        if t.shape() != rec.shape.as_slice() {
            return Err(CheckpointError::Malformed(format!(
                "tensor {} has shape {:?}, model expects {:?}",
                rec.name,
                rec.shape,
                t.shape()
            ))
            .into());
        }
        t.data_mut().copy_from_slice(&rec.data);
    }
    Ok(model)
}

/// Mean cross-entropy of `model` on the held-out batch of `kind`.
pub fn eval_loss(model: &Model, tasks: &TaskSpec, kind: TaskKind, batch_size: usize) -> Result<f64> {
    let b = tasks.eval_batch(kind, batch_size)?;
    Ok(model.evaluate(&b.seqs, &b.targets)?.ce())
}

/// Observer of a running stage.
pub trait StageSink {
    fn on_step(&mut self, _metrics: &StepMetrics, _events: &[RoutingEvent]) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _trainer: &Trainer) -> Result<()> {
        Ok(())
    }

    fn finish(&mut self) -> Result<()> {
        Ok(())
    }
}

pub struct NullSink;

impl StageSink for NullSink {}

/// Writes `history.csv`, `routing_events.csv` and `ckpt_<step>.bin` files
/// (plus `final.bin`) into a directory.
pub struct DirSink {
    dir: PathBuf,
    history: csv::Writer<BufWriter<File>>,
    events: BufWriter<File>,
    events_header: bool,
}

pub const HISTORY_FILE: &str = "history.csv";
pub const EVENTS_FILE: &str = "routing_events.csv";
pub const FINAL_CHECKPOINT: &str = "final.bin";

impl DirSink {
    /// Starts fresh log files in `dir`.
    pub fn create(dir: &Path) -> Result<Self> {
        Self::open(dir, false)
    }

    /// With `append`, existing logs are extended rather than truncated.
    pub fn open(dir: &Path, append: bool) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let open = |name: &str| -> Result<(BufWriter<File>, bool)> {
            let p = dir.join(name);
            let f = std::fs::OpenOptions::new()
                .create(true)
                .write(true)
                .append(append)
                .truncate(!append)
                .open(&p)
                .map_err(|e| Error::io(&p, e))?;
            let empty = f.metadata().map_err(|e| Error::io(&p, e))?.len() == 0;
            Ok((BufWriter::new(f), empty))
        };
        let (history, history_empty) = open(HISTORY_FILE)?;
        let (events, events_empty) = open(EVENTS_FILE)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            history: csv::WriterBuilder::new()
                .has_headers(history_empty)
                .from_writer(history),
            events,
            events_header: events_empty,
        })
    }

    /// Reopens `dir` for a run resumed at `step`, dropping log rows from
    /// steps at or after it so the logs match an uninterrupted run.
    pub fn resume(dir: &Path, step: u64) -> Result<Self> {
        let hist_path = dir.join(HISTORY_FILE);
        if hist_path.exists() {
            let f = File::open(&hist_path).map_err(|e| Error::io(&hist_path, e))?;
            let kept: Vec<StepMetrics> = read_history(f)?.into_iter().filter(|m| m.step < step).collect();
            let out = File::create(&hist_path).map_err(|e| Error::io(&hist_path, e))?;
            write_history(BufWriter::new(out), &kept)?;
        }
        let ev_path = dir.join(EVENTS_FILE);
        if ev_path.exists() {
            let f = File::open(&ev_path).map_err(|e| Error::io(&ev_path, e))?;
            let kept: Vec<RoutingEvent> = crate::mamoe::EventReader::new(f)?
                .filter(|e| e.as_ref().map_or(true, |e| e.step < step))
                .collect::<Result<_>>()?;
            let mut out = BufWriter::new(File::create(&ev_path).map_err(|e| Error::io(&ev_path, e))?);
            if !kept.is_empty() {
                write_events(&mut out, &kept, true)?;
            }
            out.flush().map_err(|e| Error::io(&ev_path, e))?;
        }
        Self::open(dir, true)
    }
}

impl StageSink for DirSink {
    fn on_step(&mut self, metrics: &StepMetrics, events: &[RoutingEvent]) -> Result<()> {
        self.history.serialize(metrics)?;
        if !events.is_empty() {
            write_events(&mut self.events, events, self.events_header)?;
            self.events_header = false;
        }
        Ok(())
    }

    fn on_checkpoint(&mut self, trainer: &Trainer) -> Result<()> {
        let ckpt = trainer.checkpoint();
        ckpt.save(&self.dir.join(format!("ckpt_{}.bin", trainer.step)))?;
        if trainer.is_done() {
            ckpt.save(&self.dir.join(FINAL_CHECKPOINT))?;
        }
        Ok(())
    }

    fn finish(&mut self) -> Result<()> {
        self.history.flush().map_err(|e| Error::io(self.dir.join(HISTORY_FILE), e))?;
        if self.events_header {
            write_events(&mut self.events, &[], true)?;
            self.events_header = false;
        }
        self.events
            .flush()
            .map_err(|e| Error::io(self.dir.join(EVENTS_FILE), e))
    }
}

pub fn write_history<W: Write>(out: W, history: &[StepMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for m in history {
        w.serialize(m)?;
    }
    w.flush().map_err(|e| Error::io("<history>", e))
}

pub fn read_history<R: std::io::Read>(input: R) -> Result<Vec<StepMetrics>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests;
