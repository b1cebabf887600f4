use std::fmt::Write as _;
use std::thread;

use super::loss::{ctd_loss, rtd_decoder_forward, rtd_loss, RtdDecoder};
use super::optim::{adamw_step, clip_global_norm, OptimizerState};
use super::{lr_schedule, ClipSampler, Dataset, Objective, TrainConfig};
use crate::compression::{partition_blocks, BlockPartition, FeatureMap};
use crate::encoder::{teacher_forward, Forward, ModelParams, ParamVars, Role};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    /// Mean loss of the first `n` steps.
    pub fn head_mean(&self, n: usize) -> Option<f64> {
        let n = n.min(self.records.len());
        (n > 0).then(|| self.records[..n].iter().map(|r| r.loss).sum::<f64>() / n as f64)
    }

    /// Mean loss of the last `n` steps.
    pub fn tail_mean(&self, n: usize) -> Option<f64> {
        let n = n.min(self.records.len());
        let tail = &self.records[self.records.len() - n..];
        (n > 0).then(|| tail.iter().map(|r| r.loss).sum::<f64>() / n as f64)
    }

    /// `step,lr,loss,grad_norm` with a header row. Floats use the shortest
    /// representation that round-trips.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,lr,loss,grad_norm\n");
        for r in &self.records {
            writeln!(s, "{},{},{},{}", r.step, r.lr, r.loss, r.grad_norm).expect("string write");
        }
        s
    }
}

/// Per-item loss and gradients, positionally matched to the trainable
/// parameter order (student names sorted, then decoder names sorted).
struct ItemResult {
    loss: f64,
    grads: Vec<Tensor<f32>>,
}

fn item_gradients(
    student: &ModelParams<f32>,
    decoder: Option<&RtdDecoder<f32>>,
    clip: &Tensor<f32>,
    target: &FeatureMap<f32>,
    part: &BlockPartition,
    cfg: &TrainConfig,
) -> Result<ItemResult> {
    let tape = Tape::new();
    let vars = ParamVars::new(&tape, student, true);
    let fwd = Forward {
        tape: &tape,
        spec: &student.spec,
        vars: &vars,
    };
    let out = fwd.student(clip)?.distill;
    let dec_vars = decoder.map(|d| ParamVars::register(&tape, d.tensors.iter(), true));
    let loss = match (cfg.objective, decoder, &dec_vars) {
        (Objective::Ctd, _, _) => ctd_loss(&tape, &out, target, part, cfg.outlier_sigma)?,
        (Objective::Rtd, Some(d), Some(dv)) => {
            let rec = rtd_decoder_forward(&tape, &out, dv, d.heads, part)?;
            rtd_loss(&tape, &rec, target)?
        }
        (Objective::Rtd, _, _) => return Err(Error::Config("rtd objective needs a decoder".into())),
    };
    let value = loss.item() as f64;
    if !value.is_finite() {
        return Ok(ItemResult {
            loss: value,
            grads: vec![],
        });
    }
    let g = tape.backward(&loss)?;
    let mut grads: Vec<Tensor<f32>> = vars.iter().map(|(_, v)| g.get(v).expect("tracked")).collect();
    if let Some(dv) = &dec_vars {
        grads.extend(dv.iter().map(|(_, v)| g.get(v).expect("tracked")));
    }
    Ok(ItemResult { loss: value, grads })
}

/// Runs `f` on every item on a scoped thread pool; results come back in
/// item order so reductions over them are deterministic.
fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let workers = thread::available_parallelism().map_or(1, |n| n.get()).min(items.len().max(1));
    if workers <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Result<Vec<R>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}

/// Distills `teacher` into `student` (and `decoder` for RTD).
///
/// Each step samples `batch_size` clips, computes frozen teacher targets,
/// averages per-clip losses and gradients, clips the global gradient norm
/// and applies AdamW at `lr_schedule(step + 1)`. `on_step` sees every
/// record after the update; it may save checkpoints. Items are processed in
/// parallel but reduced in a fixed order, so the log depends only on the
/// inputs and seed.
pub fn train(
    student: &mut ModelParams<f32>,
    mut decoder: Option<&mut RtdDecoder<f32>>,
    teacher: &ModelParams<f32>,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord, &ModelParams<f32>) -> Result<()>,
) -> Result<TrainLog> {
    cfg.validate()?;
    if teacher.spec.role != Role::Teacher || student.spec.role != Role::Student {
        return Err(Error::Config("train needs a teacher and a student".into()));
    }
    if cfg.objective == Objective::Rtd && decoder.is_none() {
        return Err(Error::Config("rtd objective needs a decoder".into()));
    }
    let mut log = TrainLog::default();
    if cfg.total_steps == 0 {
        return Ok(log);
    }
    if data.videos.is_empty() {
        return Err(Error::Sampling("empty dataset".into()));
    }
    let grid = teacher.spec.grid();
    let part = partition_blocks(
        [cfg.clip_frames, grid, grid],
        student.spec.output_grid(cfg.clip_frames)?,
    )?;
    let mut sampler = ClipSampler::new(cfg.seed);
    let mut state = OptimizerState::default();
    for step in 0..cfg.total_steps {
        let clips = (0..cfg.batch_size)
            .map(|_| {
                let v = sampler.pick(data.videos.len());
                sampler.sample_clip(&data.videos[v], data.native_fps, cfg)
            })
            .collect::<Result<Vec<_>>>()?;
        let at_step = |e| match e {
            Error::Numeric(m) => Error::Numeric(format!("{m} at step {step}")),
            e => e,
        };
        let targets = par_map(&clips, |c| teacher_forward(c, teacher)).map_err(at_step)?;
        let pairs: Vec<_> = clips.iter().zip(&targets).collect();
        let dec_ref = decoder.as_deref();
        let items = par_map(&pairs, |(c, t)| item_gradients(student, dec_ref, c, t, &part, cfg)).map_err(at_step)?;

        let b = items.len() as f64;
        let loss = items.iter().map(|r| r.loss).sum::<f64>() / b;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss {loss} at step {step} (lr {:.3e}); last finite loss {}",
                lr_schedule(step + 1, cfg),
                log.records.last().map_or("none".to_string(), |r| r.loss.to_string())
            )));
        }
        let mut grads = items[0].grads.clone();
        for item in &items[1..] {
            for (acc, g) in grads.iter_mut().zip(&item.grads) {
                acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, x)| *a += x);
            }
        }
        let inv = (1.0 / b) as f32;
        grads
            .iter_mut()
            .for_each(|g| g.data_mut().iter_mut().for_each(|x| *x *= inv));
        let (grad_norm, clipped_norm) = clip_global_norm(&mut grads, cfg.grad_clip_norm);

        let lr = lr_schedule(step + 1, cfg);
        let mut params: Vec<&mut Tensor<f32>> = student.iter_mut().map(|(_, t)| t).collect();
        if let Some(d) = decoder.as_deref_mut() {
            params.extend(d.tensors.values_mut());
        }
        let grad_refs: Vec<&Tensor<f32>> = grads.iter().collect();
        adamw_step(&mut params, &grad_refs, &mut state, lr, cfg.weight_decay)?;

        let rec = StepRecord {
            step,
            lr,
            loss,
            grad_norm,
            clipped_norm,
        };
        on_step(&rec, student)?;
        log.records.push(rec);
    }
    Ok(log)
}
