//! Sequential task training: allocate, train only the new task's parameters,
//! freeze, then re-evaluate every frozen task and insist nothing moved.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cmc::TaskId;
use crate::error::{Error, Result};
use crate::metrics::{psnr, ssim};
use crate::net::RestorationNet;
use crate::optim::{adam_step, AdamState, TrainSchedule};
use crate::seed::{derive_seed, stream};
use crate::tasks::{make_pair_stream, CleanImageSource, Degradation, EvalSet, Image, PairStream};
use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub task_id: TaskId,
    pub name: String,
    pub degradation: Degradation,
    /// Degradation for the evaluation set; defaults to the training one.
    #[serde(default)]
    pub eval_degradation: Option<Degradation>,
    #[serde(default = "TaskSpec::default_fraction")]
    pub fraction: f64,
    /// Per-layer fraction overrides keyed by layer index.
    #[serde(default)]
    pub layer_fractions: BTreeMap<usize, f64>,
    #[serde(default = "TaskSpec::default_epochs")]
    pub epochs: usize,
    #[serde(default = "TaskSpec::default_batches")]
    pub batches_per_epoch: usize,
    #[serde(default = "TaskSpec::default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "TaskSpec::default_patch_size")]
    pub patch_size: usize,
    #[serde(default = "TaskSpec::default_sharing")]
    pub knowledge_sharing: bool,
}

impl TaskSpec {
    fn default_fraction() -> f64 {
        0.2
    }
    fn default_epochs() -> usize {
        10
    }
    fn default_batches() -> usize {
        50
    }
    fn default_batch_size() -> usize {
        8
    }
    fn default_patch_size() -> usize {
        32
    }
    fn default_sharing() -> bool {
        true
    }

    /// Desk-scale task with default sizes.
    pub fn new(task_id: TaskId, name: impl Into<String>, degradation: Degradation) -> Self {
        Self {
            task_id,
            name: name.into(),
            degradation,
            eval_degradation: None,
            fraction: Self::default_fraction(),
            layer_fractions: BTreeMap::new(),
            epochs: Self::default_epochs(),
            batches_per_epoch: Self::default_batches(),
            batch_size: Self::default_batch_size(),
            patch_size: Self::default_patch_size(),
            knowledge_sharing: Self::default_sharing(),
        }
    }

    pub fn eval_degradation(&self) -> &Degradation {
        self.eval_degradation.as_ref().unwrap_or(&self.degradation)
    }

    pub fn validate(&self) -> Result<()> {
        let fracs = std::iter::once(self.fraction).chain(self.layer_fractions.values().copied());
        for f in fracs {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!(
                    "task {} ({}): fraction {f} outside (0, 1]",
                    self.task_id, self.name
                )));
            }
        }
        if self.epochs == 0 || self.batches_per_epoch == 0 || self.batch_size == 0 || self.patch_size == 0 {
            return Err(Error::Config(format!(
                "task {} ({}): epochs, batches, batch size and patch size must be >= 1",
                self.task_id, self.name
            )));
        }
        self.degradation.validate()?;
        self.eval_degradation().validate()
    }
}

/// Checks a task list: each spec valid and ids numbered 1, 2, ... in order.
pub fn validate_sequence(specs: &[TaskSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::Config("task sequence is empty".into()));
    }
    for (pos, s) in specs.iter().enumerate() {
        if s.task_id as usize != pos + 1 {
            return Err(Error::Config(format!(
                "task '{}' at position {} has id {}; ids must run 1, 2, ...",
                s.name,
                pos + 1,
                s.task_id
            )));
        }
        s.validate()?;
    }
    Ok(())
}

/// Clean-image pools for training and evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "DataConfig::default_source")]
    pub source: CleanImageSource,
    #[serde(default = "DataConfig::default_eval_count")]
    pub eval_count: usize,
    #[serde(default = "DataConfig::default_eval_patch")]
    pub eval_patch_size: usize,
}

impl DataConfig {
    fn default_source() -> CleanImageSource {
        CleanImageSource::procedural(32, 64)
    }
    fn default_eval_count() -> usize {
        32
    }
    fn default_eval_patch() -> usize {
        32
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: Self::default_source(),
            eval_count: Self::default_eval_count(),
            eval_patch_size: Self::default_eval_patch(),
        }
    }
}

/// Materialized pools. Training and evaluation pools are drawn with separate
/// seeds, so procedural evaluation images are never seen in training.
#[derive(Debug, Clone)]
pub struct SequenceData {
    train_pool: Arc<Vec<Image>>,
    eval_pool: Arc<Vec<Image>>,
    eval_count: usize,
    eval_patch: usize,
    seed: u64,
}

impl SequenceData {
    pub fn new(config: &DataConfig, seed: u64) -> Result<Self> {
        if config.eval_count == 0 {
            return Err(Error::EmptyEvalSet);
        }
        Ok(Self {
            train_pool: Arc::new(config.source.load_pool(derive_seed(seed, &[stream::TRAIN_POOL]))?),
            eval_pool: Arc::new(config.source.load_pool(derive_seed(seed, &[stream::EVAL_POOL]))?),
            eval_count: config.eval_count,
            eval_patch: config.eval_patch_size,
            seed,
        })
    }

    pub fn eval_set(&self, spec: &TaskSpec) -> Result<EvalSet> {
        EvalSet::generate(
            self.eval_pool.clone(),
            spec.eval_degradation(),
            self.eval_count,
            self.eval_patch,
            derive_seed(self.seed, &[stream::EVAL_SET, spec.task_id as u64]),
        )
    }

    pub fn train_stream<T: Real>(&self, spec: &TaskSpec) -> Result<PairStream<T>> {
        make_pair_stream(
            self.train_pool.clone(),
            spec.degradation.clone(),
            spec.patch_size,
            spec.batch_size,
            derive_seed(self.seed, &[stream::TRAIN_BATCHES, spec.task_id as u64]),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub task_id: TaskId,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub task_id: TaskId,
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// Per-epoch history of one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskTrace {
    pub task_id: TaskId,
    pub name: String,
    /// PSNR of the degraded eval inputs themselves.
    pub input_psnr: f64,
    pub epoch_loss: Vec<f64>,
    pub epoch_psnr: Vec<f64>,
    pub epoch_ssim: Vec<f64>,
}

/// PSNR/SSIM matrices indexed `[task][after_task]` (0-based), filled once
/// the column's task is frozen.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SequenceReport {
    pub names: Vec<String>,
    pub psnr: Vec<Vec<Option<f64>>>,
    pub ssim: Vec<Vec<Option<f64>>>,
    pub traces: Vec<TaskTrace>,
}

impl SequenceReport {
    fn sized(specs: &[TaskSpec]) -> Self {
        let n = specs.len();
        Self {
            names: specs.iter().map(|s| s.name.clone()).collect(),
            psnr: vec![vec![None; n]; n],
            ssim: vec![vec![None; n]; n],
            traces: Vec::new(),
        }
    }

    /// PSNR of `task` (1-based) right after it was frozen.
    pub fn psnr_at_freeze(&self, task: TaskId) -> Option<f64> {
        let i = task as usize - 1;
        self.psnr.get(i).and_then(|row| row[i])
    }

    /// PSNR of every task after the last completed one.
    pub fn final_psnr(&self) -> Vec<Option<f64>> {
        let done = self.traces.len();
        if done == 0 {
            return vec![None; self.names.len()];
        }
        self.psnr.iter().map(|row| row[done - 1]).collect()
    }

    pub fn completed(&self) -> usize {
        self.traces.len()
    }
}

/// Hooks for logging and checkpointing during a run.
pub trait TrainObserver<T: Real> {
    fn on_step(&mut self, _record: &StepRecord) -> Result<()> {
        Ok(())
    }
    fn on_epoch(&mut self, _record: &EpochRecord) -> Result<()> {
        Ok(())
    }
    fn on_task_frozen(&mut self, _net: &RestorationNet<T>, _report: &SequenceReport) -> Result<()> {
        Ok(())
    }
}

pub struct NoObserver;

impl<T: Real> TrainObserver<T> for NoObserver {}

const EVAL_CHUNK: usize = 8;

/// Mean PSNR and SSIM of `task_id` over the eval set, in set order.
pub fn evaluate<T: Real>(net: &RestorationNet<T>, task_id: TaskId, eval: &EvalSet) -> Result<Evaluation> {
    if eval.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let (mut p_sum, mut s_sum) = (0.0, 0.0);
    for chunk in eval.pairs.chunks(EVAL_CHUNK) {
        let inputs: Vec<&Image> = chunk.iter().map(|(d, _)| d).collect();
        let out = net.forward(&Image::stack::<T>(&inputs)?, task_id)?;
        for (b, (_, clean)) in chunk.iter().enumerate() {
            let restored = Image::from_tensor(&out, b)?;
            p_sum += psnr(&restored, clean)?;
            s_sum += ssim(&restored, clean)?;
        }
    }
    let n = eval.len() as f64;
    Ok(Evaluation {
        psnr: p_sum / n,
        ssim: s_sum / n,
    })
}

/// PSNR of the degraded inputs against their clean targets.
pub fn identity_psnr(eval: &EvalSet) -> Result<f64> {
    if eval.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let mut sum = 0.0;
    for (d, c) in &eval.pairs {
        sum += psnr(d, c)?;
    }
    Ok(sum / eval.len() as f64)
}

/// Trains the already allocated task `spec.task_id` and freezes it.
pub fn train_task<T: Real>(
    net: &mut RestorationNet<T>,
    spec: &TaskSpec,
    batches: &PairStream<T>,
    schedule: &TrainSchedule,
    eval: &EvalSet,
    observer: &mut dyn TrainObserver<T>,
) -> Result<TaskTrace> {
    let task = spec.task_id;
    if net.active_task() != Some(task) {
        return Err(Error::Protocol(format!(
            "task {task} has no allocated masks (active: {:?})",
            net.active_task()
        )));
    }
    let mut params = net.active_params(task)?;
    let mut adam = AdamState::new(params.len(), schedule.optimizer);
    let mut trace = TaskTrace {
        task_id: task,
        name: spec.name.clone(),
        input_psnr: identity_psnr(eval)?,
        epoch_loss: Vec::with_capacity(spec.epochs),
        epoch_psnr: Vec::with_capacity(spec.epochs),
        epoch_ssim: Vec::with_capacity(spec.epochs),
    };
    for epoch in 0..spec.epochs {
        let lr = schedule.lr_at(epoch);
        let mut loss_sum = 0.0;
        for s in 0..spec.batches_per_epoch {
            let step = epoch * spec.batches_per_epoch + s;
            let batch = batches.batch(step as u64)?;
            let (loss, grads) = net.loss_and_grads(task, &batch.degraded, &batch.clean)?;
            let loss = loss.as_f64();
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    what: "loss",
                    task: Some(task),
                    step: Some(step),
                });
            }
            adam_step(&mut params, &grads, &mut adam, lr).map_err(|e| match e {
                Error::NonFinite { what, .. } => Error::NonFinite {
                    what,
                    task: Some(task),
                    step: Some(step),
                },
                other => other,
            })?;
            net.set_active_params(task, &params)?;
            loss_sum += loss;
            observer.on_step(&StepRecord {
                task_id: task,
                epoch,
                step,
                lr,
                loss,
            })?;
        }
        let ev = evaluate(net, task, eval)?;
        let mean_loss = loss_sum / spec.batches_per_epoch as f64;
        trace.epoch_loss.push(mean_loss);
        trace.epoch_psnr.push(ev.psnr);
        trace.epoch_ssim.push(ev.ssim);
        observer.on_epoch(&EpochRecord {
            task_id: task,
            epoch,
            lr,
            mean_loss,
            psnr: ev.psnr,
            ssim: ev.ssim,
        })?;
    }
    net.freeze_task(task)?;
    Ok(trace)
}

/// Trains `specs` in order, continuing after whatever `net` already has
/// frozen. `prior` must carry the report of those earlier tasks.
pub fn run_sequence<T: Real>(
    net: &mut RestorationNet<T>,
    specs: &[TaskSpec],
    data: &SequenceData,
    schedule: &TrainSchedule,
    seed: u64,
    prior: Option<SequenceReport>,
    observer: &mut dyn TrainObserver<T>,
) -> Result<SequenceReport> {
    validate_sequence(specs)?;
    schedule.validate()?;
    if let Some(active) = net.active_task() {
        return Err(Error::Protocol(format!(
            "task {active} is mid-training; it must be frozen or aborted first"
        )));
    }
    let done = net.frozen_through() as usize;
    if done > specs.len() {
        return Err(Error::Protocol(format!(
            "network has {done} frozen tasks but the sequence has {}",
            specs.len()
        )));
    }
    let mut report = SequenceReport::sized(specs);
    if done > 0 {
        let prior =
            prior.ok_or_else(|| Error::Protocol(format!("resuming after task {done} needs the stored report")))?;
        if prior.completed() != done || prior.names.len() < done || prior.names[..done] != report.names[..done] {
            return Err(Error::Protocol(format!(
                "stored report covers tasks {:?}, network froze {done}",
                prior.names
            )));
        }
        for i in 0..done {
            for j in 0..done {
                report.psnr[i][j] = prior.psnr[i][j];
                report.ssim[i][j] = prior.ssim[i][j];
            }
        }
        report.traces = prior.traces;
    }
    let evals = specs.iter().map(|s| data.eval_set(s)).collect::<Result<Vec<_>>>()?;

    for (pos, spec) in specs.iter().enumerate().skip(done) {
        net.begin_task(
            spec.task_id,
            spec.fraction,
            &spec.layer_fractions,
            spec.knowledge_sharing,
            seed,
        )?;
        let trained = data
            .train_stream(spec)
            .and_then(|stream| train_task(net, spec, &stream, schedule, &evals[pos], observer));
        let trace = match trained {
            Ok(t) => t,
            Err(e) => {
                if net.active_task() == Some(spec.task_id) {
                    net.abort_task(spec.task_id)?;
                }
                return Err(e);
            }
        };
        report.traces.push(trace);
        for i in 0..=pos {
            let ev = evaluate(net, specs[i].task_id, &evals[i])?;
            if let Some(before) = report.psnr[i][i] {
                if before.to_bits() != ev.psnr.to_bits() {
                    return Err(Error::Forgetting {
                        task_id: specs[i].task_id,
                        after_task: spec.task_id,
                        before,
                        after: ev.psnr,
                    });
                }
            }
            report.psnr[i][pos] = Some(ev.psnr);
            report.ssim[i][pos] = Some(ev.ssim);
        }
        observer.on_task_frozen(net, &report)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetConfig;

    fn tiny_net() -> RestorationNet<f32> {
        RestorationNet::new(NetConfig {
            channels: 4,
            blocks: 1,
            ..NetConfig::default()
        })
        .unwrap()
    }

    fn tiny_data(seed: u64) -> SequenceData {
        SequenceData::new(
            &DataConfig {
                source: CleanImageSource::procedural(6, 24),
                eval_count: 4,
                eval_patch_size: 16,
            },
            seed,
        )
        .unwrap()
    }

    fn quick(id: TaskId, sigma: f64) -> TaskSpec {
        TaskSpec {
            epochs: 2,
            batches_per_epoch: 3,
            batch_size: 2,
            patch_size: 16,
            ..TaskSpec::new(id, format!("noise{sigma}"), Degradation::noise(sigma))
        }
    }

    #[test]
    fn sequence_ids_must_be_contiguous() {
        assert!(validate_sequence(&[quick(1, 10.0), quick(3, 20.0)]).is_err());
        assert!(validate_sequence(&[]).is_err());
        validate_sequence(&[quick(1, 10.0), quick(2, 20.0)]).unwrap();
    }

    #[test]
    fn single_task_sequence_is_train_task() {
        let data = tiny_data(1);
        let schedule = TrainSchedule::desk();
        let spec = quick(1, 25.0);

        let mut a = tiny_net();
        let report = run_sequence(
            &mut a,
            std::slice::from_ref(&spec),
            &data,
            &schedule,
            7,
            None,
            &mut NoObserver,
        )
        .unwrap();

        let mut b = tiny_net();
        b.begin_task(1, spec.fraction, &spec.layer_fractions, true, 7).unwrap();
        let stream = data.train_stream(&spec).unwrap();
        let eval = data.eval_set(&spec).unwrap();
        let trace = train_task(&mut b, &spec, &stream, &schedule, &eval, &mut NoObserver).unwrap();
        assert_eq!(report.traces[0], trace);
        assert_eq!(a, b);
        assert_eq!(report.psnr_at_freeze(1), trace.epoch_psnr.last().copied());
    }

    #[test]
    fn reruns_are_bit_identical() {
        let specs = [quick(1, 10.0), quick(2, 30.0)];
        let run = || {
            let mut net = tiny_net();
            run_sequence(
                &mut net,
                &specs,
                &tiny_data(3),
                &TrainSchedule::desk(),
                5,
                None,
                &mut NoObserver,
            )
            .unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert_eq!(a.psnr[0][0].unwrap().to_bits(), a.psnr[0][1].unwrap().to_bits());
        assert!(a.psnr[1][0].is_none());
    }

    #[test]
    fn sharing_off_ignores_frozen_weights() {
        let data = tiny_data(2);
        let schedule = TrainSchedule::desk();
        let first = quick(1, 20.0);
        let second = TaskSpec {
            knowledge_sharing: false,
            ..quick(2, 40.0)
        };
        let run = |zero_first: bool| {
            let mut net = tiny_net();
            net.begin_task(1, first.fraction, &first.layer_fractions, true, 1)
                .unwrap();
            let stream = data.train_stream(&first).unwrap();
            let eval = data.eval_set(&first).unwrap();
            train_task(&mut net, &first, &stream, &schedule, &eval, &mut NoObserver).unwrap();
            if zero_first {
                // rebuild task 1 with zero weights, bypassing training
                let mut fresh = tiny_net();
                fresh
                    .begin_task(1, first.fraction, &first.layer_fractions, true, 1)
                    .unwrap();
                let zeros = vec![0.0; fresh.active_param_len(1).unwrap()];
                fresh.set_active_params(1, &zeros).unwrap();
                fresh.freeze_task(1).unwrap();
                net = fresh;
            }
            net.begin_task(2, second.fraction, &second.layer_fractions, false, 1)
                .unwrap();
            let stream = data.train_stream(&second).unwrap();
            let eval = data.eval_set(&second).unwrap();
            train_task(&mut net, &second, &stream, &schedule, &eval, &mut NoObserver).unwrap()
        };
        assert_eq!(run(false), run(true));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let specs = [quick(1, 10.0), quick(2, 20.0), quick(3, 30.0)];
        let data = tiny_data(4);
        let sched = TrainSchedule::desk();
        let mut full_net = tiny_net();
        let full = run_sequence(&mut full_net, &specs, &data, &sched, 9, None, &mut NoObserver).unwrap();

        let mut net = tiny_net();
        let partial = run_sequence(&mut net, &specs[..1], &data, &sched, 9, None, &mut NoObserver).unwrap();
        assert!(run_sequence(&mut net.clone(), &specs, &data, &sched, 9, None, &mut NoObserver).is_err());
        let resumed = run_sequence(&mut net, &specs, &data, &sched, 9, Some(partial), &mut NoObserver).unwrap();
        assert_eq!(resumed, full);
        assert_eq!(net, full_net);
    }

    #[test]
    fn capacity_exhaustion_surfaces_and_rolls_back() {
        let specs = [
            TaskSpec {
                fraction: 0.7,
                ..quick(1, 10.0)
            },
            TaskSpec {
                fraction: 0.7,
                ..quick(2, 20.0)
            },
        ];
        let mut net = tiny_net();
        let err = run_sequence(
            &mut net,
            &specs,
            &tiny_data(1),
            &TrainSchedule::desk(),
            1,
            None,
            &mut NoObserver,
        )
        .unwrap_err();
        assert!(matches!(err, Error::CapacityExhausted { task_id: 2, .. }), "{err}");
        assert_eq!(net.frozen_through(), 1);
        assert_eq!(net.active_task(), None);
    }

    #[test]
    fn empty_eval_set_is_an_error() {
        let net = tiny_net();
        assert!(matches!(
            evaluate(&net, 1, &EvalSet { pairs: vec![] }),
            Err(Error::EmptyEvalSet)
        ));
    }
}
