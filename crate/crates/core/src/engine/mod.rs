//! Sequential task training over a frozen backbone, two-stage inference and
//! the per-task evaluation loop.

pub mod baseline;
pub mod fewshot;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{init_backbone, init_peft, BackboneConfig, BackboneSurrogate, PeftConfig, PeftKind, PeftParams};
use crate::datio::{check_label_structure, Scenario, TaskData, TaskStream};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_scenario, AccuracyMatrix};
use crate::numerics::{argmax, softmax, AdamState, ParamSet, Tensor2};
use crate::objectives::{tap_loss, tii_loss, wtp_loss, CrConfig, HeadParams, LinearHead, PseudoBatch, WtpParams};
use crate::statistics::{fit_class_statistics, sample_pseudo, stack, NoisePolicy, StatStore};

/// When the task-adaptive head is optimised within a task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapSchedule {
    /// After the within-task and task-identity steps of every epoch.
    PerEpoch,
    /// Only after the last epoch, for the same number of passes.
    PostHoc,
}

/// Output columns the within-task loss normalises over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WtpSoftmax {
    /// Only the current task's classes.
    TaskLocal,
    /// Every class observed so far.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub peft: PeftConfig,
    /// Centroids per class (K).
    pub centroids: usize,
    pub noise: NoisePolicy,
    /// Pseudo representations drawn per class and epoch.
    pub pseudo_per_class: usize,
    /// Pseudo representations per class in one head minibatch.
    pub pseudo_batch_per_class: usize,
    pub cr: CrConfig,
    pub tap_schedule: TapSchedule,
    pub wtp_softmax: WtpSoftmax,
    /// Train a dataset-shared LoRA alongside the task adapters.
    pub shared_lora: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            learning_rate: 0.005,
            seed: 0,
            backbone: BackboneConfig::default(),
            peft: PeftConfig::default(),
            centroids: 5,
            noise: NoisePolicy::WithinClusterStd,
            pseudo_per_class: 64,
            pseudo_batch_per_class: 4,
            cr: CrConfig::default(),
            tap_schedule: TapSchedule::PerEpoch,
            wtp_softmax: WtpSoftmax::TaskLocal,
            shared_lora: true,
        }
    }
}

impl TrainConfig {
    /// Small-scale defaults (20 epochs, batch 32).
    pub fn desk() -> Self {
        Self::default()
    }

    /// The full-scale schedule: 50 epochs, batch 128.
    pub fn paper() -> Self {
        Self { epochs: 50, batch_size: 128, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("centroids", self.centroids),
            ("pseudo_per_class", self.pseudo_per_class),
            ("pseudo_batch_per_class", self.pseudo_batch_per_class),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if self.pseudo_batch_per_class > self.pseudo_per_class {
            return Err(Error::Config("pseudo_batch_per_class exceeds pseudo_per_class".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be > 0", self.learning_rate)));
        }
        self.backbone.validate()?;
        self.cr.validate()?;
        if let NoisePolicy::Fixed(s) = self.noise {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("noise sigma {s} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    fn shared_peft_config(&self) -> PeftConfig {
        PeftConfig { kind: PeftKind::Lora, ..self.peft.clone() }
    }
}

/// A LoRA shared by every task of one upstream dataset, trained by plain
/// sequential fine-tuning with its own head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedAdapter {
    pub dataset: String,
    pub peft: PeftParams,
    pub head: LinearHead,
    /// Class id of each head column.
    pub class_columns: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub config: TrainConfig,
    pub scenario: Scenario,
    pub backbone: BackboneSurrogate,
    pub peft_per_task: Vec<PeftParams>,
    pub task_labels: Vec<Vec<u32>>,
    pub task_datasets: Vec<String>,
    /// Class id of each TAP output column.
    pub class_columns: Vec<u32>,
    pub heads: HeadParams,
    pub stats: StatStore,
    pub shared: Vec<SharedAdapter>,
    /// Rows filled in by [`continue_sequence`].
    pub accuracy: AccuracyMatrix,
}

/// Mixes a tag and index into a base seed (splitmix64 finaliser).
pub fn derive_seed(seed: u64, tag: &str, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    mix(seed ^ mix(h ^ mix(index)))
}

/// Backbone shared by every pipeline built from `cfg`.
pub fn build_backbone(cfg: &TrainConfig) -> Result<BackboneSurrogate> {
    init_backbone(derive_seed(cfg.seed, "backbone", 0), &cfg.backbone)
}

impl ModelState {
    pub fn new(config: TrainConfig, scenario: Scenario) -> Result<Self> {
        config.validate()?;
        let backbone = build_backbone(&config)?;
        let heads = HeadParams::new(backbone.output_dim());
        Ok(Self {
            config,
            scenario,
            backbone,
            peft_per_task: Vec::new(),
            task_labels: Vec::new(),
            task_datasets: Vec::new(),
            class_columns: Vec::new(),
            heads,
            stats: StatStore::new(),
            shared: Vec::new(),
            accuracy: AccuracyMatrix::new(),
        })
    }

    /// Tasks trained so far.
    pub fn tasks(&self) -> usize {
        self.peft_per_task.len()
    }

    pub fn column_of(&self, class_id: u32) -> Option<usize> {
        self.class_columns.iter().position(|&c| c == class_id)
    }

    /// TAP columns of a task's classes.
    pub fn task_columns(&self, task: usize) -> Result<Vec<usize>> {
        let labels = self.task_labels.get(task).ok_or(Error::Index { index: task, len: self.task_labels.len() })?;
        labels
            .iter()
            .map(|&c| self.column_of(c).ok_or_else(|| Error::State(format!("class {c} has no output column"))))
            .collect()
    }

    /// Structural consistency of a loaded or resumed state.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let t = self.tasks();
        if self.task_labels.len() != t || self.task_datasets.len() != t {
            return Err(Error::State("task bookkeeping lengths disagree".into()));
        }
        if self.heads.tii.outputs() != t || self.heads.tap.outputs() != self.class_columns.len() {
            return Err(Error::State("head widths disagree with the task and class counts".into()));
        }
        let d = self.backbone.output_dim();
        if self.heads.tii.input_dim() != d || self.heads.tap.input_dim() != d {
            return Err(Error::State("head input width differs from the representation width".into()));
        }
        for p in &self.peft_per_task {
            p.check_compatible(self.backbone.config())?;
        }
        for s in &self.shared {
            s.peft.check_compatible(self.backbone.config())?;
            if s.head.outputs() != s.class_columns.len() {
                return Err(Error::State(format!("shared head for {} has the wrong width", s.dataset)));
            }
        }
        if self.accuracy.tasks() > t {
            return Err(Error::State("accuracy matrix has more rows than trained tasks".into()));
        }
        Ok(())
    }
}

/// Progress records, emitted in the order the work happens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    TaskStart { task: usize, classes: Vec<u32> },
    FitUnadapted { task: usize, class_id: u32 },
    AdapterInit { task: usize, copied_from_previous: bool },
    EpochEnd { task: usize, epoch: usize, wtp_loss: f64, tii_loss: f64, tap_loss: Option<f64> },
    FitAdapted { task: usize, class_id: u32 },
    TaskEnd { task: usize },
    Evaluated { task: usize, accuracies: Vec<f64> },
}

/// Training samples of one task grouped by class, in label order.
fn group_by_class<'a>(task: &'a TaskData) -> Result<Vec<(u32, Vec<&'a [f64]>)>> {
    let mut groups: BTreeMap<u32, Vec<&[f64]>> = task.labels.iter().map(|&c| (c, Vec::new())).collect();
    for s in &task.train.samples {
        groups
            .get_mut(&s.class_id)
            .ok_or_else(|| Error::Data(format!("training sample of class {} outside the task's labels", s.class_id)))?
            .push(&s.features);
    }
    if let Some((c, _)) = groups.iter().find(|(_, v)| v.is_empty()) {
        return Err(Error::Data(format!("class {c} has no training samples")));
    }
    Ok(groups.into_iter().collect())
}

fn minibatch_steps(per_class: usize, batch_per_class: usize) -> usize {
    per_class.div_ceil(batch_per_class)
}

/// Row block `[start, end)` of every pseudo batch.
fn slice_batches(batches: &[PseudoBatch], start: usize, end: usize) -> Vec<PseudoBatch> {
    batches
        .iter()
        .map(|b| PseudoBatch { task: b.task, class_col: b.class_col, reps: b.reps.slice_rows(start, end) })
        .collect()
}

fn head_passes<H: ParamSet>(
    head: &mut H,
    adam: &mut AdamState,
    batches: &[PseudoBatch],
    per_class: usize,
    batch_per_class: usize,
    loss: fn(&H, &[PseudoBatch]) -> Result<crate::numerics::GradBundle>,
) -> Result<f64> {
    let mut last = 0.0;
    for s in 0..minibatch_steps(per_class, batch_per_class) {
        let start = s * batch_per_class;
        let end = (start + batch_per_class).min(per_class);
        let mb = slice_batches(batches, start, end);
        let g = loss(head, &mb)?;
        last = g.loss / (end - start) as f64;
        adam.step(head.params_mut(), &g)?;
    }
    Ok(last)
}

/// `n` rows drawn with replacement.
fn resample_rows(rows: &[Vec<f64>], n: usize, rng: &mut ChaCha8Rng) -> Result<Tensor2> {
    let picked: Vec<Vec<f64>> = (0..n).map(|_| rows[rng.random_range(0..rows.len())].clone()).collect();
    stack(&picked)
}

/// One pass of the task-adaptive head over pseudo representations of old
/// classes and resampled current representations.
#[allow(clippy::too_many_arguments)]
fn tap_epoch(
    state: &mut ModelState,
    task: usize,
    peft: &PeftParams,
    groups: &[(u32, Vec<&[f64]>)],
    adam: &mut AdamState,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let cfg = &state.config;
    let p = cfg.pseudo_per_class;
    let mut batches = Vec::new();
    for e in state.stats.entries().iter().filter(|e| e.task < task) {
        let adapted = e.adapted.as_ref().ok_or_else(|| {
            Error::State(format!("task {} class {} lacks adapted statistics", e.task, e.class_id))
        })?;
        let col = state.column_of(e.class_id).ok_or_else(|| Error::State(format!("class {} has no column", e.class_id)))?;
        batches.push(PseudoBatch { task: e.task, class_col: col, reps: sample_pseudo(adapted, p, rng)? });
    }
    for (c, xs) in groups {
        let reps: Vec<Vec<f64>> = xs.iter().map(|x| state.backbone.forward_adapted(x, peft)).collect::<Result<_>>()?;
        let col = state.column_of(*c).expect("registered before training");
        batches.push(PseudoBatch { task, class_col: col, reps: resample_rows(&reps, p, rng)? });
    }
    let bpc = cfg.pseudo_batch_per_class;
    head_passes(&mut state.heads.tap, adam, &batches, p, bpc, tap_loss)
}

/// The adapter task `t` starts from: a copy of `e_{t−1}`, or a fresh
/// initialisation for the first task.
pub fn initial_peft(state: &ModelState) -> Result<PeftParams> {
    let t = state.tasks();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(state.config.seed, "adapter-init", t as u64));
    init_peft(&state.config.peft, state.backbone.config(), state.peft_per_task.last(), &mut rng)
}

/// Trains one task in place. On error the state is left untouched.
pub fn train_task(state: &mut ModelState, task: &TaskData, dataset: &str, sink: &mut dyn FnMut(&Event)) -> Result<()> {
    let mut next = state.clone();
    train_task_inner(&mut next, task, dataset, sink)?;
    *state = next;
    Ok(())
}

fn train_task_inner(state: &mut ModelState, task: &TaskData, dataset: &str, sink: &mut dyn FnMut(&Event)) -> Result<()> {
    let t = state.tasks();
    let cfg = state.config.clone();
    let bb_cfg = state.backbone.config().clone();
    if task.train.dim != bb_cfg.input_dim {
        return Err(Error::Dimension(format!(
            "task features have width {}, backbone expects {}",
            task.train.dim, bb_cfg.input_dim
        )));
    }
    let mut labels = task.labels.clone();
    labels.sort_unstable();
    labels.dedup();
    if labels.is_empty() || labels.len() != task.labels.len() {
        return Err(Error::Data("task label set is empty or has duplicates".into()));
    }
    let mut sets = state.task_labels.clone();
    sets.push(labels.clone());
    check_label_structure(state.scenario, &sets)?;
    let groups = group_by_class(task)?;
    sink(&Event::TaskStart { task: t, classes: labels.clone() });

    // heads grow before the first epoch
    for &c in &labels {
        if state.column_of(c).is_none() {
            state.class_columns.push(c);
            state.heads.tap.grow(1);
        }
    }
    let new_cols: Vec<usize> = labels.iter().map(|&c| state.column_of(c).expect("registered")).collect();
    state.heads.tii.add_task(&new_cols)?;
    state.task_labels.push(labels.clone());
    state.task_datasets.push(dataset.to_string());

    // unadapted statistics
    for (c, xs) in &groups {
        let reps: Vec<Vec<f64>> = xs.iter().map(|x| state.backbone.forward_unadapted(x)).collect::<Result<_>>()?;
        let k = cfg.centroids.min(reps.len());
        let seed = derive_seed(cfg.seed, "stats-unadapted", ((t as u64) << 32) | u64::from(*c));
        let stats = fit_class_statistics(&stack(&reps)?, k, cfg.noise, seed, *c, t)?;
        let slot = state.heads.tii.slot_of(t, state.column_of(*c).expect("registered")).expect("slot added");
        state.heads.tii.imprint(slot, &stats.mean, stats.noise_sigma)?;
        state.stats.insert_unadapted(stats)?;
        sink(&Event::FitUnadapted { task: t, class_id: *c });
    }

    let peft = initial_peft(state)?;
    sink(&Event::AdapterInit { task: t, copied_from_previous: t > 0 });

    let cols_t = state.task_columns(t)?;
    let (wtp_cols, wtp_target): (Vec<usize>, Box<dyn Fn(u32) -> usize>) = match cfg.wtp_softmax {
        WtpSoftmax::TaskLocal => {
            let l = labels.clone();
            (cols_t.clone(), Box::new(move |c| l.binary_search(&c).expect("task class")))
        }
        WtpSoftmax::Global => {
            let cc = state.class_columns.clone();
            ((0..cc.len()).collect(), Box::new(move |c| cc.iter().position(|&x| x == c).expect("registered")))
        }
    };
    let mut wtp = WtpParams { peft, head: state.heads.tap.select_columns(&wtp_cols)? };

    // shared adapter of this dataset
    let shared_idx = if cfg.shared_lora {
        let idx = match state.shared.iter().position(|s| s.dataset == dataset) {
            Some(i) => i,
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "shared-init", t as u64));
                state.shared.push(SharedAdapter {
                    dataset: dataset.to_string(),
                    peft: PeftParams::fresh(&cfg.shared_peft_config(), &bb_cfg, &mut rng)?,
                    head: LinearHead::zeros(state.backbone.output_dim(), 0),
                    class_columns: Vec::new(),
                });
                state.shared.len() - 1
            }
        };
        let sh = &mut state.shared[idx];
        for &c in &labels {
            if !sh.class_columns.contains(&c) {
                sh.class_columns.push(c);
                sh.head.grow(1);
            }
        }
        Some(idx)
    } else {
        None
    };
    let mut shared = shared_idx.map(|i| {
        let s = &state.shared[i];
        (WtpParams { peft: s.peft.clone(), head: s.head.clone() }, s.class_columns.clone())
    });

    let old_means: Vec<Vec<f64>> = state
        .stats
        .entries()
        .iter()
        .filter(|e| e.task < t)
        .map(|e| {
            e.adapted
                .as_ref()
                .map(|a| a.mean.clone())
                .ok_or_else(|| Error::State(format!("task {} class {} lacks adapted statistics", e.task, e.class_id)))
        })
        .collect::<Result<_>>()?;

    let samples: Vec<(&[f64], u32)> = groups.iter().flat_map(|(c, xs)| xs.iter().map(move |x| (*x, *c))).collect();
    let mut adam_wtp = AdamState::new(cfg.learning_rate);
    let mut adam_tii = AdamState::new(cfg.learning_rate);
    let mut adam_tap = AdamState::new(cfg.learning_rate);
    let mut adam_shared = AdamState::new(cfg.learning_rate);
    let mut rng_batch = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "batches", t as u64));
    let mut rng_pseudo = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "pseudo", t as u64));
    let no_cr = CrConfig { lambda: 0.0, ..cfg.cr };
    let p = cfg.pseudo_per_class;
    let bpc = cfg.pseudo_batch_per_class;

    let write_back = |state: &mut ModelState, head: &LinearHead| -> Result<()> {
        state.heads.tap.assign_columns(&wtp_cols, head)
    };

    for epoch in 0..cfg.epochs {
        // within-task prediction on (e_t, ψ)
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng_batch);
        let mut wtp_total = 0.0;
        let mut wtp_batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&[f64], usize)> = chunk.iter().map(|&i| (samples[i].0, wtp_target(samples[i].1))).collect();
            let out = wtp_loss(&state.backbone, &wtp, &batch, &old_means, &cfg.cr)?;
            wtp_total += out.bundle.loss;
            wtp_batches += 1;
            adam_wtp.step(wtp.params_mut(), &out.bundle)?;
        }
        write_back(state, &wtp.head)?;

        if let Some((params, cols)) = shared.as_mut() {
            order.shuffle(&mut rng_batch);
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<(&[f64], usize)> = chunk
                    .iter()
                    .map(|&i| (samples[i].0, cols.iter().position(|&c| c == samples[i].1).expect("registered")))
                    .collect();
                let out = wtp_loss(&state.backbone, params, &batch, &[], &no_cr)?;
                adam_shared.step(params.params_mut(), &out.bundle)?;
            }
        }

        // task-identity inference from unadapted pseudo representations
        let mut tii_batches = Vec::new();
        for e in state.stats.entries() {
            let col = state.column_of(e.class_id).expect("registered");
            tii_batches.push(PseudoBatch { task: e.task, class_col: col, reps: sample_pseudo(&e.unadapted, p, &mut rng_pseudo)? });
        }
        let tii = head_passes(&mut state.heads.tii, &mut adam_tii, &tii_batches, p, bpc, tii_loss)?;

        let tap = if cfg.tap_schedule == TapSchedule::PerEpoch {
            let l = tap_epoch(state, t, &wtp.peft, &groups, &mut adam_tap, &mut rng_pseudo)?;
            wtp.head = state.heads.tap.select_columns(&wtp_cols)?;
            Some(l)
        } else {
            None
        };
        sink(&Event::EpochEnd { task: t, epoch, wtp_loss: wtp_total / wtp_batches as f64, tii_loss: tii, tap_loss: tap });
    }

    if cfg.tap_schedule == TapSchedule::PostHoc {
        for _ in 0..cfg.epochs {
            tap_epoch(state, t, &wtp.peft, &groups, &mut adam_tap, &mut rng_pseudo)?;
        }
    }

    // adapted statistics after the last epoch
    for (c, xs) in &groups {
        let reps: Vec<Vec<f64>> = xs.iter().map(|x| state.backbone.forward_adapted(x, &wtp.peft)).collect::<Result<_>>()?;
        let k = cfg.centroids.min(reps.len());
        let seed = derive_seed(cfg.seed, "stats-adapted", ((t as u64) << 32) | u64::from(*c));
        let stats = fit_class_statistics(&stack(&reps)?, k, cfg.noise, seed, *c, t)?;
        state.stats.insert_adapted(stats)?;
        sink(&Event::FitAdapted { task: t, class_id: *c });
    }

    if let (Some(i), Some((params, _))) = (shared_idx, shared) {
        state.shared[i].peft = params.peft;
        state.shared[i].head = params.head;
    }
    state.peft_per_task.push(wtp.peft);
    sink(&Event::TaskEnd { task: t });
    Ok(())
}

/// Label used for the stream's shared adapter.
pub const DEFAULT_DATASET: &str = "stream";

/// Trains the remaining tasks of `stream` (from `state.tasks()` up to, not
/// including, `stop_at`), evaluating all seen test sets after each task.
pub fn continue_sequence(
    state: &mut ModelState,
    stream: &TaskStream,
    stop_at: Option<usize>,
    sink: &mut dyn FnMut(&Event),
) -> Result<AccuracyMatrix> {
    stream.validate()?;
    if stream.scenario != state.scenario {
        return Err(Error::Scenario(format!("stream is {} but the model was set up for {}", stream.scenario, state.scenario)));
    }
    let end = stop_at.unwrap_or(stream.len()).min(stream.len());
    for (t, task) in stream.tasks.iter().enumerate().take(end).skip(state.tasks()) {
        train_task(state, task, DEFAULT_DATASET, sink)?;
        let tests: Vec<_> = stream.tasks[..=t].iter().map(|d| &d.test).collect();
        let row = evaluate_scenario(state, &tests, stream.scenario)?;
        sink(&Event::Evaluated { task: t, accuracies: row.clone() });
        state.accuracy.push_row(row)?;
    }
    Ok(state.accuracy.clone())
}

/// Trains a fresh model over the whole stream.
pub fn train_sequence(stream: &TaskStream, cfg: &TrainConfig, sink: &mut dyn FnMut(&Event)) -> Result<(ModelState, AccuracyMatrix)> {
    if stream.is_empty() {
        return Err(Error::Data("task stream is empty".into()));
    }
    let mut state = ModelState::new(cfg.clone(), stream.scenario)?;
    let m = continue_sequence(&mut state, stream, None, sink)?;
    Ok((state, m))
}

/// Two-stage prediction with both probability vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub task: usize,
    pub class_id: u32,
    /// Softmax of the task-identity head over tasks.
    pub tii_probs: Vec<f64>,
    /// Softmax of the task-adaptive head over every class column, applied
    /// to the representation adapted by the predicted task.
    pub tap_probs: Vec<f64>,
}

fn require_trained(state: &ModelState) -> Result<()> {
    if state.tasks() == 0 {
        return Err(Error::State("no task has been trained".into()));
    }
    Ok(())
}

/// `softmax(ω(f_θ(x)))`
pub fn tii_probs(state: &ModelState, x: &[f64]) -> Result<Vec<f64>> {
    require_trained(state)?;
    softmax(&state.heads.tii.logits(&state.backbone.forward_unadapted(x)?)?)
}

/// Task identity first, then the class among every observed class.
pub fn predict(state: &ModelState, x: &[f64]) -> Result<Prediction> {
    let tii = tii_probs(state, x)?;
    let task = argmax(&tii).expect("nonempty");
    let h = state.backbone.forward_adapted(x, &state.peft_per_task[task])?;
    let tap = softmax(&state.heads.tap.logits(&h)?)?;
    let col = argmax(&tap).expect("nonempty");
    Ok(Prediction { task, class_id: state.class_columns[col], tii_probs: tii, tap_probs: tap })
}

/// Prediction with a known task: its adapter and its own classes only.
pub fn predict_given_task(state: &ModelState, x: &[f64], task: usize) -> Result<(u32, Vec<f64>)> {
    require_trained(state)?;
    let peft = state.peft_per_task.get(task).ok_or(Error::Index { index: task, len: state.tasks() })?;
    let cols = state.task_columns(task)?;
    let h = state.backbone.forward_adapted(x, peft)?;
    let logits = state.heads.tap.logits(&h)?;
    let local: Vec<f64> = cols.iter().map(|&c| logits[c]).collect();
    let probs = softmax(&local)?;
    Ok((state.task_labels[task][argmax(&probs).expect("nonempty")], probs))
}

/// Class distribution marginalised over tasks, weighted by the
/// task-identity probabilities.
pub fn predict_marginal(state: &ModelState, x: &[f64]) -> Result<(u32, Vec<f64>)> {
    let tii = tii_probs(state, x)?;
    let mut mix = vec![0.0; state.class_columns.len()];
    for (i, w) in tii.iter().enumerate() {
        let h = state.backbone.forward_adapted(x, &state.peft_per_task[i])?;
        let p = softmax(&state.heads.tap.logits(&h)?)?;
        for (m, v) in mix.iter_mut().zip(&p) {
            *m += w * v;
        }
    }
    Ok((state.class_columns[argmax(&mix).expect("nonempty")], mix))
}
