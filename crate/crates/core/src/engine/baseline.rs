//! Naive sequential fine-tuning: one adapter and one head over every class,
//! trained on each task in turn with cross-entropy on that task alone.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{build_backbone, derive_seed, TrainConfig};
use crate::backbone::{BackboneSurrogate, PeftParams};
use crate::datio::{check_label_structure, EmbeddingDataset, Scenario, TaskStream};
use crate::error::{Error, Result};
use crate::evaluation::AccuracyMatrix;
use crate::numerics::{argmax, AdamState, ParamSet};
use crate::objectives::{wtp_loss, CrConfig, LinearHead, WtpParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaiveBaseline {
    pub config: TrainConfig,
    pub scenario: Scenario,
    pub backbone: BackboneSurrogate,
    pub peft: PeftParams,
    pub head: LinearHead,
    pub class_columns: Vec<u32>,
    pub task_labels: Vec<Vec<u32>>,
}

impl NaiveBaseline {
    pub fn new(config: TrainConfig, scenario: Scenario) -> Result<Self> {
        config.validate()?;
        let backbone = build_backbone(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "adapter-init", 0));
        let peft = PeftParams::fresh(&config.peft, backbone.config(), &mut rng)?;
        let head = LinearHead::zeros(backbone.output_dim(), 0);
        Ok(Self { config, scenario, backbone, peft, head, class_columns: Vec::new(), task_labels: Vec::new() })
    }

    pub fn train_task(&mut self, train: &EmbeddingDataset, labels: &[u32]) -> Result<()> {
        let t = self.task_labels.len();
        let mut sets = self.task_labels.clone();
        sets.push(labels.to_vec());
        check_label_structure(self.scenario, &sets)?;
        if train.is_empty() {
            return Err(Error::Data("task has no training samples".into()));
        }
        for &c in labels {
            if !self.class_columns.contains(&c) {
                self.class_columns.push(c);
                self.head.grow(1);
            }
        }
        self.task_labels.push(labels.to_vec());
        let samples: Vec<(&[f64], usize)> = train
            .samples
            .iter()
            .map(|s| {
                let col = self.class_columns.iter().position(|&c| c == s.class_id);
                col.map(|c| (s.features.as_slice(), c))
                    .ok_or_else(|| Error::Data(format!("sample class {} outside the task's labels", s.class_id)))
            })
            .collect::<Result<_>>()?;

        let mut params = WtpParams { peft: self.peft.clone(), head: self.head.clone() };
        let mut adam = AdamState::new(self.config.learning_rate);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, "batches", t as u64));
        let cr = CrConfig { lambda: 0.0, ..self.config.cr };
        let mut order: Vec<usize> = (0..samples.len()).collect();
        for _ in 0..self.config.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(self.config.batch_size) {
                let batch: Vec<(&[f64], usize)> = chunk.iter().map(|&i| samples[i]).collect();
                let out = wtp_loss(&self.backbone, &params, &batch, &[], &cr)?;
                adam.step(params.params_mut(), &out.bundle)?;
            }
        }
        self.peft = params.peft;
        self.head = params.head;
        Ok(())
    }

    /// Class with the largest logit; under TIL only the given task's
    /// classes compete.
    pub fn predict(&self, x: &[f64], task: Option<usize>) -> Result<u32> {
        if self.class_columns.is_empty() {
            return Err(Error::State("no task has been trained".into()));
        }
        let logits = self.head.logits(&self.backbone.forward_adapted(x, &self.peft)?)?;
        match task {
            None => Ok(self.class_columns[argmax(&logits).expect("nonempty")]),
            Some(i) => {
                let labels = self.task_labels.get(i).ok_or(Error::Index { index: i, len: self.task_labels.len() })?;
                let local: Vec<f64> = labels
                    .iter()
                    .map(|c| logits[self.class_columns.iter().position(|x| x == c).expect("registered")])
                    .collect();
                Ok(labels[argmax(&local).expect("nonempty")])
            }
        }
    }

    pub fn evaluate(&self, test_sets: &[&EmbeddingDataset]) -> Result<Vec<f64>> {
        test_sets
            .iter()
            .enumerate()
            .map(|(i, ds)| {
                if ds.is_empty() {
                    return Err(Error::Data(format!("test set {i} is empty")));
                }
                let task = (self.scenario == Scenario::Til).then_some(i);
                let mut correct = 0usize;
                for s in &ds.samples {
                    correct += usize::from(self.predict(&s.features, task)? == s.class_id);
                }
                Ok(correct as f64 / ds.len() as f64)
            })
            .collect()
    }
}

/// Runs the baseline over a stream, filling the accuracy matrix the same
/// way the main pipeline does.
pub fn train_naive_sequence(stream: &TaskStream, cfg: &TrainConfig) -> Result<(NaiveBaseline, AccuracyMatrix)> {
    stream.validate()?;
    let mut model = NaiveBaseline::new(cfg.clone(), stream.scenario)?;
    let mut m = AccuracyMatrix::new();
    for (t, task) in stream.tasks.iter().enumerate() {
        model.train_task(&task.train, &task.labels)?;
        let tests: Vec<&EmbeddingDataset> = stream.tasks[..=t].iter().map(|d| &d.test).collect();
        m.push_row(model.evaluate(&tests)?)?;
    }
    Ok((model, m))
}
