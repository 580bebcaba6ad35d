//! Embedding files, synthetic task streams, run configuration and
//! versioned state persistence.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::engine::{ModelState, TrainConfig};
use crate::error::{Error, Result};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"HIDE";
pub const EMBEDDING_VERSION: u16 = 1;
const HEADER_LEN: u64 = 4 + 2 + 4 + 4 + 4;

pub const STATE_FORMAT: &str = "hcl-model-state";
pub const STATE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Cil,
    Dil,
    Til,
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cil" => Ok(Scenario::Cil),
            "dil" => Ok(Scenario::Dil),
            "til" => Ok(Scenario::Til),
            other => Err(Error::Config(format!("unknown scenario {other:?} (expected cil, dil or til)"))),
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scenario::Cil => "cil",
            Scenario::Dil => "dil",
            Scenario::Til => "til",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub class_id: u32,
    pub task_id: u32,
    pub features: Vec<f64>,
}

/// Labelled embedding vectors. Features are held as f64 but always carry
/// values representable in f32.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingDataset {
    pub dim: usize,
    pub class_count: u32,
    pub samples: Vec<Sample>,
}

impl EmbeddingDataset {
    pub fn new(dim: usize, class_count: u32) -> Self {
        Self { dim, class_count, samples: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn push(&mut self, sample: Sample) -> Result<()> {
        if sample.features.len() != self.dim {
            return Err(Error::Dimension(format!(
                "sample has {} features, dataset dim is {}",
                sample.features.len(),
                self.dim
            )));
        }
        if sample.class_id >= self.class_count {
            return Err(Error::Data(format!("class id {} >= class count {}", sample.class_id, self.class_count)));
        }
        self.samples.push(sample);
        Ok(())
    }

    /// Distinct class ids in ascending order.
    pub fn classes(&self) -> Vec<u32> {
        self.samples.iter().map(|s| s.class_id).collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn filter(&self, keep: impl Fn(&Sample) -> bool) -> EmbeddingDataset {
        EmbeddingDataset {
            dim: self.dim,
            class_count: self.class_count,
            samples: self.samples.iter().filter(|s| keep(s)).cloned().collect(),
        }
    }
}

/// Serialises a dataset into the embedding file layout.
pub fn encode_embeddings(ds: &EmbeddingDataset) -> Result<Vec<u8>> {
    let dim = u32::try_from(ds.dim).map_err(|_| Error::Data("dim exceeds u32".into()))?;
    let count = u32::try_from(ds.samples.len()).map_err(|_| Error::Data("sample count exceeds u32".into()))?;
    let mut out = Vec::with_capacity(HEADER_LEN as usize + ds.samples.len() * (8 + 4 * ds.dim));
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&ds.class_count.to_le_bytes());
    for s in &ds.samples {
        if s.features.len() != ds.dim {
            return Err(Error::Dimension(format!("sample has {} features, dataset dim is {}", s.features.len(), ds.dim)));
        }
        if s.class_id >= ds.class_count {
            return Err(Error::Data(format!("class id {} >= class count {}", s.class_id, ds.class_count)));
        }
        out.extend_from_slice(&s.class_id.to_le_bytes());
        out.extend_from_slice(&s.task_id.to_le_bytes());
        for &v in &s.features {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

fn format_err(offset: u64, message: impl Into<String>) -> Error {
    Error::Format { offset, message: message.into() }
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// Parses the embedding file layout; any deviation is reported with the
/// byte offset where it was detected.
pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingDataset> {
    let len = bytes.len() as u64;
    if len < 4 || &bytes[..4] != EMBEDDING_MAGIC {
        return Err(format_err(0, "bad magic (expected \"HIDE\")"));
    }
    if len < HEADER_LEN {
        return Err(format_err(len, format!("truncated header: {len} of {HEADER_LEN} bytes")));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != EMBEDDING_VERSION {
        return Err(Error::Version { found: version.into(), supported: EMBEDDING_VERSION.into() });
    }
    let dim = read_u32(bytes, 6);
    let count = read_u32(bytes, 10);
    let class_count = read_u32(bytes, 14);
    if dim == 0 {
        return Err(format_err(6, "dim must be >= 1"));
    }
    let record_len = 8 + 4 * u64::from(dim);
    let expected = HEADER_LEN + u64::from(count) * record_len;
    if len < expected {
        let complete = (len - HEADER_LEN) / record_len;
        return Err(format_err(
            HEADER_LEN + complete * record_len,
            format!("truncated: header declares {count} records, payload holds {complete}"),
        ));
    }
    if len > expected {
        return Err(format_err(expected, format!("{} trailing bytes after {count} records", len - expected)));
    }

    let dim = dim as usize;
    let mut ds = EmbeddingDataset { dim, class_count, samples: Vec::with_capacity(count as usize) };
    let mut at = HEADER_LEN as usize;
    for _ in 0..count {
        let class_id = read_u32(bytes, at);
        if class_id >= class_count {
            return Err(format_err(at as u64, format!("class id {class_id} >= class count {class_count}")));
        }
        let task_id = read_u32(bytes, at + 4);
        at += 8;
        let mut features = Vec::with_capacity(dim);
        for _ in 0..dim {
            let v = f32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
            if !v.is_finite() {
                return Err(format_err(at as u64, "non-finite feature value"));
            }
            features.push(f64::from(v));
            at += 4;
        }
        ds.samples.push(Sample { class_id, task_id, features });
    }
    Ok(ds)
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingDataset> {
    decode_embeddings(&fs::read(path)?)
}

pub fn save_embeddings(ds: &EmbeddingDataset, path: &Path) -> Result<()> {
    write_atomic(path, &encode_embeddings(ds)?)
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = path.file_name().ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Train and test data of one task plus its label set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskData {
    pub train: EmbeddingDataset,
    pub test: EmbeddingDataset,
    pub labels: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub scenario: Scenario,
    pub tasks: Vec<TaskData>,
}

/// Checks the label-set structure a scenario demands.
pub fn check_label_structure(scenario: Scenario, label_sets: &[Vec<u32>]) -> Result<()> {
    match scenario {
        Scenario::Cil | Scenario::Til => {
            let mut seen = BTreeSet::new();
            for (t, labels) in label_sets.iter().enumerate() {
                for l in labels {
                    if !seen.insert(*l) {
                        return Err(Error::Scenario(format!(
                            "{scenario} needs disjoint label sets but class {l} reappears in task {t}"
                        )));
                    }
                }
            }
        }
        Scenario::Dil => {
            if let Some(first) = label_sets.first() {
                let first: BTreeSet<_> = first.iter().collect();
                for (t, labels) in label_sets.iter().enumerate().skip(1) {
                    if labels.iter().collect::<BTreeSet<_>>() != first {
                        return Err(Error::Scenario(format!("dil needs identical label sets but task {t} differs")));
                    }
                }
            }
        }
    }
    Ok(())
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.tasks.first().map(|t| t.train.dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Data("task stream is empty".into()));
        }
        let dim = self.tasks[0].train.dim;
        for (t, task) in self.tasks.iter().enumerate() {
            if task.train.dim != dim || task.test.dim != dim {
                return Err(Error::Dimension(format!("task {t} has a different feature dimension")));
            }
            if task.train.is_empty() {
                return Err(Error::Data(format!("task {t} has no training samples")));
            }
            if task.train.classes() != task.labels {
                return Err(Error::Data(format!("task {t} label set does not match its training samples")));
            }
            if let Some(s) = task.test.samples.iter().find(|s| task.labels.binary_search(&s.class_id).is_err()) {
                return Err(Error::Data(format!("task {t} test sample has class {} outside its label set", s.class_id)));
            }
        }
        let sets: Vec<Vec<u32>> = self.tasks.iter().map(|t| t.labels.clone()).collect();
        check_label_structure(self.scenario, &sets)
    }

    /// Regroups flat train/test files by their `task_id` field; tasks must
    /// be numbered `0..T` without gaps.
    pub fn from_datasets(train: &EmbeddingDataset, test: &EmbeddingDataset, scenario: Scenario) -> Result<Self> {
        if train.dim != test.dim {
            return Err(Error::Dimension(format!("train dim {} vs test dim {}", train.dim, test.dim)));
        }
        let ids: BTreeSet<u32> = train.samples.iter().map(|s| s.task_id).collect();
        let count = ids.len();
        if ids.iter().enumerate().any(|(i, &t)| i as u32 != t) {
            return Err(Error::Data("task ids must run 0..T without gaps".into()));
        }
        if let Some(s) = test.samples.iter().find(|s| s.task_id as usize >= count) {
            return Err(Error::Data(format!("test sample names task {} but training data has {count} tasks", s.task_id)));
        }
        let tasks = (0..count as u32)
            .map(|t| {
                let tr = train.filter(|s| s.task_id == t);
                let labels = tr.classes();
                TaskData { train: tr, test: test.filter(|s| s.task_id == t), labels }
            })
            .collect();
        let stream = TaskStream { scenario, tasks };
        stream.validate()?;
        Ok(stream)
    }

    /// Flattens the stream back into one train and one test dataset.
    pub fn to_datasets(&self) -> (EmbeddingDataset, EmbeddingDataset) {
        let dim = self.dim().unwrap_or(0);
        let class_count = self.tasks.iter().map(|t| t.train.class_count).max().unwrap_or(0);
        let mut train = EmbeddingDataset::new(dim, class_count);
        let mut test = EmbeddingDataset::new(dim, class_count);
        for t in &self.tasks {
            train.samples.extend(t.train.samples.iter().cloned());
            test.samples.extend(t.test.samples.iter().cloned());
        }
        (train, test)
    }
}

/// Shape of a synthetic stream. Every `(task, class)` cluster gets its own
/// mean of norm `separation · noise_std`. When the means fit, they are
/// mutually orthogonal, so any two lie `√2 · separation · noise_std` apart.
/// Otherwise they are random directions at least 60° apart, so any two lie
/// more than `separation · noise_std` apart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub tasks: usize,
    pub classes_per_task: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    /// Mean norm in units of `noise_std`.
    pub separation: f64,
    pub noise_std: f64,
    pub scenario: Scenario,
    pub train_fraction: f64,
    /// Extra classes never used by the stream, kept for few-shot episodes.
    pub holdout_classes: usize,
    /// When set, means live in the first `k` coordinates and the remaining
    /// ones carry pure noise with `nuisance_std`. With fewer coordinates
    /// than clusters, stream and holdout classes share one subspace.
    pub informative_dims: Option<usize>,
    pub nuisance_std: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            tasks: 10,
            classes_per_task: 2,
            dim: 64,
            samples_per_class: 100,
            separation: 4.0,
            noise_std: 1.0,
            scenario: Scenario::Cil,
            train_fraction: 0.8,
            holdout_classes: 0,
            informative_dims: None,
            nuisance_std: 1.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("tasks", self.tasks),
            ("classes_per_task", self.classes_per_task),
            ("dim", self.dim),
            ("samples_per_class", self.samples_per_class),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return Err(Error::Config(format!("separation {} must be finite and >= 0", self.separation)));
        }
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) || !(self.nuisance_std >= 0.0 && self.nuisance_std.is_finite()) {
            return Err(Error::Config("noise scales must be finite and positive".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::Config(format!("train_fraction {} must lie in (0, 1]", self.train_fraction)));
        }
        if self.scenario == Scenario::Dil && self.holdout_classes > 0 {
            return Err(Error::Config("holdout classes are only defined for disjoint label sets".into()));
        }
        let span = self.informative_dims.unwrap_or(self.dim);
        if span == 0 || span > self.dim {
            return Err(Error::Config(format!("informative_dims {span} must lie in 1..={}", self.dim)));
        }
        if self.cluster_count() > span && span < 2 {
            return Err(Error::Config(format!("{} clusters cannot share one dimension", self.cluster_count())));
        }
        Ok(())
    }

    fn cluster_count(&self) -> usize {
        self.tasks * self.classes_per_task + self.holdout_classes
    }

    /// Number of distinct labels across the stream and holdout.
    pub fn label_count(&self) -> usize {
        match self.scenario {
            Scenario::Dil => self.classes_per_task,
            _ => self.tasks * self.classes_per_task + self.holdout_classes,
        }
    }
}

/// Generated stream plus, when requested, holdout classes (tagged with
/// task id `T`).
#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub stream: TaskStream,
    pub holdout: Option<EmbeddingDataset>,
}

/// `count` orthonormal vectors spanning part of the first `span` coordinates.
fn orthonormal_directions(count: usize, span: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|i| if i < span { normal.sample(rng) } else { 0.0 }).collect();
        for _ in 0..2 {
            for b in &basis {
                let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= p * y;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    basis
}

/// Random unit vectors in the first `span` coordinates, each more than 60°
/// from all earlier ones.
fn spread_directions(count: usize, span: usize, dim: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut found = None;
        for _ in 0..10_000 {
            let mut v: Vec<f64> = (0..dim).map(|i| if i < span { normal.sample(rng) } else { 0.0 }).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-6 {
                continue;
            }
            v.iter_mut().for_each(|x| *x /= norm);
            if out.iter().all(|b| b.iter().zip(&v).map(|(x, y)| x * y).sum::<f64>() < 0.5) {
                found = Some(v);
                break;
            }
        }
        out.push(found.ok_or_else(|| Error::Config(format!("cannot spread {count} means over {span} dimensions")))?);
    }
    Ok(out)
}

fn quantize(v: f64) -> f64 {
    f64::from(v as f32)
}

/// Seeded Gaussian clusters arranged as a task stream.
pub fn synth_stream(seed: u64, spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span = spec.informative_dims.unwrap_or(spec.dim);
    let count = spec.cluster_count();
    let directions = if count <= span {
        orthonormal_directions(count, span, spec.dim, &mut rng)
    } else {
        spread_directions(count, span, spec.dim, &mut rng)?
    };
    let radius = spec.separation * spec.noise_std;
    let signal = Normal::new(0.0, spec.noise_std).expect("validated");
    let nuisance = Normal::new(0.0, spec.nuisance_std).expect("validated");
    let class_count = spec.label_count() as u32;
    let n_train = ((spec.samples_per_class as f64 * spec.train_fraction).round() as usize).clamp(1, spec.samples_per_class);

    let cluster = |dir: &[f64], rng: &mut ChaCha8Rng, class_id: u32, task_id: u32| -> (Vec<Sample>, Vec<Sample>) {
        let mut samples: Vec<Sample> = (0..spec.samples_per_class)
            .map(|_| {
                let features = dir
                    .iter()
                    .enumerate()
                    .map(|(i, d)| {
                        let noise = if i < span { signal.sample(rng) } else { nuisance.sample(rng) };
                        quantize(radius * d + noise)
                    })
                    .collect();
                Sample { class_id, task_id, features }
            })
            .collect();
        samples.shuffle(rng);
        let test = samples.split_off(n_train);
        (samples, test)
    };

    let mut tasks = Vec::with_capacity(spec.tasks);
    for t in 0..spec.tasks {
        let mut train = EmbeddingDataset::new(spec.dim, class_count);
        let mut test = EmbeddingDataset::new(spec.dim, class_count);
        let mut labels = Vec::with_capacity(spec.classes_per_task);
        for j in 0..spec.classes_per_task {
            let class_id = match spec.scenario {
                Scenario::Dil => j as u32,
                _ => (t * spec.classes_per_task + j) as u32,
            };
            let (tr, te) = cluster(&directions[t * spec.classes_per_task + j], &mut rng, class_id, t as u32);
            train.samples.extend(tr);
            test.samples.extend(te);
            labels.push(class_id);
        }
        tasks.push(TaskData { train, test, labels });
    }

    let holdout = (spec.holdout_classes > 0).then(|| {
        let mut ds = EmbeddingDataset::new(spec.dim, class_count);
        let base = spec.tasks * spec.classes_per_task;
        for h in 0..spec.holdout_classes {
            let (mut tr, te) = cluster(&directions[base + h], &mut rng, (base + h) as u32, spec.tasks as u32);
            tr.extend(te);
            ds.samples.extend(tr);
        }
        ds
    });

    let stream = TaskStream { scenario: spec.scenario, tasks };
    stream.validate()?;
    Ok(SynthOutput { stream, holdout })
}

/// Every input of a run: data source, training setup and output paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub scenario: Scenario,
    pub train: TrainConfig,
    /// Used when no embedding files are given.
    pub synth: SynthSpec,
    pub paths: RunPaths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scenario: Scenario::Cil,
            train: TrainConfig::default(),
            synth: SynthSpec::default(),
            paths: RunPaths::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunPaths {
    pub train_data: Option<String>,
    pub test_data: Option<String>,
    pub state: Option<String>,
    pub metrics: Option<String>,
    pub out_dir: Option<String>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.synth.validate()?;
        if self.synth.scenario != self.scenario {
            return Err(Error::Config(format!(
                "synth scenario {} differs from run scenario {}",
                self.synth.scenario, self.scenario
            )));
        }
        if self.paths.train_data.is_some() != self.paths.test_data.is_some() {
            return Err(Error::Config("train_data and test_data must be given together".into()));
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct EnvelopeOut<'a, T> {
    format: &'a str,
    version: u32,
    payload: &'a T,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EnvelopeIn {
    format: String,
    version: u32,
    payload: serde_json::Value,
}

/// JSON with a format tag and version number around `value`.
pub fn encode_versioned<T: Serialize>(format: &str, version: u32, value: &T) -> Result<Vec<u8>> {
    Ok(serde_json::to_vec(&EnvelopeOut { format, version, payload: value })?)
}

pub fn decode_versioned<T: DeserializeOwned>(format: &str, version: u32, bytes: &[u8]) -> Result<T> {
    let env: EnvelopeIn = serde_json::from_slice(bytes)?;
    if env.format != format {
        return Err(Error::State(format!("expected a {format} file, found {:?}", env.format)));
    }
    if env.version != version {
        return Err(Error::Version { found: env.version, supported: version });
    }
    Ok(serde_json::from_value(env.payload)?)
}

pub fn save_state(state: &ModelState, path: &Path) -> Result<()> {
    write_atomic(path, &encode_versioned(STATE_FORMAT, STATE_VERSION, state)?)
}

pub fn load_state(path: &Path) -> Result<ModelState> {
    let state: ModelState = decode_versioned(STATE_FORMAT, STATE_VERSION, &fs::read(path)?)?;
    state.validate()?;
    Ok(state)
}
