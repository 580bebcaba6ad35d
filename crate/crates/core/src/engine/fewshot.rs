//! N-way K-shot episodes on classes the stream never showed, using the
//! dataset-shared LoRA accumulated during training.

use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{derive_seed, tii_probs, ModelState, SharedAdapter};
use crate::backbone::{PeftKind, PeftParams};
use crate::datio::EmbeddingDataset;
use crate::error::{Error, Result};
use crate::numerics::{argmax, AdamState, ParamSet};
use crate::objectives::{tap_loss, wtp_loss, CrConfig, LinearHead, PseudoBatch, WtpParams};
use crate::statistics::stack;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FewShotConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub query_per_class: usize,
    /// Full-batch optimisation steps on the support set.
    pub steps: usize,
    pub learning_rate: f64,
    /// Represent inputs through the shared LoRA (otherwise the bare backbone).
    pub use_shared_lora: bool,
    /// Also fine-tune an episode-local copy of the LoRA.
    pub episode_adapter: bool,
    /// Permute the query labels; a chance-level control.
    pub shuffle_query_labels: bool,
}

impl Default for FewShotConfig {
    fn default() -> Self {
        Self {
            n_way: 5,
            k_shot: 5,
            query_per_class: 15,
            steps: 100,
            learning_rate: 0.01,
            use_shared_lora: true,
            episode_adapter: false,
            shuffle_query_labels: false,
        }
    }
}

impl FewShotConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 {
            return Err(Error::Config("an episode needs N >= 2 classes".into()));
        }
        if self.k_shot == 0 || self.query_per_class == 0 || self.steps == 0 {
            return Err(Error::Config("k_shot, query_per_class and steps must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be > 0", self.learning_rate)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub classes: Vec<u32>,
    pub support: Vec<(Vec<f64>, u32)>,
    pub query: Vec<(Vec<f64>, u32)>,
}

/// Draws `n_way` classes from `pool`, then `k_shot` support and
/// `query_per_class` query samples of each without overlap.
pub fn sample_episode(pool: &EmbeddingDataset, cfg: &FewShotConfig, rng: &mut ChaCha8Rng) -> Result<Episode> {
    cfg.validate()?;
    let mut by_class: BTreeMap<u32, Vec<&[f64]>> = BTreeMap::new();
    for s in &pool.samples {
        by_class.entry(s.class_id).or_default().push(&s.features);
    }
    let need = cfg.k_shot + cfg.query_per_class;
    let eligible: Vec<u32> = by_class.iter().filter(|(_, v)| v.len() >= need).map(|(c, _)| *c).collect();
    if eligible.len() < cfg.n_way {
        return Err(Error::Data(format!(
            "{} classes have {need} samples, a {}-way episode needs {}",
            eligible.len(),
            cfg.n_way,
            cfg.n_way
        )));
    }
    let mut classes: Vec<u32> = index::sample(rng, eligible.len(), cfg.n_way).into_iter().map(|i| eligible[i]).collect();
    classes.sort_unstable();
    let mut support = Vec::new();
    let mut query = Vec::new();
    for &c in &classes {
        let rows = &by_class[&c];
        let picked = index::sample(rng, rows.len(), need).into_vec();
        for (k, &i) in picked.iter().enumerate() {
            let item = (rows[i].to_vec(), c);
            if k < cfg.k_shot {
                support.push(item);
            } else {
                query.push(item);
            }
        }
    }
    Ok(Episode { classes, support, query })
}

/// The shared adapter to apply: the only one, or the one whose dataset the
/// task-identity head votes for most often over the support inputs.
pub fn select_shared<'a>(state: &'a ModelState, support: &[(Vec<f64>, u32)]) -> Result<Option<&'a SharedAdapter>> {
    match state.shared.len() {
        0 => Ok(None),
        1 => Ok(state.shared.first()),
        _ => {
            let mut votes: BTreeMap<&str, usize> = BTreeMap::new();
            for (x, _) in support {
                let task = argmax(&tii_probs(state, x)?).expect("nonempty");
                *votes.entry(state.task_datasets[task].as_str()).or_default() += 1;
            }
            // most votes, ties to the earliest-registered dataset
            let count = |s: &SharedAdapter| votes.get(s.dataset.as_str()).copied().unwrap_or(0);
            let top = state.shared.iter().map(count).max().unwrap_or(0);
            Ok(state.shared.iter().find(|s| count(s) == top))
        }
    }
}

/// Query accuracy after fitting a fresh N-way head on the support set.
pub fn few_shot_eval(state: &ModelState, episode: &Episode, cfg: &FewShotConfig, seed: u64) -> Result<f64> {
    cfg.validate()?;
    let classes = &episode.classes;
    let index_of = |c: u32| classes.binary_search(&c).ok();
    let support_classes: std::collections::BTreeSet<u32> = episode.support.iter().map(|s| s.1).collect();
    let query_classes: std::collections::BTreeSet<u32> = episode.query.iter().map(|s| s.1).collect();
    if support_classes != query_classes || support_classes.iter().copied().ne(classes.iter().copied()) {
        return Err(Error::Data("support and query must cover the same episode classes".into()));
    }
    if classes.len() < 2 {
        return Err(Error::Data("an episode needs at least two classes".into()));
    }
    if let Some(c) = classes.iter().find(|c| state.class_columns.contains(c)) {
        return Err(Error::Data(format!("class {c} was seen during the stream")));
    }

    let base = if cfg.use_shared_lora { select_shared(state, &episode.support)?.map(|s| s.peft.clone()) } else { None };
    let bb = &state.backbone;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "fewshot", 0));
    let n = classes.len();
    let mut head = LinearHead::zeros(bb.output_dim(), n);
    let mut adam = AdamState::new(cfg.learning_rate);

    let peft = if cfg.episode_adapter {
        let start = match base {
            Some(p) => p,
            None => {
                let pc = crate::backbone::PeftConfig { kind: PeftKind::Lora, ..state.config.peft.clone() };
                PeftParams::fresh(&pc, bb.config(), &mut rng)?
            }
        };
        let mut params = WtpParams { peft: start, head };
        let batch: Vec<(&[f64], usize)> =
            episode.support.iter().map(|(x, c)| (x.as_slice(), index_of(*c).expect("checked"))).collect();
        let no_cr = CrConfig { lambda: 0.0, ..state.config.cr };
        for _ in 0..cfg.steps {
            let out = wtp_loss(bb, &params, &batch, &[], &no_cr)?;
            adam.step(params.params_mut(), &out.bundle)?;
        }
        head = params.head;
        Some(params.peft)
    } else {
        base
    };
    let represent = |x: &[f64]| match &peft {
        Some(p) => bb.forward_adapted(x, p),
        None => bb.forward_unadapted(x),
    };

    if !cfg.episode_adapter {
        let mut per_class: Vec<Vec<Vec<f64>>> = vec![Vec::new(); n];
        for (x, c) in &episode.support {
            per_class[index_of(*c).expect("checked")].push(represent(x)?);
        }
        let k = per_class[0].len();
        if per_class.iter().any(|v| v.len() != k) {
            return Err(Error::Data("support set is not balanced across classes".into()));
        }
        let batches: Vec<PseudoBatch> = per_class
            .iter()
            .enumerate()
            .map(|(j, reps)| Ok(PseudoBatch { task: 0, class_col: j, reps: stack(reps)? }))
            .collect::<Result<_>>()?;
        for _ in 0..cfg.steps {
            let g = tap_loss(&head, &batches)?;
            adam.step(head.params_mut(), &g)?;
        }
    }

    let mut truth: Vec<usize> = episode.query.iter().map(|(_, c)| index_of(*c).expect("checked")).collect();
    if cfg.shuffle_query_labels {
        truth.shuffle(&mut rng);
    }
    let mut correct = 0usize;
    for ((x, _), y) in episode.query.iter().zip(&truth) {
        let logits = head.logits(&represent(x)?)?;
        correct += usize::from(argmax(&logits) == Some(*y));
    }
    Ok(correct as f64 / episode.query.len() as f64)
}

/// Query accuracies of `episodes` episodes; episode `e` is drawn and fitted
/// from `derive_seed(seed, "episode", e)`.
pub fn run_episodes(state: &ModelState, pool: &EmbeddingDataset, cfg: &FewShotConfig, seed: u64, episodes: usize) -> Result<Vec<f64>> {
    (0..episodes as u64)
        .map(|e| {
            let s = derive_seed(seed, "episode", e);
            let episode = sample_episode(pool, cfg, &mut ChaCha8Rng::seed_from_u64(s))?;
            few_shot_eval(state, &episode, cfg, s)
        })
        .collect()
}
