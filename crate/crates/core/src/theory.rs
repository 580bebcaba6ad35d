//! Numerical checks of the factorised objective on probability tables: the
//! product identity between joint and component cross-entropies, the upper
//! bounds on the combined loss under class-, domain- and task-incremental
//! settings, and the converse inequalities. Tables can be built by hand,
//! drawn at random or read off a trained model.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::Serialize;

use crate::datio::{EmbeddingDataset, Scenario};
use crate::engine::{tii_probs, ModelState};
use crate::error::{Error, Result};
use crate::evaluation::check_test_sets;
use crate::numerics::{argmax, softmax};

/// Absolute slack on every asserted bound, identity or inequality.
pub const TOLERANCE: f64 = 1e-9;
/// How far from one a distribution may sum before it is rejected.
pub const SUM_TOLERANCE: f64 = 1e-9;
/// Tolerance on the task-given reduction of TAP to WTP.
pub const TIL_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbSample {
    /// Over tasks.
    pub tii: Vec<f64>,
    /// `wtp[i]` is over task `i`'s classes, in `class_of[i]` order.
    pub wtp: Vec<Vec<f64>>,
    /// Over every class.
    pub tap: Vec<f64>,
    pub task: usize,
    pub within: usize,
    pub label: usize,
    /// Domain weights, read only by the domain-incremental check. `None`
    /// puts all weight on `task`.
    pub gamma: Option<Vec<f64>>,
}

/// Validated samples. Every distribution is rescaled to sum to one (up to
/// rounding) on construction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbTable {
    scenario: Scenario,
    class_of: Vec<Vec<usize>>,
    classes: usize,
    samples: Vec<ProbSample>,
}

fn normalised(what: &str, p: &[f64]) -> Result<Vec<f64>> {
    if p.is_empty() {
        return Err(Error::Data(format!("{what} is empty")));
    }
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Data(format!("{what} has a negative or non-finite entry")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::Data(format!("{what} sums to {sum}")));
    }
    Ok(p.iter().map(|v| v / sum).collect())
}

impl ProbTable {
    /// `class_of[i][j]` is the global class index of task `i`'s `j`-th
    /// class. Tasks partition the classes, except under DIL where every
    /// task shares one label list.
    pub fn new(scenario: Scenario, class_of: Vec<Vec<usize>>, samples: Vec<ProbSample>) -> Result<Self> {
        if class_of.is_empty() || class_of.iter().any(Vec::is_empty) {
            return Err(Error::Data("every task needs at least one class".into()));
        }
        let classes = match scenario {
            Scenario::Dil => {
                if class_of.iter().any(|c| c != &class_of[0]) {
                    return Err(Error::Scenario("DIL tasks must share one label list".into()));
                }
                class_of[0].len()
            }
            Scenario::Cil | Scenario::Til => class_of.iter().map(Vec::len).sum(),
        };
        let mut seen = vec![false; classes];
        for &c in class_of.iter().take(if scenario == Scenario::Dil { 1 } else { class_of.len() }).flatten() {
            if c >= classes || std::mem::replace(&mut seen[c], true) {
                return Err(Error::Data(format!("class index {c} repeated or outside 0..{classes}")));
            }
        }
        if samples.is_empty() {
            return Err(Error::Data("a table needs at least one sample".into()));
        }
        let tasks = class_of.len();
        let mut clean = Vec::with_capacity(samples.len());
        for (n, s) in samples.into_iter().enumerate() {
            if s.tii.len() != tasks || s.wtp.len() != tasks || s.tap.len() != classes {
                return Err(Error::Dimension(format!("sample {n}: distribution sizes do not match {tasks} tasks, {classes} classes")));
            }
            if s.task >= tasks {
                return Err(Error::Index { index: s.task, len: tasks });
            }
            if s.within >= class_of[s.task].len() || class_of[s.task][s.within] != s.label {
                return Err(Error::Data(format!("sample {n}: label {} is not class {} of task {}", s.label, s.within, s.task)));
            }
            let mut wtp = Vec::with_capacity(tasks);
            for (i, w) in s.wtp.iter().enumerate() {
                if w.len() != class_of[i].len() {
                    return Err(Error::Dimension(format!("sample {n}: WTP of task {i} has {} entries", w.len())));
                }
                wtp.push(normalised(&format!("sample {n} WTP of task {i}"), w)?);
            }
            let gamma = match &s.gamma {
                Some(g) if g.len() != tasks => {
                    return Err(Error::Data(format!("sample {n}: γ has {} entries for {tasks} tasks", g.len())))
                }
                Some(g) => {
                    if g.iter().any(|v| *v > 1.0) {
                        return Err(Error::Data(format!("sample {n}: γ is not a simplex")));
                    }
                    Some(normalised(&format!("sample {n} γ"), g).map_err(|e| Error::Data(format!("γ is not a simplex: {e}")))?)
                }
                None => None,
            };
            clean.push(ProbSample {
                tii: normalised(&format!("sample {n} TII"), &s.tii)?,
                wtp,
                tap: normalised(&format!("sample {n} TAP"), &s.tap)?,
                gamma,
                ..s
            });
        }
        Ok(Self { scenario, class_of, classes, samples: clean })
    }

    pub fn scenario(&self) -> Scenario {
        self.scenario
    }

    pub fn tasks(&self) -> usize {
        self.class_of.len()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn class_of(&self) -> &[Vec<usize>] {
        &self.class_of
    }

    pub fn samples(&self) -> &[ProbSample] {
        &self.samples
    }
}

/// `−log p`, with zero mapped to +∞.
fn nll(p: f64) -> f64 {
    if p <= 0.0 {
        f64::INFINITY
    } else {
        (-p.ln()).max(0.0)
    }
}

/// How far `lhs ≤ rhs` misses beyond tolerance; two infinities agree.
fn excess(lhs: f64, rhs: f64) -> f64 {
    if lhs.is_infinite() && rhs.is_infinite() {
        0.0
    } else {
        (lhs - rhs - TOLERANCE).max(0.0)
    }
}

fn gap(a: f64, b: f64) -> f64 {
    if a.is_infinite() && b.is_infinite() {
        0.0
    } else {
        (a - b).abs()
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Entropies {
    pub wtp: f64,
    pub tii: f64,
    pub tap: f64,
}

impl Entropies {
    pub fn any_infinite(&self) -> bool {
        !(self.wtp.is_finite() && self.tii.is_finite() && self.tap.is_finite())
    }
}

fn entropies_of(s: &ProbSample) -> Entropies {
    Entropies { wtp: nll(s.wtp[s.task][s.within]), tii: nll(s.tii[s.task]), tap: nll(s.tap[s.label]) }
}

/// Ground-truth cross-entropies of one sample.
pub fn component_entropies(table: &ProbTable, sample: usize) -> Result<Entropies> {
    let s = table.samples.get(sample).ok_or(Error::Index { index: sample, len: table.samples.len() })?;
    Ok(entropies_of(s))
}

/// `−log` of the joint class probability formed as WTP × TII.
fn joint_ce(s: &ProbSample) -> f64 {
    nll(s.wtp[s.task][s.within] * s.tii[s.task])
}

/// Largest `|−log(WTP·TII) − (H_WTP + H_TII)|` over the samples.
pub fn check_cil_identity(table: &ProbTable) -> f64 {
    table
        .samples
        .iter()
        .map(|s| {
            let h = entropies_of(s);
            gap(joint_ce(s), h.wtp + h.tii)
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub scenario: Scenario,
    pub delta: f64,
    pub epsilon: f64,
    pub eta: f64,
    pub l2: f64,
    pub l1: f64,
    pub loss: f64,
    pub bound: f64,
    pub slack: f64,
    /// Some expectation is infinite, so the bound holds vacuously.
    pub infinite: bool,
    /// Largest amount beyond tolerance by which an asserted side identity or
    /// intermediate inequality failed.
    pub side_violation: f64,
    pub holds: bool,
}

impl BoundReport {
    #[allow(clippy::too_many_arguments)]
    fn finish(scenario: Scenario, delta: f64, epsilon: f64, eta: f64, l2: f64, l1: f64, bound: f64, side_violation: f64) -> Self {
        let loss = l2.max(l1);
        let infinite = [delta, epsilon, eta, l2, l1, bound].iter().any(|v| !v.is_finite());
        let slack = if infinite { f64::INFINITY } else { bound - loss };
        let holds = infinite || (loss <= bound + TOLERANCE && side_violation == 0.0);
        Self { scenario, delta, epsilon, eta, l2, l1, loss, bound, slack, infinite, side_violation, holds }
    }
}

/// `L = max(L2, L1) ≤ max(δ + ε, η)`, plus `L2 = δ + ε`.
pub fn check_theorem1(table: &ProbTable) -> BoundReport {
    let h: Vec<Entropies> = table.samples.iter().map(entropies_of).collect();
    let delta = mean(h.iter().map(|e| e.wtp));
    let epsilon = mean(h.iter().map(|e| e.tii));
    let eta = mean(h.iter().map(|e| e.tap));
    let l2 = mean(table.samples.iter().map(joint_ce));
    let side = (gap(l2, delta + epsilon) - TOLERANCE).max(0.0);
    BoundReport::finish(table.scenario, delta, epsilon, eta, l2, eta, (delta + epsilon).max(eta), side)
}

struct DilTerms {
    /// `−log Σ_i WTP_i(j̄)·TII_i`
    joint: f64,
    /// `Σ_i γ_i·H_WTP,i`
    wtp: f64,
    /// `−Σ_i γ_i log TII_i`
    tii: f64,
    /// `H(γ)`
    h_gamma: f64,
    /// The class marginal `Σ_i WTP_i(·)·TII_i`.
    marginal: Vec<f64>,
}

fn dil_terms(s: &ProbSample) -> DilTerms {
    let t = s.tii.len();
    let one_hot: Vec<f64>;
    let gamma = match &s.gamma {
        Some(g) => g.as_slice(),
        None => {
            one_hot = (0..t).map(|i| if i == s.task { 1.0 } else { 0.0 }).collect();
            &one_hot
        }
    };
    let mut marginal = vec![0.0; s.wtp[0].len()];
    for (w, p) in s.wtp.iter().zip(&s.tii) {
        for (m, v) in marginal.iter_mut().zip(w) {
            *m += v * p;
        }
    }
    let (mut wtp, mut tii, mut h_gamma) = (0.0, 0.0, 0.0);
    for i in 0..t {
        let g = gamma[i];
        // zero-weight domains drop out, even when their probability is 0
        if g > 0.0 {
            wtp += g * nll(s.wtp[i][s.within]);
            tii += g * nll(s.tii[i]);
            h_gamma -= g * g.ln();
        }
    }
    DilTerms { joint: nll(marginal[s.within]), wtp, tii, h_gamma, marginal }
}

/// `L ≤ max(δ + ε + log t, η)` for a domain-incremental table, where the
/// joint marginalises over domains and δ, ε are γ-weighted. Each sample
/// must also satisfy the intermediate Jensen step in both signs of the
/// `H(γ)` term.
pub fn check_theorem3_dil(table: &ProbTable) -> Result<BoundReport> {
    if table.scenario != Scenario::Dil {
        return Err(Error::Scenario(format!("the domain bound needs a DIL table, got {}", table.scenario)));
    }
    let terms: Vec<DilTerms> = table.samples.iter().map(dil_terms).collect();
    let log_t = (table.tasks() as f64).ln();
    let mut side: f64 = 0.0;
    for d in &terms {
        side = side.max(excess(d.joint, d.wtp + d.tii - d.h_gamma));
        side = side.max(excess(d.joint, d.wtp + d.tii + d.h_gamma));
        side = side.max(excess(d.h_gamma, log_t));
    }
    let delta = mean(terms.iter().map(|d| d.wtp));
    let epsilon = mean(terms.iter().map(|d| d.tii));
    let eta = mean(table.samples.iter().map(|s| nll(s.tap[s.label])));
    let l2 = mean(terms.iter().map(|d| d.joint));
    Ok(BoundReport::finish(Scenario::Dil, delta, epsilon, eta, l2, eta, (delta + epsilon + log_t).max(eta), side))
}

/// H_TAP when the task is given: the class distribution formed from WTP and
/// a one-hot task identity, renormalised over the given task's classes.
fn tap_given_task(s: &ProbSample) -> f64 {
    let w = &s.wtp[s.task];
    let joint: Vec<f64> = w.iter().map(|v| v * 1.0).collect();
    let z: f64 = joint.iter().sum();
    nll(joint[s.within] / z)
}

/// Largest `|H_TAP − H_WTP|` with the task identity given.
pub fn til_reduction(table: &ProbTable) -> f64 {
    table.samples.iter().map(|s| gap(tap_given_task(s), entropies_of(s).wtp)).fold(0.0, f64::max)
}

/// `L ≤ δ` with the task identity given, so that `ε = 0`.
pub fn check_theorem5_til(table: &ProbTable) -> BoundReport {
    let delta = mean(table.samples.iter().map(|s| entropies_of(s).wtp));
    let eta = mean(table.samples.iter().map(tap_given_task));
    let l2 = mean(table.samples.iter().map(|s| nll(s.wtp[s.task][s.within] * 1.0)));
    let side = (til_reduction(table) - TIL_TOLERANCE).max(0.0);
    BoundReport::finish(table.scenario, delta, 0.0, eta, l2, eta, delta, side)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NecessityReport {
    pub scenario: Scenario,
    pub xi: f64,
    pub loss: f64,
    /// `loss ≤ ξ`; when false nothing is asserted.
    pub applicable: bool,
    /// Expected component losses of the witness predictors.
    pub wtp: f64,
    pub tii: f64,
    pub tap: f64,
    /// Samples whose witness component exceeds the joint cross-entropy.
    pub pointwise_violations: usize,
    pub holds: bool,
}

/// Given a loss at most ξ, exhibits WTP, TII and TAP predictors whose
/// expected losses are each at most ξ. Under CIL the table's own components
/// serve. Under DIL the witness puts all task mass on the true domain and
/// uses the class marginal as every domain's WTP, which leaves the joint
/// prediction unchanged. Under TIL the task-given components serve.
pub fn check_necessity(table: &ProbTable, xi: f64) -> Result<NecessityReport> {
    if !(xi.is_finite() && xi >= 0.0) {
        return Err(Error::Config(format!("ξ must be finite and >= 0, got {xi}")));
    }
    let mut violations = 0usize;
    let (loss, wtp, tii, tap) = match table.scenario {
        Scenario::Cil => {
            for s in &table.samples {
                let h = entropies_of(s);
                let j = joint_ce(s);
                violations += usize::from(excess(h.wtp, j) > 0.0 || excess(h.tii, j) > 0.0);
            }
            let r = check_theorem1(table);
            (r.loss, r.delta, r.epsilon, r.eta)
        }
        Scenario::Dil => {
            let mut witness_wtp = Vec::with_capacity(table.samples.len());
            for s in &table.samples {
                let d = dil_terms(s);
                let z: f64 = d.marginal.iter().sum();
                let h_wtp = nll(d.marginal[s.within]);
                let h_tii = nll(1.0);
                // composing the witness must reproduce the joint
                let recomposed = nll(d.marginal[s.within] * 1.0);
                let bad = (z - 1.0).abs() > SUM_TOLERANCE
                    || gap(recomposed, d.joint) > TOLERANCE
                    || excess(h_wtp, d.joint) > 0.0
                    || excess(h_tii, d.joint) > 0.0;
                violations += usize::from(bad);
                witness_wtp.push(h_wtp);
            }
            let r = check_theorem3_dil(table)?;
            (r.loss, mean(witness_wtp.into_iter()), 0.0, r.eta)
        }
        Scenario::Til => {
            for s in &table.samples {
                let j = nll(s.wtp[s.task][s.within] * 1.0);
                violations += usize::from(excess(entropies_of(s).wtp, j) > 0.0);
            }
            let r = check_theorem5_til(table);
            (r.loss, r.delta, 0.0, r.eta)
        }
    };
    let applicable = loss.is_finite() && loss <= xi + TOLERANCE;
    let within = [wtp, tii, tap].iter().all(|v| *v <= xi + TOLERANCE);
    let holds = !applicable || (violations == 0 && within);
    Ok(NecessityReport {
        scenario: table.scenario,
        xi,
        loss,
        applicable,
        wtp,
        tii,
        tap,
        pointwise_violations: violations,
        holds,
    })
}

/// [`check_necessity`] reduced to its verdict. A table above `xi` is not
/// applicable and counts as holding.
pub fn check_theorem2_4_6_necessity(table: &ProbTable, xi: f64) -> Result<bool> {
    Ok(check_necessity(table, xi)?.holds)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TableShape {
    pub tasks: usize,
    pub classes_per_task: usize,
    pub samples: usize,
}

/// Softmax of Gaussian logits at a random sharpness; with probability
/// `zero_rate` one entry is set to exactly zero.
fn random_distribution(n: usize, zero_rate: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let sharpness = rng.random_range(0.0..6.0);
    let logits: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            sharpness * z
        })
        .collect();
    let mut p = softmax(&logits).expect("finite logits");
    if n > 1 && rng.random_bool(zero_rate) {
        let k = rng.random_range(0..n);
        p[k] = 0.0;
        let z: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= z);
    }
    p
}

fn random_simplex(t: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut w: Vec<f64> = (0..t).map(|_| if rng.random_bool(0.3) {
                0.0
            } else {
                let e: f64 = Exp1.sample(rng);
                e
            }).collect();
    if w.iter().all(|v| *v == 0.0) {
        w[rng.random_range(0..t)] = 1.0;
    }
    let z: f64 = w.iter().sum();
    w.iter().map(|v| v / z).collect()
}

/// Independent random distributions for every component. DIL samples carry
/// a random γ four times in five.
pub fn random_table(scenario: Scenario, shape: TableShape, zero_rate: f64, rng: &mut ChaCha8Rng) -> Result<ProbTable> {
    let TableShape { tasks, classes_per_task: k, samples } = shape;
    if tasks == 0 || k == 0 || samples == 0 {
        return Err(Error::Config("table shape entries must be >= 1".into()));
    }
    let class_of: Vec<Vec<usize>> = match scenario {
        Scenario::Dil => vec![(0..k).collect(); tasks],
        Scenario::Cil | Scenario::Til => (0..tasks).map(|i| (i * k..(i + 1) * k).collect()).collect(),
    };
    let classes = if scenario == Scenario::Dil { k } else { tasks * k };
    let rows = (0..samples)
        .map(|_| {
            let task = rng.random_range(0..tasks);
            let within = rng.random_range(0..k);
            let gamma = (scenario == Scenario::Dil && rng.random_bool(0.8)).then(|| random_simplex(tasks, rng));
            ProbSample {
                tii: random_distribution(tasks, zero_rate, rng),
                wtp: (0..tasks).map(|_| random_distribution(k, zero_rate, rng)).collect(),
                tap: random_distribution(classes, zero_rate, rng),
                task,
                within,
                label: class_of[task][within],
                gamma,
            }
        })
        .collect();
    ProbTable::new(scenario, class_of, rows)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SuiteReport {
    pub tables: usize,
    pub identity_max_deviation: f64,
    pub til_max_deviation: f64,
    pub cil_violations: usize,
    pub dil_violations: usize,
    pub til_violations: usize,
    pub necessity_violations: usize,
    pub necessity_not_applicable: usize,
    /// Bound checks that held only because an expectation was infinite.
    pub vacuous: usize,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.identity_max_deviation <= TOLERANCE
            && self.til_max_deviation <= TIL_TOLERANCE
            && self.cil_violations == 0
            && self.dil_violations == 0
            && self.til_violations == 0
            && self.necessity_violations == 0
    }
}

/// Runs every check on `tables` random CIL tables and as many DIL tables
/// of random shape. Necessity is checked at ξ equal to the loss and at half
/// of it, where the precondition usually fails.
pub fn run_random_suite(tables: usize, seed: u64, zero_rate: f64) -> Result<SuiteReport> {
    if !(0.0..=1.0).contains(&zero_rate) {
        return Err(Error::Config(format!("zero rate {zero_rate} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SuiteReport { tables, ..SuiteReport::default() };
    let necessity = |table: &ProbTable, loss: f64, out: &mut SuiteReport| -> Result<()> {
        if !loss.is_finite() {
            return Ok(());
        }
        for xi in [loss, 0.5 * loss] {
            let r = check_necessity(table, xi)?;
            out.necessity_violations += usize::from(!r.holds || r.pointwise_violations > 0);
            out.necessity_not_applicable += usize::from(!r.applicable);
        }
        Ok(())
    };
    for _ in 0..tables {
        let shape = TableShape {
            tasks: rng.random_range(1..=5),
            classes_per_task: rng.random_range(1..=4),
            samples: rng.random_range(1..=16),
        };
        let cil = random_table(Scenario::Cil, shape, zero_rate, &mut rng)?;
        out.identity_max_deviation = out.identity_max_deviation.max(check_cil_identity(&cil));
        let r1 = check_theorem1(&cil);
        out.cil_violations += usize::from(!r1.holds || r1.side_violation > 0.0);
        out.vacuous += usize::from(r1.infinite);
        necessity(&cil, r1.loss, &mut out)?;

        out.til_max_deviation = out.til_max_deviation.max(til_reduction(&cil));
        let r5 = check_theorem5_til(&cil);
        out.til_violations += usize::from(!r5.holds);

        let dil = random_table(Scenario::Dil, shape, zero_rate, &mut rng)?;
        let r3 = check_theorem3_dil(&dil)?;
        out.dil_violations += usize::from(!r3.holds || r3.side_violation > 0.0);
        out.vacuous += usize::from(r3.infinite);
        necessity(&dil, r3.loss, &mut out)?;
    }
    Ok(out)
}

/// The model's own probabilities on labelled test sets, set `i` holding
/// task `i`'s samples. TII comes from the task-identity head on bare
/// representations, WTP from the task-adaptive head restricted to a task's
/// columns on that task's adapted representation, and TAP from the full
/// head on the representation adapted by the most probable task.
pub fn model_table(state: &ModelState, test_sets: &[&EmbeddingDataset]) -> Result<ProbTable> {
    let scenario = state.scenario;
    check_test_sets(state, test_sets, scenario)?;
    let tasks = state.tasks();
    let columns = state.class_columns.len();
    let class_of: Vec<Vec<usize>> = match scenario {
        Scenario::Dil => vec![(0..columns).collect(); tasks],
        Scenario::Cil | Scenario::Til => (0..tasks).map(|i| state.task_columns(i)).collect::<Result<_>>()?,
    };
    let mut rows = Vec::new();
    for (i, ds) in test_sets.iter().enumerate() {
        for s in &ds.samples {
            let tii = tii_probs(state, &s.features)?;
            let mut logits = Vec::with_capacity(tasks);
            for peft in &state.peft_per_task {
                let h = state.backbone.forward_adapted(&s.features, peft)?;
                logits.push(state.heads.tap.logits(&h)?);
            }
            let wtp = class_of
                .iter()
                .zip(&logits)
                .map(|(cols, l)| softmax(&cols.iter().map(|&c| l[c]).collect::<Vec<f64>>()))
                .collect::<Result<Vec<_>>>()?;
            let top = argmax(&tii).expect("nonempty");
            let label = state.column_of(s.class_id).ok_or_else(|| Error::Data(format!("class {} has no column", s.class_id)))?;
            let within = class_of[i].iter().position(|&c| c == label).expect("checked against task labels");
            rows.push(ProbSample { tii, wtp, tap: softmax(&logits[top])?, task: i, within, label, gamma: None });
        }
    }
    ProbTable::new(scenario, class_of, rows)
}

/// The scenario's bound evaluated on [`model_table`].
pub fn empirical_bounds_from_model(state: &ModelState, test_sets: &[&EmbeddingDataset]) -> Result<BoundReport> {
    let table = model_table(state, test_sets)?;
    match state.scenario {
        Scenario::Cil => Ok(check_theorem1(&table)),
        Scenario::Dil => check_theorem3_dil(&table),
        Scenario::Til => Ok(check_theorem5_til(&table)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN2: f64 = std::f64::consts::LN_2;

    fn sample(tii: &[f64], wtp: &[&[f64]], tap: &[f64], task: usize, within: usize, label: usize) -> ProbSample {
        ProbSample {
            tii: tii.to_vec(),
            wtp: wtp.iter().map(|w| w.to_vec()).collect(),
            tap: tap.to_vec(),
            task,
            within,
            label,
            gamma: None,
        }
    }

    fn two_by_two(scenario: Scenario, s: Vec<ProbSample>) -> ProbTable {
        let class_of = if scenario == Scenario::Dil { vec![vec![0, 1], vec![0, 1]] } else { vec![vec![0, 1], vec![2, 3]] };
        ProbTable::new(scenario, class_of, s).unwrap()
    }

    #[test]
    fn certain_table_is_all_zero() {
        let t = two_by_two(Scenario::Cil, vec![sample(&[0.0, 1.0], &[&[1.0, 0.0], &[0.0, 1.0]], &[0.0, 0.0, 0.0, 1.0], 1, 1, 3)]);
        assert_eq!(component_entropies(&t, 0).unwrap(), Entropies { wtp: 0.0, tii: 0.0, tap: 0.0 });
        assert_eq!(check_cil_identity(&t), 0.0);
        let r = check_theorem1(&t);
        assert_eq!((r.loss, r.bound, r.slack), (0.0, 0.0, 0.0));
        assert!(r.holds && !r.infinite);
    }

    #[test]
    fn uniform_two_tasks_two_classes() {
        let t = two_by_two(Scenario::Cil, vec![sample(&[0.5, 0.5], &[&[0.5, 0.5], &[0.5, 0.5]], &[0.25; 4], 0, 1, 1)]);
        let h = component_entropies(&t, 0).unwrap();
        assert!((h.wtp - LN2).abs() < 1e-15 && (h.tii - LN2).abs() < 1e-15);
        assert!((h.tap - 4f64.ln()).abs() < 1e-15);
        let r = check_theorem1(&t);
        assert!((r.loss - 4f64.ln()).abs() < 1e-15);
        assert!((r.bound - 4f64.ln()).abs() < 1e-15);
        assert!(r.slack.abs() < 1e-15 && r.holds);
    }

    #[test]
    fn single_task_has_no_identity_loss() {
        let t = ProbTable::new(Scenario::Cil, vec![vec![0, 1, 2]], vec![sample(&[1.0], &[&[0.2, 0.3, 0.5]], &[0.1, 0.1, 0.8], 0, 2, 2)])
            .unwrap();
        let h = component_entropies(&t, 0).unwrap();
        assert_eq!(h.tii, 0.0);
        assert!((h.wtp - (-(0.5f64).ln())).abs() < 1e-15);
        assert!(component_entropies(&t, 1).is_err());
    }

    #[test]
    fn zero_ground_truth_is_flagged_not_fatal() {
        let t = two_by_two(Scenario::Cil, vec![sample(&[1.0, 0.0], &[&[0.5, 0.5], &[0.5, 0.5]], &[0.25; 4], 1, 0, 2)]);
        let h = component_entropies(&t, 0).unwrap();
        assert!(h.tii.is_infinite() && h.any_infinite());
        assert_eq!(check_cil_identity(&t), 0.0);
        let r = check_theorem1(&t);
        assert!(r.infinite && r.holds && r.slack.is_infinite());
    }

    #[test]
    fn invalid_tables_rejected() {
        let bad_sum = sample(&[0.5, 0.6], &[&[0.5, 0.5], &[0.5, 0.5]], &[0.25; 4], 0, 0, 0);
        assert!(ProbTable::new(Scenario::Cil, vec![vec![0, 1], vec![2, 3]], vec![bad_sum]).is_err());
        let wrong_label = sample(&[0.5, 0.5], &[&[0.5, 0.5], &[0.5, 0.5]], &[0.25; 4], 1, 0, 0);
        assert!(ProbTable::new(Scenario::Cil, vec![vec![0, 1], vec![2, 3]], vec![wrong_label]).is_err());
        let ok = sample(&[0.5, 0.5], &[&[0.5, 0.5], &[0.5, 0.5]], &[0.25; 4], 1, 0, 2);
        assert!(ProbTable::new(Scenario::Cil, vec![vec![0, 1], vec![1, 3]], vec![ok.clone()]).is_err());
        assert!(ProbTable::new(Scenario::Cil, vec![vec![0, 1], vec![2, 3]], vec![]).is_err());
        assert!(ProbTable::new(Scenario::Dil, vec![vec![0, 1], vec![1, 0]], vec![ok.clone()]).is_err());
        let mut g = ok.clone();
        g.gamma = Some(vec![0.7, 0.7]);
        assert!(matches!(ProbTable::new(Scenario::Cil, vec![vec![0, 1], vec![2, 3]], vec![g.clone()]), Err(Error::Data(_))));
        g.gamma = Some(vec![1.5, -0.5]);
        assert!(matches!(ProbTable::new(Scenario::Cil, vec![vec![0, 1], vec![2, 3]], vec![g]), Err(Error::Data(_))));
    }

    #[test]
    fn distributions_are_renormalised() {
        let s = sample(&[0.5 + 4e-10, 0.5], &[&[0.5, 0.5], &[0.5, 0.5]], &[0.25; 4], 0, 0, 0);
        let t = two_by_two(Scenario::Cil, vec![s]);
        let z: f64 = t.samples()[0].tii.iter().sum();
        assert!((z - 1.0).abs() < 1e-15);
    }

    #[test]
    fn dil_single_domain_matches_class_incremental_bound() {
        let s = sample(&[1.0], &[&[0.3, 0.7]], &[0.6, 0.4], 0, 1, 1);
        let dil = ProbTable::new(Scenario::Dil, vec![vec![0, 1]], vec![s.clone()]).unwrap();
        let cil = ProbTable::new(Scenario::Cil, vec![vec![0, 1]], vec![s]).unwrap();
        let a = check_theorem3_dil(&dil).unwrap();
        let b = check_theorem1(&cil);
        assert_eq!((a.loss, a.bound, a.delta, a.epsilon), (b.loss, b.bound, b.delta, b.epsilon));
        assert!(a.holds);
        assert!(check_theorem3_dil(&cil).is_err());
    }

    #[test]
    fn dil_uniform_gamma_perfect_components() {
        let mut s = sample(&[0.5, 0.5], &[&[1.0, 0.0], &[1.0, 0.0]], &[1.0, 0.0], 0, 0, 0);
        s.gamma = Some(vec![0.5, 0.5]);
        let r = check_theorem3_dil(&two_by_two(Scenario::Dil, vec![s])).unwrap();
        assert_eq!(r.l2, 0.0);
        assert!(r.loss <= LN2);
        assert!((r.epsilon - LN2).abs() < 1e-15);
        assert!((r.bound - 2.0 * LN2).abs() < 1e-15);
        assert!(r.holds && r.side_violation == 0.0);
    }

    #[test]
    fn dil_hand_computed_jensen_step() {
        let mut s = sample(&[0.6, 0.4], &[&[0.5, 0.5], &[0.25, 0.75]], &[0.5, 0.5], 1, 0, 0);
        s.gamma = Some(vec![0.5, 0.5]);
        let t = two_by_two(Scenario::Dil, vec![s]);
        let d = dil_terms(&t.samples()[0]);
        // joint 0.5·0.6 + 0.25·0.4 = 0.4
        assert!((d.joint - 2.5f64.ln()).abs() < 1e-15);
        let rhs = 0.5 * 2f64.ln() + 0.5 * 4f64.ln() - 0.5 * 0.6f64.ln() - 0.5 * 0.4f64.ln() - LN2;
        assert!((d.wtp + d.tii - d.h_gamma - rhs).abs() < 1e-15);
        assert!(d.joint < rhs);
        assert!(check_theorem3_dil(&t).unwrap().holds);
    }

    #[test]
    fn dil_gamma_on_a_zero_domain_is_vacuous() {
        let mut s = sample(&[1.0, 0.0], &[&[0.5, 0.5], &[0.5, 0.5]], &[0.5, 0.5], 0, 0, 0);
        s.gamma = Some(vec![0.5, 0.5]);
        let r = check_theorem3_dil(&two_by_two(Scenario::Dil, vec![s])).unwrap();
        assert!(r.infinite && r.holds);
        assert!((r.l2 - LN2).abs() < 1e-15);
    }

    #[test]
    fn til_reduction_and_bound() {
        let t = two_by_two(Scenario::Til, vec![sample(&[0.9, 0.1], &[&[0.2, 0.8], &[0.5, 0.5]], &[0.1, 0.2, 0.3, 0.4], 0, 1, 1)]);
        assert!(til_reduction(&t) <= TIL_TOLERANCE);
        let r = check_theorem5_til(&t);
        assert_eq!(r.epsilon, 0.0);
        assert!((r.delta - (-(0.8f64).ln())).abs() < 1e-15);
        assert!(r.holds);
    }

    #[test]
    fn necessity_on_certain_table_and_skip() {
        let t = two_by_two(Scenario::Cil, vec![sample(&[1.0, 0.0], &[&[1.0, 0.0], &[1.0, 0.0]], &[1.0, 0.0, 0.0, 0.0], 0, 0, 0)]);
        let r = check_necessity(&t, 0.1).unwrap();
        assert!(r.applicable && r.holds);
        assert_eq!((r.wtp, r.tii, r.tap), (0.0, 0.0, 0.0));

        let u = two_by_two(Scenario::Cil, vec![sample(&[0.5, 0.5], &[&[0.5, 0.5], &[0.5, 0.5]], &[0.25; 4], 0, 0, 0)]);
        let r = check_necessity(&u, 0.1).unwrap();
        assert!(check_theorem2_4_6_necessity(&u, 0.1).unwrap());
        assert!(!r.applicable && r.holds);
        assert!(check_necessity(&u, f64::NAN).is_err());
    }

    #[test]
    fn necessity_components_below_joint_on_random_tables() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shape = TableShape { tasks: 3, classes_per_task: 3, samples: 10 };
        for scenario in [Scenario::Cil, Scenario::Dil, Scenario::Til] {
            for _ in 0..100 {
                let t = random_table(scenario, shape, 0.0, &mut rng).unwrap();
                for s in t.samples() {
                    if scenario != Scenario::Dil {
                        let h = entropies_of(s);
                        let c = joint_ce(s);
                        assert!(h.wtp <= c + TOLERANCE && h.tii <= c + TOLERANCE);
                    }
                }
                let r = check_necessity(&t, 1e6).unwrap();
                assert!(r.applicable && r.holds && r.pointwise_violations == 0, "{r:?}");
            }
        }
    }

    #[test]
    fn random_suite_passes() {
        let r = run_random_suite(1000, 11, 0.05).unwrap();
        assert!(r.passed(), "{r:?}");
        assert!(r.vacuous > 0 && r.necessity_not_applicable > 0);
    }
}
