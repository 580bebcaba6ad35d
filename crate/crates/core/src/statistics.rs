//! Per-class representation statistics: K-means centroids plus isotropic
//! Gaussian noise, for both unadapted and adapted representations.

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::numerics::Tensor2;

pub const MAX_LLOYD_ITERS: usize = 100;

/// How the Gaussian noise scale of a class is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy", content = "sigma")]
pub enum NoisePolicy {
    /// Root-mean-square per-coordinate deviation of points from their
    /// assigned centroid.
    WithinClusterStd,
    Fixed(f64),
}

impl Default for NoisePolicy {
    fn default() -> Self {
        NoisePolicy::WithinClusterStd
    }
}

/// Centroids, counts and noise scale describing one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStatistics {
    pub class_id: u32,
    pub task_id: usize,
    pub centroids: Tensor2,
    pub counts: Vec<usize>,
    pub noise_sigma: f64,
    pub mean: Vec<f64>,
}

/// Raw K-means output; `objective_trace[i]` is the sum of squared distances
/// after the i-th assignment step.
#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub centroids: Tensor2,
    pub assignment: Vec<usize>,
    pub counts: Vec<usize>,
    pub objective_trace: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid, ties to the lowest index.
fn nearest(point: &[f64], centroids: &Tensor2) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter_rows().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// Lloyd's algorithm with seeded furthest-point initialisation.
pub fn kmeans(points: &Tensor2, k: usize, seed: u64, max_iters: usize) -> Result<KMeansFit> {
    let n = points.rows();
    if k == 0 {
        return Err(Error::Config("K must be >= 1".into()));
    }
    if n < k {
        return Err(Error::Config(format!("{n} points cannot seed {k} centroids")));
    }
    if !points.is_finite() {
        return Err(Error::Numeric("representations contain non-finite values".into()));
    }
    let dim = points.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // furthest-point init: random first pick, then the point furthest from
    // every chosen centroid (ties to the lowest index)
    let mut centroids = Tensor2::zeros(k, dim);
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(points.row(first));
    let mut min_d: Vec<f64> = points.iter_rows().map(|p| sq_dist(p, points.row(first))).collect();
    for c in 1..k {
        let mut pick = 0;
        for i in 1..n {
            if min_d[i] > min_d[pick] {
                pick = i;
            }
        }
        centroids.row_mut(c).copy_from_slice(points.row(pick));
        for (i, p) in points.iter_rows().enumerate() {
            min_d[i] = min_d[i].min(sq_dist(p, centroids.row(c)));
        }
    }

    let mut assignment = vec![usize::MAX; n];
    let mut counts = vec![0; k];
    let mut trace = Vec::new();
    for _ in 0..max_iters.max(1) {
        let mut changed = false;
        let mut objective = 0.0;
        for (i, p) in points.iter_rows().enumerate() {
            let (c, d) = nearest(p, &centroids);
            objective += d;
            if assignment[i] != c {
                assignment[i] = c;
                changed = true;
            }
        }
        trace.push(objective);

        counts = vec![0; k];
        let mut sums = Tensor2::zeros(k, dim);
        for (i, p) in points.iter_rows().enumerate() {
            counts[assignment[i]] += 1;
            for (s, v) in sums.row_mut(assignment[i]).iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            // an empty cluster keeps its previous centroid
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                let src: Vec<f64> = sums.row(c).iter().map(|v| v * inv).collect();
                centroids.row_mut(c).copy_from_slice(&src);
            }
        }
        if !changed {
            break;
        }
    }
    Ok(KMeansFit { centroids, assignment, counts, objective_trace: trace })
}

/// Fits the centroid + noise description of one class's representations.
pub fn fit_class_statistics(
    reps: &Tensor2,
    k: usize,
    noise: NoisePolicy,
    seed: u64,
    class_id: u32,
    task_id: usize,
) -> Result<ClassStatistics> {
    let fit = kmeans(reps, k, seed, MAX_LLOYD_ITERS)?;
    let n = reps.rows();
    let dim = reps.cols();

    let mut mean = vec![0.0; dim];
    for (c, row) in fit.centroids.iter_rows().enumerate() {
        let w = fit.counts[c] as f64 / n as f64;
        for (m, v) in mean.iter_mut().zip(row) {
            *m += w * v;
        }
    }

    let noise_sigma = match noise {
        NoisePolicy::Fixed(s) if s >= 0.0 && s.is_finite() => s,
        NoisePolicy::Fixed(s) => return Err(Error::Config(format!("noise sigma {s} must be finite and >= 0"))),
        NoisePolicy::WithinClusterStd => {
            let ss: f64 = reps
                .iter_rows()
                .zip(&fit.assignment)
                .map(|(p, &a)| sq_dist(p, fit.centroids.row(a)))
                .sum();
            (ss / (n * dim) as f64).sqrt()
        }
    };

    Ok(ClassStatistics { class_id, task_id, centroids: fit.centroids, counts: fit.counts, noise_sigma, mean })
}

/// `n` pseudo representations: a count-weighted centroid plus
/// `N(0, σ²·I)` noise each.
pub fn sample_pseudo(stats: &ClassStatistics, n: usize, rng: &mut ChaCha8Rng) -> Result<Tensor2> {
    if n == 0 {
        return Err(Error::Config("pseudo sample count must be >= 1".into()));
    }
    let weights = WeightedIndex::new(&stats.counts)
        .map_err(|e| Error::Config(format!("centroid counts unusable as weights: {e}")))?;
    let dim = stats.centroids.cols();
    let mut out = Tensor2::zeros(n, dim);
    let noise = (stats.noise_sigma > 0.0)
        .then(|| Normal::new(0.0, stats.noise_sigma).expect("finite sigma"));
    for i in 0..n {
        let c = weights.sample(rng);
        let row = out.row_mut(i);
        row.copy_from_slice(stats.centroids.row(c));
        if let Some(normal) = &noise {
            for v in row.iter_mut() {
                *v += normal.sample(rng);
            }
        }
    }
    Ok(out)
}

/// `μ_c`
pub fn class_mean(stats: &ClassStatistics) -> &[f64] {
    &stats.mean
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatEntry {
    pub task: usize,
    pub class_id: u32,
    pub unadapted: ClassStatistics,
    pub adapted: Option<ClassStatistics>,
}

/// Statistics for every `(task, class)` pair seen so far. Unadapted entries
/// are registered before a task trains; adapted ones only afterwards.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StatStore {
    entries: Vec<StatEntry>,
}

impl StatStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn position(&self, task: usize, class_id: u32) -> Option<usize> {
        self.entries.iter().position(|e| e.task == task && e.class_id == class_id)
    }

    pub fn insert_unadapted(&mut self, stats: ClassStatistics) -> Result<()> {
        if self.position(stats.task_id, stats.class_id).is_some() {
            return Err(Error::State(format!(
                "unadapted statistics for task {} class {} already recorded",
                stats.task_id, stats.class_id
            )));
        }
        self.entries.push(StatEntry { task: stats.task_id, class_id: stats.class_id, unadapted: stats, adapted: None });
        Ok(())
    }

    pub fn insert_adapted(&mut self, stats: ClassStatistics) -> Result<()> {
        let idx = self.position(stats.task_id, stats.class_id).ok_or_else(|| {
            Error::State(format!(
                "adapted statistics for task {} class {} before its unadapted statistics",
                stats.task_id, stats.class_id
            ))
        })?;
        let entry = &mut self.entries[idx];
        if entry.adapted.is_some() {
            return Err(Error::State(format!(
                "adapted statistics for task {} class {} already recorded",
                stats.task_id, stats.class_id
            )));
        }
        entry.adapted = Some(stats);
        Ok(())
    }

    pub fn get(&self, task: usize, class_id: u32) -> Option<&StatEntry> {
        self.position(task, class_id).map(|i| &self.entries[i])
    }

    pub fn entries(&self) -> &[StatEntry] {
        &self.entries
    }

    pub fn for_task(&self, task: usize) -> impl Iterator<Item = &StatEntry> {
        self.entries.iter().filter(move |e| e.task == task)
    }
}

/// Stacks representation vectors into a matrix.
pub fn stack(reps: &[Vec<f64>]) -> Result<Tensor2> {
    if reps.is_empty() {
        return Err(dim_err("no representations to stack"));
    }
    Tensor2::from_rows(reps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;

    fn rows(v: &[&[f64]]) -> Tensor2 {
        Tensor2::from_rows(&v.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let reps = rows(&[&[1.0, 2.0], &[3.0, 6.0], &[5.0, 1.0]]);
        let s = fit_class_statistics(&reps, 1, NoisePolicy::WithinClusterStd, 0, 0, 0).unwrap();
        assert!((s.centroids.get(0, 0) - 3.0).abs() < 1e-12);
        assert!((s.centroids.get(0, 1) - 3.0).abs() < 1e-12);
        assert_eq!(class_mean(&s), s.centroids.row(0));
    }

    #[test]
    fn two_well_separated_groups() {
        // brute force over assignments: the optimal 2-partition is the
        // obvious one with objective 0, any other split costs > 0
        let mut v = vec![vec![0.0, 0.0]; 10];
        v.extend(vec![vec![10.0, 10.0]; 10]);
        let reps = Tensor2::from_rows(&v).unwrap();
        for seed in 0..5 {
            let s = fit_class_statistics(&reps, 2, NoisePolicy::WithinClusterStd, seed, 0, 0).unwrap();
            let mut cs: Vec<(Vec<f64>, usize)> =
                s.centroids.iter_rows().map(|r| r.to_vec()).zip(s.counts.clone()).collect();
            cs.sort_by(|a, b| a.0[0].partial_cmp(&b.0[0]).unwrap());
            assert_eq!(cs, vec![(vec![0.0, 0.0], 10), (vec![10.0, 10.0], 10)]);
            assert_eq!(s.noise_sigma, 0.0);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let reps = Tensor2::randn(50, 3, 1.0, &mut rng);
        let a = fit_class_statistics(&reps, 5, NoisePolicy::WithinClusterStd, 9, 1, 0).unwrap();
        let b = fit_class_statistics(&reps, 5, NoisePolicy::WithinClusterStd, 9, 1, 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_few_points_rejected_duplicates_allowed() {
        let reps = rows(&[&[1.0], &[2.0]]);
        assert!(matches!(
            fit_class_statistics(&reps, 3, NoisePolicy::WithinClusterStd, 0, 0, 0),
            Err(Error::Config(_))
        ));
        let same = rows(&[&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0]]);
        let s = fit_class_statistics(&same, 2, NoisePolicy::WithinClusterStd, 0, 0, 0).unwrap();
        assert_eq!(s.centroids.row(0), s.centroids.row(1));
        assert_eq!(s.counts, vec![3, 0]);
    }

    #[test]
    fn zero_noise_single_centroid_repeats_centroid() {
        let reps = rows(&[&[1.0, -1.0], &[3.0, 1.0]]);
        let s = fit_class_statistics(&reps, 1, NoisePolicy::Fixed(0.0), 0, 0, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = sample_pseudo(&s, 7, &mut rng).unwrap();
        assert!(p.iter_rows().all(|r| r == [2.0, 0.0]));
    }

    #[test]
    fn pseudo_mean_converges() {
        let s = ClassStatistics {
            class_id: 0,
            task_id: 0,
            centroids: rows(&[&[1.0, -2.0, 0.5]]),
            counts: vec![1],
            noise_sigma: 0.1,
            mean: vec![1.0, -2.0, 0.5],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let p = sample_pseudo(&s, 10_000, &mut rng).unwrap();
        let mean: Vec<f64> = p.column_sums().iter().map(|v| v / 10_000.0).collect();
        for (m, c) in mean.iter().zip(s.centroids.row(0)) {
            assert!((m - c).abs() < 0.01);
        }
    }

    #[test]
    fn pseudo_variance_matches_sigma() {
        let s = ClassStatistics {
            class_id: 0,
            task_id: 0,
            centroids: rows(&[&[0.0, 0.0]]),
            counts: vec![1],
            noise_sigma: 0.5,
            mean: vec![0.0, 0.0],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let p = sample_pseudo(&s, n, &mut rng).unwrap();
        for j in 0..2 {
            let mean = p.iter_rows().map(|r| r[j]).sum::<f64>() / n as f64;
            let var = p.iter_rows().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            assert!((var - 0.25).abs() / 0.25 < 0.1, "var {var}");
        }
    }

    #[test]
    fn zero_weight_centroid_never_sampled() {
        let s = ClassStatistics {
            class_id: 0,
            task_id: 0,
            centroids: rows(&[&[1.0], &[9.0]]),
            counts: vec![10, 0],
            noise_sigma: 0.0,
            mean: vec![1.0],
        };
        let p = sample_pseudo(&s, 50, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(p.iter_rows().all(|r| r == [1.0]));
    }

    #[test]
    fn weighted_mean_of_two_centroids() {
        let reps = rows(&[&[0.0, 0.0], &[2.0, 2.0]]);
        let s = fit_class_statistics(&reps, 2, NoisePolicy::WithinClusterStd, 0, 0, 0).unwrap();
        assert_eq!(s.counts, vec![1, 1]);
        assert_eq!(class_mean(&s), &[1.0, 1.0]);
    }

    #[test]
    fn store_enforces_ordering() {
        let reps = rows(&[&[0.0], &[1.0]]);
        let s = fit_class_statistics(&reps, 1, NoisePolicy::WithinClusterStd, 0, 4, 2).unwrap();
        let mut store = StatStore::new();
        assert!(matches!(store.insert_adapted(s.clone()), Err(Error::State(_))));
        store.insert_unadapted(s.clone()).unwrap();
        assert!(store.insert_unadapted(s.clone()).is_err());
        store.insert_adapted(s.clone()).unwrap();
        assert!(store.insert_adapted(s).is_err());
        assert!(store.get(2, 4).unwrap().adapted.is_some());
    }

    proptest! {
        #[test]
        fn objective_never_increases_and_mean_matches(seed in 0u64..1000, k in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let reps = Tensor2::randn(40, 4, 2.0, &mut rng);
            let fit = kmeans(&reps, k, seed, MAX_LLOYD_ITERS).unwrap();
            for w in fit.objective_trace.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9);
            }
            prop_assert_eq!(fit.counts.iter().sum::<usize>(), 40);

            let s = fit_class_statistics(&reps, k, NoisePolicy::WithinClusterStd, seed, 0, 0).unwrap();
            let emp: Vec<f64> = reps.column_sums().iter().map(|v| v / 40.0).collect();
            for (a, b) in emp.iter().zip(&s.mean) {
                prop_assert!((a - b).abs() <= 1e-9);
            }

            // permuting the inputs leaves the mean unchanged
            let mut order: Vec<usize> = (0..40).collect();
            order.shuffle(&mut rng);
            let permuted = Tensor2::from_rows(&order.iter().map(|&i| reps.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
            let s2 = fit_class_statistics(&permuted, k, NoisePolicy::WithinClusterStd, seed, 0, 0).unwrap();
            for (a, b) in s.mean.iter().zip(&s2.mean) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }
    }
}
