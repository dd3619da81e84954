//! k-means++ / Lloyd clustering of day profiles and silhouette selection.

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::DayMatrix;
use crate::error::{Error, Result};

pub const MAX_ITERATIONS: usize = 300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Labeling {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub inertia: f64,
}

impl Labeling {
    /// Index of the nearest centroid; ties go to the lower index.
    pub fn assign(&self, row: &[f64]) -> usize {
        nearest(&self.centroids, row).0
    }
}

/// One Lloyd run: the final labeling and the inertia after every assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansRun {
    pub labeling: Labeling,
    pub inertia_trace: Vec<f64>,
    pub iterations: usize,
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &[Vec<f64>], row: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(c, row);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn plus_plus_seed(rows: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = rows.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = rows.iter().map(|r| sq_dist(r, &rows[chosen[0]])).collect();
    while chosen.len() < k {
        let next = match WeightedIndex::new(&d2) {
            Ok(dist) => dist.sample(rng),
            // all remaining mass is zero: take the first unused row
            Err(_) => (0..n).find(|i| !chosen.contains(i)).expect("k <= n"),
        };
        chosen.push(next);
        for (d, r) in d2.iter_mut().zip(rows) {
            *d = d.min(sq_dist(r, &rows[next]));
        }
    }
    chosen.into_iter().map(|i| rows[i].clone()).collect()
}

fn lloyd(rows: &[Vec<f64>], mut centroids: Vec<Vec<f64>>) -> KMeansRun {
    let (n, k, dim) = (rows.len(), centroids.len(), rows[0].len());
    let mut labels: Vec<usize> = vec![usize::MAX; n];
    let mut trace = Vec::new();
    let mut iterations = 0;
    loop {
        iterations += 1;
        let mut dists = vec![0.0; n];
        let mut next = vec![0; n];
        for (i, r) in rows.iter().enumerate() {
            let (j, d) = nearest(&centroids, r);
            next[i] = j;
            dists[i] = d;
        }
        // re-seed empty clusters from the point farthest from its centroid
        let mut sizes = vec![0usize; k];
        for &j in &next {
            sizes[j] += 1;
        }
        for empty in 0..k {
            if sizes[empty] > 0 {
                continue;
            }
            let far = (0..n)
                .filter(|&i| sizes[next[i]] > 1)
                .fold(None, |best: Option<usize>, i| match best {
                    Some(b) if dists[b] >= dists[i] => Some(b),
                    _ => Some(i),
                })
                .expect("k <= n leaves a multi-member cluster");
            sizes[next[far]] -= 1;
            sizes[empty] = 1;
            next[far] = empty;
            dists[far] = 0.0;
            centroids[empty] = rows[far].clone();
        }
        trace.push(dists.iter().sum());
        let stable = next == labels;
        labels = next;
        if stable || iterations >= MAX_ITERATIONS {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        for (r, &j) in rows.iter().zip(&labels) {
            for (s, v) in sums[j].iter_mut().zip(r) {
                *s += v;
            }
        }
        for (j, s) in sums.into_iter().enumerate() {
            centroids[j] = s.into_iter().map(|v| v / sizes[j] as f64).collect();
        }
    }
    let inertia = *trace.last().expect("at least one iteration");
    KMeansRun {
        labeling: Labeling {
            k,
            centroids,
            labels,
            inertia,
        },
        inertia_trace: trace,
        iterations,
    }
}

/// Best-inertia run over `restarts` k-means++ initialisations.
pub fn kmeans_rows(rows: &[Vec<f64>], k: usize, seed: u64, restarts: usize) -> Result<KMeansRun> {
    if rows.is_empty() {
        return Err(Error::InsufficientData { required: 1, actual: 0 });
    }
    if k == 0 || k > rows.len() {
        return Err(Error::param("k", format!("{k} not in 1..={}", rows.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64);
    let mut best: Option<KMeansRun> = None;
    for _ in 0..restarts.max(1) {
        let run = lloyd(rows, plus_plus_seed(rows, k, &mut rng));
        if best.as_ref().is_none_or(|b| run.labeling.inertia < b.labeling.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

pub fn kmeans_fit(days: &DayMatrix, k: usize, seed: u64, restarts: usize) -> Result<Labeling> {
    Ok(kmeans_rows(days.rows(), k, seed, restarts)?.labeling)
}

/// Pairwise Euclidean distances.
pub fn distance_matrix(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = rows.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = sq_dist(&rows[i], &rows[j]).sqrt();
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    d
}

/// Mean silhouette over precomputed distances. Singletons score 0, as does
/// a point with `a = b = 0`.
pub fn silhouette_from_distances(dist: &[Vec<f64>], labels: &[usize], k: usize) -> Result<f64> {
    if k < 2 {
        return Err(Error::param("k", "silhouette needs at least 2 clusters"));
    }
    let n = labels.len();
    if n == 0 {
        return Err(Error::InsufficientData { required: 1, actual: 0 });
    }
    let mut sizes = vec![0usize; k];
    for &l in labels {
        if l >= k {
            return Err(Error::param("labels", format!("label {l} >= k = {k}")));
        }
        sizes[l] += 1;
    }
    let mut total = 0.0;
    for i in 0..n {
        let own = labels[i];
        if sizes[own] <= 1 {
            continue;
        }
        let mut sums = vec![0.0; k];
        for j in 0..n {
            if j != i {
                sums[labels[j]] += dist[i][j];
            }
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        if !b.is_finite() {
            continue;
        }
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / n as f64)
}

pub fn silhouette_score(days: &DayMatrix, labeling: &Labeling) -> Result<f64> {
    if labeling.labels.len() != days.len() {
        return Err(Error::param("labeling", "label count differs from day count"));
    }
    silhouette_from_distances(&distance_matrix(days.rows()), &labeling.labels, labeling.k)
}

/// Index of the highest score; earlier entries win exact ties.
pub fn pick_best(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        if best.is_none_or(|b| *s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Fits every `k` in `k_min..=k_max` (capped at the day count) and keeps the
/// labeling with the highest silhouette, preferring smaller `k` on ties.
pub fn select_clustering(days: &DayMatrix, k_min: usize, k_max: usize, seed: u64, restarts: usize) -> Result<Labeling> {
    if k_min < 2 || k_max < k_min {
        return Err(Error::param("k_range", format!("{k_min}..={k_max} must satisfy 2 <= min <= max")));
    }
    let upper = k_max.min(days.len());
    if upper < k_min {
        return Err(Error::InsufficientData {
            required: k_min,
            actual: days.len(),
        });
    }
    let dist = distance_matrix(days.rows());
    let fits: Vec<(Labeling, f64)> = (k_min..=upper)
        .into_par_iter()
        .map(|k| {
            let l = kmeans_rows(days.rows(), k, seed, restarts)?.labeling;
            let s = silhouette_from_distances(&dist, &l.labels, k)?;
            Ok((l, s))
        })
        .collect::<Result<_>>()?;
    let scores: Vec<f64> = fits.iter().map(|(_, s)| *s).collect();
    let best = pick_best(&scores).expect("non-empty range");
    Ok(fits.into_iter().nth(best).expect("index in range").0)
}
