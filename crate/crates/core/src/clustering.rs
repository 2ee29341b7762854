//! Partitioning of embedding vectors with k-means, DBSCAN and mean-shift.

use std::collections::VecDeque;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{argument, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterMethod {
    KMeans,
    Dbscan,
    MeanShift,
}

impl fmt::Display for ClusterMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClusterMethod::KMeans => "kmeans",
            ClusterMethod::Dbscan => "dbscan",
            ClusterMethod::MeanShift => "meanshift",
        })
    }
}

impl FromStr for ClusterMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kmeans" => Ok(Self::KMeans),
            "dbscan" => Ok(Self::Dbscan),
            "meanshift" => Ok(Self::MeanShift),
            _ => Err(argument(format!("unknown clustering method `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Euclidean,
    /// Euclidean distance between unit-normalised vectors.
    Cosine,
}

/// Result of clustering: one label per point, `None` for DBSCAN noise.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub labels: Vec<Option<usize>>,
    pub num_clusters: usize,
    pub method: ClusterMethod,
    /// Final k-means objective.
    pub objective: Option<f64>,
    /// k-means objective after every assignment step.
    pub objective_history: Vec<f64>,
}

impl ClusterAssignment {
    fn new(labels: Vec<Option<usize>>, num_clusters: usize, method: ClusterMethod) -> Self {
        Self {
            labels,
            num_clusters,
            method,
            objective: None,
            objective_history: Vec::new(),
        }
    }

    /// Member indices of every cluster, in cluster order.
    pub fn clusters(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_clusters];
        for (i, label) in self.labels.iter().enumerate() {
            if let Some(c) = label {
                out[*c].push(i);
            }
        }
        out
    }

    pub fn noise_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_none()).count()
    }
}

/// Parameters for [`cluster`]. Unset hyperparameters fall back to the
/// data-driven defaults of [`ClusterConfig::resolve`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub method: ClusterMethod,
    pub k: Option<usize>,
    pub max_iter: usize,
    pub eps: Option<f64>,
    pub min_pts: usize,
    pub bandwidth: Option<f64>,
    pub seed: u64,
    #[serde(default)]
    pub metric: Metric,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            method: ClusterMethod::KMeans,
            k: None,
            max_iter: 100,
            eps: None,
            min_pts: 4,
            bandwidth: None,
            seed: 0,
            metric: Metric::Euclidean,
        }
    }
}

impl ClusterConfig {
    /// Fills unset hyperparameters: `k = round(sqrt(n / 2))`, `eps` = median
    /// 4-NN distance, `bandwidth` = median pairwise distance over at most
    /// 1,000 points.
    pub fn resolve(&self, points: &[Vec<f64>]) -> Self {
        let n = points.len();
        let mut out = self.clone();
        if out.k.is_none() {
            out.k = Some(((n as f64 / 2.0).sqrt().round() as usize).clamp(1, n.max(1)));
        }
        if out.eps.is_none() && self.method == ClusterMethod::Dbscan {
            out.eps = Some(median_knn_distance(points, 4));
        }
        if out.bandwidth.is_none() && self.method == ClusterMethod::MeanShift {
            out.bandwidth = Some(median_pairwise_distance(points, 1000, self.seed));
        }
        out
    }
}

/// Runs the configured method after resolving defaults.
pub fn cluster(points: &[Vec<f64>], config: &ClusterConfig) -> Result<ClusterAssignment> {
    let normalised;
    let points = match config.metric {
        Metric::Euclidean => points,
        Metric::Cosine => {
            normalised = points.iter().map(|p| unit(p)).collect::<Vec<_>>();
            &normalised[..]
        }
    };
    let cfg = config.resolve(points);
    match cfg.method {
        ClusterMethod::KMeans => kmeans(points, cfg.k.unwrap_or(1), cfg.max_iter, cfg.seed),
        ClusterMethod::Dbscan => dbscan(points, cfg.eps.unwrap_or(f64::MIN_POSITIVE), cfg.min_pts),
        ClusterMethod::MeanShift => mean_shift(points, cfg.bandwidth.unwrap_or(1.0)),
    }
}

fn unit(p: &[f64]) -> Vec<f64> {
    let norm = p.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        p.to_vec()
    } else {
        p.iter().map(|x| x / norm).collect()
    }
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    sq_dist(a, b).sqrt()
}

fn median(mut values: Vec<f64>) -> f64 {
    if values.is_empty() {
        return 1.0;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median over points of the distance to the k-th nearest other point.
pub fn median_knn_distance(points: &[Vec<f64>], k: usize) -> f64 {
    let kth: Vec<f64> = points
        .par_iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let mut d: Vec<f64> = points
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, q)| dist(p, q))
                .collect();
            if d.is_empty() {
                return None;
            }
            d.sort_by(f64::total_cmp);
            Some(d[(k.max(1) - 1).min(d.len() - 1)])
        })
        .collect();
    let m = median(kth);
    if m > 0.0 {
        m
    } else {
        f64::MIN_POSITIVE
    }
}

/// Median pairwise distance over a seeded subsample of at most `limit` points.
pub fn median_pairwise_distance(points: &[Vec<f64>], limit: usize, seed: u64) -> f64 {
    let idx: Vec<usize> = if points.len() > limit {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = rand::seq::index::sample(&mut rng, points.len(), limit).into_vec();
        v.sort_unstable();
        v
    } else {
        (0..points.len()).collect()
    };
    let mut d = Vec::with_capacity(idx.len() * idx.len().saturating_sub(1) / 2);
    for (a, &i) in idx.iter().enumerate() {
        for &j in &idx[a + 1..] {
            d.push(dist(&points[i], &points[j]));
        }
    }
    let m = median(d);
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

fn check_dims(points: &[Vec<f64>]) -> Result<()> {
    if let Some(first) = points.first() {
        if points.iter().any(|p| p.len() != first.len()) {
            return Err(crate::error::shape("points have differing dimensionality"));
        }
    }
    Ok(())
}

/// Index and squared distance of the nearest centroid; ties go to the lower index.
fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(p, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans_pp(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = Vec::with_capacity(k);
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    centroids.push(points[first].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[first])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 {
                    pick = Some(i);
                    if target < d {
                        break;
                    }
                    target -= d;
                }
            }
            pick.expect("positive total implies a positive weight")
        } else {
            // every remaining point coincides with a centroid
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[next] = true;
        centroids.push(points[next].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &points[next]));
        }
    }
    centroids
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// Stops when assignments no longer change or after `max_iter` assignment
/// steps. Empty clusters keep their previous centroid, so the objective
/// never increases between steps.
pub fn kmeans(points: &[Vec<f64>], k: usize, max_iter: usize, seed: u64) -> Result<ClusterAssignment> {
    check_dims(points)?;
    let n = points.len();
    if k == 0 || k > n {
        return Err(argument(format!("k = {k} must lie in 1..={n}")));
    }
    let dim = points[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp(points, k, &mut rng);
    let mut labels: Vec<usize> = vec![usize::MAX; n];
    let mut history = Vec::new();

    for _ in 0..max_iter.max(1) {
        let assigned: Vec<(usize, f64)> = points.par_iter().map(|p| nearest(p, &centroids)).collect();
        let objective: f64 = assigned.iter().map(|a| a.1).sum();
        let changed = assigned.iter().zip(&labels).any(|(a, &l)| a.0 != l);
        for (l, a) in labels.iter_mut().zip(&assigned) {
            *l = a.0;
        }
        history.push(objective);
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, x) in sums[l].iter_mut().zip(p) {
                *s += x;
            }
        }
        for ((centroid, sum), &count) in centroids.iter_mut().zip(sums).zip(&counts) {
            if count > 0 {
                *centroid = sum.into_iter().map(|s| s / count as f64).collect();
            }
        }
    }

    // Compact away clusters that ended up empty so ids stay dense.
    let mut remap = vec![None; k];
    let mut next = 0;
    for &l in &labels {
        if remap[l].is_none() {
            remap[l] = Some(next);
            next += 1;
        }
    }
    let mut out = ClusterAssignment::new(
        labels.iter().map(|&l| remap[l]).collect(),
        next,
        ClusterMethod::KMeans,
    );
    out.objective = history.last().copied();
    out.objective_history = history;
    Ok(out)
}

/// Density-based clustering with Euclidean `eps`-neighbourhoods (inclusive,
/// counting the point itself).
///
/// Clusters are the connected components of core points, numbered by their
/// lowest point index. A border point joins the lowest-numbered cluster
/// among its core neighbours, so the result does not depend on visit order.
pub fn dbscan(points: &[Vec<f64>], eps: f64, min_pts: usize) -> Result<ClusterAssignment> {
    check_dims(points)?;
    if eps.is_nan() || eps <= 0.0 {
        return Err(argument("eps must be positive"));
    }
    if min_pts == 0 {
        return Err(argument("min_pts must be at least 1"));
    }
    let n = points.len();
    let eps2 = eps * eps;
    let neighbours: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .filter(|&j| sq_dist(&points[i], &points[j]) <= eps2)
                .collect()
        })
        .collect();
    let core: Vec<bool> = neighbours.iter().map(|nb| nb.len() >= min_pts).collect();

    let mut labels: Vec<Option<usize>> = vec![None; n];
    let mut clusters = 0;
    let mut queue = VecDeque::new();
    for start in 0..n {
        if !core[start] || labels[start].is_some() {
            continue;
        }
        let id = clusters;
        clusters += 1;
        labels[start] = Some(id);
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            for &q in &neighbours[p] {
                if labels[q].is_none() {
                    // clusters are expanded one at a time in id order, so the
                    // first claim on a border point is the lowest id
                    labels[q] = Some(id);
                    if core[q] {
                        queue.push_back(q);
                    }
                }
            }
        }
    }
    Ok(ClusterAssignment::new(labels, clusters, ClusterMethod::Dbscan))
}

/// Flat-kernel mean-shift. Each point climbs to a mode by repeatedly moving
/// to the mean of all points within `bandwidth`; modes closer than
/// `bandwidth / 2` are merged into the earliest one.
pub fn mean_shift(points: &[Vec<f64>], bandwidth: f64) -> Result<ClusterAssignment> {
    check_dims(points)?;
    if bandwidth.is_nan() || bandwidth <= 0.0 {
        return Err(argument("bandwidth must be positive"));
    }
    const MAX_ITER: usize = 300;
    let bw2 = bandwidth * bandwidth;
    let tol2 = (1e-4 * bandwidth).powi(2);
    let modes: Vec<Vec<f64>> = points
        .par_iter()
        .map(|start| {
            let mut x = start.clone();
            for _ in 0..MAX_ITER {
                let mut sum = vec![0.0; x.len()];
                let mut count = 0usize;
                for p in points {
                    if sq_dist(p, &x) <= bw2 {
                        count += 1;
                        for (s, v) in sum.iter_mut().zip(p) {
                            *s += v;
                        }
                    }
                }
                if count == 0 {
                    break;
                }
                let next: Vec<f64> = sum.into_iter().map(|s| s / count as f64).collect();
                let shift = sq_dist(&next, &x);
                x = next;
                if shift <= tol2 {
                    break;
                }
            }
            x
        })
        .collect();

    let merge2 = (bandwidth / 2.0).powi(2);
    let mut centres: Vec<&[f64]> = Vec::new();
    let labels = modes
        .iter()
        .map(|m| {
            if let Some(c) = centres.iter().position(|c| sq_dist(c, m) <= merge2) {
                Some(c)
            } else {
                centres.push(m);
                Some(centres.len() - 1)
            }
        })
        .collect();
    Ok(ClusterAssignment::new(labels, centres.len(), ClusterMethod::MeanShift))
}

/// Writes `token cluster_id` lines, noise as `-1`.
pub fn write_assignment(path: &Path, tokens: &[String], assignment: &ClusterAssignment) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for (token, label) in tokens.iter().zip(&assignment.labels) {
        match label {
            Some(c) => writeln!(out, "{token} {c}")?,
            None => writeln!(out, "{token} -1")?,
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_assignment(path: &Path, method: ClusterMethod) -> Result<(Vec<String>, ClusterAssignment)> {
    let reader = BufReader::new(File::open(path)?);
    let mut tokens = Vec::new();
    let mut labels = Vec::new();
    let mut clusters = 0;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let bad = || Error::Parse {
            path: path.to_path_buf(),
            line: i as u64 + 1,
            message: "expected `token cluster_id`".into(),
        };
        let (token, id) = line.rsplit_once(' ').ok_or_else(bad)?;
        let id: i64 = id.parse().map_err(|_| bad())?;
        tokens.push(token.to_string());
        if id < 0 {
            labels.push(None);
        } else {
            clusters = clusters.max(id as usize + 1);
            labels.push(Some(id as usize));
        }
    }
    Ok((tokens, ClusterAssignment::new(labels, clusters, method)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(points: &[[f64; 2]]) -> Vec<Vec<f64>> {
        points.iter().map(|p| p.to_vec()).collect()
    }

    #[test]
    fn kmeans_singletons() {
        let pts = grid(&[[0.0, 0.0], [1.0, 0.0], [0.0, 3.0], [5.0, 5.0]]);
        let a = kmeans(&pts, 4, 50, 1).unwrap();
        assert_eq!(a.num_clusters, 4);
        assert_eq!(a.objective, Some(0.0));
    }

    #[test]
    fn kmeans_identical_points() {
        let pts = vec![vec![2.0, 2.0]; 6];
        let a = kmeans(&pts, 2, 50, 3).unwrap();
        assert_eq!(a.objective, Some(0.0));
    }

    #[test]
    fn kmeans_rejects_bad_k() {
        let pts = grid(&[[0.0, 0.0]]);
        assert!(kmeans(&pts, 2, 10, 0).is_err());
        assert!(kmeans(&pts, 0, 10, 0).is_err());
    }

    #[test]
    fn kmeans_matches_exhaustive_two_partition() {
        let pts = grid(&[
            [0.0, 0.0],
            [0.3, 0.1],
            [0.1, 0.4],
            [0.2, 0.2],
            [9.0, 9.0],
            [9.2, 8.9],
            [8.8, 9.3],
            [9.1, 9.1],
        ]);
        // oracle: best objective over every 2-partition
        let n = pts.len();
        let mut best = f64::INFINITY;
        for mask in 1u32..(1 << n) - 1 {
            let mut sse = 0.0;
            for side in [true, false] {
                let members: Vec<&Vec<f64>> =
                    (0..n).filter(|&i| ((mask >> i) & 1 == 1) == side).map(|i| &pts[i]).collect();
                let c: Vec<f64> = (0..2)
                    .map(|d| members.iter().map(|p| p[d]).sum::<f64>() / members.len() as f64)
                    .collect();
                sse += members.iter().map(|p| sq_dist(p, &c)).sum::<f64>();
            }
            best = best.min(sse);
        }
        let a = kmeans(&pts, 2, 100, 11).unwrap();
        approx::assert_relative_eq!(a.objective.unwrap(), best, max_relative = 1e-12);
    }

    #[test]
    fn kmeans_is_deterministic() {
        let pts: Vec<Vec<f64>> = (0..40).map(|i| vec![(i * 7 % 13) as f64, (i * 3 % 11) as f64]).collect();
        let a = kmeans(&pts, 5, 100, 42).unwrap();
        let b = kmeans(&pts, 5, 100, 42).unwrap();
        assert_eq!(a, b);
        assert!(a.objective_history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn dbscan_tiny_eps_is_all_noise() {
        let pts = grid(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
        let a = dbscan(&pts, 0.5, 2).unwrap();
        assert_eq!(a.noise_count(), 3);
        assert_eq!(a.num_clusters, 0);
    }

    #[test]
    fn dbscan_min_pts_one_has_no_noise() {
        let pts = grid(&[[0.0, 0.0], [1.0, 0.0], [10.0, 1.0]]);
        let a = dbscan(&pts, 0.5, 1).unwrap();
        assert_eq!(a.noise_count(), 0);
        assert_eq!(a.num_clusters, 3);
    }

    #[test]
    fn dbscan_border_joins_lowest_cluster() {
        // two dense groups with a border point reachable from both
        let pts = grid(&[
            [0.0, 0.0],
            [0.1, 0.0],
            [0.2, 0.0],
            [0.3, 0.0],
            [1.0, 0.0],
            [1.7, 0.0],
            [1.8, 0.0],
            [1.9, 0.0],
            [2.0, 0.0],
        ]);
        let a = dbscan(&pts, 0.75, 4).unwrap();
        assert_eq!(a.num_clusters, 2);
        assert_eq!(a.labels[4], Some(0));
        assert_eq!(a.labels[5], Some(1));
        assert!(dbscan(&pts, 0.0, 3).is_err());
    }

    #[test]
    fn mean_shift_basics() {
        let one = grid(&[[3.0, 4.0]]);
        assert_eq!(mean_shift(&one, 1.0).unwrap().num_clusters, 1);
        let pts = grid(&[[0.0, 0.0], [1.0, 1.0], [2.0, 0.5], [0.5, 2.0]]);
        assert_eq!(mean_shift(&pts, 10.0).unwrap().num_clusters, 1);
        assert!(mean_shift(&pts, 0.0).is_err());
    }

    #[test]
    fn mean_shift_two_blobs() {
        let bw = 1.0;
        let mut pts = Vec::new();
        for i in 0..10 {
            let t = i as f64 * 0.03;
            pts.push(vec![t, -t]);
            pts.push(vec![10.0 * bw + t, t]);
        }
        let a = mean_shift(&pts, bw).unwrap();
        assert_eq!(a.num_clusters, 2);
        assert_ne!(a.labels[0], a.labels[1]);
    }

    #[test]
    fn defaults_resolve() {
        let pts: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64, 0.0]).collect();
        let cfg = ClusterConfig::default().resolve(&pts);
        assert_eq!(cfg.k, Some(5));
        let cfg = ClusterConfig { method: ClusterMethod::Dbscan, ..Default::default() }.resolve(&pts);
        assert_eq!(cfg.eps, Some(2.0));
        let cfg = ClusterConfig { method: ClusterMethod::MeanShift, ..Default::default() }.resolve(&pts);
        assert!(cfg.bandwidth.unwrap() > 0.0);
    }

    #[test]
    fn assignment_file_round_trip() {
        let tokens: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let a = ClusterAssignment::new(vec![Some(1), None, Some(0)], 2, ClusterMethod::Dbscan);
        let f = tempfile::NamedTempFile::new().unwrap();
        write_assignment(f.path(), &tokens, &a).unwrap();
        let (t, b) = read_assignment(f.path(), ClusterMethod::Dbscan).unwrap();
        assert_eq!((t, b), (tokens, a));
    }
}
