//! Feature-space partitioning.
//!
//! K-means (k-means++ seeded, Lloyd refined) discovers part groups inside the
//! labeled features of one class. A SLIC-style clustering over `(features, position)`
//! groups the cells of unlabeled grids into regions, which [`pool_regions`]
//! mean-pools into region-level features.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{mismatch, Error, Result};
use crate::tensor::{FeatureGrid, FeatureVector};

/// Centroids closer than this are considered collapsed.
const COLLAPSE_DIST: f64 = 1e-9;

/// Independent k-means++ restarts; the lowest-SSE result wins.
const RESTARTS: usize = 3;

/// Assignment of items to `group_count` non-empty groups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    assignments: Vec<usize>,
    group_count: usize,
}

impl Partition {
    /// Builds a partition, checking that every group index is in range and used.
    pub fn new(assignments: Vec<usize>, group_count: usize) -> Result<Self> {
        let mut used = vec![false; group_count];
        for &g in &assignments {
            if g >= group_count {
                return Err(mismatch(format!("group {g} out of range 0..{group_count}")));
            }
            used[g] = true;
        }
        if used.iter().any(|u| !u) {
            return Err(Error::InvalidConfig("partition has an empty group".into()));
        }
        Ok(Self {
            assignments,
            group_count,
        })
    }

    pub fn assignments(&self) -> &[usize] {
        &self.assignments
    }

    pub fn group_count(&self) -> usize {
        self.group_count
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    /// Member indices of every group, each in increasing order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.group_count];
        for (i, &g) in self.assignments.iter().enumerate() {
            groups[g].push(i);
        }
        groups
    }

    /// Per-group arithmetic means of `points`.
    pub fn means(&self, points: &[&[f32]]) -> Vec<FeatureVector> {
        group_means(points, &self.assignments, self.group_count)
            .into_iter()
            .map(|m| m.into_iter().map(|v| v as f32).collect())
            .collect()
    }

    /// Within-group sum of squared distances to the group means.
    pub fn sse(&self, points: &[&[f32]]) -> f64 {
        let means = group_means(points, &self.assignments, self.group_count);
        points
            .iter()
            .zip(&self.assignments)
            .map(|(p, &g)| sq_dist(p, &means[g]))
            .sum()
    }

    /// Relabels groups by order of first appearance.
    fn canonical(assignments: &[usize]) -> Self {
        let mut relabel: Vec<Option<usize>> = Vec::new();
        let mut next = 0;
        let mut out = Vec::with_capacity(assignments.len());
        for &g in assignments {
            if relabel.len() <= g {
                relabel.resize(g + 1, None);
            }
            let id = *relabel[g].get_or_insert_with(|| {
                next += 1;
                next - 1
            });
            out.push(id);
        }
        Self {
            assignments: out,
            group_count: next,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansOptions {
    pub max_iter: usize,
    /// Lloyd stops once no centroid moves further than this.
    pub tol: f64,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            max_iter: 50,
            tol: 1e-6,
        }
    }
}

/// Squared distance, summed in eight interleaved lanes so it vectorizes.
fn sq_dist(a: &[f32], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += (*x as f64 - y).powi(2);
    }
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            let d = x[l] as f64 - y[l];
            acc[l] += d * d;
        }
    }
    acc.iter().sum::<f64>() + tail
}

fn sq_dist32(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += (x - y).powi(2);
    }
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            let d = x[l] - y[l];
            acc[l] += d * d;
        }
    }
    acc.iter().sum::<f32>() + tail
}

fn sq_dist64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn group_means(points: &[&[f32]], assignments: &[usize], groups: usize) -> Vec<Vec<f64>> {
    let dim = points.first().map_or(0, |p| p.len());
    let mut sums = vec![vec![0.0f64; dim]; groups];
    let mut counts = vec![0usize; groups];
    for (p, &g) in points.iter().zip(assignments) {
        counts[g] += 1;
        for (s, &v) in sums[g].iter_mut().zip(p.iter()) {
            *s += v as f64;
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        if n > 0 {
            s.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    sums
}

fn nearest(point: &[f32], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Number of distinct points, counting no further than `limit`.
fn distinct_points(points: &[&[f32]], limit: usize) -> usize {
    let mut seen: Vec<&[f32]> = Vec::new();
    for p in points {
        if !seen.iter().any(|s| s == p) {
            seen.push(p);
            if seen.len() == limit {
                break;
            }
        }
    }
    seen.len()
}

/// Lloyd's K-means with greedy k-means++ seeding.
///
/// The effective number of groups is `min(k, distinct points)`. Groups are
/// numbered by first appearance in `points`, so the result is independent of
/// the order in which centroids were seeded.
pub fn kmeans_partition(points: &[&[f32]], k: usize, seed: u64) -> Result<Partition> {
    kmeans_partition_with(points, k, seed, &KMeansOptions::default())
}

pub fn kmeans_partition_with(
    points: &[&[f32]],
    k: usize,
    seed: u64,
    options: &KMeansOptions,
) -> Result<Partition> {
    if points.is_empty() || k == 0 {
        return Err(Error::EmptyInput);
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(mismatch("k-means points have differing lengths"));
    }
    let k = distinct_points(points, k);
    if k == 1 {
        return Ok(Partition {
            assignments: vec![0; points.len()],
            group_count: 1,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..RESTARTS {
        let centroids = seed_plus_plus(points, k, &mut rng);
        let assignments = lloyd(points, centroids, options);
        let sse = Partition::canonical(&assignments).sse(points);
        if best.as_ref().is_none_or(|(b, _)| sse < *b) {
            best = Some((sse, assignments));
        }
    }
    let (_, assignments) = best.expect("at least one restart");
    Ok(Partition::canonical(&assignments))
}

fn seed_plus_plus(points: &[&[f32]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let to64 = |p: &[f32]| p.iter().map(|&v| v as f64).collect::<Vec<_>>();
    let first = rng.gen_range(0..points.len());
    let mut centroids = vec![to64(points[first])];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    let trials = 2 + (k as f64).ln().floor() as usize;

    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut pick: Option<(f64, usize, Vec<f64>)> = None;
        for _ in 0..trials {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut idx = d2.iter().rposition(|&d| d > 0.0).unwrap_or(0);
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > target && d > 0.0 {
                    idx = i;
                    break;
                }
            }
            let cand = to64(points[idx]);
            let potential: Vec<f64> = points
                .iter()
                .zip(&d2)
                .map(|(p, &d)| d.min(sq_dist(p, &cand)))
                .collect();
            let score: f64 = potential.iter().sum();
            if pick.as_ref().is_none_or(|(s, _, _)| score < *s) {
                pick = Some((score, idx, potential));
            }
        }
        let (_, idx, potential) = pick.expect("trials >= 2");
        centroids.push(to64(points[idx]));
        d2 = potential;
    }
    centroids
}

fn lloyd(points: &[&[f32]], mut centroids: Vec<Vec<f64>>, options: &KMeansOptions) -> Vec<usize> {
    let k = centroids.len();
    let mut assignments: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
    for _ in 0..options.max_iter {
        repair_empty_groups(points, &mut assignments, &centroids);
        let means = group_means(points, &assignments, k);
        let shift = means
            .iter()
            .zip(&centroids)
            .map(|(a, b)| sq_dist64(a, b))
            .fold(0.0f64, f64::max)
            .sqrt();
        centroids = means;
        let reseeded = reseed_collapsed(points, &assignments, &mut centroids);

        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
        let stable = next == assignments;
        assignments = next;
        if !reseeded && (stable || shift <= options.tol) {
            break;
        }
    }
    repair_empty_groups(points, &mut assignments, &centroids);
    assignments
}

/// Moves the point farthest from its centroid into each empty group.
fn repair_empty_groups(points: &[&[f32]], assignments: &mut [usize], centroids: &[Vec<f64>]) {
    let k = centroids.len();
    loop {
        let mut counts = vec![0usize; k];
        assignments.iter().for_each(|&g| counts[g] += 1);
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let donor = (0..points.len())
            .filter(|&i| counts[assignments[i]] > 1)
            .map(|i| (i, sq_dist(points[i], &centroids[assignments[i]])))
            .fold(None::<(usize, f64)>, |best, (i, d)| match best {
                Some((_, bd)) if bd >= d => best,
                _ => Some((i, d)),
            });
        match donor {
            Some((i, _)) => assignments[i] = empty,
            None => return,
        }
    }
}

/// Re-seeds the later of two collapsed centroids at the farthest point.
fn reseed_collapsed(points: &[&[f32]], assignments: &[usize], centroids: &mut [Vec<f64>]) -> bool {
    let mut reseeded = false;
    for b in 1..centroids.len() {
        if (0..b).any(|a| sq_dist64(&centroids[a], &centroids[b]).sqrt() <= COLLAPSE_DIST) {
            let far = (0..points.len())
                .map(|i| (i, sq_dist(points[i], &centroids[assignments[i]])))
                .fold(
                    (0, -1.0),
                    |best, (i, d)| if d > best.1 { (i, d) } else { best },
                );
            if far.1 > 0.0 {
                centroids[b] = points[far.0].iter().map(|&v| v as f64).collect();
                reseeded = true;
            }
        }
    }
    reseeded
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlicOptions {
    pub compactness: f64,
    pub iters: usize,
}

impl Default for SlicOptions {
    fn default() -> Self {
        Self {
            compactness: 0.1,
            iters: 10,
        }
    }
}

/// SLIC-style clustering of the cells of a feature grid.
///
/// Distance is `|f - f_c| + compactness * |(r, c) - (r_c, c_c)| / S` with
/// `S = sqrt(H * W / n_regions)`. Centers start on a regular lattice and are
/// refined by `iters` Lloyd updates over all cells. Empty regions are dropped
/// and the survivors renumbered in order.
pub fn slic_feature_regions(
    grid: &FeatureGrid,
    n_regions: usize,
    compactness: f64,
    iters: usize,
) -> Partition {
    let (h, w) = (grid.height(), grid.width());
    let n = n_regions.clamp(1, grid.cell_count());
    let step = ((h * w) as f64 / n as f64).sqrt();
    let spatial_scale = compactness / step;

    // Center features are kept in f32; the search only needs the nearest one.
    let mut centers: Vec<(f64, f64, Vec<f32>)> = lattice(h, w, n)
        .into_iter()
        .map(|(y, x)| {
            let r = (y.round() as usize).min(h - 1);
            let c = (x.round() as usize).min(w - 1);
            (y, x, grid.cell(r, c).to_vec())
        })
        .collect();

    let assign = |centers: &[(f64, f64, Vec<f32>)]| -> Vec<usize> {
        (0..h * w)
            .map(|idx| {
                let (r, c) = ((idx / w) as f64, (idx % w) as f64);
                let f = grid.cell_at(idx);
                let mut best = (0, f64::INFINITY);
                for (i, (y, x, fc)) in centers.iter().enumerate() {
                    let d = (sq_dist32(f, fc) as f64).sqrt()
                        + spatial_scale * ((r - y).powi(2) + (c - x).powi(2)).sqrt();
                    if d < best.1 {
                        best = (i, d);
                    }
                }
                best.0
            })
            .collect()
    };

    let mut labels = assign(&centers);
    for _ in 0..iters {
        let mut acc = vec![(0.0f64, 0.0f64, vec![0.0f64; grid.channels()], 0usize); centers.len()];
        for (idx, &g) in labels.iter().enumerate() {
            let a = &mut acc[g];
            a.0 += (idx / w) as f64;
            a.1 += (idx % w) as f64;
            for (s, &v) in a.2.iter_mut().zip(grid.cell_at(idx)) {
                *s += v as f64;
            }
            a.3 += 1;
        }
        for (center, (ys, xs, fs, count)) in centers.iter_mut().zip(acc) {
            if count > 0 {
                let n = count as f64;
                *center = (
                    ys / n,
                    xs / n,
                    fs.into_iter().map(|v| (v / n) as f32).collect(),
                );
            }
        }
        let next = assign(&centers);
        if next == labels {
            break;
        }
        labels = next;
    }
    compact(&labels, centers.len())
}

/// Roughly uniform lattice of exactly `n` continuous center positions.
fn lattice(h: usize, w: usize, n: usize) -> Vec<(f64, f64)> {
    let rows = ((n as f64 * h as f64 / w as f64).sqrt().round() as usize).clamp(1, h.min(n));
    let mut out = Vec::with_capacity(n);
    for i in 0..rows {
        let count = n * (i + 1) / rows - n * i / rows;
        let y = (i as f64 + 0.5) * h as f64 / rows as f64 - 0.5;
        for j in 0..count {
            let x = (j as f64 + 0.5) * w as f64 / count as f64 - 0.5;
            out.push((y, x));
        }
    }
    out
}

fn compact(labels: &[usize], groups: usize) -> Partition {
    let mut used = vec![false; groups];
    labels.iter().for_each(|&g| used[g] = true);
    let mut remap = vec![0; groups];
    let mut next = 0;
    for (g, &u) in used.iter().enumerate() {
        if u {
            remap[g] = next;
            next += 1;
        }
    }
    Partition {
        assignments: labels.iter().map(|&g| remap[g]).collect(),
        group_count: next,
    }
}

/// Where a pooled region came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionSource {
    pub image: usize,
    pub cells: Vec<usize>,
}

/// Mean-pooled region features with provenance.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RegionPool {
    pub regions: Vec<FeatureVector>,
    pub sources: Vec<RegionSource>,
}

impl RegionPool {
    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn extend(&mut self, other: RegionPool) {
        self.regions.extend(other.regions);
        self.sources.extend(other.sources);
    }

    /// Sub-pool of the regions at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> RegionPool {
        RegionPool {
            regions: indices.iter().map(|&i| self.regions[i].clone()).collect(),
            sources: indices.iter().map(|&i| self.sources[i].clone()).collect(),
        }
    }
}

/// Average-pools the cells of each region of `partition`.
pub fn pool_regions(
    grid: &FeatureGrid,
    partition: &Partition,
    image_index: usize,
) -> Result<RegionPool> {
    if partition.len() != grid.cell_count() {
        return Err(mismatch(format!(
            "partition covers {} cells, grid has {}",
            partition.len(),
            grid.cell_count()
        )));
    }
    let cells: Vec<&[f32]> = grid.cells().collect();
    Ok(RegionPool {
        regions: partition.means(&cells),
        sources: partition
            .members()
            .into_iter()
            .map(|cells| RegionSource {
                image: image_index,
                cells,
            })
            .collect(),
    })
}

/// Region pool over all unlabeled grids, splitting `n_regions` evenly
/// (`ceil(n_regions / grids)` per grid).
pub fn unlabeled_region_pool(
    grids: &[FeatureGrid],
    n_regions: usize,
    options: &SlicOptions,
) -> Result<RegionPool> {
    let mut pool = RegionPool::default();
    if grids.is_empty() {
        return Ok(pool);
    }
    let per_grid = n_regions.div_ceil(grids.len()).max(1);
    for (i, grid) in grids.iter().enumerate() {
        let partition = slic_feature_regions(grid, per_grid, options.compactness, options.iters);
        pool.extend(pool_regions(grid, &partition, i)?);
    }
    Ok(pool)
}
