//! Exhaustive-partition optimum for tiny K-means instances, and a Lloyd
//! fixed-point checker.

#![allow(dead_code)]

use partseg::clustering::{kmeans_partition, Partition};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn sse_of(points: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    let dim = points[0].len();
    let mut total = 0.0;
    for g in 0..k {
        let members: Vec<&Vec<f64>> = points
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == g)
            .map(|(p, _)| p)
            .collect();
        if members.is_empty() {
            continue;
        }
        let mean: Vec<f64> = (0..dim)
            .map(|d| members.iter().map(|p| p[d]).sum::<f64>() / members.len() as f64)
            .collect();
        total += members
            .iter()
            .map(|p| {
                p.iter()
                    .zip(&mean)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
            })
            .sum::<f64>();
    }
    total
}

/// Smallest SSE over every partition into at most `k` groups, by
/// enumerating restricted growth strings.
pub fn optimal_sse(points: &[Vec<f64>], k: usize) -> f64 {
    fn walk(points: &[Vec<f64>], k: usize, labels: &mut Vec<usize>, used: usize, best: &mut f64) {
        if labels.len() == points.len() {
            *best = best.min(sse_of(points, labels, k));
            return;
        }
        for g in 0..(used + 1).min(k) {
            labels.push(g);
            walk(points, k, labels, used.max(g + 1), best);
            labels.pop();
        }
    }
    let mut best = f64::INFINITY;
    walk(points, k, &mut Vec::new(), 0, &mut best);
    best
}

/// Up to 8 points around `k <= 3` centres whose spacing is at least ten
/// times the spread.
pub fn blob_instance(seed: u64) -> (Vec<Vec<f32>>, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.gen_range(1..=3);
    let n = rng.gen_range(k..=8);
    let dim = rng.gen_range(1..=4);
    let spread = 0.1f64;
    let mut centres: Vec<Vec<f64>> = Vec::new();
    while centres.len() < k {
        let c: Vec<f64> = (0..dim).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let far = centres.iter().all(|o| {
            o.iter()
                .zip(&c)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
                >= 10.0 * spread
        });
        if far {
            centres.push(c);
        }
    }
    let points = (0..n)
        .map(|i| {
            let c = &centres[i % k];
            c.iter()
                .map(|&v| (v + spread * rng.sample::<f64, _>(StandardNormal)) as f32)
                .collect()
        })
        .collect();
    (points, k)
}

/// Every centroid is its members' mean and every point sits with a nearest
/// centroid, the lowest index among equally near ones.
pub fn is_lloyd_fixed_point(points: &[&[f32]], partition: &Partition) -> Result<(), String> {
    let means = partition.means(points);
    for (g, members) in partition.members().iter().enumerate() {
        if members.is_empty() {
            return Err(format!("group {g} is empty"));
        }
        for d in 0..points[0].len() {
            let m =
                members.iter().map(|&i| points[i][d] as f64).sum::<f64>() / members.len() as f64;
            if (m - means[g][d] as f64).abs() > 1e-5 * (1.0 + m.abs()) {
                return Err(format!(
                    "group {g} centroid {} is not the member mean {m}",
                    means[g][d]
                ));
            }
        }
    }
    for (i, p) in points.iter().enumerate() {
        let dist: Vec<f64> = means
            .iter()
            .map(|m| {
                p.iter()
                    .zip(m)
                    .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
                    .sum()
            })
            .collect();
        let own = dist[partition.assignments()[i]];
        let best = dist.iter().copied().fold(f64::INFINITY, f64::min);
        if own > best + 1e-9 * (1.0 + best) {
            return Err(format!(
                "point {i} is {own} from its centroid, {best} from the nearest"
            ));
        }
        let first = dist
            .iter()
            .position(|&d| d <= best + 1e-9 * (1.0 + best))
            .unwrap();
        if first != partition.assignments()[i] {
            return Err(format!("point {i} tie not broken toward group {first}"));
        }
    }
    Ok(())
}

pub fn clustering_suite(instances: u64) -> Result<String, String> {
    for seed in 0..instances {
        let (points, k) = blob_instance(seed);
        let refs: Vec<&[f32]> = points.iter().map(|p| p.as_slice()).collect();
        let partition = kmeans_partition(&refs, k, seed).map_err(|e| e.to_string())?;
        let wide: Vec<Vec<f64>> = points
            .iter()
            .map(|p| p.iter().map(|&v| v as f64).collect())
            .collect();
        let optimum = optimal_sse(&wide, k);
        let sse = partition.sse(&refs);
        if (sse - optimum).abs() > 1e-9 * (1.0 + optimum) {
            return Err(format!(
                "instance {seed}: SSE {sse} vs exhaustive optimum {optimum}"
            ));
        }
        is_lloyd_fixed_point(&refs, &partition).map_err(|e| format!("instance {seed}: {e}"))?;
    }
    Ok(format!("{instances} instances at the exhaustive optimum"))
}
