//! Randomized identity and attention-normalization checks on the prototype
//! and refinement stages.

#![allow(dead_code)]

use partseg::clustering::{RegionPool, RegionSource};
use partseg::prototype::{add_class_context, context_weights};
use partseg::refine::{
    propagate_region_features, refine_with_regions, refinement_weights, AugmentedRegionSet,
};
use partseg::{MessageWeights, PrototypeSet, Stage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_vectors(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f32>> {
    (0..n)
        .map(|_| (0..dim).map(|_| rng.gen_range(-2.0f32..2.0)).collect())
        .collect()
}

pub fn region_pool(regions: Vec<Vec<f32>>) -> RegionPool {
    let sources = (0..regions.len())
        .map(|i| RegionSource {
            image: 0,
            cells: vec![i],
        })
        .collect();
    RegionPool { regions, sources }
}

fn clamped_cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na <= 1e-12 || nb <= 1e-12 {
        0.0
    } else {
        (dot / (na * nb)).max(0.0)
    }
}

/// Context with zero weight, refinement with zero weight or no regions, and
/// message passing with zero weights or a single region all return their
/// input bit for bit.
pub fn equation_identities(trials: usize, seed: u64) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in 0..trials {
        let dim = rng.gen_range(1..12);
        let parts = rng.gen_range(1..6);
        let raw = random_vectors(&mut rng, parts, dim);
        let initial =
            PrototypeSet::new(1, raw.clone(), Stage::Initial).map_err(|e| e.to_string())?;
        let ctx = add_class_context(&initial, 0.0).map_err(|e| e.to_string())?;
        if ctx.prototypes != raw {
            return Err(format!("trial {t}: zero context weight changed prototypes"));
        }

        let contextual =
            PrototypeSet::new(1, raw.clone(), Stage::Contextual).map_err(|e| e.to_string())?;
        let n_regions = rng.gen_range(1..8);
        let regions = random_vectors(&mut rng, n_regions, dim);
        let augmented = AugmentedRegionSet {
            regions: regions.clone(),
        };
        let no_lambda =
            refine_with_regions(&contextual, &augmented, 0.0).map_err(|e| e.to_string())?;
        let no_regions = refine_with_regions(&contextual, &AugmentedRegionSet::default(), 0.7)
            .map_err(|e| e.to_string())?;
        if no_lambda.prototypes != raw || no_regions.prototypes != raw {
            return Err(format!(
                "trial {t}: refinement without regions or weight changed prototypes"
            ));
        }

        let zero = MessageWeights::from_matrix(dim, vec![0.0; dim * dim], false)
            .map_err(|e| e.to_string())?;
        let passed = propagate_region_features(&region_pool(regions.clone()), &zero)
            .map_err(|e| e.to_string())?;
        if passed.regions != regions {
            return Err(format!("trial {t}: zero message weights changed regions"));
        }
        let random_w = MessageWeights::from_matrix(
            dim,
            random_vectors(&mut rng, 1, dim * dim).remove(0),
            false,
        )
        .map_err(|e| e.to_string())?;
        let single = propagate_region_features(&region_pool(regions[..1].to_vec()), &random_w)
            .map_err(|e| e.to_string())?;
        if single.regions != regions[..1] {
            return Err(format!(
                "trial {t}: a lone region changed under message passing"
            ));
        }
    }
    Ok(format!("{trials} randomized trials bit-exact"))
}

fn check_row(row: &[f64], sims: &[f64], tol: f64, what: &str) -> Result<f64, String> {
    if row.len() != sims.len() {
        return Err(format!(
            "{what}: row has {} weights for {} keys",
            row.len(),
            sims.len()
        ));
    }
    if let Some(w) = row.iter().find(|w| !(**w >= 0.0)) {
        return Err(format!("{what}: negative weight {w}"));
    }
    let total: f64 = sims.iter().sum();
    if total > 0.0 {
        let err = (row.iter().sum::<f64>() - 1.0).abs();
        if err > tol {
            return Err(format!("{what}: row sums to 1 + {err:e}"));
        }
        for (w, s) in row.iter().zip(sims) {
            let expect = s / total;
            if (w - expect).abs() > tol {
                return Err(format!("{what}: weight {w} but clamped share {expect}"));
            }
        }
        return Ok(err);
    }
    Ok(0.0)
}

/// Context and refinement attention rows are non-negative, sum to one and
/// equal the clamped-cosine shares of an independent computation.
pub fn attention_suite(sets: usize, seed: u64, tol: f64) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for s in 0..sets {
        let dim = rng.gen_range(2..16);
        let (n_protos, n_regions) = (rng.gen_range(1..7), rng.gen_range(1..10));
        let protos = random_vectors(&mut rng, n_protos, dim);
        let regions = random_vectors(&mut rng, n_regions, dim);
        let set =
            PrototypeSet::new(1, protos.clone(), Stage::Contextual).map_err(|e| e.to_string())?;
        for (i, row) in context_weights(&set).iter().enumerate() {
            let sims: Vec<f64> = (0..protos.len())
                .filter(|&j| j != i)
                .map(|j| clamped_cosine(&protos[i], &protos[j]))
                .collect();
            worst = worst.max(check_row(
                row,
                &sims,
                tol,
                &format!("set {s} context row {i}"),
            )?);
        }
        let augmented = AugmentedRegionSet {
            regions: regions.clone(),
        };
        for (i, row) in refinement_weights(&set, &augmented).iter().enumerate() {
            let sims: Vec<f64> = regions
                .iter()
                .map(|r| clamped_cosine(&protos[i], r))
                .collect();
            worst = worst.max(check_row(
                row,
                &sims,
                tol,
                &format!("set {s} refinement row {i}"),
            )?);
        }
    }
    Ok(format!("{sets} sets, worst row-sum error {worst:e}"))
}
