//! Part prototypes from labeled support features.

use crate::clustering::{kmeans_partition_with, KMeansOptions};
use crate::error::{mismatch, Error, Result};
use crate::tensor::{affinity, FeatureVector};

/// Denominator guard for attention normalization.
pub const ATTENTION_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Initial,
    Contextual,
    Refined,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Initial => "initial",
            Stage::Contextual => "contextual",
            Stage::Refined => "refined",
        }
    }
}

/// Part prototypes of one class at a given processing stage.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    /// Episode-local class index; 0 is background.
    pub class_id: u8,
    pub prototypes: Vec<FeatureVector>,
    pub stage: Stage,
}

impl PrototypeSet {
    pub fn new(class_id: u8, prototypes: Vec<FeatureVector>, stage: Stage) -> Result<Self> {
        let Some(first) = prototypes.first() else {
            return Err(Error::EmptyClassFeatures);
        };
        let dim = first.len();
        if prototypes.iter().any(|p| p.len() != dim) {
            return Err(mismatch("prototypes have differing channel counts"));
        }
        if prototypes.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidEpisode("non-finite prototype".into()));
        }
        Ok(Self {
            class_id,
            prototypes,
            stage,
        })
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.prototypes[0].len()
    }

    pub(crate) fn expect_stage(&self, stage: Stage) -> Result<()> {
        if self.stage == stage {
            Ok(())
        } else {
            Err(Error::StageMismatch {
                expected: stage.name(),
                found: self.stage.name(),
            })
        }
    }
}

/// Normalized attention weights of one query against `keys`.
///
/// Affinities are cosines clamped at zero; the row is divided by its sum,
/// floored at [`ATTENTION_EPS`]. When every affinity is zero the row is uniform.
pub fn attention_row(query: &[f32], keys: &[&[f32]]) -> Vec<f64> {
    let sims: Vec<f64> = keys.iter().map(|k| affinity(query, k)).collect();
    normalize_row(sims)
}

pub(crate) fn normalize_row(sims: Vec<f64>) -> Vec<f64> {
    let total: f64 = sims.iter().sum();
    if total > 0.0 {
        let z = total.max(ATTENTION_EPS);
        sims.into_iter().map(|s| s / z).collect()
    } else {
        let n = sims.len() as f64;
        vec![1.0 / n; sims.len()]
    }
}

/// Context attention weights `mu[i][j]` over the other prototypes `j != i`,
/// listed in prototype order with `i` skipped.
pub fn context_weights(protos: &PrototypeSet) -> Vec<Vec<f64>> {
    let n = protos.len();
    (0..n)
        .map(|i| {
            let others: Vec<&[f32]> = (0..n)
                .filter(|&j| j != i)
                .map(|j| protos.prototypes[j].as_slice())
                .collect();
            if others.is_empty() {
                Vec::new()
            } else {
                attention_row(&protos.prototypes[i], &others)
            }
        })
        .collect()
}

/// Initial part prototypes: K-means groups of the class features, mean-pooled.
///
/// Yields `min(n_parts, distinct features)` prototypes ordered by group index.
pub fn initial_part_prototypes(
    class_id: u8,
    class_features: &[&[f32]],
    n_parts: usize,
    seed: u64,
) -> Result<PrototypeSet> {
    initial_part_prototypes_with(
        class_id,
        class_features,
        n_parts,
        seed,
        &KMeansOptions::default(),
    )
}

pub fn initial_part_prototypes_with(
    class_id: u8,
    class_features: &[&[f32]],
    n_parts: usize,
    seed: u64,
    options: &KMeansOptions,
) -> Result<PrototypeSet> {
    if class_features.is_empty() {
        return Err(Error::EmptyClassFeatures);
    }
    let partition = kmeans_partition_with(class_features, n_parts.max(1), seed, options)?;
    PrototypeSet::new(class_id, partition.means(class_features), Stage::Initial)
}

/// Augments every prototype with an attention-weighted context vector built
/// from the other prototypes of the same class.
pub fn add_class_context(protos: &PrototypeSet, lambda_p: f32) -> Result<PrototypeSet> {
    protos.expect_stage(Stage::Initial)?;
    let n = protos.len();
    let mut out = protos.prototypes.clone();
    if n > 1 && lambda_p != 0.0 {
        let lambda = lambda_p as f64;
        for (i, (target, weights)) in out.iter_mut().zip(context_weights(protos)).enumerate() {
            let others = (0..n).filter(|&j| j != i).map(|j| &protos.prototypes[j]);
            let mut context = vec![0.0f64; target.len()];
            for (w, other) in weights.iter().zip(others) {
                for (acc, &v) in context.iter_mut().zip(other) {
                    *acc += w * v as f64;
                }
            }
            for (value, c) in target.iter_mut().zip(context) {
                *value = (*value as f64 + lambda * c) as f32;
            }
        }
    }
    PrototypeSet::new(protos.class_id, out, Stage::Contextual)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn refs(points: &[Vec<f32>]) -> Vec<&[f32]> {
        points.iter().map(|p| p.as_slice()).collect()
    }

    #[test]
    fn identical_features_give_that_feature() {
        let feats = vec![vec![0.3, -1.0, 2.0]; 7];
        let p = initial_part_prototypes(1, &refs(&feats), 5, 1).unwrap();
        assert_eq!(p.prototypes, vec![vec![0.3, -1.0, 2.0]]);
        assert_eq!(p.stage, Stage::Initial);
    }

    #[test]
    fn single_part_is_global_mean() {
        let feats = vec![vec![1.0, 0.0], vec![3.0, 2.0], vec![2.0, 7.0]];
        let p = initial_part_prototypes(0, &refs(&feats), 1, 9).unwrap();
        assert_eq!(p.prototypes, vec![vec![2.0, 3.0]]);
    }

    #[test]
    fn two_blobs_give_blob_means() {
        let feats = vec![
            vec![0.0, 0.0],
            vec![20.0, 20.0],
            vec![1.0, 0.0],
            vec![21.0, 22.0],
            vec![0.0, 2.0],
        ];
        let p = initial_part_prototypes(2, &refs(&feats), 2, 5).unwrap();
        assert_eq!(
            p.prototypes,
            vec![vec![1.0 / 3.0, 2.0 / 3.0], vec![20.5, 21.0]]
        );
    }

    #[test]
    fn empty_features_rejected() {
        assert!(matches!(
            initial_part_prototypes(1, &[], 3, 0),
            Err(Error::EmptyClassFeatures)
        ));
    }

    #[test]
    fn context_identities() {
        let single = PrototypeSet::new(1, vec![vec![1.0, 2.0]], Stage::Initial).unwrap();
        assert_eq!(
            add_class_context(&single, 0.8).unwrap().prototypes,
            single.prototypes
        );

        let many = PrototypeSet::new(
            1,
            vec![vec![1.0, 2.0], vec![-3.0, 0.5], vec![0.1, 0.1]],
            Stage::Initial,
        )
        .unwrap();
        let out = add_class_context(&many, 0.0).unwrap();
        assert_eq!(out.prototypes, many.prototypes);
        assert_eq!(out.stage, Stage::Contextual);
    }

    #[test]
    fn context_two_prototypes() {
        let s = std::f32::consts::FRAC_1_SQRT_2;
        let protos =
            PrototypeSet::new(1, vec![vec![1.0, 0.0], vec![s, s]], Stage::Initial).unwrap();
        let out = add_class_context(&protos, 0.8).unwrap();
        // A single positive neighbour takes the whole weight.
        let want_a = [1.0 + 0.8 * s as f64, 0.8 * s as f64];
        let want_b = [s as f64 + 0.8, s as f64];
        for (got, want) in out.prototypes[0].iter().zip(want_a) {
            assert!((*got as f64 - want).abs() < 1e-6);
        }
        for (got, want) in out.prototypes[1].iter().zip(want_b) {
            assert!((*got as f64 - want).abs() < 1e-6);
        }
    }

    #[test]
    fn context_requires_initial_stage() {
        let p = PrototypeSet::new(1, vec![vec![1.0]], Stage::Contextual).unwrap();
        assert!(matches!(
            add_class_context(&p, 0.8),
            Err(Error::StageMismatch { .. })
        ));
    }

    #[test]
    fn attention_row_uniform_fallback() {
        let w = attention_row(&[1.0, 0.0], &[&[-1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(w, vec![0.5, 0.5]);
    }

    proptest! {
        #[test]
        fn context_is_permutation_equivariant(
            vals in prop::collection::vec(-5.0f32..5.0, 12),
            rot in 0usize..4,
        ) {
            let protos: Vec<Vec<f32>> = vals.chunks(3).map(|c| c.to_vec()).collect();
            let mut rotated = protos.clone();
            rotated.rotate_left(rot);
            let a = add_class_context(&PrototypeSet::new(0, protos, Stage::Initial).unwrap(), 0.8).unwrap();
            let b = add_class_context(&PrototypeSet::new(0, rotated, Stage::Initial).unwrap(), 0.8).unwrap();
            let mut expect = a.prototypes.clone();
            expect.rotate_left(rot);
            for (x, y) in expect.iter().flatten().zip(b.prototypes.iter().flatten()) {
                prop_assert!((x - y).abs() <= 1e-5 * (1.0 + x.abs()));
            }
        }

        #[test]
        fn prototypes_are_cluster_means(
            vals in prop::collection::vec(-5.0f32..5.0, 2..60),
            parts in 1usize..5,
            seed in any::<u64>(),
        ) {
            let feats: Vec<Vec<f32>> = vals.chunks_exact(2).map(|c| c.to_vec()).collect();
            prop_assume!(!feats.is_empty());
            let feats = refs(&feats);
            let partition = kmeans_partition_with(&feats, parts, seed, &KMeansOptions::default()).unwrap();
            let protos = initial_part_prototypes(1, &feats, parts, seed).unwrap();
            for (g, members) in partition.members().iter().enumerate() {
                for ch in 0..2 {
                    let mut naive = 0.0f64;
                    for &m in members {
                        naive += feats[m][ch] as f64;
                    }
                    naive /= members.len() as f64;
                    let got = protos.prototypes[g][ch] as f64;
                    prop_assert!((got - naive).abs() <= 1e-5 * naive.abs().max(1.0));
                }
            }
        }
    }
}
