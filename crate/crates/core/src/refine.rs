//! Part refinement from unlabeled regions.
//!
//! Three steps per class: keep the pooled regions that some prototype finds
//! similar, smooth them with one round of similarity-weighted message passing,
//! then let each prototype attend over the smoothed regions.

use crate::clustering::RegionPool;
use crate::error::{mismatch, Error, Result};
use crate::prototype::{attention_row, PrototypeSet, Stage};
use crate::tensor::{affinity, dot64, norm64, FeatureVector, ZERO_NORM};

/// Added to the message normalizer of every node.
pub const MESSAGE_EPS: f64 = 1e-8;

/// Scale of the identity used for untrained message weights.
pub const INITIAL_WEIGHT_SCALE: f32 = 0.1;

/// Linear map applied to neighbour messages, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MessageWeights {
    dim: usize,
    matrix: Vec<f32>,
    nonparametric: bool,
}

impl MessageWeights {
    pub fn from_matrix(dim: usize, matrix: Vec<f32>, nonparametric: bool) -> Result<Self> {
        if dim == 0 || matrix.len() != dim * dim {
            return Err(mismatch(format!(
                "weight matrix for {dim} channels needs {} entries",
                dim * dim
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig(
                "message weights contain non-finite entries".into(),
            ));
        }
        Ok(Self {
            dim,
            matrix,
            nonparametric,
        })
    }

    /// `scale * I`.
    pub fn scaled_identity(dim: usize, scale: f32) -> Self {
        let mut matrix = vec![0.0; dim * dim];
        (0..dim).for_each(|i| matrix[i * dim + i] = scale);
        Self {
            dim,
            matrix,
            nonparametric: false,
        }
    }

    /// Untrained parametric weights, `0.1 * I`.
    pub fn initial(dim: usize) -> Self {
        Self::scaled_identity(dim, INITIAL_WEIGHT_SCALE)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> &[f32] {
        &self.matrix
    }

    pub fn matrix_mut(&mut self) -> &mut [f32] {
        &mut self.matrix
    }

    pub fn is_nonparametric(&self) -> bool {
        self.nonparametric
    }

    pub fn with_nonparametric(mut self, on: bool) -> Self {
        self.nonparametric = on;
        self
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        if self.nonparametric {
            return v.to_vec();
        }
        self.matrix
            .chunks_exact(self.dim)
            .map(|row| row.iter().zip(v).map(|(&w, &x)| w as f64 * x).sum())
            .collect()
    }
}

/// Regions after message passing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AugmentedRegionSet {
    pub regions: Vec<FeatureVector>,
}

impl AugmentedRegionSet {
    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }
}

fn signed_cosine(a: &[f32], b: &[f32]) -> f64 {
    let (na, nb) = (norm64(a), norm64(b));
    if na <= ZERO_NORM || nb <= ZERO_NORM {
        return 0.0;
    }
    dot64(a, b) / (na * nb)
}

/// Indices of the regions whose cosine to at least one prototype exceeds `sigma`.
pub fn relevant_region_indices(
    pool: &RegionPool,
    protos: &PrototypeSet,
    sigma: f32,
) -> Result<Vec<usize>> {
    protos.expect_stage(Stage::Contextual)?;
    Ok(pool
        .regions
        .iter()
        .enumerate()
        .filter(|(_, r)| {
            protos
                .prototypes
                .iter()
                .any(|p| signed_cosine(p, r) > sigma as f64)
        })
        .map(|(j, _)| j)
        .collect())
}

/// Keeps the regions relevant to the class, preserving order.
pub fn select_relevant_regions(
    pool: &RegionPool,
    protos: &PrototypeSet,
    sigma: f32,
) -> Result<RegionPool> {
    Ok(pool.subset(&relevant_region_indices(pool, protos, sigma)?))
}

/// Normalized neighbour aggregate `(1/Z_i) sum_{j != i} d(r_i, r_j) r_j` for every node,
/// with `Z_i = sum_{j != i} d(r_i, r_j) + eps`.
pub(crate) fn neighbour_means(regions: &[FeatureVector]) -> Vec<Vec<f64>> {
    let n = regions.len();
    let dim = regions.first().map_or(0, |r| r.len());
    (0..n)
        .map(|i| {
            let mut acc = vec![0.0f64; dim];
            let mut z = MESSAGE_EPS;
            for j in (0..n).filter(|&j| j != i) {
                let d = affinity(&regions[i], &regions[j]);
                z += d;
                for (a, &v) in acc.iter_mut().zip(&regions[j]) {
                    *a += d * v as f64;
                }
            }
            acc.iter_mut().for_each(|a| *a /= z);
            acc
        })
        .collect()
}

/// One round of message passing over the fully connected region graph:
/// `r_i + relu(W m_i)` with `m_i` from [`neighbour_means`] (`W` dropped in
/// nonparametric mode).
pub fn propagate_region_features(
    selected: &RegionPool,
    weights: &MessageWeights,
) -> Result<AugmentedRegionSet> {
    if let Some(r) = selected
        .regions
        .iter()
        .find(|r| !weights.nonparametric && r.len() != weights.dim())
    {
        return Err(mismatch(format!(
            "region has {} channels, weights expect {}",
            r.len(),
            weights.dim()
        )));
    }
    let messages = neighbour_means(&selected.regions);
    let regions = selected
        .regions
        .iter()
        .zip(messages)
        .map(|(r, m)| {
            let a = weights.apply(&m);
            r.iter()
                .zip(a)
                .map(|(&x, a)| (x as f64 + a.max(0.0)) as f32)
                .collect()
        })
        .collect();
    Ok(AugmentedRegionSet { regions })
}

/// Attention weights `phi[i][j]` of every prototype over the augmented regions.
pub fn refinement_weights(protos: &PrototypeSet, augmented: &AugmentedRegionSet) -> Vec<Vec<f64>> {
    if augmented.is_empty() {
        return vec![Vec::new(); protos.len()];
    }
    let keys: Vec<&[f32]> = augmented.regions.iter().map(|r| r.as_slice()).collect();
    protos
        .prototypes
        .iter()
        .map(|p| attention_row(p, &keys))
        .collect()
}

/// `p_i + lambda_r * sum_j phi_ij r~_j`; identity when there are no regions.
pub fn refine_with_regions(
    protos: &PrototypeSet,
    augmented: &AugmentedRegionSet,
    lambda_r: f32,
) -> Result<PrototypeSet> {
    protos.expect_stage(Stage::Contextual)?;
    if augmented.is_empty() || lambda_r == 0.0 {
        return PrototypeSet::new(protos.class_id, protos.prototypes.clone(), Stage::Refined);
    }
    if let Some(r) = augmented
        .regions
        .iter()
        .find(|r| r.len() != protos.channels())
    {
        return Err(mismatch(format!(
            "region has {} channels, prototypes {}",
            r.len(),
            protos.channels()
        )));
    }
    let lambda = lambda_r as f64;
    let refined = protos
        .prototypes
        .iter()
        .zip(refinement_weights(protos, augmented))
        .map(|(p, phi)| {
            let mut acc = vec![0.0f64; p.len()];
            for (w, r) in phi.iter().zip(&augmented.regions) {
                for (a, &v) in acc.iter_mut().zip(r) {
                    *a += w * v as f64;
                }
            }
            p.iter()
                .zip(acc)
                .map(|(&x, a)| (x as f64 + lambda * a) as f32)
                .collect()
        })
        .collect();
    PrototypeSet::new(protos.class_id, refined, Stage::Refined)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::RegionSource;
    use proptest::prelude::*;

    fn pool(regions: Vec<Vec<f32>>) -> RegionPool {
        let sources = (0..regions.len())
            .map(|i| RegionSource {
                image: 0,
                cells: vec![i],
            })
            .collect();
        RegionPool { regions, sources }
    }

    fn contextual(protos: Vec<Vec<f32>>) -> PrototypeSet {
        PrototypeSet::new(1, protos, Stage::Contextual).unwrap()
    }

    #[test]
    fn selection_examples() {
        let protos = contextual(vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]);
        let p = pool(vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![-1.0, 0.2, 0.0],
        ]);
        let kept = select_relevant_regions(&p, &protos, 0.0).unwrap();
        assert_eq!(
            kept.regions,
            vec![vec![1.0, 0.0, 0.0], vec![-1.0, 0.2, 0.0]]
        );
        assert_eq!(
            relevant_region_indices(&p, &protos, 0.0).unwrap(),
            vec![0, 2]
        );
        let strict = select_relevant_regions(&p, &protos, 0.5).unwrap();
        assert_eq!(strict.len(), 1);
    }

    #[test]
    fn selection_requires_contextual() {
        let protos = PrototypeSet::new(1, vec![vec![1.0]], Stage::Initial).unwrap();
        assert!(select_relevant_regions(&pool(vec![vec![1.0]]), &protos, 0.0).is_err());
    }

    #[test]
    fn propagation_identities() {
        let single = pool(vec![vec![0.5, -1.0]]);
        let out =
            propagate_region_features(&single, &MessageWeights::scaled_identity(2, 3.0)).unwrap();
        assert_eq!(out.regions, single.regions);

        let many = pool(vec![vec![0.5, -1.0], vec![1.0, 1.0], vec![2.0, -0.1]]);
        let zero = MessageWeights::scaled_identity(2, 0.0);
        assert_eq!(
            propagate_region_features(&many, &zero).unwrap().regions,
            many.regions
        );
    }

    #[test]
    fn propagation_two_identical_regions() {
        let r = vec![0.6f32, -0.2, 1.5];
        let p = pool(vec![r.clone(), r.clone()]);
        let out = propagate_region_features(&p, &MessageWeights::scaled_identity(3, 1.0)).unwrap();
        let z = 1.0 + MESSAGE_EPS;
        for region in &out.regions {
            for (&got, &x) in region.iter().zip(&r) {
                let want = x as f64 + (x as f64 / z).max(0.0);
                assert!((got as f64 - want).abs() < 1e-6, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn propagation_dimension_mismatch() {
        let p = pool(vec![vec![1.0, 2.0]]);
        assert!(propagate_region_features(&p, &MessageWeights::initial(3)).is_err());
    }

    #[test]
    fn refinement_examples() {
        let protos = contextual(vec![vec![1.0, 2.0], vec![-1.0, 0.5]]);
        let empty = refine_with_regions(&protos, &AugmentedRegionSet::default(), 0.2).unwrap();
        assert_eq!(empty.prototypes, protos.prototypes);
        assert_eq!(empty.stage, Stage::Refined);

        let regions = AugmentedRegionSet {
            regions: vec![vec![3.0, 1.0], vec![0.0, 1.0]],
        };
        assert_eq!(
            refine_with_regions(&protos, &regions, 0.0)
                .unwrap()
                .prototypes,
            protos.prototypes
        );

        let p = contextual(vec![vec![0.3, -0.4, 1.2]]);
        let same = AugmentedRegionSet {
            regions: p.prototypes.clone(),
        };
        let out = refine_with_regions(&p, &same, 0.2).unwrap();
        for (&got, &x) in out.prototypes[0].iter().zip(&p.prototypes[0]) {
            assert!((got - 1.2 * x).abs() < 1e-6);
        }
    }

    #[test]
    fn nonparametric_ignores_matrix() {
        let p = pool(vec![vec![0.5, -1.0], vec![1.0, 1.0], vec![2.0, -0.1]]);
        let a = MessageWeights::initial(2).with_nonparametric(true);
        let b = MessageWeights::from_matrix(2, vec![5.0, -3.0, 0.25, 7.0], true).unwrap();
        assert_eq!(
            propagate_region_features(&p, &a).unwrap(),
            propagate_region_features(&p, &b).unwrap()
        );
    }

    proptest! {
        #[test]
        fn propagation_is_permutation_equivariant(
            vals in prop::collection::vec(-3.0f32..3.0, 15),
            rot in 0usize..5,
        ) {
            let regions: Vec<Vec<f32>> = vals.chunks(3).map(|c| c.to_vec()).collect();
            let mut rotated = regions.clone();
            rotated.rotate_left(rot);
            let w = MessageWeights::from_matrix(3, vec![0.3, -0.1, 0.2, 0.0, 1.0, 0.4, -0.5, 0.2, 0.1], false).unwrap();
            let a = propagate_region_features(&pool(regions), &w).unwrap();
            let b = propagate_region_features(&pool(rotated), &w).unwrap();
            let mut expect = a.regions.clone();
            expect.rotate_left(rot);
            for (x, y) in expect.iter().flatten().zip(b.regions.iter().flatten()) {
                prop_assert!((x - y).abs() <= 1e-5 * (1.0 + x.abs()));
            }
        }

        #[test]
        fn refinement_rows_are_convex(
            protos in prop::collection::vec(-2.0f32..2.0, 6),
            regions in prop::collection::vec(-2.0f32..2.0, 12),
        ) {
            let protos = contextual(protos.chunks(3).map(|c| c.to_vec()).collect());
            let aug = AugmentedRegionSet { regions: regions.chunks(3).map(|c| c.to_vec()).collect() };
            for row in refinement_weights(&protos, &aug) {
                prop_assert!(row.iter().all(|&w| w >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            }
        }
    }
}
