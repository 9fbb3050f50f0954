//! End-to-end episode forward pass: prototypes for every class (background
//! included), refinement against the unlabeled region pool, and query scoring.

use crate::clustering::{unlabeled_region_pool, KMeansOptions, RegionPool, SlicOptions};
use crate::episode::{Episode, HyperParams};
use crate::error::{mismatch, Result};
use crate::matcher::{fuse_with_argmax, part_score_maps, predict_query_mask, ABSENT_CLASS_SCORE};
use crate::prototype::{add_class_context, initial_part_prototypes_with, PrototypeSet};
use crate::refine::{
    propagate_region_features, refine_with_regions, relevant_region_indices, MessageWeights,
};
use crate::tensor::{
    gather_class_features, resize_mask_nearest, FeatureGrid, LabelGrid, ScoreStack,
};

/// SplitMix64 finalizer over `base + stream`; derives independent sub-seeds.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Prototype states of one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassState {
    pub contextual: PrototypeSet,
    /// Indices into the episode's region pool that passed relevance selection.
    pub selected: Vec<usize>,
    pub refined: PrototypeSet,
}

/// Everything the forward pass decided for an episode.
#[derive(Debug, Clone)]
pub struct EpisodeForward {
    /// Support masks at feature resolution, `[class][shot]`.
    pub support_masks: Vec<Vec<LabelGrid>>,
    pub pool: RegionPool,
    /// One entry per channel (background first); `None` when the class has no
    /// labeled cells at feature resolution.
    pub classes: Vec<Option<ClassState>>,
}

/// Whether message passing should skip the weight matrix.
pub fn effective_weights(params: &HyperParams, weights: &MessageWeights) -> MessageWeights {
    weights
        .clone()
        .with_nonparametric(params.nonparametric_gnn || weights.is_nonparametric())
}

impl EpisodeForward {
    pub fn run(
        episode: &Episode,
        params: &HyperParams,
        weights: &MessageWeights,
        seed: u64,
    ) -> Result<Self> {
        params.validate()?;
        episode.validate()?;
        let weights = effective_weights(params, weights);
        let channels = episode.channels();
        if !weights.is_nonparametric() && weights.dim() != channels {
            return Err(mismatch(format!(
                "weights are {0}x{0}, features have {channels} channels",
                weights.dim()
            )));
        }

        let support_masks = episode
            .support
            .iter()
            .map(|shots| {
                shots
                    .iter()
                    .map(|img| {
                        resize_mask_nearest(&img.mask, img.features.height(), img.features.width())
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;

        let kmeans = KMeansOptions {
            max_iter: params.kmeans_max_iter,
            tol: params.kmeans_tol,
        };
        let slic = SlicOptions {
            compactness: params.slic_compactness,
            iters: params.slic_iters,
        };
        let pool = unlabeled_region_pool(&episode.unlabeled, params.n_regions, &slic)?;

        let mut classes = Vec::with_capacity(episode.n_way() + 1);
        for label in 0..=episode.n_way() as u8 {
            let mut features: Vec<&[f32]> = Vec::new();
            for (shots, masks) in episode.support.iter().zip(&support_masks) {
                for (img, mask) in shots.iter().zip(masks) {
                    features.extend(gather_class_features(&img.features, mask, label)?);
                }
            }
            if features.is_empty() {
                classes.push(None);
                continue;
            }
            let initial = initial_part_prototypes_with(
                label,
                &features,
                params.n_parts,
                derive_seed(seed, label as u64),
                &kmeans,
            )?;
            let contextual = add_class_context(&initial, params.lambda_p)?;
            let selected = relevant_region_indices(&pool, &contextual, params.sigma)?;
            let augmented = propagate_region_features(&pool.subset(&selected), &weights)?;
            let refined = refine_with_regions(&contextual, &augmented, params.lambda_r)?;
            classes.push(Some(ClassState {
                contextual,
                selected,
                refined,
            }));
        }
        Ok(Self {
            support_masks,
            pool,
            classes,
        })
    }

    /// Fused class scores for a grid plus the winning part per class and cell.
    pub fn score(&self, grid: &FeatureGrid) -> Result<(ScoreStack, Vec<Vec<u16>>)> {
        let (h, w) = (grid.height(), grid.width());
        let per_class = self
            .classes
            .iter()
            .map(|state| match state {
                Some(s) => part_score_maps(grid, &s.refined),
                None => ScoreStack::new(1, h, w, vec![ABSENT_CLASS_SCORE; h * w]),
            })
            .collect::<Result<Vec<_>>>()?;
        fuse_with_argmax(&per_class)
    }

    /// Predicted mask at image resolution, in class-identifier space.
    pub fn predict(&self, grid: &FeatureGrid, episode: &Episode) -> Result<LabelGrid> {
        let (stack, _) = self.score(grid)?;
        let (h, w) = episode.image_size;
        predict_query_mask(&stack, h, w, &episode.class_list)
    }
}

/// Predictions for every query of an episode, in class-identifier space.
pub fn predict_episode(
    episode: &Episode,
    params: &HyperParams,
    weights: &MessageWeights,
    seed: u64,
) -> Result<Vec<LabelGrid>> {
    let forward = EpisodeForward::run(episode, params, weights, seed)?;
    episode
        .queries
        .iter()
        .map(|q| forward.predict(&q.features, episode))
        .collect()
}
