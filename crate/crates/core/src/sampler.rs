//! Episodic sampling from a pool of labeled images.
//!
//! Every labeled image of the source episodes (supports and queries) enters
//! the pool with its mask translated to class identifiers. An episode takes
//! `k_shot + n_query` distinct images per class, then `n_unlabeled` further
//! images with their labels dropped.

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::archive::read_episode_archive;
use crate::episode::{Episode, LabeledImage};
use crate::error::{Error, Result};
use crate::tensor::{FeatureGrid, LabelGrid, IGNORE};

#[derive(Debug, Clone, PartialEq)]
pub struct PoolImage {
    pub features: FeatureGrid,
    /// Labels are class identifiers (0 background, IGNORE kept).
    pub mask: LabelGrid,
    pub classes: BTreeSet<u8>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImagePool {
    pub images: Vec<PoolImage>,
}

impl ImagePool {
    pub fn from_episodes(episodes: &[Episode]) -> Self {
        let images = episodes
            .iter()
            .flat_map(|e| {
                e.support
                    .iter()
                    .flatten()
                    .chain(&e.queries)
                    .map(move |img| {
                        let mask = e.to_class_ids(&img.mask);
                        let classes = mask
                            .labels()
                            .iter()
                            .copied()
                            .filter(|&l| l != 0 && l != IGNORE)
                            .collect();
                        PoolImage {
                            features: img.features.clone(),
                            mask,
                            classes,
                        }
                    })
            })
            .collect();
        Self { images }
    }

    /// Loads every `*.zip` episode archive in `dir`, in file-name order.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .filter(|p| p.extension().is_some_and(|x| x == "zip"))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::MalformedArchive(format!(
                "no episode archives in {}",
                dir.display()
            )));
        }
        let episodes = paths
            .iter()
            .map(|p| read_episode_archive(p))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_episodes(&episodes))
    }

    /// Every class identifier that occurs in the pool, ascending.
    pub fn classes(&self) -> Vec<u8> {
        let all: BTreeSet<u8> = self
            .images
            .iter()
            .flat_map(|i| i.classes.iter().copied())
            .collect();
        all.into_iter().collect()
    }
}

/// Episode request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeShape {
    pub c_way: usize,
    pub k_shot: usize,
    pub n_unlabeled: usize,
    /// Queries per class.
    pub n_query: usize,
}

/// Pool indices chosen for one episode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeDraw {
    pub class_list: Vec<u8>,
    /// `support[c]` lists the shots of class `c`.
    pub support: Vec<Vec<usize>>,
    pub queries: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

/// Chooses classes and images for an episode over the classes of `fold`.
pub fn draw_episode(
    pool: &ImagePool,
    fold: &[u8],
    shape: &EpisodeShape,
    seed: u64,
) -> Result<EpisodeDraw> {
    let insufficient = |msg: String| Err(Error::InsufficientData(msg));
    if shape.c_way == 0 || shape.k_shot == 0 || shape.n_query == 0 {
        return Err(Error::InvalidConfig(
            "c_way, k_shot and n_query must be positive".into(),
        ));
    }
    let need = shape.k_shot + shape.n_query;
    let fold: BTreeSet<u8> = fold
        .iter()
        .copied()
        .filter(|&c| c != 0 && c != IGNORE)
        .collect();
    let eligible: Vec<u8> = fold
        .iter()
        .copied()
        .filter(|c| pool.images.iter().filter(|i| i.classes.contains(c)).count() >= need)
        .collect();
    if eligible.len() < shape.c_way {
        return insufficient(format!(
            "{} classes have {need} images, a {}-way episode needs {}",
            eligible.len(),
            shape.c_way,
            shape.c_way
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = eligible;
    order.shuffle(&mut rng);
    let class_list: Vec<u8> = order[..shape.c_way].to_vec();

    let mut used: HashSet<usize> = HashSet::new();
    let mut support = Vec::with_capacity(shape.c_way);
    let mut queries = Vec::new();
    for &class in &class_list {
        let mut candidates: Vec<usize> = (0..pool.images.len())
            .filter(|i| !used.contains(i) && pool.images[*i].classes.contains(&class))
            .collect();
        if candidates.len() < need {
            return insufficient(format!(
                "class {class} has {} unused images, needs {need}",
                candidates.len()
            ));
        }
        candidates.shuffle(&mut rng);
        let picked = &candidates[..need];
        used.extend(picked);
        support.push(picked[..shape.k_shot].to_vec());
        queries.extend_from_slice(&picked[shape.k_shot..]);
    }
    let mut candidates: Vec<usize> = (0..pool.images.len())
        .filter(|i| !used.contains(i) && pool.images[*i].classes.iter().any(|c| fold.contains(c)))
        .collect();
    if candidates.len() < shape.n_unlabeled {
        return insufficient(format!(
            "{} images left for {} unlabeled",
            candidates.len(),
            shape.n_unlabeled
        ));
    }
    candidates.shuffle(&mut rng);
    candidates.truncate(shape.n_unlabeled);
    Ok(EpisodeDraw {
        class_list,
        support,
        queries,
        unlabeled: candidates,
    })
}

/// Samples an episode: [`draw_episode`] with masks mapped to local labels
/// (classes outside the episode become background).
pub fn sample_episode(
    pool: &ImagePool,
    fold: &[u8],
    shape: &EpisodeShape,
    seed: u64,
) -> Result<Episode> {
    let draw = draw_episode(pool, fold, shape, seed)?;
    let labeled = |i: usize| {
        let mask = pool.images[i].mask.map(|l| match l {
            IGNORE => IGNORE,
            l => draw
                .class_list
                .iter()
                .position(|&c| c == l)
                .map_or(0, |i| i as u8 + 1),
        });
        LabeledImage {
            features: pool.images[i].features.clone(),
            mask,
        }
    };
    let support: Vec<Vec<LabeledImage>> = draw
        .support
        .iter()
        .map(|shots| shots.iter().map(|&i| labeled(i)).collect())
        .collect();
    let queries: Vec<LabeledImage> = draw.queries.iter().map(|&i| labeled(i)).collect();
    let unlabeled = draw
        .unlabeled
        .iter()
        .map(|&i| pool.images[i].features.clone())
        .collect();
    let image_size = (support[0][0].mask.height(), support[0][0].mask.width());
    let episode = Episode {
        class_list: draw.class_list.clone(),
        support,
        unlabeled,
        queries,
        image_size,
    };
    episode.validate()?;
    Ok(episode)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool(classes_per_image: &[&[u8]]) -> ImagePool {
        let images = classes_per_image
            .iter()
            .enumerate()
            .map(|(n, cs)| {
                let mut labels = vec![0u8; 4];
                for (slot, &c) in cs.iter().enumerate() {
                    labels[slot] = c;
                }
                PoolImage {
                    features: FeatureGrid::new(2, 2, 2, vec![n as f32 + 1.0; 8]).unwrap(),
                    mask: LabelGrid::new(2, 2, labels).unwrap(),
                    classes: cs.iter().copied().collect(),
                }
            })
            .collect();
        ImagePool { images }
    }

    #[test]
    fn one_way_one_shot_shape() {
        let p = pool(&[&[3], &[3], &[3], &[4], &[4]]);
        let shape = EpisodeShape {
            c_way: 1,
            k_shot: 1,
            n_unlabeled: 2,
            n_query: 1,
        };
        let e = sample_episode(&p, &[3, 4], &shape, 5).unwrap();
        assert_eq!(
            (e.n_way(), e.k_shot(), e.queries.len(), e.unlabeled.len()),
            (1, 1, 1, 2)
        );
        assert!(e.support[0][0].mask.labels().iter().all(|&l| l <= 1));
    }

    #[test]
    fn deterministic_and_seed_dependent() {
        let p = pool(&[&[1], &[1], &[2], &[2], &[1, 2], &[3], &[3], &[1]]);
        let shape = EpisodeShape {
            c_way: 2,
            k_shot: 1,
            n_unlabeled: 1,
            n_query: 1,
        };
        let a = sample_episode(&p, &[1, 2, 3], &shape, 11).unwrap();
        assert_eq!(a, sample_episode(&p, &[1, 2, 3], &shape, 11).unwrap());
        let differs = (0..20).any(|s| sample_episode(&p, &[1, 2, 3], &shape, s).unwrap() != a);
        assert!(differs);
    }

    #[test]
    fn other_classes_become_background() {
        let p = pool(&[&[1, 2], &[1, 2], &[1]]);
        let shape = EpisodeShape {
            c_way: 1,
            k_shot: 1,
            n_unlabeled: 0,
            n_query: 1,
        };
        let e = sample_episode(&p, &[1], &shape, 0).unwrap();
        for img in e.support.iter().flatten().chain(&e.queries) {
            assert!(img.mask.labels().iter().all(|&l| l <= 1));
        }
    }

    #[test]
    fn insufficient_data() {
        let p = pool(&[&[1], &[1], &[2], &[2], &[3], &[3], &[4], &[4]]);
        let shape = EpisodeShape {
            c_way: 5,
            k_shot: 1,
            n_unlabeled: 0,
            n_query: 1,
        };
        assert!(matches!(
            sample_episode(&p, &[1, 2, 3, 4], &shape, 0),
            Err(Error::InsufficientData(_))
        ));
        let shape = EpisodeShape {
            c_way: 1,
            k_shot: 1,
            n_unlabeled: 7,
            n_query: 1,
        };
        assert!(matches!(
            sample_episode(&p, &[1, 2, 3, 4], &shape, 0),
            Err(Error::InsufficientData(_))
        ));
    }
}
