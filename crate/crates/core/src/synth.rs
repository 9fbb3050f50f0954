//! Synthetic episodes: elliptical class blobs on a background, with features
//! drawn from per-class generators.
//!
//! A cell of class `k` in some image carries
//! `separation * (u_k + shared * g) + delta_k + jitter * noise`, where `u_k` is a
//! fixed unit direction of the class, `g` a direction common to all classes,
//! `delta_k` an appearance offset drawn once per image and class (norm about
//! `appearance`), and `noise` standard normal per channel. Class directions
//! depend only on `world_seed` and the class identifier, so a class looks the
//! same across episodes. Masks are exact blob footprints at image resolution.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::episode::{Episode, LabeledImage};
use crate::error::{Error, Result};
use crate::pipeline::derive_seed;
use crate::tensor::{resize_mask_nearest, FeatureGrid, LabelGrid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_ch: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Image pixels per feature cell along each axis.
    pub stride: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub n_unlabeled: usize,
    pub n_query: usize,
    /// Class identifiers are drawn from `1..=n_classes`.
    pub n_classes: usize,
    pub blobs_min: usize,
    pub blobs_max: usize,
    /// Blob semi-axes as fractions of the shorter image side.
    pub radius_min: f64,
    pub radius_max: f64,
    pub separation: f32,
    pub jitter: f32,
    pub appearance: f32,
    pub shared: f32,
    pub world_seed: u64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_ch: 64,
            grid_h: 32,
            grid_w: 32,
            stride: 4,
            n_way: 1,
            k_shot: 1,
            n_unlabeled: 6,
            n_query: 1,
            n_classes: 20,
            blobs_min: 1,
            blobs_max: 2,
            radius_min: 0.25,
            radius_max: 0.4,
            separation: 10.0,
            jitter: 0.1,
            appearance: 0.0,
            shared: 0.0,
            world_seed: 0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.into()));
        if self.n_ch == 0 || self.grid_h == 0 || self.grid_w == 0 || self.stride == 0 {
            return bad("grid dimensions and stride must be positive");
        }
        if self.n_way == 0 || self.k_shot == 0 || self.n_query == 0 {
            return bad("n_way, k_shot and n_query must be positive");
        }
        if self.n_way > self.n_classes || self.n_classes > 254 {
            return bad("need n_way <= n_classes <= 254");
        }
        if self.blobs_min == 0 || self.blobs_min > self.blobs_max {
            return bad("need 1 <= blobs_min <= blobs_max");
        }
        if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max && self.radius_max <= 1.0)
        {
            return bad("need 0 < radius_min <= radius_max <= 1");
        }
        let finite = [self.separation, self.jitter, self.appearance, self.shared];
        if finite.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return bad(
                "separation, jitter, appearance and shared must be finite and non-negative",
            );
        }
        if !(self.separation > self.jitter) {
            return bad("separation must exceed jitter");
        }
        Ok(())
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.grid_h * self.stride, self.grid_w * self.stride)
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.iter().map(|x| (x / norm) as f32).collect();
        }
    }
}

/// Mean feature of class `class_id` (0 is background).
pub fn class_mean(config: &SynthConfig, class_id: u8) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.world_seed, class_id as u64));
    let u = unit_vector(&mut rng, config.n_ch);
    let mut common = ChaCha8Rng::seed_from_u64(derive_seed(config.world_seed, 1 << 32));
    let g = unit_vector(&mut common, config.n_ch);
    u.iter()
        .zip(&g)
        .map(|(a, b)| config.separation * (a + config.shared * b))
        .collect()
}

struct Generator<'a> {
    config: &'a SynthConfig,
    /// Means by local label; 0 is background.
    means: Vec<Vec<f32>>,
    rng: ChaCha8Rng,
}

impl Generator<'_> {
    /// Mask at image resolution whose feature-resolution version contains
    /// every label in `required`, drawing blobs for each label of `present`.
    fn mask(&mut self, present: &[u8], required: &[u8]) -> Result<(LabelGrid, LabelGrid)> {
        let c = self.config;
        let (h, w) = c.image_size();
        let side = h.min(w) as f64;
        for _ in 0..1000 {
            let mut labels = vec![0u8; h * w];
            for &label in present {
                let blobs = self.rng.gen_range(c.blobs_min..=c.blobs_max);
                for _ in 0..blobs {
                    let ry = self.rng.gen_range(c.radius_min..=c.radius_max) * side;
                    let rx = self.rng.gen_range(c.radius_min..=c.radius_max) * side;
                    let cy = self.rng.gen_range(0.15..0.85) * h as f64;
                    let cx = self.rng.gen_range(0.15..0.85) * w as f64;
                    for y in 0..h {
                        let dy = (y as f64 + 0.5 - cy) / ry;
                        if dy.abs() > 1.0 {
                            continue;
                        }
                        for x in 0..w {
                            let dx = (x as f64 + 0.5 - cx) / rx;
                            if dx * dx + dy * dy <= 1.0 {
                                labels[y * w + x] = label;
                            }
                        }
                    }
                }
            }
            let mask = LabelGrid::new(h, w, labels)?;
            let coarse = resize_mask_nearest(&mask, c.grid_h, c.grid_w)?;
            if required.iter().all(|&l| coarse.contains(l)) {
                return Ok((mask, coarse));
            }
        }
        Err(Error::InvalidConfig(
            "blobs are too small to survive downsampling".into(),
        ))
    }

    fn features(&mut self, coarse: &LabelGrid) -> Result<FeatureGrid> {
        let c = self.config;
        let scale = c.appearance / (c.n_ch as f32).sqrt();
        let means: Vec<Vec<f32>> = self
            .means
            .iter()
            .map(|m| {
                m.iter()
                    .map(|&v| v + scale * self.rng.sample::<f32, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let mut values = Vec::with_capacity(coarse.labels().len() * c.n_ch);
        for &label in coarse.labels() {
            for &v in &means[label as usize] {
                values.push(v + c.jitter * self.rng.sample::<f32, _>(StandardNormal));
            }
        }
        FeatureGrid::new(c.grid_h, c.grid_w, c.n_ch, values)
    }

    fn labeled(&mut self, present: &[u8], required: &[u8]) -> Result<LabeledImage> {
        let (mask, coarse) = self.mask(present, required)?;
        Ok(LabeledImage {
            features: self.features(&coarse)?,
            mask,
        })
    }
}

pub fn generate_synthetic_episode(config: &SynthConfig) -> Result<Episode> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut ids: Vec<u8> = (1..=config.n_classes as u8).collect();
    ids.shuffle(&mut rng);
    let class_list: Vec<u8> = ids[..config.n_way].to_vec();

    let mut means = vec![class_mean(config, 0)];
    means.extend(class_list.iter().map(|&id| class_mean(config, id)));
    let mut gen = Generator { config, means, rng };
    let all: Vec<u8> = (1..=config.n_way as u8).collect();

    let mut support = Vec::with_capacity(config.n_way);
    for label in 1..=config.n_way as u8 {
        let shots = (0..config.k_shot)
            .map(|_| gen.labeled(&[label], &[label]))
            .collect::<Result<Vec<_>>>()?;
        support.push(shots);
    }
    let mut unlabeled = Vec::with_capacity(config.n_unlabeled);
    for _ in 0..config.n_unlabeled {
        let mut present: Vec<u8> = all
            .iter()
            .copied()
            .filter(|_| gen.rng.gen_bool(0.5))
            .collect();
        if present.is_empty() {
            present.push(all[gen.rng.gen_range(0..all.len())]);
        }
        unlabeled.push(gen.labeled(&present, &[])?.features);
    }
    let queries = (0..config.n_query)
        .map(|j| gen.labeled(&all, &[(j % config.n_way) as u8 + 1]))
        .collect::<Result<Vec<_>>>()?;

    let episode = Episode {
        class_list,
        support,
        unlabeled,
        queries,
        image_size: config.image_size(),
    };
    episode.validate()?;
    Ok(episode)
}
