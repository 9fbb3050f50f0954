//! Episode data model and pipeline hyper-parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{FeatureGrid, LabelGrid, IGNORE};

/// A feature grid with a mask at original image resolution.
///
/// Mask labels are episode-local: 0 is background, `c + 1` is the `c`-th class
/// of the owning episode's class list.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub features: FeatureGrid,
    pub mask: LabelGrid,
}

/// One C-way K-shot task.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    /// Class identifiers, in channel order (channel `c + 1` is `class_list[c]`).
    pub class_list: Vec<u8>,
    /// `support[c][k]` is the `k`-th shot of class `c`.
    pub support: Vec<Vec<LabeledImage>>,
    pub unlabeled: Vec<FeatureGrid>,
    pub queries: Vec<LabeledImage>,
    /// Original `(height, width)` of every mask and prediction.
    pub image_size: (usize, usize),
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.class_list.len()
    }

    pub fn k_shot(&self) -> usize {
        self.support.first().map_or(0, |s| s.len())
    }

    pub fn channels(&self) -> usize {
        self.queries
            .first()
            .map(|q| q.features.channels())
            .or_else(|| {
                self.support
                    .iter()
                    .flatten()
                    .next()
                    .map(|s| s.features.channels())
            })
            .unwrap_or(0)
    }

    /// Local label of an episode class identifier.
    pub fn local_label(&self, class_id: u8) -> Option<u8> {
        self.class_list
            .iter()
            .position(|&c| c == class_id)
            .map(|i| i as u8 + 1)
    }

    /// Maps a local-label mask to class identifiers (IGNORE is kept).
    pub fn to_class_ids(&self, mask: &LabelGrid) -> LabelGrid {
        mask.map(|l| match l {
            0 | IGNORE => l,
            l => self
                .class_list
                .get(l as usize - 1)
                .copied()
                .unwrap_or(IGNORE),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |msg: String| Err(Error::InvalidEpisode(msg));
        let c = self.class_list.len();
        if c == 0 {
            return invalid("class list is empty".into());
        }
        if c > 254 {
            return invalid(format!("{c} classes exceed the label alphabet"));
        }
        for (i, &id) in self.class_list.iter().enumerate() {
            if id == 0 || id == IGNORE {
                return invalid(format!("class identifier {id} is reserved"));
            }
            if self.class_list[..i].contains(&id) {
                return invalid(format!("duplicate class identifier {id}"));
            }
        }
        if self.support.len() != c {
            return invalid(format!(
                "{} support classes for {c} episode classes",
                self.support.len()
            ));
        }
        let k = self.k_shot();
        if k == 0 || self.support.iter().any(|s| s.len() != k) {
            return invalid("every class needs the same, positive number of shots".into());
        }
        if self.queries.is_empty() {
            return invalid("episode has no queries".into());
        }
        let (h, w) = self.image_size;
        if h == 0 || w == 0 {
            return invalid("image size must be positive".into());
        }
        let ch = self.channels();
        let labeled = self.support.iter().flatten().chain(&self.queries);
        for img in labeled {
            if img.features.channels() != ch {
                return invalid(format!(
                    "grid has {} channels, episode uses {ch}",
                    img.features.channels()
                ));
            }
            if (img.mask.height(), img.mask.width()) != self.image_size {
                return invalid(format!(
                    "mask is {}x{}, image size is {h}x{w}",
                    img.mask.height(),
                    img.mask.width()
                ));
            }
            if let Some(&bad) = img
                .mask
                .labels()
                .iter()
                .find(|&&l| l != IGNORE && l as usize > c)
            {
                return invalid(format!("mask label {bad} outside 0..={c}"));
            }
        }
        if let Some(g) = self.unlabeled.iter().find(|g| g.channels() != ch) {
            return invalid(format!(
                "unlabeled grid has {} channels, episode uses {ch}",
                g.channels()
            ));
        }
        for (class, shots) in self.support.iter().enumerate() {
            for (shot, img) in shots.iter().enumerate() {
                if !img.mask.contains(class as u8 + 1) {
                    return invalid(format!("support mask {class}/{shot} lacks its class"));
                }
            }
        }
        Ok(())
    }
}

/// Pipeline hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub n_parts: usize,
    pub n_regions: usize,
    pub sigma: f32,
    pub lambda_p: f32,
    pub lambda_r: f32,
    pub score_temperature: f32,
    pub nonparametric_gnn: bool,
    pub kmeans_max_iter: usize,
    pub kmeans_tol: f64,
    pub slic_compactness: f64,
    pub slic_iters: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            n_parts: 5,
            n_regions: 100,
            sigma: 0.0,
            lambda_p: 0.8,
            lambda_r: 0.2,
            score_temperature: 20.0,
            nonparametric_gnn: false,
            kmeans_max_iter: 50,
            kmeans_tol: 1e-6,
            slic_compactness: 0.1,
            slic_iters: 10,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.into()));
        if self.n_parts == 0 {
            return bad("n_parts must be at least 1");
        }
        if self.n_regions == 0 {
            return bad("n_regions must be at least 1");
        }
        if !(self.lambda_p >= 0.0 && self.lambda_r >= 0.0) {
            return bad("lambda_p and lambda_r must be non-negative");
        }
        if !(self.score_temperature > 0.0 && self.score_temperature.is_finite()) {
            return bad("score temperature must be positive");
        }
        if !self.sigma.is_finite()
            || !self.slic_compactness.is_finite()
            || self.slic_compactness < 0.0
        {
            return bad("sigma and compactness must be finite, compactness non-negative");
        }
        Ok(())
    }
}
