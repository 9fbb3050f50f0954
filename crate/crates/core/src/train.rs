//! Episode loss, the fixed-structure gradient with respect to the message
//! weights, and SGD training of those weights.
//!
//! The gradient holds every discrete outcome of the forward pass fixed: K-means
//! groups, SLIC regions, region selection and the winning part of every cell.
//! What remains is a smooth function of `W` except at ReLU kinks, where the
//! sign of the forward activation picks the branch.

use crate::episode::{Episode, HyperParams};
use crate::error::{mismatch, Error, Result};
use crate::pipeline::{derive_seed, effective_weights, EpisodeForward};
use crate::prototype::ATTENTION_EPS;
use crate::refine::{neighbour_means, MessageWeights};
use crate::tensor::{resize_mask_nearest, FeatureGrid, LabelGrid, ScoreStack, IGNORE};

/// Mean over non-IGNORE cells of `-log softmax(temperature * scores)[label]`.
/// Zero when every cell is ignored.
pub fn meta_cross_entropy_loss(
    stack: &ScoreStack,
    gt: &LabelGrid,
    temperature: f32,
) -> Result<f64> {
    if (stack.height(), stack.width()) != (gt.height(), gt.width()) {
        return Err(mismatch(format!(
            "scores are {}x{}, labels {}x{}",
            stack.height(),
            stack.width(),
            gt.height(),
            gt.width()
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidConfig("temperature must be positive".into()));
    }
    let t = temperature as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    let mut logits = vec![0.0f64; stack.classes()];
    for (cell, &label) in gt.labels().iter().enumerate() {
        if label == IGNORE {
            continue;
        }
        if label as usize >= stack.classes() {
            return Err(mismatch(format!("label {label} has no score channel")));
        }
        for (k, z) in logits.iter_mut().enumerate() {
            *z = t * stack.channel(k)[cell] as f64;
        }
        total += log_sum_exp(&logits) - logits[label as usize];
        count += 1;
    }
    Ok(if count == 0 {
        0.0
    } else {
        total / count as f64
    })
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeLoss {
    pub query_ce: f64,
    pub support_ce: f64,
    pub total: f64,
}

fn feature_resolution_labels(mask: &LabelGrid, grid: &FeatureGrid) -> Result<LabelGrid> {
    resize_mask_nearest(mask, grid.height(), grid.width())
}

/// Loss of the pipeline as run: mean query cross-entropy plus mean support
/// cross-entropy, both against labels at feature resolution.
pub fn episode_loss(
    episode: &Episode,
    params: &HyperParams,
    weights: &MessageWeights,
    seed: u64,
) -> Result<EpisodeLoss> {
    let forward = EpisodeForward::run(episode, params, weights, seed)?;
    let t = params.score_temperature;
    let mut query_ce = 0.0;
    for q in &episode.queries {
        let (stack, _) = forward.score(&q.features)?;
        query_ce +=
            meta_cross_entropy_loss(&stack, &feature_resolution_labels(&q.mask, &q.features)?, t)?;
    }
    query_ce /= episode.queries.len() as f64;
    let mut support_ce = 0.0;
    let mut shots = 0usize;
    for (imgs, masks) in episode.support.iter().zip(&forward.support_masks) {
        for (img, mask) in imgs.iter().zip(masks) {
            let (stack, _) = forward.score(&img.features)?;
            support_ce += meta_cross_entropy_loss(&stack, mask, t)?;
            shots += 1;
        }
    }
    support_ce /= shots as f64;
    Ok(EpisodeLoss {
        query_ce,
        support_ce,
        total: query_ce + support_ce,
    })
}

#[derive(Debug, Clone)]
struct FrozenClass {
    protos: Vec<Vec<f64>>,
    regions: Vec<Vec<f64>>,
    messages: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
struct FrozenImage {
    channels: usize,
    cells: Vec<f64>,
    norms: Vec<f64>,
    labels: Vec<u8>,
    /// `winners[k][cell]`: part of class `k` that won the cell on the forward pass.
    winners: Vec<Vec<u16>>,
    /// Weight of the image's mean cross-entropy in the episode loss.
    weight: f64,
}

impl FrozenImage {
    fn cell(&self, i: usize) -> &[f64] {
        &self.cells[i * self.channels..(i + 1) * self.channels]
    }
}

/// The episode loss as a function of `W` alone, in double precision.
#[derive(Debug, Clone)]
pub struct FrozenEpisode {
    dim: usize,
    lambda_r: f64,
    temperature: f64,
    classes: Vec<Option<FrozenClass>>,
    images: Vec<FrozenImage>,
}

struct ClassForward {
    activations: Vec<Vec<f64>>,
    augmented: Vec<Vec<f64>>,
    /// Clamped cosines `[proto][region]`.
    sims: Vec<Vec<f64>>,
    totals: Vec<f64>,
    phi: Vec<Vec<f64>>,
    refined: Vec<Vec<f64>>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn to64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

impl FrozenEpisode {
    /// Freezes the discrete outcomes of `forward` on `episode`.
    pub fn capture(
        episode: &Episode,
        forward: &EpisodeForward,
        params: &HyperParams,
    ) -> Result<Self> {
        let dim = episode.channels();
        let classes = forward
            .classes
            .iter()
            .map(|state| {
                state.as_ref().map(|s| {
                    let regions: Vec<Vec<f64>> = s
                        .selected
                        .iter()
                        .map(|&j| to64(&forward.pool.regions[j]))
                        .collect();
                    let selected: Vec<Vec<f32>> = s
                        .selected
                        .iter()
                        .map(|&j| forward.pool.regions[j].clone())
                        .collect();
                    FrozenClass {
                        protos: s.contextual.prototypes.iter().map(|p| to64(p)).collect(),
                        messages: neighbour_means(&selected),
                        regions,
                    }
                })
            })
            .collect();

        let mut images = Vec::new();
        let n_q = episode.queries.len() as f64;
        for q in &episode.queries {
            let labels = feature_resolution_labels(&q.mask, &q.features)?;
            images.push(Self::freeze_image(forward, &q.features, labels, 1.0 / n_q)?);
        }
        let shots = (episode.n_way() * episode.k_shot()) as f64;
        for (imgs, masks) in episode.support.iter().zip(&forward.support_masks) {
            for (img, mask) in imgs.iter().zip(masks) {
                images.push(Self::freeze_image(
                    forward,
                    &img.features,
                    mask.clone(),
                    1.0 / shots,
                )?);
            }
        }
        Ok(Self {
            dim,
            lambda_r: params.lambda_r as f64,
            temperature: params.score_temperature as f64,
            classes,
            images,
        })
    }

    fn freeze_image(
        forward: &EpisodeForward,
        grid: &FeatureGrid,
        labels: LabelGrid,
        weight: f64,
    ) -> Result<FrozenImage> {
        let (_, winners) = forward.score(grid)?;
        let cells = to64(grid.values());
        let channels = grid.channels();
        let norms = cells.chunks_exact(channels).map(norm).collect();
        Ok(FrozenImage {
            channels,
            cells,
            norms,
            labels: labels.labels().to_vec(),
            winners,
            weight,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn class_forward(&self, class: &FrozenClass, w: &[f64]) -> ClassForward {
        let d = self.dim;
        let activations: Vec<Vec<f64>> = class
            .messages
            .iter()
            .map(|m| w.chunks_exact(d).map(|row| dot(row, m)).collect())
            .collect();
        let augmented: Vec<Vec<f64>> = class
            .regions
            .iter()
            .zip(&activations)
            .map(|(r, a)| r.iter().zip(a).map(|(x, a)| x + a.max(0.0)).collect())
            .collect();
        let mut sims = Vec::with_capacity(class.protos.len());
        let mut totals = Vec::with_capacity(class.protos.len());
        let mut phi = Vec::with_capacity(class.protos.len());
        let mut refined = Vec::with_capacity(class.protos.len());
        for p in &class.protos {
            let pn = norm(p);
            let row: Vec<f64> = augmented
                .iter()
                .map(|r| {
                    let rn = norm(r);
                    if pn <= 1e-12 || rn <= 1e-12 {
                        0.0
                    } else {
                        (dot(p, r) / (pn * rn)).clamp(0.0, 1.0)
                    }
                })
                .collect();
            let total: f64 = row.iter().sum();
            let weights: Vec<f64> = if total > 0.0 {
                row.iter().map(|s| s / total.max(ATTENTION_EPS)).collect()
            } else {
                vec![1.0 / row.len() as f64; row.len()]
            };
            let mut out = p.clone();
            for (f, r) in weights.iter().zip(&augmented) {
                for (o, x) in out.iter_mut().zip(r) {
                    *o += self.lambda_r * f * x;
                }
            }
            sims.push(row);
            totals.push(total);
            phi.push(weights);
            refined.push(out);
        }
        ClassForward {
            activations,
            augmented,
            sims,
            totals,
            phi,
            refined,
        }
    }

    fn refined_prototypes(&self, w: &[f64]) -> Vec<Option<(Vec<Vec<f64>>, Option<ClassForward>)>> {
        self.classes
            .iter()
            .map(|c| {
                c.as_ref().map(|c| {
                    if c.regions.is_empty() || self.lambda_r == 0.0 {
                        (c.protos.clone(), None)
                    } else {
                        let f = self.class_forward(c, w);
                        (f.refined.clone(), Some(f))
                    }
                })
            })
            .collect()
    }

    pub fn loss(&self, w: &[f64]) -> f64 {
        self.loss_and_gradient_inner(w, false).0
    }

    /// Loss and its gradient, row-major `dim x dim`.
    pub fn loss_and_gradient(&self, w: &[f64]) -> (f64, Vec<f64>) {
        self.loss_and_gradient_inner(w, true)
    }

    fn loss_and_gradient_inner(&self, w: &[f64], want_grad: bool) -> (f64, Vec<f64>) {
        let d = self.dim;
        assert_eq!(w.len(), d * d, "weight matrix must be {d}x{d}");
        let refined = self.refined_prototypes(w);
        let n_classes = refined.len();
        let mut proto_grads: Vec<Vec<Vec<f64>>> = refined
            .iter()
            .map(|c| {
                c.as_ref()
                    .map_or(Vec::new(), |(p, _)| vec![vec![0.0; d]; p.len()])
            })
            .collect();
        let proto_norms: Vec<Vec<f64>> = refined
            .iter()
            .map(|c| {
                c.as_ref()
                    .map_or(Vec::new(), |(p, _)| p.iter().map(|v| norm(v)).collect())
            })
            .collect();

        let mut loss = 0.0;
        let mut scores = vec![0.0f64; n_classes];
        for img in &self.images {
            let valid = img.labels.iter().filter(|&&l| l != IGNORE).count();
            if valid == 0 {
                continue;
            }
            let scale = img.weight / valid as f64;
            for (cell, &label) in img.labels.iter().enumerate() {
                if label == IGNORE {
                    continue;
                }
                let f = img.cell(cell);
                for (k, s) in scores.iter_mut().enumerate() {
                    *s = match &refined[k] {
                        Some((p, _)) => {
                            let j = img.winners[k][cell] as usize;
                            dot(f, &p[j]) / (img.norms[cell] * proto_norms[k][j])
                        }
                        None => crate::matcher::ABSENT_CLASS_SCORE as f64,
                    };
                }
                let logits: Vec<f64> = scores.iter().map(|s| self.temperature * s).collect();
                let lse = log_sum_exp(&logits);
                loss += scale * (lse - logits[label as usize]);
                if !want_grad {
                    continue;
                }
                for k in 0..n_classes {
                    let Some((p, _)) = &refined[k] else { continue };
                    let pi = (logits[k] - lse).exp();
                    let ds = scale
                        * self.temperature
                        * (pi - if k == label as usize { 1.0 } else { 0.0 });
                    let j = img.winners[k][cell] as usize;
                    let (pn, fnorm) = (proto_norms[k][j], img.norms[cell]);
                    let s = scores[k];
                    for ((g, &fv), &pv) in proto_grads[k][j].iter_mut().zip(f).zip(&p[j]) {
                        *g += ds * (fv / (fnorm * pn) - s * pv / (pn * pn));
                    }
                }
            }
        }
        if !want_grad {
            return (loss, Vec::new());
        }

        let mut grad_w = vec![0.0f64; d * d];
        for ((class, refined), gp) in self.classes.iter().zip(&refined).zip(&proto_grads) {
            let (Some(class), Some((_, Some(fw)))) = (class, refined) else {
                continue;
            };
            let n_regions = fw.augmented.len();
            let mut g_aug = vec![vec![0.0f64; d]; n_regions];
            for (i, p) in class.protos.iter().enumerate() {
                let gi = &gp[i];
                for (j, g) in g_aug.iter_mut().enumerate() {
                    let f = self.lambda_r * fw.phi[i][j];
                    g.iter_mut().zip(gi).for_each(|(a, b)| *a += f * b);
                }
                let total = fw.totals[i];
                if total <= 0.0 {
                    continue;
                }
                let mut v = vec![0.0f64; d];
                for (f, r) in fw.phi[i].iter().zip(&fw.augmented) {
                    v.iter_mut().zip(r).for_each(|(a, x)| *a += f * x);
                }
                let g_dot_v = dot(gi, &v);
                let pn = norm(p);
                for j in 0..n_regions {
                    let s = fw.sims[i][j];
                    if s <= 0.0 || s >= 1.0 {
                        continue;
                    }
                    let r = &fw.augmented[j];
                    let gs = if total >= ATTENTION_EPS {
                        self.lambda_r * (dot(gi, r) - g_dot_v) / total
                    } else {
                        self.lambda_r * dot(gi, r) / ATTENTION_EPS
                    };
                    let rn = norm(r);
                    for ((g, &pv), &rv) in g_aug[j].iter_mut().zip(p).zip(r) {
                        *g += gs * (pv / (pn * rn) - s * rv / (rn * rn));
                    }
                }
            }
            for ((g, a), m) in g_aug.iter().zip(&fw.activations).zip(&class.messages) {
                for row in 0..d {
                    if a[row] <= 0.0 {
                        continue;
                    }
                    let out = &mut grad_w[row * d..(row + 1) * d];
                    out.iter_mut().zip(m).for_each(|(o, mv)| *o += g[row] * mv);
                }
            }
        }
        (loss, grad_w)
    }
}

/// Fixed-structure gradient of the episode loss with respect to `W`, row-major.
///
/// Exactly zero when `W` cannot influence the loss: no unlabeled grids, no
/// selected regions, or `lambda_r = 0`.
pub fn approx_gradient_message_weights(
    episode: &Episode,
    weights: &MessageWeights,
    params: &HyperParams,
    seed: u64,
) -> Result<Vec<f64>> {
    if params.nonparametric_gnn || weights.is_nonparametric() {
        return Err(Error::NonparametricMode);
    }
    let forward = EpisodeForward::run(episode, params, weights, seed)?;
    let frozen = FrozenEpisode::capture(episode, &forward, params)?;
    let w: Vec<f64> = weights.matrix().iter().map(|&v| v as f64).collect();
    Ok(frozen.loss_and_gradient(&w).1)
}

/// SGD settings; plain SGD when momentum and weight decay are zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdOptions {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdOptions {
    pub fn plain(lr: f64) -> Self {
        Self {
            lr,
            momentum: 0.0,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub weights: MessageWeights,
    /// Fixed-structure loss before each step, then after the last one.
    pub losses: Vec<f64>,
}

pub fn train_message_weights(
    episodes: &[Episode],
    weights: &MessageWeights,
    lr: f64,
    steps: usize,
    params: &HyperParams,
    seed: u64,
) -> Result<TrainOutcome> {
    train_message_weights_with(
        episodes,
        weights,
        &SgdOptions::plain(lr),
        steps,
        params,
        seed,
    )
}

/// Cycles through `episodes`, one SGD step per episode. Each episode keeps one
/// forward seed for the whole run so its clustering never changes.
pub fn train_message_weights_with(
    episodes: &[Episode],
    weights: &MessageWeights,
    opts: &SgdOptions,
    steps: usize,
    params: &HyperParams,
    seed: u64,
) -> Result<TrainOutcome> {
    if !(opts.lr >= 0.0 && opts.lr.is_finite())
        || !(0.0..1.0).contains(&opts.momentum)
        || !(opts.weight_decay >= 0.0)
    {
        return Err(Error::InvalidConfig(
            "need lr >= 0, 0 <= momentum < 1, weight decay >= 0".into(),
        ));
    }
    if episodes.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut weights = weights.clone();
    let mut velocity = vec![0.0f64; weights.dim() * weights.dim()];
    let mut losses = Vec::with_capacity(steps + 1);
    let frozen_at = |w: &MessageWeights, step: usize| -> Result<(f64, Vec<f64>)> {
        let idx = step % episodes.len();
        let episode = &episodes[idx];
        let eff = effective_weights(params, w);
        let forward = EpisodeForward::run(episode, params, &eff, derive_seed(seed, idx as u64))?;
        let frozen = FrozenEpisode::capture(episode, &forward, params)?;
        let w64: Vec<f64> = w.matrix().iter().map(|&v| v as f64).collect();
        if eff.is_nonparametric() {
            return Err(Error::NonparametricMode);
        }
        Ok(frozen.loss_and_gradient(&w64))
    };
    for step in 0..steps {
        let (loss, grad) = frozen_at(&weights, step)?;
        losses.push(loss);
        for ((w, v), g) in weights
            .matrix_mut()
            .iter_mut()
            .zip(velocity.iter_mut())
            .zip(grad)
        {
            let g = g + opts.weight_decay * *w as f64;
            *v = opts.momentum * *v + g;
            *w -= (opts.lr * *v) as f32;
        }
    }
    losses.push(frozen_at(&weights, steps)?.0);
    Ok(TrainOutcome { weights, losses })
}
