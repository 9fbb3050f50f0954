//! Independent double-precision re-implementation of the episode loss as a
//! function of the message weights, with the discrete forward outcomes frozen,
//! and its central-difference gradient.
//!
//! Frozen: part clusters, regions, region selection, the winning part of every
//! cell, and the on/off state of every ReLU unit at the base weights.

#![allow(dead_code)]

use partseg::eval::perturbed_weights;
use partseg::synth::{generate_synthetic_episode, SynthConfig};
use partseg::tensor::resize_mask_nearest;
use partseg::train::approx_gradient_message_weights;
use partseg::{Episode, EpisodeForward, HyperParams, MessageWeights};

pub struct Oracle {
    dim: usize,
    lambda_r: f64,
    temperature: f64,
    /// Per class: contextual prototypes and selected region features.
    classes: Vec<Option<(Vec<Vec<f64>>, Vec<Vec<f64>>)>>,
    /// Per class, region and output channel: whether the ReLU passes.
    gates: Vec<Vec<Vec<bool>>>,
    /// Per image: cells, labels, winning part per class, loss weight.
    images: Vec<(Vec<Vec<f64>>, Vec<u8>, Vec<Vec<u16>>, f64)>,
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na <= 1e-12 || nb <= 1e-12 {
        0.0
    } else {
        d / (na * nb)
    }
}

fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

impl Oracle {
    pub fn new(
        episode: &Episode,
        forward: &EpisodeForward,
        params: &HyperParams,
        base: &[f64],
    ) -> Self {
        let classes = forward
            .classes
            .iter()
            .map(|c| {
                c.as_ref().map(|c| {
                    let protos = c.contextual.prototypes.iter().map(|p| widen(p)).collect();
                    let regions = c
                        .selected
                        .iter()
                        .map(|&j| widen(&forward.pool.regions[j]))
                        .collect();
                    (protos, regions)
                })
            })
            .collect();
        let mut images = Vec::new();
        let mut push = |grid: &partseg::FeatureGrid, labels: Vec<u8>, weight: f64| {
            let (_, winners) = forward.score(grid).unwrap();
            images.push((grid.cells().map(widen).collect(), labels, winners, weight));
        };
        for q in &episode.queries {
            let labels =
                resize_mask_nearest(&q.mask, q.features.height(), q.features.width()).unwrap();
            push(
                &q.features,
                labels.labels().to_vec(),
                1.0 / episode.queries.len() as f64,
            );
        }
        let shots = (episode.n_way() * episode.k_shot()) as f64;
        for (imgs, masks) in episode.support.iter().zip(&forward.support_masks) {
            for (img, mask) in imgs.iter().zip(masks) {
                push(&img.features, mask.labels().to_vec(), 1.0 / shots);
            }
        }
        let mut oracle = Oracle {
            dim: episode.channels(),
            lambda_r: params.lambda_r as f64,
            temperature: params.score_temperature as f64,
            classes,
            gates: Vec::new(),
            images,
        };
        oracle.gates = oracle
            .activations(base)
            .iter()
            .map(|c| {
                c.iter()
                    .map(|a| a.iter().map(|&v| v > 0.0).collect())
                    .collect()
            })
            .collect();
        oracle
    }

    /// `W m_i` for every region of every class (empty for absent classes).
    fn activations(&self, w: &[f64]) -> Vec<Vec<Vec<f64>>> {
        let d = self.dim;
        self.classes
            .iter()
            .map(|c| {
                let Some((_, regions)) = c else {
                    return Vec::new();
                };
                let n = regions.len();
                (0..n)
                    .map(|i| {
                        let mut z = 1e-8;
                        let mut m = vec![0.0; d];
                        for j in (0..n).filter(|&j| j != i) {
                            let c = cos(&regions[i], &regions[j]).clamp(0.0, 1.0);
                            z += c;
                            (0..d).for_each(|k| m[k] += c * regions[j][k]);
                        }
                        (0..d)
                            .map(|row| (0..d).map(|col| w[row * d + col] * m[col] / z).sum())
                            .collect()
                    })
                    .collect()
            })
            .collect()
    }

    fn refined(&self, w: &[f64]) -> Vec<Option<Vec<Vec<f64>>>> {
        let d = self.dim;
        let activations = self.activations(w);
        self.classes
            .iter()
            .enumerate()
            .map(|(k, c)| {
                c.as_ref().map(|(protos, regions)| {
                    if regions.is_empty() || self.lambda_r == 0.0 {
                        return protos.clone();
                    }
                    let n = regions.len();
                    let smoothed: Vec<Vec<f64>> = (0..n)
                        .map(|i| {
                            (0..d)
                                .map(|row| {
                                    let gate = if self.gates[k][i][row] { 1.0 } else { 0.0 };
                                    regions[i][row] + gate * activations[k][i][row]
                                })
                                .collect()
                        })
                        .collect();
                    protos
                        .iter()
                        .map(|p| {
                            let s: Vec<f64> =
                                smoothed.iter().map(|r| cos(p, r).clamp(0.0, 1.0)).collect();
                            let total: f64 = s.iter().sum();
                            let phi: Vec<f64> = if total > 0.0 {
                                s.iter().map(|v| v / total.max(1e-8)).collect()
                            } else {
                                vec![1.0 / n as f64; n]
                            };
                            (0..d)
                                .map(|k| {
                                    p[k] + self.lambda_r
                                        * (0..n).map(|j| phi[j] * smoothed[j][k]).sum::<f64>()
                                })
                                .collect()
                        })
                        .collect()
                })
            })
            .collect()
    }

    pub fn loss(&self, w: &[f64]) -> f64 {
        let refined = self.refined(w);
        let mut total = 0.0;
        for (cells, labels, winners, weight) in &self.images {
            let valid: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != 255).collect();
            if valid.is_empty() {
                continue;
            }
            let mut sum = 0.0;
            for &i in &valid {
                let logits: Vec<f64> = refined
                    .iter()
                    .enumerate()
                    .map(|(k, p)| {
                        self.temperature
                            * p.as_ref()
                                .map_or(-1.0, |p| cos(&cells[i], &p[winners[k][i] as usize]))
                    })
                    .collect();
                let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
                sum += lse - logits[labels[i] as usize];
            }
            total += weight * sum / valid.len() as f64;
        }
        total
    }

    /// Fourth-order central differences with step `h` for every entry of `w`.
    pub fn gradient(&self, w: &[f64], h: f64) -> Vec<f64> {
        (0..w.len())
            .map(|i| {
                let at = |offset: f64| {
                    let mut x = w.to_vec();
                    x[i] += offset;
                    self.loss(&x)
                };
                (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h)
            })
            .collect()
    }
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Small noisy episode with 8 channels and one unlabeled grid.
pub fn gradient_episode(seed: u64) -> Episode {
    generate_synthetic_episode(&SynthConfig {
        n_ch: 8,
        grid_h: 6,
        grid_w: 6,
        stride: 2,
        n_unlabeled: 1,
        separation: 2.0,
        jitter: 0.6,
        appearance: 1.0,
        shared: 0.5,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

pub fn gradient_params() -> HyperParams {
    HyperParams {
        n_parts: 2,
        n_regions: 3,
        ..HyperParams::default()
    }
}

/// The initial weights moved part of the way toward a random perturbation.
pub fn gradient_weights(seed: u64) -> MessageWeights {
    let base = MessageWeights::initial(8);
    let w = perturbed_weights(&base, seed);
    let scaled = w
        .matrix()
        .iter()
        .zip(base.matrix())
        .map(|(a, b)| b + 0.4 * (a - b))
        .collect();
    MessageWeights::from_matrix(8, scaled, false).unwrap()
}

/// Worst elementwise relative error between the analytic gradient and
/// finite differences over `episodes` seeded episodes.
pub fn gradient_suite(episodes: u64, tol: f64) -> Result<String, String> {
    let params = gradient_params();
    let mut worst: f64 = 0.0;
    let mut nonzero = 0;
    for seed in 0..episodes {
        let episode = gradient_episode(seed);
        let w = gradient_weights(seed);
        let forward =
            EpisodeForward::run(&episode, &params, &w, seed).map_err(|e| e.to_string())?;
        if forward
            .classes
            .iter()
            .flatten()
            .all(|c| c.selected.is_empty())
        {
            return Err(format!("episode {seed} selects no regions"));
        }
        let analytic = approx_gradient_message_weights(&episode, &w, &params, seed)
            .map_err(|e| e.to_string())?;
        let w64: Vec<f64> = w.matrix().iter().map(|&v| v as f64).collect();
        let numeric = Oracle::new(&episode, &forward, &params, &w64).gradient(&w64, 1e-3);
        for (a, n) in analytic.iter().zip(&numeric) {
            worst = worst.max(relative_error(*a, *n));
            nonzero += usize::from(a.abs() > 1e-8);
        }
    }
    let summary = format!("worst relative error {worst:e} over {nonzero} nonzero entries");
    if worst <= tol && nonzero > 0 {
        Ok(summary)
    } else {
        Err(summary)
    }
}
