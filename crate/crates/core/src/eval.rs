//! Episodic evaluation: several runs of many tasks, each run with its own seed.
//!
//! Episodes are independent, so a run can fan out over a thread pool. Results
//! land in task order and are reduced sequentially, which keeps reports
//! identical for any number of workers.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::episode::{Episode, HyperParams};
use crate::error::{Error, Result};
use crate::metrics::{episode_metrics, EpisodeMetrics, MetricsReport, RunAccumulator};
use crate::pipeline::{derive_seed, predict_episode};
use crate::refine::MessageWeights;
use crate::sampler::{sample_episode, EpisodeShape, ImagePool};
use crate::synth::{generate_synthetic_episode, SynthConfig};

/// Where evaluation episodes come from.
#[derive(Debug, Clone)]
pub enum EpisodeSource<'a> {
    /// Fresh synthetic episodes; the config's seed is replaced per task.
    Synth(SynthConfig),
    Pool {
        pool: &'a ImagePool,
        fold: Vec<u8>,
        shape: EpisodeShape,
    },
}

impl EpisodeSource<'_> {
    pub fn episode(&self, seed: u64) -> Result<Episode> {
        match self {
            EpisodeSource::Synth(cfg) => generate_synthetic_episode(&SynthConfig { seed, ..*cfg }),
            EpisodeSource::Pool { pool, fold, shape } => sample_episode(pool, fold, shape, seed),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub runs: usize,
    pub tasks: usize,
    pub seed: u64,
    pub jobs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            runs: 5,
            tasks: 1000,
            seed: 0,
            jobs: 1,
        }
    }
}

/// Seed of task `task` in run `run`; the episode and the pipeline draw from
/// different streams of it.
pub fn task_seed(base: u64, run: usize, task: usize) -> u64 {
    derive_seed(base.wrapping_add(run as u64), task as u64)
}

/// Runs one task: builds the episode, predicts every query, scores it.
pub fn evaluate_task(
    source: &EpisodeSource,
    params: &HyperParams,
    weights: &MessageWeights,
    seed: u64,
) -> Result<EpisodeMetrics> {
    let episode = source.episode(derive_seed(seed, 0))?;
    let preds = predict_episode(&episode, params, weights, derive_seed(seed, 1))?;
    let gts: Vec<_> = episode
        .queries
        .iter()
        .map(|q| episode.to_class_ids(&q.mask))
        .collect();
    episode_metrics(&preds, &gts, &episode.class_list)
}

pub fn evaluate(
    source: &EpisodeSource,
    params: &HyperParams,
    weights: &MessageWeights,
    config: &EvalConfig,
) -> Result<MetricsReport> {
    params.validate()?;
    if config.runs == 0 || config.tasks == 0 {
        return Err(Error::InvalidConfig(
            "runs and tasks must be positive".into(),
        ));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut runs = Vec::with_capacity(config.runs);
    let mut seeds = Vec::with_capacity(config.runs);
    for run in 0..config.runs {
        let results: Vec<Result<EpisodeMetrics>> = pool.install(|| {
            (0..config.tasks)
                .into_par_iter()
                .map(|t| evaluate_task(source, params, weights, task_seed(config.seed, run, t)))
                .collect()
        });
        let mut acc = RunAccumulator::default();
        for r in results {
            acc.push(&r?);
        }
        runs.push(acc);
        seeds.push(config.seed.wrapping_add(run as u64));
    }
    Ok(MetricsReport::from_runs(&runs, &seeds, *params))
}

/// Parametric, nonparametric and refinement-free variants side by side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub parametric: MetricsReport,
    pub nonparametric: MetricsReport,
    /// Same as `parametric` with `lambda_r = 0`.
    pub no_refinement: MetricsReport,
    /// Whether the nonparametric report is unchanged when `W` is perturbed.
    pub nonparametric_weight_invariant: bool,
}

/// Deterministic perturbation of `weights` used by the invariance check.
pub fn perturbed_weights(weights: &MessageWeights, seed: u64) -> MessageWeights {
    let mut w = weights.clone();
    for (i, v) in w.matrix_mut().iter_mut().enumerate() {
        let bits = derive_seed(seed, i as u64);
        *v += (bits >> 40) as f32 / (1u64 << 24) as f32 - 0.5;
    }
    w
}

pub fn ablate(
    source: &EpisodeSource,
    params: &HyperParams,
    weights: &MessageWeights,
    config: &EvalConfig,
) -> Result<AblationReport> {
    let parametric_params = HyperParams {
        nonparametric_gnn: false,
        ..*params
    };
    let nonparametric_params = HyperParams {
        nonparametric_gnn: true,
        ..*params
    };
    let parametric = evaluate(source, &parametric_params, weights, config)?;
    let nonparametric = evaluate(source, &nonparametric_params, weights, config)?;
    let shifted = evaluate(
        source,
        &nonparametric_params,
        &perturbed_weights(weights, config.seed),
        config,
    )?;
    let no_refinement = evaluate(
        source,
        &HyperParams {
            lambda_r: 0.0,
            ..parametric_params
        },
        weights,
        config,
    )?;
    Ok(AblationReport {
        nonparametric_weight_invariant: serde_json::to_string(&nonparametric).ok()
            == serde_json::to_string(&shifted).ok(),
        parametric,
        nonparametric,
        no_refinement,
    })
}
