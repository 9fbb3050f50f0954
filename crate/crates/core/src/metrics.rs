//! Intersection-over-union metrics and the evaluation report.
//!
//! Pixels where either mask is IGNORE are left out. A class absent from both
//! masks scores IoU 1.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::episode::HyperParams;
use crate::error::{mismatch, Result};
use crate::tensor::{LabelGrid, IGNORE};

/// Intersection and union pixel counts of one class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IouCounts {
    pub intersection: u64,
    pub union: u64,
}

impl IouCounts {
    pub fn iou(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }

    pub fn add(&mut self, other: IouCounts) {
        self.intersection += other.intersection;
        self.union += other.union;
    }
}

fn check_sizes(pred: &LabelGrid, gt: &LabelGrid) -> Result<()> {
    if pred.same_size(gt) {
        Ok(())
    } else {
        Err(mismatch(format!(
            "prediction is {}x{}, ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )))
    }
}

/// Counts for `class` over the pixels valid in both masks.
pub fn class_counts(pred: &LabelGrid, gt: &LabelGrid, class: u8) -> Result<IouCounts> {
    check_sizes(pred, gt)?;
    let mut c = IouCounts::default();
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        if p == IGNORE || g == IGNORE {
            continue;
        }
        let (a, b) = (p == class, g == class);
        c.intersection += (a && b) as u64;
        c.union += (a || b) as u64;
    }
    Ok(c)
}

/// Per-class IoU of the given foreground classes plus their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct IouResult {
    pub per_class: Vec<(u8, f64)>,
    pub mean: f64,
}

pub fn mean_iou(pred: &LabelGrid, gt: &LabelGrid, class_list: &[u8]) -> Result<IouResult> {
    let per_class = class_list
        .iter()
        .map(|&c| class_counts(pred, gt, c).map(|n| (c, n.iou())))
        .collect::<Result<Vec<_>>>()?;
    let mean = if per_class.is_empty() {
        1.0
    } else {
        per_class.iter().map(|(_, v)| v).sum::<f64>() / per_class.len() as f64
    };
    Ok(IouResult { per_class, mean })
}

fn binary(mask: &LabelGrid) -> LabelGrid {
    mask.map(|l| match l {
        0 | IGNORE => l,
        _ => 1,
    })
}

/// Foreground (all classes merged) and background IoU, averaged.
pub fn binary_iou(pred: &LabelGrid, gt: &LabelGrid) -> Result<f64> {
    check_sizes(pred, gt)?;
    let (p, g) = (binary(pred), binary(gt));
    Ok((class_counts(&p, &g, 1)?.iou() + class_counts(&p, &g, 0)?.iou()) / 2.0)
}

/// Metrics of one episode: counts pooled over its queries.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeMetrics {
    pub class_counts: Vec<(u8, IouCounts)>,
    pub mean_iou: f64,
    pub binary_iou: f64,
}

pub fn episode_metrics(
    preds: &[LabelGrid],
    gts: &[LabelGrid],
    class_list: &[u8],
) -> Result<EpisodeMetrics> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(mismatch(format!(
            "{} predictions for {} ground-truth masks",
            preds.len(),
            gts.len()
        )));
    }
    let mut counts: Vec<(u8, IouCounts)> = class_list
        .iter()
        .map(|&c| (c, IouCounts::default()))
        .collect();
    let (mut fg, mut bg) = (IouCounts::default(), IouCounts::default());
    for (p, g) in preds.iter().zip(gts) {
        for (c, n) in counts.iter_mut() {
            n.add(class_counts(p, g, *c)?);
        }
        let (bp, bgt) = (binary(p), binary(g));
        fg.add(class_counts(&bp, &bgt, 1)?);
        bg.add(class_counts(&bp, &bgt, 0)?);
    }
    let mean_iou = counts.iter().map(|(_, n)| n.iou()).sum::<f64>() / counts.len().max(1) as f64;
    Ok(EpisodeMetrics {
        class_counts: counts,
        mean_iou,
        binary_iou: (fg.iou() + bg.iou()) / 2.0,
    })
}

/// Summary of one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub episodes: usize,
    /// Mean over episodes of the episode mean-IoU.
    pub mean_iou: f64,
    pub binary_iou: f64,
    pub per_class: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Average of the run mean-IoUs.
    pub mean_iou: f64,
    pub binary_iou: f64,
    /// IoU of every class with counts pooled over all runs.
    pub per_class: BTreeMap<String, f64>,
    pub runs: Vec<RunReport>,
    pub seeds: Vec<u64>,
    pub episodes: usize,
    pub hyperparams: HyperParams,
}

/// Accumulates episode metrics in a fixed order.
#[derive(Debug, Clone, Default)]
pub struct RunAccumulator {
    episodes: usize,
    mean_iou_sum: f64,
    binary_iou_sum: f64,
    classes: BTreeMap<u8, IouCounts>,
}

impl RunAccumulator {
    pub fn push(&mut self, m: &EpisodeMetrics) {
        self.episodes += 1;
        self.mean_iou_sum += m.mean_iou;
        self.binary_iou_sum += m.binary_iou;
        for (c, n) in &m.class_counts {
            self.classes.entry(*c).or_default().add(*n);
        }
    }

    pub fn finish(&self, seed: u64) -> RunReport {
        let n = self.episodes.max(1) as f64;
        RunReport {
            seed,
            episodes: self.episodes,
            mean_iou: self.mean_iou_sum / n,
            binary_iou: self.binary_iou_sum / n,
            per_class: per_class_table(&self.classes),
        }
    }
}

fn per_class_table(classes: &BTreeMap<u8, IouCounts>) -> BTreeMap<String, f64> {
    classes
        .iter()
        .map(|(c, n)| (c.to_string(), n.iou()))
        .collect()
}

impl MetricsReport {
    pub fn from_runs(runs: &[RunAccumulator], seeds: &[u64], hyperparams: HyperParams) -> Self {
        let reports: Vec<RunReport> = runs.iter().zip(seeds).map(|(r, &s)| r.finish(s)).collect();
        let n = reports.len().max(1) as f64;
        let mut pooled: BTreeMap<u8, IouCounts> = BTreeMap::new();
        for r in runs {
            for (c, counts) in &r.classes {
                pooled.entry(*c).or_default().add(*counts);
            }
        }
        MetricsReport {
            mean_iou: reports.iter().map(|r| r.mean_iou).sum::<f64>() / n,
            binary_iou: reports.iter().map(|r| r.binary_iou).sum::<f64>() / n,
            per_class: per_class_table(&pooled),
            episodes: reports.iter().map(|r| r.episodes).sum(),
            seeds: seeds.to_vec(),
            runs: reports,
            hyperparams,
        }
    }
}
