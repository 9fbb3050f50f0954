//! Prototype-pixel matching and mask prediction.

use crate::error::{mismatch, Error, Result};
use crate::prototype::{PrototypeSet, Stage};
use crate::tensor::{
    dot64, norm64, upsample_bilinear, FeatureGrid, LabelGrid, ScoreStack, ZERO_NORM,
};

/// Score given to a class that has no prototypes in the episode.
pub const ABSENT_CLASS_SCORE: f32 = -1.0;

/// Cosine score map of every refined prototype against every query cell.
///
/// Channel `j` of the result belongs to prototype `j`.
pub fn part_score_maps(query: &FeatureGrid, protos: &PrototypeSet) -> Result<ScoreStack> {
    protos.expect_stage(Stage::Refined)?;
    if protos.channels() != query.channels() {
        return Err(mismatch(format!(
            "query has {} channels, prototypes {}",
            query.channels(),
            protos.channels()
        )));
    }
    let cell_norms = cell_norms(query)?;
    let mut values = Vec::with_capacity(protos.len() * query.cell_count());
    for p in &protos.prototypes {
        let pn = norm64(p);
        if pn <= ZERO_NORM {
            return Err(Error::ZeroNormVector);
        }
        for (f, fnorm) in query.cells().zip(&cell_norms) {
            values.push((dot64(f, p) / (fnorm * pn)).clamp(-1.0, 1.0) as f32);
        }
    }
    ScoreStack::new(protos.len(), query.height(), query.width(), values)
}

pub(crate) fn cell_norms(grid: &FeatureGrid) -> Result<Vec<f64>> {
    grid.cells()
        .map(|f| {
            let n = norm64(f);
            if n <= ZERO_NORM {
                Err(Error::ZeroNormVector)
            } else {
                Ok(n)
            }
        })
        .collect()
}

/// Max over parts per class, with the winning part index of every cell.
pub fn fuse_with_argmax(per_class: &[ScoreStack]) -> Result<(ScoreStack, Vec<Vec<u16>>)> {
    let first = per_class
        .first()
        .ok_or_else(|| mismatch("no class score maps"))?;
    let (h, w) = (first.height(), first.width());
    if per_class.iter().any(|s| s.height() != h || s.width() != w) {
        return Err(mismatch("part score maps differ in spatial size"));
    }
    let n = h * w;
    let mut fused = Vec::with_capacity(per_class.len() * n);
    let mut winners = Vec::with_capacity(per_class.len());
    for parts in per_class {
        let mut best: Vec<f32> = parts.channel(0).to_vec();
        let mut arg = vec![0u16; n];
        for j in 1..parts.classes() {
            for ((b, a), &v) in best.iter_mut().zip(arg.iter_mut()).zip(parts.channel(j)) {
                if v > *b {
                    *b = v;
                    *a = j as u16;
                }
            }
        }
        fused.extend(best);
        winners.push(arg);
    }
    Ok((ScoreStack::new(per_class.len(), h, w, fused)?, winners))
}

/// Fuses each class's part maps by elementwise max and stacks the classes,
/// background first.
pub fn fuse_and_stack(per_class: &[ScoreStack]) -> Result<ScoreStack> {
    fuse_with_argmax(per_class).map(|(s, _)| s)
}

/// Per-cell argmax over channels; ties go to the lower channel.
pub fn argmax_channels(stack: &ScoreStack) -> Vec<u8> {
    let n = stack.height() * stack.width();
    let mut best: Vec<f32> = stack.channel(0).to_vec();
    let mut arg = vec![0u8; n];
    for k in 1..stack.classes() {
        for ((b, a), &v) in best.iter_mut().zip(arg.iter_mut()).zip(stack.channel(k)) {
            if v > *b {
                *b = v;
                *a = k as u8;
            }
        }
    }
    arg
}

/// Upsamples the scores to `out_h x out_w`, takes the per-pixel argmax and maps
/// channel indices to class identifiers (channel 0 is background, label 0).
pub fn predict_query_mask(
    stack: &ScoreStack,
    out_h: usize,
    out_w: usize,
    class_list: &[u8],
) -> Result<LabelGrid> {
    if class_list.len() + 1 != stack.classes() {
        return Err(mismatch(format!(
            "{} score channels for {} classes plus background",
            stack.classes(),
            class_list.len()
        )));
    }
    let up = upsample_bilinear(stack, out_h, out_w)?;
    let labels = argmax_channels(&up)
        .into_iter()
        .map(|c| {
            if c == 0 {
                0
            } else {
                class_list[c as usize - 1]
            }
        })
        .collect();
    LabelGrid::new(out_h, out_w, labels)
}
