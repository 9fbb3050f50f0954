//! Pixel-counting IoU on plain label slices.

#![allow(dead_code)]

use partseg::metrics::{binary_iou, mean_iou};
use partseg::LabelGrid;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const IGNORE: u8 = 255;

pub fn count_iou(pred: &[u8], gt: &[u8], class: impl Fn(u8) -> bool) -> f64 {
    let (mut inter, mut union) = (0u32, 0u32);
    for i in 0..pred.len() {
        if pred[i] == IGNORE || gt[i] == IGNORE {
            continue;
        }
        if class(pred[i]) && class(gt[i]) {
            inter += 1;
        }
        if class(pred[i]) || class(gt[i]) {
            union += 1;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn brute_mean(pred: &[u8], gt: &[u8], classes: &[u8]) -> f64 {
    classes
        .iter()
        .map(|&c| count_iou(pred, gt, |l| l == c))
        .sum::<f64>()
        / classes.len() as f64
}

pub fn brute_binary(pred: &[u8], gt: &[u8]) -> f64 {
    (count_iou(pred, gt, |l| l != 0) + count_iou(pred, gt, |l| l == 0)) / 2.0
}

/// The 3x3 mask whose cell `i` holds `class` when bit `i` of `bits` is set.
pub fn mask_from_bits(bits: u32, class: u8) -> Vec<u8> {
    (0..9)
        .map(|i| if bits >> i & 1 == 1 { class } else { 0 })
        .collect()
}

pub fn check_pair(pred: &[u8], gt: &[u8], classes: &[u8]) -> Result<(), String> {
    let p = LabelGrid::new(3, 3, pred.to_vec()).unwrap();
    let g = LabelGrid::new(3, 3, gt.to_vec()).unwrap();
    let m = mean_iou(&p, &g, classes).map_err(|e| e.to_string())?.mean;
    let b = binary_iou(&p, &g).map_err(|e| e.to_string())?;
    let (bm, bb) = (brute_mean(pred, gt, classes), brute_binary(pred, gt));
    if m != bm || b != bb {
        return Err(format!(
            "{pred:?} vs {gt:?}: mean {m} / {bm}, binary {b} / {bb}"
        ));
    }
    Ok(())
}

/// Random pairs drawn from the 2^9 x 2^9 two-class 3x3 masks.
pub fn iou_suite(pairs: usize, seed: u64) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..pairs {
        let class = rng.gen_range(1..=254u8);
        let pred = mask_from_bits(rng.gen_range(0..512), class);
        let gt = mask_from_bits(rng.gen_range(0..512), class);
        check_pair(&pred, &gt, &[class])?;
    }
    Ok(format!("{pairs} pairs equal to pixel counting"))
}
