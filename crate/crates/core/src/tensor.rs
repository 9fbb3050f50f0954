//! Dense grids, similarity primitives and spatial resampling.
//!
//! Storage is `f32`; every reduction (dot products, norms, means, interpolation
//! weights) is carried out in `f64` and rounded once at the end.

use crate::error::{mismatch, Error, Result};

/// Label value excluded from prototypes, losses and metrics.
pub const IGNORE: u8 = 255;

/// Norms at or below this are treated as zero vectors.
pub const ZERO_NORM: f64 = 1e-12;

/// A feature column for a single cell.
pub type FeatureVector = Vec<f32>;

/// `height x width x channels` feature map, row-major and channel-last.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f32>,
}

impl FeatureGrid {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(mismatch(format!(
                "feature grid dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if values.len() != height * width * channels {
            return Err(mismatch(format!(
                "feature grid {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidEpisode(
                "feature grid contains non-finite values".into(),
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            values,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(height * width * channels);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    values.push(f(r, c, ch));
                }
            }
        }
        Self::new(height, width, channels, values)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn cell_count(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Feature column of the cell at `(row, col)`.
    pub fn cell(&self, row: usize, col: usize) -> &[f32] {
        self.cell_at(row * self.width + col)
    }

    /// Feature column of the cell with row-major index `idx`.
    pub fn cell_at(&self, idx: usize) -> &[f32] {
        let start = idx * self.channels;
        &self.values[start..start + self.channels]
    }

    /// All feature columns in row-major order.
    pub fn cells(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        self.values.chunks_exact(self.channels)
    }
}

/// Integer class-label map. Labels are `0..=C` or [`IGNORE`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelGrid {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LabelGrid {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(mismatch(format!(
                "label grid dimensions must be positive, got {height}x{width}"
            )));
        }
        if labels.len() != height * width {
            return Err(mismatch(format!(
                "label grid {height}x{width} needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Result<Self> {
        Self::new(height, width, vec![label; height * width])
    }

    pub fn from_rows(rows: &[&[u8]]) -> Result<Self> {
        let width = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != width) {
            return Err(mismatch("ragged label rows"));
        }
        Self::new(rows.len(), width, rows.concat())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.width + col]
    }

    pub fn contains(&self, label: u8) -> bool {
        self.labels.contains(&label)
    }

    pub fn same_size(&self, other: &LabelGrid) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Relabels every cell through `f`.
    pub fn map(&self, f: impl Fn(u8) -> u8) -> LabelGrid {
        LabelGrid {
            height: self.height,
            width: self.width,
            labels: self.labels.iter().map(|&l| f(l)).collect(),
        }
    }
}

/// Planar stack of per-class score maps: `classes x height x width`.
///
/// Channel 0 is background; channel `c` is the `c`-th episode class.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreStack {
    classes: usize,
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl ScoreStack {
    pub fn new(classes: usize, height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if classes == 0 || height == 0 || width == 0 {
            return Err(mismatch("score stack dimensions must be positive"));
        }
        if values.len() != classes * height * width {
            return Err(mismatch(format!(
                "score stack {classes}x{height}x{width} needs {} values, got {}",
                classes * height * width,
                values.len()
            )));
        }
        Ok(Self {
            classes,
            height,
            width,
            values,
        })
    }

    pub fn from_channels(height: usize, width: usize, channels: Vec<Vec<f32>>) -> Result<Self> {
        if channels.iter().any(|c| c.len() != height * width) {
            return Err(mismatch("score channel has the wrong number of cells"));
        }
        let classes = channels.len();
        Self::new(classes, height, width, channels.concat())
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn channel(&self, class: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.values[class * n..(class + 1) * n]
    }

    pub fn get(&self, class: usize, row: usize, col: usize) -> f32 {
        self.values[(class * self.height + row) * self.width + col]
    }
}

pub(crate) fn dot64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

pub(crate) fn norm64(a: &[f32]) -> f64 {
    dot64(a, a).sqrt()
}

/// Cosine similarity `a.b / (|a| |b|)`.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f32> {
    if a.len() != b.len() {
        return Err(mismatch(format!(
            "vector lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm64(a), norm64(b));
    if na <= ZERO_NORM || nb <= ZERO_NORM {
        return Err(Error::ZeroNormVector);
    }
    Ok((dot64(a, b) / (na * nb)).clamp(-1.0, 1.0) as f32)
}

/// Cosine clamped to `[0, 1]`, used as the affinity in every attention step.
/// A zero vector has no direction and therefore zero affinity.
pub(crate) fn affinity(a: &[f32], b: &[f32]) -> f64 {
    let (na, nb) = (norm64(a), norm64(b));
    if na <= ZERO_NORM || nb <= ZERO_NORM {
        return 0.0;
    }
    (dot64(a, b) / (na * nb)).clamp(0.0, 1.0)
}

/// Nearest-neighbour mask resize with center-aligned coordinates.
///
/// Output cell `i` samples source index `round_half_down((i + 0.5) * in / out - 0.5)`,
/// evaluated in exact integer arithmetic.
pub fn resize_mask_nearest(mask: &LabelGrid, out_h: usize, out_w: usize) -> Result<LabelGrid> {
    if out_h == 0 || out_w == 0 {
        return Err(mismatch("resize target must be at least 1x1"));
    }
    let rows: Vec<usize> = (0..out_h)
        .map(|i| nearest_source(i, mask.height, out_h))
        .collect();
    let cols: Vec<usize> = (0..out_w)
        .map(|j| nearest_source(j, mask.width, out_w))
        .collect();
    let mut labels = Vec::with_capacity(out_h * out_w);
    for &r in &rows {
        for &c in &cols {
            labels.push(mask.get(r, c));
        }
    }
    LabelGrid::new(out_h, out_w, labels)
}

fn nearest_source(i: usize, len_in: usize, len_out: usize) -> usize {
    // ceil(((2i + 1) * in - 2 * out) / (2 * out))
    let num = (2 * i as i64 + 1) * len_in as i64 - 2 * len_out as i64;
    let den = 2 * len_out as i64;
    let idx = num.div_euclid(den) + i64::from(num.rem_euclid(den) != 0);
    idx.clamp(0, len_in as i64 - 1) as usize
}

/// Align-corners bilinear upsampling of every channel.
///
/// Output index `i` maps to source coordinate `i * (in - 1) / (out - 1)` (0 when `out == 1`).
pub fn upsample_bilinear(scores: &ScoreStack, out_h: usize, out_w: usize) -> Result<ScoreStack> {
    if out_h == 0 || out_w == 0 {
        return Err(mismatch("upsample target must be at least 1x1"));
    }
    let ys = axis_taps(scores.height, out_h);
    let xs = axis_taps(scores.width, out_w);
    let mut values = Vec::with_capacity(scores.classes * out_h * out_w);
    for k in 0..scores.classes {
        let ch = scores.channel(k);
        let at = |r: usize, c: usize| ch[r * scores.width + c] as f64;
        for &(y0, y1, wy) in &ys {
            for &(x0, x1, wx) in &xs {
                let top = (1.0 - wx) * at(y0, x0) + wx * at(y0, x1);
                let bottom = (1.0 - wx) * at(y1, x0) + wx * at(y1, x1);
                values.push(((1.0 - wy) * top + wy * bottom) as f32);
            }
        }
    }
    ScoreStack::new(scores.classes, out_h, out_w, values)
}

fn axis_taps(len_in: usize, len_out: usize) -> Vec<(usize, usize, f64)> {
    (0..len_out)
        .map(|i| {
            if len_in == 1 || len_out == 1 {
                return (0, 0, 0.0);
            }
            let src = i as f64 * (len_in - 1) as f64 / (len_out - 1) as f64;
            let lo = (src.floor() as usize).min(len_in - 1);
            let hi = (lo + 1).min(len_in - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Feature columns at cells labelled `class_id`, in row-major order.
pub fn gather_class_features<'a>(
    grid: &'a FeatureGrid,
    mask: &LabelGrid,
    class_id: u8,
) -> Result<Vec<&'a [f32]>> {
    if grid.height != mask.height || grid.width != mask.width {
        return Err(mismatch(format!(
            "grid {}x{} vs mask {}x{}",
            grid.height, grid.width, mask.height, mask.width
        )));
    }
    if class_id == IGNORE {
        return Ok(Vec::new());
    }
    Ok(grid
        .cells()
        .zip(&mask.labels)
        .filter(|(_, &l)| l == class_id)
        .map(|(f, _)| f)
        .collect())
}
