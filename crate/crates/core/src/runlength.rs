//! Pyramid run-length (RL) histograms of binarized pages.
//!
//! A run is a maximal sequence of same-colored pixels along one of four
//! directions (horizontal, vertical, diagonal, anti-diagonal). Run lengths are
//! quantized on a log scale into `Q` bins `[1], [2], [3-4], [5-8], ...`, the last
//! bin catching everything longer than `2^(Q-2)`. Each pyramid cell yields an
//! `8·Q` block laid out as `direction × {black, white} × bin`.

use serde::{Deserialize, Serialize};

use crate::imaging::{self, BinaryImage, GrayImage};
use crate::{Error, Result};

/// Where the L1 + square-root normalization is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RlNormalization {
    /// Every `8·Q` cell block is normalized on its own.
    #[default]
    PerCell,
    /// The full concatenated vector is normalized once.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlConfig {
    /// Number of run-length bins `Q`.
    pub bins: usize,
    /// Pyramid grid sizes; level `n` splits the page into `n×n` cells.
    pub levels: Vec<usize>,
    pub max_pixels: usize,
    pub threshold: f32,
    pub normalization: RlNormalization,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            bins: 11,
            levels: vec![1, 2, 4, 6, 8],
            max_pixels: imaging::DEFAULT_MAX_PIXELS,
            threshold: imaging::DEFAULT_THRESHOLD,
            normalization: RlNormalization::PerCell,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 {
            return Err(Error::invalid("RL needs at least 2 bins"));
        }
        if self.levels.is_empty() || self.levels.contains(&0) {
            return Err(Error::invalid("RL pyramid levels must be non-empty and >= 1"));
        }
        Ok(())
    }

    pub fn cell_count(&self) -> usize {
        self.levels.iter().map(|n| n * n).sum()
    }

    pub fn block_len(&self) -> usize {
        8 * self.bins
    }

    pub fn descriptor_len(&self) -> usize {
        self.cell_count() * self.block_len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RlDescriptor(Vec<f64>);

impl RlDescriptor {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Half-open pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        Rect { x0, y0, x1, y1 }
    }

    pub fn full(img: &BinaryImage) -> Self {
        Rect::new(0, 0, img.width(), img.height())
    }

    pub fn is_empty(&self) -> bool {
        self.x1 <= self.x0 || self.y1 <= self.y0
    }
}

/// Log-scale bin of a run of `length` pixels among `bins` bins.
pub fn quantize_run_length(length: usize, bins: usize) -> Result<usize> {
    if length == 0 {
        return Err(Error::invalid("run length must be >= 1"));
    }
    Ok(log_bin(length).min(bins - 1))
}

/// `ceil(log2(length))` for `length >= 1`.
#[inline]
fn log_bin(length: usize) -> usize {
    (usize::BITS - (length - 1).leading_zeros()) as usize
}

const DIRECTIONS: [(isize, isize); 4] = [(1, 0), (0, 1), (1, 1), (-1, 1)];

/// Run-length histogram of one region: `4 directions × {black, white} × bins`.
pub fn region_run_histogram(img: &BinaryImage, region: Rect, bins: usize) -> Result<Vec<f64>> {
    if bins < 2 {
        return Err(Error::invalid("RL needs at least 2 bins"));
    }
    if region.x1 > img.width() || region.y1 > img.height() {
        return Err(Error::invalid(format!(
            "region {region:?} exceeds {}x{} image",
            img.width(),
            img.height()
        )));
    }
    let mut hist = vec![0.0; 8 * bins];
    if region.is_empty() {
        return Ok(hist);
    }
    for (d, &step) in DIRECTIONS.iter().enumerate() {
        let block = &mut hist[d * 2 * bins..(d + 1) * 2 * bins];
        for start in line_starts(region, step) {
            count_runs(img, region, start, step, bins, block);
        }
    }
    Ok(hist)
}

/// First pixel of every line crossing `region` in direction `step`.
fn line_starts(r: Rect, step: (isize, isize)) -> Vec<(usize, usize)> {
    match step {
        (1, 0) => (r.y0..r.y1).map(|y| (r.x0, y)).collect(),
        (0, 1) => (r.x0..r.x1).map(|x| (x, r.y0)).collect(),
        (1, 1) => (r.y0..r.y1)
            .rev()
            .map(|y| (r.x0, y))
            .chain((r.x0 + 1..r.x1).map(|x| (x, r.y0)))
            .collect(),
        (-1, 1) => (r.x0..r.x1)
            .map(|x| (x, r.y0))
            .chain((r.y0 + 1..r.y1).map(|y| (r.x1 - 1, y)))
            .collect(),
        _ => unreachable!("unsupported direction"),
    }
}

fn count_runs(
    img: &BinaryImage,
    r: Rect,
    (mut x, mut y): (usize, usize),
    (dx, dy): (isize, isize),
    bins: usize,
    block: &mut [f64],
) {
    let mut current = img.is_white(x, y);
    let mut len = 0usize;
    loop {
        let w = img.is_white(x, y);
        if w == current {
            len += 1;
        } else {
            block[current as usize * bins + log_bin(len).min(bins - 1)] += 1.0;
            current = w;
            len = 1;
        }
        let nx = x as isize + dx;
        let ny = y as isize + dy;
        if nx < r.x0 as isize || nx >= r.x1 as isize || ny >= r.y1 as isize {
            break;
        }
        x = nx as usize;
        y = ny as usize;
    }
    block[current as usize * bins + log_bin(len).min(bins - 1)] += 1.0;
}

/// Cell boundaries `round(i·dim/n)` for `i = 0..=n`.
pub fn cell_edges(dim: usize, n: usize) -> Vec<usize> {
    (0..=n)
        .map(|i| ((i * dim) as f64 / n as f64).round() as usize)
        .collect()
}

/// In-place L1 normalization followed by component-wise square root.
/// All-zero input stays zero.
fn l1_sqrt(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        v.iter_mut().for_each(|x| *x = (*x / s).sqrt());
    }
}

/// Full pyramid descriptor of an already rescaled binary page.
pub fn rl_descriptor(img: &BinaryImage, config: &RlConfig) -> Result<RlDescriptor> {
    config.validate()?;
    let block = config.block_len();
    let mut out = Vec::with_capacity(config.descriptor_len());
    for &n in &config.levels {
        let xs = cell_edges(img.width(), n);
        let ys = cell_edges(img.height(), n);
        for cy in 0..n {
            for cx in 0..n {
                let rect = Rect::new(xs[cx], ys[cy], xs[cx + 1], ys[cy + 1]);
                let mut h = region_run_histogram(img, rect, config.bins)?;
                if config.normalization == RlNormalization::PerCell {
                    l1_sqrt(&mut h);
                }
                debug_assert_eq!(h.len(), block);
                out.extend_from_slice(&h);
            }
        }
    }
    if config.normalization == RlNormalization::Global {
        l1_sqrt(&mut out);
    }
    Ok(RlDescriptor(out))
}

/// Downscale, binarize and describe a grayscale page.
pub fn rl_from_gray(gray: &GrayImage, config: &RlConfig) -> Result<RlDescriptor> {
    let scaled = imaging::downscale_to_max_pixels(gray, config.max_pixels)?;
    let bin = imaging::binarize(&scaled, config.threshold)?;
    rl_descriptor(&bin, config)
}
