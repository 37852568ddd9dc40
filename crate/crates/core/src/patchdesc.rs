//! Dense multi-scale SIFT and the 80-dim local features fed to the Fisher
//! encoder: 77 PCA dimensions plus normalized patch center and scale.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::imaging::{self, GrayImage};
use crate::linalg::{self, Matrix, PcaModel};
use crate::{Error, Result};

pub const SIFT_DIM: usize = 128;
pub const DEFAULT_PCA_DIM: usize = 77;
/// PCA dimensions plus `(x, y, s)`.
pub const LOCAL_DIM: usize = DEFAULT_PCA_DIM + 3;

/// Square patch with top-left corner `(left, top)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Patch {
    pub left: usize,
    pub top: usize,
    pub size: usize,
}

impl Patch {
    pub fn center_x(&self) -> f64 {
        self.left as f64 + self.size as f64 / 2.0
    }

    pub fn center_y(&self) -> f64 {
        self.top as f64 + self.size as f64 / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseConfig {
    pub scales: Vec<usize>,
    pub stride: usize,
    /// Patches whose raw histogram L2 energy is below this are dropped.
    pub min_energy: f64,
    /// Gradients for patch size `s` are taken from the page blurred with
    /// `σ = sqrt((s / (4·m))² − 0.25)`, i.e. a fraction `1/m` of the spatial
    /// cell width, as in common dense SIFT implementations. 0 disables.
    #[serde(default)]
    pub smoothing_magnif: f64,
    /// Patches with energy below `min_contrast · size` are dropped too. The
    /// energy of an isolated edge grows linearly with patch size while
    /// scattered speckle grows with its square root, so this removes
    /// speckled background at every scale.
    #[serde(default)]
    pub min_contrast: f64,
}

impl Default for DenseConfig {
    fn default() -> Self {
        DenseConfig {
            scales: vec![24, 34, 48, 68, 96],
            stride: 8,
            min_energy: 1e-6,
            smoothing_magnif: 6.0,
            min_contrast: 0.05,
        }
    }
}

impl DenseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::invalid("stride must be >= 1"));
        }
        if self.scales.is_empty() || self.scales.contains(&0) {
            return Err(Error::invalid("scales must be non-empty and positive"));
        }
        if !(self.smoothing_magnif >= 0.0 && self.smoothing_magnif.is_finite()) {
            return Err(Error::invalid("smoothing_magnif must be finite and >= 0"));
        }
        if !(self.min_contrast >= 0.0 && self.min_contrast.is_finite()) {
            return Err(Error::invalid("min_contrast must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn min_scale(&self) -> usize {
        self.scales.iter().copied().min().unwrap_or(1)
    }

    pub fn max_scale(&self) -> usize {
        self.scales.iter().copied().max().unwrap_or(1)
    }

    /// Pre-smoothing σ for one patch size.
    pub fn smoothing_sigma(&self, size: usize) -> f64 {
        if self.smoothing_magnif <= 0.0 {
            return 0.0;
        }
        let s = size as f64 / (4.0 * self.smoothing_magnif);
        (s * s - 0.25).max(0.0).sqrt()
    }
}

/// Regular grid of patches at every scale that fits inside the image.
pub fn dense_grid(width: usize, height: usize, scales: &[usize], stride: usize) -> Result<Vec<Patch>> {
    if stride == 0 {
        return Err(Error::invalid("stride must be >= 1"));
    }
    if scales.is_empty() {
        return Err(Error::invalid("scales must be non-empty"));
    }
    let mut out = Vec::new();
    for &size in scales {
        if size == 0 || size > width || size > height {
            continue;
        }
        for top in (0..=height - size).step_by(stride) {
            for left in (0..=width - size).step_by(stride) {
                out.push(Patch { left, top, size });
            }
        }
    }
    Ok(out)
}

/// Per-pixel gradient magnitude and orientation by central differences,
/// clamped at the image border. Orientation is stored pre-split into the
/// lower of the two adjacent 8-bin orientation slots and the fraction that
/// goes to the upper one.
pub struct GradientField {
    width: usize,
    height: usize,
    mag: Vec<f32>,
    bin: Vec<u8>,
    frac: Vec<f32>,
    /// Summed-area table of `mag`, `(width+1)·(height+1)`.
    integral: Vec<f64>,
}

impl GradientField {
    pub fn new(img: &GrayImage) -> Self {
        let (w, h) = (img.width(), img.height());
        let mut mag = vec![0.0f32; w * h];
        let mut bin = vec![0u8; w * h];
        let mut frac = vec![0.0f32; w * h];
        for y in 0..h {
            let ym = y.saturating_sub(1);
            let yp = (y + 1).min(h - 1);
            for x in 0..w {
                let xm = x.saturating_sub(1);
                let xp = (x + 1).min(w - 1);
                let gx = 0.5 * (img.get(xp, y) as f64 - img.get(xm, y) as f64);
                let gy = 0.5 * (img.get(x, yp) as f64 - img.get(x, ym) as f64);
                let m = (gx * gx + gy * gy).sqrt();
                let i = y * w + x;
                mag[i] = m as f32;
                if m > 0.0 {
                    let (b, f) = orientation_bins(gy.atan2(gx));
                    bin[i] = b as u8;
                    frac[i] = f as f32;
                }
            }
        }
        let mut integral = vec![0.0f64; (w + 1) * (h + 1)];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += mag[y * w + x] as f64;
                integral[(y + 1) * (w + 1) + x + 1] = integral[y * (w + 1) + x + 1] + row;
            }
        }
        GradientField {
            width: w,
            height: h,
            mag,
            bin,
            frac,
            integral,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    fn magnitude_sum(&self, p: &Patch) -> f64 {
        let w1 = self.width + 1;
        let (x0, y0, x1, y1) = (p.left, p.top, p.left + p.size, p.top + p.size);
        self.integral[y1 * w1 + x1] - self.integral[y0 * w1 + x1] - self.integral[y1 * w1 + x0]
            + self.integral[y0 * w1 + x0]
    }
}

/// Angle in radians to (lower bin, fraction toward the next bin) over 8 bins.
fn orientation_bins(theta: f64) -> (usize, f64) {
    let t = if theta < 0.0 { theta + 2.0 * PI } else { theta };
    let o = t / (2.0 * PI) * 8.0;
    let lo = o.floor();
    ((lo as usize) % 8, o - lo)
}

/// Spatial weights for one patch size: per pixel offset, the Gaussian weight
/// and the two cell indices (with fractions) along one axis.
struct SizeTables {
    size: usize,
    gauss: Vec<f64>,
    /// Per axis coordinate: (lower cell or -1, weight lower, upper cell or 4, weight upper)
    cells: Vec<(i32, f64, i32, f64)>,
}

impl SizeTables {
    fn new(size: usize) -> Self {
        let s = size as f64;
        let sigma = s / 2.0;
        let half = s / 2.0;
        let mut gauss = Vec::with_capacity(size * size);
        for v in 0..size {
            for u in 0..size {
                let dx = u as f64 + 0.5 - half;
                let dy = v as f64 + 0.5 - half;
                gauss.push((-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp());
            }
        }
        let cell = s / 4.0;
        let cells = (0..size)
            .map(|u| {
                let c = (u as f64 + 0.5) / cell - 0.5;
                let lo = c.floor();
                let f = c - lo;
                (lo as i32, 1.0 - f, lo as i32 + 1, f)
            })
            .collect();
        SizeTables { size, gauss, cells }
    }
}

/// Caches spatial weight tables per patch size.
pub struct SiftExtractor {
    tables: Vec<SizeTables>,
}

impl SiftExtractor {
    pub fn new(scales: &[usize]) -> Self {
        SiftExtractor {
            tables: scales.iter().map(|&s| SizeTables::new(s)).collect(),
        }
    }

    fn table(&self, size: usize) -> Option<&SizeTables> {
        self.tables.iter().find(|t| t.size == size)
    }

    /// 128-dim descriptor and the L2 energy of its raw histogram.
    pub fn describe(&self, field: &GradientField, patch: &Patch) -> Result<(Vec<f64>, f64)> {
        if patch.size == 0
            || patch.left + patch.size > field.width
            || patch.top + patch.size > field.height
        {
            return Err(Error::invalid(format!("patch {patch:?} outside image")));
        }
        let owned;
        let t = match self.table(patch.size) {
            Some(t) => t,
            None => {
                owned = SizeTables::new(patch.size);
                &owned
            }
        };
        let mut hist = [0.0f64; SIFT_DIM];
        if field.magnitude_sum(patch) <= 0.0 {
            return Ok((hist.to_vec(), 0.0));
        }
        let s = patch.size;
        for v in 0..s {
            let row = (patch.top + v) * field.width + patch.left;
            let (cy0, wy0, cy1, wy1) = t.cells[v];
            for u in 0..s {
                let i = row + u;
                let m = field.mag[i] as f64;
                if m == 0.0 {
                    continue;
                }
                let g = m * t.gauss[v * s + u];
                let (cx0, wx0, cx1, wx1) = t.cells[u];
                let b0 = field.bin[i] as usize;
                let b1 = (b0 + 1) % 8;
                let fo = field.frac[i] as f64;
                for (cy, wy) in [(cy0, wy0), (cy1, wy1)] {
                    if !(0..4).contains(&cy) || wy == 0.0 {
                        continue;
                    }
                    for (cx, wx) in [(cx0, wx0), (cx1, wx1)] {
                        if !(0..4).contains(&cx) || wx == 0.0 {
                            continue;
                        }
                        let base = ((cy * 4 + cx) * 8) as usize;
                        let w = g * wy * wx;
                        hist[base + b0] += w * (1.0 - fo);
                        hist[base + b1] += w * fo;
                    }
                }
            }
        }
        let energy = linalg::l2_norm(&hist);
        Ok((finalize_sift(hist.to_vec(), energy), energy))
    }
}

/// Normalize, clamp at 0.2, renormalize. Zero energy gives the zero vector.
fn finalize_sift(mut h: Vec<f64>, energy: f64) -> Vec<f64> {
    if energy <= 0.0 {
        return vec![0.0; h.len()];
    }
    h.iter_mut().for_each(|v| *v = (*v / energy).min(0.2));
    linalg::l2_normalize_in_place(&mut h);
    h
}

/// SIFT descriptor of one patch of `gray`.
pub fn sift128(gray: &GrayImage, patch: &Patch) -> Result<Vec<f64>> {
    let field = GradientField::new(gray);
    Ok(SiftExtractor::new(&[patch.size]).describe(&field, patch)?.0)
}

/// All retained patches of an image with their SIFT descriptors.
pub fn dense_sift(gray: &GrayImage, config: &DenseConfig) -> Result<Vec<(Patch, Vec<f64>)>> {
    config.validate()?;
    let ex = SiftExtractor::new(&config.scales);
    let mut out = Vec::new();
    for &size in &config.scales {
        let field = GradientField::new(&imaging::gaussian_blur(gray, config.smoothing_sigma(size)));
        for p in dense_grid(gray.width(), gray.height(), &[size], config.stride)? {
            let (d, energy) = ex.describe(&field, &p)?;
            if energy >= config.min_energy && energy >= config.min_contrast * size as f64 {
                out.push((p, d));
            }
        }
    }
    Ok(out)
}

/// PCA over a sample of SIFT descriptors; all-zero rows are excluded first.
pub fn fit_descriptor_pca(sample: &Matrix, out_dim: usize) -> Result<PcaModel> {
    if sample.cols() != SIFT_DIM {
        return Err(Error::DimensionMismatch {
            expected: SIFT_DIM,
            found: sample.cols(),
        });
    }
    let keep: Vec<usize> = (0..sample.rows())
        .filter(|&i| sample.row(i).iter().any(|&v| v != 0.0))
        .collect();
    if keep.len() <= out_dim {
        return Err(Error::RankDeficient {
            requested: out_dim,
            achievable: keep.len().saturating_sub(1),
        });
    }
    linalg::fit_pca(&sample.select_rows(&keep), out_dim)
}

/// A projected local feature with its geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalDescriptor {
    /// PCA projection followed by `(norm_x, norm_y, norm_s)`.
    pub values: Vec<f64>,
    pub norm_x: f64,
    pub norm_y: f64,
    pub norm_s: f64,
}

/// Projects a SIFT descriptor and appends the normalized patch center and
/// log-scale position within `[min_scale, max_scale]`.
pub fn project_augment(
    desc: &[f64],
    patch: &Patch,
    width: usize,
    height: usize,
    scale_range: (usize, usize),
    pca: &PcaModel,
) -> Result<LocalDescriptor> {
    let mut values = pca.project(desc)?;
    let norm_x = patch.center_x() / width as f64;
    let norm_y = patch.center_y() / height as f64;
    let (lo, hi) = scale_range;
    let norm_s = if hi > lo {
        (patch.size as f64 / lo as f64).log2() / (hi as f64 / lo as f64).log2()
    } else {
        0.0
    };
    values.extend_from_slice(&[norm_x, norm_y, norm_s]);
    Ok(LocalDescriptor {
        values,
        norm_x,
        norm_y,
        norm_s,
    })
}

/// Dense SIFT, projection and augmentation for one (already rescaled) page.
pub fn local_descriptors(gray: &GrayImage, config: &DenseConfig, pca: &PcaModel) -> Result<Vec<LocalDescriptor>> {
    let range = (config.min_scale(), config.max_scale());
    dense_sift(gray, config)?
        .into_iter()
        .map(|(p, d)| project_augment(&d, &p, gray.width(), gray.height(), range, pca))
        .collect()
}
