//! Page loading, luminance conversion, downscaling and global thresholding.

use std::path::Path;

use crate::{Error, Result};

/// Default pixel budget pages are downscaled to before description.
pub const DEFAULT_MAX_PIXELS: usize = 250_000;

/// Default binarization threshold on intensities in `[0, 1]`.
pub const DEFAULT_THRESHOLD: f32 = 0.5;

/// Row-major grayscale raster with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("image must be at least 1x1"));
        }
        if data.len() != width * height {
            return Err(Error::DimensionMismatch {
                expected: width * height,
                found: data.len(),
            });
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("intensity {v} outside [0, 1]")));
        }
        Ok(GrayImage {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    /// Builds an image from a closure over `(x, y)`; values are clamped to `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y).clamp(0.0, 1.0));
            }
        }
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }
}

/// Row-major three-channel image with channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<[f32; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<[f32; 3]>) -> Result<Self> {
        if width == 0 || height == 0 || data.is_empty() {
            return Err(Error::invalid("empty image"));
        }
        if data.len() != width * height {
            return Err(Error::DimensionMismatch {
                expected: width * height,
                found: data.len(),
            });
        }
        Ok(RgbImage {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }
}

/// Two-valued page raster. `true` is white (background), `false` black (ink).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryImage {
    width: usize,
    height: usize,
    white: Vec<bool>,
}

impl BinaryImage {
    pub fn new(width: usize, height: usize, white: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("image must be at least 1x1"));
        }
        if white.len() != width * height {
            return Err(Error::DimensionMismatch {
                expected: width * height,
                found: white.len(),
            });
        }
        Ok(BinaryImage {
            width,
            height,
            white,
        })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let mut white = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                white.push(f(x, y));
            }
        }
        Self::new(width, height, white)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn is_white(&self, x: usize, y: usize) -> bool {
        self.white[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, white: bool) {
        self.white[y * self.width + x] = white;
    }

    pub fn pixels(&self) -> &[bool] {
        &self.white
    }

    /// Swaps black and white.
    pub fn inverted(&self) -> BinaryImage {
        BinaryImage {
            width: self.width,
            height: self.height,
            white: self.white.iter().map(|w| !w).collect(),
        }
    }

    /// Reinterprets the image as gray values in `{0, 1}`.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.white.iter().map(|&w| if w { 1.0 } else { 0.0 }).collect(),
        }
    }
}

/// ITU-R BT.601 luminance, clamped to `[0, 1]`.
pub fn to_grayscale(rgb: &RgbImage) -> Result<GrayImage> {
    let data = rgb
        .data
        .iter()
        .map(|[r, g, b]| (0.299 * r + 0.587 * g + 0.114 * b).clamp(0.0, 1.0))
        .collect();
    GrayImage::new(rgb.width, rgb.height, data)
}

/// Global threshold: intensities `>= threshold` become white.
pub fn binarize(gray: &GrayImage, threshold: f32) -> Result<BinaryImage> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid(format!(
            "threshold {threshold} must lie in (0, 1)"
        )));
    }
    BinaryImage::new(
        gray.width,
        gray.height,
        gray.data.iter().map(|&v| v >= threshold).collect(),
    )
}

/// Output size for a downscale to at most `max_pixels`, or `None` when the
/// image already fits. Dimensions are floored with a minimum of 1.
pub fn downscaled_dims(width: usize, height: usize, max_pixels: usize) -> Option<(usize, usize)> {
    let area = width * height;
    if area <= max_pixels {
        return None;
    }
    let f = (max_pixels as f64 / area as f64).sqrt();
    let mut w = ((width as f64 * f).floor() as usize).max(1);
    let mut h = ((height as f64 * f).floor() as usize).max(1);
    // Floating point can land a hair above the exact product; shave until it fits.
    while w * h > max_pixels {
        if w >= h && w > 1 {
            w -= 1;
        } else if h > 1 {
            h -= 1;
        } else {
            break;
        }
    }
    Some((w, h))
}

/// Shrinks the page to at most `max_pixels` keeping the aspect ratio; never upscales.
pub fn downscale_to_max_pixels(img: &GrayImage, max_pixels: usize) -> Result<GrayImage> {
    if max_pixels == 0 {
        return Err(Error::invalid("max_pixels must be at least 1"));
    }
    match downscaled_dims(img.width, img.height, max_pixels) {
        None => Ok(img.clone()),
        Some((w, h)) => Ok(resize_bilinear(img, w, h)),
    }
}

/// Separable Gaussian blur with edge clamping; `sigma <= 0` copies the image.
pub fn gaussian_blur(img: &GrayImage, sigma: f64) -> GrayImage {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (w, h) = (img.width as isize, img.height as isize);
    let pass = |src: &[f32], horizontal: bool| -> Vec<f32> {
        let mut out = vec![0.0f32; src.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let o = k as isize - radius;
                    let (sx, sy) = if horizontal {
                        ((x + o).clamp(0, w - 1), y)
                    } else {
                        (x, (y + o).clamp(0, h - 1))
                    };
                    acc += kv * src[(sy * w + sx) as usize] as f64;
                }
                out[(y * w + x) as usize] = acc as f32;
            }
        }
        out
    };
    let tmp = pass(&img.data, true);
    GrayImage {
        width: img.width,
        height: img.height,
        data: pass(&tmp, false),
    }
}

/// Bilinear resampling with pixel-center alignment and edge clamping.
pub fn resize_bilinear(img: &GrayImage, out_w: usize, out_h: usize) -> GrayImage {
    let sx = img.width as f64 / out_w as f64;
    let sy = img.height as f64 / out_h as f64;
    let max_x = (img.width - 1) as f64;
    let max_y = (img.height - 1) as f64;

    let taps = |o: usize, scale: f64, max: f64| {
        let c = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
        let i0 = c.floor();
        let t = c - i0;
        let i0 = i0 as usize;
        let i1 = (i0 + 1).min(max as usize);
        (i0, i1, t)
    };
    let xs: Vec<_> = (0..out_w).map(|x| taps(x, sx, max_x)).collect();

    let mut data = Vec::with_capacity(out_w * out_h);
    for y in 0..out_h {
        let (y0, y1, ty) = taps(y, sy, max_y);
        for &(x0, x1, tx) in &xs {
            let top = img.get(x0, y0) as f64 * (1.0 - tx) + img.get(x1, y0) as f64 * tx;
            let bot = img.get(x0, y1) as f64 * (1.0 - tx) + img.get(x1, y1) as f64 * tx;
            data.push(((top * (1.0 - ty) + bot * ty) as f32).clamp(0.0, 1.0));
        }
    }
    GrayImage {
        width: out_w,
        height: out_h,
        data,
    }
}

/// Decodes a PNG/JPEG/TIFF page into normalized luminance.
pub fn load_gray(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if img.color().has_color() {
        let rgb = img.to_rgb32f();
        let (w, h) = rgb.dimensions();
        let data = rgb.pixels().map(|p| p.0).collect();
        to_grayscale(&RgbImage::new(w as usize, h as usize, data)?)
    } else {
        let luma = img.to_luma32f();
        let (w, h) = luma.dimensions();
        let data = luma.pixels().map(|p| p.0[0].clamp(0.0, 1.0)).collect();
        GrayImage::new(w as usize, h as usize, data)
    }
}

/// Writes a 1-bit page as an 8-bit grayscale PNG (0 or 255).
pub fn save_binary_png(path: &Path, img: &BinaryImage) -> Result<()> {
    let buf: Vec<u8> = img.white.iter().map(|&w| if w { 255 } else { 0 }).collect();
    let out = image::GrayImage::from_raw(img.width as u32, img.height as u32, buf)
        .expect("buffer sized from image dimensions");
    out.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}
