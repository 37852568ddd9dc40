//! Synthetic template corpora: every class is a random page layout and every
//! instance a perturbed rendering of it.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::manifest::{save_manifest, Manifest, ManifestRecord, SplitTag};
use crate::imaging::{save_binary_png, BinaryImage};
use crate::{Error, Result};

pub const PAGE_WIDTH: usize = 500;
pub const PAGE_HEIGHT: usize = 650;
pub const MANIFEST_NAME: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Per-pixel flip probability, at most 0.02.
    pub salt_pepper: f64,
    /// Largest whole-page translation as a fraction of the page side, at most 0.03.
    pub max_shift: f64,
    /// Line and border thickness varies by up to this many pixels.
    pub thickness_jitter: usize,
    /// Random elements added to each instance on top of its template.
    pub distractors: usize,
    /// Independent displacement of every template element, as a fraction of
    /// the page side.
    pub element_jitter: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            salt_pepper: 0.01,
            max_shift: 0.03,
            thickness_jitter: 1,
            distractors: 0,
            element_jitter: 0.0,
        }
    }
}

impl NoiseConfig {
    pub fn off() -> Self {
        NoiseConfig {
            salt_pepper: 0.0,
            max_shift: 0.0,
            thickness_jitter: 0,
            distractors: 0,
            element_jitter: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.02).contains(&self.salt_pepper) {
            return Err(Error::invalid("salt-and-pepper probability must lie in [0, 0.02]"));
        }
        if !(0.0..=0.03).contains(&self.max_shift) {
            return Err(Error::invalid("page shift must lie in [0, 0.03]"));
        }
        if !(0.0..=0.5).contains(&self.element_jitter) {
            return Err(Error::invalid("element jitter must lie in [0, 0.5]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    pub per_class: usize,
    pub noise: NoiseConfig,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 5,
            per_class: 40,
            noise: NoiseConfig::default(),
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Element {
    Block { x: i64, y: i64, w: i64, h: i64 },
    Frame { x: i64, y: i64, w: i64, h: i64, border: i64 },
    Rule { x: i64, y: i64, w: i64, thickness: i64 },
    Text { x: i64, y: i64, w: i64, lines: i64, line_h: i64, pitch: i64 },
}

impl Element {
    fn moved(self, dx: i64, dy: i64) -> Element {
        match self {
            Element::Block { x, y, w, h } => Element::Block { x: x + dx, y: y + dy, w, h },
            Element::Frame { x, y, w, h, border } => Element::Frame { x: x + dx, y: y + dy, w, h, border },
            Element::Rule { x, y, w, thickness } => Element::Rule { x: x + dx, y: y + dy, w, thickness },
            Element::Text { x, y, w, lines, line_h, pitch } => Element::Text { x: x + dx, y: y + dy, w, lines, line_h, pitch },
        }
    }
}

fn random_element(kind: usize, rng: &mut impl Rng) -> Element {
    let (pw, ph) = (PAGE_WIDTH as i64, PAGE_HEIGHT as i64);
    match kind {
        0 => {
            let (w, h) = (rng.gen_range(30..150), rng.gen_range(15..80));
            Element::Block { x: rng.gen_range(20..pw - w - 20), y: rng.gen_range(20..ph - h - 20), w, h }
        }
        1 => {
            let (w, h) = (rng.gen_range(80..300), rng.gen_range(40..200));
            Element::Frame { x: rng.gen_range(20..pw - w - 20), y: rng.gen_range(20..ph - h - 20), w, h, border: rng.gen_range(1..4) }
        }
        2 => {
            let w = rng.gen_range(100..440);
            Element::Rule { x: rng.gen_range(20..pw - w - 20), y: rng.gen_range(20..ph - 30), w, thickness: rng.gen_range(1..4) }
        }
        _ => {
            let w = rng.gen_range(100..400);
            let line_h = rng.gen_range(5..10);
            let pitch = line_h + rng.gen_range(line_h / 2 + 2..line_h + 6);
            let lines = rng.gen_range(2..10);
            Element::Text {
                x: rng.gen_range(20..pw - w - 20),
                y: rng.gen_range(20..(ph - lines * pitch - 20).max(21)),
                w,
                lines,
                line_h,
                pitch,
            }
        }
    }
}

/// Class layout: filled blocks, frames, horizontal rules and text blocks.
fn random_template(rng: &mut impl Rng) -> Vec<Element> {
    let mut elements = Vec::new();
    for (kind, lo, hi) in [(0, 1, 4), (1, 0, 3), (2, 2, 6), (3, 2, 6)] {
        for _ in 0..rng.gen_range(lo..hi) {
            elements.push(random_element(kind, rng));
        }
    }
    elements
}

struct Canvas {
    img: BinaryImage,
}

impl Canvas {
    fn new() -> Self {
        Canvas {
            img: BinaryImage::from_fn(PAGE_WIDTH, PAGE_HEIGHT, |_, _| true).expect("page size"),
        }
    }

    fn fill(&mut self, x0: i64, y0: i64, x1: i64, y1: i64) {
        let x0 = x0.clamp(0, PAGE_WIDTH as i64) as usize;
        let x1 = x1.clamp(0, PAGE_WIDTH as i64) as usize;
        let y0 = y0.clamp(0, PAGE_HEIGHT as i64) as usize;
        let y1 = y1.clamp(0, PAGE_HEIGHT as i64) as usize;
        for y in y0..y1 {
            for x in x0..x1 {
                self.img.set(x, y, false);
            }
        }
    }

    fn draw(&mut self, e: Element, jitter: i64, rng: &mut impl Rng) {
        let mut thick = |t: i64| (t + if jitter > 0 { rng.gen_range(-jitter..=jitter) } else { 0 }).max(1);
        match e {
            Element::Block { x, y, w, h } => self.fill(x, y, x + w, y + h),
            Element::Frame { x, y, w, h, border } => {
                let b = thick(border);
                self.fill(x, y, x + w, y + b);
                self.fill(x, y + h - b, x + w, y + h);
                self.fill(x, y, x + b, y + h);
                self.fill(x + w - b, y, x + w, y + h);
            }
            Element::Rule { x, y, w, thickness } => {
                let t = thick(thickness);
                self.fill(x, y, x + w, y + t);
            }
            Element::Text { x, y, w, lines, line_h, pitch } => {
                for l in 0..lines {
                    let top = y + l * pitch;
                    let end = if l + 1 == lines { x + w * rng.gen_range(30..=100) / 100 } else { x + w };
                    let mut cx = x;
                    while cx < end {
                        let word = rng.gen_range(8..50).min(end - cx);
                        self.fill(cx, top, cx + word, top + line_h);
                        cx += word + rng.gen_range(5..12);
                    }
                }
            }
        }
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Renders instance `index` of class `class`. Word layout inside text blocks
/// is redrawn for every instance.
pub fn render_document(class: usize, index: usize, config: &SynthConfig) -> Result<BinaryImage> {
    config.noise.validate()?;
    let noise = &config.noise;
    let template = random_template(&mut rng_for(config.seed, class as u64));
    let mut rng = rng_for(config.seed, ((class as u64 + 1) << 32) | index as u64);
    let shift = |rng: &mut ChaCha8Rng, frac: f64, side: usize| {
        let m = (frac * side as f64).round() as i64;
        if m > 0 {
            rng.gen_range(-m..=m)
        } else {
            0
        }
    };
    let dx = shift(&mut rng, noise.max_shift, PAGE_WIDTH);
    let dy = shift(&mut rng, noise.max_shift, PAGE_HEIGHT);
    let jitter = noise.thickness_jitter as i64;
    let mut canvas = Canvas::new();
    for e in template {
        let ex = shift(&mut rng, noise.element_jitter, PAGE_WIDTH);
        let ey = shift(&mut rng, noise.element_jitter, PAGE_HEIGHT);
        canvas.draw(e.moved(dx + ex, dy + ey), jitter, &mut rng);
    }
    for _ in 0..noise.distractors {
        let kind = rng.gen_range(0..4);
        let e = random_element(kind, &mut rng);
        canvas.draw(e, jitter, &mut rng);
    }
    let mut img = canvas.img;
    if noise.salt_pepper > 0.0 {
        for y in 0..PAGE_HEIGHT {
            for x in 0..PAGE_WIDTH {
                if rng.gen_bool(noise.salt_pepper) {
                    let v = img.is_white(x, y);
                    img.set(x, y, !v);
                }
            }
        }
    }
    Ok(img)
}

pub fn class_label(class: usize) -> String {
    format!("class{class:02}")
}

/// Writes `images/cCC_IIII.png` for every instance plus `manifest.jsonl`
/// under `out_dir`, and returns the manifest.
pub fn synth_docs(out_dir: &Path, config: &SynthConfig) -> Result<Manifest> {
    if config.classes < 2 {
        return Err(Error::invalid("need at least 2 classes"));
    }
    config.noise.validate()?;
    let images = out_dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let jobs: Vec<(usize, usize)> = (0..config.classes)
        .flat_map(|c| (0..config.per_class).map(move |i| (c, i)))
        .collect();
    let records = jobs
        .par_iter()
        .map(|&(c, i)| {
            let name = format!("c{c:02}_{i:04}.png");
            let img = render_document(c, i, config)?;
            save_binary_png(&images.join(&name), &img)?;
            Ok(ManifestRecord {
                id: format!("c{c:02}_{i:04}"),
                path: PathBuf::from("images").join(name),
                label: class_label(c),
                split: SplitTag::Unassigned,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest::new(records, out_dir.to_path_buf())?;
    save_manifest(&out_dir.join(MANIFEST_NAME), &manifest)?;
    Ok(manifest)
}
