//! Parametric face-like images with known labels.
//!
//! Each face is a bright ellipse on a noisy background with dark eyes, a
//! nose and a mouth. Attributes toggle visible features, so every label is
//! recoverable from pixels:
//!
//! | index | name       | rendering                          |
//! |-------|------------|------------------------------------|
//! | 0     | pale       | brighter skin                      |
//! | 1     | eyeglasses | dark rings around both eyes        |
//! | 2     | smiling    | mouth corners raised               |
//! | 3     | bangs      | dark band across the forehead      |
//! | 4     | beard      | dark lower face                    |
//! | 5     | hat        | dark block over the top of the head|
//! | 6     | mouth_open | dark filled mouth                  |
//! | 7     | big_nose   | larger nose                        |
//!
//! Landmarks are the two eye centers, the nose tip and the two mouth
//! corners, in that order.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::{
    generate_nonface_crops, sample_from_image, BoundingBox, DataError, ManifestRecord, Sample, SampleKind,
};

pub const ATTRIBUTE_NAMES: [&str; 8] = [
    "pale",
    "eyeglasses",
    "smiling",
    "bangs",
    "beard",
    "hat",
    "mouth_open",
    "big_nose",
];
pub const NUM_LANDMARKS: usize = 5;
pub const MANIFEST_NAME: &str = "manifest.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthOptions {
    /// Side of the written images in pixels.
    pub source_side: u32,
    /// How many of [`ATTRIBUTE_NAMES`] vary and are labeled.
    pub num_attributes: usize,
    /// Relative frequency of non-face, face, landmark and attribute records.
    pub mixture: [f64; 4],
    /// Attribute records also carry landmarks.
    pub attribute_landmarks: bool,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            source_side: 64,
            num_attributes: 4,
            mixture: [0.15, 0.1, 0.1, 0.65],
            attribute_landmarks: true,
        }
    }
}

impl SynthOptions {
    /// Attribute records only, each with landmarks.
    pub fn attributes_only(num_attributes: usize) -> Self {
        SynthOptions {
            num_attributes,
            mixture: [0.0, 0.0, 0.0, 1.0],
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<(), DataError> {
        if self.num_attributes == 0 || self.num_attributes > ATTRIBUTE_NAMES.len() {
            return Err(DataError::Invalid(format!(
                "synthetic data supports 1..={} attributes, got {}",
                ATTRIBUTE_NAMES.len(),
                self.num_attributes
            )));
        }
        if self.source_side < 16 {
            return Err(DataError::Invalid(format!(
                "source side {} is below 16",
                self.source_side
            )));
        }
        if self.mixture.iter().any(|w| !w.is_finite() || *w < 0.0) || self.mixture.iter().sum::<f64>() <= 0.0 {
            return Err(DataError::Invalid(format!("bad mixture {:?}", self.mixture)));
        }
        Ok(())
    }
}

/// One generated image with its annotations in source pixels. The record's
/// image path is the bare file name.
#[derive(Debug, Clone)]
pub struct SynthItem {
    pub image: DynamicImage,
    pub record: ManifestRecord,
}

#[derive(Debug, Clone, Copy)]
struct Face {
    left: f64,
    top: f64,
    size: f64,
}

impl Face {
    fn cx(&self) -> f64 {
        self.left + self.size / 2.0
    }

    fn at(&self, fx: f64, fy: f64) -> (f64, f64) {
        (self.left + fx * self.size, self.top + fy * self.size)
    }

    fn landmarks(&self, smiling: bool) -> Vec<f64> {
        let mouth_y = if smiling { 0.71 } else { 0.75 };
        [(0.3, 0.45), (0.7, 0.45), (0.5, 0.6), (0.35, mouth_y), (0.65, mouth_y)]
            .iter()
            .flat_map(|&(fx, fy)| {
                let (x, y) = self.at(fx, fy);
                [x, y]
            })
            .collect()
    }

    fn bbox(&self) -> BoundingBox {
        BoundingBox::new(self.left, self.top, self.size, self.size)
    }
}

struct Canvas {
    w: usize,
    h: usize,
    px: Vec<f64>,
}

impl Canvas {
    fn new(w: usize, h: usize, rng: &mut ChaCha8Rng) -> Self {
        let base = rng.random_range(0.15..0.45);
        let (gx, gy) = (rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15));
        let mut px = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                px[y * w + x] = base + gx * x as f64 / w as f64 + gy * y as f64 / h as f64;
            }
        }
        Canvas { w, h, px }
    }

    /// Sets every pixel whose center satisfies `inside`.
    fn fill(&mut self, value: f64, inside: impl Fn(f64, f64) -> bool) {
        for y in 0..self.h {
            for x in 0..self.w {
                if inside(x as f64 + 0.5, y as f64 + 0.5) {
                    self.px[y * self.w + x] = value;
                }
            }
        }
    }

    fn ellipse(&mut self, value: f64, (cx, cy): (f64, f64), rx: f64, ry: f64) {
        self.fill(value, |x, y| ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2) <= 1.0);
    }

    fn ring(&mut self, value: f64, (cx, cy): (f64, f64), r: f64, width: f64) {
        self.fill(value, |x, y| ((x - cx).hypot(y - cy) - r).abs() <= width / 2.0);
    }

    fn finish(mut self, rng: &mut ChaCha8Rng) -> DynamicImage {
        let noise = Normal::new(0.0, 0.02).expect("finite std");
        for p in &mut self.px {
            *p = (*p + noise.sample(rng)).clamp(0.0, 1.0);
        }
        let img = GrayImage::from_fn(self.w as u32, self.h as u32, |x, y| {
            Luma([(self.px[y as usize * self.w + x as usize] * 255.0).round() as u8])
        });
        DynamicImage::ImageLuma8(img)
    }
}

fn draw_face(c: &mut Canvas, f: Face, attrs: &[bool; 8], rng: &mut ChaCha8Rng) {
    let s = f.size;
    let skin = if attrs[0] { 0.92 } else { 0.62 } + rng.random_range(-0.04..0.04);
    let centre = (f.cx(), f.top + s / 2.0);
    c.ellipse(skin, centre, 0.42 * s, 0.5 * s);
    let inside_face =
        move |x: f64, y: f64| ((x - centre.0) / (0.42 * s)).powi(2) + ((y - centre.1) / (0.5 * s)).powi(2) <= 1.0;
    if attrs[4] {
        let chin = f.top + 0.8 * s;
        c.fill(0.2, |x, y| y >= chin && inside_face(x, y));
    }
    if attrs[3] {
        let (y0, y1) = (f.top + 0.25 * s, f.top + 0.36 * s);
        c.fill(0.25, |x, y| y >= y0 && y <= y1 && inside_face(x, y));
    }
    if attrs[5] {
        let (x0, x1, y1) = (f.left, f.left + s, f.top + 0.22 * s);
        c.fill(0.05, |x, y| x >= x0 && x <= x1 && y <= y1 && y >= f.top - 0.1 * s);
    }
    let lm = f.landmarks(attrs[2]);
    for e in 0..2 {
        c.ellipse(0.08, (lm[2 * e], lm[2 * e + 1]), 0.05 * s, 0.05 * s);
        if attrs[1] {
            c.ring(0.0, (lm[2 * e], lm[2 * e + 1]), 0.11 * s, 0.035 * s);
        }
    }
    if attrs[1] {
        let y = lm[1];
        let (x0, x1) = (lm[0] + 0.11 * s, lm[2] - 0.11 * s);
        c.fill(0.0, |px, py| px >= x0 && px <= x1 && (py - y).abs() <= 0.02 * s);
    }
    let nose_r = if attrs[7] { 0.09 } else { 0.04 } * s;
    c.ellipse(skin - 0.3, (lm[4], lm[5]), nose_r, nose_r * 1.2);
    let (mx, my) = (f.cx(), f.top + 0.75 * s);
    if attrs[6] {
        c.ellipse(0.05, (mx, my + 0.01 * s), 0.12 * s, 0.06 * s);
    }
    let half = 0.15 * s;
    let lift = if attrs[2] { 0.04 * s } else { 0.0 };
    let thick = 0.025 * s;
    c.fill(0.1, |x, y| {
        let u = (x - mx) / half;
        u.abs() <= 1.0 && (y - (my - lift * u * u)).abs() <= thick
    });
}

/// Allocates `n` records to kinds in proportion to `mixture`, using
/// largest remainders so small datasets still hit every nonzero kind.
fn allocate(n: usize, mixture: [f64; 4]) -> [usize; 4] {
    let total: f64 = mixture.iter().sum();
    let exact: Vec<f64> = mixture.iter().map(|w| w / total * n as f64).collect();
    let mut counts = [0usize; 4];
    for (c, e) in counts.iter_mut().zip(&exact) {
        *c = e.floor() as usize;
    }
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| {
        (exact[b] - exact[b].floor())
            .total_cmp(&(exact[a] - exact[a].floor()))
            .then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for i in order {
        if left == 0 {
            break;
        }
        if mixture[i] > 0.0 {
            counts[i] += 1;
            left -= 1;
        }
    }
    counts
}

const KINDS: [SampleKind; 4] = [
    SampleKind::NonFace,
    SampleKind::Face,
    SampleKind::Landmark,
    SampleKind::Attribute,
];

/// Generates `n` labeled images deterministically from `seed`.
pub fn generate(n: usize, seed: u64, opts: &SynthOptions) -> Result<Vec<SynthItem>, DataError> {
    opts.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let counts = allocate(n, opts.mixture);
    let mut kinds: Vec<SampleKind> = KINDS
        .iter()
        .zip(counts)
        .flat_map(|(&k, c)| std::iter::repeat_n(k, c))
        .collect();
    rand::seq::SliceRandom::shuffle(kinds.as_mut_slice(), &mut master);
    kinds
        .into_iter()
        .enumerate()
        .map(|(i, kind)| {
            let mut rng = ChaCha8Rng::seed_from_u64(master.random());
            let name = format!("{i:05}.png");
            match kind {
                SampleKind::NonFace => nonface(&name, opts, &mut rng),
                _ => Ok(face(&name, kind, opts, &mut rng)),
            }
        })
        .collect()
}

fn face(name: &str, kind: SampleKind, opts: &SynthOptions, rng: &mut ChaCha8Rng) -> SynthItem {
    let w = opts.source_side as f64;
    let size = (rng.random_range(0.6..0.78) * w).round();
    let f = Face {
        left: rng.random_range(0.0..=(w - size)).round(),
        top: rng.random_range(0.0..=(w - size)).round(),
        size,
    };
    let mut attrs = [false; 8];
    for a in attrs.iter_mut().take(opts.num_attributes) {
        *a = rng.random_bool(0.5);
    }
    let mut canvas = Canvas::new(opts.source_side as usize, opts.source_side as usize, rng);
    draw_face(&mut canvas, f, &attrs, rng);
    let landmarks = f.landmarks(attrs[2]);
    let with_landmarks = kind == SampleKind::Landmark || (kind == SampleKind::Attribute && opts.attribute_landmarks);
    SynthItem {
        image: canvas.finish(rng),
        record: ManifestRecord {
            image: PathBuf::from(name),
            kind,
            bbox: Some(f.bbox()),
            landmarks: with_landmarks.then_some(landmarks),
            attributes: (kind == SampleKind::Attribute).then(|| attrs[..opts.num_attributes].to_vec()),
            line: 0,
        },
    }
}

/// Draws a face into one corner of a double-size scene with clutter
/// elsewhere, then cuts a crop that avoids the face.
fn nonface(name: &str, opts: &SynthOptions, rng: &mut ChaCha8Rng) -> Result<SynthItem, DataError> {
    let side = 2 * opts.source_side as usize;
    let mut canvas = Canvas::new(side, side, rng);
    for _ in 0..6 {
        let v = rng.random_range(0.0..1.0);
        let centre = (rng.random_range(0.0..side as f64), rng.random_range(0.0..side as f64));
        let (rx, ry) = (
            rng.random_range(3.0..side as f64 / 5.0),
            rng.random_range(3.0..side as f64 / 5.0),
        );
        canvas.ellipse(v, centre, rx, ry);
    }
    let size = (0.35 * side as f64).round();
    let f = Face {
        left: if rng.random_bool(0.5) { 0.0 } else { side as f64 - size },
        top: if rng.random_bool(0.5) { 0.0 } else { side as f64 - size },
        size,
    };
    let mut attrs = [false; 8];
    for a in attrs.iter_mut().take(opts.num_attributes) {
        *a = rng.random_bool(0.5);
    }
    draw_face(&mut canvas, f, &attrs, rng);
    let scene = canvas.finish(rng);
    let cfg = ModelConfig {
        channels: 1,
        ..ModelConfig::default().with_side(opts.source_side as usize)
    };
    let crop = generate_nonface_crops(&scene, &f.bbox(), 1, rng.random(), &cfg)?.remove(0);
    let r = crop.region;
    let patch = scene
        .crop_imm(r.left as u32, r.top as u32, r.width as u32, r.height as u32)
        .resize_exact(
            opts.source_side,
            opts.source_side,
            image::imageops::FilterType::Triangle,
        );
    Ok(SynthItem {
        image: patch,
        record: ManifestRecord {
            image: PathBuf::from(name),
            kind: SampleKind::NonFace,
            bbox: None,
            landmarks: None,
            attributes: None,
            line: 0,
        },
    })
}

/// Converts generated items straight to samples, without touching disk.
pub fn to_samples(items: &[SynthItem], config: &ModelConfig) -> Vec<Sample> {
    items
        .iter()
        .map(|it| {
            let r = &it.record;
            sample_from_image(
                &it.image,
                r.kind,
                r.bbox,
                r.landmarks.as_deref(),
                r.attributes.clone(),
                config,
            )
        })
        .collect()
}

/// Writes one PNG per item plus a manifest into `dir`; returns the
/// manifest path.
pub fn write(items: &[SynthItem], dir: &Path, opts: &SynthOptions) -> Result<PathBuf, DataError> {
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| DataError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut text = format!(
        "# synthetic faces: {} records, attributes: {}\n# <image> <kind> [left top height width] [labels] [landmarks]\n",
        items.len(),
        ATTRIBUTE_NAMES[..opts.num_attributes].join(" ")
    );
    for it in items {
        let path = dir.join(&it.record.image);
        it.image.save(&path).map_err(|source| DataError::Image {
            path: path.display().to_string(),
            source,
        })?;
        text.push_str(&it.record.to_line(&it.record.image.display().to_string()));
        text.push('\n');
    }
    let manifest = dir.join(MANIFEST_NAME);
    fs::write(&manifest, text).map_err(io(&manifest))?;
    Ok(manifest)
}
