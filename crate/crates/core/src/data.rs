//! Annotation manifests, samples, IoU-gated non-face crops and batching.
//!
//! Manifest lines have the form `<image-path> <kind> <payload...>`:
//!
//! | kind        | payload                                         |
//! |-------------|-------------------------------------------------|
//! | `nonface`   | (empty)                                         |
//! | `face`      | `l t h w`                                       |
//! | `landmark`  | `l t h w x1 y1 ... xk yk`                       |
//! | `attribute` | `l t h w a1 ... ad [x1 y1 ... xk yk]`, `a_i = ±1` |
//!
//! Coordinates are in source-image pixels; `#` starts a comment. Paths are
//! relative to the manifest's directory.

use std::fmt;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::DynamicImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::ModelConfig;
use crate::tensor::Tensor;

pub const NONFACE_MAX_IOU: f64 = 0.001;
/// Non-face crop sides, as fractions of the shorter image side.
pub const NONFACE_CROP_RANGE: (f64, f64) = (0.3, 0.8);
const CROP_ATTEMPTS_PER_CROP: usize = 2000;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("{path}:{line}: record `{record}` has {got} {what}, expected {expected}")]
    Arity {
        path: String,
        line: usize,
        record: String,
        what: &'static str,
        expected: String,
        got: usize,
    },
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode image {path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("no non-face crop with IoU < {NONFACE_MAX_IOU} found after {attempts} attempts ({reason})")]
    CropsExhausted { attempts: usize, reason: String },
    #[error("invalid sample: {0}")]
    Invalid(String),
    #[error("batch size must be at least 1")]
    ZeroBatch,
}

/// Axis-aligned box `(left, top, height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BoundingBox {
    pub left: f64,
    pub top: f64,
    pub height: f64,
    pub width: f64,
}

impl BoundingBox {
    pub fn new(left: f64, top: f64, height: f64, width: f64) -> Self {
        BoundingBox {
            left,
            top,
            height,
            width,
        }
    }

    pub fn area(&self) -> f64 {
        self.height.max(0.0) * self.width.max(0.0)
    }

    pub fn right(&self) -> f64 {
        self.left + self.width
    }

    pub fn bottom(&self) -> f64 {
        self.top + self.height
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.left, self.top, self.height, self.width]
    }

    /// Divides x-coordinates by `sx` and y-coordinates by `sy`.
    pub fn scaled(self, sx: f64, sy: f64) -> Self {
        BoundingBox {
            left: self.left / sx,
            top: self.top / sy,
            height: self.height / sy,
            width: self.width / sx,
        }
    }
}

/// Length of `[s1, s1 + l1] ∩ [s2, s2 + l2]`. A nested interval returns its
/// own length untouched, so identical boxes score exactly 1.
fn overlap(s1: f64, l1: f64, s2: f64, l2: f64) -> f64 {
    let (e1, e2) = (s1 + l1, s2 + l2);
    if s1 >= s2 && e1 <= e2 {
        l1
    } else if s2 >= s1 && e2 <= e1 {
        l2
    } else {
        (e1.min(e2) - s1.max(s2)).max(0.0)
    }
}

/// Intersection over union; 0 for disjoint or degenerate boxes.
pub fn compute_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (area_a, area_b) = (a.area(), b.area());
    if area_a <= 0.0 || area_b <= 0.0 {
        return 0.0;
    }
    let iw = overlap(a.left, a.width, b.left, b.width);
    let ih = overlap(a.top, a.height, b.top, b.height);
    let inter = iw * ih;
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SampleKind {
    NonFace,
    Face,
    Landmark,
    Attribute,
}

impl SampleKind {
    pub fn token(self) -> &'static str {
        match self {
            SampleKind::NonFace => "nonface",
            SampleKind::Face => "face",
            SampleKind::Landmark => "landmark",
            SampleKind::Attribute => "attribute",
        }
    }

    pub fn from_token(s: &str) -> Option<Self> {
        Some(match s {
            "nonface" => SampleKind::NonFace,
            "face" => SampleKind::Face,
            "landmark" => SampleKind::Landmark,
            "attribute" => SampleKind::Attribute,
            _ => return None,
        })
    }
}

impl fmt::Display for SampleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

/// One training or evaluation record. The image is `[C, side, side]` with
/// values in `[0, 1]`; box and landmark coordinates are fractions of the
/// image side.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub kind: SampleKind,
    pub bbox: Option<BoundingBox>,
    /// `x1, y1, ..., xk, yk`
    pub landmarks: Option<Vec<f64>>,
    pub attributes: Option<Vec<bool>>,
}

impl Sample {
    pub fn nonface(image: Tensor) -> Self {
        Sample {
            image,
            kind: SampleKind::NonFace,
            bbox: None,
            landmarks: None,
            attributes: None,
        }
    }

    pub fn is_face(&self) -> bool {
        self.kind != SampleKind::NonFace
    }

    /// Checks the kind's field invariants for `d` attributes and `k`
    /// landmarks, and that pixel values lie in `[0, 1]`.
    pub fn validate(&self, d: usize, k: usize) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Invalid(m));
        if self.image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return bad("image values outside [0, 1]".into());
        }
        if let Some(l) = &self.landmarks {
            if l.len() != 2 * k {
                return bad(format!("{} landmark coordinates, expected {}", l.len(), 2 * k));
            }
        }
        if let Some(a) = &self.attributes {
            if a.len() != d {
                return bad(format!("{} attributes, expected {d}", a.len()));
            }
        }
        match self.kind {
            SampleKind::NonFace if self.bbox.is_some() || self.landmarks.is_some() || self.attributes.is_some() => {
                bad("non-face sample carries face annotations".into())
            }
            SampleKind::Face | SampleKind::Landmark | SampleKind::Attribute if self.bbox.is_none() => {
                bad(format!("{} sample without a box", self.kind))
            }
            SampleKind::Landmark if self.landmarks.is_none() => bad("landmark sample without landmarks".into()),
            SampleKind::Attribute if self.attributes.is_none() => bad("attribute sample without attributes".into()),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

/// One parsed manifest line, coordinates still in source pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub image: PathBuf,
    pub kind: SampleKind,
    pub bbox: Option<BoundingBox>,
    pub landmarks: Option<Vec<f64>>,
    pub attributes: Option<Vec<bool>>,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    pub split: Split,
}

/// Expected label counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Arity {
    pub attributes: usize,
    pub landmarks: usize,
}

impl From<&ModelConfig> for Arity {
    fn from(c: &ModelConfig) -> Self {
        Arity {
            attributes: c.num_attributes,
            landmarks: c.num_landmarks,
        }
    }
}

pub fn load_manifest(path: &Path, arity: Arity) -> Result<DatasetManifest, DataError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_manifest(&text, base, &path.display().to_string(), arity)
}

/// Parses manifest text; `source` names it in error messages.
pub fn parse_manifest(text: &str, base: &Path, source: &str, arity: Arity) -> Result<DatasetManifest, DataError> {
    let mut records = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or_default().trim();
        if content.is_empty() {
            continue;
        }
        records.push(parse_record(content, line, base, source, arity)?);
    }
    Ok(DatasetManifest {
        records,
        split: Split::Train,
    })
}

fn parse_record(
    content: &str,
    line: usize,
    base: &Path,
    source: &str,
    arity: Arity,
) -> Result<ManifestRecord, DataError> {
    let parse_err = |msg: String| DataError::Parse {
        path: source.to_string(),
        line,
        msg,
    };
    let mut tokens = content.split_whitespace();
    let image = tokens.next().ok_or_else(|| parse_err("missing image path".into()))?;
    let kind_token = tokens.next().ok_or_else(|| parse_err("missing record kind".into()))?;
    let kind =
        SampleKind::from_token(kind_token).ok_or_else(|| parse_err(format!("unknown record kind `{kind_token}`")))?;
    let payload: Vec<f64> = tokens
        .map(|t| t.parse::<f64>().map_err(|_| parse_err(format!("not a number: `{t}`"))))
        .collect::<Result<_, _>>()?;
    if payload.iter().any(|v| !v.is_finite()) {
        return Err(parse_err("non-finite payload value".into()));
    }
    let arity_err = |what: &'static str, expected: String| DataError::Arity {
        path: source.to_string(),
        line,
        record: image.to_string(),
        what,
        expected,
        got: payload.len(),
    };
    let (d, k2) = (arity.attributes, 2 * arity.landmarks);
    let bbox = |p: &[f64]| -> Result<BoundingBox, DataError> {
        let b = BoundingBox::new(p[0], p[1], p[2], p[3]);
        if b.height <= 0.0 || b.width <= 0.0 || b.left < 0.0 || b.top < 0.0 {
            return Err(parse_err(format!("invalid face box {:?}", b.to_array())));
        }
        Ok(b)
    };
    let mut rec = ManifestRecord {
        image: base.join(image),
        kind,
        bbox: None,
        landmarks: None,
        attributes: None,
        line,
    };
    match kind {
        SampleKind::NonFace => {
            if !payload.is_empty() {
                return Err(arity_err("payload values", "0".into()));
            }
        }
        SampleKind::Face => {
            if payload.len() != 4 {
                return Err(arity_err("payload values", "4".into()));
            }
            rec.bbox = Some(bbox(&payload)?);
        }
        SampleKind::Landmark => {
            if payload.len() != 4 + k2 {
                return Err(arity_err("payload values", format!("{}", 4 + k2)));
            }
            rec.bbox = Some(bbox(&payload)?);
            rec.landmarks = Some(payload[4..].to_vec());
        }
        SampleKind::Attribute => {
            if payload.len() != 4 + d && payload.len() != 4 + d + k2 {
                return Err(arity_err("payload values", format!("{} or {}", 4 + d, 4 + d + k2)));
            }
            rec.bbox = Some(bbox(&payload)?);
            let labels = payload[4..4 + d]
                .iter()
                .map(|&a| {
                    if a == 1.0 {
                        Ok(true)
                    } else if a == -1.0 {
                        Ok(false)
                    } else {
                        Err(parse_err(format!("attribute label {a} is not -1 or 1")))
                    }
                })
                .collect::<Result<Vec<_>, _>>()?;
            rec.attributes = Some(labels);
            if payload.len() > 4 + d {
                rec.landmarks = Some(payload[4 + d..].to_vec());
            }
        }
    }
    Ok(rec)
}

impl ManifestRecord {
    /// Renders the record as a manifest line, with `image` written as given.
    pub fn to_line(&self, image: &str) -> String {
        let mut parts = vec![image.to_string(), self.kind.token().to_string()];
        if let Some(b) = self.bbox {
            parts.extend(b.to_array().iter().map(|v| format!("{v}")));
        }
        if let Some(a) = &self.attributes {
            parts.extend(a.iter().map(|&x| if x { "1".to_string() } else { "-1".to_string() }));
        }
        if let Some(l) = &self.landmarks {
            parts.extend(l.iter().map(|v| format!("{v}")));
        }
        parts.join(" ")
    }
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Deterministically assigns records to train/val/test by shuffling
    /// with `seed` and cutting at the given fractions.
    pub fn partition(&self, val_fraction: f64, test_fraction: f64, seed: u64) -> [DatasetManifest; 3] {
        let mut order: Vec<usize> = (0..self.records.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n = order.len();
        let n_val = (n as f64 * val_fraction).round() as usize;
        let n_test = ((n as f64 * test_fraction).round() as usize).min(n - n_val.min(n));
        let n_train = n - n_val.min(n) - n_test;
        let pick = |idx: &[usize], split| DatasetManifest {
            records: idx.iter().map(|&i| self.records[i].clone()).collect(),
            split,
        };
        [
            pick(&order[..n_train], Split::Train),
            pick(&order[n_train..n_train + n_val.min(n)], Split::Val),
            pick(&order[n_train + n_val.min(n)..], Split::Test),
        ]
    }
}

/// Resizes (bilinear) to `side x side` and converts to a `[C, side, side]`
/// tensor in `[0, 1]`.
pub fn image_to_tensor(img: &DynamicImage, side: usize, channels: usize) -> Tensor {
    let resized;
    let img = if img.width() as usize == side && img.height() as usize == side {
        img
    } else {
        resized = img.resize_exact(side as u32, side as u32, FilterType::Triangle);
        &resized
    };
    let plane = side * side;
    let mut data = vec![0.0; channels * plane];
    if channels == 1 {
        for (i, p) in img.to_luma8().pixels().enumerate() {
            data[i] = p.0[0] as f64 / 255.0;
        }
    } else {
        for (i, p) in img.to_rgb8().pixels().enumerate() {
            for c in 0..3 {
                data[c * plane + i] = p.0[c] as f64 / 255.0;
            }
        }
    }
    Tensor::new(vec![channels, side, side], data).expect("image tensor shape")
}

/// Builds a sample from a decoded image and its pixel-space annotations.
pub fn sample_from_image(
    img: &DynamicImage,
    kind: SampleKind,
    bbox: Option<BoundingBox>,
    landmarks: Option<&[f64]>,
    attributes: Option<Vec<bool>>,
    config: &ModelConfig,
) -> Sample {
    let (w, h) = (img.width() as f64, img.height() as f64);
    Sample {
        image: image_to_tensor(img, config.input_sides[0], config.channels),
        kind,
        bbox: bbox.map(|b| b.scaled(w, h)),
        landmarks: landmarks.map(|l| l.chunks(2).flat_map(|p| [p[0] / w, p[1] / h]).collect()),
        attributes,
    }
}

/// Decodes every referenced image and builds validated samples.
pub fn load_samples(manifest: &DatasetManifest, config: &ModelConfig) -> Result<Vec<Sample>, DataError> {
    manifest
        .records
        .iter()
        .map(|r| {
            let img = image::open(&r.image).map_err(|source| DataError::Image {
                path: r.image.display().to_string(),
                source,
            })?;
            let s = sample_from_image(
                &img,
                r.kind,
                r.bbox,
                r.landmarks.as_deref(),
                r.attributes.clone(),
                config,
            );
            s.validate(config.num_attributes, config.num_landmarks)?;
            Ok(s)
        })
        .collect()
}

/// Decodes one image file into a model input tensor.
pub fn load_image(path: &Path, config: &ModelConfig) -> Result<Tensor, DataError> {
    let img = image::open(path).map_err(|source| DataError::Image {
        path: path.display().to_string(),
        source,
    })?;
    Ok(image_to_tensor(&img, config.input_sides[0], config.channels))
}

/// A non-face patch and the region of the source image it was cut from.
#[derive(Debug, Clone, PartialEq)]
pub struct NonFaceCrop {
    pub region: BoundingBox,
    pub sample: Sample,
}

/// Samples `count` square crops whose IoU with `face` is below
/// [`NONFACE_MAX_IOU`], each with side drawn uniformly from
/// [`NONFACE_CROP_RANGE`] of the shorter image side.
pub fn generate_nonface_crops(
    img: &DynamicImage,
    face: &BoundingBox,
    count: usize,
    seed: u64,
    config: &ModelConfig,
) -> Result<Vec<NonFaceCrop>, DataError> {
    let (w, h) = (img.width(), img.height());
    let short = w.min(h) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let budget = CROP_ATTEMPTS_PER_CROP * count.max(1);
    let mut crops = Vec::with_capacity(count);
    let mut attempts = 0;
    while crops.len() < count {
        if attempts >= budget {
            return Err(DataError::CropsExhausted {
                attempts,
                reason: format!(
                    "found {} of {count} in a {w}x{h} image with face {:?}",
                    crops.len(),
                    face.to_array()
                ),
            });
        }
        attempts += 1;
        let frac = rng.random_range(NONFACE_CROP_RANGE.0..=NONFACE_CROP_RANGE.1);
        let side = ((short * frac).round() as u32).clamp(1, w.min(h));
        let x = rng.random_range(0..=w - side);
        let y = rng.random_range(0..=h - side);
        let region = BoundingBox::new(x as f64, y as f64, side as f64, side as f64);
        if compute_iou(&region, face) >= NONFACE_MAX_IOU {
            continue;
        }
        let patch = img.crop_imm(x, y, side, side);
        crops.push(NonFaceCrop {
            region,
            sample: Sample::nonface(image_to_tensor(&patch, config.input_sides[0], config.channels)),
        });
    }
    Ok(crops)
}

/// Deterministic shuffled batches over one epoch.
pub struct Batches<'a, T> {
    items: &'a [T],
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl<'a, T> Iterator for Batches<'a, T> {
    type Item = Vec<&'a T>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.order[self.pos..end].iter().map(|&i| &self.items[i]).collect();
        self.pos = end;
        Some(batch)
    }
}

/// Shuffles `items` with `seed` and yields batches of `batch_size`; the
/// last batch may be smaller.
pub fn make_batches<T>(items: &[T], batch_size: usize, seed: u64) -> Result<Batches<'_, T>, DataError> {
    if batch_size == 0 {
        return Err(DataError::ZeroBatch);
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(Batches {
        items,
        order,
        batch_size,
        pos: 0,
    })
}
