//! YOLO-format label handling: parsing, loading, train/val splitting,
//! per-category statistics and inverse-frequency class weights.
//!
//! Class weights are exact rationals so that ratios between them are exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, LoadReport, ParseError, Result};
use crate::geometry::BBox;
use crate::metrics::{Detection, GroundTruth};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Annotation {
    pub category_id: u32,
    /// Normalized to `[0, 1]`.
    pub bbox: BBox<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    /// Label file stem.
    pub image_id: String,
    pub annotations: Vec<Annotation>,
}

impl LabeledImage {
    /// Label-file text for this image, one newline-terminated line per box.
    pub fn to_label_text(&self) -> String {
        self.annotations.iter().map(|a| format!("{}\n", format_label_line(a))).collect()
    }

    pub fn ground_truths(&self) -> impl Iterator<Item = GroundTruth<f64>> + '_ {
        self.annotations.iter().map(|a| GroundTruth {
            image_id: self.image_id.clone(),
            category_id: a.category_id,
            bbox: a.bbox,
        })
    }
}

pub fn ground_truths(images: &[LabeledImage]) -> Vec<GroundTruth<f64>> {
    images.iter().flat_map(LabeledImage::ground_truths).collect()
}

/// Every annotation echoed back as a detection with the given confidence.
pub fn echo_detections(images: &[LabeledImage], confidence: f64) -> Vec<Detection<f64>> {
    ground_truths(images)
        .into_iter()
        .map(|g| Detection {
            image_id: g.image_id,
            category_id: g.category_id,
            confidence,
            bbox: g.bbox,
        })
        .collect()
}

pub fn format_label_line(a: &Annotation) -> String {
    format!("{} {} {} {} {}", a.category_id, a.bbox.cx, a.bbox.cy, a.bbox.w, a.bbox.h)
}

/// Parses `category cx cy w h`. Coordinates must lie in `[0, 1]` and the
/// extents must be positive.
pub fn parse_label_line(line: &str, line_no: usize) -> std::result::Result<Annotation, ParseError> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 5 {
        return Err(ParseError::new(
            line_no,
            format!("expected 5 fields, found {}", fields.len()),
        ));
    }
    let category_id = fields[0]
        .parse::<u32>()
        .map_err(|_| ParseError::new(line_no, format!("category '{}' is not a non-negative integer", fields[0])))?;
    let mut v = [0.0f64; 4];
    for (slot, tok) in v.iter_mut().zip(&fields[1..]) {
        *slot = tok
            .parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .ok_or_else(|| ParseError::new(line_no, format!("'{tok}' is not a finite number")))?;
    }
    if let Some(bad) = v.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(ParseError::new(line_no, format!("coordinate {bad} outside [0, 1]")));
    }
    if v[2] <= 0.0 || v[3] <= 0.0 {
        return Err(ParseError::new(line_no, "width and height must be positive"));
    }
    Ok(Annotation {
        category_id,
        bbox: BBox::from_array(v),
    })
}

/// Parses a whole label file, collecting every bad line. Blank lines are
/// ignored.
pub fn parse_label_text(text: &str) -> std::result::Result<Vec<Annotation>, Vec<ParseError>> {
    let mut annotations = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match parse_label_line(line, i + 1) {
            Ok(a) => annotations.push(a),
            Err(e) => errors.push(e),
        }
    }
    if errors.is_empty() {
        Ok(annotations)
    } else {
        Err(errors)
    }
}

fn load_label_file(path: &Path) -> std::result::Result<LabeledImage, Vec<ParseError>> {
    let image_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let text = fs::read_to_string(path)
        .map_err(|e| vec![ParseError::new(0, format!("unreadable: {e}")).in_file(path)])?;
    parse_label_text(&text)
        .map(|annotations| LabeledImage { image_id, annotations })
        .map_err(|errs| errs.into_iter().map(|e| e.in_file(path)).collect())
}

/// Loads every `.txt` file in `dir`, sorted by image id. Any malformed line
/// fails the whole load with a report naming each offending file and line.
pub fn load_dataset(dir: &Path) -> Result<Vec<LabeledImage>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && path.extension().is_some_and(|x| x == "txt") {
            paths.push(path);
        }
    }
    paths.sort();
    let results: Vec<_> = paths.par_iter().map(|p| load_label_file(p)).collect();
    let mut images = Vec::with_capacity(results.len());
    let mut report = LoadReport::default();
    for r in results {
        match r {
            Ok(img) => images.push(img),
            Err(errs) => report.errors.extend(errs),
        }
    }
    if !report.errors.is_empty() {
        return Err(Error::Load(report));
    }
    images.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    Ok(images)
}

/// Writes one label file per image into `dir` (created if missing).
pub fn write_dataset(dir: &Path, images: &[LabeledImage]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for img in images {
        let path = dir.join(format!("{}.txt", img.image_id));
        fs::write(&path, img.to_label_text()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Seeded shuffle of the images, then a cut at `floor(n * train / (train + val))`.
/// The split unit is the image.
pub fn split_train_val(
    images: &[LabeledImage],
    ratio_train: usize,
    ratio_val: usize,
    seed: u64,
) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>)> {
    if images.is_empty() {
        return Err(Error::Empty("cannot split an empty dataset".into()));
    }
    if ratio_train + ratio_val == 0 {
        return Err(Error::Config("split ratios must not both be zero".into()));
    }
    let mut order: Vec<usize> = (0..images.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = images.len() * ratio_train / (ratio_train + ratio_val);
    let pick = |idx: &[usize]| idx.iter().map(|&i| images[i].clone()).collect::<Vec<_>>();
    Ok((pick(&order[..cut]), pick(&order[cut..])))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSummary {
    pub image_count: usize,
    /// Instances per category, `n_c`.
    pub counts: BTreeMap<u32, usize>,
    pub total_instances: usize,
    /// `total_instances / image_count`, 0 for an empty dataset.
    pub mean_per_image: f64,
}

pub fn summarize(images: &[LabeledImage]) -> DatasetSummary {
    let mut counts = BTreeMap::new();
    for a in images.iter().flat_map(|i| &i.annotations) {
        *counts.entry(a.category_id).or_insert(0usize) += 1;
    }
    let total_instances: usize = counts.values().sum();
    let mean_per_image = if images.is_empty() {
        0.0
    } else {
        total_instances as f64 / images.len() as f64
    };
    DatasetSummary {
        image_count: images.len(),
        counts,
        total_instances,
        mean_per_image,
    }
}

/// Exact class weight.
pub type Weight = BigRational;

pub fn weight_to_f64(w: &Weight) -> f64 {
    w.to_f64().unwrap_or(f64::NAN)
}

/// Inverse-frequency weights `w_c = 1 / n_c`. With `normalize`, the weights
/// are rescaled so their mean over categories is exactly 1.
pub fn category_weights(summary: &DatasetSummary, normalize: bool) -> Result<BTreeMap<u32, Weight>> {
    let mut raw = BTreeMap::new();
    for (&c, &n) in &summary.counts {
        if n == 0 {
            return Err(Error::Undefined(format!("category {c} has no instances; weight 1/0")));
        }
        raw.insert(c, BigRational::new(BigInt::from(1), BigInt::from(n)));
    }
    if !normalize || raw.is_empty() {
        return Ok(raw);
    }
    let total = raw.values().fold(BigRational::zero(), |acc, w| acc + w);
    let k = BigRational::from_integer(BigInt::from(raw.len()));
    Ok(raw.into_iter().map(|(c, w)| (c, w * &k / &total)).collect())
}

/// Ground-truth counts written by [`generate_minidata`].
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub seed: u64,
    pub images: usize,
    pub instances: usize,
    pub counts: BTreeMap<u32, usize>,
}

impl Manifest {
    /// `key=value` lines; the count keys match the dataset-stats report.
    pub fn to_text(&self) -> String {
        format!("seed={}\n{}", self.seed, count_lines(self.images, self.instances, &self.counts))
    }
}

/// `images=`, `instances=` and one `count.<category>=` line per category.
pub fn count_lines(images: usize, instances: usize, counts: &BTreeMap<u32, usize>) -> String {
    let mut out = format!("images={images}\ninstances={instances}\n");
    for (c, n) in counts {
        out.push_str(&format!("count.{c}={n}\n"));
    }
    out
}

/// Seeded imperfect detector output for the labels: most boxes are found
/// with jittered coordinates, some are missed, and a few spurious boxes are
/// added. Values are rounded to 6 decimals and clamped to `[0, 1]`.
pub fn noisy_detections(images: &[LabeledImage], seed: u64) -> Vec<Detection<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let round6 = |x: f64| ((x * 1e6).round() / 1e6).clamp(0.0, 1.0);
    let mut out = Vec::new();
    for img in images {
        for a in &img.annotations {
            if rng.gen_bool(0.15) {
                continue;
            }
            let b = a.bbox;
            let mut j = |v: f64, s: f64| round6(v + rng.gen_range(-0.15..0.15) * s);
            let bbox = BBox::new(j(b.cx, b.w), j(b.cy, b.h), j(b.w, b.w).max(1e-6), j(b.h, b.h).max(1e-6));
            out.push(Detection {
                image_id: img.image_id.clone(),
                category_id: a.category_id,
                confidence: round6(rng.gen_range(0.3..1.0)),
                bbox,
            });
        }
        for _ in 0..rng.gen_range(0..=1) {
            out.push(Detection {
                image_id: img.image_id.clone(),
                category_id: rng.gen_range(0..MINIDATA_CATEGORY_WEIGHTS.len() as u32),
                confidence: round6(rng.gen_range(0.05..0.6)),
                bbox: BBox::new(round6(rng.gen_range(0.1..0.9)), round6(rng.gen_range(0.1..0.9)), 0.1, 0.1),
            });
        }
    }
    out
}

/// Category draw probabilities of the mini-dataset, deliberately imbalanced.
pub const MINIDATA_CATEGORY_WEIGHTS: [f64; 3] = [0.6, 0.3, 0.1];

/// Seeded synthetic label set. Every image holds 1 to 8 boxes that stay
/// inside the unit square; categories follow [`MINIDATA_CATEGORY_WEIGHTS`].
/// Coordinates are rounded to 6 decimals so text round-trips are exact.
pub fn generate_minidata(seed: u64, n_images: usize) -> (Vec<LabeledImage>, Manifest) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let round6 = |x: f64| (x * 1e6).round() / 1e6;
    let mut counts: BTreeMap<u32, usize> = (0..MINIDATA_CATEGORY_WEIGHTS.len() as u32).map(|c| (c, 0)).collect();
    let images: Vec<LabeledImage> = (0..n_images)
        .map(|i| {
            let n = rng.gen_range(1..=8);
            let annotations = (0..n)
                .map(|_| {
                    let u: f64 = rng.gen();
                    let mut acc = 0.0;
                    let mut category_id = MINIDATA_CATEGORY_WEIGHTS.len() as u32 - 1;
                    for (c, p) in MINIDATA_CATEGORY_WEIGHTS.iter().enumerate() {
                        acc += p;
                        if u < acc {
                            category_id = c as u32;
                            break;
                        }
                    }
                    let w = round6(rng.gen_range(0.05..0.3));
                    let h = round6(rng.gen_range(0.05..0.3));
                    let cx = round6(rng.gen_range(w / 2.0 + 1e-6..1.0 - w / 2.0 - 1e-6));
                    let cy = round6(rng.gen_range(h / 2.0 + 1e-6..1.0 - h / 2.0 - 1e-6));
                    *counts.entry(category_id).or_insert(0) += 1;
                    Annotation {
                        category_id,
                        bbox: BBox::new(cx, cy, w, h),
                    }
                })
                .collect();
            LabeledImage {
                image_id: format!("img_{i:04}"),
                annotations,
            }
        })
        .collect();
    let instances = counts.values().sum();
    let manifest = Manifest {
        seed,
        images: n_images,
        instances,
        counts,
    };
    (images, manifest)
}
