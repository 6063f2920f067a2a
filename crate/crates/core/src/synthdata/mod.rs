//! Synthetic weakly labelled detection scenes.
//!
//! Every object has a discriminative part. Features have one block per class,
//! fed only by the part, and one block shared by all classes that responds to
//! the whole object. A plain MIL detector keys on the class blocks and locks
//! onto parts; instance classifiers with a background class can also use the
//! shared block to grow towards the whole object.

mod io;

pub use io::{load_dataset, save_dataset, FEATURE_MAGIC, FORMAT_VERSION};

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

/// Penalty scale for the part of a proposal hanging outside an object.
pub const OVERSHOOT_PENALTY: f64 = 0.25;
/// Share of class evidence that measures how tightly a proposal fits the part.
pub const PART_DENSITY_MIX: f64 = 0.16;
/// Feature value of full evidence; noise is scaled by the same factor.
pub const SIGNATURE_GAIN: f64 = 4.0;
/// Part side length as a fraction of the object side.
pub const PART_SIDE: (f64, f64) = (0.4, 0.6);
/// Jittered copies of each object box among the proposals.
pub const OBJECT_JITTERS: usize = 8;
/// Jittered copies of each part box among the proposals.
pub const PART_JITTERS: usize = 12;
const JITTER_SCALE: (f64, f64) = (0.7, 1.3);
const JITTER_SHIFT: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub canvas_width: f64,
    pub canvas_height: f64,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub proposals_per_image: usize,
    pub images: usize,
    /// Inclusive range of objects per image.
    pub objects_per_image: (usize, usize),
    pub part_bias: f64,
    pub feature_noise_sigma: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            canvas_width: 256.0,
            canvas_height: 256.0,
            num_classes: 4,
            feature_dim: 40,
            proposals_per_image: 64,
            images: 200,
            objects_per_image: (1, 3),
            part_bias: 0.6,
            feature_noise_sigma: 0.05,
            seed: 7,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return fail(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            ));
        }
        if self.feature_dim < 8 {
            return fail(format!(
                "feature_dim must be >= 8, got {}",
                self.feature_dim
            ));
        }
        if self.feature_dim < self.num_classes + 1 {
            return fail("feature_dim must be at least num_classes + 1".into());
        }
        let (lo, hi) = self.objects_per_image;
        if lo == 0 || lo > hi {
            return fail(format!("bad objects_per_image range {lo}..={hi}"));
        }
        if hi > self.num_classes {
            return fail(
                "objects_per_image may not exceed num_classes (classes are distinct)".into(),
            );
        }
        if self.images == 0 {
            return fail("images must be positive".into());
        }
        let needed = hi * (OBJECT_JITTERS + PART_JITTERS);
        if self.proposals_per_image < needed.max(2) {
            return fail(format!(
                "proposals_per_image must be at least {needed} for {hi} objects"
            ));
        }
        if !(0.0..=1.0).contains(&self.part_bias) {
            return fail(format!(
                "part_bias must lie in [0, 1], got {}",
                self.part_bias
            ));
        }
        if !(self.feature_noise_sigma >= 0.0 && self.feature_noise_sigma.is_finite()) {
            return fail("feature_noise_sigma must be finite and >= 0".into());
        }
        if !(self.canvas_width > 0.0 && self.canvas_height > 0.0) {
            return fail("canvas dimensions must be positive".into());
        }
        Ok(())
    }

    fn canvas(&self) -> BBox {
        BBox::new(0.0, 0.0, self.canvas_width, self.canvas_height)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthObject {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub part_box: BBox,
    /// 1-based class index.
    pub class_index: usize,
}

/// One image: proposals with features, image-level labels and (for
/// evaluation only) the ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub image_id: u64,
    pub proposals: Vec<BBox>,
    /// `|R| x D`, one row per proposal.
    pub features: Array2<f32>,
    /// `labels[c]` is true when class `c + 1` is present.
    pub labels: Vec<bool>,
    pub ground_truth: Vec<GroundTruthObject>,
}

impl Bag {
    pub fn num_proposals(&self) -> usize {
        self.proposals.len()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    /// Features as a `D x |R|` f64 matrix, the layout the network consumes.
    pub fn feature_matrix(&self) -> Array2<f64> {
        self.features.t().mapv(f64::from)
    }

    pub fn has_positive(&self) -> bool {
        self.labels.iter().any(|&y| y)
    }
}

/// A set of bags sharing class count and feature width.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub bags: Vec<Bag>,
}

/// Fraction of `b` covered by `p`.
fn cover(p: &BBox, b: &BBox) -> f64 {
    let a = b.area();
    if a <= 0.0 {
        0.0
    } else {
        p.intersection_area(b) / a
    }
}

/// Fraction of `p` lying outside `o`, counted only when they overlap.
fn overshoot(p: &BBox, o: &BBox) -> f64 {
    let inter = p.intersection_area(o);
    let a = p.area();
    if inter <= 0.0 || a <= 0.0 {
        0.0
    } else {
        (a - inter) / a
    }
}

/// Width of each feature block: one per class plus the shared objectness
/// block.
fn block_width(num_classes: usize, feature_dim: usize) -> usize {
    feature_dim / (num_classes + 1)
}

/// Indices of the feature block assigned to a 1-based class.
pub fn signature_block(
    class_index: usize,
    num_classes: usize,
    feature_dim: usize,
) -> std::ops::Range<usize> {
    let width = block_width(num_classes, feature_dim);
    (class_index - 1) * width..class_index * width
}

/// Indices of the block shared by all classes.
pub fn objectness_block(num_classes: usize, feature_dim: usize) -> std::ops::Range<usize> {
    let width = block_width(num_classes, feature_dim);
    num_classes * width..(num_classes + 1) * width
}

/// `SIGNATURE_GAIN` on the block of `class_index`, zero elsewhere.
pub fn signature(class_index: usize, num_classes: usize, feature_dim: usize) -> Array1<f64> {
    let mut v = Array1::zeros(feature_dim);
    v.slice_mut(ndarray::s![signature_block(
        class_index,
        num_classes,
        feature_dim
    )])
    .fill(SIGNATURE_GAIN);
    v
}

/// Evidence of proposal `p` for one object before gain and noise, as
/// `(class, objectness)`.
///
/// Class evidence only sees the part: mostly how much of it `p` covers, plus
/// a little of how much of `p` it fills, so tight part boxes win. Objectness
/// grows with coverage of the whole object and is shared by all classes.
pub fn object_evidence(p: &BBox, obj: &GroundTruthObject, part_bias: f64) -> (f64, f64) {
    let class = part_bias
        * ((1.0 - PART_DENSITY_MIX) * cover(p, &obj.part_box)
            + PART_DENSITY_MIX * cover(&obj.part_box, p));
    let objectness =
        (1.0 - part_bias) * cover(p, &obj.bbox) - OVERSHOOT_PENALTY * overshoot(p, &obj.bbox);
    (class, objectness)
}

/// Feature vector of one proposal.
pub fn featurize_proposal<R: Rng + ?Sized>(
    p: &BBox,
    scene: &[GroundTruthObject],
    cfg: &SceneConfig,
    noise: &mut R,
) -> Array1<f64> {
    let mut f = Array1::zeros(cfg.feature_dim);
    let shared = objectness_block(cfg.num_classes, cfg.feature_dim);
    for obj in scene {
        let (class, objectness) = object_evidence(p, obj, cfg.part_bias);
        let block = signature_block(obj.class_index, cfg.num_classes, cfg.feature_dim);
        f.slice_mut(ndarray::s![block])
            .mapv_inplace(|v: f64| v + class);
        f.slice_mut(ndarray::s![shared.clone()])
            .mapv_inplace(|v: f64| v + objectness);
    }
    f *= SIGNATURE_GAIN;
    if cfg.feature_noise_sigma > 0.0 {
        let normal =
            Normal::new(0.0, cfg.feature_noise_sigma * SIGNATURE_GAIN).expect("valid sigma");
        f.mapv_inplace(|v| v + normal.sample(noise));
    }
    f
}

fn jitter<R: Rng + ?Sized>(b: &BBox, canvas: &BBox, rng: &mut R) -> BBox {
    let (w, h) = (b.width(), b.height());
    let (cx, cy) = b.center();
    let cx = cx + rng.random_range(-JITTER_SHIFT..=JITTER_SHIFT) * w;
    let cy = cy + rng.random_range(-JITTER_SHIFT..=JITTER_SHIFT) * h;
    let sw = rng.random_range(JITTER_SCALE.0..=JITTER_SCALE.1);
    let sh = rng.random_range(JITTER_SCALE.0..=JITTER_SCALE.1);
    clip(&BBox::from_center(cx, cy, w * sw, h * sh), canvas)
}

fn clip(b: &BBox, canvas: &BBox) -> BBox {
    let x_min = b.x_min.clamp(canvas.x_min, canvas.x_max - 1.0);
    let y_min = b.y_min.clamp(canvas.y_min, canvas.y_max - 1.0);
    let x_max = b.x_max.clamp(x_min + 1.0, canvas.x_max);
    let y_max = b.y_max.clamp(y_min + 1.0, canvas.y_max);
    BBox::new(x_min, y_min, x_max, y_max)
}

fn random_box<R: Rng + ?Sized>(canvas: &BBox, min_frac: f64, max_frac: f64, rng: &mut R) -> BBox {
    let w = rng.random_range(min_frac..=max_frac) * canvas.width();
    let h = rng.random_range(min_frac..=max_frac) * canvas.height();
    let x = rng.random_range(canvas.x_min..=canvas.x_max - w);
    let y = rng.random_range(canvas.y_min..=canvas.y_max - h);
    BBox::new(x, y, x + w, y + h)
}

fn place_objects<R: Rng + ?Sized>(cfg: &SceneConfig, rng: &mut R) -> Vec<GroundTruthObject> {
    let canvas = cfg.canvas();
    let (lo, hi) = cfg.objects_per_image;
    let count = rng.random_range(lo..=hi);
    let mut classes: Vec<usize> = (1..=cfg.num_classes).collect();
    classes.shuffle(rng);
    classes.truncate(count);
    classes.sort_unstable();

    let mut objects: Vec<GroundTruthObject> = Vec::with_capacity(count);
    for class_index in classes {
        // Low mutual overlap keeps each object's proposals attributable to it.
        let mut bbox = random_box(&canvas, 0.2, 0.45, rng);
        for _ in 0..50 {
            if objects.iter().all(|o| iou(&o.bbox, &bbox) < 0.1) {
                break;
            }
            bbox = random_box(&canvas, 0.2, 0.45, rng);
        }
        let pw = bbox.width() * rng.random_range(PART_SIDE.0..=PART_SIDE.1);
        let ph = bbox.height() * rng.random_range(PART_SIDE.0..=PART_SIDE.1);
        let px = rng.random_range(bbox.x_min..=bbox.x_max - pw);
        let py = rng.random_range(bbox.y_min..=bbox.y_max - ph);
        objects.push(GroundTruthObject {
            bbox,
            part_box: BBox::new(px, py, px + pw, py + ph),
            class_index,
        });
    }
    objects
}

fn make_proposals<R: Rng + ?Sized>(
    objects: &[GroundTruthObject],
    cfg: &SceneConfig,
    rng: &mut R,
) -> Vec<BBox> {
    let canvas = cfg.canvas();
    let mut proposals = Vec::with_capacity(cfg.proposals_per_image);
    for obj in objects {
        // The first object copy always localizes it, so every object is findable.
        let mut first = jitter(&obj.bbox, &canvas, rng);
        for _ in 0..100 {
            if iou(&first, &obj.bbox) > 0.5 {
                break;
            }
            first = jitter(&obj.bbox, &canvas, rng);
        }
        if iou(&first, &obj.bbox) <= 0.5 {
            first = obj.bbox;
        }
        proposals.push(first);
        for _ in 1..OBJECT_JITTERS {
            proposals.push(jitter(&obj.bbox, &canvas, rng));
        }
        for _ in 0..PART_JITTERS {
            proposals.push(jitter(&obj.part_box, &canvas, rng));
        }
    }
    while proposals.len() < cfg.proposals_per_image {
        proposals.push(random_box(&canvas, 0.08, 0.6, rng));
    }
    proposals.shuffle(rng);
    proposals
}

/// Deterministic dataset for a configuration.
pub fn generate_dataset(cfg: &SceneConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bags = (0..cfg.images)
        .map(|image_id| {
            let objects = place_objects(cfg, &mut rng);
            let proposals = make_proposals(&objects, cfg, &mut rng);
            let mut features = Array2::<f32>::zeros((proposals.len(), cfg.feature_dim));
            for (mut row, p) in features.rows_mut().into_iter().zip(&proposals) {
                let f = featurize_proposal(p, &objects, cfg, &mut rng);
                row.assign(&f.mapv(|v| v as f32));
            }
            let mut labels = vec![false; cfg.num_classes];
            for o in &objects {
                labels[o.class_index - 1] = true;
            }
            Bag {
                image_id: image_id as u64,
                proposals,
                features,
                labels,
                ground_truth: objects,
            }
        })
        .collect();
    Ok(Dataset {
        num_classes: cfg.num_classes,
        feature_dim: cfg.feature_dim,
        bags,
    })
}
