//! Inference and VOC-style metrics.
//!
//! Test-time scores are the mean of the refined classifiers' class rows
//! (background dropped, MIDN stage excluded). Detections are the per-class
//! NMS survivors of those scores; a detection is positive when its IoU with a
//! ground truth of its class is strictly above 0.5.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, nms_indices, BBox, Detection};
use crate::io_util::write_atomic;
use crate::netcore::ModelParams;
use crate::oicr::{network_forward, top_proposal};
use crate::synthdata::{Bag, Dataset};

pub const POSITIVE_IOU: f64 = 0.5;
pub const DEFAULT_NMS_THRESHOLD: f64 = 0.3;
pub const SCORE_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ApMode {
    /// 11-point interpolated AP.
    Voc07,
    /// Area under the monotone precision envelope.
    Area,
}

impl std::str::FromStr for ApMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "voc07" => Ok(ApMode::Voc07),
            "area" => Ok(ApMode::Area),
            other => Err(format!("unknown AP mode {other:?}, expected voc07 or area")),
        }
    }
}

/// Which score matrix inference reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreSource {
    /// Mean of the refined classifiers.
    Refined,
    /// MIDN proposal scores, for models trained without refinement.
    Midn,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub nms_threshold: f64,
    pub ap_mode: ApMode,
    pub source: ScoreSource,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            nms_threshold: DEFAULT_NMS_THRESHOLD,
            ap_mode: ApMode::Voc07,
            source: ScoreSource::Refined,
        }
    }
}

/// `C x |R|` class scores of one bag.
pub fn class_scores(bag: &Bag, params: &ModelParams, source: ScoreSource) -> Result<Array2<f64>> {
    let state = network_forward(bag.feature_matrix(), params)?;
    let c = bag.num_classes();
    match source {
        ScoreSource::Midn => Ok(state.midn.x_r0),
        ScoreSource::Refined => {
            let k = state.refine.probs.len();
            if k == 0 {
                return Err(Error::Config(
                    "refined scores need at least one refinement stage".into(),
                ));
            }
            let mut mean = Array2::zeros((c, bag.num_proposals()));
            for p in &state.refine.probs {
                mean += &p.slice(s![..c, ..]);
            }
            mean /= k as f64;
            Ok(mean)
        }
    }
}

/// A detection tied to the image and proposal it came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageDetection {
    pub image_id: u64,
    pub proposal_index: usize,
    #[serde(flatten)]
    pub detection: Detection,
}

/// Per-class NMS over a score matrix. Output is grouped by class, each group
/// in descending score order.
pub fn detections_from_scores(
    bag: &Bag,
    scores: &Array2<f64>,
    nms_threshold: f64,
) -> Vec<ImageDetection> {
    let mut out = Vec::new();
    for (c, row) in scores.rows().into_iter().enumerate() {
        let (idx, dets): (Vec<usize>, Vec<Detection>) = row
            .iter()
            .enumerate()
            .filter(|&(_, &s)| s >= SCORE_FLOOR)
            .map(|(r, &s)| {
                (
                    r,
                    Detection {
                        bbox: bag.proposals[r],
                        class_index: c + 1,
                        score: s,
                    },
                )
            })
            .unzip();
        for k in nms_indices(&dets, nms_threshold) {
            out.push(ImageDetection {
                image_id: bag.image_id,
                proposal_index: idx[k],
                detection: dets[k],
            });
        }
    }
    out
}

pub fn detect(bag: &Bag, params: &ModelParams, cfg: &EvalConfig) -> Result<Vec<Detection>> {
    let scores = class_scores(bag, params, cfg.source)?;
    Ok(detections_from_scores(bag, &scores, cfg.nms_threshold)
        .into_iter()
        .map(|d| d.detection)
        .collect())
}

/// Average precision of one class.
///
/// `ground_truths` maps image id to that image's boxes of the class. Returns
/// `None` when there are no ground truths at all.
pub fn voc_ap(
    detections: &[ImageDetection],
    ground_truths: &BTreeMap<u64, Vec<BBox>>,
    mode: ApMode,
) -> Option<f64> {
    let num_gt: usize = ground_truths.values().map(Vec::len).sum();
    if num_gt == 0 {
        return None;
    }
    let mut ranked: Vec<&ImageDetection> = detections.iter().collect();
    ranked.sort_by(|a, b| {
        b.detection
            .score
            .total_cmp(&a.detection.score)
            .then(a.image_id.cmp(&b.image_id))
            .then(a.proposal_index.cmp(&b.proposal_index))
    });

    let mut matched: BTreeMap<u64, Vec<bool>> = ground_truths
        .iter()
        .map(|(&id, g)| (id, vec![false; g.len()]))
        .collect();
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(ranked.len());
    let mut recall = Vec::with_capacity(ranked.len());
    for (rank, det) in ranked.iter().enumerate() {
        if let (Some(gts), Some(used)) = (
            ground_truths.get(&det.image_id),
            matched.get_mut(&det.image_id),
        ) {
            let best = gts
                .iter()
                .enumerate()
                .filter(|&(g, _)| !used[g])
                .map(|(g, b)| (g, iou(&det.detection.bbox, b)))
                .fold(None, |acc: Option<(usize, f64)>, (g, o)| match acc {
                    Some((_, best)) if best >= o => acc,
                    _ => Some((g, o)),
                });
            if let Some((g, overlap)) = best {
                if overlap > POSITIVE_IOU {
                    used[g] = true;
                    tp += 1;
                }
            }
        }
        precision.push(tp as f64 / (rank + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    Some(match mode {
        ApMode::Voc07 => ap_eleven_point(&precision, &recall),
        ApMode::Area => ap_area(&precision, &recall),
    })
}

fn ap_eleven_point(precision: &[f64], recall: &[f64]) -> f64 {
    let maxima = (0..=10).map(|i| {
        let t = i as f64 / 10.0;
        precision
            .iter()
            .zip(recall)
            .filter(|&(_, &r)| r >= t)
            .map(|(&p, _)| p)
            .fold(0.0, f64::max)
    });
    compensated_sum(maxima) / 11.0
}

/// Neumaier summation, so that e.g. six 1s and five 2/3s sum to the double
/// nearest 28/3.
fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut carry) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        carry += if sum.abs() >= v.abs() {
            (sum - t) + v
        } else {
            (v - t) + sum
        };
        sum = t;
    }
    sum + carry
}

fn ap_area(precision: &[f64], recall: &[f64]) -> f64 {
    let mut mrec = Vec::with_capacity(recall.len() + 2);
    mrec.push(0.0);
    mrec.extend_from_slice(recall);
    mrec.push(1.0);
    let mut mpre = Vec::with_capacity(precision.len() + 2);
    mpre.push(0.0);
    mpre.extend_from_slice(precision);
    mpre.push(0.0);
    for i in (0..mpre.len() - 1).rev() {
        mpre[i] = mpre[i].max(mpre[i + 1]);
    }
    (1..mrec.len())
        .filter(|&i| mrec[i] != mrec[i - 1])
        .map(|i| (mrec[i] - mrec[i - 1]) * mpre[i])
        .sum()
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    /// Per-class AP; `None` for classes without ground truth.
    pub ap: Vec<Option<f64>>,
    pub map: f64,
    /// Per-class CorLoc; `None` for classes without positive images.
    pub corloc: Vec<Option<f64>>,
    pub mean_corloc: f64,
    pub num_images: usize,
    pub num_ground_truths: usize,
    pub num_detections: usize,
}

impl EvalReport {
    /// CSV `class_index,ap,corloc`, one row per class plus a `mean` row.
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from("class_index,ap,corloc\n");
        for (c, (ap, cl)) in self.ap.iter().zip(&self.corloc).enumerate() {
            writeln!(out, "{},{},{}", c + 1, cell(*ap), cell(*cl)).unwrap();
        }
        writeln!(out, "mean,{},{}", self.map, self.mean_corloc).unwrap();
        out
    }
}

fn mean_present(values: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

/// AP part of the report from precomputed per-bag score matrices.
pub fn map_from_scores(ds: &Dataset, scores: &[Array2<f64>], cfg: &EvalConfig) -> EvalReport {
    let c = ds.num_classes;
    let mut per_class: Vec<Vec<ImageDetection>> = vec![Vec::new(); c];
    let mut gts: Vec<BTreeMap<u64, Vec<BBox>>> = vec![BTreeMap::new(); c];
    for (bag, s) in ds.bags.iter().zip(scores) {
        for d in detections_from_scores(bag, s, cfg.nms_threshold) {
            per_class[d.detection.class_index - 1].push(d);
        }
        for g in &bag.ground_truth {
            gts[g.class_index - 1]
                .entry(bag.image_id)
                .or_default()
                .push(g.bbox);
        }
    }
    let ap: Vec<Option<f64>> = (0..c)
        .map(|k| voc_ap(&per_class[k], &gts[k], cfg.ap_mode))
        .collect();
    EvalReport {
        map: mean_present(&ap),
        ap,
        corloc: vec![None; c],
        mean_corloc: 0.0,
        num_images: ds.bags.len(),
        num_ground_truths: ds.bags.iter().map(|b| b.ground_truth.len()).sum(),
        num_detections: per_class.iter().map(Vec::len).sum(),
    }
}

/// CorLoc from precomputed score matrices: for every positive class of a
/// bag, the single highest-scoring proposal (before NMS) must overlap a
/// ground truth of that class by IoU > 0.5.
pub fn corloc_from_scores(ds: &Dataset, scores: &[Array2<f64>]) -> Vec<Option<f64>> {
    let c = ds.num_classes;
    let mut hits = vec![0usize; c];
    let mut total = vec![0usize; c];
    for (bag, s) in ds.bags.iter().zip(scores) {
        for k in (0..c).filter(|&k| bag.labels[k]) {
            total[k] += 1;
            let top = bag.proposals[top_proposal(s.view(), k)];
            if bag
                .ground_truth
                .iter()
                .any(|g| g.class_index == k + 1 && iou(&top, &g.bbox) > POSITIVE_IOU)
            {
                hits[k] += 1;
            }
        }
    }
    (0..c)
        .map(|k| (total[k] > 0).then(|| hits[k] as f64 / total[k] as f64))
        .collect()
}

pub fn all_scores(
    ds: &Dataset,
    params: &ModelParams,
    source: ScoreSource,
) -> Result<Vec<Array2<f64>>> {
    ds.bags
        .iter()
        .map(|b| class_scores(b, params, source))
        .collect()
}

pub fn evaluate_map(ds: &Dataset, params: &ModelParams, cfg: &EvalConfig) -> Result<EvalReport> {
    Ok(map_from_scores(
        ds,
        &all_scores(ds, params, cfg.source)?,
        cfg,
    ))
}

pub fn evaluate_corloc(ds: &Dataset, params: &ModelParams, cfg: &EvalConfig) -> Result<EvalReport> {
    let corloc = corloc_from_scores(ds, &all_scores(ds, params, cfg.source)?);
    Ok(EvalReport {
        mean_corloc: mean_present(&corloc),
        corloc,
        ap: vec![None; ds.num_classes],
        num_images: ds.bags.len(),
        num_ground_truths: ds.bags.iter().map(|b| b.ground_truth.len()).sum(),
        ..Default::default()
    })
}

/// mAP on `map_ds` and CorLoc on `corloc_ds` in one report.
pub fn evaluate(
    map_ds: &Dataset,
    corloc_ds: &Dataset,
    params: &ModelParams,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let mut report = evaluate_map(map_ds, params, cfg)?;
    let cl = evaluate_corloc(corloc_ds, params, cfg)?;
    report.corloc = cl.corloc;
    report.mean_corloc = cl.mean_corloc;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoGroundTruth {
    pub image_id: u64,
    pub class_index: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
}

/// Top-scoring proposal of every positive class of every bag.
pub fn pseudo_ground_truth(
    ds: &Dataset,
    params: &ModelParams,
    cfg: &EvalConfig,
) -> Result<Vec<PseudoGroundTruth>> {
    let mut out = Vec::new();
    for bag in &ds.bags {
        let scores = class_scores(bag, params, cfg.source)?;
        for k in (0..bag.num_classes()).filter(|&k| bag.labels[k]) {
            let top = top_proposal(scores.view(), k);
            out.push(PseudoGroundTruth {
                image_id: bag.image_id,
                class_index: k + 1,
                bbox: bag.proposals[top],
                score: scores[[k, top]],
            });
        }
    }
    Ok(out)
}

pub fn export_pseudo_gt(
    ds: &Dataset,
    params: &ModelParams,
    cfg: &EvalConfig,
    path: impl AsRef<Path>,
) -> Result<Vec<PseudoGroundTruth>> {
    let boxes = pseudo_ground_truth(ds, params, cfg)?;
    let json = serde_json::to_vec_pretty(&boxes).expect("pseudo ground truth serializes");
    write_atomic(path.as_ref(), &json)?;
    Ok(boxes)
}
