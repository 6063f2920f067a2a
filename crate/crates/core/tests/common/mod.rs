//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use ndarray::Array2;
use oicr_core::geometry::{BBox, Detection};
use oicr_core::netcore::{init_model, ModelDims, ModelParams};
use oicr_core::oicr::{total_loss_with_plan, OicrConfig};
use oicr_core::synthdata::{Bag, GroundTruthObject};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// IoU from raw coordinates.
pub fn overlap(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = (a.x_max - a.x_min) * (a.y_max - a.y_min)
        + (b.x_max - b.x_min) * (b.y_max - b.y_min)
        - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn random_box(rng: &mut impl Rng, extent: f64) -> BBox {
    let x = rng.random_range(0.0..extent * 0.8);
    let y = rng.random_range(0.0..extent * 0.8);
    let w = rng.random_range(1.0..extent * 0.4);
    let h = rng.random_range(1.0..extent * 0.4);
    BBox::new(x, y, x + w, y + h)
}

/// Proposals where about half are small perturbations of earlier ones, so
/// that IoUs on both sides of typical thresholds occur.
pub fn random_proposals(rng: &mut impl Rng, n: usize) -> Vec<BBox> {
    let mut out: Vec<BBox> = Vec::with_capacity(n);
    for _ in 0..n {
        if !out.is_empty() && rng.random_bool(0.5) {
            let base = out[rng.random_range(0..out.len())];
            let d = |rng: &mut dyn rand::RngCore| rng.random_range(-6.0..6.0);
            let x0 = base.x_min + d(rng);
            let y0 = base.y_min + d(rng);
            let x1 = (base.x_max + d(rng)).max(x0 + 1.0);
            let y1 = (base.y_max + d(rng)).max(y0 + 1.0);
            out.push(BBox::new(x0, y0, x1, y1));
        } else {
            out.push(random_box(rng, 100.0));
        }
    }
    out
}

/// Labels with between 1 and `max_pos` positive classes.
pub fn random_labels(rng: &mut impl Rng, c: usize, max_pos: usize) -> Vec<bool> {
    let count = rng.random_range(1..=max_pos.min(c));
    let mut labels = vec![false; c];
    while labels.iter().filter(|&&y| y).count() < count {
        labels[rng.random_range(0..c)] = true;
    }
    labels
}

pub fn random_bag(rng: &mut impl Rng, c: usize, r: usize, d: usize) -> Bag {
    let normal = Normal::new(0.0f32, 1.0).unwrap();
    Bag {
        image_id: rng.random_range(0..1000),
        proposals: random_proposals(rng, r),
        features: Array2::from_shape_simple_fn((r, d), || normal.sample(rng)),
        labels: random_labels(rng, c, 3),
        ground_truth: Vec::<GroundTruthObject>::new(),
    }
}

/// Parameters with every entry (biases included) drawn from N(0, std^2).
pub fn random_params(rng: &mut impl Rng, dims: ModelDims, std: f64) -> ModelParams {
    let mut p = init_model(dims, 0).unwrap();
    let normal = Normal::new(0.0, std).unwrap();
    let values: Vec<f64> = (0..p.num_params()).map(|_| normal.sample(rng)).collect();
    p.assign_flat(&values);
    p
}

/// Literal transcription of the supervision algorithm. Returns, per stage,
/// a `(C+1) x R` 0/1 label matrix and the weight vector.
pub fn reference_supervision(
    proposals: &[BBox],
    y: &[bool],
    scores: &[Array2<f64>],
    i_t: f64,
) -> Vec<(Array2<u8>, Vec<f64>)> {
    let c_count = y.len();
    let r_count = proposals.len();
    let mut result = Vec::new();
    for s in scores {
        let mut big_y = Array2::<u8>::zeros((c_count + 1, r_count));
        for r in 0..r_count {
            big_y[[c_count, r]] = 1;
        }
        let mut big_i = vec![f64::NEG_INFINITY; r_count];
        let mut w = vec![0.0; r_count];
        for c in 0..c_count {
            if !y[c] {
                continue;
            }
            // argmax, first index wins ties
            let mut j = 0;
            for r in 1..r_count {
                if s[[c, r]] > s[[c, j]] {
                    j = r;
                }
            }
            for r in 0..r_count {
                let i_prime = overlap(&proposals[r], &proposals[j]);
                if i_prime > big_i[r] {
                    big_i[r] = i_prime;
                    w[r] = s[[c, j]];
                    if big_i[r] > i_t {
                        for k in 0..=c_count {
                            big_y[[k, r]] = 0;
                        }
                        big_y[[c, r]] = 1;
                    }
                }
            }
        }
        result.push((big_y, w));
    }
    result
}

/// Greedy NMS by repeated selection of the best remaining box.
pub fn brute_nms(dets: &[Detection], threshold: f64) -> Vec<usize> {
    let mut alive: Vec<bool> = vec![true; dets.len()];
    let mut keep = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..dets.len() {
            if alive[i] && best.is_none_or(|b| dets[i].score > dets[b].score) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        keep.push(b);
        alive[b] = false;
        for i in 0..dets.len() {
            if alive[i] && overlap(&dets[i].bbox, &dets[b].bbox) > threshold {
                alive[i] = false;
            }
        }
    }
    keep
}

/// 11-point AP of one class from `(score, image_id, proposal_index, box)`
/// detections and per-image ground truths.
pub fn brute_ap(mut dets: Vec<(f64, u64, usize, BBox)>, gts: &[(u64, BBox)]) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    dets.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used = vec![false; gts.len()];
    let mut tp = 0.0;
    let mut points = Vec::new();
    for (i, (_, img, _, b)) in dets.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (g, (gi, gb)) in gts.iter().enumerate() {
            if gi == img && !used[g] {
                let o = overlap(b, gb);
                if best.is_none_or(|(_, bo)| o > bo) {
                    best = Some((g, o));
                }
            }
        }
        if let Some((g, o)) = best {
            if o > 0.5 {
                used[g] = true;
                tp += 1.0;
            }
        }
        points.push((tp / gts.len() as f64, tp / (i + 1) as f64));
    }
    let mut ap = 0.0;
    for t in 0..=10 {
        let t = t as f64 / 10.0;
        let p = points
            .iter()
            .filter(|(r, _)| *r >= t - 1e-12)
            .map(|&(_, p)| p)
            .fold(0.0, f64::max);
        ap += p / 11.0;
    }
    Some(ap)
}

/// Relative error with a floor so that entries that are both essentially
/// zero do not count.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Largest relative error between analytic gradients of the combined loss
/// and central differences, with the supervision plan frozen at the center.
pub fn gradient_check(seed: u64, dims: ModelDims, proposals: usize, h: f64) -> f64 {
    let mut rng = rng(seed);
    let bag = random_bag(&mut rng, dims.num_classes, proposals, dims.feature_dim);
    let params = random_params(&mut rng, dims, 0.5);
    let cfg = OicrConfig {
        refinements: dims.refinements,
        ..OicrConfig::default()
    };
    let (_, grads, plan) = total_loss_with_plan(&bag, &params, &cfg, None).unwrap();
    let analytic = grads.flatten();
    let center = params.flatten();
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for i in 0..center.len() {
        let mut at = |x: f64| {
            let mut v = center.clone();
            v[i] = x;
            probe.assign_flat(&v);
            total_loss_with_plan(&bag, &probe, &cfg, Some(&plan))
                .unwrap()
                .0
                .total
        };
        let numeric = (at(center[i] + h) - at(center[i] - h)) / (2.0 * h);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    worst
}
