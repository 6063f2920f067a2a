//! Online instance classifier refinement.
//!
//! Each refinement stage is a `(C+1)`-way classifier (last row = background)
//! whose per-proposal targets are derived from the previous stage's scores:
//! the top proposal for every positive class and everything overlapping it by
//! more than `iou_threshold` take that class, the rest is background. Targets
//! and loss weights are recomputed every forward pass and treated as
//! constants when differentiating.

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::midn::{loss_base, midn_backward, midn_forward, MidnOutput};
use crate::netcore::{dense_grad, relu, relu_backward, softmax_columns, ModelGrads, ModelParams};
use crate::synthdata::Bag;

/// Floor applied to refined probabilities inside the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OicrConfig {
    /// Number of refined classifiers K.
    pub refinements: usize,
    /// IoU above which a proposal inherits the top proposal's class.
    pub iou_threshold: f64,
    /// Scale each proposal's refinement loss by its supervision weight.
    pub weighted_loss: bool,
}

impl Default for OicrConfig {
    fn default() -> Self {
        Self {
            refinements: 3,
            iou_threshold: 0.5,
            weighted_loss: true,
        }
    }
}

impl OicrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(Error::Config(format!(
                "iou_threshold must lie in (0, 1), got {}",
                self.iou_threshold
            )));
        }
        Ok(())
    }
}

/// Refined classifier outputs, one `(C+1) x |R|` matrix per stage.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineOutput {
    pub logits: Vec<Array2<f64>>,
    /// Softmax over the `C+1` classes of every proposal.
    pub probs: Vec<Array2<f64>>,
}

/// Targets for one refinement stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSupervision {
    /// Row index of the target class per proposal; `C` is background.
    pub labels: Vec<usize>,
    pub weights: Vec<f64>,
}

impl StageSupervision {
    /// Labels as a `(C+1) x |R|` one-hot matrix.
    pub fn one_hot(&self, num_classes: usize) -> Array2<f64> {
        let mut m = Array2::zeros((num_classes + 1, self.labels.len()));
        for (r, &c) in self.labels.iter().enumerate() {
            m[[c, r]] = 1.0;
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SupervisionPlan {
    pub stages: Vec<StageSupervision>,
}

pub fn refine_forward(
    trunk_features: ArrayView2<f64>,
    params: &ModelParams,
    k: usize,
) -> RefineOutput {
    assert!(
        k <= params.refine.len(),
        "model has only {} refinement branches",
        params.refine.len()
    );
    let logits: Vec<_> = params.refine[..k]
        .iter()
        .map(|l| l.apply(trunk_features))
        .collect();
    let probs = logits.iter().map(|z| softmax_columns(z.view())).collect();
    RefineOutput { logits, probs }
}

/// Index of the highest score in row `class_row`; ties go to the lowest index.
pub fn top_proposal(scores: ArrayView2<f64>, class_row: usize) -> usize {
    let row = scores.row(class_row);
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Builds refinement targets from stage scores `x^R0 .. x^R(K-1)`.
///
/// `stage_scores[k]` must have at least `C` rows; only the class rows are
/// searched. Comparisons are strict: an IoU equal to the threshold stays
/// background and a proposal tied between two classes keeps the earlier one.
pub fn generate_supervision(
    proposals: &[BBox],
    labels: &[bool],
    stage_scores: &[ArrayView2<f64>],
    iou_threshold: f64,
) -> Result<SupervisionPlan> {
    let num_classes = labels.len();
    if !stage_scores.is_empty() && !labels.iter().any(|&y| y) {
        return Err(Error::NoPositiveLabel { image_id: 0 });
    }
    let n = proposals.len();
    let stages = stage_scores
        .iter()
        .map(|scores| {
            assert_eq!(scores.ncols(), n, "score columns must match proposals");
            assert!(scores.nrows() >= num_classes);
            let mut best_iou = vec![f64::NEG_INFINITY; n];
            let mut stage = StageSupervision {
                labels: vec![num_classes; n],
                weights: vec![0.0; n],
            };
            for c in (0..num_classes).filter(|&c| labels[c]) {
                let top = top_proposal(scores.view(), c);
                let top_score = scores[[c, top]];
                for r in 0..n {
                    let overlap = iou(&proposals[r], &proposals[top]);
                    if overlap > best_iou[r] {
                        best_iou[r] = overlap;
                        stage.weights[r] = top_score;
                        if overlap > iou_threshold {
                            stage.labels[r] = c;
                        }
                    }
                }
            }
            stage
        })
        .collect();
    Ok(SupervisionPlan { stages })
}

/// Mean (optionally weighted) cross entropy of one refinement stage, with
/// its gradient with respect to the stage logits.
pub fn loss_refine(
    probs: &Array2<f64>,
    target: &StageSupervision,
    weighted: bool,
) -> (f64, Array2<f64>) {
    let n = probs.ncols();
    assert_eq!(target.labels.len(), n);
    let mut grad = Array2::zeros(probs.raw_dim());
    let mut loss = 0.0;
    for r in 0..n {
        let w = if weighted { target.weights[r] } else { 1.0 };
        let c = target.labels[r];
        let p = probs[[c, r]];
        loss -= w * p.max(PROB_FLOOR).ln();
        if p >= PROB_FLOOR {
            let scale = w / n as f64;
            let mut col = grad.column_mut(r);
            col.assign(&probs.column(r));
            col[c] -= 1.0;
            col *= scale;
        }
    }
    (loss / n as f64, grad)
}

/// Cached activations of one forward pass over a bag.
#[derive(Debug, Clone)]
pub struct ForwardState {
    /// Input features, `D x |R|`.
    pub input: Array2<f64>,
    pub pre1: Array2<f64>,
    pub act1: Array2<f64>,
    pub pre2: Array2<f64>,
    /// Shared trunk output, `H x |R|`.
    pub trunk: Array2<f64>,
    pub midn: MidnOutput,
    pub refine: RefineOutput,
}

impl ForwardState {
    /// Class scores of stage `k`: `x^R0` for k = 0, the class rows of the
    /// k-th refined classifier otherwise.
    pub fn stage_scores(&self, k: usize) -> ArrayView2<'_, f64> {
        if k == 0 {
            self.midn.x_r0.view()
        } else {
            let c = self.midn.x_r0.nrows();
            self.refine.probs[k - 1].slice(s![..c, ..])
        }
    }

    pub fn num_refinements(&self) -> usize {
        self.refine.probs.len()
    }
}

/// Runs trunk, MIDN head and every refinement branch on a `D x |R|` input.
pub fn network_forward(input: Array2<f64>, params: &ModelParams) -> Result<ForwardState> {
    let pre1 = params.trunk[0].apply(input.view());
    let act1 = relu(&pre1);
    let pre2 = params.trunk[1].apply(act1.view());
    let trunk = relu(&pre2);
    let midn = midn_forward(trunk.view(), params)?;
    let refine = refine_forward(trunk.view(), params, params.refine.len());
    Ok(ForwardState {
        input,
        pre1,
        act1,
        pre2,
        trunk,
        midn,
        refine,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub base: f64,
    pub refine: Vec<f64>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.base.is_finite() && self.refine.iter().all(|v| v.is_finite())
    }
}

/// Supervision for every refinement stage of a forward pass.
pub fn supervision_for(
    state: &ForwardState,
    proposals: &[BBox],
    labels: &[bool],
    cfg: &OicrConfig,
) -> Result<SupervisionPlan> {
    let scores: Vec<_> = (0..state.num_refinements())
        .map(|k| state.stage_scores(k))
        .collect();
    generate_supervision(proposals, labels, &scores, cfg.iou_threshold)
}

/// Loss and gradients for a forward pass under a given plan.
pub fn loss_and_grads(
    state: &ForwardState,
    labels: &[bool],
    plan: &SupervisionPlan,
    params: &ModelParams,
    cfg: &OicrConfig,
) -> (LossBreakdown, ModelGrads) {
    let mut grads = ModelGrads::zeros_like(params);
    let (base, dphi) = loss_base(&state.midn.phi, labels);
    let (g_c, g_d, mut d_trunk) = midn_backward(&state.midn, state.trunk.view(), params, &dphi);
    grads.stream_c = g_c;
    grads.stream_d = g_d;

    let mut refine_losses = Vec::with_capacity(plan.stages.len());
    for (k, stage) in plan.stages.iter().enumerate() {
        let (loss, dlogits) = loss_refine(&state.refine.probs[k], stage, cfg.weighted_loss);
        let (g, din) = dense_grad(&params.refine[k], state.trunk.view(), dlogits.view());
        grads.refine[k] = g;
        d_trunk += &din;
        refine_losses.push(loss);
    }

    let dpre2 = relu_backward(&state.pre2, &d_trunk);
    let (g1, dact1) = dense_grad(&params.trunk[1], state.act1.view(), dpre2.view());
    let dpre1 = relu_backward(&state.pre1, &dact1);
    let (g0, _) = dense_grad(&params.trunk[0], state.input.view(), dpre1.view());
    grads.trunk = [g0, g1];

    let total = base + refine_losses.iter().sum::<f64>();
    (
        LossBreakdown {
            base,
            refine: refine_losses,
            total,
        },
        grads,
    )
}

/// Combined objective of one bag, differentiated with the supervision plan
/// held fixed. Passing `plan` overrides the plan computed from this forward
/// pass; the plan actually used is returned.
pub fn total_loss_with_plan(
    bag: &Bag,
    params: &ModelParams,
    cfg: &OicrConfig,
    plan: Option<&SupervisionPlan>,
) -> Result<(LossBreakdown, ModelGrads, SupervisionPlan)> {
    if cfg.refinements != params.refine.len() {
        return Err(Error::Config(format!(
            "config asks for {} refinements, model has {}",
            cfg.refinements,
            params.refine.len()
        )));
    }
    let state = network_forward(bag.feature_matrix(), params)?;
    let plan = match plan {
        Some(p) => p.clone(),
        None => supervision_for(&state, &bag.proposals, &bag.labels, cfg).map_err(|e| match e {
            Error::NoPositiveLabel { .. } => Error::NoPositiveLabel {
                image_id: bag.image_id,
            },
            other => other,
        })?,
    };
    let (loss, grads) = loss_and_grads(&state, &bag.labels, &plan, params, cfg);
    Ok((loss, grads, plan))
}

pub fn total_loss(
    bag: &Bag,
    params: &ModelParams,
    cfg: &OicrConfig,
) -> Result<(LossBreakdown, ModelGrads)> {
    let (loss, grads, _) = total_loss_with_plan(bag, params, cfg, None)?;
    Ok((loss, grads))
}
