//! Train-and-evaluate grids over refinement count, loss weighting and the
//! supervision IoU threshold.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::eval::{evaluate, EvalConfig, ScoreSource};
use crate::netcore::ModelParams;
use crate::synthdata::Dataset;
use crate::trainer::{train_run, TrainConfig, TrainLog};

pub const REFINEMENT_COUNTS: [usize; 4] = [0, 1, 2, 3];
pub const IOU_THRESHOLDS: [f64; 5] = [0.3, 0.4, 0.5, 0.6, 0.7];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    /// K in 0..=3, weighted loss, threshold 0.5.
    Refinements,
    /// Weighted vs. unweighted loss at K = 3, threshold 0.5.
    Loss,
    /// Threshold sweep at K = 3 with the weighted loss.
    IouThreshold,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub refinements: usize,
    pub weighted: bool,
    pub iou_threshold: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: Cell,
    pub map: f64,
    pub corloc: f64,
}

/// Cells for the requested axes, de-duplicated, in axis order, repeated per
/// seed.
pub fn grid(axes: &[Axis], seeds: &[u64]) -> Vec<Cell> {
    let mut base: Vec<(usize, bool, f64)> = Vec::new();
    for axis in axes {
        let cells: Vec<(usize, bool, f64)> = match axis {
            Axis::Refinements => REFINEMENT_COUNTS.iter().map(|&k| (k, true, 0.5)).collect(),
            Axis::Loss => vec![(3, true, 0.5), (3, false, 0.5)],
            Axis::IouThreshold => IOU_THRESHOLDS.iter().map(|&t| (3, true, t)).collect(),
        };
        for c in cells {
            if !base.contains(&c) {
                base.push(c);
            }
        }
    }
    seeds
        .iter()
        .flat_map(|&seed| {
            base.iter()
                .map(move |&(refinements, weighted, iou_threshold)| Cell {
                    refinements,
                    weighted,
                    iou_threshold,
                    seed,
                })
        })
        .collect()
}

/// Training config for a cell, derived from `base`.
pub fn cell_config(cell: &Cell, base: &TrainConfig) -> TrainConfig {
    let mut cfg = base.clone();
    cfg.seed = cell.seed;
    cfg.oicr.refinements = cell.refinements;
    cfg.oicr.weighted_loss = cell.weighted;
    cfg.oicr.iou_threshold = cell.iou_threshold;
    cfg
}

/// K = 0 means the plain MIDN: trained on the image loss alone and scored
/// with its own proposal scores.
pub fn cell_eval_config(cell: &Cell, base: &EvalConfig) -> EvalConfig {
    EvalConfig {
        source: if cell.refinements == 0 {
            ScoreSource::Midn
        } else {
            ScoreSource::Refined
        },
        ..*base
    }
}

/// Trains one cell on `train`, reports mAP on `test` and CorLoc on `train`.
pub fn run_cell(
    train: &Dataset,
    test: &Dataset,
    cell: &Cell,
    base: &TrainConfig,
    eval_cfg: &EvalConfig,
) -> Result<(CellResult, ModelParams, TrainLog)> {
    let cfg = cell_config(cell, base);
    let (params, log) = train_run(train, &cfg)?;
    let report = evaluate(test, train, &params, &cell_eval_config(cell, eval_cfg))?;
    Ok((
        CellResult {
            cell: *cell,
            map: report.map,
            corloc: report.mean_corloc,
        },
        params,
        log,
    ))
}

/// CSV `K,weighted,I_t,seed,mAP,CorLoc`.
pub fn to_csv(results: &[CellResult]) -> String {
    let mut out = String::from("K,weighted,I_t,seed,mAP,CorLoc\n");
    for r in results {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.cell.refinements,
            r.cell.weighted as u8,
            r.cell.iou_threshold,
            r.cell.seed,
            r.map,
            r.corloc
        )
        .unwrap();
    }
    out
}
