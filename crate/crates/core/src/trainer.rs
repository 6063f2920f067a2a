//! Deterministic mini-batch SGD over a dataset of bags.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::{init_model, sgd_update, ModelDims, ModelGrads, ModelParams, OptimConfig};
use crate::oicr::{total_loss, LossBreakdown, OicrConfig};
use crate::synthdata::Dataset;

pub const DEFAULT_ITERATIONS: usize = 3500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optim: OptimConfig,
    pub oicr: OicrConfig,
    /// Width of the two trunk layers.
    pub hidden: usize,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::with_iterations(DEFAULT_ITERATIONS)
    }
}

impl TrainConfig {
    /// Default solver settings for `total` iterations: lr 1e-3 for the first
    /// 4/7 of the run, then 1e-4.
    pub fn with_iterations(total: usize) -> Self {
        Self {
            optim: OptimConfig {
                lr_schedule: step_schedule(total, 1e-3, 1e-4),
                momentum: 0.9,
                weight_decay: 0.0005,
                batch_size: 2,
                total_iterations: total,
            },
            oicr: OicrConfig::default(),
            hidden: 64,
            seed: 0,
            log_every: 50,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        self.oicr.validate()?;
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be positive".into()));
        }
        Ok(())
    }
}

/// Two-step schedule with the first segment covering 4/7 of `total`.
pub fn step_schedule(total: usize, first_lr: f64, second_lr: f64) -> Vec<(usize, f64)> {
    let first = (total * 4 + 3) / 7;
    vec![(first, first_lr), (total - first, second_lr)]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    /// 1-based iteration count at which the row was taken.
    pub iter: usize,
    pub lr: f64,
    /// Batch-mean losses of that iteration.
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub refinements: usize,
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    /// CSV with header `iter,lr,loss_total,loss_base,loss_r1,loss_r2,loss_r3`.
    ///
    /// The three refinement columns are always present (empty when a stage
    /// does not exist); runs with more than three stages append extra columns.
    pub fn to_csv(&self) -> String {
        let stages = self.refinements.max(3);
        let mut out = String::from("iter,lr,loss_total,loss_base");
        for k in 1..=stages {
            write!(out, ",loss_r{k}").unwrap();
        }
        out.push('\n');
        for row in &self.rows {
            write!(
                out,
                "{},{},{},{}",
                row.iter, row.lr, row.loss.total, row.loss.base
            )
            .unwrap();
            for k in 0..stages {
                match row.loss.refine.get(k) {
                    Some(v) => write!(out, ",{v}").unwrap(),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.rows.iter().all(|r| r.loss.is_finite())
    }
}

/// Epoch-cyclic sampler: a fresh seeded permutation of the bag indices per
/// epoch, consumed in order.
struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    fn new(len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // stream 0 is used for weight initialization
        rng.set_stream(1);
        let mut s = Self {
            rng,
            order: (0..len).collect(),
            pos: 0,
        };
        s.order.shuffle(&mut s.rng);
        s
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

pub fn model_dims(ds: &Dataset, cfg: &TrainConfig) -> ModelDims {
    ModelDims {
        feature_dim: ds.feature_dim,
        hidden: cfg.hidden,
        num_classes: ds.num_classes,
        refinements: cfg.oicr.refinements,
    }
}

pub fn train_run(ds: &Dataset, cfg: &TrainConfig) -> Result<(ModelParams, TrainLog)> {
    let params = init_model(model_dims(ds, cfg), cfg.seed)?;
    train_from(ds, cfg, params)
}

/// Trains starting from the given parameters.
pub fn train_from(
    ds: &Dataset,
    cfg: &TrainConfig,
    mut params: ModelParams,
) -> Result<(ModelParams, TrainLog)> {
    cfg.validate()?;
    if ds.bags.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    if let Some(bag) = ds.bags.iter().find(|b| !b.has_positive()) {
        return Err(Error::NoPositiveLabel {
            image_id: bag.image_id,
        });
    }

    let opt = &cfg.optim;
    let mut sampler = BatchSampler::new(ds.bags.len(), cfg.seed);
    let mut log = TrainLog {
        refinements: cfg.oicr.refinements,
        rows: Vec::new(),
    };
    for it in 0..opt.total_iterations {
        let lr = opt.lr_at(it);
        let batch = sampler.next_batch(opt.batch_size);
        let mut grads = ModelGrads::zeros_like(&params);
        let mut mean = LossBreakdown {
            base: 0.0,
            refine: vec![0.0; cfg.oicr.refinements],
            total: 0.0,
        };
        for &i in &batch {
            let bag = &ds.bags[i];
            let (loss, g) = total_loss(bag, &params, &cfg.oicr)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    iteration: it + 1,
                    image_id: bag.image_id,
                });
            }
            grads.add_assign(&g);
            mean.base += loss.base;
            mean.total += loss.total;
            for (m, v) in mean.refine.iter_mut().zip(&loss.refine) {
                *m += v;
            }
        }
        let scale = 1.0 / batch.len() as f64;
        grads.scale(scale);
        mean.base *= scale;
        mean.total *= scale;
        mean.refine.iter_mut().for_each(|v| *v *= scale);

        sgd_update(&mut params, &grads, lr, opt.momentum, opt.weight_decay);

        if (it + 1) % cfg.log_every == 0 {
            log.rows.push(LogRow {
                iter: it + 1,
                lr,
                loss: mean,
            });
        }
    }
    Ok((params, log))
}
