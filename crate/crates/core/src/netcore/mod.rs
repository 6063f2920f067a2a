//! Dense layers with analytic gradients, directional softmaxes, parameter
//! initialization and SGD with momentum.
//!
//! Matrices follow a "one column per proposal" layout: a layer maps an
//! `in x N` input to an `out x N` output.

pub mod checkpoint;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Standard deviation of the zero-mean Gaussian used for head weights.
pub const INIT_STD: f64 = 0.01;

/// Affine layer `out = W in + b` with momentum buffers for SGD.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub weights_velocity: Array2<f64>,
    pub bias_velocity: Array1<f64>,
}

/// Gradient of a scalar with respect to one [`DenseLayer`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl DenseLayer {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self::from_parts(Array2::zeros((out_dim, in_dim)), Array1::zeros(out_dim))
    }

    pub fn from_parts(weights: Array2<f64>, bias: Array1<f64>) -> Self {
        assert_eq!(
            weights.nrows(),
            bias.len(),
            "bias length must match output dim"
        );
        let (o, i) = weights.dim();
        Self {
            weights,
            bias,
            weights_velocity: Array2::zeros((o, i)),
            bias_velocity: Array1::zeros(o),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn apply(&self, input: ArrayView2<f64>) -> Array2<f64> {
        dense_apply(self, input)
    }

    /// One SGD step: `v = momentum v + g + wd p`, then `p -= lr v`.
    pub fn sgd_step(&mut self, grad: &LayerGrad, lr: f64, momentum: f64, weight_decay: f64) {
        Zip::from(&mut self.weights)
            .and(&mut self.weights_velocity)
            .and(&grad.weights)
            .for_each(|p, v, &g| {
                *v = momentum * *v + g + weight_decay * *p;
                *p -= lr * *v;
            });
        Zip::from(&mut self.bias)
            .and(&mut self.bias_velocity)
            .and(&grad.bias)
            .for_each(|p, v, &g| {
                *v = momentum * *v + g + weight_decay * *p;
                *p -= lr * *v;
            });
    }

    fn is_finite(&self) -> bool {
        self.weights
            .iter()
            .chain(self.bias.iter())
            .all(|v| v.is_finite())
    }
}

impl LayerGrad {
    pub fn zeros_like(layer: &DenseLayer) -> Self {
        Self {
            weights: Array2::zeros(layer.weights.raw_dim()),
            bias: Array1::zeros(layer.bias.raw_dim()),
        }
    }

    pub fn add_assign(&mut self, other: &LayerGrad) {
        self.weights += &other.weights;
        self.bias += &other.bias;
    }

    pub fn scale(&mut self, factor: f64) {
        self.weights *= factor;
        self.bias *= factor;
    }
}

/// `W input + b`, bias broadcast over columns.
pub fn dense_apply(layer: &DenseLayer, input: ArrayView2<f64>) -> Array2<f64> {
    assert_eq!(
        input.nrows(),
        layer.in_dim(),
        "dense_apply: input rows != layer in_dim"
    );
    let mut out = layer.weights.dot(&input);
    out += &layer.bias.view().insert_axis(Axis(1));
    out
}

/// Returns `(grad_weights, grad_bias, grad_input)` for an upstream gradient
/// with the shape of the layer output.
pub fn dense_grad(
    layer: &DenseLayer,
    input: ArrayView2<f64>,
    upstream: ArrayView2<f64>,
) -> (LayerGrad, Array2<f64>) {
    assert_eq!(
        input.nrows(),
        layer.in_dim(),
        "dense_grad: input rows != layer in_dim"
    );
    assert_eq!(
        upstream.nrows(),
        layer.out_dim(),
        "dense_grad: upstream rows != layer out_dim"
    );
    assert_eq!(
        input.ncols(),
        upstream.ncols(),
        "dense_grad: column count mismatch"
    );
    let grad = LayerGrad {
        weights: upstream.dot(&input.t()),
        bias: upstream.sum_axis(Axis(1)),
    };
    let grad_input = layer.weights.t().dot(&upstream);
    (grad, grad_input)
}

/// Elementwise `max(x, 0)`; NaN passes through so bad inputs surface in the
/// loss.
pub fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| if v < 0.0 { 0.0 } else { v })
}

/// Gradient through ReLU given the pre-activation.
pub fn relu_backward(pre: &Array2<f64>, upstream: &Array2<f64>) -> Array2<f64> {
    let mut out = upstream.clone();
    Zip::from(&mut out).and(pre).for_each(|g, &z| {
        if z <= 0.0 {
            *g = 0.0;
        }
    });
    out
}

fn softmax_along(x: ArrayView2<f64>, axis: Axis) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut lane in out.lanes_mut(axis) {
        let max = lane.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        lane.mapv_inplace(|v| (v - max).exp());
        let sum = lane.sum();
        lane /= sum;
    }
    out
}

fn softmax_backward_along(s: &Array2<f64>, upstream: &Array2<f64>, axis: Axis) -> Array2<f64> {
    let mut out = Array2::zeros(s.raw_dim());
    Zip::from(out.lanes_mut(axis))
        .and(s.lanes(axis))
        .and(upstream.lanes(axis))
        .for_each(|mut o, s, g| {
            let dot = s.dot(&g);
            Zip::from(&mut o).and(&s).and(&g).for_each(|o, &s, &g| {
                *o = s * (g - dot);
            });
        });
    out
}

/// Softmax over classes: each column (one proposal) sums to 1.
pub fn softmax_columns(x: ArrayView2<f64>) -> Array2<f64> {
    softmax_along(x, Axis(0))
}

/// Softmax over proposals: each row (one class) sums to 1.
pub fn softmax_rows(x: ArrayView2<f64>) -> Array2<f64> {
    softmax_along(x, Axis(1))
}

/// Vector-Jacobian product of [`softmax_columns`] given its output `s`.
pub fn softmax_columns_backward(s: &Array2<f64>, upstream: &Array2<f64>) -> Array2<f64> {
    softmax_backward_along(s, upstream, Axis(0))
}

/// Vector-Jacobian product of [`softmax_rows`] given its output `s`.
pub fn softmax_rows_backward(s: &Array2<f64>, upstream: &Array2<f64>) -> Array2<f64> {
    softmax_backward_along(s, upstream, Axis(1))
}

/// Network shape. `refinements` is the number of refined classifiers K.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub feature_dim: usize,
    pub hidden: usize,
    pub num_classes: usize,
    pub refinements: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.hidden == 0 {
            return Err(Error::Config(
                "feature_dim and hidden must be positive".into(),
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        Ok(())
    }
}

/// All trainable weights: a two-layer ReLU trunk, the two MIDN streams and
/// one `(C+1)`-way classifier per refinement stage.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub trunk: [DenseLayer; 2],
    pub stream_c: DenseLayer,
    pub stream_d: DenseLayer,
    pub refine: Vec<DenseLayer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub trunk: [LayerGrad; 2],
    pub stream_c: LayerGrad,
    pub stream_d: LayerGrad,
    pub refine: Vec<LayerGrad>,
}

impl ModelParams {
    pub fn dims(&self) -> ModelDims {
        ModelDims {
            feature_dim: self.trunk[0].in_dim(),
            hidden: self.trunk[0].out_dim(),
            num_classes: self.stream_c.out_dim(),
            refinements: self.refine.len(),
        }
    }

    /// Layers in their canonical order: trunk, streams, refinement stages.
    pub fn layers(&self) -> impl Iterator<Item = &DenseLayer> {
        self.trunk
            .iter()
            .chain([&self.stream_c, &self.stream_d])
            .chain(self.refine.iter())
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut DenseLayer> {
        self.trunk
            .iter_mut()
            .chain([&mut self.stream_c, &mut self.stream_d])
            .chain(self.refine.iter_mut())
    }

    pub fn num_params(&self) -> usize {
        self.layers().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Weights then bias of every layer, in canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in self.layers() {
            out.extend(l.weights.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn assign_flat(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.num_params());
        let mut it = values.iter();
        for l in self.layers_mut() {
            for (p, v) in l.weights.iter_mut().chain(l.bias.iter_mut()).zip(&mut it) {
                *p = *v;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers().all(DenseLayer::is_finite)
    }

    /// Same weights, momentum buffers cleared.
    pub fn without_velocity(&self) -> Self {
        let mut out = self.clone();
        for l in out.layers_mut() {
            l.weights_velocity.fill(0.0);
            l.bias_velocity.fill(0.0);
        }
        out
    }
}

impl ModelGrads {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            trunk: [
                LayerGrad::zeros_like(&params.trunk[0]),
                LayerGrad::zeros_like(&params.trunk[1]),
            ],
            stream_c: LayerGrad::zeros_like(&params.stream_c),
            stream_d: LayerGrad::zeros_like(&params.stream_d),
            refine: params.refine.iter().map(LayerGrad::zeros_like).collect(),
        }
    }

    pub fn layers(&self) -> impl Iterator<Item = &LayerGrad> {
        self.trunk
            .iter()
            .chain([&self.stream_c, &self.stream_d])
            .chain(self.refine.iter())
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut LayerGrad> {
        self.trunk
            .iter_mut()
            .chain([&mut self.stream_c, &mut self.stream_d])
            .chain(self.refine.iter_mut())
    }

    pub fn add_assign(&mut self, other: &ModelGrads) {
        for (a, b) in self.layers_mut().zip(other.layers()) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.layers_mut() {
            g.scale(factor);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in self.layers() {
            out.extend(g.weights.iter());
            out.extend(g.bias.iter());
        }
        out
    }
}

/// Head weights (both MIDN streams and every refinement stage) are drawn
/// from N(0, 0.01^2); trunk weights use He scaling, N(0, 2 / fan_in), since
/// the trunk is trained from scratch. Biases and momentum buffers start at
/// zero. The generator is ChaCha8 seeded by `seed`.
///
/// Draw order is trunk, `stream_c`, `stream_d`, then refinement stages, so
/// models that differ only in K share every other initial weight.
pub fn init_model(dims: ModelDims, seed: u64) -> Result<ModelParams> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layer = |out_dim: usize, in_dim: usize, std: f64, rng: &mut ChaCha8Rng| {
        let normal = Normal::new(0.0, std).expect("valid std");
        let w = Array2::from_shape_simple_fn((out_dim, in_dim), || normal.sample(rng));
        DenseLayer::from_parts(w, Array1::zeros(out_dim))
    };
    let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
    let trunk = [
        layer(
            dims.hidden,
            dims.feature_dim,
            he(dims.feature_dim),
            &mut rng,
        ),
        layer(dims.hidden, dims.hidden, he(dims.hidden), &mut rng),
    ];
    let stream_c = layer(dims.num_classes, dims.hidden, INIT_STD, &mut rng);
    let stream_d = layer(dims.num_classes, dims.hidden, INIT_STD, &mut rng);
    let refine = (0..dims.refinements)
        .map(|_| layer(dims.num_classes + 1, dims.hidden, INIT_STD, &mut rng))
        .collect();
    Ok(ModelParams {
        trunk,
        stream_c,
        stream_d,
        refine,
    })
}

/// Solver settings. `lr_schedule` is a list of `(iterations, lr)` segments
/// applied in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr_schedule: Vec<(usize, f64)>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub total_iterations: usize,
}

impl OptimConfig {
    /// Learning rate for a 0-based iteration index.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        let mut start = 0;
        for &(count, lr) in &self.lr_schedule {
            if iteration < start + count {
                return lr;
            }
            start += count;
        }
        self.lr_schedule.last().map_or(0.0, |&(_, lr)| lr)
    }

    pub fn validate(&self) -> Result<()> {
        let covered: usize = self.lr_schedule.iter().map(|&(n, _)| n).sum();
        if covered < self.total_iterations {
            return Err(Error::Config(format!(
                "learning rate schedule covers {covered} iterations, need {}",
                self.total_iterations
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let bad = |v: f64| !v.is_finite() || v < 0.0;
        if bad(self.momentum)
            || bad(self.weight_decay)
            || self.lr_schedule.iter().any(|&(_, lr)| bad(lr))
        {
            return Err(Error::Config(
                "momentum, weight decay and learning rates must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

pub fn sgd_update(
    params: &mut ModelParams,
    grads: &ModelGrads,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    for (layer, grad) in params.layers_mut().zip(grads.layers()) {
        layer.sgd_step(grad, lr, momentum, weight_decay);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array};
    use proptest::prelude::*;
    use rand::Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-scale..scale))
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let layer = DenseLayer::from_parts(Array2::eye(3), Array1::zeros(3));
        let x = array![[1.0, -2.0], [0.5, 3.0], [7.0, 0.0]];
        assert_eq!(layer.apply(x.view()), x);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = DenseLayer::from_parts(random_matrix(&mut rng, 5, 4, 1.0), Array1::ones(5));
        let x = random_matrix(&mut rng, 4, 3, 1.0);
        let (g, gi) = dense_grad(&layer, x.view(), Array2::zeros((5, 3)).view());
        assert!(g
            .weights
            .iter()
            .chain(g.bias.iter())
            .chain(gi.iter())
            .all(|&v| v == 0.0));
    }

    /// Central differences of `sum(upstream * dense_apply(layer, x))`.
    #[test]
    fn dense_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layer = DenseLayer::from_parts(
            random_matrix(&mut rng, 5, 4, 1.0),
            Array::from_shape_simple_fn(5, || rng.random_range(-1.0..1.0)),
        );
        let x = random_matrix(&mut rng, 4, 6, 1.0);
        let up = random_matrix(&mut rng, 5, 6, 1.0);
        let objective = |l: &DenseLayer, x: &Array2<f64>| (&l.apply(x.view()) * &up).sum();
        let (g, gi) = dense_grad(&layer, x.view(), up.view());
        let h = 1e-4;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-12);

        for idx in ndarray::indices(layer.weights.dim()) {
            let (mut p, mut m) = (layer.clone(), layer.clone());
            p.weights[idx] += h;
            m.weights[idx] -= h;
            let num = (objective(&p, &x) - objective(&m, &x)) / (2.0 * h);
            assert!(rel(g.weights[idx], num) < 1e-5, "weight {idx:?}");
        }
        for i in 0..5 {
            let (mut p, mut m) = (layer.clone(), layer.clone());
            p.bias[i] += h;
            m.bias[i] -= h;
            let num = (objective(&p, &x) - objective(&m, &x)) / (2.0 * h);
            assert!(rel(g.bias[i], num) < 1e-5, "bias {i}");
        }
        for idx in ndarray::indices(x.dim()) {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[idx] += h;
            xm[idx] -= h;
            let num = (objective(&layer, &xp) - objective(&layer, &xm)) / (2.0 * h);
            assert!(rel(gi[idx], num) < 1e-5, "input {idx:?}");
        }
    }

    #[test]
    fn softmax_examples() {
        let z = Array2::<f64>::zeros((2, 2));
        assert!(softmax_columns(z.view()).iter().all(|&v| v == 0.5));
        assert!(softmax_rows(z.view()).iter().all(|&v| v == 0.5));

        let col = array![[1f64.ln()], [2f64.ln()], [3f64.ln()]];
        let s = softmax_columns(col.view());
        for (got, want) in s.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((got - want).abs() < 1e-15);
        }
        let s = softmax_rows(col.t());
        for (got, want) in s.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_matrix(&mut rng, 4, 5, 3.0);
        let shifted = &x + 1000.0;
        for f in [softmax_columns, softmax_rows] {
            let a = f(x.view());
            let b = f(shifted.view());
            assert!(a.iter().zip(&b).all(|(p, q)| (p - q).abs() < 1e-12));
        }
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_matrix(&mut rng, 3, 4, 2.0);
        let up = random_matrix(&mut rng, 3, 4, 1.0);
        let h = 1e-4;
        type Fwd = fn(ArrayView2<f64>) -> Array2<f64>;
        type Bwd = fn(&Array2<f64>, &Array2<f64>) -> Array2<f64>;
        let pairs: [(Fwd, Bwd); 2] = [
            (softmax_columns, softmax_columns_backward),
            (softmax_rows, softmax_rows_backward),
        ];
        for (fwd, bwd) in pairs {
            let analytic = bwd(&fwd(x.view()), &up);
            for idx in ndarray::indices(x.dim()) {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[idx] += h;
                xm[idx] -= h;
                let num =
                    ((&fwd(xp.view()) * &up).sum() - (&fwd(xm.view()) * &up).sum()) / (2.0 * h);
                let a = analytic[idx];
                assert!((a - num).abs() / a.abs().max(num.abs()).max(1e-12) < 1e-4);
            }
        }
    }

    #[test]
    fn relu_backward_masks_non_positive() {
        let pre = array![[-1.0, 0.0, 2.0]];
        let up = array![[5.0, 5.0, 5.0]];
        assert_eq!(relu_backward(&pre, &up), array![[0.0, 0.0, 5.0]]);
        assert_eq!(relu(&pre), array![[0.0, 0.0, 2.0]]);
    }

    fn dims() -> ModelDims {
        ModelDims {
            feature_dim: 8,
            hidden: 6,
            num_classes: 3,
            refinements: 2,
        }
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = init_model(dims(), 11).unwrap();
        let b = init_model(dims(), 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_model(dims(), 12).unwrap());
        for l in a.layers() {
            assert!(l.bias.iter().all(|&v| v == 0.0));
            assert!(l.weights_velocity.iter().all(|&v| v == 0.0));
        }
        assert_eq!(a.refine.len(), 2);
        assert_eq!(a.refine[0].out_dim(), 4);
        assert_eq!(a.dims(), dims());
    }

    #[test]
    fn init_rejects_single_class() {
        let d = ModelDims {
            num_classes: 1,
            ..dims()
        };
        assert!(init_model(d, 0).is_err());
    }

    fn sample_std(w: &[f64]) -> f64 {
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64;
        var.sqrt()
    }

    #[test]
    fn head_weight_std_is_point_zero_one() {
        let d = ModelDims {
            feature_dim: 8,
            hidden: 1000,
            num_classes: 100,
            refinements: 0,
        };
        let p = init_model(d, 5).unwrap();
        let w: Vec<f64> = p.stream_c.weights.iter().copied().collect();
        assert_eq!(w.len(), 100_000);
        let std = sample_std(&w);
        assert!((0.0095..=0.0105).contains(&std), "std {std}");
    }

    #[test]
    fn trunk_weights_use_he_scaling() {
        let d = ModelDims {
            feature_dim: 50,
            hidden: 2000,
            num_classes: 2,
            refinements: 0,
        };
        let p = init_model(d, 5).unwrap();
        let w: Vec<f64> = p.trunk[0].weights.iter().copied().collect();
        let expected = (2.0f64 / 50.0).sqrt();
        assert!((sample_std(&w) / expected - 1.0).abs() < 0.02);
    }

    #[test]
    fn init_shares_weights_across_refinement_counts() {
        let a = init_model(dims(), 3).unwrap();
        let b = init_model(
            ModelDims {
                refinements: 0,
                ..dims()
            },
            3,
        )
        .unwrap();
        assert_eq!(a.trunk, b.trunk);
        assert_eq!(a.stream_d, b.stream_d);
    }

    fn one_layer_model(w: f64) -> (ModelParams, ModelGrads) {
        let mut p = init_model(
            ModelDims {
                feature_dim: 1,
                hidden: 1,
                num_classes: 2,
                refinements: 0,
            },
            0,
        )
        .unwrap();
        for l in p.layers_mut() {
            l.weights.fill(w);
        }
        let g = ModelGrads::zeros_like(&p);
        (p, g)
    }

    #[test]
    fn sgd_zero_grad_is_noop() {
        let (mut p, g) = one_layer_model(0.3);
        let before = p.clone();
        sgd_update(&mut p, &g, 0.1, 0.9, 0.0);
        assert_eq!(p, before);
    }

    #[test]
    fn sgd_plain_step() {
        let (mut p, mut g) = one_layer_model(1.0);
        for l in g.layers_mut() {
            l.weights.fill(2.0);
        }
        sgd_update(&mut p, &g, 0.1, 0.0, 0.0);
        for l in p.layers() {
            assert!(l.weights.iter().all(|&v| (v - 0.8).abs() < 1e-15));
        }
    }

    #[test]
    fn sgd_momentum_two_steps() {
        // v1 = g, v2 = 0.9 g + g; total change = 2.9 g
        let (mut p, mut g) = one_layer_model(0.0);
        for l in g.layers_mut() {
            l.weights.fill(1.5);
        }
        sgd_update(&mut p, &g, 1.0, 0.9, 0.0);
        sgd_update(&mut p, &g, 1.0, 0.9, 0.0);
        for l in p.layers() {
            assert!(l.weights.iter().all(|&v| (v + 2.9 * 1.5).abs() < 1e-12));
        }
    }

    #[test]
    fn weight_decay_enters_velocity() {
        let (mut p, g) = one_layer_model(2.0);
        sgd_update(&mut p, &g, 0.5, 0.0, 0.1);
        for l in p.layers() {
            assert!(l
                .weights
                .iter()
                .all(|&v| (v - (2.0 - 0.5 * 0.2)).abs() < 1e-15));
        }
    }

    #[test]
    fn lr_schedule_is_piecewise_constant() {
        let cfg = OptimConfig {
            lr_schedule: vec![(4, 1e-3), (3, 1e-4)],
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 2,
            total_iterations: 7,
        };
        cfg.validate().unwrap();
        let lrs: Vec<f64> = (0..7).map(|i| cfg.lr_at(i)).collect();
        assert_eq!(lrs, vec![1e-3, 1e-3, 1e-3, 1e-3, 1e-4, 1e-4, 1e-4]);
        let short = OptimConfig {
            total_iterations: 8,
            ..cfg
        };
        assert!(short.validate().is_err());
    }

    #[test]
    fn flatten_roundtrip() {
        let p = init_model(dims(), 9).unwrap();
        let flat = p.flatten();
        assert_eq!(flat.len(), p.num_params());
        let mut q = init_model(dims(), 10).unwrap();
        q.assign_flat(&flat);
        assert_eq!(p, q);
    }

    proptest! {
        #[test]
        fn softmax_lanes_sum_to_one(vals in prop::collection::vec(-50.0..50.0f64, 12)) {
            let x = Array2::from_shape_vec((3, 4), vals).unwrap();
            for s in softmax_columns(x.view()).columns() {
                prop_assert!((s.sum() - 1.0).abs() < 1e-6);
            }
            for s in softmax_rows(x.view()).rows() {
                prop_assert!((s.sum() - 1.0).abs() < 1e-6);
            }
        }
    }
}
