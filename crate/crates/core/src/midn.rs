//! Two-stream multiple instance detection head and its image-level loss.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::netcore::{
    dense_grad, softmax_columns, softmax_columns_backward, softmax_rows, softmax_rows_backward,
    LayerGrad, ModelParams,
};

/// Clamp applied to image scores before taking logarithms.
pub const PHI_EPS: f64 = 1e-6;

/// Forward activations of the MIDN head. All matrices are `C x |R|`.
#[derive(Debug, Clone, PartialEq)]
pub struct MidnOutput {
    pub x_c: Array2<f64>,
    pub x_d: Array2<f64>,
    /// Classification stream, softmax over classes (columns sum to 1).
    pub s_c: Array2<f64>,
    /// Detection stream, softmax over proposals (rows sum to 1).
    pub s_d: Array2<f64>,
    /// Proposal scores `s_c * s_d`.
    pub x_r0: Array2<f64>,
    /// Image scores, one per class.
    pub phi: Array1<f64>,
}

pub fn midn_forward(trunk_features: ArrayView2<f64>, params: &ModelParams) -> Result<MidnOutput> {
    let c = params.stream_c.out_dim();
    if c < 2 {
        return Err(Error::Config(format!(
            "MIDN needs at least 2 classes, got {c}"
        )));
    }
    if trunk_features.ncols() == 0 {
        return Err(Error::Config("MIDN needs at least one proposal".into()));
    }
    let x_c = params.stream_c.apply(trunk_features);
    let x_d = params.stream_d.apply(trunk_features);
    let s_c = softmax_columns(x_c.view());
    let s_d = softmax_rows(x_d.view());
    let x_r0 = &s_c * &s_d;
    let phi = x_r0.sum_axis(Axis(1));
    Ok(MidnOutput {
        x_c,
        x_d,
        s_c,
        s_d,
        x_r0,
        phi,
    })
}

/// Multi-label cross entropy over image scores and its gradient.
///
/// `phi` is clamped to `[PHI_EPS, 1 - PHI_EPS]`; the gradient is zero for
/// entries outside that interval.
pub fn loss_base(phi: &Array1<f64>, labels: &[bool]) -> (f64, Array1<f64>) {
    assert_eq!(phi.len(), labels.len(), "loss_base: label length mismatch");
    let mut grad = Array1::zeros(phi.len());
    let mut loss = 0.0;
    for (i, (&p, &y)) in phi.iter().zip(labels).enumerate() {
        let clamped = p.clamp(PHI_EPS, 1.0 - PHI_EPS);
        let inside = (PHI_EPS..=1.0 - PHI_EPS).contains(&p);
        if y {
            loss -= clamped.ln();
            if inside {
                grad[i] = -1.0 / p;
            }
        } else {
            loss -= (1.0 - clamped).ln();
            if inside {
                grad[i] = 1.0 / (1.0 - p);
            }
        }
    }
    (loss, grad)
}

/// Gradients of the head given `d loss / d phi`.
///
/// Returns `(grad_stream_c, grad_stream_d, grad_trunk_features)`.
pub fn midn_backward(
    out: &MidnOutput,
    trunk_features: ArrayView2<f64>,
    params: &ModelParams,
    dphi: &Array1<f64>,
) -> (LayerGrad, LayerGrad, Array2<f64>) {
    // phi_c = sum_r x_r0[c, r]
    let dxr = Array2::from_shape_fn(out.x_r0.raw_dim(), |(c, _)| dphi[c]);
    let ds_c = &dxr * &out.s_d;
    let ds_d = &dxr * &out.s_c;
    let dx_c = softmax_columns_backward(&out.s_c, &ds_c);
    let dx_d = softmax_rows_backward(&out.s_d, &ds_d);
    let (g_c, din_c) = dense_grad(&params.stream_c, trunk_features, dx_c.view());
    let (g_d, din_d) = dense_grad(&params.stream_d, trunk_features, dx_d.view());
    (g_c, g_d, din_c + din_d)
}
