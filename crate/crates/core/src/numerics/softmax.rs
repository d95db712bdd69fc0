use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Lower bound applied to every logarithm argument.
pub const LOG_FLOOR: f64 = 1e-8;

pub fn floored_ln(x: f64) -> f64 {
    x.max(LOG_FLOOR).ln()
}

/// Derivative of [`floored_ln`]; zero on the clamped region.
pub fn floored_ln_grad(x: f64) -> f64 {
    if x > LOG_FLOOR {
        1.0 / x
    } else {
        0.0
    }
}

fn softmax_into(v: ArrayView1<f64>, scale: f64, out: &mut [f64]) {
    let max = v.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x * scale));
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(v.iter()) {
        *o = (x * scale - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(logits.raw_dim());
    for (row, mut dst) in logits.outer_iter().zip(out.outer_iter_mut()) {
        softmax_into(row, 1.0, dst.as_slice_mut().expect("contiguous row"));
    }
    out
}

/// Softened softmax `exp(v_j / tau) / sum_k exp(v_k / tau)`.
pub fn temperature_softmax(v: ArrayView1<f64>, tau: f64) -> Result<Array1<f64>> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("temperature_softmax input is not finite"));
    }
    let mut out = vec![0.0; v.len()];
    softmax_into(v, 1.0 / tau, &mut out);
    Ok(Array1::from(out))
}

/// Pulls `d loss / d probs` back to `d loss / d logits` for row-wise softmax.
pub fn softmax_backward(probs: ArrayView2<f64>, dprobs: ArrayView2<f64>) -> Array2<f64> {
    let inner = (&probs * &dprobs).sum_axis(Axis(1));
    let mut out = dprobs.to_owned();
    for ((mut row, p), dot) in out.outer_iter_mut().zip(probs.outer_iter()).zip(inner.iter()) {
        row.zip_mut_with(&p, |g, &p| *g = p * (*g - dot));
    }
    out
}

/// Gradient with respect to `v` of a loss through `s = temperature_softmax(v, tau)`.
pub fn temperature_softmax_backward(s: ArrayView1<f64>, ds: ArrayView1<f64>, tau: f64) -> Array1<f64> {
    let dot = s.dot(&ds);
    s.iter()
        .zip(ds.iter())
        .map(|(&s, &g)| s * (g - dot) / tau)
        .collect()
}
