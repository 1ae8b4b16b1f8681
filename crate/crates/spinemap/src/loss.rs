//! Training losses: weighted 2-class cross entropy for detection and the
//! masked L1 regression loss for identification.
//!
//! Both are written over flattened per-voxel views so the same code scores a
//! single voxel, a patch or a whole batch. Gradients are provided in closed
//! form and are checked against central finite differences in the tests.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, NdFloat};

use crate::error::{Error, Result};

/// Floor applied inside the log for numerical stability.
pub const LOG_CLAMP: f64 = 1e-7;

fn cast<F: NdFloat>(x: f64) -> F {
    F::from(x).expect("f64 fits in float type")
}

fn check_probability<F: NdFloat>(pred: &ArrayView2<F>) -> Result<()> {
    let tol = cast::<F>(1e-6);
    let lo = -tol;
    let hi = F::one() + tol;
    if pred.iter().any(|&p| !(p >= lo && p <= hi)) {
        return Err(Error::InvalidProbability(
            "class probabilities must lie in [0, 1]".into(),
        ));
    }
    Ok(())
}

/// Weighted 2-class cross entropy, mean over voxels:
/// `-(1/n) * sum_i [ w0 * 1{t_i = 0} * ln q_i0 + w1 * 1{t_i = 1} * ln q_i1 ]`.
///
/// `pred` is `(n, 2)` class probabilities, `target` is `(n,)` in {0, 1};
/// weights default to (0.1, 0.9) in the callers. Probabilities are clamped at
/// 1e-7 inside the log.
pub fn detection_loss<F: NdFloat>(
    pred: ArrayView2<F>,
    target: ArrayView1<u8>,
    weights: (F, F),
) -> Result<F> {
    if pred.nrows() != target.len() || pred.ncols() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "pred {:?} vs target ({},)",
            pred.shape(),
            target.len()
        )));
    }
    if target.iter().any(|&t| t > 1) {
        return Err(Error::ShapeMismatch("detection targets must be 0 or 1".into()));
    }
    check_probability(&pred)?;
    let clamp = cast::<F>(LOG_CLAMP);
    let n = cast::<F>(pred.nrows() as f64);
    let mut total = F::zero();
    for (row, &t) in pred.axis_iter(Axis(0)).zip(target.iter()) {
        let w = if t == 0 { weights.0 } else { weights.1 };
        let q = row[t as usize].max(clamp);
        total -= w * q.ln();
    }
    Ok(total / n)
}

/// Gradient of [`detection_loss`] with respect to the probabilities.
pub fn detection_loss_grad<F: NdFloat>(
    pred: ArrayView2<F>,
    target: ArrayView1<u8>,
    weights: (F, F),
) -> Result<Array2<F>> {
    detection_loss(pred, target, weights)?;
    let clamp = cast::<F>(LOG_CLAMP);
    let n = cast::<F>(pred.nrows() as f64);
    let mut grad = Array2::<F>::zeros(pred.raw_dim());
    for (i, &t) in target.iter().enumerate() {
        let w = if t == 0 { weights.0 } else { weights.1 };
        let q = pred[[i, t as usize]];
        if q > clamp {
            grad[[i, t as usize]] = -w / (q * n);
        }
    }
    Ok(grad)
}

/// Masked L1: mean of `|pred_i - target_i|` over pixels whose target is
/// nonzero; background pixels contribute exactly 0. Returns 0 when no pixel
/// has a nonzero target.
pub fn identification_loss<F: NdFloat>(pred: ArrayView1<F>, target: ArrayView1<u8>) -> Result<F> {
    if pred.len() != target.len() {
        return Err(Error::ShapeMismatch(format!(
            "pred ({},) vs target ({},)",
            pred.len(),
            target.len()
        )));
    }
    let mut total = F::zero();
    let mut count = 0usize;
    for (&y, &t) in pred.iter().zip(target.iter()) {
        if t != 0 {
            total += (y - cast::<F>(t as f64)).abs();
            count += 1;
        }
    }
    if count == 0 {
        Ok(F::zero())
    } else {
        Ok(total / cast::<F>(count as f64))
    }
}

/// Gradient of [`identification_loss`]: `sign(pred - target) / m` on masked
/// pixels (m = count of nonzero targets), 0 elsewhere.
pub fn identification_loss_grad<F: NdFloat>(
    pred: ArrayView1<F>,
    target: ArrayView1<u8>,
) -> Result<Array1<F>> {
    identification_loss(pred, target)?;
    let count = target.iter().filter(|&&t| t != 0).count();
    let mut grad = Array1::<F>::zeros(pred.len());
    if count == 0 {
        return Ok(grad);
    }
    let inv = cast::<F>(1.0 / count as f64);
    for (i, (&y, &t)) in pred.iter().zip(target.iter()).enumerate() {
        if t != 0 {
            let d = y - cast::<F>(t as f64);
            grad[i] = if d > F::zero() {
                inv
            } else if d < F::zero() {
                -inv
            } else {
                F::zero()
            };
        }
    }
    Ok(grad)
}
