//! Heatmap and box losses.

use crate::autodiff::Var;
use crate::error::{dim_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const FOCAL_ALPHA: f64 = 2.0;
pub const FOCAL_BETA: f64 = 4.0;
/// Probabilities are clamped into `[PROB_CLAMP, 1 - PROB_CLAMP]`; the
/// gradient is zero where the clamp is active.
pub const PROB_CLAMP: f64 = 1e-4;

/// Penalty-reduced focal loss on sigmoid probabilities against a Gaussian
/// target grid. Cells with target exactly 1 are positives; the sum is
/// divided by the positive count (at least 1).
pub fn focal_loss<'t, T: Scalar>(pred: Var<'t, T>, target: &Tensor<T>) -> Result<Var<'t, T>> {
    let p = pred.value();
    if p.shape() != target.shape() {
        return dim_err(
            "focal_loss",
            format!("pred {:?} vs target {:?}", p.shape(), target.shape()),
        );
    }
    let (a, b) = (FOCAL_ALPHA, FOCAL_BETA);
    let lo = PROB_CLAMP;
    let hi = 1.0 - PROB_CLAMP;
    let positives = target.data().iter().filter(|&&t| t == T::one()).count();
    let norm = positives.max(1) as f64;
    let mut total = 0.0;
    let mut dp = Vec::with_capacity(p.numel());
    for (&pv, &tv) in p.data().iter().zip(target.data()) {
        let raw = pv.as_f64();
        let x = raw.clamp(lo, hi);
        let live = raw == x;
        let (l, d) = if tv == T::one() {
            let q = 1.0 - x;
            (-q.powf(a) * x.ln(), a * q.powf(a - 1.0) * x.ln() - q.powf(a) / x)
        } else {
            let w = (1.0 - tv.as_f64()).powf(b);
            let lq = (1.0 - x).ln();
            (
                -w * x.powf(a) * lq,
                -w * (a * x.powf(a - 1.0) * lq - x.powf(a) / (1.0 - x)),
            )
        };
        total += l;
        dp.push(if live { T::lit(d / norm) } else { T::zero() });
    }
    let shape = p.shape().to_vec();
    let grad = Tensor::from_vec(&shape, dp)?;
    Var::custom(
        &[pred],
        Tensor::scalar(T::lit(total / norm)),
        "focal_loss",
        Box::new(move |g, _, _| vec![Some(grad.scale(g.item()))]),
    )
}

/// Sum of absolute errors over the box code, averaged over rows. `pred` and
/// `target` are `[Q, 8]`; `Q = 0` gives a detached zero.
pub fn box_loss<'t, T: Scalar>(pred: Var<'t, T>, target: &Tensor<T>) -> Result<Var<'t, T>> {
    let s = pred.shape();
    if s.as_slice() != target.shape() || s.len() != 2 {
        return dim_err("box_loss", format!("pred {s:?} vs target {:?}", target.shape()));
    }
    if s[0] == 0 {
        return Ok(pred.tape().constant(Tensor::scalar(T::zero())));
    }
    let t = pred.tape().constant(target.clone());
    pred.sub(t)?.abs()?.sum()?.scale(T::one() / T::from_usize_lossy(s[0]))
}
