//! Central-difference checks of tape gradients, for single ops and for
//! composed blocks whose parameters live in a store.

use serde::Serialize;

use crate::attention::{feed_forward, multi_head_self_attention, AttentionParams};
use crate::autodiff::{grad_check_many, Tape, Var, DEFAULT_GRAD_EPS};
use crate::error::Result;
use crate::head::{decode_query_outputs, heatmap_head, DecoderParams, HeatmapHeadParams, Query};
use crate::lge::{lge_forward, LgeConfig, LgeParams, LgeVariant};
use crate::loss::focal_loss;
use crate::params::{Graph, Group, ParamStore};
use crate::rng;
use crate::tensor::Tensor;

/// Worst relative error, over every scalar in `store`, between the tape
/// gradient of `f` and central differences. Same denominator as
/// [`grad_check_many`].
pub fn grad_check_store<F>(store: &ParamStore<f64>, f: F, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&Graph<'t, f64>) -> Result<Var<'t, f64>>,
{
    let analytic = {
        let tape = Tape::new();
        let g = Graph::new(&tape, store);
        let root = f(&g)?;
        let mut grads = tape.backward(root)?;
        g.collect(&mut grads)
    };
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let tape = Tape::new();
        let g = Graph::with_trainable(&tape, s, |_| false);
        Ok(f(&g)?.value().item())
    };
    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for (pi, id) in store.ids().enumerate() {
        let n = store.get(id).numel();
        for j in 0..n {
            let orig = store.get(id).data()[j];
            probe.get_mut(id).data_mut()[j] = orig + eps;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[j] = orig - eps;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[pi].as_ref().map_or(0.0, |t| t.data()[j]);
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckResult {
    pub name: &'static str,
    pub error: f64,
    pub tolerance: f64,
}

impl GradCheckResult {
    pub fn passed(&self) -> bool {
        self.error < self.tolerance
    }
}

fn uniform(shape: &[usize], rng: &mut rng::Rng) -> Tensor<f64> {
    Tensor::uniform(shape, 1.0, rng)
}

/// `Σ w ⊙ y` with fixed random weights, so every output matters.
fn probe_sum<'t>(y: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let mut r = rng::seeded(seed);
    let w = y.tape().constant(uniform(&y.shape(), &mut r));
    y.mul(w)?.sum()
}

/// The fixed gradient suite: elementary ops at 1e-6 and composed blocks at
/// 1e-5, all in 64-bit arithmetic on inputs in `[-1, 1]`.
pub fn gradient_suite() -> Result<Vec<GradCheckResult>> {
    let eps = DEFAULT_GRAD_EPS;
    // f is linear along any one coordinate of a bilinear op, so a wide step
    // costs no truncation error and keeps roundoff off small entries
    let wide = 1e-2;
    let mut r = rng::seeded(2024);
    let mut out = Vec::new();
    let mut push = |name, error, tolerance| out.push(GradCheckResult { name, error, tolerance });

    let a = uniform(&[3, 4], &mut r);
    let b = uniform(&[4, 5], &mut r);
    push(
        "matmul",
        grad_check_many(|v| probe_sum(v[0].matmul(v[1])?, 1), &[a, b], wide)?,
        1e-6,
    );

    let x = uniform(&[5, 6, 4], &mut r);
    let k = uniform(&[3, 3, 4, 3], &mut r);
    let kg = uniform(&[3, 3, 2, 4], &mut r);
    let e1 = grad_check_many(|v| probe_sum(v[0].conv2d(v[1], 1, 1, 1)?, 2), &[x.clone(), k], wide)?;
    let e2 = grad_check_many(|v| probe_sum(v[0].conv2d(v[1], 2, 1, 2)?, 3), &[x, kg], wide)?;
    push("conv2d", e1.max(e2), 1e-6);

    let s = uniform(&[8], &mut r);
    let s2 = uniform(&[3, 4, 2], &mut r);
    let e1 = grad_check_many(|v| v[0].softmax(0)?.mul(v[0])?.sum(), &[s], eps)?;
    let e2 = grad_check_many(|v| probe_sum(v[0].softmax(1)?, 4), &[s2], eps)?;
    push("softmax", e1.max(e2), 1e-6);

    let q = uniform(&[2, 3, 4], &mut r);
    let kk = uniform(&[2, 5, 4], &mut r);
    let vv = uniform(&[2, 5, 3], &mut r);
    let e1 = grad_check_many(|v| probe_sum(v[0].attention(v[1], v[2], 0.5)?, 5), &[q, kk, vv], eps)?;
    let mut store = ParamStore::new();
    let ap = AttentionParams::new(&mut store, Group::Backbone, "mhsa", 8, 2, &mut r)?;
    let tokens = store.add("tokens", Group::Backbone, uniform(&[6, 8], &mut r));
    let e2 = grad_check_store(
        &store,
        |g| probe_sum(multi_head_self_attention(g, g.param(tokens), &ap)?, 6),
        eps,
    )?;
    push("attention", e1.max(e2), 1e-6);

    push(
        "ffn",
        grad_check_store(&store, |g| probe_sum(feed_forward(g, g.param(tokens), &ap)?, 7), eps)?,
        1e-6,
    );

    let target = Tensor::from_f64(&[2, 2, 2], &[1.0, 0.0, 0.6065, 0.2, 0.0, 1.0, 0.9, 0.0])?;
    let p = Tensor::from_f64(&[2, 2, 2], &[0.3, 0.7, 0.2, 0.5, 0.05, 0.9, 0.4, 0.6])?;
    push(
        "focal_loss",
        grad_check_many(|v| focal_loss(v[0], &target), &[p], eps)?,
        1e-6,
    );

    let mut store = ParamStore::new();
    let cfg = LgeConfig {
        variant: LgeVariant::G,
        iterations: 1,
        heads: 2,
    };
    let lp = LgeParams::new(&mut store, Group::Stage(0), "lge", 8, &cfg, &mut r)?;
    let f0 = store.add("f0", Group::Backbone, uniform(&[4, 4, 8], &mut r));
    push(
        "lge_variant_g",
        grad_check_store(&store, |g| probe_sum(lge_forward(g, g.param(f0), &lp)?, 8), eps)?,
        1e-5,
    );

    let mut store = ParamStore::new();
    let hp = HeatmapHeadParams::new(&mut store, Group::Stage(0), "head", 4, 4, 3, &mut r);
    let dp = DecoderParams::new(&mut store, 4, 1, &mut r);
    // the zero-initialized heads would hide the attention path
    for id in [dp.reg, dp.cls, dp.reg_bias, dp.cls_bias] {
        let shape = store.get(id).shape().to_vec();
        store.set(id, uniform(&shape, &mut r))?;
    }
    let f = store.add("f", Group::Backbone, uniform(&[4, 4, 4], &mut r));
    let queries: Vec<Query> = [(0, 0), (1, 2), (3, 3)]
        .iter()
        .map(|&(row, col)| Query {
            row,
            col,
            class_id: 0,
            score: 0.5,
            stage: 0,
        })
        .collect();
    let e1 = grad_check_store(&store, |g| probe_sum(heatmap_head(g, g.param(f), &hp)?, 9), eps)?;
    let e2 = grad_check_store(
        &store,
        |g| {
            let d = decode_query_outputs(g, &queries, g.param(f), &dp)?;
            probe_sum(d.regression, 10)?.add(probe_sum(d.refine, 11)?)
        },
        eps,
    )?;
    push("head_and_decoder", e1.max(e2), 1e-5);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_check_agrees_on_a_linear_map() {
        let mut store = ParamStore::new();
        let w = store.add("w", Group::Decoder, Tensor::from_f64(&[2, 2], &[0.5, -0.25, 0.75, 1.0]).unwrap());
        let x = store.add("x", Group::Backbone, Tensor::from_f64(&[1, 2], &[0.25, -0.5]).unwrap());
        let err = grad_check_store(&store, |g| g.param(x).matmul(g.param(w))?.sum(), 2f64.powi(-12)).unwrap();
        assert!(err < 1e-12, "{err}");
    }

    #[test]
    fn store_check_catches_a_wrong_adjoint() {
        let mut store = ParamStore::new();
        let x = store.add("x", Group::Backbone, Tensor::from_f64(&[2], &[0.3, -0.6]).unwrap());
        // the taped call sees +x, every probe after it sees -x
        let flip = std::cell::Cell::new(false);
        let err = grad_check_store(
            &store,
            |g| {
                let v = g.param(x);
                let s = if flip.replace(true) { -1.0 } else { 1.0 };
                v.scale(s)?.sum()
            },
            1e-5,
        )
        .unwrap();
        assert!(err > 0.5);
    }
}
