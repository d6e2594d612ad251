//! Reverse-mode differentiation over a single-owner Wengert tape.
//!
//! Nodes are appended in evaluation order, so the tape is topologically
//! sorted by construction; backward walks it once in reverse.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{dim_err, Error, Result};
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::wavelet;

/// Local adjoint of one recorded operation: given the output gradient, the
/// output value and the parent values, produce one gradient per parent.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &Tensor<T>, &[Rc<Tensor<T>>]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf whose gradient is tracked.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Node {
            value: Rc::new(value),
            parents: vec![],
            requires_grad: true,
            backward: None,
        })
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Node {
            value: Rc::new(value),
            parents: vec![],
            requires_grad: false,
            backward: None,
        })
    }

    fn record(
        &self,
        value: Tensor<T>,
        parents: &[Var<'_, T>],
        op: &'static str,
        backward: BackwardFn<T>,
    ) -> Result<Var<'_, T>> {
        let value = value.check_finite(op)?;
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        Ok(self.push(Node {
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            requires_grad,
            backward: requires_grad.then_some(backward),
        }))
    }

    /// Gradients of a scalar `root` with respect to every node that requires
    /// them. Leaves the tape untouched, so repeated calls agree bit for bit.
    pub fn backward(&self, root: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let rn = &nodes[root.id];
        if rn.value.numel() != 1 {
            return Err(Error::Backward(format!(
                "root must be scalar, got shape {:?}",
                rn.value.shape()
            )));
        }
        if !rn.requires_grad {
            return Err(Error::Backward("root is detached from every tracked leaf".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(Tensor::ones(rn.value.shape()));
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(back) = &node.backward else { continue };
            let Some(g) = grads[id].take() else { continue };
            let parent_vals: Vec<Rc<Tensor<T>>> =
                node.parents.iter().map(|&p| nodes[p].value.clone()).collect();
            let pgrads = back(&g, &node.value, &parent_vals);
            debug_assert_eq!(pgrads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(pgrads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        // only leaves keep their gradient; interior slots were consumed above
        Ok(Gradients { grads })
    }
}

/// Per-node gradient table produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf; `None` if it does not influence the root.
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return dim_err(op, format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        same_shape("add", &a, &b)?;
        self.tape.record(
            a.add(&b)?,
            &[self, other],
            "add",
            Box::new(|g, _, _| vec![Some(g.clone()), Some(g.clone())]),
        )
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        same_shape("sub", &a, &b)?;
        self.tape.record(
            a.sub(&b)?,
            &[self, other],
            "sub",
            Box::new(|g, _, _| vec![Some(g.clone()), Some(g.scale(-T::one()))]),
        )
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let out = a.zip_map(&b, "mul", |x, y| x * y)?;
        self.tape.record(
            out,
            &[self, other],
            "mul",
            Box::new(|g, _, p| {
                vec![
                    Some(g.zip_map(&p[1], "mul", |u, v| u * v).unwrap()),
                    Some(g.zip_map(&p[0], "mul", |u, v| u * v).unwrap()),
                ]
            }),
        )
    }

    pub fn scale(self, s: T) -> Result<Var<'t, T>> {
        let out = self.value().scale(s);
        self.tape
            .record(out, &[self], "scale", Box::new(move |g, _, _| vec![Some(g.scale(s))]))
    }

    pub fn relu(self) -> Result<Var<'t, T>> {
        let out = self.value().map(|v| v.max(T::zero()));
        self.tape.record(
            out,
            &[self],
            "relu",
            Box::new(|g, _, p| {
                vec![Some(
                    g.zip_map(&p[0], "relu", |u, x| if x > T::zero() { u } else { T::zero() })
                        .unwrap(),
                )]
            }),
        )
    }

    pub fn abs(self) -> Result<Var<'t, T>> {
        let out = self.value().map(|v| v.abs());
        self.tape.record(
            out,
            &[self],
            "abs",
            Box::new(|g, _, p| {
                vec![Some(
                    g.zip_map(&p[0], "abs", |u, x| {
                        if x > T::zero() {
                            u
                        } else if x < T::zero() {
                            -u
                        } else {
                            T::zero()
                        }
                    })
                    .unwrap(),
                )]
            }),
        )
    }

    pub fn sigmoid(self) -> Result<Var<'t, T>> {
        let out = self.value().map(|v| T::one() / (T::one() + (-v).exp()));
        self.tape.record(
            out,
            &[self],
            "sigmoid",
            Box::new(|g, y, _| {
                vec![Some(g.zip_map(y, "sigmoid", |u, s| u * s * (T::one() - s)).unwrap())]
            }),
        )
    }

    pub fn sum(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape.record(
            Tensor::scalar(x.sum()),
            &[self],
            "sum",
            Box::new(move |g, _, _| vec![Some(Tensor::full(&shape, g.item()))]),
        )
    }

    pub fn mean(self) -> Result<Var<'t, T>> {
        let n = self.value().numel().max(1);
        self.sum()?.scale(T::one() / T::from_usize_lossy(n))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let orig = x.shape().to_vec();
        self.tape.record(
            x.reshape(shape)?,
            &[self],
            "reshape",
            Box::new(move |g, _, _| vec![Some(g.reshape(&orig).unwrap())]),
        )
    }

    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let out = ops::matmul(&self.value(), &other.value())?;
        self.tape.record(
            out,
            &[self, other],
            "matmul",
            Box::new(|g, _, p| {
                let (da, db) = ops::matmul_backward(&p[0], &p[1], g);
                vec![Some(da), Some(db)]
            }),
        )
    }

    pub fn bmm(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let out = ops::bmm(&self.value(), &other.value())?;
        self.tape.record(
            out,
            &[self, other],
            "bmm",
            Box::new(|g, _, p| {
                let (da, db) = ops::bmm_backward(&p[0], &p[1], g);
                vec![Some(da), Some(db)]
            }),
        )
    }

/// Fused `softmax(scale · Q Kᵀ) V` over heads; see [`ops::attention`].
    pub fn attention(self, k: Var<'t, T>, v: Var<'t, T>, scale: T) -> Result<Var<'t, T>> {
        let (out, probs) = ops::attention(&self.value(), &k.value(), &v.value(), scale)?;
        self.tape.record(
            out,
            &[self, k, v],
            "attention",
            Box::new(move |g, _, p| {
                let (dq, dk, dv) = ops::attention_backward(&p[0], &p[1], &p[2], &probs, g, scale);
                vec![Some(dq), Some(dk), Some(dv)]
            }),
        )
    }

    pub fn permute3(self, perm: [usize; 3]) -> Result<Var<'t, T>> {
        let out = ops::permute3(&self.value(), perm)?;
        let inv = ops::inverse_perm(perm);
        self.tape.record(
            out,
            &[self],
            "permute3",
            Box::new(move |g, _, _| vec![Some(ops::permute3(g, inv).unwrap())]),
        )
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let out = ops::softmax(&self.value(), axis)?;
        self.tape.record(
            out,
            &[self],
            "softmax",
            Box::new(move |g, y, _| vec![Some(ops::softmax_backward(y, g, axis))]),
        )
    }

    pub fn conv2d(self, kernel: Var<'t, T>, stride: usize, padding: usize, groups: usize) -> Result<Var<'t, T>> {
        let out = ops::conv2d(&self.value(), &kernel.value(), stride, padding, groups)?;
        self.tape.record(
            out,
            &[self, kernel],
            "conv2d",
            Box::new(move |g, _, p| {
                let (dx, dk) = ops::conv2d_backward(&p[0], &p[1], g, stride, padding, groups).unwrap();
                vec![Some(dx), Some(dk)]
            }),
        )
    }

    pub fn add_bias(self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        let b = bias.value();
        let out = ops::add_bias(&self.value(), &b)?;
        let c = b.numel();
        self.tape.record(
            out,
            &[self, bias],
            "add_bias",
            Box::new(move |g, _, _| vec![Some(g.clone()), Some(ops::bias_backward(g, c))]),
        )
    }

    pub fn layer_norm(self, gain: Var<'t, T>, bias: Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
        let (out, _) = ops::layer_norm(&self.value(), &gain.value(), &bias.value(), T::lit(eps))?;
        self.tape.record(
            out,
            &[self, gain, bias],
            "layer_norm",
            Box::new(move |g, _, p| {
                let (_, cache) = ops::layer_norm(&p[0], &p[1], &p[2], T::lit(eps)).unwrap();
                let (dx, dg, db) = ops::layer_norm_backward(&cache, &p[1], g);
                vec![Some(dx), Some(dg), Some(db)]
            }),
        )
    }

    pub fn concat_last(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let Some(first) = parts.first() else {
            return dim_err("concat_last", "no inputs");
        };
        let vals: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor<T>> = vals.iter().map(|v| v.as_ref()).collect();
        let out = ops::concat_last(&refs)?;
        let widths: Vec<usize> = vals.iter().map(|v| *v.shape().last().unwrap()).collect();
        first.tape.record(
            out,
            parts,
            "concat_last",
            Box::new(move |g, _, _| {
                let mut start = 0;
                widths
                    .iter()
                    .map(|&w| {
                        let part = ops::narrow_last(g, start, w).unwrap();
                        start += w;
                        Some(part)
                    })
                    .collect()
            }),
        )
    }

    pub fn narrow_last(self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let out = ops::narrow_last(&x, start, len)?;
        let c = *x.shape().last().unwrap();
        self.tape.record(
            out,
            &[self],
            "narrow_last",
            Box::new(move |g, _, _| {
                let rows = g.numel() / len.max(1);
                let mut dx = vec![T::zero(); rows * c];
                for (r, src) in g.data().chunks_exact(len.max(1)).enumerate().take(rows) {
                    dx[r * c + start..r * c + start + len].copy_from_slice(&src[..len]);
                }
                let mut shape = g.shape().to_vec();
                *shape.last_mut().unwrap() = c;
                vec![Some(Tensor::from_vec(&shape, dx).unwrap())]
            }),
        )
    }

    pub fn upsample_nearest2(self) -> Result<Var<'t, T>> {
        let out = ops::upsample_nearest2(&self.value())?;
        self.tape.record(
            out,
            &[self],
            "upsample_nearest2",
            Box::new(|g, _, _| vec![Some(ops::upsample_nearest2_backward(g))]),
        )
    }

    pub fn gather_rows(self, idx: Vec<Option<usize>>) -> Result<Var<'t, T>> {
        let x = self.value();
        let out = ops::gather_rows(&x, &idx)?;
        let rows = x.shape()[0];
        self.tape.record(
            out,
            &[self],
            "gather_rows",
            Box::new(move |g, _, _| vec![Some(ops::scatter_rows(g, &idx, rows))]),
        )
    }

    /// Single-level Haar analysis of `[H,W,C]` into `[H/2,W/2,4C]`, subbands
    /// packed along channels in the order LL, LH, HL, HH.
    pub fn dwt2_haar(self) -> Result<Var<'t, T>> {
        let out = wavelet::dwt2_packed(&self.value())?;
        // orthonormal: the adjoint is the inverse
        self.tape.record(
            out,
            &[self],
            "dwt2_haar",
            Box::new(|g, _, _| vec![Some(wavelet::idwt2_packed(g).unwrap())]),
        )
    }

    /// Inverse of [`Var::dwt2_haar`].
    pub fn idwt2_haar(self) -> Result<Var<'t, T>> {
        let out = wavelet::idwt2_packed(&self.value())?;
        self.tape.record(
            out,
            &[self],
            "idwt2_haar",
            Box::new(|g, _, _| vec![Some(wavelet::dwt2_packed(g).unwrap())]),
        )
    }

    /// Records an operation whose forward value and adjoint are supplied by
    /// the caller. Used for fused losses.
    pub(crate) fn custom(
        parents: &[Var<'t, T>],
        value: Tensor<T>,
        op: &'static str,
        backward: BackwardFn<T>,
    ) -> Result<Var<'t, T>> {
        parents[0].tape.record(value, parents, op, backward)
    }
}

/// Worst relative error between tape gradients and central differences for
/// a scalar function of several inputs. Denominator is
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let root = f(&vars)?;
    let grads = tape.backward(root)?;

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        Ok(f(&vars)?.value().item())
    };

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, x) in inputs.iter().enumerate() {
        let zero = Tensor::zeros(x.shape());
        let analytic = grads.get(vars[i]).unwrap_or(&zero);
        for j in 0..x.numel() {
            let orig = x.data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = orig - eps;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data()[j];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    grad_check_many(|v| f(v[0]), std::slice::from_ref(x), eps)
}

pub const DEFAULT_GRAD_EPS: f64 = 1e-5;
