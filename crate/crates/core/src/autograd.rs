//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every op applied to its [`Var`]s. When gradients are
//! disabled (inference) ops are evaluated eagerly and nothing is recorded
//! beyond the values themselves.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{ensure, Result};
use crate::kernels;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>) -> Result<Vec<Option<Tensor<T>>>>>;

struct Node<T> {
    value: Arc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    grad_enabled: bool,
    params: RefCell<HashMap<usize, usize>>,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar> {
    graph: &'g Graph<T>,
    id: usize,
}

/// Gradients of a scalar with respect to every leaf that requires them.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T> Gradients<T> {
    pub fn get<S: Scalar>(&self, var: Var<'_, S>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub(crate) fn take(&mut self, id: usize) -> Option<Tensor<T>> {
        self.grads.get_mut(id).and_then(|g| g.take())
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
            params: RefCell::new(HashMap::new()),
        }
    }

    /// A graph that never records backward closures.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    fn insert(&self, value: Arc<Tensor<T>>, parents: Vec<usize>, backward: Option<BackwardFn<T>>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents,
            backward,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.insert(Arc::new(value), Vec::new(), None, false)
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        let rg = self.grad_enabled;
        self.insert(Arc::new(value), Vec::new(), None, rg)
    }

    /// Binds parameter `slot` to this graph once; later calls return the same var.
    pub fn param(&self, slot: usize, value: &Arc<Tensor<T>>) -> Var<'_, T> {
        if let Some(&id) = self.params.borrow().get(&slot) {
            return Var { graph: self, id };
        }
        let rg = self.grad_enabled;
        let v = self.insert(Arc::clone(value), Vec::new(), None, rg);
        self.params.borrow_mut().insert(slot, v.id);
        v
    }

    /// Var bound to parameter `slot`, if the forward pass touched it.
    pub fn param_var(&self, slot: usize) -> Option<Var<'_, T>> {
        self.params
            .borrow()
            .get(&slot)
            .map(|&id| Var { graph: self, id })
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records an op. `backward` maps the output gradient to one optional
    /// gradient per parent, in order.
    pub(crate) fn record<'g, F>(&'g self, value: Tensor<T>, parents: &[Var<'g, T>], backward: F) -> Var<'g, T>
    where
        F: Fn(&Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> + 'static,
    {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            self.grad_enabled && parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        let bw: Option<BackwardFn<T>> = if requires_grad {
            Some(Box::new(backward))
        } else {
            None
        };
        self.insert(
            Arc::new(value),
            parents.iter().map(|p| p.id).collect(),
            bw,
            requires_grad,
        )
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        ensure!(self.grad_enabled, "backward called on an inference graph");
        let nodes = self.nodes.borrow();
        ensure!(
            nodes[loss.id].value.len() == 1,
            "backward needs a scalar loss, got shape {:?}",
            nodes[loss.id].value.shape()
        );
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(nodes[loss.id].value.shape()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(bw) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let parent_grads = bw(&g)?;
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[pid].requires_grad {
                    continue;
                }
                match &mut grads[pid] {
                    Some(acc) => acc.add_assign(&pg)?,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn value(&self) -> Arc<Tensor<T>> {
        Arc::clone(&self.graph.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn add(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let out = self.value().zip_map(&other.value(), |a, b| a + b)?;
        Ok(self
            .graph
            .record(out, &[self, other], |g| Ok(vec![Some(g.clone()), Some(g.clone())])))
    }

    pub fn sub(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let out = self.value().zip_map(&other.value(), |a, b| a - b)?;
        Ok(self.graph.record(out, &[self, other], |g| {
            Ok(vec![Some(g.clone()), Some(g.map(|v| -v))])
        }))
    }

    pub fn mul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        let out = a.zip_map(&b, |x, y| x * y)?;
        Ok(self.graph.record(out, &[self, other], move |g| {
            Ok(vec![
                Some(g.zip_map(&b, |gv, bv| gv * bv)?),
                Some(g.zip_map(&a, |gv, av| gv * av)?),
            ])
        }))
    }

    pub fn scale(self, s: T) -> Result<Var<'g, T>> {
        let out = self.value().scale(s);
        Ok(self.graph.record(out, &[self], move |g| Ok(vec![Some(g.scale(s))])))
    }

    /// Adds a per-sample, per-channel vector `(n, c)` to every pixel of `(n, c, h, w)`.
    pub fn add_channel_bias(self, bias: Var<'g, T>) -> Result<Var<'g, T>> {
        let x = self.value();
        let b = bias.value();
        let (n, c, h, w) = x.dims4()?;
        ensure!(
            b.shape() == [n, c],
            "add_channel_bias: bias shape {:?} does not match (n, c) = ({n}, {c})",
            b.shape()
        );
        let hw = h * w;
        let mut out = (*x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v + b.data()[i / hw];
        }
        Ok(self.graph.record(out, &[self, bias], move |g| {
            let mut gb = Tensor::zeros(&[n, c]);
            for (i, row) in g.data().chunks_exact(hw).enumerate() {
                gb.data_mut()[i] = row.iter().copied().sum();
            }
            Ok(vec![Some(g.clone()), Some(gb)])
        }))
    }

    pub fn conv2d(self, weight: Var<'g, T>, bias: Option<Var<'g, T>>, stride: usize, pad: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let w = weight.value();
        let b = bias.map(|b| b.value());
        let out = kernels::conv2d_forward(&x, &w, b.as_deref(), stride, pad)?;
        let mut parents = vec![self, weight];
        if let Some(bv) = bias {
            parents.push(bv);
        }
        let has_bias = bias.is_some();
        Ok(self.graph.record(out, &parents, move |g| {
            let (gx, gw, gb) = kernels::conv2d_backward(&x, &w, stride, pad, g)?;
            let mut v = vec![Some(gx), Some(gw)];
            if has_bias {
                v.push(Some(gb));
            }
            Ok(v)
        }))
    }

    pub fn linear(self, weight: Var<'g, T>, bias: Var<'g, T>) -> Result<Var<'g, T>> {
        let x = self.value();
        let w = weight.value();
        let out = kernels::linear_forward(&x, &w, &bias.value())?;
        Ok(self.graph.record(out, &[self, weight, bias], move |g| {
            let (gx, gw, gb) = kernels::linear_backward(&x, &w, g)?;
            Ok(vec![Some(gx), Some(gw), Some(gb)])
        }))
    }

    pub fn group_norm(self, groups: usize, gamma: Var<'g, T>, beta: Var<'g, T>, eps: f64) -> Result<Var<'g, T>> {
        let gm = gamma.value();
        let (out, cache) = kernels::group_norm_forward(&self.value(), groups, &gm, &beta.value(), T::lit(eps))?;
        Ok(self.graph.record(out, &[self, gamma, beta], move |g| {
            let (gx, gg, gb) = kernels::group_norm_backward(&cache, groups, &gm, g)?;
            Ok(vec![Some(gx), Some(gg), Some(gb)])
        }))
    }

    /// Per-position normalization across channels, no affine parameters.
    pub fn channel_norm(self, eps: f64) -> Result<Var<'g, T>> {
        let cache = kernels::channel_norm_forward(&self.value(), T::lit(eps))?;
        let out = cache.xhat.clone();
        Ok(self.graph.record(out, &[self], move |g| {
            Ok(vec![Some(kernels::channel_norm_backward(&cache, g)?)])
        }))
    }

    pub fn silu(self) -> Result<Var<'g, T>> {
        let x = self.value();
        let sig = x.map(kernels::sigmoid);
        let out = x.zip_map(&sig, |v, s| v * s)?;
        Ok(self.graph.record(out, &[self], move |g| {
            let mut gx = g.clone();
            for ((d, &xv), &s) in gx.data_mut().iter_mut().zip(x.data()).zip(sig.data()) {
                *d = *d * s * (T::one() + xv * (T::one() - s));
            }
            Ok(vec![Some(gx)])
        }))
    }

    pub fn upsample2x(self) -> Result<Var<'g, T>> {
        let out = kernels::upsample2x_forward(&self.value())?;
        Ok(self
            .graph
            .record(out, &[self], |g| Ok(vec![Some(kernels::upsample2x_backward(g)?)])))
    }

    pub fn concat_channels(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let a = self.value();
        let ca = a.dims4()?.1;
        let out = kernels::concat_channels(&a, &other.value())?;
        Ok(self.graph.record(out, &[self, other], move |g| {
            let (ga, gb) = kernels::split_channels(g, ca)?;
            Ok(vec![Some(ga), Some(gb)])
        }))
    }

    /// Rows of a `(rows, d)` table selected by `indices`, giving `(indices.len(), d)`.
    pub fn gather_rows(self, indices: &[usize]) -> Result<Var<'g, T>> {
        let table = self.value();
        let (rows, d) = table.dims2()?;
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            ensure!(i < rows, "gather_rows: index {i} out of range for {rows} rows");
            data.extend_from_slice(&table.data()[i * d..(i + 1) * d]);
        }
        let out = Tensor::from_vec(&[indices.len(), d], data)?;
        let idx = indices.to_vec();
        Ok(self.graph.record(out, &[self], move |g| {
            let mut gt = Tensor::zeros(&[rows, d]);
            for (r, &i) in idx.iter().enumerate() {
                for j in 0..d {
                    gt.data_mut()[i * d + j] = gt.data()[i * d + j] + g.data()[r * d + j];
                }
            }
            Ok(vec![Some(gt)])
        }))
    }

    pub fn sum(self) -> Result<Var<'g, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = Tensor::scalar(x.sum());
        Ok(self.graph.record(out, &[self], move |g| {
            Ok(vec![Some(Tensor::full(&shape, g.data()[0]))])
        }))
    }

    /// `Σ self ⊙ weights` against a constant tensor.
    pub fn dot_const(self, weights: &Tensor<T>) -> Result<Var<'g, T>> {
        let x = self.value();
        x.check_same_shape(weights)?;
        let out = Tensor::scalar(x.data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum());
        let w = weights.clone();
        Ok(self
            .graph
            .record(out, &[self], move |g| Ok(vec![Some(w.scale(g.data()[0]))])))
    }

    /// Mean squared difference, a single-element var.
    pub fn mse(self, target: Var<'g, T>) -> Result<Var<'g, T>> {
        let a = self.value();
        let b = target.value();
        let diff = a.zip_map(&b, |x, y| x - y)?;
        let n = T::lit(diff.len() as f64);
        let out = Tensor::scalar(diff.sum_sq() / n);
        Ok(self.graph.record(out, &[self, target], move |g| {
            let s = g.data()[0] * T::lit(2.0) / n;
            let ga = diff.scale(s);
            let gb = ga.map(|v| -v);
            Ok(vec![Some(ga), Some(gb)])
        }))
    }
}
