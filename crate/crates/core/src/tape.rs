//! Reverse-mode differentiation over a linear tape of recorded ops.
//!
//! Every differentiable primitive in [`crate::ops`] pushes its forward value
//! together with a [`Backward`] implementation. [`Tape::backward`] walks the
//! tape in reverse and hands each op its upstream gradient; ops accumulate
//! into their inputs through [`GradSink`].

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one recorded op.
pub trait Backward {
    fn name(&self) -> &'static str;
    fn backward(&self, upstream: &[f64], sink: &mut GradSink<'_>);
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Option<Box<dyn Backward>>,
}

/// Access to forward values and gradient accumulators during backward.
pub struct GradSink<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
}

impl GradSink<'_> {
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Zero-initialised accumulator for `v`; callers must check [`wants`](Self::wants).
    pub fn slot(&mut self, v: Var) -> &mut [f64] {
        let n = self.nodes[v.0].value.numel();
        self.grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }

    /// Accumulator for `v` alongside read access to forward values.
    pub fn slot_with_values(&mut self, v: Var) -> (Values<'_>, &mut [f64]) {
        let n = self.nodes[v.0].value.numel();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        (Values { nodes: self.nodes }, slot)
    }

    pub fn add(&mut self, v: Var, g: &[f64]) {
        if !self.wants(v) {
            return;
        }
        let slot = self.slot(v);
        debug_assert_eq!(slot.len(), g.len());
        slot.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
}

/// Read-only view of forward values, see [`GradSink::slot_with_values`].
pub struct Values<'a> {
    nodes: &'a [Node],
}

impl Values<'_> {
    pub fn get(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    perturb: Option<(String, f64)>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Option<Box<dyn Backward>>) -> Var {
        let mut value = value;
        value.requires_grad = requires_grad;
        value.grad = None;
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, None)
    }

    /// Differentiable input that is not a named parameter.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, true, None)
    }

    /// Registers the named parameter; repeated calls return the same handle.
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = params.get(name)?;
        let v = self.push(t.clone(), t.requires_grad, None);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Records an op output. The backward closure is dropped when no input
    /// needs a gradient.
    pub fn record(&mut self, value: Tensor, inputs: &[Var], op: impl Backward + 'static) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op: Option<Box<dyn Backward>> = if rg { Some(Box::new(op)) } else { None };
        self.push(value, rg, op)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Scales the upstream gradient fed into every op named `op` by `factor`.
    /// Only used to prove that gradient checks catch broken backward passes.
    pub fn set_perturbation(&mut self, op: &str, factor: f64) {
        self.perturb = Some((op.to_string(), factor));
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let numel = self.value(loss).numel();
        if numel != 1 {
            return Err(Error::invalid(format!("backward needs a scalar, got {numel} values")));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(op) = &self.nodes[i].op else { continue };
            let Some(mut upstream) = grads[i].take() else { continue };
            if let Some((name, f)) = &self.perturb {
                if name == op.name() {
                    upstream.iter_mut().for_each(|g| *g *= f);
                }
            }
            let mut sink = GradSink {
                nodes: &self.nodes,
                grads: &mut grads,
            };
            op.backward(&upstream, &mut sink);
            grads[i] = Some(upstream);
        }
        let mut by_param = BTreeMap::new();
        for (name, v) in &self.params {
            if let Some(g) = &grads[v.0] {
                if let Some(bad) = g.iter().position(|x| !x.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of `{name}` at index {bad}")));
                }
                by_param.insert(name.clone(), g.clone());
            }
        }
        Ok(Gradients { grads, by_param })
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    by_param: BTreeMap<String, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0)?.as_deref()
    }

    /// Gradient of `v`, or zeros when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, numel: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; numel], <[f64]>::to_vec)
    }

    pub fn params(&self) -> &BTreeMap<String, Vec<f64>> {
        &self.by_param
    }

    pub fn into_params(self) -> BTreeMap<String, Vec<f64>> {
        self.by_param
    }
}
