use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{contract_err, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub learnable: bool,
    grad: Option<Vec<f64>>,
}

impl Parameter {
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }
}

/// Index of a parameter inside its [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Ordered, uniquely named collection of model parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

/// Tape handles for every parameter of a set, in set order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { params: Vec::new() }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<ParamId> {
        if self.find(name).is_some() {
            return Err(contract_err!("duplicate parameter name {name}"));
        }
        self.params.push(Parameter { name: name.to_string(), tensor, learnable: true, grad: None });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn set_learnable(&mut self, id: ParamId, learnable: bool) {
        self.params[id.0].learnable = learnable;
    }

    /// Records every parameter on `tape`; learnable ones as gradient leaves.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| if p.learnable { tape.leaf(p.tensor.clone()) } else { tape.constant(p.tensor.clone()) })
            .collect();
        Bound { vars }
    }

    /// Records every parameter on `tape` as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound { vars: self.params.iter().map(|p| tape.constant(p.tensor.clone())).collect() }
    }

    /// Adds `weight · grad` from a finished backward pass into each parameter.
    pub fn accumulate(&mut self, tape: &Tape, bound: &Bound, weight: f64) {
        let grads = Self::collect_grads(tape, bound);
        self.accumulate_grads(&grads, weight);
    }

    /// Gradients of a finished backward pass, one slot per parameter.
    pub fn collect_grads(tape: &Tape, bound: &Bound) -> Vec<Option<Vec<f64>>> {
        bound.vars.iter().map(|v| tape.grad(*v).map(|g| g.data().to_vec())).collect()
    }

    /// Adds `weight · grads[i]` into parameter `i`; `None` slots are skipped.
    pub fn accumulate_grads(&mut self, grads: &[Option<Vec<f64>>], weight: f64) {
        for (p, g) in self.params.iter_mut().zip(grads) {
            let Some(g) = g else { continue };
            match &mut p.grad {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, d)| *a += weight * d),
                slot @ None => *slot = Some(g.iter().map(|d| weight * d).collect()),
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Squared L2 norm of all accumulated gradients.
    pub fn grad_norm_sq(&self) -> f64 {
        self.params.iter().filter_map(|p| p.grad.as_ref()).flatten().map(|g| g * g).sum()
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for g in self.params.iter_mut().filter_map(|p| p.grad.as_mut()) {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

/// Plain gradient descent: `p ← p − lr·grad`, then clears gradients.
pub fn sgd_step(params: &mut ParamSet, lr: f64) -> Result<()> {
    if let Some(p) = params.params.iter().find(|p| p.learnable && p.grad.is_none()) {
        return Err(contract_err!("parameter {} has no gradient", p.name));
    }
    for p in params.params.iter_mut().filter(|p| p.learnable) {
        let g = p.grad.take().expect("checked above");
        for (w, d) in p.tensor.data_mut().iter_mut().zip(&g) {
            *w -= lr * d;
        }
    }
    params.zero_grad();
    Ok(())
}

/// Heavy-ball momentum on top of [`sgd_step`]:
/// `v ← μ·v + grad`, `p ← p − lr·v`. With `μ = 0` it equals `sgd_step`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Momentum {
    pub mu: f64,
    velocity: Vec<Vec<f64>>,
}

impl Momentum {
    pub fn new(mu: f64) -> Self {
        Momentum { mu, velocity: Vec::new() }
    }

    pub fn step(&mut self, params: &mut ParamSet, lr: f64) -> Result<()> {
        if self.mu == 0.0 {
            return sgd_step(params, lr);
        }
        if self.velocity.len() != params.len() {
            self.velocity = params.params.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
        }
        for (p, v) in params.params.iter_mut().zip(&mut self.velocity) {
            if let Some(g) = p.grad.as_mut() {
                for (vi, gi) in v.iter_mut().zip(g.iter_mut()) {
                    *vi = self.mu * *vi + *gi;
                    *gi = *vi;
                }
            }
        }
        sgd_step(params, lr)
    }
}
