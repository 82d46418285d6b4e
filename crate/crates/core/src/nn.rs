//! Parameter containers, layer building blocks, and the Adam optimizer.
//!
//! Parameters live outside any graph; a [`Forward`] context leases them into
//! a tape as leaf tensors and records the (name, leaf) pairs so the trainer
//! can read gradients back after `backward`.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::tensor::{Graph, Scalar, Tensor};

/// Named learnable tensor.
#[derive(Debug, Clone)]
pub struct Param<E: Scalar> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<E>,
}

impl<E: Scalar> Param<E> {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Param {
            name: name.into(),
            shape: shape.to_vec(),
            value: vec![E::zero(); n],
        }
    }

    pub fn ones(name: impl Into<String>, shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Param {
            name: name.into(),
            shape: shape.to_vec(),
            value: vec![E::one(); n],
        }
    }

    /// Normal init with the given standard deviation. Sampling happens in
    /// f64 so f32 and f64 models draw identical sequences from one seed.
    pub fn randn(name: impl Into<String>, shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        let value = (0..n)
            .map(|_| E::from_f64(rng.sample::<f64, _>(StandardNormal) * std))
            .collect();
        Param {
            name: name.into(),
            shape: shape.to_vec(),
            value,
        }
    }

    /// He-style init for a layer with the given fan-in.
    pub fn he(name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Self {
        Param::randn(name, shape, (2.0 / fan_in as f64).sqrt(), rng)
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Visitor over every learnable parameter of a model, in a stable order.
pub trait ParamSet<E: Scalar> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<E>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.numel());
        n
    }

    /// FNV-1a hash over all parameter bytes; used to assert frozen modules.
    fn param_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        self.visit(&mut |p| {
            let mut bytes = Vec::with_capacity(p.numel() * 8);
            for v in &p.value {
                v.write_le(&mut bytes);
            }
            for b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        });
        h
    }
}

/// A forward pass: one graph plus the leased parameter leaves.
pub struct Forward<E: Scalar> {
    pub graph: Graph<E>,
    trainable: bool,
    leased: Rc<RefCell<Vec<(String, Tensor<E>)>>>,
}

impl<E: Scalar> Forward<E> {
    pub fn new(trainable: bool) -> Self {
        Forward {
            graph: Graph::new(),
            trainable,
            leased: Rc::new(RefCell::new(Vec::new())),
        }
    }

    /// A context over an existing graph (used when leaf tensors were
    /// created directly on `graph` before any parameters are leased).
    pub fn over(graph: Graph<E>, trainable: bool) -> Self {
        Forward {
            graph,
            trainable,
            leased: Rc::new(RefCell::new(Vec::new())),
        }
    }

    /// Same graph, different trainability (used to freeze sub-models
    /// while still letting gradients flow through their activations).
    pub fn view(&self, trainable: bool) -> Forward<E> {
        Forward {
            graph: self.graph.clone(),
            trainable,
            leased: Rc::clone(&self.leased),
        }
    }

    /// Lease a parameter into the graph.
    pub fn param(&self, p: &Param<E>) -> Tensor<E> {
        let t = self.graph.leaf(p.value.clone(), &p.shape, self.trainable);
        if self.trainable {
            self.leased.borrow_mut().push((p.name.clone(), t.clone()));
        }
        t
    }

    /// Gradients of all trainable leased parameters, keyed by name.
    /// Returns Err naming the parameter if any gradient is non-finite.
    pub fn grads(&self) -> Result<HashMap<String, Vec<E>>> {
        let mut out = HashMap::new();
        for (name, t) in self.leased.borrow().iter() {
            if let Some(g) = t.grad() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(crate::error::Error::NonFinite(format!(
                        "gradient of parameter {name}"
                    )));
                }
                // a parameter leased twice accumulates per-lease grads
                out.entry(name.clone())
                    .and_modify(|acc: &mut Vec<E>| {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            *a = *a + *b;
                        }
                    })
                    .or_insert(g);
            }
        }
        Ok(out)
    }
}

/// Fully connected layer, `[.., Din] -> [.., Dout]`.
#[derive(Debug, Clone)]
pub struct Linear<E: Scalar> {
    pub weight: Param<E>,
    pub bias: Param<E>,
}

impl<E: Scalar> Linear<E> {
    pub fn new(name: &str, din: usize, dout: usize, rng: &mut impl Rng) -> Self {
        Linear {
            weight: Param::he(format!("{name}.weight"), &[dout, din], din, rng),
            bias: Param::zeros(format!("{name}.bias"), &[dout]),
        }
    }

    /// Zero-initialized output projection (identity residual at init).
    pub fn new_zeroed(name: &str, din: usize, dout: usize) -> Self {
        Linear {
            weight: Param::zeros(format!("{name}.weight"), &[dout, din]),
            bias: Param::zeros(format!("{name}.bias"), &[dout]),
        }
    }

    pub fn forward(&self, ctx: &Forward<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        let w = ctx.param(&self.weight);
        let b = ctx.param(&self.bias);
        x.linear(&w, Some(&b))
    }
}

impl<E: Scalar> ParamSet<E> for Linear<E> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<E>)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Grouped convolution layer.
#[derive(Debug, Clone)]
pub struct Conv2d<E: Scalar> {
    pub weight: Param<E>,
    pub bias: Param<E>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl<E: Scalar> Conv2d<E> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let cg = cin / groups;
        Conv2d {
            weight: Param::he(format!("{name}.weight"), &[cout, cg, k, k], cg * k * k, rng),
            bias: Param::zeros(format!("{name}.bias"), &[cout]),
            stride,
            padding,
            groups,
        }
    }

    pub fn forward(&self, ctx: &Forward<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        let w = ctx.param(&self.weight);
        let b = ctx.param(&self.bias);
        x.conv2d(&w, Some(&b), self.stride, self.padding, self.groups)
    }
}

impl<E: Scalar> ParamSet<E> for Conv2d<E> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<E>)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Group normalization with learned per-channel affine.
#[derive(Debug, Clone)]
pub struct GroupNorm<E: Scalar> {
    pub gamma: Param<E>,
    pub beta: Param<E>,
    pub groups: usize,
    pub eps: E,
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

impl<E: Scalar> GroupNorm<E> {
    pub fn new(name: &str, channels: usize, groups: usize) -> Self {
        GroupNorm {
            gamma: Param::ones(format!("{name}.gamma"), &[channels]),
            beta: Param::zeros(format!("{name}.beta"), &[channels]),
            groups,
            eps: E::from_f64(GROUP_NORM_EPS),
        }
    }

    pub fn forward(&self, ctx: &Forward<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        let gamma = ctx.param(&self.gamma);
        let beta = ctx.param(&self.beta);
        x.group_norm(self.groups, &gamma, &beta, self.eps)
    }
}

impl<E: Scalar> ParamSet<E> for GroupNorm<E> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<E>)) {
        f(&self.gamma);
        f(&self.beta);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

struct AdamState<E: Scalar> {
    m: Vec<E>,
    v: Vec<E>,
    t: u64,
}

/// Adam with per-parameter state keyed by canonical name.
pub struct Adam<E: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: HashMap<String, AdamState<E>>,
}

impl<E: Scalar> Adam<E> {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            state: HashMap::new(),
        }
    }

    /// Apply one update to `param` given its gradient.
    pub fn step(&mut self, param: &mut Param<E>, grad: &[E]) {
        let st = self.state.entry(param.name.clone()).or_insert_with(|| AdamState {
            m: vec![E::zero(); grad.len()],
            v: vec![E::zero(); grad.len()],
            t: 0,
        });
        st.t += 1;
        let b1 = E::from_f64(self.beta1);
        let b2 = E::from_f64(self.beta2);
        let lr = self.lr * (1.0 - self.beta2.powi(st.t as i32)).sqrt()
            / (1.0 - self.beta1.powi(st.t as i32));
        let lr = E::from_f64(lr);
        let eps = E::from_f64(self.eps);
        for i in 0..grad.len() {
            st.m[i] = b1 * st.m[i] + (E::one() - b1) * grad[i];
            st.v[i] = b2 * st.v[i] + (E::one() - b2) * grad[i] * grad[i];
            param.value[i] = param.value[i] - lr * st.m[i] / (st.v[i].sqrt() + eps);
        }
    }

    /// Update every parameter of `model` that has a gradient in `grads`.
    pub fn apply(&mut self, model: &mut dyn ParamSet<E>, grads: &HashMap<String, Vec<E>>) {
        model.visit_mut(&mut |p| {
            if let Some(g) = grads.get(&p.name) {
                debug_assert_eq!(g.len(), p.numel(), "grad size mismatch for {}", p.name);
                self.step_inner(p, g);
            }
        });
    }

    fn step_inner(&mut self, param: &mut Param<E>, grad: &[E]) {
        self.step(param, grad)
    }
}
