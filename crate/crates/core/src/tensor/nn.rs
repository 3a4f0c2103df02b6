//! Named parameter sets, initialization, and optimizers.
//!
//! Models are described as ordered lists of named tensors. A [`ParamSet`]
//! binds into a [`Graph`] either trainably (`bind`) or frozen
//! (`bind_frozen`); after `backward` the matching optimizer step updates the
//! master copies. The flat view underpins aggregation, robust aggregation
//! rules, checkpointing, and gradient-deviation measurements.

use std::collections::HashMap;

use rand::Rng;

use super::{Graph, Tensor, Var};

/// An ordered collection of named parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    items: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

/// Graph handles for a bound [`ParamSet`], parallel to its entries.
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        self.vars[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter '{name}'"
        );
        self.index.insert(name.clone(), self.items.len());
        self.items.push((name, t));
    }

    pub fn get(&self, name: &str) -> &Tensor {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"));
        &self.items[i].1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"));
        &mut self.items[i].1
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.items.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.items.iter().map(|(_, t)| t.len()).sum()
    }

    /// Bind all parameters as trainable leaves.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self.items.iter().map(|(_, t)| g.param(t.clone())).collect(),
            index: self.index.clone(),
        }
    }

    /// Bind all parameters as constants (no gradient accumulation).
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self.items.iter().map(|(_, t)| g.input(t.clone())).collect(),
            index: self.index.clone(),
        }
    }

    /// Plain SGD: `p -= lr * grad`. Parameters missing a gradient (unused in
    /// this graph) are left untouched.
    pub fn sgd_step(&mut self, g: &Graph, bound: &Bound, lr: f64) {
        for (i, (_, t)) in self.items.iter_mut().enumerate() {
            if let Some(grad) = g.grad(bound.vars[i]) {
                for (p, &gr) in t.data_mut().iter_mut().zip(grad) {
                    *p -= lr * gr;
                }
            }
        }
    }

    /// One Adam step with bias correction.
    pub fn adam_step(&mut self, g: &Graph, bound: &Bound, opt: &mut Adam) {
        opt.t += 1;
        let bc1 = 1.0 - opt.beta1.powi(opt.t as i32);
        let bc2 = 1.0 - opt.beta2.powi(opt.t as i32);
        if opt.m.is_empty() {
            opt.m = self.items.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
            opt.v = self.items.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        }
        for (i, (_, t)) in self.items.iter_mut().enumerate() {
            let Some(grad) = g.grad(bound.vars[i]) else {
                continue;
            };
            let (m, v) = (&mut opt.m[i], &mut opt.v[i]);
            for (j, (p, &gr)) in t.data_mut().iter_mut().zip(grad).enumerate() {
                m[j] = opt.beta1 * m[j] + (1.0 - opt.beta1) * gr;
                v[j] = opt.beta2 * v[j] + (1.0 - opt.beta2) * gr * gr;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *p -= opt.lr * mhat / (vhat.sqrt() + opt.eps);
            }
        }
    }

    /// Concatenate all parameters, in declaration order, into one vector.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for (_, t) in &self.items {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Overwrite all parameters from a flat vector (inverse of `flatten`).
    pub fn assign_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_scalars(), "flat length mismatch");
        let mut off = 0;
        for (_, t) in &mut self.items {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    /// True when both sets declare identical names and shapes in order.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.items.len() == other.items.len()
            && self
                .items
                .iter()
                .zip(&other.items)
                .all(|((n1, t1), (n2, t2))| n1 == n2 && t1.shape() == t2.shape())
    }

    /// (name, shape) pairs in declaration order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        self.items
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect()
    }
}

/// Adam optimizer state.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

/// Kaiming-uniform fan-in initialization for a conv kernel
/// `[cout, cin, kh, kw]`.
pub fn init_conv(
    ps: &mut ParamSet,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
    rng: &mut impl Rng,
) {
    let fan_in = (cin * k * k) as f64;
    let bound = (6.0 / fan_in).sqrt();
    let data = (0..cout * cin * k * k)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    ps.insert(format!("{name}.w"), Tensor::new(vec![cout, cin, k, k], data));
    ps.insert(format!("{name}.b"), Tensor::zeros(vec![cout]));
}

/// Kaiming-uniform fan-in initialization for a dense layer `[din, dout]`.
pub fn init_dense(ps: &mut ParamSet, name: &str, din: usize, dout: usize, rng: &mut impl Rng) {
    let bound = (6.0 / din as f64).sqrt();
    let data = (0..din * dout).map(|_| rng.gen_range(-bound..bound)).collect();
    ps.insert(format!("{name}.w"), Tensor::new(vec![din, dout], data));
    ps.insert(format!("{name}.b"), Tensor::zeros(vec![dout]));
}

/// conv + bias with the layer's named parameters.
pub fn conv_layer(
    g: &mut Graph,
    bound: &Bound,
    name: &str,
    x: Var,
    stride: usize,
    pad: usize,
) -> Var {
    let c = g.conv2d(x, bound.var(&format!("{name}.w")), stride, pad);
    g.bias_add4(c, bound.var(&format!("{name}.b")))
}

/// dense + bias with the layer's named parameters.
pub fn dense_layer(g: &mut Graph, bound: &Bound, name: &str, x: Var) -> Var {
    let y = g.matmul(x, bound.var(&format!("{name}.w")));
    g.bias_add2(y, bound.var(&format!("{name}.b")))
}
