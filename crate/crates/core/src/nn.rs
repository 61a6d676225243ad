//! Parameter storage, the Adam optimizer, and layer-level building blocks
//! shared by the backbone and the causal blocks.
//!
//! Parameters live in a flat name → array map. Layers are wiring functions
//! that read their parameters by dotted path from the per-step node map, so
//! checkpointing, trainable-set filtering and block deletion are all plain
//! string-prefix operations.

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use crate::rng::randn;
use crate::tape::{Grads, NodeId, Tape};

/// Flat named parameter map. Iteration order is insertion order; checkpoints
/// sort by name so on-disk layout does not depend on build order.
#[derive(Clone, Default)]
pub struct ParamStore {
    params: IndexMap<String, ArrayD<f64>>,
}

/// Per-step map from parameter name to its leaf node on the tape.
pub type ParamNodes = IndexMap<String, NodeId>;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        let name = name.into();
        assert!(
            self.params.insert(name.clone(), value).is_none(),
            "duplicate parameter {name}"
        );
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<f64>> {
        self.params.get_mut(name)
    }

    pub fn remove_prefix(&mut self, prefix: &str) -> usize {
        let before = self.params.len();
        self.params.retain(|k, _| !k.starts_with(prefix));
        before - self.params.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|v| v.len()).sum()
    }

    pub fn merge(&mut self, other: ParamStore) {
        for (k, v) in other.params {
            self.insert(k, v);
        }
    }

    /// Push every parameter onto the tape as a differentiable leaf.
    pub fn leaf_all(&self, tape: &mut Tape) -> ParamNodes {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
            .collect()
    }

    /// Push every parameter as a constant: no backward bookkeeping, for
    /// inference passes.
    pub fn constant_all(&self, tape: &mut Tape) -> ParamNodes {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
            .collect()
    }

    /// Collect named gradients after a backward pass.
    pub fn collect_grads(&self, nodes: &ParamNodes, grads: &mut Grads) -> IndexMap<String, ArrayD<f64>> {
        let mut out = IndexMap::new();
        for (name, &id) in nodes {
            if let Some(g) = grads.take(id) {
                out.insert(name.clone(), g);
            }
        }
        out
    }
}

pub fn node(nodes: &ParamNodes, name: &str) -> NodeId {
    *nodes
        .get(name)
        .unwrap_or_else(|| panic!("parameter {name} not on tape"))
}

// ---- optimizer -------------------------------------------------------------------

/// Adam with bias correction.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: IndexMap<String, ArrayD<f64>>,
    v: IndexMap<String, ArrayD<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam { lr, beta1, beta2, eps: 1e-8, t: 0, m: IndexMap::new(), v: IndexMap::new() }
    }

    /// Apply one update. Only parameters present in `grads` and accepted by
    /// `trainable` move; moment state is kept per parameter name.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &IndexMap<String, ArrayD<f64>>,
        trainable: &dyn Fn(&str) -> bool,
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            if !trainable(name) {
                continue;
            }
            let p = store.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(p.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(p.raw_dim()));
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }

    /// Moment state as named arrays for checkpointing.
    pub fn export_state(&self) -> Vec<(String, ArrayD<f64>)> {
        let mut out = Vec::new();
        for (k, v) in &self.m {
            out.push((format!("opt.m.{k}"), v.clone()));
        }
        for (k, v) in &self.v {
            out.push((format!("opt.v.{k}"), v.clone()));
        }
        out
    }

    pub fn import_state(&mut self, t: u64, arrays: impl Iterator<Item = (String, ArrayD<f64>)>) {
        self.t = t;
        for (k, v) in arrays {
            if let Some(rest) = k.strip_prefix("opt.m.") {
                self.m.insert(rest.to_string(), v);
            } else if let Some(rest) = k.strip_prefix("opt.v.") {
                self.v.insert(rest.to_string(), v);
            }
        }
    }
}

// ---- initializers ----------------------------------------------------------------

/// Fan-in scaled normal init.
pub fn init_linear(
    store: &mut ParamStore,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
    zero: bool,
) {
    let w = if zero {
        ArrayD::zeros(IxDyn(&[fan_in, fan_out]))
    } else {
        randn(rng, &[fan_in, fan_out]).mapv(|v| v / (fan_in as f64).sqrt())
    };
    store.insert(format!("{name}.w"), w);
    store.insert(format!("{name}.b"), ArrayD::zeros(IxDyn(&[fan_out])));
}

pub fn init_conv2d(
    store: &mut ParamStore,
    name: &str,
    ci: usize,
    co: usize,
    k: usize,
    rng: &mut impl Rng,
    zero: bool,
) {
    let fan_in = (ci * k * k) as f64;
    let w = if zero {
        ArrayD::zeros(IxDyn(&[co, ci, k, k]))
    } else {
        randn(rng, &[co, ci, k, k]).mapv(|v| v / fan_in.sqrt())
    };
    store.insert(format!("{name}.w"), w);
    store.insert(format!("{name}.b"), ArrayD::zeros(IxDyn(&[co])));
}

pub fn init_group_norm(store: &mut ParamStore, name: &str, c: usize) {
    store.insert(format!("{name}.g"), ArrayD::ones(IxDyn(&[c])));
    store.insert(format!("{name}.b"), ArrayD::zeros(IxDyn(&[c])));
}

// ---- layer wiring ----------------------------------------------------------------

/// `x: [.., in] -> [.., out]`, applied over the last axis.
pub fn linear(tape: &mut Tape, nodes: &ParamNodes, name: &str, x: NodeId) -> NodeId {
    let w = node(nodes, &format!("{name}.w"));
    let b = node(nodes, &format!("{name}.b"));
    let shape = tape.value(x).shape().to_vec();
    let fan_in = *shape.last().unwrap();
    let rows: usize = shape[..shape.len() - 1].iter().product();
    let x2 = tape.reshape(x, &[rows, fan_in]);
    let y = tape.matmul(x2, w);
    let yb = tape.add(y, b);
    let fan_out = tape.value(w).shape()[1];
    let mut out_shape = shape;
    *out_shape.last_mut().unwrap() = fan_out;
    tape.reshape(yb, &out_shape)
}

/// 2-D convolution with bias, `x: [n, ci, h, w]`.
pub fn conv2d(
    tape: &mut Tape,
    nodes: &ParamNodes,
    name: &str,
    x: NodeId,
    stride: usize,
    pad: usize,
) -> NodeId {
    let w = node(nodes, &format!("{name}.w"));
    let b = node(nodes, &format!("{name}.b"));
    let y = tape.conv2d(x, w, stride, pad);
    let co = tape.value(b).shape()[0];
    let b4 = tape.reshape(b, &[1, co, 1, 1]);
    tape.add(y, b4)
}

/// GroupNorm over `[n, c, h, w]`; normalizes each (sample, group) slice.
pub fn group_norm(
    tape: &mut Tape,
    nodes: &ParamNodes,
    name: &str,
    x: NodeId,
    groups: usize,
) -> NodeId {
    let g = node(nodes, &format!("{name}.g"));
    let b = node(nodes, &format!("{name}.b"));
    let shape = tape.value(x).shape().to_vec();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    assert!(c % groups == 0, "channels {c} not divisible by groups {groups}");
    let xg = tape.reshape(x, &[n, groups, (c / groups) * h * w]);
    let mu = tape.mean_axis(xg, 2);
    let centered = tape.sub(xg, mu);
    let sq = tape.mul(centered, centered);
    let var = tape.mean_axis(sq, 2);
    let veps = tape.add_scalar(var, 1e-5);
    let std = tape.sqrt(veps);
    let normed = tape.div(centered, std);
    let back = tape.reshape(normed, &[n, c, h, w]);
    let g4 = tape.reshape(g, &[1, c, 1, 1]);
    let b4 = tape.reshape(b, &[1, c, 1, 1]);
    let scaled = tape.mul(back, g4);
    tape.add(scaled, b4)
}

/// Single-head scaled dot-product attention.
/// `q: [n, t, c]`, `k/v: [n, s, c]` -> `[n, t, c]`.
pub fn attention(tape: &mut Tape, q: NodeId, k: NodeId, v: NodeId) -> NodeId {
    let c = *tape.value(q).shape().last().unwrap();
    let kt = tape.permute(k, &[0, 2, 1]);
    let scores = tape.bmm(q, kt);
    let scaled = tape.scale(scores, 1.0 / (c as f64).sqrt());
    let attn = tape.softmax(scaled, 2);
    tape.bmm(attn, v)
}

/// Sinusoidal embedding of a step index.
pub fn sinusoidal_embedding(k: usize, dim: usize) -> ArrayD<f64> {
    let mut v = vec![0.0f64; dim];
    let half = dim / 2;
    for i in 0..half {
        let freq = (10000f64).powf(-(i as f64) / half as f64);
        v[i] = (k as f64 * freq).sin();
        v[half + i] = (k as f64 * freq).cos();
    }
    ArrayD::from_shape_vec(IxDyn(&[dim]), v).unwrap()
}
