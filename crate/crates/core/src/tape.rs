//! Reverse-mode autodiff over dynamic-dimension f64 arrays.
//!
//! A `Tape` is rebuilt for every training step: leaves (parameters, probe
//! inputs) and constants (data, noise) are pushed first, ops append nodes
//! eagerly, and `backward` walks the node list in reverse. Node order is a
//! valid topological order by construction, so no explicit sort is needed.
//!
//! All arithmetic is f64 and every loop runs in a fixed order, so a fixed
//! seed gives bitwise-identical results across runs. Rayon is used only
//! where each task owns a disjoint output slice.

use ndarray::{concatenate, ArrayD, Axis, Ix2, IxDyn, Zip};
use rayon::prelude::*;

use crate::error::{Error, Result};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(pub(crate) usize);

type BackFn = Box<dyn FnOnce(&ArrayD<f64>, &Tape) -> Vec<(NodeId, ArrayD<f64>)>>;

struct Node {
    value: ArrayD<f64>,
    needs_grad: bool,
    backward: Option<BackFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients keyed by node id, produced by `Tape::backward`.
pub struct Grads {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    pub fn get(&self, id: NodeId) -> Option<&ArrayD<f64>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
    pub fn take(&mut self, id: NodeId) -> Option<ArrayD<f64>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

/// Right-aligned (numpy-style) broadcast of two shapes.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        if da == db {
            out[i] = da;
        } else if da == 1 {
            out[i] = db;
        } else if db == 1 {
            out[i] = da;
        } else {
            return None;
        }
    }
    Some(out)
}

/// Sum `g` down to `shape` (inverse of broadcasting `shape` up to `g`'s shape).
fn reduce_to_shape(g: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    let mut out = g.clone();
    while out.ndim() > shape.len() {
        out = out.sum_axis(Axis(0));
    }
    for (ax, (&have, &want)) in out.shape().to_vec().iter().zip(shape.iter()).enumerate() {
        if want == 1 && have != 1 {
            out = out.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<f64>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, needs_grad, backward: None });
        NodeId(self.nodes.len() - 1)
    }

    fn set_backward(&mut self, id: NodeId, f: BackFn) {
        self.nodes[id.0].backward = Some(f);
    }

    /// Input that never receives gradient (data, noise, fixed embeddings).
    pub fn constant(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, false)
    }

    /// Differentiable input (parameter or probe).
    pub fn leaf(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, true)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.len(), 1, "scalar_value on non-scalar node");
        *v.iter().next().unwrap()
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.needs_grad(i))
    }

    /// Reverse pass from a scalar root. Consumes the recorded closures, so a
    /// tape supports one backward call.
    pub fn backward(&mut self, root: NodeId) -> Grads {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::ones(self.nodes[root.0].value.raw_dim()));
        for i in (0..=root.0).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            if let Some(f) = self.nodes[i].backward.take() {
                let g = grads[i].clone().unwrap();
                for (pid, pg) in f(&g, self) {
                    if !self.nodes[pid.0].needs_grad {
                        continue;
                    }
                    debug_assert_eq!(
                        pg.shape(),
                        self.nodes[pid.0].value.shape(),
                        "gradient shape mismatch into node {}",
                        pid.0
                    );
                    match &mut grads[pid.0] {
                        Some(acc) => *acc += &pg,
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
        }
        Grads { grads }
    }

    // ---- elementwise binary ops (broadcasting) -------------------------------

    fn broadcast_values(&self, a: NodeId, b: NodeId) -> (Vec<usize>, ArrayD<f64>) {
        let (va, vb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(va.shape(), vb.shape())
            .unwrap_or_else(|| panic!("incompatible shapes {:?} vs {:?}", va.shape(), vb.shape()));
        let ba = va.broadcast(IxDyn(&shape)).unwrap();
        let bb = vb.broadcast(IxDyn(&shape)).unwrap();
        let mut out = ArrayD::zeros(IxDyn(&shape));
        Zip::from(&mut out).and(&ba).and(&bb).for_each(|o, &x, &y| *o = x + y);
        (shape, out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (_, out) = self.broadcast_values(a, b);
        let ng = self.any_grad(&[a, b]);
        let id = self.push(out, ng);
        if ng {
            self.set_backward(
                id,
                Box::new(move |g, t| {
                    vec![
                        (a, reduce_to_shape(g, t.value(a).shape())),
                        (b, reduce_to_shape(g, t.value(b).shape())),
                    ]
                }),
            );
        }
        id
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let nb = self.neg(b);
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(va.shape(), vb.shape())
            .unwrap_or_else(|| panic!("incompatible shapes {:?} vs {:?}", va.shape(), vb.shape()));
        let ba = va.broadcast(IxDyn(&shape)).unwrap();
        let bb = vb.broadcast(IxDyn(&shape)).unwrap();
        let mut out = ArrayD::zeros(IxDyn(&shape));
        Zip::from(&mut out).and(&ba).and(&bb).for_each(|o, &x, &y| *o = x * y);
        let ng = self.any_grad(&[a, b]);
        let id = self.push(out, ng);
        if ng {
            self.set_backward(
                id,
                Box::new(move |g, t| {
                    let (va, vb) = (t.value(a), t.value(b));
                    let shape = g.shape();
                    let ba = va.broadcast(IxDyn(shape)).unwrap();
                    let bb = vb.broadcast(IxDyn(shape)).unwrap();
                    let ga_full = g * &bb;
                    let gb_full = g * &ba;
                    vec![
                        (a, reduce_to_shape(&ga_full, va.shape())),
                        (b, reduce_to_shape(&gb_full, vb.shape())),
                    ]
                }),
            );
        }
        id
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(va.shape(), vb.shape())
            .unwrap_or_else(|| panic!("incompatible shapes {:?} vs {:?}", va.shape(), vb.shape()));
        let ba = va.broadcast(IxDyn(&shape)).unwrap();
        let bb = vb.broadcast(IxDyn(&shape)).unwrap();
        let mut out = ArrayD::zeros(IxDyn(&shape));
        Zip::from(&mut out).and(&ba).and(&bb).for_each(|o, &x, &y| *o = x / y);
        let ng = self.any_grad(&[a, b]);
        let id = self.push(out, ng);
        if ng {
            self.set_backward(
                id,
                Box::new(move |g, t| {
                    let (va, vb) = (t.value(a), t.value(b));
                    let shape = g.shape();
                    let ba = va.broadcast(IxDyn(shape)).unwrap();
                    let bb = vb.broadcast(IxDyn(shape)).unwrap();
                    let mut ga_full = ArrayD::zeros(IxDyn(shape));
                    let mut gb_full = ArrayD::zeros(IxDyn(shape));
                    Zip::from(&mut ga_full).and(g).and(&bb).for_each(|o, &gv, &y| *o = gv / y);
                    Zip::from(&mut gb_full)
                        .and(g)
                        .and(&ba)
                        .and(&bb)
                        .for_each(|o, &gv, &x, &y| *o = -gv * x / (y * y));
                    vec![
                        (a, reduce_to_shape(&ga_full, va.shape())),
                        (b, reduce_to_shape(&gb_full, vb.shape())),
                    ]
                }),
            );
        }
        id
    }

    // ---- elementwise unary ops ----------------------------------------------

    fn unary(
        &mut self,
        a: NodeId,
        fwd: impl Fn(f64) -> f64,
        back: impl Fn(f64, f64) -> f64 + 'static, // (x, out) -> d out / d x
    ) -> NodeId {
        let out = self.value(a).mapv(fwd);
        let ng = self.needs_grad(a);
        let id = self.push(out, ng);
        if ng {
            self.set_backward(
                id,
                Box::new(move |g, t| {
                    let x = t.value(a);
                    let y = t.value(id);
                    let mut ga = ArrayD::zeros(x.raw_dim());
                    Zip::from(&mut ga)
                        .and(g)
                        .and(x)
                        .and(y)
                        .for_each(|o, &gv, &xv, &yv| *o = gv * back(xv, yv));
                    vec![(a, ga)]
                }),
            );
        }
        id
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| -x, |_, _| -1.0)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, move |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, move |x| x + c, |_, _| 1.0)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::exp, |_, y| y)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), |_, y| y * (1.0 - y))
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        self.unary(
            a,
            |x| x / (1.0 + (-x).exp()),
            |x, _| {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    // ---- shape ops ------------------------------------------------------------

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let v = self.value(a);
        let v = if v.is_standard_layout() { v.clone() } else { v.as_standard_layout().to_owned() };
        let out = v
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        let ng = self.needs_grad(a);
        let id = self.push(out, ng);
        if ng {
            self.set_backward(
                id,
                Box::new(move |g, t| {
                    let target = t.value(a).raw_dim();
                    let g = if g.is_standard_layout() {
                        g.clone()
                    } else {
                        g.as_standard_layout().to_owned()
                    };
                    vec![(a, g.into_shape_with_order(target).unwrap())]
                }),
            );
        }
        id
    }

    pub fn permute(&mut self, a: NodeId, axes: &[usize]) -> NodeId {
        let out = self.value(a).clone().permuted_axes(IxDyn(axes)).as_standard_layout().to_owned();
        let ng = self.needs_grad(a);
        let axes_owned = axes.to_vec();
        let id = self.push(out, ng);
        if ng {
            self.set_backward(
                id,
                Box::new(move |g, _| {
                    let mut inv = vec![0usize; axes_owned.len()];
                    for (i, &ax) in axes_owned.iter().enumerate() {
                        inv[ax] = i;
                    }
                    vec![(a, g.clone().permuted_axes(IxDyn(&inv)).as_standard_layout().to_owned())]
                }),
            );
        }
        id
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = concatenate(Axis(axis), &views).expect("concat: incompatible shapes");
        let ng = self.any_grad(parts);
        let parts_owned = parts.to_vec();
        let id = self.push(out, ng);
        if ng {
            self.set_backward(
                id,
                Box::new(move |g, t| {
                    let mut res = Vec::with_capacity(parts_owned.len());
                    let mut offset = 0usize;
                    for &p in &parts_owned {
                        let len = t.value(p).shape()[axis];
                        let sl = g
                            .slice_axis(Axis(axis), ndarray::Slice::from(offset..offset + len))
                            .to_owned();
                        res.push((p, sl));
                        offset += len;
                    }
                    res
                }),
            );
        }
        id
    }

    pub fn slice_axis(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> NodeId {
        let out = self
            .value(a)
            .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
            .to_owned();
        let ng = self.needs_grad(a);
        let id = self.push(out, ng);
        if ng {
            self.set_backward(
                id,
                Box::new(move |g, t| {
                    let mut ga = ArrayD::zeros(t.value(a).raw_dim());
                    ga.slice_axis_mut(Axis(axis), ndarray::Slice::from(start..start + len))
                        .assign(g);
                    vec![(a, ga)]
                }),
            );
        }
        id
    }

    /// Gather along `axis`; duplicate indices are allowed (backward scatter-adds).
    pub fn index_select(&mut self, a: NodeId, axis: usize, indices: Vec<usize>) -> NodeId {
        let out = self.value(a).select(Axis(axis), &indices);
        let ng = self.needs_grad(a);
        let id = self.push(out, ng);
        if ng {
            self.set_backward(
                id,
                Box::new(move |g, t| {
                    let mut ga = ArrayD::zeros(t.value(a).raw_dim());
                    for (j, &i) in indices.iter().enumerate() {
                        let src = g.index_axis(Axis(axis), j);
                        let mut dst = ga.index_axis_mut(Axis(axis), i);
                        dst += &src;
                    }
                    vec![(a, ga)]
                }),
            );
        }
        id
    }

    // ---- reductions -------------------------------------------------------------

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).sum();
        let ng = self.needs_grad(a);
        let id = self.push(ArrayD::from_elem(IxDyn(&[]), s), ng);
        if ng {
            self.set_backward(
                id,
                Box::new(move |g, t| {
                    let gv = *g.iter().next().unwrap();
                    vec![(a, ArrayD::from_elem(t.value(a).raw_dim(), gv))]
                }),
            );
        }
        id
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum along `axis`, keeping the axis with length 1.
    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> NodeId {
        let out = self.value(a).sum_axis(Axis(axis)).insert_axis(Axis(axis));
        let ng = self.needs_grad(a);
        let id = self.push(out, ng);
        if ng {
            self.set_backward(
                id,
                Box::new(move |g, t| {
                    let shape = t.value(a).shape().to_vec();
                    let gb = g.broadcast(IxDyn(&shape)).unwrap().to_owned();
                    vec![(a, gb)]
                }),
            );
        }
        id
    }

    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> NodeId {
        let n = self.value(a).shape()[axis] as f64;
        let s = self.sum_axis(a, axis);
        self.scale(s, 1.0 / n)
    }

    // ---- softmax family ----------------------------------------------------------

    pub fn softmax(&mut self, a: NodeId, axis: usize) -> NodeId {
        let x = self.value(a);
        let mut out = x.clone();
        for mut lane in out.lanes_mut(Axis(axis)) {
            let m = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in lane.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in lane.iter_mut() {
                *v /= z;
            }
        }
        let ng = self.needs_grad(a);
        let id = self.push(out, ng);
        if ng {
            self.set_backward(
                id,
                Box::new(move |g, t| {
                    let y = t.value(id);
                    let mut ga = ArrayD::zeros(y.raw_dim());
                    Zip::from(ga.lanes_mut(Axis(axis)))
                        .and(g.lanes(Axis(axis)))
                        .and(y.lanes(Axis(axis)))
                        .for_each(|mut gl, gv, yv| {
                            let dot: f64 = gv.iter().zip(yv.iter()).map(|(a, b)| a * b).sum();
                            for ((o, &gi), &yi) in gl.iter_mut().zip(gv.iter()).zip(yv.iter()) {
                                *o = yi * (gi - dot);
                            }
                        });
                    vec![(a, ga)]
                }),
            );
        }
        id
    }

    pub fn log_softmax(&mut self, a: NodeId, axis: usize) -> NodeId {
        let x = self.value(a);
        let mut out = x.clone();
        for mut lane in out.lanes_mut(Axis(axis)) {
            let m = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = lane.iter().map(|&v| (v - m).exp()).sum();
            let lz = m + z.ln();
            for v in lane.iter_mut() {
                *v -= lz;
            }
        }
        let ng = self.needs_grad(a);
        let id = self.push(out, ng);
        if ng {
            self.set_backward(
                id,
                Box::new(move |g, t| {
                    let y = t.value(id);
                    let mut ga = ArrayD::zeros(y.raw_dim());
                    Zip::from(ga.lanes_mut(Axis(axis)))
                        .and(g.lanes(Axis(axis)))
                        .and(y.lanes(Axis(axis)))
                        .for_each(|mut gl, gv, yv| {
                            let gsum: f64 = gv.iter().sum();
                            for ((o, &gi), &yi) in gl.iter_mut().zip(gv.iter()).zip(yv.iter()) {
                                *o = gi - yi.exp() * gsum;
                            }
                        });
                    vec![(a, ga)]
                }),
            );
        }
        id
    }

    // ---- linear algebra ------------------------------------------------------------

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let va = self.value(a).view().into_dimensionality::<Ix2>().expect("matmul lhs not 2-d");
        let vb = self.value(b).view().into_dimensionality::<Ix2>().expect("matmul rhs not 2-d");
        let out = va.dot(&vb).into_dyn();
        let ng = self.any_grad(&[a, b]);
        let id = self.push(out, ng);
        if ng {
            self.set_backward(
                id,
                Box::new(move |g, t| {
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    let va = t.value(a).view().into_dimensionality::<Ix2>().unwrap();
                    let vb = t.value(b).view().into_dimensionality::<Ix2>().unwrap();
                    vec![
                        (a, g2.dot(&vb.t()).into_dyn()),
                        (b, va.t().dot(&g2).into_dyn()),
                    ]
                }),
            );
        }
        id
    }

    /// Batched matmul: `[n,p,q] x [n,q,r] -> [n,p,r]`.
    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.ndim(), 3, "bmm lhs must be 3-d");
        assert_eq!(vb.ndim(), 3, "bmm rhs must be 3-d");
        let (n, p, q) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        let (nb, qb, r) = (vb.shape()[0], vb.shape()[1], vb.shape()[2]);
        assert_eq!(n, nb, "bmm batch mismatch");
        assert_eq!(q, qb, "bmm inner-dim mismatch");
        let mut out = ArrayD::zeros(IxDyn(&[n, p, r]));
        {
            let va3 = va.view().into_dimensionality::<ndarray::Ix3>().unwrap();
            let vb3 = vb.view().into_dimensionality::<ndarray::Ix3>().unwrap();
            let mut out3 = out.view_mut().into_dimensionality::<ndarray::Ix3>().unwrap();
            Zip::from(out3.outer_iter_mut())
                .and(va3.outer_iter())
                .and(vb3.outer_iter())
                .par_for_each(|mut o, x, y| o.assign(&x.dot(&y)));
        }
        let ng = self.any_grad(&[a, b]);
        let id = self.push(out, ng);
        if ng {
            self.set_backward(
                id,
                Box::new(move |g, t| {
                    let g3 = g.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                    let va3 =
                        t.value(a).view().into_dimensionality::<ndarray::Ix3>().unwrap();
                    let vb3 =
                        t.value(b).view().into_dimensionality::<ndarray::Ix3>().unwrap();
                    let mut ga = ndarray::Array3::<f64>::zeros(va3.raw_dim());
                    let mut gb = ndarray::Array3::<f64>::zeros(vb3.raw_dim());
                    Zip::from(ga.outer_iter_mut())
                        .and(g3.outer_iter())
                        .and(vb3.outer_iter())
                        .par_for_each(|mut o, gg, y| o.assign(&gg.dot(&y.t())));
                    Zip::from(gb.outer_iter_mut())
                        .and(g3.outer_iter())
                        .and(va3.outer_iter())
                        .par_for_each(|mut o, gg, x| o.assign(&x.t().dot(&gg)));
                    vec![(a, ga.into_dyn()), (b, gb.into_dyn())]
                }),
            );
        }
        id
    }

    // ---- spatial ops ------------------------------------------------------------------

    /// 2-D convolution, `x: [n, ci, h, w]`, `w: [co, ci, kh, kw]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> NodeId {
        let (vx, vw) = (self.value(x), self.value(w));
        assert_eq!(vx.ndim(), 4, "conv2d input must be 4-d");
        assert_eq!(vw.ndim(), 4, "conv2d weight must be 4-d");
        let (n, ci, h, wd) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
        let (co, ciw, kh, kw) = (vw.shape()[0], vw.shape()[1], vw.shape()[2], vw.shape()[3]);
        assert_eq!(ci, ciw, "conv2d channel mismatch");
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let wmat = vw
            .view()
            .into_shape_with_order((co, ci * kh * kw))
            .unwrap()
            .to_owned();
        let mut out = ArrayD::zeros(IxDyn(&[n, co, oh, ow]));
        {
            let vx4 = vx.view().into_dimensionality::<ndarray::Ix4>().unwrap();
            let mut o4 = out.view_mut().into_dimensionality::<ndarray::Ix4>().unwrap();
            Zip::from(o4.outer_iter_mut()).and(vx4.outer_iter()).par_for_each(|mut on, xn| {
                let cols = im2col(&xn, kh, kw, stride, pad, oh, ow);
                let y = wmat.dot(&cols); // [co, oh*ow]
                on.assign(&y.into_shape_with_order((co, oh, ow)).unwrap());
            });
        }
        let ng = self.any_grad(&[x, w]);
        let id = self.push(out, ng);
        if ng {
            self.set_backward(
                id,
                Box::new(move |g, t| {
                    let vx4 = t
                        .value(x)
                        .view()
                        .into_dimensionality::<ndarray::Ix4>()
                        .unwrap();
                    let vw = t.value(w);
                    let (co2, ci2, kh2, kw2) =
                        (vw.shape()[0], vw.shape()[1], vw.shape()[2], vw.shape()[3]);
                    let wmat = vw
                        .view()
                        .into_shape_with_order((co2, ci2 * kh2 * kw2))
                        .unwrap()
                        .to_owned();
                    let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                    let (oh2, ow2) = (g4.shape()[2], g4.shape()[3]);
                    // Per-sample partials collected in order, reduced serially:
                    // deterministic regardless of thread count.
                    let parts: Vec<(ndarray::Array2<f64>, ndarray::Array3<f64>)> = g4
                        .outer_iter()
                        .into_par_iter()
                        .zip(vx4.outer_iter().into_par_iter())
                        .map(|(gn, xn)| {
                            let cols = im2col(&xn, kh2, kw2, stride, pad, oh2, ow2);
                            let gmat = gn
                                .to_owned()
                                .into_shape_with_order((co2, oh2 * ow2))
                                .unwrap();
                            let gw = gmat.dot(&cols.t());
                            let gcols = wmat.t().dot(&gmat);
                            let gx = col2im(
                                &gcols,
                                ci2,
                                xn.shape()[1],
                                xn.shape()[2],
                                kh2,
                                kw2,
                                stride,
                                pad,
                                oh2,
                                ow2,
                            );
                            (gw, gx)
                        })
                        .collect();
                    let mut gw_total = ndarray::Array2::<f64>::zeros((co2, ci2 * kh2 * kw2));
                    let mut gx_total = ndarray::Array4::<f64>::zeros(vx4.raw_dim());
                    for (i, (gw, gx)) in parts.into_iter().enumerate() {
                        gw_total += &gw;
                        gx_total.index_axis_mut(Axis(0), i).assign(&gx);
                    }
                    vec![
                        (x, gx_total.into_dyn()),
                        (
                            w,
                            gw_total
                                .into_shape_with_order(IxDyn(&[co2, ci2, kh2, kw2]))
                                .unwrap(),
                        ),
                    ]
                }),
            );
        }
        id
    }

    /// Bilinear resize with half-pixel centers (align_corners = false),
    /// `x: [n, c, h, w] -> [n, c, oh, ow]`.
    pub fn bilinear2d(&mut self, x: NodeId, oh: usize, ow: usize) -> NodeId {
        let vx = self.value(x);
        assert_eq!(vx.ndim(), 4, "bilinear2d input must be 4-d");
        let (n, c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
        let (ys, xs) = (bilinear_weights(h, oh), bilinear_weights(w, ow));
        let mut out = ArrayD::zeros(IxDyn(&[n, c, oh, ow]));
        {
            let vx4 = vx.view().into_dimensionality::<ndarray::Ix4>().unwrap();
            let mut o4 = out.view_mut().into_dimensionality::<ndarray::Ix4>().unwrap();
            for i in 0..n {
                for ch in 0..c {
                    for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
                        for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                            let v = (1.0 - wy) * (1.0 - wx) * vx4[[i, ch, y0, x0]]
                                + (1.0 - wy) * wx * vx4[[i, ch, y0, x1]]
                                + wy * (1.0 - wx) * vx4[[i, ch, y1, x0]]
                                + wy * wx * vx4[[i, ch, y1, x1]];
                            o4[[i, ch, oy, ox]] = v;
                        }
                    }
                }
            }
        }
        let ng = self.needs_grad(x);
        let id = self.push(out, ng);
        if ng {
            self.set_backward(
                id,
                Box::new(move |g, t| {
                    let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                    let mut ga = ndarray::Array4::<f64>::zeros(
                        t.value(x)
                            .view()
                            .into_dimensionality::<ndarray::Ix4>()
                            .unwrap()
                            .raw_dim(),
                    );
                    for i in 0..n {
                        for ch in 0..g4.shape()[1] {
                            for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
                                for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                                    let gv = g4[[i, ch, oy, ox]];
                                    ga[[i, ch, y0, x0]] += gv * (1.0 - wy) * (1.0 - wx);
                                    ga[[i, ch, y0, x1]] += gv * (1.0 - wy) * wx;
                                    ga[[i, ch, y1, x0]] += gv * wy * (1.0 - wx);
                                    ga[[i, ch, y1, x1]] += gv * wy * wx;
                                }
                            }
                        }
                    }
                    vec![(x, ga.into_dyn())]
                }),
            );
        }
        id
    }

    /// Nearest-neighbour 2x upsample, `[n, c, h, w] -> [n, c, 2h, 2w]`.
    pub fn upsample_nearest2x(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        assert_eq!(vx.ndim(), 4);
        let (n, c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
        let vx4 = vx.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let mut out = ndarray::Array4::<f64>::zeros((n, c, 2 * h, 2 * w));
        for i in 0..n {
            for ch in 0..c {
                for y in 0..2 * h {
                    for x2 in 0..2 * w {
                        out[[i, ch, y, x2]] = vx4[[i, ch, y / 2, x2 / 2]];
                    }
                }
            }
        }
        let ng = self.needs_grad(x);
        let id = self.push(out.into_dyn(), ng);
        if ng {
            self.set_backward(
                id,
                Box::new(move |g, _| {
                    let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                    let mut ga = ndarray::Array4::<f64>::zeros((n, c, h, w));
                    for i in 0..n {
                        for ch in 0..c {
                            for y in 0..2 * h {
                                for x2 in 0..2 * w {
                                    ga[[i, ch, y / 2, x2 / 2]] += g4[[i, ch, y, x2]];
                                }
                            }
                        }
                    }
                    vec![(x, ga.into_dyn())]
                }),
            );
        }
        id
    }
}

/// Per-axis bilinear interpolation table: `(lo, hi, weight_on_hi)` per output
/// index, half-pixel convention with edge clamping.
fn bilinear_weights(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

fn im2col(
    x: &ndarray::ArrayView3<f64>, // [ci, h, w]
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> ndarray::Array2<f64> {
    let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut cols = ndarray::Array2::<f64>::zeros((ci * kh * kw, oh * ow));
    for c in 0..ci {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[[row, oy * ow + ox]] = x[[c, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &ndarray::Array2<f64>, // [ci*kh*kw, oh*ow]
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> ndarray::Array3<f64> {
    let mut x = ndarray::Array3::<f64>::zeros((ci, h, w));
    for c in 0..ci {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[[c, iy as usize, ix as usize]] += cols[[row, oy * ow + ox]];
                    }
                }
            }
        }
    }
    x
}

/// Shape agreement check used by contract-sensitive callers.
pub fn check_same_shape(what: &str, a: &ArrayD<f64>, b: &ArrayD<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Contract(format!(
            "{what}: shape {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}
