//! Reverse-mode differentiation over a fixed set of tensor operations.
//!
//! A [`Tape`] is append-only: every recorded node refers only to earlier
//! nodes, so a single reverse sweep visits each node once. Backward rules
//! are the closed forms from [`crate::geometry`] and [`crate::losses`].

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, Curvature};
use crate::losses::{self, FlatSupervision, Supervision};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

/// Named parameters with paired gradient accumulators.
///
/// Equality compares names and values; accumulated gradients are scratch.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names && self.values == other.values
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces a parameter; its accumulator is reset to zeros.
    pub fn insert(&mut self, name: &str, value: Tensor) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        if let Some(id) = self.id(name) {
            self.values[id.0] = value;
            self.grads[id.0] = grad;
            return id;
        }
        self.names.push(name.to_string());
        self.values.push(value);
        self.grads.push(grad);
        ParamId(self.names.len() - 1)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.value(id))
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| g.fill(0.0));
    }

    /// Adds `scale · grads` into the accumulators.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) {
        for (id, g) in &grads.entries {
            self.grads[id.0].add_scaled(g, scale);
        }
    }

    /// Euclidean norm of all accumulated gradients together.
    pub fn grad_norm(&self) -> f64 {
        self.grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale_grads(&mut self, k: f64) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }
}

/// Parameter gradients produced by one backward sweep.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    entries: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.entries.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.entries.iter().map(|(k, v)| (*k, v))
    }

    /// Adds `g` to the entry for `id`, creating it if absent.
    pub fn insert(&mut self, id: ParamId, g: Tensor) {
        match self.entries.get_mut(&id) {
            Some(acc) => acc.add_assign(&g),
            None => {
                self.entries.insert(id, g);
            }
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Conv2d { input: Var, weight: Var, bias: Var },
    Act(Var, Activation),
    Sigmoid(Var),
    ExpMap0 { input: Var, c: Curvature },
    HyperplaneLogits { points: Var, offsets: Var, orientations: Var, c: Curvature },
    Reduce { input: Var, args: Vec<u32> },
    HierBce { anc: Var, desc: Var, sup: Arc<Supervision> },
    HierDice { desc: Var, sup: Arc<Supervision>, smooth: f64 },
    HierCe { desc: Var, sup: Arc<Supervision> },
    FlatCe { logits: Var, sup: Arc<FlatSupervision> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    param: Option<ParamId>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, requires_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    /// Trainable leaf copied from `store`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.push(Op::Leaf, store.value(id).clone(), true);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::ShapeMismatch(format!("add {:?} + {:?}", x.shape(), y.shape())));
        }
        let mut out = x.clone();
        out.add_assign(y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), out, rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|x| *x *= k);
        let rg = self.rg(a);
        self.push(Op::Scale(a, k), out, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Op::Sum(a), Tensor::scalar(s), rg)
    }

    /// Stride-1 same-padded convolution. `input` is `[H, W, Cin]`, `weight`
    /// `[k, k, Cin, Cout]` with odd `k`, `bias` `[Cout]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = conv2d_forward(self.value(input), self.value(weight), self.value(bias))?;
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(Op::Conv2d { input, weight, bias }, out, rg))
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Var {
        let mut out = self.value(a).clone();
        match act {
            Activation::Tanh => out.data_mut().iter_mut().for_each(|x| *x = x.tanh()),
            Activation::Relu => out.data_mut().iter_mut().for_each(|x| *x = x.max(0.0)),
        }
        let rg = self.rg(a);
        self.push(Op::Act(a, act), out, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|x| *x = sigmoid(*x));
        let rg = self.rg(a);
        self.push(Op::Sigmoid(a), out, rg)
    }

    /// Row-wise exponential map at the origin of a `[rows, N]` tensor.
    pub fn expmap0(&mut self, input: Var, c: Curvature) -> Var {
        let x = self.value(input);
        let cols = *x.shape().last().unwrap_or(&1);
        let mut out = Tensor::zeros(x.shape());
        for (src, dst) in x.data().chunks(cols).zip(out.data_mut().chunks_mut(cols)) {
            geometry::expmap0_into(src, c, dst);
        }
        let rg = self.rg(input);
        self.push(Op::ExpMap0 { input, c }, out, rg)
    }

    /// Logits `[P, K]` of `P` ball points against `K` hyperplanes.
    pub fn hyperplane_logits(
        &mut self,
        points: Var,
        offsets: Var,
        orientations: Var,
        c: Curvature,
    ) -> Result<Var> {
        let (x, o, r) = (self.value(points), self.value(offsets), self.value(orientations));
        let n = *x.shape().last().unwrap_or(&0);
        if o.shape().last() != Some(&n) || o.shape() != r.shape() {
            return Err(Error::ShapeMismatch(format!(
                "hyperplane logits: points {:?}, offsets {:?}, orientations {:?}",
                x.shape(),
                o.shape(),
                r.shape()
            )));
        }
        let p = x.len() / n.max(1);
        let k = o.len() / n.max(1);
        let out = Tensor::from_vec(&[p, k], geometry::hyperplane_logits_batch(x.data(), o.data(), r.data(), n, c)?)?;
        let rg = self.rg(points) || self.rg(offsets) || self.rg(orientations);
        Ok(self.push(Op::HyperplaneLogits { points, offsets, orientations, c }, out, rg))
    }

    /// Minimum (or maximum) over per-column closure lists.
    pub fn reduce_closures(&mut self, input: Var, closures: &[Vec<usize>], take_max: bool) -> Var {
        let x = self.value(input);
        let nodes = *x.shape().last().unwrap_or(&1);
        let (vals, args) = losses::reduce_closures(x.data(), nodes, closures, take_max);
        let out = Tensor::from_vec(x.shape(), vals).expect("same shape");
        let rg = self.rg(input);
        self.push(Op::Reduce { input, args }, out, rg)
    }

    pub fn hier_bce(&mut self, anc: Var, desc: Var, sup: Arc<Supervision>) -> Result<Var> {
        let v = losses::hier_bce(self.value(anc).data(), self.value(desc).data(), &sup)?;
        let rg = self.rg(anc) || self.rg(desc);
        Ok(self.push(Op::HierBce { anc, desc, sup }, Tensor::scalar(v), rg))
    }

    pub fn hier_dice(&mut self, desc: Var, sup: Arc<Supervision>, smooth: f64) -> Result<Var> {
        let v = losses::hier_dice(self.value(desc).data(), &sup, smooth)?;
        let rg = self.rg(desc);
        Ok(self.push(Op::HierDice { desc, sup, smooth }, Tensor::scalar(v), rg))
    }

    pub fn hier_ce(&mut self, desc: Var, sup: Arc<Supervision>) -> Result<Var> {
        let v = losses::hier_ce(self.value(desc).data(), &sup)?;
        let rg = self.rg(desc);
        Ok(self.push(Op::HierCe { desc, sup }, Tensor::scalar(v), rg))
    }

    pub fn flat_ce(&mut self, logits: Var, sup: Arc<FlatSupervision>) -> Result<Var> {
        let v = losses::flat_ce(self.value(logits).data(), &sup)?;
        let rg = self.rg(logits);
        Ok(self.push(Op::FlatCe { logits, sup }, Tensor::scalar(v), rg))
    }

    /// `∂loss/∂param` for every parameter leaf reachable from `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::ShapeMismatch(format!("loss must be scalar, got {:?}", lv.shape())));
        }
        if !lv.item().is_finite() {
            return Err(Error::non_finite("loss value"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if !g.all_finite() {
                return Err(Error::non_finite(format!("gradient at tape node {i}")));
            }
            let send = |v: Var, t: Tensor, grads: &mut Vec<Option<Tensor>>| {
                if !self.rg(v) {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Leaf => {
                    if let Some(id) = node.param {
                        out.insert(id, g);
                    }
                }
                Op::Add(a, b) => {
                    send(*a, g.clone(), &mut grads);
                    send(*b, g, &mut grads);
                }
                Op::Scale(a, k) => {
                    let mut t = g;
                    t.data_mut().iter_mut().for_each(|x| *x *= k);
                    send(*a, t, &mut grads);
                }
                Op::Sum(a) => {
                    let shape = self.value(*a).shape();
                    send(*a, Tensor::full(shape, g.item()), &mut grads);
                }
                Op::Conv2d { input, weight, bias } => {
                    let (gi, gw, gb) = conv2d_backward(
                        self.value(*input),
                        self.value(*weight),
                        &g,
                        self.rg(*input),
                    );
                    if let Some(gi) = gi {
                        send(*input, gi, &mut grads);
                    }
                    send(*weight, gw, &mut grads);
                    send(*bias, gb, &mut grads);
                }
                Op::Act(a, act) => {
                    let y = &node.value;
                    let mut t = g;
                    for (gi, yi) in t.data_mut().iter_mut().zip(y.data()) {
                        *gi *= match act {
                            Activation::Tanh => 1.0 - yi * yi,
                            Activation::Relu => {
                                if *yi > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                    }
                    send(*a, t, &mut grads);
                }
                Op::Sigmoid(a) => {
                    let mut t = g;
                    for (gi, yi) in t.data_mut().iter_mut().zip(node.value.data()) {
                        *gi *= yi * (1.0 - yi);
                    }
                    send(*a, t, &mut grads);
                }
                Op::ExpMap0 { input, c } => {
                    let x = self.value(*input);
                    let cols = *x.shape().last().unwrap_or(&1);
                    let mut t = Tensor::zeros(x.shape());
                    for ((src, gr), dst) in
                        x.data().chunks(cols).zip(g.data().chunks(cols)).zip(t.data_mut().chunks_mut(cols))
                    {
                        geometry::expmap0_vjp(src, *c, gr, dst);
                    }
                    send(*input, t, &mut grads);
                }
                Op::HyperplaneLogits { points, offsets, orientations, c } => {
                    let (gx, go, gr) = hyperplane_logits_backward(
                        self.value(*points),
                        self.value(*offsets),
                        self.value(*orientations),
                        *c,
                        &g,
                    )?;
                    send(*points, gx, &mut grads);
                    send(*offsets, go, &mut grads);
                    send(*orientations, gr, &mut grads);
                }
                Op::Reduce { input, args } => {
                    let x = self.value(*input);
                    let nodes = *x.shape().last().unwrap_or(&1);
                    let t = losses::reduce_closures_grad(args, nodes, g.data());
                    send(*input, Tensor::from_vec(x.shape(), t)?, &mut grads);
                }
                Op::HierBce { anc, desc, sup } => {
                    let (ga, gd) =
                        losses::hier_bce_grad(self.value(*anc).data(), self.value(*desc).data(), sup);
                    send(*anc, scaled(self.value(*anc), ga, g.item()), &mut grads);
                    send(*desc, scaled(self.value(*desc), gd, g.item()), &mut grads);
                }
                Op::HierDice { desc, sup, smooth } => {
                    let gd = losses::hier_dice_grad(self.value(*desc).data(), sup, *smooth);
                    send(*desc, scaled(self.value(*desc), gd, g.item()), &mut grads);
                }
                Op::HierCe { desc, sup } => {
                    let gd = losses::hier_ce_grad(self.value(*desc).data(), sup);
                    send(*desc, scaled(self.value(*desc), gd, g.item()), &mut grads);
                }
                Op::FlatCe { logits, sup } => {
                    let gl = losses::flat_ce_grad(self.value(*logits).data(), sup);
                    send(*logits, scaled(self.value(*logits), gl, g.item()), &mut grads);
                }
            }
        }
        Ok(out)
    }

    /// Runs [`Tape::backward`] and adds the result into `store`'s accumulators.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let g = self.backward(loss)?;
        store.accumulate(&g, 1.0);
        Ok(())
    }
}

fn scaled(like: &Tensor, mut data: Vec<f64>, k: f64) -> Tensor {
    if k != 1.0 {
        data.iter_mut().for_each(|x| *x *= k);
    }
    Tensor::from_vec(like.shape(), data).expect("gradient matches input shape")
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn conv_dims(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
    let (is, ws) = (input.shape(), weight.shape());
    if is.len() != 3 || ws.len() != 4 || ws[0] != ws[1] || ws[0] % 2 == 0 || ws[2] != is[2] {
        return Err(Error::ShapeMismatch(format!("conv2d input {is:?} with weight {ws:?}")));
    }
    if bias.shape() != [ws[3]] {
        return Err(Error::ShapeMismatch(format!("conv2d bias {:?} for {} outputs", bias.shape(), ws[3])));
    }
    Ok((is[0], is[1], is[2], ws[3], ws[0]))
}

/// Unfolds `[H, W, Cin]` into `[H*W, k*k*Cin]` patch rows, zero-padded.
fn im2col(x: &[f64], h: usize, w: usize, cin: usize, k: usize) -> Vec<f64> {
    let pad = k / 2;
    let row = k * k * cin;
    let mut cols = vec![0.0; h * w * row];
    for y in 0..h {
        for xx in 0..w {
            let dst = &mut cols[(y * w + xx) * row..(y * w + xx + 1) * row];
            for ky in 0..k {
                let Some(iy) = (y + ky).checked_sub(pad).filter(|&v| v < h) else { continue };
                for kx in 0..k {
                    let Some(ix) = (xx + kx).checked_sub(pad).filter(|&v| v < w) else { continue };
                    let at = (ky * k + kx) * cin;
                    dst[at..at + cin].copy_from_slice(&x[(iy * w + ix) * cin..(iy * w + ix + 1) * cin]);
                }
            }
        }
    }
    cols
}

/// Adds patch-row gradients back onto the image they were unfolded from.
fn col2im_add(cols: &[f64], h: usize, w: usize, cin: usize, k: usize, gx: &mut [f64]) {
    let pad = k / 2;
    let row = k * k * cin;
    for y in 0..h {
        for xx in 0..w {
            let src = &cols[(y * w + xx) * row..(y * w + xx + 1) * row];
            for ky in 0..k {
                let Some(iy) = (y + ky).checked_sub(pad).filter(|&v| v < h) else { continue };
                for kx in 0..k {
                    let Some(ix) = (xx + kx).checked_sub(pad).filter(|&v| v < w) else { continue };
                    let at = (ky * k + kx) * cin;
                    let dst = &mut gx[(iy * w + ix) * cin..(iy * w + ix + 1) * cin];
                    for (d, v) in dst.iter_mut().zip(&src[at..at + cin]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// `c = a·b + beta·c` for row-major `a: [m, k]`, `b: [k, n]`.
/// `ta`/`tb` read the operand transposed from its stored row-major layout.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, beta: f64, c: &mut [f64]) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the strides above address exactly the m*k, k*n and m*n
    // elements checked by the assertion.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

fn conv2d_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (h, w, cin, cout, k) = conv_dims(input, weight, bias)?;
    let cols = im2col(input.data(), h, w, cin, k);
    let mut out: Vec<f64> = bias.data().iter().copied().cycle().take(h * w * cout).collect();
    gemm(h * w, k * k * cin, cout, &cols, false, weight.data(), false, 1.0, &mut out);
    Tensor::from_vec(&[h, w, cout], out)
}

fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    g: &Tensor,
    need_input: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let (is, ws) = (input.shape(), weight.shape());
    let (h, w, cin, k, cout) = (is[0], is[1], is[2], ws[0], ws[3]);
    let (p, row) = (h * w, k * k * cin);
    let gd = g.data();
    let cols = im2col(input.data(), h, w, cin, k);
    let mut gw = vec![0.0; row * cout];
    gemm(row, p, cout, &cols, true, gd, false, 0.0, &mut gw);
    let mut gb = vec![0.0; cout];
    for go in gd.chunks_exact(cout) {
        for (b, v) in gb.iter_mut().zip(go) {
            *b += v;
        }
    }
    let gx = need_input.then(|| {
        let mut gcols = vec![0.0; p * row];
        gemm(p, cout, row, gd, false, weight.data(), true, 0.0, &mut gcols);
        let mut gx = vec![0.0; input.len()];
        col2im_add(&gcols, h, w, cin, k, &mut gx);
        Tensor::from_vec(is, gx).expect("shape")
    });
    (
        gx,
        Tensor::from_vec(ws, gw).expect("shape"),
        Tensor::from_vec(&[cout], gb).expect("shape"),
    )
}

fn hyperplane_logits_backward(
    points: &Tensor,
    offsets: &Tensor,
    orientations: &Tensor,
    c: Curvature,
    g: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let n = *points.shape().last().unwrap_or(&0);
    let mut gx = Tensor::zeros(points.shape());
    let mut go = Tensor::zeros(offsets.shape());
    let mut gr = Tensor::zeros(orientations.shape());
    geometry::hyperplane_logits_batch_vjp(
        points.data(),
        offsets.data(),
        orientations.data(),
        n,
        c,
        g.data(),
        gx.data_mut(),
        go.data_mut(),
        gr.data_mut(),
    )?;
    Ok((gx, go, gr))
}
