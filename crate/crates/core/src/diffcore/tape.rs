//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records one forward evaluation; [`Tape::backward`] walks it in
//! reverse and returns adjoints for every node that depends on a watched
//! parameter. Tapes are cheap and meant to be dropped after a single backward
//! pass.

use super::{ParamSet, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Rows whose ℓ2 norm falls below this are mapped to zero by `normalize_rows`.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    AddRow(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Tanh(usize),
    Abs(usize),
    Square(usize),
    Sum(usize),
    SumChannels { x: usize, channels: usize, spatial: usize },
    Reshape(usize),
    NormalizeRows { x: usize, norms: Vec<f64> },
    Detach,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
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

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.leaf(t.clone(), true)
    }

    /// Leaf that is treated as data.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.leaf(t.clone(), false)
    }

    pub fn constant_owned(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn watch(&mut self, params: &ParamSet) -> Vec<Var> {
        params.tensors().map(|t| self.param(t)).collect()
    }

    pub fn constants(&mut self, params: &ParamSet) -> Vec<Var> {
        params.tensors().map(|t| self.constant(t)).collect()
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn elementwise(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(name, value, op, &[a.0, b.0])
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let value = self.value(a).map(f);
        self.push(name, value, op, &[a.0])
    }

    /// `(m, k) x (k, n) -> (m, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = da[i * k + p];
                if x == 0.0 {
                    continue;
                }
                for (o, &w) in row.iter_mut().zip(&db[p * n..(p + 1) * n]) {
                    *o += x * w;
                }
            }
        }
        self.push(
            "matmul",
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul(a.0, b.0),
            &[a.0, b.0],
        )
    }

    /// Adds a length-`n` vector to every row of an `(m, n)` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.value(x).shape(), self.value(bias).shape());
        if sx.len() != 2 || sb != [sx[1]] {
            return Err(Error::shape("add_row", format!("{sx:?} + {sb:?}")));
        }
        let n = sx[1];
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % n])
            .collect();
        let value = Tensor::from_parts(sx.to_vec(), data);
        self.push("add_row", value, Op::AddRow(x.0, bias.0), &[x.0, bias.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, |x| x * c, Op::Scale(a.0, c))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a.0))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, f64::abs, Op::Abs(a.0))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, |x| x * x, Op::Square(a.0))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a.0), &[a.0])
    }

    /// Views `x` as `(B, channels, spatial)` and sums over channels, giving `(B, spatial)`.
    pub fn sum_channels(&mut self, x: Var, channels: usize, spatial: usize) -> Result<Var> {
        let t = self.value(x);
        let per = channels * spatial;
        if per == 0 || !t.len().is_multiple_of(per) {
            return Err(Error::shape(
                "sum_channels",
                format!("{:?} as (*, {channels}, {spatial})", t.shape()),
            ));
        }
        let batch = t.len() / per;
        let d = t.data();
        let mut out = vec![0.0; batch * spatial];
        for b in 0..batch {
            for c in 0..channels {
                let src = &d[b * per + c * spatial..b * per + (c + 1) * spatial];
                for (o, &v) in out[b * spatial..(b + 1) * spatial].iter_mut().zip(src) {
                    *o += v;
                }
            }
        }
        let value = Tensor::from_parts(vec![batch, spatial], out);
        self.push(
            "sum_channels",
            value,
            Op::SumChannels {
                x: x.0,
                channels,
                spatial,
            },
            &[x.0],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x.0), &[x.0])
    }

    /// ℓ2-normalizes each row of a `(B, n)` matrix. Rows with norm below
    /// [`NORM_FLOOR`] become zero and pass no gradient.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let rows = t.rows();
        let w = t.len() / rows;
        let mut out = vec![0.0; t.len()];
        let mut norms = Vec::with_capacity(rows);
        for r in 0..rows {
            let src = t.row(r);
            let n = src.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(n);
            if n >= NORM_FLOOR {
                for (o, &v) in out[r * w..(r + 1) * w].iter_mut().zip(src) {
                    *o = v / n;
                }
            }
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        self.push("normalize_rows", value, Op::NormalizeRows { x: x.0, norms }, &[x.0])
    }

    /// Passes the value through and blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.nodes.push(Node {
            value,
            op: Op::Detach,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![1.0]);
        }
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "backward" });
            }
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients {
            shapes: self.nodes[..=root.0].iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |i: usize| self.nodes[i].value.data();
        let mut acc = |i: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[i].requires_grad {
                return;
            }
            let slot = grads[i].get_or_insert_with(|| vec![0.0; self.nodes[i].value.len()]);
            f(slot);
        };
        match node.op {
            Op::Leaf | Op::Detach => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (da, db) = (val(a), val(b));
                acc(a, &mut |ga| {
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let br = &db[p * n..(p + 1) * n];
                            ga[i * k + p] += gr.iter().zip(br).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc(b, &mut |gb| {
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = da[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for (o, &v) in gb[p * n..(p + 1) * n].iter_mut().zip(gr) {
                                *o += x * v;
                            }
                        }
                    }
                });
            }
            Op::AddRow(x, b) => {
                let n = self.nodes[b].value.len();
                acc(x, &mut |gx| add_into(gx, g));
                acc(b, &mut |gb| {
                    for (i, &v) in g.iter().enumerate() {
                        gb[i % n] += v;
                    }
                });
            }
            Op::Add(a, b) => {
                acc(a, &mut |ga| add_into(ga, g));
                acc(b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(a, &mut |ga| add_into(ga, g));
                acc(b, &mut |gb| gb.iter_mut().zip(g).for_each(|(o, v)| *o -= v));
            }
            Op::Mul(a, b) => {
                let (da, db) = (val(a), val(b));
                acc(a, &mut |ga| {
                    for ((o, &v), &y) in ga.iter_mut().zip(g).zip(db) {
                        *o += v * y;
                    }
                });
                acc(b, &mut |gb| {
                    for ((o, &v), &x) in gb.iter_mut().zip(g).zip(da) {
                        *o += v * x;
                    }
                });
            }
            Op::Scale(a, c) => acc(a, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, v)| *o += v * c)),
            Op::Relu(a) => {
                let x = val(a);
                acc(a, &mut |ga| {
                    for ((o, &v), &xi) in ga.iter_mut().zip(g).zip(x) {
                        if xi > 0.0 {
                            *o += v;
                        }
                    }
                });
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                acc(a, &mut |ga| {
                    for ((o, &v), &yi) in ga.iter_mut().zip(g).zip(y) {
                        *o += v * (1.0 - yi * yi);
                    }
                });
            }
            Op::Abs(a) => {
                let x = val(a);
                acc(a, &mut |ga| {
                    for ((o, &v), &xi) in ga.iter_mut().zip(g).zip(x) {
                        *o += v * sign(xi);
                    }
                });
            }
            Op::Square(a) => {
                let x = val(a);
                acc(a, &mut |ga| {
                    for ((o, &v), &xi) in ga.iter_mut().zip(g).zip(x) {
                        *o += 2.0 * xi * v;
                    }
                });
            }
            Op::Sum(a) => {
                let s = g[0];
                acc(a, &mut |ga| ga.iter_mut().for_each(|o| *o += s));
            }
            Op::SumChannels { x, channels, spatial } => {
                let per = channels * spatial;
                acc(x, &mut |gx| {
                    for (i, o) in gx.iter_mut().enumerate() {
                        let b = i / per;
                        let s = i % spatial;
                        *o += g[b * spatial + s];
                    }
                });
            }
            Op::Reshape(x) => acc(x, &mut |gx| add_into(gx, g)),
            Op::NormalizeRows { x, ref norms } => {
                let y = node.value.data();
                let w = y.len() / norms.len();
                acc(x, &mut |gx| {
                    for (r, &n) in norms.iter().enumerate() {
                        if n < NORM_FLOOR {
                            continue;
                        }
                        let span = r * w..(r + 1) * w;
                        let (yr, gr) = (&y[span.clone()], &g[span.clone()]);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, &yi), &gi) in gx[span].iter_mut().zip(yr).zip(gr) {
                            *o += (gi - yi * dot) / n;
                        }
                    }
                });
            }
        }
    }
}

/// `sign(0) = 0`, matching the subgradient used for `abs`.
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(o, v)| *o += v);
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` did not influence the root.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = self.shapes.get(v.0).cloned().unwrap_or_default();
        match self.grads.get(v.0).and_then(|g| g.clone()) {
            Some(g) => Tensor::from_parts(shape, g),
            None => Tensor::zeros(&shape),
        }
    }

    /// Packs gradients of `vars` into a set laid out like `layout`.
    pub fn collect(&self, vars: &[Var], layout: &ParamSet) -> Result<ParamSet> {
        if vars.len() != layout.len() {
            return Err(Error::Layout(format!(
                "{} vars for {} parameters",
                vars.len(),
                layout.len()
            )));
        }
        let mut out = ParamSet::new();
        for (&v, (name, t)) in vars.iter().zip(layout.iter()) {
            let g = if v.0 < self.shapes.len() {
                self.wrt(v)
            } else {
                Tensor::zeros(t.shape())
            };
            if g.shape() != t.shape() {
                return Err(Error::Layout(format!("gradient shape for `{name}`")));
            }
            out.push(name, g)?;
        }
        Ok(out)
    }
}

/// Evaluates `f` on a fresh tape with `params` watched and returns the loss
/// value with its gradient.
pub fn value_and_grad<F>(params: &ParamSet, f: F) -> Result<(f64, ParamSet)>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = tape.watch(params);
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?;
    Ok((tape.scalar_value(root), grads.collect(&vars, params)?))
}
