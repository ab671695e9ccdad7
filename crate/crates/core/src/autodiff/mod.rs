//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a tape: every primitive evaluates eagerly and appends a
//! node recording its inputs. Node order is a topological order, so
//! [`Graph::backward`] walks the tape once in reverse. Inputs are read back
//! from their own nodes during the backward pass, so nothing beyond the
//! forward values is saved.
//!
//! Broadcasting binary ops follow numpy rules on equal-rank shapes (a
//! shorter shape is left-padded with ones).

pub mod kernels;

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::{strides_of, Tensor};
use kernels::{
    bilinear_taps, broadcast_map, broadcast_shape, col2im, conv_out_extent, im2col, mm_nn, mm_nt,
    mm_tn, pad_shape, ConvGeom,
};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Gelu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pool {
    /// `[B,C,H,W] -> [B,C]`
    GlobalAvg,
    /// `[B,C,H,W] -> [B,1,H,W]`
    ChannelAvg,
    /// `[B,C,H,W] -> [B,1,H,W]`
    ChannelMax,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dOpts {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2dOpts {
    pub fn same(padding: usize) -> Self {
        Self { stride: 1, padding, groups: 1 }
    }

    pub fn depthwise(channels: usize, padding: usize) -> Self {
        Self { stride: 1, padding, groups: channels }
    }
}

impl Default for Conv2dOpts {
    fn default() -> Self {
        Self { stride: 1, padding: 0, groups: 1 }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Square(Var),
    Powf(Var, f64),
    ClampMin(Var, f64),
    Act(Var, Activation),
    SumAll(Var),
    SumAxes(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Narrow { x: Var, axis: usize, start: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    MatMul(Var, Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, opts: Conv2dOpts },
    ConvT2d { x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize },
    Softmax(Var, usize),
    LayerNorm { x: Var, gain: Option<Var>, bias: Option<Var>, eps: f64 },
    Pool(Var, Pool),
    Bilinear(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    name: Option<String>,
}

/// Gradient tape. One graph per forward/backward pass.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    grad_enabled: bool,
    backward_done: bool,
    nonfinite: Option<String>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), grad_enabled: true, backward_done: false, nonfinite: None }
    }

    /// A graph that never records gradients; parameters become constants.
    pub fn no_grad() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf. In a no-grad graph this is a constant.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        let rg = self.grad_enabled;
        self.push_node(value, Op::Leaf, rg, Some(name.into()))
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(value, Op::Leaf, false, None)
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

    /// Name of the first primitive that produced a non-finite value.
    pub fn nonfinite(&self) -> Option<&str> {
        self.nonfinite.as_deref()
    }

    pub fn check_finite(&self) -> Result<()> {
        match &self.nonfinite {
            Some(op) => Err(Error::NonFinite(op.clone())),
            None => Ok(()),
        }
    }

    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads.get(v.0)?.as_ref().map(|g| {
            Tensor::new(self.nodes[v.0].value.shape(), g.clone()).expect("grad matches value shape")
        })
    }

    /// Names and gradients of every named trainable leaf.
    pub fn param_grads(&self) -> Vec<(String, Tensor)> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.requires_grad && matches!(n.op, Op::Leaf))
            .filter_map(|(i, n)| {
                let name = n.name.clone()?;
                Some((name, self.grad(Var(i))?))
            })
            .collect()
    }

    fn push_node(&mut self, value: Tensor, op: Op, requires_grad: bool, name: Option<String>) -> Var {
        if self.nonfinite.is_none() && !value.is_finite() {
            let label = name.clone().unwrap_or_else(|| op_name(&op).to_string());
            self.nonfinite = Some(label);
        }
        self.nodes.push(Node { value, op, requires_grad, name });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if rg { op } else { Op::Leaf };
        self.push_node(value, op, rg, None)
    }

    // ---- elementwise, broadcasting ------------------------------------

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let rank = sa.len().max(sb.len());
        let (pa, pb) = (pad_shape(&sa, rank), pad_shape(&sb, rank));
        let out_shape = broadcast_shape(&pa, &pb)
            .ok_or_else(|| Error::Shape(format!("cannot broadcast {sa:?} with {sb:?}")))?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let data = if pa == out_shape && pb == out_shape {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = broadcast_map(&out_shape, &pa);
            let mb = broadcast_map(&out_shape, &pb);
            ma.iter().zip(&mb).map(|(&i, &j)| f(va[i], vb[j])).collect()
        };
        Tensor::new(&out_shape, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, |x, y| x / y)?;
        Ok(self.push(t, Op::Div(a, b), &[a, b]))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(x).map(f);
        self.push(t, op, &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, Op::Ln(x), f64::ln)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sqrt(x), f64::sqrt)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn powf(&mut self, x: Var, e: f64) -> Var {
        self.unary(x, Op::Powf(x, e), |v| v.powf(e))
    }

    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Var {
        self.unary(x, Op::ClampMin(x, lo), |v| v.max(lo))
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Activation::Relu => |v| v.max(0.0),
            Activation::Sigmoid => sigmoid,
            Activation::Gelu => gelu,
        };
        self.unary(x, Op::Act(x, kind), f)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(Activation::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(Activation::Sigmoid, x)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.activation(Activation::Gelu, x)
    }

    // ---- reductions ---------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum over `axes`, keeping them as extent-1 dimensions.
    pub fn sum_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if let Some(&a) = axes.iter().find(|&&a| a >= shape.len()) {
            return Err(Error::Shape(format!("axis {a} out of range for {shape:?}")));
        }
        let out_shape: Vec<usize> =
            shape.iter().enumerate().map(|(i, &d)| if axes.contains(&i) { 1 } else { d }).collect();
        let map = broadcast_map(&shape, &out_shape);
        let mut out = vec![0.0; out_shape.iter().product()];
        for (&o, &v) in map.iter().zip(self.value(x).data()) {
            out[o] += v;
        }
        let t = Tensor::new(&out_shape, out)?;
        Ok(self.push(t, Op::SumAxes(x), &[x]))
    }

    // ---- shape --------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape(format!("invalid permutation {perm:?} for {shape:?}")));
        }
        let out = permute_data(self.value(x), perm);
        Ok(self.push(out, Op::Permute(x, perm.to_vec()), &[x]))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::Shape("transpose needs rank >= 2".into()));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Shape(format!("narrow({axis}, {start}, {len}) out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut os = shape.clone();
        os[axis] = len;
        let t = Tensor::new(&os, out)?;
        Ok(self.push(t, Op::Narrow { x, axis, start }, &[x]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .nodes
            .get(inputs.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?.0)
            .unwrap()
            .value
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(Error::Shape(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let same = s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(Error::Shape(format!("concat mismatch {s:?} vs {first:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let d = self.shape(v)[axis];
                let src = self.value(v).data();
                out.extend_from_slice(&src[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut os = first;
        os[axis] = total;
        let t = Tensor::new(&os, out)?;
        Ok(self.push(t, Op::Concat { inputs: inputs.to_vec(), axis }, inputs))
    }

    // ---- linear algebra -----------------------------------------------

    /// Batched `[.., m, k] · [.., k, n]` with broadcast batch extents.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = MatmulPlan::new(self.shape(a), self.shape(b))?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; plan.out_shape.iter().product()];
        for (o, (&ia, &ib)) in plan.a_map.iter().zip(&plan.b_map).enumerate() {
            mm_nn(
                &va[ia * plan.m * plan.k..(ia + 1) * plan.m * plan.k],
                &vb[ib * plan.k * plan.n..(ib + 1) * plan.k * plan.n],
                &mut out[o * plan.m * plan.n..(o + 1) * plan.m * plan.n],
                plan.m,
                plan.k,
                plan.n,
            );
        }
        let t = Tensor::new(&plan.out_shape, out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    // ---- convolution --------------------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, opts: Conv2dOpts) -> Result<Var> {
        let plan = ConvPlan::forward(self.shape(x), self.shape(w), b.map(|b| self.shape(b).to_vec()), opts)?;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let g = plan.geom;
        let (cout_g, krows, ncols) = (plan.cout / opts.groups, g.col_rows(), g.col_cols());
        let mut out = vec![0.0; plan.batch * plan.cout * ncols];
        let mut cols = vec![0.0; krows * ncols];
        let in_plane = g.channels * g.height * g.width;
        for bi in 0..plan.batch {
            for gi in 0..opts.groups {
                let img = &xv[(bi * plan.cin + gi * g.channels) * g.height * g.width..][..in_plane];
                im2col(img, &g, &mut cols);
                let wg = &wv[gi * cout_g * krows..(gi + 1) * cout_g * krows];
                let dst = &mut out[(bi * plan.cout + gi * cout_g) * ncols..][..cout_g * ncols];
                mm_nn(wg, &cols, dst, cout_g, krows, ncols);
            }
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            for bi in 0..plan.batch {
                for co in 0..plan.cout {
                    out[(bi * plan.cout + co) * ncols..][..ncols].iter_mut().for_each(|v| *v += bv[co]);
                }
            }
        }
        let t = Tensor::new(&[plan.batch, plan.cout, g.out_h, g.out_w], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(t, Op::Conv2d { x, w, b, opts }, &inputs))
    }

    /// Transposed convolution; `w: [Cin, Cout, kh, kw]`. Its forward pass is
    /// the input-gradient of [`Graph::conv2d`] with the same weights.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let plan = ConvTPlan::new(self.shape(x), self.shape(w), b.map(|b| self.shape(b).to_vec()), stride, padding)?;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let g = plan.geom;
        let (krows, ncols) = (g.col_rows(), g.col_cols());
        let out_plane = plan.cout * g.height * g.width;
        let mut out = vec![0.0; plan.batch * out_plane];
        let mut cols = vec![0.0; krows * ncols];
        for bi in 0..plan.batch {
            cols.iter_mut().for_each(|v| *v = 0.0);
            let xb = &xv[bi * plan.cin * ncols..(bi + 1) * plan.cin * ncols];
            mm_tn(wv, xb, &mut cols, krows, plan.cin, ncols);
            col2im(&cols, &g, &mut out[bi * out_plane..(bi + 1) * out_plane]);
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            let hw = g.height * g.width;
            for bi in 0..plan.batch {
                for co in 0..plan.cout {
                    out[(bi * plan.cout + co) * hw..][..hw].iter_mut().for_each(|v| *v += bv[co]);
                }
            }
        }
        let t = Tensor::new(&[plan.batch, plan.cout, g.height, g.width], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(t, Op::ConvT2d { x, w, b, stride, padding }, &inputs))
    }

    // ---- normalization / attention helpers ----------------------------

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let (outer, n, inner) = split3(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let m = (0..n).map(|j| src[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..n {
                    let e = (src[idx(j)] - m).exp();
                    out[idx(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out[idx(j)] /= z;
                }
            }
        }
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::Softmax(x, axis), &[x]))
    }

    /// Layer normalization over the last axis with optional affine terms.
    pub fn layer_norm(&mut self, x: Var, gain: Option<Var>, bias: Option<Var>, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap();
        for p in [gain, bias].into_iter().flatten() {
            if self.shape(p) != [c] {
                return Err(Error::Shape(format!("layer_norm affine shape {:?} != [{c}]", self.shape(p))));
            }
        }
        let (xhat, _) = ln_normalize(self.value(x).data(), c, eps);
        let mut out = xhat;
        let gv = gain.map(|g| self.value(g).data().to_vec());
        let bv = bias.map(|b| self.value(b).data().to_vec());
        for row in out.chunks_mut(c) {
            for (j, v) in row.iter_mut().enumerate() {
                if let Some(g) = &gv {
                    *v *= g[j];
                }
                if let Some(b) = &bv {
                    *v += b[j];
                }
            }
        }
        let t = Tensor::new(&shape, out)?;
        let inputs: Vec<Var> = [Some(x), gain, bias].into_iter().flatten().collect();
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, eps }, &inputs))
    }

    pub fn pool(&mut self, kind: Pool, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 || shape[2] * shape[3] == 0 {
            return Err(Error::Shape(format!("pool expects [B,C,H,W], got {shape:?}")));
        }
        let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let src = self.value(x).data();
        let t = match kind {
            Pool::GlobalAvg => {
                let out = src.chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
                Tensor::new(&[b, c], out)?
            }
            Pool::ChannelAvg | Pool::ChannelMax => {
                let mut out = vec![0.0; b * hw];
                for bi in 0..b {
                    for p in 0..hw {
                        let vals = (0..c).map(|ci| src[(bi * c + ci) * hw + p]);
                        out[bi * hw + p] = if kind == Pool::ChannelAvg {
                            vals.sum::<f64>() / c as f64
                        } else {
                            vals.fold(f64::NEG_INFINITY, f64::max)
                        };
                    }
                }
                Tensor::new(&[b, 1, shape[2], shape[3]], out)?
            }
        };
        Ok(self.push(t, Op::Pool(x, kind), &[x]))
    }

    /// Bilinear resize of `[B,C,H,W]` with half-pixel centers.
    pub fn interpolate_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 || out_h == 0 || out_w == 0 {
            return Err(Error::Shape(format!("bilinear expects [B,C,H,W] and positive target, got {shape:?}")));
        }
        if shape[2] == out_h && shape[3] == out_w {
            let t = self.value(x).clone();
            return Ok(self.push(t, Op::Reshape(x), &[x]));
        }
        let t = bilinear_forward(self.value(x), out_h, out_w);
        Ok(self.push(t, Op::Bilinear(x), &[x]))
    }

    // ---- backward -----------------------------------------------------

    /// Reverse-mode sweep from a scalar `root`.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let rs = self.shape(root).to_vec();
        if rs.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarRoot(rs));
        }
        self.check_finite()?;
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = self.grads[i].take() else { continue };
            self.propagate(i, &gout);
            self.grads[i] = Some(gout);
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if n.requires_grad && matches!(n.op, Op::Leaf) && self.grads[i].is_none() {
                return Err(Error::DetachedLeaf(n.name.clone().unwrap_or_else(|| format!("#{i}"))));
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => existing.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    /// Reduce a broadcast gradient `g` (shaped like `out_shape`) onto `v`.
    fn accumulate_broadcast(&mut self, v: Var, out_shape: &[usize], g: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let vs = self.shape(v).to_vec();
        let pv = pad_shape(&vs, out_shape.len());
        if pv == out_shape {
            self.accumulate(v, g.to_vec());
            return;
        }
        let map = broadcast_map(out_shape, &pv);
        let mut red = vec![0.0; vs.iter().product()];
        for (&j, &gv) in map.iter().zip(g) {
            red[j] += gv;
        }
        self.accumulate(v, red);
    }

    fn binary_backward(&mut self, a: Var, b: Var, out_shape: &[usize], g: &[f64], da: impl Fn(f64, f64, f64) -> f64, db: impl Fn(f64, f64, f64) -> f64) {
        let rank = out_shape.len();
        let pa = pad_shape(self.shape(a), rank);
        let pb = pad_shape(self.shape(b), rank);
        let ma = broadcast_map(out_shape, &pa);
        let mb = broadcast_map(out_shape, &pb);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let ga: Vec<f64> = (0..g.len()).map(|o| da(g[o], va[ma[o]], vb[mb[o]])).collect();
        let gb: Vec<f64> = (0..g.len()).map(|o| db(g[o], va[ma[o]], vb[mb[o]])).collect();
        self.accumulate_broadcast(a, out_shape, &ga);
        self.accumulate_broadcast(b, out_shape, &gb);
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let op = self.nodes[i].op.clone();
        let out_shape = self.nodes[i].value.shape().to_vec();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate_broadcast(a, &out_shape, g);
                self.accumulate_broadcast(b, &out_shape, g);
            }
            Op::Sub(a, b) => {
                self.accumulate_broadcast(a, &out_shape, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.accumulate_broadcast(b, &out_shape, &neg);
            }
            Op::Mul(a, b) => self.binary_backward(a, b, &out_shape, g, |g, _, y| g * y, |g, x, _| g * x),
            Op::Div(a, b) => self.binary_backward(a, b, &out_shape, g, |g, _, y| g / y, |g, x, y| -g * x / (y * y)),
            Op::Scale(x, c) => self.accumulate(x, g.iter().map(|v| v * c).collect()),
            Op::AddScalar(x) | Op::Reshape(x) => self.accumulate(x, g.to_vec()),
            Op::Exp(x) => {
                let y = self.nodes[i].value.data();
                let d = g.iter().zip(y).map(|(g, y)| g * y).collect();
                self.accumulate(x, d);
            }
            Op::Ln(x) => self.unary_backward(x, g, |g, x| g / x),
            Op::Sqrt(x) => {
                let y = self.nodes[i].value.data();
                let d = g.iter().zip(y).map(|(g, y)| 0.5 * g / y).collect();
                self.accumulate(x, d);
            }
            Op::Square(x) => self.unary_backward(x, g, |g, x| 2.0 * g * x),
            Op::Powf(x, e) => self.unary_backward(x, g, |g, x| if e == 0.0 { 0.0 } else { g * e * x.powf(e - 1.0) }),
            Op::ClampMin(x, lo) => self.unary_backward(x, g, |g, x| if x > lo { g } else { 0.0 }),
            Op::Act(x, kind) => match kind {
                Activation::Relu => self.unary_backward(x, g, |g, x| if x > 0.0 { g } else { 0.0 }),
                Activation::Sigmoid => {
                    let y = self.nodes[i].value.data();
                    let d = g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                    self.accumulate(x, d);
                }
                Activation::Gelu => self.unary_backward(x, g, |g, x| g * gelu_grad(x)),
            },
            Op::SumAll(x) => {
                let n = self.value(x).numel();
                self.accumulate(x, vec![g[0]; n]);
            }
            Op::SumAxes(x) => {
                let xs = self.shape(x).to_vec();
                let map = broadcast_map(&xs, &out_shape);
                self.accumulate(x, map.iter().map(|&o| g[o]).collect());
            }
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let gt = Tensor::new(&out_shape, g.to_vec()).unwrap();
                self.accumulate(x, permute_data(&gt, &inv).into_data());
            }
            Op::Narrow { x, axis, start } => {
                let xs = self.shape(x).to_vec();
                let len = out_shape[axis];
                let outer: usize = xs[..axis].iter().product();
                let inner: usize = xs[axis + 1..].iter().product();
                let mut d = vec![0.0; xs.iter().product()];
                for o in 0..outer {
                    let base = (o * xs[axis] + start) * inner;
                    d[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(x, d);
            }
            Op::Concat { inputs, axis } => {
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[axis];
                let mut offset = 0;
                for v in inputs {
                    let dv = self.shape(v)[axis];
                    let mut d = Vec::with_capacity(outer * dv * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        d.extend_from_slice(&g[base..base + dv * inner]);
                    }
                    offset += dv;
                    self.accumulate(v, d);
                }
            }
            Op::MatMul(a, b) => self.matmul_backward(a, b, g),
            Op::Conv2d { x, w, b, opts } => self.conv2d_backward(x, w, b, opts, g),
            Op::ConvT2d { x, w, b, stride, padding } => self.conv_t_backward(x, w, b, stride, padding, g),
            Op::Softmax(x, axis) => {
                let y = self.nodes[i].value.data();
                let (outer, n, inner) = split3(&out_shape, axis);
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for k in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + k;
                        let dot: f64 = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..n {
                            d[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                self.accumulate(x, d);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let c = *out_shape.last().unwrap();
                let (xhat, inv_std) = ln_normalize(self.value(x).data(), c, eps);
                let gv = gain.map(|g| self.value(g).data().to_vec());
                let mut dx = vec![0.0; g.len()];
                let mut dgain = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                for (r, (grow, xrow)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                    let dxhat: Vec<f64> = grow
                        .iter()
                        .enumerate()
                        .map(|(j, &gj)| gj * gv.as_ref().map_or(1.0, |gv| gv[j]))
                        .collect();
                    let m1 = dxhat.iter().sum::<f64>() / c as f64;
                    let m2 = dxhat.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        dx[r * c + j] = inv_std[r] * (dxhat[j] - m1 - xrow[j] * m2);
                        dgain[j] += grow[j] * xrow[j];
                        dbias[j] += grow[j];
                    }
                }
                self.accumulate(x, dx);
                if let Some(gn) = gain {
                    self.accumulate(gn, dgain);
                }
                if let Some(bs) = bias {
                    self.accumulate(bs, dbias);
                }
            }
            Op::Pool(x, kind) => {
                let xs = self.shape(x).to_vec();
                let (b, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let mut d = vec![0.0; b * c * hw];
                match kind {
                    Pool::GlobalAvg => {
                        for (bc, plane) in d.chunks_mut(hw).enumerate() {
                            plane.iter_mut().for_each(|v| *v = g[bc] / hw as f64);
                        }
                    }
                    Pool::ChannelAvg => {
                        for bi in 0..b {
                            for ci in 0..c {
                                for p in 0..hw {
                                    d[(bi * c + ci) * hw + p] = g[bi * hw + p] / c as f64;
                                }
                            }
                        }
                    }
                    Pool::ChannelMax => {
                        let xv = self.value(x).data();
                        for bi in 0..b {
                            for p in 0..hw {
                                let arg = (0..c)
                                    .fold((0, f64::NEG_INFINITY), |(ai, am), ci| {
                                        let v = xv[(bi * c + ci) * hw + p];
                                        if v > am { (ci, v) } else { (ai, am) }
                                    })
                                    .0;
                                d[(bi * c + arg) * hw + p] = g[bi * hw + p];
                            }
                        }
                    }
                }
                self.accumulate(x, d);
            }
            Op::Bilinear(x) => {
                let xs = self.shape(x).to_vec();
                let d = bilinear_backward(&xs, &out_shape, g);
                self.accumulate(x, d);
            }
        }
    }

    fn unary_backward(&mut self, x: Var, g: &[f64], f: impl Fn(f64, f64) -> f64) {
        let xv = self.value(x).data();
        let d = g.iter().zip(xv).map(|(&g, &x)| f(g, x)).collect();
        self.accumulate(x, d);
    }

    fn matmul_backward(&mut self, a: Var, b: Var, g: &[f64]) {
        let plan = MatmulPlan::new(self.shape(a), self.shape(b)).expect("validated in forward");
        let (m, k, n) = (plan.m, plan.k, plan.n);
        let need_a = self.nodes[a.0].requires_grad;
        let need_b = self.nodes[b.0].requires_grad;
        let mut da = vec![0.0; if need_a { self.value(a).numel() } else { 0 }];
        let mut db = vec![0.0; if need_b { self.value(b).numel() } else { 0 }];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        for (o, (&ia, &ib)) in plan.a_map.iter().zip(&plan.b_map).enumerate() {
            let go = &g[o * m * n..(o + 1) * m * n];
            if need_a {
                mm_nt(go, &vb[ib * k * n..(ib + 1) * k * n], &mut da[ia * m * k..(ia + 1) * m * k], m, n, k);
            }
            if need_b {
                mm_tn(&va[ia * m * k..(ia + 1) * m * k], go, &mut db[ib * k * n..(ib + 1) * k * n], k, m, n);
            }
        }
        if need_a {
            self.accumulate(a, da);
        }
        if need_b {
            self.accumulate(b, db);
        }
    }

    fn conv2d_backward(&mut self, x: Var, w: Var, b: Option<Var>, opts: Conv2dOpts, g: &[f64]) {
        let plan = ConvPlan::forward(self.shape(x), self.shape(w), b.map(|b| self.shape(b).to_vec()), opts)
            .expect("validated in forward");
        let geom = plan.geom;
        let (cout_g, krows, ncols) = (plan.cout / opts.groups, geom.col_rows(), geom.col_cols());
        let need_x = self.nodes[x.0].requires_grad;
        let need_w = self.nodes[w.0].requires_grad;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut dx = vec![0.0; if need_x { xv.len() } else { 0 }];
        let mut dw = vec![0.0; if need_w { wv.len() } else { 0 }];
        let mut cols = vec![0.0; krows * ncols];
        let mut dcols = vec![0.0; krows * ncols];
        let in_plane = geom.channels * geom.height * geom.width;
        for bi in 0..plan.batch {
            for gi in 0..opts.groups {
                let goff = (bi * plan.cin + gi * geom.channels) * geom.height * geom.width;
                let gout = &g[(bi * plan.cout + gi * cout_g) * ncols..][..cout_g * ncols];
                let wg = &wv[gi * cout_g * krows..(gi + 1) * cout_g * krows];
                if need_w {
                    im2col(&xv[goff..goff + in_plane], &geom, &mut cols);
                    mm_nt(gout, &cols, &mut dw[gi * cout_g * krows..(gi + 1) * cout_g * krows], cout_g, ncols, krows);
                }
                if need_x {
                    dcols.iter_mut().for_each(|v| *v = 0.0);
                    mm_tn(wg, gout, &mut dcols, krows, cout_g, ncols);
                    col2im(&dcols, &geom, &mut dx[goff..goff + in_plane]);
                }
            }
        }
        if need_x {
            self.accumulate(x, dx);
        }
        if need_w {
            self.accumulate(w, dw);
        }
        if let Some(b) = b {
            let db = channel_sums(g, plan.batch, plan.cout, ncols);
            self.accumulate(b, db);
        }
    }

    fn conv_t_backward(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize, g: &[f64]) {
        let plan = ConvTPlan::new(self.shape(x), self.shape(w), b.map(|b| self.shape(b).to_vec()), stride, padding)
            .expect("validated in forward");
        let geom = plan.geom;
        let (krows, ncols) = (geom.col_rows(), geom.col_cols());
        let out_plane = plan.cout * geom.height * geom.width;
        let need_x = self.nodes[x.0].requires_grad;
        let need_w = self.nodes[w.0].requires_grad;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut dx = vec![0.0; if need_x { xv.len() } else { 0 }];
        let mut dw = vec![0.0; if need_w { wv.len() } else { 0 }];
        let mut cols = vec![0.0; krows * ncols];
        for bi in 0..plan.batch {
            im2col(&g[bi * out_plane..(bi + 1) * out_plane], &geom, &mut cols);
            if need_x {
                mm_nn(wv, &cols, &mut dx[bi * plan.cin * ncols..(bi + 1) * plan.cin * ncols], plan.cin, krows, ncols);
            }
            if need_w {
                mm_nt(&xv[bi * plan.cin * ncols..(bi + 1) * plan.cin * ncols], &cols, &mut dw, plan.cin, ncols, krows);
            }
        }
        if need_x {
            self.accumulate(x, dx);
        }
        if need_w {
            self.accumulate(w, dw);
        }
        if let Some(b) = b {
            let db = channel_sums(g, plan.batch, plan.cout, geom.height * geom.width);
            self.accumulate(b, db);
        }
    }
}

fn channel_sums(g: &[f64], batch: usize, channels: usize, plane: usize) -> Vec<f64> {
    let mut db = vec![0.0; channels];
    for bi in 0..batch {
        for (co, acc) in db.iter_mut().enumerate() {
            *acc += g[(bi * channels + co) * plane..][..plane].iter().sum::<f64>();
        }
    }
    db
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::Exp(..) => "exp",
        Op::Ln(..) => "ln",
        Op::Sqrt(..) => "sqrt",
        Op::Square(..) => "square",
        Op::Powf(..) => "powf",
        Op::ClampMin(..) => "clamp_min",
        Op::Act(..) => "activation",
        Op::SumAll(..) => "sum",
        Op::SumAxes(..) => "sum_axes",
        Op::Reshape(..) => "reshape",
        Op::Permute(..) => "permute",
        Op::Narrow { .. } => "narrow",
        Op::Concat { .. } => "concat",
        Op::MatMul(..) => "matmul",
        Op::Conv2d { .. } => "conv2d",
        Op::ConvT2d { .. } => "conv_transpose2d",
        Op::Softmax(..) => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Pool(..) => "pool",
        Op::Bilinear(..) => "interpolate_bilinear",
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    let k = (2.0 / PI).sqrt();
    0.5 * x * (1.0 + (k * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let k = (2.0 / PI).sqrt();
    let t = (k * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * GELU_C * x * x)
}

fn split3(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (shape[..axis].iter().product(), shape[axis], shape[axis + 1..].iter().product())
}

fn ln_normalize(x: &[f64], c: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut out = Vec::with_capacity(x.len());
    let mut inv = Vec::with_capacity(x.len() / c);
    for row in x.chunks(c) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv.push(is);
        out.extend(row.iter().map(|v| (v - mean) * is));
    }
    (out, inv)
}

fn permute_data(t: &Tensor, perm: &[usize]) -> Tensor {
    let shape = t.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides_of(shape);
    // stride in the source for each output axis
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = t.numel();
    let src = t.data();
    let mut out = Vec::with_capacity(n);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(src[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    Tensor::new(&out_shape, out).expect("permutation preserves element count")
}

/// Plain-tensor bilinear resize with half-pixel centers.
pub fn bilinear_forward(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let s = x.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    if h == out_h && w == out_w {
        return x.clone();
    }
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let src = x.data();
    let mut out = Vec::with_capacity(b * c * out_h * out_w);
    for plane in src.chunks(h * w).take(b * c) {
        for y in &ty {
            let r0 = &plane[y.lo * w..(y.lo + 1) * w];
            let r1 = &plane[y.hi * w..(y.hi + 1) * w];
            for xt in &tx {
                let top = r0[xt.lo] * (1.0 - xt.frac) + r0[xt.hi] * xt.frac;
                let bot = r1[xt.lo] * (1.0 - xt.frac) + r1[xt.hi] * xt.frac;
                out.push(top * (1.0 - y.frac) + bot * y.frac);
            }
        }
    }
    Tensor::new(&[b, c, out_h, out_w], out).expect("sizes are consistent")
}

fn bilinear_backward(in_shape: &[usize], out_shape: &[usize], g: &[f64]) -> Vec<f64> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let planes = in_shape[0] * in_shape[1];
    let mut d = vec![0.0; planes * h * w];
    for p in 0..planes {
        let gp = &g[p * oh * ow..(p + 1) * oh * ow];
        let dp = &mut d[p * h * w..(p + 1) * h * w];
        for (yi, y) in ty.iter().enumerate() {
            for (xi, xt) in tx.iter().enumerate() {
                let gv = gp[yi * ow + xi];
                dp[y.lo * w + xt.lo] += gv * (1.0 - y.frac) * (1.0 - xt.frac);
                dp[y.lo * w + xt.hi] += gv * (1.0 - y.frac) * xt.frac;
                dp[y.hi * w + xt.lo] += gv * y.frac * (1.0 - xt.frac);
                dp[y.hi * w + xt.hi] += gv * y.frac * xt.frac;
            }
        }
    }
    d
}

struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
    a_map: Vec<usize>,
    b_map: Vec<usize>,
}

impl MatmulPlan {
    fn new(sa: &[usize], sb: &[usize]) -> Result<Self> {
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::Shape(format!("matmul needs rank >= 2, got {sa:?} and {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::Shape(format!("matmul inner extents differ: {sa:?} x {sb:?}")));
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let rank = ba.len().max(bb.len());
        let (pa, pb) = (pad_shape(ba, rank), pad_shape(bb, rank));
        let batch = broadcast_shape(&pa, &pb)
            .ok_or_else(|| Error::Shape(format!("matmul batch extents incompatible: {sa:?} x {sb:?}")))?;
        let (a_map, b_map) = if batch.is_empty() {
            (vec![0], vec![0])
        } else {
            (broadcast_map(&batch, &pa), broadcast_map(&batch, &pb))
        };
        let mut out_shape = batch;
        out_shape.extend([m, n]);
        Ok(Self { m, k, n, out_shape, a_map, b_map })
    }
}

struct ConvPlan {
    batch: usize,
    cin: usize,
    cout: usize,
    geom: ConvGeom,
}

impl ConvPlan {
    fn forward(xs: &[usize], ws: &[usize], bs: Option<Vec<usize>>, opts: Conv2dOpts) -> Result<Self> {
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::Shape(format!("conv2d expects 4-D input and weight, got {xs:?}, {ws:?}")));
        }
        let (batch, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, cin_g, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        let g = opts.groups;
        if g == 0 || cin % g != 0 || cout % g != 0 || cin / g != cin_g {
            return Err(Error::Shape(format!("conv2d groups={g} incompatible with input {xs:?} and weight {ws:?}")));
        }
        if let Some(bs) = bs {
            if bs != [cout] {
                return Err(Error::Shape(format!("conv2d bias {bs:?} != [{cout}]")));
            }
        }
        let oh = conv_out_extent(h, kh, opts.stride, opts.padding);
        let ow = conv_out_extent(w, kw, opts.stride, opts.padding);
        let (Some(out_h), Some(out_w)) = (oh, ow) else {
            return Err(Error::Shape(format!("conv2d output extent non-positive for {xs:?} with kernel {kh}x{kw}")));
        };
        let geom = ConvGeom { channels: cin_g, height: h, width: w, kh, kw, stride: opts.stride, padding: opts.padding, out_h, out_w };
        Ok(Self { batch, cin, cout, geom })
    }
}

struct ConvTPlan {
    batch: usize,
    cin: usize,
    cout: usize,
    /// Geometry of the equivalent forward correlation: the "image" is the
    /// transposed-conv output and the "columns" are the input positions.
    geom: ConvGeom,
}

impl ConvTPlan {
    fn new(xs: &[usize], ws: &[usize], bs: Option<Vec<usize>>, stride: usize, padding: usize) -> Result<Self> {
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[0] {
            return Err(Error::Shape(format!("conv_transpose2d shapes incompatible: {xs:?}, {ws:?}")));
        }
        let (batch, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[1], ws[2], ws[3]);
        if let Some(bs) = bs {
            if bs != [cout] {
                return Err(Error::Shape(format!("conv_transpose2d bias {bs:?} != [{cout}]")));
            }
        }
        let oh = ((h - 1) * stride + kh) as isize - 2 * padding as isize;
        let ow = ((w - 1) * stride + kw) as isize - 2 * padding as isize;
        if oh <= 0 || ow <= 0 || stride == 0 {
            return Err(Error::Shape(format!("conv_transpose2d output extent non-positive ({oh}x{ow})")));
        }
        let geom = ConvGeom {
            channels: cout,
            height: oh as usize,
            width: ow as usize,
            kh,
            kw,
            stride,
            padding,
            out_h: h,
            out_w: w,
        };
        Ok(Self { batch, cin, cout, geom })
    }
}
