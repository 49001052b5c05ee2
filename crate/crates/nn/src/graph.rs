//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its value; [`Graph::backward`]
//! walks the tape in reverse. Nodes that do not depend on a parameter are
//! never differentiated.

use crate::activation::Activation;
use crate::error::{NnError, Result};
use crate::exec::Execution;
use crate::kernels::{self, ConvGeom, Stencil};
use crate::tensor::{gemm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Row-block layout of a jet tensor: `[value | first-order | second-order]`,
/// each block holding `points` rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JetLayout {
    pub points: usize,
    pub directions: usize,
    pub order: usize,
}

impl JetLayout {
    pub fn blocks(&self) -> usize {
        1 + self.directions * self.order
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Linear { x: Var, w: Var, b: Option<Var>, bias_rows: usize },
    Act(Var, Activation),
    ActJet(Var, Activation, JetLayout),
    Conv { x: Var, w: Var, b: Var, geom: ConvGeom },
    Upsample { x: Var, rows: usize, size: [usize; 3], factor: [usize; 3] },
    Reshape(Var),
    Narrow { x: Var, outer: usize, axis_len: usize, inner: usize, start: usize, len: usize },
    Concat(Vec<Var>),
    Diff {
        x: Var,
        rows: usize,
        size: [usize; 3],
        axis: usize,
        spacing: f64,
        stencil: Stencil,
    },
    SumSquares(Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    exec: Execution,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn add_into(slot: &mut Option<Tensor>, shape: &[usize], data: Vec<f64>) {
    match slot {
        Some(t) => t.data_mut().iter_mut().zip(&data).for_each(|(a, b)| *a += b),
        None => *slot = Some(Tensor::from_vec(shape, data).expect("gradient shape")),
    }
}

impl Graph {
    pub fn new(exec: Execution) -> Self {
        Self {
            nodes: Vec::new(),
            exec,
        }
    }

    pub fn execution(&self) -> Execution {
        self.exec
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Param => true,
            Op::Input => false,
            _ => parents.iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, &[])
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Param, &[])
    }

    fn check_same(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(NnError::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check_same(a, b, what)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::from_vec(x.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |p, q| p + q)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |p, q| p - q)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |p, q| p * q)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, alpha: f64) -> Var {
        let v = self.value(a).map(|x| alpha * x);
        self.push(v, Op::Scale(a, alpha), &[a])
    }

    /// `x [rows, in] * w^T [in, out] + b`, with the bias added only to the
    /// first `bias_rows` rows (jet blocks beyond the value block carry
    /// derivatives, which the bias does not affect).
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>, bias_rows: Option<usize>) -> Result<Var> {
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(NnError::Shape(format!("linear: input {xs:?}, weight {ws:?}")));
        }
        let (rows, inp, out) = (xs[0], xs[1], ws[0]);
        let bias_rows = bias_rows.unwrap_or(rows).min(rows);
        let mut y = vec![0.0; rows * out];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != out {
                return Err(NnError::Shape(format!("linear bias {:?} for width {out}", bv.shape())));
            }
            for r in 0..bias_rows {
                y[r * out..(r + 1) * out].copy_from_slice(bv.data());
            }
        }
        gemm(rows, inp, out, 1.0, self.value(x).data(), false, self.value(w).data(), true, 1.0, &mut y);
        let t = Tensor::from_vec(&[rows, out], y)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(t, Op::Linear { x, w, b, bias_rows }, &parents))
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        let v = self.value(x).map(|z| act.apply(z));
        self.push(v, Op::Act(x, act), &[x])
    }

    /// Pushes a jet tensor through an elementwise activation.
    pub fn activation_jet(&mut self, x: Var, act: Activation, layout: JetLayout) -> Result<Var> {
        let zt = self.value(x);
        let rows = zt.shape()[0];
        if zt.shape().len() != 2 || rows != layout.points * layout.blocks() || layout.order > 2 {
            return Err(NnError::Shape(format!("jet layout {layout:?} vs {:?}", zt.shape())));
        }
        let width = zt.shape()[1];
        let blk = layout.points * width;
        let z = zt.data();
        let mut a = vec![0.0; z.len()];
        let (z0, zr) = z.split_at(blk);
        for i in 0..blk {
            let [s0, s1, s2, _] = act.derivatives(z0[i]);
            a[i] = s0;
            for k in 0..layout.directions {
                let z1 = zr[k * blk + i];
                a[(1 + k) * blk + i] = s1 * z1;
                if layout.order == 2 {
                    let z2 = zr[(layout.directions + k) * blk + i];
                    a[(1 + layout.directions + k) * blk + i] = s1 * z2 + s2 * z1 * z1;
                }
            }
        }
        let t = Tensor::from_vec(&[rows, width], a)?;
        Ok(self.push(t, Op::ActJet(x, act, layout), &[x]))
    }

    /// Convolution of `[batch, in_ch, spatial...]` with `w [out_ch, in_ch, kernel...]`.
    pub fn conv(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let dim = xs.len().saturating_sub(2);
        if !(dim == 2 || dim == 3) || ws.len() != dim + 2 || ws[1] != xs[1] {
            return Err(NnError::Shape(format!("conv: input {xs:?}, weight {ws:?}")));
        }
        let lift = |v: &[usize], fill: usize| -> [usize; 3] {
            if dim == 2 {
                [fill, v[0], v[1]]
            } else {
                [v[0], v[1], v[2]]
            }
        };
        let in_size = lift(&xs[2..], 1);
        let kernel = lift(&ws[2..], 1);
        let geom = ConvGeom {
            in_ch: xs[1],
            out_ch: ws[0],
            in_size,
            kernel,
            stride: if dim == 2 { [1, stride, stride] } else { [stride; 3] },
            padding: if dim == 2 { [0, padding, padding] } else { [padding; 3] },
        };
        for a in 0..3 {
            if in_size[a] + 2 * geom.padding[a] < kernel[a] {
                return Err(NnError::Shape(format!("conv kernel {kernel:?} exceeds input {in_size:?}")));
            }
        }
        let batch = xs[0];
        let y = kernels::conv_forward(
            &geom,
            batch,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            self.exec,
        );
        let out = geom.out_size();
        let mut shape = vec![batch, geom.out_ch];
        shape.extend_from_slice(if dim == 2 { &out[1..] } else { &out[..] });
        let t = Tensor::from_vec(&shape, y)?;
        Ok(self.push(t, Op::Conv { x, w, b, geom }, &[x, w, b]))
    }

    /// Nearest-neighbour upsampling of the trailing `dim` axes.
    pub fn upsample(&mut self, x: Var, dim: usize, factor: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() < dim + 1 || !(dim == 2 || dim == 3) {
            return Err(NnError::Shape(format!("upsample{dim}d on {xs:?}")));
        }
        let sp = &xs[xs.len() - dim..];
        let size = if dim == 2 { [1, sp[0], sp[1]] } else { [sp[0], sp[1], sp[2]] };
        let fac = if dim == 2 { [1, factor, factor] } else { [factor; 3] };
        let rows: usize = xs[..xs.len() - dim].iter().product();
        let y = kernels::upsample_forward(rows, size, fac, self.value(x).data());
        let mut shape = xs[..xs.len() - dim].to_vec();
        shape.extend(sp.iter().map(|s| s * factor));
        let t = Tensor::from_vec(&shape, y)?;
        Ok(self.push(
            t,
            Op::Upsample {
                x,
                rows,
                size,
                factor: fac,
            },
            &[x],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if axis >= xs.len() || start + len > xs[axis] {
            return Err(NnError::Shape(format!("narrow axis {axis} [{start}, +{len}) of {xs:?}")));
        }
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis + 1..].iter().product();
        let axis_len = xs[axis];
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = xs.clone();
        shape[axis] = len;
        let t = Tensor::from_vec(&shape, data)?;
        Ok(self.push(
            t,
            Op::Narrow {
                x,
                outer,
                axis_len,
                inner,
                start,
                len,
            },
            &[x],
        ))
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self
            .value(*parts.first().ok_or_else(|| NnError::Shape("empty concat".into()))?)
            .shape()
            .to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.value(p).shape();
            if s[1..] != first[1..] {
                return Err(NnError::Shape(format!("concat {s:?} with {first:?}")));
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = first;
        shape[0] = lead;
        let t = Tensor::from_vec(&shape, data)?;
        Ok(self.push(t, Op::Concat(parts.to_vec()), parts))
    }

    /// Central difference of `[rows, spatial...]` fields along spatial `axis`
    /// (0-based among the trailing `dim` axes), zero outside the grid.
    pub fn central_difference(&mut self, x: Var, dim: usize, axis: usize, spacing: f64, stencil: Stencil) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() < dim || axis >= dim {
            return Err(NnError::Shape(format!("difference axis {axis} of {dim}-d field {xs:?}")));
        }
        let sp = &xs[xs.len() - dim..];
        let (size, ax) = if dim == 2 {
            ([1, sp[0], sp[1]], axis + 1)
        } else {
            ([sp[0], sp[1], sp[2]], axis)
        };
        let rows: usize = xs[..xs.len() - dim].iter().product();
        let y = kernels::central_difference(rows, size, ax, spacing, stencil, self.value(x).data());
        let t = Tensor::from_vec(&xs, y)?;
        Ok(self.push(
            t,
            Op::Diff {
                x,
                rows,
                size,
                axis: ax,
                spacing,
                stencil,
            },
            &[x],
        ))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        self.push(Tensor::scalar(s), Op::SumSquares(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(NnError::Shape("backward root must be a scalar".into()));
        }
        self.backward_with(root, Tensor::full(self.value(root).shape(), 1.0))
    }

    /// Reverse sweep with an explicit upstream gradient for `root`.
    pub fn backward_with(&self, root: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.value(root).shape() {
            return Err(NnError::Shape(format!(
                "upstream gradient {:?} for output {:?}",
                seed.shape(),
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let is_leaf = matches!(node.op, Op::Param | Op::Input);
            let g = if is_leaf {
                continue;
            } else {
                match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                }
            };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, data: Vec<f64>) {
        if self.wants(v) {
            add_into(&mut grads[v.0], self.nodes[v.0].value.shape(), data);
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Input | Op::Param => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, gd.to_vec());
                self.acc(grads, *b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, gd.to_vec());
                self.acc(grads, *b, gd.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let bv = self.value(*b).data();
                    self.acc(grads, *a, gd.iter().zip(bv).map(|(p, q)| p * q).collect());
                }
                if self.wants(*b) {
                    let av = self.value(*a).data();
                    self.acc(grads, *b, gd.iter().zip(av).map(|(p, q)| p * q).collect());
                }
            }
            Op::Scale(a, alpha) => self.acc(grads, *a, gd.iter().map(|x| alpha * x).collect()),
            Op::Linear { x, w, b, bias_rows } => {
                let xs = self.value(*x);
                let (rows, inp) = (xs.shape()[0], xs.shape()[1]);
                let out = self.value(*w).shape()[0];
                if self.wants(*x) {
                    let mut dx = vec![0.0; rows * inp];
                    gemm(rows, out, inp, 1.0, gd, false, self.value(*w).data(), false, 0.0, &mut dx);
                    self.acc(grads, *x, dx);
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; out * inp];
                    gemm(out, rows, inp, 1.0, gd, true, xs.data(), false, 0.0, &mut dw);
                    self.acc(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![0.0; out];
                        for r in 0..*bias_rows {
                            db.iter_mut().zip(&gd[r * out..(r + 1) * out]).for_each(|(a, v)| *a += v);
                        }
                        self.acc(grads, *b, db);
                    }
                }
            }
            Op::Act(x, act) => {
                let z = self.value(*x).data();
                let dx = z.iter().zip(gd).map(|(&z, &g)| act.derivatives(z)[1] * g).collect();
                self.acc(grads, *x, dx);
            }
            Op::ActJet(x, act, layout) => {
                let z = self.value(*x).data();
                let width = self.value(*x).shape()[1];
                let blk = layout.points * width;
                let k = layout.directions;
                let mut dz = vec![0.0; z.len()];
                for i in 0..blk {
                    let [_, s1, s2, s3] = act.derivatives(z[i]);
                    let mut acc0 = s1 * gd[i];
                    for d in 0..k {
                        let (i1, g1) = ((1 + d) * blk + i, gd[(1 + d) * blk + i]);
                        let z1 = z[i1];
                        acc0 += s2 * z1 * g1;
                        let mut d1 = s1 * g1;
                        if layout.order == 2 {
                            let i2 = (1 + k + d) * blk + i;
                            let (z2, g2) = (z[i2], gd[i2]);
                            dz[i2] = s1 * g2;
                            d1 += 2.0 * s2 * z1 * g2;
                            acc0 += (s2 * z2 + s3 * z1 * z1) * g2;
                        }
                        dz[i1] = d1;
                    }
                    dz[i] = acc0;
                }
                self.acc(grads, *x, dz);
            }
            Op::Conv { x, w, b, geom } => {
                let batch = self.value(*x).shape()[0];
                let need_params = self.wants(*w) || self.wants(*b);
                let (dx, dw, db) = kernels::conv_backward(
                    geom,
                    batch,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gd,
                    self.wants(*x),
                    need_params,
                    self.exec,
                );
                if let Some(dx) = dx {
                    self.acc(grads, *x, dx);
                }
                if need_params {
                    self.acc(grads, *w, dw);
                    self.acc(grads, *b, db);
                }
            }
            Op::Upsample {
                x,
                rows,
                size,
                factor,
            } => self.acc(grads, *x, kernels::upsample_backward(*rows, *size, *factor, gd)),
            Op::Reshape(x) => self.acc(grads, *x, gd.to_vec()),
            Op::Narrow {
                x,
                outer,
                axis_len,
                inner,
                start,
                len,
            } => {
                if self.wants(*x) {
                    let mut dx = vec![0.0; outer * axis_len * inner];
                    for o in 0..*outer {
                        let base = (o * axis_len + start) * inner;
                        dx[base..base + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                    }
                    self.acc(grads, *x, dx);
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.acc(grads, p, gd[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::Diff {
                x,
                rows,
                size,
                axis,
                spacing,
                stencil,
            } => {
                let mut dx = kernels::central_difference(*rows, *size, *axis, *spacing, *stencil, gd);
                dx.iter_mut().for_each(|v| *v = -*v);
                self.acc(grads, *x, dx);
            }
            Op::SumSquares(x) => {
                let s = gd[0];
                self.acc(grads, *x, self.value(*x).data().iter().map(|v| 2.0 * s * v).collect());
            }
            Op::Sum(x) => {
                let s = gd[0];
                self.acc(grads, *x, vec![s; self.value(*x).len()]);
            }
        }
    }
}
