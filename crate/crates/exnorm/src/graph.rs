//! Tape-based reverse-mode automatic differentiation.
//!
//! Values are computed eagerly as ops are recorded, so building the graph is
//! the forward pass. `backward` walks the tape once in reverse; a tape is
//! single-use and a fresh `Graph` is built per training step.

use crate::error::{ExnError, Result};
use crate::scalar::Scalar;
use crate::tensor::{for_each_index, matmul2d, strides_of, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    AddScalar,
    MulScalar(f64),
    Sqrt,
    Tanh,
    Relu,
    Reduce {
        axes: Vec<usize>,
        keepdims: bool,
        mean: bool,
    },
    SumAll,
    Broadcast,
    Reshape,
    Select {
        axis: usize,
        index: usize,
    },
    Stack1,
    Matmul,
    Conv2d {
        stride: usize,
        pad: usize,
        groups: usize,
    },
    GlobalAvgPool,
    SoftmaxRows,
    Gram,
    SoftmaxXent {
        labels: Vec<usize>,
    },
}

struct Node<T: Scalar> {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    name: Option<String>,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn ew<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    debug_assert_eq!(a.shape(), b.shape());
    let data: Vec<T> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("ew preserves shape")
}

fn check_binop_shapes<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if !crate::tensor::broadcast_ok(b.shape(), a.shape()) {
        return Err(ExnError::shape(format!(
            "{what}: rhs {:?} does not broadcast to lhs {:?}",
            b.shape(),
            a.shape()
        )));
    }
    Ok(())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        op: Op,
        inputs: Vec<usize>,
        value: Tensor<T>,
        requires_grad: bool,
        name: Option<String>,
    ) -> Var {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            grad: None,
            requires_grad,
            name,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        self.nodes
            .get(v.0)
            .ok_or_else(|| ExnError::graph(format!("var {} not on this tape", v.0)))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Leaf that does not receive gradients (data, constants, frozen stats).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(Op::Leaf, vec![], t, false, None)
    }

    /// Named leaf that receives gradients. Names let callers detect
    /// parameters that never got a gradient after backward.
    pub fn param(&mut self, name: &str, t: Tensor<T>) -> Var {
        self.push(Op::Leaf, vec![], t, true, Some(name.to_string()))
    }

    fn carries(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binop(a, b, Op::Add)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binop(a, b, Op::Sub)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binop(a, b, Op::Mul)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binop(a, b, Op::Div)
    }

    fn binop(&mut self, a: Var, b: Var, op: Op) -> Result<Var> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        check_binop_shapes(av, bv, "binary op")?;
        let bb = bv.broadcast_to(av.shape())?;
        let value = match op {
            Op::Add => ew(av, &bb, |x, y| x + y),
            Op::Sub => ew(av, &bb, |x, y| x - y),
            Op::Mul => ew(av, &bb, |x, y| x * y),
            Op::Div => ew(av, &bb, |x, y| x / y),
            _ => unreachable!(),
        };
        let rg = self.carries(&[a, b]);
        Ok(self.push(op, vec![a.0, b.0], value, rg, None))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let cv = T::of_f64(c);
        let value = self.node(a)?.value.map(|x| x + cv);
        let rg = self.carries(&[a]);
        Ok(self.push(Op::AddScalar, vec![a.0], value, rg, None))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let cv = T::of_f64(c);
        let value = self.node(a)?.value.map(|x| x * cv);
        let rg = self.carries(&[a]);
        Ok(self.push(Op::MulScalar(c), vec![a.0], value, rg, None))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let av = &self.node(a)?.value;
        if av.data().iter().any(|v| *v < T::zero()) {
            return Err(ExnError::numeric("sqrt of negative value"));
        }
        let value = av.map(|x| x.sqrt());
        let rg = self.carries(&[a]);
        Ok(self.push(Op::Sqrt, vec![a.0], value, rg, None))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let value = self.node(a)?.value.map(|x| x.tanh());
        let rg = self.carries(&[a]);
        Ok(self.push(Op::Tanh, vec![a.0], value, rg, None))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.node(a)?.value.map(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.carries(&[a]);
        Ok(self.push(Op::Relu, vec![a.0], value, rg, None))
    }

    pub fn reduce_mean(&mut self, a: Var, axes: &[usize], keepdims: bool) -> Result<Var> {
        self.reduce(a, axes, keepdims, true)
    }

    pub fn reduce_sum(&mut self, a: Var, axes: &[usize], keepdims: bool) -> Result<Var> {
        self.reduce(a, axes, keepdims, false)
    }

    fn reduce(&mut self, a: Var, axes: &[usize], keepdims: bool, mean: bool) -> Result<Var> {
        let value = self.node(a)?.value.reduce(axes, keepdims, mean)?;
        let rg = self.carries(&[a]);
        Ok(self.push(
            Op::Reduce {
                axes: axes.to_vec(),
                keepdims,
                mean,
            },
            vec![a.0],
            value,
            rg,
            None,
        ))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(T::of_f64(self.node(a)?.value.sum_all_f64()));
        let rg = self.carries(&[a]);
        Ok(self.push(Op::SumAll, vec![a.0], value, rg, None))
    }

    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.node(a)?.value.broadcast_to(shape)?;
        let rg = self.carries(&[a]);
        Ok(self.push(Op::Broadcast, vec![a.0], value, rg, None))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.node(a)?.value.reshape(shape)?;
        let rg = self.carries(&[a]);
        Ok(self.push(Op::Reshape, vec![a.0], value, rg, None))
    }

    /// Picks `index` along `axis` and drops that axis.
    pub fn select(&mut self, a: Var, axis: usize, index: usize) -> Result<Var> {
        let av = &self.node(a)?.value;
        if axis >= av.rank() {
            return Err(ExnError::invalid(format!(
                "select axis {axis} out of range for rank {}",
                av.rank()
            )));
        }
        if index >= av.shape()[axis] {
            return Err(ExnError::invalid(format!(
                "select index {index} out of range for axis size {}",
                av.shape()[axis]
            )));
        }
        let out_shape: Vec<usize> = av
            .shape()
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != axis)
            .map(|(_, &d)| d)
            .collect();
        let mut out = Tensor::zeros(&out_shape);
        let src_strides = strides_of(av.shape());
        let mut flat = 0usize;
        {
            let od = out.data_mut();
            for_each_index(&out_shape, |idx| {
                let mut so = index * src_strides[axis];
                for (ax, &i) in idx.iter().enumerate() {
                    let src_ax = if ax < axis { ax } else { ax + 1 };
                    so += i * src_strides[src_ax];
                }
                od[flat] = av.data()[so];
                flat += 1;
            });
        }
        let rg = self.carries(&[a]);
        Ok(self.push(Op::Select { axis, index }, vec![a.0], out, rg, None))
    }

    /// Stacks K rank-2 tensors of shape [N, C] into [N, K, C].
    pub fn stack1(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(ExnError::invalid("stack1 needs at least one input"));
        }
        let first = self.node(parts[0])?.value.shape().to_vec();
        if first.len() != 2 {
            return Err(ExnError::shape(format!(
                "stack1 wants rank-2 inputs, got {first:?}"
            )));
        }
        for &p in parts {
            if self.node(p)?.value.shape() != first.as_slice() {
                return Err(ExnError::shape("stack1 inputs must share one shape".to_string()));
            }
        }
        let (n, c) = (first[0], first[1]);
        let k = parts.len();
        let mut out = Tensor::zeros(&[n, k, c]);
        for (ki, &p) in parts.iter().enumerate() {
            let src = self.node(p)?.value.data().to_vec();
            let od = out.data_mut();
            for ni in 0..n {
                for ci in 0..c {
                    od[(ni * k + ki) * c + ci] = src[ni * c + ci];
                }
            }
        }
        let rg = self.carries(parts);
        Ok(self.push(
            Op::Stack1,
            parts.iter().map(|v| v.0).collect(),
            out,
            rg,
            None,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul2d(&self.node(a)?.value, &self.node(b)?.value)?;
        let rg = self.carries(&[a, b]);
        Ok(self.push(Op::Matmul, vec![a.0, b.0], value, rg, None))
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Var> {
        let value = conv2d_fwd(&self.node(x)?.value, &self.node(w)?.value, stride, pad, groups)?;
        let rg = self.carries(&[x, w]);
        Ok(self.push(
            Op::Conv2d {
                stride,
                pad,
                groups,
            },
            vec![x.0, w.0],
            value,
            rg,
            None,
        ))
    }

    /// [N, C, H, W] -> [N, C], mean over the spatial extent.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xv = &self.node(x)?.value;
        if xv.rank() != 4 {
            return Err(ExnError::shape(format!(
                "global_avg_pool wants rank 4, got {:?}",
                xv.shape()
            )));
        }
        let value = xv.reduce(&[2, 3], false, true)?;
        let rg = self.carries(&[x]);
        Ok(self.push(Op::GlobalAvgPool, vec![x.0], value, rg, None))
    }

    /// Softmax along the last axis, stabilized by row-max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = &self.node(x)?.value;
        if xv.rank() == 0 {
            return Err(ExnError::shape("softmax_rows wants rank >= 1".to_string()));
        }
        if xv.data().iter().any(|v| v.is_nan()) {
            return Err(ExnError::numeric("softmax input contains NaN"));
        }
        let value = softmax_last_axis(xv);
        let rg = self.carries(&[x]);
        Ok(self.push(Op::SoftmaxRows, vec![x.0], value, rg, None))
    }

    /// Per-sample Gram matrix: [N, K, C] -> [N, K, K], out[n] = z[n] z[n]^T.
    pub fn gram(&mut self, z: Var) -> Result<Var> {
        let zv = &self.node(z)?.value;
        if zv.rank() != 3 {
            return Err(ExnError::shape(format!(
                "gram wants rank 3, got {:?}",
                zv.shape()
            )));
        }
        let (n, k, c) = (zv.shape()[0], zv.shape()[1], zv.shape()[2]);
        let mut out = Tensor::zeros(&[n, k, k]);
        {
            let zd = zv.data();
            let od = out.data_mut();
            for ni in 0..n {
                for a in 0..k {
                    for b in 0..k {
                        let mut s = 0f64;
                        for ci in 0..c {
                            s += zd[(ni * k + a) * c + ci].as_f64()
                                * zd[(ni * k + b) * c + ci].as_f64();
                        }
                        od[(ni * k + a) * k + b] = T::of_f64(s);
                    }
                }
            }
        }
        let rg = self.carries(&[z]);
        Ok(self.push(Op::Gram, vec![z.0], out, rg, None))
    }

    /// Mean softmax cross-entropy over rows of [N, M] against integer labels.
    pub fn softmax_xent(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = &self.node(logits)?.value;
        if lv.rank() != 2 {
            return Err(ExnError::shape(format!(
                "softmax_xent wants [N, M] logits, got {:?}",
                lv.shape()
            )));
        }
        let (n, m) = (lv.shape()[0], lv.shape()[1]);
        if labels.len() != n {
            return Err(ExnError::invalid(format!(
                "{} labels for {} rows",
                labels.len(),
                n
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= m) {
            return Err(ExnError::invalid(format!(
                "label {bad} out of range for {m} classes"
            )));
        }
        if lv.data().iter().any(|v| v.is_nan()) {
            return Err(ExnError::numeric("cross-entropy logits contain NaN"));
        }
        let mut total = 0f64;
        let ld = lv.data();
        for r in 0..n {
            let row = &ld[r * m..(r + 1) * m];
            let mx = row
                .iter()
                .map(|v| v.as_f64())
                .fold(f64::NEG_INFINITY, f64::max);
            let lse = row
                .iter()
                .map(|v| (v.as_f64() - mx).exp())
                .sum::<f64>()
                .ln();
            total += lse - (row[labels[r]].as_f64() - mx);
        }
        let value = Tensor::scalar(T::of_f64(total / n as f64));
        let rg = self.carries(&[logits]);
        Ok(self.push(
            Op::SoftmaxXent {
                labels: labels.to_vec(),
            },
            vec![logits.0],
            value,
            rg,
            None,
        ))
    }

    /// Reverse pass from a scalar loss. A tape supports exactly one backward.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(ExnError::graph("backward called twice on one tape"));
        }
        let li = loss.0;
        if li >= self.nodes.len() {
            return Err(ExnError::graph("loss var not on this tape"));
        }
        if self.nodes[li].value.numel() != 1 {
            return Err(ExnError::graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[li].value.shape()
            )));
        }
        self.backward_done = true;
        if !self.nodes[li].requires_grad {
            return Err(ExnError::graph(
                "loss does not depend on any parameter".to_string(),
            ));
        }
        self.nodes[li].grad = Some(Tensor::ones(self.nodes[li].value.shape()));
        for i in (0..=li).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].inputs.is_empty() {
                continue;
            }
            let Some(dy) = self.nodes[i].grad.clone() else {
                continue;
            };
            let updates = self.vjp(i, &dy)?;
            for (j, gj) in updates {
                self.accumulate(j, gj)?;
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, idx: usize, g: Tensor<T>) -> Result<()> {
        if g.shape() != self.nodes[idx].value.shape() {
            return Err(ExnError::graph(format!(
                "gradient shape {:?} does not match value shape {:?}",
                g.shape(),
                self.nodes[idx].value.shape()
            )));
        }
        match &mut self.nodes[idx].grad {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn vjp(&self, i: usize, dy: &Tensor<T>) -> Result<Vec<(usize, Tensor<T>)>> {
        let node = &self.nodes[i];
        let ins = &node.inputs;
        let needs = |j: usize| self.nodes[j].requires_grad;
        let val = |j: usize| &self.nodes[j].value;
        let mut out: Vec<(usize, Tensor<T>)> = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add => {
                if needs(ins[0]) {
                    out.push((ins[0], dy.clone()));
                }
                if needs(ins[1]) {
                    out.push((ins[1], dy.reduce_to(val(ins[1]).shape())?));
                }
            }
            Op::Sub => {
                if needs(ins[0]) {
                    out.push((ins[0], dy.clone()));
                }
                if needs(ins[1]) {
                    let neg = dy.map(|v| -v);
                    out.push((ins[1], neg.reduce_to(val(ins[1]).shape())?));
                }
            }
            Op::Mul => {
                let a = val(ins[0]);
                let b = val(ins[1]);
                if needs(ins[0]) {
                    let bb = b.broadcast_to(a.shape())?;
                    out.push((ins[0], ew(dy, &bb, |d, x| d * x)));
                }
                if needs(ins[1]) {
                    let da = ew(dy, a, |d, x| d * x);
                    out.push((ins[1], da.reduce_to(b.shape())?));
                }
            }
            Op::Div => {
                let a = val(ins[0]);
                let b = val(ins[1]);
                let bb = b.broadcast_to(a.shape())?;
                if needs(ins[0]) {
                    out.push((ins[0], ew(dy, &bb, |d, x| d / x)));
                }
                if needs(ins[1]) {
                    let y = &node.value;
                    let t = ew(&ew(dy, y, |d, q| d * q), &bb, |dq, x| -(dq / x));
                    out.push((ins[1], t.reduce_to(b.shape())?));
                }
            }
            Op::AddScalar => {
                if needs(ins[0]) {
                    out.push((ins[0], dy.clone()));
                }
            }
            Op::MulScalar(c) => {
                if needs(ins[0]) {
                    let cv = T::of_f64(*c);
                    out.push((ins[0], dy.map(|d| d * cv)));
                }
            }
            Op::Sqrt => {
                if needs(ins[0]) {
                    let two = T::of_f64(2.0);
                    out.push((ins[0], ew(dy, &node.value, |d, y| d / (two * y))));
                }
            }
            Op::Tanh => {
                if needs(ins[0]) {
                    out.push((
                        ins[0],
                        ew(dy, &node.value, |d, y| d * (T::one() - y * y)),
                    ));
                }
            }
            Op::Relu => {
                if needs(ins[0]) {
                    out.push((
                        ins[0],
                        ew(dy, val(ins[0]), |d, x| if x > T::zero() { d } else { T::zero() }),
                    ));
                }
            }
            Op::Reduce {
                axes,
                keepdims,
                mean,
            } => {
                if needs(ins[0]) {
                    let in_shape = val(ins[0]).shape().to_vec();
                    let mut kept = in_shape.clone();
                    let mut count = 1usize;
                    for &a in axes {
                        count *= in_shape[a];
                        kept[a] = 1;
                    }
                    let dk = if *keepdims {
                        dy.clone()
                    } else {
                        dy.reshape(&kept)?
                    };
                    let mut g = dk.broadcast_to(&in_shape)?;
                    if *mean && count > 0 {
                        let inv = T::of_f64(1.0 / count as f64);
                        g = g.map(|v| v * inv);
                    }
                    out.push((ins[0], g));
                }
            }
            Op::SumAll => {
                if needs(ins[0]) {
                    let d = dy.data()[0];
                    out.push((ins[0], Tensor::full(val(ins[0]).shape(), d)));
                }
            }
            Op::Broadcast => {
                if needs(ins[0]) {
                    out.push((ins[0], dy.reduce_to(val(ins[0]).shape())?));
                }
            }
            Op::Reshape => {
                if needs(ins[0]) {
                    out.push((ins[0], dy.reshape(val(ins[0]).shape())?));
                }
            }
            Op::Select { axis, index } => {
                if needs(ins[0]) {
                    let src_shape = val(ins[0]).shape().to_vec();
                    let mut g = Tensor::zeros(&src_shape);
                    let src_strides = strides_of(&src_shape);
                    let mut flat = 0usize;
                    {
                        let gd = g.data_mut();
                        for_each_index(dy.shape(), |idx| {
                            let mut so = index * src_strides[*axis];
                            for (ax, &ii) in idx.iter().enumerate() {
                                let src_ax = if ax < *axis { ax } else { ax + 1 };
                                so += ii * src_strides[src_ax];
                            }
                            gd[so] = dy.data()[flat];
                            flat += 1;
                        });
                    }
                    out.push((ins[0], g));
                }
            }
            Op::Stack1 => {
                let k = ins.len();
                let (n, c) = (node.value.shape()[0], node.value.shape()[2]);
                for (ki, &j) in ins.iter().enumerate() {
                    if !needs(j) {
                        continue;
                    }
                    let mut g = Tensor::zeros(&[n, c]);
                    {
                        let gd = g.data_mut();
                        for ni in 0..n {
                            for ci in 0..c {
                                gd[ni * c + ci] = dy.data()[(ni * k + ki) * c + ci];
                            }
                        }
                    }
                    out.push((j, g));
                }
            }
            Op::Matmul => {
                let a = val(ins[0]);
                let b = val(ins[1]);
                if needs(ins[0]) {
                    out.push((ins[0], matmul2d(dy, &b.t2()?)?));
                }
                if needs(ins[1]) {
                    out.push((ins[1], matmul2d(&a.t2()?, dy)?));
                }
            }
            Op::Conv2d {
                stride,
                pad,
                groups,
            } => {
                let x = val(ins[0]);
                let w = val(ins[1]);
                let (dx, dw) = conv2d_bwd(
                    x,
                    w,
                    dy,
                    *stride,
                    *pad,
                    *groups,
                    needs(ins[0]),
                    needs(ins[1]),
                )?;
                if let Some(dx) = dx {
                    out.push((ins[0], dx));
                }
                if let Some(dw) = dw {
                    out.push((ins[1], dw));
                }
            }
            Op::GlobalAvgPool => {
                if needs(ins[0]) {
                    let xs = val(ins[0]).shape().to_vec();
                    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let inv = T::of_f64(1.0 / (h * w) as f64);
                    let mut g = Tensor::zeros(&xs);
                    {
                        let gd = g.data_mut();
                        for ni in 0..n {
                            for ci in 0..c {
                                let d = dy.data()[ni * c + ci] * inv;
                                for s in 0..h * w {
                                    gd[(ni * c + ci) * h * w + s] = d;
                                }
                            }
                        }
                    }
                    out.push((ins[0], g));
                }
            }
            Op::SoftmaxRows => {
                if needs(ins[0]) {
                    let y = &node.value;
                    let last = *y.shape().last().unwrap();
                    let rows = y.numel() / last;
                    let mut g = Tensor::zeros(y.shape());
                    {
                        let gd = g.data_mut();
                        for r in 0..rows {
                            let ys = &y.data()[r * last..(r + 1) * last];
                            let ds = &dy.data()[r * last..(r + 1) * last];
                            let dot: f64 = ys
                                .iter()
                                .zip(ds)
                                .map(|(a, b)| a.as_f64() * b.as_f64())
                                .sum();
                            for c in 0..last {
                                gd[r * last + c] = T::of_f64(
                                    ys[c].as_f64() * (ds[c].as_f64() - dot),
                                );
                            }
                        }
                    }
                    out.push((ins[0], g));
                }
            }
            Op::Gram => {
                if needs(ins[0]) {
                    let z = val(ins[0]);
                    let (n, k, c) = (z.shape()[0], z.shape()[1], z.shape()[2]);
                    let mut g = Tensor::zeros(z.shape());
                    {
                        let gd = g.data_mut();
                        let zd = z.data();
                        for ni in 0..n {
                            for a in 0..k {
                                for ci in 0..c {
                                    let mut s = 0f64;
                                    for b in 0..k {
                                        let dg = dy.data()[(ni * k + a) * k + b].as_f64()
                                            + dy.data()[(ni * k + b) * k + a].as_f64();
                                        s += dg * zd[(ni * k + b) * c + ci].as_f64();
                                    }
                                    gd[(ni * k + a) * c + ci] = T::of_f64(s);
                                }
                            }
                        }
                    }
                    out.push((ins[0], g));
                }
            }
            Op::SoftmaxXent { labels } => {
                if needs(ins[0]) {
                    let logits = val(ins[0]);
                    let (n, m) = (logits.shape()[0], logits.shape()[1]);
                    let p = softmax_last_axis(logits);
                    let scale = dy.data()[0].as_f64() / n as f64;
                    let mut g = Tensor::zeros(logits.shape());
                    {
                        let gd = g.data_mut();
                        for r in 0..n {
                            for c in 0..m {
                                let mut v = p.data()[r * m + c].as_f64();
                                if c == labels[r] {
                                    v -= 1.0;
                                }
                                gd[r * m + c] = T::of_f64(v * scale);
                            }
                        }
                    }
                    out.push((ins[0], g));
                }
            }
        }
        Ok(out)
    }

    /// Named parameter leaves that never received a gradient. Non-empty after
    /// backward means part of the model was silently detached.
    pub fn params_without_grad(&self) -> Vec<String> {
        self.nodes
            .iter()
            .filter(|n| n.requires_grad && matches!(n.op, Op::Leaf) && n.grad.is_none())
            .filter_map(|n| n.name.clone())
            .collect()
    }
}

fn softmax_last_axis<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let last = *x.shape().last().expect("rank >= 1");
    let rows = x.numel() / last;
    let mut out = Tensor::zeros(x.shape());
    {
        let od = out.data_mut();
        for r in 0..rows {
            let row = &x.data()[r * last..(r + 1) * last];
            let mx = row
                .iter()
                .map(|v| v.as_f64())
                .fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0f64;
            let mut exps = vec![0f64; last];
            for (c, v) in row.iter().enumerate() {
                let e = (v.as_f64() - mx).exp();
                exps[c] = e;
                denom += e;
            }
            for c in 0..last {
                od[r * last + c] = T::of_f64(exps[c] / denom);
            }
        }
    }
    out
}

fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < kernel {
        return Err(ExnError::shape(format!(
            "conv kernel {kernel} larger than padded input {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

fn conv2d_fwd<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Result<Tensor<T>> {
    if x.rank() != 4 || w.rank() != 4 {
        return Err(ExnError::shape(format!(
            "conv2d wants rank-4 input and weight, got {:?} and {:?}",
            x.shape(),
            w.shape()
        )));
    }
    if stride == 0 || groups == 0 {
        return Err(ExnError::invalid("conv2d stride and groups must be positive"));
    }
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, wci, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if cin % groups != 0 || cout % groups != 0 {
        return Err(ExnError::shape(format!(
            "conv2d groups {groups} must divide in/out channels {cin}/{cout}"
        )));
    }
    let cin_g = cin / groups;
    let cout_g = cout / groups;
    if wci != cin_g {
        return Err(ExnError::shape(format!(
            "conv2d weight in-channels {wci} != {cin}/{groups}"
        )));
    }
    let ho = conv_out_dim(h, kh, stride, pad)?;
    let wo = conv_out_dim(wd, kw, stride, pad)?;
    let mut out = Tensor::zeros(&[n, cout, ho, wo]);
    let xd = x.data();
    let wdta = w.data();
    let od = out.data_mut();
    for ni in 0..n {
        for co in 0..cout {
            let g = co / cout_g;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0f64;
                    for ci in 0..cin_g {
                        let ic = g * cin_g + ci;
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc += xd[((ni * cin + ic) * h + iy as usize) * wd + ix as usize]
                                    .as_f64()
                                    * wdta[((co * cin_g + ci) * kh + ky) * kw + kx].as_f64();
                            }
                        }
                    }
                    od[((ni * cout + co) * ho + oy) * wo + ox] = T::of_f64(acc);
                }
            }
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_bwd<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    groups: usize,
    need_dx: bool,
    need_dw: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (ho, wo) = (dy.shape()[2], dy.shape()[3]);
    let cin_g = cin / groups;
    let cout_g = cout / groups;
    let mut dx_acc = if need_dx {
        Some(vec![0f64; x.numel()])
    } else {
        None
    };
    let mut dw_acc = if need_dw {
        Some(vec![0f64; w.numel()])
    } else {
        None
    };
    let xd = x.data();
    let wdta = w.data();
    let dyd = dy.data();
    for ni in 0..n {
        for co in 0..cout {
            let g = co / cout_g;
            for oy in 0..ho {
                for ox in 0..wo {
                    let d = dyd[((ni * cout + co) * ho + oy) * wo + ox].as_f64();
                    if d == 0.0 {
                        continue;
                    }
                    for ci in 0..cin_g {
                        let ic = g * cin_g + ci;
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let xi = ((ni * cin + ic) * h + iy as usize) * wd + ix as usize;
                                let wi = ((co * cin_g + ci) * kh + ky) * kw + kx;
                                if let Some(acc) = dx_acc.as_mut() {
                                    acc[xi] += d * wdta[wi].as_f64();
                                }
                                if let Some(acc) = dw_acc.as_mut() {
                                    acc[wi] += d * xd[xi].as_f64();
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let dx = match dx_acc {
        Some(acc) => Some(Tensor::new(
            x.shape().to_vec(),
            acc.into_iter().map(T::of_f64).collect(),
        )?),
        None => None,
    };
    let dw = match dw_acc {
        Some(acc) => Some(Tensor::new(
            w.shape().to_vec(),
            acc.into_iter().map(T::of_f64).collect(),
        )?),
        None => None,
    };
    Ok((dx, dw))
}
