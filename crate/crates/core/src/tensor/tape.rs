use super::kernels::{self, Conv2dGeometry};
use super::{ParamGroup, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
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
    AddBias { x: Var, bias: Var, axis: usize },
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    LeakyRelu(Var, f64),
    Square(Var),
    Softmax { x: Var, axis: usize },
    SoftmaxCrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Conv2d { x: Var, kernel: Var, geom: Conv2dGeometry },
    Upsample { x: Var, factor: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
///
/// Nodes are appended in execution order, so reverse index order is a valid
/// topological order for the adjoint sweep. Gradients accumulate across
/// repeated [`Tape::backward`] calls until [`Tape::zero_grad`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
    trainable: Option<Vec<ParamGroup>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Restricts which parameter groups are tracked; parameters of other
    /// groups enter the tape as constants.
    pub fn tracking(groups: &[ParamGroup]) -> Self {
        Self {
            trainable: Some(groups.to_vec()),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, shape: &[usize], data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let value = Tensor::new(shape, data).expect("kernel output matches shape");
        self.push(value, op, rg)
    }

    /// Records `value` as an input; gradients are tracked when the tensor's
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let rg = value.requires_grad();
        self.push(value, Op::Leaf, rg)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value.with_requires_grad(false), Op::Leaf, false)
    }

    /// Records a parameter from `store`; remembered so gradients can be
    /// written back with [`Tape::accumulate_param_grads`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        let tracked = p.value.requires_grad()
            && self.trainable.as_ref().is_none_or(|g| g.contains(&p.group));
        let mut value = p.value.clone();
        value.zero_grad();
        let var = self.push(value.with_requires_grad(tracked), Op::Leaf, tracked);
        if tracked {
            self.params.push((id, var));
        }
        var
    }

    /// Value copy with no gradient path back to `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.clone();
        self.constant(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    // ----- elementwise -------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.derived(&shape, data, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        Ok(self.zip_with(a, b, Op::Div(a, b), |x, y| x / y))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let data = self.data(x).iter().map(|v| v * s).collect();
        let shape = self.shape(x).to_vec();
        self.derived(&shape, data, Op::Scale(x, s), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let data = self.data(x).iter().map(|v| v + s).collect();
        let shape = self.shape(x).to_vec();
        self.derived(&shape, data, Op::AddScalar(x), &[x])
    }

    /// Adds a 1-D `bias` along `axis` of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let bshape = self.shape(bias);
        if axis >= shape.len() || bshape.len() != 1 || bshape[0] != shape[axis] {
            return Err(Error::shape("add_bias", &shape, bshape));
        }
        let (outer, len, inner) = kernels::split_axis(&shape, axis);
        let b = self.data(bias);
        let mut data = self.data(x).to_vec();
        for o in 0..outer {
            for (c, &bv) in b.iter().enumerate().take(len) {
                let off = (o * len + c) * inner;
                data[off..off + inner].iter_mut().for_each(|v| *v += bv);
            }
        }
        Ok(self.derived(&shape, data, Op::AddBias { x, bias, axis }, &[x, bias]))
    }

    /// `max(x, slope·x)`; the derivative at exactly zero is `slope`.
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let data = self
            .data(x)
            .iter()
            .map(|&v| if v > 0.0 { v } else { slope * v })
            .collect();
        let shape = self.shape(x).to_vec();
        self.derived(&shape, data, Op::LeakyRelu(x, slope), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|v| v * v).collect();
        let shape = self.shape(x).to_vec();
        self.derived(&shape, data, Op::Square(x), &[x])
    }

    // ----- linear algebra ---------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (r, k, c) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.data(a), self.data(b), r, k, c);
        Ok(self.derived(&[r, c], data, Op::MatMul(a, b), &[a, b]))
    }

    /// Batched product `[B, r, k] · [B, k, c] -> [B, r, c]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("bmm", sa, sb));
        }
        let (bs, r, k, c) = (sa[0], sa[1], sa[2], sb[2]);
        let (da, db) = (self.data(a), self.data(b));
        let mut data = Vec::with_capacity(bs * r * c);
        for i in 0..bs {
            data.extend(kernels::matmul(
                &da[i * r * k..(i + 1) * r * k],
                &db[i * k * c..(i + 1) * k * c],
                r,
                k,
                c,
            ));
        }
        Ok(self.derived(&[bs, r, c], data, Op::BatchMatMul(a, b), &[a, b]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        if rank < 2 {
            return Err(Error::shape("transpose", self.shape(x), &[]));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(x, &perm)
    }

    // ----- normalization and losses -------------------------------------

    /// Softmax along `axis`, stabilized by subtracting the per-slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::usage(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let data = softmax_along(self.data(x), &shape, axis);
        Ok(self.derived(&shape, data, Op::Softmax { x, axis }, &[x]))
    }

    /// Mean over rows of `-log softmax(logits)[target]` for `[R, C]` logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::shape("softmax_cross_entropy", &shape, &[targets.len()]));
        }
        let c = shape[1];
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::usage(format!("target class {t} outside 0..{c}")));
        }
        let probs = softmax_along(self.data(logits), &shape, 1);
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            loss -= probs[r * c + t].max(f64::MIN_POSITIVE).ln();
        }
        loss /= targets.len().max(1) as f64;
        let op = Op::SoftmaxCrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.derived(&[], vec![loss], op, &[logits]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.derived(&[], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.data(x).len().max(1) as f64;
        let s: f64 = self.data(x).iter().sum();
        self.derived(&[], vec![s / n], Op::Mean(x), &[x])
    }

    /// Sums out `axis`.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::usage(format!("sum axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = kernels::split_axis(&shape, axis);
        let src = self.data(x);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let row = &src[(o * len + a) * inner..][..inner];
                for (d, &v) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok(self.derived(&out_shape, data, Op::SumAxis { x, axis }, &[x]))
    }

    // ----- layout ---------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.data(x).len() {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let data = self.data(x).to_vec();
        Ok(self.derived(shape, data, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::usage(format!("invalid permutation {perm:?} for {shape:?}")));
        }
        let data = kernels::permute(self.data(x), &shape, perm);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let op = Op::Permute {
            x,
            perm: perm.to_vec(),
        };
        Ok(self.derived(&out_shape, data, op, &[x]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::usage("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::usage(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let src = self.data(p);
                data.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let op = Op::Concat {
            parts: parts.to_vec(),
            axis,
        };
        Ok(self.derived(&shape, data, op, parts))
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::usage(format!(
                "slice {start}..{} on axis {axis} out of range for {shape:?}",
                start + len
            )));
        }
        let (outer, full, inner) = kernels::split_axis(&shape, axis);
        let src = self.data(x);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = (o * full + start) * inner;
            data.extend_from_slice(&src[off..off + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.derived(&out_shape, data, Op::Slice { x, axis, start }, &[x]))
    }

    // ----- convolution ----------------------------------------------------

    /// Direct 2-D convolution of `[B, C_in, H, W]` with `[C_out, C_in/groups, KH, KW]`.
    /// `groups == C_in == C_out` is the depthwise case.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize, groups: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x), self.shape(kernel));
        if sx.len() != 4 || sk.len() != 4 {
            return Err(Error::shape("conv2d", sx, sk));
        }
        if groups == 0 || stride == 0 || sx[1] % groups != 0 || sk[0] % groups != 0 || sk[1] * groups != sx[1] {
            return Err(Error::shape("conv2d channels", sx, sk));
        }
        if sk[2] > sx[2] + 2 * padding || sk[3] > sx[3] + 2 * padding {
            return Err(Error::shape("conv2d kernel extent", sx, sk));
        }
        let geom = Conv2dGeometry {
            batch: sx[0],
            in_channels: sx[1],
            height: sx[2],
            width: sx[3],
            out_channels: sk[0],
            kernel_h: sk[2],
            kernel_w: sk[3],
            stride,
            padding,
            groups,
        };
        let data = kernels::conv2d_forward(self.data(x), self.data(kernel), &geom);
        let shape = [geom.batch, geom.out_channels, geom.out_height(), geom.out_width()];
        Ok(self.derived(&shape, data, Op::Conv2d { x, kernel, geom }, &[x, kernel]))
    }

    /// Nearest-neighbour upsampling of `[B, C, H, W]` by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || factor == 0 {
            return Err(Error::shape("upsample_nearest", &s, &[factor]));
        }
        let (h, w) = (s[2], s[3]);
        let (oh, ow) = (h * factor, w * factor);
        let src = self.data(x);
        let mut data = Vec::with_capacity(s[0] * s[1] * oh * ow);
        for plane in 0..s[0] * s[1] {
            let p = &src[plane * h * w..(plane + 1) * h * w];
            for oy in 0..oh {
                let row = &p[(oy / factor) * w..(oy / factor + 1) * w];
                for ox in 0..ow {
                    data.push(row[ox / factor]);
                }
            }
        }
        Ok(self.derived(&[s[0], s[1], oh, ow], data, Op::Upsample { x, factor }, &[x]))
    }

    // ----- reverse sweep -------------------------------------------------

    /// Accumulates `d loss / d v` into every tracked ancestor of `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::usage("loss does not depend on any tracked tensor"));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut adj);
            match &mut self.grads[i] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v),
                None => self.grads[i] = Some(g),
            }
        }
        Ok(())
    }

    /// Adds the gradients of all tracked parameters into their store tensors.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) -> Result<()> {
        for &(id, var) in &self.params {
            if let Some(g) = self.grad(var) {
                store.get_mut(id).value.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.send(adj, *a, |buf| add_into(buf, g));
                self.send(adj, *b, |buf| add_into(buf, g));
            }
            Op::Sub(a, b) => {
                self.send(adj, *a, |buf| add_into(buf, g));
                self.send(adj, *b, |buf| buf.iter_mut().zip(g).for_each(|(o, v)| *o -= v));
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                self.send(adj, *a, |buf| {
                    for ((o, gv), bv) in buf.iter_mut().zip(g).zip(db) {
                        *o += gv * bv;
                    }
                });
                self.send(adj, *b, |buf| {
                    for ((o, gv), av) in buf.iter_mut().zip(g).zip(da) {
                        *o += gv * av;
                    }
                });
            }
            Op::Div(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                self.send(adj, *a, |buf| {
                    for ((o, gv), bv) in buf.iter_mut().zip(g).zip(db) {
                        *o += gv / bv;
                    }
                });
                self.send(adj, *b, |buf| {
                    for (((o, gv), av), bv) in buf.iter_mut().zip(g).zip(da).zip(db) {
                        *o -= gv * av / (bv * bv);
                    }
                });
            }
            Op::Scale(x, s) => self.send(adj, *x, |buf| {
                buf.iter_mut().zip(g).for_each(|(o, v)| *o += v * s)
            }),
            Op::AddScalar(x) => self.send(adj, *x, |buf| add_into(buf, g)),
            Op::AddBias { x, bias, axis } => {
                self.send(adj, *x, |buf| add_into(buf, g));
                let (outer, len, inner) = kernels::split_axis(node.value.shape(), *axis);
                self.send(adj, *bias, |buf| {
                    for o in 0..outer {
                        for (c, b) in buf.iter_mut().enumerate().take(len) {
                            let off = (o * len + c) * inner;
                            *b += g[off..off + inner].iter().sum::<f64>();
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (r, k, c) = (sa[0], sa[1], sb[1]);
                let (da, db) = (self.data(*a), self.data(*b));
                self.send(adj, *a, |buf| kernels::matmul_grad_lhs(g, db, r, k, c, buf));
                self.send(adj, *b, |buf| kernels::matmul_grad_rhs(g, da, r, k, c, buf));
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bs, r, k, c) = (sa[0], sa[1], sa[2], sb[2]);
                let (da, db) = (self.data(*a), self.data(*b));
                self.send(adj, *a, |buf| {
                    for i in 0..bs {
                        kernels::matmul_grad_lhs(
                            &g[i * r * c..(i + 1) * r * c],
                            &db[i * k * c..(i + 1) * k * c],
                            r,
                            k,
                            c,
                            &mut buf[i * r * k..(i + 1) * r * k],
                        );
                    }
                });
                self.send(adj, *b, |buf| {
                    for i in 0..bs {
                        kernels::matmul_grad_rhs(
                            &g[i * r * c..(i + 1) * r * c],
                            &da[i * r * k..(i + 1) * r * k],
                            r,
                            k,
                            c,
                            &mut buf[i * k * c..(i + 1) * k * c],
                        );
                    }
                });
            }
            Op::LeakyRelu(x, slope) => {
                let dx = self.data(*x);
                self.send(adj, *x, |buf| {
                    for ((o, gv), &xv) in buf.iter_mut().zip(g).zip(dx) {
                        *o += if xv > 0.0 { *gv } else { gv * slope };
                    }
                });
            }
            Op::Square(x) => {
                let dx = self.data(*x);
                self.send(adj, *x, |buf| {
                    for ((o, gv), &xv) in buf.iter_mut().zip(g).zip(dx) {
                        *o += 2.0 * xv * gv;
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = kernels::split_axis(node.value.shape(), *axis);
                self.send(adj, *x, |buf| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let idx = |a: usize| (o * len + a) * inner + j;
                            let dot: f64 = (0..len).map(|a| g[idx(a)] * y[idx(a)]).sum();
                            for a in 0..len {
                                buf[idx(a)] += y[idx(a)] * (g[idx(a)] - dot);
                            }
                        }
                    }
                });
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = self.shape(*logits)[1];
                let scale = g[0] / targets.len().max(1) as f64;
                self.send(adj, *logits, |buf| {
                    for (r, &t) in targets.iter().enumerate() {
                        for k in 0..c {
                            let onehot = if k == t { 1.0 } else { 0.0 };
                            buf[r * c + k] += scale * (probs[r * c + k] - onehot);
                        }
                    }
                });
            }
            Op::Sum(x) => self.send(adj, *x, |buf| buf.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(x) => {
                let n = self.data(*x).len().max(1) as f64;
                self.send(adj, *x, |buf| buf.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::SumAxis { x, axis } => {
                let (outer, len, inner) = kernels::split_axis(self.shape(*x), *axis);
                self.send(adj, *x, |buf| {
                    for o in 0..outer {
                        let gsrc = &g[o * inner..(o + 1) * inner];
                        for a in 0..len {
                            let dst = &mut buf[(o * len + a) * inner..][..inner];
                            add_into(dst, gsrc);
                        }
                    }
                });
            }
            Op::Reshape(x) => self.send(adj, *x, |buf| add_into(buf, g)),
            Op::Permute { x, perm } => {
                let back = kernels::permute(g, node.value.shape(), &kernels::inverse_permutation(perm));
                self.send(adj, *x, |buf| add_into(buf, &back));
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = kernels::split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    self.send(adj, p, |buf| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..][..len * inner];
                            add_into(&mut buf[o * len * inner..(o + 1) * len * inner], src);
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, full, inner) = kernels::split_axis(self.shape(*x), *axis);
                let len = node.value.shape()[*axis];
                self.send(adj, *x, |buf| {
                    for o in 0..outer {
                        let dst = &mut buf[(o * full + start) * inner..][..len * inner];
                        add_into(dst, &g[o * len * inner..(o + 1) * len * inner]);
                    }
                });
            }
            Op::Conv2d { x, kernel, geom } => {
                let (dx, dk) = (self.data(*x), self.data(*kernel));
                let want_x = self.tracked(*x);
                let want_k = self.tracked(*kernel);
                let mut gx = want_x.then(|| vec![0.0; dx.len()]);
                let mut gk = want_k.then(|| vec![0.0; dk.len()]);
                kernels::conv2d_backward(dx, dk, g, geom, gx.as_deref_mut(), gk.as_deref_mut());
                if let Some(gx) = gx {
                    self.send(adj, *x, |buf| add_into(buf, &gx));
                }
                if let Some(gk) = gk {
                    self.send(adj, *kernel, |buf| add_into(buf, &gk));
                }
            }
            Op::Upsample { x, factor } => {
                let s = self.shape(*x);
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (h * factor, w * factor);
                self.send(adj, *x, |buf| {
                    for plane in 0..s[0] * s[1] {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                buf[plane * h * w + (oy / factor) * w + ox / factor] +=
                                    g[plane * oh * ow + oy * ow + ox];
                            }
                        }
                    }
                });
            }
        }
    }

    /// Runs `f` on the adjoint buffer of `v` if `v` is tracked.
    fn send(&self, adj: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.tracked(v) {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let buf = adj[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(buf);
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub(crate) fn softmax_along(src: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = kernels::split_axis(shape, axis);
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for j in 0..inner {
            let idx = |a: usize| (o * len + a) * inner + j;
            let max = (0..len).map(|a| src[idx(a)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for a in 0..len {
                let e = (src[idx(a)] - max).exp();
                out[idx(a)] = e;
                total += e;
            }
            for a in 0..len {
                out[idx(a)] /= total;
            }
        }
    }
    out
}
