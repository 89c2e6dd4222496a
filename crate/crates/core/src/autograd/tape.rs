use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;

use super::mask::Mask2d;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// How [`Tape::l2_normalize`] groups elements.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormGroup {
    /// Each fiber along the axis is one group (e.g. the channel vector of
    /// one map cell for axis 0 of a `C×H×W` tensor).
    Along(usize),
    /// All elements sharing one coordinate on the axis form a group (e.g.
    /// one whole channel plane for axis 0).
    Within(usize),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    BroadcastAdd { x: usize, v: usize, axis: usize },
    BroadcastMul { x: usize, v: usize, axis: usize },
    Scale(usize, f64),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Clamp { x: usize, lo: f64, hi: f64 },
    L2Normalize { x: usize, groups: Vec<usize>, norms: Vec<f64>, eps: f64 },
    Conv2d { x: usize, kernel: usize, bias: usize, mask: Option<Arc<Mask2d>> },
    Dropout { x: usize, scale: Vec<f64> },
    Mask { x: usize, mask: Arc<Mask2d> },
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    Concat(Vec<usize>),
    Slice { x: usize, offset: usize },
    GatherRows { table: usize, ids: Vec<usize> },
    MaskedBce { p: usize, target: Vec<f64>, mask: Arc<Mask2d> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "hadamard",
            Op::BroadcastAdd { .. } => "broadcast_add",
            Op::BroadcastMul { .. } => "broadcast_mul",
            Op::Scale(..) => "scale",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Clamp { .. } => "clamp",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Conv2d { .. } => "conv2d",
            Op::Dropout { .. } => "dropout",
            Op::Mask { .. } => "mask",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Reshape(_) => "reshape",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::GatherRows { .. } => "gather_rows",
            Op::MaskedBce { .. } => "masked_bce",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Linear record of executed operations, replayed in reverse by
/// [`Tape::backward`].
///
/// A tape is single-threaded; independent tapes may live on different
/// threads. Gradients are retained only for leaves.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
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

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.index(v).expect("var from another tape")].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[self.index(v).expect("var from another tape")].requires_grad
    }

    /// Gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.index(v).ok().and_then(|i| self.nodes[i].grad.as_ref())
    }

    /// Clears stored gradients so that `backward` may run again.
    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.backward_done = false;
    }

    fn index(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Tape(format!(
                "variable {:?} is not recorded on tape {}",
                v, self.id
            )));
        }
        Ok(v.index)
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self.id,
            index,
        }
    }

    fn rg(&self, inputs: &[usize]) -> bool {
        inputs.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: impl FnOnce(usize) -> Op) -> Result<Var> {
        let i = self.index(x)?;
        let out = self.val(i).map(f);
        let rg = self.rg(&[i]);
        Ok(self.push(out, op(i), rg))
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        let (sa, sb) = (self.val(a).shape(), self.val(b).shape());
        if sa != sb {
            return Err(Error::dim(op, sa, sb));
        }
        Ok(())
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        self.same_shape(name, ia, ib)?;
        let (va, vb) = (self.val(ia), self.val(ib));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(out, op(ia, ib), rg))
    }

    /// `a [m×k] · b [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let (sa, sb) = (self.val(ia).shape(), self.val(ib).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (ad, bd) = (self.val(ia).data(), self.val(ib).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                for (o, &bv) in row.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                    *o += av * bv;
                }
            }
        }
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(ia, ib), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Elementwise (Schur) product.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("hadamard", a, b, |x, y| x * y, Op::Mul)
    }

    fn broadcast_layout(&self, name: &'static str, x: usize, v: usize, axis: usize) -> Result<(usize, usize)> {
        let (sx, sv) = (self.val(x).shape(), self.val(v).shape());
        if axis >= sx.len() || sv.len() != 1 || sv[0] != sx[axis] {
            return Err(Error::dim(name, sx, sv));
        }
        let inner: usize = sx[axis + 1..].iter().product();
        Ok((sx[axis], inner))
    }

    fn broadcast(
        &mut self,
        name: &'static str,
        x: Var,
        v: Var,
        axis: usize,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ix, iv) = (self.index(x)?, self.index(v)?);
        let (extent, inner) = self.broadcast_layout(name, ix, iv, axis)?;
        let (xv, vv) = (self.val(ix), self.val(iv).data());
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &a)| f(a, vv[(i / inner) % extent]))
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[ix, iv]);
        Ok(self.push(out, op(ix, iv), rg))
    }

    /// Adds vector `v` along `axis` of `x` (`v.len() == x.shape()[axis]`).
    pub fn broadcast_add(&mut self, x: Var, v: Var, axis: usize) -> Result<Var> {
        self.broadcast("broadcast_add", x, v, axis, |a, b| a + b, |x, v| Op::BroadcastAdd { x, v, axis })
    }

    /// Multiplies `x` by vector `v` along `axis`.
    pub fn broadcast_mul(&mut self, x: Var, v: Var, axis: usize) -> Result<Var> {
        self.broadcast("broadcast_mul", x, v, axis, |a, b| a * b, |x, v| Op::BroadcastMul { x, v, axis })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, |v| c * v, |i| Op::Scale(i, c))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, sigmoid, Op::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::tanh, Op::Tanh)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::Config(format!("clamp bounds {lo} > {hi}")));
        }
        self.unary(x, |v| v.clamp(lo, hi), |x| Op::Clamp { x, lo, hi })
    }

    /// Divides each group by `max(‖group‖₂, eps)`.
    pub fn l2_normalize(&mut self, x: Var, group: NormGroup, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::Config(format!("l2_normalize epsilon must be positive, got {eps}")));
        }
        let ix = self.index(x)?;
        let xv = self.val(ix);
        let shape = xv.shape();
        let axis = match group {
            NormGroup::Along(a) | NormGroup::Within(a) => a,
        };
        if axis >= shape.len() {
            return Err(Error::Shape(format!("axis {axis} out of range for shape {shape:?}")));
        }
        let extent = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let (n_groups, groups): (usize, Vec<usize>) = match group {
            NormGroup::Along(_) => (
                xv.numel() / extent.max(1),
                (0..xv.numel())
                    .map(|i| (i / (extent * inner)) * inner + i % inner)
                    .collect(),
            ),
            NormGroup::Within(_) => (extent, (0..xv.numel()).map(|i| (i / inner) % extent).collect()),
        };
        let mut norms = vec![0.0; n_groups];
        for (&g, &v) in groups.iter().zip(xv.data()) {
            norms[g] += v * v;
        }
        for n in &mut norms {
            *n = n.sqrt();
        }
        let data = xv
            .data()
            .iter()
            .zip(&groups)
            .map(|(&v, &g)| v / norms[g].max(eps))
            .collect();
        let out = Tensor::new(shape.to_vec(), data)?;
        let rg = self.rg(&[ix]);
        Ok(self.push(
            out,
            Op::L2Normalize {
                x: ix,
                groups,
                norms,
                eps,
            },
            rg,
        ))
    }

    /// Same-padded 2D cross-correlation of `x [C_in×H×W]` with
    /// `kernel [C_out×C_in×k×k]` plus `bias [C_out]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        self.conv2d_impl(x, kernel, bias, None)
    }

    /// [`Tape::conv2d`] followed by zeroing the cells outside `mask`;
    /// invalid outputs are never computed.
    pub fn conv2d_masked(&mut self, x: Var, kernel: Var, bias: Var, mask: &Arc<Mask2d>) -> Result<Var> {
        self.conv2d_impl(x, kernel, bias, Some(mask.clone()))
    }

    fn conv2d_impl(&mut self, x: Var, kernel: Var, bias: Var, mask: Option<Arc<Mask2d>>) -> Result<Var> {
        let (ix, ik, ib) = (self.index(x)?, self.index(kernel)?, self.index(bias)?);
        let (sx, sk, sb) = (self.val(ix).shape(), self.val(ik).shape(), self.val(ib).shape());
        if sx.len() != 3 || sk.len() != 4 || sk[1] != sx[0] {
            return Err(Error::dim("conv2d", sx, sk));
        }
        if sk[2] != sk[3] || sk[2] % 2 == 0 {
            return Err(Error::Shape(format!("conv2d kernel must be square and odd, got {sk:?}")));
        }
        if sb != [sk[0]] {
            return Err(Error::dim("conv2d bias", sk, sb));
        }
        let geom = ConvGeom {
            cin: sx[0],
            cout: sk[0],
            h: sx[1],
            w: sx[2],
            k: sk[2],
        };
        if let Some(m) = &mask {
            if m.rows() != geom.h || m.cols() != geom.w {
                return Err(Error::dim("conv2d mask", sx, &[m.rows(), m.cols()]));
            }
        }
        let out = conv_forward(
            &geom,
            self.val(ix).data(),
            self.val(ik).data(),
            self.val(ib).data(),
            mask.as_deref(),
        );
        let rg = self.rg(&[ix, ik, ib]);
        let out = Tensor::new(vec![geom.cout, geom.h, geom.w], out)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                x: ix,
                kernel: ik,
                bias: ib,
                mask,
            },
            rg,
        ))
    }

    /// Inverted dropout: in training each element is zeroed with
    /// probability `drop_probability` and survivors are scaled by
    /// `1/(1-drop_probability)`; otherwise identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, drop_probability: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&drop_probability) {
            return Err(Error::Config(format!(
                "dropout probability must lie in [0, 1), got {drop_probability}"
            )));
        }
        let ix = self.index(x)?;
        if !training || drop_probability == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - drop_probability);
        let n = self.val(ix).numel();
        let scale: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < drop_probability { 0.0 } else { keep })
            .collect();
        let xv = self.val(ix);
        let data = xv
            .data()
            .iter()
            .zip(&scale)
            .map(|(&v, &s)| if s == 0.0 { 0.0 } else { v * s })
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[ix]);
        Ok(self.push(out, Op::Dropout { x: ix, scale }, rg))
    }

    /// Writes `+0.0` into every invalid cell of the trailing two axes.
    pub fn mask(&mut self, x: Var, mask: &Arc<Mask2d>) -> Result<Var> {
        let ix = self.index(x)?;
        let xv = self.val(ix);
        let s = xv.shape();
        if s.len() < 2 || s[s.len() - 2] != mask.rows() || s[s.len() - 1] != mask.cols() {
            return Err(Error::dim("mask", s, &[mask.rows(), mask.cols()]));
        }
        let mut out = xv.clone();
        mask.apply(out.data_mut());
        let rg = self.rg(&[ix]);
        Ok(self.push(
            out,
            Op::Mask {
                x: ix,
                mask: mask.clone(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.index(x)?;
        let out = Tensor::scalar(self.val(ix).sum());
        let rg = self.rg(&[ix]);
        Ok(self.push(out, Op::Sum(ix), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let ix = self.index(x)?;
        let v = self.val(ix);
        if v.numel() == 0 {
            return Err(Error::Shape("mean of empty tensor".into()));
        }
        let out = Tensor::scalar(v.sum() / v.numel() as f64);
        let rg = self.rg(&[ix]);
        Ok(self.push(out, Op::Mean(ix), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let ix = self.index(x)?;
        let out = self.val(ix).clone().reshape(shape)?;
        let rg = self.rg(&[ix]);
        Ok(self.push(out, Op::Reshape(ix), rg))
    }

    /// Concatenates along axis 0.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts.iter().map(|&p| self.index(p)).collect::<Result<Vec<_>>>()?;
        let first = *idx.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let tail = self.val(first).shape().get(1..).unwrap_or(&[]).to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &i in &idx {
            let s = self.val(i).shape();
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::dim("concat", self.val(first).shape(), s));
            }
            lead += s[0];
            data.extend_from_slice(self.val(i).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let rg = self.rg(&idx);
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(idx), rg))
    }

    /// Contiguous window of the flat data of `x`, reshaped to `shape`.
    pub fn slice(&mut self, x: Var, offset: usize, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let ix = self.index(x)?;
        let shape = shape.into();
        let n: usize = shape.iter().product();
        let xv = self.val(ix);
        if offset + n > xv.numel() {
            return Err(Error::Shape(format!(
                "slice [{offset}, {}) out of range for {} values",
                offset + n,
                xv.numel()
            )));
        }
        let out = Tensor::new(shape, xv.data()[offset..offset + n].to_vec())?;
        let rg = self.rg(&[ix]);
        Ok(self.push(out, Op::Slice { x: ix, offset }, rg))
    }

    /// Selects rows of a `[V×d]` table, giving `[ids.len()×d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let it = self.index(table)?;
        let tv = self.val(it);
        let s = tv.shape();
        if s.len() != 2 {
            return Err(Error::Shape(format!("gather_rows needs a matrix, got {s:?}")));
        }
        let (rows, d) = (s[0], s[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::Shape(format!("row {id} out of range for table of {rows} rows")));
            }
            data.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        let rg = self.rg(&[it]);
        Ok(self.push(
            out,
            Op::GatherRows {
                table: it,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Mean binary cross entropy over the valid cells of `mask`.
    ///
    /// `p` must hold one score per mask cell, strictly inside (0, 1) on
    /// valid cells. Invalid cells of `p` and `target` are never read.
    pub fn masked_bce(&mut self, p: Var, target: &[f64], mask: &Arc<Mask2d>) -> Result<Var> {
        let ip = self.index(p)?;
        let pv = self.val(ip);
        if pv.numel() != mask.len() || target.len() != mask.len() {
            return Err(Error::dim("masked_bce", pv.shape(), &[target.len(), mask.len()]));
        }
        let count = mask.count();
        if count == 0 {
            return Err(Error::NoProposal);
        }
        let mut acc = 0.0;
        for ((&pi, &yi), &ok) in pv.data().iter().zip(target).zip(mask.as_slice()) {
            if ok {
                acc += yi * pi.ln() + (1.0 - yi) * (1.0 - pi).ln();
            }
        }
        let out = Tensor::scalar(-acc / count as f64);
        let rg = self.rg(&[ip]);
        Ok(self.push(
            out,
            Op::MaskedBce {
                p: ip,
                target: target.to_vec(),
                mask: mask.clone(),
            },
            rg,
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Every leaf that requires grad ends up with a gradient buffer (zeros
    /// when unreachable). Calling twice without [`Tape::reset_grads`] is an
    /// error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = self.index(loss)?;
        if self.val(root).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.val(root).shape()
            )));
        }
        if self.backward_done {
            return Err(Error::Tape("backward already ran; reset gradients first".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=root).map(|_| None).collect();
        grads[root] = Some(vec![1.0]);
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let shape = self.nodes[i].value.shape().to_vec();
                self.nodes[i].grad = Some(Tensor::new(shape, g)?);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        for node in &mut self.nodes {
            if matches!(node.op, Op::Leaf) && node.requires_grad && node.grad.is_none() {
                node.grad = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        self.backward_done = true;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let mut acc = Acc { tape: self, grads };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.val(*a).shape(), self.val(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (ad, bd) = (self.val(*a).data(), self.val(*b).data());
                acc.with(*a, |da| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            da[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc.with(*b, |db| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ad[i * k + p];
                            for (d, &gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += av * gv;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc.with(*a, |d| add_into(d, g));
                acc.with(*b, |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc.with(*a, |d| add_into(d, g));
                acc.with(*b, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.val(*a).data(), self.val(*b).data());
                acc.with(*a, |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(bd) {
                        *d += g * y;
                    }
                });
                acc.with(*b, |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(ad) {
                        *d += g * x;
                    }
                });
            }
            Op::BroadcastAdd { x, v, axis } => {
                let (extent, inner) = self.broadcast_layout("broadcast_add", *x, *v, *axis).expect("checked");
                acc.with(*x, |d| add_into(d, g));
                acc.with(*v, |d| {
                    for (j, gv) in g.iter().enumerate() {
                        d[(j / inner) % extent] += gv;
                    }
                });
            }
            Op::BroadcastMul { x, v, axis } => {
                let (extent, inner) = self.broadcast_layout("broadcast_mul", *x, *v, *axis).expect("checked");
                let (xd, vd) = (self.val(*x).data(), self.val(*v).data());
                acc.with(*x, |d| {
                    for (j, (d, gv)) in d.iter_mut().zip(g).enumerate() {
                        *d += gv * vd[(j / inner) % extent];
                    }
                });
                acc.with(*v, |d| {
                    for (j, (gv, xv)) in g.iter().zip(xd).enumerate() {
                        d[(j / inner) % extent] += gv * xv;
                    }
                });
            }
            Op::Scale(x, c) => acc.with(*x, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += c * g)),
            Op::Sigmoid(x) => acc.with(*x, |d| {
                for ((d, g), s) in d.iter_mut().zip(g).zip(out) {
                    *d += g * s * (1.0 - s);
                }
            }),
            Op::Tanh(x) => acc.with(*x, |d| {
                for ((d, g), t) in d.iter_mut().zip(g).zip(out) {
                    *d += g * (1.0 - t * t);
                }
            }),
            Op::Relu(x) => {
                let xd = self.val(*x).data();
                acc.with(*x, |d| {
                    for ((d, g), v) in d.iter_mut().zip(g).zip(xd) {
                        if *v > 0.0 {
                            *d += g;
                        }
                    }
                });
            }
            Op::Clamp { x, lo, hi } => {
                let xd = self.val(*x).data();
                acc.with(*x, |d| {
                    for ((d, g), v) in d.iter_mut().zip(g).zip(xd) {
                        if *v >= *lo && *v <= *hi {
                            *d += g;
                        }
                    }
                });
            }
            Op::L2Normalize { x, groups, norms, eps } => {
                let mut dots = vec![0.0; norms.len()];
                for ((&grp, gv), y) in groups.iter().zip(g).zip(out) {
                    dots[grp] += gv * y;
                }
                acc.with(*x, |d| {
                    for (((d, &grp), gv), y) in d.iter_mut().zip(groups).zip(g).zip(out) {
                        let n = norms[grp];
                        if n > *eps {
                            *d += (gv - y * dots[grp]) / n;
                        } else {
                            *d += gv / eps;
                        }
                    }
                });
            }
            Op::Conv2d { x, kernel, bias, mask } => {
                let (sx, sk) = (self.val(*x).shape(), self.val(*kernel).shape());
                let geom = ConvGeom {
                    cin: sx[0],
                    cout: sk[0],
                    h: sx[1],
                    w: sx[2],
                    k: sk[2],
                };
                let mut gm = g.to_vec();
                if let Some(m) = mask {
                    m.apply(&mut gm);
                }
                let (xd, kd) = (self.val(*x).data(), self.val(*kernel).data());
                acc.with(*bias, |db| {
                    for (co, plane) in gm.chunks(geom.h * geom.w).enumerate() {
                        db[co] += plane.iter().sum::<f64>();
                    }
                });
                acc.with(*kernel, |dk| conv_grad_kernel(&geom, xd, &gm, dk, mask.as_deref()));
                acc.with(*x, |dx| conv_grad_input(&geom, kd, &gm, dx, mask.as_deref()));
            }
            Op::Dropout { x, scale } => acc.with(*x, |d| {
                for ((d, g), s) in d.iter_mut().zip(g).zip(scale) {
                    *d += g * s;
                }
            }),
            Op::Mask { x, mask } => {
                let mut gm = g.to_vec();
                mask.apply(&mut gm);
                acc.with(*x, |d| add_into(d, &gm));
            }
            Op::Sum(x) => acc.with(*x, |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let n = self.val(*x).numel() as f64;
                acc.with(*x, |d| d.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::Reshape(x) => acc.with(*x, |d| add_into(d, g)),
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.val(p).numel();
                    acc.with(p, |d| add_into(d, &g[offset..offset + n]));
                    offset += n;
                }
            }
            Op::Slice { x, offset } => {
                acc.with(*x, |d| add_into(&mut d[*offset..*offset + g.len()], g));
            }
            Op::GatherRows { table, ids } => {
                let d_row = self.val(*table).shape()[1];
                acc.with(*table, |d| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut d[id * d_row..(id + 1) * d_row], &g[r * d_row..(r + 1) * d_row]);
                    }
                });
            }
            Op::MaskedBce { p, target, mask } => {
                let pd = self.val(*p).data();
                let scale = g[0] / mask.count() as f64;
                acc.with(*p, |d| {
                    for (((d, &pi), &yi), &ok) in d.iter_mut().zip(pd).zip(target).zip(mask.as_slice()) {
                        if ok {
                            *d -= scale * (yi / pi - (1.0 - yi) / (1.0 - pi));
                        }
                    }
                });
            }
        }
    }

    /// Names of the operations recorded so far, in order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }
}

struct Acc<'a> {
    tape: &'a Tape,
    grads: &'a mut [Option<Vec<f64>>],
}

impl Acc<'_> {
    fn with(&mut self, i: usize, f: impl FnOnce(&mut [f64])) {
        if !self.tape.nodes[i].requires_grad {
            return;
        }
        let n = self.tape.nodes[i].value.numel();
        let buf = self.grads[i].get_or_insert_with(|| vec![0.0; n]);
        f(buf);
    }
}

fn add_into(d: &mut [f64], g: &[f64]) {
    for (d, g) in d.iter_mut().zip(g) {
        *d += g;
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

struct ConvGeom {
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
}

impl ConvGeom {
    fn pad(&self) -> isize {
        (self.k / 2) as isize
    }

    /// Flat positions of the output cells that get computed.
    fn cells(&self, mask: Option<&Mask2d>) -> Vec<usize> {
        let all = 0..self.h * self.w;
        match mask {
            Some(m) => all.filter(|&i| m.as_slice()[i]).collect(),
            None => all.collect(),
        }
    }

    /// Patch matrix `[C_in·k·k × cells]`, zero where a tap falls outside
    /// the input. Row order matches the kernel layout.
    fn patches(&self, x: &[f64], cells: &[usize]) -> Vec<f64> {
        let (h, w, k, p) = (self.h as isize, self.w as isize, self.k, self.pad());
        let n = cells.len();
        let mut out = vec![0.0; self.cin * k * k * n];
        for ci in 0..self.cin {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut out[((ci * k + ky) * k + kx) * n..][..n];
                    let (dy, dx) = (ky as isize - p, kx as isize - p);
                    for (o, &cell) in row.iter_mut().zip(cells) {
                        let (sy, sx) = ((cell / self.w) as isize + dy, (cell % self.w) as isize + dx);
                        if sy >= 0 && sy < h && sx >= 0 && sx < w {
                            *o = plane[(sy * w + sx) as usize];
                        }
                    }
                }
            }
        }
        out
    }
}

fn conv_forward(geom: &ConvGeom, x: &[f64], kernel: &[f64], bias: &[f64], mask: Option<&Mask2d>) -> Vec<f64> {
    let cells = geom.cells(mask);
    let n = cells.len();
    let taps = geom.cin * geom.k * geom.k;
    let patches = geom.patches(x, &cells);
    let plane = geom.h * geom.w;
    let mut out = vec![0.0; geom.cout * plane];
    let mut acc = vec![0.0; n];
    for co in 0..geom.cout {
        acc.iter_mut().for_each(|v| *v = bias[co]);
        for (r, &wv) in kernel[co * taps..(co + 1) * taps].iter().enumerate() {
            for (a, pv) in acc.iter_mut().zip(&patches[r * n..(r + 1) * n]) {
                *a += wv * pv;
            }
        }
        let op = &mut out[co * plane..(co + 1) * plane];
        for (&cell, &v) in cells.iter().zip(&acc) {
            op[cell] = v;
        }
    }
    out
}

/// Output gradient gathered at the computed cells, `[C_out × cells]`.
fn gather_cells(geom: &ConvGeom, g: &[f64], cells: &[usize]) -> Vec<f64> {
    let plane = geom.h * geom.w;
    (0..geom.cout)
        .flat_map(|co| cells.iter().map(move |&c| g[co * plane + c]))
        .collect()
}

fn conv_grad_kernel(geom: &ConvGeom, x: &[f64], g: &[f64], dk: &mut [f64], mask: Option<&Mask2d>) {
    let cells = geom.cells(mask);
    let n = cells.len();
    let taps = geom.cin * geom.k * geom.k;
    let patches = geom.patches(x, &cells);
    let gc = gather_cells(geom, g, &cells);
    for co in 0..geom.cout {
        let gr = &gc[co * n..(co + 1) * n];
        for (r, d) in dk[co * taps..(co + 1) * taps].iter_mut().enumerate() {
            *d += gr.iter().zip(&patches[r * n..(r + 1) * n]).map(|(a, b)| a * b).sum::<f64>();
        }
    }
}

fn conv_grad_input(geom: &ConvGeom, kernel: &[f64], g: &[f64], dx_buf: &mut [f64], mask: Option<&Mask2d>) {
    let cells = geom.cells(mask);
    let n = cells.len();
    let (k, p) = (geom.k, geom.pad());
    let taps = geom.cin * k * k;
    let gc = gather_cells(geom, g, &cells);
    let mut dp = vec![0.0; taps * n];
    for co in 0..geom.cout {
        let gr = &gc[co * n..(co + 1) * n];
        for (r, &wv) in kernel[co * taps..(co + 1) * taps].iter().enumerate() {
            for (d, gv) in dp[r * n..(r + 1) * n].iter_mut().zip(gr) {
                *d += wv * gv;
            }
        }
    }
    let (h, w) = (geom.h as isize, geom.w as isize);
    for ci in 0..geom.cin {
        let plane = &mut dx_buf[ci * geom.h * geom.w..(ci + 1) * geom.h * geom.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &dp[((ci * k + ky) * k + kx) * n..][..n];
                let (dy, dx) = (ky as isize - p, kx as isize - p);
                for (&d, &cell) in row.iter().zip(&cells) {
                    let (sy, sx) = ((cell / geom.w) as isize + dy, (cell % geom.w) as isize + dx);
                    if sy >= 0 && sy < h && sx >= 0 && sx < w {
                        plane[(sy * w + sx) as usize] += d;
                    }
                }
            }
        }
    }
}
