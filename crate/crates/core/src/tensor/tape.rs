use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    /// rhs is `r x 1` against an `r x c` lhs.
    Col,
    /// rhs is `1 x c` against an `r x c` lhs.
    Row,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Affine(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Concat {
        a: Var,
        b: Var,
        outer: usize,
        a_block: usize,
        b_block: usize,
    },
    Narrow {
        x: Var,
        outer: usize,
        src_block: usize,
        offset: usize,
        block: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const LOG_CLAMP: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Define-by-run computation record. Nodes are appended in evaluation order,
/// so every node's inputs precede it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
}

fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Axis {
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn matmul_into(a: &[f64], b: &[f64], m: usize, p: usize, n: usize, out: &mut [f64]) {
    if n == 1 {
        // same accumulation order as the general loop, without a length-1 inner loop
        for (o, arow) in out.iter_mut().zip(a.chunks_exact(p)) {
            let mut s = *o;
            for (&x, &y) in arow.iter().zip(b) {
                s += x * y;
            }
            *o = s;
        }
        return;
    }
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for k in 0..p {
            let aik = a[i * p + k];
            let brow = &b[k * n..(k + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

fn slot<'a>(nodes: &[Node], pending: &'a mut [Vec<f64>], v: Var) -> Option<&'a mut [f64]> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let g = &mut pending[v.0];
    if g.is_empty() {
        *g = vec![0.0; nodes[v.0].data.len()];
    }
    Some(g.as_mut_slice())
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

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
        });
        self.grads.push(Vec::new());
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a leaf; gradients flow into it iff `requires_grad` is set.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    /// Records a trainable leaf regardless of the tensor's flag.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.data.clone()).expect("node shape invariant")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].data[0]
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(op, s, &[0, 0])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, p) = self.dims2(a, "matmul")?;
        let (p2, n) = self.dims2(b, "matmul")?;
        if p != p2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a), self.value(b), m, p, n, &mut out);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "transpose")?;
        let src = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let ng = self.ng(a);
        Ok(self.push(vec![c, r], out, Op::Transpose(a), ng))
    }

    /// Orders the operands so the broadcast one (if any) comes second.
    fn broadcast_pair(&self, a: Var, b: Var, op: &'static str) -> Result<(Var, Var, Bcast)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok((a, b, Bcast::Same));
        }
        let classify = |big: &[usize], small: &[usize]| match (big, small) {
            ([r, _], [r2, 1]) if r == r2 => Some(Bcast::Col),
            ([_, c], [1, c2]) if c == c2 => Some(Bcast::Row),
            _ => None,
        };
        if let Some(bc) = classify(sa, sb) {
            return Ok((a, b, bc));
        }
        if let Some(bc) = classify(sb, sa) {
            return Ok((b, a, bc));
        }
        Err(Error::shape(op, sa, sb))
    }

    fn binary(&mut self, a: Var, b: Var, mul: bool) -> Result<Var> {
        let name = if mul { "mul" } else { "add" };
        let (a, b, bc) = self.broadcast_pair(a, b, name)?;
        let shape = self.shape(a).to_vec();
        let av = self.value(a);
        let bv = self.value(b);
        let cols = *shape.last().unwrap_or(&1);
        let f = |x: f64, y: f64| if mul { x * y } else { x + y };
        let out: Vec<f64> = match bc {
            Bcast::Same => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Col => av
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bv[i / cols]))
                .collect(),
            Bcast::Row => av
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bv[i % cols]))
                .collect(),
        };
        let ng = self.ng(a) || self.ng(b);
        let op = if mul { Op::Mul(a, b, bc) } else { Op::Add(a, b, bc) };
        Ok(self.push(shape, out, op, ng))
    }

    /// Elementwise sum; the second operand may broadcast as `r x 1` or `1 x c`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, false)
    }

    /// Elementwise product with the same broadcast rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, true)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(x).iter().map(|&v| scale * v + shift).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x);
        self.push(shape, out, Op::Affine(x, scale), ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    fn unary(&mut self, x: Var, f: fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x);
        self.push(shape, out, op, ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    /// Softmax along `axis`, max-subtracted per slice.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = split_axis(self.shape(x), axis)?;
        let src = self.value(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| src[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (src[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[idx(j)] /= total;
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x);
        Ok(self.push(shape, out, Op::Softmax { x, outer, len, inner }, ng))
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let rank_ok = sa.len() == sb.len() && axis < sa.len();
        let rest_ok = rank_ok
            && sa
                .iter()
                .zip(&sb)
                .enumerate()
                .all(|(i, (x, y))| i == axis || x == y);
        if !rest_ok {
            if axis >= sa.len() {
                return Err(Error::Axis {
                    axis,
                    rank: sa.len(),
                });
            }
            return Err(Error::shape("concat", &sa, &sb));
        }
        let (outer, na, inner) = split_axis(&sa, axis)?;
        let nb = sb[axis];
        let (a_block, b_block) = (na * inner, nb * inner);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for o in 0..outer {
            out.extend_from_slice(&av[o * a_block..(o + 1) * a_block]);
            out.extend_from_slice(&bv[o * b_block..(o + 1) * b_block]);
        }
        let mut shape = sa;
        shape[axis] = na + nb;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                a,
                b,
                outer,
                a_block,
                b_block,
            },
            ng,
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis)?;
        if start + len > n {
            return Err(Error::Value(format!(
                "narrow [{start}, {}) exceeds extent {n} on axis {axis}",
                start + len
            )));
        }
        let (src_block, offset, block) = (n * inner, start * inner, len * inner);
        let src = self.value(x);
        let mut out = Vec::with_capacity(outer * block);
        for o in 0..outer {
            let base = o * src_block + offset;
            out.extend_from_slice(&src[base..base + block]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let ng = self.ng(x);
        Ok(self.push(
            new_shape,
            out,
            Op::Narrow {
                x,
                outer,
                src_block,
                offset,
                block,
            },
            ng,
        ))
    }

    /// Row-wise layer normalization with affine gain and bias of width `c`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "layer_norm")?;
        for p in [gain, bias] {
            if self.value(p).len() != c {
                return Err(Error::shape("layer_norm", self.shape(x), self.shape(p)));
            }
        }
        let src = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            vec![r, c],
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table, "gather")?;
        let src = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Value(format!("id {id} out of range for table of {v} rows")));
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let ng = self.ng(table);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Mean categorical cross-entropy of row-wise softmax(logits).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.dims2(logits, "cross_entropy")?;
        if labels.len() != b {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Value(format!("label {bad} out of range for {c} classes")));
        }
        let src = self.value(logits);
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for i in 0..b {
            let row = &src[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for j in 0..c {
                probs[i * c + j] = (row[j] - max).exp() / total;
            }
            loss -= probs[i * c + labels[i]].max(LOG_CLAMP).ln();
        }
        loss /= b as f64;
        let ng = self.ng(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let ng = self.ng(x);
        self.push(vec![1], vec![s], Op::Sum(x), ng)
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        let g = &self.grads[v.0];
        (!g.is_empty()).then_some(g.as_slice())
    }

    /// Gradient of `v`, zeros if nothing reached it.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<f64> {
        self.grad(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; self.nodes[v.0].data.len()])
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.clear();
        }
    }

    /// Adds the gradient held for each var into the matching tensor's `grad`.
    pub fn write_grads(&self, vars: &[Var], tensors: &mut [Tensor]) {
        for (v, t) in vars.iter().zip(tensors.iter_mut()) {
            if !t.requires_grad {
                continue;
            }
            let n = t.len();
            let g = t.grad.get_or_insert_with(|| vec![0.0; n]);
            if let Some(src) = self.grad(*v) {
                for (a, b) in g.iter_mut().zip(src) {
                    *a += b;
                }
            }
        }
    }

    /// Reverse sweep from a scalar `loss`; gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Value(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        let mut seeded = vec![Vec::new(); self.nodes.len()];
        seeded[loss.0] = vec![1.0];
        for i in (0..=loss.0).rev() {
            let dy = std::mem::take(&mut seeded[i]);
            if dy.is_empty() || !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, &dy, &mut seeded);
            let stored = &mut self.grads[i];
            if stored.is_empty() {
                *stored = dy;
            } else {
                for (a, b) in stored.iter_mut().zip(&dy) {
                    *a += b;
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, dy: &[f64], pending: &mut [Vec<f64>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, p) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                let (av, bv) = (&nodes[a.0].data, &nodes[b.0].data);
                if let Some(da) = slot(nodes, pending, *a) {
                    for r in 0..m {
                        let dyr = &dy[r * n..(r + 1) * n];
                        for k in 0..p {
                            let brow = &bv[k * n..(k + 1) * n];
                            let s: f64 = dyr.iter().zip(brow).map(|(x, y)| x * y).sum();
                            da[r * p + k] += s;
                        }
                    }
                }
                if let Some(db) = slot(nodes, pending, *b) {
                    for r in 0..m {
                        let dyr = &dy[r * n..(r + 1) * n];
                        for k in 0..p {
                            let aik = av[r * p + k];
                            if aik == 0.0 {
                                continue;
                            }
                            let drow = &mut db[k * n..(k + 1) * n];
                            for (d, &g) in drow.iter_mut().zip(dyr) {
                                *d += aik * g;
                            }
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                if let Some(da) = slot(nodes, pending, *a) {
                    for x in 0..r {
                        for y in 0..c {
                            da[x * c + y] += dy[y * r + x];
                        }
                    }
                }
            }
            Op::Add(a, b, bc) | Op::Mul(a, b, bc) => {
                let is_mul = matches!(node.op, Op::Mul(..));
                let cols = *node.shape.last().unwrap_or(&1);
                let (av, bv) = (&nodes[a.0].data, &nodes[b.0].data);
                let bidx = |k: usize| match bc {
                    Bcast::Same => k,
                    Bcast::Col => k / cols,
                    Bcast::Row => k % cols,
                };
                if let Some(da) = slot(nodes, pending, *a) {
                    for k in 0..dy.len() {
                        da[k] += if is_mul { dy[k] * bv[bidx(k)] } else { dy[k] };
                    }
                }
                if let Some(db) = slot(nodes, pending, *b) {
                    for k in 0..dy.len() {
                        db[bidx(k)] += if is_mul { dy[k] * av[k] } else { dy[k] };
                    }
                }
            }
            Op::Affine(x, s) => {
                if let Some(dx) = slot(nodes, pending, *x) {
                    for (d, g) in dx.iter_mut().zip(dy) {
                        *d += s * g;
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(dx) = slot(nodes, pending, *x) {
                    for ((d, g), y) in dx.iter_mut().zip(dy).zip(&node.data) {
                        *d += g * (1.0 - y * y);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(dx) = slot(nodes, pending, *x) {
                    for ((d, g), y) in dx.iter_mut().zip(dy).zip(&node.data) {
                        *d += g * y * (1.0 - y);
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = &nodes[x.0].data;
                if let Some(dx) = slot(nodes, pending, *x) {
                    for ((d, g), &v) in dx.iter_mut().zip(dy).zip(xv) {
                        *d += g * gelu_grad(v);
                    }
                }
            }
            Op::Softmax { x, outer, len, inner } => {
                let y = &node.data;
                if let Some(dx) = slot(nodes, pending, *x) {
                    for o in 0..*outer {
                        for c in 0..*inner {
                            let idx = |j: usize| (o * len + j) * inner + c;
                            let dot: f64 = (0..*len).map(|j| dy[idx(j)] * y[idx(j)]).sum();
                            for j in 0..*len {
                                dx[idx(j)] += y[idx(j)] * (dy[idx(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Concat {
                a,
                b,
                outer,
                a_block,
                b_block,
            } => {
                let stride = a_block + b_block;
                if let Some(da) = slot(nodes, pending, *a) {
                    for o in 0..*outer {
                        for k in 0..*a_block {
                            da[o * a_block + k] += dy[o * stride + k];
                        }
                    }
                }
                if let Some(db) = slot(nodes, pending, *b) {
                    for o in 0..*outer {
                        for k in 0..*b_block {
                            db[o * b_block + k] += dy[o * stride + a_block + k];
                        }
                    }
                }
            }
            Op::Narrow {
                x,
                outer,
                src_block,
                offset,
                block,
            } => {
                if let Some(dx) = slot(nodes, pending, *x) {
                    for o in 0..*outer {
                        for k in 0..*block {
                            dx[o * src_block + offset + k] += dy[o * block + k];
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (r, c) = (node.shape[0], node.shape[1]);
                let g = &nodes[gain.0].data;
                if let Some(dg) = slot(nodes, pending, *gain) {
                    for i in 0..r {
                        for j in 0..c {
                            dg[j] += dy[i * c + j] * xhat[i * c + j];
                        }
                    }
                }
                if let Some(db) = slot(nodes, pending, *bias) {
                    for i in 0..r {
                        for j in 0..c {
                            db[j] += dy[i * c + j];
                        }
                    }
                }
                if let Some(dx) = slot(nodes, pending, *x) {
                    let cf = c as f64;
                    for i in 0..r {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..c {
                            let dh = dy[i * c + j] * g[j];
                            s1 += dh;
                            s2 += dh * xhat[i * c + j];
                        }
                        for j in 0..c {
                            let dh = dy[i * c + j] * g[j];
                            dx[i * c + j] +=
                                rstd[i] / cf * (cf * dh - s1 - xhat[i * c + j] * s2);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let d = nodes[table.0].shape[1];
                if let Some(dt) = slot(nodes, pending, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += dy[r * d + j];
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = nodes[logits.0].shape[1];
                let b = labels.len() as f64;
                if let Some(dl) = slot(nodes, pending, *logits) {
                    for (i, &y) in labels.iter().enumerate() {
                        if probs[i * c + y] < LOG_CLAMP {
                            continue;
                        }
                        for j in 0..c {
                            let target = if j == y { 1.0 } else { 0.0 };
                            dl[i * c + j] += dy[0] * (probs[i * c + j] - target) / b;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = slot(nodes, pending, *x) {
                    for d in dx.iter_mut() {
                        *d += dy[0];
                    }
                }
            }
        }
    }
}
