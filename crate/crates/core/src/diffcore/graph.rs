use super::tensor::{softmax_into, Tensor};
use crate::error::{Error, Result};

/// Values above this are clamped inside `log1m_clamped` so log(1 - x) stays finite.
pub const LOG1M_CLAMP: f64 = 1.0 - 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param,
    MatMul { a: NodeId, b: NodeId, trans_b: bool },
    Bmm { a: NodeId, b: NodeId, trans_b: bool },
    AddBias { x: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    AddConst { x: NodeId },
    MulConst { x: NodeId, c: Vec<f64> },
    Relu(NodeId),
    Square(NodeId),
    Log1mClamped(NodeId),
    Reshape(NodeId),
    Gather { table: NodeId, ids: Vec<usize> },
    MaskedMean { x: NodeId, mask: Vec<bool> },
    Softmax { x: NodeId },
    LogSoftmax(NodeId),
    Nll { x: NodeId, labels: Vec<usize> },
    Sum(NodeId),
    SumLast(NodeId),
    SliceLast { x: NodeId, start: usize },
    ConcatLast(Vec<NodeId>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar loss, keyed by parameter name in registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    entries: Vec<(String, Tensor)>,
}

impl Grads {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    /// Elementwise sum; both sides must come from graphs with the same parameter list.
    pub fn accumulate(&mut self, other: &Grads) {
        for ((na, a), (nb, b)) in self.entries.iter_mut().zip(&other.entries) {
            debug_assert_eq!(na, nb);
            a.add_assign(b);
        }
    }
}

/// A tape of eagerly evaluated ops. Build it forward, then call `backward`.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, NodeId)>,
}

fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Which side of zero every ReLU input lies on, in tape order. Finite
    /// differences are only meaningful where this does not change.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(&self.nodes[x.0].value),
                _ => None,
            })
            .flat_map(|t| t.data().iter().map(|&v| v > 0.0))
            .collect()
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<NodeId> {
        value.check_finite(name)?;
        let needs_grad = match &op {
            Op::Input => false,
            Op::Param => true,
            _ => self.parents(&op).iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn parents(&self, op: &Op) -> Vec<NodeId> {
        match op {
            Op::Input | Op::Param => vec![],
            Op::MatMul { a, b, .. }
            | Op::Bmm { a, b, .. }
            | Op::Add { a, b }
            | Op::Sub { a, b }
            | Op::Mul { a, b } => vec![*a, *b],
            Op::AddBias { x, b } => vec![*x, *b],
            Op::Scale { x, .. }
            | Op::AddConst { x, .. }
            | Op::MulConst { x, .. }
            | Op::MaskedMean { x, .. }
            | Op::Softmax { x }
            | Op::Nll { x, .. }
            | Op::SliceLast { x, .. } => vec![*x],
            Op::Relu(x)
            | Op::Square(x)
            | Op::Log1mClamped(x)
            | Op::Reshape(x)
            | Op::LogSoftmax(x)
            | Op::Sum(x)
            | Op::SumLast(x) => vec![*x],
            Op::Gather { table, .. } => vec![*table],
            Op::ConcatLast(xs) => xs.clone(),
        }
    }

    pub fn input(&mut self, t: Tensor) -> Result<NodeId> {
        self.push(t, Op::Input, "input")
    }

    pub fn param(&mut self, name: &str, t: Tensor) -> Result<NodeId> {
        let id = self.push(t, Op::Param, "param")?;
        self.params.push((name.to_string(), id));
        Ok(id)
    }

    /// `a[m,k] @ b[k,n]`, or `a[m,k] @ b[n,k]^T` with `trans_b`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return contract("matmul needs 2-d operands");
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return contract(format!("matmul inner dims {sa:?} x {sb:?}"));
        }
        let mut out = vec![0.0; m * n];
        gemm(self.value(a).data(), self.value(b).data(), m, k, n, false, trans_b, &mut out);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, trans_b }, "matmul")
    }

    /// Batched matmul over the leading axis of 3-d operands.
    pub fn bmm(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return contract(format!("bmm shapes {sa:?} x {sb:?}"));
        }
        let (bs, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != kb {
            return contract(format!("bmm inner dims {sa:?} x {sb:?}"));
        }
        let mut out = vec![0.0; bs * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            gemm(
                &ad[i * m * k..(i + 1) * m * k],
                &bd[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
                false,
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        self.push(Tensor::new(vec![bs, m, n], out)?, Op::Bmm { a, b, trans_b }, "bmm")
    }

    /// Adds `b[n]` to every length-n row of `x[.., n]`.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let n = *self.shape(x).last().unwrap();
        if self.shape(b) != [n] {
            return contract("bias length must match last axis");
        }
        let bias = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            for (v, bb) in row.iter_mut().zip(bias) {
                *v += bb;
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, out)?, Op::AddBias { x, b }, "add_bias")
    }

    fn zip_same(&mut self, a: NodeId, b: NodeId, f: fn(f64, f64) -> f64, op: Op, name: &'static str) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return contract(format!("{name}: shapes {:?} and {:?}", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, out)?, op, name)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_same(a, b, |x, y| x + y, Op::Add { a, b }, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_same(a, b, |x, y| x - y, Op::Sub { a, b }, "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_same(a, b, |x, y| x * y, Op::Mul { a, b }, "mul")
    }

    fn map(&mut self, x: NodeId, f: impl Fn(f64) -> f64, op: Op, name: &'static str) -> Result<NodeId> {
        let out = self.value(x).data().iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, out)?, op, name)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.map(x, |v| v * c, Op::Scale { x, c }, "scale")
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.map(x, |v| v.max(0.0), Op::Relu(x), "relu")
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        self.map(x, |v| v * v, Op::Square(x), "square")
    }

    /// `ln(1 - min(x, LOG1M_CLAMP))`.
    pub fn log1m_clamped(&mut self, x: NodeId) -> Result<NodeId> {
        self.map(x, |v| (1.0 - v.min(LOG1M_CLAMP)).ln(), Op::Log1mClamped(x), "log1m")
    }

    fn with_const(&mut self, x: NodeId, c: Vec<f64>, add: bool) -> Result<NodeId> {
        if c.len() != self.value(x).len() {
            return contract("constant length must match operand");
        }
        let xs = self.value(x).data();
        let out = xs.iter().zip(&c).map(|(&v, &k)| if add { v + k } else { v * k }).collect();
        let shape = self.shape(x).to_vec();
        if add {
            self.push(Tensor::new(shape, out)?, Op::AddConst { x }, "add_const")
        } else {
            self.push(Tensor::new(shape, out)?, Op::MulConst { x, c }, "mul_const")
        }
    }

    pub fn add_const(&mut self, x: NodeId, c: Vec<f64>) -> Result<NodeId> {
        self.with_const(x, c, true)
    }

    pub fn mul_const(&mut self, x: NodeId, c: Vec<f64>) -> Result<NodeId> {
        self.with_const(x, c, false)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let t = self.value(x).clone().reshaped(shape)?;
        self.push(t, Op::Reshape(x), "reshape")
    }

    /// Rows of `table[V,h]` picked by `ids`, giving `[ids.len(), h]`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let s = self.shape(table);
        if s.len() != 2 {
            return contract("gather needs a 2-d table");
        }
        let (v, h) = (s[0], s[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return contract(format!("token id {bad} outside vocabulary of {v}"));
        }
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * h);
        for &i in ids {
            out.extend_from_slice(&td[i * h..(i + 1) * h]);
        }
        self.push(Tensor::new(vec![ids.len(), h], out)?, Op::Gather { table, ids: ids.to_vec() }, "gather")
    }

    /// Mean over the unmasked middle-axis entries of `x[B,M,h]`, giving `[B,h]`.
    pub fn masked_mean(&mut self, x: NodeId, mask: &[bool]) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || mask.len() != s[0] * s[1] {
            return contract("masked_mean needs x[B,M,h] and mask[B*M]");
        }
        let (b, m, h) = (s[0], s[1], s[2]);
        let xd = self.value(x).data();
        let mut out = vec![0.0; b * h];
        for bi in 0..b {
            let row = &mask[bi * m..(bi + 1) * m];
            let n = row.iter().filter(|&&t| t).count();
            if n == 0 {
                return contract(format!("sample {bi} has no unmasked tokens"));
            }
            for j in (0..m).filter(|&j| row[j]) {
                for k in 0..h {
                    out[bi * h + k] += xd[(bi * m + j) * h + k] / n as f64;
                }
            }
        }
        self.push(Tensor::new(vec![b, h], out)?, Op::MaskedMean { x, mask: mask.to_vec() }, "masked_mean")
    }

    /// Row-wise softmax over the last axis of a 2-d node; `mask` (same length as
    /// the node) excludes cells, which come out as exact zeros.
    pub fn softmax(&mut self, x: NodeId, mask: Option<&[bool]>) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return contract("softmax needs a 2-d node");
        }
        let c = s[1];
        if let Some(m) = mask {
            if m.len() != s[0] * c {
                return contract("softmax mask length");
            }
            if m.chunks(c).any(|r| !r.iter().any(|&t| t)) {
                return Err(Error::Domain("softmax row with every cell masked".into()));
            }
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(xd.len());
        let mut row = Vec::with_capacity(c);
        for r in 0..s[0] {
            softmax_into(&xd[r * c..(r + 1) * c], 1.0, mask.map(|m| &m[r * c..(r + 1) * c]), &mut row);
            out.extend_from_slice(&row);
        }
        self.push(Tensor::new(s, out)?, Op::Softmax { x }, "softmax")
    }

    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return contract("log_softmax needs a 2-d node");
        }
        let c = s[1];
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push(Tensor::new(s, out)?, Op::LogSoftmax(x), "log_softmax")
    }

    /// `-Σ_b x[b, labels[b]]` for log-probabilities `x[B,N]`.
    pub fn nll(&mut self, x: NodeId, labels: &[usize]) -> Result<NodeId> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] != labels.len() || labels.iter().any(|&l| l >= s[1]) {
            return contract("nll labels do not fit the log-probabilities");
        }
        let n = s[1];
        let xd = self.value(x).data();
        let v = -labels.iter().enumerate().map(|(b, &l)| xd[b * n + l]).sum::<f64>();
        self.push(Tensor::scalar(v), Op::Nll { x, labels: labels.to_vec() }, "nll")
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(v), Op::Sum(x), "sum")
    }

    pub fn sum_last(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        let n = *s.last().unwrap();
        let out: Vec<f64> = self.value(x).data().chunks(n).map(|r| r.iter().sum()).collect();
        let shape = if s.len() > 1 { s[..s.len() - 1].to_vec() } else { vec![1] };
        self.push(Tensor::new(shape, out)?, Op::SumLast(x), "sum_last")
    }

    pub fn slice_last(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        let n = *s.last().unwrap();
        if len == 0 || start + len > n {
            return contract(format!("slice {start}..{} of axis {n}", start + len));
        }
        let out = self.value(x).data().chunks(n).flat_map(|r| r[start..start + len].iter().copied()).collect();
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        self.push(Tensor::new(shape, out)?, Op::SliceLast { x, start }, "slice_last")
    }

    pub fn concat_last(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let first = self.shape(xs[0]).to_vec();
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::new();
        for &x in xs {
            let s = self.shape(x);
            if &s[..s.len() - 1] != lead {
                return contract("concat_last leading dims differ");
            }
            widths.push(*s.last().unwrap());
        }
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * widths.iter().sum::<usize>());
        for r in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(x).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(widths.iter().sum());
        self.push(Tensor::new(shape, out)?, Op::ConcatLast(xs.to_vec()), "concat_last")
    }

    /// Reverse pass from a scalar node. Parameters the loss does not reach get zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Grads> {
        if !self.value(loss).is_scalar() {
            return contract(format!("loss must be scalar, got shape {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::new(self.shape(loss).to_vec(), vec![1.0])?);
        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Param) {
                grads[idx] = Some(dy);
                continue;
            }
            for (p, g) in self.local_grads(node, &dy)? {
                if !self.nodes[p.0].needs_grad {
                    continue;
                }
                g.check_finite("backward")?;
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        let entries = self
            .params
            .iter()
            .map(|(name, id)| {
                let g = grads
                    .get(id.0)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| Tensor::zeros(self.shape(*id)));
                (name.clone(), g)
            })
            .collect();
        Ok(Grads { entries })
    }

    fn local_grads(&self, node: &Node, dy: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let dyd = dy.data();
        let like = |id: NodeId, data: Vec<f64>| Tensor::new(self.shape(id).to_vec(), data);
        let out = match &node.op {
            Op::Input | Op::Param => vec![],
            Op::MatMul { a, b, trans_b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k) = (sa[0], sa[1]);
                let n = if *trans_b { sb[0] } else { sb[1] };
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let mut da = vec![0.0; m * k];
                let mut db = vec![0.0; k * n];
                if *trans_b {
                    // y = a b^T, b[n,k]: da = dy b, db = dy^T a
                    gemm(dyd, bd, m, n, k, false, false, &mut da);
                    gemm(dyd, ad, n, m, k, true, false, &mut db);
                } else {
                    gemm(dyd, bd, m, n, k, false, true, &mut da);
                    gemm(ad, dyd, k, m, n, true, false, &mut db);
                }
                vec![(*a, like(*a, da)?), (*b, like(*b, db)?)]
            }
            Op::Bmm { a, b, trans_b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bs, m, k) = (sa[0], sa[1], sa[2]);
                let n = if *trans_b { sb[1] } else { sb[2] };
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let mut da = vec![0.0; bs * m * k];
                let mut db = vec![0.0; bs * k * n];
                for i in 0..bs {
                    let (ai, bi) = (&ad[i * m * k..(i + 1) * m * k], &bd[i * k * n..(i + 1) * k * n]);
                    let dyi = &dyd[i * m * n..(i + 1) * m * n];
                    let dai = &mut da[i * m * k..(i + 1) * m * k];
                    let dbi = &mut db[i * k * n..(i + 1) * k * n];
                    if *trans_b {
                        gemm(dyi, bi, m, n, k, false, false, dai);
                        gemm(dyi, ai, n, m, k, true, false, dbi);
                    } else {
                        gemm(dyi, bi, m, n, k, false, true, dai);
                        gemm(ai, dyi, k, m, n, true, false, dbi);
                    }
                }
                vec![(*a, like(*a, da)?), (*b, like(*b, db)?)]
            }
            Op::AddBias { x, b } => {
                let n = self.value(*b).len();
                let mut db = vec![0.0; n];
                for row in dyd.chunks(n) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                vec![(*x, dy.clone()), (*b, like(*b, db)?)]
            }
            Op::Add { a, b } => vec![(*a, dy.clone()), (*b, dy.clone())],
            Op::Sub { a, b } => vec![(*a, dy.clone()), (*b, like(*b, dyd.iter().map(|v| -v).collect())?)],
            Op::Mul { a, b } => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let da = dyd.iter().zip(bd).map(|(d, y)| d * y).collect();
                let db = dyd.iter().zip(ad).map(|(d, x)| d * x).collect();
                vec![(*a, like(*a, da)?), (*b, like(*b, db)?)]
            }
            Op::Scale { x, c } => vec![(*x, like(*x, dyd.iter().map(|d| d * c).collect())?)],
            Op::AddConst { x, .. } => vec![(*x, dy.clone())],
            Op::MulConst { x, c } => vec![(*x, like(*x, dyd.iter().zip(c).map(|(d, k)| d * k).collect())?)],
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                vec![(*x, like(*x, dyd.iter().zip(xd).map(|(d, &v)| if v > 0.0 { *d } else { 0.0 }).collect())?)]
            }
            Op::Square(x) => {
                let xd = self.value(*x).data();
                vec![(*x, like(*x, dyd.iter().zip(xd).map(|(d, v)| 2.0 * v * d).collect())?)]
            }
            Op::Log1mClamped(x) => {
                let xd = self.value(*x).data();
                let g = dyd
                    .iter()
                    .zip(xd)
                    .map(|(d, &v)| if v < LOG1M_CLAMP { -d / (1.0 - v) } else { 0.0 })
                    .collect();
                vec![(*x, like(*x, g)?)]
            }
            Op::Reshape(x) => vec![(*x, dy.clone().reshaped(self.shape(*x))?)],
            Op::Gather { table, ids } => {
                let h = self.shape(*table)[1];
                let mut dt = vec![0.0; self.value(*table).len()];
                for (r, &i) in ids.iter().enumerate() {
                    for k in 0..h {
                        dt[i * h + k] += dyd[r * h + k];
                    }
                }
                vec![(*table, like(*table, dt)?)]
            }
            Op::MaskedMean { x, mask } => {
                let s = self.shape(*x);
                let (b, m, h) = (s[0], s[1], s[2]);
                let mut dx = vec![0.0; b * m * h];
                for bi in 0..b {
                    let row = &mask[bi * m..(bi + 1) * m];
                    let n = row.iter().filter(|&&t| t).count() as f64;
                    for j in (0..m).filter(|&j| row[j]) {
                        for k in 0..h {
                            dx[(bi * m + j) * h + k] = dyd[bi * h + k] / n;
                        }
                    }
                }
                vec![(*x, like(*x, dx)?)]
            }
            Op::Softmax { x } => {
                let c = self.shape(*x)[1];
                let yd = node.value.data();
                let mut dx = vec![0.0; yd.len()];
                for ((dr, yr), gr) in dx.chunks_mut(c).zip(yd.chunks(c)).zip(dyd.chunks(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for i in 0..c {
                        dr[i] = yr[i] * (gr[i] - dot);
                    }
                }
                vec![(*x, like(*x, dx)?)]
            }
            Op::LogSoftmax(x) => {
                let c = self.shape(*x)[1];
                let yd = node.value.data();
                let mut dx = vec![0.0; yd.len()];
                for ((dr, yr), gr) in dx.chunks_mut(c).zip(yd.chunks(c)).zip(dyd.chunks(c)) {
                    let gs: f64 = gr.iter().sum();
                    for i in 0..c {
                        dr[i] = gr[i] - yr[i].exp() * gs;
                    }
                }
                vec![(*x, like(*x, dx)?)]
            }
            Op::Nll { x, labels } => {
                let n = self.shape(*x)[1];
                let mut dx = vec![0.0; self.value(*x).len()];
                for (b, &l) in labels.iter().enumerate() {
                    dx[b * n + l] = -dyd[0];
                }
                vec![(*x, like(*x, dx)?)]
            }
            Op::Sum(x) => vec![(*x, like(*x, vec![dyd[0]; self.value(*x).len()])?)],
            Op::SumLast(x) => {
                let n = *self.shape(*x).last().unwrap();
                let dx = dyd.iter().flat_map(|&d| std::iter::repeat_n(d, n)).collect();
                vec![(*x, like(*x, dx)?)]
            }
            Op::SliceLast { x, start } => {
                let n = *self.shape(*x).last().unwrap();
                let len = *node.value.shape().last().unwrap();
                let mut dx = vec![0.0; self.value(*x).len()];
                for (dr, gr) in dx.chunks_mut(n).zip(dyd.chunks(len)) {
                    dr[*start..start + len].copy_from_slice(gr);
                }
                vec![(*x, like(*x, dx)?)]
            }
            Op::ConcatLast(xs) => {
                let total = *node.value.shape().last().unwrap();
                let mut off = 0;
                let mut out = Vec::with_capacity(xs.len());
                for &x in xs {
                    let w = *self.shape(x).last().unwrap();
                    let dx = dyd.chunks(total).flat_map(|r| r[off..off + w].iter().copied()).collect();
                    out.push((x, like(x, dx)?));
                    off += w;
                }
                out
            }
        };
        Ok(out)
    }
}

/// `c[m,n] += op(a)[m,k] · op(b)[k,n]`, where `ta` reads `a` as stored `[k,m]`
/// and `tb` reads `b` as stored `[n,k]`.
#[allow(clippy::too_many_arguments)]
fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, ta: bool, tb: bool, c: &mut [f64]) {
    match (ta, tb) {
        (false, false) => {
            for i in 0..m {
                let ci = &mut c[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = a[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    for (cv, bv) in ci.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                        *cv += aip * bv;
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let ai = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    c[i * n + j] += ai.iter().zip(&b[j * k..(j + 1) * k]).map(|(x, y)| x * y).sum::<f64>();
                }
            }
        }
        (true, false) => {
            for p in 0..k {
                let bp = &b[p * n..(p + 1) * n];
                for i in 0..m {
                    let api = a[p * m + i];
                    if api == 0.0 {
                        continue;
                    }
                    for (cv, bv) in c[i * n..(i + 1) * n].iter_mut().zip(bp) {
                        *cv += api * bv;
                    }
                }
            }
        }
        (true, true) => unreachable!("not needed by any op"),
    }
}
