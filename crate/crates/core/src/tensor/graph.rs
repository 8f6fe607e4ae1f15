use super::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether [`Graph::backward`] clears leaf gradients first or adds to them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradMode {
    Reset,
    Accumulate,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Silu(Var),
    Softplus(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Transpose(Var),
    Concat(Vec<Var>),
    SliceRows { input: Var, start: usize },
    Gather { input: Var, index: Vec<usize> },
    GatherRows { input: Var, rows: Vec<usize> },
    ScatterRows { input: Var, rows: Vec<usize> },
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    SoftmaxRows(Var),
    LayerNormRows { input: Var, inv_std: Vec<f64> },
    BroadcastRows { input: Var, repeats: usize },
    ScaleRowGroups { x: Var, w: Var },
    Attention {
        qkv: Var,
        batch: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    TopKGate {
        probs: Var,
        k: usize,
        renorm: bool,
        selected: Vec<usize>,
    },
    Jsd { p: Var, q: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Define-by-run computation graph. Nodes are appended in evaluation order,
/// so the node list is always a valid topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

/// Jensen–Shannon divergence in nats with `0 · ln 0 := 0`.
pub(crate) fn jsd_value(p: &[f64], q: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        let a = 0.5 * (pi + qi);
        if pi > 0.0 {
            acc += 0.5 * pi * (pi / a).ln();
        }
        if qi > 0.0 {
            acc += 0.5 * qi * (qi / a).ln();
        }
    }
    acc
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Indices of the `k` largest entries, ties broken by lowest index, returned
/// in ascending index order.
pub(crate) fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    // stable sort keeps ascending index order among equal values
    order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal));
    let mut picked = order[..k.min(row.len())].to_vec();
    picked.sort_unstable();
    picked
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
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

    /// Gradient from the most recent backward pass, if the node received one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient as a tensor; zeros for a requires-grad node the loss did not reach.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        match &node.grad {
            Some(g) => Tensor::new(node.value.shape().to_vec(), g.clone())
                .expect("gradient shape mirrors value"),
            None => Tensor::zeros(node.value.shape().to_vec()),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn broadcast_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(sa.to_vec())
        } else if self.value(b).numel() == 1 {
            Ok(sa.to_vec())
        } else if self.value(a).numel() == 1 {
            Ok(sb.to_vec())
        } else {
            Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(Var, Var) -> Op,
    ) -> Result<Var> {
        let shape = self.broadcast_shape(op, a, b)?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|i| {
                let x = if va.len() == 1 { va[0] } else { va[i] };
                let y = if vb.len() == 1 { vb[0] } else { vb[i] };
                f(x, y)
            })
            .collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, make(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = self.value(a);
        let value = Tensor {
            shape: src.shape().to_vec(),
            data: src.data().iter().map(|&x| f(x)).collect(),
        };
        self.push(value, op, &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Silu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.numel() == 0 {
            return Err(Error::InvalidShape {
                op: "mean",
                shape: v.shape().to_vec(),
                reason: "empty tensor".into(),
            });
        }
        let m = v.data().iter().sum::<f64>() / v.numel() as f64;
        Ok(self.push(Tensor::scalar(m), Op::Mean(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.rank() != 2 {
            return Err(Error::InvalidShape {
                op: "transpose",
                shape: v.shape().to_vec(),
                reason: "expected rank 2".into(),
            });
        }
        let (r, c) = (v.shape()[0], v.shape()[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = v.data()[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], data)?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    /// Concatenate along the first axis; trailing dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let head = self.shape(*first).to_vec();
        if head.is_empty() {
            return Err(Error::InvalidShape {
                op: "concat",
                shape: head,
                reason: "cannot concatenate scalars".into(),
            });
        }
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != head.len() || s[1..] != head[1..] {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: head,
                    rhs: s.to_vec(),
                });
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = head;
        shape[0] = lead;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Concat(parts.to_vec()), parts))
    }

    /// Rows `start..end` along the first axis.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(a);
        let shape = v.shape().to_vec();
        if shape.is_empty() || start > end || end > shape[0] {
            return Err(Error::InvalidShape {
                op: "slice",
                shape,
                reason: format!("range {start}..{end} out of bounds"),
            });
        }
        let inner: usize = shape[1..].iter().product();
        let data = v.data()[start * inner..end * inner].to_vec();
        let mut out_shape = shape;
        out_shape[0] = end - start;
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::SliceRows { input: a, start }, &[a]))
    }

    /// Flat-index gather: `out[i] = a.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, a: Var, index: Vec<usize>, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let v = self.value(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= v.numel()) {
            return Err(Error::InvalidArgument(format!(
                "gather index {bad} out of range for {} elements",
                v.numel()
            )));
        }
        let data = index.iter().map(|&i| v.data()[i]).collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Gather { input: a, index }, &[a]))
    }

    /// Select rows of a matrix (last dimension is the row width).
    pub fn gather_rows(&mut self, a: Var, rows: Vec<usize>) -> Result<Var> {
        let v = self.value(a);
        let (r, c) = v.as_matrix();
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::InvalidArgument(format!("row {bad} out of range for {r} rows")));
        }
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in &rows {
            data.extend_from_slice(&v.data()[i * c..(i + 1) * c]);
        }
        let value = Tensor::new(vec![rows.len(), c], data)?;
        Ok(self.push(value, Op::GatherRows { input: a, rows }, &[a]))
    }

    /// Place row `i` of `a` at row `rows[i]` of a zero `[total, cols]` matrix
    /// (repeated targets add).
    pub fn scatter_rows(&mut self, a: Var, rows: Vec<usize>, total: usize) -> Result<Var> {
        let v = self.value(a);
        let (r, c) = v.as_matrix();
        if rows.len() != r || rows.iter().any(|&i| i >= total) {
            return Err(Error::InvalidArgument(format!(
                "scatter of {r} rows into {total} with {} targets",
                rows.len()
            )));
        }
        let mut data = vec![0.0; total * c];
        for (src, &dst) in rows.iter().enumerate() {
            for j in 0..c {
                data[dst * c + j] += v.data()[src * c + j];
            }
        }
        let value = Tensor::new(vec![total, c], data)?;
        Ok(self.push(value, Op::ScatterRows { input: a, rows }, &[a]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// `x · wᵀ + b` with `x: [rows, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (rows, din) = self.value(x).as_matrix();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || ws[1] != din {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: self.shape(x).to_vec(),
                rhs: ws,
            });
        }
        let dout = ws[0];
        let mut out = vec![0.0; rows * dout];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.numel() != dout {
                return Err(Error::ShapeMismatch {
                    op: "linear bias",
                    lhs: ws,
                    rhs: bv.shape().to_vec(),
                });
            }
            for r in 0..rows {
                out[r * dout..(r + 1) * dout].copy_from_slice(bv.data());
            }
        }
        gemm(rows, din, dout, self.value(x).data(), false, self.value(w).data(), true, 1.0, &mut out);
        let value = Tensor::new(vec![rows, dout], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Linear { x, w, b }, &inputs))
    }

    /// Softmax over the last dimension.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let (_, c) = v.as_matrix();
        if c == 0 {
            return Err(Error::InvalidShape {
                op: "softmax",
                shape: v.shape().to_vec(),
                reason: "empty last dimension".into(),
            });
        }
        let mut value = v.clone();
        for row in value.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        Ok(self.push(value, Op::SoftmaxRows(a), &[a]))
    }

    /// Layer normalisation over the last dimension, without affine terms.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let v = self.value(a);
        let (r, c) = v.as_matrix();
        if c == 0 {
            return Err(Error::InvalidShape {
                op: "layer_norm",
                shape: v.shape().to_vec(),
                reason: "empty last dimension".into(),
            });
        }
        let mut value = v.clone();
        let mut inv_std = Vec::with_capacity(r);
        for row in value.data_mut().chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * is;
            }
            inv_std.push(is);
        }
        Ok(self.push(value, Op::LayerNormRows { input: a, inv_std }, &[a]))
    }

    /// Repeat every row of `[groups, cols]` `repeats` times consecutively.
    pub fn broadcast_rows(&mut self, a: Var, repeats: usize) -> Result<Var> {
        let v = self.value(a);
        let (g, c) = v.as_matrix();
        let mut data = Vec::with_capacity(g * repeats * c);
        for row in v.data().chunks(c.max(1)) {
            for _ in 0..repeats {
                data.extend_from_slice(row);
            }
        }
        let value = Tensor::new(vec![g * repeats, c], data)?;
        Ok(self.push(value, Op::BroadcastRows { input: a, repeats }, &[a]))
    }

    /// Scale consecutive row groups of `x` by the matching entry of `w`.
    pub fn scale_row_groups(&mut self, x: Var, w: Var) -> Result<Var> {
        let (r, c) = self.value(x).as_matrix();
        let groups = self.value(w).numel();
        if groups == 0 || r % groups != 0 {
            return Err(Error::ShapeMismatch {
                op: "scale_row_groups",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(w).to_vec(),
            });
        }
        let per = r / groups;
        let wv = self.value(w).data();
        let mut value = self.value(x).clone();
        for (i, row) in value.data_mut().chunks_mut(c.max(1)).enumerate() {
            let s = wv[i / per];
            row.iter_mut().for_each(|v| *v *= s);
        }
        Ok(self.push(value, Op::ScaleRowGroups { x, w }, &[x, w]))
    }

    /// Multi-head self-attention over `batch` sequences. `qkv` is
    /// `[batch·len, 3·dim]` with query, key and value blocks side by side.
    pub fn attention(&mut self, qkv: Var, batch: usize, heads: usize) -> Result<Var> {
        let v = self.value(qkv);
        let (rows, c3) = v.as_matrix();
        if batch == 0 || heads == 0 || rows % batch != 0 || c3 % 3 != 0 || (c3 / 3) % heads != 0 {
            return Err(Error::InvalidShape {
                op: "attention",
                shape: v.shape().to_vec(),
                reason: format!("batch {batch}, heads {heads}"),
            });
        }
        let len = rows / batch;
        let dim = c3 / 3;
        let dh = dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let x = v.data();
        let mut out = vec![0.0; rows * dim];
        let mut probs = vec![0.0; batch * heads * len * len];
        for b in 0..batch {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * len * len..][..len * len];
                for i in 0..len {
                    let qi = &x[(b * len + i) * c3 + h * dh..][..dh];
                    for j in 0..len {
                        let kj = &x[(b * len + j) * c3 + dim + h * dh..][..dh];
                        p[i * len + j] = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    }
                    softmax_in_place(&mut p[i * len..(i + 1) * len]);
                    let o = &mut out[(b * len + i) * dim + h * dh..][..dh];
                    for j in 0..len {
                        let w = p[i * len + j];
                        let vj = &x[(b * len + j) * c3 + 2 * dim + h * dh..][..dh];
                        for (oc, vc) in o.iter_mut().zip(vj) {
                            *oc += w * vc;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![rows, dim], out)?;
        Ok(self.push(
            value,
            Op::Attention {
                qkv,
                batch,
                heads,
                probs,
            },
            &[qkv],
        ))
    }

    /// Row-wise TopK over `[rows, experts]` probabilities: keep the `k`
    /// largest entries (lowest index wins ties), zero the rest, and optionally
    /// renormalise the kept entries to sum to one. Selection indices carry no
    /// gradient; the kept probability values do.
    pub fn top_k_gate(&mut self, probs: Var, k: usize, renorm: bool) -> Result<Var> {
        let v = self.value(probs);
        let (r, m) = v.as_matrix();
        if k == 0 || k > m {
            return Err(Error::InvalidArgument(format!("top-k with k={k} over {m} experts")));
        }
        let mut out = vec![0.0; r * m];
        let mut selected = Vec::with_capacity(r * k);
        for i in 0..r {
            let row = &v.data()[i * m..(i + 1) * m];
            let idx = top_k_indices(row, k);
            let denom = if renorm { idx.iter().map(|&j| row[j]).sum::<f64>() } else { 1.0 };
            for &j in &idx {
                out[i * m + j] = row[j] / denom;
            }
            selected.extend(idx);
        }
        let value = Tensor::new(v.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::TopKGate {
                probs,
                k,
                renorm,
                selected,
            },
            &[probs],
        ))
    }

    /// Jensen–Shannon divergence (nats) between two distributions given as
    /// equal-length tensors. Inputs are used as-is; callers normalise.
    pub fn jsd(&mut self, p: Var, q: Var) -> Result<Var> {
        let (vp, vq) = (self.value(p), self.value(q));
        if vp.numel() != vq.numel() {
            return Err(Error::ShapeMismatch {
                op: "jsd",
                lhs: vp.shape().to_vec(),
                rhs: vq.shape().to_vec(),
            });
        }
        let value = Tensor::scalar(jsd_value(vp.data(), vq.data()));
        Ok(self.push(value, Op::Jsd { p, q }, &[p, q]))
    }

    /// Reverse pass from a scalar `loss`. Leaf gradients are reset or
    /// accumulated according to `mode`; interior gradients always reflect
    /// the latest pass only.
    pub fn backward(&mut self, loss: Var, mode: GradMode) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter_mut().enumerate() {
            let fresh = grads.get_mut(i).and_then(Option::take);
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let numel = node.value.numel();
                let mut acc = match (mode, node.grad.take()) {
                    (GradMode::Accumulate, Some(old)) => old,
                    _ => vec![0.0; numel],
                };
                if let Some(f) = fresh {
                    acc.iter_mut().zip(f).for_each(|(a, b)| *a += b);
                }
                node.grad = Some(acc);
            } else {
                node.grad = fresh;
            }
        }
        Ok(())
    }

    /// Clear gradients on all nodes.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        // accumulate `f(j)` into the gradient of `v` for j in 0..numel(v)
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let n = self.nodes[v.0].value.numel();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };
        // gradient of a possibly scalar-broadcast operand
        fn bcast(slot: &mut [f64], contrib: impl Iterator<Item = f64>) {
            if slot.len() == 1 {
                slot[0] += contrib.sum::<f64>();
            } else {
                slot.iter_mut().zip(contrib).for_each(|(s, c)| *s += c);
            }
        }
        let at = |x: &[f64], j: usize| if x.len() == 1 { x[0] } else { x[j] };

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| bcast(s, g.iter().copied()));
                acc(*b, &mut |s| bcast(s, g.iter().copied()));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| bcast(s, g.iter().copied()));
                acc(*b, &mut |s| bcast(s, g.iter().map(|x| -x)));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |s| bcast(s, g.iter().enumerate().map(|(j, x)| x * at(vb, j))));
                acc(*b, &mut |s| bcast(s, g.iter().enumerate().map(|(j, x)| x * at(va, j))));
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |s| bcast(s, g.iter().enumerate().map(|(j, x)| x / at(vb, j))));
                acc(*b, &mut |s| {
                    bcast(
                        s,
                        g.iter().enumerate().map(|(j, x)| {
                            let d = at(vb, j);
                            -x * at(va, j) / (d * d)
                        }),
                    )
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, x)| *s += x * c)),
            Op::AddScalar(a) | Op::Reshape(a) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, x)| *s += x))
            }
            Op::Exp(a) => {
                let y = node.value.data();
                acc(*a, &mut |s| {
                    for ((s, x), y) in s.iter_mut().zip(g).zip(y) {
                        *s += x * y;
                    }
                })
            }
            Op::Log(a) => {
                let x0 = val(*a);
                acc(*a, &mut |s| {
                    for ((s, x), v) in s.iter_mut().zip(g).zip(x0) {
                        *s += x / v;
                    }
                })
            }
            Op::Silu(a) => {
                let x0 = val(*a);
                acc(*a, &mut |s| {
                    for ((s, x), &v) in s.iter_mut().zip(g).zip(x0) {
                        let sg = sigmoid(v);
                        *s += x * sg * (1.0 + v * (1.0 - sg));
                    }
                })
            }
            Op::Softplus(a) => {
                let x0 = val(*a);
                acc(*a, &mut |s| {
                    for ((s, x), &v) in s.iter_mut().zip(g).zip(x0) {
                        *s += x * sigmoid(v);
                    }
                })
            }
            Op::Sum(a) => acc(*a, &mut |s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.numel() as f64;
                acc(*a, &mut |s| s.iter_mut().for_each(|s| *s += g[0] / n))
            }
            Op::Transpose(a) => {
                let sh = self.nodes[a.0].value.shape();
                let (r, c) = (sh[0], sh[1]);
                acc(*a, &mut |s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += g[j * r + i];
                        }
                    }
                })
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.nodes[p.0].value.numel();
                    acc(*p, &mut |s| s.iter_mut().zip(&g[off..off + n]).for_each(|(s, x)| *s += x));
                    off += n;
                }
            }
            Op::SliceRows { input, start } => {
                let inner: usize = self.nodes[input.0].value.shape()[1..].iter().product();
                let off = start * inner;
                acc(*input, &mut |s| {
                    s[off..off + g.len()].iter_mut().zip(g).for_each(|(s, x)| *s += x)
                })
            }
            Op::Gather { input, index } => acc(*input, &mut |s| {
                for (&j, x) in index.iter().zip(g) {
                    s[j] += x;
                }
            }),
            Op::GatherRows { input, rows } => {
                let (_, c) = node.value.as_matrix();
                acc(*input, &mut |s| {
                    for (k, &r) in rows.iter().enumerate() {
                        for j in 0..c {
                            s[r * c + j] += g[k * c + j];
                        }
                    }
                })
            }
            Op::ScatterRows { input, rows } => {
                let (_, c) = node.value.as_matrix();
                acc(*input, &mut |s| {
                    for (k, &r) in rows.iter().enumerate() {
                        for j in 0..c {
                            s[k * c + j] += g[r * c + j];
                        }
                    }
                })
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if needs(*a) {
                    acc(*a, &mut |s| gemm(m, n, k, g, false, val(*b), true, 1.0, s));
                }
                if needs(*b) {
                    acc(*b, &mut |s| gemm(k, m, n, val(*a), true, g, false, 1.0, s));
                }
            }
            Op::Linear { x, w, b } => {
                let (rows, din) = self.nodes[x.0].value.as_matrix();
                let dout = self.nodes[w.0].value.shape()[0];
                if needs(*x) {
                    acc(*x, &mut |s| gemm(rows, dout, din, g, false, val(*w), false, 1.0, s));
                }
                if needs(*w) {
                    acc(*w, &mut |s| gemm(dout, rows, din, g, true, val(*x), false, 1.0, s));
                }
                if let Some(b) = b {
                    acc(*b, &mut |s| {
                        for row in g.chunks(dout) {
                            s.iter_mut().zip(row).for_each(|(s, x)| *s += x);
                        }
                    });
                }
            }
            Op::SoftmaxRows(a) => {
                let (_, c) = node.value.as_matrix();
                let y = node.value.data();
                acc(*a, &mut |s| {
                    for ((srow, grow), yrow) in s.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((s, gx), yx) in srow.iter_mut().zip(grow).zip(yrow) {
                            *s += yx * (gx - dot);
                        }
                    }
                })
            }
            Op::LayerNormRows { input, inv_std } => {
                let (_, c) = node.value.as_matrix();
                let y = node.value.data();
                let cf = c as f64;
                acc(*input, &mut |s| {
                    for (r, ((srow, grow), yrow)) in
                        s.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)).enumerate()
                    {
                        let mg = grow.iter().sum::<f64>() / cf;
                        let mgy = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / cf;
                        for ((s, gx), yx) in srow.iter_mut().zip(grow).zip(yrow) {
                            *s += inv_std[r] * (gx - mg - yx * mgy);
                        }
                    }
                })
            }
            Op::BroadcastRows { input, repeats } => {
                let (_, c) = node.value.as_matrix();
                acc(*input, &mut |s| {
                    for (k, grow) in g.chunks(c.max(1)).enumerate() {
                        let dst = &mut s[(k / repeats) * c..][..c];
                        dst.iter_mut().zip(grow).for_each(|(s, x)| *s += x);
                    }
                })
            }
            Op::ScaleRowGroups { x, w } => {
                let (r, c) = node.value.as_matrix();
                let wv = val(*w);
                let per = r / wv.len();
                let xv = val(*x);
                acc(*x, &mut |s| {
                    for k in 0..r {
                        let sc = wv[k / per];
                        for j in 0..c {
                            s[k * c + j] += g[k * c + j] * sc;
                        }
                    }
                });
                acc(*w, &mut |s| {
                    for k in 0..r {
                        let dot: f64 = (0..c).map(|j| g[k * c + j] * xv[k * c + j]).sum();
                        s[k / per] += dot;
                    }
                });
            }
            Op::Attention {
                qkv,
                batch,
                heads,
                probs,
            } => {
                let x = val(*qkv);
                let (rows, c3) = self.nodes[qkv.0].value.as_matrix();
                let (batch, heads) = (*batch, *heads);
                let len = rows / batch;
                let dim = c3 / 3;
                let dh = dim / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                acc(*qkv, &mut |s| {
                    let mut dp = vec![0.0; len * len];
                    for b in 0..batch {
                        for h in 0..heads {
                            let p = &probs[(b * heads + h) * len * len..][..len * len];
                            let go = |i: usize| &g[(b * len + i) * dim + h * dh..][..dh];
                            let xrow = |i: usize, blk: usize| &x[(b * len + i) * c3 + blk * dim + h * dh..][..dh];
                            // dV_j += Σ_i P_ij dO_i ; dP_ij = dO_i · V_j
                            for i in 0..len {
                                for j in 0..len {
                                    dp[i * len + j] = go(i).iter().zip(xrow(j, 2)).map(|(a, b)| a * b).sum();
                                }
                            }
                            for j in 0..len {
                                let base = (b * len + j) * c3 + 2 * dim + h * dh;
                                for i in 0..len {
                                    let w = p[i * len + j];
                                    for (cidx, gv) in go(i).iter().enumerate() {
                                        s[base + cidx] += w * gv;
                                    }
                                }
                            }
                            // dS = P ⊙ (dP − rowsum(dP ⊙ P))
                            for i in 0..len {
                                let row = &mut dp[i * len..(i + 1) * len];
                                let pr = &p[i * len..(i + 1) * len];
                                let dot: f64 = row.iter().zip(pr).map(|(a, b)| a * b).sum();
                                for (d, pv) in row.iter_mut().zip(pr) {
                                    *d = pv * (*d - dot) * scale;
                                }
                            }
                            for i in 0..len {
                                let qbase = (b * len + i) * c3 + h * dh;
                                for j in 0..len {
                                    let ds = dp[i * len + j];
                                    if ds == 0.0 {
                                        continue;
                                    }
                                    let kbase = (b * len + j) * c3 + dim + h * dh;
                                    for cidx in 0..dh {
                                        s[qbase + cidx] += ds * x[kbase + cidx];
                                        s[kbase + cidx] += ds * x[qbase + cidx];
                                    }
                                }
                            }
                        }
                    }
                })
            }
            Op::TopKGate {
                probs,
                k,
                renorm,
                selected,
            } => {
                let pv = val(*probs);
                let (_, m) = node.value.as_matrix();
                acc(*probs, &mut |s| {
                    for (r, sel) in selected.chunks(*k).enumerate() {
                        let row = &pv[r * m..(r + 1) * m];
                        let grow = &g[r * m..(r + 1) * m];
                        if *renorm {
                            let denom: f64 = sel.iter().map(|&j| row[j]).sum();
                            let dot: f64 = sel.iter().map(|&j| grow[j] * row[j]).sum();
                            for &j in sel {
                                s[r * m + j] += grow[j] / denom - dot / (denom * denom);
                            }
                        } else {
                            for &j in sel {
                                s[r * m + j] += grow[j];
                            }
                        }
                    }
                })
            }
            Op::Jsd { p, q } => {
                let (pv, qv) = (val(*p), val(*q));
                let half_log = |x: f64, y: f64| {
                    let a = 0.5 * (x + y);
                    0.5 * (x.max(f64::MIN_POSITIVE) / a.max(f64::MIN_POSITIVE)).ln()
                };
                acc(*p, &mut |s| {
                    for (j, s) in s.iter_mut().enumerate() {
                        *s += g[0] * half_log(pv[j], qv[j]);
                    }
                });
                acc(*q, &mut |s| {
                    for (j, s) in s.iter_mut().enumerate() {
                        *s += g[0] * half_log(qv[j], pv[j]);
                    }
                });
            }
        }
    }
}
