use rand::Rng;

use super::kernels::{gelu, gelu_grad, gemm, lanes, sigmoid, softplus};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        axis: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Tanh(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    Bce {
        logits: Var,
        labels: Vec<f64>,
        mask: Vec<bool>,
        count: usize,
    },
    Mse {
        pred: Var,
        target: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Sum(Var),
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, which is a topological order, so the
/// backward pass is a single reverse sweep.
#[derive(Default)]
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

    /// A leaf that gradients flow into.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        debug_assert!(
            value.all_finite() || inputs.iter().any(|v| !self.value(*v).all_finite()),
            "forward op produced non-finite values from finite inputs"
        );
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, requires_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// `a · b` for rank-2 operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b {
            (sb[1], sb[0])
        } else {
            (sb[0], sb[1])
        };
        if k != kb {
            return Err(Error::shape("matmul", sa, sb));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            self.value(a).data(),
            false,
            self.value(b).data(),
            trans_b,
            &mut out,
            m,
            k,
            n,
            false,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push_op(value, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::shape("transpose", s, &[0, 0]));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        Ok(self.push_op(value, Op::Transpose(x), &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push_op(value, Op::Add(a, b), &[a, b]))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (sx, sr) = (self.shape(x), self.shape(row));
        let n = *sx.last().unwrap_or(&0);
        if sx.len() != 2 || sr.iter().product::<usize>() != n {
            return Err(Error::shape("add_row", sx, sr));
        }
        let r = self.value(row).data();
        let data = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(a, b)| a + b))
            .collect();
        let value = Tensor::new(sx.to_vec(), data)?;
        Ok(self.push_op(value, Op::AddRow(x, row), &[x, row]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let v = self.value(x);
        let value = Tensor {
            shape: v.shape().to_vec(),
            data: v.data().iter().map(|a| a * factor).collect(),
        };
        self.push_op(value, Op::Scale(x, factor), &[x])
    }

    /// Softmax along `axis`, stabilized by subtracting each lane's maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, n, inner) = lanes(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let max = (0..n)
                    .map(|j| src[base + j * inner])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (src[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    total += e;
                }
                for j in 0..n {
                    out[base + j * inner] /= total;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push_op(value, Op::Softmax { x, axis }, &[x]))
    }

    /// Layer normalization along `axis` with an eps-guarded denominator.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        axis: usize,
        eps: f64,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(format!(
                "layer_norm axis {axis} out of range for shape {shape:?}"
            )));
        }
        if eps <= 0.0 {
            return Err(Error::invalid("layer_norm eps must be positive"));
        }
        let (outer, n, inner) = lanes(&shape, axis);
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(Error::shape("layer_norm", &shape, self.shape(gain)));
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = vec![0.0; src.len()];
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mean = (0..n).map(|j| src[base + j * inner]).sum::<f64>() / n as f64;
                let var = (0..n)
                    .map(|j| (src[base + j * inner] - mean).powi(2))
                    .sum::<f64>()
                    / n as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std.push(is);
                for j in 0..n {
                    let idx = base + j * inner;
                    let h = (src[idx] - mean) * is;
                    xhat[idx] = h;
                    out[idx] = g[j] * h + b[j];
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push_op(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                axis,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let value = Tensor {
            shape: v.shape().to_vec(),
            data: v.data().iter().map(|&a| gelu(a)).collect(),
        };
        self.push_op(value, Op::Gelu(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let value = Tensor {
            shape: v.shape().to_vec(),
            data: v.data().iter().map(|a| a.tanh()).collect(),
        };
        self.push_op(value, Op::Tanh(x), &[x])
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table);
        if st.len() != 2 {
            return Err(Error::shape("embedding", st, &[ids.len()]));
        }
        let (rows, dim) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&id| id >= rows) {
            return Err(Error::invalid(format!(
                "embedding id {bad} out of range for table with {rows} rows"
            )));
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            out.extend_from_slice(&t[id * dim..(id + 1) * dim]);
        }
        let value = Tensor::new(vec![ids.len(), dim], out)?;
        Ok(self.push_op(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Mean cross-entropy of `n×C` logits against class targets.
    ///
    /// Rows whose target equals `ignore_index` contribute nothing; if every row
    /// is ignored the loss is exactly zero.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore_index: Option<usize>,
    ) -> Result<Var> {
        let (n, c) = self.value(logits).dims2()?;
        if targets.len() != n {
            return Err(Error::shape(
                "cross_entropy",
                self.shape(logits),
                &[targets.len()],
            ));
        }
        let targets: Vec<Option<usize>> = targets
            .iter()
            .map(|&t| {
                if Some(t) == ignore_index {
                    None
                } else {
                    Some(t)
                }
            })
            .collect();
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= c) {
            return Err(Error::invalid(format!(
                "cross_entropy target {bad} out of range for {c} classes"
            )));
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        let mut count = 0;
        for (r, target) in targets.iter().enumerate() {
            let Some(t) = target else { continue };
            let row = &src[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + total.ln();
            for j in 0..c {
                probs[r * c + j] = (row[j] - log_z).exp();
            }
            loss += log_z - row[*t];
            count += 1;
        }
        if count > 0 {
            loss /= count as f64;
        }
        Ok(self.push_op(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            },
            &[logits],
        ))
    }

    /// Mean binary cross-entropy with logits over entries where `mask` is set.
    pub fn binary_cross_entropy_with_logits(
        &mut self,
        logits: Var,
        labels: &[f64],
        mask: &[bool],
    ) -> Result<Var> {
        let n = self.value(logits).numel();
        if labels.len() != n || mask.len() != n {
            return Err(Error::shape(
                "bce_with_logits",
                self.shape(logits),
                &[labels.len()],
            ));
        }
        let src = self.value(logits).data();
        let mut loss = 0.0;
        let mut count = 0;
        for i in 0..n {
            if mask[i] {
                loss += softplus(src[i]) - src[i] * labels[i];
                count += 1;
            }
        }
        if count > 0 {
            loss /= count as f64;
        }
        Ok(self.push_op(
            Tensor::scalar(loss),
            Op::Bce {
                logits,
                labels: labels.to_vec(),
                mask: mask.to_vec(),
                count,
            },
            &[logits],
        ))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        if self.value(pred).numel() != target.numel() {
            return Err(Error::shape("mse", self.shape(pred), target.shape()));
        }
        let p = self.value(pred).data();
        let n = p.len().max(1) as f64;
        let loss = p
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / n;
        Ok(self.push_op(
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                target: target.data().to_vec(),
            },
            &[pred],
        ))
    }

    /// Inverted dropout. Identity when not training or when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        rng: &mut R,
        train: bool,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} not in [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let v = self.value(x);
        let mask: Vec<f64> = (0..v.numel())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let value = Tensor {
            shape: v.shape().to_vec(),
            data: v.data().iter().zip(&mask).map(|(a, m)| a * m).collect(),
        };
        Ok(self.push_op(value, Op::Dropout { x, mask }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        self.push_op(Tensor::scalar(total), Op::Sum(x), &[x])
    }

    /// Selected rows of a rank-2 tensor, in the given order.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::invalid(format!(
                "row {bad} out of range for {r} rows"
            )));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let value = Tensor::new(vec![rows.len(), c], out)?;
        Ok(self.push_op(
            value,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        ))
    }

    /// Columns `start..start+len` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if start + len > c {
            return Err(Error::invalid(format!(
                "column slice {start}..{} out of range for {c} columns",
                start + len
            )));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let value = Tensor::new(vec![r, len], out)?;
        Ok(self.push_op(value, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::invalid("concat_cols of nothing"));
        };
        let (r, _) = self.value(first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.value(p).dims2()?;
            if pr != r {
                return Err(Error::shape(
                    "concat_cols",
                    self.shape(first),
                    self.shape(p),
                ));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; r * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..r {
                out[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let value = Tensor::new(vec![r, total], out)?;
        Ok(self.push_op(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let gd = g.data();
            let mut acc = Accumulator {
                tape: self,
                grads: &mut grads,
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul { a, b, trans_b } => {
                    let sa = self.shape(*a);
                    let (m, k) = (sa[0], sa[1]);
                    let n = node.value.shape()[1];
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    if let Some(ga) = acc.slot(*a) {
                        // dA = dC · op(B)ᵀ
                        gemm(gd, false, bv, !trans_b, ga, m, n, k, true);
                    }
                    if let Some(gb) = acc.slot(*b) {
                        if *trans_b {
                            // B is n×k: dB = dCᵀ · A
                            gemm(gd, true, av, false, gb, n, m, k, true);
                        } else {
                            // dB = Aᵀ · dC
                            gemm(av, true, gd, false, gb, k, m, n, true);
                        }
                    }
                }
                Op::Transpose(x) => {
                    let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                    if let Some(gx) = acc.slot(*x) {
                        for i in 0..r {
                            for j in 0..c {
                                gx[i * c + j] += gd[j * r + i];
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if let Some(gv) = acc.slot(v) {
                            add_into(gv, gd);
                        }
                    }
                }
                Op::AddRow(x, row) => {
                    if let Some(gx) = acc.slot(*x) {
                        add_into(gx, gd);
                    }
                    if let Some(gr) = acc.slot(*row) {
                        let n = gr.len();
                        for chunk in gd.chunks(n) {
                            add_into(gr, chunk);
                        }
                    }
                }
                Op::Scale(x, f) => {
                    if let Some(gx) = acc.slot(*x) {
                        for (a, b) in gx.iter_mut().zip(gd) {
                            *a += b * f;
                        }
                    }
                }
                Op::Softmax { x, axis } => {
                    let y = node.value.data();
                    let (outer, n, inner) = lanes(node.value.shape(), *axis);
                    if let Some(gx) = acc.slot(*x) {
                        for o in 0..outer {
                            for i in 0..inner {
                                let base = o * n * inner + i;
                                let dot: f64 = (0..n)
                                    .map(|j| gd[base + j * inner] * y[base + j * inner])
                                    .sum();
                                for j in 0..n {
                                    let idx = base + j * inner;
                                    gx[idx] += y[idx] * (gd[idx] - dot);
                                }
                            }
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    axis,
                    xhat,
                    inv_std,
                } => {
                    let (outer, n, inner) = lanes(node.value.shape(), *axis);
                    let gv = self.value(*gain).data();
                    if let Some(gg) = acc.slot(*gain) {
                        for o in 0..outer {
                            for i in 0..inner {
                                let base = o * n * inner + i;
                                for j in 0..n {
                                    gg[j] += gd[base + j * inner] * xhat[base + j * inner];
                                }
                            }
                        }
                    }
                    if let Some(gb) = acc.slot(*bias) {
                        for o in 0..outer {
                            for i in 0..inner {
                                let base = o * n * inner + i;
                                for j in 0..n {
                                    gb[j] += gd[base + j * inner];
                                }
                            }
                        }
                    }
                    if let Some(gx) = acc.slot(*x) {
                        let mut lane = 0;
                        for o in 0..outer {
                            for i in 0..inner {
                                let base = o * n * inner + i;
                                let mut mean_d = 0.0;
                                let mut mean_dx = 0.0;
                                for j in 0..n {
                                    let idx = base + j * inner;
                                    let d = gd[idx] * gv[j];
                                    mean_d += d;
                                    mean_dx += d * xhat[idx];
                                }
                                mean_d /= n as f64;
                                mean_dx /= n as f64;
                                let is = inv_std[lane];
                                for j in 0..n {
                                    let idx = base + j * inner;
                                    let d = gd[idx] * gv[j];
                                    gx[idx] += is * (d - mean_d - xhat[idx] * mean_dx);
                                }
                                lane += 1;
                            }
                        }
                    }
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x).data();
                    if let Some(gx) = acc.slot(*x) {
                        for ((a, &xi), &d) in gx.iter_mut().zip(xv).zip(gd) {
                            *a += d * gelu_grad(xi);
                        }
                    }
                }
                Op::Tanh(x) => {
                    let y = node.value.data();
                    if let Some(gx) = acc.slot(*x) {
                        for ((a, &yi), &d) in gx.iter_mut().zip(y).zip(gd) {
                            *a += d * (1.0 - yi * yi);
                        }
                    }
                }
                Op::Embedding { table, ids } => {
                    let dim = self.shape(*table)[1];
                    if let Some(gt) = acc.slot(*table) {
                        for (r, &id) in ids.iter().enumerate() {
                            add_into(
                                &mut gt[id * dim..(id + 1) * dim],
                                &gd[r * dim..(r + 1) * dim],
                            );
                        }
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    count,
                } => {
                    let c = self.shape(*logits)[1];
                    if *count > 0 {
                        let scale = gd[0] / *count as f64;
                        if let Some(gl) = acc.slot(*logits) {
                            for (r, t) in targets.iter().enumerate() {
                                let Some(t) = t else { continue };
                                for j in 0..c {
                                    gl[r * c + j] += scale * probs[r * c + j];
                                }
                                gl[r * c + t] -= scale;
                            }
                        }
                    }
                }
                Op::Bce {
                    logits,
                    labels,
                    mask,
                    count,
                } => {
                    if *count > 0 {
                        let scale = gd[0] / *count as f64;
                        let lv = self.value(*logits).data();
                        if let Some(gl) = acc.slot(*logits) {
                            for i in 0..lv.len() {
                                if mask[i] {
                                    gl[i] += scale * (sigmoid(lv[i]) - labels[i]);
                                }
                            }
                        }
                    }
                }
                Op::Mse { pred, target } => {
                    let pv = self.value(*pred).data();
                    let scale = 2.0 * gd[0] / pv.len().max(1) as f64;
                    if let Some(gp) = acc.slot(*pred) {
                        for i in 0..pv.len() {
                            gp[i] += scale * (pv[i] - target[i]);
                        }
                    }
                }
                Op::Dropout { x, mask } => {
                    if let Some(gx) = acc.slot(*x) {
                        for ((a, m), d) in gx.iter_mut().zip(mask).zip(gd) {
                            *a += d * m;
                        }
                    }
                }
                Op::Sum(x) => {
                    if let Some(gx) = acc.slot(*x) {
                        for a in gx.iter_mut() {
                            *a += gd[0];
                        }
                    }
                }
                Op::GatherRows { x, rows } => {
                    let c = self.shape(*x)[1];
                    if let Some(gx) = acc.slot(*x) {
                        for (r, &i) in rows.iter().enumerate() {
                            add_into(&mut gx[i * c..(i + 1) * c], &gd[r * c..(r + 1) * c]);
                        }
                    }
                }
                Op::SliceCols { x, start } => {
                    let c = self.shape(*x)[1];
                    let (r, w) = (node.value.shape()[0], node.value.shape()[1]);
                    if let Some(gx) = acc.slot(*x) {
                        for i in 0..r {
                            add_into(
                                &mut gx[i * c + start..i * c + start + w],
                                &gd[i * w..(i + 1) * w],
                            );
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let (r, total) = (node.value.shape()[0], node.value.shape()[1]);
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.shape(p)[1];
                        if let Some(gp) = acc.slot(p) {
                            for i in 0..r {
                                add_into(
                                    &mut gp[i * w..(i + 1) * w],
                                    &gd[i * total + offset..i * total + offset + w],
                                );
                            }
                        }
                        offset += w;
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

struct Accumulator<'a> {
    tape: &'a Tape,
    grads: &'a mut Vec<Option<Tensor>>,
}

impl Accumulator<'_> {
    /// Mutable gradient buffer for `v`, created on first use; `None` if `v`
    /// does not require a gradient.
    fn slot(&mut self, v: Var) -> Option<&mut [f64]> {
        if !self.tape.nodes[v.0].requires_grad {
            return None;
        }
        let shape = self.tape.shape(v);
        Some(
            self.grads[v.0]
                .get_or_insert_with(|| Tensor::zeros(shape))
                .data_mut(),
        )
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` was not on the loss path.
    pub fn wrt(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
