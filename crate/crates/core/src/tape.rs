//! Define-by-run reverse-mode autodiff over [`Tensor`] values.
//!
//! A [`Tape`] is rebuilt for every forward pass. Operations append nodes and
//! return [`Var`] handles; [`Tape::backward`] walks the nodes once in reverse
//! creation order and returns a gradient per node. After `backward` the tape
//! is frozen: values remain readable but a second backward is an error.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MatMul(Var, Var),
    Transpose(Var),
    BroadcastAddRow(Var, Var),
    MaskedSoftmaxRows { x: Var, mask: Vec<bool> },
    LayerNormRows { x: Var, gain: Var, bias: Var, eps: f64 },
    Gelu(Var),
    Sigmoid(Var),
    Log(Var),
    GatherRows { table: Var, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    MeanAll(Var),
    SumAll(Var),
    MulScalar { x: Var, s: Var },
    StraightThroughOneHot(Var),
    CrossEntropyLogits { logits: Var, label: usize },
    BceWithLogits { logits: Var, targets: Vec<f64> },
}

struct Node {
    value: Tensor,
    grad_enabled: bool,
    op: Op,
}

/// Gradients produced by one backward pass, keyed by node.
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad_enabled(&self, v: Var) -> bool {
        self.nodes[v.0].grad_enabled
    }

    fn push(&mut self, value: Tensor, grad_enabled: bool, op: Op) -> Var {
        debug_assert!(
            value.all_finite(),
            "non-finite value produced by {:?}",
            op_name(&op)
        );
        self.nodes.push(Node {
            value,
            grad_enabled,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].grad_enabled)
    }

    /// Register a gradient-tracked leaf (a parameter).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Register an untracked constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (&self.nodes[a.0].value.shape, &self.nodes[b.0].value.shape);
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape.clone(), data);
        Ok(self.push(t, self.any_grad(&[a, b]), Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = self.value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x - y)
            .collect();
        let t = Tensor::new(self.value(a).shape.clone(), data);
        Ok(self.push(t, self.any_grad(&[a, b]), Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.value(a).shape.clone(), data);
        Ok(self.push(t, self.any_grad(&[a, b]), Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = Tensor::new(
            self.value(a).shape.clone(),
            self.value(a).data.iter().map(|x| x * c).collect(),
        );
        self.push(t, self.grad_enabled(a), Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let t = Tensor::new(
            self.value(a).shape.clone(),
            self.value(a).data.iter().map(|x| x + c).collect(),
        );
        self.push(t, self.grad_enabled(a), Op::AddConst(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.value(a).shape.clone(),
                rhs: self.value(b).shape.clone(),
            });
        }
        let t = matmul_raw(&self.value(a).data, &self.value(b).data, m, k, n);
        Ok(self.push(
            Tensor::matrix(m, n, t),
            self.any_grad(&[a, b]),
            Op::MatMul(a, b),
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.value(a).dims2();
        let src = &self.value(a).data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push(
            Tensor::matrix(n, m, out),
            self.grad_enabled(a),
            Op::Transpose(a),
        )
    }

    /// `a` is m x n, `row` is a length-n vector added to every row.
    pub fn broadcast_add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2();
        if self.value(row).numel() != n {
            return Err(Error::ShapeMismatch {
                op: "broadcast_add_row",
                lhs: self.value(a).shape.clone(),
                rhs: self.value(row).shape.clone(),
            });
        }
        let mut out = self.value(a).data.clone();
        let r = &self.value(row).data;
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] += r[j];
            }
        }
        Ok(self.push(
            Tensor::matrix(m, n, out),
            self.any_grad(&[a, row]),
            Op::BroadcastAddRow(a, row),
        ))
    }

    /// Row-wise softmax where masked positions get exactly zero probability.
    /// `mask` has the same extent as `x` (row-major, true = attend).
    pub fn masked_softmax_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (m, n) = self.value(x).dims2();
        if mask.len() != m * n {
            return Err(Error::ShapeMismatch {
                op: "masked_softmax_rows",
                lhs: self.value(x).shape.clone(),
                rhs: vec![mask.len()],
            });
        }
        let src = &self.value(x).data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mrow = &mask[i * n..(i + 1) * n];
            let mut max = f64::NEG_INFINITY;
            for j in 0..n {
                if mrow[j] && row[j] > max {
                    max = row[j];
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::FullyMaskedRow {
                    op: "masked_softmax_rows",
                    row: i,
                });
            }
            let mut denom = 0.0;
            for j in 0..n {
                if mrow[j] {
                    let e = (row[j] - max).exp();
                    out[i * n + j] = e;
                    denom += e;
                }
            }
            for j in 0..n {
                out[i * n + j] /= denom; // masked entries stay exactly 0
            }
        }
        Ok(self.push(
            Tensor::new(self.value(x).shape.clone(), out),
            self.grad_enabled(x),
            Op::MaskedSoftmaxRows {
                x,
                mask: mask.to_vec(),
            },
        ))
    }

    /// Softmax over the last axis with nothing masked.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let mask = vec![true; self.value(x).numel()];
        self.masked_softmax_rows(x, &mask)
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.value(x).dims2();
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(Error::ShapeMismatch {
                op: "layer_norm_rows",
                lhs: self.value(x).shape.clone(),
                rhs: self.value(gain).shape.clone(),
            });
        }
        let src = &self.value(x).data;
        let g = &self.value(gain).data;
        let b = &self.value(bias).data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                out[i * n + j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        Ok(self.push(
            Tensor::new(self.value(x).shape.clone(), out),
            self.any_grad(&[x, gain, bias]),
            Op::LayerNormRows { x, gain, bias, eps },
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = Tensor::new(
            self.value(a).shape.clone(),
            self.value(a).data.iter().map(|&x| gelu_scalar(x)).collect(),
        );
        self.push(t, self.grad_enabled(a), Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = Tensor::new(
            self.value(a).shape.clone(),
            self.value(a)
                .data
                .iter()
                .map(|&x| sigmoid_scalar(x))
                .collect(),
        );
        self.push(t, self.grad_enabled(a), Op::Sigmoid(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let t = Tensor::new(
            self.value(a).shape.clone(),
            self.value(a).data.iter().map(|x| x.ln()).collect(),
        );
        self.push(t, self.grad_enabled(a), Op::Log(a))
    }

    /// Embedding lookup: rows `ids` of `table` stacked into a len(ids) x d matrix.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.value(table).dims2();
        for &id in ids {
            if id >= v {
                return Err(Error::TokenOutOfRange { id, vocab: v });
            }
        }
        let src = &self.value(table).data;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        Ok(self.push(
            Tensor::matrix(ids.len(), d, out),
            self.grad_enabled(table),
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Stack matrices with equal column counts along the row (sequence) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty());
        let (_, n) = self.value(parts[0]).dims2();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (m, n2) = self.value(p).dims2();
            if n2 != n {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vec![rows, n],
                    rhs: self.value(p).shape.clone(),
                });
            }
            rows += m;
            out.extend_from_slice(&self.value(p).data);
        }
        Ok(self.push(
            Tensor::matrix(rows, n, out),
            self.any_grad(parts),
            Op::ConcatRows(parts.to_vec()),
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.value(x).dims2();
        assert!(start + len <= m, "row slice out of range");
        let out = self.value(x).data[start * n..(start + len) * n].to_vec();
        self.push(
            Tensor::matrix(len, n, out),
            self.grad_enabled(x),
            Op::SliceRows { x, start },
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.value(x).dims2();
        assert!(start + len <= n, "column slice out of range");
        let src = &self.value(x).data;
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        self.push(
            Tensor::matrix(m, len, out),
            self.grad_enabled(x),
            Op::SliceCols { x, start },
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty());
        let (m, _) = self.value(parts[0]).dims2();
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let (m2, n) = self.value(p).dims2();
            if m2 != m {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape.clone(),
                    rhs: self.value(p).shape.clone(),
                });
            }
            widths.push(n);
            total += n;
        }
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                let src = &self.value(p).data;
                out.extend_from_slice(&src[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(
            Tensor::matrix(m, total, out),
            self.any_grad(parts),
            Op::ConcatCols(parts.to_vec()),
        ))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let v = self.value(a).data.iter().sum::<f64>() / n;
        self.push(Tensor::scalar(v), self.grad_enabled(a), Op::MeanAll(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = self.value(a).data.iter().sum::<f64>();
        self.push(Tensor::scalar(v), self.grad_enabled(a), Op::SumAll(a))
    }

    /// Multiply every entry of `x` by the scalar node `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(Error::ShapeMismatch {
                op: "mul_scalar",
                lhs: self.value(x).shape.clone(),
                rhs: self.value(s).shape.clone(),
            });
        }
        let sv = self.value(s).item();
        let t = Tensor::new(
            self.value(x).shape.clone(),
            self.value(x).data.iter().map(|v| v * sv).collect(),
        );
        Ok(self.push(t, self.any_grad(&[x, s]), Op::MulScalar { x, s }))
    }

    /// Forward: one-hot at the argmax (lowest index wins ties).
    /// Backward: identity, i.e. the gradient of the soft input.
    pub fn straight_through_onehot(&mut self, a: Var) -> Var {
        let src = &self.value(a).data;
        let arg = argmax_tiebreak(src);
        let mut out = vec![0.0; src.len()];
        out[arg] = 1.0;
        self.push(
            Tensor::new(self.value(a).shape.clone(), out),
            self.grad_enabled(a),
            Op::StraightThroughOneHot(a),
        )
    }

    /// Multiclass cross-entropy on raw logits (numerically stable log-sum-exp).
    pub fn cross_entropy_logits(&mut self, logits: Var, label: usize) -> Result<Var> {
        let n = self.value(logits).numel();
        if label >= n {
            return Err(Error::LabelOutOfRange(format!("{label} >= {n}")));
        }
        let src = &self.value(logits).data;
        let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + src.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - src[label];
        Ok(self.push(
            Tensor::scalar(loss),
            self.grad_enabled(logits),
            Op::CrossEntropyLogits { logits, label },
        ))
    }

    /// Mean binary cross-entropy over classes on raw logits.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let n = self.value(logits).numel();
        if targets.len() != n {
            return Err(Error::ShapeMismatch {
                op: "bce_with_logits",
                lhs: self.value(logits).shape.clone(),
                rhs: vec![targets.len()],
            });
        }
        for &t in targets {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::LabelOutOfRange(format!("target {t} not in [0,1]")));
            }
        }
        let src = &self.value(logits).data;
        let loss = src
            .iter()
            .zip(targets)
            .map(|(&x, &y)| x.max(0.0) - x * y + (1.0 + (-x.abs()).exp()).ln())
            .sum::<f64>()
            / n as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            self.grad_enabled(logits),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Reverse pass from a scalar loss. Visits each node exactly once in
    /// reverse creation order; gradient accumulation is a sum over paths.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(self.value(loss).shape.clone()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].grad_enabled {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { by_node: grads })
    }

    fn add_grad(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.nodes[v.0].grad_enabled {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.data.iter_mut().zip(&delta.data) {
                    *a += b;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn accumulate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_grad(grads, a, g.clone());
                self.add_grad(grads, b, g.clone());
            }
            Op::Sub(a, b) => {
                self.add_grad(grads, a, g.clone());
                let neg = Tensor::new(g.shape.clone(), g.data.iter().map(|v| -v).collect());
                self.add_grad(grads, b, neg);
            }
            Op::Mul(a, b) => {
                let da = Tensor::new(
                    g.shape.clone(),
                    g.data
                        .iter()
                        .zip(&self.value(b).data)
                        .map(|(x, y)| x * y)
                        .collect(),
                );
                let db = Tensor::new(
                    g.shape.clone(),
                    g.data
                        .iter()
                        .zip(&self.value(a).data)
                        .map(|(x, y)| x * y)
                        .collect(),
                );
                self.add_grad(grads, a, da);
                self.add_grad(grads, b, db);
            }
            Op::Scale(a, c) => {
                let da = Tensor::new(g.shape.clone(), g.data.iter().map(|v| v * c).collect());
                self.add_grad(grads, a, da);
            }
            Op::AddConst(a) => self.add_grad(grads, a, g.clone()),
            Op::MatMul(a, b) => {
                let (m, k) = self.value(a).dims2();
                let (_, n) = self.value(b).dims2();
                // dA = g . B^T
                let bt = transpose_raw(&self.value(b).data, k, n);
                let da = matmul_raw(&g.data, &bt, m, n, k);
                // dB = A^T . g
                let at = transpose_raw(&self.value(a).data, m, k);
                let db = matmul_raw(&at, &g.data, k, m, n);
                self.add_grad(
                    grads,
                    a,
                    Tensor::new(self.value(a).shape.clone(), da),
                );
                self.add_grad(
                    grads,
                    b,
                    Tensor::new(self.value(b).shape.clone(), db),
                );
            }
            Op::Transpose(a) => {
                let (m, n) = self.value(a).dims2();
                let da = transpose_raw(&g.data, n, m);
                self.add_grad(grads, a, Tensor::new(self.value(a).shape.clone(), da));
            }
            Op::BroadcastAddRow(a, row) => {
                let (m, n) = self.value(a).dims2();
                self.add_grad(grads, a, g.clone());
                let mut dr = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        dr[j] += g.data[i * n + j];
                    }
                }
                self.add_grad(grads, row, Tensor::new(self.value(row).shape.clone(), dr));
            }
            Op::MaskedSoftmaxRows { x, mask } => {
                let (m, n) = self.value(x).dims2();
                let y = &self.nodes[i].value.data;
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    let mut dot = 0.0;
                    for j in 0..n {
                        dot += g.data[r * n + j] * y[r * n + j];
                    }
                    for j in 0..n {
                        if mask[r * n + j] {
                            dx[r * n + j] = y[r * n + j] * (g.data[r * n + j] - dot);
                        }
                    }
                }
                self.add_grad(grads, x, Tensor::new(self.value(x).shape.clone(), dx));
            }
            Op::LayerNormRows { x, gain, bias, eps } => {
                let (m, n) = self.value(x).dims2();
                let src = &self.value(x).data;
                let gv = &self.value(gain).data;
                let mut dx = vec![0.0; m * n];
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                for r in 0..m {
                    let row = &src[r * n..(r + 1) * n];
                    let mean = row.iter().sum::<f64>() / n as f64;
                    let var =
                        row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let gh: Vec<f64> = (0..n).map(|j| g.data[r * n + j] * gv[j]).collect();
                    let mean_gh = gh.iter().sum::<f64>() / n as f64;
                    let mean_ghx =
                        gh.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        dx[r * n + j] = inv * (gh[j] - mean_gh - xhat[j] * mean_ghx);
                        dgain[j] += g.data[r * n + j] * xhat[j];
                        dbias[j] += g.data[r * n + j];
                    }
                }
                self.add_grad(grads, x, Tensor::new(self.value(x).shape.clone(), dx));
                self.add_grad(
                    grads,
                    gain,
                    Tensor::new(self.value(gain).shape.clone(), dgain),
                );
                self.add_grad(
                    grads,
                    bias,
                    Tensor::new(self.value(bias).shape.clone(), dbias),
                );
            }
            Op::Gelu(a) => {
                let da = Tensor::new(
                    g.shape.clone(),
                    g.data
                        .iter()
                        .zip(&self.value(a).data)
                        .map(|(gi, &x)| gi * gelu_grad_scalar(x))
                        .collect(),
                );
                self.add_grad(grads, a, da);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].value.data;
                let da = Tensor::new(
                    g.shape.clone(),
                    g.data
                        .iter()
                        .zip(y)
                        .map(|(gi, &s)| gi * s * (1.0 - s))
                        .collect(),
                );
                self.add_grad(grads, a, da);
            }
            Op::Log(a) => {
                let da = Tensor::new(
                    g.shape.clone(),
                    g.data
                        .iter()
                        .zip(&self.value(a).data)
                        .map(|(gi, x)| gi / x)
                        .collect(),
                );
                self.add_grad(grads, a, da);
            }
            Op::GatherRows { table, ids } => {
                let (v, d) = self.value(table).dims2();
                let mut dt = vec![0.0; v * d];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g.data[r * d + j];
                    }
                }
                self.add_grad(
                    grads,
                    table,
                    Tensor::new(self.value(table).shape.clone(), dt),
                );
            }
            Op::ConcatRows(parts) => {
                let (_, n) = self.nodes[i].value.dims2();
                let mut offset = 0;
                for p in parts {
                    let (m, _) = self.value(p).dims2();
                    let dp = g.data[offset * n..(offset + m) * n].to_vec();
                    self.add_grad(grads, p, Tensor::matrix(m, n, dp));
                    offset += m;
                }
            }
            Op::SliceRows { x, start } => {
                let (m, n) = self.value(x).dims2();
                let (len, _) = self.nodes[i].value.dims2();
                let mut dx = vec![0.0; m * n];
                dx[start * n..(start + len) * n].copy_from_slice(&g.data);
                self.add_grad(grads, x, Tensor::new(self.value(x).shape.clone(), dx));
            }
            Op::SliceCols { x, start } => {
                let (m, n) = self.value(x).dims2();
                let (_, len) = self.nodes[i].value.dims2();
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    for j in 0..len {
                        dx[r * n + start + j] = g.data[r * len + j];
                    }
                }
                self.add_grad(grads, x, Tensor::new(self.value(x).shape.clone(), dx));
            }
            Op::ConcatCols(parts) => {
                let (m, total) = self.nodes[i].value.dims2();
                let mut offset = 0;
                for p in parts {
                    let (_, w) = self.value(p).dims2();
                    let mut dp = Vec::with_capacity(m * w);
                    for r in 0..m {
                        dp.extend_from_slice(&g.data[r * total + offset..r * total + offset + w]);
                    }
                    self.add_grad(grads, p, Tensor::matrix(m, w, dp));
                    offset += w;
                }
            }
            Op::MeanAll(a) => {
                let n = self.value(a).numel() as f64;
                let gi = g.item() / n;
                let da = Tensor::new(
                    self.value(a).shape.clone(),
                    vec![gi; self.value(a).numel()],
                );
                self.add_grad(grads, a, da);
            }
            Op::SumAll(a) => {
                let da = Tensor::new(
                    self.value(a).shape.clone(),
                    vec![g.item(); self.value(a).numel()],
                );
                self.add_grad(grads, a, da);
            }
            Op::MulScalar { x, s } => {
                let sv = self.value(s).item();
                let dx = Tensor::new(g.shape.clone(), g.data.iter().map(|v| v * sv).collect());
                let ds = g
                    .data
                    .iter()
                    .zip(&self.value(x).data)
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
                self.add_grad(grads, x, dx);
                self.add_grad(grads, s, Tensor::scalar(ds));
            }
            Op::StraightThroughOneHot(a) => {
                self.add_grad(grads, a, g.clone());
            }
            Op::CrossEntropyLogits { logits, label } => {
                let src = &self.value(logits).data;
                let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let denom = src.iter().map(|v| (v - max).exp()).sum::<f64>();
                let gi = g.item();
                let mut dl: Vec<f64> = src
                    .iter()
                    .map(|v| gi * (v - max).exp() / denom)
                    .collect();
                dl[label] -= gi;
                self.add_grad(
                    grads,
                    logits,
                    Tensor::new(self.value(logits).shape.clone(), dl),
                );
            }
            Op::BceWithLogits { logits, targets } => {
                let n = targets.len() as f64;
                let gi = g.item();
                let dl: Vec<f64> = self.value(logits)
                    .data
                    .iter()
                    .zip(&targets)
                    .map(|(&x, &y)| gi * (sigmoid_scalar(x) - y) / n)
                    .collect();
                self.add_grad(
                    grads,
                    logits,
                    Tensor::new(self.value(logits).shape.clone(), dl),
                );
            }
        }
    }
}

/// Lowest index among the maxima.
pub fn argmax_tiebreak(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddConst(..) => "add_const",
        Op::MatMul(..) => "matmul",
        Op::Transpose(..) => "transpose",
        Op::BroadcastAddRow(..) => "broadcast_add_row",
        Op::MaskedSoftmaxRows { .. } => "masked_softmax_rows",
        Op::LayerNormRows { .. } => "layer_norm_rows",
        Op::Gelu(..) => "gelu",
        Op::Sigmoid(..) => "sigmoid",
        Op::Log(..) => "log",
        Op::GatherRows { .. } => "gather_rows",
        Op::ConcatRows(..) => "concat_rows",
        Op::SliceRows { .. } => "slice_rows",
        Op::SliceCols { .. } => "slice_cols",
        Op::ConcatCols(..) => "concat_cols",
        Op::MeanAll(..) => "mean_all",
        Op::SumAll(..) => "sum_all",
        Op::MulScalar { .. } => "mul_scalar",
        Op::StraightThroughOneHot(..) => "straight_through_onehot",
        Op::CrossEntropyLogits { .. } => "cross_entropy_logits",
        Op::BceWithLogits { .. } => "bce_with_logits",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Central finite-difference check of d(loss)/d(leaf) for every leaf.
    fn fd_check(
        inits: &[Tensor],
        build: impl Fn(&mut Tape, &[Var]) -> Var,
        tol: f64,
    ) {
        let run = |vals: &[Tensor]| -> (f64, Vec<Option<Tensor>>) {
            let mut tape = Tape::new();
            let leaves: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone())).collect();
            let loss = build(&mut tape, &leaves);
            let v = tape.value(loss).item();
            let grads = tape.backward(loss).unwrap();
            (v, leaves.iter().map(|&l| grads.get(l).cloned()).collect())
        };
        let (_, analytic) = run(inits);
        let h = 1e-6;
        for (pi, init) in inits.iter().enumerate() {
            for j in 0..init.numel() {
                let mut plus = inits.to_vec();
                plus[pi].data[j] += h;
                let mut minus = inits.to_vec();
                minus[pi].data[j] -= h;
                let num = (run(&plus).0 - run(&minus).0) / (2.0 * h);
                let ana = analytic[pi].as_ref().map_or(0.0, |g| g.data[j]);
                let denom = ana.abs().max(num.abs()).max(1.0);
                assert!(
                    (ana - num).abs() / denom < tol,
                    "leaf {pi} entry {j}: analytic {ana} vs numeric {num}"
                );
            }
        }
    }

    fn t(rows: usize, cols: usize, vals: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, vals.to_vec())
    }

    #[test]
    fn add_sub_mul_scale_fd() {
        let a = t(2, 2, &[0.3, -1.2, 0.7, 2.1]);
        let b = t(2, 2, &[1.4, 0.2, -0.5, 0.9]);
        fd_check(&[a, b], |tape, l| {
            let s = tape.add(l[0], l[1]).unwrap();
            let d = tape.sub(s, l[1]).unwrap();
            let m = tape.mul(d, l[0]).unwrap();
            let sc = tape.scale(m, 1.7);
            let ac = tape.add_const(sc, 0.3);
            tape.mean_all(ac)
        }, 1e-6);
    }

    #[test]
    fn matmul_transpose_fd() {
        let a = t(2, 3, &[0.3, -1.2, 0.7, 2.1, 0.5, -0.4]);
        let b = t(3, 2, &[1.4, 0.2, -0.5, 0.9, 0.1, 1.3]);
        fd_check(&[a, b], |tape, l| {
            let p = tape.matmul(l[0], l[1]).unwrap();
            let pt = tape.transpose(p);
            let q = tape.matmul(pt, l[0]).unwrap();
            tape.sum_all(q)
        }, 1e-6);
    }

    #[test]
    fn softmax_layernorm_gelu_sigmoid_log_fd() {
        let x = t(2, 3, &[0.3, -1.2, 0.7, 2.1, 0.5, -0.4]);
        let g = t(1, 3, &[1.1, 0.9, 1.0]);
        let b = t(1, 3, &[0.0, 0.1, -0.2]);
        fd_check(&[x.clone(), g, b], |tape, l| {
            let ln = tape.layer_norm_rows(l[0], l[1], l[2], 1e-5).unwrap();
            let ge = tape.gelu(ln);
            let sm = tape.softmax_rows(ge).unwrap();
            let shifted = tape.add_const(sm, 1.0);
            let lg = tape.log(shifted);
            let sg = tape.sigmoid(lg);
            tape.mean_all(sg)
        }, 1e-5);
    }

    #[test]
    fn masked_softmax_fd_and_exact_zeros() {
        let x = t(2, 4, &[0.3, -1.2, 0.7, 0.1, 2.1, 0.5, -0.4, 0.0]);
        let mask = [true, false, true, true, false, true, true, false];
        fd_check(&[x.clone()], |tape, l| {
            let sm = tape.masked_softmax_rows(l[0], &mask).unwrap();
            let w = tape.constant(t(2, 4, &[0.3, 0.9, -0.2, 0.5, 1.0, -0.7, 0.4, 0.2]));
            let m = tape.mul(sm, w).unwrap();
            tape.sum_all(m)
        }, 1e-6);
        let mut tape = Tape::new();
        let v = tape.leaf(x);
        let sm = tape.masked_softmax_rows(v, &mask).unwrap();
        let y = &tape.value(sm).data;
        assert_eq!(y[1], 0.0);
        assert_eq!(y[4], 0.0);
        assert_eq!(y[7], 0.0);
        let row0: f64 = y[0..4].iter().sum();
        let row1: f64 = y[4..8].iter().sum();
        assert!((row0 - 1.0).abs() < 1e-12 && (row1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn masked_softmax_fully_masked_row_errors() {
        let mut tape = Tape::new();
        let v = tape.leaf(t(1, 2, &[0.5, 1.0]));
        let err = tape.masked_softmax_rows(v, &[false, false]).unwrap_err();
        assert!(matches!(err, Error::FullyMaskedRow { row: 0, .. }));
    }

    #[test]
    fn layer_norm_scalar_oracle() {
        // row [1, 3]: mean 2, population var 1, normalized [-1, 1] (eps tiny)
        let mut tape = Tape::new();
        let x = tape.leaf(t(1, 2, &[1.0, 3.0]));
        let g = tape.leaf(t(1, 2, &[1.0, 1.0]));
        let b = tape.leaf(t(1, 2, &[0.0, 0.0]));
        let ln = tape.layer_norm_rows(x, g, b, 0.0).unwrap();
        let y = &tape.value(ln).data;
        assert!((y[0] + 1.0).abs() < 1e-12 && (y[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gather_slice_concat_fd() {
        let table = t(4, 2, &[0.3, -1.2, 0.7, 2.1, 0.5, -0.4, 1.4, 0.2]);
        fd_check(&[table], |tape, l| {
            let rows = tape.gather_rows(l[0], &[2, 0, 2]).unwrap();
            let top = tape.slice_rows(rows, 0, 2);
            let bottom = tape.slice_rows(rows, 1, 2);
            let cat = tape.concat_rows(&[top, bottom]).unwrap();
            let left = tape.slice_cols(cat, 0, 1);
            let right = tape.slice_cols(cat, 1, 1);
            let cc = tape.concat_cols(&[right, left]).unwrap();
            tape.mean_all(cc)
        }, 1e-6);
    }

    #[test]
    fn gather_rows_rejects_out_of_range() {
        let mut tape = Tape::new();
        let table = tape.leaf(t(2, 2, &[0.0, 1.0, 2.0, 3.0]));
        let err = tape.gather_rows(table, &[2]).unwrap_err();
        assert!(matches!(err, Error::TokenOutOfRange { id: 2, vocab: 2 }));
    }

    #[test]
    fn broadcast_add_row_and_mul_scalar_fd() {
        let a = t(2, 3, &[0.3, -1.2, 0.7, 2.1, 0.5, -0.4]);
        let row = t(1, 3, &[0.2, -0.8, 1.1]);
        let s = Tensor::scalar(0.7);
        fd_check(&[a, row, s], |tape, l| {
            let b = tape.broadcast_add_row(l[0], l[1]).unwrap();
            let m = tape.mul_scalar(b, l[2]).unwrap();
            tape.sum_all(m)
        }, 1e-6);
    }

    #[test]
    fn cross_entropy_matches_hand_values() {
        // equal logits over 4 classes -> loss ln 4
        let mut tape = Tape::new();
        let logits = tape.leaf(t(1, 4, &[0.5, 0.5, 0.5, 0.5]));
        let loss = tape.cross_entropy_logits(logits, 2).unwrap();
        assert!((tape.value(loss).item() - 4.0_f64.ln()).abs() < 1e-12);
        // gradient = softmax - onehot
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(logits).unwrap();
        assert!((g.data[0] - 0.25).abs() < 1e-12);
        assert!((g.data[2] + 0.75).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_fd() {
        let logits = t(1, 4, &[0.3, -1.2, 0.7, 2.1]);
        fd_check(&[logits], |tape, l| tape.cross_entropy_logits(l[0], 1).unwrap(), 1e-6);
    }

    #[test]
    fn bce_matches_hand_values_and_fd() {
        // logit 0, target 0.5 -> ln 2
        let mut tape = Tape::new();
        let logits = tape.leaf(t(1, 1, &[0.0]));
        let loss = tape.bce_with_logits(logits, &[0.5]).unwrap();
        assert!((tape.value(loss).item() - 2.0_f64.ln()).abs() < 1e-12);
        // logit 2, target 1 -> ln(1 + e^-2)
        let mut tape = Tape::new();
        let logits = tape.leaf(t(1, 1, &[2.0]));
        let loss = tape.bce_with_logits(logits, &[1.0]).unwrap();
        assert!((tape.value(loss).item() - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-12);
        let l = t(1, 3, &[0.3, -1.2, 2.1]);
        fd_check(&[l], |tape, v| tape.bce_with_logits(v[0], &[1.0, 0.0, 1.0]).unwrap(), 1e-6);
    }

    #[test]
    fn bce_rejects_target_outside_unit_interval() {
        let mut tape = Tape::new();
        let logits = tape.leaf(t(1, 1, &[0.0]));
        assert!(tape.bce_with_logits(logits, &[1.5]).is_err());
    }

    #[test]
    fn straight_through_forward_onehot_backward_identity() {
        let mut tape = Tape::new();
        let alpha = tape.leaf(t(1, 3, &[0.2, 0.9, 0.1]));
        let soft = tape.softmax_rows(alpha).unwrap();
        let hard = tape.straight_through_onehot(soft);
        assert_eq!(tape.value(hard).data, vec![0.0, 1.0, 0.0]);
        let w = tape.constant(t(1, 3, &[0.3, -0.7, 1.1]));
        let m = tape.mul(hard, w).unwrap();
        let loss = tape.sum_all(m);
        let grads = tape.backward(loss).unwrap();
        // gradient flows to alpha exactly as if the soft path were used
        let g_alpha = grads.get(alpha).unwrap().clone();
        let mut tape2 = Tape::new();
        let alpha2 = tape2.leaf(t(1, 3, &[0.2, 0.9, 0.1]));
        let soft2 = tape2.softmax_rows(alpha2).unwrap();
        let w2 = tape2.constant(t(1, 3, &[0.3, -0.7, 1.1]));
        let m2 = tape2.mul(soft2, w2).unwrap();
        let loss2 = tape2.sum_all(m2);
        let grads2 = tape2.backward(loss2).unwrap();
        let g_alpha2 = grads2.get(alpha2).unwrap();
        for (a, b) in g_alpha.data.iter().zip(&g_alpha2.data) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn straight_through_tie_breaks_to_lowest_index() {
        let mut tape = Tape::new();
        let v = tape.leaf(t(1, 4, &[0.25, 0.25, 0.25, 0.25]));
        let hard = tape.straight_through_onehot(v);
        assert_eq!(tape.value(hard).data, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar_and_consumes_tape() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        assert!(matches!(tape.backward(a), Err(Error::NonScalarLoss(_))));
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(1.0));
        tape.backward(a).unwrap();
        assert!(matches!(tape.backward(a), Err(Error::TapeConsumed)));
        // values stay readable after backward
        assert_eq!(tape.value(a).item(), 1.0);
    }

    #[test]
    fn gradient_accumulates_over_shared_subexpressions() {
        // loss = sum(a*a) -> d/da = 2a
        let mut tape = Tape::new();
        let a = tape.leaf(t(1, 2, &[3.0, -2.0]));
        let m = tape.mul(a, a).unwrap();
        let loss = tape.sum_all(m);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data, vec![6.0, -4.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(1, 2, &[1.0, 2.0]));
        let c = tape.constant(t(1, 2, &[5.0, 7.0]));
        let m = tape.mul(a, c).unwrap();
        let loss = tape.sum_all(m);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(a).unwrap().data, vec![5.0, 7.0]);
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(1, 2, &[1.0, 2.0]));
        let b = tape.leaf(t(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        assert!(matches!(tape.add(a, b), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(tape.mul(a, b), Err(Error::ShapeMismatch { .. })));
        let c = tape.leaf(t(1, 3, &[1.0, 2.0, 3.0]));
        assert!(matches!(tape.matmul(a, c), Err(Error::ShapeMismatch { .. })));
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(vals in proptest::collection::vec(-10.0f64..10.0, 6)) {
            let mut tape = Tape::new();
            let x = tape.leaf(t(2, 3, &vals));
            let sm = tape.softmax_rows(x).unwrap();
            let y = &tape.value(sm).data;
            for r in 0..2 {
                let sum: f64 = y[r * 3..(r + 1) * 3].iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-9);
                prop_assert!(y[r * 3..(r + 1) * 3].iter().all(|&p| p >= 0.0));
            }
        }

        #[test]
        fn argmax_tiebreak_is_lowest_max(vals in proptest::collection::vec(-5.0f64..5.0, 1..12)) {
            let i = argmax_tiebreak(&vals);
            let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(vals[i], max);
            prop_assert!(vals[..i].iter().all(|&v| v < max));
        }

        #[test]
        fn matmul_matches_naive(a in proptest::collection::vec(-3.0f64..3.0, 6),
                                b in proptest::collection::vec(-3.0f64..3.0, 8)) {
            // (3x2) . (2x4)
            let mut naive = vec![0.0; 12];
            for i in 0..3 {
                for j in 0..4 {
                    for p in 0..2 {
                        naive[i * 4 + j] += a[i * 2 + p] * b[p * 4 + j];
                    }
                }
            }
            let got = matmul_raw(&a, &b, 3, 2, 4);
            for (x, y) in got.iter().zip(&naive) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
