//! Operation tape for reverse-mode differentiation.
//!
//! Every tensor that participates in a differentiable computation lives on a
//! [`Tape`]: leaves are registered explicitly, each operation appends one node
//! holding its input ids, and [`Tape::backward`] replays the nodes in reverse
//! to accumulate exactly one gradient per recorded tensor.

use super::{Result, Tensor, TensorError};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Sigmoid,
    Tanh,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

/// How the second operand of an element-wise binary op maps onto the first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    /// Identical shapes.
    Same,
    /// b is 1 x cols: repeated down the rows.
    Row,
    /// b is rows x 1: repeated across the columns.
    Col,
    /// b is 1 x 1.
    Scalar,
}

enum Op {
    Leaf,
    Matmul {
        a: usize,
        b: usize,
    },
    Transpose {
        a: usize,
    },
    ConcatRows {
        parts: Vec<usize>,
    },
    ConcatCols {
        parts: Vec<usize>,
    },
    SliceCols {
        a: usize,
        start: usize,
    },
    Unary {
        kind: UnaryKind,
        a: usize,
    },
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
        bcast: Broadcast,
    },
    /// out = mul * a + add (element-wise); only the slope matters backward.
    Affine {
        a: usize,
        mul: f64,
    },
    SoftmaxRows {
        a: usize,
    },
    Reduce {
        kind: ReduceKind,
        a: usize,
    },
    Reshape {
        a: usize,
    },
    /// Fused per-row layer normalization; saves x-hat and 1/std for backward.
    LayerNorm {
        x: usize,
        gain: usize,
        offset: usize,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    /// Fused mean cross-entropy over rows; saves the row softmax.
    SoftmaxXent {
        logits: usize,
        targets: Vec<usize>,
        probs: Tensor,
    },
}

/// Recorded computation: `vals[i]` is the output of `nodes[i]`.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Op>,
    vals: Vec<Tensor>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; zeros if `v` never reached the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(t) => t.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }

    /// None if no gradient flowed to `v`.
    pub fn get_opt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
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

    /// Register an input tensor. Gradients are reported for every leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.vals[v.0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.vals[v.0].shape()
    }

    fn push(&mut self, op: Op, val: Tensor) -> Var {
        self.nodes.push(op);
        self.vals.push(val);
        Var(self.vals.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(TensorError::Dim {
                op: "matmul",
                lhs: (ar, ac),
                rhs: (br, bc),
            });
        }
        let out = Tensor::matmul_nn(&self.vals[a.0], &self.vals[b.0]);
        Ok(self.push(Op::Matmul { a: a.0, b: b.0 }, out))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.vals[a.0].transposed();
        self.push(Op::Transpose { a: a.0 }, out)
    }

    pub fn concat(&mut self, axis: Axis, a: Var, b: Var) -> Result<Var> {
        match axis {
            Axis::Rows => self.concat_rows(&[a, b]),
            Axis::Cols => self.concat_cols(&[a, b]),
        }
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty());
        let (_, cols) = self.shape(parts[0]);
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.1 != cols {
                return Err(TensorError::Dim {
                    op: "concat(rows)",
                    lhs: self.shape(parts[0]),
                    rhs: s,
                });
            }
            rows += s.0;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.vals[p.0].data());
        }
        let out = Tensor::new(rows, cols, data);
        let parts = parts.iter().map(|v| v.0).collect();
        Ok(self.push(Op::ConcatRows { parts }, out))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty());
        let (rows, _) = self.shape(parts[0]);
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.0 != rows {
                return Err(TensorError::Dim {
                    op: "concat(cols)",
                    lhs: self.shape(parts[0]),
                    rhs: s,
                });
            }
            cols += s.1;
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut at = 0;
        for &p in parts {
            let t = &self.vals[p.0];
            let w = t.cols();
            for r in 0..rows {
                out.data_mut()[r * cols + at..r * cols + at + w]
                    .copy_from_slice(t.row_slice(r));
            }
            at += w;
        }
        let parts = parts.iter().map(|v| v.0).collect();
        Ok(self.push(Op::ConcatCols { parts }, out))
    }

    pub fn split_cols(&mut self, a: Var, widths: &[usize]) -> Result<Vec<Var>> {
        let (rows, cols) = self.shape(a);
        let total: usize = widths.iter().sum();
        if total != cols {
            return Err(TensorError::Dim {
                op: "split_cols",
                lhs: (rows, cols),
                rhs: (1, total),
            });
        }
        let mut out = Vec::with_capacity(widths.len());
        let mut start = 0;
        for &w in widths {
            let mut part = Tensor::zeros(rows, w);
            for r in 0..rows {
                let src = &self.vals[a.0].row_slice(r)[start..start + w];
                part.data_mut()[r * w..(r + 1) * w].copy_from_slice(src);
            }
            out.push(self.push(Op::SliceCols { a: a.0, start }, part));
            start += w;
        }
        Ok(out)
    }

    pub fn ew_unary(&mut self, kind: UnaryKind, a: Var) -> Var {
        let mut out = self.vals[a.0].clone();
        for v in out.data_mut() {
            *v = match kind {
                UnaryKind::Sigmoid => 1.0 / (1.0 + (-*v).exp()),
                UnaryKind::Tanh => v.tanh(),
                UnaryKind::Relu => v.max(0.0),
            };
        }
        self.push(Op::Unary { kind, a: a.0 }, out)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.ew_unary(UnaryKind::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.ew_unary(UnaryKind::Tanh, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.ew_unary(UnaryKind::Relu, a)
    }

    fn broadcast_of(&self, a: Var, b: Var) -> Result<Broadcast> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if (br, bc) == (ar, ac) {
            Ok(Broadcast::Same)
        } else if (br, bc) == (1, 1) {
            Ok(Broadcast::Scalar)
        } else if br == 1 && bc == ac {
            Ok(Broadcast::Row)
        } else if bc == 1 && br == ar {
            Ok(Broadcast::Col)
        } else {
            Err(TensorError::Dim {
                op: "ew_binary",
                lhs: (ar, ac),
                rhs: (br, bc),
            })
        }
    }

    pub fn ew_binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let bcast = self.broadcast_of(a, b)?;
        let (rows, cols) = self.shape(a);
        let av = &self.vals[a.0];
        let bv = &self.vals[b.0];
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let arow = av.row_slice(r);
            let orow = &mut out.data_mut()[r * cols..(r + 1) * cols];
            match bcast {
                Broadcast::Same => {
                    let brow = bv.row_slice(r);
                    for ((o, &x), &y) in orow.iter_mut().zip(arow).zip(brow) {
                        *o = apply_binary(kind, x, y);
                    }
                }
                Broadcast::Row => {
                    let brow = bv.row_slice(0);
                    for ((o, &x), &y) in orow.iter_mut().zip(arow).zip(brow) {
                        *o = apply_binary(kind, x, y);
                    }
                }
                Broadcast::Col => {
                    let y = bv.get(r, 0);
                    for (o, &x) in orow.iter_mut().zip(arow) {
                        *o = apply_binary(kind, x, y);
                    }
                }
                Broadcast::Scalar => {
                    let y = bv.get(0, 0);
                    for (o, &x) in orow.iter_mut().zip(arow) {
                        *o = apply_binary(kind, x, y);
                    }
                }
            }
        }
        Ok(self.push(
            Op::Binary {
                kind,
                a: a.0,
                b: b.0,
                bcast,
            },
            out,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ew_binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ew_binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ew_binary(BinaryKind::Mul, a, b)
    }

    pub fn affine(&mut self, a: Var, mul: f64, add: f64) -> Var {
        let mut out = self.vals[a.0].clone();
        for v in out.data_mut() {
            *v = mul * *v + add;
        }
        self.push(Op::Affine { a: a.0, mul }, out)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        self.affine(a, 1.0, c)
    }

    /// Row-wise softmax, computed max-shifted for overflow safety.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (rows, cols) = self.shape(a);
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let row = self.vals[a.0].row_slice(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out.data_mut()[r * cols..(r + 1) * cols];
            let mut sum = 0.0;
            for (o, &x) in orow.iter_mut().zip(row) {
                *o = (x - max).exp();
                sum += *o;
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        self.push(Op::SoftmaxRows { a: a.0 }, out)
    }

    pub fn reduce(&mut self, kind: ReduceKind, a: Var) -> Var {
        let v = &self.vals[a.0];
        let sum: f64 = v.data().iter().sum();
        let out = match kind {
            ReduceKind::Sum => sum,
            ReduceKind::Mean => sum / v.len() as f64,
        };
        self.push(Op::Reduce { kind, a: a.0 }, Tensor::new(1, 1, vec![out]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.reduce(ReduceKind::Sum, a)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        self.reduce(ReduceKind::Mean, a)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let t = &self.vals[a.0];
        if t.len() != rows * cols {
            return Err(TensorError::Dim {
                op: "reshape",
                lhs: t.shape(),
                rhs: (rows, cols),
            });
        }
        let out = Tensor::new(rows, cols, t.data().to_vec());
        Ok(self.push(Op::Reshape { a: a.0 }, out))
    }

    /// Per-row normalization over the columns (population variance),
    /// then an element-wise gain and offset, both 1 x cols.
    pub fn layer_norm(&mut self, x: Var, gain: Var, offset: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        for (name, v) in [("gain", gain), ("offset", offset)] {
            let s = self.shape(v);
            if s != (1, cols) {
                let _ = name;
                return Err(TensorError::Dim {
                    op: "layer_norm",
                    lhs: (rows, cols),
                    rhs: s,
                });
            }
        }
        let xv = &self.vals[x.0];
        let g = self.vals[gain.0].clone();
        let o = self.vals[offset.0].clone();
        let mut xhat = Tensor::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let row = xv.row_slice(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (c, &xv) in row.iter().enumerate() {
                let xh = (xv - mean) * is;
                xhat.set(r, c, xh);
                out.set(r, c, xh * g.get(0, c) + o.get(0, c));
            }
        }
        Ok(self.push(
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                offset: offset.0,
                xhat,
                inv_std,
            },
            out,
        ))
    }

    /// Mean over rows of -log softmax(logits)[target]. Scalar output.
    pub fn softmax_xent(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, cols) = self.shape(logits);
        if targets.len() != rows {
            return Err(TensorError::Contract(format!(
                "softmax_xent: {} targets for {} rows",
                targets.len(),
                rows
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(TensorError::Contract(format!(
                "softmax_xent: target {} out of range for {} classes",
                bad, cols
            )));
        }
        let lv = &self.vals[logits.0];
        let mut probs = Tensor::zeros(rows, cols);
        let mut loss = 0.0;
        for r in 0..rows {
            let row = lv.row_slice(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            let prow = &mut probs.data_mut()[r * cols..(r + 1) * cols];
            for (p, &x) in prow.iter_mut().zip(row) {
                *p = (x - max).exp();
                sum += *p;
            }
            for p in prow.iter_mut() {
                *p /= sum;
            }
            // lse - logit[target], with the shift cancelling.
            loss += sum.ln() - (row[targets[r]] - max);
        }
        loss /= rows as f64;
        Ok(self.push(
            Op::SoftmaxXent {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
            },
            Tensor::new(1, 1, vec![loss]),
        ))
    }

    /// Reverse pass from a scalar loss. Returns one gradient per recorded var;
    /// leaves that never reach the loss get zeros from [`Gradients::get`].
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.vals[loss.0].shape() != (1, 1) {
            return Err(TensorError::Contract(format!(
                "backward: loss must be scalar, got {:?}",
                self.vals[loss.0].shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.vals.len()];
        grads[loss.0] = Some(Tensor::new(1, 1, vec![1.0]));

        for i in (0..self.nodes.len()).rev() {
            let g = match &grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            match &self.nodes[i] {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let da = Tensor::matmul_nt(&g, &self.vals[*b]);
                    let db = Tensor::matmul_tn(&self.vals[*a], &g);
                    accumulate(&mut grads[*a], da);
                    accumulate(&mut grads[*b], db);
                }
                Op::Transpose { a } => {
                    accumulate(&mut grads[*a], g.transposed());
                }
                Op::ConcatRows { parts } => {
                    let cols = g.cols();
                    let mut at = 0;
                    for &p in parts {
                        let pr = self.vals[p].rows();
                        let part = Tensor::new(
                            pr,
                            cols,
                            g.data()[at * cols..(at + pr) * cols].to_vec(),
                        );
                        accumulate(&mut grads[p], part);
                        at += pr;
                    }
                }
                Op::ConcatCols { parts } => {
                    let rows = g.rows();
                    let mut at = 0;
                    for &p in parts {
                        let pc = self.vals[p].cols();
                        let mut part = Tensor::zeros(rows, pc);
                        for r in 0..rows {
                            part.data_mut()[r * pc..(r + 1) * pc]
                                .copy_from_slice(&g.row_slice(r)[at..at + pc]);
                        }
                        accumulate(&mut grads[p], part);
                        at += pc;
                    }
                }
                Op::SliceCols { a, start } => {
                    let (rows, cols) = self.vals[*a].shape();
                    let w = g.cols();
                    let mut da = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        da.data_mut()[r * cols + start..r * cols + start + w]
                            .copy_from_slice(g.row_slice(r));
                    }
                    accumulate(&mut grads[*a], da);
                }
                Op::Unary { kind, a } => {
                    let y = &self.vals[i];
                    let mut da = g.clone();
                    for (d, &yv) in da.data_mut().iter_mut().zip(y.data()) {
                        *d *= match kind {
                            UnaryKind::Sigmoid => yv * (1.0 - yv),
                            UnaryKind::Tanh => 1.0 - yv * yv,
                            UnaryKind::Relu => {
                                if yv > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                    }
                    accumulate(&mut grads[*a], da);
                }
                Op::Binary { kind, a, b, bcast } => {
                    let (da, db) = binary_backward(
                        *kind,
                        *bcast,
                        &g,
                        &self.vals[*a],
                        &self.vals[*b],
                    );
                    accumulate(&mut grads[*a], da);
                    accumulate(&mut grads[*b], db);
                }
                Op::Affine { a, mul } => {
                    let mut da = g.clone();
                    for d in da.data_mut() {
                        *d *= mul;
                    }
                    accumulate(&mut grads[*a], da);
                }
                Op::SoftmaxRows { a } => {
                    let p = &self.vals[i];
                    let (rows, cols) = p.shape();
                    let mut da = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        let prow = p.row_slice(r);
                        let grow = g.row_slice(r);
                        let dot: f64 = prow.iter().zip(grow).map(|(x, y)| x * y).sum();
                        let drow = &mut da.data_mut()[r * cols..(r + 1) * cols];
                        for ((d, &pv), &gv) in drow.iter_mut().zip(prow).zip(grow) {
                            *d = pv * (gv - dot);
                        }
                    }
                    accumulate(&mut grads[*a], da);
                }
                Op::Reduce { kind, a } => {
                    let (rows, cols) = self.vals[*a].shape();
                    let gv = g.get(0, 0);
                    let fill = match kind {
                        ReduceKind::Sum => gv,
                        ReduceKind::Mean => gv / (rows * cols) as f64,
                    };
                    accumulate(&mut grads[*a], Tensor::filled(rows, cols, fill));
                }
                Op::Reshape { a } => {
                    let (rows, cols) = self.vals[*a].shape();
                    accumulate(
                        &mut grads[*a],
                        Tensor::new(rows, cols, g.data().to_vec()),
                    );
                }
                Op::LayerNorm {
                    x,
                    gain,
                    offset,
                    xhat,
                    inv_std,
                } => {
                    let (rows, cols) = xhat.shape();
                    let gv = &self.vals[*gain];
                    let mut dx = Tensor::zeros(rows, cols);
                    let mut dgain = Tensor::zeros(1, cols);
                    let mut doffset = Tensor::zeros(1, cols);
                    for (r, &is) in inv_std.iter().enumerate().take(rows) {
                        let grow = g.row_slice(r);
                        let xrow = xhat.row_slice(r);
                        let mut dxhat = vec![0.0; cols];
                        for c in 0..cols {
                            dxhat[c] = grow[c] * gv.get(0, c);
                            dgain.data_mut()[c] += grow[c] * xrow[c];
                            doffset.data_mut()[c] += grow[c];
                        }
                        let mean_dxhat: f64 = dxhat.iter().sum::<f64>() / cols as f64;
                        let mean_dx_xhat: f64 = dxhat
                            .iter()
                            .zip(xrow)
                            .map(|(d, xh)| d * xh)
                            .sum::<f64>()
                            / cols as f64;
                        let drow = &mut dx.data_mut()[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            drow[c] = is * (dxhat[c] - mean_dxhat - xrow[c] * mean_dx_xhat);
                        }
                    }
                    accumulate(&mut grads[*x], dx);
                    accumulate(&mut grads[*gain], dgain);
                    accumulate(&mut grads[*offset], doffset);
                }
                Op::SoftmaxXent {
                    logits,
                    targets,
                    probs,
                } => {
                    let (rows, cols) = probs.shape();
                    let scale = g.get(0, 0) / rows as f64;
                    let mut da = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        da.data_mut()[r * cols + t] -= 1.0;
                    }
                    for d in da.data_mut() {
                        *d *= scale;
                    }
                    accumulate(&mut grads[*logits], da);
                }
            }
        }

        let shapes = self.vals.iter().map(|t| t.shape()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn apply_binary(kind: BinaryKind, x: f64, y: f64) -> f64 {
    match kind {
        BinaryKind::Add => x + y,
        BinaryKind::Sub => x - y,
        BinaryKind::Mul => x * y,
    }
}

fn binary_backward(
    kind: BinaryKind,
    bcast: Broadcast,
    g: &Tensor,
    a: &Tensor,
    b: &Tensor,
) -> (Tensor, Tensor) {
    let (rows, cols) = a.shape();
    // db entries sum over the broadcast axis; da keeps a's shape.
    let mut da = Tensor::zeros(rows, cols);
    let mut db = Tensor::zeros(b.rows(), b.cols());
    for r in 0..rows {
        let grow = g.row_slice(r);
        let arow = a.row_slice(r);
        for c in 0..cols {
            let bv = match bcast {
                Broadcast::Same => b.get(r, c),
                Broadcast::Row => b.get(0, c),
                Broadcast::Col => b.get(r, 0),
                Broadcast::Scalar => b.get(0, 0),
            };
            let (ga, gb) = match kind {
                BinaryKind::Add => (grow[c], grow[c]),
                BinaryKind::Sub => (grow[c], -grow[c]),
                BinaryKind::Mul => (grow[c] * bv, grow[c] * arow[c]),
            };
            da.set(r, c, ga);
            match bcast {
                Broadcast::Same => db.data_mut()[r * cols + c] += gb,
                Broadcast::Row => db.data_mut()[c] += gb,
                Broadcast::Col => db.data_mut()[r] += gb,
                Broadcast::Scalar => db.data_mut()[0] += gb,
            }
        }
    }
    (da, db)
}

fn accumulate(slot: &mut Option<Tensor>, contrib: Tensor) {
    match slot {
        Some(t) => t.add_assign(&contrib),
        None => *slot = Some(contrib),
    }
}

/// Central-difference gradient of `f` at `theta`: (f(t+eps e) - f(t-eps e)) / 2eps
/// per coordinate. The verification oracle for [`Tape::backward`].
pub fn finite_diff_grad<F>(mut f: F, theta: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if eps <= 0.0 {
        return Err(TensorError::Contract(format!(
            "finite_diff_grad: eps must be positive, got {eps}"
        )));
    }
    let mut work = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = work[i];
        work[i] = orig + eps;
        let up = f(&work)?;
        work[i] = orig - eps;
        let down = f(&work)?;
        work[i] = orig;
        grad.push((up - down) / (2.0 * eps));
    }
    Ok(grad)
}

/// Max relative error between two gradient vectors:
/// |g1 - g2| / max(1e-8, |g1| + |g2|), maximized over coordinates.
pub fn max_rel_error(g1: &[f64], g2: &[f64]) -> f64 {
    assert_eq!(g1.len(), g2.len());
    g1.iter()
        .zip(g2)
        .map(|(a, b)| (a - b).abs() / f64::max(1e-8, a.abs() + b.abs()))
        .fold(0.0, f64::max)
}
