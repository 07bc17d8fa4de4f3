use super::{gemm, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryKind {
    Sigmoid,
    Tanh,
    Elu,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Binary { kind: BinaryKind, a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    AddScalar { x: Var },
    AddRow { x: Var, bias: Var },
    MulCol { x: Var, col: Var },
    Unary { kind: UnaryKind, x: Var },
    ConcatCols { a: Var, b: Var },
    SliceCols { x: Var, start: usize },
    ConcatRows { parts: Vec<Var> },
    GatherRows { x: Var, index: Vec<usize> },
    RepeatRows { x: Var, times: usize },
    Select { a: Var, b: Var, take_a: Vec<bool> },
    Reshape { x: Var },
    Softmax { x: Var },
    WeightedSum { weights: Var, values: Var },
    Sum { x: Var },
    CrossEntropy { logits: Var, targets: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    traced: bool,
}

/// Records operations in execution order so [`Tape::backward`] can replay
/// them in reverse. Inputs always precede the nodes that consume them.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to the traced leaves of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` did not reach the loss.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn lead_with(t: &Tensor, last: usize) -> Vec<usize> {
    let mut s = match t.shape().len() {
        0 => Vec::new(),
        n => t.shape()[..n - 1].to_vec(),
    };
    s.push(last);
    s
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_traced(&self, v: Var) -> bool {
        self.nodes[v.0].traced
    }

    /// Records a differentiable input (a parameter or a probe point).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            traced: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            traced: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let traced = inputs.iter().any(|v| self.nodes[v.0].traced);
        self.nodes.push(Node { value, op, traced });
        Var(self.nodes.len() - 1)
    }

    /// Matrix product over the matrix view of `a` and a 2-D `b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a * b^T`, where `b` is stored `n x k`. This is how weight matrices
    /// shaped `[out, in]` are applied to row-vector batches.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.shape().len() != 2 || ta.shape().is_empty() {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k) = (ta.rows(), ta.cols());
        let (kb, n) = if trans_b {
            (tb.shape()[1], tb.shape()[0])
        } else {
            (tb.shape()[0], tb.shape()[1])
        };
        if k != kb {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), trans_b, &mut out, false);
        let value = Tensor::new(lead_with(ta, n), out)?;
        Ok(self.push(value, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let f = match kind {
            BinaryKind::Add => |x: f64, y: f64| x + y,
            BinaryKind::Sub => |x: f64, y: f64| x - y,
            BinaryKind::Mul => |x: f64, y: f64| x * y,
        };
        let value = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)?
        } else if tb.shape().is_empty() {
            let y = tb.item();
            ta.map(|x| f(x, y))
        } else if ta.shape().is_empty() {
            let x = ta.item();
            tb.map(|y| f(x, y))
        } else {
            let op = match kind {
                BinaryKind::Add => "add",
                BinaryKind::Sub => "sub",
                BinaryKind::Mul => "hadamard",
            };
            return Err(shape_err(op, ta, tb));
        };
        Ok(self.push(value, Op::Binary { kind, a, b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    /// Elementwise product.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale { x, factor }, &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v + c);
        self.push(value, Op::AddScalar { x }, &[x])
    }

    /// Adds `bias` (length = width of `x`) to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let c = tx.cols();
        if tb.numel() != c || tb.rows() != 1 {
            return Err(shape_err("add_row", tx, tb));
        }
        let mut data = tx.data().to_vec();
        let b = tb.data();
        for row in data.chunks_exact_mut(c.max(1)) {
            for (v, &bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddRow { x, bias }, &[x, bias]))
    }

    /// Scales row `r` of `x` by `col[r]`.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let (tx, tc) = (self.value(x), self.value(col));
        if tc.numel() != tx.rows() {
            return Err(shape_err("mul_col", tx, tc));
        }
        let c = tx.cols();
        let mut data = tx.data().to_vec();
        for (r, &s) in tc.data().iter().enumerate() {
            data[r * c..(r + 1) * c].iter_mut().for_each(|v| *v *= s);
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::MulCol { x, col }, &[x, col]))
    }

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Var {
        let value = match kind {
            UnaryKind::Sigmoid => self.value(x).map(super::sigmoid),
            UnaryKind::Tanh => self.value(x).map(f64::tanh),
            UnaryKind::Elu => self.value(x).map(super::elu),
        };
        self.push(value, Op::Unary { kind, x }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Tanh, x)
    }

    pub fn elu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Elu, x)
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).concat(self.value(b))?;
        Ok(self.push(value, Op::ConcatCols { a, b }, &[a, b]))
    }

    /// Columns `start..start + len` of the matrix view.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        if start + len > c {
            return Err(TensorError::Domain {
                op: "slice_cols",
                msg: format!("columns {}..{} out of width {}", start, start + len, c),
            });
        }
        let mut data = Vec::with_capacity(tx.rows() * len);
        for r in 0..tx.rows() {
            data.extend_from_slice(&tx.row(r)[start..start + len]);
        }
        let value = Tensor::new(lead_with(tx, len), data)?;
        Ok(self.push(value, Op::SliceCols { x, start }, &[x]))
    }

    /// Stacks matrices vertically; all parts must share a width.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| TensorError::Domain {
            op: "concat_rows",
            msg: "no parts".into(),
        })?;
        let c = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != c {
                return Err(shape_err("concat_rows", self.value(*first), t));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(vec![rows, c], data)?;
        Ok(self.push(value, Op::ConcatRows { parts: parts.to_vec() }, parts))
    }

    /// Row `i` of the result is row `index[i]` of `x`.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = (tx.rows(), tx.cols());
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            if i >= r {
                return Err(TensorError::Domain {
                    op: "gather_rows",
                    msg: format!("row {} out of range for {} rows", i, r),
                });
            }
            data.extend_from_slice(tx.row(i));
        }
        let value = Tensor::new(vec![index.len(), c], data)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            &[x],
        ))
    }

    /// Repeats each row of `x` `times` times consecutively.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        let mut data = Vec::with_capacity(tx.numel() * times);
        for r in 0..tx.rows() {
            for _ in 0..times {
                data.extend_from_slice(tx.row(r));
            }
        }
        let value = Tensor::new(vec![tx.rows() * times, c], data)?;
        Ok(self.push(value, Op::RepeatRows { x, times }, &[x]))
    }

    /// Row-wise choice: row `r` comes from `a` when `take_a[r]`, else from `b`.
    /// No arithmetic is performed, so unselected rows are copied bit-exactly.
    pub fn select_rows(&mut self, a: Var, b: Var, take_a: &[bool]) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() || take_a.len() != ta.rows() {
            return Err(shape_err("select_rows", ta, tb));
        }
        let mut data = Vec::with_capacity(ta.numel());
        for (r, &pick) in take_a.iter().enumerate() {
            data.extend_from_slice(if pick { ta.row(r) } else { tb.row(r) });
        }
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(
            value,
            Op::Select {
                a,
                b,
                take_a: take_a.to_vec(),
            },
            &[a, b],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    /// Row-wise softmax with max subtraction. Positions where `mask` is
    /// `false` are excluded (as if their logit were negative infinity) and
    /// come out as exact zeros.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = (tx.rows(), tx.cols());
        if let Some(m) = mask {
            if m.len() != tx.numel() {
                return Err(TensorError::Domain {
                    op: "softmax",
                    msg: format!("mask of length {} for {:?}", m.len(), tx.shape()),
                });
            }
        }
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = tx.row(i);
            let keep = |j: usize| mask.is_none_or(|m| m[i * c + j]);
            let mut max = f64::NEG_INFINITY;
            let mut any = false;
            for (j, &v) in row.iter().enumerate() {
                if keep(j) {
                    max = max.max(v);
                    any = true;
                }
            }
            if !any {
                return Err(TensorError::Domain {
                    op: "softmax",
                    msg: "empty input".into(),
                });
            }
            let out = &mut data[i * c..(i + 1) * c];
            let mut sum = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if keep(j) {
                    let e = (v - max).exp();
                    out[j] = e;
                    sum += e;
                }
            }
            out.iter_mut().for_each(|v| *v /= sum);
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        // Masked outputs are exact zeros, so the backward rule needs no mask.
        Ok(self.push(value, Op::Softmax { x }, &[x]))
    }

    /// Grouped convex combination: `weights` is `[B, L]`, `values` has `B*L`
    /// rows, and output row `b` is `sum_l weights[b, l] * values[b*L + l]`.
    pub fn weighted_sum(&mut self, weights: Var, values: Var) -> Result<Var> {
        let (tw, tv) = (self.value(weights), self.value(values));
        let (b, l) = (tw.rows(), tw.cols());
        if tv.rows() != b * l {
            return Err(shape_err("weighted_sum", tw, tv));
        }
        let d = tv.cols();
        let mut data = vec![0.0; b * d];
        for g in 0..b {
            let out = &mut data[g * d..(g + 1) * d];
            for j in 0..l {
                let w = tw.at(g, j);
                if w == 0.0 {
                    continue;
                }
                for (o, &v) in out.iter_mut().zip(tv.row(g * l + j)) {
                    *o += w * v;
                }
            }
        }
        let value = Tensor::new(vec![b, d], data)?;
        Ok(self.push(value, Op::WeightedSum { weights, values }, &[weights, values]))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum { x }, &[x])
    }

    /// Mean softmax cross-entropy of `logits` rows against class `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (b, a) = (tl.rows(), tl.cols());
        if targets.len() != b || b == 0 {
            return Err(TensorError::Domain {
                op: "cross_entropy",
                msg: format!("{} targets for {} rows", targets.len(), b),
            });
        }
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= a {
                return Err(TensorError::Domain {
                    op: "cross_entropy",
                    msg: format!("target {} out of {} classes", t, a),
                });
            }
            let row = tl.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let value = Tensor::scalar(total / b as f64);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar `loss`. Each recorded node is visited at
    /// most once; only traced leaves keep their gradient in the result.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        if self.nodes[loss.0].traced {
            grads[loss.0] = Some(Tensor::ones(lt.shape()));
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.traced || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> Option<&'g mut [f64]> {
        if !self.nodes[v.0].traced {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[v.0].value.shape()));
        }
        slot.as_mut().map(Tensor::data_mut)
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.rows(), ta.cols());
                let n = y.cols();
                if let Some(ga) = self.acc(grads, *a) {
                    // dA = dC * op(B)^T
                    gemm(m, n, k, gd, false, tb.data(), !trans_b, ga, true);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    if *trans_b {
                        // B is n x k: dB = dC^T * A
                        gemm(n, m, k, gd, true, ta.data(), false, gb, true);
                    } else {
                        // B is k x n: dB = A^T * dC
                        gemm(k, m, n, ta.data(), true, gd, false, gb, true);
                    }
                }
            }
            Op::Binary { kind, a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let same = ta.shape() == tb.shape();
                let ga_rule = |i: usize| match kind {
                    BinaryKind::Add | BinaryKind::Sub => gd[i],
                    BinaryKind::Mul => gd[i] * if same || tb.numel() > 1 { tb.data()[i] } else { tb.item() },
                };
                if let Some(ga) = self.acc(grads, *a) {
                    if ga.len() == gd.len() {
                        for (i, v) in ga.iter_mut().enumerate() {
                            *v += ga_rule(i);
                        }
                    } else {
                        ga[0] += (0..gd.len()).map(ga_rule).sum::<f64>();
                    }
                }
                let gb_rule = |i: usize| match kind {
                    BinaryKind::Add => gd[i],
                    BinaryKind::Sub => -gd[i],
                    BinaryKind::Mul => gd[i] * if same || ta.numel() > 1 { ta.data()[i] } else { ta.item() },
                };
                if let Some(gb) = self.acc(grads, *b) {
                    if gb.len() == gd.len() {
                        for (i, v) in gb.iter_mut().enumerate() {
                            *v += gb_rule(i);
                        }
                    } else {
                        gb[0] += (0..gd.len()).map(gb_rule).sum::<f64>();
                    }
                }
            }
            Op::Scale { x, factor } => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(gd).for_each(|(v, &d)| *v += d * factor);
                }
            }
            Op::AddScalar { x } | Op::Reshape { x } => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(gd).for_each(|(v, &d)| *v += d);
                }
            }
            Op::AddRow { x, bias } => {
                let c = y.cols().max(1);
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(gd).for_each(|(v, &d)| *v += d);
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    for row in gd.chunks_exact(c) {
                        gb.iter_mut().zip(row).for_each(|(v, &d)| *v += d);
                    }
                }
            }
            Op::MulCol { x, col } => {
                let (tx, tc) = (self.value(*x), self.value(*col));
                let c = tx.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, &s) in tc.data().iter().enumerate() {
                        for j in r * c..(r + 1) * c {
                            gx[j] += gd[j] * s;
                        }
                    }
                }
                if let Some(gc) = self.acc(grads, *col) {
                    for (r, v) in gc.iter_mut().enumerate() {
                        let span = r * c..(r + 1) * c;
                        *v += gd[span.clone()]
                            .iter()
                            .zip(&tx.data()[span])
                            .map(|(d, xv)| d * xv)
                            .sum::<f64>();
                    }
                }
            }
            Op::Unary { kind, x } => {
                let yd = y.data();
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..gx.len() {
                        let dy = match kind {
                            UnaryKind::Sigmoid => yd[i] * (1.0 - yd[i]),
                            UnaryKind::Tanh => 1.0 - yd[i] * yd[i],
                            UnaryKind::Elu => {
                                if yd[i] >= 0.0 {
                                    1.0
                                } else {
                                    yd[i] + 1.0
                                }
                            }
                        };
                        gx[i] += gd[i] * dy;
                    }
                }
            }
            Op::ConcatCols { a, b } => {
                let ca = self.value(*a).cols();
                let cb = self.value(*b).cols();
                let c = ca + cb;
                let rows = y.rows();
                if let Some(ga) = self.acc(grads, *a) {
                    for r in 0..rows {
                        for j in 0..ca {
                            ga[r * ca + j] += gd[r * c + j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for r in 0..rows {
                        for j in 0..cb {
                            gb[r * cb + j] += gd[r * c + ca + j];
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let cx = self.value(*x).cols();
                let len = y.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..y.rows() {
                        for j in 0..len {
                            gx[r * cx + start + j] += gd[r * len + j];
                        }
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if let Some(gp) = self.acc(grads, p) {
                        gp.iter_mut()
                            .zip(&gd[offset..offset + n])
                            .for_each(|(v, &d)| *v += d);
                    }
                    offset += n;
                }
            }
            Op::GatherRows { x, index } => {
                let c = y.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for (i, &src) in index.iter().enumerate() {
                        for j in 0..c {
                            gx[src * c + j] += gd[i * c + j];
                        }
                    }
                }
            }
            Op::RepeatRows { x, times } => {
                let c = y.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, row) in gx.chunks_exact_mut(c.max(1)).enumerate() {
                        for t in 0..*times {
                            let src = &gd[(r * times + t) * c..(r * times + t + 1) * c];
                            row.iter_mut().zip(src).for_each(|(v, &d)| *v += d);
                        }
                    }
                }
            }
            Op::Select { a, b, take_a } => {
                let c = y.cols();
                for (target, want) in [(*a, true), (*b, false)] {
                    if let Some(gt) = self.acc(grads, target) {
                        for (r, &pick) in take_a.iter().enumerate() {
                            if pick == want {
                                for j in r * c..(r + 1) * c {
                                    gt[j] += gd[j];
                                }
                            }
                        }
                    }
                }
            }
            Op::Softmax { x } => {
                let c = y.cols();
                let yd = y.data();
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..y.rows() {
                        let span = r * c..(r + 1) * c;
                        let dot: f64 = yd[span.clone()].iter().zip(&gd[span.clone()]).map(|(a, b)| a * b).sum();
                        for j in span {
                            gx[j] += yd[j] * (gd[j] - dot);
                        }
                    }
                }
            }
            Op::WeightedSum { weights, values } => {
                let (tw, tv) = (self.value(*weights), self.value(*values));
                let (b, l) = (tw.rows(), tw.cols());
                let d = tv.cols();
                if let Some(gw) = self.acc(grads, *weights) {
                    for g in 0..b {
                        let go = &gd[g * d..(g + 1) * d];
                        for j in 0..l {
                            gw[g * l + j] += go.iter().zip(tv.row(g * l + j)).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
                if let Some(gv) = self.acc(grads, *values) {
                    for g in 0..b {
                        let go = &gd[g * d..(g + 1) * d];
                        for j in 0..l {
                            let w = tw.at(g, j);
                            let row = &mut gv[(g * l + j) * d..(g * l + j + 1) * d];
                            row.iter_mut().zip(go).for_each(|(v, &o)| *v += w * o);
                        }
                    }
                }
            }
            Op::Sum { x } => {
                let s = gd[0];
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|v| *v += s);
                }
            }
            Op::CrossEntropy { logits, targets } => {
                let tl = self.value(*logits);
                let a = tl.cols();
                let scale = gd[0] / targets.len() as f64;
                if let Some(gl) = self.acc(grads, *logits) {
                    for (i, &t) in targets.iter().enumerate() {
                        let p = super::softmax_slice(tl.row(i));
                        for j in 0..a {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[i * a + j] += scale * (p[j] - onehot);
                        }
                    }
                }
            }
        }
    }
}
