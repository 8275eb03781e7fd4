//! Reverse-mode tape.
//!
//! Every op appends one node holding its forward value and enough saved state
//! for the vector-Jacobian product. Nodes are only ever appended, so the tape
//! is topologically ordered by construction and backward is a single reverse
//! sweep. All tensors on the tape are treated as matrices (`[rows, cols]`);
//! scalars are `[1, 1]`.

use crate::error::{bail, Result};
use crate::tensor::{matmul_into, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    MatMulBT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    ScaleBy(Var, Var),
    Recip(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    SoftmaxRows(Var),
    CausalSoftmax(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Rows {
        x: Var,
        start: usize,
    },
    Cols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Log {
        x: Var,
        floor: S,
    },
    Sum(Var),
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<S>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    rows: usize,
    cols: usize,
    op: Op<S>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
    visited: usize,
}

impl<S: Scalar> Gradients<S> {
    /// Raw gradient buffer, `None` when the node did not influence the loss.
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient with respect to `v`, zero-filled when `v` was unreachable.
    pub fn wrt(&self, tape: &Tape<S>, v: Var) -> Tensor<S> {
        let shape = tape.value(v).shape().to_vec();
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    /// Number of tape nodes the reverse sweep passed over.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

#[derive(Debug, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

fn check_finite<S: Scalar>(data: &[S], op: &str) -> Result<()> {
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        bail!(Numeric, "{op} produced a non-finite value at element {pos}");
    }
    Ok(())
}

fn accumulate<S: Scalar>(slot: &mut Option<Vec<S>>, len: usize) -> &mut Vec<S> {
    slot.get_or_insert_with(|| vec![S::zero(); len])
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Result<Var> {
        let (rows, cols) = value.dims2()?;
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_computed(
        &mut self,
        shape: Vec<usize>,
        data: Vec<S>,
        op: Op<S>,
        inputs: &[Var],
        name: &str,
    ) -> Result<Var> {
        check_finite(&data, name)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let value = Tensor::new(shape, data)?;
        self.push(value, op, requires_grad)
    }

    fn data(&self, v: Var) -> &[S] {
        self.nodes[v.0].value.data()
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Result<Var> {
        check_finite(value.data(), "leaf")?;
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let (n2, p) = self.dims(b);
        if n != n2 {
            bail!(Dimension, "matmul inner dimensions {m}x{n} · {n2}x{p}");
        }
        let mut out = vec![S::zero(); m * p];
        matmul_into(self.data(a), self.data(b), &mut out, m, n, p);
        self.push_computed(vec![m, p], out, Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let (p, n2) = self.dims(b);
        if n != n2 {
            bail!(Dimension, "matmul_bt inner dimensions {m}x{n} · ({p}x{n2})ᵀ");
        }
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![S::zero(); m * p];
        for i in 0..m {
            let ar = &ad[i * n..(i + 1) * n];
            for j in 0..p {
                let br = &bd[j * n..(j + 1) * n];
                out[i * p + j] = ar.iter().zip(br).map(|(&x, &y)| x * y).sum();
            }
        }
        self.push_computed(vec![m, p], out, Op::MatMulBT(a, b), &[a, b], "matmul_bt")
    }

    fn same_dims(&self, a: Var, b: Var, op: &str) -> Result<(usize, usize)> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            bail!(Dimension, "{op}: shapes {da:?} and {db:?} differ");
        }
        Ok(da)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_dims(a, b, "add")?;
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        self.push_computed(vec![r, c], out, Op::Add(a, b), &[a, b], "add")
    }

    /// Adds a `1×n` row to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.dims(row) != (1, n) {
            bail!(Dimension, "add_row: row {:?} vs matrix {m}x{n}", self.dims(row));
        }
        let rd = self.data(row);
        let out = self
            .data(a)
            .chunks(n)
            .flat_map(|r| r.iter().zip(rd).map(|(&x, &y)| x + y))
            .collect();
        self.push_computed(vec![m, n], out, Op::AddRow(a, row), &[a, row], "add_row")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_dims(a, b, "mul")?;
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        self.push_computed(vec![r, c], out, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, a: Var, c: S) -> Result<Var> {
        let (r, k) = self.dims(a);
        let out = self.data(a).iter().map(|&x| x * c).collect();
        self.push_computed(vec![r, k], out, Op::Scale(a, c), &[a], "scale")
    }

    /// Multiplies every element of `a` by the `1×1` variable `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.dims(s) != (1, 1) {
            bail!(Dimension, "scale_by needs a 1x1 factor, got {:?}", self.dims(s));
        }
        let (r, k) = self.dims(a);
        let c = self.data(s)[0];
        let out = self.data(a).iter().map(|&x| x * c).collect();
        self.push_computed(vec![r, k], out, Op::ScaleBy(a, s), &[a, s], "scale_by")
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        let (r, k) = self.dims(a);
        let out = self.data(a).iter().map(|&x| x.recip()).collect();
        self.push_computed(vec![r, k], out, Op::Recip(a), &[a], "recip")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let (r, k) = self.dims(a);
        let out = self.data(a).iter().map(|&x| gelu(x)).collect();
        self.push_computed(vec![r, k], out, Op::Gelu(a), &[a], "gelu")
    }

    /// Row-wise layer normalization with a `1×n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.dims(gain) != (1, n) || self.dims(bias) != (1, n) {
            bail!(Dimension, "layer_norm parameters must be 1x{n}");
        }
        let eps = S::lit(LN_EPS);
        let nf = S::from_usize(n).expect("usize");
        let (xd, gd, bd) = (self.data(x), self.data(gain), self.data(bias));
        let mut xhat = vec![S::zero(); m * n];
        let mut rstd = vec![S::zero(); m];
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let row = &xd[i * n..(i + 1) * n];
            let mean = row.iter().copied().sum::<S>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / nf;
            let rs = (var + eps).sqrt().recip();
            rstd[i] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[i * n + j] = h;
                out[i * n + j] = h * gd[j] + bd[j];
            }
        }
        self.push_computed(
            vec![m, n],
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
            "layer_norm",
        )
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        let mut out = vec![S::zero(); m * n];
        for (src, dst) in self.data(x).chunks(n).zip(out.chunks_mut(n)) {
            softmax_into(src, dst);
        }
        self.push_computed(vec![m, n], out, Op::SoftmaxRows(x), &[x], "softmax")
    }

    /// Softmax of row `i` over columns `0..=i`; later columns are exactly zero.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if m > n {
            bail!(Dimension, "causal_softmax on {m}x{n}");
        }
        let mut out = vec![S::zero(); m * n];
        for (i, (src, dst)) in self.data(x).chunks(n).zip(out.chunks_mut(n)).enumerate() {
            softmax_into(&src[..=i], &mut dst[..=i]);
        }
        self.push_computed(vec![m, n], out, Op::CausalSoftmax(x), &[x], "causal_softmax")
    }

    /// Gathers rows of `table` by token id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims(table);
        if ids.is_empty() {
            bail!(Degenerate, "embedding lookup with no ids");
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            bail!(Index, "token id {bad} outside table of {v} rows");
        }
        let td = self.data(table);
        let out = ids
            .iter()
            .flat_map(|&i| td[i * d..(i + 1) * d].iter().copied())
            .collect();
        self.push_computed(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
            "embedding",
        )
    }

    pub fn rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if len == 0 || start + len > m {
            bail!(Index, "rows {start}..{} of a {m}-row matrix", start + len);
        }
        let out = self.data(x)[start * n..(start + len) * n].to_vec();
        self.push_computed(vec![len, n], out, Op::Rows { x, start }, &[x], "rows")
    }

    pub fn cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if len == 0 || start + len > n {
            bail!(Index, "cols {start}..{} of a {n}-column matrix", start + len);
        }
        let out = self
            .data(x)
            .chunks(n)
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        self.push_computed(vec![m, len], out, Op::Cols { x, start }, &[x], "cols")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            bail!(Degenerate, "concat of nothing");
        };
        let m = self.dims(first).0;
        if parts.iter().any(|&p| self.dims(p).0 != m) {
            bail!(Dimension, "concat_cols parts disagree on row count");
        }
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                let c = self.dims(p).1;
                out.extend_from_slice(&self.data(p)[i * c..(i + 1) * c]);
            }
        }
        self.push_computed(
            vec![m, total],
            out,
            Op::ConcatCols(parts.to_vec()),
            parts,
            "concat_cols",
        )
    }

    /// Natural log of `max(x, floor)`; clamped entries pass no gradient.
    pub fn log_clamped(&mut self, x: Var, floor: S) -> Result<Var> {
        let (m, n) = self.dims(x);
        let out = self.data(x).iter().map(|&v| v.max(floor).ln()).collect();
        self.push_computed(vec![m, n], out, Op::Log { x, floor }, &[x], "log")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.log_clamped(x, S::min_positive_value())
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().copied().sum();
        self.push_computed(vec![1, 1], vec![s], Op::Sum(x), &[x], "sum")
    }

    /// Gathers elements by flat index into a `1×k` row.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let numel = self.value(x).numel();
        if idx.is_empty() {
            bail!(Degenerate, "pick with no indices");
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= numel) {
            bail!(Index, "pick index {bad} outside {numel} elements");
        }
        let out = idx.iter().map(|&i| self.data(x)[i]).collect();
        self.push_computed(
            vec![1, idx.len()],
            out,
            Op::Pick {
                x,
                idx: idx.to_vec(),
            },
            &[x],
            "pick",
        )
    }

    /// Mean token-level negative log-likelihood over unmasked rows.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        if targets.len() != mask.len() {
            bail!(Dimension, "targets and mask lengths differ");
        }
        let t: Vec<Option<usize>> = targets
            .iter()
            .zip(mask)
            .map(|(&t, &m)| m.then_some(t))
            .collect();
        self.cross_entropy_masked(logits, &t)
    }

    pub fn cross_entropy_masked(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (rows, v) = self.dims(logits);
        if targets.len() != rows {
            bail!(Dimension, "{} targets for {rows} logit rows", targets.len());
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            bail!(Degenerate, "cross entropy with every position masked");
        }
        if let Some(&bad) = targets.iter().flatten().find(|&&t| t >= v) {
            bail!(Index, "target {bad} outside vocabulary of {v}");
        }
        let ld = self.data(logits);
        let mut probs = vec![S::zero(); rows * v];
        let mut total = S::zero();
        for (i, target) in targets.iter().enumerate() {
            let Some(t) = *target else { continue };
            let row = &ld[i * v..(i + 1) * v];
            let p = &mut probs[i * v..(i + 1) * v];
            softmax_into(row, p);
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<S>().ln();
            total = total + (lse - row[t]);
        }
        let loss = total / S::from_usize(count).expect("usize");
        self.push_computed(
            vec![1, 1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            &[logits],
            "cross_entropy",
        )
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.dims(loss) != (1, 1) {
            bail!(Contract, "backward needs a scalar loss, got {:?}", self.dims(loss));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        let mut visited = 0;
        for idx in (0..=loss.0).rev() {
            visited += 1;
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        // Only report gradients for nodes that asked for them.
        for (slot, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *slot = None;
            }
        }
        Ok(Gradients { grads, visited })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, n) = self.dims(*a);
                let p = self.dims(*b).1;
                let (ad, bd) = (self.data(*a), self.data(*b));
                if self.wants(*a) {
                    let ga = accumulate(&mut grads[a.0], m * n);
                    for i in 0..m {
                        let gr = &g[i * p..(i + 1) * p];
                        for k in 0..n {
                            let br = &bd[k * p..(k + 1) * p];
                            ga[i * n + k] =
                                ga[i * n + k] + gr.iter().zip(br).map(|(&x, &y)| x * y).sum();
                        }
                    }
                }
                if self.wants(*b) {
                    let gb = accumulate(&mut grads[b.0], n * p);
                    for i in 0..m {
                        let gr = &g[i * p..(i + 1) * p];
                        for k in 0..n {
                            let aik = ad[i * n + k];
                            for (o, &gv) in gb[k * p..(k + 1) * p].iter_mut().zip(gr) {
                                *o = *o + aik * gv;
                            }
                        }
                    }
                }
            }
            Op::MatMulBT(a, b) => {
                let (m, n) = self.dims(*a);
                let p = self.dims(*b).0;
                let (ad, bd) = (self.data(*a), self.data(*b));
                if self.wants(*a) {
                    let ga = accumulate(&mut grads[a.0], m * n);
                    for i in 0..m {
                        for j in 0..p {
                            let gij = g[i * p + j];
                            for (o, &bv) in ga[i * n..(i + 1) * n]
                                .iter_mut()
                                .zip(&bd[j * n..(j + 1) * n])
                            {
                                *o = *o + gij * bv;
                            }
                        }
                    }
                }
                if self.wants(*b) {
                    let gb = accumulate(&mut grads[b.0], p * n);
                    for i in 0..m {
                        for j in 0..p {
                            let gij = g[i * p + j];
                            for (o, &av) in gb[j * n..(j + 1) * n]
                                .iter_mut()
                                .zip(&ad[i * n..(i + 1) * n])
                            {
                                *o = *o + gij * av;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(*v) {
                        let gv = accumulate(&mut grads[v.0], g.len());
                        for (o, &x) in gv.iter_mut().zip(g) {
                            *o = *o + x;
                        }
                    }
                }
            }
            Op::AddRow(a, row) => {
                if self.wants(*a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for (o, &x) in ga.iter_mut().zip(g) {
                        *o = *o + x;
                    }
                }
                if self.wants(*row) {
                    let n = self.dims(*row).1;
                    let gr = accumulate(&mut grads[row.0], n);
                    for chunk in g.chunks(n) {
                        for (o, &x) in gr.iter_mut().zip(chunk) {
                            *o = *o + x;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if self.wants(*a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for ((o, &x), &y) in ga.iter_mut().zip(g).zip(bd) {
                        *o = *o + x * y;
                    }
                }
                if self.wants(*b) {
                    let gb = accumulate(&mut grads[b.0], g.len());
                    for ((o, &x), &y) in gb.iter_mut().zip(g).zip(ad) {
                        *o = *o + x * y;
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.wants(*a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for (o, &x) in ga.iter_mut().zip(g) {
                        *o = *o + x * *c;
                    }
                }
            }
            Op::ScaleBy(a, s) => {
                let c = self.data(*s)[0];
                if self.wants(*a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for (o, &x) in ga.iter_mut().zip(g) {
                        *o = *o + x * c;
                    }
                }
                if self.wants(*s) {
                    let dot: S = g.iter().zip(self.data(*a)).map(|(&x, &y)| x * y).sum();
                    let gs = accumulate(&mut grads[s.0], 1);
                    gs[0] = gs[0] + dot;
                }
            }
            Op::Recip(a) => {
                if self.wants(*a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for ((o, &x), &y) in ga.iter_mut().zip(g).zip(out) {
                        *o = *o - x * y * y;
                    }
                }
            }
            Op::Gelu(a) => {
                if self.wants(*a) {
                    let ad = self.data(*a);
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for ((o, &x), &v) in ga.iter_mut().zip(g).zip(ad) {
                        *o = *o + x * gelu_grad(v);
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
                let (m, n) = self.dims(*x);
                let gd = self.data(*gain);
                if self.wants(*x) {
                    let nf = S::from_usize(n).expect("usize");
                    let gx = accumulate(&mut grads[x.0], m * n);
                    let mut dxhat = vec![S::zero(); n];
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        let hr = &xhat[i * n..(i + 1) * n];
                        for j in 0..n {
                            dxhat[j] = gr[j] * gd[j];
                        }
                        let mean_d = dxhat.iter().copied().sum::<S>() / nf;
                        let mean_dh =
                            dxhat.iter().zip(hr).map(|(&d, &h)| d * h).sum::<S>() / nf;
                        for j in 0..n {
                            gx[i * n + j] =
                                gx[i * n + j] + rstd[i] * (dxhat[j] - mean_d - hr[j] * mean_dh);
                        }
                    }
                }
                if self.wants(*gain) {
                    let gg = accumulate(&mut grads[gain.0], n);
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] = gg[j] + gr[j] * hr[j];
                        }
                    }
                }
                if self.wants(*bias) {
                    let gb = accumulate(&mut grads[bias.0], n);
                    for gr in g.chunks(n) {
                        for j in 0..n {
                            gb[j] = gb[j] + gr[j];
                        }
                    }
                }
            }
            Op::SoftmaxRows(x) | Op::CausalSoftmax(x) => {
                if self.wants(*x) {
                    let n = self.dims(*x).1;
                    let gx = accumulate(&mut grads[x.0], g.len());
                    for ((gr, yr), dst) in g.chunks(n).zip(out.chunks(n)).zip(gx.chunks_mut(n)) {
                        let dot: S = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            dst[j] = dst[j] + yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if self.wants(*table) {
                    let (v, d) = self.dims(*table);
                    let gt = accumulate(&mut grads[table.0], v * d);
                    for (t, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] = gt[id * d + j] + g[t * d + j];
                        }
                    }
                }
            }
            Op::Rows { x, start } => {
                if self.wants(*x) {
                    let (m, n) = self.dims(*x);
                    let gx = accumulate(&mut grads[x.0], m * n);
                    for (o, &v) in gx[start * n..start * n + g.len()].iter_mut().zip(g) {
                        *o = *o + v;
                    }
                }
            }
            Op::Cols { x, start } => {
                if self.wants(*x) {
                    let (m, n) = self.dims(*x);
                    let len = node.cols;
                    let gx = accumulate(&mut grads[x.0], m * n);
                    for i in 0..m {
                        for j in 0..len {
                            gx[i * n + start + j] = gx[i * n + start + j] + g[i * len + j];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.cols;
                let mut offset = 0;
                for &p in parts {
                    let (m, c) = self.dims(p);
                    if self.wants(p) {
                        let gp = accumulate(&mut grads[p.0], m * c);
                        for i in 0..m {
                            for j in 0..c {
                                gp[i * c + j] = gp[i * c + j] + g[i * total + offset + j];
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::Log { x, floor } => {
                if self.wants(*x) {
                    let xd = self.data(*x);
                    let gx = accumulate(&mut grads[x.0], g.len());
                    for ((o, &gv), &v) in gx.iter_mut().zip(g).zip(xd) {
                        if v > *floor {
                            *o = *o + gv / v;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    let len = self.value(*x).numel();
                    let gx = accumulate(&mut grads[x.0], len);
                    for o in gx.iter_mut() {
                        *o = *o + g[0];
                    }
                }
            }
            Op::Pick { x, idx } => {
                if self.wants(*x) {
                    let len = self.value(*x).numel();
                    let gx = accumulate(&mut grads[x.0], len);
                    for (&i, &gv) in idx.iter().zip(g) {
                        gx[i] = gx[i] + gv;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if self.wants(*logits) {
                    let (rows, v) = self.dims(*logits);
                    let scale = g[0] / S::from_usize(*count).expect("usize");
                    let gl = accumulate(&mut grads[logits.0], rows * v);
                    for (i, target) in targets.iter().enumerate() {
                        let Some(t) = *target else { continue };
                        for j in 0..v {
                            let onehot = if j == t { S::one() } else { S::zero() };
                            gl[i * v + j] = gl[i * v + j] + scale * (probs[i * v + j] - onehot);
                        }
                    }
                }
            }
        }
    }
}

/// Max-subtracted softmax of `src` written into `dst`.
pub(crate) fn softmax_into<S: Scalar>(src: &[S], dst: &mut [S]) {
    let max = src.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        total = total + *d;
    }
    for d in dst.iter_mut() {
        *d = *d / total;
    }
}

fn gelu<S: Scalar>(x: S) -> S {
    let c = S::lit((2.0 / std::f64::consts::PI).sqrt());
    let inner = c * (x + S::lit(0.044715) * x * x * x);
    S::lit(0.5) * x * (S::one() + inner.tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::lit((2.0 / std::f64::consts::PI).sqrt());
    let inner = c * (x + S::lit(0.044715) * x * x * x);
    let t = inner.tanh();
    let dinner = c * (S::one() + S::lit(3.0 * 0.044715) * x * x);
    S::lit(0.5) * (S::one() + t) + S::lit(0.5) * x * (S::one() - t * t) * dinner
}

/// Stand-alone softmax over a slice.
pub fn softmax<S: Scalar>(z: &[S]) -> Result<Vec<S>> {
    if z.is_empty() {
        bail!(Dimension, "softmax of an empty vector");
    }
    check_finite(z, "softmax input")?;
    let mut out = vec![S::zero(); z.len()];
    softmax_into(z, &mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn small_products_by_hand() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[vec![1.0, 2.0], vec![3.0, 4.0]]), true).unwrap();
        let b = tape.leaf(t(&[vec![5.0], vec![6.0]]), true).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[17.0, 39.0]);
        let s = tape.sum(c).unwrap();
        let g = tape.backward(s).unwrap();
        // d/dA Σ A·b = 1·bᵀ per row; d/db = column sums of A.
        assert_eq!(g.wrt(&tape, a).data(), &[5.0, 6.0, 5.0, 6.0]);
        assert_eq!(g.wrt(&tape, b).data(), &[4.0, 6.0]);
    }

    #[test]
    fn sweep_stops_at_the_loss_and_skips_constants() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[vec![0.5, -1.0]]), true).unwrap();
        let k = tape.constant(t(&[vec![2.0, 2.0]])).unwrap();
        let y = tape.mul(x, k).unwrap();
        let loss = tape.sum(y).unwrap();
        // Nodes recorded after the loss are never visited.
        let later = tape.scale(loss, 3.0).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.visited(), loss.index() + 1);
        assert!(g.get(k).is_none());
        assert!(g.get(later).is_none());
        assert_eq!(g.wrt(&tape, x).data(), &[2.0, 2.0]);
        // Replaying the same tape is deterministic.
        let again = tape.backward(loss).unwrap();
        assert_eq!(again.wrt(&tape, x).data(), g.wrt(&tape, x).data());
        assert_eq!(again.visited(), g.visited());
    }

    #[test]
    fn causal_softmax_masks_the_future() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[vec![1.0, 9.0, 9.0], vec![0.0, 0.0, 9.0], vec![1.0, 2.0, 3.0]])).unwrap();
        let y = tape.causal_softmax(x).unwrap();
        let v = tape.value(y);
        assert_eq!(v.row_slice(0), &[1.0, 0.0, 0.0]);
        assert_eq!(v.row_slice(1), &[0.5, 0.5, 0.0]);
        assert!((v.row_slice(2).iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn shape_and_finiteness_errors() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        assert!(tape.matmul(a, a).is_err());
        assert!(tape.backward(a).is_err());
        assert!(tape.leaf(Tensor::full(&[1, 1], f64::NAN), false).is_err());
        let big = tape.constant(Tensor::full(&[1, 1], 1e300)).unwrap();
        assert!(tape.scale(big, 1e300).is_err());
        // log clamps at the smallest positive value instead of failing.
        let z = tape.constant(Tensor::zeros(&[1, 1])).unwrap();
        assert!(tape.log(z).unwrap().index() > z.index());
    }

    #[test]
    fn softmax_is_shift_stable() {
        let s = softmax(&[1000.0, 1001.0]).unwrap();
        let e = 1.0 / (1.0 + std::f64::consts::E);
        assert!((s[0] - e).abs() < 1e-15);
    }
}
