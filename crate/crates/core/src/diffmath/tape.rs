use super::tensor::{matmul, matmul_nt, matmul_tn, Tensor2D};
use crate::error::{LabError, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MulConst(Var, Tensor2D),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    SoftmaxRows(Var),
    Gelu(Var),
    Sigmoid(Var),
    Embedding { table: Var, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    MeanRows(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor2D,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation for a single reverse sweep.
///
/// Nodes are appended in evaluation order, so the record is already a
/// topological order and [`Tape::backward`] walks it once from the end.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients of every leaf on a tape, zero for leaves the output does not
/// depend on.
#[derive(Debug)]
pub struct Gradients {
    by_node: Vec<Option<Tensor2D>>,
}

impl Gradients {
    /// Gradient for a leaf. `None` if `var` is not a leaf of the tape.
    pub fn get(&self, var: Var) -> Option<&Tensor2D> {
        self.by_node.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor2D> {
        self.by_node.get_mut(var.0).and_then(|g| g.take())
    }
}

macro_rules! shape_err {
    ($op:expr, $a:expr, $b:expr) => {
        LabError::Shape {
            op: $op,
            lhs: $a,
            rhs: $b,
        }
    };
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

    fn push(&mut self, value: Tensor2D, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor2D {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor2D) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor2D) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(shape_err!("matmul", sa, sb));
        }
        let v = matmul(self.value(a), self.value(b));
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::MatMul(a, b), ng))
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.1 {
            return Err(shape_err!("matmul_nt", sa, sb));
        }
        let v = matmul_nt(self.value(a), self.value(b));
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::MatMulNt(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).check_same(self.value(b), "add")?;
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    /// Adds a `1 x cols` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (sx, sr) = (self.shape(x), self.shape(row));
        if sr != (1, sx.1) {
            return Err(shape_err!("add_row", sx, sr));
        }
        let mut v = self.value(x).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..sx.0 {
            for (o, b) in v.row_mut(i).iter_mut().zip(&r) {
                *o += b;
            }
        }
        let ng = self.needs(x) || self.needs(row);
        Ok(self.push(v, Op::AddRow(x, row), ng))
    }

    /// Multiplies every row of `x` elementwise by a `1 x cols` row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (sx, sr) = (self.shape(x), self.shape(row));
        if sr != (1, sx.1) {
            return Err(shape_err!("mul_row", sx, sr));
        }
        let mut v = self.value(x).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..sx.0 {
            for (o, g) in v.row_mut(i).iter_mut().zip(&r) {
                *o *= g;
            }
        }
        let ng = self.needs(x) || self.needs(row);
        Ok(self.push(v, Op::MulRow(x, row), ng))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let mut v = self.value(x).clone();
        v.scale_in_place(s);
        let ng = self.needs(x);
        self.push(v, Op::Scale(x, s), ng)
    }

    /// Adds a constant tensor (e.g. an attention mask).
    pub fn add_const(&mut self, x: Var, c: &Tensor2D) -> Result<Var> {
        self.value(x).check_same(c, "add_const")?;
        let mut v = self.value(x).clone();
        v.add_assign(c);
        let ng = self.needs(x);
        Ok(self.push(v, Op::AddConst(x), ng))
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&mut self, x: Var, c: &Tensor2D) -> Result<Var> {
        self.value(x).check_same(c, "mul_const")?;
        let mut v = self.value(x).clone();
        for (o, k) in v.data_mut().iter_mut().zip(c.data()) {
            *o *= k;
        }
        let ng = self.needs(x);
        Ok(self.push(v, Op::MulConst(x, c.clone()), ng))
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut out = Tensor2D::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            for (o, v) in out.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let ng = self.needs(x);
        self.push(out, Op::LayerNorm { x, inv_std }, ng)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut out = Tensor2D::zeros(rows, cols);
        for r in 0..rows {
            let row = xv.row(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let o = out.row_mut(r);
            let mut s = 0.0;
            for (oi, v) in o.iter_mut().zip(row) {
                *oi = (v - m).exp();
                s += *oi;
            }
            for oi in o.iter_mut() {
                *oi /= s;
            }
        }
        let ng = self.needs(x);
        self.push(out, Op::SoftmaxRows(x), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        for a in v.data_mut() {
            let x = *a;
            *a = 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh());
        }
        let ng = self.needs(x);
        self.push(v, Op::Gelu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        for a in v.data_mut() {
            *a = 1.0 / (1.0 + (-*a).exp());
        }
        let ng = self.needs(x);
        self.push(v, Op::Sigmoid(x), ng)
    }

    /// Gathers rows of `table` by index.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (n, d) = t.shape();
        let mut out = Tensor2D::zeros(ids.len(), d);
        for (r, &id) in ids.iter().enumerate() {
            if id >= n {
                return Err(shape_err!("embedding_lookup", (n, d), (id, 0)));
            }
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        let ng = self.needs(table);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.1 != cols {
                return Err(shape_err!("concat_rows", self.shape(parts[0]), s));
            }
            rows += s.0;
            data.extend_from_slice(self.value(p).data());
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        let v = Tensor2D::from_vec(rows, cols, data)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x);
        if start >= end || end > s.0 {
            return Err(shape_err!("slice_rows", s, (start, end)));
        }
        let data = self.value(x).data()[start * s.1..end * s.1].to_vec();
        let v = Tensor2D::from_vec(end - start, s.1, data)?;
        let ng = self.needs(x);
        Ok(self.push(v, Op::SliceRows { x, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0]).0;
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.0 != rows {
                return Err(shape_err!("concat_cols", self.shape(parts[0]), s));
            }
            cols += s.1;
        }
        let mut out = Tensor2D::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            let pc = pv.cols();
            for r in 0..rows {
                out.row_mut(r)[off..off + pc].copy_from_slice(pv.row(r));
            }
            off += pc;
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x);
        if start >= end || end > s.1 {
            return Err(shape_err!("slice_cols", s, (start, end)));
        }
        let xv = self.value(x);
        let mut out = Tensor2D::zeros(s.0, end - start);
        for r in 0..s.0 {
            out.row_mut(r).copy_from_slice(&xv.row(r)[start..end]);
        }
        let ng = self.needs(x);
        Ok(self.push(out, Op::SliceCols { x, start }, ng))
    }

    /// Column means as a `1 x cols` row.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut out = Tensor2D::zeros(1, cols);
        for r in 0..rows {
            for (o, v) in out.data_mut().iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        out.scale_in_place(1.0 / rows as f64);
        let ng = self.needs(x);
        self.push(out, Op::MeanRows(x), ng)
    }

    /// Reverse sweep from `output` seeded with `seed` (same shape as the
    /// output). A tape supports exactly one sweep.
    pub fn backward(&mut self, output: Var, seed: &Tensor2D) -> Result<Gradients> {
        if self.consumed {
            return Err(LabError::TapeConsumed);
        }
        self.value(output).check_same(seed, "backward seed")?;
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor2D>> = (0..n).map(|_| None).collect();
        grads[output.0] = Some(seed.clone());

        for idx in (0..n).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.propagate(idx, g, &mut grads);
        }

        let by_node = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, node)| match node.op {
                Op::Leaf => Some(
                    grads[i]
                        .take()
                        .unwrap_or_else(|| Tensor2D::zeros(node.value.rows(), node.value.cols())),
                ),
                _ => None,
            })
            .collect();
        Ok(Gradients { by_node })
    }

    fn propagate(&self, idx: usize, g: Tensor2D, grads: &mut [Option<Tensor2D>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, delta: Tensor2D| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    acc(*a, matmul_nt(&g, self.value(*b)));
                }
                if self.needs(*b) {
                    acc(*b, matmul_tn(self.value(*a), &g));
                }
            }
            Op::MatMulNt(a, b) => {
                if self.needs(*a) {
                    acc(*a, matmul(&g, self.value(*b)));
                }
                if self.needs(*b) {
                    acc(*b, matmul_tn(&g, self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                if self.needs(*b) {
                    acc(*b, g.clone());
                }
                acc(*a, g);
            }
            Op::AddRow(x, row) => {
                if self.needs(*row) {
                    let mut gr = Tensor2D::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(*row, gr);
                }
                acc(*x, g);
            }
            Op::MulRow(x, row) => {
                let xv = self.value(*x);
                let rv = self.value(*row);
                if self.needs(*row) {
                    let mut gr = Tensor2D::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for ((o, gv), xv) in gr.data_mut().iter_mut().zip(g.row(r)).zip(xv.row(r)) {
                            *o += gv * xv;
                        }
                    }
                    acc(*row, gr);
                }
                if self.needs(*x) {
                    let mut gx = g;
                    for r in 0..gx.rows() {
                        for (o, s) in gx.row_mut(r).iter_mut().zip(rv.data()) {
                            *o *= s;
                        }
                    }
                    acc(*x, gx);
                }
            }
            Op::Scale(x, s) => {
                let mut gx = g;
                gx.scale_in_place(*s);
                acc(*x, gx);
            }
            Op::AddConst(x) => acc(*x, g),
            Op::MulConst(x, c) => {
                let mut g = g;
                for (o, k) in g.data_mut().iter_mut().zip(c.data()) {
                    *o *= k;
                }
                acc(*x, g);
            }
            Op::LayerNorm { x, inv_std } => {
                let y = &node.value;
                let cols = y.cols() as f64;
                let mut gx = Tensor2D::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let gy = g.row(r);
                    let yr = y.row(r);
                    let mean_g = gy.iter().sum::<f64>() / cols;
                    let mean_gy = gy.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / cols;
                    for ((o, gv), yv) in gx.row_mut(r).iter_mut().zip(gy).zip(yr) {
                        *o = inv_std[r] * (gv - mean_g - yv * mean_gy);
                    }
                }
                acc(*x, gx);
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let mut gx = Tensor2D::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let gy = g.row(r);
                    let yr = y.row(r);
                    let dot = gy.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>();
                    for ((o, gv), yv) in gx.row_mut(r).iter_mut().zip(gy).zip(yr) {
                        *o = yv * (gv - dot);
                    }
                }
                acc(*x, gx);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let mut gx = g;
                for (o, &v) in gx.data_mut().iter_mut().zip(xv.data()) {
                    let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                    let d = 0.5 * (1.0 + t)
                        + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                    *o *= d;
                }
                acc(*x, gx);
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                let mut gx = g;
                for (o, &s) in gx.data_mut().iter_mut().zip(y.data()) {
                    *o *= s * (1.0 - s);
                }
                acc(*x, gx);
            }
            Op::Embedding { table, ids } => {
                let (n, d) = self.shape(*table);
                let mut gt = Tensor2D::zeros(n, d);
                for (r, &id) in ids.iter().enumerate() {
                    for (o, v) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(*table, gt);
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut off = 0;
                for &p in parts {
                    let rows = self.shape(p).0;
                    if self.needs(p) {
                        let data = g.data()[off * cols..(off + rows) * cols].to_vec();
                        acc(p, Tensor2D::from_vec(rows, cols, data).expect("slice shape"));
                    }
                    off += rows;
                }
            }
            Op::SliceRows { x, start } => {
                let (rows, cols) = self.shape(*x);
                let mut gx = Tensor2D::zeros(rows, cols);
                gx.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                acc(*x, gx);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (rows, pc) = self.shape(p);
                    if self.needs(p) {
                        let mut gp = Tensor2D::zeros(rows, pc);
                        for r in 0..rows {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + pc]);
                        }
                        acc(p, gp);
                    }
                    off += pc;
                }
            }
            Op::SliceCols { x, start } => {
                let (rows, cols) = self.shape(*x);
                let mut gx = Tensor2D::zeros(rows, cols);
                let w = g.cols();
                for r in 0..rows {
                    gx.row_mut(r)[*start..start + w].copy_from_slice(g.row(r));
                }
                acc(*x, gx);
            }
            Op::MeanRows(x) => {
                let (rows, cols) = self.shape(*x);
                let mut gx = Tensor2D::zeros(rows, cols);
                let inv = 1.0 / rows as f64;
                for r in 0..rows {
                    for (o, v) in gx.row_mut(r).iter_mut().zip(g.data()) {
                        *o = v * inv;
                    }
                }
                acc(*x, gx);
            }
        }
    }
}
