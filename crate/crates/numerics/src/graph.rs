//! Tape of recorded 2-D operations and the reverse sweep over it.

use crate::error::{dim_err, NumericsError, Result};
use crate::kernels;
use crate::nn::{ParamId, ParamStore};
use crate::segments::Segments;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Exp(Var),
    LogFloor(Var, f64),
    Relu(Var),
    Gelu(Var),
    Silu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm(Var, Vec<f64>),
    L2Normalize(Var, Vec<f64>),
    Sum(Var),
    Mean(Var),
    GatherRows(Var, Vec<usize>),
    SegmentMean(Var, Segments),
    ShiftRows(Var, Segments, isize),
    ConcatCols(Var, Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segs: Segments,
        heads: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    tracked: bool,
}

/// Recorded forward computation. Nodes are appended in execution order, so
/// every node's inputs precede it and the reverse sweep is a plain reverse
/// iteration.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(Var, ParamId)>,
    backpropagated: bool,
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(Var, ParamId)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Copy parameter gradients into the store. Fails if a parameter still
    /// holds a gradient from an earlier pass.
    pub fn write_to(&self, store: &mut ParamStore) -> Result<()> {
        for &(_, id) in &self.params {
            if store.get(id).grad().is_some() {
                return Err(NumericsError::GradientNotReset(store.name(id).to_string()));
            }
        }
        for &(var, id) in &self.params {
            let len = store.get(id).len();
            let g = self.grads[var.0].clone().unwrap_or_else(|| vec![0.0; len]);
            store.get_mut(id).set_grad(g);
        }
        Ok(())
    }
}

fn same_shape(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return dim_err(op, format!("{}x{} vs {}x{}", a.0, a.1, b.0, b.1));
    }
    Ok(())
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

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, tracked: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let n = self.node(v);
        assert_eq!(n.value.len(), 1, "scalar() on a {}x{} value", n.rows, n.cols);
        n.value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::matrix(n.rows, n.cols, n.value.clone()).expect("node shape is consistent")
    }

    /// Untracked input; no gradient flows into it.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        let (r, c) = t.dims2();
        self.push(r, c, t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        assert_eq!(rows * cols, data.len(), "constant_from: shape");
        self.push(rows, cols, data, Op::Leaf, false)
    }

    /// Tracked input whose gradient is reported in [`Gradients`].
    pub fn input(&mut self, t: &Tensor) -> Var {
        let (r, c) = t.dims2();
        self.push(r, c, t.data().to_vec(), Op::Leaf, true)
    }

    /// Load a parameter from the store as a tracked leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        let (r, c) = t.dims2();
        let tracked = t.requires_grad();
        let v = self.push(r, c, t.data().to_vec(), Op::Leaf, tracked);
        if tracked {
            self.params.push((v, id));
        }
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return dim_err("matmul", format!("{m}x{k} · {k2}x{n}"));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        let t = self.tracked(&[a, b]);
        Ok(self.push(m, n, out, Op::MatMul(a, b), t))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return dim_err("matmul_nt", format!("{m}x{k} · ({n}x{k2})ᵀ"));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(a), false, self.value(b), true, &mut out, false);
        let t = self.tracked(&[a, b]);
        Ok(self.push(m, n, out, Op::MatMulNT(a, b), t))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let x = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        let t = self.tracked(&[a]);
        self.push(c, r, out, Op::Transpose(a), t)
    }

    fn zip(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let sa = self.shape(a);
        same_shape(op_name, sa, self.shape(b))?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let t = self.tracked(&[a, b]);
        Ok(self.push(sa.0, sa.1, out, op, t))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(&mut self, name: &'static str, a: Var, row: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (r, c) = self.shape(a);
        let (rr, rc) = self.shape(row);
        if rr != 1 || rc != c {
            return dim_err(name, format!("{r}x{c} with row {rr}x{rc}"));
        }
        let rv = self.value(row);
        let out = self
            .value(a)
            .chunks(c)
            .flat_map(|chunk| chunk.iter().zip(rv).map(|(x, y)| f(*x, *y)))
            .collect();
        let t = self.tracked(&[a, row]);
        Ok(self.push(r, c, out, op, t))
    }

    /// `a + row`, broadcasting a `1×n` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast("add_row", a, row, |x, y| x + y, Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast("mul_row", a, row, |x, y| x * y, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let (r, cc) = self.shape(a);
        let out = self.value(a).iter().map(|x| x * c).collect();
        let t = self.tracked(&[a]);
        self.push(r, cc, out, Op::Scale(a, c), t)
    }

    /// Multiply every entry of `a` by the `1×1` value `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.shape(s) != (1, 1) {
            let (r, c) = self.shape(s);
            return dim_err("scale_by", format!("scale must be 1x1, got {r}x{c}"));
        }
        let sv = self.value(s)[0];
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|x| x * sv).collect();
        let t = self.tracked(&[a, s]);
        Ok(self.push(r, c, out, Op::ScaleBy(a, s), t))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|x| f(*x)).collect();
        let t = self.tracked(&[a]);
        self.push(r, c, out, op, t)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// `ln(max(a, floor))`; the gradient is zero where the floor is active.
    pub fn log_floor(&mut self, a: Var, floor: f64) -> Var {
        self.unary(a, move |x| x.max(floor).ln(), Op::LogFloor(a, floor))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, kernels::gelu, Op::Gelu(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * kernels::sigmoid(x), Op::Silu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut out = self.value(a).to_vec();
        kernels::softmax_rows_inplace(&mut out, r, c);
        let t = self.tracked(&[a]);
        self.push(r, c, out, Op::Softmax(a), t)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut out = self.value(a).to_vec();
        kernels::log_softmax_rows_inplace(&mut out, r, c);
        let t = self.tracked(&[a]);
        self.push(r, c, out, Op::LogSoftmax(a), t)
    }

    /// Per-row normalization to zero mean and unit variance, no affine.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let (r, c) = self.shape(a);
        let mut out = self.value(a).to_vec();
        let rstd = kernels::layer_norm_rows_inplace(&mut out, r, c, eps);
        let t = self.tracked(&[a]);
        self.push(r, c, out, Op::LayerNorm(a, rstd), t)
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let x = self.value(a);
        let mut norms = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for row in x.chunks(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            norms.push(n);
            out.extend(row.iter().map(|v| v / n));
        }
        let t = self.tracked(&[a]);
        self.push(r, c, out, Op::L2Normalize(a, norms), t)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let t = self.tracked(&[a]);
        self.push(1, 1, vec![s], Op::Sum(a), t)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.iter().sum::<f64>() / x.len() as f64;
        let t = self.tracked(&[a]);
        self.push(1, 1, vec![s], Op::Mean(a), t)
    }

    /// Output row `i` is row `idx[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return dim_err("gather_rows", format!("row {bad} out of {r}"));
        }
        if idx.is_empty() {
            return dim_err("gather_rows", "empty index");
        }
        let x = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&x[i * c..(i + 1) * c]);
        }
        let t = self.tracked(&[a]);
        Ok(self.push(idx.len(), c, out, Op::GatherRows(a, idx.to_vec()), t))
    }

    /// Mean of the rows of each segment; one output row per segment.
    pub fn segment_mean(&mut self, a: Var, segs: &Segments) -> Result<Var> {
        let (r, c) = self.shape(a);
        if segs.total_rows() != r {
            return dim_err("segment_mean", format!("{} segment rows vs {r}", segs.total_rows()));
        }
        let x = self.value(a);
        let mut out = vec![0.0; segs.count() * c];
        for (s, range) in segs.iter().enumerate() {
            let inv = 1.0 / range.len() as f64;
            for i in range {
                for j in 0..c {
                    out[s * c + j] += x[i * c + j] * inv;
                }
            }
        }
        let t = self.tracked(&[a]);
        Ok(self.push(segs.count(), c, out, Op::SegmentMean(a, segs.clone()), t))
    }

    /// Row `i` of the output is row `i - offset` of the same segment, or
    /// zero when that falls outside the segment.
    pub fn shift_rows(&mut self, a: Var, segs: &Segments, offset: isize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if segs.total_rows() != r {
            return dim_err("shift_rows", format!("{} segment rows vs {r}", segs.total_rows()));
        }
        let x = self.value(a);
        let mut out = vec![0.0; r * c];
        for range in segs.iter() {
            for i in range.clone() {
                let src = i as isize - offset;
                if src >= range.start as isize && src < range.end as isize {
                    let s = src as usize;
                    out[i * c..(i + 1) * c].copy_from_slice(&x[s * c..(s + 1) * c]);
                }
            }
        }
        let t = self.tracked(&[a]);
        Ok(self.push(r, c, out, Op::ShiftRows(a, segs.clone(), offset), t))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ra != rb {
            return dim_err("concat_cols", format!("{ra}x{ca} beside {rb}x{cb}"));
        }
        let (xa, xb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            out.extend_from_slice(&xa[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&xb[i * cb..(i + 1) * cb]);
        }
        let t = self.tracked(&[a, b]);
        Ok(self.push(ra, ca + cb, out, Op::ConcatCols(a, b), t))
    }

    /// Multi-head scaled dot-product attention within each segment.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, segs: &Segments, heads: usize) -> Result<Var> {
        let (r, c) = self.shape(q);
        same_shape("attention", (r, c), self.shape(k))?;
        same_shape("attention", (r, c), self.shape(v))?;
        if heads == 0 || c % heads != 0 {
            return Err(NumericsError::Config(format!(
                "width {c} is not divisible by {heads} heads"
            )));
        }
        if segs.total_rows() != r {
            return dim_err("attention", format!("{} segment rows vs {r}", segs.total_rows()));
        }
        let (out, probs) =
            kernels::attention_forward(self.value(q), self.value(k), self.value(v), c, segs, heads);
        let t = self.tracked(&[q, k, v]);
        Ok(self.push(
            r,
            c,
            out,
            Op::Attention {
                q,
                k,
                v,
                segs: segs.clone(),
                heads,
                probs,
            },
            t,
        ))
    }

    /// Reverse sweep from a scalar loss. A graph can be swept once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backpropagated {
            return Err(NumericsError::AlreadyBackpropagated);
        }
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(NumericsError::NonScalarLoss { rows: r, cols: c });
        }
        self.backpropagated = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let (rows, cols) = (node.rows, node.cols);
        let y = &node.value;
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].tracked;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = cols;
                if needs(*a) {
                    let ga = slot(grads, *a, m * k);
                    kernels::gemm(m, n, k, g, false, self.value(*b), true, ga, true);
                }
                if needs(*b) {
                    let gb = slot(grads, *b, k * n);
                    kernels::gemm(k, m, n, self.value(*a), true, g, false, gb, true);
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = self.shape(*a);
                let n = cols;
                if needs(*a) {
                    let ga = slot(grads, *a, m * k);
                    kernels::gemm(m, n, k, g, false, self.value(*b), false, ga, true);
                }
                if needs(*b) {
                    let gb = slot(grads, *b, n * k);
                    kernels::gemm(n, m, k, g, true, self.value(*a), false, gb, true);
                }
            }
            Op::Transpose(a) => {
                if needs(*a) {
                    let ga = slot(grads, *a, rows * cols);
                    // node is rows×cols, input is cols×rows
                    for i in 0..rows {
                        for j in 0..cols {
                            ga[j * rows + i] += g[i * cols + j];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if needs(*v) {
                        axpy(slot(grads, *v, g.len()), g, 1.0);
                    }
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    axpy(slot(grads, *a, g.len()), g, 1.0);
                }
                if needs(*b) {
                    axpy(slot(grads, *b, g.len()), g, -1.0);
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let bv = self.value(*b);
                    let ga = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if needs(*b) {
                    let av = self.value(*a);
                    let gb = slot(grads, *b, g.len());
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::AddRow(a, row) => {
                if needs(*a) {
                    axpy(slot(grads, *a, g.len()), g, 1.0);
                }
                if needs(*row) {
                    let gr = slot(grads, *row, cols);
                    for chunk in g.chunks(cols) {
                        axpy(gr, chunk, 1.0);
                    }
                }
            }
            Op::MulRow(a, row) => {
                let rv = self.value(*row).to_vec();
                if needs(*a) {
                    let ga = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * rv[i % cols];
                    }
                }
                if needs(*row) {
                    let av = self.value(*a);
                    let gr = slot(grads, *row, cols);
                    for i in 0..g.len() {
                        gr[i % cols] += g[i] * av[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                if needs(*a) {
                    axpy(slot(grads, *a, g.len()), g, *c);
                }
            }
            Op::ScaleBy(a, s) => {
                let sv = self.value(*s)[0];
                if needs(*a) {
                    axpy(slot(grads, *a, g.len()), g, sv);
                }
                if needs(*s) {
                    let av = self.value(*a);
                    let d: f64 = g.iter().zip(av).map(|(x, y)| x * y).sum();
                    slot(grads, *s, 1)[0] += d;
                }
            }
            Op::Exp(a) => {
                if needs(*a) {
                    let ga = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * y[i];
                    }
                }
            }
            Op::LogFloor(a, floor) => {
                if needs(*a) {
                    let x = self.value(*a);
                    let ga = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        if x[i] > *floor {
                            ga[i] += g[i] / x[i];
                        }
                    }
                }
            }
            Op::Relu(a) => {
                if needs(*a) {
                    let x = self.value(*a);
                    let ga = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if needs(*a) {
                    let x = self.value(*a);
                    let ga = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * kernels::gelu_grad(x[i]);
                    }
                }
            }
            Op::Silu(a) => {
                if needs(*a) {
                    let x = self.value(*a);
                    let ga = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        let s = kernels::sigmoid(x[i]);
                        ga[i] += g[i] * (s + x[i] * s * (1.0 - s));
                    }
                }
            }
            Op::Softmax(a) => {
                if needs(*a) {
                    let ga = slot(grads, *a, g.len());
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..cols {
                            ga[r * cols + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                if needs(*a) {
                    let ga = slot(grads, *a, g.len());
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let gsum: f64 = gr.iter().sum();
                        for j in 0..cols {
                            ga[r * cols + j] += gr[j] - yr[j].exp() * gsum;
                        }
                    }
                }
            }
            Op::LayerNorm(a, rstd) => {
                if needs(*a) {
                    let ga = slot(grads, *a, g.len());
                    let n = cols as f64;
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let mean_g = gr.iter().sum::<f64>() / n;
                        let mean_gy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / n;
                        for j in 0..cols {
                            ga[r * cols + j] += rstd[r] * (gr[j] - mean_g - yr[j] * mean_gy);
                        }
                    }
                }
            }
            Op::L2Normalize(a, norms) => {
                if needs(*a) {
                    let ga = slot(grads, *a, g.len());
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..cols {
                            ga[r * cols + j] += (gr[j] - yr[j] * dot) / norms[r];
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if needs(*a) {
                    let n = self.value(*a).len();
                    slot(grads, *a, n).iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Mean(a) => {
                if needs(*a) {
                    let n = self.value(*a).len();
                    let s = g[0] / n as f64;
                    slot(grads, *a, n).iter_mut().for_each(|v| *v += s);
                }
            }
            Op::GatherRows(a, idx) => {
                if needs(*a) {
                    let n = self.value(*a).len();
                    let ga = slot(grads, *a, n);
                    for (o, &i) in idx.iter().enumerate() {
                        axpy(&mut ga[i * cols..(i + 1) * cols], &g[o * cols..(o + 1) * cols], 1.0);
                    }
                }
            }
            Op::SegmentMean(a, segs) => {
                if needs(*a) {
                    let n = self.value(*a).len();
                    let ga = slot(grads, *a, n);
                    for (s, range) in segs.iter().enumerate() {
                        let inv = 1.0 / range.len() as f64;
                        for i in range {
                            axpy(&mut ga[i * cols..(i + 1) * cols], &g[s * cols..(s + 1) * cols], inv);
                        }
                    }
                }
            }
            Op::ShiftRows(a, segs, offset) => {
                if needs(*a) {
                    let ga = slot(grads, *a, g.len());
                    for range in segs.iter() {
                        for i in range.clone() {
                            let src = i as isize - offset;
                            if src >= range.start as isize && src < range.end as isize {
                                let s = src as usize;
                                axpy(&mut ga[s * cols..(s + 1) * cols], &g[i * cols..(i + 1) * cols], 1.0);
                            }
                        }
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = self.shape(*a).1;
                let cb = cols - ca;
                if needs(*a) {
                    let ga = slot(grads, *a, rows * ca);
                    for i in 0..rows {
                        axpy(&mut ga[i * ca..(i + 1) * ca], &g[i * cols..i * cols + ca], 1.0);
                    }
                }
                if needs(*b) {
                    let gb = slot(grads, *b, rows * cb);
                    for i in 0..rows {
                        axpy(&mut gb[i * cb..(i + 1) * cb], &g[i * cols + ca..(i + 1) * cols], 1.0);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                segs,
                heads,
                probs,
            } => {
                let (dq, dk, dv) = kernels::attention_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    probs,
                    g,
                    cols,
                    segs,
                    *heads,
                );
                for (var, d) in [(q, dq), (k, dk), (v, dv)] {
                    if needs(*var) {
                        axpy(slot(grads, *var, d.len()), &d, 1.0);
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}
