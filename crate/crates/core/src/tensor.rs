//! Dense f32 tensors with a define-by-run reverse-mode tape.
//!
//! Values live on a [`Tape`]; operations return [`Var`] handles and record a
//! backward rule. [`Tape::backward`] replays the recorded operations in exact
//! reverse order and accumulates gradients additively, so a value used twice
//! receives the sum of both contributions.
//!
//! Shapes follow row-major conventions. Matrix operations (`matmul`,
//! row/column slicing and concatenation, `row_dot`, the LSTM cell primitives)
//! require rank-2 operands; elementwise `add`/`mul` broadcast along trailing
//! dimensions.

use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Error, Result};

/// A dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let mut t = Tensor::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Builds a `rows.len() × cols` matrix; every row must have the same length.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != cols) {
            return Err(Error::Dimension(format!(
                "row {bad} has {} values, expected {cols}",
                rows[bad].len()
            )));
        }
        let data = rows.iter().flatten().copied().collect();
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Row count of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn row(&self, r: usize) -> &[f32] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f32 {
        self.data[0]
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(0.0);
        }
    }

    pub fn check_finite(&self, name: &str) -> Result<()> {
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{name}[{i}] = {}", self.data[i])));
        }
        Ok(())
    }

    fn expect_rank2(&self, what: &str) -> Result<()> {
        if self.rank() != 2 {
            return Err(Error::Dimension(format!(
                "{what} expects a matrix, got shape {:?}",
                self.shape
            )));
        }
        Ok(())
    }
}

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.index as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Sigmoid,
    /// Softmax over the last axis, shift-normalized per row.
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Mul,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Scale(Var, f32),
    SumAll(Var),
    SumSquares(Var),
    RowDot(Var, Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    /// `act` caches `[σ(i), σ(f), tanh(g)]` per row.
    LstmCellState {
        gates: Var,
        c_prev: Var,
        act: Vec<f32>,
    },
    /// `act` caches `[σ(o), tanh(c)]` per row.
    LstmCellOutput {
        gates: Var,
        c: Var,
        act: Vec<f32>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run computation record. One tape per worker; not shared.
#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    _flush: FlushDenormals,
}

/// Sets flush-to-zero and denormals-are-zero on the current thread while
/// alive. Saturated sigmoids otherwise produce subnormal gradients that run
/// several times slower through the float units.
#[derive(Debug)]
struct FlushDenormals {
    #[cfg(target_arch = "x86_64")]
    saved: u32,
}

impl FlushDenormals {
    #[allow(deprecated)]
    fn new() -> Self {
        #[cfg(target_arch = "x86_64")]
        {
            use std::arch::x86_64::{_mm_getcsr, _mm_setcsr};
            // SAFETY: only the FTZ (bit 15) and DAZ (bit 6) flags change.
            let saved = unsafe { _mm_getcsr() };
            unsafe { _mm_setcsr(saved | 0x8040) };
            FlushDenormals { saved }
        }
        #[cfg(not(target_arch = "x86_64"))]
        FlushDenormals {}
    }
}

impl Drop for FlushDenormals {
    #[allow(deprecated)]
    fn drop(&mut self) {
        #[cfg(target_arch = "x86_64")]
        // SAFETY: restores the value read in `new`.
        unsafe {
            std::arch::x86_64::_mm_setcsr(self.saved)
        };
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            _flush: FlushDenormals::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        value.requires_grad = requires_grad;
        value.grad = None;
        let index = self.nodes.len() as u32;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index,
        }
    }

    fn node(&self, v: Var) -> &Node {
        assert_eq!(v.tape, self.id, "variable used on a foreign tape");
        &self.nodes[v.index()]
    }

    fn check_own(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index() >= self.nodes.len() {
            return Err(Error::Contract(
                "variable is not attached to this tape".into(),
            ));
        }
        Ok(())
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.node(*v).requires_grad)
    }

    /// Records a leaf; gradients are tracked if `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad;
        self.push(tensor, Op::Leaf, rg)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    /// Gradient from the last [`Tape::backward`], if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.index()).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` into `target.grad` (allocating it if absent).
    pub fn accumulate_grad(&self, v: Var, target: &mut Tensor) {
        if let Some(g) = self.grad(v) {
            let buf = target.grad.get_or_insert_with(|| vec![0.0; g.len()]);
            for (b, x) in buf.iter_mut().zip(g) {
                *b += x;
            }
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.node(a).value, &self.node(b).value);
        av.expect_rank2("matmul")?;
        bv.expect_rank2("matmul")?;
        let (p, q, q2, r) = (av.rows(), av.cols(), bv.rows(), bv.cols());
        if q != q2 {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions disagree: {:?} x {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let mut out = vec![0.0; p * r];
        gemm(
            p,
            q,
            r,
            av.data(),
            Layout::Normal,
            bv.data(),
            Layout::Normal,
            &mut out,
            0.0,
        );
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(vec![p, r], out)?, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.node(a).value, &self.node(b).value);
        let f = |x: f32, y: f32| match kind {
            Binary::Add => x + y,
            Binary::Mul => x * y,
        };
        let out = if av.shape() == bv.shape() {
            let data = av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::new(av.shape().to_vec(), data)?
        } else if let Some(pattern) = Pattern::of(av.shape(), bv.shape()) {
            let mut data = vec![0.0; av.len().max(bv.len())];
            pattern.for_each_row(|_, o, ia, ib| {
                let (x, y) = (&av.data()[ia..], &bv.data()[ib..]);
                let out = &mut data[o..o + pattern.cols];
                match pattern.kind {
                    PatternKind::RowVector => {
                        for (j, d) in out.iter_mut().enumerate() {
                            *d = f(x[j], y[j]);
                        }
                    }
                    PatternKind::ColumnScalar if pattern.scalar_left => {
                        for (j, d) in out.iter_mut().enumerate() {
                            *d = f(x[0], y[j]);
                        }
                    }
                    PatternKind::ColumnScalar => {
                        for (j, d) in out.iter_mut().enumerate() {
                            *d = f(x[j], y[0]);
                        }
                    }
                }
            });
            Tensor::new(pattern.out_shape.clone(), data)?
        } else {
            let plan = Broadcast::plan(av.shape(), bv.shape())?;
            let mut data = vec![0.0; plan.len()];
            plan.for_each(|o, ia, ib| data[o] = f(av.data()[ia], bv.data()[ib]));
            Tensor::new(plan.out_shape.clone(), data)?
        };
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Binary(kind, a, b), rg))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Softmax, a)
    }

    pub fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let av = &self.node(a).value;
        let data = match kind {
            Unary::Tanh => av.data().iter().map(|&x| tanh(x)).collect(),
            Unary::Sigmoid => av.data().iter().map(|&x| sigmoid(x)).collect(),
            Unary::Softmax => {
                if av.rank() == 0 {
                    return Err(Error::Dimension("softmax of a scalar".into()));
                }
                let width = *av.shape().last().unwrap();
                let mut out = av.data().to_vec();
                if width > 0 {
                    out.chunks_mut(width).for_each(softmax_in_place);
                }
                out
            }
        };
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::Unary(kind, a), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f32) -> Result<Var> {
        let av = &self.node(a).value;
        let out = Tensor::new(
            av.shape().to_vec(),
            av.data().iter().map(|x| x * factor).collect(),
        )?;
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::Scale(a, factor), rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f32 = self.node(a).value.data().iter().sum();
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::SumAll(a), rg))
    }

    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let s: f32 = self.node(a).value.data().iter().map(|x| x * x).sum();
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::SumSquares(a), rg))
    }

    /// Per-row dot product of two `B × N` matrices, giving `B × 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.node(a).value, &self.node(b).value);
        av.expect_rank2("row_dot")?;
        if av.shape() != bv.shape() {
            return Err(Error::Dimension(format!(
                "row_dot shapes differ: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = (0..av.rows())
            .map(|r| av.row(r).iter().zip(bv.row(r)).map(|(x, y)| x * y).sum())
            .collect();
        let out = Tensor::new(vec![av.rows(), 1], data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::RowDot(a, b), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Dimension("concat_cols of nothing".into()));
        }
        let rows = self
            .node(parts[0])
            .value
            .shape()
            .first()
            .copied()
            .unwrap_or(0);
        let mut total = 0;
        for &p in parts {
            let v = &self.node(p).value;
            v.expect_rank2("concat_cols")?;
            if v.rows() != rows {
                return Err(Error::Dimension(format!(
                    "concat_cols row mismatch: {} vs {}",
                    v.rows(),
                    rows
                )));
            }
            total += v.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.node(p).value.row(r));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        let rg = self.needs(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Dimension("concat_rows of nothing".into()));
        }
        let cols = self
            .node(parts[0])
            .value
            .shape()
            .get(1)
            .copied()
            .unwrap_or(0);
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = &self.node(p).value;
            v.expect_rank2("concat_rows")?;
            if v.cols() != cols {
                return Err(Error::Dimension(format!(
                    "concat_rows column mismatch: {} vs {}",
                    v.cols(),
                    cols
                )));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        let rg = self.needs(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = &self.node(a).value;
        av.expect_rank2("slice_rows")?;
        if start + len > av.rows() {
            return Err(Error::Dimension(format!(
                "slice_rows {start}..{} out of {} rows",
                start + len,
                av.rows()
            )));
        }
        let c = av.cols();
        let out = Tensor::new(
            vec![len, c],
            av.data()[start * c..(start + len) * c].to_vec(),
        )?;
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::SliceRows(a, start), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = &self.node(a).value;
        av.expect_rank2("slice_cols")?;
        if start + len > av.cols() {
            return Err(Error::Dimension(format!(
                "slice_cols {start}..{} out of {} columns",
                start + len,
                av.cols()
            )));
        }
        let data = (0..av.rows())
            .flat_map(|r| av.row(r)[start..start + len].iter().copied())
            .collect();
        let out = Tensor::new(vec![av.rows(), len], data)?;
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::SliceCols(a, start), rg))
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = &self.node(table).value;
        tv.expect_rank2("gather_rows")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= tv.rows()) {
            return Err(Error::Contract(format!(
                "gather_rows id {bad} out of range for {} rows",
                tv.rows()
            )));
        }
        let data = ids
            .iter()
            .flat_map(|&i| tv.row(i).iter().copied())
            .collect();
        let out = Tensor::new(vec![ids.len(), tv.cols()], data)?;
        let rg = self.needs(&[table]);
        Ok(self.push(out, Op::GatherRows(table, ids.to_vec()), rg))
    }

    /// LSTM cell state update. `gates` is `B × 4H` pre-activations in
    /// `[input, forget, candidate, output]` order; returns
    /// `c = σ(f)⊙c_prev + σ(i)⊙tanh(g)`.
    pub fn lstm_cell_state(&mut self, gates: Var, c_prev: Var) -> Result<Var> {
        let (gv, cv) = (&self.node(gates).value, &self.node(c_prev).value);
        let h = lstm_hidden(gv, cv)?;
        let mut data = vec![0.0; cv.len()];
        let mut act = vec![0.0; 3 * cv.len()];
        for r in 0..cv.rows() {
            let g = gv.row(r);
            let cp = cv.row(r);
            let a = &mut act[r * 3 * h..(r + 1) * 3 * h];
            for j in 0..2 * h {
                a[j] = sigmoid(g[j]);
            }
            for j in 0..h {
                a[2 * h + j] = tanh(g[2 * h + j]);
            }
            let out = &mut data[r * h..(r + 1) * h];
            for j in 0..h {
                out[j] = a[h + j] * cp[j] + a[j] * a[2 * h + j];
            }
        }
        let out = Tensor::new(cv.shape().to_vec(), data)?;
        let rg = self.needs(&[gates, c_prev]);
        let act = if rg { act } else { Vec::new() };
        Ok(self.push(out, Op::LstmCellState { gates, c_prev, act }, rg))
    }

    /// LSTM cell output `h = σ(o)⊙tanh(c)` for the same gate layout.
    pub fn lstm_cell_output(&mut self, gates: Var, c: Var) -> Result<Var> {
        let (gv, cv) = (&self.node(gates).value, &self.node(c).value);
        let h = lstm_hidden(gv, cv)?;
        let mut data = vec![0.0; cv.len()];
        let mut act = vec![0.0; 2 * cv.len()];
        for r in 0..cv.rows() {
            let g = &gv.row(r)[3 * h..];
            let cr = cv.row(r);
            let a = &mut act[r * 2 * h..(r + 1) * 2 * h];
            for j in 0..h {
                a[j] = sigmoid(g[j]);
                a[h + j] = tanh(cr[j]);
            }
            let out = &mut data[r * h..(r + 1) * h];
            for j in 0..h {
                out[j] = a[j] * a[h + j];
            }
        }
        let out = Tensor::new(cv.shape().to_vec(), data)?;
        let rg = self.needs(&[gates, c]);
        let act = if rg { act } else { Vec::new() };
        Ok(self.push(out, Op::LstmCellOutput { gates, c, act }, rg))
    }

    /// Summed softmax cross-entropy of each logits row against its target id,
    /// computed through log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = &self.node(logits).value;
        lv.expect_rank2("cross_entropy")?;
        if targets.len() != lv.rows() {
            return Err(Error::Dimension(format!(
                "cross_entropy has {} targets for {} rows",
                targets.len(),
                lv.rows()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= lv.cols()) {
            return Err(Error::Contract(format!(
                "token id {bad} out of range for vocabulary of {}",
                lv.cols()
            )));
        }
        let mut total = 0.0f64;
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row(r);
            total += f64::from(log_sum_exp(row) - row[t]);
        }
        let out = Tensor::scalar(total as f32);
        let rg = self.needs(&[logits]);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`. Previous gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check_own(loss)?;
        let lv = &self.node(loss).value;
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.index()] = Some(vec![1.0]);
        for idx in (0..=loss.index()).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(idx, &upstream, &mut grads);
            }
            grads[idx] = Some(upstream);
        }
        // Only keep buffers for values that asked for them.
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, up: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (p, q, r) = (av.rows(), av.cols(), bv.cols());
                if self.wants(*a) {
                    let g = self.slot(grads, *a);
                    // dA += dC · Bᵀ
                    gemm(
                        p,
                        r,
                        q,
                        up,
                        Layout::Normal,
                        bv.data(),
                        Layout::Transposed,
                        g,
                        1.0,
                    );
                }
                if self.wants(*b) {
                    let g = self.slot(grads, *b);
                    // dB += Aᵀ · dC
                    gemm(
                        q,
                        p,
                        r,
                        av.data(),
                        Layout::Transposed,
                        up,
                        Layout::Normal,
                        g,
                        1.0,
                    );
                }
            }
            Op::Binary(kind, a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if av.shape() == bv.shape() {
                    if self.wants(*a) {
                        let g = self.slot(grads, *a);
                        match kind {
                            Binary::Add => axpy(g, up),
                            Binary::Mul => {
                                for ((gi, u), y) in g.iter_mut().zip(up).zip(bv.data()) {
                                    *gi += u * y;
                                }
                            }
                        }
                    }
                    if self.wants(*b) {
                        let g = self.slot(grads, *b);
                        match kind {
                            Binary::Add => axpy(g, up),
                            Binary::Mul => {
                                for ((gi, u), x) in g.iter_mut().zip(up).zip(av.data()) {
                                    *gi += u * x;
                                }
                            }
                        }
                    }
                } else if let Some(pattern) = Pattern::of(av.shape(), bv.shape()) {
                    let cols = pattern.cols;
                    if self.wants(*a) {
                        let g = self.slot(grads, *a);
                        pattern.for_each_row(|_, o, ia, ib| {
                            let u = &up[o..o + cols];
                            match (kind, pattern.operand_width(true)) {
                                (Binary::Add, 1) => g[ia] += u.iter().sum::<f32>(),
                                (Binary::Add, _) => axpy(&mut g[ia..ia + cols], u),
                                (Binary::Mul, w) => {
                                    let other = &bv.data()[ib..ib + pattern.operand_width(false)];
                                    mul_acc(&mut g[ia..ia + w], u, other);
                                }
                            }
                        });
                    }
                    if self.wants(*b) {
                        let g = self.slot(grads, *b);
                        pattern.for_each_row(|_, o, ia, ib| {
                            let u = &up[o..o + cols];
                            match (kind, pattern.operand_width(false)) {
                                (Binary::Add, 1) => g[ib] += u.iter().sum::<f32>(),
                                (Binary::Add, _) => axpy(&mut g[ib..ib + cols], u),
                                (Binary::Mul, w) => {
                                    let other = &av.data()[ia..ia + pattern.operand_width(true)];
                                    mul_acc(&mut g[ib..ib + w], u, other);
                                }
                            }
                        });
                    }
                } else {
                    let plan =
                        Broadcast::plan(av.shape(), bv.shape()).expect("validated in forward");
                    if self.wants(*a) {
                        let g = self.slot(grads, *a);
                        plan.for_each(|o, ia, ib| {
                            g[ia] += match kind {
                                Binary::Add => up[o],
                                Binary::Mul => up[o] * bv.data()[ib],
                            }
                        });
                    }
                    if self.wants(*b) {
                        let g = self.slot(grads, *b);
                        plan.for_each(|o, ia, ib| {
                            g[ib] += match kind {
                                Binary::Add => up[o],
                                Binary::Mul => up[o] * av.data()[ia],
                            }
                        });
                    }
                }
            }
            Op::Unary(kind, a) => {
                if !self.wants(*a) {
                    return;
                }
                let y = out.data();
                let g = self.slot(grads, *a);
                match kind {
                    Unary::Tanh => {
                        for ((gi, u), y) in g.iter_mut().zip(up).zip(y) {
                            *gi += u * (1.0 - y * y);
                        }
                    }
                    Unary::Sigmoid => {
                        for ((gi, u), y) in g.iter_mut().zip(up).zip(y) {
                            *gi += u * y * (1.0 - y);
                        }
                    }
                    Unary::Softmax => {
                        let width = *out.shape().last().unwrap();
                        for ((gr, ur), yr) in g
                            .chunks_mut(width)
                            .zip(up.chunks(width))
                            .zip(y.chunks(width))
                        {
                            let dot: f32 = ur.iter().zip(yr).map(|(u, y)| u * y).sum();
                            for ((gi, u), y) in gr.iter_mut().zip(ur).zip(yr) {
                                *gi += y * (u - dot);
                            }
                        }
                    }
                }
            }
            Op::Scale(a, f) => {
                if self.wants(*a) {
                    let g = self.slot(grads, *a);
                    for (gi, u) in g.iter_mut().zip(up) {
                        *gi += u * f;
                    }
                }
            }
            Op::SumAll(a) => {
                if self.wants(*a) {
                    let g = self.slot(grads, *a);
                    g.iter_mut().for_each(|gi| *gi += up[0]);
                }
            }
            Op::SumSquares(a) => {
                if self.wants(*a) {
                    let x = self.value(*a).data();
                    let g = self.slot(grads, *a);
                    for (gi, x) in g.iter_mut().zip(x) {
                        *gi += 2.0 * x * up[0];
                    }
                }
            }
            Op::RowDot(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let c = av.cols();
                for (this, other) in [(*a, bv), (*b, av)] {
                    if self.wants(this) {
                        let g = self.slot(grads, this);
                        for (r, u) in up.iter().enumerate() {
                            let src = other.row(r);
                            for (gi, s) in g[r * c..(r + 1) * c].iter_mut().zip(src) {
                                *gi += u * s;
                            }
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.wants(p) {
                        let g = self.slot(grads, p);
                        for r in 0..out.rows() {
                            axpy(
                                &mut g[r * w..(r + 1) * w],
                                &up[r * total + offset..r * total + offset + w],
                            );
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.wants(p) {
                        let g = self.slot(grads, p);
                        axpy(g, &up[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::SliceRows(a, start) => {
                if self.wants(*a) {
                    let c = out.cols();
                    let g = self.slot(grads, *a);
                    axpy(&mut g[start * c..start * c + up.len()], up);
                }
            }
            Op::SliceCols(a, start) => {
                if self.wants(*a) {
                    let src_cols = self.value(*a).cols();
                    let w = out.cols();
                    let g = self.slot(grads, *a);
                    for r in 0..out.rows() {
                        let base = r * src_cols + start;
                        axpy(&mut g[base..base + w], &up[r * w..(r + 1) * w]);
                    }
                }
            }
            Op::GatherRows(table, ids) => {
                if self.wants(*table) {
                    let c = out.cols();
                    let g = self.slot(grads, *table);
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(&mut g[id * c..(id + 1) * c], &up[r * c..(r + 1) * c]);
                    }
                }
            }
            Op::LstmCellState { gates, c_prev, act } => {
                let cp = self.value(*c_prev);
                let h = cp.cols();
                if self.wants(*gates) {
                    let g = self.slot(grads, *gates);
                    for r in 0..cp.rows() {
                        let a = &act[r * 3 * h..(r + 1) * 3 * h];
                        let u = &up[r * h..(r + 1) * h];
                        let c0 = cp.row(r);
                        let gr = &mut g[r * 4 * h..(r + 1) * 4 * h];
                        for j in 0..h {
                            let (i, f, cand) = (a[j], a[h + j], a[2 * h + j]);
                            gr[j] += u[j] * cand * i * (1.0 - i);
                            gr[h + j] += u[j] * c0[j] * f * (1.0 - f);
                            gr[2 * h + j] += u[j] * i * (1.0 - cand * cand);
                        }
                    }
                }
                if self.wants(*c_prev) {
                    let g = self.slot(grads, *c_prev);
                    for r in 0..cp.rows() {
                        let a = &act[r * 3 * h + h..r * 3 * h + 2 * h];
                        for j in 0..h {
                            g[r * h + j] += up[r * h + j] * a[j];
                        }
                    }
                }
            }
            Op::LstmCellOutput { gates, c, act } => {
                let cv = self.value(*c);
                let h = cv.cols();
                if self.wants(*gates) {
                    let g = self.slot(grads, *gates);
                    for r in 0..cv.rows() {
                        let a = &act[r * 2 * h..(r + 1) * 2 * h];
                        let gr = &mut g[r * 4 * h + 3 * h..(r + 1) * 4 * h];
                        for j in 0..h {
                            let o = a[j];
                            gr[j] += up[r * h + j] * a[h + j] * o * (1.0 - o);
                        }
                    }
                }
                if self.wants(*c) {
                    let g = self.slot(grads, *c);
                    for r in 0..cv.rows() {
                        let a = &act[r * 2 * h..(r + 1) * 2 * h];
                        for j in 0..h {
                            let t = a[h + j];
                            g[r * h + j] += up[r * h + j] * a[j] * (1.0 - t * t);
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets } => {
                if self.wants(*logits) {
                    let lv = self.value(*logits);
                    let v = lv.cols();
                    let g = self.slot(grads, *logits);
                    for (r, &t) in targets.iter().enumerate() {
                        let mut p = lv.row(r).to_vec();
                        softmax_in_place(&mut p);
                        p[t] -= 1.0;
                        for (gi, pi) in g[r * v..(r + 1) * v].iter_mut().zip(&p) {
                            *gi += up[0] * pi;
                        }
                    }
                }
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.index()].requires_grad
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f32>>], v: Var) -> &'g mut Vec<f32> {
        let len = self.nodes[v.index()].value.len();
        grads[v.index()].get_or_insert_with(|| vec![0.0; len])
    }
}

fn lstm_hidden(gates: &Tensor, c: &Tensor) -> Result<usize> {
    gates.expect_rank2("lstm cell")?;
    c.expect_rank2("lstm cell")?;
    let h = c.cols();
    if gates.rows() != c.rows() || gates.cols() != 4 * h {
        return Err(Error::Dimension(format!(
            "lstm cell gates {:?} incompatible with state {:?}",
            gates.shape(),
            c.shape()
        )));
    }
    Ok(h)
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + exp(-x))
}

/// `tanh` via [`exp`]; a short odd series near zero avoids cancellation.
#[inline]
pub fn tanh(x: f32) -> f32 {
    let a = x.abs();
    if a < 0.04 {
        let x2 = x * x;
        x * (1.0 - x2 * (1.0 / 3.0 - x2 * (2.0 / 15.0)))
    } else {
        let t = exp(-2.0 * a);
        ((1.0 - t) / (1.0 + t)).copysign(x)
    }
}

/// Single-precision `exp` by range reduction and a degree-6 polynomial
/// (Cephes coefficients). Branch-free so loops over it vectorize; within a
/// couple of ulps of the correctly rounded value.
#[inline]
#[allow(clippy::excessive_precision)]
pub fn exp(x: f32) -> f32 {
    const ROUND: f32 = 12_582_912.0; // 1.5 * 2^23
    let x = x.clamp(-87.0, 88.0);
    let n = (x * std::f32::consts::LOG2_E + ROUND) - ROUND;
    let r = x - n * 0.693_359_375 + n * 2.121_944_4e-4;
    let r2 = r * r;
    let p = (((((1.987_569_1e-4 * r + 1.398_199_9e-3) * r + 8.333_452e-3) * r + 4.166_579_6e-2)
        * r
        + 1.666_666_5e-1)
        * r
        + 5.000_000_1e-1)
        * r2
        + r
        + 1.0;
    p * f32::from_bits(((n as i32 + 127) as u32) << 23)
}

pub fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn log_sum_exp(row: &[f32]) -> f32 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let sum: f32 = row.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

fn axpy(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `dst += up ⊙ other` where either `dst` or `other` may be a single value
/// broadcast along the row of `up`.
fn mul_acc(dst: &mut [f32], up: &[f32], other: &[f32]) {
    match (dst.len(), other.len()) {
        (1, _) => dst[0] += up.iter().zip(other).map(|(u, o)| u * o).sum::<f32>(),
        (_, 1) => dst.iter_mut().zip(up).for_each(|(d, u)| *d += u * other[0]),
        _ => dst
            .iter_mut()
            .zip(up)
            .zip(other)
            .for_each(|((d, u), o)| *d += u * o),
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum PatternKind {
    /// `[R, C]` with `[C]` or `[1, C]`.
    RowVector,
    /// `[R, C]` with `[R, 1]`.
    ColumnScalar,
}

/// Common rank-2 broadcasts handled row by row instead of element by element.
struct Pattern {
    kind: PatternKind,
    rows: usize,
    cols: usize,
    /// The full matrix is on the right (`[R,1] op [R,C]` or `[C] op [R,C]`).
    scalar_left: bool,
    out_shape: Vec<usize>,
}

impl Pattern {
    fn of(a: &[usize], b: &[usize]) -> Option<Self> {
        let classify = |full: &[usize], small: &[usize]| -> Option<PatternKind> {
            if full.len() != 2 {
                return None;
            }
            let (r, c) = (full[0], full[1]);
            match small {
                [x] if *x == c => Some(PatternKind::RowVector),
                [1, x] if *x == c && r != 1 => Some(PatternKind::RowVector),
                [x, 1] if *x == r && c != 1 => Some(PatternKind::ColumnScalar),
                _ => None,
            }
        };
        let (kind, full, scalar_left) = if let Some(k) = classify(a, b) {
            (k, a, false)
        } else {
            (classify(b, a)?, b, true)
        };
        Some(Pattern {
            kind,
            rows: full[0],
            cols: full[1],
            scalar_left,
            out_shape: full.to_vec(),
        })
    }

    /// Width of the left (`true`) or right operand's slice for one row.
    fn operand_width(&self, left: bool) -> usize {
        let small = left == self.scalar_left;
        match (small, self.kind) {
            (false, _) => self.cols,
            (true, PatternKind::RowVector) => self.cols,
            (true, PatternKind::ColumnScalar) => 1,
        }
    }

    /// Calls `f(row, out_offset, a_offset, b_offset)` for each output row.
    fn for_each_row(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        for r in 0..self.rows {
            let full = r * self.cols;
            let small = match self.kind {
                PatternKind::RowVector => 0,
                PatternKind::ColumnScalar => r,
            };
            let (ia, ib) = if self.scalar_left {
                (small, full)
            } else {
                (full, small)
            };
            f(r, full, ia, ib);
        }
    }
}

#[derive(Clone, Copy)]
enum Layout {
    Normal,
    Transposed,
}

/// `c = a·b + beta·c` where `a` is `m × k` and `b` is `k × n` after applying
/// each operand's layout to its stored row-major buffer.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    la: Layout,
    b: &[f32],
    lb: Layout,
    c: &mut [f32],
    beta: f32,
) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = match la {
        Layout::Normal => (k as isize, 1),
        Layout::Transposed => (1, m as isize),
    };
    let (rsb, csb) = match lb {
        Layout::Normal => (n as isize, 1),
        Layout::Transposed => (1, k as isize),
    };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: buffer extents are checked above and strides describe them exactly.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Index mapping for trailing-dimension broadcasting of two operands.
struct Broadcast {
    out_shape: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
}

impl Broadcast {
    fn plan(a: &[usize], b: &[usize]) -> Result<Self> {
        let rank = a.len().max(b.len());
        let pad = |s: &[usize]| {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(a), pad(b));
        let mut out_shape = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            let d = if x == y || y == 1 {
                x
            } else if x == 1 {
                y
            } else {
                return Err(Error::Dimension(format!(
                    "shapes {a:?} and {b:?} do not broadcast"
                )));
            };
            out_shape.push(d);
        }
        let strides = |s: &[usize]| {
            let mut st = vec![0; rank];
            let mut acc = 1;
            for i in (0..rank).rev() {
                st[i] = if s[i] == 1 { 0 } else { acc };
                acc *= s[i];
            }
            st
        };
        Ok(Broadcast {
            a_strides: strides(&pa),
            b_strides: strides(&pb),
            out_shape,
        })
    }

    fn len(&self) -> usize {
        self.out_shape.iter().product()
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let rank = self.out_shape.len();
        let total = self.len();
        if total == 0 {
            return;
        }
        let mut idx = vec![0usize; rank];
        let (mut ia, mut ib) = (0usize, 0usize);
        for o in 0..total {
            f(o, ia, ib);
            for d in (0..rank).rev() {
                idx[d] += 1;
                ia += self.a_strides[d];
                ib += self.b_strides[d];
                if idx[d] < self.out_shape[d] {
                    break;
                }
                ia -= self.a_strides[d] * idx[d];
                ib -= self.b_strides[d] * idx[d];
                idx[d] = 0;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[Vec<f32>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut t = Tape::new();
        let i = t.constant(mat(&[vec![1., 0.], vec![0., 1.]]));
        let a = t.constant(mat(&[vec![1., 2.], vec![3., 4.]]));
        let c = t.matmul(i, a).unwrap();
        assert_eq!(t.value(c).data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn row_times_column() {
        let mut t = Tape::new();
        let a = t.constant(mat(&[vec![1., 2.]]));
        let b = t.constant(mat(&[vec![3.], vec![4.]]));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[11.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] x [2, 3]"), "{err}");
    }

    #[test]
    fn activations_at_known_points() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::new(vec![3], vec![0., 0., 0.]).unwrap());
        let s = t.sigmoid(z).unwrap();
        assert_eq!(t.value(s).data()[0], 0.5);
        let sm = t.softmax(z).unwrap();
        for p in t.value(sm).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_is_shift_normalized() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![1, 3], vec![1000., 1001., 1002.]).unwrap());
        let y = t.softmax(x).unwrap();
        let v = t.value(y).data();
        assert!(v.iter().all(|p| p.is_finite()));
        assert!((v.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn broadcast_rules() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let bias = t.constant(Tensor::new(vec![3], vec![10., 20., 30.]).unwrap());
        let col = t.constant(Tensor::new(vec![2, 1], vec![2., 3.]).unwrap());
        let s = t.add(a, bias).unwrap();
        assert_eq!(t.value(s).data(), &[11., 22., 33., 14., 25., 36.]);
        let m = t.mul(col, a).unwrap();
        assert_eq!(t.value(m).data(), &[2., 4., 6., 12., 15., 18.]);
        let bad = t.constant(Tensor::zeros(&[2]));
        assert!(matches!(t.add(a, bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn row_and_column_broadcast_gradients() {
        // loss = Σ w ⊙ (a + bias) + Σ w ⊙ (col ⊙ a), checked against the
        // hand-derived gradients in both operand orders.
        let (r, c) = (3, 4);
        let av: Vec<f32> = (0..r * c).map(|i| (i as f32 * 0.37).sin()).collect();
        let wv: Vec<f32> = (0..r * c).map(|i| (i as f32 * 0.91).cos()).collect();
        let bv = vec![0.5, -1.0, 2.0, 0.25];
        let cv = vec![1.5, -0.5, 3.0];
        for swap in [false, true] {
            let mut t = Tape::new();
            let a = t.leaf(Tensor::new(vec![r, c], av.clone()).unwrap().with_grad());
            let b = t.leaf(Tensor::new(vec![c], bv.clone()).unwrap().with_grad());
            let col = t.leaf(Tensor::new(vec![r, 1], cv.clone()).unwrap().with_grad());
            let w = t.constant(Tensor::new(vec![r, c], wv.clone()).unwrap());
            let s = if swap { t.add(b, a) } else { t.add(a, b) }.unwrap();
            let m = if swap { t.mul(a, col) } else { t.mul(col, a) }.unwrap();
            let s = t.mul(s, w).unwrap();
            let m = t.mul(m, w).unwrap();
            let ls = t.sum(s).unwrap();
            let lm = t.sum(m).unwrap();
            let l = t.add(ls, lm).unwrap();
            t.backward(l).unwrap();
            for i in 0..r {
                for j in 0..c {
                    let k = i * c + j;
                    let expect = wv[k] + wv[k] * cv[i];
                    assert!((t.grad(a).unwrap()[k] - expect).abs() < 1e-6);
                }
                let gc: f32 = (0..c).map(|j| wv[i * c + j] * av[i * c + j]).sum();
                assert!((t.grad(col).unwrap()[i] - gc).abs() < 1e-5);
            }
            for j in 0..c {
                let gb: f32 = (0..r).map(|i| wv[i * c + j]).sum();
                assert!((t.grad(b).unwrap()[j] - gb).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn polynomial_exp_and_tanh_accuracy() {
        let mut x = -30.0f32;
        while x < 30.0 {
            let e = f64::from(exp(x));
            let want = f64::from(x).exp();
            assert!((e - want).abs() / want < 5e-7, "exp({x})");
            let th = f64::from(tanh(x));
            let want = f64::from(x).tanh();
            assert!(
                (th - want).abs() <= 1e-6 * want.abs().max(1e-3),
                "tanh({x})"
            );
            x += 0.0137;
        }
        for x in [1e-6f32, -1e-6, 0.03999, 0.04, -0.04] {
            let rel = (f64::from(tanh(x)) - f64::from(x).tanh()).abs() / f64::from(x).tanh().abs();
            assert!(rel < 1e-6, "tanh({x})");
        }
        assert_eq!(tanh(0.0), 0.0);
        assert!(exp(-200.0) >= 0.0 && exp(200.0).is_finite());
    }

    #[test]
    fn sum_gives_ones() {
        let mut t = Tape::new();
        let x = t.leaf(
            Tensor::new(vec![2, 2, 2], vec![0.5; 8])
                .unwrap()
                .with_grad(),
        );
        let l = t.sum(x).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0; 8]);
    }

    #[test]
    fn square_sum_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![3], vec![1., 2., 3.]).unwrap().with_grad());
        let sq = t.mul(x, x).unwrap();
        let l = t.sum(sq).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2., 4., 6.]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(&[2]).with_grad());
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_rejects_foreign_var() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let x = a.leaf(Tensor::scalar(1.0).with_grad());
        let _ = b.leaf(Tensor::scalar(1.0).with_grad());
        assert!(matches!(b.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_grad() {
        let mut t = Tape::new();
        let c = t.constant(Tensor::scalar(3.0));
        let x = t.leaf(Tensor::scalar(2.0).with_grad());
        let y = t.mul(c, x).unwrap();
        t.backward(y).unwrap();
        assert!(t.grad(c).is_none());
        assert_eq!(t.grad(x).unwrap(), &[3.0]);
    }

    #[test]
    fn cross_entropy_rejects_bad_token() {
        let mut t = Tape::new();
        let l = t.constant(Tensor::zeros(&[1, 4]));
        assert!(matches!(t.cross_entropy(l, &[4]), Err(Error::Contract(_))));
    }

    #[test]
    fn tensor_shape_invariant() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        let mut bad = Tensor::zeros(&[2]);
        bad.data_mut()[1] = f32::NAN;
        assert!(matches!(bad.check_finite("w"), Err(Error::NonFinite(_))));
    }
}
