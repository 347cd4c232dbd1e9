//! Reverse-mode automatic differentiation over a recorded operation tape.
//!
//! Every operation appends a node holding its output value and operand
//! references; `backward` replays the tape in reverse, accumulating
//! gradients into parameter leaves. Values are immutable once recorded.
//!
//! Gradient contributions are computed through [`bmul`], which treats an
//! incoming zero gradient as an exact zero regardless of the local factor.
//! This is what keeps gradients from leaking through entries masked to
//! -inf (0 * inf would otherwise be NaN).

use crate::error::{Error, Result};
use crate::similarity::SimilarityKind;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
pub enum BroadcastMode {
    /// 1x1 -> r x c; backward sums everything.
    Scalar,
    /// r x 1 -> r x c; backward sums each row.
    Col,
    /// 1 x c -> r x c; backward sums each column.
    Row,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Sigmoid(usize),
    Relu(usize),
    Softplus(usize),
    Clamp { a: usize, lo: f64, hi: f64 },
    Pow(usize, usize),
    PowScalar { a: usize, p: f64 },
    AddScalar { a: usize },
    MulScalar { a: usize, c: f64 },
    Matmul(usize, usize),
    Transpose(usize),
    Broadcast { a: usize, mode: BroadcastMode },
    SumAll(usize),
    Mean(usize),
    RowSum(usize),
    SliceCol { a: usize, col: usize },
    Select { cond: usize, then: usize, otherwise: usize },
    RowSoftmax(usize),
    MinElem(usize, usize),
    RowMax { a: usize, argmax: Vec<usize> },
    MinMaxRows {
        a: usize,
        exclude_diag: bool,
        argmin: Vec<usize>,
        argmax: Vec<usize>,
        degenerate: Vec<bool>,
    },
    PairwiseSim { kind: SimilarityKind, z: usize, zn: usize },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

/// Backward multiply that treats a zero upstream gradient as an exact zero.
#[inline]
fn bmul(g: f64, f: f64) -> f64 {
    if g == 0.0 {
        0.0
    } else {
        g * f
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

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Record a trainable leaf. Its gradient is populated by `backward`.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true)
    }

    /// Record a constant leaf (data, masks); no gradient is tracked.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false)
    }

    fn check_same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if !self.value(a).same_shape(self.value(b)) {
            return Err(Error::Dimension(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn zip_ew(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(op, Tensor::raw(shape, out), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "add")?;
        self.zip_ew(a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "sub")?;
        self.zip_ew(a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "mul")?;
        self.zip_ew(a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "div")?;
        self.zip_ew(a, b, |x, y| x / y, Op::Div(a.0, b.0))
    }

    fn map_ew(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out: Vec<f64> = self.value(a).data().iter().map(|&x| f(x)).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a);
        self.push(op, Tensor::raw(shape, out), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.map_ew(a, |x| -x, Op::Neg(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map_ew(a, f64::exp, Op::Exp(a.0))
    }

    /// Natural log. log(0) yields -inf; that is permitted only on the
    /// masking path, where the softmax downstream zeroes its gradient.
    pub fn log(&mut self, a: Var) -> Var {
        self.map_ew(a, f64::ln, Op::Log(a.0))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.map_ew(a, f64::sqrt, Op::Sqrt(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map_ew(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map_ew(a, |x| x.max(0.0), Op::Relu(a.0))
    }

    /// Numerically stable ln(1 + e^x).
    pub fn softplus(&mut self, a: Var) -> Var {
        self.map_ew(a, |x| x.max(0.0) + (-x.abs()).exp().ln_1p(), Op::Softplus(a.0))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map_ew(a, |x| x.clamp(lo, hi), Op::Clamp { a: a.0, lo, hi })
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map_ew(a, |x| x + c, Op::AddScalar { a: a.0 })
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map_ew(a, |x| x * c, Op::MulScalar { a: a.0, c })
    }

    /// Elementwise a^b for tensor base and exponent.
    pub fn pow(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "pow")?;
        for (&base, &expo) in self.value(a).data().iter().zip(self.value(b).data()) {
            if base < 0.0 && expo.fract() != 0.0 {
                return Err(Error::Domain(format!(
                    "pow: negative base {base} with non-integer exponent {expo}"
                )));
            }
        }
        self.zip_ew(a, b, f64::powf, Op::Pow(a.0, b.0))
    }

    pub fn pow_scalar(&mut self, a: Var, p: f64) -> Result<Var> {
        for &base in self.value(a).data() {
            if base < 0.0 && p.fract() != 0.0 {
                return Err(Error::Domain(format!(
                    "pow: negative base {base} with non-integer exponent {p}"
                )));
            }
        }
        Ok(self.map_ew(a, |x| x.powf(p), Op::PowScalar { a: a.0, p }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.is_matrix() || !tb.is_matrix() || ta.cols() != tb.rows() {
            return Err(Error::Dimension(format!(
                "matmul: {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for l in 0..k {
                let av = ta.at(i, l);
                if av == 0.0 {
                    continue;
                }
                let brow = tb.row(l);
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Matmul(a.0, b.0), Tensor::raw(vec![m, n], out), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = t.at(i, j);
            }
        }
        let rg = self.rg(a);
        self.push(Op::Transpose(a.0), Tensor::raw(vec![c, r], out), rg)
    }

    /// Broadcast a scalar, column, or row to the given 2-D shape.
    pub fn broadcast(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let t = self.value(a);
        let mode = match (t.rows(), t.cols()) {
            (1, 1) => BroadcastMode::Scalar,
            (r, 1) if r == rows => BroadcastMode::Col,
            (1, c) if c == cols => BroadcastMode::Row,
            _ => {
                return Err(Error::Dimension(format!(
                    "broadcast: cannot expand {:?} to [{rows}, {cols}]",
                    t.shape()
                )))
            }
        };
        let mut out = vec![0.0; rows * cols];
        match mode {
            BroadcastMode::Scalar => out.fill(t.item()),
            BroadcastMode::Col => {
                for i in 0..rows {
                    out[i * cols..(i + 1) * cols].fill(t.data()[i]);
                }
            }
            BroadcastMode::Row => {
                for i in 0..rows {
                    out[i * cols..(i + 1) * cols].copy_from_slice(t.data());
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Op::Broadcast { a: a.0, mode }, Tensor::raw(vec![rows, cols], out), rg))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Op::SumAll(a.0), Tensor::scalar(s), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Op::Mean(a.0), Tensor::scalar(s / n), rg)
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out: Vec<f64> = (0..t.rows()).map(|i| t.row(i).iter().sum()).collect();
        let r = t.rows();
        let rg = self.rg(a);
        self.push(Op::RowSum(a.0), Tensor::raw(vec![r, 1], out), rg)
    }

    /// Extract one column as an r x 1 tensor.
    pub fn slice_col(&mut self, a: Var, col: usize) -> Result<Var> {
        let t = self.value(a);
        if col >= t.cols() {
            return Err(Error::Dimension(format!(
                "slice_col: column {col} out of {}",
                t.cols()
            )));
        }
        let out: Vec<f64> = (0..t.rows()).map(|i| t.at(i, col)).collect();
        let r = t.rows();
        let rg = self.rg(a);
        Ok(self.push(Op::SliceCol { a: a.0, col }, Tensor::raw(vec![r, 1], out), rg))
    }

    /// Elementwise select: cond != 0 picks `then`, otherwise `otherwise`.
    /// `cond` is treated as a constant; gradient flows only to the chosen side.
    pub fn select(&mut self, cond: Var, then: Var, otherwise: Var) -> Result<Var> {
        self.check_same_shape(cond, then, "select")?;
        self.check_same_shape(then, otherwise, "select")?;
        let out: Vec<f64> = self
            .value(cond)
            .data()
            .iter()
            .zip(self.value(then).data().iter().zip(self.value(otherwise).data()))
            .map(|(&c, (&x, &y))| if c != 0.0 { x } else { y })
            .collect();
        let shape = self.value(then).shape().to_vec();
        let rg = self.rg(then) || self.rg(otherwise);
        Ok(self.push(
            Op::Select { cond: cond.0, then: then.0, otherwise: otherwise.0 },
            Tensor::raw(shape, out),
            rg,
        ))
    }

    /// Elementwise minimum; gradient routes to the smaller operand
    /// (ties go to the first).
    pub fn min_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "min_elem")?;
        self.zip_ew(a, b, f64::min, Op::MinElem(a.0, b.0))
    }

    /// Row-wise softmax with shift-by-row-max stabilization. Entries at
    /// -inf map to exactly 0; a fully -inf row is a degenerate-row error.
    pub fn rowwise_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = t.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                return Err(Error::DegenerateRow(i));
            }
            let orow = &mut out[i * c..(i + 1) * c];
            let mut z = 0.0;
            for j in 0..c {
                let e = if row[j] == f64::NEG_INFINITY { 0.0 } else { (row[j] - mx).exp() };
                orow[j] = e;
                z += e;
            }
            for v in orow.iter_mut() {
                *v /= z;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Op::RowSoftmax(a.0), Tensor::raw(vec![r, c], out), rg))
    }

    /// Row-wise max, optionally skipping the diagonal entry.
    pub fn row_max(&mut self, a: Var, exclude_diag: bool) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        if exclude_diag && (r != c || c < 2) {
            return Err(Error::Dimension(
                "row_max: diagonal exclusion needs a square matrix with >= 2 columns".into(),
            ));
        }
        let mut out = Vec::with_capacity(r);
        let mut argmax = Vec::with_capacity(r);
        for i in 0..r {
            let row = t.row(i);
            let mut best = f64::NEG_INFINITY;
            let mut bj = 0;
            for (j, &v) in row.iter().enumerate() {
                if exclude_diag && j == i {
                    continue;
                }
                if v > best {
                    best = v;
                    bj = j;
                }
            }
            out.push(best);
            argmax.push(bj);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Op::RowMax { a: a.0, argmax },
            Tensor::raw(vec![r, 1], out),
            rg,
        ))
    }

    /// Row-wise min-max normalization to [0, 1].
    ///
    /// With `exclude_diag`, the self entry is dropped from the min/max
    /// statistics and its normalized value is set to 0 (it is hard-masked
    /// downstream regardless). A degenerate row (max == min) normalizes
    /// to all ones: with zero contrast, no neighbor is rejected.
    pub fn minmax_normalize_rows(&mut self, a: Var, exclude_diag: bool) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        if exclude_diag && (r != c || c < 2) {
            return Err(Error::Dimension(
                "minmax: diagonal exclusion needs a square matrix with >= 2 columns".into(),
            ));
        }
        if !exclude_diag && c < 1 {
            return Err(Error::Dimension("minmax: empty rows".into()));
        }
        let mut out = vec![0.0; r * c];
        let mut argmin = Vec::with_capacity(r);
        let mut argmax = Vec::with_capacity(r);
        let mut degenerate = Vec::with_capacity(r);
        for i in 0..r {
            let row = t.row(i);
            let (mut mn, mut mx) = (f64::INFINITY, f64::NEG_INFINITY);
            let (mut jmn, mut jmx) = (0, 0);
            for (j, &v) in row.iter().enumerate() {
                if exclude_diag && j == i {
                    continue;
                }
                if v < mn {
                    mn = v;
                    jmn = j;
                }
                if v > mx {
                    mx = v;
                    jmx = j;
                }
            }
            argmin.push(jmn);
            argmax.push(jmx);
            let degen = mx == mn;
            degenerate.push(degen);
            let orow = &mut out[i * c..(i + 1) * c];
            for (j, &v) in row.iter().enumerate() {
                orow[j] = if exclude_diag && j == i {
                    0.0
                } else if degen {
                    1.0
                } else {
                    (v - mn) / (mx - mn)
                };
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            Op::MinMaxRows { a: a.0, exclude_diag, argmin, argmax, degenerate },
            Tensor::raw(vec![r, c], out),
            rg,
        ))
    }

    /// Pairwise similarity matrix Sim(Z, Z_N), differentiable in both operands.
    pub fn pairwise_similarity(&mut self, kind: SimilarityKind, z: Var, zn: Var) -> Result<Var> {
        let (tz, tn) = (self.value(z), self.value(zn));
        if !tz.is_matrix() || !tn.is_matrix() || tz.cols() != tn.cols() || tz.cols() == 0 {
            return Err(Error::Dimension(format!(
                "pairwise_similarity: {:?} vs {:?}",
                tz.shape(),
                tn.shape()
            )));
        }
        if kind == SimilarityKind::Cosine {
            for i in 0..tz.rows() {
                if norm(tz.row(i)) == 0.0 {
                    return Err(Error::Domain(format!("cosine: zero-norm embedding (query row {i})")));
                }
            }
            for j in 0..tn.rows() {
                if norm(tn.row(j)) == 0.0 {
                    return Err(Error::Domain(format!("cosine: zero-norm embedding (neighbor row {j})")));
                }
            }
        }
        let (b, n) = (tz.rows(), tn.rows());
        let mut out = vec![0.0; b * n];
        for i in 0..b {
            for j in 0..n {
                out[i * n + j] = kind.scalar(tz.row(i), tn.row(j));
            }
        }
        let rg = self.rg(z) || self.rg(zn);
        Ok(self.push(
            Op::PairwiseSim { kind, z: z.0, zn: zn.0 },
            Tensor::raw(vec![b, n], out),
            rg,
        ))
    }

    /// Reverse accumulation from a scalar loss. Returns gradients for every
    /// node on a differentiable path; parameter leaves are guaranteed a
    /// gradient tensor of their own shape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            let g = grads[idx].take().unwrap();
            self.accumulate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        // Parameter leaves reachable from the loss but with no gradient path
        // still get explicit zeros so optimizers can iterate uniformly.
        for (idx, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[idx].is_none() {
                grads[idx] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let add_to = |grads: &mut [Option<Tensor>], target: usize, delta: Tensor| {
            if !self.nodes[target].requires_grad {
                return;
            }
            match &mut grads[target] {
                Some(acc) => {
                    for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                        *a += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        let val = |i: usize| &self.nodes[i].value;
        let gd = g.data();
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                add_to(grads, *a, g.clone());
                let neg: Vec<f64> = gd.iter().map(|&x| -x).collect();
                add_to(grads, *b, Tensor::raw(g.shape().to_vec(), neg));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let da: Vec<f64> = gd.iter().zip(vb.data()).map(|(&x, &y)| bmul(x, y)).collect();
                let db: Vec<f64> = gd.iter().zip(va.data()).map(|(&x, &y)| bmul(x, y)).collect();
                add_to(grads, *a, Tensor::raw(g.shape().to_vec(), da));
                add_to(grads, *b, Tensor::raw(g.shape().to_vec(), db));
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let da: Vec<f64> = gd.iter().zip(vb.data()).map(|(&x, &y)| bmul(x, 1.0 / y)).collect();
                let db: Vec<f64> = gd
                    .iter()
                    .zip(va.data().iter().zip(vb.data()))
                    .map(|(&x, (&n, &d))| bmul(x, -n / (d * d)))
                    .collect();
                add_to(grads, *a, Tensor::raw(g.shape().to_vec(), da));
                add_to(grads, *b, Tensor::raw(g.shape().to_vec(), db));
            }
            Op::Neg(a) => {
                let da: Vec<f64> = gd.iter().map(|&x| -x).collect();
                add_to(grads, *a, Tensor::raw(g.shape().to_vec(), da));
            }
            Op::Exp(a) => {
                let y = &self.nodes[idx].value;
                let da: Vec<f64> = gd.iter().zip(y.data()).map(|(&x, &v)| bmul(x, v)).collect();
                add_to(grads, *a, Tensor::raw(g.shape().to_vec(), da));
            }
            Op::Log(a) => {
                let va = val(*a);
                let da: Vec<f64> = gd.iter().zip(va.data()).map(|(&x, &v)| bmul(x, 1.0 / v)).collect();
                add_to(grads, *a, Tensor::raw(g.shape().to_vec(), da));
            }
            Op::Sqrt(a) => {
                let y = &self.nodes[idx].value;
                let da: Vec<f64> =
                    gd.iter().zip(y.data()).map(|(&x, &v)| bmul(x, 0.5 / v)).collect();
                add_to(grads, *a, Tensor::raw(g.shape().to_vec(), da));
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[idx].value;
                let da: Vec<f64> = gd
                    .iter()
                    .zip(y.data())
                    .map(|(&x, &v)| bmul(x, v * (1.0 - v)))
                    .collect();
                add_to(grads, *a, Tensor::raw(g.shape().to_vec(), da));
            }
            Op::Relu(a) => {
                let va = val(*a);
                let da: Vec<f64> = gd
                    .iter()
                    .zip(va.data())
                    .map(|(&x, &v)| if v > 0.0 { x } else { 0.0 })
                    .collect();
                add_to(grads, *a, Tensor::raw(g.shape().to_vec(), da));
            }
            Op::Softplus(a) => {
                let va = val(*a);
                let da: Vec<f64> = gd
                    .iter()
                    .zip(va.data())
                    .map(|(&x, &v)| bmul(x, 1.0 / (1.0 + (-v).exp())))
                    .collect();
                add_to(grads, *a, Tensor::raw(g.shape().to_vec(), da));
            }
            Op::Clamp { a, lo, hi } => {
                let va = val(*a);
                let da: Vec<f64> = gd
                    .iter()
                    .zip(va.data())
                    .map(|(&x, &v)| if v >= *lo && v <= *hi { x } else { 0.0 })
                    .collect();
                add_to(grads, *a, Tensor::raw(g.shape().to_vec(), da));
            }
            Op::Pow(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let y = &self.nodes[idx].value;
                let da: Vec<f64> = gd
                    .iter()
                    .zip(va.data().iter().zip(vb.data()))
                    .map(|(&x, (&base, &e))| bmul(x, e * base.powf(e - 1.0)))
                    .collect();
                let db: Vec<f64> = gd
                    .iter()
                    .zip(y.data().iter().zip(va.data()))
                    .map(|(&x, (&yv, &base))| {
                        if yv == 0.0 {
                            0.0
                        } else {
                            bmul(x, yv * base.ln())
                        }
                    })
                    .collect();
                add_to(grads, *a, Tensor::raw(g.shape().to_vec(), da));
                add_to(grads, *b, Tensor::raw(g.shape().to_vec(), db));
            }
            Op::PowScalar { a, p } => {
                let va = val(*a);
                let da: Vec<f64> = gd
                    .iter()
                    .zip(va.data())
                    .map(|(&x, &base)| bmul(x, p * base.powf(p - 1.0)))
                    .collect();
                add_to(grads, *a, Tensor::raw(g.shape().to_vec(), da));
            }
            Op::AddScalar { a, .. } => add_to(grads, *a, g.clone()),
            Op::MulScalar { a, c } => {
                let da: Vec<f64> = gd.iter().map(|&x| bmul(x, *c)).collect();
                add_to(grads, *a, Tensor::raw(g.shape().to_vec(), da));
            }
            Op::Matmul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                // dA = G B^T
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for l in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += bmul(gd[i * n + j], vb.at(l, j));
                        }
                        da[i * k + l] = s;
                    }
                }
                // dB = A^T G
                let mut db = vec![0.0; k * n];
                for l in 0..k {
                    for j in 0..n {
                        let mut s = 0.0;
                        for i in 0..m {
                            s += bmul(gd[i * n + j], va.at(i, l));
                        }
                        db[l * n + j] = s;
                    }
                }
                add_to(grads, *a, Tensor::raw(vec![m, k], da));
                add_to(grads, *b, Tensor::raw(vec![k, n], db));
            }
            Op::Transpose(a) => {
                let (r, c) = (g.rows(), g.cols());
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[j * r + i] = g.at(i, j);
                    }
                }
                add_to(grads, *a, Tensor::raw(vec![c, r], da));
            }
            Op::Broadcast { a, mode } => {
                let (r, c) = (g.rows(), g.cols());
                let da = match mode {
                    BroadcastMode::Scalar => Tensor::scalar(gd.iter().sum()),
                    BroadcastMode::Col => {
                        let sums: Vec<f64> = (0..r).map(|i| g.row(i).iter().sum()).collect();
                        Tensor::raw(vec![r, 1], sums)
                    }
                    BroadcastMode::Row => {
                        let mut sums = vec![0.0; c];
                        for i in 0..r {
                            for (j, s) in sums.iter_mut().enumerate() {
                                *s += g.at(i, j);
                            }
                        }
                        Tensor::raw(vec![1, c], sums)
                    }
                };
                add_to(grads, *a, da);
            }
            Op::SumAll(a) => {
                let va = val(*a);
                add_to(grads, *a, Tensor::full(va.shape().to_vec(), g.item()));
            }
            Op::Mean(a) => {
                let va = val(*a);
                let n = va.numel() as f64;
                add_to(grads, *a, Tensor::full(va.shape().to_vec(), g.item() / n));
            }
            Op::RowSum(a) => {
                let va = val(*a);
                let (r, c) = (va.rows(), va.cols());
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    da[i * c..(i + 1) * c].fill(gd[i]);
                }
                add_to(grads, *a, Tensor::raw(vec![r, c], da));
            }
            Op::SliceCol { a, col } => {
                let va = val(*a);
                let (r, c) = (va.rows(), va.cols());
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    da[i * c + col] = gd[i];
                }
                add_to(grads, *a, Tensor::raw(vec![r, c], da));
            }
            Op::Select { cond, then, otherwise } => {
                let vc = val(*cond);
                let mut dt = vec![0.0; gd.len()];
                let mut de = vec![0.0; gd.len()];
                for (i, &c) in vc.data().iter().enumerate() {
                    if c != 0.0 {
                        dt[i] = gd[i];
                    } else {
                        de[i] = gd[i];
                    }
                }
                add_to(grads, *then, Tensor::raw(g.shape().to_vec(), dt));
                add_to(grads, *otherwise, Tensor::raw(g.shape().to_vec(), de));
            }
            Op::MinElem(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let mut da = vec![0.0; gd.len()];
                let mut db = vec![0.0; gd.len()];
                for (i, (&x, &y)) in va.data().iter().zip(vb.data()).enumerate() {
                    if x <= y {
                        da[i] = gd[i];
                    } else {
                        db[i] = gd[i];
                    }
                }
                add_to(grads, *a, Tensor::raw(g.shape().to_vec(), da));
                add_to(grads, *b, Tensor::raw(g.shape().to_vec(), db));
            }
            Op::RowSoftmax(a) => {
                let p = &self.nodes[idx].value;
                let (r, c) = (p.rows(), p.cols());
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    let prow = p.row(i);
                    let grow = &gd[i * c..(i + 1) * c];
                    let dot: f64 = grow.iter().zip(prow).map(|(&x, &y)| bmul(x, y)).sum();
                    for j in 0..c {
                        da[i * c + j] = if prow[j] == 0.0 { 0.0 } else { prow[j] * (grow[j] - dot) };
                    }
                }
                add_to(grads, *a, Tensor::raw(vec![r, c], da));
            }
            Op::RowMax { a, argmax, .. } => {
                let va = val(*a);
                let (r, c) = (va.rows(), va.cols());
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    da[i * c + argmax[i]] = gd[i];
                }
                add_to(grads, *a, Tensor::raw(vec![r, c], da));
            }
            Op::MinMaxRows { a, exclude_diag, argmin, argmax, degenerate } => {
                let va = val(*a);
                let (r, c) = (va.rows(), va.cols());
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    if degenerate[i] {
                        continue;
                    }
                    let (mn, mx) = (va.at(i, argmin[i]), va.at(i, argmax[i]));
                    let d = mx - mn;
                    let mut gmin = 0.0;
                    let mut gmax = 0.0;
                    for j in 0..c {
                        if *exclude_diag && j == i {
                            continue;
                        }
                        let gij = gd[i * c + j];
                        if gij == 0.0 {
                            continue;
                        }
                        da[i * c + j] += gij / d;
                        gmin += gij * (va.at(i, j) - mx) / (d * d);
                        gmax += gij * (mn - va.at(i, j)) / (d * d);
                    }
                    da[i * c + argmin[i]] += gmin;
                    da[i * c + argmax[i]] += gmax;
                }
                add_to(grads, *a, Tensor::raw(vec![r, c], da));
            }
            Op::PairwiseSim { kind, z, zn } => {
                let (vz, vn) = (val(*z), val(*zn));
                let (b, n, d) = (vz.rows(), vn.rows(), vz.cols());
                let mut dz = vec![0.0; b * d];
                let mut dn = vec![0.0; n * d];
                for i in 0..b {
                    for j in 0..n {
                        let gij = gd[i * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        kind.accumulate_grad(
                            vz.row(i),
                            vn.row(j),
                            gij,
                            &mut dz[i * d..(i + 1) * d],
                            &mut dn[j * d..(j + 1) * d],
                        );
                    }
                }
                add_to(grads, *z, Tensor::raw(vec![b, d], dz));
                add_to(grads, *zn, Tensor::raw(vec![n, d], dn));
            }
        }
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
