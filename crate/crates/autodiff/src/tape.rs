use crate::ops;
use crate::{ParamId, ParamStore, Scalar, Tensor, TensorError};

type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Contiguous run of rows treated as one sequence by the segment ops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

impl Segment {
    pub fn new(start: usize, len: usize) -> Self {
        Segment { start, len }
    }

    fn end(self) -> usize {
        self.start + self.len
    }
}

/// Elementwise nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Gelu,
    Sigmoid,
    Log,
    Exp,
    Sqrt,
    Sin,
    Cos,
    Softplus,
    Square,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf(Option<ParamId>),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    Shift(Var),
    Unary(Var, Unary),
    MatMul(Var, Var),
    Transpose(Var),
    Softmax(Var),
    LogSumExp(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    Sum(Var),
    RowSums(Var),
    ColSums(Var),
    SegmentMean(Var, Vec<Segment>),
    SegmentAttention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<Segment>,
        heads: usize,
        probs: Vec<T>,
    },
    TuckerContract(Var, Var),
    PairwiseL2(Var, Var),
    PairwiseComplexL1(Var, Var),
    L2NormalizeRows {
        x: Var,
        norms: Vec<T>,
        eps: T,
    },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Vec<T>,
    rows: usize,
    cols: usize,
    op: Op<T>,
}

/// Records a forward computation so it can be differentiated in reverse.
///
/// A tape is built once per loss evaluation and dropped afterwards.
#[derive(Debug, Clone, Default)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

/// Per-node gradients produced by [`Tape::gradients`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`, or `None` if `v` does not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn bcast(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    Some((dim(a.0, b.0)?, dim(a.1, b.1)?))
}

#[inline]
fn bidx(i: usize, j: usize, dims: (usize, usize)) -> usize {
    let r = if dims.0 == 1 { 0 } else { i };
    let c = if dims.1 == 1 { 0 } else { j };
    r * dims.1 + c
}

fn check_finite<T: Scalar>(op: &'static str, data: &[T]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(TensorError::numeric(
            op,
            format!("non-finite input {} at index {i}", data[i]),
        )),
        None => Ok(()),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<T>, rows: usize, cols: usize, op: Op<T>) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    /// The single element of a `1×1` value.
    pub fn item(&self, v: Var) -> T {
        let n = self.node(v);
        debug_assert_eq!(n.value.len(), 1);
        n.value[0]
    }

    pub fn row(&self, v: Var, i: usize) -> &[T] {
        let n = self.node(v);
        &n.value[i * n.cols..(i + 1) * n.cols]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::matrix(n.rows, n.cols, n.value.clone()).expect("node shapes are valid")
    }

    // ---- leaves -------------------------------------------------------

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<T>) -> Result<Var> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(TensorError::shape("constant", &[rows, cols], &[data.len()]));
        }
        Ok(self.push(data, rows, cols, Op::Leaf(None)))
    }

    pub fn constant_tensor(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.data().to_vec(), t.rows(), t.cols(), Op::Leaf(None))
    }

    pub fn scalar(&mut self, v: T) -> Var {
        self.push(vec![v], 1, 1, Op::Leaf(None))
    }

    /// Binds a stored parameter as a differentiable leaf.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let t = store.get(id);
        self.push(t.data().to_vec(), t.rows(), t.cols(), Op::Leaf(Some(id)))
    }

    // ---- elementwise --------------------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (da, db) = (self.dims(a), self.dims(b));
        let (r, c) = bcast(da, db).ok_or_else(|| {
            TensorError::shape(name, &[da.0, da.1], &[db.0, db.1])
        })?;
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(f(va[bidx(i, j, da)], vb[bidx(i, j, db)]));
            }
        }
        Ok(self.push(out, r, c, op))
    }

    /// Elementwise sum with row/column/scalar broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::of(s);
        let out = self.value(a).iter().map(|&x| x * s).collect();
        let (r, c) = self.dims(a);
        self.push(out, r, c, Op::Scale(a, s))
    }

    /// Adds a constant to every element.
    pub fn shift(&mut self, a: Var, s: f64) -> Var {
        let s = T::of(s);
        let out = self.value(a).iter().map(|&x| x + s).collect();
        let (r, c) = self.dims(a);
        self.push(out, r, c, Op::Shift(a))
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Result<Var> {
        let x = self.value(a);
        match kind {
            Unary::Log if x.iter().any(|&v| v <= T::zero()) => {
                return Err(TensorError::numeric("log", "non-positive input"));
            }
            Unary::Sqrt if x.iter().any(|&v| v < T::zero()) => {
                return Err(TensorError::numeric("sqrt", "negative input"));
            }
            _ => {}
        }
        let f: fn(T) -> T = match kind {
            Unary::Tanh => |v| v.tanh(),
            Unary::Gelu => ops::gelu,
            Unary::Sigmoid => ops::sigmoid,
            Unary::Log => |v| v.ln(),
            Unary::Exp => |v| v.exp(),
            Unary::Sqrt => |v| v.sqrt(),
            Unary::Sin => |v| v.sin(),
            Unary::Cos => |v| v.cos(),
            Unary::Softplus => ops::softplus,
            Unary::Square => |v| v * v,
        };
        let out = x.iter().map(|&v| f(v)).collect();
        let (r, c) = self.dims(a);
        Ok(self.push(out, r, c, Op::Unary(a, kind)))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh).expect("tanh is total")
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu).expect("gelu is total")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid).expect("sigmoid is total")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Log)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp).expect("exp is total")
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sqrt)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sin).expect("sin is total")
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Cos).expect("cos is total")
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus).expect("softplus is total")
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square).expect("square is total")
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = (self.dims(a), self.dims(b));
        if k != k2 {
            return Err(TensorError::shape("matmul", &[m, k], &[k2, n]));
        }
        let out = ops::matmul(self.value(a), self.value(b), m, k, n);
        Ok(self.push(out, m, n, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = ops::transpose(self.value(a), r, c);
        self.push(out, c, r, Op::Transpose(a))
    }

    /// Row-wise softmax, stabilised by subtracting each row's maximum.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        check_finite("softmax", self.value(a))?;
        let (r, c) = self.dims(a);
        let x = self.value(a);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            ops::softmax_into(&x[i * c..(i + 1) * c], &mut out[i * c..(i + 1) * c]);
        }
        Ok(self.push(out, r, c, Op::Softmax(a)))
    }

    /// Row-wise log-sum-exp, producing an `r×1` column.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        check_finite("logsumexp", self.value(a))?;
        let (r, c) = self.dims(a);
        let x = self.value(a);
        let out = (0..r).map(|i| ops::logsumexp(&x[i * c..(i + 1) * c])).collect();
        Ok(self.push(out, r, 1, Op::LogSumExp(a)))
    }

    /// Row-wise layer normalisation: `gain ⊙ (x − mean)/sqrt(var + eps) + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims(x);
        if c < 2 {
            return Err(TensorError::shape("layer_norm", &[r, c], &[2]));
        }
        for p in [gain, bias] {
            let d = self.dims(p);
            if d.0 * d.1 != c {
                return Err(TensorError::shape("layer_norm", &[r, c], &[d.0, d.1]));
            }
        }
        let eps = T::of(eps);
        let n = T::of(c as f64);
        let (xv, g, b) = (self.value(x), self.value(gain), self.value(bias));
        let mut out = vec![T::zero(); r * c];
        let mut xhat = vec![T::zero(); r * c];
        let mut rstd = vec![T::zero(); r];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = g[j] * h + b[j];
            }
        }
        Ok(self.push(
            out,
            r,
            c,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    // ---- structural -----------------------------------------------------

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::Contract("concat_rows of nothing".into()));
        };
        let c = self.dims(first).1;
        let mut out = Vec::new();
        let mut r = 0;
        for &p in parts {
            let d = self.dims(p);
            if d.1 != c {
                return Err(TensorError::shape("concat_rows", &[r, c], &[d.0, d.1]));
            }
            out.extend_from_slice(self.value(p));
            r += d.0;
        }
        Ok(self.push(out, r, c, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::Contract("concat_cols of nothing".into()));
        };
        let r = self.dims(first).0;
        let mut c = 0;
        for &p in parts {
            let d = self.dims(p);
            if d.0 != r {
                return Err(TensorError::shape("concat_cols", &[r, c], &[d.0, d.1]));
            }
            c += d.1;
        }
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for &p in parts {
                let pc = self.dims(p).1;
                out.extend_from_slice(&self.value(p)[i * pc..(i + 1) * pc]);
            }
        }
        Ok(self.push(out, r, c, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if len == 0 || start + len > r {
            return Err(TensorError::shape("slice_rows", &[r, c], &[start, len]));
        }
        let out = self.value(a)[start * c..(start + len) * c].to_vec();
        Ok(self.push(out, len, c, Op::SliceRows(a, start)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if len == 0 || start + len > c {
            return Err(TensorError::shape("slice_cols", &[r, c], &[start, len]));
        }
        let x = self.value(a);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&x[i * c + start..i * c + start + len]);
        }
        Ok(self.push(out, r, len, Op::SliceCols(a, start)))
    }

    /// Selects rows by index; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(a);
        if idx.is_empty() {
            return Err(TensorError::Contract("gather_rows with no indices".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(TensorError::shape("gather_rows", &[r, c], &[bad]));
        }
        let x = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&x[i * c..(i + 1) * c]);
        }
        Ok(self.push(out, idx.len(), c, Op::GatherRows(a, idx.to_vec())))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if rows * cols != r * c || rows == 0 {
            return Err(TensorError::shape("reshape", &[r, c], &[rows, cols]));
        }
        let out = self.value(a).to_vec();
        Ok(self.push(out, rows, cols, Op::Reshape(a)))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        self.push(vec![s], 1, 1, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum across each row, producing an `r×1` column.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let x = self.value(a);
        let out = (0..r).map(|i| x[i * c..(i + 1) * c].iter().copied().sum()).collect();
        self.push(out, r, 1, Op::RowSums(a))
    }

    /// Sum down each column, producing a `1×c` row.
    pub fn col_sums(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let x = self.value(a);
        let mut out = vec![T::zero(); c];
        for i in 0..r {
            for j in 0..c {
                out[j] = out[j] + x[i * c + j];
            }
        }
        self.push(out, 1, c, Op::ColSums(a))
    }

    /// Full inner product of two same-shaped values.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            let (da, db) = (self.dims(a), self.dims(b));
            return Err(TensorError::shape("dot", &[da.0, da.1], &[db.0, db.1]));
        }
        let p = self.mul(a, b)?;
        Ok(self.sum(p))
    }

    /// Euclidean norm of every row, as an `r×1` column.
    pub fn l2_norm_rows(&mut self, a: Var) -> Result<Var> {
        let sq = self.square(a);
        let s = self.row_sums(sq);
        self.sqrt(s)
    }

    /// Divides each row by `max(‖row‖, eps)`. An exactly-zero row is an error.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims(x);
        let eps_t = T::of(eps);
        let xv = self.value(x);
        let mut norms = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let n = ops::dot(row, row).sqrt();
            if n == T::zero() || !n.is_finite() {
                return Err(TensorError::numeric(
                    "l2_normalize_rows",
                    format!("row {i} has norm {n}"),
                ));
            }
            norms.push(n);
            let d = n.max(eps_t);
            out.extend(row.iter().map(|&v| v / d));
        }
        Ok(self.push(out, r, c, Op::L2NormalizeRows { x, norms, eps: eps_t }))
    }

    /// Mean of the rows in each segment, one output row per segment.
    pub fn segment_mean(&mut self, a: Var, segments: &[Segment]) -> Result<Var> {
        let (r, c) = self.dims(a);
        if segments.is_empty() {
            return Err(TensorError::Contract("segment_mean with no segments".into()));
        }
        if let Some(s) = segments.iter().find(|s| s.len == 0 || s.end() > r) {
            return Err(TensorError::shape("segment_mean", &[r, c], &[s.start, s.len]));
        }
        let x = self.value(a);
        let mut out = vec![T::zero(); segments.len() * c];
        for (si, s) in segments.iter().enumerate() {
            let inv = T::of(1.0 / s.len as f64);
            for i in s.start..s.end() {
                for j in 0..c {
                    out[si * c + j] = out[si * c + j] + x[i * c + j] * inv;
                }
            }
        }
        Ok(self.push(out, segments.len(), c, Op::SegmentMean(a, segments.to_vec())))
    }

    /// Scaled dot-product multi-head self-attention applied independently to
    /// each segment of packed `q`, `k`, `v` (all `N×d`). Rows outside every
    /// segment produce zeros.
    pub fn segment_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[Segment],
        heads: usize,
    ) -> Result<Var> {
        let (n, d) = self.dims(q);
        for other in [k, v] {
            let od = self.dims(other);
            if od != (n, d) {
                return Err(TensorError::shape("segment_attention", &[n, d], &[od.0, od.1]));
            }
        }
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::shape("segment_attention", &[d], &[heads]));
        }
        if let Some(s) = segments.iter().find(|s| s.len == 0 || s.end() > n) {
            return Err(TensorError::shape("segment_attention", &[n, d], &[s.start, s.len]));
        }
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = vec![T::zero(); n * d];
        let mut probs = Vec::new();
        let mut scores = Vec::new();
        for s in segments {
            let l = s.len;
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..l {
                    let qi = &qv[(s.start + i) * d..][cols.clone()];
                    scores.clear();
                    for j in 0..l {
                        let kj = &kv[(s.start + j) * d..][cols.clone()];
                        scores.push(ops::dot(qi, kj) * scale);
                    }
                    let base = probs.len();
                    probs.resize(base + l, T::zero());
                    ops::softmax_into(&scores, &mut probs[base..]);
                    let orow = &mut out[(s.start + i) * d..][cols.clone()];
                    for j in 0..l {
                        let p = probs[base + j];
                        let vj = &vv[(s.start + j) * d..][cols.clone()];
                        for (o, &x) in orow.iter_mut().zip(vj) {
                            *o = *o + p * x;
                        }
                    }
                }
            }
        }
        Ok(self.push(
            out,
            n,
            d,
            Op::SegmentAttention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                heads,
                probs,
            },
        ))
    }

    /// Contracts the relation mode of a TuckER core already multiplied by the
    /// head: `out[b,k] = Σ_j r[b,j] · hw[b, j·d + k]`.
    pub fn tucker_contract(&mut self, hw: Var, r: Var) -> Result<Var> {
        let ((b, dd), (b2, d)) = (self.dims(hw), self.dims(r));
        if b != b2 || dd != d * d {
            return Err(TensorError::shape("tucker_contract", &[b, dd], &[b2, d]));
        }
        let (hv, rv) = (self.value(hw), self.value(r));
        let mut out = vec![T::zero(); b * d];
        for bi in 0..b {
            for j in 0..d {
                let rj = rv[bi * d + j];
                let m = &hv[bi * dd + j * d..bi * dd + (j + 1) * d];
                let o = &mut out[bi * d..(bi + 1) * d];
                for (ok, &mk) in o.iter_mut().zip(m) {
                    *ok = *ok + rj * mk;
                }
            }
        }
        Ok(self.push(out, b, d, Op::TuckerContract(hw, r)))
    }

    /// Euclidean distance between every query row and every candidate row.
    pub fn pairwise_l2(&mut self, q: Var, c: Var) -> Result<Var> {
        let ((b, d), (e, d2)) = (self.dims(q), self.dims(c));
        if d != d2 {
            return Err(TensorError::shape("pairwise_l2", &[b, d], &[e, d2]));
        }
        let (qv, cv) = (self.value(q), self.value(c));
        let mut out = Vec::with_capacity(b * e);
        for i in 0..b {
            let qi = &qv[i * d..(i + 1) * d];
            for j in 0..e {
                let cj = &cv[j * d..(j + 1) * d];
                let s: T = qi.iter().zip(cj).map(|(&x, &y)| (x - y) * (x - y)).sum();
                out.push(s.sqrt());
            }
        }
        Ok(self.push(out, b, e, Op::PairwiseL2(q, c)))
    }

    /// Sum of component-wise complex moduli of `q − c` for every pair of rows.
    /// Rows hold `d/2` real parts followed by `d/2` imaginary parts.
    pub fn pairwise_complex_l1(&mut self, q: Var, c: Var) -> Result<Var> {
        let ((b, d), (e, d2)) = (self.dims(q), self.dims(c));
        if d != d2 || d % 2 != 0 {
            return Err(TensorError::shape("pairwise_complex_l1", &[b, d], &[e, d2]));
        }
        let half = d / 2;
        let (qv, cv) = (self.value(q), self.value(c));
        let mut out = Vec::with_capacity(b * e);
        for i in 0..b {
            let qi = &qv[i * d..(i + 1) * d];
            for j in 0..e {
                let cj = &cv[j * d..(j + 1) * d];
                let mut s = T::zero();
                for k in 0..half {
                    let re = qi[k] - cj[k];
                    let im = qi[half + k] - cj[half + k];
                    s = s + (re * re + im * im).sqrt();
                }
                out.push(s);
            }
        }
        Ok(self.push(out, b, e, Op::PairwiseComplexL1(q, c)))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse pass from a `1×1` loss.
    pub fn gradients(&self, loss: Var) -> Result<Gradients<T>> {
        let (r, c) = self.dims(loss);
        if r * c != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got {r}×{c}"
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Tape::gradients`] and adds each bound parameter's gradient into
    /// its buffer in `store`. Repeated calls accumulate.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let (Op::Leaf(Some(id)), Some(g)) = (&node.op, grads.grads[i].as_deref()) {
                if store.get(*id).requires_grad() {
                    store.get_mut(*id).accumulate_grad(g);
                }
            }
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let (r, c) = (node.rows, node.cols);
        let y = &node.value;
        match &node.op {
            Op::Leaf(_) => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                let (da, db) = (self.dims(*a), self.dims(*b));
                let ga = acc(grads, *a, da);
                for i in 0..r {
                    for j in 0..c {
                        ga[bidx(i, j, da)] = ga[bidx(i, j, da)] + g[i * c + j];
                    }
                }
                let gb = acc(grads, *b, db);
                for i in 0..r {
                    for j in 0..c {
                        gb[bidx(i, j, db)] = gb[bidx(i, j, db)] + sign * g[i * c + j];
                    }
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let is_div = matches!(node.op, Op::Div(..));
                let (da, db) = (self.dims(*a), self.dims(*b));
                let (va, vb) = (self.value(*a), self.value(*b));
                let ga = acc(grads, *a, da);
                for i in 0..r {
                    for j in 0..c {
                        let (ia, ib) = (bidx(i, j, da), bidx(i, j, db));
                        let gij = g[i * c + j];
                        let d = if is_div { gij / vb[ib] } else { gij * vb[ib] };
                        ga[ia] = ga[ia] + d;
                    }
                }
                let gb = acc(grads, *b, db);
                for i in 0..r {
                    for j in 0..c {
                        let (ia, ib) = (bidx(i, j, da), bidx(i, j, db));
                        let gij = g[i * c + j];
                        let d = if is_div {
                            -gij * va[ia] / (vb[ib] * vb[ib])
                        } else {
                            gij * va[ia]
                        };
                        gb[ib] = gb[ib] + d;
                    }
                }
            }
            Op::Scale(a, s) => {
                let ga = acc(grads, *a, (r, c));
                ga.iter_mut().zip(g).for_each(|(o, &x)| *o = *o + x * *s);
            }
            Op::Shift(a) | Op::Reshape(a) => {
                let dims = self.dims(*a);
                let ga = acc(grads, *a, dims);
                ga.iter_mut().zip(g).for_each(|(o, &x)| *o = *o + x);
            }
            Op::Unary(a, kind) => {
                let x = self.value(*a);
                let ga = acc(grads, *a, (r, c));
                for i in 0..ga.len() {
                    let d = match kind {
                        Unary::Tanh => T::one() - y[i] * y[i],
                        Unary::Gelu => ops::gelu_grad(x[i]),
                        Unary::Sigmoid => y[i] * (T::one() - y[i]),
                        Unary::Log => T::one() / x[i],
                        Unary::Exp => y[i],
                        Unary::Sqrt => {
                            if y[i] > T::zero() {
                                T::of(0.5) / y[i]
                            } else {
                                T::zero()
                            }
                        }
                        Unary::Sin => x[i].cos(),
                        Unary::Cos => -x[i].sin(),
                        Unary::Softplus => ops::sigmoid(x[i]),
                        Unary::Square => T::of(2.0) * x[i],
                    };
                    ga[i] = ga[i] + g[i] * d;
                }
            }
            Op::MatMul(a, b) => {
                let ((m, k), (_, n)) = (self.dims(*a), self.dims(*b));
                let da = ops::matmul_bt(g, self.value(*b), m, n, k);
                add_into(acc(grads, *a, (m, k)), &da);
                let db = ops::matmul_at(self.value(*a), g, m, k, n);
                add_into(acc(grads, *b, (k, n)), &db);
            }
            Op::Transpose(a) => {
                let gt = ops::transpose(g, r, c);
                add_into(acc(grads, *a, (c, r)), &gt);
            }
            Op::Softmax(a) => {
                let ga = acc(grads, *a, (r, c));
                for i in 0..r {
                    let (yr, gr) = (&y[i * c..(i + 1) * c], &g[i * c..(i + 1) * c]);
                    let s = ops::dot(yr, gr);
                    for j in 0..c {
                        ga[i * c + j] = ga[i * c + j] + yr[j] * (gr[j] - s);
                    }
                }
            }
            Op::LogSumExp(a) => {
                let (ar, ac) = self.dims(*a);
                let x = self.value(*a);
                let ga = acc(grads, *a, (ar, ac));
                for i in 0..ar {
                    for j in 0..ac {
                        let p = (x[i * ac + j] - y[i]).exp();
                        ga[i * ac + j] = ga[i * ac + j] + g[i] * p;
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
                let gv = self.value(*gain);
                let mut dgain = vec![T::zero(); c];
                let mut dbias = vec![T::zero(); c];
                let mut dx = vec![T::zero(); r * c];
                let n = T::of(c as f64);
                for i in 0..r {
                    let mut sum_d = T::zero();
                    let mut sum_dx = T::zero();
                    for j in 0..c {
                        let gij = g[i * c + j];
                        dgain[j] = dgain[j] + gij * xhat[i * c + j];
                        dbias[j] = dbias[j] + gij;
                        let dh = gij * gv[j];
                        sum_d = sum_d + dh;
                        sum_dx = sum_dx + dh * xhat[i * c + j];
                    }
                    for j in 0..c {
                        let dh = g[i * c + j] * gv[j];
                        dx[i * c + j] =
                            rstd[i] / n * (n * dh - sum_d - xhat[i * c + j] * sum_dx);
                    }
                }
                add_into(acc(grads, *x, (r, c)), &dx);
                let gd = self.dims(*gain);
                add_into(acc(grads, *gain, gd), &dgain);
                let bd = self.dims(*bias);
                add_into(acc(grads, *bias, bd), &dbias);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let dims = self.dims(p);
                    let len = dims.0 * dims.1;
                    add_into(acc(grads, p, dims), &g[offset..offset + len]);
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let mut col = 0;
                for &p in parts {
                    let (pr, pc) = self.dims(p);
                    let gp = acc(grads, p, (pr, pc));
                    for i in 0..pr {
                        for j in 0..pc {
                            gp[i * pc + j] = gp[i * pc + j] + g[i * c + col + j];
                        }
                    }
                    col += pc;
                }
            }
            Op::SliceRows(a, start) => {
                let dims = self.dims(*a);
                let ga = acc(grads, *a, dims);
                add_into(&mut ga[start * c..(start + r) * c], g);
            }
            Op::SliceCols(a, start) => {
                let (ar, ac) = self.dims(*a);
                let ga = acc(grads, *a, (ar, ac));
                for i in 0..r {
                    add_into(&mut ga[i * ac + start..i * ac + start + c], &g[i * c..(i + 1) * c]);
                }
            }
            Op::GatherRows(a, idx) => {
                let dims = self.dims(*a);
                let ga = acc(grads, *a, dims);
                for (o, &src) in idx.iter().enumerate() {
                    add_into(&mut ga[src * c..(src + 1) * c], &g[o * c..(o + 1) * c]);
                }
            }
            Op::Sum(a) => {
                let dims = self.dims(*a);
                let ga = acc(grads, *a, dims);
                ga.iter_mut().for_each(|o| *o = *o + g[0]);
            }
            Op::RowSums(a) => {
                let (ar, ac) = self.dims(*a);
                let ga = acc(grads, *a, (ar, ac));
                for i in 0..ar {
                    for j in 0..ac {
                        ga[i * ac + j] = ga[i * ac + j] + g[i];
                    }
                }
            }
            Op::ColSums(a) => {
                let (ar, ac) = self.dims(*a);
                let ga = acc(grads, *a, (ar, ac));
                for i in 0..ar {
                    add_into(&mut ga[i * ac..(i + 1) * ac], g);
                }
            }
            Op::SegmentMean(a, segments) => {
                let dims = self.dims(*a);
                let ga = acc(grads, *a, dims);
                for (si, s) in segments.iter().enumerate() {
                    let inv = T::of(1.0 / s.len as f64);
                    for i in s.start..s.end() {
                        for j in 0..c {
                            ga[i * c + j] = ga[i * c + j] + g[si * c + j] * inv;
                        }
                    }
                }
            }
            Op::SegmentAttention {
                q,
                k,
                v,
                segments,
                heads,
                probs,
            } => {
                let (n, d) = (r, c);
                let dh = d / heads;
                let scale = T::of(1.0 / (dh as f64).sqrt());
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let mut dq = vec![T::zero(); n * d];
                let mut dk = vec![T::zero(); n * d];
                let mut dv = vec![T::zero(); n * d];
                let mut off = 0;
                let mut dp = Vec::new();
                for s in segments {
                    let l = s.len;
                    for h in 0..*heads {
                        let cols = h * dh..(h + 1) * dh;
                        for i in 0..l {
                            let p = &probs[off..off + l];
                            let gi = &g[(s.start + i) * d..][cols.clone()];
                            dp.clear();
                            for j in 0..l {
                                let row = (s.start + j) * d;
                                dp.push(ops::dot(gi, &vv[row..][cols.clone()]));
                                let dvj = &mut dv[row..][cols.clone()];
                                for (o, &x) in dvj.iter_mut().zip(gi) {
                                    *o = *o + p[j] * x;
                                }
                            }
                            let mean = ops::dot(p, &dp);
                            let qrow = (s.start + i) * d;
                            for j in 0..l {
                                let ds = p[j] * (dp[j] - mean) * scale;
                                if ds == T::zero() {
                                    continue;
                                }
                                let krow = (s.start + j) * d;
                                for col in cols.clone() {
                                    dq[qrow + col] = dq[qrow + col] + ds * kv[krow + col];
                                    dk[krow + col] = dk[krow + col] + ds * qv[qrow + col];
                                }
                            }
                            off += l;
                        }
                    }
                }
                add_into(acc(grads, *q, (n, d)), &dq);
                add_into(acc(grads, *k, (n, d)), &dk);
                add_into(acc(grads, *v, (n, d)), &dv);
            }
            Op::TuckerContract(hw, rv) => {
                let (b, d) = (r, c);
                let dd = d * d;
                let (hv, rvals) = (self.value(*hw), self.value(*rv));
                let mut dhw = vec![T::zero(); b * dd];
                let mut dr = vec![T::zero(); b * d];
                for bi in 0..b {
                    let gb = &g[bi * d..(bi + 1) * d];
                    for j in 0..d {
                        let rj = rvals[bi * d + j];
                        let base = bi * dd + j * d;
                        for k in 0..d {
                            dhw[base + k] = rj * gb[k];
                        }
                        dr[bi * d + j] = ops::dot(&hv[base..base + d], gb);
                    }
                }
                add_into(acc(grads, *hw, (b, dd)), &dhw);
                add_into(acc(grads, *rv, (b, d)), &dr);
            }
            Op::PairwiseL2(qa, ca) => {
                let ((b, d), (e, _)) = (self.dims(*qa), self.dims(*ca));
                let (qv, cv) = (self.value(*qa), self.value(*ca));
                let mut dq = vec![T::zero(); b * d];
                let mut dc = vec![T::zero(); e * d];
                for i in 0..b {
                    for j in 0..e {
                        let dist = y[i * e + j];
                        if dist == T::zero() {
                            continue;
                        }
                        let w = g[i * e + j] / dist;
                        for k in 0..d {
                            let diff = (qv[i * d + k] - cv[j * d + k]) * w;
                            dq[i * d + k] = dq[i * d + k] + diff;
                            dc[j * d + k] = dc[j * d + k] - diff;
                        }
                    }
                }
                add_into(acc(grads, *qa, (b, d)), &dq);
                add_into(acc(grads, *ca, (e, d)), &dc);
            }
            Op::PairwiseComplexL1(qa, ca) => {
                let ((b, d), (e, _)) = (self.dims(*qa), self.dims(*ca));
                let half = d / 2;
                let (qv, cv) = (self.value(*qa), self.value(*ca));
                let mut dq = vec![T::zero(); b * d];
                let mut dc = vec![T::zero(); e * d];
                for i in 0..b {
                    for j in 0..e {
                        let gij = g[i * e + j];
                        for k in 0..half {
                            let (qr, qi) = (i * d + k, i * d + half + k);
                            let (cr, ci) = (j * d + k, j * d + half + k);
                            let re = qv[qr] - cv[cr];
                            let im = qv[qi] - cv[ci];
                            let m = (re * re + im * im).sqrt();
                            if m == T::zero() {
                                continue;
                            }
                            let (gr, gi) = (gij * re / m, gij * im / m);
                            dq[qr] = dq[qr] + gr;
                            dq[qi] = dq[qi] + gi;
                            dc[cr] = dc[cr] - gr;
                            dc[ci] = dc[ci] - gi;
                        }
                    }
                }
                add_into(acc(grads, *qa, (b, d)), &dq);
                add_into(acc(grads, *ca, (e, d)), &dc);
            }
            Op::L2NormalizeRows { x, norms, eps } => {
                let ga = acc(grads, *x, (r, c));
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    if norms[i] > *eps {
                        let proj = ops::dot(yr, gr);
                        for j in 0..c {
                            ga[i * c + j] = ga[i * c + j] + (gr[j] - yr[j] * proj) / norms[i];
                        }
                    } else {
                        for j in 0..c {
                            ga[i * c + j] = ga[i * c + j] + gr[j] / *eps;
                        }
                    }
                }
            }
        }
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, dims: (usize, usize)) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); dims.0 * dims.1])
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
}
