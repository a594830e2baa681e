//! Reverse-mode automatic differentiation over a dynamic Wengert tape.
//!
//! Operations executed through a [`Tape`] are recorded in topological order
//! together with a backward rule; [`Tape::backward`] replays them in reverse
//! and accumulates gradients additively into every `leaf`. The tape is
//! rebuilt per training step because the forward-algorithm lattice has
//! data-dependent length `T` and state count `N` per sequence.
//!
//! Shape checking is strict and panics with both shapes named; float-domain
//! issues (log of a non-positive value, division by zero) follow IEEE 754
//! semantics and are not trapped.

use crate::tensor::{broadcast_shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Clamp(Var, f64, f64),
    Matmul(Var, Var),
    Transpose(Var),
    Sum(Var),
    SumAxis(Var, usize),
    Logsumexp(Var, usize),
    Logaddexp(Var, Var),
    Index(Var, usize),
    SliceRows(Var, usize),
    SliceCols(Var, usize, usize),
    ConcatCols(Var, Var),
    ConcatRows(Var, Var),
    RepeatRow(Var, usize),
    ShiftRight(Var),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    DiagEmbed(Var),
    MatInv(Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        dilation: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of executed operations with input/output references and backward
/// rules, in topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

// Numerically stable scalar kernels shared by forward and backward passes.

pub fn sigmoid_f(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus_f(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn logaddexp_f(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        f64::NEG_INFINITY
    } else {
        m + ((a - m).exp() + (b - m).exp()).ln()
    }
}

pub(crate) fn matmul_2d(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
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

/// Dense inverse by Gauss-Jordan elimination with partial pivoting.
pub(crate) fn mat_inverse(a: &[f64], d: usize) -> Vec<f64> {
    let mut m = a.to_vec();
    let mut inv = Tensor::eye(d).into_data();
    for col in 0..d {
        let mut piv = col;
        for r in col + 1..d {
            if m[r * d + col].abs() > m[piv * d + col].abs() {
                piv = r;
            }
        }
        assert!(
            m[piv * d + col].abs() > 1e-300,
            "matrix inversion: singular pivot at column {}",
            col
        );
        if piv != col {
            for j in 0..d {
                m.swap(col * d + j, piv * d + j);
                inv.swap(col * d + j, piv * d + j);
            }
        }
        let p = m[col * d + col];
        for j in 0..d {
            m[col * d + j] /= p;
            inv[col * d + j] /= p;
        }
        for r in 0..d {
            if r == col {
                continue;
            }
            let f = m[r * d + col];
            if f == 0.0 {
                continue;
            }
            for j in 0..d {
                m[r * d + j] -= f * m[col * d + j];
                inv[r * d + j] -= f * inv[col * d + j];
            }
        }
    }
    inv
}

fn conv1d_forward(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    t_len: usize,
    c_in: usize,
    c_out: usize,
    k: usize,
    dilation: usize,
) -> Vec<f64> {
    let half = (k - 1) / 2;
    let mut out = vec![0.0; t_len * c_out];
    for t in 0..t_len {
        for o in 0..c_out {
            let mut acc = b[o];
            for kk in 0..k {
                let src = t as isize + (kk as isize - half as isize) * dilation as isize;
                if src < 0 || src >= t_len as isize {
                    continue;
                }
                let src = src as usize;
                for c in 0..c_in {
                    acc += w[(o * c_in + c) * k + kk] * x[src * c_in + c];
                }
            }
            out[t * c_out + o] = acc;
        }
    }
    out
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

    /// Record a differentiable input. Gradients accumulate here.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Record a non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Const, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the most recent `backward` target w.r.t. `v`, if any was
    /// accumulated.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads.get(v.0).and_then(|g| {
            g.as_ref()
                .map(|data| Tensor::new(self.nodes[v.0].value.shape().to_vec(), data.clone()))
        })
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ── elementwise binary ops with restricted broadcasting ─────────────

    fn binary(&mut self, name: &str, a: Var, b: Var, f: fn(f64, f64) -> f64, op: Op) -> Var {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let out_shape = broadcast_shape(sa, sb).unwrap_or_else(|| {
            panic!("{name}: shapes {sa:?} and {sb:?} are not broadcast-compatible")
        });
        let numel: usize = out_shape.iter().product();
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let (na, nb) = (da.len(), db.len());
        let data: Vec<f64> = (0..numel).map(|i| f(da[i % na], db[i % nb])).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(out_shape, data), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    // ── elementwise unary ops ────────────────────────────────────────────

    fn unary(&mut self, a: Var, f: fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(shape, data), op, rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid_f, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus_f, Op::Softplus(a))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| x + c).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(shape, data), Op::AddScalar(a), rg)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| x * c).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(shape, data), Op::MulScalar(a, c), rg)
    }

    /// Elementwise clamp; the gradient passes through the interior and is
    /// zero where the input was clipped.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| x.clamp(lo, hi)).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(shape, data), Op::Clamp(a, lo, hi), rg)
    }

    // ── linear algebra ───────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        assert!(
            sa.len() == 2 && sb.len() == 2,
            "matmul: expected 2-D operands, got {sa:?} and {sb:?}"
        );
        assert_eq!(
            sa[1], sb[0],
            "matmul: inner extents disagree ({sa:?} vs {sb:?})"
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_2d(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![m, n], data), Op::Matmul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a);
        assert_eq!(t.rank(), 2, "transpose: expected 2-D, got {:?}", t.shape());
        let (r, c) = (t.dim(0), t.dim(1));
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = t.data()[i * c + j];
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::new(vec![c, r], data), Op::Transpose(a), rg)
    }

    /// Inverse of a square matrix (Gauss-Jordan with partial pivoting).
    pub fn mat_inv(&mut self, a: Var) -> Var {
        let t = self.value(a);
        assert!(
            t.rank() == 2 && t.dim(0) == t.dim(1),
            "mat_inv: expected square matrix, got {:?}",
            t.shape()
        );
        let d = t.dim(0);
        let data = mat_inverse(t.data(), d);
        let rg = self.rg(a);
        self.push(Tensor::new(vec![d, d], data), Op::MatInv(a), rg)
    }

    /// Place a vector on the diagonal of a square matrix.
    pub fn diag_embed(&mut self, a: Var) -> Var {
        let t = self.value(a);
        assert_eq!(t.rank(), 1, "diag_embed: expected 1-D, got {:?}", t.shape());
        let d = t.dim(0);
        let mut data = vec![0.0; d * d];
        for i in 0..d {
            data[i * d + i] = t.data()[i];
        }
        let rg = self.rg(a);
        self.push(Tensor::new(vec![d, d], data), Op::DiagEmbed(a), rg)
    }

    // ── reductions ───────────────────────────────────────────────────────

    pub fn sum(&mut self, a: Var) -> Var {
        let total: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(total), Op::Sum(a), rg)
    }

    fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
        let outer: usize = shape[..axis].iter().product();
        let mid = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        (outer, mid, inner)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Var {
        let t = self.value(a);
        assert!(
            axis < t.rank(),
            "sum_axis: axis {} out of range for shape {:?}",
            axis,
            t.shape()
        );
        let (outer, mid, inner) = Self::axis_split(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                for i in 0..inner {
                    out[o * inner + i] += t.data()[(o * mid + m) * inner + i];
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let rg = self.rg(a);
        self.push(Tensor::new(shape, out), Op::SumAxis(a, axis), rg)
    }

    /// Max-shifted log-sum-exp along `axis`; the axis is removed from the
    /// result shape. Never overflows for finite inputs below ~709.
    pub fn logsumexp(&mut self, a: Var, axis: usize) -> Var {
        let t = self.value(a);
        assert!(
            axis < t.rank(),
            "logsumexp: axis {} out of range for shape {:?}",
            axis,
            t.shape()
        );
        assert!(
            t.dim(axis) > 0,
            "logsumexp: empty axis {} in shape {:?}",
            axis,
            t.shape()
        );
        let (outer, mid, inner) = Self::axis_split(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut m = f64::NEG_INFINITY;
                for k in 0..mid {
                    m = m.max(t.data()[(o * mid + k) * inner + i]);
                }
                out[o * inner + i] = if m == f64::NEG_INFINITY {
                    f64::NEG_INFINITY
                } else {
                    let s: f64 = (0..mid)
                        .map(|k| (t.data()[(o * mid + k) * inner + i] - m).exp())
                        .sum();
                    m + s.ln()
                };
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let rg = self.rg(a);
        self.push(Tensor::new(shape, out), Op::Logsumexp(a, axis), rg)
    }

    /// Elementwise `ln(exp(a) + exp(b))` for same-shape operands.
    pub fn logaddexp(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "logaddexp: shapes {:?} and {:?} differ",
            self.value(a).shape(),
            self.value(b).shape()
        );
        self.binary("logaddexp", a, b, logaddexp_f, Op::Logaddexp(a, b))
    }

    // ── shape and indexing ops ───────────────────────────────────────────

    /// Scalar pick at a flat (row-major) index.
    pub fn index(&mut self, a: Var, flat: usize) -> Var {
        let t = self.value(a);
        assert!(
            flat < t.numel(),
            "index: {} out of range for {} elements",
            flat,
            t.numel()
        );
        let v = t.data()[flat];
        let rg = self.rg(a);
        self.push(Tensor::scalar(v), Op::Index(a, flat), rg)
    }

    pub fn slice_rows(&mut self, a: Var, r0: usize, r1: usize) -> Var {
        let t = self.value(a);
        assert_eq!(t.rank(), 2, "slice_rows: expected 2-D, got {:?}", t.shape());
        assert!(r0 < r1 && r1 <= t.dim(0), "slice_rows: bad range {r0}..{r1}");
        let c = t.dim(1);
        let data = t.data()[r0 * c..r1 * c].to_vec();
        let rg = self.rg(a);
        self.push(
            Tensor::new(vec![r1 - r0, c], data),
            Op::SliceRows(a, r0),
            rg,
        )
    }

    pub fn slice_cols(&mut self, a: Var, c0: usize, c1: usize) -> Var {
        let t = self.value(a);
        assert_eq!(t.rank(), 2, "slice_cols: expected 2-D, got {:?}", t.shape());
        assert!(c0 < c1 && c1 <= t.dim(1), "slice_cols: bad range {c0}..{c1}");
        let (r, c) = (t.dim(0), t.dim(1));
        let w = c1 - c0;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&t.data()[i * c + c0..i * c + c1]);
        }
        let rg = self.rg(a);
        self.push(Tensor::new(vec![r, w], data), Op::SliceCols(a, c0, c1), rg)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert!(
            ta.rank() == 2 && tb.rank() == 2 && ta.dim(0) == tb.dim(0),
            "concat_cols: incompatible shapes {:?} and {:?}",
            ta.shape(),
            tb.shape()
        );
        let (r, ca, cb) = (ta.dim(0), ta.dim(1), tb.dim(1));
        let mut data = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            data.extend_from_slice(&ta.data()[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&tb.data()[i * cb..(i + 1) * cb]);
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(
            Tensor::new(vec![r, ca + cb], data),
            Op::ConcatCols(a, b),
            rg,
        )
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert!(
            ta.rank() == 2 && tb.rank() == 2 && ta.dim(1) == tb.dim(1),
            "concat_rows: incompatible shapes {:?} and {:?}",
            ta.shape(),
            tb.shape()
        );
        let (ra, rb, c) = (ta.dim(0), tb.dim(0), ta.dim(1));
        let mut data = Vec::with_capacity((ra + rb) * c);
        data.extend_from_slice(ta.data());
        data.extend_from_slice(tb.data());
        let rg = self.rg(a) || self.rg(b);
        self.push(
            Tensor::new(vec![ra + rb, c], data),
            Op::ConcatRows(a, b),
            rg,
        )
    }

    /// Tile a single row (`[1,C]` or `[C]`) into `n` identical rows.
    pub fn repeat_row(&mut self, a: Var, n: usize) -> Var {
        let t = self.value(a);
        let c = match t.shape() {
            [c] => *c,
            [1, c] => *c,
            s => panic!("repeat_row: expected a row vector, got {s:?}"),
        };
        let mut data = Vec::with_capacity(n * c);
        for _ in 0..n {
            data.extend_from_slice(t.data());
        }
        let rg = self.rg(a);
        self.push(Tensor::new(vec![n, c], data), Op::RepeatRow(a, n), rg)
    }

    /// Shift a 1-D tensor one slot towards higher indices, filling slot 0
    /// with `-inf`. Used by the forward-lattice "move" branch.
    pub fn shift_right_neg_inf(&mut self, a: Var) -> Var {
        let t = self.value(a);
        assert_eq!(t.rank(), 1, "shift_right: expected 1-D, got {:?}", t.shape());
        let n = t.dim(0);
        let mut data = vec![f64::NEG_INFINITY; n];
        data[1..].copy_from_slice(&t.data()[..n - 1]);
        let rg = self.rg(a);
        self.push(Tensor::new(vec![n], data), Op::ShiftRight(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let t = self.value(a);
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            t.numel(),
            "reshape: {:?} -> {:?} changes element count",
            t.shape(),
            shape
        );
        let data = t.data().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(shape, data), Op::Reshape(a), rg)
    }

    /// Row lookup: out[i] = table[idx[i]]. Backward scatter-adds into the
    /// table rows, so repeated indices accumulate.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let t = self.value(table);
        assert_eq!(t.rank(), 2, "gather_rows: expected 2-D table");
        let (v, e) = (t.dim(0), t.dim(1));
        let mut data = Vec::with_capacity(idx.len() * e);
        for &i in idx {
            assert!(i < v, "gather_rows: index {i} out of range for {v} rows");
            data.extend_from_slice(&t.data()[i * e..(i + 1) * e]);
        }
        let rg = self.rg(table);
        self.push(
            Tensor::new(vec![idx.len(), e], data),
            Op::GatherRows(table, idx.to_vec()),
            rg,
        )
    }

    /// 1-D temporal convolution with zero padding ("same" length).
    ///
    /// `x`: `[T, C_in]`, `w`: `[C_out, C_in, K]` with odd `K`, `b`: `[C_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, dilation: usize) -> Var {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        assert_eq!(tx.rank(), 2, "conv1d: input must be [T, C_in]");
        assert_eq!(tw.rank(), 3, "conv1d: weight must be [C_out, C_in, K]");
        let (t_len, c_in) = (tx.dim(0), tx.dim(1));
        let (c_out, w_cin, k) = (tw.dim(0), tw.dim(1), tw.dim(2));
        assert_eq!(
            c_in,
            w_cin,
            "conv1d: input channels {} vs weight channels {}",
            c_in,
            w_cin
        );
        assert_eq!(k % 2, 1, "conv1d: kernel width must be odd, got {k}");
        assert_eq!(tb.numel(), c_out, "conv1d: bias length mismatch");
        assert!(dilation >= 1, "conv1d: dilation must be >= 1");
        let data = conv1d_forward(
            tx.data(),
            tw.data(),
            tb.data(),
            t_len,
            c_in,
            c_out,
            k,
            dilation,
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(
            Tensor::new(vec![t_len, c_out], data),
            Op::Conv1d { x, w, b, dilation },
            rg,
        )
    }

    // ── backward ─────────────────────────────────────────────────────────

    /// Replay the tape in reverse, accumulating `d loss / d leaf` for every
    /// recorded leaf. `loss` must be scalar.
    pub fn backward(&mut self, loss: Var) {
        assert!(!self.nodes.is_empty(), "backward on an empty tape");
        assert!(
            self.nodes[loss.0].value.is_scalar(),
            "backward requires a scalar loss, got shape {:?}",
            self.nodes[loss.0].value.shape()
        );
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].clone() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        self.grads = grads;
    }

    fn accum(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: impl Fn(usize) -> f64) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        for (i, s) in slot.iter_mut().enumerate() {
            *s += contrib(i);
        }
    }

    /// Accumulate into `v` by reducing a broadcast output gradient: every
    /// output element maps onto input element `i % n_in` (tile reduction).
    fn accum_reduced(
        &self,
        grads: &mut [Option<Vec<f64>>],
        v: Var,
        g: &[f64],
        per_out: impl Fn(usize) -> f64,
    ) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        for i in 0..g.len() {
            slot[i % n] += per_out(i);
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf | Op::Const => {}
            Op::Add(a, b) => {
                self.accum_reduced(grads, *a, g, |j| g[j]);
                self.accum_reduced(grads, *b, g, |j| g[j]);
            }
            Op::Sub(a, b) => {
                self.accum_reduced(grads, *a, g, |j| g[j]);
                self.accum_reduced(grads, *b, g, |j| -g[j]);
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                let (na, nb) = (da.len(), db.len());
                self.accum_reduced(grads, *a, g, |j| g[j] * db[j % nb]);
                self.accum_reduced(grads, *b, g, |j| g[j] * da[j % na]);
            }
            Op::Div(a, b) => {
                let (da, db) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                let (na, nb) = (da.len(), db.len());
                self.accum_reduced(grads, *a, g, |j| g[j] / db[j % nb]);
                self.accum_reduced(grads, *b, g, |j| {
                    let bv = db[j % nb];
                    -g[j] * da[j % na] / (bv * bv)
                });
            }
            Op::Neg(a) => self.accum(grads, *a, |j| -g[j]),
            Op::Exp(a) => {
                let y = out.data();
                self.accum(grads, *a, |j| g[j] * y[j]);
            }
            Op::Log(a) => {
                let x = self.nodes[a.0].value.data();
                self.accum(grads, *a, |j| g[j] / x[j]);
            }
            Op::Tanh(a) => {
                let y = out.data();
                self.accum(grads, *a, |j| g[j] * (1.0 - y[j] * y[j]));
            }
            Op::Sigmoid(a) => {
                let y = out.data();
                self.accum(grads, *a, |j| g[j] * y[j] * (1.0 - y[j]));
            }
            Op::Softplus(a) => {
                let x = self.nodes[a.0].value.data();
                self.accum(grads, *a, |j| g[j] * sigmoid_f(x[j]));
            }
            Op::AddScalar(a) => self.accum(grads, *a, |j| g[j]),
            Op::MulScalar(a, c) => {
                let c = *c;
                self.accum(grads, *a, |j| g[j] * c);
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.nodes[a.0].value.data();
                let (lo, hi) = (*lo, *hi);
                self.accum(grads, *a, |j| {
                    if x[j] >= lo && x[j] <= hi {
                        g[j]
                    } else {
                        0.0
                    }
                });
            }
            Op::Matmul(a, b) => {
                let ta = &self.nodes[a.0].value;
                let tb = &self.nodes[b.0].value;
                let (m, k, n) = (ta.dim(0), ta.dim(1), tb.dim(1));
                // dA = G Bᵀ
                let mut bt = vec![0.0; n * k];
                for p in 0..k {
                    for j in 0..n {
                        bt[j * k + p] = tb.data()[p * n + j];
                    }
                }
                let da = matmul_2d(g, &bt, m, n, k);
                // dB = Aᵀ G
                let mut at = vec![0.0; k * m];
                for ii in 0..m {
                    for p in 0..k {
                        at[p * m + ii] = ta.data()[ii * k + p];
                    }
                }
                let db = matmul_2d(&at, g, k, m, n);
                self.accum(grads, *a, |j| da[j]);
                self.accum(grads, *b, |j| db[j]);
            }
            Op::Transpose(a) => {
                let (c, r) = (out.dim(0), out.dim(1)); // out is [c, r]
                self.accum(grads, *a, |j| {
                    let (i_r, i_c) = (j / c, j % c); // index into input [r, c]
                    let _ = r;
                    g[i_c * r + i_r]
                });
            }
            Op::MatInv(a) => {
                // d/dX of Y = X⁻¹ is -Yᵀ G Yᵀ.
                let d = out.dim(0);
                let y = out.data();
                let mut yt = vec![0.0; d * d];
                for r in 0..d {
                    for c in 0..d {
                        yt[c * d + r] = y[r * d + c];
                    }
                }
                let tmp = matmul_2d(&yt, g, d, d, d);
                let dx = matmul_2d(&tmp, &yt, d, d, d);
                self.accum(grads, *a, |j| -dx[j]);
            }
            Op::DiagEmbed(a) => {
                let d = out.dim(0);
                self.accum(grads, *a, |j| g[j * d + j]);
            }
            Op::Sum(a) => {
                let gv = g[0];
                self.accum(grads, *a, |_| gv);
            }
            Op::SumAxis(a, axis) => {
                let shape = self.nodes[a.0].value.shape();
                let (_, mid, inner) = Self::axis_split(shape, *axis);
                self.accum(grads, *a, |j| {
                    let o = j / (mid * inner);
                    let i = j % inner;
                    g[o * inner + i]
                });
            }
            Op::Logsumexp(a, axis) => {
                let x = self.nodes[a.0].value.data();
                let shape = self.nodes[a.0].value.shape();
                let (_, mid, inner) = Self::axis_split(shape, *axis);
                let y = out.data();
                self.accum(grads, *a, |j| {
                    let o = j / (mid * inner);
                    let i = j % inner;
                    let yv = y[o * inner + i];
                    if yv == f64::NEG_INFINITY {
                        0.0
                    } else {
                        g[o * inner + i] * (x[j] - yv).exp()
                    }
                });
            }
            Op::Logaddexp(a, b) => {
                let (xa, xb) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                let y = out.data();
                let w = |x: &[f64], j: usize| {
                    if y[j] == f64::NEG_INFINITY {
                        0.0
                    } else {
                        (x[j] - y[j]).exp()
                    }
                };
                self.accum(grads, *a, |j| g[j] * w(xa, j));
                self.accum(grads, *b, |j| g[j] * w(xb, j));
            }
            Op::Index(a, flat) => {
                let (flat, gv) = (*flat, g[0]);
                self.accum(grads, *a, |j| if j == flat { gv } else { 0.0 });
            }
            Op::SliceRows(a, r0) => {
                let c = out.dim(1);
                let off = r0 * c;
                let n_out = out.numel();
                self.accum(grads, *a, |j| {
                    if j >= off && j < off + n_out {
                        g[j - off]
                    } else {
                        0.0
                    }
                });
            }
            Op::SliceCols(a, c0, c1) => {
                let c_in = self.nodes[a.0].value.dim(1);
                let w = c1 - c0;
                let (c0, c1) = (*c0, *c1);
                self.accum(grads, *a, |j| {
                    let (r, c) = (j / c_in, j % c_in);
                    if c >= c0 && c < c1 {
                        g[r * w + (c - c0)]
                    } else {
                        0.0
                    }
                });
            }
            Op::ConcatCols(a, b) => {
                let ca = self.nodes[a.0].value.dim(1);
                let cb = self.nodes[b.0].value.dim(1);
                let c = ca + cb;
                self.accum(grads, *a, |j| {
                    let (r, col) = (j / ca, j % ca);
                    g[r * c + col]
                });
                self.accum(grads, *b, |j| {
                    let (r, col) = (j / cb, j % cb);
                    g[r * c + ca + col]
                });
            }
            Op::ConcatRows(a, b) => {
                let na = self.nodes[a.0].value.numel();
                self.accum(grads, *a, |j| g[j]);
                self.accum(grads, *b, |j| g[na + j]);
            }
            Op::RepeatRow(a, n) => {
                let c = out.dim(1);
                let n = *n;
                self.accum(grads, *a, |j| (0..n).map(|r| g[r * c + j]).sum());
            }
            Op::ShiftRight(a) => {
                let n = out.dim(0);
                self.accum(grads, *a, |j| if j + 1 < n { g[j + 1] } else { 0.0 });
            }
            Op::Reshape(a) => self.accum(grads, *a, |j| g[j]),
            Op::GatherRows(table, idx) => {
                if !self.nodes[table.0].requires_grad {
                    return;
                }
                let e = out.dim(1);
                let n = self.nodes[table.0].value.numel();
                let slot = grads[table.0].get_or_insert_with(|| vec![0.0; n]);
                for (row, &t_row) in idx.iter().enumerate() {
                    for c in 0..e {
                        slot[t_row * e + c] += g[row * e + c];
                    }
                }
            }
            Op::Conv1d { x, w, b, dilation } => {
                let tx = &self.nodes[x.0].value;
                let tw = &self.nodes[w.0].value;
                let (t_len, c_in) = (tx.dim(0), tx.dim(1));
                let (c_out, _, k) = (tw.dim(0), tw.dim(1), tw.dim(2));
                let half = ((k - 1) / 2) as isize;
                let dil = *dilation as isize;

                if self.nodes[b.0].requires_grad {
                    let slot = grads[b.0].get_or_insert_with(|| vec![0.0; c_out]);
                    for t in 0..t_len {
                        for o in 0..c_out {
                            slot[o] += g[t * c_out + o];
                        }
                    }
                }
                if self.nodes[w.0].requires_grad {
                    let slot = grads[w.0].get_or_insert_with(|| vec![0.0; c_out * c_in * k]);
                    for t in 0..t_len {
                        for kk in 0..k {
                            let src = t as isize + (kk as isize - half) * dil;
                            if src < 0 || src >= t_len as isize {
                                continue;
                            }
                            let src = src as usize;
                            for o in 0..c_out {
                                let gv = g[t * c_out + o];
                                for c in 0..c_in {
                                    slot[(o * c_in + c) * k + kk] += gv * tx.data()[src * c_in + c];
                                }
                            }
                        }
                    }
                }
                if self.nodes[x.0].requires_grad {
                    let slot = grads[x.0].get_or_insert_with(|| vec![0.0; t_len * c_in]);
                    for t in 0..t_len {
                        for kk in 0..k {
                            let src = t as isize + (kk as isize - half) * dil;
                            if src < 0 || src >= t_len as isize {
                                continue;
                            }
                            let src = src as usize;
                            for o in 0..c_out {
                                let gv = g[t * c_out + o];
                                for c in 0..c_in {
                                    slot[src * c_in + c] += gv * tw.data()[(o * c_in + c) * k + kk];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() < tol, "{a} vs {b} (|Δ|={})", (a - b).abs());
    }

    #[test]
    fn add_componentwise() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        let b = t.leaf(Tensor::vector(vec![3.0, 4.0]));
        let c = t.add(a, b);
        assert_eq!(t.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn sigmoid_symmetry_point() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::vector(vec![0.0]));
        let s = t.sigmoid(a);
        assert_eq!(t.value(s).data(), &[0.5]);
    }

    #[test]
    fn softplus_at_zero() {
        // ln(1 + e^0) evaluated independently at extended precision.
        let mut t = Tape::new();
        let a = t.leaf(Tensor::vector(vec![0.0]));
        let s = t.softplus(a);
        assert_close(t.value(s).data()[0], 0.6931471805599453, 1e-12);
    }

    #[test]
    #[should_panic(expected = "shapes [2] and [3] are not broadcast-compatible")]
    fn add_shape_mismatch_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        let b = t.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        t.add(a, b);
    }

    #[test]
    fn matmul_identity_and_selector() {
        let mut t = Tape::new();
        let i2 = t.constant(Tensor::eye(2));
        let m = t.leaf(Tensor::matrix(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let p = t.matmul(i2, m);
        assert_eq!(t.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let sel = t.constant(Tensor::matrix(&[vec![1.0, 0.0]]));
        let col = t.leaf(Tensor::matrix(&[vec![5.0], vec![7.0]]));
        let r = t.matmul(sel, col);
        assert_eq!(t.value(r).data(), &[5.0]);
    }

    #[test]
    #[should_panic(expected = "inner extents disagree")]
    fn matmul_inner_mismatch() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(&[2, 3]));
        let b = t.leaf(Tensor::zeros(&[2, 2]));
        t.matmul(a, b);
    }

    #[test]
    fn logsumexp_equal_mass_merge() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::vector(vec![0.25f64.ln(), 0.25f64.ln()]));
        let l = t.logsumexp(a, 0);
        assert_close(t.value(l).item(), 0.5f64.ln(), 1e-14);
    }

    #[test]
    fn logsumexp_dominance_and_overflow_safety() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::vector(vec![-1e9, 0.0]));
        let l = t.logsumexp(a, 0);
        assert_close(t.value(l).item(), 0.0, 1e-12);

        let b = t.leaf(Tensor::vector(vec![-1e9, 700.0]));
        let l2 = t.logsumexp(b, 0);
        assert!(t.value(l2).item().is_finite());
        assert_close(t.value(l2).item(), 700.0, 1e-9);
    }

    #[test]
    fn logsumexp_against_extended_precision() {
        // Frozen from naive summation at 50 decimal digits.
        let mut t = Tape::new();
        let a = t.leaf(Tensor::vector(vec![0.3, 1.7, -2.0]));
        let l = t.logsumexp(a, 0);
        assert_close(t.value(l).item(), 1.94005611652826887463278, 1e-12);
    }

    #[test]
    #[should_panic(expected = "empty axis")]
    fn logsumexp_empty_axis() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::new(vec![0, 2], vec![]));
        t.logsumexp(a, 0);
    }

    #[test]
    fn backward_square() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0));
        let y = t.mul(x, x);
        t.backward(y);
        assert_eq!(t.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn backward_accumulates_across_uses() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(1.5));
        let y = t.add(x, x);
        t.backward(y);
        assert_eq!(t.grad(x).unwrap().item(), 2.0);
    }

    #[test]
    #[should_panic(expected = "backward requires a scalar loss")]
    fn backward_non_scalar_loss() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        let y = t.mul(x, x);
        t.backward(y);
    }

    /// Central finite differences on a scalar function of flat inputs.
    pub(crate) fn fd_grad(
        f: &dyn Fn(&[Vec<f64>]) -> f64,
        inputs: &[Vec<f64>],
        h: f64,
    ) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for p in 0..inputs.len() {
            let mut gp = vec![0.0; inputs[p].len()];
            for i in 0..inputs[p].len() {
                let mut plus = inputs.to_vec();
                plus[p][i] += h;
                let mut minus = inputs.to_vec();
                minus[p][i] -= h;
                gp[i] = (f(&plus) - f(&minus)) / (2.0 * h);
            }
            out.push(gp);
        }
        out
    }

    pub(crate) fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a0 = Tensor::randn(&[3, 4], 1.0, &mut rng).into_data();
        let b0 = Tensor::randn(&[4, 2], 1.0, &mut rng).into_data();
        let f = |inp: &[Vec<f64>]| -> f64 {
            let mut t = Tape::new();
            let a = t.leaf(Tensor::new(vec![3, 4], inp[0].clone()));
            let b = t.leaf(Tensor::new(vec![4, 2], inp[1].clone()));
            let c = t.matmul(a, b);
            let sq = t.mul(c, c);
            let s = t.sum(sq);
            t.value(s).item()
        };
        let inputs = vec![a0.clone(), b0.clone()];
        let num = fd_grad(&f, &inputs, 1e-5);

        let mut t = Tape::new();
        let a = t.leaf(Tensor::new(vec![3, 4], a0));
        let b = t.leaf(Tensor::new(vec![4, 2], b0));
        let c = t.matmul(a, b);
        let sq = t.mul(c, c);
        let s = t.sum(sq);
        t.backward(s);
        let (ga, gb) = (t.grad(a).unwrap(), t.grad(b).unwrap());
        for (an, nu) in ga.data().iter().zip(&num[0]) {
            assert!(rel_err(*an, *nu) < 1e-6, "dA {an} vs {nu}");
        }
        for (an, nu) in gb.data().iter().zip(&num[1]) {
            assert!(rel_err(*an, *nu) < 1e-6, "dB {an} vs {nu}");
        }
    }

    #[test]
    fn dot_product_gradient_matches_finite_differences() {
        // loss = Σ(a·b)
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a0 = Tensor::randn(&[6], 1.0, &mut rng).into_data();
        let b0 = Tensor::randn(&[6], 1.0, &mut rng).into_data();
        let f = |inp: &[Vec<f64>]| -> f64 {
            let mut t = Tape::new();
            let a = t.leaf(Tensor::vector(inp[0].clone()));
            let b = t.leaf(Tensor::vector(inp[1].clone()));
            let p = t.mul(a, b);
            let s = t.sum(p);
            t.value(s).item()
        };
        let num = fd_grad(&f, &[a0.clone(), b0.clone()], 1e-5);
        let mut t = Tape::new();
        let a = t.leaf(Tensor::vector(a0));
        let b = t.leaf(Tensor::vector(b0));
        let p = t.mul(a, b);
        let s = t.sum(p);
        t.backward(s);
        for (an, nu) in t.grad(a).unwrap().data().iter().zip(&num[0]) {
            assert!(rel_err(*an, *nu) < 1e-6);
        }
        for (an, nu) in t.grad(b).unwrap().data().iter().zip(&num[1]) {
            assert!(rel_err(*an, *nu) < 1e-6);
        }
    }

    /// Every differentiable op, checked against central finite differences on
    /// random instances. 100 instances spread round-robin across op builders.
    #[test]
    fn op_sweep_gradients_match_finite_differences() {
        type Builder = fn(&mut Tape, &[Vec<f64>]) -> Var;
        // Each case: (shapes of leaf inputs, graph builder returning scalar).
        let cases: Vec<(Vec<Vec<usize>>, Builder)> = vec![
            (vec![vec![2, 3], vec![2, 3]], |t, d| {
                let a = t.leaf(Tensor::new(vec![2, 3], d[0].clone()));
                let b = t.leaf(Tensor::new(vec![2, 3], d[1].clone()));
                let c = t.add(a, b);
                let c = t.mul(c, c);
                t.sum(c)
            }),
            (vec![vec![2, 3], vec![3]], |t, d| {
                // trailing-dimension broadcast through sub/div
                let a = t.leaf(Tensor::new(vec![2, 3], d[0].clone()));
                let b = t.leaf(Tensor::new(vec![3], d[1].clone()));
                let c = t.sub(a, b);
                let e = t.exp(b);
                let q = t.div(c, e);
                let q = t.mul(q, q);
                t.sum(q)
            }),
            (vec![vec![5]], |t, d| {
                let a = t.leaf(Tensor::vector(d[0].clone()));
                let s = t.sigmoid(a);
                let u = t.tanh(s);
                let v = t.softplus(u);
                t.sum(v)
            }),
            (vec![vec![4]], |t, d| {
                let a = t.leaf(Tensor::vector(d[0].clone()));
                let e = t.exp(a);
                let l = t.log(e);
                let n = t.neg(l);
                let m = t.mul_scalar(n, 1.7);
                let m = t.add_scalar(m, 0.3);
                t.sum(m)
            }),
            (vec![vec![3, 4]], |t, d| {
                let a = t.leaf(Tensor::new(vec![3, 4], d[0].clone()));
                let l = t.logsumexp(a, 1);
                t.sum(l)
            }),
            (vec![vec![4], vec![4]], |t, d| {
                let a = t.leaf(Tensor::vector(d[0].clone()));
                let b = t.leaf(Tensor::vector(d[1].clone()));
                let l = t.logaddexp(a, b);
                let sh = t.shift_right_neg_inf(l);
                let l2 = t.logaddexp(l, sh);
                t.logsumexp(l2, 0)
            }),
            (vec![vec![2, 4]], |t, d| {
                let a = t.leaf(Tensor::new(vec![2, 4], d[0].clone()));
                let left = t.slice_cols(a, 0, 2);
                let right = t.slice_cols(a, 2, 4);
                let m = t.mul(left, right);
                let cat = t.concat_cols(m, left);
                let cat = t.concat_rows(cat, cat);
                let r0 = t.slice_rows(cat, 0, 1);
                let rep = t.repeat_row(r0, 3);
                let s = t.sum_axis(rep, 0);
                let s2 = t.mul(s, s);
                t.sum(s2)
            }),
            (vec![vec![3]], |t, d| {
                let a = t.leaf(Tensor::vector(d[0].clone()));
                let dm = t.diag_embed(a);
                let i = t.constant(Tensor::eye(3));
                let w = t.add(dm, i);
                let inv = t.mat_inv(w);
                let sq = t.mul(inv, inv);
                t.sum(sq)
            }),
            (vec![vec![5, 2], vec![3, 2, 3], vec![3]], |t, d| {
                let x = t.leaf(Tensor::new(vec![5, 2], d[0].clone()));
                let w = t.leaf(Tensor::new(vec![3, 2, 3], d[1].clone()));
                let b = t.leaf(Tensor::vector(d[2].clone()));
                let y = t.conv1d(x, w, b, 1);
                let y2 = t.mul(y, y);
                t.sum(y2)
            }),
            (vec![vec![5, 2], vec![2, 2, 3], vec![2]], |t, d| {
                let x = t.leaf(Tensor::new(vec![5, 2], d[0].clone()));
                let w = t.leaf(Tensor::new(vec![2, 2, 3], d[1].clone()));
                let b = t.leaf(Tensor::vector(d[2].clone()));
                let y = t.conv1d(x, w, b, 2);
                let s = t.tanh(y);
                t.sum(s)
            }),
            (vec![vec![4, 3]], |t, d| {
                let a = t.leaf(Tensor::new(vec![4, 3], d[0].clone()));
                let tr = t.transpose(a);
                let p = t.matmul(tr, a);
                let ix = t.index(p, 4);
                let s = t.sum(p);
                let q = t.mul(ix, s);
                t.reshape(q, vec![])
            }),
            (vec![vec![3, 2]], |t, d| {
                let table = t.leaf(Tensor::new(vec![3, 2], d[0].clone()));
                let rows = t.gather_rows(table, &[2, 0, 2, 1]);
                let sq = t.mul(rows, rows);
                t.sum(sq)
            }),
            (vec![vec![6]], |t, d| {
                let a = t.leaf(Tensor::vector(d[0].clone()));
                let c = t.clamp(a, -0.5, 0.5);
                let sq = t.mul(c, c);
                t.sum(sq)
            }),
        ];

        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut checked = 0usize;
        for trial in 0..100 {
            let (shapes, build) = &cases[trial % cases.len()];
            let inputs: Vec<Vec<f64>> = shapes
                .iter()
                .map(|s| Tensor::randn(s, 0.8, &mut rng).into_data())
                .collect();
            let f = |inp: &[Vec<f64>]| -> f64 {
                let mut t = Tape::new();
                let v = build(&mut t, inp);
                t.value(v).item()
            };
            let num = fd_grad(&f, &inputs, 1e-5);
            let mut t = Tape::new();
            // rebuild with leaves first so Var ids 0..k are the leaves
            let v = build(&mut t, &inputs);
            t.backward(v);
            let mut leaf_idx = 0usize;
            for (p, shape) in shapes.iter().enumerate() {
                // leaves are created in order by each builder
                while !matches!(t.nodes[leaf_idx].op, Op::Leaf) {
                    leaf_idx += 1;
                }
                let got = t
                    .grad(Var(leaf_idx))
                    .unwrap_or_else(|| Tensor::zeros(shape));
                for (a, n) in got.data().iter().zip(&num[p]) {
                    assert!(
                        rel_err(*a, *n) < 1e-4,
                        "case {} param {p}: {a} vs {n}",
                        trial % cases.len()
                    );
                    checked += 1;
                }
                leaf_idx += 1;
            }
        }
        assert!(checked > 500);
    }

    #[test]
    fn replay_is_bit_deterministic() {
        let run = || -> Vec<f64> {
            let mut rng = ChaCha8Rng::seed_from_u64(1234);
            let a0 = Tensor::randn(&[4, 4], 1.0, &mut rng);
            let mut t = Tape::new();
            let a = t.leaf(a0);
            let b = t.tanh(a);
            let c = t.matmul(a, b);
            let l = t.logsumexp(c, 1);
            let s = t.sum(l);
            t.backward(s);
            t.grad(a).unwrap().into_data()
        };
        let g1 = run();
        let g2 = run();
        assert!(g1.iter().zip(&g2).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn mat_inverse_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(&[5, 5], 1.0, &mut rng);
        let inv = mat_inverse(a.data(), 5);
        let prod = matmul_2d(a.data(), &inv, 5, 5, 5);
        let eye = Tensor::eye(5);
        for (p, e) in prod.iter().zip(eye.data()) {
            assert!((p - e).abs() < 1e-10);
        }
    }
}
