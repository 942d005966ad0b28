use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::scalar::{self, Scalar};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for operations defined outside this module.
///
/// `backward` receives the input values, the output value and the gradient
/// with respect to the output, and returns one optional gradient per input.
pub trait CustomOp<T: Scalar> {
    fn name(&self) -> &'static str;
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Full,
    /// Operand repeats along the leading dimension; index modulo its length.
    Trailing,
    Scalar,
}

impl Bcast {
    #[inline]
    fn index(self, i: usize, len: usize) -> usize {
        match self {
            Bcast::Full => i,
            Bcast::Trailing => i % len,
            Bcast::Scalar => 0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum UnKind {
    Neg,
    Exp,
    Log,
    Sqrt,
    Square,
    Abs,
    Sigmoid,
    Tanh,
    Relu,
    Gelu,
    Softplus,
    LnGamma,
}

enum Op<T: Scalar> {
    Leaf,
    Binary { kind: BinKind, a: Var, b: Var, ba: Bcast, bb: Bcast },
    Unary { kind: UnKind, a: Var },
    Pow { a: Var, p: T },
    Scale { a: Var, c: T },
    AddConst { a: Var },
    MulConst { a: Var, c: Tensor<T> },
    MatMul { a: Var, b: Var },
    Transpose { a: Var },
    Sum { a: Var },
    SumAxis { a: Var, axis: usize },
    Softmax { a: Var },
    LogSumExp { a: Var },
    LayerNorm { a: Var, inv_std: Vec<T> },
    Concat { parts: Vec<Var> },
    Slice { a: Var, start: usize, end: usize },
    Reshape { a: Var },
    IndexSelect { a: Var, idx: Vec<usize> },
    TriSolve { l: Var, b: Var, lower: bool, unit: bool },
    Cholesky { a: Var },
    Solve { a: Var, b: Var },
    TraceExpm { a: Var, expm: Mat<T> },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary { kind, .. } => match kind {
                BinKind::Add => "add",
                BinKind::Sub => "sub",
                BinKind::Mul => "mul",
                BinKind::Div => "div",
            },
            Op::Unary { kind, .. } => match kind {
                UnKind::Neg => "neg",
                UnKind::Exp => "exp",
                UnKind::Log => "log",
                UnKind::Sqrt => "sqrt",
                UnKind::Square => "square",
                UnKind::Abs => "abs",
                UnKind::Sigmoid => "sigmoid",
                UnKind::Tanh => "tanh",
                UnKind::Relu => "relu",
                UnKind::Gelu => "gelu",
                UnKind::Softplus => "softplus",
                UnKind::LnGamma => "lgamma",
            },
            Op::Pow { .. } => "pow",
            Op::Scale { .. } => "scale",
            Op::AddConst { .. } => "add_const",
            Op::MulConst { .. } => "mul_const",
            Op::MatMul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Sum { .. } => "sum",
            Op::SumAxis { .. } => "sum_axis",
            Op::Softmax { .. } => "softmax",
            Op::LogSumExp { .. } => "logsumexp",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape { .. } => "reshape",
            Op::IndexSelect { .. } => "index_select",
            Op::TriSolve { .. } => "triangular_solve",
            Op::Cholesky { .. } => "cholesky",
            Op::Solve { .. } => "solve",
            Op::TraceExpm { .. } => "trace_expm",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records one forward pass. Nodes are appended in evaluation order, so
/// parents always precede children and the reverse sweep is a single pass.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    non_finite: Option<(usize, &'static str)>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            non_finite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        if self.non_finite.is_none() && !value.all_finite() {
            self.non_finite = Some((id, op.name()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(id)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, x: T) -> Var {
        self.constant(Tensor::scalar(x))
    }

    /// Differentiable input.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    /// Gradient accumulated by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Error if any forward value so far was NaN or infinite.
    pub fn check_finite(&self) -> Result<()> {
        match self.non_finite {
            None => Ok(()),
            Some((node, op)) => Err(Error::NonFinite { op, node }),
        }
    }

    // ---------------------------------------------------------------- binary

    fn broadcast(&self, a: Var, b: Var, op: &'static str) -> Result<(Vec<usize>, Bcast, Bcast)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let na: usize = sa.iter().product();
        let nb: usize = sb.iter().product();
        if sa == sb {
            Ok((sa.to_vec(), Bcast::Full, Bcast::Full))
        } else if nb == 1 && sb.len() <= 1 {
            Ok((sa.to_vec(), Bcast::Full, Bcast::Scalar))
        } else if na == 1 && sa.len() <= 1 {
            Ok((sb.to_vec(), Bcast::Scalar, Bcast::Full))
        } else if sa.len() == sb.len() + 1 && sa[1..] == *sb {
            Ok((sa.to_vec(), Bcast::Full, Bcast::Trailing))
        } else if sb.len() == sa.len() + 1 && sb[1..] == *sa {
            Ok((sb.to_vec(), Bcast::Trailing, Bcast::Full))
        } else {
            Err(Error::shape(op, format!("{sa:?} vs {sb:?}")))
        }
    }

    fn binary(&mut self, a: Var, b: Var, kind: BinKind, name: &'static str) -> Result<Var> {
        let (shape, ba, bb) = self.broadcast(a, b, name)?;
        let va = self.value(a);
        let vb = self.value(b);
        let (la, lb) = (va.numel(), vb.numel());
        let n: usize = shape.iter().product();
        let f = |x: T, y: T| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
            BinKind::Div => x / y,
        };
        let data = (0..n)
            .map(|i| f(va.data()[ba.index(i, la)], vb.data()[bb.index(i, lb)]))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Binary { kind, a, b, ba, bb }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Add, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Sub, "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Mul, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Div, "div")
    }

    /// Sums a non-empty list of same-shaped nodes.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| Error::shape("add_all", "empty list"))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    // ----------------------------------------------------------------- unary

    fn unary(&mut self, a: Var, kind: UnKind) -> Var {
        let f = |x: T| -> T {
            match kind {
                UnKind::Neg => -x,
                UnKind::Exp => x.exp(),
                UnKind::Log => x.ln(),
                UnKind::Sqrt => x.sqrt(),
                UnKind::Square => x * x,
                UnKind::Abs => x.abs(),
                UnKind::Sigmoid => scalar::sigmoid(x),
                UnKind::Tanh => x.tanh(),
                UnKind::Relu => x.max(T::zero()),
                UnKind::Gelu => {
                    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
                    T::lit(0.5) * x * (T::one() + inner.tanh())
                }
                UnKind::Softplus => scalar::softplus(x),
                UnKind::LnGamma => scalar::ln_gamma(x),
            }
        };
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(value, Op::Unary { kind, a }, rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, UnKind::Neg)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, UnKind::Exp)
    }
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, UnKind::Log)
    }
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, UnKind::Sqrt)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, UnKind::Square)
    }
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, UnKind::Abs)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, UnKind::Sigmoid)
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, UnKind::Tanh)
    }
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, UnKind::Relu)
    }
    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, UnKind::Gelu)
    }
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, UnKind::Softplus)
    }
    pub fn ln_gamma(&mut self, a: Var) -> Var {
        self.unary(a, UnKind::LnGamma)
    }

    pub fn pow(&mut self, a: Var, p: T) -> Var {
        let value = self.value(a).map(|x| x.powf(p));
        let rg = self.rg(a);
        self.push(value, Op::Pow { a, p }, rg)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(value, Op::Scale { a, c }, rg)
    }

    pub fn add_const(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(value, Op::AddConst { a }, rg)
    }

    /// Elementwise product with a same-shaped constant.
    pub fn mul_const(&mut self, a: Var, c: Tensor<T>) -> Result<Var> {
        let va = self.value(a);
        if va.shape() != c.shape() {
            return Err(Error::shape(
                "mul_const",
                format!("{:?} vs {:?}", va.shape(), c.shape()),
            ));
        }
        let data = va.data().iter().zip(c.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::MulConst { a, c }, rg))
    }

    /// Inverted dropout: kept entries scaled by `1/(1-p)` in train mode,
    /// identity otherwise.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: T, train: bool, rng: &mut R) -> Result<Var> {
        if !train || p <= T::zero() {
            return Ok(a);
        }
        if p >= T::one() {
            return Err(Error::domain(format!("dropout probability {p} must be < 1")));
        }
        let keep = T::one() / (T::one() - p);
        let pf = p.to_f64_lossy();
        let shape = self.shape(a).to_vec();
        let n: usize = shape.iter().product();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.random::<f64>() < pf { T::zero() } else { keep })
            .collect();
        self.mul_const(a, Tensor::new(shape, mask)?)
    }

    // ---------------------------------------------------------- linear maps

    /// Matrix product; either side may carry a leading batch dimension.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ba, m, k) = split_batch(self.shape(a), "matmul")?;
        let (bb, k2, n) = split_batch(self.shape(b), "matmul")?;
        if k != k2 || (ba.is_some() && bb.is_some() && ba != bb) {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let batch = ba.or(bb);
        let nb = batch.unwrap_or(1);
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let mut out = vec![T::zero(); nb * m * n];
        for bi in 0..nb {
            let oa = if ba.is_some() { bi * m * k } else { 0 };
            let ob = if bb.is_some() { bi * k * n } else { 0 };
            mm_acc(&va[oa..oa + m * k], &vb[ob..ob + k * n], &mut out[bi * m * n..(bi + 1) * m * n], m, k, n);
        }
        let shape = match batch {
            Some(b) => vec![b, m, n],
            None => vec![m, n],
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a, b }, rg))
    }

    /// Swaps the last two dimensions.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = transpose_last2(self.value(a))?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Transpose { a }, rg))
    }

    // ------------------------------------------------------------ reductions

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1);
        let s = self.sum(a);
        self.scale(s, T::one() / T::from_usize_lossy(n))
    }

    /// Sum of absolute values.
    pub fn l1_norm(&mut self, a: Var) -> Var {
        let abs = self.abs(a);
        self.sum(abs)
    }

    /// Reduces one axis by summation.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("sum_axis", format!("axis {axis} of {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let v = self.value(a).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &v[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &x) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += x;
                }
            }
        }
        let mut oshape = shape;
        oshape.remove(axis);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(oshape, out)?, Op::SumAxis { a, axis }, rg))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| Error::shape("mean_axis", "axis out of range"))?;
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, T::one() / T::from_usize_lossy(len.max(1))))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let w = v.last_dim();
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(w.max(1)) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
        }
        let value = Tensor::new(v.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::Softmax { a }, rg)
    }

    /// `log(sum(exp(x)))` over the last axis; the axis is dropped.
    pub fn logsumexp(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let w = v.last_dim().max(1);
        let out: Vec<T> = v
            .data()
            .chunks(w)
            .map(|row| {
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                if m == T::neg_infinity() {
                    return m;
                }
                m + row.iter().map(|&x| (x - m).exp()).sum::<T>().ln()
            })
            .collect();
        let mut shape = v.shape().to_vec();
        shape.pop();
        let value = Tensor::new(shape, out).expect("consistent shape");
        let rg = self.rg(a);
        self.push(value, Op::LogSumExp { a }, rg)
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: T) -> Var {
        let v = self.value(a);
        let w = v.last_dim().max(1);
        let wf = T::from_usize_lossy(w);
        let mut out = v.data().to_vec();
        let mut inv_std = Vec::with_capacity(out.len() / w);
        for row in out.chunks_mut(w) {
            let mean = row.iter().copied().sum::<T>() / wf;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / wf;
            let is = T::one() / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * is;
            }
            inv_std.push(is);
        }
        let value = Tensor::new(v.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::LayerNorm { a, inv_std }, rg)
    }

    // ------------------------------------------------------------ structural

    /// Concatenates along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        if parts.len() == 1 {
            return Ok(first);
        }
        let lead = {
            let s = self.shape(first);
            s[..s.len().saturating_sub(1)].to_vec()
        };
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != *lead {
                return Err(Error::shape("concat", format!("{s:?} vs leading {lead:?}")));
            }
            widths.push(*s.last().expect("non-empty"));
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat { parts: parts.to_vec() }, rg))
    }

    /// Columns `start..end` of the last axis.
    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(a);
        let w = v.last_dim();
        if v.rank() == 0 || start >= end || end > w {
            return Err(Error::shape("slice", format!("{start}..{end} of {:?}", v.shape())));
        }
        let out: Vec<T> = v
            .data()
            .chunks(w)
            .flat_map(|row| row[start..end].iter().copied())
            .collect();
        let mut shape = v.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = end - start;
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice { a, start, end }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape { a }, rg))
    }

    /// Gathers flat elements of `a`: `out[i] = a.flat[idx[i]]`, reshaped to
    /// `shape`. Gradients scatter-add back.
    pub fn index_select(&mut self, a: Var, idx: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let v = self.value(a);
        if idx.len() != shape.iter().product::<usize>() {
            return Err(Error::shape("index_select", "index count does not match shape"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= v.numel()) {
            return Err(Error::shape(
                "index_select",
                format!("index {bad} out of range for {} elements", v.numel()),
            ));
        }
        let out = idx.iter().map(|&i| v.data()[i]).collect();
        let value = Tensor::new(shape.to_vec(), out)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::IndexSelect { a, idx }, rg))
    }

    /// Row lookup in a `[levels, width]` table.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        let [levels, w] = s[..] else {
            return Err(Error::shape("gather_rows", format!("table shape {s:?}")));
        };
        if let Some(&bad) = rows.iter().find(|&&r| r >= levels) {
            return Err(Error::shape(
                "gather_rows",
                format!("row {bad} out of range for {levels} levels"),
            ));
        }
        let idx = rows.iter().flat_map(|&r| (r * w)..(r + 1) * w).collect();
        self.index_select(table, idx, &[rows.len(), w])
    }

    /// Picks one column per row of a `[n, k]` matrix.
    pub fn pick(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let [n, k] = s[..] else {
            return Err(Error::shape("pick", format!("shape {s:?}")));
        };
        if cols.len() != n || cols.iter().any(|&c| c >= k) {
            return Err(Error::shape("pick", "column index out of range"));
        }
        let idx = cols.iter().enumerate().map(|(i, &c)| i * k + c).collect();
        self.index_select(a, idx, &[n])
    }

    // ---------------------------------------------------------- factorizing

    /// Solves `L X = B` (or `U X = B` when `lower` is false). With
    /// `unit_diag` the stored diagonal is ignored and treated as ones.
    pub fn triangular_solve(&mut self, l: Var, b: Var, lower: bool, unit_diag: bool) -> Result<Var> {
        let lm = self.value(l).to_mat()?;
        let bm = self.value(b).to_mat()?;
        let x = if lower {
            lm.solve_lower(&bm, unit_diag)?
        } else {
            lm.solve_upper(&bm, unit_diag)?
        };
        let shape = self.shape(b).to_vec();
        let value = Tensor::new(shape, x.into_vec())?;
        let rg = self.rg(l) || self.rg(b);
        Ok(self.push(
            value,
            Op::TriSolve {
                l,
                b,
                lower,
                unit: unit_diag,
            },
            rg,
        ))
    }

    /// Lower Cholesky factor of the symmetric part of `a`.
    pub fn cholesky(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a).to_mat()?;
        let sym = m.add(&m.transpose())?.scale(T::lit(0.5));
        let l = sym.cholesky()?;
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_mat(&l), Op::Cholesky { a }, rg))
    }

    /// General dense solve `A X = B` by partially pivoted LU.
    pub fn solve(&mut self, a: Var, b: Var) -> Result<Var> {
        let am = self.value(a).to_mat()?;
        let bm = self.value(b).to_mat()?;
        let x = am.solve(&bm)?;
        let value = Tensor::new(self.shape(b).to_vec(), x.into_vec())?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Solve { a, b }, rg))
    }

    /// `trace(exp(A))`.
    pub fn trace_expm(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a).to_mat()?;
        let e = m.expm()?;
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(e.trace()), Op::TraceExpm { a, expm: e }, rg))
    }

    /// Records an externally computed value with its own backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    // -------------------------------------------------------------- backward

    /// Reverse sweep from a scalar root. Gradients accumulate additively into
    /// every node that depends on a parameter.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, got {:?}", self.shape(root)),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let root_shape = self.shape(root).to_vec();
        grads[root.0] = Some(Tensor::full(&root_shape, T::one()));
        for id in (0..=root.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[id];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b, ba, bb } => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let (la, lb) = (va.numel(), vb.numel());
                let mut ga = vec![T::zero(); la];
                let mut gb = vec![T::zero(); lb];
                for (i, &gi) in g.data().iter().enumerate() {
                    let ia = ba.index(i, la);
                    let ib = bb.index(i, lb);
                    let (x, y) = (va.data()[ia], vb.data()[ib]);
                    let (dx, dy) = match kind {
                        BinKind::Add => (gi, gi),
                        BinKind::Sub => (gi, -gi),
                        BinKind::Mul => (gi * y, gi * x),
                        BinKind::Div => (gi / y, -gi * x / (y * y)),
                    };
                    ga[ia] += dx;
                    gb[ib] += dy;
                }
                self.accumulate(grads, *a, Tensor::new(va.shape().to_vec(), ga)?);
                self.accumulate(grads, *b, Tensor::new(vb.shape().to_vec(), gb)?);
            }
            Op::Unary { kind, a } => {
                let x = self.value(*a);
                let data = x
                    .data()
                    .iter()
                    .zip(out.data())
                    .zip(g.data())
                    .map(|((&x, &y), &gi)| gi * unary_deriv(*kind, x, y))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), data)?);
            }
            Op::Pow { a, p } => {
                let x = self.value(*a);
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gi)| gi * *p * x.powf(*p - T::one()))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), data)?);
            }
            Op::Scale { a, c } => self.accumulate(grads, *a, g.map(|x| x * *c)),
            Op::AddConst { a } => self.accumulate(grads, *a, g.clone()),
            Op::MulConst { a, c } => {
                let data = g.data().iter().zip(c.data()).map(|(&x, &y)| x * y).collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), data)?);
            }
            Op::MatMul { a, b } => {
                let (ba, m, k) = split_batch(self.shape(*a), "matmul")?;
                let (bbt, _, n) = split_batch(self.shape(*b), "matmul")?;
                let nb = ba.or(bbt).unwrap_or(1);
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                let mut ga = vec![T::zero(); self.value(*a).numel()];
                let mut gb = vec![T::zero(); self.value(*b).numel()];
                for bi in 0..nb {
                    let oa = if ba.is_some() { bi * m * k } else { 0 };
                    let ob = if bbt.is_some() { bi * k * n } else { 0 };
                    let gs = &g.data()[bi * m * n..(bi + 1) * m * n];
                    // ga += g * b^T ; gb += a^T * g
                    for i in 0..m {
                        for j in 0..n {
                            let gij = gs[i * n + j];
                            if gij == T::zero() {
                                continue;
                            }
                            for l in 0..k {
                                ga[oa + i * k + l] += gij * vb[ob + l * n + j];
                                gb[ob + l * n + j] += gij * va[oa + i * k + l];
                            }
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(self.shape(*a).to_vec(), ga)?);
                self.accumulate(grads, *b, Tensor::new(self.shape(*b).to_vec(), gb)?);
            }
            Op::Transpose { a } => self.accumulate(grads, *a, transpose_last2(g)?),
            Op::Sum { a } => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, Tensor::full(&shape, g.item()));
            }
            Op::SumAxis { a, axis } => {
                let shape = self.shape(*a).to_vec();
                let (outer, len, inner) = axis_split(&shape, *axis);
                let mut data = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    for _ in 0..len {
                        data.extend_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(shape, data)?);
            }
            Op::Softmax { a } => {
                let w = out.last_dim().max(1);
                let mut data = Vec::with_capacity(out.numel());
                for (y, gr) in out.data().chunks(w).zip(g.data().chunks(w)) {
                    let dot: T = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    data.extend(y.iter().zip(gr).map(|(&yi, &gi)| yi * (gi - dot)));
                }
                self.accumulate(grads, *a, Tensor::new(out.shape().to_vec(), data)?);
            }
            Op::LogSumExp { a } => {
                let x = self.value(*a);
                let w = x.last_dim().max(1);
                let mut data = Vec::with_capacity(x.numel());
                for ((row, &lse), &gi) in x.data().chunks(w).zip(out.data()).zip(g.data()) {
                    data.extend(row.iter().map(|&xi| gi * (xi - lse).exp()));
                }
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), data)?);
            }
            Op::LayerNorm { a, inv_std } => {
                let w = out.last_dim().max(1);
                let wf = T::from_usize_lossy(w);
                let mut data = Vec::with_capacity(out.numel());
                for ((y, gr), &is) in out.data().chunks(w).zip(g.data().chunks(w)).zip(inv_std) {
                    let mg = gr.iter().copied().sum::<T>() / wf;
                    let mgy = y.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>() / wf;
                    data.extend(y.iter().zip(gr).map(|(&yi, &gi)| is * (gi - mg - yi * mgy)));
                }
                self.accumulate(grads, *a, Tensor::new(out.shape().to_vec(), data)?);
            }
            Op::Concat { parts } => {
                let total = out.last_dim();
                let rows = out.numel() / total.max(1);
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    let mut data = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        data.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                    }
                    self.accumulate(grads, p, Tensor::new(self.shape(p).to_vec(), data)?);
                    offset += w;
                }
            }
            Op::Slice { a, start, end } => {
                let x = self.value(*a);
                let w = x.last_dim();
                let sw = end - start;
                let mut data = vec![T::zero(); x.numel()];
                for (r, gr) in g.data().chunks(sw).enumerate() {
                    data[r * w + start..r * w + end].copy_from_slice(gr);
                }
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), data)?);
            }
            Op::Reshape { a } => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, g.clone().reshaped(&shape)?);
            }
            Op::IndexSelect { a, idx } => {
                let x = self.value(*a);
                let mut data = vec![T::zero(); x.numel()];
                for (&i, &gi) in idx.iter().zip(g.data()) {
                    data[i] += gi;
                }
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), data)?);
            }
            Op::TriSolve { l, b, lower, unit } => {
                let lm = self.value(*l).to_mat()?;
                let xm = out.to_mat()?;
                let gm = g.to_mat()?;
                let lt = lm.transpose();
                let gb = if *lower {
                    lt.solve_upper(&gm, *unit)?
                } else {
                    lt.solve_lower(&gm, *unit)?
                };
                if self.rg(*l) {
                    let n = lm.rows();
                    let full = gb.matmul(&xm.transpose())?;
                    let gl = Mat::from_fn(n, n, |i, j| {
                        let keep = if *lower { j < i || (!*unit && i == j) } else { j > i || (!*unit && i == j) };
                        if keep {
                            -full[(i, j)]
                        } else {
                            T::zero()
                        }
                    });
                    self.accumulate(grads, *l, Tensor::new(self.shape(*l).to_vec(), gl.into_vec())?);
                }
                self.accumulate(grads, *b, Tensor::new(self.shape(*b).to_vec(), gb.into_vec())?);
            }
            Op::Cholesky { a } => {
                let lm = out.to_mat()?;
                let gl = g.to_mat()?;
                let n = lm.rows();
                // P = Phi(L^T Lbar); S = L^{-T} P L^{-1}; Abar = sym(S)
                let p = phi(&lm.transpose().matmul(&gl)?);
                let lt = lm.transpose();
                // L^{-T} P
                let left = lt.solve_upper(&p, false)?;
                // (L^{-T} P) L^{-1} = (L^{-T} (L^{-T} P)^T)^T
                let s = lt.solve_upper(&left.transpose(), false)?.transpose();
                let ga = Mat::from_fn(n, n, |i, j| T::lit(0.5) * (s[(i, j)] + s[(j, i)]));
                self.accumulate(grads, *a, Tensor::from_mat(&ga));
            }
            Op::Solve { a, b } => {
                let am = self.value(*a).to_mat()?;
                let xm = out.to_mat()?;
                let gm = g.to_mat()?;
                let gb = am.transpose().solve(&gm)?;
                if self.rg(*a) {
                    let ga = gb.matmul(&xm.transpose())?.scale(-T::one());
                    self.accumulate(grads, *a, Tensor::from_mat(&ga));
                }
                self.accumulate(grads, *b, Tensor::new(self.shape(*b).to_vec(), gb.into_vec())?);
            }
            Op::TraceExpm { a, expm } => {
                let ga = expm.transpose().scale(g.item());
                self.accumulate(grads, *a, Tensor::from_mat(&ga));
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                let gs = op.backward(&vals, out, g)?;
                for (&v, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        if gi.shape() != self.shape(v) {
                            return Err(Error::shape(op.name(), "custom gradient shape"));
                        }
                        self.accumulate(grads, v, gi);
                    }
                }
            }
        }
        Ok(())
    }
}

fn unary_deriv<T: Scalar>(kind: UnKind, x: T, y: T) -> T {
    match kind {
        UnKind::Neg => -T::one(),
        UnKind::Exp => y,
        UnKind::Log => T::one() / x,
        UnKind::Sqrt => T::lit(0.5) / y,
        UnKind::Square => T::lit(2.0) * x,
        UnKind::Abs => {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        }
        UnKind::Sigmoid => y * (T::one() - y),
        UnKind::Tanh => T::one() - y * y,
        UnKind::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        UnKind::Gelu => {
            let c = T::lit(GELU_C);
            let a = T::lit(GELU_A);
            let t = (c * (x + a * x * x * x)).tanh();
            T::lit(0.5) * (T::one() + t)
                + T::lit(0.5) * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
        }
        UnKind::Softplus => scalar::sigmoid(x),
        UnKind::LnGamma => scalar::digamma(x),
    }
}

/// Lower triangle with the diagonal halved.
fn phi<T: Scalar>(m: &Mat<T>) -> Mat<T> {
    Mat::from_fn(m.rows(), m.cols(), |i, j| match i.cmp(&j) {
        std::cmp::Ordering::Greater => m[(i, j)],
        std::cmp::Ordering::Equal => T::lit(0.5) * m[(i, j)],
        std::cmp::Ordering::Less => T::zero(),
    })
}

fn split_batch(shape: &[usize], op: &'static str) -> Result<(Option<usize>, usize, usize)> {
    match *shape {
        [m, k] => Ok((None, m, k)),
        [b, m, k] => Ok((Some(b), m, k)),
        _ => Err(Error::shape(op, format!("needs rank 2 or 3, got {shape:?}"))),
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn mm_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for l in 0..k {
            let x = a[i * k + l];
            if x == T::zero() {
                continue;
            }
            for (o, &y) in row.iter_mut().zip(&b[l * n..(l + 1) * n]) {
                *o += x * y;
            }
        }
    }
}

fn transpose_last2<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, m, n) = split_batch(t.shape(), "transpose")?;
    let nb = batch.unwrap_or(1);
    let mut out = vec![T::zero(); t.numel()];
    for b in 0..nb {
        let src = &t.data()[b * m * n..(b + 1) * m * n];
        let dst = &mut out[b * m * n..(b + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    let shape = match batch {
        Some(b) => vec![b, n, m],
        None => vec![n, m],
    };
    Tensor::new(shape, out)
}
