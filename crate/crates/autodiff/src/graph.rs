//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op in creation order, so node inputs always precede the
//! node itself and a single reverse sweep visits each node after all of its consumers.
//! Handles ([`Var`]) are plain indices into the tape; a graph is confined to the thread
//! that builds it.

use crate::error::{Result, TensorError};
use crate::float::{lit, Float};
use crate::kernels;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Floor applied to the reference distribution inside [`Graph::kl_div`].
pub const KL_Q_FLOOR: f64 = 1e-12;

/// Allowed deviation of a probability row sum from 1 in [`Graph::kl_div`].
pub const PROB_ROW_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    AddBias,
    Scale,
    Matmul,
    Bmm,
    Permute,
    Reshape,
    Softmax,
    Exp,
    Log,
    Gelu,
    LayerNorm,
    Sum,
    Mean,
    Embedding,
    CausalMask,
    MaskFill,
    Column,
    ScaleRows,
    Concat,
    CrossEntropy,
    KlDiv,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    Matmul { a: Var, b: Var, ta: bool, tb: bool, m: usize, k: usize, n: usize },
    Bmm { a: Var, b: Var, ta: bool, tb: bool, batch: usize, m: usize, k: usize, n: usize },
    Permute { x: Var, src: Vec<usize> },
    Reshape(Var),
    Softmax(Var),
    Exp(Var),
    Log(Var),
    Gelu { x: Var, deriv: Vec<T> },
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, rstd: Vec<T> },
    Sum(Var),
    Mean(Var),
    Embedding { table: Var, ids: Vec<usize> },
    CausalMask(Var),
    MaskFill { x: Var, keep: Vec<bool> },
    Column { x: Var, col: usize },
    ScaleRows { x: Var, s: Var },
    Concat(Vec<Var>),
    CrossEntropy { logits: Var, targets: Vec<usize>, active: Vec<bool>, count: usize, probs: Vec<T> },
    KlDiv { p: Var, q: Var, active: Vec<bool>, count: usize },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::AddBias(..) => OpKind::AddBias,
            Op::Scale(..) => OpKind::Scale,
            Op::Matmul { .. } => OpKind::Matmul,
            Op::Bmm { .. } => OpKind::Bmm,
            Op::Permute { .. } => OpKind::Permute,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Softmax(..) => OpKind::Softmax,
            Op::Exp(..) => OpKind::Exp,
            Op::Log(..) => OpKind::Log,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::Embedding { .. } => OpKind::Embedding,
            Op::CausalMask(..) => OpKind::CausalMask,
            Op::MaskFill { .. } => OpKind::MaskFill,
            Op::Column { .. } => OpKind::Column,
            Op::ScaleRows { .. } => OpKind::ScaleRows,
            Op::Concat(..) => OpKind::Concat,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::KlDiv { .. } => OpKind::KlDiv,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) => vec![*a, *b],
            Op::Matmul { a, b, .. } | Op::Bmm { a, b, .. } => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Reshape(x)
            | Op::Softmax(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::CausalMask(x) => vec![*x],
            Op::Permute { x, .. } | Op::MaskFill { x, .. } | Op::Column { x, .. } | Op::Gelu { x, .. } => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Embedding { table, .. } => vec![*table],
            Op::ScaleRows { x, s } => vec![*x, *s],
            Op::Concat(parts) => parts.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::KlDiv { p, q, .. } => vec![*p, *q],
        }
    }
}

/// Recording tape plus the values and gradients of every node on it.
#[derive(Debug, Default)]
pub struct Graph<T> {
    values: Vec<Tensor<T>>,
    ops: Vec<Op<T>>,
    requires: Vec<bool>,
    grads: Vec<Option<Vec<T>>>,
    fault: Option<(OpKind, T)>,
}

fn same_dims<T: Float>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(TensorError::shape(op, format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

fn active_rows(op: &'static str, rows: usize, mask: Option<&[bool]>) -> Result<(Vec<bool>, usize)> {
    let active = match mask {
        Some(m) if m.len() != rows => return Err(TensorError::shape(op, format!("mask has {} rows, expected {rows}", m.len()))),
        Some(m) => m.to_vec(),
        None => vec![true; rows],
    };
    let count = active.iter().filter(|&&a| a).count();
    if count == 0 {
        return Err(TensorError::validation(op, "every row is masked out"));
    }
    Ok((active, count))
}

/// Source index for each destination element of a permutation.
fn permute_sources(dims: &[usize], perm: &[usize]) -> Vec<usize> {
    let rank = dims.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * dims[i + 1];
    }
    let out_dims: Vec<usize> = perm.iter().map(|&p| dims[p]).collect();
    let out_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let numel: usize = dims.iter().product();
    let mut src = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..numel {
        src.push(offset);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += out_strides[ax];
            if idx[ax] < out_dims[ax] {
                break;
            }
            offset -= out_strides[ax] * out_dims[ax];
            idx[ax] = 0;
        }
    }
    src
}

fn grad_slot<'a, T: Float>(
    grads: &'a mut [Option<Vec<T>>],
    requires: &[bool],
    values: &[Tensor<T>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    if !requires[v.0] {
        return None;
    }
    let numel = values[v.0].numel();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); numel]))
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph { values: Vec::new(), ops: Vec::new(), requires: Vec::new(), grads: Vec::new(), fault: None }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires = op.inputs().iter().any(|v| self.requires[v.0]);
        self.values.push(value);
        self.ops.push(op);
        self.requires.push(requires);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.values.push(value);
        self.ops.push(Op::Leaf);
        self.requires.push(requires_grad);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// A constant copy of `x`; gradients do not flow back through it.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.values[x.0].clone();
        self.constant(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].as_ref().map(|g| Tensor::new(self.values[v.0].dims().to_vec(), g.clone()).expect("grad matches value"))
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.ops[v.0].kind()
    }

    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.ops[v.0].inputs()
    }

    /// Test hook: scales the upstream gradient seen by every op of `kind` by
    /// `1 + factor` during backward, simulating a broken backward rule.
    pub fn inject_backward_fault(&mut self, kind: OpKind, factor: T) {
        self.fault = Some((kind, factor));
    }

    // ---- elementwise -------------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        same_dims("add", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.dims().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        same_dims("sub", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x - y).collect();
        let out = Tensor::new(va.dims().to_vec(), data)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        same_dims("mul", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(va.dims().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// `x + bias` with `bias` broadcast over every row of the trailing axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (&self.values[x.0], &self.values[bias.0]);
        if vb.rank() != 1 || vb.numel() != vx.last_dim() {
            return Err(TensorError::shape("add_bias", format!("{:?} + {:?}", vx.dims(), vb.dims())));
        }
        let n = vb.numel();
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, &b) in row.iter_mut().zip(vb.data()) {
                *v += b;
            }
        }
        let out = Tensor::new(vx.dims().to_vec(), data)?;
        Ok(self.push(out, Op::AddBias(x, bias)))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let vx = &self.values[x.0];
        let data = vx.data().iter().map(|&v| v * s).collect();
        let out = Tensor::new(vx.dims().to_vec(), data).expect("same shape");
        self.push(out, Op::Scale(x, s))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let vx = &self.values[x.0];
        let out = Tensor::new(vx.dims().to_vec(), vx.data().iter().map(|v| v.exp()).collect()).expect("same shape");
        self.push(out, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let vx = &self.values[x.0];
        if vx.data().iter().any(|&v| v <= T::zero()) {
            return Err(TensorError::validation("log", "non-positive input"));
        }
        let out = Tensor::new(vx.dims().to_vec(), vx.data().iter().map(|v| v.ln()).collect())?;
        Ok(self.push(out, Op::Log(x)))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let vx = &self.values[x.0];
        let (data, deriv) = if self.requires[x.0] {
            vx.data().iter().map(|&v| kernels::gelu_with_grad(v)).unzip()
        } else {
            (vx.data().iter().map(|&v| kernels::gelu(v)).collect(), Vec::new())
        };
        let out = Tensor::new(vx.dims().to_vec(), data).expect("same shape");
        self.push(out, Op::Gelu { x, deriv })
    }

    // ---- linear algebra ----------------------------------------------------------

    /// `a · b` where `b` is `[k, n]` and `a` is `[.., k]`; leading axes of `a` are
    /// treated as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, false)
    }

    /// `a · bᵀ` where `b` is stored as `[n, k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, true)
    }

    /// `aᵀ · b` for a 2-D `a` stored as `[k, m]`.
    pub fn t_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, true, false)
    }

    fn matmul_ex(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        if vb.rank() != 2 || va.rank() < 2 || (ta && va.rank() != 2) {
            return Err(TensorError::shape("matmul", format!("{:?} x {:?}", va.dims(), vb.dims())));
        }
        let (m, k) = if ta { (va.dims()[1], va.dims()[0]) } else { (va.rows(), va.last_dim()) };
        let (kb, n) = if tb { (vb.dims()[1], vb.dims()[0]) } else { (vb.dims()[0], vb.dims()[1]) };
        if k != kb {
            return Err(TensorError::shape(
                "matmul",
                format!("inner dims differ: {:?} x {:?} (ta={ta}, tb={tb})", va.dims(), vb.dims()),
            ));
        }
        let mut data = vec![T::zero(); m * n];
        kernels::gemm(m, k, n, va.data(), ta, vb.data(), tb, T::zero(), &mut data);
        let mut dims = if ta { vec![m] } else { va.dims()[..va.rank() - 1].to_vec() };
        dims.push(n);
        let out = Tensor::new(dims, data)?;
        Ok(self.push(out, Op::Matmul { a, b, ta, tb, m, k, n }))
    }

    /// Batched product over all leading axes: `[.., m, k] x [.., k, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm_ex(a, b, false, false)
    }

    /// Batched `a · bᵀ`: `[.., m, k] x [.., n, k]`.
    pub fn bmm_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm_ex(a, b, false, true)
    }

    fn bmm_ex(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        let r = va.rank();
        if r < 3 || vb.rank() != r || va.dims()[..r - 2] != vb.dims()[..r - 2] {
            return Err(TensorError::shape("bmm", format!("{:?} x {:?}", va.dims(), vb.dims())));
        }
        let batch: usize = va.dims()[..r - 2].iter().product();
        let (a0, a1) = (va.dims()[r - 2], va.dims()[r - 1]);
        let (b0, b1) = (vb.dims()[r - 2], vb.dims()[r - 1]);
        let (m, k) = if ta { (a1, a0) } else { (a0, a1) };
        let (kb, n) = if tb { (b1, b0) } else { (b0, b1) };
        if k != kb {
            return Err(TensorError::shape("bmm", format!("inner dims differ: {:?} x {:?}", va.dims(), vb.dims())));
        }
        let mut data = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            kernels::gemm(
                m,
                k,
                n,
                &va.data()[bi * m * k..(bi + 1) * m * k],
                ta,
                &vb.data()[bi * k * n..(bi + 1) * k * n],
                tb,
                T::zero(),
                &mut data[bi * m * n..(bi + 1) * m * n],
            );
        }
        let mut dims = va.dims()[..r - 2].to_vec();
        dims.extend([m, n]);
        let out = Tensor::new(dims, data)?;
        Ok(self.push(out, Op::Bmm { a, b, ta, tb, batch, m, k, n }))
    }

    // ---- shape -------------------------------------------------------------------

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let vx = &self.values[x.0];
        let mut seen = vec![false; vx.rank()];
        if perm.len() != vx.rank() || perm.iter().any(|&p| p >= vx.rank() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::shape("permute", format!("{perm:?} on {:?}", vx.dims())));
        }
        let src = permute_sources(vx.dims(), perm);
        let data = src.iter().map(|&s| vx.data()[s]).collect();
        let dims = perm.iter().map(|&p| vx.dims()[p]).collect();
        let out = Tensor::new(dims, data)?;
        Ok(self.push(out, Op::Permute { x, src }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.values[x.0].rank() != 2 {
            return Err(TensorError::shape("transpose", format!("{:?} is not 2-D", self.values[x.0].dims())));
        }
        self.permute(x, &[1, 0])
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let out = self.values[x.0].clone().reshape(dims.to_vec())?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| TensorError::shape("concat", "no inputs"))?;
        let tail = self.values[first.0].dims()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            let v = &self.values[p.0];
            if v.dims()[1..] != tail[..] {
                return Err(TensorError::shape("concat", format!("{:?} vs trailing {tail:?}", v.dims())));
            }
            lead += v.dims()[0];
            data.extend_from_slice(v.data());
        }
        let mut dims = vec![lead];
        dims.extend(tail);
        let out = Tensor::new(dims, data)?;
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    /// Column `col` of the trailing axis, kept as a length-1 axis.
    pub fn column(&mut self, x: Var, col: usize) -> Result<Var> {
        let vx = &self.values[x.0];
        let n = vx.last_dim();
        if col >= n {
            return Err(TensorError::index("column", format!("column {col} of {n}")));
        }
        let data = (0..vx.rows()).map(|r| vx.data()[r * n + col]).collect();
        let mut dims = vx.dims().to_vec();
        *dims.last_mut().expect("rank >= 1") = 1;
        let out = Tensor::new(dims, data)?;
        Ok(self.push(out, Op::Column { x, col }))
    }

    /// Each row of `x` scaled by the matching entry of the single-column `s`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (vx, vs) = (&self.values[x.0], &self.values[s.0]);
        if vs.last_dim() != 1 || vs.numel() != vx.rows() {
            return Err(TensorError::shape("scale_rows", format!("{:?} by {:?}", vx.dims(), vs.dims())));
        }
        let n = vx.last_dim();
        let mut data = vx.data().to_vec();
        for (row, &w) in data.chunks_mut(n).zip(vs.data()) {
            for v in row {
                *v *= w;
            }
        }
        let out = Tensor::new(vx.dims().to_vec(), data)?;
        Ok(self.push(out, Op::ScaleRows { x, s }))
    }

    // ---- reductions ----------------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.values[x.0].data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.values[x.0];
        let total: T = v.data().iter().copied().sum();
        let out = Tensor::scalar(total / T::from_f64(v.numel() as f64));
        self.push(out, Op::Mean(x))
    }

    // ---- nn ----------------------------------------------------------------------

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let vx = &self.values[x.0];
        let mut data = vx.data().to_vec();
        kernels::softmax_rows(&mut data, vx.last_dim());
        let out = Tensor::new(vx.dims().to_vec(), data).expect("same shape");
        self.push(out, Op::Softmax(x))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (vx, vg, vb) = (&self.values[x.0], &self.values[gamma.0], &self.values[beta.0]);
        let d = vx.last_dim();
        if vg.dims() != [d] || vb.dims() != [d] {
            return Err(TensorError::shape(
                "layer_norm",
                format!("x {:?}, gamma {:?}, beta {:?}", vx.dims(), vg.dims(), vb.dims()),
            ));
        }
        if eps <= 0.0 {
            return Err(TensorError::validation("layer_norm", "eps must be positive"));
        }
        let rows = vx.rows();
        let mut out = vec![T::zero(); vx.numel()];
        let mut mean = vec![T::zero(); rows];
        let mut rstd = vec![T::zero(); rows];
        kernels::layer_norm_rows(vx.data(), vg.data(), vb.data(), lit(eps), &mut out, Some((&mut mean, &mut rstd)));
        let out = Tensor::new(vx.dims().to_vec(), out)?;
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, mean, rstd }))
    }

    /// Rows of `table` selected by `ids`; output is `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = &self.values[table.0];
        if vt.rank() != 2 {
            return Err(TensorError::shape("embedding", format!("table {:?}", vt.dims())));
        }
        let (v, d) = (vt.dims()[0], vt.dims()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::index("embedding", format!("id {id} >= {v}")));
            }
            data.extend_from_slice(vt.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(out, Op::Embedding { table, ids: ids.to_vec() }))
    }

    /// Sets entries above the diagonal of each trailing `[s, s]` block to -inf.
    pub fn causal_mask(&mut self, x: Var) -> Result<Var> {
        let vx = &self.values[x.0];
        let r = vx.rank();
        if r < 2 || vx.dims()[r - 1] != vx.dims()[r - 2] {
            return Err(TensorError::shape("causal_mask", format!("{:?}", vx.dims())));
        }
        let s = vx.last_dim();
        let mut data = vx.data().to_vec();
        for block in data.chunks_mut(s * s) {
            for i in 0..s {
                for v in &mut block[i * s + i + 1..(i + 1) * s] {
                    *v = T::neg_infinity();
                }
            }
        }
        let out = Tensor::new(vx.dims().to_vec(), data)?;
        Ok(self.push(out, Op::CausalMask(x)))
    }

    /// Keeps entries where `keep` is true and sets the rest to -inf.
    pub fn mask_fill(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let vx = &self.values[x.0];
        if keep.len() != vx.numel() {
            return Err(TensorError::shape("mask_fill", format!("{} flags for {:?}", keep.len(), vx.dims())));
        }
        let data = vx.data().iter().zip(keep).map(|(&v, &k)| if k { v } else { T::neg_infinity() }).collect();
        let out = Tensor::new(vx.dims().to_vec(), data)?;
        Ok(self.push(out, Op::MaskFill { x, keep: keep.to_vec() }))
    }

    /// Mean over active rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: Option<&[bool]>) -> Result<Var> {
        let vl = &self.values[logits.0];
        let (rows, v) = (vl.rows(), vl.last_dim());
        if targets.len() != rows {
            return Err(TensorError::shape("cross_entropy", format!("{} targets for {rows} rows", targets.len())));
        }
        if let Some(t) = targets.iter().find(|&&t| t >= v) {
            return Err(TensorError::index("cross_entropy", format!("target {t} >= vocab {v}")));
        }
        let (active, count) = active_rows("cross_entropy", rows, mask)?;
        let mut probs = vec![T::zero(); rows * v];
        let mut total = T::zero();
        for r in 0..rows {
            if !active[r] {
                continue;
            }
            let row = vl.row(r);
            let lse = kernels::log_sum_exp(row);
            total += lse - row[targets[r]];
            for (p, &x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        let out = Tensor::scalar(total / T::from_f64(count as f64));
        Ok(self.push(out, Op::CrossEntropy { logits, targets: targets.to_vec(), active, count, probs }))
    }

    /// Mean over active rows of `Σ_v p·ln(p/q)` in nats. Both inputs must hold
    /// probability rows; `q` is floored at [`KL_Q_FLOOR`] and terms with `p = 0` vanish.
    pub fn kl_div(&mut self, p: Var, q: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (vp, vq) = (&self.values[p.0], &self.values[q.0]);
        same_dims("kl_div", vp, vq)?;
        let (active, count) = active_rows("kl_div", vp.rows(), mask)?;
        for (name, t) in [("p", vp), ("q", vq)] {
            for r in (0..t.rows()).filter(|&r| active[r]) {
                let row = t.row(r);
                let s: f64 = row.iter().map(|x| x.as_f64()).sum();
                if row.iter().any(|&x| x < T::zero() || !x.is_finite()) || (s - 1.0).abs() > PROB_ROW_TOL {
                    return Err(TensorError::validation(
                        "kl_div",
                        format!("row {r} of {name} is not a probability vector (sum {s})"),
                    ));
                }
            }
        }
        let floor = lit::<T>(KL_Q_FLOOR);
        let mut total = T::zero();
        for r in (0..vp.rows()).filter(|&r| active[r]) {
            for (&pv, &qv) in vp.row(r).iter().zip(vq.row(r)) {
                if pv > T::zero() {
                    total += pv * (pv / qv.max(floor)).ln();
                }
            }
        }
        let out = Tensor::scalar(total / T::from_f64(count as f64));
        Ok(self.push(out, Op::KlDiv { p, q, active, count }))
    }

    // ---- backward ----------------------------------------------------------------

    /// Populates gradients of every `requires_grad` node reachable from `loss`.
    /// Gradients from a previous call are discarded first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].numel() != 1 {
            return Err(TensorError::shape("backward", format!("loss must be scalar, got {:?}", self.values[loss.0].dims())));
        }
        for g in &mut self.grads {
            *g = None;
        }
        if !self.requires[loss.0] {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.requires[i] || self.grads[i].is_none() || matches!(self.ops[i], Op::Leaf) {
                continue;
            }
            let (lower, upper) = self.grads.split_at_mut(i);
            let mut g: &[T] = upper[0].as_deref().expect("checked above");
            let faulty;
            if let Some((kind, factor)) = self.fault {
                if kind == self.ops[i].kind() {
                    faulty = g.iter().map(|&x| x * (T::one() + factor)).collect::<Vec<_>>();
                    g = &faulty;
                }
            }
            backward_node(&self.ops[i], &self.values, i, &self.requires, lower, g);
        }
        Ok(())
    }
}

fn backward_node<T: Float>(
    op: &Op<T>,
    values: &[Tensor<T>],
    node: usize,
    requires: &[bool],
    grads: &mut [Option<Vec<T>>],
    g: &[T],
) {
    let out = &values[node];
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if let Some(da) = grad_slot(grads, requires, values, *a) {
                da.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
            }
            if let Some(db) = grad_slot(grads, requires, values, *b) {
                db.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
            }
        }
        Op::Sub(a, b) => {
            if let Some(da) = grad_slot(grads, requires, values, *a) {
                da.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
            }
            if let Some(db) = grad_slot(grads, requires, values, *b) {
                db.iter_mut().zip(g).for_each(|(d, &x)| *d -= x);
            }
        }
        Op::Mul(a, b) => {
            if let Some(da) = grad_slot(grads, requires, values, *a) {
                let vb = values[b.0].data();
                da.iter_mut().zip(g).zip(vb).for_each(|((d, &x), &y)| *d += x * y);
            }
            if let Some(db) = grad_slot(grads, requires, values, *b) {
                let va = values[a.0].data();
                db.iter_mut().zip(g).zip(va).for_each(|((d, &x), &y)| *d += x * y);
            }
        }
        Op::AddBias(x, bias) => {
            if let Some(dx) = grad_slot(grads, requires, values, *x) {
                dx.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
            }
            if let Some(db) = grad_slot(grads, requires, values, *bias) {
                let n = db.len();
                for row in g.chunks(n) {
                    db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                }
            }
        }
        Op::Scale(x, s) => {
            if let Some(dx) = grad_slot(grads, requires, values, *x) {
                dx.iter_mut().zip(g).for_each(|(d, &v)| *d += v * *s);
            }
        }
        &Op::Matmul { a, b, ta, tb, m, k, n } => {
            let (va, vb) = (values[a.0].data(), values[b.0].data());
            if let Some(da) = grad_slot(grads, requires, values, a) {
                if ta {
                    // stored [k, m]: dA = op(B) · gᵀ
                    kernels::gemm(k, n, m, vb, tb, g, true, T::one(), da);
                } else {
                    // dA = g · op(B)ᵀ
                    kernels::gemm(m, n, k, g, false, vb, !tb, T::one(), da);
                }
            }
            if let Some(db) = grad_slot(grads, requires, values, b) {
                if tb {
                    // stored [n, k]: dB = gᵀ · op(A)
                    kernels::gemm(n, m, k, g, true, va, ta, T::one(), db);
                } else {
                    // dB = op(A)ᵀ · g
                    kernels::gemm(k, m, n, va, !ta, g, false, T::one(), db);
                }
            }
        }
        &Op::Bmm { a, b, ta, tb, batch, m, k, n } => {
            let (va, vb) = (values[a.0].data(), values[b.0].data());
            let (sa, sb, sc) = (m * k, k * n, m * n);
            if let Some(da) = grad_slot(grads, requires, values, a) {
                for bi in 0..batch {
                    let gi = &g[bi * sc..(bi + 1) * sc];
                    let bi_b = &vb[bi * sb..(bi + 1) * sb];
                    let da_i = &mut da[bi * sa..(bi + 1) * sa];
                    if ta {
                        kernels::gemm(k, n, m, bi_b, tb, gi, true, T::one(), da_i);
                    } else {
                        kernels::gemm(m, n, k, gi, false, bi_b, !tb, T::one(), da_i);
                    }
                }
            }
            if let Some(db) = grad_slot(grads, requires, values, b) {
                for bi in 0..batch {
                    let gi = &g[bi * sc..(bi + 1) * sc];
                    let ai = &va[bi * sa..(bi + 1) * sa];
                    let db_i = &mut db[bi * sb..(bi + 1) * sb];
                    if tb {
                        kernels::gemm(n, m, k, gi, true, ai, ta, T::one(), db_i);
                    } else {
                        kernels::gemm(k, m, n, ai, !ta, gi, false, T::one(), db_i);
                    }
                }
            }
        }
        Op::Permute { x, src } => {
            if let Some(dx) = grad_slot(grads, requires, values, *x) {
                for (&s, &v) in src.iter().zip(g) {
                    dx[s] += v;
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(dx) = grad_slot(grads, requires, values, *x) {
                dx.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
            }
        }
        Op::Softmax(x) => {
            if let Some(dx) = grad_slot(grads, requires, values, *x) {
                let n = out.last_dim();
                for ((dr, gr), yr) in dx.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((d, &gv), &y) in dr.iter_mut().zip(gr).zip(yr) {
                        *d += y * (gv - dot);
                    }
                }
            }
        }
        Op::Exp(x) => {
            if let Some(dx) = grad_slot(grads, requires, values, *x) {
                dx.iter_mut().zip(g).zip(out.data()).for_each(|((d, &gv), &y)| *d += gv * y);
            }
        }
        Op::Log(x) => {
            if let Some(dx) = grad_slot(grads, requires, values, *x) {
                let vx = values[x.0].data();
                dx.iter_mut().zip(g).zip(vx).for_each(|((d, &gv), &xv)| *d += gv / xv);
            }
        }
        Op::Gelu { x, deriv } => {
            if let Some(dx) = grad_slot(grads, requires, values, *x) {
                dx.iter_mut().zip(g).zip(deriv).for_each(|((d, &gv), &dv)| *d += gv * dv);
            }
        }
        Op::LayerNorm { x, gamma, beta, mean, rstd } => {
            let vx = values[x.0].data();
            let vg = values[gamma.0].data();
            let d = vg.len();
            let inv_d = T::one() / T::from_f64(d as f64);
            let xhat = |r: usize, i: usize| (vx[r * d + i] - mean[r]) * rstd[r];
            if let Some(dgamma) = grad_slot(grads, requires, values, *gamma) {
                for (r, gr) in g.chunks(d).enumerate() {
                    for i in 0..d {
                        dgamma[i] += gr[i] * xhat(r, i);
                    }
                }
            }
            if let Some(dbeta) = grad_slot(grads, requires, values, *beta) {
                for gr in g.chunks(d) {
                    dbeta.iter_mut().zip(gr).for_each(|(db, &v)| *db += v);
                }
            }
            if let Some(dx) = grad_slot(grads, requires, values, *x) {
                let mut dxhat = vec![T::zero(); d];
                for (r, gr) in g.chunks(d).enumerate() {
                    let mut mean_dxhat = T::zero();
                    let mut mean_dxhat_xhat = T::zero();
                    for i in 0..d {
                        dxhat[i] = gr[i] * vg[i];
                        mean_dxhat += dxhat[i];
                        mean_dxhat_xhat += dxhat[i] * xhat(r, i);
                    }
                    mean_dxhat *= inv_d;
                    mean_dxhat_xhat *= inv_d;
                    for i in 0..d {
                        dx[r * d + i] += rstd[r] * (dxhat[i] - mean_dxhat - xhat(r, i) * mean_dxhat_xhat);
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(dx) = grad_slot(grads, requires, values, *x) {
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Mean(x) => {
            if let Some(dx) = grad_slot(grads, requires, values, *x) {
                let s = g[0] / T::from_f64(dx.len() as f64);
                dx.iter_mut().for_each(|d| *d += s);
            }
        }
        Op::Embedding { table, ids } => {
            if let Some(dt) = grad_slot(grads, requires, values, *table) {
                let d = values[table.0].last_dim();
                for (r, &id) in ids.iter().enumerate() {
                    dt[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(a, &b)| *a += b);
                }
            }
        }
        Op::CausalMask(x) => {
            if let Some(dx) = grad_slot(grads, requires, values, *x) {
                let s = out.last_dim();
                for (db, gb) in dx.chunks_mut(s * s).zip(g.chunks(s * s)) {
                    for i in 0..s {
                        for j in 0..=i {
                            db[i * s + j] += gb[i * s + j];
                        }
                    }
                }
            }
        }
        Op::MaskFill { x, keep } => {
            if let Some(dx) = grad_slot(grads, requires, values, *x) {
                for ((d, &gv), &k) in dx.iter_mut().zip(g).zip(keep) {
                    if k {
                        *d += gv;
                    }
                }
            }
        }
        Op::Column { x, col } => {
            if let Some(dx) = grad_slot(grads, requires, values, *x) {
                let n = values[x.0].last_dim();
                for (r, &gv) in g.iter().enumerate() {
                    dx[r * n + col] += gv;
                }
            }
        }
        Op::ScaleRows { x, s } => {
            let n = out.last_dim();
            if let Some(dx) = grad_slot(grads, requires, values, *x) {
                let vs = values[s.0].data();
                for ((dr, gr), &w) in dx.chunks_mut(n).zip(g.chunks(n)).zip(vs) {
                    dr.iter_mut().zip(gr).for_each(|(d, &gv)| *d += gv * w);
                }
            }
            if let Some(ds) = grad_slot(grads, requires, values, *s) {
                let vx = values[x.0].data();
                for ((d, gr), xr) in ds.iter_mut().zip(g.chunks(n)).zip(vx.chunks(n)) {
                    *d += gr.iter().zip(xr).map(|(&a, &b)| a * b).sum::<T>();
                }
            }
        }
        Op::Concat(parts) => {
            let mut offset = 0;
            for p in parts {
                let len = values[p.0].numel();
                if let Some(dp) = grad_slot(grads, requires, values, *p) {
                    dp.iter_mut().zip(&g[offset..offset + len]).for_each(|(d, &v)| *d += v);
                }
                offset += len;
            }
        }
        Op::CrossEntropy { logits, targets, active, count, probs } => {
            if let Some(dl) = grad_slot(grads, requires, values, *logits) {
                let v = values[logits.0].last_dim();
                let s = g[0] / T::from_f64(*count as f64);
                for r in (0..active.len()).filter(|&r| active[r]) {
                    for c in 0..v {
                        let p = probs[r * v + c];
                        let y = if c == targets[r] { p - T::one() } else { p };
                        dl[r * v + c] += s * y;
                    }
                }
            }
        }
        Op::KlDiv { p, q, active, count } => {
            let (vp, vq) = (&values[p.0], &values[q.0]);
            let v = vp.last_dim();
            let s = g[0] / T::from_f64(*count as f64);
            let floor = lit::<T>(KL_Q_FLOOR);
            if let Some(dp) = grad_slot(grads, requires, values, *p) {
                for r in (0..active.len()).filter(|&r| active[r]) {
                    for c in 0..v {
                        let (pv, qv) = (vp.data()[r * v + c], vq.data()[r * v + c]);
                        if pv > T::zero() {
                            dp[r * v + c] += s * ((pv / qv.max(floor)).ln() + T::one());
                        }
                    }
                }
            }
            if let Some(dq) = grad_slot(grads, requires, values, *q) {
                for r in (0..active.len()).filter(|&r| active[r]) {
                    for c in 0..v {
                        let (pv, qv) = (vp.data()[r * v + c], vq.data()[r * v + c]);
                        if qv >= floor {
                            dq[r * v + c] -= s * pv / qv;
                        }
                    }
                }
            }
        }
    }
}
