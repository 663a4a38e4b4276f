//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation as a node. Parameters from a
//! [`ParamStore`] are bound as leaves; after [`Graph::backward`] the
//! gradients of trainable leaves can be accumulated back into the store.
//! Frozen parameters are bound as constants and never receive a gradient.

use std::collections::HashMap;
use std::rc::Rc;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, row: Var },
    MulRow { x: Var, row: Var },
    Scale(Var, f64),
    AddConst(Var),
    MulScalar { x: Var, s: Var },
    Softplus(Var),
    Recip(Var),
    Softmax(Var),
    NormalizeRows { x: Var, inv_std: Vec<f64> },
    Gelu(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    SumAll(Var),
    SumRows(Var),
    Index { x: Var, i: usize },
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows { table: Var, ids: Vec<usize> },
    Pool { x: Var, windows: Vec<(usize, usize)> },
    Cosine { a: Var, p: Var, eps: f64, a_norm: Vec<f64>, p_norm: Vec<f64> },
    Bce { p: Var, targets: Vec<f64>, include: Vec<bool> },
    SmoothedCe { logits: Var, targets: Vec<Option<usize>>, eps: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Precomputed attention mask: `true` marks an allowed (query, key) pair.
pub type Mask = Rc<Vec<bool>>;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    bound: HashMap<ParamId, Var>,
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite value produced by graph op");
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a stored parameter, reusing the same leaf on repeated use.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Leaf, p.trainable);
        self.bound.insert(id, v);
        v
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adds `scale` times every bound parameter's gradient into the store.
    pub fn accumulate_into(&self, store: &mut ParamStore, scale: f64) {
        for (&id, &v) in &self.bound {
            if let Some(g) = self.grad(v) {
                store.accumulate_grad(id, g, scale);
            }
        }
    }

    /// Gradients of bound trainable parameters, ordered by parameter id.
    pub fn param_grads(&self) -> Vec<(ParamId, &Tensor)> {
        let mut out: Vec<_> = self
            .bound
            .iter()
            .filter_map(|(&id, &v)| self.grad(v).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    // ---- operations -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let inner_b = if trans_b { sb.get(1) } else { sb.first() };
        if sa.len() != 2 || sb.len() != 2 || Some(&sa[1]) != inner_b {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k) = (sa[0], sa[1]);
        let n = if trans_b { sb[0] } else { sb[1] };
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), trans_b, &mut out, 0.0);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul { a, b, trans_b }, ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose()?;
        let ng = self.needs(a);
        Ok(self.push(t, Op::Transpose(a), ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_with(a, b, |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_with(a, b, |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_with(a, b, |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    fn check_row(&self, op: &'static str, x: Var, row: Var) -> Result<()> {
        let (sx, sr) = (self.shape(x), self.shape(row));
        if sx.len() != 2 || sr.len() != 1 || sr[0] != sx[1] {
            return Err(Error::dim(op, sx, sr));
        }
        Ok(())
    }

    /// Adds a length-`m` vector to every row of an `n×m` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.check_row("add_row", x, row)?;
        let mut t = self.value(x).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..t.rows() {
            for (v, b) in t.row_mut(i).iter_mut().zip(&r) {
                *v += b;
            }
        }
        let ng = self.needs(x) || self.needs(row);
        Ok(self.push(t, Op::AddRow { x, row }, ng))
    }

    /// Multiplies every row of an `n×m` matrix elementwise by a length-`m` vector.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.check_row("mul_row", x, row)?;
        let mut t = self.value(x).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..t.rows() {
            for (v, g) in t.row_mut(i).iter_mut().zip(&r) {
                *v *= g;
            }
        }
        let ng = self.needs(x) || self.needs(row);
        Ok(self.push(t, Op::MulRow { x, row }, ng))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let t = self.value(x).map(|v| v * k);
        let ng = self.needs(x);
        self.push(t, Op::Scale(x, k), ng)
    }

    /// Adds a constant tensor of the same shape; gradient passes unchanged.
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(Error::dim("add_const", self.shape(x), c.shape()));
        }
        let mut t = self.value(x).clone();
        t.add_assign(c);
        let ng = self.needs(x);
        Ok(self.push(t, Op::AddConst(x), ng))
    }

    /// Multiplies by a single-element variable.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::dim("mul_scalar", self.shape(x), self.shape(s)));
        }
        let k = self.value(s).item();
        let t = self.value(x).map(|v| v * k);
        let ng = self.needs(x) || self.needs(s);
        Ok(self.push(t, Op::MulScalar { x, s }, ng))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let t = self.value(x).map(softplus);
        let ng = self.needs(x);
        self.push(t, Op::Softplus(x), ng)
    }

    pub fn recip(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().contains(&0.0) {
            return Err(Error::Domain("reciprocal of zero".into()));
        }
        let t = self.value(x).map(|v| 1.0 / v);
        let ng = self.needs(x);
        Ok(self.push(t, Op::Recip(x), ng))
    }

    /// Row-wise softmax of a rank-2 tensor. With a mask, disallowed entries
    /// are treated as `-inf` logits; every row must allow at least one entry.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&Mask>) -> Result<Var> {
        let xs = self.value(x);
        if xs.rank() != 2 {
            return Err(Error::dim("softmax_rows", xs.shape(), &[2]));
        }
        let (n, m) = (xs.rows(), xs.cols());
        if m == 0 {
            return Err(Error::Domain("softmax over a zero-length axis".into()));
        }
        if let Some(mask) = mask {
            if mask.len() != n * m {
                return Err(Error::dim("softmax_rows mask", xs.shape(), &[mask.len()]));
            }
        }
        let mut out = Tensor::zeros(&[n, m]);
        for i in 0..n {
            let row = xs.row(i);
            let allowed = |j: usize| mask.is_none_or(|mk| mk[i * m + j]);
            let max = (0..m)
                .filter(|&j| allowed(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::Domain(format!("softmax row {i} fully masked")));
            }
            let o = out.row_mut(i);
            let mut total = 0.0;
            for j in 0..m {
                if allowed(j) {
                    o[j] = (row[j] - max).exp();
                    total += o[j];
                }
            }
            for v in o.iter_mut() {
                *v /= total;
            }
        }
        let ng = self.needs(x);
        Ok(self.push(out, Op::Softmax(x), ng))
    }

    /// Softmax of `x / tau` along `axis` (0 = down columns, 1 = along rows),
    /// with `tau` a single-element variable that must be positive.
    pub fn softmax_temp(&mut self, x: Var, axis: usize, tau: Var) -> Result<Var> {
        let t = self.value(tau);
        if t.len() != 1 || !(t.item() > 0.0) {
            return Err(Error::Domain(format!("softmax temperature must be > 0, got {:?}", t.data())));
        }
        let inv = self.recip(tau)?;
        let scaled = self.mul_scalar(x, inv)?;
        match axis {
            1 => self.softmax_rows(scaled, None),
            0 => {
                let tr = self.transpose(scaled)?;
                let s = self.softmax_rows(tr, None)?;
                self.transpose(s)
            }
            _ => Err(Error::Domain(format!("softmax axis {axis} out of range"))),
        }
    }

    /// Per-row standardisation `(x - mean) / sqrt(var + eps)`.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xs = self.value(x);
        if xs.rank() != 2 || xs.cols() == 0 {
            return Err(Error::Domain(format!("normalize over zero-length axis, shape {:?}", xs.shape())));
        }
        let (n, m) = (xs.rows(), xs.cols());
        let mut out = xs.clone();
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let row = out.row_mut(i);
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let ng = self.needs(x);
        Ok(self.push(out, Op::NormalizeRows { x, inv_std }, ng))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let n = self.normalize_rows(x, eps)?;
        let g = self.mul_row(n, gain)?;
        self.add_row(g, bias)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(gelu);
        let ng = self.needs(x);
        self.push(t, Op::Gelu(x), ng)
    }

    /// Clamps into `[lo, hi]`. The gradient passes on the closed interval and
    /// is zero strictly outside it.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let t = self.value(x).map(|v| v.clamp(lo, hi));
        let ng = self.needs(x);
        self.push(t, Op::Clamp { x, lo, hi }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::Domain("mean of empty tensor".into()));
        }
        let s = self.sum(x);
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Sums over rows (axis 0) of a rank-2 tensor, yielding a vector.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x);
        if xs.rank() != 2 {
            return Err(Error::dim("sum_rows", xs.shape(), &[2]));
        }
        if xs.rows() == 0 {
            return Err(Error::Domain("sum over zero-length axis".into()));
        }
        let mut out = vec![0.0; xs.cols()];
        for i in 0..xs.rows() {
            for (o, v) in out.iter_mut().zip(xs.row(i)) {
                *o += v;
            }
        }
        let ng = self.needs(x);
        Ok(self.push(Tensor::vector(out), Op::SumRows(x), ng))
    }

    pub fn index(&mut self, x: Var, i: usize) -> Result<Var> {
        let xs = self.value(x);
        if i >= xs.len() {
            return Err(Error::dim("index", xs.shape(), &[i]));
        }
        let t = Tensor::scalar(xs.data()[i]);
        let ng = self.needs(x);
        Ok(self.push(t, Op::Index { x, i }, ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let xs = self.value(x);
        if xs.rank() != 2 || start + width > xs.cols() {
            return Err(Error::dim("slice_cols", xs.shape(), &[start, width]));
        }
        let n = xs.rows();
        let mut out = Vec::with_capacity(n * width);
        for i in 0..n {
            out.extend_from_slice(&xs.row(i)[start..start + width]);
        }
        let ng = self.needs(x);
        Ok(self.push(Tensor::matrix(n, width, out)?, Op::SliceCols { x, start }, ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.value(x);
        if xs.rank() != 2 || start + len > xs.rows() {
            return Err(Error::dim("slice_rows", xs.shape(), &[start, len]));
        }
        let t = xs.slice_rows(start, start + len);
        let ng = self.needs(x);
        Ok(self.push(t, Op::SliceRows { x, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Domain("concat of nothing".into()))?;
        let n = self.value(first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != n {
                return Err(Error::dim("concat_cols", self.shape(first), s));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::matrix(n, total, out)?, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Domain("concat of nothing".into()))?;
        let m = self.value(first).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != m {
                return Err(Error::dim("concat_rows", self.shape(first), s));
            }
            rows += s[0];
            out.extend_from_slice(self.value(p).data());
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::matrix(rows, m, out)?, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ts = self.value(table);
        if ts.rank() != 2 {
            return Err(Error::dim("gather_rows", ts.shape(), &[2]));
        }
        let m = ts.cols();
        let mut out = Vec::with_capacity(ids.len() * m);
        for &id in ids {
            if id >= ts.rows() {
                return Err(Error::Vocabulary(format!("row {id} out of range for table of {}", ts.rows())));
            }
            out.extend_from_slice(ts.row(id));
        }
        let ng = self.needs(table);
        Ok(self.push(
            Tensor::matrix(ids.len(), m, out)?,
            Op::GatherRows { table, ids: ids.to_vec() },
            ng,
        ))
    }

    /// Averages rows of `x` over inclusive index windows `(lo, hi)`, one
    /// output row per window.
    pub fn average_windows(&mut self, x: Var, windows: Vec<(usize, usize)>) -> Result<Var> {
        let xs = self.value(x);
        if xs.rank() != 2 {
            return Err(Error::dim("average_windows", xs.shape(), &[2]));
        }
        let (n, m) = (xs.rows(), xs.cols());
        let mut out = Tensor::zeros(&[windows.len(), m]);
        for (t, &(lo, hi)) in windows.iter().enumerate() {
            if lo > hi || hi >= n {
                return Err(Error::Domain(format!("window ({lo},{hi}) out of range for length {n}")));
            }
            let k = 1.0 / (hi - lo + 1) as f64;
            let o = out.row_mut(t);
            for i in lo..=hi {
                for (ov, v) in o.iter_mut().zip(xs.row(i)) {
                    *ov += k * v;
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(out, Op::Pool { x, windows }, ng))
    }

    /// Cosine similarity of every row of `a` (T×D) against every column of
    /// `p` (D×U), with `eps` added to both norms.
    pub fn cosine(&mut self, a: Var, p: Var, eps: f64) -> Result<Var> {
        let (av, pv) = (self.value(a), self.value(p));
        if av.rank() != 2 || pv.rank() != 2 || av.cols() != pv.rows() {
            return Err(Error::dim("cosine", av.shape(), pv.shape()));
        }
        let (t, d, u) = (av.rows(), av.cols(), pv.cols());
        let a_norm: Vec<f64> = (0..t).map(|i| av.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        let p_norm: Vec<f64> = (0..u)
            .map(|j| (0..d).map(|k| pv.at(k, j).powi(2)).sum::<f64>().sqrt())
            .collect();
        let mut dots = vec![0.0; t * u];
        gemm(t, d, u, av.data(), false, pv.data(), false, &mut dots, 0.0);
        for i in 0..t {
            for j in 0..u {
                dots[i * u + j] /= (a_norm[i] + eps) * (p_norm[j] + eps);
            }
        }
        let ng = self.needs(a) || self.needs(p);
        Ok(self.push(
            Tensor::matrix(t, u, dots)?,
            Op::Cosine { a, p, eps, a_norm, p_norm },
            ng,
        ))
    }

    /// Mean binary cross-entropy over included entries of a probability vector.
    pub fn bce(&mut self, p: Var, targets: &[f64], include: &[bool]) -> Result<Var> {
        let pv = self.value(p);
        if pv.len() != targets.len() || include.len() != targets.len() {
            return Err(Error::dim("bce", pv.shape(), &[targets.len()]));
        }
        let n = include.iter().filter(|&&b| b).count();
        if n == 0 {
            return Err(Error::Domain("bce over no included entries".into()));
        }
        let mut total = 0.0;
        for ((&q, &t), &inc) in pv.data().iter().zip(targets).zip(include) {
            if inc {
                if !(q > 0.0 && q < 1.0) {
                    return Err(Error::Domain(format!("bce probability {q} outside (0,1)")));
                }
                total -= t * q.ln() + (1.0 - t) * (1.0 - q).ln();
            }
        }
        let ng = self.needs(p);
        Ok(self.push(
            Tensor::scalar(total / n as f64),
            Op::Bce { p, targets: targets.to_vec(), include: include.to_vec() },
            ng,
        ))
    }

    /// Label-smoothed cross-entropy averaged over rows whose target is set.
    pub fn smoothed_cross_entropy(&mut self, logits: Var, targets: &[Option<usize>], eps: f64) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.rows() != targets.len() {
            return Err(Error::dim("cross_entropy", lv.shape(), &[targets.len()]));
        }
        if !(0.0..1.0).contains(&eps) {
            return Err(Error::Domain(format!("label smoothing {eps} outside [0,1)")));
        }
        let v = lv.cols();
        let n = targets.iter().filter(|t| t.is_some()).count();
        if n == 0 {
            return Err(Error::Domain("cross-entropy over padding only".into()));
        }
        let mut total = 0.0;
        for (i, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= v {
                return Err(Error::Vocabulary(format!("target {t} outside vocabulary of {v}")));
            }
            let row = lv.row(i);
            let lse = logsumexp(row);
            let mean_logit = row.iter().sum::<f64>() / v as f64;
            total += lse - (1.0 - eps) * row[t] - eps * mean_logit;
        }
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(total / n as f64),
            Op::SmoothedCe { logits, targets: targets.to_vec(), eps },
            ng,
        ))
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse pass from a single-element output.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.value(out).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(out)
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[out.0] = Some(Tensor::full(self.shape(out), 1.0));
        for i in (0..=out.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.backprop_node(i, &g)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, delta: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn acc_with(&mut self, v: Var, f: impl FnOnce(&Tensor) -> Tensor) {
        if self.nodes[v.0].needs_grad {
            let d = f(&self.nodes[v.0].value);
            self.acc(v, d);
        }
    }

    fn backprop_node(&mut self, i: usize, g: &Tensor) -> Result<()> {
        // Take the op out temporarily so node values can be borrowed freely.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        let res = self.backprop_op(i, &op, g);
        self.nodes[i].op = op;
        res
    }

    fn backprop_op(&mut self, i: usize, op: &Op, g: &Tensor) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (a, b, trans_b) = (*a, *b, *trans_b);
                let (m, k) = (self.value(a).rows(), self.value(a).cols());
                let n = g.cols();
                if self.needs(a) {
                    let mut da = vec![0.0; m * k];
                    // dA = dC · op(B)ᵀ
                    gemm(m, n, k, g.data(), false, self.value(b).data(), !trans_b, &mut da, 0.0);
                    self.acc(a, Tensor::matrix(m, k, da)?);
                }
                if self.needs(b) {
                    if trans_b {
                        let mut db = vec![0.0; n * k];
                        gemm(n, m, k, g.data(), true, self.value(a).data(), false, &mut db, 0.0);
                        self.acc(b, Tensor::matrix(n, k, db)?);
                    } else {
                        let mut db = vec![0.0; k * n];
                        gemm(k, m, n, self.value(a).data(), true, g.data(), false, &mut db, 0.0);
                        self.acc(b, Tensor::matrix(k, n, db)?);
                    }
                }
            }
            Op::Transpose(a) => self.acc(*a, g.transpose()?),
            Op::Add(a, b) => {
                self.acc(*a, g.clone());
                self.acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(*a, g.clone());
                self.acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let d = elementwise(g, self.value(b), |x, y| x * y);
                    self.acc(a, d);
                }
                if self.needs(b) {
                    let d = elementwise(g, self.value(a), |x, y| x * y);
                    self.acc(b, d);
                }
            }
            Op::AddRow { x, row } => {
                self.acc(*x, g.clone());
                if self.needs(*row) {
                    self.acc(*row, column_sums(g));
                }
            }
            Op::MulRow { x, row } => {
                let (x, row) = (*x, *row);
                if self.needs(x) {
                    let r = self.value(row).data().to_vec();
                    let mut d = g.clone();
                    for i in 0..d.rows() {
                        for (v, s) in d.row_mut(i).iter_mut().zip(&r) {
                            *v *= s;
                        }
                    }
                    self.acc(x, d);
                }
                if self.needs(row) {
                    let xv = self.value(x);
                    let mut d = vec![0.0; xv.cols()];
                    for i in 0..xv.rows() {
                        for ((o, a), b) in d.iter_mut().zip(g.row(i)).zip(xv.row(i)) {
                            *o += a * b;
                        }
                    }
                    self.acc(row, Tensor::vector(d));
                }
            }
            Op::Scale(x, k) => self.acc(*x, g.map(|v| v * k)),
            Op::AddConst(x) => self.acc(*x, g.clone()),
            Op::MulScalar { x, s } => {
                let (x, s) = (*x, *s);
                if self.needs(x) {
                    let k = self.value(s).item();
                    self.acc(x, g.map(|v| v * k));
                }
                if self.needs(s) {
                    let d: f64 = g.data().iter().zip(self.value(x).data()).map(|(a, b)| a * b).sum();
                    let shape = self.shape(s).to_vec();
                    self.acc(s, Tensor::new(shape, vec![d])?);
                }
            }
            Op::Softplus(x) => self.acc_with(*x, |xv| elementwise(g, xv, |gv, v| gv * sigmoid(v))),
            Op::Recip(x) => {
                let y = self.nodes[i].value.clone();
                self.acc(*x, elementwise(g, &y, |gv, v| -gv * v * v));
            }
            Op::Softmax(x) => {
                let y = &self.nodes[i].value;
                let mut d = Tensor::zeros(y.shape());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, yv), gv) in d.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                self.acc(*x, d);
            }
            Op::NormalizeRows { x, inv_std } => {
                let y = &self.nodes[i].value;
                let m = y.cols() as f64;
                let mut d = Tensor::zeros(y.shape());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let sg: f64 = gr.iter().sum();
                    let sgy: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    let is = inv_std[r];
                    for ((o, yv), gv) in d.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = is * (gv - sg / m - yv * sgy / m);
                    }
                }
                self.acc(*x, d);
            }
            Op::Gelu(x) => self.acc_with(*x, |xv| elementwise(g, xv, |gv, v| gv * gelu_grad(v))),
            Op::Clamp { x, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                self.acc_with(*x, |xv| {
                    elementwise(g, xv, |gv, v| if v >= lo && v <= hi { gv } else { 0.0 })
                });
            }
            Op::SumAll(x) => {
                let k = g.item();
                self.acc_with(*x, |xv| Tensor::full(xv.shape(), k));
            }
            Op::SumRows(x) => {
                self.acc_with(*x, |xv| {
                    let mut d = Tensor::zeros(xv.shape());
                    for r in 0..d.rows() {
                        d.row_mut(r).copy_from_slice(g.data());
                    }
                    d
                });
            }
            Op::Index { x, i: idx } => {
                self.acc_with(*x, |xv| {
                    let mut d = Tensor::zeros(xv.shape());
                    d.data_mut()[*idx] = g.item();
                    d
                });
            }
            Op::SliceCols { x, start } => {
                let start = *start;
                self.acc_with(*x, |xv| {
                    let mut d = Tensor::zeros(xv.shape());
                    let w = g.cols();
                    for r in 0..d.rows() {
                        d.row_mut(r)[start..start + w].copy_from_slice(g.row(r));
                    }
                    d
                });
            }
            Op::SliceRows { x, start } => {
                let start = *start;
                self.acc_with(*x, |xv| {
                    let mut d = Tensor::zeros(xv.shape());
                    let c = xv.cols();
                    d.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    d
                });
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.needs(p) {
                        let n = g.rows();
                        let mut d = Vec::with_capacity(n * w);
                        for r in 0..n {
                            d.extend_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        self.acc(p, Tensor::matrix(n, w, d)?);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.needs(p) {
                        self.acc(p, g.slice_rows(offset, offset + rows));
                    }
                    offset += rows;
                }
            }
            Op::GatherRows { table, ids } => {
                self.acc_with(*table, |tv| {
                    let mut d = Tensor::zeros(tv.shape());
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, v) in d.row_mut(id).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    d
                });
            }
            Op::Pool { x, windows } => {
                self.acc_with(*x, |xv| {
                    let mut d = Tensor::zeros(xv.shape());
                    for (t, &(lo, hi)) in windows.iter().enumerate() {
                        let k = 1.0 / (hi - lo + 1) as f64;
                        for r in lo..=hi {
                            for (o, v) in d.row_mut(r).iter_mut().zip(g.row(t)) {
                                *o += k * v;
                            }
                        }
                    }
                    d
                });
            }
            Op::Cosine { a, p, eps, a_norm, p_norm } => {
                self.cosine_backward(*a, *p, *eps, a_norm, p_norm, g)?;
            }
            Op::Bce { p, targets, include } => {
                let n = include.iter().filter(|&&b| b).count() as f64;
                let k = g.item() / n;
                self.acc_with(*p, |pv| {
                    let mut d = Tensor::zeros(pv.shape());
                    for (j, (&q, &t)) in pv.data().iter().zip(targets).enumerate() {
                        if include[j] {
                            d.data_mut()[j] = k * (-t / q + (1.0 - t) / (1.0 - q));
                        }
                    }
                    d
                });
            }
            Op::SmoothedCe { logits, targets, eps } => {
                let n = targets.iter().filter(|t| t.is_some()).count() as f64;
                let k = g.item() / n;
                let eps = *eps;
                self.acc_with(*logits, |lv| {
                    let v = lv.cols();
                    let mut d = Tensor::zeros(lv.shape());
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let row = lv.row(r);
                        let lse = logsumexp(row);
                        for (j, o) in d.row_mut(r).iter_mut().enumerate() {
                            let q = eps / v as f64 + if j == t { 1.0 - eps } else { 0.0 };
                            *o = k * ((row[j] - lse).exp() - q);
                        }
                    }
                    d
                });
            }
        }
        Ok(())
    }

    fn cosine_backward(
        &mut self,
        a: Var,
        p: Var,
        eps: f64,
        a_norm: &[f64],
        p_norm: &[f64],
        g: &Tensor,
    ) -> Result<()> {
        let (av, pv) = (self.value(a), self.value(p));
        let (t, d, u) = (av.rows(), av.cols(), pv.cols());
        // w_ij = g_ij / ((|a_i|+eps)(|p_j|+eps)); raw dots for the norm terms.
        let mut dots = vec![0.0; t * u];
        gemm(t, d, u, av.data(), false, pv.data(), false, &mut dots, 0.0);
        let mut w = vec![0.0; t * u];
        let mut ca = vec![0.0; t];
        let mut cp = vec![0.0; u];
        for i in 0..t {
            let ia = 1.0 / (a_norm[i] + eps);
            for j in 0..u {
                let ip = 1.0 / (p_norm[j] + eps);
                let gw = g.data()[i * u + j] * ia * ip;
                w[i * u + j] = gw;
                ca[i] += gw * dots[i * u + j] * ia;
                cp[j] += gw * dots[i * u + j] * ip;
            }
        }
        let da = if self.needs(a) {
            // W · Pᵀ − c_a ⊙ a/|a|
            let mut da = vec![0.0; t * d];
            gemm(t, u, d, &w, false, pv.data(), true, &mut da, 0.0);
            for i in 0..t {
                if a_norm[i] > 0.0 {
                    let k = ca[i] / a_norm[i];
                    for c in 0..d {
                        da[i * d + c] -= k * av.data()[i * d + c];
                    }
                }
            }
            Some(Tensor::matrix(t, d, da)?)
        } else {
            None
        };
        let dp = if self.needs(p) {
            // Aᵀ · W − p/|p| ⊙ c_p
            let mut dp = vec![0.0; d * u];
            gemm(d, t, u, av.data(), true, &w, false, &mut dp, 0.0);
            for j in 0..u {
                if p_norm[j] > 0.0 {
                    let k = cp[j] / p_norm[j];
                    for c in 0..d {
                        dp[c * u + j] -= k * pv.data()[c * u + j];
                    }
                }
            }
            Some(Tensor::matrix(d, u, dp)?)
        } else {
            None
        };
        if let Some(da) = da {
            self.acc(a, da);
        }
        if let Some(dp) = dp {
            self.acc(p, dp);
        }
        Ok(())
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape preserved")
}

fn column_sums(g: &Tensor) -> Tensor {
    let mut out = vec![0.0; g.cols()];
    for r in 0..g.rows() {
        for (o, v) in out.iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    Tensor::vector(out)
}

pub fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for positive `y`.
pub fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
