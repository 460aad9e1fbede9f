//! Operation kinds, forward builders, and their gradient rules.

use super::{Element, Graph, TensorId};
use crate::error::{Error, Result};

/// Recorded operation with parent links.
#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Div(TensorId, TensorId),
    AddScalar(TensorId),
    MulScalar(TensorId, f64),
    MatMul {
        a: TensorId,
        b: TensorId,
    },
    Transpose(TensorId),
    Reshape(TensorId),
    GatherRows {
        src: TensorId,
        indices: Vec<usize>,
    },
    SliceRows {
        src: TensorId,
        start: usize,
    },
    SliceCols {
        src: TensorId,
        start: usize,
    },
    ConcatRows(Vec<TensorId>),
    ConcatCols(Vec<TensorId>),
    Softmax {
        src: TensorId,
        axis: usize,
    },
    Gelu(TensorId),
    LayerNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    },
    SumAll(TensorId),
    MeanAll(TensorId),
    CrossEntropy {
        logits: TensorId,
        targets: Vec<usize>,
    },
}

/// Output shape for elementwise ops under the supported broadcast rules:
/// identical shapes, scalar, or one shape being a trailing suffix of the
/// other.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if nb == 1 {
        return Ok(a.to_vec());
    }
    if na == 1 {
        return Ok(b.to_vec());
    }
    if a.len() > b.len() && a[a.len() - b.len()..] == *b {
        return Ok(a.to_vec());
    }
    if b.len() > a.len() && b[b.len() - a.len()..] == *a {
        return Ok(b.to_vec());
    }
    Err(Error::Shape(format!(
        "shapes {a:?} and {b:?} are not broadcast-compatible \
         (only equal, scalar, and trailing-dimension broadcast are supported)"
    )))
}

/// Fold a broadcast contribution of the output's size back to an operand
/// with `target` elements.
fn reduce_to<T: Element>(contrib: &[T], target: usize) -> Vec<T> {
    if contrib.len() == target {
        return contrib.to_vec();
    }
    let mut out = vec![T::ZERO; target];
    for (i, &c) in contrib.iter().enumerate() {
        out[i % target] += c;
    }
    out
}

impl<T: Element> Graph<T> {
    fn binary_op(
        &mut self,
        a: TensorId,
        b: TensorId,
        f: impl Fn(T, T) -> T,
        op: Op,
    ) -> Result<TensorId> {
        let shape = broadcast_shape(self.shape(a), self.shape(b))?;
        let (da, db) = (self.data(a), self.data(b));
        let (na, nb) = (da.len(), db.len());
        let numel: usize = shape.iter().product();
        let mut out = Vec::with_capacity(numel);
        for i in 0..numel {
            out.push(f(da[i % na], db[i % nb]));
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(out, shape, rg, op))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_op(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_op(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_op(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_op(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let cv = T::from_f64(c);
        let data: Vec<T> = self.data(a).iter().map(|&x| x + cv).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires_grad(a);
        self.push(data, shape, rg, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let cv = T::from_f64(c);
        let data: Vec<T> = self.data(a).iter().map(|&x| x * cv).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires_grad(a);
        self.push(data, shape, rg, Op::MulScalar(a, c))
    }

    /// Matrix product. `a` may carry extra leading dimensions, which are
    /// treated as stacked rows; `b` must be 2-D.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() < 2 || sb.len() != 2 {
            return Err(Error::Shape(format!(
                "matmul expects a >=2-D left operand and a 2-D right operand, got {sa:?} x {sb:?}"
            )));
        }
        let k = sa[sa.len() - 1];
        if sb[0] != k {
            return Err(Error::Shape(format!(
                "matmul inner dimensions differ: {sa:?} x {sb:?}"
            )));
        }
        let n = sb[1];
        let m: usize = sa[..sa.len() - 1].iter().product();
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);

        let out = matmul_raw(self.data(a), self.data(b), m, k, n);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(out, shape, rg, Op::MatMul { a, b }))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(Error::Shape(format!("transpose expects 2-D, got {sa:?}")));
        }
        let (r, c) = (sa[0], sa[1]);
        let da = self.data(a);
        let mut out = vec![T::ZERO; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = da[i * c + j];
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push(out, vec![c, r], rg, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.numel(a) {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape(a)
            )));
        }
        let data = self.data(a).to_vec();
        let rg = self.requires_grad(a);
        Ok(self.push(data, shape.to_vec(), rg, Op::Reshape(a)))
    }

    /// Select rows of a 2-D tensor by index, with repetition allowed.
    pub fn gather_rows(&mut self, src: TensorId, indices: &[usize]) -> Result<TensorId> {
        let s = self.shape(src);
        if s.len() != 2 {
            return Err(Error::Shape(format!("gather_rows expects 2-D, got {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Shape(format!(
                "gather_rows index {bad} out of range for {rows} rows"
            )));
        }
        if indices.is_empty() {
            return Err(Error::Shape("gather_rows with no indices".into()));
        }
        let d = self.data(src);
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            out.extend_from_slice(&d[i * cols..(i + 1) * cols]);
        }
        let rg = self.requires_grad(src);
        Ok(self.push(
            out,
            vec![indices.len(), cols],
            rg,
            Op::GatherRows {
                src,
                indices: indices.to_vec(),
            },
        ))
    }

    pub fn slice_rows(&mut self, src: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let s = self.shape(src);
        if s.len() != 2 || start + len > s[0] || len == 0 {
            return Err(Error::Shape(format!(
                "slice_rows [{start}, {}) invalid for shape {s:?}",
                start + len
            )));
        }
        let cols = s[1];
        let data = self.data(src)[start * cols..(start + len) * cols].to_vec();
        let rg = self.requires_grad(src);
        Ok(self.push(data, vec![len, cols], rg, Op::SliceRows { src, start }))
    }

    pub fn slice_cols(&mut self, src: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let s = self.shape(src);
        if s.len() != 2 || start + len > s[1] || len == 0 {
            return Err(Error::Shape(format!(
                "slice_cols [{start}, {}) invalid for shape {s:?}",
                start + len
            )));
        }
        let (rows, cols) = (s[0], s[1]);
        let d = self.data(src);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&d[r * cols + start..r * cols + start + len]);
        }
        let rg = self.requires_grad(src);
        Ok(self.push(out, vec![rows, len], rg, Op::SliceCols { src, start }))
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_rows with no inputs".into()));
        }
        let cols = self.shape(parts[0]).get(1).copied().ok_or_else(|| {
            Error::Shape(format!("concat_rows expects 2-D, got {:?}", self.shape(parts[0])))
        })?;
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != cols {
                return Err(Error::Shape(format!(
                    "concat_rows column mismatch: {s:?} vs {cols} columns"
                )));
            }
            rows += s[0];
        }
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(self.data(p));
        }
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(out, vec![rows, cols], rg, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_cols with no inputs".into()));
        }
        let rows = self.shape(parts[0])[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::Shape(format!(
                    "concat_cols row mismatch: {s:?} vs {rows} rows"
                )));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![T::ZERO; rows * total];
        let mut offset = 0;
        for (idx, &p) in parts.iter().enumerate() {
            let w = widths[idx];
            let d = self.data(p);
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&d[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(out, vec![rows, total], rg, Op::ConcatCols(parts.to_vec())))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, src: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.shape(src).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let d = self.data(src);
        if d.iter().any(|v| !v.is_finite()) {
            return Err(Error::Graph("softmax input contains non-finite values".into()));
        }
        let lane = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![T::ZERO; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| o * lane * inner + l * inner + i;
                let mut m = d[at(0)];
                for l in 1..lane {
                    m = m.max(d[at(l)]);
                }
                let mut sum = T::ZERO;
                for l in 0..lane {
                    let e = (d[at(l)] - m).exp();
                    out[at(l)] = e;
                    sum += e;
                }
                for l in 0..lane {
                    out[at(l)] = out[at(l)] / sum;
                }
            }
        }
        let rg = self.requires_grad(src);
        Ok(self.push(out, shape, rg, Op::Softmax { src, axis }))
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, src: TensorId) -> TensorId {
        let data: Vec<T> = self.data(src).iter().map(|&x| gelu_forward(x)).collect();
        let shape = self.shape(src).to_vec();
        let rg = self.requires_grad(src);
        self.push(data, shape, rg, Op::Gelu(src))
    }

    /// Per-position standardization over the last dimension, then scale and
    /// shift: `gamma * (x - mean) / sqrt(var + eps) + beta`.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::Shape("layer_norm on 0-D tensor".into()))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Shape(format!(
                "layer_norm gamma/beta must have shape [{d}], got {:?} / {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let epsv = T::from_f64(eps);
        let xd = self.data(x);
        let gd = self.data(gamma).to_vec();
        let bd = self.data(beta).to_vec();
        let rows = xd.len() / d;
        let mut out = vec![T::ZERO; xd.len()];
        let inv_d = T::from_f64(1.0 / d as f64);
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mut mean = T::ZERO;
            for &v in row {
                mean += v;
            }
            mean = mean * inv_d;
            let mut var = T::ZERO;
            for &v in row {
                let c = v - mean;
                var += c * c;
            }
            var = var * inv_d;
            let inv_std = T::ONE / (var + epsv).sqrt();
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * inv_std * gd[j] + bd[j];
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(gamma) || self.requires_grad(beta);
        Ok(self.push(out, shape, rg, Op::LayerNorm { x, gamma, beta, eps }))
    }

    pub fn sum_all(&mut self, src: TensorId) -> TensorId {
        let mut s = T::ZERO;
        for &v in self.data(src) {
            s += v;
        }
        let rg = self.requires_grad(src);
        self.push(vec![s], vec![1], rg, Op::SumAll(src))
    }

    pub fn mean_all(&mut self, src: TensorId) -> TensorId {
        let n = self.numel(src);
        let mut s = T::ZERO;
        for &v in self.data(src) {
            s += v;
        }
        let rg = self.requires_grad(src);
        self.push(
            vec![s * T::from_f64(1.0 / n as f64)],
            vec![1],
            rg,
            Op::MeanAll(src),
        )
    }

    /// Mean cross-entropy of row-wise softmax against integer targets.
    pub fn cross_entropy(&mut self, logits: TensorId, targets: &[usize]) -> Result<TensorId> {
        let s = self.shape(logits);
        if s.len() != 2 {
            return Err(Error::Shape(format!(
                "cross_entropy expects 2-D logits, got {s:?}"
            )));
        }
        let (b, c) = (s[0], s[1]);
        if targets.len() != b {
            return Err(Error::Shape(format!(
                "cross_entropy got {} targets for {b} rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Shape(format!(
                "cross_entropy target {bad} out of range for {c} classes"
            )));
        }
        let d = self.data(logits);
        let mut total = T::ZERO;
        for (row, &t) in targets.iter().enumerate() {
            let r = &d[row * c..(row + 1) * c];
            let mut m = r[0];
            for &v in &r[1..] {
                m = m.max(v);
            }
            let mut lse = T::ZERO;
            for &v in r {
                lse += (v - m).exp();
            }
            total += m + lse.ln() - r[t];
        }
        let loss = total * T::from_f64(1.0 / b as f64);
        let rg = self.requires_grad(logits);
        Ok(self.push(
            vec![loss],
            vec![1],
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Distribute `grad` of node `out` to the parents of `op`.
    pub(crate) fn propagate(&mut self, out: TensorId, op: &Op, grad: &[T]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (na, nb) = (self.numel(*a), self.numel(*b));
                self.accumulate(*a, &reduce_to(grad, na));
                self.accumulate(*b, &reduce_to(grad, nb));
            }
            Op::Sub(a, b) => {
                let (na, nb) = (self.numel(*a), self.numel(*b));
                self.accumulate(*a, &reduce_to(grad, na));
                let neg: Vec<T> = grad.iter().map(|&g| -g).collect();
                self.accumulate(*b, &reduce_to(&neg, nb));
            }
            Op::Mul(a, b) => {
                let (na, nb) = (self.numel(*a), self.numel(*b));
                let (da, db) = (self.data(*a).to_vec(), self.data(*b).to_vec());
                let ga: Vec<T> = grad.iter().enumerate().map(|(i, &g)| g * db[i % nb]).collect();
                let gb: Vec<T> = grad.iter().enumerate().map(|(i, &g)| g * da[i % na]).collect();
                self.accumulate(*a, &reduce_to(&ga, na));
                self.accumulate(*b, &reduce_to(&gb, nb));
            }
            Op::Div(a, b) => {
                let (na, nb) = (self.numel(*a), self.numel(*b));
                let (da, db) = (self.data(*a).to_vec(), self.data(*b).to_vec());
                let ga: Vec<T> = grad.iter().enumerate().map(|(i, &g)| g / db[i % nb]).collect();
                let gb: Vec<T> = grad
                    .iter()
                    .enumerate()
                    .map(|(i, &g)| {
                        let bv = db[i % nb];
                        -g * da[i % na] / (bv * bv)
                    })
                    .collect();
                self.accumulate(*a, &reduce_to(&ga, na));
                self.accumulate(*b, &reduce_to(&gb, nb));
            }
            Op::AddScalar(a) => {
                self.accumulate(*a, grad);
            }
            Op::MulScalar(a, c) => {
                let cv = T::from_f64(*c);
                let ga: Vec<T> = grad.iter().map(|&g| g * cv).collect();
                self.accumulate(*a, &ga);
            }
            Op::MatMul { a, b } => {
                let k = *self.shape(*a).last().expect("validated");
                let n = self.shape(*b)[1];
                let m = self.numel(*a) / k;
                let (da, db) = (self.data(*a).to_vec(), self.data(*b).to_vec());
                if self.requires_grad(*a) {
                    let mut ga = vec![T::ZERO; m * k];
                    for i in 0..m {
                        let grow = &grad[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &db[p * n..(p + 1) * n];
                            let mut s = T::ZERO;
                            for j in 0..n {
                                s += grow[j] * brow[j];
                            }
                            ga[i * k + p] = s;
                        }
                    }
                    self.accumulate(*a, &ga);
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![T::ZERO; k * n];
                    for i in 0..m {
                        let grow = &grad[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = da[i * k + p];
                            let brow = &mut gb[p * n..(p + 1) * n];
                            for j in 0..n {
                                brow[j] += av * grow[j];
                            }
                        }
                    }
                    self.accumulate(*b, &gb);
                }
            }
            Op::Transpose(a) => {
                let s = self.shape(out);
                let (r, c) = (s[0], s[1]);
                let mut ga = vec![T::ZERO; r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[j * r + i] = grad[i * c + j];
                    }
                }
                self.accumulate(*a, &ga);
            }
            Op::Reshape(a) => {
                self.accumulate(*a, grad);
            }
            Op::GatherRows { src, indices } => {
                let cols = self.shape(out)[1];
                let indices = indices.clone();
                self.accumulate_scatter(*src, |g| {
                    for (row, &i) in indices.iter().enumerate() {
                        for j in 0..cols {
                            g[i * cols + j] += grad[row * cols + j];
                        }
                    }
                });
            }
            Op::SliceRows { src, start } => {
                let cols = self.shape(out)[1];
                let start = *start;
                self.accumulate_scatter(*src, |g| {
                    g[start * cols..start * cols + grad.len()]
                        .iter_mut()
                        .zip(grad)
                        .for_each(|(a, &b)| *a += b);
                });
            }
            Op::SliceCols { src, start } => {
                let so = self.shape(out);
                let (rows, len) = (so[0], so[1]);
                let cols = self.shape(*src)[1];
                let start = *start;
                self.accumulate_scatter(*src, |g| {
                    for r in 0..rows {
                        for j in 0..len {
                            g[r * cols + start + j] += grad[r * len + j];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in &parts.clone() {
                    let n = self.numel(p);
                    self.accumulate(p, &grad[offset..offset + n]);
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = self.shape(out)[1];
                let rows = self.shape(out)[0];
                let mut offset = 0;
                for &p in &parts.clone() {
                    let w = self.shape(p)[1];
                    let mut gp = vec![T::ZERO; rows * w];
                    for r in 0..rows {
                        gp[r * w..(r + 1) * w]
                            .copy_from_slice(&grad[r * total + offset..r * total + offset + w]);
                    }
                    self.accumulate(p, &gp);
                    offset += w;
                }
            }
            Op::Softmax { src, axis } => {
                let shape = self.shape(out).to_vec();
                let lane = shape[*axis];
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let s = self.data(out).to_vec();
                let mut gx = vec![T::ZERO; s.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| o * lane * inner + l * inner + i;
                        let mut dot = T::ZERO;
                        for l in 0..lane {
                            dot += grad[at(l)] * s[at(l)];
                        }
                        for l in 0..lane {
                            gx[at(l)] = s[at(l)] * (grad[at(l)] - dot);
                        }
                    }
                }
                self.accumulate(*src, &gx);
            }
            Op::Gelu(a) => {
                let ga: Vec<T> = self
                    .data(*a)
                    .iter()
                    .zip(grad)
                    .map(|(&x, &g)| g * gelu_backward(x))
                    .collect();
                self.accumulate(*a, &ga);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let d = *self.shape(*x).last().expect("validated");
                let xd = self.data(*x).to_vec();
                let gd = self.data(*gamma).to_vec();
                let rows = xd.len() / d;
                let epsv = T::from_f64(*eps);
                let inv_d = T::from_f64(1.0 / d as f64);
                let df = T::from_f64(d as f64);

                let mut gx = vec![T::ZERO; xd.len()];
                let mut ggamma = vec![T::ZERO; d];
                let mut gbeta = vec![T::ZERO; d];
                for r in 0..rows {
                    let row = &xd[r * d..(r + 1) * d];
                    let grow = &grad[r * d..(r + 1) * d];
                    let mut mean = T::ZERO;
                    for &v in row {
                        mean += v;
                    }
                    mean = mean * inv_d;
                    let mut var = T::ZERO;
                    for &v in row {
                        let c = v - mean;
                        var += c * c;
                    }
                    var = var * inv_d;
                    let inv_std = T::ONE / (var + epsv).sqrt();

                    let xhat: Vec<T> = row.iter().map(|&v| (v - mean) * inv_std).collect();
                    let mut dxhat = vec![T::ZERO; d];
                    let mut dxhat_sum = T::ZERO;
                    let mut dxhat_xhat = T::ZERO;
                    for j in 0..d {
                        ggamma[j] += grow[j] * xhat[j];
                        gbeta[j] += grow[j];
                        dxhat[j] = grow[j] * gd[j];
                        dxhat_sum += dxhat[j];
                        dxhat_xhat += dxhat[j] * xhat[j];
                    }
                    for j in 0..d {
                        gx[r * d + j] =
                            inv_std * inv_d * (df * dxhat[j] - dxhat_sum - xhat[j] * dxhat_xhat);
                    }
                }
                self.accumulate(*x, &gx);
                self.accumulate(*gamma, &ggamma);
                self.accumulate(*beta, &gbeta);
            }
            Op::SumAll(a) => {
                let g = grad[0];
                let ga = vec![g; self.numel(*a)];
                self.accumulate(*a, &ga);
            }
            Op::MeanAll(a) => {
                let n = self.numel(*a);
                let g = grad[0] * T::from_f64(1.0 / n as f64);
                let ga = vec![g; n];
                self.accumulate(*a, &ga);
            }
            Op::CrossEntropy { logits, targets } => {
                let s = self.shape(*logits);
                let (b, c) = (s[0], s[1]);
                let d = self.data(*logits).to_vec();
                let scale = grad[0] * T::from_f64(1.0 / b as f64);
                let mut gl = vec![T::ZERO; b * c];
                for (row, &t) in targets.iter().enumerate() {
                    let r = &d[row * c..(row + 1) * c];
                    let mut m = r[0];
                    for &v in &r[1..] {
                        m = m.max(v);
                    }
                    let mut sum = T::ZERO;
                    for &v in r {
                        sum += (v - m).exp();
                    }
                    for j in 0..c {
                        let p = (r[j] - m).exp() / sum;
                        let y = if j == t { T::ONE } else { T::ZERO };
                        gl[row * c + j] = scale * (p - y);
                    }
                }
                self.accumulate(*logits, &gl);
            }
        }
        Ok(())
    }
}

fn gelu_forward<T: Element>(x: T) -> T {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let inner = c * (x + k * x * x * x);
    half * x * (T::ONE + inner.tanh())
}

fn gelu_backward<T: Element>(x: T) -> T {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let sech2 = T::ONE - t * t;
    let d_inner = c * (T::ONE + three * k * x * x);
    half * (T::ONE + t) + half * x * sech2 * d_inner
}

/// `a (m x k) . b (k x n)`, row-major.
pub(crate) fn matmul_raw<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; m * n];
    for i in 0..m {
        let crow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn add_componentwise() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(vec![1.0, 2.0], &[2], false).unwrap();
        let b = g.leaf(vec![3.0, 4.0], &[2], false).unwrap();
        let c = g.add(a, b).unwrap();
        assert_eq!(g.data(c), &[4.0, 6.0]);
    }

    #[test]
    fn add_zero_is_identity_bitwise() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(vec![1.25, -0.75, 3.5e-7], &[3], false).unwrap();
        let z = g.leaf(vec![0.0], &[1], false).unwrap();
        let y = g.add(x, z).unwrap();
        for (a, b) in g.data(x).iter().zip(g.data(y)) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn mul_by_zero_annihilates_and_zeroes_grad() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(vec![2.0, -3.0], &[2], true).unwrap();
        let z = g.leaf(vec![0.0], &[1], false).unwrap();
        let y = g.mul(x, z).unwrap();
        assert_eq!(g.data(y), &[0.0, 0.0]);
        let s = g.sum_all(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(vec![0.0; 6], &[2, 3], false).unwrap();
        let b = g.leaf(vec![0.0; 4], &[4], false).unwrap();
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4]"), "{err}");
    }

    #[test]
    fn matmul_identity_and_hand_dot() {
        let mut g = Graph::<f64>::new();
        let eye = g.leaf(vec![1.0, 0.0, 0.0, 1.0], &[2, 2], false).unwrap();
        let m = g.leaf(vec![3.0, -1.0, 2.5, 7.0], &[2, 2], false).unwrap();
        let p = g.matmul(eye, m).unwrap();
        assert_eq!(g.data(p), g.data(m));

        let a = g.leaf(vec![1.0, 2.0], &[1, 2], false).unwrap();
        let b = g.leaf(vec![3.0, 4.0], &[2, 1], false).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.data(c), &[11.0]);
    }

    #[test]
    fn matmul_inner_mismatch_is_error() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(vec![0.0; 6], &[2, 3], false).unwrap();
        let b = g.leaf(vec![0.0; 8], &[4, 2], false).unwrap();
        assert!(g.matmul(a, b).is_err());
    }

    #[test]
    fn matmul_grad_of_sum_is_ones_bt() {
        // d sum(A.B) / dA = ones . B^T
        let a_data = vec![0.3, -0.7, 1.1, 0.2, 0.9, -0.4];
        let b_data = vec![0.5, 1.5, -2.0, 0.25, 0.75, -0.5];
        let mut g = Graph::<f64>::new();
        let a = g.leaf(a_data, &[2, 3], true).unwrap();
        let b = g.leaf(b_data.clone(), &[3, 2], false).unwrap();
        let c = g.matmul(a, b).unwrap();
        let s = g.sum_all(c);
        g.backward(s).unwrap();
        let ga = g.grad(a).unwrap();
        for i in 0..2 {
            for p in 0..3 {
                let expect: f64 = (0..2).map(|j| b_data[p * 2 + j]).sum();
                assert!(close(ga[i * 3 + p], expect, 1e-12));
            }
        }
    }

    #[test]
    fn softmax_symmetry_stability_closed_form() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(vec![4.2, 4.2, 4.2], &[3], false).unwrap();
        let s = g.softmax(x, 0).unwrap();
        for &v in g.data(s) {
            assert!(close(v, 1.0 / 3.0, 1e-12));
        }

        let big = g.leaf(vec![1000.0, 0.0], &[2], false).unwrap();
        let sb = g.softmax(big, 0).unwrap();
        assert!(close(g.data(sb)[0], 1.0, 1e-9));
        assert!(close(g.data(sb)[1], 0.0, 1e-9));
        assert!(g.data(sb).iter().all(|v| v.is_finite()));

        let x2 = g.leaf(vec![0.0, 3f64.ln()], &[2], false).unwrap();
        let s2 = g.softmax(x2, 0).unwrap();
        assert!(close(g.data(s2)[0], 0.25, 1e-12));
        assert!(close(g.data(s2)[1], 0.75, 1e-12));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::<f64>::new();
        let x = g
            .leaf(vec![0.1, -2.0, 3.0, 0.0, 0.5, 1.5], &[2, 3], false)
            .unwrap();
        let s = g.softmax(x, 1).unwrap();
        let d = g.data(s);
        for r in 0..2 {
            let sum: f64 = d[r * 3..(r + 1) * 3].iter().sum();
            assert!(close(sum, 1.0, 1e-6));
            assert!(d[r * 3..(r + 1) * 3].iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn softmax_nan_input_is_error() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(vec![f64::NAN, 1.0], &[2], false).unwrap();
        assert!(g.softmax(x, 0).is_err());
    }

    #[test]
    fn gelu_center_and_asymptote() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(vec![0.0, 10.0], &[2], false).unwrap();
        let y = g.gelu(x);
        assert_eq!(g.data(y)[0], 0.0);
        assert!(close(g.data(y)[1], 10.0, 1e-6));
    }

    #[test]
    fn gelu_monotone_on_grid() {
        // GELU dips below zero left of x ~ -0.75; the monotone region starts
        // there, so that is the grid we test.
        let mut g = Graph::<f64>::new();
        let xs: Vec<f64> = (-7..=40).map(|i| i as f64 * 0.1).collect();
        let x = g.leaf(xs.clone(), &[xs.len()], false).unwrap();
        let y = g.gelu(x);
        let d = g.data(y);
        for w in d.windows(2) {
            assert!(w[1] >= w[0] - 1e-12);
        }
    }

    #[test]
    fn cross_entropy_uniform_is_ln_c() {
        let mut g = Graph::<f64>::new();
        let logits = g.leaf(vec![0.0; 4], &[1, 4], false).unwrap();
        let l = g.cross_entropy(logits, &[2]).unwrap();
        assert!(close(g.data(l)[0], 4f64.ln(), 1e-12));
    }

    #[test]
    fn gather_slice_concat_round_trip() {
        let mut g = Graph::<f64>::new();
        let x = g
            .leaf((0..12).map(|v| v as f64).collect(), &[3, 4], true)
            .unwrap();
        let r = g.gather_rows(x, &[2, 0]).unwrap();
        assert_eq!(g.data(r), &[8.0, 9.0, 10.0, 11.0, 0.0, 1.0, 2.0, 3.0]);

        let c0 = g.slice_cols(x, 0, 2).unwrap();
        let c1 = g.slice_cols(x, 2, 2).unwrap();
        let back = g.concat_cols(&[c0, c1]).unwrap();
        assert_eq!(g.data(back), g.data(x));

        let r0 = g.slice_rows(x, 0, 1).unwrap();
        let r12 = g.slice_rows(x, 1, 2).unwrap();
        let back2 = g.concat_rows(&[r0, r12]).unwrap();
        assert_eq!(g.data(back2), g.data(x));
    }

    #[test]
    fn forward_is_deterministic_bitwise() {
        let run = || {
            let mut g = Graph::<f32>::new();
            let x = g
                .leaf(vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6], &[2, 3], true)
                .unwrap();
            let w = g
                .leaf(vec![0.7, 0.8, -0.9, 1.0, 1.1, -1.2], &[3, 2], true)
                .unwrap();
            let h = g.matmul(x, w).unwrap();
            let a = g.gelu(h);
            let s = g.softmax(a, 1).unwrap();
            let l = g.mean_all(s);
            g.backward(l).unwrap();
            (
                g.data(s).to_vec(),
                g.grad(x).unwrap().to_vec(),
                g.grad(w).unwrap().to_vec(),
            )
        };
        let (s1, gx1, gw1) = run();
        let (s2, gx2, gw2) = run();
        assert!(s1.iter().zip(&s2).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(gx1.iter().zip(&gx2).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(gw1.iter().zip(&gw2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
