use super::primitive::Primitive;
use super::tensor::{Scalar, Tensor};
use super::NumericsError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node<T> {
    value: Tensor<T>,
    // `None` for leaves and for values computed without any gradient-requiring input.
    op: Option<Recorded<T>>,
    requires_grad: bool,
}

struct Recorded<T> {
    prim: Primitive,
    inputs: Vec<usize>,
    aux: Vec<T>,
}

/// Computation record for one execution stream.
///
/// Nodes are appended in evaluation order, so a reverse sweep over node
/// indices is a reverse topological order.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every gradient-requiring leaf.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Tape<T> {
    /// New record. Per-primitive finiteness checks follow the build's
    /// debug-assertion setting.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a leaf. Gradients flow to it iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad();
        self.push(tensor, None, requires_grad)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor.with_requires_grad(false), None, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Option<Recorded<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Evaluate `prim` on `inputs` and record the result.
    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var, NumericsError> {
        for v in inputs {
            if v.0 >= self.nodes.len() {
                return Err(NumericsError::ShapeMismatch {
                    primitive: prim.name(),
                    detail: format!("input {} is not on this tape", v.0),
                });
            }
        }
        let values: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let (out, aux) = forward(&prim, &values)?;
        if self.check_finite && !out.is_finite() {
            return Err(NumericsError::NonFinite {
                primitive: prim.name(),
            });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = requires_grad.then(|| Recorded {
            prim,
            inputs: inputs.iter().map(|v| v.0).collect(),
            aux,
        });
        Ok(self.push(out, op, requires_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.matmul_t(a, b, false, false)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var, NumericsError> {
        self.apply(
            Primitive::MatMul {
                transpose_a: ta,
                transpose_b: tb,
            },
            &[a, b],
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, NumericsError> {
        self.apply(Primitive::Scale(factor), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.apply(Primitive::Exp, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.apply(Primitive::Log, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.apply(Primitive::Tanh, &[a])
    }

    pub fn logistic(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.apply(Primitive::Logistic, &[a])
    }

    pub fn log_logistic(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.apply(Primitive::LogLogistic, &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.apply(Primitive::Gelu, &[a])
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.apply(Primitive::Softmax, &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.apply(Primitive::LogSoftmax, &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, NumericsError> {
        self.apply(Primitive::LayerNorm { eps }, &[x, gain, bias])
    }

    pub fn embedding(&mut self, table: Var, ids: Vec<usize>) -> Result<Var, NumericsError> {
        self.apply(Primitive::Embedding { ids }, &[table])
    }

    pub fn masked_fill(&mut self, a: Var, mask: Vec<bool>, value: f64) -> Result<Var, NumericsError> {
        self.apply(Primitive::MaskedFill { mask, value }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.apply(Primitive::Sum, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.apply(Primitive::Mean, &[a])
    }

    pub fn index_select(&mut self, a: Var, rows: Vec<usize>) -> Result<Var, NumericsError> {
        self.apply(Primitive::IndexSelect { rows }, &[a])
    }

    pub fn gather(&mut self, a: Var, cols: Vec<usize>) -> Result<Var, NumericsError> {
        self.apply(Primitive::Gather { cols }, &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        self.apply(Primitive::SliceCols { start, len }, &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        self.apply(Primitive::ConcatCols, parts)
    }

    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<usize>,
    ) -> Result<Var, NumericsError> {
        self.apply(Primitive::CausalAttention { heads, segments }, &[q, k, v])
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NumericsError> {
        let loss_node = self.nodes.get(loss.0).ok_or(NumericsError::DetachedLoss)?;
        if loss_node.value.numel() != 1 {
            return Err(NumericsError::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        if !loss_node.requires_grad {
            return Err(NumericsError::DetachedLoss);
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(rec) = &node.op else { continue };
            let Some(g) = grads[idx].take() else { continue };
            let inputs: Vec<&Tensor<T>> = rec.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let needs: Vec<bool> = rec.inputs.iter().map(|&i| self.nodes[i].requires_grad).collect();
            let mut contribs: Vec<Option<Vec<T>>> = rec
                .inputs
                .iter()
                .zip(&needs)
                .map(|(&i, &n)| {
                    n.then(|| grads[i].take().unwrap_or_else(|| vec![T::zero(); self.nodes[i].value.numel()]))
                })
                .collect();
            backward_into(&rec.prim, &inputs, &node.value, &rec.aux, &g, &mut contribs);
            // The same input may appear in several slots (e.g. `x * x`).
            for (slot, &i) in contribs.into_iter().zip(&rec.inputs) {
                if let Some(buf) = slot {
                    match grads[i].as_mut() {
                        Some(existing) => add_into(existing, &buf),
                        None => grads[i] = Some(buf),
                    }
                }
            }
        }

        let mut out: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.op.is_none() && node.requires_grad {
                let data = grads
                    .get_mut(idx)
                    .and_then(|g| g.take())
                    .unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                out.push(Some(Tensor::from_parts(node.value.shape().to_vec(), data)));
            } else {
                out.push(None);
            }
        }
        Ok(Gradients { grads: out })
    }
}

fn mismatch(prim: &Primitive, detail: String) -> NumericsError {
    NumericsError::ShapeMismatch {
        primitive: prim.name(),
        detail,
    }
}

fn arity(prim: &Primitive, inputs: &[&Tensor<impl Scalar>], n: usize) -> Result<(), NumericsError> {
    if inputs.len() != n {
        return Err(mismatch(prim, format!("expected {} inputs, got {}", n, inputs.len())));
    }
    Ok(())
}

struct MatView {
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

fn view<T: Scalar>(t: &Tensor<T>, transpose: bool) -> MatView {
    let (r, c) = t.dims2();
    if transpose {
        MatView {
            rows: c,
            cols: r,
            rs: 1,
            cs: c,
        }
    } else {
        MatView {
            rows: r,
            cols: c,
            rs: c,
            cs: 1,
        }
    }
}

fn map<T: Scalar>(x: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x);
    (y, dy)
}

fn log_logistic<T: Scalar>(x: T) -> T {
    // min(x, 0) - ln(1 + exp(-|x|))
    x.min(T::zero()) - (-x.abs()).exp().ln_1p()
}

fn logistic<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn forward<T: Scalar>(prim: &Primitive, inputs: &[&Tensor<T>]) -> Result<(Tensor<T>, Vec<T>), NumericsError> {
    let none = Vec::new;
    match prim {
        Primitive::MatMul {
            transpose_a,
            transpose_b,
        } => {
            arity(prim, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape().len() > 2 || b.shape().len() > 2 {
                return Err(mismatch(prim, "matmul takes matrices".into()));
            }
            let va = view(a, *transpose_a);
            let vb = view(b, *transpose_b);
            if va.cols != vb.rows {
                return Err(mismatch(
                    prim,
                    format!("inner dims {} vs {} ({:?} x {:?})", va.cols, vb.rows, a.shape(), b.shape()),
                ));
            }
            let (m, k, n) = (va.rows, va.cols, vb.cols);
            let mut out = vec![T::zero(); m * n];
            T::gemm(
                m,
                k,
                n,
                T::one(),
                a.data(),
                va.rs,
                va.cs,
                b.data(),
                vb.rs,
                vb.cs,
                T::zero(),
                &mut out,
                n,
                1,
            );
            Ok((Tensor::from_parts(vec![m, n], out), none()))
        }
        Primitive::Add => {
            arity(prim, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() == b.shape() {
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
                return Ok((Tensor::from_parts(a.shape().to_vec(), data), none()));
            }
            let (_, n) = a.dims2();
            let (br, bc) = b.dims2();
            if br != 1 || bc != n || a.shape().len() != 2 {
                return Err(mismatch(prim, format!("{:?} + {:?}", a.shape(), b.shape())));
            }
            let bd = b.data();
            let data = a
                .data()
                .chunks(n)
                .flat_map(|row| row.iter().zip(bd).map(|(&x, &y)| x + y))
                .collect();
            Ok((Tensor::from_parts(a.shape().to_vec(), data), none()))
        }
        Primitive::Mul => {
            arity(prim, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return Err(mismatch(prim, format!("{:?} * {:?}", a.shape(), b.shape())));
            }
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
            Ok((Tensor::from_parts(a.shape().to_vec(), data), none()))
        }
        Primitive::Scale(c) => {
            arity(prim, inputs, 1)?;
            let c = T::from_f64(*c);
            Ok((map(inputs[0], |v| v * c), none()))
        }
        Primitive::Exp => {
            arity(prim, inputs, 1)?;
            Ok((map(inputs[0], |v| v.exp()), none()))
        }
        Primitive::Log => {
            arity(prim, inputs, 1)?;
            Ok((map(inputs[0], |v| v.ln()), none()))
        }
        Primitive::Tanh => {
            arity(prim, inputs, 1)?;
            Ok((map(inputs[0], |v| v.tanh()), none()))
        }
        Primitive::Logistic => {
            arity(prim, inputs, 1)?;
            Ok((map(inputs[0], logistic), none()))
        }
        Primitive::LogLogistic => {
            arity(prim, inputs, 1)?;
            Ok((map(inputs[0], log_logistic), none()))
        }
        Primitive::Gelu => {
            arity(prim, inputs, 1)?;
            Ok((map(inputs[0], |v| gelu_parts(v).0), none()))
        }
        Primitive::Softmax | Primitive::LogSoftmax => {
            arity(prim, inputs, 1)?;
            let x = inputs[0];
            let (_, n) = x.dims2();
            let mut out = Vec::with_capacity(x.numel());
            let log = matches!(prim, Primitive::LogSoftmax);
            for row in x.data().chunks(n) {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
                if log {
                    let lse = max + sum.ln();
                    out.extend(row.iter().map(|&v| v - lse));
                } else {
                    out.extend(row.iter().map(|&v| (v - max).exp() / sum));
                }
            }
            Ok((Tensor::from_parts(x.shape().to_vec(), out), none()))
        }
        Primitive::LayerNorm { eps } => {
            arity(prim, inputs, 3)?;
            let (x, g, b) = (inputs[0], inputs[1], inputs[2]);
            let (m, n) = x.dims2();
            if g.numel() != n || b.numel() != n {
                return Err(mismatch(prim, format!("gain/bias length must be {}", n)));
            }
            let eps = T::from_f64(*eps);
            let nf = T::from_f64(n as f64);
            let mut out = Vec::with_capacity(m * n);
            let mut aux = Vec::with_capacity(m * n + m);
            let mut rstds = Vec::with_capacity(m);
            for row in x.data().chunks(n) {
                let mean = row.iter().copied().sum::<T>() / nf;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
                let rstd = T::one() / (var + eps).sqrt();
                for (j, &v) in row.iter().enumerate() {
                    let xhat = (v - mean) * rstd;
                    aux.push(xhat);
                    out.push(xhat * g.data()[j] + b.data()[j]);
                }
                rstds.push(rstd);
            }
            aux.extend(rstds);
            Ok((Tensor::from_parts(x.shape().to_vec(), out), aux))
        }
        Primitive::Embedding { ids } => {
            arity(prim, inputs, 1)?;
            let table = inputs[0];
            let (v, d) = table.dims2();
            if ids.is_empty() {
                return Err(mismatch(prim, "empty id list".into()));
            }
            let mut out = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                if id >= v {
                    return Err(mismatch(prim, format!("id {} outside table of {} rows", id, v)));
                }
                out.extend_from_slice(&table.data()[id * d..(id + 1) * d]);
            }
            Ok((Tensor::from_parts(vec![ids.len(), d], out), none()))
        }
        Primitive::MaskedFill { mask, value } => {
            arity(prim, inputs, 1)?;
            let x = inputs[0];
            if mask.len() != x.numel() {
                return Err(mismatch(prim, format!("mask length {} vs {}", mask.len(), x.numel())));
            }
            let fill = T::from_f64(*value);
            let data = x
                .data()
                .iter()
                .zip(mask)
                .map(|(&v, &m)| if m { fill } else { v })
                .collect();
            Ok((Tensor::from_parts(x.shape().to_vec(), data), none()))
        }
        Primitive::Sum | Primitive::Mean => {
            arity(prim, inputs, 1)?;
            let x = inputs[0];
            let mut s: T = x.data().iter().copied().sum();
            if matches!(prim, Primitive::Mean) {
                s = s / T::from_f64(x.numel() as f64);
            }
            Ok((Tensor::scalar(s), none()))
        }
        Primitive::IndexSelect { rows } => {
            arity(prim, inputs, 1)?;
            let x = inputs[0];
            let (m, n) = x.dims2();
            if rows.is_empty() {
                return Err(mismatch(prim, "empty row list".into()));
            }
            let mut out = Vec::with_capacity(rows.len() * n);
            for &r in rows {
                if r >= m {
                    return Err(mismatch(prim, format!("row {} of {}", r, m)));
                }
                out.extend_from_slice(&x.data()[r * n..(r + 1) * n]);
            }
            Ok((Tensor::from_parts(vec![rows.len(), n], out), none()))
        }
        Primitive::Gather { cols } => {
            arity(prim, inputs, 1)?;
            let x = inputs[0];
            let (m, n) = x.dims2();
            if cols.len() != m {
                return Err(mismatch(prim, format!("{} indices for {} rows", cols.len(), m)));
            }
            let mut out = Vec::with_capacity(m);
            for (i, &c) in cols.iter().enumerate() {
                if c >= n {
                    return Err(mismatch(prim, format!("column {} of {}", c, n)));
                }
                out.push(x.data()[i * n + c]);
            }
            Ok((Tensor::from_parts(vec![m], out), none()))
        }
        Primitive::SliceCols { start, len } => {
            arity(prim, inputs, 1)?;
            let x = inputs[0];
            let (m, n) = x.dims2();
            if *len == 0 || start + len > n {
                return Err(mismatch(prim, format!("slice {}..{} of {}", start, start + len, n)));
            }
            let mut out = Vec::with_capacity(m * len);
            for row in x.data().chunks(n) {
                out.extend_from_slice(&row[*start..start + len]);
            }
            Ok((Tensor::from_parts(vec![m, *len], out), none()))
        }
        Primitive::CausalAttention { heads, segments } => {
            arity(prim, inputs, 3)?;
            let (q, k, v) = (inputs[0], inputs[1], inputs[2]);
            if q.shape().len() != 2 || k.shape() != q.shape() || v.shape() != q.shape() {
                return Err(mismatch(prim, format!("{:?} {:?} {:?}", q.shape(), k.shape(), v.shape())));
            }
            let (rows, dim) = q.dims2();
            if *heads == 0 || dim % heads != 0 {
                return Err(mismatch(prim, format!("{} columns over {} heads", dim, heads)));
            }
            if segments.iter().sum::<usize>() != rows || segments.contains(&0) {
                return Err(mismatch(prim, format!("segments {:?} vs {} rows", segments, rows)));
            }
            let dh = dim / heads;
            let scale = T::from_f64(1.0 / (dh as f64).sqrt());
            let mut out = vec![T::zero(); rows * dim];
            let mut probs = Vec::with_capacity(segments.iter().map(|n| n * n * heads).sum());
            let mut off = 0;
            for &n in segments {
                for h in 0..*heads {
                    let base = off * dim + h * dh;
                    let mut s = vec![T::zero(); n * n];
                    T::gemm(n, dh, n, scale, &q.data()[base..], dim, 1, &k.data()[base..], 1, dim, T::zero(), &mut s, n, 1);
                    for i in 0..n {
                        let row = &mut s[i * n..(i + 1) * n];
                        let max = row[..=i].iter().fold(T::neg_infinity(), |m, &x| m.max(x));
                        let mut z = T::zero();
                        for x in row[..=i].iter_mut() {
                            *x = (*x - max).exp();
                            z += *x;
                        }
                        for x in row[..=i].iter_mut() {
                            *x = *x / z;
                        }
                        for x in row[i + 1..].iter_mut() {
                            *x = T::zero();
                        }
                    }
                    T::gemm(n, n, dh, T::one(), &s, n, 1, &v.data()[base..], dim, 1, T::zero(), &mut out[base..], dim, 1);
                    probs.extend_from_slice(&s);
                }
                off += n;
            }
            Ok((Tensor::from_parts(vec![rows, dim], out), probs))
        }
        Primitive::ConcatCols => {
            if inputs.is_empty() {
                return Err(mismatch(prim, "no inputs".into()));
            }
            let m = inputs[0].dims2().0;
            if inputs.iter().any(|t| t.dims2().0 != m) {
                return Err(mismatch(prim, "row counts differ".into()));
            }
            let total: usize = inputs.iter().map(|t| t.dims2().1).sum();
            let mut out = Vec::with_capacity(m * total);
            for r in 0..m {
                for t in inputs {
                    let c = t.dims2().1;
                    out.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
                }
            }
            Ok((Tensor::from_parts(vec![m, total], out), none()))
        }
    }
}

fn backward_into<T: Scalar>(
    prim: &Primitive,
    inputs: &[&Tensor<T>],
    out: &Tensor<T>,
    aux: &[T],
    g: &[T],
    dx: &mut [Option<Vec<T>>],
) {
    match prim {
        Primitive::MatMul {
            transpose_a,
            transpose_b,
        } => {
            let (a, b) = (inputs[0], inputs[1]);
            let va = view(a, *transpose_a);
            let vb = view(b, *transpose_b);
            let (m, k, n) = (va.rows, va.cols, vb.cols);
            if let Some(da) = dx[0].as_mut() {
                if !*transpose_a {
                    // dA = G * op(B)^T
                    T::gemm(m, n, k, T::one(), g, n, 1, b.data(), vb.cs, vb.rs, T::one(), da, k, 1);
                } else {
                    // dA (stored k x m) = op(B) * G^T
                    T::gemm(k, n, m, T::one(), b.data(), vb.rs, vb.cs, g, 1, n, T::one(), da, m, 1);
                }
            }
            if let Some(db) = dx[1].as_mut() {
                if !*transpose_b {
                    // dB = op(A)^T * G
                    T::gemm(k, m, n, T::one(), a.data(), va.cs, va.rs, g, n, 1, T::one(), db, n, 1);
                } else {
                    // dB (stored n x k) = G^T * op(A)
                    T::gemm(n, m, k, T::one(), g, 1, n, a.data(), va.rs, va.cs, T::one(), db, k, 1);
                }
            }
        }
        Primitive::Add => {
            if let Some(da) = dx[0].as_mut() {
                add_into(da, g);
            }
            if let Some(db) = dx[1].as_mut() {
                if db.len() == g.len() {
                    add_into(db, g);
                } else {
                    let n = db.len();
                    for row in g.chunks(n) {
                        add_into(db, row);
                    }
                }
            }
        }
        Primitive::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            if let Some(da) = dx[0].as_mut() {
                for ((d, &gi), &bi) in da.iter_mut().zip(g).zip(b.data()) {
                    *d += gi * bi;
                }
            }
            if let Some(db) = dx[1].as_mut() {
                for ((d, &gi), &ai) in db.iter_mut().zip(g).zip(a.data()) {
                    *d += gi * ai;
                }
            }
        }
        Primitive::Scale(c) => {
            let c = T::from_f64(*c);
            if let Some(d) = dx[0].as_mut() {
                for (d, &gi) in d.iter_mut().zip(g) {
                    *d += gi * c;
                }
            }
        }
        Primitive::Exp => elementwise(dx, g, out.data(), |_, y| y, inputs[0].data()),
        Primitive::Log => elementwise(dx, g, out.data(), |x, _| T::one() / x, inputs[0].data()),
        Primitive::Tanh => elementwise(dx, g, out.data(), |_, y| T::one() - y * y, inputs[0].data()),
        Primitive::Logistic => elementwise(dx, g, out.data(), |_, y| y * (T::one() - y), inputs[0].data()),
        Primitive::LogLogistic => elementwise(dx, g, out.data(), |x, _| logistic(-x), inputs[0].data()),
        Primitive::Gelu => elementwise(dx, g, out.data(), |x, _| gelu_parts(x).1, inputs[0].data()),
        Primitive::Softmax => {
            let Some(d) = dx[0].as_mut() else { return };
            let n = out.dims2().1;
            for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                for ((dv, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                    *dv += yv * (gv - dot);
                }
            }
        }
        Primitive::LogSoftmax => {
            let Some(d) = dx[0].as_mut() else { return };
            let n = out.dims2().1;
            for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                let gsum: T = grow.iter().copied().sum();
                for ((dv, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                    *dv += gv - yv.exp() * gsum;
                }
            }
        }
        Primitive::LayerNorm { .. } => {
            let (x, gain) = (inputs[0], inputs[1]);
            let (m, n) = x.dims2();
            let (xhat, rstd) = aux.split_at(m * n);
            if let Some(dg) = dx[1].as_mut() {
                for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                    for j in 0..n {
                        dg[j] += grow[j] * hrow[j];
                    }
                }
            }
            if let Some(db) = dx[2].as_mut() {
                for grow in g.chunks(n) {
                    add_into(db, grow);
                }
            }
            if let Some(d) = dx[0].as_mut() {
                let nf = T::from_f64(n as f64);
                let gd = gain.data();
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    let hrow = &xhat[i * n..(i + 1) * n];
                    let mut mean_d = T::zero();
                    let mut mean_dh = T::zero();
                    for j in 0..n {
                        let dh = grow[j] * gd[j];
                        mean_d += dh;
                        mean_dh += dh * hrow[j];
                    }
                    mean_d = mean_d / nf;
                    mean_dh = mean_dh / nf;
                    let drow = &mut d[i * n..(i + 1) * n];
                    for j in 0..n {
                        let dh = grow[j] * gd[j];
                        drow[j] += rstd[i] * (dh - mean_d - hrow[j] * mean_dh);
                    }
                }
            }
        }
        Primitive::Embedding { ids } => {
            let Some(d) = dx[0].as_mut() else { return };
            let dim = inputs[0].dims2().1;
            for (r, &id) in ids.iter().enumerate() {
                add_into(&mut d[id * dim..(id + 1) * dim], &g[r * dim..(r + 1) * dim]);
            }
        }
        Primitive::MaskedFill { mask, .. } => {
            let Some(d) = dx[0].as_mut() else { return };
            for ((dv, &gv), &m) in d.iter_mut().zip(g).zip(mask) {
                if !m {
                    *dv += gv;
                }
            }
        }
        Primitive::Sum | Primitive::Mean => {
            let Some(d) = dx[0].as_mut() else { return };
            let mut gv = g[0];
            if matches!(prim, Primitive::Mean) {
                gv = gv / T::from_f64(d.len() as f64);
            }
            for v in d.iter_mut() {
                *v += gv;
            }
        }
        Primitive::IndexSelect { rows } => {
            let Some(d) = dx[0].as_mut() else { return };
            let n = inputs[0].dims2().1;
            for (k, &r) in rows.iter().enumerate() {
                add_into(&mut d[r * n..(r + 1) * n], &g[k * n..(k + 1) * n]);
            }
        }
        Primitive::Gather { cols } => {
            let Some(d) = dx[0].as_mut() else { return };
            let n = inputs[0].dims2().1;
            for (i, &c) in cols.iter().enumerate() {
                d[i * n + c] += g[i];
            }
        }
        Primitive::SliceCols { start, len } => {
            let Some(d) = dx[0].as_mut() else { return };
            let n = inputs[0].dims2().1;
            for (drow, grow) in d.chunks_mut(n).zip(g.chunks(*len)) {
                add_into(&mut drow[*start..start + len], grow);
            }
        }
        Primitive::CausalAttention { heads, segments } => {
            let (q, k, v) = (inputs[0], inputs[1], inputs[2]);
            let (_, dim) = q.dims2();
            let dh = dim / heads;
            let scale = T::from_f64(1.0 / (dh as f64).sqrt());
            let mut off = 0;
            let mut pidx = 0;
            for &n in segments {
                for h in 0..*heads {
                    let base = off * dim + h * dh;
                    let p = &aux[pidx..pidx + n * n];
                    pidx += n * n;
                    if let Some(dv) = dx[2].as_mut() {
                        T::gemm(n, n, dh, T::one(), p, 1, n, &g[base..], dim, 1, T::one(), &mut dv[base..], dim, 1);
                    }
                    if dx[0].is_none() && dx[1].is_none() {
                        continue;
                    }
                    let mut ds = vec![T::zero(); n * n];
                    T::gemm(n, dh, n, T::one(), &g[base..], dim, 1, &v.data()[base..], 1, dim, T::zero(), &mut ds, n, 1);
                    for i in 0..n {
                        let prow = &p[i * n..(i + 1) * n];
                        let drow = &mut ds[i * n..(i + 1) * n];
                        let dot: T = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                        for (d, &pp) in drow.iter_mut().zip(prow) {
                            *d = pp * (*d - dot);
                        }
                    }
                    if let Some(dq) = dx[0].as_mut() {
                        T::gemm(n, n, dh, scale, &ds, n, 1, &k.data()[base..], dim, 1, T::one(), &mut dq[base..], dim, 1);
                    }
                    if let Some(dk) = dx[1].as_mut() {
                        T::gemm(n, n, dh, scale, &ds, 1, n, &q.data()[base..], dim, 1, T::one(), &mut dk[base..], dim, 1);
                    }
                }
                off += n;
            }
        }
        Primitive::ConcatCols => {
            let total = out.dims2().1;
            let mut offset = 0;
            for (k, t) in inputs.iter().enumerate() {
                let c = t.dims2().1;
                if let Some(d) = dx[k].as_mut() {
                    for (drow, grow) in d.chunks_mut(c).zip(g.chunks(total)) {
                        add_into(drow, &grow[offset..offset + c]);
                    }
                }
                offset += c;
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `dx += g * f(x, y)` for unary elementwise primitives.
fn elementwise<T: Scalar>(dx: &mut [Option<Vec<T>>], g: &[T], y: &[T], f: impl Fn(T, T) -> T, x: &[T]) {
    let Some(d) = dx[0].as_mut() else { return };
    for (((dv, &gv), &xv), &yv) in d.iter_mut().zip(g).zip(x).zip(y) {
        *dv += gv * f(xv, yv);
    }
}

/// Tanh-approximated GELU of a single value.
pub fn gelu<T: Scalar>(x: T) -> T {
    gelu_parts(x).0
}
