//! Reverse-mode autodiff on a Wengert tape. Every recorded value is a 2-D
//! row-major matrix; model code tracks any higher-dimensional meaning (e.g. a
//! feature map rides as channels × pixels). Nodes are appended in evaluation
//! order, so ids are already topologically sorted and the backward sweep is a
//! single reverse pass that visits each node exactly once. `backward` consumes
//! the tape, which is how it gets cleared after use.

use std::cell::RefCell;

use super::error::{NumericsError, Result};
use super::kernels::{self, ConvGeom};
use super::scalar::Scalar;
use super::tensor::Tensor;

/// Handle to a tape node. Carries its matrix dimensions so shape checks do not
/// need to borrow the tape.
#[derive(Clone, Copy, Debug)]
pub struct Var {
    id: usize,
    rows: usize,
    cols: usize,
}

impl Var {
    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn numel(&self) -> usize {
        self.rows * self.cols
    }
    fn dims(&self) -> Vec<usize> {
        vec![self.rows, self.cols]
    }
}

enum Op<T: Scalar> {
    Leaf,
    Matmul { a: Var, b: Var },
    Transpose { a: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: T },
    RowBias { x: Var, b: Var },
    RowSelect { x: Var, row: usize },
    ConcatRows { a: Var, b: Var },
    Reshape { a: Var },
    Silu { a: Var },
    Softmax { a: Var },
    LogSumExp { a: Var },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, stats: Vec<(T, T)> },
    Im2col { a: Var, geom: ConvGeom },
    Upsample2 { a: Var, channels: usize, h: usize, w: usize },
    MeanAll { a: Var },
}

struct Node<T: Scalar> {
    data: Vec<T>,
    needs_grad: bool,
    op: Op<T>,
}

/// Recording tape for one forward/backward evaluation. Confined to a single
/// thread; parallelism happens across tapes, never within one.
pub struct Tape<T: Scalar = f32> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, data: Vec<T>, rows: usize, cols: usize, needs_grad: bool, op: Op<T>) -> Var {
        debug_assert_eq!(data.len(), rows * cols);
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { data, needs_grad, op });
        Var { id, rows, cols }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes.borrow()[v.id].needs_grad
    }

    /// Insert a constant (no gradient will be tracked through it).
    pub fn leaf(&self, t: &Tensor<T>) -> Var {
        let (rows, cols) = flatten_2d(t.shape());
        self.push(t.data().to_vec(), rows, cols, false, Op::Leaf)
    }

    /// Insert a differentiable leaf; its gradient is available after backward.
    pub fn param(&self, t: &Tensor<T>) -> Var {
        let (rows, cols) = flatten_2d(t.shape());
        self.push(t.data().to_vec(), rows, cols, true, Op::Leaf)
    }

    /// Copy a node's current value out as a tensor of the given shape.
    pub fn value(&self, v: Var) -> Tensor<T> {
        let nodes = self.nodes.borrow();
        Tensor::new(&[v.rows, v.cols], nodes[v.id].data.clone()).expect("node shape consistent")
    }

    pub fn value_shaped(&self, v: Var, shape: &[usize]) -> Result<Tensor<T>> {
        let nodes = self.nodes.borrow();
        Tensor::new(shape, nodes[v.id].data.clone())
    }

    /// Scan a node for NaN/Inf, naming the offending layer in the error.
    pub fn check_finite(&self, v: Var, context: &str) -> Result<()> {
        let nodes = self.nodes.borrow();
        if nodes[v.id].data.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(NumericsError::non_finite(context))
        }
    }

    // ── Primitive ops ──────────────────────────────────────────────────────

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        if a.cols != b.rows {
            return Err(NumericsError::dim("matmul", &a.dims(), &b.dims()));
        }
        let (m, k, n) = (a.rows, a.cols, b.cols);
        let mut out = vec![T::zero(); m * n];
        {
            let nodes = self.nodes.borrow();
            kernels::gemm_nn(&nodes[a.id].data, &nodes[b.id].data, &mut out, m, k, n, false);
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, m, n, ng, Op::Matmul { a, b }))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let (m, n) = (a.rows, a.cols);
        let mut out = vec![T::zero(); m * n];
        {
            let nodes = self.nodes.borrow();
            let src = &nodes[a.id].data;
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = src[i * n + j];
                }
            }
        }
        let ng = self.needs(a);
        self.push(out, n, m, ng, Op::Transpose { a })
    }

    fn zip(&self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Vec<T>> {
        if a.rows != b.rows || a.cols != b.cols {
            return Err(NumericsError::dim(op, &a.dims(), &b.dims()));
        }
        let nodes = self.nodes.borrow();
        Ok(nodes[a.id]
            .data
            .iter()
            .zip(&nodes[b.id].data)
            .map(|(&x, &y)| f(x, y))
            .collect())
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("add", a, b, |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, a.rows, a.cols, ng, Op::Add { a, b }))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("sub", a, b, |x, y| x - y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, a.rows, a.cols, ng, Op::Sub { a, b }))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("mul", a, b, |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, a.rows, a.cols, ng, Op::Mul { a, b }))
    }

    pub fn scale(&self, a: Var, c: T) -> Var {
        let out: Vec<T> = self.nodes.borrow()[a.id].data.iter().map(|&x| x * c).collect();
        let ng = self.needs(a);
        self.push(out, a.rows, a.cols, ng, Op::Scale { a, c })
    }

    /// y[i, j] = x[i, j] + b[i]; `b` must be a column vector (rows × 1).
    pub fn row_bias(&self, x: Var, b: Var) -> Result<Var> {
        if b.rows != x.rows || b.cols != 1 {
            return Err(NumericsError::dim("row_bias", &x.dims(), &b.dims()));
        }
        let mut out = vec![T::zero(); x.rows * x.cols];
        {
            let nodes = self.nodes.borrow();
            let xs = &nodes[x.id].data;
            let bs = &nodes[b.id].data;
            for i in 0..x.rows {
                let bi = bs[i];
                for j in 0..x.cols {
                    out[i * x.cols + j] = xs[i * x.cols + j] + bi;
                }
            }
        }
        let ng = self.needs(x) || self.needs(b);
        Ok(self.push(out, x.rows, x.cols, ng, Op::RowBias { x, b }))
    }

    /// Extract one row as a 1 × cols matrix (embedding-table lookup).
    pub fn row_select(&self, x: Var, row: usize) -> Result<Var> {
        if row >= x.rows {
            return Err(NumericsError::contract(format!(
                "row_select: row {row} out of {}",
                x.rows
            )));
        }
        let out = self.nodes.borrow()[x.id].data[row * x.cols..(row + 1) * x.cols].to_vec();
        let ng = self.needs(x);
        Ok(self.push(out, 1, x.cols, ng, Op::RowSelect { x, row }))
    }

    /// Stack two matrices with equal column counts (channel concat).
    pub fn concat_rows(&self, a: Var, b: Var) -> Result<Var> {
        if a.cols != b.cols {
            return Err(NumericsError::dim("concat_rows", &a.dims(), &b.dims()));
        }
        let mut out = Vec::with_capacity((a.rows + b.rows) * a.cols);
        {
            let nodes = self.nodes.borrow();
            out.extend_from_slice(&nodes[a.id].data);
            out.extend_from_slice(&nodes[b.id].data);
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, a.rows + b.rows, a.cols, ng, Op::ConcatRows { a, b }))
    }

    pub fn reshape(&self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        if rows * cols != a.numel() {
            return Err(NumericsError::ShapeLen {
                shape: vec![rows, cols],
                len: a.numel(),
            });
        }
        let out = self.nodes.borrow()[a.id].data.clone();
        let ng = self.needs(a);
        Ok(self.push(out, rows, cols, ng, Op::Reshape { a }))
    }

    /// SiLU activation x·σ(x) — smooth, so finite-difference checks behave.
    pub fn silu(&self, a: Var) -> Var {
        let out: Vec<T> = self.nodes.borrow()[a.id]
            .data
            .iter()
            .map(|&x| x * sigmoid(x))
            .collect();
        let ng = self.needs(a);
        self.push(out, a.rows, a.cols, ng, Op::Silu { a })
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self, a: Var) -> Result<Var> {
        let mut out = vec![T::zero(); a.numel()];
        {
            let nodes = self.nodes.borrow();
            let src = &nodes[a.id].data;
            if src.iter().any(|x| !x.is_finite()) {
                return Err(NumericsError::non_finite("softmax input"));
            }
            for i in 0..a.rows {
                let row = &src[i * a.cols..(i + 1) * a.cols];
                let dst = &mut out[i * a.cols..(i + 1) * a.cols];
                softmax_row(row, dst);
            }
        }
        let ng = self.needs(a);
        Ok(self.push(out, a.rows, a.cols, ng, Op::Softmax { a }))
    }

    /// Row-wise log-sum-exp, the stable half of a cross-entropy loss.
    pub fn logsumexp_rows(&self, a: Var) -> Var {
        let mut out = vec![T::zero(); a.rows];
        {
            let nodes = self.nodes.borrow();
            let src = &nodes[a.id].data;
            for i in 0..a.rows {
                let row = &src[i * a.cols..(i + 1) * a.cols];
                let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                let sum = row.iter().fold(T::zero(), |s, &v| s + (v - max).exp());
                out[i] = max + sum.ln();
            }
        }
        let ng = self.needs(a);
        self.push(out, a.rows, 1, ng, Op::LogSumExp { a })
    }

    /// Group normalization over a (channels × pixels) map: statistics are
    /// taken per channel-group across both the group's channels and pixels.
    pub fn group_norm(&self, x: Var, gamma: Var, beta: Var, groups: usize, eps: T) -> Result<Var> {
        let channels = x.rows;
        if channels % groups != 0 || groups == 0 {
            return Err(NumericsError::contract(format!(
                "group_norm: {channels} channels not divisible into {groups} groups"
            )));
        }
        if gamma.rows != channels || gamma.cols != 1 || beta.rows != channels || beta.cols != 1 {
            return Err(NumericsError::dim("group_norm", &x.dims(), &gamma.dims()));
        }
        let per = channels / groups;
        let cols = x.cols;
        let group_len = T::of((per * cols) as f64);
        let mut out = vec![T::zero(); x.numel()];
        let mut stats = Vec::with_capacity(groups);
        {
            let nodes = self.nodes.borrow();
            let xs = &nodes[x.id].data;
            let gs = &nodes[gamma.id].data;
            let bs = &nodes[beta.id].data;
            for g in 0..groups {
                let span = g * per * cols..(g + 1) * per * cols;
                let chunk = &xs[span.clone()];
                let mean = chunk.iter().fold(T::zero(), |s, &v| s + v) / group_len;
                let var = chunk
                    .iter()
                    .fold(T::zero(), |s, &v| s + (v - mean) * (v - mean))
                    / group_len;
                let rstd = (var + eps).sqrt().recip();
                stats.push((mean, rstd));
                for c in 0..per {
                    let ch = g * per + c;
                    let gamma_c = gs[ch];
                    let beta_c = bs[ch];
                    for j in 0..cols {
                        let idx = ch * cols + j;
                        out[idx] = gamma_c * (xs[idx] - mean) * rstd + beta_c;
                    }
                }
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(out, x.rows, x.cols, ng, Op::GroupNorm { x, gamma, beta, groups, stats }))
    }

    /// Unroll conv patches; pairs with a matmul against the kernel matrix.
    pub fn im2col(&self, a: Var, geom: ConvGeom) -> Result<Var> {
        if a.rows != geom.channels || a.cols != geom.h * geom.w {
            return Err(NumericsError::dim(
                "im2col",
                &a.dims(),
                &[geom.channels, geom.h * geom.w],
            ));
        }
        let (rows, cols) = geom.col_shape();
        let mut out = vec![T::zero(); rows * cols];
        kernels::im2col(&self.nodes.borrow()[a.id].data, &mut out, geom);
        let ng = self.needs(a);
        Ok(self.push(out, rows, cols, ng, Op::Im2col { a, geom }))
    }

    pub fn upsample2(&self, a: Var, channels: usize, h: usize, w: usize) -> Result<Var> {
        if a.rows != channels || a.cols != h * w {
            return Err(NumericsError::dim("upsample2", &a.dims(), &[channels, h * w]));
        }
        let mut out = vec![T::zero(); channels * 4 * h * w];
        kernels::upsample2(&self.nodes.borrow()[a.id].data, &mut out, channels, h, w);
        let ng = self.needs(a);
        Ok(self.push(out, channels, 4 * h * w, ng, Op::Upsample2 { a, channels, h, w }))
    }

    /// Mean over all elements, producing the 1×1 scalar used as a loss head.
    pub fn mean_all(&self, a: Var) -> Var {
        let nodes = self.nodes.borrow();
        let src = &nodes[a.id].data;
        let mean = src.iter().fold(T::zero(), |s, &v| s + v) / T::of(src.len() as f64);
        drop(nodes);
        let ng = self.needs(a);
        self.push(vec![mean], 1, 1, ng, Op::MeanAll { a })
    }

    /// Mean squared error between two same-shape nodes (element mean).
    pub fn mse(&self, pred: Var, target: Var) -> Result<Var> {
        let d = self.sub(pred, target)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean_all(sq))
    }

    // ── Backward ───────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Consumes the tape (it is cleared by
    /// construction) and returns gradients for every `param` leaf.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.into_inner();
        if loss.numel() != 1 {
            return Err(NumericsError::contract(format!(
                "backward needs a scalar loss, got {}x{}",
                loss.rows, loss.cols
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);

        // Ids are topologically ordered by construction; one reverse pass
        // visits each node exactly once.
        for id in (0..nodes.len()).rev() {
            if grads[id].is_none() || !nodes[id].needs_grad {
                continue;
            }
            let g = grads[id].take().unwrap();
            let node = &nodes[id];
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g); // keep for extraction
                }
                Op::Matmul { a, b } => {
                    let (m, k, n) = (a.rows, a.cols, b.cols);
                    if nodes[a.id].needs_grad {
                        let ga = ensure(&mut grads, a.id, m * k);
                        kernels::gemm_nt(&g, &nodes[b.id].data, ga, m, n, k, true);
                    }
                    if nodes[b.id].needs_grad {
                        let gb = ensure(&mut grads, b.id, k * n);
                        kernels::gemm_tn(&nodes[a.id].data, &g, gb, k, m, n, true);
                    }
                }
                Op::Transpose { a } => {
                    if nodes[a.id].needs_grad {
                        let (m, n) = (a.rows, a.cols);
                        let ga = ensure(&mut grads, a.id, m * n);
                        for i in 0..n {
                            for j in 0..m {
                                ga[j * n + i] += g[i * m + j];
                            }
                        }
                    }
                }
                Op::Add { a, b } => {
                    accumulate_into(&mut grads, &nodes, *a, &g, |gi| gi);
                    accumulate_into(&mut grads, &nodes, *b, &g, |gi| gi);
                }
                Op::Sub { a, b } => {
                    accumulate_into(&mut grads, &nodes, *a, &g, |gi| gi);
                    accumulate_into(&mut grads, &nodes, *b, &g, |gi| -gi);
                }
                Op::Mul { a, b } => {
                    if nodes[a.id].needs_grad {
                        let ga = ensure(&mut grads, a.id, a.numel());
                        for (i, gi) in g.iter().enumerate() {
                            ga[i] += *gi * nodes[b.id].data[i];
                        }
                    }
                    if nodes[b.id].needs_grad {
                        let gb = ensure(&mut grads, b.id, b.numel());
                        for (i, gi) in g.iter().enumerate() {
                            gb[i] += *gi * nodes[a.id].data[i];
                        }
                    }
                }
                Op::Scale { a, c } => {
                    let c = *c;
                    accumulate_into(&mut grads, &nodes, *a, &g, |gi| gi * c);
                }
                Op::RowBias { x, b } => {
                    accumulate_into(&mut grads, &nodes, *x, &g, |gi| gi);
                    if nodes[b.id].needs_grad {
                        let gb = ensure(&mut grads, b.id, b.numel());
                        for i in 0..x.rows {
                            let mut acc = T::zero();
                            for j in 0..x.cols {
                                acc += g[i * x.cols + j];
                            }
                            gb[i] += acc;
                        }
                    }
                }
                Op::RowSelect { x, row } => {
                    if nodes[x.id].needs_grad {
                        let gx = ensure(&mut grads, x.id, x.numel());
                        for (j, gi) in g.iter().enumerate() {
                            gx[row * x.cols + j] += *gi;
                        }
                    }
                }
                Op::ConcatRows { a, b } => {
                    let split = a.numel();
                    if nodes[a.id].needs_grad {
                        let ga = ensure(&mut grads, a.id, a.numel());
                        for (i, gi) in g[..split].iter().enumerate() {
                            ga[i] += *gi;
                        }
                    }
                    if nodes[b.id].needs_grad {
                        let gb = ensure(&mut grads, b.id, b.numel());
                        for (i, gi) in g[split..].iter().enumerate() {
                            gb[i] += *gi;
                        }
                    }
                }
                Op::Reshape { a } => {
                    accumulate_into(&mut grads, &nodes, *a, &g, |gi| gi);
                }
                Op::Silu { a } => {
                    if nodes[a.id].needs_grad {
                        let ga = ensure(&mut grads, a.id, a.numel());
                        for (i, gi) in g.iter().enumerate() {
                            let x = nodes[a.id].data[i];
                            let s = sigmoid(x);
                            ga[i] += *gi * s * (T::one() + x * (T::one() - s));
                        }
                    }
                }
                Op::Softmax { a } => {
                    if nodes[a.id].needs_grad {
                        let ga = ensure(&mut grads, a.id, a.numel());
                        let y = &node.data;
                        for i in 0..a.rows {
                            let row = i * a.cols..(i + 1) * a.cols;
                            let dot = g[row.clone()]
                                .iter()
                                .zip(&y[row.clone()])
                                .fold(T::zero(), |s, (&gi, &yi)| s + gi * yi);
                            for j in row.clone() {
                                ga[j] += (g[j] - dot) * y[j];
                            }
                        }
                    }
                }
                Op::LogSumExp { a } => {
                    if nodes[a.id].needs_grad {
                        let ga = ensure(&mut grads, a.id, a.numel());
                        let xs = &nodes[a.id].data;
                        let mut soft = vec![T::zero(); a.cols];
                        for i in 0..a.rows {
                            softmax_row(&xs[i * a.cols..(i + 1) * a.cols], &mut soft);
                            for j in 0..a.cols {
                                ga[i * a.cols + j] += g[i] * soft[j];
                            }
                        }
                    }
                }
                Op::GroupNorm { x, gamma, beta, groups, stats } => {
                    let channels = x.rows;
                    let per = channels / groups;
                    let cols = x.cols;
                    let group_len = T::of((per * cols) as f64);
                    let xs = &nodes[x.id].data;
                    let gs = &nodes[gamma.id].data;
                    if nodes[beta.id].needs_grad {
                        let gb = ensure(&mut grads, beta.id, channels);
                        for ch in 0..channels {
                            let mut acc = T::zero();
                            for j in 0..cols {
                                acc += g[ch * cols + j];
                            }
                            gb[ch] += acc;
                        }
                    }
                    if nodes[gamma.id].needs_grad {
                        let gg = ensure(&mut grads, gamma.id, channels);
                        for gidx in 0..*groups {
                            let (mean, rstd) = stats[gidx];
                            for c in 0..per {
                                let ch = gidx * per + c;
                                let mut acc = T::zero();
                                for j in 0..cols {
                                    let idx = ch * cols + j;
                                    acc += g[idx] * (xs[idx] - mean) * rstd;
                                }
                                gg[ch] += acc;
                            }
                        }
                    }
                    if nodes[x.id].needs_grad {
                        let gx = ensure(&mut grads, x.id, x.numel());
                        for gidx in 0..*groups {
                            let (mean, rstd) = stats[gidx];
                            // dxhat = g ⊙ gamma (per channel); reduce the two
                            // group means, then the standard affine form.
                            let mut sum_dxhat = T::zero();
                            let mut sum_dxhat_xhat = T::zero();
                            for c in 0..per {
                                let ch = gidx * per + c;
                                for j in 0..cols {
                                    let idx = ch * cols + j;
                                    let dxh = g[idx] * gs[ch];
                                    let xh = (xs[idx] - mean) * rstd;
                                    sum_dxhat += dxh;
                                    sum_dxhat_xhat += dxh * xh;
                                }
                            }
                            let mean_dxhat = sum_dxhat / group_len;
                            let mean_dxhat_xhat = sum_dxhat_xhat / group_len;
                            for c in 0..per {
                                let ch = gidx * per + c;
                                for j in 0..cols {
                                    let idx = ch * cols + j;
                                    let dxh = g[idx] * gs[ch];
                                    let xh = (xs[idx] - mean) * rstd;
                                    gx[idx] += rstd * (dxh - mean_dxhat - xh * mean_dxhat_xhat);
                                }
                            }
                        }
                    }
                }
                Op::Im2col { a, geom } => {
                    if nodes[a.id].needs_grad {
                        let ga = ensure(&mut grads, a.id, a.numel());
                        kernels::col2im_acc(&g, ga, *geom);
                    }
                }
                Op::Upsample2 { a, channels, h, w } => {
                    if nodes[a.id].needs_grad {
                        let ga = ensure(&mut grads, a.id, a.numel());
                        kernels::upsample2_adjoint_acc(&g, ga, *channels, *h, *w);
                    }
                }
                Op::MeanAll { a } => {
                    if nodes[a.id].needs_grad {
                        let ga = ensure(&mut grads, a.id, a.numel());
                        let scale = g[0] / T::of(a.numel() as f64);
                        for gi in ga.iter_mut() {
                            *gi += scale;
                        }
                    }
                }
            }
        }

        // Every differentiable leaf that was reached must have a finite grad.
        for (id, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad {
                if let Some(g) = &grads[id] {
                    if !g.iter().all(|x| x.is_finite()) {
                        return Err(NumericsError::non_finite(format!("gradient of leaf {id}")));
                    }
                }
            }
        }

        Ok(Gradients { grads })
    }
}

/// Gradient table returned by `Tape::backward`, indexed by `Var`.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Gradient for a leaf, shaped like the original tensor.
    pub fn shaped(&self, v: Var, shape: &[usize]) -> Option<Tensor<T>> {
        self.get(v)
            .map(|g| Tensor::new(shape, g.to_vec()).expect("grad length matches leaf"))
    }
}

fn flatten_2d(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (1, *n),
        [r, c] => (*r, *c),
        // Higher-rank tensors ride as (first extent) × (rest): a C×H×W map
        // becomes channels × pixels.
        _ => (shape[0], shape[1..].iter().product()),
    }
}

fn ensure<'a, T: Scalar>(grads: &'a mut [Option<Vec<T>>], id: usize, len: usize) -> &'a mut Vec<T> {
    grads[id].get_or_insert_with(|| vec![T::zero(); len])
}

fn accumulate_into<T: Scalar>(
    grads: &mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    v: Var,
    g: &[T],
    f: impl Fn(T) -> T,
) {
    if nodes[v.id].needs_grad {
        let gv = ensure(grads, v.id, v.numel());
        for (i, &gi) in g.iter().enumerate() {
            gv[i] += f(gi);
        }
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn softmax_row<T: Scalar>(row: &[T], dst: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut denom = T::zero();
    for (d, &v) in dst.iter_mut().zip(row) {
        let e = (v - max).exp();
        *d = e;
        denom += e;
    }
    for d in dst.iter_mut() {
        *d = *d / denom;
    }
}
