//! Tape-based reverse-mode differentiation over dense f64 arrays.
//!
//! Every operation appends a node holding its forward value; [`Tape::backward`]
//! walks the nodes in reverse once and accumulates exact gradients. Shapes are
//! row-major; image tensors use `[batch, height, width, channels]`.

use std::fmt;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvGeom {
    batch: usize,
    in_h: usize,
    in_w: usize,
    in_c: usize,
    out_h: usize,
    out_w: usize,
    out_c: usize,
    k: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.k * self.k * self.in_c
    }

    fn rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }
}

enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Var, cols: Vec<f64>, geom: ConvGeom },
    ChannelAffine { x: Var, gamma: Var, beta: Var },
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows(Var),
    Reshape(Var),
    GatherRows { table: Var, ids: Vec<usize> },
    Mean(Var),
    Sum(Var),
    CrossEntropyRows { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    GruCombine { gi: Var, gh: Var, h: Var, r: Vec<f64>, z: Vec<f64>, n: Vec<f64> },
    StThreshold(Var),
    StArgmax(Var),
    GateRows { x: Var, g: Var },
    WeightedSum { x: Var, weights: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Linear { .. } => "linear",
            Op::Conv2d { .. } => "conv2d",
            Op::ChannelAffine { .. } => "channel_affine",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::SoftmaxRows(_) => "softmax",
            Op::LogSoftmaxRows(_) => "log_softmax",
            Op::ConcatCols(_) => "concat",
            Op::SliceCols { .. } => "slice_cols",
            Op::SliceRows(_) => "slice_rows",
            Op::Reshape(_) => "reshape",
            Op::GatherRows { .. } => "gather_rows",
            Op::Mean(_) => "mean",
            Op::Sum(_) => "sum",
            Op::CrossEntropyRows { .. } => "cross_entropy",
            Op::GruCombine { .. } => "gru",
            Op::StThreshold(_) => "st_threshold",
            Op::StArgmax(_) => "st_argmax",
            Op::GateRows { .. } => "gate_rows",
            Op::WeightedSum { .. } => "weighted_sum",
        }
    }
}

struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, or `None` when no path reaches it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn grad_slot<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

/// `c = a · b + beta · c` for logical shapes a:[m,k], b:[k,n].
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above and strides stay inside them.
    unsafe {
        matrixmultiply::dgemm(
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

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = x - lse;
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "scalar() on shape {:?}", self.shape(v));
        val[0]
    }

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        match *self.shape(v) {
            [r, c] => (r, c),
            ref s => panic!("{}: expected a 2-D operand, got shape {:?}", self.op_name(v), s),
        }
    }

    fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op, parents: &[Var]) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf (a parameter or probe input).
    pub fn leaf(&mut self, value: Vec<f64>, shape: &[usize]) -> Var {
        assert_eq!(
            value.len(),
            shape.iter().product::<usize>(),
            "leaf data length does not match shape {shape:?}"
        );
        self.nodes.push(Node {
            value,
            shape: shape.to_vec(),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Vec<f64>, shape: &[usize]) -> Var {
        let v = self.leaf(value, shape);
        self.nodes[v.0].requires_grad = false;
        v
    }

    /// `x · w + b` for x:[n,k], w:[k,m], b:[m].
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (n, k) = self.rows_cols(x);
        let (wk, m) = self.rows_cols(w);
        assert_eq!(k, wk, "linear: x {:?} incompatible with w {:?}", self.shape(x), self.shape(w));
        let mut out = vec![0.0; n * m];
        if let Some(b) = b {
            assert_eq!(self.shape(b), [m], "linear: bias {:?} for output width {m}", self.shape(b));
            let bias = self.value(b);
            for row in out.chunks_exact_mut(m) {
                row.copy_from_slice(bias);
            }
        }
        gemm(n, k, m, self.value(x), false, self.value(w), false, &mut out, 1.0);
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(out, vec![n, m], Op::Linear { x, w, b }, &parents)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.linear(a, b, None)
    }

    /// Valid (unpadded) stride-1 convolution. x:[B,H,W,C], w:[O,k,k,C], b:[O].
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (batch, in_h, in_w, in_c) = match *self.shape(x) {
            [b, h, w, c] => (b, h, w, c),
            ref s => panic!("conv2d: input must be [B,H,W,C], got {s:?}"),
        };
        let (out_c, k) = match *self.shape(w) {
            [o, kh, kw, c] if kh == kw && c == in_c => (o, kh),
            ref s => panic!("conv2d: kernel {s:?} incompatible with input {:?}", self.shape(x)),
        };
        assert_eq!(self.shape(b), [out_c], "conv2d: bias {:?}", self.shape(b));
        assert!(k <= in_h && k <= in_w, "conv2d: kernel {k} larger than input");
        let geom = ConvGeom {
            batch,
            in_h,
            in_w,
            in_c,
            out_h: in_h - k + 1,
            out_w: in_w - k + 1,
            out_c,
            k,
        };
        let patch = geom.patch();
        let mut cols = vec![0.0; geom.rows() * patch];
        let xv = self.value(x);
        let mut r = 0;
        for bi in 0..batch {
            for oy in 0..geom.out_h {
                for ox in 0..geom.out_w {
                    let dst = &mut cols[r * patch..(r + 1) * patch];
                    for ky in 0..k {
                        let src = ((bi * in_h + oy + ky) * in_w + ox) * in_c;
                        let run = k * in_c;
                        dst[ky * run..(ky + 1) * run].copy_from_slice(&xv[src..src + run]);
                    }
                    r += 1;
                }
            }
        }
        let mut out = vec![0.0; geom.rows() * out_c];
        let bias = self.value(b);
        for row in out.chunks_exact_mut(out_c) {
            row.copy_from_slice(bias);
        }
        gemm(geom.rows(), patch, out_c, &cols, false, self.value(w), true, &mut out, 1.0);
        let shape = vec![batch, geom.out_h, geom.out_w, out_c];
        self.push(out, shape, Op::Conv2d { x, w, b, cols, geom }, &[x, w, b])
    }

    /// Feature-wise affine modulation: `gamma[b,c] * x[b,..,c] + beta[b,c]`.
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let batch = shape[0];
        let c = *shape.last().unwrap();
        assert_eq!(self.shape(gamma), [batch, c], "channel_affine: gamma {:?} vs x {:?}", self.shape(gamma), shape);
        assert_eq!(self.shape(beta), [batch, c], "channel_affine: beta {:?} vs x {:?}", self.shape(beta), shape);
        let per = self.value(x).len() / batch;
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let mut out = vec![0.0; xv.len()];
        for bi in 0..batch {
            let g = &gv[bi * c..(bi + 1) * c];
            let be = &bv[bi * c..(bi + 1) * c];
            for (o, xs) in out[bi * per..(bi + 1) * per]
                .chunks_exact_mut(c)
                .zip(xv[bi * per..(bi + 1) * per].chunks_exact(c))
            {
                for j in 0..c {
                    o[j] = g[j] * xs[j] + be[j];
                }
            }
        }
        self.push(out, shape, Op::ChannelAffine { x, gamma, beta }, &[x, gamma, beta])
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(out, shape, op, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| v * c, Op::Scale(x, c))
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{}: shape mismatch {:?} vs {:?}",
            op.name(),
            self.shape(a),
            self.shape(b)
        );
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (n, c) = self.rows_cols(x);
        let mut out = vec![0.0; n * c];
        for (o, row) in out.chunks_exact_mut(c).zip(self.value(x).chunks_exact(c)) {
            softmax_row(row, o);
        }
        self.push(out, vec![n, c], Op::SoftmaxRows(x), &[x])
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let (n, c) = self.rows_cols(x);
        let mut out = vec![0.0; n * c];
        for (o, row) in out.chunks_exact_mut(c).zip(self.value(x).chunks_exact(c)) {
            log_softmax_row(row, o);
        }
        self.push(out, vec![n, c], Op::LogSoftmaxRows(x), &[x])
    }

    /// Concatenate 2-D operands along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let n = self.rows_cols(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (r, c) = self.rows_cols(p);
                assert_eq!(r, n, "concat: row count {r} != {n}");
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; n * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            for (o, row) in out.chunks_exact_mut(total).zip(self.value(p).chunks_exact(w)) {
                o[offset..offset + w].copy_from_slice(row);
            }
            offset += w;
        }
        self.push(out, vec![n, total], Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Columns `start..start+len` of a 2-D operand.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (n, c) = self.rows_cols(x);
        assert!(start + len <= c, "slice_cols {start}+{len} out of width {c}");
        let out = self
            .value(x)
            .chunks_exact(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        self.push(out, vec![n, len], Op::SliceCols { x, start }, &[x])
    }

    /// First `n` rows (along the leading axis).
    pub fn slice_rows(&mut self, x: Var, n: usize) -> Var {
        let mut shape = self.shape(x).to_vec();
        assert!(n <= shape[0], "slice_rows {n} of {:?}", shape);
        let per = self.value(x).len() / shape[0].max(1);
        shape[0] = n;
        let out = self.value(x)[..n * per].to_vec();
        self.push(out, shape, Op::SliceRows(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.value(x).len(),
            "reshape {:?} -> {:?}",
            self.shape(x),
            shape
        );
        let out = self.value(x).to_vec();
        self.push(out, shape.to_vec(), Op::Reshape(x), &[x])
    }

    /// Embedding lookup: row `ids[i]` of `table` for every i.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let (v, d) = self.rows_cols(table);
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            assert!(i < v, "gather_rows: id {i} out of vocabulary {v}");
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let op = Op::GatherRows {
            table,
            ids: ids.to_vec(),
        };
        self.push(out, vec![ids.len(), d], op, &[table])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        self.push(vec![m], vec![1], Op::Mean(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum::<f64>();
        self.push(vec![s], vec![1], Op::Sum(x), &[x])
    }

    /// `Σ weights[i] · x[i]` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f64]) -> Var {
        assert_eq!(weights.len(), self.value(x).len(), "weighted_sum: {} weights for {:?}", weights.len(), self.shape(x));
        let s = self.value(x).iter().zip(weights).map(|(a, w)| a * w).sum();
        let op = Op::WeightedSum {
            x,
            weights: weights.to_vec(),
        };
        self.push(vec![s], vec![1], op, &[x])
    }

    /// Per-row `-log softmax(logits)[label]`, shape `[n]`.
    pub fn cross_entropy_rows(&mut self, logits: Var, labels: &[usize]) -> Var {
        let (n, c) = self.rows_cols(logits);
        assert_eq!(labels.len(), n, "cross_entropy: {} labels for {n} rows", labels.len());
        let mut probs = vec![0.0; n * c];
        let mut logp = vec![0.0; c];
        let mut out = vec![0.0; n];
        for (i, row) in self.value(logits).chunks_exact(c).enumerate() {
            assert!(labels[i] < c, "cross_entropy: label {} out of {c}", labels[i]);
            log_softmax_row(row, &mut logp);
            out[i] = -logp[labels[i]];
            for (p, l) in probs[i * c..(i + 1) * c].iter_mut().zip(&logp) {
                *p = l.exp();
            }
        }
        let op = Op::CrossEntropyRows {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.push(out, vec![n], op, &[logits])
    }

    /// Scalar cross-entropy of a single logit row against `label`.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Var {
        let c = self.value(logits).len();
        let row = self.reshape(logits, &[1, c]);
        let per_row = self.cross_entropy_rows(row, &[label]);
        self.reshape(per_row, &[1])
    }

    /// GRU state update from input and hidden projections.
    ///
    /// `gi = x·W_i + b_i` and `gh = h·W_h + b_h`, both `[n, 3H]` laid out as
    /// (reset, update, candidate):
    /// `r = σ(gi_r + gh_r)`, `z = σ(gi_z + gh_z)`, `c = tanh(gi_c + r ⊙ gh_c)`,
    /// `h' = (1 - z) ⊙ c + z ⊙ h`.
    pub fn gru_combine(&mut self, gi: Var, gh: Var, h: Var) -> Var {
        let (n, hd) = self.rows_cols(h);
        assert_eq!(self.shape(gi), [n, 3 * hd], "gru: gi {:?} vs h {:?}", self.shape(gi), self.shape(h));
        assert_eq!(self.shape(gh), [n, 3 * hd], "gru: gh {:?} vs h {:?}", self.shape(gh), self.shape(h));
        let (giv, ghv, hv) = (self.value(gi), self.value(gh), self.value(h));
        let mut r = vec![0.0; n * hd];
        let mut z = vec![0.0; n * hd];
        let mut c = vec![0.0; n * hd];
        let mut out = vec![0.0; n * hd];
        for i in 0..n {
            let gi_row = &giv[i * 3 * hd..(i + 1) * 3 * hd];
            let gh_row = &ghv[i * 3 * hd..(i + 1) * 3 * hd];
            for j in 0..hd {
                let k = i * hd + j;
                r[k] = sigmoid(gi_row[j] + gh_row[j]);
                z[k] = sigmoid(gi_row[hd + j] + gh_row[hd + j]);
                c[k] = (gi_row[2 * hd + j] + r[k] * gh_row[2 * hd + j]).tanh();
                out[k] = (1.0 - z[k]) * c[k] + z[k] * hv[k];
            }
        }
        let op = Op::GruCombine {
            gi,
            gh,
            h,
            r,
            z,
            n: c,
        };
        self.push(out, vec![n, hd], op, &[gi, gh, h])
    }

    /// Hard threshold `[σ(score) > 0.5]` with the sigmoid's derivative as
    /// the backward surrogate.
    pub fn straight_through_threshold(&mut self, score: Var) -> Var {
        self.map(
            score,
            |s| if sigmoid(s) > 0.5 { 1.0 } else { 0.0 },
            Op::StThreshold(score),
        )
    }

    /// Per-row one-hot argmax (ties to the lowest index) with the softmax
    /// Jacobian as the backward surrogate.
    pub fn straight_through_argmax(&mut self, logits: Var) -> Var {
        let (n, c) = self.rows_cols(logits);
        let mut out = vec![0.0; n * c];
        for (o, row) in out.chunks_exact_mut(c).zip(self.value(logits).chunks_exact(c)) {
            o[argmax(row)] = 1.0;
        }
        self.push(out, vec![n, c], Op::StArgmax(logits), &[logits])
    }

    /// Row gate: row i of `x` passes unchanged when `g[i] == 1` and is
    /// exactly zero otherwise. Backward treats the gate as a multiplier.
    pub fn gate_rows(&mut self, x: Var, g: Var) -> Var {
        let (n, d) = self.rows_cols(x);
        assert_eq!(self.shape(g), [n, 1], "gate_rows: gate {:?} for x {:?}", self.shape(g), self.shape(x));
        let gv = self.value(g);
        let mut out = vec![0.0; n * d];
        for (i, (o, row)) in out.chunks_exact_mut(d).zip(self.value(x).chunks_exact(d)).enumerate() {
            if gv[i] == 1.0 {
                o.copy_from_slice(row);
            } else {
                assert_eq!(gv[i], 0.0, "gate_rows: gate value {} is not binary", gv[i]);
            }
        }
        self.push(out, vec![n, d], Op::GateRows { x, g }, &[x, g])
    }

    /// Reverse pass from the scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(
            self.nodes[root.0].value.len(),
            1,
            "backward from non-scalar {:?}",
            self.nodes[root.0].shape
        );
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backprop_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.as_slice();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        macro_rules! acc {
            ($v:expr) => {
                grad_slot(&self.nodes, grads, $v)
            };
        }
        match &node.op {
            Op::Leaf => {}
            &Op::Linear { x, w, b } => {
                let (n, k) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let m = self.nodes[w.0].shape[1];
                if let Some(gb) = match b { Some(b) => acc!(b), None => None } {
                    for row in g.chunks_exact(m) {
                        for (a, r) in gb.iter_mut().zip(row) {
                            *a += r;
                        }
                    }
                }
                if wants(w) {
                    let xv = val(x);
                    let gw = acc!(w).unwrap();
                    gemm(k, n, m, xv, true, g, false, gw, 1.0);
                }
                if wants(x) {
                    let wv = val(w);
                    let gx = acc!(x).unwrap();
                    gemm(n, m, k, g, false, wv, true, gx, 1.0);
                }
            }
            Op::Conv2d { x, w, b, cols, geom } => {
                let (x, w, b) = (*x, *w, *b);
                let (rows, patch, oc) = (geom.rows(), geom.patch(), geom.out_c);
                if let Some(gb) = acc!(b) {
                    for row in g.chunks_exact(oc) {
                        for (a, r) in gb.iter_mut().zip(row) {
                            *a += r;
                        }
                    }
                }
                if wants(w) {
                    let gw = acc!(w).unwrap();
                    gemm(oc, rows, patch, g, true, cols, false, gw, 1.0);
                }
                if wants(x) {
                    let mut dcols = vec![0.0; rows * patch];
                    gemm(rows, oc, patch, g, false, val(w), false, &mut dcols, 0.0);
                    let gx = acc!(x).unwrap();
                    let (k, in_w, in_c) = (geom.k, geom.in_w, geom.in_c);
                    let mut r = 0;
                    for bi in 0..geom.batch {
                        for oy in 0..geom.out_h {
                            for ox in 0..geom.out_w {
                                let src = &dcols[r * patch..(r + 1) * patch];
                                for ky in 0..k {
                                    let dst = ((bi * geom.in_h + oy + ky) * in_w + ox) * in_c;
                                    let run = k * in_c;
                                    for (d, s) in gx[dst..dst + run]
                                        .iter_mut()
                                        .zip(&src[ky * run..(ky + 1) * run])
                                    {
                                        *d += s;
                                    }
                                }
                                r += 1;
                            }
                        }
                    }
                }
            }
            &Op::ChannelAffine { x, gamma, beta } => {
                let c = *node.shape.last().unwrap();
                let batch = node.shape[0];
                let per = g.len() / batch;
                if let Some(gbeta) = acc!(beta) {
                    for bi in 0..batch {
                        for row in g[bi * per..(bi + 1) * per].chunks_exact(c) {
                            for j in 0..c {
                                gbeta[bi * c + j] += row[j];
                            }
                        }
                    }
                }
                if wants(gamma) {
                    let xv = val(x);
                    let gg = acc!(gamma).unwrap();
                    for bi in 0..batch {
                        let span = bi * per..(bi + 1) * per;
                        for (grow, xrow) in g[span.clone()].chunks_exact(c).zip(xv[span].chunks_exact(c)) {
                            for j in 0..c {
                                gg[bi * c + j] += grow[j] * xrow[j];
                            }
                        }
                    }
                }
                if wants(x) {
                    let gv = val(gamma);
                    let gx = acc!(x).unwrap();
                    for bi in 0..batch {
                        let gam = &gv[bi * c..(bi + 1) * c];
                        let span = bi * per..(bi + 1) * per;
                        for (dx, grow) in gx[span.clone()].chunks_exact_mut(c).zip(g[span].chunks_exact(c)) {
                            for j in 0..c {
                                dx[j] += grow[j] * gam[j];
                            }
                        }
                    }
                }
            }
            &Op::Tanh(x) => {
                if let Some(gx) = acc!(x) {
                    for ((d, &gy), &y) in gx.iter_mut().zip(g).zip(&node.value) {
                        *d += gy * (1.0 - y * y);
                    }
                }
            }
            &Op::Sigmoid(x) => {
                if let Some(gx) = acc!(x) {
                    for ((d, &gy), &y) in gx.iter_mut().zip(g).zip(&node.value) {
                        *d += gy * y * (1.0 - y);
                    }
                }
            }
            &Op::Relu(x) => {
                let xv = val(x);
                if let Some(gx) = acc!(x) {
                    for ((d, &gy), &xi) in gx.iter_mut().zip(g).zip(xv) {
                        if xi > 0.0 {
                            *d += gy;
                        }
                    }
                }
            }
            &Op::Scale(x, c) => {
                if let Some(gx) = acc!(x) {
                    for (d, &gy) in gx.iter_mut().zip(g) {
                        *d += gy * c;
                    }
                }
            }
            &Op::Add(a, b) | &Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if let Some(ga) = acc!(a) {
                    for (d, &gy) in ga.iter_mut().zip(g) {
                        *d += gy;
                    }
                }
                if let Some(gb) = acc!(b) {
                    for (d, &gy) in gb.iter_mut().zip(g) {
                        *d += sign * gy;
                    }
                }
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                if let Some(ga) = acc!(a) {
                    for ((d, &gy), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *d += gy * y;
                    }
                }
                if let Some(gb) = acc!(b) {
                    for ((d, &gy), &x) in gb.iter_mut().zip(g).zip(av) {
                        *d += gy * x;
                    }
                }
            }
            &Op::SoftmaxRows(x) => {
                let c = node.shape[1];
                if let Some(gx) = acc!(x) {
                    for ((d, gy), s) in gx.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(node.value.chunks_exact(c)) {
                        let dot: f64 = gy.iter().zip(s).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            d[j] += s[j] * (gy[j] - dot);
                        }
                    }
                }
            }
            &Op::LogSoftmaxRows(x) => {
                let c = node.shape[1];
                if let Some(gx) = acc!(x) {
                    for ((d, gy), l) in gx.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(node.value.chunks_exact(c)) {
                        let total: f64 = gy.iter().sum();
                        for j in 0..c {
                            d[j] += gy[j] - l[j].exp() * total;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p.0].shape[1];
                    if let Some(gp) = acc!(p) {
                        for (d, row) in gp.chunks_exact_mut(w).zip(g.chunks_exact(total)) {
                            for (a, b) in d.iter_mut().zip(&row[offset..offset + w]) {
                                *a += b;
                            }
                        }
                    }
                    offset += w;
                }
            }
            &Op::SliceCols { x, start } => {
                let width = self.nodes[x.0].shape[1];
                let len = node.shape[1];
                if let Some(gx) = acc!(x) {
                    for (d, row) in gx.chunks_exact_mut(width).zip(g.chunks_exact(len)) {
                        for (a, b) in d[start..start + len].iter_mut().zip(row) {
                            *a += b;
                        }
                    }
                }
            }
            &Op::SliceRows(x) | &Op::Reshape(x) => {
                if let Some(gx) = acc!(x) {
                    for (a, b) in gx.iter_mut().zip(g) {
                        *a += b;
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                let d = node.shape[1];
                if let Some(gt) = acc!(*table) {
                    for (&id, row) in ids.iter().zip(g.chunks_exact(d)) {
                        for (a, b) in gt[id * d..(id + 1) * d].iter_mut().zip(row) {
                            *a += b;
                        }
                    }
                }
            }
            &Op::Mean(x) => {
                let n = self.nodes[x.0].value.len() as f64;
                if let Some(gx) = acc!(x) {
                    for a in gx.iter_mut() {
                        *a += g[0] / n;
                    }
                }
            }
            &Op::Sum(x) => {
                if let Some(gx) = acc!(x) {
                    for a in gx.iter_mut() {
                        *a += g[0];
                    }
                }
            }
            Op::WeightedSum { x, weights } => {
                if let Some(gx) = acc!(*x) {
                    for (a, w) in gx.iter_mut().zip(weights) {
                        *a += g[0] * w;
                    }
                }
            }
            Op::CrossEntropyRows {
                logits,
                labels,
                probs,
            } => {
                let c = self.nodes[logits.0].shape[1];
                if let Some(gl) = acc!(*logits) {
                    for (i, (d, p)) in gl.chunks_exact_mut(c).zip(probs.chunks_exact(c)).enumerate() {
                        for j in 0..c {
                            let target = if j == labels[i] { 1.0 } else { 0.0 };
                            d[j] += g[i] * (p[j] - target);
                        }
                    }
                }
            }
            Op::GruCombine { gi, gh, h, r, z, n } => {
                let (gi, gh, h) = (*gi, *gh, *h);
                let hd = self.nodes[h.0].shape[1];
                let rows = self.nodes[h.0].shape[0];
                let (ghv, hv) = (val(gh), val(h));
                // Pre-activation gradients, laid out like gi/gh.
                let mut d_in = vec![0.0; rows * 3 * hd];
                let mut d_hid = vec![0.0; rows * 3 * hd];
                let mut d_h = vec![0.0; rows * hd];
                for i in 0..rows {
                    for j in 0..hd {
                        let k = i * hd + j;
                        let gy = g[k];
                        let (rk, zk, nk) = (r[k], z[k], n[k]);
                        let dn = gy * (1.0 - zk);
                        let dz = gy * (hv[k] - nk);
                        d_h[k] = gy * zk;
                        let dn_pre = dn * (1.0 - nk * nk);
                        let ghn = ghv[i * 3 * hd + 2 * hd + j];
                        let dr_pre = dn_pre * ghn * rk * (1.0 - rk);
                        let dz_pre = dz * zk * (1.0 - zk);
                        let base = i * 3 * hd;
                        d_in[base + j] = dr_pre;
                        d_in[base + hd + j] = dz_pre;
                        d_in[base + 2 * hd + j] = dn_pre;
                        d_hid[base + j] = dr_pre;
                        d_hid[base + hd + j] = dz_pre;
                        d_hid[base + 2 * hd + j] = dn_pre * rk;
                    }
                }
                for (v, d) in [(gi, d_in), (gh, d_hid), (h, d_h)] {
                    if let Some(gv) = acc!(v) {
                        for (a, b) in gv.iter_mut().zip(&d) {
                            *a += b;
                        }
                    }
                }
            }
            &Op::StThreshold(s) => {
                let sv = val(s);
                if let Some(gs) = acc!(s) {
                    for ((d, &gy), &x) in gs.iter_mut().zip(g).zip(sv) {
                        let p = sigmoid(x);
                        *d += gy * p * (1.0 - p);
                    }
                }
            }
            &Op::StArgmax(x) => {
                let c = node.shape[1];
                let xv = val(x);
                if let Some(gx) = acc!(x) {
                    let mut s = vec![0.0; c];
                    for ((d, gy), row) in gx.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(xv.chunks_exact(c)) {
                        softmax_row(row, &mut s);
                        let dot: f64 = gy.iter().zip(&s).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            d[j] += s[j] * (gy[j] - dot);
                        }
                    }
                }
            }
            &Op::GateRows { x, g: gate } => {
                let d = node.shape[1];
                let (xv, gv) = (val(x), val(gate));
                if let Some(gx) = acc!(x) {
                    for (i, (dx, gy)) in gx.chunks_exact_mut(d).zip(g.chunks_exact(d)).enumerate() {
                        if gv[i] != 0.0 {
                            for (a, b) in dx.iter_mut().zip(gy) {
                                *a += b * gv[i];
                            }
                        }
                    }
                }
                if let Some(gg) = acc!(gate) {
                    for (i, (gy, row)) in g.chunks_exact(d).zip(xv.chunks_exact(d)).enumerate() {
                        gg[i] += gy.iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
        }
    }
}
