//! A single-use reverse-mode tape over 2-D tensors.
//!
//! Nodes are appended in evaluation order, so a reverse sweep visits every
//! consumer before its inputs. Parameters are referenced by index into a
//! [`ParamStore`] rather than copied; their gradients are accumulated into a
//! caller-supplied buffer.

use super::params::ParamStore;
use super::tensor::{matmul, matmul_at, matmul_bt, Tensor};

const LN_EPS: f64 = 1e-5;
const NORM_FLOOR: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    /// Position on the tape, matching the vector returned by `backward`.
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Input,
    Param(usize),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Gather(Var, Vec<usize>),
    Im2Col(Var, usize),
    AvgPool2(Var),
    MeanRows(Var),
    L2Norm(Var, f64),
}

struct Node {
    value: Option<Tensor>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(128),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(p) => &self.params.tensors[p],
            _ => node.value.as_ref().expect("non-parameter node has a value"),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, index: usize) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(index),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = matmul(self.value(a), self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = matmul_bt(self.value(a), self.value(b));
        self.push(v, Op::MatMulBt(a, b))
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let mut v = self.value(a).clone();
        let b = self.value(bias);
        assert_eq!(b.data.len(), v.cols, "bias width mismatch");
        for r in 0..v.rows {
            for (x, y) in v.row_mut(r).iter_mut().zip(&b.data) {
                *x += y;
            }
        }
        self.push(v, Op::AddBias(a, bias))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let mut v = self.value(a).clone();
        v.scale(c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for x in &mut v.data {
            *x = gelu(*x);
        }
        self.push(v, Op::Gelu(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let n = xv.cols as f64;
        let mut xhat = xv.clone();
        let mut out = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.rows);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            let xr = xhat.row_mut(r);
            for (h, v) in xr.iter_mut().zip(row) {
                *h = (v - mean) * is;
            }
            let xr = xhat.row(r).to_vec();
            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = g.data[c] * xr[c] + b.data[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for r in 0..v.rows {
            let row = v.row_mut(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let t = self.value(p);
                assert_eq!(t.rows, rows, "concat row mismatch");
                out.data[r * cols + off..r * cols + off + t.cols].copy_from_slice(t.row(r));
                off += t.cols;
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        let mut out = Tensor::zeros(t.rows, len);
        for r in 0..t.rows {
            out.row_mut(r)
                .copy_from_slice(&t.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols(a, start))
    }

    /// Embedding lookup: row `i` of the output is row `idx[i]` of `table`.
    pub fn gather(&mut self, table: Var, idx: Vec<usize>) -> Var {
        let t = self.value(table);
        let mut out = Tensor::zeros(idx.len(), t.cols);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(i));
        }
        self.push(out, Op::Gather(table, idx))
    }

    /// Windows of `k` consecutive rows (zero beyond either end), centred on
    /// each row and flattened, so a 1-D convolution becomes one product.
    pub fn im2col(&mut self, a: Var, k: usize) -> Var {
        let t = self.value(a);
        let (l, c) = (t.rows, t.cols);
        let half = k / 2;
        let mut out = Tensor::zeros(l, k * c);
        for i in 0..l {
            for j in 0..k {
                let src = i + j;
                if src < half || src - half >= l {
                    continue;
                }
                let s = src - half;
                out.data[i * k * c + j * c..i * k * c + (j + 1) * c].copy_from_slice(t.row(s));
            }
        }
        self.push(out, Op::Im2Col(a, k))
    }

    /// Averages rows in pairs; a trailing odd row passes through.
    pub fn avg_pool2(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let rows = t.rows.div_ceil(2);
        let mut out = Tensor::zeros(rows, t.cols);
        for r in 0..rows {
            let (i, j) = (2 * r, 2 * r + 1);
            let o = out.row_mut(r);
            if j < t.rows {
                for ((o, x), y) in o.iter_mut().zip(t.row(i)).zip(t.row(j)) {
                    *o = 0.5 * (x + y);
                }
            } else {
                o.copy_from_slice(t.row(i));
            }
        }
        self.push(out, Op::AvgPool2(a))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = Tensor::zeros(1, t.cols);
        for r in 0..t.rows {
            for (o, x) in out.data.iter_mut().zip(t.row(r)) {
                *o += x;
            }
        }
        let n = t.rows as f64;
        for o in &mut out.data {
            *o /= n;
        }
        self.push(out, Op::MeanRows(a))
    }

    /// Scales a `1 × n` row to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let norm = t
            .data
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
            .max(NORM_FLOOR);
        let mut out = t.clone();
        out.scale(1.0 / norm);
        self.push(out, Op::L2Norm(a, norm))
    }

    /// Propagates `seed` (the gradient of some scalar with respect to
    /// `out`) back through the tape. Parameter gradients are added into
    /// `param_grads`; the returned vector holds every node's gradient so
    /// callers can read gradients of inputs.
    pub fn backward(
        &self,
        out: Var,
        seed: Tensor,
        param_grads: &mut [Tensor],
    ) -> Vec<Option<Tensor>> {
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[out.0] = Some(seed);

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(p) => param_grads[*p].add_assign(&g),
                Op::MatMul(a, b) => {
                    let ga = matmul_bt(&g, self.value(*b));
                    let gb = matmul_at(self.value(*a), &g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulBt(a, b) => {
                    let ga = matmul(&g, self.value(*b));
                    let gb = matmul_at(&g, self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddBias(a, bias) => {
                    let mut gb = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (o, x) in gb.data.iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    let bshape = self.value(*bias).shape();
                    gb.rows = bshape[0];
                    gb.cols = bshape[1];
                    acc(&mut grads, *bias, gb);
                    acc(&mut grads, *a, g.clone());
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g.clone());
                }
                Op::Scale(a, c) => {
                    let mut ga = g.clone();
                    ga.scale(*c);
                    acc(&mut grads, *a, ga);
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let mut ga = g.clone();
                    for (o, xv) in ga.data.iter_mut().zip(&x.data) {
                        *o *= gelu_grad(*xv);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gain);
                    let cols = g.cols;
                    let n = cols as f64;
                    let mut gg = Tensor::zeros(1, cols);
                    let mut gbias = Tensor::zeros(1, cols);
                    let mut gx = Tensor::zeros(g.rows, cols);
                    for r in 0..g.rows {
                        let gr = g.row(r);
                        let hr = xhat.row(r);
                        let mut dh = vec![0.0; cols];
                        for c in 0..cols {
                            gg.data[c] += gr[c] * hr[c];
                            gbias.data[c] += gr[c];
                            dh[c] = gr[c] * gv.data[c];
                        }
                        let m1 = dh.iter().sum::<f64>() / n;
                        let m2 = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / n;
                        for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = inv_std[r] * (dh[c] - m1 - hr[c] * m2);
                        }
                    }
                    let gs = self.value(*gain).shape();
                    gg.rows = gs[0];
                    gg.cols = gs[1];
                    gbias.rows = gs[0];
                    gbias.cols = gs[1];
                    acc(&mut grads, *bias, gbias);
                    acc(&mut grads, *gain, gg);
                    acc(&mut grads, *x, gx);
                }
                Op::SoftmaxRows(a) => {
                    let y = node.value.as_ref().expect("softmax value");
                    let mut ga = Tensor::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        let (gr, yr) = (g.row(r), y.row(r));
                        let s: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for (c, o) in ga.row_mut(r).iter_mut().enumerate() {
                            *o = yr[c] * (gr[c] - s);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    let mut pieces = Vec::with_capacity(parts.len());
                    for &p in parts {
                        let w = self.value(p).cols;
                        let mut gp = Tensor::zeros(g.rows, w);
                        for r in 0..g.rows {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        pieces.push((p, gp));
                        off += w;
                    }
                    for (p, gp) in pieces.into_iter().rev() {
                        acc(&mut grads, p, gp);
                    }
                }
                Op::SliceCols(a, start) => {
                    let src = self.value(*a);
                    let mut ga = Tensor::zeros(src.rows, src.cols);
                    for r in 0..g.rows {
                        ga.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Gather(table, idx) => {
                    let t = self.value(*table);
                    let mut gt = Tensor::zeros(t.rows, t.cols);
                    for (r, &ix) in idx.iter().enumerate() {
                        for (o, x) in gt.row_mut(ix).iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    acc(&mut grads, *table, gt);
                }
                Op::Im2Col(a, k) => {
                    let src = self.value(*a);
                    let (l, c) = (src.rows, src.cols);
                    let half = k / 2;
                    let mut ga = Tensor::zeros(l, c);
                    for i in 0..l {
                        for j in 0..*k {
                            let s = i + j;
                            if s < half || s - half >= l {
                                continue;
                            }
                            let s = s - half;
                            let gr = &g.data[i * k * c + j * c..i * k * c + (j + 1) * c];
                            for (o, x) in ga.row_mut(s).iter_mut().zip(gr) {
                                *o += x;
                            }
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::AvgPool2(a) => {
                    let src = self.value(*a);
                    let mut ga = Tensor::zeros(src.rows, src.cols);
                    for r in 0..g.rows {
                        let (i, j) = (2 * r, 2 * r + 1);
                        let w = if j < src.rows { 0.5 } else { 1.0 };
                        for (o, x) in ga.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o += w * x;
                        }
                        if j < src.rows {
                            for (o, x) in ga.row_mut(j).iter_mut().zip(g.row(r)) {
                                *o += w * x;
                            }
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::MeanRows(a) => {
                    let src = self.value(*a);
                    let n = src.rows as f64;
                    let mut ga = Tensor::zeros(src.rows, src.cols);
                    for r in 0..src.rows {
                        for (o, x) in ga.row_mut(r).iter_mut().zip(&g.data) {
                            *o = x / n;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::L2Norm(a, norm) => {
                    let y = node.value.as_ref().expect("normalized value");
                    let yg: f64 = y.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
                    let mut ga = g.clone();
                    for (o, yv) in ga.data.iter_mut().zip(&y.data) {
                        *o = (*o - yv * yg) / norm;
                    }
                    acc(&mut grads, *a, ga);
                }
            }
            grads[i] = Some(g);
        }
        grads
    }
}
