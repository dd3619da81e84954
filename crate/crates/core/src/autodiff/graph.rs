//! Eager tape: every op computes its value on construction and records
//! enough to replay its adjoint rule during [`Graph::backward`].

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Gradients, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Affine { x: Var, w: Var, b: Var },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Concat(Vec<Var>),
    Narrow { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Dropout { x: Var, mask: Vec<f64> },
    CausalConv1d { x: Var, w: Var, b: Var, dilation: usize },
    LstmCell { x: Var, h: Var, c: Var, wx: Var, wh: Var, b: Var, gates: Vec<f64>, tanh_c: Vec<f64> },
    Mse { pred: Var, target: Var },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "input",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Affine { .. } => "affine",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Concat(_) => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Reshape(_) => "reshape",
            Op::Dropout { .. } => "dropout",
            Op::CausalConv1d { .. } => "causal_conv1d",
            Op::LstmCell { .. } => "lstm_cell",
            Op::Mse { .. } => "mse",
        }
    }
}

struct Node {
    op: Op,
    /// `None` for parameter nodes, whose value lives in the store.
    value: Option<Tensor>,
    requires_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    rng: Option<ChaCha8Rng>,
}

/// `c[m x n] = beta * c + a[m x k] * b[k x n]`, with explicit row/column
/// strides so transposed operands need no copy.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(a.len() >= (m - 1) * a_strides.0 + (k - 1) * a_strides.1 + 1);
    debug_assert!(b.len() >= (k - 1) * b_strides.0 + (n - 1) * b_strides.1 + 1);
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: the asserted extents keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contrib: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
        None => *slot = Some(contrib),
    }
}

fn accumulate_with(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let acc = slot.get_or_insert_with(|| vec![0.0; len]);
    f(acc);
}

impl<'p> Graph<'p> {
    /// Inference graph: dropout is inert.
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            rng: None,
        }
    }

    /// Training graph: dropout draws masks from a generator seeded with `seed`.
    pub fn training(params: &'p ParamStore, seed: u64) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("only parameter nodes lack an owned value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn label(&self, v: Var) -> String {
        format!("#{} {}", v.0, self.nodes[v.0].op.kind())
    }

    fn next_label(&self, kind: &str) -> String {
        format!("#{} {}", self.nodes.len(), kind)
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFiniteValue {
                node: self.next_label(op.kind()),
            });
        }
        self.nodes.push(Node {
            op,
            value: Some(value),
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, tensor: Tensor) -> Result<Var> {
        self.push(Op::Leaf, tensor, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, kind: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                self.next_label(kind),
                format!("operands {:?} ({}) and {:?} ({})", self.shape(a), self.label(a), self.shape(b), self.label(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::from_parts(ta.shape().to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        Tensor::from_parts(ta.shape().to_vec(), ta.data().iter().map(|x| f(*x)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Add(a, b), v, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Sub(a, b), v, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Mul(a, b), v, rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let v = self.map(a, |x| x * factor);
        let rg = self.rg(a);
        self.push(Op::Scale(a, factor), v, rg)
    }

    fn matrix_dims(&self, kind: &str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::shape(
                self.next_label(kind),
                format!("expected a matrix, {} has shape {s:?}", self.label(v)),
            )),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::shape(self.next_label("matmul"), format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), (k, 1), self.value(b).data(), (n, 1), &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatMul(a, b), Tensor::from_parts(vec![m, n], out), rg)
    }

    /// Dense layer `x W + b` with `x: [m, k]`, `W: [k, n]`, `b: [n]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("affine", x)?;
        let (k2, n) = self.matrix_dims("affine", w)?;
        if k != k2 || self.shape(b) != [n] {
            return Err(Error::shape(
                self.next_label("affine"),
                format!("x [{m}, {k}], W [{k2}, {n}], b {:?}", self.shape(b)),
            ));
        }
        let bias = self.value(b).data();
        let mut out: Vec<f64> = (0..m).flat_map(|_| bias.iter().copied()).collect();
        gemm(m, k, n, self.value(x).data(), (k, 1), self.value(w).data(), (n, 1), &mut out, 1.0);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(Op::Affine { x, w, b }, Tensor::from_parts(vec![m, n], out), rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, |x| x.max(0.0));
        let rg = self.rg(a);
        self.push(Op::Relu(a), v, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, sigmoid);
        let rg = self.rg(a);
        self.push(Op::Sigmoid(a), v, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, f64::tanh);
        let rg = self.rg(a);
        self.push(Op::Tanh(a), v, rg)
    }

    /// Concatenates matrices along columns.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape(self.next_label("concat"), "no operands"))?;
        let (m, _) = self.matrix_dims("concat", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix_dims("concat", p)?;
            if r != m {
                return Err(Error::shape(
                    self.next_label("concat"),
                    format!("{} has {r} rows, expected {m}", self.label(p)),
                ));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for row in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[row * w..(row + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Op::Concat(parts.to_vec()), Tensor::from_parts(vec![m, total], out), rg)
    }

    /// `len` consecutive entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(
                self.next_label("narrow"),
                format!("axis {axis} range {start}..{} of {:?}", start + len, shape),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let rg = self.rg(x);
        self.push(Op::Narrow { x, axis, start }, Tensor::from_parts(new_shape, out), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.len() || shape.contains(&0) {
            return Err(Error::shape(
                self.next_label("reshape"),
                format!("{:?} -> {shape:?}", t.shape()),
            ));
        }
        let v = Tensor::from_parts(shape.to_vec(), t.data().to_vec());
        let rg = self.rg(x);
        self.push(Op::Reshape(x), v, rg)
    }

    /// Inverted dropout. Returns `x` itself when `rate == 0` or the graph is
    /// not in training mode.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::param("dropout", format!("rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 || self.rng.is_none() {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let n = self.value(x).len();
        let rng = self.rng.as_mut().expect("training graph");
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let t = self.value(x);
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let v = Tensor::from_parts(t.shape().to_vec(), data);
        let rg = self.rg(x);
        self.push(Op::Dropout { x, mask }, v, rg)
    }

    /// Causal dilated 1-D convolution.
    ///
    /// `x: [batch, c_in, T]`, `w: [c_out, c_in, k]`, `b: [c_out]`. The input
    /// is left-padded with `(k - 1) * dilation` zeros, so output position `t`
    /// reads inputs `t - (k - 1 - j) * dilation` for taps `j = 0..k`.
    pub fn causal_conv1d(&mut self, x: Var, w: Var, b: Var, dilation: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let ok = xs.len() == 3 && ws.len() == 3 && ws[1] == xs[1] && self.shape(b) == [ws[0]] && dilation >= 1;
        if !ok {
            return Err(Error::shape(
                self.next_label("causal_conv1d"),
                format!("x {xs:?}, w {ws:?}, b {:?}, dilation {dilation}", self.shape(b)),
            ));
        }
        let (batch, c_in, t_len) = (xs[0], xs[1], xs[2]);
        let (c_out, k) = (ws[0], ws[2]);
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; batch * c_out * t_len];
        for bi in 0..batch {
            for o in 0..c_out {
                let orow = &mut out[(bi * c_out + o) * t_len..][..t_len];
                orow.iter_mut().for_each(|v| *v = bd[o]);
                for i in 0..c_in {
                    let xrow = &xd[(bi * c_in + i) * t_len..][..t_len];
                    for j in 0..k {
                        let shift = (k - 1 - j) * dilation;
                        if shift >= t_len {
                            continue;
                        }
                        let wv = wd[(o * c_in + i) * k + j];
                        for (ov, xv) in orow[shift..].iter_mut().zip(&xrow[..t_len - shift]) {
                            *ov += wv * xv;
                        }
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(
            Op::CausalConv1d { x, w, b, dilation },
            Tensor::from_parts(vec![batch, c_out, t_len], out),
            rg,
        )
    }

    /// Standard LSTM cell with gate order (input, forget, cell, output).
    ///
    /// `x: [batch, in]`, `h, c: [batch, H]`, `wx: [in, 4H]`, `wh: [H, 4H]`,
    /// `b: [4H]`. Returns `[batch, 2H]` holding the new `h` in the first `H`
    /// columns and the new `c` in the last `H`; see [`Graph::lstm_step`].
    #[allow(clippy::too_many_arguments)]
    pub fn lstm_cell(&mut self, x: Var, h: Var, c: Var, wx: Var, wh: Var, b: Var) -> Result<Var> {
        let (m, input) = self.matrix_dims("lstm_cell", x)?;
        let (mh, hidden) = self.matrix_dims("lstm_cell", h)?;
        let ok = mh == m
            && self.shape(c) == [m, hidden]
            && self.shape(wx) == [input, 4 * hidden]
            && self.shape(wh) == [hidden, 4 * hidden]
            && self.shape(b) == [4 * hidden];
        if !ok {
            return Err(Error::shape(
                self.next_label("lstm_cell"),
                format!(
                    "x {:?}, h {:?}, c {:?}, wx {:?}, wh {:?}, b {:?}",
                    self.shape(x),
                    self.shape(h),
                    self.shape(c),
                    self.shape(wx),
                    self.shape(wh),
                    self.shape(b)
                ),
            ));
        }
        let g4 = 4 * hidden;
        let bias = self.value(b).data();
        let mut gates: Vec<f64> = (0..m).flat_map(|_| bias.iter().copied()).collect();
        gemm(m, input, g4, self.value(x).data(), (input, 1), self.value(wx).data(), (g4, 1), &mut gates, 1.0);
        gemm(m, hidden, g4, self.value(h).data(), (hidden, 1), self.value(wh).data(), (g4, 1), &mut gates, 1.0);
        let c_prev = self.value(c).data();
        let mut out = vec![0.0; m * 2 * hidden];
        let mut tanh_c = vec![0.0; m * hidden];
        for r in 0..m {
            let g = &mut gates[r * g4..(r + 1) * g4];
            for j in 0..hidden {
                g[j] = sigmoid(g[j]);
                g[hidden + j] = sigmoid(g[hidden + j]);
                g[2 * hidden + j] = g[2 * hidden + j].tanh();
                g[3 * hidden + j] = sigmoid(g[3 * hidden + j]);
                let c_new = g[hidden + j] * c_prev[r * hidden + j] + g[j] * g[2 * hidden + j];
                let tc = c_new.tanh();
                tanh_c[r * hidden + j] = tc;
                out[r * 2 * hidden + j] = g[3 * hidden + j] * tc;
                out[r * 2 * hidden + hidden + j] = c_new;
            }
        }
        let rg = [x, h, c, wx, wh, b].iter().any(|&v| self.rg(v));
        self.push(
            Op::LstmCell { x, h, c, wx, wh, b, gates, tanh_c },
            Tensor::from_parts(vec![m, 2 * hidden], out),
            rg,
        )
    }

    /// [`Graph::lstm_cell`] followed by splitting the result into `(h, c)`.
    #[allow(clippy::too_many_arguments)]
    pub fn lstm_step(&mut self, x: Var, h: Var, c: Var, wx: Var, wh: Var, b: Var) -> Result<(Var, Var)> {
        let hidden = self.shape(h)[1];
        let hc = self.lstm_cell(x, h, c, wx, wh, b)?;
        Ok((self.narrow(hc, 1, 0, hidden)?, self.narrow(hc, 1, hidden, hidden)?))
    }

    /// Mean squared error between equally shaped tensors, as a `[1]` scalar.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("mse", pred, target)?;
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let v = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
        let rg = self.rg(pred) || self.rg(target);
        self.push(Op::Mse { pred, target }, Tensor::scalar(v), rg)
    }

    /// Reverse sweep from a scalar `loss`; returns d loss / d p for every
    /// parameter in the store.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                self.label(loss),
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads = Gradients::zeros_like(self.params);
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let out = node.value.as_ref();
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    grads.get_mut(*id).data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                }
                Op::Add(a, b) => {
                    if self.rg(*b) {
                        accumulate(&mut adj[b.0], g.clone());
                    }
                    if self.rg(*a) {
                        accumulate(&mut adj[a.0], g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*b) {
                        accumulate(&mut adj[b.0], g.iter().map(|v| -v).collect());
                    }
                    if self.rg(*a) {
                        accumulate(&mut adj[a.0], g);
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    if self.rg(*a) {
                        accumulate(&mut adj[a.0], g.iter().zip(vb).map(|(g, y)| g * y).collect());
                    }
                    if self.rg(*b) {
                        accumulate(&mut adj[b.0], g.iter().zip(va).map(|(g, x)| g * x).collect());
                    }
                }
                Op::Scale(a, f) => {
                    accumulate(&mut adj[a.0], g.iter().map(|v| v * f).collect());
                }
                Op::MatMul(a, b) => self.matmul_adjoint(*a, *b, &g, &mut adj),
                Op::Affine { x, w, b } => {
                    self.matmul_adjoint(*x, *w, &g, &mut adj);
                    if self.rg(*b) {
                        let n = self.shape(*b)[0];
                        accumulate_with(&mut adj[b.0], n, |acc| {
                            for row in g.chunks_exact(n) {
                                acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                            }
                        });
                    }
                }
                Op::Relu(a) => {
                    let x = self.value(*a).data();
                    accumulate(
                        &mut adj[a.0],
                        g.iter().zip(x).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect(),
                    );
                }
                Op::Sigmoid(a) => {
                    let y = out.expect("owned").data();
                    accumulate(&mut adj[a.0], g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect());
                }
                Op::Tanh(a) => {
                    let y = out.expect("owned").data();
                    accumulate(&mut adj[a.0], g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect());
                }
                Op::Concat(parts) => {
                    let total = out.expect("owned").shape()[1];
                    let m = g.len() / total;
                    let mut offset = 0;
                    for p in parts {
                        let w = self.shape(*p)[1];
                        if self.rg(*p) {
                            let mut part = Vec::with_capacity(m * w);
                            for row in 0..m {
                                part.extend_from_slice(&g[row * total + offset..row * total + offset + w]);
                            }
                            accumulate(&mut adj[p.0], part);
                        }
                        offset += w;
                    }
                }
                Op::Narrow { x, axis, start } => {
                    let shape = self.shape(*x);
                    let len = out.expect("owned").shape()[*axis];
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[*axis + 1..].iter().product();
                    let full = shape[*axis];
                    accumulate_with(&mut adj[x.0], self.value(*x).len(), |acc| {
                        for o in 0..outer {
                            let dst = (o * full + start) * inner;
                            let src = o * len * inner;
                            acc[dst..dst + len * inner]
                                .iter_mut()
                                .zip(&g[src..src + len * inner])
                                .for_each(|(a, v)| *a += v);
                        }
                    });
                }
                Op::Reshape(x) => accumulate(&mut adj[x.0], g),
                Op::Dropout { x, mask } => {
                    accumulate(&mut adj[x.0], g.iter().zip(mask).map(|(g, m)| g * m).collect());
                }
                Op::CausalConv1d { x, w, b, dilation } => {
                    self.conv_adjoint(*x, *w, *b, *dilation, &g, &mut adj);
                }
                Op::LstmCell { x, h, c, wx, wh, b, gates, tanh_c } => {
                    self.lstm_adjoint([*x, *h, *c, *wx, *wh, *b], gates, tanh_c, &g, &mut adj);
                }
                Op::Mse { pred, target } => {
                    let (p, t) = (self.value(*pred).data(), self.value(*target).data());
                    let scale = 2.0 * g[0] / p.len() as f64;
                    if self.rg(*pred) {
                        accumulate(&mut adj[pred.0], p.iter().zip(t).map(|(p, t)| scale * (p - t)).collect());
                    }
                    if self.rg(*target) {
                        accumulate(&mut adj[target.0], p.iter().zip(t).map(|(p, t)| scale * (t - p)).collect());
                    }
                }
            }
        }
        Ok(grads)
    }

    fn matmul_adjoint(&self, a: Var, b: Var, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
        let n = self.shape(b)[1];
        if self.rg(a) {
            // dA = G B^T
            accumulate_with(&mut adj[a.0], m * k, |acc| {
                gemm(m, n, k, g, (n, 1), self.value(b).data(), (1, n), acc, 1.0);
            });
        }
        if self.rg(b) {
            // dB = A^T G
            accumulate_with(&mut adj[b.0], k * n, |acc| {
                gemm(k, m, n, self.value(a).data(), (1, k), g, (n, 1), acc, 1.0);
            });
        }
    }

    fn conv_adjoint(&self, x: Var, w: Var, b: Var, dilation: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let (batch, c_in, t_len) = (xs[0], xs[1], xs[2]);
        let (c_out, k) = (ws[0], ws[2]);
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        if self.rg(b) {
            accumulate_with(&mut adj[b.0], c_out, |acc| {
                for bi in 0..batch {
                    for (o, a) in acc.iter_mut().enumerate() {
                        *a += g[(bi * c_out + o) * t_len..][..t_len].iter().sum::<f64>();
                    }
                }
            });
        }
        if self.rg(w) {
            accumulate_with(&mut adj[w.0], c_out * c_in * k, |acc| {
                for bi in 0..batch {
                    for o in 0..c_out {
                        let grow = &g[(bi * c_out + o) * t_len..][..t_len];
                        for i in 0..c_in {
                            let xrow = &xd[(bi * c_in + i) * t_len..][..t_len];
                            for j in 0..k {
                                let shift = (k - 1 - j) * dilation;
                                if shift >= t_len {
                                    continue;
                                }
                                let dot: f64 = grow[shift..].iter().zip(&xrow[..t_len - shift]).map(|(a, b)| a * b).sum();
                                acc[(o * c_in + i) * k + j] += dot;
                            }
                        }
                    }
                }
            });
        }
        if self.rg(x) {
            accumulate_with(&mut adj[x.0], batch * c_in * t_len, |acc| {
                for bi in 0..batch {
                    for o in 0..c_out {
                        let grow = &g[(bi * c_out + o) * t_len..][..t_len];
                        for i in 0..c_in {
                            let arow = &mut acc[(bi * c_in + i) * t_len..][..t_len];
                            for j in 0..k {
                                let shift = (k - 1 - j) * dilation;
                                if shift >= t_len {
                                    continue;
                                }
                                let wv = wd[(o * c_in + i) * k + j];
                                for (a, gv) in arow[..t_len - shift].iter_mut().zip(&grow[shift..]) {
                                    *a += wv * gv;
                                }
                            }
                        }
                    }
                }
            });
        }
    }

    fn lstm_adjoint(
        &self,
        [x, h, c, wx, wh, b]: [Var; 6],
        gates: &[f64],
        tanh_c: &[f64],
        g: &[f64],
        adj: &mut [Option<Vec<f64>>],
    ) {
        let (m, input) = (self.shape(x)[0], self.shape(x)[1]);
        let hidden = self.shape(h)[1];
        let g4 = 4 * hidden;
        let c_prev = self.value(c).data();
        let mut dz = vec![0.0; m * g4];
        let mut dc_prev = vec![0.0; m * hidden];
        for r in 0..m {
            let gt = &gates[r * g4..(r + 1) * g4];
            for j in 0..hidden {
                let (i_g, f_g, c_g, o_g) = (gt[j], gt[hidden + j], gt[2 * hidden + j], gt[3 * hidden + j]);
                let dh = g[r * 2 * hidden + j];
                let dc_out = g[r * 2 * hidden + hidden + j];
                let tc = tanh_c[r * hidden + j];
                let dc = dc_out + dh * o_g * (1.0 - tc * tc);
                let row = &mut dz[r * g4..(r + 1) * g4];
                row[j] = dc * c_g * i_g * (1.0 - i_g);
                row[hidden + j] = dc * c_prev[r * hidden + j] * f_g * (1.0 - f_g);
                row[2 * hidden + j] = dc * i_g * (1.0 - c_g * c_g);
                row[3 * hidden + j] = dh * tc * o_g * (1.0 - o_g);
                dc_prev[r * hidden + j] = dc * f_g;
            }
        }
        if self.rg(c) {
            accumulate(&mut adj[c.0], dc_prev);
        }
        if self.rg(b) {
            accumulate_with(&mut adj[b.0], g4, |acc| {
                for row in dz.chunks_exact(g4) {
                    acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                }
            });
        }
        if self.rg(wx) {
            accumulate_with(&mut adj[wx.0], input * g4, |acc| {
                gemm(input, m, g4, self.value(x).data(), (1, input), &dz, (g4, 1), acc, 1.0);
            });
        }
        if self.rg(wh) {
            accumulate_with(&mut adj[wh.0], hidden * g4, |acc| {
                gemm(hidden, m, g4, self.value(h).data(), (1, hidden), &dz, (g4, 1), acc, 1.0);
            });
        }
        if self.rg(x) {
            accumulate_with(&mut adj[x.0], m * input, |acc| {
                gemm(m, g4, input, &dz, (g4, 1), self.value(wx).data(), (1, g4), acc, 1.0);
            });
        }
        if self.rg(h) {
            accumulate_with(&mut adj[h.0], m * hidden, |acc| {
                gemm(m, g4, hidden, &dz, (g4, 1), self.value(wh).data(), (1, g4), acc, 1.0);
            });
        }
    }
}

/// Builds a graph with `build`, then differentiates the scalar it returns.
pub fn forward_backward<F>(params: &ParamStore, build: F) -> Result<(f64, Gradients)>
where
    F: FnOnce(&mut Graph) -> Result<Var>,
{
    let mut graph = Graph::new(params);
    let loss = build(&mut graph)?;
    let grads = graph.backward(loss)?;
    Ok((graph.value(loss).data()[0], grads))
}
