//! Minimal tape-based reverse-mode differentiation over dense row-major
//! tensors, limited to the ops the toy models need.

use crate::kernels::ConvSpec;
use crate::qformat::sigmoid;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape {shape:?}");
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn scalar(x: f64) -> Self {
        Self { shape: vec![], data: vec![x] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.data.len() / self.shape[0].max(1)
    }
}

/// Which channel a flat element belongs to: `(index / inner) % channels`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelAxis {
    pub inner: usize,
    pub channels: usize,
}

impl ChannelAxis {
    pub fn of(&self, index: usize) -> usize {
        (index / self.inner) % self.channels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddChannel(Var, Var, ChannelAxis),
    Add(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    ChannelNoise { x: Var, s: Var, eps: Vec<f64>, axis: ChannelAxis },
    Mixture { z: Var, tau: f64, v: [f64; 3] },
    Regularizer(Var),
    SoftmaxCe { logits: Var, labels: Vec<usize> },
    Conv2d { x: Var, w: Var, spec: ConvSpec },
    Straight(Var),
}

struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t)
    }

    /// `[m,k] · [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.rows(), ta.cols());
        assert_eq!(k, tb.rows(), "matmul inner dims");
        let n = tb.cols();
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..k {
                let x = ta.data[r * k + c];
                let row = &tb.data[c * n..(c + 1) * n];
                for (o, &w) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
                    *o += x * w;
                }
            }
        }
        self.push(Op::MatMul(a, b), Tensor::new(vec![m, n], out))
    }

    /// Adds a per-channel vector along `axis`.
    pub fn add_channel(&mut self, x: Var, b: Var, axis: ChannelAxis) -> Var {
        let (tx, tb) = (self.value(x), self.value(b));
        assert_eq!(tb.len(), axis.channels);
        let data = tx.data.iter().enumerate().map(|(i, &v)| v + tb.data[axis.of(i)]).collect();
        let shape = tx.shape.clone();
        self.push(Op::AddChannel(x, b, axis), Tensor::new(shape, data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.len(), tb.len());
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let shape = ta.shape.clone();
        self.push(Op::Add(a, b), Tensor::new(shape, data))
    }

    /// `a*x + b`; only `a` matters for the gradient.
    pub fn affine(&mut self, x: Var, a: f64, b: f64) -> Var {
        let t = self.value(x);
        let data = t.data.iter().map(|&v| a * v + b).collect();
        let shape = t.shape.clone();
        self.push(Op::Affine(x, a), Tensor::new(shape, data))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data.iter().map(|&v| v.max(0.0)).collect();
        let shape = t.shape.clone();
        self.push(Op::Relu(x), Tensor::new(shape, data))
    }

    /// `x + σ(s_c)·ε` with `c` the element's channel.
    pub fn channel_noise(&mut self, x: Var, s: Var, eps: Vec<f64>, axis: ChannelAxis) -> Var {
        let (tx, ts) = (self.value(x), self.value(s));
        assert_eq!(eps.len(), tx.len());
        assert_eq!(ts.len(), axis.channels);
        let sig: Vec<f64> = ts.data.iter().map(|&s| sigmoid(s)).collect();
        let data = tx.data.iter().zip(&eps).enumerate().map(|(i, (&v, &e))| v + sig[axis.of(i)] * e).collect();
        let shape = tx.shape.clone();
        self.push(Op::ChannelNoise { x, s, eps, axis }, Tensor::new(shape, data))
    }

    /// `s_i = softmax(τ·z_i)·v` for each row of `z` (`[d,3]`).
    pub fn mixture(&mut self, z: Var, tau: f64, v: [f64; 3]) -> Var {
        let tz = self.value(z);
        let d = tz.rows();
        let data = (0..d).map(|i| softmax3(&tz.data[3 * i..3 * i + 3], tau).iter().zip(&v).map(|(p, v)| p * v).sum()).collect();
        self.push(Op::Mixture { z, tau, v }, Tensor::new(vec![d], data))
    }

    /// `Σ log2(1 + e^(−s))`.
    pub fn regularizer(&mut self, s: Var) -> Var {
        let total = self.value(s).data.iter().map(|&s| regularizer_term(s)).sum();
        self.push(Op::Regularizer(s), Tensor::scalar(total))
    }

    /// Mean softmax cross-entropy over rows.
    pub fn softmax_ce(&mut self, logits: Var, labels: Vec<usize>) -> Var {
        let t = self.value(logits);
        let (m, n) = (t.rows(), t.cols());
        assert_eq!(labels.len(), m);
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = &t.data[r * n..(r + 1) * n];
            total += log_sum_exp(row) - row[y];
        }
        self.push(Op::SoftmaxCe { logits, labels }, Tensor::scalar(total / m as f64))
    }

    /// `x` is `[N, C·H·W]`, `w` is `[K, C·kh·kw]`; returns `[N, K·OH·OW]`.
    /// Padded taps contribute nothing.
    pub fn conv2d(&mut self, x: Var, w: Var, spec: ConvSpec) -> Var {
        let (tx, tw) = (self.value(x), self.value(w));
        let n = tx.rows();
        assert_eq!(tx.cols(), spec.input_len());
        assert_eq!(tw.len(), spec.weight_len());
        let (oh, ow) = (spec.out_h(), spec.out_w());
        let mut out = vec![0.0; n * spec.output_len()];
        for b in 0..n {
            let xin = &tx.data[b * spec.input_len()..(b + 1) * spec.input_len()];
            for k in 0..spec.out_channels {
                for y in 0..oh {
                    for x_ in 0..ow {
                        let mut acc = 0.0;
                        for t in spec.taps(y, x_) {
                            for c in 0..spec.in_channels {
                                acc += xin[(c * spec.in_h + t.ih) * spec.in_w + t.iw]
                                    * tw.data[((k * spec.in_channels + c) * spec.kh + t.i) * spec.kw + t.j];
                            }
                        }
                        out[b * spec.output_len() + (k * oh + y) * ow + x_] = acc;
                    }
                }
            }
        }
        self.push(Op::Conv2d { x, w, spec }, Tensor::new(vec![n, spec.output_len()], out))
    }

    /// Forward takes `value`, backward passes the gradient to `x` unchanged.
    pub fn straight_through(&mut self, x: Var, value: Vec<f64>) -> Var {
        let shape = self.value(x).shape.clone();
        self.push(Op::Straight(x), Tensor::new(shape, value))
    }

    /// Gradients of scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Grads {
        let mut g: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        g[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gi) = g[i].clone() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    let mut ga = vec![0.0; m * k];
                    let mut gb = vec![0.0; k * n];
                    for r in 0..m {
                        let go = &gi[r * n..(r + 1) * n];
                        for c in 0..k {
                            let row = &tb.data[c * n..(c + 1) * n];
                            ga[r * k + c] = go.iter().zip(row).map(|(x, y)| x * y).sum();
                            let x = ta.data[r * k + c];
                            for (acc, &o) in gb[c * n..(c + 1) * n].iter_mut().zip(go) {
                                *acc += x * o;
                            }
                        }
                    }
                    accumulate(&mut g, *a, ga);
                    accumulate(&mut g, *b, gb);
                }
                Op::AddChannel(x, b, axis) => {
                    let mut gb = vec![0.0; axis.channels];
                    for (j, &v) in gi.iter().enumerate() {
                        gb[axis.of(j)] += v;
                    }
                    accumulate(&mut g, *b, gb);
                    accumulate(&mut g, *x, gi);
                }
                Op::Add(a, b) => {
                    accumulate(&mut g, *a, gi.clone());
                    accumulate(&mut g, *b, gi);
                }
                Op::Affine(x, a) => accumulate(&mut g, *x, gi.iter().map(|v| v * a).collect()),
                Op::Relu(x) => {
                    let tx = self.value(*x);
                    let gx = gi.iter().zip(&tx.data).map(|(&v, &x)| if x > 0.0 { v } else { 0.0 }).collect();
                    accumulate(&mut g, *x, gx);
                }
                Op::ChannelNoise { x, s, eps, axis } => {
                    let ts = self.value(*s);
                    let mut gs = vec![0.0; axis.channels];
                    for (j, (&v, &e)) in gi.iter().zip(eps).enumerate() {
                        gs[axis.of(j)] += v * e;
                    }
                    for (c, gsc) in gs.iter_mut().enumerate() {
                        let sg = sigmoid(ts.data[c]);
                        *gsc *= sg * (1.0 - sg);
                    }
                    accumulate(&mut g, *s, gs);
                    accumulate(&mut g, *x, gi);
                }
                Op::Mixture { z, tau, v } => {
                    let tz = self.value(*z);
                    let d = tz.rows();
                    let mut gz = vec![0.0; 3 * d];
                    for r in 0..d {
                        let p = softmax3(&tz.data[3 * r..3 * r + 3], *tau);
                        let s: f64 = p.iter().zip(v).map(|(p, v)| p * v).sum();
                        for k in 0..3 {
                            gz[3 * r + k] = gi[r] * tau * p[k] * (v[k] - s);
                        }
                    }
                    accumulate(&mut g, *z, gz);
                }
                Op::Regularizer(s) => {
                    let ts = self.value(*s);
                    let gs = ts.data.iter().map(|&s| gi[0] * regularizer_grad(s)).collect();
                    accumulate(&mut g, *s, gs);
                }
                Op::SoftmaxCe { logits, labels } => {
                    let t = self.value(*logits);
                    let (m, n) = (t.rows(), t.cols());
                    let mut gl = vec![0.0; m * n];
                    for (r, &y) in labels.iter().enumerate() {
                        let row = &t.data[r * n..(r + 1) * n];
                        let lse = log_sum_exp(row);
                        for c in 0..n {
                            let p = (row[c] - lse).exp();
                            gl[r * n + c] = gi[0] * (p - f64::from(u8::from(c == y))) / m as f64;
                        }
                    }
                    accumulate(&mut g, *logits, gl);
                }
                Op::Conv2d { x, w, spec } => {
                    let (tx, tw) = (self.value(*x), self.value(*w));
                    let n = tx.rows();
                    let (oh, ow) = (spec.out_h(), spec.out_w());
                    let mut gx = vec![0.0; tx.len()];
                    let mut gw = vec![0.0; tw.len()];
                    for b in 0..n {
                        let base = b * spec.input_len();
                        for k in 0..spec.out_channels {
                            for y in 0..oh {
                                for x_ in 0..ow {
                                    let go = gi[b * spec.output_len() + (k * oh + y) * ow + x_];
                                    for t in spec.taps(y, x_) {
                                        for c in 0..spec.in_channels {
                                            let xi = base + (c * spec.in_h + t.ih) * spec.in_w + t.iw;
                                            let wi = ((k * spec.in_channels + c) * spec.kh + t.i) * spec.kw + t.j;
                                            gx[xi] += go * tw.data[wi];
                                            gw[wi] += go * tx.data[xi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut g, *x, gx);
                    accumulate(&mut g, *w, gw);
                }
                Op::Straight(x) => accumulate(&mut g, *x, gi),
            }
        }
        Grads { grads: g }
    }
}

fn accumulate(g: &mut [Option<Vec<f64>>], v: Var, add: Vec<f64>) {
    match &mut g[v.0] {
        Some(existing) => {
            for (e, a) in existing.iter_mut().zip(add) {
                *e += a;
            }
        }
        slot => *slot = Some(add),
    }
}

pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

pub fn softmax3(z: &[f64], tau: f64) -> [f64; 3] {
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = [((z[0] - m) * tau).exp(), ((z[1] - m) * tau).exp(), ((z[2] - m) * tau).exp()];
    let sum: f64 = e.iter().sum();
    e.map(|x| x / sum)
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `log2(1 + e^(−s))`, stable for large `|s|`.
pub fn regularizer_term(s: f64) -> f64 {
    crate::qformat::softplus(-s) / std::f64::consts::LN_2
}

/// Derivative of [`regularizer_term`]; strictly negative.
pub fn regularizer_grad(s: f64) -> f64 {
    -sigmoid(-s) / std::f64::consts::LN_2
}
