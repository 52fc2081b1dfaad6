//! Quantized conv2d and matmul kernels driven through the vector units, and
//! the exact rational reference they are checked against.
//!
//! Kernels are output-stationary: every output element gets its own
//! reduction stream, laid out group by group in packing order.

use num_rational::Rational64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pack::file::PackedModel;
use crate::pack::{pack_codes, PackedTensor, QuantScale};
use crate::qformat::{LayerPrecisionMap, Precision, QCode};
use crate::vexec::{reduce_dot, ExecContext, InstrCount, ReductionStream, StreamGroup, Target, DOT_FRAC_BITS};

/// Single-sample conv geometry. Batches are handled by the caller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

/// One valid kernel tap of an output position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tap {
    pub i: usize,
    pub j: usize,
    pub ih: usize,
    pub iw: usize,
}

impl ConvSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_channels: usize,
        in_h: usize,
        in_w: usize,
        out_channels: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let s = Self { in_channels, in_h, in_w, out_channels, kh, kw, stride, pad };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.in_channels, self.in_h, self.in_w, self.out_channels, self.kh, self.kw, self.stride];
        if dims.contains(&0) {
            return Err(Error::ShapeMismatch(format!("zero dimension in {self:?}")));
        }
        if self.in_h + 2 * self.pad < self.kh || self.in_w + 2 * self.pad < self.kw {
            return Err(Error::ShapeMismatch(format!("kernel larger than padded input in {self:?}")));
        }
        if self.pad >= self.kh.max(self.kw) {
            return Err(Error::ShapeMismatch(format!("padding {} leaves empty windows", self.pad)));
        }
        Ok(())
    }

    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kw) / self.stride + 1
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    pub fn output_len(&self) -> usize {
        self.out_channels * self.out_h() * self.out_w()
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kh * self.kw
    }

    fn valid(o: usize, stride: usize, pad: usize, k: usize, n: usize) -> std::ops::Range<usize> {
        let start = o * stride;
        let lo = pad.saturating_sub(start);
        let hi = k.min((n + pad).saturating_sub(start));
        lo..hi.max(lo)
    }

    /// Kernel taps that land inside the input; padded taps are dropped.
    pub fn taps(&self, oh: usize, ow: usize) -> Vec<Tap> {
        let rows = Self::valid(oh, self.stride, self.pad, self.kh, self.in_h);
        let cols = Self::valid(ow, self.stride, self.pad, self.kw, self.in_w);
        let mut out = Vec::with_capacity(rows.len() * cols.len());
        for i in rows {
            for j in cols.clone() {
                out.push(Tap { i, j, ih: oh * self.stride + i - self.pad, iw: ow * self.stride + j - self.pad });
            }
        }
        out
    }

    pub fn valid_taps(&self, oh: usize, ow: usize) -> usize {
        Self::valid(oh, self.stride, self.pad, self.kh, self.in_h).len() * Self::valid(ow, self.stride, self.pad, self.kw, self.in_w).len()
    }

    fn weight_index(&self, k: usize, c: usize, i: usize, j: usize) -> usize {
        ((k * self.in_channels + c) * self.kh + i) * self.kw + j
    }
}

/// Per output position, the `(channel, flat input index)` pairs it reduces
/// over, channel-major.
pub fn im2col(spec: &ConvSpec) -> Vec<Vec<(usize, usize)>> {
    let mut out = Vec::with_capacity(spec.out_h() * spec.out_w());
    for oh in 0..spec.out_h() {
        for ow in 0..spec.out_w() {
            let taps = spec.taps(oh, ow);
            let mut stream = Vec::with_capacity(taps.len() * spec.in_channels);
            for c in 0..spec.in_channels {
                for t in &taps {
                    stream.push((c, (c * spec.in_h + t.ih) * spec.in_w + t.iw));
                }
            }
            out.push(stream);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatmulSpec {
    pub m: usize,
    pub k: usize,
    pub n: usize,
}

/// Layer geometry as stored in a packed model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerShape {
    Dense { inputs: usize, outputs: usize },
    Conv(ConvSpec),
}

impl LayerShape {
    pub fn in_channels(&self) -> usize {
        match self {
            LayerShape::Dense { inputs, .. } => *inputs,
            LayerShape::Conv(c) => c.in_channels,
        }
    }

    pub fn input_len(&self) -> usize {
        match self {
            LayerShape::Dense { inputs, .. } => *inputs,
            LayerShape::Conv(c) => c.input_len(),
        }
    }

    pub fn output_len(&self) -> usize {
        match self {
            LayerShape::Dense { outputs, .. } => *outputs,
            LayerShape::Conv(c) => c.output_len(),
        }
    }

    /// Channels that carry a bias / affine term.
    pub fn out_channels(&self) -> usize {
        match self {
            LayerShape::Dense { outputs, .. } => *outputs,
            LayerShape::Conv(c) => c.out_channels,
        }
    }

    pub fn weight_elems_per_channel(&self) -> usize {
        match self {
            LayerShape::Dense { outputs, .. } => *outputs,
            LayerShape::Conv(c) => c.out_channels * c.kh * c.kw,
        }
    }

    /// Output channel of a flat per-sample output index.
    pub fn out_channel_of(&self, index: usize) -> usize {
        match self {
            LayerShape::Dense { .. } => index,
            LayerShape::Conv(c) => index / (c.out_h() * c.out_w()),
        }
    }
}

/// Per-output-channel affine folded from batch norm: `y = a*x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedAffine {
    pub scale: Vec<f64>,
    pub bias: Vec<f64>,
}

impl FusedAffine {
    pub fn identity(channels: usize) -> Self {
        Self { scale: vec![1.0; channels], bias: vec![0.0; channels] }
    }

    pub fn bias_only(bias: Vec<f64>) -> Self {
        Self { scale: vec![1.0; bias.len()], bias }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    pub fn apply(&self, channel: usize, x: f64) -> f64 {
        self.scale[channel] * x + self.bias[channel]
    }
}

/// `a = γ/√(σ²+ε̂)`, `b = β − a·μ` per channel.
pub fn fold_batchnorm(gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64], eps: f64) -> Result<FusedAffine> {
    let n = gamma.len();
    if beta.len() != n || mean.len() != n || var.len() != n {
        return Err(Error::ShapeMismatch("batch norm parameters differ in length".into()));
    }
    let mut out = FusedAffine { scale: Vec::with_capacity(n), bias: Vec::with_capacity(n) };
    for c in 0..n {
        let d = var[c] + eps;
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::NonPositiveVariance(d));
        }
        let a = gamma[c] / d.sqrt();
        out.scale.push(a);
        out.bias.push(beta[c] - a * mean[c]);
    }
    Ok(out)
}

/// Re-quantization applied to a layer's outputs, one precision per output
/// element of a sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputQuant {
    pub quant: QuantScale,
    pub precisions: Vec<Precision>,
}

/// What follows the reduction: affine, optional ReLU, optional re-quantization.
#[derive(Debug, Clone, PartialEq)]
pub struct PostOps {
    pub affine: FusedAffine,
    pub relu: bool,
    pub requant: Option<OutputQuant>,
}

impl PostOps {
    pub fn identity(channels: usize) -> Self {
        Self { affine: FusedAffine::identity(channels), relu: false, requant: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    /// Dot products before dequantization, `DOT_FRAC_BITS` fractional bits.
    pub dots: Vec<i64>,
    pub outputs: Vec<f64>,
    pub codes: Option<Vec<QCode>>,
    pub counts: InstrCount,
}

impl InferenceResult {
    pub fn dots_exact(&self) -> Vec<Rational64> {
        self.dots.iter().map(|&d| Rational64::new(d, 1 << DOT_FRAC_BITS)).collect()
    }
}

/// Result of the exact reference: rational dots and the same post-processing.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceResult {
    pub dots: Vec<Rational64>,
    pub outputs: Vec<f64>,
    pub codes: Option<Vec<QCode>>,
}

fn r2f(x: Rational64) -> f64 {
    *x.numer() as f64 / *x.denom() as f64
}

/// Real value of `Σ (sw·qw + ow)(sa·qa + oa)` from exact partial sums.
fn dequantize_dot(dot: Rational64, sum_a: Rational64, sum_w: Rational64, n: usize, aq: QuantScale, wq: QuantScale) -> f64 {
    wq.scale * aq.scale * r2f(dot)
        + wq.scale * aq.offset * r2f(sum_w)
        + wq.offset * aq.scale * r2f(sum_a)
        + n as f64 * wq.offset * aq.offset
}

fn finish(post: &PostOps, channel: usize, index: usize, x: f64, codes: &mut Option<Vec<QCode>>) -> Result<f64> {
    let mut y = post.affine.apply(channel, x);
    if post.relu {
        y = y.max(0.0);
    }
    if let (Some(q), Some(out)) = (&post.requant, codes.as_mut()) {
        out.push(q.quant.quantize(y, q.precisions[index])?);
    }
    Ok(y)
}

fn check_post(post: &PostOps, channels: usize, per_sample: usize) -> Result<()> {
    if post.affine.channels() != channels {
        return Err(Error::ShapeMismatch(format!("affine has {} channels, layer has {channels}", post.affine.channels())));
    }
    if let Some(q) = &post.requant {
        if q.precisions.len() != per_sample {
            return Err(Error::ShapeMismatch(format!("{} output precisions for {per_sample} outputs", q.precisions.len())));
        }
    }
    Ok(())
}

fn check_same_layout(w: &PackedTensor, a: &PackedTensor) -> Result<()> {
    if w.set != a.set || w.permutation != a.permutation || w.boundaries != a.boundaries {
        return Err(Error::MapMismatch("weights and activations packed differently".into()));
    }
    Ok(())
}

fn sum_codes<'a>(codes: impl Iterator<Item = &'a QCode>) -> Rational64 {
    codes.map(|c| c.value()).sum()
}

/// Builds both operand streams of one output, group by group in packing
/// order. `elem(channel)` yields the aligned (activation, weight) pairs.
fn build_streams<I>(w: &PackedTensor, mut elem: impl FnMut(usize) -> I) -> (ReductionStream, ReductionStream)
where
    I: Iterator<Item = (QCode, QCode)>,
{
    let mut sa = ReductionStream::default();
    let mut sw = ReductionStream::default();
    for (p, range) in w.boundaries.ranges(&w.set) {
        if range.is_empty() {
            continue;
        }
        let mut ga = Vec::new();
        let mut gw = Vec::new();
        for pos in range {
            for (x, y) in elem(w.permutation.order()[pos]) {
                ga.push(x);
                gw.push(y);
            }
        }
        sa.groups.push(StreamGroup { precision: p, codes: ga });
        sw.groups.push(StreamGroup { precision: p, codes: gw });
    }
    (sa, sw)
}

/// Packs one sample's activations (`[C, H, W]` or `[features]`) with the
/// weights' layout.
pub fn pack_activations(codes: &[QCode], elems_per_channel: usize, weights: &PackedTensor, quant: QuantScale) -> Result<PackedTensor> {
    let channels = weights.channels();
    if codes.len() != channels * elems_per_channel {
        return Err(Error::ShapeMismatch(format!("{} activation codes for {channels} channels of {elems_per_channel}", codes.len())));
    }
    let per_channel: Vec<Vec<QCode>> = codes.chunks(elems_per_channel.max(1)).map(<[QCode]>::to_vec).collect();
    let map = weights.precision_map()?;
    let map = LayerPrecisionMap::new(map.set(), map.precisions().to_vec(), vec![elems_per_channel; channels])?;
    pack_codes(&per_channel, &map, &weights.permutation, quant)
}

/// Quantizes real activations on each channel's grid.
pub fn quantize_activations(values: &[f64], elems_per_channel: usize, map: &LayerPrecisionMap, quant: QuantScale) -> Result<Vec<QCode>> {
    values.iter().enumerate().map(|(i, &v)| quant.quantize(v, map.precision(i / elems_per_channel.max(1)))).collect()
}

/// One sample through a conv layer. Outputs are laid out `[K, OH, OW]`.
pub fn conv2d_quantized(
    spec: &ConvSpec,
    weights: &PackedTensor,
    acts: &PackedTensor,
    post: &PostOps,
    target: Target,
    ctx: &mut ExecContext,
) -> Result<InferenceResult> {
    spec.validate()?;
    check_same_layout(weights, acts)?;
    if weights.channels() != spec.in_channels
        || weights.elems_per_channel != spec.out_channels * spec.kh * spec.kw
        || acts.elems_per_channel != spec.in_h * spec.in_w
    {
        return Err(Error::ShapeMismatch(format!("packed operands do not match {spec:?}")));
    }
    check_post(post, spec.out_channels, spec.output_len())?;
    let wc = weights.unpack();
    let ac = acts.unpack();
    let before = ctx.counts.clone();
    let mut res = InferenceResult {
        dots: Vec::with_capacity(spec.output_len()),
        outputs: Vec::with_capacity(spec.output_len()),
        codes: post.requant.as_ref().map(|_| Vec::with_capacity(spec.output_len())),
        counts: InstrCount::default(),
    };
    let positions: Vec<Vec<Tap>> =
        (0..spec.out_h()).flat_map(|oh| (0..spec.out_w()).map(move |ow| (oh, ow))).map(|(oh, ow)| spec.taps(oh, ow)).collect();
    for k in 0..spec.out_channels {
        for taps in &positions {
            let (sa, sw) = build_streams(weights, |c| {
                let (ac, wc) = (&ac[c], &wc[c]);
                taps.iter().map(move |t| (ac[t.ih * spec.in_w + t.iw], wc[(k * spec.kh + t.i) * spec.kw + t.j]))
            });
            let dot = reduce_dot(&sa, &sw, target, ctx)?;
            let n = sa.len();
            let sum_a = sum_codes(sa.groups.iter().flat_map(|g| &g.codes));
            let sum_w = sum_codes(sw.groups.iter().flat_map(|g| &g.codes));
            let x = dequantize_dot(dot.to_ratio(), sum_a, sum_w, n, acts.quant, weights.quant);
            let index = res.outputs.len();
            res.outputs.push(finish(post, k, index, x, &mut res.codes)?);
            res.dots.push(dot.value);
        }
    }
    res.counts = counts_since(&before, &ctx.counts);
    Ok(res)
}

fn counts_since(before: &InstrCount, now: &InstrCount) -> InstrCount {
    let mut d = now.clone();
    for (x, y) in d.vmac_cpu.iter_mut().zip(&before.vmac_cpu) {
        *x -= y;
    }
    for (x, y) in d.vmac_gpu.iter_mut().zip(&before.vmac_gpu) {
        *x -= y;
    }
    d.vpadd -= before.vpadd;
    d.vaddv -= before.vaddv;
    d.gpu_reduce -= before.gpu_reduce;
    d
}

/// `A (m×k) · B (k×n)`. Both operands are packed along the shared `k` axis:
/// A's channels are its columns (elements = rows), B's channels its rows.
/// Outputs are row-major `m×n`; the affine is indexed by output column.
#[allow(clippy::needless_range_loop)]
pub fn matmul_quantized(
    spec: &MatmulSpec,
    weights: &PackedTensor,
    acts: &PackedTensor,
    post: &PostOps,
    target: Target,
    ctx: &mut ExecContext,
) -> Result<InferenceResult> {
    check_same_layout(weights, acts)?;
    if weights.channels() != spec.k || weights.elems_per_channel != spec.n || acts.elems_per_channel != spec.m {
        return Err(Error::ShapeMismatch(format!("packed operands do not match {spec:?}")));
    }
    check_post(post, spec.n, spec.m * spec.n)?;
    let wc = weights.unpack();
    let ac = acts.unpack();
    let before = ctx.counts.clone();
    let mut res = InferenceResult {
        dots: Vec::with_capacity(spec.m * spec.n),
        outputs: Vec::with_capacity(spec.m * spec.n),
        codes: post.requant.as_ref().map(|_| Vec::new()),
        counts: InstrCount::default(),
    };
    for r in 0..spec.m {
        for j in 0..spec.n {
            let (sa, sw) = build_streams(weights, |c| std::iter::once((ac[c][r], wc[c][j])));
            let dot = reduce_dot(&sa, &sw, target, ctx)?;
            let sum_a = sum_codes(sa.groups.iter().flat_map(|g| &g.codes));
            let sum_w = sum_codes(sw.groups.iter().flat_map(|g| &g.codes));
            let x = dequantize_dot(dot.to_ratio(), sum_a, sum_w, spec.k, acts.quant, weights.quant);
            let index = res.outputs.len();
            res.outputs.push(finish(post, j, index, x, &mut res.codes)?);
            res.dots.push(dot.value);
        }
    }
    res.counts = counts_since(&before, &ctx.counts);
    Ok(res)
}

/// Naive exact conv of one sample. Weights are `[K, C, kh, kw]`, activations
/// `[C, H, W]`, both in natural channel order.
pub fn reference_conv(
    spec: &ConvSpec,
    weights: &[QCode],
    acts: &[QCode],
    wq: QuantScale,
    aq: QuantScale,
    post: &PostOps,
) -> Result<ReferenceResult> {
    spec.validate()?;
    if weights.len() != spec.weight_len() || acts.len() != spec.input_len() {
        return Err(Error::ShapeMismatch(format!("operands do not match {spec:?}")));
    }
    check_post(post, spec.out_channels, spec.output_len())?;
    let mut res = ReferenceResult { dots: Vec::new(), outputs: Vec::new(), codes: post.requant.as_ref().map(|_| Vec::new()) };
    for k in 0..spec.out_channels {
        for oh in 0..spec.out_h() {
            for ow in 0..spec.out_w() {
                let taps = spec.taps(oh, ow);
                let mut dot = Rational64::from_integer(0);
                let mut sum_a = Rational64::from_integer(0);
                let mut sum_w = Rational64::from_integer(0);
                for c in 0..spec.in_channels {
                    for t in &taps {
                        let a = acts[(c * spec.in_h + t.ih) * spec.in_w + t.iw].value();
                        let w = weights[spec.weight_index(k, c, t.i, t.j)].value();
                        dot += a * w;
                        sum_a += a;
                        sum_w += w;
                    }
                }
                let x = dequantize_dot(dot, sum_a, sum_w, taps.len() * spec.in_channels, aq, wq);
                let index = res.outputs.len();
                res.outputs.push(finish(post, k, index, x, &mut res.codes)?);
                res.dots.push(dot);
            }
        }
    }
    Ok(res)
}

/// Naive exact matmul; `a` is row-major `m×k`, `b` row-major `k×n`.
pub fn reference_matmul(
    spec: &MatmulSpec,
    b: &[QCode],
    a: &[QCode],
    wq: QuantScale,
    aq: QuantScale,
    post: &PostOps,
) -> Result<ReferenceResult> {
    if a.len() != spec.m * spec.k || b.len() != spec.k * spec.n {
        return Err(Error::ShapeMismatch(format!("operands do not match {spec:?}")));
    }
    check_post(post, spec.n, spec.m * spec.n)?;
    let mut res = ReferenceResult { dots: Vec::new(), outputs: Vec::new(), codes: post.requant.as_ref().map(|_| Vec::new()) };
    for r in 0..spec.m {
        for j in 0..spec.n {
            let mut dot = Rational64::from_integer(0);
            let mut sum_a = Rational64::from_integer(0);
            let mut sum_w = Rational64::from_integer(0);
            for c in 0..spec.k {
                let x = a[r * spec.k + c].value();
                let w = b[c * spec.n + j].value();
                dot += x * w;
                sum_a += x;
                sum_w += w;
            }
            let x = dequantize_dot(dot, sum_a, sum_w, spec.k, aq, wq);
            let index = res.outputs.len();
            res.outputs.push(finish(post, j, index, x, &mut res.codes)?);
            res.dots.push(dot);
        }
    }
    Ok(res)
}

/// Result of running a packed model on a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelOutput {
    pub logits: Vec<Vec<f64>>,
    pub predictions: Vec<usize>,
    pub layer_counts: Vec<InstrCount>,
    pub counts: InstrCount,
}

/// Runs every sample through the packed model. Each layer quantizes its input
/// with its own calibrated scale and channel precisions.
pub fn run_model(model: &PackedModel, inputs: &[Vec<f64>], target: Target, ctx: &mut ExecContext) -> Result<ModelOutput> {
    let first = model.layers.first().ok_or(Error::EmptyLayer)?;
    let mut layer_counts = vec![InstrCount::default(); model.layers.len()];
    let mut logits = Vec::with_capacity(inputs.len());
    for x in inputs {
        if x.len() != first.shape.input_len() {
            return Err(Error::ShapeMismatch(format!("sample has {} features, model expects {}", x.len(), first.shape.input_len())));
        }
        let mut cur = x.clone();
        for (li, layer) in model.layers.iter().enumerate() {
            let map = layer.weights.precision_map()?;
            let post = PostOps { affine: layer.affine.clone(), relu: layer.relu, requant: None };
            let res = match layer.shape {
                LayerShape::Dense { inputs, outputs } => {
                    let codes = quantize_activations(&cur, 1, &map, layer.input)?;
                    let acts = pack_activations(&codes, 1, &layer.weights, layer.input)?;
                    matmul_quantized(&MatmulSpec { m: 1, k: inputs, n: outputs }, &layer.weights, &acts, &post, target, ctx)?
                }
                LayerShape::Conv(spec) => {
                    let per = spec.in_h * spec.in_w;
                    let codes = quantize_activations(&cur, per, &map, layer.input)?;
                    let acts = pack_activations(&codes, per, &layer.weights, layer.input)?;
                    conv2d_quantized(&spec, &layer.weights, &acts, &post, target, ctx)?
                }
            };
            layer_counts[li] += &res.counts;
            cur = res.outputs;
        }
        logits.push(cur);
    }
    let predictions = logits.iter().map(|l| argmax(l)).collect();
    let counts = layer_counts.iter().fold(InstrCount::default(), |acc, c| acc + c.clone());
    Ok(ModelOutput { logits, predictions, layer_counts, counts })
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
