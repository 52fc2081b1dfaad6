//! Two-phase training of small dense/conv models with per-input-channel
//! precision selection.
//!
//! Phase I perturbs each layer's normalized inputs and weights channel-wise by
//! `σ(s)·ε`, where `s` is a temperature-annealed softmax mixture over the
//! precision set. At the end of phase I each channel is snapped to a level and
//! channels are promoted to fill vectors. Phase II fine-tunes the weights with
//! a straight-through estimator on the quantized forward.

pub mod autodiff;
pub mod data;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{run_model, ConvSpec, FusedAffine, LayerShape};
use crate::pack::file::{PackedLayer, PackedModel};
use crate::pack::{group_channels, map2hardware, pack_codes, promote_to_fill, PromotionReport, QuantScale};
use crate::qformat::{
    bpp_of_model, compression_ratio, precision_from_s, quantize_value, sigmoid, LayerPrecisionMap, Precision, PrecisionSet, QCode,
};
use crate::vexec::{vector_capacity, ExecContext, Target};
use autodiff::{softmax3, ChannelAxis, Tape, Tensor, Var};
use data::{Dataset, DatasetSpec};

/// Generator behind every random draw; recorded in reports.
pub const RNG_NAME: &str = "ChaCha8";

/// Softmax max-probability at which a channel counts as a point mass.
pub const POINT_MASS: f64 = 0.99;

const STREAM_INIT: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_BASELINE: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "defaults::lambda")]
    pub lambda: f64,
    #[serde(default = "defaults::tau_final")]
    pub tau_final: f64,
    /// Noisy epochs.
    #[serde(default = "defaults::t1")]
    pub t1: usize,
    /// Epoch at which fine-tuning ends.
    #[serde(default = "defaults::t2")]
    pub t2: usize,
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    /// Step size for the gate logits `z`.
    #[serde(default = "defaults::lr_z")]
    pub lr_z: f64,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    /// Bias the initial gates toward this precision.
    #[serde(default)]
    pub p_init: Option<u32>,
    #[serde(default = "defaults::p_init_bias")]
    pub p_init_bias: f64,
}

mod defaults {
    pub fn lambda() -> f64 {
        2e-3
    }
    pub fn tau_final() -> f64 {
        100.0
    }
    pub fn t1() -> usize {
        30
    }
    pub fn t2() -> usize {
        50
    }
    pub fn lr() -> f64 {
        0.05
    }
    pub fn lr_z() -> f64 {
        0.3
    }
    pub fn weight_decay() -> f64 {
        1e-4
    }
    pub fn batch_size() -> usize {
        32
    }
    pub fn p_init_bias() -> f64 {
        1.0
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: defaults::lambda(),
            tau_final: defaults::tau_final(),
            t1: defaults::t1(),
            t2: defaults::t2(),
            lr: defaults::lr(),
            lr_z: defaults::lr_z(),
            weight_decay: defaults::weight_decay(),
            batch_size: defaults::batch_size(),
            p_init: None,
            p_init_bias: defaults::p_init_bias(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, set: &PrecisionSet) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda {} must be >= 0", self.lambda));
        }
        if !(self.tau_final > 1.0 && self.tau_final.is_finite()) {
            return bad(format!("tau_final {} must be > 1", self.tau_final));
        }
        if self.t1 == 0 || self.t1 >= self.t2 {
            return bad(format!("need 0 < t1 < t2, got t1={} t2={}", self.t1, self.t2));
        }
        for (name, v) in [("lr", self.lr), ("lr_z", self.lr_z)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} {v} must be positive"));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay {} must be >= 0", self.weight_decay));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if let Some(p) = self.p_init {
            let p = Precision::from_bits(p)?;
            if !set.contains(p) {
                return Err(Error::PrecisionNotInSet(p));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum LayerSpec {
    Dense {
        outputs: usize,
    },
    Conv {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        pad: usize,
    },
}

fn one() -> usize {
    1
}

/// Hidden layers; a dense classifier sized to the class count is appended.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default)]
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    pub fn mlp(hidden: &[usize]) -> Self {
        Self { layers: hidden.iter().map(|&outputs| LayerSpec::Dense { outputs }).collect() }
    }
}

/// `τ = τ_final^(t/T1)`.
pub fn anneal_temperature(t: f64, t1: f64, tau_final: f64) -> f64 {
    tau_final.powf(t / t1)
}

/// `s = softmax(τ·z)·v`.
pub fn channel_noise_scale(z: &[f64], tau: f64, set: &PrecisionSet) -> f64 {
    softmax3(z, tau).iter().zip(set.v()).map(|(p, v)| p * v).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyLayer {
    pub shape: LayerShape,
    /// Dense: `[inputs, outputs]`; conv: `[K, C, kh, kw]`. Grid units.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    /// Fixed real scale of one grid unit.
    pub ws: f64,
    pub relu: bool,
}

impl ToyLayer {
    pub fn channels(&self) -> usize {
        self.shape.in_channels()
    }

    pub fn weight_axis(&self) -> ChannelAxis {
        match self.shape {
            LayerShape::Dense { inputs, outputs } => ChannelAxis { inner: outputs, channels: inputs },
            LayerShape::Conv(c) => ChannelAxis { inner: c.kh * c.kw, channels: c.in_channels },
        }
    }

    pub fn input_axis(&self) -> ChannelAxis {
        match self.shape {
            LayerShape::Dense { inputs, .. } => ChannelAxis { inner: 1, channels: inputs },
            LayerShape::Conv(c) => ChannelAxis { inner: c.in_h * c.in_w, channels: c.in_channels },
        }
    }

    fn output_axis(&self) -> ChannelAxis {
        match self.shape {
            LayerShape::Dense { outputs, .. } => ChannelAxis { inner: 1, channels: outputs },
            LayerShape::Conv(c) => ChannelAxis { inner: c.out_h() * c.out_w(), channels: c.out_channels },
        }
    }

    /// Elements one channel contributes to an interior output's reduction.
    pub fn reduction_elems_per_channel(&self) -> usize {
        match self.shape {
            LayerShape::Dense { .. } => 1,
            LayerShape::Conv(c) => c.kh * c.kw,
        }
    }

    /// Weight codes of one channel in packing order.
    fn channel_weights(&self, c: usize) -> Vec<f64> {
        match self.shape {
            LayerShape::Dense { outputs, .. } => self.w[c * outputs..(c + 1) * outputs].to_vec(),
            LayerShape::Conv(s) => {
                let mut out = Vec::with_capacity(s.out_channels * s.kh * s.kw);
                for k in 0..s.out_channels {
                    let base = (k * s.in_channels + c) * s.kh * s.kw;
                    out.extend_from_slice(&self.w[base..base + s.kh * s.kw]);
                }
                out
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub input_shape: Vec<usize>,
    pub layers: Vec<ToyLayer>,
}

impl ToyModel {
    pub fn build(input_shape: &[usize], spec: &ModelSpec, classes: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(STREAM_INIT);
        let mut shape: Vec<usize> = input_shape.to_vec();
        let mut layers = Vec::new();
        let mut specs = spec.layers.clone();
        specs.push(LayerSpec::Dense { outputs: classes });
        let last = specs.len() - 1;
        for (i, ls) in specs.iter().enumerate() {
            let flat: usize = shape.iter().product();
            let lshape = match *ls {
                LayerSpec::Dense { outputs } => {
                    if outputs == 0 {
                        return Err(Error::Config("dense layer with zero outputs".into()));
                    }
                    LayerShape::Dense { inputs: flat, outputs }
                }
                LayerSpec::Conv { out_channels, kernel, stride, pad } => {
                    let [c, h, w] = shape[..] else {
                        return Err(Error::Config(format!("conv layer needs a [C, H, W] input, got {shape:?}")));
                    };
                    let spec =
                        ConvSpec::new(c, h, w, out_channels, kernel, kernel, stride, pad).map_err(|e| Error::Config(e.to_string()))?;
                    LayerShape::Conv(spec)
                }
            };
            let (n_w, fan_in) = match lshape {
                LayerShape::Dense { inputs, outputs } => (inputs * outputs, inputs),
                LayerShape::Conv(c) => (c.weight_len(), c.in_channels * c.kh * c.kw),
            };
            let w = (0..n_w).map(|_| rng.random_range(-1.0..1.0)).collect();
            layers.push(ToyLayer {
                shape: lshape,
                w,
                b: vec![0.0; lshape.out_channels()],
                ws: (6.0 / fan_in as f64).sqrt(),
                relu: i != last,
            });
            shape = match lshape {
                LayerShape::Dense { outputs, .. } => vec![outputs],
                LayerShape::Conv(c) => vec![c.out_channels, c.out_h(), c.out_w()],
            };
        }
        Ok(Self { input_shape: input_shape.to_vec(), layers })
    }

    pub fn classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.shape.output_len())
    }
}

/// Per-layer gate logits, `d_l × 3` row-major, columns in the set's
/// ascending level order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gates {
    pub z: Vec<Vec<f64>>,
}

impl Gates {
    pub fn init(model: &ToyModel, set: &PrecisionSet, cfg: &TrainConfig) -> Result<Self> {
        let bias_col = match cfg.p_init {
            Some(p) => {
                let p = Precision::from_bits(p)?;
                set.levels().iter().position(|&l| l == p)
            }
            None => None,
        };
        let z = model
            .layers
            .iter()
            .map(|l| {
                let mut row = [0.0; 3];
                if let Some(c) = bias_col {
                    row[c] = cfg.p_init_bias;
                }
                row.repeat(l.channels())
            })
            .collect();
        Ok(Self { z })
    }

    pub fn noise_scales(&self, layer: usize, tau: f64, set: &PrecisionSet) -> Vec<f64> {
        self.z[layer].chunks(3).map(|r| channel_noise_scale(r, tau, set)).collect()
    }

    pub fn max_probs(&self, layer: usize, tau: f64) -> Vec<f64> {
        self.z[layer].chunks(3).map(|r| softmax3(r, tau).into_iter().fold(0.0, f64::max)).collect()
    }
}

/// Frozen input quantizer for each layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub input: Vec<QuantScale>,
}

/// Maps the observed `[min, max]` of each layer's input onto the widest grid
/// of the set.
pub fn calibrate(model: &ToyModel, x: &[Vec<f64>], set: &PrecisionSet) -> Result<Calibration> {
    let g = set.highest().grid_max();
    let mut tape = Tape::new();
    let fw = forward(&mut tape, model, &batch_tensor(x, &(0..x.len()).collect::<Vec<_>>()), Mode::Float)?;
    let input = fw
        .inputs
        .iter()
        .map(|&v| {
            let d = &tape.value(v).data;
            let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !(lo.is_finite() && hi.is_finite()) {
                return Err(Error::NonFinite(if lo.is_finite() { hi } else { lo }));
            }
            if hi > lo {
                QuantScale::new((hi - lo) / (2.0 * g), (hi + lo) / 2.0)
            } else {
                QuantScale::new(1.0, lo)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Calibration { input })
}

/// Uniform `[-1, 1]` draws for every perturbed input and weight component.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub act: Vec<Vec<f64>>,
    pub weight: Vec<Vec<f64>>,
}

impl NoiseDraw {
    pub fn sample(model: &ToyModel, batch: usize, rng: &mut impl Rng) -> Self {
        let mut act = Vec::new();
        let mut weight = Vec::new();
        for l in &model.layers {
            act.push((0..batch * l.shape.input_len()).map(|_| rng.random_range(-1.0..=1.0)).collect());
            weight.push((0..l.w.len()).map(|_| rng.random_range(-1.0..=1.0)).collect());
        }
        Self { act, weight }
    }

    pub fn zeros(model: &ToyModel, batch: usize) -> Self {
        Self {
            act: model.layers.iter().map(|l| vec![0.0; batch * l.shape.input_len()]).collect(),
            weight: model.layers.iter().map(|l| vec![0.0; l.w.len()]).collect(),
        }
    }
}

#[derive(Clone, Copy)]
enum Mode<'a> {
    Float,
    Noisy { gates: &'a Gates, tau: f64, set: &'a PrecisionSet, noise: &'a NoiseDraw, calib: &'a Calibration },
    Quantized { maps: &'a [LayerPrecisionMap], calib: &'a Calibration },
}

struct Forward {
    logits: Var,
    inputs: Vec<Var>,
    w: Vec<Var>,
    b: Vec<Var>,
    z: Vec<Var>,
    s: Vec<Var>,
}

fn batch_tensor(x: &[Vec<f64>], idx: &[usize]) -> Tensor {
    let f = x.first().map_or(0, Vec::len);
    let mut data = Vec::with_capacity(idx.len() * f);
    for &i in idx {
        data.extend_from_slice(&x[i]);
    }
    Tensor::new(vec![idx.len(), f], data)
}

fn quantized_weights(layer: &ToyLayer, map: &LayerPrecisionMap) -> Result<Vec<f64>> {
    let axis = layer.weight_axis();
    layer.w.iter().enumerate().map(|(i, &w)| Ok(quantize_value(w, map.precision(axis.of(i)))?.value_f64())).collect()
}

fn forward(tape: &mut Tape, model: &ToyModel, x: &Tensor, mode: Mode<'_>) -> Result<Forward> {
    let mut cur = tape.leaf(x.clone());
    let mut fw = Forward { logits: cur, inputs: vec![], w: vec![], b: vec![], z: vec![], s: vec![] };
    for (l, layer) in model.layers.iter().enumerate() {
        fw.inputs.push(cur);
        let w = tape.leaf(Tensor::new(vec![layer.channels(), layer.w.len() / layer.channels()], layer.w.clone()));
        let b = tape.leaf(Tensor::new(vec![layer.b.len()], layer.b.clone()));
        fw.w.push(w);
        fw.b.push(b);
        let (xin, win) = match mode {
            Mode::Float => (cur, w),
            Mode::Noisy { gates, tau, set, noise, calib } => {
                let z = tape.leaf(Tensor::new(vec![layer.channels(), 3], gates.z[l].clone()));
                let s = tape.mixture(z, tau, set.v());
                fw.z.push(z);
                fw.s.push(s);
                let q = calib.input[l];
                let xn = tape.affine(cur, 1.0 / q.scale, -q.offset / q.scale);
                let xp = tape.channel_noise(xn, s, noise.act[l].clone(), layer.input_axis());
                let xd = tape.affine(xp, q.scale, q.offset);
                let wp = tape.channel_noise(w, s, noise.weight[l].clone(), layer.weight_axis());
                (xd, wp)
            }
            Mode::Quantized { maps, calib } => {
                let q = calib.input[l];
                let map = &maps[l];
                let axis = layer.input_axis();
                let codes = tape
                    .value(cur)
                    .data
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| Ok(q.quantize(v, map.precision(axis.of(i)))?.value_f64()))
                    .collect::<Result<Vec<_>>>()?;
                let xn = tape.affine(cur, 1.0 / q.scale, -q.offset / q.scale);
                let xq = tape.straight_through(xn, codes);
                let xd = tape.affine(xq, q.scale, q.offset);
                let wq = tape.straight_through(w, quantized_weights(layer, map)?);
                (xd, wq)
            }
        };
        let y = match layer.shape {
            LayerShape::Dense { .. } => tape.matmul(xin, win),
            LayerShape::Conv(spec) => tape.conv2d(xin, win, spec),
        };
        let y = tape.affine(y, layer.ws, 0.0);
        let mut y = tape.add_channel(y, b, layer.output_axis());
        if layer.relu {
            y = tape.relu(y);
        }
        cur = y;
    }
    fw.logits = cur;
    Ok(fw)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub task: f64,
    /// `Σ log2(1+e^(−s))` before the `λ` weight.
    pub regularizer: f64,
}

/// Gradients of the phase-I loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Phase1Grads {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub z: Vec<Vec<f64>>,
}

/// Phase-I loss `L(w + σ(s)ε) + λ·Σ log2(1+e^(−s))` and its gradients for a
/// fixed noise draw.
#[allow(clippy::too_many_arguments)]
pub fn phase1_loss(
    model: &ToyModel,
    gates: &Gates,
    set: &PrecisionSet,
    x: &[Vec<f64>],
    y: &[usize],
    tau: f64,
    lambda: f64,
    noise: &NoiseDraw,
    calib: &Calibration,
) -> Result<(LossParts, Phase1Grads)> {
    let mut tape = Tape::new();
    let idx: Vec<usize> = (0..x.len()).collect();
    let fw = forward(&mut tape, model, &batch_tensor(x, &idx), Mode::Noisy { gates, tau, set, noise, calib })?;
    let ce = tape.softmax_ce(fw.logits, y.to_vec());
    let mut reg: Option<Var> = None;
    for &s in &fw.s {
        let r = tape.regularizer(s);
        reg = Some(match reg {
            Some(acc) => tape.add(acc, r),
            None => r,
        });
    }
    let reg = reg.expect("at least one layer");
    let weighted = tape.affine(reg, lambda, 0.0);
    let total = tape.add(ce, weighted);
    let parts = LossParts { total: tape.value(total).data[0], task: tape.value(ce).data[0], regularizer: tape.value(reg).data[0] };
    let g = tape.backward(total);
    let grab = |vs: &[Var], sizes: &dyn Fn(usize) -> usize| -> Vec<Vec<f64>> {
        vs.iter().enumerate().map(|(l, &v)| g.get(v).map_or_else(|| vec![0.0; sizes(l)], <[f64]>::to_vec)).collect()
    };
    let grads = Phase1Grads {
        w: grab(&fw.w, &|l| model.layers[l].w.len()),
        b: grab(&fw.b, &|l| model.layers[l].b.len()),
        z: grab(&fw.z, &|l| gates.z[l].len()),
    };
    Ok((parts, grads))
}

fn step_params(layer: &mut ToyLayer, gw: &[f64], gb: &[f64], cfg: &TrainConfig) {
    for (w, g) in layer.w.iter_mut().zip(gw) {
        *w -= cfg.lr * (g + cfg.weight_decay * *w);
    }
    for (b, g) in layer.b.iter_mut().zip(gb) {
        *b -= cfg.lr * g;
    }
}

/// One phase-I update of `w`, `b` and `z`, followed by the per-channel clip
/// `|w| ≤ 2 − σ(s)`.
#[allow(clippy::too_many_arguments)]
pub fn phase1_step(
    model: &mut ToyModel,
    gates: &mut Gates,
    set: &PrecisionSet,
    x: &[Vec<f64>],
    y: &[usize],
    tau: f64,
    cfg: &TrainConfig,
    calib: &Calibration,
    rng: &mut impl Rng,
) -> Result<LossParts> {
    let noise = NoiseDraw::sample(model, x.len(), rng);
    let (parts, g) = phase1_loss(model, gates, set, x, y, tau, cfg.lambda, &noise, calib)?;
    if !parts.total.is_finite() {
        return Ok(parts);
    }
    for (l, layer) in model.layers.iter_mut().enumerate() {
        step_params(layer, &g.w[l], &g.b[l], cfg);
        for (z, gz) in gates.z[l].iter_mut().zip(&g.z[l]) {
            *z -= cfg.lr_z * gz;
        }
        let bounds: Vec<f64> = gates.noise_scales(l, tau, set).iter().map(|&s| 2.0 - sigmoid(s)).collect();
        let axis = layer.weight_axis();
        for (i, w) in layer.w.iter_mut().enumerate() {
            let b = bounds[axis.of(i)];
            *w = w.clamp(-b, b);
        }
    }
    Ok(parts)
}

/// One straight-through fine-tuning update; the latent weights are clipped to
/// the channel's grid range afterwards.
pub fn phase2_step(
    model: &mut ToyModel,
    maps: &[LayerPrecisionMap],
    x: &[Vec<f64>],
    y: &[usize],
    cfg: &TrainConfig,
    calib: &Calibration,
) -> Result<LossParts> {
    let (parts, gw, gb) = phase2_loss(model, maps, x, y, calib)?;
    if !parts.total.is_finite() {
        return Ok(parts);
    }
    for (l, layer) in model.layers.iter_mut().enumerate() {
        step_params(layer, &gw[l], &gb[l], cfg);
        let axis = layer.weight_axis();
        for (i, w) in layer.w.iter_mut().enumerate() {
            let b = maps[l].precision(axis.of(i)).grid_max();
            *w = w.clamp(-b, b);
        }
    }
    Ok(parts)
}

type LayerGrads = Vec<Vec<f64>>;

/// Quantized-forward loss with straight-through gradients for `w` and `b`.
pub fn phase2_loss(
    model: &ToyModel,
    maps: &[LayerPrecisionMap],
    x: &[Vec<f64>],
    y: &[usize],
    calib: &Calibration,
) -> Result<(LossParts, LayerGrads, LayerGrads)> {
    let mut tape = Tape::new();
    let idx: Vec<usize> = (0..x.len()).collect();
    let fw = forward(&mut tape, model, &batch_tensor(x, &idx), Mode::Quantized { maps, calib })?;
    let ce = tape.softmax_ce(fw.logits, y.to_vec());
    let task = tape.value(ce).data[0];
    let g = tape.backward(ce);
    let gw = fw.w.iter().map(|&v| g.get(v).unwrap_or(&[]).to_vec()).collect();
    let gb = fw.b.iter().map(|&v| g.get(v).unwrap_or(&[]).to_vec()).collect();
    Ok((LossParts { total: task, task, regularizer: 0.0 }, gw, gb))
}

/// Logits of the float, or quantized when `maps` is given, forward.
pub fn predict(model: &ToyModel, x: &[Vec<f64>], quant: Option<(&[LayerPrecisionMap], &Calibration)>) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let idx: Vec<usize> = (0..x.len()).collect();
    let mode = match quant {
        Some((maps, calib)) => Mode::Quantized { maps, calib },
        None => Mode::Float,
    };
    let fw = forward(&mut tape, model, &batch_tensor(x, &idx), mode)?;
    let t = tape.value(fw.logits);
    Ok(t.data.chunks(t.cols()).map(<[f64]>::to_vec).collect())
}

pub fn accuracy(logits: &[Vec<f64>], y: &[usize]) -> f64 {
    let hits = logits.iter().zip(y).filter(|(l, &y)| crate::kernels::argmax(l) == y).count();
    hits as f64 / y.len().max(1) as f64
}

/// Precision choice for one layer's channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// `1 + round(log2(1 + e^(−s)))` before snapping.
    pub raw: Vec<f64>,
    pub snapped: LayerPrecisionMap,
    pub map: LayerPrecisionMap,
    pub promotion: PromotionReport,
}

/// Snaps each channel to the nearest level, then promotes channels to fill
/// the trailing vector of every group.
pub fn assign_precisions(z: &[f64], tau: f64, set: &PrecisionSet, layer: &ToyLayer) -> Result<Assignment> {
    let raw: Vec<f64> = z.chunks(3).map(|r| precision_from_s(channel_noise_scale(r, tau, set))).collect();
    let snapped = map2hardware(&raw, &set.levels())?;
    let counts = vec![layer.shape.weight_elems_per_channel(); raw.len()];
    let snapped = LayerPrecisionMap::new(*set, snapped, counts)?;
    let per = vec![layer.reduction_elems_per_channel(); raw.len()];
    let (map, promotion) = promote_to_fill(&snapped, &per, vector_capacity)?;
    Ok(Assignment { raw, snapped, map, promotion })
}

/// Packs the on-grid weights of a trained model.
pub fn export_packed(
    model: &ToyModel,
    maps: &[LayerPrecisionMap],
    calib: &Calibration,
    config_hash: [u8; 32],
    seed: u64,
) -> Result<PackedModel> {
    let mut layers = Vec::new();
    for (l, layer) in model.layers.iter().enumerate() {
        let map = &maps[l];
        let codes = (0..layer.channels())
            .map(|c| layer.channel_weights(c).into_iter().map(|w| quantize_value(w, map.precision(c))).collect::<Result<Vec<QCode>>>())
            .collect::<Result<Vec<_>>>()?;
        let (perm, _) = group_channels(map);
        let weights = pack_codes(&codes, map, &perm, QuantScale::scale_only(layer.ws)?)?;
        layers.push(PackedLayer {
            shape: layer.shape,
            weights,
            input: calib.input[l],
            affine: FusedAffine::bias_only(layer.b.clone()),
            relu: layer.relu,
        });
    }
    Ok(PackedModel { config_hash, seed, layers })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainJob {
    pub set: PrecisionSet,
    pub seed: u64,
    pub train: TrainConfig,
    pub model: ModelSpec,
    pub dataset: DatasetSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: String,
    pub tau: Option<f64>,
    pub loss: f64,
    pub task_loss: f64,
    pub regularizer: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPointMass {
    pub layer: usize,
    pub channels: usize,
    pub min_max_prob: f64,
    pub mean_max_prob: f64,
    pub point_mass_channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointMassStats {
    pub threshold: f64,
    pub tau: f64,
    pub fraction: f64,
    pub layers: Vec<LayerPointMass>,
    /// Channels whose snapped level differs from the gate argmax.
    pub argmax_mismatches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub rng: String,
    pub seed: u64,
    pub config_hash: String,
    pub precision_set: [u32; 3],
    pub config: TrainJob,
    pub epochs: Vec<EpochRecord>,
    pub baseline_epochs: Vec<EpochRecord>,
    pub baseline_accuracy: f64,
    pub point_mass: PointMassStats,
    pub raw_precisions: Vec<Vec<f64>>,
    pub snapped_precisions: Vec<Vec<u32>>,
    pub precisions: Vec<Vec<u32>>,
    pub promotions: Vec<PromotionReport>,
    /// Test accuracy of the quantized training forward.
    pub quantized_accuracy: f64,
    /// Test accuracy of the packed model through the simulated kernels.
    pub final_accuracy: f64,
    pub bpp: f64,
    pub compression_ratio: f64,
}

pub struct TrainOutcome {
    pub report: TrainReport,
    pub model: ToyModel,
    pub maps: Vec<LayerPrecisionMap>,
    pub calibration: Calibration,
    pub packed: PackedModel,
}

fn check_finite(parts: &LossParts, epoch: usize) -> Result<()> {
    if parts.total.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { epoch, loss: parts.total })
    }
}

fn shuffled_batches(n: usize, batch: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch).map(<[usize]>::to_vec).collect()
}

fn gather(d: &Dataset, idx: &[usize]) -> (Vec<Vec<f64>>, Vec<usize>) {
    (idx.iter().map(|&i| d.x[i].clone()).collect(), idx.iter().map(|&i| d.y[i]).collect())
}

fn mean_parts(acc: &mut LossParts, p: &LossParts, n: usize) {
    acc.total += p.total / n as f64;
    acc.task += p.task / n as f64;
    acc.regularizer += p.regularizer / n as f64;
}

/// Plain float training of the same architecture and initialization.
pub fn train_float(model: &mut ToyModel, cfg: &TrainConfig, train: &Dataset, test: &Dataset, seed: u64) -> Result<Vec<EpochRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_BASELINE);
    let mut records = Vec::new();
    for epoch in 0..cfg.t2 {
        let batches = shuffled_batches(train.len(), cfg.batch_size, &mut rng);
        let mut acc = LossParts { total: 0.0, task: 0.0, regularizer: 0.0 };
        for idx in &batches {
            let (x, y) = gather(train, idx);
            let mut tape = Tape::new();
            let fw = forward(&mut tape, model, &batch_tensor(&x, &(0..x.len()).collect::<Vec<_>>()), Mode::Float)?;
            let ce = tape.softmax_ce(fw.logits, y);
            let loss = tape.value(ce).data[0];
            let parts = LossParts { total: loss, task: loss, regularizer: 0.0 };
            check_finite(&parts, epoch)?;
            let g = tape.backward(ce);
            for (l, layer) in model.layers.iter_mut().enumerate() {
                let gw = g.get(fw.w[l]).unwrap_or(&[]).to_vec();
                let gb = g.get(fw.b[l]).unwrap_or(&[]).to_vec();
                step_params(layer, &gw, &gb, cfg);
            }
            mean_parts(&mut acc, &parts, batches.len());
        }
        records.push(EpochRecord {
            epoch,
            phase: "float".into(),
            tau: None,
            loss: acc.total,
            task_loss: acc.task,
            regularizer: 0.0,
            test_accuracy: accuracy(&predict(model, &test.x, None)?, &test.y),
        });
    }
    Ok(records)
}

/// Runs both phases, the float baseline, packing and simulated inference.
pub fn run_training(job: &TrainJob, train: &Dataset, test: &Dataset, config_hash: [u8; 32]) -> Result<TrainOutcome> {
    let cfg = &job.train;
    let set = &job.set;
    cfg.validate(set)?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::Config("empty train or test split".into()));
    }
    let input_shape = if train.features() == job.dataset.input_shape().iter().product::<usize>() {
        job.dataset.input_shape()
    } else {
        vec![train.features()]
    };
    let init = ToyModel::build(&input_shape, &job.model, train.classes.max(test.classes), job.seed)?;

    let mut baseline = init.clone();
    let baseline_epochs = train_float(&mut baseline, cfg, train, test, job.seed)?;
    let baseline_accuracy = accuracy(&predict(&baseline, &test.x, None)?, &test.y);

    let mut model = init;
    let mut gates = Gates::init(&model, set, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(job.seed);
    rng.set_stream(STREAM_TRAIN);
    let mut epochs = Vec::new();
    let t1 = cfg.t1 as f64;

    for epoch in 0..cfg.t1 {
        let calib = calibrate(&model, &train.x, set)?;
        let batches = shuffled_batches(train.len(), cfg.batch_size, &mut rng);
        let mut acc = LossParts { total: 0.0, task: 0.0, regularizer: 0.0 };
        let mut tau = 1.0;
        for (bi, idx) in batches.iter().enumerate() {
            let (x, y) = gather(train, idx);
            tau = anneal_temperature(epoch as f64 + (bi + 1) as f64 / batches.len() as f64, t1, cfg.tau_final);
            let parts = phase1_step(&mut model, &mut gates, set, &x, &y, tau, cfg, &calib, &mut rng)?;
            check_finite(&parts, epoch)?;
            mean_parts(&mut acc, &parts, batches.len());
        }
        epochs.push(EpochRecord {
            epoch,
            phase: "noisy".into(),
            tau: Some(tau),
            loss: acc.total,
            task_loss: acc.task,
            regularizer: acc.regularizer,
            test_accuracy: accuracy(&predict(&model, &test.x, None)?, &test.y),
        });
    }

    let tau = cfg.tau_final;
    let mut assignments = Vec::new();
    let mut pm_layers = Vec::new();
    let mut mismatches = 0;
    for (l, layer) in model.layers.iter().enumerate() {
        let a = assign_precisions(&gates.z[l], tau, set, layer)?;
        let probs = gates.max_probs(l, tau);
        for (c, row) in gates.z[l].chunks(3).enumerate() {
            let p = softmax3(row, tau);
            let arg = (0..3).fold(0, |b, k| if p[k] > p[b] { k } else { b });
            if set.levels()[arg] != a.snapped.precision(c) {
                mismatches += 1;
            }
        }
        pm_layers.push(LayerPointMass {
            layer: l,
            channels: probs.len(),
            min_max_prob: probs.iter().copied().fold(1.0, f64::min),
            mean_max_prob: probs.iter().sum::<f64>() / probs.len() as f64,
            point_mass_channels: probs.iter().filter(|&&p| p >= POINT_MASS).count(),
        });
        assignments.push(a);
    }
    let total_channels: usize = pm_layers.iter().map(|l| l.channels).sum();
    let point_mass = PointMassStats {
        threshold: POINT_MASS,
        tau,
        fraction: pm_layers.iter().map(|l| l.point_mass_channels).sum::<usize>() as f64 / total_channels as f64,
        layers: pm_layers,
        argmax_mismatches: mismatches,
    };
    let maps: Vec<LayerPrecisionMap> = assignments.iter().map(|a| a.map.clone()).collect();
    let calib = calibrate(&model, &train.x, set)?;

    for epoch in cfg.t1..cfg.t2 {
        let batches = shuffled_batches(train.len(), cfg.batch_size, &mut rng);
        let mut acc = LossParts { total: 0.0, task: 0.0, regularizer: 0.0 };
        for idx in &batches {
            let (x, y) = gather(train, idx);
            let parts = phase2_step(&mut model, &maps, &x, &y, cfg, &calib)?;
            check_finite(&parts, epoch)?;
            mean_parts(&mut acc, &parts, batches.len());
        }
        epochs.push(EpochRecord {
            epoch,
            phase: "finetune".into(),
            tau: None,
            loss: acc.total,
            task_loss: acc.task,
            regularizer: 0.0,
            test_accuracy: accuracy(&predict(&model, &test.x, Some((&maps, &calib)))?, &test.y),
        });
    }

    let quantized_accuracy = accuracy(&predict(&model, &test.x, Some((&maps, &calib)))?, &test.y);
    let packed = export_packed(&model, &maps, &calib, config_hash, job.seed)?;
    let out = run_model(&packed, &test.x, Target::Cpu, &mut ExecContext::new())?;
    let final_accuracy = accuracy(&out.logits, &test.y);
    let bpp = bpp_of_model(&maps)?;
    let bits = |m: &LayerPrecisionMap| m.precisions().iter().map(|p| p.bits()).collect::<Vec<_>>();

    let report = TrainReport {
        rng: RNG_NAME.into(),
        seed: job.seed,
        config_hash: hex::encode(config_hash),
        precision_set: (*set).into(),
        config: job.clone(),
        epochs,
        baseline_epochs,
        baseline_accuracy,
        point_mass,
        raw_precisions: assignments.iter().map(|a| a.raw.clone()).collect(),
        snapped_precisions: assignments.iter().map(|a| bits(&a.snapped)).collect(),
        precisions: maps.iter().map(bits).collect(),
        promotions: assignments.iter().map(|a| a.promotion.clone()).collect(),
        quantized_accuracy,
        final_accuracy,
        bpp,
        compression_ratio: compression_ratio(bpp),
    };
    Ok(TrainOutcome { report, model, maps, calibration: calib, packed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qformat::s_from_precision;

    #[test]
    fn temperature_schedule() {
        assert_eq!(anneal_temperature(30.0, 30.0, 100.0), 100.0);
        assert_eq!(anneal_temperature(0.0, 30.0, 100.0), 1.0);
        assert!((anneal_temperature(15.0, 30.0, 100.0) - 10.0).abs() < 1e-12);
        let mut last = 0.0;
        for t in 0..=30 {
            let tau = anneal_temperature(f64::from(t), 30.0, 100.0);
            assert!(tau > last);
            last = tau;
        }
    }

    #[test]
    fn noise_scale_mixture() {
        let set = PrecisionSet::g124();
        assert!((channel_noise_scale(&[0.0; 3], 1.0, &set) - 1.43016).abs() < 1e-5);
        let s = channel_noise_scale(&[10.0, 0.0, 0.0], 100.0, &set);
        assert!((s - s_from_precision(Precision::One)).abs() < 1e-9);
        assert_eq!(sigmoid(0.0), 0.5);
    }

    #[test]
    fn assignment_from_gates() {
        let set = PrecisionSet::g124();
        let model = ToyModel::build(&[2], &ModelSpec::mlp(&[]), 2, 1).unwrap();
        // s = 0 exactly when z puts all mass on the 2-bit level
        let a = assign_precisions(&[-10.0, 10.0, -10.0, 10.0, -10.0, -10.0], 100.0, &set, &model.layers[0]).unwrap();
        assert_eq!(a.raw, vec![2.0, 1.0]);
        assert_eq!(a.snapped.precisions(), &[Precision::Two, Precision::One]);
        // one-element channels fit into the 2-bit group's free lanes
        assert_eq!(a.map.precisions(), &[Precision::Two, Precision::Two]);
        assert!(crate::pack::group_channels(&a.map).1.present().len() <= 2);
    }

    #[test]
    fn clip_bounds() {
        assert_eq!(Precision::Two.grid_max(), 1.5);
    }

    #[test]
    fn regularizer_with_zero_scale() {
        let set = PrecisionSet::g124();
        let model = ToyModel::build(&[2], &ModelSpec::mlp(&[]), 2, 1).unwrap();
        // find z giving s = 0: put mass on the 2-bit level
        let gates = Gates { z: vec![[-50.0, 50.0, -50.0].repeat(2)] };
        let calib = calibrate(&model, &[vec![1.0, -1.0], vec![-1.0, 1.0]], &set).unwrap();
        let noise = NoiseDraw::zeros(&model, 1);
        let (parts, _) = phase1_loss(&model, &gates, &set, &[vec![0.5, 0.5]], &[0], 1.0, 1.0, &noise, &calib).unwrap();
        assert!((parts.regularizer - 2.0).abs() < 1e-12);
    }

    #[test]
    fn noise_free_matches_plain_backprop() {
        let set = PrecisionSet::g124();
        let model = ToyModel::build(&[2], &ModelSpec::mlp(&[4]), 2, 3).unwrap();
        let gates = Gates::init(&model, &set, &TrainConfig::default()).unwrap();
        let x = vec![vec![0.3, -0.7], vec![-1.2, 0.4]];
        let y = vec![0, 1];
        let calib = calibrate(&model, &x, &set).unwrap();
        let noise = NoiseDraw::zeros(&model, 2);
        let (_, g) = phase1_loss(&model, &gates, &set, &x, &y, 1.0, 0.0, &noise, &calib).unwrap();
        let mut tape = Tape::new();
        let fw = forward(&mut tape, &model, &batch_tensor(&x, &[0, 1]), Mode::Float).unwrap();
        let ce = tape.softmax_ce(fw.logits, y);
        let plain = tape.backward(ce);
        for l in 0..model.layers.len() {
            for (a, b) in g.w[l].iter().zip(plain.get(fw.w[l]).unwrap()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ste_on_grid_forward() {
        let set = PrecisionSet::g124();
        let mut model = ToyModel::build(&[2], &ModelSpec::mlp(&[]), 2, 5).unwrap();
        for w in &mut model.layers[0].w {
            *w = if *w > 0.0 { 0.5 } else { -1.5 };
        }
        let map = LayerPrecisionMap::uniform(set, Precision::Two, vec![2, 2]).unwrap();
        let x = vec![vec![0.2, 0.9]];
        let calib = calibrate(&model, &[vec![-1.0, -1.0], vec![1.0, 1.0]], &set).unwrap();
        let (parts, gw, _) = phase2_loss(&model, std::slice::from_ref(&map), &x, &[1], &calib).unwrap();
        // an on-grid model sees its own weights in the forward
        let logits = predict(&model, &x, Some((std::slice::from_ref(&map), &calib))).unwrap();
        assert!(parts.total.is_finite() && logits[0].len() == 2);
        let before = model.layers[0].w.clone();
        let cfg = TrainConfig { lr: 0.1, ..TrainConfig::default() };
        phase2_step(&mut model, &[map], &x, &[1], &cfg, &calib).unwrap();
        for ((w0, w1), g) in before.iter().zip(&model.layers[0].w).zip(&gw[0]) {
            let expect = (w0 - 0.1 * (g + cfg.weight_decay * w0)).clamp(-1.5, 1.5);
            assert!((w1 - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn config_validation() {
        let set = PrecisionSet::g124();
        assert!(TrainConfig::default().validate(&set).is_ok());
        assert!(TrainConfig { tau_final: 1.0, ..Default::default() }.validate(&set).is_err());
        assert!(TrainConfig { t1: 5, t2: 5, ..Default::default() }.validate(&set).is_err());
        assert!(TrainConfig { lambda: -1.0, ..Default::default() }.validate(&set).is_err());
        assert!(TrainConfig { p_init: Some(8), ..Default::default() }.validate(&set).is_err());
    }
}
