//! Float reference runtime: executes any graph in f32 (production) or f64
//! (gradient checking), optionally with fake quantization inserted.

use std::collections::{BTreeMap, HashMap};

use indexmap::IndexMap;

use crate::error::{shape_err, Error, Result};
use crate::ir::shape::{infer_shapes, transposed_pad, window_geometry};
use crate::ir::{ActivationKind, Graph, LayerParams, Op, Weights};
use crate::quant::fake::{fake_quant_slice, grid_round_slice, is_quant_point, QuantTable};
use crate::rng::Rng;
use crate::tensor::{DType, Real, Tensor};

pub(crate) mod kernels;

use kernels::{ConvGeom, PoolGeom, TConvGeom};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Inference,
    Training,
}

pub struct ForwardOptions<'a> {
    pub mode: Mode,
    /// Dropout randomness; required in training mode when the graph drops.
    pub rng: Option<&'a mut Rng>,
    pub fake_quant: Option<&'a QuantTable>,
    /// Replace rounding by plain clipping in fake-quant (the function whose
    /// derivative the straight-through estimator reports).
    pub ste_surrogate: bool,
    /// Keep every intermediate in the cache. Inference callers that only
    /// want the output can turn this off to free buffers at last use.
    pub keep_intermediates: bool,
}

impl Default for ForwardOptions<'_> {
    fn default() -> Self {
        ForwardOptions { mode: Mode::Inference, rng: None, fake_quant: None, ste_surrogate: false, keep_intermediates: true }
    }
}

/// Everything a backward pass needs from a forward pass.
///
/// Borrows the weights it was computed with, so parameters cannot change
/// underneath a pending backward pass.
#[derive(Debug)]
pub struct ActivationCache<'w> {
    mode: Mode,
    dtype: DType,
    fingerprint: u64,
    pub outputs: IndexMap<String, Tensor>,
    pub dropout_masks: BTreeMap<String, Vec<bool>>,
    pub(crate) argmax: BTreeMap<String, Vec<u32>>,
    pub(crate) act_pass: BTreeMap<String, Vec<bool>>,
    pub(crate) weight_pass: BTreeMap<String, Vec<bool>>,
    pub(crate) effective: BTreeMap<String, LayerParams>,
    pub(crate) weights: &'w Weights,
}

impl<'w> ActivationCache<'w> {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn output(&self, id: &str) -> Option<&Tensor> {
        self.outputs.get(id)
    }

    /// Parameters as used in the forward pass (fake-quantized under QAT).
    pub(crate) fn params(&self, id: &str) -> Option<&LayerParams> {
        self.effective.get(id).or_else(|| self.weights.get(id))
    }
}

pub fn forward<'w>(
    g: &Graph,
    weights: &'w Weights,
    input: &Tensor,
    mode: Mode,
    rng: Option<&mut Rng>,
) -> Result<(Tensor, ActivationCache<'w>)> {
    forward_with(g, weights, input, ForwardOptions { mode, rng, ..Default::default() })
}

/// Runs the graph; the element type follows the input (f32 or f64).
pub fn forward_with<'w>(
    g: &Graph,
    weights: &'w Weights,
    input: &Tensor,
    opts: ForwardOptions<'_>,
) -> Result<(Tensor, ActivationCache<'w>)> {
    match input.dtype() {
        DType::F32 => run::<f32>(g, weights, input, opts),
        DType::F64 => run::<f64>(g, weights, input, opts),
        DType::I8 => Err(Error::Argument("int8 inputs run through quant::forward_int8".into())),
    }
}

/// Inference-mode f32 forward returning only the output.
pub fn predict(g: &Graph, weights: &Weights, input: &Tensor) -> Result<Tensor> {
    let opts = ForwardOptions { keep_intermediates: false, ..Default::default() };
    Ok(forward_with(g, weights, &input.to_f32(), opts)?.0)
}

/// Inference with fake quantization at every quantized tensor.
pub fn predict_fake_quant(g: &Graph, weights: &Weights, input: &Tensor, table: &QuantTable) -> Result<Tensor> {
    let opts = ForwardOptions { keep_intermediates: false, fake_quant: Some(table), ..Default::default() };
    Ok(forward_with(g, weights, input, opts)?.0)
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    let y = T::one() / (T::one() + (-x).exp());
    // keep probabilities in the open interval even when exp saturates
    y.max(T::min_positive_value()).min(T::one() - T::epsilon() / T::of(2.0))
}

pub(crate) fn conv_geom(op: &Op, input: &[usize], output: &[usize]) -> Result<ConvGeom> {
    let Op::Conv2D(p) = op else { unreachable!() };
    let (_, pad_top) = window_geometry(input[1], p.kernel_h, p.stride, p.padding)?;
    let (_, pad_left) = window_geometry(input[2], p.kernel_w, p.stride, p.padding)?;
    Ok(ConvGeom {
        ih: input[1],
        iw: input[2],
        ic: input[3],
        oh: output[1],
        ow: output[2],
        oc: output[3],
        kh: p.kernel_h,
        kw: p.kernel_w,
        sh: p.stride,
        sw: p.stride,
        pad_top,
        pad_left,
    })
}

pub(crate) fn tconv_geom(op: &Op, input: &[usize]) -> TConvGeom {
    let Op::TransposedConv2D(p) = op else { unreachable!() };
    TConvGeom {
        ih: input[1],
        iw: input[2],
        ic: input[3],
        oc: p.out_channels,
        kh: p.kernel_h,
        kw: p.kernel_w,
        stride: p.stride,
        pad: transposed_pad(p.kernel_h.max(p.kernel_w), p.stride),
    }
}

pub(crate) fn pool_geom(op: &Op, input: &[usize], output: &[usize]) -> Result<PoolGeom> {
    let Op::MaxPool2D(p) = op else { unreachable!() };
    let (_, pad_top) = window_geometry(input[1], p.pool_h, p.stride_h, p.padding)?;
    let (_, pad_left) = window_geometry(input[2], p.pool_w, p.stride_w, p.padding)?;
    Ok(PoolGeom {
        ih: input[1],
        iw: input[2],
        c: input[3],
        oh: output[1],
        ow: output[2],
        ph: p.pool_h,
        pw: p.pool_w,
        sh: p.stride_h,
        sw: p.stride_w,
        pad_top,
        pad_left,
    })
}

/// Interleaves channel blocks of several NHWC maps with equal H, W.
pub(crate) fn concat_channels<T: Copy>(parts: &[(&[T], usize)], pixels: usize) -> Vec<T> {
    let total: usize = parts.iter().map(|p| p.1).sum();
    let mut out = Vec::with_capacity(pixels * total);
    for px in 0..pixels {
        for &(data, c) in parts {
            out.extend_from_slice(&data[px * c..][..c]);
        }
    }
    out
}

fn run<'w, T: Real>(
    g: &Graph,
    weights: &'w Weights,
    input: &Tensor,
    mut opts: ForwardOptions<'_>,
) -> Result<(Tensor, ActivationCache<'w>)> {
    if input.shape() != g.input_shape.as_slice() {
        return Err(shape_err!("input {:?} does not match graph input {:?}", input.shape(), g.input_shape));
    }
    let shapes = infer_shapes(g, input.shape())?;
    let order = g.topo_order()?;
    let output_id = g.output_id()?.to_string();
    let training = opts.mode == Mode::Training;
    let keep = opts.keep_intermediates || training;
    let table = opts.fake_quant;

    let mut remaining: HashMap<&str, usize> = HashMap::new();
    for n in g.nodes() {
        for i in &n.inputs {
            *remaining.entry(i.as_str()).or_default() += 1;
        }
    }

    let mut cache = ActivationCache {
        mode: opts.mode,
        dtype: T::DTYPE,
        fingerprint: g.fingerprint(),
        outputs: IndexMap::new(),
        dropout_masks: BTreeMap::new(),
        argmax: BTreeMap::new(),
        act_pass: BTreeMap::new(),
        weight_pass: BTreeMap::new(),
        effective: BTreeMap::new(),
        weights,
    };
    let mut values: HashMap<&str, Vec<T>> = HashMap::new();

    for &id in &order {
        let node = g.node(id).unwrap();
        let out_shape = &shapes[id];
        let in_shape = node.inputs.first().map(|i| shapes[i.as_str()].as_slice());
        let x = |k: usize| -> &[T] { &values[node.inputs[k].as_str()] };

        let mut y: Vec<T> = match &node.op {
            Op::Input => T::cow(input).into_owned(),
            Op::Conv2D(_) | Op::TransposedConv2D(_) | Op::Dense(_) => {
                let p = weights.get(id).ok_or_else(|| Error::ModelIo(format!("missing weights for {id:?}")))?;
                let mut kernel = T::cow(&p.kernel).into_owned();
                let mut bias = T::cow(&p.bias).into_owned();
                let quantized = table.and_then(|t| t.weights.get(id).map(|qp| (t, *qp)));
                if let Some((t, qp)) = quantized {
                    let mut pass = Vec::new();
                    fake_quant_slice(&mut kernel, qp, Some(&mut pass), opts.ste_surrogate);
                    if !opts.ste_surrogate {
                        let fb = t.bias_exponent(g, id).ok_or_else(|| {
                            Error::Quant(format!("no input quant params for {id:?}"))
                        })?;
                        grid_round_slice(&mut bias, fb);
                    }
                    if training {
                        cache.weight_pass.insert(id.to_string(), pass);
                    }
                }
                let in_shape = in_shape.unwrap();
                let out = match &node.op {
                    Op::Conv2D(_) => kernels::conv2d(x(0), &kernel, &bias, &conv_geom(&node.op, in_shape, out_shape)?),
                    Op::TransposedConv2D(_) => kernels::tconv2d(x(0), &kernel, &bias, &tconv_geom(&node.op, in_shape)),
                    _ => kernels::dense(x(0), &kernel, &bias, out_shape[1]),
                };
                if quantized.is_some() && keep {
                    cache.effective.insert(
                        id.to_string(),
                        LayerParams { kernel: T::wrap(p.kernel.shape(), kernel), bias: T::wrap(p.bias.shape(), bias) },
                    );
                }
                out
            }
            Op::MaxPool2D(_) => {
                let (out, arg) = kernels::max_pool(x(0), &pool_geom(&node.op, in_shape.unwrap(), out_shape)?);
                if training {
                    cache.argmax.insert(id.to_string(), arg);
                }
                out
            }
            Op::Flatten => x(0).to_vec(),
            Op::Concat => {
                let parts: Vec<(&[T], usize)> =
                    node.inputs.iter().map(|i| (values[i.as_str()].as_slice(), shapes[i.as_str()][3])).collect();
                concat_channels(&parts, out_shape[1] * out_shape[2])
            }
            Op::Dropout { rate } => {
                let mut v = x(0).to_vec();
                if training && *rate > 0.0 {
                    let rng = opts.rng.as_deref_mut().ok_or_else(|| {
                        Error::Argument(format!("training-mode dropout {id:?} needs an rng"))
                    })?;
                    let keep_p = 1.0 - rate;
                    let scale = T::of(1.0 / keep_p);
                    let mask: Vec<bool> = (0..v.len()).map(|_| rng.bernoulli(keep_p)).collect();
                    for (a, &m) in v.iter_mut().zip(&mask) {
                        *a = if m { *a * scale } else { T::zero() };
                    }
                    cache.dropout_masks.insert(id.to_string(), mask);
                }
                v
            }
            Op::Activation(ActivationKind::Relu) => x(0).iter().map(|&v| v.max(T::zero())).collect(),
            Op::Activation(ActivationKind::Sigmoid) => x(0).iter().map(|&v| sigmoid(v)).collect(),
        };

        if is_quant_point(&node.op) {
            if let Some(qp) = table.and_then(|t| t.activations.get(id)) {
                let mut pass = Vec::new();
                fake_quant_slice(&mut y, *qp, training.then_some(&mut pass), opts.ste_surrogate);
                if training {
                    cache.act_pass.insert(id.to_string(), pass);
                }
            }
        }

        if !keep {
            for i in &node.inputs {
                let r = remaining.get_mut(i.as_str()).unwrap();
                *r -= 1;
                if *r == 0 && *i != output_id {
                    values.remove(i.as_str());
                }
            }
        }
        values.insert(id, y);
    }

    let out = T::wrap(&shapes[output_id.as_str()], values[output_id.as_str()].clone());
    if keep {
        for &id in &order {
            let v = values.remove(id).unwrap();
            cache.outputs.insert(id.to_string(), T::wrap(&shapes[id], v));
        }
    }
    Ok((out, cache))
}

#[cfg(test)]
mod tests;
