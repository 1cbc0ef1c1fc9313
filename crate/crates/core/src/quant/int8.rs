//! Int8 models and the integer executor.
//!
//! Conv, transposed conv and dense layers multiply int8 operands into int32
//! accumulators, add an int32 bias on the grid `2^-(f_w + f_in)`, and
//! requantize to the output exponent by a rounding arithmetic shift.
//! Everything before a final sigmoid stays in the integer domain.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::blob::{self, BlobArray, BlobData};
use crate::error::{shape_err, Error, Result};
use crate::ir::graph::RawNode;
use crate::ir::io::{Manifest, MANIFEST, SCHEMA_VERSION};
use crate::ir::shape::{all_param_shapes, infer_shapes};
use crate::ir::{ActivationKind, Graph, Op, Weights};
use crate::quant::fake::{is_quant_point, QuantTable};
use crate::runtime::{concat_channels, conv_geom, kernels, pool_geom, sigmoid, tconv_geom};
use crate::tensor::{QuantParams, Tensor};

pub const WEIGHTS_I8: &str = "weights_i8.cfw";
pub const BIASES_I32: &str = "biases_i32.cfw";

/// A quantized conv/tconv/dense layer.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantLayer {
    /// int8 kernel; its quant params carry the weight exponent.
    pub kernel: Tensor,
    /// int32 bias on the grid `2^-(weight_exponent + input_exponent)`.
    pub bias: Vec<i32>,
    pub input_exponent: i32,
    pub output_exponent: i32,
    /// `f_w + f_in - f_out`; negative means a left shift.
    pub shift: i32,
    /// Worst-case |accumulator| over all int8 inputs.
    pub acc_bound: i64,
}

impl QuantLayer {
    pub fn weight_exponent(&self) -> i32 {
        self.kernel.quant().expect("int8 kernel").exponent
    }

    pub fn bias_exponent(&self) -> i32 {
        self.weight_exponent() + self.input_exponent
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub graph: Graph,
    pub table: QuantTable,
    pub layers: BTreeMap<String, QuantLayer>,
}

impl QuantizedModel {
    pub fn input_params(&self) -> QuantParams {
        let id = self.graph.input_id().expect("validated graph");
        self.table.activations[id]
    }

    /// Rounds a float input onto the model's input grid.
    pub fn quantize_input(&self, x: &Tensor) -> Result<Tensor> {
        let qp = self.input_params();
        Tensor::from_i8(x.shape(), x.to_f64_vec().into_iter().map(|v| quantize_value(v, qp.exponent)).collect(), qp)
    }
}

/// `clamp(round_half_away(x * 2^f), -128, 127)`.
pub fn quantize_value(x: f64, exponent: i32) -> i8 {
    (x * 2f64.powi(exponent)).round().clamp(QuantParams::QMIN as f64, QuantParams::QMAX as f64) as i8
}

/// Divides by `2^shift` rounding half away from zero (multiplies for a
/// negative shift), then saturates to int8.
pub fn requantize(acc: i64, shift: i32) -> i8 {
    let v = if shift > 0 {
        if shift >= 63 {
            0
        } else {
            let half = 1i64 << (shift - 1);
            if acc >= 0 {
                (acc + half) >> shift
            } else {
                -((-acc + half) >> shift)
            }
        }
    } else if acc == 0 {
        0
    } else if -shift >= 32 {
        acc.signum() * i64::MAX
    } else {
        acc << -shift
    };
    v.clamp(QuantParams::QMIN as i64, QuantParams::QMAX as i64) as i8
}

/// Inputs per output accumulator (an upper bound for transposed convs).
fn fan_in(kernel_shape: &[usize]) -> i64 {
    kernel_shape[..kernel_shape.len() - 1].iter().product::<usize>() as i64
}

pub fn quantize_graph(g: &Graph, weights: &Weights, table: &QuantTable) -> Result<QuantizedModel> {
    g.validate()?;
    for n in g.nodes() {
        if is_quant_point(&n.op) && !table.activations.contains_key(&n.id) {
            return Err(Error::Quant(format!("no activation quant params for {:?}", n.id)));
        }
    }
    let mut layers = BTreeMap::new();
    for n in g.param_nodes() {
        let id = &n.id;
        let p = weights.get(id).ok_or_else(|| Error::ModelIo(format!("missing weights for {id:?}")))?;
        let wq = *table.weights.get(id).ok_or_else(|| Error::Quant(format!("no weight quant params for {id:?}")))?;
        let input_exponent = table.activation_for(g, &n.inputs[0]).expect("inputs of param layers are quantized").exponent;
        let output_exponent = table.activations[id].exponent;
        let kq: Vec<i8> = p.kernel.to_f64_vec().into_iter().map(|w| quantize_value(w, wq.exponent)).collect();
        let fb = wq.exponent + input_exponent;
        let bias = p
            .bias
            .to_f64_vec()
            .into_iter()
            .map(|b| {
                let q = (b * 2f64.powi(fb)).round();
                if q.abs() > i32::MAX as f64 {
                    Err(Error::Quant(format!("bias {b} of {id:?} overflows int32 on grid 2^-{fb}")))
                } else {
                    Ok(q as i32)
                }
            })
            .collect::<Result<Vec<i32>>>()?;
        let max_bias = bias.iter().map(|b| (*b as i64).abs()).max().unwrap_or(0);
        let acc_bound = fan_in(p.kernel.shape()) * 128 * 128 + max_bias;
        if acc_bound > i32::MAX as i64 {
            return Err(Error::Quant(format!("accumulator of {id:?} may reach {acc_bound}, beyond int32")));
        }
        let layer = QuantLayer {
            kernel: Tensor::from_i8(p.kernel.shape(), kq, wq)?,
            bias,
            input_exponent,
            output_exponent,
            shift: fb - output_exponent,
            acc_bound,
        };
        layers.insert(id.clone(), layer);
    }
    Ok(QuantizedModel { graph: g.clone(), table: table.clone(), layers })
}

/// Integer tensors of every node plus the float tail.
#[derive(Debug, Clone)]
pub struct Int8Trace {
    /// int8 outputs of every node in the integer domain.
    pub ints: IndexMap<String, Tensor>,
    /// Dequantized value entering a terminal sigmoid, if any.
    pub logit: Option<Tensor>,
    /// f64 probabilities (or dequantized outputs without a sigmoid).
    pub output: Tensor,
}

/// Runs the integer pipeline; `input` must be int8 on the model's input grid.
pub fn forward_int8(qm: &QuantizedModel, input: &Tensor) -> Result<Tensor> {
    Ok(run(qm, input, false)?.output)
}

pub fn forward_int8_trace(qm: &QuantizedModel, input: &Tensor) -> Result<Int8Trace> {
    run(qm, input, true)
}

fn widen(v: &[i8]) -> Vec<i32> {
    v.iter().map(|&x| x as i32).collect()
}

fn dequantize(v: &[i8], exponent: i32) -> Vec<f64> {
    let s = 2f64.powi(-exponent);
    v.iter().map(|&q| q as f64 * s).collect()
}

fn run(qm: &QuantizedModel, input: &Tensor, trace: bool) -> Result<Int8Trace> {
    let g = &qm.graph;
    let expected = qm.input_params();
    let (Some(xq), Some(qp)) = (input.as_i8(), input.quant()) else {
        return Err(Error::Quant("int8 executor needs an int8 input tensor".into()));
    };
    if qp != expected {
        return Err(Error::Quant(format!("input exponent {} differs from the model's {}", qp.exponent, expected.exponent)));
    }
    if input.shape() != g.input_shape.as_slice() {
        return Err(shape_err!("input {:?} does not match graph input {:?}", input.shape(), g.input_shape));
    }
    let shapes = infer_shapes(g, input.shape())?;
    let out_id = g.output_id()?;
    let exponent_of = |id: &str| qm.table.activation_for(g, id).map(|q| q.exponent);

    let mut values: HashMap<&str, Vec<i8>> = HashMap::new();
    let mut tail: Option<(Vec<f64>, Vec<f64>)> = None;
    for id in g.topo_order()? {
        let node = g.node(id).unwrap();
        let out_shape = &shapes[id];
        let x = |k: usize| -> &[i8] { &values[node.inputs[k].as_str()] };
        let y: Vec<i8> = match &node.op {
            Op::Input => xq.to_vec(),
            Op::Conv2D(_) | Op::TransposedConv2D(_) | Op::Dense(_) => {
                let l = &qm.layers[id];
                let (xi, wi) = (widen(x(0)), widen(l.kernel.as_i8().unwrap()));
                let in_shape = &shapes[node.inputs[0].as_str()];
                let acc = match &node.op {
                    Op::Conv2D(_) => kernels::conv2d(&xi, &wi, &l.bias, &conv_geom(&node.op, in_shape, out_shape)?),
                    Op::TransposedConv2D(_) => kernels::tconv2d(&xi, &wi, &l.bias, &tconv_geom(&node.op, in_shape)),
                    _ => kernels::dense(&xi, &wi, &l.bias, out_shape[1]),
                };
                acc.into_iter().map(|a| requantize(a as i64, l.shift)).collect()
            }
            Op::MaxPool2D(_) => kernels::max_pool(x(0), &pool_geom(&node.op, &shapes[node.inputs[0].as_str()], out_shape)?).0,
            Op::Flatten | Op::Dropout { .. } => x(0).to_vec(),
            Op::Activation(ActivationKind::Relu) => x(0).iter().map(|&v| v.max(0)).collect(),
            Op::Concat => {
                let f_out = qm.table.activations[id].exponent;
                let parts: Vec<(Vec<i8>, usize)> = node
                    .inputs
                    .iter()
                    .map(|i| {
                        let shift = exponent_of(i).expect("quantized concat input") - f_out;
                        let v = values[i.as_str()].iter().map(|&q| requantize(q as i64, shift)).collect();
                        (v, shapes[i.as_str()][3])
                    })
                    .collect();
                let refs: Vec<(&[i8], usize)> = parts.iter().map(|(v, c)| (v.as_slice(), *c)).collect();
                concat_channels(&refs, out_shape[1] * out_shape[2])
            }
            Op::Activation(ActivationKind::Sigmoid) => {
                if id != out_id {
                    return Err(Error::Quant(format!("sigmoid {id:?} must be the graph output")));
                }
                let logit = dequantize(x(0), exponent_of(&node.inputs[0]).expect("quantized logit"));
                let probs = logit.iter().map(|&z| sigmoid(z)).collect();
                tail = Some((logit, probs));
                continue;
            }
        };
        values.insert(id, y);
    }

    let out_shape = &shapes[out_id];
    let (logit, output) = match tail {
        Some((logit, probs)) => (Some(Tensor::from_f64(out_shape, logit)?), Tensor::from_f64(out_shape, probs)?),
        None => (None, Tensor::from_f64(out_shape, dequantize(&values[out_id], exponent_of(out_id).unwrap()))?),
    };
    let mut ints = IndexMap::new();
    if trace {
        for id in g.topo_order()? {
            if let Some(v) = values.remove(id) {
                let qp = QuantParams::new(exponent_of(id).unwrap());
                ints.insert(id.to_string(), Tensor::from_i8(&shapes[id], v, qp)?);
            }
        }
    }
    Ok(Int8Trace { ints, logit, output })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerEntry {
    weight_exponent: i32,
    input_exponent: i32,
    bias_exponent: i32,
    output_exponent: i32,
    shift: i32,
    acc_bound: i64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QuantSection {
    activations: BTreeMap<String, i32>,
    layers: BTreeMap<String, LayerEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QuantManifest {
    schema_version: u32,
    arch_name: String,
    input_shape: Vec<usize>,
    nodes: Vec<RawNode>,
    quantization: QuantSection,
}

/// Writes `model.json` (graph, exponents and shifts), `weights_i8.cfw` and
/// `biases_i32.cfw`; arrays are ordered by node id.
pub fn save_quantized(qm: &QuantizedModel, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let layers = qm
        .layers
        .iter()
        .map(|(id, l)| {
            let e = LayerEntry {
                weight_exponent: l.weight_exponent(),
                input_exponent: l.input_exponent,
                bias_exponent: l.bias_exponent(),
                output_exponent: l.output_exponent,
                shift: l.shift,
                acc_bound: l.acc_bound,
            };
            (id.clone(), e)
        })
        .collect();
    let activations = qm.table.activations.iter().map(|(k, v)| (k.clone(), v.exponent)).collect();
    let manifest = QuantManifest {
        schema_version: SCHEMA_VERSION,
        arch_name: qm.graph.arch_name.clone(),
        input_shape: qm.graph.input_shape.clone(),
        nodes: qm.graph.raw_nodes()?,
        quantization: QuantSection { activations, layers },
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    let kernels: Vec<BlobArray> = qm.layers.values().map(|l| BlobArray::from_tensor(&l.kernel)).collect();
    let biases: Vec<BlobArray> = qm
        .layers
        .values()
        .map(|l| BlobArray { shape: vec![l.bias.len()], data: BlobData::I32(l.bias.clone()), exponent: l.bias_exponent() })
        .collect();
    blob::write_file(&dir.join(WEIGHTS_I8), &kernels)?;
    blob::write_file(&dir.join(BIASES_I32), &biases)
}

pub fn load_quantized(dir: &Path) -> Result<QuantizedModel> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let m: QuantManifest = serde_json::from_str(&text)?;
    let graph = Manifest {
        schema_version: m.schema_version,
        arch_name: m.arch_name,
        input_shape: m.input_shape,
        nodes: m.nodes,
        pruning: None,
    }
    .into_graph()?;
    let shapes = all_param_shapes(&graph).map_err(|e| Error::ModelIo(e.to_string()))?;
    let kernels = blob::read_file(&dir.join(WEIGHTS_I8))?;
    let biases = blob::read_file(&dir.join(BIASES_I32))?;
    let ids: Vec<String> = m.quantization.layers.keys().cloned().collect();
    let mut expected: Vec<&String> = shapes.keys().collect();
    expected.sort();
    if ids.iter().collect::<Vec<_>>() != expected || kernels.len() != ids.len() || biases.len() != ids.len() {
        return Err(Error::ModelIo("quantized package does not cover exactly the parameter layers".into()));
    }
    let mut table = QuantTable {
        activations: m.quantization.activations.iter().map(|(k, &e)| (k.clone(), QuantParams::new(e))).collect(),
        ..Default::default()
    };
    let mut layers = BTreeMap::new();
    for ((id, k), b) in ids.into_iter().zip(kernels).zip(biases) {
        let e = &m.quantization.layers[&id];
        let (kshape, bshape) = &shapes[&id];
        let consistent = k.shape == *kshape
            && b.shape == *bshape
            && matches!(k.data, BlobData::I8(_))
            && k.exponent == e.weight_exponent
            && b.exponent == e.bias_exponent
            && e.bias_exponent == e.weight_exponent + e.input_exponent
            && e.shift == e.bias_exponent - e.output_exponent;
        let BlobData::I32(bias) = b.data else {
            return Err(Error::ModelIo(format!("bias of {id:?} is not int32")));
        };
        if !consistent {
            return Err(Error::ModelIo(format!("inconsistent quantized layer {id:?}")));
        }
        table.weights.insert(id.clone(), QuantParams::new(e.weight_exponent));
        let layer = QuantLayer {
            kernel: k.into_tensor()?,
            bias,
            input_exponent: e.input_exponent,
            output_exponent: e.output_exponent,
            shift: e.shift,
            acc_bound: e.acc_bound,
        };
        layers.insert(id, layer);
    }
    for n in graph.nodes() {
        if is_quant_point(&n.op) && !table.activations.contains_key(&n.id) {
            return Err(Error::ModelIo(format!("no exponent for {:?}", n.id)));
        }
    }
    Ok(QuantizedModel { graph, table, layers })
}
