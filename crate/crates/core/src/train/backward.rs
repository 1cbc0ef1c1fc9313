//! Reverse-mode gradients over an [`ActivationCache`].

use std::collections::HashMap;

use crate::error::{shape_err, Error, Result};
use crate::ir::{ActivationKind, Graph, LayerParams, Op, Weights};
use crate::runtime::{conv_geom, kernels, tconv_geom, ActivationCache, Mode};
use crate::tensor::{DType, Real, Tensor};

/// Parameter gradients keyed by node id, shaped like the parameters.
pub type Gradients = Weights;

/// Gradients of all parameters given the gradient of the graph output.
pub fn backward(g: &Graph, cache: &ActivationCache<'_>, output_grad: &Tensor) -> Result<Gradients> {
    backward_from(g, cache, g.output_id()?, output_grad)
}

/// Like [`backward`] but seeded at an arbitrary node, e.g. the logit feeding
/// a final sigmoid. Nodes downstream of `start` are ignored.
pub fn backward_from(g: &Graph, cache: &ActivationCache<'_>, start: &str, grad: &Tensor) -> Result<Gradients> {
    if cache.mode() != Mode::Training {
        return Err(Error::State("backward needs a cache recorded in training mode".into()));
    }
    if cache.fingerprint() != g.fingerprint() {
        return Err(Error::State("activation cache was recorded on a different graph".into()));
    }
    let out = cache.output(start).ok_or_else(|| Error::State(format!("cache has no value for {start:?}")))?;
    if out.shape() != grad.shape() {
        return Err(shape_err!("gradient {:?} for output {:?} of {start:?}", grad.shape(), out.shape()));
    }
    match cache.dtype() {
        DType::F32 => run::<f32>(g, cache, start, grad),
        DType::F64 => run::<f64>(g, cache, start, grad),
        DType::I8 => unreachable!("float caches only"),
    }
}

fn value<'c, T: Real>(cache: &'c ActivationCache<'_>, id: &str) -> &'c [T] {
    T::view(cache.output(id).expect("cached activation")).expect("cache dtype")
}

fn accumulate<'g, T: Real>(grads: &mut HashMap<&'g str, Vec<T>>, id: &'g str, g: Vec<T>) {
    match grads.get_mut(id) {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
        None => {
            grads.insert(id, g);
        }
    }
}

fn run<T: Real>(g: &Graph, cache: &ActivationCache<'_>, start: &str, seed: &Tensor) -> Result<Gradients> {
    let order = g.topo_order()?;
    let pos = order.iter().position(|&i| i == start).expect("start node is in the graph");
    let shape_of = |id: &str| cache.output(id).expect("cached activation").shape().to_vec();
    let mut grads: HashMap<&str, Vec<T>> = HashMap::new();
    grads.insert(start, T::cow(seed).into_owned());
    let mut out = Gradients::new();

    for &id in order[..=pos].iter().rev() {
        let Some(mut gy) = grads.remove(id) else { continue };
        let node = g.node(id).unwrap();
        if let Some(pass) = cache.act_pass.get(id) {
            for (v, &p) in gy.iter_mut().zip(pass) {
                if !p {
                    *v = T::zero();
                }
            }
        }
        let src = node.inputs.first().map(String::as_str);
        // no point materialising the gradient of the network input
        let wants_gx = |i: &str| !matches!(g.node(i).map(|n| &n.op), Some(Op::Input));

        match &node.op {
            Op::Input => {}
            Op::Conv2D(_) | Op::TransposedConv2D(_) | Op::Dense(_) => {
                let src = src.unwrap();
                let x = value::<T>(cache, src);
                let p = cache.params(id).ok_or_else(|| Error::State(format!("no parameters cached for {id:?}")))?;
                let w = T::cow(&p.kernel);
                let mut gw = vec![T::zero(); w.len()];
                let mut gb = vec![T::zero(); p.bias.numel()];
                let mut gx = wants_gx(src).then(|| vec![T::zero(); x.len()]);
                let in_shape = shape_of(src);
                match &node.op {
                    Op::Conv2D(_) => {
                        let geom = conv_geom(&node.op, &in_shape, &shape_of(id))?;
                        kernels::conv2d_backward(x, &w, &gy, &geom, gx.as_deref_mut(), &mut gw, &mut gb);
                    }
                    Op::TransposedConv2D(_) => {
                        let geom = tconv_geom(&node.op, &in_shape);
                        kernels::tconv2d_backward(x, &w, &gy, &geom, gx.as_deref_mut(), &mut gw, &mut gb);
                    }
                    _ => kernels::dense_backward(x, &w, &gy, gb.len(), gx.as_deref_mut(), &mut gw, &mut gb),
                }
                if let Some(pass) = cache.weight_pass.get(id) {
                    for (v, &p) in gw.iter_mut().zip(pass) {
                        if !p {
                            *v = T::zero();
                        }
                    }
                }
                out.insert(id.to_string(), finish(g, cache, id, gw, gb)?);
                if let Some(gx) = gx {
                    accumulate(&mut grads, src, gx);
                }
            }
            Op::MaxPool2D(_) => {
                let src = src.unwrap();
                let mut gx = vec![T::zero(); value::<T>(cache, src).len()];
                let arg = &cache.argmax[id];
                for (&i, &v) in arg.iter().zip(&gy) {
                    gx[i as usize] += v;
                }
                accumulate(&mut grads, src, gx);
            }
            Op::Flatten => accumulate(&mut grads, src.unwrap(), gy),
            Op::Concat => {
                let widths: Vec<usize> = node.inputs.iter().map(|i| *shape_of(i).last().unwrap()).collect();
                let total: usize = widths.iter().sum();
                let pixels = gy.len() / total;
                let mut offset = 0;
                for (i, &c) in node.inputs.iter().zip(&widths) {
                    let mut part = Vec::with_capacity(pixels * c);
                    for px in 0..pixels {
                        part.extend_from_slice(&gy[px * total + offset..][..c]);
                    }
                    offset += c;
                    accumulate(&mut grads, i.as_str(), part);
                }
            }
            Op::Dropout { rate } => {
                if let Some(mask) = cache.dropout_masks.get(id) {
                    let scale = T::of(1.0 / (1.0 - rate));
                    for (v, &m) in gy.iter_mut().zip(mask) {
                        *v = if m { *v * scale } else { T::zero() };
                    }
                }
                accumulate(&mut grads, src.unwrap(), gy);
            }
            Op::Activation(ActivationKind::Relu) => {
                let y = value::<T>(cache, id);
                for (v, &o) in gy.iter_mut().zip(y) {
                    if o <= T::zero() {
                        *v = T::zero();
                    }
                }
                accumulate(&mut grads, src.unwrap(), gy);
            }
            Op::Activation(ActivationKind::Sigmoid) => {
                let y = value::<T>(cache, id);
                for (v, &o) in gy.iter_mut().zip(y) {
                    *v *= o * (T::one() - o);
                }
                accumulate(&mut grads, src.unwrap(), gy);
            }
        }
    }

    // parameters outside the seeded subgraph only see the penalty
    for n in g.param_nodes() {
        if !out.contains_key(&n.id) {
            let p = &cache.weights[&n.id];
            let gw = vec![T::zero(); p.kernel.numel()];
            let gb = vec![T::zero(); p.bias.numel()];
            out.insert(n.id.clone(), finish(g, cache, &n.id, gw, gb)?);
        }
    }
    Ok(out)
}

/// Adds the L2 penalty gradient `2 lambda w` (on the float kernel) and wraps.
fn finish<T: Real>(g: &Graph, cache: &ActivationCache<'_>, id: &str, mut gw: Vec<T>, gb: Vec<T>) -> Result<LayerParams> {
    let p = cache.weights.get(id).ok_or_else(|| Error::ModelIo(format!("missing weights for {id:?}")))?;
    let lambda = g.node(id).unwrap().op.l2_lambda();
    if lambda != 0.0 {
        let two_l = T::of(2.0 * lambda);
        for (a, &w) in gw.iter_mut().zip(T::cow(&p.kernel).iter()) {
            *a += two_l * w;
        }
    }
    Ok(LayerParams { kernel: T::wrap(p.kernel.shape(), gw), bias: T::wrap(p.bias.shape(), gb) })
}
