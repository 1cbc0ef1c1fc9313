use indexmap::IndexMap;

use crate::error::{shape_err, Error, Result};
use crate::ir::graph::{Graph, Op, Padding};

/// Output length and leading pad of a windowed op along one axis.
///
/// Same padding yields `ceil(len / stride)` with the odd extra pad on the
/// high side; valid padding yields `floor((len - k) / stride) + 1`.
pub(crate) fn window_geometry(len: usize, k: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    if k == 0 || stride == 0 {
        return Err(shape_err!("kernel and stride must be positive"));
    }
    match padding {
        Padding::Valid => {
            if len < k {
                return Err(shape_err!("window {k} exceeds extent {len} under valid padding"));
            }
            Ok(((len - k) / stride + 1, 0))
        }
        Padding::Same => {
            let out = len.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(len);
            Ok((out, total / 2))
        }
    }
}

/// Leading pad of a transposed conv whose output is exactly `len * stride`.
pub(crate) fn transposed_pad(k: usize, stride: usize) -> usize {
    k.saturating_sub(stride) / 2
}

/// Output extents of every node for the given input, in topological order.
pub fn infer_shapes(g: &Graph, input_shape: &[usize]) -> Result<IndexMap<String, Vec<usize>>> {
    if input_shape.len() != 4 || input_shape[0] != 1 {
        return Err(shape_err!("input shape must be [1, H, W, C], got {input_shape:?}"));
    }
    if input_shape.contains(&0) {
        return Err(shape_err!("zero extent in input shape {input_shape:?}"));
    }
    let mut shapes: IndexMap<String, Vec<usize>> = IndexMap::new();
    for id in g.topo_order()? {
        let node = g.node(id).unwrap();
        let ins: Vec<&Vec<usize>> = node.inputs.iter().map(|i| &shapes[i.as_str()]).collect();
        let spatial = |s: &Vec<usize>| -> Result<(usize, usize, usize)> {
            if s.len() != 4 {
                return Err(shape_err!("{} {id:?} needs a rank-4 input, got {s:?}", node.op.kind()));
            }
            Ok((s[1], s[2], s[3]))
        };
        let out = match &node.op {
            Op::Input => input_shape.to_vec(),
            Op::Conv2D(p) => {
                let (h, w, _) = spatial(ins[0])?;
                let (oh, _) = window_geometry(h, p.kernel_h, p.stride, p.padding)
                    .map_err(|e| shape_err!("{id}: {e}"))?;
                let (ow, _) = window_geometry(w, p.kernel_w, p.stride, p.padding)
                    .map_err(|e| shape_err!("{id}: {e}"))?;
                vec![1, oh, ow, p.out_channels]
            }
            Op::TransposedConv2D(p) => {
                let (h, w, _) = spatial(ins[0])?;
                if p.stride == 0 {
                    return Err(shape_err!("{id}: zero stride"));
                }
                vec![1, h * p.stride, w * p.stride, p.out_channels]
            }
            Op::MaxPool2D(p) => {
                let (h, w, c) = spatial(ins[0])?;
                let (oh, _) = window_geometry(h, p.pool_h, p.stride_h, p.padding)
                    .map_err(|e| shape_err!("{id}: {e}"))?;
                let (ow, _) = window_geometry(w, p.pool_w, p.stride_w, p.padding)
                    .map_err(|e| shape_err!("{id}: {e}"))?;
                vec![1, oh, ow, c]
            }
            Op::Dense(p) => {
                if ins[0].len() != 2 {
                    return Err(shape_err!("Dense {id:?} needs a flat input, got {:?}", ins[0]));
                }
                vec![1, p.units]
            }
            Op::Flatten => vec![1, ins[0].iter().skip(1).product()],
            Op::Concat => {
                let (h, w, _) = spatial(ins[0])?;
                let mut c = 0;
                for s in &ins {
                    let (hi, wi, ci) = spatial(s)?;
                    if (hi, wi) != (h, w) {
                        return Err(shape_err!("Concat {id:?}: extents {:?} vs {:?} disagree", ins[0], s));
                    }
                    c += ci;
                }
                vec![1, h, w, c]
            }
            Op::Dropout { .. } | Op::Activation(_) => ins[0].clone(),
        };
        if out.contains(&0) {
            return Err(shape_err!("node {id:?} has a zero extent {out:?}"));
        }
        shapes.insert(id.to_string(), out);
    }
    Ok(shapes)
}

/// Kernel and bias shapes of a parameterized node given its input extents.
///
/// Conv and transposed-conv kernels are `[kh, kw, in_c, out_c]`; dense kernels
/// are `[in, units]`. Output units always sit on the last axis.
pub fn param_shapes(op: &Op, input: &[usize]) -> Option<(Vec<usize>, Vec<usize>)> {
    let in_c = *input.last()?;
    match op {
        Op::Conv2D(p) => Some((vec![p.kernel_h, p.kernel_w, in_c, p.out_channels], vec![p.out_channels])),
        Op::TransposedConv2D(p) => {
            Some((vec![p.kernel_h, p.kernel_w, in_c, p.out_channels], vec![p.out_channels]))
        }
        Op::Dense(p) => Some((vec![in_c, p.units], vec![p.units])),
        _ => None,
    }
}

/// Kernel and bias shapes of one layer.
pub type ParamShapes = (Vec<usize>, Vec<usize>);

/// Expected parameter shapes for every parameterized node.
pub fn all_param_shapes(g: &Graph) -> Result<IndexMap<String, ParamShapes>> {
    let shapes = infer_shapes(g, &g.input_shape)?;
    let mut out = IndexMap::new();
    for n in g.param_nodes() {
        let input = shapes.get(n.inputs[0].as_str()).ok_or_else(|| Error::Arch("dangling input".into()))?;
        out.insert(n.id.clone(), param_shapes(&n.op, input).unwrap());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_rules() {
        assert_eq!(window_geometry(12, 2, 1, Padding::Valid).unwrap(), (11, 0));
        assert_eq!(window_geometry(256, 3, 2, Padding::Valid).unwrap(), (127, 0));
        assert_eq!(window_geometry(12, 3, 1, Padding::Same).unwrap(), (12, 1));
        assert_eq!(window_geometry(7, 2, 2, Padding::Same).unwrap(), (4, 0));
        assert_eq!(window_geometry(6, 4, 2, Padding::Same).unwrap(), (3, 1));
        assert!(window_geometry(2, 3, 1, Padding::Valid).is_err());
    }

    #[test]
    fn pooling_recurrence() {
        let mut l = 512;
        let mut chain = vec![];
        for _ in 0..5 {
            l = window_geometry(l, 3, 2, Padding::Valid).unwrap().0;
            chain.push(l);
        }
        assert_eq!(chain, vec![255, 127, 63, 31, 15]);
    }
}
