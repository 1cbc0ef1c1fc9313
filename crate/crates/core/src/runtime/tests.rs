use super::*;
use crate::ir::{init_params, ConvParams, Padding, PoolParams, TransposedConvParams};
use crate::tensor::Tensor;

fn conv_op(out: usize, k: usize, padding: Padding, stride: usize) -> Op {
    Op::Conv2D(ConvParams { out_channels: out, kernel_h: k, kernel_w: k, stride, padding, l2_lambda: 0.0 })
}

fn single(op: Op, input: Vec<usize>) -> Graph {
    let mut g = Graph::new("t", input);
    g.add("in", Op::Input, &[]).unwrap();
    g.add("op", op, &["in"]).unwrap();
    g
}

fn random_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_f32(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0) as f32).collect()).unwrap()
}

fn params(kernel: Tensor, bias_len: usize) -> LayerParams {
    LayerParams { kernel, bias: Tensor::zeros(&[bias_len]).unwrap() }
}

#[test]
fn identity_pointwise_conv() {
    let c = 5;
    let g = single(conv_op(c, 1, Padding::Same, 1), vec![1, 4, 3, c]);
    let mut k = vec![0.0; c * c];
    for i in 0..c {
        k[i * c + i] = 1.0;
    }
    let mut w = Weights::new();
    w.insert("op".into(), params(Tensor::from_f32(&[1, 1, c, c], k).unwrap(), c));
    let x = random_tensor(&[1, 4, 3, c], &mut Rng::new(1));
    let (y, _) = forward(&g, &w, &x, Mode::Inference, None).unwrap();
    assert!(y.bitwise_eq(&x));
}

#[test]
fn ones_conv_counts_window_overlap() {
    let g = single(conv_op(1, 3, Padding::Same, 1), vec![1, 3, 3, 1]);
    let mut w = Weights::new();
    w.insert("op".into(), params(Tensor::new(&[3, 3, 1, 1], 1.0).unwrap(), 1));
    let x = Tensor::new(&[1, 3, 3, 1], 1.0).unwrap();
    let (y, _) = forward(&g, &w, &x, Mode::Inference, None).unwrap();
    assert_eq!(y.as_f32().unwrap(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
}

#[test]
fn sigmoid_open_interval() {
    let g = single(Op::Activation(ActivationKind::Sigmoid), vec![1, 1, 1, 6]);
    let x = Tensor::from_f32(&[1, 1, 1, 6], vec![-1e4, -100.0, -1.0, 0.0, 40.0, 1e4]).unwrap();
    let (y, _) = forward(&g, &Weights::new(), &x, Mode::Inference, None).unwrap();
    for &p in y.as_f32().unwrap() {
        assert!(p > 0.0 && p < 1.0, "{p}");
    }
    assert_eq!(y.as_f32().unwrap()[3], 0.5);
}

#[test]
fn inference_is_deterministic_and_dropout_is_identity() {
    let g = crate::ir::build_architecture(crate::ir::Arch::PixelNet);
    let w = init_params(&g, &mut Rng::new(3)).unwrap();
    let x = random_tensor(&g.input_shape, &mut Rng::new(4));
    let (a, ca) = forward(&g, &w, &x, Mode::Inference, None).unwrap();
    let (b, _) = forward(&g, &w, &x, Mode::Inference, None).unwrap();
    assert!(a.bitwise_eq(&b));
    assert!(ca.dropout_masks.is_empty());
    assert!(ca.output("dropout1").unwrap().bitwise_eq(ca.output("dense1_relu").unwrap()));
    assert!(predict(&g, &w, &x).unwrap().bitwise_eq(&a));
}

#[test]
fn training_dropout_requires_rng_and_scales() {
    let g = single(Op::Dropout { rate: 0.5 }, vec![1, 1, 1, 1000]);
    let x = Tensor::new(&[1, 1, 1, 1000], 1.0).unwrap();
    assert!(forward(&g, &Weights::new(), &x, Mode::Training, None).is_err());
    let mut rng = Rng::new(8);
    let empty = Weights::new();
    let (y, c) = forward(&g, &empty, &x, Mode::Training, Some(&mut rng)).unwrap();
    let mask = &c.dropout_masks["op"];
    for (&v, &m) in y.as_f32().unwrap().iter().zip(mask) {
        assert_eq!(v, if m { 2.0 } else { 0.0 });
    }
    let kept = mask.iter().filter(|&&m| m).count();
    assert!((400..600).contains(&kept));
}

#[test]
fn max_pool_matches_window_scan() {
    let mut rng = Rng::new(10);
    for (h, w, p, s, pad) in [(7, 6, 3, 2, Padding::Valid), (6, 5, 2, 1, Padding::Valid), (5, 5, 3, 2, Padding::Same)] {
        let op = Op::MaxPool2D(PoolParams { pool_h: p, pool_w: p, stride_h: s, stride_w: s, padding: pad });
        let g = single(op.clone(), vec![1, h, w, 3]);
        let x = random_tensor(&[1, h, w, 3], &mut rng);
        let (y, _) = forward(&g, &Weights::new(), &x, Mode::Inference, None).unwrap();
        let shapes = infer_shapes(&g, &g.input_shape).unwrap();
        let o = &shapes["op"];
        let (_, pt) = window_geometry(h, p, s, pad).unwrap();
        let (_, pl) = window_geometry(w, p, s, pad).unwrap();
        let xv = x.as_f32().unwrap();
        let yv = y.as_f32().unwrap();
        for oy in 0..o[1] {
            for ox in 0..o[2] {
                for c in 0..3 {
                    let mut best = f32::NEG_INFINITY;
                    for dy in 0..p {
                        for dx in 0..p {
                            let iy = (oy * s + dy) as isize - pt as isize;
                            let ix = (ox * s + dx) as isize - pl as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                best = best.max(xv[(iy as usize * w + ix as usize) * 3 + c]);
                            }
                        }
                    }
                    assert_eq!(yv[(oy * o[2] + ox) * 3 + c], best);
                }
            }
        }
    }
}

#[test]
fn concat_reads_channel_blocks() {
    let mut g = Graph::new("t", vec![1, 2, 3, 4]);
    g.add("in", Op::Input, &[]).unwrap();
    g.add("a", Op::Activation(ActivationKind::Relu), &["in"]).unwrap();
    g.add("b", conv_op(2, 1, Padding::Same, 1), &["in"]).unwrap();
    g.add("cat", Op::Concat, &["a", "b"]).unwrap();
    let w = init_params(&g, &mut Rng::new(2)).unwrap();
    let x = random_tensor(&[1, 2, 3, 4], &mut Rng::new(5));
    let (y, cache) = forward(&g, &w, &x, Mode::Inference, None).unwrap();
    let a = cache.output("a").unwrap().as_f32().unwrap();
    let b = cache.output("b").unwrap().as_f32().unwrap();
    let y = y.as_f32().unwrap();
    for px in 0..6 {
        for c in 0..6 {
            let expect = if c < 4 { a[px * 4 + c] } else { b[px * 2 + c - 4] };
            assert_eq!(y[px * 6 + c], expect);
        }
    }
}

#[test]
fn transposed_conv_is_adjoint_of_strided_conv() {
    let (h, w, ci, co) = (3, 4, 3, 5);
    let mut rng = Rng::new(21);
    let t_op = Op::TransposedConv2D(TransposedConvParams { out_channels: co, kernel_h: 2, kernel_w: 2, stride: 2, l2_lambda: 0.0 });
    let tg = single(t_op, vec![1, h, w, ci]);
    let kt = random_tensor(&[2, 2, ci, co], &mut rng);
    let mut tw = Weights::new();
    tw.insert("op".into(), params(kt.clone(), co));

    // stride-2 valid conv with the kernel's channel axes swapped
    let cg = single(conv_op(ci, 2, Padding::Valid, 2), vec![1, 2 * h, 2 * w, co]);
    let ktv = kt.as_f32().unwrap();
    let mut kc = vec![0.0; ktv.len()];
    for k in 0..4 {
        for i in 0..ci {
            for o in 0..co {
                kc[(k * co + o) * ci + i] = ktv[(k * ci + i) * co + o];
            }
        }
    }
    let mut cw = Weights::new();
    cw.insert("op".into(), params(Tensor::from_f32(&[2, 2, co, ci], kc).unwrap(), ci));

    let y = random_tensor(&[1, h, w, ci], &mut rng);
    let x = random_tensor(&[1, 2 * h, 2 * w, co], &mut rng);
    let (ty, _) = forward(&tg, &tw, &y.to_f64(), Mode::Inference, None).unwrap();
    let (cx, _) = forward(&cg, &cw, &x.to_f64(), Mode::Inference, None).unwrap();
    assert_eq!(ty.shape(), &[1, 2 * h, 2 * w, co]);
    let lhs: f64 = ty.as_f64().unwrap().iter().zip(x.to_f64_vec()).map(|(a, b)| a * b).sum();
    let rhs: f64 = cx.as_f64().unwrap().iter().zip(y.to_f64_vec()).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
}

#[test]
fn shape_mismatch_and_missing_weight() {
    let g = single(conv_op(2, 3, Padding::Same, 1), vec![1, 4, 4, 1]);
    let x = Tensor::new(&[1, 4, 4, 2], 1.0).unwrap();
    assert!(matches!(forward(&g, &Weights::new(), &x, Mode::Inference, None), Err(Error::Shape(_))));
    let x = Tensor::new(&[1, 4, 4, 1], 1.0).unwrap();
    assert!(matches!(forward(&g, &Weights::new(), &x, Mode::Inference, None), Err(Error::ModelIo(_))));
}
