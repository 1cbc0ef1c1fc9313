use super::*;
use crate::data::Split;
use crate::ir::{ConvParams, DenseParams, Padding, PoolParams, TransposedConvParams};
use crate::quant::fake::is_quant_point;
use crate::tensor::QuantParams;

fn conv(out: usize, k: usize, stride: usize, padding: Padding, l2: f64) -> Op {
    Op::Conv2D(ConvParams { out_channels: out, kernel_h: k, kernel_w: k, stride, padding, l2_lambda: l2 })
}

fn pool(p: usize, s: usize, padding: Padding) -> Op {
    Op::MaxPool2D(PoolParams { pool_h: p, pool_w: p, stride_h: s, stride_w: s, padding })
}

fn dense(units: usize, l2: f64) -> Op {
    Op::Dense(DenseParams { units, l2_lambda: l2 })
}

const RELU: Op = Op::Activation(ActivationKind::Relu);
const SIGMOID: Op = Op::Activation(ActivationKind::Sigmoid);

/// conv (same, strided, valid), relu, max-pool, flatten, dense, dropout, sigmoid
fn chain_graph() -> Graph {
    let mut g = Graph::new("chain", vec![1, 7, 9, 3]);
    g.add("in", Op::Input, &[]).unwrap();
    g.add("c1", conv(4, 3, 1, Padding::Same, 1e-2), &["in"]).unwrap();
    g.add("r1", RELU, &["c1"]).unwrap();
    g.add("p1", pool(2, 2, Padding::Same), &["r1"]).unwrap();
    g.add("c2", conv(3, 2, 2, Padding::Valid, 0.0), &["p1"]).unwrap();
    g.add("p2", pool(2, 1, Padding::Same), &["c2"]).unwrap();
    g.add("f", Op::Flatten, &["p2"]).unwrap();
    g.add("d1", dense(5, 3e-3), &["f"]).unwrap();
    g.add("dr", Op::Dropout { rate: 0.4 }, &["d1"]).unwrap();
    g.add("d2", dense(2, 0.0), &["dr"]).unwrap();
    g.add("out", SIGMOID, &["d2"]).unwrap();
    g
}

/// encoder/decoder with transposed convs and a skip concat
fn skip_graph() -> Graph {
    let mut g = Graph::new("skip", vec![1, 4, 6, 2]);
    g.add("in", Op::Input, &[]).unwrap();
    g.add("e", conv(3, 3, 1, Padding::Same, 1e-2), &["in"]).unwrap();
    g.add("er", RELU, &["e"]).unwrap();
    g.add("p", pool(2, 2, Padding::Valid), &["er"]).unwrap();
    let t = |out, k, s| Op::TransposedConv2D(TransposedConvParams { out_channels: out, kernel_h: k, kernel_w: k, stride: s, l2_lambda: 5e-3 });
    g.add("up", t(2, 2, 2), &["p"]).unwrap();
    g.add("cat", Op::Concat, &["up", "er"]).unwrap();
    g.add("t3", t(3, 3, 1), &["cat"]).unwrap();
    g.add("head", conv(1, 1, 1, Padding::Same, 0.0), &["t3"]).unwrap();
    g.add("out", SIGMOID, &["head"]).unwrap();
    g
}

fn random_f64(shape: &[usize], rng: &mut Rng, spread: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_f64(shape, (0..n).map(|_| rng.uniform(-spread, spread)).collect()).unwrap()
}

fn to_f64_weights(w: &Weights, rng: &mut Rng) -> Weights {
    // non-zero biases so bias gradients are exercised too
    w.iter()
        .map(|(k, p)| {
            let bias = random_f64(p.bias.shape(), rng, 0.2);
            (k.clone(), LayerParams { kernel: p.kernel.to_f64(), bias })
        })
        .collect()
}

/// Objective `<r, f(x)> + sum lambda |w|^2` under a fixed dropout stream.
fn objective(g: &Graph, w: &Weights, x: &Tensor, r: &[f64], quant: Option<&QuantTable>) -> f64 {
    let mut rng = Rng::new(99);
    let opts = ForwardOptions { mode: Mode::Training, rng: Some(&mut rng), fake_quant: quant, ste_surrogate: true, ..Default::default() };
    let (y, _) = forward_with(g, w, x, opts).unwrap();
    let data: f64 = y.as_f64().unwrap().iter().zip(r).map(|(a, b)| a * b).sum();
    let penalty: f64 = g
        .param_nodes()
        .iter()
        .map(|n| n.op.l2_lambda() * w[&n.id].kernel.as_f64().unwrap().iter().map(|v| v * v).sum::<f64>())
        .sum();
    data + penalty
}

fn analytic(g: &Graph, w: &Weights, x: &Tensor, r: &[f64], quant: Option<&QuantTable>) -> Gradients {
    let mut rng = Rng::new(99);
    let opts = ForwardOptions { mode: Mode::Training, rng: Some(&mut rng), fake_quant: quant, ste_surrogate: true, ..Default::default() };
    let (y, cache) = forward_with(g, w, x, opts).unwrap();
    backward(g, &cache, &Tensor::from_f64(y.shape(), r.to_vec()).unwrap()).unwrap()
}

fn perturbed(w: &Weights, id: &str, bias: bool, i: usize, delta: f64) -> Weights {
    let mut w = w.clone();
    let p = w.get_mut(id).unwrap();
    let t = if bias { &mut p.bias } else { &mut p.kernel };
    let mut v = t.as_f64().unwrap().to_vec();
    v[i] += delta;
    *t = Tensor::from_f64(t.shape(), v).unwrap();
    w
}

/// Norm-wise relative error between analytic and central-difference
/// gradients, per parameter tensor.
///
/// Coordinates whose one-sided differences disagree straddle a kink (relu
/// zero, clipping edge, pool switch) where the derivative is undefined; they
/// are skipped, and the skip count must stay small.
fn gradient_check(g: &Graph, seed: u64, quant: Option<&QuantTable>) -> Vec<(String, f64)> {
    let h = 1e-4;
    let mut rng = Rng::new(seed);
    let w = to_f64_weights(&init_params(g, &mut rng).unwrap(), &mut rng);
    let x = random_f64(&g.input_shape, &mut rng, 1.0);
    let out_len = crate::ir::infer_shapes(g, &g.input_shape).unwrap()[g.output_id().unwrap()].iter().product();
    let r: Vec<f64> = (0..out_len).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let grads = analytic(g, &w, &x, &r, quant);
    let f0 = objective(g, &w, &x, &r, quant);
    let (mut skipped, mut total) = (0, 0);
    let mut report = Vec::new();
    for (id, p) in &w {
        for bias in [false, true] {
            let n = if bias { p.bias.numel() } else { p.kernel.numel() };
            let a = if bias { grads[id].bias.as_f64().unwrap() } else { grads[id].kernel.as_f64().unwrap() };
            let (mut diff, mut norm_a, mut norm_n) = (0.0, 0.0, 0.0);
            for (i, &ai) in a.iter().enumerate().take(n) {
                let plus = objective(g, &perturbed(&w, id, bias, i, h), &x, &r, quant);
                let minus = objective(g, &perturbed(&w, id, bias, i, -h), &x, &r, quant);
                let num = (plus - minus) / (2.0 * h);
                let (fwd, bwd) = ((plus - f0) / h, (f0 - minus) / h);
                total += 1;
                if (fwd - bwd).abs() > 1e-3 * (1.0 + num.abs()) {
                    skipped += 1;
                    continue;
                }
                diff += (ai - num).powi(2);
                norm_a += ai * ai;
                norm_n += num * num;
            }
            let rel = diff.sqrt() / norm_a.sqrt().max(norm_n.sqrt()).max(1e-12);
            report.push((format!("{id}.{}", if bias { "bias" } else { "kernel" }), rel));
        }
    }
    assert!(skipped * 50 <= total, "{skipped} of {total} coordinates sit on kinks");
    report
}

fn assert_gradients(report: &[(String, f64)]) {
    for (name, rel) in report {
        assert!(*rel <= 1e-5, "{name}: relative error {rel:e}");
    }
}

/// Exponents chosen so that a share of activations and weights saturate.
fn tight_table(g: &Graph) -> QuantTable {
    let mut t = QuantTable::default();
    for n in g.nodes() {
        if is_quant_point(&n.op) {
            t.activations.insert(n.id.clone(), QuantParams::new(if n.op == Op::Input { 7 } else { 8 }));
        }
        if n.op.has_params() {
            t.weights.insert(n.id.clone(), QuantParams::new(9));
        }
    }
    t
}

#[test]
fn gradients_chain_ops() {
    assert_gradients(&gradient_check(&chain_graph(), 1, None));
}

#[test]
fn gradients_concat_and_transposed_conv() {
    assert_gradients(&gradient_check(&skip_graph(), 2, None));
}

#[test]
fn gradients_through_fake_quant() {
    for (g, seed) in [(chain_graph(), 3), (skip_graph(), 4)] {
        let table = tight_table(&g);
        assert_gradients(&gradient_check(&g, seed, Some(&table)));
    }
}

#[test]
fn fake_quant_saturation_blocks_gradient() {
    // y = fq(w * x) with w clipped: only in-range elements pass gradient
    let mut g = Graph::new("fq", vec![1, 1, 1, 4]);
    g.add("in", Op::Input, &[]).unwrap();
    g.add("f", Op::Flatten, &["in"]).unwrap();
    g.add("d", dense(1, 0.0), &["f"]).unwrap();
    let mut w = Weights::new();
    w.insert("d".into(), LayerParams {
        kernel: Tensor::from_f64(&[4, 1], vec![0.1, 2.0, -0.3, -5.0]).unwrap(),
        bias: Tensor::from_f64(&[1], vec![0.0]).unwrap(),
    });
    let mut t = QuantTable::default();
    t.weights.insert("d".into(), QuantParams::new(6)); // range [-2, 1.984375]
    t.activations.insert("in".into(), QuantParams::new(4));
    t.activations.insert("d".into(), QuantParams::new(4));
    let x = Tensor::from_f64(&[1, 1, 1, 4], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
    let opts = ForwardOptions { mode: Mode::Training, fake_quant: Some(&t), ..Default::default() };
    let (_, cache) = forward_with(&g, &w, &x, opts).unwrap();
    let grads = backward(&g, &cache, &Tensor::from_f64(&[1, 1], vec![1.0]).unwrap()).unwrap();
    // 0.1 and -0.3 are inside the range: local gradient exactly 1
    assert_eq!(grads["d"].kernel.as_f64().unwrap(), &[1.0, 0.0, 1.0, 0.0]);
    assert_eq!(grads["d"].bias.as_f64().unwrap(), &[1.0]);
}

#[test]
fn zero_output_grad_leaves_only_penalty() {
    let g = chain_graph();
    let w = init_params(&g, &mut Rng::new(5)).unwrap();
    let x = Tensor::new(&g.input_shape, 0.3).unwrap();
    let mut rng = Rng::new(1);
    let (y, cache) = crate::runtime::forward(&g, &w, &x, Mode::Training, Some(&mut rng)).unwrap();
    let grads = backward(&g, &cache, &Tensor::zeros(y.shape()).unwrap()).unwrap();
    for n in g.param_nodes() {
        let lambda = n.op.l2_lambda();
        let expect: Vec<f32> = w[&n.id].kernel.as_f32().unwrap().iter().map(|&v| (2.0 * lambda) as f32 * v).collect();
        assert_eq!(grads[&n.id].kernel.as_f32().unwrap(), expect.as_slice(), "{}", n.id);
        assert!(grads[&n.id].bias.as_f32().unwrap().iter().all(|&b| b == 0.0));
    }
}

#[test]
fn stale_or_inference_cache_is_rejected() {
    let g = chain_graph();
    let w = init_params(&g, &mut Rng::new(5)).unwrap();
    let x = Tensor::new(&g.input_shape, 0.3).unwrap();
    let (y, cache) = crate::runtime::forward(&g, &w, &x, Mode::Inference, None).unwrap();
    let seed = Tensor::zeros(y.shape()).unwrap();
    assert!(matches!(backward(&g, &cache, &seed), Err(Error::State(_))));

    let mut rng = Rng::new(1);
    let (_, cache) = crate::runtime::forward(&g, &w, &x, Mode::Training, Some(&mut rng)).unwrap();
    let mut other = g.clone();
    other.node_mut("d1").unwrap().op.set_l2_lambda(0.5);
    assert!(matches!(backward(&other, &cache, &seed), Err(Error::State(_))));
}

/// Four-spectrum toy task separable on one band.
fn toy_sets(n: usize, seed: u64) -> (Dataset, Dataset) {
    let mut rng = Rng::new(seed);
    let mut make = |count| {
        let records = (0..count)
            .map(|i| {
                let label = (i % 2) as u8;
                let mut v: Vec<f32> = (0..4).map(|_| rng.uniform(0.0, 1.0) as f32).collect();
                v[1] = if label == 1 { rng.uniform(0.6, 1.0) } else { rng.uniform(0.0, 0.4) } as f32;
                Record {
                    input: Tensor::from_f32(&[1, 4, 1, 1], v).unwrap(),
                    target: Tensor::from_f32(&[1, 1], vec![label as f32]).unwrap(),
                    label,
                    cloud_fraction: label as f64,
                }
            })
            .collect();
        Dataset::new(Split::Train, records)
    };
    let tr = make(n);
    let va = make(n / 2).with_split(Split::Val);
    (tr, va)
}

fn toy_graph(l2: f64) -> Graph {
    let mut g = Graph::new("toy", vec![1, 4, 1, 1]);
    g.add("in", Op::Input, &[]).unwrap();
    g.add("f", Op::Flatten, &["in"]).unwrap();
    g.add("d1", dense(8, l2), &["f"]).unwrap();
    g.add("r", RELU, &["d1"]).unwrap();
    g.add("d2", dense(1, l2), &["r"]).unwrap();
    g.add("out", SIGMOID, &["d2"]).unwrap();
    g
}

#[test]
fn training_learns_reproducibly() {
    let (tr, va) = toy_sets(200, 3);
    let cfg = TrainConfig { learning_rate: 1e-2, max_epochs: 30, patience: 30, batch_size: 16, seed: 7, ..Default::default() };
    let (w1, h1) = train(&toy_graph(0.0), &tr, &va, &cfg).unwrap();
    let (w2, h2) = train(&toy_graph(0.0), &tr, &va, &cfg).unwrap();
    assert_eq!(h1, h2);
    assert!(w1.iter().zip(&w2).all(|(a, b)| a.1.kernel.bitwise_eq(&b.1.kernel) && a.1.bias.bitwise_eq(&b.1.bias)));
    let best = h1.best().unwrap();
    assert!(best.val_acc >= 0.95, "{best:?}");
    assert!(h1.epochs.iter().all(|e| e.val_loss >= best.val_loss));
    let mut csv = Vec::new();
    h1.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("epoch,train_loss,val_loss,val_acc\n"));
    assert_eq!(text.lines().count(), h1.epochs.len() + 1);
}

#[test]
fn patience_stops_and_improvement_runs_to_the_end() {
    let (tr, va) = toy_sets(60, 4);
    // a tiny learning rate keeps validation loss improving every epoch
    let cfg = TrainConfig { learning_rate: 1e-4, max_epochs: 6, patience: 1, batch_size: 60, seed: 1, ..Default::default() };
    let (_, h) = train(&toy_graph(0.0), &tr, &va, &cfg).unwrap();
    assert_eq!(h.epochs.len(), 6);
    assert_eq!(h.best_epoch, 5);
    // a huge one overshoots and plateaus, so patience triggers early
    let cfg = TrainConfig { learning_rate: 10.0, max_epochs: 40, patience: 2, batch_size: 4, seed: 1, ..Default::default() };
    let (_, h) = train(&toy_graph(0.0), &tr, &va, &cfg).unwrap();
    assert!(h.epochs.len() < 40);
    assert_eq!(h.epochs.len(), h.best_epoch + 3);
}

#[test]
fn l2_penalty_shrinks_weights() {
    let (tr, va) = toy_sets(100, 5);
    let cfg = TrainConfig { learning_rate: 1e-2, max_epochs: 15, patience: 15, batch_size: 10, seed: 2, ..Default::default() };
    let norm = |lambda| {
        let g = toy_graph(lambda);
        let init = init_params(&g, &mut Rng::new(2)).unwrap();
        let (w, _) = fit(&g, init, &tr, &va, &TrainConfig { max_epochs: 15, ..cfg.clone() }, None).unwrap();
        crate::ir::l2_norm_sq(&w)
    };
    assert!(norm(1e-2) < norm(0.0));
    assert!(norm(1e-5) < norm(0.0));
}

#[test]
fn config_and_split_errors() {
    let (tr, va) = toy_sets(10, 6);
    let g = toy_graph(0.0);
    let empty = Dataset::new(Split::Val, vec![]);
    assert!(matches!(train(&g, &tr, &empty, &TrainConfig::default()), Err(Error::Argument(_))));
    let bad = TrainConfig { patience: 10, max_epochs: 5, ..Default::default() };
    assert!(matches!(train(&g, &tr, &va, &bad), Err(Error::Argument(_))));
    let bad = TrainConfig { learning_rate: 0.0, ..Default::default() };
    assert!(matches!(train(&g, &tr, &va, &bad), Err(Error::Argument(_))));
    let qat = TrainConfig { qat_enabled: true, max_epochs: 1, patience: 1, ..Default::default() };
    let init = init_params(&g, &mut Rng::new(0)).unwrap();
    assert!(matches!(fit(&g, init, &tr, &va, &qat, None), Err(Error::Argument(_))));
}


