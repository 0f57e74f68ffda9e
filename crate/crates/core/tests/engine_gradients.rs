use flatland::engine::{GradientOverride, Graph, ParamKind, ParamStore, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0)).unwrap()
}

#[test]
fn dense_identity() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 2], &[1.0, 2.0]));
    let w = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b = g.constant(t(&[2], &[0.0, 0.0]));
    let y = g.dense(x, w, Some(b)).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0]);
}

#[test]
fn relu_definition() {
    let mut g = Graph::new();
    let x = g.constant(t(&[3], &[-1.0, 0.0, 3.0]));
    let y = g.relu(x);
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 3.0]);
}

/// Direct nested-loop convolution used as the oracle for the lowered path.
fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let [n, c, h, wd] = x.shape().try_into().unwrap();
    let [o, _, k, _] = w.shape().try_into().unwrap();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for f in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        for u in 0..k {
                            for v in 0..k {
                                let y = (i * stride + u) as isize - pad as isize;
                                let z = (j * stride + v) as isize - pad as isize;
                                if y >= 0 && z >= 0 && (y as usize) < h && (z as usize) < wd {
                                    acc += x.data()[((b * c + ch) * h + y as usize) * wd + z as usize]
                                        * w.data()[((f * c + ch) * k + u) * k + v];
                                }
                            }
                        }
                    }
                    out[((b * o + f) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, o, oh, ow], out).unwrap()
}

#[test]
fn conv_all_ones_is_nine() {
    let ones = Tensor::<f64>::full(vec![1, 1, 3, 3], 1.0).unwrap();
    let expect = conv_oracle(&ones, &ones, 1, 0);
    assert_eq!(expect.data(), &[9.0]);
    let mut g = Graph::new();
    let x = g.constant(ones.clone());
    let w = g.constant(ones);
    let y = g.conv2d(x, w, None, 1, 0).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
    assert_eq!(g.value(y).data(), expect.data());
}

#[test]
fn conv_matches_nested_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for &(k, stride, pad) in &[(1, 1, 0), (3, 1, 1), (3, 2, 1), (1, 2, 0), (3, 1, 0)] {
        let x = random(&[2, 3, 6, 5], &mut rng);
        let w = random(&[4, 3, k, k], &mut rng);
        let expect = conv_oracle(&x, &w, stride, pad);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let wv = g.constant(w);
        let y = g.conv2d(xv, wv, None, stride, pad).unwrap();
        assert_eq!(g.value(y).shape(), expect.shape());
        for (a, b) in g.value(y).data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn shape_errors_name_the_shapes() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(vec![2, 3]).unwrap());
    let w = g.constant(Tensor::zeros(vec![4, 5]).unwrap());
    let err = g.dense(x, w, None).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
    let a = g.constant(Tensor::zeros(vec![2]).unwrap());
    assert!(g.add(a, x).is_err());
    let img = g.constant(Tensor::zeros(vec![1, 3, 4, 4]).unwrap());
    let k = g.constant(Tensor::zeros(vec![2, 2, 3, 3]).unwrap());
    assert!(g.conv2d(img, k, None, 1, 1).is_err());
    let k3 = g.constant(Tensor::zeros(vec![2, 3, 3, 3]).unwrap());
    assert!(g.conv2d(img, k3, None, 3, 1).is_err());
}

#[test]
fn backward_on_empty_tape_is_rejected() {
    let mut g = Graph::<f64>::new();
    let mut store = ParamStore::new();
    // a Var from another tape cannot be used; an empty tape is the error case
    let mut other = Graph::<f64>::new();
    let v = other.constant(Tensor::scalar(1.0));
    assert!(matches!(g.backward(v, &mut store), Err(flatland::Error::EmptyTape)));
}

#[test]
fn square_gradient() {
    let mut store = ParamStore::new();
    let id = store.insert("x", ParamKind::Bias, Tensor::scalar(3.0)).unwrap();
    let mut g = Graph::new();
    let x = g.param(&store, id);
    let sq = g.mul(x, x).unwrap();
    g.backward(sq, &mut store).unwrap();
    assert_eq!(store.get(id).grad, vec![6.0]);
}

#[test]
fn linear_map_gradient_is_outer_product() {
    let mut store = ParamStore::new();
    let w0 = t(&[2, 3], &[0.5, -1.0, 2.0, 3.0, 0.0, 1.5]);
    let id = store.insert("w", ParamKind::DenseWeight, w0).unwrap();
    let mut g = Graph::new();
    let v = g.constant(t(&[1, 3], &[1.0, 1.0, 1.0]));
    let w = g.param(&store, id);
    let y = g.dense(v, w, None).unwrap();
    let loss = g.sum(y);
    g.backward(loss, &mut store).unwrap();
    assert_eq!(store.get(id).grad, vec![1.0; 6]);
}

fn quadratic_grad(store: &mut ParamStore<f64>, scale: f64) {
    let ids: Vec<_> = store.ids().collect();
    let mut g = Graph::new();
    let w = g.param(store, ids[0]);
    let b = g.param(store, ids[1]);
    let x = g.constant(t(&[2, 2], &[1.0, -2.0, 0.5, 4.0]));
    let y = g.dense(x, w, Some(b)).unwrap();
    let y2 = g.mul(y, y).unwrap();
    let s = g.sum(y2);
    let loss = g.scale(s, scale);
    g.backward(loss, store).unwrap();
}

fn small_store() -> ParamStore<f64> {
    let mut store = ParamStore::new();
    store.insert("w", ParamKind::DenseWeight, t(&[3, 2], &[0.1, 0.2, -0.3, 0.4, 0.5, -0.6])).unwrap();
    store.insert("b", ParamKind::Bias, t(&[3], &[0.0, 0.1, -0.1])).unwrap();
    store.insert("unused", ParamKind::Bias, t(&[2], &[1.0, 1.0])).unwrap();
    store
}

#[test]
fn zero_grad_and_accumulation() {
    let mut store = small_store();
    quadratic_grad(&mut store, 1.0);
    let once: Vec<Vec<f64>> = store.iter().map(|p| p.grad.clone()).collect();
    assert!(once[0].iter().any(|&v| v != 0.0));
    assert_eq!(once[2], vec![0.0, 0.0], "never-used parameter stays zero");
    quadratic_grad(&mut store, 1.0);
    for (p, g1) in store.iter().zip(&once) {
        let doubled: Vec<f64> = g1.iter().map(|v| 2.0 * v).collect();
        assert_eq!(p.grad, doubled);
    }
    store.zero_grad();
    assert!(store.iter().all(|p| p.grad.iter().all(|&v| v == 0.0)));
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut s1 = small_store();
    quadratic_grad(&mut s1, 1.0);
    let g1: Vec<f64> = s1.iter().flat_map(|p| p.grad.clone()).collect();
    let mut s2 = small_store();
    quadratic_grad(&mut s2, 2.5);
    quadratic_grad(&mut s2, -0.5);
    let g2: Vec<f64> = s2.iter().flat_map(|p| p.grad.clone()).collect();
    for (a, b) in g1.iter().zip(&g2) {
        assert!((2.0 * a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }
}

#[derive(Debug)]
struct FixedScale(Vec<f64>);

impl GradientOverride<f64> for FixedScale {
    fn backward_scales(&mut self, _batch: usize) -> Vec<f64> {
        self.0.clone()
    }
    fn as_any(&self) -> &dyn std::any::Any {
        self
    }
}

/// Every op kind, wired from leaves so finite differences can be taken on
/// the inputs. Returns a scalar made by contracting the op output with a
/// fixed random tensor.
fn build_op(kind: &str, g: &mut Graph<f64>, leaves: &[Var], rng: &mut ChaCha8Rng) -> Var {
    let out = match kind {
        "dense" => g.dense(leaves[0], leaves[1], Some(leaves[2])).unwrap(),
        "conv_s1" => g.conv2d(leaves[0], leaves[1], Some(leaves[2]), 1, 1).unwrap(),
        "conv_s2" => g.conv2d(leaves[0], leaves[1], Some(leaves[2]), 2, 1).unwrap(),
        "conv_1x1" => g.conv2d(leaves[0], leaves[1], None, 1, 0).unwrap(),
        "bn_train" => g.batch_norm_train(leaves[0], leaves[1], leaves[2]).unwrap().0,
        "bn_eval" => g
            .batch_norm_eval(leaves[0], leaves[1], leaves[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 0.9])
            .unwrap(),
        "relu" => g.relu(leaves[0]),
        "gap" => g.global_avg_pool(leaves[0]).unwrap(),
        "avg_pool2" => g.avg_pool2(leaves[0]).unwrap(),
        "pad_channels" => g.pad_channels(leaves[0], 5).unwrap(),
        "add" => g.add(leaves[0], leaves[1]).unwrap(),
        "mul" => g.mul(leaves[0], leaves[1]).unwrap(),
        "scale" => g.scale(leaves[0], -1.7),
        "scale_rows" => g.scale_rows(leaves[0], vec![0.3, -2.0]).unwrap(),
        "join" => g
            .residual_join(leaves[0], leaves[1], &[0.4, 1.0], Box::new(FixedScale(vec![0.4, 1.0])))
            .unwrap(),
        "softmax" => g.softmax(leaves[0]).unwrap(),
        "log_softmax" => g.log_softmax(leaves[0]).unwrap(),
        "nll" => {
            let lp = g.log_softmax(leaves[0]).unwrap();
            let tg = t(&[2, 4], &[0.0, 1.0, 0.0, 0.0, 0.25, 0.0, 0.75, 0.0]);
            return g.soft_target_nll(lp, &tg).unwrap();
        }
        "kl_target_first" | "kl_literal" => {
            let lq = g.log_softmax(leaves[0]).unwrap();
            let tl = Tensor::new(
                vec![2, 4],
                flatland::engine::log_softmax_rows(&[0.3, -1.0, 2.0, 0.0, 1.0, 1.0, -0.5, 0.2], 4),
            )
            .unwrap();
            return g.kl_div(lq, &tl, kind == "kl_target_first").unwrap();
        }
        other => panic!("unknown op {other}"),
    };
    let weights = random(g.value(out).shape(), rng);
    let wv = g.constant(weights);
    let prod = g.mul(out, wv).unwrap();
    g.sum(prod)
}

fn shapes(kind: &str) -> Vec<Vec<usize>> {
    match kind {
        "dense" => vec![vec![2, 3], vec![4, 3], vec![4]],
        "conv_s1" | "conv_s2" => vec![vec![2, 2, 4, 4], vec![3, 2, 3, 3], vec![3]],
        "conv_1x1" => vec![vec![2, 3, 3, 3], vec![2, 3, 1, 1]],
        "bn_train" | "bn_eval" => vec![vec![2, 3, 2, 2], vec![3], vec![3]],
        "relu" | "gap" | "avg_pool2" | "pad_channels" | "scale" | "scale_rows" => vec![vec![2, 3, 2, 2]],
        "add" | "mul" | "join" => vec![vec![2, 3, 2, 2], vec![2, 3, 2, 2]],
        _ => vec![vec![2, 4]],
    }
}

fn eval_op(kind: &str, inputs: &[Tensor<f64>], seed: u64) -> (f64, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new();
    let leaves: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
    let loss = build_op(kind, &mut g, &leaves, &mut rng);
    let value = g.value(loss).data()[0];
    let mut store = ParamStore::new();
    let grads = g.backward(loss, &mut store).unwrap();
    let gs = leaves.iter().map(|&l| grads.get(l).unwrap().to_vec()).collect();
    (value, gs)
}

const OPS: &[&str] = &[
    "dense",
    "conv_s1",
    "conv_s2",
    "conv_1x1",
    "bn_train",
    "bn_eval",
    "relu",
    "gap",
    "avg_pool2",
    "pad_channels",
    "add",
    "mul",
    "scale",
    "scale_rows",
    "join",
    "softmax",
    "log_softmax",
    "nll",
    "kl_target_first",
    "kl_literal",
];

#[test]
fn every_op_matches_central_differences() {
    let h = 1e-4;
    for (case, kind) in OPS.iter().enumerate() {
        for trial in 0..3u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 * case as u64 + trial);
            let mut inputs: Vec<Tensor<f64>> = shapes(kind).iter().map(|s| random(s, &mut rng)).collect();
            if *kind == "relu" {
                // keep away from the kink so the difference quotient is smooth
                inputs[0] = inputs[0].map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
            }
            let (_, analytic) = eval_op(kind, &inputs, trial);
            for li in 0..inputs.len() {
                for e in 0..inputs[li].numel() {
                    let mut plus = inputs.clone();
                    plus[li].data_mut()[e] += h;
                    let mut minus = inputs.clone();
                    minus[li].data_mut()[e] -= h;
                    let fd = (eval_op(kind, &plus, trial).0 - eval_op(kind, &minus, trial).0) / (2.0 * h);
                    let a = analytic[li][e];
                    let err = (a - fd).abs();
                    assert!(
                        err <= 1e-3 * a.abs().max(fd.abs()) || err <= 1e-8,
                        "{kind} input {li} elem {e}: analytic {a} vs fd {fd}"
                    );
                }
            }
        }
    }
}

#[test]
fn gradient_shapes_match_parameters() {
    let mut store = small_store();
    quadratic_grad(&mut store, 1.0);
    for p in store.iter() {
        assert_eq!(p.grad.len(), p.value.numel());
    }
}

proptest! {
    #[test]
    fn identical_inputs_give_bit_identical_gradients(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor<f64>> = shapes("conv_s2").iter().map(|s| random(s, &mut rng)).collect();
        let (v1, g1) = eval_op("conv_s2", &inputs, seed);
        let (v2, g2) = eval_op("conv_s2", &inputs, seed);
        prop_assert_eq!(v1.to_bits(), v2.to_bits());
        prop_assert_eq!(g1, g2);
    }
}
