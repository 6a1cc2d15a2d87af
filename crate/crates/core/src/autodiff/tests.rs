use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check_gradients, relative_error};
use super::*;
use crate::tensor::Tensor;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Six-nested-loop convolution (plus batch loop).
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros([n, o, oh, ow]);
    for b in 0..n {
        for oc in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for p in 0..kh {
                            for q in 0..kw {
                                let y = (i * stride + p) as isize - pad as isize;
                                let z = (j * stride + q) as isize - pad as isize;
                                if y < 0 || z < 0 || y >= h as isize || z >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[((b * c + ic) * h + y as usize) * wd + z as usize]
                                    * w.data()[((oc * c + ic) * kh + p) * kw + q];
                            }
                        }
                    }
                    out.data_mut()[((b * o + oc) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    out
}

fn conv_value(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let mut g = Graph::new();
    let xv = g.input(x.clone()).unwrap();
    let wv = g.input(w.clone()).unwrap();
    let y = g.conv2d(xv, wv, stride, pad).unwrap();
    g.value(y).clone()
}

#[test]
fn conv_identity_kernel() {
    let x = Tensor::from_fn([1, 1, 3, 3], |i| i as f64);
    let w = Tensor::full([1, 1, 1, 1], 1.0);
    assert_eq!(conv_value(&x, &w, 1, 0).data(), x.data());
}

#[test]
fn conv_all_ones() {
    let x = Tensor::full([1, 1, 4, 4], 1.0);
    let w = Tensor::full([1, 1, 3, 3], 1.0);
    let y = conv_value(&x, &w, 1, 0);
    assert_eq!(y.shape(), &[1, 1, 2, 2]);
    assert!(y.data().iter().all(|&v| v == 9.0));
}

#[test]
fn conv_matches_naive_oracle_fixed_case() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&mut rng, &[2, 3, 8, 8]);
    let w = rand_tensor(&mut rng, &[4, 3, 3, 3]);
    let fast = conv_value(&x, &w, 1, 1);
    let slow = naive_conv(&x, &w, 1, 1);
    for (a, b) in fast.data().iter().zip(slow.data()) {
        assert!(relative_error(*a, *b) < 1e-5);
    }
}

#[test]
fn conv_matches_naive_oracle_random_configs() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        let n = rng.random_range(1..3);
        let c = rng.random_range(1..4);
        let o = rng.random_range(1..4);
        let k = rng.random_range(1..4);
        let stride = rng.random_range(1..3);
        let pad = rng.random_range(0..2);
        let h = rng.random_range(k..k + 6);
        let x = rand_tensor(&mut rng, &[n, c, h, h + 1]);
        let w = rand_tensor(&mut rng, &[o, c, k, k]);
        let fast = conv_value(&x, &w, stride, pad);
        let slow = naive_conv(&x, &w, stride, pad);
        assert_eq!(fast.shape(), slow.shape());
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0));
        }
    }
}

#[test]
fn conv_errors() {
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::zeros([1, 2, 4, 4])).unwrap();
    let w = g.input(Tensor::zeros([1, 3, 3, 3])).unwrap();
    assert!(matches!(g.conv2d(x, w, 1, 0), Err(Error::ChannelMismatch { .. })));
    let w = g.input(Tensor::zeros([1, 2, 3, 3])).unwrap();
    assert!(g.conv2d(x, w, 0, 0).is_err());
    let big = g.input(Tensor::zeros([1, 2, 7, 7])).unwrap();
    assert!(g.conv2d(x, big, 1, 1).is_err());
}

fn bn_out(x: &Tensor<f64>, gamma: f64, beta: f64) -> (Tensor<f64>, RunningStats<f64>) {
    let c = x.shape()[1];
    let mut g = Graph::new();
    let xv = g.input(x.clone()).unwrap();
    let gv = g.input(Tensor::full([c], gamma)).unwrap();
    let bv = g.input(Tensor::full([c], beta)).unwrap();
    let mut stats = RunningStats::new(c);
    let y = g.batchnorm(xv, gv, bv, &mut stats, BnMode::Train).unwrap();
    (g.value(y).clone(), stats)
}

#[test]
fn batchnorm_normalized_input_is_fixed_point() {
    // Per channel: values {-1, 1} -> zero mean, unit variance.
    let x = Tensor::from_fn([2, 2, 1, 2], |i| if i % 2 == 0 { -1.0 } else { 1.0 });
    let (y, _) = bn_out(&x, 1.0, 0.0);
    for (a, b) in x.data().iter().zip(y.data()) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn batchnorm_zero_gamma_gives_beta() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[3, 2, 2, 2]);
    let (y, _) = bn_out(&x, 0.0, 0.7);
    assert!(y.data().iter().all(|&v| v == 0.7));
}

#[test]
fn batchnorm_statistics_and_running_update() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::from_fn([4, 3, 5, 5], |_| rng.random_range(-3.0..5.0));
    let (y, stats) = bn_out(&x, 1.0, 0.0);
    for ch in 0..3 {
        let vals: Vec<f64> = (0..4)
            .flat_map(|b| {
                let base = (b * 3 + ch) * 25;
                y.data()[base..base + 25].to_vec()
            })
            .collect();
        let raw: Vec<f64> = (0..4)
            .flat_map(|b| {
                let base = (b * 3 + ch) * 25;
                x.data()[base..base + 25].to_vec()
            })
            .collect();
        let m = vals.iter().sum::<f64>() / 100.0;
        let v = vals.iter().map(|e| (e - m) * (e - m)).sum::<f64>() / 100.0;
        assert!(m.abs() < 1e-4);
        assert!((v - 1.0).abs() < 1e-4);
        let rm = raw.iter().sum::<f64>() / 100.0;
        let rv = raw.iter().map(|e| (e - rm) * (e - rm)).sum::<f64>() / 99.0;
        assert!((stats.mean[ch] - 0.1 * rm).abs() < 1e-12);
        assert!((stats.var[ch] - (0.9 + 0.1 * rv)).abs() < 1e-12);
    }
}

#[test]
fn batchnorm_errors() {
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::zeros([0, 2, 2, 2])).unwrap();
    let p = g.input(Tensor::zeros([2])).unwrap();
    let mut st = RunningStats::new(2);
    assert!(matches!(
        g.batchnorm(x, p, p, &mut st, BnMode::Train),
        Err(Error::EmptyBatch(_))
    ));
    let x = g.input(Tensor::zeros([1, 3, 2, 2])).unwrap();
    assert!(g.batchnorm(x, p, p, &mut st, BnMode::Train).is_err());
}

#[test]
fn relu_linear_cross_entropy_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::new([2], vec![-1.0, 2.0]).unwrap()).unwrap();
    let r = g.relu(x).unwrap();
    assert_eq!(g.data(r), &[0.0, 2.0]);

    let k = 7;
    let logits = g.input(Tensor::zeros([3, k])).unwrap();
    let ce = g.cross_entropy(logits, &[0, 3, 6]).unwrap();
    assert!((g.scalar(ce) - (k as f64).ln()).abs() < 1e-12);
    assert!(matches!(
        g.cross_entropy(logits, &[0, 1, 7]),
        Err(Error::LabelOutOfRange { label: 7, classes: 7 })
    ));
    let empty = g.input(Tensor::zeros([0, k])).unwrap();
    assert!(matches!(g.cross_entropy(empty, &[]), Err(Error::EmptyBatch(_))));

    let xs = g.input(Tensor::from_fn([2, 3], |i| i as f64)).unwrap();
    let eye = g
        .input(Tensor::new([3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap())
        .unwrap();
    let y = g.linear(xs, eye, None).unwrap();
    assert_eq!(g.data(y), g.data(xs));
}

#[test]
fn backward_of_sum_is_ones() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::from_fn([2, 3, 4], |i| i as f64)).unwrap();
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().iter().all(|&v| v == 1.0));
}

#[test]
fn backward_of_sum_of_squares() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::new([2], vec![1.0, 2.0]).unwrap()).unwrap();
    let sq = g.square(x).unwrap();
    let s = g.sum(sq).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
}

#[test]
fn second_backward_is_an_error() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::scalar(3.0)).unwrap();
    let y = g.square(x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.backward(y), Err(Error::DeadGraph));
}

#[test]
fn backward_needs_scalar() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::zeros([2])).unwrap();
    assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
}

#[test]
fn non_finite_values_are_rejected_with_node_name() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::scalar(1e300)).unwrap();
    let err = g.square(x).unwrap_err();
    assert_eq!(err, Error::NonFinite { node: 1, op: "square" });
    assert!(g.leaf(Tensor::scalar(f64::NAN)).is_err());
}

#[test]
fn non_finite_gradients_are_rejected() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::scalar(-1.0 + 1e-12)).unwrap();
    let y = g.ln1p(x).unwrap();
    let z = g.scale(y, 1e300).unwrap();
    assert!(matches!(g.backward(z), Err(Error::NonFinite { .. })));
}

fn check(inputs: &[Tensor<f64>], build: impl FnMut(&mut Graph<f64>, &[Var]) -> crate::Result<Var>) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let report = check_gradients(inputs, 100, 1e-5, &mut rng, build).unwrap();
    assert!(report.passes(1e-6), "{report:?}");
}

/// Projects a tensor onto fixed pseudo-random weights so every output
/// coordinate carries a distinct gradient.
fn probe(g: &mut Graph<f64>, y: Var) -> crate::Result<Var> {
    let n = g.value(y).numel();
    let w = Tensor::from_fn(g.shape(y).to_vec(), |i| ((i * 37 + 11) % 17) as f64 / 17.0 - 0.4);
    let _ = n;
    let wv = g.input(w)?;
    let p = g.mul(y, wv)?;
    g.sum(p)
}

#[test]
fn gradcheck_conv2d() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[2, 3, 6, 6]);
    let w = rand_tensor(&mut rng, &[4, 3, 3, 3]);
    check(&[x.clone(), w.clone()], |g, v| {
        let y = g.conv2d(v[0], v[1], 2, 1)?;
        probe(g, y)
    });
    let w1 = rand_tensor(&mut rng, &[2, 3, 1, 1]);
    check(&[x, w1], |g, v| {
        let y = g.conv2d(v[0], v[1], 1, 0)?;
        probe(g, y)
    });
}

#[test]
fn gradcheck_batchnorm_train_and_eval() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    let gamma = rand_tensor(&mut rng, &[2]);
    let beta = rand_tensor(&mut rng, &[2]);
    for mode in [BnMode::Train, BnMode::Eval] {
        let mut stats = RunningStats::new(2);
        stats.mean = vec![0.2, -0.1];
        stats.var = vec![1.5, 0.7];
        check(&[x.clone(), gamma.clone(), beta.clone()], |g, v| {
            let mut st = stats.clone();
            let y = g.batchnorm(v[0], v[1], v[2], &mut st, mode)?;
            probe(g, y)
        });
    }
}

#[test]
fn gradcheck_relu_pool_linear_ce() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(&mut rng, &[2, 3, 4, 4]);
    check(&[x.clone()], |g, v| {
        let y = g.relu(v[0])?;
        probe(g, y)
    });
    check(&[x.clone()], |g, v| {
        let y = g.maxpool2d(v[0], 2)?;
        probe(g, y)
    });
    check(&[x], |g, v| {
        let y = g.global_avgpool(v[0])?;
        probe(g, y)
    });
    let a = rand_tensor(&mut rng, &[4, 5]);
    let w = rand_tensor(&mut rng, &[5, 3]);
    let b = rand_tensor(&mut rng, &[3]);
    check(&[a, w, b], |g, v| {
        let y = g.linear(v[0], v[1], Some(v[2]))?;
        g.cross_entropy(y, &[0, 2, 1, 2])
    });
}

#[test]
fn gradcheck_elementwise_and_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = rand_tensor(&mut rng, &[6]);
    let b = rand_tensor(&mut rng, &[6]);
    check(&[a.clone(), b.clone()], |g, v| {
        let s = g.add(v[0], v[1])?;
        let m = g.mul(s, v[1])?;
        let q = g.square(m)?;
        let sc = g.scale(q, 0.3)?;
        let c = g.add_const(sc, 2.0)?;
        let l = g.ln1p(c)?;
        g.sum(l)
    });
    let m = rand_tensor(&mut rng, &[4, 6]);
    let s = rand_tensor(&mut rng, &[1]);
    check(&[m, a.clone(), s], |g, v| {
        let y = g.matvec(v[0], v[1])?;
        let y = g.add_scalar(y, v[2])?;
        let y = g.mul_const(y, &[1.0, -2.0, 0.5, 3.0])?;
        let r = g.reshape(y, &[2, 2])?;
        probe(g, r)
    });
    check(&[a], |g, v| {
        let parts: Vec<Var> = (0..3)
            .map(|i| {
                let t = g.scale(v[0], (i + 1) as f64)?;
                g.sum(t)
            })
            .collect::<crate::Result<_>>()?;
        let st = g.stack(&parts)?;
        probe(g, st)
    });
}

#[test]
fn gradcheck_channel_scale_and_sigmoid_gate() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = rand_tensor(&mut rng, &[2, 3, 2, 2]);
    let s = rand_tensor(&mut rng, &[3]);
    check(&[x, s], |g, v| {
        let gates = g.sigmoid_gate(v[1], 4.0)?;
        let y = g.channel_scale(v[0], gates)?;
        probe(g, y)
    });
}

#[test]
fn binary_gate_backward_uses_surrogate() {
    let mut g = Graph::<f64>::new();
    let s = g.leaf(Tensor::new([4], vec![-0.25, 0.0, 0.25, 0.9]).unwrap()).unwrap();
    let gates = g.binary_gate(s, 1).unwrap();
    assert_eq!(g.data(gates), &[0.0, 1.0, 1.0, 1.0]);
    let total = g.sum(gates).unwrap();
    g.backward(total).unwrap();
    assert_eq!(g.grad(s).unwrap(), &[1.0, 2.0, 1.0, 0.0]);
}

#[test]
fn deterministic_graph_values() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f32>::from_fn([2, 3, 8, 8], |_| rng.random_range(-1.0..1.0));
        let w = Tensor::<f32>::from_fn([4, 3, 3, 3], |_| rng.random_range(-1.0..1.0));
        let mut g = Graph::new();
        let xv = g.input(x).unwrap();
        let wv = g.leaf(w).unwrap();
        let y = g.conv2d(xv, wv, 1, 1).unwrap();
        let p = g.global_avgpool(y).unwrap();
        let l = g.cross_entropy(p, &[1, 3]).unwrap();
        g.backward(l).unwrap();
        (g.scalar(l).to_bits(), g.grad(wv).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
    let _ = vec![0u8];
}
