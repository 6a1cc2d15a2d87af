use gatecrush_core::autodiff::gradcheck::check_gradients;
use gatecrush_core::efficiency::{flops_network, flops_network_int, sample_encodings, width_grid};
use gatecrush_core::gates::{
    binary_activation, layer_encoding, reshape_weights, surrogate_grad, surrogate_lambda, unreshape_weights,
};
use gatecrush_core::models::{ArchitectureSpec, Gating, Model};
use gatecrush_core::optim::Sgd;
use gatecrush_core::pruner::export_with_pattern;
use gatecrush_core::{BnMode, Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn specs() -> Vec<ArchitectureSpec> {
    vec![
        ArchitectureSpec::vgg_small(10),
        ArchitectureSpec::vgg16(10),
        ArchitectureSpec::resnet(1, 10),
        ArchitectureSpec::resnet(9, 10),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn surrogate_is_monotone_and_bounded(a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (la, lb) = (surrogate_lambda(lo), surrogate_lambda(hi));
        prop_assert!((0.0..=1.0).contains(&la) && (0.0..=1.0).contains(&lb));
        prop_assert!(la <= lb);
    }

    #[test]
    fn surrogate_is_continuous(x in -1.0f64..1.0) {
        let h = 1e-9;
        prop_assert!((surrogate_lambda(x + h) - surrogate_lambda(x - h)).abs() < 1e-8);
    }

    #[test]
    fn surrogate_grad_is_derivative(x in -1.0f64..1.0) {
        prop_assume!([-0.5, 0.0, 0.5].iter().all(|b| (x - b).abs() > 0.01));
        let h = 1e-6;
        let fd = (surrogate_lambda(x + h) - surrogate_lambda(x - h)) / (2.0 * h);
        prop_assert!((fd - surrogate_grad(x)).abs() < 1e-6);
    }

    #[test]
    fn binary_gates_threshold_at_zero(s in prop::collection::vec(-1.0f64..1.0, 1..64)) {
        let g = binary_activation(&s).unwrap();
        for (gi, si) in g.iter().zip(&s) {
            prop_assert_eq!(*gi, if *si >= 0.0 { 1.0 } else { 0.0 });
        }
        prop_assert_eq!(layer_encoding(&g).unwrap(), s.iter().filter(|v| **v >= 0.0).count());
    }

    #[test]
    fn reshape_round_trip(o in 1usize..5, i in 1usize..5, k in 1usize..4, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Tensor::<f64>::from_fn([o, i, k, k], |_| rng.random_range(-1.0..1.0));
        let rows = reshape_weights(&w).unwrap();
        prop_assert_eq!(rows.shape(), &[o, i * k * k]);
        prop_assert_eq!(unreshape_weights(&rows, i, k, k).unwrap(), w);
    }

    #[test]
    fn flops_monotone_in_every_coordinate(which in 0usize..4, seed: u64) {
        let spec = &specs()[which];
        let geom = spec.geometry().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = sample_encodings(&geom, 1, &mut rng).pop().unwrap();
        let base = flops_network_int(&geom, &enc.counts).unwrap();
        for l in 0..geom.len() {
            let mut wider = enc.counts.clone();
            if wider[l] < geom.layers[l].max_width {
                wider[l] += 1;
                prop_assert!(flops_network_int(&geom, &wider).unwrap() >= base);
            }
        }
        let real = flops_network(&geom, &enc.as_f64()).unwrap();
        prop_assert_eq!(real, base as f64);
    }

    #[test]
    fn sampled_widths_stay_on_grid(which in 0usize..4, seed: u64) {
        let geom = specs()[which].geometry().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for enc in sample_encodings(&geom, 8, &mut rng) {
            for (c, layer) in enc.counts.iter().zip(&geom.layers) {
                if layer.gated {
                    prop_assert!(width_grid(layer.max_width).contains(c));
                    prop_assert!(*c >= layer.max_width.div_ceil(10));
                } else {
                    prop_assert_eq!(*c, layer.max_width);
                }
            }
        }
    }

    #[test]
    fn sgd_matches_closed_form(lr in 0.001f64..1.0, m in 0.0f64..0.99, g1 in -2.0f64..2.0, g2 in -2.0f64..2.0) {
        let mut opt = Sgd::new(lr, m, 0.0);
        let mut p = [0.5];
        opt.update(0, &mut p, &[g1], false).unwrap();
        opt.update(0, &mut p, &[g2], false).unwrap();
        let want = 0.5 - lr * g1 - lr * (m * g1 + g2);
        prop_assert!((p[0] - want).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn composite_gradients_match_finite_differences(seed: u64, stride in 1usize..3, pad in 0usize..2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = |shape: &[usize]| Tensor::<f64>::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0));
        let inputs = [t(&[2, 2, 5, 5]), t(&[3, 2, 3, 3]), t(&[3]), t(&[3])];
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let report = check_gradients(&inputs, 40, 1e-5, &mut rng, |g, v| {
            let y = g.conv2d(v[0], v[1], stride, pad)?;
            let mut stats = gatecrush_core::RunningStats::new(3);
            let y = g.batchnorm(y, v[2], v[3], &mut stats, BnMode::Train)?;
            let y = g.square(y)?;
            let y = g.global_avgpool(y)?;
            g.sum(y)
        })
        .unwrap();
        prop_assert!(report.passes(1e-6), "{:?}", report);
    }

    #[test]
    fn export_matches_gated_forward(which in 0usize..3, seed: u64) {
        let spec = [ArchitectureSpec::toy(3, 8), ArchitectureSpec::resnet(1, 4), ArchitectureSpec::vgg_small(4)][which].clone();
        let spec = ArchitectureSpec { resolution: 8, ..spec };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = Model::<f64>::new(&spec, &mut rng).unwrap();
        for st in model.bn_stats.iter_mut() {
            st.mean.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
            st.var.iter_mut().for_each(|v| *v = rng.random_range(0.5..2.0));
        }
        let pattern: Vec<Option<Vec<f64>>> = (0..model.num_layers())
            .map(|l| {
                model.is_gateable(l).then(|| {
                    let w = model.widths[l];
                    let keep = rng.random_range(0..w);
                    (0..w).map(|i| if i == keep || rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect()
                })
            })
            .collect();
        let x = Tensor::<f64>::from_fn([3, 3, 8, 8], |_| rng.random_range(-1.0..1.0));
        let gated = model.predict(&x, BnMode::Eval, Gating::Fixed(&pattern)).unwrap();
        let mut slim = export_with_pattern(&model, &pattern).unwrap().model;
        let out = slim.predict(&x, BnMode::Eval, Gating::Off).unwrap();
        for (a, b) in gated.data().iter().zip(out.data()) {
            prop_assert!((a - b).abs() <= 1e-8 * a.abs().max(1.0), "{} vs {}", a, b);
        }
    }
}

#[test]
fn graph_is_deterministic() {
    let run = || {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::from_fn([4, 3], |i| i as f32 * 0.1)).unwrap();
        let y = g.square(x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        g.grad(x).unwrap().to_vec()
    };
    assert_eq!(run(), run());
}
