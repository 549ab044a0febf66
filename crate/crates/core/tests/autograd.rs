use approx::assert_abs_diff_eq;
use dir_learn_core::autograd::{BatchNormMode, Reduction, Tape};
use dir_learn_core::gradcheck;
use dir_learn_core::params::ParamStore;
use dir_learn_core::{Error, Tensor};
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn conv_examples() {
    let mut tape = Tape::new();
    let x = tape.input(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let w = tape.input(t(&[1, 1, 1, 1], &[2.0]));
    let b = tape.input(t(&[1], &[0.0]));
    let y = tape.conv2d(x, w, b).unwrap();
    assert_eq!(tape.value(y).data(), &[2.0, 4.0, 6.0, 8.0]);

    let ones = tape.input(Tensor::full(&[1, 1, 2, 2], 1.0));
    let y = tape.conv2d(x, ones, b).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
    assert_eq!(tape.value(y).item(), 10.0);

    let z = tape.input(Tensor::zeros(&[2, 1, 3, 3]));
    let w2 = tape.input(t(&[2, 1, 2, 2], &[0.3, -1.0, 2.0, 0.5, 1.0, 1.0, 1.0, 1.0]));
    let b2 = tape.input(t(&[2], &[1.5, -0.25]));
    let y = tape.conv2d(z, w2, b2).unwrap();
    let v = tape.value(y);
    assert_eq!(v.shape(), &[2, 2, 2, 2]);
    for n in 0..2 {
        for c in 0..2 {
            let want = if c == 0 { 1.5 } else { -0.25 };
            assert!(v.data()[(n * 2 + c) * 4..(n * 2 + c + 1) * 4].iter().all(|&e| e == want));
        }
    }
}

#[test]
fn conv_rejects_bad_channels_naming_axis() {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::zeros(&[1, 2, 4, 4]));
    let w = tape.input(Tensor::zeros(&[1, 3, 2, 2]));
    let b = tape.input(Tensor::zeros(&[1]));
    match tape.conv2d(x, w, b) {
        Err(Error::Dimension { axis, .. }) => assert!(axis.contains("channel"), "{axis}"),
        other => panic!("expected dimension error, got {other:?}"),
    }
    let big = tape.input(Tensor::zeros(&[1, 2, 5, 5]));
    let small = tape.input(Tensor::zeros(&[1, 2, 4, 4]));
    let b = tape.input(Tensor::zeros(&[1]));
    assert!(matches!(tape.conv2d(small, big, b), Err(Error::Dimension { .. })));
}

fn bn_store() -> (ParamStore, dir_learn_core::params::ParamId, dir_learn_core::params::ParamId) {
    let mut s = ParamStore::new();
    let m = s.add("bn.running_mean", Tensor::zeros(&[1]), false);
    let v = s.add("bn.running_var", Tensor::full(&[1], 1.0), false);
    (s, m, v)
}

#[test]
fn batch_norm_examples() {
    let (mut store, rm, rv) = bn_store();
    let mut tape = Tape::new();
    let x = tape.input(t(&[2, 1, 1, 1], &[1.0, 3.0]));
    let g = tape.input(t(&[1], &[1.0]));
    let b = tape.input(t(&[1], &[0.0]));
    let y = tape.batch_norm(x, g, b, BatchNormMode::Train, &store, rm, rv).unwrap();
    let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert_abs_diff_eq!(tape.value(y).data()[0], -expect, epsilon = 1e-15);
    assert_abs_diff_eq!(tape.value(y).data()[1], expect, epsilon = 1e-15);
    assert_abs_diff_eq!(expect, 0.999995, epsilon = 1e-7);

    store.apply_stat_updates(tape.take_stat_updates());
    assert_abs_diff_eq!(store.get(rm).item(), 0.2, epsilon = 1e-15);
    // unbiased batch variance is 2
    assert_abs_diff_eq!(store.get(rv).item(), 0.9 + 0.2, epsilon = 1e-15);

    let c = tape.input(Tensor::full(&[3, 1, 2, 2], 7.0));
    let y = tape.batch_norm(c, g, b, BatchNormMode::Train, &store, rm, rv).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    let g0 = tape.input(t(&[1], &[0.0]));
    let b5 = tape.input(t(&[1], &[5.0]));
    let y = tape.batch_norm(x, g0, b5, BatchNormMode::Train, &store, rm, rv).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 5.0));

    let y = tape.batch_norm(x, g, b, BatchNormMode::Eval, &store, rm, rv).unwrap();
    let sd = (1.1f64 + 1e-5).sqrt();
    assert_abs_diff_eq!(tape.value(y).data()[0], (1.0 - 0.2) / sd, epsilon = 1e-15);
}

#[test]
fn batch_norm_degenerate_batch() {
    let (store, rm, rv) = bn_store();
    let mut tape = Tape::new();
    let x = tape.input(t(&[1, 1, 1, 1], &[1.0]));
    let g = tape.input(t(&[1], &[1.0]));
    let b = tape.input(t(&[1], &[0.0]));
    let err = tape.batch_norm(x, g, b, BatchNormMode::Train, &store, rm, rv).unwrap_err();
    assert!(matches!(err, Error::DegenerateBatch { .. }));
    assert!(tape.batch_norm(x, g, b, BatchNormMode::Eval, &store, rm, rv).is_ok());
}

#[test]
fn max_pool_examples() {
    let mut tape = Tape::new();
    let x = tape.input(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = tape.max_pool2d(x, 2, 2).unwrap();
    assert_eq!(tape.value(y).data(), &[4.0]);

    let c = tape.input(Tensor::full(&[1, 2, 4, 4], -3.0));
    let y = tape.max_pool2d(c, 2, 2).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 2, 2, 2]);
    assert!(tape.value(y).data().iter().all(|&v| v == -3.0));

    let tie = tape.variable(Tensor::full(&[1, 1, 2, 2], 4.0));
    let y = tape.max_pool2d(tie, 2, 2).unwrap();
    let loss = tape.sum(y);
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.wrt(tie).unwrap(), &[1.0, 0.0, 0.0, 0.0]);

    let odd = tape.input(Tensor::zeros(&[1, 1, 5, 3]));
    let pooled = tape.max_pool2d(odd, 2, 2).unwrap();
    assert_eq!(tape.value(pooled).shape(), &[1, 1, 2, 1]);
    let tiny = tape.input(Tensor::zeros(&[1, 1, 1, 3]));
    assert!(matches!(tape.max_pool2d(tiny, 2, 2), Err(Error::Dimension { .. })));
}

#[test]
fn linear_examples() {
    let mut tape = Tape::new();
    let x = tape.input(t(&[1, 2], &[1.0, 2.0]));
    let w = tape.input(t(&[1, 2], &[3.0, 4.0]));
    let b = tape.input(t(&[1], &[1.0]));
    let y = tape.linear(x, w, b).unwrap();
    assert_eq!(tape.value(y).data(), &[12.0]);

    let x = tape.input(t(&[2, 2], &[1.0, -2.0, 0.5, 3.0]));
    let eye = tape.input(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let zb = tape.input(Tensor::zeros(&[2]));
    let y = tape.linear(x, eye, zb).unwrap();
    assert_eq!(tape.value(y).data(), tape.value(x).data());

    let zw = tape.input(Tensor::zeros(&[3, 2]));
    let bb = tape.input(t(&[3], &[1.0, 2.0, 3.0]));
    let y = tape.linear(x, zw, bb).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);

    let bad = tape.input(Tensor::zeros(&[3, 5]));
    assert!(matches!(tape.linear(x, bad, bb), Err(Error::Dimension { .. })));
}

#[test]
fn relu_and_softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.input(t(&[1, 2], &[-1.0, 2.0]));
    let y = tape.relu(x);
    assert_eq!(tape.value(y).data(), &[0.0, 2.0]);

    let z = tape.input(t(&[1, 2], &[0.0, 0.0]));
    let p = tape.softmax(z).unwrap();
    assert_eq!(tape.value(p).data(), &[0.5, 0.5]);

    let l = tape.input(t(&[1, 2], &[1.0f64.ln(), 3.0f64.ln()]));
    let p = tape.softmax(l).unwrap();
    assert_abs_diff_eq!(tape.value(p).data()[0], 0.25, epsilon = 1e-15);
    assert_abs_diff_eq!(tape.value(p).data()[1], 0.75, epsilon = 1e-15);
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = tape.variable(t(&[3], &[1.0, -4.0, 9.0]));
    let s = tape.sum(x);
    assert_eq!(tape.backward(s).unwrap().wrt(x).unwrap(), &[1.0, 1.0, 1.0]);

    let mut tape = Tape::new();
    let x = tape.variable(t(&[2], &[1.0, 2.0]));
    let sq = tape.square(x);
    let s = tape.sum(sq);
    assert_eq!(tape.backward(s).unwrap().wrt(x).unwrap(), &[2.0, 4.0]);

    let nonscalar = tape.variable(t(&[2], &[1.0, 2.0]));
    assert!(matches!(tape.backward(nonscalar), Err(Error::Contract(_))));
}

#[test]
fn fan_out_accumulates_and_unreached_params_are_zero() {
    let mut store = ParamStore::new();
    let a = store.add("a", t(&[2], &[1.0, 2.0]), true);
    let unused = store.add("unused", t(&[3], &[1.0, 1.0, 1.0]), true);
    let mut tape = Tape::with_trainable([a, unused]);
    let av = tape.param(&store, a);
    let d = tape.add(av, av).unwrap();
    let m = tape.mul(d, av).unwrap();
    let loss = tape.sum(m);
    let grads = tape.backward(loss).unwrap();
    // d/da sum(2a^2) = 4a
    assert_eq!(grads.param(a).unwrap(), &[4.0, 8.0]);
    assert_eq!(grads.param_or_zeros(unused, 3), vec![0.0; 3]);
    grads.store_into(&mut store, &[a, unused]);
    assert_eq!(store.get(unused).grad.as_deref(), Some(&[0.0, 0.0, 0.0][..]));
}

#[test]
fn grad_reverse_examples() {
    let mut tape = Tape::new();
    let x = tape.variable(t(&[2], &[0.3, -7.0]));
    let r = tape.grad_reverse(x, 1.0).unwrap();
    assert_eq!(tape.value(r).data(), tape.value(x).data());
    let s = tape.scale(r, 2.0);
    let loss = tape.sum(s);
    assert_eq!(tape.backward(loss).unwrap().wrt(x).unwrap(), &[-2.0, -2.0]);

    let mut tape = Tape::new();
    let x = tape.variable(t(&[2], &[0.3, -7.0]));
    let r = tape.grad_reverse(x, 0.0).unwrap();
    let loss = tape.sum(r);
    assert!(tape.backward(loss).unwrap().wrt(x).unwrap().iter().all(|&g| g == 0.0));
    assert!(tape.grad_reverse(x, -1.0).is_err());
}

#[test]
fn label_smoothed_cross_entropy_examples() {
    let mut tape = Tape::new();
    let logits = tape.input(t(&[1, 2], &[0.9f64.ln(), 0.1f64.ln()]));
    let l = tape.cross_entropy(logits, &[0], 0.1, Reduction::Mean).unwrap();
    assert_abs_diff_eq!(tape.value(l).item(), 0.21522, epsilon = 1e-5);
    let uni = tape.input(Tensor::zeros(&[3, 4]));
    let l = tape.cross_entropy(uni, &[0, 3, 1], 0.3, Reduction::Mean).unwrap();
    assert_abs_diff_eq!(tape.value(l).item(), 4.0f64.ln(), epsilon = 1e-14);
    assert!(matches!(tape.cross_entropy(uni, &[0, 4, 1], 0.0, Reduction::Mean), Err(Error::Contract(_))));
}

#[test]
fn gradient_suite_full() {
    let start = std::time::Instant::now();
    let results = gradcheck::run_suite(100, 2024).unwrap();
    for r in &results {
        assert!(r.max_rel_error < 1e-4, "{}: {}", r.name, r.max_rel_error);
    }
    assert!(start.elapsed().as_secs() < 60);
}

#[test]
fn determinism_over_ten_steps() {
    use dir_learn_core::optim::{OptimizerConfig, OptimizerState};
    use rand::SeedableRng;
    let run = || {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let w = store.add_kaiming("w", &[3, 4], 4, &mut rng);
        let b = store.add_bias("b", 3, 4, &mut rng);
        let x = gradcheck::uniform(&mut rng, &[5, 4], -2.0, 2.0);
        let mut opt = OptimizerState::new(OptimizerConfig::adam(0.01), &store, vec![w, b]);
        let mut losses = Vec::new();
        for _ in 0..10 {
            let mut tape = Tape::with_trainable([w, b]);
            let xv = tape.input(x.clone());
            let wv = tape.param(&store, w);
            let bv = tape.param(&store, b);
            let y = tape.linear(xv, wv, bv).unwrap();
            let loss = tape.cross_entropy(y, &[0, 1, 2, 0, 1], 0.1, Reduction::Mean).unwrap();
            losses.push(tape.value(loss).item().to_bits());
            let g = tape.backward(loss).unwrap();
            opt.step(&mut store, &g, 0.01).unwrap();
        }
        losses
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(data in prop::collection::vec(-30.0f64..30.0, 12)) {
        let mut tape = Tape::no_grad();
        let x = tape.input(t(&[3, 4], &data));
        let p = tape.softmax(x).unwrap();
        let v = tape.value(p);
        for r in 0..3 {
            let row = v.row(r);
            prop_assert!(row.iter().all(|&e| e > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_is_linear(
        xs in prop::collection::vec(-2.0f64..2.0, 32),
        ys in prop::collection::vec(-2.0f64..2.0, 32),
        ws in prop::collection::vec(-2.0f64..2.0, 18),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let mut tape = Tape::no_grad();
        let w = tape.input(t(&[2, 1, 3, 3], &ws));
        let zb = tape.input(Tensor::zeros(&[2]));
        let x = tape.input(t(&[2, 1, 4, 4], &xs));
        let y = tape.input(t(&[2, 1, 4, 4], &ys));
        let ax = tape.scale(x, a);
        let by = tape.scale(y, b);
        let comb = tape.add(ax, by).unwrap();
        let lhs = tape.conv2d(comb, w, zb).unwrap();
        let cx = tape.conv2d(x, w, zb).unwrap();
        let cy = tape.conv2d(y, w, zb).unwrap();
        let acx = tape.scale(cx, a);
        let bcy = tape.scale(cy, b);
        let rhs = tape.add(acx, bcy).unwrap();
        for (l, r) in tape.value(lhs).data().iter().zip(tape.value(rhs).data()) {
            prop_assert!((l - r).abs() < 1e-10);
        }
    }

    #[test]
    fn forward_ops_stay_finite(data in prop::collection::vec(-1e3f64..1e3, 16)) {
        let mut tape = Tape::no_grad();
        let x = tape.input(t(&[4, 4], &data));
        let e = tape.entropy(x, Reduction::Mean).unwrap();
        let ls = tape.log_softmax(x).unwrap();
        let ce = tape.cross_entropy(x, &[0, 1, 2, 3], 0.1, Reduction::Sum).unwrap();
        prop_assert!(tape.value(e).is_finite());
        prop_assert!(tape.value(ls).is_finite());
        prop_assert!(tape.value(ce).is_finite());
    }
}
