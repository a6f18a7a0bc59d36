mod common;

use common::{mlp_forward_reference, numeric_grad, rel_err, relu};
use mixflow_core::nn::{
    argmax, gumbel_softmax, gumbel_softmax_with_noise, softmax, Activation, GradSet, MlpParams, OptState, Tape,
    Trainable,
};
use mixflow_core::rng::{gumbel, stream};
use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const POINTS: u64 = 20;

fn flat(p: &impl Trainable<f64>) -> Vec<f64> {
    let mut out = Vec::new();
    p.visit("", &mut |_, xs| out.extend_from_slice(xs));
    out
}

fn set_flat(p: &mut impl Trainable<f64>, values: &[f64]) {
    let mut k = 0;
    p.visit_mut("", &mut |_, xs| {
        xs.copy_from_slice(&values[k..k + xs.len()]);
        k += xs.len();
    });
}

fn flat_grads(g: &GradSet<f64>) -> Vec<f64> {
    g.entries.iter().flat_map(|(_, v)| v.iter().copied()).collect()
}

fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.5..1.5))
}

#[test]
fn quadratic_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(Array2::from_shape_vec((1, 2), vec![3.0, 4.0]).unwrap());
    let loss = tape.mean_row_sq_norm(x).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(x).iter().copied().collect::<Vec<_>>(), vec![6.0, 8.0]);
}

#[test]
fn unused_parameter_has_zero_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(Array2::from_elem((2, 2), 1.5));
    let unused = tape.param(Array2::from_elem((1, 3), -2.0));
    let loss = tape.mean_row_sq_norm(x).unwrap();
    let g = tape.backward(loss).unwrap();
    assert!(g.wrt(unused).iter().all(|&v| v == 0.0));
}

fn softmax_dot_loss(logits: &Array2<f64>, c: &Array2<f64>, log: bool) -> (f64, Array2<f64>) {
    let mut tape = Tape::new();
    let l = tape.param(logits.clone());
    let s = if log { tape.log_softmax_rows(l).unwrap() } else { tape.softmax_rows(l).unwrap() };
    let loss = tape.dot_const(s, c.clone()).unwrap();
    let g = tape.backward(loss).unwrap();
    (tape.scalar(loss), g.wrt(l))
}

#[test]
fn softmax_and_log_softmax_gradients_match_finite_differences() {
    for log in [false, true] {
        for seed in 0..POINTS {
            let mut rng = stream(&[11, seed]);
            let logits = random_matrix(3, 5, &mut rng) * 2.0;
            let c = random_matrix(3, 5, &mut rng);
            let (_, analytic) = softmax_dot_loss(&logits, &c, log);
            let f = |x: &[f64]| {
                let l = Array2::from_shape_vec((3, 5), x.to_vec()).unwrap();
                softmax_dot_loss(&l, &c, log).0
            };
            let numeric = numeric_grad(&f, logits.as_slice().unwrap(), H);
            let err = rel_err(analytic.as_slice().unwrap(), &numeric);
            assert!(err <= TOL, "log={log} seed={seed} rel err {err}");
        }
    }
}

#[test]
fn gumbel_softmax_gradient_with_frozen_noise() {
    for seed in 0..POINTS {
        let mut rng = stream(&[12, seed]);
        let logits = random_matrix(1, 4, &mut rng);
        let noise = Array2::from_shape_fn((6, 4), |_| gumbel(&mut rng));
        let c = random_matrix(6, 4, &mut rng);
        let temp = rng.random_range(0.3..2.0);
        let eval = |l: &Array2<f64>| {
            let mut tape = Tape::new();
            let lv = tape.param(l.clone());
            let w = tape.gumbel_softmax(lv, &noise, temp).unwrap();
            let loss = tape.dot_const(w, c.clone()).unwrap();
            let g = tape.backward(loss).unwrap();
            (tape.scalar(loss), g.wrt(lv))
        };
        let (_, analytic) = eval(&logits);
        let f = |x: &[f64]| eval(&Array2::from_shape_vec((1, 4), x.to_vec()).unwrap()).0;
        let numeric = numeric_grad(&f, logits.as_slice().unwrap(), H);
        let err = rel_err(analytic.as_slice().unwrap(), &numeric);
        assert!(err <= TOL, "seed={seed} rel err {err}");
    }
}

#[test]
fn row_mix_gradient_matches_finite_differences() {
    for seed in 0..POINTS {
        let mut rng = stream(&[13, seed]);
        let w0 = random_matrix(5, 3, &mut rng);
        let noise = Array3::from_shape_fn((5, 3, 2), |_| rng.random_range(-1.0..1.0));
        let eval = |w: &Array2<f64>| {
            let mut tape = Tape::new();
            let wv = tape.param(w.clone());
            let s = tape.softmax_rows(wv).unwrap();
            let x = tape.row_mix(s, noise.clone()).unwrap();
            let loss = tape.mean_row_sq_norm(x).unwrap();
            let g = tape.backward(loss).unwrap();
            (tape.scalar(loss), g.wrt(wv))
        };
        let (_, analytic) = eval(&w0);
        let f = |x: &[f64]| eval(&Array2::from_shape_vec((5, 3), x.to_vec()).unwrap()).0;
        let numeric = numeric_grad(&f, w0.as_slice().unwrap(), H);
        let err = rel_err(analytic.as_slice().unwrap(), &numeric);
        assert!(err <= TOL, "seed={seed} rel err {err}");
    }
}

fn mlp_loss(net: &MlpParams<f64>, x: &Array2<f64>, target: &Array2<f64>) -> (f64, GradSet<f64>) {
    let mut tape = Tape::new();
    let input = tape.constant(x.clone());
    let mut rng = stream(&[0]);
    let (out, vars) = net.record_mode(&mut tape, input, false, &mut rng).unwrap();
    let t = tape.constant(target.clone());
    let diff = tape.sub(out, t).unwrap();
    let loss = tape.mean_row_sq_norm(diff).unwrap();
    let g = tape.backward(loss).unwrap();
    (tape.scalar(loss), vars.collect(&g, ""))
}

#[test]
fn mlp_gradients_match_finite_differences() {
    for act in [Activation::Relu, Activation::Tanh, Activation::Silu] {
        for seed in 0..POINTS {
            let mut rng = stream(&[14, seed]);
            let net = MlpParams::<f64>::init(&[3, 6, 5, 2], act, 0.0, &mut rng).unwrap();
            let x = random_matrix(4, 3, &mut rng);
            let target = random_matrix(4, 2, &mut rng);
            let (_, grads) = mlp_loss(&net, &x, &target);
            let analytic = flat_grads(&grads);
            let theta = flat(&net);
            let f = |v: &[f64]| {
                let mut n = net.clone();
                set_flat(&mut n, v);
                mlp_loss(&n, &x, &target).0
            };
            let numeric = numeric_grad(&f, &theta, H);
            let err = rel_err(&analytic, &numeric);
            assert!(err <= TOL, "{act:?} seed={seed} rel err {err}");
        }
    }
}

#[test]
fn zero_network_outputs_zero() {
    let net = MlpParams::<f64>::zeros(&[3, 4, 2], Activation::Silu).unwrap();
    let mut rng = stream(&[1]);
    assert_eq!(net.forward(&[0.3, -1.0, 2.0], &mut rng).unwrap(), vec![0.0, 0.0]);
}

#[test]
fn identity_layer() {
    let mut net = MlpParams::<f64>::zeros(&[2, 2], Activation::Relu).unwrap();
    net.weights[0] = Array2::eye(2);
    let mut rng = stream(&[1]);
    assert_eq!(net.forward(&[1.0, 2.0], &mut rng).unwrap(), vec![1.0, 2.0]);
}

#[test]
fn forward_matches_straight_line_reference() {
    let mut rng = stream(&[15]);
    let net = MlpParams::<f64>::init(&[3, 8, 2], Activation::Relu, 0.0, &mut rng).unwrap();
    let biases: Vec<Vec<f64>> = net.biases.iter().map(|b| b.to_vec()).collect();
    for _ in 0..10 {
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let got = net.forward(&x, &mut rng).unwrap();
        let want = mlp_forward_reference(&net.weights, &biases, relu, &x);
        assert!(rel_err(&got, &want) < 1e-14, "{got:?} vs {want:?}");
    }
}

#[test]
fn forward_rejects_wrong_input_length() {
    let net = MlpParams::<f64>::zeros(&[3, 2], Activation::Relu).unwrap();
    assert!(net.forward(&[1.0, 2.0], &mut stream(&[0])).is_err());
}

#[test]
fn gumbel_softmax_uniform_logits() {
    let g = [0.4, -0.2, 1.1];
    let w = gumbel_softmax_with_noise(&[0.0, 0.0, 0.0], &g, 1.0).unwrap();
    let want = softmax(&g);
    assert!(rel_err(&w, &want) < 1e-15);
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
}

#[test]
fn gumbel_softmax_low_temperature_concentrates() {
    let mut rng = stream(&[16]);
    for _ in 0..1000 {
        let noise: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
        let w = gumbel_softmax_with_noise(&[10.0, 0.0, 0.0], &noise, 0.01).unwrap();
        assert!((w[0] - 1.0).abs() < 1e-6 && w[1] < 1e-6 && w[2] < 1e-6, "{w:?}");
    }
}

#[test]
fn gumbel_softmax_argmax_frequencies_follow_softmax() {
    let logits = [0.5, -0.3, 1.2, 0.0];
    let probs = softmax(&logits);
    let mut rng = stream(&[17]);
    let n = 100_000;
    let mut counts = [0usize; 4];
    for _ in 0..n {
        let w = gumbel_softmax(&logits, 0.1, &mut rng).unwrap();
        counts[argmax(&w)] += 1;
    }
    let tv: f64 = counts
        .iter()
        .zip(&probs)
        .map(|(&c, &p)| (c as f64 / n as f64 - p).abs())
        .sum::<f64>()
        / 2.0;
    assert!(tv < 0.01, "tv {tv}");
}

#[test]
fn gumbel_softmax_rejects_bad_input() {
    assert!(gumbel_softmax_with_noise(&[f64::NAN, 0.0], &[0.0, 0.0], 1.0).is_err());
    assert!(gumbel_softmax_with_noise(&[0.0, 0.0], &[0.0, 0.0], 0.0).is_err());
}

struct Weights(Vec<f64>);

impl Trainable<f64> for Weights {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[f64])) {
        f(format!("{prefix}w"), &self.0);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [f64])) {
        f(format!("{prefix}w"), &mut self.0);
    }
}

fn grad_of(w: &Weights) -> GradSet<f64> {
    let mut g = GradSet::default();
    g.push("w".into(), w.0.iter().map(|x| 2.0 * (x - 3.0)).collect());
    g
}

#[test]
fn sgd_arithmetic() {
    let mut w = Weights(vec![1.0]);
    let mut g = GradSet::default();
    g.push("w".into(), vec![2.0]);
    OptState::sgd(0.1).step(&mut w, &g).unwrap();
    assert!((w.0[0] - 0.8).abs() < 1e-15);
    let mut frozen = Weights(vec![1.0, -4.0]);
    let mut g2 = GradSet::default();
    g2.push("w".into(), vec![5.0, 7.0]);
    OptState::sgd(0.0).step(&mut frozen, &g2).unwrap();
    assert_eq!(frozen.0, vec![1.0, -4.0]);
}

#[test]
fn adam_follows_reference_recurrence() {
    let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
    let mut w = Weights(vec![0.0]);
    let mut opt = OptState::adam(lr);
    let (mut x, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
    for t in 1..=100 {
        let g = 2.0 * (x - 3.0);
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        x -= lr * mh / (vh.sqrt() + eps);
        let grads = grad_of(&w);
        opt.step(&mut w, &grads).unwrap();
        assert!((w.0[0] - x).abs() < 1e-12, "step {t}: {} vs {x}", w.0[0]);
    }
    assert!((w.0[0] - 3.0).abs() < 0.1, "w = {}", w.0[0]);
}

#[test]
fn non_finite_gradient_rejects_step() {
    let mut w = Weights(vec![1.0, 2.0]);
    let mut g = GradSet::default();
    g.push("w".into(), vec![0.5, f64::INFINITY]);
    let err = OptState::adam(0.1).step(&mut w, &g).unwrap_err();
    assert!(err.to_string().contains('w'));
    assert_eq!(w.0, vec![1.0, 2.0]);
}

proptest! {
    #[test]
    fn softmax_lies_on_simplex(logits in prop::collection::vec(-50.0f64..50.0, 1..8)) {
        let s = softmax(&logits);
        prop_assert!(s.iter().all(|&x| (0.0..=1.0).contains(&x)));
        prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gumbel_softmax_in_open_simplex(
        logits in prop::collection::vec(-30.0f64..30.0, 1..8),
        temp in 1e-3f64..10.0,
        seed in any::<u64>(),
    ) {
        let w = gumbel_softmax(&logits, temp, &mut stream(&[seed])).unwrap();
        prop_assert!(w.iter().all(|&x| x > 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn eval_forward_is_bit_reproducible(seed in any::<u64>(), x in prop::collection::vec(-3.0f64..3.0, 3)) {
        let mut rng = stream(&[seed]);
        let mut net = MlpParams::<f64>::init(&[3, 7, 2], Activation::Silu, 0.3, &mut rng).unwrap();
        net.train_mode = false;
        let a = net.forward(&x, &mut stream(&[1])).unwrap();
        let b = net.forward(&x, &mut stream(&[2])).unwrap();
        prop_assert_eq!(&a, &b);
        let batch = Array2::from_shape_vec((1, 3), x.clone()).unwrap();
        let p = net.predict(batch.view()).unwrap();
        prop_assert_eq!(p.row(0).to_vec(), a);
    }
}
