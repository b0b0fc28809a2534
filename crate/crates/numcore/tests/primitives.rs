//! Finite-difference checks for every primitive on random small shapes.

mod support;

use numcore::{grad_check, Graph, NumError, Result, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::primitive_suite::{self as suite, random, EPS, TOL};

const TRIALS: u64 = 100;

fn assert_group(run: fn(u64, suite::Sink<'_>)) {
    let mut checked = 0;
    run(TRIALS, &mut |name, seed, outcome| {
        let r = outcome.unwrap_or_else(|e| panic!("{name} seed {seed}: {e}"));
        assert!(r.passes(TOL), "{name} seed {seed}: {r:?}");
        checked += 1;
    });
    assert!(checked >= TRIALS);
}

#[test]
fn elementwise_binary() {
    assert_group(suite::elementwise_binary);
}

#[test]
fn elementwise_unary() {
    assert_group(suite::elementwise_unary);
}

#[test]
fn broadcasting_and_matmul() {
    assert_group(suite::broadcasting_and_matmul);
}

#[test]
fn structural() {
    assert_group(suite::structural);
}

#[test]
fn normalizations_and_reductions() {
    assert_group(suite::normalizations_and_reductions);
}

#[test]
fn convolutions_and_pooling() {
    assert_group(suite::convolutions_and_pooling);
}

/// Three dense layers with tanh and relu, squared-error loss, gradient taken
/// with respect to every weight at once via one flat parameter vector.
#[test]
fn three_layer_mlp_matches_finite_differences() {
    let sizes = [(5, 7), (7, 6), (6, 3)];
    let n_params: usize = sizes.iter().map(|(i, o)| i * o + o).sum();
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let input = random(&mut rng, &[4, 5], -1.0, 1.0);
        let target = random(&mut rng, &[4, 3], -1.0, 1.0);
        let theta = random(&mut rng, &[n_params], -0.6, 0.6);
        let mlp = |g: &mut Graph, p: Var| -> Result<Var> {
            let mut h = g.constant(input.clone());
            let mut off = 0;
            for (layer, &(i, o)) in sizes.iter().enumerate() {
                let w = g.narrow(p, off, i * o)?;
                let w = g.reshape(w, &[i, o])?;
                off += i * o;
                let b = g.narrow(p, off, o)?;
                let b = g.reshape(b, &[o])?;
                off += o;
                h = g.linear(h, w, b)?;
                if layer == 0 {
                    h = g.tanh(h);
                } else if layer == 1 {
                    h = g.sigmoid(h);
                }
            }
            let t = g.constant(target.clone());
            let d = g.sub(h, t)?;
            let sq = g.square(d);
            Ok(g.mean(sq))
        };
        let r = grad_check(mlp, &theta, EPS).unwrap();
        assert!(r.passes(TOL), "seed {seed}: {r:?}");
    }
}

#[test]
fn analytic_examples() {
    // sum(x * x) at [1, 2]
    let mut g = Graph::new();
    let x = g.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum(sq);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);

    // sigmoid'(0) = 1/4
    let mut g = Graph::new();
    let x = g.param(Tensor::new(vec![1], vec![0.0]).unwrap());
    let s = g.sigmoid(x);
    let loss = g.sum(s);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[0.25]);
}

#[test]
fn forward_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1, 1, 5], 1.0));
    let w = g.constant(Tensor::full(&[1, 1, 5], 1.0));
    let b = g.constant(Tensor::zeros(&[1]));
    let y = g.conv1d(x, w, b, 5).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 1]);
    assert_eq!(g.value(y).data(), &[5.0]);

    let z = g.constant(Tensor::zeros(&[3]));
    let s = g.softmax(z).unwrap();
    for &p in g.value(s).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-7);
    }

    let c = g.constant(Tensor::full(&[2, 6], 4.2));
    let gain = g.constant(Tensor::full(&[6], 1.0));
    let bias = g.constant(Tensor::zeros(&[6]));
    let ln = g.layer_norm(c, gain, bias).unwrap();
    assert!(g.value(ln).data().iter().all(|&v| v == 0.0));
}

#[test]
fn convolution_output_lengths_follow_floor_rule() {
    let mut g = Graph::new();
    for (len, k, s) in [(3000, 5, 5), (600, 16, 1), (113, 16, 5), (17, 4, 3)] {
        let x = g.constant(Tensor::zeros(&[1, 1, len]));
        let w = g.constant(Tensor::zeros(&[2, 1, k]));
        let b = g.constant(Tensor::zeros(&[2]));
        let y = g.conv1d(x, w, b, s).unwrap();
        assert_eq!(g.shape(y)[2], (len - k) / s + 1);
    }
    let x = g.constant(Tensor::zeros(&[1, 1, 3]));
    let w = g.constant(Tensor::zeros(&[1, 1, 4]));
    let b = g.constant(Tensor::zeros(&[1]));
    assert!(matches!(g.conv1d(x, w, b, 1), Err(NumError::EmptyWindow { .. })));
    let w2 = g.constant(Tensor::zeros(&[1, 2, 1]));
    match g.conv1d(x, w2, b, 1) {
        Err(NumError::ShapeMismatch { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![1, 1, 3]);
            assert_eq!(rhs, vec![1, 2, 1]);
        }
        other => panic!("expected shape mismatch, got {other:?}"),
    }
    let p = g.constant(Tensor::zeros(&[1, 1]));
    assert!(g.max_pool1d(p, 2, 2).is_err());
}

#[test]
fn backward_contract() {
    let mut g = Graph::new();
    let x = g.param(Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
    let frozen = g.constant(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
    let y = g.mul(x, frozen).unwrap();
    assert!(matches!(g.backward(y), Err(NumError::NotScalar(_))));
    let loss = g.sum(y);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[3.0, 4.0]);
    assert!(g.grad(frozen).is_none(), "no-grad leaves never get a buffer");
    assert!(matches!(g.backward(loss), Err(NumError::BackwardTwice)));
    g.reset_grads();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[3.0, 4.0]);
}

#[test]
fn replay_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[2, 3, 40], -1.0, 1.0);
    let w = random(&mut rng, &[4, 3, 5], -1.0, 1.0);
    let run = || {
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let wv = g.param(w.clone());
        let b = g.constant(Tensor::zeros(&[4]));
        let y = g.conv1d(xv, wv, b, 2).unwrap();
        let y = g.max_pool1d(y, 2, 2).unwrap();
        let y = g.reshape(y, &[2, 4 * 9]).unwrap();
        let y = g.softmax(y).unwrap();
        let l = g.logsumexp(y).unwrap();
        let loss = g.sum(l);
        g.backward(loss).unwrap();
        (g.value(y).clone(), g.grad(wv).unwrap())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert!(a.bit_eq(&b));
    assert!(ga.bit_eq(&gb));
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut g = Graph::new();
    let x = g.constant(random(&mut rng, &[16, 16], -30.0, 30.0));
    let s = g.softmax(x).unwrap();
    for row in g.value(s).data().chunks(16) {
        let total: f64 = row.iter().map(|&v| v as f64).sum();
        assert!((total - 1.0).abs() < 1e-6);
    }
}
