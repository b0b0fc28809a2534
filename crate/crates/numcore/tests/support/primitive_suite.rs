#![allow(dead_code)]

//! Finite-difference checks for every primitive on random small shapes.
//!
//! Shared between this crate's tests and the workspace acceptance target, so
//! each group reports through a sink instead of asserting.

use numcore::{grad_check, GradCheckReport, Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f32 = 1e-3;
pub const TOL: f64 = 1e-3;

/// Receives `(primitive, seed, outcome)` for every check.
pub type Sink<'a> = &'a mut dyn FnMut(&str, u64, Result<GradCheckReport>);

/// Contracts `y` against fixed weights in `[0.5, 1.5]` so that every output
/// component contributes a distinct slope and sums of slopes cannot cancel.
fn weighted_sum(g: &mut Graph, y: Var) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let w = Tensor::from_fn(&shape, |i| 1.0 + 0.5 * (1.3 * i as f32 + 0.5).sin());
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

/// Sign-changing contraction for outputs that are invariant to shifts of
/// their input (layer norm), where constant-ish weights see no gradient.
fn signed_sum(g: &mut Graph, y: Var) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let w = Tensor::from_fn(&shape, |i| (2.1 * i as f32 + 0.3).sin());
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values at least `gap` apart and away from zero, so kinks (relu, max) are
/// never crossed by a finite-difference step.
fn separated(rng: &mut ChaCha8Rng, shape: &[usize], gap: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f32> = (0..n).map(|i| (i as f32 - (n / 2) as f32 + 0.5) * gap).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        vals.swap(i, j);
    }
    Tensor::new(shape.to_vec(), vals).unwrap()
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn check(
    sink: &mut dyn FnMut(&str, u64, Result<GradCheckReport>),
    name: &str,
    seed: u64,
    x: &Tensor,
    f: impl Fn(&mut Graph, Var) -> Result<Var>,
) {
    sink(name, seed, grad_check(f, x, EPS));
}

fn for_trials(trials: u64, name: &str, mut body: impl FnMut(&mut ChaCha8Rng, u64)) {
    for seed in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (name.len() as u64 * 7919));
        body(&mut rng, seed);
    }
}

pub fn elementwise_binary(trials: u64, sink: Sink<'_>) {
    for_trials(trials, "binary", |rng, seed| {
        let shape = [dim(rng, 1, 6), dim(rng, 1, 8)];
        let a = random(rng, &shape, -2.0, 2.0);
        let b = random(rng, &shape, 0.5, 2.0);
        for (name, op) in [
            ("add", Graph::add as fn(&mut Graph, Var, Var) -> Result<Var>),
            ("sub", Graph::sub),
            ("mul", Graph::mul),
            ("div", Graph::div),
        ] {
            let bc = b.clone();
            check(sink, name, seed, &a, move |g, x| {
                let c = g.constant(bc.clone());
                let y = op(g, x, c)?;
                weighted_sum(g, y)
            });
            let ac = a.clone();
            check(sink, name, seed, &b, move |g, x| {
                let c = g.constant(ac.clone());
                let y = op(g, c, x)?;
                weighted_sum(g, y)
            });
        }
    });
}

pub fn elementwise_unary(trials: u64, sink: Sink<'_>) {
    for_trials(trials, "unary", |rng, seed| {
        let shape = [dim(rng, 1, 8), dim(rng, 1, 8)];
        let x = separated(rng, &shape, 0.05);
        let pos = random(rng, &shape, 0.2, 3.0);
        type Unary = fn(&mut Graph, Var) -> Var;
        let ops: [(&str, Unary, &Tensor); 9] = [
            ("relu", Graph::relu, &x),
            ("sigmoid", Graph::sigmoid, &x),
            ("tanh", Graph::tanh, &x),
            ("swish", Graph::swish, &x),
            ("exp", Graph::exp, &x),
            ("log", Graph::log, &pos),
            ("square", Graph::square, &x),
            ("scale", |g, v| g.scale(v, -1.7), &x),
            ("add_scalar", |g, v| g.add_scalar(v, 0.3), &x),
        ];
        for (name, op, input) in ops {
            check(sink, name, seed, input, |g, v| {
                let y = op(g, v);
                weighted_sum(g, y)
            });
        }
    });
}

pub fn broadcasting_and_matmul(trials: u64, sink: Sink<'_>) {
    for_trials(trials, "broadcast", |rng, seed| {
        let (m, k, n) = (dim(rng, 1, 5), dim(rng, 1, 6), dim(rng, 1, 5));
        let a = random(rng, &[m, k], -1.0, 1.0);
        let b = random(rng, &[k, n], -1.0, 1.0);
        let bias = random(rng, &[k], -1.0, 1.0);
        let s = random(rng, &[m], -2.0, 2.0);
        {
            let b = b.clone();
            check(sink, "matmul.a", seed, &a, move |g, x| {
                let c = g.constant(b.clone());
                let y = g.matmul(x, c)?;
                weighted_sum(g, y)
            });
        }
        {
            let a = a.clone();
            check(sink, "matmul.b", seed, &b, move |g, x| {
                let c = g.constant(a.clone());
                let y = g.matmul(c, x)?;
                weighted_sum(g, y)
            });
        }
        {
            let a = a.clone();
            check(sink, "add_bias", seed, &bias, move |g, x| {
                let c = g.constant(a.clone());
                let y = g.add_bias(c, x)?;
                weighted_sum(g, y)
            });
        }
        {
            let a2 = a.clone();
            check(sink, "mul_rows.scale", seed, &s, move |g, x| {
                let c = g.constant(a2.clone());
                let y = g.mul_rows(c, x)?;
                weighted_sum(g, y)
            });
            let s = s.clone();
            check(sink, "mul_rows.x", seed, &a, move |g, x| {
                let c = g.constant(s.clone());
                let y = g.mul_rows(x, c)?;
                weighted_sum(g, y)
            });
        }
    });
}

pub fn structural(trials: u64, sink: Sink<'_>) {
    for_trials(trials, "structural", |rng, seed| {
        let shape = [dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 2, 5)];
        let x = random(rng, &shape, -1.0, 1.0);
        let d = shape[2];
        let start = rng.random_range(0..d - 1);
        let len = rng.random_range(1..=d - start);
        check(sink, "permute", seed, &x, |g, v| {
            let y = g.permute(v, &[2, 0, 1])?;
            weighted_sum(g, y)
        });
        check(sink, "reshape", seed, &x, |g, v| {
            let y = g.reshape(v, &[shape[0] * shape[1], d])?;
            let y = g.transpose(y)?;
            weighted_sum(g, y)
        });
        check(sink, "narrow", seed, &x, |g, v| {
            let y = g.narrow(v, start, len)?;
            weighted_sum(g, y)
        });
        check(sink, "concat", seed, &x, |g, v| {
            let a = g.narrow(v, 0, 1)?;
            let sq = g.square(v);
            let y = g.concat(&[v, a, sq])?;
            weighted_sum(g, y)
        });
        let rows = shape[0] * shape[1];
        let table = random(rng, &[rows, d], -1.0, 1.0);
        let idx: Vec<usize> = (0..rng.random_range(1..6)).map(|_| rng.random_range(0..rows)).collect();
        check(sink, "gather", seed, &table, |g, v| {
            let y = g.gather(v, &idx)?;
            weighted_sum(g, y)
        });
        let mask: Vec<bool> = (0..x.len()).map(|_| rng.random_bool(0.3)).collect();
        check(sink, "masked_fill", seed, &x, |g, v| {
            let y = g.masked_fill(v, &mask, -3.0)?;
            weighted_sum(g, y)
        });
    });
}

pub fn normalizations_and_reductions(trials: u64, sink: Sink<'_>) {
    for_trials(trials, "norm", |rng, seed| {
        // Two-wide rows normalize to exactly +-1 and have a vanishing gradient.
        let shape = [dim(rng, 1, 4), dim(rng, 3, 8)];
        let x = random(rng, &shape, -2.0, 2.0);
        let gain = random(rng, &[shape[1]], 0.5, 1.5);
        let bias = random(rng, &[shape[1]], -0.5, 0.5);
        for (name, op) in [
            ("softmax", Graph::softmax as fn(&mut Graph, Var) -> Result<Var>),
            ("log_softmax", Graph::log_softmax),
            ("logsumexp", Graph::logsumexp),
        ] {
            check(sink, name, seed, &x, |g, v| {
                let y = op(g, v)?;
                weighted_sum(g, y)
            });
        }
        check(sink, "sum", seed, &x, |g, v| {
            let sq = g.square(v);
            Ok(g.sum(sq))
        });
        check(sink, "mean", seed, &x, |g, v| {
            let sq = g.square(v);
            Ok(g.mean(sq))
        });
        {
            let (gain, bias) = (gain.clone(), bias.clone());
            check(sink, "layer_norm.x", seed, &x, move |g, v| {
                let gn = g.constant(gain.clone());
                let b = g.constant(bias.clone());
                let y = g.layer_norm(v, gn, b)?;
                signed_sum(g, y)
            });
        }
        {
            let x = x.clone();
            check(sink, "layer_norm.gain", seed, &gain, move |g, v| {
                let xc = g.constant(x.clone());
                let b = g.constant(bias.clone());
                let y = g.layer_norm(xc, v, b)?;
                weighted_sum(g, y)
            });
        }
        let p = random(rng, &shape, 0.05, 0.95);
        let t = Tensor::from_fn(&shape, |_| if rng.random_bool(0.5) { 1.0 } else { 0.0 });
        check(sink, "bce", seed, &p, |g, v| {
            let tc = g.constant(t.clone());
            g.bce(v, tc, 1e-7)
        });
    });
}

pub fn convolutions_and_pooling(trials: u64, sink: Sink<'_>) {
    for_trials(trials, "conv", |rng, seed| {
        // conv1d
        let (b, c, o, k) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3));
        let stride = dim(rng, 1, 3);
        let len = k + stride * dim(rng, 0, 3);
        let x = random(rng, &[b, c, len], -1.0, 1.0);
        let w = random(rng, &[o, c, k], -1.0, 1.0);
        let bias = random(rng, &[o], -1.0, 1.0);
        {
            let (w, bias) = (w.clone(), bias.clone());
            check(sink, "conv1d.x", seed, &x, move |g, v| {
                let wc = g.constant(w.clone());
                let bc = g.constant(bias.clone());
                let y = g.conv1d(v, wc, bc, stride)?;
                weighted_sum(g, y)
            });
        }
        {
            let (x, bias) = (x.clone(), bias.clone());
            check(sink, "conv1d.w", seed, &w, move |g, v| {
                let xc = g.constant(x.clone());
                let bc = g.constant(bias.clone());
                let y = g.conv1d(xc, v, bc, stride)?;
                weighted_sum(g, y)
            });
        }
        check(sink, "conv1d.b", seed, &bias, |g, v| {
            let xc = g.constant(x.clone());
            let wc = g.constant(w.clone());
            let y = g.conv1d(xc, wc, v, stride)?;
            weighted_sum(g, y)
        });

        // conv2d
        let (kh, kw) = (dim(rng, 1, 3), dim(rng, 1, 2));
        let (sh, sw) = (dim(rng, 1, 2), dim(rng, 1, 2));
        let (h, wd) = (kh + sh * dim(rng, 0, 2), kw + sw * dim(rng, 0, 1));
        let x2 = random(rng, &[1, c, h, wd], -1.0, 1.0);
        let w2 = random(rng, &[o, c, kh, kw], -1.0, 1.0);
        {
            let (w2, bias) = (w2.clone(), bias.clone());
            check(sink, "conv2d.x", seed, &x2, move |g, v| {
                let wc = g.constant(w2.clone());
                let bc = g.constant(bias.clone());
                let y = g.conv2d(v, wc, bc, (sh, sw))?;
                weighted_sum(g, y)
            });
        }
        {
            let bias = bias.clone();
            check(sink, "conv2d.w", seed, &w2, move |g, v| {
                let xc = g.constant(x2.clone());
                let bc = g.constant(bias.clone());
                let y = g.conv2d(xc, v, bc, (sh, sw))?;
                weighted_sum(g, y)
            });
        }

        // max pool
        let (pk, ps) = (dim(rng, 1, 3), dim(rng, 1, 3));
        let plen = pk + ps * dim(rng, 0, 4);
        let prows = dim(rng, 1, 3);
        let xp = separated(rng, &[prows, plen], 0.05);
        check(sink, "max_pool1d", seed, &xp, |g, v| {
            let y = g.max_pool1d(v, pk, ps)?;
            weighted_sum(g, y)
        });

        // depthwise over rows
        let (rows, cols) = (dim(rng, 1, 6), dim(rng, 1, 4));
        let dk = [1, 3, 5, 7][rng.random_range(0..4)];
        let xd = random(rng, &[rows, cols], -1.0, 1.0);
        let wd = random(rng, &[dk, cols], -1.0, 1.0);
        let bd = random(rng, &[cols], -1.0, 1.0);
        {
            let (wd, bd) = (wd.clone(), bd.clone());
            check(sink, "depthwise.x", seed, &xd, move |g, v| {
                let wc = g.constant(wd.clone());
                let bc = g.constant(bd.clone());
                let y = g.depthwise_conv_rows(v, wc, bc)?;
                weighted_sum(g, y)
            });
        }
        check(sink, "depthwise.w", seed, &wd, |g, v| {
            let xc = g.constant(xd.clone());
            let bc = g.constant(bd.clone());
            let y = g.depthwise_conv_rows(xc, v, bc)?;
            weighted_sum(g, y)
        });
    });
}

pub type Group = fn(u64, Sink<'_>);

/// Every group above, in order.
pub const GROUPS: [(&str, Group); 6] = [
    ("elementwise_binary", elementwise_binary),
    ("elementwise_unary", elementwise_unary),
    ("broadcasting_and_matmul", broadcasting_and_matmul),
    ("structural", structural),
    ("normalizations_and_reductions", normalizations_and_reductions),
    ("convolutions_and_pooling", convolutions_and_pooling),
];
