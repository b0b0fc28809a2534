//! Independent reference computations shared by several test targets.

use numcore::{grad_check_components, GradCheckReport, NumError, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use sense::heads::GmmParams;
use sense::model::*;

use super::{random_batch, rng};

#[allow(clippy::too_many_arguments)]
fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
        return left + right + (left + right - whole) / 15.0;
    }
    simpson(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
        + simpson(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}

pub fn tail_by_quadrature(p: &GmmParams, u: f64) -> f64 {
    let hi = p.means.iter().zip(&p.stds).map(|(m, s)| m + 12.0 * s).fold(u, f64::max);
    let f = |y: f64| p.density(y);
    let pieces = 64;
    let h = (hi - u) / pieces as f64;
    (0..pieces)
        .map(|i| {
            let (a, b) = (u + i as f64 * h, u + (i + 1) as f64 * h);
            let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
            let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
            simpson(&f, a, b, fa, fm, fb, whole, 1e-13, 40)
        })
        .sum()
}

pub fn random_mixture(r: &mut impl Rng) -> GmmParams {
    let k = r.random_range(1..=5);
    let raw: Vec<f64> = (0..k).map(|_| r.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    GmmParams {
        weights: raw.iter().map(|w| w / total).collect(),
        means: (0..k).map(|_| r.random_range(-2.0..2.0)).collect(),
        stds: (0..k).map(|_| r.random_range(0.05..1.5)).collect(),
    }
}

pub fn targets(head: HeadKind, n: usize) -> Targets {
    match head {
        HeadKind::Discrete => Targets::Discrete(Tensor::from_fn(&[n, 5], |i| ((i / 5) % 3 > i % 5) as u8 as f32)),
        HeadKind::Continuous => Targets::Continuous((0..n).map(|i| i as f32 * 0.4 - 0.5).collect()),
    }
}

fn as_num(e: ModelError) -> NumError {
    match e {
        ModelError::Num(n) => n,
        other => panic!("{other}"),
    }
}

// The whole parameter vector is one probe, so every component is judged
// against the gradient norm of the full model rather than of its own tensor.
/// Returns the report and the number of sampled components.
pub fn full_model_grad_check(model: &SenseModel) -> (GradCheckReport, usize) {
    let batch = random_batch(&model.config, 17);
    let t = targets(model.config.head_kind, model.config.n_stations);
    let mut layout = Vec::new();
    let mut flat = Vec::new();
    let mut sample = Vec::new();
    let mut r = rng(23);
    for (name, tensor) in model.params.iter() {
        let off = flat.len();
        layout.push((name.to_string(), off, tensor.shape().to_vec()));
        flat.extend_from_slice(tensor.data());
        let mut idx: Vec<usize> = (off..flat.len()).collect();
        idx.shuffle(&mut r);
        sample.extend(idx.into_iter().take(SAMPLES_PER_TENSOR));
    }
    let x = Tensor::new(vec![flat.len()], flat).unwrap();
    let report = grad_check_components(
        |g, probe| {
            let mut p = model.params.bind(g, |_| false);
            for (name, off, shape) in &layout {
                let len = shape.iter().product();
                let piece = g.narrow(probe, *off, len)?;
                let piece = g.reshape(piece, shape)?;
                p.replace(name, piece).map_err(as_num)?;
            }
            let out = model.forward(g, &p, &batch, AlphaMode::Learned).map_err(as_num)?;
            model.loss(g, &out, &t).map_err(as_num)
        },
        &x,
        1e-3,
        &sample,
    )
    .unwrap();
    (report, sample.len())
}

pub const SAMPLES_PER_TENSOR: usize = 64;
