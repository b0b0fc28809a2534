mod common;

use common::{max_abs_diff, rng, uniform};
use numcore::{Graph, Tensor};
use rand::seq::SliceRandom;
use sense::blending::*;
use sense::model::*;

fn model(kind: BlockKind, n: usize, seed: u64) -> SenseModel {
    let mut cfg = ModelConfig::test_profile(n, 5, HeadKind::Discrete);
    cfg.block_kind = kind;
    SenseModel::new(cfg, seed).unwrap()
}

fn blend(m: &SenseModel, h: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let p = m.params.bind(&mut g, |_| false);
    let hv = g.constant(h.clone());
    let out = feature_blending(&mut g, &p, &m.config, hv).unwrap();
    g.value(out).clone()
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let d = t.shape()[1];
    let data = perm
        .iter()
        .flat_map(|&src| t.data()[src * d..(src + 1) * d].to_vec())
        .collect();
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

#[test]
fn transformer_blending_is_permutation_equivariant() {
    for trial in 0..20u64 {
        let m = model(BlockKind::Transformer, 16, trial);
        let mut r = rng(100 + trial);
        let h = uniform(&mut r, &[16, 128], -2.0, 2.0);
        let mut perm: Vec<usize> = (0..16).collect();
        perm.shuffle(&mut r);
        let lhs = blend(&m, &permute_rows(&h, &perm));
        let rhs = permute_rows(&blend(&m, &h), &perm);
        let err = max_abs_diff(lhs.data(), rhs.data());
        assert!(err < 1e-5, "trial {trial}: {err}");
    }
}

#[test]
fn conformer_blending_depends_on_station_order() {
    let m = model(BlockKind::Conformer, 16, 3);
    let mut r = rng(7);
    let h = uniform(&mut r, &[16, 128], -2.0, 2.0);
    let perm: Vec<usize> = (0..16).rev().collect();
    let lhs = blend(&m, &permute_rows(&h, &perm));
    let rhs = permute_rows(&blend(&m, &h), &perm);
    assert!(max_abs_diff(lhs.data(), rhs.data()) > 1e-3);
}

#[test]
fn attention_rows_sum_to_one() {
    let m = model(BlockKind::Transformer, 9, 1);
    let mut r = rng(2);
    let mut g = Graph::new();
    let p = m.params.bind(&mut g, |_| false);
    let h = g.constant(uniform(&mut r, &[9, 128], -3.0, 3.0));
    let (_, weights) = mhsa_with_weights(&mut g, &p, "blend.0.attn", h, 8).unwrap();
    assert_eq!(weights.len(), 8);
    for w in weights {
        for row in g.value(w).data().chunks(9) {
            let s: f64 = row.iter().map(|&v| f64::from(v)).sum();
            assert!((s - 1.0).abs() < 1e-6, "{s}");
        }
    }
}

fn linear_ref(x: &[f32], rows: usize, w: &Tensor, b: &Tensor) -> Vec<f32> {
    let (i, o) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![0.0f32; rows * o];
    for r in 0..rows {
        for c in 0..o {
            let mut acc = f64::from(b.data()[c]);
            for k in 0..i {
                acc += f64::from(x[r * i + k]) * f64::from(w.data()[k * o + c]);
            }
            out[r * o + c] = acc as f32;
        }
    }
    out
}

#[test]
fn single_station_attention_is_value_then_output_projection() {
    let m = model(BlockKind::Transformer, 1, 4);
    let mut r = rng(3);
    let h = uniform(&mut r, &[1, 128], -1.0, 1.0);
    let mut g = Graph::new();
    let p = m.params.bind(&mut g, |_| false);
    let hv = g.constant(h.clone());
    let out = mhsa(&mut g, &p, "blend.0.attn", hv, 8).unwrap();
    let get = |n: &str| m.params.get(n).unwrap();
    let v = linear_ref(h.data(), 1, get("blend.0.attn.v.w"), get("blend.0.attn.v.b"));
    let want = linear_ref(&v, 1, get("blend.0.attn.o.w"), get("blend.0.attn.o.b"));
    assert!(max_abs_diff(g.value(out).data(), &want) < 1e-4);
}

#[test]
fn uniform_rows_stay_uniform() {
    let m = model(BlockKind::Transformer, 6, 5);
    let mut r = rng(4);
    let row = uniform(&mut r, &[1, 128], -1.0, 1.0);
    let h = Tensor::from_fn(&[6, 128], |i| row.data()[i % 128]);
    let out = blend(&m, &h);
    for s in 1..6 {
        assert!(max_abs_diff(&out.data()[..128], &out.data()[s * 128..(s + 1) * 128]) < 1e-6);
    }
    let zero = blend(&m, &Tensor::zeros(&[6, 128]));
    assert!(zero.data().iter().all(|v| v.is_finite()));
    for s in 1..6 {
        assert_eq!(zero.data()[..128], zero.data()[s * 128..(s + 1) * 128]);
    }
}

#[test]
fn zeroed_output_projections_make_transformer_the_identity() {
    let mut m = model(BlockKind::Transformer, 5, 6);
    for b in 0..m.config.n_blocks {
        for name in ["attn.o.w", "attn.o.b", "ffn.2.w", "ffn.2.b"] {
            let key = format!("blend.{b}.{name}");
            let shape = m.params.get(&key).unwrap().shape().to_vec();
            m.params.set(&key, Tensor::zeros(&shape)).unwrap();
        }
    }
    let mut r = rng(8);
    let h = uniform(&mut r, &[5, 128], -2.0, 2.0);
    assert!(max_abs_diff(blend(&m, &h).data(), h.data()) < 1e-6);
}

fn layer_norm_ref(x: &[f32], d: usize) -> Vec<f32> {
    x.chunks(d)
        .flat_map(|row| {
            let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + 1e-5).sqrt();
            row.iter()
                .map(move |&v| ((f64::from(v) - mean) * inv) as f32)
                .collect::<Vec<_>>()
        })
        .collect()
}

#[test]
fn zeroed_conformer_branches_reduce_to_final_norm() {
    let mut m = model(BlockKind::Conformer, 5, 6);
    m.config.n_blocks = 1;
    for name in [
        "ffn1.2.w",
        "ffn1.2.b",
        "attn.o.w",
        "attn.o.b",
        "conv.pw2.w",
        "conv.pw2.b",
        "ffn2.2.w",
        "ffn2.2.b",
    ] {
        let key = format!("blend.0.{name}");
        let shape = m.params.get(&key).unwrap().shape().to_vec();
        m.params.set(&key, Tensor::zeros(&shape)).unwrap();
    }
    let mut r = rng(8);
    let h = uniform(&mut r, &[5, 128], -2.0, 2.0);
    let want = layer_norm_ref(h.data(), 128);
    assert!(max_abs_diff(blend(&m, &h).data(), &want) < 1e-5);
}

#[test]
fn conformer_handles_one_station_and_rejects_none() {
    let m = model(BlockKind::Conformer, 1, 2);
    let mut r = rng(1);
    let out = blend(&m, &uniform(&mut r, &[1, 128], -1.0, 1.0));
    assert_eq!(out.shape(), [1, 128]);
    assert!(out.data().iter().all(|v| v.is_finite()));

    let mut g = Graph::new();
    let p = m.params.bind(&mut g, |_| false);
    let empty = g.constant(Tensor::zeros(&[0, 128]));
    assert!(conformer_block(&mut g, &p, "blend.0", empty, 8).is_err());
}

#[test]
fn zero_blocks_rejected_at_validation() {
    let mut cfg = ModelConfig::test_profile(4, 5, HeadKind::Discrete);
    cfg.n_blocks = 0;
    assert!(cfg.validate().is_err());
}

#[test]
fn full_profile_blending_keeps_shape() {
    let cfg = ModelConfig::full_profile(3, 5, HeadKind::Discrete);
    assert_eq!(
        (cfg.n_blocks, cfg.n_heads, cfg.ffn_hidden, cfg.d_model),
        (6, 10, 1000, 500)
    );
    let m = SenseModel::new(cfg, 0).unwrap();
    let mut r = rng(2);
    let out = blend(&m, &uniform(&mut r, &[3, 500], -1.0, 1.0));
    assert_eq!(out.shape(), [3, 500]);
}

fn assert_all_block_params_get_gradient(kind: BlockKind) {
    let m = model(kind, 6, 9);
    let mut r = rng(10);
    let mut g = Graph::new();
    let p = m.params.bind(&mut g, |grp| grp == ParamGroup::Blending);
    let h = g.constant(uniform(&mut r, &[6, 128], -1.0, 1.0));
    let out = feature_blending(&mut g, &p, &m.config, h).unwrap();
    let weights = g.constant(uniform(&mut r, &[6, 128], -1.0, 1.0));
    let prod = g.mul(out, weights).unwrap();
    let loss = g.sum(prod);
    g.backward(loss).unwrap();
    let mut checked = 0;
    for (name, var) in p.iter().filter(|(n, _)| n.starts_with("blend.")) {
        let grad = g.grad(var).unwrap_or_else(|| panic!("{name} has no gradient"));
        assert!(grad.data().iter().any(|&v| v != 0.0), "{name} gradient is zero");
        checked += 1;
    }
    assert!(checked > 10);
}

#[test]
fn every_transformer_parameter_receives_gradient() {
    assert_all_block_params_get_gradient(BlockKind::Transformer);
}

#[test]
fn every_conformer_parameter_receives_gradient() {
    assert_all_block_params_get_gradient(BlockKind::Conformer);
}

#[test]
fn blending_parameters_follow_layer_sizes() {
    let m = model(BlockKind::Conformer, 4, 0);
    assert_eq!(m.params.get("blend.0.conv.pw1.w").unwrap().shape(), [128, 256]);
    assert_eq!(
        m.params.get("blend.0.conv.dw.w").unwrap().shape(),
        [DEPTHWISE_KERNEL, 128]
    );
    assert_eq!(m.params.get("blend.1.ffn1.1.w").unwrap().shape(), [128, 256]);
    let t = model(BlockKind::Transformer, 4, 0);
    assert_eq!(t.params.get("blend.1.attn.q.w").unwrap().shape(), [128, 128]);
    assert_eq!(t.params.get("blend.0.ffn.2.w").unwrap().shape(), [256, 128]);
}
