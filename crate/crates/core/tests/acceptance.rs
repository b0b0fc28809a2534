//! End-to-end acceptance checks. Each test prints one verdict line straight
//! to stderr, bypassing the harness capture, so a plain `cargo test` run
//! lists every criterion whether it passes or not.

mod common;

#[path = "../../numcore/tests/support/primitive_suite.rs"]
mod primitive_suite;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use common::oracles::{full_model_grad_check, random_mixture, tail_by_quadrature};
use common::{max_abs_diff, rng, uniform};
use numcore::{grad_check, Graph, NumError, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use sense::blending::feature_blending;
use sense::cli::{run, EXIT_OK};
use sense::datagen::*;
use sense::encoder::alpha_values;
use sense::evaluation::*;
use sense::heads::*;
use sense::model::*;
use sense::training::*;

fn verdict(n: u8, name: &str, pass: bool, detail: &str) {
    let word = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n:>2} {name}: {word} ({detail})");
    assert!(pass, "criterion {n} {name}: {detail}");
}

fn num(e: ModelError) -> NumError {
    match e {
        ModelError::Num(n) => n,
        other => panic!("unexpected model error: {other}"),
    }
}

#[test]
fn criterion_01_gradient_integrity() {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut checks = 0usize;
    for (group, run_group) in primitive_suite::GROUPS {
        run_group(100, &mut |name: &str, seed: u64, outcome| {
            checks += 1;
            match outcome {
                Ok(r) if r.passes(primitive_suite::TOL) => {}
                Ok(r) => failures.push(format!("{group}/{name} seed {seed}: {:.2e}", r.max_rel_error)),
                Err(e) => failures.push(format!("{group}/{name} seed {seed}: {e}")),
            }
        });
    }

    let mut r = rng(7);
    let logits = uniform(&mut r, &[4, 5], -2.0, 2.0);
    let targets = Tensor::from_fn(&[4, 5], |i| ((i * 7) % 3 == 0) as u8 as f32);
    let bce = grad_check(
        |g, x| {
            let p = g.sigmoid(x);
            discrete_loss(g, p, &targets).map_err(num)
        },
        &logits,
        1e-3,
    )
    .unwrap();
    let k = 3;
    let raw = Tensor::from_fn(&[4, 3 * k], |i| {
        if i % (3 * k) >= 2 * k {
            r.random_range(0.3f32..1.2)
        } else {
            r.random_range(-1.5f32..1.5)
        }
    });
    let y = [0.2f32, -0.7, 1.1, 0.0];
    let nll = grad_check(
        |g, x| {
            let gmm = mdn_head(g, x, k).map_err(num)?;
            mdn_nll(g, &gmm, &y).map_err(num)
        },
        &raw,
        1e-3,
    )
    .unwrap();
    for (name, rep) in [("bce loss", &bce), ("mixture nll", &nll)] {
        checks += 1;
        if !rep.passes(1e-3) {
            failures.push(format!("{name}: {:.2e}", rep.max_rel_error));
        }
    }

    let mut worst_model = 0.0f64;
    for head in [HeadKind::Discrete, HeadKind::Continuous] {
        let model = SenseModel::new(ModelConfig::tiny(4, 5, head), 3).unwrap();
        let (rep, sampled) = full_model_grad_check(&model);
        checks += 1;
        worst_model = worst_model.max(rep.max_rel_error);
        if !rep.passes(1e-3) || 4 * rep.checked < 3 * sampled {
            failures.push(format!("{head:?} model: {rep:?}"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "{checks} checks, {} failed, worst full-model error {worst_model:.2e}, {secs:.1} s{}",
        failures.len(),
        failures
            .first()
            .map(|f| format!(", first failure {f}"))
            .unwrap_or_default()
    );
    verdict(1, "gradient integrity", failures.is_empty() && secs < 120.0, &detail);
}

#[test]
fn criterion_02_exceedance_probability() {
    let mut r = rng(99);
    let mut worst = 0.0f64;
    let mut monotone = true;
    let grid: Vec<f64> = (0..1000).map(|i| -6.0 + 12.0 * i as f64 / 999.0).collect();
    for _ in 0..100 {
        let p = random_mixture(&mut r);
        assert!(p.weights.len() <= 5);
        let u = r.random_range(-3.0..3.0);
        worst = worst.max((exceedance_prob(&p, u) - tail_by_quadrature(&p, u)).abs());
        let vals: Vec<f64> = grid.iter().map(|&u| exceedance_prob(&p, u)).collect();
        monotone &= vals.windows(2).all(|w| w[1] <= w[0]);
    }
    let detail = format!("max |analytic - quadrature| {worst:.2e} over 100 mixtures, monotone {monotone}");
    verdict(2, "exceedance probability", worst < 1e-6 && monotone, &detail);
}

fn brute_force(tuples: &[(Option<f64>, Option<f64>)]) -> [u64; 4] {
    let mut c = [0u64; 4];
    for &(a, e) in tuples {
        let slot = match (a, e) {
            (Some(a), Some(e)) if a < e => 0,
            (Some(_), None) => 1,
            (None, None) => 2,
            _ => 3,
        };
        c[slot] += 1;
    }
    c
}

#[test]
fn criterion_03_metric_oracle() {
    let mut r = rng(42);
    let mut ok = true;
    for level in 0..5 {
        let tuples: Vec<(Option<f64>, Option<f64>)> = (0..1000)
            .map(|i| {
                if i % 20 == 0 {
                    let t = f64::from(r.random_range(0..60u32)) * 0.5;
                    return (Some(t), Some(t));
                }
                let a = r.random_bool(0.6).then(|| f64::from(r.random_range(0..60u32)) * 0.5);
                let e = r
                    .random_bool(0.5 - 0.08 * level as f64)
                    .then(|| f64::from(r.random_range(0..60u32)) * 0.5);
                (a, e)
            })
            .collect();
        let outcomes: Vec<Outcome> = tuples.iter().map(|&(a, e)| classify_outcome(a, e)).collect();
        let c = ConfusionCounts::from_outcomes(&outcomes);
        let [tp, fp, tn, fn_] = brute_force(&tuples);
        ok &= [c.tp, c.fp, c.tn, c.fn_] == [tp, fp, tn, fn_];
        let m = metrics(&c);
        let (tpf, fpf, fnf) = (tp as f64, fp as f64, fn_ as f64);
        ok &= m.precision == (tp + fp > 0).then(|| tpf / (tpf + fpf));
        ok &= m.recall == (tp + fn_ > 0).then(|| tpf / (tpf + fnf));
        let f1 = m.f1.unwrap();
        let p = tpf / (tpf + fpf);
        let rc = tpf / (tpf + fnf);
        ok &= (f1 - 2.0 * p * rc / (p + rc)).abs() < 1e-12;
    }
    let tie = classify_outcome(Some(4.5), Some(4.5));
    ok &= tie == Outcome::FalseNegative;
    verdict(
        3,
        "metric oracle",
        ok,
        &format!("5 levels x 1000 tuples, equal-time case is {tie:?}"),
    );
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
fn criterion_04_permutation_equivariance() {
    let blend = |m: &SenseModel, h: &Tensor| {
        let mut g = Graph::new();
        let p = m.params.bind(&mut g, |_| false);
        let hv = g.constant(h.clone());
        let out = feature_blending(&mut g, &p, &m.config, hv).unwrap();
        g.value(out).clone()
    };
    let mut worst = 0.0f32;
    for trial in 0..20u64 {
        let mut cfg = ModelConfig::test_profile(16, 5, HeadKind::Discrete);
        cfg.block_kind = BlockKind::Transformer;
        let m = SenseModel::new(cfg, trial).unwrap();
        let mut r = rng(100 + trial);
        let h = uniform(&mut r, &[16, 128], -2.0, 2.0);
        let mut perm: Vec<usize> = (0..16).collect();
        perm.shuffle(&mut r);
        let lhs = blend(&m, &permute_rows(&h, &perm));
        let rhs = permute_rows(&blend(&m, &h), &perm);
        worst = worst.max(max_abs_diff(lhs.data(), rhs.data()));
    }
    verdict(
        4,
        "permutation equivariance",
        worst < 1e-5,
        &format!("max abs {worst:.2e} over 20 trials"),
    );
}

#[test]
fn criterion_05_phase_freezing() {
    let data = generate_catalog(&GenConfig {
        n_stations: 4,
        n_events: 3,
        seed: 5,
        ..GenConfig::default()
    })
    .unwrap();
    let model = SenseModel::new(ModelConfig::test_profile(4, 5, HeadKind::Discrete), 11).unwrap();
    let settings = TrainSettings {
        seed: 1,
        epochs: [2, 2, 2],
        ..TrainSettings::default()
    };
    let mut t = Trainer::new(model, settings);
    let schedule = t.schedule();
    let mut notes = Vec::new();
    let mut ok = true;
    for phase in &schedule[..2] {
        let before = t.model.params.clone();
        let logs = t.train_phase(&data, phase, &mut |_| {}).unwrap();
        t.cursor = Cursor {
            phase: t.cursor.phase + 1,
            epoch: 0,
        };
        ok &= logs.len() == 2;
        let moved: Vec<ParamGroup> = before
            .iter()
            .filter(|(name, tensor)| t.model.params.get(name).unwrap() != *tensor)
            .map(|(name, _)| ParamGroup::of(name))
            .collect();
        let early_moved = moved.contains(&ParamGroup::EarlyLocality);
        let alpha_half = alpha_values(&t.model.params).iter().all(|&a| a == 0.5);
        if phase.index == 1 {
            ok &= !early_moved && alpha_half && !moved.is_empty();
            notes.push(format!(
                "phase 1 early locality unchanged {}, alpha 0.5 {alpha_half}",
                !early_moved
            ));
        } else {
            ok &= early_moved && moved.iter().all(|&g| g == ParamGroup::EarlyLocality);
            notes.push(format!(
                "phase 2 tensors changed {}, all early locality {ok}",
                moved.len()
            ));
        }
    }
    verdict(5, "phase freezing", ok, &notes.join("; "));
}

fn level_one_f1(model: &SenseModel, val: &Catalog, split: &Catalog) -> f64 {
    let vt = probability_traces(model, val, 0.5).unwrap();
    let tau = sweep_thresholds(&vt, val, &default_grid()).unwrap();
    let traces = probability_traces(model, split, 0.5).unwrap();
    evaluate(&traces, split, &tau).unwrap()[0].metrics.f1.unwrap_or(0.0)
}

#[test]
fn criterion_06_learning_smoke() {
    let start = Instant::now();
    let cat = generate_catalog(&GenConfig {
        n_stations: 16,
        n_events: 200,
        seed: 7,
        ..GenConfig::default()
    })
    .unwrap();
    let (train, val, test) = split_catalog(&cat, (0.6, 0.1, 0.3)).unwrap();
    let fit = |head| {
        let model = SenseModel::new(ModelConfig::test_profile(16, cat.thresholds.len(), head), 1).unwrap();
        let settings = TrainSettings {
            seed: 1,
            epochs: profile_epochs("test", None).unwrap(),
            ..TrainSettings::default()
        };
        let mut trainer = Trainer::new(model, settings);
        let report = trainer.run_schedule(&train, None, &mut |_| {}).unwrap();
        (trainer.model, report)
    };

    let (_, cont) = fit(HeadKind::Continuous);
    let first = cont.epochs.first().unwrap().loss;
    let last = cont.epochs.last().unwrap().loss;
    let drop = 1.0 - last / first;

    let (disc, _) = fit(HeadKind::Discrete);
    let train_f1 = level_one_f1(&disc, &val, &train);
    let test_f1 = level_one_f1(&disc, &val, &test);
    let secs = start.elapsed().as_secs_f64();

    let ok = drop >= 0.5 && train_f1 >= 0.8 && test_f1 >= 0.6 && secs < 900.0;
    let detail = format!(
        "continuous NLL {first:.4} -> {last:.4} ({:.1}% drop), level-1 F1 train {train_f1:.3} held-out {test_f1:.3}, {secs:.0} s",
        100.0 * drop
    );
    verdict(6, "learning smoke", ok, &detail);
}

#[test]
fn criterion_07_ordinal_targets() {
    let mut r = rng(11);
    let mut ok = true;
    for _ in 0..10_000 {
        let pga = 10f64.powf(r.random_range(-3.0..2.0));
        let got = discrete_targets(pga, &TAIWAN_THRESHOLDS).unwrap();
        let mut want = Vec::new();
        for t in TAIWAN_THRESHOLDS {
            want.push(if pga >= t { 1.0f32 } else { 0.0 });
        }
        ok &= got == want && got.windows(2).all(|w| w[0] >= w[1]);
    }
    verdict(7, "ordinal targets", ok, "10000 random peaks against a direct loop");
}

#[test]
fn criterion_08_mixture_anchor() {
    let y = [0.3f32, -1.2, 2.0];
    let mut g = Graph::new();
    let gmm = GmmVars {
        log_weights: g.constant(Tensor::zeros(&[3, 1])),
        means: g.constant(Tensor::new(vec![3, 1], y.to_vec()).unwrap()),
        stds: g.constant(Tensor::full(&[3, 1], 1.0)),
    };
    let nll = mdn_nll(&mut g, &gmm, &y).unwrap();
    let nll_err = (g.scalar(nll).unwrap() - 0.5 * (2.0 * std::f64::consts::PI).ln()).abs();
    let mut tail_err = 0.0f64;
    for (mu, s) in [(0.0, 1.0), (1.3, 0.2), (-2.0, 3.0)] {
        let p = GmmParams {
            weights: vec![1.0],
            means: vec![mu],
            stds: vec![s],
        };
        tail_err = tail_err.max((exceedance_prob(&p, mu) - 0.5).abs());
    }
    let detail = format!("NLL error {nll_err:.1e}, exceedance at the mean off by {tail_err:.1e}");
    verdict(8, "mixture anchor", nll_err < 1e-6 && tail_err < 1e-9, &detail);
}

fn cli(args: &[&str]) {
    let mut argv = vec!["sense"];
    argv.extend_from_slice(args);
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run(argv, &mut out, &mut err);
    assert_eq!(code, EXIT_OK, "{args:?}: {}", String::from_utf8_lossy(&err));
}

fn full_run(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let out = dir.to_str().unwrap();
    cli(&[
        "gen-data",
        "--out",
        out,
        "--seed",
        "9",
        "--stations",
        "4",
        "--events",
        "12",
    ]);
    cli(&[
        "train",
        "--out",
        out,
        "--seed",
        "9",
        "--model-profile",
        "tiny",
        "--epochs",
        "1,1,1",
    ]);
    let ckpt = dir.join("train/phase3.ckpt");
    cli(&[
        "eval",
        "--out",
        out,
        "--seed",
        "9",
        "--model-profile",
        "tiny",
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    let mut files = vec![dir.join("eval/metrics.csv")];
    files.extend((1..=3).map(|p| dir.join(format!("train/phase{p}.ckpt"))));
    files
        .into_iter()
        .map(|p| (p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()))
        .collect()
}

#[test]
fn criterion_09_reproducibility() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (first, second) = (full_run(a.path()), full_run(b.path()));
    let same = first == second;
    verdict(
        9,
        "reproducibility",
        same,
        &format!("{} artifacts compared byte for byte", first.len()),
    );
}

#[test]
fn criterion_10_dataset_format() {
    let cat = generate_catalog(&GenConfig {
        n_stations: 5,
        n_events: 8,
        seed: 13,
        ..GenConfig::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&cat, dir.path()).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    let bits = |c: &Catalog| -> Vec<u32> {
        c.events
            .iter()
            .flat_map(|e| e.traces.iter().map(|v| v.to_bits()))
            .collect()
    };
    let round_trip = back == cat && bits(&back) == bits(&cat);

    // a writer that follows only the documented layout
    let hand = tempfile::tempdir().unwrap();
    let root = hand.path();
    fs::create_dir(root.join("events")).unwrap();
    fs::write(
        root.join("manifest.json"),
        r#"{"format_version": 1, "sample_rate": 100.0, "n_samples": 3, "thresholds": [0.81, 2.5],
            "stations": [{"station_id": 0, "longitude": 121.1, "latitude": 23.9, "height": 40.0},
                         {"station_id": 1, "longitude": 121.4, "latitude": 24.1, "height": 5.5}]}"#,
    )
    .unwrap();
    fs::write(
        root.join("events/7.json"),
        r#"{"event_id": 7, "origin_time": 12.0,
            "hypocenter": {"longitude": 121.2, "latitude": 24.0, "depth_km": 8.0}, "magnitude": 4.6,
            "stations": [{"station_id": 0, "max_pga": 3.0, "exceed_times": [0.01, 0.02], "p_arrival": 0.0},
                         {"station_id": 1, "max_pga": 0.5, "exceed_times": [null, null]}]}"#,
    )
    .unwrap();
    let values: Vec<f32> = (0..18).map(|i| (i as f32 - 9.0) / 3.0).collect();
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(root.join("events/7.f32"), bytes).unwrap();
    let foreign = read_dataset(root);
    let foreign_ok = foreign.as_ref().is_ok_and(|c| {
        c.n_stations() == 2
            && c.events.len() == 1
            && c.events[0].labels[1].exceed_times == [None, None]
            && c.events[0].labels[0].p_arrival == Some(0.0)
            && c.events[0].traces[..] == values[..]
    });
    let detail = format!("round trip exact {round_trip}, hand-written dataset readable {foreign_ok}");
    verdict(10, "dataset format", round_trip && foreign_ok, &detail);
}
