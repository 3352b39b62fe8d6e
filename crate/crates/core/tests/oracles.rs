//! Optimizer, clipping and statistics against loop-form references.

mod common;

use common::*;
use finetune_lab::harness::{f1, mcc, Metric};
use finetune_lab::model::{ComponentId, Params};
use finetune_lab::numerics::{cosine_similarity, l2_norm, rmsd, Tensor};
use finetune_lab::optim::{clip_gradients, AdamW, AdamWHyper, ClipPolicy, GradMap};
use finetune_lab::seed;
use finetune_lab::telemetry::{aggregate_runs, RunResult};
use proptest::prelude::*;
use rand::Rng;

fn adam_trajectory(hyper: AdamWHyper, id: &str, theta0: f64, steps: usize, grad: impl Fn(f64) -> f64) -> Vec<f64> {
    let id = ComponentId::new(id);
    let mut params = Params::new();
    params.insert(id.clone(), Tensor::scalar(theta0).unwrap());
    let mut opt = AdamW::new(hyper).unwrap();
    let mut out = Vec::new();
    for _ in 0..steps {
        let theta = params[&id].item();
        let mut g = GradMap::new();
        g.insert(id.clone(), Tensor::scalar(grad(theta)).unwrap());
        opt.step(&mut params, &g, opt.hyper().lr).unwrap();
        out.push(params[&id].item());
    }
    out
}

fn reference(h: &AdamWHyper) -> ScalarAdam {
    ScalarAdam {
        lr: h.lr,
        b1: h.beta1,
        b2: h.beta2,
        eps: h.eps,
        wd: h.weight_decay,
        bias_correction: h.bias_correction,
    }
}

#[test]
fn adamw_first_step() {
    let h = AdamWHyper {
        lr: 0.1,
        weight_decay: 0.0,
        ..AdamWHyper::default()
    };
    let t = adam_trajectory(h, "x.weight", 1.0, 1, |_| 0.5);
    let expected = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
    assert!((t[0] - expected).abs() < 1e-9);
    assert!((t[0] - 0.9).abs() < 1e-8);
}

#[test]
fn adamw_ten_steps_match_loop() {
    let quad = |th: f64| 2.0 * th - 0.3;
    for bias_correction in [true, false] {
        for weight_decay in [0.0, 0.01] {
            let h = AdamWHyper {
                lr: 0.05,
                weight_decay,
                bias_correction,
                ..AdamWHyper::default()
            };
            let got = adam_trajectory(h.clone(), "x.weight", 1.0, 10, quad);
            let want = reference(&h).trajectory(1.0, 10, quad);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }
    // biases skip weight decay
    let h = AdamWHyper {
        lr: 0.05,
        weight_decay: 0.5,
        ..AdamWHyper::default()
    };
    let got = adam_trajectory(h.clone(), "x.bias", 1.0, 10, quad);
    let want = reference(&AdamWHyper { weight_decay: 0.0, ..h }).trajectory(1.0, 10, quad);
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn clip_exact_and_mixed() {
    let mut g = GradMap::new();
    g.insert(ComponentId::new("a.weight"), Tensor::vector(vec![3.0, 4.0]).unwrap());
    let (c, _) = clip_gradients(&g, &ClipPolicy::component_wise(1.0)).unwrap();
    assert_eq!(c["a.weight"].data(), &[0.6, 0.8]);

    g.insert(ComponentId::new("b.weight"), Tensor::vector(vec![0.01]).unwrap());
    let (c, r) = clip_gradients(&g, &ClipPolicy::component_wise(0.05)).unwrap();
    assert!((r["a.weight"].post - 0.05).abs() < 1e-15);
    assert_eq!(c["b.weight"].data(), &[0.01]);
    let (c, _) = clip_gradients(&g, &ClipPolicy::global(0.05)).unwrap();
    let f = 0.05 / (25.0f64 + 0.0001).sqrt();
    assert!((c["a.weight"].data()[0] - 3.0 * f).abs() < 1e-15);
    assert!((c["b.weight"].data()[0] - 0.01 * f).abs() < 1e-15);
}

#[test]
fn clip_thousand_components() {
    let mut rng = seed::rng(31);
    let mut g = GradMap::new();
    for i in 0..1000 {
        let n = rng.random_range(1..20);
        let scale = 10f64.powf(rng.random_range(-4.0..3.0));
        let data = (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
        g.insert(ComponentId::new(format!("c{i}.weight")), Tensor::vector(data).unwrap());
    }
    for tau in [0.01, 0.05, 1.0] {
        let (c, r) = clip_gradients(&g, &ClipPolicy::component_wise(tau)).unwrap();
        for (id, t) in &c {
            let post = l2_norm(t).unwrap();
            assert!(post <= tau * (1.0 + 1e-12), "{id}: {post} > {tau}");
            if r[id].pre <= tau {
                assert_eq!(t, &g[id]);
            }
        }
    }
}

proptest! {
    #[test]
    fn clip_direction_kept(v in prop::collection::vec(-1e3f64..1e3, 1..30), tau in 1e-3f64..10.0) {
        let mut g = GradMap::new();
        g.insert(ComponentId::new("a.weight"), Tensor::vector(v.clone()).unwrap());
        let (c, r) = clip_gradients(&g, &ClipPolicy::component_wise(tau)).unwrap();
        let out = c["a.weight"].data();
        prop_assert!(r["a.weight"].post <= tau * (1.0 + 1e-12));
        if loop_l2(&v) > 0.0 {
            prop_assert!((loop_cosine(&v, out) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn l2_is_homogeneous(v in prop::collection::vec(-1e3f64..1e3, 1..30), c in -10f64..10.0) {
        let x = Tensor::vector(v.clone()).unwrap();
        let cx = Tensor::vector(v.iter().map(|a| c * a).collect()).unwrap();
        let lhs = l2_norm(&cx).unwrap();
        let rhs = c.abs() * l2_norm(&x).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.max(1.0));
    }

    #[test]
    fn aggregate_bounds(v in prop::collection::vec(-1f64..1.0, 1..40)) {
        let a = aggregate_runs(&results(&v)).unwrap();
        prop_assert!(a.min <= a.mean && a.mean <= a.max);
        prop_assert!(a.std >= 0.0);
    }
}

fn random_vec<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
}

fn results(values: &[f64]) -> Vec<RunResult> {
    values
        .iter()
        .enumerate()
        .map(|(i, &value)| RunResult {
            approach: "a".into(),
            task: "t".into(),
            run_index: i,
            seed: 0,
            metric: Metric::Mcc,
            value,
            failed: value <= 0.0,
            majority_baseline_value: 0.0,
        })
        .collect()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-12
}

#[test]
fn vector_statistics_match_loops() {
    let mut rng = seed::rng(5);
    for _ in 0..100 {
        let n = rng.random_range(1..50);
        let a = random_vec(&mut rng, n);
        let b = random_vec(&mut rng, n);
        let (ta, tb) = (Tensor::vector(a.clone()).unwrap(), Tensor::vector(b.clone()).unwrap());
        assert!(close(l2_norm(&ta).unwrap(), loop_l2(&a)));
        assert!(close(rmsd(&ta, &tb).unwrap(), loop_rmsd(&a, &b)));
        assert!(close(cosine_similarity(&ta, &tb).unwrap(), loop_cosine(&a, &b)));
    }
}

#[test]
fn aggregate_matches_two_pass() {
    let mut rng = seed::rng(6);
    for _ in 0..100 {
        let n = rng.random_range(1..40);
        let v = random_vec(&mut rng, n);
        let a = aggregate_runs(&results(&v)).unwrap();
        let (mean, std) = loop_mean_std(&v);
        assert!(close(a.mean, mean) && close(a.std, std), "{a:?}");
        let max = v.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(a.max, max);
        let failed = v.iter().filter(|x| **x <= 0.0).count() as f64 / n as f64;
        assert!(close(a.failed_fraction, failed));
    }
}

#[test]
fn f1_and_mcc_match_confusion_loop() {
    let mut rng = seed::rng(7);
    for _ in 0..100 {
        let n = rng.random_range(1..80);
        let bias = rng.random_range(0.0..1.0);
        let pred: Vec<usize> = (0..n).map(|_| usize::from(rng.random_bool(bias))).collect();
        let label: Vec<usize> = (0..n).map(|_| usize::from(rng.random_bool(0.5))).collect();
        assert!(close(f1(&pred, &label).unwrap(), loop_f1(&pred, &label)));
        assert!(close(mcc(&pred, &label).unwrap(), loop_mcc(&pred, &label)));
    }
}
