//! Loop-form reference implementations shared by the test targets.
#![allow(dead_code)]

pub mod invariants;

use finetune_lab::model::{Binder, ComponentId, Model, ModelConfig};
use finetune_lab::numerics::Graph;
use finetune_lab::seed;
use rand::Rng;

pub const FD_H: f64 = 1e-5;

/// |a - n| / max(|a|, |n|, 1e-4); the floor keeps near-zero entries from
/// dominating through cancellation noise.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-4)
}

fn transformer_loss(model: &Model, tokens: &[Vec<usize>], labels: &[usize]) -> f64 {
    let mut g = Graph::new();
    let mut bind = Binder::new(model, &|_| false);
    let logits = model.classify_graph(&mut g, &mut bind, tokens).unwrap();
    let loss = g.cross_entropy(logits, labels).unwrap();
    g.value(loss).item()
}

/// Worst relative error between autodiff and central differences over every
/// parameter entry of a random L=2, d=8 transformer.
pub fn transformer_gradcheck(model_seed: u64) -> f64 {
    let mut model = Model::new(ModelConfig {
        num_layers: 2,
        hidden: 8,
        num_heads: 2,
        ffn: 16,
        vocab: 12,
        max_seq_len: 5,
        num_classes: 3,
        init_std: 0.02,
        seed: model_seed,
    })
    .unwrap();
    // move every parameter off its structured init so biases and gains matter
    let mut rng = seed::rng(model_seed + 92);
    for t in model.params_mut().values_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let tokens = vec![vec![0, 5, 11, 2, 7], vec![3, 3, 9, 1, 10], vec![6, 4, 8, 0, 2]];
    let labels = [2, 0, 1];

    let mut g = Graph::new();
    let all = |_: &ComponentId| true;
    let (loss, vars) = {
        let mut bind = Binder::new(&model, &all);
        let logits = model.classify_graph(&mut g, &mut bind, &tokens).unwrap();
        let loss = g.cross_entropy(logits, &labels).unwrap();
        (loss, bind.trainable_vars(&g))
    };
    let grads = g.backward(loss).unwrap();
    assert_eq!(vars.len(), model.params().len());

    let mut worst: f64 = 0.0;
    for (id, var) in &vars {
        let analytic = grads.get(*var).unwrap().to_vec();
        for (j, &a) in analytic.iter().enumerate() {
            let orig = model.param(id.as_str()).unwrap().data()[j];
            model.param_mut(id.as_str()).unwrap().data_mut()[j] = orig + FD_H;
            let up = transformer_loss(&model, &tokens, &labels);
            model.param_mut(id.as_str()).unwrap().data_mut()[j] = orig - FD_H;
            let down = transformer_loss(&model, &tokens, &labels);
            model.param_mut(id.as_str()).unwrap().data_mut()[j] = orig;
            worst = worst.max(rel_err(a, (up - down) / (2.0 * FD_H)));
        }
    }
    worst
}

/// Scalar AdamW written out step by step, gradient from `grad(theta)`.
pub struct ScalarAdam {
    pub lr: f64,
    pub b1: f64,
    pub b2: f64,
    pub eps: f64,
    pub wd: f64,
    pub bias_correction: bool,
}

impl ScalarAdam {
    pub fn trajectory(&self, theta0: f64, steps: usize, grad: impl Fn(f64) -> f64) -> Vec<f64> {
        let mut theta = theta0;
        let mut m = 0.0;
        let mut v = 0.0;
        let mut b1t = 1.0;
        let mut b2t = 1.0;
        let mut out = Vec::new();
        for _ in 0..steps {
            let g = grad(theta);
            m = self.b1 * m + (1.0 - self.b1) * g;
            v = self.b2 * v + (1.0 - self.b2) * g * g;
            b1t *= self.b1;
            b2t *= self.b2;
            let (mh, vh) = if self.bias_correction {
                (m / (1.0 - b1t), v / (1.0 - b2t))
            } else {
                (m, v)
            };
            theta = theta - self.lr * mh / (vh.sqrt() + self.eps) - self.lr * self.wd * theta;
            out.push(theta);
        }
        out
    }
}

pub fn loop_l2(x: &[f64]) -> f64 {
    let mut s = 0.0;
    for v in x {
        s += v * v;
    }
    s.sqrt()
}

pub fn loop_rmsd(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    (s / a.len() as f64).sqrt()
}

pub fn loop_cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    match (na == 0.0, nb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => dot / (na.sqrt() * nb.sqrt()),
    }
}

/// Two-pass mean and sample std.
pub fn loop_mean_std(x: &[f64]) -> (f64, f64) {
    let mut s = 0.0;
    for v in x {
        s += v;
    }
    let mean = s / x.len() as f64;
    let mut ss = 0.0;
    for v in x {
        ss += (v - mean) * (v - mean);
    }
    let std = if x.len() > 1 { (ss / (x.len() - 1) as f64).sqrt() } else { 0.0 };
    (mean, std)
}

/// (tp, fp, fn, tn) for class 1 as positive.
pub fn loop_confusion(pred: &[usize], label: &[usize]) -> (f64, f64, f64, f64) {
    let mut c = [[0.0; 2]; 2];
    for i in 0..pred.len() {
        c[label[i]][pred[i]] += 1.0;
    }
    (c[1][1], c[0][1], c[1][0], c[0][0])
}

pub fn loop_f1(pred: &[usize], label: &[usize]) -> f64 {
    let (tp, fp, fn_, _) = loop_confusion(pred, label);
    let d = 2.0 * tp + fp + fn_;
    if d == 0.0 {
        0.0
    } else {
        2.0 * tp / d
    }
}

pub fn loop_mcc(pred: &[usize], label: &[usize]) -> f64 {
    let (tp, fp, fn_, tn) = loop_confusion(pred, label);
    let factors = [tp + fp, tp + fn_, tn + fp, tn + fn_];
    if factors.contains(&0.0) {
        return 0.0;
    }
    (tp * tn - fp * fn_) / factors.iter().product::<f64>().sqrt()
}
