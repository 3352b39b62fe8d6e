//! Bit-exact trajectory checks, each returning a one-line summary or the
//! first mismatch.

use finetune_lab::harness::{Approach, Config, Lab, Metric, Pattern, Schedule, TaskSpec};
use finetune_lab::model::{ModelConfig, Params, PretrainConfig, Scope};
use finetune_lab::numerics::Tensor;
use finetune_lab::optim::{ClipPolicy, OptimConfig};
use finetune_lab::schedule::{GuConfig, ParamTrace};
use finetune_lab::telemetry::Reference;

pub type Check = Result<String, String>;

pub fn small_task(train_size: usize) -> TaskSpec {
    TaskSpec {
        name: "toy".into(),
        train_size,
        validation_size: 40,
        num_classes: 2,
        imbalance: 0.6,
        majority_class: 1,
        label_noise: 0.1,
        seq_len: 8,
        pattern: Pattern::Presence,
        distractors: 0,
        metric: Metric::Mcc,
        seed: 3,
    }
}

/// L=4, d=16 model with a short pretraining run.
pub fn small_config(train_size: usize) -> Config {
    Config {
        model: ModelConfig {
            num_layers: 4,
            hidden: 16,
            num_heads: 2,
            ffn: 32,
            vocab: 40,
            max_seq_len: 8,
            ..ModelConfig::default()
        },
        pretrain: PretrainConfig {
            steps: 20,
            batch_size: 8,
            ..PretrainConfig::default()
        },
        tasks: vec![small_task(train_size)],
        approaches: Vec::new(),
        ..Config::default()
    }
}

fn approach(name: &str, clip: ClipPolicy, schedule: Schedule, epochs: usize) -> Approach {
    Approach {
        clip,
        schedule,
        epochs,
        batch_size: 8,
        optim: OptimConfig {
            lr: 2e-3,
            ..OptimConfig::default()
        },
        ..Approach::new(name)
    }
}

fn traced(lab: &Lab, a: &Approach) -> (ParamTrace, f64) {
    let task = lab.config().tasks[0].clone();
    let data = lab.dataset(&task).unwrap();
    let mut trace = ParamTrace::new();
    let out = lab.finetune(a, &task, &data, 1, Some(&mut trace)).unwrap();
    (trace, out.result.value)
}

/// Same shape and the same bits in every entry.
pub fn bit_equal(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn params_equal(a: &Params, b: &Params) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|((ia, ta), (ib, tb))| ia == ib && bit_equal(ta, tb))
}

fn first_diff(a: &[Params], b: &[Params]) -> Option<usize> {
    if a.len() != b.len() {
        return Some(a.len().min(b.len()));
    }
    a.iter().zip(b).position(|(x, y)| !params_equal(x, y))
}

/// component_wise with an unreachable threshold against no clipping, 200
/// steps of full fine-tuning.
pub fn degenerate_clip() -> Check {
    let lab = Lab::new(small_config(64)).unwrap();
    let epochs = 25; // 8 batches per epoch
    let plain = approach("none", ClipPolicy::None, Schedule::Full, epochs);
    let huge = approach("huge", ClipPolicy::component_wise(1e12), Schedule::Full, epochs);
    let (a, va) = traced(&lab, &plain);
    let (b, vb) = traced(&lab, &huge);
    if a.len() < 200 {
        return Err(format!("only {} steps", a.len()));
    }
    match first_diff(&a, &b) {
        None if va.to_bits() == vb.to_bits() => Ok(format!("{} steps bit-identical", a.len())),
        None => Err(format!("metric differs: {va} vs {vb}")),
        Some(i) => Err(format!("parameters differ at step {i}")),
    }
}

/// Layers below the unfrozen range keep their exact values through every
/// step of every GU iteration.
pub fn gu_freeze() -> Check {
    let lab = Lab::new(small_config(32)).unwrap();
    let gu = GuConfig {
        epochs_per_iteration: 2,
        ..GuConfig::default()
    };
    let a = approach("gu", ClipPolicy::None, Schedule::Gu(gu), 1);
    let (trace, _) = traced(&lab, &a);
    let layers = lab.config().model.num_layers;
    let per_iteration = trace.len() / layers;
    let pretrained = lab.pretrained().params();
    let mut checked = 0;
    for k in 0..layers {
        let start = k * per_iteration;
        for step in &trace[start..start + per_iteration] {
            for (id, t) in step {
                let frozen = matches!(id.scope(), Some(Scope::Layer(i)) if i < layers - k);
                if !frozen {
                    continue;
                }
                let before = if k == 0 { &pretrained[id] } else { &trace[start - 1][id] };
                if !bit_equal(t, before) {
                    return Err(format!("iteration {k}: {id} moved"));
                }
                if !bit_equal(t, &pretrained[id]) {
                    return Err(format!("iteration {k}: {id} differs from pretrained"));
                }
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} frozen component-steps unchanged over {layers} iterations"))
}

/// The last GU-restart iteration against full fine-tuning for the same
/// number of epochs.
pub fn restart_equals_full() -> Check {
    let lab = Lab::new(small_config(48)).unwrap();
    let gu = GuConfig {
        epochs_per_iteration: 3,
        restart: true,
        ..GuConfig::default()
    };
    let restart = approach("r", ClipPolicy::component_wise(0.05), Schedule::Gu(gu), 1);
    let full = approach("f", ClipPolicy::component_wise(0.05), Schedule::Full, 3);
    let (rt, rv) = traced(&lab, &restart);
    let (ft, fv) = traced(&lab, &full);
    let tail = &rt[rt.len() - ft.len()..];
    match first_diff(tail, &ft) {
        None if rv.to_bits() == fv.to_bits() => {
            Ok(format!("{} steps bit-identical, metric {fv}", ft.len()))
        }
        None => Err(format!("metric differs: {rv} vs {fv}")),
        Some(i) => Err(format!("parameters differ at step {i}")),
    }
}

/// Iteration-0 deltas against pretrained: only the top layer and head move,
/// every other layer reports exactly (0, 1).
pub fn gu_first_iteration_deltas() -> Check {
    let lab = Lab::new(small_config(32)).unwrap();
    let gu = GuConfig {
        epochs_per_iteration: 2,
        ..GuConfig::default()
    };
    let a = approach("gu", ClipPolicy::None, Schedule::Gu(gu), 1);
    let task = lab.config().tasks[0].clone();
    let data = lab.dataset(&task).unwrap();
    let out = lab.finetune(&a, &task, &data, 0, None).unwrap();
    let top = lab.config().model.num_layers;
    let rec = out
        .telemetry
        .deltas
        .iter()
        .find(|d| d.iteration == 0 && d.reference == Reference::Pretrained)
        .ok_or("no iteration-0 record")?;
    let mut moved = Vec::new();
    for l in &rec.layers {
        let trained = matches!(l.layer, Scope::Head) || l.layer == Scope::Layer(top);
        if trained {
            if l.max_rmsd <= 0.0 {
                return Err(format!("{:?} did not move", l.layer));
            }
            moved.push(format!("{:?} {:.2e}", l.layer, l.max_rmsd));
        } else if (l.max_rmsd, l.min_cosine) != (0.0, 1.0) {
            return Err(format!("{:?} reports ({}, {})", l.layer, l.max_rmsd, l.min_cosine));
        }
    }
    Ok(format!("moved: {}; all other layers (0, 1)", moved.join(", ")))
}
