//! Datasets, multi-seed experiments and telemetry files.

mod common;

use common::invariants::{small_config, small_task};
use finetune_lab::harness::{gen_dataset, Approach, Lab, Metric, Schedule};
use finetune_lab::optim::{ClipPolicy, OptimConfig};
use finetune_lab::schedule::GuConfig;
use finetune_lab::telemetry::emit::{read_steps, write_deltas, write_steps, DELTAS_HEADER, STEPS_HEADER};

fn approach(name: &str, clip: ClipPolicy) -> Approach {
    Approach {
        clip,
        epochs: 3,
        batch_size: 8,
        optim: OptimConfig {
            lr: 2e-3,
            ..OptimConfig::default()
        },
        ..Approach::new(name)
    }
}

#[test]
fn same_seed_same_dataset_bytes() {
    let t = small_task(50);
    let a = serde_json::to_vec(&gen_dataset(&t, 40).unwrap()).unwrap();
    let b = serde_json::to_vec(&gen_dataset(&t, 40).unwrap()).unwrap();
    assert_eq!(a, b);
    let mut t2 = small_task(50);
    t2.seed = 4;
    let other = serde_json::to_vec(&gen_dataset(&t2, 40).unwrap()).unwrap();
    assert_ne!(a, other);
}

#[test]
fn clean_task_is_learnable() {
    let mut cfg = small_config(96);
    cfg.tasks[0].label_noise = 0.0;
    cfg.tasks[0].metric = Metric::Accuracy;
    let lab = Lab::new(cfg).unwrap();
    let task = lab.config().tasks[0].clone();
    let data = lab.dataset(&task).unwrap();
    let a = Approach {
        epochs: 10,
        ..approach("a", ClipPolicy::None)
    };
    let r = lab.finetune(&a, &task, &data, 0, None).unwrap().result;
    assert!(r.value > r.majority_baseline_value + 0.1, "{r:?}");
    assert!(!r.failed);
}

#[test]
fn parallel_benchmark_matches_sequential() {
    let mut cfg = small_config(32);
    cfg.runs.num_seeds = 3;
    cfg.approaches = vec![approach("plain", ClipPolicy::None), approach("cw", ClipPolicy::component_wise(0.05))];
    let lab = Lab::new(cfg).unwrap();
    let a = lab.run_benchmark(1).unwrap();
    let b = lab.run_benchmark(3).unwrap();
    assert_eq!(a.cells, b.cells);
    assert_eq!(a.steps, b.steps);
    assert_eq!(a.deltas, b.deltas);
    assert_eq!(a.cells.len(), 2);
    assert!(a.failures.is_empty());
    // run seeds do not depend on the approach
    assert_eq!(a.cells[0].runs[1].seed, a.cells[1].runs[1].seed);
}

#[test]
fn sweep_rows_are_consistent() {
    let mut cfg = small_config(32);
    cfg.runs.num_seeds = 2;
    cfg.approaches = vec![approach("cwgnc", ClipPolicy::component_wise(0.05))];
    cfg.sweep.thresholds = vec![0.05, 1e12];
    let lab = Lab::new(cfg).unwrap();
    let rep = lab.run_threshold_sweep(&lab.config().sweep.thresholds.clone(), 1).unwrap();
    assert_eq!(rep.task, "toy");
    assert_eq!(rep.rows.len(), 3);
    assert_eq!(rep.rows[2].threshold, "none");
    let huge = rep.rows[1].aggregate.as_ref().unwrap();
    let none = rep.rows[2].aggregate.as_ref().unwrap();
    assert_eq!(huge, none);

    // the tau=0.05 row is the configured approach as is
    let bench = lab.run_benchmark(1).unwrap();
    let cell = bench.cell("cwgnc", "toy").unwrap();
    let values: Vec<f64> = cell.runs.iter().map(|r| r.value).collect();
    let swept: Vec<f64> = rep.bench.cells[0].runs.iter().map(|r| r.value).collect();
    assert_eq!(values, swept);
}

#[test]
fn gu_experiment_reports_every_iteration() {
    let mut cfg = small_config(32);
    cfg.runs.gu_num_seeds = 2;
    cfg.approaches = vec![approach("base", ClipPolicy::None)];
    cfg.gu.approach = "base".into();
    cfg.gu.schedule = GuConfig {
        epochs_per_iteration: 1,
        ..GuConfig::default()
    };
    let lab = Lab::new(cfg).unwrap();
    let rep = lab.run_gu_experiment(2).unwrap();
    assert_eq!(rep.iterations, 4);
    // 4 points each for gu and gu-restart, one for full
    assert_eq!(rep.trajectory.len(), 9);
    assert!(rep.trajectory.iter().all(|p| p.n == 2));
    let restart = rep.final_cell("gu-restart").unwrap();
    let full = rep.final_cell("full").unwrap();
    assert_eq!(restart.aggregate, full.aggregate);
    let last = rep.trajectory.iter().find(|p| p.method == "gu-restart" && p.iteration == 3).unwrap();
    assert_eq!(last.mean, full.aggregate.as_ref().unwrap().mean);
}

#[test]
fn gu_schedule_runs_as_an_approach() {
    let mut cfg = small_config(32);
    cfg.runs.num_seeds = 2;
    cfg.approaches = vec![Approach {
        schedule: Schedule::Gu(GuConfig {
            epochs_per_iteration: 1,
            max_iterations: Some(2),
            ..GuConfig::default()
        }),
        ..approach("gu2", ClipPolicy::None)
    }];
    let lab = Lab::new(cfg).unwrap();
    let rep = lab.run_benchmark(1).unwrap();
    let iterations: Vec<i64> = rep.steps.iter().map(|s| s.iteration).collect();
    assert!(iterations.contains(&0) && iterations.contains(&1) && !iterations.contains(&2));
}

#[test]
fn csv_files_round_trip() {
    let mut cfg = small_config(16);
    cfg.runs.num_seeds = 2;
    cfg.telemetry.step_every = 1;
    cfg.approaches = vec![approach("cw", ClipPolicy::component_wise(0.05))];
    let lab = Lab::new(cfg).unwrap();
    let rep = lab.run_benchmark(1).unwrap();
    let mut buf = Vec::new();
    write_steps(&mut buf, &rep.steps).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert_eq!(text.lines().next().unwrap(), STEPS_HEADER.join(","));
    let back = read_steps(buf.as_slice()).unwrap();
    assert_eq!(back, rep.steps);
    // 2 runs, 3 epochs of 2 batches, one row per component
    let components = rep.steps[0].norms.len();
    assert_eq!(text.lines().count(), 1 + 2 * 6 * components);
    for s in &rep.steps {
        for n in s.norms.values() {
            assert!(n.post <= 0.05 * (1.0 + 1e-12));
            assert!(n.post <= n.pre);
        }
    }

    let mut empty = Vec::new();
    write_deltas(&mut empty, &[]).unwrap();
    assert_eq!(String::from_utf8(empty).unwrap().trim_end(), DELTAS_HEADER.join(","));
}
