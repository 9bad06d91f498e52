//! Structural identities of the stage updates: the update formula holds
//! elementwise, the proximal chain follows the schedule exactly, and the
//! pull toward the previous stage scales as |1 - 2*eta*lambda|.

use interleave_core::data::{gen_synthetic_family, SyntheticFamilyConfig};
use interleave_core::engine::{
    self, one_step_proximal_update, EngineConfig, HypergradMode, Task,
};
use interleave_core::schedule;
use interleave_core::supernet::{ArchParams, CellSpec, EdgeSpec, OpKind};
use interleave_core::tape::{ParamRefs, Tape};
use interleave_core::tensor::{ParamSet, Tensor};

fn small_cell() -> CellSpec {
    let ops = vec![OpKind::Zero, OpKind::Identity, OpKind::Linear, OpKind::LinearTanh];
    let edges = vec![
        EdgeSpec { from: 0, to: 1, ops: ops.clone() },
        EdgeSpec { from: 1, to: 2, ops },
    ];
    CellSpec::new(vec![4, 4, 4], edges).unwrap()
}

fn small_tasks(k: usize, seed: u64) -> Vec<Task> {
    let cfg = SyntheticFamilyConfig {
        tasks: k,
        input_dim: 4,
        hidden: 4,
        relatedness: 0.8,
        label_noise: 0.0,
        class_counts: vec![2, 3, 4][..k].to_vec(),
        n_train: 24,
        n_val: 12,
        n_test: 12,
        seed,
    };
    let (_, ts) = gen_synthetic_family(&cfg).unwrap();
    ts.into_iter().map(Task::from_synthetic).collect()
}

fn config(k: usize, m: usize, lambda: f64, seed: u64) -> EngineConfig {
    EngineConfig {
        learners: k,
        rounds: m,
        lambda,
        eta: 2e-3,
        eta_arch: 0.2,
        outer_iters: 1,
        hypergrad_mode: HypergradMode::Unrolled,
        batch_size: 8,
        seed,
        task_order: (1..=k).collect(),
        mtl_weights: vec![1.0; k],
        warm_start: false,
        early_stop_tol: None,
    }
}

fn built_pipeline(
    cfg: &EngineConfig,
    tasks: &[Task],
    cell: &CellSpec,
    blocked: bool,
) -> (Tape, engine::Pipeline) {
    let sched = if blocked {
        schedule::build_blocked(cfg.learners, cfg.rounds, &cfg.task_order).unwrap()
    } else {
        schedule::build_interleaved(cfg.learners, cfg.rounds, &cfg.task_order).unwrap()
    };
    let inputs = engine::draw_pipeline_inputs(cfg, tasks, cell, 0, None).unwrap();
    let alpha = ArchParams::zeros(cell);
    let mut tape = Tape::new();
    let pipeline =
        engine::build_schedule_pipeline(&mut tape, cfg, tasks, cell, &sched, &alpha, &inputs)
            .unwrap();
    (tape, pipeline)
}

#[test]
fn update_identity_holds_elementwise_every_stage() {
    // For every stage of a K=2, M=2 run, recompute
    //   w - eta*g - 2*eta*lambda*(w - w_prev)
    // from the recorded gradient values and compare elementwise.
    let cell = small_cell();
    let tasks = small_tasks(2, 51);
    let cfg = config(2, 2, 100.0, 5);
    let (tape, pipeline) = built_pipeline(&cfg, &tasks, &cell, false);

    for trace in &pipeline.stage_traces {
        for (name, &wref) in &trace.w_leaf {
            let w = tape.value(wref);
            let g = tape.value(trace.grad_w[name]);
            let got = tape.value(trace.updated_w[name]);
            for i in 0..w.numel() {
                let mut expect = w.data()[i] - cfg.eta * g.data()[i];
                if let Some(prev) = &trace.prev_updated_w {
                    let pv = tape.value(prev[name]).data()[i];
                    expect -= 2.0 * cfg.eta * cfg.lambda * (w.data()[i] - pv);
                }
                let diff = (got.data()[i] - expect).abs();
                assert!(
                    diff < 1e-12,
                    "stage {} `{name}`[{i}]: {} vs {expect}",
                    trace.stage.token(),
                    got.data()[i]
                );
            }
        }
    }
}

#[test]
fn head_update_identity_holds_elementwise() {
    let cell = small_cell();
    let tasks = small_tasks(2, 52);
    let cfg = config(2, 2, 100.0, 6);
    let (tape, pipeline) = built_pipeline(&cfg, &tasks, &cell, false);
    for ht in &pipeline.head_traces {
        for (name, &href) in &ht.h_leaf {
            let h = tape.value(href);
            let g = tape.value(ht.grad_h[name]);
            let got = tape.value(ht.updated_h[name]);
            for i in 0..h.numel() {
                let expect = h.data()[i] - cfg.eta * g.data()[i];
                assert!(
                    (got.data()[i] - expect).abs() < 1e-12,
                    "learner {} `{name}`[{i}]",
                    ht.learner
                );
            }
        }
    }
}

#[test]
fn round_boundary_links_are_bitwise_identical() {
    // Stage (m, first-in-order) for m > 1 must anchor to stage
    // (m-1, last-in-order): same tape nodes, hence bitwise-equal tensors.
    let cell = small_cell();
    let tasks = small_tasks(2, 53);
    let cfg = config(2, 2, 100.0, 7);
    let (tape, pipeline) = built_pipeline(&cfg, &tasks, &cell, false);

    // interleaved K=2 M=2: seq 2 is (2, first), whose predecessor is seq 1
    let boundary = &pipeline.stage_traces[2];
    assert_eq!(boundary.stage.round, 2);
    assert_eq!(boundary.pred_seq, Some(1));
    let prev_stage = &pipeline.stage_traces[1];
    assert_eq!(prev_stage.stage.round, 1);
    let anchor = boundary.prev_updated_w.as_ref().unwrap();
    for (name, &r) in anchor {
        // the proximal reference IS the previous stage's updated tensor node
        assert_eq!(r, prev_stage.updated_w[name]);
        let a = tape.value(r);
        let b = tape.value(prev_stage.updated_w[name]);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}

#[test]
fn chain_order_equals_schedule_order_and_reaches_alpha() {
    let cell = small_cell();
    let tasks = small_tasks(2, 54);
    let cfg = config(2, 2, 100.0, 8);
    for blocked in [false, true] {
        let sched = if blocked {
            schedule::build_blocked(2, 2, &cfg.task_order).unwrap()
        } else {
            schedule::build_interleaved(2, 2, &cfg.task_order).unwrap()
        };
        let (tape, pipeline) = built_pipeline(&cfg, &tasks, &cell, blocked);
        assert_eq!(pipeline.stage_traces.len(), sched.len());
        for (trace, &stage) in pipeline.stage_traces.iter().zip(sched.stages()) {
            assert_eq!(trace.stage, stage);
            // predecessor trace matches the schedule's predecessor relation
            let pred = sched.predecessor(stage).unwrap();
            match (pred, trace.pred_seq) {
                (None, None) => {}
                (Some(p), Some(seq)) => {
                    assert_eq!(pipeline.stage_traces[seq].stage, p);
                }
                other => panic!("chain mismatch at {}: {other:?}", stage.token()),
            }
            // every updated weight is reachable from every alpha leaf
            for &wref in trace.updated_w.values() {
                for &a in &pipeline.alpha_refs {
                    assert!(
                        tape.reaches(wref, a),
                        "stage {} update does not reach alpha",
                        trace.stage.token()
                    );
                }
            }
        }
    }
}

#[test]
fn lambda_pull_scales_distance_by_one_minus_two_eta_lambda() {
    // With a zero gradient, ||w' - w_prev|| = |1 - 2*eta*lambda| * ||w - w_prev||.
    let eta = 0.05;
    let w0 = Tensor::new(vec![2, 3], vec![0.4, -1.0, 2.0, 0.1, -0.7, 1.5]).unwrap();
    let prev0 = Tensor::new(vec![2, 3], vec![0.0, 0.5, 1.0, -0.5, 0.3, 2.0]).unwrap();
    let before: f64 = w0
        .data()
        .iter()
        .zip(prev0.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();

    let mut last_dist = f64::INFINITY;
    for factor in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let lambda = factor / (2.0 * eta);
        let mut tape = Tape::new();
        let w = tape.leaf(w0.clone());
        let mut leaves = ParamRefs::new();
        leaves.insert("w".into(), w);
        let mut grads = ParamRefs::new();
        grads.insert("w".into(), tape.leaf(Tensor::zeros(vec![2, 3])));
        let mut prev = ParamRefs::new();
        prev.insert("w".into(), tape.leaf(prev0.clone()));
        let updated =
            one_step_proximal_update(&mut tape, &leaves, &grads, &prev, eta, lambda).unwrap();
        let after: f64 = tape
            .value(updated["w"])
            .data()
            .iter()
            .zip(prev0.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let expect = (1.0 - 2.0 * eta * lambda).abs() * before;
        assert!(
            (after - expect).abs() <= 1e-12 * before.max(1.0),
            "factor {factor}: {after} vs {expect}"
        );
        // monotone: larger lambda pulls strictly no farther away
        assert!(after <= last_dist + 1e-15);
        last_dist = after;
    }
}

#[test]
fn il_and_blocked_differ_only_in_schedule_dependent_fields() {
    let cell = small_cell();
    let tasks = small_tasks(2, 55);
    let mut cfg = config(2, 2, 100.0, 9);
    cfg.outer_iters = 2;
    let il = engine::run_il(&cfg, &tasks, &cell).unwrap();
    let blocked = engine::run_blocked(&cfg, &tasks, &cell).unwrap();
    assert_eq!(il.iterations.len(), blocked.iterations.len());
    assert_ne!(il.schedule, blocked.schedule);
    // same record shape: stage count, learners, field presence
    for (a, b) in il.iterations.iter().zip(&blocked.iterations) {
        assert_eq!(a.stages.len(), b.stages.len());
        assert_eq!(a.val_losses.len(), b.val_losses.len());
    }
    // the first stage of round 1 (same learner, same batch, same leaves, no
    // proximal reference yet) sees the same loss under both schedules
    let first_il = &il.iterations[0].stages[0];
    let first_bl = &blocked.iterations[0].stages[0];
    assert_eq!(first_il.learner, first_bl.learner);
    assert_eq!(first_il.train_loss, first_bl.train_loss);
}

#[test]
fn warm_start_state_feeds_next_iteration_leaves() {
    // With warm start, iteration i+1's leaf values must equal iteration i's
    // updated values. Verified through the engine's own inputs.
    let cell = small_cell();
    let tasks = small_tasks(2, 56);
    let mut cfg = config(2, 2, 10.0, 11);
    cfg.warm_start = true;
    cfg.outer_iters = 1;

    let sched = schedule::build_interleaved(2, 2, &cfg.task_order).unwrap();
    let inputs0 = engine::draw_pipeline_inputs(&cfg, &tasks, &cell, 0, None).unwrap();
    let alpha = ArchParams::zeros(&cell);
    let mut tape = Tape::new();
    let pipeline =
        engine::build_schedule_pipeline(&mut tape, &cfg, &tasks, &cell, &sched, &alpha, &inputs0)
            .unwrap();

    // capture what the warm continuation should be for stage (1,1)
    let trace = &pipeline.stage_traces[0];
    let expected: ParamSet = tape.materialize(&trace.updated_w);

    let mut warm = std::collections::BTreeMap::new();
    for t in &pipeline.stage_traces {
        warm.insert(
            (t.stage.round, t.stage.learner),
            engine::LearnerState {
                stage: t.stage,
                w: tape.materialize(&t.updated_w),
                h: inputs0.states[&(t.stage.round, t.stage.learner)].h.clone(),
            },
        );
    }
    let inputs1 = engine::draw_pipeline_inputs(&cfg, &tasks, &cell, 1, Some(&warm)).unwrap();
    let got = &inputs1.states[&(1, 1)].w;
    for (name, t) in &expected {
        assert_eq!(t.data(), got[name].data());
    }
}
