//! The four subcommands. Seeds and sweep points are dispatched to a
//! bounded rayon pool; output files are named by (axis value, seed), so
//! the artifacts are independent of worker placement.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use interleave_core::data::{gen_synthetic_family, load_delimited, Split};
use interleave_core::engine::{self, EngineConfig, Method, RunReport, Task};
use interleave_core::supernet::{ArchParams, CellSpec, DiscretizedCell, EdgeSpec, OpKind};
use interleave_core::tape::Tape;
use interleave_core::tensor::{ParamSet, Tensor};
use interleave_core::verify::{
    compare_grads, finite_diff_gradient, hypergrad_check, CheckReport,
};
use interleave_core::{Error, Result};

use crate::config::ExperimentConfig;
use crate::output;

/// Build the task list from the configured data source.
pub fn build_tasks(cfg: &ExperimentConfig) -> Result<Vec<Task>> {
    if let Some(s) = &cfg.data.synthetic {
        let (_, tasks) = gen_synthetic_family(&s.to_core())?;
        return Ok(tasks.into_iter().map(Task::from_synthetic).collect());
    }
    let f = cfg.data.files.as_ref().expect("validated data source");
    if f.class_counts.len() != f.paths.len() {
        return Err(Error::InvalidConfig(format!(
            "{} class counts for {} files",
            f.class_counts.len(),
            f.paths.len()
        )));
    }
    let mut tasks = Vec::with_capacity(f.paths.len());
    for (i, p) in f.paths.iter().enumerate() {
        let (train, val, test) = load_delimited(
            Path::new(p),
            f.class_counts[i],
            (f.fractions[0], f.fractions[1], f.fractions[2]),
            f.seed,
        )?;
        debug_assert_eq!(train.split, Split::Train);
        tasks.push(Task {
            name: format!("file-{}", i + 1),
            classes: f.class_counts[i],
            train,
            val,
            test,
        });
    }
    Ok(tasks)
}

fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))
}

/// `run`: one report per seed plus the cross-seed summary.
pub fn cmd_run(cfg: &ExperimentConfig, out_dir: &Path, threads: usize) -> Result<()> {
    let method = Method::parse(&cfg.method).expect("validated method");
    let tasks = build_tasks(cfg)?;
    let cell = cfg.cell.build()?;
    fs::create_dir_all(out_dir)?;

    let pool = thread_pool(threads)?;
    let mut losses: Vec<(u64, Vec<f64>)> = pool.install(|| {
        cfg.seeds
            .par_iter()
            .map(|&seed| {
                let engine_cfg = cfg.engine_config(seed);
                let report = engine::run_method(&engine_cfg, &tasks, &cell, method)?;
                output::write_run_outputs(out_dir, seed, &report)?;
                // a zero-iteration run summarizes its initial losses
                let finals = match report.iterations.last() {
                    Some(it) => it.val_losses.clone(),
                    None => engine::initial_val_losses(&engine_cfg, &tasks, &cell, method)?,
                };
                Ok((seed, finals))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    losses.sort_by_key(|(s, _)| *s);

    let summary = output::summarize(method.name(), &losses);
    output::write_summary(out_dir, &summary)?;
    println!(
        "run: {} seeds, final val loss {:.6} +/- {:.6} -> {}",
        summary.seeds.len(),
        summary.mean,
        summary.std,
        out_dir.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Lambda,
    Rounds,
    Order,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Option<SweepAxis> {
        match s {
            "lambda" => Some(SweepAxis::Lambda),
            "rounds" => Some(SweepAxis::Rounds),
            "order" => Some(SweepAxis::Order),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Lambda => "lambda",
            SweepAxis::Rounds => "rounds",
            SweepAxis::Order => "order",
        }
    }
}

fn order_permutations(learners: usize) -> Vec<Vec<usize>> {
    let identity: Vec<usize> = (1..=learners).collect();
    let reversed: Vec<usize> = (1..=learners).rev().collect();
    if identity == reversed {
        vec![identity]
    } else {
        vec![identity, reversed]
    }
}

/// One sweep point: an axis value applied on top of the base config.
struct SweepPoint {
    label: String,
    index: usize,
    mutate: Box<dyn Fn(&mut EngineConfig) + Send + Sync>,
}

fn sweep_points(cfg: &ExperimentConfig, axis: SweepAxis) -> Vec<SweepPoint> {
    match axis {
        SweepAxis::Lambda => cfg
            .sweep
            .lambda_values
            .iter()
            .enumerate()
            .map(|(i, &v)| SweepPoint {
                label: format!("{v}"),
                index: i,
                mutate: Box::new(move |e: &mut EngineConfig| e.lambda = v),
            })
            .collect(),
        SweepAxis::Rounds => cfg
            .sweep
            .rounds_values
            .iter()
            .enumerate()
            .map(|(i, &m)| SweepPoint {
                label: format!("{m}"),
                index: i,
                mutate: Box::new(move |e: &mut EngineConfig| e.rounds = m),
            })
            .collect(),
        SweepAxis::Order => order_permutations(cfg.learners())
            .into_iter()
            .enumerate()
            .map(|(i, order)| {
                let label = order
                    .iter()
                    .map(ToString::to_string)
                    .collect::<Vec<_>>()
                    .join(",");
                SweepPoint {
                    label,
                    index: i,
                    mutate: Box::new(move |e: &mut EngineConfig| e.task_order = order.clone()),
                }
            })
            .collect(),
    }
}

/// `sweep`: run the axis grid, retrain each discretized result, and emit a
/// plottable TSV plus a gnuplot script.
pub fn cmd_sweep(
    cfg: &ExperimentConfig,
    axis: SweepAxis,
    out_dir: &Path,
    threads: usize,
) -> Result<()> {
    let method = Method::parse(&cfg.method).expect("validated method");
    let tasks = build_tasks(cfg)?;
    let cell = cfg.cell.build()?;
    fs::create_dir_all(out_dir)?;
    let points = sweep_points(cfg, axis);
    if points.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "sweep axis {} has no values",
            axis.name()
        )));
    }

    let mut grid: Vec<(usize, u64)> = Vec::new();
    for p in 0..points.len() {
        for &s in &cfg.seeds {
            grid.push((p, s));
        }
    }

    let pool = thread_pool(threads)?;
    let mut rows: Vec<output::SweepRow> = pool.install(|| {
        grid.par_iter()
            .map(|&(pi, seed)| {
                let point = &points[pi];
                let mut engine_cfg = cfg.engine_config(seed);
                (point.mutate)(&mut engine_cfg);
                let report = engine::run_method(&engine_cfg, &tasks, &cell, method)?;
                output::write_run_outputs(
                    &out_dir.join(format!("{}_{}_seed{}", axis.name(), point.index, seed)),
                    seed,
                    &report,
                )?;
                let test_errors: Vec<f64> = tasks
                    .iter()
                    .map(|t| {
                        engine::retrain_discretized(
                            &report.final_arch,
                            t,
                            &cfg.retrain.to_core(seed),
                        )
                    })
                    .collect::<Result<_>>()?;
                Ok(output::SweepRow {
                    axis: axis.name().to_string(),
                    value: point.label.clone(),
                    value_index: point.index,
                    seed,
                    final_val_loss: report.final_val_loss_mean().unwrap_or(f64::NAN),
                    test_errors,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    rows.sort_by_key(|a| (a.value_index, a.seed));

    let table = output::sweep_table(&rows, cfg.learners());
    fs::write(out_dir.join(format!("sweep_{}.tsv", axis.name())), &table)?;
    fs::write(
        out_dir.join(format!("sweep_{}.gp", axis.name())),
        output::sweep_plot_script(axis.name()),
    )?;
    println!("sweep {}: {} rows -> {}", axis.name(), rows.len(), out_dir.display());
    Ok(())
}

// ── gradient checking ───────────────────────────────────────────────────

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape, data).expect("random tensor")
}

/// One random tanh-MLP gradient check against central finite differences.
fn weight_instance_check(seed: u64, eps: f64, tol: f64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.gen_range(2..=6);
    let h = rng.gen_range(2..=8);
    let c = rng.gen_range(2..=5);
    let n = rng.gen_range(2..=6);
    let mut params = ParamSet::new();
    params.insert("w1".into(), rand_tensor(&mut rng, vec![d, h], 0.8));
    params.insert("w2".into(), rand_tensor(&mut rng, vec![h, c], 0.8));
    let x = rand_tensor(&mut rng, vec![n, d], 1.0);
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
    let with_reg = seed.is_multiple_of(2);
    let anchor = rand_tensor(&mut rng, vec![d, h], 0.8);

    let eval = |tape: &mut Tape, refs: &interleave_core::tape::ParamRefs| {
        let xr = tape.leaf(x.clone());
        let pre = tape.matmul(xr, refs["w1"])?;
        let z = tape.tanh(pre)?;
        let logits = tape.matmul(z, refs["w2"])?;
        let ce = tape.cross_entropy(logits, &labels)?;
        if with_reg {
            let a = tape.leaf(anchor.clone());
            let reg = tape.sq_l2_dist(refs["w1"], a)?;
            let reg_s = tape.scale(reg, 0.5)?;
            tape.add(ce, reg_s)
        } else {
            Ok(ce)
        }
    };

    let mut tape = Tape::new();
    let refs = tape.register(&params);
    let loss = eval(&mut tape, &refs)?;
    let grads = tape.backward(loss, &refs)?;
    let ad = tape.materialize(&grads);

    let fd = finite_diff_gradient(
        |p| {
            let mut t = Tape::new();
            let r = t.register(p);
            let l = eval(&mut t, &r)?;
            t.value(l).item()
        },
        &params,
        eps,
    )?;
    Ok(compare_grads(&format!("weights[{seed}]"), &ad, &fd, tol))
}

fn gradcheck_cell() -> CellSpec {
    // tanh activations only: finite differences stay clean of relu kinks
    let ops = vec![OpKind::Zero, OpKind::Identity, OpKind::Linear, OpKind::LinearTanh];
    let edges = vec![
        EdgeSpec { from: 0, to: 1, ops: ops.clone() },
        EdgeSpec { from: 1, to: 2, ops },
    ];
    CellSpec::new(vec![4, 4, 4], edges).expect("gradcheck cell")
}

fn gradcheck_tasks(k: usize, seed: u64) -> Result<Vec<Task>> {
    let cfg = interleave_core::data::SyntheticFamilyConfig {
        tasks: k,
        input_dim: 4,
        hidden: 4,
        relatedness: 0.8,
        label_noise: 0.0,
        class_counts: vec![2, 3][..k].to_vec(),
        n_train: 24,
        n_val: 12,
        n_test: 12,
        seed,
    };
    let (_, ts) = gen_synthetic_family(&cfg)?;
    Ok(ts.into_iter().map(Task::from_synthetic).collect())
}

/// Weight-gradient oracle suite: `instances` random nets against finite
/// differences, aggregated into one report over the per-instance maxima.
pub fn weight_oracle_suite(
    instances: usize,
    eps: f64,
    tol: f64,
    seed: u64,
) -> Result<CheckReport> {
    let mut weight_errs: Vec<f64> = Vec::with_capacity(instances);
    for i in 0..instances {
        let r = weight_instance_check(seed.wrapping_add(i as u64), eps, tol)?;
        weight_errs.push(r.max_rel_err);
    }
    Ok(CheckReport::from_errors(
        &format!("weight gradients ({instances} instances)"),
        &weight_errs,
        tol,
    ))
}

/// Unrolled hypergradient vs finite differences over the
/// K x M x lambda grid of small instances.
pub fn hypergrad_grid_check(eps: f64, tol: f64, seed: u64) -> Result<Vec<CheckReport>> {
    let mut reports = Vec::new();
    for &k in &[1usize, 2] {
        for &m in &[1usize, 2] {
            for &lambda in &[0.0, 100.0] {
                let cell = gradcheck_cell();
                let tasks = gradcheck_tasks(k, seed.wrapping_add(100 + k as u64))?;
                let engine_cfg = EngineConfig {
                    learners: k,
                    rounds: m,
                    lambda,
                    eta: 2e-3,
                    eta_arch: 0.2,
                    outer_iters: 1,
                    hypergrad_mode: engine::HypergradMode::Unrolled,
                    batch_size: 8,
                    seed,
                    task_order: (1..=k).collect(),
                    mtl_weights: vec![1.0; k],
                    warm_start: false,
                    early_stop_tol: None,
                };
                let mut arng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(7));
                let alpha = ArchParams::from_rows(
                    cell.edges()
                        .iter()
                        .map(|e| (0..e.ops.len()).map(|_| arng.gen_range(-0.5..0.5)).collect())
                        .collect(),
                )?;
                let mut r =
                    hypergrad_check(&engine_cfg, &tasks, &cell, &alpha, eps, tol)?;
                r.label = format!("hypergrad K={k} M={m} lambda={lambda}");
                reports.push(r);
            }
        }
    }
    Ok(reports)
}

/// `gradcheck`: weight-gradient oracle suite plus the unrolled
/// hypergradient grid; nonzero exit when any check fails.
pub fn cmd_gradcheck(cfg: &ExperimentConfig, out_dir: &Path) -> Result<bool> {
    let g = &cfg.gradcheck;
    fs::create_dir_all(out_dir)?;
    let mut reports: Vec<CheckReport> = Vec::new();
    reports.push(weight_oracle_suite(
        g.weight_instances,
        g.weight_eps,
        g.weight_tol,
        g.seed,
    )?);
    reports.extend(hypergrad_grid_check(g.hyper_eps, g.hyper_tol, g.seed)?);

    let all_pass = reports.iter().all(|r| r.pass);
    let mut text = String::new();
    for r in &reports {
        text.push_str(&r.render());
        text.push('\n');
    }
    text.push_str(if all_pass { "ALL PASS\n" } else { "FAILURES PRESENT\n" });
    fs::write(out_dir.join("gradcheck_report.txt"), &text)?;
    print!("{text}");
    Ok(all_pass)
}

/// `discretize`: re-derive the architecture file from a run report, or pass
/// an existing architecture file through unchanged (idempotent).
pub fn cmd_discretize(input: &Path, out_dir: &Path) -> Result<PathBuf> {
    let text = fs::read_to_string(input)?;
    fs::create_dir_all(out_dir)?;
    let rendered = if let Ok(parsed) = DiscretizedCell::parse(&text) {
        parsed.render()
    } else {
        let report: RunReport = serde_json::from_str(&text).map_err(|e| {
            Error::Data(format!(
                "{} is neither an architecture file nor a run report: {e}",
                input.display()
            ))
        })?;
        // rebuild the mixed cell from the recorded candidates, then
        // re-discretize from the final logits
        let edges = report
            .final_arch
            .edges
            .iter()
            .map(|e| EdgeSpec {
                from: e.from,
                to: e.to,
                ops: e.candidates.clone(),
            })
            .collect();
        let cell = CellSpec::new(report.final_arch.widths.clone(), edges)?;
        let alpha = ArchParams::from_rows(report.final_alpha.clone())?;
        interleave_core::supernet::discretize(&alpha, &cell).render()
    };
    let out_path = out_dir.join(format!(
        "{}_arch.txt",
        input
            .file_stem()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| "input".into())
    ));
    fs::write(&out_path, rendered)?;
    println!("discretize: {} -> {}", input.display(), out_path.display());
    Ok(out_path)
}
