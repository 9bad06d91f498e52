//! End-to-end command tests through the library entry point.

use std::fs;
use std::path::{Path, PathBuf};

use interleave_cli::{run_cli, EXIT_CONFIG, EXIT_OK};

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("config.toml");
    fs::write(&p, body).unwrap();
    p
}

fn small_config() -> &'static str {
    r#"
seeds = [7]

[engine]
outer_iters = 4

[data.synthetic]
input_dim = 8
hidden = 8
samples = [48, 24, 24]

[cell]
nodes = 3
width = 8
"#
}

fn cli(args: &[&str]) -> i32 {
    run_cli(std::iter::once("interleave").chain(args.iter().copied()))
}

#[test]
fn run_twice_produces_byte_identical_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), small_config());
    let out1 = tmp.path().join("a");
    let out2 = tmp.path().join("b");
    for out in [&out1, &out2] {
        let code = cli(&[
            "run",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, EXIT_OK);
    }
    for name in ["metrics_seed7.jsonl", "arch_seed7.txt", "summary.json"] {
        let a = fs::read(out1.join(name)).unwrap();
        let b = fs::read(out2.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between runs");
    }
}

#[test]
fn il_and_blocked_metrics_share_field_sets() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_il = write_config(tmp.path(), small_config());
    let blocked_body = small_config().replace("seeds = [7]", "method = \"blocked\"\nseeds = [7]");
    let cfg_bl = tmp.path().join("blocked.toml");
    fs::write(&cfg_bl, blocked_body).unwrap();

    let out_il = tmp.path().join("il");
    let out_bl = tmp.path().join("bl");
    assert_eq!(
        cli(&["run", "--config", cfg_il.to_str().unwrap(), "--out", out_il.to_str().unwrap()]),
        EXIT_OK
    );
    assert_eq!(
        cli(&["run", "--config", cfg_bl.to_str().unwrap(), "--out", out_bl.to_str().unwrap()]),
        EXIT_OK
    );

    let read_lines = |p: PathBuf| -> Vec<serde_json::Value> {
        fs::read_to_string(p)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    };
    let il = read_lines(out_il.join("metrics_seed7.jsonl"));
    let bl = read_lines(out_bl.join("metrics_seed7.jsonl"));
    assert_eq!(il.len(), bl.len());
    let keys = |v: &serde_json::Value| -> Vec<String> {
        v.as_object().unwrap().keys().cloned().collect()
    };
    for (a, b) in il.iter().zip(&bl) {
        assert_eq!(keys(a), keys(b));
    }
    // schedules differ, so the (learner, round) sequences differ
    let seq = |rows: &[serde_json::Value]| -> Vec<(u64, u64)> {
        rows.iter()
            .map(|r| (r["learner"].as_u64().unwrap(), r["round"].as_u64().unwrap()))
            .collect()
    };
    assert_ne!(seq(&il[..4]), seq(&bl[..4]));
}

#[test]
fn zero_iteration_run_summarizes_initial_losses() {
    let tmp = tempfile::tempdir().unwrap();
    let body = small_config().replace("outer_iters = 4", "outer_iters = 0");
    let cfg = write_config(tmp.path(), &body);
    let out = tmp.path().join("out");
    assert_eq!(
        cli(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]),
        EXIT_OK
    );
    // empty report body, but a well-formed summary with finite numbers
    let metrics = fs::read_to_string(out.join("metrics_seed7.jsonl")).unwrap();
    assert!(metrics.is_empty());
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let mean = summary["mean"].as_f64().unwrap();
    assert!(mean.is_finite());
    // with zeroed logits and fresh heads the loss sits near ln(C)
    assert!(mean > 0.5 && mean < 2.5, "initial mean {mean}");
}

#[test]
fn config_errors_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    // missing file
    assert_eq!(
        cli(&["run", "--config", tmp.path().join("nope.toml").to_str().unwrap()]),
        EXIT_CONFIG
    );
    // unparseable
    let bad = write_config(tmp.path(), "definitely not toml ===");
    assert_eq!(cli(&["run", "--config", bad.to_str().unwrap()]), EXIT_CONFIG);
    // no data source
    let nodata = tmp.path().join("nodata.toml");
    fs::write(&nodata, "seeds = [1]\n").unwrap();
    assert_eq!(cli(&["run", "--config", nodata.to_str().unwrap()]), EXIT_CONFIG);
    // bad axis
    let cfg = write_config(tmp.path(), small_config());
    assert_eq!(
        cli(&["sweep", "--config", cfg.to_str().unwrap(), "--axis", "zigzag"]),
        EXIT_CONFIG
    );
}

#[test]
fn divergence_exits_with_code_three() {
    let tmp = tempfile::tempdir().unwrap();
    // a proximal coefficient large enough to overflow within one iteration
    let body = small_config().replace("[engine]", "[engine]\nlambda = 1e300");
    let cfg = write_config(tmp.path(), &body);
    let out = tmp.path().join("out");
    let code = cli(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code, interleave_cli::EXIT_DIVERGENCE);
}

#[test]
fn file_data_source_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    // two tiny delimited files, 8 features to match the cell width
    for (name, classes) in [("t1.csv", 2usize), ("t2.csv", 3usize)] {
        let mut text = String::new();
        for i in 0..40 {
            let feats: Vec<String> = (0..8).map(|j| format!("{}.5", (i * 3 + j) % 7)).collect();
            text.push_str(&format!("{},{}\n", feats.join(","), i % classes));
        }
        fs::write(tmp.path().join(name), text).unwrap();
    }
    let body = format!(
        r#"
seeds = [3]

[engine]
outer_iters = 2
batch_size = 8

[data.files]
paths = ["{}", "{}"]
class_counts = [2, 3]
fractions = [0.6, 0.2, 0.2]
seed = 1

[cell]
nodes = 3
width = 8
"#,
        tmp.path().join("t1.csv").display(),
        tmp.path().join("t2.csv").display()
    );
    let cfg = write_config(tmp.path(), &body);
    let out = tmp.path().join("out");
    assert_eq!(
        cli(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]),
        EXIT_OK
    );
    assert!(out.join("report_seed3.json").exists());
}

#[test]
fn discretize_one_hot_report_keeps_the_one_hot_ops() {
    use interleave_core::engine::{RunReport, REPORT_SCHEMA};
    use interleave_core::supernet::{discretize, ArchParams, CellSpec, OpKind};

    let tmp = tempfile::tempdir().unwrap();
    let cell = CellSpec::fully_connected(3, 4, &OpKind::ALL);
    // one-hot on linear_tanh for all three edges
    let alpha = ArchParams::from_rows(vec![vec![-9.0, -9.0, -9.0, -9.0, 9.0]; 3]).unwrap();
    let report = RunReport {
        schema: REPORT_SCHEMA,
        method: "il".into(),
        learners: 1,
        rounds: 1,
        seed: 0,
        schedule: "1.1".into(),
        iterations: vec![],
        final_alpha: alpha.snapshot(),
        final_arch: discretize(&alpha, &cell),
        wall_time_s: 0.0,
    };
    let rp = tmp.path().join("report.json");
    fs::write(&rp, serde_json::to_string(&report).unwrap()).unwrap();
    let cfgp = write_config(tmp.path(), small_config());
    let out = tmp.path().join("out");
    assert_eq!(
        cli(&[
            "discretize",
            "--config",
            cfgp.to_str().unwrap(),
            "--report",
            rp.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]),
        EXIT_OK
    );
    let text = fs::read_to_string(out.join("report_arch.txt")).unwrap();
    let parsed = interleave_core::supernet::DiscretizedCell::parse(&text).unwrap();
    for e in &parsed.edges {
        assert_eq!(e.kept, OpKind::LinearTanh);
    }
}

#[test]
fn order_sweep_on_identical_tasks_yields_equal_summaries() {
    // Two learners reading the same file are identical tasks; swapping the
    // task order must permute, not change, the results.
    let tmp = tempfile::tempdir().unwrap();
    let mut text = String::new();
    for i in 0..60 {
        let feats: Vec<String> = (0..6).map(|j| format!("{}.25", (i * 5 + j * 3) % 11)).collect();
        text.push_str(&format!("{},{}\n", feats.join(","), i % 3));
    }
    fs::write(tmp.path().join("shared.csv"), &text).unwrap();
    let body = format!(
        r#"
seeds = [2, 4]

[engine]
outer_iters = 3
batch_size = 8

[data.files]
paths = ["{0}", "{0}"]
class_counts = [3, 3]
fractions = [0.5, 0.25, 0.25]
seed = 9

[cell]
nodes = 3
width = 6

[retrain]
steps = 20
"#,
        tmp.path().join("shared.csv").display()
    );
    let cfg = write_config(tmp.path(), &body);
    let out = tmp.path().join("sw");
    assert_eq!(
        cli(&[
            "sweep",
            "--config",
            cfg.to_str().unwrap(),
            "--axis",
            "order",
            "--out",
            out.to_str().unwrap(),
        ]),
        EXIT_OK
    );
    let table = fs::read_to_string(out.join("sweep_order.tsv")).unwrap();
    let rows: Vec<Vec<&str>> = table.lines().skip(1).map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 4); // 2 orders x 2 seeds
    // group rows by seed; the two orders' summary columns must coincide
    for seed in ["2", "4"] {
        let per_order: Vec<&Vec<&str>> = rows.iter().filter(|r| r[3] == seed).collect();
        assert_eq!(per_order.len(), 2);
        let (a, b) = (per_order[0], per_order[1]);
        assert_ne!(a[1], b[1], "orders should differ");
        assert_eq!(a[4], b[4], "final val loss differs between orders");
        assert_eq!(a[5], b[5], "mean test error differs between orders");
    }
}

#[test]
fn gradcheck_writes_report_and_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let body = r#"
[data.synthetic]
[gradcheck]
weight_instances = 5
"#;
    let cfg = write_config(tmp.path(), body);
    let out = tmp.path().join("gc");
    assert_eq!(
        cli(&["gradcheck", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]),
        EXIT_OK
    );
    let text = fs::read_to_string(out.join("gradcheck_report.txt")).unwrap();
    assert!(text.contains("ALL PASS"));
}
