//! Run artifacts. Everything except the report's wall-time field is a
//! deterministic function of config and seed, so repeated runs produce
//! byte-identical metrics, architecture, and summary files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use interleave_core::engine::RunReport;
use interleave_core::{Error, Result};

pub const METRICS_SCHEMA: u32 = 1;

/// One line of the metrics file: a stage of one outer iteration.
/// `val_loss` is the stage's learner's validation loss at the end of the
/// iteration; `arch_grad_norm` is shared by all of the iteration's lines.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub schema: u32,
    pub iter: usize,
    pub stage: usize,
    pub learner: usize,
    pub round: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub arch_grad_norm: f64,
}

/// Render a report as line-delimited metrics records.
pub fn metrics_lines(report: &RunReport) -> String {
    let mut out = String::new();
    for it in &report.iterations {
        for s in &it.stages {
            let rec = MetricsRecord {
                schema: METRICS_SCHEMA,
                iter: it.iter,
                stage: s.seq,
                learner: s.learner,
                round: s.round,
                train_loss: s.train_loss,
                val_loss: it.val_losses[s.learner - 1],
                arch_grad_norm: it.arch_grad_norm,
            };
            out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            out.push('\n');
        }
    }
    out
}

pub fn metrics_path(dir: &Path, seed: u64) -> std::path::PathBuf {
    dir.join(format!("metrics_seed{seed}.jsonl"))
}

pub fn report_path(dir: &Path, seed: u64) -> std::path::PathBuf {
    dir.join(format!("report_seed{seed}.json"))
}

pub fn arch_path(dir: &Path, seed: u64) -> std::path::PathBuf {
    dir.join(format!("arch_seed{seed}.txt"))
}

/// Write the per-seed artifacts: metrics, full report, architecture file.
pub fn write_run_outputs(dir: &Path, seed: u64, report: &RunReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(metrics_path(dir, seed), metrics_lines(report))?;
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Data(format!("report serialize: {e}")))?;
    fs::write(report_path(dir, seed), json)?;
    fs::write(arch_path(dir, seed), report.final_arch.render())?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<RunReport> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("report parse: {e}")))
}

/// Cross-seed summary of final validation losses.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub schema: u32,
    pub method: String,
    pub seeds: Vec<u64>,
    /// Mean-over-learners final validation loss, one entry per seed.
    pub final_val_loss_per_seed: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Per-learner means and standard deviations across seeds.
    pub per_learner_mean: Vec<f64>,
    pub per_learner_std: Vec<f64>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (m, 0.0);
    }
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

/// Build the summary from per-seed per-learner final validation losses
/// (for a zero-iteration run these are the initial losses), sorted by seed.
pub fn summarize(method: &str, per_seed_losses: &[(u64, Vec<f64>)]) -> Summary {
    let seeds: Vec<u64> = per_seed_losses.iter().map(|(s, _)| *s).collect();
    let per_seed: Vec<f64> = per_seed_losses
        .iter()
        .map(|(_, ls)| ls.iter().sum::<f64>() / ls.len() as f64)
        .collect();
    let (mean, std) = mean_std(&per_seed);
    let learners = per_seed_losses.first().map(|(_, ls)| ls.len()).unwrap_or(0);
    let mut per_learner_mean = Vec::with_capacity(learners);
    let mut per_learner_std = Vec::with_capacity(learners);
    for k in 0..learners {
        let xs: Vec<f64> = per_seed_losses.iter().map(|(_, ls)| ls[k]).collect();
        let (m, s) = mean_std(&xs);
        per_learner_mean.push(m);
        per_learner_std.push(s);
    }
    Summary {
        schema: METRICS_SCHEMA,
        method: method.to_string(),
        seeds,
        final_val_loss_per_seed: per_seed,
        mean,
        std,
        per_learner_mean,
        per_learner_std,
    }
}

pub fn write_summary(dir: &Path, summary: &Summary) -> Result<()> {
    let json = serde_json::to_string_pretty(summary)
        .map_err(|e| Error::Data(format!("summary serialize: {e}")))?;
    fs::write(dir.join("summary.json"), json)?;
    Ok(())
}

/// One row of a sweep table.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub axis: String,
    pub value: String,
    pub value_index: usize,
    pub seed: u64,
    pub final_val_loss: f64,
    pub test_errors: Vec<f64>,
}

/// Render sweep rows as a TSV table with a header, suitable for plotting.
pub fn sweep_table(rows: &[SweepRow], learners: usize) -> String {
    let mut out = String::from("axis\tvalue\tvalue_index\tseed\tfinal_val_loss\ttest_err_mean");
    for k in 1..=learners {
        out.push_str(&format!("\ttest_err_t{k}"));
    }
    out.push('\n');
    for r in rows {
        let mean = r.test_errors.iter().sum::<f64>() / r.test_errors.len() as f64;
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.axis, r.value, r.value_index, r.seed, r.final_val_loss, mean
        ));
        for e in &r.test_errors {
            out.push_str(&format!("\t{e}"));
        }
        out.push('\n');
    }
    out
}

/// A minimal gnuplot script for a sweep table.
pub fn sweep_plot_script(axis: &str) -> String {
    format!(
        "set datafile separator '\\t'\n\
         set key autotitle columnhead\n\
         set xlabel '{axis}'\n\
         set ylabel 'final validation loss / test error'\n\
         set term png size 800,500\n\
         set output 'sweep_{axis}.png'\n\
         plot 'sweep_{axis}.tsv' using 3:5 with points pt 7 title 'final val loss', \\\n\
         \x20    'sweep_{axis}.tsv' using 3:6 with points pt 5 title 'test err mean'\n"
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_basics() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert!((m - 2.0).abs() < 1e-15);
        assert!((s - 1.0).abs() < 1e-15);
        let (m1, s1) = mean_std(&[5.0]);
        assert_eq!(m1, 5.0);
        assert_eq!(s1, 0.0);
    }

    #[test]
    fn sweep_table_shape() {
        let rows = vec![
            SweepRow {
                axis: "lambda".into(),
                value: "0".into(),
                value_index: 0,
                seed: 1,
                final_val_loss: 1.5,
                test_errors: vec![0.2, 0.4],
            },
            SweepRow {
                axis: "lambda".into(),
                value: "10".into(),
                value_index: 1,
                seed: 1,
                final_val_loss: 1.4,
                test_errors: vec![0.1, 0.3],
            },
        ];
        let table = sweep_table(&rows, 2);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0].split('\t').count(), 8);
        for l in &lines[1..] {
            assert_eq!(l.split('\t').count(), 8);
        }
        // mean of (0.2, 0.4) is 0.3
        assert!(lines[1].contains("\t0.30000000000000004\t") || lines[1].contains("\t0.3\t"));
    }
}
