//! The multi-level training engine.
//!
//! One outer iteration draws fresh leaf weights for every (round, learner)
//! stage, walks the schedule performing one-step proximal weight updates,
//! applies one-step head updates in the final round, and then takes a
//! gradient step on the architecture logits through the summed validation
//! losses. In `unrolled` mode that gradient is exact reverse-mode through
//! the whole recursive update chain; in `first_order` mode the updated
//! weights are treated as constants.
//!
//! The update rules, written per parameter tensor:
//!
//! ```text
//! first stage:  W' = W - eta * grad_W L(A, W, H, batch)
//! later stages: W' = W - eta * grad_W L(A, W, H, batch) - 2*eta*lambda*(W - W'_prev)
//! final round:  H' = H - eta * grad_H L(A, W, H, batch)
//! arch step:    A <- A - eta_arch * grad_A sum_k L(A, W'_k, H'_k, val_k)
//! ```
//!
//! where `W'_prev` is the previous stage's updated weights, crossing round
//! boundaries (the first stage of round m follows the last stage of round
//! m-1).

use std::collections::BTreeMap;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, Dataset, SyntheticTask, TaskSpec};
use crate::error::{Error, Result};
use crate::schedule::{self, Schedule, StageId};
use crate::supernet::{
    self, discretize, init_params, ArchParams, CellSpec, DiscretizedCell, Head,
};
use crate::tape::{ParamRefs, Tape, TensorRef};
use crate::tensor::{ParamSet, Tensor};

// ── configuration ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HypergradMode {
    /// Exact reverse mode through the full recursive update chain.
    Unrolled,
    /// Updated weights enter the validation loss as detached constants;
    /// only the direct dependence on the architecture remains.
    FirstOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Il,
    Mtl,
    Blocked,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Il => "il",
            Method::Mtl => "mtl",
            Method::Blocked => "blocked",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        match s {
            "il" => Some(Method::Il),
            "mtl" => Some(Method::Mtl),
            "blocked" => Some(Method::Blocked),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub learners: usize,
    pub rounds: usize,
    /// Proximal tradeoff; 0 disables the coupling entirely.
    pub lambda: f64,
    /// Inner one-step size for weights and heads.
    pub eta: f64,
    /// Architecture step size.
    pub eta_arch: f64,
    pub outer_iters: usize,
    pub hypergrad_mode: HypergradMode,
    pub batch_size: usize,
    pub seed: u64,
    /// Permutation of 1..=learners giving the within-round learner order.
    pub task_order: Vec<usize>,
    /// Per-learner coefficients for the joint training and validation
    /// sums of the multi-task baseline.
    pub mtl_weights: Vec<f64>,
    /// Reuse each stage's updated weights as the next outer iteration's
    /// leaves instead of re-drawing them from the initializer.
    pub warm_start: bool,
    /// Stop outer iterations early once the architecture gradient norm
    /// falls below this.
    pub early_stop_tol: Option<f64>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            learners: 2,
            rounds: 2,
            lambda: 100.0,
            eta: 4e-3,
            eta_arch: 0.5,
            outer_iters: 40,
            hypergrad_mode: HypergradMode::Unrolled,
            batch_size: 32,
            seed: 0,
            task_order: vec![2, 1],
            mtl_weights: vec![1.0, 1.0],
            warm_start: false,
            early_stop_tol: Some(1e-6),
        }
    }
}

impl EngineConfig {
    pub fn validate(&self, tasks: &[Task], cell: &CellSpec) -> Result<()> {
        if self.learners == 0 || self.rounds == 0 {
            return Err(Error::InvalidConfig("learners and rounds must be positive".into()));
        }
        if tasks.len() != self.learners {
            return Err(Error::InvalidConfig(format!(
                "{} tasks for {} learners",
                tasks.len(),
                self.learners
            )));
        }
        if self.lambda < 0.0 {
            return Err(Error::InvalidConfig("lambda must be nonnegative".into()));
        }
        if self.eta <= 0.0 || self.eta_arch <= 0.0 {
            return Err(Error::InvalidConfig("step sizes must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if self.mtl_weights.len() != self.learners
            || self.mtl_weights.iter().any(|&w| w < 0.0)
        {
            return Err(Error::InvalidConfig(
                "mtl_weights needs one nonnegative entry per learner".into(),
            ));
        }
        // task_order is validated by the schedule builders
        schedule::build_interleaved(self.learners, self.rounds, &self.task_order)?;
        for t in tasks {
            if t.classes < 2 {
                return Err(Error::InvalidConfig(format!(
                    "task {} needs at least 2 classes",
                    t.name
                )));
            }
            if t.train.is_empty() || t.val.is_empty() {
                return Err(Error::InvalidConfig(format!(
                    "task {} needs nonempty train and val splits",
                    t.name
                )));
            }
            if t.train.features.cols() != cell.input_width() {
                return Err(Error::InvalidConfig(format!(
                    "task {} input width {} does not match cell input {}",
                    t.name,
                    t.train.features.cols(),
                    cell.input_width()
                )));
            }
        }
        Ok(())
    }
}

/// One task as seen by the engine.
#[derive(Debug, Clone)]
pub struct Task {
    pub name: String,
    pub classes: usize,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Task {
    pub fn from_synthetic(t: SyntheticTask) -> Task {
        Task {
            name: t.spec.name,
            classes: t.spec.classes,
            train: t.train,
            val: t.val,
            test: t.test,
        }
    }

    pub fn spec(&self) -> TaskSpec {
        TaskSpec {
            name: self.name.clone(),
            classes: self.classes,
            input_dim: self.train.features.cols(),
            n_train: self.train.len(),
            n_val: self.val.len(),
            n_test: self.test.len(),
        }
    }
}

// ── deterministic substreams ────────────────────────────────────────────

const TAG_INIT: u64 = 0x01;
const TAG_BATCH_STAGE: u64 = 0x02;
const TAG_BATCH_HEAD: u64 = 0x03;
const TAG_RETRAIN_INIT: u64 = 0x04;
const TAG_RETRAIN_BATCH: u64 = 0x05;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent RNG stream keyed by (seed, tags). Every random draw in a
/// run is keyed this way, so results never depend on execution order.
fn substream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut s = splitmix64(seed);
    for &t in tags {
        s = splitmix64(s ^ t);
    }
    ChaCha8Rng::seed_from_u64(s)
}

fn draw_batch(rng: &mut ChaCha8Rng, ds: &Dataset, batch_size: usize) -> Batch {
    let n = ds.len();
    let b = batch_size.min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..b {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(b);
    ds.batch(&idx)
}

// ── pipeline inputs: frozen randomness for one outer iteration ──────────

/// The weights of one learner at one stage.
#[derive(Debug, Clone)]
pub struct LearnerState {
    pub stage: StageId,
    pub w: ParamSet,
    pub h: ParamSet,
}

/// Everything random an outer iteration consumes, drawn up front so the
/// rest of the pipeline is a deterministic function of the architecture.
#[derive(Debug, Clone)]
pub struct PipelineInputs {
    /// Keyed by (round, learner).
    pub states: BTreeMap<(usize, usize), LearnerState>,
    /// Training minibatch per (round, learner) stage.
    pub stage_batches: BTreeMap<(usize, usize), Batch>,
    /// Training minibatch per learner for the final-round head update.
    pub head_batches: BTreeMap<usize, Batch>,
}

/// Draw leaf weights and minibatches for outer iteration `iter`. With
/// `warm` set, stage weights continue from the previous iteration's
/// updated values instead of fresh initializer draws.
///
/// Streams are keyed by (iter, round), not by learner: every learner of a
/// round starts from the same encoder draw and the same batch index
/// stream. This keeps the pipeline fully symmetric under task relabeling,
/// so identical tasks produce identical losses and swapping the task
/// order of identical tasks permutes rather than changes the results.
pub fn draw_pipeline_inputs(
    cfg: &EngineConfig,
    tasks: &[Task],
    cell: &CellSpec,
    iter: usize,
    warm: Option<&BTreeMap<(usize, usize), LearnerState>>,
) -> Result<PipelineInputs> {
    let mut states = BTreeMap::new();
    let mut stage_batches = BTreeMap::new();
    let mut head_batches = BTreeMap::new();
    for m in 1..=cfg.rounds {
        for k in 1..=cfg.learners {
            let task = &tasks[k - 1];
            let state = if let Some(prev) = warm.and_then(|w| w.get(&(m, k))) {
                LearnerState {
                    stage: StageId { round: m, learner: k },
                    w: prev.w.clone(),
                    h: prev.h.clone(),
                }
            } else {
                let mut rng = substream(cfg.seed, &[TAG_INIT, iter as u64, m as u64]);
                let w = init_params(&cell.encoder_param_specs(), &mut rng);
                let head = Head {
                    in_width: cell.output_width(),
                    classes: task.classes,
                };
                let h = init_params(&head.param_specs(), &mut rng);
                LearnerState {
                    stage: StageId { round: m, learner: k },
                    w,
                    h,
                }
            };
            states.insert((m, k), state);

            let mut brng = substream(cfg.seed, &[TAG_BATCH_STAGE, iter as u64, m as u64]);
            stage_batches.insert((m, k), draw_batch(&mut brng, &task.train, cfg.batch_size));
        }
    }
    for k in 1..=cfg.learners {
        let mut brng = substream(cfg.seed, &[TAG_BATCH_HEAD, iter as u64]);
        head_batches.insert(k, draw_batch(&mut brng, &tasks[k - 1].train, cfg.batch_size));
    }
    Ok(PipelineInputs {
        states,
        stage_batches,
        head_batches,
    })
}

// ── one-step update builders ────────────────────────────────────────────

/// `p' = p - eta * g` per tensor, recorded on the tape.
pub fn one_step_update(
    tape: &mut Tape,
    leaves: &ParamRefs,
    grads: &ParamRefs,
    eta: f64,
) -> Result<ParamRefs> {
    let mut updated = ParamRefs::new();
    for (name, &p) in leaves {
        let g = *grads
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.clone()))?;
        let step = tape.scale(g, eta)?;
        updated.insert(name.clone(), tape.sub(p, step)?);
    }
    Ok(updated)
}

/// `p' = p - eta * g - 2*eta*lambda*(p - p_prev)` per tensor. With
/// `lambda == 0` the proximal term is omitted entirely, so the emitted
/// arithmetic is exactly the plain one-step form.
pub fn one_step_proximal_update(
    tape: &mut Tape,
    leaves: &ParamRefs,
    grads: &ParamRefs,
    prev: &ParamRefs,
    eta: f64,
    lambda: f64,
) -> Result<ParamRefs> {
    if lambda == 0.0 {
        return one_step_update(tape, leaves, grads, eta);
    }
    let mut updated = ParamRefs::new();
    for (name, &p) in leaves {
        let g = *grads
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.clone()))?;
        let pv = *prev
            .get(name)
            .ok_or_else(|| Error::UnknownParam(format!("{name} (proximal reference)")))?;
        let step = tape.scale(g, eta)?;
        let moved = tape.sub(p, step)?;
        let gap = tape.sub(p, pv)?;
        let pull = tape.scale(gap, 2.0 * eta * lambda)?;
        updated.insert(name.clone(), tape.sub(moved, pull)?);
    }
    Ok(updated)
}

/// Squared Euclidean distance between two parameter collections, summed
/// over every tensor. Plain values, no tape.
pub fn proximal_term(w: &ParamSet, w_ref: &ParamSet) -> Result<f64> {
    if w.len() != w_ref.len() || !w.keys().eq(w_ref.keys()) {
        return Err(Error::ShapeMismatch(
            "proximal_term parameter sets differ in keys".into(),
        ));
    }
    let mut total = 0.0;
    for (name, a) in w {
        let b = &w_ref[name];
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch(format!(
                "proximal_term `{name}`: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        total += a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>();
    }
    Ok(total)
}

// ── the built pipeline ──────────────────────────────────────────────────

/// Record of one stage's update, kept so the update identity and the
/// proximal chain can be inspected after the fact.
pub struct StageTrace {
    pub seq: usize,
    pub stage: StageId,
    pub w_leaf: ParamRefs,
    pub grad_w: ParamRefs,
    pub train_loss: TensorRef,
    pub updated_w: ParamRefs,
    /// Refs used as the proximal reference (the previous stage's
    /// `updated_w`); `None` for the first stage.
    pub prev_updated_w: Option<ParamRefs>,
    pub pred_seq: Option<usize>,
}

/// Record of one learner's final-round head update.
pub struct HeadTrace {
    pub learner: usize,
    pub h_leaf: ParamRefs,
    pub grad_h: ParamRefs,
    pub train_loss: TensorRef,
    pub updated_h: ParamRefs,
}

/// A fully recorded outer iteration, before the architecture step.
pub struct Pipeline {
    pub alpha_refs: Vec<TensorRef>,
    pub stage_traces: Vec<StageTrace>,
    pub head_traces: Vec<HeadTrace>,
    /// Per-learner validation loss refs (learner, loss), in learner order.
    pub val_losses: Vec<(usize, TensorRef)>,
    /// Weighted sum of the validation losses: the architecture objective.
    pub val_total: TensorRef,
    /// Final-round updated weights per learner.
    pub final_w: BTreeMap<usize, ParamRefs>,
    pub final_h: BTreeMap<usize, ParamRefs>,
}

fn stage_context<T>(r: Result<T>, stage: StageId) -> Result<T> {
    r.map_err(|e| match e {
        e @ Error::Divergence { .. } => e,
        other => Error::Divergence {
            stage: other_stage_token(stage),
            source: Box::new(other),
        },
    })
}

fn other_stage_token(stage: StageId) -> String {
    stage.token()
}

fn register_state(tape: &mut Tape, state: &LearnerState) -> (ParamRefs, ParamRefs) {
    let mut w = ParamRefs::new();
    for (name, t) in &state.w {
        w.insert(name.clone(), tape.leaf(t.clone()));
    }
    let mut h = ParamRefs::new();
    for (name, t) in &state.h {
        h.insert(name.clone(), tape.leaf(t.clone()));
    }
    (w, h)
}

fn weighted_val_total(
    tape: &mut Tape,
    losses: &[(usize, TensorRef)],
    weights: Option<&[f64]>,
) -> Result<TensorRef> {
    let mut total: Option<TensorRef> = None;
    for (i, &(_, l)) in losses.iter().enumerate() {
        let term = match weights {
            Some(ws) if ws[i] != 1.0 => tape.scale(l, ws[i])?,
            _ => l,
        };
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one learner"))
}

/// Build one outer iteration of the scheduled (interleaved or blocked)
/// method on `tape`: every stage update, the final-round head updates,
/// and the per-learner validation losses.
pub fn build_schedule_pipeline(
    tape: &mut Tape,
    cfg: &EngineConfig,
    tasks: &[Task],
    cell: &CellSpec,
    sched: &Schedule,
    alpha: &ArchParams,
    inputs: &PipelineInputs,
) -> Result<Pipeline> {
    let alpha_refs = alpha.bind(tape);
    let mut stage_traces: Vec<StageTrace> = Vec::with_capacity(sched.len());
    let mut leaf_refs: BTreeMap<(usize, usize), (ParamRefs, ParamRefs)> = BTreeMap::new();

    for (seq, &stage) in sched.stages().iter().enumerate() {
        let (m, k) = (stage.round, stage.learner);
        let state = &inputs.states[&(m, k)];
        let (w_refs, h_refs) = register_state(tape, state);
        leaf_refs.insert((m, k), (w_refs.clone(), h_refs.clone()));

        let batch = &inputs.stage_batches[&(m, k)];
        let loss = stage_context(
            supernet::loss(tape, cell, &alpha_refs, &w_refs, &h_refs, batch),
            stage,
        )?;
        let grad_w = stage_context(tape.backward(loss, &w_refs), stage)?;

        let (updated_w, prev_updated_w, pred_seq) = if seq == 0 {
            let u = stage_context(one_step_update(tape, &w_refs, &grad_w, cfg.eta), stage)?;
            (u, None, None)
        } else {
            let prev = stage_traces[seq - 1].updated_w.clone();
            let u = stage_context(
                one_step_proximal_update(tape, &w_refs, &grad_w, &prev, cfg.eta, cfg.lambda),
                stage,
            )?;
            (u, Some(prev), Some(seq - 1))
        };

        stage_traces.push(StageTrace {
            seq,
            stage,
            w_leaf: w_refs,
            grad_w,
            train_loss: loss,
            updated_w,
            prev_updated_w,
            pred_seq,
        });
    }

    // Final-round head updates, one per learner. The loss is evaluated at
    // the stage's leaf weights; only the head moves.
    let last_round = cfg.rounds;
    let mut head_traces = Vec::with_capacity(cfg.learners);
    let mut final_w = BTreeMap::new();
    let mut final_h = BTreeMap::new();
    for k in 1..=cfg.learners {
        let stage = StageId { round: last_round, learner: k };
        let (w_refs, h_refs) = leaf_refs[&(last_round, k)].clone();
        let batch = &inputs.head_batches[&k];
        let loss = stage_context(
            supernet::loss(tape, cell, &alpha_refs, &w_refs, &h_refs, batch),
            stage,
        )?;
        let grad_h = stage_context(tape.backward(loss, &h_refs), stage)?;
        let updated_h = stage_context(one_step_update(tape, &h_refs, &grad_h, cfg.eta), stage)?;
        head_traces.push(HeadTrace {
            learner: k,
            h_leaf: h_refs,
            grad_h,
            train_loss: loss,
            updated_h: updated_h.clone(),
        });
        let trace_w = stage_traces
            .iter()
            .find(|t| t.stage.round == last_round && t.stage.learner == k)
            .expect("schedule covers every (round, learner)");
        final_w.insert(k, trace_w.updated_w.clone());
        final_h.insert(k, updated_h);
    }

    let (val_losses, val_total) =
        build_val_losses(tape, cfg, tasks, cell, &alpha_refs, &final_w, &final_h, false, None)?;

    Ok(Pipeline {
        alpha_refs,
        stage_traces,
        head_traces,
        val_losses,
        val_total,
        final_w,
        final_h,
    })
}

/// Build one outer iteration of the multi-task baseline: a single joint
/// one-step update per learner on the weighted training loss, then the
/// weighted validation objective.
pub fn build_mtl_pipeline(
    tape: &mut Tape,
    cfg: &EngineConfig,
    tasks: &[Task],
    cell: &CellSpec,
    alpha: &ArchParams,
    inputs: &PipelineInputs,
) -> Result<Pipeline> {
    let alpha_refs = alpha.bind(tape);

    // Joint weighted training loss over per-learner stage batches.
    let mut per_learner: Vec<(usize, ParamRefs, ParamRefs, TensorRef)> = Vec::new();
    let mut joint: Option<TensorRef> = None;
    for k in 1..=cfg.learners {
        let stage = StageId { round: 1, learner: k };
        let state = &inputs.states[&(1, k)];
        let (w_refs, h_refs) = register_state(tape, state);
        let batch = &inputs.stage_batches[&(1, k)];
        let loss = stage_context(
            supernet::loss(tape, cell, &alpha_refs, &w_refs, &h_refs, batch),
            stage,
        )?;
        let c = cfg.mtl_weights[k - 1];
        let term = if c != 1.0 { tape.scale(loss, c)? } else { loss };
        joint = Some(match joint {
            Some(j) => tape.add(j, term)?,
            None => term,
        });
        per_learner.push((k, w_refs, h_refs, loss));
    }
    let joint = joint.expect("at least one learner");

    // Joint weighted head loss over the head batches.
    let mut head_parts: Vec<(usize, TensorRef)> = Vec::new();
    let mut joint_heads: Option<TensorRef> = None;
    for &(k, ref w_refs, ref h_refs, _) in &per_learner {
        let stage = StageId { round: 1, learner: k };
        let batch = &inputs.head_batches[&k];
        let loss = stage_context(
            supernet::loss(tape, cell, &alpha_refs, w_refs, h_refs, batch),
            stage,
        )?;
        let c = cfg.mtl_weights[k - 1];
        let term = if c != 1.0 { tape.scale(loss, c)? } else { loss };
        joint_heads = Some(match joint_heads {
            Some(j) => tape.add(j, term)?,
            None => term,
        });
        head_parts.push((k, loss));
    }
    let joint_heads = joint_heads.expect("at least one learner");

    let mut stage_traces = Vec::new();
    let mut head_traces = Vec::new();
    let mut final_w = BTreeMap::new();
    let mut final_h = BTreeMap::new();
    for (seq, (k, w_refs, h_refs, train_loss)) in per_learner.iter().enumerate() {
        let stage = StageId { round: 1, learner: *k };
        let grad_w = stage_context(tape.backward(joint, w_refs), stage)?;
        let updated_w = stage_context(one_step_update(tape, w_refs, &grad_w, cfg.eta), stage)?;
        stage_traces.push(StageTrace {
            seq,
            stage,
            w_leaf: w_refs.clone(),
            grad_w,
            train_loss: *train_loss,
            updated_w: updated_w.clone(),
            prev_updated_w: None,
            pred_seq: None,
        });
        final_w.insert(*k, updated_w);

        let grad_h = stage_context(tape.backward(joint_heads, h_refs), stage)?;
        let updated_h = stage_context(one_step_update(tape, h_refs, &grad_h, cfg.eta), stage)?;
        head_traces.push(HeadTrace {
            learner: *k,
            h_leaf: h_refs.clone(),
            grad_h,
            train_loss: head_parts[seq].1,
            updated_h: updated_h.clone(),
        });
        final_h.insert(*k, updated_h);
    }

    let (val_losses, val_total) = build_val_losses(
        tape,
        cfg,
        tasks,
        cell,
        &alpha_refs,
        &final_w,
        &final_h,
        false,
        Some(&cfg.mtl_weights),
    )?;

    Ok(Pipeline {
        alpha_refs,
        stage_traces,
        head_traces,
        val_losses,
        val_total,
        final_w,
        final_h,
    })
}

#[allow(clippy::too_many_arguments)]
fn build_val_losses(
    tape: &mut Tape,
    cfg: &EngineConfig,
    tasks: &[Task],
    cell: &CellSpec,
    alpha_refs: &[TensorRef],
    final_w: &BTreeMap<usize, ParamRefs>,
    final_h: &BTreeMap<usize, ParamRefs>,
    detach_updates: bool,
    weights: Option<&[f64]>,
) -> Result<(Vec<(usize, TensorRef)>, TensorRef)> {
    let mut losses = Vec::with_capacity(cfg.learners);
    for k in 1..=cfg.learners {
        let task = &tasks[k - 1];
        let mut w = final_w[&k].clone();
        let mut h = final_h[&k].clone();
        if detach_updates {
            for r in w.values_mut() {
                *r = tape.detach(*r)?;
            }
            for r in h.values_mut() {
                *r = tape.detach(*r)?;
            }
        }
        let batch = task.val.full_batch();
        let loss = supernet::loss(tape, cell, alpha_refs, &w, &h, &batch)?;
        losses.push((k, loss));
    }
    let total = weighted_val_total(tape, &losses, weights)?;
    Ok((losses, total))
}

/// The architecture gradient of a built pipeline, honoring the mode.
/// Returns per-edge gradient tensors and the overall Euclidean norm.
pub fn arch_gradient(
    tape: &mut Tape,
    cfg: &EngineConfig,
    tasks: &[Task],
    cell: &CellSpec,
    pipeline: &Pipeline,
    weights: Option<&[f64]>,
) -> Result<(Vec<Tensor>, f64)> {
    let root = match cfg.hypergrad_mode {
        HypergradMode::Unrolled => pipeline.val_total,
        HypergradMode::FirstOrder => {
            let (_, total) = build_val_losses(
                tape,
                cfg,
                tasks,
                cell,
                &pipeline.alpha_refs,
                &pipeline.final_w,
                &pipeline.final_h,
                true,
                weights,
            )?;
            total
        }
    };
    let grad_refs = tape.backward_refs(root, &pipeline.alpha_refs)?;
    let grads: Vec<Tensor> = grad_refs.iter().map(|&r| tape.value(r).clone()).collect();
    let norm = grads
        .iter()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    Ok((grads, norm))
}

/// One architecture step `A <- A - eta_arch * g` on top of [`arch_gradient`].
pub fn arch_update(
    tape: &mut Tape,
    cfg: &EngineConfig,
    tasks: &[Task],
    cell: &CellSpec,
    pipeline: &Pipeline,
    alpha: &ArchParams,
    weights: Option<&[f64]>,
) -> Result<(ArchParams, Vec<Tensor>, f64)> {
    let (grads, norm) = arch_gradient(tape, cfg, tasks, cell, pipeline, weights)?;
    let mut next = alpha.clone();
    next.step(&grads, cfg.eta_arch)?;
    Ok((next, grads, norm))
}

// ── run reports ─────────────────────────────────────────────────────────

pub const REPORT_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub seq: usize,
    pub round: usize,
    pub learner: usize,
    pub train_loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub stages: Vec<StageRecord>,
    /// Head-update training losses per learner, in learner order.
    pub head_losses: Vec<f64>,
    /// Validation losses per learner at the iteration's updated weights.
    pub val_losses: Vec<f64>,
    pub arch_grad_norm: f64,
    /// Architecture logits after this iteration's step.
    pub alpha: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub schema: u32,
    pub method: String,
    pub learners: usize,
    pub rounds: usize,
    pub seed: u64,
    pub schedule: String,
    pub iterations: Vec<IterRecord>,
    pub final_alpha: Vec<Vec<f64>>,
    pub final_arch: DiscretizedCell,
    /// Wall-clock seconds; the one non-deterministic field, excluded from
    /// byte-identical output comparisons.
    pub wall_time_s: f64,
}

impl RunReport {
    /// Mean of the last iteration's per-learner validation losses.
    pub fn final_val_loss_mean(&self) -> Option<f64> {
        self.iterations.last().map(|it| {
            it.val_losses.iter().sum::<f64>() / it.val_losses.len() as f64
        })
    }
}

// ── run loops ───────────────────────────────────────────────────────────

fn capture_warm_state(
    tape: &Tape,
    cfg: &EngineConfig,
    inputs: &PipelineInputs,
    pipeline: &Pipeline,
) -> BTreeMap<(usize, usize), LearnerState> {
    let mut out = BTreeMap::new();
    for trace in &pipeline.stage_traces {
        let (m, k) = (trace.stage.round, trace.stage.learner);
        let w = tape.materialize(&trace.updated_w);
        let h = if m == cfg.rounds {
            let ht = pipeline
                .head_traces
                .iter()
                .find(|h| h.learner == k)
                .expect("head trace per learner");
            tape.materialize(&ht.updated_h)
        } else {
            inputs.states[&(m, k)].h.clone()
        };
        out.insert(
            (m, k),
            LearnerState {
                stage: trace.stage,
                w,
                h,
            },
        );
    }
    out
}

fn run_loop(
    cfg: &EngineConfig,
    tasks: &[Task],
    cell: &CellSpec,
    method: Method,
) -> Result<RunReport> {
    cfg.validate(tasks, cell)?;
    let started = Instant::now();

    let sched = match method {
        Method::Il => Some(schedule::build_interleaved(
            cfg.learners,
            cfg.rounds,
            &cfg.task_order,
        )?),
        Method::Blocked => Some(schedule::build_blocked(
            cfg.learners,
            cfg.rounds,
            &cfg.task_order,
        )?),
        Method::Mtl => None,
    };
    let mtl_weights = match method {
        Method::Mtl => Some(cfg.mtl_weights.as_slice()),
        _ => None,
    };

    let mut alpha = ArchParams::zeros(cell);
    let mut warm: Option<BTreeMap<(usize, usize), LearnerState>> = None;
    let mut iterations = Vec::with_capacity(cfg.outer_iters);

    // The multi-task baseline has a single implicit round of inner updates.
    let mut inner_cfg = cfg.clone();
    if method == Method::Mtl {
        inner_cfg.rounds = 1;
    }

    for iter in 0..cfg.outer_iters {
        let inputs = draw_pipeline_inputs(&inner_cfg, tasks, cell, iter, warm.as_ref())?;
        let mut tape = Tape::new();
        let pipeline = match &sched {
            Some(s) => build_schedule_pipeline(&mut tape, cfg, tasks, cell, s, &alpha, &inputs)?,
            None => build_mtl_pipeline(&mut tape, &inner_cfg, tasks, cell, &alpha, &inputs)?,
        };

        let (next_alpha, _grads, norm) = arch_update(
            &mut tape,
            cfg,
            tasks,
            cell,
            &pipeline,
            &alpha,
            mtl_weights,
        )?;

        let stages = pipeline
            .stage_traces
            .iter()
            .map(|t| StageRecord {
                seq: t.seq + 1,
                round: t.stage.round,
                learner: t.stage.learner,
                train_loss: tape.value(t.train_loss).item().expect("scalar loss"),
            })
            .collect();
        let head_losses = pipeline
            .head_traces
            .iter()
            .map(|h| tape.value(h.train_loss).item().expect("scalar loss"))
            .collect();
        let val_losses = pipeline
            .val_losses
            .iter()
            .map(|&(_, l)| tape.value(l).item().expect("scalar loss"))
            .collect();

        alpha = next_alpha;
        iterations.push(IterRecord {
            iter,
            stages,
            head_losses,
            val_losses,
            arch_grad_norm: norm,
            alpha: alpha.snapshot(),
        });

        if cfg.warm_start {
            warm = Some(capture_warm_state(&tape, &inner_cfg, &inputs, &pipeline));
        }
        if let Some(tol) = cfg.early_stop_tol {
            if norm < tol {
                break;
            }
        }
    }

    let final_arch = discretize(&alpha, cell);
    Ok(RunReport {
        schema: REPORT_SCHEMA,
        method: method.name().to_string(),
        learners: cfg.learners,
        // the multi-task baseline's inner problem is a single round
        rounds: inner_cfg.rounds,
        seed: cfg.seed,
        schedule: match &sched {
            Some(s) => s.render(),
            None => "mtl".to_string(),
        },
        iterations,
        final_alpha: alpha.snapshot(),
        final_arch,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

/// Interleaved multi-level run.
pub fn run_il(cfg: &EngineConfig, tasks: &[Task], cell: &CellSpec) -> Result<RunReport> {
    run_loop(cfg, tasks, cell, Method::Il)
}

/// Multi-task baseline: joint inner update, weighted validation objective.
pub fn run_mtl(cfg: &EngineConfig, tasks: &[Task], cell: &CellSpec) -> Result<RunReport> {
    run_loop(cfg, tasks, cell, Method::Mtl)
}

/// Blocked-schedule baseline: same updates as [`run_il`] over the blocked
/// stage order.
pub fn run_blocked(cfg: &EngineConfig, tasks: &[Task], cell: &CellSpec) -> Result<RunReport> {
    run_loop(cfg, tasks, cell, Method::Blocked)
}

pub fn run_method(
    cfg: &EngineConfig,
    tasks: &[Task],
    cell: &CellSpec,
    method: Method,
) -> Result<RunReport> {
    run_loop(cfg, tasks, cell, method)
}

// ── probes for verification ─────────────────────────────────────────────

/// The architecture gradient and validation loss of a single frozen-seed
/// outer iteration at a given architecture point.
pub struct ArchProbe {
    pub grad: ArchParams,
    pub val_loss: f64,
}

fn build_probe_pipeline(
    tape: &mut Tape,
    cfg: &EngineConfig,
    tasks: &[Task],
    cell: &CellSpec,
    alpha: &ArchParams,
    iter: usize,
    method: Method,
) -> Result<Pipeline> {
    let mut inner_cfg = cfg.clone();
    if method == Method::Mtl {
        inner_cfg.rounds = 1;
    }
    let inputs = draw_pipeline_inputs(&inner_cfg, tasks, cell, iter, None)?;
    match method {
        Method::Mtl => build_mtl_pipeline(tape, &inner_cfg, tasks, cell, alpha, &inputs),
        Method::Il => {
            let s = schedule::build_interleaved(cfg.learners, cfg.rounds, &cfg.task_order)?;
            build_schedule_pipeline(tape, cfg, tasks, cell, &s, alpha, &inputs)
        }
        Method::Blocked => {
            let s = schedule::build_blocked(cfg.learners, cfg.rounds, &cfg.task_order)?;
            build_schedule_pipeline(tape, cfg, tasks, cell, &s, alpha, &inputs)
        }
    }
}

/// Architecture gradient at `alpha` for iteration `iter` of the given
/// method, with the mode taken from the config.
pub fn arch_gradient_at_method(
    cfg: &EngineConfig,
    tasks: &[Task],
    cell: &CellSpec,
    alpha: &ArchParams,
    iter: usize,
    method: Method,
) -> Result<ArchProbe> {
    cfg.validate(tasks, cell)?;
    let mut tape = Tape::new();
    let pipeline = build_probe_pipeline(&mut tape, cfg, tasks, cell, alpha, iter, method)?;
    let weights = match method {
        Method::Mtl => Some(cfg.mtl_weights.as_slice()),
        _ => None,
    };
    let (grads, _) = arch_gradient(&mut tape, cfg, tasks, cell, &pipeline, weights)?;
    Ok(ArchProbe {
        grad: ArchParams { per_edge: grads },
        val_loss: tape.value(pipeline.val_total).item()?,
    })
}

/// Interleaved-method probe (the common case for verification).
pub fn arch_gradient_at(
    cfg: &EngineConfig,
    tasks: &[Task],
    cell: &CellSpec,
    alpha: &ArchParams,
    iter: usize,
) -> Result<ArchProbe> {
    arch_gradient_at_method(cfg, tasks, cell, alpha, iter, Method::Il)
}

/// Validation objective value at `alpha` with the iteration's frozen
/// randomness, no gradient computed.
pub fn val_loss_at_method(
    cfg: &EngineConfig,
    tasks: &[Task],
    cell: &CellSpec,
    alpha: &ArchParams,
    iter: usize,
    method: Method,
) -> Result<f64> {
    cfg.validate(tasks, cell)?;
    let mut tape = Tape::new();
    let pipeline = build_probe_pipeline(&mut tape, cfg, tasks, cell, alpha, iter, method)?;
    tape.value(pipeline.val_total).item()
}

pub fn val_loss_at(
    cfg: &EngineConfig,
    tasks: &[Task],
    cell: &CellSpec,
    alpha: &ArchParams,
    iter: usize,
) -> Result<f64> {
    val_loss_at_method(cfg, tasks, cell, alpha, iter, Method::Il)
}

/// Per-learner validation losses of the untrained (all-zero logits)
/// architecture under iteration 0's frozen randomness. This is what a
/// zero-iteration run would have reported.
pub fn initial_val_losses(
    cfg: &EngineConfig,
    tasks: &[Task],
    cell: &CellSpec,
    method: Method,
) -> Result<Vec<f64>> {
    cfg.validate(tasks, cell)?;
    let alpha = ArchParams::zeros(cell);
    let mut tape = Tape::new();
    let pipeline = build_probe_pipeline(&mut tape, cfg, tasks, cell, &alpha, 0, method)?;
    pipeline
        .val_losses
        .iter()
        .map(|&(_, l)| tape.value(l).item())
        .collect()
}

// ── retraining a discretized architecture ───────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainConfig {
    pub steps: usize,
    pub eta: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        RetrainConfig {
            steps: 200,
            eta: 0.05,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Misclassification rate of a fixed (weights given) model on a dataset.
pub fn classify_error(
    cell: &CellSpec,
    weights: &ParamSet,
    heads: &ParamSet,
    ds: &Dataset,
) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty split".into()));
    }
    let alpha = ArchParams::zeros(cell);
    let mut tape = Tape::new();
    let a = alpha.bind(&mut tape);
    let w_refs = tape.register(weights);
    let h_refs = tape.register(heads);
    let x = tape.leaf(ds.features.clone());
    let z = supernet::encoder_forward(&mut tape, cell, x, &a, &w_refs)?;
    let logits = supernet::head_forward(&mut tape, &h_refs, z)?;
    let lv = tape.value(logits);
    let (n, c) = (lv.shape()[0], lv.shape()[1]);
    let mut wrong = 0usize;
    for i in 0..n {
        let row = &lv.data()[i * c..(i + 1) * c];
        let mut best = 0;
        for j in 1..c {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best != ds.labels[i] {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / n as f64)
}

/// Train a discretized cell's weights from scratch for a fixed budget of
/// plain gradient steps and report the test error.
pub fn retrain_discretized(
    disc: &DiscretizedCell,
    task: &Task,
    cfg: &RetrainConfig,
) -> Result<f64> {
    let cell = disc.to_cell_spec()?;
    if task.test.is_empty() {
        return Err(Error::Data(format!("task {} has no test split", task.name)));
    }
    let mut rng = substream(cfg.seed, &[TAG_RETRAIN_INIT]);
    let mut weights = init_params(&cell.encoder_param_specs(), &mut rng);
    let head = Head {
        in_width: cell.output_width(),
        classes: task.classes,
    };
    let mut heads = init_params(&head.param_specs(), &mut rng);
    let alpha = ArchParams::zeros(&cell);

    for step in 0..cfg.steps {
        let mut brng = substream(cfg.seed, &[TAG_RETRAIN_BATCH, step as u64]);
        let batch = draw_batch(&mut brng, &task.train, cfg.batch_size);
        let mut tape = Tape::new();
        let a = alpha.bind(&mut tape);
        let w_refs = tape.register(&weights);
        let h_refs = tape.register(&heads);
        let loss = supernet::loss(&mut tape, &cell, &a, &w_refs, &h_refs, &batch)?;
        let mut all_refs = w_refs.clone();
        all_refs.extend(h_refs.iter().map(|(k, v)| (k.clone(), *v)));
        let grads = tape.backward(loss, &all_refs)?;
        for (name, gref) in &grads {
            let g = tape.value(*gref);
            let target = weights.get_mut(name).or_else(|| heads.get_mut(name));
            let t = target.expect("gradient key matches a parameter");
            let updated: Vec<f64> = t
                .data()
                .iter()
                .zip(g.data())
                .map(|(p, gv)| p - cfg.eta * gv)
                .collect();
            *t = Tensor::new(t.shape().to_vec(), updated)?;
        }
    }
    classify_error(&cell, &weights, &heads, &task.test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::supernet::{EdgeSpec, OpKind};

    fn scalar_param(tape: &mut Tape, v: f64) -> (ParamRefs, TensorRef) {
        let r = tape.leaf(Tensor::scalar(v));
        let mut refs = ParamRefs::new();
        refs.insert("w".into(), r);
        (refs, r)
    }

    #[test]
    fn plain_update_on_half_square_loss() {
        // L = 0.5 w^2 at w = 2: grad = 2, so w' = 2 - 0.1*2 = 1.8
        let mut tape = Tape::new();
        let (refs, w) = scalar_param(&mut tape, 2.0);
        let w2 = tape.mul(w, w).unwrap();
        let loss = tape.scale(w2, 0.5).unwrap();
        let grads = tape.backward(loss, &refs).unwrap();
        let updated = one_step_update(&mut tape, &refs, &grads, 0.1).unwrap();
        assert!((tape.value(updated["w"]).item().unwrap() - 1.8).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut tape = Tape::new();
        let (refs, w) = scalar_param(&mut tape, 3.0);
        let d = tape.detach(w).unwrap();
        let loss = tape.sq_l2_dist(w, d).unwrap(); // value 0, grad_w exactly 0
        let grads = tape.backward(loss, &refs).unwrap();
        assert_eq!(tape.value(grads["w"]).item().unwrap(), 0.0);
        let updated = one_step_update(&mut tape, &refs, &grads, 0.1).unwrap();
        assert_eq!(tape.value(updated["w"]).item().unwrap(), 3.0);
    }

    #[test]
    fn zero_eta_is_identity() {
        let mut tape = Tape::new();
        let (refs, w) = scalar_param(&mut tape, 2.0);
        let w2 = tape.mul(w, w).unwrap();
        let grads = tape.backward(w2, &refs).unwrap();
        let updated = one_step_update(&mut tape, &refs, &grads, 0.0).unwrap();
        assert_eq!(tape.value(updated["w"]).item().unwrap(), 2.0);
    }

    #[test]
    fn proximal_update_direct_substitution() {
        // W = 1, W_prev = 0, grad = 0.5, eta = 0.1, lambda = 1:
        // w' = 1 - 0.05 - 2*0.1*1*(1 - 0) = 0.75
        let mut tape = Tape::new();
        let (refs, w) = scalar_param(&mut tape, 1.0);
        let loss = tape.scale(w, 0.5).unwrap(); // grad = 0.5
        let grads = tape.backward(loss, &refs).unwrap();
        let mut prev = ParamRefs::new();
        prev.insert("w".into(), tape.leaf(Tensor::scalar(0.0)));
        let updated =
            one_step_proximal_update(&mut tape, &refs, &grads, &prev, 0.1, 1.0).unwrap();
        assert!((tape.value(updated["w"]).item().unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn lambda_zero_reduces_to_plain_update_exactly() {
        let mut tape = Tape::new();
        let (refs, w) = scalar_param(&mut tape, 1.7);
        let w2 = tape.mul(w, w).unwrap();
        let grads = tape.backward(w2, &refs).unwrap();
        let mut prev = ParamRefs::new();
        prev.insert("w".into(), tape.leaf(Tensor::scalar(-5.0)));
        let a = one_step_proximal_update(&mut tape, &refs, &grads, &prev, 0.05, 0.0).unwrap();
        let b = one_step_update(&mut tape, &refs, &grads, 0.05).unwrap();
        assert_eq!(
            tape.value(a["w"]).item().unwrap().to_bits(),
            tape.value(b["w"]).item().unwrap().to_bits()
        );
    }

    #[test]
    fn proximal_fixed_point_when_grad_zero_and_anchored() {
        let mut tape = Tape::new();
        let (refs, w) = scalar_param(&mut tape, 2.5);
        let d = tape.detach(w).unwrap();
        let loss = tape.sq_l2_dist(w, d).unwrap();
        let grads = tape.backward(loss, &refs).unwrap();
        let mut prev = ParamRefs::new();
        prev.insert("w".into(), tape.leaf(Tensor::scalar(2.5)));
        let updated =
            one_step_proximal_update(&mut tape, &refs, &grads, &prev, 0.1, 3.0).unwrap();
        assert_eq!(tape.value(updated["w"]).item().unwrap(), 2.5);
    }

    #[test]
    fn proximal_term_examples_and_oracle() {
        let mut a = ParamSet::new();
        let mut b = ParamSet::new();
        a.insert("x".into(), Tensor::new(vec![2, 2], vec![1.0; 4]).unwrap());
        b.insert("x".into(), Tensor::zeros(vec![2, 2]));
        assert_eq!(proximal_term(&a, &a).unwrap(), 0.0);
        assert_eq!(proximal_term(&a, &b).unwrap(), 4.0);

        // random pair vs naive double-loop summation
        use rand::Rng as _;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ParamSet::new();
        let mut q = ParamSet::new();
        let mut naive = 0.0;
        for name in ["a", "b", "c"] {
            let xs: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let ys: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
            for i in 0..6 {
                naive += (xs[i] - ys[i]) * (xs[i] - ys[i]);
            }
            p.insert(name.into(), Tensor::new(vec![2, 3], xs).unwrap());
            q.insert(name.into(), Tensor::new(vec![2, 3], ys).unwrap());
        }
        assert!((proximal_term(&p, &q).unwrap() - naive).abs() < 1e-12);

        // shape mismatch
        let mut r = ParamSet::new();
        r.insert("x".into(), Tensor::zeros(vec![4]));
        assert!(proximal_term(&a, &r).is_err());
    }

    fn tiny_tasks(classes: &[usize], dim: usize, n: usize, seed: u64) -> Vec<Task> {
        let cfg = crate::data::SyntheticFamilyConfig {
            tasks: classes.len(),
            input_dim: dim,
            hidden: dim,
            relatedness: 0.8,
            label_noise: 0.0,
            class_counts: classes.to_vec(),
            n_train: n,
            n_val: n / 2,
            n_test: n / 2,
            seed,
        };
        let (_, ts) = crate::data::gen_synthetic_family(&cfg).unwrap();
        ts.into_iter().map(Task::from_synthetic).collect()
    }

    fn tiny_cell() -> CellSpec {
        let edges = vec![
            EdgeSpec {
                from: 0,
                to: 1,
                ops: vec![OpKind::Zero, OpKind::Identity, OpKind::Linear, OpKind::LinearTanh],
            },
            EdgeSpec {
                from: 1,
                to: 2,
                ops: vec![OpKind::Zero, OpKind::Identity, OpKind::Linear, OpKind::LinearTanh],
            },
        ];
        CellSpec::new(vec![4, 4, 4], edges).unwrap()
    }

    fn tiny_config(k: usize, m: usize) -> EngineConfig {
        EngineConfig {
            learners: k,
            rounds: m,
            lambda: 100.0,
            eta: 2e-3,
            eta_arch: 0.2,
            outer_iters: 3,
            hypergrad_mode: HypergradMode::Unrolled,
            batch_size: 8,
            seed: 7,
            task_order: (1..=k).collect(),
            mtl_weights: vec![1.0; k],
            warm_start: false,
            early_stop_tol: None,
        }
    }

    #[test]
    fn zero_outer_iters_leaves_alpha_unchanged() {
        let tasks = tiny_tasks(&[2, 3], 4, 16, 1);
        let cell = tiny_cell();
        let cfg = EngineConfig {
            outer_iters: 0,
            ..tiny_config(2, 2)
        };
        let report = run_il(&cfg, &tasks, &cell).unwrap();
        assert!(report.iterations.is_empty());
        for edge in &report.final_alpha {
            assert!(edge.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn fixed_seed_reports_are_bit_identical() {
        let tasks = tiny_tasks(&[2, 3], 4, 16, 2);
        let cell = tiny_cell();
        let cfg = tiny_config(2, 2);
        let a = run_il(&cfg, &tasks, &cell).unwrap();
        let b = run_il(&cfg, &tasks, &cell).unwrap();
        let ja = serde_json::to_string(&IterationsOnly(&a.iterations)).unwrap();
        let jb = serde_json::to_string(&IterationsOnly(&b.iterations)).unwrap();
        assert_eq!(ja, jb);
        assert_eq!(a.final_alpha, b.final_alpha);
    }

    // serialize just the deterministic part for the bit-identity check
    struct IterationsOnly<'a>(&'a [IterRecord]);
    impl serde::Serialize for IterationsOnly<'_> {
        fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
            self.0.serialize(s)
        }
    }

    #[test]
    fn k1_blocked_equals_interleaved() {
        let tasks = tiny_tasks(&[3], 4, 16, 3);
        let cell = tiny_cell();
        let mut cfg = tiny_config(1, 2);
        cfg.task_order = vec![1];
        let a = run_il(&cfg, &tasks, &cell).unwrap();
        let b = run_blocked(&cfg, &tasks, &cell).unwrap();
        assert_eq!(a.final_alpha, b.final_alpha);
        assert_eq!(
            serde_json::to_string(&a.iterations).unwrap(),
            serde_json::to_string(&b.iterations).unwrap()
        );
    }

    #[test]
    fn blocked_stage_order_groups_learners() {
        let tasks = tiny_tasks(&[2, 3], 4, 16, 4);
        let cell = tiny_cell();
        let mut cfg = tiny_config(2, 2);
        cfg.outer_iters = 1;
        let report = run_blocked(&cfg, &tasks, &cell).unwrap();
        let order: Vec<(usize, usize)> = report.iterations[0]
            .stages
            .iter()
            .map(|s| (s.learner, s.round))
            .collect();
        assert_eq!(order, vec![(1, 1), (1, 2), (2, 1), (2, 2)]);
    }

    #[test]
    fn mtl_zero_weight_matches_single_task_run() {
        // all task weights 0 except task 1 -> same alpha trajectory as the
        // single-task run (the dead task contributes nothing anywhere)
        let tasks2 = tiny_tasks(&[2, 3], 4, 16, 5);
        let tasks1 = vec![tasks2[0].clone()];
        let cell = tiny_cell();
        let mut cfg2 = tiny_config(2, 1);
        cfg2.mtl_weights = vec![1.0, 0.0];
        let mut cfg1 = tiny_config(1, 1);
        cfg1.task_order = vec![1];
        cfg1.mtl_weights = vec![1.0];
        let a = run_mtl(&cfg2, &tasks2, &cell).unwrap();
        let b = run_mtl(&cfg1, &tasks1, &cell).unwrap();
        for (ia, ib) in a.iterations.iter().zip(&b.iterations) {
            for (ra, rb) in ia.alpha.iter().zip(&ib.alpha) {
                for (x, y) in ra.iter().zip(rb) {
                    assert!(
                        (x - y).abs() < 1e-12,
                        "alpha diverged: {x} vs {y}"
                    );
                }
            }
        }
    }

    #[test]
    fn mtl_identical_tasks_have_equal_inner_losses() {
        let one = tiny_tasks(&[3], 4, 16, 6);
        let tasks = vec![one[0].clone(), one[0].clone()];
        let cell = tiny_cell();
        let mut cfg = tiny_config(2, 1);
        cfg.mtl_weights = vec![1.0, 1.0];
        let report = run_mtl(&cfg, &tasks, &cell).unwrap();
        for it in &report.iterations {
            let l1 = it.stages[0].train_loss;
            let l2 = it.stages[1].train_loss;
            assert!((l1 - l2).abs() < 1e-12, "{l1} vs {l2}");
        }
    }

    #[test]
    fn divergent_run_reports_offending_stage() {
        let tasks = tiny_tasks(&[2, 3], 4, 16, 7);
        let cell = tiny_cell();
        let mut cfg = tiny_config(2, 2);
        // 2*eta*lambda astronomically large: the proximal pull explodes to
        // overflow within an iteration
        cfg.lambda = 1e300;
        cfg.outer_iters = 1;
        match run_il(&cfg, &tasks, &cell) {
            Err(Error::Divergence { stage, .. }) => {
                assert!(!stage.is_empty());
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn early_stop_on_tiny_gradient() {
        // zero-op one-hot cell with zeroed heads would do it, but simpler:
        // set the tolerance above any realistic norm and observe a 1-iter run
        let tasks = tiny_tasks(&[2, 3], 4, 16, 8);
        let cell = tiny_cell();
        let mut cfg = tiny_config(2, 1);
        cfg.outer_iters = 5;
        cfg.early_stop_tol = Some(f64::INFINITY);
        let report = run_il(&cfg, &tasks, &cell).unwrap();
        assert_eq!(report.iterations.len(), 1);
    }

    #[test]
    fn warm_start_reuses_updated_weights() {
        let tasks = tiny_tasks(&[2, 3], 4, 16, 9);
        let cell = tiny_cell();
        let mut cfg = tiny_config(2, 2);
        cfg.warm_start = true;
        cfg.outer_iters = 2;
        let warm = run_il(&cfg, &tasks, &cell).unwrap();
        cfg.warm_start = false;
        let cold = run_il(&cfg, &tasks, &cell).unwrap();
        // identical first iteration, different second
        assert_eq!(
            serde_json::to_string(&warm.iterations[0].stages).unwrap(),
            serde_json::to_string(&cold.iterations[0].stages).unwrap()
        );
        assert_ne!(
            serde_json::to_string(&warm.iterations[1].stages).unwrap(),
            serde_json::to_string(&cold.iterations[1].stages).unwrap()
        );
    }

    #[test]
    fn retrain_reaches_sane_error_on_easy_task() {
        let tasks = tiny_tasks(&[2], 4, 64, 10);
        let cell = tiny_cell();
        let alpha = ArchParams::from_rows(vec![vec![0.0, 0.0, 1.0, 2.0]; 2]).unwrap();
        let disc = discretize(&alpha, &cell);
        let err = retrain_discretized(
            &disc,
            &tasks[0],
            &RetrainConfig {
                steps: 150,
                eta: 0.1,
                batch_size: 16,
                seed: 0,
            },
        )
        .unwrap();
        assert!((0.0..=0.5).contains(&err), "test error {err}");
    }
}
