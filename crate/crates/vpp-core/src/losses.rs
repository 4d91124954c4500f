//! Sparsification penalties, the toy task loss, and their exact gradients
//! through the relaxed decision paths.
//!
//! Two density penalties push the pruning heads toward their budgets:
//!
//! * the mapping stage pays `(mean(p_t) - kappa_init)^2` per frame on its
//!   soft keep probabilities, averaged over the frames of a video;
//! * each selective stage pays `(batch_mean(M_l) - kappa_l)^2`, where the
//!   mean is taken over *all* mask entries of the whole batch (one video's
//!   frames) before squaring — individual frames may deviate freely as
//!   long as the average density lands on target.
//!
//! The task surrogate is a class-weighted binary cross-entropy between
//!   each stage's soft keep probabilities and the ground-truth foreground,
//! with weights `w_bg = r_fg`, `w_fg = 1 - r_fg` maintained as a running
//! mean of the foreground ratio — rare foregrounds weigh heavily.
//!
//! Gradients use the straight-through view: hard decisions forward,
//! relaxed probabilities backward. Concretely, [`loss_grads`] returns the
//! exact analytic gradient of [`surrogate_loss`] — the same objective with
//! every hard mask bit replaced by its soft keep probability — which is
//! what finite differences can check to machine precision. The reported
//! hard-mask densities enter through [`loss_sp_sm`] instead.

use crate::error::{Result, VppError};
use crate::gumbel::{gumbel_soft_from_logits, gumbel_soft_grad_from_logits, GumbelConfig};
use crate::heads::{MlpGrads, MlpHead, KEEP};
use crate::mapsm::SparsitySchedule;
use crate::sm::SmHead;
use crate::tensor::{GumbelNoise, Matrix};
use crate::vit::PruneMask;

/// Default learning rate of the head optimizer.
pub const DEFAULT_LR: f64 = 1e-2;
/// Default momentum coefficient of the head optimizer.
pub const DEFAULT_MOMENTUM: f64 = 0.9;
/// Default training budget, in optimizer steps.
pub const DEFAULT_TRAIN_STEPS: usize = 500;
/// Probability clamp for the cross-entropy logs.
const BCE_EPS: f64 = 1e-12;

/// Coefficients combining the objective's components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub task: f64,
    pub scale_map: f64,
    pub scale_sm: f64,
}

impl Default for LossWeights {
    fn default() -> LossWeights {
        LossWeights { task: 1.0, scale_map: 10.0, scale_sm: 40.0 }
    }
}

/// One evaluation of the combined objective, component by component.
#[derive(Debug, Clone)]
pub struct LossReport {
    pub l_sp_map: f64,
    /// One entry per selective stage, in depth order.
    pub l_sp_sm: Vec<f64>,
    pub task: f64,
    pub weights: LossWeights,
}

impl LossReport {
    pub fn total(&self) -> f64 {
        self.weights.task * self.task
            + self.weights.scale_map * self.l_sp_map
            + self.weights.scale_sm * self.l_sp_sm.iter().sum::<f64>()
    }

    pub fn csv_header(stages: usize) -> String {
        let mut s = String::from("step,task,l_sp_map");
        for l in 0..stages {
            s.push_str(&format!(",l_sp_sm_{l}"));
        }
        s.push_str(",total,pkr");
        s
    }

    pub fn csv_row(&self, step: usize, pkr: f64) -> String {
        let mut s = format!("{step},{:.8},{:.8}", self.task, self.l_sp_map);
        for v in &self.l_sp_sm {
            s.push_str(&format!(",{v:.8}"));
        }
        s.push_str(&format!(",{:.8},{:.6}", self.total(), pkr));
        s
    }
}

/// Running estimate of the foreground patch ratio, feeding the
/// cross-entropy class weights. Neutral (0.5) until the first observation.
#[derive(Debug, Clone)]
pub struct ClassWeights {
    mean_fg: f64,
    count: u64,
}

impl Default for ClassWeights {
    fn default() -> Self {
        Self::new()
    }
}

impl ClassWeights {
    pub fn new() -> ClassWeights {
        ClassWeights { mean_fg: 0.5, count: 0 }
    }

    /// Folds one frame's foreground ratio into the running mean.
    pub fn observe(&mut self, fg_ratio: f64) {
        self.count += 1;
        self.mean_fg += (fg_ratio - self.mean_fg) / self.count as f64;
    }

    pub fn r_fg(&self) -> f64 {
        self.mean_fg
    }

    /// Background weight: the foreground ratio, so abundant background
    /// counts for little.
    pub fn w_bg(&self) -> f64 {
        self.mean_fg
    }

    pub fn w_fg(&self) -> f64 {
        1.0 - self.mean_fg
    }
}

/// Per-frame mapping-stage penalty: `(mean(p_t) - kappa_init)^2`.
pub fn loss_sp_map_frame(p_t: &[f64], kappa_init: f64) -> Result<f64> {
    if p_t.is_empty() {
        return Err(VppError::Domain("mapping-stage penalty over an empty probability vector".into()));
    }
    if p_t.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
        return Err(VppError::Domain("keep probabilities must lie in [0,1]".into()));
    }
    let mean = p_t.iter().sum::<f64>() / p_t.len() as f64;
    Ok((mean - kappa_init).powi(2))
}

/// Mapping-stage penalty of a batch: the per-frame penalties averaged.
pub fn loss_sp_map(frames: &[Vec<f64>], kappa_init: f64) -> Result<f64> {
    if frames.is_empty() {
        return Err(VppError::Domain("mapping-stage penalty over an empty batch".into()));
    }
    let mut acc = 0.0;
    for p_t in frames {
        acc += loss_sp_map_frame(p_t, kappa_init)?;
    }
    Ok(acc / frames.len() as f64)
}

/// Selective-stage penalty: `(batch_mean - kappa_l)^2` where the mean runs
/// over every mask entry of every frame in the batch. Frames may deviate
/// individually; only the batch average is constrained.
pub fn loss_sp_sm(masks: &[&PruneMask], kappa_l: f64) -> Result<f64> {
    if masks.is_empty() {
        return Err(VppError::Domain("selective-stage penalty over an empty batch".into()));
    }
    let mut kept = 0usize;
    let mut total = 0usize;
    for m in masks {
        kept += m.popcount();
        total += m.keep.len();
    }
    let mean = kept as f64 / total as f64;
    Ok((mean - kappa_l).powi(2))
}

/// Class-weighted binary cross-entropy between keep probabilities and the
/// ground-truth foreground indicator: `sum(w_i * bce_i) / sum(w_i)`, the
/// weighted mean. Normalizing by total weight rather than row count keeps
/// the loss scale — and with it the selectivity pressure on the heads —
/// independent of how lopsided the class mix is.
pub fn toy_task_loss(p: &[f64], gt_fg: &[bool], cw: &ClassWeights) -> Result<f64> {
    if p.len() != gt_fg.len() {
        return Err(VppError::Shape(format!(
            "{} probabilities vs {} labels",
            p.len(),
            gt_fg.len()
        )));
    }
    if p.is_empty() {
        return Err(VppError::Domain("task loss over an empty frame".into()));
    }
    let (w_fg, w_bg) = (cw.w_fg(), cw.w_bg());
    let mut acc = 0.0;
    let mut w_sum = 0.0;
    for (&q, &y) in p.iter().zip(gt_fg) {
        let qc = q.clamp(BCE_EPS, 1.0 - BCE_EPS);
        acc -= if y { w_fg * qc.ln() } else { w_bg * (1.0 - qc).ln() };
        w_sum += if y { w_fg } else { w_bg };
    }
    Ok(acc / w_sum)
}

/// d(weighted BCE)/d q for one patch, matching [`toy_task_loss`] without
/// the weight normalization.
fn bce_grad(q: f64, y: bool, w_fg: f64, w_bg: f64) -> f64 {
    let qc = q.clamp(BCE_EPS, 1.0 - BCE_EPS);
    if y {
        -w_fg / qc
    } else {
        w_bg / (1.0 - qc)
    }
}

/// One mapping-stage application, reduced to what the objective needs:
/// the head input, the frozen decision noise, and per-row labels.
#[derive(Debug, Clone)]
pub struct MapStep {
    /// Mapped reference-layer features the head scored, one row per patch.
    pub x_hat: Matrix,
    /// Frozen `n x 2` Gumbel noise from the forward pass.
    pub noise: GumbelNoise,
    /// Ground-truth foreground flag per row.
    pub labels: Vec<bool>,
}

/// One selective-stage application, same reduction.
#[derive(Debug, Clone)]
pub struct SmStep {
    /// Which selective stage (index into the schedule's targets).
    pub stage: usize,
    /// Active-patch features the stage head scored.
    pub x: Matrix,
    /// Frozen `n x 2` Gumbel noise from the forward pass.
    pub noise: GumbelNoise,
    /// Ground-truth foreground flag per active row.
    pub labels: Vec<bool>,
    /// Full grid size; inactive patches count as zeros in the stage mean.
    pub n_total: usize,
}

/// All differentiable decision points collected from one batch (the frames
/// of one video).
#[derive(Debug, Clone, Default)]
pub struct LossBatch {
    pub map: Vec<MapStep>,
    pub sm: Vec<SmStep>,
}

impl LossBatch {
    fn validate(&self, stages: usize) -> Result<()> {
        if self.map.is_empty() && self.sm.is_empty() {
            return Err(VppError::Domain("loss batch holds no decision points".into()));
        }
        for (i, s) in self.map.iter().enumerate() {
            if s.labels.len() != s.x_hat.rows() {
                return Err(VppError::Shape(format!(
                    "mapping step {i}: {} labels for {} rows",
                    s.labels.len(),
                    s.x_hat.rows()
                )));
            }
        }
        for (i, s) in self.sm.iter().enumerate() {
            if s.stage >= stages {
                return Err(VppError::Config(format!(
                    "selective step {i} names stage {} but the schedule has {stages}",
                    s.stage
                )));
            }
            if s.labels.len() != s.x.rows() {
                return Err(VppError::Shape(format!(
                    "selective step {i}: {} labels for {} rows",
                    s.labels.len(),
                    s.x.rows()
                )));
            }
            if s.x.rows() > s.n_total {
                return Err(VppError::Shape(format!(
                    "selective step {i}: {} active rows exceed grid size {}",
                    s.x.rows(),
                    s.n_total
                )));
            }
        }
        Ok(())
    }
}

/// Recomputed relaxed outputs of every step at the *current* head
/// parameters, with the frozen noise replayed.
struct Recompute {
    /// Per map step: (soft keep probabilities, fresh forward cache, soft matrix).
    map: Vec<(Vec<f64>, crate::heads::MlpCache, Matrix)>,
    sm: Vec<(Vec<f64>, crate::heads::MlpCache, Matrix)>,
}

fn recompute(
    batch: &LossBatch,
    map_head: &MlpHead,
    sm_heads: &[SmHead],
    cfg: &GumbelConfig,
) -> Result<Recompute> {
    let mut map = Vec::with_capacity(batch.map.len());
    for s in &batch.map {
        let (z, cache) = map_head.forward(&s.x_hat)?;
        let soft = gumbel_soft_from_logits(&z, &s.noise, cfg)?;
        let p = (0..soft.rows()).map(|i| soft.get(i, KEEP)).collect();
        map.push((p, cache, soft));
    }
    let mut sm = Vec::with_capacity(batch.sm.len());
    for s in &batch.sm {
        let head = sm_heads.get(s.stage).ok_or_else(|| {
            VppError::Config(format!("no head for selective stage {}", s.stage))
        })?;
        let (z, cache) = head.mlp.forward(&s.x)?;
        let soft = gumbel_soft_from_logits(&z, &s.noise, cfg)?;
        let p = (0..soft.rows()).map(|i| soft.get(i, KEEP)).collect();
        sm.push((p, cache, soft));
    }
    Ok(Recompute { map, sm })
}

/// Per-stage relaxed batch means: numerator summed over steps of a stage,
/// denominator `steps_of_stage * n_total`.
fn stage_means(batch: &LossBatch, rec: &Recompute, stages: usize) -> (Vec<f64>, Vec<f64>) {
    let mut num = vec![0.0; stages];
    let mut den = vec![0.0; stages];
    for (s, (p, _, _)) in batch.sm.iter().zip(&rec.sm) {
        num[s.stage] += p.iter().sum::<f64>();
        den[s.stage] += s.n_total as f64;
    }
    (num, den)
}

/// The differentiable objective: identical to the reported loss except
/// that selective-stage densities use soft keep probabilities instead of
/// hard mask bits. [`loss_grads`] computes its exact gradient.
pub fn surrogate_loss(
    batch: &LossBatch,
    map_head: &MlpHead,
    sm_heads: &[SmHead],
    sched: &SparsitySchedule,
    weights: &LossWeights,
    cw: &ClassWeights,
    cfg: &GumbelConfig,
) -> Result<LossReport> {
    let stages = sched.sm_targets.len();
    batch.validate(stages)?;
    let rec = recompute(batch, map_head, sm_heads, cfg)?;

    let l_sp_map = if batch.map.is_empty() {
        0.0
    } else {
        let frames: Vec<Vec<f64>> = rec.map.iter().map(|(p, _, _)| p.clone()).collect();
        loss_sp_map(&frames, sched.kappa_init)?
    };

    let (num, den) = stage_means(batch, &rec, stages);
    let l_sp_sm: Vec<f64> = (0..stages)
        .map(|l| {
            if den[l] == 0.0 {
                0.0
            } else {
                (num[l] / den[l] - sched.sm_targets[l]).powi(2)
            }
        })
        .collect();

    let mut task_acc = 0.0;
    let mut task_w = 0.0;
    let (w_fg, w_bg) = (cw.w_fg(), cw.w_bg());
    let all_scores = rec
        .map
        .iter()
        .zip(batch.map.iter().map(|s| &s.labels))
        .chain(rec.sm.iter().zip(batch.sm.iter().map(|s| &s.labels)));
    for ((p, _, _), labels) in all_scores {
        for (&q, &y) in p.iter().zip(labels) {
            let qc = q.clamp(BCE_EPS, 1.0 - BCE_EPS);
            task_acc -= if y { w_fg * qc.ln() } else { w_bg * (1.0 - qc).ln() };
            task_w += if y { w_fg } else { w_bg };
        }
    }
    let task = task_acc / task_w;

    Ok(LossReport { l_sp_map, l_sp_sm, task, weights: *weights })
}

/// Exact gradient of [`surrogate_loss`] with respect to every head
/// parameter, assembled through the relaxed decision paths: upstream
/// sensitivities land on the keep column of each soft row, flow through
/// the softmax Jacobian, then through each head's layers. This is the
/// finite-difference target: perturbing any parameter moves
/// `surrogate_loss` by exactly what these gradients predict.
pub fn loss_grads(
    batch: &LossBatch,
    map_head: &MlpHead,
    sm_heads: &[SmHead],
    sched: &SparsitySchedule,
    weights: &LossWeights,
    cw: &ClassWeights,
    cfg: &GumbelConfig,
) -> Result<(LossReport, MlpGrads, Vec<MlpGrads>)> {
    grads_impl(batch, map_head, sm_heads, sched, weights, cw, cfg, false)
}

/// The optimizer's gradient: identical backward paths for the task and
/// mapping-stage terms, but each selective stage's density penalty is a
/// straight-through controller. Two substitutions relative to
/// [`loss_grads`]:
///
/// * the residual is measured on the *hard* keep decisions (recomputed at
///   current parameters under the frozen noise), because at high
///   temperature the soft probabilities compress toward 1/2 and zeroing
///   the soft-mean residual would park the realized mask densities far
///   from their targets — the realized densities themselves must be the
///   fixed point;
/// * the residual's force lands directly and antisymmetrically on the two
///   decision logits (scaled `1/tau` to match the relaxed path's gain at
///   the balanced point) instead of flowing through the softmax Jacobian.
///   A hard count changes when a logit difference crosses its noise
///   threshold, a sensitivity the Jacobian factor `q(1-q)` misrepresents:
///   it vanishes once decisions saturate, which in practice freezes the
///   controller permanently off-target after the first aggressive steps.
///
/// The returned report carries the hard-residual stage penalties, so
/// training curves show the quantity that is actually being driven.
pub fn training_grads(
    batch: &LossBatch,
    map_head: &MlpHead,
    sm_heads: &[SmHead],
    sched: &SparsitySchedule,
    weights: &LossWeights,
    cw: &ClassWeights,
    cfg: &GumbelConfig,
) -> Result<(LossReport, MlpGrads, Vec<MlpGrads>)> {
    grads_impl(batch, map_head, sm_heads, sched, weights, cw, cfg, true)
}

/// Hard keep count per stage: rows whose recomputed soft row prefers the
/// keep column (softmax is monotone, so this equals the noisy-logit
/// argmax; ties resolve to keep, matching the hard sampler).
fn hard_stage_nums(batch: &LossBatch, rec: &Recompute, stages: usize) -> Vec<f64> {
    let mut num = vec![0.0; stages];
    for (s, (_, _, soft)) in batch.sm.iter().zip(&rec.sm) {
        for i in 0..soft.rows() {
            if soft.get(i, KEEP) >= soft.get(i, 1 - KEEP) {
                num[s.stage] += 1.0;
            }
        }
    }
    num
}

#[allow(clippy::too_many_arguments)]
fn grads_impl(
    batch: &LossBatch,
    map_head: &MlpHead,
    sm_heads: &[SmHead],
    sched: &SparsitySchedule,
    weights: &LossWeights,
    cw: &ClassWeights,
    cfg: &GumbelConfig,
    hard_residual: bool,
) -> Result<(LossReport, MlpGrads, Vec<MlpGrads>)> {
    let stages = sched.sm_targets.len();
    batch.validate(stages)?;
    let rec = recompute(batch, map_head, sm_heads, cfg)?;
    let mut report = {
        // Same arithmetic as surrogate_loss; recomputing keeps the two
        // entry points trivially consistent.
        surrogate_loss(batch, map_head, sm_heads, sched, weights, cw, cfg)?
    };

    let (mut num, den) = stage_means(batch, &rec, stages);
    if hard_residual {
        num = hard_stage_nums(batch, &rec, stages);
        report.l_sp_sm = (0..stages)
            .map(|l| {
                if den[l] == 0.0 {
                    0.0
                } else {
                    (num[l] / den[l] - sched.sm_targets[l]).powi(2)
                }
            })
            .collect();
    }
    let (w_fg, w_bg) = (cw.w_fg(), cw.w_bg());
    let weight_of = |y: bool| if y { w_fg } else { w_bg };
    let task_w: f64 = batch
        .map
        .iter()
        .flat_map(|s| s.labels.iter())
        .chain(batch.sm.iter().flat_map(|s| s.labels.iter()))
        .map(|&y| weight_of(y))
        .sum();

    let mut g_map = MlpGrads::zeros_like(map_head);
    let f_map = batch.map.len() as f64;
    for (s, (p, cache, soft)) in batch.map.iter().zip(&rec.map) {
        let n = p.len() as f64;
        let mean = p.iter().sum::<f64>() / n;
        let sp_term = weights.scale_map * (1.0 / f_map) * 2.0 * (mean - sched.kappa_init) / n;
        let mut upstream = Matrix::zeros(p.len(), 2);
        for (i, (&q, &y)) in p.iter().zip(&s.labels).enumerate() {
            let task_term = weights.task * bce_grad(q, y, w_fg, w_bg) / task_w;
            upstream.set(i, KEEP, sp_term + task_term);
        }
        let dz = gumbel_soft_grad_from_logits(soft, &upstream)?;
        let (g, _) = map_head.backward(cache, &dz)?;
        g_map.add_scaled_assign(&g, 1.0)?;
    }

    let mut g_sm: Vec<MlpGrads> =
        sm_heads.iter().map(|h| MlpGrads::zeros_like(&h.mlp)).collect();
    for (s, (p, cache, soft)) in batch.sm.iter().zip(&rec.sm) {
        let l = s.stage;
        let sp_term = if den[l] == 0.0 {
            0.0
        } else {
            weights.scale_sm * 2.0 * (num[l] / den[l] - sched.sm_targets[l]) / den[l]
        };
        let mut upstream = Matrix::zeros(p.len(), 2);
        for (i, (&q, &y)) in p.iter().zip(&s.labels).enumerate() {
            let task_term = weights.task * bce_grad(q, y, w_fg, w_bg) / task_w;
            let soft_sp = if hard_residual { 0.0 } else { sp_term };
            upstream.set(i, KEEP, soft_sp + task_term);
        }
        let mut dz = gumbel_soft_grad_from_logits(soft, &upstream)?;
        if hard_residual {
            // Straight-through density force: directly on the logit
            // difference, alive at any saturation level. The extra 1/4 is
            // loop-gain damping: with heavy-ball momentum, full gain
            // sustains a visible limit cycle around each stage's target,
            // and the downstream stages amplify it (their feasible range
            // tracks the upstream stage's realized output).
            let force = sp_term / (4.0 * cfg.tau);
            for i in 0..dz.rows() {
                dz.set(i, KEEP, dz.get(i, KEEP) + force);
                dz.set(i, 1 - KEEP, dz.get(i, 1 - KEEP) - force);
            }
        }
        let (g, _) = sm_heads[l].mlp.backward(cache, &dz)?;
        g_sm[l].add_scaled_assign(&g, 1.0)?;
    }

    Ok((report, g_map, g_sm))
}

/// Heavy-ball gradient descent over the pruning heads:
/// `v <- momentum * v + g`, `theta <- theta - lr * v`.
#[derive(Debug, Clone)]
pub struct MomentumSgd {
    pub lr: f64,
    pub momentum: f64,
    vel_map: Vec<f64>,
    vel_sm: Vec<Vec<f64>>,
}

impl MomentumSgd {
    pub fn new(map_head: &MlpHead, sm_heads: &[SmHead], lr: f64, momentum: f64) -> MomentumSgd {
        MomentumSgd {
            lr,
            momentum,
            vel_map: vec![0.0; map_head.param_count()],
            vel_sm: sm_heads.iter().map(|h| vec![0.0; h.mlp.param_count()]).collect(),
        }
    }

    pub fn step(
        &mut self,
        map_head: &mut MlpHead,
        sm_heads: &mut [SmHead],
        g_map: &MlpGrads,
        g_sm: &[MlpGrads],
    ) -> Result<()> {
        if g_sm.len() != sm_heads.len() || self.vel_sm.len() != sm_heads.len() {
            return Err(VppError::Shape(format!(
                "{} stage gradients for {} heads",
                g_sm.len(),
                sm_heads.len()
            )));
        }
        apply(&mut self.vel_map, map_head, g_map, self.lr, self.momentum);
        for ((vel, head), g) in self.vel_sm.iter_mut().zip(sm_heads.iter_mut()).zip(g_sm) {
            apply(vel, &mut head.mlp, g, self.lr, self.momentum);
        }
        Ok(())
    }
}

fn apply(vel: &mut [f64], head: &mut MlpHead, g: &MlpGrads, lr: f64, momentum: f64) {
    let gf = g.to_flat();
    let mut theta = head.to_flat();
    for ((v, t), gi) in vel.iter_mut().zip(&mut theta).zip(&gf) {
        *v = momentum * *v + gi;
        *t -= lr * *v;
    }
    head.set_from_flat(&theta);
}
