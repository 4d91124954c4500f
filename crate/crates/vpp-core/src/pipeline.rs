//! Orchestration: runs the pruning pipeline over whole videos, trains the
//! pruning heads, and drives the standing experiments (stage-position
//! ablation, scene-switch recovery).
//!
//! One video is one sequential pipeline. Frame 0 runs dense to bootstrap
//! the temporal state; from frame 1 on, the mapping stage consumes the
//! previous frame's retained reference-layer features, emits the early
//! mask, and the selective stages refine it as depth grows. Everything is
//! driven by seeded, derived random streams: a frame's decision noise
//! depends only on (seed, scenario, training epoch, frame index), so runs
//! are bit-reproducible and a truncated video reproduces the full video's
//! leading frames exactly.

use std::path::Path;

use crate::config::PipelineConfig;
use crate::error::{Result, VppError};
use crate::heads::MlpHead;
use crate::io::{read_snapshot, write_snapshot};
use crate::losses::{training_grads, ClassWeights, LossBatch, LossReport, MapStep, MomentumSgd, SmStep};
use crate::mapsm::{mapsm_forward, mapsm_overhead_flops, DistancePenalty, MapSmHead, SparsitySchedule, TemporalState};
use crate::metrics::{compute_ioi, compute_pkr, PkrReport};
use crate::sm::{sm_forward, sm_overhead_flops, SmHead};
use crate::synth::{foreground_union, generate, SynthScenario, SynthVideo};
use crate::tensor::{Matrix, SeededRng};
use crate::vit::{
    attention_flops, block_forward, embed_frame, mlp_flops, FlopLedger, PatchFeatures, PruneMask,
    VitConfig, VitWeights,
};

/// Derived-stream tags, so the backbone, the heads, run-time decision
/// noise, and baseline draws never share a stream.
const STREAM_VIT: u64 = 0xB1;
const STREAM_HEADS: u64 = 0xB2;
const STREAM_RUN: u64 = 0xB3;

/// The trainable pruning heads: one scoring head for the mapping stage
/// and one per selective stage.
#[derive(Debug, Clone)]
pub struct PipelineHeads {
    pub map_head: MapSmHead,
    pub sm_heads: Vec<SmHead>,
}

impl PipelineHeads {
    /// Freshly initialized heads for a config, seeded from `cfg.seed`.
    /// The mapping head is built even when the stage is disabled, keeping
    /// the checkpoint layout independent of ablation switches.
    pub fn new(cfg: &PipelineConfig, sched: &SparsitySchedule) -> Result<PipelineHeads> {
        if sched.sm_targets.len() != cfg.sm_indices.len() {
            return Err(VppError::Config(format!(
                "schedule has {} stage targets for {} stage positions",
                sched.sm_targets.len(),
                cfg.sm_indices.len()
            )));
        }
        let root = SeededRng::new(cfg.seed).derive(STREAM_HEADS);
        let mut map_rng = root.derive(0);
        let map_head = MlpHead::new(cfg.vit.embed_dim, &mut map_rng);
        let sm_heads = cfg
            .sm_indices
            .iter()
            .zip(&sched.sm_targets)
            .enumerate()
            .map(|(k, (&layer, &kappa))| {
                let mut rng = root.derive(1 + k as u64);
                SmHead::new(layer, kappa, cfg.vit.embed_dim, &mut rng)
            })
            .collect();
        Ok(PipelineHeads { map_head, sm_heads })
    }

    /// Writes all head parameters to a snapshot file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = vec![(
            "map".to_string(),
            Matrix::from_vec(1, self.map_head.param_count(), self.map_head.to_flat())?,
        )];
        for (k, h) in self.sm_heads.iter().enumerate() {
            entries.push((
                format!("sm{k}"),
                Matrix::from_vec(1, h.mlp.param_count(), h.mlp.to_flat())?,
            ));
        }
        write_snapshot(path, &entries)
    }

    /// Rebuilds heads for `cfg` and overwrites their parameters from a
    /// snapshot; entry names and parameter counts must match the config.
    pub fn load(path: &Path, cfg: &PipelineConfig, sched: &SparsitySchedule) -> Result<PipelineHeads> {
        let mut heads = PipelineHeads::new(cfg, sched)?;
        let entries = read_snapshot(path)?;
        let expected = 1 + heads.sm_heads.len();
        if entries.len() != expected {
            return Err(VppError::Config(format!(
                "checkpoint holds {} heads, configuration expects {expected}",
                entries.len()
            )));
        }
        for (name, m) in &entries {
            let target: &mut MlpHead = match name.as_str() {
                "map" => &mut heads.map_head,
                other => {
                    let k: usize = other
                        .strip_prefix("sm")
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| {
                            VppError::Config(format!("unknown checkpoint entry {other:?}"))
                        })?;
                    &mut heads
                        .sm_heads
                        .get_mut(k)
                        .ok_or_else(|| {
                            VppError::Config(format!("checkpoint entry sm{k} has no stage"))
                        })?
                        .mlp
                }
            };
            if m.rows() * m.cols() != target.param_count() {
                return Err(VppError::Config(format!(
                    "checkpoint entry {name:?} holds {} parameters, head expects {}",
                    m.rows() * m.cols(),
                    target.param_count()
                )));
            }
            target.set_from_flat(m.data());
        }
        Ok(heads)
    }
}

/// Seeded backbone initialization on its own derived stream.
pub fn init_vit(cfg: &PipelineConfig) -> Result<VitWeights> {
    let mut rng = SeededRng::new(cfg.seed).derive(STREAM_VIT);
    VitWeights::init(&cfg.vit, &mut rng)
}

/// Everything one video run produces.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    /// `masks[t][b]` is the mask in effect *during* block `b+1` of frame
    /// `t`; index 0 is always dense (the first stage prunes block 2's
    /// input at the earliest).
    pub masks: Vec<Vec<PruneMask>>,
    /// The early stage's emitted mask per frame; `None` on the bootstrap
    /// frame or when the stage is disabled.
    pub map_masks: Vec<Option<PruneMask>>,
    /// `stage_masks[k][t]`: selective stage `k`'s emitted mask per frame.
    pub stage_masks: Vec<Vec<PruneMask>>,
    /// The mapping stage's keep probabilities per frame (empty rows where
    /// the stage did not run).
    pub p_map: Vec<Vec<f64>>,
    /// Per-block density averaged over frames (equals `pkr.per_layer`).
    pub density_profile: Vec<f64>,
    pub pkr: PkrReport,
    /// Analytic cost of the run, summed over frames.
    pub flops: FlopLedger,
    /// Decision records for the trainer.
    pub batch: LossBatch,
    /// How many stage applications tripped the all-drop repair.
    pub degenerate_events: usize,
}

/// Runs the full pipeline over one video with the given (frozen) backbone
/// and current heads. `noise_epoch` decorrelates decision noise between
/// training visits to the same video; evaluation runs use 0.
pub fn run_video(
    cfg: &PipelineConfig,
    sched: &SparsitySchedule,
    weights: &VitWeights,
    heads: &PipelineHeads,
    video: &SynthVideo,
    noise_epoch: u64,
) -> Result<RunArtifacts> {
    cfg.validate()?;
    sched.validate()?;
    if heads.sm_heads.len() != cfg.sm_indices.len() {
        return Err(VppError::Config(format!(
            "{} selective heads for {} stage positions",
            heads.sm_heads.len(),
            cfg.sm_indices.len()
        )));
    }
    let vit = &cfg.vit;
    let n = vit.tokens();
    if video.scenario.grid != vit.grid || video.scenario.patch_size != vit.patch_size {
        return Err(VppError::Config(format!(
            "video grid {:?}/patch {} does not match the backbone grid {:?}/patch {}",
            video.scenario.grid, video.scenario.patch_size, vit.grid, vit.patch_size
        )));
    }
    let l = vit.layers;
    let gumbel = cfg.gumbel();
    let epoch_rng =
        SeededRng::new(cfg.seed).derive(STREAM_RUN).derive(video.scenario.seed).derive(noise_epoch);

    let mut masks: Vec<Vec<PruneMask>> = Vec::with_capacity(video.frames.len());
    let mut map_masks = Vec::with_capacity(video.frames.len());
    let mut stage_masks: Vec<Vec<PruneMask>> = vec![Vec::new(); cfg.sm_indices.len()];
    let mut p_map = Vec::with_capacity(video.frames.len());
    let mut batch = LossBatch::default();
    let mut attention = vec![0.0; l];
    let mut mlp = vec![0.0; l];
    let mut overhead: Vec<(String, f64)> = Vec::new();
    let mut degenerate_events = 0usize;
    let mut state: Option<TemporalState> = None;

    for (t, frame) in video.frames.iter().enumerate() {
        let mut frame_rng = epoch_rng.derive(t as u64);
        let fg = foreground_union(&video.gt[t], n);
        let labels_of = |x: &PatchFeatures| -> Vec<bool> {
            x.active_ids.iter().map(|&id| fg[id]).collect()
        };

        let mut x = embed_frame(frame, vit, weights)?;
        x.frame = t;
        let mut active = PruneMask::all_ones(0, t, n);
        let mut during: Vec<PruneMask> = Vec::with_capacity(l);
        let mut frame_p_map: Vec<f64> = Vec::new();
        let mut frame_map_mask: Option<PruneMask> = None;
        let mut x1_snapshot: Option<PatchFeatures> = None;
        let mut ref_capture: Option<(PatchFeatures, PruneMask)> = None;

        for block in 1..=l {
            let mut governing = active.clone();
            governing.layer = block;
            attention[block - 1] += attention_flops(governing.popcount(), vit.embed_dim);
            mlp[block - 1] += mlp_flops(governing.popcount(), vit.embed_dim, vit.mlp_ratio);
            x = block_forward(&x, &weights.blocks[block - 1], vit, &governing)?;
            during.push(governing);

            if cfg.mapsm() == Some(block) {
                x1_snapshot = Some(x.clone());
                if let Some(st) = &state {
                    let pen = DistancePenalty::build(&x, st, cfg.lambda())?;
                    let out =
                        mapsm_forward(&x, st, &pen, &heads.map_head, sched, &gumbel, &mut frame_rng)?;
                    overhead.push((
                        format!("frame{t}.map"),
                        mapsm_overhead_flops(x.n_active(), st.retained(), vit.embed_dim),
                    ));
                    batch.map.push(MapStep {
                        x_hat: out.x_hat.tokens.clone(),
                        noise: out.cache.noise.clone(),
                        labels: labels_of(&x),
                    });
                    frame_p_map = out.p.clone();
                    x = x.gather(&out.mask.keep_ids())?;
                    frame_map_mask = Some(out.mask.clone());
                    active = out.mask;
                }
            }

            for (k, &idx) in cfg.sm_indices.iter().enumerate() {
                if idx != block {
                    continue;
                }
                overhead.push((
                    format!("frame{t}.sm{k}"),
                    sm_overhead_flops(x.n_active(), vit.embed_dim),
                ));
                let labels = labels_of(&x);
                let out = sm_forward(&x, &heads.sm_heads[k], &gumbel, &mut frame_rng)?;
                batch.sm.push(SmStep {
                    stage: k,
                    x: x.tokens.clone(),
                    noise: out.cache.noise.clone(),
                    labels,
                    n_total: n,
                });
                degenerate_events += out.degenerate as usize;
                x = x.gather(&out.mask.keep_ids())?;
                stage_masks[k].push(out.mask.clone());
                active = out.mask;
            }

            if cfg.mapsm().is_some() && block == cfg.ref_layer {
                ref_capture = Some((x.clone(), active.clone()));
            }
        }

        for pair in during.windows(2) {
            if !pair[1].is_refinement_of(&pair[0]) {
                return Err(VppError::Shape(format!(
                    "frame {t}: mask at block {} is not a refinement of block {}",
                    pair[1].layer, pair[0].layer
                )));
            }
        }

        if cfg.mapsm().is_some() {
            let (x_ref, mut m_ref) = ref_capture
                .ok_or_else(|| VppError::Config("reference layer was never reached".into()))?;
            m_ref.frame = t;
            let x1 = x1_snapshot.expect("mapping stage ran, snapshot taken").gather(&m_ref.keep_ids())?;
            state = Some(TemporalState { x1_prev: x1, x6_prev: x_ref, m_ref_prev: m_ref });
        }

        masks.push(during);
        map_masks.push(frame_map_mask);
        p_map.push(frame_p_map);
    }

    let pkr = compute_pkr(&masks)?;
    Ok(RunArtifacts {
        masks,
        map_masks,
        stage_masks,
        p_map,
        density_profile: pkr.per_layer.clone(),
        pkr,
        flops: FlopLedger { attention, mlp, overhead },
        batch,
        degenerate_events,
    })
}

/// Dense (no pruning) attention+MLP cost of one frame.
pub fn dense_flops_per_frame(vit: &VitConfig) -> f64 {
    let n = vit.tokens();
    vit.layers as f64 * (attention_flops(n, vit.embed_dim) + mlp_flops(n, vit.embed_dim, vit.mlp_ratio))
}

/// Expected per-frame cost ledger built from the solved schedule's
/// density profile instead of a concrete run: block `b` bills its
/// attention and MLP at the profile's token count, and each stage bills
/// its own cost model at its input occupancy.
pub fn analytic_flop_ledger(cfg: &PipelineConfig, sched: &SparsitySchedule) -> Result<FlopLedger> {
    cfg.validate()?;
    let vit = &cfg.vit;
    let n = vit.tokens();
    let profile = crate::config::analytic_density_profile(cfg, sched);
    let count = |d: f64| -> usize { (d * n as f64).round() as usize };

    let attention = profile.iter().map(|&d| attention_flops(count(d), vit.embed_dim)).collect();
    let mlp = profile.iter().map(|&d| mlp_flops(count(d), vit.embed_dim, vit.mlp_ratio)).collect();
    let mut overhead = Vec::new();
    if let Some(m) = cfg.mapsm() {
        // The stage scores every patch active in its own block and matches
        // them against the patches retained at the reference layer.
        let n_prev = count(profile[cfg.ref_layer - 1]);
        overhead.push(("map".to_string(), mapsm_overhead_flops(count(profile[m - 1]), n_prev, vit.embed_dim)));
    }
    for (k, &idx) in cfg.sm_indices.iter().enumerate() {
        overhead.push((format!("sm{k}"), sm_overhead_flops(count(profile[idx - 1]), vit.embed_dim)));
    }
    Ok(FlopLedger { attention, mlp, overhead })
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainReport {
    /// `step,loss components,pkr` rows, one per optimizer step.
    pub curves_csv: String,
    /// Loss report of the final step (stage penalties on hard densities).
    pub final_report: LossReport,
    /// Mean keep ratio over a fresh evaluation pass of the whole suite.
    pub final_pkr: f64,
    /// Realized batch-mean density per selective stage, pooled over the
    /// evaluation pass.
    pub stage_densities: Vec<f64>,
    /// Mean mapping-stage keep probability over the evaluation pass, when
    /// the stage is enabled and ran at least once.
    pub map_p_mean: Option<f64>,
}

/// Trains the pruning heads in place: each step runs one video (round
/// robin), assembles its decision batch, and applies one momentum-SGD
/// update from the straight-through gradients. Aborts with a numerical
/// error if the loss leaves the finite range.
pub fn train_heads(
    cfg: &PipelineConfig,
    sched: &SparsitySchedule,
    weights: &VitWeights,
    heads: &mut PipelineHeads,
    videos: &[SynthVideo],
    steps: usize,
) -> Result<TrainReport> {
    if videos.is_empty() {
        return Err(VppError::Config("training needs at least one video".into()));
    }
    if cfg.mapsm().is_none() && cfg.sm_indices.is_empty() {
        return Err(VppError::Config("no pruning stages: nothing to train".into()));
    }
    let gumbel = cfg.gumbel();
    let mut cw = ClassWeights::new();
    let mut opt = MomentumSgd::new(&heads.map_head, &heads.sm_heads, cfg.lr, cfg.momentum);
    let mut curves = LossReport::csv_header(cfg.sm_indices.len());
    curves.push('\n');
    let mut final_report: Option<LossReport> = None;

    for step in 0..steps {
        let video = &videos[step % videos.len()];
        for gt in &video.gt {
            let n = cfg.vit.tokens();
            let fg = foreground_union(gt, n);
            cw.observe(fg.iter().filter(|&&b| b).count() as f64 / n as f64);
        }
        // Epoch-tagged noise: revisiting a video draws fresh decisions.
        let art = run_video(cfg, sched, weights, heads, video, 1 + step as u64)?;
        let (report, g_map, g_sm) =
            training_grads(&art.batch, &heads.map_head, &heads.sm_heads, sched, &cfg.loss_weights, &cw, &gumbel)?;
        if !report.total().is_finite() {
            return Err(VppError::Numerical(format!(
                "training diverged at step {step}: total loss {}",
                report.total()
            )));
        }
        curves.push_str(&report.csv_row(step, art.pkr.mean));
        curves.push('\n');
        if std::env::var_os("VPP_TRACE").is_some() {
            let d: Vec<String> = art
                .stage_masks
                .iter()
                .map(|ms| {
                    let num: usize = ms.iter().map(|m| m.popcount()).sum();
                    let den: usize = ms.iter().map(|m| m.keep.len()).sum();
                    format!("{:.4}", num as f64 / den as f64)
                })
                .collect();
            eprintln!("step {step} video {} stages [{}]", step % videos.len(), d.join(", "));
        }
        opt.step(&mut heads.map_head, &mut heads.sm_heads, &g_map, &g_sm)?;
        final_report = Some(report);
    }

    // Fresh evaluation pass at the canonical noise epoch.
    let mut pkr_acc = 0.0;
    let mut stage_num = vec![0.0; cfg.sm_indices.len()];
    let mut stage_den = vec![0.0; cfg.sm_indices.len()];
    let mut p_acc = 0.0;
    let mut p_n = 0usize;
    for video in videos {
        let art = run_video(cfg, sched, weights, heads, video, 0)?;
        pkr_acc += art.pkr.mean;
        for (k, masks) in art.stage_masks.iter().enumerate() {
            for m in masks {
                stage_num[k] += m.popcount() as f64;
                stage_den[k] += m.keep.len() as f64;
            }
        }
        for frame_p in &art.p_map {
            p_acc += frame_p.iter().sum::<f64>();
            p_n += frame_p.len();
        }
    }
    let stage_densities = stage_num
        .iter()
        .zip(&stage_den)
        .map(|(&num, &den)| if den == 0.0 { 0.0 } else { num / den })
        .collect();

    Ok(TrainReport {
        curves_csv: curves,
        final_report: final_report.expect("steps > 0 or loop never ran"),
        final_pkr: pkr_acc / videos.len() as f64,
        stage_densities,
        map_p_mean: if p_n == 0 { None } else { Some(p_acc / p_n as f64) },
    })
}

/// Density-matched random baseline: for every mask, a uniformly random
/// keep set of the same cardinality (same layer/frame stamps). The
/// reference competitor for coverage comparisons.
pub fn random_masks_like(masks: &[Vec<PruneMask>], seed: u64) -> Vec<Vec<PruneMask>> {
    let mut rng = SeededRng::new(seed);
    masks
        .iter()
        .map(|frame| {
            frame
                .iter()
                .map(|m| {
                    let n = m.keep.len();
                    let mut ids: Vec<usize> = (0..n).collect();
                    rng.shuffle(&mut ids);
                    let mut keep: Vec<usize> = ids[..m.popcount()].to_vec();
                    keep.sort_unstable();
                    PruneMask::from_keep_ids(m.layer, m.frame, n, &keep)
                })
                .collect()
        })
        .collect()
}

/// Mean per-frame coverage of a run against its video's ground truth,
/// and the same under density-matched random masks (averaged over
/// `baseline_draws` seeds derived from `cfg.seed`).
pub fn coverage_vs_random(
    cfg: &PipelineConfig,
    artifacts: &RunArtifacts,
    video: &SynthVideo,
    baseline_draws: usize,
) -> Result<(f64, f64)> {
    let ioi = compute_ioi(&artifacts.masks, &video.gt)?.overall;
    let mut acc = 0.0;
    for d in 0..baseline_draws {
        let seed = SeededRng::new(cfg.seed).derive(0xBA5E).derive(d as u64).next_u64();
        let random = random_masks_like(&artifacts.masks, seed);
        acc += compute_ioi(&random, &video.gt)?.overall;
    }
    Ok((ioi, acc / baseline_draws as f64))
}

/// Scene-switch trace: coverage per frame against the density-matched
/// random baseline, with blank frames (no ground truth) reported as
/// absent.
#[derive(Debug, Clone)]
pub struct SceneSwitchReport {
    /// Index of the first content frame.
    pub onset: usize,
    pub ioi: Vec<Option<f64>>,
    pub random_ioi: Vec<Option<f64>>,
    pub artifacts: RunArtifacts,
}

impl SceneSwitchReport {
    pub fn csv(&self) -> String {
        let mut out = String::from("frame,ioi,random_ioi\n");
        for (t, (a, b)) in self.ioi.iter().zip(&self.random_ioi).enumerate() {
            let fmt = |v: &Option<f64>| match v {
                Some(x) => format!("{x:.6}"),
                None => "n/a".to_string(),
            };
            out.push_str(&format!("{t},{},{}\n", fmt(a), fmt(b)));
        }
        out
    }
}

/// Runs a blank-prefix video through trained heads and reports how fast
/// coverage re-locks onto the new content: per-frame coverage vs. the
/// random baseline (10 draws per frame).
pub fn scene_switch_experiment(
    cfg: &PipelineConfig,
    sched: &SparsitySchedule,
    weights: &VitWeights,
    heads: &PipelineHeads,
    video: &SynthVideo,
) -> Result<SceneSwitchReport> {
    let artifacts = run_video(cfg, sched, weights, heads, video, 0)?;
    let onset = video.scenario.blank_prefix;
    let mut ioi = Vec::with_capacity(video.frames.len());
    let mut random_ioi = Vec::with_capacity(video.frames.len());
    for t in 0..video.frames.len() {
        if video.gt[t].is_empty() {
            ioi.push(None);
            random_ioi.push(None);
            continue;
        }
        let frame_masks = std::slice::from_ref(&artifacts.masks[t]);
        let frame_gt = std::slice::from_ref(&video.gt[t]);
        ioi.push(Some(compute_ioi(frame_masks, frame_gt)?.overall));
        let mut acc = 0.0;
        const DRAWS: usize = 10;
        for d in 0..DRAWS {
            let seed =
                SeededRng::new(cfg.seed).derive(0x5CE0E).derive(t as u64).derive(d as u64).next_u64();
            let random = random_masks_like(frame_masks, seed);
            acc += compute_ioi(&random, frame_gt)?.overall;
        }
        random_ioi.push(Some(acc / DRAWS as f64));
    }
    Ok(SceneSwitchReport { onset, ioi, random_ioi, artifacts })
}

/// One row of the stage-position ablation grid.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub label: String,
    /// Goal the schedule was solved for (1.0 for the inert row).
    pub goal_pkr: f64,
    /// Realized keep ratio, averaged over the suite.
    pub pkr: f64,
    /// Coverage averaged over the suite.
    pub ioi: f64,
    /// Realized cost per frame, averaged over the suite.
    pub flops_per_frame: f64,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("configuration,goal_pkr,pkr,ioi,flops_per_frame\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.4},{:.6},{:.6},{:.0}\n",
            r.label, r.goal_pkr, r.pkr, r.ioi, r.flops_per_frame
        ));
    }
    out
}

/// The stage-position ablation: trains and evaluates four stage layouts
/// at the same density goal — the full pipeline (temporal mapping stage at
/// block 1 plus selective stages at 3/6/9), the image-only variant (the
/// mapping stage replaced by a plain selective stage at the same early
/// position, so both layouts prune from block 2 onward but the image-only
/// one must score current shallow features instead of mapped reference
/// features), the constant-cardinality variant (early stage only), and the
/// dense no-pruning reference.
pub fn ablate_position(
    base: &PipelineConfig,
    scenarios: &[SynthScenario],
    steps: usize,
) -> Result<Vec<AblationRow>> {
    let variants: [(&str, Box<dyn Fn(&mut PipelineConfig)>); 4] = [
        ("full", Box::new(|_| {})),
        (
            "image-only",
            Box::new(|c| {
                let mut stages = c.sm_indices.clone();
                stages.insert(0, c.mapsm_index);
                c.mapsm_index = 0;
                c.sm_indices = stages;
            }),
        ),
        ("const-keep", Box::new(|c| c.sm_indices = vec![])),
        (
            "none",
            Box::new(|c| {
                c.mapsm_index = 0;
                c.sm_indices = vec![];
            }),
        ),
    ];
    let videos: Vec<SynthVideo> =
        scenarios.iter().map(generate).collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(variants.len());
    for (label, tweak) in variants {
        let mut cfg = base.clone();
        tweak(&mut cfg);
        let sched = crate::config::resolve_schedule(&cfg)?;
        let weights = init_vit(&cfg)?;
        let mut heads = PipelineHeads::new(&cfg, &sched)?;
        let trainable = cfg.mapsm().is_some() || !cfg.sm_indices.is_empty();
        if trainable && steps > 0 {
            train_heads(&cfg, &sched, &weights, &mut heads, &videos, steps)?;
        }
        let mut pkr = 0.0;
        let mut ioi = 0.0;
        let mut flops = 0.0;
        for (v, video) in videos.iter().enumerate() {
            let art = run_video(&cfg, &sched, &weights, &heads, video, 0)?;
            pkr += art.pkr.mean;
            let clip_ioi = compute_ioi(&art.masks, &video.gt)?.overall;
            ioi += clip_ioi;
            flops += art.flops.total() / video.frames.len() as f64;
            if std::env::var_os("VPP_TRACE").is_some() {
                let n = cfg.vit.tokens();
                let mut per_layer = vec![0.0; cfg.vit.layers];
                let mut frames = 0usize;
                for (t, frame_masks) in art.masks.iter().enumerate() {
                    let fg = foreground_union(&video.gt[t], n);
                    let total = fg.iter().filter(|&&b| b).count();
                    if total == 0 {
                        continue;
                    }
                    frames += 1;
                    for (l, m) in frame_masks.iter().enumerate() {
                        let hit = m.keep.iter().zip(&fg).filter(|(&k, &f)| k && f).count();
                        per_layer[l] += hit as f64 / total as f64;
                    }
                }
                let prof: Vec<String> =
                    per_layer.iter().map(|c| format!("{:.2}", c / frames as f64)).collect();
                eprintln!(
                    "ablate {label} clip {v}: ioi {clip_ioi:.4} pkr {:.4} layers [{}]",
                    art.pkr.mean,
                    prof.join(" ")
                );
            }
        }
        let count = videos.len() as f64;
        rows.push(AblationRow {
            label: label.to_string(),
            goal_pkr: if trainable { cfg.goal_pkr } else { 1.0 },
            pkr: pkr / count,
            ioi: ioi / count,
            flops_per_frame: flops / count,
        });
    }
    Ok(rows)
}

/// Per-layer token features of a dense (never pruned) forward pass:
/// `result[t][l]` is the `N x E` feature matrix of frame `t` after block
/// `l`, with `l = 0` the raw patch embedding. Probe fodder.
pub fn dense_layer_features(
    video: &SynthVideo,
    vit: &VitConfig,
    weights: &VitWeights,
) -> Result<Vec<Vec<Matrix>>> {
    let n = vit.tokens();
    let mut out = Vec::with_capacity(video.frames.len());
    for (t, frame) in video.frames.iter().enumerate() {
        let mut x = embed_frame(frame, vit, weights)?;
        x.frame = t;
        let mut layers = Vec::with_capacity(vit.layers + 1);
        layers.push(x.tokens.clone());
        for block in 1..=vit.layers {
            let mask = PruneMask::all_ones(block, t, n);
            x = block_forward(&x, &weights.blocks[block - 1], vit, &mask)?;
            layers.push(x.tokens.clone());
        }
        out.push(layers);
    }
    Ok(out)
}

/// Pairs one dense layer's features with per-patch foreground labels, the
/// input shape the selectivity probe trains on.
pub fn probe_dataset(
    features: &[Vec<Matrix>],
    video: &SynthVideo,
    layer: usize,
) -> Result<Vec<(Matrix, Vec<bool>)>> {
    let n = video.scenario.tokens();
    features
        .iter()
        .enumerate()
        .map(|(t, layers)| {
            let m = layers.get(layer).ok_or_else(|| {
                VppError::Config(format!("no features at layer {layer} (have {})", layers.len()))
            })?;
            Ok((m.clone(), foreground_union(&video.gt[t], n)))
        })
        .collect()
}

/// The five-clip synthetic benchmark: a large disc, a small fast disc, a
/// slow rectangle, a two-instance mix, and a three-instance swarm —
/// together covering all instance-size strata and a speed ladder from
/// 0.36 to 0.94 patches per frame. Every clip's foreground stays below
/// the deepest keep target of the 0.55 schedule, so full coverage is
/// attainable at every layer and measured coverage reflects scoring
/// quality rather than budget clipping.
pub fn benchmark_suite(seed: u64) -> Vec<SynthScenario> {
    use crate::synth::{InstanceSpec, ShapeKind};
    let spec = |shape, area_frac, velocity| InstanceSpec {
        shape,
        area_frac,
        velocity,
        amplitude: 0.25,
    };
    let base = SynthScenario {
        frames: 8,
        background_amp: 0.25,
        fg_offset: 0.05,
        blank_prefix: 0,
        ..SynthScenario::default()
    };
    let instance_sets = [
        vec![spec(ShapeKind::Disc, 0.18, (0.6, 0.3))],
        vec![spec(ShapeKind::Disc, 0.06, (0.8, 0.5))],
        vec![spec(ShapeKind::Rect, 0.16, (0.3, 0.2))],
        vec![spec(ShapeKind::Disc, 0.05, (0.5, -0.6)), spec(ShapeKind::Rect, 0.08, (-0.4, 0.4))],
        vec![
            spec(ShapeKind::Disc, 0.03, (0.8, 0.2)),
            spec(ShapeKind::Disc, 0.03, (-0.5, 0.7)),
            spec(ShapeKind::Disc, 0.03, (0.3, -0.7)),
        ],
    ];
    instance_sets
        .into_iter()
        .enumerate()
        .map(|(i, instances)| SynthScenario {
            seed: seed.wrapping_add(i as u64),
            instances,
            ..base.clone()
        })
        .collect()
}

/// The benchmark suite with three blank warmup frames prepended inside
/// the same clip length, for the scene-switch experiment.
pub fn scene_switch_suite(seed: u64) -> Vec<SynthScenario> {
    benchmark_suite(seed)
        .into_iter()
        .map(|mut s| {
            s.blank_prefix = 3;
            s
        })
        .collect()
}

/// Per-patch survival shading of one frame: a patch's gray level is
/// `255 * (post-block masks containing it) / L`, rendered as solid
/// patch-sized blocks. A patch dropped by the stage right after block 1
/// is black; a never-dropped patch is white.
pub fn mask_shading(frame_masks: &[PruneMask], vit: &VitConfig) -> Result<(usize, usize, Vec<u8>)> {
    let l = vit.layers;
    if frame_masks.len() != l {
        return Err(VppError::Shape(format!(
            "expected {l} per-block masks, got {}",
            frame_masks.len()
        )));
    }
    let n = vit.tokens();
    let mut counts = vec![0usize; n];
    // The mask after block b is the one governing block b+1; after the
    // last block it is the final governing mask itself.
    for m in frame_masks.iter().skip(1).chain(std::iter::once(&frame_masks[l - 1])) {
        for (c, &kept) in counts.iter_mut().zip(&m.keep) {
            *c += kept as usize;
        }
    }
    let (rows, cols) = vit.grid;
    let ps = vit.patch_size;
    let (height, width) = (rows * ps, cols * ps);
    let mut pixels = vec![0u8; height * width];
    for (patch, &count) in counts.iter().enumerate() {
        let gray = (255.0 * count as f64 / l as f64).round() as u8;
        let (pr, pc) = (patch / cols, patch % cols);
        for dy in 0..ps {
            let row_base = (pr * ps + dy) * width + pc * ps;
            pixels[row_base..row_base + ps].fill(gray);
        }
    }
    Ok((width, height, pixels))
}

/// Text dump of every governing mask: one row per frame and block with
/// the keep bits spelled out, the recount source for keep-ratio audits.
pub fn masks_csv(artifacts: &RunArtifacts) -> String {
    let mut out = String::from("frame,block,popcount,density,bits\n");
    for (t, frame) in artifacts.masks.iter().enumerate() {
        for m in frame {
            let bits: String = m.keep.iter().map(|&k| if k { '1' } else { '0' }).collect();
            out.push_str(&format!(
                "{t},{},{},{:.6},{bits}\n",
                m.layer,
                m.popcount(),
                m.density()
            ));
        }
    }
    out
}

/// Cost-ledger dump: per-block attention and MLP cost, every stage
/// overhead entry, totals, and the dense reference.
pub fn flops_csv(ledger: &FlopLedger, dense_total: f64) -> String {
    let mut out = String::from("entry,flops\n");
    for (i, (a, m)) in ledger.attention.iter().zip(&ledger.mlp).enumerate() {
        out.push_str(&format!("block{}.attention,{a:.0}\n", i + 1));
        out.push_str(&format!("block{}.mlp,{m:.0}\n", i + 1));
    }
    for (label, f) in &ledger.overhead {
        out.push_str(&format!("overhead.{label},{f:.0}\n"));
    }
    out.push_str(&format!("total,{:.0}\n", ledger.total()));
    out.push_str(&format!("dense,{dense_total:.0}\n"));
    out.push_str(&format!("reduction,{:.4}\n", 1.0 - ledger.total() / dense_total));
    out
}
