//! Evaluation: how sparse did the run get, did the survivors cover the
//! objects, and were the features separable enough to prune on.
//!
//! * **Patch keeping ratio** — the mean per-layer density of active
//!   patches. A dense run scores 1; lower is cheaper.
//! * **Instance coverage** — for every ground-truth instance, the fraction
//!   of its patches still active, averaged over instances, layers, and
//!   frames, and additionally stratified by instance size (small ≤ 10% of
//!   the grid, medium 10–20%, large > 20%). Pruning that discards small
//!   objects shows up here long before any downstream score would move.
//! * **Foreground-selectivity probe** — a linear classifier trained on
//!   frozen dense features to tell foreground patches from background.
//!   Its accuracy measures how much pruning-relevant signal the features
//!   carry: chance (0.5) means pruning can do no better than random.

use crate::error::{Result, VppError};
use crate::losses::ClassWeights;
use crate::synth::{GtInstanceMask, SizeStratum};
use crate::tensor::{Matrix, SeededRng};
use crate::vit::PruneMask;

/// Gradient-descent budget of the probe.
const PROBE_STEPS: usize = 300;
const PROBE_LR: f64 = 0.5;

/// Per-layer density and its mean over layers.
#[derive(Debug, Clone)]
pub struct PkrReport {
    /// `per_layer[l]` = active patches at layer `l` / total patches,
    /// averaged over frames.
    pub per_layer: Vec<f64>,
    pub mean: f64,
}

impl PkrReport {
    pub fn csv(&self) -> String {
        let mut s = String::from("layer,density\n");
        for (l, d) in self.per_layer.iter().enumerate() {
            s.push_str(&format!("{},{d:.6}\n", l + 1));
        }
        s.push_str(&format!("mean,{:.6}\n", self.mean));
        s
    }
}

/// Patch keeping ratio over a run. Input is one mask per layer per frame —
/// layers without a pruning module carry the pass-through mask of the
/// previous stage (dense before the first stage).
pub fn compute_pkr(frame_layer_masks: &[Vec<PruneMask>]) -> Result<PkrReport> {
    if frame_layer_masks.is_empty() || frame_layer_masks[0].is_empty() {
        return Err(VppError::Domain("keeping ratio over an empty mask set".into()));
    }
    let layers = frame_layer_masks[0].len();
    let mut per_layer = vec![0.0; layers];
    for (t, frame) in frame_layer_masks.iter().enumerate() {
        if frame.len() != layers {
            return Err(VppError::Shape(format!(
                "frame {t} has {} layer masks, expected {layers}",
                frame.len()
            )));
        }
        for (l, mask) in frame.iter().enumerate() {
            per_layer[l] += mask.density();
        }
    }
    let frames = frame_layer_masks.len() as f64;
    for d in &mut per_layer {
        *d /= frames;
    }
    let mean = per_layer.iter().sum::<f64>() / layers as f64;
    Ok(PkrReport { per_layer, mean })
}

/// Instance coverage, overall and by size stratum. A stratum with no
/// instances reports `None`.
#[derive(Debug, Clone)]
pub struct IoiReport {
    pub overall: f64,
    pub small: Option<f64>,
    pub medium: Option<f64>,
    pub large: Option<f64>,
    /// Instances observed per stratum (small, medium, large), summed over
    /// frames.
    pub counts: (usize, usize, usize),
}

impl IoiReport {
    pub fn csv(&self) -> String {
        let fmt = |v: &Option<f64>| match v {
            Some(x) => format!("{x:.6}"),
            None => "n/a".into(),
        };
        format!(
            "stratum,coverage,instances\nsmall,{},{}\nmedium,{},{}\nlarge,{},{}\noverall,{:.6},{}\n",
            fmt(&self.small),
            self.counts.0,
            fmt(&self.medium),
            self.counts.1,
            fmt(&self.large),
            self.counts.2,
            self.overall,
            self.counts.0 + self.counts.1 + self.counts.2,
        )
    }
}

/// Coverage of ground-truth instances by the run's masks: for instance `i`
/// at layer `l` of frame `t`, the fraction of the instance's patches the
/// mask keeps; averaged over all (instance, layer) pairs of all frames.
pub fn compute_ioi(
    frame_layer_masks: &[Vec<PruneMask>],
    gt: &[Vec<GtInstanceMask>],
) -> Result<IoiReport> {
    if frame_layer_masks.len() != gt.len() {
        return Err(VppError::Shape(format!(
            "{} mask frames vs {} ground-truth frames",
            frame_layer_masks.len(),
            gt.len()
        )));
    }
    let mut sums = [0.0; 3];
    let mut counts = [0usize; 3];
    let mut total_sum = 0.0;
    let mut total_count = 0usize;
    for (frame_masks, frame_gt) in frame_layer_masks.iter().zip(gt) {
        for inst in frame_gt {
            let gt_size = inst.patch_count();
            if gt_size == 0 {
                return Err(VppError::Domain(format!(
                    "instance {} of frame {} has an empty patch set",
                    inst.instance, inst.frame
                )));
            }
            let mut inst_acc = 0.0;
            for mask in frame_masks {
                if mask.keep.len() != inst.patches.len() {
                    return Err(VppError::Shape(format!(
                        "mask over {} patches vs ground truth over {}",
                        mask.keep.len(),
                        inst.patches.len()
                    )));
                }
                let covered = mask
                    .keep
                    .iter()
                    .zip(&inst.patches)
                    .filter(|(&m, &g)| m && g)
                    .count();
                inst_acc += covered as f64 / gt_size as f64;
            }
            let per_instance = inst_acc / frame_masks.len() as f64;
            let s = match inst.stratum() {
                SizeStratum::Small => 0,
                SizeStratum::Medium => 1,
                SizeStratum::Large => 2,
            };
            sums[s] += per_instance;
            counts[s] += 1;
            total_sum += per_instance;
            total_count += 1;
        }
    }
    if total_count == 0 {
        return Err(VppError::Domain("no ground-truth instances to cover".into()));
    }
    let frac = |s: usize| {
        if counts[s] == 0 {
            None
        } else {
            Some(sums[s] / counts[s] as f64)
        }
    };
    Ok(IoiReport {
        overall: total_sum / total_count as f64,
        small: frac(0),
        medium: frac(1),
        large: frac(2),
        counts: (counts[0], counts[1], counts[2]),
    })
}

/// A trained foreground-selectivity probe: one linear layer from patch
/// features to (background, foreground) scores.
#[derive(Debug, Clone)]
pub struct FgsProbe {
    pub layer: usize,
    /// `E x 2` classifier weights.
    pub w: Matrix,
    pub b: Vec<f64>,
    /// Foreground ratio of the training patches (running mean).
    pub r_fg: f64,
    /// Class-balanced patch accuracy on the held-out frames: each class
    /// contributes its own recall, matching the class-weighted training
    /// objective. A label-independent predictor scores 0.5 regardless of
    /// the foreground ratio.
    pub accuracy: f64,
}

impl FgsProbe {
    /// Predicted class (false = background) per row of `x`.
    pub fn predict(&self, x: &Matrix) -> Result<Vec<bool>> {
        let z = logits(x, &self.w, &self.b)?;
        Ok((0..z.rows()).map(|i| z.get(i, 1) > z.get(i, 0)).collect())
    }
}

fn logits(x: &Matrix, w: &Matrix, b: &[f64]) -> Result<Matrix> {
    let mut z = x.matmul(w)?;
    for i in 0..z.rows() {
        let row = z.row_mut(i);
        row[0] += b[0];
        row[1] += b[1];
    }
    Ok(z)
}

/// Trains the probe on frozen per-frame features and reports held-out
/// patch accuracy.
///
/// Frames alternate between training (even index) and evaluation (odd
/// index); with a single frame it is evaluated in-sample. Frames whose
/// labels are single-class are skipped from the training batch — they pin
/// the class prior without informing the boundary. Class-weighted
/// cross-entropy (`w_bg = r_fg`, `w_fg = 1 - r_fg`) keeps rare foregrounds
/// from being drowned out. Training is deterministic: zero
/// initialization, full-batch gradient descent on a convex objective.
pub fn probe_fgs(frames: &[(Matrix, Vec<bool>)], layer: usize) -> Result<FgsProbe> {
    if frames.is_empty() {
        return Err(VppError::Domain("probe needs at least one frame of features".into()));
    }
    let dim = frames[0].0.cols();
    for (t, (x, y)) in frames.iter().enumerate() {
        if x.rows() != y.len() || x.cols() != dim {
            return Err(VppError::Shape(format!(
                "frame {t}: {} rows x {} cols vs {} labels",
                x.rows(),
                x.cols(),
                y.len()
            )));
        }
    }
    let train_ids: Vec<usize> = (0..frames.len())
        .step_by(2)
        .filter(|&t| {
            let y = &frames[t].1;
            y.iter().any(|&v| v) && y.iter().any(|&v| !v)
        })
        .collect();
    if train_ids.is_empty() {
        return Err(VppError::Domain(
            "every candidate training frame is single-class; the probe has nothing to separate"
                .into(),
        ));
    }
    let eval_ids: Vec<usize> = if frames.len() == 1 {
        vec![0]
    } else {
        (1..frames.len()).step_by(2).collect()
    };

    // Stack the training patches and track the foreground ratio.
    let mut cw = ClassWeights::new();
    let mut rows = 0usize;
    for &t in &train_ids {
        let y = &frames[t].1;
        cw.observe(y.iter().filter(|&&v| v).count() as f64 / y.len() as f64);
        rows += y.len();
    }
    let mut x_train = Matrix::zeros(rows, dim);
    let mut y_train = Vec::with_capacity(rows);
    let mut at = 0usize;
    for &t in &train_ids {
        let (x, y) = &frames[t];
        for i in 0..x.rows() {
            x_train.row_mut(at).copy_from_slice(x.row(i));
            y_train.push(y[i]);
            at += 1;
        }
    }

    let (w_fg, w_bg) = (cw.w_fg(), cw.w_bg());
    let weight_sum: f64 = y_train.iter().map(|&y| if y { w_fg } else { w_bg }).sum();
    let mut w = Matrix::zeros(dim, 2);
    let mut b = vec![0.0; 2];
    for _ in 0..PROBE_STEPS {
        let z = logits(&x_train, &w, &b)?;
        let p = z.row_softmax();
        // dz = weight_y * (p - onehot(y)) / sum(weights)
        let mut dz = Matrix::zeros(rows, 2);
        for i in 0..rows {
            let wy = if y_train[i] { w_fg } else { w_bg };
            let target = usize::from(y_train[i]);
            for c in 0..2 {
                let delta = p.get(i, c) - if c == target { 1.0 } else { 0.0 };
                dz.set(i, c, wy * delta / weight_sum);
            }
        }
        let dw = x_train.matmul_tn(&dz)?;
        let db = dz.col_sums();
        w.add_scaled_assign(&dw, -PROBE_LR)?;
        b[0] -= PROBE_LR * db[0];
        b[1] -= PROBE_LR * db[1];
    }

    // Balanced accuracy: recall per class, averaged over the classes
    // actually present in the evaluation pool.
    let mut correct = [0usize; 2];
    let mut total = [0usize; 2];
    for &t in &eval_ids {
        let (x, y) = &frames[t];
        let z = logits(x, &w, &b)?;
        for i in 0..x.rows() {
            let pred = z.get(i, 1) > z.get(i, 0);
            let class = usize::from(y[i]);
            correct[class] += usize::from(pred == y[i]);
            total[class] += 1;
        }
    }
    let mut acc_sum = 0.0;
    let mut classes = 0usize;
    for c in 0..2 {
        if total[c] > 0 {
            acc_sum += correct[c] as f64 / total[c] as f64;
            classes += 1;
        }
    }
    if classes == 0 {
        return Err(VppError::Domain("no evaluation patches for the probe".into()));
    }
    Ok(FgsProbe { layer, w, b, r_fg: cw.r_fg(), accuracy: acc_sum / classes as f64 })
}

/// Permutation baseline: probe accuracy with labels shuffled globally
/// across all patches, once per seed. Informative features score ~0.5
/// here no matter how separable the true labeling is.
pub fn fgs_shuffle_baseline(
    frames: &[(Matrix, Vec<bool>)],
    layer: usize,
    seeds: &[u64],
) -> Result<Vec<f64>> {
    let mut accs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut rng = SeededRng::new(seed);
        let mut pool: Vec<bool> = frames.iter().flat_map(|(_, y)| y.iter().copied()).collect();
        rng.shuffle(&mut pool);
        let mut at = 0usize;
        let shuffled: Vec<(Matrix, Vec<bool>)> = frames
            .iter()
            .map(|(x, y)| {
                let labels = pool[at..at + y.len()].to_vec();
                at += y.len();
                (x.clone(), labels)
            })
            .collect();
        accs.push(probe_fgs(&shuffled, layer)?.accuracy);
    }
    Ok(accs)
}
