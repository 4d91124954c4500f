//! Per-stage selective modules: the mid-network pruning decisions.
//!
//! Once features have matured a few blocks past the mapping stage, each
//! surviving patch can be judged on its own: a small two-layer head maps
//! the patch embedding to two logits (keep, drop) and a hard Gumbel pick
//! makes the binary call. Decisions are only taken over the patches still
//! active on entry, so the emitted mask is automatically a refinement of
//! the incoming one — the stages compose into a monotone shrinking
//! cascade.
//!
//! Unlike the mapping stage there is no cardinality constraint here: the
//! number of survivors is dynamic, pushed toward each stage's density
//! target by a sparsification penalty during training. Noise stays on at
//! inference, so borderline patches flicker in and out instead of being
//! permanently frozen by an early decision.
//!
//! The all-drop corner case is repaired, not propagated: attention over
//! zero tokens is undefined, so if every patch draws "drop" the single
//! patch with the highest soft keep probability is kept and the output is
//! flagged degenerate.

use crate::error::{Result, VppError};
use crate::gumbel::{gumbel_hard_from_logits, GumbelConfig};
use crate::heads::{MlpCache, MlpHead, KEEP};
use crate::tensor::{GumbelNoise, Matrix, SeededRng};
use crate::vit::{PatchFeatures, PruneMask};

/// One pruning stage: which layer it sits after, the density it is trained
/// toward, and its scoring head.
#[derive(Debug, Clone)]
pub struct SmHead {
    /// Layer index whose output this stage prunes.
    pub layer: usize,
    /// Target fraction of *all* patches this stage should keep.
    pub kappa: f64,
    pub mlp: MlpHead,
}

impl SmHead {
    pub fn new(layer: usize, kappa: f64, embed_dim: usize, rng: &mut SeededRng) -> SmHead {
        SmHead { layer, kappa, mlp: MlpHead::new(embed_dim, rng) }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0 && self.kappa < 1.0) {
            return Err(VppError::Config(format!(
                "stage density target must be in (0,1), got {}",
                self.kappa
            )));
        }
        Ok(())
    }
}

/// Everything needed to differentiate one stage application.
#[derive(Debug, Clone)]
pub struct SmCache {
    pub mlp_cache: MlpCache,
    /// `n_active x 2` soft Gumbel rows over (keep, drop).
    pub soft: Matrix,
    pub noise: GumbelNoise,
    /// Patch ids the decisions were taken over, in row order.
    pub active_ids: Vec<usize>,
}

/// Result of one stage application.
#[derive(Debug, Clone)]
pub struct SmOutput {
    pub mask: PruneMask,
    /// Hard keep decision per active patch, aligned with
    /// `cache.active_ids` (pre-repair values; `mask` reflects the repair).
    pub keep_decisions: Vec<bool>,
    /// True when every patch drew "drop" and the repair kicked in.
    pub degenerate: bool,
    pub cache: SmCache,
}

/// Scores the active patches and emits the stage's mask. Decisions are
/// taken only over `x.active_ids`, so the mask refines the incoming active
/// set by construction.
pub fn sm_forward(
    x: &PatchFeatures,
    head: &SmHead,
    cfg: &GumbelConfig,
    rng: &mut SeededRng,
) -> Result<SmOutput> {
    head.validate()?;
    let n = x.n_active();
    if n == 0 {
        return Err(VppError::Domain("selective stage received no active patches".into()));
    }
    let (z, mlp_cache) = head.mlp.forward(&x.tokens)?;
    let noise = GumbelNoise::sample_matrix(rng, n, 2);
    let (hard, soft) = gumbel_hard_from_logits(&z, &noise, cfg)?;
    let keep_decisions: Vec<bool> = (0..n).map(|i| hard.get(i, KEEP) == 1.0).collect();

    let mut keep_ids: Vec<usize> = x
        .active_ids
        .iter()
        .zip(&keep_decisions)
        .filter(|(_, &k)| k)
        .map(|(&id, _)| id)
        .collect();
    let degenerate = keep_ids.is_empty();
    if degenerate {
        // All-drop repair: keep the patch the relaxation liked most.
        let best = (0..n)
            .max_by(|&a, &b| soft.get(a, KEEP).partial_cmp(&soft.get(b, KEEP)).unwrap())
            .expect("n > 0");
        keep_ids.push(x.active_ids[best]);
    }
    let mask = PruneMask::from_keep_ids(head.layer, x.frame, x.n_total(), &keep_ids);
    let cache = SmCache { mlp_cache, soft, noise, active_ids: x.active_ids.clone() };
    Ok(SmOutput { mask, keep_decisions, degenerate, cache })
}

/// Cost model of one stage application, in FLOPs: the scoring MLP plus the
/// Gumbel decision over `n` two-way rows.
pub fn sm_overhead_flops(n_active: usize, embed_dim: usize) -> f64 {
    let n = n_active as f64;
    let e = embed_dim as f64;
    let h = (embed_dim / 2) as f64;
    2.0 * n * e * h + 2.0 * n * h * 2.0 + 10.0 * n
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Head whose keep-drop margin is `gain * x[0]`: positive first
    /// coordinate leans keep, negative leans drop.
    fn rigged(layer: usize, e: usize, gain: f64, keep_bias: f64) -> SmHead {
        let mut w1 = Matrix::zeros(e, e / 2);
        w1.set(0, 0, 1.0);
        let mut w2 = Matrix::zeros(e / 2, 2);
        w2.set(0, KEEP, gain / 2.0);
        w2.set(0, 1 - KEEP, -gain / 2.0);
        SmHead {
            layer,
            kappa: 0.5,
            mlp: MlpHead { w1, b1: vec![0.0; e / 2], w2, b2: vec![keep_bias, 0.0] },
        }
    }

    /// Features whose first coordinate is `sign`, scaled small enough that
    /// tanh stays near-linear.
    fn signed_features(signs: &[f64], e: usize, grid: (usize, usize)) -> PatchFeatures {
        let mut m = Matrix::zeros(signs.len(), e);
        for (i, &s) in signs.iter().enumerate() {
            m.set(i, 0, s);
        }
        PatchFeatures::dense(0, 3, m, grid).unwrap()
    }

    #[test]
    fn noise_free_decisions_follow_the_logit_sign() {
        let x = signed_features(&[0.5, -0.5, 0.5, -0.5, -0.5, 0.5], 4, (2, 3));
        let head = rigged(3, 4, 8.0, 0.0);
        let cfg = GumbelConfig { tau: 10.0, noise_enabled: false };
        let mut rng = SeededRng::new(61);
        let out = sm_forward(&x, &head, &cfg, &mut rng).unwrap();
        assert_eq!(out.keep_decisions, vec![true, false, true, false, false, true]);
        assert_eq!(out.mask.keep_ids(), vec![0, 2, 5]);
        assert!(!out.degenerate);
        assert_eq!(out.mask.layer, 3);
    }

    #[test]
    fn output_always_refines_the_incoming_active_set() {
        let mut rng = SeededRng::new(63);
        let cfg = GumbelConfig::default();
        for trial in 0..50 {
            let dense = PatchFeatures::dense(trial, 3, rng.normal_matrix(12, 6, 1.0), (3, 4)).unwrap();
            // Random incoming mask with at least one survivor.
            let mut ids: Vec<usize> = (0..12).filter(|_| rng.next_f64() < 0.6).collect();
            if ids.is_empty() {
                ids.push(rng.next_below(12));
            }
            let x = dense.gather(&ids).unwrap();
            let incoming = PruneMask::from_keep_ids(1, trial, 12, &ids);
            let head = SmHead::new(3, 0.4, 6, &mut rng);
            let out = sm_forward(&x, &head, &cfg, &mut rng).unwrap();
            assert!(
                out.mask.is_refinement_of(&incoming),
                "trial {trial}: stage mask kept a patch outside the active set"
            );
            assert!(out.mask.popcount() >= 1);
        }
    }

    #[test]
    fn all_drop_is_repaired_to_the_best_soft_survivor() {
        // Strongly negative first coordinates with a hard drop margin:
        // every hard decision is "drop" even under noise at tau = 10.
        let x = signed_features(&[-3.0, -1.0, -2.0], 4, (1, 3));
        let head = rigged(3, 4, 40.0, 0.0);
        let cfg = GumbelConfig::default();
        let mut rng = SeededRng::new(65);
        let out = sm_forward(&x, &head, &cfg, &mut rng).unwrap();
        assert!(out.degenerate);
        assert_eq!(out.mask.popcount(), 1);
        assert!(out.keep_decisions.iter().all(|&k| !k));
        // The survivor is the row with the highest soft keep probability.
        let best = (0..3)
            .max_by(|&a, &b| {
                out.cache.soft.get(a, KEEP).partial_cmp(&out.cache.soft.get(b, KEEP)).unwrap()
            })
            .unwrap();
        assert_eq!(out.mask.keep_ids(), vec![best]);
    }

    #[test]
    fn repair_never_fires_when_a_patch_clearly_survives() {
        let x = signed_features(&[3.0, -3.0, -3.0, -3.0], 4, (2, 2));
        let head = rigged(3, 4, 40.0, 0.0);
        let cfg = GumbelConfig::default();
        for seed in 0..300 {
            let mut rng = SeededRng::new(seed);
            let out = sm_forward(&x, &head, &cfg, &mut rng).unwrap();
            assert!(!out.degenerate, "seed {seed}");
            assert!(out.mask.keep[0], "seed {seed}: strong foreground dropped");
        }
    }

    #[test]
    fn keep_bias_sweeps_density_from_empty_to_full() {
        let mut rng = SeededRng::new(67);
        let x = PatchFeatures::dense(0, 3, rng.normal_matrix(16, 6, 0.1), (4, 4)).unwrap();
        let cfg = GumbelConfig { tau: 10.0, noise_enabled: false };
        let mut counts = Vec::new();
        for bias in [-5.0, 0.0, 5.0] {
            let mut head = SmHead::new(3, 0.4, 6, &mut rng);
            head.mlp = rigged(3, 6, 1.0, bias).mlp;
            let out = sm_forward(&x, &head, &cfg, &mut rng).unwrap();
            counts.push(out.mask.popcount());
        }
        assert_eq!(counts[0], 1); // all-drop, repaired to one survivor
        assert_eq!(counts[2], 16); // keep everything
        assert!(counts[0] <= counts[1] && counts[1] <= counts[2]);
    }

    #[test]
    fn empty_active_set_is_rejected() {
        let mut rng = SeededRng::new(69);
        let dense = PatchFeatures::dense(0, 3, rng.normal_matrix(4, 4, 1.0), (2, 2)).unwrap();
        let empty = dense.gather(&[]).unwrap();
        let head = SmHead::new(3, 0.4, 4, &mut rng);
        assert!(matches!(
            sm_forward(&empty, &head, &GumbelConfig::default(), &mut rng),
            Err(VppError::Domain(_))
        ));
    }

    #[test]
    fn invalid_density_target_is_rejected() {
        let mut rng = SeededRng::new(71);
        for kappa in [0.0, 1.0, -0.2, 1.4] {
            let head = SmHead::new(3, kappa, 4, &mut rng);
            assert!(head.validate().is_err(), "kappa {kappa} accepted");
        }
    }

    #[test]
    fn mask_is_stamped_with_stage_layer_and_input_frame() {
        let mut rng = SeededRng::new(73);
        let mut x = PatchFeatures::dense(0, 6, rng.normal_matrix(9, 4, 1.0), (3, 3)).unwrap();
        x.frame = 5;
        let head = SmHead::new(6, 0.36, 4, &mut rng);
        let out = sm_forward(&x, &head, &GumbelConfig::default(), &mut rng).unwrap();
        assert_eq!(out.mask.layer, 6);
        assert_eq!(out.mask.frame, 5);
        assert_eq!(out.mask.keep.len(), 9);
    }

    #[test]
    fn overhead_cost_matches_a_hand_sum() {
        // n = 10, E = 8, H = 4: MLP 2*10*8*4 + 2*10*4*2 = 640 + 160 = 800,
        // decision 10 * 10 = 100.
        assert_eq!(sm_overhead_flops(10, 8), 900.0);
    }
}
