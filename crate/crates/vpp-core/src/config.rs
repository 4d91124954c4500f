//! Pipeline configuration: where the pruning stages sit, which density
//! goal to hit, and the solver that turns a goal into a schedule.
//!
//! The run is described by a small key=value text format plus programmatic
//! overrides, so experiments are reproducible from a file and tweakable
//! from the command line.
//!
//! The schedule solver works backwards from the target keep ratio: given
//! the stage positions, the early stage's top-k density is a preset per
//! goal, and the selective stages follow a geometric ladder `rho, rho^2,
//! rho^3`. The analytic keep ratio — each block weighted by the density
//! of the mask in effect while it runs — is monotone in `rho`, so
//! bisection pins `rho` such that the schedule's expected keep ratio
//! equals the goal exactly.

use crate::error::{Result, VppError};
use crate::gumbel::GumbelConfig;
use crate::losses::{LossWeights, DEFAULT_LR, DEFAULT_MOMENTUM, DEFAULT_TRAIN_STEPS};
use crate::mapsm::{DistancePenalty, SparsitySchedule};
use crate::vit::VitConfig;

/// Goal presets and the early-stage keep fraction paired with each.
const PRESETS: [(f64, f64); 2] = [(0.55, 0.7), (0.40, 0.6)];

/// Everything a run needs. The mapping stage sits after block
/// `mapsm_index` (0 disables it), each selective stage after its index in
/// `sm_indices`, and the temporal state is captured from the reference
/// layer's masked output.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub vit: VitConfig,
    /// Block index the mapping stage follows; 0 disables the stage.
    pub mapsm_index: usize,
    /// Block indices the selective stages follow, strictly increasing.
    pub sm_indices: Vec<usize>,
    /// Layer whose masked output becomes the next frame's reference
    /// features.
    pub ref_layer: usize,
    /// Target mean keep ratio; one of the supported presets.
    pub goal_pkr: f64,
    /// Gumbel temperature.
    pub tau: f64,
    /// Target mean of the mapping stage's keep probabilities.
    pub kappa_init: f64,
    pub loss_weights: LossWeights,
    /// Distance-penalty weight; `None` derives `0.1 * embed_dim`.
    pub lambda_d: Option<f64>,
    pub seed: u64,
    pub train_steps: usize,
    pub lr: f64,
    pub momentum: f64,
}

impl Default for PipelineConfig {
    fn default() -> PipelineConfig {
        PipelineConfig {
            vit: VitConfig::default(),
            mapsm_index: 1,
            sm_indices: vec![3, 6, 9],
            ref_layer: 6,
            goal_pkr: 0.55,
            tau: 10.0,
            kappa_init: 0.5,
            loss_weights: LossWeights::default(),
            lambda_d: None,
            seed: 1,
            train_steps: DEFAULT_TRAIN_STEPS,
            lr: DEFAULT_LR,
            momentum: DEFAULT_MOMENTUM,
        }
    }
}

impl PipelineConfig {
    /// The mapping stage's position, if enabled.
    pub fn mapsm(&self) -> Option<usize> {
        if self.mapsm_index == 0 {
            None
        } else {
            Some(self.mapsm_index)
        }
    }

    pub fn gumbel(&self) -> GumbelConfig {
        GumbelConfig { tau: self.tau, noise_enabled: true }
    }

    /// Resolved distance-penalty weight.
    pub fn lambda(&self) -> f64 {
        self.lambda_d.unwrap_or_else(|| DistancePenalty::default_lambda(self.vit.embed_dim))
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        let l = self.vit.layers;
        if let Some(m) = self.mapsm() {
            if m >= l {
                return Err(VppError::Config(format!(
                    "mapping stage at block {m} but the network has {l} layers"
                )));
            }
            if self.ref_layer <= m {
                return Err(VppError::Config(format!(
                    "reference layer {} does not come after the mapping stage at {m}",
                    self.ref_layer
                )));
            }
        }
        if self.ref_layer == 0 || self.ref_layer > l {
            return Err(VppError::Config(format!(
                "reference layer {} outside 1..={l}",
                self.ref_layer
            )));
        }
        for pair in self.sm_indices.windows(2) {
            if pair[1] <= pair[0] {
                return Err(VppError::Config(
                    "selective stage indices must be strictly increasing".into(),
                ));
            }
        }
        if let Some(&first) = self.sm_indices.first() {
            if first == 0 {
                return Err(VppError::Config("a selective stage cannot precede block 1".into()));
            }
            if let Some(m) = self.mapsm() {
                if m >= first {
                    return Err(VppError::Config(format!(
                        "mapping stage at {m} must precede the first selective stage at {first}"
                    )));
                }
            }
        }
        if let Some(&last) = self.sm_indices.last() {
            if last >= l {
                return Err(VppError::Config(format!(
                    "selective stage at block {last} but the network has {l} layers"
                )));
            }
        }
        if topk_preset(self.goal_pkr).is_err() {
            return Err(VppError::Config(format!(
                "goal keep ratio {} is not a supported preset ({})",
                self.goal_pkr,
                PRESETS.map(|(g, _)| g.to_string()).join(", ")
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(VppError::Config(format!("temperature must be positive, got {}", self.tau)));
        }
        if !(self.kappa_init > 0.0 && self.kappa_init < 1.0) {
            return Err(VppError::Config(format!(
                "kappa_init must be in (0,1), got {}",
                self.kappa_init
            )));
        }
        if let Some(lam) = self.lambda_d {
            if lam < 0.0 {
                return Err(VppError::Config(format!("lambda_d must be nonnegative, got {lam}")));
            }
        }
        if self.lr <= 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return Err(VppError::Config(format!(
                "bad optimizer settings: lr {}, momentum {}",
                self.lr, self.momentum
            )));
        }
        Ok(())
    }
}

/// Early-stage keep fraction paired with a goal keep ratio.
pub fn topk_preset(goal_pkr: f64) -> Result<f64> {
    for (goal, topk) in PRESETS {
        if (goal_pkr - goal).abs() < 1e-9 {
            return Ok(topk);
        }
    }
    Err(VppError::Config(format!("no preset for goal keep ratio {goal_pkr}")))
}

/// Density the early stage actually realizes: exact-cardinality top-k
/// rounds the fraction up to whole patches.
pub fn realized_topk_density(n_tokens: usize, topk_fraction: f64) -> f64 {
    (topk_fraction * n_tokens as f64).ceil() / n_tokens as f64
}

/// Expected per-block densities under a schedule: each block carries the
/// density of the mask in effect while it runs — dense until the first
/// stage, the early stage's top-k density next, then each selective
/// stage's target.
pub fn analytic_density_profile(cfg: &PipelineConfig, sched: &SparsitySchedule) -> Vec<f64> {
    let l = cfg.vit.layers;
    let d_topk = if cfg.mapsm().is_some() {
        realized_topk_density(cfg.vit.tokens(), sched.topk_fraction)
    } else {
        1.0
    };
    (1..=l)
        .map(|block| {
            // Density set by the last stage strictly before this block.
            let mut density = 1.0;
            if let Some(m) = cfg.mapsm() {
                if m < block {
                    density = d_topk;
                }
            }
            for (k, &idx) in cfg.sm_indices.iter().enumerate() {
                if idx < block {
                    density = sched.sm_targets[k];
                }
            }
            density
        })
        .collect()
}

/// Mean of the analytic density profile.
pub fn analytic_pkr(cfg: &PipelineConfig, sched: &SparsitySchedule) -> f64 {
    let profile = analytic_density_profile(cfg, sched);
    profile.iter().sum::<f64>() / profile.len() as f64
}

/// Solves the schedule for a config: top-k fraction from the goal preset,
/// then `rho` bisected so the analytic keep ratio equals the goal. With no
/// selective stages the top-k cardinality itself is solved instead; with
/// no stages at all the schedule is inert (everything dense).
pub fn resolve_schedule(cfg: &PipelineConfig) -> Result<SparsitySchedule> {
    cfg.validate()?;
    let stages = cfg.sm_indices.len();
    let l = cfg.vit.layers as f64;
    let n = cfg.vit.tokens();

    if cfg.mapsm().is_none() && stages == 0 {
        return Ok(SparsitySchedule {
            kappa_init: cfg.kappa_init,
            topk_fraction: 1.0,
            rho: 0.5,
            sm_targets: vec![],
        });
    }

    if stages == 0 {
        // Early stage only: pick the cardinality whose flat profile means
        // out closest to the goal.
        let m = cfg.mapsm_index as f64;
        let want_density = (cfg.goal_pkr * l - m) / (l - m);
        let k = (want_density * n as f64).round();
        if k < 1.0 || k > n as f64 {
            return Err(VppError::Config(format!(
                "goal keep ratio {} is unreachable with the early stage alone",
                cfg.goal_pkr
            )));
        }
        return Ok(SparsitySchedule {
            kappa_init: cfg.kappa_init,
            // k/n reproduces cardinality k exactly under ceil.
            topk_fraction: k / n as f64,
            rho: 0.5,
            sm_targets: vec![],
        });
    }

    let topk_fraction = if cfg.mapsm().is_some() { topk_preset(cfg.goal_pkr)? } else { 1.0 };
    let pkr_at = |rho: f64| -> f64 {
        let sched = SparsitySchedule::geometric(cfg.kappa_init, topk_fraction, rho, stages);
        analytic_pkr(cfg, &sched)
    };
    let (mut lo, mut hi) = (1e-9, 1.0 - 1e-9);
    if cfg.goal_pkr <= pkr_at(lo) || cfg.goal_pkr >= pkr_at(hi) {
        return Err(VppError::Config(format!(
            "goal keep ratio {} is outside the reachable range ({:.4}, {:.4})",
            cfg.goal_pkr,
            pkr_at(lo),
            pkr_at(hi)
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if pkr_at(mid) < cfg.goal_pkr {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let rho = 0.5 * (lo + hi);
    let sched = SparsitySchedule::geometric(cfg.kappa_init, topk_fraction, rho, stages);
    sched.validate()?;
    if cfg.mapsm().is_some() {
        let d_topk = realized_topk_density(n, topk_fraction);
        if sched.sm_targets[0] > d_topk + 1e-12 {
            return Err(VppError::Config(format!(
                "first stage target {:.4} exceeds the early stage's density {d_topk:.4}",
                sched.sm_targets[0]
            )));
        }
    }
    Ok(sched)
}

/// Keys accepted by the text format and `--set` overrides.
const KEYS: &[&str] = &[
    "seed",
    "goal_pkr",
    "mapsm_index",
    "sm_indices",
    "ref_layer",
    "tau",
    "kappa_init",
    "lambda_d",
    "layers",
    "embed_dim",
    "heads",
    "mlp_ratio",
    "grid",
    "patch_size",
    "train_steps",
    "lr",
    "momentum",
    "scale_map",
    "scale_sm",
    "task_weight",
];

impl PipelineConfig {
    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| VppError::Parse(format!("bad value {value:?} for {key}")))
        }
        match key {
            "seed" => self.seed = num(key, value)?,
            "goal_pkr" => self.goal_pkr = num(key, value)?,
            "mapsm_index" => self.mapsm_index = num(key, value)?,
            "sm_indices" => {
                self.sm_indices = if value == "none" || value.is_empty() {
                    vec![]
                } else {
                    value
                        .split(',')
                        .map(|s| num("sm_indices", s.trim()))
                        .collect::<Result<Vec<usize>>>()?
                };
            }
            "ref_layer" => self.ref_layer = num(key, value)?,
            "tau" => self.tau = num(key, value)?,
            "kappa_init" => self.kappa_init = num(key, value)?,
            "lambda_d" => {
                self.lambda_d = if value == "auto" { None } else { Some(num(key, value)?) };
            }
            "layers" => self.vit.layers = num(key, value)?,
            "embed_dim" => self.vit.embed_dim = num(key, value)?,
            "heads" => self.vit.heads = num(key, value)?,
            "mlp_ratio" => self.vit.mlp_ratio = num(key, value)?,
            "grid" => {
                let (r, c) = value
                    .split_once('x')
                    .ok_or_else(|| VppError::Parse(format!("grid must be RxC, got {value:?}")))?;
                self.vit.grid = (num("grid", r.trim())?, num("grid", c.trim())?);
            }
            "patch_size" => self.vit.patch_size = num(key, value)?,
            "train_steps" => self.train_steps = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "scale_map" => self.loss_weights.scale_map = num(key, value)?,
            "scale_sm" => self.loss_weights.scale_sm = num(key, value)?,
            "task_weight" => self.loss_weights.task = num(key, value)?,
            other => {
                return Err(VppError::Config(format!(
                    "unknown configuration key {other:?} (known: {})",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Parses the text format: one `key=value` per line, `#` comments.
    pub fn from_config_str(text: &str) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                VppError::Parse(format!("line {}: expected key=value, got {line:?}", lineno + 1))
            })?;
            cfg.apply_override(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn to_config_string(&self) -> String {
        let sm = if self.sm_indices.is_empty() {
            "none".to_string()
        } else {
            self.sm_indices.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
        };
        let lambda = match self.lambda_d {
            None => "auto".to_string(),
            Some(v) => v.to_string(),
        };
        format!(
            "seed={}\ngoal_pkr={}\nmapsm_index={}\nsm_indices={sm}\nref_layer={}\n\
             tau={}\nkappa_init={}\nlambda_d={lambda}\n\
             layers={}\nembed_dim={}\nheads={}\nmlp_ratio={}\ngrid={}x{}\npatch_size={}\n\
             train_steps={}\nlr={}\nmomentum={}\nscale_map={}\nscale_sm={}\ntask_weight={}\n",
            self.seed,
            self.goal_pkr,
            self.mapsm_index,
            self.ref_layer,
            self.tau,
            self.kappa_init,
            self.vit.layers,
            self.vit.embed_dim,
            self.vit.heads,
            self.vit.mlp_ratio,
            self.vit.grid.0,
            self.vit.grid.1,
            self.vit.patch_size,
            self.train_steps,
            self.lr,
            self.momentum,
            self.loss_weights.scale_map,
            self.loss_weights.scale_sm,
            self.loss_weights.task,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates_and_hits_both_presets() {
        for goal in [0.55, 0.40] {
            let cfg = PipelineConfig { goal_pkr: goal, ..PipelineConfig::default() };
            cfg.validate().unwrap();
            let sched = resolve_schedule(&cfg).unwrap();
            assert!((analytic_pkr(&cfg, &sched) - goal).abs() < 1e-9, "goal {goal}");
            assert!(sched.rho > 0.0 && sched.rho < 1.0);
            assert!(sched.sm_targets.windows(2).all(|w| w[1] < w[0]));
            let d_topk = realized_topk_density(cfg.vit.tokens(), sched.topk_fraction);
            assert!(sched.sm_targets[0] <= d_topk);
        }
    }

    #[test]
    fn density_profile_steps_at_stage_boundaries() {
        let cfg = PipelineConfig::default();
        let sched = resolve_schedule(&cfg).unwrap();
        let profile = analytic_density_profile(&cfg, &sched);
        assert_eq!(profile.len(), 12);
        let d_topk = realized_topk_density(144, sched.topk_fraction);
        assert_eq!(profile[0], 1.0);
        assert_eq!(profile[1], d_topk);
        assert_eq!(profile[2], d_topk);
        for b in 3..6 {
            assert_eq!(profile[b], sched.sm_targets[0]);
        }
        for b in 6..9 {
            assert_eq!(profile[b], sched.sm_targets[1]);
        }
        for b in 9..12 {
            assert_eq!(profile[b], sched.sm_targets[2]);
        }
    }

    #[test]
    fn early_stage_only_solves_a_flat_profile() {
        let cfg = PipelineConfig { sm_indices: vec![], ..PipelineConfig::default() };
        let sched = resolve_schedule(&cfg).unwrap();
        assert!(sched.sm_targets.is_empty());
        let profile = analytic_density_profile(&cfg, &sched);
        assert_eq!(profile[0], 1.0);
        for b in 1..12 {
            assert_eq!(profile[b], profile[1], "profile is not flat after the stage");
        }
        // Cardinality quantization bounds the residual: one patch out of
        // N, over (L-1)/L of the layers.
        let quantum = (11.0 / 12.0) / 144.0;
        assert!((analytic_pkr(&cfg, &sched) - 0.55).abs() <= quantum);
    }

    #[test]
    fn image_only_configuration_solves_too() {
        let cfg = PipelineConfig { mapsm_index: 0, ..PipelineConfig::default() };
        let sched = resolve_schedule(&cfg).unwrap();
        assert!((analytic_pkr(&cfg, &sched) - 0.55).abs() < 1e-9);
        let profile = analytic_density_profile(&cfg, &sched);
        // Dense through the first selective stage's block.
        assert_eq!(profile[0], 1.0);
        assert_eq!(profile[1], 1.0);
        assert_eq!(profile[2], 1.0);
        assert_eq!(profile[3], sched.sm_targets[0]);
    }

    #[test]
    fn no_stages_is_inert_and_dense() {
        let cfg = PipelineConfig {
            mapsm_index: 0,
            sm_indices: vec![],
            ..PipelineConfig::default()
        };
        let sched = resolve_schedule(&cfg).unwrap();
        assert!(sched.sm_targets.is_empty());
        assert_eq!(analytic_pkr(&cfg, &sched), 1.0);
    }

    #[test]
    fn bad_configurations_are_rejected() {
        let base = PipelineConfig::default();
        let cases: Vec<PipelineConfig> = vec![
            PipelineConfig { mapsm_index: 3, ..base.clone() }, // not before first stage
            PipelineConfig { ref_layer: 1, ..base.clone() },   // not after mapping stage
            PipelineConfig { ref_layer: 13, ..base.clone() },
            PipelineConfig { sm_indices: vec![3, 3, 9], ..base.clone() },
            PipelineConfig { sm_indices: vec![3, 6, 12], ..base.clone() },
            PipelineConfig { goal_pkr: 0.5, ..base.clone() },
            PipelineConfig { tau: 0.0, ..base.clone() },
            PipelineConfig { kappa_init: 1.0, ..base.clone() },
            PipelineConfig { momentum: 1.0, ..base.clone() },
        ];
        for (i, cfg) in cases.iter().enumerate() {
            assert!(cfg.validate().is_err(), "case {i} unexpectedly validated");
        }
        let oversized = PipelineConfig { mapsm_index: 12, sm_indices: vec![], ..base };
        assert!(oversized.validate().is_err());
    }

    #[test]
    fn config_text_round_trips() {
        let mut cfg = PipelineConfig::default();
        cfg.seed = 42;
        cfg.goal_pkr = 0.40;
        cfg.sm_indices = vec![4, 8];
        cfg.lambda_d = Some(2.5);
        cfg.vit.grid = (8, 10);
        let text = cfg.to_config_string();
        let back = PipelineConfig::from_config_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn parser_handles_comments_overrides_and_rejects_junk() {
        let text = "# a comment\nseed=7\nsm_indices = 2, 5 # inline comment\ngrid=6x9\n";
        let cfg = PipelineConfig::from_config_str(text).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.sm_indices, vec![2, 5]);
        assert_eq!(cfg.vit.grid, (6, 9));

        assert!(PipelineConfig::from_config_str("nonsense=1\n").is_err());
        assert!(PipelineConfig::from_config_str("seed\n").is_err());
        assert!(PipelineConfig::from_config_str("seed=abc\n").is_err());
        assert!(PipelineConfig::from_config_str("grid=6\n").is_err());

        let mut cfg = PipelineConfig::default();
        cfg.apply_override("sm_indices", "none").unwrap();
        assert!(cfg.sm_indices.is_empty());
        cfg.apply_override("lambda_d", "auto").unwrap();
        assert_eq!(cfg.lambda_d, None);
        assert_eq!(cfg.lambda(), 3.2); // 0.1 * embed_dim
    }
}
