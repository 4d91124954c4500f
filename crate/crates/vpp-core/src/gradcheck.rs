//! Finite-difference oracle for every analytic gradient in the crate.
//!
//! The training loop is only trustworthy if its hand-derived gradients are
//! right, so this module re-derives them numerically and compares. Central
//! differences `(f(x + h e_i) - f(x - h e_i)) / 2h` are exact to `O(h^2)`
//! for smooth `f`; the objective here is smooth as long as the Gumbel
//! draws are frozen — the same noise must be replayed for both
//! perturbations, otherwise the difference measures noise, not slope.
//! Hard one-hot decisions are excluded by construction: checks target the
//! relaxed surrogate objective, whose exact gradient the training code
//! computes (the straight-through hard path is non-differentiable by
//! design and has no correct gradient to compare against).

use crate::error::{Result, VppError};
use crate::gumbel::GumbelConfig;
use crate::heads::MlpHead;
use crate::losses::{
    loss_grads, surrogate_loss, ClassWeights, LossBatch, LossWeights, MapStep, SmStep,
};
use crate::mapsm::SparsitySchedule;
use crate::sm::SmHead;
use crate::tensor::{GumbelNoise, SeededRng};

/// Default relative-error tolerance for a pass.
pub const FD_TOLERANCE: f64 = 1e-4;
/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// One compared parameter.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub parameter: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    pub pass: bool,
}

/// All comparisons of one sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn all_pass(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }

    pub fn failures(&self) -> Vec<&GradCheckEntry> {
        self.entries.iter().filter(|e| !e.pass).collect()
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("parameter,analytic,numeric,rel_error,pass\n");
        for e in &self.entries {
            s.push_str(&format!(
                "{},{:.12e},{:.12e},{:.6e},{}\n",
                e.parameter, e.analytic, e.numeric, e.rel_error, e.pass
            ));
        }
        s
    }
}

/// Relative error with an absolute floor so near-zero pairs compare
/// sanely: `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Central-difference gradient of `f` at `theta`. `f` must be
/// deterministic — repeated evaluation at the same point must return the
/// same value — which for this crate means frozen Gumbel noise.
pub fn fd_gradient<F>(mut f: F, theta: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(VppError::Config(format!(
            "finite-difference step {h} outside [1e-7, 1e-3]"
        )));
    }
    let mut grad = Vec::with_capacity(theta.len());
    let mut point = theta.to_vec();
    for i in 0..theta.len() {
        point[i] = theta[i] + h;
        let plus = f(&point)?;
        point[i] = theta[i] - h;
        let minus = f(&point)?;
        point[i] = theta[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(VppError::Numerical(format!(
                "objective is non-finite near parameter {i}"
            )));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Compares an analytic gradient against its numeric counterpart entry by
/// entry, naming each parameter `prefix.field[k]` following the head's
/// parameter layout.
///
/// The relative error of each pair is floored at `tolerance` times the
/// gradient vector's RMS: components orders of magnitude below the
/// vector's own scale carry only finite-difference roundoff, and holding
/// them to a pure ratio test rejects exact gradients. Against the floor
/// they are still checked in absolute terms, so a genuinely wrong tiny
/// component fails as before.
pub fn compare(
    prefix: &str,
    layout: &[(&'static str, usize)],
    analytic: &[f64],
    numeric: &[f64],
    tolerance: f64,
) -> Result<Vec<GradCheckEntry>> {
    let total: usize = layout.iter().map(|(_, n)| n).sum();
    if analytic.len() != numeric.len() || analytic.len() != total {
        return Err(VppError::Shape(format!(
            "{} analytic vs {} numeric entries for a layout of {total}",
            analytic.len(),
            numeric.len()
        )));
    }
    let rms = (analytic.iter().map(|a| a * a).sum::<f64>() / total.max(1) as f64).sqrt();
    let floor = (tolerance * rms).max(1e-8);
    let mut entries = Vec::with_capacity(total);
    let mut at = 0usize;
    for (field, count) in layout {
        for k in 0..*count {
            let (a, n) = (analytic[at], numeric[at]);
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
            entries.push(GradCheckEntry {
                parameter: format!("{prefix}.{field}[{k}]"),
                analytic: a,
                numeric: n,
                rel_error: rel,
                pass: rel < tolerance,
            });
            at += 1;
        }
    }
    Ok(entries)
}

/// Ratio of finite-difference errors at steps `h` and `h/10`, measured in
/// the l2 norm against the analytic gradient. Central differences are
/// second order, so smooth objectives give a ratio near 100.
pub fn fd_convergence_ratio<F>(mut f: F, theta: &[f64], analytic: &[f64], h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let coarse = fd_gradient(&mut f, theta, h)?;
    let fine = fd_gradient(&mut f, theta, h / 10.0)?;
    let norm = |v: &[f64]| -> f64 {
        v.iter()
            .zip(analytic)
            .map(|(x, a)| (x - a) * (x - a))
            .sum::<f64>()
            .sqrt()
    };
    let denom = norm(&fine);
    if denom < 1e-14 {
        return Err(VppError::Numerical(
            "fine-step error is at the noise floor; convergence ratio is meaningless".into(),
        ));
    }
    Ok(norm(&coarse) / denom)
}

/// One randomly drawn check instance: a small batch, fresh heads, and a
/// schedule, everything the objective needs.
struct Instance {
    batch: LossBatch,
    map_head: MlpHead,
    sm_heads: Vec<SmHead>,
    sched: SparsitySchedule,
    weights: LossWeights,
    cw: ClassWeights,
    cfg: GumbelConfig,
}

fn random_instance(rng: &mut SeededRng) -> Instance {
    let e = [4, 6, 8][rng.next_below(3)];
    let labels = |rng: &mut SeededRng, n: usize| -> Vec<bool> {
        (0..n).map(|_| rng.next_f64() < 0.35).collect()
    };
    let n_map = 3 + rng.next_below(5);
    let n_sm0 = 3 + rng.next_below(4);
    let n_sm1 = 2 + rng.next_below(3);
    let batch = LossBatch {
        map: vec![MapStep {
            x_hat: rng.normal_matrix(n_map, e, 1.0),
            noise: GumbelNoise::sample_matrix(rng, n_map, 2),
            labels: labels(rng, n_map),
        }],
        sm: vec![
            SmStep {
                stage: 0,
                x: rng.normal_matrix(n_sm0, e, 1.0),
                noise: GumbelNoise::sample_matrix(rng, n_sm0, 2),
                labels: labels(rng, n_sm0),
                n_total: n_sm0 + rng.next_below(4),
            },
            SmStep {
                stage: 1,
                x: rng.normal_matrix(n_sm1, e, 1.0),
                noise: GumbelNoise::sample_matrix(rng, n_sm1, 2),
                labels: labels(rng, n_sm1),
                n_total: n_sm1 + rng.next_below(4),
            },
        ],
    };
    let map_head = MlpHead::new(e, rng);
    let rho = 0.5 + 0.3 * rng.next_f64();
    let sm_heads = vec![SmHead::new(3, rho, e, rng), SmHead::new(6, rho * rho, e, rng)];
    let mut cw = ClassWeights::new();
    cw.observe(0.2 + 0.3 * rng.next_f64());
    Instance {
        batch,
        map_head,
        sm_heads,
        sched: SparsitySchedule::geometric(0.5, 0.7, rho, 2),
        weights: LossWeights::default(),
        cw,
        cfg: GumbelConfig::default(),
    }
}

fn instance_loss(inst: &Instance, map_head: &MlpHead, sm_heads: &[SmHead]) -> Result<f64> {
    Ok(surrogate_loss(
        &inst.batch,
        map_head,
        sm_heads,
        &inst.sched,
        &inst.weights,
        &inst.cw,
        &inst.cfg,
    )?
    .total())
}

/// Sweeps `instances` random objective instances, finite-differencing the
/// full combined loss against every head parameter. Each instance checks
/// the mapping head and both stage heads — together the relaxed decision
/// path, both density penalties, the task term, and both MLP
/// architectures.
pub fn check_all(seed: u64, instances: usize, tolerance: f64) -> Result<GradCheckReport> {
    let rng = SeededRng::new(seed);
    let mut entries = Vec::new();
    for i in 0..instances {
        let mut inst_rng = rng.derive(i as u64);
        let inst = random_instance(&mut inst_rng);
        let (_, g_map, g_sm) = loss_grads(
            &inst.batch,
            &inst.map_head,
            &inst.sm_heads,
            &inst.sched,
            &inst.weights,
            &inst.cw,
            &inst.cfg,
        )?;

        let numeric_map = fd_gradient(
            |theta| {
                let mut head = inst.map_head.clone();
                head.set_from_flat(theta);
                instance_loss(&inst, &head, &inst.sm_heads)
            },
            &inst.map_head.to_flat(),
            FD_STEP,
        )?;
        entries.extend(compare(
            &format!("inst{i}.map"),
            &inst.map_head.param_layout(),
            &g_map.to_flat(),
            &numeric_map,
            tolerance,
        )?);

        for (l, head) in inst.sm_heads.iter().enumerate() {
            let numeric = fd_gradient(
                |theta| {
                    let mut heads = inst.sm_heads.clone();
                    heads[l].mlp.set_from_flat(theta);
                    instance_loss(&inst, &inst.map_head, &heads)
                },
                &head.mlp.to_flat(),
                FD_STEP,
            )?;
            entries.extend(compare(
                &format!("inst{i}.stage{l}"),
                &head.mlp.param_layout(),
                &g_sm[l].to_flat(),
                &numeric,
                tolerance,
            )?);
        }
    }
    Ok(GradCheckReport { entries, tolerance })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_has_exact_central_difference() {
        let grad = fd_gradient(|x| Ok(x[0] * x[0]), &[3.0], 1e-5).unwrap();
        assert!((grad[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let grad = fd_gradient(|_| Ok(7.25), &[1.0, -2.0, 0.5], 1e-5).unwrap();
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn step_bounds_and_non_finite_objectives_are_rejected() {
        assert!(fd_gradient(|x| Ok(x[0]), &[1.0], 1e-8).is_err());
        assert!(fd_gradient(|x| Ok(x[0]), &[1.0], 1e-2).is_err());
        let bad = fd_gradient(|x| Ok(1.0 / (x[0] - x[0])), &[1.0], 1e-5);
        assert!(matches!(bad, Err(VppError::Numerical(_))));
    }

    #[test]
    fn relative_error_uses_the_absolute_floor() {
        assert_eq!(rel_error(0.0, 0.0), 0.0);
        // Both tiny: floored denominator keeps the error small.
        assert!(rel_error(1e-12, -1e-12) < 1e-3);
        assert!((rel_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn sweep_of_random_instances_passes() {
        let report = check_all(97, 20, FD_TOLERANCE).unwrap();
        assert!(!report.entries.is_empty());
        assert!(
            report.all_pass(),
            "failures: {:?}",
            report
                .failures()
                .iter()
                .map(|e| format!("{} rel {}", e.parameter, e.rel_error))
                .collect::<Vec<_>>()
        );
        // 20 instances x 3 heads x 16 parameters.
        assert!(report.entries.len() >= 20 * 3 * 16);
    }

    #[test]
    fn corrupted_analytic_gradient_is_flagged() {
        let mut rng = SeededRng::new(99);
        let inst = random_instance(&mut rng);
        let (_, g_map, _) = loss_grads(
            &inst.batch,
            &inst.map_head,
            &inst.sm_heads,
            &inst.sched,
            &inst.weights,
            &inst.cw,
            &inst.cfg,
        )
        .unwrap();
        let numeric = fd_gradient(
            |theta| {
                let mut head = inst.map_head.clone();
                head.set_from_flat(theta);
                instance_loss(&inst, &head, &inst.sm_heads)
            },
            &inst.map_head.to_flat(),
            FD_STEP,
        )
        .unwrap();
        // Sign-flip the largest analytic entry.
        let mut corrupted = g_map.to_flat();
        let worst = (0..corrupted.len())
            .max_by(|&a, &b| corrupted[a].abs().partial_cmp(&corrupted[b].abs()).unwrap())
            .unwrap();
        corrupted[worst] = -corrupted[worst];
        let entries = compare(
            "map",
            &inst.map_head.param_layout(),
            &corrupted,
            &numeric,
            FD_TOLERANCE,
        )
        .unwrap();
        assert!(entries.iter().any(|e| !e.pass), "sign flip went unnoticed");
        // The honest gradient passes the same comparison.
        let honest = compare(
            "map",
            &inst.map_head.param_layout(),
            &g_map.to_flat(),
            &numeric,
            FD_TOLERANCE,
        )
        .unwrap();
        assert!(honest.iter().all(|e| e.pass));
    }

    #[test]
    fn zero_weights_give_zero_gradients_that_pass() {
        let mut rng = SeededRng::new(101);
        let mut inst = random_instance(&mut rng);
        inst.weights = LossWeights { task: 0.0, scale_map: 0.0, scale_sm: 0.0 };
        let (_, g_map, g_sm) = loss_grads(
            &inst.batch,
            &inst.map_head,
            &inst.sm_heads,
            &inst.sched,
            &inst.weights,
            &inst.cw,
            &inst.cfg,
        )
        .unwrap();
        assert!(g_map.to_flat().iter().all(|&g| g == 0.0));
        assert!(g_sm.iter().all(|g| g.to_flat().iter().all(|&v| v == 0.0)));
        let numeric = fd_gradient(
            |theta| {
                let mut head = inst.map_head.clone();
                head.set_from_flat(theta);
                instance_loss(&inst, &head, &inst.sm_heads)
            },
            &inst.map_head.to_flat(),
            FD_STEP,
        )
        .unwrap();
        let entries = compare(
            "map",
            &inst.map_head.param_layout(),
            &g_map.to_flat(),
            &numeric,
            FD_TOLERANCE,
        )
        .unwrap();
        assert!(entries.iter().all(|e| e.pass));
    }

    #[test]
    fn central_differences_converge_at_second_order() {
        let mut rng = SeededRng::new(103);
        let inst = random_instance(&mut rng);
        let (_, g_map, _) = loss_grads(
            &inst.batch,
            &inst.map_head,
            &inst.sm_heads,
            &inst.sched,
            &inst.weights,
            &inst.cw,
            &inst.cfg,
        )
        .unwrap();
        let ratio = fd_convergence_ratio(
            |theta| {
                let mut head = inst.map_head.clone();
                head.set_from_flat(theta);
                instance_loss(&inst, &head, &inst.sm_heads)
            },
            &inst.map_head.to_flat(),
            &g_map.to_flat(),
            1e-3,
        )
        .unwrap();
        assert!(
            (50.0..=200.0).contains(&ratio),
            "convergence ratio {ratio} is not second order"
        );
    }

    #[test]
    fn tight_single_instance_check_at_stricter_tolerance() {
        // One fixed instance against a 1e-5 bar — the combined relaxed
        // objective is smooth enough for an order tighter than the sweep.
        let report = check_all(105, 1, 1e-5).unwrap();
        assert!(
            report.all_pass(),
            "failures: {:?}",
            report.failures().iter().map(|e| e.parameter.clone()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn report_csv_lists_every_parameter() {
        let report = check_all(107, 1, FD_TOLERANCE).unwrap();
        let csv = report.csv();
        assert!(csv.starts_with("parameter,analytic,numeric,rel_error,pass\n"));
        assert_eq!(csv.lines().count(), report.entries.len() + 1);
        assert!(csv.contains("inst0.map.w1[0]"));
        assert!(csv.contains("inst0.stage1.b2[1]"));
    }
}
