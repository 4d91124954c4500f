//! Gumbel-softmax relaxations used by every pruning decision in the crate.
//!
//! The soft relaxation of a row of positive scores `pi` with temperature
//! `tau` and i.i.d. standard Gumbel noise `g` is
//!
//! ```text
//! soft_i = exp((ln(pi_i) * tau + g_i) / tau) / sum_j exp((ln(pi_j) * tau + g_j) / tau)
//!        = softmax(ln(pi) + g / tau)_i
//! ```
//!
//! computed here in the algebraically simplified right-hand form, which keeps
//! the noise-free case exactly equal to `pi` normalized per row for any
//! temperature. The hard variant snaps each row to a one-hot at the argmax of
//! the soft row; training treats the hard value as constant and routes
//! gradients through the soft row (straight-through), which is what
//! [`gumbel_soft_grad`] differentiates.
//!
//! Two conventions matter downstream and are fixed here once:
//! * noise stays enabled at inference (selection keeps its stochastic
//!   exploration; higher `tau` shrinks the noise influence since the noise
//!   enters as `g / tau`), and
//! * pruning heads emit raw two-class logits `z`, which enter the relaxation
//!   as positive scores `pi = exp(z)`, making the whole composition a
//!   softmax of `z + g / tau`. The `*_from_logits` entry points compute that
//!   directly without round-tripping through `exp`/`ln`.

use crate::error::{Result, VppError};
use crate::tensor::{GumbelNoise, Matrix};

/// Temperature and noise policy for the relaxations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GumbelConfig {
    /// Softmax temperature; the default of 10 keeps selections close to the
    /// noise-free argmax while remaining differentiable.
    pub tau: f64,
    /// When false the noise term is dropped entirely and both relaxations
    /// become deterministic. The pipeline keeps this `true` even at
    /// inference.
    pub noise_enabled: bool,
}

impl Default for GumbelConfig {
    fn default() -> Self {
        GumbelConfig { tau: 10.0, noise_enabled: true }
    }
}

impl GumbelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(VppError::Config(format!(
                "gumbel temperature must be positive and finite, got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

fn check_shapes(what: &str, pi: &Matrix, noise: &GumbelNoise) -> Result<()> {
    let nv = noise.values();
    if nv.rows() != pi.rows() || nv.cols() != pi.cols() {
        return Err(VppError::Shape(format!(
            "{what}: scores are {}x{} but noise is {}x{}",
            pi.rows(),
            pi.cols(),
            nv.rows(),
            nv.cols()
        )));
    }
    Ok(())
}

/// Per-row logits `ln(pi) + g / tau` shared by the soft and hard paths.
fn perturbed_logits(pi: &Matrix, noise: &GumbelNoise, cfg: &GumbelConfig) -> Result<Matrix> {
    cfg.validate()?;
    check_shapes("gumbel relaxation", pi, noise)?;
    let mut logits = Matrix::zeros(pi.rows(), pi.cols());
    for (i, (l, &p)) in logits.data_mut().iter_mut().zip(pi.data()).enumerate() {
        if !(p > 0.0) || !p.is_finite() {
            return Err(VppError::Domain(format!(
                "gumbel scores must be positive and finite, entry {i} is {p}"
            )));
        }
        let g = if cfg.noise_enabled { noise.values().data()[i] } else { 0.0 };
        *l = p.ln() + g / cfg.tau;
    }
    Ok(logits)
}

/// Soft relaxation: `softmax(ln(pi) + g / tau)` per row.
///
/// With zero (or disabled) noise this equals `pi` normalized per row,
/// exactly and independently of `tau`. Errors on non-positive scores and on
/// a score/noise shape mismatch.
pub fn gumbel_soft(pi: &Matrix, noise: &GumbelNoise, cfg: &GumbelConfig) -> Result<Matrix> {
    Ok(perturbed_logits(pi, noise, cfg)?.row_softmax())
}

/// Hard relaxation: a one-hot per row at the argmax of the soft row (ties
/// break to the lowest index). Returns `(hard, soft)` so callers can use the
/// hard decision forward and the soft row for straight-through gradients.
pub fn gumbel_hard(
    pi: &Matrix,
    noise: &GumbelNoise,
    cfg: &GumbelConfig,
) -> Result<(Matrix, Matrix)> {
    let soft = gumbel_soft(pi, noise, cfg)?;
    Ok((one_hot_rows(&soft), soft))
}

/// Soft relaxation straight from additive logits: `softmax(z + g / tau)`.
///
/// Equivalent to `gumbel_soft(exp(z), ...)` but immune to overflow/underflow
/// of the intermediate `exp`.
pub fn gumbel_soft_from_logits(
    z: &Matrix,
    noise: &GumbelNoise,
    cfg: &GumbelConfig,
) -> Result<Matrix> {
    cfg.validate()?;
    check_shapes("gumbel relaxation (logits)", z, noise)?;
    let mut logits = z.clone();
    if cfg.noise_enabled {
        logits.add_scaled_assign(noise.values(), 1.0 / cfg.tau)?;
    }
    Ok(logits.row_softmax())
}

/// Hard relaxation from additive logits; see [`gumbel_hard`].
pub fn gumbel_hard_from_logits(
    z: &Matrix,
    noise: &GumbelNoise,
    cfg: &GumbelConfig,
) -> Result<(Matrix, Matrix)> {
    let soft = gumbel_soft_from_logits(z, noise, cfg)?;
    Ok((one_hot_rows(&soft), soft))
}

fn one_hot_rows(soft: &Matrix) -> Matrix {
    let mut hard = Matrix::zeros(soft.rows(), soft.cols());
    for i in 0..soft.rows() {
        let row = soft.row(i);
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        hard.set(i, best, 1.0);
    }
    hard
}

/// Analytic gradient of the soft relaxation with respect to the positive
/// scores: given `upstream = dL/dsoft`, returns `dL/dpi` with
///
/// ```text
/// dL/dpi_j = soft_j * (upstream_j - <upstream, soft>) / pi_j
/// ```
///
/// per row (softmax Jacobian composed with `d ln(pi)/d pi = 1/pi`). The noise
/// is treated as a constant, which is exactly the reparameterization used in
/// training.
pub fn gumbel_soft_grad(
    pi: &Matrix,
    noise: &GumbelNoise,
    cfg: &GumbelConfig,
    upstream: &Matrix,
) -> Result<Matrix> {
    if upstream.rows() != pi.rows() || upstream.cols() != pi.cols() {
        return Err(VppError::Shape(format!(
            "upstream gradient is {}x{} but scores are {}x{}",
            upstream.rows(),
            upstream.cols(),
            pi.rows(),
            pi.cols()
        )));
    }
    let soft = gumbel_soft(pi, noise, cfg)?;
    let mut grad = Matrix::zeros(pi.rows(), pi.cols());
    for i in 0..pi.rows() {
        let s = soft.row(i);
        let u = upstream.row(i);
        let dot: f64 = s.iter().zip(u).map(|(a, b)| a * b).sum();
        let g = grad.row_mut(i);
        for j in 0..s.len() {
            g[j] = s[j] * (u[j] - dot) / pi.get(i, j);
        }
    }
    Ok(grad)
}

/// Same gradient in the logit domain: `dL/dz_j = soft_j * (upstream_j -
/// <upstream, soft>)` per row. Used by the pruning heads, whose parameters
/// sit behind `z`.
pub fn gumbel_soft_grad_from_logits(soft: &Matrix, upstream: &Matrix) -> Result<Matrix> {
    if upstream.rows() != soft.rows() || upstream.cols() != soft.cols() {
        return Err(VppError::Shape(format!(
            "upstream gradient is {}x{} but soft output is {}x{}",
            upstream.rows(),
            upstream.cols(),
            soft.rows(),
            soft.cols()
        )));
    }
    let mut grad = Matrix::zeros(soft.rows(), soft.cols());
    for i in 0..soft.rows() {
        let s = soft.row(i);
        let u = upstream.row(i);
        let dot: f64 = s.iter().zip(u).map(|(a, b)| a * b).sum();
        let g = grad.row_mut(i);
        for j in 0..s.len() {
            g[j] = s[j] * (u[j] - dot);
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{sample_gumbel, SeededRng};

    #[test]
    fn zero_noise_soft_equals_normalized_scores_for_any_temperature() {
        let pi = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 0.25, 0.5, 0.25]).unwrap();
        let noise = GumbelNoise::zeros(2, 3);
        for tau in [0.31, 1.0, 10.0, 250.0] {
            let cfg = GumbelConfig { tau, noise_enabled: true };
            let soft = gumbel_soft(&pi, &noise, &cfg).unwrap();
            // Row sums of pi: 6 and 1.
            let want =
                Matrix::from_vec(2, 3, vec![1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0, 0.25, 0.5, 0.25])
                    .unwrap();
            assert!(
                soft.max_abs_diff(&want) < 1e-12,
                "tau={tau} diff={}",
                soft.max_abs_diff(&want)
            );
        }
    }

    #[test]
    fn disabling_noise_matches_zero_noise() {
        let mut rng = SeededRng::new(2);
        let pi = Matrix::from_vec(1, 4, vec![0.5, 1.5, 2.5, 0.1]).unwrap();
        let noise = sample_gumbel(&mut rng, 4);
        let off = GumbelConfig { tau: 10.0, noise_enabled: false };
        let soft_off = gumbel_soft(&pi, &noise, &off).unwrap();
        let soft_zero =
            gumbel_soft(&pi, &GumbelNoise::zeros(1, 4), &GumbelConfig::default()).unwrap();
        assert!(soft_off.max_abs_diff(&soft_zero) < 1e-15);
    }

    #[test]
    fn logit_entry_point_matches_exp_of_logits() {
        let mut rng = SeededRng::new(4);
        let z = rng.normal_matrix(3, 2, 1.5);
        let noise = GumbelNoise::sample_matrix(&mut rng, 3, 2);
        let cfg = GumbelConfig::default();
        let mut pi = z.clone();
        pi.map_assign(f64::exp);
        let via_pi = gumbel_soft(&pi, &noise, &cfg).unwrap();
        let via_logits = gumbel_soft_from_logits(&z, &noise, &cfg).unwrap();
        assert!(via_pi.max_abs_diff(&via_logits) < 1e-12);
    }

    #[test]
    fn hard_rows_are_one_hot_at_the_soft_argmax() {
        let mut rng = SeededRng::new(6);
        let pi = Matrix::from_vec(4, 3, vec![1.0; 12]).unwrap();
        let noise = GumbelNoise::sample_matrix(&mut rng, 4, 3);
        let (hard, soft) = gumbel_hard(&pi, &noise, &GumbelConfig::default()).unwrap();
        for i in 0..4 {
            let row = hard.row(i);
            assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(row.iter().filter(|&&v| v == 0.0).count(), 2);
            let hot = row.iter().position(|&v| v == 1.0).unwrap();
            let soft_max = soft
                .row(i)
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(hot, soft_max);
        }
    }

    #[test]
    fn ties_break_to_the_lowest_index() {
        // Equal scores and zero noise give a uniform soft row; the hard row
        // must pick index 0.
        let pi = Matrix::from_vec(1, 3, vec![2.0, 2.0, 2.0]).unwrap();
        let (hard, _) =
            gumbel_hard(&pi, &GumbelNoise::zeros(1, 3), &GumbelConfig::default()).unwrap();
        assert_eq!(hard.row(0), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn selection_frequencies_follow_the_gumbel_argmax_law() {
        // For two classes, P(argmax = 0) = sigmoid(tau * ln(pi_0 / pi_1))
        // because the hard pick maximizes ln(pi) + g/tau, i.e. tau*ln(pi)+g.
        // With pi = [2, 1] and tau = 1 that is 2/3; with equal scores it is
        // 1/2 for any temperature.
        let mut rng = SeededRng::new(8);
        let trials = 40_000;

        let mut wins_equal = 0usize;
        let mut wins_biased = 0usize;
        let equal = Matrix::from_vec(1, 2, vec![1.0, 1.0]).unwrap();
        let biased = Matrix::from_vec(1, 2, vec![2.0, 1.0]).unwrap();
        let cfg_tau10 = GumbelConfig::default();
        let cfg_tau1 = GumbelConfig { tau: 1.0, noise_enabled: true };
        for _ in 0..trials {
            let noise = GumbelNoise::sample_matrix(&mut rng, 1, 2);
            let (h, _) = gumbel_hard(&equal, &noise, &cfg_tau10).unwrap();
            if h.get(0, 0) == 1.0 {
                wins_equal += 1;
            }
            let (h, _) = gumbel_hard(&biased, &noise, &cfg_tau1).unwrap();
            if h.get(0, 0) == 1.0 {
                wins_biased += 1;
            }
        }
        let f_equal = wins_equal as f64 / trials as f64;
        let f_biased = wins_biased as f64 / trials as f64;
        assert!((f_equal - 0.5).abs() < 0.01, "equal-score frequency {f_equal}");
        assert!((f_biased - 2.0 / 3.0).abs() < 0.01, "biased frequency {f_biased}");
    }

    #[test]
    fn higher_temperature_suppresses_noise_influence() {
        // With pi = [2, 1], class 0 wins with probability sigmoid(tau*ln 2):
        // ~0.667 at tau=1 but ~0.999 at tau=10.
        let mut rng = SeededRng::new(10);
        let pi = Matrix::from_vec(1, 2, vec![2.0, 1.0]).unwrap();
        let trials = 20_000;
        let mut wins = 0usize;
        for _ in 0..trials {
            let noise = GumbelNoise::sample_matrix(&mut rng, 1, 2);
            let (h, _) = gumbel_hard(&pi, &noise, &GumbelConfig::default()).unwrap();
            if h.get(0, 0) == 1.0 {
                wins += 1;
            }
        }
        let f = wins as f64 / trials as f64;
        assert!(f > 0.99, "tau=10 frequency {f}");
    }

    #[test]
    fn nonpositive_scores_are_a_domain_error() {
        let noise = GumbelNoise::zeros(1, 2);
        let cfg = GumbelConfig::default();
        let zero = Matrix::from_vec(1, 2, vec![0.0, 1.0]).unwrap();
        assert!(matches!(gumbel_soft(&zero, &noise, &cfg), Err(VppError::Domain(_))));
        let neg = Matrix::from_vec(1, 2, vec![-0.5, 1.0]).unwrap();
        assert!(matches!(gumbel_soft(&neg, &noise, &cfg), Err(VppError::Domain(_))));
    }

    #[test]
    fn shape_mismatch_between_scores_and_noise_is_rejected() {
        let pi = Matrix::from_vec(1, 3, vec![1.0, 1.0, 1.0]).unwrap();
        let noise = GumbelNoise::zeros(1, 2);
        assert!(matches!(
            gumbel_soft(&pi, &noise, &GumbelConfig::default()),
            Err(VppError::Shape(_))
        ));
    }

    #[test]
    fn analytic_score_gradient_matches_central_differences() {
        let mut rng = SeededRng::new(12);
        let cfg = GumbelConfig::default();
        for _ in 0..5 {
            let mut pi = Matrix::zeros(3, 4);
            for v in pi.data_mut() {
                *v = 0.2 + 2.8 * rng.next_f64();
            }
            let noise = GumbelNoise::sample_matrix(&mut rng, 3, 4);
            let upstream = rng.normal_matrix(3, 4, 1.0);

            let loss = |p: &Matrix| -> f64 {
                let soft = gumbel_soft(p, &noise, &cfg).unwrap();
                soft.data().iter().zip(upstream.data()).map(|(s, u)| s * u).sum()
            };
            let analytic = gumbel_soft_grad(&pi, &noise, &cfg, &upstream).unwrap();

            let h = 1e-6;
            for idx in 0..pi.data().len() {
                let mut plus = pi.clone();
                plus.data_mut()[idx] += h;
                let mut minus = pi.clone();
                minus.data_mut()[idx] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let a = analytic.data()[idx];
                let denom = a.abs().max(fd.abs()).max(1e-8);
                assert!(
                    ((a - fd) / denom).abs() < 1e-6,
                    "entry {idx}: analytic {a} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn logit_gradient_agrees_with_score_gradient_through_exp() {
        // dL/dz = dL/dpi * dpi/dz = dL/dpi * exp(z) = dL/dpi * pi.
        let mut rng = SeededRng::new(14);
        let z = rng.normal_matrix(2, 3, 1.0);
        let noise = GumbelNoise::sample_matrix(&mut rng, 2, 3);
        let upstream = rng.normal_matrix(2, 3, 1.0);
        let cfg = GumbelConfig::default();

        let mut pi = z.clone();
        pi.map_assign(f64::exp);
        let mut via_pi = gumbel_soft_grad(&pi, &noise, &cfg, &upstream).unwrap();
        via_pi.hadamard_assign(&pi).unwrap();

        let soft = gumbel_soft_from_logits(&z, &noise, &cfg).unwrap();
        let via_logits = gumbel_soft_grad_from_logits(&soft, &upstream).unwrap();
        assert!(via_pi.max_abs_diff(&via_logits) < 1e-12);
    }

    #[test]
    fn invalid_temperature_is_a_config_error() {
        let pi = Matrix::from_vec(1, 2, vec![1.0, 1.0]).unwrap();
        let noise = GumbelNoise::zeros(1, 2);
        for tau in [0.0, -1.0, f64::NAN, f64::INFINITY] {
            let cfg = GumbelConfig { tau, noise_enabled: true };
            assert!(matches!(gumbel_soft(&pi, &noise, &cfg), Err(VppError::Config(_))));
        }
    }
}
