//! Mapping-selective module: the early, temporally-informed pruning stage.
//!
//! At a shallow layer of frame `t`, per-patch features are too immature to
//! judge foreground-ness directly — but frame `t-1` already finished its
//! full forward pass and knows which of its patches mattered. This module
//! transfers that knowledge across time in four steps:
//!
//! 1. **similarity** — cosine similarities between the current shallow
//!    features and the previous frame's *retained* shallow features, plus a
//!    distance penalty `-lambda_d * d_grid` that prioritizes local
//!    associations (objects move a little, not across the image).
//! 2. **associate** — a hard Gumbel pick per current patch: a one-hot
//!    association matrix `A` (rows: current patches, columns: retained
//!    previous patches). Noise stays on to explore near-equivalent matches.
//! 3. **map_features** — `x_hat = A * x6_prev`: every current patch
//!    receives one *deep* (reference-layer) feature vector from its
//!    associated previous patch — mature evidence teleported forward.
//! 4. **score_and_mask** — a small MLP scores `x_hat`, the soft Gumbel
//!    keep-probability `p` is read off, and the mask keeps exactly the
//!    top `ceil(topk_fraction * N)` patches.
//!
//! The exact top-k cardinality is deliberate: this early stage controls
//! budget; the later selective modules do the dynamic sizing.

use crate::error::{Result, VppError};
use crate::gumbel::{
    gumbel_hard_from_logits, gumbel_soft_from_logits, GumbelConfig,
};
use crate::heads::{MlpCache, MlpHead, KEEP};
use crate::tensor::{GumbelNoise, Matrix, SeededRng};
use crate::vit::{PatchFeatures, PruneMask};

/// Scoring head of the mapping-selective module; shares the two-layer
/// `E -> E/2 -> 2` architecture with the per-stage selective heads.
pub type MapSmHead = MlpHead;

/// What frame `t-1` leaves behind for frame `t`: shallow features and
/// reference-layer features of the patches that survived to the reference
/// depth, plus the mask that selected them.
#[derive(Debug, Clone)]
pub struct TemporalState {
    /// Shallow (mapping-layer) features of frame `t-1`, restricted to the
    /// patches retained by `m_ref_prev`.
    pub x1_prev: PatchFeatures,
    /// Reference-layer (deep) features of frame `t-1`, same restriction.
    pub x6_prev: PatchFeatures,
    /// The reference-depth mask of frame `t-1` that did the restricting.
    pub m_ref_prev: PruneMask,
}

impl TemporalState {
    pub fn validate(&self) -> Result<()> {
        let keep = self.m_ref_prev.keep_ids();
        if self.x6_prev.active_ids != keep || self.x1_prev.active_ids != keep {
            return Err(VppError::Shape(
                "temporal state features do not match the reference mask's keep set".into(),
            ));
        }
        if self.x1_prev.frame != self.x6_prev.frame || self.x1_prev.frame != self.m_ref_prev.frame
        {
            return Err(VppError::Shape(
                "temporal state mixes features from different frames".into(),
            ));
        }
        Ok(())
    }

    pub fn retained(&self) -> usize {
        self.x6_prev.n_active()
    }
}

/// Additive penalty `-lambda_d * d_grid(i, j)` between current patch `i`
/// and retained previous patch `j`, Euclidean distance in patch-grid
/// coordinates. Zero on same-cell pairs, nonpositive everywhere.
#[derive(Debug, Clone)]
pub struct DistancePenalty {
    pub lambda_d: f64,
    /// `N_t x N'_{t-1}` penalty matrix.
    pub phi_dist: Matrix,
}

impl DistancePenalty {
    /// Default penalty weight for a given embedding width: scale-matched to
    /// the cosine similarity term so locality meaningfully competes with
    /// appearance.
    pub fn default_lambda(embed_dim: usize) -> f64 {
        0.1 * embed_dim as f64
    }

    /// Builds the penalty between the active coordinates of `x1_t` (rows)
    /// and of the retained previous patches (columns).
    pub fn build(x1_t: &PatchFeatures, state: &TemporalState, lambda_d: f64) -> Result<DistancePenalty> {
        if lambda_d < 0.0 {
            return Err(VppError::Config(format!("lambda_d must be nonnegative, got {lambda_d}")));
        }
        let rows = x1_t.coords();
        let cols = state.x1_prev.coords();
        let mut phi_dist = Matrix::zeros(rows.len(), cols.len());
        for (i, &(ri, ci)) in rows.iter().enumerate() {
            let row = phi_dist.row_mut(i);
            for (j, &(rj, cj)) in cols.iter().enumerate() {
                let dr = ri as f64 - rj as f64;
                let dc = ci as f64 - cj as f64;
                row[j] = -lambda_d * (dr * dr + dc * dc).sqrt();
            }
        }
        Ok(DistancePenalty { lambda_d, phi_dist })
    }
}

/// One-hot association: row `i` selects which retained previous patch hands
/// its features to current patch `i`.
#[derive(Debug, Clone)]
pub struct AssociationMatrix {
    /// Binary `N_t x N'_{t-1}` matrix, each row exactly one-hot.
    pub a: Matrix,
}

impl AssociationMatrix {
    /// Column index selected by each row.
    pub fn selected(&self) -> Vec<usize> {
        (0..self.a.rows())
            .map(|i| self.a.row(i).iter().position(|&v| v == 1.0).expect("one-hot row"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..self.a.rows() {
            let ones = self.a.row(i).iter().filter(|&&v| v == 1.0).count();
            let zeros = self.a.row(i).iter().filter(|&&v| v == 0.0).count();
            if ones != 1 || ones + zeros != self.a.cols() {
                return Err(VppError::Domain(format!("association row {i} is not one-hot")));
            }
        }
        Ok(())
    }
}

/// Density targets for the whole pruning stack.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsitySchedule {
    /// Target mean of the mapping stage's keep probabilities.
    pub kappa_init: f64,
    /// Fraction of patches the mapping stage keeps (exact top-k).
    pub topk_fraction: f64,
    /// Geometric base of the per-stage targets.
    pub rho: f64,
    /// Per-stage absolute density targets `[rho, rho^2, rho^3, ...]`, one
    /// per selective stage in depth order.
    pub sm_targets: Vec<f64>,
}

impl SparsitySchedule {
    /// Geometric schedule over `stages` selective modules.
    pub fn geometric(kappa_init: f64, topk_fraction: f64, rho: f64, stages: usize) -> SparsitySchedule {
        let sm_targets = (1..=stages).map(|k| rho.powi(k as i32)).collect();
        SparsitySchedule { kappa_init, topk_fraction, rho, sm_targets }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kappa_init > 0.0 && self.kappa_init < 1.0) {
            return Err(VppError::Config(format!(
                "kappa_init must be in (0,1), got {}",
                self.kappa_init
            )));
        }
        if !(self.topk_fraction > 0.0 && self.topk_fraction <= 1.0) {
            return Err(VppError::Config(format!(
                "topk_fraction must be in (0,1], got {}",
                self.topk_fraction
            )));
        }
        if !self.sm_targets.is_empty() {
            if !(self.rho > 0.0 && self.rho < 1.0) {
                return Err(VppError::Config(format!("rho must be in (0,1), got {}", self.rho)));
            }
            for pair in self.sm_targets.windows(2) {
                if pair[1] >= pair[0] {
                    return Err(VppError::Config(
                        "per-stage density targets must be strictly decreasing".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Similarity between current shallow features and the retained previous
/// shallow features: rows are L2-normalized, so the dot products are
/// cosines in `[-1, 1]`, then the distance penalty is added. Shape
/// `N_t x N'_{t-1}`.
pub fn similarity(
    x1_t: &PatchFeatures,
    state: &TemporalState,
    pen: &DistancePenalty,
) -> Result<Matrix> {
    state.validate()?;
    if state.retained() == 0 {
        return Err(VppError::Domain("no reference patches retained from the previous frame".into()));
    }
    if x1_t.tokens.cols() != state.x1_prev.tokens.cols() {
        return Err(VppError::Shape(format!(
            "embedding width mismatch: {} vs {}",
            x1_t.tokens.cols(),
            state.x1_prev.tokens.cols()
        )));
    }
    let mut phi = x1_t
        .tokens
        .l2_normalize_rows()
        .matmul_nt(&state.x1_prev.tokens.l2_normalize_rows())?;
    if phi.rows() != pen.phi_dist.rows() || phi.cols() != pen.phi_dist.cols() {
        return Err(VppError::Shape(format!(
            "distance penalty is {}x{} but similarities are {}x{}",
            pen.phi_dist.rows(),
            pen.phi_dist.cols(),
            phi.rows(),
            phi.cols()
        )));
    }
    phi.add_assign(&pen.phi_dist)?;
    Ok(phi)
}

/// Hard Gumbel pick over each similarity row (softmax-logit form, i.e. the
/// similarities act as log-scores). Noise is kept on in inference so
/// near-tied associations are explored rather than frozen.
pub fn associate(phi: &Matrix, noise: &GumbelNoise, cfg: &GumbelConfig) -> Result<AssociationMatrix> {
    if !phi.is_finite() {
        return Err(VppError::Numerical("similarity matrix contains non-finite entries".into()));
    }
    let (hard, _) = gumbel_hard_from_logits(phi, noise, cfg)?;
    Ok(AssociationMatrix { a: hard })
}

/// `x_hat = A * x6_prev`: each current patch receives the reference-layer
/// feature vector of its associated retained patch. Because rows are
/// one-hot this is a row gather; the result carries the *current* frame's
/// patch identity (`like`), with the depth of the donor features.
pub fn map_features(
    assoc: &AssociationMatrix,
    state: &TemporalState,
    like: &PatchFeatures,
) -> Result<PatchFeatures> {
    if assoc.a.cols() != state.retained() {
        return Err(VppError::Shape(format!(
            "association has {} columns but {} previous patches are retained",
            assoc.a.cols(),
            state.retained()
        )));
    }
    if assoc.a.rows() != like.n_active() {
        return Err(VppError::Shape(format!(
            "association has {} rows but the current frame has {} active patches",
            assoc.a.rows(),
            like.n_active()
        )));
    }
    assoc.validate()?;
    let tokens = state.x6_prev.tokens.gather_rows(&assoc.selected())?;
    Ok(PatchFeatures {
        frame: like.frame,
        layer: state.x6_prev.layer,
        tokens,
        active_ids: like.active_ids.clone(),
        grid: like.grid,
    })
}

/// Everything the training step needs to differentiate one mapping-stage
/// application: head input, hidden activations, the soft relaxation row per
/// patch, and the frozen noise that produced it.
#[derive(Debug, Clone)]
pub struct MapSmCache {
    pub mlp_cache: MlpCache,
    /// `N x 2` soft Gumbel rows over (keep, drop).
    pub soft: Matrix,
    pub noise: GumbelNoise,
    /// Keep-probabilities, the `KEEP` column of `soft`.
    pub p: Vec<f64>,
}

/// Scores mapped features and emits the exact-cardinality early mask:
/// `p` is the per-patch soft keep probability, and the mask keeps the top
/// `ceil(topk_fraction * N)` patches by `p` (ties to the lower index).
pub fn score_and_mask(
    x_hat: &PatchFeatures,
    head: &MapSmHead,
    sched: &SparsitySchedule,
    cfg: &GumbelConfig,
    rng: &mut SeededRng,
) -> Result<(Vec<f64>, PruneMask, MapSmCache)> {
    sched.validate()?;
    let n = x_hat.n_active();
    if sched.topk_fraction * (n as f64) < 1.0 {
        return Err(VppError::Domain(format!(
            "top-k fraction {} of {n} patches selects no patch",
            sched.topk_fraction
        )));
    }
    let (z, mlp_cache) = head.forward(&x_hat.tokens)?;
    let noise = GumbelNoise::sample_matrix(rng, n, 2);
    let soft = gumbel_soft_from_logits(&z, &noise, cfg)?;
    let p: Vec<f64> = (0..n).map(|i| soft.get(i, KEEP)).collect();

    let k = (sched.topk_fraction * n as f64).ceil() as usize;
    // Stable selection of the k largest: sort by descending p, index
    // ascending on ties.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap().then(a.cmp(&b)));
    let mut keep_ids: Vec<usize> = order[..k].iter().map(|&pos| x_hat.active_ids[pos]).collect();
    keep_ids.sort_unstable();
    let mask = PruneMask::from_keep_ids(x_hat.layer, x_hat.frame, x_hat.n_total(), &keep_ids);
    let cache = MapSmCache { mlp_cache, soft, noise, p: p.clone() };
    Ok((p, mask, cache))
}

/// Output of one full mapping-stage application.
#[derive(Debug, Clone)]
pub struct MapSmOutput {
    pub mask: PruneMask,
    /// Per-patch keep probabilities, aligned with `x1_t.active_ids`.
    pub p: Vec<f64>,
    /// Mapped reference-layer features that were scored.
    pub x_hat: PatchFeatures,
    pub cache: MapSmCache,
}

/// The composed mapping stage: similarity, association, feature mapping,
/// scoring, top-k. The mask is stamped with `x1_t`'s layer and frame.
pub fn mapsm_forward(
    x1_t: &PatchFeatures,
    state: &TemporalState,
    pen: &DistancePenalty,
    head: &MapSmHead,
    sched: &SparsitySchedule,
    cfg: &GumbelConfig,
    rng: &mut SeededRng,
) -> Result<MapSmOutput> {
    let phi = similarity(x1_t, state, pen)?;
    let assoc_noise = GumbelNoise::sample_matrix(rng, phi.rows(), phi.cols());
    let assoc = associate(&phi, &assoc_noise, cfg)?;
    let x_hat = map_features(&assoc, state, x1_t)?;
    let (p, mut mask, cache) = score_and_mask(&x_hat, head, sched, cfg, rng)?;
    mask.layer = x1_t.layer;
    mask.frame = x1_t.frame;
    if std::env::var_os("VPP_MAP_DEBUG").is_some() {
        let retained = state.m_ref_prev.keep_ids();
        let donors: Vec<usize> = assoc.selected().iter().map(|&c| retained[c]).collect();
        let keeps: Vec<u8> = (0..x1_t.n_total()).map(|i| mask.keep[i] as u8).collect();
        eprintln!(
            "mapdbg frame={} donors={:?} p={:?} keep={:?}",
            x1_t.frame, donors, p, keeps
        );
    }
    Ok(MapSmOutput { mask, p, x_hat, cache })
}

/// Cost model of one mapping-stage application, in FLOPs: row
/// normalization, the similarity product, Gumbel association over the
/// score matrix, the scoring MLP, and the top-k pass.
pub fn mapsm_overhead_flops(n_t: usize, n_prev: usize, embed_dim: usize) -> f64 {
    let n = n_t as f64;
    let np = n_prev as f64;
    let e = embed_dim as f64;
    let h = (embed_dim / 2) as f64;
    let normalize = 3.0 * (n + np) * e;
    let similarity = 2.0 * n * np * e;
    let association = 5.0 * n * np;
    let head = 2.0 * n * e * h + 2.0 * n * h * 2.0;
    let topk = n * (n.log2().max(1.0));
    normalize + similarity + association + head + topk
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Dense temporal state over a `grid` with the given feature matrices.
    fn state_from(
        x1: Matrix,
        x6: Matrix,
        keep_ids: &[usize],
        grid: (usize, usize),
    ) -> TemporalState {
        let n = grid.0 * grid.1;
        let dense1 = PatchFeatures::dense(0, 1, x1, grid).unwrap();
        let dense6 = PatchFeatures::dense(0, 6, x6, grid).unwrap();
        TemporalState {
            x1_prev: dense1.gather(keep_ids).unwrap(),
            x6_prev: dense6.gather(keep_ids).unwrap(),
            m_ref_prev: PruneMask::from_keep_ids(6, 0, n, keep_ids),
        }
    }

    fn current(x1: Matrix, grid: (usize, usize)) -> PatchFeatures {
        let mut f = PatchFeatures::dense(0, 1, x1, grid).unwrap();
        f.frame = 1;
        f
    }

    #[test]
    fn matching_row_is_the_similarity_maximum() {
        // Current patch 0 equals retained previous patch 1 exactly; other
        // features are orthogonal. With lambda_d = 0 the (0, 1) entry is
        // the row maximum and equals 1 after normalization.
        let e = 4;
        let x1_prev = Matrix::from_rows(&[
            vec![0.0, 2.0, 0.0, 0.0],
            vec![3.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 5.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
        ])
        .unwrap();
        let state = state_from(x1_prev.clone(), x1_prev.clone(), &[0, 1, 2, 3], (2, 2));
        let x1_t = current(
            Matrix::from_rows(&[
                vec![6.0, 0.0, 0.0, 0.0], // same direction as prev row 1
                vec![0.0, 0.0, 0.0, 2.0],
                vec![0.0, 1.0, 0.0, 0.0],
                vec![0.0, 0.0, 4.0, 0.0],
            ])
            .unwrap(),
            (2, 2),
        );
        assert_eq!(e, 4);
        let pen = DistancePenalty::build(&x1_t, &state, 0.0).unwrap();
        let phi = similarity(&x1_t, &state, &pen).unwrap();
        assert!((phi.get(0, 1) - 1.0).abs() < 1e-12);
        for j in [0, 2, 3] {
            assert!(phi.get(0, j).abs() < 1e-12);
        }
    }

    #[test]
    fn orthonormal_features_give_a_zero_one_correspondence() {
        let eye = {
            let mut m = Matrix::zeros(4, 4);
            for i in 0..4 {
                m.set(i, i, 1.0);
            }
            m
        };
        let state = state_from(eye.clone(), eye.clone(), &[0, 1, 2, 3], (2, 2));
        // Current features are the same basis vectors, permuted.
        let perm = eye.gather_rows(&[2, 0, 3, 1]).unwrap();
        let x1_t = current(perm, (2, 2));
        let pen = DistancePenalty::build(&x1_t, &state, 0.0).unwrap();
        let phi = similarity(&x1_t, &state, &pen).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let want = if [2, 0, 3, 1][i] == j { 1.0 } else { 0.0 };
                assert!((phi.get(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn similarity_matches_a_naive_loop_with_penalty() {
        let mut rng = SeededRng::new(31);
        let x1_prev = rng.normal_matrix(6, 5, 1.0);
        let x6_prev = rng.normal_matrix(6, 5, 1.0);
        let keep = [0, 2, 3, 5];
        let state = state_from(x1_prev.clone(), x6_prev, &keep, (2, 3));
        let x1_t = current(rng.normal_matrix(6, 5, 1.0), (2, 3));
        let lambda = 0.7;
        let pen = DistancePenalty::build(&x1_t, &state, lambda).unwrap();
        let phi = similarity(&x1_t, &state, &pen).unwrap();

        let norm = |row: &[f64]| -> Vec<f64> {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter().map(|v| v / n).collect()
        };
        for i in 0..6 {
            let qi = norm(x1_t.tokens.row(i));
            let (ri, ci) = (i / 3, i % 3);
            for (j, &prev_id) in keep.iter().enumerate() {
                let pj = norm(x1_prev.row(prev_id));
                let dot: f64 = qi.iter().zip(&pj).map(|(a, b)| a * b).sum();
                let (rj, cj) = (prev_id / 3, prev_id % 3);
                let d = (((ri as f64 - rj as f64).powi(2)) + ((ci as f64 - cj as f64).powi(2)))
                    .sqrt();
                let want = dot - lambda * d;
                assert!(
                    (phi.get(i, j) - want).abs() < 1e-12,
                    "entry ({i},{j}): {} vs {}",
                    phi.get(i, j),
                    want
                );
            }
        }
    }

    #[test]
    fn distance_penalty_is_zero_on_same_cell_and_nonpositive() {
        let mut rng = SeededRng::new(33);
        let x = rng.normal_matrix(6, 4, 1.0);
        let state = state_from(x.clone(), x.clone(), &[1, 4], (2, 3));
        let x1_t = current(rng.normal_matrix(6, 4, 1.0), (2, 3));
        let pen = DistancePenalty::build(&x1_t, &state, 2.0).unwrap();
        assert_eq!(pen.phi_dist.rows(), 6);
        assert_eq!(pen.phi_dist.cols(), 2);
        // Row 1 aligns with retained patch 1 (column 0), row 4 with
        // retained patch 4 (column 1).
        assert_eq!(pen.phi_dist.get(1, 0), 0.0);
        assert_eq!(pen.phi_dist.get(4, 1), 0.0);
        assert!(pen.phi_dist.data().iter().all(|&v| v <= 0.0));
        assert!(DistancePenalty::build(&x1_t, &state, -0.1).is_err());
    }

    #[test]
    fn empty_retained_set_is_rejected() {
        let mut rng = SeededRng::new(35);
        let x = rng.normal_matrix(4, 3, 1.0);
        let dense = PatchFeatures::dense(0, 1, x, (2, 2)).unwrap();
        let empty = dense.gather(&[]).unwrap();
        let state = TemporalState {
            x1_prev: empty.clone(),
            x6_prev: empty,
            m_ref_prev: PruneMask::from_keep_ids(6, 0, 4, &[]),
        };
        let x1_t = current(rng.normal_matrix(4, 3, 1.0), (2, 2));
        let pen = DistancePenalty { lambda_d: 0.0, phi_dist: Matrix::zeros(4, 0) };
        assert!(matches!(similarity(&x1_t, &state, &pen), Err(VppError::Domain(_))));
    }

    #[test]
    fn noise_free_association_is_the_row_argmax() {
        let phi = Matrix::from_rows(&[
            vec![0.1, 0.9, -0.3],
            vec![2.0, 1.9, 1.95],
            vec![-1.0, -0.5, -0.2],
        ])
        .unwrap();
        let cfg = GumbelConfig { tau: 10.0, noise_enabled: false };
        let assoc = associate(&phi, &GumbelNoise::zeros(3, 3), &cfg).unwrap();
        assoc.validate().unwrap();
        assert_eq!(assoc.selected(), vec![1, 0, 2]);
    }

    #[test]
    fn large_margin_associations_are_stable_across_seeds() {
        // Margin 5 over tau = 10 noise (noise / tau is at most ~2.8) can
        // never flip the argmax... margin * tau = 50 vs max noise gap ~31.
        let phi = Matrix::from_rows(&[vec![5.0, 0.0, -1.0]]).unwrap();
        let cfg = GumbelConfig::default();
        for seed in 0..1000 {
            let mut rng = SeededRng::new(seed);
            let noise = GumbelNoise::sample_matrix(&mut rng, 1, 3);
            let assoc = associate(&phi, &noise, &cfg).unwrap();
            assert_eq!(assoc.selected(), vec![0], "seed {seed} flipped the association");
        }
    }

    #[test]
    fn tied_associations_split_evenly() {
        let phi = Matrix::from_rows(&[vec![0.4, 0.4]]).unwrap();
        let cfg = GumbelConfig { tau: 1.0, noise_enabled: true };
        let mut rng = SeededRng::new(37);
        let trials = 10_000;
        let mut first = 0usize;
        for _ in 0..trials {
            let noise = GumbelNoise::sample_matrix(&mut rng, 1, 2);
            if associate(&phi, &noise, &cfg).unwrap().selected()[0] == 0 {
                first += 1;
            }
        }
        let f = first as f64 / trials as f64;
        assert!((f - 0.5).abs() < 0.02, "frequency {f}");
    }

    #[test]
    fn identity_association_returns_the_retained_features() {
        let mut rng = SeededRng::new(39);
        let x6 = rng.normal_matrix(6, 4, 1.0);
        let keep = [1, 2, 5];
        let state = state_from(rng.normal_matrix(6, 4, 1.0), x6.clone(), &keep, (2, 3));
        // Square identity: current frame pruned to the same three patches.
        let x1_t = current(rng.normal_matrix(6, 4, 1.0), (2, 3)).gather(&keep).unwrap();
        let mut eye = Matrix::zeros(3, 3);
        for i in 0..3 {
            eye.set(i, i, 1.0);
        }
        let mapped = map_features(&AssociationMatrix { a: eye }, &state, &x1_t).unwrap();
        for (row, &id) in keep.iter().enumerate() {
            assert_eq!(mapped.tokens.row(row), x6.row(id));
        }
    }

    #[test]
    fn broadcast_association_repeats_the_first_retained_feature() {
        let mut rng = SeededRng::new(41);
        let x6 = rng.normal_matrix(4, 3, 1.0);
        let state = state_from(rng.normal_matrix(4, 3, 1.0), x6.clone(), &[2, 3], (2, 2));
        let x1_t = current(rng.normal_matrix(4, 3, 1.0), (2, 2));
        let mut a = Matrix::zeros(4, 2);
        for i in 0..4 {
            a.set(i, 0, 1.0);
        }
        let mapped = map_features(&AssociationMatrix { a }, &state, &x1_t).unwrap();
        for i in 0..4 {
            assert_eq!(mapped.tokens.row(i), x6.row(2));
        }
    }

    #[test]
    fn random_one_hot_association_equals_an_index_gather() {
        let mut rng = SeededRng::new(43);
        let x6 = rng.normal_matrix(9, 5, 1.0);
        let keep: Vec<usize> = vec![0, 3, 4, 7, 8];
        let state = state_from(rng.normal_matrix(9, 5, 1.0), x6.clone(), &keep, (3, 3));
        let x1_t = current(rng.normal_matrix(9, 5, 1.0), (3, 3));
        let mut a = Matrix::zeros(9, 5);
        let mut picks = Vec::new();
        for i in 0..9 {
            let j = rng.next_below(5);
            a.set(i, j, 1.0);
            picks.push(j);
        }
        let mapped = map_features(&AssociationMatrix { a }, &state, &x1_t).unwrap();
        for i in 0..9 {
            assert_eq!(mapped.tokens.row(i), x6.row(keep[picks[i]]), "row {i}");
        }
        assert_eq!(mapped.active_ids, x1_t.active_ids);
    }

    #[test]
    fn map_features_rejects_mismatched_shapes() {
        let mut rng = SeededRng::new(45);
        let x6 = rng.normal_matrix(4, 3, 1.0);
        let state = state_from(rng.normal_matrix(4, 3, 1.0), x6, &[0, 1], (2, 2));
        let x1_t = current(rng.normal_matrix(4, 3, 1.0), (2, 2));
        let wide = AssociationMatrix { a: Matrix::zeros(4, 3) };
        assert!(map_features(&wide, &state, &x1_t).is_err());
    }

    fn dense_x_hat(rng: &mut SeededRng, n: usize, e: usize, grid: (usize, usize)) -> PatchFeatures {
        let mut f = PatchFeatures::dense(0, 6, rng.normal_matrix(n, e, 1.0), grid).unwrap();
        f.frame = 1;
        f
    }

    #[test]
    fn full_topk_fraction_keeps_everything() {
        let mut rng = SeededRng::new(47);
        let x_hat = dense_x_hat(&mut rng, 8, 6, (2, 4));
        let head = MapSmHead::new(6, &mut rng);
        let sched = SparsitySchedule::geometric(0.5, 1.0, 0.6, 3);
        let (p, mask, _) =
            score_and_mask(&x_hat, &head, &sched, &GumbelConfig::default(), &mut rng).unwrap();
        assert_eq!(p.len(), 8);
        assert_eq!(mask.popcount(), 8);
    }

    #[test]
    fn topk_matches_a_full_sort_oracle() {
        let mut rng = SeededRng::new(49);
        let x_hat = dense_x_hat(&mut rng, 8, 6, (2, 4));
        let head = MapSmHead::new(6, &mut rng);
        let sched = SparsitySchedule::geometric(0.5, 0.5, 0.6, 3);
        let (p, mask, _) =
            score_and_mask(&x_hat, &head, &sched, &GumbelConfig::default(), &mut rng).unwrap();
        let mut order: Vec<usize> = (0..8).collect();
        order.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap());
        let mut want: Vec<usize> = order[..4].to_vec();
        want.sort_unstable();
        assert_eq!(mask.keep_ids(), want);
        assert_eq!(mask.popcount(), 4);
    }

    #[test]
    fn operating_point_cardinalities_are_exact() {
        let mut rng = SeededRng::new(51);
        let x_hat = dense_x_hat(&mut rng, 144, 8, (12, 12));
        let head = MapSmHead::new(8, &mut rng);
        for (frac, want) in [(0.7, 101), (0.6, 87)] {
            let sched = SparsitySchedule::geometric(0.5, frac, 0.6, 3);
            let (_, mask, _) =
                score_and_mask(&x_hat, &head, &sched, &GumbelConfig::default(), &mut rng).unwrap();
            assert_eq!(mask.popcount(), want, "fraction {frac}");
            assert_eq!(mask.popcount(), (frac * 144.0_f64).ceil() as usize);
        }
    }

    #[test]
    fn vanishing_topk_selection_is_an_error() {
        let mut rng = SeededRng::new(53);
        let x_hat = dense_x_hat(&mut rng, 8, 6, (2, 4));
        let head = MapSmHead::new(6, &mut rng);
        let sched = SparsitySchedule::geometric(0.5, 0.05, 0.6, 3);
        assert!(matches!(
            score_and_mask(&x_hat, &head, &sched, &GumbelConfig::default(), &mut rng),
            Err(VppError::Domain(_))
        ));
    }

    #[test]
    fn identical_frames_associate_as_the_identity() {
        // Same features in both frames, dense retention, positive distance
        // penalty, noise off: every patch must associate with itself.
        let mut rng = SeededRng::new(55);
        let feats = rng.normal_matrix(9, 6, 1.0);
        let keep: Vec<usize> = (0..9).collect();
        let state = state_from(feats.clone(), rng.normal_matrix(9, 6, 1.0), &keep, (3, 3));
        let x1_t = current(feats, (3, 3));
        let pen = DistancePenalty::build(&x1_t, &state, 1.0).unwrap();
        let phi = similarity(&x1_t, &state, &pen).unwrap();
        let cfg = GumbelConfig { tau: 10.0, noise_enabled: false };
        let assoc = associate(&phi, &GumbelNoise::zeros(9, 9), &cfg).unwrap();
        assert_eq!(assoc.selected(), keep);
    }

    #[test]
    fn single_retained_patch_broadcasts_and_mask_keeps_exact_topk() {
        let mut rng = SeededRng::new(57);
        let x6 = rng.normal_matrix(9, 6, 1.0);
        let state = state_from(rng.normal_matrix(9, 6, 1.0), x6.clone(), &[4], (3, 3));
        let x1_t = current(rng.normal_matrix(9, 6, 1.0), (3, 3));
        let pen = DistancePenalty::build(&x1_t, &state, DistancePenalty::default_lambda(6)).unwrap();
        let head = MapSmHead::new(6, &mut rng);
        let sched = SparsitySchedule::geometric(0.5, 0.7, 0.6, 3);
        let out = mapsm_forward(&x1_t, &state, &pen, &head, &sched, &GumbelConfig::default(), &mut rng)
            .unwrap();
        for i in 0..9 {
            assert_eq!(out.x_hat.tokens.row(i), x6.row(4));
        }
        assert_eq!(out.mask.popcount(), 7); // ceil(0.7 * 9)
        assert_eq!(out.mask.layer, 1);
        assert_eq!(out.mask.frame, 1);
    }

    #[test]
    fn noisy_topk_eventually_visits_every_background_patch() {
        // Head rigged so foreground rows score a moderate margin above
        // background rows; with top-k larger than the foreground, the
        // leftover slots are filled by noise ranking, so across many passes
        // every background patch gets kept at least once.
        let n = 16;
        let e = 4;
        let mut rng = SeededRng::new(59);
        let mut tokens = Matrix::zeros(n, e);
        let fg: Vec<bool> = (0..n).map(|i| i < 5).collect();
        for i in 0..n {
            tokens.set(i, 0, if fg[i] { 2.0 } else { -2.0 });
        }
        let mut x_hat = PatchFeatures::dense(0, 6, tokens, (4, 4)).unwrap();
        x_hat.frame = 1;
        // w1 routes coordinate 0 into the hidden unit; w2 turns it into a
        // keep-vs-drop margin of about 0.5 after tanh saturation.
        let head = MapSmHead {
            w1: Matrix::from_vec(e, 2, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap(),
            b1: vec![0.0, 0.0],
            w2: Matrix::from_vec(2, 2, vec![0.26, -0.26, 0.0, 0.0]).unwrap(),
            b2: vec![0.0, 0.0],
        };
        let sched = SparsitySchedule::geometric(0.5, 0.7, 0.6, 3);
        let cfg = GumbelConfig::default();
        let mut kept_ever = vec![false; n];
        for _ in 0..1000 {
            let (_, mask, _) = score_and_mask(&x_hat, &head, &sched, &cfg, &mut rng).unwrap();
            for (k, &bit) in kept_ever.iter_mut().zip(&mask.keep) {
                *k = *k || bit;
            }
            // Foreground should essentially always survive.
            for i in 0..5 {
                assert!(mask.keep[i], "foreground patch {i} dropped");
            }
        }
        assert!(kept_ever.iter().all(|&k| k), "some background patch was never explored");
    }
}
