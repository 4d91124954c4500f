//! Minimal L-layer pre-norm transformer over patch tokens with mask-aware
//! execution, plus the analytic FLOP ledger that makes sparsity measurable.
//!
//! Pruned tokens are *physically removed* from the token matrix (dense
//! compaction) rather than attention-masked with `-inf`: the savings this
//! crate measures come from never computing dropped tokens. Correctness of
//! the compaction rests on the mask-equivalence property — attention over
//! the compacted set equals dense attention renormalized over the active set
//! — which [`block_forward_reference_masked`] makes checkable.
//!
//! The backbone is frozen: weights are drawn once from a seeded scaled
//! Gaussian (the residual branches are damped so blocks stay near-identity,
//! keeping features well-conditioned through all twelve layers) and only the
//! pruning heads are ever trained.

use crate::error::{Result, VppError};
use crate::tensor::{Matrix, SeededRng};

/// Layer-norm epsilon; fixed once for the whole crate.
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Peak scale of the attention residual branch at init (reached at block
/// [`AGG_PEAK`]). The backbone is frozen, so its depth profile is shaped
/// entirely at init: see [`block_scale`].
const ATTN_DAMPING: f64 = 0.7;

/// Scale of the MLP residual branch at init, deliberately small. With
/// untrained weights the MLP adds token-decorrelating noise plus a shared
/// drift (GELU's positive output bias lands on every token identically),
/// both of which erode the class structure that attention aggregation
/// builds; damping it keeps the blocks attention-dominated.
const MLP_DAMPING: f64 = 0.05;

/// Center (0-indexed block) of the aggregation window.
const AGG_PEAK: f64 = 3.0;

/// Width of the aggregation window in blocks.
const AGG_WIDTH: f64 = 1.2;

/// Fraction of the pixel-DC response retained in the patch embedding.
/// A raw Gaussian projection hands every token a large shared `Wᵀ·1`
/// component (all patches share the base gray level), which drives all
/// pairwise token cosines toward 1 and blinds attention to content;
/// projecting most of it out restores contrast while leaving mean
/// brightness linearly readable.
const DC_RETAIN: f64 = 0.05;

/// Per-block residual-branch scale: a Gaussian bump over depth. Shallow
/// blocks pass features through nearly unchanged (patch evidence stays
/// immature), mid blocks aggregate neighborhood context through attention
/// (foreground evidence accumulates), deep blocks refine little (mature
/// evidence persists). This mimics the effective-depth behavior of a
/// trained encoder — per-patch foreground information low at the first
/// block and rising toward the reference layer — which is the regime the
/// temporally-informed early pruning stage is designed for. A frozen
/// uniform-scale stack does the opposite: repeated residual updates
/// accumulate a token-shared component that collapses all pairwise
/// cosines and buries class contrast by the deep layers.
fn block_scale(layer: usize) -> f64 {
    let z = (layer as f64 - AGG_PEAK) / AGG_WIDTH;
    (-z * z).exp()
}

/// Shape of the transformer and the patch grid it runs over.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VitConfig {
    /// Number of transformer blocks, `L`.
    pub layers: usize,
    /// Token width `E`.
    pub embed_dim: usize,
    /// Attention heads; must divide `embed_dim`.
    pub heads: usize,
    /// Hidden width of the block MLP as a multiple of `embed_dim`.
    pub mlp_ratio: f64,
    /// Patch grid `(rows, cols)`; the token count is `N = rows * cols`.
    pub grid: (usize, usize),
    /// Square patch side in pixels; frames must be `rows*patch x cols*patch`.
    pub patch_size: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        VitConfig {
            layers: 12,
            embed_dim: 32,
            heads: 4,
            mlp_ratio: 4.0,
            grid: (12, 12),
            patch_size: 4,
        }
    }
}

impl VitConfig {
    pub fn tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.mlp_ratio * self.embed_dim as f64).round() as usize
    }

    /// Flattened patch length `3 * patch^2` (three channels).
    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.embed_dim == 0 || self.heads == 0 {
            return Err(VppError::Config("layers, embed_dim and heads must be positive".into()));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(VppError::Config(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if !(self.mlp_ratio.is_finite() && self.mlp_ratio > 0.0) {
            return Err(VppError::Config(format!("mlp_ratio must be positive, got {}", self.mlp_ratio)));
        }
        if self.grid.0 == 0 || self.grid.1 == 0 || self.patch_size == 0 {
            return Err(VppError::Config("grid and patch_size must be positive".into()));
        }
        Ok(())
    }
}

/// One RGB frame, channel-major (`3 * height * width` values).
#[derive(Debug, Clone)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Image {
        Image { height, width, data: vec![0.0; 3 * height * width] }
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Image {
        Image { height, width, data: vec![value; 3 * height * width] }
    }

    pub fn pixel(&self, channel: usize, y: usize, x: usize) -> f64 {
        self.data[(channel * self.height + y) * self.width + x]
    }

    pub fn set_pixel(&mut self, channel: usize, y: usize, x: usize, value: f64) {
        self.data[(channel * self.height + y) * self.width + x] = value;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Channel mean at a pixel; used for grayscale export.
    pub fn gray(&self, y: usize, x: usize) -> f64 {
        (self.pixel(0, y, x) + self.pixel(1, y, x) + self.pixel(2, y, x)) / 3.0
    }
}

/// Tokens alive at some depth of some frame, physically compacted.
#[derive(Debug, Clone)]
pub struct PatchFeatures {
    /// Frame index within the video.
    pub frame: usize,
    /// Depth: 0 for embeddings, `l` after block `l`.
    pub layer: usize,
    /// `n_active x E` feature matrix.
    pub tokens: Matrix,
    /// Original patch indices of the rows, strictly increasing.
    pub active_ids: Vec<usize>,
    /// Patch grid (rows, cols) the ids refer to.
    pub grid: (usize, usize),
}

impl PatchFeatures {
    /// Builds features over the full grid (all tokens active).
    pub fn dense(frame: usize, layer: usize, tokens: Matrix, grid: (usize, usize)) -> Result<Self> {
        let n = grid.0 * grid.1;
        if tokens.rows() != n {
            return Err(VppError::Shape(format!(
                "expected {n} tokens for grid {}x{}, got {}",
                grid.0,
                grid.1,
                tokens.rows()
            )));
        }
        let active_ids: Vec<usize> = (0..n).collect();
        Ok(PatchFeatures { frame, layer, tokens, active_ids, grid })
    }

    pub fn n_active(&self) -> usize {
        self.active_ids.len()
    }

    /// Total grid size `N` (active and pruned tokens together).
    pub fn n_total(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    /// Patch-grid `(row, col)` of each active token, parallel to
    /// `active_ids`.
    pub fn coords(&self) -> Vec<(usize, usize)> {
        self.active_ids.iter().map(|&i| (i / self.grid.1, i % self.grid.1)).collect()
    }

    /// Keeps only the rows whose original ids appear in `keep_ids`
    /// (which must be a subset of the currently active ids).
    pub fn gather(&self, keep_ids: &[usize]) -> Result<PatchFeatures> {
        let mut rows = Vec::with_capacity(keep_ids.len());
        for &id in keep_ids {
            match self.active_ids.binary_search(&id) {
                Ok(pos) => rows.push(pos),
                Err(_) => {
                    return Err(VppError::Shape(format!(
                        "cannot keep patch {id}: not active at layer {}",
                        self.layer
                    )))
                }
            }
        }
        Ok(PatchFeatures {
            frame: self.frame,
            layer: self.layer,
            tokens: self.tokens.gather_rows(&rows)?,
            active_ids: keep_ids.to_vec(),
            grid: self.grid,
        })
    }
}

/// Binary keep/drop decision over the full patch grid at one depth.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneMask {
    pub layer: usize,
    pub frame: usize,
    pub keep: Vec<bool>,
}

impl PruneMask {
    pub fn all_ones(layer: usize, frame: usize, n: usize) -> PruneMask {
        PruneMask { layer, frame, keep: vec![true; n] }
    }

    pub fn from_keep_ids(layer: usize, frame: usize, n: usize, ids: &[usize]) -> PruneMask {
        let mut keep = vec![false; n];
        for &id in ids {
            keep[id] = true;
        }
        PruneMask { layer, frame, keep }
    }

    pub fn keep_ids(&self) -> Vec<usize> {
        self.keep
            .iter()
            .enumerate()
            .filter_map(|(i, &k)| if k { Some(i) } else { None })
            .collect()
    }

    pub fn popcount(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn density(&self) -> f64 {
        self.popcount() as f64 / self.keep.len() as f64
    }

    /// Elementwise AND; the result carries `self`'s layer/frame. This is how
    /// later pruning stages respect earlier drops (masks stay monotone).
    pub fn intersect(&self, other: &PruneMask) -> Result<PruneMask> {
        if self.keep.len() != other.keep.len() {
            return Err(VppError::Shape(format!(
                "mask lengths differ: {} vs {}",
                self.keep.len(),
                other.keep.len()
            )));
        }
        Ok(PruneMask {
            layer: self.layer,
            frame: self.frame,
            keep: self.keep.iter().zip(&other.keep).map(|(&a, &b)| a && b).collect(),
        })
    }

    /// True when `self` keeps a subset of what `earlier` keeps.
    pub fn is_refinement_of(&self, earlier: &PruneMask) -> bool {
        self.keep.len() == earlier.keep.len()
            && self.keep.iter().zip(&earlier.keep).all(|(&a, &b)| !a || b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.popcount() == 0 {
            return Err(VppError::Domain(format!(
                "mask at layer {} frame {} keeps no patches",
                self.layer, self.frame
            )));
        }
        Ok(())
    }
}

/// Weights of one transformer block; all matrices are `input x output`.
#[derive(Debug, Clone)]
pub struct BlockWeights {
    pub wq: Matrix,
    pub bq: Vec<f64>,
    pub wk: Matrix,
    pub bk: Vec<f64>,
    pub wv: Matrix,
    pub bv: Vec<f64>,
    pub wo: Matrix,
    pub bo: Vec<f64>,
    pub mlp_w1: Matrix,
    pub mlp_b1: Vec<f64>,
    pub mlp_w2: Matrix,
    pub mlp_b2: Vec<f64>,
}

/// Frozen backbone weights: patch projection plus `L` blocks.
#[derive(Debug, Clone)]
pub struct VitWeights {
    /// `3*patch^2 x E`.
    pub patch_proj: Matrix,
    pub patch_bias: Vec<f64>,
    pub blocks: Vec<BlockWeights>,
}

impl VitWeights {
    /// Seeded scaled-Gaussian initialization. Projections use fan-in
    /// scaling; the two residual-branch outputs (`wo`, `mlp_w2`) are damped
    /// so each block is a bounded perturbation of the identity.
    ///
    /// Query and key share one draw per block: for a fan-scaled Gaussian
    /// `W`, `WᵀW ≈ I`, so tied projections make the attention scores track
    /// token similarity (`q·k ≈ x_i·x_j`) instead of scrambling it through
    /// two independent rotations. A frozen backbone then aggregates
    /// context the way a trained one does — mutually similar tokens (a
    /// coherently textured instance) reinforce each other with depth —
    /// which is what gives deeper layers their higher foreground
    /// selectivity on synthetic video.
    pub fn init(cfg: &VitConfig, rng: &mut SeededRng) -> Result<VitWeights> {
        cfg.validate()?;
        let e = cfg.embed_dim;
        let hidden = cfg.mlp_hidden();
        let patch_dim = cfg.patch_dim();
        let mut blocks = Vec::with_capacity(cfg.layers);
        let mut patch_proj = rng.normal_matrix(patch_dim, e, 1.0 / (patch_dim as f64).sqrt());
        for col in 0..e {
            let mean: f64 =
                (0..patch_dim).map(|r| patch_proj.get(r, col)).sum::<f64>() / patch_dim as f64;
            for row in 0..patch_dim {
                let v = patch_proj.get(row, col) - (1.0 - DC_RETAIN) * mean;
                patch_proj.set(row, col, v);
            }
        }
        let patch_bias = vec![0.0; e];
        for layer in 0..cfg.layers {
            let scale = block_scale(layer);
            let fan_e = 1.0 / (e as f64).sqrt();
            let wq = rng.normal_matrix(e, e, fan_e);
            blocks.push(BlockWeights {
                wk: wq.clone(),
                wq,
                bq: vec![0.0; e],
                bk: vec![0.0; e],
                wv: rng.normal_matrix(e, e, fan_e),
                bv: vec![0.0; e],
                wo: rng.normal_matrix(e, e, scale * ATTN_DAMPING * fan_e),
                bo: vec![0.0; e],
                mlp_w1: rng.normal_matrix(e, hidden, fan_e),
                mlp_b1: vec![0.0; hidden],
                mlp_w2: rng.normal_matrix(hidden, e, scale * MLP_DAMPING / (hidden as f64).sqrt()),
                mlp_b2: vec![0.0; e],
            });
        }
        Ok(VitWeights { patch_proj, patch_bias, blocks })
    }
}

fn add_bias_row(m: &mut Matrix, bias: &[f64]) {
    for i in 0..m.rows() {
        for (v, &b) in m.row_mut(i).iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Row-wise layer norm without learnable affine parameters.
pub fn layer_norm(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let n = row.len() as f64;
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    out
}

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())
}

fn column_block(m: &Matrix, start: usize, len: usize) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), len);
    for i in 0..m.rows() {
        out.row_mut(i).copy_from_slice(&m.row(i)[start..start + len]);
    }
    out
}

fn set_column_block(m: &mut Matrix, start: usize, block: &Matrix) {
    for i in 0..m.rows() {
        m.row_mut(i)[start..start + block.cols()].copy_from_slice(block.row(i));
    }
}

/// Multi-head self-attention over exactly the rows of `x`.
fn attention(x: &Matrix, w: &BlockWeights, cfg: &VitConfig) -> Result<Matrix> {
    let d = cfg.head_dim();
    let mut q = x.matmul(&w.wq)?;
    add_bias_row(&mut q, &w.bq);
    let mut k = x.matmul(&w.wk)?;
    add_bias_row(&mut k, &w.bk);
    let mut v = x.matmul(&w.wv)?;
    add_bias_row(&mut v, &w.bv);

    let mut concat = Matrix::zeros(x.rows(), cfg.embed_dim);
    let scale = 1.0 / (d as f64).sqrt();
    for h in 0..cfg.heads {
        let qh = column_block(&q, h * d, d);
        let kh = column_block(&k, h * d, d);
        let vh = column_block(&v, h * d, d);
        let mut scores = qh.matmul_nt(&kh)?;
        scores.scale_assign(scale);
        let weights = scores.row_softmax();
        let out_h = weights.matmul(&vh)?;
        set_column_block(&mut concat, h * d, &out_h);
    }
    let mut projected = concat.matmul(&w.wo)?;
    add_bias_row(&mut projected, &w.bo);
    Ok(projected)
}

fn mlp(x: &Matrix, w: &BlockWeights) -> Result<Matrix> {
    let mut h = x.matmul(&w.mlp_w1)?;
    add_bias_row(&mut h, &w.mlp_b1);
    h.map_assign(gelu);
    let mut out = h.matmul(&w.mlp_w2)?;
    add_bias_row(&mut out, &w.mlp_b2);
    Ok(out)
}

/// Extracts patch tokens from a frame: each patch is flattened
/// channel-major and linearly projected to `E` dimensions. All `N` tokens
/// are active in the result.
pub fn embed_frame(image: &Image, cfg: &VitConfig, weights: &VitWeights) -> Result<PatchFeatures> {
    cfg.validate()?;
    let p = cfg.patch_size;
    let (gr, gc) = cfg.grid;
    if image.height != gr * p || image.width != gc * p {
        return Err(VppError::Shape(format!(
            "image {}x{} does not match grid {}x{} of {}-pixel patches",
            image.height, image.width, gr, gc, p
        )));
    }
    let n = cfg.tokens();
    let mut patches = Matrix::zeros(n, cfg.patch_dim());
    for pr in 0..gr {
        for pc in 0..gc {
            let row = patches.row_mut(pr * gc + pc);
            let mut at = 0;
            for c in 0..3 {
                for dy in 0..p {
                    for dx in 0..p {
                        row[at] = image.pixel(c, pr * p + dy, pc * p + dx);
                        at += 1;
                    }
                }
            }
        }
    }
    let mut tokens = patches.matmul(&weights.patch_proj)?;
    add_bias_row(&mut tokens, &weights.patch_bias);
    Ok(PatchFeatures::dense(0, 0, tokens, cfg.grid)?)
}

/// One pre-norm transformer block over the active tokens of `x`.
///
/// `mask` must agree with `x.active_ids` (pruned tokens are already
/// physically absent); it is carried for validation so a desynchronized
/// pipeline fails loudly rather than silently attending across the wrong
/// set. Inactive tokens are never read nor written.
pub fn block_forward(x: &PatchFeatures, w: &BlockWeights, cfg: &VitConfig, mask: &PruneMask) -> Result<PatchFeatures> {
    if mask.keep_ids() != x.active_ids {
        return Err(VppError::Shape(format!(
            "mask at layer {} keeps {} tokens but features carry {} active tokens",
            mask.layer,
            mask.popcount(),
            x.n_active()
        )));
    }
    let mut tokens = x.tokens.clone();
    let attn = attention(&layer_norm(&tokens), w, cfg)?;
    tokens.add_assign(&attn)?;
    let ff = mlp(&layer_norm(&tokens), w)?;
    tokens.add_assign(&ff)?;
    Ok(PatchFeatures {
        frame: x.frame,
        layer: x.layer + 1,
        tokens,
        active_ids: x.active_ids.clone(),
        grid: x.grid,
    })
}

/// Slow reference used by the mask-equivalence oracle: runs the block over
/// the *full* token set with excluded tokens suppressed inside attention
/// (score `-1e30`, so their softmax weight underflows to exactly zero), then
/// returns only the active rows. Production code never calls this; tests
/// compare it against [`block_forward`] on the compacted set.
pub fn block_forward_reference_masked(
    full_tokens: &Matrix,
    keep: &[bool],
    w: &BlockWeights,
    cfg: &VitConfig,
) -> Result<Matrix> {
    if full_tokens.rows() != keep.len() {
        return Err(VppError::Shape(format!(
            "{} tokens but keep vector of length {}",
            full_tokens.rows(),
            keep.len()
        )));
    }
    let d = cfg.head_dim();
    let ln1 = layer_norm(full_tokens);
    let mut q = ln1.matmul(&w.wq)?;
    add_bias_row(&mut q, &w.bq);
    let mut k = ln1.matmul(&w.wk)?;
    add_bias_row(&mut k, &w.bk);
    let mut v = ln1.matmul(&w.wv)?;
    add_bias_row(&mut v, &w.bv);

    let mut concat = Matrix::zeros(full_tokens.rows(), cfg.embed_dim);
    let scale = 1.0 / (d as f64).sqrt();
    for h in 0..cfg.heads {
        let qh = column_block(&q, h * d, d);
        let kh = column_block(&k, h * d, d);
        let vh = column_block(&v, h * d, d);
        let mut scores = qh.matmul_nt(&kh)?;
        scores.scale_assign(scale);
        for i in 0..scores.rows() {
            for (j, &kept) in keep.iter().enumerate() {
                if !kept {
                    scores.set(i, j, scores.get(i, j) - 1e30);
                }
            }
        }
        let weights = scores.row_softmax();
        let out_h = weights.matmul(&vh)?;
        set_column_block(&mut concat, h * d, &out_h);
    }
    let mut projected = concat.matmul(&w.wo)?;
    add_bias_row(&mut projected, &w.bo);

    let mut x1 = full_tokens.clone();
    x1.add_assign(&projected)?;
    let ff = mlp(&layer_norm(&x1), w)?;
    x1.add_assign(&ff)?;

    let keep_rows: Vec<usize> =
        keep.iter().enumerate().filter_map(|(i, &k)| if k { Some(i) } else { None }).collect();
    x1.gather_rows(&keep_rows)
}

/// Analytic FLOP account for one frame's forward pass.
#[derive(Debug, Clone)]
pub struct FlopLedger {
    /// Attention FLOPs per layer: `4 n E^2 + 2 n^2 E`.
    pub attention: Vec<f64>,
    /// MLP FLOPs per layer: `2 n E (mlp_ratio E) * 2`.
    pub mlp: Vec<f64>,
    /// Pruning-module overhead, one labelled entry per module application.
    pub overhead: Vec<(String, f64)>,
}

impl FlopLedger {
    pub fn attention_total(&self) -> f64 {
        self.attention.iter().sum()
    }

    pub fn mlp_total(&self) -> f64 {
        self.mlp.iter().sum()
    }

    pub fn overhead_total(&self) -> f64 {
        self.overhead.iter().map(|(_, f)| f).sum()
    }

    pub fn total(&self) -> f64 {
        self.attention_total() + self.mlp_total() + self.overhead_total()
    }
}

/// Attention FLOPs for `n` active tokens of width `E`.
pub fn attention_flops(n: usize, embed_dim: usize) -> f64 {
    let n = n as f64;
    let e = embed_dim as f64;
    4.0 * n * e * e + 2.0 * n * n * e
}

/// Block-MLP FLOPs for `n` active tokens.
pub fn mlp_flops(n: usize, embed_dim: usize, mlp_ratio: f64) -> f64 {
    let n = n as f64;
    let e = embed_dim as f64;
    2.0 * n * e * (mlp_ratio * e) * 2.0
}

/// Builds the ledger from per-layer active token counts plus labelled
/// pruning-module overheads (supplied by the modules' own cost models).
pub fn count_flops(
    cfg: &VitConfig,
    per_layer_active: &[usize],
    overhead: &[(String, f64)],
) -> Result<FlopLedger> {
    if per_layer_active.len() != cfg.layers {
        return Err(VppError::Shape(format!(
            "expected {} per-layer counts, got {}",
            cfg.layers,
            per_layer_active.len()
        )));
    }
    let n_max = cfg.tokens();
    for (l, &n) in per_layer_active.iter().enumerate() {
        if n > n_max {
            return Err(VppError::Domain(format!(
                "layer {l} active count {n} exceeds grid size {n_max}"
            )));
        }
    }
    Ok(FlopLedger {
        attention: per_layer_active.iter().map(|&n| attention_flops(n, cfg.embed_dim)).collect(),
        mlp: per_layer_active
            .iter()
            .map(|&n| mlp_flops(n, cfg.embed_dim, cfg.mlp_ratio))
            .collect(),
        overhead: overhead.to_vec(),
    })
}
