//! Deterministic synthetic video generator: textured foreground blobs moving
//! linearly over a static textured background, with per-frame ground-truth
//! instance masks on the patch grid, plus the scene-switch scenario (a run
//! of all-white frames before content appears).
//!
//! All texture comes from a splitmix64 hash of (seed, tag, coordinates), so
//! frames are bit-identical across platforms and regenerations without
//! storing anything. The two regions get deliberately different texture
//! *structure*: the background is per-pixel white noise, while each
//! foreground instance carries a smooth, spatially coherent field sampled
//! in object-local coordinates, riding rigidly with the motion — exactly
//! the situation a temporal patch-mapping module is supposed to exploit.
//! With the mean offset between the regions kept small, a single patch in
//! isolation says almost nothing about its class: foreground only becomes
//! linearly separable after several attention blocks aggregate context,
//! mirroring how class information in real video lives in deep features
//! rather than shallow ones.
//!
//! Instance sizes are calibrated on the patch grid: the generator searches
//! the shape extent whose *touched-patch* count matches the requested area
//! fraction at placement, so ground-truth sizes land in the intended
//! small/medium/large strata instead of being inflated by boundary patches.

use crate::error::{Result, VppError};
use crate::tensor::splitmix64;
use crate::vit::Image;

/// Stratum of an instance by its share of the patch grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SizeStratum {
    /// At most 10% of the patches.
    Small,
    /// More than 10% and at most 20%.
    Medium,
    /// More than 20%.
    Large,
}

impl SizeStratum {
    pub fn of_fraction(frac: f64) -> SizeStratum {
        if frac <= 0.10 {
            SizeStratum::Small
        } else if frac <= 0.20 {
            SizeStratum::Medium
        } else {
            SizeStratum::Large
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            SizeStratum::Small => "S",
            SizeStratum::Medium => "M",
            SizeStratum::Large => "L",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Disc,
    Rect,
}

/// One moving foreground object.
#[derive(Debug, Clone, Copy)]
pub struct InstanceSpec {
    pub shape: ShapeKind,
    /// Requested share of the patch grid covered by the instance.
    pub area_frac: f64,
    /// (columns, rows) of motion per frame, in patches.
    pub velocity: (f64, f64),
    /// Texture amplitude around the foreground mean.
    pub amplitude: f64,
}

/// Full description of a synthetic clip.
#[derive(Debug, Clone)]
pub struct SynthScenario {
    pub seed: u64,
    pub frames: usize,
    /// Patch grid (rows, cols).
    pub grid: (usize, usize),
    /// Square patch side in pixels.
    pub patch_size: usize,
    pub instances: Vec<InstanceSpec>,
    /// Background texture amplitude around the 0.5 background mean.
    pub background_amp: f64,
    /// Mean offset of foreground pixels over background pixels; this is the
    /// knob that dials foreground/background separability.
    pub fg_offset: f64,
    /// Number of leading all-white frames (scene-switch warmup).
    pub blank_prefix: usize,
}

impl Default for SynthScenario {
    fn default() -> Self {
        SynthScenario {
            seed: 1,
            frames: 8,
            grid: (12, 12),
            patch_size: 4,
            instances: vec![InstanceSpec {
                shape: ShapeKind::Disc,
                area_frac: 0.12,
                velocity: (0.6, 0.3),
                amplitude: 0.25,
            }],
            background_amp: 0.25,
            fg_offset: 0.05,
            blank_prefix: 0,
        }
    }
}

/// Ground-truth patch mask of one instance in one frame. Instances may
/// overlap (occlusion draws the later-listed instance in front pixel-wise),
/// so masks of different instances need not be disjoint: a patch belongs to
/// every instance overlapping it.
#[derive(Debug, Clone, PartialEq)]
pub struct GtInstanceMask {
    pub frame: usize,
    pub instance: usize,
    /// Length-N patch membership vector.
    pub patches: Vec<bool>,
}

impl GtInstanceMask {
    pub fn patch_count(&self) -> usize {
        self.patches.iter().filter(|&&p| p).count()
    }

    pub fn area_fraction(&self) -> f64 {
        self.patch_count() as f64 / self.patches.len() as f64
    }

    pub fn stratum(&self) -> SizeStratum {
        SizeStratum::of_fraction(self.area_fraction())
    }
}

/// A generated clip: frames, per-frame ground truth, and the instance
/// center trajectories (pixel coordinates, useful for motion-exactness
/// checks and debugging).
#[derive(Debug, Clone)]
pub struct SynthVideo {
    pub scenario: SynthScenario,
    pub frames: Vec<Image>,
    /// `gt[t]` lists one mask per instance; empty for blank frames.
    pub gt: Vec<Vec<GtInstanceMask>>,
    /// `centers[t][i]` is instance `i`'s center as (y, x) pixels; present
    /// for all frames including blank ones (objects exist, just unseen).
    pub centers: Vec<Vec<(f64, f64)>>,
}

/// Union of all instance masks of one frame as a patch-level foreground
/// vector; the toy task and the FGS probe train against this.
pub fn foreground_union(gt_frame: &[GtInstanceMask], n: usize) -> Vec<bool> {
    let mut fg = vec![false; n];
    for mask in gt_frame {
        for (f, &p) in fg.iter_mut().zip(&mask.patches) {
            *f = *f || p;
        }
    }
    debug_assert!(gt_frame.iter().all(|m| m.patches.len() == n));
    fg
}

const BACKGROUND_MEAN: f64 = 0.5;
const TAG_BACKGROUND: u64 = 0xB0;
const TAG_FOREGROUND: u64 = 0xF0;
const TAG_PLACEMENT: u64 = 0x11;

/// Hash noise in `[-1, 1)`: splitmix64 folded over the coordinates.
fn hash_noise(seed: u64, parts: &[u64]) -> f64 {
    let mut h = splitmix64(seed ^ 0xA076_1D64_78BD_642F);
    for &p in parts {
        h = splitmix64(h ^ p.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    }
    (h >> 11) as f64 / (1u64 << 52) as f64 - 1.0
}

/// Side of one foreground-texture lattice cell, in pixels. At 1.5 patches
/// the texture correlates across neighboring patches, which is what lets
/// deeper layers (mixing context through attention) tell foreground from
/// the spatially independent background noise.
const FG_TEXTURE_CELL_PX: f64 = 13.0;

/// Smooth "value noise" in roughly `[-1, 1]`: a hash lattice with cell
/// side [`FG_TEXTURE_CELL_PX`], interpolated with a smoothstep bilerp at
/// continuous coordinates. Zero mean like [`hash_noise`], but spatially
/// coherent: nearby samples agree, samples a few cells apart decorrelate.
fn value_noise(seed: u64, parts: &[u64], y: f64, x: f64) -> f64 {
    let (cy, cx) = (y / FG_TEXTURE_CELL_PX, x / FG_TEXTURE_CELL_PX);
    let (gy, gx) = (cy.floor(), cx.floor());
    let smooth = |f: f64| f * f * (3.0 - 2.0 * f);
    let (fy, fx) = (smooth(cy - gy), smooth(cx - gx));
    let corner = |dy: f64, dx: f64| {
        let mut parts = parts.to_vec();
        parts.push((gy + dy) as i64 as u64);
        parts.push((gx + dx) as i64 as u64);
        hash_noise(seed, &parts)
    };
    let top = corner(0.0, 0.0) * (1.0 - fx) + corner(0.0, 1.0) * fx;
    let bottom = corner(1.0, 0.0) * (1.0 - fx) + corner(1.0, 1.0) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Is the pixel at integer coordinates (y, x) inside the shape centered at
/// `(cy, cx)` with half-extent `half`? Membership is evaluated at the pixel
/// center; every consumer (renderer, ground truth, calibration) shares this
/// single definition.
fn member(shape: ShapeKind, cy: f64, cx: f64, half: f64, y: usize, x: usize) -> bool {
    let dy = y as f64 + 0.5 - cy;
    let dx = x as f64 + 0.5 - cx;
    match shape {
        ShapeKind::Disc => dy * dy + dx * dx <= half * half,
        ShapeKind::Rect => dy.abs() <= half && dx.abs() <= half,
    }
}

/// Patches touched by the shape at the given center, as a mask of length N.
fn touched_patches(
    shape: ShapeKind,
    cy: f64,
    cx: f64,
    half: f64,
    grid: (usize, usize),
    patch: usize,
) -> Vec<bool> {
    let (gr, gc) = grid;
    let (h, w) = (gr * patch, gc * patch);
    let mut out = vec![false; gr * gc];
    let y0 = ((cy - half - 1.0).floor().max(0.0)) as usize;
    let y1 = ((cy + half + 1.0).ceil() as usize).min(h);
    let x0 = ((cx - half - 1.0).floor().max(0.0)) as usize;
    let x1 = ((cx + half + 1.0).ceil() as usize).min(w);
    for y in y0..y1 {
        for x in x0..x1 {
            if member(shape, cy, cx, half, y, x) {
                out[(y / patch) * gc + (x / patch)] = true;
            }
        }
    }
    out
}

fn count_true(mask: &[bool]) -> usize {
    mask.iter().filter(|&&m| m).count()
}

/// Touched-patch count in the instance's *worst* subpixel alignment: the
/// minimum over a lattice of within-patch offsets around the center. As the
/// instance moves, its alignment with patch boundaries drifts, so a count
/// taken at a single position can drop sharply one frame later; calibrating
/// against the alignment minimum keeps realized counts at or above target
/// for every position.
fn min_touched_count(
    shape: ShapeKind,
    cy: f64,
    cx: f64,
    half: f64,
    grid: (usize, usize),
    patch: usize,
) -> usize {
    let mut min = usize::MAX;
    for ky in 0..4 {
        for kx in 0..4 {
            let oy = ky as f64 * patch as f64 / 4.0;
            let ox = kx as f64 * patch as f64 / 4.0;
            let count = count_true(&touched_patches(shape, cy + oy, cx + ox, half, grid, patch));
            min = min.min(count);
        }
    }
    min
}

/// Smallest half-extent whose worst-alignment touched-patch count reaches
/// `target`: binary search (the count is monotone in the extent), 48
/// halvings on pixel units.
fn calibrate_half_extent(
    shape: ShapeKind,
    cy: f64,
    cx: f64,
    target: usize,
    grid: (usize, usize),
    patch: usize,
) -> f64 {
    let max_half = (grid.0.min(grid.1) * patch) as f64 / 2.0 - 1.0;
    let mut lo = 0.3;
    let mut hi = max_half;
    for _ in 0..48 {
        let mid = 0.5 * (lo + hi);
        if min_touched_count(shape, cy, cx, mid, grid, patch) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

/// Triangle-wave fold of `p` into `[lo, hi]`: linear motion with elastic
/// reflection at the borders.
fn reflect(p: f64, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return lo;
    }
    let period = 2.0 * (hi - lo);
    let mut phase = (p - lo) % period;
    if phase < 0.0 {
        phase += period;
    }
    if phase <= hi - lo {
        lo + phase
    } else {
        lo + (period - phase)
    }
}

struct PlacedInstance {
    spec: InstanceSpec,
    half: f64,
    /// Unreflected start center (y, x) in pixels.
    start: (f64, f64),
    /// Velocity converted to pixels per frame, (y, x).
    velocity_px: (f64, f64),
    /// Reflection bounds per axis.
    bounds_y: (f64, f64),
    bounds_x: (f64, f64),
}

impl PlacedInstance {
    fn center_at(&self, t: usize) -> (f64, f64) {
        let cy = self.start.0 + self.velocity_px.0 * t as f64;
        let cx = self.start.1 + self.velocity_px.1 * t as f64;
        (reflect(cy, self.bounds_y.0, self.bounds_y.1), reflect(cx, self.bounds_x.0, self.bounds_x.1))
    }
}

impl SynthScenario {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(VppError::Config("scenario needs at least one frame".into()));
        }
        if self.blank_prefix > self.frames {
            return Err(VppError::Config(format!(
                "blank_prefix {} exceeds frame count {}",
                self.blank_prefix, self.frames
            )));
        }
        if self.grid.0 == 0 || self.grid.1 == 0 || self.patch_size == 0 {
            return Err(VppError::Config("grid and patch_size must be positive".into()));
        }
        for (i, inst) in self.instances.iter().enumerate() {
            if !(inst.area_frac > 0.0 && inst.area_frac <= 0.6) {
                return Err(VppError::Config(format!(
                    "instance {i} area fraction {} outside (0, 0.6]",
                    inst.area_frac
                )));
            }
            if inst.amplitude < 0.0 {
                return Err(VppError::Config(format!("instance {i} amplitude negative")));
            }
        }
        if self.background_amp < 0.0 {
            return Err(VppError::Config("background amplitude negative".into()));
        }
        Ok(())
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.grid.0 * self.patch_size, self.grid.1 * self.patch_size)
    }

    pub fn tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }
}

/// Renders the scenario: deterministic per seed, linear motion with border
/// reflection, leading `blank_prefix` frames all-white with empty ground
/// truth. Errors if an instance cannot fit inside the grid.
pub fn generate(scenario: &SynthScenario) -> Result<SynthVideo> {
    scenario.validate()?;
    let (h, w) = scenario.image_size();
    let n = scenario.tokens();
    let mut placement =
        crate::tensor::SeededRng::new(scenario.seed).derive(TAG_PLACEMENT);

    let mut placed = Vec::with_capacity(scenario.instances.len());
    for (i, spec) in scenario.instances.iter().enumerate() {
        let target = ((spec.area_frac * n as f64).round() as usize).max(1);
        let does_not_fit = || {
            VppError::Config(format!(
                "instance {i} (area {}) does not fit inside the {h}x{w} pixel grid",
                spec.area_frac
            ))
        };
        // Pass 1: place with a provisional extent from the pixel area.
        // Touched-patch counts depend on how the shape aligns with patch
        // boundaries, so the real extent must be calibrated at the actual
        // center, which is only known after placement.
        let provisional = match spec.shape {
            ShapeKind::Disc => (spec.area_frac * (h * w) as f64 / std::f64::consts::PI).sqrt(),
            ShapeKind::Rect => (spec.area_frac * (h * w) as f64).sqrt() / 2.0,
        };
        let margin0 = 1.5 * provisional + 1.0;
        if 2.0 * margin0 >= h as f64 || 2.0 * margin0 >= w as f64 {
            return Err(does_not_fit());
        }
        let start_y = margin0 + placement.next_f64() * (h as f64 - 2.0 * margin0);
        let start_x = margin0 + placement.next_f64() * (w as f64 - 2.0 * margin0);

        // Pass 2: calibrate the extent where the instance actually sits.
        let half = calibrate_half_extent(
            spec.shape,
            start_y,
            start_x,
            target,
            scenario.grid,
            scenario.patch_size,
        );
        let realized =
            min_touched_count(spec.shape, start_y, start_x, half, scenario.grid, scenario.patch_size);
        if realized < target {
            return Err(does_not_fit());
        }
        let margin = half + 0.5;
        if 2.0 * margin >= h as f64 || 2.0 * margin >= w as f64 {
            return Err(does_not_fit());
        }
        let start_y = start_y.clamp(margin, h as f64 - margin);
        let start_x = start_x.clamp(margin, w as f64 - margin);
        placed.push(PlacedInstance {
            spec: *spec,
            half,
            start: (start_y, start_x),
            velocity_px: (
                spec.velocity.1 * scenario.patch_size as f64,
                spec.velocity.0 * scenario.patch_size as f64,
            ),
            bounds_y: (margin, h as f64 - margin),
            bounds_x: (margin, w as f64 - margin),
        });
    }

    let mut frames = Vec::with_capacity(scenario.frames);
    let mut gt = Vec::with_capacity(scenario.frames);
    let mut centers = Vec::with_capacity(scenario.frames);
    for t in 0..scenario.frames {
        let frame_centers: Vec<(f64, f64)> = placed.iter().map(|p| p.center_at(t)).collect();
        centers.push(frame_centers.clone());

        if t < scenario.blank_prefix {
            frames.push(Image::filled(h, w, 1.0));
            gt.push(Vec::new());
            continue;
        }

        let mut image = Image::new(h, w);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    // Static background texture.
                    let mut value = BACKGROUND_MEAN
                        + scenario.background_amp
                            * hash_noise(scenario.seed, &[TAG_BACKGROUND, c as u64, y as u64, x as u64]);
                    // Later-listed instances draw in front.
                    for (i, p) in placed.iter().enumerate() {
                        let (cy, cx) = frame_centers[i];
                        if member(p.spec.shape, cy, cx, p.half, y, x) {
                            // Smooth texture in object-local coordinates so
                            // it rides rigidly with the motion. Its mean
                            // matches the background up to `fg_offset`;
                            // what sets the foreground apart is spatial
                            // coherence, not pixel statistics, so single
                            // patches carry little class signal while
                            // context across patches carries a lot.
                            let ly = y as f64 + 0.5 - cy;
                            let lx = x as f64 + 0.5 - cx;
                            value = BACKGROUND_MEAN
                                + scenario.fg_offset
                                + p.spec.amplitude
                                    * value_noise(
                                        scenario.seed,
                                        &[TAG_FOREGROUND, i as u64, c as u64],
                                        ly,
                                        lx,
                                    );
                        }
                    }
                    image.set_pixel(c, y, x, value);
                }
            }
        }
        frames.push(image);

        let mut frame_gt = Vec::with_capacity(placed.len());
        for (i, p) in placed.iter().enumerate() {
            let (cy, cx) = frame_centers[i];
            let patches =
                touched_patches(p.spec.shape, cy, cx, p.half, scenario.grid, scenario.patch_size);
            frame_gt.push(GtInstanceMask { frame: t, instance: i, patches });
        }
        gt.push(frame_gt);
    }

    Ok(SynthVideo { scenario: scenario.clone(), frames, gt, centers })
}

// ---------------------------------------------------------------------------
// Scenario config files: `key = value` lines, `#` comments, one repeatable
// `instance = <shape> area=<f> vel=<vx>,<vy> amp=<f>` line per instance.
// ---------------------------------------------------------------------------

fn parse_field<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| VppError::Parse(format!("invalid value for {key}: {value:?}")))
}

fn parse_instance(value: &str) -> Result<InstanceSpec> {
    let mut parts = value.split_whitespace();
    let shape = match parts.next() {
        Some("disc") => ShapeKind::Disc,
        Some("rect") => ShapeKind::Rect,
        other => {
            return Err(VppError::Parse(format!(
                "instance shape must be disc or rect, got {other:?}"
            )))
        }
    };
    let mut area = None;
    let mut vel = None;
    let mut amp = None;
    for part in parts {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| VppError::Parse(format!("instance field {part:?} is not key=value")))?;
        match key {
            "area" => area = Some(parse_field::<f64>("area", value)?),
            "amp" => amp = Some(parse_field::<f64>("amp", value)?),
            "vel" => {
                let (vx, vy) = value
                    .split_once(',')
                    .ok_or_else(|| VppError::Parse(format!("vel {value:?} is not vx,vy")))?;
                vel = Some((parse_field::<f64>("vel", vx)?, parse_field::<f64>("vel", vy)?));
            }
            other => return Err(VppError::Parse(format!("unknown instance field {other:?}"))),
        }
    }
    Ok(InstanceSpec {
        shape,
        area_frac: area.ok_or_else(|| VppError::Parse("instance missing area=".into()))?,
        velocity: vel.unwrap_or((0.0, 0.0)),
        amplitude: amp.unwrap_or(0.25),
    })
}

impl SynthScenario {
    /// Parses a scenario from `key = value` text. Unknown keys error, so a
    /// typo cannot silently fall back to a default.
    pub fn from_config_str(text: &str) -> Result<SynthScenario> {
        let mut scenario = SynthScenario { instances: Vec::new(), ..SynthScenario::default() };
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                VppError::Parse(format!("line {}: expected key = value, got {raw:?}", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            match key {
                "seed" => scenario.seed = parse_field(key, value)?,
                "frames" => scenario.frames = parse_field(key, value)?,
                "patch_size" => scenario.patch_size = parse_field(key, value)?,
                "blank_prefix" => scenario.blank_prefix = parse_field(key, value)?,
                "background_amp" => scenario.background_amp = parse_field(key, value)?,
                "fg_offset" => scenario.fg_offset = parse_field(key, value)?,
                "grid" => {
                    let (r, c) = value.split_once('x').ok_or_else(|| {
                        VppError::Parse(format!("grid {value:?} is not ROWSxCOLS"))
                    })?;
                    scenario.grid = (parse_field("grid", r)?, parse_field("grid", c)?);
                }
                "instance" => scenario.instances.push(parse_instance(value)?),
                other => return Err(VppError::Parse(format!("unknown scenario key {other:?}"))),
            }
        }
        if scenario.instances.is_empty() {
            scenario.instances = SynthScenario::default().instances;
        }
        scenario.validate()?;
        Ok(scenario)
    }

    /// Inverse of [`SynthScenario::from_config_str`].
    pub fn to_config_string(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("seed = {}\n", self.seed));
        out.push_str(&format!("frames = {}\n", self.frames));
        out.push_str(&format!("grid = {}x{}\n", self.grid.0, self.grid.1));
        out.push_str(&format!("patch_size = {}\n", self.patch_size));
        out.push_str(&format!("blank_prefix = {}\n", self.blank_prefix));
        out.push_str(&format!("background_amp = {}\n", self.background_amp));
        out.push_str(&format!("fg_offset = {}\n", self.fg_offset));
        for inst in &self.instances {
            let shape = match inst.shape {
                ShapeKind::Disc => "disc",
                ShapeKind::Rect => "rect",
            };
            out.push_str(&format!(
                "instance = {shape} area={} vel={},{} amp={}\n",
                inst.area_frac, inst.velocity.0, inst.velocity.1, inst.amplitude
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_instance_scenario() -> SynthScenario {
        SynthScenario {
            seed: 77,
            frames: 6,
            instances: vec![
                InstanceSpec {
                    shape: ShapeKind::Disc,
                    area_frac: 0.05,
                    velocity: (0.5, 0.25),
                    amplitude: 0.25,
                },
                InstanceSpec {
                    shape: ShapeKind::Rect,
                    area_frac: 0.25,
                    velocity: (-0.4, 0.6),
                    amplitude: 0.2,
                },
            ],
            ..SynthScenario::default()
        }
    }

    #[test]
    fn same_seed_regenerates_bit_identical_frames_and_masks() {
        let scenario = two_instance_scenario();
        let a = generate(&scenario).unwrap();
        let b = generate(&scenario).unwrap();
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            assert_eq!(fa.data(), fb.data());
        }
        assert_eq!(a.gt, b.gt);
        let mut other = scenario.clone();
        other.seed = 78;
        let c = generate(&other).unwrap();
        assert_ne!(a.frames[0].data(), c.frames[0].data());
    }

    #[test]
    fn blank_prefix_frames_are_all_white_with_empty_ground_truth() {
        let mut scenario = two_instance_scenario();
        scenario.frames = 8;
        scenario.blank_prefix = 3;
        let video = generate(&scenario).unwrap();
        for t in 0..3 {
            assert!(video.frames[t].data().iter().all(|&v| v == 1.0), "frame {t} not white");
            assert!(video.gt[t].is_empty());
        }
        for t in 3..8 {
            assert!(!video.gt[t].is_empty());
            assert!(video.frames[t].data().iter().any(|&v| v != 1.0));
        }
    }

    #[test]
    fn unit_column_velocity_shifts_the_mask_by_exactly_one_column() {
        // Velocity (1, 0) patches/frame moves the center one patch per step
        // in x. Away from reflections the ground truth must shift patch-
        // exactly by one column; with 4 frames at most one bounce can occur,
        // so a clean consecutive pair always exists.
        let scenario = SynthScenario {
            seed: 5,
            frames: 4,
            grid: (12, 16),
            instances: vec![InstanceSpec {
                shape: ShapeKind::Disc,
                area_frac: 0.05,
                velocity: (1.0, 0.0),
                amplitude: 0.25,
            }],
            ..SynthScenario::default()
        };
        let video = generate(&scenario).unwrap();
        let p = scenario.patch_size as f64;
        let mut found_clean_step = false;
        for t in 0..3 {
            let (y0, x0) = video.centers[t][0];
            let (y1, x1) = video.centers[t + 1][0];
            // A reflection inverts the direction, so a clean (fold-free)
            // step moves by exactly +p or -p pixels in x.
            if ((x1 - x0).abs() - p).abs() > 1e-9 || (y1 - y0).abs() > 1e-9 {
                continue;
            }
            found_clean_step = true;
            let shift: isize = if x1 > x0 { 1 } else { -1 };
            let (gr, gc) = scenario.grid;
            let before = &video.gt[t][0].patches;
            let after = &video.gt[t + 1][0].patches;
            for r in 0..gr {
                for c in 0..gc {
                    let shifted = c as isize + shift;
                    if (0..gc as isize).contains(&shifted) {
                        assert_eq!(
                            before[r * gc + c],
                            after[r * gc + shifted as usize],
                            "patch ({r},{c}) did not shift cleanly at t={t}"
                        );
                    }
                }
            }
        }
        assert!(found_clean_step, "no reflection-free step found in 4 frames");
    }

    #[test]
    fn nominal_fractions_land_in_their_strata() {
        let video = generate(&two_instance_scenario()).unwrap();
        for frame_gt in &video.gt {
            assert_eq!(frame_gt[0].stratum(), SizeStratum::Small, "{}", frame_gt[0].area_fraction());
            assert_eq!(frame_gt[1].stratum(), SizeStratum::Large, "{}", frame_gt[1].area_fraction());
        }
    }

    #[test]
    fn gt_patch_count_tracks_the_nominal_fraction_within_one_grid_row() {
        let scenario = SynthScenario {
            seed: 31,
            frames: 8,
            instances: vec![
                InstanceSpec { shape: ShapeKind::Disc, area_frac: 0.08, velocity: (0.7, -0.5), amplitude: 0.3 },
                InstanceSpec { shape: ShapeKind::Rect, area_frac: 0.18, velocity: (-0.3, 0.9), amplitude: 0.3 },
            ],
            ..SynthScenario::default()
        };
        let video = generate(&scenario).unwrap();
        let n = scenario.tokens() as f64;
        let row = scenario.grid.1;
        for frame_gt in &video.gt {
            for mask in frame_gt {
                assert!(mask.patch_count() >= 1);
                let nominal = scenario.instances[mask.instance].area_frac * n;
                let err = (mask.patch_count() as f64 - nominal).abs();
                assert!(
                    err <= row as f64,
                    "instance {} frame {}: {} patches vs nominal {nominal:.1}",
                    mask.instance,
                    mask.frame,
                    mask.patch_count()
                );
            }
        }
    }

    #[test]
    fn foreground_pixels_sit_above_background_on_average() {
        let mut scenario = two_instance_scenario();
        scenario.fg_offset = 0.2;
        let video = generate(&scenario).unwrap();
        let frame = &video.frames[0];
        let gt = foreground_union(&video.gt[0], scenario.tokens());
        let p = scenario.patch_size;
        let gc = scenario.grid.1;
        let mut fg_sum = 0.0;
        let mut fg_n = 0.0;
        let mut bg_sum = 0.0;
        let mut bg_n = 0.0;
        for y in 0..frame.height {
            for x in 0..frame.width {
                let patch = (y / p) * gc + (x / p);
                if gt[patch] {
                    fg_sum += frame.gray(y, x);
                    fg_n += 1.0;
                } else {
                    bg_sum += frame.gray(y, x);
                    bg_n += 1.0;
                }
            }
        }
        // GT patches include boundary background pixels, so the realized
        // mean gap is a fraction of fg_offset; it must still be clearly
        // positive.
        assert!(fg_sum / fg_n > bg_sum / bg_n + 0.05);
    }

    #[test]
    fn oversized_instance_is_rejected() {
        let mut scenario = SynthScenario::default();
        scenario.instances[0].area_frac = 0.6;
        scenario.grid = (2, 2);
        scenario.patch_size = 1;
        // A 0.6-area shape cannot keep its margin inside a 2x2-pixel image.
        assert!(matches!(generate(&scenario), Err(VppError::Config(_))));
    }

    #[test]
    fn config_round_trip_preserves_the_scenario() {
        let scenario = two_instance_scenario();
        let text = scenario.to_config_string();
        let parsed = SynthScenario::from_config_str(&text).unwrap();
        assert_eq!(parsed.seed, scenario.seed);
        assert_eq!(parsed.frames, scenario.frames);
        assert_eq!(parsed.grid, scenario.grid);
        assert_eq!(parsed.instances.len(), 2);
        assert_eq!(parsed.instances[1].shape, ShapeKind::Rect);
        assert!((parsed.instances[1].area_frac - 0.25).abs() < 1e-12);
        let a = generate(&scenario).unwrap();
        let b = generate(&parsed).unwrap();
        assert_eq!(a.frames[3].data(), b.frames[3].data());
    }

    #[test]
    fn config_parser_rejects_unknown_keys_and_bad_lines() {
        assert!(matches!(
            SynthScenario::from_config_str("sneed = 4"),
            Err(VppError::Parse(_))
        ));
        assert!(matches!(
            SynthScenario::from_config_str("just some words"),
            Err(VppError::Parse(_))
        ));
        assert!(matches!(
            SynthScenario::from_config_str("instance = blob area=0.1"),
            Err(VppError::Parse(_))
        ));
        // Comments and blank lines are fine.
        let ok = SynthScenario::from_config_str("# a comment\n\nseed = 9 # trailing\n").unwrap();
        assert_eq!(ok.seed, 9);
    }

    #[test]
    fn reflection_keeps_instances_inside_the_image() {
        let scenario = SynthScenario {
            seed: 13,
            frames: 40,
            instances: vec![InstanceSpec {
                shape: ShapeKind::Disc,
                area_frac: 0.1,
                velocity: (1.7, -2.3),
                amplitude: 0.25,
            }],
            ..SynthScenario::default()
        };
        let video = generate(&scenario).unwrap();
        let (h, w) = scenario.image_size();
        for t in 0..scenario.frames {
            let (cy, cx) = video.centers[t][0];
            assert!(cy > 0.0 && cy < h as f64);
            assert!(cx > 0.0 && cx < w as f64);
            assert!(video.gt[t][0].patch_count() >= 1);
        }
    }
}
