//! Paired-distribution generators: a clean source distribution together
//! with a conditional degradation, sampled as aligned pairs `(x0, x1)`.
//!
//! Two 2-D synthetic translation tasks (mixture shift, two-moons rotation)
//! and four tiny-image degradations (blur, mask, downsample, additive
//! noise) over procedurally generated smooth-blob images. Everything is
//! seeded and hermetic: identical `(kind, params, seed)` produce identical
//! pairs, and no external data is involved.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::batch::Batch;
use crate::util::{mix_seed, stream_rng};
use crate::{Error, Result};

/// Available paired tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// 2-D Gaussian mixture translated by a fixed offset plus noise.
    GaussShift,
    /// 2-D two-moons rotated 90 degrees plus noise.
    TwoMoonsRotate,
    /// Tiny image circularly convolved with a normalized box kernel.
    ImgBlur,
    /// Tiny image with a region zeroed (optionally refilled with noise).
    ImgMask,
    /// Tiny image average-pooled and nearest-upsampled.
    ImgDownsample,
    /// Tiny image plus additive Gaussian noise.
    ImgNoise,
}

/// Shape of the masked region for [`TaskKind::ImgMask`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskShape {
    /// A fixed centered square covering roughly the requested fraction.
    Rect,
    /// A fresh random walk per sample covering exactly the requested
    /// fraction of cells.
    Walk,
}

/// Knobs for every task family; unused fields are ignored by other kinds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskParams {
    // 2-D tasks.
    pub mixture_k: usize,
    pub mixture_radius: f64,
    pub component_std: f64,
    pub offset: Vec<f64>,
    pub pair_noise_std: f64,
    // Tiny-image tasks.
    pub img_side: usize,
    pub blob_count: usize,
    pub blur_width: usize,
    pub mask_fraction: f64,
    pub mask_shape: MaskShape,
    pub mask_noise_fill: bool,
    pub mask_noise_std: f64,
    pub down_factor: usize,
    pub noise_std: f64,
}

impl Default for TaskParams {
    fn default() -> Self {
        TaskParams {
            mixture_k: 4,
            mixture_radius: 0.8,
            component_std: 0.12,
            offset: vec![1.0, 0.6],
            pair_noise_std: 0.05,
            img_side: 8,
            blob_count: 3,
            blur_width: 3,
            mask_fraction: 0.25,
            mask_shape: MaskShape::Rect,
            mask_noise_fill: false,
            mask_noise_std: 0.5,
            down_factor: 2,
            noise_std: 0.3,
        }
    }
}

/// What the degradation does and whether it is exactly invertible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionInfo {
    pub description: String,
    /// True when x0 is recoverable from x1 alone with no information lost.
    /// Drives the deterministic-vs-stochastic sampler ablation.
    pub exact_recovery_feasible: bool,
}

/// A seeded paired sampler for one task instance.
#[derive(Clone, Debug)]
pub struct PairedDataset {
    kind: TaskKind,
    params: TaskParams,
    seed: u64,
    dim: usize,
    name: String,
    metadata: CorruptionInfo,
}

/// Per-dimension averaged second-moment summaries of a paired task.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorruptionStats {
    pub var_x0: f64,
    pub var_x1: f64,
    /// Average over dimensions of Cov[x0_j, x1_j].
    pub cross_cov: f64,
}

/// Builds a task instance, validating parameters for the requested kind.
pub fn make_task(kind: TaskKind, params: TaskParams, seed: u64) -> Result<PairedDataset> {
    let p = &params;
    let is_image = matches!(
        kind,
        TaskKind::ImgBlur | TaskKind::ImgMask | TaskKind::ImgDownsample | TaskKind::ImgNoise
    );
    if is_image {
        if !matches!(p.img_side, 8 | 16) {
            return Err(Error::Config(format!(
                "img_side must be 8 or 16, got {}",
                p.img_side
            )));
        }
        if p.blob_count == 0 {
            return Err(Error::Config("blob_count must be at least 1".into()));
        }
    }
    let (dim, name, metadata) = match kind {
        TaskKind::GaussShift => {
            if p.mixture_k == 0 {
                return Err(Error::Config("mixture_k must be at least 1".into()));
            }
            if p.offset.len() != 2 {
                return Err(Error::Config(format!(
                    "offset must have dimension 2, got {}",
                    p.offset.len()
                )));
            }
            if p.component_std < 0.0 || p.pair_noise_std < 0.0 || p.mixture_radius < 0.0 {
                return Err(Error::Config("scales must be nonnegative".into()));
            }
            (
                2,
                "gauss_shift".to_string(),
                CorruptionInfo {
                    description: format!(
                        "{}-component 2-D Gaussian mixture shifted by {:?} with noise std {}",
                        p.mixture_k, p.offset, p.pair_noise_std
                    ),
                    exact_recovery_feasible: p.pair_noise_std == 0.0,
                },
            )
        }
        TaskKind::TwoMoonsRotate => {
            if p.pair_noise_std < 0.0 {
                return Err(Error::Config("pair_noise_std must be nonnegative".into()));
            }
            (
                2,
                "two_moons_rotate".to_string(),
                CorruptionInfo {
                    description: format!(
                        "two moons rotated 90 degrees with noise std {}",
                        p.pair_noise_std
                    ),
                    exact_recovery_feasible: p.pair_noise_std == 0.0,
                },
            )
        }
        TaskKind::ImgBlur => {
            if p.blur_width == 0 || p.blur_width % 2 == 0 || p.blur_width > p.img_side {
                return Err(Error::Config(format!(
                    "blur_width must be odd and in 1..={}, got {}",
                    p.img_side, p.blur_width
                )));
            }
            // A circular box kernel of odd width on a power-of-two grid has
            // no zero frequency response, so the blur loses no information.
            (
                p.img_side * p.img_side,
                format!("img_blur_w{}_s{}", p.blur_width, p.img_side),
                CorruptionInfo {
                    description: format!(
                        "circular {0}x{0} box blur on a {1}x{1} image",
                        p.blur_width, p.img_side
                    ),
                    exact_recovery_feasible: true,
                },
            )
        }
        TaskKind::ImgMask => {
            if !(0.0..1.0).contains(&p.mask_fraction) {
                return Err(Error::Config(format!(
                    "mask_fraction must be in [0, 1), got {}",
                    p.mask_fraction
                )));
            }
            if p.mask_noise_std < 0.0 {
                return Err(Error::Config("mask_noise_std must be nonnegative".into()));
            }
            let fill = if p.mask_noise_fill { "noise" } else { "zero" };
            (
                p.img_side * p.img_side,
                format!("img_mask_f{}_{:?}_{}", p.mask_fraction, p.mask_shape, fill)
                    .to_lowercase(),
                CorruptionInfo {
                    description: format!(
                        "{:?} mask covering fraction {} of a {2}x{2} image, {3}-filled",
                        p.mask_shape, p.mask_fraction, p.img_side, fill
                    ),
                    exact_recovery_feasible: p.mask_fraction == 0.0,
                },
            )
        }
        TaskKind::ImgDownsample => {
            if p.down_factor == 0 || p.img_side % p.down_factor != 0 {
                return Err(Error::Config(format!(
                    "down_factor must divide img_side {}, got {}",
                    p.img_side, p.down_factor
                )));
            }
            (
                p.img_side * p.img_side,
                format!("img_down_f{}_s{}", p.down_factor, p.img_side),
                CorruptionInfo {
                    description: format!(
                        "average-pool by {} then nearest-upsample on a {1}x{1} image",
                        p.down_factor, p.img_side
                    ),
                    exact_recovery_feasible: p.down_factor == 1,
                },
            )
        }
        TaskKind::ImgNoise => {
            if p.noise_std < 0.0 {
                return Err(Error::Config("noise_std must be nonnegative".into()));
            }
            (
                p.img_side * p.img_side,
                format!("img_noise_s{}", p.img_side),
                CorruptionInfo {
                    description: format!(
                        "additive Gaussian noise std {} on a {1}x{1} image",
                        p.noise_std, p.img_side
                    ),
                    exact_recovery_feasible: p.noise_std == 0.0,
                },
            )
        }
    };
    Ok(PairedDataset { kind, params, seed, dim, name, metadata })
}

impl PairedDataset {
    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    pub fn params(&self) -> &TaskParams {
        &self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn metadata(&self) -> &CorruptionInfo {
        &self.metadata
    }

    /// Draws `count` aligned pairs; identical `(draw_seed, count)` yield
    /// identical batches.
    pub fn sample_pairs(&self, draw_seed: u64, count: usize) -> (Batch, Batch) {
        let mut rng = stream_rng(mix_seed(self.seed, 0x7A5C_0DA7), draw_seed);
        self.sample_pairs_rng(&mut rng, count)
    }

    /// Draws `count` aligned pairs advancing the caller's RNG.
    pub fn sample_pairs_rng(&self, rng: &mut ChaCha8Rng, count: usize) -> (Batch, Batch) {
        let mut x0s = Batch::zeros(count, self.dim);
        let mut x1s = Batch::zeros(count, self.dim);
        for i in 0..count {
            // Split borrows: rows of two distinct batches.
            let mut x0 = vec![0.0; self.dim];
            let mut x1 = vec![0.0; self.dim];
            self.sample_one(rng, &mut x0, &mut x1);
            x0s.row_mut(i).copy_from_slice(&x0);
            x1s.row_mut(i).copy_from_slice(&x1);
        }
        (x0s, x1s)
    }

    fn sample_one(&self, rng: &mut ChaCha8Rng, x0: &mut [f64], x1: &mut [f64]) {
        let p = &self.params;
        match self.kind {
            TaskKind::GaussShift => {
                let comp = rng.random_range(0..p.mixture_k);
                let angle = std::f64::consts::TAU * comp as f64 / p.mixture_k as f64;
                x0[0] = p.mixture_radius * angle.cos()
                    + p.component_std * rng.sample::<f64, _>(StandardNormal);
                x0[1] = p.mixture_radius * angle.sin()
                    + p.component_std * rng.sample::<f64, _>(StandardNormal);
                for j in 0..2 {
                    x1[j] = x0[j]
                        + p.offset[j]
                        + p.pair_noise_std * rng.sample::<f64, _>(StandardNormal);
                }
            }
            TaskKind::TwoMoonsRotate => {
                let upper = rng.random_range(0..2u8) == 0;
                let phi = rng.random_range(0.0..std::f64::consts::PI);
                let (mut u, mut v) = if upper {
                    (phi.cos(), phi.sin())
                } else {
                    (1.0 - phi.cos(), 0.5 - phi.sin())
                };
                // Center the two-moons point cloud and scale it inside the
                // unit box.
                u = 0.7 * (u - 0.5);
                v = 0.7 * (v - 0.25);
                x0[0] = u;
                x0[1] = v;
                // 90-degree counterclockwise rotation.
                x1[0] = -v + p.pair_noise_std * rng.sample::<f64, _>(StandardNormal);
                x1[1] = u + p.pair_noise_std * rng.sample::<f64, _>(StandardNormal);
            }
            TaskKind::ImgBlur
            | TaskKind::ImgMask
            | TaskKind::ImgDownsample
            | TaskKind::ImgNoise => {
                self.sample_blob_image(rng, x0);
                self.degrade_image(rng, x0, x1);
            }
        }
    }

    /// Sum of a few random signed Gaussian bumps on the pixel grid.
    fn sample_blob_image(&self, rng: &mut ChaCha8Rng, out: &mut [f64]) {
        let g = self.params.img_side;
        out.fill(0.0);
        for _ in 0..self.params.blob_count {
            let amp_mag = rng.random_range(0.3..0.9);
            let amp = if rng.random_range(0..2u8) == 0 { amp_mag } else { -amp_mag };
            let cx = rng.random_range(0.0..g as f64);
            let cy = rng.random_range(0.0..g as f64);
            let width = rng.random_range(0.8..g as f64 / 3.0);
            let inv = 1.0 / (2.0 * width * width);
            for u in 0..g {
                for v in 0..g {
                    let du = u as f64 - cx;
                    let dv = v as f64 - cy;
                    out[u * g + v] += amp * (-(du * du + dv * dv) * inv).exp();
                }
            }
        }
    }

    fn degrade_image(&self, rng: &mut ChaCha8Rng, x0: &[f64], x1: &mut [f64]) {
        let p = &self.params;
        let g = p.img_side;
        match self.kind {
            TaskKind::ImgBlur => {
                // Separable circular box blur: rows then columns.
                let w = p.blur_width;
                let h = (w / 2) as isize;
                let inv_w = 1.0 / w as f64;
                let mut tmp = vec![0.0; g * g];
                for u in 0..g {
                    for v in 0..g {
                        let mut acc = 0.0;
                        for k in -h..=h {
                            let vv = (v as isize + k).rem_euclid(g as isize) as usize;
                            acc += x0[u * g + vv];
                        }
                        tmp[u * g + v] = acc * inv_w;
                    }
                }
                for u in 0..g {
                    for v in 0..g {
                        let mut acc = 0.0;
                        for k in -h..=h {
                            let uu = (u as isize + k).rem_euclid(g as isize) as usize;
                            acc += tmp[uu * g + v];
                        }
                        x1[u * g + v] = acc * inv_w;
                    }
                }
            }
            TaskKind::ImgMask => {
                x1.copy_from_slice(x0);
                let cells = self.mask_cells(rng);
                for &c in &cells {
                    x1[c] = if p.mask_noise_fill {
                        p.mask_noise_std * rng.sample::<f64, _>(StandardNormal)
                    } else {
                        0.0
                    };
                }
            }
            TaskKind::ImgDownsample => {
                let f = p.down_factor;
                let coarse = g / f;
                for bu in 0..coarse {
                    for bv in 0..coarse {
                        let mut acc = 0.0;
                        for du in 0..f {
                            for dv in 0..f {
                                acc += x0[(bu * f + du) * g + bv * f + dv];
                            }
                        }
                        let avg = acc / (f * f) as f64;
                        for du in 0..f {
                            for dv in 0..f {
                                x1[(bu * f + du) * g + bv * f + dv] = avg;
                            }
                        }
                    }
                }
            }
            TaskKind::ImgNoise => {
                for j in 0..g * g {
                    x1[j] = x0[j] + p.noise_std * rng.sample::<f64, _>(StandardNormal);
                }
            }
            _ => unreachable!("degrade_image is only called for image kinds"),
        }
    }

    /// Indices of masked cells. The rectangle is fixed per task; the walk is
    /// redrawn per sample from the pair RNG.
    fn mask_cells(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let p = &self.params;
        let g = p.img_side;
        if p.mask_fraction == 0.0 {
            return Vec::new();
        }
        match p.mask_shape {
            MaskShape::Rect => {
                let side = ((g as f64 * p.mask_fraction.sqrt()).round() as usize).clamp(1, g);
                let start = (g - side) / 2;
                let mut cells = Vec::with_capacity(side * side);
                for u in start..start + side {
                    for v in start..start + side {
                        cells.push(u * g + v);
                    }
                }
                cells
            }
            MaskShape::Walk => {
                let target = ((p.mask_fraction * (g * g) as f64).ceil() as usize).max(1);
                let mut visited = vec![false; g * g];
                let mut cells = Vec::with_capacity(target);
                let mut u = rng.random_range(0..g);
                let mut v = rng.random_range(0..g);
                let mut guard = 0usize;
                while cells.len() < target && guard < 64 * g * g {
                    guard += 1;
                    if !visited[u * g + v] {
                        visited[u * g + v] = true;
                        cells.push(u * g + v);
                    }
                    match rng.random_range(0..4u8) {
                        0 => u = (u + 1) % g,
                        1 => u = (u + g - 1) % g,
                        2 => v = (v + 1) % g,
                        _ => v = (v + g - 1) % g,
                    }
                }
                cells
            }
        }
    }
}

/// Unbiased per-dimension second-moment summaries over `n_samples` pairs.
pub fn corruption_stats(
    task: &PairedDataset,
    n_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<CorruptionStats> {
    if n_samples < 1000 {
        return Err(Error::Config(format!(
            "n_samples must be at least 1000 for stable moments, got {n_samples}"
        )));
    }
    let (x0s, x1s) = task.sample_pairs_rng(rng, n_samples);
    let d = task.dim();
    let n = n_samples as f64;
    let mut var0 = 0.0;
    let mut var1 = 0.0;
    let mut cross = 0.0;
    for j in 0..d {
        let col0: Vec<f64> = (0..n_samples).map(|i| x0s.row(i)[j]).collect();
        let col1: Vec<f64> = (0..n_samples).map(|i| x1s.row(i)[j]).collect();
        let m0 = crate::util::mean(&col0);
        let m1 = crate::util::mean(&col1);
        let mut v0 = 0.0;
        let mut v1 = 0.0;
        let mut cv = 0.0;
        for i in 0..n_samples {
            let a = col0[i] - m0;
            let b = col1[i] - m1;
            v0 += a * a;
            v1 += b * b;
            cv += a * b;
        }
        var0 += v0 / (n - 1.0);
        var1 += v1 / (n - 1.0);
        cross += cv / (n - 1.0);
    }
    let d = d as f64;
    Ok(CorruptionStats { var_x0: var0 / d, var_x1: var1 / d, cross_cov: cross / d })
}
