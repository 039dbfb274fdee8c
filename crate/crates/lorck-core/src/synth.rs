//! Synthetic hollow objects and multi-slice phantoms with 3-class
//! annotations, plus the kernel-scale boundary-highlighting study.
//!
//! The phantom stands in for clinical data: two concentric deformed elliptic
//! bands (inner and outer wall) around a dark lumen, one bright irregular
//! tumor blob attached to the inner band, smooth slice-to-slice drift, and a
//! textured background. Everything is deterministic from its seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, DatasetMeta};
use crate::error::{Error, Result};
use crate::hollow::{make_annulus_mask, HollowMask};
use crate::tensor::{convolve_image, Element, Tensor};

// ---------------------------------------------------------------------------
// hollow objects (kernel-scale study input)
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeFamily {
    Ring,
    Ellipse,
}

#[derive(Clone, Debug)]
pub struct HollowObjectParams {
    pub family: ShapeFamily,
    /// Outer semi-axes in pixels (equal for `Ring`).
    pub semi_axes: (f64, f64),
    pub wall_width: f64,
    pub wall_intensity: f64,
    pub cavity_intensity: f64,
    pub background_intensity: f64,
    pub noise_sigma: f64,
}

impl Default for HollowObjectParams {
    fn default() -> Self {
        // bladder-like contrast: dark lumen, bright wall, soft tissue outside
        // only faintly darker than the wall
        HollowObjectParams {
            family: ShapeFamily::Ring,
            semi_axes: (15.0, 15.0),
            wall_width: 5.0,
            wall_intensity: 0.85,
            cavity_intensity: 0.05,
            background_intensity: 0.60,
            noise_sigma: 0.0,
        }
    }
}

/// A grayscale hollow object with its ground-truth band mask.
#[derive(Clone, Debug)]
pub struct HollowObjectImage {
    pub image: Tensor<f32>,
    pub band: Vec<u8>,
    pub size: usize,
    pub params: HollowObjectParams,
}

/// Draw a hollow object into a `size` x `size` image. The band pixel set is
/// exactly the analytic annulus rule evaluated at the image center.
pub fn gen_hollow_object(params: &HollowObjectParams, size: usize, seed: u64) -> Result<HollowObjectImage> {
    let (a, b) = match params.family {
        ShapeFamily::Ring => {
            let r = params.semi_axes.0;
            (r, r)
        }
        ShapeFamily::Ellipse => params.semi_axes,
    };
    if params.wall_width < 1.0 {
        return Err(Error::invalid("gen_hollow_object", "wall width must be >= 1 pixel"));
    }
    if a.min(b) <= params.wall_width {
        return Err(Error::invalid("gen_hollow_object", "wall leaves no cavity"));
    }
    let c = (size as f64 - 1.0) / 2.0;
    if a > c || b > c {
        return Err(Error::invalid("gen_hollow_object", "band exceeds image bounds"));
    }
    let contrast_cavity = (params.wall_intensity - params.cavity_intensity).abs();
    let contrast_bg = (params.wall_intensity - params.background_intensity).abs();
    if contrast_cavity < 0.2 || contrast_bg < 0.2 {
        return Err(Error::invalid("gen_hollow_object", "wall contrast below 0.2"));
    }

    let inner = 1.0 - params.wall_width / a.min(b);
    let mut band = vec![0u8; size * size];
    let mut img = vec![0f32; size * size];
    for i in 0..size {
        for j in 0..size {
            let rho = (((i as f64 - c) / a).powi(2) + ((j as f64 - c) / b).powi(2)).sqrt();
            let at = i * size + j;
            if rho >= inner && rho <= 1.0 {
                band[at] = 1;
                img[at] = params.wall_intensity as f32;
            } else if rho < inner {
                img[at] = params.cavity_intensity as f32;
            } else {
                img[at] = params.background_intensity as f32;
            }
        }
    }
    if params.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in img.iter_mut() {
            *v += (f64::std_normal(&mut rng) * params.noise_sigma) as f32;
        }
    }
    Ok(HollowObjectImage {
        image: Tensor::from_vec(vec![size, size], img)?,
        band,
        size,
        params: params.clone(),
    })
}

// ---------------------------------------------------------------------------
// boundary sharpness
// ---------------------------------------------------------------------------

fn flood_outside(n: usize, band: &[u8]) -> Vec<bool> {
    let mut outside = vec![false; band.len()];
    let mut stack = Vec::new();
    for i in 0..n {
        for idx in [i, (n - 1) * n + i, i * n, i * n + n - 1] {
            if band[idx] == 0 && !outside[idx] {
                outside[idx] = true;
                stack.push(idx);
            }
        }
    }
    while let Some(at) = stack.pop() {
        let (i, j) = (at / n, at % n);
        for (di, dj) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
            let (ni, nj) = (i as i64 + di, j as i64 + dj);
            if ni >= 0 && nj >= 0 && ni < n as i64 && nj < n as i64 {
                let idx = ni as usize * n + nj as usize;
                if band[idx] == 0 && !outside[idx] {
                    outside[idx] = true;
                    stack.push(idx);
                }
            }
        }
    }
    outside
}

/// Outer contour of a band mask: band pixels 4-adjacent to the outside
/// region (or on the image border).
pub fn outer_contour(size: usize, band: &[u8]) -> Vec<usize> {
    let outside = flood_outside(size, band);
    let mut contour = Vec::new();
    for i in 0..size {
        for j in 0..size {
            let at = i * size + j;
            if band[at] != 1 {
                continue;
            }
            let mut on_edge = i == 0 || j == 0 || i == size - 1 || j == size - 1;
            for (di, dj) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                let (ni, nj) = (i as i64 + di, j as i64 + dj);
                if ni >= 0 && nj >= 0 && ni < size as i64 && nj < size as i64 {
                    on_edge |= outside[ni as usize * size + nj as usize];
                }
            }
            if on_edge {
                contour.push(at);
            }
        }
    }
    contour
}

/// Ratio of the mean gradient magnitude within 2 px of the ground-truth
/// outer contour to the mean gradient magnitude elsewhere (plus 1e-9).
/// Invariant under positive affine intensity maps of the image.
pub fn boundary_sharpness<E: Element>(image: &Tensor<E>, size: usize, band: &[u8]) -> Result<f64> {
    if image.shape() != [size, size] || band.len() != size * size {
        return Err(Error::shape("boundary_sharpness", format!("{:?}", image.shape())));
    }
    let contour = outer_contour(size, band);
    if contour.is_empty() {
        return Err(Error::invalid("boundary_sharpness", "empty contour"));
    }
    // mark the <= 2 px tube around the contour
    let mut tube = vec![false; size * size];
    for &at in &contour {
        let (i, j) = ((at / size) as i64, (at % size) as i64);
        for di in -2i64..=2 {
            for dj in -2i64..=2 {
                if di * di + dj * dj > 4 {
                    continue;
                }
                let (ni, nj) = (i + di, j + dj);
                if ni >= 0 && nj >= 0 && ni < size as i64 && nj < size as i64 {
                    tube[ni as usize * size + nj as usize] = true;
                }
            }
        }
    }
    let v = image.data();
    let grad = |i: usize, j: usize| -> f64 {
        let gx = (v[i * size + (j + 1).min(size - 1)].to_f64()
            - v[i * size + j.saturating_sub(1)].to_f64())
            / 2.0;
        let gy = (v[(i + 1).min(size - 1) * size + j].to_f64()
            - v[i.saturating_sub(1) * size + j].to_f64())
            / 2.0;
        (gx * gx + gy * gy).sqrt()
    };
    let (mut tube_sum, mut tube_n, mut rest_sum, mut rest_n) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..size {
        for j in 0..size {
            let g = grad(i, j);
            if tube[i * size + j] {
                tube_sum += g;
                tube_n += 1;
            } else {
                rest_sum += g;
                rest_n += 1;
            }
        }
    }
    let tube_mean = tube_sum / tube_n.max(1) as f64;
    let rest_mean = rest_sum / rest_n.max(1) as f64;
    Ok(tube_mean / (rest_mean + 1e-9))
}

// ---------------------------------------------------------------------------
// kernel-scale study
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct StudyEntry {
    pub kernel_size: usize,
    pub score: f64,
    pub output: Tensor<f32>,
}

#[derive(Clone, Debug)]
pub struct ScaleStudyResult {
    pub entries: Vec<StudyEntry>,
}

impl ScaleStudyResult {
    pub fn argmax_kernel(&self) -> usize {
        self.entries
            .iter()
            .max_by(|a, b| a.score.partial_cmp(&b.score).unwrap())
            .map(|e| e.kernel_size)
            .unwrap_or(0)
    }

    pub fn score_of(&self, k: usize) -> Option<f64> {
        self.entries.iter().find(|e| e.kernel_size == k).map(|e| e.score)
    }
}

/// Hollow averaging kernel homothetic to the object: an annulus with the
/// object's aspect ratio and proportionally scaled wall, normalized to unit
/// sum over the band. Sizes too small for a two-sided annulus fall back to
/// the thinnest closed ring of the grid.
pub fn study_kernel(k: usize, object: &HollowObjectParams) -> Result<Tensor<f32>> {
    if k == 1 {
        // identity kernel: the output equals the input
        return Tensor::from_vec(vec![1, 1], vec![1.0]);
    }
    let (a, b) = match object.family {
        ShapeFamily::Ring => (object.semi_axes.0, object.semi_axes.0),
        ShapeFamily::Ellipse => object.semi_axes,
    };
    let scale = (k as f64 - 1.0) / 2.0 / a.max(b);
    let (ka, kb) = (a * scale, b * scale);
    let kw = (object.wall_width * scale).round().max(1.0);
    let mask: HollowMask = match make_annulus_mask(k, (ka, kb), kw) {
        Ok(m) => m,
        Err(_) => {
            // smallest scales: the border ring of the K x K grid
            let mut grid = vec![0u8; k * k];
            for i in 0..k {
                for j in 0..k {
                    if i == 0 || j == 0 || i == k - 1 || j == k - 1 {
                        grid[i * k + j] = 1;
                    }
                }
            }
            HollowMask::from_grid(
                k,
                grid,
                crate::hollow::MaskSource::Annulus { semi_axes: (ka, kb), wall: 1.0 },
            )?
        }
    };
    let nnz = mask.band_len() as f32;
    let data: Vec<f32> = mask.grid().iter().map(|&v| v as f32 / nnz).collect();
    Tensor::from_vec(vec![k, k], data)
}

/// Convolve the object with homothetic hollow kernels of the given sizes
/// (stride 1, zero padding preserving the extent), min-max normalize, and
/// score each output's boundary emphasis.
pub fn kernel_scale_study(object: &HollowObjectImage, kernel_sizes: &[usize]) -> Result<ScaleStudyResult> {
    let mut entries = Vec::with_capacity(kernel_sizes.len());
    for &k in kernel_sizes {
        if k > object.size {
            return Err(Error::invalid("kernel_scale_study", format!("kernel {} exceeds image", k)));
        }
        let kernel = study_kernel(k, &object.params)?;
        let convolved = convolve_image(&object.image, &kernel)?;
        // min-max normalize
        let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
        for &v in convolved.data() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let range = if hi > lo { hi - lo } else { 1.0 };
        let normalized = convolved.map(|v| (v - lo) / range);
        let score = boundary_sharpness(&normalized, object.size, &object.band)?;
        entries.push(StudyEntry { kernel_size: k, score, output: normalized });
    }
    Ok(ScaleStudyResult { entries })
}

// ---------------------------------------------------------------------------
// phantom stacks
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Difficulty {
    Easy,
    BlurredWall,
    AttachedTumor,
}

impl std::str::FromStr for Difficulty {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(Difficulty::Easy),
            "blurred-wall" => Ok(Difficulty::BlurredWall),
            "attached-tumor" => Ok(Difficulty::AttachedTumor),
            other => Err(Error::Config(format!("unknown difficulty preset `{}`", other))),
        }
    }
}

impl Difficulty {
    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::BlurredWall => "blurred-wall",
            Difficulty::AttachedTumor => "attached-tumor",
        }
    }

    /// Acceptable per-class pixel fractions over a whole stack
    /// (inner wall, outer wall, tumor), checked by tests.
    pub fn class_fraction_ranges(self) -> [(f64, f64); 3] {
        [(0.004, 0.12), (0.005, 0.15), (0.0005, 0.08)]
    }

    fn noise_sigma(self) -> f64 {
        match self {
            Difficulty::Easy => 0.015,
            Difficulty::BlurredWall => 0.03,
            Difficulty::AttachedTumor => 0.02,
        }
    }

    fn blur(self) -> bool {
        matches!(self, Difficulty::BlurredWall)
    }

    /// How deep the tumor sinks into the inner band (pixels).
    fn tumor_overlap(self) -> f64 {
        match self {
            Difficulty::Easy => 1.0,
            Difficulty::BlurredWall => 1.5,
            Difficulty::AttachedTumor => 3.5,
        }
    }

    fn tumor_intensity(self) -> f64 {
        match self {
            Difficulty::AttachedTumor => 0.62, // close to the wall's 0.48..0.72
            _ => 0.88,
        }
    }
}

/// Analytic geometry of one slice, recorded for drift checks.
#[derive(Clone, Debug)]
pub struct SliceGeom {
    pub present: bool,
    pub center: (f64, f64),
    pub axes: (f64, f64),
    pub tumor: Option<(f64, f64, f64)>, // (cy, cx, radius)
}

#[derive(Clone, Debug)]
pub struct SyntheticStack {
    pub images: Tensor<f32>, // [T, 1, n, n]
    pub masks: Vec<u8>,      // [T, 3, n, n]
    pub size: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub geoms: Vec<SliceGeom>,
}

impl SyntheticStack {
    pub fn mask_shape(&self) -> Vec<usize> {
        vec![self.seq_len, 3, self.size, self.size]
    }

    /// Pixel fraction of each class over the whole stack.
    pub fn class_fractions(&self) -> [f64; 3] {
        let hw = self.size * self.size;
        let mut counts = [0usize; 3];
        for t in 0..self.seq_len {
            for c in 0..3 {
                let base = (t * 3 + c) * hw;
                counts[c] += self.masks[base..base + hw].iter().filter(|&&v| v == 1).count();
            }
        }
        let total = (self.seq_len * hw) as f64;
        [counts[0] as f64 / total, counts[1] as f64 / total, counts[2] as f64 / total]
    }

    /// Slices on which a class has at least one pixel.
    pub fn slices_with_class(&self, class: usize) -> usize {
        let hw = self.size * self.size;
        (0..self.seq_len)
            .filter(|t| {
                let base = (t * 3 + class) * hw;
                self.masks[base..base + hw].iter().any(|&v| v == 1)
            })
            .count()
    }

    pub fn mask_plane(&self, t: usize, class: usize) -> &[u8] {
        let hw = self.size * self.size;
        let base = (t * 3 + class) * hw;
        &self.masks[base..base + hw]
    }
}

fn smooth5(img: &mut [f32], n: usize) {
    const K: [f32; 5] = [0.06136, 0.24477, 0.38774, 0.24477, 0.06136];
    let mut tmp = vec![0f32; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for (d, &w) in K.iter().enumerate() {
                let jj = (j + d).saturating_sub(2).min(n - 1);
                acc += w * img[i * n + jj];
            }
            tmp[i * n + j] = acc;
        }
    }
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for (d, &w) in K.iter().enumerate() {
                let ii = (i + d).saturating_sub(2).min(n - 1);
                acc += w * tmp[ii * n + j];
            }
            img[i * n + j] = acc;
        }
    }
}

/// Deterministic phantom stack: deformed concentric bands with elliptic-slice
/// profile over T (organ absent near the stack ends), a tumor blob attached
/// to the inner band, textured background.
pub fn gen_phantom_stack(seed: u64, seq_len: usize, size: usize, difficulty: Difficulty) -> Result<SyntheticStack> {
    gen_phantom_stack_with_drift(seed, seq_len, size, difficulty, 1.0)
}

/// `gen_phantom_stack` with an explicit slice-drift amplitude. Amplitude 0
/// draws one slice and replicates it across the stack.
pub fn gen_phantom_stack_with_drift(
    seed: u64,
    seq_len: usize,
    size: usize,
    difficulty: Difficulty,
    drift: f64,
) -> Result<SyntheticStack> {
    if drift == 0.0 {
        let one = gen_phantom_stack_with_drift(seed, 2, size, difficulty, 1.0)?;
        let hw = size * size;
        let mut images = Vec::with_capacity(seq_len * hw);
        let mut masks = Vec::with_capacity(seq_len * 3 * hw);
        let mut geoms = Vec::with_capacity(seq_len);
        for _ in 0..seq_len {
            images.extend_from_slice(&one.images.data()[..hw]);
            masks.extend_from_slice(&one.masks[..3 * hw]);
            geoms.push(one.geoms[0].clone());
        }
        return Ok(SyntheticStack {
            images: Tensor::from_vec(vec![seq_len, 1, size, size], images)?,
            masks,
            size,
            seq_len,
            seed,
            geoms,
        });
    }
    if size < 32 {
        return Err(Error::invalid("gen_phantom_stack", "size too small to hold the bands"));
    }
    if seq_len < 2 {
        return Err(Error::invalid("gen_phantom_stack", "need at least 2 slices"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = size;
    let nf = size as f64;

    // stack-level geometry
    let base_axes = (nf * rng.gen_range(0.26..0.33), nf * rng.gen_range(0.26..0.33));
    let center0 = (nf / 2.0 + rng.gen_range(-2.0..2.0), nf / 2.0 + rng.gen_range(-2.0..2.0));
    let w_outer = (nf * rng.gen_range(0.055..0.075)).max(2.0);
    let w_inner = (nf * rng.gen_range(0.045..0.065)).max(2.0);
    let t_center = (seq_len as f64 - 1.0) / 2.0 + rng.gen_range(-0.5..0.5);
    let t_radius = seq_len as f64 * rng.gen_range(0.52..0.60);
    // boundary deformation harmonics
    let deform: Vec<(f64, f64, f64)> = (2..4)
        .map(|k| (k as f64, rng.gen_range(0.01..0.04), rng.gen_range(0.0..std::f64::consts::TAU)))
        .collect();
    let tumor_angle0 = rng.gen_range(0.0..std::f64::consts::TAU);
    let tumor_radius0 = nf * rng.gen_range(0.055..0.085);
    let tumor_deform: Vec<(f64, f64, f64)> = (2..5)
        .map(|k| (k as f64, rng.gen_range(0.05..0.18), rng.gen_range(0.0..std::f64::consts::TAU)))
        .collect();
    // background texture
    let tex: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.05..0.25),
                rng.gen_range(0.05..0.25),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.01..0.03),
            )
        })
        .collect();

    let intensity_lumen = 0.06;
    let intensity_inner = 0.72;
    let intensity_outer = 0.48;
    let intensity_bg = 0.18;
    let tumor_intensity = difficulty.tumor_intensity();
    let min_axis = nf * 0.09;

    let hw = n * n;
    let mut images = vec![0f32; seq_len * hw];
    let mut masks = vec![0u8; seq_len * 3 * hw];
    let mut geoms = Vec::with_capacity(seq_len);

    let mut prev_axes: Option<(f64, f64)> = None;
    for t in 0..seq_len {
        // elliptic profile with clamped inter-slice change
        let dt = (t as f64 - t_center) / t_radius;
        let profile = (1.0 - dt * dt).max(0.0).sqrt();
        let jitter = 1.0 + rng.gen_range(-0.03..0.03);
        let mut axes = (base_axes.0 * profile * jitter, base_axes.1 * profile * jitter);
        if let Some(prev) = prev_axes {
            axes.0 = axes.0.clamp(prev.0 * 0.9, prev.0 * 1.1);
            axes.1 = axes.1.clamp(prev.1 * 0.9, prev.1 * 1.1);
        }
        let center = (
            center0.0 + rng.gen_range(-0.7..0.7) + (t as f64 - t_center) * 0.15,
            center0.1 + rng.gen_range(-0.7..0.7),
        );
        let present = axes.0.min(axes.1) >= min_axis;
        prev_axes = if present { Some(axes) } else { None };

        // tumor keeps its angular position with slow drift
        let tumor_angle = tumor_angle0 + t as f64 * 0.06;
        let tumor_profile = (1.0 - ((t as f64 - t_center) / (t_radius * 0.85)).powi(2)).max(0.0).sqrt();
        let tumor_r = tumor_radius0 * tumor_profile;
        let has_tumor = present && tumor_r >= nf * 0.03;

        let img = &mut images[t * hw..(t + 1) * hw];
        let mask = &mut masks[t * 3 * hw..(t + 1) * 3 * hw];

        // background texture + noise
        for i in 0..n {
            for j in 0..n {
                let mut v = intensity_bg;
                for &(fy, fx, ph, amp) in &tex {
                    v += amp * (fy * i as f64 + fx * j as f64 + ph).sin();
                }
                v += f64::std_normal(&mut rng) * difficulty.noise_sigma();
                img[i * n + j] = v as f32;
            }
        }

        let mut geom = SliceGeom { present, center, axes, tumor: None };
        if present {
            let (a, b) = axes;
            let m = a.min(b);
            let rho_mid = 1.0 - w_outer / m;
            let rho_in = rho_mid - w_inner / m;
            for i in 0..n {
                for j in 0..n {
                    let dy = i as f64 - center.0;
                    let dx = j as f64 - center.1;
                    let theta = dy.atan2(dx);
                    let mut rmod = 1.0;
                    for &(k, eps, ph) in &deform {
                        rmod += eps * (k * theta + ph).cos();
                    }
                    let rho = ((dy / a).powi(2) + (dx / b).powi(2)).sqrt() / rmod;
                    let at = i * n + j;
                    if rho <= rho_in {
                        img[at] = (intensity_lumen
                            + f64::std_normal(&mut rng) * difficulty.noise_sigma() * 0.6)
                            as f32;
                    } else if rho <= rho_mid {
                        img[at] = (intensity_inner
                            + f64::std_normal(&mut rng) * difficulty.noise_sigma())
                            as f32;
                        mask[at] = 1; // inner wall channel 0
                    } else if rho <= 1.0 {
                        img[at] = (intensity_outer
                            + f64::std_normal(&mut rng) * difficulty.noise_sigma())
                            as f32;
                        mask[hw + at] = 1; // outer wall channel 1
                    }
                }
            }

            if has_tumor {
                // blob center sits on the inner edge of the inner band,
                // sunk `tumor_overlap` pixels into it
                let dir = (tumor_angle.sin(), tumor_angle.cos());
                let edge_r = rho_in;
                // radius along the direction in pixels (elliptic)
                let r_pix = edge_r * a * b
                    / ((b * tumor_angle.sin()).powi(2) + (a * tumor_angle.cos()).powi(2)).sqrt();
                let sink = difficulty.tumor_overlap();
                let tc = (
                    center.0 + dir.0 * (r_pix - tumor_r + sink),
                    center.1 + dir.1 * (r_pix - tumor_r + sink),
                );
                geom.tumor = Some((tc.0, tc.1, tumor_r));
                for i in 0..n {
                    for j in 0..n {
                        let dy = i as f64 - tc.0;
                        let dx = j as f64 - tc.1;
                        let phi = dy.atan2(dx);
                        let mut bmod = 1.0;
                        for &(k, eps, ph) in &tumor_deform {
                            bmod += eps * (k * phi + ph).cos();
                        }
                        let d = (dy * dy + dx * dx).sqrt();
                        if d <= tumor_r * bmod {
                            let at = i * n + j;
                            let hetero = 0.08 * ((0.9 * i as f64 + 0.6 * j as f64).sin())
                                + f64::std_normal(&mut rng) * difficulty.noise_sigma() * 1.5;
                            img[at] = (tumor_intensity + hetero) as f32;
                            mask[2 * hw + at] = 1; // tumor channel 2
                        }
                    }
                }
            }
        }
        if difficulty.blur() {
            smooth5(img, n);
        }
        geoms.push(geom);
    }

    Ok(SyntheticStack {
        images: Tensor::from_vec(vec![seq_len, 1, n, n], images)?,
        masks,
        size: n,
        seq_len,
        seed,
        geoms,
    })
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Per-stack seed derived from a master seed by a splittable counter.
pub fn stack_seed(master: u64, index: usize) -> u64 {
    splitmix64(master ^ splitmix64(index as u64 + 1))
}

/// Generate a whole dataset: `stacks` phantom stacks, the first
/// `train_stacks` forming the training split. A stack is regenerated with a
/// derived seed (bounded retries) if a class is non-empty on fewer than
/// ceil(T/2) slices.
pub fn gen_dataset(
    master_seed: u64,
    stacks: usize,
    train_stacks: usize,
    seq_len: usize,
    size: usize,
    difficulty: Difficulty,
) -> Result<Dataset> {
    let mut images = Vec::with_capacity(stacks * seq_len * size * size);
    let mut masks = Vec::with_capacity(stacks * seq_len * 3 * size * size);
    let need = seq_len.div_ceil(2);
    for s in 0..stacks {
        let mut stack = None;
        for attempt in 0..16u64 {
            let seed = stack_seed(master_seed, s).wrapping_add(attempt * 0x5851F42D4C957F2D);
            let candidate = gen_phantom_stack(seed, seq_len, size, difficulty)?;
            if (0..3).all(|c| candidate.slices_with_class(c) >= need) {
                stack = Some(candidate);
                break;
            }
        }
        let stack = stack.ok_or_else(|| {
            Error::Data(format!("stack {} never satisfied the class-presence target", s))
        })?;
        images.extend_from_slice(stack.images.data());
        masks.extend_from_slice(&stack.masks);
    }
    let count = images.len() as f64;
    let mean = images.iter().map(|&v| v as f64).sum::<f64>() / count;
    let var = images.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / count;
    let meta = DatasetMeta {
        stacks,
        train_stacks,
        seq_len,
        size,
        seed: master_seed,
        preset: difficulty.name().to_string(),
        mean,
        std: var.sqrt().max(1e-6),
    };
    Dataset::new(
        meta,
        Tensor::from_vec(vec![stacks, seq_len, 1, size, size], images)?,
        vec![stacks, seq_len, 3, size, size],
        masks,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hollow_object_band_matches_annulus_rule() {
        let params = HollowObjectParams { semi_axes: (20.0, 20.0), ..Default::default() };
        let obj = gen_hollow_object(&params, 100, 1).unwrap();
        let c = 49.5;
        for i in 0..100 {
            for j in 0..100 {
                let rho = (((i as f64 - c) / 20.0).powi(2) + ((j as f64 - c) / 20.0).powi(2)).sqrt();
                let want = (rho >= 1.0 - 5.0 / 20.0 && rho <= 1.0) as u8;
                assert_eq!(obj.band[i * 100 + j], want, "({}, {})", i, j);
            }
        }
    }

    #[test]
    fn hollow_object_rejects_bad_params() {
        let mut p = HollowObjectParams::default();
        p.wall_width = 0.0;
        assert!(gen_hollow_object(&p, 100, 0).is_err());
        let mut p = HollowObjectParams::default();
        p.semi_axes = (60.0, 60.0);
        assert!(gen_hollow_object(&p, 100, 0).is_err());
    }

    #[test]
    fn hollow_object_deterministic() {
        let mut p = HollowObjectParams::default();
        p.noise_sigma = 0.05;
        let a = gen_hollow_object(&p, 100, 7).unwrap();
        let b = gen_hollow_object(&p, 100, 7).unwrap();
        assert!(a.image.bit_eq(&b.image));
    }

    #[test]
    fn sharpness_of_band_indicator_is_large() {
        let obj = gen_hollow_object(&HollowObjectParams::default(), 100, 0).unwrap();
        let indicator = Tensor::<f64>::from_vec(
            vec![100, 100],
            obj.band.iter().map(|&v| v as f64).collect::<Vec<_>>(),
        )
        .unwrap();
        let score = boundary_sharpness(&indicator, 100, &obj.band).unwrap();
        assert!(score > 10.0, "score {}", score);
    }

    #[test]
    fn sharpness_constant_image_is_zero_and_affine_invariant() {
        let obj = gen_hollow_object(&HollowObjectParams::default(), 100, 0).unwrap();
        let flat = Tensor::<f64>::full(vec![100, 100], 0.7);
        assert_eq!(boundary_sharpness(&flat, 100, &obj.band).unwrap(), 0.0);

        // invariance is exact up to the 1e-9 regularizer in the denominator
        let a = boundary_sharpness(&obj.image, 100, &obj.band).unwrap();
        let scaled = obj.image.map(|v| 3.25 * v + 0.4);
        let b = boundary_sharpness(&scaled, 100, &obj.band).unwrap();
        assert!((a - b).abs() < 1e-5 * a.abs().max(1.0), "{} vs {}", a, b);
    }

    #[test]
    fn phantom_stack_invariants() {
        for seed in [1u64, 2, 3] {
            let stack = gen_phantom_stack(seed, 12, 64, Difficulty::Easy).unwrap();
            assert!(stack.images.all_finite());
            let hw = 64 * 64;
            // disjoint bands on every slice
            for t in 0..12 {
                let inner = stack.mask_plane(t, 0);
                let outer = stack.mask_plane(t, 1);
                for i in 0..hw {
                    assert!(!(inner[i] == 1 && outer[i] == 1), "slice {} pixel {}", t, i);
                }
            }
            // drift bound on present-to-present slices
            for t in 1..12 {
                let (a, b) = (&stack.geoms[t - 1], &stack.geoms[t]);
                if a.present && b.present {
                    assert!(b.axes.0 <= a.axes.0 * 1.1 + 1e-9 && b.axes.0 >= a.axes.0 * 0.9 - 1e-9);
                }
            }
        }
    }

    #[test]
    fn dataset_generation_and_fractions() {
        let ds = gen_dataset(11, 4, 3, 12, 64, Difficulty::Easy).unwrap();
        assert_eq!(ds.meta.stacks, 4);
        let ranges = Difficulty::Easy.class_fraction_ranges();
        for s in 0..4 {
            let stack = {
                // regenerate the accepted stack deterministically through the
                // same path to inspect fractions
                let mut found = None;
                for attempt in 0..16u64 {
                    let seed = stack_seed(11, s).wrapping_add(attempt * 0x5851F42D4C957F2D);
                    let cand = gen_phantom_stack(seed, 12, 64, Difficulty::Easy).unwrap();
                    if (0..3).all(|c| cand.slices_with_class(c) >= 6) {
                        found = Some(cand);
                        break;
                    }
                }
                found.unwrap()
            };
            let fr = stack.class_fractions();
            for c in 0..3 {
                assert!(
                    fr[c] >= ranges[c].0 && fr[c] <= ranges[c].1,
                    "stack {} class {} fraction {} outside {:?}",
                    s,
                    c,
                    fr[c],
                    ranges[c]
                );
            }
            for c in 0..3 {
                assert!(stack.slices_with_class(c) >= 6);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_phantom_stack(5, 6, 64, Difficulty::Easy).unwrap();
        let b = gen_phantom_stack(5, 6, 64, Difficulty::Easy).unwrap();
        assert!(a.images.bit_eq(&b.images));
        assert_eq!(a.masks, b.masks);
    }

    #[test]
    fn zero_drift_replicates_one_slice() {
        let stack = gen_phantom_stack_with_drift(9, 5, 64, Difficulty::Easy, 0.0).unwrap();
        let hw = 64 * 64;
        for t in 1..5 {
            assert_eq!(
                &stack.images.data()[..hw],
                &stack.images.data()[t * hw..(t + 1) * hw],
                "slice {} differs",
                t
            );
            assert_eq!(&stack.masks[..3 * hw], &stack.masks[t * 3 * hw..(t + 1) * 3 * hw]);
        }
    }
}
