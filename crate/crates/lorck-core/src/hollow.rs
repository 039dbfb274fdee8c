//! Hollow convolution kernels: binary band masks, their construction from
//! analytic ellipses or segmentation annotations, rescaling, and the
//! normally-distributed band initialization.
//!
//! A hollow kernel keeps nonzero weights only on a closed ring/ellipse band
//! (the contour of the organ it mimics); everything outside the band is
//! exactly zero and stays zero through training (see [`crate::optim`]).

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// How a mask was produced; carried for diagnostics and export.
#[derive(Clone, Debug, PartialEq)]
pub enum MaskSource {
    /// Analytic elliptic annulus: outer semi-axes in pixels, wall width.
    Annulus { semi_axes: (f64, f64), wall: f64 },
    /// Resampled from a ground-truth annotation of the given source extent.
    Annotation { source_size: usize },
    /// Nearest-neighbor upscale of another mask.
    Rescaled { from: usize },
}

/// A K x K binary mask whose 1-pixels form a closed hollow band: flood fill
/// from the border never reaches the central cavity.
#[derive(Clone, Debug, PartialEq)]
pub struct HollowMask {
    size: usize,
    grid: Vec<u8>,
    source: MaskSource,
}

impl HollowMask {
    /// Validate and wrap an arbitrary binary grid.
    pub fn from_grid(size: usize, grid: Vec<u8>, source: MaskSource) -> Result<Self> {
        if grid.len() != size * size {
            return Err(Error::shape("HollowMask", format!("{} pixels for size {}", grid.len(), size)));
        }
        if grid.iter().any(|&v| v > 1) {
            return Err(Error::invalid("HollowMask", "mask values must be 0 or 1"));
        }
        let mask = HollowMask { size, grid, source };
        mask.check_band()?;
        Ok(mask)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn grid(&self) -> &[u8] {
        &self.grid
    }

    pub fn source(&self) -> &MaskSource {
        &self.source
    }

    pub fn at(&self, i: usize, j: usize) -> u8 {
        self.grid[i * self.size + j]
    }

    /// Number of band (1) pixels.
    pub fn band_len(&self) -> usize {
        self.grid.iter().map(|&v| v as usize).sum()
    }

    /// 0-pixels not reachable from the border through 0-pixels
    /// (4-connectivity): the enclosed cavity.
    pub fn cavity(&self) -> Vec<usize> {
        let outside = flood_from_border(self.size, &self.grid);
        (0..self.grid.len())
            .filter(|&i| self.grid[i] == 0 && !outside[i])
            .collect()
    }

    /// The closed-band invariant: a non-empty band enclosing a non-empty
    /// cavity.
    pub fn check_band(&self) -> Result<()> {
        if self.band_len() == 0 {
            return Err(Error::BrokenBand("mask has no band pixels".into()));
        }
        if self.cavity().is_empty() {
            return Err(Error::BrokenBand(
                "flood fill from the border reaches every 0-pixel; no enclosed cavity".into(),
            ));
        }
        Ok(())
    }

    /// Whether the band pixels form a single 8-connected component.
    pub fn single_band(&self) -> bool {
        let n = self.size;
        let Some(start) = self.grid.iter().position(|&v| v == 1) else {
            return false;
        };
        let mut seen = vec![false; self.grid.len()];
        let mut stack = vec![start];
        seen[start] = true;
        let mut count = 1usize;
        while let Some(at) = stack.pop() {
            let (i, j) = (at / n, at % n);
            for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    let (ni, nj) = (i as i64 + di, j as i64 + dj);
                    if ni < 0 || nj < 0 || ni >= n as i64 || nj >= n as i64 {
                        continue;
                    }
                    let idx = ni as usize * n + nj as usize;
                    if self.grid[idx] == 1 && !seen[idx] {
                        seen[idx] = true;
                        count += 1;
                        stack.push(idx);
                    }
                }
            }
        }
        count == self.band_len()
    }
}

/// 4-connected flood fill through 0-pixels starting from every border pixel;
/// returns reachability.
fn flood_from_border(n: usize, grid: &[u8]) -> Vec<bool> {
    let mut reached = vec![false; grid.len()];
    let mut stack = Vec::new();
    for i in 0..n {
        for idx in [i, (n - 1) * n + i, i * n, i * n + n - 1] {
            if grid[idx] == 0 && !reached[idx] {
                reached[idx] = true;
                stack.push(idx);
            }
        }
    }
    while let Some(at) = stack.pop() {
        let (i, j) = (at / n, at % n);
        let visit = |ni: i64, nj: i64, reached: &mut Vec<bool>, stack: &mut Vec<usize>| {
            if ni >= 0 && nj >= 0 && ni < n as i64 && nj < n as i64 {
                let idx = ni as usize * n + nj as usize;
                if grid[idx] == 0 && !reached[idx] {
                    reached[idx] = true;
                    stack.push(idx);
                }
            }
        };
        visit(i as i64 - 1, j as i64, &mut reached, &mut stack);
        visit(i as i64 + 1, j as i64, &mut reached, &mut stack);
        visit(i as i64, j as i64 - 1, &mut reached, &mut stack);
        visit(i as i64, j as i64 + 1, &mut reached, &mut stack);
    }
    reached
}

/// Elliptic annulus mask: pixel (i, j) is on the band iff its normalized
/// elliptic radius r = sqrt(((i-c)/a)^2 + ((j-c)/b)^2) satisfies
/// `1 - w/min(a,b) <= r <= 1`.
pub fn make_annulus_mask(size: usize, outer_semi_axes: (f64, f64), wall_width: f64) -> Result<HollowMask> {
    let (a, b) = outer_semi_axes;
    if size < 3 {
        return Err(Error::invalid("make_annulus_mask", format!("size {} < 3", size)));
    }
    if !(a > 0.0 && b > 0.0) || a > size as f64 / 2.0 || b > size as f64 / 2.0 {
        return Err(Error::invalid(
            "make_annulus_mask",
            format!("semi-axes ({}, {}) must be positive and fit in size {}", a, b, size),
        ));
    }
    if !(wall_width >= 1.0 && wall_width < a.min(b)) {
        return Err(Error::invalid(
            "make_annulus_mask",
            format!("wall width {} must satisfy 1 <= w < min(a, b) = {}", wall_width, a.min(b)),
        ));
    }
    let c = (size as f64 - 1.0) / 2.0;
    let inner = 1.0 - wall_width / a.min(b);
    let mut grid = vec![0u8; size * size];
    for i in 0..size {
        for j in 0..size {
            let di = (i as f64 - c) / a;
            let dj = (j as f64 - c) / b;
            let r = (di * di + dj * dj).sqrt();
            if r >= inner && r <= 1.0 {
                grid[i * size + j] = 1;
            }
        }
    }
    HollowMask::from_grid(size, grid, MaskSource::Annulus { semi_axes: (a, b), wall: wall_width })
}

/// Center-aligned nearest-neighbor resampling of a binary grid.
fn resample_nearest(src: &[u8], src_n: usize, dst_n: usize) -> Vec<u8> {
    let mut out = vec![0u8; dst_n * dst_n];
    for i in 0..dst_n {
        let si = (((i as f64 + 0.5) * src_n as f64 / dst_n as f64) as usize).min(src_n - 1);
        for j in 0..dst_n {
            let sj = (((j as f64 + 0.5) * src_n as f64 / dst_n as f64) as usize).min(src_n - 1);
            out[i * dst_n + j] = src[si * src_n + sj];
        }
    }
    out
}

/// 3x3 morphological closing (dilation then erosion) used to repair bands
/// broken by resampling.
fn closing3(grid: &[u8], n: usize) -> Vec<u8> {
    let probe = |g: &[u8], i: i64, j: i64, pad: u8| -> u8 {
        if i < 0 || j < 0 || i >= n as i64 || j >= n as i64 {
            pad
        } else {
            g[i as usize * n + j as usize]
        }
    };
    let mut dilated = vec![0u8; grid.len()];
    for i in 0..n as i64 {
        for j in 0..n as i64 {
            let mut any = 0;
            for di in -1..=1 {
                for dj in -1..=1 {
                    any |= probe(grid, i + di, j + dj, 0);
                }
            }
            dilated[i as usize * n + j as usize] = any;
        }
    }
    let mut eroded = vec![0u8; grid.len()];
    for i in 0..n as i64 {
        for j in 0..n as i64 {
            let mut all = 1;
            for di in -1..=1 {
                for dj in -1..=1 {
                    all &= probe(&dilated, i + di, j + dj, 1);
                }
            }
            eroded[i as usize * n + j as usize] = all;
        }
    }
    eroded
}

/// Build a hollow mask from a binary annotation (e.g. a ground-truth outer
/// wall band) by nearest-neighbor resampling to `target` and re-binarizing.
/// A band broken by the resampling is repaired once with a 3x3 morphological
/// closing; if it is still broken the call fails.
pub fn mask_from_annotation(annotation: &[u8], source_size: usize, target: usize) -> Result<HollowMask> {
    if annotation.len() != source_size * source_size {
        return Err(Error::shape(
            "mask_from_annotation",
            format!("{} pixels for size {}", annotation.len(), source_size),
        ));
    }
    if target < 3 {
        return Err(Error::invalid("mask_from_annotation", "target size < 3"));
    }
    let input = HollowMask::from_grid(
        source_size,
        annotation.iter().map(|&v| (v > 0) as u8).collect(),
        MaskSource::Annotation { source_size },
    )
    .map_err(|e| Error::BrokenBand(format!("annotation is not a hollow band: {}", e)))?;
    if !input.single_band() {
        return Err(Error::BrokenBand("annotation band is not a single connected component".into()));
    }

    let resampled: Vec<u8> = resample_nearest(input.grid(), source_size, target);
    let source = MaskSource::Annotation { source_size };
    match HollowMask::from_grid(target, resampled.clone(), source.clone()) {
        Ok(mask) => Ok(mask),
        Err(_) => {
            let repaired = closing3(&resampled, target);
            HollowMask::from_grid(target, repaired, source).map_err(|e| {
                Error::BrokenBand(format!("band broken by resampling and unrepairable: {}", e))
            })
        }
    }
}

/// Nearest-neighbor upscaling of a mask to `target >= size`. Downscaling goes
/// through [`mask_from_annotation`].
pub fn rescale_mask(mask: &HollowMask, target: usize) -> Result<HollowMask> {
    if target < mask.size() {
        return Err(Error::invalid(
            "rescale_mask",
            format!("target {} < size {}; downscale via mask_from_annotation", target, mask.size()),
        ));
    }
    if target == mask.size() {
        return Ok(mask.clone());
    }
    let grid = resample_nearest(mask.grid(), mask.size(), target);
    HollowMask::from_grid(target, grid, MaskSource::Rescaled { from: mask.size() })
}

/// Sample an initial hollow kernel bank: independent N(mu, sigma^2) values on
/// band pixels, exact zeros elsewhere, one independent draw per (Cout, Cin)
/// slice, reproducible from the seed.
pub fn init_hollow_kernel<E: Element>(
    mask: &HollowMask,
    channels: (usize, usize),
    seed: u64,
    mu: f64,
    sigma: f64,
) -> Result<Tensor<E>> {
    if sigma <= 0.0 {
        return Err(Error::invalid("init_hollow_kernel", "sigma must be positive"));
    }
    let (cout, cin) = channels;
    let k = mask.size();
    let dist = Normal::new(mu, sigma).expect("finite parameters");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![E::ZERO; cout * cin * k * k];
    for slice in 0..cout * cin {
        let base = slice * k * k;
        for (i, &m) in mask.grid().iter().enumerate() {
            if m == 1 {
                data[base + i] = E::from_f64(dist.sample(&mut rng));
            }
        }
    }
    Tensor::from_vec(vec![cout, cin, k, k], data)
}

/// Band-relative fan-in scale: sigma = 1 / sqrt(Cin * band pixels).
pub fn hollow_sigma(mask: &HollowMask, cin: usize) -> f64 {
    1.0 / ((cin * mask.band_len()).max(1) as f64).sqrt()
}

/// Per-layer hollow weights paired with their mask (one mask shared across
/// all (Cout, Cin) slices).
#[derive(Clone, Debug)]
pub struct HollowKernelBank<E: Element> {
    pub layer: String,
    pub weights: Tensor<E>,
    pub mask: Arc<HollowMask>,
}

impl<E: Element> HollowKernelBank<E> {
    pub fn init(
        layer: impl Into<String>,
        mask: Arc<HollowMask>,
        channels: (usize, usize),
        seed: u64,
        mu: f64,
        sigma: f64,
    ) -> Result<Self> {
        let weights = init_hollow_kernel(&mask, channels, seed, mu, sigma)?;
        Ok(HollowKernelBank { layer: layer.into(), weights, mask })
    }

    /// weights (elementwise) (1 - mask) == 0, bitwise.
    pub fn shape_preserved(&self) -> bool {
        weights_respect_mask(&self.weights, &self.mask)
    }
}

/// Check that every element outside the (trailing K x K broadcast) mask is
/// bitwise zero.
pub fn weights_respect_mask<E: Element>(weights: &Tensor<E>, mask: &HollowMask) -> bool {
    let kk = mask.size() * mask.size();
    if weights.numel() % kk != 0 {
        return false;
    }
    weights
        .data()
        .iter()
        .enumerate()
        .all(|(i, &v)| mask.grid()[i % kk] == 1 || v.to_f64().to_bits() == 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent enumeration of the annulus rule over all pixels.
    fn enumerate_annulus(size: usize, a: f64, b: f64, w: f64) -> Vec<u8> {
        let c = (size as f64 - 1.0) / 2.0;
        (0..size * size)
            .map(|idx| {
                let (i, j) = (idx / size, idx % size);
                let r = (((i as f64 - c) / a).powi(2) + ((j as f64 - c) / b).powi(2)).sqrt();
                (r >= 1.0 - w / a.min(b) && r <= 1.0) as u8
            })
            .collect()
    }

    #[test]
    fn small_circle_matches_pixel_enumeration() {
        let mask = make_annulus_mask(5, (2.0, 2.0), 1.0).unwrap();
        assert_eq!(mask.grid(), &enumerate_annulus(5, 2.0, 2.0, 1.0)[..]);
        assert_eq!(mask.at(2, 2), 0, "center pixel is cavity");
        // the 8-neighborhood of the center is all band
        for (i, j) in [(1, 1), (1, 2), (1, 3), (2, 1), (2, 3), (3, 1), (3, 2), (3, 3)] {
            assert_eq!(mask.at(i, j), 1, "({}, {})", i, j);
        }
    }

    #[test]
    fn maximal_wall_leaves_single_cavity_pixel() {
        // w = min(a,b) - 1 on an odd grid: cavity is exactly the center pixel
        let mask = make_annulus_mask(9, (4.0, 4.0), 3.0).unwrap();
        assert_eq!(mask.cavity(), vec![4 * 9 + 4]);
        assert_eq!(mask.grid(), &enumerate_annulus(9, 4.0, 4.0, 3.0)[..]);
    }

    #[test]
    fn degenerate_parameters_rejected() {
        assert!(make_annulus_mask(3, (1.0, 1.0), 1.0).is_err()); // w == min(a,b)
        assert!(make_annulus_mask(2, (1.0, 1.0), 0.5).is_err()); // size < 3
        assert!(make_annulus_mask(10, (6.0, 3.0), 1.0).is_err()); // a > size/2
        assert!(make_annulus_mask(10, (4.0, 4.0), 0.5).is_err()); // w < 1
    }

    #[test]
    fn annulus_masks_satisfy_band_invariant_across_params() {
        for size in [5usize, 10, 20, 40] {
            for frac in [0.6, 0.8, 1.0] {
                let a = size as f64 / 2.0 * frac;
                for w in [1.0, 2.0, (a - 1.0).max(1.0)] {
                    if w >= a || w < 1.0 {
                        continue;
                    }
                    let mask = make_annulus_mask(size, (a, a), w)
                        .unwrap_or_else(|e| panic!("size {} a {} w {}: {}", size, a, w, e));
                    assert!(mask.check_band().is_ok());
                    assert!(mask.single_band(), "size {} a {} w {}", size, a, w);
                }
            }
        }
    }

    #[test]
    fn rescale_identity_and_doubling() {
        let mask = make_annulus_mask(10, (5.0, 5.0), 2.0).unwrap();
        let same = rescale_mask(&mask, 10).unwrap();
        assert_eq!(same.grid(), mask.grid());

        let doubled = rescale_mask(&mask, 20).unwrap();
        for i in 0..20 {
            for j in 0..20 {
                assert_eq!(doubled.at(i, j), mask.at(i / 2, j / 2), "({}, {})", i, j);
            }
        }
        assert_eq!(doubled.band_len(), 4 * mask.band_len());

        // 10 -> 40: band width quadruples, nonzero count x16
        let quad = rescale_mask(&mask, 40).unwrap();
        assert_eq!(quad.band_len(), 16 * mask.band_len());
        assert!(rescale_mask(&mask, 5).is_err());
    }

    #[test]
    fn annotation_identity_and_downsample() {
        let mask = make_annulus_mask(20, (9.0, 7.0), 3.0).unwrap();
        let same = mask_from_annotation(mask.grid(), 20, 20).unwrap();
        assert_eq!(same.grid(), mask.grid());

        // 100 -> 20 downsample still passes the flood-fill enclosure test
        let big = make_annulus_mask(100, (45.0, 40.0), 9.0).unwrap();
        let small = mask_from_annotation(big.grid(), 100, 20).unwrap();
        assert!(small.check_band().is_ok());

        // all-zero input rejected
        assert!(mask_from_annotation(&vec![0u8; 100], 10, 10).is_err());
        // filled disc (no cavity) rejected
        let disc: Vec<u8> = (0..100)
            .map(|idx| {
                let (i, j) = (idx as i64 / 10, idx as i64 % 10);
                (((i - 4) * (i - 4) + (j - 4) * (j - 4)) <= 9) as u8
            })
            .collect();
        assert!(mask_from_annotation(&disc, 10, 10).is_err());
    }

    #[test]
    fn init_respects_mask_and_seed() {
        let mask = Arc::new(make_annulus_mask(10, (4.5, 4.5), 2.0).unwrap());
        let k1 = init_hollow_kernel::<f32>(&mask, (4, 3), 7, 0.0, 0.1).unwrap();
        let k2 = init_hollow_kernel::<f32>(&mask, (4, 3), 7, 0.0, 0.1).unwrap();
        assert!(k1.bit_eq(&k2), "same seed twice is bit-identical");
        assert!(weights_respect_mask(&k1, &mask));

        let k3 = init_hollow_kernel::<f32>(&mask, (4, 3), 8, 0.0, 0.1).unwrap();
        assert!(!k1.bit_eq(&k3), "different seed differs");

        // distinct samples per (cout, cin) slice
        let kk = 100;
        let s0 = &k1.data()[..kk];
        let s1 = &k1.data()[kk..2 * kk];
        assert_ne!(s0, s1);

        assert!(init_hollow_kernel::<f32>(&mask, (1, 1), 0, 0.0, 0.0).is_err());
    }

    #[test]
    fn init_statistics_match_parameters() {
        let mask = Arc::new(make_annulus_mask(20, (9.0, 9.0), 4.0).unwrap());
        let (mu, sigma) = (0.3, 0.2);
        let t = init_hollow_kernel::<f64>(&mask, (10, 10), 12345, mu, sigma).unwrap();
        let band: Vec<f64> = t
            .data()
            .iter()
            .enumerate()
            .filter(|(i, _)| mask.grid()[i % 400] == 1)
            .map(|(_, &v)| v)
            .collect();
        let n = band.len() as f64;
        assert!(n > 1e4, "need >= 10^4 samples, got {}", n);
        let mean: f64 = band.iter().sum::<f64>() / n;
        let var: f64 = band.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        let se_mean = sigma / n.sqrt();
        let se_sd = sigma / (2.0 * n).sqrt();
        assert!((mean - mu).abs() < 3.0 * se_mean, "mean {} vs {}", mean, mu);
        assert!((var.sqrt() - sigma).abs() < 3.0 * se_sd, "sd {} vs {}", var.sqrt(), sigma);
    }
}
