//! Sparse-to-dense depth map completion.
//!
//! The densifier works on inverted depths (`max_depth + 1 - d`) so that
//! morphological max selects the minimum (nearest) depth wherever dilations
//! overlap. The fixed pipeline is: dilate (diamond kernel), morphological
//! close (full kernel), fill remaining holes (full kernel, applied only to
//! still-invalid pixels), median-smooth pixels that were invalid in the
//! input, un-invert. Pixels that were valid in the input always hold their
//! original (clamped) depth exactly in the output.
//!
//! [`densify_oracle`] is an unoptimized per-pixel reference implementation of
//! the same contract, kept free of the production code paths so the two can
//! be checked against each other.

use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{DenseDepthMap, DepthMap, SparseDepthMap};

#[derive(Debug, Error)]
pub enum DensifyError {
    #[error("sparse depth map has no valid pixels")]
    EmptyInput,
}

/// Odd-sized binary structuring element.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    width: usize,
    height: usize,
    mask: Vec<bool>,
    offsets: Vec<(i64, i64)>,
}

impl Kernel {
    fn from_mask(width: usize, height: usize, mask: Vec<bool>) -> Self {
        assert!(width % 2 == 1 && height % 2 == 1, "kernel dimensions must be odd");
        assert_eq!(mask.len(), width * height);
        let (hw, hh) = (width as i64 / 2, height as i64 / 2);
        let offsets = mask
            .iter()
            .enumerate()
            .filter(|(_, m)| **m)
            .map(|(i, _)| ((i % width) as i64 - hw, (i / width) as i64 - hh))
            .collect();
        Self { width, height, mask, offsets }
    }

    /// Square kernel with every cell set.
    pub fn full(size: usize) -> Self {
        Self::from_mask(size, size, vec![true; size * size])
    }

    /// Diamond: cells within Manhattan distance `size / 2` of the center.
    pub fn diamond(size: usize) -> Self {
        assert!(size % 2 == 1, "kernel dimensions must be odd");
        let r = size as i64 / 2;
        let mask = (0..size * size)
            .map(|i| {
                let (dx, dy) = ((i % size) as i64 - r, (i / size) as i64 - r);
                dx.abs() + dy.abs() <= r
            })
            .collect();
        Self::from_mask(size, size, mask)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Kernel membership for an offset relative to the center.
    pub fn contains(&self, dx: i64, dy: i64) -> bool {
        let (hw, hh) = (self.width as i64 / 2, self.height as i64 / 2);
        if dx.abs() > hw || dy.abs() > hh {
            return false;
        }
        self.mask[(dy + hh) as usize * self.width + (dx + hw) as usize]
    }

    fn offsets(&self) -> &[(i64, i64)] {
        &self.offsets
    }
}

/// Densifier parameters. Defaults: 80 m range, 5x5 diamond dilation,
/// 5x5 full closing, 7x7 full hole fill, 5-pixel median smoothing.
#[derive(Debug, Clone)]
pub struct DensifierConfig {
    pub max_depth: f32,
    pub dilation_kernel: Kernel,
    pub closing_kernel: Kernel,
    pub fill_kernel: Kernel,
    pub smoothing_window: usize,
}

impl Default for DensifierConfig {
    fn default() -> Self {
        Self {
            max_depth: 80.0,
            dilation_kernel: Kernel::diamond(5),
            closing_kernel: Kernel::full(5),
            fill_kernel: Kernel::full(7),
            smoothing_window: 5,
        }
    }
}

/// Counters reported alongside the densified map.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DensifyStats {
    /// Input depths above `max_depth`, clamped down.
    pub clamped: usize,
}

#[inline]
fn invert(d: f32, offset: f32) -> f32 {
    offset - d
}

/// Densify a sparse depth map. See the module docs for the pipeline.
pub fn densify(sparse: &SparseDepthMap, cfg: &DensifierConfig) -> Result<DenseDepthMap, DensifyError> {
    densify_with_stats(sparse, cfg).map(|(map, _)| map)
}

/// [`densify`] plus clamp counters.
pub fn densify_with_stats(
    sparse: &SparseDepthMap,
    cfg: &DensifierConfig,
) -> Result<(DenseDepthMap, DensifyStats), DensifyError> {
    let (w, h) = (sparse.width(), sparse.height());
    let offset = cfg.max_depth + 1.0;
    let mut stats = DensifyStats::default();

    // Clamp and invert. 0.0 marks invalid throughout.
    let mut inv = vec![0.0f32; w * h];
    let mut clamped = vec![0.0f32; w * h];
    let mut any_valid = false;
    for (x, y, d) in sparse.iter_valid() {
        any_valid = true;
        let d = if d > cfg.max_depth {
            stats.clamped += 1;
            cfg.max_depth
        } else {
            d
        };
        clamped[y * w + x] = d;
        inv[y * w + x] = invert(d, offset);
    }
    if !any_valid {
        return Err(DensifyError::EmptyInput);
    }

    // Dilate (scatter from valid pixels), then close, then fill holes.
    let dilated = dilate_scatter(&inv, w, h, &cfg.dilation_kernel);
    let closed = erode_gather(&dilate_scatter(&dilated, w, h, &cfg.closing_kernel), w, h, &cfg.closing_kernel);
    let filled = fill_holes_scatter(&closed, w, h, &cfg.fill_kernel);

    // Median smoothing, only on pixels that were invalid in the input.
    let half = cfg.smoothing_window as i64 / 2;
    let smoothed: Vec<f32> = (0..h)
        .into_par_iter()
        .flat_map_iter(|y| {
            let filled = &filled;
            let clamped = &clamped;
            (0..w).map(move |x| {
                let i = y * w + x;
                if filled[i] <= 0.0 || clamped[i] > 0.0 {
                    return filled[i];
                }
                let mut vals = Vec::with_capacity((2 * half as usize + 1).pow(2));
                for dy in -half..=half {
                    for dx in -half..=half {
                        let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                        if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                            continue;
                        }
                        let v = filled[ny as usize * w + nx as usize];
                        if v > 0.0 {
                            vals.push(v);
                        }
                    }
                }
                lower_median(&mut vals)
            })
        })
        .collect();

    // Un-invert and restore measured pixels exactly.
    let mut out = DepthMap::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if clamped[i] > 0.0 {
                out.set(x, y, clamped[i]);
            } else if smoothed[i] > 0.0 {
                out.set(x, y, invert(smoothed[i], offset));
            }
        }
    }
    Ok((out, stats))
}

fn lower_median(vals: &mut [f32]) -> f32 {
    debug_assert!(!vals.is_empty());
    let mid = (vals.len() - 1) / 2;
    *vals.select_nth_unstable_by(mid, |a, b| a.total_cmp(b)).1
}

/// Max-dilation by scattering each valid pixel into its kernel neighborhood.
fn dilate_scatter(src: &[f32], w: usize, h: usize, kernel: &Kernel) -> Vec<f32> {
    let mut out = src.to_vec();
    for y in 0..h {
        for x in 0..w {
            let v = src[y * w + x];
            if v <= 0.0 {
                continue;
            }
            for &(dx, dy) in kernel.offsets() {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                let cell = &mut out[ny as usize * w + nx as usize];
                if v > *cell {
                    *cell = v;
                }
            }
        }
    }
    out
}

/// Min-erosion; a pixel whose (clipped) window contains any invalid pixel
/// becomes invalid.
fn erode_gather(src: &[f32], w: usize, h: usize, kernel: &Kernel) -> Vec<f32> {
    (0..h)
        .into_par_iter()
        .flat_map_iter(|y| {
            (0..w).map(move |x| {
                let mut m = f32::INFINITY;
                for &(dx, dy) in kernel.offsets() {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let v = src[ny as usize * w + nx as usize];
                    if v <= 0.0 {
                        return 0.0;
                    }
                    if v < m {
                        m = v;
                    }
                }
                m
            })
        })
        .collect()
}

/// Dilation applied only into still-invalid pixels.
fn fill_holes_scatter(src: &[f32], w: usize, h: usize, kernel: &Kernel) -> Vec<f32> {
    let mut out = src.to_vec();
    for y in 0..h {
        for x in 0..w {
            let v = src[y * w + x];
            if v <= 0.0 {
                continue;
            }
            for &(dx, dy) in kernel.offsets() {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                let i = ny as usize * w + nx as usize;
                if src[i] <= 0.0 && v > out[i] {
                    out[i] = v;
                }
            }
        }
    }
    out
}

/// Brute-force reference implementation of [`densify`]: every stage is a
/// literal per-pixel loop over the kernel window. Intended for tests.
pub fn densify_oracle(
    sparse: &SparseDepthMap,
    cfg: &DensifierConfig,
) -> Result<DenseDepthMap, DensifyError> {
    let (w, h) = (sparse.width(), sparse.height());
    let offset = cfg.max_depth + 1.0;

    let mut inv = vec![0.0f32; w * h];
    let mut original = vec![0.0f32; w * h];
    let mut any_valid = false;
    for y in 0..h {
        for x in 0..w {
            if let Some(d) = sparse.get(x, y) {
                any_valid = true;
                let d = d.min(cfg.max_depth);
                original[y * w + x] = d;
                inv[y * w + x] = offset - d;
            }
        }
    }
    if !any_valid {
        return Err(DensifyError::EmptyInput);
    }

    let gather_max = |src: &[f32], kernel: &Kernel| -> Vec<f32> {
        let mut out = vec![0.0f32; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut best = 0.0f32;
                for dy in -(kernel.height() as i64 / 2)..=(kernel.height() as i64 / 2) {
                    for dx in -(kernel.width() as i64 / 2)..=(kernel.width() as i64 / 2) {
                        if !kernel.contains(dx, dy) {
                            continue;
                        }
                        let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                        if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                            continue;
                        }
                        let v = src[ny as usize * w + nx as usize];
                        if v > best {
                            best = v;
                        }
                    }
                }
                out[y * w + x] = best;
            }
        }
        out
    };

    let gather_min_strict = |src: &[f32], kernel: &Kernel| -> Vec<f32> {
        let mut out = vec![0.0f32; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut worst = f32::INFINITY;
                let mut all_valid = true;
                for dy in -(kernel.height() as i64 / 2)..=(kernel.height() as i64 / 2) {
                    for dx in -(kernel.width() as i64 / 2)..=(kernel.width() as i64 / 2) {
                        if !kernel.contains(dx, dy) {
                            continue;
                        }
                        let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                        if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                            continue;
                        }
                        let v = src[ny as usize * w + nx as usize];
                        if v <= 0.0 {
                            all_valid = false;
                        } else if v < worst {
                            worst = v;
                        }
                    }
                }
                out[y * w + x] = if all_valid { worst } else { 0.0 };
            }
        }
        out
    };

    let dilated = gather_max(&inv, &cfg.dilation_kernel);
    let closed = gather_min_strict(&gather_max(&dilated, &cfg.closing_kernel), &cfg.closing_kernel);

    let mut filled = closed.clone();
    for y in 0..h {
        for x in 0..w {
            if closed[y * w + x] > 0.0 {
                continue;
            }
            let mut best = 0.0f32;
            for dy in -(cfg.fill_kernel.height() as i64 / 2)..=(cfg.fill_kernel.height() as i64 / 2) {
                for dx in -(cfg.fill_kernel.width() as i64 / 2)..=(cfg.fill_kernel.width() as i64 / 2) {
                    if !cfg.fill_kernel.contains(dx, dy) {
                        continue;
                    }
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let v = closed[ny as usize * w + nx as usize];
                    if v > best {
                        best = v;
                    }
                }
            }
            filled[y * w + x] = best;
        }
    }

    let half = cfg.smoothing_window as i64 / 2;
    let mut smoothed = filled.clone();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if filled[i] <= 0.0 || original[i] > 0.0 {
                continue;
            }
            let mut vals = Vec::new();
            for dy in -half..=half {
                for dx in -half..=half {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let v = filled[ny as usize * w + nx as usize];
                    if v > 0.0 {
                        vals.push(v);
                    }
                }
            }
            vals.sort_by(|a, b| a.total_cmp(b));
            smoothed[i] = vals[(vals.len() - 1) / 2];
        }
    }

    let mut out = DepthMap::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if original[i] > 0.0 {
                out.set(x, y, original[i]);
            } else if smoothed[i] > 0.0 {
                out.set(x, y, offset - smoothed[i]);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_sparse(w: usize, h: usize, density: f64, rng: &mut impl Rng) -> SparseDepthMap {
        let mut map = DepthMap::new(w, h);
        loop {
            for y in 0..h {
                for x in 0..w {
                    if rng.gen_bool(density) {
                        map.set(x, y, rng.gen_range(0.5..79.0));
                    }
                }
            }
            if map.valid_count() > 0 {
                return map;
            }
        }
    }

    #[test]
    fn empty_map_is_rejected() {
        let map = DepthMap::new(8, 8);
        assert!(matches!(densify(&map, &DensifierConfig::default()), Err(DensifyError::EmptyInput)));
        assert!(matches!(
            densify_oracle(&map, &DensifierConfig::default()),
            Err(DensifyError::EmptyInput)
        ));
    }

    #[test]
    fn single_pixel_spreads_over_diamond_and_center_is_exact() {
        let mut map = DepthMap::new(9, 9);
        map.set(4, 4, 10.0);
        let out = densify(&map, &DensifierConfig::default()).unwrap();
        // The 5x5 diamond neighborhood of the seed must be valid with the
        // seed's depth (later stages can only extend coverage further).
        for dy in -2i64..=2 {
            for dx in -2i64..=2 {
                if dx.abs() + dy.abs() <= 2 {
                    let d = out.get((4 + dx) as usize, (4 + dy) as usize);
                    assert_eq!(d, Some(10.0), "offset ({dx}, {dy})");
                }
            }
        }
        assert_eq!(out.get(4, 4), Some(10.0));
        // Fill-kernel reach (Chebyshev 3 of the diamond) is valid too.
        assert!(out.get(4 + 5, 4).is_some());
    }

    #[test]
    fn fully_valid_map_is_unchanged() {
        let mut map = DepthMap::new(12, 7);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for y in 0..7 {
            for x in 0..12 {
                map.set(x, y, rng.gen_range(1.0..60.0));
            }
        }
        let out = densify(&map, &DensifierConfig::default()).unwrap();
        assert_eq!(out, map);
    }

    #[test]
    fn structure_preserved_and_coverage_monotone() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let map = random_sparse(24, 24, 0.15, &mut rng);
            let out = densify(&map, &DensifierConfig::default()).unwrap();
            for (x, y, d) in map.iter_valid() {
                assert_eq!(out.get(x, y), Some(d));
            }
            assert!(out.valid_count() >= map.valid_count());
            for (_, _, d) in out.iter_valid() {
                assert!(d > 0.0 && d <= 80.0);
            }
        }
    }

    #[test]
    fn matches_oracle_on_random_maps() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let cfg = DensifierConfig::default();
        for i in 0..25 {
            let density = [0.02, 0.1, 0.4, 0.9][i % 4];
            let map = random_sparse(32, 32, density, &mut rng);
            let fast = densify(&map, &cfg).unwrap();
            let slow = densify_oracle(&map, &cfg).unwrap();
            assert_eq!(fast, slow, "density {density}");
        }
    }

    #[test]
    fn depths_above_max_are_clamped_with_counter() {
        let mut map = DepthMap::new(9, 9);
        map.set(4, 4, 200.0);
        let (out, stats) = densify_with_stats(&map, &DensifierConfig::default()).unwrap();
        assert_eq!(stats.clamped, 1);
        assert_eq!(out.get(4, 4), Some(80.0));
    }

    #[test]
    fn nearest_depth_wins_where_dilations_overlap() {
        let mut map = DepthMap::new(9, 9);
        map.set(3, 4, 5.0);
        map.set(5, 4, 30.0);
        let out = densify(&map, &DensifierConfig::default()).unwrap();
        // Midpoint is reached by both dilations; the nearer depth wins.
        assert_eq!(out.get(4, 4), Some(5.0));
    }

    #[test]
    fn diamond_kernel_shape() {
        let k = Kernel::diamond(5);
        assert!(k.contains(0, 0) && k.contains(2, 0) && k.contains(1, 1));
        assert!(!k.contains(2, 1) && !k.contains(2, 2));
        let f = Kernel::full(5);
        assert!(f.contains(2, 2) && !f.contains(3, 0));
    }
}
