//! Slide representation, foreground detection, and patch extraction.
//!
//! A slide is M co-registered single-channel intensity planes. Foreground is
//! decided on a grid downsampled by the patch size, so one mask cell
//! corresponds to one patch.

use super::otsu::{otsu_threshold, HIST_BINS};
use crate::error::{Error, Result};

/// How to read intensity polarity during foreground detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlideMode {
    /// Fluorescence: signal is bright on a dark background; masks OR-fused.
    Mif,
    /// Brightfield: tissue is dark on a white background; single channel.
    He,
}

impl std::str::FromStr for SlideMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "mif" => Ok(SlideMode::Mif),
            "he" => Ok(SlideMode::He),
            other => Err(format!("unknown mode {other:?} (expected mif or he)")),
        }
    }
}

/// M intensity planes with identical extents. 8-bit data is stored in the
/// low byte of each u16, with `max_value` recording the true dynamic range.
#[derive(Debug, Clone)]
pub struct SlideImage {
    pub width: usize,
    pub height: usize,
    pub channel_names: Vec<String>,
    /// One row-major `width * height` plane per channel.
    pub planes: Vec<Vec<u16>>,
    /// 255 for 8-bit sources, 65535 for 16-bit.
    pub max_value: u16,
}

impl SlideImage {
    pub fn new(
        width: usize,
        height: usize,
        channel_names: Vec<String>,
        planes: Vec<Vec<u16>>,
        max_value: u16,
    ) -> Result<Self> {
        if planes.is_empty() {
            return Err(Error::contract("slide needs at least one channel"));
        }
        if channel_names.len() != planes.len() {
            return Err(Error::contract(format!(
                "{} names for {} channels",
                channel_names.len(),
                planes.len()
            )));
        }
        if width == 0 || height == 0 {
            return Err(Error::contract("slide extents must be positive"));
        }
        for (i, p) in planes.iter().enumerate() {
            if p.len() != width * height {
                return Err(Error::dim(format!(
                    "channel {i} has {} pixels, expected {}",
                    p.len(),
                    width * height
                )));
            }
        }
        if max_value != 255 && max_value != 65535 {
            return Err(Error::contract("max_value must be 255 or 65535"));
        }
        Ok(SlideImage {
            width,
            height,
            channel_names,
            planes,
            max_value,
        })
    }

    pub fn m(&self) -> usize {
        self.planes.len()
    }

    /// Histogram bin of an intensity: identity for 8-bit, high byte for 16-bit.
    fn bin_of(&self, value: f64) -> usize {
        let v = value.round().clamp(0.0, self.max_value as f64) as u32;
        if self.max_value == 255 {
            v as usize
        } else {
            (v >> 8) as usize
        }
    }
}

/// Patch-grid foreground decision, one cell per patch.
#[derive(Debug, Clone)]
pub struct ForegroundMask {
    pub rows: usize,
    pub cols: usize,
    pub factor: usize,
    pub cells: Vec<bool>,
    /// Channels skipped as degenerate during thresholding.
    pub warnings: Vec<String>,
}

impl ForegroundMask {
    pub fn foreground_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }
}

/// Mean-pool one plane onto the patch grid. Edge cells average only the
/// pixels that exist.
fn downsample_mean(plane: &[u16], width: usize, height: usize, factor: usize) -> (usize, usize, Vec<f64>) {
    let rows = height.div_ceil(factor);
    let cols = width.div_ceil(factor);
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let y0 = r * factor;
            let x0 = c * factor;
            let y1 = (y0 + factor).min(height);
            let x1 = (x0 + factor).min(width);
            let mut acc = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    acc += plane[y * width + x] as f64;
                }
            }
            out[r * cols + c] = acc / ((y1 - y0) * (x1 - x0)) as f64;
        }
    }
    (rows, cols, out)
}

/// Downsample, threshold, and fuse channel masks into the patch-grid
/// foreground mask. Degenerate channels (single-valued after downsampling)
/// are skipped; a slide where every channel is degenerate is an error.
pub fn foreground_mask(slide: &SlideImage, factor: usize, mode: SlideMode) -> Result<ForegroundMask> {
    if factor == 0 {
        return Err(Error::contract("downsample factor must be positive"));
    }
    if mode == SlideMode::He && slide.m() != 1 {
        return Err(Error::contract(format!(
            "brightfield mode expects a single grayscale channel, got {}",
            slide.m()
        )));
    }
    let rows = slide.height.div_ceil(factor);
    let cols = slide.width.div_ceil(factor);
    let mut fused = vec![false; rows * cols];
    let mut warnings = Vec::new();
    let mut usable = 0;

    for (ci, plane) in slide.planes.iter().enumerate() {
        let (_, _, ds) = downsample_mean(plane, slide.width, slide.height, factor);
        let mut hist = [0u64; HIST_BINS];
        for &v in &ds {
            hist[slide.bin_of(v)] += 1;
        }
        let t = match otsu_threshold(&hist) {
            Ok(t) => t,
            Err(_) => {
                warnings.push(format!(
                    "channel {} ({}) is single-valued after downsampling; skipped",
                    ci, slide.channel_names[ci]
                ));
                continue;
            }
        };
        usable += 1;
        for (cell, &v) in fused.iter_mut().zip(&ds) {
            let bin = slide.bin_of(v);
            let fg = match mode {
                SlideMode::Mif => bin > t,
                SlideMode::He => bin <= t,
            };
            *cell = *cell || fg;
        }
    }
    if usable == 0 {
        return Err(Error::contract(
            "every channel is degenerate; no foreground can be detected",
        ));
    }
    Ok(ForegroundMask {
        rows,
        cols,
        factor,
        cells: fused,
        warnings,
    })
}

/// One foreground patch: M planes of `size * size` raw intensities,
/// zero-padded past the slide edge.
#[derive(Debug, Clone)]
pub struct Patch {
    /// (row, col) on the patch grid.
    pub coords: (u32, u32),
    pub m: usize,
    pub size: usize,
    pub max_value: u16,
    /// `[M][size][size]` row-major.
    pub data: Vec<u16>,
}

/// Cut one patch per foreground cell, in row-major grid order.
pub fn extract_patches(slide: &SlideImage, mask: &ForegroundMask, patch_size: usize) -> Result<Vec<Patch>> {
    if patch_size == 0 {
        return Err(Error::contract("patch size must be positive"));
    }
    let m = slide.m();
    let mut patches = Vec::with_capacity(mask.foreground_count());
    for r in 0..mask.rows {
        for c in 0..mask.cols {
            if !mask.cells[r * mask.cols + c] {
                continue;
            }
            let mut data = vec![0u16; m * patch_size * patch_size];
            let y0 = r * mask.factor;
            let x0 = c * mask.factor;
            for (ci, plane) in slide.planes.iter().enumerate() {
                for dy in 0..patch_size {
                    let y = y0 + dy;
                    if y >= slide.height {
                        break;
                    }
                    for dx in 0..patch_size {
                        let x = x0 + dx;
                        if x >= slide.width {
                            break;
                        }
                        data[(ci * patch_size + dy) * patch_size + dx] = plane[y * slide.width + x];
                    }
                }
            }
            patches.push(Patch {
                coords: (r as u32, c as u32),
                m,
                size: patch_size,
                max_value: slide.max_value,
                data,
            });
        }
    }
    Ok(patches)
}

/// Replicate one grayscale plane into three identical color planes.
pub fn gray_to_rgb(plane: &[f32]) -> Vec<f32> {
    let mut out = Vec::with_capacity(plane.len() * 3);
    for _ in 0..3 {
        out.extend_from_slice(plane);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_slide(m: usize, w: usize, h: usize, value: u16) -> SlideImage {
        SlideImage::new(
            w,
            h,
            (0..m).map(|i| format!("ch{i}")).collect(),
            vec![vec![value; w * h]; m],
            255,
        )
        .unwrap()
    }

    /// 448x448, one bright 224-block at grid (0,0) and one at (1,1).
    fn two_blob_slide() -> SlideImage {
        let (w, h) = (448, 448);
        let mut plane = vec![10u16; w * h];
        for y in 0..224 {
            for x in 0..224 {
                plane[y * w + x] = 200;
                plane[(y + 224) * w + (x + 224)] = 200;
            }
        }
        SlideImage::new(w, h, vec!["sig".into()], vec![plane], 255).unwrap()
    }

    #[test]
    fn or_fusion_keeps_any_bright_channel() {
        let (w, h) = (448, 224);
        let mut bright = vec![10u16; w * h];
        for y in 0..h {
            for x in 0..224 {
                bright[y * w + x] = 240;
            }
        }
        let blank = vec![10u16; w * h];
        let slide = SlideImage::new(
            w,
            h,
            vec!["a".into(), "b".into()],
            vec![bright, blank],
            255,
        )
        .unwrap();
        let mask = foreground_mask(&slide, 224, SlideMode::Mif).unwrap();
        assert_eq!((mask.rows, mask.cols), (1, 2));
        assert_eq!(mask.cells, vec![true, false]);
        assert_eq!(mask.warnings.len(), 1, "blank channel must be skipped with a warning");
    }

    #[test]
    fn all_uniform_channels_error() {
        let slide = uniform_slide(3, 448, 448, 50);
        assert!(matches!(
            foreground_mask(&slide, 224, SlideMode::Mif),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn two_blob_slide_masks_expected_cells() {
        let slide = two_blob_slide();
        let mask = foreground_mask(&slide, 224, SlideMode::Mif).unwrap();
        assert_eq!((mask.rows, mask.cols), (2, 2));
        assert_eq!(mask.cells, vec![true, false, false, true]);
    }

    #[test]
    fn brightfield_polarity_selects_dark_cells() {
        let slide = two_blob_slide(); // bright blobs = background in He mode
        let mask = foreground_mask(&slide, 224, SlideMode::He).unwrap();
        assert_eq!(mask.cells, vec![false, true, true, false]);
    }

    #[test]
    fn brightfield_rejects_multichannel_input() {
        let slide = uniform_slide(3, 224, 224, 10);
        assert!(foreground_mask(&slide, 224, SlideMode::He).is_err());
    }

    #[test]
    fn mask_extents_are_ceiling_of_slide_over_factor() {
        let slide = two_blob_slide();
        let mask = foreground_mask(&slide, 100, SlideMode::Mif).unwrap();
        assert_eq!((mask.rows, mask.cols), (5, 5));
    }

    #[test]
    fn full_foreground_grid_yields_four_patches() {
        let slide = uniform_slide(1, 448, 448, 200);
        let mask = ForegroundMask {
            rows: 2,
            cols: 2,
            factor: 224,
            cells: vec![true; 4],
            warnings: vec![],
        };
        let patches = extract_patches(&slide, &mask, 224).unwrap();
        let coords: Vec<(u32, u32)> = patches.iter().map(|p| p.coords).collect();
        assert_eq!(coords, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
        assert!(patches.iter().all(|p| p.data.len() == 224 * 224));
    }

    #[test]
    fn empty_mask_extracts_nothing() {
        let slide = two_blob_slide();
        let mask = ForegroundMask {
            rows: 2,
            cols: 2,
            factor: 224,
            cells: vec![false; 4],
            warnings: vec![],
        };
        assert!(extract_patches(&slide, &mask, 224).unwrap().is_empty());
    }

    #[test]
    fn partial_mask_fixture_extracts_expected_coords_and_values() {
        let slide = two_blob_slide();
        let mask = foreground_mask(&slide, 224, SlideMode::Mif).unwrap();
        let patches = extract_patches(&slide, &mask, 224).unwrap();
        assert_eq!(patches.len(), 2);
        assert_eq!(patches[0].coords, (0, 0));
        assert_eq!(patches[1].coords, (1, 1));
        assert!(patches[0].data.iter().all(|&v| v == 200));
    }

    #[test]
    fn edge_patches_are_zero_padded() {
        // 300x300 slide, factor 224: grid 2x2 with partial edge cells
        let slide = uniform_slide(1, 300, 300, 200);
        let mask = ForegroundMask {
            rows: 2,
            cols: 2,
            factor: 224,
            cells: vec![true; 4],
            warnings: vec![],
        };
        let patches = extract_patches(&slide, &mask, 224).unwrap();
        let edge = patches.iter().find(|p| p.coords == (1, 1)).expect("edge patch");
        // pixels beyond the 300-pixel extent must be zero
        let inside = edge.data[(0 * 224 + 0) * 224 + 0];
        assert_eq!(inside, 200);
        let padded = edge.data[(0 * 224 + 100) * 224 + 100]; // y=324 > 300
        assert_eq!(padded, 0);
    }

    #[test]
    fn gray_to_rgb_replicates_three_planes() {
        let plane = vec![0.1f32, 0.5, 0.9, 0.0];
        let rgb = gray_to_rgb(&plane);
        assert_eq!(rgb.len(), 12);
        assert_eq!(&rgb[0..4], &rgb[4..8]);
        assert_eq!(&rgb[4..8], &rgb[8..12]);
        let zeros = gray_to_rgb(&[0.0; 4]);
        assert!(zeros.iter().all(|&v| v == 0.0));
    }
}
