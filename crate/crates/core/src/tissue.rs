//! Binary tissue masks from label thumbnails, with an Otsu fallback.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Bitmap;
use crate::tiling::{SlideGeometry, TileSpec};

pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_CAPSULE_OTHER: u8 = 1;
pub const LABEL_CORTEX: u8 = 2;
pub const LABEL_MEDULLA: u8 = 3;

/// 4-class tissue segmentation thumbnail, row-major labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TissueThumbnail {
    pub slide_id: String,
    pub width: u32,
    pub height: u32,
    pub labels: Vec<u8>,
}

impl TissueThumbnail {
    pub fn new(slide_id: impl Into<String>, width: u32, height: u32, labels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || labels.len() != width as usize * height as usize {
            return Err(Error::Dimension(format!(
                "thumbnail {width}x{height} with {} labels",
                labels.len()
            )));
        }
        Ok(TissueThumbnail {
            slide_id: slide_id.into(),
            width,
            height,
            labels,
        })
    }

    pub fn check_size(&self, side: u32) -> Result<()> {
        if self.width != side || self.height != side {
            return Err(Error::Dimension(format!(
                "thumbnail for {} is {}x{}, expected {side}x{side}",
                self.slide_id, self.width, self.height
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TissueSource {
    ExternalModel,
    Otsu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Polarity {
    TissueDark,
    TissueLight,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TissueMask {
    pub slide_id: String,
    pub mask: Bitmap,
    pub source: TissueSource,
}

impl TissueMask {
    pub fn width(&self) -> u32 {
        self.mask.width()
    }

    pub fn height(&self) -> u32 {
        self.mask.height()
    }
}

/// Merges the three tissue labels into one binary mask.
pub fn aggregate_tissue(t: &TissueThumbnail) -> Result<TissueMask> {
    if let Some(&bad) = t.labels.iter().find(|&&l| l > LABEL_MEDULLA) {
        return Err(Error::Format(format!(
            "thumbnail for {} contains label value {bad}; expected 0..=3",
            t.slide_id
        )));
    }
    let w = t.width as usize;
    let mask = Bitmap::from_fn(t.width, t.height, |x, y| {
        t.labels[y as usize * w + x as usize] != LABEL_BACKGROUND
    });
    Ok(TissueMask {
        slide_id: t.slide_id.clone(),
        mask,
        source: TissueSource::ExternalModel,
    })
}

/// Otsu threshold over a 256-bin histogram. Pixels `<= t` form the lower
/// class. Ties go to the lowest threshold.
pub fn otsu_threshold(gray: &[u8]) -> Result<u8> {
    let mut hist = [0u64; 256];
    for &v in gray {
        hist[v as usize] += 1;
    }
    otsu_from_histogram(&hist)
}

/// Scaled between-class variance for a split with `n0` pixels summing to
/// `s0` below the threshold. Shared with the exhaustive test oracle so
/// that tie-breaking is bit-identical.
pub(crate) fn between_class_score(n: u64, s: u64, n0: u64, s0: u64) -> f64 {
    let n1 = n - n0;
    let d = n as i128 * s0 as i128 - n0 as i128 * s as i128;
    let d = d as f64;
    d * d / (n0 as f64 * n1 as f64)
}

pub fn otsu_from_histogram(hist: &[u64; 256]) -> Result<u8> {
    let distinct = hist.iter().filter(|&&c| c > 0).count();
    if distinct < 2 {
        return Err(Error::DegenerateHistogram(format!(
            "need at least two distinct gray values, found {distinct}"
        )));
    }
    let n: u64 = hist.iter().sum();
    let s: u64 = hist.iter().enumerate().map(|(v, &c)| v as u64 * c).sum();
    let (mut n0, mut s0) = (0u64, 0u64);
    let mut best: Option<(u8, f64)> = None;
    for t in 0..255usize {
        n0 += hist[t];
        s0 += t as u64 * hist[t];
        if n0 == 0 || n0 == n {
            continue;
        }
        let score = between_class_score(n, s, n0, s0);
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((t as u8, score));
        }
    }
    Ok(best.map(|(t, _)| t).expect("two distinct values guarantee a split"))
}

/// Tissue mask by Otsu thresholding of a grayscale thumbnail.
pub fn otsu_tissue(
    slide_id: &str,
    width: u32,
    height: u32,
    gray: &[u8],
    polarity: Polarity,
) -> Result<TissueMask> {
    if width == 0 || height == 0 || gray.len() != width as usize * height as usize {
        return Err(Error::Dimension(format!(
            "gray thumbnail {width}x{height} with {} pixels",
            gray.len()
        )));
    }
    let t = otsu_threshold(gray)?;
    let w = width as usize;
    let mask = Bitmap::from_fn(width, height, |x, y| {
        let v = gray[y as usize * w + x as usize];
        match polarity {
            Polarity::TissueDark => v <= t,
            Polarity::TissueLight => v > t,
        }
    });
    Ok(TissueMask {
        slide_id: slide_id.to_string(),
        mask,
        source: TissueSource::Otsu,
    })
}

/// Per-axis overlap weights of thumbnail cells with `[lo, hi)` (thumbnail
/// units), as `(cell index, overlap length)`.
fn axis_weights(lo: f64, hi: f64, cells: u32) -> Vec<(u32, f64)> {
    let first = lo.floor().max(0.0) as u32;
    let last = (hi.ceil() as u32).min(cells);
    (first..last)
        .filter_map(|i| {
            let a = lo.max(i as f64);
            let b = hi.min(i as f64 + 1.0);
            (b > a).then_some((i, b - a))
        })
        .collect()
}

/// Fraction of a slide-frame box covered by tissue, integrating the exact
/// overlap of the box with each thumbnail cell.
pub fn box_tissue_fraction(x: u32, y: u32, w: u32, h: u32, tm: &TissueMask, geom: &SlideGeometry) -> f64 {
    let sx = tm.width() as f64 / geom.width as f64;
    let sy = tm.height() as f64 / geom.height as f64;
    let (x0, x1) = (x as f64 * sx, (x + w) as f64 * sx);
    let (y0, y1) = (y as f64 * sy, (y + h) as f64 * sy);
    let wx = axis_weights(x0, x1, tm.width());
    let wy = axis_weights(y0, y1, tm.height());
    let mut covered = 0.0;
    for &(j, wyj) in &wy {
        let row: f64 = wx
            .iter()
            .filter(|&&(i, _)| tm.mask.get(i, j))
            .map(|&(_, w)| w)
            .sum();
        covered += row * wyj;
    }
    let total = (x1 - x0) * (y1 - y0);
    if total <= 0.0 {
        return 0.0;
    }
    (covered / total).clamp(0.0, 1.0)
}

pub fn tile_tissue_fraction(tile: &TileSpec, tm: &TissueMask, geom: &SlideGeometry) -> f64 {
    let b = tile.slide_box();
    box_tissue_fraction(b.x, b.y, b.w, b.h, tm, geom)
}
