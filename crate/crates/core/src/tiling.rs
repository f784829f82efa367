//! Tile grid planning and conversions between slide, tile and model frames.

use serde::{Deserialize, Serialize};

use crate::config::{InstanceClass, PipelineConfig};
use crate::error::{Error, Result};
use crate::mask::{Frame, PixelBox, PlacedMask};
use crate::tissue::{tile_tissue_fraction, TissueMask};

/// Slide extent at working resolution (20x).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideGeometry {
    pub slide_id: String,
    pub width: u32,
    pub height: u32,
    /// Working-to-scanner scale; metadata only.
    #[serde(default = "default_level0")]
    pub level0_factor: f64,
}

fn default_level0() -> f64 {
    2.0
}

impl SlideGeometry {
    pub fn new(slide_id: impl Into<String>, width: u32, height: u32) -> Self {
        SlideGeometry {
            slide_id: slide_id.into(),
            width,
            height,
            level0_factor: 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config(format!(
                "slide {} has empty extent {}x{}",
                self.slide_id, self.width, self.height
            )));
        }
        if !(self.level0_factor >= 1.0) {
            return Err(Error::Config(format!(
                "level0_factor {} must be >= 1",
                self.level0_factor
            )));
        }
        Ok(())
    }

    pub fn extent(&self) -> PixelBox {
        PixelBox::new(0, 0, self.width, self.height)
    }
}

/// One window of the tile grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileSpec {
    pub tile_id: String,
    pub slide_id: String,
    pub origin: [u32; 2],
    /// `[width, height]`; both equal the configured tile size unless the
    /// slide is smaller than one tile along that axis.
    pub size: [u32; 2],
    pub model_scale: f64,
}

impl TileSpec {
    pub fn slide_box(&self) -> PixelBox {
        PixelBox::new(self.origin[0], self.origin[1], self.size[0], self.size[1])
    }

    /// Exact rational form `(num, den)` of the model scale.
    pub fn scale_ratio(&self) -> (u32, u32) {
        scale_ratio(self.model_scale)
    }

    /// Model-frame extent of this tile.
    pub fn model_box(&self) -> PixelBox {
        let (num, den) = self.scale_ratio();
        let f = |v: u32| ((v as u64 * num as u64).div_ceil(den as u64)) as u32;
        PixelBox::new(0, 0, f(self.size[0]).max(1), f(self.size[1]).max(1))
    }

    pub fn model_frame(&self) -> Frame {
        Frame::Model(self.tile_id.clone())
    }

    pub fn tile_frame(&self) -> Frame {
        Frame::Tile(self.tile_id.clone())
    }
}

/// Smallest-denominator rational equal to `scale` (up to 1e-9).
pub fn scale_ratio(scale: f64) -> (u32, u32) {
    for den in 1..=65536u32 {
        let num = scale * den as f64;
        if (num - num.round()).abs() < 1e-9 && num.round() >= 1.0 {
            return (num.round() as u32, den);
        }
    }
    panic!("model scale {scale} has no small rational form")
}

/// Tile origins along one axis and the tile length used on it.
///
/// Steps by `tile - overlap`; the last origin is clamped so the tile ends on
/// the slide edge, and duplicates are dropped.
pub fn axis_origins(side: u32, tile: u32, overlap: u32) -> (Vec<u32>, u32) {
    if side <= tile {
        return (vec![0], side);
    }
    let step = tile - overlap;
    let mut out = Vec::new();
    let mut x = 0u32;
    loop {
        let o = x.min(side - tile);
        if out.last() != Some(&o) {
            out.push(o);
        }
        if x + tile >= side {
            break;
        }
        x += step;
    }
    (out, tile)
}

fn tile_id(x: u32, y: u32) -> String {
    format!("y{y:06}_x{x:06}")
}

/// Every grid tile before tissue gating, in row-major order.
pub fn plan_grid(geom: &SlideGeometry, cfg: &PipelineConfig) -> Vec<TileSpec> {
    let (xs, tw) = axis_origins(geom.width, cfg.tile_size, cfg.tile_overlap);
    let (ys, th) = axis_origins(geom.height, cfg.tile_size, cfg.tile_overlap);
    let scale = cfg.model_scale();
    ys.iter()
        .flat_map(|&y| {
            xs.iter().map(move |&x| TileSpec {
                tile_id: tile_id(x, y),
                slide_id: geom.slide_id.clone(),
                origin: [x, y],
                size: [tw, th],
                model_scale: scale,
            })
        })
        .collect()
}

/// Plans the strided grid and keeps tiles with enough tissue.
pub fn plan_tiles(geom: &SlideGeometry, tissue: &TissueMask, cfg: &PipelineConfig) -> Result<Vec<TileSpec>> {
    geom.validate()?;
    cfg.validate()?;
    Ok(plan_grid(geom, cfg)
        .into_iter()
        .filter(|t| tile_tissue_fraction(t, tissue, geom) >= cfg.min_tile_tissue_fraction)
        .collect())
}

/// An annotated instance. Slide-level annotations have no parent; tile
/// pieces point back to the annotation they were cut from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthInstance {
    pub gt_id: String,
    pub class: InstanceClass,
    pub mask: PlacedMask,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_id: Option<String>,
}

/// Cuts slide-level annotations to a tile window, expressed in the tile frame.
pub fn split_annotations(gts: &[GroundTruthInstance], tile: &TileSpec) -> Vec<GroundTruthInstance> {
    let window = tile.slide_box();
    gts.iter()
        .filter_map(|gt| {
            let piece = gt.mask.crop(&window)?;
            let mask = piece
                .reframe(window.x, window.y, tile.tile_frame())
                .expect("cropped piece lies inside the tile");
            Some(GroundTruthInstance {
                gt_id: format!("{}@{}", gt.gt_id, tile.tile_id),
                class: gt.class,
                mask,
                parent_id: Some(gt.parent_id.clone().unwrap_or_else(|| gt.gt_id.clone())),
            })
        })
        .collect()
}

/// Result of mapping a model-frame mask back onto the slide.
#[derive(Debug, Clone, PartialEq)]
pub struct SlideMapping {
    pub mask: PlacedMask,
    /// True when part of the upsampled mask fell outside the slide.
    pub clipped: bool,
}

/// Upsamples a model-frame mask to the tile frame (nearest neighbour) and
/// translates it onto the slide. Returns `None` if nothing remains after
/// clipping to the slide.
pub fn tile_to_slide(m: &PlacedMask, tile: &TileSpec, geom: &SlideGeometry) -> Result<Option<SlideMapping>> {
    if !tile.model_box().contains_box(&m.extent()) {
        return Err(Error::Frame(format!(
            "mask extent {:?} exceeds model frame {:?} of tile {}",
            m.extent(),
            tile.model_box(),
            tile.tile_id
        )));
    }
    let (num, den) = tile.scale_ratio();
    let Some(up) = m.resample(den, num, tile.tile_frame()) else {
        return Ok(None);
    };
    let placed = up.shift(tile.origin[0], tile.origin[1], Frame::Slide);
    let slide = geom.extent();
    if slide.contains_box(&placed.extent()) {
        return Ok(Some(SlideMapping {
            mask: placed,
            clipped: false,
        }));
    }
    Ok(placed.crop(&slide).map(|mask| SlideMapping {
        mask,
        clipped: true,
    }))
}

/// Crops a slide-frame mask to the tile and downsamples it to the model
/// frame. Inverse of [`tile_to_slide`] for masks on the model-scale grid.
pub fn slide_to_tile(m: &PlacedMask, tile: &TileSpec) -> Option<PlacedMask> {
    let window = tile.slide_box();
    let piece = m.crop(&window)?;
    let local = piece.reframe(window.x, window.y, tile.tile_frame()).ok()?;
    let (num, den) = tile.scale_ratio();
    local.resample(num, den, tile.model_frame())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{Bitmap, RleMask};
    use crate::tissue::TissueSource;

    fn all_tissue() -> TissueMask {
        TissueMask {
            slide_id: "s".into(),
            mask: Bitmap::from_fn(16, 16, |_, _| true),
            source: TissueSource::ExternalModel,
        }
    }

    fn gt(id: &str, x: u32, y: u32, w: u32, h: u32) -> GroundTruthInstance {
        GroundTruthInstance {
            gt_id: id.into(),
            class: InstanceClass::Glomerulus,
            mask: PlacedMask::in_slide(RleMask::full(w, h).unwrap(), x, y),
            parent_id: None,
        }
    }

    #[test]
    fn axis_examples() {
        assert_eq!(axis_origins(8160, 4096, 32).0, vec![0, 4064]);
        assert_eq!(axis_origins(4096, 4096, 32).0, vec![0]);
        assert_eq!(axis_origins(8192, 4096, 32).0, vec![0, 4064, 4096]);
        assert_eq!(axis_origins(3000, 4096, 32), (vec![0], 3000));
    }

    #[test]
    fn plan_examples() {
        let cfg = PipelineConfig::default();
        let tiles = plan_tiles(&SlideGeometry::new("s", 8160, 8160), &all_tissue(), &cfg).unwrap();
        assert_eq!(tiles.len(), 4);
        assert_eq!(tiles[1].origin, [4064, 0]);
        assert_eq!(tiles[2].origin, [0, 4064]);
        let one = plan_tiles(&SlideGeometry::new("s", 4096, 4096), &all_tissue(), &cfg).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].origin, [0, 0]);
        assert_eq!(one[0].model_box(), PixelBox::new(0, 0, 2048, 2048));
        let small = plan_tiles(&SlideGeometry::new("s", 1000, 700), &all_tissue(), &cfg).unwrap();
        assert_eq!(small.len(), 1);
        assert_eq!(small[0].size, [1000, 700]);
    }

    #[test]
    fn gating_drops_tiles_without_tissue() {
        let cfg = PipelineConfig::default();
        let tm = TissueMask {
            mask: Bitmap::from_fn(16, 16, |x, _| x < 4),
            ..all_tissue()
        };
        let tiles = plan_tiles(&SlideGeometry::new("s", 8160, 8160), &tm, &cfg).unwrap();
        assert_eq!(tiles.len(), 2);
        assert!(tiles.iter().all(|t| t.origin[0] == 0));
    }

    #[test]
    fn ids_sort_row_major() {
        let cfg = PipelineConfig::default();
        let tiles = plan_grid(&SlideGeometry::new("s", 12224, 12224), &cfg);
        let mut ids: Vec<_> = tiles.iter().map(|t| t.tile_id.clone()).collect();
        let orig = ids.clone();
        ids.sort();
        assert_eq!(ids, orig);
    }

    #[test]
    fn split_examples() {
        let cfg = PipelineConfig::default();
        let tiles = plan_grid(&SlideGeometry::new("s", 8160, 4096), &cfg);
        // Fully inside the first tile.
        let inside = split_annotations(&[gt("a", 100, 100, 50, 50)], &tiles[0]);
        assert_eq!(inside.len(), 1);
        assert_eq!(inside[0].mask.origin, [100, 100]);
        assert_eq!(inside[0].mask.area(), 2500);
        // Disjoint from the second tile.
        assert!(split_annotations(&[gt("a", 100, 100, 50, 50)], &tiles[1]).is_empty());
        // Straddles the 32-px overlap strip [4064, 4096).
        let g = gt("b", 4000, 200, 200, 100);
        let left = split_annotations(std::slice::from_ref(&g), &tiles[0]);
        let right = split_annotations(std::slice::from_ref(&g), &tiles[1]);
        assert_eq!(left[0].parent_id.as_deref(), Some("b"));
        assert_eq!(right[0].parent_id.as_deref(), Some("b"));
        let overlap_px = 32 * 100;
        assert_eq!(left[0].mask.area() + right[0].mask.area(), g.mask.area() + overlap_px);
        assert_eq!(right[0].mask.origin, [0, 200]);
    }

    #[test]
    fn tile_to_slide_examples() {
        let geom = SlideGeometry::new("s", 8160, 8160);
        let tile = TileSpec {
            tile_id: "t".into(),
            slide_id: "s".into(),
            origin: [4064, 0],
            size: [4096, 4096],
            model_scale: 0.5,
        };
        let m = PlacedMask::new(RleMask::full(10, 10).unwrap(), 0, 0, tile.model_frame());
        let out = tile_to_slide(&m, &tile, &geom).unwrap().unwrap();
        assert!(!out.clipped);
        assert_eq!(out.mask.extent(), PixelBox::new(4064, 0, 20, 20));
        assert_eq!(out.mask.area(), 400);

        let full = PlacedMask::new(RleMask::full(2048, 2048).unwrap(), 0, 0, tile.model_frame());
        let out = tile_to_slide(&full, &tile, &geom).unwrap().unwrap();
        assert_eq!(out.mask.area(), 4096 * 4096);

        let ident = TileSpec {
            origin: [0, 0],
            model_scale: 1.0,
            ..tile.clone()
        };
        let m = PlacedMask::new(RleMask::full(3, 7).unwrap(), 5, 9, ident.model_frame());
        let out = tile_to_slide(&m, &ident, &geom).unwrap().unwrap();
        assert_eq!(out.mask.origin, [5, 9]);
        assert_eq!(out.mask.rle, m.rle);

        let outside = PlacedMask::new(RleMask::full(10, 10).unwrap(), 2045, 0, tile.model_frame());
        assert!(matches!(tile_to_slide(&outside, &tile, &geom), Err(Error::Frame(_))));
    }

    #[test]
    fn tile_to_slide_clips_to_slide() {
        let geom = SlideGeometry::new("s", 4100, 4100);
        let tile = TileSpec {
            tile_id: "t".into(),
            slide_id: "s".into(),
            origin: [10, 10],
            size: [4096, 4096],
            model_scale: 0.5,
        };
        let m = PlacedMask::new(RleMask::full(8, 8).unwrap(), 2040, 0, tile.model_frame());
        let out = tile_to_slide(&m, &tile, &geom).unwrap().unwrap();
        assert!(out.clipped);
        assert_eq!(out.mask.extent().x1(), 4100);
    }

    proptest::proptest! {
        #[test]
        fn planned_grid_covers_slide(w in 1u32..20000, h in 1u32..20000) {
            let cfg = PipelineConfig::default();
            let geom = SlideGeometry::new("s", w, h);
            let tiles = plan_grid(&geom, &cfg);
            let (xs, tw) = axis_origins(w, cfg.tile_size, cfg.tile_overlap);
            // Every column is covered by some tile, and tiles stay inside.
            let mut covered = 0u32;
            for &x in &xs {
                proptest::prop_assert!(x <= covered);
                covered = covered.max(x + tw);
            }
            proptest::prop_assert_eq!(covered, w);
            for t in &tiles {
                proptest::prop_assert!(geom.extent().contains_box(&t.slide_box()));
            }
            proptest::prop_assert_eq!(plan_grid(&geom, &cfg), tiles);
        }

        #[test]
        fn model_grid_masks_round_trip(x in 0u32..1000, y in 0u32..1000, w in 1u32..60, h in 1u32..60, seed in 0u64..1000) {
            let geom = SlideGeometry::new("s", 8160, 8160);
            let cfg = PipelineConfig::default();
            let tile = plan_grid(&geom, &cfg)[3].clone();
            let mut s = seed;
            let bm = Bitmap::from_fn(w, h, |_, _| { s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); (s >> 33) & 1 == 1 });
            let Ok(rle) = crate::mask::rle_encode(&bm) else { return Ok(()) };
            if rle.is_empty() { return Ok(()); }
            let model = PlacedMask::new(rle, x, y, tile.model_frame());
            let slide = tile_to_slide(&model, &tile, &geom).unwrap().unwrap().mask;
            proptest::prop_assert_eq!(slide.area(), model.area() * 4);
            let back = slide_to_tile(&slide, &tile).unwrap();
            proptest::prop_assert_eq!(back.tight(), model.tight());
        }

        #[test]
        fn splitting_conserves_area_without_overlap(x in 0u32..900, y in 0u32..900, w in 1u32..300, h in 1u32..300) {
            let cfg = PipelineConfig { tile_size: 256, tile_overlap: 0, model_input: 128, ..Default::default() };
            let geom = SlideGeometry::new("s", 1280, 1280);
            let g = gt("g", x, y, w, h);
            let total: u64 = plan_grid(&geom, &cfg)
                .iter()
                .flat_map(|t| split_annotations(std::slice::from_ref(&g), t))
                .map(|p| p.mask.area())
                .sum();
            proptest::prop_assert_eq!(total, g.mask.area());
        }
    }
}
