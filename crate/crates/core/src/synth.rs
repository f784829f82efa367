//! Synthetic slides and tile predictions with known ground truth.
//!
//! Shapes live on the half-resolution grid of the slide, which is the model
//! grid of every tile (tile origins are even and the model scale is 1/2), so
//! noise-free predictions survive the model-frame round trip exactly.
//! Glomeruli are filled ellipses, arteries thick elliptical annuli and
//! arterioles thin ones.
//!
//! Per-tile randomness comes from a sub-seed `splitmix64(seed ^
//! splitmix64(x << 32 | y))` of the tile origin, so output does not depend on
//! the number of worker threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{InstanceClass, PipelineConfig};
use crate::error::{Error, Result};
use crate::mask::{iou, Frame, PixelBox, PlacedMask, RleMask, Span};
use crate::merge::TilePrediction;
use crate::tiling::{plan_grid, plan_tiles, GroundTruthInstance, SlideGeometry, TileSpec};
use crate::tissue::{
    aggregate_tissue, box_tissue_fraction, TissueThumbnail, LABEL_BACKGROUND, LABEL_CAPSULE_OTHER, LABEL_CORTEX,
    LABEL_MEDULLA,
};

/// Placement attempts per instance before giving up.
pub const MAX_ATTEMPTS: usize = 10_000;
const SPURIOUS_ATTEMPTS: usize = 64;

/// `confidence = clamp(a * iou + b + slide shift + N(0, sigma))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceModel {
    pub a: f64,
    pub b: f64,
    pub sigma: f64,
    /// Half-width of the uniform per-slide confidence shift.
    pub slide_shift: f64,
    /// Range of the pseudo-IoU fed to the model for spurious instances.
    pub spurious_iou: [f64; 2],
}

impl Default for ConfidenceModel {
    fn default() -> Self {
        ConfidenceModel {
            a: 0.9,
            b: 0.05,
            sigma: 0.06,
            slide_shift: 0.2,
            spurious_iou: [0.1, 0.6],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub seed: u64,
    pub slide_id: String,
    pub width: u32,
    pub height: u32,
    /// Instances per class, in [`InstanceClass::ALL`] order.
    pub counts: [usize; 3],
    /// Outer diameter range per class, working pixels.
    pub sizes: [[u32; 2]; 3],
    /// Boundary jitter, working pixels.
    pub jitter_sigma: f64,
    pub dropout: f64,
    /// Probability that each spurious slot of a tile emits an instance.
    pub spurious_rate: f64,
    /// Spurious slots per tile and class.
    pub spurious_slots: u32,
    pub confidence: ConfidenceModel,
}

impl SynthParams {
    /// A slide whose simulated predictions equal the ground truth.
    pub fn noise_free(seed: u64, slide_id: &str, width: u32, height: u32, counts: [usize; 3]) -> Self {
        SynthParams {
            seed,
            slide_id: slide_id.to_string(),
            width,
            height,
            counts,
            sizes: [[120, 260], [40, 90], [120, 280]],
            jitter_sigma: 0.0,
            dropout: 0.0,
            spurious_rate: 0.0,
            spurious_slots: 0,
            confidence: ConfidenceModel {
                sigma: 0.0,
                slide_shift: 0.0,
                ..Default::default()
            },
        }
    }

    /// Jitter, dropout, spurious instances and confidence noise.
    pub fn noisy(seed: u64, slide_id: &str, width: u32, height: u32, counts: [usize; 3]) -> Self {
        SynthParams {
            jitter_sigma: 2.0,
            dropout: 0.1,
            spurious_rate: 0.5,
            spurious_slots: 4,
            confidence: ConfidenceModel::default(),
            ..Self::noise_free(seed, slide_id, width, height, counts)
        }
    }

    pub fn validate(&self, cfg: &PipelineConfig) -> Result<()> {
        let rate = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} must lie in [0, 1]")))
            }
        };
        rate("dropout", self.dropout)?;
        rate("spurious_rate", self.spurious_rate)?;
        if !(self.jitter_sigma >= 0.0 && self.confidence.sigma >= 0.0 && self.confidence.slide_shift >= 0.0) {
            return Err(Error::Config("noise scales must be non-negative".into()));
        }
        let [lo, hi] = self.confidence.spurious_iou;
        if !(0.0..=1.0).contains(&lo) || !(lo..=1.0).contains(&hi) {
            return Err(Error::Config("spurious_iou must be an ordered range in [0, 1]".into()));
        }
        for [a, b] in self.sizes {
            if a < 8 || a > b {
                return Err(Error::Config(format!("size range [{a}, {b}] invalid")));
            }
        }
        if !self.width.is_multiple_of(2) || !self.height.is_multiple_of(2) || self.width == 0 || self.height == 0 {
            return Err(Error::Config("synthetic slide extent must be even and positive".into()));
        }
        if cfg.model_scale() != 0.5 || !cfg.tile_size.is_multiple_of(2) || !cfg.tile_overlap.is_multiple_of(2) {
            return Err(Error::Config(
                "synthetic slides need an even tile grid at model scale 1/2".into(),
            ));
        }
        Ok(())
    }

    fn margin(&self) -> u32 {
        8 + (6.0 * self.jitter_sigma).ceil() as u32
    }
}

/// Shape geometry on the half-resolution slide grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64, angle: f64 },
    /// Elliptical ring; `inner` scales the hole relative to the outline.
    Annulus { cx: f64, cy: f64, rx: f64, ry: f64, angle: f64, inner: f64 },
}

impl Shape {
    fn params(&self) -> (f64, f64, f64, f64, f64, f64) {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry, angle } => (cx, cy, rx, ry, angle, 0.0),
            Shape::Annulus {
                cx,
                cy,
                rx,
                ry,
                angle,
                inner,
            } => (cx, cy, rx, ry, angle, inner),
        }
    }

    /// Half-resolution bounding box that contains every covered pixel.
    pub fn half_box(&self) -> PixelBox {
        let (cx, cy, rx, ry, _, _) = self.params();
        let r = rx.max(ry);
        let x0 = (cx - r).floor().max(0.0) as u32;
        let y0 = (cy - r).floor().max(0.0) as u32;
        let x1 = (cx + r).ceil().max(1.0) as u32;
        let y1 = (cy + r).ceil().max(1.0) as u32;
        PixelBox::new(x0, y0, (x1 - x0).max(1), (y1 - y0).max(1))
    }

    /// Working-resolution bounding box.
    pub fn work_box(&self) -> PixelBox {
        let b = self.half_box();
        PixelBox::new(2 * b.x, 2 * b.y, 2 * b.w, 2 * b.h)
    }

    fn contains(&self, px: f64, py: f64) -> bool {
        let (cx, cy, rx, ry, angle, inner) = self.params();
        let (s, c) = angle.sin_cos();
        let (dx, dy) = (px - cx, py - cy);
        let u = (dx * c + dy * s) / rx;
        let v = (-dx * s + dy * c) / ry;
        let r2 = u * u + v * v;
        r2 <= 1.0 && r2 > inner * inner
    }

    /// Pixel-centre raster on the half-resolution grid, cut to `window`.
    pub fn rasterize(&self, window: &PixelBox) -> Option<PlacedMask> {
        let b = self.half_box().intersect(window)?;
        let mut spans = Vec::new();
        for i in 0..b.w {
            let mut run: Option<u32> = None;
            for j in 0..=b.h {
                let inside = j < b.h && self.contains((b.x + i) as f64 + 0.5, (b.y + j) as f64 + 0.5);
                match (inside, run) {
                    (true, None) => run = Some(j),
                    (false, Some(y0)) => {
                        spans.push(Span { col: i, y0, y1: j });
                        run = None;
                    }
                    _ => {}
                }
            }
        }
        if spans.is_empty() {
            return None;
        }
        let rle = RleMask::from_spans(b.w, b.h, spans).ok()?;
        Some(PlacedMask::in_slide(rle, b.x, b.y).tight())
    }

    fn jittered(&self, rng: &mut ChaCha8Rng, sigma: f64) -> Shape {
        if sigma == 0.0 {
            return *self;
        }
        let n = Normal::new(0.0, sigma).expect("finite sigma");
        let mut d = || n.sample(rng);
        match *self {
            Shape::Ellipse { cx, cy, rx, ry, angle } => Shape::Ellipse {
                cx: cx + d(),
                cy: cy + d(),
                rx: (rx + d()).max(1.0),
                ry: (ry + d()).max(1.0),
                angle,
            },
            Shape::Annulus {
                cx,
                cy,
                rx,
                ry,
                angle,
                inner,
            } => Shape::Annulus {
                cx: cx + d(),
                cy: cy + d(),
                rx: (rx + d()).max(1.0),
                ry: (ry + d()).max(1.0),
                angle,
                inner,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub gt_id: String,
    pub class: InstanceClass,
    pub shape: Shape,
    pub area: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSlide {
    pub geometry: SlideGeometry,
    pub gts: Vec<GroundTruthInstance>,
    pub thumbnail: TissueThumbnail,
    pub truth_manifest: Vec<TruthRecord>,
    /// Per-slide offset added to every confidence.
    pub confidence_shift: f64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Sub-seed for one tile, derived from its origin.
pub fn tile_seed(seed: u64, tile: &TileSpec) -> u64 {
    let key = ((tile.origin[0] as u64) << 32) | tile.origin[1] as u64;
    splitmix64(seed ^ splitmix64(key))
}

/// Rounded-square tissue outline with capsule, cortex and medulla bands.
fn paint_thumbnail(slide_id: &str, geom: &SlideGeometry, side: u32) -> Result<TissueThumbnail> {
    let mut labels = Vec::with_capacity(side as usize * side as usize);
    for j in 0..side {
        for i in 0..side {
            let x = (i as f64 + 0.5) * geom.width as f64 / side as f64;
            let y = (j as f64 + 0.5) * geom.height as f64 / side as f64;
            let u = (x - geom.width as f64 / 2.0) / (0.49 * geom.width as f64);
            let v = (y - geom.height as f64 / 2.0) / (0.49 * geom.height as f64);
            let r = (u.powi(4) + v.powi(4)).powf(0.25);
            labels.push(if r > 1.0 {
                LABEL_BACKGROUND
            } else if r > 0.93 {
                LABEL_CAPSULE_OTHER
            } else if r > 0.5 {
                LABEL_CORTEX
            } else {
                LABEL_MEDULLA
            });
        }
    }
    TissueThumbnail::new(slide_id, side, side, labels)
}

fn dilate(b: &PixelBox, m: u32) -> (i64, i64, i64, i64) {
    (
        b.x as i64 - m as i64,
        b.y as i64 - m as i64,
        b.x1() as i64 + m as i64,
        b.y1() as i64 + m as i64,
    )
}

fn boxes_meet(a: (i64, i64, i64, i64), b: &PixelBox) -> bool {
    a.0 < b.x1() as i64 && (b.x as i64) < a.2 && a.1 < b.y1() as i64 && (b.y as i64) < a.3
}

fn box_inside(a: (i64, i64, i64, i64), b: &PixelBox) -> bool {
    a.0 >= b.x as i64 && a.1 >= b.y as i64 && a.2 <= b.x1() as i64 && a.3 <= b.y1() as i64
}

/// Kept tiles that fully contain `work` (with margin). `None` when the box
/// touches a kept tile without being inside it.
fn containing_tiles(work: &PixelBox, margin: u32, tiles: &[TileSpec]) -> Option<Vec<usize>> {
    let d = dilate(work, margin);
    let mut inside = Vec::new();
    for (k, t) in tiles.iter().enumerate() {
        let tb = t.slide_box();
        if box_inside(d, &tb) {
            inside.push(k);
        } else if boxes_meet(d, &tb) {
            return None;
        }
    }
    Some(inside)
}

fn class_shape(class: InstanceClass, cx: f64, cy: f64, diameter: f64, rng: &mut ChaCha8Rng) -> Shape {
    let rx = diameter / 4.0;
    let ry = rx * rng.random_range(0.65..1.0);
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    match class {
        InstanceClass::Glomerulus => Shape::Ellipse { cx, cy, rx, ry, angle },
        InstanceClass::Artery => Shape::Annulus {
            cx,
            cy,
            rx,
            ry,
            angle,
            inner: 0.55,
        },
        InstanceClass::Arteriole => Shape::Annulus {
            cx,
            cy,
            rx,
            ry,
            angle,
            inner: 0.65,
        },
    }
}

fn class_tag(class: InstanceClass) -> &'static str {
    match class {
        InstanceClass::Glomerulus => "glom",
        InstanceClass::Arteriole => "arteriole",
        InstanceClass::Artery => "artery",
    }
}

/// Lays out non-overlapping instances inside tissue, each wholly inside
/// every kept tile it touches.
pub fn generate_slide(p: &SynthParams, cfg: &PipelineConfig) -> Result<SynthSlide> {
    p.validate(cfg)?;
    let geom = SlideGeometry::new(p.slide_id.clone(), p.width, p.height);
    let thumbnail = paint_thumbnail(&p.slide_id, &geom, cfg.thumbnail_size)?;
    let tissue = aggregate_tissue(&thumbnail)?;
    let tiles = plan_tiles(&geom, &tissue, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let confidence_shift = if p.confidence.slide_shift > 0.0 {
        rng.random_range(-p.confidence.slide_shift..=p.confidence.slide_shift)
    } else {
        0.0
    };
    let margin = p.margin();
    let mut placed: Vec<PixelBox> = Vec::new();
    let mut gts = Vec::new();
    let mut manifest = Vec::new();
    // Largest structures first so the small ones fill the gaps.
    let order = [InstanceClass::Artery, InstanceClass::Glomerulus, InstanceClass::Arteriole];
    for class in order {
        let [lo, hi] = p.sizes[class.index()];
        for n in 0..p.counts[class.index()] {
            let mut found = None;
            for _ in 0..MAX_ATTEMPTS {
                let d = rng.random_range(lo as f64..=hi as f64);
                let cx = rng.random_range(0.0..p.width as f64 / 2.0);
                let cy = rng.random_range(0.0..p.height as f64 / 2.0);
                let shape = class_shape(class, cx, cy, d, &mut rng);
                let work = shape.work_box();
                let dil = dilate(&work, margin);
                if dil.0 < 0 || dil.1 < 0 || dil.2 > p.width as i64 || dil.3 > p.height as i64 {
                    continue;
                }
                if placed.iter().any(|b| boxes_meet(dil, b)) {
                    continue;
                }
                if box_tissue_fraction(work.x, work.y, work.w, work.h, &tissue, &geom) < 1.0 - 1e-9 {
                    continue;
                }
                match containing_tiles(&work, margin, &tiles) {
                    Some(inside) if !inside.is_empty() => {}
                    _ => continue,
                }
                let Some(half) = shape.rasterize(&PixelBox::new(0, 0, p.width / 2, p.height / 2)) else {
                    continue;
                };
                found = Some((shape, work, half));
                break;
            }
            let Some((shape, work, half)) = found else {
                return Err(Error::Capacity(format!(
                    "could not place {class} #{n} on {}x{} slide after {MAX_ATTEMPTS} attempts",
                    p.width, p.height
                )));
            };
            let mask = half.resample(2, 1, Frame::Slide).expect("non-empty raster");
            let gt_id = format!("{}-{:04}", class_tag(class), n);
            manifest.push(TruthRecord {
                gt_id: gt_id.clone(),
                class,
                shape,
                area: mask.area(),
            });
            gts.push(GroundTruthInstance {
                gt_id,
                class,
                mask,
                parent_id: None,
            });
            placed.push(work);
        }
    }
    Ok(SynthSlide {
        geometry: geom,
        gts,
        thumbnail,
        truth_manifest: manifest,
        confidence_shift,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmissionSource {
    Truth { gt_id: String },
    Spurious,
}

/// Generation record of one simulated prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Emission {
    pub tile_id: String,
    pub index_in_tile: u32,
    pub class: InstanceClass,
    pub confidence: f64,
    pub source: EmissionSource,
    /// IoU of the emitted mask with the truth it came from (0 if spurious).
    pub iou_with_truth: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedTile {
    pub tile: TileSpec,
    pub predictions: Vec<TilePrediction>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub tiles: Vec<SimulatedTile>,
    pub manifest: Vec<Emission>,
}

fn confidence(p: &SynthParams, shift: f64, iou: f64, rng: &mut ChaCha8Rng) -> f64 {
    let c = &p.confidence;
    let noise = if c.sigma > 0.0 {
        Normal::new(0.0, c.sigma).expect("finite sigma").sample(rng)
    } else {
        0.0
    };
    (c.a * iou + c.b + shift + noise).clamp(0.0, 1.0)
}

/// Half-resolution window of a tile's model frame in slide coordinates.
fn half_window(tile: &TileSpec) -> PixelBox {
    let m = tile.model_box();
    PixelBox::new(tile.origin[0] / 2, tile.origin[1] / 2, m.w, m.h)
}

fn to_model(m: &PlacedMask, tile: &TileSpec) -> PlacedMask {
    m.reframe(tile.origin[0] / 2, tile.origin[1] / 2, tile.model_frame())
        .expect("raster cropped to the tile window")
}

fn simulate_tile(s: &SynthSlide, all_tiles: &[TileSpec], tile: &TileSpec, p: &SynthParams) -> (SimulatedTile, Vec<Emission>) {
    let mut rng = ChaCha8Rng::seed_from_u64(tile_seed(p.seed, tile));
    let window = half_window(tile);
    let tb = tile.slide_box();
    let margin = p.margin();
    let mut preds = Vec::new();
    let mut emissions = Vec::new();
    let mut push = |class: InstanceClass, conf: f64, m: &PlacedMask, source: EmissionSource, iou_truth: f64| {
        let idx = preds.len() as u32;
        preds.push(TilePrediction {
            tile_id: tile.tile_id.clone(),
            index_in_tile: idx,
            class,
            confidence: conf,
            mask: m.rle.clone(),
            origin: m.origin,
        });
        emissions.push(Emission {
            tile_id: tile.tile_id.clone(),
            index_in_tile: idx,
            class,
            confidence: conf,
            source,
            iou_with_truth: iou_truth,
        });
    };

    for rec in &s.truth_manifest {
        if !box_inside(dilate(&rec.shape.work_box(), margin), &tb) {
            continue;
        }
        if p.dropout > 0.0 && rng.random::<f64>() < p.dropout {
            continue;
        }
        let truth = rec.shape.rasterize(&window).map(|m| to_model(&m, tile));
        let shown = rec.shape.jittered(&mut rng, p.jitter_sigma / 2.0);
        let (Some(truth), Some(emitted)) = (truth, shown.rasterize(&window).map(|m| to_model(&m, tile))) else {
            continue;
        };
        let v = iou(&emitted, &truth).expect("same model frame");
        let conf = confidence(p, s.confidence_shift, v, &mut rng);
        push(rec.class, conf, &emitted, EmissionSource::Truth { gt_id: rec.gt_id.clone() }, v);
    }

    if p.spurious_slots > 0 && p.spurious_rate > 0.0 {
        let others: Vec<PixelBox> = all_tiles
            .iter()
            .filter(|t| t.tile_id != tile.tile_id)
            .map(|t| t.slide_box())
            .collect();
        let mut taken: Vec<PixelBox> = Vec::new();
        for class in InstanceClass::ALL {
            let [lo, hi] = p.sizes[class.index()];
            for _ in 0..p.spurious_slots {
                if rng.random::<f64>() >= p.spurious_rate {
                    continue;
                }
                for _ in 0..SPURIOUS_ATTEMPTS {
                    // Spurious blobs are on the small side of the class range.
                    let d = rng.random_range(lo as f64..=(lo + hi) as f64 / 2.0);
                    let cx = rng.random_range(window.x as f64..window.x1() as f64);
                    let cy = rng.random_range(window.y as f64..window.y1() as f64);
                    let shape = class_shape(class, cx, cy, d, &mut rng);
                    let work = shape.work_box();
                    let dil = dilate(&work, margin);
                    if !box_inside(dil, &tb)
                        || others.iter().any(|o| boxes_meet(dil, o))
                        || taken.iter().any(|b| boxes_meet(dil, b))
                        || s.truth_manifest.iter().any(|r| boxes_meet(dil, &r.shape.work_box()))
                    {
                        continue;
                    }
                    let Some(m) = shape.rasterize(&window) else {
                        continue;
                    };
                    let [a, b] = p.confidence.spurious_iou;
                    let pseudo = if b > a { rng.random_range(a..b) } else { a };
                    let conf = confidence(p, s.confidence_shift, pseudo, &mut rng);
                    push(class, conf, &to_model(&m, tile), EmissionSource::Spurious, 0.0);
                    taken.push(work);
                    break;
                }
            }
        }
    }
    (
        SimulatedTile {
            tile: tile.clone(),
            predictions: preds,
        },
        emissions,
    )
}

/// Emits model-frame predictions for every tile: a (possibly jittered) copy
/// of each ground truth inside the tile unless dropped, plus spurious blobs
/// that avoid the truth, the tile edges and every other tile.
pub fn simulate_predictions(s: &SynthSlide, tiles: &[TileSpec], p: &SynthParams) -> Result<Simulation> {
    if let Some(t) = tiles.iter().find(|t| t.origin[0] % 2 != 0 || t.origin[1] % 2 != 0 || t.model_scale != 0.5) {
        return Err(Error::Config(format!(
            "tile {} is not on the even half-scale grid",
            t.tile_id
        )));
    }
    let out: Vec<(SimulatedTile, Vec<Emission>)> =
        tiles.par_iter().map(|t| simulate_tile(s, tiles, t, p)).collect();
    let mut sim = Simulation {
        tiles: Vec::with_capacity(out.len()),
        manifest: Vec::new(),
    };
    for (t, e) in out {
        sim.tiles.push(t);
        sim.manifest.extend(e);
    }
    Ok(sim)
}

/// Plans the tiles of a synthetic slide exactly as the pipeline will.
pub fn plan_synth_tiles(s: &SynthSlide, cfg: &PipelineConfig) -> Result<Vec<TileSpec>> {
    plan_tiles(&s.geometry, &aggregate_tissue(&s.thumbnail)?, cfg)
}

/// Every grid tile, ignoring tissue; used to size benchmarks.
pub fn grid_size(geom: &SlideGeometry, cfg: &PipelineConfig) -> usize {
    plan_grid(geom, cfg).len()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> PipelineConfig {
        PipelineConfig {
            thumbnail_size: 256,
            ..Default::default()
        }
    }

    #[test]
    fn empty_counts_give_tissue_only_slide() {
        let p = SynthParams::noise_free(1, "s", 8192, 8192, [0, 0, 0]);
        let s = generate_slide(&p, &cfg()).unwrap();
        assert!(s.gts.is_empty());
        assert!(s.thumbnail.labels.contains(&LABEL_CORTEX));
        assert!(s.thumbnail.labels.contains(&LABEL_MEDULLA));
        assert!(s.thumbnail.labels.contains(&LABEL_CAPSULE_OTHER));
    }

    #[test]
    fn same_seed_same_slide() {
        let p = SynthParams::noisy(9, "s", 8192, 8192, [4, 3, 2]);
        let a = generate_slide(&p, &cfg()).unwrap();
        let b = generate_slide(&p, &cfg()).unwrap();
        assert_eq!(a, b);
        let tiles = plan_synth_tiles(&a, &cfg()).unwrap();
        assert_eq!(
            simulate_predictions(&a, &tiles, &p).unwrap(),
            simulate_predictions(&b, &tiles, &p).unwrap()
        );
    }

    #[test]
    fn ten_glomeruli_do_not_overlap() {
        let p = SynthParams::noise_free(3, "s", 16384, 16384, [10, 0, 0]);
        let s = generate_slide(&p, &cfg()).unwrap();
        assert_eq!(s.gts.len(), 10);
        for (i, a) in s.gts.iter().enumerate() {
            for b in &s.gts[i + 1..] {
                assert_eq!(a.mask.intersection_area(&b.mask).unwrap(), 0);
            }
        }
    }

    #[test]
    fn overfull_slide_is_a_capacity_error() {
        let p = SynthParams::noise_free(3, "s", 1024, 1024, [200, 0, 0]);
        let c = PipelineConfig {
            tile_size: 1024,
            model_input: 512,
            thumbnail_size: 64,
            ..Default::default()
        };
        assert!(matches!(generate_slide(&p, &c), Err(Error::Capacity(_))));
    }

    #[test]
    fn noise_free_predictions_equal_truth() {
        let p = SynthParams::noise_free(5, "s", 8192, 8192, [5, 5, 5]);
        let s = generate_slide(&p, &cfg()).unwrap();
        let tiles = plan_synth_tiles(&s, &cfg()).unwrap();
        let sim = simulate_predictions(&s, &tiles, &p).unwrap();
        let expected = (p.confidence.a + p.confidence.b).clamp(0.0, 1.0);
        assert!(!sim.manifest.is_empty());
        for e in &sim.manifest {
            assert_eq!(e.iou_with_truth, 1.0);
            assert_eq!(e.confidence, expected);
        }
        // every gt is emitted at least once
        for g in &s.gts {
            assert!(sim.manifest.iter().any(|e| e.source == EmissionSource::Truth { gt_id: g.gt_id.clone() }));
        }
    }

    #[test]
    fn full_dropout_leaves_only_spurious() {
        let mut p = SynthParams::noisy(5, "s", 8192, 8192, [5, 5, 5]);
        p.dropout = 1.0;
        let s = generate_slide(&p, &cfg()).unwrap();
        let tiles = plan_synth_tiles(&s, &cfg()).unwrap();
        let sim = simulate_predictions(&s, &tiles, &p).unwrap();
        assert!(sim.manifest.iter().all(|e| e.source == EmissionSource::Spurious));
        assert!(!sim.manifest.is_empty());
    }

    #[test]
    fn jitter_keeps_iou_high_but_imperfect() {
        let window = PixelBox::new(0, 0, 400, 400);
        let truth_shape = Shape::Ellipse {
            cx: 200.0,
            cy: 200.0,
            rx: 50.0,
            ry: 40.0,
            angle: 0.3,
        };
        let truth = truth_shape.rasterize(&window).unwrap();
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // sigma 2 working px = 1 half-res px
            let m = truth_shape.jittered(&mut rng, 1.0).rasterize(&window).unwrap();
            let v = iou(&m, &truth).unwrap();
            assert!((0.7..1.0).contains(&v), "seed {seed}: {v}");
        }
    }

    #[test]
    fn manifest_accounts_for_every_prediction() {
        let p = SynthParams::noisy(11, "s", 8192, 8192, [6, 6, 6]);
        let s = generate_slide(&p, &cfg()).unwrap();
        let tiles = plan_synth_tiles(&s, &cfg()).unwrap();
        let sim = simulate_predictions(&s, &tiles, &p).unwrap();
        let n: usize = sim.tiles.iter().map(|t| t.predictions.len()).sum();
        assert_eq!(n, sim.manifest.len());
        for t in &sim.tiles {
            for pr in &t.predictions {
                pr.validate(&t.tile).unwrap();
                assert!(sim
                    .manifest
                    .iter()
                    .any(|e| e.tile_id == pr.tile_id && e.index_in_tile == pr.index_in_tile));
            }
        }
    }

    #[test]
    fn noise_free_slide_scores_perfectly_end_to_end() {
        use crate::merge::merge_tiles;
        use crate::metrics::evaluate_slide;
        let c = cfg();
        let p = SynthParams::noise_free(21, "s", 8192, 8192, [6, 6, 6]);
        let s = generate_slide(&p, &c).unwrap();
        let tiles = plan_synth_tiles(&s, &c).unwrap();
        let sim = simulate_predictions(&s, &tiles, &p).unwrap();
        let input: Vec<_> = sim.tiles.into_iter().map(|t| (t.tile, t.predictions)).collect();
        let merged = merge_tiles(&input, &s.geometry, &c).unwrap();
        let done = crate::merge::finish_cascade(merged, [0.5; 3], &c);
        assert_eq!(done.active_count(), s.gts.len());
        for m in evaluate_slide(&done, &s.gts, &[], &c).unwrap() {
            assert_eq!((m.f1, m.iou_mean, m.specificity), (1.0, 1.0, 1.0), "{:?}", m.class);
        }
    }

    #[test]
    fn annulus_has_a_hole() {
        let s = Shape::Annulus {
            cx: 50.0,
            cy: 50.0,
            rx: 30.0,
            ry: 30.0,
            angle: 0.0,
            inner: 0.5,
        };
        let m = s.rasterize(&PixelBox::new(0, 0, 100, 100)).unwrap();
        let bm = m.rle.decode();
        let (ox, oy) = (m.origin[0], m.origin[1]);
        assert!(!bm.get(50 - ox, 50 - oy));
        assert!(bm.get(50 - ox + 22, 50 - oy));
    }
}
