//! Slide-level post-processing cascade over per-tile model predictions.
//!
//! Stage order: edge filter (per tile, model frame) -> same-class merge
//! (slide frame) -> confidence threshold -> small-instance filter ->
//! cross-class overlap removal. Every candidate is kept in the output with
//! the status of the stage that removed it.

use std::cmp::Ordering;
use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{InstanceClass, PipelineConfig, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::mask::{border_band_area_fraction, edge_contact_fraction, iou, PixelBox, PlacedMask, RleMask};
use crate::tiling::{tile_to_slide, SlideGeometry, TileSpec};

/// One instance emitted by the segmentation model for a tile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TilePrediction {
    pub tile_id: String,
    pub index_in_tile: u32,
    pub class: InstanceClass,
    pub confidence: f64,
    /// Mask in the tile's model frame, positioned at `origin`.
    pub mask: RleMask,
    #[serde(default)]
    pub origin: [u32; 2],
}

impl TilePrediction {
    pub fn model_mask(&self, tile: &TileSpec) -> PlacedMask {
        PlacedMask::new(self.mask.clone(), self.origin[0], self.origin[1], tile.model_frame())
    }

    pub fn validate(&self, tile: &TileSpec) -> Result<()> {
        if self.tile_id != tile.tile_id {
            return Err(Error::Format(format!(
                "prediction for tile {} routed to tile {}",
                self.tile_id, tile.tile_id
            )));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::Format(format!(
                "prediction {}#{} has confidence {} outside [0, 1]",
                self.tile_id, self.index_in_tile, self.confidence
            )));
        }
        if self.mask.is_empty() {
            return Err(Error::Format(format!(
                "prediction {}#{} has an empty mask",
                self.tile_id, self.index_in_tile
            )));
        }
        let ext = self.model_mask(tile).extent();
        if !tile.model_box().contains_box(&ext) {
            return Err(Error::Frame(format!(
                "prediction {}#{} extent {ext:?} exceeds model frame {:?}",
                self.tile_id,
                self.index_in_tile,
                tile.model_box()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CandidateStatus {
    Active,
    EdgeFiltered,
    SuppressedSameClass,
    BelowThreshold,
    TooSmall,
    CrossClassRemoved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceCandidate {
    pub candidate_id: String,
    pub class: InstanceClass,
    pub confidence: f64,
    pub mask: PlacedMask,
    pub tile_id: String,
    pub index_in_tile: u32,
    pub status: CandidateStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suppressed_by: Option<String>,
}

impl InstanceCandidate {
    pub fn is_active(&self) -> bool {
        self.status == CandidateStatus::Active
    }

    fn order_key(&self) -> (&str, u32) {
        (&self.tile_id, self.index_in_tile)
    }

    fn retire(&mut self, status: CandidateStatus) {
        if self.status == CandidateStatus::Active {
            self.status = status;
        }
    }
}

/// Number of active candidates after a stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCount {
    pub stage: String,
    pub active: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideInstanceSet {
    pub format_version: u32,
    pub slide_id: String,
    pub geometry: SlideGeometry,
    pub candidates: Vec<InstanceCandidate>,
    pub config: PipelineConfig,
    #[serde(default)]
    pub warnings: Vec<String>,
    #[serde(default)]
    pub trace: Vec<StageCount>,
}

impl SlideInstanceSet {
    pub fn active(&self) -> impl Iterator<Item = &InstanceCandidate> {
        self.candidates.iter().filter(|c| c.is_active())
    }

    pub fn active_of(&self, class: InstanceClass) -> impl Iterator<Item = &InstanceCandidate> {
        self.active().filter(move |c| c.class == class)
    }

    pub fn active_count(&self) -> usize {
        self.active().count()
    }

    fn record(&mut self, stage: &str) {
        let active = self.active_count();
        self.trace.push(StageCount {
            stage: stage.to_string(),
            active,
        });
    }
}

pub const STAGE_EDGE: &str = "edge_filter";
pub const STAGE_MERGE: &str = "same_class_merge";
pub const STAGE_THRESHOLD: &str = "threshold";
pub const STAGE_SMALL: &str = "small_filter";
pub const STAGE_CROSS: &str = "cross_class_removal";

/// Predictions of one tile split by the edge criteria.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EdgePartition {
    pub kept: Vec<TilePrediction>,
    pub edge_filtered: Vec<TilePrediction>,
}

/// Drops predictions that both hug the tile edge (boundary contact above
/// `edge_circumference_max`) and sit in the border band (band area above
/// `edge_band_area_min`). Measured in the model frame.
pub fn filter_edge_predictions(
    preds: Vec<TilePrediction>,
    tile: &TileSpec,
    cfg: &PipelineConfig,
) -> Result<EdgePartition> {
    let frame = tile.model_box();
    let mut out = EdgePartition::default();
    for p in preds {
        let m = p.model_mask(tile);
        let contact = edge_contact_fraction(&m, &frame)?;
        let band = border_band_area_fraction(&m, &frame, cfg.band_fraction)?;
        if contact > cfg.edge_circumference_max && band > cfg.edge_band_area_min {
            out.edge_filtered.push(p);
        } else {
            out.kept.push(p);
        }
    }
    Ok(out)
}

/// Edge-filtered predictions of one tile, ready for merging.
#[derive(Debug, Clone, PartialEq)]
pub struct TileBatch {
    pub tile: TileSpec,
    pub partition: EdgePartition,
}

fn confidence_order(a: &InstanceCandidate, b: &InstanceCandidate) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then_with(|| a.order_key().cmp(&b.order_key()))
}

/// Uniform-grid index over candidate bounding boxes.
struct SpatialIndex {
    cell: u32,
    buckets: HashMap<(u32, u32), Vec<usize>>,
}

impl SpatialIndex {
    fn build(boxes: &[PixelBox], cell: u32) -> Self {
        let mut buckets: HashMap<(u32, u32), Vec<usize>> = HashMap::new();
        for (i, b) in boxes.iter().enumerate() {
            for cy in b.y / cell..=(b.y1() - 1) / cell {
                for cx in b.x / cell..=(b.x1() - 1) / cell {
                    buckets.entry((cx, cy)).or_default().push(i);
                }
            }
        }
        SpatialIndex { cell, buckets }
    }

    fn query(&self, b: &PixelBox) -> Vec<usize> {
        let mut out = Vec::new();
        for cy in b.y / self.cell..=(b.y1() - 1) / self.cell {
            for cx in b.x / self.cell..=(b.x1() - 1) / self.cell {
                if let Some(v) = self.buckets.get(&(cx, cy)) {
                    out.extend_from_slice(v);
                }
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// All pairs `(i, j)` with `i < j` among `items` that pass `keep_pair` and
/// whose mask IoU passes `keep_iou`. Sorted by `(i, j)`.
fn overlapping_pairs(
    items: &[&InstanceCandidate],
    keep_pair: impl Fn(&InstanceCandidate, &InstanceCandidate) -> bool + Sync,
    keep_iou: impl Fn(f64) -> bool + Sync,
) -> Vec<(usize, usize)> {
    let boxes: Vec<PixelBox> = items.iter().map(|c| c.mask.extent()).collect();
    let index = SpatialIndex::build(&boxes, 512);
    let mut pairs: Vec<(usize, usize)> = (0..items.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            let near = index.query(&boxes[i]);
            let keep_pair = &keep_pair;
            let keep_iou = &keep_iou;
            let boxes = &boxes;
            near.into_iter().filter_map(move |j| {
                if j <= i || !boxes[i].overlaps(&boxes[j]) || !keep_pair(items[i], items[j]) {
                    return None;
                }
                let v = iou(&items[i].mask, &items[j].mask).ok()?;
                keep_iou(v).then_some((i, j))
            })
        })
        .collect();
    pairs.sort_unstable();
    pairs
}

fn map_prediction(
    p: &TilePrediction,
    tile: &TileSpec,
    geom: &SlideGeometry,
    status: CandidateStatus,
    warnings: &mut Vec<String>,
) -> Result<Option<InstanceCandidate>> {
    let Some(mapped) = tile_to_slide(&p.model_mask(tile), tile, geom)? else {
        warnings.push(format!(
            "{}#{}: mask fell outside the slide and was dropped",
            p.tile_id, p.index_in_tile
        ));
        return Ok(None);
    };
    if mapped.clipped {
        warnings.push(format!("{}#{}: mask clipped to slide extent", p.tile_id, p.index_in_tile));
    }
    Ok(Some(InstanceCandidate {
        candidate_id: format!("{}#{}", p.tile_id, p.index_in_tile),
        class: p.class,
        confidence: p.confidence,
        mask: mapped.mask,
        tile_id: p.tile_id.clone(),
        index_in_tile: p.index_in_tile,
        status,
        suppressed_by: None,
    }))
}

/// Maps every prediction to the slide and keeps the highest-confidence
/// instance among same-class overlaps (IoU above `same_class_suppress_iou`).
///
/// Candidates are swept in order of descending confidence, then
/// `(tile_id, index_in_tile)`; each still-active candidate suppresses every
/// later active one it overlaps. The result does not depend on the order of
/// `batches` or of predictions within them.
pub fn merge_same_class(
    batches: &[TileBatch],
    geom: &SlideGeometry,
    cfg: &PipelineConfig,
) -> Result<SlideInstanceSet> {
    let mapped: Vec<(Vec<InstanceCandidate>, Vec<String>)> = batches
        .par_iter()
        .map(|b| {
            let mut warnings = Vec::new();
            let mut out = Vec::new();
            let parts = [
                (&b.partition.kept, CandidateStatus::Active),
                (&b.partition.edge_filtered, CandidateStatus::EdgeFiltered),
            ];
            for (preds, status) in parts {
                for p in preds {
                    if let Some(c) = map_prediction(p, &b.tile, geom, status, &mut warnings)? {
                        out.push(c);
                    }
                }
            }
            Ok((out, warnings))
        })
        .collect::<Result<_>>()?;
    let mut candidates = Vec::new();
    let mut warnings = Vec::new();
    for (c, w) in mapped {
        candidates.extend(c);
        warnings.extend(w);
    }
    candidates.sort_by(|a, b| a.order_key().cmp(&b.order_key()));
    warnings.sort();
    if let Some(w) = candidates.windows(2).find(|w| w[0].order_key() == w[1].order_key()) {
        return Err(Error::Format(format!("duplicate prediction id {}", w[0].candidate_id)));
    }

    let mut set = SlideInstanceSet {
        format_version: FORMAT_VERSION,
        slide_id: geom.slide_id.clone(),
        geometry: geom.clone(),
        candidates,
        config: cfg.clone(),
        warnings,
        trace: Vec::new(),
    };
    set.record(STAGE_EDGE);
    suppress_same_class(&mut set, cfg.same_class_suppress_iou);
    set.record(STAGE_MERGE);
    Ok(set)
}

/// Edge filter per tile (in parallel), then [`merge_same_class`].
pub fn merge_tiles(
    tiles: &[(TileSpec, Vec<TilePrediction>)],
    geom: &SlideGeometry,
    cfg: &PipelineConfig,
) -> Result<SlideInstanceSet> {
    let batches: Vec<TileBatch> = tiles
        .par_iter()
        .map(|(tile, preds)| {
            Ok(TileBatch {
                tile: tile.clone(),
                partition: filter_edge_predictions(preds.clone(), tile, cfg)?,
            })
        })
        .collect::<Result<_>>()?;
    merge_same_class(&batches, geom, cfg)
}

fn suppress_same_class(set: &mut SlideInstanceSet, threshold: f64) {
    let mut order: Vec<usize> = (0..set.candidates.len())
        .filter(|&i| set.candidates[i].is_active())
        .collect();
    order.sort_by(|&a, &b| confidence_order(&set.candidates[a], &set.candidates[b]));
    let ranked: Vec<&InstanceCandidate> = order.iter().map(|&i| &set.candidates[i]).collect();
    let pairs = overlapping_pairs(&ranked, |a, b| a.class == b.class, |v| v > threshold);

    let mut alive = vec![true; order.len()];
    let mut suppressor: Vec<Option<usize>> = vec![None; order.len()];
    let mut start = 0;
    for r in 0..order.len() {
        let end = start + pairs[start..].iter().take_while(|p| p.0 == r).count();
        if alive[r] {
            for &(_, j) in &pairs[start..end] {
                if alive[j] {
                    alive[j] = false;
                    suppressor[j] = Some(r);
                }
            }
        }
        start = end;
    }
    for (r, &i) in order.iter().enumerate() {
        if let Some(by) = suppressor[r] {
            let by_id = set.candidates[order[by]].candidate_id.clone();
            let c = &mut set.candidates[i];
            c.retire(CandidateStatus::SuppressedSameClass);
            c.suppressed_by = Some(by_id);
        }
    }
}

/// Retires active candidates whose confidence is below their class
/// threshold. `thresholds` is indexed by [`InstanceClass::index`].
pub fn apply_thresholds(mut set: SlideInstanceSet, thresholds: [f64; 3]) -> SlideInstanceSet {
    for c in set.candidates.iter_mut() {
        if c.is_active() && c.confidence < thresholds[c.class.index()] {
            c.retire(CandidateStatus::BelowThreshold);
        }
    }
    set.record(STAGE_THRESHOLD);
    set
}

/// Retires active candidates with fewer than `min_instance_area` pixels.
pub fn filter_small(mut set: SlideInstanceSet, cfg: &PipelineConfig) -> SlideInstanceSet {
    for c in set.candidates.iter_mut() {
        if c.is_active() && c.mask.area() < cfg.min_instance_area {
            c.retire(CandidateStatus::TooSmall);
        }
    }
    set.record(STAGE_SMALL);
    set
}

/// Retires both members of every different-class pair of active candidates
/// whose IoU reaches `cross_class_iou_cutoff`.
pub fn remove_cross_class_overlaps(mut set: SlideInstanceSet, cfg: &PipelineConfig) -> SlideInstanceSet {
    let idx: Vec<usize> = (0..set.candidates.len())
        .filter(|&i| set.candidates[i].is_active())
        .collect();
    let refs: Vec<&InstanceCandidate> = idx.iter().map(|&i| &set.candidates[i]).collect();
    let cutoff = cfg.cross_class_iou_cutoff;
    let pairs = overlapping_pairs(&refs, |a, b| a.class != b.class, |v| v >= cutoff);
    let mut hit = vec![false; idx.len()];
    for (a, b) in pairs {
        hit[a] = true;
        hit[b] = true;
    }
    for (k, &i) in idx.iter().enumerate() {
        if hit[k] {
            set.candidates[i].retire(CandidateStatus::CrossClassRemoved);
        }
    }
    set.record(STAGE_CROSS);
    set
}

/// The stages after merging: threshold, small filter, cross-class removal.
pub fn finish_cascade(set: SlideInstanceSet, thresholds: [f64; 3], cfg: &PipelineConfig) -> SlideInstanceSet {
    remove_cross_class_overlaps(filter_small(apply_thresholds(set, thresholds), cfg), cfg)
}

/// Per-pixel maximum confidence of active candidates of `class` inside
/// `window`, row-major; zero where nothing covers a pixel.
pub fn confidence_raster(set: &SlideInstanceSet, class: InstanceClass, window: &PixelBox) -> Vec<f32> {
    let mut raster = vec![0f32; window.w as usize * window.h as usize];
    for c in set.active_of(class) {
        if !c.mask.extent().overlaps(window) {
            continue;
        }
        for s in c.mask.frame_spans() {
            if s.col < window.x || s.col >= window.x1() {
                continue;
            }
            let lo = s.y0.max(window.y);
            let hi = s.y1.min(window.y1());
            for y in lo..hi {
                let k = (y - window.y) as usize * window.w as usize + (s.col - window.x) as usize;
                raster[k] = raster[k].max(c.confidence as f32);
            }
        }
    }
    raster
}
