//! Detection matching, per-slide metrics, slide-averaged reports, PR curves
//! and the threshold-mode comparison grid.

use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{InstanceClass, PipelineConfig, FORMAT_VERSION};
use crate::dct::{decide_thresholds, thresholds_by_class, DctModel, ThresholdMode};
use crate::error::{Error, Result};
use crate::mask::{iou, PixelBox, PixelSet, PlacedMask};
use crate::merge::{finish_cascade, CandidateStatus, InstanceCandidate, SlideInstanceSet};
use crate::tiling::GroundTruthInstance;

/// A prediction as seen by the matcher.
#[derive(Debug, Clone, Copy)]
pub struct PredRef<'a> {
    pub id: &'a str,
    pub confidence: f64,
    pub mask: &'a PlacedMask,
}

impl<'a> From<&'a InstanceCandidate> for PredRef<'a> {
    fn from(c: &'a InstanceCandidate) -> Self {
        PredRef {
            id: &c.candidate_id,
            confidence: c.confidence,
            mask: &c.mask,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GtRef<'a> {
    pub id: &'a str,
    pub mask: &'a PlacedMask,
}

impl<'a> From<&'a GroundTruthInstance> for GtRef<'a> {
    fn from(g: &'a GroundTruthInstance) -> Self {
        GtRef {
            id: &g.gt_id,
            mask: &g.mask,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub candidate_id: String,
    pub gt_id: String,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub slide_id: String,
    pub class: InstanceClass,
    /// Matched pairs in matching order.
    pub pairs: Vec<MatchPair>,
    pub unmatched_preds: Vec<String>,
    pub unmatched_gts: Vec<String>,
    pub match_iou: f64,
}

impl MatchResult {
    pub fn tp(&self) -> usize {
        self.pairs.len()
    }

    pub fn fp(&self) -> usize {
        self.unmatched_preds.len()
    }

    pub fn fn_count(&self) -> usize {
        self.unmatched_gts.len()
    }
}

/// What greedy matching did with one prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankedOutcome {
    /// Index into the prediction slice.
    pub pred: usize,
    pub confidence: f64,
    /// Matched ground truth index and IoU.
    pub gt: Option<(usize, f64)>,
}

fn check_frames(preds: &[PredRef], gts: &[GtRef]) -> Result<()> {
    let mut frames = preds.iter().map(|p| &p.mask.frame).chain(gts.iter().map(|g| &g.mask.frame));
    if let Some(first) = frames.next() {
        if let Some(other) = frames.find(|f| *f != first) {
            return Err(Error::Frame(format!(
                "matching needs one frame, got {first:?} and {other:?}"
            )));
        }
    }
    Ok(())
}

/// Greedy one-to-one matching. Predictions are visited by descending
/// confidence (ties by id); each takes the free ground truth with the highest
/// IoU that reaches `match_iou` (ties by gt id).
///
/// The outcome list is in visiting order. Because later predictions never
/// affect earlier ones, the first `k` outcomes are exactly the matching of
/// the `k` most confident predictions.
pub fn greedy_match(preds: &[PredRef], gts: &[GtRef], match_iou: f64) -> Result<Vec<RankedOutcome>> {
    check_frames(preds, gts)?;
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .confidence
            .total_cmp(&preds[a].confidence)
            .then_with(|| preds[a].id.cmp(preds[b].id))
    });
    let gt_boxes: Vec<PixelBox> = gts.iter().map(|g| g.mask.extent()).collect();
    let mut taken = vec![false; gts.len()];
    let mut out = Vec::with_capacity(order.len());
    for i in order {
        let p = &preds[i];
        let pb = p.mask.extent();
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] || !pb.overlaps(&gt_boxes[j]) {
                continue;
            }
            let v = iou(p.mask, g.mask)?;
            if v <= 0.0 || v < match_iou {
                continue;
            }
            best = match best {
                Some((bj, bv)) if bv > v || (bv == v && gts[bj].id <= g.id) => Some((bj, bv)),
                _ => Some((j, v)),
            };
        }
        if let Some((j, _)) = best {
            taken[j] = true;
        }
        out.push(RankedOutcome {
            pred: i,
            confidence: p.confidence,
            gt: best,
        });
    }
    Ok(out)
}

pub fn match_instances(
    slide_id: &str,
    class: InstanceClass,
    preds: &[PredRef],
    gts: &[GtRef],
    match_iou: f64,
) -> Result<MatchResult> {
    let ranked = greedy_match(preds, gts, match_iou)?;
    let mut pairs = Vec::new();
    let mut unmatched_preds = Vec::new();
    let mut matched_gt = vec![false; gts.len()];
    for r in &ranked {
        match r.gt {
            Some((j, v)) => {
                matched_gt[j] = true;
                pairs.push(MatchPair {
                    candidate_id: preds[r.pred].id.to_string(),
                    gt_id: gts[j].id.to_string(),
                    iou: v,
                });
            }
            None => unmatched_preds.push(preds[r.pred].id.to_string()),
        }
    }
    let mut unmatched_gts: Vec<String> = gts
        .iter()
        .zip(&matched_gt)
        .filter(|(_, &m)| !m)
        .map(|(g, _)| g.id.to_string())
        .collect();
    unmatched_preds.sort();
    unmatched_gts.sort();
    Ok(MatchResult {
        slide_id: slide_id.to_string(),
        class,
        pairs,
        unmatched_preds,
        unmatched_gts,
        match_iou,
    })
}

/// `num / den`, or 1 when both are zero.
fn ratio_or_one(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// F1 from counts: `2tp / (2tp + fp + fn)`, with 1 when nothing was
/// predicted and nothing was expected.
pub fn f1_from_counts(tp: usize, n_pred: usize, n_gt: usize) -> f64 {
    if n_pred + n_gt == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (n_pred + n_gt) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSlideMetrics {
    pub slide_id: String,
    pub class: InstanceClass,
    /// Whether this slide counts towards the class means.
    pub included: bool,
    /// Predictions of this class that reached the threshold stage.
    pub n_candidates: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub iou_mean: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub specificity: f64,
    pub tn_pixels: u64,
    pub fp_pixels: u64,
}

/// Counts-based scores from a match plus pixel-level specificity over
/// `extent`. Pixels in `ignore` belong to neither class of the pixel test.
pub fn slide_metrics(
    m: &MatchResult,
    extent: &PixelBox,
    preds: &[PredRef],
    gts: &[GtRef],
    ignore: &PixelSet,
) -> ClassSlideMetrics {
    let (tp, fp, fn_) = (m.tp(), m.fp(), m.fn_count());
    let precision = ratio_or_one(tp as u64, (tp + fp) as u64);
    let recall = ratio_or_one(tp as u64, (tp + fn_) as u64);
    // Counts form keeps ties between modes exact.
    let f1 = f1_from_counts(tp, tp + fp, tp + fn_);
    let iou_mean = if m.pairs.is_empty() {
        0.0
    } else {
        m.pairs.iter().map(|p| p.iou).sum::<f64>() / m.pairs.len() as f64
    };

    let p = PixelSet::from_masks(preds.iter().map(|p| p.mask));
    let g = PixelSet::from_masks(gts.iter().map(|g| g.mask)).union(ignore);
    let covered = p.union(&g).len();
    let tn_pixels = extent.area().saturating_sub(covered);
    let fp_pixels = p.len() - p.intersection_len(&g);
    ClassSlideMetrics {
        slide_id: m.slide_id.clone(),
        class: m.class,
        included: !preds.is_empty() || !gts.is_empty(),
        n_candidates: preds.len(),
        tp,
        fp,
        fn_,
        iou_mean,
        precision,
        recall,
        f1,
        specificity: ratio_or_one(tn_pixels, tn_pixels + fp_pixels),
        tn_pixels,
        fp_pixels,
    }
}

/// Ignore regions of a slide and the overlap rule for dropping instances.
pub struct IgnoreFilter {
    pixels: PixelSet,
    max_overlap: f64,
}

impl IgnoreFilter {
    pub fn new(regions: &[PlacedMask], max_overlap: f64) -> Self {
        IgnoreFilter {
            pixels: PixelSet::from_masks(regions),
            max_overlap,
        }
    }

    pub fn pixels(&self) -> &PixelSet {
        &self.pixels
    }

    /// True when `m` stays in the evaluation.
    pub fn keeps(&self, m: &PlacedMask) -> bool {
        self.pixels.is_empty() || self.pixels.overlap_with(m) as f64 <= self.max_overlap * m.area() as f64
    }
}

fn reached_threshold(c: &InstanceCandidate) -> bool {
    matches!(
        c.status,
        CandidateStatus::Active
            | CandidateStatus::BelowThreshold
            | CandidateStatus::TooSmall
            | CandidateStatus::CrossClassRemoved
    )
}

/// Matches the active candidates of a finished set against ground truth and
/// scores every class. A class counts towards the means when the slide has a
/// ground truth of that class or a candidate of it that reached the
/// threshold stage, so inclusion is the same under every threshold.
pub fn evaluate_slide(
    set: &SlideInstanceSet,
    gts: &[GroundTruthInstance],
    ignore: &[PlacedMask],
    cfg: &PipelineConfig,
) -> Result<Vec<ClassSlideMetrics>> {
    let filter = IgnoreFilter::new(ignore, cfg.ignore_overlap);
    let extent = set.geometry.extent();
    InstanceClass::ALL
        .iter()
        .map(|&class| {
            let preds: Vec<PredRef> = set
                .active_of(class)
                .filter(|c| filter.keeps(&c.mask))
                .map(PredRef::from)
                .collect();
            let class_gts: Vec<GtRef> = gts
                .iter()
                .filter(|g| g.class == class && filter.keeps(&g.mask))
                .map(GtRef::from)
                .collect();
            let reached = set
                .candidates
                .iter()
                .filter(|c| c.class == class && reached_threshold(c) && filter.keeps(&c.mask))
                .count();
            let m = match_instances(&set.slide_id, class, &preds, &class_gts, cfg.match_iou)?;
            let mut out = slide_metrics(&m, &extent, &preds, &class_gts, filter.pixels());
            out.n_candidates = reached;
            out.included = reached > 0 || !class_gts.is_empty();
            Ok(out)
        })
        .collect()
}

/// Slide-averaged scores of one class. `None` when no slide counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMeans {
    pub class: InstanceClass,
    pub n_slides: usize,
    pub miou: Option<f64>,
    pub map: Option<f64>,
    pub mar: Option<f64>,
    pub mf1: Option<f64>,
    pub mas: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub format_version: u32,
    pub mode: String,
    pub slides: Vec<ClassSlideMetrics>,
    pub means: Vec<ClassMeans>,
    pub config: PipelineConfig,
}

fn mean_of(rows: &[&ClassSlideMetrics], f: impl Fn(&ClassSlideMetrics) -> f64) -> Option<f64> {
    if rows.is_empty() {
        None
    } else {
        Some(rows.iter().map(|r| f(r)).sum::<f64>() / rows.len() as f64)
    }
}

pub fn class_means(slides: &[ClassSlideMetrics], class: InstanceClass) -> ClassMeans {
    let rows: Vec<&ClassSlideMetrics> = slides.iter().filter(|s| s.class == class && s.included).collect();
    ClassMeans {
        class,
        n_slides: rows.len(),
        miou: mean_of(&rows, |r| r.iou_mean),
        map: mean_of(&rows, |r| r.precision),
        mar: mean_of(&rows, |r| r.recall),
        mf1: mean_of(&rows, |r| r.f1),
        mas: mean_of(&rows, |r| r.specificity),
    }
}

/// Unweighted per-class means over slides, folded in slide-id order.
pub fn aggregate_report(
    mut slides: Vec<ClassSlideMetrics>,
    mode: &str,
    cfg: &PipelineConfig,
) -> Result<MetricsReport> {
    if slides.is_empty() {
        return Err(Error::Report("no slide metrics to aggregate".into()));
    }
    slides.sort_by(|a, b| (&a.slide_id, a.class).cmp(&(&b.slide_id, b.class)));
    let means = InstanceClass::ALL.iter().map(|&c| class_means(&slides, c)).collect();
    Ok(MetricsReport {
        format_version: FORMAT_VERSION,
        mode: mode.to_string(),
        slides,
        means,
        config: cfg.clone(),
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.3}"))
}

/// Markdown grid of classes against the five slide-averaged metrics, one
/// column group per split.
pub fn render_table2(splits: &[(&str, &MetricsReport)]) -> String {
    let mut s = String::from("| Class |");
    for (name, _) in splits {
        for m in ["mIOU", "mAP", "mAR", "mF1", "mAS"] {
            let _ = write!(s, " {name} {m} |");
        }
    }
    s.push_str("\n|---|");
    s.push_str(&"---:|".repeat(5 * splits.len()));
    s.push('\n');
    for class in InstanceClass::ALL {
        let _ = write!(s, "| {class} |");
        for (_, report) in splits {
            let m = report.means.iter().find(|m| m.class == class);
            for v in [
                m.and_then(|m| m.miou),
                m.and_then(|m| m.map),
                m.and_then(|m| m.mar),
                m.and_then(|m| m.mf1),
                m.and_then(|m| m.mas),
            ] {
                let _ = write!(s, " {} |", cell(v));
            }
        }
        s.push('\n');
    }
    s
}

#[derive(Serialize)]
struct LongRow<'a> {
    slide: &'a str,
    class: &'a str,
    metric: &'a str,
    value: f64,
}

/// Long-form CSV (`slide,class,metric,value`); means use the slide name `mean`.
pub fn write_metrics_csv<W: Write>(report: &MetricsReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Report(format!("csv: {e}"));
    for s in &report.slides {
        let values = [
            ("iou_mean", s.iou_mean),
            ("precision", s.precision),
            ("recall", s.recall),
            ("f1", s.f1),
            ("specificity", s.specificity),
            ("tp", s.tp as f64),
            ("fp", s.fp as f64),
            ("fn", s.fn_ as f64),
        ];
        for (metric, value) in values {
            w.serialize(LongRow {
                slide: &s.slide_id,
                class: s.class.name(),
                metric,
                value,
            })
            .map_err(csv_err)?;
        }
    }
    for m in &report.means {
        for (metric, v) in [("mIOU", m.miou), ("mAP", m.map), ("mAR", m.mar), ("mF1", m.mf1), ("mAS", m.mas)] {
            if let Some(value) = v {
                w.serialize(LongRow {
                    slide: "mean",
                    class: m.class.name(),
                    metric,
                    value,
                })
                .map_err(csv_err)?;
            }
        }
    }
    w.flush().map_err(|e| Error::Report(format!("csv: {e}")))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
    /// Confidence cut that produced the point; absent on aggregate curves.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub slide_id: String,
    pub class: InstanceClass,
    pub points: Vec<PrPoint>,
    /// Set when recall is undefined (no ground truth).
    pub empty: bool,
}

/// One point per unique confidence, swept from high to low.
pub fn pr_curve(
    slide_id: &str,
    class: InstanceClass,
    preds: &[PredRef],
    gts: &[GtRef],
    match_iou: f64,
) -> Result<PrCurve> {
    if gts.is_empty() {
        return Ok(PrCurve {
            slide_id: slide_id.to_string(),
            class,
            points: Vec::new(),
            empty: true,
        });
    }
    let ranked = greedy_match(preds, gts, match_iou)?;
    let mut points = Vec::new();
    let mut tp = 0usize;
    for (k, r) in ranked.iter().enumerate() {
        tp += r.gt.is_some() as usize;
        let group_ends = ranked.get(k + 1).is_none_or(|n| n.confidence != r.confidence);
        if group_ends {
            points.push(PrPoint {
                recall: tp as f64 / gts.len() as f64,
                precision: tp as f64 / (k + 1) as f64,
                threshold: Some(r.confidence),
            });
        }
    }
    Ok(PrCurve {
        slide_id: slide_id.to_string(),
        class,
        points,
        empty: false,
    })
}

/// Interpolated precision: the best precision at recall `>= r`, 0 if none.
pub fn interpolated_precision(curve: &PrCurve, r: f64) -> f64 {
    curve
        .points
        .iter()
        .filter(|p| p.recall >= r - 1e-12)
        .map(|p| p.precision)
        .fold(0.0, f64::max)
}

pub const PR_GRID_STEPS: usize = 100;

/// Pointwise mean of the non-empty curves on the recall grid 0, 0.01, ..., 1.
pub fn aggregate_pr_curves(class: InstanceClass, curves: &[PrCurve]) -> PrCurve {
    let used: Vec<&PrCurve> = curves.iter().filter(|c| c.class == class && !c.empty).collect();
    let points = if used.is_empty() {
        Vec::new()
    } else {
        (0..=PR_GRID_STEPS)
            .map(|i| {
                let r = i as f64 / PR_GRID_STEPS as f64;
                let p = used.iter().map(|c| interpolated_precision(c, r)).sum::<f64>() / used.len() as f64;
                PrPoint {
                    recall: r,
                    precision: p,
                    threshold: None,
                }
            })
            .collect()
    };
    PrCurve {
        slide_id: "aggregate".into(),
        class,
        empty: used.is_empty(),
        points,
    }
}

#[derive(Serialize)]
struct PrRow<'a> {
    class: &'a str,
    slide: &'a str,
    recall: f64,
    precision: f64,
}

pub fn write_pr_csv<W: Write>(curves: &[PrCurve], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for c in curves {
        for p in &c.points {
            w.serialize(PrRow {
                class: c.class.name(),
                slide: &c.slide_id,
                recall: p.recall,
                precision: p.precision,
            })
            .map_err(|e| Error::Report(format!("csv: {e}")))?;
        }
    }
    w.flush().map_err(|e| Error::Report(format!("csv: {e}")))?;
    Ok(())
}

fn class_color(class: InstanceClass) -> &'static str {
    match class {
        InstanceClass::Glomerulus => "#1f77b4",
        InstanceClass::Arteriole => "#2ca02c",
        InstanceClass::Artery => "#9467bd",
    }
}

/// Three side-by-side panels (one per class): faint per-slide curves and a
/// dashed red mean curve.
pub fn render_pr_svg(curves: &[PrCurve]) -> String {
    const PANEL: f64 = 260.0;
    const MARGIN: f64 = 40.0;
    let width = 3.0 * (PANEL + 2.0 * MARGIN);
    let height = PANEL + 2.0 * MARGIN + 20.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (k, class) in InstanceClass::ALL.iter().enumerate() {
        let x0 = k as f64 * (PANEL + 2.0 * MARGIN) + MARGIN;
        let y0 = MARGIN;
        let px = |r: f64| x0 + r * PANEL;
        let py = |p: f64| y0 + (1.0 - p) * PANEL;
        let _ = writeln!(s, r#"<g class="panel" data-class="{class}">"#);
        let _ = writeln!(
            s,
            r#"<rect x="{x0}" y="{y0}" width="{PANEL}" height="{PANEL}" fill="none" stroke="black"/>"#
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle" font-size="13">{class}</text>"#,
            x0 + PANEL / 2.0,
            y0 - 12.0
        );
        for t in [0.0, 0.5, 1.0] {
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle">{t}</text>"#,
                px(t),
                y0 + PANEL + 14.0
            );
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="end">{t}</text>"#,
                x0 - 4.0,
                py(t) + 4.0
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">Recall</text>"#,
            x0 + PANEL / 2.0,
            y0 + PANEL + 30.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle" transform="rotate(-90 {} {})">Precision</text>"#,
            x0 - 26.0,
            y0 + PANEL / 2.0,
            x0 - 26.0,
            y0 + PANEL / 2.0
        );
        let polyline = |c: &PrCurve| -> String {
            c.points
                .iter()
                .map(|p| format!("{:.2},{:.2}", px(p.recall), py(p.precision)))
                .collect::<Vec<_>>()
                .join(" ")
        };
        for c in curves.iter().filter(|c| c.class == *class && !c.empty && c.slide_id != "aggregate") {
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{}" stroke-opacity="0.35" stroke-width="1"/>"#,
                polyline(c),
                class_color(*class)
            );
        }
        let agg = aggregate_pr_curves(*class, curves);
        if !agg.empty {
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="red" stroke-width="2" stroke-dasharray="3,3"/>"#,
                polyline(&agg)
            );
        }
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    s
}

/// One slide ready for evaluation: the merged candidate set (before the
/// threshold stage) plus its annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSlide {
    pub set: SlideInstanceSet,
    pub gts: Vec<GroundTruthInstance>,
    pub ignore: Vec<PlacedMask>,
}

/// Per-slide metrics under one threshold mode.
pub fn evaluate_mode(
    slides: &[EvalSlide],
    mode: &ThresholdMode,
    model: Option<&DctModel>,
    cfg: &PipelineConfig,
) -> Result<Vec<ClassSlideMetrics>> {
    let per_slide: Vec<Vec<ClassSlideMetrics>> = slides
        .par_iter()
        .map(|s| {
            let decisions = decide_thresholds(mode, model, &s.set, Some((&s.gts, &s.ignore)), cfg)?;
            let finished = finish_cascade(s.set.clone(), thresholds_by_class(&decisions), cfg);
            evaluate_slide(&finished, &s.gts, &s.ignore, cfg)
        })
        .collect::<Result<_>>()?;
    Ok(per_slide.into_iter().flatten().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1Row {
    pub mode: ThresholdMode,
    /// Per split, mF1 per class in [`InstanceClass::ALL`] order.
    pub cells: Vec<[Option<f64>; 3]>,
}

/// mF1 per class for each threshold mode and split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1 {
    pub format_version: u32,
    pub splits: Vec<String>,
    pub rows: Vec<Table1Row>,
}

impl Table1 {
    pub fn row(&self, mode: &ThresholdMode) -> Option<&Table1Row> {
        self.rows.iter().find(|r| &r.mode == mode)
    }

    /// True when the optimistic row is at least every other row in every
    /// column where both are defined.
    pub fn optimistic_dominates(&self) -> bool {
        let Some(opt) = self.row(&ThresholdMode::Optimistic) else {
            return false;
        };
        self.rows.iter().all(|r| {
            r.cells.iter().zip(&opt.cells).all(|(row, o)| {
                row.iter().zip(o).all(|(v, ov)| match (v, ov) {
                    (Some(v), Some(ov)) => ov >= v,
                    _ => true,
                })
            })
        })
    }

    pub fn render_markdown(&self) -> String {
        let mut s = String::from("| Confidence Thresholds |");
        for split in &self.splits {
            for c in InstanceClass::ALL {
                let _ = write!(s, " {split} {c} |");
            }
        }
        s.push_str("\n|---|");
        s.push_str(&"---:|".repeat(3 * self.splits.len()));
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "| {} |", r.mode.label());
            for split in &r.cells {
                for v in split {
                    let _ = write!(s, " {} |", cell(*v));
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Runs every static threshold of `cfg`, the dynamic model and the
/// optimistic oracle over each split.
pub fn table1_harness(
    splits: &[(String, Vec<EvalSlide>)],
    model: Option<&DctModel>,
    cfg: &PipelineConfig,
) -> Result<Table1> {
    let mut modes: Vec<ThresholdMode> = cfg.static_thresholds.iter().map(|&t| ThresholdMode::Static(t)).collect();
    modes.push(ThresholdMode::Dynamic);
    modes.push(ThresholdMode::Optimistic);
    let mut rows = Vec::with_capacity(modes.len());
    for mode in modes {
        let mut cells = Vec::with_capacity(splits.len());
        for (_, slides) in splits {
            let metrics = evaluate_mode(slides, &mode, model, cfg)?;
            let mut row = [None; 3];
            for c in InstanceClass::ALL {
                row[c.index()] = class_means(&metrics, c).mf1;
            }
            cells.push(row);
        }
        rows.push(Table1Row { mode, cells });
    }
    Ok(Table1 {
        format_version: FORMAT_VERSION,
        splits: splits.iter().map(|(n, _)| n.clone()).collect(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::RleMask;
    use proptest::prelude::*;

    fn rect(x: u32, y: u32, w: u32, h: u32) -> PlacedMask {
        PlacedMask::in_slide(RleMask::full(w, h).unwrap(), x, y)
    }

    fn preds<'a>(v: &'a [(&'a str, f64, PlacedMask)]) -> Vec<PredRef<'a>> {
        v.iter()
            .map(|(id, c, m)| PredRef {
                id,
                confidence: *c,
                mask: m,
            })
            .collect()
    }

    fn gts<'a>(v: &'a [(&'a str, PlacedMask)]) -> Vec<GtRef<'a>> {
        v.iter().map(|(id, m)| GtRef { id, mask: m }).collect()
    }

    #[test]
    fn exact_prediction_is_a_perfect_match() {
        let p = [("p", 0.9, rect(0, 0, 10, 10))];
        let g = [("g", rect(0, 0, 10, 10))];
        let m = match_instances("s", InstanceClass::Glomerulus, &preds(&p), &gts(&g), 0.5).unwrap();
        assert_eq!(m.pairs.len(), 1);
        assert_eq!(m.pairs[0].iou, 1.0);
    }

    #[test]
    fn more_confident_prediction_claims_the_shared_gt() {
        // Sub-rectangles of G1: IoU equals the covered fraction.
        let g1 = rect(0, 0, 10, 10);
        let a = rect(0, 0, 10, 6);
        let b = rect(0, 2, 10, 7);
        assert_eq!(iou(&a, &g1).unwrap(), 0.6);
        assert_eq!(iou(&b, &g1).unwrap(), 0.7);
        let p = [("A", 0.9, a), ("B", 0.8, b)];
        let g = [("G1", g1)];
        let m = match_instances("s", InstanceClass::Glomerulus, &preds(&p), &gts(&g), 0.5).unwrap();
        assert_eq!(m.tp(), 1);
        assert_eq!(m.fp(), 1);
        assert_eq!(m.pairs[0].candidate_id, "A");
        assert_eq!(m.unmatched_preds, vec!["B".to_string()]);
    }

    #[test]
    fn below_match_iou_is_fp_and_fn() {
        let p = [("p", 0.9, rect(0, 0, 10, 10))];
        let g = [("g", rect(6, 0, 10, 10))];
        let m = match_instances("s", InstanceClass::Artery, &preds(&p), &gts(&g), 0.5).unwrap();
        assert_eq!((m.tp(), m.fp(), m.fn_count()), (0, 1, 1));
    }

    #[test]
    fn count_arithmetic() {
        let p = [("a", 0.9, rect(0, 0, 10, 10)), ("b", 0.8, rect(100, 100, 5, 5))];
        let g = [("g1", rect(0, 0, 10, 10)), ("g2", rect(50, 50, 10, 10))];
        let (pr, gt) = (preds(&p), gts(&g));
        let m = match_instances("s", InstanceClass::Glomerulus, &pr, &gt, 0.5).unwrap();
        let s = slide_metrics(&m, &PixelBox::new(0, 0, 200, 200), &pr, &gt, &PixelSet::default());
        assert_eq!((s.precision, s.recall, s.f1), (0.5, 0.5, 0.5));
        assert_eq!(s.fp_pixels, 25);
        assert_eq!(s.tn_pixels, 40_000 - 100 - 100 - 25);
    }

    #[test]
    fn perfect_predictions_score_one() {
        let p = [("a", 0.9, rect(0, 0, 10, 10)), ("b", 0.8, rect(20, 20, 6, 6))];
        let g = [("g1", rect(0, 0, 10, 10)), ("g2", rect(20, 20, 6, 6))];
        let (pr, gt) = (preds(&p), gts(&g));
        let m = match_instances("s", InstanceClass::Glomerulus, &pr, &gt, 0.5).unwrap();
        let s = slide_metrics(&m, &PixelBox::new(0, 0, 100, 100), &pr, &gt, &PixelSet::default());
        assert_eq!(
            (s.precision, s.recall, s.f1, s.specificity, s.iou_mean),
            (1.0, 1.0, 1.0, 1.0, 1.0)
        );
    }

    #[test]
    fn sparse_errors_on_large_slide_keep_specificity_high() {
        // 30 instances of ~40x40 with a 4-px shift on a 16k x 16k slide.
        let p: Vec<(String, f64, PlacedMask)> = (0..30)
            .map(|i| (format!("p{i}"), 0.9, rect(100 + 400 * i, 500, 40, 40)))
            .collect();
        let g: Vec<(String, PlacedMask)> = (0..30)
            .map(|i| (format!("g{i}"), rect(104 + 400 * i, 500, 40, 40)))
            .collect();
        let pr: Vec<PredRef> = p
            .iter()
            .map(|(id, c, m)| PredRef {
                id,
                confidence: *c,
                mask: m,
            })
            .collect();
        let gt: Vec<GtRef> = g.iter().map(|(id, m)| GtRef { id, mask: m }).collect();
        let m = match_instances("s", InstanceClass::Glomerulus, &pr, &gt, 0.5).unwrap();
        let s = slide_metrics(&m, &PixelBox::new(0, 0, 16384, 16384), &pr, &gt, &PixelSet::default());
        assert!(s.specificity > 0.99 && s.specificity < 1.0);
    }

    fn metric_row(slide: &str, f1: f64) -> ClassSlideMetrics {
        ClassSlideMetrics {
            slide_id: slide.into(),
            class: InstanceClass::Glomerulus,
            included: true,
            n_candidates: 1,
            tp: 1,
            fp: 0,
            fn_: 0,
            iou_mean: 0.9,
            precision: f1,
            recall: f1,
            f1,
            specificity: 0.99,
            tn_pixels: 0,
            fp_pixels: 0,
        }
    }

    #[test]
    fn aggregate_means() {
        let cfg = PipelineConfig::default();
        let one = aggregate_report(vec![metric_row("a", 0.8)], "static:0.5", &cfg).unwrap();
        assert_eq!(one.means[0].mf1, Some(0.8));
        assert_eq!(one.means[1].mf1, None);
        let two = aggregate_report(vec![metric_row("b", 0.9), metric_row("a", 0.8)], "x", &cfg).unwrap();
        assert!((two.means[0].mf1.unwrap() - 0.85).abs() < 1e-12);
        assert_eq!(two.slides[0].slide_id, "a");
        assert!(matches!(aggregate_report(vec![], "x", &cfg), Err(Error::Report(_))));
    }

    #[test]
    fn table2_has_class_rows_and_split_metric_columns() {
        let cfg = PipelineConfig::default();
        let r = aggregate_report(vec![metric_row("a", 0.8)], "x", &cfg).unwrap();
        let md = render_table2(&[("Validation", &r), ("Test", &r)]);
        let lines: Vec<&str> = md.lines().collect();
        assert_eq!(lines.len(), 2 + 3);
        assert_eq!(lines[0].matches('|').count(), 1 + 1 + 10);
        assert!(lines[2].starts_with("| Glomerulus | 0.900 | 0.800"));
    }

    #[test]
    fn csv_long_form() {
        let cfg = PipelineConfig::default();
        let r = aggregate_report(vec![metric_row("a", 0.8)], "x", &cfg).unwrap();
        let mut buf = Vec::new();
        write_metrics_csv(&r, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("slide,class,metric,value\n"));
        assert!(text.contains("a,Glomerulus,f1,0.8\n"));
        assert!(text.contains("mean,Glomerulus,mF1,0.8\n"));
    }

    #[test]
    fn pr_curve_examples() {
        let g1 = rect(0, 0, 10, 10);
        let p = [("a", 0.9, g1.clone())];
        let g = [("g", g1)];
        let c = pr_curve("s", InstanceClass::Glomerulus, &preds(&p), &gts(&g), 0.5).unwrap();
        assert_eq!(c.points.len(), 1);
        assert_eq!((c.points[0].recall, c.points[0].precision), (1.0, 1.0));

        let p = [("a", 0.9, rect(50, 50, 5, 5)), ("b", 0.3, rect(80, 80, 5, 5))];
        let c = pr_curve("s", InstanceClass::Glomerulus, &preds(&p), &gts(&g), 0.5).unwrap();
        assert!(c.points.iter().all(|p| p.precision == 0.0));

        let c = pr_curve("s", InstanceClass::Glomerulus, &preds(&p), &[], 0.5).unwrap();
        assert!(c.empty);
    }

    #[test]
    fn three_prediction_sweep_table() {
        let g = [
            ("g1", rect(0, 0, 10, 10)),
            ("g2", rect(20, 0, 10, 10)),
            ("g3", rect(40, 0, 10, 10)),
        ];
        let p = [
            ("a", 0.9, rect(0, 0, 10, 10)),
            ("b", 0.6, rect(70, 0, 10, 10)),
            ("c", 0.4, rect(20, 0, 10, 10)),
        ];
        let c = pr_curve("s", InstanceClass::Glomerulus, &preds(&p), &gts(&g), 0.5).unwrap();
        let pts: Vec<(f64, f64)> = c.points.iter().map(|p| (p.recall, p.precision)).collect();
        assert_eq!(pts, vec![(1.0 / 3.0, 1.0), (1.0 / 3.0, 0.5), (2.0 / 3.0, 2.0 / 3.0)]);
        let f1: Vec<f64> = pts.iter().map(|(r, p)| 2.0 * p * r / (p + r)).collect();
        assert!((f1[0] - 0.5).abs() < 1e-12 && (f1[1] - 0.4).abs() < 1e-12 && (f1[2] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn aggregate_curve_interpolates_on_grid() {
        let a = PrCurve {
            slide_id: "a".into(),
            class: InstanceClass::Artery,
            points: vec![
                PrPoint {
                    recall: 0.5,
                    precision: 1.0,
                    threshold: Some(0.9),
                },
                PrPoint {
                    recall: 1.0,
                    precision: 0.5,
                    threshold: Some(0.1),
                },
            ],
            empty: false,
        };
        let b = PrCurve {
            slide_id: "b".into(),
            points: vec![PrPoint {
                recall: 1.0,
                precision: 1.0,
                threshold: Some(0.5),
            }],
            ..a.clone()
        };
        let agg = aggregate_pr_curves(InstanceClass::Artery, &[a, b]);
        assert_eq!(agg.points.len(), 101);
        assert_eq!(agg.points[0].precision, 1.0);
        assert_eq!(agg.points[50].precision, 1.0);
        assert_eq!(agg.points[51].precision, 0.75);
        assert_eq!(agg.points[100].precision, 0.75);
        let svg = render_pr_svg(&[agg]);
        assert!(svg.starts_with("<svg") && svg.contains("stroke-dasharray"));
    }

    #[test]
    fn ignore_region_drops_mostly_covered_instances() {
        let f = IgnoreFilter::new(&[rect(0, 0, 10, 10)], 0.5);
        assert!(!f.keeps(&rect(0, 0, 10, 6)));
        assert!(f.keeps(&rect(5, 0, 10, 10)));
        assert!(f.keeps(&rect(50, 50, 3, 3)));
    }

    /// Random post-merge-like instance: disjoint gts, predictions perturbed
    /// from gts or placed at random, pairwise IoU at most 0.5.
    fn arb_instance() -> impl Strategy<Value = (Vec<(u32, u32, u32, u32, f64)>, Vec<(u32, u32, u32, u32)>)> {
        (
            prop::collection::vec((0u32..6, 0u32..6, 4u32..9, 4u32..9), 0..6),
            prop::collection::vec((0usize..8, -3i32..4, -3i32..4, 0u32..3, 0u32..100), 0..9),
        )
            .prop_map(|(g, p)| {
                // gts live in disjoint 12x12 cells along a row
                let gts: Vec<(u32, u32, u32, u32)> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &(x, y, w, h))| (i as u32 * 16 + x.min(12 - w), y.min(12 - h), w, h))
                    .collect();
                let mut preds: Vec<(u32, u32, u32, u32, f64)> = Vec::new();
                for (k, &(src, dx, dy, grow, conf)) in p.iter().enumerate() {
                    let base = if gts.is_empty() { (4u32 + 16 * k as u32, 4, 5, 5) } else { gts[src % gts.len()] };
                    let x = (base.0 as i32 + dx).max(0) as u32;
                    let y = (base.1 as i32 + dy).max(0) as u32;
                    preds.push((x, y, base.2 + grow, base.3 + grow, conf as f64 / 100.0));
                }
                (preds, gts)
            })
    }

    fn to_masks(
        inst: &(Vec<(u32, u32, u32, u32, f64)>, Vec<(u32, u32, u32, u32)>),
    ) -> (Vec<(String, f64, PlacedMask)>, Vec<(String, PlacedMask)>) {
        let mut p: Vec<(String, f64, PlacedMask)> = Vec::new();
        for (i, &(x, y, w, h, c)) in inst.0.iter().enumerate() {
            let m = rect(x, y, w, h);
            if p.iter().all(|(_, _, q)| iou(q, &m).unwrap() <= 0.5) {
                p.push((format!("p{i}"), c, m));
            }
        }
        let g = inst
            .1
            .iter()
            .enumerate()
            .map(|(i, &(x, y, w, h))| (format!("g{i}"), rect(x, y, w, h)))
            .collect();
        (p, g)
    }

    /// Best one-to-one assignment by TP count, then total IoU.
    pub(crate) fn optimal_matching(ious: &[Vec<f64>], cut: f64) -> (usize, f64) {
        fn go(i: usize, ious: &[Vec<f64>], used: &mut Vec<bool>, cut: f64) -> (usize, f64) {
            if i == ious.len() {
                return (0, 0.0);
            }
            let mut best = go(i + 1, ious, used, cut);
            for j in 0..used.len() {
                if !used[j] && ious[i][j] >= cut && ious[i][j] > 0.0 {
                    used[j] = true;
                    let (n, s) = go(i + 1, ious, used, cut);
                    used[j] = false;
                    let cand = (n + 1, s + ious[i][j]);
                    if cand.0 > best.0 || (cand.0 == best.0 && cand.1 > best.1 + 1e-12) {
                        best = cand;
                    }
                }
            }
            best
        }
        let n_gt = ious.first().map_or(0, |r| r.len());
        go(0, ious, &mut vec![false; n_gt], cut)
    }

    proptest! {
        #[test]
        fn matching_is_one_to_one_and_order_free(inst in arb_instance(), seed in any::<u64>()) {
            let (p, g) = to_masks(&inst);
            let (pr, gt) = (preds_owned(&p), gts_owned(&g));
            let a = match_instances("s", InstanceClass::Glomerulus, &pr, &gt, 0.5).unwrap();
            let mut pr2 = pr.clone();
            let mut gt2 = gt.clone();
            let n = pr2.len().max(1);
            pr2.rotate_left((seed as usize) % n);
            pr2.reverse();
            let m = gt2.len().max(1);
            gt2.rotate_left((seed as usize / 7) % m);
            let b = match_instances("s", InstanceClass::Glomerulus, &pr2, &gt2, 0.5).unwrap();
            prop_assert_eq!(&a, &b);
            let mut seen: Vec<&String> = a.pairs.iter().map(|p| &p.gt_id).collect();
            seen.sort();
            seen.dedup();
            prop_assert_eq!(seen.len(), a.pairs.len());
            prop_assert!(a.pairs.iter().all(|p| p.iou >= 0.5));
        }

        #[test]
        fn count_identities_hold(inst in arb_instance()) {
            let (p, g) = to_masks(&inst);
            let (pr, gt) = (preds_owned(&p), gts_owned(&g));
            let m = match_instances("s", InstanceClass::Glomerulus, &pr, &gt, 0.5).unwrap();
            let s = slide_metrics(&m, &PixelBox::new(0, 0, 128, 32), &pr, &gt, &PixelSet::default());
            if s.tp + s.fp > 0 {
                prop_assert!((s.precision * (s.tp + s.fp) as f64 - s.tp as f64).abs() < 1e-12);
            }
            if s.tp + s.fn_ > 0 {
                prop_assert!((s.recall * (s.tp + s.fn_) as f64 - s.tp as f64).abs() < 1e-12);
            }
            if s.precision + s.recall > 0.0 {
                let f = 2.0 * s.precision * s.recall / (s.precision + s.recall);
                prop_assert!((s.f1 - f).abs() < 1e-12);
            }
            for v in [s.precision, s.recall, s.f1, s.specificity, s.iou_mean] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn greedy_agrees_with_optimal_on_small_instances(inst in arb_instance()) {
            let (p, g) = to_masks(&inst);
            let (pr, gt) = (preds_owned(&p), gts_owned(&g));
            let m = match_instances("s", InstanceClass::Glomerulus, &pr, &gt, 0.5).unwrap();
            let ious: Vec<Vec<f64>> = pr.iter().map(|a| gt.iter().map(|b| iou(a.mask, b.mask).unwrap()).collect()).collect();
            let (n, _) = optimal_matching(&ious, 0.5);
            prop_assert_eq!(n, m.tp());
        }

        #[test]
        fn pr_recall_is_monotone(inst in arb_instance()) {
            let (p, g) = to_masks(&inst);
            let (pr, gt) = (preds_owned(&p), gts_owned(&g));
            let c = pr_curve("s", InstanceClass::Glomerulus, &pr, &gt, 0.5).unwrap();
            prop_assert!(c.points.windows(2).all(|w| w[1].recall >= w[0].recall));
        }
    }

    fn preds_owned(v: &[(String, f64, PlacedMask)]) -> Vec<PredRef<'_>> {
        v.iter()
            .map(|(id, c, m)| PredRef {
                id,
                confidence: *c,
                mask: m,
            })
            .collect()
    }

    fn gts_owned(v: &[(String, PlacedMask)]) -> Vec<GtRef<'_>> {
        v.iter().map(|(id, m)| GtRef { id, mask: m }).collect()
    }
}
