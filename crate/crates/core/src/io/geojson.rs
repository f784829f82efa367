//! QuPath-style GeoJSON annotations.
//!
//! Polygons are rasterized once, at load, with the even-odd rule over all
//! rings of a feature and pixel-centre sampling: pixel `(x, y)` is inside
//! when the point `(x + 0.5, y + 0.5)` is. Exported outlines follow pixel
//! cracks (integer vertices), so loading an export reproduces the mask
//! exactly.

use std::collections::HashMap;
use std::path::Path;

use serde_json::{json, Map, Value};

use crate::config::{InstanceClass, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::mask::{PlacedMask, RleMask, Span};
use crate::merge::SlideInstanceSet;
use crate::tiling::GroundTruthInstance;

/// Every class name an annotation file may carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AnnotationClass {
    Instance(InstanceClass),
    Cortex,
    Medulla,
    CapsuleOther,
    Ignore,
}

impl AnnotationClass {
    pub fn name(self) -> &'static str {
        match self {
            AnnotationClass::Instance(c) => c.name(),
            AnnotationClass::Cortex => "Cortex",
            AnnotationClass::Medulla => "Medulla",
            AnnotationClass::CapsuleOther => "Capsule/Other",
            AnnotationClass::Ignore => "Ignore",
        }
    }

    /// Parses a classification name; `index` is reported on failure.
    pub fn parse(name: &str, index: usize) -> Result<Self> {
        Ok(match name {
            "Cortex" => AnnotationClass::Cortex,
            "Medulla" => AnnotationClass::Medulla,
            "Capsule/Other" => AnnotationClass::CapsuleOther,
            "Ignore" => AnnotationClass::Ignore,
            other => AnnotationClass::Instance(other.parse().map_err(|_| Error::Vocabulary {
                name: other.to_string(),
                index,
            })?),
        })
    }

    fn color(self) -> [u8; 3] {
        match self {
            AnnotationClass::Instance(InstanceClass::Glomerulus) => [0, 200, 0],
            AnnotationClass::Instance(InstanceClass::Arteriole) => [255, 200, 0],
            AnnotationClass::Instance(InstanceClass::Artery) => [220, 0, 0],
            AnnotationClass::Cortex => [120, 80, 200],
            AnnotationClass::Medulla => [60, 140, 220],
            AnnotationClass::CapsuleOther => [160, 120, 80],
            AnnotationClass::Ignore => [160, 160, 160],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationFeature {
    pub id: String,
    pub class: AnnotationClass,
    /// Slide (working-frame) mask.
    pub mask: PlacedMask,
    pub confidence: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Annotations {
    pub features: Vec<AnnotationFeature>,
    /// Top-level provenance block, carried through re-export untouched.
    pub meta: Option<Value>,
    pub warnings: Vec<String>,
}

impl Annotations {
    pub fn gts(&self) -> Vec<GroundTruthInstance> {
        self.features
            .iter()
            .filter_map(|f| match f.class {
                AnnotationClass::Instance(class) => Some(GroundTruthInstance {
                    gt_id: f.id.clone(),
                    class,
                    mask: f.mask.clone(),
                    parent_id: None,
                }),
                _ => None,
            })
            .collect()
    }

    pub fn ignore(&self) -> Vec<PlacedMask> {
        self.of(AnnotationClass::Ignore)
    }

    /// Cortex, Medulla and Capsule/Other regions.
    pub fn tissue(&self) -> Vec<(AnnotationClass, PlacedMask)> {
        self.features
            .iter()
            .filter(|f| {
                matches!(
                    f.class,
                    AnnotationClass::Cortex | AnnotationClass::Medulla | AnnotationClass::CapsuleOther
                )
            })
            .map(|f| (f.class, f.mask.clone()))
            .collect()
    }

    fn of(&self, class: AnnotationClass) -> Vec<PlacedMask> {
        self.features
            .iter()
            .filter(|f| f.class == class)
            .map(|f| f.mask.clone())
            .collect()
    }
}

type Ring = Vec<[f64; 2]>;

fn geometry_err(index: usize, msg: impl std::fmt::Display) -> Error {
    Error::Geometry(format!("feature {index}: {msg}"))
}

fn parse_ring(v: &Value, index: usize) -> Result<Ring> {
    let pts = v
        .as_array()
        .ok_or_else(|| geometry_err(index, "ring is not an array"))?;
    let ring: Ring = pts
        .iter()
        .map(|p| match p.as_array().map(|a| a.as_slice()) {
            Some([x, y, ..]) => match (x.as_f64(), y.as_f64()) {
                (Some(x), Some(y)) if x.is_finite() && y.is_finite() => Ok([x, y]),
                _ => Err(geometry_err(index, "non-numeric coordinate")),
            },
            _ => Err(geometry_err(index, "position needs two coordinates")),
        })
        .collect::<Result<_>>()?;
    if ring.len() < 4 || ring.first() != ring.last() {
        return Err(geometry_err(index, "unclosed ring"));
    }
    Ok(ring)
}

fn parse_rings(geometry: &Value, index: usize) -> Result<Vec<Ring>> {
    let kind = geometry.get("type").and_then(Value::as_str).unwrap_or("");
    let coords = geometry
        .get("coordinates")
        .and_then(Value::as_array)
        .ok_or_else(|| geometry_err(index, "missing coordinates"))?;
    match kind {
        "Polygon" => coords.iter().map(|r| parse_ring(r, index)).collect(),
        "MultiPolygon" => {
            let mut rings = Vec::new();
            for poly in coords {
                let poly = poly
                    .as_array()
                    .ok_or_else(|| geometry_err(index, "polygon is not an array"))?;
                for r in poly {
                    rings.push(parse_ring(r, index)?);
                }
            }
            Ok(rings)
        }
        other => Err(geometry_err(index, format!("unsupported geometry type {other:?}"))),
    }
}

/// Even-odd, pixel-centre raster of `rings` in slide coordinates. `None`
/// when no pixel centre falls inside. Negative coordinates are clipped.
pub fn rasterize_rings(rings: &[Ring]) -> Option<PlacedMask> {
    let pts = rings.iter().flatten();
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for p in pts {
        x0 = x0.min(p[0]);
        y0 = y0.min(p[1]);
        x1 = x1.max(p[0]);
        y1 = y1.max(p[1]);
    }
    if x1 <= 0.0 || y1 <= 0.0 || x0 > x1 {
        return None;
    }
    let bx = x0.max(0.0).floor() as u32;
    let by = y0.max(0.0).floor() as u32;
    let w = (x1.ceil() as u32).saturating_sub(bx).max(1);
    let h = (y1.ceil() as u32).saturating_sub(by).max(1);
    let mut spans = Vec::new();
    let mut ys = Vec::new();
    for i in 0..w {
        let cx = (bx + i) as f64 + 0.5;
        ys.clear();
        for ring in rings {
            for e in ring.windows(2) {
                let ([ax, ay], [bx_, by_]) = (e[0], e[1]);
                if (ax <= cx) != (bx_ <= cx) {
                    ys.push(ay + (cx - ax) * (by_ - ay) / (bx_ - ax));
                }
            }
        }
        ys.sort_by(f64::total_cmp);
        for pair in ys.chunks_exact(2) {
            // rows whose centre lies in [pair[0], pair[1])
            let lo = ((pair[0] - 0.5).ceil() - by as f64).clamp(0.0, h as f64) as u32;
            let hi = ((pair[1] - 0.5).ceil() - by as f64).clamp(0.0, h as f64) as u32;
            if hi > lo {
                spans.push(Span { col: i, y0: lo, y1: hi });
            }
        }
    }
    if spans.is_empty() {
        return None;
    }
    let rle = RleMask::from_spans(w, h, spans).ok()?;
    Some(PlacedMask::in_slide(rle, bx, by).tight())
}

fn parse_feature(f: &Value, index: usize) -> Result<Option<AnnotationFeature>> {
    let props = f.get("properties").cloned().unwrap_or(Value::Null);
    let name = props
        .get("classification")
        .and_then(|c| c.get("name"))
        .and_then(Value::as_str)
        .unwrap_or("");
    let class = AnnotationClass::parse(name, index)?;
    let geometry = f
        .get("geometry")
        .filter(|g| !g.is_null())
        .ok_or_else(|| geometry_err(index, "missing geometry"))?;
    let rings = parse_rings(geometry, index)?;
    let Some(mask) = rasterize_rings(&rings) else {
        return Ok(None);
    };
    let id = props
        .get("candidate_id")
        .and_then(Value::as_str)
        .or_else(|| f.get("id").and_then(Value::as_str))
        .or_else(|| props.get("name").and_then(Value::as_str))
        .map(str::to_string)
        .unwrap_or_else(|| format!("feature-{index}"));
    let confidence = props.get("confidence").and_then(Value::as_f64);
    Ok(Some(AnnotationFeature {
        id,
        class,
        mask,
        confidence,
    }))
}

/// Parses a FeatureCollection (or a bare array of features).
pub fn parse_annotations(text: &str) -> Result<Annotations> {
    let root: Value = serde_json::from_str(text)?;
    let (features, meta) = match &root {
        Value::Array(a) => (a.as_slice(), None),
        Value::Object(o) => {
            let feats = o
                .get("features")
                .and_then(Value::as_array)
                .ok_or_else(|| Error::Format("GeoJSON root has no features array".into()))?;
            (feats.as_slice(), o.get("wsiseg").cloned())
        }
        _ => return Err(Error::Format("GeoJSON root must be an object".into())),
    };
    let mut out = Annotations {
        meta,
        ..Default::default()
    };
    for (index, f) in features.iter().enumerate() {
        match parse_feature(f, index)? {
            Some(feat) => out.features.push(feat),
            None => out
                .warnings
                .push(format!("feature {index} covers no pixel centre and was skipped")),
        }
    }
    Ok(out)
}

pub fn load_annotations(path: &Path) -> Result<Annotations> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text)
}

/// 4-connected component labels of a bitmap (0 = background).
fn label_components(w: u32, h: u32, fg: &dyn Fn(u32, u32) -> bool) -> Vec<u32> {
    let mut labels = vec![0u32; w as usize * h as usize];
    let mut next = 0;
    let mut stack = Vec::new();
    for y0 in 0..h {
        for x0 in 0..w {
            let k = (y0 * w + x0) as usize;
            if labels[k] != 0 || !fg(x0, y0) {
                continue;
            }
            next += 1;
            labels[k] = next;
            stack.push((x0, y0));
            while let Some((x, y)) = stack.pop() {
                let nbrs = [
                    (x.wrapping_sub(1), y),
                    (x + 1, y),
                    (x, y.wrapping_sub(1)),
                    (x, y + 1),
                ];
                for (nx, ny) in nbrs {
                    if nx < w && ny < h {
                        let nk = (ny * w + nx) as usize;
                        if labels[nk] == 0 && fg(nx, ny) {
                            labels[nk] = next;
                            stack.push((nx, ny));
                        }
                    }
                }
            }
        }
    }
    labels
}

/// Crack-following outlines of a mask, grouped as polygons of
/// `[exterior, holes...]`. Vertices are slide coordinates; rings are
/// closed and free of collinear points. Exteriors run clockwise on screen.
pub fn trace_polygons(m: &PlacedMask) -> Vec<Vec<Vec<[u32; 2]>>> {
    let bm = m.rle.decode();
    let (w, h) = (bm.width(), bm.height());
    let fg = |x: i64, y: i64| x >= 0 && y >= 0 && (x as u32) < w && (y as u32) < h && bm.get(x as u32, y as u32);
    let labels = label_components(w, h, &|x, y| bm.get(x, y));

    // Directed crack edges with the foreground on the right (y down).
    struct Edge {
        from: (i64, i64),
        dir: (i64, i64),
        label: u32,
    }
    let mut edges = Vec::new();
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if !fg(x, y) {
                continue;
            }
            let label = labels[(y as u32 * w + x as u32) as usize];
            if !fg(x, y - 1) {
                edges.push(Edge { from: (x, y), dir: (1, 0), label });
            }
            if !fg(x + 1, y) {
                edges.push(Edge { from: (x + 1, y), dir: (0, 1), label });
            }
            if !fg(x, y + 1) {
                edges.push(Edge { from: (x + 1, y + 1), dir: (-1, 0), label });
            }
            if !fg(x - 1, y) {
                edges.push(Edge { from: (x, y + 1), dir: (0, -1), label });
            }
        }
    }
    let mut by_start: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (i, e) in edges.iter().enumerate() {
        by_start.entry(e.from).or_default().push(i);
    }
    let mut used = vec![false; edges.len()];
    // Rings per component label: (signed area, points).
    let mut rings: Vec<(u32, i64, Vec<[u32; 2]>)> = Vec::new();
    for start in 0..edges.len() {
        if used[start] {
            continue;
        }
        let label = edges[start].label;
        let mut pts: Vec<(i64, i64)> = Vec::new();
        let mut cur = start;
        loop {
            used[cur] = true;
            let e = &edges[cur];
            pts.push(e.from);
            let at = (e.from.0 + e.dir.0, e.from.1 + e.dir.1);
            let cands = &by_start[&at];
            // Prefer turning clockwise on screen, keeping diagonal
            // neighbours in separate outlines.
            let (dx, dy) = e.dir;
            let prefs = [(-dy, dx), (dx, dy), (dy, -dx)];
            let next = prefs
                .iter()
                .find_map(|d| cands.iter().copied().find(|&c| edges[c].dir == *d && !used[c]))
                .or_else(|| cands.iter().copied().find(|&c| c == start));
            match next {
                Some(n) if n == start => break,
                Some(n) => cur = n,
                None => break,
            }
        }
        // Drop collinear vertices.
        let n = pts.len();
        let simplified: Vec<(i64, i64)> = (0..n)
            .filter(|&i| {
                let p = pts[(i + n - 1) % n];
                let c = pts[i];
                let q = pts[(i + 1) % n];
                (c.0 - p.0) * (q.1 - c.1) - (c.1 - p.1) * (q.0 - c.0) != 0
            })
            .map(|i| pts[i])
            .collect();
        let area2: i64 = (0..simplified.len())
            .map(|i| {
                let a = simplified[i];
                let b = simplified[(i + 1) % simplified.len()];
                a.0 * b.1 - b.0 * a.1
            })
            .sum();
        let [ox, oy] = m.origin;
        let mut ring: Vec<[u32; 2]> = simplified
            .iter()
            .map(|&(x, y)| [ox + x as u32, oy + y as u32])
            .collect();
        ring.push(ring[0]);
        rings.push((label, area2, ring));
    }
    let mut polys: Vec<(u32, Vec<Vec<[u32; 2]>>)> = Vec::new();
    for (label, area2, ring) in rings.iter().filter(|r| r.1 > 0) {
        let _ = area2;
        polys.push((*label, vec![ring.clone()]));
    }
    for (label, _, ring) in rings.iter().filter(|r| r.1 < 0) {
        if let Some(p) = polys.iter_mut().find(|p| p.0 == *label) {
            p.1.push(ring.clone());
        }
    }
    polys.into_iter().map(|(_, p)| p).collect()
}

fn geometry_json(m: &PlacedMask) -> Value {
    let polys = trace_polygons(m);
    if polys.len() == 1 {
        json!({"type": "Polygon", "coordinates": polys[0]})
    } else {
        json!({"type": "MultiPolygon", "coordinates": polys})
    }
}

fn feature_json(f: &AnnotationFeature) -> Value {
    let mut props = Map::new();
    props.insert("objectType".into(), json!("annotation"));
    props.insert(
        "classification".into(),
        json!({"name": f.class.name(), "color": f.class.color()}),
    );
    if let Some(c) = f.confidence {
        props.insert("confidence".into(), json!(c));
    }
    props.insert("candidate_id".into(), json!(f.id));
    json!({
        "type": "Feature",
        "id": f.id,
        "geometry": geometry_json(&f.mask),
        "properties": props,
    })
}

/// Serializes features as a FeatureCollection. `meta` lands in a top-level
/// `wsiseg` member next to the format version.
pub fn render_geojson(features: &[AnnotationFeature], meta: Option<&Value>) -> String {
    let mut root = Map::new();
    root.insert("type".into(), json!("FeatureCollection"));
    let mut block = match meta {
        Some(Value::Object(o)) => o.clone(),
        Some(other) => {
            let mut o = Map::new();
            o.insert("meta".into(), other.clone());
            o
        }
        None => Map::new(),
    };
    block.insert("format_version".into(), json!(FORMAT_VERSION));
    root.insert("wsiseg".into(), Value::Object(block));
    root.insert("features".into(), features.iter().map(feature_json).collect());
    let mut s = serde_json::to_string(&Value::Object(root)).expect("plain JSON values");
    s.push('\n');
    s
}

/// Active candidates of a finished set as features carrying class,
/// confidence and candidate id.
pub fn set_features(set: &SlideInstanceSet) -> Vec<AnnotationFeature> {
    set.active()
        .map(|c| AnnotationFeature {
            id: c.candidate_id.clone(),
            class: AnnotationClass::Instance(c.class),
            mask: c.mask.clone(),
            confidence: Some(c.confidence),
        })
        .collect()
}

pub fn export_geojson(set: &SlideInstanceSet, meta: Option<&Value>) -> String {
    let mut block = match meta {
        Some(Value::Object(o)) => o.clone(),
        _ => Map::new(),
    };
    block.insert("slide_id".into(), json!(set.slide_id));
    render_geojson(&set_features(set), Some(&Value::Object(block)))
}

/// Ground truth as features, for writing synthetic annotation files.
pub fn gt_features(gts: &[GroundTruthInstance]) -> Vec<AnnotationFeature> {
    gts.iter()
        .map(|g| AnnotationFeature {
            id: g.gt_id.clone(),
            class: AnnotationClass::Instance(g.class),
            mask: g.mask.clone(),
            confidence: None,
        })
        .collect()
}
