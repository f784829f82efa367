//! Run-length-encoded binary masks.
//!
//! Masks use the COCO convention: pixels are scanned in column-major order
//! (pixel `(x, y)` is at linear index `x * height + y`) and `counts` holds
//! alternating background / foreground run lengths, starting with a
//! background run that may be zero. In canonical form no other run is zero.

use std::cmp::{max, min};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense boolean grid, row-major. Used at ingest and by test oracles.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitmap {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl Bitmap {
    pub fn new(width: u32, height: u32) -> Self {
        Bitmap {
            width,
            height,
            bits: vec![false; width as usize * height as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Bitmap {
            width,
            height,
            bits,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        self.bits[y as usize * self.width as usize + x as usize] = v;
    }

    pub fn count(&self) -> u64 {
        self.bits.iter().filter(|&&b| b).count() as u64
    }
}

/// One vertical run of foreground pixels: rows `y0..y1` of column `col`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub col: u32,
    pub y0: u32,
    pub y1: u32,
}

#[derive(Clone, PartialEq, Eq, Hash, Debug)]
pub struct RleMask {
    width: u32,
    height: u32,
    counts: Vec<u32>,
}

impl RleMask {
    /// Builds a mask from raw counts, canonicalizing interior zero runs.
    pub fn from_counts(height: u32, width: u32, counts: Vec<u32>) -> Result<Self> {
        check_dims(width, height)?;
        let total: u64 = counts.iter().map(|&c| c as u64).sum();
        let expected = width as u64 * height as u64;
        if total != expected {
            return Err(Error::Format(format!(
                "rle counts sum to {total}, expected {height}x{width} = {expected}"
            )));
        }
        let mut out: Vec<u32> = Vec::with_capacity(counts.len());
        for (i, &c) in counts.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let val = i % 2;
            if out.is_empty() && val == 1 {
                out.push(0);
            }
            if out.len() % 2 == val {
                out.push(c);
            } else if let Some(last) = out.last_mut() {
                *last += c;
            }
        }
        Ok(RleMask {
            width,
            height,
            counts: out,
        })
    }

    pub fn empty(width: u32, height: u32) -> Result<Self> {
        check_dims(width, height)?;
        Ok(RleMask {
            width,
            height,
            counts: vec![width * height],
        })
    }

    pub fn full(width: u32, height: u32) -> Result<Self> {
        check_dims(width, height)?;
        Ok(RleMask {
            width,
            height,
            counts: vec![0, width * height],
        })
    }

    /// Builds a mask from column spans sorted by `(col, y0)`. Spans may touch
    /// but must not overlap.
    pub fn from_spans(width: u32, height: u32, spans: impl IntoIterator<Item = Span>) -> Result<Self> {
        check_dims(width, height)?;
        let h = height as u64;
        let total = width as u64 * h;
        let mut counts = Vec::new();
        let mut cur: Option<(u64, u64)> = None;
        let mut last_end = 0u64;
        let flush = |start: u64, end: u64, last_end: &mut u64, counts: &mut Vec<u32>| {
            counts.push((start - *last_end) as u32);
            counts.push((end - start) as u32);
            *last_end = end;
        };
        for s in spans {
            if s.col >= width || s.y1 > height || s.y0 >= s.y1 {
                if s.y0 == s.y1 && s.col < width {
                    continue;
                }
                return Err(Error::Dimension(format!(
                    "span {s:?} outside {width}x{height} mask"
                )));
            }
            let start = s.col as u64 * h + s.y0 as u64;
            let end = s.col as u64 * h + s.y1 as u64;
            match cur {
                Some((a, b)) if start == b => cur = Some((a, end)),
                Some((a, b)) if start > b => {
                    flush(a, b, &mut last_end, &mut counts);
                    cur = Some((start, end));
                }
                Some(_) => {
                    return Err(Error::Format("spans overlap or are unsorted".into()));
                }
                None => cur = Some((start, end)),
            }
        }
        if let Some((a, b)) = cur {
            flush(a, b, &mut last_end, &mut counts);
        }
        if last_end < total || counts.is_empty() {
            counts.push((total - last_end) as u32);
        }
        Ok(RleMask {
            width,
            height,
            counts,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    /// Number of foreground pixels.
    pub fn area(&self) -> u64 {
        self.counts.iter().skip(1).step_by(2).map(|&c| c as u64).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    pub fn spans(&self) -> SpanIter<'_> {
        SpanIter {
            counts: &self.counts,
            idx: 0,
            pos: 0,
            run_end: 0,
            h: self.height as u64,
        }
    }

    /// Foreground spans grouped by local column.
    pub fn column_spans(&self) -> Vec<Vec<(u32, u32)>> {
        let mut cols = vec![Vec::new(); self.width as usize];
        for s in self.spans() {
            cols[s.col as usize].push((s.y0, s.y1));
        }
        cols
    }

    pub fn decode(&self) -> Bitmap {
        let mut bm = Bitmap::new(self.width, self.height);
        for s in self.spans() {
            for y in s.y0..s.y1 {
                bm.set(s.col, y, true);
            }
        }
        bm
    }

    /// Tight bounding box of the foreground in local coordinates.
    pub fn foreground_bbox(&self) -> Option<PixelBox> {
        let mut it = self.spans();
        let first = it.next()?;
        let (x0, mut x1, mut y0, mut y1) = (first.col, first.col, first.y0, first.y1);
        for s in it {
            x1 = s.col;
            y0 = min(y0, s.y0);
            y1 = max(y1, s.y1);
        }
        Some(PixelBox::new(x0, y0, x1 - x0 + 1, y1 - y0))
    }
}

fn check_dims(width: u32, height: u32) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::Dimension(format!(
            "mask dimensions must be positive, got {width}x{height}"
        )));
    }
    if width as u64 * height as u64 > u32::MAX as u64 {
        return Err(Error::Dimension(format!(
            "mask {width}x{height} exceeds the per-mask pixel limit"
        )));
    }
    Ok(())
}

/// Iterator over the foreground spans of a mask in column-major order.
pub struct SpanIter<'a> {
    counts: &'a [u32],
    idx: usize,
    pos: u64,
    run_end: u64,
    h: u64,
}

impl Iterator for SpanIter<'_> {
    type Item = Span;

    fn next(&mut self) -> Option<Span> {
        loop {
            if self.pos < self.run_end {
                let col = self.pos / self.h;
                let y0 = self.pos - col * self.h;
                let end = min(self.run_end, (col + 1) * self.h);
                self.pos = end;
                return Some(Span {
                    col: col as u32,
                    y0: y0 as u32,
                    y1: (end - col * self.h) as u32,
                });
            }
            if self.idx + 1 >= self.counts.len() {
                return None;
            }
            self.pos += self.counts[self.idx] as u64;
            self.run_end = self.pos + self.counts[self.idx + 1] as u64;
            self.idx += 2;
        }
    }
}

#[derive(Serialize, Deserialize)]
struct RleJson {
    size: [u32; 2],
    counts: Vec<u32>,
}

impl Serialize for RleMask {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        RleJson {
            size: [self.height, self.width],
            counts: self.counts.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for RleMask {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = RleJson::deserialize(d)?;
        RleMask::from_counts(raw.size[0], raw.size[1], raw.counts).map_err(serde::de::Error::custom)
    }
}

/// Encodes a dense grid.
pub fn rle_encode(bitmap: &Bitmap) -> Result<RleMask> {
    check_dims(bitmap.width, bitmap.height)?;
    let mut counts = Vec::new();
    let mut value = false;
    let mut run = 0u32;
    for x in 0..bitmap.width {
        for y in 0..bitmap.height {
            let b = bitmap.get(x, y);
            if b != value {
                counts.push(run);
                run = 0;
                value = b;
            }
            run += 1;
        }
    }
    counts.push(run);
    RleMask::from_counts(bitmap.height, bitmap.width, counts)
}

pub fn area(m: &RleMask) -> u64 {
    m.area()
}

/// Axis-aligned pixel rectangle `[x, x + w) x [y, y + h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl PixelBox {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        PixelBox { x, y, w, h }
    }

    pub fn x1(&self) -> u32 {
        self.x + self.w
    }

    pub fn y1(&self) -> u32 {
        self.y + self.h
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn contains_box(&self, other: &PixelBox) -> bool {
        other.x >= self.x && other.y >= self.y && other.x1() <= self.x1() && other.y1() <= self.y1()
    }

    pub fn intersect(&self, other: &PixelBox) -> Option<PixelBox> {
        let x0 = max(self.x, other.x);
        let y0 = max(self.y, other.y);
        let x1 = min(self.x1(), other.x1());
        let y1 = min(self.y1(), other.y1());
        (x1 > x0 && y1 > y0).then(|| PixelBox::new(x0, y0, x1 - x0, y1 - y0))
    }

    pub fn overlaps(&self, other: &PixelBox) -> bool {
        self.intersect(other).is_some()
    }
}

/// The coordinate frame a placed mask lives in.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Frame {
    /// Slide working resolution (20x).
    #[default]
    Slide,
    /// Full-resolution frame of the named tile.
    Tile(String),
    /// Model input frame of the named tile.
    Model(String),
}

/// A mask positioned inside a larger frame.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PlacedMask {
    #[serde(default)]
    pub frame: Frame,
    pub origin: [u32; 2],
    pub rle: RleMask,
}

impl PlacedMask {
    pub fn new(rle: RleMask, x: u32, y: u32, frame: Frame) -> Self {
        PlacedMask {
            frame,
            origin: [x, y],
            rle,
        }
    }

    pub fn in_slide(rle: RleMask, x: u32, y: u32) -> Self {
        Self::new(rle, x, y, Frame::Slide)
    }

    pub fn extent(&self) -> PixelBox {
        PixelBox::new(self.origin[0], self.origin[1], self.rle.width, self.rle.height)
    }

    pub fn area(&self) -> u64 {
        self.rle.area()
    }

    /// Foreground spans in frame coordinates.
    pub fn frame_spans(&self) -> impl Iterator<Item = Span> + '_ {
        let [ox, oy] = self.origin;
        self.rle.spans().map(move |s| Span {
            col: s.col + ox,
            y0: s.y0 + oy,
            y1: s.y1 + oy,
        })
    }

    /// Foreground as sorted, disjoint intervals over the key `x << 32 | y`.
    pub(crate) fn key_intervals(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        self.frame_spans().map(|s| {
            let base = (s.col as u64) << 32;
            (base | s.y0 as u64, base | s.y1 as u64)
        })
    }

    fn check_frame(&self, other: &PlacedMask) -> Result<()> {
        if self.frame != other.frame {
            return Err(Error::Frame(format!(
                "cannot compare masks in frames {:?} and {:?}",
                self.frame, other.frame
            )));
        }
        Ok(())
    }

    pub fn intersection_area(&self, other: &PlacedMask) -> Result<u64> {
        self.check_frame(other)?;
        if !self.extent().overlaps(&other.extent()) {
            return Ok(0);
        }
        Ok(intersect_len(self.key_intervals(), other.key_intervals()))
    }

    /// Intersection with a window in the same frame; `None` when empty.
    pub fn crop(&self, window: &PixelBox) -> Option<PlacedMask> {
        let ext = self.extent().intersect(window)?;
        let spans: Vec<Span> = self
            .frame_spans()
            .filter(|s| s.col >= ext.x && s.col < ext.x1())
            .filter_map(|s| {
                let y0 = max(s.y0, ext.y);
                let y1 = min(s.y1, ext.y1());
                (y1 > y0).then(|| Span {
                    col: s.col - ext.x,
                    y0: y0 - ext.y,
                    y1: y1 - ext.y,
                })
            })
            .collect();
        if spans.is_empty() {
            return None;
        }
        let rle = RleMask::from_spans(ext.w, ext.h, spans).ok()?;
        Some(PlacedMask::new(rle, ext.x, ext.y, self.frame.clone()))
    }

    /// Shrinks the extent to the foreground bounding box. Empty masks are
    /// returned unchanged.
    pub fn tight(&self) -> PlacedMask {
        match self.rle.foreground_bbox() {
            Some(bb) if bb.w != self.rle.width || bb.h != self.rle.height => {
                let window = PixelBox::new(self.origin[0] + bb.x, self.origin[1] + bb.y, bb.w, bb.h);
                self.crop(&window).unwrap_or_else(|| self.clone())
            }
            _ => self.clone(),
        }
    }

    /// Re-expresses the mask in another frame whose origin sits at `(dx, dy)`
    /// of the current one. The mask must lie inside the new frame's quadrant.
    pub fn reframe(&self, dx: u32, dy: u32, frame: Frame) -> Result<PlacedMask> {
        let [ox, oy] = self.origin;
        if ox < dx || oy < dy {
            return Err(Error::Frame(format!(
                "mask at ({ox}, {oy}) lies before new frame origin ({dx}, {dy})"
            )));
        }
        Ok(PlacedMask::new(self.rle.clone(), ox - dx, oy - dy, frame))
    }

    /// Translates by a non-negative offset into a (larger) enclosing frame.
    pub fn shift(&self, dx: u32, dy: u32, frame: Frame) -> PlacedMask {
        PlacedMask::new(self.rle.clone(), self.origin[0] + dx, self.origin[1] + dy, frame)
    }

    /// Nearest-neighbour resampling by the exact ratio `num / den`.
    ///
    /// Destination pixel `X` samples source pixel `floor(X * den / num)`, so
    /// an integer upscale replicates each pixel `num / den` times and the
    /// matching downscale picks every `den / num`-th pixel. Returns `None`
    /// when no destination pixel samples the foreground.
    pub fn resample(&self, num: u32, den: u32, frame: Frame) -> Option<PlacedMask> {
        assert!(num > 0 && den > 0, "resample ratio must be positive");
        let to_dest = |v: u64| -> u64 { (v * num as u64).div_ceil(den as u64) };
        let ext = self.extent();
        let dx0 = to_dest(ext.x as u64);
        let dx1 = to_dest(ext.x1() as u64);
        let dy0 = to_dest(ext.y as u64);
        let dy1 = to_dest(ext.y1() as u64);
        if dx1 <= dx0 || dy1 <= dy0 {
            return None;
        }
        let cols = self.rle.column_spans();
        let mut spans = Vec::new();
        for dxg in dx0..dx1 {
            let src = (dxg * den as u64 / num as u64) - ext.x as u64;
            for &(y0, y1) in &cols[src as usize] {
                let a = to_dest((y0 + ext.y) as u64);
                let b = to_dest((y1 + ext.y) as u64);
                if b > a {
                    spans.push(Span {
                        col: (dxg - dx0) as u32,
                        y0: (a - dy0) as u32,
                        y1: (b - dy0) as u32,
                    });
                }
            }
        }
        if spans.is_empty() {
            return None;
        }
        let rle = RleMask::from_spans((dx1 - dx0) as u32, (dy1 - dy0) as u32, spans).ok()?;
        Some(PlacedMask::new(rle, dx0 as u32, dy0 as u32, frame))
    }
}

/// Length of the intersection of two sorted, disjoint interval streams.
pub(crate) fn intersect_len(
    mut a: impl Iterator<Item = (u64, u64)>,
    mut b: impl Iterator<Item = (u64, u64)>,
) -> u64 {
    let mut x = a.next();
    let mut y = b.next();
    let mut n = 0;
    while let (Some((a0, a1)), Some((b0, b1))) = (x, y) {
        let lo = max(a0, b0);
        let hi = min(a1, b1);
        if hi > lo {
            n += hi - lo;
        }
        if a1 < b1 {
            x = a.next();
        } else {
            y = b.next();
        }
    }
    n
}

/// Intersection over union. Two empty masks have IoU 0.
pub fn iou(a: &PlacedMask, b: &PlacedMask) -> Result<f64> {
    let inter = a.intersection_area(b)?;
    let union = a.area() + b.area() - inter;
    Ok(if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    })
}

/// A union of pixels over a frame, held as sorted disjoint key intervals.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PixelSet {
    intervals: Vec<(u64, u64)>,
}

impl PixelSet {
    pub fn from_masks<'a>(masks: impl IntoIterator<Item = &'a PlacedMask>) -> Self {
        let mut all: Vec<(u64, u64)> = masks.into_iter().flat_map(|m| m.key_intervals()).collect();
        all.sort_unstable();
        let mut intervals: Vec<(u64, u64)> = Vec::with_capacity(all.len());
        for (a, b) in all {
            match intervals.last_mut() {
                Some(last) if a <= last.1 => last.1 = max(last.1, b),
                _ => intervals.push((a, b)),
            }
        }
        PixelSet { intervals }
    }

    pub fn len(&self) -> u64 {
        self.intervals.iter().map(|(a, b)| b - a).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    pub fn intersection_len(&self, other: &PixelSet) -> u64 {
        intersect_len(self.intervals.iter().copied(), other.intervals.iter().copied())
    }

    /// Pixels of `m` that are also in the set. Frames are not checked.
    pub fn overlap_with(&self, m: &PlacedMask) -> u64 {
        intersect_len(self.intervals.iter().copied(), m.key_intervals())
    }

    pub fn union(&self, other: &PixelSet) -> PixelSet {
        let mut all: Vec<(u64, u64)> = self.intervals.iter().chain(&other.intervals).copied().collect();
        all.sort_unstable();
        let mut intervals: Vec<(u64, u64)> = Vec::with_capacity(all.len());
        for (a, b) in all {
            match intervals.last_mut() {
                Some(last) if a <= last.1 => last.1 = max(last.1, b),
                _ => intervals.push((a, b)),
            }
        }
        PixelSet { intervals }
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        let key = ((x as u64) << 32) | y as u64;
        let i = self.intervals.partition_point(|&(_, b)| b <= key);
        self.intervals.get(i).is_some_and(|&(a, _)| a <= key)
    }
}

/// Border band width in whole pixels for a side length, rounding half up.
pub fn band_width(band_fraction: f64, side: u32) -> u32 {
    (band_fraction * side as f64 + 0.5).floor() as u32
}

fn check_inside(m: &PlacedMask, tile: &PixelBox) -> Result<()> {
    if !tile.contains_box(&m.extent()) {
        return Err(Error::Frame(format!(
            "mask extent {:?} is not inside tile {:?}",
            m.extent(),
            tile
        )));
    }
    Ok(())
}

fn count_in(spans: &[(u32, u32)], lo: u32, hi: u32) -> u64 {
    spans
        .iter()
        .map(|&(a, b)| {
            let a = max(a, lo);
            let b = min(b, hi);
            b.saturating_sub(a) as u64
        })
        .sum()
}

fn span_contains(spans: &[(u32, u32)], y: u32) -> bool {
    spans.iter().any(|&(a, b)| a <= y && y < b)
}

fn intersect_spans(a: &[(u32, u32)], b: &[(u32, u32)]) -> Vec<(u32, u32)> {
    let mut out = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        let lo = max(a[i].0, b[j].0);
        let hi = min(a[i].1, b[j].1);
        if hi > lo {
            out.push((lo, hi));
        }
        if a[i].1 < b[j].1 {
            i += 1;
        } else {
            j += 1;
        }
    }
    out
}

/// Number of foreground pixels whose four neighbours are all foreground.
fn interior_count(cols: &[Vec<(u32, u32)>]) -> u64 {
    let empty: Vec<(u32, u32)> = Vec::new();
    let mut n = 0;
    for (c, spans) in cols.iter().enumerate() {
        if c == 0 || c + 1 == cols.len() {
            continue;
        }
        let shrunk: Vec<(u32, u32)> = spans
            .iter()
            .filter(|&&(a, b)| b > a + 2)
            .map(|&(a, b)| (a + 1, b - 1))
            .collect();
        if shrunk.is_empty() {
            continue;
        }
        let left = cols.get(c - 1).unwrap_or(&empty);
        let right = cols.get(c + 1).unwrap_or(&empty);
        let lr = intersect_spans(left, right);
        n += intersect_spans(&shrunk, &lr)
            .iter()
            .map(|&(a, b)| (b - a) as u64)
            .sum::<u64>();
    }
    n
}

/// Number of boundary pixels (foreground with a background or out-of-mask
/// 4-neighbour).
pub fn boundary_pixel_count(m: &RleMask) -> u64 {
    m.area() - interior_count(&m.column_spans())
}

/// Fraction of the mask's boundary pixels that sit on the tile's outermost
/// pixel ring.
pub fn edge_contact_fraction(m: &PlacedMask, tile: &PixelBox) -> Result<f64> {
    check_inside(m, tile)?;
    let area = m.area();
    if area == 0 {
        return Err(Error::UndefinedMeasure("edge contact of an empty mask"));
    }
    let cols = m.rle.column_spans();
    let boundary = area - interior_count(&cols);
    let [ox, oy] = m.origin;
    let (left, right) = (tile.x, tile.x1() - 1);
    let (top, bottom) = (tile.y, tile.y1() - 1);
    let mut ring = 0u64;
    for (c, spans) in cols.iter().enumerate() {
        if spans.is_empty() {
            continue;
        }
        let gx = ox + c as u32;
        if gx == left || gx == right {
            ring += spans.iter().map(|&(a, b)| (b - a) as u64).sum::<u64>();
            continue;
        }
        if top >= oy && span_contains(spans, top - oy) {
            ring += 1;
        }
        if bottom != top && bottom >= oy && span_contains(spans, bottom - oy) {
            ring += 1;
        }
    }
    Ok(ring as f64 / boundary as f64)
}

/// Fraction of the mask's area lying in the outer band of the tile, the band
/// being `round(band_fraction * side)` pixels wide on each side.
pub fn border_band_area_fraction(m: &PlacedMask, tile: &PixelBox, band_fraction: f64) -> Result<f64> {
    if !(band_fraction > 0.0 && band_fraction < 0.5) {
        return Err(Error::Config(format!(
            "band fraction {band_fraction} must lie in (0, 0.5)"
        )));
    }
    check_inside(m, tile)?;
    let area = m.area();
    if area == 0 {
        return Err(Error::UndefinedMeasure("band area of an empty mask"));
    }
    let bx = band_width(band_fraction, tile.w);
    let by = band_width(band_fraction, tile.h);
    let mut inner = 0u64;
    if 2 * bx < tile.w && 2 * by < tile.h {
        let (ix0, ix1) = (tile.x + bx, tile.x1() - bx);
        let (iy0, iy1) = (tile.y + by, tile.y1() - by);
        for s in m.frame_spans() {
            if s.col >= ix0 && s.col < ix1 {
                inner += count_in(&[(s.y0, s.y1)], iy0, iy1);
            }
        }
    }
    Ok((area - inner) as f64 / area as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(x: u32, y: u32, side: u32) -> PlacedMask {
        PlacedMask::in_slide(RleMask::full(side, side).unwrap(), x, y)
    }

    #[test]
    fn encode_examples() {
        let m = rle_encode(&Bitmap::new(2, 2)).unwrap();
        assert_eq!(m.counts(), &[4]);
        let m = rle_encode(&Bitmap::from_fn(2, 2, |_, _| true)).unwrap();
        assert_eq!(m.counts(), &[0, 4]);
        let m = rle_encode(&Bitmap::from_fn(3, 3, |x, y| x == 1 && y == 1)).unwrap();
        assert_eq!(m.counts(), &[4, 1, 4]);
        assert_eq!(m.area(), 1);
        assert!(matches!(rle_encode(&Bitmap::new(0, 3)), Err(Error::Dimension(_))));
    }

    #[test]
    fn column_major_order() {
        // Only (x=1, y=0) set in a 2x3 grid -> linear index 1 * 3 + 0 = 3.
        let m = rle_encode(&Bitmap::from_fn(2, 3, |x, y| x == 1 && y == 0)).unwrap();
        assert_eq!(m.counts(), &[3, 1, 2]);
    }

    #[test]
    fn canonicalizes_zero_runs() {
        let m = RleMask::from_counts(2, 2, vec![1, 0, 1, 2]).unwrap();
        assert_eq!(m.counts(), &[2, 2]);
        let m = RleMask::from_counts(2, 2, vec![2, 2, 0]).unwrap();
        assert_eq!(m.counts(), &[2, 2]);
        assert!(RleMask::from_counts(2, 2, vec![3]).is_err());
    }

    #[test]
    fn area_examples() {
        assert_eq!(RleMask::full(5, 5).unwrap().area(), 25);
        assert_eq!(RleMask::empty(5, 5).unwrap().area(), 0);
    }

    #[test]
    fn iou_examples() {
        let a = square(0, 0, 10);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &square(20, 20, 10)).unwrap(), 0.0);
        let b = square(5, 0, 10);
        assert!((iou(&a, &b).unwrap() - 50.0 / 150.0).abs() < 1e-15);
        let e = PlacedMask::in_slide(RleMask::empty(3, 3).unwrap(), 0, 0);
        assert_eq!(iou(&e, &e).unwrap(), 0.0);
    }

    #[test]
    fn iou_rejects_mixed_frames() {
        let a = square(0, 0, 4);
        let mut b = a.clone();
        b.frame = Frame::Tile("t".into());
        assert!(matches!(iou(&a, &b), Err(Error::Frame(_))));
    }

    #[test]
    fn edge_contact_examples() {
        let tile = PixelBox::new(0, 0, 4096, 4096);
        assert_eq!(edge_contact_fraction(&square(100, 100, 50), &tile).unwrap(), 0.0);
        let whole = PlacedMask::in_slide(RleMask::full(64, 64).unwrap(), 0, 0);
        assert_eq!(
            edge_contact_fraction(&whole, &PixelBox::new(0, 0, 64, 64)).unwrap(),
            1.0
        );
        let flush = square(0, 1000, 100);
        let f = edge_contact_fraction(&flush, &tile).unwrap();
        assert!((f - 100.0 / 396.0).abs() < 1e-12, "{f}");
        let empty = PlacedMask::in_slide(RleMask::empty(4, 4).unwrap(), 0, 0);
        assert!(matches!(
            edge_contact_fraction(&empty, &tile),
            Err(Error::UndefinedMeasure(_))
        ));
    }

    #[test]
    fn band_examples() {
        let tile = PixelBox::new(0, 0, 4096, 4096);
        assert_eq!(band_width(0.10, 4096), 410);
        assert_eq!(band_width(0.10, 2048), 205);
        assert_eq!(border_band_area_fraction(&square(2000, 2000, 50), &tile, 0.1).unwrap(), 0.0);
        let strip = PlacedMask::in_slide(RleMask::full(100, 2000).unwrap(), 0, 1000);
        assert_eq!(border_band_area_fraction(&strip, &tile, 0.1).unwrap(), 1.0);
        assert!(border_band_area_fraction(&strip, &tile, 0.5).is_err());
    }

    #[test]
    fn tile_ring_contact_counts_corners_once() {
        let tile = PixelBox::new(10, 10, 8, 8);
        // 2x2 block in the top-left corner: all four pixels are boundary,
        // three of them lie on the ring.
        let m = PlacedMask::in_slide(RleMask::full(2, 2).unwrap(), 10, 10);
        assert!((edge_contact_fraction(&m, &tile).unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn crop_and_resample() {
        let m = square(5, 5, 10);
        let c = m.crop(&PixelBox::new(0, 0, 10, 10)).unwrap();
        assert_eq!(c.origin, [5, 5]);
        assert_eq!(c.area(), 25);
        assert!(m.crop(&PixelBox::new(100, 100, 3, 3)).is_none());

        let up = square(0, 0, 10).resample(2, 1, Frame::Slide).unwrap();
        assert_eq!(up.extent(), PixelBox::new(0, 0, 20, 20));
        assert_eq!(up.area(), 400);
        let down = up.resample(1, 2, Frame::Slide).unwrap();
        assert_eq!(down, square(0, 0, 10));
    }

    #[test]
    fn pixel_set_union() {
        let a = square(0, 0, 10);
        let b = square(5, 0, 10);
        let u = PixelSet::from_masks([&a, &b]);
        assert_eq!(u.len(), 150);
        assert!(u.contains(14, 9));
        assert!(!u.contains(15, 0));
        let sa = PixelSet::from_masks([&a]);
        assert_eq!(u.intersection_len(&sa), 100);
    }

    #[test]
    fn json_shape() {
        let m = rle_encode(&Bitmap::from_fn(3, 3, |x, y| x == 1 && y == 1)).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        assert_eq!(s, r#"{"size":[3,3],"counts":[4,1,4]}"#);
        let back: RleMask = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
        assert!(serde_json::from_str::<RleMask>(r#"{"size":[3,3],"counts":[4,1]}"#).is_err());
    }
}
