//! Line-oriented JSON, images and provenance stamps.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{PipelineConfig, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::mask::Bitmap;
use crate::merge::TilePrediction;
use crate::tiling::TileSpec;
use crate::tissue::{TissueMask, TissueThumbnail};

#[derive(Serialize, Deserialize)]
struct Versioned<T> {
    format_version: u32,
    #[serde(flatten)]
    inner: T,
}

/// One JSON object per line, each stamped with `format_version`.
pub fn write_jsonl<T: Serialize + Clone, W: Write>(items: &[T], mut out: W) -> Result<()> {
    for item in items {
        let line = serde_json::to_string(&Versioned {
            format_version: FORMAT_VERSION,
            inner: item.clone(),
        })?;
        writeln!(out, "{line}").map_err(|e| Error::io("<stream>", e))?;
    }
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned, R: BufRead>(input: R, origin: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io(origin, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Versioned<T> = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{origin}:{}: {e}", n + 1)))?;
        if v.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "{origin}:{}: format_version {} is not supported",
                n + 1,
                v.format_version
            )));
        }
        out.push(v.inner);
    }
    Ok(out)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

/// Writes through a sibling temporary file and a rename, so readers never
/// see a partial file.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = create(&tmp)?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(&tmp, e))?;
    f.flush().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_text(path, &s)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn write_tile_plan(path: &Path, tiles: &[TileSpec]) -> Result<()> {
    let mut f = create(path)?;
    write_jsonl(tiles, &mut f)?;
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn read_tile_plan(path: &Path) -> Result<Vec<TileSpec>> {
    read_jsonl(open(path)?, &path.display().to_string())
}

pub fn write_predictions(path: &Path, preds: &[TilePrediction]) -> Result<()> {
    let mut f = create(path)?;
    write_jsonl(preds, &mut f)?;
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<TilePrediction>> {
    read_jsonl(open(path)?, &path.display().to_string())
}

/// `<dir>/<tile_id>.jsonl`.
pub fn prediction_path(dir: &Path, tile: &TileSpec) -> PathBuf {
    dir.join(format!("{}.jsonl", tile.tile_id))
}

/// Reads the prediction file of every planned tile. A tile without a file
/// contributes nothing and is reported in the returned warnings.
pub fn read_tile_predictions(
    dir: &Path,
    tiles: &[TileSpec],
) -> Result<(Vec<(TileSpec, Vec<TilePrediction>)>, Vec<String>)> {
    let mut out = Vec::with_capacity(tiles.len());
    let mut warnings = Vec::new();
    for t in tiles {
        let path = prediction_path(dir, t);
        if !path.exists() {
            warnings.push(format!("{}: no prediction file", t.tile_id));
            out.push((t.clone(), Vec::new()));
            continue;
        }
        let preds = read_predictions(&path)?;
        if let Some(p) = preds.iter().find(|p| p.tile_id != t.tile_id) {
            return Err(Error::Format(format!(
                "{}: prediction for tile {} in file of tile {}",
                path.display(),
                p.tile_id,
                t.tile_id
            )));
        }
        out.push((t.clone(), preds));
    }
    Ok((out, warnings))
}

const PALETTE: [u8; 12] = [0, 0, 0, 160, 120, 80, 120, 80, 200, 60, 140, 220];

/// Label thumbnail as a paletted PNG whose indices are the label values.
pub fn write_thumbnail_png(path: &Path, t: &TissueThumbnail) -> Result<()> {
    let f = create(path)?;
    let mut enc = png::Encoder::new(f, t.width, t.height);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(PALETTE.to_vec());
    let png_err = |e: png::EncodingError| Error::Format(format!("{}: {e}", path.display()));
    let mut w = enc.write_header().map_err(png_err)?;
    w.write_image_data(&t.labels).map_err(png_err)?;
    w.finish().map_err(png_err)
}

/// 8-bit single-channel image: palette indices for paletted PNG, raw values
/// for grayscale PNG or PGM.
pub fn read_gray8(path: &Path) -> Result<(u32, u32, Vec<u8>)> {
    let fmt = |msg: String| Error::Format(format!("{}: {msg}", path.display()));
    let is_png = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if is_png {
        let mut dec = png::Decoder::new(open(path)?);
        dec.set_transformations(png::Transformations::IDENTITY);
        let mut reader = dec.read_info().map_err(|e| fmt(e.to_string()))?;
        let info = reader.info();
        let (w, h) = (info.width, info.height);
        match (info.color_type, info.bit_depth) {
            (png::ColorType::Indexed | png::ColorType::Grayscale, png::BitDepth::Eight) => {}
            (c, d) => return Err(fmt(format!("expected 8-bit paletted or grayscale PNG, got {c:?} {d:?}"))),
        }
        let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| fmt("image too large".into()))?];
        let frame = reader.next_frame(&mut buf).map_err(|e| fmt(e.to_string()))?;
        let stride = frame.line_size;
        let mut data = Vec::with_capacity(w as usize * h as usize);
        for row in buf[..frame.buffer_size()].chunks(stride) {
            data.extend_from_slice(&row[..w as usize]);
        }
        Ok((w, h, data))
    } else {
        let img = image::ImageReader::open(path)
            .map_err(|e| Error::io(path, e))?
            .with_guessed_format()
            .map_err(|e| Error::io(path, e))?
            .decode()
            .map_err(|e| fmt(e.to_string()))?;
        let g = img.to_luma8();
        Ok((g.width(), g.height(), g.into_raw()))
    }
}

pub fn read_thumbnail(path: &Path, slide_id: &str) -> Result<TissueThumbnail> {
    let (w, h, labels) = read_gray8(path)?;
    TissueThumbnail::new(slide_id, w, h, labels)
}

/// Binary mask image: 255 for tissue, 0 for background. PNG when the path
/// ends in `.png`, binary PGM otherwise.
pub fn write_mask_image(path: &Path, m: &Bitmap) -> Result<()> {
    let (w, h) = (m.width(), m.height());
    let mut data = Vec::with_capacity(w as usize * h as usize);
    for y in 0..h {
        for x in 0..w {
            data.push(if m.get(x, y) { 255 } else { 0 });
        }
    }
    let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
    let mut f = create(path)?;
    if is_png {
        let mut enc = png::Encoder::new(&mut f, w, h);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let png_err = |e: png::EncodingError| Error::Format(format!("{}: {e}", path.display()));
        let mut wr = enc.write_header().map_err(png_err)?;
        wr.write_image_data(&data).map_err(png_err)?;
        wr.finish().map_err(png_err)?;
    } else {
        write!(f, "P5\n{w} {h}\n255\n").map_err(|e| Error::io(path, e))?;
        f.write_all(&data).map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn write_tissue_mask(path: &Path, t: &TissueMask) -> Result<()> {
    write_mask_image(path, &t.mask)
}

pub fn sha256_bytes(data: &[u8]) -> String {
    let digest = Sha256::digest(data);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputHash {
    pub path: String,
    pub sha256: String,
}

/// Config echo plus input hashes, embedded in every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub format_version: u32,
    pub tool: String,
    pub config: PipelineConfig,
    pub inputs: Vec<InputHash>,
    /// Combined hash over `inputs`.
    pub inputs_sha256: String,
    /// The run file exactly as it was read, when there is one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_config: Option<serde_json::Value>,
}

impl Provenance {
    pub fn new(config: &PipelineConfig, mut inputs: Vec<InputHash>) -> Self {
        inputs.sort_by(|a, b| a.path.cmp(&b.path));
        let joined: String = inputs.iter().map(|i| format!("{}={}\n", i.path, i.sha256)).collect();
        Provenance {
            format_version: FORMAT_VERSION,
            tool: format!("wsiseg {}", env!("CARGO_PKG_VERSION")),
            config: config.clone(),
            inputs_sha256: sha256_bytes(joined.as_bytes()),
            inputs,
            run_config: None,
        }
    }

    /// Hashes each file, labelling it by its path relative to `base`.
    pub fn for_files(config: &PipelineConfig, base: &Path, files: &[PathBuf]) -> Result<Self> {
        let inputs = files
            .iter()
            .map(|p| {
                let label = p.strip_prefix(base).unwrap_or(p).to_string_lossy().replace('\\', "/");
                Ok(InputHash {
                    path: label,
                    sha256: sha256_file(p)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self::new(config, inputs))
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("plain data")
    }

    /// Single-line JSON form for comment headers.
    pub fn one_line(&self) -> String {
        serde_json::to_string(self).expect("plain data")
    }
}

/// JSON document with provenance beside the payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub provenance: Provenance,
    #[serde(flatten)]
    pub body: T,
}
