//! Run files and the end-to-end slide pipeline.
//!
//! Slides are processed in parallel; each writes only inside its own output
//! directory. Reports and the manifest are written afterwards from a single
//! thread, each through a temporary file and a rename, so an interrupted
//! run never leaves a half-written report behind.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{InstanceClass, PipelineConfig, FORMAT_VERSION};
use crate::dct::{decide_thresholds, thresholds_by_class, write_decisions_csv, DctModel, ThresholdDecision, ThresholdMode};
use crate::error::{Error, Result};
use crate::io::{
    export_geojson, gt_features, load_annotations, prediction_path, read_json, read_thumbnail,
    read_tile_predictions, render_geojson, sha256_file, write_json, write_predictions, write_text,
    write_thumbnail_png, write_tile_plan, write_tissue_mask, InputHash, Provenance, Stamped,
};
use crate::mask::PlacedMask;
use crate::merge::{filter_small, finish_cascade, merge_tiles, SlideInstanceSet, StageCount};
use crate::metrics::{
    aggregate_report, class_means, evaluate_mode, evaluate_slide, pr_curve, render_pr_svg, render_table2,
    write_metrics_csv, write_pr_csv, ClassSlideMetrics, EvalSlide, GtRef, IgnoreFilter, MetricsReport,
    PredRef, PrCurve, Table1, Table1Row,
};
use crate::synth::{generate_slide, plan_synth_tiles, simulate_predictions, Emission, SynthParams, TruthRecord};
use crate::tiling::{plan_tiles, GroundTruthInstance, SlideGeometry};
use crate::tissue::aggregate_tissue;

pub const STAGE_TISSUE: &str = "tissue_gate";
pub const STAGE_PLAN: &str = "tile_plan";
pub const STAGE_INGEST: &str = "ingest";
pub const STAGE_MERGE: &str = "merge";
pub const STAGE_THRESHOLD: &str = "threshold";
pub const STAGE_METRICS: &str = "metrics";
pub const STAGE_EXPORT: &str = "export";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlideEntry {
    pub slide_id: String,
    pub width: u32,
    pub height: u32,
}

fn default_version() -> u32 {
    FORMAT_VERSION
}

fn default_mode() -> ThresholdMode {
    ThresholdMode::Static(0.5)
}

/// Everything one pipeline run needs. Relative paths are resolved against
/// the directory holding the run file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_version")]
    pub format_version: u32,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    pub slides: Vec<SlideEntry>,
    /// `<slide_id>.png` or `<slide_id>.pgm` label thumbnails.
    pub thumbnails_dir: PathBuf,
    /// `<slide_id>/<tile_id>.jsonl` prediction files.
    pub predictions_dir: PathBuf,
    /// `<slide_id>.geojson` annotations; metrics are skipped without them.
    #[serde(default)]
    pub annotations_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
    #[serde(default = "default_mode")]
    pub threshold_mode: ThresholdMode,
    #[serde(default)]
    pub dct_model: Option<PathBuf>,
    /// Extra threshold modes scored side by side (needs annotations).
    #[serde(default)]
    pub sweep: Vec<ThresholdMode>,
    #[serde(default)]
    pub seed: u64,
}

/// A parsed run file with its verbatim JSON and base directory.
#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub config: RunConfig,
    pub raw: Value,
    pub base: PathBuf,
}

impl LoadedRun {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.config.output_dir)
    }

    fn provenance(&self, inputs: Vec<InputHash>) -> Provenance {
        let mut p = Provenance::new(&self.config.pipeline, inputs);
        p.run_config = Some(self.raw.clone());
        p
    }

    fn input_hash(&self, path: &Path) -> Result<InputHash> {
        let label = path
            .strip_prefix(&self.base)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/");
        Ok(InputHash {
            path: label,
            sha256: sha256_file(path)?,
        })
    }
}

/// Parses and validates a run file; every referenced input must exist.
pub fn load_run_config(path: &Path) -> Result<LoadedRun> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let config: RunConfig =
        serde_json::from_value(raw.clone()).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if config.format_version != FORMAT_VERSION {
        return Err(Error::Config(format!(
            "run file format_version {} is not supported",
            config.format_version
        )));
    }
    config.pipeline.validate()?;
    if config.slides.is_empty() {
        return Err(Error::Config("run file lists no slides".into()));
    }
    let mut ids: Vec<&str> = config.slides.iter().map(|s| s.slide_id.as_str()).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::Config(format!("slide {} listed twice", w[0])));
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let run = LoadedRun { config, raw, base };
    let c = &run.config;
    let mut required = vec![&c.thumbnails_dir, &c.predictions_dir];
    required.extend(c.annotations_dir.iter());
    required.extend(c.dct_model.iter());
    for p in required {
        if !run.resolve(p).exists() {
            return Err(Error::Config(format!("{} does not exist", run.resolve(p).display())));
        }
    }
    let needs_truth = std::iter::once(&c.threshold_mode)
        .chain(&c.sweep)
        .any(|m| *m == ThresholdMode::Optimistic);
    if (needs_truth || !c.sweep.is_empty()) && c.annotations_dir.is_none() {
        return Err(Error::Config("optimistic thresholds and sweeps need annotations_dir".into()));
    }
    let needs_model = std::iter::once(&c.threshold_mode)
        .chain(&c.sweep)
        .any(|m| *m == ThresholdMode::Dynamic);
    if needs_model && c.dct_model.is_none() {
        return Err(Error::Config("dynamic thresholds need dct_model".into()));
    }
    Ok(run)
}

pub fn load_model(path: &Path) -> Result<DctModel> {
    let m: DctModel = read_json(path)?;
    m.validate()?;
    Ok(m)
}

/// Everything produced for one slide.
#[derive(Debug, Clone)]
pub struct SlideRun {
    pub slide_id: String,
    /// After edge filtering and same-class merging.
    pub merged: SlideInstanceSet,
    pub finished: SlideInstanceSet,
    pub decisions: Vec<ThresholdDecision>,
    pub gts: Vec<GroundTruthInstance>,
    pub ignore: Vec<PlacedMask>,
    pub metrics: Option<Vec<ClassSlideMetrics>>,
    pub pr_curves: Vec<PrCurve>,
    /// Written files, relative to the output directory.
    pub files: Vec<String>,
}

#[derive(Debug, Serialize)]
struct Audit<'a> {
    slide_id: &'a str,
    trace: &'a [StageCount],
    decisions: &'a [ThresholdDecision],
    warnings: &'a [String],
}

fn thumbnail_path(dir: &Path, slide_id: &str) -> Result<PathBuf> {
    ["png", "pgm"]
        .iter()
        .map(|ext| dir.join(format!("{slide_id}.{ext}")))
        .find(|p| p.exists())
        .ok_or_else(|| Error::Config(format!("no thumbnail for slide {slide_id} in {}", dir.display())))
}

fn comment_header(prefix: &str, suffix: &str, p: &Provenance) -> String {
    format!("{prefix} provenance: {}{suffix}\n", p.one_line())
}

/// PR curves of every class against ground truth, over the candidates
/// that reach the threshold stage.
pub fn slide_pr_curves(
    merged: &SlideInstanceSet,
    gts: &[GroundTruthInstance],
    ignore: &[PlacedMask],
    cfg: &PipelineConfig,
) -> Result<Vec<PrCurve>> {
    let base = filter_small(merged.clone(), cfg);
    let filter = IgnoreFilter::new(ignore, cfg.ignore_overlap);
    InstanceClass::ALL
        .iter()
        .map(|&class| {
            let preds: Vec<PredRef> = base
                .active_of(class)
                .filter(|c| filter.keeps(&c.mask))
                .map(PredRef::from)
                .collect();
            let g: Vec<GtRef> = gts
                .iter()
                .filter(|g| g.class == class && filter.keeps(&g.mask))
                .map(GtRef::from)
                .collect();
            pr_curve(&merged.slide_id, class, &preds, &g, cfg.match_iou)
        })
        .collect()
}

/// Runs every stage for one slide and writes its per-slide outputs.
pub fn process_slide(run: &LoadedRun, entry: &SlideEntry, model: Option<&DctModel>) -> Result<SlideRun> {
    let c = &run.config;
    let cfg = &c.pipeline;
    let id = entry.slide_id.as_str();
    let stage = |name: &'static str| move |e: Error| e.in_stage(name, id);
    let out_dir = run.output_dir().join(id);
    let mut inputs = Vec::new();

    let geom = SlideGeometry::new(id, entry.width, entry.height);
    geom.validate().map_err(stage(STAGE_TISSUE))?;
    let thumb_path = thumbnail_path(&run.resolve(&c.thumbnails_dir), id).map_err(stage(STAGE_TISSUE))?;
    inputs.push(run.input_hash(&thumb_path).map_err(stage(STAGE_TISSUE))?);
    let tissue = read_thumbnail(&thumb_path, id)
        .and_then(|t| {
            t.check_size(cfg.thumbnail_size)?;
            aggregate_tissue(&t)
        })
        .map_err(stage(STAGE_TISSUE))?;

    let tiles = plan_tiles(&geom, &tissue, cfg).map_err(stage(STAGE_PLAN))?;

    let pred_dir = run.resolve(&c.predictions_dir).join(id);
    let (tile_preds, mut warnings) = read_tile_predictions(&pred_dir, &tiles).map_err(stage(STAGE_INGEST))?;
    for (t, _) in &tile_preds {
        let p = prediction_path(&pred_dir, t);
        if p.exists() {
            inputs.push(run.input_hash(&p).map_err(stage(STAGE_INGEST))?);
        }
    }

    let mut merged = merge_tiles(&tile_preds, &geom, cfg).map_err(stage(STAGE_MERGE))?;
    warnings.append(&mut merged.warnings);
    merged.warnings = warnings.clone();

    let (gts, ignore) = match &c.annotations_dir {
        Some(dir) => {
            let path = run.resolve(dir).join(format!("{id}.geojson"));
            inputs.push(run.input_hash(&path).map_err(stage(STAGE_METRICS))?);
            let a = load_annotations(&path).map_err(stage(STAGE_METRICS))?;
            (Some(a.gts()), a.ignore())
        }
        None => (None, Vec::new()),
    };
    if let Some(m) = &c.dct_model {
        inputs.push(run.input_hash(&run.resolve(m)).map_err(stage(STAGE_THRESHOLD))?);
    }
    let truth = gts.as_deref().map(|g| (g, ignore.as_slice()));
    let decisions =
        decide_thresholds(&c.threshold_mode, model, &merged, truth, cfg).map_err(stage(STAGE_THRESHOLD))?;
    let finished = finish_cascade(merged.clone(), thresholds_by_class(&decisions), cfg);

    let (metrics, pr_curves) = match &gts {
        Some(g) => (
            Some(evaluate_slide(&finished, g, &ignore, cfg).map_err(stage(STAGE_METRICS))?),
            slide_pr_curves(&merged, g, &ignore, cfg).map_err(stage(STAGE_METRICS))?,
        ),
        None => (None, Vec::new()),
    };

    let prov = run.provenance(inputs);
    let mut files = Vec::new();
    let mut emit = |name: &str, write: &dyn Fn(&Path) -> Result<()>| -> Result<()> {
        write(&out_dir.join(name))?;
        files.push(format!("{id}/{name}"));
        Ok(())
    };
    let mut export = || -> Result<()> {
        emit("tile_plan.jsonl", &|p| write_tile_plan(p, &tiles))?;
        emit("tissue_mask.png", &|p| write_tissue_mask(p, &tissue))?;
        emit("merged.json", &|p| {
            write_json(
                p,
                &Stamped {
                    provenance: prov.clone(),
                    body: merged.clone(),
                },
            )
        })?;
        emit("instances.json", &|p| {
            write_json(
                p,
                &Stamped {
                    provenance: prov.clone(),
                    body: finished.clone(),
                },
            )
        })?;
        emit("instances.geojson", &|p| {
            write_text(p, &export_geojson(&finished, Some(&prov.to_value())))
        })?;
        emit("thresholds.csv", &|p| {
            let mut buf = comment_header("#", "", &prov).into_bytes();
            write_decisions_csv(&decisions, &mut buf)?;
            write_text(p, &String::from_utf8_lossy(&buf))
        })?;
        emit("audit.json", &|p| {
            write_json(
                p,
                &Audit {
                    slide_id: id,
                    trace: &finished.trace,
                    decisions: &decisions,
                    warnings: &warnings,
                },
            )
        })?;
        if let Some(m) = &metrics {
            emit("metrics.json", &|p| {
                #[derive(Serialize)]
                struct Body<'a> {
                    metrics: &'a [ClassSlideMetrics],
                }
                write_json(
                    p,
                    &Stamped {
                        provenance: prov.clone(),
                        body: Body { metrics: m },
                    },
                )
            })?;
        }
        Ok(())
    };
    export().map_err(stage(STAGE_EXPORT))?;
    info!("{id}: {} tiles, {} active instances", tiles.len(), finished.active_count());

    Ok(SlideRun {
        slide_id: id.to_string(),
        merged,
        finished,
        decisions,
        gts: gts.unwrap_or_default(),
        ignore,
        metrics,
        pr_curves,
        files,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub provenance: Provenance,
    pub slides: Vec<String>,
    pub files: Vec<ManifestFile>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub slides: Vec<SlideRun>,
    pub report: Option<MetricsReport>,
    pub sweep: Option<Table1>,
    pub manifest: Manifest,
}

/// Mean F1 per class for each mode, as a one-split grid.
pub fn sweep_grid(
    slides: &[EvalSlide],
    modes: &[ThresholdMode],
    model: Option<&DctModel>,
    cfg: &PipelineConfig,
) -> Result<Table1> {
    let mut rows = Vec::new();
    for mode in modes {
        let m = evaluate_mode(slides, mode, model, cfg)?;
        let mut cell = [None; 3];
        for c in InstanceClass::ALL {
            cell[c.index()] = class_means(&m, c).mf1;
        }
        rows.push(Table1Row {
            mode: *mode,
            cells: vec![cell],
        });
    }
    Ok(Table1 {
        format_version: FORMAT_VERSION,
        splits: vec!["run".into()],
        rows,
    })
}

/// Tissue gate through export for every slide, then the run-level reports
/// and the manifest.
pub fn run_pipeline(run: &LoadedRun) -> Result<RunSummary> {
    let c = &run.config;
    let cfg = &c.pipeline;
    let model = c.dct_model.as_ref().map(|p| load_model(&run.resolve(p))).transpose()?;
    let out = run.output_dir();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;

    let slides: Vec<SlideRun> = c
        .slides
        .par_iter()
        .map(|e| process_slide(run, e, model.as_ref()))
        .collect::<Result<_>>()?;

    // Single-threaded commit from here on.
    let mut files: Vec<String> = slides.iter().flat_map(|s| s.files.iter().cloned()).collect();
    let mut inputs = Vec::new();
    for s in &slides {
        let p = out.join(&s.slide_id).join("instances.json");
        inputs.push(InputHash {
            path: format!("{}/instances.json", s.slide_id),
            sha256: sha256_file(&p)?,
        });
    }
    let prov = run.provenance(inputs);

    let mut audit = String::from("slide_id,stage,active\n");
    for s in &slides {
        for t in &s.finished.trace {
            let _ = writeln!(audit, "{},{},{}", s.slide_id, t.stage, t.active);
        }
    }
    write_text(&out.join("audit.csv"), &(comment_header("#", "", &prov) + &audit))?;
    files.push("audit.csv".into());

    let all_metrics: Vec<ClassSlideMetrics> = slides.iter().filter_map(|s| s.metrics.clone()).flatten().collect();
    let report = if all_metrics.is_empty() {
        None
    } else {
        let report = aggregate_report(all_metrics, &c.threshold_mode.to_string(), cfg)?;
        let mut csv = comment_header("#", "", &prov).into_bytes();
        write_metrics_csv(&report, &mut csv)?;
        write_text(&out.join("report.csv"), &String::from_utf8_lossy(&csv))?;
        let md = comment_header("<!--", " -->", &prov) + &render_table2(&[("run", &report)]);
        write_text(&out.join("report.md"), &md)?;
        write_json(
            &out.join("report.json"),
            &Stamped {
                provenance: prov.clone(),
                body: report.clone(),
            },
        )?;
        let curves: Vec<PrCurve> = slides.iter().flat_map(|s| s.pr_curves.iter().cloned()).collect();
        let mut pr = comment_header("#", "", &prov).into_bytes();
        write_pr_csv(&curves, &mut pr)?;
        write_text(&out.join("pr_curves.csv"), &String::from_utf8_lossy(&pr))?;
        let svg = render_pr_svg(&curves);
        let svg = svg.replacen('\n', &format!("\n{}", comment_header("<!--", " -->", &prov)), 1);
        write_text(&out.join("pr_curves.svg"), &svg)?;
        files.extend(["report.csv", "report.md", "report.json", "pr_curves.csv", "pr_curves.svg"].map(String::from));
        Some(report)
    };

    let sweep = if c.sweep.is_empty() {
        None
    } else {
        let eval: Vec<EvalSlide> = slides
            .iter()
            .map(|s| EvalSlide {
                set: s.merged.clone(),
                gts: s.gts.clone(),
                ignore: s.ignore.clone(),
            })
            .collect();
        let grid = sweep_grid(&eval, &c.sweep, model.as_ref(), cfg)?;
        write_text(
            &out.join("sweep.md"),
            &(comment_header("<!--", " -->", &prov) + &grid.render_markdown()),
        )?;
        files.push("sweep.md".into());
        Some(grid)
    };

    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        provenance: prov,
        slides: slides.iter().map(|s| s.slide_id.clone()).collect(),
        files: files
            .iter()
            .map(|f| {
                Ok(ManifestFile {
                    path: f.clone(),
                    sha256: sha256_file(&out.join(f))?,
                })
            })
            .collect::<Result<_>>()?,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(RunSummary {
        slides,
        report,
        sweep,
        manifest,
    })
}

#[derive(Debug, Serialize)]
struct TruthFile<'a> {
    format_version: u32,
    slide_id: &'a str,
    params: &'a SynthParams,
    confidence_shift: f64,
    instances: &'a [TruthRecord],
    emissions: &'a [Emission],
}

/// Writes `n` synthetic slides in the pipeline's input formats plus a
/// `run.json` that processes them. Slide `i` uses seed `template.seed + i`.
pub fn write_synth_dataset(
    dir: &Path,
    template: &SynthParams,
    n: usize,
    cfg: &PipelineConfig,
) -> Result<PathBuf> {
    cfg.validate()?;
    let ids: Vec<String> = (0..n).map(|i| format!("{}{i:03}", template.slide_id)).collect();
    ids.par_iter()
        .enumerate()
        .map(|(i, id)| {
            let p = SynthParams {
                seed: template.seed.wrapping_add(i as u64),
                slide_id: id.clone(),
                ..template.clone()
            };
            let s = generate_slide(&p, cfg)?;
            let tiles = plan_synth_tiles(&s, cfg)?;
            let sim = simulate_predictions(&s, &tiles, &p)?;
            write_thumbnail_png(&dir.join("thumbnails").join(format!("{id}.png")), &s.thumbnail)?;
            for t in &sim.tiles {
                write_predictions(&prediction_path(&dir.join("predictions").join(id), &t.tile), &t.predictions)?;
            }
            let meta = serde_json::json!({ "slide_id": id });
            write_text(
                &dir.join("annotations").join(format!("{id}.geojson")),
                &render_geojson(&gt_features(&s.gts), Some(&meta)),
            )?;
            write_json(
                &dir.join("truth").join(format!("{id}.json")),
                &TruthFile {
                    format_version: FORMAT_VERSION,
                    slide_id: id,
                    params: &p,
                    confidence_shift: s.confidence_shift,
                    instances: &s.truth_manifest,
                    emissions: &sim.manifest,
                },
            )
        })
        .collect::<Result<Vec<()>>>()?;
    let run = RunConfig {
        format_version: FORMAT_VERSION,
        pipeline: cfg.clone(),
        slides: ids
            .iter()
            .map(|id| SlideEntry {
                slide_id: id.clone(),
                width: template.width,
                height: template.height,
            })
            .collect(),
        thumbnails_dir: "thumbnails".into(),
        predictions_dir: "predictions".into(),
        annotations_dir: Some("annotations".into()),
        output_dir: "out".into(),
        threshold_mode: default_mode(),
        dct_model: None,
        sweep: Vec::new(),
        seed: template.seed,
    };
    let path = dir.join("run.json");
    write_json(&path, &run)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> PipelineConfig {
        PipelineConfig {
            thumbnail_size: 128,
            ..Default::default()
        }
    }

    fn dataset(dir: &Path, noisy: bool, n: usize) -> PathBuf {
        let t = if noisy {
            SynthParams::noisy(40, "s", 8192, 8192, [4, 4, 4])
        } else {
            SynthParams::noise_free(40, "s", 8192, 8192, [4, 4, 4])
        };
        write_synth_dataset(dir, &t, n, &small_cfg()).unwrap()
    }

    #[test]
    fn noise_free_run_scores_one() {
        let dir = tempfile::tempdir().unwrap();
        let run = load_run_config(&dataset(dir.path(), false, 2)).unwrap();
        let summary = run_pipeline(&run).unwrap();
        let report = summary.report.unwrap();
        for m in &report.means {
            assert_eq!(m.mf1, Some(1.0), "{:?}", m.class);
            assert_eq!(m.miou, Some(1.0));
        }
        assert!(dir.path().join("out/manifest.json").exists());
    }

    #[test]
    fn rerun_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let run = load_run_config(&dataset(dir.path(), true, 2)).unwrap();
        let a = run_pipeline(&run).unwrap().manifest;
        let b = run_pipeline(&run).unwrap().manifest;
        assert_eq!(a, b);
        assert!(a.files.iter().any(|f| f.path == "report.csv"));
    }

    #[test]
    fn missing_input_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dataset(dir.path(), false, 1);
        std::fs::remove_dir_all(dir.path().join("predictions")).unwrap();
        assert!(matches!(load_run_config(&path), Err(Error::Config(_))));
    }

    #[test]
    fn stage_errors_name_stage_and_slide() {
        let dir = tempfile::tempdir().unwrap();
        let path = dataset(dir.path(), false, 1);
        std::fs::write(dir.path().join("thumbnails/s000.png"), b"not a png").unwrap();
        let run = load_run_config(&path).unwrap();
        match run_pipeline(&run) {
            Err(Error::Stage { stage, slide_id, .. }) => {
                assert_eq!((stage, slide_id.as_str()), (STAGE_TISSUE, "s000"));
            }
            other => panic!("{other:?}"),
        }
    }
}
