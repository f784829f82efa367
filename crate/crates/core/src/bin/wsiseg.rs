use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use wsiseg::dct::{
    decide_thresholds, thresholds_by_class, train_dct, training_examples, write_decisions_csv, ThresholdMode,
    TrainParams,
};
use wsiseg::io::{
    export_geojson, load_annotations, read_gray8, read_json, read_thumbnail, read_tile_plan, read_tile_predictions,
    write_json, write_text, write_tile_plan, write_tissue_mask, Annotations,
};
use wsiseg::merge::{finish_cascade, merge_tiles, SlideInstanceSet};
use wsiseg::metrics::{
    aggregate_report, evaluate_slide, render_pr_svg, render_table2, table1_harness, write_metrics_csv,
    write_pr_csv, EvalSlide,
};
use wsiseg::pipeline::{load_model, load_run_config, run_pipeline, slide_pr_curves, write_synth_dataset};
use wsiseg::synth::SynthParams;
use wsiseg::tiling::{plan_tiles, SlideGeometry};
use wsiseg::tissue::{aggregate_tissue, otsu_tissue, Polarity, TissueMask};
use wsiseg::{ErrorFamily, PipelineConfig};

/// Tiling, merging, thresholding and evaluation of whole-slide instance
/// segmentation output.
#[derive(Parser)]
#[command(name = "wsiseg", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Plan tiles over a slide, skipping tiles with too little tissue.
    Plan(PlanArgs),
    /// Binary tissue mask from a label thumbnail (or Otsu on grayscale).
    Tissue(TissueArgs),
    /// Edge-filter and merge per-tile predictions into one slide set.
    Merge(MergeArgs),
    /// Train the dynamic threshold model from merged sets and annotations.
    DctTrain(DctTrainArgs),
    /// Choose thresholds for a merged set and run the remaining filters.
    DctApply(DctApplyArgs),
    /// Score finished sets against annotations.
    Eval(EvalArgs),
    /// Compare static, dynamic and optimistic thresholds over splits.
    Table1(Table1Args),
    /// Write a synthetic dataset with a matching run file.
    Synth(SynthArgs),
    /// Export the active instances of a set as GeoJSON.
    Export(ExportArgs),
    /// Run the whole pipeline from a run file.
    Run {
        run_file: PathBuf,
    },
}

#[derive(Args)]
struct ConfigArg {
    /// Pipeline configuration JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<PipelineConfig> {
        let cfg: PipelineConfig = match &self.config {
            Some(p) => read_json(p).with_context(|| format!("loading config {}", p.display()))?,
            None => PipelineConfig::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct SlideArgs {
    #[arg(long)]
    slide_id: String,
    /// Slide width in working-resolution pixels.
    #[arg(long)]
    width: u32,
    #[arg(long)]
    height: u32,
}

impl SlideArgs {
    fn geometry(&self) -> Result<SlideGeometry> {
        let g = SlideGeometry::new(self.slide_id.clone(), self.width, self.height);
        g.validate()?;
        Ok(g)
    }
}

#[derive(Args)]
struct PlanArgs {
    #[command(flatten)]
    slide: SlideArgs,
    /// Label thumbnail (paletted PNG or PGM).
    #[arg(long)]
    thumbnail: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolarityArg {
    Dark,
    Light,
}

#[derive(Args)]
struct TissueArgs {
    #[arg(long)]
    slide_id: String,
    #[arg(long)]
    thumbnail: PathBuf,
    /// Treat the thumbnail as grayscale and threshold it with Otsu's method.
    #[arg(long)]
    otsu: bool,
    #[arg(long, value_enum, default_value = "dark")]
    polarity: PolarityArg,
    /// Output mask, PNG or PGM by extension.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args)]
struct MergeArgs {
    #[command(flatten)]
    slide: SlideArgs,
    /// Tile plan (JSON lines).
    #[arg(long)]
    plan: PathBuf,
    /// Directory of `<tile_id>.jsonl` prediction files.
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args)]
struct DctTrainArgs {
    /// Merged slide sets.
    #[arg(long, num_args = 1.., required = true)]
    sets: Vec<PathBuf>,
    /// Directory of `<slide_id>.geojson` annotations.
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = TrainParams::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = TrainParams::default().learning_rate)]
    learning_rate: f64,
    #[arg(long, default_value_t = TrainParams::default().seed)]
    seed: u64,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args)]
struct DctApplyArgs {
    /// Merged slide set.
    #[arg(long)]
    set: PathBuf,
    /// `static:<t>`, `dynamic` or `optimistic`.
    #[arg(long, default_value = "dynamic")]
    mode: ThresholdMode,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Annotation file, required for optimistic thresholds.
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Where to write the chosen thresholds as CSV.
    #[arg(long)]
    decisions: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Finished slide sets.
    #[arg(long, num_args = 1.., required = true)]
    sets: Vec<PathBuf>,
    #[arg(long)]
    annotations: PathBuf,
    /// Receives report.csv, report.md, report.json and PR curves.
    #[arg(long)]
    out_dir: PathBuf,
    /// Label for the report.
    #[arg(long, default_value = "eval")]
    mode: String,
}

#[derive(Args)]
struct Table1Args {
    /// `NAME=DIR`, where DIR holds merged `*.json` sets. Repeatable.
    #[arg(long = "split", required = true)]
    splits: Vec<String>,
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Markdown output; a JSON twin is written next to it.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    slides: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 8192)]
    width: u32,
    #[arg(long, default_value_t = 8192)]
    height: u32,
    /// Instances per class: glomeruli,arterioles,arteries.
    #[arg(long, value_delimiter = ',', default_values_t = [8, 8, 6])]
    counts: Vec<usize>,
    /// Emit the ground truth itself as predictions.
    #[arg(long)]
    noise_free: bool,
    /// Slide id prefix.
    #[arg(long, default_value = "synth")]
    prefix: String,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    set: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn annotations_for(dir: &Path, slide_id: &str) -> Result<Annotations> {
    let path = dir.join(format!("{slide_id}.geojson"));
    load_annotations(&path).with_context(|| format!("loading {}", path.display()))
}

fn load_set(path: &Path) -> Result<SlideInstanceSet> {
    read_json(path).with_context(|| format!("loading {}", path.display()))
}

fn eval_slide(set: SlideInstanceSet, annotations: &Path) -> Result<EvalSlide> {
    let a = annotations_for(annotations, &set.slide_id)?;
    Ok(EvalSlide {
        gts: a.gts(),
        ignore: a.ignore(),
        set,
    })
}

fn plan(a: PlanArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let geom = a.slide.geometry()?;
    let thumb = read_thumbnail(&a.thumbnail, &geom.slide_id)?;
    thumb.check_size(cfg.thumbnail_size)?;
    let tiles = plan_tiles(&geom, &aggregate_tissue(&thumb)?, &cfg)?;
    write_tile_plan(&a.out, &tiles)?;
    info!("planned {} tiles", tiles.len());
    Ok(())
}

fn tissue(a: TissueArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let mask: TissueMask = if a.otsu {
        let (w, h, gray) = read_gray8(&a.thumbnail)?;
        let polarity = match a.polarity {
            PolarityArg::Dark => Polarity::TissueDark,
            PolarityArg::Light => Polarity::TissueLight,
        };
        otsu_tissue(&a.slide_id, w, h, &gray, polarity)?
    } else {
        let thumb = read_thumbnail(&a.thumbnail, &a.slide_id)?;
        thumb.check_size(cfg.thumbnail_size)?;
        aggregate_tissue(&thumb)?
    };
    write_tissue_mask(&a.out, &mask)?;
    Ok(())
}

fn merge(a: MergeArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let geom = a.slide.geometry()?;
    let tiles = read_tile_plan(&a.plan)?;
    let (preds, warnings) = read_tile_predictions(&a.predictions, &tiles)?;
    for w in &warnings {
        log::warn!("{w}");
    }
    let set = merge_tiles(&preds, &geom, &cfg)?;
    write_json(&a.out, &set)?;
    info!("{} candidates, {} active", set.candidates.len(), set.active_count());
    Ok(())
}

fn dct_train(a: DctTrainArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let slides = a
        .sets
        .iter()
        .map(|p| eval_slide(load_set(p)?, &a.annotations))
        .collect::<Result<Vec<_>>>()?;
    let data = training_examples(&slides, &cfg)?;
    let params = TrainParams {
        seed: a.seed,
        epochs: a.epochs,
        learning_rate: a.learning_rate,
    };
    let trained = train_dct(&data, &params)?;
    info!(
        "trained on {} examples, loss {:.5} -> {:.5}",
        data.len(),
        trained.loss_trace.first().copied().unwrap_or(f64::NAN),
        trained.model.training_meta.final_loss
    );
    write_json(&a.out, &trained.model)?;
    Ok(())
}

fn dct_apply(a: DctApplyArgs) -> Result<()> {
    let set = load_set(&a.set)?;
    let cfg = set.config.clone();
    let model = a.model.as_deref().map(load_model).transpose()?;
    let annotations = a
        .annotations
        .as_deref()
        .map(|p| load_annotations(p).with_context(|| format!("loading {}", p.display())))
        .transpose()?;
    let (gts, ignore) = annotations.map(|a| (a.gts(), a.ignore())).unzip();
    let truth = gts.as_deref().zip(ignore.as_deref());
    let decisions = decide_thresholds(&a.mode, model.as_ref(), &set, truth, &cfg)?;
    let finished = finish_cascade(set, thresholds_by_class(&decisions), &cfg);
    write_json(&a.out, &finished)?;
    if let Some(p) = &a.decisions {
        let mut buf = Vec::new();
        write_decisions_csv(&decisions, &mut buf)?;
        write_text(p, &String::from_utf8(buf)?)?;
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let mut metrics = Vec::new();
    let mut curves = Vec::new();
    let mut cfg = None;
    for p in &a.sets {
        let set = load_set(p)?;
        let ann = annotations_for(&a.annotations, &set.slide_id)?;
        let (gts, ignore) = (ann.gts(), ann.ignore());
        metrics.extend(evaluate_slide(&set, &gts, &ignore, &set.config)?);
        curves.extend(slide_pr_curves(&set, &gts, &ignore, &set.config)?);
        cfg.get_or_insert(set.config);
    }
    let cfg = cfg.expect("at least one set");
    let report = aggregate_report(metrics, &a.mode, &cfg)?;
    let dir = &a.out_dir;
    let mut csv = Vec::new();
    write_metrics_csv(&report, &mut csv)?;
    write_text(&dir.join("report.csv"), &String::from_utf8(csv)?)?;
    write_text(&dir.join("report.md"), &render_table2(&[(a.mode.as_str(), &report)]))?;
    write_json(&dir.join("report.json"), &report)?;
    let mut pr = Vec::new();
    write_pr_csv(&curves, &mut pr)?;
    write_text(&dir.join("pr_curves.csv"), &String::from_utf8(pr)?)?;
    write_text(&dir.join("pr_curves.svg"), &render_pr_svg(&curves))?;
    print!("{}", render_table2(&[(a.mode.as_str(), &report)]));
    Ok(())
}

fn table1(a: Table1Args) -> Result<()> {
    let cfg = a.config.load()?;
    let model = a.model.as_deref().map(load_model).transpose()?;
    let mut splits = Vec::new();
    for s in &a.splits {
        let Some((name, dir)) = s.split_once('=') else {
            bail!(wsiseg::Error::Config(format!("split {s:?} is not NAME=DIR")));
        };
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .with_context(|| format!("reading {dir}"))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "json"))
            .collect();
        paths.sort();
        let slides = paths
            .iter()
            .map(|p| eval_slide(load_set(p)?, &a.annotations))
            .collect::<Result<Vec<_>>>()?;
        splits.push((name.to_string(), slides));
    }
    let grid = table1_harness(&splits, model.as_ref(), &cfg)?;
    let md = grid.render_markdown();
    write_text(&a.out, &md)?;
    write_json(&a.out.with_extension("json"), &grid)?;
    print!("{md}");
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let counts: [usize; 3] = a.counts.as_slice().try_into().map_err(|_| {
        wsiseg::Error::Config(format!("--counts needs three values, got {}", a.counts.len()))
    })?;
    let template = if a.noise_free {
        SynthParams::noise_free(a.seed, &a.prefix, a.width, a.height, counts)
    } else {
        SynthParams::noisy(a.seed, &a.prefix, a.width, a.height, counts)
    };
    let run = write_synth_dataset(&a.out, &template, a.slides, &cfg)?;
    println!("{}", run.display());
    Ok(())
}

fn export(a: ExportArgs) -> Result<()> {
    let set = load_set(&a.set)?;
    write_text(&a.out, &export_geojson(&set, None))?;
    Ok(())
}

fn run(path: &Path) -> Result<()> {
    let run = load_run_config(path)?;
    let summary = run_pipeline(&run)?;
    if let Some(report) = &summary.report {
        print!("{}", render_table2(&[("run", report)]));
    }
    if let Some(grid) = &summary.sweep {
        print!("{}", grid.render_markdown());
    }
    info!("wrote {} files to {}", summary.manifest.files.len(), run.output_dir().display());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<wsiseg::Error>())
        .map_or(ErrorFamily::Other.exit_code(), |e| e.exit_code()) as u8
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(ErrorFamily::Configuration.exit_code() as u8);
        }
    };
    let result = match cli.cmd {
        Command::Plan(a) => plan(a),
        Command::Tissue(a) => tissue(a),
        Command::Merge(a) => merge(a),
        Command::DctTrain(a) => dct_train(a),
        Command::DctApply(a) => dct_apply(a),
        Command::Eval(a) => eval(a),
        Command::Table1(a) => table1(a),
        Command::Synth(a) => synth(a),
        Command::Export(a) => export(a),
        Command::Run { run_file } => run(&run_file),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Library errors already spell out their causes.
            let mut msg = String::new();
            for cause in e.chain() {
                let text = cause.to_string();
                if !msg.contains(&text) {
                    msg = if msg.is_empty() { text } else { format!("{msg}: {text}") };
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(exit_code(&e))
        }
    }
}
