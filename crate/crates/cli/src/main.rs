//! `volsplat` command-line front end.

mod overrides;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use volsplat_core::gaussian::{export_ply, import_ply};
use volsplat_core::geometry::CameraFile;
use volsplat_core::pipeline::{evaluate, CONFIG_SCHEMA_VERSION};
use volsplat_core::render::render_with;
use volsplat_core::synth::{hold_out, read_scene, synthesize, view_stem, write_scene, SceneSpec};
use volsplat_core::{run_pipeline, Camera, Image, PipelineConfig};

fn long_version() -> String {
    format!("{} (config schema {CONFIG_SCHEMA_VERSION})", volsplat_core::VERSION)
}

#[derive(Parser)]
#[command(name = "volsplat", version = long_version(), about = "Voxel-aligned feed-forward Gaussian splatting")]
struct Cli {
    /// Worker threads; 0 picks one per core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene: views, cameras, depths and ground truth.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct Gaussians from a scene directory.
    Run(RunArgs),
    /// Score a Gaussian set against target views.
    Eval {
        #[arg(long)]
        gaussians: PathBuf,
        #[arg(long)]
        targets: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Pipeline config supplying render and loss settings.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Render a Gaussian set from every camera in a directory.
    Render {
        #[arg(long)]
        gaussians: PathBuf,
        /// Directory of `view_NNN.json` cameras.
        #[arg(long)]
        cameras: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = ImageFormat::Ppm)]
        format: ImageFormat,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print count, bounding box and opacity histogram of a PLY as JSON.
    Summarize {
        #[arg(long)]
        gaussians: PathBuf,
    },
    /// Convert an image between PPM and PNG, chosen by extension.
    Convert {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    ablate: Option<Ablation>,
    #[arg(long)]
    voxel_size: Option<f64>,
    /// Keep the last M views as evaluation targets.
    #[arg(long, default_value_t = 0)]
    hold_out: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Ablation {
    NoDecoder,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum ImageFormat {
    Ppm,
    Png,
}

/// Exit status 2 for bad input, 1 for failures while running.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

type CmdResult<T = ()> = Result<T, Failure>;

trait Classify<T> {
    fn usage(self, what: &str) -> CmdResult<T>;
    fn runtime(self, what: &str) -> CmdResult<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn usage(self, what: &str) -> CmdResult<T> {
        self.map_err(|e| Failure::Usage(e.into().context(what.to_string())))
    }
    fn runtime(self, what: &str) -> CmdResult<T> {
        self.map_err(|e| Failure::Runtime(e.into().context(what.to_string())))
    }
}

/// Pipeline errors: bad views or config are the caller's fault, anything
/// else inside a stage is a runtime failure.
fn classify_pipeline(e: volsplat_core::Error) -> Failure {
    let usage = match &e {
        volsplat_core::Error::Stage { stage, source } => *stage == "input" || source.is_usage(),
        other => other.is_usage(),
    };
    let e = anyhow::Error::new(e);
    if usage {
        Failure::Usage(e)
    } else {
        Failure::Runtime(e)
    }
}

fn main() -> ExitCode {
    let raw: Vec<String> = std::env::args().collect();
    let (args, dotted) = match overrides::extract(raw) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(args);
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        eprintln!("error: thread pool: {e}");
        return ExitCode::from(1);
    }
    let result = match cli.command {
        Command::Run(args) => cmd_run(&args, &dotted),
        _ if !dotted.is_empty() => Err(Failure::Usage(anyhow!("config overrides only apply to `run`"))),
        Command::Synth { spec, out } => cmd_synth(&spec, &out),
        Command::Eval {
            gaussians,
            targets,
            out,
            config,
        } => cmd_eval(&gaussians, &targets, out.as_deref(), config.as_deref()),
        Command::Render {
            gaussians,
            cameras,
            out,
            format,
            config,
        } => cmd_render(&gaussians, &cameras, &out, format, config.as_deref()),
        Command::Summarize { gaussians } => cmd_summarize(&gaussians),
        Command::Convert { input, output } => cmd_convert(&input, &output),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Prints to stdout, ignoring a closed pipe.
macro_rules! say {
    ($($t:tt)*) => {{
        use std::io::Write;
        let _ = write!(std::io::stdout(), $($t)*);
    }};
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CmdResult {
    let mut text = serde_json::to_string_pretty(value).runtime("serializing output")?;
    text.push('\n');
    fs::write(path, text).runtime(&format!("writing {}", path.display()))
}

fn read_json(path: &Path) -> CmdResult<Value> {
    let text = fs::read_to_string(path).usage(&format!("reading {}", path.display()))?;
    serde_json::from_str(&text).usage(&format!("parsing {}", path.display()))
}

fn load_config(path: Option<&Path>) -> CmdResult<PipelineConfig> {
    let value = match path {
        Some(p) => read_json(p)?,
        None => json!({}),
    };
    PipelineConfig::from_value(value).usage("invalid config")
}

fn cmd_synth(spec_path: &Path, out: &Path) -> CmdResult {
    let value = read_json(spec_path)?;
    let spec: SceneSpec = serde_json::from_value(value).usage("invalid scene spec")?;
    let scene = synthesize(&spec).usage("invalid scene spec")?;
    let manifest = write_scene(out, &scene.views, scene.ground_truth.as_ref()).runtime("writing scene")?;
    say!(
        "wrote {} views ({} files) to {}\n",
        manifest.views,
        manifest.files.len(),
        out.display()
    );
    Ok(())
}

fn cmd_run(args: &RunArgs, dotted: &[(String, String)]) -> CmdResult {
    let mut value = match &args.config {
        Some(p) => read_json(p)?,
        None => json!({}),
    };
    for (key, raw) in dotted {
        overrides::set_path(&mut value, key, overrides::parse_value(raw)).usage("bad override")?;
    }
    if let Some(v) = args.voxel_size {
        overrides::set_path(&mut value, "voxel.size", json!(v)).usage("bad override")?;
    }
    if let Some(Ablation::NoDecoder) = args.ablate {
        overrides::set_path(&mut value, "unet.enabled", json!(false)).usage("bad override")?;
    }
    let cfg = PipelineConfig::from_value(value).usage("invalid config")?;

    let views = read_scene(&args.scene).usage(&format!("reading scene {}", args.scene.display()))?;
    if views.is_empty() {
        return Err(Failure::Usage(anyhow!("no views found in {}", args.scene.display())));
    }
    let (inputs, targets) = if args.hold_out > 0 {
        hold_out(&views, args.hold_out).usage("--hold-out")?
    } else {
        (views.clone(), Vec::new())
    };
    let output = run_pipeline(&inputs, &cfg).map_err(classify_pipeline)?;

    let renders_dir = args.out.join("renders");
    fs::create_dir_all(&renders_dir).runtime(&format!("creating {}", renders_dir.display()))?;
    export_ply(&output.gaussians, Some(inputs.len()), &args.out.join("gaussians.ply")).runtime("writing gaussians")?;
    write_json(&args.out.join("config.json"), &cfg)?;
    write_json(&args.out.join("diagnostics.json"), &output.diagnostics)?;
    let timings: Vec<Value> = output
        .diagnostics
        .timings
        .stages
        .iter()
        .map(|(stage, secs)| json!({"stage": stage, "seconds": secs}))
        .collect();
    write_json(&args.out.join("timings.json"), &timings)?;

    let opts = cfg.render.options();
    for (i, view) in views.iter().enumerate() {
        let img = render_with(&output.gaussians, &view.camera, &opts).image.rgb;
        img.write_ppm(&renders_dir.join(format!("{}.ppm", view_stem(i))))
            .runtime("writing render")?;
    }
    let d = &output.diagnostics;
    say!(
        "{} views, {} points, {} voxels, {} gaussians, pgs {:.2}\n",
        d.input_views,
        d.points,
        d.occupied_voxels,
        d.gaussians,
        d.pgs
    );
    if !targets.is_empty() {
        let report = evaluate(&output.gaussians, &targets, Some(inputs.len()), &cfg.render, &cfg.loss)
            .map_err(classify_pipeline)?;
        say!("{}", report.table());
        write_json(&args.out.join("report.json"), &report)?;
    }
    Ok(())
}

fn cmd_eval(gaussians: &Path, targets: &Path, out: Option<&Path>, config: Option<&Path>) -> CmdResult {
    let cfg = load_config(config)?;
    let ply = import_ply(gaussians).usage(&format!("reading {}", gaussians.display()))?;
    let views = read_scene(targets).usage(&format!("reading targets {}", targets.display()))?;
    if views.is_empty() {
        return Err(Failure::Usage(anyhow!("no target views in {}", targets.display())));
    }
    let report = evaluate(&ply.set, &views, ply.input_views, &cfg.render, &cfg.loss).map_err(classify_pipeline)?;
    say!("{}", report.table());
    if let Some(path) = out {
        write_json(path, &report)?;
    }
    Ok(())
}

/// `view_*.json` cameras in name order.
fn read_cameras(dir: &Path) -> anyhow::Result<Vec<(String, Camera)>> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok()?.file_name().into_string().ok())
        .filter(|n| n.starts_with("view_") && n.ends_with(".json"))
        .collect();
    names.sort();
    names
        .into_iter()
        .map(|name| {
            let path = dir.join(&name);
            let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let file: CameraFile =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            let cam = Camera::try_from(file).with_context(|| format!("camera {}", path.display()))?;
            Ok((name.trim_end_matches(".json").to_string(), cam))
        })
        .collect()
}

fn cmd_render(gaussians: &Path, cameras: &Path, out: &Path, format: ImageFormat, config: Option<&Path>) -> CmdResult {
    let cfg = load_config(config)?;
    let ply = import_ply(gaussians).usage(&format!("reading {}", gaussians.display()))?;
    let cams = read_cameras(cameras).usage("reading cameras")?;
    if cams.is_empty() {
        return Err(Failure::Usage(anyhow!("no cameras in {}", cameras.display())));
    }
    fs::create_dir_all(out).runtime(&format!("creating {}", out.display()))?;
    let opts = cfg.render.options();
    for (stem, cam) in &cams {
        let img = render_with(&ply.set, cam, &opts).image.rgb;
        match format {
            ImageFormat::Ppm => img
                .write_ppm(&out.join(format!("{stem}.ppm")))
                .runtime("writing render")?,
            ImageFormat::Png => save_png(&img, &out.join(format!("{stem}.png"))).runtime("writing render")?,
        }
    }
    say!("rendered {} views to {}\n", cams.len(), out.display());
    Ok(())
}

fn cmd_summarize(gaussians: &Path) -> CmdResult {
    let ply = import_ply(gaussians).usage(&format!("reading {}", gaussians.display()))?;
    let summary = ply.set.summary();
    let value = json!({
        "count": summary.count,
        "sh_degree": ply.set.sh_degree,
        "input_views": ply.input_views,
        "pgs": ply.input_views.map(|n| summary.count as f64 / n as f64),
        "bbox": summary.bbox,
        "opacity_histogram": summary.opacity_histogram,
    });
    say!(
        "{}\n",
        serde_json::to_string_pretty(&value).runtime("serializing summary")?
    );
    Ok(())
}

fn save_png(img: &Image, path: &Path) -> anyhow::Result<()> {
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, img.to_rgb8())
        .ok_or_else(|| anyhow!("image buffer size mismatch"))?;
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

fn is_png(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

fn cmd_convert(input: &Path, output: &Path) -> CmdResult {
    let img = if is_png(input) {
        let rgb = image::open(input)
            .usage(&format!("reading {}", input.display()))?
            .to_rgb8();
        Image::from_rgb8(rgb.width() as usize, rgb.height() as usize, rgb.as_raw()).usage("decoding png")?
    } else {
        Image::read_ppm(input).usage(&format!("reading {}", input.display()))?
    };
    if is_png(output) {
        save_png(&img, output).runtime(&format!("writing {}", output.display()))
    } else {
        img.write_ppm(output).runtime(&format!("writing {}", output.display()))
    }
}
