//! Command-line front end: track a sequence, generate a synthetic one,
//! evaluate results against ground truth, or sweep the four model variants.
//!
//! Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 runtime
//! failure.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use kptrack::config::{RunConfig, SynthFlags, TrackerFlags};
use kptrack::error::{Error, Result};
use kptrack::eval::{score_s, success_metrics, FrameScore};
use kptrack::geometry::Homography;
use kptrack::image::{load_image, GrayImage};
use kptrack::synth::{generate_sequence, ground_truth_path, GroundTruth};
use kptrack::tracker::{Outcome, TrackerState, Variant};

#[derive(Parser)]
#[command(
    name = "kptrack",
    version,
    about = "Planar keypoint tracking with online multi-task structured learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Track a template through a directory of frames
    Track(TrackArgs),
    /// Generate a ground-truthed synthetic sequence from a template
    Synth(SynthArgs),
    /// Score a results file against ground truth
    Eval(EvalArgs),
    /// Run all four model variants over one sequence and compare
    Ablate(AblateArgs),
}

#[derive(Parser)]
struct TrackArgs {
    /// Template image (pgm or png)
    template: PathBuf,
    /// Directory of frame images, consumed in filename order
    sequence_dir: PathBuf,
    /// Output directory for results.csv, diagnostics.csv, model.snap
    #[arg(short, long)]
    out_dir: PathBuf,
    /// TOML configuration file; flags below override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write 0.000 in the wall-clock column for reproducible output bytes
    #[arg(long)]
    fixed_timing: bool,
    #[command(flatten)]
    tracker: TrackerFlags,
}

#[derive(Parser)]
struct SynthArgs {
    /// Template image to warp into each frame
    template: PathBuf,
    /// Output directory for frames and ground_truth.txt
    #[arg(short, long)]
    out_dir: PathBuf,
    /// TOML configuration file; flags below override its values
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    synth: SynthFlags,
}

#[derive(Parser)]
struct EvalArgs {
    /// results.csv produced by the track subcommand
    results: PathBuf,
    /// Ground-truth file (one line per frame: index + 9 entries)
    ground_truth: PathBuf,
    /// Template image the run tracked (fixes the corner geometry)
    #[arg(long)]
    template: PathBuf,
    /// Where to write the per-frame metrics CSV
    #[arg(short, long, default_value = "metrics.csv")]
    out: PathBuf,
}

#[derive(Parser)]
struct AblateArgs {
    /// Template image (pgm or png)
    template: PathBuf,
    /// Directory of frame images, consumed in filename order
    sequence_dir: PathBuf,
    /// Output directory for ablation.csv and per-variant results
    #[arg(short, long)]
    out_dir: PathBuf,
    /// Ground-truth file; defaults to ground_truth.txt in the sequence dir
    #[arg(long)]
    ground_truth: Option<PathBuf>,
    /// TOML configuration file; flags below override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write 0.000 in the wall-clock column for reproducible output bytes
    #[arg(long)]
    fixed_timing: bool,
    #[command(flatten)]
    tracker: TrackerFlags,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Track(args) => cmd_track(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate(args) => cmd_ablate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_class(&e))
        }
    }
}

fn exit_class(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidInput(_) => 2,
        Error::Io(_) | Error::UnsupportedImage(_) => 3,
        _ => 4,
    }
}

/// Frame images in the directory, in filename order.
fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut frames: Vec<PathBuf> = std::fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("pgm") | Some("png")
            )
        })
        .collect();
    frames.sort();
    if frames.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no .pgm or .png frames in {}",
            dir.display()
        )));
    }
    Ok(frames)
}

struct RunOutput {
    results_csv: String,
    diagnostics_csv: String,
    snapshot: Vec<u8>,
    outcomes: Vec<Outcome>,
}

/// The tracking loop shared by track and ablate. CSV columns are documented
/// in the README; no header rows, one row per frame.
fn run_tracking(
    template: &GrayImage,
    frames: &[PathBuf],
    config: &kptrack::tracker::TrackerConfig,
    fixed_timing: bool,
) -> Result<RunOutput> {
    let mut state = TrackerState::init(template, config)?;
    let mut results = String::new();
    let mut diagnostics = String::new();
    let mut outcomes = Vec::with_capacity(frames.len());
    for (i, path) in frames.iter().enumerate() {
        let frame = load_image(path)?;
        let start = Instant::now();
        let fr = state.process_frame(&frame)?;
        let ms = if fixed_timing {
            0.0
        } else {
            start.elapsed().as_secs_f64() * 1e3
        };
        match &fr.outcome {
            Outcome::Detected {
                y,
                inlier_count,
                score,
            } => {
                write!(results, "{i},detected").unwrap();
                for e in y.entries() {
                    write!(results, ",{e}").unwrap();
                }
                writeln!(results, ",{inlier_count},{score},{ms:.3}").unwrap();
            }
            Outcome::Lost => {
                writeln!(results, "{i},lost,0,0,0,0,0,0,0,0,0,0,0,{ms:.3}").unwrap();
            }
        }
        match &fr.learn {
            Some(d) => writeln!(
                diagnostics,
                "{i},{},{},{},{},{},{}",
                d.outer_iters,
                d.objective_start,
                d.objective_end,
                d.j_end,
                d.alpha_count,
                d.beta_count
            )
            .unwrap(),
            None => writeln!(diagnostics, "{i},0,0,0,0,0,0").unwrap(),
        }
        outcomes.push(fr.outcome);
    }
    Ok(RunOutput {
        results_csv: results,
        diagnostics_csv: diagnostics,
        snapshot: state.snapshot(),
        outcomes,
    })
}

fn cmd_track(args: TrackArgs) -> Result<()> {
    let mut run = RunConfig::load(args.config.as_deref())?;
    run.apply_tracker_flags(&args.tracker);
    run.output.fixed_timing |= args.fixed_timing;
    let config = run.tracker_config()?;

    let template = load_image(&args.template)?;
    let frames = list_frames(&args.sequence_dir)?;
    std::fs::create_dir_all(&args.out_dir)?;
    run.echo(&args.out_dir)?;

    let out = run_tracking(&template, &frames, &config, run.output.fixed_timing)?;
    std::fs::write(args.out_dir.join("results.csv"), &out.results_csv)?;
    std::fs::write(args.out_dir.join("diagnostics.csv"), &out.diagnostics_csv)?;
    std::fs::write(args.out_dir.join("model.snap"), &out.snapshot)?;

    let detected = out.outcomes.iter().filter(|o| o.is_detected()).count();
    println!(
        "tracked {} frames, detected {}, lost {}",
        frames.len(),
        detected,
        frames.len() - detected
    );
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let mut run = RunConfig::load(args.config.as_deref())?;
    run.apply_synth_flags(&args.synth);
    let spec = run.synth_spec()?;

    let template = load_image(&args.template)?;
    std::fs::create_dir_all(&args.out_dir)?;
    run.echo(&args.out_dir)?;
    let gt = generate_sequence(&template, &spec, &args.out_dir)?;
    println!("wrote {} frames to {}", gt.len(), args.out_dir.display());
    Ok(())
}

/// One results.csv row: frame index, outcome, 9 homography entries, inlier
/// count, compatibility score, wall-clock ms.
fn parse_results(path: &Path) -> Result<Vec<Option<Homography>>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 14 {
            return Err(Error::InvalidInput(format!(
                "results line {lineno}: expected 14 fields, got {}",
                fields.len()
            )));
        }
        let idx: usize = fields[0].parse().map_err(|_| {
            Error::InvalidInput(format!("results line {lineno}: bad frame index"))
        })?;
        if idx != lineno {
            return Err(Error::InvalidInput(format!(
                "results line {lineno} has frame index {idx}"
            )));
        }
        match fields[1] {
            "lost" => rows.push(None),
            "detected" => {
                let mut e = [0.0f64; 9];
                for (k, f) in fields[2..11].iter().enumerate() {
                    e[k] = f.parse().map_err(|_| {
                        Error::InvalidInput(format!("results line {lineno}: bad entry"))
                    })?;
                }
                rows.push(Some(Homography::from_entries(&e)));
            }
            other => {
                return Err(Error::InvalidInput(format!(
                    "results line {lineno}: unknown outcome '{other}'"
                )))
            }
        }
    }
    Ok(rows)
}

fn score_results(
    rows: &[Option<Homography>],
    gt: &GroundTruth,
    template_bounds: (usize, usize),
) -> Result<Vec<FrameScore>> {
    if rows.len() != gt.len() {
        return Err(Error::InvalidInput(format!(
            "results have {} frames but ground truth has {}",
            rows.len(),
            gt.len()
        )));
    }
    Ok(rows
        .iter()
        .zip(&gt.entries)
        .map(|(row, y_star)| match row {
            Some(y) => FrameScore::Scored(score_s(y, y_star, template_bounds)),
            None => FrameScore::Lost,
        })
        .collect())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let template = load_image(&args.template)?;
    let rows = parse_results(&args.results)?;
    let gt = GroundTruth::load(&args.ground_truth)?;
    let scores = score_results(&rows, &gt, (template.width(), template.height()))?;
    let metrics = success_metrics(&scores)?;

    let mut csv = String::new();
    for (i, (score, acc)) in scores.iter().zip(&metrics.accumulated_false).enumerate() {
        let s = match score {
            FrameScore::Scored(s) => *s,
            FrameScore::Lost => f64::INFINITY,
        };
        writeln!(csv, "{i},{s},{},{acc}", u8::from(score.is_success())).unwrap();
    }
    std::fs::write(&args.out, csv)?;

    println!(
        "success_rate={} false_frames={}",
        metrics.success_rate,
        metrics.false_frames()
    );
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let mut run = RunConfig::load(args.config.as_deref())?;
    run.apply_tracker_flags(&args.tracker);
    run.output.fixed_timing |= args.fixed_timing;

    let template = load_image(&args.template)?;
    let frames = list_frames(&args.sequence_dir)?;
    let gt_path = args
        .ground_truth
        .clone()
        .unwrap_or_else(|| ground_truth_path(&args.sequence_dir));
    let gt = GroundTruth::load(&gt_path)?;
    std::fs::create_dir_all(&args.out_dir)?;
    run.echo(&args.out_dir)?;

    let bounds = (template.width(), template.height());
    let mut table = String::new();
    for variant in [Variant::Ssvm, Variant::Sml, Variant::Smt, Variant::Smm] {
        let mut vrun = run.clone();
        vrun.tracker.variant = variant.name().to_string();
        let config = vrun.tracker_config()?;
        let out = run_tracking(&template, &frames, &config, run.output.fixed_timing)?;

        let vdir = args.out_dir.join(variant.name());
        std::fs::create_dir_all(&vdir)?;
        std::fs::write(vdir.join("results.csv"), &out.results_csv)?;
        std::fs::write(vdir.join("diagnostics.csv"), &out.diagnostics_csv)?;
        std::fs::write(vdir.join("model.snap"), &out.snapshot)?;

        let rows = parse_results(&vdir.join("results.csv"))?;
        let scores = score_results(&rows, &gt, bounds)?;
        let metrics = success_metrics(&scores)?;
        let row = format!(
            "{},{},{}",
            variant.name(),
            metrics.success_rate,
            metrics.false_frames()
        );
        println!("{row}");
        writeln!(table, "{row}").unwrap();
    }
    std::fs::write(args.out_dir.join("ablation.csv"), table)?;
    Ok(())
}
