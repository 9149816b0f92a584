//! `culvert` — command-line front end for the inspection pipeline.
//!
//! Exit codes: 0 on success, 1 for usage/configuration/IO problems, 2 for
//! domain failures (a fit that does not converge, an unplannable ROI, a
//! mission that cannot run against its fixtures).

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use culvert_core::config::{load_config, load_scene, AppConfig};
use culvert_core::cylinder::{self, fit_circle_ransac};
use culvert_core::geometry::RigidTransform;
use culvert_core::mission::{run_mission, schedule_waypoints, synthesize_fixtures};
use culvert_core::roi::{enrich, io as depth_io, DepthImage, EnrichedRoi, RoiProposal};
use culvert_core::sim::{render_depth, SceneConfig};
use culvert_core::viewplan::plan_viewpoints;
use culvert_core::vlm::{self, LiveBackend, ReplayBackend, VlmBackend};
use culvert_core::CulvertModel;
use nalgebra::Vector3;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "culvert", version, about = "Culvert inspection pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PointFormat {
    /// Whitespace-separated `x y z` per line.
    Text,
    /// Packed little-endian f32 triples.
    Binary,
}

#[derive(Clone, Copy, ValueEnum)]
enum DepthFormat {
    /// Two little-endian u32 (width, height) then row-major f32 values.
    Raw,
    /// Grayscale portable float map.
    Pfm,
}

#[derive(Args)]
struct CommonArgs {
    /// TOML config; missing keys fall back to built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write JSON output here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the culvert cross-section circle to a point cloud.
    FitCylinder {
        #[command(flatten)]
        common: CommonArgs,
        /// Point-cloud file, `-` for stdin (text format only).
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "text")]
        format: PointFormat,
        /// Override the RANSAC seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Lift proposal boxes onto the fitted surface using a depth image.
    FuseRoi {
        #[command(flatten)]
        common: CommonArgs,
        /// Depth image file.
        #[arg(long)]
        depth: PathBuf,
        #[arg(long, value_enum, default_value = "raw")]
        depth_format: DepthFormat,
        /// JSON array of proposals.
        #[arg(long)]
        proposals: PathBuf,
        /// Fitted model JSON (as written by fit-cylinder).
        #[arg(long)]
        model: PathBuf,
    },
    /// Plan close-up viewpoints for enriched ROIs.
    PlanViewpoint {
        #[command(flatten)]
        common: CommonArgs,
        /// JSON array of enriched ROIs (as written by fuse-roi).
        #[arg(long)]
        rois: PathBuf,
    },
    /// Run a full simulated mission against a scene and VLM fixtures.
    SimulateMission {
        #[command(flatten)]
        common: CommonArgs,
        /// Scene TOML; falls back to the `[scene]` table of --config.
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Replay-fixture directory.
        #[arg(long)]
        fixtures: Option<PathBuf>,
        /// Author ground-truth fixtures into --fixtures before running.
        #[arg(long)]
        synthesize_fixtures: bool,
        /// Use the live VLM endpoint from the environment instead of replay.
        #[arg(long)]
        live: bool,
        /// Override the scene RNG seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Write per-waypoint depth renders as PNGs into this directory.
        #[arg(long)]
        render_diagnostics: Option<PathBuf>,
    },
    /// Assess one enriched ROI from its close-up references.
    Assess {
        #[command(flatten)]
        common: CommonArgs,
        /// Enriched ROI JSON.
        #[arg(long)]
        roi: PathBuf,
        /// Close-up image reference(s); repeatable.
        #[arg(long = "closeup", required = true)]
        closeups: Vec<String>,
        #[arg(long)]
        fixtures: Option<PathBuf>,
        #[arg(long)]
        live: bool,
    },
    /// Summarize a mission report for reading.
    Report {
        /// Mission report JSON, `-` for stdin.
        #[arg(long)]
        input: PathBuf,
    },
}

enum AppError {
    /// Bad invocation, unreadable input, malformed config. Exit 1.
    Usage(String),
    /// The pipeline itself could not produce a result. Exit 2.
    Domain(String),
}

impl AppError {
    fn usage(e: impl std::fmt::Display) -> Self {
        AppError::Usage(e.to_string())
    }
    fn domain(e: impl std::fmt::Display) -> Self {
        AppError::Domain(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(AppError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(AppError::Domain(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn load_app_config(path: &Option<PathBuf>) -> Result<AppConfig, AppError> {
    match path {
        Some(p) => load_config(p).map_err(AppError::usage),
        None => Ok(AppConfig::default()),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, AppError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| AppError::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| AppError::Usage(format!("{}: {e}", path.display())))
}

fn emit_json<T: serde::Serialize>(value: &T, out: &Option<PathBuf>) -> Result<(), AppError> {
    let text = serde_json::to_string_pretty(value).map_err(AppError::usage);
    let text = text?;
    match out {
        Some(path) => std::fs::write(path, text + "\n")
            .map_err(|e| AppError::Usage(format!("{}: {e}", path.display()))),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn make_backend(live: bool, fixtures: &Option<PathBuf>) -> Result<Box<dyn VlmBackend>, AppError> {
    if live {
        Ok(Box::new(LiveBackend::from_env().map_err(AppError::usage)?))
    } else {
        let dir = fixtures
            .as_ref()
            .ok_or_else(|| AppError::Usage("--fixtures is required unless --live is set".into()))?;
        Ok(Box::new(ReplayBackend::new(dir).map_err(AppError::usage)?))
    }
}

fn run(cli: Cli) -> Result<(), AppError> {
    match cli.command {
        Command::FitCylinder {
            common,
            input,
            format,
            seed,
        } => {
            let cfg = load_app_config(&common.config)?;
            let points = if input.as_os_str() == "-" {
                let mut text = String::new();
                std::io::stdin()
                    .read_to_string(&mut text)
                    .map_err(AppError::usage)?;
                cylinder::io::read_text(text.as_bytes()).map_err(AppError::usage)?
            } else {
                let file = std::fs::File::open(&input)
                    .map_err(|e| AppError::Usage(format!("{}: {e}", input.display())))?;
                match format {
                    PointFormat::Text => cylinder::io::read_text(file).map_err(AppError::usage)?,
                    PointFormat::Binary => {
                        cylinder::io::read_binary(file).map_err(AppError::usage)?
                    }
                }
            };
            let mut ransac = cfg.mission.ransac;
            if let Some(s) = seed {
                ransac.seed = s;
            }
            let (model, inliers) = fit_circle_ransac(&points, &ransac).map_err(AppError::domain)?;
            let n_inliers = inliers.iter().filter(|b| **b).count();
            emit_json(
                &serde_json::json!({
                    "model": model,
                    "n_points": points.len(),
                    "n_inliers": n_inliers,
                }),
                &common.out,
            )
        }

        Command::FuseRoi {
            common,
            depth,
            depth_format,
            proposals,
            model,
        } => {
            let cfg = load_app_config(&common.config)?;
            let file = std::fs::File::open(&depth)
                .map_err(|e| AppError::Usage(format!("{}: {e}", depth.display())))?;
            let depth_image = match depth_format {
                DepthFormat::Raw => depth_io::read_raw(file).map_err(AppError::usage)?,
                DepthFormat::Pfm => {
                    depth_io::read_pfm(std::io::BufReader::new(file)).map_err(AppError::usage)?
                }
            };
            let proposals: Vec<RoiProposal> = read_json(&proposals)?;
            let model: CulvertModel = match read_json::<serde_json::Value>(&model)? {
                // Accept both a bare model and fit-cylinder's envelope.
                v if v.get("model").is_some() => {
                    serde_json::from_value(v["model"].clone()).map_err(AppError::usage)?
                }
                v => serde_json::from_value(v).map_err(AppError::usage)?,
            };
            let mut enriched = Vec::new();
            let mut failures = Vec::new();
            for (i, p) in proposals.iter().enumerate() {
                match enrich(
                    p,
                    &depth_image,
                    &cfg.mission.camera1,
                    &cfg.mission.rig,
                    &model,
                ) {
                    Ok(roi) => enriched.push(roi),
                    Err(e) => {
                        failures.push(serde_json::json!({ "index": i, "reason": e.to_string() }))
                    }
                }
            }
            if enriched.is_empty() && !proposals.is_empty() {
                return Err(AppError::Domain(format!(
                    "none of the {} proposals could be fused: {}",
                    proposals.len(),
                    serde_json::to_string(&failures).unwrap_or_default()
                )));
            }
            emit_json(
                &serde_json::json!({ "rois": enriched, "failures": failures }),
                &common.out,
            )
        }

        Command::PlanViewpoint { common, rois } => {
            let cfg = load_app_config(&common.config)?;
            let rois: Vec<EnrichedRoi> = match read_json::<serde_json::Value>(&rois)? {
                v if v.get("rois").is_some() => {
                    serde_json::from_value(v["rois"].clone()).map_err(AppError::usage)?
                }
                v => serde_json::from_value(v).map_err(AppError::usage)?,
            };
            let batch = plan_viewpoints(
                &rois,
                &cfg.mission.rig,
                &cfg.mission.camera2,
                &cfg.mission.weights,
                &cfg.mission.grid,
            );
            if batch.planned.is_empty() && !rois.is_empty() {
                return Err(AppError::Domain(format!(
                    "no plannable viewpoint for any of the {} ROIs",
                    rois.len()
                )));
            }
            emit_json(&batch, &common.out)
        }

        Command::SimulateMission {
            common,
            scene,
            fixtures,
            synthesize_fixtures: synth,
            live,
            seed,
            render_diagnostics,
        } => {
            let cfg = load_app_config(&common.config)?;
            let mut scene_cfg: SceneConfig = match (&scene, &cfg.scene) {
                (Some(path), _) => load_scene(path).map_err(AppError::usage)?,
                (None, Some(s)) => s.clone(),
                (None, None) => {
                    return Err(AppError::Usage(
                        "no scene: pass --scene or a [scene] table in --config".into(),
                    ))
                }
            };
            if let Some(s) = seed {
                scene_cfg.seed = s;
            }
            if synth {
                let dir = fixtures.as_ref().ok_or_else(|| {
                    AppError::Usage("--synthesize-fixtures needs --fixtures".into())
                })?;
                std::fs::create_dir_all(dir)
                    .map_err(|e| AppError::Usage(format!("{}: {e}", dir.display())))?;
                let replay = ReplayBackend::new(dir).map_err(AppError::usage)?;
                synthesize_fixtures(&cfg.mission, &scene_cfg, &replay).map_err(AppError::domain)?;
            }
            let backend = make_backend(live, &fixtures)?;
            let report = run_mission(&cfg.mission, &scene_cfg, backend.as_ref())
                .map_err(AppError::domain)?;
            if let Some(dir) = render_diagnostics {
                write_diagnostics(&dir, &cfg, &scene_cfg).map_err(AppError::usage)?;
            }
            emit_json(&report, &common.out)
        }

        Command::Assess {
            common,
            roi,
            closeups,
            fixtures,
            live,
        } => {
            let roi: EnrichedRoi = read_json(&roi)?;
            let backend = make_backend(live, &fixtures)?;
            let record =
                vlm::assess(&roi, &closeups, backend.as_ref()).map_err(AppError::domain)?;
            emit_json(&record, &common.out)
        }

        Command::Report { input } => {
            let report: culvert_core::MissionReport = if input.as_os_str() == "-" {
                let mut text = String::new();
                std::io::stdin()
                    .read_to_string(&mut text)
                    .map_err(AppError::usage)?;
                serde_json::from_str(&text).map_err(AppError::usage)?
            } else {
                read_json(&input)?
            };
            print_report(&report);
            Ok(())
        }
    }
}

fn print_report(report: &culvert_core::MissionReport) {
    println!(
        "mission: {} waypoints, {:.1} min simulated",
        report.waypoints.len(),
        report.total_sim_time / 60.0
    );
    for w in &report.waypoints {
        let radius = w
            .fitted_model
            .as_ref()
            .map(|m| format!("{:.3} m", m.radius))
            .unwrap_or_else(|| "fit failed".into());
        println!(
            "  waypoint {:>2} @ x={:>6.2} m  radius {}  proposals {}  visited {}",
            w.index, w.x, radius, w.n_proposals, w.n_visited
        );
    }
    for rec in &report.records {
        use culvert_core::mission::AssessmentState as S;
        let status = match &rec.assessment {
            S::Pending => "pending".to_string(),
            S::Done { record } => {
                let label = serde_json::to_string(&record.result)
                    .unwrap_or_default()
                    .trim_matches('"')
                    .to_string();
                match &record.description {
                    Some(d) => format!("{label}: {d}"),
                    None => label,
                }
            }
            S::Failed { reason } => format!("failed: {reason}"),
        };
        println!(
            "  roi w{}r{} \"{}\" -> {}",
            rec.waypoint_index, rec.roi_index, rec.proposal.reason, status
        );
    }
    if !report.warnings.is_empty() {
        println!("warnings:");
        for w in &report.warnings {
            println!("  {w}");
        }
    }
}

/// Normalized grayscale PNG of the camera-1 depth frame at every waypoint.
fn write_diagnostics(
    dir: &Path,
    cfg: &AppConfig,
    scene: &SceneConfig,
) -> Result<(), std::io::Error> {
    std::fs::create_dir_all(dir)?;
    let m = &cfg.mission;
    for (w, &wx) in schedule_waypoints(scene.length, m.waypoint_spacing)
        .iter()
        .enumerate()
    {
        let pose =
            RigidTransform::from_translation(Vector3::new(wx, 0.0, 0.0)).compose(&m.rig.t_sc1);
        let frame = match render_depth(scene, &pose, &m.camera1) {
            Ok(f) => f,
            Err(e) => return Err(std::io::Error::other(e.to_string())),
        };
        dump_depth_png(&frame.depth, &dir.join(format!("waypoint-{w:03}.png")))?;
    }
    Ok(())
}

fn dump_depth_png(depth: &DepthImage, path: &Path) -> Result<(), std::io::Error> {
    let finite: Vec<f32> = depth
        .values
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .collect();
    let (lo, hi) = finite
        .iter()
        .fold((f32::MAX, f32::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let pixels: Vec<u8> = depth
        .values
        .iter()
        .map(|&v| {
            if v.is_finite() {
                (255.0 * (v - lo) / span) as u8
            } else {
                0
            }
        })
        .collect();
    let img = image::GrayImage::from_raw(depth.width, depth.height, pixels)
        .expect("buffer matches dimensions");
    img.save(path)
        .map_err(|e| std::io::Error::other(e.to_string()))
}
