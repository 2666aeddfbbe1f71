//! `evbridge`: event synthesis from images and flows, oracle and gradient
//! checks, and the toy adaptation experiment.
//!
//! Exit codes: 0 on success, 1 when inputs or checks fail, 2 on usage
//! errors (unknown flags or values).

use clap::{Args, Parser, Subcommand};
use evbridge_core::events::DEFAULT_CONTRAST;
use evbridge_core::field::DEFAULT_LOG_EPS;
use evbridge_core::io::{
    histogram_preview, load_pgm, load_vector_field, save_histogram, save_pgm, save_vector_field,
    suffixed,
};
use evbridge_core::losses::LossReport;
use evbridge_core::scenes::{compare_model_with_oracle, OracleScene, SceneKind};
use evbridge_core::{
    augment_flow, count_events, log_intensity_change, log_transform, spatial_gradient,
    ContrastThreshold, EventHistogram, FlowSampler, FlowSamplerSpec, VectorField,
};
use evbridge_uda::experiment::{load_generator, run_to_dir, CHECKPOINT_FILE};
use evbridge_uda::{make_data, PipelineConfig};
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "evbridge",
    version,
    about = "Image-to-event synthesis and a toy adaptation experiment"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Pipeline config (JSON); every field is optional.
    #[arg(long, value_name = "JSON")]
    config: Option<PathBuf>,
    /// Seed overriding the config.
    #[arg(long, env = "EVBRIDGE_SEED")]
    seed: Option<u64>,
}

impl Common {
    fn pipeline(&self) -> Result<PipelineConfig, Failure> {
        let mut c = match &self.config {
            Some(p) => PipelineConfig::load(p).map_err(fail)?,
            None => PipelineConfig::default(),
        };
        if let Some(s) = self.seed {
            c.seed = s;
        }
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize an event histogram from an image and an optical flow.
    Translate {
        #[command(flatten)]
        common: Common,
        /// Input intensity image (binary PGM).
        #[arg(long)]
        image: PathBuf,
        /// Flow prefix: reads `<PREFIX>_u.pfm` and `<PREFIX>_v.pfm`.
        #[arg(
            long,
            value_name = "PREFIX",
            conflicts_with = "sample_flow",
            required_unless_present = "sample_flow"
        )]
        flow: Option<PathBuf>,
        /// Flow sampler spec: inline JSON or a JSON file.
        #[arg(long, value_name = "SPEC")]
        sample_flow: Option<String>,
        /// Contrast threshold (default 0.2, or the config's value).
        #[arg(long)]
        contrast: Option<f64>,
        /// Time window the flow is integrated over.
        #[arg(long, default_value_t = 1.0)]
        dt: f64,
        /// Trained checkpoint; adds the learned refinement residual.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Output prefix for `_pos.pfm`, `_neg.pfm` and `_preview.pgm`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Replace flow directions with sampled target-domain directions.
    Augment {
        #[command(flatten)]
        common: Common,
        /// Flow prefix to augment.
        #[arg(long, value_name = "PREFIX")]
        flow: PathBuf,
        /// Direction field prefix.
        #[arg(
            long,
            value_name = "PREFIX",
            conflicts_with = "sample_flow",
            required_unless_present = "sample_flow"
        )]
        dirs: Option<PathBuf>,
        /// Flow sampler spec for the directions: inline JSON or a JSON file.
        #[arg(long, value_name = "SPEC")]
        sample_flow: Option<String>,
        /// Output prefix for `_u.pfm` and `_v.pfm`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify the composite weighting of every report in a loss log.
    Losses {
        #[command(flatten)]
        common: Common,
        /// JSON-lines loss log written by `train`.
        #[arg(long)]
        report: PathBuf,
    },
    /// Compare the linearized event model with the two-frame oracle.
    OracleCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scene: SceneKind,
        /// Translation in pixels as `u,v`.
        #[arg(long, value_parser = parse_motion, allow_hyphen_values = true, default_value = "1,0")]
        motion: (f64, f64),
        #[arg(long, default_value_t = DEFAULT_CONTRAST)]
        contrast: f64,
    },
    /// Finite-difference checks of every primitive and of the full pipeline.
    GradCheck {
        #[command(flatten)]
        common: Common,
        /// Random points per primitive and sampled coordinates per objective.
        #[arg(long, default_value_t = 20)]
        points: usize,
        /// Largest accepted relative error.
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
    },
    /// Write the synthetic training and test data to a directory.
    MakeData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the pipeline; writes checkpoint, loss log and metrics.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Override the number of generator steps.
        #[arg(long)]
        iterations: Option<u64>,
    },
    /// Accuracy of a checkpoint on the held-out labeled events.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
    },
}

/// Error carrying the process exit code.
struct Failure {
    code: u8,
    message: String,
}

fn fail(e: impl Display) -> Failure {
    Failure {
        code: 1,
        message: e.to_string(),
    }
}

fn parse_motion(s: &str) -> Result<(f64, f64), String> {
    let (u, v) = s
        .split_once(',')
        .ok_or_else(|| format!("expected u,v, got '{s}'"))?;
    let p = |a: &str| a.trim().parse::<f64>().map_err(|e| format!("'{a}': {e}"));
    Ok((p(u)?, p(v)?))
}

fn flow_spec(spec: &str, seed: Option<u64>) -> Result<FlowSamplerSpec, Failure> {
    let text = if spec.trim_start().starts_with('{') {
        spec.to_string()
    } else {
        std::fs::read_to_string(spec).map_err(|e| fail(format!("{spec}: {e}")))?
    };
    let mut s: FlowSamplerSpec =
        serde_json::from_str(&text).map_err(|e| fail(format!("flow spec: {e}")))?;
    if let Some(seed) = seed {
        s.seed = seed;
    }
    s.validate().map_err(fail)?;
    Ok(s)
}

fn sampled_field(
    spec: &str,
    seed: Option<u64>,
    w: usize,
    h: usize,
) -> Result<VectorField, Failure> {
    Ok(FlowSampler::new(flow_spec(spec, seed)?)
        .map_err(fail)?
        .next_field(w, h))
}

fn translate(
    common: &Common,
    image: &Path,
    flow: Option<&Path>,
    sample: Option<&str>,
    contrast: Option<f64>,
    dt: f64,
    ckpt: Option<&Path>,
    out: &Path,
) -> Result<(), Failure> {
    let cfg = match &common.config {
        Some(_) => Some(common.pipeline()?),
        None => None,
    };
    let c = match contrast {
        Some(c) => c,
        None => {
            let c = cfg.as_ref().map_or(DEFAULT_CONTRAST, |c| c.contrast);
            eprintln!("contrast threshold not given; using {c}");
            c
        }
    };
    let eps = cfg.as_ref().map_or(DEFAULT_LOG_EPS, |c| c.log_eps);
    let img = load_pgm(image).map_err(fail)?;
    let v = match (flow, sample) {
        (Some(p), _) => load_vector_field(p).map_err(fail)?,
        (None, Some(spec)) => sampled_field(spec, common.seed, img.width(), img.height())?,
        (None, None) => unreachable!("clap requires one flow source"),
    };
    if v.shape() != img.shape() {
        return Err(fail(format!(
            "flow is {}x{} but {} is {}x{}",
            v.width(),
            v.height(),
            image.display(),
            img.width(),
            img.height()
        )));
    }
    let grad = spatial_gradient(&log_transform(&img, eps).map_err(fail)?).map_err(fail)?;
    let dlog = log_intensity_change(&grad, &v, dt).map_err(fail)?;
    let counts = count_events(&dlog, ContrastThreshold::new(c).map_err(fail)?);
    let mut hist = EventHistogram::from_signed_count(&counts);
    if let Some(ckpt) = ckpt {
        let cfg = cfg.unwrap_or_default();
        let gen = load_generator(ckpt).map_err(fail)?;
        hist = evbridge_uda::pipeline::refine_histogram(&cfg, &gen, &img, &hist, cfg.seed)
            .map_err(fail)?;
    }
    save_histogram(out, &hist).map_err(fail)?;
    save_pgm(&suffixed(out, "_preview.pgm"), &histogram_preview(&hist)).map_err(fail)?;
    println!(
        "{} events ({} ON, {} OFF)",
        hist.total(),
        hist.pos().iter().sum::<f64>(),
        hist.neg().iter().sum::<f64>()
    );
    Ok(())
}

fn losses(report: &Path) -> Result<(), Failure> {
    let text =
        std::fs::read_to_string(report).map_err(|e| fail(format!("{}: {e}", report.display())))?;
    let mut n = 0;
    for (i, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let r: LossReport = serde_json::from_str(line)
            .map_err(|e| fail(format!("{}:{}: {e}", report.display(), i + 1)))?;
        r.check_weighting()
            .map_err(|e| fail(format!("{}:{}: {e}", report.display(), i + 1)))?;
        n += 1;
    }
    if n == 0 {
        return Err(fail(format!("{}: no reports", report.display())));
    }
    println!("{n} reports; composite_gen = lat_gen + recons_gen + cycle + 2*augm + grad_coverage + task + smooth holds");
    Ok(())
}

fn oracle_check(scene: SceneKind, motion: (f64, f64), contrast: f64) -> Result<(), Failure> {
    let c = ContrastThreshold::new(contrast).map_err(fail)?;
    let r = compare_model_with_oracle(&OracleScene::new(scene), motion, c, DEFAULT_LOG_EPS)
        .map_err(fail)?;
    println!(
        "scene {scene} motion ({}, {}) contrast {contrast}: max discrepancy {} (smooth {} over {} px, kink {} over {} px)",
        motion.0, motion.1, r.max_discrepancy(), r.smooth_discrepancy, r.smooth_pixels, r.kink_discrepancy, r.kink_pixels
    );
    if r.passes() {
        println!("PASS");
        Ok(())
    } else {
        Err(Failure {
            code: 1,
            message: "FAIL: discrepancy above tolerance".into(),
        })
    }
}

fn grad_check(common: &Common, points: usize, tolerance: f64) -> Result<(), Failure> {
    let cfg = common.pipeline()?;
    let mut ok = true;
    println!("{:<24} {:>7} {:>12}", "primitive", "coords", "max rel err");
    for r in evbridge_autodiff::primitive_suite(cfg.seed, points, 1e-5).map_err(fail)? {
        ok &= r.max_rel_error < tolerance;
        println!("{:<24} {:>7} {:>12.3e}", r.name, r.coords, r.max_rel_error);
    }
    let p = evbridge_uda::check::pipeline_grad_check(&cfg, points, cfg.seed).map_err(fail)?;
    for (name, r) in [
        ("pipeline (generator)", &p.generator),
        ("pipeline (discriminator)", &p.discriminator),
    ] {
        ok &= r.max_rel_error < tolerance;
        let worst = r
            .worst
            .as_ref()
            .map_or(String::new(), |(n, i)| format!(", worst at {n}[{i}]"));
        println!(
            "{:<24} {:>7} {:>12.3e}  ({} points, {} coordinates at kinks skipped{worst})",
            name, r.coords_checked, r.max_rel_error, p.points, r.coords_skipped
        );
    }
    if ok {
        Ok(())
    } else {
        Err(Failure {
            code: 1,
            message: format!("relative error above {tolerance}"),
        })
    }
}

fn make_data_cmd(common: &Common, out: &Path) -> Result<(), Failure> {
    let cfg = common.pipeline()?;
    let (data, test) = make_data(&cfg).map_err(fail)?;
    std::fs::create_dir_all(out).map_err(|e| fail(format!("{}: {e}", out.display())))?;
    let mut labels = String::from("file,label\n");
    for (img, (&id, &label)) in data
        .images
        .iter()
        .zip(data.image_scene_ids.iter().zip(&data.labels))
    {
        let name = format!("image_{id:05}.pgm");
        save_pgm(&out.join(&name), img).map_err(fail)?;
        labels.push_str(&format!("{name},{label}\n"));
    }
    for (h, id) in data.events.iter().zip(&data.event_scene_ids) {
        save_histogram(&out.join(format!("events_{id:05}")), h).map_err(fail)?;
    }
    for (h, (&id, &label)) in test
        .events
        .iter()
        .zip(test.scene_ids.iter().zip(&test.labels))
    {
        let name = format!("test_{id:05}");
        save_histogram(&out.join(&name), h).map_err(fail)?;
        labels.push_str(&format!("{name},{label}\n"));
    }
    std::fs::write(out.join("labels.csv"), labels).map_err(fail)?;
    cfg.save(&out.join("config.json")).map_err(fail)?;
    println!(
        "{} images, {} unlabeled event histograms, {} test histograms in {}",
        data.images.len(),
        data.events.len(),
        test.events.len(),
        out.display()
    );
    Ok(())
}

fn train_cmd(common: &Common, out: &Path, iterations: Option<u64>) -> Result<(), Failure> {
    let mut cfg = common.pipeline()?;
    if let Some(n) = iterations {
        cfg.iterations = n;
    }
    cfg.validate().map_err(fail)?;
    let m = run_to_dir(&cfg, out).map_err(fail)?;
    println!(
        "accuracy {:.4} (images {:.4}); wrote {}",
        m.accuracy,
        m.image_accuracy,
        out.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

fn eval_cmd(common: &Common, ckpt: &Path) -> Result<(), Failure> {
    let cfg = common.pipeline()?;
    let gen = load_generator(ckpt).map_err(fail)?;
    let test = evbridge_uda::make_event_test_set(&cfg, cfg.test_scenes).map_err(fail)?;
    let acc = evbridge_uda::evaluate(&cfg, &gen, &test).map_err(fail)?;
    println!(
        "accuracy {acc:.4} on {} held-out event samples",
        test.events.len()
    );
    Ok(())
}

fn augment(
    common: &Common,
    flow: &Path,
    dirs: Option<&Path>,
    sample: Option<&str>,
    out: &Path,
) -> Result<(), Failure> {
    let f = load_vector_field(flow).map_err(fail)?;
    let d = match (dirs, sample) {
        (Some(p), _) => load_vector_field(p).map_err(fail)?,
        (None, Some(spec)) => sampled_field(spec, common.seed, f.width(), f.height())?,
        (None, None) => unreachable!("clap requires one direction source"),
    };
    let a = augment_flow(&f, &d).map_err(fail)?;
    save_vector_field(out, &a).map_err(fail)?;
    let max_mag = a.magnitude().max();
    println!(
        "augmented {}x{} flow, max magnitude {max_mag}",
        a.width(),
        a.height()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Translate {
            common,
            image,
            flow,
            sample_flow,
            contrast,
            dt,
            ckpt,
            out,
        } => translate(
            &common,
            &image,
            flow.as_deref(),
            sample_flow.as_deref(),
            contrast,
            dt,
            ckpt.as_deref(),
            &out,
        ),
        Command::Augment {
            common,
            flow,
            dirs,
            sample_flow,
            out,
        } => augment(
            &common,
            &flow,
            dirs.as_deref(),
            sample_flow.as_deref(),
            &out,
        ),
        Command::Losses { common, report } => {
            common.pipeline()?;
            losses(&report)
        }
        Command::OracleCheck {
            common,
            scene,
            motion,
            contrast,
        } => {
            common.pipeline()?;
            oracle_check(scene, motion, contrast)
        }
        Command::GradCheck {
            common,
            points,
            tolerance,
        } => grad_check(&common, points, tolerance),
        Command::MakeData { common, out } => make_data_cmd(&common, &out),
        Command::Train {
            common,
            out,
            iterations,
        } => train_cmd(&common, &out, iterations),
        Command::Eval { common, ckpt } => eval_cmd(&common, &ckpt),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
