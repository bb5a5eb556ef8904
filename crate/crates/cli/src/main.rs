//! Command-line driver for the headfield avatar pipeline.
//!
//! Subcommands cover the whole loop: `gen-data` synthesizes the multi-view
//! multi-expression corpus, `train-prior` fits the shared auto-decoder,
//! `adapt` fits an unseen subject from a few shots, `render` and
//! `interpolate` produce frames from a checkpoint, and `eval` scores a model
//! against dataset frames with expression-distance binning.
//!
//! Every subcommand reads an optional config TOML plus `--set key=value`
//! overrides, and writes a `manifest.toml` into its output directory that is
//! itself a valid config (the extra `[run]` table is ignored on load), so any
//! run can be reproduced by feeding its manifest back via `--config`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use headfield::adapt::{adapt, interpolate_identity, AdaptResult, Shot, ShotSet};
use headfield::camera::Camera;
use headfield::config::Config;
use headfield::imageio::{atomic_write, load_float, load_png, save_render, FloatImage};
use headfield::mesh::{toy_head, ExpressionCode};
use headfield::metrics::{binned_report, psnr, quantile_bins, ssim};
use headfield::pipeline::{latent_key, PriorModel};
use headfield::synth::{
    generate_dataset, perturb_fittings, view_png_path, Dataset, FittingNoise,
};
use headfield::train::train_prior;

#[derive(Parser)]
#[command(name = "headfield", version, about = "Mesh-anchored neural head avatars")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multi-view multi-expression corpus.
    GenData(GenData),
    /// Train the shared prior over the corpus as an auto-decoder.
    TrainPrior(TrainPrior),
    /// Fit an unseen subject from M shots (two-phase inversion + fine-tune).
    Adapt(Adapt),
    /// Render one frame from a checkpoint.
    Render(Render),
    /// Render the linear path between two identity latents.
    Interpolate(Interpolate),
    /// Score a checkpoint against dataset frames, binned by expression
    /// distance.
    Eval(Eval),
}

/// Config file plus override flags, shared by every subcommand.
#[derive(Args)]
struct ConfigArgs {
    /// Config TOML; omitted fields use desk-scale defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. `--set train.steps=200`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    /// Load the config: `--config` wins, then the first existing fallback
    /// (dataset or run manifests), then defaults; `--set`/`--seed` apply on
    /// top.
    fn resolve(&self, fallbacks: &[PathBuf]) -> Result<Config> {
        let base = if let Some(path) = &self.config {
            Config::load(path).with_context(|| format!("loading {}", path.display()))?
        } else if let Some(found) = fallbacks.iter().find(|p| p.exists()) {
            info!("config from {}", found.display());
            Config::load(found).with_context(|| format!("loading {}", found.display()))?
        } else {
            Config::default()
        };
        let mut cfg = apply_overrides(base, &self.set)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Apply `key.path=value` overrides through a TOML round trip so values keep
/// config-file syntax (numbers, booleans, arrays; bare words fall back to
/// strings).
fn apply_overrides(cfg: Config, sets: &[String]) -> Result<Config> {
    if sets.is_empty() {
        return Ok(cfg);
    }
    let mut table: toml::Table = cfg
        .to_toml()
        .parse()
        .context("re-parsing config for overrides")?;
    for entry in sets {
        let (key, value) = entry
            .split_once('=')
            .with_context(|| format!("--set wants KEY=VALUE, got {entry:?}"))?;
        let parsed = match format!("v = {value}").parse::<toml::Table>() {
            Ok(mut t) => t.remove("v").unwrap(),
            Err(_) => toml::Value::String(value.to_string()),
        };
        let parts: Vec<&str> = key.split('.').collect();
        let mut cur = &mut table;
        for p in &parts[..parts.len() - 1] {
            cur = cur
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()))
                .as_table_mut()
                .with_context(|| format!("--set {key}: {p} is not a table"))?;
        }
        cur.insert(parts.last().unwrap().to_string(), parsed);
    }
    let text = toml::to_string(&table).context("serializing overridden config")?;
    Ok(Config::from_toml(&text)?)
}

/// Append the `[run]` table and write `manifest.toml` into `dir`. The
/// manifest stays a valid config; `extra` rows land inside `[run]` for
/// provenance. Nothing time- or path-of-invocation-dependent goes in, so
/// reruns of the same command produce byte-identical manifests.
fn write_manifest(dir: &Path, cfg: &Config, command: &str, extra: &[(&str, String)]) -> Result<()> {
    let mut text = cfg.to_toml();
    let _ = write!(text, "\n[run]\ncommand = {command:?}\nversion = {:?}\n", env!("CARGO_PKG_VERSION"));
    for (k, v) in extra {
        let _ = writeln!(text, "{k} = {v:?}");
    }
    atomic_write(&dir.join("manifest.toml"), text.as_bytes())?;
    Ok(())
}

fn load_model(path: &Path, cfg: &Config) -> Result<PriorModel> {
    PriorModel::load(path, cfg.clone(), toy_head())
        .with_context(|| format!("loading checkpoint {}", path.display()))
}

fn manifest_of(dir_or_file: &Path) -> PathBuf {
    let dir = if dir_or_file.is_dir() {
        dir_or_file
    } else {
        dir_or_file.parent().unwrap_or(Path::new("."))
    };
    dir.join("manifest.toml")
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

#[derive(Args)]
struct GenData {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset root to create.
    #[arg(long)]
    out: PathBuf,
}

fn run_gen_data(cmd: &GenData) -> Result<()> {
    let cfg = cmd.config.resolve(&[])?;
    let ds = &cfg.dataset;
    info!(
        "generating {} subjects x {} expressions x {} views at {}px into {}",
        ds.n_subjects,
        ds.n_expressions,
        ds.n_views,
        ds.resolution,
        cmd.out.display()
    );
    generate_dataset(&toy_head(), &cfg, &cmd.out)?;
    // The dataset manifest written above is already the config; add the run
    // provenance while keeping the [generated] table.
    let manifest = cmd.out.join("manifest.toml");
    let mut text = std::fs::read_to_string(&manifest)?;
    let _ = write!(text, "\n[run]\ncommand = \"gen-data\"\nversion = {:?}\n", env!("CARGO_PKG_VERSION"));
    atomic_write(&manifest, text.as_bytes())?;
    info!("dataset ready at {}", cmd.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// train-prior
// ---------------------------------------------------------------------------

#[derive(Args)]
struct TrainPrior {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset root from gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Run directory for checkpoint, log, and manifest.
    #[arg(long)]
    out: PathBuf,
    /// Resume from this checkpoint instead of a fresh init.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Shorthand for --set train.steps=N.
    #[arg(long)]
    steps: Option<usize>,
}

fn run_train_prior(cmd: &TrainPrior) -> Result<()> {
    let mut cfg = cmd.config.resolve(&[manifest_of(&cmd.data)])?;
    if let Some(steps) = cmd.steps {
        cfg.train.steps = steps;
    }
    let dataset = Dataset::load(&cmd.data)?;
    std::fs::create_dir_all(&cmd.out)?;
    write_manifest(
        &cmd.out,
        &cfg,
        "train-prior",
        &[("data", cmd.data.display().to_string())],
    )?;
    info!(
        "training prior: {} steps, {} rays/step, {} training subjects",
        cfg.train.steps,
        cfg.train.plan.rays_per_step(),
        dataset.n_training_subjects()
    );
    let (model, log) = train_prior(&dataset, &cfg, toy_head(), &cmd.out, cmd.resume.as_deref())?;
    if let Some(last) = log.last() {
        info!(
            "done at step {}: loss {:.6}{}",
            model.step,
            last.loss,
            log.iter()
                .rev()
                .find(|r| !r.val_psnr.is_nan())
                .map(|r| format!(", val {:.2} dB", r.val_psnr))
                .unwrap_or_default()
        );
    }
    info!("checkpoint at {}", cmd.out.join("checkpoint.ckpt").display());
    Ok(())
}

// ---------------------------------------------------------------------------
// adapt
// ---------------------------------------------------------------------------

#[derive(Args)]
struct Adapt {
    #[command(flatten)]
    config: ConfigArgs,
    /// Prior checkpoint to adapt from.
    #[arg(long)]
    model: PathBuf,
    /// Run directory for the adapted checkpoint, corrections, and log.
    #[arg(long)]
    out: PathBuf,
    /// Shot manifest file (`headfield-shots v1`: image, pose, expression per
    /// line). Mutually exclusive with --data.
    #[arg(long, conflicts_with_all = ["data", "subject", "cells"])]
    shots: Option<PathBuf>,
    /// Take shots from this dataset root instead of a manifest.
    #[arg(long, requires = "subject")]
    data: Option<PathBuf>,
    /// Dataset subject the shots come from.
    #[arg(long)]
    subject: Option<usize>,
    /// Dataset cells used as shots, as EXPR:VIEW pairs.
    #[arg(long, value_delimiter = ',', default_value = "0:0")]
    cells: Vec<String>,
    /// Rotation noise injected into the shot fittings, radians.
    #[arg(long, default_value_t = 0.0)]
    noise_rot: f64,
    /// Translation noise injected into the shot fittings, model units.
    #[arg(long, default_value_t = 0.0)]
    noise_trans: f64,
    /// Expression-code noise injected into the shot fittings.
    #[arg(long, default_value_t = 0.0)]
    noise_expr: f64,
    /// Shorthand for --set adapt.corrections=false.
    #[arg(long)]
    no_corrections: bool,
}

fn parse_cell(s: &str) -> Result<(usize, usize)> {
    let (e, v) = s
        .split_once(':')
        .with_context(|| format!("cell wants EXPR:VIEW, got {s:?}"))?;
    Ok((e.trim().parse()?, v.trim().parse()?))
}

fn load_image_any(path: &Path) -> Result<FloatImage> {
    let img = if path.extension().is_some_and(|e| e == "f32") {
        load_float(path)?
    } else {
        load_png(path)?
    };
    Ok(img)
}

/// Parse a `headfield-shots v1` manifest; relative paths resolve against the
/// manifest's directory.
fn load_shot_manifest(path: &Path) -> Result<Vec<Shot>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut lines = text.lines();
    match lines.next().map(str::trim) {
        Some("headfield-shots v1") => {}
        other => bail!("{}: bad shot manifest header {other:?}", path.display()),
    }
    let resolve = |p: &str| {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };
    let mut shots = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 4 || parts[0] != "shot" {
            bail!("{} line {}: wants `shot IMAGE POSE EXPR`", path.display(), i + 2);
        }
        let pose_path = resolve(parts[2]);
        let expr_path = resolve(parts[3]);
        shots.push(Shot {
            image: load_image_any(&resolve(parts[1]))?,
            camera: Camera::from_text(
                &std::fs::read_to_string(&pose_path)?,
                &pose_path.display().to_string(),
            )?,
            expression: ExpressionCode::from_text(
                &std::fs::read_to_string(&expr_path)?,
                &expr_path.display().to_string(),
            )?,
        });
    }
    if shots.is_empty() {
        bail!("{}: no shots listed", path.display());
    }
    Ok(shots)
}

/// Build shots from dataset cells, optionally corrupting the fittings, and
/// dump the equivalent manifest plus pose/expression files into `out`.
fn shots_from_data(cmd: &Adapt, cfg: &Config, out: &Path) -> Result<Vec<Shot>> {
    let root = cmd.data.as_ref().unwrap();
    let dataset = Dataset::load(root)?;
    let subject = cmd.subject.unwrap();
    if subject >= dataset.n_subjects() {
        bail!(
            "subject {subject} out of range (dataset has {})",
            dataset.n_subjects()
        );
    }
    let cells: Vec<(usize, usize)> = cmd
        .cells
        .iter()
        .map(|s| parse_cell(s))
        .collect::<Result<_>>()?;
    let mut cameras = Vec::new();
    let mut codes = Vec::new();
    for &(e, v) in &cells {
        if e >= dataset.n_expressions() || v >= dataset.n_views() {
            bail!(
                "cell {e}:{v} out of range ({} expressions, {} views)",
                dataset.n_expressions(),
                dataset.n_views()
            );
        }
        cameras.push(dataset.camera(subject, e, v).clone());
        codes.push(dataset.expression(subject, e).clone());
    }
    let noise = FittingNoise {
        rot: cmd.noise_rot,
        trans: cmd.noise_trans,
        expr: cmd.noise_expr,
    };
    if noise != FittingNoise::default() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x4649_5454_4E4F_4953);
        perturb_fittings(&mut cameras, &mut codes, &noise, &mut rng);
        info!(
            "injected fitting noise: rot {} rad, trans {}, expr {}",
            noise.rot, noise.trans, noise.expr
        );
    }
    let mut manifest = String::from("headfield-shots v1\n");
    let mut shots = Vec::new();
    for (m, &(e, v)) in cells.iter().enumerate() {
        let pose_name = format!("shot_{m:02}_pose.txt");
        let expr_name = format!("shot_{m:02}_expr.txt");
        atomic_write(&out.join(&pose_name), cameras[m].to_text().as_bytes())?;
        atomic_write(&out.join(&expr_name), codes[m].to_text().as_bytes())?;
        // The manifest lives in `out`; reference the dataset image by
        // absolute path so it resolves from there.
        let png = view_png_path(root, subject, e, v)
            .canonicalize()
            .with_context(|| format!("resolving image for cell {e}:{v}"))?;
        let _ = writeln!(manifest, "shot {} {pose_name} {expr_name}", png.display());
        shots.push(Shot {
            image: dataset.image(subject, e, v).clone(),
            camera: cameras[m].clone(),
            expression: codes[m].clone(),
        });
    }
    atomic_write(&out.join("shots.txt"), manifest.as_bytes())?;
    Ok(shots)
}

fn write_adapt_outputs(out: &Path, result: &AdaptResult) -> Result<()> {
    let mut adapted = result.model.clone();
    adapted.latents = [(latent_key(0), result.latent.clone())].into_iter().collect();
    adapted.save(&out.join("adapted.ckpt"))?;
    for (m, c) in result.corrections.iter().enumerate() {
        atomic_write(
            &out.join(format!("correction_{m:02}.txt")),
            c.to_text().as_bytes(),
        )?;
    }
    let mut csv = String::from("step,phase,loss,recon\n");
    for r in &result.trace {
        let _ = writeln!(csv, "{},{},{},{}", r.step, r.phase, r.loss, r.recon);
    }
    atomic_write(&out.join("adapt_log.csv"), csv.as_bytes())?;
    Ok(())
}

fn run_adapt(cmd: &Adapt) -> Result<()> {
    let mut fallbacks = vec![manifest_of(&cmd.model)];
    if let Some(data) = &cmd.data {
        fallbacks.push(manifest_of(data));
    }
    let mut cfg = cmd.config.resolve(&fallbacks)?;
    if cmd.no_corrections {
        cfg.adapt.corrections = false;
    }
    std::fs::create_dir_all(&cmd.out)?;
    let shots = match &cmd.shots {
        Some(path) => load_shot_manifest(path)?,
        None if cmd.data.is_some() => shots_from_data(cmd, &cfg, &cmd.out)?,
        None => bail!("either --shots or --data with --subject is required"),
    };
    let prior = load_model(&cmd.model, &cfg)?;
    let set = ShotSet::new(shots, prior.mean_latent())?;
    let mut extra = vec![("model", cmd.model.display().to_string())];
    if let Some(p) = &cmd.shots {
        extra.push(("shots", p.display().to_string()));
    }
    if let Some(p) = &cmd.data {
        extra.push(("data", p.display().to_string()));
        extra.push(("subject", cmd.subject.unwrap().to_string()));
        extra.push(("cells", cmd.cells.join(",")));
    }
    write_manifest(&cmd.out, &cfg, "adapt", &extra)?;
    info!(
        "adapting from {} shot(s): {} inversion + {} fine-tune steps",
        set.len(),
        cfg.adapt.inversion_steps,
        cfg.adapt.finetune_steps
    );
    let result = adapt(&prior, &set, &cfg.adapt, cfg.seed)?;
    write_adapt_outputs(&cmd.out, &result)?;
    if let Some(last) = result.trace.last() {
        info!("final loss {:.6} (recon {:.6})", last.loss, last.recon);
    }
    info!("adapted checkpoint at {}", cmd.out.join("adapted.ckpt").display());
    Ok(())
}

// ---------------------------------------------------------------------------
// render / interpolate
// ---------------------------------------------------------------------------

/// Where a frame's camera and expression come from: explicit files, or a
/// dataset cell.
#[derive(Args)]
struct FrameSource {
    /// Pose file (`headfield-pose v1`).
    #[arg(long, conflicts_with_all = ["data", "view"])]
    pose: Option<PathBuf>,
    /// Expression file (`headfield-expr v1`); without it and without --data,
    /// the neutral expression is used.
    #[arg(long)]
    expr: Option<PathBuf>,
    /// Dataset root to take the camera (and expression) from.
    #[arg(long, requires = "subject")]
    data: Option<PathBuf>,
    /// Dataset subject for --data.
    #[arg(long)]
    subject: Option<usize>,
    /// Dataset expression index for --data.
    #[arg(long, default_value_t = 0)]
    expr_index: usize,
    /// Dataset view index for --data.
    #[arg(long, default_value_t = 0)]
    view: usize,
}

impl FrameSource {
    fn resolve(&self, expr_dim: usize) -> Result<(Camera, ExpressionCode)> {
        if let Some(root) = &self.data {
            let dataset = Dataset::load(root)?;
            let s = self.subject.unwrap();
            let camera = dataset.camera(s, self.expr_index, self.view).clone();
            let code = match &self.expr {
                Some(path) => ExpressionCode::from_text(
                    &std::fs::read_to_string(path)?,
                    &path.display().to_string(),
                )?,
                None => dataset.expression(s, self.expr_index).clone(),
            };
            return Ok((camera, code));
        }
        let Some(pose) = &self.pose else {
            bail!("either --pose or --data with --subject is required");
        };
        let camera = Camera::from_text(
            &std::fs::read_to_string(pose)?,
            &pose.display().to_string(),
        )?;
        let code = match &self.expr {
            Some(path) => ExpressionCode::from_text(
                &std::fs::read_to_string(path)?,
                &path.display().to_string(),
            )?,
            None => ExpressionCode::zeros(expr_dim),
        };
        Ok((camera, code))
    }
}

#[derive(Args)]
struct Render {
    #[command(flatten)]
    config: ConfigArgs,
    /// Checkpoint to render from.
    #[arg(long)]
    model: PathBuf,
    /// Output directory for `NAME.png` and `NAME.f32`.
    #[arg(long)]
    out: PathBuf,
    /// Output frame name.
    #[arg(long, default_value = "frame")]
    name: String,
    /// Latent table index to render (adapted checkpoints store index 0).
    #[arg(long, default_value_t = 0)]
    latent_index: usize,
    /// Render the mean of the stored latents instead of one entry.
    #[arg(long)]
    mean_latent: bool,
    #[command(flatten)]
    frame: FrameSource,
}

fn run_render(cmd: &Render) -> Result<()> {
    let mut fallbacks = vec![manifest_of(&cmd.model)];
    if let Some(data) = &cmd.frame.data {
        fallbacks.push(manifest_of(data));
    }
    let cfg = cmd.config.resolve(&fallbacks)?;
    let model = load_model(&cmd.model, &cfg)?;
    let (camera, code) = cmd.frame.resolve(model.assets.model.n_expressions())?;
    let latent = if cmd.mean_latent {
        model.mean_latent()
    } else {
        model.latent(cmd.latent_index)?.clone()
    };
    let rendered = model.render_image(&latent, &code, &camera, None, cfg.seed, cfg.adapt.chunk_rays)?;
    std::fs::create_dir_all(&cmd.out)?;
    save_render(&cmd.out, &cmd.name, &rendered.rgb)?;
    write_manifest(
        &cmd.out,
        &cfg,
        "render",
        &[("model", cmd.model.display().to_string()), ("name", cmd.name.clone())],
    )?;
    info!(
        "rendered {}x{} frame to {}",
        camera.intr.width,
        camera.intr.height,
        cmd.out.join(format!("{}.png", cmd.name)).display()
    );
    Ok(())
}

#[derive(Args)]
struct Interpolate {
    #[command(flatten)]
    config: ConfigArgs,
    /// Checkpoint holding the latent table.
    #[arg(long)]
    model: PathBuf,
    /// Output directory for `frame_NNN.png`.
    #[arg(long)]
    out: PathBuf,
    /// Latent index of the first endpoint.
    #[arg(long)]
    a: usize,
    /// Latent index of the second endpoint.
    #[arg(long)]
    b: usize,
    /// Number of frames including both endpoints.
    #[arg(long, default_value_t = 8)]
    steps: usize,
    #[command(flatten)]
    frame: FrameSource,
}

fn run_interpolate(cmd: &Interpolate) -> Result<()> {
    let mut fallbacks = vec![manifest_of(&cmd.model)];
    if let Some(data) = &cmd.frame.data {
        fallbacks.push(manifest_of(data));
    }
    let cfg = cmd.config.resolve(&fallbacks)?;
    let model = load_model(&cmd.model, &cfg)?;
    let (camera, code) = cmd.frame.resolve(model.assets.model.n_expressions())?;
    let w_a = model.latent(cmd.a)?.clone();
    let w_b = model.latent(cmd.b)?.clone();
    let frames = interpolate_identity(
        &model,
        &w_a,
        &w_b,
        cmd.steps,
        &code,
        &camera,
        cfg.seed,
        cfg.adapt.chunk_rays,
    )?;
    std::fs::create_dir_all(&cmd.out)?;
    for (i, frame) in frames.iter().enumerate() {
        save_render(&cmd.out, &format!("frame_{i:03}"), frame)?;
    }
    write_manifest(
        &cmd.out,
        &cfg,
        "interpolate",
        &[
            ("model", cmd.model.display().to_string()),
            ("a", cmd.a.to_string()),
            ("b", cmd.b.to_string()),
        ],
    )?;
    info!("wrote {} frames to {}", frames.len(), cmd.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Args)]
struct Eval {
    #[command(flatten)]
    config: ConfigArgs,
    /// Checkpoint to evaluate.
    #[arg(long)]
    model: PathBuf,
    /// Dataset root holding the ground-truth frames.
    #[arg(long)]
    data: PathBuf,
    /// Dataset subject to evaluate on.
    #[arg(long)]
    subject: usize,
    /// Shot manifest of the adaptation shots; expression distances are
    /// measured to the nearest shot. Without it all distances are zero.
    #[arg(long)]
    shots: Option<PathBuf>,
    /// Cells to exclude from the test set (normally the adaptation shots),
    /// as EXPR:VIEW pairs.
    #[arg(long, value_delimiter = ',')]
    skip_cells: Vec<String>,
    /// Number of equal-count expression-distance bins.
    #[arg(long, default_value_t = 5)]
    bins: usize,
    /// Latent table index to render (adapted checkpoints store index 0).
    #[arg(long, default_value_t = 0)]
    latent_index: usize,
    /// Render the mean of the stored latents instead of one entry.
    #[arg(long)]
    mean_latent: bool,
    /// Output directory for the metric CSVs.
    #[arg(long)]
    out: PathBuf,
}

fn expression_distance(a: &ExpressionCode, b: &ExpressionCode) -> f64 {
    a.psi
        .iter()
        .zip(&b.psi)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn run_eval(cmd: &Eval) -> Result<()> {
    let cfg = cmd
        .config
        .resolve(&[manifest_of(&cmd.model), manifest_of(&cmd.data)])?;
    let dataset = Dataset::load(&cmd.data)?;
    if cmd.subject >= dataset.n_subjects() {
        bail!(
            "subject {} out of range (dataset has {})",
            cmd.subject,
            dataset.n_subjects()
        );
    }
    let model = load_model(&cmd.model, &cfg)?;
    let latent = if cmd.mean_latent {
        model.mean_latent()
    } else {
        model.latent(cmd.latent_index)?.clone()
    };
    let skip: Vec<(usize, usize)> = cmd
        .skip_cells
        .iter()
        .map(|s| parse_cell(s))
        .collect::<Result<_>>()?;
    let shot_codes: Vec<ExpressionCode> = match &cmd.shots {
        Some(path) => load_shot_manifest(path)?
            .into_iter()
            .map(|s| s.expression)
            .collect(),
        None => Vec::new(),
    };

    let mut rows: Vec<(usize, usize, f64, f64, f64)> = Vec::new();
    for e in 0..dataset.n_expressions() {
        for v in 0..dataset.n_views() {
            if skip.contains(&(e, v)) {
                continue;
            }
            let camera = dataset.camera(cmd.subject, e, v);
            let code = dataset.expression(cmd.subject, e);
            let rendered =
                model.render_image(&latent, code, camera, None, cfg.seed, cfg.adapt.chunk_rays)?;
            let gt = dataset.image(cmd.subject, e, v);
            let distance = shot_codes
                .iter()
                .map(|s| expression_distance(code, s))
                .fold(f64::INFINITY, f64::min);
            let distance = if distance.is_finite() { distance } else { 0.0 };
            rows.push((
                e,
                v,
                distance,
                psnr(&rendered.rgb, gt)?,
                ssim(&rendered.rgb, gt)?,
            ));
        }
    }
    if rows.is_empty() {
        bail!("no test frames left after --skip-cells");
    }

    let distances: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let psnrs: Vec<f64> = rows.iter().map(|r| r.3).collect();
    let ssims: Vec<f64> = rows.iter().map(|r| r.4).collect();
    let n_bins = cmd.bins.min(rows.len()).max(1);
    let assignment = quantile_bins(&distances, n_bins);
    let report = binned_report(&distances, &psnrs, &ssims, n_bins)?;

    std::fs::create_dir_all(&cmd.out)?;
    let mut frames_csv = String::from("expr,view,distance,psnr,ssim,bin\n");
    for (row, bin) in rows.iter().zip(&assignment) {
        let _ = writeln!(
            frames_csv,
            "{},{},{},{},{},{bin}",
            row.0, row.1, row.2, row.3, row.4
        );
    }
    atomic_write(&cmd.out.join("eval_frames.csv"), frames_csv.as_bytes())?;
    let mut bins_csv = String::from("bin,count,mean_distance,mean_psnr,mean_ssim\n");
    for (i, b) in report.bins.iter().enumerate() {
        let _ = writeln!(
            bins_csv,
            "{i},{},{},{},{}",
            b.count, b.mean_distance, b.mean_psnr, b.mean_ssim
        );
    }
    atomic_write(&cmd.out.join("eval_bins.csv"), bins_csv.as_bytes())?;
    let mut extra = vec![
        ("model", cmd.model.display().to_string()),
        ("data", cmd.data.display().to_string()),
        ("subject", cmd.subject.to_string()),
    ];
    if let Some(p) = &cmd.shots {
        extra.push(("shots", p.display().to_string()));
    }
    write_manifest(&cmd.out, &cfg, "eval", &extra)?;

    let mean_psnr = psnrs.iter().sum::<f64>() / psnrs.len() as f64;
    let mean_ssim = ssims.iter().sum::<f64>() / ssims.len() as f64;
    info!(
        "{} frames: mean PSNR {mean_psnr:.2} dB, mean SSIM {mean_ssim:.4}",
        rows.len()
    );
    for (i, b) in report.bins.iter().enumerate() {
        info!(
            "bin {i}: {} frames, distance {:.4}, PSNR {:.2} dB, SSIM {:.4}",
            b.count, b.mean_distance, b.mean_psnr, b.mean_ssim
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .format_target(false)
        .init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(cmd) => run_gen_data(cmd),
        Command::TrainPrior(cmd) => run_train_prior(cmd),
        Command::Adapt(cmd) => run_adapt(cmd),
        Command::Render(cmd) => run_render(cmd),
        Command::Interpolate(cmd) => run_interpolate(cmd),
        Command::Eval(cmd) => run_eval(cmd),
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
