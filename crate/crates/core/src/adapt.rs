//! Few-shot adaptation: fit an avatar to an unseen subject from M images.
//!
//! Two phases in the pivotal-tuning style: latent inversion against a frozen
//! decoder, then joint fine-tuning of decoder weights and latent. Each shot
//! carries an additive fitting correction — an axis-angle rotation increment,
//! a translation increment, and an expression-code increment — optimized
//! alongside the latent under a squared-norm regularizer, so imperfect
//! initial fittings do not poison the reconstruction.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use log::info;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::camera::{Camera, Vec3};
use crate::diff::{
    adam_step, constant_map, leaf_map, row, AdamConfig, AdamState, Tape, Tensor, Var,
};
use crate::error::{Error, Result};
use crate::imageio::FloatImage;
use crate::mesh::ExpressionCode;
use crate::pipeline::{build_cell, chunked_l1_sum, PriorModel};
use crate::synth::Dataset;
use crate::train::DivergenceWatch;

/// Phase lengths, learning rates, regularizer weight, and the correction
/// switch of one adaptation run.
pub type AdaptSchedule = crate::config::AdaptConfig;

/// Salt folded into the run seed for per-step pixel draws.
const PIXEL_SALT: u64 = 0x4144_4150_5450_4958;
/// Salt folded into the run seed for per-step sample jitter.
const JITTER_SALT: u64 = 0x4144_4150_544A_4954;

fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ PIXEL_SALT ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn jitter_seed(seed: u64, step: usize) -> u64 {
    seed ^ JITTER_SALT ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

/// Additive fitting updates of one shot: rotation as axis-angle applied by
/// left-multiplied exponential map, translation and expression added in
/// place.
#[derive(Debug, Clone, PartialEq)]
pub struct FittingCorrection {
    pub drot: Vec3,
    pub dt: Vec3,
    pub dpsi: Vec<f64>,
}

impl FittingCorrection {
    pub fn zeros(e: usize) -> FittingCorrection {
        FittingCorrection {
            drot: [0.0; 3],
            dt: [0.0; 3],
            dpsi: vec![0.0; e],
        }
    }

    /// Squared ℓ2 norm over all three increments.
    pub fn norm_sq(&self) -> f64 {
        let v3 = |v: &Vec3| v.iter().map(|x| x * x).sum::<f64>();
        v3(&self.drot) + v3(&self.dt) + self.dpsi.iter().map(|x| x * x).sum::<f64>()
    }

    /// Serialize to the `headfield-correction v1` text format.
    pub fn to_text(&self) -> String {
        let mut s = String::from("headfield-correction v1\n");
        let _ = write!(s, "drot");
        for v in self.drot {
            let _ = write!(s, " {v}");
        }
        let _ = write!(s, "\ndt");
        for v in self.dt {
            let _ = write!(s, " {v}");
        }
        let _ = write!(s, "\ndpsi");
        for v in &self.dpsi {
            let _ = write!(s, " {v}");
        }
        s.push('\n');
        s
    }

    pub fn from_text(text: &str, path: &Path) -> Result<FittingCorrection> {
        let err = |message: String| Error::Parse {
            path: path.display().to_string(),
            message,
        };
        let mut lines = text.lines();
        match lines.next() {
            Some("headfield-correction v1") => {}
            other => return Err(err(format!("bad header {other:?}"))),
        }
        let mut fields: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for line in lines {
            let mut it = line.split_whitespace();
            let Some(tag) = it.next() else { continue };
            let vals = it
                .map(|t| t.parse::<f64>().map_err(|e| err(format!("bad number {t:?}: {e}"))))
                .collect::<Result<Vec<f64>>>()?;
            fields.insert(tag, vals);
        }
        let three = |tag: &str| -> Result<Vec3> {
            let v = fields
                .get(tag)
                .ok_or_else(|| err(format!("missing {tag} line")))?;
            if v.len() != 3 {
                return Err(err(format!("{tag} wants 3 values, got {}", v.len())));
            }
            Ok([v[0], v[1], v[2]])
        };
        Ok(FittingCorrection {
            drot: three("drot")?,
            dt: three("dt")?,
            dpsi: fields
                .get("dpsi")
                .ok_or_else(|| err("missing dpsi line".into()))?
                .clone(),
        })
    }
}

/// One target image with the fitting it was captured (or estimated) under.
#[derive(Debug, Clone)]
pub struct Shot {
    pub image: FloatImage,
    pub camera: Camera,
    pub expression: ExpressionCode,
}

/// The M-image adaptation problem: shots, their live corrections, and the
/// target latent. Initialize the latent from [`PriorModel::mean_latent`] for
/// the standard pipeline.
#[derive(Debug, Clone)]
pub struct ShotSet {
    pub shots: Vec<Shot>,
    pub corrections: Vec<FittingCorrection>,
    pub latent: Tensor,
}

impl ShotSet {
    /// Bundle shots with zero corrections. All shots must agree on the
    /// expression dimension, and at least one is required.
    pub fn new(shots: Vec<Shot>, latent: Tensor) -> Result<ShotSet> {
        let Some(first) = shots.first() else {
            return Err(Error::InvalidArgument {
                context: "ShotSet::new",
                message: "at least one shot is required".into(),
            });
        };
        let e = first.expression.psi.len();
        for (m, s) in shots.iter().enumerate() {
            if s.expression.psi.len() != e {
                return Err(Error::DimensionMismatch {
                    context: "ShotSet::new",
                    expected: e,
                    got: s.expression.psi.len(),
                });
            }
            if s.image.h != s.camera.intr.height || s.image.w != s.camera.intr.width {
                return Err(Error::InvalidArgument {
                    context: "ShotSet::new",
                    message: format!(
                        "shot {m}: image {}x{} does not match intrinsics {}x{}",
                        s.image.w, s.image.h, s.camera.intr.width, s.camera.intr.height
                    ),
                });
            }
        }
        let corrections = shots
            .iter()
            .map(|_| FittingCorrection::zeros(e))
            .collect();
        Ok(ShotSet {
            shots,
            corrections,
            latent,
        })
    }

    pub fn len(&self) -> usize {
        self.shots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shots.is_empty()
    }

    /// Camera of shot `m` with its current correction applied.
    pub fn corrected_camera(&self, m: usize) -> Camera {
        let c = &self.corrections[m];
        Camera {
            pose: self.shots[m].camera.pose.corrected(c.drot, c.dt),
            intr: self.shots[m].camera.intr.clone(),
        }
    }

    /// Expression of shot `m` with its current correction applied.
    pub fn corrected_expression(&self, m: usize) -> ExpressionCode {
        let c = &self.corrections[m];
        ExpressionCode {
            psi: self.shots[m]
                .expression
                .psi
                .iter()
                .zip(&c.dpsi)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }
}

/// Assemble a shot set from a subject's dataset cells with their stored
/// (ground-truth) fittings.
pub fn shots_from_dataset(
    ds: &Dataset,
    subject: usize,
    cells: &[(usize, usize)],
    latent: Tensor,
) -> Result<ShotSet> {
    let shots = cells
        .iter()
        .map(|&(e, v)| Shot {
            image: ds.image(subject, e, v).clone(),
            camera: ds.camera(subject, e, v).clone(),
            expression: ds.expression(subject, e).clone(),
        })
        .collect();
    ShotSet::new(shots, latent)
}

// ---------------------------------------------------------------------------
// Objective
// ---------------------------------------------------------------------------

/// Squared-norm penalty over all shots' increments:
/// `Σ_m ‖ΔR_m‖² + ‖Δt_m‖² + ‖Δψ_m‖²`, rotations measured in axis-angle.
pub fn reg_loss(corrections: &[FittingCorrection]) -> f64 {
    corrections.iter().map(|c| c.norm_sq()).sum()
}

/// Draw `total` pixels uniformly without replacement from the pooled pixel
/// grid of all shots; returns per-shot `(x, y)` lists (some possibly empty).
pub fn sample_shot_pixels(
    shots: &ShotSet,
    total: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<(usize, usize)>> {
    let sizes: Vec<(usize, usize)> = shots
        .shots
        .iter()
        .map(|s| (s.image.w, s.image.w * s.image.h))
        .collect();
    let pool: usize = sizes.iter().map(|&(_, n)| n).sum();
    let mut out = vec![Vec::new(); shots.len()];
    for idx in index::sample(rng, pool, total.min(pool)).iter() {
        let mut rem = idx;
        for (m, &(w, n)) in sizes.iter().enumerate() {
            if rem < n {
                out[m].push((rem % w, rem / w));
                break;
            }
            rem -= n;
        }
    }
    out
}

struct StepOut {
    loss: f64,
    recon: f64,
    grads: BTreeMap<String, Tensor>,
}

fn corr_key(m: usize, which: &str) -> String {
    format!("corr.{m:02}.{which}")
}

/// One evaluation of the adaptation objective on given pixels, optionally
/// with gradients. The loss is the mean ℓ1 over the sampled rays of all
/// shots — rendered under corrected poses and expressions — plus
/// `λ · reg_loss`. `train_theta` decides whether decoder weights are leaves
/// or frozen constants; `train_fittings` the same for corrections.
#[allow(clippy::too_many_arguments)]
fn adapt_step(
    model: &PriorModel,
    shots: &ShotSet,
    pixels: &[Vec<(usize, usize)>],
    lambda: f64,
    jitter: u64,
    chunk_rays: usize,
    train_theta: bool,
    train_fittings: bool,
    with_grads: bool,
) -> Result<StepOut> {
    let cfg = &model.config;
    let n_rays: usize = pixels.iter().map(|p| p.len()).sum();
    if n_rays == 0 {
        return Err(Error::InvalidArgument {
            context: "adapt_step",
            message: "no pixels sampled".into(),
        });
    }
    if shots.latent.ncols() != cfg.feature_map.latent_dim {
        return Err(Error::DimensionMismatch {
            context: "adapt_step",
            expected: cfg.feature_map.latent_dim,
            got: shots.latent.ncols(),
        });
    }

    let mut tape = Tape::new();
    let theta = if train_theta && with_grads {
        leaf_map(&mut tape, &model.params)
    } else {
        constant_map(&mut tape, &model.params)
    };
    let latent = if with_grads {
        tape.leaf(shots.latent.clone())
    } else {
        tape.constant(shots.latent.clone())
    };
    let mut corr_vars: Vec<(Var, Var, Var)> = Vec::with_capacity(shots.len());
    for c in &shots.corrections {
        let mut mk = |t: Tensor| {
            if train_fittings && with_grads {
                tape.leaf(t)
            } else {
                tape.constant(t)
            }
        };
        corr_vars.push((mk(row(&c.drot)), mk(row(&c.dt)), mk(row(&c.dpsi))));
    }

    let seed_scale = if with_grads {
        1.0 / (3.0 * n_rays as f64)
    } else {
        0.0
    };
    let mut photo_sum = 0.0;
    for (m, shot) in shots.shots.iter().enumerate() {
        if pixels[m].is_empty() {
            continue;
        }
        let (drot_v, dt_v, dpsi_v) = corr_vars[m];
        let psi0 = tape.constant(row(&shot.expression.psi));
        let psi = tape.add(psi0, dpsi_v);
        let cell = build_cell(&mut tape, &theta, &model.assets, cfg, latent, psi)?;
        let mark = tape.len();
        photo_sum += chunked_l1_sum(
            &mut tape,
            &theta,
            &cell,
            &shot.camera,
            drot_v,
            dt_v,
            &pixels[m],
            &shot.image,
            cfg,
            model.bandwidth,
            jitter,
            chunk_rays,
            mark,
            seed_scale,
            None,
        )?;
    }
    let recon = photo_sum / (3.0 * n_rays as f64);

    // The regularizer lives on the tape too, so its pull on the corrections
    // arrives through the same backward pass as the photometric term.
    let reg_mark = tape.len();
    let mut reg_node: Option<Var> = None;
    for &(drot_v, dt_v, dpsi_v) in &corr_vars {
        for v in [drot_v, dt_v, dpsi_v] {
            let sq = tape.mul(v, v);
            let s = tape.sum(sq);
            reg_node = Some(match reg_node {
                Some(acc) => tape.add(acc, s),
                None => s,
            });
        }
    }
    let reg_v = reg_node.expect("at least one shot");
    let reg = tape.value(reg_v)[(0, 0)];
    let loss = recon + lambda * reg;

    let mut grads = BTreeMap::new();
    if with_grads {
        if lambda != 0.0 {
            tape.backward_partial(vec![(reg_v, Tensor::from_elem((1, 1), lambda))], reg_mark)?;
        }
        tape.truncate(reg_mark);
        let end = tape.len();
        tape.backward_pending(end)?;
        if train_theta {
            for (name, &v) in &theta {
                if let Some(g) = tape.grad(v) {
                    grads.insert(name.clone(), g.clone());
                }
            }
        }
        if let Some(g) = tape.grad(latent) {
            grads.insert("latent".into(), g.clone());
        }
        if train_fittings {
            for (m, &(dr, dt, dp)) in corr_vars.iter().enumerate() {
                for (v, which) in [(dr, "drot"), (dt, "dt"), (dp, "dpsi")] {
                    if let Some(g) = tape.grad(v) {
                        grads.insert(corr_key(m, which), g.clone());
                    }
                }
            }
        }
    }
    Ok(StepOut { loss, recon, grads })
}

/// Evaluate the adaptation objective (no gradients) on explicit per-shot
/// pixel lists: mean ℓ1 over those rays under corrected fittings plus
/// `λ · reg_loss`.
pub fn adaptation_loss(
    model: &PriorModel,
    shots: &ShotSet,
    pixels: &[Vec<(usize, usize)>],
    lambda: f64,
    jitter: u64,
    chunk_rays: usize,
) -> Result<f64> {
    adapt_step(
        model, shots, pixels, lambda, jitter, chunk_rays, false, false, false,
    )
    .map(|o| o.loss)
}

// ---------------------------------------------------------------------------
// Optimization loop
// ---------------------------------------------------------------------------

/// One entry of the adaptation loss trace.
#[derive(Debug, Clone, Copy)]
pub struct AdaptLogRow {
    pub step: usize,
    /// `"inversion"` or `"finetune"`.
    pub phase: &'static str,
    /// Full objective (reconstruction + λ·reg).
    pub loss: f64,
    /// Reconstruction term alone.
    pub recon: f64,
}

/// The adapted state: fine-tuned decoder, optimized target latent, final
/// per-shot corrections, and the per-step loss trace.
#[derive(Debug, Clone)]
pub struct AdaptResult {
    pub model: PriorModel,
    pub latent: Tensor,
    pub corrections: Vec<FittingCorrection>,
    pub trace: Vec<AdaptLogRow>,
}

/// Fit the prior to a shot set: `inversion_steps` of latent (and correction)
/// optimization with the decoder frozen, then `finetune_steps` of joint
/// optimization. Deterministic given `seed`. Divergence aborts with an error
/// once the loss has stayed above `divergence_factor` × the initial loss for
/// `divergence_window` consecutive steps; the streamed log lines carry the
/// trace up to that point.
pub fn adapt(
    prior: &PriorModel,
    shots: &ShotSet,
    schedule: &AdaptSchedule,
    seed: u64,
) -> Result<AdaptResult> {
    let mut model = prior.clone();
    let mut work = shots.clone();
    let e_dim = model.assets.model.n_expressions();
    for s in &work.shots {
        if s.expression.psi.len() != e_dim {
            return Err(Error::DimensionMismatch {
                context: "adapt",
                expected: e_dim,
                got: s.expression.psi.len(),
            });
        }
    }

    let total = schedule.inversion_steps + schedule.finetune_steps;
    let mut adam = AdamState::new();
    let adam_cfg = AdamConfig {
        lr: schedule.lr_theta,
        ..AdamConfig::default()
    };
    let boost = schedule.lr_latent / schedule.lr_theta;
    let mut watch = DivergenceWatch::new(schedule.divergence_factor, schedule.divergence_window);
    let mut trace = Vec::with_capacity(total);

    for step in 0..total {
        let finetune = step >= schedule.inversion_steps;
        let mut rng = step_rng(seed, step);
        let pixels = sample_shot_pixels(&work, schedule.pixels_per_step, &mut rng);
        let out = adapt_step(
            &model,
            &work,
            &pixels,
            schedule.lambda,
            jitter_seed(seed, step),
            schedule.chunk_rays,
            finetune,
            schedule.corrections,
            true,
        )?;
        watch.observe(step, out.loss)?;

        // Merge the trainables into one named map for the optimizer, then
        // scatter the updated values back.
        let mut params: BTreeMap<String, Tensor> = BTreeMap::new();
        if finetune {
            params.append(&mut model.params);
        }
        params.insert("latent".into(), work.latent.clone());
        if schedule.corrections {
            for (m, c) in work.corrections.iter().enumerate() {
                params.insert(corr_key(m, "drot"), row(&c.drot));
                params.insert(corr_key(m, "dt"), row(&c.dt));
                params.insert(corr_key(m, "dpsi"), row(&c.dpsi));
            }
        }
        adam_step(&mut params, &out.grads, &mut adam, &adam_cfg, |name| {
            if name == "latent" || name.starts_with("corr.") {
                boost
            } else {
                1.0
            }
        })?;
        work.latent = params.remove("latent").expect("latent stays in the map");
        if schedule.corrections {
            for (m, c) in work.corrections.iter_mut().enumerate() {
                let take3 = |t: &Tensor| [t[(0, 0)], t[(0, 1)], t[(0, 2)]];
                c.drot = take3(&params.remove(&corr_key(m, "drot")).expect("kept"));
                c.dt = take3(&params.remove(&corr_key(m, "dt")).expect("kept"));
                c.dpsi = params.remove(&corr_key(m, "dpsi")).expect("kept").iter().copied().collect();
            }
        }
        if finetune {
            model.params = params;
        }

        let phase = if finetune { "finetune" } else { "inversion" };
        trace.push(AdaptLogRow {
            step,
            phase,
            loss: out.loss,
            recon: out.recon,
        });
        if schedule.log_every > 0 && (step + 1) % schedule.log_every == 0 {
            info!(
                "adapt {phase} step {step}: loss {:.6} recon {:.6}",
                out.loss, out.recon
            );
        }
    }
    Ok(AdaptResult {
        model,
        latent: work.latent,
        corrections: work.corrections,
        trace,
    })
}

/// Render the straight line between two identity latents at a fixed
/// expression and camera: `steps` frames at `α = 0, …, 1` inclusive (a single
/// step renders `α = 0` only).
pub fn interpolate_identity(
    model: &PriorModel,
    w_a: &Tensor,
    w_b: &Tensor,
    steps: usize,
    expression: &ExpressionCode,
    camera: &Camera,
    seed: u64,
    chunk_rays: usize,
) -> Result<Vec<FloatImage>> {
    if w_a.dim() != w_b.dim() {
        return Err(Error::DimensionMismatch {
            context: "interpolate_identity",
            expected: w_a.len(),
            got: w_b.len(),
        });
    }
    let n = steps.max(1);
    let mut frames = Vec::with_capacity(n);
    for i in 0..n {
        let alpha = if n == 1 {
            0.0
        } else {
            i as f64 / (n - 1) as f64
        };
        let w = w_a * (1.0 - alpha) + w_b * alpha;
        frames.push(
            model
                .render_image(&w, expression, camera, None, seed, chunk_rays)?
                .rgb,
        );
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{geodesic_distance, CameraPose, Intrinsics};
    use crate::config::Config;
    use crate::mesh::toy_head;
    use rand::Rng;

    fn small_cfg() -> Config {
        let mut cfg = Config::default();
        cfg.seed = 31;
        cfg.feature_map.h = 16;
        cfg.feature_map.w = 16;
        cfg.feature_map.channels = 4;
        cfg.feature_map.latent_dim = 8;
        cfg.radiance.k = 4;
        cfg.radiance.n_samples = 8;
        cfg.radiance.hidden = 16;
        cfg.radiance.depth = 2;
        cfg.radiance.bandwidth = 0.4;
        cfg.radiance.offset_octaves = 2;
        cfg.radiance.dir_octaves = 1;
        cfg
    }

    /// A model with signal on every path: output heads randomized away from
    /// their zero init.
    fn warmed_model(cfg: &Config, seed: u64) -> PriorModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = PriorModel::new(cfg.clone(), toy_head(), &mut rng).unwrap();
        for name in ["id.out.w", "expr.out.w", "mlp.sigma.w", "mlp.color.w"] {
            let t = model.params.get_mut(name).unwrap();
            *t = Tensor::from_shape_fn(t.dim(), |_| rng.gen_range(-0.3..0.3));
        }
        model
    }

    fn test_camera(res: usize) -> Camera {
        Camera {
            pose: CameraPose::look_at([0.15, -0.1, 3.2], [0.0, 0.0, 0.0], [0.0, 1.0, 0.0]),
            intr: Intrinsics::square(res),
        }
    }

    fn random_latent(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Tensor {
        Tensor::from_shape_fn((1, dim), |_| rng.gen_range(-scale..scale))
    }

    fn random_correction(rng: &mut ChaCha8Rng, e: usize, scale: f64) -> FittingCorrection {
        FittingCorrection {
            drot: std::array::from_fn(|_| rng.gen_range(-scale..scale)),
            dt: std::array::from_fn(|_| rng.gen_range(-scale..scale)),
            dpsi: (0..e).map(|_| rng.gen_range(-scale..scale)).collect(),
        }
    }

    #[test]
    fn reg_loss_matches_closed_forms_and_scalar_oracle() {
        let e = 5;
        assert_eq!(reg_loss(&[FittingCorrection::zeros(e)]), 0.0);
        let mut single = FittingCorrection::zeros(e);
        single.drot = [0.1, 0.0, 0.0];
        assert!((reg_loss(&[single]) - 0.01).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let corrs: Vec<FittingCorrection> =
            (0..4).map(|_| random_correction(&mut rng, e, 0.8)).collect();
        let mut want = 0.0;
        for c in &corrs {
            for v in c.drot.iter().chain(c.dt.iter()).chain(c.dpsi.iter()) {
                want += v * v;
            }
        }
        assert!((reg_loss(&corrs) - want).abs() < 1e-12);
    }

    #[test]
    fn correction_text_roundtrip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = random_correction(&mut rng, 6, 0.3);
        let path = Path::new("corr.txt");
        let back = FittingCorrection::from_text(&c.to_text(), path).unwrap();
        assert_eq!(c, back);
        assert!(FittingCorrection::from_text("nope", path).is_err());
        assert!(
            FittingCorrection::from_text("headfield-correction v1\ndrot 1 2\ndt 0 0 0\ndpsi 0\n", path)
                .is_err()
        );
    }

    /// Stacking corrections must stay on the rotation manifold.
    #[test]
    fn repeated_corrections_keep_rotations_orthonormal()  {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pose = test_camera(8).pose;
        for _ in 0..200 {
            let drot: Vec3 = std::array::from_fn(|_| rng.gen_range(-0.2..0.2));
            let dt: Vec3 = std::array::from_fn(|_| rng.gen_range(-0.1..0.1));
            pose = pose.corrected(drot, dt);
        }
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| pose.r[i][k] * pose.r[j][k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-9, "RRᵀ[{i}][{j}] = {dot}");
            }
        }
    }

    /// A shot rendered by the model itself, compared against the model on the
    /// same jitter seed, is a perfect reconstruction; λ then decomposes the
    /// objective exactly.
    #[test]
    fn adaptation_loss_zero_on_perfect_shots_and_linear_in_lambda() {
        let cfg = small_cfg();
        let model = warmed_model(&cfg, 40);
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let latent = random_latent(&mut rng, cfg.feature_map.latent_dim, 0.4);
        let code = ExpressionCode::zeros(model.assets.model.n_expressions());
        let cam = test_camera(16);
        let jitter = 4242;
        let img = model
            .render_image(&latent, &code, &cam, None, jitter, 64)
            .unwrap();
        let shots = ShotSet::new(
            vec![Shot {
                image: img.rgb,
                camera: cam,
                expression: code,
            }],
            latent,
        )
        .unwrap();
        let pixels: Vec<Vec<(usize, usize)>> =
            vec![(0..16).flat_map(|y| (0..16).map(move |x| (x, y))).collect()];
        let loss = adaptation_loss(&model, &shots, &pixels, 0.1, jitter, 64).unwrap();
        assert!(loss.abs() < 1e-12, "perfect shot scored {loss}");

        // Nonzero corrections: the objective is affine in λ with slope
        // reg_loss.
        let mut noisy = shots.clone();
        noisy.corrections[0] = random_correction(&mut rng, noisy.corrections[0].dpsi.len(), 0.05);
        let at = |lambda: f64| {
            adaptation_loss(&model, &noisy, &pixels, lambda, jitter, 64).unwrap()
        };
        let (l0, l1) = (at(0.0), at(0.7));
        let reg = reg_loss(&noisy.corrections);
        assert!(reg > 0.0);
        assert!(
            (l1 - l0 - 0.7 * reg).abs() <= 1e-12 * l1.max(1.0),
            "{l1} vs {l0} + 0.7·{reg}"
        );
    }

    /// Analytic translation and rotation gradients through corrected ray
    /// generation against central differences of the scalar objective.
    #[test]
    fn correction_gradients_match_finite_differences() {
        let cfg = small_cfg();
        let model = warmed_model(&cfg, 50);
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let latent = random_latent(&mut rng, cfg.feature_map.latent_dim, 0.4);
        let other = random_latent(&mut rng, cfg.feature_map.latent_dim, 0.4);
        let code = ExpressionCode::zeros(model.assets.model.n_expressions());
        let cam = test_camera(16);
        let jitter = 900;
        // Target from a different latent: a nonzero, smooth error field.
        let img = model
            .render_image(&other, &code, &cam, None, jitter, 64)
            .unwrap();
        let mut shots = ShotSet::new(
            vec![Shot {
                image: img.rgb,
                camera: cam,
                expression: code,
            }],
            latent,
        )
        .unwrap();
        // A base point away from zero so the regularizer pulls too.
        shots.corrections[0].drot = [0.004, -0.006, 0.003];
        shots.corrections[0].dt = [0.005, 0.002, -0.004];
        let pixels: Vec<Vec<(usize, usize)>> = vec![(5..11)
            .flat_map(|y| (5..11).map(move |x| (x, y)))
            .collect()];
        let lambda = 0.2;

        let out = adapt_step(
            &model, &shots, &pixels, lambda, jitter, 64, false, true, true,
        )
        .unwrap();
        // Neighbor sets are piecewise constant in the camera parameters, so
        // the step must be small enough that the ±eps window does not
        // straddle a kNN reselection boundary.
        let eps = 1e-5;
        for (which, base) in [("dt", shots.corrections[0].dt), ("drot", shots.corrections[0].drot)]
        {
            let g = &out.grads[&corr_key(0, which)];
            for k in 0..3 {
                let probe = |delta: f64| {
                    let mut s = shots.clone();
                    let v = match which {
                        "dt" => &mut s.corrections[0].dt,
                        _ => &mut s.corrections[0].drot,
                    };
                    v[k] = base[k] + delta;
                    adaptation_loss(&model, &s, &pixels, lambda, jitter, 64).unwrap()
                };
                let fd = (probe(eps) - probe(-eps)) / (2.0 * eps);
                let got = g[(0, k)];
                let rel = (got - fd).abs() / fd.abs().max(1e-6);
                assert!(
                    rel < 1e-6,
                    "{which}[{k}]: analytic {got:.8e} vs fd {fd:.8e} (rel {rel:.2e})"
                );
            }
        }
    }

    /// Phase 1 must not move decoder weights, and equal seeds must reproduce
    /// the run bit for bit.
    #[test]
    fn inversion_freezes_decoder_and_runs_deterministically() {
        let cfg = small_cfg();
        let model = warmed_model(&cfg, 60);
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let target = random_latent(&mut rng, cfg.feature_map.latent_dim, 0.5);
        let code = ExpressionCode::zeros(model.assets.model.n_expressions());
        let cam = test_camera(16);
        let img = model
            .render_image(&target, &code, &cam, None, 7, 64)
            .unwrap();
        let shots = ShotSet::new(
            vec![Shot {
                image: img.rgb,
                camera: cam,
                expression: code,
            }],
            model.mean_latent(),
        )
        .unwrap();
        let mut schedule = cfg.adapt.clone();
        schedule.inversion_steps = 8;
        schedule.finetune_steps = 0;
        schedule.pixels_per_step = 128;
        schedule.log_every = 0;

        let a = adapt(&model, &shots, &schedule, 99).unwrap();
        let b = adapt(&model, &shots, &schedule, 99).unwrap();
        assert_eq!(a.model.params, model.params, "inversion touched θ");
        assert_eq!(a.trace.len(), 8);
        assert!(a.trace.iter().all(|r| r.phase == "inversion"));
        assert_ne!(a.latent, shots.latent, "latent did not move");
        assert_eq!(a.latent, b.latent);
        for (ra, rb) in a.trace.iter().zip(b.trace.iter()) {
            assert_eq!(ra.loss.to_bits(), rb.loss.to_bits());
        }

        // One fine-tune step does move θ, and labels its phase.
        schedule.finetune_steps = 1;
        let c = adapt(&model, &shots, &schedule, 99).unwrap();
        assert_ne!(c.model.params, model.params);
        assert_eq!(c.trace.last().unwrap().phase, "finetune");
    }

    /// With an overwhelming λ the corrections stay pinned near zero; with
    /// λ = 0 they wander to absorb the injected fitting error.
    #[test]
    fn lambda_extremes_control_correction_magnitude() {
        let cfg = small_cfg();
        let model = warmed_model(&cfg, 70);
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let target = random_latent(&mut rng, cfg.feature_map.latent_dim, 0.5);
        let code = ExpressionCode::zeros(model.assets.model.n_expressions());
        let true_cam = test_camera(16);
        let img = model
            .render_image(&target, &code, &true_cam, None, 7, 64)
            .unwrap();
        // Misfit camera: the shot claims a noticeably wrong pose.
        let fitted = Camera {
            pose: true_cam.pose.corrected([0.04, -0.03, 0.02], [0.015, -0.01, 0.012]),
            intr: true_cam.intr.clone(),
        };
        let shots = ShotSet::new(
            vec![Shot {
                image: img.rgb,
                camera: fitted,
                expression: code,
            }],
            target.clone(),
        )
        .unwrap();
        let mut schedule = cfg.adapt.clone();
        schedule.inversion_steps = 60;
        schedule.finetune_steps = 0;
        schedule.pixels_per_step = 192;
        schedule.log_every = 0;

        schedule.lambda = 1e6;
        let pinned = adapt(&model, &shots, &schedule, 5).unwrap();
        let pinned_norm = reg_loss(&pinned.corrections).sqrt();
        schedule.lambda = 0.0;
        let free = adapt(&model, &shots, &schedule, 5).unwrap();
        let free_norm = reg_loss(&free.corrections).sqrt();
        // Adam's sign-like steps keep an overwhelming λ from reaching exact
        // zero: the corrections oscillate around it at the learning-rate
        // scale (1e-2 here).
        assert!(pinned_norm < 5e-3, "λ→∞ left ‖corr‖ = {pinned_norm}");
        assert!(
            free_norm > 10.0 * pinned_norm,
            "λ=0 norm {free_norm} vs pinned {pinned_norm}"
        );
    }

    /// Self-consistent recovery: three shots of one identity, two handed to
    /// adaptation with their true fittings and one with a perturbed pose.
    /// The clean shots pin the latent down, so the noisy shot's correction
    /// must undo the perturbation — the recovered rotation lands within
    /// 0.012 rad of the truth, and the paired corrections-disabled run ends
    /// with higher reconstruction error. The scene is sharper and more
    /// opaque than the other tests' so pose misalignment actually costs
    /// something relative to the sample-jitter noise floor.
    #[test]
    fn corrections_recover_injected_pose_noise() {
        let mut cfg = small_cfg();
        cfg.radiance.sigma_bias = 1.0;
        cfg.radiance.bandwidth = 0.3;
        cfg.radiance.n_samples = 12;
        let model = {
            let mut rng = ChaCha8Rng::seed_from_u64(80);
            let mut m = PriorModel::new(cfg.clone(), toy_head(), &mut rng).unwrap();
            for name in ["id.out.w", "expr.out.w", "mlp.sigma.w", "mlp.color.w"] {
                let t = m.params.get_mut(name).unwrap();
                *t = Tensor::from_shape_fn(t.dim(), |_| rng.gen_range(-0.6..0.6));
            }
            m
        };
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let target = random_latent(&mut rng, cfg.feature_map.latent_dim, 0.5);
        let code = ExpressionCode::zeros(model.assets.model.n_expressions());
        let true_cams = [
            test_camera(16),
            Camera {
                pose: CameraPose::look_at([-0.9, 0.3, 3.0], [0.0, 0.0, 0.0], [0.0, 1.0, 0.0]),
                intr: Intrinsics::square(16),
            },
            Camera {
                pose: CameraPose::look_at([0.8, 0.5, 2.9], [0.0, 0.0, 0.0], [0.0, 1.0, 0.0]),
                intr: Intrinsics::square(16),
            },
        ];
        // 0.05 rad about a random axis plus a translation nudge, injected
        // into the last shot's fitting only.
        let axis = {
            let v: Vec3 = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            [v[0] / n * 0.05, v[1] / n * 0.05, v[2] / n * 0.05]
        };
        let fitted_last = Camera {
            pose: true_cams[2].pose.corrected(axis, [0.012, -0.01, 0.008]),
            intr: true_cams[2].intr.clone(),
        };
        let shots = ShotSet::new(
            true_cams
                .iter()
                .enumerate()
                .map(|(m, cam)| Shot {
                    image: model
                        .render_image(&target, &code, cam, None, 7 + m as u64, 64)
                        .unwrap()
                        .rgb,
                    camera: if m == 2 { fitted_last.clone() } else { cam.clone() },
                    expression: code.clone(),
                })
                .collect(),
            target.clone(),
        )
        .unwrap();
        let mut schedule = cfg.adapt.clone();
        schedule.inversion_steps = 300;
        schedule.finetune_steps = 0;
        schedule.pixels_per_step = 576;
        schedule.log_every = 0;
        schedule.lr_latent = 3e-3;
        // Small but nonzero: enough pull to stop the corrections from
        // rectifying mini-batch jitter noise into a drift, small enough
        // that shrinkage does not hold the recovery short.
        schedule.lambda = 0.005;

        let with = adapt(&model, &shots, &schedule, 9).unwrap();
        let c = &with.corrections[2];
        let recovered = fitted_last.pose.corrected(c.drot, c.dt);
        let err = geodesic_distance(&recovered.r, &true_cams[2].pose.r);
        assert!(err <= 0.012, "rotation error {err:.4} rad after recovery");
        // The clean shots' corrections have no error to absorb.
        for m in 0..2 {
            let n = with.corrections[m].norm_sq().sqrt();
            assert!(n < 0.04, "clean shot {m} drifted to ‖corr‖ = {n}");
        }

        // Averaging the trailing trace rows washes out per-step jitter noise
        // before comparing the paired runs.
        let tail_mean = |t: &[AdaptLogRow]| {
            let k = 25.min(t.len());
            t[t.len() - k..].iter().map(|r| r.recon).sum::<f64>() / k as f64
        };
        schedule.corrections = false;
        let without = adapt(&model, &shots, &schedule, 9).unwrap();
        let recon_with = tail_mean(&with.trace);
        let recon_without = tail_mean(&without.trace);
        assert!(
            recon_with < recon_without,
            "corrections did not help: {recon_with} vs {recon_without}"
        );
    }

    #[test]
    fn interpolation_hits_endpoints_exactly_and_moves_between() {
        let cfg = small_cfg();
        let model = warmed_model(&cfg, 90);
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        let w_a = random_latent(&mut rng, cfg.feature_map.latent_dim, 0.6);
        let w_b = random_latent(&mut rng, cfg.feature_map.latent_dim, 0.6);
        let code = ExpressionCode::zeros(model.assets.model.n_expressions());
        let cam = test_camera(16);
        let frames = interpolate_identity(&model, &w_a, &w_b, 3, &code, &cam, 17, 64).unwrap();
        assert_eq!(frames.len(), 3);
        let ra = model.render_image(&w_a, &code, &cam, None, 17, 64).unwrap();
        let rb = model.render_image(&w_b, &code, &cam, None, 17, 64).unwrap();
        assert_eq!(frames[0].data, ra.rgb.data);
        assert_eq!(frames[2].data, rb.rgb.data);
        let mad_a = frames[1].mean_abs_diff(&frames[0]);
        let mad_b = frames[1].mean_abs_diff(&frames[2]);
        assert!(mad_a > 0.0 && mad_b > 0.0, "midpoint degenerate");

        let short = random_latent(&mut rng, 4, 0.5);
        assert!(interpolate_identity(&model, &w_a, &short, 3, &code, &cam, 17, 64).is_err());
    }

    #[test]
    fn shot_set_validates_inputs() {
        let cfg = small_cfg();
        let model = warmed_model(&cfg, 95);
        let e = model.assets.model.n_expressions();
        assert!(ShotSet::new(vec![], model.mean_latent()).is_err());
        let cam = test_camera(16);
        let good = Shot {
            image: FloatImage::filled(16, 16, [0.5; 3]),
            camera: cam.clone(),
            expression: ExpressionCode::zeros(e),
        };
        let mut bad_expr = good.clone();
        bad_expr.expression = ExpressionCode::zeros(e + 1);
        assert!(ShotSet::new(vec![good.clone(), bad_expr], Tensor::zeros((1, 8))).is_err());
        let mut bad_size = good.clone();
        bad_size.image = FloatImage::filled(8, 8, [0.5; 3]);
        assert!(ShotSet::new(vec![bad_size], Tensor::zeros((1, 8))).is_err());
        let set = ShotSet::new(vec![good], Tensor::zeros((1, 8))).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.corrections[0], FittingCorrection::zeros(e));
        // Corrected accessors apply the stored increments.
        let mut set2 = set.clone();
        set2.corrections[0].dpsi[0] = 0.25;
        set2.corrections[0].dt = [0.0, 0.0, 0.1];
        assert_eq!(set2.corrected_expression(0).psi[0], 0.25);
        assert!((set2.corrected_camera(0).pose.t[2] - (set.shots[0].camera.pose.t[2] + 0.1)).abs() < 1e-15);
    }
}
