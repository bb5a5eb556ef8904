//! Prior training: the auto-decoding loop over decoder parameters and the
//! per-subject latent table.
//!
//! Each step draws a hierarchical ray batch (subjects → expressions → views →
//! pixels, all without replacement within their level), records one cell
//! graph per sampled (subject, expression), pushes every view's pixels
//! through the chunked renderer, and applies one Adam update in which latents
//! ride a boosted learning rate. Batches and jitter are seeded per step, so a
//! resumed run retraces the interrupted one exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use log::info;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::{Config, PlanConfig};
use crate::diff::{
    adam_step, leaf_map, row, scalar, AdamConfig, AdamState, OpKind, Tape, Tensor, Var,
};
use crate::error::{Error, Result};
use crate::imageio::atomic_write;
use crate::metrics::psnr;
use crate::mesh::MorphableModel;
use crate::pipeline::{build_cell, chunked_l1_sum, latent_key, PriorModel};
use crate::synth::{holdout_cell, Dataset};

/// Salt folded into the master seed for per-step batch draws.
const BATCH_SALT: u64 = 0x4241_5443_4844_5257;
/// Salt folded into the master seed for per-step sample jitter.
const JITTER_SALT: u64 = 0x4A49_5454_4552_5354;
/// Fixed jitter seed for validation renders, so PSNR curves are comparable
/// across steps.
const VAL_JITTER_SEED: u64 = 0x56414C;
/// Subjects rendered per validation pass; full holdout evaluation belongs to
/// offline eval, not the training loop.
const VAL_SUBJECTS: usize = 2;

fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ BATCH_SALT ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn jitter_seed(seed: u64, step: usize) -> u64 {
    seed ^ JITTER_SALT ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

// ---------------------------------------------------------------------------
// Batch sampling
// ---------------------------------------------------------------------------

/// One ray of a training batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RayTask {
    pub subject: usize,
    pub expression: usize,
    pub view: usize,
    /// `(x, y)` in the view image.
    pub pixel: (usize, usize),
}

/// What [`sample_batch`] needs to know about the corpus: level sizes and the
/// per-subject validation cell it must never draw.
#[derive(Debug, Clone)]
pub struct BatchDomain {
    pub n_subjects: usize,
    pub n_expressions: usize,
    pub n_views: usize,
    pub resolution: usize,
    /// `holdout[s]` is subject `s`'s reserved `(expression, view)` cell.
    pub holdout: Vec<(usize, usize)>,
}

impl BatchDomain {
    /// Training-subject domain of a loaded dataset: holdout subjects are
    /// excluded entirely, and each remaining subject reserves its seeded
    /// validation cell.
    pub fn of(ds: &Dataset) -> BatchDomain {
        let n = ds.n_training_subjects();
        let seed = ds.config.seed;
        BatchDomain {
            n_subjects: n,
            n_expressions: ds.n_expressions(),
            n_views: ds.n_views(),
            resolution: ds.config.dataset.resolution,
            holdout: (0..n)
                .map(|s| holdout_cell(seed, s, ds.n_expressions(), ds.n_views()))
                .collect(),
        }
    }
}

/// Draw one hierarchical batch: `subjects_per_step` subjects, for each
/// `expressions_per_subject` expressions, for each `views_per_expression`
/// views, for each `pixels_per_view` pixels — every level sampled uniformly
/// without replacement. A subject's validation cell is skipped at the view
/// level. Fails naming the violated level when a plan wants more than the
/// level holds.
pub fn sample_batch(
    domain: &BatchDomain,
    plan: &PlanConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<RayTask>> {
    if plan.subjects_per_step > domain.n_subjects {
        return Err(Error::PlanInfeasible {
            level: "subjects",
            requested: plan.subjects_per_step,
            available: domain.n_subjects,
        });
    }
    if plan.expressions_per_subject > domain.n_expressions {
        return Err(Error::PlanInfeasible {
            level: "expressions",
            requested: plan.expressions_per_subject,
            available: domain.n_expressions,
        });
    }
    let n_px = domain.resolution * domain.resolution;
    if plan.pixels_per_view > n_px {
        return Err(Error::PlanInfeasible {
            level: "pixels",
            requested: plan.pixels_per_view,
            available: n_px,
        });
    }
    let mut tasks = Vec::with_capacity(plan.rays_per_step());
    for s in index::sample(rng, domain.n_subjects, plan.subjects_per_step).iter() {
        let (he, hv) = domain.holdout[s];
        for e in index::sample(rng, domain.n_expressions, plan.expressions_per_subject).iter() {
            let avail: Vec<usize> = (0..domain.n_views)
                .filter(|&v| !(e == he && v == hv))
                .collect();
            if plan.views_per_expression > avail.len() {
                return Err(Error::PlanInfeasible {
                    level: "views",
                    requested: plan.views_per_expression,
                    available: avail.len(),
                });
            }
            for vi in index::sample(rng, avail.len(), plan.views_per_expression).iter() {
                let v = avail[vi];
                for p in index::sample(rng, n_px, plan.pixels_per_view).iter() {
                    tasks.push(RayTask {
                        subject: s,
                        expression: e,
                        view: v,
                        pixel: (p % domain.resolution, p / domain.resolution),
                    });
                }
            }
        }
    }
    Ok(tasks)
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Mean absolute error over every entry of `pred` vs `gt` (`[n, 3]` color
/// rows): the normalizer is `3n`, so a 0.5 miss on one channel of a single
/// ray costs 0.5/3.
pub fn photometric_loss(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(Error::DimensionMismatch {
            context: "photometric_loss",
            expected: gt.len(),
            got: pred.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument {
            context: "photometric_loss",
            message: "no rays to average over".into(),
        });
    }
    let sum: f64 = pred
        .iter()
        .zip(gt.iter())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Audit the recorded loss graph: the chunk root must be the bare
/// `sum(abs(pred − gt))` chain, and every consumer of a latent leaf must be a
/// `Linear` op (the identity decoder's input layer) — so no norm, penalty, or
/// other regularizer on latents can hide in the objective.
pub fn assert_photometric_only(tape: &Tape, root: Var, latents: &[Var]) {
    assert_eq!(
        tape.op_kind(root),
        OpKind::Sum,
        "loss root must be a plain sum"
    );
    let abs = tape.inputs(root)[0];
    assert_eq!(tape.op_kind(abs), OpKind::Abs, "loss must be an ℓ1");
    let sub = tape.inputs(abs)[0];
    assert_eq!(
        tape.op_kind(sub),
        OpKind::Sub,
        "ℓ1 must be taken over pred − gt"
    );
    for &l in latents {
        for c in tape.consumers(l) {
            assert_eq!(
                tape.op_kind(c),
                OpKind::Linear,
                "latent leaf feeds a non-decoder op"
            );
        }
    }
}

// ---------------------------------------------------------------------------
// Divergence watchdog
// ---------------------------------------------------------------------------

/// Streak counter behind the divergence abort: trips once the loss has
/// stayed above `factor` × the first observed loss for `window` consecutive
/// observations. A window of zero disables the check.
#[derive(Debug, Clone)]
pub struct DivergenceWatch {
    factor: f64,
    window: usize,
    initial: Option<f64>,
    streak: usize,
}

impl DivergenceWatch {
    pub fn new(factor: f64, window: usize) -> DivergenceWatch {
        DivergenceWatch {
            factor,
            window,
            initial: None,
            streak: 0,
        }
    }

    /// Record one loss observation.
    pub fn observe(&mut self, step: usize, loss: f64) -> Result<()> {
        let initial = *self.initial.get_or_insert(loss);
        if self.window == 0 {
            return Ok(());
        }
        if loss > self.factor * initial {
            self.streak += 1;
        } else {
            self.streak = 0;
        }
        if self.streak >= self.window {
            return Err(Error::Diverged {
                step,
                loss,
                initial,
                window: self.window,
            });
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Checkpoints with optimizer state
// ---------------------------------------------------------------------------

/// Write a resumable checkpoint: everything [`PriorModel::save`] stores plus
/// the optimizer moments (`adam.m.*`, `adam.v.*`) and per-key update counts
/// (`adam.t.*`).
pub fn save_train_state(path: &Path, model: &PriorModel, adam: &AdamState) -> Result<()> {
    let mut tensors = model.params.clone();
    for (k, v) in &model.latents {
        tensors.insert(k.clone(), v.clone());
    }
    tensors.insert("meta.step".into(), scalar(model.step as f64));
    for (k, t) in &adam.m {
        tensors.insert(format!("adam.m.{k}"), t.clone());
    }
    for (k, t) in &adam.v {
        tensors.insert(format!("adam.v.{k}"), t.clone());
    }
    for (k, &t) in &adam.t {
        tensors.insert(format!("adam.t.{k}"), scalar(t as f64));
    }
    checkpoint::save(path, &tensors)
}

/// Restore a checkpoint written by [`save_train_state`]. Checkpoints from
/// [`PriorModel::save`] load too; the optimizer then starts cold.
pub fn load_train_state(
    path: &Path,
    config: Config,
    model: MorphableModel,
) -> Result<(PriorModel, AdamState)> {
    let prior = PriorModel::load(path, config, model)?;
    let ck = checkpoint::load(path)?;
    let mut adam = AdamState::new();
    for (name, t) in &ck.tensors {
        if let Some(k) = name.strip_prefix("adam.m.") {
            adam.m.insert(k.to_string(), t.clone());
        } else if let Some(k) = name.strip_prefix("adam.v.") {
            adam.v.insert(k.to_string(), t.clone());
        } else if let Some(k) = name.strip_prefix("adam.t.") {
            adam.t.insert(k.to_string(), t[(0, 0)] as u64);
        }
    }
    Ok((prior, adam))
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// One CSV row of the training log.
#[derive(Debug, Clone, Copy)]
pub struct TrainLogRow {
    pub step: usize,
    pub loss: f64,
    /// Mean holdout-cell PSNR in dB; `NaN` on rows without a validation pass.
    pub val_psnr: f64,
    /// Seconds since the run started.
    pub wall_time: f64,
}

/// Serialize log rows as `step,loss,val_psnr,wall_time` CSV; the PSNR column
/// is blank on non-validation rows.
pub fn log_to_csv(rows: &[TrainLogRow]) -> String {
    let mut s = String::from("step,loss,val_psnr,wall_time\n");
    for r in rows {
        let val = if r.val_psnr.is_nan() {
            String::new()
        } else {
            format!("{:.4}", r.val_psnr)
        };
        let _ = writeln!(s, "{},{:.8},{},{:.3}", r.step, r.loss, val, r.wall_time);
    }
    s
}

/// Mean PSNR over the first `n_subjects` training subjects' held-out
/// (expression, view) cells, rendered with the current latents.
pub fn validation_psnr(model: &PriorModel, dataset: &Dataset, n_subjects: usize) -> Result<f64> {
    let n = dataset.n_training_subjects().min(n_subjects.max(1));
    let seed = dataset.config.seed;
    let mut acc = 0.0;
    for s in 0..n {
        let (e, v) = holdout_cell(seed, s, dataset.n_expressions(), dataset.n_views());
        let out = model.render_image(
            model.latent(s)?,
            dataset.expression(s, e),
            dataset.camera(s, e, v),
            None,
            VAL_JITTER_SEED,
            model.config.train.chunk_rays,
        )?;
        acc += psnr(&out.rgb, dataset.image(s, e, v))?;
    }
    Ok(acc / n as f64)
}

/// One optimization step on a fresh tape: record the cells the batch touches,
/// push every view's pixels through the chunked renderer, and return the mean
/// photometric loss with gradients for the decoder and the sampled latents
/// only. With `audit` set, the first chunk's loss graph is checked by
/// [`assert_photometric_only`].
fn train_step(
    model: &PriorModel,
    dataset: &Dataset,
    tasks: &[RayTask],
    jitter: u64,
    chunk_rays: usize,
    audit: bool,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    // Regroup the flat batch into cells and views; BTreeMap keeps the
    // recording order deterministic.
    let mut cells: BTreeMap<(usize, usize), BTreeMap<usize, Vec<(usize, usize)>>> = BTreeMap::new();
    for t in tasks {
        cells
            .entry((t.subject, t.expression))
            .or_default()
            .entry(t.view)
            .or_default()
            .push(t.pixel);
    }
    let subjects: BTreeSet<usize> = cells.keys().map(|&(s, _)| s).collect();

    let mut tape = Tape::new();
    let params = leaf_map(&mut tape, &model.params);
    let mut latent_vars: BTreeMap<usize, Var> = BTreeMap::new();
    for &s in &subjects {
        latent_vars.insert(s, tape.leaf(model.latent(s)?.clone()));
    }
    let latent_list: Vec<Var> = latent_vars.values().copied().collect();
    let zero3 = tape.constant(row(&[0.0; 3]));

    let n_rays = tasks.len();
    let seed_scale = 1.0 / (3.0 * n_rays as f64);
    let mut total = 0.0;
    let mut audit_pending = audit;
    for (&(s, e), views) in &cells {
        let psi = tape.constant(row(&dataset.expression(s, e).psi));
        let cell = build_cell(
            &mut tape,
            &params,
            &model.assets,
            &model.config,
            latent_vars[&s],
            psi,
        )?;
        let mark = tape.len();
        for (&v, pixels) in views {
            let mut hook = |tp: &Tape, root: Var| assert_photometric_only(tp, root, &latent_list);
            let inspect: Option<&mut dyn FnMut(&Tape, Var)> = if audit_pending {
                Some(&mut hook)
            } else {
                None
            };
            total += chunked_l1_sum(
                &mut tape,
                &params,
                &cell,
                dataset.camera(s, e, v),
                zero3,
                zero3,
                pixels,
                dataset.image(s, e, v),
                &model.config,
                model.bandwidth,
                jitter,
                chunk_rays,
                mark,
                seed_scale,
                inspect,
            )?;
            audit_pending = false;
        }
    }
    let end = tape.len();
    tape.backward_pending(end)?;

    let mut grads = BTreeMap::new();
    for (name, &var) in &params {
        if let Some(g) = tape.grad(var) {
            grads.insert(name.clone(), g.clone());
        }
    }
    for (&s, &var) in &latent_vars {
        if let Some(g) = tape.grad(var) {
            grads.insert(latent_key(s), g.clone());
        }
    }
    Ok((total * seed_scale, grads))
}

/// Merge decoder parameters and latents, apply one Adam update, split back.
fn apply_update(
    model: &mut PriorModel,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    cfg: &AdamConfig,
    latent_lr_scale: f64,
) -> Result<()> {
    let mut merged = std::mem::take(&mut model.params);
    merged.append(&mut model.latents);
    let out = adam_step(&mut merged, grads, state, cfg, |name| {
        if name.starts_with("latent.") {
            latent_lr_scale
        } else {
            1.0
        }
    });
    for (k, v) in merged {
        if k.starts_with("latent.") {
            model.latents.insert(k, v);
        } else {
            model.params.insert(k, v);
        }
    }
    out
}

/// Train the shared prior as an auto-decoder over the corpus.
///
/// Starts fresh (seeded parameter and latent init) or from `resume`, writes
/// `checkpoint.ckpt` and `train_log.csv` into `run_dir`, and returns the
/// trained model with the log of this run. Divergence and non-finite values
/// abort with an error; whatever checkpoint was last written stays on disk.
pub fn train_prior(
    dataset: &Dataset,
    config: &Config,
    model: MorphableModel,
    run_dir: &Path,
    resume: Option<&Path>,
) -> Result<(PriorModel, Vec<TrainLogRow>)> {
    config.validate()?;
    std::fs::create_dir_all(run_dir)?;
    let (mut prior, mut adam) = match resume {
        Some(path) => load_train_state(path, config.clone(), model)?,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let mut m = PriorModel::new(config.clone(), model, &mut rng)?;
            m.init_latents(dataset.n_training_subjects(), &mut rng);
            (m, AdamState::new())
        }
    };
    let domain = BatchDomain::of(dataset);
    let tcfg = config.train.clone();
    let adam_cfg = AdamConfig {
        lr: tcfg.lr,
        ..AdamConfig::default()
    };
    let ckpt_path = run_dir.join("checkpoint.ckpt");
    let log_path = run_dir.join("train_log.csv");
    let mut watch = DivergenceWatch::new(tcfg.divergence_factor, tcfg.divergence_window);
    let mut log: Vec<TrainLogRow> = Vec::new();
    let start = Instant::now();
    let first = prior.step;
    save_train_state(&ckpt_path, &prior, &adam)?;

    for step in first..tcfg.steps {
        let mut rng = step_rng(config.seed, step);
        let tasks = sample_batch(&domain, &tcfg.plan, &mut rng)?;
        let (loss, grads) = train_step(
            &prior,
            dataset,
            &tasks,
            jitter_seed(config.seed, step),
            tcfg.chunk_rays,
            step == first,
        )?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                node: format!("training loss at step {step}"),
                row: 0,
                col: 0,
            });
        }
        watch.observe(step, loss)?;
        apply_update(&mut prior, &grads, &mut adam, &adam_cfg, tcfg.latent_lr_scale)?;
        prior.step = step + 1;

        let done = prior.step == tcfg.steps;
        let validate = done || (tcfg.val_interval > 0 && prior.step % tcfg.val_interval == 0);
        let val = if validate {
            validation_psnr(&prior, dataset, VAL_SUBJECTS)?
        } else {
            f64::NAN
        };
        if done || validate || tcfg.log_every == 0 || prior.step % tcfg.log_every == 0 {
            let wall = start.elapsed().as_secs_f64();
            log.push(TrainLogRow {
                step,
                loss,
                val_psnr: val,
                wall_time: wall,
            });
            atomic_write(&log_path, log_to_csv(&log).as_bytes())?;
            if validate {
                info!("step {step}: loss {loss:.6} val_psnr {val:.2} dB ({wall:.0}s)");
            } else {
                info!("step {step}: loss {loss:.6} ({wall:.0}s)");
            }
        }
        if done || (tcfg.checkpoint_interval > 0 && prior.step % tcfg.checkpoint_interval == 0) {
            save_train_state(&ckpt_path, &prior, &adam)?;
        }
    }
    if prior.step >= tcfg.steps {
        save_train_state(&ckpt_path, &prior, &adam)?;
    }
    Ok((prior, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{plan_rays, stratified_ts, SceneGeometry};
    use crate::mesh::{pose_mesh, toy_head};
    use crate::synth::generate_dataset;
    use tempfile::tempdir;

    fn tiny_domain() -> BatchDomain {
        BatchDomain {
            n_subjects: 5,
            n_expressions: 4,
            n_views: 6,
            resolution: 8,
            holdout: (0..5).map(|s| (s % 4, (s * 2) % 6)).collect(),
        }
    }

    fn plan(s: usize, e: usize, v: usize, p: usize) -> PlanConfig {
        PlanConfig {
            subjects_per_step: s,
            expressions_per_subject: e,
            views_per_expression: v,
            pixels_per_view: p,
        }
    }

    /// Config for a corpus small enough that full training steps take
    /// milliseconds.
    fn tiny_config() -> Config {
        let mut cfg = Config::default();
        cfg.seed = 11;
        cfg.dataset.n_subjects = 3;
        cfg.dataset.n_holdout_subjects = 1;
        cfg.dataset.n_expressions = 2;
        cfg.dataset.n_views = 3;
        cfg.dataset.resolution = 16;
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
        cfg.train.steps = 2;
        cfg.train.plan = plan(1, 1, 2, 24);
        cfg.train.chunk_rays = 64;
        cfg.train.val_interval = 0;
        cfg.train.checkpoint_interval = 0;
        cfg.train.log_every = 1;
        cfg
    }

    fn tiny_dataset(dir: &Path) -> Dataset {
        let cfg = tiny_config();
        generate_dataset(&toy_head(), &cfg, dir).unwrap();
        Dataset::load(dir).unwrap()
    }

    #[test]
    fn paper_scale_plan_yields_expected_task_count() {
        let domain = BatchDomain {
            n_subjects: 40,
            n_expressions: 13,
            n_views: 17,
            resolution: 16,
            holdout: (0..40).map(|s| (s % 13, s % 17)).collect(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tasks = sample_batch(&domain, &plan(16, 4, 8, 256), &mut rng).unwrap();
        assert_eq!(tasks.len(), 131_072);
        let domain = tiny_domain();
        let tasks = sample_batch(&domain, &plan(1, 1, 1, 1), &mut rng).unwrap();
        assert_eq!(tasks.len(), 1);
    }

    #[test]
    fn levels_sample_without_replacement() {
        let domain = tiny_domain();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let tasks = sample_batch(&domain, &plan(3, 3, 4, 10), &mut rng).unwrap();
            let subjects: BTreeSet<usize> = tasks.iter().map(|t| t.subject).collect();
            assert_eq!(subjects.len(), 3, "subjects repeated");
            let mut exprs: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
            let mut views: BTreeMap<(usize, usize), BTreeSet<usize>> = BTreeMap::new();
            let mut pixels: BTreeMap<(usize, usize, usize), BTreeSet<(usize, usize)>> =
                BTreeMap::new();
            for t in &tasks {
                exprs.entry(t.subject).or_default().insert(t.expression);
                views
                    .entry((t.subject, t.expression))
                    .or_default()
                    .insert(t.view);
                pixels
                    .entry((t.subject, t.expression, t.view))
                    .or_default()
                    .insert(t.pixel);
            }
            for set in exprs.values() {
                assert_eq!(set.len(), 3, "expressions repeated within a subject");
            }
            for set in views.values() {
                assert_eq!(set.len(), 4, "views repeated within a cell");
            }
            for set in pixels.values() {
                assert_eq!(set.len(), 10, "pixels repeated within a view");
            }
        }
    }

    #[test]
    fn holdout_cells_are_never_drawn() {
        let domain = tiny_domain();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..300 {
            // Maximal plan: every expression of every subject, all drawable
            // views of each.
            let tasks = sample_batch(&domain, &plan(5, 4, 5, 4), &mut rng).unwrap();
            for t in &tasks {
                assert_ne!(
                    (t.expression, t.view),
                    domain.holdout[t.subject],
                    "validation cell sampled for subject {}",
                    t.subject
                );
            }
        }
    }

    #[test]
    fn infeasible_plans_name_the_violated_level() {
        let domain = tiny_domain();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut level = |p: PlanConfig| match sample_batch(&domain, &p, &mut rng) {
            Err(Error::PlanInfeasible { level, .. }) => level,
            other => panic!("expected PlanInfeasible, got {other:?}"),
        };
        assert_eq!(level(plan(6, 1, 1, 1)), "subjects");
        assert_eq!(level(plan(1, 5, 1, 1)), "expressions");
        assert_eq!(level(plan(1, 1, 1, 65)), "pixels");
        // Six views exist, but the subject's holdout expression only offers
        // five; drawing all four expressions guarantees hitting it.
        assert_eq!(level(plan(5, 4, 6, 1)), "views");
    }

    #[test]
    fn subject_sampling_is_uniform_within_three_sigma() {
        let domain = tiny_domain();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let steps = 10_000;
        let mut counts = vec![0usize; domain.n_subjects];
        for _ in 0..steps {
            for t in sample_batch(&domain, &plan(2, 1, 1, 1), &mut rng).unwrap() {
                counts[t.subject] += 1;
            }
        }
        // Each subject appears with probability 2/5 per step.
        let p = 2.0 / 5.0;
        let mean = steps as f64 * p;
        let sigma = (steps as f64 * p * (1.0 - p)).sqrt();
        for (s, &c) in counts.iter().enumerate() {
            assert!(
                (c as f64 - mean).abs() <= 3.0 * sigma,
                "subject {s} drawn {c} times, expected {mean:.0} ± {:.0}",
                3.0 * sigma
            );
        }
    }

    #[test]
    fn photometric_loss_matches_hand_computed_cases() {
        // A 0.5 error on one channel of one ray in a batch of one: 0.5/3.
        let pred = row(&[0.5, 0.0, 0.0]);
        let gt = row(&[0.0, 0.0, 0.0]);
        assert!((photometric_loss(&pred, &gt).unwrap() - 0.5 / 3.0).abs() < 1e-15);

        // Brute-force oracle on random stacks.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        use rand::Rng;
        let pred = Tensor::from_shape_fn((17, 3), |_| rng.gen_range(-1.0..1.0));
        let gt = Tensor::from_shape_fn((17, 3), |_| rng.gen_range(-1.0..1.0));
        let mut want = 0.0;
        for r in 0..17 {
            for c in 0..3 {
                want += (pred[(r, c)] - gt[(r, c)]).abs();
            }
        }
        want /= 51.0;
        assert!((photometric_loss(&pred, &gt).unwrap() - want).abs() < 1e-12);

        let short = Tensor::zeros((3, 3));
        assert!(matches!(
            photometric_loss(&pred, &short),
            Err(Error::DimensionMismatch { .. })
        ));
        let empty = Tensor::zeros((0, 3));
        assert!(photometric_loss(&empty, &empty).is_err());
    }

    #[test]
    fn divergence_watch_trips_only_after_full_streak() {
        let mut w = DivergenceWatch::new(10.0, 3);
        w.observe(0, 0.05).unwrap();
        w.observe(1, 0.6).unwrap();
        w.observe(2, 0.7).unwrap();
        // A dip resets the streak.
        w.observe(3, 0.1).unwrap();
        w.observe(4, 0.6).unwrap();
        w.observe(5, 0.6).unwrap();
        let err = w.observe(6, 0.8).unwrap_err();
        match err {
            Error::Diverged { step, window, .. } => {
                assert_eq!(step, 6);
                assert_eq!(window, 3);
            }
            other => panic!("unexpected {other:?}"),
        }
        // Window 0 disables the guard entirely.
        let mut off = DivergenceWatch::new(10.0, 0);
        for i in 0..50 {
            off.observe(i, 1e9).unwrap();
        }
    }

    /// With zero-initialized output heads the field has constant density
    /// softplus(sigma_bias) and constant color 0.5, so every sampled ray's
    /// expected color — and hence the whole step-0 loss — reduces to scalar
    /// math over the ray bounds and jitter positions.
    #[test]
    fn step_zero_loss_matches_closed_form() {
        let dir = tempdir().unwrap();
        let dataset = tiny_dataset(dir.path());
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut prior = PriorModel::new(cfg.clone(), toy_head(), &mut rng).unwrap();
        prior.init_latents(dataset.n_training_subjects(), &mut rng);

        let domain = BatchDomain::of(&dataset);
        let mut brng = step_rng(cfg.seed, 0);
        let tasks = sample_batch(&domain, &cfg.train.plan, &mut brng).unwrap();
        let jitter = jitter_seed(cfg.seed, 0);
        let (loss, grads) =
            train_step(&prior, &dataset, &tasks, jitter, cfg.train.chunk_rays, true).unwrap();

        let sigma = (1.0 + cfg.radiance.sigma_bias.exp()).ln();
        let bg = cfg.radiance.background;
        let mut want = 0.0;
        for t in &tasks {
            let code = dataset.expression(t.subject, t.expression);
            let posed = pose_mesh(&prior.assets.model, None, code).unwrap();
            let geom = SceneGeometry::new(posed, cfg.radiance.t_inflate);
            let cam = dataset.camera(t.subject, t.expression, t.view);
            let gt = dataset
                .image(t.subject, t.expression, t.view)
                .pixel(t.pixel.0, t.pixel.1);
            let p = plan_rays(cam, &[t.pixel], &geom);
            if p.n_hit() == 0 {
                for c in 0..3 {
                    want += (bg[c] - gt[c]).abs();
                }
                continue;
            }
            let s = stratified_ts(&p, cfg.radiance.n_samples, jitter, cam.intr.width);
            // The deltas telescope: total optical depth spans first sample to
            // t_far, so opacity has a closed form.
            let span = p.bounds[0].1 - s.ts[0];
            let alpha = 1.0 - (-sigma * span).exp();
            for c in 0..3 {
                want += (alpha * 0.5 + (1.0 - alpha) * bg[c] - gt[c]).abs();
            }
        }
        want /= 3.0 * tasks.len() as f64;
        assert!(
            (loss - want).abs() <= 1e-12 * want.max(1.0),
            "{loss} vs {want}"
        );
        // Latent keys are present in the gradient map. The tensors are exact
        // zeros here — zero output heads cut the chain at init — which is why
        // the flow test below starts from a warmed checkpoint instead.
        assert!(grads.keys().any(|k| k.starts_with("latent.")));
    }

    /// A model whose zero-initialized output heads are randomized, saved as a
    /// resumable checkpoint: gradients reach every parameter from the very
    /// first step.
    fn warmed_checkpoint(cfg: &Config, dataset: &Dataset, path: &Path) -> PriorModel {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut model = PriorModel::new(cfg.clone(), toy_head(), &mut rng).unwrap();
        model.init_latents(dataset.n_training_subjects(), &mut rng);
        for name in ["id.out.w", "expr.out.w", "mlp.sigma.w", "mlp.color.w"] {
            let t = model.params.get_mut(name).unwrap();
            *t = Tensor::from_shape_fn(t.dim(), |_| rng.gen_range(-0.3..0.3));
        }
        save_train_state(path, &model, &AdamState::new()).unwrap();
        model
    }

    /// Only sampled subjects' latents — and their optimizer state — may move
    /// in a step.
    #[test]
    fn training_updates_only_sampled_latents_and_their_moments() {
        let dir = tempdir().unwrap();
        let dataset = tiny_dataset(dir.path());
        let mut cfg = tiny_config();
        cfg.train.steps = 1;
        let warm = tempdir().unwrap();
        let warm_ckpt = warm.path().join("warm.ckpt");
        let start = warmed_checkpoint(&cfg, &dataset, &warm_ckpt);

        let mut brng = step_rng(cfg.seed, 0);
        let tasks = sample_batch(&BatchDomain::of(&dataset), &cfg.train.plan, &mut brng).unwrap();
        let sampled: BTreeSet<usize> = tasks.iter().map(|t| t.subject).collect();
        assert_eq!(sampled.len(), 1);
        let s0 = *sampled.iter().next().unwrap();
        // The gradient w.r.t. the sampled subject's latent is live.
        let (_, grads) = train_step(
            &start,
            &dataset,
            &tasks,
            jitter_seed(cfg.seed, 0),
            cfg.train.chunk_rays,
            false,
        )
        .unwrap();
        assert!(
            grads[&latent_key(s0)].iter().any(|&x| x != 0.0),
            "latent gradient is identically zero"
        );

        let run = tempdir().unwrap();
        let (prior, _) =
            train_prior(&dataset, &cfg, toy_head(), run.path(), Some(&warm_ckpt)).unwrap();
        let (_, adam) = load_train_state(
            &run.path().join("checkpoint.ckpt"),
            cfg.clone(),
            toy_head(),
        )
        .unwrap();
        for s in 0..dataset.n_training_subjects() {
            let key = latent_key(s);
            if sampled.contains(&s) {
                assert_ne!(prior.latents[&key], start.latents[&key], "{key} untouched");
                assert_eq!(adam.t[&key], 1);
            } else {
                assert_eq!(prior.latents[&key], start.latents[&key], "{key} moved");
                assert!(!adam.m.contains_key(&key), "{key} grew optimizer state");
                assert!(!adam.t.contains_key(&key));
            }
        }
        // Decoder parameters took their update too.
        assert_eq!(adam.t["mlp.sigma.w"], 1);
    }

    #[test]
    fn training_is_deterministic_and_resumable_to_identical_losses() {
        let dir = tempdir().unwrap();
        let dataset = tiny_dataset(dir.path());
        let mut cfg = tiny_config();
        cfg.train.steps = 3;

        let run_a = tempdir().unwrap();
        let (prior_a, log_a) = train_prior(&dataset, &cfg, toy_head(), run_a.path(), None).unwrap();
        let run_b = tempdir().unwrap();
        let (prior_b, log_b) = train_prior(&dataset, &cfg, toy_head(), run_b.path(), None).unwrap();
        assert_eq!(prior_a.params, prior_b.params);
        assert_eq!(prior_a.latents, prior_b.latents);
        for (a, b) in log_a.iter().zip(log_b.iter()) {
            assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        }

        // Stop after two steps, resume for the third: the resumed step's loss
        // must match the uninterrupted run's bit for bit (the checkpoint
        // stores exact f64s and batches are seeded per step).
        let mut short = cfg.clone();
        short.train.steps = 2;
        let run_c = tempdir().unwrap();
        let (_, _) = train_prior(&dataset, &short, toy_head(), run_c.path(), None).unwrap();
        let ckpt = run_c.path().join("checkpoint.ckpt");
        let run_d = tempdir().unwrap();
        let (prior_d, log_d) =
            train_prior(&dataset, &cfg, toy_head(), run_d.path(), Some(&ckpt)).unwrap();
        assert_eq!(log_d.len(), 1);
        assert_eq!(log_d[0].step, 2);
        let straight = log_a.iter().find(|r| r.step == 2).unwrap();
        assert!(
            (log_d[0].loss - straight.loss).abs() <= 1e-12 * straight.loss.max(1.0),
            "{} vs {}",
            log_d[0].loss,
            straight.loss
        );
        assert_eq!(prior_a.params, prior_d.params);
        assert_eq!(prior_a.latents, prior_d.latents);
    }

    #[test]
    fn training_writes_log_and_checkpoint_artifacts() {
        let dir = tempdir().unwrap();
        let dataset = tiny_dataset(dir.path());
        let mut cfg = tiny_config();
        cfg.train.steps = 2;
        cfg.train.val_interval = 2;
        cfg.train.checkpoint_interval = 1;
        let run = tempdir().unwrap();
        let (prior, log) = train_prior(&dataset, &cfg, toy_head(), run.path(), None).unwrap();
        assert_eq!(prior.step, 2);
        assert!(log.iter().all(|r| r.loss.is_finite() && r.loss > 0.0));
        assert!(log.last().unwrap().val_psnr.is_finite());
        assert!(log.windows(2).all(|w| w[0].wall_time <= w[1].wall_time));

        let csv = std::fs::read_to_string(run.path().join("train_log.csv")).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "step,loss,val_psnr,wall_time");
        assert_eq!(lines.count(), log.len());

        let (re, adam) = load_train_state(
            &run.path().join("checkpoint.ckpt"),
            cfg.clone(),
            toy_head(),
        )
        .unwrap();
        assert_eq!(re.step, 2);
        assert_eq!(re.params, prior.params);
        assert!(adam.t.values().all(|&t| t <= 2));
        // Renders from the restored model are byte-identical.
        let code = dataset.expression(0, 0);
        let cam = dataset.camera(0, 0, 0);
        let a = prior
            .render_image(prior.latent(0).unwrap(), code, cam, None, 3, 64)
            .unwrap();
        let b = re
            .render_image(re.latent(0).unwrap(), code, cam, None, 3, 64)
            .unwrap();
        assert_eq!(a.rgb.data, b.rgb.data);
    }

    #[test]
    fn short_training_reduces_the_loss() {
        let dir = tempdir().unwrap();
        let dataset = tiny_dataset(dir.path());
        let mut cfg = tiny_config();
        cfg.train.steps = 60;
        cfg.train.lr = 2e-3;
        cfg.train.plan = plan(2, 2, 2, 32);
        let warm = tempdir().unwrap();
        let warm_ckpt = warm.path().join("warm.ckpt");
        warmed_checkpoint(&cfg, &dataset, &warm_ckpt);
        let run = tempdir().unwrap();
        let (_, log) =
            train_prior(&dataset, &cfg, toy_head(), run.path(), Some(&warm_ckpt)).unwrap();
        let head: f64 = log[..5].iter().map(|r| r.loss).sum::<f64>() / 5.0;
        let tail: f64 = log[log.len() - 5..].iter().map(|r| r.loss).sum::<f64>() / 5.0;
        assert!(
            tail < 0.8 * head,
            "loss did not fall: first {head:.4}, last {tail:.4}"
        );
    }
}
