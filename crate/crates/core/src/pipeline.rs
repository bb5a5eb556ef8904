//! Model assembly: the trained state (decoder parameters plus the per-subject
//! latent table), the differentiable per-cell graph from codes to anchored
//! vertex features, and chunked rendering.
//!
//! A "cell" is one (latent, expression) pair: its graph runs latent →
//! identity map, expression code → posed vertices → UV displacement map →
//! expression map, sums the maps, and samples them at vertex UVs. Ray chunks
//! are appended after the cell prefix, swept with [`Tape::backward_partial`],
//! and truncated, so memory stays bounded by one chunk regardless of how many
//! rays a step touches.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::camera::{Camera, Vec3};
use crate::checkpoint;
use crate::config::Config;
use crate::diff::{row, scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::features::{
    anchor_features, check_finite_params, expression_features, identity_features,
    init_generator_params,
};
use crate::field::{
    init_radiance_params, plan_rays, render_rays, resolve_bandwidth, stratified_ts,
    SceneGeometry,
};
use crate::imageio::FloatImage;
use crate::mesh::{ExpressionCode, MorphableModel};
use crate::uv::UvRaster;

/// Constant lookup tables derived from the morphable model: the blendshape
/// matrix for posing on the tape and the UV gather tables for differentiable
/// displacement rasterization.
#[derive(Debug, Clone)]
pub struct ModelAssets {
    pub model: MorphableModel,
    /// `[1, 3V]` flattened neutral vertices (the posing bias).
    pub neutral_flat: Tensor,
    /// `[V, 3]` neutral vertices.
    pub neutral: Tensor,
    /// `[3V, E]` expression basis as a matrix (the posing weight for
    /// `linear`'s `y = x·wᵀ + b` convention).
    pub blend_w: Tensor,
    raster_verts: Arc<Vec<usize>>,
    raster_texels: Arc<Vec<usize>>,
    /// `[3T, 1]` barycentric weights aligned with the gather tables.
    raster_weights: Tensor,
}

impl ModelAssets {
    pub fn new(model: MorphableModel, cfg: &Config) -> ModelAssets {
        let v = model.n_vertices();
        let e = model.n_expressions();
        let mut neutral_flat = Tensor::zeros((1, 3 * v));
        let mut neutral = Tensor::zeros((v, 3));
        for (i, p) in model.neutral_vertices.iter().enumerate() {
            for a in 0..3 {
                neutral_flat[(0, 3 * i + a)] = p[a];
                neutral[(i, a)] = p[a];
            }
        }
        let mut blend_w = Tensor::zeros((3 * v, e));
        for (ei, basis) in model.expression_basis.iter().enumerate() {
            for (i, b) in basis.iter().enumerate() {
                for a in 0..3 {
                    blend_w[(3 * i + a, ei)] = b[a];
                }
            }
        }
        let raster = UvRaster::build(&model, cfg.feature_map.h, cfg.feature_map.w);
        let (verts, weights, texels) = raster.gather_tables();
        let raster_weights =
            Tensor::from_shape_fn((weights.len(), 1), |(i, _)| weights[i]);
        ModelAssets {
            model,
            neutral_flat,
            neutral,
            blend_w,
            raster_verts: Arc::new(verts),
            raster_texels: Arc::new(texels),
            raster_weights,
        }
    }
}

/// The differentiable prefix of one (latent, expression) cell plus the
/// value-level geometry every ray of the cell shares.
pub struct CellTape {
    /// `[V, 3]` posed vertices; gradients flow to the expression code.
    pub posed: Var,
    /// `[V, channels]` anchored features; gradients flow to the latent, the
    /// decoder, and (through the displacement map) the expression code.
    pub feats: Var,
    pub geom: SceneGeometry,
}

/// Record the cell prefix on the tape. `latent` is `[1, latent_dim]`; `psi`
/// is `[1, E]` — a constant during prior training, a corrected sum during
/// adaptation so that expression-code gradients reach both the displacement
/// map and the anchor positions.
pub fn build_cell(
    tape: &mut Tape,
    params: &BTreeMap<String, Var>,
    assets: &ModelAssets,
    cfg: &Config,
    latent: Var,
    psi: Var,
) -> Result<CellTape> {
    let v = assets.model.n_vertices();
    let blend = tape.constant(assets.blend_w.clone());
    let bias = tape.constant(assets.neutral_flat.clone());
    let posed_flat = tape.linear(psi, blend, bias);
    let posed = tape.reshape(posed_flat, v, 3);

    let neutral = tape.constant(assets.neutral.clone());
    let disp = tape.sub(posed, neutral);
    let gathered = tape.gather_rows(disp, assets.raster_verts.clone());
    let wconst = tape.constant(assets.raster_weights.clone());
    let weighted = tape.scale_rows(gathered, wconst);
    let disp_map = tape.segment_sum(
        weighted,
        assets.raster_texels.clone(),
        cfg.feature_map.h * cfg.feature_map.w,
    );

    let fi = identity_features(tape, params, latent, &cfg.feature_map)?;
    let fe = expression_features(tape, params, disp_map, &cfg.feature_map)?;
    let combined = tape.add(fi, fe);
    let feats = anchor_features(tape, combined, &cfg.feature_map, &assets.model.uv_coords);

    let posed_vals = tape.value(posed);
    let posed_vec: Vec<Vec3> = posed_vals
        .rows()
        .into_iter()
        .map(|r| [r[0], r[1], r[2]])
        .collect();
    let geom = SceneGeometry::new(posed_vec, cfg.radiance.t_inflate);
    Ok(CellTape { posed, feats, geom })
}

/// Key of subject `s` in the latent table and in checkpoints.
pub fn latent_key(subject: usize) -> String {
    format!("latent.subject_{subject:04}")
}

/// The trained state: decoder parameters (`id.*`, `expr.*`, `mlp.*`), the
/// per-subject latent table, and everything needed to rebuild cell graphs.
#[derive(Debug, Clone)]
pub struct PriorModel {
    pub config: Config,
    pub assets: ModelAssets,
    pub params: BTreeMap<String, Tensor>,
    pub latents: BTreeMap<String, Tensor>,
    pub bandwidth: f64,
    /// Training steps completed (for resume and logs).
    pub step: usize,
}

impl PriorModel {
    /// Fresh model with seeded parameter init and an empty latent table.
    pub fn new(config: Config, model: MorphableModel, rng: &mut ChaCha8Rng) -> Result<PriorModel> {
        config.validate()?;
        let mut params = init_generator_params(&config.feature_map, rng);
        params.extend(init_radiance_params(
            &config.radiance,
            config.feature_map.channels,
            rng,
        ));
        let bandwidth = resolve_bandwidth(&config.radiance, &model);
        let assets = ModelAssets::new(model, &config);
        Ok(PriorModel {
            config,
            assets,
            params,
            latents: BTreeMap::new(),
            bandwidth,
            step: 0,
        })
    }

    /// Draw `n_subjects` latents from `N(0, latent_init_std²)`.
    pub fn init_latents(&mut self, n_subjects: usize, rng: &mut ChaCha8Rng) {
        let std = self.config.train.latent_init_std;
        let l = self.config.feature_map.latent_dim;
        for s in 0..n_subjects {
            let t = Tensor::from_shape_fn((1, l), |_| {
                std * rng.sample::<f64, _>(StandardNormal)
            });
            self.latents.insert(latent_key(s), t);
        }
    }

    /// Arithmetic mean of the latent table; the adaptation initializer.
    pub fn mean_latent(&self) -> Tensor {
        let l = self.config.feature_map.latent_dim;
        let mut acc = Tensor::zeros((1, l));
        if self.latents.is_empty() {
            return acc;
        }
        for t in self.latents.values() {
            acc += t;
        }
        acc / self.latents.len() as f64
    }

    /// Bundle decoder parameters, latents, and progress into one checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = self.params.clone();
        for (k, v) in &self.latents {
            tensors.insert(k.clone(), v.clone());
        }
        tensors.insert("meta.step".into(), scalar(self.step as f64));
        checkpoint::save(path, &tensors)
    }

    /// Restore a model saved by [`PriorModel::save`]. The config and mesh are
    /// not stored in the checkpoint; the caller supplies the same ones it was
    /// trained with (normally from the run manifest), and the decoder key set
    /// is verified against a fresh init of that config.
    pub fn load(path: &Path, config: Config, model: MorphableModel) -> Result<PriorModel> {
        let ck = checkpoint::load(path)?;
        let step = ck.scalar("meta.step")? as usize;
        let mut fresh = PriorModel::new(config, model, &mut ChaCha8Rng::seed_from_u64(0))?;
        let mut params = BTreeMap::new();
        let mut latents = BTreeMap::new();
        for (name, tensor) in &ck.tensors {
            if name.starts_with("latent.") {
                latents.insert(name.clone(), tensor.clone());
            } else if !name.starts_with("meta.") && !name.starts_with("adam.") {
                params.insert(name.clone(), tensor.clone());
            }
        }
        for (name, tensor) in &params {
            match fresh.params.get(name) {
                Some(t) if t.dim() == tensor.dim() => {}
                Some(t) => {
                    return Err(Error::Checkpoint(format!(
                        "tensor {name} has shape {:?}, config wants {:?}",
                        tensor.dim(),
                        t.dim()
                    )))
                }
                None => {
                    return Err(Error::Checkpoint(format!(
                        "checkpoint tensor {name} not part of this architecture"
                    )))
                }
            }
        }
        for name in fresh.params.keys() {
            if !params.contains_key(name) {
                return Err(Error::Checkpoint(format!("checkpoint missing tensor {name}")));
            }
        }
        check_finite_params(&params)?;
        fresh.params = params;
        fresh.latents = latents;
        fresh.step = step;
        Ok(fresh)
    }

    pub fn latent(&self, subject: usize) -> Result<&Tensor> {
        self.latents
            .get(&latent_key(subject))
            .ok_or_else(|| Error::Checkpoint(format!("no latent for subject {subject}")))
    }

    /// Render a full frame with constant inputs (no gradients), chunked so
    /// peak memory is one chunk. Misses render as exact background with zero
    /// opacity.
    pub fn render_image(
        &self,
        latent: &Tensor,
        psi: &ExpressionCode,
        camera: &Camera,
        corrections: Option<(Vec3, Vec3)>,
        seed: u64,
        chunk_rays: usize,
    ) -> Result<RenderedImage> {
        let mut tape = Tape::new();
        let params = crate::diff::constant_map(&mut tape, &self.params);
        let latent_v = tape.constant(latent.clone());
        let psi_v = tape.constant(row(&psi.psi));
        let cell = build_cell(&mut tape, &params, &self.assets, &self.config, latent_v, psi_v)?;
        let (drot, dt) = corrections.unwrap_or(([0.0; 3], [0.0; 3]));
        let drot_v = tape.constant(row(&drot));
        let dt_v = tape.constant(row(&dt));
        let mark = tape.len();

        let (w, h) = (camera.intr.width, camera.intr.height);
        let bg = self.config.radiance.background;
        let mut rgb = FloatImage::filled(h, w, bg);
        let mut opacity = vec![0.0; h * w];
        let pixels: Vec<(usize, usize)> =
            (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).collect();
        for chunk in pixels.chunks(chunk_rays.max(1)) {
            let plan = plan_rays(camera, chunk, &cell.geom);
            if plan.n_hit() > 0 {
                let samples = stratified_ts(&plan, self.config.radiance.n_samples, seed, w);
                let out = render_rays(
                    &mut tape,
                    &params,
                    cell.posed,
                    cell.feats,
                    camera,
                    drot_v,
                    dt_v,
                    &plan,
                    &samples,
                    &cell.geom,
                    &self.config.radiance,
                    self.bandwidth,
                );
                tape.check_finite(out)?;
                let vals = tape.value(out);
                for (r, &(px, py)) in plan.hit_pixels.iter().enumerate() {
                    for c in 0..3 {
                        rgb.data[(py * w + px, c)] = vals[(r, c)];
                    }
                    opacity[py * w + px] = vals[(r, 3)];
                }
            }
            tape.truncate(mark);
        }
        Ok(RenderedImage { rgb, opacity })
    }
}

use rand::SeedableRng;

/// A rendered frame: RGB plus per-pixel accumulated opacity (1 − T).
pub struct RenderedImage {
    pub rgb: FloatImage,
    /// Row-major `h*w` opacities; zero where the ray missed the scene bounds.
    pub opacity: Vec<f64>,
}

/// One optimization target: a set of pixels of one camera/cell with ground
/// truth, rendered and reduced to a summed ℓ1 chunk by chunk. Gradients stop
/// at `mark` (the cell-prefix boundary); the caller finishes with
/// [`Tape::backward_pending`] once all batches of the step are in. Returns the
/// summed absolute error over all listed pixels (misses contribute their
/// constant background error) — divide by `3 · n_rays` for the mean.
///
/// `inspect`, when given, is called with the live tape and each chunk's root
/// node before it is swept; training uses it to audit the loss graph.
#[allow(clippy::too_many_arguments)]
pub fn chunked_l1_sum(
    tape: &mut Tape,
    params: &BTreeMap<String, Var>,
    cell: &CellTape,
    camera: &Camera,
    drot: Var,
    dt: Var,
    pixels: &[(usize, usize)],
    target: &FloatImage,
    cfg: &Config,
    bandwidth: f64,
    sample_seed: u64,
    chunk_rays: usize,
    mark: usize,
    seed_scale: f64,
    mut inspect: Option<&mut dyn FnMut(&Tape, Var)>,
) -> Result<f64> {
    let bg = cfg.radiance.background;
    let mut total = 0.0;
    for chunk in pixels.chunks(chunk_rays.max(1)) {
        let plan = plan_rays(camera, chunk, &cell.geom);
        // Missed rays are exact background; their error is a constant.
        let mut hit = vec![false; chunk.len()];
        for &i in &plan.hit_indices {
            hit[i] = true;
        }
        for (i, &(px, py)) in chunk.iter().enumerate() {
            if !hit[i] {
                let gt = target.pixel(px, py);
                for c in 0..3 {
                    total += (bg[c] - gt[c]).abs();
                }
            }
        }
        if plan.n_hit() == 0 {
            continue;
        }
        let samples = stratified_ts(&plan, cfg.radiance.n_samples, sample_seed, camera.intr.width);
        let out = render_rays(
            tape,
            params,
            cell.posed,
            cell.feats,
            camera,
            drot,
            dt,
            &plan,
            &samples,
            &cell.geom,
            &cfg.radiance,
            bandwidth,
        );
        let rgb = tape.slice_cols(out, 0, 3);
        let gt = Tensor::from_shape_fn((plan.n_hit(), 3), |(r, c)| {
            let (px, py) = plan.hit_pixels[r];
            target.pixel(px, py)[c]
        });
        let gt = tape.constant(gt);
        let diff = tape.sub(rgb, gt);
        let adiff = tape.abs(diff);
        let chunk_sum = tape.sum(adiff);
        tape.check_finite(chunk_sum)?;
        if let Some(hook) = inspect.as_deref_mut() {
            hook(tape, chunk_sum);
        }
        total += tape.value(chunk_sum)[(0, 0)];
        if seed_scale != 0.0 {
            tape.backward_partial(
                vec![(chunk_sum, Tensor::from_elem((1, 1), seed_scale))],
                mark,
            )?;
        }
        tape.truncate(mark);
    }
    Ok(total)
}
