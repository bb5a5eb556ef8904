//! Run configuration: one TOML file drives data generation, training,
//! adaptation, rendering, and evaluation.
//!
//! Every section has desk-scale defaults, so an empty file is a valid config.
//! Command-line manifests written by the binary are themselves valid configs
//! (extra tables such as `[run]` are ignored on load), which keeps every run
//! reproducible from its manifest alone.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Feature-map geometry shared by the identity and expression branches.
///
/// Both branches emit `channels`-deep maps because they are summed texel-wise;
/// a single field makes that equality structural.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureMapConfig {
    /// Map height in texels (power of two, >= 16).
    pub h: usize,
    /// Map width in texels (power of two, >= 16).
    pub w: usize,
    /// Channels per texel in each branch's output map.
    pub channels: usize,
    /// Identity latent dimensionality.
    pub latent_dim: usize,
}

impl Default for FeatureMapConfig {
    fn default() -> Self {
        FeatureMapConfig {
            h: 64,
            w: 64,
            channels: 16,
            latent_dim: 64,
        }
    }
}

/// Radiance field and volume renderer settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RadianceConfig {
    /// Neighbors aggregated per query point.
    pub k: usize,
    /// Stratified samples per ray.
    pub n_samples: usize,
    /// Inverse-distance bandwidth; `0.0` means half the mean edge length of
    /// the neutral mesh, resolved at model build time.
    pub bandwidth: f64,
    /// Positional-encoding octaves for query-to-vertex offsets.
    pub offset_octaves: usize,
    /// Positional-encoding octaves for view directions.
    pub dir_octaves: usize,
    /// Width of the radiance MLP hidden layers.
    pub hidden: usize,
    /// Number of hidden layers before the density head.
    pub depth: usize,
    /// Bias added inside the density softplus; negative values start the
    /// field near-transparent so early training sees the background.
    pub sigma_bias: f64,
    /// Fixed background color composited behind the field.
    pub background: [f64; 3],
    /// Multiplier on the posed-mesh bounding-sphere radius when deriving
    /// per-ray near/far bounds.
    pub t_inflate: f64,
}

impl Default for RadianceConfig {
    fn default() -> Self {
        RadianceConfig {
            k: 8,
            n_samples: 64,
            bandwidth: 0.0,
            offset_octaves: 4,
            dir_octaves: 2,
            hidden: 64,
            depth: 3,
            sigma_bias: -3.0,
            background: [1.0, 1.0, 1.0],
            t_inflate: 1.2,
        }
    }
}

/// Synthetic corpus shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    /// Total subjects generated (training plus held-out).
    pub n_subjects: usize,
    /// Subjects excluded from prior training, reserved for adaptation.
    pub n_holdout_subjects: usize,
    /// Expressions per subject; expression 0 is neutral.
    pub n_expressions: usize,
    /// Camera views per expression.
    pub n_views: usize,
    /// Square image resolution in pixels.
    pub resolution: usize,
    /// Camera orbit radius in mesh units.
    pub camera_radius: f64,
    /// Maximum polar angle of the view spiral, radians from the front axis.
    pub max_polar: f64,
    /// Scale of per-subject identity shape coefficients.
    pub identity_scale: f64,
    /// Scale of per-expression code magnitudes.
    pub expression_scale: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_subjects: 24,
            n_holdout_subjects: 2,
            n_expressions: 5,
            n_views: 7,
            resolution: 64,
            camera_radius: 3.2,
            max_polar: 0.9,
            identity_scale: 1.0,
            expression_scale: 1.0,
        }
    }
}

/// Hierarchical per-step sampling plan: how many subjects per step,
/// expressions per subject, views per expression, pixels per view.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanConfig {
    pub subjects_per_step: usize,
    pub expressions_per_subject: usize,
    pub views_per_expression: usize,
    pub pixels_per_view: usize,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig {
            subjects_per_step: 4,
            expressions_per_subject: 2,
            views_per_expression: 4,
            pixels_per_view: 64,
        }
    }
}

impl PlanConfig {
    /// Rays drawn per optimization step.
    pub fn rays_per_step(&self) -> usize {
        self.subjects_per_step
            * self.expressions_per_subject
            * self.views_per_expression
            * self.pixels_per_view
    }
}

/// Prior-training schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Total optimization steps.
    pub steps: usize,
    /// Adam learning rate for shared parameters.
    pub lr: f64,
    /// Multiplier on `lr` for per-subject latents.
    pub latent_lr_scale: f64,
    /// Standard deviation of the latent initialization.
    pub latent_init_std: f64,
    /// Per-step batch composition.
    pub plan: PlanConfig,
    /// Rays per backward chunk; affects memory, not results.
    pub chunk_rays: usize,
    /// Steps between held-out-cell validation renders (0 disables).
    pub val_interval: usize,
    /// Steps between checkpoint writes (0 disables intermediate saves).
    pub checkpoint_interval: usize,
    /// Steps between loss-log lines.
    pub log_every: usize,
    /// Abort when the windowed mean loss exceeds this multiple of the
    /// initial windowed mean.
    pub divergence_factor: f64,
    /// Window length (steps) for the divergence check.
    pub divergence_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 6000,
            lr: 5e-4,
            latent_lr_scale: 10.0,
            latent_init_std: 0.01,
            plan: PlanConfig::default(),
            chunk_rays: 128,
            val_interval: 500,
            checkpoint_interval: 1000,
            log_every: 25,
            divergence_factor: 10.0,
            divergence_window: 100,
        }
    }
}

/// Two-phase adaptation schedule for unseen subjects.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    /// Phase-1 steps: latent (and fitting corrections) only, decoder frozen.
    pub inversion_steps: usize,
    /// Phase-2 steps: joint latent + decoder fine-tuning.
    pub finetune_steps: usize,
    /// Weight of the squared-norm regularizer on fitting corrections.
    pub lambda: f64,
    /// Learning rate for the latent and the corrections.
    pub lr_latent: f64,
    /// Learning rate for decoder parameters in phase 2.
    pub lr_theta: f64,
    /// Pixels sampled per step across all shots.
    pub pixels_per_step: usize,
    /// Optimize per-image fitting corrections alongside the latent.
    pub corrections: bool,
    /// Rays per backward chunk; affects memory, not results.
    pub chunk_rays: usize,
    /// Steps between loss-log lines.
    pub log_every: usize,
    /// Abort when the windowed mean loss exceeds this multiple of the
    /// initial windowed mean.
    pub divergence_factor: f64,
    /// Window length (steps) for the divergence check.
    pub divergence_window: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            inversion_steps: 300,
            finetune_steps: 1000,
            lambda: 0.1,
            lr_latent: 1e-2,
            lr_theta: 5e-4,
            pixels_per_step: 512,
            corrections: true,
            chunk_rays: 128,
            log_every: 25,
            divergence_factor: 10.0,
            divergence_window: 100,
        }
    }
}

/// Top-level configuration; every field has a working desk-scale default.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    /// Master seed; all stochastic stages derive their streams from it.
    pub seed: u64,
    pub feature_map: FeatureMapConfig,
    pub radiance: RadianceConfig,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub adapt: AdaptConfig,
}

impl Config {
    /// Parse a config from TOML text. Unknown keys are ignored so that run
    /// manifests (which add a `[run]` table) load as configs.
    pub fn from_toml(text: &str) -> Result<Config> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read {}: {e}", path.display()))
        })?;
        Config::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Reject values the pipeline cannot run with.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        let fm = &self.feature_map;
        if fm.h < 16 || !fm.h.is_power_of_two() || fm.w < 16 || !fm.w.is_power_of_two() {
            return fail(format!(
                "feature_map.h/w must be powers of two >= 16, got {}x{}",
                fm.h, fm.w
            ));
        }
        if fm.channels == 0 || fm.latent_dim == 0 {
            return fail("feature_map.channels and latent_dim must be positive".into());
        }
        let r = &self.radiance;
        if r.k == 0 {
            return fail("radiance.k must be positive".into());
        }
        if r.n_samples == 0 {
            return fail("radiance.n_samples must be positive".into());
        }
        if r.bandwidth < 0.0 {
            return fail("radiance.bandwidth must be nonnegative".into());
        }
        if r.hidden == 0 || r.depth == 0 {
            return fail("radiance.hidden and depth must be positive".into());
        }
        if r.t_inflate <= 0.0 {
            return fail("radiance.t_inflate must be positive".into());
        }
        if r.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return fail("radiance.background components must lie in [0, 1]".into());
        }
        let d = &self.dataset;
        if d.n_subjects == 0 || d.n_expressions == 0 || d.n_views == 0 {
            return fail("dataset counts must be positive".into());
        }
        if d.n_holdout_subjects >= d.n_subjects {
            return fail(format!(
                "dataset.n_holdout_subjects ({}) must leave at least one training subject (n_subjects = {})",
                d.n_holdout_subjects, d.n_subjects
            ));
        }
        if d.resolution == 0 {
            return fail("dataset.resolution must be positive".into());
        }
        if d.camera_radius <= 0.0 {
            return fail("dataset.camera_radius must be positive".into());
        }
        let p = &self.train.plan;
        if p.subjects_per_step == 0
            || p.expressions_per_subject == 0
            || p.views_per_expression == 0
            || p.pixels_per_view == 0
        {
            return fail("train.plan counts must be positive".into());
        }
        if self.train.chunk_rays == 0 || self.adapt.chunk_rays == 0 {
            return fail("chunk_rays must be positive".into());
        }
        if self.train.latent_init_std < 0.0 {
            return fail("train.latent_init_std must be nonnegative".into());
        }
        if self.adapt.lambda < 0.0 {
            return fail("adapt.lambda must be nonnegative".into());
        }
        if self.adapt.pixels_per_step == 0 {
            return fail("adapt.pixels_per_step must be positive".into());
        }
        Ok(())
    }
}
