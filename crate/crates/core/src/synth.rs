//! Synthetic multi-view multi-expression corpus.
//!
//! A deterministic "teacher" — an analytic Lambertian rasterizer over the
//! morphable head with a per-subject procedural albedo — stands in for real
//! capture. Everything derives from the master seed: the shared expression
//! codes, the camera rig, and each subject's shape and texture, so a dataset
//! regenerates byte-identically. Teacher parameters are written only to a
//! `.withheld` sidecar per subject; training and adaptation never read it.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::camera::{
    cross, dot, mat_vec, normalize, sub, Camera, CameraPose, Intrinsics, Vec3,
};
use crate::config::{Config, DatasetConfig};
use crate::error::{Error, Result};
use crate::imageio::{atomic_write, load_png, save_png, FloatImage};
use crate::mesh::{centroid, pose_mesh, ExpressionCode, MorphableModel};

/// Azimuth increment of the view spiral: π(3 − √5).
pub fn golden_angle() -> f64 {
    std::f64::consts::PI * (3.0 - 5.0_f64.sqrt())
}

/// Ambient term of the teacher shader.
pub const TEACHER_AMBIENT: f64 = 0.35;
/// Diffuse weight of the teacher shader.
pub const TEACHER_DIFFUSE: f64 = 0.65;

/// Fixed world-space light direction (from surface towards the light).
pub fn teacher_light() -> Vec3 {
    normalize([0.35, 0.45, 0.82])
}

/// Deterministic spiral rig on the front hemisphere: polar angle grows as
/// `max_polar · sqrt(i/(n−1))` while azimuth steps by the golden angle, which
/// spaces views evenly over the spherical cap. Every camera sits at
/// `camera_radius` from `target` and looks at it; view 0 is exactly frontal
/// on the +Z axis.
pub fn make_cameras(ds: &DatasetConfig, target: Vec3) -> Vec<Camera> {
    let n = ds.n_views;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let theta = if n == 1 {
            0.0
        } else {
            ds.max_polar * (i as f64 / (n - 1) as f64).sqrt()
        };
        let phi = i as f64 * golden_angle();
        let dir = [
            theta.sin() * phi.cos(),
            theta.sin() * phi.sin(),
            theta.cos(),
        ];
        let eye = [
            target[0] + ds.camera_radius * dir[0],
            target[1] + ds.camera_radius * dir[1],
            target[2] + ds.camera_radius * dir[2],
        ];
        out.push(Camera {
            pose: CameraPose::look_at(eye, target, [0.0, 1.0, 0.0]),
            intr: Intrinsics::square(ds.resolution),
        });
    }
    out
}

/// Ground-truth generative state of one synthetic subject. Stored only in the
/// `.withheld` sidecar; the sinusoidal albedo field is evaluated on neutral
/// vertex positions so the texture rides the surface under expressions.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherParams {
    /// Coefficients on the model's identity basis.
    pub identity: Vec<f64>,
    /// Per-channel albedo modulation amplitude.
    pub albedo_amp: [f64; 3],
    /// Per-channel spatial frequency of the albedo field.
    pub albedo_freq: [Vec3; 3],
    /// Per-channel phase of the albedo field.
    pub albedo_phase: [f64; 3],
}

impl TeacherParams {
    /// Albedo at a neutral-pose surface point, each channel in (0, 1).
    pub fn albedo(&self, p: Vec3) -> [f64; 3] {
        let mut rgb = [0.0; 3];
        for c in 0..3 {
            rgb[c] = 0.55
                + self.albedo_amp[c] * (dot(self.albedo_freq[c], p) + self.albedo_phase[c]).sin();
        }
        rgb
    }
}

/// Per-stream RNG derived from the master seed: stream 0 drives dataset-wide
/// draws (shared expression codes), stream `1 + subject` drives that subject.
fn dataset_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Uniform random unit vector of dimension `dim`.
fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let g: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return g.into_iter().map(|x| x / n).collect();
        }
    }
}

/// The shared expression codes: code 0 is the neutral (all zeros); the others
/// are random directions with magnitude in `[0.6, 1.4] · expression_scale`,
/// identical for every subject — the corpus' pre-defined expressions.
pub fn shared_expressions(ds: &DatasetConfig, seed: u64, dim: usize) -> Vec<ExpressionCode> {
    let mut rng = dataset_rng(seed, 0);
    let mut out = vec![ExpressionCode::zeros(dim)];
    for _ in 1..ds.n_expressions {
        let mag = ds.expression_scale * (0.6 + 0.8 * rng.gen::<f64>());
        let psi = unit_vector(&mut rng, dim)
            .into_iter()
            .map(|x| x * mag)
            .collect();
        out.push(ExpressionCode { psi });
    }
    out
}

/// Draw a subject's teacher state from its dedicated stream.
pub fn teacher_params(ds: &DatasetConfig, model: &MorphableModel, seed: u64, subject: usize) -> TeacherParams {
    let mut rng = dataset_rng(seed, 1 + subject as u64);
    let identity = (0..model.n_identity())
        .map(|_| ds.identity_scale * (2.0 * rng.gen::<f64>() - 1.0))
        .collect();
    let mut albedo_amp = [0.0; 3];
    let mut albedo_freq = [[0.0; 3]; 3];
    let mut albedo_phase = [0.0; 3];
    for c in 0..3 {
        albedo_amp[c] = 0.15 + 0.25 * rng.gen::<f64>();
        for a in 0..3 {
            albedo_freq[c][a] = 5.0 * (rng.gen::<f64>() - 0.5);
        }
        albedo_phase[c] = std::f64::consts::TAU * rng.gen::<f64>();
    }
    TeacherParams {
        identity,
        albedo_amp,
        albedo_freq,
        albedo_phase,
    }
}

/// A posed subject ready for rasterization: world-space vertices with smooth
/// normals and per-vertex albedo (evaluated at neutral positions).
#[derive(Debug, Clone)]
pub struct TeacherScene {
    pub vertices: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    pub albedo: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
}

impl TeacherScene {
    /// Pose the model with the subject's identity offsets plus an expression
    /// code and attach shading attributes.
    pub fn build(
        model: &MorphableModel,
        teacher: &TeacherParams,
        expr: &ExpressionCode,
    ) -> Result<TeacherScene> {
        if teacher.identity.len() != model.n_identity() {
            return Err(Error::DimensionMismatch {
                context: "teacher identity coefficients",
                expected: model.n_identity(),
                got: teacher.identity.len(),
            });
        }
        let mut offsets = vec![[0.0; 3]; model.n_vertices()];
        for (basis, &w) in model.identity_basis.iter().zip(&teacher.identity) {
            for (o, b) in offsets.iter_mut().zip(basis) {
                o[0] += w * b[0];
                o[1] += w * b[1];
                o[2] += w * b[2];
            }
        }
        let vertices = pose_mesh(model, Some(&offsets), expr)?;
        let normals = smooth_normals(&vertices, &model.faces);
        let albedo = model
            .neutral_vertices
            .iter()
            .map(|&p| teacher.albedo(p))
            .collect();
        Ok(TeacherScene {
            vertices,
            normals,
            albedo,
            faces: model.faces.clone(),
        })
    }
}

/// Area-weighted smooth vertex normals.
pub fn smooth_normals(vertices: &[Vec3], faces: &[[usize; 3]]) -> Vec<Vec3> {
    let mut acc = vec![[0.0; 3]; vertices.len()];
    for f in faces {
        let a = vertices[f[0]];
        let e1 = sub(vertices[f[1]], a);
        let e2 = sub(vertices[f[2]], a);
        let n = cross(e1, e2);
        for &vi in f {
            acc[vi][0] += n[0];
            acc[vi][1] += n[1];
            acc[vi][2] += n[2];
        }
    }
    acc.into_iter().map(normalize).collect()
}

/// Möller–Trumbore ray/triangle intersection. Returns `(t, u, v)` with
/// `t > 1e-9` and barycentrics `(1−u−v, u, v)` for vertices `(a, b, c)`.
pub fn ray_triangle(o: Vec3, d: Vec3, a: Vec3, b: Vec3, c: Vec3) -> Option<(f64, f64, f64)> {
    let e1 = sub(b, a);
    let e2 = sub(c, a);
    let p = cross(d, e2);
    let det = dot(e1, p);
    if det.abs() < 1e-12 {
        return None;
    }
    let inv = 1.0 / det;
    let s = sub(o, a);
    let u = dot(s, p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = cross(s, e1);
    let v = dot(d, q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = dot(e2, q) * inv;
    if t > 1e-9 {
        Some((t, u, v))
    } else {
        None
    }
}

/// Shade the ray through pixel center `(px, py)` against the listed faces;
/// nearest hit wins (ties to the earlier face), misses return `background`.
pub fn shade_pixel(
    scene: &TeacherScene,
    cam: &Camera,
    px: f64,
    py: f64,
    candidates: &[usize],
    background: [f64; 3],
    light: Vec3,
) -> [f64; 3] {
    let (o, d) = cam.pose.ray(&cam.intr, px, py);
    let mut best: Option<(f64, usize, f64, f64)> = None;
    for &fi in candidates {
        let [ia, ib, ic] = scene.faces[fi];
        if let Some((t, u, v)) = ray_triangle(
            o,
            d,
            scene.vertices[ia],
            scene.vertices[ib],
            scene.vertices[ic],
        ) {
            if best.map_or(true, |(bt, _, _, _)| t < bt) {
                best = Some((t, fi, u, v));
            }
        }
    }
    match best {
        Some((_, fi, u, v)) => {
            let [ia, ib, ic] = scene.faces[fi];
            let w = 1.0 - u - v;
            let mut n = [0.0; 3];
            let mut rgb = [0.0; 3];
            for a in 0..3 {
                n[a] = w * scene.normals[ia][a] + u * scene.normals[ib][a] + v * scene.normals[ic][a];
            }
            let n = normalize(n);
            let lam = TEACHER_AMBIENT + TEACHER_DIFFUSE * dot(n, light).max(0.0);
            for c in 0..3 {
                rgb[c] =
                    w * scene.albedo[ia][c] + u * scene.albedo[ib][c] + v * scene.albedo[ic][c];
                rgb[c] *= lam;
            }
            rgb
        }
        None => background,
    }
}

const TILE: usize = 8;

/// Conservative screen-space face binning into `TILE × TILE`-pixel tiles;
/// faces with a vertex at or behind the camera fall back to a full-screen
/// bin. Candidate lists stay in ascending face order so tie-breaking matches
/// a brute-force scan over all faces.
fn bin_faces(scene: &TeacherScene, cam: &Camera) -> Vec<Vec<usize>> {
    let (w, h) = (cam.intr.width, cam.intr.height);
    let tiles_x = w.div_ceil(TILE);
    let tiles_y = h.div_ceil(TILE);
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    let projected: Vec<Option<[f64; 2]>> = scene
        .vertices
        .iter()
        .map(|&v| {
            let p = mat_vec(&cam.pose.r, v);
            let p = [
                p[0] + cam.pose.t[0],
                p[1] + cam.pose.t[1],
                p[2] + cam.pose.t[2],
            ];
            if p[2] <= 1e-6 {
                None
            } else {
                Some([
                    cam.intr.fx * p[0] / p[2] + cam.intr.cx,
                    cam.intr.fy * p[1] / p[2] + cam.intr.cy,
                ])
            }
        })
        .collect();
    for (fi, f) in scene.faces.iter().enumerate() {
        let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
        let mut degenerate = false;
        for &vi in f {
            match projected[vi] {
                Some([x, y]) => {
                    x0 = x0.min(x);
                    x1 = x1.max(x);
                    y0 = y0.min(y);
                    y1 = y1.max(y);
                }
                None => degenerate = true,
            }
        }
        if degenerate {
            (x0, x1, y0, y1) = (0.0, (w - 1) as f64, 0.0, (h - 1) as f64);
        }
        // One pixel of slack around the projected bounding box.
        let px0 = (x0.floor() - 1.0).max(0.0) as usize;
        let px1 = ((x1.ceil() + 1.0) as usize).min(w - 1);
        let py0 = (y0.floor() - 1.0).max(0.0) as usize;
        let py1 = ((y1.ceil() + 1.0) as usize).min(h - 1);
        if px0 > px1 || py0 > py1 {
            continue;
        }
        for ty in py0 / TILE..=py1 / TILE {
            for tx in px0 / TILE..=px1 / TILE {
                tiles[ty * tiles_x + tx].push(fi);
            }
        }
    }
    tiles
}

/// Rasterize a posed subject with the teacher shader.
pub fn render_teacher(scene: &TeacherScene, cam: &Camera, background: [f64; 3]) -> FloatImage {
    let (w, h) = (cam.intr.width, cam.intr.height);
    let tiles = bin_faces(scene, cam);
    let tiles_x = w.div_ceil(TILE);
    let light = teacher_light();
    let mut img = FloatImage::filled(h, w, background);
    for y in 0..h {
        for x in 0..w {
            let candidates = &tiles[(y / TILE) * tiles_x + x / TILE];
            let rgb = shade_pixel(
                scene,
                cam,
                x as f64 + 0.5,
                y as f64 + 0.5,
                candidates,
                background,
                light,
            );
            for c in 0..3 {
                img.data[(y * w + x, c)] = rgb[c];
            }
        }
    }
    img
}

// ---------------------------------------------------------------------------
// On-disk layout
// ---------------------------------------------------------------------------

pub fn subject_dir(root: &Path, subject: usize) -> PathBuf {
    root.join(format!("subject_{subject:04}"))
}

pub fn expr_dir(root: &Path, subject: usize, expr: usize) -> PathBuf {
    subject_dir(root, subject).join(format!("expr_{expr:02}"))
}

pub fn view_png_path(root: &Path, subject: usize, expr: usize, view: usize) -> PathBuf {
    expr_dir(root, subject, expr).join(format!("view_{view:02}.png"))
}

pub fn view_pose_path(root: &Path, subject: usize, expr: usize, view: usize) -> PathBuf {
    expr_dir(root, subject, expr).join(format!("view_{view:02}_pose.txt"))
}

pub fn expr_code_path(root: &Path, subject: usize, expr: usize) -> PathBuf {
    expr_dir(root, subject, expr).join("expr.txt")
}

pub fn sidecar_path(root: &Path, subject: usize) -> PathBuf {
    root.join(format!("subject_{subject:04}.withheld"))
}

pub fn manifest_path(root: &Path) -> PathBuf {
    root.join("manifest.toml")
}

/// One generated subject: public fittings (codes + cameras) plus the withheld
/// teacher state, which on disk lives only in the sidecar.
#[derive(Debug, Clone)]
pub struct SubjectRecord {
    pub id: usize,
    pub teacher: TeacherParams,
    pub expressions: Vec<ExpressionCode>,
    pub cameras: Vec<Camera>,
    pub images: Vec<PathBuf>,
}

/// Render and write every (expression, view) cell of one subject, including
/// its sidecar. `expressions` and `cameras` are the dataset-shared rig.
pub fn synthesize_subject(
    model: &MorphableModel,
    cfg: &Config,
    expressions: &[ExpressionCode],
    cameras: &[Camera],
    subject: usize,
    root: &Path,
) -> Result<SubjectRecord> {
    let teacher = teacher_params(&cfg.dataset, model, cfg.seed, subject);
    atomic_write(
        &sidecar_path(root, subject),
        sidecar_text(&teacher, &[]).as_bytes(),
    )?;
    let mut images = Vec::new();
    for (e, code) in expressions.iter().enumerate() {
        let scene = TeacherScene::build(model, &teacher, code)?;
        atomic_write(&expr_code_path(root, subject, e), code.to_text().as_bytes())?;
        for (v, cam) in cameras.iter().enumerate() {
            let img = render_teacher(&scene, cam, cfg.radiance.background);
            let path = view_png_path(root, subject, e, v);
            save_png(&path, &img)?;
            atomic_write(&view_pose_path(root, subject, e, v), cam.to_text().as_bytes())?;
            images.push(path);
        }
    }
    Ok(SubjectRecord {
        id: subject,
        teacher,
        expressions: expressions.to_vec(),
        cameras: cameras.to_vec(),
        images,
    })
}

/// The dataset manifest: the full generating config (so it parses back as a
/// `Config`) plus a `[generated]` table describing the hierarchy.
pub fn dataset_manifest(cfg: &Config) -> String {
    let ds = &cfg.dataset;
    let mut s = cfg.to_toml();
    s.push_str("\n[generated]\nformat = \"headfield-dataset v1\"\n");
    let _ = writeln!(
        s,
        "n_cells = {}",
        ds.n_subjects * ds.n_expressions * ds.n_views
    );
    s
}

/// Generate the whole corpus under `root`: manifest, then every subject.
pub fn generate_dataset(model: &MorphableModel, cfg: &Config, root: &Path) -> Result<Vec<SubjectRecord>> {
    cfg.validate()?;
    let ds = &cfg.dataset;
    let expressions = shared_expressions(ds, cfg.seed, model.n_expressions());
    let cameras = make_cameras(ds, centroid(&model.neutral_vertices));
    atomic_write(&manifest_path(root), dataset_manifest(cfg).as_bytes())?;
    let mut records = Vec::with_capacity(ds.n_subjects);
    for s in 0..ds.n_subjects {
        records.push(synthesize_subject(
            model,
            cfg,
            &expressions,
            &cameras,
            s,
            root,
        )?);
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

/// A corpus loaded back from disk: per-cell cameras, per-(subject, expression)
/// codes, and eagerly decoded images. Never touches `.withheld` sidecars.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub config: Config,
    expressions: Vec<ExpressionCode>,
    cameras: Vec<Camera>,
    images: Vec<FloatImage>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Dataset> {
        let config = Config::load(&manifest_path(root))?;
        let ds = &config.dataset;
        let (ns, ne, nv) = (ds.n_subjects, ds.n_expressions, ds.n_views);
        let mut expressions = Vec::with_capacity(ns * ne);
        let mut cameras = Vec::with_capacity(ns * ne * nv);
        let mut images = Vec::with_capacity(ns * ne * nv);
        for s in 0..ns {
            for e in 0..ne {
                let path = expr_code_path(root, s, e);
                let text = std::fs::read_to_string(&path)?;
                expressions.push(ExpressionCode::from_text(&text, &path.display().to_string())?);
                for v in 0..nv {
                    let path = view_pose_path(root, s, e, v);
                    let text = std::fs::read_to_string(&path)?;
                    cameras.push(Camera::from_text(&text, &path.display().to_string())?);
                    images.push(load_png(&view_png_path(root, s, e, v))?);
                }
            }
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            config,
            expressions,
            cameras,
            images,
        })
    }

    pub fn n_subjects(&self) -> usize {
        self.config.dataset.n_subjects
    }

    /// Subjects available to prior training (holdouts are the tail ids).
    pub fn n_training_subjects(&self) -> usize {
        self.config.dataset.n_subjects - self.config.dataset.n_holdout_subjects
    }

    pub fn n_expressions(&self) -> usize {
        self.config.dataset.n_expressions
    }

    pub fn n_views(&self) -> usize {
        self.config.dataset.n_views
    }

    fn cell(&self, s: usize, e: usize, v: usize) -> usize {
        (s * self.n_expressions() + e) * self.n_views() + v
    }

    pub fn expression(&self, s: usize, e: usize) -> &ExpressionCode {
        &self.expressions[s * self.n_expressions() + e]
    }

    pub fn camera(&self, s: usize, e: usize, v: usize) -> &Camera {
        &self.cameras[self.cell(s, e, v)]
    }

    pub fn image(&self, s: usize, e: usize, v: usize) -> &FloatImage {
        &self.images[self.cell(s, e, v)]
    }
}

/// The per-subject held-out (expression, view) cell, drawn deterministically
/// from the dataset seed; excluded from training batches and used for
/// validation PSNR.
pub fn holdout_cell(seed: u64, subject: usize, n_expressions: usize, n_views: usize) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(
        seed ^ 0x484F_4C44_4F55_5421 ^ (subject as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
    );
    (rng.gen_range(0..n_expressions), rng.gen_range(0..n_views))
}

// ---------------------------------------------------------------------------
// Fitting perturbation
// ---------------------------------------------------------------------------

/// Noise levels for corrupting per-image fittings: rotation in radians,
/// translation in model units, expression in code units.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FittingNoise {
    pub rot: f64,
    pub trans: f64,
    pub expr: f64,
}

/// The ground-truth deltas injected into one image's fittings; recovery-style
/// evaluation compares optimized corrections against their negation.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectedDelta {
    pub drot: Vec3,
    pub dt: Vec3,
    pub dpsi: Vec<f64>,
}

/// Corrupt per-image fittings in place: each camera's rotation is
/// left-multiplied by `exp([drot])` with `‖drot‖ = rot`, translations and
/// codes shift by random directions of the configured magnitudes. Returns the
/// injected true deltas, which belong in the withheld sidecar only.
pub fn perturb_fittings(
    cameras: &mut [Camera],
    codes: &mut [ExpressionCode],
    noise: &FittingNoise,
    rng: &mut ChaCha8Rng,
) -> Vec<InjectedDelta> {
    assert_eq!(cameras.len(), codes.len(), "one code per shot");
    let mut deltas = Vec::with_capacity(cameras.len());
    for (cam, code) in cameras.iter_mut().zip(codes.iter_mut()) {
        let r3 = unit_vector(rng, 3);
        let drot = [noise.rot * r3[0], noise.rot * r3[1], noise.rot * r3[2]];
        let t3 = unit_vector(rng, 3);
        let dt = [noise.trans * t3[0], noise.trans * t3[1], noise.trans * t3[2]];
        let dpsi: Vec<f64> = unit_vector(rng, code.dim())
            .into_iter()
            .map(|x| noise.expr * x)
            .collect();
        cam.pose = cam.pose.corrected(drot, dt);
        for (p, d) in code.psi.iter_mut().zip(&dpsi) {
            *p += d;
        }
        deltas.push(InjectedDelta { drot, dt, dpsi });
    }
    deltas
}

// ---------------------------------------------------------------------------
// Sidecar serialization
// ---------------------------------------------------------------------------

/// Serialize teacher state (and any injected fitting deltas) to the
/// `headfield-withheld v1` text format.
pub fn sidecar_text(teacher: &TeacherParams, deltas: &[InjectedDelta]) -> String {
    let mut s = String::from("headfield-withheld v1\nidentity");
    for v in &teacher.identity {
        let _ = write!(s, " {v}");
    }
    s.push_str("\nalbedo_amp");
    for v in &teacher.albedo_amp {
        let _ = write!(s, " {v}");
    }
    s.push_str("\nalbedo_freq");
    for row in &teacher.albedo_freq {
        for v in row {
            let _ = write!(s, " {v}");
        }
    }
    s.push_str("\nalbedo_phase");
    for v in &teacher.albedo_phase {
        let _ = write!(s, " {v}");
    }
    s.push('\n');
    for (i, d) in deltas.iter().enumerate() {
        let _ = write!(s, "delta {i}");
        for v in d.drot.iter().chain(&d.dt).chain(&d.dpsi) {
            let _ = write!(s, " {v}");
        }
        s.push('\n');
    }
    s
}

/// Parse a `.withheld` sidecar. Only evaluation may call this; training and
/// adaptation never read the teacher state.
pub fn read_sidecar(path: &Path) -> Result<(TeacherParams, Vec<InjectedDelta>)> {
    let text = std::fs::read_to_string(path)?;
    let err = |message: String| Error::Parse {
        path: path.display().to_string(),
        message,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| err("empty file".into()))?;
    if header.trim() != "headfield-withheld v1" {
        return Err(err(format!("bad header {header:?}")));
    }
    let mut identity = None;
    let mut amp = None;
    let mut freq = None;
    let mut phase = None;
    let mut deltas = Vec::new();
    for line in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let key = parts.next().unwrap();
        let vals: std::result::Result<Vec<f64>, _> = parts.map(|p| p.parse::<f64>()).collect();
        let vals = vals.map_err(|e| err(format!("bad number in {key}: {e}")))?;
        match key {
            "identity" => identity = Some(vals),
            "albedo_amp" => amp = Some(vals),
            "albedo_freq" => freq = Some(vals),
            "albedo_phase" => phase = Some(vals),
            "delta" => {
                if vals.len() < 7 {
                    return Err(err("delta line too short".into()));
                }
                deltas.push(InjectedDelta {
                    drot: [vals[1], vals[2], vals[3]],
                    dt: [vals[4], vals[5], vals[6]],
                    dpsi: vals[7..].to_vec(),
                });
            }
            other => return Err(err(format!("unknown key {other:?}"))),
        }
    }
    let identity = identity.ok_or_else(|| err("missing identity".into()))?;
    let amp = amp.ok_or_else(|| err("missing albedo_amp".into()))?;
    let freq = freq.ok_or_else(|| err("missing albedo_freq".into()))?;
    let phase = phase.ok_or_else(|| err("missing albedo_phase".into()))?;
    if amp.len() != 3 || freq.len() != 9 || phase.len() != 3 {
        return Err(err("wrong albedo arity".into()));
    }
    Ok((
        TeacherParams {
            identity,
            albedo_amp: [amp[0], amp[1], amp[2]],
            albedo_freq: [
                [freq[0], freq[1], freq[2]],
                [freq[3], freq[4], freq[5]],
                [freq[6], freq[7], freq[8]],
            ],
            albedo_phase: [phase[0], phase[1], phase[2]],
        },
        deltas,
    ))
}
