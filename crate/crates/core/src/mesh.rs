//! The toy parametric head model: a UV-sphere-derived blendshape mesh with a
//! cylindrical texture unwrap, an expression basis of smooth bumps, and a
//! small identity basis used only by the synthetic-data teacher.

use std::fmt::Write as _;

use crate::camera::{normalize, Vec3};
use crate::error::{Error, Result};

/// Linear blendshape head model.
///
/// `identity_basis` exists for the synthetic-data teacher only: training and
/// adaptation pose the mesh from expression codes alone, mirroring a shared
/// mesh scaffold whose per-subject geometry the radiance field must absorb.
#[derive(Debug, Clone, PartialEq)]
pub struct MorphableModel {
    pub neutral_vertices: Vec<Vec3>,
    /// Triangles, counter-clockwise seen from outside.
    pub faces: Vec<[usize; 3]>,
    /// Per-vertex texture coordinates in `[0, 1]^2`.
    pub uv_coords: Vec<[f64; 2]>,
    /// `E` per-vertex displacement fields (unit code → model units).
    pub expression_basis: Vec<Vec<Vec3>>,
    /// Per-subject shape components (synthetic-data only).
    pub identity_basis: Vec<Vec<Vec3>>,
}

/// Blendshape weights; dimension must match the model's expression basis.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionCode {
    pub psi: Vec<f64>,
}

impl ExpressionCode {
    pub fn zeros(e: usize) -> Self {
        ExpressionCode { psi: vec![0.0; e] }
    }

    pub fn dim(&self) -> usize {
        self.psi.len()
    }

    /// Euclidean distance between codes.
    pub fn distance(&self, other: &ExpressionCode) -> f64 {
        self.psi
            .iter()
            .zip(&other.psi)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Serialize to the `headfield-expr v1` text format.
    pub fn to_text(&self) -> String {
        let mut s = String::from("headfield-expr v1\npsi");
        for v in &self.psi {
            let _ = write!(s, " {v}");
        }
        s.push('\n');
        s
    }

    /// Parse the `headfield-expr v1` text format.
    pub fn from_text(text: &str, path: &str) -> Result<ExpressionCode> {
        let err = |message: String| Error::Parse {
            path: path.to_string(),
            message,
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| err("empty file".into()))?;
        if header.trim() != "headfield-expr v1" {
            return Err(err(format!("bad header {header:?}")));
        }
        let line = lines
            .find(|l| !l.trim().is_empty())
            .ok_or_else(|| err("missing psi line".into()))?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some("psi") {
            return Err(err(format!("expected psi line, got {line:?}")));
        }
        let psi: std::result::Result<Vec<f64>, _> = parts.map(|p| p.parse::<f64>()).collect();
        let psi = psi.map_err(|e| err(format!("bad number: {e}")))?;
        Ok(ExpressionCode { psi })
    }
}

impl MorphableModel {
    pub fn n_vertices(&self) -> usize {
        self.neutral_vertices.len()
    }

    pub fn n_expressions(&self) -> usize {
        self.expression_basis.len()
    }

    pub fn n_identity(&self) -> usize {
        self.identity_basis.len()
    }

    /// Structural validation: index bounds, UV range, basis arity, and
    /// edge-manifoldness (every edge on at most two faces).
    pub fn validate(&self) -> Result<()> {
        let v = self.n_vertices();
        let invalid = |message: String| Error::InvalidArgument {
            context: "MorphableModel::validate",
            message,
        };
        if self.uv_coords.len() != v {
            return Err(invalid(format!(
                "{} uv coords for {} vertices",
                self.uv_coords.len(),
                v
            )));
        }
        for (fi, f) in self.faces.iter().enumerate() {
            for &idx in f {
                if idx >= v {
                    return Err(invalid(format!("face {fi} references vertex {idx} >= {v}")));
                }
            }
        }
        for (i, uv) in self.uv_coords.iter().enumerate() {
            if !(0.0..=1.0).contains(&uv[0]) || !(0.0..=1.0).contains(&uv[1]) {
                return Err(invalid(format!("uv of vertex {i} outside [0,1]^2: {uv:?}")));
            }
        }
        for (e, basis) in self.expression_basis.iter().enumerate() {
            if basis.len() != v {
                return Err(invalid(format!(
                    "expression basis {e} has {} entries for {v} vertices",
                    basis.len()
                )));
            }
        }
        for (k, basis) in self.identity_basis.iter().enumerate() {
            if basis.len() != v {
                return Err(invalid(format!(
                    "identity basis {k} has {} entries for {v} vertices",
                    basis.len()
                )));
            }
        }
        let mut edge_count = std::collections::BTreeMap::new();
        for f in &self.faces {
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                let key = (a.min(b), a.max(b));
                *edge_count.entry(key).or_insert(0usize) += 1;
            }
        }
        if let Some((edge, n)) = edge_count.iter().find(|(_, &n)| n > 2) {
            return Err(invalid(format!("edge {edge:?} shared by {n} faces")));
        }
        Ok(())
    }

    /// Mean length of the mesh's unique edges in the neutral pose; the
    /// default kNN aggregation bandwidth is derived from this.
    pub fn mean_edge_length(&self) -> f64 {
        let mut seen = std::collections::BTreeSet::new();
        let mut total = 0.0;
        for f in &self.faces {
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                let key = (a.min(b), a.max(b));
                if seen.insert(key) {
                    let pa = self.neutral_vertices[key.0];
                    let pb = self.neutral_vertices[key.1];
                    total += dist(pa, pb);
                }
            }
        }
        total / seen.len() as f64
    }
}

/// Evaluate the blendshape model: `v_i = neutral_i + offset_i + Σ_e ψ_e b_{e,i}`.
pub fn pose_mesh(
    model: &MorphableModel,
    shape_offsets: Option<&[Vec3]>,
    expr: &ExpressionCode,
) -> Result<Vec<Vec3>> {
    if expr.dim() != model.n_expressions() {
        return Err(Error::DimensionMismatch {
            context: "pose_mesh expression code",
            expected: model.n_expressions(),
            got: expr.dim(),
        });
    }
    if let Some(off) = shape_offsets {
        if off.len() != model.n_vertices() {
            return Err(Error::DimensionMismatch {
                context: "pose_mesh shape offsets",
                expected: model.n_vertices(),
                got: off.len(),
            });
        }
    }
    let mut out = model.neutral_vertices.clone();
    if let Some(off) = shape_offsets {
        for (v, o) in out.iter_mut().zip(off) {
            v[0] += o[0];
            v[1] += o[1];
            v[2] += o[2];
        }
    }
    for (basis, &w) in model.expression_basis.iter().zip(&expr.psi) {
        if w == 0.0 {
            continue;
        }
        for (v, b) in out.iter_mut().zip(basis) {
            v[0] += w * b[0];
            v[1] += w * b[1];
            v[2] += w * b[2];
        }
    }
    Ok(out)
}

/// Smallest-center bounding sphere stand-in: centroid plus max distance.
/// Returns `(center, radius)`.
pub fn bounding_sphere(vertices: &[Vec3]) -> (Vec3, f64) {
    let mut c = [0.0; 3];
    for v in vertices {
        c[0] += v[0];
        c[1] += v[1];
        c[2] += v[2];
    }
    let n = vertices.len() as f64;
    c = [c[0] / n, c[1] / n, c[2] / n];
    let r = vertices
        .iter()
        .map(|v| dist(*v, c))
        .fold(0.0f64, f64::max);
    (c, r)
}

pub fn centroid(vertices: &[Vec3]) -> Vec3 {
    let mut c = [0.0; 3];
    for v in vertices {
        c[0] += v[0];
        c[1] += v[1];
        c[2] += v[2];
    }
    let n = vertices.len() as f64;
    [c[0] / n, c[1] / n, c[2] / n]
}

fn dist(a: Vec3, b: Vec3) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

// ---------------------------------------------------------------------------
// Toy head construction.
// ---------------------------------------------------------------------------

/// Number of latitude rings in the default head.
const RINGS: usize = 24;
/// Number of longitude segments; the seam column is duplicated, giving
/// `RINGS * (SEGMENTS + 1) + 2` vertices (602 at the defaults).
const SEGMENTS: usize = 24;

/// A smooth angular bump: 1 at `center`, Gaussian falloff with `width`
/// (radians) in angle.
fn angular_bump(dir: Vec3, center: Vec3, width: f64) -> f64 {
    let cosang = (dir[0] * center[0] + dir[1] * center[1] + dir[2] * center[2]).clamp(-1.0, 1.0);
    let ang = cosang.acos();
    (-(ang / width) * (ang / width)).exp()
}

/// Head surface radius along `dir`: a unit sphere, slightly elongated, with a
/// nose bump on the front (+z) and a flattened back.
fn head_radius(dir: Vec3) -> f64 {
    let mut r = 1.0;
    r += 0.06 * dir[1] * dir[1]; // slight cranial elongation
    r += 0.22 * angular_bump(dir, normalize([0.0, -0.15, 1.0]), 0.28); // nose
    r += 0.08 * angular_bump(dir, normalize([0.0, -0.75, 0.55]), 0.5); // chin/jaw
    r -= 0.10 * angular_bump(dir, normalize([0.0, -0.2, -1.0]), 0.7); // flat back
    r
}

struct Bump {
    center: Vec3,
    width: f64,
    /// Displacement at the bump center for a unit code (model units).
    displacement: Vec3,
}

/// Expression blendshapes: jaw, brows, cheeks, mouth, forehead analogues.
/// Amplitudes are large enough that one code unit moves the surface by a
/// couple of pixels at the default camera distance, which keeps expression
/// corrections observable in image space.
fn expression_bumps() -> Vec<Bump> {
    vec![
        Bump {
            // jaw open
            center: normalize([0.0, -0.6, 0.8]),
            width: 0.45,
            displacement: [0.0, -0.28, 0.0],
        },
        Bump {
            // brow raise
            center: normalize([0.0, 0.55, 0.85]),
            width: 0.4,
            displacement: [0.0, 0.22, 0.06],
        },
        Bump {
            // left cheek puff
            center: normalize([0.6, -0.1, 0.75]),
            width: 0.35,
            displacement: [0.17, 0.0, 0.12],
        },
        Bump {
            // right cheek puff
            center: normalize([-0.6, -0.1, 0.75]),
            width: 0.35,
            displacement: [-0.17, 0.0, 0.12],
        },
        Bump {
            // mouth purse (outward)
            center: normalize([0.0, -0.35, 0.95]),
            width: 0.3,
            displacement: [0.0, 0.0, 0.24],
        },
        Bump {
            // left smile corner
            center: normalize([0.45, -0.35, 0.8]),
            width: 0.3,
            displacement: [0.1, 0.18, 0.0],
        },
        Bump {
            // right smile corner
            center: normalize([-0.45, -0.35, 0.8]),
            width: 0.3,
            displacement: [-0.1, 0.18, 0.0],
        },
        Bump {
            // forehead furrow (inward)
            center: normalize([0.0, 0.3, 0.95]),
            width: 0.5,
            displacement: [0.0, 0.0, -0.16],
        },
    ]
}

/// Identity shape components for the teacher: broad, symmetric-ish bumps that
/// change skull and face proportions.
fn identity_bumps() -> Vec<Bump> {
    vec![
        Bump {
            // cranium width
            center: normalize([1.0, 0.3, 0.0]),
            width: 0.9,
            displacement: [0.06, 0.0, 0.0],
        },
        Bump {
            // mirrored cranium width
            center: normalize([-1.0, 0.3, 0.0]),
            width: 0.9,
            displacement: [-0.06, 0.0, 0.0],
        },
        Bump {
            // face length
            center: normalize([0.0, -1.0, 0.3]),
            width: 0.8,
            displacement: [0.0, -0.07, 0.0],
        },
        Bump {
            // nose size
            center: normalize([0.0, -0.15, 1.0]),
            width: 0.3,
            displacement: [0.0, 0.0, 0.09],
        },
        Bump {
            // brow ridge
            center: normalize([0.0, 0.5, 0.9]),
            width: 0.45,
            displacement: [0.0, 0.02, 0.07],
        },
        Bump {
            // cheekbone fullness
            center: normalize([0.0, -0.25, 0.9]),
            width: 0.6,
            displacement: [0.0, 0.0, 0.06],
        },
    ]
}

fn basis_from_bumps(dirs: &[Vec3], bumps: &[Bump]) -> Vec<Vec<Vec3>> {
    bumps
        .iter()
        .map(|b| {
            dirs.iter()
                .map(|&d| {
                    let s = angular_bump(d, b.center, b.width);
                    [
                        s * b.displacement[0],
                        s * b.displacement[1],
                        s * b.displacement[2],
                    ]
                })
                .collect()
        })
        .collect()
}

/// Build the default toy head: 602 vertices, 1152 faces, cylindrical UV
/// unwrap with a duplicated seam column at the back of the head, E=8
/// expression components, 6 identity components.
pub fn toy_head() -> MorphableModel {
    let cols = SEGMENTS + 1;
    let mut vertices = Vec::with_capacity(RINGS * cols + 2);
    let mut uv_coords = Vec::with_capacity(RINGS * cols + 2);
    let mut dirs = Vec::with_capacity(RINGS * cols + 2);

    // North pole.
    dirs.push([0.0, 1.0, 0.0]);
    uv_coords.push([0.5, 0.0]);
    for i in 0..RINGS {
        let theta = std::f64::consts::PI * (i + 1) as f64 / (RINGS + 1) as f64;
        for j in 0..cols {
            // Seam (phi = 0) at the back of the head (-z); the face sits at
            // u = 0.5, well away from the wraparound.
            let phi = std::f64::consts::TAU * j as f64 / SEGMENTS as f64;
            let dir = [theta.sin() * phi.sin(), theta.cos(), -theta.sin() * phi.cos()];
            dirs.push(dir);
            uv_coords.push([
                j as f64 / SEGMENTS as f64,
                (i + 1) as f64 / (RINGS + 1) as f64,
            ]);
        }
    }
    // South pole.
    dirs.push([0.0, -1.0, 0.0]);
    uv_coords.push([0.5, 1.0]);

    for &d in &dirs {
        let r = head_radius(d);
        vertices.push([r * d[0], r * d[1], r * d[2]]);
    }

    let ring = |i: usize, j: usize| 1 + i * cols + j;
    let south = 1 + RINGS * cols;
    let mut faces = Vec::with_capacity(2 * (RINGS - 1) * SEGMENTS + 2 * SEGMENTS);
    for j in 0..SEGMENTS {
        // Pole fans; winding chosen so normals point outward.
        faces.push([0, ring(0, j + 1), ring(0, j)]);
        faces.push([south, ring(RINGS - 1, j), ring(RINGS - 1, j + 1)]);
    }
    for i in 0..RINGS - 1 {
        for j in 0..SEGMENTS {
            let (a, b) = (ring(i, j), ring(i, j + 1));
            let (c, d) = (ring(i + 1, j), ring(i + 1, j + 1));
            faces.push([a, b, c]);
            faces.push([b, d, c]);
        }
    }

    let expression_basis = basis_from_bumps(&dirs, &expression_bumps());
    let identity_basis = basis_from_bumps(&dirs, &identity_bumps());
    MorphableModel {
        neutral_vertices: vertices,
        faces,
        uv_coords,
        expression_basis,
        identity_basis,
    }
}

// ---------------------------------------------------------------------------
// Plain-text serialization: `headfield-mesh v1`.
// ---------------------------------------------------------------------------

impl MorphableModel {
    /// Serialize to the self-describing `headfield-mesh v1` text format:
    /// a counts line, then one record per line (`vertex`, `uv`, `face`,
    /// `expr_basis e i dx dy dz`, `id_basis k i dx dy dz`). Floats use the
    /// shortest round-trip decimal form, so write → read is exact.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("headfield-mesh v1\n");
        let _ = writeln!(
            s,
            "counts {} {} {} {}",
            self.n_vertices(),
            self.faces.len(),
            self.n_expressions(),
            self.n_identity()
        );
        for v in &self.neutral_vertices {
            let _ = writeln!(s, "vertex {} {} {}", v[0], v[1], v[2]);
        }
        for uv in &self.uv_coords {
            let _ = writeln!(s, "uv {} {}", uv[0], uv[1]);
        }
        for f in &self.faces {
            let _ = writeln!(s, "face {} {} {}", f[0], f[1], f[2]);
        }
        for (e, basis) in self.expression_basis.iter().enumerate() {
            for (i, d) in basis.iter().enumerate() {
                let _ = writeln!(s, "expr_basis {e} {i} {} {} {}", d[0], d[1], d[2]);
            }
        }
        for (k, basis) in self.identity_basis.iter().enumerate() {
            for (i, d) in basis.iter().enumerate() {
                let _ = writeln!(s, "id_basis {k} {i} {} {} {}", d[0], d[1], d[2]);
            }
        }
        s
    }

    pub fn from_text(text: &str, path: &str) -> Result<MorphableModel> {
        let err = |message: String| Error::Parse {
            path: path.to_string(),
            message,
        };
        let mut lines = text.lines();
        match lines.next() {
            Some("headfield-mesh v1") => {}
            other => return Err(err(format!("bad header {other:?}"))),
        }
        let counts_line = lines.next().ok_or_else(|| err("missing counts".into()))?;
        let counts: Vec<usize> = counts_line
            .strip_prefix("counts ")
            .ok_or_else(|| err("missing counts".into()))?
            .split_whitespace()
            .map(|t| t.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| err(format!("bad counts: {e}")))?;
        if counts.len() != 4 {
            return Err(err("counts needs 4 fields".into()));
        }
        let (nv, nf, ne, ni) = (counts[0], counts[1], counts[2], counts[3]);
        let mut model = MorphableModel {
            neutral_vertices: Vec::with_capacity(nv),
            faces: Vec::with_capacity(nf),
            uv_coords: Vec::with_capacity(nv),
            expression_basis: vec![vec![[0.0; 3]; nv]; ne],
            identity_basis: vec![vec![[0.0; 3]; nv]; ni],
        };
        for (ln, line) in lines.enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap();
            let rest: Vec<&str> = parts.collect();
            let floats = |n: usize| -> Result<Vec<f64>> {
                if rest.len() != n {
                    return Err(err(format!("line {}: {key} needs {n} fields", ln + 3)));
                }
                rest.iter()
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| err(format!("line {}: {e}", ln + 3)))
            };
            match key {
                "vertex" => {
                    let v = floats(3)?;
                    model.neutral_vertices.push([v[0], v[1], v[2]]);
                }
                "uv" => {
                    let v = floats(2)?;
                    model.uv_coords.push([v[0], v[1]]);
                }
                "face" => {
                    let idx: Vec<usize> = rest
                        .iter()
                        .map(|t| t.parse())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| err(format!("line {}: {e}", ln + 3)))?;
                    if idx.len() != 3 {
                        return Err(err(format!("line {}: face needs 3 indices", ln + 3)));
                    }
                    model.faces.push([idx[0], idx[1], idx[2]]);
                }
                "expr_basis" | "id_basis" => {
                    if rest.len() != 5 {
                        return Err(err(format!("line {}: {key} needs 5 fields", ln + 3)));
                    }
                    let b: usize = rest[0]
                        .parse()
                        .map_err(|e| err(format!("line {}: {e}", ln + 3)))?;
                    let i: usize = rest[1]
                        .parse()
                        .map_err(|e| err(format!("line {}: {e}", ln + 3)))?;
                    let d: Vec<f64> = rest[2..]
                        .iter()
                        .map(|t| t.parse())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| err(format!("line {}: {e}", ln + 3)))?;
                    let target = if key == "expr_basis" {
                        &mut model.expression_basis
                    } else {
                        &mut model.identity_basis
                    };
                    if b >= target.len() || i >= nv {
                        return Err(err(format!("line {}: index out of range", ln + 3)));
                    }
                    target[b][i] = [d[0], d[1], d[2]];
                }
                other => return Err(err(format!("line {}: unknown key {other:?}", ln + 3))),
            }
        }
        if model.neutral_vertices.len() != nv || model.faces.len() != nf {
            return Err(err(format!(
                "expected {nv} vertices / {nf} faces, got {} / {}",
                model.neutral_vertices.len(),
                model.faces.len()
            )));
        }
        model.validate()?;
        Ok(model)
    }
}
