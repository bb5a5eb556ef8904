//! Pinhole cameras, rotation utilities, and the pose text format.
//!
//! Extrinsics are world-to-camera: a world point `p` maps to `R p + t` in
//! camera space, and the camera looks along its local `+z` axis. Pixel
//! `(x, y)` with intrinsics `(fx, fy, cx, cy)` corresponds to the camera-space
//! direction `((x - cx)/fx, (y - cy)/fy, 1)`.

use std::fmt::Write as _;

use crate::error::{Error, Result};

pub type Mat3 = [[f64; 3]; 3];
pub type Vec3 = [f64; 3];

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Pinhole intrinsics plus image size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    /// Symmetric intrinsics for a square image: focal length equal to the
    /// resolution, principal point at the center.
    pub fn square(res: usize) -> Self {
        let r = res as f64;
        Intrinsics {
            fx: r,
            fy: r,
            cx: r / 2.0,
            cy: r / 2.0,
            width: res,
            height: res,
        }
    }
}

/// World-to-camera rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    /// Rotation, row-major.
    pub r: Mat3,
    pub t: Vec3,
}

impl CameraPose {
    /// Camera centered at `eye` looking at `target`, with `up` fixing roll.
    /// Image y points opposite `up` (row 0 is the top of the image).
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Self {
        let z = normalize(sub(target, eye));
        let y0 = [-up[0], -up[1], -up[2]];
        let x = normalize(cross(y0, z));
        let y = cross(z, x);
        let r = [x, y, z];
        let t = mat_vec(&r, [-eye[0], -eye[1], -eye[2]]);
        CameraPose { r, t }
    }

    /// Camera center in world coordinates: `-R^T t`.
    pub fn center(&self) -> Vec3 {
        mat_t_vec(&self.r, [-self.t[0], -self.t[1], -self.t[2]])
    }

    /// World-space ray through pixel-center `(px, py)`: `(origin, unit dir)`.
    pub fn ray(&self, intr: &Intrinsics, px: f64, py: f64) -> (Vec3, Vec3) {
        let d_cam = [(px - intr.cx) / intr.fx, (py - intr.cy) / intr.fy, 1.0];
        let d = normalize(mat_t_vec(&self.r, d_cam));
        (self.center(), d)
    }

    /// Left-multiply the rotation by `exp([axis_angle]x)` and shift the
    /// translation; this is the correction model used during adaptation.
    pub fn corrected(&self, drot: Vec3, dt: Vec3) -> CameraPose {
        let a = rodrigues(drot);
        CameraPose {
            r: mat_mul(&a, &self.r),
            t: [self.t[0] + dt[0], self.t[1] + dt[1], self.t[2] + dt[2]],
        }
    }
}

/// A pose bundled with intrinsics; one per stored view.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub pose: CameraPose,
    pub intr: Intrinsics,
}

impl Camera {
    /// Serialize to the `headfield-pose v1` text format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("headfield-pose v1\n");
        s.push_str("rotation");
        for row in &self.pose.r {
            for v in row {
                let _ = write!(s, " {v}");
            }
        }
        s.push('\n');
        let _ = writeln!(
            s,
            "translation {} {} {}",
            self.pose.t[0], self.pose.t[1], self.pose.t[2]
        );
        let _ = writeln!(
            s,
            "intrinsics {} {} {} {}",
            self.intr.fx, self.intr.fy, self.intr.cx, self.intr.cy
        );
        let _ = writeln!(s, "size {} {}", self.intr.width, self.intr.height);
        s
    }

    /// Parse the `headfield-pose v1` text format.
    pub fn from_text(text: &str, path: &str) -> Result<Camera> {
        let err = |message: String| Error::Parse {
            path: path.to_string(),
            message,
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| err("empty file".into()))?;
        if header.trim() != "headfield-pose v1" {
            return Err(err(format!("bad header {header:?}")));
        }
        let mut rotation: Option<Vec<f64>> = None;
        let mut translation: Option<Vec<f64>> = None;
        let mut intrinsics: Option<Vec<f64>> = None;
        let mut size: Option<Vec<f64>> = None;
        for line in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap();
            let vals: std::result::Result<Vec<f64>, _> =
                parts.map(|p| p.parse::<f64>()).collect();
            let vals = vals.map_err(|e| err(format!("bad number in {key}: {e}")))?;
            match key {
                "rotation" => rotation = Some(vals),
                "translation" => translation = Some(vals),
                "intrinsics" => intrinsics = Some(vals),
                "size" => size = Some(vals),
                other => return Err(err(format!("unknown key {other:?}"))),
            }
        }
        let rotation = rotation.ok_or_else(|| err("missing rotation".into()))?;
        let translation = translation.ok_or_else(|| err("missing translation".into()))?;
        let intrinsics = intrinsics.ok_or_else(|| err("missing intrinsics".into()))?;
        let size = size.ok_or_else(|| err("missing size".into()))?;
        if rotation.len() != 9 || translation.len() != 3 || intrinsics.len() != 4 || size.len() != 2
        {
            return Err(err("wrong field arity".into()));
        }
        let r = [
            [rotation[0], rotation[1], rotation[2]],
            [rotation[3], rotation[4], rotation[5]],
            [rotation[6], rotation[7], rotation[8]],
        ];
        Ok(Camera {
            pose: CameraPose {
                r,
                t: [translation[0], translation[1], translation[2]],
            },
            intr: Intrinsics {
                fx: intrinsics[0],
                fy: intrinsics[1],
                cx: intrinsics[2],
                cy: intrinsics[3],
                width: size[0] as usize,
                height: size[1] as usize,
            },
        })
    }
}

// ---------------------------------------------------------------------------
// Rotation utilities.
// ---------------------------------------------------------------------------

/// Rodrigues' formula: `exp([v]x)` with a Taylor branch near zero.
pub fn rodrigues(v: Vec3) -> Mat3 {
    let theta2 = dot(v, v);
    let (a, b) = if theta2 < 1e-24 {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    let k = hat(v);
    let k2 = mat_mul(&k, &k);
    let mut r = IDENTITY;
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] += a * k[i][j] + b * k2[i][j];
        }
    }
    r
}

/// Exact derivative of `rodrigues(v)` with respect to each component of `v`
/// (Gallego-Yezzi closed form), with the `[e_k]x` limit at zero.
pub fn rodrigues_derivative(v: Vec3) -> [Mat3; 3] {
    let theta2 = dot(v, v);
    if theta2 < 1e-14 {
        return [
            hat([1.0, 0.0, 0.0]),
            hat([0.0, 1.0, 0.0]),
            hat([0.0, 0.0, 1.0]),
        ];
    }
    let r = rodrigues(v);
    let vx = hat(v);
    let mut out = [[[0.0; 3]; 3]; 3];
    for k in 0..3 {
        let mut e = [0.0; 3];
        e[k] = 1.0;
        // (I - R) e_k
        let re = mat_vec(&r, e);
        let ime = [e[0] - re[0], e[1] - re[1], e[2] - re[2]];
        let cr = cross(v, ime);
        let crx = hat(cr);
        let mut m = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = (v[k] * vx[i][j] + crx[i][j]) / theta2;
            }
        }
        out[k] = mat_mul(&m, &r);
    }
    out
}

/// Geodesic distance between rotations: the angle of `a * b^T`, in radians.
pub fn geodesic_distance(a: &Mat3, b: &Mat3) -> f64 {
    let mut trace = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            trace += a[i][j] * b[i][j]; // trace(a b^T)
        }
    }
    (((trace - 1.0) / 2.0).clamp(-1.0, 1.0)).acos()
}

/// Skew-symmetric cross-product matrix `[v]x`.
pub fn hat(v: Vec3) -> Mat3 {
    [
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for (k, brow) in b.iter().enumerate() {
                out[i][j] += a[i][k] * brow[j];
            }
        }
    }
    out
}

pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mat_t_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn norm(v: Vec3) -> f64 {
    dot(v, v).sqrt()
}

pub fn normalize(v: Vec3) -> Vec3 {
    let n = norm(v);
    [v[0] / n, v[1] / n, v[2] / n]
}
