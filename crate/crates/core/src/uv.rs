//! UV-space rasterization of per-vertex quantities and bilinear map sampling.
//!
//! The raster geometry (which texel is covered by which triangle, with which
//! barycentric weights) depends only on the mesh's UV layout, so it is
//! precomputed once as a [`UvRaster`] and reused by every displacement-map
//! evaluation — including the differentiable path, which expresses the
//! rasterization as gather/scale/segment-sum tape ops over the same tables.

use crate::diff::ops::bilinear_taps;
use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::mesh::MorphableModel;

/// Inclusive point-in-triangle tolerance on normalized barycentrics. Shared
/// by the rasterizer and its test oracle so borderline texels classify
/// identically under different arithmetic orderings.
pub const BARY_EPS: f64 = 1e-12;

/// Unnormalized-determinant threshold below which a UV triangle counts as
/// degenerate and is skipped.
const DEGENERATE_DET: f64 = 1e-14;

/// One covered texel: its index and the triangle corners/weights that fill it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RasterTexel {
    pub texel: usize,
    pub verts: [usize; 3],
    pub weights: [f64; 3],
}

/// Precomputed UV rasterization of a mesh at a fixed resolution.
#[derive(Debug, Clone)]
pub struct UvRaster {
    pub h: usize,
    pub w: usize,
    /// Covered texels in ascending texel order; when several triangles cover
    /// a texel center, the last face in mesh order wins.
    pub texels: Vec<RasterTexel>,
    pub mask: Vec<bool>,
    pub skipped_degenerate: usize,
}

/// Normalized barycentric coordinates of `p` in UV triangle `(a, b, c)`, or
/// `None` if the triangle is degenerate.
pub fn barycentric(p: [f64; 2], a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> Option<[f64; 3]> {
    let (abx, aby) = (b[0] - a[0], b[1] - a[1]);
    let (acx, acy) = (c[0] - a[0], c[1] - a[1]);
    let det = abx * acy - aby * acx;
    if det.abs() < DEGENERATE_DET {
        return None;
    }
    let (apx, apy) = (p[0] - a[0], p[1] - a[1]);
    let lb = (apx * acy - apy * acx) / det;
    let lc = (abx * apy - aby * apx) / det;
    Some([1.0 - lb - lc, lb, lc])
}

impl UvRaster {
    /// Rasterize the mesh's UV triangles onto an `h x w` texel grid, testing
    /// texel centers for coverage. Degenerate UV triangles are skipped and
    /// reported once per mesh via the log.
    pub fn build(model: &MorphableModel, h: usize, w: usize) -> UvRaster {
        let mut slots: Vec<Option<([usize; 3], [f64; 3])>> = vec![None; h * w];
        let mut skipped = 0usize;
        for face in &model.faces {
            let a = model.uv_coords[face[0]];
            let b = model.uv_coords[face[1]];
            let c = model.uv_coords[face[2]];
            // Degeneracy is a property of the face; detect it up front.
            if barycentric(a, a, b, c).is_none() {
                skipped += 1;
                continue;
            }
            // Conservative texel bounding box of the triangle.
            let (min_u, max_u) = min_max(a[0], b[0], c[0]);
            let (min_v, max_v) = min_max(a[1], b[1], c[1]);
            let tx0 = (min_u * w as f64 - 0.5).floor().max(0.0) as usize;
            let tx1 = (((max_u * w as f64 + 0.5).ceil().max(0.0)) as usize).min(w - 1);
            let ty0 = (min_v * h as f64 - 0.5).floor().max(0.0) as usize;
            let ty1 = (((max_v * h as f64 + 0.5).ceil().max(0.0)) as usize).min(h - 1);
            for ty in ty0..=ty1 {
                for tx in tx0..=tx1 {
                    let p = [(tx as f64 + 0.5) / w as f64, (ty as f64 + 0.5) / h as f64];
                    let l = barycentric(p, a, b, c).expect("checked non-degenerate");
                    if l.iter().all(|&x| x >= -BARY_EPS) {
                        slots[ty * w + tx] = Some((*face, l));
                    }
                }
            }
        }
        if skipped > 0 {
            log::warn!("uv raster: skipped {skipped} degenerate UV triangle(s)");
        }
        let mut mask = vec![false; h * w];
        let mut texels = Vec::new();
        for (idx, slot) in slots.iter().enumerate() {
            if let Some((verts, weights)) = slot {
                mask[idx] = true;
                texels.push(RasterTexel {
                    texel: idx,
                    verts: *verts,
                    weights: *weights,
                });
            }
        }
        UvRaster {
            h,
            w,
            texels,
            mask,
            skipped_degenerate: skipped,
        }
    }

    /// Fraction of texels covered by at least one triangle.
    pub fn coverage(&self) -> f64 {
        self.texels.len() as f64 / (self.h * self.w) as f64
    }

    /// Flattened gather tables for the differentiable rasterization path:
    /// `(vertex_indices, weights, texel_indices)` with three consecutive
    /// entries per covered texel.
    pub fn gather_tables(&self) -> (Vec<usize>, Vec<f64>, Vec<usize>) {
        let mut verts = Vec::with_capacity(self.texels.len() * 3);
        let mut weights = Vec::with_capacity(self.texels.len() * 3);
        let mut texels = Vec::with_capacity(self.texels.len() * 3);
        for t in &self.texels {
            for k in 0..3 {
                verts.push(t.verts[k]);
                weights.push(t.weights[k]);
                texels.push(t.texel);
            }
        }
        (verts, weights, texels)
    }
}

fn min_max(a: f64, b: f64, c: f64) -> (f64, f64) {
    (a.min(b).min(c), a.max(b).max(c))
}

/// Per-vertex displacement rasterized into UV space, plus the coverage mask.
#[derive(Debug, Clone)]
pub struct DisplacementMap {
    /// `[h*w, 3]` displacement image (model units); zero outside the mask.
    pub grid: Tensor,
    pub mask: Vec<bool>,
    pub h: usize,
    pub w: usize,
}

/// Rasterize `posed - neutral` into UV space using a precomputed raster.
pub fn rasterize_displacement(
    raster: &UvRaster,
    model: &MorphableModel,
    posed: &[[f64; 3]],
) -> Result<DisplacementMap> {
    if posed.len() != model.n_vertices() {
        return Err(Error::DimensionMismatch {
            context: "rasterize_displacement posed vertices",
            expected: model.n_vertices(),
            got: posed.len(),
        });
    }
    let mut grid = Tensor::zeros((raster.h * raster.w, 3));
    for t in &raster.texels {
        for k in 0..3 {
            let vi = t.verts[k];
            let wgt = t.weights[k];
            for c in 0..3 {
                grid[(t.texel, c)] += wgt * (posed[vi][c] - model.neutral_vertices[vi][c]);
            }
        }
    }
    Ok(DisplacementMap {
        grid,
        mask: raster.mask.clone(),
        h: raster.h,
        w: raster.w,
    })
}

/// Bilinear sample of an `[h*w, c]` grid at `uv ∈ [0,1]^2` (clamped border).
pub fn sample_uv(grid: &Tensor, h: usize, w: usize, uv: [f64; 2]) -> Vec<f64> {
    let taps = bilinear_taps(uv[0], uv[1], h, w);
    let c = grid.ncols();
    let mut out = vec![0.0; c];
    for (idx, wgt) in taps {
        for (o, &g) in out.iter_mut().zip(grid.row(idx)) {
            *o += wgt * g;
        }
    }
    out
}
