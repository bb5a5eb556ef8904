//! k-nearest-neighbor queries against posed mesh vertices.
//!
//! A uniform voxel grid is rebuilt per posed mesh (vertices move with every
//! expression); queries expand outward ring by ring until the remaining cells
//! cannot beat the current k-th best. Brute force is kept as the oracle and
//! both paths share the same distance arithmetic and ordering rule, so they
//! agree exactly — including ties, which break toward the lower vertex index.

use crate::camera::Vec3;

fn dist2(a: Vec3, b: Vec3) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

fn take_k_sorted(mut candidates: Vec<(f64, usize)>, k: usize) -> Vec<(usize, f64)> {
    candidates.sort_unstable_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .expect("finite distances")
            .then(a.1.cmp(&b.1))
    });
    candidates
        .into_iter()
        .take(k)
        .map(|(d2, i)| (i, d2.sqrt()))
        .collect()
}

/// Exhaustive scan oracle: the k nearest points to `q`, ascending by
/// distance, ties broken by lower index.
pub fn knn_brute_force(points: &[Vec3], q: Vec3, k: usize) -> Vec<(usize, f64)> {
    assert!(k >= 1 && k <= points.len(), "k out of range");
    let candidates: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, &p)| (dist2(p, q), i))
        .collect();
    take_k_sorted(candidates, k)
}

/// Uniform voxel grid over a point set.
#[derive(Debug, Clone)]
pub struct VoxelGrid {
    origin: Vec3,
    cell: f64,
    dims: [usize; 3],
    /// Point indices per cell, flattened `x + dims.x * (y + dims.y * z)`.
    cells: Vec<Vec<u32>>,
}

impl VoxelGrid {
    /// Build a grid sized so cells hold a handful of points each.
    pub fn build(points: &[Vec3]) -> VoxelGrid {
        assert!(!points.is_empty(), "empty point set");
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let extent = [
            (hi[0] - lo[0]).max(1e-9),
            (hi[1] - lo[1]).max(1e-9),
            (hi[2] - lo[2]).max(1e-9),
        ];
        // Aim for ~2 points per occupied cell on a surface-like distribution.
        let target_cells = (points.len() as f64 / 2.0).max(1.0);
        let volume = extent[0] * extent[1] * extent[2];
        let cell = (volume / target_cells).cbrt().max(1e-9);
        let dims = [
            ((extent[0] / cell).ceil() as usize).clamp(1, 64),
            ((extent[1] / cell).ceil() as usize).clamp(1, 64),
            ((extent[2] / cell).ceil() as usize).clamp(1, 64),
        ];
        let mut cells = vec![Vec::new(); dims[0] * dims[1] * dims[2]];
        let grid = VoxelGrid {
            origin: lo,
            cell,
            dims,
            cells: Vec::new(),
        };
        for (i, p) in points.iter().enumerate() {
            let c = grid.cell_of(*p);
            cells[grid.flat(c)].push(i as u32);
        }
        VoxelGrid { cells, ..grid }
    }

    fn cell_of(&self, p: Vec3) -> [usize; 3] {
        let mut c = [0usize; 3];
        for a in 0..3 {
            let f = (p[a] - self.origin[a]) / self.cell;
            c[a] = (f.max(0.0) as usize).min(self.dims[a] - 1);
        }
        c
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        c[0] + self.dims[0] * (c[1] + self.dims[1] * c[2])
    }

    /// The k nearest points to `q`; identical output to [`knn_brute_force`].
    pub fn knn(&self, points: &[Vec3], q: Vec3, k: usize) -> Vec<(usize, f64)> {
        assert!(k >= 1 && k <= points.len(), "k out of range");
        let center = self.cell_of(q);
        let max_ring = *self.dims.iter().max().unwrap();
        let mut candidates: Vec<(f64, usize)> = Vec::with_capacity(4 * k);
        let mut kth_best = f64::INFINITY;
        for ring in 0..=max_ring {
            // Cells at Chebyshev distance `ring` from the center cell are at
            // least (ring - 1) cell widths away from q, conservatively.
            if candidates.len() >= k {
                let bound = (ring as f64 - 1.0).max(0.0) * self.cell;
                if bound * bound > kth_best {
                    break;
                }
            }
            self.for_ring(center, ring, |cell_idx| {
                for &pi in &self.cells[cell_idx] {
                    let d2 = dist2(points[pi as usize], q);
                    candidates.push((d2, pi as usize));
                }
            });
            if candidates.len() >= k {
                // Track the current k-th best squared distance (with the same
                // tie ordering as the final sort).
                let mut ds: Vec<(f64, usize)> = candidates.clone();
                ds.sort_unstable_by(|a, b| {
                    a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1))
                });
                kth_best = ds[k - 1].0;
            }
        }
        take_k_sorted(candidates, k)
    }

    /// Visit all cells whose Chebyshev distance from `center` is exactly
    /// `ring`, clipped to the grid.
    fn for_ring(&self, center: [usize; 3], ring: usize, mut visit: impl FnMut(usize)) {
        let r = ring as isize;
        let c = [center[0] as isize, center[1] as isize, center[2] as isize];
        for dz in -r..=r {
            let z = c[2] + dz;
            if z < 0 || z >= self.dims[2] as isize {
                continue;
            }
            for dy in -r..=r {
                let y = c[1] + dy;
                if y < 0 || y >= self.dims[1] as isize {
                    continue;
                }
                for dx in -r..=r {
                    if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                        continue;
                    }
                    let x = c[0] + dx;
                    if x < 0 || x >= self.dims[0] as isize {
                        continue;
                    }
                    visit(self.flat([x as usize, y as usize, z as usize]));
                }
            }
        }
    }
}
