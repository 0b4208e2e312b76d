//! Dense semantic representation of a posed body: per-vertex codes from the
//! rest pose, the code image rendered under an orthographic camera, and the
//! code volume propagated into the occupied voxels.
//!
//! All rasterization and voxelization run in grid units: voxel (x, y, z) is
//! the unit cube with center (x+0.5, y+0.5, z+0.5), and a pixel at `ppv`
//! pixels per voxel has its center at ((col+0.5)/ppv, (row+0.5)/ppv) on the
//! xy plane. The camera looks along +z, so "front" means smallest z.

use rayon::prelude::*;

use crate::grid::{PlaneMap, VoxelGrid};
use crate::mesh::{bbox, check_watertight, dot3, sub3, TemplateMesh};
use crate::{Error, Result};

/// Uniform scale plus translation from model space into grid units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitTransform {
    pub scale: f64,
    pub offset: [f64; 3],
}

impl FitTransform {
    pub fn identity() -> Self {
        Self { scale: 1.0, offset: [0.0; 3] }
    }

    /// Centers the point cloud's bounding box in the grid, leaving `margin`
    /// (fraction of each extent) free on every side.
    pub fn fit_to_grid(points: &[[f64; 3]], dims: [usize; 3], margin: f64) -> Result<Self> {
        let (lo, hi) = bbox(points)
            .ok_or_else(|| Error::Geometry("cannot fit an empty point set".into()))?;
        let mut scale = f64::INFINITY;
        for a in 0..3 {
            let extent = hi[a] - lo[a];
            if extent > 0.0 {
                scale = scale.min(dims[a] as f64 * (1.0 - 2.0 * margin) / extent);
            }
        }
        if !scale.is_finite() {
            return Err(Error::Geometry("degenerate bounding box on all axes".into()));
        }
        let mut offset = [0.0; 3];
        for a in 0..3 {
            let mid = (lo[a] + hi[a]) / 2.0;
            offset[a] = dims[a] as f64 / 2.0 - scale * mid;
        }
        Ok(Self { scale, offset })
    }

    #[inline]
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        [
            p[0] * self.scale + self.offset[0],
            p[1] * self.scale + self.offset[1],
            p[2] * self.scale + self.offset[2],
        ]
    }
}

/// Min-max normalization of the rest-pose vertices by their bounding box.
/// Codes are pose-invariant: they depend only on `rest_vertices`.
pub fn assign_semantic_codes(mesh: &TemplateMesh) -> Result<Vec<[f64; 3]>> {
    let (lo, hi) = bbox(&mesh.rest_vertices)
        .ok_or_else(|| Error::Geometry("mesh has no vertices".into()))?;
    for a in 0..3 {
        if hi[a] - lo[a] <= 0.0 {
            return Err(Error::Geometry(format!(
                "rest bounding box has zero extent on axis {a}"
            )));
        }
    }
    Ok(mesh
        .rest_vertices
        .iter()
        .map(|v| {
            [
                (v[0] - lo[0]) / (hi[0] - lo[0]),
                (v[1] - lo[1]) / (hi[1] - lo[1]),
                (v[2] - lo[2]) / (hi[2] - lo[2]),
            ]
        })
        .collect())
}

/// Sign of the 2D cross product (b-a) x (p-a) where p is shifted by the
/// symbolic perturbation (eps, eps^2). Never returns 0 unless a == b in xy,
/// so a ray through a shared edge or vertex lands strictly inside exactly
/// one of the adjacent triangles.
#[inline]
fn orient_perturbed(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> i8 {
    let base = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
    if base != 0.0 {
        return if base > 0.0 { 1 } else { -1 };
    }
    let eps1 = -(b[1] - a[1]);
    if eps1 != 0.0 {
        return if eps1 > 0.0 { 1 } else { -1 };
    }
    let eps2 = b[0] - a[0];
    if eps2 > 0.0 {
        1
    } else if eps2 < 0.0 {
        -1
    } else {
        0
    }
}

/// Projected triangle prepared for repeated point queries.
#[derive(Clone, Copy)]
struct ProjTri {
    a: [f64; 2],
    b: [f64; 2],
    c: [f64; 2],
    z: [f64; 3],
    area2: f64,
    index: u32,
}

/// If the (perturbed) xy point lies inside, returns the surface z there and
/// the unperturbed barycentric weights.
#[inline]
fn hit(tri: &ProjTri, p: [f64; 2]) -> Option<(f64, [f64; 3])> {
    let s1 = orient_perturbed(tri.a, tri.b, p);
    let s2 = orient_perturbed(tri.b, tri.c, p);
    let s3 = orient_perturbed(tri.c, tri.a, p);
    if s1 == 0 || s1 != s2 || s2 != s3 {
        return None;
    }
    let o = |a: [f64; 2], b: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
    let wa = o(tri.b, tri.c) / tri.area2;
    let wb = o(tri.c, tri.a) / tri.area2;
    let wc = 1.0 - wa - wb;
    Some((wa * tri.z[0] + wb * tri.z[1] + wc * tri.z[2], [wa, wb, wc]))
}

/// Triangles projected to the xy plane, bucketed into unit columns.
struct ColumnIndex {
    nx: usize,
    ny: usize,
    tris: Vec<ProjTri>,
    bins: Vec<Vec<u32>>,
}

impl ColumnIndex {
    /// `grid_verts` are already in grid units; `nx`/`ny` count unit columns.
    fn build(grid_verts: &[[f64; 3]], faces: &[[usize; 3]], nx: usize, ny: usize) -> Self {
        let mut tris = Vec::with_capacity(faces.len());
        for (fi, f) in faces.iter().enumerate() {
            let (va, vb, vc) = (grid_verts[f[0]], grid_verts[f[1]], grid_verts[f[2]]);
            let a = [va[0], va[1]];
            let b = [vb[0], vb[1]];
            let c = [vc[0], vc[1]];
            let area2 = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
            if area2 == 0.0 {
                // Degenerate in projection: contributes no crossings; the
                // adjacent faces of a watertight mesh carry the parity.
                continue;
            }
            tris.push(ProjTri {
                a,
                b,
                c,
                z: [va[2], vb[2], vc[2]],
                area2,
                index: fi as u32,
            });
        }
        let mut bins = vec![Vec::new(); nx * ny];
        for (ti, t) in tris.iter().enumerate() {
            let xs = [t.a[0], t.b[0], t.c[0]];
            let ys = [t.a[1], t.b[1], t.c[1]];
            let x0 = xs.iter().cloned().fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
            let x1 = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max).ceil() as isize;
            let y0 = ys.iter().cloned().fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
            let y1 = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max).ceil() as isize;
            let x1 = (x1.max(0) as usize).min(nx);
            let y1 = (y1.max(0) as usize).min(ny);
            for yi in y0.min(ny)..y1 {
                for xi in x0.min(nx)..x1 {
                    bins[yi * nx + xi].push(ti as u32);
                }
            }
        }
        Self { nx, ny, tris, bins }
    }

    #[inline]
    fn column(&self, x: f64, y: f64) -> &[u32] {
        let xi = (x.floor().max(0.0) as usize).min(self.nx - 1);
        let yi = (y.floor().max(0.0) as usize).min(self.ny - 1);
        &self.bins[yi * self.nx + xi]
    }
}

/// Binary inside/outside by parity of surface crossings along +z through
/// each voxel center.
pub fn voxelize(mesh: &TemplateMesh, dims: [usize; 3], fit: &FitTransform) -> Result<VoxelGrid> {
    check_watertight(&mesh.faces)?;
    let verts: Vec<[f64; 3]> = mesh.vertices.iter().map(|v| fit.apply(*v)).collect();
    let [nx, ny, _] = dims;
    let index = ColumnIndex::build(&verts, &mesh.faces, nx, ny);
    let crossings = column_crossings(&index, nx, ny);
    let mut grid = VoxelGrid::new(dims, 1);
    grid.data_mut()
        .par_chunks_mut(nx * ny)
        .enumerate()
        .for_each(|(zi, slab)| {
            let zc = zi as f64 + 0.5;
            for (col, out) in slab.iter_mut().enumerate() {
                let below = crossings[col].partition_point(|&z| z < zc);
                *out = (below % 2) as f32;
            }
        });
    Ok(grid)
}

/// Per-column surface crossings, reused across all z slices of a column.
fn column_crossings(index: &ColumnIndex, nx: usize, ny: usize) -> Vec<Vec<f64>> {
    (0..nx * ny)
        .into_par_iter()
        .map(|col| {
            let (yi, xi) = (col / nx, col % nx);
            let p = [xi as f64 + 0.5, yi as f64 + 0.5];
            let mut zs: Vec<f64> = index
                .column(p[0], p[1])
                .iter()
                .filter_map(|&ti| hit(&index.tris[ti as usize], p).map(|(z, _)| z))
                .collect();
            zs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            zs
        })
        .collect()
}

fn closest_point_on_triangle(
    p: [f64; 3],
    a: [f64; 3],
    b: [f64; 3],
    c: [f64; 3],
) -> ([f64; 3], [f64; 3]) {
    // Region walk over the barycentric decomposition.
    let ab = sub3(b, a);
    let ac = sub3(c, a);
    let ap = sub3(p, a);
    let d1 = dot3(ab, ap);
    let d2 = dot3(ac, ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return (a, [1.0, 0.0, 0.0]);
    }
    let bp = sub3(p, b);
    let d3 = dot3(ab, bp);
    let d4 = dot3(ac, bp);
    if d3 >= 0.0 && d4 <= d3 {
        return (b, [0.0, 1.0, 0.0]);
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let t = d1 / (d1 - d3);
        return (
            [a[0] + t * ab[0], a[1] + t * ab[1], a[2] + t * ab[2]],
            [1.0 - t, t, 0.0],
        );
    }
    let cp = sub3(p, c);
    let d5 = dot3(ab, cp);
    let d6 = dot3(ac, cp);
    if d6 >= 0.0 && d5 <= d6 {
        return (c, [0.0, 0.0, 1.0]);
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let t = d2 / (d2 - d6);
        return (
            [a[0] + t * ac[0], a[1] + t * ac[1], a[2] + t * ac[2]],
            [1.0 - t, 0.0, t],
        );
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let t = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (
            [
                b[0] + t * (c[0] - b[0]),
                b[1] + t * (c[1] - b[1]),
                b[2] + t * (c[2] - b[2]),
            ],
            [0.0, 1.0 - t, t],
        );
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (
        [
            a[0] + ab[0] * v + ac[0] * w,
            a[1] + ab[1] * v + ac[1] * w,
            a[2] + ab[2] * v + ac[2] * w,
        ],
        [1.0 - v - w, v, w],
    )
}

/// Triangles bucketed into coarse 3D cells by bounding box, queried with an
/// expanding ring search that stops once no closer cell can exist.
struct SurfaceIndex<'m> {
    verts: Vec<[f64; 3]>,
    faces: &'m [[usize; 3]],
    cell: f64,
    dims: [usize; 3],
    bins: Vec<Vec<u32>>,
}

impl<'m> SurfaceIndex<'m> {
    fn build(verts: Vec<[f64; 3]>, faces: &'m [[usize; 3]], grid_dims: [usize; 3]) -> Self {
        let cell = (grid_dims.iter().copied().max().unwrap() as f64 / 16.0).max(2.0);
        let dims = [
            (grid_dims[0] as f64 / cell).ceil() as usize + 1,
            (grid_dims[1] as f64 / cell).ceil() as usize + 1,
            (grid_dims[2] as f64 / cell).ceil() as usize + 1,
        ];
        let mut bins = vec![Vec::new(); dims[0] * dims[1] * dims[2]];
        let clampc = |v: f64, n: usize| (v.max(0.0) as usize).min(n - 1);
        for (fi, f) in faces.iter().enumerate() {
            let mut lo = [f64::INFINITY; 3];
            let mut hi = [f64::NEG_INFINITY; 3];
            for &vi in f {
                for k in 0..3 {
                    lo[k] = lo[k].min(verts[vi][k]);
                    hi[k] = hi[k].max(verts[vi][k]);
                }
            }
            let c0 = [
                clampc((lo[0] / cell).floor(), dims[0]),
                clampc((lo[1] / cell).floor(), dims[1]),
                clampc((lo[2] / cell).floor(), dims[2]),
            ];
            let c1 = [
                clampc((hi[0] / cell).floor(), dims[0]),
                clampc((hi[1] / cell).floor(), dims[1]),
                clampc((hi[2] / cell).floor(), dims[2]),
            ];
            for cz in c0[2]..=c1[2] {
                for cy in c0[1]..=c1[1] {
                    for cx in c0[0]..=c1[0] {
                        bins[(cz * dims[1] + cy) * dims[0] + cx].push(fi as u32);
                    }
                }
            }
        }
        Self { verts, faces, cell, dims, bins }
    }

    /// Nearest surface point to `p`; returns (face, barycentric weights).
    fn nearest(&self, p: [f64; 3]) -> Option<(usize, [f64; 3])> {
        let clampc = |v: f64, n: usize| (v.max(0.0) as usize).min(n - 1);
        let home = [
            clampc((p[0] / self.cell).floor(), self.dims[0]),
            clampc((p[1] / self.cell).floor(), self.dims[1]),
            clampc((p[2] / self.cell).floor(), self.dims[2]),
        ];
        let max_ring = *self.dims.iter().max().unwrap();
        let mut best: Option<(f64, usize, [f64; 3])> = None;
        for ring in 0..=max_ring {
            if let Some((d2, _, _)) = best {
                // Cells at Chebyshev ring r are at least (r-1) cells away.
                let ring_min = (ring as f64 - 1.0).max(0.0) * self.cell;
                if ring_min * ring_min > d2 {
                    break;
                }
            }
            let r = ring as isize;
            for dz in -r..=r {
                for dy in -r..=r {
                    for dx in -r..=r {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                            continue;
                        }
                        let cx = home[0] as isize + dx;
                        let cy = home[1] as isize + dy;
                        let cz = home[2] as isize + dz;
                        if cx < 0
                            || cy < 0
                            || cz < 0
                            || cx >= self.dims[0] as isize
                            || cy >= self.dims[1] as isize
                            || cz >= self.dims[2] as isize
                        {
                            continue;
                        }
                        let bin = &self.bins
                            [(cz as usize * self.dims[1] + cy as usize) * self.dims[0]
                                + cx as usize];
                        for &fi in bin {
                            let f = self.faces[fi as usize];
                            let (q, w) = closest_point_on_triangle(
                                p,
                                self.verts[f[0]],
                                self.verts[f[1]],
                                self.verts[f[2]],
                            );
                            let d = sub3(p, q);
                            let d2 = dot3(d, d);
                            let better = match best {
                                None => true,
                                Some((bd2, bfi, _)) => {
                                    d2 < bd2 - 1e-12
                                        || (d2 <= bd2 + 1e-12 && (fi as usize) < bfi)
                                }
                            };
                            if better {
                                best = Some((d2, fi as usize, w));
                            }
                        }
                    }
                }
            }
        }
        best.map(|(_, fi, w)| (fi, w))
    }
}

/// Occupied voxels take the barycentric code of the nearest surface point;
/// empty voxels stay zero.
pub fn build_semantic_volume(
    mesh: &TemplateMesh,
    codes: &[[f64; 3]],
    dims: [usize; 3],
    fit: &FitTransform,
) -> Result<VoxelGrid> {
    if codes.len() != mesh.vertices.len() {
        return Err(Error::Geometry(format!(
            "{} codes for {} vertices",
            codes.len(),
            mesh.vertices.len()
        )));
    }
    let occupancy = voxelize(mesh, dims, fit)?;
    let verts: Vec<[f64; 3]> = mesh.vertices.iter().map(|v| fit.apply(*v)).collect();
    let surf = SurfaceIndex::build(verts, &mesh.faces, dims);
    let [nx, ny, _] = dims;
    let mut out = VoxelGrid::new(dims, 3);
    let occ = occupancy.data();
    out.data_mut()
        .par_chunks_mut(nx * 3)
        .enumerate()
        .for_each(|(row, chunk)| {
            let (zi, yi) = (row / ny, row % ny);
            for xi in 0..nx {
                if occ[(zi * ny + yi) * nx + xi] == 0.0 {
                    continue;
                }
                let p = [xi as f64 + 0.5, yi as f64 + 0.5, zi as f64 + 0.5];
                if let Some((fi, w)) = surf.nearest(p) {
                    let f = mesh.faces[fi];
                    for k in 0..3 {
                        let v = w[0] * codes[f[0]][k]
                            + w[1] * codes[f[1]][k]
                            + w[2] * codes[f[2]][k];
                        chunk[xi * 3 + k] = v.clamp(0.0, 1.0) as f32;
                    }
                }
            }
        });
    Ok(out)
}

/// Shared front-most rasterization: per pixel, the smallest surface z and
/// the face/barycentric pair there. Ties go to the lowest face index.
fn rasterize(
    verts: &[[f64; 3]],
    faces: &[[usize; 3]],
    h: usize,
    w: usize,
    ppv: f64,
) -> Vec<Option<(f64, u32, [f64; 3])>> {
    let nx = (w as f64 / ppv).ceil() as usize + 1;
    let ny = (h as f64 / ppv).ceil() as usize + 1;
    let index = ColumnIndex::build(verts, faces, nx.max(1), ny.max(1));
    (0..h * w)
        .into_par_iter()
        .map(|pix| {
            let (row, col) = (pix / w, pix % w);
            let p = [(col as f64 + 0.5) / ppv, (row as f64 + 0.5) / ppv];
            let mut best: Option<(f64, u32, [f64; 3])> = None;
            for &ti in index.column(p[0], p[1]) {
                let tri = &index.tris[ti as usize];
                if let Some((z, bary)) = hit(tri, p) {
                    let replace = match best {
                        None => true,
                        Some((bz, bidx, _)) => {
                            z < bz || (z == bz && tri.index < bidx)
                        }
                    };
                    if replace {
                        best = Some((z, tri.index, bary));
                    }
                }
            }
            best
        })
        .collect()
}

/// Orthographic code image: front-most triangle per pixel, codes
/// barycentrically interpolated, background zero.
pub fn render_semantic_map(
    mesh: &TemplateMesh,
    codes: &[[f64; 3]],
    h: usize,
    w: usize,
    fit: &FitTransform,
    ppv: f64,
) -> Result<PlaneMap> {
    if codes.len() != mesh.vertices.len() {
        return Err(Error::Geometry(format!(
            "{} codes for {} vertices",
            codes.len(),
            mesh.vertices.len()
        )));
    }
    let verts: Vec<[f64; 3]> = mesh.vertices.iter().map(|v| fit.apply(*v)).collect();
    let frags = rasterize(&verts, &mesh.faces, h, w, ppv);
    let mut map = PlaneMap::new(h, w, 3);
    for (pix, frag) in frags.iter().enumerate() {
        if let Some((_, fi, bary)) = frag {
            let f = mesh.faces[*fi as usize];
            let (row, col) = (pix / w, pix % w);
            for k in 0..3 {
                let v = bary[0] * codes[f[0]][k]
                    + bary[1] * codes[f[1]][k]
                    + bary[2] * codes[f[2]][k];
                map.set(row, col, k, v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Ok(map)
}

/// Orthographic depth image in voxel z units; `background` fills misses.
pub fn render_depth(
    verts: &[[f64; 3]],
    faces: &[[usize; 3]],
    h: usize,
    w: usize,
    ppv: f64,
    background: f64,
) -> PlaneMap {
    let frags = rasterize(verts, faces, h, w, ppv);
    let mut map = PlaneMap::new(h, w, 1);
    for (pix, frag) in frags.iter().enumerate() {
        let (row, col) = (pix / w, pix % w);
        let z = frag.map_or(background, |(z, _, _)| z);
        map.set(row, col, 0, z as f32);
    }
    map
}

/// Front crossings per unit column, for callers that need ray intervals.
pub fn surface_crossings(
    mesh: &TemplateMesh,
    dims: [usize; 3],
    fit: &FitTransform,
) -> Vec<Vec<f64>> {
    let verts: Vec<[f64; 3]> = mesh.vertices.iter().map(|v| fit.apply(*v)).collect();
    let index = ColumnIndex::build(&verts, &mesh.faces, dims[0], dims[1]);
    column_crossings(&index, dims[0], dims[1])
}
