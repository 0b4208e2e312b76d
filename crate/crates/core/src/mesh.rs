//! Triangle mesh containers, ASCII OBJ input/output, and mesh integrity
//! checks shared by the geometry stages.
//!
//! Vertices are f64 triples in model units. Faces are CCW when viewed from
//! outside, so the signed volume of a closed mesh is positive.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::{Error, Result};

/// Posed body mesh paired with its rest-pose vertices.
///
/// `vertices` is the posed geometry that gets voxelized and rendered;
/// `rest_vertices` (same length and connectivity) drives the per-vertex
/// codes, which therefore travel with the body part across poses.
#[derive(Debug, Clone)]
pub struct TemplateMesh {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
    pub rest_vertices: Vec<[f64; 3]>,
}

impl TemplateMesh {
    pub fn new(
        vertices: Vec<[f64; 3]>,
        faces: Vec<[usize; 3]>,
        rest_vertices: Vec<[f64; 3]>,
    ) -> Result<Self> {
        if vertices.len() != rest_vertices.len() {
            return Err(Error::Geometry(format!(
                "posed and rest vertex counts differ: {} vs {}",
                vertices.len(),
                rest_vertices.len()
            )));
        }
        validate_faces(&faces, vertices.len())?;
        Ok(Self { vertices, faces, rest_vertices })
    }
}

/// Plain surface geometry with per-vertex normals, as produced by surface
/// extraction and consumed by refinement and export.
#[derive(Debug, Clone)]
pub struct SurfaceMesh {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
    pub normals: Vec<[f64; 3]>,
}

impl SurfaceMesh {
    pub fn new(vertices: Vec<[f64; 3]>, faces: Vec<[usize; 3]>) -> Result<Self> {
        validate_faces(&faces, vertices.len())?;
        let normals = vertex_normals(&vertices, &faces);
        Ok(Self { vertices, faces, normals })
    }

    pub fn recompute_normals(&mut self) {
        self.normals = vertex_normals(&self.vertices, &self.faces);
    }
}

fn validate_faces(faces: &[[usize; 3]], nverts: usize) -> Result<()> {
    for (fi, f) in faces.iter().enumerate() {
        for &v in f {
            if v >= nverts {
                return Err(Error::Geometry(format!(
                    "face {fi} references vertex {v}, mesh has {nverts}"
                )));
            }
        }
    }
    Ok(())
}

/// Every directed edge must appear once and be matched by its reverse.
pub fn check_watertight(faces: &[[usize; 3]]) -> Result<()> {
    use std::collections::HashMap;
    let mut directed: HashMap<(usize, usize), usize> = HashMap::new();
    for f in faces {
        for k in 0..3 {
            let (a, b) = (f[k], f[(k + 1) % 3]);
            if a == b {
                return Err(Error::Geometry(format!("degenerate edge {a}->{b}")));
            }
            *directed.entry((a, b)).or_insert(0) += 1;
        }
    }
    for (&(a, b), &n) in &directed {
        if n != 1 {
            return Err(Error::Geometry(format!(
                "directed edge {a}->{b} used by {n} faces, expected 1"
            )));
        }
        if !directed.contains_key(&(b, a)) {
            return Err(Error::Geometry(format!("edge {a}->{b} has no opposing face")));
        }
    }
    Ok(())
}

/// Signed volume by the divergence theorem; positive for outward orientation.
pub fn mesh_volume(vertices: &[[f64; 3]], faces: &[[usize; 3]]) -> f64 {
    let mut six_v = 0.0;
    for f in faces {
        let (a, b, c) = (vertices[f[0]], vertices[f[1]], vertices[f[2]]);
        six_v += a[0] * (b[1] * c[2] - b[2] * c[1]) - a[1] * (b[0] * c[2] - b[2] * c[0])
            + a[2] * (b[0] * c[1] - b[1] * c[0]);
    }
    six_v / 6.0
}

/// Area-weighted vertex normals (zero where no incident face has area).
pub fn vertex_normals(vertices: &[[f64; 3]], faces: &[[usize; 3]]) -> Vec<[f64; 3]> {
    let mut acc = vec![[0.0f64; 3]; vertices.len()];
    for f in faces {
        let (a, b, c) = (vertices[f[0]], vertices[f[1]], vertices[f[2]]);
        let u = sub3(b, a);
        let v = sub3(c, a);
        let n = cross3(u, v);
        for &vi in f {
            for k in 0..3 {
                acc[vi][k] += n[k];
            }
        }
    }
    for n in &mut acc {
        let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
        if len > 1e-12 {
            for k in 0..3 {
                n[k] /= len;
            }
        } else {
            *n = [0.0; 3];
        }
    }
    acc
}

pub fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm3(a: [f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}

/// Componentwise bounding box of a point set.
pub fn bbox(points: &[[f64; 3]]) -> Option<([f64; 3], [f64; 3])> {
    let first = *points.first()?;
    let mut lo = first;
    let mut hi = first;
    for p in points {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    Some((lo, hi))
}

/// Writes `v x y z [r g b]` and 1-based `f` records.
pub fn write_obj(
    path: &Path,
    vertices: &[[f64; 3]],
    faces: &[[usize; 3]],
    colors: Option<&[[f64; 3]]>,
) -> Result<()> {
    if let Some(cols) = colors {
        if cols.len() != vertices.len() {
            return Err(Error::Geometry(format!(
                "{} colors for {} vertices",
                cols.len(),
                vertices.len()
            )));
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    for (i, v) in vertices.iter().enumerate() {
        match colors {
            Some(cols) => {
                let c = cols[i];
                writeln!(w, "v {} {} {} {} {} {}", v[0], v[1], v[2], c[0], c[1], c[2])?
            }
            None => writeln!(w, "v {} {} {}", v[0], v[1], v[2])?,
        }
    }
    for f in faces {
        writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
    }
    Ok(())
}

/// Parsed OBJ payload; `colors` is present iff every vertex carried one.
pub struct ObjData {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
    pub colors: Option<Vec<[f64; 3]>>,
}

pub fn read_obj(path: &Path) -> Result<ObjData> {
    let fmt = |line: usize, msg: &str| {
        Error::Format(format!("{}:{line}: {msg}", path.display()))
    };
    let r = BufReader::new(File::open(path)?);
    let mut vertices = Vec::new();
    let mut colors: Vec<[f64; 3]> = Vec::new();
    let mut faces = Vec::new();
    for (ln, line) in r.lines().enumerate() {
        let line = line?;
        let ln = ln + 1;
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let nums: Vec<f64> = it
                    .map(|t| t.parse().map_err(|_| fmt(ln, "bad vertex number")))
                    .collect::<Result<_>>()?;
                match nums.len() {
                    3 => vertices.push([nums[0], nums[1], nums[2]]),
                    6 => {
                        vertices.push([nums[0], nums[1], nums[2]]);
                        colors.push([nums[3], nums[4], nums[5]]);
                    }
                    n => return Err(fmt(ln, &format!("vertex has {n} components"))),
                }
            }
            Some("f") => {
                let idx: Vec<usize> = it
                    .map(|t| {
                        let head = t.split('/').next().unwrap_or("");
                        let v: i64 =
                            head.parse().map_err(|_| fmt(ln, "bad face index"))?;
                        if v < 1 {
                            return Err(fmt(ln, "face indices must be positive"));
                        }
                        Ok(v as usize - 1)
                    })
                    .collect::<Result<_>>()?;
                if idx.len() != 3 {
                    return Err(fmt(ln, "only triangle faces are supported"));
                }
                faces.push([idx[0], idx[1], idx[2]]);
            }
            _ => {}
        }
    }
    validate_faces(&faces, vertices.len()).map_err(|e| fmt(0, &e.to_string()))?;
    let colors = if colors.len() == vertices.len() && !vertices.is_empty() {
        Some(colors)
    } else if colors.is_empty() {
        None
    } else {
        return Err(fmt(0, "some vertices carry colors and some do not"));
    };
    Ok(ObjData { vertices, faces, colors })
}

/// Watertight reference solids used by tests and the synthetic corpus.
pub mod shapes {
    /// Axis-aligned cube with outward-facing triangles.
    pub fn cube(origin: [f64; 3], size: f64) -> (Vec<[f64; 3]>, Vec<[usize; 3]>) {
        let mut verts = Vec::with_capacity(8);
        for i in 0..8 {
            verts.push([
                origin[0] + size * (i & 1) as f64,
                origin[1] + size * ((i >> 1) & 1) as f64,
                origin[2] + size * ((i >> 2) & 1) as f64,
            ]);
        }
        let faces = vec![
            [0, 2, 1],
            [1, 2, 3],
            [4, 5, 6],
            [5, 7, 6],
            [0, 1, 5],
            [0, 5, 4],
            [2, 7, 3],
            [2, 6, 7],
            [0, 4, 2],
            [2, 4, 6],
            [1, 3, 7],
            [1, 7, 5],
        ];
        (verts, faces)
    }

    pub fn tetrahedron() -> (Vec<[f64; 3]>, Vec<[usize; 3]>) {
        let verts = vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
        ];
        let faces = vec![[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]];
        (verts, faces)
    }

    /// Subdivided icosahedron projected onto a sphere.
    pub fn icosphere(
        center: [f64; 3],
        radius: f64,
        subdivisions: u32,
    ) -> (Vec<[f64; 3]>, Vec<[usize; 3]>) {
        let t = (1.0 + 5.0f64.sqrt()) / 2.0;
        let mut verts: Vec<[f64; 3]> = vec![
            [-1.0, t, 0.0],
            [1.0, t, 0.0],
            [-1.0, -t, 0.0],
            [1.0, -t, 0.0],
            [0.0, -1.0, t],
            [0.0, 1.0, t],
            [0.0, -1.0, -t],
            [0.0, 1.0, -t],
            [t, 0.0, -1.0],
            [t, 0.0, 1.0],
            [-t, 0.0, -1.0],
            [-t, 0.0, 1.0],
        ];
        let mut faces: Vec<[usize; 3]> = vec![
            [0, 11, 5],
            [0, 5, 1],
            [0, 1, 7],
            [0, 7, 10],
            [0, 10, 11],
            [1, 5, 9],
            [5, 11, 4],
            [11, 10, 2],
            [10, 7, 6],
            [7, 1, 8],
            [3, 9, 4],
            [3, 4, 2],
            [3, 2, 6],
            [3, 6, 8],
            [3, 8, 9],
            [4, 9, 5],
            [2, 4, 11],
            [6, 2, 10],
            [8, 6, 7],
            [9, 8, 1],
        ];
        let unit = |v: [f64; 3]| {
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            [v[0] / n, v[1] / n, v[2] / n]
        };
        for v in &mut verts {
            *v = unit(*v);
        }
        for _ in 0..subdivisions {
            use std::collections::HashMap;
            let mut midpoint: HashMap<(usize, usize), usize> = HashMap::new();
            let mut next = Vec::with_capacity(faces.len() * 4);
            for f in &faces {
                let mut mids = [0usize; 3];
                for k in 0..3 {
                    let (a, b) = (f[k], f[(k + 1) % 3]);
                    let key = (a.min(b), a.max(b));
                    mids[k] = *midpoint.entry(key).or_insert_with(|| {
                        let (va, vb) = (verts[a], verts[b]);
                        verts.push(unit([
                            (va[0] + vb[0]) / 2.0,
                            (va[1] + vb[1]) / 2.0,
                            (va[2] + vb[2]) / 2.0,
                        ]));
                        verts.len() - 1
                    });
                }
                next.push([f[0], mids[0], mids[2]]);
                next.push([f[1], mids[1], mids[0]]);
                next.push([f[2], mids[2], mids[1]]);
                next.push([mids[0], mids[1], mids[2]]);
            }
            faces = next;
        }
        for v in &mut verts {
            for k in 0..3 {
                v[k] = center[k] + radius * v[k];
            }
        }
        (verts, faces)
    }
}
