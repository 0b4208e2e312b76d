//! Differentiable geometric layers bridging volumes and image-plane maps:
//! feature modulation shared across z, visibility-style depth projection,
//! silhouette projection, the depth -> vertex -> normal chain, bilinear
//! upsampling, and z-broadcast.
//!
//! Volumes are `[N, C, Z, Y, X]`, maps `[N, C, H, W]` with rows = y. The
//! camera looks along +z, so the front surface has the smallest z and
//! visible normals carry a negative z component.

use crate::autodiff::{mul, Real, Tensor};
use crate::{Error, Result};

/// Per-level modulation: one affine pair shared by every z-slice.
/// out(n,c,z,y,x) = alpha(n,c,y,x) * vol(n,c,z,y,x) + beta(n,c,y,x).
pub fn vft_apply<S: Real>(
    vol: &Tensor<S>,
    alpha: &Tensor<S>,
    beta: &Tensor<S>,
) -> Result<Tensor<S>> {
    let vs = vol.shape();
    if vs.len() != 5 {
        return Err(Error::Shape(format!("modulation needs [N,C,Z,Y,X] volume, got {vs:?}")));
    }
    let slice = vec![vs[0], vs[1], vs[3], vs[4]];
    if alpha.shape() != slice || beta.shape() != slice {
        return Err(Error::Shape(format!(
            "modulators must match volume slice {slice:?}, got alpha {:?} beta {:?}",
            alpha.shape(),
            beta.shape()
        )));
    }
    let (n, c, z, y, x) = (vs[0], vs[1], vs[2], vs[3], vs[4]);
    let plane = y * x;
    let vol_d = vol.to_vec();
    let a_d = alpha.to_vec();
    let b_d = beta.to_vec();
    let mut out = vec![S::zero(); vol_d.len()];
    for ni in 0..n {
        for ci in 0..c {
            let m = (ni * c + ci) * plane;
            for zi in 0..z {
                let v = ((ni * c + ci) * z + zi) * plane;
                for p in 0..plane {
                    out[v + p] = a_d[m + p] * vol_d[v + p] + b_d[m + p];
                }
            }
        }
    }
    let (pv, pa, pb) = (vol.clone(), alpha.clone(), beta.clone());
    Ok(Tensor::from_op(
        vs.clone(),
        out,
        vec![vol.clone(), alpha.clone(), beta.clone()],
        Box::new(move |g, _| {
            pv.add_grad(|dv| {
                for ni in 0..n {
                    for ci in 0..c {
                        let m = (ni * c + ci) * plane;
                        for zi in 0..z {
                            let v = ((ni * c + ci) * z + zi) * plane;
                            for p in 0..plane {
                                dv[v + p] += g[v + p] * a_d[m + p];
                            }
                        }
                    }
                }
            });
            pa.add_grad(|da| {
                for ni in 0..n {
                    for ci in 0..c {
                        let m = (ni * c + ci) * plane;
                        for zi in 0..z {
                            let v = ((ni * c + ci) * z + zi) * plane;
                            for p in 0..plane {
                                da[m + p] += g[v + p] * vol_d[v + p];
                            }
                        }
                    }
                }
            });
            pb.add_grad(|db| {
                for ni in 0..n {
                    for ci in 0..c {
                        let m = (ni * c + ci) * plane;
                        for zi in 0..z {
                            let v = ((ni * c + ci) * z + zi) * plane;
                            for p in 0..plane {
                                db[m + p] += g[v + p];
                            }
                        }
                    }
                }
            });
        }),
    ))
}

fn require_volume<S: Real>(t: &Tensor<S>, what: &str) -> Result<(usize, usize, usize, usize)> {
    let s = t.shape();
    if s.len() != 5 || s[1] != 1 {
        return Err(Error::Shape(format!("{what} needs a [N,1,Z,Y,X] volume, got {s:?}")));
    }
    Ok((s[0], s[2], s[3], s[4]))
}

/// Background depth constant: strictly dominates any voxel index.
pub fn background_depth(z_dim: usize) -> f64 {
    2.0 * z_dim as f64
}

/// Depth map via the affine min transform: per ray, min over z of
/// M*(1-v) + z*v. The gradient flows to the argmin voxel (first minimum
/// when tied), with dD/dv = z - M there.
pub fn project_depth<S: Real>(vol: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, z, y, x) = require_volume(vol, "depth projection")?;
    let m = S::from_f64(background_depth(z));
    let plane = y * x;
    let vd = vol.data();
    let mut out = vec![S::zero(); n * plane];
    let mut arg = vec![0u32; n * plane];
    for ni in 0..n {
        for p in 0..plane {
            let mut best = S::infinity();
            let mut best_z = 0u32;
            for zi in 0..z {
                let v = vd[(ni * z + zi) * plane + p];
                let depth = m * (S::one() - v) + S::from_f64(zi as f64) * v;
                if depth < best {
                    best = depth;
                    best_z = zi as u32;
                }
            }
            out[ni * plane + p] = best;
            arg[ni * plane + p] = best_z;
        }
    }
    drop(vd);
    let pv = vol.clone();
    Ok(Tensor::from_op(
        vec![n, 1, y, x],
        out,
        vec![vol.clone()],
        Box::new(move |g, _| {
            pv.add_grad(|dv| {
                for ni in 0..n {
                    for p in 0..plane {
                        let zi = arg[ni * plane + p] as usize;
                        let w = S::from_f64(zi as f64) - m;
                        dv[(ni * z + zi) * plane + p] += g[ni * plane + p] * w;
                    }
                }
            });
        }),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SilhouetteAxis {
    /// Max over z onto (y, x).
    Front,
    /// Max over x onto (y, z).
    Side,
}

/// Orthographic silhouette: per-ray max, gradient to the argmax voxel
/// (first maximum when tied).
pub fn project_silhouette<S: Real>(vol: &Tensor<S>, axis: SilhouetteAxis) -> Result<Tensor<S>> {
    let (n, z, y, x) = require_volume(vol, "silhouette projection")?;
    let vd = vol.data();
    let (h, w, ray) = match axis {
        SilhouetteAxis::Front => (y, x, z),
        SilhouetteAxis::Side => (y, z, x),
    };
    let vol_idx = move |ni: usize, row: usize, col: usize, r: usize| match axis {
        SilhouetteAxis::Front => ((ni * z + r) * y + row) * x + col,
        SilhouetteAxis::Side => ((ni * z + col) * y + row) * x + r,
    };
    let mut out = vec![S::zero(); n * h * w];
    let mut arg = vec![0u32; n * h * w];
    for ni in 0..n {
        for row in 0..h {
            for col in 0..w {
                let mut best = S::neg_infinity();
                let mut best_r = 0u32;
                for r in 0..ray {
                    let v = vd[vol_idx(ni, row, col, r)];
                    if v > best {
                        best = v;
                        best_r = r as u32;
                    }
                }
                out[(ni * h + row) * w + col] = best;
                arg[(ni * h + row) * w + col] = best_r;
            }
        }
    }
    drop(vd);
    let pv = vol.clone();
    Ok(Tensor::from_op(
        vec![n, 1, h, w],
        out,
        vec![vol.clone()],
        Box::new(move |g, _| {
            pv.add_grad(|dv| {
                for ni in 0..n {
                    for row in 0..h {
                        for col in 0..w {
                            let o = (ni * h + row) * w + col;
                            dv[vol_idx(ni, row, col, arg[o] as usize)] += g[o];
                        }
                    }
                }
            });
        }),
    ))
}

/// Lifts a depth map to a vertex map (x, y, D) in voxel units; `xy_scale`
/// converts pixel indices to voxel units (0.5 on a 2x raster).
pub fn depth_to_vertex<S: Real>(depth: &Tensor<S>, xy_scale: f64) -> Result<Tensor<S>> {
    let s = depth.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::Shape(format!("vertex lift needs [N,1,H,W] depth, got {s:?}")));
    }
    let (n, h, w) = (s[0], s[2], s[3]);
    let plane = h * w;
    let dd = depth.data();
    let mut out = vec![S::zero(); n * 3 * plane];
    for ni in 0..n {
        for row in 0..h {
            for col in 0..w {
                let p = row * w + col;
                out[(ni * 3) * plane + p] = S::from_f64(col as f64 * xy_scale);
                out[(ni * 3 + 1) * plane + p] = S::from_f64(row as f64 * xy_scale);
                out[(ni * 3 + 2) * plane + p] = dd[ni * plane + p];
            }
        }
    }
    drop(dd);
    let pd = depth.clone();
    Ok(Tensor::from_op(
        vec![n, 3, h, w],
        out,
        vec![depth.clone()],
        Box::new(move |g, _| {
            pd.add_grad(|dv| {
                for ni in 0..n {
                    for p in 0..plane {
                        dv[ni * plane + p] += g[(ni * 3 + 2) * plane + p];
                    }
                }
            });
        }),
    ))
}

/// Mirror index without repeating the border sample.
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * n - 2 - i;
    }
    i as usize
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

fn sobel<S: Real>(t: &Tensor<S>, kernel: &'static [[f64; 3]; 3]) -> Result<Tensor<S>> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("derivative filter needs [N,C,H,W], got {s:?}")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if h < 2 || w < 2 {
        return Err(Error::Shape(format!("derivative filter needs h,w >= 2, got {h}x{w}")));
    }
    let td = t.data();
    let mut out = vec![S::zero(); td.len()];
    for img in 0..n * c {
        let base = img * h * w;
        for row in 0..h {
            for col in 0..w {
                let mut acc = S::zero();
                for (dy, krow) in kernel.iter().enumerate() {
                    for (dx, &kv) in krow.iter().enumerate() {
                        if kv == 0.0 {
                            continue;
                        }
                        let sy = reflect(row as isize + dy as isize - 1, h);
                        let sx = reflect(col as isize + dx as isize - 1, w);
                        acc += S::from_f64(kv) * td[base + sy * w + sx];
                    }
                }
                out[base + row * w + col] = acc;
            }
        }
    }
    drop(td);
    let pt = t.clone();
    Ok(Tensor::from_op(
        s.clone(),
        out,
        vec![t.clone()],
        Box::new(move |g, _| {
            pt.add_grad(|dt| {
                for img in 0..n * c {
                    let base = img * h * w;
                    for row in 0..h {
                        for col in 0..w {
                            let go = g[base + row * w + col];
                            for (dy, krow) in kernel.iter().enumerate() {
                                for (dx, &kv) in krow.iter().enumerate() {
                                    if kv == 0.0 {
                                        continue;
                                    }
                                    let sy = reflect(row as isize + dy as isize - 1, h);
                                    let sx = reflect(col as isize + dx as isize - 1, w);
                                    dt[base + sy * w + sx] += S::from_f64(kv) * go;
                                }
                            }
                        }
                    }
                }
            });
        }),
    ))
}

pub fn sobel_x<S: Real>(t: &Tensor<S>) -> Result<Tensor<S>> {
    sobel(t, &SOBEL_X)
}

pub fn sobel_y<S: Real>(t: &Tensor<S>) -> Result<Tensor<S>> {
    sobel(t, &SOBEL_Y)
}

/// Per-pixel cross product of two 3-channel maps.
pub fn cross_channels<S: Real>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let s = a.shape();
    if s != b.shape() || s.len() != 4 || s[1] != 3 {
        return Err(Error::Shape(format!(
            "cross product needs matching [N,3,H,W] maps, got {s:?} and {:?}",
            b.shape()
        )));
    }
    let (n, h, w) = (s[0], s[2], s[3]);
    let plane = h * w;
    let ad = a.to_vec();
    let bd = b.to_vec();
    let get = move |d: &[S], ni: usize, ch: usize, p: usize| d[(ni * 3 + ch) * plane + p];
    let mut out = vec![S::zero(); ad.len()];
    for ni in 0..n {
        for p in 0..plane {
            let (a0, a1, a2) = (get(&ad, ni, 0, p), get(&ad, ni, 1, p), get(&ad, ni, 2, p));
            let (b0, b1, b2) = (get(&bd, ni, 0, p), get(&bd, ni, 1, p), get(&bd, ni, 2, p));
            out[(ni * 3) * plane + p] = a1 * b2 - a2 * b1;
            out[(ni * 3 + 1) * plane + p] = a2 * b0 - a0 * b2;
            out[(ni * 3 + 2) * plane + p] = a0 * b1 - a1 * b0;
        }
    }
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        s.clone(),
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g, _| {
            // For c = a x b: da = b x g, db = g x a.
            pa.add_grad(|da| {
                for ni in 0..n {
                    for p in 0..plane {
                        let (b0, b1, b2) =
                            (get(&bd, ni, 0, p), get(&bd, ni, 1, p), get(&bd, ni, 2, p));
                        let (g0, g1, g2) = (
                            g[(ni * 3) * plane + p],
                            g[(ni * 3 + 1) * plane + p],
                            g[(ni * 3 + 2) * plane + p],
                        );
                        da[(ni * 3) * plane + p] += b1 * g2 - b2 * g1;
                        da[(ni * 3 + 1) * plane + p] += b2 * g0 - b0 * g2;
                        da[(ni * 3 + 2) * plane + p] += b0 * g1 - b1 * g0;
                    }
                }
            });
            pb.add_grad(|db| {
                for ni in 0..n {
                    for p in 0..plane {
                        let (a0, a1, a2) =
                            (get(&ad, ni, 0, p), get(&ad, ni, 1, p), get(&ad, ni, 2, p));
                        let (g0, g1, g2) = (
                            g[(ni * 3) * plane + p],
                            g[(ni * 3 + 1) * plane + p],
                            g[(ni * 3 + 2) * plane + p],
                        );
                        db[(ni * 3) * plane + p] += g1 * a2 - g2 * a1;
                        db[(ni * 3 + 1) * plane + p] += g2 * a0 - g0 * a2;
                        db[(ni * 3 + 2) * plane + p] += g0 * a1 - g1 * a0;
                    }
                }
            });
        }),
    ))
}

/// Per-pixel L2 normalization over channels; vectors at or below `eps`
/// map to zero instead of dividing by a vanishing norm.
pub fn normalize_channels<S: Real>(t: &Tensor<S>, eps: f64) -> Result<Tensor<S>> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("normalization needs [N,C,H,W], got {s:?}")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let plane = h * w;
    let td = t.to_vec();
    let epss = S::from_f64(eps);
    let mut out = vec![S::zero(); td.len()];
    let mut norms = vec![S::zero(); n * plane];
    for ni in 0..n {
        for p in 0..plane {
            let mut sq = S::zero();
            for ch in 0..c {
                let v = td[(ni * c + ch) * plane + p];
                sq += v * v;
            }
            let norm = sq.sqrt();
            norms[ni * plane + p] = norm;
            if norm > epss {
                for ch in 0..c {
                    out[(ni * c + ch) * plane + p] = td[(ni * c + ch) * plane + p] / norm;
                }
            }
        }
    }
    let pt = t.clone();
    Ok(Tensor::from_op(
        s.clone(),
        out,
        vec![t.clone()],
        Box::new(move |g, data| {
            pt.add_grad(|dt| {
                for ni in 0..n {
                    for p in 0..plane {
                        let norm = norms[ni * plane + p];
                        if norm <= epss {
                            continue;
                        }
                        let mut ndotg = S::zero();
                        for ch in 0..c {
                            let i = (ni * c + ch) * plane + p;
                            ndotg += data[i] * g[i];
                        }
                        for ch in 0..c {
                            let i = (ni * c + ch) * plane + p;
                            dt[i] += (g[i] - data[i] * ndotg) / norm;
                        }
                    }
                }
            });
        }),
    ))
}

/// Surface normals from a vertex map. Pixels whose 3x3 window (reflective)
/// touches a background depth (z >= background_z - 0.5) emit zero; normals
/// with positive z are flipped toward the camera.
pub fn vertex_to_normal<S: Real>(mv: &Tensor<S>, background_z: f64) -> Result<Tensor<S>> {
    let s = mv.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::Shape(format!("normal layer needs [N,3,H,W], got {s:?}")));
    }
    let (n, h, w) = (s[0], s[2], s[3]);
    let gx = sobel_x(mv)?;
    let gy = sobel_y(mv)?;
    let raw = cross_channels(&gx, &gy)?;
    let normalized = normalize_channels(&raw, 1e-12)?;
    // Orientation and background gates are data-dependent constants.
    let plane = h * w;
    let cutoff = S::from_f64(background_z - 0.5);
    let mut gate = vec![S::zero(); n * 3 * plane];
    {
        let zd = mv.data();
        let nd = normalized.data();
        for ni in 0..n {
            for row in 0..h {
                for col in 0..w {
                    let mut fg = true;
                    'win: for dy in -1isize..=1 {
                        for dx in -1isize..=1 {
                            let sy = reflect(row as isize + dy, h);
                            let sx = reflect(col as isize + dx, w);
                            if zd[(ni * 3 + 2) * plane + sy * w + sx] >= cutoff {
                                fg = false;
                                break 'win;
                            }
                        }
                    }
                    let p = row * w + col;
                    let sign = if !fg {
                        S::zero()
                    } else if nd[(ni * 3 + 2) * plane + p] > S::zero() {
                        -S::one()
                    } else {
                        S::one()
                    };
                    for ch in 0..3 {
                        gate[(ni * 3 + ch) * plane + p] = sign;
                    }
                }
            }
        }
    }
    mul(&normalized, &Tensor::constant(&s, gate))
}

/// Full chain from a depth map to an oriented, masked normal map.
pub fn normal_from_depth<S: Real>(
    depth: &Tensor<S>,
    xy_scale: f64,
    background_z: f64,
) -> Result<Tensor<S>> {
    vertex_to_normal(&depth_to_vertex(depth, xy_scale)?, background_z)
}

/// Bilinear x2 upsampling; output pixel j samples source position j/2
/// (edge-clamped), so even rows/cols copy and odd ones average.
pub fn upsample2x<S: Real>(t: &Tensor<S>) -> Result<Tensor<S>> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("upsampling needs [N,C,H,W], got {s:?}")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h * 2, w * 2);
    // (low index, high index, high weight) per output coordinate.
    let taps = |len: usize, j: usize| -> (usize, usize, f64) {
        if j % 2 == 0 {
            (j / 2, j / 2, 0.0)
        } else {
            let lo = j / 2;
            let hi = (lo + 1).min(len - 1);
            (lo, hi, 0.5)
        }
    };
    let td = t.data();
    let mut out = vec![S::zero(); n * c * oh * ow];
    for img in 0..n * c {
        let src = img * h * w;
        let dst = img * oh * ow;
        for oy in 0..oh {
            let (y0, y1, wy) = taps(h, oy);
            for ox in 0..ow {
                let (x0, x1, wx) = taps(w, ox);
                let v00 = td[src + y0 * w + x0].to_f64();
                let v01 = td[src + y0 * w + x1].to_f64();
                let v10 = td[src + y1 * w + x0].to_f64();
                let v11 = td[src + y1 * w + x1].to_f64();
                let v = v00 * (1.0 - wy) * (1.0 - wx)
                    + v01 * (1.0 - wy) * wx
                    + v10 * wy * (1.0 - wx)
                    + v11 * wy * wx;
                out[dst + oy * ow + ox] = S::from_f64(v);
            }
        }
    }
    drop(td);
    let pt = t.clone();
    Ok(Tensor::from_op(
        vec![n, c, oh, ow],
        out,
        vec![t.clone()],
        Box::new(move |g, _| {
            pt.add_grad(|dt| {
                let taps = |len: usize, j: usize| -> (usize, usize, f64) {
                    if j % 2 == 0 {
                        (j / 2, j / 2, 0.0)
                    } else {
                        let lo = j / 2;
                        let hi = (lo + 1).min(len - 1);
                        (lo, hi, 0.5)
                    }
                };
                for img in 0..n * c {
                    let src = img * h * w;
                    let dst = img * oh * ow;
                    for oy in 0..oh {
                        let (y0, y1, wy) = taps(h, oy);
                        for ox in 0..ow {
                            let (x0, x1, wx) = taps(w, ox);
                            let go = g[dst + oy * ow + ox];
                            dt[src + y0 * w + x0] += go * S::from_f64((1.0 - wy) * (1.0 - wx));
                            dt[src + y0 * w + x1] += go * S::from_f64((1.0 - wy) * wx);
                            dt[src + y1 * w + x0] += go * S::from_f64(wy * (1.0 - wx));
                            dt[src + y1 * w + x1] += go * S::from_f64(wy * wx);
                        }
                    }
                }
            });
        }),
    ))
}

/// Replicates a map along a new z axis: `[N,C,Y,X]` -> `[N,C,Z,Y,X]`.
pub fn broadcast_z<S: Real>(map: &Tensor<S>, z: usize) -> Result<Tensor<S>> {
    let s = map.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("z-broadcast needs [N,C,H,W], got {s:?}")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let plane = h * w;
    let md = map.data();
    let mut out = vec![S::zero(); n * c * z * plane];
    for ni in 0..n {
        for ci in 0..c {
            let src = (ni * c + ci) * plane;
            for zi in 0..z {
                let dst = ((ni * c + ci) * z + zi) * plane;
                out[dst..dst + plane].copy_from_slice(&md[src..src + plane]);
            }
        }
    }
    drop(md);
    let pm = map.clone();
    Ok(Tensor::from_op(
        vec![n, c, z, h, w],
        out,
        vec![map.clone()],
        Box::new(move |g, _| {
            pm.add_grad(|dm| {
                for ni in 0..n {
                    for ci in 0..c {
                        let dst = (ni * c + ci) * plane;
                        for zi in 0..z {
                            let src = ((ni * c + ci) * z + zi) * plane;
                            for p in 0..plane {
                                dm[dst + p] += g[src + p];
                            }
                        }
                    }
                }
            });
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::GradCheck;

    fn lcg(seed: u64) -> impl FnMut() -> f64 {
        let mut s = seed;
        move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        }
    }

    #[test]
    fn modulation_identity_and_affine_example() {
        let vol = Tensor::<f64>::full(&[1, 2, 3, 2, 2], 2.0);
        let ones = Tensor::full(&[1, 2, 2, 2], 1.0);
        let zeros = Tensor::zeros(&[1, 2, 2, 2]);
        let out = vft_apply(&vol, &ones, &zeros).unwrap();
        assert_eq!(out.to_vec(), vol.to_vec());

        let half = Tensor::full(&[1, 2, 2, 2], 0.5);
        let one = Tensor::full(&[1, 2, 2, 2], 1.0);
        let out = vft_apply(&vol, &half, &one).unwrap();
        assert!(out.to_vec().iter().all(|v| (v - 2.0).abs() < 1e-15));
    }

    #[test]
    fn modulation_is_shared_across_z() {
        let mut next = lcg(3);
        let (z, plane) = (4, 6);
        let vol_data: Vec<f64> = (0..z * plane).map(|_| next()).collect();
        let vol = Tensor::constant(&[1, 1, z, 2, 3], vol_data.clone());
        let a_data: Vec<f64> = (0..plane).map(|_| next()).collect();
        let b_data: Vec<f64> = (0..plane).map(|_| next()).collect();
        let alpha = Tensor::constant(&[1, 1, 2, 3], a_data.clone());
        let beta = Tensor::constant(&[1, 1, 2, 3], b_data);
        let out = vft_apply(&vol, &alpha, &beta).unwrap().to_vec();
        // out(z1) - out(z2) = alpha * (vol(z1) - vol(z2))
        for p in 0..plane {
            let lhs = out[plane + p] - out[3 * plane + p];
            let rhs = a_data[p] * (vol_data[plane + p] - vol_data[3 * plane + p]);
            assert!((lhs - rhs).abs() < 1e-12);
        }

        // Permuting z-slices commutes with the modulation.
        let perm = [2usize, 0, 3, 1];
        let permuted: Vec<f64> = perm
            .iter()
            .flat_map(|&zi| vol_data[zi * plane..(zi + 1) * plane].to_vec())
            .collect();
        let out_p = vft_apply(&Tensor::constant(&[1, 1, z, 2, 3], permuted), &alpha, &beta)
            .unwrap()
            .to_vec();
        for (k, &zi) in perm.iter().enumerate() {
            assert_eq!(out_p[k * plane..(k + 1) * plane], out[zi * plane..(zi + 1) * plane]);
        }
    }

    #[test]
    fn modulation_gradients_match_finite_differences() {
        let mut next = lcg(7);
        let vol: Vec<f64> = (0..2 * 3 * 2 * 2).map(|_| next()).collect();
        let a: Vec<f64> = (0..2 * 2 * 2).map(|_| next()).collect();
        let b: Vec<f64> = (0..2 * 2 * 2).map(|_| next()).collect();
        GradCheck::default()
            .run(
                &[
                    (vec![1, 2, 3, 2, 2], vol),
                    (vec![1, 2, 2, 2], a),
                    (vec![1, 2, 2, 2], b),
                ],
                &|l| vft_apply(&l[0], &l[1], &l[2]).unwrap().sum(),
            )
            .unwrap();
    }

    #[test]
    fn empty_volume_projects_to_background_depth() {
        let vol = Tensor::<f64>::zeros(&[1, 1, 8, 3, 4]);
        let d = project_depth(&vol).unwrap();
        assert_eq!(d.shape(), vec![1, 1, 3, 4]);
        assert!(d.to_vec().iter().all(|v| *v == 16.0));
    }

    #[test]
    fn single_voxel_depth_and_silhouette() {
        let mut vol = vec![0.0f64; 8 * 3 * 4];
        vol[(5 * 3 + 1) * 4 + 2] = 1.0; // (x=2, y=1, z=5)
        let vol = Tensor::constant(&[1, 1, 8, 3, 4], vol);
        let d = project_depth(&vol).unwrap();
        assert_eq!(d.to_vec()[1 * 4 + 2], 5.0);
        assert_eq!(d.to_vec()[0], 16.0);
        let s = project_silhouette(&vol, SilhouetteAxis::Front).unwrap();
        let sd = s.to_vec();
        assert_eq!(sd.iter().filter(|v| **v != 0.0).count(), 1);
        assert_eq!(sd[1 * 4 + 2], 1.0);
    }

    /// Direct reading of the definition: scan rays for the first occupied
    /// voxel, background M when the ray is empty.
    fn depth_scan_oracle(vol: &[f64], z: usize, y: usize, x: usize) -> Vec<f64> {
        let m = 2.0 * z as f64;
        let mut out = vec![m; y * x];
        for p in 0..y * x {
            for zi in 0..z {
                if vol[zi * y * x + p] == 1.0 {
                    out[p] = zi as f64;
                    break;
                }
            }
        }
        out
    }

    #[test]
    fn min_transform_depth_equals_first_occupied_scan() {
        let mut next = lcg(13);
        for _ in 0..20 {
            let vol: Vec<f64> =
                (0..8 * 12 * 8).map(|_| if next() > 0.4 { 1.0 } else { 0.0 }).collect();
            let t = Tensor::constant(&[1, 1, 8, 12, 8], vol.clone());
            let d = project_depth(&t).unwrap().to_vec();
            assert_eq!(d, depth_scan_oracle(&vol, 8, 12, 8));
        }
    }

    #[test]
    fn depth_gradient_routes_to_argmin_with_ties_to_smallest_z() {
        // v(2)=0.5 and v(5)=7/11 both give transformed depth 9 (M=16).
        let mut vol = vec![0.0f64; 8];
        vol[2] = 0.5;
        vol[5] = 7.0 / 11.0;
        let t = Tensor::param(&[1, 1, 8, 1, 1], vol);
        let d = project_depth(&t).unwrap();
        assert_eq!(d.to_vec()[0], 9.0);
        d.sum().backward().unwrap();
        let g = t.grad().unwrap();
        assert_eq!(g[2], 2.0 - 16.0);
        assert_eq!(g[5], 0.0);
    }

    #[test]
    fn depth_gradient_matches_finite_differences_off_ties() {
        let mut next = lcg(17);
        let vol: Vec<f64> = (0..6 * 3 * 3).map(|_| next() * 0.4 + 0.5).collect();
        GradCheck::default()
            .run(&[(vec![1, 1, 6, 3, 3], vol)], &|l| {
                project_depth(&l[0]).unwrap().sum()
            })
            .unwrap();
    }

    #[test]
    fn silhouette_matches_per_ray_max_oracle() {
        let mut next = lcg(19);
        let vol: Vec<f64> = (0..5 * 4 * 3).map(|_| next() * 0.5 + 0.5).collect();
        let t = Tensor::constant(&[1, 1, 5, 4, 3], vol.clone());
        let front = project_silhouette(&t, SilhouetteAxis::Front).unwrap();
        assert_eq!(front.shape(), vec![1, 1, 4, 3]);
        for y in 0..4 {
            for x in 0..3 {
                let want =
                    (0..5).map(|z| vol[(z * 4 + y) * 3 + x]).fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(front.to_vec()[y * 3 + x], want);
            }
        }
        let side = project_silhouette(&t, SilhouetteAxis::Side).unwrap();
        assert_eq!(side.shape(), vec![1, 1, 4, 5]);
        for y in 0..4 {
            for z in 0..5 {
                let want =
                    (0..3).map(|x| vol[(z * 4 + y) * 3 + x]).fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(side.to_vec()[y * 5 + z], want);
            }
        }
    }

    #[test]
    fn silhouette_gradient_ties_go_to_smallest_index() {
        let vol = Tensor::param(&[1, 1, 4, 1, 1], vec![0.3, 0.7, 0.7, 0.1]);
        let s = project_silhouette(&vol, SilhouetteAxis::Front).unwrap();
        s.sum().backward().unwrap();
        assert_eq!(vol.grad().unwrap(), vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn silhouette_gradient_matches_finite_differences() {
        let mut next = lcg(23);
        let vol: Vec<f64> = (0..5 * 3 * 3).map(|_| next()).collect();
        GradCheck::default()
            .run(&[(vec![1, 1, 5, 3, 3], vol)], &|l| {
                project_silhouette(&l[0], SilhouetteAxis::Side).unwrap().sum()
            })
            .unwrap();
    }

    #[test]
    fn depth_and_silhouette_agree_on_binary_volumes() {
        let mut next = lcg(29);
        for _ in 0..10 {
            let vol: Vec<f64> =
                (0..6 * 5 * 4).map(|_| if next() > 0.3 { 1.0 } else { 0.0 }).collect();
            let t = Tensor::constant(&[1, 1, 6, 5, 4], vol);
            let d = project_depth(&t).unwrap().to_vec();
            let s = project_silhouette(&t, SilhouetteAxis::Front).unwrap().to_vec();
            for (dv, sv) in d.iter().zip(&s) {
                assert_eq!(*dv < 12.0, *sv == 1.0);
            }
        }
    }

    #[test]
    fn vertex_map_carries_pixel_coordinates_and_depth() {
        let d = Tensor::<f64>::constant(&[1, 1, 2, 8], vec![3.5; 16]);
        let mv = depth_to_vertex(&d, 1.0).unwrap();
        let md = mv.to_vec();
        // x-channel at column 7 is 7; y-channel row 1 is 1; z is the depth.
        assert_eq!(md[7], 7.0);
        assert_eq!(md[16 + 8 + 3], 1.0);
        assert!(md[32..48].iter().all(|v| *v == 3.5));
        // Half-unit pixels on a 2x raster.
        let mv2 = depth_to_vertex(&d, 0.5).unwrap();
        assert_eq!(mv2.to_vec()[7], 3.5);
    }

    #[test]
    fn flat_plane_yields_downward_normals() {
        // Interior pixels only: mirrored padding turns the coordinate ramps
        // into tents at the image border, so border derivatives vanish.
        let d = Tensor::<f64>::constant(&[1, 1, 6, 6], vec![4.0; 36]);
        let n = normal_from_depth(&d, 1.0, 16.0).unwrap().to_vec();
        for row in 1..5 {
            for col in 1..5 {
                let p = row * 6 + col;
                assert!((n[p] - 0.0).abs() < 1e-12);
                assert!((n[36 + p] - 0.0).abs() < 1e-12);
                assert!((n[72 + p] - -1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn depth_ramp_normals_tilt_by_the_ramp_angle() {
        let theta = 0.4f64;
        let mut d = vec![0.0; 8 * 8];
        for row in 0..8 {
            for col in 0..8 {
                d[row * 8 + col] = 2.0 + col as f64 * theta.tan();
            }
        }
        let n = normal_from_depth(&Tensor::constant(&[1, 1, 8, 8], d), 1.0, 16.0)
            .unwrap()
            .to_vec();
        for row in 2..6 {
            for col in 2..6 {
                let p = row * 8 + col;
                assert!((n[p] - theta.sin()).abs() < 1e-9, "nx {}", n[p]);
                assert!(n[64 + p].abs() < 1e-9);
                assert!((n[128 + p] - -theta.cos()).abs() < 1e-9, "nz {}", n[128 + p]);
            }
        }
    }

    #[test]
    fn background_touching_pixels_emit_zero_normals() {
        let m = 16.0;
        let mut d = vec![m; 8 * 8];
        for row in 0..8 {
            for col in 0..5 {
                d[row * 8 + col] = 3.0 + 0.1 * row as f64;
            }
        }
        let n = vertex_to_normal(
            &depth_to_vertex(&Tensor::<f64>::constant(&[1, 1, 8, 8], d), 1.0).unwrap(),
            m,
        )
        .unwrap()
        .to_vec();
        for row in 0..8 {
            // Column 4 is adjacent to background column 5; 5..8 are background.
            for col in 4..8 {
                let p = row * 8 + col;
                assert_eq!([n[p], n[64 + p], n[128 + p]], [0.0, 0.0, 0.0]);
            }
        }
        // Interior foreground (off the image border, clear of the mask)
        // keeps unit normals facing the camera.
        for row in 1..7 {
            for col in 1..4 {
                let p = row * 8 + col;
                let len = (n[p] * n[p] + n[64 + p] * n[64 + p] + n[128 + p] * n[128 + p]).sqrt();
                assert!((len - 1.0).abs() < 1e-9);
                assert!(n[128 + p] < 0.0);
            }
        }
    }

    #[test]
    fn degenerate_vertex_map_yields_zeros_without_nan() {
        let mv = Tensor::<f64>::zeros(&[1, 3, 4, 4]);
        let n = vertex_to_normal(&mv, 16.0).unwrap().to_vec();
        assert!(n.iter().all(|v| *v == 0.0 && v.is_finite()));
    }

    #[test]
    fn normal_chain_gradient_matches_finite_differences() {
        let mut next = lcg(31);
        // Smooth random depths well away from the background cutoff and
        // flip boundaries so the gates are stable under FD probes.
        let d: Vec<f64> = (0..5 * 5)
            .map(|i| 3.0 + 0.3 * ((i % 5) as f64 * 0.7).sin() + 0.05 * next())
            .collect();
        GradCheck::default()
            .run(&[(vec![1, 1, 5, 5], d)], &|l| {
                normal_from_depth(&l[0], 1.0, 16.0).unwrap().sum()
            })
            .unwrap();
    }

    #[test]
    fn upsampling_doubles_dims_and_hits_midpoints() {
        let t = Tensor::<f64>::constant(&[1, 1, 1, 2], vec![0.0, 1.0]);
        let up = upsample2x(&t).unwrap();
        assert_eq!(up.shape(), vec![1, 1, 2, 4]);
        assert_eq!(up.to_vec()[..4], [0.0, 0.5, 1.0, 1.0]);

        let c = Tensor::<f64>::full(&[2, 3, 4, 5], 0.37);
        let upc = upsample2x(&c).unwrap();
        assert_eq!(upc.shape(), vec![2, 3, 8, 10]);
        assert!(upc.to_vec().iter().all(|v| (*v - 0.37).abs() < 1e-15));
    }

    #[test]
    fn upsampling_gradient_matches_finite_differences() {
        let mut next = lcg(37);
        let t: Vec<f64> = (0..2 * 3 * 4).map(|_| next()).collect();
        GradCheck::default()
            .run(&[(vec![1, 2, 3, 4], t)], &|l| upsample2x(&l[0]).unwrap().sum())
            .unwrap();
    }

    #[test]
    fn z_broadcast_replicates_and_sums_gradient() {
        let m = Tensor::param(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let v = broadcast_z(&m, 3).unwrap();
        assert_eq!(v.shape(), vec![1, 1, 3, 2, 2]);
        let vd = v.to_vec();
        for zi in 0..3 {
            assert_eq!(vd[zi * 4..(zi + 1) * 4], [1.0, 2.0, 3.0, 4.0]);
        }
        v.sum().backward().unwrap();
        assert_eq!(m.grad().unwrap(), vec![3.0; 4]);
    }
}
