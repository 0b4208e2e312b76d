//! Strided (transposed) convolutions in two and three dimensions.
//!
//! All four operators use cross-correlation indexing with zero padding,
//! square/cubic kernels, and an optional leading batch axis. Forward and
//! backward passes parallelize over disjoint output planes; the reduction for
//! each element stays sequential, so results do not depend on thread count.

use rayon::prelude::*;

use super::{Real, Tensor};
use crate::{Error, Result};

/// Output extent of a strided convolution: floor((n + 2p - k)/s) + 1.
pub fn conv_out_dim(n: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    let padded = n + 2 * p;
    if padded < k || s == 0 || n == 0 {
        None
    } else {
        Some((padded - k) / s + 1)
    }
}

/// Output extent of a transposed convolution: (n - 1)s - 2p + k.
pub fn tconv_out_dim(n: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    if n == 0 || s == 0 {
        return None;
    }
    let grown = (n - 1) * s + k;
    if grown <= 2 * p {
        None
    } else {
        Some(grown - 2 * p)
    }
}

/// Split a rank-r or rank-(r+1) shape into (batch, rest); `rest` has rank r.
fn split_batch(shape: &[usize], spatial_rank: usize, what: &str) -> Result<(usize, Vec<usize>, bool)> {
    if shape.len() == spatial_rank + 1 {
        Ok((1, shape.to_vec(), false))
    } else if shape.len() == spatial_rank + 2 {
        Ok((shape[0], shape[1..].to_vec(), true))
    } else {
        Err(Error::Shape(format!(
            "{what}: expected rank {} or {}, got {:?}",
            spatial_rank + 1,
            spatial_rank + 2,
            shape
        )))
    }
}

fn check_bias<S: Real>(b: Option<&Tensor<S>>, co: usize, what: &str) -> Result<()> {
    if let Some(b) = b {
        if b.shape() != [co] {
            return Err(Error::Shape(format!(
                "{what}: bias shape {:?}, expected [{co}]",
                b.shape()
            )));
        }
    }
    Ok(())
}

/// 2-D convolution. `x` is `[C_in, H, W]` or `[N, C_in, H, W]`, `w` is
/// `[C_out, C_in, k, k]`, bias `[C_out]`.
pub fn conv2d<S: Real>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: Option<&Tensor<S>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<S>> {
    let (n, xs, batched) = split_batch(&x.shape(), 2, "conv2d")?;
    let (ci, h, wi) = (xs[0], xs[1], xs[2]);
    let ws = w.shape();
    if ws.len() != 4 || ws[2] != ws[3] {
        return Err(Error::Shape(format!("conv2d: weight shape {ws:?}, expected [Co, Ci, k, k]")));
    }
    let (co, k) = (ws[0], ws[2]);
    if ws[1] != ci {
        return Err(Error::Shape(format!("conv2d: input has {ci} channels, weight expects {}", ws[1])));
    }
    check_bias(b, co, "conv2d")?;
    let oh = conv_out_dim(h, k, stride, pad)
        .ok_or_else(|| Error::Shape(format!("conv2d: height {h} too small for k={k} s={stride} p={pad}")))?;
    let ow = conv_out_dim(wi, k, stride, pad)
        .ok_or_else(|| Error::Shape(format!("conv2d: width {wi} too small for k={k} s={stride} p={pad}")))?;

    let mut out = vec![S::zero(); n * co * oh * ow];
    {
        let xd_guard = x.data();
        let xd = &*xd_guard;
        let wd_guard = w.data();
        let wd = &*wd_guard;
        let bd: Option<Vec<S>> = b.map(|t| t.to_vec());
        out.par_chunks_mut(oh * ow).enumerate().for_each(|(plane, chunk)| {
            let (ni, coi) = (plane / co, plane % co);
            let bias = bd.as_ref().map_or(S::zero(), |v| v[coi]);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias;
                    for cii in 0..ci {
                        let xbase = ((ni * ci + cii) * h) * wi;
                        let wbase = ((coi * ci + cii) * k) * k;
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= wi as isize {
                                    continue;
                                }
                                acc += xd[xbase + iy as usize * wi + ix as usize]
                                    * wd[wbase + ky * k + kx];
                            }
                        }
                    }
                    chunk[oy * ow + ox] = acc;
                }
            }
        });
    }

    let out_shape = if batched { vec![n, co, oh, ow] } else { vec![co, oh, ow] };
    let mut parents = vec![x.clone(), w.clone()];
    if let Some(b) = b {
        parents.push(b.clone());
    }
    let (px, pw, pb) = (x.clone(), w.clone(), b.cloned());
    Ok(Tensor::from_op(
        out_shape,
        out,
        parents,
        Box::new(move |g, _| {
            if px.requires_grad() {
                let wd_guard = pw.data();
                let wd = &*wd_guard;
                let mut dx = vec![S::zero(); n * ci * h * wi];
                dx.par_chunks_mut(h * wi).enumerate().for_each(|(plane, chunk)| {
                    let (ni, cii) = (plane / ci, plane % ci);
                    for iy in 0..h {
                        for ix in 0..wi {
                            let mut acc = S::zero();
                            for coi in 0..co {
                                let gbase = ((ni * co + coi) * oh) * ow;
                                let wbase = ((coi * ci + cii) * k) * k;
                                for ky in 0..k {
                                    let oy_num = iy as isize + pad as isize - ky as isize;
                                    if oy_num < 0 || oy_num % stride as isize != 0 {
                                        continue;
                                    }
                                    let oy = (oy_num / stride as isize) as usize;
                                    if oy >= oh {
                                        continue;
                                    }
                                    for kx in 0..k {
                                        let ox_num = ix as isize + pad as isize - kx as isize;
                                        if ox_num < 0 || ox_num % stride as isize != 0 {
                                            continue;
                                        }
                                        let ox = (ox_num / stride as isize) as usize;
                                        if ox >= ow {
                                            continue;
                                        }
                                        acc += g[gbase + oy * ow + ox] * wd[wbase + ky * k + kx];
                                    }
                                }
                            }
                            chunk[iy * wi + ix] = acc;
                        }
                    }
                });
                drop(wd_guard);
                px.add_grad(|gx| gx.iter_mut().zip(&dx).for_each(|(d, &v)| *d += v));
            }
            if pw.requires_grad() {
                let xd_guard = px.data();
                let xd = &*xd_guard;
                let mut dw = vec![S::zero(); co * ci * k * k];
                dw.par_chunks_mut(ci * k * k).enumerate().for_each(|(coi, chunk)| {
                    for cii in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let mut acc = S::zero();
                                for ni in 0..n {
                                    let gbase = ((ni * co + coi) * oh) * ow;
                                    let xbase = ((ni * ci + cii) * h) * wi;
                                    for oy in 0..oh {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for ox in 0..ow {
                                            let ix = (ox * stride + kx) as isize - pad as isize;
                                            if ix < 0 || ix >= wi as isize {
                                                continue;
                                            }
                                            acc += g[gbase + oy * ow + ox]
                                                * xd[xbase + iy as usize * wi + ix as usize];
                                        }
                                    }
                                }
                                chunk[(cii * k + ky) * k + kx] = acc;
                            }
                        }
                    }
                });
                drop(xd_guard);
                pw.add_grad(|gw| gw.iter_mut().zip(&dw).for_each(|(d, &v)| *d += v));
            }
            if let Some(pb) = &pb {
                if pb.requires_grad() {
                    let mut db = vec![S::zero(); co];
                    for ni in 0..n {
                        for coi in 0..co {
                            let base = ((ni * co + coi) * oh) * ow;
                            let mut acc = S::zero();
                            for i in 0..oh * ow {
                                acc += g[base + i];
                            }
                            db[coi] += acc;
                        }
                    }
                    pb.add_grad(|gb| gb.iter_mut().zip(&db).for_each(|(d, &v)| *d += v));
                }
            }
        }),
    ))
}

/// 3-D convolution. `x` is `[C_in, D, H, W]` or `[N, C_in, D, H, W]`, `w` is
/// `[C_out, C_in, k, k, k]`, bias `[C_out]`.
pub fn conv3d<S: Real>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: Option<&Tensor<S>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<S>> {
    let (n, xs, batched) = split_batch(&x.shape(), 3, "conv3d")?;
    let (ci, d, h, wi) = (xs[0], xs[1], xs[2], xs[3]);
    let ws = w.shape();
    if ws.len() != 5 || ws[2] != ws[3] || ws[3] != ws[4] {
        return Err(Error::Shape(format!("conv3d: weight shape {ws:?}, expected [Co, Ci, k, k, k]")));
    }
    let (co, k) = (ws[0], ws[2]);
    if ws[1] != ci {
        return Err(Error::Shape(format!("conv3d: input has {ci} channels, weight expects {}", ws[1])));
    }
    check_bias(b, co, "conv3d")?;
    let od = conv_out_dim(d, k, stride, pad)
        .ok_or_else(|| Error::Shape(format!("conv3d: depth {d} too small for k={k} s={stride} p={pad}")))?;
    let oh = conv_out_dim(h, k, stride, pad)
        .ok_or_else(|| Error::Shape(format!("conv3d: height {h} too small for k={k} s={stride} p={pad}")))?;
    let ow = conv_out_dim(wi, k, stride, pad)
        .ok_or_else(|| Error::Shape(format!("conv3d: width {wi} too small for k={k} s={stride} p={pad}")))?;

    let mut out = vec![S::zero(); n * co * od * oh * ow];
    {
        let xd_guard = x.data();
        let xd = &*xd_guard;
        let wd_guard = w.data();
        let wd = &*wd_guard;
        let bd: Option<Vec<S>> = b.map(|t| t.to_vec());
        out.par_chunks_mut(od * oh * ow).enumerate().for_each(|(plane, chunk)| {
            let (ni, coi) = (plane / co, plane % co);
            let bias = bd.as_ref().map_or(S::zero(), |v| v[coi]);
            for oz in 0..od {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias;
                        for cii in 0..ci {
                            let xbase = ((ni * ci + cii) * d) * h * wi;
                            let wbase = ((coi * ci + cii) * k) * k * k;
                            for kz in 0..k {
                                let iz = (oz * stride + kz) as isize - pad as isize;
                                if iz < 0 || iz >= d as isize {
                                    continue;
                                }
                                for ky in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..k {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix < 0 || ix >= wi as isize {
                                            continue;
                                        }
                                        acc += xd[xbase
                                            + (iz as usize * h + iy as usize) * wi
                                            + ix as usize]
                                            * wd[wbase + (kz * k + ky) * k + kx];
                                    }
                                }
                            }
                        }
                        chunk[(oz * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        });
    }

    let out_shape = if batched { vec![n, co, od, oh, ow] } else { vec![co, od, oh, ow] };
    let mut parents = vec![x.clone(), w.clone()];
    if let Some(b) = b {
        parents.push(b.clone());
    }
    let (px, pw, pb) = (x.clone(), w.clone(), b.cloned());
    Ok(Tensor::from_op(
        out_shape,
        out,
        parents,
        Box::new(move |g, _| {
            if px.requires_grad() {
                let wd_guard = pw.data();
                let wd = &*wd_guard;
                let mut dx = vec![S::zero(); n * ci * d * h * wi];
                dx.par_chunks_mut(d * h * wi).enumerate().for_each(|(plane, chunk)| {
                    let (ni, cii) = (plane / ci, plane % ci);
                    for iz in 0..d {
                        for iy in 0..h {
                            for ix in 0..wi {
                                let mut acc = S::zero();
                                for coi in 0..co {
                                    let gbase = ((ni * co + coi) * od) * oh * ow;
                                    let wbase = ((coi * ci + cii) * k) * k * k;
                                    for kz in 0..k {
                                        let oz_num = iz as isize + pad as isize - kz as isize;
                                        if oz_num < 0 || oz_num % stride as isize != 0 {
                                            continue;
                                        }
                                        let oz = (oz_num / stride as isize) as usize;
                                        if oz >= od {
                                            continue;
                                        }
                                        for ky in 0..k {
                                            let oy_num = iy as isize + pad as isize - ky as isize;
                                            if oy_num < 0 || oy_num % stride as isize != 0 {
                                                continue;
                                            }
                                            let oy = (oy_num / stride as isize) as usize;
                                            if oy >= oh {
                                                continue;
                                            }
                                            for kx in 0..k {
                                                let ox_num = ix as isize + pad as isize - kx as isize;
                                                if ox_num < 0 || ox_num % stride as isize != 0 {
                                                    continue;
                                                }
                                                let ox = (ox_num / stride as isize) as usize;
                                                if ox >= ow {
                                                    continue;
                                                }
                                                acc += g[gbase + (oz * oh + oy) * ow + ox]
                                                    * wd[wbase + (kz * k + ky) * k + kx];
                                            }
                                        }
                                    }
                                }
                                chunk[(iz * h + iy) * wi + ix] = acc;
                            }
                        }
                    }
                });
                drop(wd_guard);
                px.add_grad(|gx| gx.iter_mut().zip(&dx).for_each(|(dst, &v)| *dst += v));
            }
            if pw.requires_grad() {
                let xd_guard = px.data();
                let xd = &*xd_guard;
                let mut dw = vec![S::zero(); co * ci * k * k * k];
                dw.par_chunks_mut(ci * k * k * k).enumerate().for_each(|(coi, chunk)| {
                    for cii in 0..ci {
                        for kz in 0..k {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let mut acc = S::zero();
                                    for ni in 0..n {
                                        let gbase = ((ni * co + coi) * od) * oh * ow;
                                        let xbase = ((ni * ci + cii) * d) * h * wi;
                                        for oz in 0..od {
                                            let iz = (oz * stride + kz) as isize - pad as isize;
                                            if iz < 0 || iz >= d as isize {
                                                continue;
                                            }
                                            for oy in 0..oh {
                                                let iy = (oy * stride + ky) as isize - pad as isize;
                                                if iy < 0 || iy >= h as isize {
                                                    continue;
                                                }
                                                for ox in 0..ow {
                                                    let ix =
                                                        (ox * stride + kx) as isize - pad as isize;
                                                    if ix < 0 || ix >= wi as isize {
                                                        continue;
                                                    }
                                                    acc += g[gbase + (oz * oh + oy) * ow + ox]
                                                        * xd[xbase
                                                            + (iz as usize * h + iy as usize) * wi
                                                            + ix as usize];
                                                }
                                            }
                                        }
                                    }
                                    chunk[((cii * k + kz) * k + ky) * k + kx] = acc;
                                }
                            }
                        }
                    }
                });
                drop(xd_guard);
                pw.add_grad(|gw| gw.iter_mut().zip(&dw).for_each(|(dst, &v)| *dst += v));
            }
            if let Some(pb) = &pb {
                if pb.requires_grad() {
                    let mut db = vec![S::zero(); co];
                    let vol = od * oh * ow;
                    for ni in 0..n {
                        for coi in 0..co {
                            let base = (ni * co + coi) * vol;
                            let mut acc = S::zero();
                            for i in 0..vol {
                                acc += g[base + i];
                            }
                            db[coi] += acc;
                        }
                    }
                    pb.add_grad(|gb| gb.iter_mut().zip(&db).for_each(|(dst, &v)| *dst += v));
                }
            }
        }),
    ))
}

/// Transposed 2-D convolution. `x` is `[C_in, H, W]` or `[N, C_in, H, W]`,
/// `w` is `[C_in, C_out, k, k]`, bias `[C_out]`. The forward map is the
/// adjoint of `conv2d` with the same stride and padding.
pub fn tconv2d<S: Real>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: Option<&Tensor<S>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<S>> {
    let (n, xs, batched) = split_batch(&x.shape(), 2, "tconv2d")?;
    let (ci, h, wi) = (xs[0], xs[1], xs[2]);
    let ws = w.shape();
    if ws.len() != 4 || ws[2] != ws[3] {
        return Err(Error::Shape(format!("tconv2d: weight shape {ws:?}, expected [Ci, Co, k, k]")));
    }
    let (co, k) = (ws[1], ws[2]);
    if ws[0] != ci {
        return Err(Error::Shape(format!("tconv2d: input has {ci} channels, weight expects {}", ws[0])));
    }
    check_bias(b, co, "tconv2d")?;
    let oh = tconv_out_dim(h, k, stride, pad)
        .ok_or_else(|| Error::Shape(format!("tconv2d: height {h} invalid for k={k} s={stride} p={pad}")))?;
    let ow = tconv_out_dim(wi, k, stride, pad)
        .ok_or_else(|| Error::Shape(format!("tconv2d: width {wi} invalid for k={k} s={stride} p={pad}")))?;

    let mut out = vec![S::zero(); n * co * oh * ow];
    {
        let xd_guard = x.data();
        let xd = &*xd_guard;
        let wd_guard = w.data();
        let wd = &*wd_guard;
        let bd: Option<Vec<S>> = b.map(|t| t.to_vec());
        out.par_chunks_mut(oh * ow).enumerate().for_each(|(plane, chunk)| {
            let (ni, coi) = (plane / co, plane % co);
            let bias = bd.as_ref().map_or(S::zero(), |v| v[coi]);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias;
                    for ky in 0..k {
                        let iy_num = oy as isize + pad as isize - ky as isize;
                        if iy_num < 0 || iy_num % stride as isize != 0 {
                            continue;
                        }
                        let iy = (iy_num / stride as isize) as usize;
                        if iy >= h {
                            continue;
                        }
                        for kx in 0..k {
                            let ix_num = ox as isize + pad as isize - kx as isize;
                            if ix_num < 0 || ix_num % stride as isize != 0 {
                                continue;
                            }
                            let ix = (ix_num / stride as isize) as usize;
                            if ix >= wi {
                                continue;
                            }
                            for cii in 0..ci {
                                acc += xd[((ni * ci + cii) * h + iy) * wi + ix]
                                    * wd[((cii * co + coi) * k + ky) * k + kx];
                            }
                        }
                    }
                    chunk[oy * ow + ox] = acc;
                }
            }
        });
    }

    let out_shape = if batched { vec![n, co, oh, ow] } else { vec![co, oh, ow] };
    let mut parents = vec![x.clone(), w.clone()];
    if let Some(b) = b {
        parents.push(b.clone());
    }
    let (px, pw, pb) = (x.clone(), w.clone(), b.cloned());
    Ok(Tensor::from_op(
        out_shape,
        out,
        parents,
        Box::new(move |g, _| {
            if px.requires_grad() {
                // The adjoint of a transposed convolution is the forward
                // strided convolution of the output gradient.
                let wd_guard = pw.data();
                let wd = &*wd_guard;
                let mut dx = vec![S::zero(); n * ci * h * wi];
                dx.par_chunks_mut(h * wi).enumerate().for_each(|(plane, chunk)| {
                    let (ni, cii) = (plane / ci, plane % ci);
                    for iy in 0..h {
                        for ix in 0..wi {
                            let mut acc = S::zero();
                            for ky in 0..k {
                                let oy = iy as isize * stride as isize + ky as isize - pad as isize;
                                if oy < 0 || oy >= oh as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ox =
                                        ix as isize * stride as isize + kx as isize - pad as isize;
                                    if ox < 0 || ox >= ow as isize {
                                        continue;
                                    }
                                    for coi in 0..co {
                                        acc += g[((ni * co + coi) * oh + oy as usize) * ow
                                            + ox as usize]
                                            * wd[((cii * co + coi) * k + ky) * k + kx];
                                    }
                                }
                            }
                            chunk[iy * wi + ix] = acc;
                        }
                    }
                });
                drop(wd_guard);
                px.add_grad(|gx| gx.iter_mut().zip(&dx).for_each(|(dst, &v)| *dst += v));
            }
            if pw.requires_grad() {
                let xd_guard = px.data();
                let xd = &*xd_guard;
                let mut dw = vec![S::zero(); ci * co * k * k];
                dw.par_chunks_mut(co * k * k).enumerate().for_each(|(cii, chunk)| {
                    for coi in 0..co {
                        for ky in 0..k {
                            for kx in 0..k {
                                let mut acc = S::zero();
                                for ni in 0..n {
                                    for iy in 0..h {
                                        let oy = iy as isize * stride as isize + ky as isize
                                            - pad as isize;
                                        if oy < 0 || oy >= oh as isize {
                                            continue;
                                        }
                                        for ix in 0..wi {
                                            let ox = ix as isize * stride as isize + kx as isize
                                                - pad as isize;
                                            if ox < 0 || ox >= ow as isize {
                                                continue;
                                            }
                                            acc += xd[((ni * ci + cii) * h + iy) * wi + ix]
                                                * g[((ni * co + coi) * oh + oy as usize) * ow
                                                    + ox as usize];
                                        }
                                    }
                                }
                                chunk[(coi * k + ky) * k + kx] = acc;
                            }
                        }
                    }
                });
                drop(xd_guard);
                pw.add_grad(|gw| gw.iter_mut().zip(&dw).for_each(|(dst, &v)| *dst += v));
            }
            if let Some(pb) = &pb {
                if pb.requires_grad() {
                    let mut db = vec![S::zero(); co];
                    for ni in 0..n {
                        for coi in 0..co {
                            let base = ((ni * co + coi) * oh) * ow;
                            let mut acc = S::zero();
                            for i in 0..oh * ow {
                                acc += g[base + i];
                            }
                            db[coi] += acc;
                        }
                    }
                    pb.add_grad(|gb| gb.iter_mut().zip(&db).for_each(|(dst, &v)| *dst += v));
                }
            }
        }),
    ))
}

/// Transposed 3-D convolution. `x` is `[C_in, D, H, W]` or `[N, C_in, D, H, W]`,
/// `w` is `[C_in, C_out, k, k, k]`, bias `[C_out]`.
pub fn tconv3d<S: Real>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: Option<&Tensor<S>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<S>> {
    let (n, xs, batched) = split_batch(&x.shape(), 3, "tconv3d")?;
    let (ci, d, h, wi) = (xs[0], xs[1], xs[2], xs[3]);
    let ws = w.shape();
    if ws.len() != 5 || ws[2] != ws[3] || ws[3] != ws[4] {
        return Err(Error::Shape(format!("tconv3d: weight shape {ws:?}, expected [Ci, Co, k, k, k]")));
    }
    let (co, k) = (ws[1], ws[2]);
    if ws[0] != ci {
        return Err(Error::Shape(format!("tconv3d: input has {ci} channels, weight expects {}", ws[0])));
    }
    check_bias(b, co, "tconv3d")?;
    let od = tconv_out_dim(d, k, stride, pad)
        .ok_or_else(|| Error::Shape(format!("tconv3d: depth {d} invalid for k={k} s={stride} p={pad}")))?;
    let oh = tconv_out_dim(h, k, stride, pad)
        .ok_or_else(|| Error::Shape(format!("tconv3d: height {h} invalid for k={k} s={stride} p={pad}")))?;
    let ow = tconv_out_dim(wi, k, stride, pad)
        .ok_or_else(|| Error::Shape(format!("tconv3d: width {wi} invalid for k={k} s={stride} p={pad}")))?;

    let mut out = vec![S::zero(); n * co * od * oh * ow];
    {
        let xd_guard = x.data();
        let xd = &*xd_guard;
        let wd_guard = w.data();
        let wd = &*wd_guard;
        let bd: Option<Vec<S>> = b.map(|t| t.to_vec());
        out.par_chunks_mut(od * oh * ow).enumerate().for_each(|(plane, chunk)| {
            let (ni, coi) = (plane / co, plane % co);
            let bias = bd.as_ref().map_or(S::zero(), |v| v[coi]);
            for oz in 0..od {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias;
                        for kz in 0..k {
                            let iz_num = oz as isize + pad as isize - kz as isize;
                            if iz_num < 0 || iz_num % stride as isize != 0 {
                                continue;
                            }
                            let iz = (iz_num / stride as isize) as usize;
                            if iz >= d {
                                continue;
                            }
                            for ky in 0..k {
                                let iy_num = oy as isize + pad as isize - ky as isize;
                                if iy_num < 0 || iy_num % stride as isize != 0 {
                                    continue;
                                }
                                let iy = (iy_num / stride as isize) as usize;
                                if iy >= h {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix_num = ox as isize + pad as isize - kx as isize;
                                    if ix_num < 0 || ix_num % stride as isize != 0 {
                                        continue;
                                    }
                                    let ix = (ix_num / stride as isize) as usize;
                                    if ix >= wi {
                                        continue;
                                    }
                                    for cii in 0..ci {
                                        acc += xd[((ni * ci + cii) * d + iz) * h * wi + iy * wi + ix]
                                            * wd[((cii * co + coi) * k + kz) * k * k + ky * k + kx];
                                    }
                                }
                            }
                        }
                        chunk[(oz * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        });
    }

    let out_shape = if batched { vec![n, co, od, oh, ow] } else { vec![co, od, oh, ow] };
    let mut parents = vec![x.clone(), w.clone()];
    if let Some(b) = b {
        parents.push(b.clone());
    }
    let (px, pw, pb) = (x.clone(), w.clone(), b.cloned());
    Ok(Tensor::from_op(
        out_shape,
        out,
        parents,
        Box::new(move |g, _| {
            if px.requires_grad() {
                let wd_guard = pw.data();
                let wd = &*wd_guard;
                let mut dx = vec![S::zero(); n * ci * d * h * wi];
                dx.par_chunks_mut(d * h * wi).enumerate().for_each(|(plane, chunk)| {
                    let (ni, cii) = (plane / ci, plane % ci);
                    for iz in 0..d {
                        for iy in 0..h {
                            for ix in 0..wi {
                                let mut acc = S::zero();
                                for kz in 0..k {
                                    let oz = iz as isize * stride as isize + kz as isize - pad as isize;
                                    if oz < 0 || oz >= od as isize {
                                        continue;
                                    }
                                    for ky in 0..k {
                                        let oy = iy as isize * stride as isize + ky as isize
                                            - pad as isize;
                                        if oy < 0 || oy >= oh as isize {
                                            continue;
                                        }
                                        for kx in 0..k {
                                            let ox = ix as isize * stride as isize + kx as isize
                                                - pad as isize;
                                            if ox < 0 || ox >= ow as isize {
                                                continue;
                                            }
                                            for coi in 0..co {
                                                acc += g[((ni * co + coi) * od + oz as usize)
                                                    * oh
                                                    * ow
                                                    + oy as usize * ow
                                                    + ox as usize]
                                                    * wd[((cii * co + coi) * k + kz) * k * k
                                                        + ky * k
                                                        + kx];
                                            }
                                        }
                                    }
                                }
                                chunk[(iz * h + iy) * wi + ix] = acc;
                            }
                        }
                    }
                });
                drop(wd_guard);
                px.add_grad(|gx| gx.iter_mut().zip(&dx).for_each(|(dst, &v)| *dst += v));
            }
            if pw.requires_grad() {
                let xd_guard = px.data();
                let xd = &*xd_guard;
                let mut dw = vec![S::zero(); ci * co * k * k * k];
                dw.par_chunks_mut(co * k * k * k).enumerate().for_each(|(cii, chunk)| {
                    for coi in 0..co {
                        for kz in 0..k {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let mut acc = S::zero();
                                    for ni in 0..n {
                                        for iz in 0..d {
                                            let oz = iz as isize * stride as isize + kz as isize
                                                - pad as isize;
                                            if oz < 0 || oz >= od as isize {
                                                continue;
                                            }
                                            for iy in 0..h {
                                                let oy = iy as isize * stride as isize + ky as isize
                                                    - pad as isize;
                                                if oy < 0 || oy >= oh as isize {
                                                    continue;
                                                }
                                                for ix in 0..wi {
                                                    let ox = ix as isize * stride as isize
                                                        + kx as isize
                                                        - pad as isize;
                                                    if ox < 0 || ox >= ow as isize {
                                                        continue;
                                                    }
                                                    acc += xd[((ni * ci + cii) * d + iz) * h * wi
                                                        + iy * wi
                                                        + ix]
                                                        * g[((ni * co + coi) * od + oz as usize)
                                                            * oh
                                                            * ow
                                                            + oy as usize * ow
                                                            + ox as usize];
                                                }
                                            }
                                        }
                                    }
                                    chunk[((coi * k + kz) * k + ky) * k + kx] = acc;
                                }
                            }
                        }
                    }
                });
                drop(xd_guard);
                pw.add_grad(|gw| gw.iter_mut().zip(&dw).for_each(|(dst, &v)| *dst += v));
            }
            if let Some(pb) = &pb {
                if pb.requires_grad() {
                    let mut db = vec![S::zero(); co];
                    let vol = od * oh * ow;
                    for ni in 0..n {
                        for coi in 0..co {
                            let base = (ni * co + coi) * vol;
                            let mut acc = S::zero();
                            for i in 0..vol {
                                acc += g[base + i];
                            }
                            db[coi] += acc;
                        }
                    }
                    pb.add_grad(|gb| gb.iter_mut().zip(&db).for_each(|(dst, &v)| *dst += v));
                }
            }
        }),
    ))
}
