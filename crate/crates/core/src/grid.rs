//! Dense voxel grids and planar maps with a shared raw file container.
//!
//! A volume stores `channels` interleaved f32 values per voxel, laid out
//! z-major, then y, then x, with channels innermost. A map is the planar
//! analog (rows outermost, channels innermost). Both serialize to the same
//! container: magic `DHVG`, version, three extents, channel count, then the
//! values in storage order as little-endian f32.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autodiff::{Real, Tensor};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"DHVG";
const VERSION: u32 = 1;

/// Dense multi-channel volume over an axis-aligned voxel lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    dims: [usize; 3],
    channels: usize,
    data: Vec<f32>,
}

impl VoxelGrid {
    pub fn new(dims: [usize; 3], channels: usize) -> Self {
        let len = dims[0] * dims[1] * dims[2] * channels;
        Self { dims, channels, data: vec![0.0; len] }
    }

    pub fn from_data(dims: [usize; 3], channels: usize, data: Vec<f32>) -> Result<Self> {
        let want = dims[0] * dims[1] * dims[2] * channels;
        if data.len() != want {
            return Err(Error::Shape(format!(
                "volume {}x{}x{}x{} needs {} values, got {}",
                dims[0],
                dims[1],
                dims[2],
                channels,
                want,
                data.len()
            )));
        }
        Ok(Self { dims, channels, data })
    }

    /// Extents as (x, y, z).
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize, c: usize) -> usize {
        ((z * self.dims[1] + y) * self.dims[0] + x) * self.channels + c
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize, c: usize) -> f32 {
        self.data[self.index(x, y, z, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, c: usize, v: f32) {
        let i = self.index(x, y, z, c);
        self.data[i] = v;
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write_container(
            &mut w,
            [self.dims[0] as u32, self.dims[1] as u32, self.dims[2] as u32],
            self.channels as u32,
            &self.data,
        )
    }

    pub fn read(path: &Path) -> Result<Self> {
        let (dims, channels, data) = read_container(path)?;
        Self::from_data(
            [dims[0] as usize, dims[1] as usize, dims[2] as usize],
            channels as usize,
            data,
        )
    }

    /// Tensor view shaped `[1, C, Z, Y, X]` (channels outermost after batch).
    pub fn to_tensor<S: Real>(&self) -> Tensor<S> {
        let [x, y, z] = self.dims;
        let c = self.channels;
        let mut out = vec![S::zero(); self.data.len()];
        for zi in 0..z {
            for yi in 0..y {
                for xi in 0..x {
                    let src = ((zi * y + yi) * x + xi) * c;
                    for ci in 0..c {
                        out[((ci * z + zi) * y + yi) * x + xi] =
                            S::from_f64(self.data[src + ci] as f64);
                    }
                }
            }
        }
        Tensor::constant(&[1, c, z, y, x], out)
    }

    /// Inverse of [`to_tensor`]: accepts `[C, Z, Y, X]` or `[1, C, Z, Y, X]`.
    pub fn from_tensor<S: Real>(t: &Tensor<S>) -> Result<Self> {
        let shape = t.shape();
        let dims4: &[usize] = match shape.len() {
            4 => &shape,
            5 if shape[0] == 1 => &shape[1..],
            _ => {
                return Err(Error::Shape(format!(
                    "expected [C,Z,Y,X] or [1,C,Z,Y,X] tensor, got {shape:?}"
                )))
            }
        };
        let (c, z, y, x) = (dims4[0], dims4[1], dims4[2], dims4[3]);
        let src = t.data();
        let mut grid = VoxelGrid::new([x, y, z], c);
        for zi in 0..z {
            for yi in 0..y {
                for xi in 0..x {
                    let dst = ((zi * y + yi) * x + xi) * c;
                    for ci in 0..c {
                        grid.data[dst + ci] =
                            src[((ci * z + zi) * y + yi) * x + xi].to_f64() as f32;
                    }
                }
            }
        }
        Ok(grid)
    }

    /// Max projection along z onto the (y, x) plane. Single channel only.
    pub fn silhouette_front(&self) -> Result<PlaneMap> {
        self.require_scalar("front silhouette")?;
        let [x, y, z] = self.dims;
        let mut map = PlaneMap::new(y, x, 1);
        for yi in 0..y {
            for xi in 0..x {
                let mut best = f32::NEG_INFINITY;
                for zi in 0..z {
                    best = best.max(self.at(xi, yi, zi, 0));
                }
                map.set(yi, xi, 0, best);
            }
        }
        Ok(map)
    }

    /// Max projection along x onto the (y, z) plane. Single channel only.
    pub fn silhouette_side(&self) -> Result<PlaneMap> {
        self.require_scalar("side silhouette")?;
        let [x, y, z] = self.dims;
        let mut map = PlaneMap::new(y, z, 1);
        for yi in 0..y {
            for zi in 0..z {
                let mut best = f32::NEG_INFINITY;
                for xi in 0..x {
                    best = best.max(self.at(xi, yi, zi, 0));
                }
                map.set(yi, zi, 0, best);
            }
        }
        Ok(map)
    }

    /// Fraction of voxels with value above `threshold`. Single channel only.
    pub fn occupied_count(&self, threshold: f32) -> Result<usize> {
        self.require_scalar("occupancy count")?;
        Ok(self.data.iter().filter(|v| **v > threshold).count())
    }

    fn require_scalar(&self, what: &str) -> Result<()> {
        if self.channels != 1 {
            return Err(Error::Shape(format!(
                "{what} needs a single-channel volume, got {} channels",
                self.channels
            )));
        }
        Ok(())
    }
}

/// Dense multi-channel image-plane field (depth, normals, silhouettes).
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneMap {
    h: usize,
    w: usize,
    channels: usize,
    data: Vec<f32>,
}

impl PlaneMap {
    pub fn new(h: usize, w: usize, channels: usize) -> Self {
        Self { h, w, channels, data: vec![0.0; h * w * channels] }
    }

    pub fn from_data(h: usize, w: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != h * w * channels {
            return Err(Error::Shape(format!(
                "map {h}x{w}x{channels} needs {} values, got {}",
                h * w * channels,
                data.len()
            )));
        }
        Ok(Self { h, w, channels, data })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize, c: usize) -> f32 {
        self.data[(row * self.w + col) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, c: usize, v: f32) {
        let i = (row * self.w + col) * self.channels + c;
        self.data[i] = v;
    }

    /// Stored in the volume container with extents (H, W, C) and one channel.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write_container(
            &mut w,
            [self.h as u32, self.w as u32, self.channels as u32],
            1,
            &self.data,
        )
    }

    pub fn read(path: &Path) -> Result<Self> {
        let (dims, channels, data) = read_container(path)?;
        if channels != 1 {
            return Err(Error::Format(format!(
                "{}: map container must declare one channel, got {channels}",
                path.display()
            )));
        }
        Self::from_data(dims[0] as usize, dims[1] as usize, dims[2] as usize, data)
    }

    /// Tensor view shaped `[1, C, H, W]`.
    pub fn to_tensor<S: Real>(&self) -> Tensor<S> {
        let (h, w, c) = (self.h, self.w, self.channels);
        let mut out = vec![S::zero(); self.data.len()];
        for yi in 0..h {
            for xi in 0..w {
                let src = (yi * w + xi) * c;
                for ci in 0..c {
                    out[(ci * h + yi) * w + xi] = S::from_f64(self.data[src + ci] as f64);
                }
            }
        }
        Tensor::constant(&[1, c, h, w], out)
    }

    /// Inverse of [`to_tensor`]: accepts `[C, H, W]` or `[1, C, H, W]`.
    pub fn from_tensor<S: Real>(t: &Tensor<S>) -> Result<Self> {
        let shape = t.shape();
        let dims3: &[usize] = match shape.len() {
            3 => &shape,
            4 if shape[0] == 1 => &shape[1..],
            _ => {
                return Err(Error::Shape(format!(
                    "expected [C,H,W] or [1,C,H,W] tensor, got {shape:?}"
                )))
            }
        };
        let (c, h, w) = (dims3[0], dims3[1], dims3[2]);
        let src = t.data();
        let mut map = PlaneMap::new(h, w, c);
        for yi in 0..h {
            for xi in 0..w {
                let dst = (yi * w + xi) * c;
                for ci in 0..c {
                    map.data[dst + ci] = src[(ci * h + yi) * w + xi].to_f64() as f32;
                }
            }
        }
        Ok(map)
    }

    /// 8-bit PNG of the first three channels; values clamped from [0, 1].
    pub fn write_png(&self, path: &Path) -> Result<()> {
        if self.channels < 3 {
            return Err(Error::Shape(format!(
                "PNG export needs at least 3 channels, got {}",
                self.channels
            )));
        }
        let mut img = image::RgbImage::new(self.w as u32, self.h as u32);
        for yi in 0..self.h {
            for xi in 0..self.w {
                let px = [
                    unit_to_u8(self.at(yi, xi, 0)),
                    unit_to_u8(self.at(yi, xi, 1)),
                    unit_to_u8(self.at(yi, xi, 2)),
                ];
                img.put_pixel(xi as u32, yi as u32, image::Rgb(px));
            }
        }
        img.save(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut map = PlaneMap::new(h, w, 3);
        for yi in 0..h {
            for xi in 0..w {
                let px = img.get_pixel(xi as u32, yi as u32);
                for ci in 0..3 {
                    map.set(yi, xi, ci, px.0[ci] as f32 / 255.0);
                }
            }
        }
        Ok(map)
    }
}

fn unit_to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_container<W: Write>(
    w: &mut W,
    dims: [u32; 3],
    channels: u32,
    data: &[f32],
) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for d in dims {
        w.write_all(&d.to_le_bytes())?;
    }
    w.write_all(&channels.to_le_bytes())?;
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_container(path: &Path) -> Result<([u32; 3], u32, Vec<f32>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic {:?}, expected {:?}",
            path.display(),
            magic,
            MAGIC
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let dims = [read_u32(&mut r)?, read_u32(&mut r)?, read_u32(&mut r)?];
    let channels = read_u32(&mut r)?;
    let count = dims[0] as usize * dims[1] as usize * dims[2] as usize * channels as usize;
    let mut raw = vec![0u8; count * 4];
    r.read_exact(&mut raw).map_err(|e| {
        Error::Format(format!("{}: truncated payload ({e})", path.display()))
    })?;
    let mut trailer = [0u8; 1];
    if r.read(&mut trailer)? != 0 {
        return Err(Error::Format(format!(
            "{}: trailing bytes after payload",
            path.display()
        )));
    }
    let data = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok((dims, channels, data))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn storage_order_is_z_major_channels_innermost() {
        let mut g = VoxelGrid::new([4, 3, 2], 2);
        g.set(1, 2, 1, 1, 7.0);
        // ((z*Y + y)*X + x)*C + c = ((1*3 + 2)*4 + 1)*2 + 1
        assert_eq!(g.data()[((1 * 3 + 2) * 4 + 1) * 2 + 1], 7.0);
        assert_eq!(g.at(1, 2, 1, 1), 7.0);
    }

    #[test]
    fn volume_file_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vol.dhvg");
        let mut g = VoxelGrid::new([3, 4, 5], 3);
        for (i, v) in g.data_mut().iter_mut().enumerate() {
            *v = (i as f32).sin();
        }
        g.write(&path).unwrap();
        let back = VoxelGrid::read(&path).unwrap();
        assert_eq!(back, g);
        let bytes1 = std::fs::read(&path).unwrap();
        back.write(&path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), bytes1);
    }

    #[test]
    fn map_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.dhvg");
        let mut m = PlaneMap::new(5, 4, 3);
        for (i, v) in m.data_mut().iter_mut().enumerate() {
            *v = i as f32 * 0.25;
        }
        m.write(&path).unwrap();
        assert_eq!(PlaneMap::read(&path).unwrap(), m);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vol.dhvg");
        let g = VoxelGrid::new([2, 2, 2], 1);
        g.write(&path).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(VoxelGrid::read(&path), Err(Error::Format(_))));

        g.write(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(VoxelGrid::read(&path), Err(Error::Format(_))));
    }

    #[test]
    fn tensor_round_trip_transposes_channels() {
        let mut g = VoxelGrid::new([2, 3, 2], 2);
        for (i, v) in g.data_mut().iter_mut().enumerate() {
            *v = i as f32;
        }
        let t = g.to_tensor::<f64>();
        assert_eq!(t.shape(), vec![1, 2, 2, 3, 2]);
        // Channel 1 at (x=1, y=2, z=0): grid idx ((0*3+2)*2+1)*2+1.
        let td = t.to_vec();
        assert_eq!(
            td[((1 * 2 + 0) * 3 + 2) * 2 + 1],
            g.data()[((0 * 3 + 2) * 2 + 1) * 2 + 1] as f64
        );
        assert_eq!(VoxelGrid::from_tensor(&t).unwrap(), g);
    }

    #[test]
    fn silhouettes_take_max_along_the_ray() {
        let mut g = VoxelGrid::new([3, 2, 4], 1);
        g.set(1, 0, 2, 0, 1.0);
        g.set(2, 1, 0, 0, 0.5);
        let front = g.silhouette_front().unwrap();
        assert_eq!((front.height(), front.width()), (2, 3));
        assert_eq!(front.at(0, 1, 0), 1.0);
        assert_eq!(front.at(1, 2, 0), 0.5);
        assert_eq!(front.at(0, 0, 0), 0.0);
        let side = g.silhouette_side().unwrap();
        assert_eq!((side.height(), side.width()), (2, 4));
        assert_eq!(side.at(0, 2, 0), 1.0);
        assert_eq!(side.at(1, 0, 0), 0.5);
    }

    #[test]
    fn png_round_trip_quantizes_to_8_bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let mut m = PlaneMap::new(2, 2, 3);
        for (i, v) in m.data_mut().iter_mut().enumerate() {
            *v = i as f32 / 11.0;
        }
        m.write_png(&path).unwrap();
        let back = PlaneMap::read_png(&path).unwrap();
        for (a, b) in back.data().iter().zip(m.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
}
