use super::cord::CordLine;
use crate::io::encode_pgm;
use crate::volume::Volume;

/// Curved sagittal reformation along the cord. Row `r` is axial slice
/// `z_min + r`, column `y` is the volume's `y`; the pixel comes from voxel
/// `(x_source[r], y, z_min + r)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SagittalImage {
    pub z_min: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<i16>,
    pub x_source: Vec<usize>,
    /// Cord `y` per row, in voxels.
    pub cord_y: Vec<f64>,
}

impl SagittalImage {
    pub fn at(&self, row: usize, col: usize) -> i16 {
        self.pixels[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[i16] {
        &self.pixels[row * self.cols..(row + 1) * self.cols]
    }

    /// Source voxel `(x, y, z)` of a pixel.
    pub fn source(&self, row: usize, col: usize) -> (usize, usize, usize) {
        (self.x_source[row], col, self.z_min + row)
    }

    /// 8-bit PGM, cranial end at the top, HU window mapped to black..white.
    pub fn to_pgm(&self, lo: f64, hi: f64) -> Vec<u8> {
        let mut px = Vec::with_capacity(self.pixels.len());
        for r in (0..self.rows).rev() {
            px.extend(self.row(r).iter().map(|&h| h as f64));
        }
        encode_pgm(self.cols, self.rows, &px, lo, hi)
    }
}

/// Samples each axial slice of the cord's valid range at the nearest voxel
/// column to the cord.
pub fn build_virtual_sagittal(v: &Volume, cord: &CordLine) -> SagittalImage {
    let [nx, ny, _] = v.dims();
    let mut pixels = Vec::with_capacity(cord.points.len() * ny);
    let mut x_source = Vec::with_capacity(cord.points.len());
    for p in &cord.points {
        let x = (p.x.round().max(0.0) as usize).min(nx - 1);
        x_source.push(x);
        pixels.extend((0..ny).map(|y| v.get(x, y, p.z)));
    }
    SagittalImage {
        z_min: cord.valid_range.0,
        rows: cord.points.len(),
        cols: ny,
        pixels,
        x_source,
        cord_y: cord.points.iter().map(|p| p.y).collect(),
    }
}
