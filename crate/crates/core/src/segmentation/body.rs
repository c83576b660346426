use std::collections::VecDeque;

use super::SegmentationError;
use crate::volume::Volume;

pub const BODY_HU_MIN: i16 = -300;

/// Per-slice body mask, x-fastest like the volume.
#[derive(Clone, Debug, PartialEq)]
pub struct BodyMask {
    pub dims: [usize; 3],
    pub mask: Vec<bool>,
}

impl BodyMask {
    pub fn slice(&self, z: usize) -> &[bool] {
        let n = self.dims[0] * self.dims[1];
        &self.mask[z * n..(z + 1) * n]
    }

    pub fn slices_with_body(&self) -> usize {
        (0..self.dims[2]).filter(|&z| self.slice(z).iter().any(|&m| m)).count()
    }
}

/// Threshold at -300 HU, keep the largest 8-connected component of each axial
/// slice and fill its holes.
pub fn compute_body_mask(v: &Volume) -> Result<BodyMask, SegmentationError> {
    let [nx, ny, nz] = v.dims();
    let mut mask = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        let fg: Vec<bool> = v.axial(z).iter().map(|&h| h > BODY_HU_MIN).collect();
        let mut comp = largest_component(&fg, nx, ny);
        fill_holes(&mut comp, nx, ny);
        mask.extend(comp);
    }
    if !mask.iter().any(|&m| m) {
        return Err(SegmentationError::NoBody);
    }
    Ok(BodyMask { dims: [nx, ny, nz], mask })
}

pub(crate) fn largest_component(fg: &[bool], w: usize, h: usize) -> Vec<bool> {
    let mut label = vec![0u32; fg.len()];
    let mut best = (0usize, 0u32);
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..fg.len() {
        if !fg[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if fg[j] && label[j] == 0 {
                        label[j] = next;
                        queue.push_back(j);
                    }
                }
            }
        }
        if size > best.0 {
            best = (size, next);
        }
    }
    label.iter().map(|&l| l != 0 && l == best.1).collect()
}

/// Sets every background pixel not 4-connected to the border.
pub(crate) fn fill_holes(mask: &mut [bool], w: usize, h: usize) {
    let mut outside = vec![false; mask.len()];
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if (x == 0 || y == 0 || x == w - 1 || y == h - 1) && !mask[y * w + x] {
                outside[y * w + x] = true;
                queue.push_back(y * w + x);
            }
        }
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = (i % w, i / w);
        let mut visit = |j: usize| {
            if !mask[j] && !outside[j] {
                outside[j] = true;
                queue.push_back(j);
            }
        };
        if x > 0 {
            visit(i - 1);
        }
        if x + 1 < w {
            visit(i + 1);
        }
        if y > 0 {
            visit(i - w);
        }
        if y + 1 < h {
            visit(i + w);
        }
    }
    for (m, o) in mask.iter_mut().zip(outside) {
        *m = !o;
    }
}
