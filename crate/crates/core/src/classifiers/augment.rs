use super::ClassifierError;
use crate::segmentation::{PATCH_PIXELS, PATCH_SIDE};

pub const MAX_ROTATION_DEG: f64 = 18.0;

/// Rotates a 32×32 patch about its centre by `angle_degrees` (bilinear);
/// pixels whose source falls outside the patch take `fill`.
pub fn augment_patch(patch: &[f32], angle_degrees: f64, fill: f32) -> Result<Vec<f32>, ClassifierError> {
    if !(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG).contains(&angle_degrees) {
        return Err(ClassifierError::Argument(format!(
            "rotation {angle_degrees}° outside [-18, 18]"
        )));
    }
    if patch.len() != PATCH_PIXELS {
        return Err(ClassifierError::Shape(format!("patch has {} values, expected 1024", patch.len())));
    }
    if angle_degrees == 0.0 {
        return Ok(patch.to_vec());
    }
    Ok(rotate(patch, PATCH_SIDE, angle_degrees.to_radians(), fill))
}

fn rotate(img: &[f32], n: usize, theta: f64, fill: f32) -> Vec<f32> {
    let c = (n as f64 - 1.0) / 2.0;
    let (sin, cos) = theta.sin_cos();
    let last = (n - 1) as f64;
    let mut out = Vec::with_capacity(n * n);
    for r in 0..n {
        for col in 0..n {
            let (dx, dy) = (col as f64 - c, r as f64 - c);
            // Inverse mapping: source = R(-θ)·destination.
            let sx = cos * dx + sin * dy + c;
            let sy = -sin * dx + cos * dy + c;
            if sx < -1e-9 || sy < -1e-9 || sx > last + 1e-9 || sy > last + 1e-9 {
                out.push(fill);
                continue;
            }
            let (sx, sy) = (sx.clamp(0.0, last), sy.clamp(0.0, last));
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(n - 1), (y0 + 1).min(n - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            let at = |x: usize, y: usize| img[y * n + x] as f64;
            let v = (at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx) * (1.0 - fy)
                + (at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx) * fy;
            out.push(v as f32);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_angle_is_identity() {
        let p: Vec<f32> = (0..1024).map(|i| (i % 17) as f32 / 16.0).collect();
        assert_eq!(augment_patch(&p, 0.0, 0.0).unwrap(), p);
    }

    #[test]
    fn out_of_range_rejected() {
        let p = vec![0.5; 1024];
        assert!(augment_patch(&p, 25.0, 0.0).is_err());
        assert!(augment_patch(&p, -18.5, 0.0).is_err());
        assert!(augment_patch(&p, 18.0, 0.0).is_ok());
        assert!(augment_patch(&p[..10], 5.0, 0.0).is_err());
    }

    #[test]
    fn quarter_turn_moves_pixels_as_expected() {
        // A 90° rotation is out of range for augmentation but checks the mapping.
        let mut img = vec![0.0f32; 16];
        img[1] = 1.0; // row 0, col 1
        let out = rotate(&img, 4, std::f64::consts::FRAC_PI_2, 0.0);
        let hot: Vec<usize> = (0..16).filter(|&i| out[i] > 0.99).collect();
        assert_eq!(hot.len(), 1);
    }
}
