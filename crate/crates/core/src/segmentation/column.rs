use super::body::fill_holes;
use super::sagittal::SagittalImage;
use super::SegmentationError;

const MIN_RUN: usize = 2;
const MIN_ROW_FRACTION: f64 = 0.3;

/// Column bounds per sagittal row, in sagittal column (`y`) units, inclusive.
#[derive(Clone, Debug, PartialEq)]
pub struct ColumnSegment {
    pub anterior: Vec<f64>,
    pub posterior: Vec<f64>,
    pub detected: Vec<bool>,
    pub average_width_w: f64,
    /// Row-major `rows × cols`, true on the selected bone run of detected rows.
    pub column_mask: Vec<bool>,
    pub rows: usize,
    pub cols: usize,
}

impl ColumnSegment {
    /// First and last detected rows.
    pub fn extent(&self) -> (usize, usize) {
        let first = self.detected.iter().position(|&d| d).unwrap_or(0);
        let last = self.detected.iter().rposition(|&d| d).unwrap_or(0);
        (first, last)
    }

    pub fn midline(&self, row: usize) -> f64 {
        (self.anterior[row] + self.posterior[row]) / 2.0
    }

    pub fn row_mask_count(&self, row: usize) -> usize {
        self.column_mask[row * self.cols..(row + 1) * self.cols].iter().filter(|&&m| m).count()
    }
}

fn runs(row: &[bool]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < row.len() {
        if row[i] {
            let s = i;
            while i < row.len() && row[i] {
                i += 1;
            }
            if i - s >= MIN_RUN {
                out.push((s, i - 1));
            }
        } else {
            i += 1;
        }
    }
    out
}

fn fill_missing(values: &mut [f64], known: &[bool]) {
    let idx: Vec<usize> = (0..values.len()).filter(|&i| known[i]).collect();
    let (Some(&first), Some(&last)) = (idx.first(), idx.last()) else {
        return;
    };
    for i in 0..values.len() {
        if known[i] {
            continue;
        }
        values[i] = if i < first {
            values[first]
        } else if i > last {
            values[last]
        } else {
            let b = *idx.iter().find(|&&k| k > i).unwrap();
            let a = *idx.iter().rev().find(|&&k| k < i).unwrap();
            let t = (i - a) as f64 / (b - a) as f64;
            values[a] + t * (values[b] - values[a])
        };
    }
}

/// Thresholds the section at the bone level, fills enclosed holes (the
/// trabecular core inside the cortical outline) and picks, per row, the bone
/// run holding the cord position or the nearest one anterior to it.
pub fn segment_column(s: &SagittalImage, bone_hu_threshold: f64) -> Result<ColumnSegment, SegmentationError> {
    let (rows, cols) = (s.rows, s.cols);
    let mut bone: Vec<bool> = s.pixels.iter().map(|&h| h as f64 >= bone_hu_threshold).collect();
    fill_holes(&mut bone, cols, rows);
    let mut anterior = vec![0.0; rows];
    let mut posterior = vec![0.0; rows];
    let mut detected = vec![false; rows];
    let mut column_mask = vec![false; rows * cols];
    let mut width_sum = 0.0;
    for r in 0..rows {
        let cy = s.cord_y[r];
        let row_runs = runs(&bone[r * cols..(r + 1) * cols]);
        let pick = row_runs
            .iter()
            .find(|&&(a, b)| a as f64 <= cy && cy <= b as f64)
            .or_else(|| row_runs.iter().rev().find(|&&(_, b)| (b as f64) < cy));
        if let Some(&(a, b)) = pick {
            anterior[r] = a as f64;
            posterior[r] = b as f64;
            detected[r] = true;
            width_sum += (b - a + 1) as f64;
            column_mask[r * cols + a..=r * cols + b].iter_mut().for_each(|m| *m = true);
        }
    }
    let n_detected = detected.iter().filter(|&&d| d).count();
    if n_detected == 0 || (n_detected as f64) < MIN_ROW_FRACTION * rows as f64 {
        return Err(SegmentationError::ColumnNotFound {
            detected: n_detected,
            total: rows,
        });
    }
    fill_missing(&mut anterior, &detected);
    fill_missing(&mut posterior, &detected);
    Ok(ColumnSegment {
        anterior,
        posterior,
        detected,
        average_width_w: width_sum / n_detected as f64,
        column_mask,
        rows,
        cols,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(rows: usize, cols: usize, f: impl Fn(usize, usize) -> i16, cord_y: f64) -> SagittalImage {
        let mut pixels = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                pixels.push(f(r, c));
            }
        }
        SagittalImage {
            z_min: 0,
            rows,
            cols,
            pixels,
            x_source: vec![0; rows],
            cord_y: vec![cord_y; rows],
        }
    }

    #[test]
    fn soft_tissue_fails() {
        let s = image(20, 20, |_, _| 40, 10.0);
        assert!(matches!(segment_column(&s, 200.0), Err(SegmentationError::ColumnNotFound { .. })));
    }

    #[test]
    fn picks_run_anterior_to_cord_and_interpolates() {
        // Body at y 2..=7, arch at 12..=14, cord at 10; row 5 is a disc.
        let s = image(10, 20, |r, c| if r != 5 && ((2..=7).contains(&c) || (12..=14).contains(&c)) { 600 } else { 40 }, 10.0);
        let col = segment_column(&s, 200.0).unwrap();
        assert!(!col.detected[5]);
        assert_eq!((col.anterior[5], col.posterior[5]), (2.0, 7.0));
        assert_eq!(col.average_width_w, 6.0);
        assert_eq!(col.row_mask_count(0), 6);
        assert_eq!(col.row_mask_count(5), 0);
        assert_eq!(col.extent(), (0, 9));
    }

    #[test]
    fn hollow_body_is_filled() {
        let s = image(
            9,
            20,
            |r, c| {
                let inside = (1..=7).contains(&r) && (2..=9).contains(&c);
                let shell = inside && (r == 1 || r == 7 || c == 2 || c == 9);
                if shell {
                    600
                } else if inside {
                    150
                } else {
                    40
                }
            },
            12.0,
        );
        let col = segment_column(&s, 200.0).unwrap();
        assert_eq!((col.anterior[4], col.posterior[4]), (2.0, 9.0));
    }
}
