use vcf_core::phantom::{generate_phantom, tissue, Anatomy, Fracture, PhantomSpec};
use vcf_core::segmentation::{
    build_virtual_sagittal, compute_body_mask, cord_deviation, locate_spinal_cord, patch_count,
    segment_volume, SegmentationConfig, SegmentationError,
};
use vcf_core::volume::{Plane, Volume};

fn noiseless(spec: PhantomSpec) -> PhantomSpec {
    PhantomSpec {
        noise_sigma_hu: 0.0,
        ..spec
    }
}

fn bone_components(pixels: &[bool], w: usize, h: usize) -> usize {
    let mut seen = vec![false; pixels.len()];
    let mut count = 0;
    for start in 0..pixels.len() {
        if !pixels[start] || seen[start] {
            continue;
        }
        count += 1;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            for (dx, dy) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
                let (nx, ny) = (x + dx, y + dy);
                if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
                    let j = ny as usize * w + nx as usize;
                    if pixels[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
    }
    count
}

#[test]
fn body_mask_matches_non_air_tissue() {
    let (v, _) = generate_phantom(&noiseless(PhantomSpec::default())).unwrap();
    let mask = compute_body_mask(&v).unwrap();
    let expect: Vec<bool> = v.voxels().iter().map(|&h| h != tissue::AIR).collect();
    assert_eq!(mask.mask, expect);
}

#[test]
fn cord_tracks_straight_and_scoliotic_spines() {
    let cfg = SegmentationConfig::default();
    for amplitude in [0.0, 10.0] {
        let spec = noiseless(PhantomSpec {
            scoliosis_amplitude_mm: amplitude,
            ..PhantomSpec::default()
        });
        let (v, truth) = generate_phantom(&spec).unwrap();
        let mask = compute_body_mask(&v).unwrap();
        let cord = locate_spinal_cord(&v, &mask, &cfg).unwrap();
        let dev = cord_deviation(&cord, &truth).unwrap();
        assert!(dev.mean <= 2.0 && dev.max <= 4.0, "amplitude {amplitude}: {dev:?}");
        assert!(dev.compared as f64 > 0.9 * truth.cord_line.len() as f64);
        for w in cord.points.windows(2) {
            assert!((w[1].x - w[0].x).abs() <= 2.0 + 1e-12);
            assert!((w[1].y - w[0].y).abs() <= 2.0 + 1e-12);
        }
        if amplitude > 0.0 {
            let extremum = |xs: &mut dyn Iterator<Item = f64>| xs.fold(f64::MIN, f64::max);
            let gt = extremum(&mut truth.cord_line.iter().filter(|p| cord.at(p.z).is_some()).map(|p| p.x));
            let found = extremum(&mut cord.points.iter().map(|p| p.x));
            assert!((gt - found).abs() <= 2.0, "extremum {found} vs {gt}");
        }
    }
}

#[test]
fn virtual_section_straightens_scoliosis() {
    let spec = noiseless(PhantomSpec {
        scoliosis_amplitude_mm: 20.0,
        body_radius_mm: 12.0,
        scoliosis_period_mm: 200.0,
        dims: [128, 96, 192],
        ..PhantomSpec::default()
    });
    let (v, truth) = generate_phantom(&spec).unwrap();
    let cfg = SegmentationConfig::default();
    let cord = locate_spinal_cord(&v, &compute_body_mask(&v).unwrap(), &cfg).unwrap();
    let s = build_virtual_sagittal(&v, &cord);
    let (z0, z1) = cord.valid_range;
    let bx = truth.vertebra_boxes[0];
    let (y_lo, y_hi) = (bx.y_min.ceil() as usize, bx.y_max.floor() as usize);
    let in_vertebra = |z: usize| truth.vertebra_boxes.iter().any(|b| (b.z_min..=b.z_max).contains(&(z as f64)));
    // Bone inside the body's y-range, with disc rows bridged.
    let band = |pixel: &dyn Fn(usize, usize) -> i16| -> usize {
        let w = y_hi - y_lo + 1;
        let mut px = Vec::new();
        for z in z0..=z1 {
            for y in y_lo..=y_hi {
                px.push(!in_vertebra(z) || pixel(z, y) as f64 >= cfg.bone_hu_threshold);
            }
        }
        bone_components(&px, w, z1 - z0 + 1)
    };
    assert_eq!(band(&|z, y| s.at(z - z0, y)), 1);
    let plain = v.slice(Plane::Sagittal, v.dims()[0] / 2).unwrap();
    assert!(band(&|z, y| plain.at(z, y)) > 1);
}

#[test]
fn column_width_matches_body_diameter() {
    let spec = noiseless(PhantomSpec::default());
    let (v, _) = generate_phantom(&spec).unwrap();
    let seg = segment_volume("s", &v, &SegmentationConfig::default(), None).unwrap();
    let expect = 2.0 * spec.body_radius_mm / spec.spacing_mm[1];
    let w = seg.column.average_width_w;
    assert!((w - expect).abs() <= 0.15 * expect, "width {w} vs {expect}");
    assert!(seg.column.anterior.iter().zip(&seg.column.posterior).all(|(a, p)| p > a));
}

#[test]
fn fracture_dips_column_rows() {
    let spec = noiseless(PhantomSpec {
        fracture_plan: vec![Fracture { vertebra: 4, height_loss: 0.5 }],
        ..PhantomSpec::default()
    });
    let (v, truth) = generate_phantom(&spec).unwrap();
    let seg = segment_volume("s", &v, &SegmentationConfig::default(), Some(&truth)).unwrap();
    let col = &seg.column;
    let row_sum = |b: &vcf_core::phantom::VertebraBox| {
        let lo = (b.z_min.ceil() as usize).max(seg.sagittal.z_min) - seg.sagittal.z_min;
        let hi = b.z_max.floor() as usize - seg.sagittal.z_min;
        (lo..=hi).map(|r| col.row_mask_count(r)).sum::<usize>()
    };
    let sums: Vec<usize> = truth.vertebra_boxes.iter().map(row_sum).collect();
    let neighbours = (sums[3] + sums[5]) as f64 / 2.0;
    assert!((sums[4] as f64) < 0.85 * neighbours, "{sums:?}");
}

#[test]
fn patches_cover_every_vertebra_and_follow_the_count_formula() {
    let cfg = SegmentationConfig::default();
    let (v, truth) = generate_phantom(&PhantomSpec::default()).unwrap();
    let seg = segment_volume("s", &v, &cfg, Some(&truth)).unwrap();
    let w = seg.column.average_width_w;
    let (first, last) = seg.column.extent();
    let height = (last + 1 - first) as f64;
    assert_eq!(seg.patches.len(), patch_count(height, 1.25 * w, 0.5 * w));
    for c in &truth.vertebra_centers {
        assert!(
            seg.patches.patches.iter().any(|p| p.rect.unwrap().contains(c[1], c[2])),
            "centre {c:?} uncovered"
        );
    }
    for p in &seg.patches.patches {
        assert_eq!(p.pixels.len(), 1024);
        assert!(p.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(p.label, Some(false));
    }
}

#[test]
fn fractured_vertebra_yields_positive_patches() {
    let spec = PhantomSpec {
        fracture_plan: vec![Fracture { vertebra: 5, height_loss: 0.4 }],
        ..PhantomSpec::default()
    };
    let (v, truth) = generate_phantom(&spec).unwrap();
    let seg = segment_volume("s", &v, &SegmentationConfig::default(), Some(&truth)).unwrap();
    let b = truth.vertebra_boxes[5];
    for p in &seg.patches.patches {
        let r = p.rect.unwrap();
        let expect = r.z_overlap(b.z_min, b.z_max) >= 0.5 * (b.z_max - b.z_min);
        assert_eq!(p.label, Some(expect));
    }
    assert!(seg.patches.patches.iter().any(|p| p.label == Some(true)));
}

#[test]
fn segmentation_is_deterministic_and_translation_equivariant() {
    let cfg = SegmentationConfig::default();
    let (v, _) = generate_phantom(&PhantomSpec::default()).unwrap();
    let a = segment_volume("s", &v, &cfg, None).unwrap();
    let b = segment_volume("s", &v.clone(), &cfg, None).unwrap();
    assert_eq!(a.patches, b.patches);

    let shifted = v.shifted_x(3, tissue::AIR);
    let c = segment_volume("s", &shifted, &cfg, None).unwrap();
    for p in &a.cord.points {
        if let Some(q) = c.cord.at(p.z) {
            assert!((q.x - p.x - 3.0).abs() <= 1.0, "z {}: {} vs {}", p.z, q.x, p.x);
        }
    }
    assert_eq!(a.patches.len(), c.patches.len());
    for (p, q) in a.patches.patches.iter().zip(&c.patches.patches) {
        let mad = p.pixels.iter().zip(&q.pixels).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / 1024.0;
        assert!(mad <= 0.02, "mean abs diff {mad}");
    }
}

#[test]
fn soft_tissue_volume_fails_cord_stage() {
    let v = Volume::filled([32, 32, 32], [1.5; 3], 40).unwrap();
    let err = segment_volume("s", &v, &SegmentationConfig::default(), None).unwrap_err();
    assert!(matches!(err, SegmentationError::CordNotFound { .. }));
    assert_eq!(err.stage(), "cord");
    let air = Volume::filled([32, 32, 32], [1.5; 3], -1000).unwrap();
    assert_eq!(segment_volume("s", &air, &SegmentationConfig::default(), None).unwrap_err().stage(), "body_mask");
}

#[test]
fn anatomy_is_exposed_for_reference_geometry() {
    let a = Anatomy::new(&PhantomSpec::default());
    assert!(a.column_top > a.column_bottom);
}
