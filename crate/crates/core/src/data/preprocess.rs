use crate::error::{Error, Result};
use crate::tensor::LabelMap;

use super::Plane;

/// Pixel spacing every slice is resampled to, in mm.
pub const TARGET_SPACING: (f64, f64) = (1.25, 1.25);

/// Resamples to `target` spacing: bilinear for the image, nearest neighbour
/// for labels. Pixel centres are aligned; new extent is `round(old·spacing/target)`.
pub fn resample_to_spacing(
    image: &Plane,
    labels: &LabelMap,
    spacing: (f64, f64),
    target: (f64, f64),
) -> Result<(Plane, LabelMap, (f64, f64))> {
    if !(spacing.0 > 0.0 && spacing.1 > 0.0 && target.0 > 0.0 && target.1 > 0.0) {
        return Err(Error::InvalidArgument(format!("spacing must be positive, got {spacing:?} -> {target:?}")));
    }
    if (image.height, image.width) != (labels.height, labels.width) {
        return Err(Error::shape("resample_to_spacing", &[image.height, image.width], &[labels.height, labels.width]));
    }
    let (h, w) = (image.height, image.width);
    let nh = ((h as f64 * spacing.0 / target.0).round() as usize).max(1);
    let nw = ((w as f64 * spacing.1 / target.1).round() as usize).max(1);
    if (nh, nw) == (h, w) {
        return Ok((image.clone(), labels.clone(), target));
    }
    let (sy, sx) = (h as f64 / nh as f64, w as f64 / nw as f64);
    let src = |i: usize, s: f64| (i as f64 + 0.5) * s - 0.5;
    let img = Plane::from_fn(nh, nw, |y, x| {
        let (yy, xx) = (src(y, sy).clamp(0.0, (h - 1) as f64), src(x, sx).clamp(0.0, (w - 1) as f64));
        image.bilinear(yy, xx, 0.0)
    });
    let mut lab = Vec::with_capacity(nh * nw);
    for y in 0..nh {
        for x in 0..nw {
            let yy = (((y as f64 + 0.5) * sy) as usize).min(h - 1);
            let xx = (((x as f64 + 0.5) * sx) as usize).min(w - 1);
            lab.push(labels.get(yy, xx));
        }
    }
    Ok((img, LabelMap::new(nh, nw, lab)?, target))
}

/// Subtracts the slice minimum, then centre-crops or zero-pads each axis to
/// `out`. Labels pad with background.
pub fn center_crop_pad(image: &Plane, labels: &LabelMap, out: (usize, usize)) -> Result<(Plane, LabelMap)> {
    if (image.height, image.width) != (labels.height, labels.width) {
        return Err(Error::shape("center_crop_pad", &[image.height, image.width], &[labels.height, labels.width]));
    }
    let (lo, _) = image.min_max();
    let lo = if lo.is_finite() { lo } else { 0.0 };
    // Signed offset of output row 0 within the source.
    let off = |old: usize, new: usize| old as isize / 2 - new as isize / 2;
    let (oy, ox) = (off(image.height, out.0), off(image.width, out.1));
    let inside = |y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < image.height && (x as usize) < image.width;
    let img = Plane::from_fn(out.0, out.1, |y, x| {
        let (sy, sx) = (y as isize + oy, x as isize + ox);
        if inside(sy, sx) {
            image.get(sy as usize, sx as usize) - lo
        } else {
            0.0
        }
    });
    let mut lab = Vec::with_capacity(out.0 * out.1);
    for y in 0..out.0 {
        for x in 0..out.1 {
            let (sy, sx) = (y as isize + oy, x as isize + ox);
            lab.push(if inside(sy, sx) { labels.get(sy as usize, sx as usize) } else { 0 });
        }
    }
    Ok((img, LabelMap::new(out.0, out.1, lab)?))
}

/// Zero mean, unit (population) standard deviation. A constant slice becomes
/// all zeros with a warning.
pub fn zscore(image: &Plane) -> Plane {
    let n = image.data.len().max(1) as f64;
    let mean = image.data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = image.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 1e-12) {
        log::warn!("zscore: constant slice ({}x{}), returning zeros", image.height, image.width);
        return Plane::zeros(image.height, image.width);
    }
    Plane {
        height: image.height,
        width: image.width,
        data: image.data.iter().map(|&v| ((v as f64 - mean) / std) as f32).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_util::SplitMix;

    fn random(h: usize, w: usize, seed: u64) -> (Plane, LabelMap) {
        let mut rng = SplitMix::new(seed);
        let img = Plane::from_fn(h, w, |_, _| rng.uniform(0.0, 10.0) as f32);
        let lab = LabelMap::new(h, w, (0..h * w).map(|_| rng.uniform(0.0, 3.0) as u8).collect()).unwrap();
        (img, lab)
    }

    #[test]
    fn coarse_spacing_doubles_dims() {
        let (img, lab) = random(10, 12, 1);
        let (i2, l2, s) = resample_to_spacing(&img, &lab, (2.5, 2.5), TARGET_SPACING).unwrap();
        assert_eq!((i2.height, i2.width), (20, 24));
        assert_eq!((l2.height, l2.width), (20, 24));
        assert_eq!(s, TARGET_SPACING);
    }

    #[test]
    fn target_spacing_is_identity() {
        let (img, lab) = random(9, 7, 2);
        let (i2, l2, _) = resample_to_spacing(&img, &lab, (1.25, 1.25), TARGET_SPACING).unwrap();
        assert_eq!(i2, img);
        assert_eq!(l2, lab);
    }

    #[test]
    fn resampled_labels_introduce_no_new_values() {
        let (img, mut lab) = random(13, 11, 3);
        for v in lab.data.iter_mut() {
            *v = if *v == 1 { 3 } else { *v * 2 };
        }
        for spacing in [(0.7, 0.9), (1.9, 3.1), (1.0, 2.0)] {
            let (_, l2, _) = resample_to_spacing(&img, &lab, spacing, TARGET_SPACING).unwrap();
            let before: std::collections::BTreeSet<u8> = lab.data.iter().copied().collect();
            assert!(l2.data.iter().all(|v| before.contains(v)));
        }
        assert!(resample_to_spacing(&img, &lab, (0.0, 1.0), TARGET_SPACING).is_err());
    }

    #[test]
    fn crop_takes_centred_window() {
        let img = Plane::from_fn(300, 300, |y, x| (y * 1000 + x) as f32);
        let lab = LabelMap::filled(300, 300, 1);
        let (c, _) = center_crop_pad(&img, &lab, (256, 256)).unwrap();
        assert_eq!((c.height, c.width), (256, 256));
        assert_eq!(c.get(0, 0), (22 * 1000 + 22) as f32);
        assert_eq!(c.get(255, 255), (277 * 1000 + 277) as f32);
    }

    #[test]
    fn pad_adds_symmetric_zero_border() {
        let img = Plane::from_fn(200, 200, |_, _| 5.0);
        let lab = LabelMap::filled(200, 200, 2);
        let (c, l) = center_crop_pad(&img, &lab, (256, 256)).unwrap();
        let inner = |y: usize, x: usize| (28..228).contains(&y) && (28..228).contains(&x);
        for y in 0..256 {
            for x in 0..256 {
                assert_eq!(c.get(y, x), 0.0);
                assert_eq!(l.get(y, x), if inner(y, x) { 2 } else { 0 });
            }
        }
    }

    #[test]
    fn minimum_becomes_zero_before_padding() {
        let img = Plane::from_fn(4, 4, |y, x| if (y, x) == (1, 2) { 7.0 } else { 7.0 + (y + x) as f32 + 1.0 });
        let lab = LabelMap::filled(4, 4, 0);
        let (c, _) = center_crop_pad(&img, &lab, (8, 8)).unwrap();
        assert_eq!(c.get(0, 0), 0.0);
        assert_eq!(c.get(7, 7), 0.0);
        assert_eq!(c.get(2 + 1, 2 + 2), 0.0);
        assert_eq!(c.get(2, 2), 1.0);
        assert_eq!(c.min_max().0, 0.0);
    }

    #[test]
    fn zscore_moments_and_idempotence() {
        let (img, _) = random(16, 16, 4);
        let z = zscore(&img);
        let n = z.data.len() as f64;
        let mean = z.data.iter().map(|&v| v as f64).sum::<f64>() / n;
        let std = (z.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-5 && (std - 1.0).abs() < 1e-5);
        let zz = zscore(&z);
        for (a, b) in z.data.iter().zip(&zz.data) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn constant_slice_zscores_to_zero() {
        let z = zscore(&Plane::from_fn(3, 3, |_, _| 4.0));
        assert!(z.data.iter().all(|&v| v == 0.0));
    }
}
