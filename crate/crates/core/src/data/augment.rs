use std::f64::consts::PI;

use rand::Rng;

use crate::tensor::LabelMap;

use super::{Plane, RawSlice, SegSample};

/// Smoothing of the elastic displacement field, in pixels.
pub const ELASTIC_SIGMA: f64 = 8.0;
/// Largest displacement of the elastic field, in pixels.
pub const ELASTIC_ALPHA: f64 = 10.0;
pub const GAMMA_RANGE: (f64, f64) = (0.5, 2.0);

/// One draw of the augmentation parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentParams {
    /// Rotation about the image centre, radians.
    pub angle: f64,
    pub flip_h: bool,
    pub flip_v: bool,
    /// Per-pixel `(dy, dx)` displacement fields, sampled at output pixels.
    pub elastic: Option<(Plane, Plane)>,
    pub gamma: f64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            angle: 0.0,
            flip_h: false,
            flip_v: false,
            elastic: None,
            gamma: 1.0,
        }
    }

    pub fn sample(rng: &mut impl Rng, height: usize, width: usize) -> Self {
        let angle = rng.gen_range(-PI..=PI);
        let flip_h = rng.gen_bool(0.5);
        let flip_v = rng.gen_bool(0.5);
        let mut field = || {
            let raw = Plane::from_fn(height, width, |_, _| rng.gen_range(-1.0f32..=1.0));
            let smooth = raw.gaussian_blur(ELASTIC_SIGMA);
            let peak = smooth.data.iter().fold(0.0f32, |m, v| m.max(v.abs()));
            let scale = if peak > 0.0 { ELASTIC_ALPHA as f32 / peak } else { 0.0 };
            Plane {
                data: smooth.data.iter().map(|v| v * scale).collect(),
                ..smooth
            }
        };
        let dy = field();
        let dx = field();
        let gamma = rng.gen_range(GAMMA_RANGE.0..=GAMMA_RANGE.1);
        AugmentParams {
            angle,
            flip_h,
            flip_v,
            elastic: Some((dy, dx)),
            gamma,
        }
    }

    /// Source coordinate `(y, x)` read by output pixel `(y, x)`. The forward
    /// order is rotate, flip, elastic, so the inverse runs elastic first.
    fn source(&self, y: usize, x: usize, h: usize, w: usize) -> (f64, f64) {
        let (mut sy, mut sx) = (y as f64, x as f64);
        if let Some((dy, dx)) = &self.elastic {
            sy += dy.get(y, x) as f64;
            sx += dx.get(y, x) as f64;
        }
        if self.flip_v {
            sy = (h - 1) as f64 - sy;
        }
        if self.flip_h {
            sx = (w - 1) as f64 - sx;
        }
        if self.angle != 0.0 {
            let (cy, cx) = ((h - 1) as f64 / 2.0, (w - 1) as f64 / 2.0);
            let (s, c) = self.angle.sin_cos();
            let (ry, rx) = (sy - cy, sx - cx);
            sx = cx + c * rx + s * ry;
            sy = cy - s * rx + c * ry;
        }
        (sy, sx)
    }
}

/// Applies the geometric part of `p` to the image (bilinear, zero fill) and
/// labels (nearest, background fill) with one shared coordinate map.
pub fn warp(image: &Plane, labels: &LabelMap, p: &AugmentParams) -> (Plane, LabelMap) {
    let (h, w) = (image.height, image.width);
    let mut img = Plane::zeros(h, w);
    let mut lab = LabelMap::filled(h, w, 0);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = p.source(y, x, h, w);
            // Snap coordinates that are integral up to rounding noise.
            let snap = |v: f64| if (v - v.round()).abs() < 1e-9 { v.round() } else { v };
            let (sy, sx) = (snap(sy), snap(sx));
            img.data[y * w + x] = image.bilinear(sy, sx, 0.0);
            let (ny, nx) = ((sy + 0.5).floor(), (sx + 0.5).floor());
            if ny >= 0.0 && nx >= 0.0 && ny < h as f64 && nx < w as f64 {
                lab.data[y * w + x] = labels.get(ny as usize, nx as usize);
            }
        }
    }
    (img, lab)
}

/// Rescales intensities to `[0, 1]` and raises them to `gamma`.
pub fn gamma_shift(image: &Plane, gamma: f64) -> Plane {
    let (lo, hi) = image.min_max();
    let span = hi - lo;
    Plane {
        height: image.height,
        width: image.width,
        data: image
            .data
            .iter()
            .map(|&v| if span > 0.0 { (((v - lo) / span) as f64).powf(gamma) as f32 } else { 0.0 })
            .collect(),
    }
}

/// Augments a preprocessed slice with explicit parameters, then z-scores
/// and re-derives boundary and edge maps.
pub fn augment_with(raw: &RawSlice, p: &AugmentParams) -> SegSample {
    let (img, lab) = warp(&raw.image, &raw.labels, p);
    let img = gamma_shift(&img, p.gamma);
    SegSample::finalize(&raw.id, &img, lab, raw.spacing)
}

/// Random augmentation: rotation in `[-π, π]`, 50% horizontal and vertical
/// flips, elastic deformation and a gamma shift in `[0.5, 2]`.
pub fn augment(raw: &RawSlice, rng: &mut impl Rng) -> SegSample {
    let p = AugmentParams::sample(rng, raw.image.height, raw.image.width);
    augment_with(raw, &p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::dice_coefficient;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn slice(n: usize) -> RawSlice {
        let image = Plane::from_fn(n, n, |y, x| ((y * 3 + x * 5) % 7) as f32 + (x as f32) * 0.25);
        let labels = LabelMap::new(
            n,
            n,
            (0..n * n)
                .map(|i| {
                    let (y, x) = (i / n, i % n);
                    if y < n / 3 && x < n / 2 {
                        1
                    } else if x > 2 * n / 3 {
                        2
                    } else if y > n / 2 && x < n / 3 {
                        3
                    } else {
                        0
                    }
                })
                .collect(),
        )
        .unwrap();
        RawSlice {
            id: "s".into(),
            image,
            labels,
            spacing: (1.25, 1.25),
        }
    }

    #[test]
    fn identity_params_reproduce_plain_pipeline() {
        let raw = slice(16);
        let a = augment_with(&raw, &AugmentParams::identity());
        let b = SegSample::finalize(&raw.id, &raw.image, raw.labels.clone(), raw.spacing);
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.boundary, b.boundary);
        assert_eq!(a.canny, b.canny);
        assert!(a.image.max_abs_diff(&b.image) < 1e-5);
        let zero_field = (Plane::zeros(16, 16), Plane::zeros(16, 16));
        let p = AugmentParams {
            elastic: Some(zero_field),
            ..AugmentParams::identity()
        };
        assert_eq!(warp(&raw.image, &raw.labels, &p), (raw.image.clone(), raw.labels.clone()));
    }

    #[test]
    fn double_horizontal_flip_is_identity() {
        let raw = slice(12);
        let p = AugmentParams {
            flip_h: true,
            ..AugmentParams::identity()
        };
        let (i1, l1) = warp(&raw.image, &raw.labels, &p);
        assert_ne!(l1, raw.labels);
        let (i2, l2) = warp(&i1, &l1, &p);
        assert_eq!(i2, raw.image);
        assert_eq!(l2, raw.labels);
    }

    #[test]
    fn quarter_turn_matches_index_oracle() {
        let n = 15;
        let raw = slice(n);
        let p = AugmentParams {
            angle: PI / 2.0,
            ..AugmentParams::identity()
        };
        let (img, lab) = warp(&raw.image, &raw.labels, &p);
        // Independent oracle: out[y][x] = in[n-1-x][y].
        let oracle = LabelMap::new(n, n, (0..n * n).map(|i| raw.labels.get(n - 1 - i % n, i / n)).collect()).unwrap();
        for k in 1..4 {
            assert_eq!(dice_coefficient(&lab, &oracle, k), 1.0);
        }
        assert_eq!(lab, oracle);
        for i in 0..n * n {
            assert!((img.data[i] - raw.image.get(n - 1 - i % n, i / n)).abs() < 1e-5);
        }
    }

    #[test]
    fn random_augment_is_seeded_and_consistent() {
        let raw = slice(32);
        let a = augment(&raw, &mut ChaCha8Rng::seed_from_u64(5));
        let b = augment(&raw, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        let c = augment(&raw, &mut ChaCha8Rng::seed_from_u64(6));
        assert_ne!(a.image, c.image);
        assert!(a.labels.data.iter().all(|&v| v < 4));
        assert_eq!(a.image.shape(), &[1, 32, 32]);
        // Boundary re-derived from the warped labels.
        let expect: Vec<f32> = a.labels.boundary(false).iter().map(|&b| b as u8 as f32).collect();
        assert_eq!(a.boundary.data(), &expect[..]);
    }

    #[test]
    fn elastic_field_peak_is_alpha() {
        let p = AugmentParams::sample(&mut ChaCha8Rng::seed_from_u64(1), 32, 32);
        let (dy, _) = p.elastic.unwrap();
        let peak = dy.data.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        assert!((peak - ELASTIC_ALPHA as f32).abs() < 1e-4);
        assert!((GAMMA_RANGE.0..=GAMMA_RANGE.1).contains(&p.gamma));
        assert!(p.angle.abs() <= PI);
    }

    #[test]
    fn gamma_shift_rescales() {
        let img = Plane::from_fn(1, 3, |_, x| [2.0, 4.0, 6.0][x]);
        let g = gamma_shift(&img, 2.0);
        assert_eq!(g.data, vec![0.0, 0.25, 1.0]);
    }
}
