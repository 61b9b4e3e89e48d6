use super::Plane;

pub const CANNY_SIGMA: f64 = 1.0;
pub const CANNY_LOW: f32 = 0.1;
pub const CANNY_HIGH: f32 = 0.2;

/// Canny edge map: Gaussian blur, Sobel gradients, non-maximum suppression
/// and hysteresis with thresholds relative to the maximum gradient magnitude.
/// Returns 0/1 per pixel.
pub fn canny(image: &Plane, sigma: f64, low: f32, high: f32) -> Plane {
    let (h, w) = (image.height, image.width);
    let blurred = image.gaussian_blur(sigma);
    let (gx, gy) = blurred.sobel();
    let mag: Vec<f32> = gx.data.iter().zip(&gy.data).map(|(a, b)| a.hypot(*b)).collect();
    let max = mag.iter().copied().fold(0.0f32, f32::max);
    let mut out = Plane::zeros(h, w);
    if !(max > 1e-6 * (1.0 + image.min_max().1.abs())) {
        return out;
    }

    // Non-maximum suppression along the gradient direction, quantized to
    // 0/45/90/135 degrees. Ties keep the pixel on the negative side only, so
    // a symmetric ridge yields a one-pixel line.
    let at = |y: isize, x: isize| {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            mag[y as usize * w + x as usize]
        }
    };
    let mut thin = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let m = mag[i];
            if m == 0.0 {
                continue;
            }
            let angle = gy.data[i].atan2(gx.data[i]).to_degrees().rem_euclid(180.0);
            let (dy, dx) = if !(22.5..157.5).contains(&angle) {
                (0, 1)
            } else if angle < 67.5 {
                (1, 1)
            } else if angle < 112.5 {
                (1, 0)
            } else {
                (1, -1)
            };
            let (y, x) = (y as isize, x as isize);
            let before = at(y - dy, x - dx);
            let after = at(y + dy, x + dx);
            if m > before && m >= after {
                thin[i] = m;
            }
        }
    }

    let (lo, hi) = (low * max, high * max);
    let mut stack: Vec<usize> = (0..h * w).filter(|&i| thin[i] >= hi).collect();
    for &i in &stack {
        out.data[i] = 1.0;
    }
    while let Some(i) = stack.pop() {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if out.data[j] == 0.0 && thin[j] >= lo {
                    out.data[j] = 1.0;
                    stack.push(j);
                }
            }
        }
    }
    out
}

/// [`canny`] with the default σ and thresholds.
pub fn canny_default(image: &Plane) -> Plane {
    canny(image, CANNY_SIGMA, CANNY_LOW, CANNY_HIGH)
}
