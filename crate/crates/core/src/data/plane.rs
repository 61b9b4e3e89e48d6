use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A single-channel `f32` image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::invalid_shape(
                "Plane::new",
                format!("{height}x{width} needs {} values, got {}", height * width, data.len()),
            ));
        }
        Ok(Plane { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Plane {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Plane { height, width, data }
    }

    /// Accepts `[H, W]` or any shape with unit leading dims.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let s = t.shape();
        if s.len() < 2 || s[..s.len() - 2].iter().any(|&d| d != 1) {
            return Err(Error::invalid_shape("Plane::from_tensor", format!("expected [..1, H, W], got {s:?}")));
        }
        Plane::new(s[s.len() - 2], s[s.len() - 1], t.data().to_vec())
    }

    /// `[1, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new([1, self.height, self.width], self.data.clone()).expect("sizes agree")
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    fn clamped(&self, y: isize, x: isize) -> f32 {
        let y = y.clamp(0, self.height as isize - 1) as usize;
        let x = x.clamp(0, self.width as isize - 1) as usize;
        self.get(y, x)
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Bilinear sample at pixel coordinates; neighbours outside the grid read `fill`.
    pub fn bilinear(&self, y: f64, x: f64, fill: f32) -> f32 {
        let (y0, x0) = (y.floor(), x.floor());
        let (fy, fx) = ((y - y0) as f32, (x - x0) as f32);
        let at = |yy: f64, xx: f64| -> f32 {
            if yy < 0.0 || xx < 0.0 || yy >= self.height as f64 || xx >= self.width as f64 {
                fill
            } else {
                self.get(yy as usize, xx as usize)
            }
        };
        // Exact grid hits skip the out-of-range neighbour.
        let top = if fx == 0.0 { at(y0, x0) } else { at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1.0) * fx };
        if fy == 0.0 {
            return top;
        }
        let bottom = if fx == 0.0 {
            at(y0 + 1.0, x0)
        } else {
            at(y0 + 1.0, x0) * (1.0 - fx) + at(y0 + 1.0, x0 + 1.0) * fx
        };
        top * (1.0 - fy) + bottom * fy
    }

    /// Separable Gaussian blur with replicated borders; kernel radius `ceil(3σ)`.
    pub fn gaussian_blur(&self, sigma: f64) -> Plane {
        if sigma <= 0.0 {
            return self.clone();
        }
        let kernel = gaussian_kernel(sigma);
        let r = (kernel.len() / 2) as isize;
        let (h, w) = (self.height, self.width);
        let rows = Plane::from_fn(h, w, |y, x| {
            kernel
                .iter()
                .enumerate()
                .map(|(i, &k)| k * self.clamped(y as isize, x as isize + i as isize - r))
                .sum()
        });
        Plane::from_fn(h, w, |y, x| {
            kernel
                .iter()
                .enumerate()
                .map(|(i, &k)| k * rows.clamped(y as isize + i as isize - r, x as isize))
                .sum()
        })
    }

    /// 3×3 Sobel derivatives `(gx, gy)` with replicated borders.
    pub fn sobel(&self) -> (Plane, Plane) {
        let (h, w) = (self.height, self.width);
        let p = |y: usize, x: usize, dy: isize, dx: isize| self.clamped(y as isize + dy, x as isize + dx);
        let gx = Plane::from_fn(h, w, |y, x| {
            (p(y, x, -1, 1) + 2.0 * p(y, x, 0, 1) + p(y, x, 1, 1)) - (p(y, x, -1, -1) + 2.0 * p(y, x, 0, -1) + p(y, x, 1, -1))
        });
        let gy = Plane::from_fn(h, w, |y, x| {
            (p(y, x, 1, -1) + 2.0 * p(y, x, 1, 0) + p(y, x, 1, 1)) - (p(y, x, -1, -1) + 2.0 * p(y, x, -1, 0) + p(y, x, -1, 1))
        });
        (gx, gy)
    }
}

/// Normalized 1-D Gaussian taps, radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let r = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| (v / total) as f32).collect()
}
