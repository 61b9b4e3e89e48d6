use crate::error::{Error, Result};

use super::{Scalar, Tensor};

/// Integer class map of one image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::invalid_shape(
                "LabelMap::new",
                format!("{height}x{width} needs {} labels, got {}", height * width, data.len()),
            ));
        }
        Ok(LabelMap { height, width, data })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        LabelMap {
            height,
            width,
            data: vec![label; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn max_label(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// Labels from a tensor holding integral values (any leading unit dims).
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, classes: usize) -> Result<Self> {
        let s = t.shape();
        if s.len() < 2 || s[..s.len() - 2].iter().any(|&d| d != 1) {
            return Err(Error::invalid_shape("LabelMap::from_tensor", format!("expected [..1, H, W], got {s:?}")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let data = t
            .data()
            .iter()
            .map(|&v| {
                let f = v.as_f64();
                if f.fract() != 0.0 || f < 0.0 || f >= classes as f64 {
                    Err(Error::Data(format!("label value {f} outside [0, {classes})")))
                } else {
                    Ok(f as u8)
                }
            })
            .collect::<Result<_>>()?;
        LabelMap::new(h, w, data)
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn([1, self.height, self.width], |i| T::from_count(self.data[i] as usize))
    }

    /// Binary mask of class `k`.
    pub fn mask(&self, k: u8) -> Vec<bool> {
        self.data.iter().map(|&v| v == k).collect()
    }

    /// `N×K×H×W` one-hot encoding of a batch of equally sized maps.
    pub fn one_hot<T: Scalar>(maps: &[LabelMap], classes: usize) -> Result<Tensor<T>> {
        let first = maps
            .first()
            .ok_or_else(|| Error::InvalidArgument("one_hot of zero label maps".into()))?;
        let (h, w) = (first.height, first.width);
        let hw = h * w;
        let mut out = vec![T::zero(); maps.len() * classes * hw];
        for (n, m) in maps.iter().enumerate() {
            if (m.height, m.width) != (h, w) {
                return Err(Error::shape("one_hot", &[h, w], &[m.height, m.width]));
            }
            for (i, &k) in m.data.iter().enumerate() {
                if k as usize >= classes {
                    return Err(Error::Data(format!("label {k} outside [0, {classes})")));
                }
                out[(n * classes + k as usize) * hw + i] = T::one();
            }
        }
        Tensor::new([maps.len(), classes, h, w], out)
    }

    /// Per-pixel argmax over channels of sample `n` of an `N×K×H×W` tensor.
    pub fn argmax<T: Scalar>(scores: &Tensor<T>, n: usize) -> Result<LabelMap> {
        let (_, k, h, w) = scores.dims4("argmax")?;
        let hw = h * w;
        let mut best = vec![0u8; hw];
        let mut best_v = scores.plane(n, 0).to_vec();
        for c in 1..k {
            for (i, &v) in scores.plane(n, c).iter().enumerate() {
                if v > best_v[i] {
                    best_v[i] = v;
                    best[i] = c as u8;
                }
            }
        }
        LabelMap::new(h, w, best)
    }

    /// Inner class boundary: a non-background pixel with a 4-neighbour of a
    /// different label. With `dilate`, the 4-neighbourhood of every boundary
    /// pixel is added.
    pub fn boundary(&self, dilate: bool) -> Vec<bool> {
        let (h, w) = (self.height, self.width);
        let mut out = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                let v = self.get(y, x);
                if v == 0 {
                    continue;
                }
                let differs = (y > 0 && self.get(y - 1, x) != v)
                    || (y + 1 < h && self.get(y + 1, x) != v)
                    || (x > 0 && self.get(y, x - 1) != v)
                    || (x + 1 < w && self.get(y, x + 1) != v);
                out[y * w + x] = differs;
            }
        }
        if dilate {
            let base = out.clone();
            for y in 0..h {
                for x in 0..w {
                    if base[y * w + x] {
                        if y > 0 {
                            out[(y - 1) * w + x] = true;
                        }
                        if y + 1 < h {
                            out[(y + 1) * w + x] = true;
                        }
                        if x > 0 {
                            out[y * w + x - 1] = true;
                        }
                        if x + 1 < w {
                            out[y * w + x + 1] = true;
                        }
                    }
                }
            }
        }
        out
    }
}
