use crate::autograd::{OpKind, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Window reduction used by [`Var::pool2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pool {
    Max,
    Avg,
}

/// Output extent when a trailing partial window is kept (right/bottom pad).
fn pooled_len(len: usize, k: usize, stride: usize) -> usize {
    if len <= k {
        1
    } else {
        (len - k).div_ceil(stride) + 1
    }
}

/// Align-corners source coordinate: `(index, lower, upper, frac)`.
fn align_corners_taps(out: usize, inp: usize) -> Vec<(usize, usize, f64)> {
    (0..out)
        .map(|o| {
            let src = if out == 1 {
                0.0
            } else {
                o as f64 * (inp - 1) as f64 / (out - 1) as f64
            };
            let lo = (src.floor() as usize).min(inp - 1);
            let hi = (lo + 1).min(inp - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn maxpool2d(self, k: usize, stride: usize) -> Result<Var<'t, T>> {
        self.pool2d(Pool::Max, k, stride)
    }

    pub fn avgpool2d(self, k: usize, stride: usize) -> Result<Var<'t, T>> {
        self.pool2d(Pool::Avg, k, stride)
    }

    /// `k×k` pooling. Windows hanging off the right/bottom edge are kept:
    /// max treats missing cells as −∞, average divides by the in-bounds count.
    pub fn pool2d(self, kind: Pool, k: usize, stride: usize) -> Result<Var<'t, T>> {
        if k == 0 || stride == 0 {
            return Err(Error::InvalidArgument("pool window and stride must be positive".into()));
        }
        let x = self.value();
        let (n, c, h, w) = x.dims4("pool2d")?;
        let (oh, ow) = (pooled_len(h, k, stride), pooled_len(w, k, stride));
        let planes = n * c;
        let mut out = Vec::with_capacity(planes * oh * ow);
        // For max: flat input index of the winner. For avg: window cell count.
        let mut aux: Vec<usize> = Vec::with_capacity(planes * oh * ow);
        for (p, plane) in x.data().chunks(h * w).enumerate() {
            for oy in 0..oh {
                let (y0, y1) = (oy * stride, (oy * stride + k).min(h));
                for ox in 0..ow {
                    let (x0, x1) = (ox * stride, (ox * stride + k).min(w));
                    match kind {
                        Pool::Max => {
                            let mut best = T::neg_infinity();
                            let mut arg = y0 * w + x0;
                            for yy in y0..y1 {
                                for xx in x0..x1 {
                                    let v = plane[yy * w + xx];
                                    if v > best {
                                        best = v;
                                        arg = yy * w + xx;
                                    }
                                }
                            }
                            out.push(best);
                            aux.push(p * h * w + arg);
                        }
                        Pool::Avg => {
                            let mut acc = T::zero();
                            for yy in y0..y1 {
                                for xx in x0..x1 {
                                    acc += plane[yy * w + xx];
                                }
                            }
                            let count = (y1 - y0) * (x1 - x0);
                            out.push(acc / T::from_count(count));
                            aux.push(count);
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![n, c, oh, ow], out)?;
        let op = match kind {
            Pool::Max => OpKind::MaxPool2d,
            Pool::Avg => OpKind::AvgPool2d,
        };
        Ok(self.tape.record(op, &[self], out, move |args| {
            let g = args.grad.data();
            let mut gx = vec![T::zero(); n * c * h * w];
            match kind {
                Pool::Max => {
                    for (&gv, &idx) in g.iter().zip(&aux) {
                        gx[idx] += gv;
                    }
                }
                Pool::Avg => {
                    for p in 0..planes {
                        for oy in 0..oh {
                            let (y0, y1) = (oy * stride, (oy * stride + k).min(h));
                            for ox in 0..ow {
                                let (x0, x1) = (ox * stride, (ox * stride + k).min(w));
                                let o = (p * oh + oy) * ow + ox;
                                let share = g[o] / T::from_count(aux[o]);
                                for yy in y0..y1 {
                                    for xx in x0..x1 {
                                        gx[p * h * w + yy * w + xx] += share;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            vec![Some(Tensor::new(vec![n, c, h, w], gx).expect("shape"))]
        }))
    }

    /// Per-channel spatial mean: `N×C×H×W → N×C`.
    pub fn global_avg_pool(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4("global_avg_pool")?;
        let hw = h * w;
        let count = T::from_count(hw);
        let out: Vec<T> = x
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() / count)
            .collect();
        let out = Tensor::new(vec![n, c], out)?;
        Ok(self.tape.record(OpKind::GlobalAvgPool, &[self], out, move |args| {
            let mut gx = Vec::with_capacity(n * c * hw);
            for &g in args.grad.data() {
                gx.extend(std::iter::repeat(g / count).take(hw));
            }
            vec![Some(Tensor::new(vec![n, c, h, w], gx).expect("shape"))]
        }))
    }

    /// Align-corners bilinear upsampling to `out_h × out_w` (never smaller).
    pub fn bilinear_upsample(self, out_h: usize, out_w: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4("bilinear_upsample")?;
        if out_h < h || out_w < w {
            return Err(Error::invalid_shape(
                "bilinear_upsample",
                format!("cannot downscale {h}x{w} to {out_h}x{out_w}"),
            ));
        }
        if (out_h, out_w) == (h, w) {
            let out = (*x).clone();
            return Ok(self.tape.record(OpKind::BilinearUpsample, &[self], out, |args| {
                vec![Some(args.grad.clone())]
            }));
        }
        let ty: Vec<(usize, usize, T)> = align_corners_taps(out_h, h)
            .into_iter()
            .map(|(a, b, f)| (a, b, T::lit(f)))
            .collect();
        let tx: Vec<(usize, usize, T)> = align_corners_taps(out_w, w)
            .into_iter()
            .map(|(a, b, f)| (a, b, T::lit(f)))
            .collect();
        let mut out = Vec::with_capacity(n * c * out_h * out_w);
        for plane in x.data().chunks(h * w) {
            for &(y0, y1, fy) in &ty {
                for &(x0, x1, fx) in &tx {
                    let top = plane[y0 * w + x0] * (T::one() - fx) + plane[y0 * w + x1] * fx;
                    let bot = plane[y1 * w + x0] * (T::one() - fx) + plane[y1 * w + x1] * fx;
                    out.push(top * (T::one() - fy) + bot * fy);
                }
            }
        }
        let out = Tensor::new(vec![n, c, out_h, out_w], out)?;
        Ok(self.tape.record(OpKind::BilinearUpsample, &[self], out, move |args| {
            let mut gx = vec![T::zero(); n * c * h * w];
            for (gp, gplane) in gx.chunks_mut(h * w).zip(args.grad.data().chunks(out_h * out_w)) {
                let mut o = 0;
                for &(y0, y1, fy) in &ty {
                    for &(x0, x1, fx) in &tx {
                        let g = gplane[o];
                        o += 1;
                        let (gt, gb) = (g * (T::one() - fy), g * fy);
                        gp[y0 * w + x0] += gt * (T::one() - fx);
                        gp[y0 * w + x1] += gt * fx;
                        gp[y1 * w + x0] += gb * (T::one() - fx);
                        gp[y1 * w + x1] += gb * fx;
                    }
                }
            }
            vec![Some(Tensor::new(vec![n, c, h, w], gx).expect("shape"))]
        }))
    }
}
