use crate::autograd::{OpKind, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

/// Spatial geometry of a (possibly strided, padded) 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `[lo, hi)` whose tap at kernel offset `k` lands inside
/// an input line of length `len`.
fn valid_range(k: usize, len: usize, out: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if len + pad > k { (len + pad - k).div_ceil(stride).min(out) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfolds one `C×H×W` image into a `(C·kh·kw) × (Ho·Wo)` patch matrix.
pub fn im2col<T: Scalar>(img: &[T], g: &ConvGeometry, col: &mut [T]) {
    let (oh, ow, s) = (g.out_h(), g.out_w(), g.stride);
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            let (ylo, yhi) = valid_range(ki, g.height, oh, s, g.pad);
            for kj in 0..g.kw {
                let (xlo, xhi) = valid_range(kj, g.width, ow, s, g.pad);
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                dst[..ylo * ow].fill(T::zero());
                dst[yhi * ow..].fill(T::zero());
                for oy in ylo..yhi {
                    let y = oy * s + ki - g.pad;
                    let src = &plane[y * g.width..(y + 1) * g.width];
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    line[..xlo].fill(T::zero());
                    line[xhi..].fill(T::zero());
                    if xlo == xhi {
                        continue;
                    }
                    let x0 = xlo * s + kj - g.pad;
                    if s == 1 {
                        line[xlo..xhi].copy_from_slice(&src[x0..x0 + (xhi - xlo)]);
                    } else {
                        for (d, &v) in line[xlo..xhi].iter_mut().zip(src[x0..].iter().step_by(s)) {
                            *d = v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates patch columns back into an image.
pub fn col2im<T: Scalar>(col: &[T], g: &ConvGeometry, img: &mut [T]) {
    let (oh, ow, s) = (g.out_h(), g.out_w(), g.stride);
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            let (ylo, yhi) = valid_range(ki, g.height, oh, s, g.pad);
            for kj in 0..g.kw {
                let (xlo, xhi) = valid_range(kj, g.width, ow, s, g.pad);
                let src = &col[row * oh * ow..(row + 1) * oh * ow];
                row += 1;
                if xlo == xhi {
                    continue;
                }
                for oy in ylo..yhi {
                    let y = oy * s + ki - g.pad;
                    let dst = &mut plane[y * g.width..(y + 1) * g.width];
                    let line = &src[oy * ow + xlo..oy * ow + xhi];
                    let x0 = xlo * s + kj - g.pad;
                    if s == 1 {
                        for (d, &v) in dst[x0..x0 + line.len()].iter_mut().zip(line) {
                            *d += v;
                        }
                    } else {
                        for (d, &v) in dst[x0..].iter_mut().step_by(s).zip(line) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias) {
        for v in chunk {
            *v += b;
        }
    }
}

fn bias_grad<T: Scalar>(g: &Tensor<T>, channels: usize) -> Tensor<T> {
    let s = g.shape();
    let hw = s[2] * s[3];
    let mut gb = vec![T::zero(); channels];
    for (i, plane) in g.data().chunks(hw).enumerate() {
        gb[i % channels] += plane.iter().copied().sum::<T>();
    }
    Tensor::new(vec![channels], gb).expect("bias shape")
}

fn check_bias<T: Scalar>(op: &'static str, bias: Option<&Var<'_, T>>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        let s = b.shape();
        if s != [channels] {
            return Err(Error::shape(op, &[channels], &s));
        }
    }
    Ok(())
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Cross-correlation of `N×Cin×H×W` input with `Cout×Cin×kh×kw` weights.
    pub fn conv2d(
        self,
        weight: Var<'t, T>,
        bias: Option<Var<'t, T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t, T>> {
        let (x, w) = (self.value(), weight.value());
        let (n, cin, h, wd) = x.dims4("conv2d")?;
        let (cout, wcin, kh, kw) = w.dims4("conv2d")?;
        if wcin != cin {
            return Err(Error::shape("conv2d", x.shape(), w.shape()));
        }
        if stride == 0 || kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(Error::invalid_shape(
                "conv2d",
                format!("kernel {kh}x{kw} stride {stride} pad {pad} does not fit input {h}x{wd}"),
            ));
        }
        check_bias("conv2d", bias.as_ref(), cout)?;
        let geom = ConvGeometry {
            channels: cin,
            height: h,
            width: wd,
            kh,
            kw,
            stride,
            pad,
        };
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let mut out = vec![T::zero(); n * cout * oh * ow];
        let mut col = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * cols] };
        let in_per = cin * h * wd;
        let out_per = cout * oh * ow;
        for b in 0..n {
            let img = &x.data()[b * in_per..(b + 1) * in_per];
            let patches: &[T] = if geom.is_pointwise() {
                img
            } else {
                im2col(img, &geom, &mut col);
                &col
            };
            gemm(
                MatRef::new(w.data(), cout, rows),
                MatRef::new(patches, rows, cols),
                &mut out[b * out_per..(b + 1) * out_per],
                false,
            );
        }
        if let Some(bv) = bias.as_ref() {
            let bias_val = bv.value();
            for sample in out.chunks_mut(out_per) {
                add_bias(sample, bias_val.data(), oh * ow);
            }
        }
        let out = Tensor::new(vec![n, cout, oh, ow], out)?;
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        let has_bias = bias.is_some();
        Ok(self.tape.record(OpKind::Conv2d, &inputs, out, move |args| {
            let (x, w) = (&args.inputs[0], &args.inputs[1]);
            let g = args.grad.data();
            let mut gx = vec![T::zero(); x.numel()];
            let mut gw = vec![T::zero(); w.numel()];
            let mut col = vec![T::zero(); rows * cols];
            let mut gcol = vec![T::zero(); rows * cols];
            for b in 0..n {
                let img = &x.data()[b * in_per..(b + 1) * in_per];
                let gout = &g[b * out_per..(b + 1) * out_per];
                let patches: &[T] = if geom.is_pointwise() {
                    img
                } else {
                    im2col(img, &geom, &mut col);
                    &col
                };
                // dW += dY · colᵀ
                gemm(
                    MatRef::new(gout, cout, cols),
                    MatRef::new(patches, rows, cols).t(),
                    &mut gw,
                    true,
                );
                // dcol = Wᵀ · dY
                let gimg = &mut gx[b * in_per..(b + 1) * in_per];
                if geom.is_pointwise() {
                    gemm(MatRef::new(w.data(), cout, rows).t(), MatRef::new(gout, cout, cols), gimg, false);
                } else {
                    gemm(
                        MatRef::new(w.data(), cout, rows).t(),
                        MatRef::new(gout, cout, cols),
                        &mut gcol,
                        false,
                    );
                    col2im(&gcol, &geom, gimg);
                }
            }
            let mut grads = vec![
                Some(Tensor::new(x.shape().to_vec(), gx).expect("shape")),
                Some(Tensor::new(w.shape().to_vec(), gw).expect("shape")),
            ];
            if has_bias {
                grads.push(Some(bias_grad(args.grad, cout)));
            }
            grads
        }))
    }

    /// Transposed convolution with `Cin×Cout×kh×kw` weights and no padding;
    /// output extent is `(H−1)·stride + kh`. It is the adjoint (input
    /// gradient) of `conv2d` with the same weights and stride.
    pub fn transpose_conv2d(
        self,
        weight: Var<'t, T>,
        bias: Option<Var<'t, T>>,
        stride: usize,
    ) -> Result<Var<'t, T>> {
        if !(1..=2).contains(&stride) {
            return Err(Error::InvalidArgument(format!(
                "transpose_conv2d supports stride 1 or 2, got {stride}"
            )));
        }
        let (x, w) = (self.value(), weight.value());
        let (n, cin, h, wd) = x.dims4("transpose_conv2d")?;
        let (wcin, cout, kh, kw) = w.dims4("transpose_conv2d")?;
        if wcin != cin {
            return Err(Error::shape("transpose_conv2d", x.shape(), w.shape()));
        }
        check_bias("transpose_conv2d", bias.as_ref(), cout)?;
        let (oh, ow) = ((h - 1) * stride + kh, (wd - 1) * stride + kw);
        // The geometry of the forward conv that maps the output back to the input.
        let geom = ConvGeometry {
            channels: cout,
            height: oh,
            width: ow,
            kh,
            kw,
            stride,
            pad: 0,
        };
        debug_assert_eq!((geom.out_h(), geom.out_w()), (h, wd));
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let in_per = cin * h * wd;
        let out_per = cout * oh * ow;
        let mut out = vec![T::zero(); n * out_per];
        let mut col = vec![T::zero(); rows * cols];
        for b in 0..n {
            gemm(
                MatRef::new(w.data(), cin, rows).t(),
                MatRef::new(&x.data()[b * in_per..(b + 1) * in_per], cin, cols),
                &mut col,
                false,
            );
            col2im(&col, &geom, &mut out[b * out_per..(b + 1) * out_per]);
        }
        if let Some(bv) = bias.as_ref() {
            let bias_val = bv.value();
            for sample in out.chunks_mut(out_per) {
                add_bias(sample, bias_val.data(), oh * ow);
            }
        }
        let out = Tensor::new(vec![n, cout, oh, ow], out)?;
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        let has_bias = bias.is_some();
        Ok(self.tape.record(OpKind::TransposeConv2d, &inputs, out, move |args| {
            let (x, w) = (&args.inputs[0], &args.inputs[1]);
            let g = args.grad.data();
            let mut gx = vec![T::zero(); x.numel()];
            let mut gw = vec![T::zero(); w.numel()];
            let mut col = vec![T::zero(); rows * cols];
            for b in 0..n {
                im2col(&g[b * out_per..(b + 1) * out_per], &geom, &mut col);
                let xin = &x.data()[b * in_per..(b + 1) * in_per];
                // dX = W · col(dY)
                gemm(
                    MatRef::new(w.data(), cin, rows),
                    MatRef::new(&col, rows, cols),
                    &mut gx[b * in_per..(b + 1) * in_per],
                    false,
                );
                // dW += X · col(dY)ᵀ
                gemm(MatRef::new(xin, cin, cols), MatRef::new(&col, rows, cols).t(), &mut gw, true);
            }
            let mut grads = vec![
                Some(Tensor::new(x.shape().to_vec(), gx).expect("shape")),
                Some(Tensor::new(w.shape().to_vec(), gw).expect("shape")),
            ];
            if has_bias {
                grads.push(Some(bias_grad(args.grad, cout)));
            }
            grads
        }))
    }
}
