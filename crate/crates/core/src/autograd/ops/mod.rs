//! Differentiable primitives, implemented as methods on [`Var`].

mod conv;
mod linear;
mod norm;
mod pool;

pub use conv::{col2im, im2col, ConvGeometry};
pub use norm::{BatchNormStats, Mode};
pub use pool::Pool;

use super::{OpKind, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// How the right operand of a binary op lines up with the left one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Broadcast {
    Same,
    /// Right operand has a single element.
    Scalar,
    /// Left is `N×C×H×W`, right is `N×1×H×W`, repeated over channels.
    ChannelStack,
}

impl Broadcast {
    pub fn resolve(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        if a == b {
            return Ok(Broadcast::Same);
        }
        if b.iter().product::<usize>() == 1 {
            return Ok(Broadcast::Scalar);
        }
        if let ([n, _, h, w], [n2, 1, h2, w2]) = (a, b) {
            if n == n2 && h == h2 && w == w2 {
                return Ok(Broadcast::ChannelStack);
            }
        }
        Err(Error::shape(op, a, b))
    }
}

/// Applies `f(a_i, b_j)` where `j` is the broadcast partner of `i`.
fn broadcast_zip<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    mode: Broadcast,
    f: impl Fn(T, T) -> T,
) -> Tensor<T> {
    let ad = a.data();
    let bd = b.data();
    let out = match mode {
        Broadcast::Same => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
        Broadcast::Scalar => {
            let y = bd[0];
            ad.iter().map(|&x| f(x, y)).collect()
        }
        Broadcast::ChannelStack => {
            let s = a.shape();
            let (c, hw) = (s[1], s[2] * s[3]);
            let mut out = Vec::with_capacity(ad.len());
            for (n, sample) in ad.chunks(c * hw).enumerate() {
                let map = &bd[n * hw..(n + 1) * hw];
                for plane in sample.chunks(hw) {
                    out.extend(plane.iter().zip(map).map(|(&x, &y)| f(x, y)));
                }
            }
            out
        }
    };
    Tensor::new(a.shape().to_vec(), out).expect("broadcast preserves shape")
}

/// Sums a left-shaped tensor down to the right operand's shape.
fn reduce_to<T: Scalar>(g: Tensor<T>, b_shape: &[usize], mode: Broadcast) -> Tensor<T> {
    match mode {
        Broadcast::Same => g,
        Broadcast::Scalar => Tensor::full(b_shape.to_vec(), g.sum()),
        Broadcast::ChannelStack => sum_channels(&g),
    }
}

fn sum_channels<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let s = g.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let mut out = vec![T::zero(); n * hw];
    for (i, sample) in g.data().chunks(c * hw).enumerate() {
        let acc = &mut out[i * hw..(i + 1) * hw];
        for plane in sample.chunks(hw) {
            for (o, &v) in acc.iter_mut().zip(plane) {
                *o += v;
            }
        }
    }
    Tensor::new(vec![n, 1, s[2], s[3]], out).expect("channel sum shape")
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    sigmoid(x)
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let mode = Broadcast::resolve("add", a.shape(), b.shape())?;
        let out = broadcast_zip(&a, &b, mode, |x, y| x + y);
        let b_shape = b.shape().to_vec();
        Ok(self.tape.record(OpKind::Add, &[self, other], out, move |args| {
            vec![
                Some(args.grad.clone()),
                Some(reduce_to(args.grad.clone(), &b_shape, mode)),
            ]
        }))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let mode = Broadcast::resolve("sub", a.shape(), b.shape())?;
        let out = broadcast_zip(&a, &b, mode, |x, y| x - y);
        let b_shape = b.shape().to_vec();
        Ok(self.tape.record(OpKind::Sub, &[self, other], out, move |args| {
            vec![
                Some(args.grad.clone()),
                Some(reduce_to(args.grad.map(|v| -v), &b_shape, mode)),
            ]
        }))
    }

    /// Hadamard product; `other` may be a scalar or a channel-stacked map.
    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let mode = Broadcast::resolve("mul", a.shape(), b.shape())?;
        let out = broadcast_zip(&a, &b, mode, |x, y| x * y);
        let b_shape = b.shape().to_vec();
        Ok(self.tape.record(OpKind::Mul, &[self, other], out, move |args| {
            let (a, b) = (&args.inputs[0], &args.inputs[1]);
            let ga = broadcast_zip(args.grad, b, mode, |g, y| g * y);
            let gab = args.grad.zip_map(a, |g, x| g * x).expect("same shape");
            vec![Some(ga), Some(reduce_to(gab, &b_shape, mode))]
        }))
    }

    pub fn scale(self, factor: T) -> Var<'t, T> {
        let out = self.value().map(|v| v * factor);
        self.tape.record(OpKind::Scale, &[self], out, move |args| {
            vec![Some(args.grad.map(|g| g * factor))]
        })
    }

    pub fn add_scalar(self, c: T) -> Var<'t, T> {
        let out = self.value().map(|v| v + c);
        self.tape
            .record(OpKind::AddScalar, &[self], out, |args| vec![Some(args.grad.clone())])
    }

    /// Gradient passes where `lo <= x <= hi`.
    pub fn clamp(self, lo: T, hi: T) -> Var<'t, T> {
        let out = self.value().map(|v| v.max(lo).min(hi));
        self.tape.record(OpKind::Clamp, &[self], out, move |args| {
            let g = args
                .grad
                .zip_map(&args.inputs[0], |g, x| if x >= lo && x <= hi { g } else { T::zero() })
                .expect("same shape");
            vec![Some(g)]
        })
    }

    pub fn relu(self) -> Var<'t, T> {
        let out = self.value().map(|v| v.max(T::zero()));
        self.tape.record(OpKind::Relu, &[self], out, |args| {
            let g = args
                .grad
                .zip_map(&args.inputs[0], |g, x| if x > T::zero() { g } else { T::zero() })
                .expect("same shape");
            vec![Some(g)]
        })
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        let out = self.value().map(sigmoid);
        self.tape.record(OpKind::Sigmoid, &[self], out, |args| {
            let g = args
                .grad
                .zip_map(args.output, |g, y| g * y * (T::one() - y))
                .expect("same shape");
            vec![Some(g)]
        })
    }

    /// Softmax over the channel axis of an `N×C×H×W` tensor, per pixel.
    pub fn softmax_channels(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4("softmax_channels")?;
        let hw = h * w;
        let mut out = vec![T::zero(); x.numel()];
        let xd = x.data();
        for b in 0..n {
            let base = b * c * hw;
            for p in 0..hw {
                let mut m = T::neg_infinity();
                for k in 0..c {
                    m = m.max(xd[base + k * hw + p]);
                }
                let mut z = T::zero();
                for k in 0..c {
                    let e = (xd[base + k * hw + p] - m).exp();
                    out[base + k * hw + p] = e;
                    z += e;
                }
                for k in 0..c {
                    out[base + k * hw + p] /= z;
                }
            }
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.tape.record(OpKind::SoftmaxChannels, &[self], out, move |args| {
            let y = args.output.data();
            let g = args.grad.data();
            let mut gx = vec![T::zero(); y.len()];
            for b in 0..n {
                let base = b * c * hw;
                for p in 0..hw {
                    let mut dot = T::zero();
                    for k in 0..c {
                        let i = base + k * hw + p;
                        dot += g[i] * y[i];
                    }
                    for k in 0..c {
                        let i = base + k * hw + p;
                        gx[i] = y[i] * (g[i] - dot);
                    }
                }
            }
            vec![Some(Tensor::new(args.output.shape().to_vec(), gx).expect("shape"))]
        }))
    }

    pub fn sum(self) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = Tensor::scalar(x.sum());
        self.tape.record(OpKind::Sum, &[self], out, move |args| {
            vec![Some(Tensor::full(shape.clone(), args.grad.item()))]
        })
    }

    pub fn mean(self) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let count = T::from_count(x.numel().max(1));
        let out = Tensor::scalar(x.sum() / count);
        self.tape.record(OpKind::Mean, &[self], out, move |args| {
            vec![Some(Tensor::full(shape.clone(), args.grad.item() / count))]
        })
    }

    /// Concatenates 4-D tensors along the channel axis.
    pub fn concat_channels(xs: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = xs
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_channels of zero tensors".into()))?;
        let values: Vec<_> = xs.iter().map(|v| v.value()).collect();
        let (n, _, h, w) = values[0].dims4("concat_channels")?;
        let mut channels = Vec::with_capacity(xs.len());
        for v in &values {
            let (n2, c2, h2, w2) = v.dims4("concat_channels")?;
            if (n2, h2, w2) != (n, h, w) {
                return Err(Error::shape("concat_channels", values[0].shape(), v.shape()));
            }
            channels.push(c2);
        }
        let hw = h * w;
        let total: usize = channels.iter().sum();
        let mut out = Vec::with_capacity(n * total * hw);
        for b in 0..n {
            for (v, &c) in values.iter().zip(&channels) {
                out.extend_from_slice(&v.data()[b * c * hw..(b + 1) * c * hw]);
            }
        }
        let out = Tensor::new(vec![n, total, h, w], out)?;
        Ok(first.tape.record(OpKind::ConcatChannels, xs, out, move |args| {
            let g = args.grad.data();
            let mut grads: Vec<Vec<T>> = channels.iter().map(|&c| Vec::with_capacity(n * c * hw)).collect();
            for b in 0..n {
                let mut offset = b * total * hw;
                for (dst, &c) in grads.iter_mut().zip(&channels) {
                    dst.extend_from_slice(&g[offset..offset + c * hw]);
                    offset += c * hw;
                }
            }
            grads
                .into_iter()
                .zip(&channels)
                .map(|(d, &c)| Some(Tensor::new(vec![n, c, h, w], d).expect("shape")))
                .collect()
        }))
    }

    /// Repeats a single-channel map `copies` times along the channel axis.
    pub fn stack_channels(self, copies: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4("stack_channels")?;
        if c != 1 || copies == 0 {
            return Err(Error::invalid_shape(
                "stack_channels",
                format!("need a 1-channel input and copies > 0, got {:?} x{copies}", x.shape()),
            ));
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * copies * hw);
        for plane in x.data().chunks(hw) {
            for _ in 0..copies {
                out.extend_from_slice(plane);
            }
        }
        let out = Tensor::new(vec![n, copies, h, w], out)?;
        Ok(self.tape.record(OpKind::StackChannels, &[self], out, |args| {
            vec![Some(sum_channels(args.grad))]
        }))
    }

    /// Multiplies every channel of `N×C×H×W` by the matching entry of `N×C`.
    pub fn scale_channels(self, scales: Var<'t, T>) -> Result<Var<'t, T>> {
        let (x, s) = (self.value(), scales.value());
        let (n, c, h, w) = x.dims4("scale_channels")?;
        if s.shape() != [n, c] {
            return Err(Error::shape("scale_channels", x.shape(), s.shape()));
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(x.numel());
        for (plane, &f) in x.data().chunks(hw).zip(s.data()) {
            out.extend(plane.iter().map(|&v| v * f));
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.tape.record(OpKind::ScaleChannels, &[self, scales], out, move |args| {
            let (x, s) = (&args.inputs[0], &args.inputs[1]);
            let g = args.grad.data();
            let mut gx = Vec::with_capacity(g.len());
            let mut gs = Vec::with_capacity(n * c);
            for ((gp, xp), &f) in g.chunks(hw).zip(x.data().chunks(hw)).zip(s.data()) {
                gx.extend(gp.iter().map(|&v| v * f));
                gs.push(gp.iter().zip(xp).map(|(&a, &b)| a * b).sum());
            }
            vec![
                Some(Tensor::new(vec![n, c, h, w], gx).expect("shape")),
                Some(Tensor::new(vec![n, c], gs).expect("shape")),
            ]
        }))
    }
}
