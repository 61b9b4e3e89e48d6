use crate::autograd::{OpKind, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

/// Running per-channel statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
    /// Number of training batches folded into the running estimates.
    pub tracked: u64,
}

impl<T: Scalar> BatchNormStats<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormStats {
            mean: Tensor::zeros([channels]),
            var: Tensor::ones([channels]),
            tracked: 0,
        }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Per-channel batch normalization over `N, H, W`.
    ///
    /// In train mode the batch statistics normalize the input and the
    /// returned stats are the updated running estimates
    /// (`r ← (1−m)·r + m·batch`, unbiased batch variance). In eval mode the
    /// running estimates are used and `None` is returned.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        self,
        gamma: Var<'t, T>,
        beta: Var<'t, T>,
        running: &BatchNormStats<T>,
        mode: Mode,
        momentum: T,
        eps: T,
        name: &str,
    ) -> Result<(Var<'t, T>, Option<BatchNormStats<T>>)> {
        let x = self.value();
        let (n, c, h, w) = x.dims4("batchnorm2d")?;
        for p in [&gamma, &beta] {
            if p.shape() != [c] {
                return Err(Error::shape("batchnorm2d", x.shape(), &p.shape()));
            }
        }
        let hw = h * w;
        let m = n * hw;
        let (mean, var, updated) = match mode {
            Mode::Train => {
                if m < 2 {
                    return Err(Error::invalid_shape(
                        "batchnorm2d",
                        format!("train mode needs at least 2 values per channel, got {m}"),
                    ));
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for (i, plane) in x.data().chunks(hw).enumerate() {
                    mean[i % c] += plane.iter().copied().sum::<T>();
                }
                let count = T::from_count(m);
                for v in &mut mean {
                    *v /= count;
                }
                for (i, plane) in x.data().chunks(hw).enumerate() {
                    let mu = mean[i % c];
                    var[i % c] += plane.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
                }
                for v in &mut var {
                    *v /= count;
                }
                let unbias = count / T::from_count(m - 1);
                let one_m = T::one() - momentum;
                let next = BatchNormStats {
                    mean: Tensor::from_fn([c], |k| one_m * running.mean.data()[k] + momentum * mean[k]),
                    var: Tensor::from_fn([c], |k| {
                        one_m * running.var.data()[k] + momentum * var[k] * unbias
                    }),
                    tracked: running.tracked + 1,
                };
                (mean, var, Some(next))
            }
            Mode::Eval => {
                if running.tracked == 0 {
                    return Err(Error::UninitializedRunningStats(name.to_string()));
                }
                (running.mean.data().to_vec(), running.var.data().to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, b) = (gamma.value(), beta.value());
        let mut xhat = Vec::with_capacity(x.numel());
        let mut out = Vec::with_capacity(x.numel());
        for (i, plane) in x.data().chunks(hw).enumerate() {
            let k = i % c;
            let (mu, is, gk, bk) = (mean[k], inv_std[k], g.data()[k], b.data()[k]);
            for &v in plane {
                let xh = (v - mu) * is;
                xhat.push(xh);
                out.push(gk * xh + bk);
            }
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        let train = mode == Mode::Train;
        let var_out = self.tape.record(OpKind::BatchNorm2d, &[self, gamma, beta], out, move |args| {
            let gamma = &args.inputs[1];
            let gy = args.grad.data();
            let mut sum_g = vec![T::zero(); c];
            let mut sum_gx = vec![T::zero(); c];
            for (i, (gp, xp)) in gy.chunks(hw).zip(xhat.chunks(hw)).enumerate() {
                let k = i % c;
                for (&gv, &xv) in gp.iter().zip(xp) {
                    sum_g[k] += gv;
                    sum_gx[k] += gv * xv;
                }
            }
            let count = T::from_count(m);
            let mut gx = Vec::with_capacity(gy.len());
            for (i, (gp, xp)) in gy.chunks(hw).zip(xhat.chunks(hw)).enumerate() {
                let k = i % c;
                let scale = gamma.data()[k] * inv_std[k];
                if train {
                    let (mg, mgx) = (sum_g[k] / count, sum_gx[k] / count);
                    gx.extend(gp.iter().zip(xp).map(|(&gv, &xv)| scale * (gv - mg - xv * mgx)));
                } else {
                    gx.extend(gp.iter().map(|&gv| scale * gv));
                }
            }
            vec![
                Some(Tensor::new(vec![n, c, h, w], gx).expect("shape")),
                Some(Tensor::new(vec![c], sum_gx).expect("shape")),
                Some(Tensor::new(vec![c], sum_g).expect("shape")),
            ]
        });
        Ok((var_out, updated))
    }
}
