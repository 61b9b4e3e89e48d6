use serde::{Deserialize, Serialize};

use crate::autograd::{OpKind, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Probabilities are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;
/// Soft Dice smoothing on numerator and denominator.
pub const DICE_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.lambda1, self.lambda2, self.lambda3];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and ≥ 0, got {w:?}")));
        }
        if w.iter().all(|&v| v == 0.0) {
            return Err(Error::Config("loss weights are all zero".into()));
        }
        Ok(())
    }
}

fn softmax_pixels<T: Scalar>(z: &Tensor<T>) -> Vec<T> {
    let s = z.shape();
    let (k, hw) = (s[1], s[2] * s[3]);
    let mut p = vec![T::zero(); z.numel()];
    for (n, sample) in z.data().chunks(k * hw).enumerate() {
        let out = &mut p[n * k * hw..(n + 1) * k * hw];
        for i in 0..hw {
            let m = (0..k).map(|c| sample[c * hw + i]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for c in 0..k {
                let e = (sample[c * hw + i] - m).exp();
                out[c * hw + i] = e;
                total += e;
            }
            for c in 0..k {
                out[c * hw + i] /= total;
            }
        }
    }
    p
}

fn clamp_mask<T: Scalar>(p: T) -> (T, bool) {
    let lo = T::lit(PROB_CLAMP);
    let hi = T::one() - lo;
    if p < lo {
        (lo, false)
    } else if p > hi {
        (hi, false)
    } else {
        (p, true)
    }
}

/// Mean over pixels of `−Σ_k y_k log ŷ_k`, with `ŷ` the clamped channel
/// softmax of `logits`.
pub fn cross_entropy<'t, T: Scalar>(logits: Var<'t, T>, target: &Tensor<T>) -> Result<Var<'t, T>> {
    let z = logits.value();
    let (n, k, h, w) = z.dims4("cross_entropy")?;
    if target.shape() != z.shape() {
        return Err(Error::shape("cross_entropy", z.shape(), target.shape()));
    }
    let hw = h * w;
    let pixels = T::from_count(n * hw);
    let p = softmax_pixels(&z);
    // Reductions accumulate in f64 so f32 losses keep full precision.
    let mut loss = 0.0f64;
    for (&pv, &y) in p.iter().zip(target.data()) {
        if y != T::zero() {
            loss -= (y * clamp_mask(pv).0.ln()).as_f64();
        }
    }
    let target = target.clone();
    let out = Tensor::scalar(T::lit(loss / (n * hw) as f64));
    Ok(logits.tape().record(OpKind::CrossEntropy, &[logits], out, move |args| {
        let up = args.grad.item() / pixels;
        let y = target.data();
        // dL/dŷ, zero where the clamp is active, then through the softmax.
        let g: Vec<T> = p
            .iter()
            .zip(y)
            .map(|(&pv, &yv)| match clamp_mask(pv) {
                (c, true) => -yv / c,
                _ => T::zero(),
            })
            .collect();
        let mut gz = vec![T::zero(); p.len()];
        for s in 0..n {
            let base = s * k * hw;
            for i in 0..hw {
                let dot: T = (0..k).map(|c| p[base + c * hw + i] * g[base + c * hw + i]).sum();
                for c in 0..k {
                    let j = base + c * hw + i;
                    gz[j] = up * p[j] * (g[j] - dot);
                }
            }
        }
        vec![Some(Tensor::new(vec![n, k, h, w], gz).expect("shape"))]
    }))
}

/// `1 − (1/K) Σ_k (2 Σ yŷ + ε) / (Σ y + Σ ŷ + ε)`, classes pooled over the batch.
pub fn dice_loss<'t, T: Scalar>(probs: Var<'t, T>, target: &Tensor<T>) -> Result<Var<'t, T>> {
    let p = probs.value();
    let (n, k, h, w) = p.dims4("dice_loss")?;
    if target.shape() != p.shape() {
        return Err(Error::shape("dice_loss", p.shape(), target.shape()));
    }
    let hw = h * w;
    let eps = T::lit(DICE_EPS);
    let mut inter = vec![0.0f64; k];
    let mut total = vec![0.0f64; k];
    for (i, (pp, yp)) in p.data().chunks(hw).zip(target.data().chunks(hw)).enumerate() {
        let c = i % k;
        for (&pv, &yv) in pp.iter().zip(yp) {
            inter[c] += (pv * yv).as_f64();
            total[c] += (pv + yv).as_f64();
        }
    }
    let inter: Vec<T> = inter.into_iter().map(T::lit).collect();
    let total: Vec<T> = total.into_iter().map(T::lit).collect();
    let kk = T::from_count(k);
    let score: T = (0..k).map(|c| (T::lit(2.0) * inter[c] + eps) / (total[c] + eps)).sum();
    let out = Tensor::scalar(T::one() - score / kk);
    let target = target.clone();
    Ok(probs.tape().record(OpKind::DiceLoss, &[probs], out, move |args| {
        let up = args.grad.item();
        let two = T::lit(2.0);
        let mut g = Vec::with_capacity(n * k * hw);
        for (i, yp) in target.data().chunks(hw).enumerate() {
            let c = i % k;
            let den = total[c] + eps;
            let num = two * inter[c] + eps;
            g.extend(yp.iter().map(|&yv| -up / kk * (two * yv * den - num) / (den * den)));
        }
        vec![Some(Tensor::new(vec![n, k, h, w], g).expect("shape"))]
    }))
}

/// Pixel-mean binary cross entropy of `sigmoid(logits)` against a `{0,1}` map.
pub fn edge_bce<'t, T: Scalar>(logits: Var<'t, T>, target: &Tensor<T>) -> Result<Var<'t, T>> {
    let z = logits.value();
    if target.shape() != z.shape() {
        return Err(Error::shape("edge_bce", z.shape(), target.shape()));
    }
    if target.data().iter().any(|&v| v != T::zero() && v != T::one()) {
        return Err(Error::Data("edge ground truth must be binary".into()));
    }
    let count = T::from_count(z.numel());
    let p: Vec<T> = z.data().iter().map(|&v| sigmoid(v)).collect();
    let mut loss = 0.0f64;
    for (&pv, &y) in p.iter().zip(target.data()) {
        let c = clamp_mask(pv).0;
        loss -= (y * c.ln() + (T::one() - y) * (T::one() - c).ln()).as_f64();
    }
    let target = target.clone();
    let shape = z.shape().to_vec();
    let out = Tensor::scalar(T::lit(loss / z.numel() as f64));
    Ok(logits.tape().record(OpKind::EdgeBce, &[logits], out, move |args| {
        let up = args.grad.item() / count;
        let g = p
            .iter()
            .zip(target.data())
            .map(|(&pv, &y)| match clamp_mask(pv) {
                (c, true) => up * -(y / c - (T::one() - y) / (T::one() - c)) * pv * (T::one() - pv),
                _ => T::zero(),
            })
            .collect();
        vec![Some(Tensor::new(shape.clone(), g).expect("shape"))]
    }))
}

fn sigmoid<T: Scalar>(x: T) -> T {
    crate::autograd::sigmoid_scalar(x)
}

/// `λ1·CE + λ2·Dice + λ3·Edge`; a missing edge term counts as zero.
pub fn total_loss<'t, T: Scalar>(
    ce: Var<'t, T>,
    dice: Var<'t, T>,
    edge: Option<Var<'t, T>>,
    w: &LossWeights,
) -> Result<Var<'t, T>> {
    let mut total = ce.scale(T::lit(w.lambda1)).add(dice.scale(T::lit(w.lambda2)))?;
    if let Some(e) = edge {
        total = total.add(e.scale(T::lit(w.lambda3)))?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::gradcheck::{grad_check, grad_check_many};
    use crate::tensor::LabelMap;
    use crate::test_util::{rand_tensor, SplitMix};

    fn labels(h: usize, w: usize, seed: u64, k: u8) -> LabelMap {
        let mut rng = SplitMix::new(seed);
        LabelMap::new(h, w, (0..h * w).map(|_| (rng.uniform(0.0, k as f64) as u8).min(k - 1)).collect()).unwrap()
    }

    #[test]
    fn ce_uniform_is_log_k() {
        let tape = Tape::<f64>::new();
        let y = LabelMap::one_hot(&[labels(4, 4, 1, 4)], 4).unwrap();
        let ce = cross_entropy(tape.constant(Tensor::full([1, 4, 4, 4], 0.3)), &y).unwrap();
        assert!((ce.item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_perfect_is_near_zero() {
        let tape = Tape::<f64>::new();
        let y = LabelMap::one_hot::<f64>(&[labels(3, 3, 2, 3)], 3).unwrap();
        let ce = cross_entropy(tape.constant(y.map(|v| 40.0 * v)), &y).unwrap();
        assert!(ce.item() >= 0.0 && ce.item() < 1e-6);
    }

    #[test]
    fn ce_matches_scalar_evaluation() {
        let z = [0.3, -1.2, 0.8, 2.0, -0.4, 0.9, 0.1, -0.7];
        let lab = [0u8, 1, 1, 0];
        let tape = Tape::<f64>::new();
        let y = LabelMap::one_hot(&[LabelMap::new(2, 2, lab.to_vec()).unwrap()], 2).unwrap();
        let ce = cross_entropy(tape.constant(Tensor::new([1, 2, 2, 2], z.to_vec()).unwrap()), &y).unwrap();
        let mut want = 0.0;
        for i in 0..4 {
            let (a, b) = (z[i], z[4 + i]);
            let p1 = a.exp() / (a.exp() + b.exp());
            want -= if lab[i] == 0 { p1.ln() } else { (1.0 - p1).ln() };
        }
        assert!((ce.item() - want / 4.0).abs() < 1e-14);
    }

    #[test]
    fn dice_examples() {
        let tape = Tape::<f64>::new();
        // Binary: class 1 present on two of four pixels, prediction 0.5 everywhere.
        let y = Tensor::new([1, 1, 2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let d = dice_loss(tape.constant(Tensor::full([1, 1, 2, 2], 0.5)), &y).unwrap();
        assert!((d.item() - (1.0 - (2.0 + 1e-6) / (4.0 + 1e-6))).abs() < 1e-15);

        let y = LabelMap::one_hot::<f64>(&[LabelMap::new(2, 2, vec![0, 1, 2, 3]).unwrap()], 4).unwrap();
        assert!(dice_loss(tape.constant(y.clone()), &y).unwrap().item().abs() < 1e-5);
        let disjoint = LabelMap::one_hot::<f64>(&[LabelMap::new(2, 2, vec![1, 2, 3, 0]).unwrap()], 4).unwrap();
        assert!((dice_loss(tape.constant(disjoint), &y).unwrap().item() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn edge_bce_examples() {
        let tape = Tape::<f64>::new();
        let y = Tensor::new([1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let zero = edge_bce(tape.constant(Tensor::zeros([1, 1, 2, 2])), &y).unwrap();
        assert!((zero.item() - 2f64.ln()).abs() < 1e-14);
        let perfect = edge_bce(tape.constant(y.map(|v| if v > 0.5 { 30.0 } else { -30.0 })), &y).unwrap();
        assert!(perfect.item() < 1e-6);
        let z = [0.4, -1.0, 2.2, -0.3];
        let mixed = edge_bce(tape.constant(Tensor::new([1, 1, 2, 2], z.to_vec()).unwrap()), &y).unwrap();
        let want: f64 = z
            .iter()
            .zip(y.data())
            .map(|(&z, &t)| {
                let p = 1.0 / (1.0 + (-z as f64).exp());
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 4.0;
        assert!((mixed.item() - want).abs() < 1e-14);
        assert!(edge_bce(tape.constant(Tensor::zeros([1, 1, 2, 2])), &y.map(|v| v * 0.5)).is_err());
    }

    #[test]
    fn loss_gradients_pass_gradcheck() {
        let mut rng = SplitMix::new(5);
        let y = LabelMap::one_hot::<f64>(&[labels(3, 3, 6, 3), labels(3, 3, 7, 3)], 3).unwrap();
        let z = rand_tensor::<f64>(&mut rng, &[2, 3, 3, 3]);
        assert!(grad_check(|v| cross_entropy(v, &y), &z, 1e-6, 1e-4).unwrap().passed());
        let p = z.map(|v| 0.5 + 0.4 * v);
        assert!(grad_check(|v| dice_loss(v, &y), &p, 1e-6, 1e-4).unwrap().passed());
        let e = Tensor::from_fn([2, 1, 3, 3], |i| (i % 3 == 0) as u8 as f64);
        let ze = rand_tensor::<f64>(&mut rng, &[2, 1, 3, 3]);
        assert!(grad_check(|v| edge_bce(v, &e), &ze, 1e-6, 1e-4).unwrap().passed());
    }

    #[test]
    fn total_loss_is_linear_and_gradient_is_weighted_sum() {
        let mut rng = SplitMix::new(8);
        let y = LabelMap::one_hot::<f64>(&[labels(4, 4, 9, 2)], 2).unwrap();
        let e = Tensor::from_fn([1, 1, 4, 4], |i| (i % 5 == 0) as u8 as f64);
        let z = rand_tensor::<f64>(&mut rng, &[1, 2, 4, 4]);
        let ze = rand_tensor::<f64>(&mut rng, &[1, 1, 4, 4]);
        let parts = |w: LossWeights| {
            let tape = Tape::<f64>::new();
            let zv = tape.constant(z.clone());
            let ce = cross_entropy(zv, &y).unwrap();
            let dice = dice_loss(zv.softmax_channels().unwrap(), &y).unwrap();
            let edge = edge_bce(tape.constant(ze.clone()), &e).unwrap();
            let total = total_loss(ce, dice, Some(edge), &w).unwrap();
            (ce.item(), dice.item(), edge.item(), total.item())
        };
        let (a, b, c, t) = parts(LossWeights::default());
        assert_eq!(t, a + b + c);
        let (_, _, _, t) = parts(LossWeights { lambda1: 1.0, lambda2: 0.0, lambda3: 0.0 });
        assert_eq!(t, a);
        let w = LossWeights { lambda1: 0.5, lambda2: 2.0, lambda3: 3.0 };
        assert_eq!(parts(w).3, 0.5 * a + 2.0 * b + 3.0 * c);

        let r = grad_check_many(
            "total_loss",
            |v| {
                let ce = cross_entropy(v[0], &y)?;
                let dice = dice_loss(v[0].softmax_channels()?, &y)?;
                total_loss(ce, dice, Some(edge_bce(v[1], &e)?), &w)
            },
            &[z.clone(), ze.clone()],
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(r.passed(), "{r}");
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0 }.validate().is_err());
        assert!(LossWeights { lambda1: -1.0, lambda2: 0.0, lambda3: 1.0 }.validate().is_err());
    }
}
