//! Finite-difference verification of backward rules at `f64`.

mod suite;

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Mode, Tape, Var};
use crate::nn::{Ctx, ParamId, ParamRegistry};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use suite::{model_report, run_suite, SuiteReport, MODEL_DIRECTIONS};

pub const DEFAULT_EPS: f64 = 1e-6;
pub const DEFAULT_TOL: f64 = 1e-4;

/// Relative errors below this fraction of the largest gradient magnitude
/// are measured against that magnitude instead of the entry itself.
const FLOOR_FRACTION: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < self.tol
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:.3e} {}",
            self.name,
            self.max_rel_err,
            if self.passed() { "pass" } else { "fail" }
        )
    }
}

/// `|a − n| / max(|a|, |n|, floor)` maximized over pairs, where `floor` is
/// a small fraction of the largest magnitude present.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    let floor = FLOOR_FRACTION * scale;
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// `sum(v ⊙ R)` for a fixed pseudo-random `R`, turning any output into a
/// scalar whose gradient exercises every element differently.
pub fn probe_loss<'t>(v: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Tensor::from_fn(v.shape(), |_| StandardNormal.sample(&mut rng));
    Ok(v.mul(v.tape().constant(r))?.sum())
}

fn scalar_loss(v: Var<'_, f64>) -> Result<f64> {
    let t = v.value();
    if t.numel() != 1 {
        return Err(Error::invalid_shape(
            "grad_check",
            format!("function must return a scalar, got {:?}", t.shape()),
        ));
    }
    Ok(t.item())
}

/// Compares the tape gradient of scalar `f` at `x` with central differences.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    grad_check_many("f", |xs| f(xs[0]), std::slice::from_ref(x), eps, tol)
}

/// [`grad_check`] over several inputs; the error is the worst over all of them.
pub fn grad_check_many<F>(
    name: &str,
    f: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let loss = f(&vars)?;
    scalar_loss(loss)?;
    let grads = tape.backward(loss)?;

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::no_grad();
        let vars: Vec<_> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        scalar_loss(f(&vars)?)
    };

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("leaf gradient").data().to_vec();
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..inputs[k].numel() {
            let orig = inputs[k].data()[i];
            probe[k].data_mut()[i] = orig + eps;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = orig - eps;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * eps));
        }
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        max_rel_err: worst,
        tol,
    })
}

/// Checks `f` along `directions` random unit directions in the joint input
/// space instead of per coordinate; used where inputs are too many to
/// perturb one at a time.
pub fn grad_check_directional<F>(
    name: &str,
    f: F,
    inputs: &[Tensor<f64>],
    directions: usize,
    seed: u64,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let loss = f(&vars)?;
    scalar_loss(loss)?;
    let grads = tape.backward(loss)?;
    let flat_grad: Vec<f64> = vars
        .iter()
        .flat_map(|v| grads.get(*v).expect("leaf gradient").data().to_vec())
        .collect();

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::no_grad();
        let vars: Vec<_> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        scalar_loss(f(&vars)?)
    };
    let shifted = |dir: &[f64], step: f64| -> Vec<Tensor<f64>> {
        let mut offset = 0;
        inputs
            .iter()
            .map(|x| {
                let n = x.numel();
                let d = &dir[offset..offset + n];
                offset += n;
                Tensor::from_fn(x.shape().to_vec(), |i| x.data()[i] + step * d[i])
            })
            .collect()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut analytic = Vec::with_capacity(directions);
    let mut numeric = Vec::with_capacity(directions);
    for _ in 0..directions {
        let mut dir: Vec<f64> = (0..flat_grad.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|v| *v /= norm);
        analytic.push(flat_grad.iter().zip(&dir).map(|(g, d)| g * d).sum::<f64>());
        let up = eval(&shifted(&dir, eps))?;
        let down = eval(&shifted(&dir, -eps))?;
        numeric.push((up - down) / (2.0 * eps));
    }
    // Directional derivatives are compared against the full gradient norm,
    // the largest value any direction can produce.
    let gnorm = flat_grad.iter().map(|v| v * v).sum::<f64>().sqrt();
    let floor = FLOOR_FRACTION * gnorm;
    let worst = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n): (&f64, &f64)| (a - n).abs() / a.abs().max(n.abs()).max(floor).max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max);
    Ok(GradCheckReport {
        name: name.to_string(),
        max_rel_err: worst,
        tol,
    })
}

/// Checks a parameterized layer with respect to its inputs and every
/// trainable registry entry. With `directions` set, the check runs along
/// that many random directions instead of per coordinate.
pub fn grad_check_params<F>(
    name: &str,
    reg: &ParamRegistry<f64>,
    inputs: &[Tensor<f64>],
    f: F,
    directions: Option<(usize, u64)>,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: for<'p, 't> Fn(&Ctx<'p, 't, f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let ids: Vec<ParamId> = reg.trainable().collect();
    let mut all = inputs.to_vec();
    all.extend(ids.iter().map(|&id| reg.value(id).clone()));
    let k = inputs.len();
    let g = higher_ranked(|vs| {
        let cx = Ctx::new(vs[0].tape(), reg, Mode::Train);
        for (&id, &v) in ids.iter().zip(&vs[k..]) {
            cx.bind(id, v);
        }
        f(&cx, &vs[..k])
    });
    match directions {
        Some((n, seed)) => grad_check_directional(name, g, &all, n, seed, DEFAULT_EPS, tol),
        None => grad_check_many(name, g, &all, DEFAULT_EPS, tol),
    }
}

fn higher_ranked<F>(f: F) -> F
where
    F: for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    f
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{inject_backward_fault, OpKind};

    #[test]
    fn sigmoid_sum_passes() {
        let x = Tensor::from_fn([2, 5], |i| i as f64 * 0.4 - 2.0);
        let r = grad_check(|v| Ok(v.sigmoid().sum()), &x, 1e-5, 1e-4).unwrap();
        assert!(r.passed(), "{r}");
    }

    #[test]
    fn injected_fault_is_caught() {
        let x = Tensor::from_fn([3], |i| i as f64 - 0.5);
        inject_backward_fault(Some(OpKind::Sigmoid));
        let r = grad_check(|v| Ok(v.sigmoid().sum()), &x, 1e-6, 1e-4);
        inject_backward_fault(None);
        assert!(!r.unwrap().passed());
    }

    #[test]
    fn directional_check_agrees() {
        let x = Tensor::from_fn([4], |i| i as f64 * 0.3 - 0.4);
        let y = Tensor::from_fn([4], |i| 1.0 - i as f64 * 0.2);
        let r = grad_check_directional(
            "mul",
            |v| Ok(v[0].mul(v[1])?.sigmoid().sum()),
            &[x, y],
            10,
            3,
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(r.passed(), "{r}");
    }

    #[test]
    fn report_line_format() {
        let r = GradCheckReport {
            name: "relu".into(),
            max_rel_err: 2.5e-9,
            tol: 1e-4,
        };
        assert_eq!(r.to_string(), "relu 2.500e-9 pass");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(max_relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((max_relative_error(&[1.0, 2.0], &[1.0, 2.2]) - 0.2 / 2.2).abs() < 1e-12);
    }
}
