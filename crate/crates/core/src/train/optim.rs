use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::OPTIM_PREFIX;
use crate::nn::{ParamId, ParamRegistry};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RAdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled: `θ ← θ − lr·wd·θ` before each update.
    pub weight_decay: f64,
}

impl Default for RAdamConfig {
    fn default() -> Self {
        RAdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl RAdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |b: f64| (0.0..1.0).contains(&b);
        if !ok(self.beta1) || !ok(self.beta2) || !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// Scalar coefficients of one rectified-Adam step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepCoefficients {
    /// Bias correction of the first moment, `1 − β1^t`.
    pub bc1: f64,
    /// `1 − β2^t`.
    pub bc2: f64,
    /// Length of the approximated simple moving average.
    pub rho: f64,
    /// Variance rectification term; `None` when `ρ_t ≤ 4` and the step is un-adapted.
    pub rect: Option<f64>,
}

pub fn step_coefficients(beta1: f64, beta2: f64, t: u64) -> StepCoefficients {
    let t_f = t as f64;
    let bc1 = 1.0 - beta1.powf(t_f);
    let b2t = beta2.powf(t_f);
    let bc2 = 1.0 - b2t;
    let rho_inf = 2.0 / (1.0 - beta2) - 1.0;
    let rho = rho_inf - 2.0 * t_f * b2t / bc2;
    let rect = (rho > 4.0)
        .then(|| ((rho - 4.0) * (rho - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho)).sqrt());
    StepCoefficients { bc1, bc2, rho, rect }
}

/// Moment buffers for every trainable parameter plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub config: RAdamConfig,
    pub step: u64,
    /// Indexed like the registry; `None` for non-trainable entries.
    m: Vec<Option<Tensor<f32>>>,
    v: Vec<Option<Tensor<f32>>>,
}

impl OptimState {
    pub fn new(params: &ParamRegistry<f32>, config: RAdamConfig) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, e)| e.kind.trainable().then(|| Tensor::zeros_like(&e.value)))
                .collect()
        };
        OptimState {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn moments(&self, id: ParamId) -> Option<(&Tensor<f32>, &Tensor<f32>)> {
        Some((self.m[id.0].as_ref()?, self.v[id.0].as_ref()?))
    }

    /// Checkpoint tensors: `optim.m.<name>`, `optim.v.<name>`, `optim.step`.
    pub fn to_named(&self, params: &ParamRegistry<f32>) -> Vec<(String, Tensor<f32>)> {
        let mut out = Vec::new();
        for (id, e) in params.iter() {
            if let (Some(m), Some(v)) = (&self.m[id.0], &self.v[id.0]) {
                out.push((format!("{OPTIM_PREFIX}m.{}", e.name), m.clone()));
                out.push((format!("{OPTIM_PREFIX}v.{}", e.name), v.clone()));
            }
        }
        // Split into two exactly representable halves.
        let (hi, lo) = ((self.step >> 24) as f32, (self.step & 0xFF_FFFF) as f32);
        out.push((format!("{OPTIM_PREFIX}step"), Tensor::new([2], vec![hi, lo]).expect("2 values")));
        out
    }

    /// Restores moments saved by [`to_named`](Self::to_named); unrelated
    /// `optim.*` entries are ignored.
    pub fn load_named(params: &ParamRegistry<f32>, config: RAdamConfig, named: &[(String, Tensor<f32>)]) -> Result<Self> {
        let mut state = OptimState::new(params, config);
        let find = |key: String| named.iter().find(|(n, _)| *n == key).map(|(_, t)| t);
        let step = find(format!("{OPTIM_PREFIX}step"))
            .ok_or_else(|| Error::Data("checkpoint has no optimizer step".into()))?;
        match step.data() {
            [hi, lo] => state.step = ((*hi as u64) << 24) | *lo as u64,
            _ => return Err(Error::Data("optimizer step must hold 2 values".into())),
        }
        for (id, e) in params.iter() {
            if !e.kind.trainable() {
                continue;
            }
            for (which, slot) in [("m", &mut state.m[id.0]), ("v", &mut state.v[id.0])] {
                let t = find(format!("{OPTIM_PREFIX}{which}.{}", e.name))
                    .ok_or_else(|| Error::Data(format!("checkpoint lacks optimizer {which} for {}", e.name)))?;
                if t.shape() != e.value.shape() {
                    return Err(Error::Data(format!(
                        "optimizer {which} for {} has shape {:?}, parameter has {:?}",
                        e.name,
                        t.shape(),
                        e.value.shape()
                    )));
                }
                *slot = Some(t.clone());
            }
        }
        Ok(state)
    }
}

/// One rectified-Adam update of every trainable parameter.
///
/// Every trainable parameter must have a gradient; a missing one means the
/// parameter is orphaned from the loss. NaN or infinite gradients abort with
/// the parameter name before anything is modified.
pub fn radam_step(
    state: &mut OptimState,
    params: &mut ParamRegistry<f32>,
    grads: &[(ParamId, Tensor<f32>)],
    lr: f64,
) -> Result<()> {
    let mut by_id: Vec<Option<&Tensor<f32>>> = vec![None; params.len()];
    for (id, g) in grads {
        let e = params.entry(*id);
        if g.shape() != e.value.shape() {
            return Err(Error::shape("radam_step", e.value.shape(), g.shape()));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", e.name)));
        }
        by_id[id.0] = Some(g);
    }
    let orphans: Vec<&str> = params
        .iter()
        .filter(|(id, e)| e.kind.trainable() && by_id[id.0].is_none())
        .map(|(_, e)| e.name.as_str())
        .collect();
    if !orphans.is_empty() {
        return Err(Error::InvalidArgument(format!("parameters without gradient: {}", orphans.join(", "))));
    }

    state.step += 1;
    let cfg = state.config;
    let c = step_coefficients(cfg.beta1, cfg.beta2, state.step);
    let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
    let decay = (1.0 - lr * cfg.weight_decay) as f32;
    let ids: Vec<ParamId> = params.trainable().collect();
    for id in ids {
        let g = by_id[id.0].expect("audited above");
        let m = state.m[id.0].as_mut().expect("trainable");
        let v = state.v[id.0].as_mut().expect("trainable");
        let p = params.value_mut(id).data_mut();
        for (((p, m), v), &g) in p.iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
            if cfg.weight_decay != 0.0 {
                *p *= decay;
            }
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m as f64 / c.bc1;
            let delta = match c.rect {
                Some(r) => lr * r * m_hat * c.bc2.sqrt() / ((*v as f64).sqrt() + cfg.eps),
                None => lr * m_hat,
            };
            *p -= delta as f32;
        }
    }
    Ok(())
}

/// `lr0·γ^epoch`.
pub fn lr_schedule(lr0: f64, gamma: f64, epoch: usize) -> f64 {
    lr0 * gamma.powi(epoch as i32)
}
