use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Scalar, Tensor};

use super::{ParamKind, ParamRegistry};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum InitScheme {
    /// Weights ~ N(0, 2 / fan_in).
    #[default]
    HeNormal,
}

/// Resets every entry: weights from `scheme`, biases and BN shifts 0, BN
/// scales 1, running statistics to their untracked defaults.
pub fn init_params<T: Scalar>(reg: &mut ParamRegistry<T>, scheme: InitScheme, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = reg.iter().map(|(id, e)| (id, e.kind)).collect();
    for (id, kind) in ids {
        let slot = reg.value_mut(id);
        let shape = slot.shape().to_vec();
        *slot = match kind {
            ParamKind::Weight { fan_in } => match scheme {
                InitScheme::HeNormal => {
                    let std = (2.0 / fan_in as f64).sqrt();
                    let dist = Normal::new(0.0, std).expect("finite std");
                    Tensor::from_fn(shape, |_| T::lit(dist.sample(&mut rng)))
                }
            },
            ParamKind::BnGamma | ParamKind::RunningVar => Tensor::ones(shape),
            ParamKind::Bias | ParamKind::BnBeta | ParamKind::RunningMean | ParamKind::Tracked => {
                Tensor::zeros(shape)
            }
        };
    }
}
