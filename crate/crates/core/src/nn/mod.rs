//! Parameterized layers and the composite blocks of the network.
//!
//! Layers hold [`ParamId`]s into a [`ParamRegistry`]; a forward pass binds
//! them to tape leaves through a [`Ctx`].

mod blocks;
mod init;
mod layers;
mod params;

use std::cell::RefCell;
use std::collections::BTreeMap;

pub use blocks::{
    DenseBlock, DualAttentionDecoder, GatedConvLayer, ResidualBlock, SpatialAttentionPath,
    SqueezeExcitation, TransitionBlock,
};
pub use init::{init_params, InitScheme};
pub use layers::{BatchNorm, Builder, Conv, ConvNorm, Linear, TransposeConv, BN_EPS, BN_MOMENTUM};
pub use params::{
    decode_container, encode_container, read_container, write_container, ParamEntry, ParamId,
    ParamKind, ParamRegistry, CONTAINER_MAGIC, CONTAINER_VERSION,
};

use crate::autograd::{BatchNormStats, Gradients, Mode, Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Running-statistics update produced by a train-mode batch-norm layer.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub mean: ParamId,
    pub var: ParamId,
    pub tracked: ParamId,
    pub stats: BatchNormStats<T>,
}

/// Binds registry parameters to one tape for the duration of a forward pass.
pub struct Ctx<'p, 't, T: Scalar> {
    pub tape: &'t Tape<T>,
    pub params: &'p ParamRegistry<T>,
    pub mode: Mode,
    leaves: RefCell<BTreeMap<ParamId, Var<'t, T>>>,
    bn_updates: RefCell<Vec<BnUpdate<T>>>,
}

impl<'p, 't, T: Scalar> Ctx<'p, 't, T> {
    pub fn new(tape: &'t Tape<T>, params: &'p ParamRegistry<T>, mode: Mode) -> Self {
        Ctx {
            tape,
            params,
            mode,
            leaves: RefCell::new(BTreeMap::new()),
            bn_updates: RefCell::new(Vec::new()),
        }
    }

    /// Tape leaf for a parameter, created once per pass.
    pub fn param(&self, id: ParamId) -> Var<'t, T> {
        *self.leaves.borrow_mut().entry(id).or_insert_with(|| {
            let e = self.params.entry(id);
            self.tape.leaf(e.value.clone(), e.kind.trainable())
        })
    }

    /// Uses `var` in place of the registry value of `id` for this pass.
    pub fn bind(&self, id: ParamId, var: Var<'t, T>) {
        self.leaves.borrow_mut().insert(id, var);
    }

    pub(crate) fn push_bn_update(&self, update: BnUpdate<T>) {
        self.bn_updates.borrow_mut().push(update);
    }

    pub fn finish(self) -> Bound<'t, T> {
        Bound {
            leaves: self.leaves.into_inner().into_iter().collect(),
            bn_updates: self.bn_updates.into_inner(),
        }
    }
}

/// What a forward pass leaves behind for the optimizer.
pub struct Bound<'t, T: Scalar> {
    pub leaves: Vec<(ParamId, Var<'t, T>)>,
    pub bn_updates: Vec<BnUpdate<T>>,
}

impl<T: Scalar> Bound<'_, T> {
    /// Moves each bound parameter's gradient out of `grads`.
    pub fn take_grads(&self, grads: &mut Gradients<T>) -> Vec<(ParamId, Tensor<T>)> {
        self.leaves
            .iter()
            .filter_map(|&(id, v)| grads.take(v).map(|g| (id, g)))
            .collect()
    }
}

impl<T: Scalar> ParamRegistry<T> {
    pub fn apply_bn_updates(&mut self, updates: Vec<BnUpdate<T>>) {
        for u in updates {
            *self.value_mut(u.mean) = u.stats.mean;
            *self.value_mut(u.var) = u.stats.var;
            *self.value_mut(u.tracked) = Tensor::scalar(T::from_count(u.stats.tracked as usize));
        }
    }
}
