//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends one node holding its output value, its input node
//! ids and (when any input needs a gradient) a backward rule. `backward`
//! replays the rules in reverse recording order, which is a valid
//! topological order because inputs are always recorded before outputs.

mod ops;

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub(crate) use ops::sigmoid_scalar;
pub use ops::{col2im, im2col, BatchNormStats, Broadcast, ConvGeometry, Mode, Pool};

/// Identifies the backward rule attached to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    Clamp,
    Relu,
    Sigmoid,
    SoftmaxChannels,
    Sum,
    Mean,
    ConcatChannels,
    StackChannels,
    ScaleChannels,
    Conv2d,
    TransposeConv2d,
    MaxPool2d,
    AvgPool2d,
    GlobalAvgPool,
    BilinearUpsample,
    BatchNorm2d,
    Linear,
    CrossEntropy,
    DiceLoss,
    EdgeBce,
}

impl OpKind {
    /// Every differentiable operation, i.e. everything except `Leaf`.
    pub const DIFFERENTIABLE: [OpKind; 25] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::Clamp,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::SoftmaxChannels,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::ConcatChannels,
        OpKind::StackChannels,
        OpKind::ScaleChannels,
        OpKind::Conv2d,
        OpKind::TransposeConv2d,
        OpKind::MaxPool2d,
        OpKind::AvgPool2d,
        OpKind::GlobalAvgPool,
        OpKind::BilinearUpsample,
        OpKind::BatchNorm2d,
        OpKind::Linear,
        OpKind::CrossEntropy,
        OpKind::DiceLoss,
        OpKind::EdgeBce,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Clamp => "clamp",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::SoftmaxChannels => "softmax_channels",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::ConcatChannels => "concat_channels",
            OpKind::StackChannels => "stack_channels",
            OpKind::ScaleChannels => "scale_channels",
            OpKind::Conv2d => "conv2d",
            OpKind::TransposeConv2d => "transpose_conv2d",
            OpKind::MaxPool2d => "maxpool2d",
            OpKind::AvgPool2d => "avgpool2d",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::BilinearUpsample => "bilinear_upsample",
            OpKind::BatchNorm2d => "batchnorm2d",
            OpKind::Linear => "linear",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::DiceLoss => "dice_loss",
            OpKind::EdgeBce => "edge_bce",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        Self::DIFFERENTIABLE.into_iter().find(|k| k.name() == name)
    }
}

/// Inputs handed to a backward rule.
pub struct BackwardArgs<'a, T> {
    /// Upstream gradient, shaped like `output`.
    pub grad: &'a Tensor<T>,
    pub inputs: &'a [Rc<Tensor<T>>],
    pub output: &'a Tensor<T>,
}

/// Returns one gradient per input; `None` means "no contribution".
pub type BackwardFn<T> = Box<dyn Fn(&BackwardArgs<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    kind: OpKind,
    value: Rc<Tensor<T>>,
    inputs: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

thread_local! {
    static BACKWARD_FAULT: Cell<Option<OpKind>> = const { Cell::new(None) };
}

/// Corrupts the backward rule of `kind` on the current thread (gradients are
/// scaled by 1.5). Negative control for the gradient checker; `None` clears.
#[doc(hidden)]
pub fn inject_backward_fault(kind: Option<OpKind>) {
    BACKWARD_FAULT.with(|f| f.set(kind));
}

pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    grad_enabled: bool,
    backward_passes: Cell<usize>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
            backward_passes: Cell::new(0),
        }
    }

    /// A tape that records values only; no backward rules or saved state.
    pub fn no_grad() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of recorded nodes of the given kind.
    pub fn count(&self, kind: OpKind) -> usize {
        self.nodes.borrow().iter().filter(|n| n.kind == kind).count()
    }

    pub fn backward_passes(&self) -> usize {
        self.backward_passes.get()
    }

    /// Drops every node together with its saved intermediates.
    pub fn clear(&mut self) {
        self.nodes.get_mut().clear();
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(Node {
            kind: OpKind::Leaf,
            value: Rc::new(value),
            inputs: Vec::new(),
            requires_grad: requires_grad && self.grad_enabled,
            backward: None,
        })
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    /// Appends an operation node. The backward rule is dropped unless
    /// gradients are enabled and some input requires a gradient.
    pub fn record<F>(&self, kind: OpKind, inputs: &[Var<'_, T>], value: Tensor<T>, backward: F) -> Var<'_, T>
    where
        F: Fn(&BackwardArgs<'_, T>) -> Vec<Option<Tensor<T>>> + 'static,
    {
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let requires_grad = self.grad_enabled && {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].requires_grad)
        };
        self.push(Node {
            kind,
            value: Rc::new(value),
            inputs: ids,
            requires_grad,
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn<T>),
        })
    }

    fn push(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Computes `d loss / d node` for every node that requires a gradient.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::invalid_shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", root.value.shape()),
            ));
        }
        self.backward_passes.set(self.backward_passes.get() + 1);
        let fault = BACKWARD_FAULT.with(|f| f.get());

        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(root.value.shape().to_vec()));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(rule) = node.backward.as_ref() else {
                continue;
            };
            // Leaves have no rule, so their gradients survive; intermediate
            // gradients are released as soon as they have been propagated.
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            let inputs: Vec<Rc<Tensor<T>>> =
                node.inputs.iter().map(|&i| Rc::clone(&nodes[i].value)).collect();
            let local = rule(&BackwardArgs {
                grad: &upstream,
                inputs: &inputs,
                output: &node.value,
            });
            debug_assert_eq!(local.len(), node.inputs.len(), "{:?} rule arity", node.kind);
            for (&input, g) in node.inputs.iter().zip(local) {
                let Some(mut g) = g else { continue };
                if !nodes[input].requires_grad {
                    continue;
                }
                if fault == Some(node.kind) {
                    g.scale_inplace(T::lit(1.5));
                }
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        let leaves = nodes
            .iter()
            .enumerate()
            .map(|(i, n)| {
                if n.kind == OpKind::Leaf && n.requires_grad {
                    Some(
                        grads[i]
                            .take()
                            .unwrap_or_else(|| Tensor::zeros(n.value.shape().to_vec())),
                    )
                } else {
                    None
                }
            })
            .collect();
        Ok(Gradients { grads: leaves })
    }
}

/// Gradients of every `requires_grad` leaf after a backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Convenience for scalar-valued nodes.
    pub fn item(&self) -> T {
        self.value().item()
    }
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{} {:?})", self.id, self.shape())
    }
}
