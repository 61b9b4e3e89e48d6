use std::fmt;

use crate::autograd::{BatchNormStats, Mode, OpKind, Tape, Var};
use crate::error::Result;
use crate::model::{ModelConfig, SaUNet};
use crate::nn::{
    init_params, Builder, DenseBlock, DualAttentionDecoder, GatedConvLayer, InitScheme,
    ParamRegistry, ResidualBlock, SpatialAttentionPath, SqueezeExcitation, TransitionBlock,
};
use crate::objectives::{cross_entropy, dice_loss, edge_bce, total_loss, LossWeights};
use crate::tensor::{LabelMap, Tensor};

use super::{grad_check_many, grad_check_params, probe_loss, GradCheckReport, DEFAULT_EPS, DEFAULT_TOL};

/// Directions used by the end-to-end model check.
pub const MODEL_DIRECTIONS: usize = 20;

#[derive(Clone, Debug, Default)]
pub struct SuiteReport {
    pub reports: Vec<GradCheckReport>,
    /// Differentiable ops with no case that actually records them.
    pub uncovered: Vec<OpKind>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.uncovered.is_empty() && self.reports.iter().all(GradCheckReport::passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.reports
            .iter()
            .filter(|r| !r.passed())
            .map(|r| r.name.as_str())
            .chain(self.uncovered.iter().map(|k| k.name()))
            .collect()
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.reports {
            writeln!(f, "{r}")?;
        }
        for k in &self.uncovered {
            writeln!(f, "{} uncovered fail", k.name())?;
        }
        Ok(())
    }
}

struct Rng(rand_chacha::ChaCha8Rng);

impl Rng {
    fn new(seed: u64) -> Self {
        use rand::SeedableRng;
        Rng(rand_chacha::ChaCha8Rng::seed_from_u64(seed))
    }

    fn tensor(&mut self, shape: &[usize]) -> Tensor<f64> {
        use rand::Rng as _;
        Tensor::from_fn(shape.to_vec(), |_| self.0.gen_range(-1.0..1.0))
    }

    fn positive(&mut self, shape: &[usize]) -> Tensor<f64> {
        self.tensor(shape).map(|v| 1.0 + 0.5 * v)
    }

    fn labels(&mut self, n: usize, h: usize, w: usize, k: usize) -> Vec<LabelMap> {
        use rand::Rng as _;
        (0..n)
            .map(|_| LabelMap::new(h, w, (0..h * w).map(|_| self.0.gen_range(0..k as u8)).collect()).unwrap())
            .collect()
    }
}

type OpFn = Box<dyn for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>>>;

struct OpCase {
    kind: OpKind,
    inputs: Vec<Tensor<f64>>,
    f: OpFn,
}

fn case<F>(kind: OpKind, inputs: Vec<Tensor<f64>>, f: F) -> OpCase
where
    F: for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>> + 'static,
{
    OpCase {
        kind,
        inputs,
        f: Box::new(f),
    }
}

fn op_cases() -> Vec<OpCase> {
    let mut r = Rng::new(2024);
    let s = [2, 3, 3, 4];
    let onehot: Tensor<f64> = LabelMap::one_hot(&r.labels(2, 3, 3, 3), 3).unwrap();
    let edges = Tensor::from_fn([2, 1, 3, 3], |i| ((i * 5) % 3 == 0) as u8 as f64);
    let mut tracked = BatchNormStats::new(3);
    tracked.mean = r.tensor(&[3]).map(|v| 0.2 * v);
    tracked.var = r.positive(&[3]);
    tracked.tracked = 1;
    vec![
        case(OpKind::Add, vec![r.tensor(&s), r.tensor(&s), r.tensor(&[1]), r.tensor(&[2, 1, 3, 4])], |v| {
            probe_loss(v[0].add(v[1])?.add(v[2])?.add(v[3])?, 1)
        }),
        case(OpKind::Sub, vec![r.tensor(&s), r.tensor(&s), r.tensor(&[1]), r.tensor(&[2, 1, 3, 4])], |v| {
            probe_loss(v[0].sub(v[1])?.sub(v[2])?.sub(v[3])?, 2)
        }),
        case(OpKind::Mul, vec![r.tensor(&s), r.tensor(&s), r.tensor(&[1]), r.tensor(&[2, 1, 3, 4])], |v| {
            probe_loss(v[0].mul(v[1])?.mul(v[2])?.mul(v[3])?, 3)
        }),
        case(OpKind::Scale, vec![r.tensor(&s)], |v| probe_loss(v[0].scale(-1.7), 4)),
        case(OpKind::AddScalar, vec![r.tensor(&s)], |v| probe_loss(v[0].add_scalar(0.3).mul(v[0])?, 5)),
        case(OpKind::Clamp, vec![r.tensor(&s)], |v| probe_loss(v[0].clamp(-0.5, 0.4), 6)),
        case(OpKind::Relu, vec![r.tensor(&s)], |v| probe_loss(v[0].relu(), 7)),
        case(OpKind::Sigmoid, vec![r.tensor(&s).map(|x| 3.0 * x)], |v| probe_loss(v[0].sigmoid(), 8)),
        case(OpKind::SoftmaxChannels, vec![r.tensor(&s).map(|x| 2.0 * x)], |v| {
            probe_loss(v[0].softmax_channels()?, 9)
        }),
        case(OpKind::Sum, vec![r.tensor(&s)], |v| Ok(v[0].mul(v[0])?.sum())),
        case(OpKind::Mean, vec![r.tensor(&s)], |v| Ok(v[0].mul(v[0])?.mean())),
        case(OpKind::ConcatChannels, vec![r.tensor(&s), r.tensor(&[2, 2, 3, 4])], |v| {
            probe_loss(Var::concat_channels(&[v[0], v[1], v[0]])?, 10)
        }),
        case(OpKind::StackChannels, vec![r.tensor(&[2, 1, 3, 4])], |v| probe_loss(v[0].stack_channels(3)?, 11)),
        case(OpKind::ScaleChannels, vec![r.tensor(&s), r.tensor(&[2, 3])], |v| {
            probe_loss(v[0].scale_channels(v[1])?, 12)
        }),
        case(
            OpKind::Conv2d,
            vec![r.tensor(&[2, 3, 5, 6]), r.tensor(&[4, 3, 3, 3]), r.tensor(&[4]), r.tensor(&[4, 3, 1, 1])],
            |v| {
                let a = v[0].conv2d(v[1], Some(v[2]), 2, 1)?;
                let b = v[0].conv2d(v[1], None, 1, 0)?;
                let c = v[0].conv2d(v[3], None, 1, 0)?;
                probe_loss(a, 13)?.add(probe_loss(b, 14)?)?.add(probe_loss(c, 15)?)
            },
        ),
        case(
            OpKind::TransposeConv2d,
            vec![r.tensor(&[2, 3, 3, 4]), r.tensor(&[3, 2, 2, 2]), r.tensor(&[2]), r.tensor(&[3, 2, 3, 3])],
            |v| {
                let a = v[0].transpose_conv2d(v[1], Some(v[2]), 2)?;
                let b = v[0].transpose_conv2d(v[3], None, 1)?;
                probe_loss(a, 16)?.add(probe_loss(b, 17)?)
            },
        ),
        case(OpKind::MaxPool2d, vec![r.tensor(&[2, 2, 5, 5])], |v| probe_loss(v[0].maxpool2d(2, 2)?, 18)),
        case(OpKind::AvgPool2d, vec![r.tensor(&[2, 2, 5, 5])], |v| probe_loss(v[0].avgpool2d(2, 2)?, 19)),
        case(OpKind::GlobalAvgPool, vec![r.tensor(&s)], |v| probe_loss(v[0].global_avg_pool()?, 20)),
        case(OpKind::BilinearUpsample, vec![r.tensor(&[1, 2, 3, 4])], |v| {
            probe_loss(v[0].bilinear_upsample(5, 7)?, 21)
        }),
        case(OpKind::BatchNorm2d, vec![r.tensor(&s), r.positive(&[3]), r.tensor(&[3])], move |v| {
            let fresh = BatchNormStats::new(3);
            let (train, _) = v[0].batchnorm2d(v[1], v[2], &fresh, Mode::Train, 0.1, 1e-5, "train")?;
            let (eval, _) = v[0].batchnorm2d(v[1], v[2], &tracked, Mode::Eval, 0.1, 1e-5, "eval")?;
            probe_loss(train, 22)?.add(probe_loss(eval, 23)?)
        }),
        case(OpKind::Linear, vec![r.tensor(&[3, 5]), r.tensor(&[4, 5]), r.tensor(&[4])], |v| {
            probe_loss(v[0].linear(v[1], v[2])?, 24)
        }),
        {
            let y = onehot.clone();
            case(OpKind::CrossEntropy, vec![r.tensor(&[2, 3, 3, 3]).map(|x| 2.0 * x)], move |v| cross_entropy(v[0], &y))
        },
        {
            let y = onehot.clone();
            case(OpKind::DiceLoss, vec![r.tensor(&[2, 3, 3, 3]).map(|x| 0.5 + 0.45 * x)], move |v| dice_loss(v[0], &y))
        },
        case(OpKind::EdgeBce, vec![r.tensor(&[2, 1, 3, 3]).map(|x| 2.0 * x)], move |v| edge_bce(v[0], &edges)),
    ]
}

fn run_op(case: &OpCase) -> Result<(GradCheckReport, bool)> {
    // Coverage is established by instrumentation: the case must record the op.
    let tape = Tape::no_grad();
    let vars: Vec<_> = case.inputs.iter().map(|x| tape.constant(x.clone())).collect();
    (case.f)(&vars)?;
    let covered = tape.count(case.kind) > 0;
    let report = grad_check_many(case.kind.name(), &case.f, &case.inputs, DEFAULT_EPS, DEFAULT_TOL)?;
    Ok((report, covered))
}

fn registry<B>(seed: u64, build: impl FnOnce(&mut Builder<'_, f64>) -> Result<B>) -> Result<(ParamRegistry<f64>, B)> {
    let mut reg = ParamRegistry::new();
    let block = build(&mut Builder::new(&mut reg))?;
    init_params(&mut reg, InitScheme::HeNormal, seed);
    Ok((reg, block))
}

fn block_reports(r: &mut Rng) -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::new();
    let (reg, b) = registry(1, |bb| DenseBlock::build(bb, 2, 2, 2))?;
    out.push(grad_check_params("dense_block", &reg, &[r.tensor(&[2, 2, 4, 4])], |cx, v| probe_loss(b.forward(cx, v[0])?, 31), None, DEFAULT_TOL)?);
    let (reg, b) = registry(2, |bb| TransitionBlock::build(bb, 4))?;
    out.push(grad_check_params("transition_block", &reg, &[r.tensor(&[2, 4, 4, 4])], |cx, v| probe_loss(b.forward(cx, v[0])?, 32), None, DEFAULT_TOL)?);
    let (reg, b) = registry(3, |bb| ResidualBlock::build(bb, 4))?;
    out.push(grad_check_params("residual_block", &reg, &[r.tensor(&[1, 4, 6, 6])], |cx, v| probe_loss(b.forward(cx, v[0])?, 33), None, DEFAULT_TOL)?);
    let (reg, b) = registry(4, |bb| SqueezeExcitation::build(bb, 8, 4))?;
    out.push(grad_check_params("squeeze_excitation", &reg, &[r.tensor(&[1, 8, 4, 4])], |cx, v| probe_loss(b.forward(cx, v[0])?.0, 34), None, DEFAULT_TOL)?);
    let (reg, b) = registry(5, |bb| GatedConvLayer::build(bb, 2, 3))?;
    out.push(grad_check_params(
        "gated_conv_layer",
        &reg,
        &[r.tensor(&[1, 2, 4, 4]), r.tensor(&[1, 3, 2, 2])],
        |cx, v| {
            let (g, a) = b.forward(cx, v[0], v[1])?;
            probe_loss(g, 35)?.add(probe_loss(a, 36)?)
        },
        None,
        DEFAULT_TOL,
    )?);
    let (reg, b) = registry(6, |bb| SpatialAttentionPath::build(bb, 4))?;
    out.push(grad_check_params("spatial_attention_path", &reg, &[r.tensor(&[1, 4, 4, 4])], |cx, v| probe_loss(b.forward(cx, v[0])?.0, 37), None, DEFAULT_TOL)?);
    let (reg, b) = registry(7, |bb| DualAttentionDecoder::build(bb, 2, 2, 4, 4))?;
    out.push(grad_check_params(
        "dual_attention_decoder",
        &reg,
        &[r.tensor(&[2, 2, 4, 4]), r.tensor(&[2, 2, 2, 2])],
        |cx, v| probe_loss(b.forward(cx, v[0], v[1])?.0, 38),
        None,
        DEFAULT_TOL,
    )?);
    Ok(out)
}

/// Full dual-task loss of the tiny model along random parameter directions.
pub fn model_report(seed: u64) -> Result<GradCheckReport> {
    let mut r = Rng::new(seed);
    let model = SaUNet::<f64>::build(&ModelConfig::tiny(), seed)?;
    let (n, h) = (2, 16);
    let image = r.tensor(&[n, 1, h, h]);
    let labels = r.labels(n, h, h, 4);
    let onehot: Tensor<f64> = LabelMap::one_hot(&labels, 4)?;
    let edge = Tensor::from_fn([n, 1, h, h], |i| {
        let (s, p) = (i / (h * h), i % (h * h));
        labels[s].boundary(false)[p] as u8 as f64
    });
    let canny = Tensor::from_fn([n, 1, h, h], |i| ((i * 7) % 5 == 0) as u8 as f64);
    let weights = LossWeights::default();
    grad_check_params(
        "model_end_to_end",
        &model.params,
        &[],
        |cx, _| {
            let tape = cx.tape;
            let out = model.forward_vars(cx, tape.constant(image.clone()), Some(tape.constant(canny.clone())))?;
            let ce = cross_entropy(out.seg_logits, &onehot)?;
            let dice = dice_loss(out.seg_logits.softmax_channels()?, &onehot)?;
            let e = edge_bce(out.edge_logits.expect("shape stream"), &edge)?;
            total_loss(ce, dice, Some(e), &weights)
        },
        Some((MODEL_DIRECTIONS, seed ^ 0x5eed)),
        DEFAULT_TOL,
    )
}

/// Every differentiable op, every composite block, and the end-to-end model.
pub fn run_suite() -> Result<SuiteReport> {
    let mut suite = SuiteReport::default();
    for case in op_cases() {
        let (report, covered) = run_op(&case)?;
        if !covered {
            suite.uncovered.push(case.kind);
        }
        suite.reports.push(report);
    }
    for kind in OpKind::DIFFERENTIABLE {
        if !suite.reports.iter().any(|r| r.name == kind.name()) && !suite.uncovered.contains(&kind) {
            suite.uncovered.push(kind);
        }
    }
    suite.reports.extend(block_reports(&mut Rng::new(77))?);
    suite.reports.push(model_report(1)?);
    Ok(suite)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::inject_backward_fault;

    #[test]
    fn every_op_has_a_case() {
        let kinds: Vec<OpKind> = op_cases().iter().map(|c| c.kind).collect();
        assert_eq!(kinds, OpKind::DIFFERENTIABLE.to_vec());
    }

    #[test]
    fn op_cases_pass_and_faults_are_caught() {
        for case in op_cases() {
            let (report, covered) = run_op(&case).unwrap();
            assert!(covered, "{} not recorded", report.name);
            assert!(report.passed(), "{report}");
            inject_backward_fault(Some(case.kind));
            let (faulty, _) = run_op(&case).unwrap();
            inject_backward_fault(None);
            assert!(!faulty.passed(), "fault in {} went unnoticed", faulty.name);
        }
    }
}

#[cfg(test)]
mod full {
    #[test]
    fn full_suite_passes() {
        let t = std::time::Instant::now();
        let s = super::run_suite().unwrap();
        println!("{s}elapsed {:?}", t.elapsed());
        assert!(s.passed(), "{:?}", s.failures());
    }
}
