//! The assembled network: dense texture encoder, gated full-resolution
//! shape stream, dual-attention decoders and the fusion head.

mod config;

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

pub use config::{ModelConfig, Preset};

use crate::autograd::{Mode, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{
    init_params, read_container, write_container, Bound, Builder, Conv, ConvNorm, Ctx, DenseBlock,
    DualAttentionDecoder, GatedConvLayer, InitScheme, ParamRegistry, ResidualBlock, TransitionBlock,
};
use crate::tensor::{Scalar, Tensor};

/// Prefix of every shape-stream parameter name.
pub const SHAPE_PREFIX: &str = "shape.";
/// Prefix of non-model tensors stored alongside the parameters.
pub const OPTIM_PREFIX: &str = "optim.";

#[derive(Clone, Debug)]
struct ShapeStream {
    proj: ConvNorm,
    res: Vec<ResidualBlock>,
    gates: Vec<GatedConvLayer>,
    head: Conv,
}

#[derive(Clone, Debug)]
struct Layers {
    stem: ConvNorm,
    dense: Vec<DenseBlock>,
    trans: Vec<TransitionBlock>,
    bridge: ConvNorm,
    /// Coarse to fine.
    decoders: Vec<DualAttentionDecoder>,
    shape: Option<ShapeStream>,
    fuse: ConvNorm,
    classifier: Conv,
}

/// Attention maps of one forward pass, detached from the tape.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBundle<T> {
    /// Shape-stream gates, first gated layer first; each `N×1×H×W`.
    pub alphas: Vec<Tensor<T>>,
    /// Decoder spatial maps, coarse to fine.
    pub spatial_maps: Vec<Tensor<T>>,
    /// Edge probability leaving the shape stream, `N×1×H×W`.
    pub shape_map: Option<Tensor<T>>,
}

impl<T: Scalar> AttentionBundle<T> {
    /// Map of the second-finest decoder.
    pub fn spatial_d2(&self) -> &Tensor<T> {
        &self.spatial_maps[self.spatial_maps.len() - 2]
    }

    /// Map of the third-finest decoder.
    pub fn spatial_d3(&self) -> &Tensor<T> {
        &self.spatial_maps[self.spatial_maps.len() - 3]
    }

    pub fn all_maps(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.alphas.iter().chain(&self.spatial_maps).chain(self.shape_map.as_ref())
    }
}

pub struct ForwardOutput<'t, T: Scalar> {
    pub seg_logits: Var<'t, T>,
    /// Absent when the model has no shape stream.
    pub edge_logits: Option<Var<'t, T>>,
    pub alphas: Vec<Var<'t, T>>,
    pub spatial_maps: Vec<Var<'t, T>>,
    pub shape_map: Option<Var<'t, T>>,
}

impl<T: Scalar> ForwardOutput<'_, T> {
    pub fn attn(&self) -> AttentionBundle<T> {
        let get = |v: &Var<'_, T>| (*v.value()).clone();
        AttentionBundle {
            alphas: self.alphas.iter().map(get).collect(),
            spatial_maps: self.spatial_maps.iter().map(get).collect(),
            shape_map: self.shape_map.as_ref().map(get),
        }
    }
}

/// A forward pass together with the parameter bindings it used.
pub struct ModelPass<'t, T: Scalar> {
    pub out: ForwardOutput<'t, T>,
    pub bound: Bound<'t, T>,
}

/// One row of [`SaUNet::summarize`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockInfo {
    pub name: String,
    pub prefix: String,
    pub out_channels: usize,
    /// Spatial downsampling factor relative to the input.
    pub scale: usize,
    pub params: usize,
}

pub struct SaUNet<T: Scalar> {
    config: ModelConfig,
    pub params: ParamRegistry<T>,
    layers: Layers,
    forward_passes: AtomicUsize,
}

impl<T: Scalar> Clone for SaUNet<T> {
    fn clone(&self) -> Self {
        SaUNet {
            config: self.config.clone(),
            params: self.params.clone(),
            layers: self.layers.clone(),
            forward_passes: AtomicUsize::new(self.forward_passes()),
        }
    }
}

impl<T: Scalar> SaUNet<T> {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut reg = ParamRegistry::new();
        let layers = Self::register(config, &mut Builder::new(&mut reg))?;
        init_params(&mut reg, InitScheme::HeNormal, seed);
        Ok(SaUNet {
            config: config.clone(),
            params: reg,
            layers,
            forward_passes: AtomicUsize::new(0),
        })
    }

    fn register(c: &ModelConfig, b: &mut Builder<'_, T>) -> Result<Layers> {
        let stem = b.scope("stem").conv_norm(c.input_channels, c.stem_channels, 3)?;
        let enc = c.encoder_channels();
        let mut dense = Vec::new();
        let mut trans = Vec::new();
        let mut ch = c.stem_channels;
        for (i, &n) in c.encoder_blocks.iter().enumerate() {
            if i > 0 {
                trans.push(TransitionBlock::build(&mut b.scope(&format!("enc.trans{i}")), ch)?);
                ch /= 2;
            }
            let block = DenseBlock::build(&mut b.scope(&format!("enc.dense{}", i + 1)), ch, n, c.growth)?;
            ch = block.out_channels();
            dense.push(block);
        }
        let dc = &c.decoder_channels;
        let bridge = b.scope("bridge").conv_norm(enc[3], dc[3], 1)?;
        let mut decoders = Vec::new();
        let mut below = dc[3];
        for level in (0..3).rev() {
            let name = format!("dec{}", level + 1);
            decoders.push(DualAttentionDecoder::build(
                &mut b.scope(&name),
                enc[level],
                below,
                dc[level],
                c.se_reduction,
            )?);
            below = dc[level];
        }
        let shape = if c.shape_stream {
            let cs = c.shape_stream_width;
            let mut s = b.scope("shape");
            let proj = s.scope("proj").conv_norm(c.stem_channels, cs, 1)?;
            let mut res = Vec::new();
            let mut gates = Vec::new();
            for l in 1..=3 {
                res.push(ResidualBlock::build(&mut s.scope(&format!("res{l}")), cs)?);
                gates.push(GatedConvLayer::build(&mut s.scope(&format!("gate{l}")), cs, enc[l])?);
            }
            let head = s.scope("head").conv(cs, 1, 1, 0, true)?;
            Some(ShapeStream { proj, res, gates, head })
        } else {
            None
        };
        let fuse_in = dc[0] + if c.shape_stream { 2 } else { 0 };
        let fuse = b.scope("fuse").conv_norm(fuse_in, dc[0], 3)?;
        let classifier = b.scope("classifier").conv(dc[0], c.num_classes, 1, 0, true)?;
        Ok(Layers {
            stem,
            dense,
            trans,
            bridge,
            decoders,
            shape,
            fuse,
            classifier,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn forward_passes(&self) -> usize {
        self.forward_passes.load(Ordering::Relaxed)
    }

    pub fn count_params(&self) -> usize {
        self.params.count_trainable()
    }

    fn check_input(&self, image: &[usize], canny: Option<&[usize]>) -> Result<()> {
        let [n, c, h, w] = image[..] else {
            return Err(Error::invalid_shape("forward", format!("expected N×C×H×W input, got {image:?}")));
        };
        if c != self.config.input_channels {
            return Err(Error::invalid_shape(
                "forward",
                format!("expected {} input channels, got {c}", self.config.input_channels),
            ));
        }
        if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
            return Err(Error::invalid_shape(
                "forward",
                format!("input {h}x{w} must be divisible by 8; pad the image first"),
            ));
        }
        match (self.config.shape_stream, canny) {
            (true, Some(s)) if s == [n, 1, h, w] => Ok(()),
            (true, Some(s)) => Err(Error::shape("forward", &[n, 1, h, w], s)),
            (true, None) => Err(Error::InvalidArgument("model with a shape stream needs an edge channel".into())),
            (false, _) => Ok(()),
        }
    }

    /// Forward pass on tape values; parameters are bound through `cx`.
    pub fn forward_vars<'t>(
        &self,
        cx: &Ctx<'_, 't, T>,
        image: Var<'t, T>,
        canny: Option<Var<'t, T>>,
    ) -> Result<ForwardOutput<'t, T>> {
        let canny_shape = canny.map(|c| c.shape());
        self.check_input(&image.shape(), canny_shape.as_deref())?;
        self.forward_passes.fetch_add(1, Ordering::Relaxed);
        let l = &self.layers;
        let (_, _, h, w) = image.value().dims4("forward")?;

        let stem = l.stem.forward(cx, image)?;
        let mut taps = Vec::with_capacity(4);
        let mut x = stem;
        for (i, block) in l.dense.iter().enumerate() {
            if i > 0 {
                x = l.trans[i - 1].forward(cx, x)?;
            }
            x = block.forward(cx, x)?;
            taps.push(x);
        }

        let mut below = l.bridge.forward(cx, taps[3])?;
        let mut spatial_maps = Vec::with_capacity(3);
        for (dec, level) in l.decoders.iter().zip((0..3).rev()) {
            let (f, map) = dec.forward(cx, taps[level], below)?;
            spatial_maps.push(map);
            below = f;
        }

        let (edge_logits, alphas, shape_map, fused_in) = match &l.shape {
            Some(s) => {
                let mut sh = s.proj.forward(cx, stem)?;
                let mut alphas = Vec::with_capacity(3);
                for (i, (res, gate)) in s.res.iter().zip(&s.gates).enumerate() {
                    sh = res.forward(cx, sh)?;
                    let (gated, alpha) = gate.forward(cx, sh, taps[i + 1])?;
                    debug_assert_eq!(gated.shape()[2..], [h, w]);
                    sh = gated;
                    alphas.push(alpha);
                }
                let edge = s.head.forward(cx, sh)?;
                let shape_map = edge.sigmoid();
                let canny = canny.expect("checked above");
                let fused = Var::concat_channels(&[below, shape_map, canny])?;
                (Some(edge), alphas, Some(shape_map), fused)
            }
            None => (None, Vec::new(), None, below),
        };
        let seg_logits = l.classifier.forward(cx, l.fuse.forward(cx, fused_in)?)?;
        Ok(ForwardOutput {
            seg_logits,
            edge_logits,
            alphas,
            spatial_maps,
            shape_map,
        })
    }

    /// Forward pass on plain tensors; nothing is differentiated with respect to the inputs.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape<T>,
        image: &Tensor<T>,
        canny: Option<&Tensor<T>>,
        mode: Mode,
    ) -> Result<ModelPass<'t, T>> {
        let cx = Ctx::new(tape, &self.params, mode);
        let out = self.forward_vars(&cx, tape.constant(image.clone()), canny.map(|c| tape.constant(c.clone())))?;
        Ok(ModelPass { out, bound: cx.finish() })
    }

    /// One row per block: encoder, bridge, decoders, shape stream, fusion head.
    pub fn blocks(&self) -> Vec<BlockInfo> {
        let c = &self.config;
        let enc = c.encoder_channels();
        let mut rows = vec![("stem", "stem.".to_string(), c.stem_channels, 1)];
        for i in 0..4 {
            if i > 0 {
                rows.push(("transition", format!("enc.trans{i}."), enc[i - 1] / 2, 1 << i));
            }
            rows.push(("dense", format!("enc.dense{}.", i + 1), enc[i], 1 << i));
        }
        rows.push(("bridge", "bridge.".into(), c.decoder_channels[3], 8));
        for level in (0..3).rev() {
            rows.push(("decoder", format!("dec{}.", level + 1), c.decoder_channels[level], 1 << level));
        }
        if c.shape_stream {
            let cs = c.shape_stream_width;
            rows.push(("shape_proj", "shape.proj.".into(), cs, 1));
            for l in 1..=3 {
                rows.push(("residual", format!("shape.res{l}."), cs, 1));
                rows.push(("gated_conv", format!("shape.gate{l}."), cs, 1));
            }
            rows.push(("shape_head", "shape.head.".into(), 1, 1));
        }
        rows.push(("fuse", "fuse.".into(), c.decoder_channels[0], 1));
        rows.push(("classifier", "classifier.".into(), c.num_classes, 1));
        rows.into_iter()
            .map(|(name, prefix, out_channels, scale)| BlockInfo {
                name: name.to_string(),
                params: self
                    .params
                    .iter()
                    .filter(|(_, e)| e.kind.trainable() && e.name.starts_with(&prefix))
                    .map(|(_, e)| e.value.numel())
                    .sum(),
                prefix: prefix.trim_end_matches('.').to_string(),
                out_channels,
                scale,
            })
            .collect()
    }

    /// Text table of blocks for an `h`×`w` input.
    pub fn summarize(&self, h: usize, w: usize) -> String {
        let mut s = format!("{:<16} {:<12} {:>18} {:>10}\n", "block", "kind", "output", "params");
        for b in self.blocks() {
            let shape = format!("{}x{}x{}", b.out_channels, h / b.scale, w / b.scale);
            s += &format!("{:<16} {:<12} {:>18} {:>10}\n", b.prefix, b.name, shape, b.params);
        }
        s += &format!("total trainable parameters: {}\n", self.count_params());
        s
    }

    /// Same model in another precision.
    pub fn cast<U: Scalar>(&self) -> SaUNet<U> {
        SaUNet {
            config: self.config.clone(),
            params: self.params.cast(),
            layers: self.layers.clone(),
            forward_passes: AtomicUsize::new(0),
        }
    }
}

/// JSON file describing the model next to a checkpoint.
pub fn sidecar_path(ckpt: &Path) -> PathBuf {
    let mut name = ckpt.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

impl SaUNet<f32> {
    /// Writes parameters plus `extra` tensors, and the config sidecar.
    pub fn save(&self, path: &Path, extra: &[(String, Tensor<f32>)]) -> Result<()> {
        let mut named = self.params.to_named();
        named.extend(extra.iter().cloned());
        write_container(path, &named)?;
        let side = sidecar_path(path);
        let json = serde_json::to_string_pretty(&self.config).expect("config serializes");
        std::fs::write(&side, json).map_err(|e| Error::io(&side, e))
    }

    /// Loads a checkpoint; tensors under [`OPTIM_PREFIX`] are returned separately.
    pub fn load(path: &Path) -> Result<(Self, Vec<(String, Tensor<f32>)>)> {
        let side = sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let config: ModelConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", side.display())))?;
        let mut model = Self::build(&config, 0)?;
        let (extra, named): (Vec<_>, Vec<_>) = read_container(path)?
            .into_iter()
            .partition(|(n, _)| n.starts_with(OPTIM_PREFIX));
        model.params.load_named(&named)?;
        Ok((model, extra))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_util::{rand_tensor, SplitMix};

    fn inputs(n: usize, h: usize, seed: u64) -> (Tensor<f32>, Tensor<f32>) {
        let mut rng = SplitMix::new(seed);
        let img = rand_tensor(&mut rng, &[n, 1, h, h]);
        let canny = Tensor::from_fn([n, 1, h, h], |i| ((i * 7) % 5 == 0) as u8 as f32);
        (img, canny)
    }

    #[test]
    fn tiny_forward_shape_contract() {
        let m = SaUNet::<f32>::build(&ModelConfig::tiny(), 1).unwrap();
        let (img, canny) = inputs(2, 64, 2);
        let tape = Tape::no_grad();
        let pass = m.forward(&tape, &img, Some(&canny), Mode::Train).unwrap();
        assert_eq!(pass.out.seg_logits.shape(), [2, 4, 64, 64]);
        assert_eq!(pass.out.edge_logits.unwrap().shape(), [2, 1, 64, 64]);
        let attn = pass.out.attn();
        assert_eq!(attn.alphas.len(), 3);
        assert_eq!(attn.spatial_maps.len(), 3);
        for a in &attn.alphas {
            assert_eq!(a.shape(), &[2, 1, 64, 64]);
        }
        let sizes: Vec<usize> = attn.spatial_maps.iter().map(|m| m.shape()[2]).collect();
        assert_eq!(sizes, vec![16, 32, 64]);
        assert_eq!(attn.spatial_d2().shape()[2], 32);
        assert!(attn.all_maps().all(|m| m.data().iter().all(|&v| (0.0..=1.0).contains(&v))));
        assert_eq!(m.forward_passes(), 1);
    }

    #[test]
    fn shape_contract_over_sizes() {
        let m = SaUNet::<f32>::build(&ModelConfig::tiny(), 1).unwrap();
        for (h, w) in [(16, 16), (24, 40), (32, 16)] {
            let img = Tensor::from_fn([2, 1, h, w], |i| (i % 13) as f32 * 0.1);
            let canny = Tensor::zeros([2, 1, h, w]);
            let tape = Tape::no_grad();
            let out = m.forward(&tape, &img, Some(&canny), Mode::Train).unwrap().out;
            assert_eq!(out.seg_logits.shape(), [2, 4, h, w]);
        }
        let tape = Tape::no_grad();
        let bad = m.forward(&tape, &Tensor::zeros([1, 1, 20, 20]), Some(&Tensor::zeros([1, 1, 20, 20])), Mode::Train);
        assert!(matches!(bad, Err(Error::InvalidShape { .. })));
    }

    #[test]
    fn tiny_parameter_count_matches_hand_accounting() {
        let m = SaUNet::<f32>::build(&ModelConfig::tiny(), 1).unwrap();
        assert_eq!(m.count_params(), m.params.iter().filter(|(_, e)| e.kind.trainable()).map(|(_, e)| e.value.numel()).sum::<usize>());
        // Hand accounting, layer by layer.
        let cn = |cin: usize, cout: usize, k: usize| cin * cout * k * k + 2 * cout;
        let conv = |cin: usize, cout: usize| cin * cout + cout;
        let stem = cn(1, 16, 3);
        let dense = cn(16, 8, 3) + cn(24, 8, 3);
        let encoder = stem + 4 * dense + 3 * cn(32, 16, 1);
        let bridge = cn(32, 32, 1);
        let dec = |skip: usize, below: usize, out: usize| {
            below * below * 4
                + cn(skip + below, out, 3)
                + conv(out, out / 4) + conv(out / 4, out)
                + cn(out, out / 2, 1) + conv(out / 2, 1)
        };
        let decoders = dec(32, 32, 32) + dec(32, 32, 24) + dec(32, 24, 16);
        let shape = cn(16, 16, 1) + 3 * (2 * cn(16, 16, 3) + conv(32, 1) + conv(17, 1)) + conv(16, 1);
        let head = cn(18, 16, 3) + conv(16, 4);
        assert_eq!(m.count_params(), encoder + bridge + decoders + shape + head);
        assert!(m.count_params() < 1_000_000);
        let blocks = m.blocks();
        assert_eq!(blocks.iter().map(|b| b.params).sum::<usize>(), m.count_params());
        assert_eq!(m.summarize(64, 64).lines().count(), blocks.len() + 2);
    }

    #[test]
    fn same_seed_same_checksum() {
        let a = SaUNet::<f32>::build(&ModelConfig::tiny(), 3).unwrap();
        let b = SaUNet::<f32>::build(&ModelConfig::tiny(), 3).unwrap();
        let c = SaUNet::<f32>::build(&ModelConfig::tiny(), 4).unwrap();
        assert_eq!(a.params.checksum(), b.params.checksum());
        assert_ne!(a.params.checksum(), c.params.checksum());
    }

    #[test]
    fn dense121_builds() {
        let m = SaUNet::<f32>::build(&ModelConfig::dense121(), 0).unwrap();
        assert_eq!(m.layers.dense.iter().map(|d| d.layers.len()).collect::<Vec<_>>(), vec![6, 12, 24, 16]);
        assert_eq!(m.layers.dense[3].out_channels(), 1024);
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let mut m = SaUNet::<f32>::build(&ModelConfig::tiny(), 5).unwrap();
        let (img, canny) = inputs(2, 32, 6);
        let tape = Tape::no_grad();
        assert!(matches!(
            m.forward(&tape, &img, Some(&canny), Mode::Eval),
            Err(Error::UninitializedRunningStats(_))
        ));
        let pass = m.forward(&tape, &img, Some(&canny), Mode::Train).unwrap();
        let updates = pass.bound.bn_updates;
        m.params.apply_bn_updates(updates);
        let run = || {
            let tape = Tape::no_grad();
            let p = m.forward(&tape, &img, Some(&canny), Mode::Eval).unwrap();
            ((*p.out.seg_logits.value()).clone(), p.out.attn())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let m = SaUNet::<f64>::build(&ModelConfig::tiny(), 7).unwrap();
        let (img, canny) = inputs(2, 16, 8);
        let tape = Tape::new();
        let pass = m.forward(&tape, &img.cast(), Some(&canny.cast()), Mode::Train).unwrap();
        let loss = pass.out.seg_logits.sum().add(pass.out.edge_logits.unwrap().sum()).unwrap();
        let mut grads = tape.backward(loss).unwrap();
        let g = pass.bound.take_grads(&mut grads);
        assert_eq!(g.len(), m.params.trainable().count());
        for (id, t) in &g {
            let name = &m.params.entry(*id).name;
            assert!(t.data().iter().any(|&v| v != 0.0), "no gradient reaches {name}");
        }
    }

    #[test]
    fn shape_stream_never_pools_and_ablation_drops_it() {
        let full = SaUNet::<f32>::build(&ModelConfig::tiny(), 1).unwrap();
        let mut cfg = ModelConfig::tiny();
        cfg.shape_stream = false;
        let ablated = SaUNet::<f32>::build(&cfg, 1).unwrap();
        assert!(ablated.params.iter().all(|(_, e)| !e.name.starts_with(SHAPE_PREFIX)));
        let (img, canny) = inputs(2, 32, 9);
        let (t1, t2) = (Tape::no_grad(), Tape::no_grad());
        full.forward(&t1, &img, Some(&canny), Mode::Train).unwrap();
        let out = ablated.forward(&t2, &img, None, Mode::Train).unwrap().out;
        assert!(out.edge_logits.is_none() && out.alphas.is_empty());
        use crate::autograd::OpKind;
        for kind in [OpKind::AvgPool2d, OpKind::MaxPool2d] {
            assert_eq!(t1.count(kind), t2.count(kind));
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = SaUNet::<f32>::build(&ModelConfig::tiny(), 11).unwrap();
        let extra = vec![("optim.step".to_string(), Tensor::scalar(3.0))];
        m.save(&path, &extra).unwrap();
        let (back, ex) = SaUNet::<f32>::load(&path).unwrap();
        assert_eq!(back.params.checksum(), m.params.checksum());
        assert_eq!(ex, extra);
        assert_eq!(back.config(), m.config());
    }
}
